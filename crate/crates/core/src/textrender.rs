//! Bitmap-font rasterization of text into fixed-height pixel strips and
//! patch sequences, plus confusable-character attacks on raw text.
//!
//! Ink is 1 and background 0. Glyphs are 8 pixels tall and stored as one
//! byte per column (bit `r` set when row `r` is inked).

use std::collections::BTreeMap;

use rand::seq::{index, IndexedRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Glyph height in pixels; also the required patch height.
pub const GLYPH_HEIGHT: usize = 8;

const BUILTIN_ATLAS: &str = include_str!("../assets/pixel8.pxfont");
const BUILTIN_ATTACKS: &str = include_str!("../assets/confusables.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Glyph {
    pub columns: Vec<u8>,
}

impl Glyph {
    pub fn width(&self) -> usize {
        self.columns.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlyphAtlas {
    glyphs: BTreeMap<char, Glyph>,
    pub inter_glyph_gap: usize,
    pub space_width: usize,
}

impl GlyphAtlas {
    /// The atlas shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_ATLAS).expect("shipped atlas is well formed")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let what = "atlas";
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
        let (_, header) = lines.next().ok_or_else(|| Error::parse(what, 1, "empty file"))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("PXFONT") || parts.next() != Some("1") {
            return Err(Error::parse(what, 1, "expected `PXFONT 1` header"));
        }
        let (mut gap, mut space, mut height) = (None, None, None);
        for kv in parts {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::parse(what, 1, format!("bad field `{kv}`")))?;
            let v: usize = v.parse().map_err(|_| Error::parse(what, 1, format!("bad number in `{kv}`")))?;
            match k {
                "height" => height = Some(v),
                "gap" => gap = Some(v),
                "space" => space = Some(v),
                _ => return Err(Error::parse(what, 1, format!("unknown field `{k}`"))),
            }
        }
        if height != Some(GLYPH_HEIGHT) {
            return Err(Error::parse(what, 1, "height must be 8"));
        }
        let mut atlas = GlyphAtlas {
            glyphs: BTreeMap::new(),
            inter_glyph_gap: gap.unwrap_or(1),
            space_width: space.unwrap_or(3),
        };
        while let Some((no, line)) = lines.next() {
            if line.is_empty() {
                continue;
            }
            let mut f = line.split_whitespace();
            let (Some("glyph"), Some(cp), Some(w), None) = (f.next(), f.next(), f.next(), f.next()) else {
                return Err(Error::parse(what, no, "expected `glyph U+XXXX width=w`"));
            };
            let ch = parse_codepoint(cp).ok_or_else(|| Error::parse(what, no, format!("bad code point `{cp}`")))?;
            let width: usize = w
                .strip_prefix("width=")
                .and_then(|w| w.parse().ok())
                .filter(|&w| w >= 1)
                .ok_or_else(|| Error::parse(what, no, format!("bad width `{w}`")))?;
            let mut columns = vec![0u8; width];
            for r in 0..GLYPH_HEIGHT {
                let (rno, row) = lines
                    .next()
                    .ok_or_else(|| Error::parse(what, no, "glyph has fewer than 8 rows"))?;
                if row.chars().count() != width {
                    return Err(Error::parse(what, rno, format!("row width differs from {width}")));
                }
                for (c, px) in row.chars().enumerate() {
                    match px {
                        '#' => columns[c] |= 1 << r,
                        '.' => {}
                        _ => return Err(Error::parse(what, rno, format!("unexpected pixel {px:?}"))),
                    }
                }
            }
            if columns.iter().all(|&c| c == 0) {
                return Err(Error::parse(what, no, "glyph is blank"));
            }
            if ch == ' ' {
                return Err(Error::parse(what, no, "space is drawn from `space=` and cannot be a glyph"));
            }
            if atlas.glyphs.insert(ch, Glyph { columns }).is_some() {
                return Err(Error::parse(what, no, format!("duplicate glyph {cp}")));
            }
        }
        Ok(atlas)
    }

    pub fn glyph(&self, ch: char) -> Option<&Glyph> {
        self.glyphs.get(&ch)
    }

    /// Whether `ch` can be rendered (space always can).
    pub fn covers(&self, ch: char) -> bool {
        ch == ' ' || self.glyphs.contains_key(&ch)
    }

    /// Glyph characters in ascending code point order.
    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.glyphs.keys().copied()
    }

    pub fn glyphs(&self) -> impl Iterator<Item = (char, &Glyph)> {
        self.glyphs.iter().map(|(&c, g)| (c, g))
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }
}

fn parse_codepoint(s: &str) -> Option<char> {
    let hex = s.strip_prefix("U+")?;
    char::from_u32(u32::from_str_radix(hex, 16).ok()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Patches predicted per position.
    pub patches_per_step: usize,
}

impl Default for PatchGeometry {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            channels: 1,
            patches_per_step: 2,
        }
    }
}

impl PatchGeometry {
    pub fn patch_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn mode(&self) -> PixelMode {
        if self.channels == 3 {
            PixelMode::Rgb
        } else {
            PixelMode::Binary
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height != GLYPH_HEIGHT || self.width == 0 {
            return Err(Error::InvalidInput(format!(
                "patch must be {GLYPH_HEIGHT} pixels tall and non-empty, got {}x{}",
                self.height, self.width
            )));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::InvalidInput(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.patches_per_step == 0 {
            return Err(Error::InvalidInput("patches_per_step must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelMode {
    Binary,
    Rgb,
}

/// A rasterized line of text, one byte per column.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PixelStrip {
    pub columns: Vec<u8>,
}

impl PixelStrip {
    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn pixel(&self, row: usize, col: usize) -> bool {
        self.columns[col] >> row & 1 == 1
    }

    /// Blank columns up to the next multiple of `w`.
    pub fn pad_to_multiple(&mut self, w: usize) {
        let rem = self.columns.len() % w;
        if rem != 0 {
            self.columns.resize(self.columns.len() + w - rem, 0);
        }
    }
}

/// Patches stored row-major, `T x patch_len`. Pixel `(row, col, ch)` of a
/// patch lives at index `(row * W + col) * C + ch`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub patch_len: usize,
    pub patches: Vec<f32>,
    /// `true` for real content, `false` for padding.
    pub pad_mask: Vec<bool>,
    pub source_text: Option<String>,
}

impl PatchSequence {
    pub fn new(patch_len: usize) -> Self {
        Self {
            patch_len,
            patches: Vec::new(),
            pad_mask: Vec::new(),
            source_text: None,
        }
    }

    pub fn len(&self) -> usize {
        self.pad_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pad_mask.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        &self.patches[i * self.patch_len..(i + 1) * self.patch_len]
    }

    pub fn push(&mut self, patch: &[f32]) {
        assert_eq!(patch.len(), self.patch_len, "patch length");
        self.patches.extend_from_slice(patch);
        self.pad_mask.push(true);
    }

    pub fn extend(&mut self, other: &PatchSequence) {
        assert_eq!(other.patch_len, self.patch_len, "patch length");
        self.patches.extend_from_slice(&other.patches);
        self.pad_mask.extend_from_slice(&other.pad_mask);
    }

    pub fn truncate(&mut self, t: usize) {
        self.patches.truncate(t * self.patch_len);
        self.pad_mask.truncate(t);
    }

    /// Number of leading real (unpadded) patches.
    pub fn real_len(&self) -> usize {
        self.pad_mask.iter().take_while(|&&m| m).count()
    }
}

/// Lay glyphs out left to right: `inter_glyph_gap` blank columns between
/// adjacent glyphs, `space_width` blank columns per space and no extra gap
/// around spaces.
pub fn render_strip(text: &str, atlas: &GlyphAtlas) -> Result<PixelStrip> {
    let mut columns = Vec::new();
    let mut after_glyph = false;
    for (offset, ch) in text.chars().enumerate() {
        if ch == ' ' {
            columns.resize(columns.len() + atlas.space_width, 0);
            after_glyph = false;
            continue;
        }
        let glyph = atlas.glyph(ch).ok_or(Error::Unrenderable { ch, offset })?;
        if after_glyph {
            columns.resize(columns.len() + atlas.inter_glyph_gap, 0);
        }
        columns.extend_from_slice(&glyph.columns);
        after_glyph = true;
    }
    Ok(PixelStrip { columns })
}

/// Cut a strip into patches, right-padding it to a multiple of the patch
/// width first.
pub fn patchify(strip: &PixelStrip, geometry: &PatchGeometry) -> PatchSequence {
    let (h, w, c) = (geometry.height, geometry.width, geometry.channels);
    let mut strip = strip.clone();
    strip.pad_to_multiple(w);
    let mut seq = PatchSequence::new(geometry.patch_len());
    let mut patch = vec![0.0f32; geometry.patch_len()];
    for chunk in strip.columns.chunks(w) {
        for row in 0..h {
            for (col, &bits) in chunk.iter().enumerate() {
                let v = if bits >> row & 1 == 1 { 1.0 } else { 0.0 };
                patch[(row * w + col) * c..][..c].fill(v);
            }
        }
        seq.push(&patch);
    }
    seq
}

/// Reassemble patches into a strip; a pixel is ink when its first channel
/// is at least 0.5.
pub fn unpatchify(seq: &PatchSequence, geometry: &PatchGeometry) -> PixelStrip {
    let (h, w, c) = (geometry.height, geometry.width, geometry.channels);
    let mut columns = vec![0u8; seq.len() * w];
    for t in 0..seq.len() {
        let p = seq.patch(t);
        for row in 0..h {
            for col in 0..w {
                if p[(row * w + col) * c] >= 0.5 {
                    columns[t * w + col] |= 1 << row;
                }
            }
        }
    }
    PixelStrip { columns }
}

/// Render `text` into a patch sequence. The atlas is binary, so both modes
/// produce values in {0, 1}; RGB repeats each value across channels.
pub fn render_text(text: &str, atlas: &GlyphAtlas, geometry: &PatchGeometry) -> Result<PatchSequence> {
    geometry.validate()?;
    let strip = render_strip(text, atlas)?;
    let mut seq = patchify(&strip, geometry);
    seq.source_text = Some(text.to_string());
    Ok(seq)
}

/// The all-ink end-of-sequence patch.
pub fn eos_patch(geometry: &PatchGeometry) -> Vec<f32> {
    vec![1.0; geometry.patch_len()]
}

pub fn is_eos(patch: &[f32]) -> bool {
    patch.iter().all(|&v| v >= 0.5)
}

/// Append the 3-column generation gap and pad to the patch boundary.
pub fn generation_gap(strip: &PixelStrip, patch_width: usize) -> PixelStrip {
    let mut out = strip.clone();
    out.columns.resize(out.columns.len() + GENERATION_GAP, 0);
    out.pad_to_multiple(patch_width);
    out
}

/// Blank columns inserted between a prompt and its continuation.
pub const GENERATION_GAP: usize = 3;

/// Render a prompt, append the generation gap and patchify.
pub fn render_prompt(text: &str, atlas: &GlyphAtlas, geometry: &PatchGeometry) -> Result<PatchSequence> {
    geometry.validate()?;
    let strip = generation_gap(&render_strip(text, atlas)?, geometry.width);
    let mut seq = patchify(&strip, geometry);
    seq.source_text = Some(text.to_string());
    Ok(seq)
}

/// Letter → look-alike replacements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackTable {
    map: BTreeMap<char, Vec<char>>,
}

impl AttackTable {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_ATTACKS).expect("shipped attack table is well formed")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let what = "attack table";
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let no = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (letter, reps) = line
                .split_once("->")
                .ok_or_else(|| Error::parse(what, no, "expected `letter -> U+XXXX,...`"))?;
            let mut lc = letter.trim().chars();
            let (Some(letter), None) = (lc.next(), lc.next()) else {
                return Err(Error::parse(what, no, "left side must be one character"));
            };
            if !letter.is_ascii_alphabetic() {
                return Err(Error::parse(what, no, format!("{letter:?} is not an English letter")));
            }
            let mut list = Vec::new();
            for cp in reps.split(',').map(str::trim) {
                let ch = parse_codepoint(cp).ok_or_else(|| Error::parse(what, no, format!("bad code point `{cp}`")))?;
                if ch == letter {
                    return Err(Error::parse(what, no, format!("{letter:?} maps to itself")));
                }
                list.push(ch);
            }
            if map.insert(letter, list).is_some() {
                return Err(Error::parse(what, no, format!("duplicate entry for {letter:?}")));
            }
        }
        Ok(Self { map })
    }

    pub fn replacements(&self, letter: char) -> Option<&[char]> {
        self.map.get(&letter).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (char, &[char])> {
        self.map.iter().map(|(&c, v)| (c, v.as_slice()))
    }

    /// Every replacement must be renderable.
    pub fn check_atlas(&self, atlas: &GlyphAtlas) -> Result<()> {
        for (letter, reps) in &self.map {
            if let Some(ch) = reps.iter().find(|&&c| atlas.glyph(c).is_none()) {
                return Err(Error::InvalidInput(format!(
                    "replacement {ch:?} for {letter:?} is missing from the atlas"
                )));
            }
        }
        Ok(())
    }
}

/// Replace `round(ratio * letters)` ASCII letters, chosen uniformly without
/// replacement, by a uniformly chosen look-alike.
pub fn apply_visual_attack(text: &str, table: &AttackTable, ratio: f64, seed: u64) -> Result<String> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidInput(format!("attack ratio {ratio} outside [0, 1]")));
    }
    let mut chars: Vec<char> = text.chars().collect();
    let letters: Vec<usize> = (0..chars.len()).filter(|&i| chars[i].is_ascii_alphabetic()).collect();
    let n = (ratio * letters.len() as f64 + 0.5).floor() as usize;
    if n == 0 {
        return Ok(text.to_string());
    }
    if let Some(&i) = letters.iter().find(|&&i| table.replacements(chars[i]).is_none()) {
        return Err(Error::InvalidInput(format!("letter {:?} has no confusables", chars[i])));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, letters.len(), n).into_vec();
    picked.sort_unstable();
    for k in picked {
        let pos = letters[k];
        let reps = table.replacements(chars[pos]).expect("checked above");
        chars[pos] = *reps.choose(&mut rng).expect("replacement lists are non-empty");
    }
    Ok(chars.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_has_no_patches() {
        let seq = render_text("", &GlyphAtlas::builtin(), &PatchGeometry::default()).unwrap();
        assert!(seq.is_empty());
    }

    #[test]
    fn spaces_and_gaps() {
        let atlas = GlyphAtlas::builtin();
        let w = |s: &str| render_strip(s, &atlas).unwrap().width();
        let (a, b) = (atlas.glyph('a').unwrap().width(), atlas.glyph('b').unwrap().width());
        assert_eq!(w("ab"), a + 1 + b);
        assert_eq!(w("a b"), a + 3 + b);
        assert_eq!(w("a  b"), a + 6 + b);
        assert_eq!(w(" "), 3);
    }

    #[test]
    fn unknown_character_reports_offset() {
        let err = render_strip("ab\u{2603}", &GlyphAtlas::builtin()).unwrap_err();
        assert!(matches!(err, Error::Unrenderable { ch: '\u{2603}', offset: 2 }));
    }

    #[test]
    fn gap_widths() {
        let strip = PixelStrip { columns: vec![0xff; 13] };
        assert_eq!(generation_gap(&strip, 8).width(), 16);
        let strip = PixelStrip { columns: vec![0xff; 8] };
        let gapped = generation_gap(&strip, 8);
        assert_eq!(gapped.width(), 16);
        assert!(gapped.columns[8..].iter().all(|&c| c == 0));
    }

    #[test]
    fn eos_is_all_ink() {
        let p = eos_patch(&PatchGeometry::default());
        assert_eq!(p.len(), 64);
        assert_eq!(p.iter().sum::<f32>(), 64.0);
    }

    #[test]
    fn rgb_repeats_channels() {
        let atlas = GlyphAtlas::builtin();
        let rgb = PatchGeometry { channels: 3, ..Default::default() };
        let bin = render_text("Hi", &atlas, &PatchGeometry::default()).unwrap();
        let col = render_text("Hi", &atlas, &rgb).unwrap();
        assert_eq!(col.patches.len(), bin.patches.len() * 3);
        for (i, &v) in bin.patches.iter().enumerate() {
            assert!(col.patches[i * 3..i * 3 + 3].iter().all(|&x| x == v));
        }
    }

    #[test]
    fn attack_forced_and_identity() {
        let table = AttackTable::parse("a -> U+03B1").unwrap();
        assert_eq!(apply_visual_attack("aaa", &table, 1.0, 7).unwrap(), "ααα");
        assert_eq!(apply_visual_attack("xyz", &table, 0.0, 7).unwrap(), "xyz");
        assert!(apply_visual_attack("ab", &table, 1.0, 7).is_err());
        assert!(apply_visual_attack("a", &table, 1.5, 7).is_err());
    }

    #[test]
    fn attack_table_rejects_self_mapping() {
        assert!(AttackTable::parse("a -> U+0061").is_err());
    }

    #[test]
    fn shipped_tables_are_consistent() {
        let atlas = GlyphAtlas::builtin();
        let table = AttackTable::builtin();
        table.check_atlas(&atlas).unwrap();
        for c in ('a'..='z').chain('A'..='Z') {
            assert!(table.replacements(c).is_some_and(|r| !r.is_empty()), "{c}");
        }
    }
}
