//! Greedy patch generation, template-matching recognition of rendered
//! text, readability and answer matching, and PBM/PGM export.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use pixar_tensor::Real;

use crate::error::{Error, Result};
use crate::model::{decode_logits, Transformer};
use crate::textrender::{is_eos, render_prompt, unpatchify, GlyphAtlas, PatchGeometry, PatchSequence, PixelStrip, GLYPH_HEIGHT};

const BUILTIN_VOCAB: &str = include_str!("../assets/vocab.txt");

/// Replacement for runs no glyph matches closely.
pub const UNKNOWN_GLYPH: char = '?';

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub prompt_patches: PatchSequence,
    pub generated_patches: PatchSequence,
    pub recognized_text: String,
    /// Each recognized word with the summed Hamming distance of its glyphs.
    pub per_word_distances: Vec<(String, u32)>,
}

/// Render `prompt_text`, append the generation gap, then greedily generate
/// `steps * L` patches.
pub fn generate<F: Real>(model: &Transformer<F>, prompt_text: &str, steps: usize, atlas: &GlyphAtlas) -> Result<GenerationResult> {
    let prompt = render_prompt(prompt_text, atlas, &model.config.geometry)?;
    generate_from(model, prompt, steps, atlas)
}

/// Generate from an already rasterized prompt. Each step runs one forward
/// pass and appends the decoded `L` patches of the last position.
pub fn generate_from<F: Real>(model: &Transformer<F>, prompt: PatchSequence, steps: usize, atlas: &GlyphAtlas) -> Result<GenerationResult> {
    let cfg = &model.config;
    let l = cfg.geometry.patches_per_step;
    let needed = prompt.len() + steps * l;
    if needed > cfg.window {
        return Err(Error::WindowOverflow {
            needed,
            window: cfg.window,
        });
    }
    let out = cfg.out_len();
    let p = cfg.patch_len();
    let mut seq = prompt.clone();
    let mut generated = PatchSequence::new(p);
    for _ in 0..steps {
        let (logits, _) = model.forward(&seq, false)?;
        let last = &logits[(seq.len() - 1) * out..seq.len() * out];
        let pixels = decode_logits(last, cfg.sigmoid_temperature, cfg.decode_threshold, cfg.geometry.mode());
        for block in pixels.chunks(p) {
            seq.push(block);
            generated.push(block);
        }
    }
    let rec = recognize_detailed(&generated, &cfg.geometry, atlas);
    Ok(GenerationResult {
        prompt_patches: prompt,
        generated_patches: generated,
        recognized_text: rec.text,
        per_word_distances: rec.words,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Recognition {
    pub text: String,
    pub words: Vec<(String, u32)>,
}

/// Hamming distance between a run and a glyph shifted by `offset` columns,
/// over the union of their extents.
fn aligned_distance(run: &[u8], glyph: &[u8], offset: isize) -> u32 {
    let start = offset.min(0);
    let end = (run.len() as isize).max(offset + glyph.len() as isize);
    (start..end)
        .map(|x| {
            let r = usize::try_from(x).ok().and_then(|i| run.get(i)).copied().unwrap_or(0);
            let g = usize::try_from(x - offset).ok().and_then(|i| glyph.get(i)).copied().unwrap_or(0);
            (r ^ g).count_ones()
        })
        .sum()
}

/// Best glyph for a run of non-blank columns: minimal distance over
/// alignments -1..=1, ties to the lowest code point.
pub fn match_glyph(run: &[u8], atlas: &GlyphAtlas) -> (char, u32) {
    let mut best = (UNKNOWN_GLYPH, u32::MAX);
    for (ch, glyph) in atlas.glyphs() {
        for offset in -1..=1 {
            let d = aligned_distance(run, &glyph.columns, offset);
            if d < best.1 {
                best = (ch, d);
            }
        }
    }
    if f64::from(best.1) > 0.25 * (run.len() * GLYPH_HEIGHT) as f64 {
        best.0 = UNKNOWN_GLYPH;
    }
    best
}

/// Recognize a pixel strip: runs of non-blank columns are glyphs, a blank
/// run of `b >= space_width` columns becomes `b / space_width` spaces and
/// trailing blank columns are ignored.
pub fn recognize_strip(strip: &PixelStrip, atlas: &GlyphAtlas) -> Recognition {
    let cols = &strip.columns;
    let mut rec = Recognition::default();
    let mut word = String::new();
    let mut word_dist = 0u32;
    let mut x = 0;
    while x < cols.len() {
        let blank_start = x;
        while x < cols.len() && cols[x] == 0 {
            x += 1;
        }
        if x == cols.len() {
            break;
        }
        let spaces = (x - blank_start) / atlas.space_width;
        if spaces > 0 {
            if !word.is_empty() {
                rec.words.push((std::mem::take(&mut word), word_dist));
                word_dist = 0;
            }
            rec.text.extend(std::iter::repeat_n(' ', spaces));
        }
        let run_start = x;
        while x < cols.len() && cols[x] != 0 {
            x += 1;
        }
        let (ch, d) = match_glyph(&cols[run_start..x], atlas);
        rec.text.push(ch);
        word.push(ch);
        word_dist += d;
    }
    if !word.is_empty() {
        rec.words.push((word, word_dist));
    }
    rec
}

/// Patches up to (not including) the first EOS patch.
pub fn strip_until_eos(seq: &PatchSequence) -> PatchSequence {
    let end = (0..seq.len()).find(|&t| is_eos(seq.patch(t))).unwrap_or(seq.len());
    let mut out = seq.clone();
    out.truncate(end);
    out
}

pub fn recognize_detailed(patches: &PatchSequence, geometry: &PatchGeometry, atlas: &GlyphAtlas) -> Recognition {
    recognize_strip(&unpatchify(&strip_until_eos(patches), geometry), atlas)
}

/// Text of a patch sequence, read up to the first EOS patch.
pub fn recognize(patches: &PatchSequence, geometry: &PatchGeometry, atlas: &GlyphAtlas) -> String {
    recognize_detailed(patches, geometry, atlas).text
}

/// Case-insensitive word list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: HashSet<String>,
    pub source: String,
}

impl Vocabulary {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_VOCAB, "built-in list").expect("shipped vocabulary is non-empty")
    }

    /// One word per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let words: HashSet<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        if words.is_empty() {
            return Err(Error::InvalidInput(format!("vocabulary from {source} is empty")));
        }
        Ok(Self {
            words,
            source: source.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

fn strip_punctuation(word: &str) -> &str {
    word.trim_matches(|c: char| !c.is_alphanumeric())
}

/// First whitespace-delimited token with surrounding punctuation removed.
pub fn first_word(text: &str) -> Option<&str> {
    text.split_whitespace().next().map(strip_punctuation).filter(|w| !w.is_empty())
}

/// Case-insensitive comparison of the first predicted word with the target.
pub fn first_word_match(predicted: &str, target: &str) -> bool {
    match first_word(predicted) {
        Some(w) => w.to_lowercase() == strip_punctuation(target.trim()).to_lowercase(),
        None => false,
    }
}

/// Fraction of texts whose first word is in the vocabulary.
pub fn readability<S: AsRef<str>>(texts: &[S], vocab: &Vocabulary) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::InvalidInput("readability of an empty result set".into()));
    }
    let readable = texts
        .iter()
        .filter(|t| first_word(t.as_ref()).is_some_and(|w| vocab.contains(w)))
        .count();
    Ok(readable as f64 / texts.len() as f64)
}

/// Binary PBM (P4); ink is black.
pub fn write_pbm(path: &Path, strip: &PixelStrip) -> Result<()> {
    let w = strip.width();
    let mut out = format!("P4\n{w} {GLYPH_HEIGHT}\n").into_bytes();
    for row in 0..GLYPH_HEIGHT {
        let mut bytes = vec![0u8; w.div_ceil(8)];
        for col in 0..w {
            if strip.pixel(row, col) {
                bytes[col / 8] |= 0x80 >> (col % 8);
            }
        }
        out.extend_from_slice(&bytes);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// 8-bit grayscale PGM (P5) from row-major pixels.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::InvalidInput("PGM pixel count differs from width*height".into()));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Grayscale image of a patch sequence (channel mean scaled to 0-255, ink
/// dark), for RGB outputs.
pub fn patches_to_gray(seq: &PatchSequence, geometry: &PatchGeometry) -> (usize, usize, Vec<u8>) {
    let (h, w, c) = (geometry.height, geometry.width, geometry.channels);
    let width = seq.len() * w;
    let mut px = vec![255u8; width * h];
    for t in 0..seq.len() {
        let p = seq.patch(t);
        for row in 0..h {
            for col in 0..w {
                let v: f32 = p[(row * w + col) * c..][..c].iter().sum::<f32>() / c as f32;
                px[row * width + t * w + col] = 255 - (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    (width, h, px)
}
