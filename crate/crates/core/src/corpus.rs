//! Sentence-budget segmentation of raw text, the packed binary dataset
//! file, and shuffled fixed-window batches.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::textrender::{eos_patch, render_text, GlyphAtlas, PatchGeometry, PatchSequence};

const DATASET_MAGIC: &[u8; 4] = b"PXDS";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmenterConfig {
    pub l_max: usize,
    pub l_min: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self { l_max: 1180, l_min: 100 }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_min == 0 || self.l_min > self.l_max {
            return Err(Error::InvalidInput(format!(
                "need 0 < l_min ({}) <= l_max ({})",
                self.l_min, self.l_max
            )));
        }
        Ok(())
    }
}

/// Collapse every whitespace run to one space and trim the ends.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Split after '.', '!' or '?' when followed by whitespace. Whitespace is
/// normalized first, so sentences never carry leading or trailing spaces.
pub fn split_sentences(s: &str) -> Vec<String> {
    let text = normalize_whitespace(s);
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_terminal = false;
    for (i, ch) in text.char_indices() {
        if ch == ' ' && prev_terminal {
            out.push(text[start..i].to_string());
            start = i + 1;
        }
        prev_terminal = matches!(ch, '.' | '!' | '?');
    }
    if start < text.len() {
        out.push(text[start..].to_string());
    }
    out
}

/// Greedy packing of whole sentences into samples of at most `l_max`
/// characters, dropping samples shorter than `l_min`. Sentences are joined
/// by one space, which counts toward the length.
pub fn segment_sentences<S: AsRef<str>>(sentences: &[S], cfg: &SegmenterConfig) -> Vec<String> {
    let mut samples = Vec::new();
    let mut sample = String::new();
    let mut sample_len = 0usize;
    for sent in sentences {
        let sent = sent.as_ref();
        let n = sent.chars().count();
        let sep = usize::from(sample_len > 0);
        if sample_len + sep + n > cfg.l_max {
            if sample_len >= cfg.l_min {
                samples.push(std::mem::take(&mut sample));
            }
            sample = sent.to_string();
            sample_len = n;
        } else {
            if sep == 1 {
                sample.push(' ');
            }
            sample.push_str(sent);
            sample_len += sep + n;
        }
    }
    if sample_len >= cfg.l_min {
        samples.push(sample);
    }
    samples
}

pub fn segment_text(s: &str, cfg: &SegmenterConfig) -> Vec<String> {
    segment_sentences(&split_sentences(s), cfg)
}

/// Binary patch sequences plus the geometry and window they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub geometry: PatchGeometry,
    pub window: usize,
    pub samples: Vec<PatchSequence>,
}

impl Dataset {
    pub fn new(geometry: PatchGeometry, window: usize) -> Self {
        Self {
            geometry,
            window,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean_len(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.len()).sum::<usize>() as f64 / self.samples.len() as f64
    }

    /// Render one text into a sample: patches truncated to the window, then
    /// an EOS patch when there is room.
    pub fn push_text(&mut self, text: &str, atlas: &GlyphAtlas) -> Result<()> {
        let mut seq = render_text(text, atlas, &self.geometry)?;
        seq.truncate(self.window);
        if seq.len() < self.window {
            seq.push(&eos_patch(&self.geometry));
        }
        self.samples.push(seq);
        Ok(())
    }

    pub fn push(&mut self, seq: PatchSequence) -> Result<()> {
        if seq.len() > self.window {
            return Err(Error::WindowOverflow {
                needed: seq.len(),
                window: self.window,
            });
        }
        if seq.patch_len != self.geometry.patch_len() {
            return Err(Error::InvalidInput("sample patch length differs from dataset geometry".into()));
        }
        self.samples.push(seq);
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let g = &self.geometry;
        let window = u16::try_from(self.window).map_err(|_| Error::InvalidInput("window exceeds u16".into()))?;
        let count = u32::try_from(self.samples.len()).map_err(|_| Error::InvalidInput("too many samples".into()))?;
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        for v in [g.height, g.width, g.channels, g.patches_per_step] {
            out.push(u8::try_from(v).map_err(|_| Error::InvalidInput("geometry exceeds u8".into()))?);
        }
        out.extend_from_slice(&window.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        let bytes_per_patch = g.patch_len().div_ceil(8);
        for s in &self.samples {
            out.extend_from_slice(&(s.len() as u16).to_le_bytes());
            for t in 0..s.len() {
                let mut packed = vec![0u8; bytes_per_patch];
                for (i, &v) in s.patch(t).iter().enumerate() {
                    if v >= 0.5 {
                        packed[i / 8] |= 0x80 >> (i % 8);
                    }
                }
                out.extend_from_slice(&packed);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != DATASET_MAGIC {
            return Err(Error::format("dataset", "bad magic"));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::format("dataset", format!("unsupported version {version}")));
        }
        let geometry = PatchGeometry {
            height: r.u8()? as usize,
            width: r.u8()? as usize,
            channels: r.u8()? as usize,
            patches_per_step: r.u8()? as usize,
        };
        geometry
            .validate()
            .map_err(|e| Error::format("dataset", e.to_string()))?;
        let window = r.u16()? as usize;
        let count = r.u32()? as usize;
        let plen = geometry.patch_len();
        let bytes_per_patch = plen.div_ceil(8);
        let mut ds = Dataset::new(geometry, window);
        for i in 0..count {
            let t = r.u16()? as usize;
            if t > window {
                return Err(Error::format("dataset", format!("sample {i} has {t} patches, window {window}")));
            }
            let mut seq = PatchSequence::new(plen);
            let mut patch = vec![0.0f32; plen];
            for _ in 0..t {
                let packed = r.take(bytes_per_patch)?;
                for (j, px) in patch.iter_mut().enumerate() {
                    *px = if packed[j / 8] & (0x80 >> (j % 8)) != 0 { 1.0 } else { 0.0 };
                }
                seq.push(&patch);
            }
            ds.samples.push(seq);
        }
        if r.pos != bytes.len() {
            return Err(Error::format("dataset", "trailing bytes"));
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("file", "unexpected end of data"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub samples: usize,
    pub dropped_chars: usize,
}

/// Segment, render and pack UTF-8 text files into a dataset file.
pub fn build_dataset<P: AsRef<Path>>(
    inputs: &[P],
    atlas: &GlyphAtlas,
    geometry: &PatchGeometry,
    window: usize,
    cfg: &SegmenterConfig,
    out_path: &Path,
) -> Result<(Dataset, BuildStats)> {
    cfg.validate()?;
    geometry.validate()?;
    let mut ds = Dataset::new(*geometry, window);
    let mut stats = BuildStats::default();
    for path in inputs {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut kept = String::with_capacity(raw.len());
        for ch in raw.chars() {
            if ch.is_whitespace() || atlas.covers(ch) {
                kept.push(ch);
            } else {
                stats.dropped_chars += 1;
            }
        }
        for sample in segment_text(&kept, cfg) {
            ds.push_text(&sample, atlas)?;
        }
    }
    if stats.dropped_chars > 0 {
        log::warn!("dropped {} characters outside atlas coverage", stats.dropped_chars);
    }
    stats.samples = ds.len();
    ds.save(out_path)?;
    Ok((ds, stats))
}

/// A batch of samples right-padded with blank patches to `seq_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub sample_ids: Vec<usize>,
    pub seq_len: usize,
    pub patch_len: usize,
    /// `batch * seq_len * patch_len` pixels.
    pub patches: Vec<f32>,
    /// `batch * seq_len`, `true` for real content.
    pub pad_mask: Vec<bool>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn from_sequences(seqs: &[&PatchSequence], ids: Vec<usize>, seq_len: usize, patch_len: usize) -> Self {
        let mut patches = vec![0.0f32; seqs.len() * seq_len * patch_len];
        let mut pad_mask = vec![false; seqs.len() * seq_len];
        for (b, s) in seqs.iter().enumerate() {
            let t = s.len().min(seq_len);
            patches[b * seq_len * patch_len..][..t * patch_len].copy_from_slice(&s.patches[..t * patch_len]);
            pad_mask[b * seq_len..][..t].copy_from_slice(&s.pad_mask[..t]);
        }
        Self {
            sample_ids: ids,
            seq_len,
            patch_len,
            patches,
            pad_mask,
        }
    }

    /// Real length of row `b`.
    pub fn real_len(&self, b: usize) -> usize {
        self.pad_mask[b * self.seq_len..(b + 1) * self.seq_len]
            .iter()
            .take_while(|&&m| m)
            .count()
    }

    /// Same batch cut to `len` positions. Outputs at kept positions are
    /// unchanged under causal attention.
    pub fn truncated(&self, len: usize) -> Self {
        let len = len.min(self.seq_len);
        let mut patches = Vec::with_capacity(self.size() * len * self.patch_len);
        let mut pad_mask = Vec::with_capacity(self.size() * len);
        for b in 0..self.size() {
            patches.extend_from_slice(&self.patches[b * self.seq_len * self.patch_len..][..len * self.patch_len]);
            pad_mask.extend_from_slice(&self.pad_mask[b * self.seq_len..][..len]);
        }
        Self {
            sample_ids: self.sample_ids.clone(),
            seq_len: len,
            patch_len: self.patch_len,
            patches,
            pad_mask,
        }
    }

    /// Cut to the longest real sample.
    pub fn trimmed(&self) -> Self {
        let longest = (0..self.size()).map(|b| self.real_len(b)).max().unwrap_or(0);
        self.truncated(longest.max(1))
    }
}

/// One shuffled pass over a dataset.
#[derive(Debug, Clone)]
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    window: usize,
    cursor: usize,
}

impl<'a> BatchIter<'a> {
    /// The shuffle for epoch `e` is seeded from `(seed, e)`.
    pub fn new(dataset: &'a Dataset, batch_size: usize, window: usize, seed: u64, epoch: u64) -> Result<Self> {
        if batch_size < 1 {
            return Err(Error::InvalidInput("batch_size must be at least 1".into()));
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        Ok(Self {
            dataset,
            order,
            batch_size,
            window,
            cursor: 0,
        })
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let ids = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let seqs: Vec<&PatchSequence> = ids.iter().map(|&i| &self.dataset.samples[i]).collect();
        Some(Batch::from_sequences(&seqs, ids, self.window, self.dataset.geometry.patch_len()))
    }
}

pub fn batch_iter(dataset: &Dataset, batch_size: usize, window: usize, seed: u64) -> Result<BatchIter<'_>> {
    BatchIter::new(dataset, batch_size, window, seed, 0)
}
