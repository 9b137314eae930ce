//! Binary checkpoint: a `key=value` text block followed by four tensor
//! sections (generator parameters, generator optimizer moments,
//! discriminator parameters, discriminator optimizer moments). Each section
//! is a tensor count, a manifest of (name, rank, dims, byte offset) and the
//! raw little-endian `f32` data. Empty sections have a zero count.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use pixar_tensor::{OptimizerState, ParamStore};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::config::ModelConfig;
use crate::corpus::Reader;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PXCK";
const VERSION: u32 = 1;

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// 1 after stage-1 training, 2 after adversarial training.
    pub stage: u8,
    pub step: u64,
    pub rng: RngState,
    /// Free-form training state (schedule, stage-2 balancing, ...).
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub disc_params: Option<ParamStore<f32>>,
    pub disc_optimizer: Option<OptimizerState<f32>>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

fn optimizer_pairs(prefix: &str, st: &OptimizerState<f32>, out: &mut Vec<(String, String)>) {
    for (k, v) in [
        ("step", st.step.to_string()),
        ("beta1", st.beta1.to_string()),
        ("beta2", st.beta2.to_string()),
        ("eps", st.eps.to_string()),
        ("weight_decay", st.weight_decay.to_string()),
        ("learning_rate", st.learning_rate.to_string()),
    ] {
        out.push((format!("{prefix}.{k}"), v));
    }
}

struct Section {
    tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn param_section(store: Option<&ParamStore<f32>>) -> Section {
    let tensors = store
        .map(|s| s.iter().map(|(_, p)| (p.name.clone(), p.shape.clone(), p.data.clone())).collect())
        .unwrap_or_default();
    Section { tensors }
}

fn moment_section(store: Option<&ParamStore<f32>>, st: Option<&OptimizerState<f32>>) -> Section {
    let mut tensors = Vec::new();
    if let (Some(store), Some(st)) = (store, st) {
        for ((_, p), (m, v)) in store.iter().zip(st.first_moment.iter().zip(&st.second_moment)) {
            tensors.push((format!("m.{}", p.name), p.shape.clone(), m.clone()));
            tensors.push((format!("v.{}", p.name), p.shape.clone(), v.clone()));
        }
    }
    Section { tensors }
}

fn write_section(out: &mut Vec<u8>, sec: &Section) -> Result<()> {
    out.extend_from_slice(&(sec.tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, shape, data) in &sec.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(shape.len()).map_err(|_| Error::InvalidInput(format!("rank of `{name}`")))?;
        out.push(rank);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::InvalidInput(format!("dimension of `{name}`")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * data.len() as u64;
    }
    for (_, _, data) in &sec.tensors {
        for x in data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(())
}

fn read_section(r: &mut Reader<'_>) -> Result<Section> {
    let bad = |m: String| Error::format("checkpoint", m);
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| bad("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()?;
        manifest.push((name, shape, offset));
    }
    let base = r.pos;
    let mut tensors = Vec::with_capacity(count);
    let mut expected = 0u64;
    for (name, shape, offset) in manifest {
        if offset != expected {
            return Err(bad(format!("tensor `{name}` at offset {offset}, expected {expected}")));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        expected += 4 * n as u64;
        tensors.push((name, shape, data));
    }
    debug_assert_eq!(r.pos - base, expected as usize);
    Ok(Section { tensors })
}

fn store_from(sec: Section) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new();
    for (name, shape, data) in sec.tensors {
        store.insert(&name, &shape, data)?;
    }
    Ok(store)
}

fn optimizer_from(
    prefix: &str,
    kv: &BTreeMap<String, String>,
    sec: Section,
    store: &ParamStore<f32>,
) -> Result<OptimizerState<f32>> {
    let get = |k: &str| -> Result<f64> {
        kv.get(&format!("{prefix}.{k}"))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format("checkpoint", format!("missing or bad `{prefix}.{k}`")))
    };
    let mut st = OptimizerState::new(store, get("learning_rate")?);
    st.step = kv
        .get(&format!("{prefix}.step"))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format("checkpoint", format!("missing `{prefix}.step`")))?;
    st.beta1 = get("beta1")?;
    st.beta2 = get("beta2")?;
    st.eps = get("eps")?;
    st.weight_decay = get("weight_decay")?;
    if sec.tensors.len() != 2 * store.len() {
        return Err(Error::format("checkpoint", format!("{prefix}: moment count mismatch")));
    }
    let mut it = sec.tensors.into_iter();
    for (i, (_, p)) in store.iter().enumerate() {
        let (mn, _, m) = it.next().expect("counted");
        let (vn, _, v) = it.next().expect("counted");
        if mn != format!("m.{}", p.name) || vn != format!("v.{}", p.name) || m.len() != p.numel() || v.len() != p.numel() {
            return Err(Error::format("checkpoint", format!("{prefix}: moments for `{}` are malformed", p.name)));
        }
        st.first_moment[i] = m;
        st.second_moment[i] = v;
    }
    Ok(st)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut pairs: Vec<(String, String)> = self
            .config
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (format!("model.{k}"), v))
            .collect();
        pairs.push(("stage".into(), self.stage.to_string()));
        pairs.push(("step".into(), self.step.to_string()));
        pairs.push(("rng.seed".into(), hex(&self.rng.seed)));
        pairs.push(("rng.stream".into(), self.rng.stream.to_string()));
        pairs.push(("rng.word_pos".into(), self.rng.word_pos.to_string()));
        if let Some(st) = &self.optimizer {
            optimizer_pairs("optim", st, &mut pairs);
        }
        if let Some(st) = &self.disc_optimizer {
            optimizer_pairs("disc_optim", st, &mut pairs);
        }
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::InvalidInput(format!("metadata entry `{k}` cannot be stored")));
            }
            pairs.push((format!("meta.{k}"), v.clone()));
        }
        let text: String = pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect();

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        write_section(&mut out, &param_section(Some(&self.params)))?;
        write_section(&mut out, &moment_section(Some(&self.params), self.optimizer.as_ref()))?;
        write_section(&mut out, &param_section(self.disc_params.as_ref()))?;
        write_section(&mut out, &moment_section(self.disc_params.as_ref(), self.disc_optimizer.as_ref()))?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::format("checkpoint", m.to_string());
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        if r.u32()? != VERSION {
            return Err(bad("unsupported version"));
        }
        let n = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| bad("config block is not UTF-8"))?;
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad("config line without `=`"))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let model: BTreeMap<String, String> = kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("model.").map(|k| (k.to_string(), v.clone())))
            .collect();
        let config = ModelConfig::from_pairs(&model).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let num = |k: &str| kv.get(k).ok_or_else(|| Error::format("checkpoint", format!("missing `{k}`")));
        let stage: u8 = num("stage")?.parse().map_err(|_| bad("bad stage"))?;
        let step: u64 = num("step")?.parse().map_err(|_| bad("bad step"))?;
        let rng = RngState {
            seed: unhex(num("rng.seed")?).ok_or_else(|| bad("bad rng seed"))?,
            stream: num("rng.stream")?.parse().map_err(|_| bad("bad rng stream"))?,
            word_pos: num("rng.word_pos")?.parse().map_err(|_| bad("bad rng position"))?,
        };
        let meta = kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
            .collect();

        let params = store_from(read_section(&mut r)?)?;
        let opt_sec = read_section(&mut r)?;
        let disc_sec = read_section(&mut r)?;
        let disc_opt_sec = read_section(&mut r)?;
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let optimizer = if kv.contains_key("optim.step") {
            Some(optimizer_from("optim", &kv, opt_sec, &params)?)
        } else {
            None
        };
        let disc_params = if disc_sec.tensors.is_empty() {
            None
        } else {
            Some(store_from(disc_sec)?)
        };
        let disc_optimizer = match (&disc_params, kv.contains_key("disc_optim.step")) {
            (Some(store), true) => Some(optimizer_from("disc_optim", &kv, disc_opt_sec, store)?),
            _ => None,
        };
        Ok(Self {
            config,
            stage,
            step,
            rng,
            meta,
            params,
            optimizer,
            disc_params,
            disc_optimizer,
        })
    }

    /// Write through a temporary file so an interrupted save never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
