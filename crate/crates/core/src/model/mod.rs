//! Decoder-only transformer over pixel patches, and the discriminator built
//! from a copy of it.
//!
//! Layout per block: pre-RMSNorm, multi-head causal attention with rotary
//! positions, residual; pre-RMSNorm, SwiGLU feed-forward, residual. A final
//! RMSNorm precedes the output projection, which emits `L` patch logit
//! blocks per position in offset order.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, RngState};
pub use config::ModelConfig;

use pixar_tensor::{Graph, NodeId, ParamId, ParamStore, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::textrender::{PatchSequence, PixelMode};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
struct LayerIds {
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ffn_norm: ParamId,
    gate: ParamId,
    up: ParamId,
    down: ParamId,
}

/// Parameter handles shared by the generator and the discriminator.
#[derive(Debug, Clone)]
struct BackboneIds {
    embed_w: ParamId,
    embed_b: ParamId,
    layers: Vec<LayerIds>,
    final_norm: ParamId,
}

enum Init {
    Normal,
    Ones,
    Zeros,
}

fn backbone_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, ff, p) = (cfg.hidden_dim, cfg.ff_hidden_dim, cfg.patch_len());
    let mut v = vec![
        ("embed.weight".to_string(), vec![p, d], Init::Normal),
        ("embed.bias".to_string(), vec![d], Init::Zeros),
    ];
    for l in 0..cfg.n_layers {
        let n = |s: &str| format!("layers.{l}.{s}");
        v.push((n("attn_norm.gain"), vec![d], Init::Ones));
        for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            v.push((n(w), vec![d, d], Init::Normal));
        }
        v.push((n("ffn_norm.gain"), vec![d], Init::Ones));
        v.push((n("ffn.gate"), vec![d, ff], Init::Normal));
        v.push((n("ffn.up"), vec![d, ff], Init::Normal));
        v.push((n("ffn.down"), vec![ff, d], Init::Normal));
    }
    v.push(("final_norm.gain".to_string(), vec![d], Init::Ones));
    v
}

fn init_values<F: Real>(init: &Init, n: usize, rng: &mut ChaCha8Rng) -> Vec<F> {
    match init {
        Init::Ones => vec![F::one(); n],
        Init::Zeros => vec![F::zero(); n],
        Init::Normal => {
            let dist = Normal::new(0.0, INIT_STD).expect("valid std");
            (0..n).map(|_| F::lit(dist.sample(rng))).collect()
        }
    }
}

fn insert_all<F: Real>(store: &mut ParamStore<F>, shapes: Vec<(String, Vec<usize>, Init)>, rng: &mut ChaCha8Rng) -> Result<()> {
    for (name, shape, init) in shapes {
        let n = shape.iter().product();
        store.insert(&name, &shape, init_values(&init, n, rng))?;
    }
    Ok(())
}

fn lookup<F: Real>(store: &ParamStore<F>, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store.id(name)?;
    let p = store.get(id);
    if p.shape != shape {
        return Err(Error::format(
            "parameters",
            format!("`{name}` has shape {:?}, config implies {shape:?}", p.shape),
        ));
    }
    Ok(id)
}

impl BackboneIds {
    fn resolve<F: Real>(store: &ParamStore<F>, cfg: &ModelConfig) -> Result<Self> {
        let shapes = backbone_shapes(cfg);
        let mut it = shapes.iter().map(|(n, s, _)| lookup(store, n, s));
        let mut next = || it.next().expect("shape list matches layout");
        let embed_w = next()?;
        let embed_b = next()?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerIds {
                attn_norm: next()?,
                wq: next()?,
                wk: next()?,
                wv: next()?,
                wo: next()?,
                ffn_norm: next()?,
                gate: next()?,
                up: next()?,
                down: next()?,
            });
        }
        let final_norm = next()?;
        Ok(Self {
            embed_w,
            embed_b,
            layers,
            final_norm,
        })
    }
}

/// Graph nodes produced by a backbone pass.
#[derive(Debug, Clone)]
pub struct BackboneNodes {
    /// Final normalized hidden states, `[rows, d]`.
    pub hidden: NodeId,
    /// Per-layer attention nodes (their recorded weights form the trace).
    pub attention: Vec<NodeId>,
    /// Per-layer rotated keys and values, `[rows, d]` each.
    pub kv: Vec<(NodeId, NodeId)>,
}

struct Backbone<'a, F: Real> {
    cfg: &'a ModelConfig,
    store: &'a ParamStore<F>,
    ids: &'a BackboneIds,
    trainable: bool,
}

impl<F: Real> Backbone<'_, F> {
    fn p(&self, g: &mut Graph<F>, id: ParamId) -> NodeId {
        g.param(self.store, id, self.trainable)
    }

    fn embed(&self, g: &mut Graph<F>, input: NodeId) -> NodeId {
        let w = self.p(g, self.ids.embed_w);
        let b = self.p(g, self.ids.embed_b);
        let h = g.matmul(input, w);
        g.add_row(h, b)
    }

    fn qkv(&self, g: &mut Graph<F>, l: &LayerIds, h: NodeId, positions: &[usize]) -> (NodeId, NodeId, NodeId) {
        let gain = self.p(g, l.attn_norm);
        let x = g.rmsnorm(h, gain, self.cfg.rmsnorm_eps);
        let (wq, wk, wv) = (self.p(g, l.wq), self.p(g, l.wk), self.p(g, l.wv));
        let q = g.matmul(x, wq);
        let k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        let q = g.rope(q, positions, self.cfg.head_dim(), self.cfg.rope_base);
        let k = g.rope(k, positions, self.cfg.head_dim(), self.cfg.rope_base);
        (q, k, v)
    }

    fn finish_layer(&self, g: &mut Graph<F>, l: &LayerIds, h: NodeId, attn: NodeId) -> NodeId {
        let wo = self.p(g, l.wo);
        let o = g.matmul(attn, wo);
        let h = g.add(h, o);
        let gain = self.p(g, l.ffn_norm);
        let x = g.rmsnorm(h, gain, self.cfg.rmsnorm_eps);
        let (wg, wu, wd) = (self.p(g, l.gate), self.p(g, l.up), self.p(g, l.down));
        let gate = g.matmul(x, wg);
        let gate = g.swish(gate);
        let up = g.matmul(x, wu);
        let act = g.mul(gate, up);
        let down = g.matmul(act, wd);
        g.add(h, down)
    }

    fn final_norm(&self, g: &mut Graph<F>, h: NodeId) -> NodeId {
        let gain = self.p(g, self.ids.final_norm);
        g.rmsnorm(h, gain, self.cfg.rmsnorm_eps)
    }

    /// Causal pass over `batch` sequences of `seq` patches each.
    fn causal(&self, g: &mut Graph<F>, input: NodeId, batch: usize, seq: usize) -> BackboneNodes {
        let positions: Vec<usize> = (0..batch * seq).map(|r| r % seq).collect();
        let mut h = self.embed(g, input);
        let mut attention = Vec::with_capacity(self.ids.layers.len());
        let mut kv = Vec::with_capacity(self.ids.layers.len());
        for l in &self.ids.layers {
            let (q, k, v) = self.qkv(g, l, h, &positions);
            let a = g.causal_attention(q, k, v, batch, seq, self.cfg.n_heads);
            attention.push(a);
            kv.push((k, v));
            h = self.finish_layer(g, l, h, a);
        }
        let hidden = self.final_norm(g, h);
        BackboneNodes { hidden, attention, kv }
    }

    /// Rows placed after real prefixes whose keys/values come from `ctx`.
    fn prefixed(
        &self,
        g: &mut Graph<F>,
        input: NodeId,
        positions: &[usize],
        ctx: &[(NodeId, NodeId)],
        spans: &[(usize, usize)],
    ) -> NodeId {
        let mut h = self.embed(g, input);
        for (l, &(ck, cv)) in self.ids.layers.iter().zip(ctx) {
            let (q, k, v) = self.qkv(g, l, h, positions);
            let a = g.prefix_attention(q, k, v, ck, cv, spans, self.cfg.n_heads);
            h = self.finish_layer(g, l, h, a);
        }
        self.final_norm(g, h)
    }
}

fn to_real<F: Real>(xs: &[f32]) -> Vec<F> {
    xs.iter().map(|&x| F::lit(f64::from(x))).collect()
}

/// Per-layer attention weights for one sequence, each `[heads, T, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub heads: usize,
    pub seq_len: usize,
    pub layers: Vec<Vec<f32>>,
}

impl AttentionTrace {
    pub fn weight(&self, layer: usize, head: usize, i: usize, j: usize) -> f32 {
        self.layers[layer][(head * self.seq_len + i) * self.seq_len + j]
    }

    /// Row `i` of `layer` averaged over heads.
    pub fn head_mean_row(&self, layer: usize, i: usize) -> Vec<f64> {
        let mut row = vec![0.0f64; self.seq_len];
        for h in 0..self.heads {
            for (j, r) in row.iter_mut().enumerate() {
                *r += f64::from(self.weight(layer, h, i, j));
            }
        }
        row.iter_mut().for_each(|r| *r /= self.heads as f64);
        row
    }
}

/// The generator: backbone plus the `d -> L*H*W*C` output projection.
#[derive(Debug, Clone)]
pub struct Transformer<F: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    ids: BackboneIds,
    head_w: ParamId,
    head_b: ParamId,
}

/// Names of the output projection, the layer whose gradient scale balances
/// the two stage-2 losses.
pub const OUTPUT_LAYER: [&str; 2] = ["head.weight", "head.bias"];

#[derive(Debug, Clone)]
pub struct GeneratorNodes {
    pub logits: NodeId,
    pub backbone: BackboneNodes,
}

impl<F: Real> Transformer<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        insert_all(&mut store, backbone_shapes(&config), &mut rng)?;
        let (d, out) = (config.hidden_dim, config.out_len());
        insert_all(
            &mut store,
            vec![
                (OUTPUT_LAYER[0].to_string(), vec![d, out], Init::Normal),
                (OUTPUT_LAYER[1].to_string(), vec![out], Init::Zeros),
            ],
            &mut rng,
        )?;
        Self::from_params(config, store)
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let ids = BackboneIds::resolve(&params, &config)?;
        let head_w = lookup(&params, OUTPUT_LAYER[0], &[config.hidden_dim, config.out_len()])?;
        let head_b = lookup(&params, OUTPUT_LAYER[1], &[config.out_len()])?;
        let expected = backbone_shapes(&config).len() + 2;
        if params.len() != expected {
            return Err(Error::format(
                "parameters",
                format!("{} tensors present, config implies {expected}", params.len()),
            ));
        }
        Ok(Self {
            config,
            params,
            ids,
            head_w,
            head_b,
        })
    }

    pub fn output_layer_ids(&self) -> [ParamId; 2] {
        [self.head_w, self.head_b]
    }

    /// Same weights in another precision.
    pub fn cast<G: Real>(&self) -> Transformer<G> {
        Transformer::from_params(self.config.clone(), self.params.cast()).expect("same layout")
    }

    fn backbone(&self, trainable: bool) -> Backbone<'_, F> {
        Backbone {
            cfg: &self.config,
            store: &self.params,
            ids: &self.ids,
            trainable,
        }
    }

    /// Build the forward pass for `input` (`[batch*seq, patch_len]`).
    pub fn graph_forward(&self, g: &mut Graph<F>, input: NodeId, batch: usize, seq: usize, trainable: bool) -> GeneratorNodes {
        let backbone = self.backbone(trainable).causal(g, input, batch, seq);
        let w = g.param(&self.params, self.head_w, trainable);
        let b = g.param(&self.params, self.head_b, trainable);
        let logits = g.matmul(backbone.hidden, w);
        let logits = g.add_row(logits, b);
        GeneratorNodes { logits, backbone }
    }

    fn check_len(&self, t: usize) -> Result<()> {
        if t > self.config.window {
            return Err(Error::WindowOverflow {
                needed: t,
                window: self.config.window,
            });
        }
        if t == 0 {
            return Err(Error::InvalidInput("cannot run the model on an empty sequence".into()));
        }
        Ok(())
    }

    /// Logits `[T, L*patch_len]` for one sequence, optionally with the
    /// attention trace.
    pub fn forward(&self, seq: &PatchSequence, capture_attention: bool) -> Result<(Vec<F>, Option<AttentionTrace>)> {
        let (logits, hidden, trace) = self.forward_full(seq, capture_attention)?;
        drop(hidden);
        Ok((logits, trace))
    }

    /// Logits, final hidden states `[T, d]` and the optional trace.
    #[allow(clippy::type_complexity)]
    pub fn forward_full(&self, seq: &PatchSequence, capture_attention: bool) -> Result<(Vec<F>, Vec<F>, Option<AttentionTrace>)> {
        if seq.patch_len != self.config.patch_len() {
            return Err(Error::InvalidInput(format!(
                "patch length {} does not match the model's {}",
                seq.patch_len,
                self.config.patch_len()
            )));
        }
        let t = seq.len();
        self.check_len(t)?;
        let mut g = Graph::new();
        let input = g.input(to_real(&seq.patches), &[t, seq.patch_len]);
        let nodes = self.graph_forward(&mut g, input, 1, t, false);
        let trace = capture_attention.then(|| AttentionTrace {
            heads: self.config.n_heads,
            seq_len: t,
            layers: nodes
                .backbone
                .attention
                .iter()
                .map(|&a| {
                    g.attention_probs(a)
                        .expect("attention node")
                        .iter()
                        .map(|x| x.as_f64() as f32)
                        .collect()
                })
                .collect(),
        });
        Ok((g.value(nodes.logits).to_vec(), g.value(nodes.backbone.hidden).to_vec(), trace))
    }

    /// Logits for a whole batch, `[batch*seq_len, L*patch_len]`.
    pub fn forward_batch(&self, batch: &Batch) -> Result<Vec<F>> {
        self.check_len(batch.seq_len)?;
        let mut g = Graph::new();
        let input = g.input(to_real(&batch.patches), &[batch.size() * batch.seq_len, batch.patch_len]);
        let nodes = self.graph_forward(&mut g, input, batch.size(), batch.seq_len, false);
        Ok(g.value(nodes.logits).to_vec())
    }
}

/// Turn one logit block into pixels: binary pixels are 1 where
/// `sigmoid(logit / T) >= theta`; RGB values are clipped to [0, 1].
pub fn decode_logits<F: Real>(block: &[F], temperature: f64, threshold: f64, mode: PixelMode) -> Vec<f32> {
    block
        .iter()
        .map(|&z| {
            let z = z.as_f64();
            match mode {
                PixelMode::Binary => {
                    let p = 1.0 / (1.0 + (-z / temperature).exp());
                    if p >= threshold {
                        1.0
                    } else {
                        0.0
                    }
                }
                PixelMode::Rgb => z.clamp(0.0, 1.0) as f32,
            }
        })
        .collect()
}

/// Backbone copy with a zero-initialized `d -> 1` head scoring how real
/// the patch at each position looks given its prefix.
#[derive(Debug, Clone)]
pub struct Discriminator<F: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    ids: BackboneIds,
    head_w: ParamId,
    head_b: ParamId,
}

/// Real-prefix keys and values for one sequence, per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscCache<F> {
    pub len: usize,
    pub kv: Vec<(Vec<F>, Vec<F>)>,
}

pub const DISC_HEAD: [&str; 2] = ["disc_head.weight", "disc_head.bias"];

impl<F: Real> Discriminator<F> {
    pub fn from_generator(gen: &Transformer<F>) -> Result<Self> {
        let mut store = ParamStore::new();
        for (_, p) in gen.params.iter() {
            if !OUTPUT_LAYER.contains(&p.name.as_str()) {
                store.insert(&p.name, &p.shape, p.data.clone())?;
            }
        }
        let d = gen.config.hidden_dim;
        store.insert(DISC_HEAD[0], &[d, 1], vec![F::zero(); d])?;
        store.insert(DISC_HEAD[1], &[1], vec![F::zero()])?;
        Self::from_params(gen.config.clone(), store)
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let ids = BackboneIds::resolve(&params, &config)?;
        let head_w = lookup(&params, DISC_HEAD[0], &[config.hidden_dim, 1])?;
        let head_b = lookup(&params, DISC_HEAD[1], &[1])?;
        let expected = backbone_shapes(&config).len() + 2;
        if params.len() != expected {
            return Err(Error::format(
                "discriminator parameters",
                format!("{} tensors present, config implies {expected}", params.len()),
            ));
        }
        Ok(Self {
            config,
            params,
            ids,
            head_w,
            head_b,
        })
    }

    pub fn cast<G: Real>(&self) -> Discriminator<G> {
        Discriminator::from_params(self.config.clone(), self.params.cast()).expect("same layout")
    }

    fn backbone(&self, trainable: bool) -> Backbone<'_, F> {
        Backbone {
            cfg: &self.config,
            store: &self.params,
            ids: &self.ids,
            trainable,
        }
    }

    fn head(&self, g: &mut Graph<F>, hidden: NodeId, trainable: bool) -> NodeId {
        let w = g.param(&self.params, self.head_w, trainable);
        let b = g.param(&self.params, self.head_b, trainable);
        let z = g.matmul(hidden, w);
        g.add_row(z, b)
    }

    /// Causal pass over real sequences: per-position logits `[rows, 1]` and
    /// the backbone nodes (whose `kv` serve as the cache).
    pub fn graph_real(&self, g: &mut Graph<F>, input: NodeId, batch: usize, seq: usize, trainable: bool) -> (NodeId, BackboneNodes) {
        let nodes = self.backbone(trainable).causal(g, input, batch, seq);
        let logits = self.head(g, nodes.hidden, trainable);
        (logits, nodes)
    }

    /// Logits `[rows, 1]` for candidate patches. Row `r` sits at
    /// `positions[r]` after context rows `spans[r]` of `ctx`.
    pub fn graph_candidates(
        &self,
        g: &mut Graph<F>,
        candidates: NodeId,
        positions: &[usize],
        ctx: &[(NodeId, NodeId)],
        spans: &[(usize, usize)],
        trainable: bool,
    ) -> NodeId {
        let hidden = self.backbone(trainable).prefixed(g, candidates, positions, ctx, spans);
        self.head(g, hidden, trainable)
    }

    /// Cache keys and values of a real sequence.
    pub fn build_cache(&self, real: &PatchSequence) -> Result<DiscCache<F>> {
        let t = real.len();
        if t > self.config.window {
            return Err(Error::WindowOverflow {
                needed: t,
                window: self.config.window,
            });
        }
        if t == 0 {
            return Ok(DiscCache {
                len: 0,
                kv: vec![(Vec::new(), Vec::new()); self.config.n_layers],
            });
        }
        let mut g = Graph::new();
        let input = g.input(to_real(&real.patches), &[t, real.patch_len]);
        let (_, nodes) = self.graph_real(&mut g, input, 1, t, false);
        let kv = nodes
            .kv
            .iter()
            .map(|&(k, v)| (g.value(k).to_vec(), g.value(v).to_vec()))
            .collect();
        Ok(DiscCache { len: t, kv })
    }

    /// Probability that `candidate` is real at `position`, conditioned on
    /// the cached rows before it.
    pub fn score(&self, cache: &DiscCache<F>, candidate: &[f32], position: usize) -> Result<f64> {
        if position >= self.config.window {
            return Err(Error::WindowOverflow {
                needed: position + 1,
                window: self.config.window,
            });
        }
        if position > cache.len {
            return Err(Error::InvalidInput(format!(
                "position {position} is beyond the cached prefix of {}",
                cache.len
            )));
        }
        if candidate.len() != self.config.patch_len() {
            return Err(Error::InvalidInput("candidate patch length".into()));
        }
        let d = self.config.hidden_dim;
        let mut g = Graph::new();
        let ctx: Vec<(NodeId, NodeId)> = cache
            .kv
            .iter()
            .map(|(k, v)| {
                // Prefix attention needs at least one context row to infer widths.
                let rows = cache.len.max(1);
                let pad = |x: &Vec<F>| if x.is_empty() { vec![F::zero(); d] } else { x.clone() };
                (g.input(pad(k), &[rows, d]), g.input(pad(v), &[rows, d]))
            })
            .collect();
        let cand = g.input(to_real(candidate), &[1, candidate.len()]);
        let z = self.graph_candidates(&mut g, cand, &[position], &ctx, &[(0, position)], false);
        Ok(sigmoid_f64(g.scalar(z).as_f64()))
    }

    /// Per-position probabilities from a full causal pass.
    pub fn score_sequence(&self, seq: &PatchSequence) -> Result<Vec<f64>> {
        let t = seq.len();
        if t > self.config.window {
            return Err(Error::WindowOverflow {
                needed: t,
                window: self.config.window,
            });
        }
        if t == 0 {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let input = g.input(to_real(&seq.patches), &[t, seq.patch_len]);
        let (z, _) = self.graph_real(&mut g, input, 1, t, false);
        Ok(g.value(z).iter().map(|x| sigmoid_f64(x.as_f64())).collect())
    }
}

pub(crate) fn sigmoid_f64(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}
