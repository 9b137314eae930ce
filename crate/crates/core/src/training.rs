//! Teacher-forced maximum-likelihood training and the adversarial stage
//! with automatic loss balancing.
//!
//! A stage-2 step runs three phases on each batch:
//! 1. reconstruction loss and its gradient; the output-projection gradient
//!    `g1` and its scale are recorded;
//! 2. the adversarial loss on sampled teacher-forced fake patches, weighted
//!    by `lambda_m * lambda_auto` (the latter from the previous batch), is
//!    added; the unweighted adversarial scale is recovered from `g2 - g1`
//!    and the generator takes one optimizer step;
//! 3. the discriminator takes one step on real (label 1) and fake (label 0)
//!    patches.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use pixar_tensor::{adamw_step, grad_scale, lr_at, mean_scale, Graph, NodeId, OptimizerState, ParamStore, Real, ScheduleConfig};
use rand::seq::index;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Batch, BatchIter, Dataset};
use crate::error::{Error, Result};
use crate::model::{DiscCache, Discriminator, ModelConfig, Transformer};
use crate::textrender::PixelMode;

/// Probability clamp for the adversarial log terms.
pub const PROB_CLAMP: (f64, f64) = (1e-7, 1.0 - 1e-7);

/// Gold targets and per-pixel loss weights for a batch: row `(b, i)` holds
/// patches `i+1 .. i+L`; a row is masked when any of them is padding or
/// beyond the sample.
pub fn stage1_targets<F: Real>(batch: &Batch, patches_per_step: usize) -> (Vec<F>, Vec<F>) {
    let (t, p, l) = (batch.seq_len, batch.patch_len, patches_per_step);
    let rows = batch.size() * t;
    let mut targets = vec![F::zero(); rows * l * p];
    let mut mask = vec![F::zero(); rows * l * p];
    for b in 0..batch.size() {
        let len = batch.real_len(b);
        for i in 0..t {
            if i + l >= len {
                continue;
            }
            let row = (b * t + i) * l * p;
            for j in 0..l {
                let src = &batch.patches[(b * t + i + 1 + j) * p..][..p];
                for (dst, &v) in targets[row + j * p..][..p].iter_mut().zip(src) {
                    *dst = F::lit(f64::from(v));
                }
            }
            mask[row..row + l * p].fill(F::one());
        }
    }
    (targets, mask)
}

/// Mean per-pixel reconstruction loss over unmasked predictions: logit-space
/// binary cross-entropy (with temperature) or squared error on clipped
/// values for RGB.
pub fn stage1_loss<F: Real>(
    g: &mut Graph<F>,
    logits: NodeId,
    targets: Vec<F>,
    mask: Vec<F>,
    mode: PixelMode,
    temperature: f64,
) -> Result<NodeId> {
    let n = g.value(logits).len();
    if targets.len() != n || mask.len() != n {
        return Err(Error::InvalidInput(format!(
            "loss shapes differ: {n} logits, {} targets, {} mask",
            targets.len(),
            mask.len()
        )));
    }
    Ok(match mode {
        PixelMode::Binary => {
            let z = if temperature == 1.0 {
                logits
            } else {
                g.scale(logits, F::lit(1.0 / temperature))
            };
            g.bce_with_logits(z, targets, mask)
        }
        PixelMode::Rgb => {
            let c = g.clamp(logits, F::zero(), F::one());
            g.masked_mse(c, targets, mask)
        }
    })
}

fn input_node<F: Real>(g: &mut Graph<F>, batch: &Batch) -> NodeId {
    let data = batch.patches.iter().map(|&x| F::lit(f64::from(x))).collect();
    g.input(data, &[batch.size() * batch.seq_len, batch.patch_len])
}

/// Reconstruction graph for one mini-batch. Returns the loss node and the
/// generator nodes.
fn rec_graph<F: Real>(g: &mut Graph<F>, model: &Transformer<F>, batch: &Batch) -> Result<(NodeId, crate::model::GeneratorNodes, NodeId)> {
    let cfg = &model.config;
    let input = input_node(g, batch);
    let nodes = model.graph_forward(g, input, batch.size(), batch.seq_len, true);
    let (targets, mask) = stage1_targets(batch, cfg.geometry.patches_per_step);
    let loss = stage1_loss(g, nodes.logits, targets, mask, cfg.geometry.mode(), cfg.sigmoid_temperature)?;
    Ok((loss, nodes, input))
}

fn add_grads<F: Real>(acc: &mut [Vec<F>], store: &ParamStore<F>) {
    for (a, (_, p)) in acc.iter_mut().zip(store.iter()) {
        a.iter_mut().zip(&p.grad).for_each(|(x, &g)| *x = *x + g);
    }
}

/// Accumulated mini-batch gradients are summed, then divided by the count.
fn install_grads<F: Real>(acc: Vec<Vec<F>>, store: &mut ParamStore<F>, count: usize) {
    let inv = F::lit(1.0 / count as f64);
    for (a, p) in acc.into_iter().zip(store.iter_mut()) {
        p.grad = if count == 1 { a } else { a.into_iter().map(|x| x * inv).collect() };
    }
}

fn zero_like<F: Real>(store: &ParamStore<F>) -> Vec<Vec<F>> {
    store.iter().map(|(_, p)| vec![F::zero(); p.numel()]).collect()
}

fn finite(x: f64, what: &str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(format!("{what} = {x}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Metrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Forward, reconstruction loss, backward over the mini-batches, then one
/// AdamW step at `lr_at(step)`.
pub fn stage1_step<F: Real>(
    model: &mut Transformer<F>,
    optimizer: &mut OptimizerState<F>,
    schedule: &ScheduleConfig,
    batches: &[Batch],
    step: u64,
) -> Result<Stage1Metrics> {
    if batches.is_empty() {
        return Err(Error::InvalidInput("stage-1 step needs at least one batch".into()));
    }
    let mut acc = zero_like(&model.params);
    let mut loss_sum = 0.0;
    for batch in batches {
        let batch = batch.trimmed();
        model.params.zero_grads();
        let mut g = Graph::new();
        let (loss, _, _) = rec_graph(&mut g, model, &batch)?;
        loss_sum += g.scalar(loss).as_f64();
        g.backward(loss)?;
        g.take_param_grads(&mut model.params);
        add_grads(&mut acc, &model.params);
    }
    install_grads(acc, &mut model.params, batches.len());
    let loss = finite(loss_sum / batches.len() as f64, "stage-1 loss")?;
    let grad_norm = finite(model.params.grad_norm(), "stage-1 gradient norm")?;
    let lr = lr_at(step, schedule);
    optimizer.learning_rate = lr;
    adamw_step(&mut model.params, optimizer)?;
    Ok(Stage1Metrics {
        step,
        loss,
        lr,
        grad_norm,
    })
}

/// `scale_rec / (scale_pcaa + delta)`.
pub fn lambda_auto(scale_rec: f64, scale_pcaa: f64, delta: f64) -> f64 {
    scale_rec / (scale_pcaa + delta)
}

/// Up to `k` distinct positions drawn uniformly from `range`, ascending.
pub fn sample_fake_positions(range: Range<usize>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = range.len();
    if n == 0 {
        return Vec::new();
    }
    let mut picked: Vec<usize> = index::sample(rng, n, k.min(n)).into_iter().map(|i| range.start + i).collect();
    picked.sort_unstable();
    picked
}

/// Mean of `-ln(clamp(D))` over per-candidate discriminator probabilities.
pub fn pcaa_from_scores(scores: &[f64]) -> f64 {
    let (lo, hi) = PROB_CLAMP;
    scores.iter().map(|&p| -p.clamp(lo, hi).ln()).sum::<f64>() / scores.len().max(1) as f64
}

/// Adversarial loss for fake patches at `positions` of one real sequence,
/// scored against its cached prefix.
pub fn pcaa_loss<F: Real>(disc: &Discriminator<F>, cache: &DiscCache<F>, fakes: &[Vec<f32>], positions: &[usize]) -> Result<f64> {
    if fakes.len() != positions.len() {
        return Err(Error::InvalidInput("one position per fake patch".into()));
    }
    let scores = fakes
        .iter()
        .zip(positions)
        .map(|(f, &i)| disc.score(cache, f, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(pcaa_from_scores(&scores))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Config {
    pub lambda_m: f64,
    pub delta: f64,
    pub fake_samples_per_seq: usize,
    pub steps: u64,
    /// Constant learning rate of both optimizers.
    pub learning_rate: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            lambda_m: 1.0,
            delta: 1e-8,
            fake_samples_per_seq: 30,
            steps: 200,
            learning_rate: 3e-6,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_m >= 0.0) || !(self.delta > 0.0) || self.fake_samples_per_seq == 0 {
            return Err(Error::InvalidInput(
                "stage 2 needs lambda_m >= 0, delta > 0 and at least one fake sample".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2State<F> {
    pub lambda_auto: f64,
    pub prev_scale_rec: f64,
    pub prev_scale_pcaa: f64,
    /// Output-projection gradient of the reconstruction loss from the most
    /// recent mini-batch (weight then bias, flattened).
    pub g1_snapshot: Vec<F>,
}

impl<F> Default for Stage2State<F> {
    fn default() -> Self {
        Self {
            lambda_auto: 1.0,
            prev_scale_rec: 0.0,
            prev_scale_pcaa: 0.0,
            g1_snapshot: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Metrics {
    pub step: u64,
    pub loss_rec: f64,
    /// Unweighted adversarial loss.
    pub loss_pcaa: f64,
    /// Multiplier computed at this step, used by the next one.
    pub lambda_auto: f64,
    /// Multiplier applied at this step.
    pub lambda_used: f64,
    pub scale_rec: f64,
    pub scale_pcaa: f64,
    pub disc_loss: f64,
    /// Balanced accuracy of the discriminator before its update.
    pub disc_acc: f64,
    pub lr: f64,
}

fn output_grads<F: Real>(model: &Transformer<F>, store: &ParamStore<F>) -> Vec<F> {
    model
        .output_layer_ids()
        .iter()
        .flat_map(|&id| store.get(id).grad.iter().copied())
        .collect()
}

/// Fake candidates sampled for one mini-batch.
struct Fakes<F> {
    positions: Vec<usize>,
    /// Row of the real sequence each candidate replaces: `b * seq + i`.
    rows: Vec<usize>,
    spans: Vec<(usize, usize)>,
    values: Vec<F>,
}

fn sample_fakes(batch: &Batch, k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>, Vec<(usize, usize)>) {
    let t = batch.seq_len;
    let (mut positions, mut rows, mut spans) = (Vec::new(), Vec::new(), Vec::new());
    for b in 0..batch.size() {
        // Position i is predicted by row i-1 and must itself be real.
        for i in sample_fake_positions(1..batch.real_len(b), k, rng) {
            positions.push(i);
            rows.push(b * t + i);
            spans.push((b * t, i));
        }
    }
    (positions, rows, spans)
}

/// Teacher-forced fake patches: the first predicted block of row `i-1`,
/// squashed to probabilities (binary) or clipped (RGB).
fn fake_patches<F: Real>(g: &mut Graph<F>, cfg: &ModelConfig, logits: NodeId, rows: &[usize]) -> NodeId {
    let prev: Vec<usize> = rows.iter().map(|&r| r - 1).collect();
    let picked = g.gather_rows(logits, &prev);
    let block = g.slice_cols(picked, 0, cfg.patch_len());
    match cfg.geometry.mode() {
        PixelMode::Binary => {
            let z = if cfg.sigmoid_temperature == 1.0 {
                block
            } else {
                g.scale(block, F::lit(1.0 / cfg.sigmoid_temperature))
            };
            g.sigmoid(z)
        }
        PixelMode::Rgb => g.clamp(block, F::zero(), F::one()),
    }
}

fn pcaa_graph<F: Real>(g: &mut Graph<F>, disc: &Discriminator<F>, input: NodeId, batch: &Batch, fake: NodeId, fakes: &Fakes<F>) -> NodeId {
    let (_, real) = disc.graph_real(g, input, batch.size(), batch.seq_len, false);
    let z = disc.graph_candidates(g, fake, &fakes.positions, &real.kv, &fakes.spans, false);
    let p = g.sigmoid(z);
    let ones = vec![F::one(); fakes.positions.len()];
    let (lo, hi) = PROB_CLAMP;
    g.binary_nll(p, ones, F::lit(lo), F::lit(hi))
}

/// One three-phase adversarial step. With `lambda_m = 0` the generator
/// update is exactly a stage-1 update at the same learning rate.
#[allow(clippy::too_many_arguments)]
pub fn stage2_step<F: Real>(
    gen: &mut Transformer<F>,
    gen_opt: &mut OptimizerState<F>,
    disc: &mut Discriminator<F>,
    disc_opt: &mut OptimizerState<F>,
    batches: &[Batch],
    cfg: &Stage2Config,
    state: &mut Stage2State<F>,
    rng: &mut ChaCha8Rng,
    step: u64,
) -> Result<Stage2Metrics> {
    cfg.validate()?;
    if batches.is_empty() {
        return Err(Error::InvalidInput("stage-2 step needs at least one batch".into()));
    }
    let lambda_used = state.lambda_auto;
    let weight = cfg.lambda_m * lambda_used;
    let batches: Vec<Batch> = batches.iter().map(Batch::trimmed).collect();

    // Phases 1 and 2: generator.
    let mut acc = zero_like(&gen.params);
    let (mut rec_sum, mut pcaa_sum, mut pcaa_batches) = (0.0, 0.0, 0usize);
    let (mut rec_scales, mut pcaa_scales) = (Vec::new(), Vec::new());
    let mut all_fakes = Vec::with_capacity(batches.len());
    for batch in &batches {
        gen.params.zero_grads();
        let mut g = Graph::new();
        let (rec, nodes, input) = rec_graph(&mut g, gen, batch)?;
        rec_sum += g.scalar(rec).as_f64();
        g.backward(rec)?;
        g.take_param_grads(&mut gen.params);
        let g1 = output_grads(gen, &gen.params);
        rec_scales.push(grad_scale(&[&g1[..]])?);

        let (positions, rows, spans) = sample_fakes(batch, cfg.fake_samples_per_seq, rng);
        let mut fakes = Fakes {
            positions,
            rows,
            spans,
            values: Vec::new(),
        };
        if !fakes.rows.is_empty() {
            let fake = fake_patches(&mut g, &gen.config, nodes.logits, &fakes.rows);
            fakes.values = g.value(fake).to_vec();
            let pcaa = pcaa_graph(&mut g, disc, input, batch, fake, &fakes);
            pcaa_sum += g.scalar(pcaa).as_f64();
            pcaa_batches += 1;
            if cfg.lambda_m > 0.0 {
                let scaled = g.scale(pcaa, F::lit(weight));
                g.backward(scaled)?;
                g.take_param_grads(&mut gen.params);
                let g2 = output_grads(gen, &gen.params);
                let diff: Vec<F> = g2.iter().zip(&g1).map(|(&a, &b)| a - b).collect();
                pcaa_scales.push(grad_scale(&[&diff[..]])? / cfg.lambda_m / lambda_used);
            } else {
                // Nothing is added to the update; the scale is still measured.
                g.backward(pcaa)?;
                let mut scratch = gen.params.clone();
                scratch.zero_grads();
                g.take_param_grads(&mut scratch);
                pcaa_scales.push(grad_scale(&[&output_grads(gen, &scratch)[..]])?);
            }
        }
        state.g1_snapshot = g1;
        add_grads(&mut acc, &gen.params);
        all_fakes.push(fakes);
    }
    install_grads(acc, &mut gen.params, batches.len());
    let loss_rec = finite(rec_sum / batches.len() as f64, "reconstruction loss")?;
    let loss_pcaa = finite(pcaa_sum / pcaa_batches.max(1) as f64, "adversarial loss")?;
    let scale_rec = mean_scale(&rec_scales)?;
    state.prev_scale_rec = scale_rec;
    if !pcaa_scales.is_empty() {
        let scale_pcaa = mean_scale(&pcaa_scales)?;
        state.prev_scale_pcaa = scale_pcaa;
        state.lambda_auto = finite(lambda_auto(scale_rec, scale_pcaa, cfg.delta), "lambda_auto")?;
    }
    finite(gen.params.grad_norm(), "generator gradient norm")?;
    gen_opt.learning_rate = cfg.learning_rate;
    adamw_step(&mut gen.params, gen_opt)?;

    // Phase 3: discriminator on real patches and the detached fakes.
    let mut acc = zero_like(&disc.params);
    let mut disc_sum = 0.0;
    let (mut real_ok, mut real_n, mut fake_ok, mut fake_n) = (0usize, 0usize, 0usize, 0usize);
    for (batch, fakes) in batches.iter().zip(&all_fakes) {
        disc.params.zero_grads();
        let mut g = Graph::new();
        let input = input_node(&mut g, batch);
        let (z_real, real) = disc.graph_real(&mut g, input, batch.size(), batch.seq_len, true);
        let real_mask: Vec<F> = batch.pad_mask.iter().map(|&m| if m { F::one() } else { F::zero() }).collect();
        for (&z, &m) in g.value(z_real).iter().zip(&batch.pad_mask) {
            if m {
                real_n += 1;
                real_ok += usize::from(z >= F::zero());
            }
        }
        let real_loss = g.bce_with_logits(z_real, vec![F::one(); real_mask.len()], real_mask);
        let loss = if fakes.rows.is_empty() {
            real_loss
        } else {
            let fake = g.input(fakes.values.clone(), &[fakes.rows.len(), batch.patch_len]);
            let z_fake = disc.graph_candidates(&mut g, fake, &fakes.positions, &real.kv, &fakes.spans, true);
            for &z in g.value(z_fake) {
                fake_n += 1;
                fake_ok += usize::from(z < F::zero());
            }
            let n = fakes.rows.len();
            let fake_loss = g.bce_with_logits(z_fake, vec![F::zero(); n], vec![F::one(); n]);
            let sum = g.add(real_loss, fake_loss);
            g.scale(sum, F::lit(0.5))
        };
        disc_sum += g.scalar(loss).as_f64();
        g.backward(loss)?;
        g.take_param_grads(&mut disc.params);
        add_grads(&mut acc, &disc.params);
    }
    install_grads(acc, &mut disc.params, batches.len());
    let disc_loss = finite(disc_sum / batches.len() as f64, "discriminator loss")?;
    finite(disc.params.grad_norm(), "discriminator gradient norm")?;
    disc_opt.learning_rate = cfg.learning_rate;
    adamw_step(&mut disc.params, disc_opt)?;

    let rate = |ok: usize, n: usize| if n == 0 { None } else { Some(ok as f64 / n as f64) };
    let disc_acc = match (rate(real_ok, real_n), rate(fake_ok, fake_n)) {
        (Some(r), Some(f)) => 0.5 * (r + f),
        (Some(r), None) => r,
        (None, Some(f)) => f,
        (None, None) => 0.0,
    };
    Ok(Stage2Metrics {
        step,
        loss_rec,
        loss_pcaa,
        lambda_auto: state.lambda_auto,
        lambda_used,
        scale_rec,
        scale_pcaa: state.prev_scale_pcaa,
        disc_loss,
        disc_acc,
        lr: cfg.learning_rate,
    })
}

/// Deterministic stream of training batches: global batch `k` is batch
/// `k % per_epoch` of epoch `k / per_epoch`, so a run can resume from any
/// step without replaying earlier ones.
#[derive(Debug, Clone)]
pub struct BatchSource<'a> {
    pub dataset: &'a Dataset,
    pub batch_size: usize,
    pub window: usize,
    pub seed: u64,
}

impl BatchSource<'_> {
    pub fn per_epoch(&self) -> usize {
        self.dataset.len().div_ceil(self.batch_size)
    }

    pub fn batch(&self, k: u64) -> Result<Batch> {
        let per_epoch = self.per_epoch() as u64;
        if per_epoch == 0 {
            return Err(Error::InvalidInput("dataset has no samples".into()));
        }
        BatchIter::new(self.dataset, self.batch_size, self.window, self.seed, k / per_epoch)?
            .nth((k % per_epoch) as usize)
            .ok_or_else(|| Error::InvalidInput("batch index out of range".into()))
    }

    /// The `accum` mini-batches of 1-based optimizer step `step`.
    pub fn step_batches(&self, step: u64, accum: usize) -> Result<Vec<Batch>> {
        let first = (step - 1) * accum as u64;
        (0..accum as u64).map(|j| self.batch(first + j)).collect()
    }
}

/// Append-only metrics CSV.
pub struct MetricsWriter {
    file: fs::File,
}

pub const METRICS_HEADER: &str = "step,loss_rec,loss_pcaa,lambda_auto,scale_rec,scale_pcaa,disc_acc,lr";

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if fresh {
            writeln!(file, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
        }
        Ok(Self { file })
    }

    /// Reopen after resuming from `last_step`: rows logged after the
    /// checkpoint are dropped so the rerun writes them again identically.
    pub fn resume(path: &Path, last_step: u64) -> Result<Self> {
        if let Ok(text) = fs::read_to_string(path) {
            let mut kept = String::new();
            for (i, line) in text.lines().enumerate() {
                let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if i == 0 || step.is_some_and(|s| s <= last_step) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
            fs::write(path, kept).map_err(|e| Error::io(path, e))?;
        }
        Self::open(path)
    }

    fn row(&mut self, fields: [String; 8]) -> Result<()> {
        writeln!(self.file, "{}", fields.join(",")).map_err(|e| Error::io("metrics", e))
    }

    /// Stage-1 rows leave the adversarial columns empty.
    pub fn stage1(&mut self, m: &Stage1Metrics) -> Result<()> {
        self.row([
            m.step.to_string(),
            m.loss.to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            m.lr.to_string(),
        ])
    }

    pub fn stage2(&mut self, m: &Stage2Metrics) -> Result<()> {
        self.row([
            m.step.to_string(),
            m.loss_rec.to_string(),
            m.loss_pcaa.to_string(),
            m.lambda_auto.to_string(),
            m.scale_rec.to_string(),
            m.scale_pcaa.to_string(),
            m.disc_acc.to_string(),
            m.lr.to_string(),
        ])
    }
}
