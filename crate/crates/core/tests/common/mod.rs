//! Shared fixtures: the 16-sentence overfit task and helpers to train and
//! score it.
#![allow(dead_code)]

use pixar_core::corpus::{Batch, Dataset};
use pixar_core::evalharness::{GenItem, GenTask};
use pixar_core::model::{ModelConfig, Transformer};
use pixar_core::textrender::{eos_patch, render_prompt, render_text, GlyphAtlas, PatchGeometry, PatchSequence};
use pixar_core::training::{stage1_loss, stage1_step, stage1_targets, BatchSource, Stage1Metrics};
use pixar_tensor::{CheckConfig, CheckReport, Graph, NodeId, OptimizerState, ScheduleConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SENTENCES: [&str; 16] = [
    "the cat sat on the warm mat near the door",
    "a red fox ran past the old barn",
    "she drank hot tea with fresh milk",
    "we saw ten ducks swim in the pond",
    "my dad fixed the roof before the storm",
    "the kids ate cake at the party",
    "he read a long book about ships",
    "our team won the game last night",
    "the bird sang a sweet song at dawn",
    "they built a small fort out of snow",
    "i lost my keys in the tall grass",
    "the baker sold warm bread every day",
    "a cold wind blew over the hill",
    "you can find gold under the rock",
    "the frog sat still on a green leaf",
    "his dog dug a deep hole in the yard",
];

pub const OVERFIT_STEPS: u64 = 1500;

/// Each sentence split into (everything but the last word, last word).
pub fn overfit_task() -> GenTask {
    GenTask {
        items: SENTENCES
            .iter()
            .map(|s| {
                let (context, target) = s.rsplit_once(' ').unwrap();
                GenItem {
                    context: context.to_string(),
                    target: target.to_string(),
                }
            })
            .collect(),
        shots: 0,
    }
}

/// Gold continuation of a prompt: the target word followed by EOS.
pub fn gold_continuation(target: &str, atlas: &GlyphAtlas, geo: &PatchGeometry) -> PatchSequence {
    let mut seq = render_text(target, atlas, geo).unwrap();
    seq.push(&eos_patch(geo));
    seq
}

/// Training samples in generation layout: prompt, gap, target, EOS.
pub fn overfit_dataset(atlas: &GlyphAtlas, config: &ModelConfig) -> Dataset {
    let geo = config.geometry;
    let mut ds = Dataset::new(geo, config.window);
    for item in overfit_task().items {
        let mut seq = render_prompt(&item.context, atlas, &geo).unwrap();
        seq.extend(&gold_continuation(&item.target, atlas, &geo));
        // A row is trained only when all L of its targets are real, so the
        // EOS is repeated to be learned in every block position.
        for _ in 1..geo.patches_per_step {
            seq.push(&eos_patch(&geo));
        }
        ds.push(seq).unwrap();
    }
    ds
}

pub fn overfit_schedule(steps: u64) -> ScheduleConfig {
    ScheduleConfig {
        warmup_steps: 50,
        total_steps: steps,
        lr_max: 2e-3,
        lr_min: 2e-4,
    }
}

/// Train the tiny model on the overfit set; returns the model, its
/// optimizer and the per-step metrics.
pub fn train_overfit(steps: u64, seed: u64) -> (Transformer<f32>, OptimizerState<f32>, Vec<Stage1Metrics>) {
    let atlas = GlyphAtlas::builtin();
    let config = ModelConfig::tiny();
    let ds = overfit_dataset(&atlas, &config);
    let mut model = Transformer::<f32>::new(config.clone(), seed).unwrap();
    let mut opt = OptimizerState::new(&model.params, 0.0);
    let sched = overfit_schedule(steps);
    let src = BatchSource {
        dataset: &ds,
        batch_size: 16,
        window: config.window,
        seed,
    };
    let mut metrics = Vec::new();
    for step in 1..=steps {
        let batches = src.step_batches(step, 1).unwrap();
        metrics.push(stage1_step(&mut model, &mut opt, &sched, &batches, step).unwrap());
    }
    (model, opt, metrics)
}

/// Fraction of gold pixels reproduced, over the gold length.
pub fn pixel_agreement(generated: &PatchSequence, gold: &PatchSequence) -> (usize, usize) {
    let n = gold.patches.len().min(generated.patches.len());
    let same = generated.patches[..n].iter().zip(&gold.patches[..n]).filter(|(a, b)| a == b).count();
    (same, gold.patches.len())
}

/// Central-difference check of the stage-1 loss with respect to every model
/// parameter, using the same pass/fail rule as `gradient_check`.
pub fn model_gradcheck(model: &mut Transformer<f64>, batch: &Batch, cfg: CheckConfig) -> CheckReport {
    let loss_of = |model: &Transformer<f64>, trainable: bool| -> (Graph<f64>, NodeId) {
        let mut g = Graph::new();
        let data: Vec<f64> = batch.patches.iter().map(|&v| f64::from(v)).collect();
        let input = g.input(data, &[batch.size() * batch.seq_len, batch.patch_len]);
        let nodes = model.graph_forward(&mut g, input, batch.size(), batch.seq_len, trainable);
        let (targets, mask) = stage1_targets(batch, model.config.geometry.patches_per_step);
        let loss = stage1_loss(&mut g, nodes.logits, targets, mask, model.config.geometry.mode(), model.config.sigmoid_temperature).unwrap();
        (g, loss)
    };
    model.params.zero_grads();
    let (mut g, loss) = loss_of(model, true);
    g.backward(loss).unwrap();
    g.take_param_grads(&mut model.params);
    let analytic: Vec<Vec<f64>> = model.params.iter().map(|(_, p)| p.grad.clone()).collect();

    let mut report = CheckReport {
        elements: 0,
        failures: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
    };
    for (t, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = model.params.iter_mut().nth(t).unwrap().data[i];
            let mut eval = |x: f64| {
                model.params.iter_mut().nth(t).unwrap().data[i] = x;
                let (g, loss) = loss_of(model, false);
                g.scalar(loss)
            };
            let numeric = (eval(orig + cfg.h) - eval(orig - cfg.h)) / (2.0 * cfg.h);
            model.params.iter_mut().nth(t).unwrap().data[i] = orig;
            let abs_err = (a - numeric).abs();
            let rel_err = abs_err / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            report.elements += 1;
            report.max_abs_err = report.max_abs_err.max(abs_err);
            if abs_err > cfg.abs_tol {
                report.max_rel_err = report.max_rel_err.max(rel_err);
                if rel_err > cfg.rel_tol {
                    report.failures += 1;
                }
            }
        }
    }
    report
}

/// Two-layer model small enough for an exhaustive finite-difference check.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        hidden_dim: 8,
        n_heads: 2,
        ff_hidden_dim: 12,
        window: 8,
        ..ModelConfig::tiny()
    }
}

/// Random binary sequences of the given lengths, batched to `seq_len`.
pub fn random_batch(lengths: &[usize], seq_len: usize, patch_len: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs: Vec<PatchSequence> = lengths
        .iter()
        .map(|&n| {
            let mut s = PatchSequence::new(patch_len);
            for _ in 0..n {
                let p: Vec<f32> = (0..patch_len).map(|_| f32::from(u8::from(rng.random_bool(0.3)))).collect();
                s.push(&p);
            }
            s
        })
        .collect();
    let refs: Vec<&PatchSequence> = seqs.iter().collect();
    Batch::from_sequences(&refs, (0..lengths.len()).collect(), seq_len, patch_len)
}
