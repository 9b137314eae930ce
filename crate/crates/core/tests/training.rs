use pixar_core::corpus::Batch;
use pixar_core::model::{Discriminator, ModelConfig, Transformer};
use pixar_core::textrender::{PatchSequence, PixelMode};
use pixar_core::training::{
    pcaa_from_scores, pcaa_loss, stage1_loss, stage1_step, stage1_targets, stage2_step, Stage2Config, Stage2State, PROB_CLAMP,
};
use pixar_tensor::{lr_at, Graph, OptimizerState, ScheduleConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        hidden_dim: 16,
        n_heads: 2,
        ff_hidden_dim: 24,
        window: 16,
        ..ModelConfig::tiny()
    }
}

fn random_seq(t: usize, rng: &mut ChaCha8Rng) -> PatchSequence {
    let mut seq = PatchSequence::new(64);
    for _ in 0..t {
        let p: Vec<f32> = (0..64).map(|_| f32::from(rng.random_bool(0.3) as u8)).collect();
        seq.push(&p);
    }
    seq
}

fn batch(lengths: &[usize], seq_len: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs: Vec<PatchSequence> = lengths.iter().map(|&t| random_seq(t, &mut rng)).collect();
    let refs: Vec<&PatchSequence> = seqs.iter().collect();
    Batch::from_sequences(&refs, (0..seqs.len()).collect(), seq_len, 64)
}

fn constant(lr: f64, steps: u64) -> ScheduleConfig {
    ScheduleConfig {
        warmup_steps: 0,
        total_steps: steps + 1,
        lr_max: lr,
        lr_min: lr,
    }
}

fn bce(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

#[test]
fn masked_loss_matches_loop_oracle() {
    let cfg = small();
    let model = Transformer::<f64>::new(cfg.clone(), 2).unwrap();
    let b = batch(&[3, 5], 5, 1);
    let logits = model.forward_batch(&b).unwrap();
    let l = cfg.geometry.patches_per_step;
    let (mut sum, mut count) = (0.0, 0usize);
    for row in 0..b.size() {
        let len = b.real_len(row);
        for i in 0..b.seq_len {
            if i + l > len - 1 {
                continue;
            }
            for j in 0..l {
                for px in 0..64 {
                    let z = logits[((row * b.seq_len + i) * l + j) * 64 + px];
                    let y = f64::from(b.patches[(row * b.seq_len + i + 1 + j) * 64 + px]);
                    sum += bce(z, y);
                    count += 1;
                }
            }
        }
    }
    assert_eq!(count, (1 + 3) * l * 64);
    let (targets, mask) = stage1_targets::<f64>(&b, l);
    let mut g = Graph::new();
    let z = g.input(logits.clone(), &[logits.len() / 128, 128]);
    let loss = stage1_loss(&mut g, z, targets, mask, PixelMode::Binary, 1.0).unwrap();
    assert!((g.scalar(loss) - sum / count as f64).abs() < 1e-12);
}

#[test]
fn saturated_logits_give_near_zero_loss() {
    let b = batch(&[4], 4, 3);
    let (targets, mask) = stage1_targets::<f64>(&b, 2);
    let logits: Vec<f64> = targets.iter().map(|&t| if t == 1.0 { 20.0 } else { -20.0 }).collect();
    let mut g = Graph::new();
    let z = g.input(logits, &[4, 128]);
    let loss = stage1_loss(&mut g, z, targets, mask, PixelMode::Binary, 1.0).unwrap();
    assert!(g.scalar(loss) < 1e-8);
}

#[test]
fn repeated_batch_mostly_descends() {
    let model = Transformer::<f32>::new(small(), 4).unwrap();
    let b = batch(&[12, 9, 16], 16, 5);
    let sched = constant(3e-4, 101);
    let mut m = model.clone();
    let mut opt = OptimizerState::new(&m.params, 3e-4);
    let losses: Vec<f64> = (1..=101)
        .map(|s| stage1_step(&mut m, &mut opt, &sched, std::slice::from_ref(&b), s).unwrap().loss)
        .collect();
    let down = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(down >= 90, "{down} of 100 steps decreased the loss");
}

#[test]
fn runs_are_deterministic_and_report_the_schedule() {
    let sched = ScheduleConfig {
        warmup_steps: 3,
        total_steps: 10,
        lr_max: 1e-3,
        lr_min: 1e-4,
    };
    let run = || {
        let mut m = Transformer::<f32>::new(small(), 9).unwrap();
        let mut opt = OptimizerState::new(&m.params, 0.0);
        (1..=10)
            .map(|s| {
                let b = batch(&[6, 10], 10, s);
                stage1_step(&mut m, &mut opt, &sched, &[b.clone(), b], s).unwrap()
            })
            .collect::<Vec<_>>()
    };
    let a = run();
    assert_eq!(a, run());
    for m in &a {
        assert_eq!(m.lr, lr_at(m.step, &sched));
    }
}

#[test]
fn pcaa_loss_matches_full_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let gen = Transformer::<f64>::new(small(), 1).unwrap();
    let mut disc = Discriminator::from_generator(&gen).unwrap();
    for p in disc.params.iter_mut() {
        p.data.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    let real = random_seq(10, &mut rng);
    let cache = disc.build_cache(&real).unwrap();
    let positions = vec![1, 4, 4, 9];
    let fakes: Vec<Vec<f32>> = positions.iter().map(|_| (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let got = pcaa_loss(&disc, &cache, &fakes, &positions).unwrap();
    let mut terms = Vec::new();
    for (f, &i) in fakes.iter().zip(&positions) {
        let mut seq = PatchSequence::new(64);
        for t in 0..i {
            seq.push(real.patch(t));
        }
        seq.push(f);
        let p = disc.score_sequence(&seq).unwrap()[i];
        terms.push(-p.clamp(PROB_CLAMP.0, PROB_CLAMP.1).ln());
    }
    let oracle = terms.iter().sum::<f64>() / terms.len() as f64;
    assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
    assert_eq!(pcaa_from_scores(&[1.0]), -PROB_CLAMP.1.ln());
    assert!((pcaa_from_scores(&[0.5, 0.5]) - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn adversarial_weight_zero_is_a_plain_update() {
    let gen = Transformer::<f64>::new(small(), 7).unwrap();
    let b = batch(&[10, 7], 10, 8);
    let cfg = Stage2Config {
        lambda_m: 0.0,
        learning_rate: 1e-3,
        fake_samples_per_seq: 3,
        ..Stage2Config::default()
    };

    let mut g2 = gen.clone();
    let mut disc = Discriminator::from_generator(&g2).unwrap();
    let mut g2_opt = OptimizerState::new(&g2.params, cfg.learning_rate);
    let mut d_opt = OptimizerState::new(&disc.params, cfg.learning_rate);
    let mut state = Stage2State::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = stage2_step(&mut g2, &mut g2_opt, &mut disc, &mut d_opt, std::slice::from_ref(&b), &cfg, &mut state, &mut rng, 1).unwrap();
    assert_eq!(m.lambda_used, 1.0);
    assert!((0.5..=1.0).contains(&m.disc_acc));

    let mut g1 = gen.clone();
    let mut g1_opt = OptimizerState::new(&g1.params, cfg.learning_rate);
    stage1_step(&mut g1, &mut g1_opt, &constant(cfg.learning_rate, 5), &[b], 1).unwrap();
    for ((_, a), (_, b)) in g1.params.iter().zip(g2.params.iter()) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-12, "{}", a.name);
        }
    }
}

#[test]
fn stage2_is_deterministic_and_carries_lambda() {
    let run = || {
        let mut gen = Transformer::<f32>::new(small(), 2).unwrap();
        let mut disc = Discriminator::from_generator(&gen).unwrap();
        let cfg = Stage2Config {
            learning_rate: 1e-3,
            fake_samples_per_seq: 4,
            ..Stage2Config::default()
        };
        let mut g_opt = OptimizerState::new(&gen.params, cfg.learning_rate);
        let mut d_opt = OptimizerState::new(&disc.params, cfg.learning_rate);
        let mut state = Stage2State::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (1..=4)
            .map(|s| {
                let b = batch(&[8, 12], 12, s);
                stage2_step(&mut gen, &mut g_opt, &mut disc, &mut d_opt, &[b], &cfg, &mut state, &mut rng, s).unwrap()
            })
            .collect::<Vec<_>>()
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a[0].lambda_used, 1.0);
    for w in a.windows(2) {
        assert_eq!(w[1].lambda_used, w[0].lambda_auto);
    }
    assert!(a.iter().all(|m| m.loss_rec.is_finite() && m.loss_pcaa.is_finite()));
}
