use pixar_core::corpus::Batch;
use pixar_core::model::{decode_logits, Discriminator, ModelConfig, Transformer};
use pixar_core::textrender::{render_text, GlyphAtlas, PatchGeometry, PatchSequence, PixelMode};
use pixar_tensor::Graph;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        hidden_dim: 16,
        n_heads: 2,
        ff_hidden_dim: 24,
        window: 24,
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

fn randomize(store: &mut pixar_tensor::ParamStore<f32>, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        p.data.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
}

#[test]
fn rmsnorm_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input(vec![3.0, 4.0, 6.0, 8.0], &[2, 2]);
    let gain = g.input(vec![1.0, 1.0], &[2]);
    let y = g.rmsnorm(x, gain, 0.0);
    let v = g.value(y);
    assert!((v[0] - 0.848528).abs() < 1e-5 && (v[1] - 1.131371).abs() < 1e-5);
    // Scaling the input by 2 leaves the output unchanged.
    assert!((v[0] - v[2]).abs() < 1e-12 && (v[1] - v[3]).abs() < 1e-12);
    let rms = ((v[0] * v[0] + v[1] * v[1]) / 2.0).sqrt();
    assert!((rms - 1.0).abs() < 1e-12);
}

#[test]
fn swiglu_arithmetic() {
    let mut g = Graph::<f64>::new();
    let gate = g.input(vec![1.0, 0.0], &[1, 2]);
    let up = g.input(vec![2.0, 123.0], &[1, 2]);
    let s = g.swish(gate);
    let y = g.mul(s, up);
    assert!((g.value(s)[0] - 0.731059).abs() < 1e-6);
    assert!((g.value(y)[0] - 1.462117).abs() < 1e-6);
    assert_eq!(g.value(y)[1], 0.0);
}

#[test]
fn rope_rotates_by_relative_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let hd = 8;
    let q: Vec<f64> = (0..hd).map(|_| rng.random_range(-1.0..1.0)).collect();
    let k: Vec<f64> = (0..hd).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rot = |v: &[f64], pos: usize| {
        let mut g = Graph::<f64>::new();
        let x = g.input(v.to_vec(), &[1, hd]);
        let y = g.rope(x, &[pos], hd, 10_000.0);
        g.value(y).to_vec()
    };
    assert_eq!(rot(&q, 0), q);
    for pos in [1, 7, 50] {
        let r = rot(&q, pos);
        for i in (0..hd).step_by(2) {
            let before = q[i].hypot(q[i + 1]);
            assert!((r[i].hypot(r[i + 1]) - before).abs() < 1e-12);
        }
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for (m, n, s) in [(3, 1, 5), (10, 10, 2), (0, 6, 11)] {
        let base = dot(&rot(&q, m), &rot(&k, n));
        let shifted = dot(&rot(&q, m + s), &rot(&k, n + s));
        assert!((base - shifted).abs() <= 1e-5 * base.abs().max(1.0), "{m} {n} {s}");
    }
}

#[test]
fn single_patch_logit_shape() {
    let model = Transformer::<f32>::new(ModelConfig::tiny(), 0).unwrap();
    let seq = render_text("A", &GlyphAtlas::builtin(), &PatchGeometry::default()).unwrap();
    let (logits, _) = model.forward(&seq, false).unwrap();
    assert_eq!(logits.len(), 128);
}

#[test]
fn decoding_thresholds() {
    assert!(decode_logits(&[0.0f32; 64], 1.0, 0.5, PixelMode::Binary).iter().all(|&p| p == 1.0));
    assert!(decode_logits(&[-10.0f32; 64], 1.0, 0.5, PixelMode::Binary).iter().all(|&p| p == 0.0));
    assert_eq!(decode_logits(&[1.3f32, -0.2, 0.4], 1.0, 0.5, PixelMode::Rgb), vec![1.0, 0.0, 0.4]);
}

#[test]
fn batched_rows_match_single_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = Transformer::<f32>::new(small(), 3).unwrap();
    let seqs: Vec<PatchSequence> = [5, 9, 2].iter().map(|&t| random_seq(t, &mut rng)).collect();
    let refs: Vec<&PatchSequence> = seqs.iter().collect();
    let batch = Batch::from_sequences(&refs, vec![0, 1, 2], 9, 64);
    let all = model.forward_batch(&batch).unwrap();
    let out = small().out_len();
    for (b, s) in seqs.iter().enumerate() {
        let (single, _) = model.forward(s, false).unwrap();
        let rows = &all[b * 9 * out..][..s.len() * out];
        for (x, y) in rows.iter().zip(&single) {
            assert!((x - y).abs() < 1e-5, "row {b}");
        }
    }
}

#[test]
fn precisions_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m32 = Transformer::<f32>::new(small(), 5).unwrap();
    let m64: Transformer<f64> = m32.cast();
    let seq = random_seq(12, &mut rng);
    let (a, _) = m32.forward(&seq, false).unwrap();
    let (b, _) = m64.forward(&seq, false).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((f64::from(*x) - y).abs() < 1e-4);
    }
}

#[test]
fn cached_scores_match_full_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let gen = Transformer::<f32>::new(small(), 1).unwrap();
    let mut disc = Discriminator::from_generator(&gen).unwrap();
    randomize(&mut disc.params, &mut rng);
    for trial in 0..5 {
        let seq = random_seq(4 + 4 * trial, &mut rng);
        let full = disc.score_sequence(&seq).unwrap();
        let cache = disc.build_cache(&seq).unwrap();
        for (i, &p) in full.iter().enumerate() {
            let cached = disc.score(&cache, seq.patch(i), i).unwrap();
            assert!((cached - p).abs() <= 1e-5, "trial {trial} position {i}: {cached} vs {p}");
            assert_eq!(cached, disc.score(&cache, seq.patch(i), i).unwrap());
        }
        assert!(full.iter().any(|&p| (p - 0.5).abs() > 1e-3));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn earlier_positions_ignore_later_patches(t in 2usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Transformer::<f32>::new(small(), seed).unwrap();
        let seq = random_seq(t, &mut rng);
        let k = rng.random_range(1..t);
        let mut perturbed = seq.clone();
        perturbed.patches[k * 64..(k + 1) * 64].iter_mut().for_each(|v| *v = 1.0 - *v);
        let (a, trace) = model.forward(&seq, true).unwrap();
        let (b, _) = model.forward(&perturbed, false).unwrap();
        let out = small().out_len();
        prop_assert_eq!(&a[..k * out], &b[..k * out]);
        let trace = trace.unwrap();
        for l in 0..small().n_layers {
            for i in 0..t {
                let row = trace.head_mean_row(l, i);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-5);
                prop_assert!(row[i + 1..].iter().all(|&w| w == 0.0));
            }
        }
    }
}
