use pixar_core::inference::{
    first_word, first_word_match, generate, readability, recognize, recognize_detailed, write_pbm, Vocabulary, UNKNOWN_GLYPH,
};
use pixar_core::model::{ModelConfig, Transformer};
use pixar_core::textrender::{render_strip, render_text, GlyphAtlas, PatchGeometry, PatchSequence};
use proptest::prelude::*;

fn covered_text() -> impl Strategy<Value = String> {
    let chars: Vec<char> = GlyphAtlas::builtin().chars().chain([' ', ' ', ' ']).collect();
    prop::collection::vec(prop::sample::select(chars), 0..30).prop_map(|v| v.into_iter().collect())
}

fn tiny_model() -> Transformer<f32> {
    let cfg = ModelConfig {
        hidden_dim: 32,
        ff_hidden_dim: 48,
        ..ModelConfig::tiny()
    };
    Transformer::new(cfg, 13).unwrap()
}

#[test]
fn zero_steps_generate_nothing() {
    let model = tiny_model();
    let out = generate(&model, "The cat", 0, &GlyphAtlas::builtin()).unwrap();
    assert!(out.generated_patches.is_empty());
    assert_eq!(out.recognized_text, "");
}

#[test]
fn generation_is_bit_identical_across_calls() {
    let model = tiny_model();
    let atlas = GlyphAtlas::builtin();
    let a = generate(&model, "Birds sing at", 5, &atlas).unwrap();
    let b = generate(&model.clone(), "Birds sing at", 5, &atlas).unwrap();
    assert_eq!(a.generated_patches.patches, b.generated_patches.patches);
    assert_eq!(a.recognized_text, b.recognized_text);
    assert_eq!(a.generated_patches.len(), 10);
    assert_eq!(a.prompt_patches, pixar_core::textrender::render_prompt("Birds sing at", &atlas, &model.config.geometry).unwrap());
}

#[test]
fn generation_refuses_to_overflow_the_window() {
    let model = tiny_model();
    let err = generate(&model, "short", 40, &GlyphAtlas::builtin()).unwrap_err();
    assert_eq!(err.kind(), "window-overflow");
}

#[test]
fn readability_examples() {
    let vocab = Vocabulary::parse("the\ncat\n", "test").unwrap();
    assert_eq!(readability(&["the qxz"], &vocab).unwrap(), 1.0);
    assert_eq!(readability(&[""], &vocab).unwrap(), 0.0);
    assert_eq!(readability(&["cat, sat", "zzz"], &vocab).unwrap(), 0.5);
    assert!(readability::<&str>(&[], &vocab).is_err());
    assert!(Vocabulary::parse("\n\n", "empty").is_err());
    assert!(Vocabulary::builtin().contains("The"));
}

#[test]
fn word_matching_examples() {
    assert!(first_word_match("Rope and", "rope"));
    assert!(!first_word_match("ropes", "rope"));
    assert!(!first_word_match("", "rope"));
    assert_eq!(first_word("  hello world"), Some("hello"));
}

#[test]
fn pbm_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.pbm");
    let strip = render_strip("Hi", &GlyphAtlas::builtin()).unwrap();
    write_pbm(&path, &strip).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let header = format!("P4\n{} 8\n", strip.width());
    assert!(bytes.starts_with(header.as_bytes()));
    assert_eq!(bytes.len(), header.len() + 8 * strip.width().div_ceil(8));
}

#[test]
fn unreadable_glyph_runs_become_placeholders() {
    let geo = PatchGeometry::default();
    let mut seq = PatchSequence::new(64);
    // A solid 6x8 block matches no glyph closely.
    let mut p = vec![0.0f32; 64];
    for row in 0..8 {
        p[row * 8..row * 8 + 6].fill(1.0);
    }
    seq.push(&p);
    let rec = recognize_detailed(&seq, &geo, &GlyphAtlas::builtin());
    assert_eq!(rec.text, UNKNOWN_GLYPH.to_string());
}

proptest! {
    #[test]
    fn rendered_text_reads_back(text in covered_text()) {
        let atlas = GlyphAtlas::builtin();
        let geo = PatchGeometry::default();
        let seq = render_text(&text, &atlas, &geo).unwrap();
        prop_assert_eq!(recognize(&seq, &geo, &atlas), text.trim_end());
    }

    #[test]
    fn recognition_is_idempotent(bits in prop::collection::vec(prop::bool::weighted(0.25), 64 * 6)) {
        let atlas = GlyphAtlas::builtin();
        let geo = PatchGeometry::default();
        let mut seq = PatchSequence::new(64);
        for chunk in bits.chunks(64) {
            let p: Vec<f32> = chunk.iter().map(|&b| f32::from(b as u8)).collect();
            seq.push(&p);
        }
        let once = recognize(&seq, &geo, &atlas);
        let again = recognize(&render_text(&once, &atlas, &geo).unwrap(), &geo, &atlas);
        prop_assert_eq!(again, once);
    }

    #[test]
    fn readability_ignores_order(mut texts in prop::collection::vec("[a-z ]{0,12}", 1..12), seed in any::<u64>()) {
        let vocab = Vocabulary::builtin();
        let before = readability(&texts, &vocab).unwrap();
        let n = texts.len();
        texts.rotate_left((seed as usize) % n);
        texts.reverse();
        prop_assert_eq!(readability(&texts, &vocab).unwrap(), before);
    }
}
