use pixar_core::textrender::{
    apply_visual_attack, eos_patch, generation_gap, is_eos, patchify, render_prompt, render_strip, render_text, unpatchify,
    AttackTable, GlyphAtlas, PatchGeometry, PixelStrip, GLYPH_HEIGHT,
};
use proptest::prelude::*;

/// 'A' in the shipped atlas, frozen as an 8x8 patch ('#' = ink).
const GOLDEN_A: [&str; 8] = [
    "........",
    ".###....",
    "#...#...",
    "#...#...",
    "#####...",
    "#...#...",
    "#...#...",
    "........",
];

fn atlas() -> GlyphAtlas {
    GlyphAtlas::builtin()
}

fn covered_text() -> impl Strategy<Value = String> {
    let chars: Vec<char> = atlas().chars().chain([' ']).collect();
    prop::collection::vec(prop::sample::select(chars), 0..40).prop_map(|v| v.into_iter().collect())
}

#[test]
fn a_matches_golden_patch() {
    let seq = render_text("A", &atlas(), &PatchGeometry::default()).unwrap();
    assert_eq!(seq.len(), 1);
    let p = seq.patch(0);
    for (r, row) in GOLDEN_A.iter().enumerate() {
        let got: String = (0..8).map(|c| if p[r * 8 + c] == 1.0 { '#' } else { '.' }).collect();
        assert_eq!(&got, row, "row {r}");
    }
}

#[test]
fn atlas_glyphs_are_well_formed() {
    let a = atlas();
    assert!(a.len() >= 95);
    for (ch, g) in a.glyphs() {
        assert!(g.width() >= 1, "{ch:?}");
        assert!(g.columns.iter().any(|&c| c != 0), "{ch:?} is blank");
    }
    AttackTable::builtin().check_atlas(&a).unwrap();
}

#[test]
fn eos_differs_from_every_glyph_patch() {
    let a = atlas();
    let geo = PatchGeometry::default();
    assert_eq!(eos_patch(&geo).iter().sum::<f32>(), 64.0);
    for (ch, _) in a.glyphs() {
        let seq = render_text(&ch.to_string(), &a, &geo).unwrap();
        for t in 0..seq.len() {
            assert!(!is_eos(seq.patch(t)), "{ch:?}");
        }
    }
}

#[test]
fn prompt_gap_examples() {
    for (w, expected) in [(13, 16), (8, 16), (0, 8), (5, 8)] {
        let strip = PixelStrip { columns: vec![0xff; w] };
        let gapped = generation_gap(&strip, 8);
        assert_eq!(gapped.width(), expected, "width {w}");
        assert!(gapped.columns[w..].iter().all(|&c| c == 0));
    }
    let geo = PatchGeometry::default();
    let strip = render_strip("Hi", &atlas()).unwrap();
    let prompt = render_prompt("Hi", &atlas(), &geo).unwrap();
    assert_eq!(prompt.len() * 8, generation_gap(&strip, 8).width());
}

#[test]
fn half_attack_on_four_letters_changes_two() {
    let table = AttackTable::builtin();
    for seed in 0..50 {
        let out = apply_visual_attack("abcd", &table, 0.5, seed).unwrap();
        let diff = out.chars().zip("abcd".chars()).filter(|(a, b)| a != b).count();
        assert_eq!(diff, 2, "seed {seed}: {out}");
    }
}

proptest! {
    #[test]
    fn patches_are_binary_and_cover_the_strip(text in covered_text()) {
        let a = atlas();
        let geo = PatchGeometry::default();
        let strip = render_strip(&text, &a).unwrap();
        let seq = render_text(&text, &a, &geo).unwrap();
        prop_assert_eq!(seq.len(), strip.width().div_ceil(8));
        prop_assert!(seq.patches.iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(seq.pad_mask.iter().all(|&m| m));
        let mut padded = strip.clone();
        padded.pad_to_multiple(8);
        prop_assert_eq!(unpatchify(&seq, &geo), padded);
    }

    #[test]
    fn patchify_inverts_unpatchify(cols in prop::collection::vec(any::<u8>(), 0..64)) {
        let geo = PatchGeometry::default();
        let mut strip = PixelStrip { columns: cols };
        strip.pad_to_multiple(8);
        let seq = patchify(&strip, &geo);
        prop_assert_eq!(unpatchify(&seq, &geo), strip);
        prop_assert_eq!(GLYPH_HEIGHT, geo.height);
    }

    #[test]
    fn attack_replaces_the_rounded_share(text in "[a-zA-Z ,.]{0,30}", ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let table = AttackTable::builtin();
        let out = apply_visual_attack(&text, &table, ratio, seed).unwrap();
        let letters = text.chars().filter(char::is_ascii_alphabetic).count();
        let expected = (ratio * letters as f64 + 0.5).floor() as usize;
        prop_assert_eq!(out.chars().count(), text.chars().count());
        let mut changed = 0;
        for (o, t) in out.chars().zip(text.chars()) {
            if o != t {
                changed += 1;
                prop_assert!(table.replacements(t).unwrap().contains(&o));
            }
        }
        prop_assert_eq!(changed, expected);
        prop_assert_eq!(apply_visual_attack(&text, &table, ratio, seed).unwrap(), out.clone());
        prop_assert!(render_text(&out, &atlas(), &PatchGeometry::default()).is_ok());
    }
}
