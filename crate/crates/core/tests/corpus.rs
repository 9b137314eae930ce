use pixar_core::corpus::{batch_iter, build_dataset, segment_sentences, segment_text, split_sentences, Dataset, SegmenterConfig};
use pixar_core::textrender::{eos_patch, is_eos, render_text, GlyphAtlas, PatchGeometry, PatchSequence};
use pixar_core::training::BatchSource;
use proptest::prelude::*;

fn cfg(l_max: usize, l_min: usize) -> SegmenterConfig {
    SegmenterConfig { l_max, l_min }
}

/// Sample count and mean length read straight from the file bytes.
fn recount(bytes: &[u8]) -> (usize, f64) {
    let patch_len = bytes[8] as usize * bytes[9] as usize * bytes[10] as usize;
    let count = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
    let per_patch = patch_len.div_ceil(8);
    let (mut pos, mut total) = (18, 0);
    for _ in 0..count {
        let t = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]) as usize;
        total += t;
        pos += 2 + t * per_patch;
    }
    assert_eq!(pos, bytes.len());
    (count, if count == 0 { 0.0 } else { total as f64 / count as f64 })
}

fn random_dataset(lengths: &[usize], seed: u64) -> Dataset {
    let geo = PatchGeometry::default();
    let mut ds = Dataset::new(geo, 32);
    let mut state = seed;
    for &t in lengths {
        let mut seq = PatchSequence::new(geo.patch_len());
        for _ in 0..t {
            let patch: Vec<f32> = (0..geo.patch_len())
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (state >> 63) as f32
                })
                .collect();
            seq.push(&patch);
        }
        ds.push(seq).unwrap();
    }
    ds
}

#[test]
fn segmentation_examples() {
    assert_eq!(segment_sentences(&["AA.", "BBBB.", "CC."], &cfg(10, 4)), vec!["AA. BBBB."]);
    let long = "x".repeat(19) + ".";
    assert_eq!(segment_sentences(&[long.as_str()], &cfg(10, 4)), vec![long.clone()]);
    assert!(segment_text("", &cfg(10, 4)).is_empty());
    assert_eq!(split_sentences("One.  Two!\nThree? four"), vec!["One.", "Two!", "Three?", "four"]);
}

#[test]
fn ten_character_sample_gets_one_eos() {
    let atlas = GlyphAtlas::builtin();
    let geo = PatchGeometry::default();
    let text = "Hello you.";
    let mut ds = Dataset::new(geo, 360);
    ds.push_text(text, &atlas).unwrap();
    let rendered = render_text(text, &atlas, &geo).unwrap();
    let s = &ds.samples[0];
    assert_eq!(s.len(), rendered.len() + 1);
    assert_eq!(s.patch(s.len() - 1), eos_patch(&geo).as_slice());
    assert!((0..rendered.len()).all(|t| !is_eos(s.patch(t))));
}

#[test]
fn build_stats_match_a_recount_of_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.txt");
    std::fs::write(
        &input,
        "The cat sat on the mat. A dog ran in the park. Birds sing at dawn.\n\
         The sun is warm today. We like to read books \u{263A}. Rain fell all night long.",
    )
    .unwrap();
    let out = dir.path().join("ds.bin");
    let atlas = GlyphAtlas::builtin();
    let (ds, stats) = build_dataset(&[&input], &atlas, &PatchGeometry::default(), 64, &cfg(50, 10), &out).unwrap();
    assert_eq!(stats.dropped_chars, 1);
    let (count, mean) = recount(&std::fs::read(&out).unwrap());
    assert_eq!(count, stats.samples);
    assert_eq!(count, ds.len());
    assert!((mean - ds.mean_len()).abs() < 1e-12);
    // Source text is not stored; pixels and masks are.
    let back = Dataset::load(&out).unwrap();
    assert_eq!(back.len(), ds.len());
    for (a, b) in back.samples.iter().zip(&ds.samples) {
        assert_eq!((&a.patches, &a.pad_mask), (&b.patches, &b.pad_mask));
    }

    let empty = dir.path().join("empty.bin");
    let (ds, _) = build_dataset::<&std::path::Path>(&[], &atlas, &PatchGeometry::default(), 64, &cfg(50, 10), &empty).unwrap();
    assert!(ds.is_empty());
    assert_eq!(recount(&std::fs::read(&empty).unwrap()), (0, 0.0));
}

#[test]
fn five_samples_in_pairs() {
    let ds = random_dataset(&[3, 4, 5, 6, 7], 1);
    let sizes: Vec<usize> = batch_iter(&ds, 2, 32, 9).unwrap().map(|b| b.size()).collect();
    assert_eq!(sizes, vec![2, 2, 1]);
}

proptest! {
    #[test]
    fn segments_are_consecutive_sentence_runs(
        sents in prop::collection::vec("[a-z]{1,12}\\.", 1..40),
        l_max in 5usize..60,
        l_min_frac in 0.0f64..1.0,
    ) {
        let c = cfg(l_max, ((l_max as f64 * l_min_frac) as usize).max(1));
        let samples = segment_sentences(&sents, &c);
        let mut next = 0;
        for sample in &samples {
            let len = sample.chars().count();
            prop_assert!(len >= c.l_min);
            let parts: Vec<&str> = sample.split(' ').collect();
            prop_assert!(len <= c.l_max || parts.len() == 1);
            let start = (next..sents.len()).find(|&i| sents[i] == parts[0]).unwrap();
            prop_assert_eq!(&sents[start..start + parts.len()], parts.as_slice());
            next = start + parts.len();
        }
    }

    #[test]
    fn dataset_bytes_round_trip(lengths in prop::collection::vec(0usize..32, 0..12), seed in any::<u64>()) {
        let ds = random_dataset(&lengths, seed);
        let bytes = ds.to_bytes().unwrap();
        let back = Dataset::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn batches_are_a_permutation(lengths in prop::collection::vec(1usize..20, 1..15), bs in 1usize..6, seed in any::<u64>()) {
        let ds = random_dataset(&lengths, seed);
        let mut seen = Vec::new();
        let batches: Vec<_> = batch_iter(&ds, bs, 32, seed).unwrap().collect();
        for b in &batches {
            prop_assert!(b.size() <= bs);
            for (row, &id) in b.sample_ids.iter().enumerate() {
                let s = &ds.samples[id];
                prop_assert_eq!(b.real_len(row), s.len());
                let got = &b.patches[row * 32 * b.patch_len..][..s.len() * b.patch_len];
                prop_assert_eq!(got, s.patches.as_slice());
                let pad = &b.patches[(row * 32 + s.len()) * b.patch_len..(row + 1) * 32 * b.patch_len];
                prop_assert!(pad.iter().all(|&v| v == 0.0));
                seen.push(id);
            }
        }
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..ds.len()).collect::<Vec<_>>());
        let again: Vec<_> = batch_iter(&ds, bs, 32, seed).unwrap().collect();
        prop_assert_eq!(again, batches);
    }

    #[test]
    fn batch_source_is_random_access(lengths in prop::collection::vec(1usize..8, 1..10), bs in 1usize..4, k in 0u64..30) {
        let ds = random_dataset(&lengths, 5);
        let src = BatchSource { dataset: &ds, batch_size: bs, window: 32, seed: 11 };
        let per_epoch = src.per_epoch() as u64;
        let epoch = pixar_core::corpus::BatchIter::new(&ds, bs, 32, 11, k / per_epoch).unwrap();
        let expected = epoch.into_iter().nth((k % per_epoch) as usize).unwrap();
        prop_assert_eq!(src.batch(k).unwrap(), expected);
    }
}
