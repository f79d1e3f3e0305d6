use std::collections::{HashMap, HashSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::imageio::{read_png, write_png};
use super::render::background_image;
use super::*;
use crate::error::Error;
use crate::text::Vocabulary;

fn one_part(shape: &str, color: &str, bg: &str) -> Attributes {
    Attributes {
        shape: shape.into(),
        color: color.into(),
        background: bg.into(),
        color2: None,
    }
}

#[test]
fn render_is_deterministic() {
    let g = Grammar::default();
    let a = one_part("triangle", "blue", "white");
    let s1 = render_sample(&g, &a, 42).unwrap();
    let s2 = render_sample(&g, &a, 42).unwrap();
    assert_eq!(s1, s2);
    let s3 = render_sample(&g, &a, 43).unwrap();
    assert_ne!(s1.image, s3.image);
}

#[test]
fn render_contract() {
    let g = Grammar::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..40 {
        let a = g.sample_attributes(&mut rng);
        let s = render_sample(&g, &a, seed).unwrap();
        assert_eq!(s.image.shape(), &[3, IMAGE_SIZE, IMAGE_SIZE]);
        assert_eq!(s.mask.shape(), &[1, IMAGE_SIZE, IMAGE_SIZE]);
        assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let f = s.mask_fraction();
        assert!((0.05..=0.6).contains(&f), "fraction {f}");
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(s.tokens.len() <= crate::text::MAX_TOKENS);
    }
}

#[test]
fn unknown_attribute_is_config_error() {
    let g = Grammar::default();
    for a in [
        one_part("hexagon", "red", "white"),
        one_part("circle", "teal", "white"),
        one_part("circle", "red", "plaid"),
    ] {
        assert!(matches!(render_sample(&g, &a, 0), Err(Error::Config(_))));
    }
}

#[test]
fn mean_colour_inside_mask_near_anchor() {
    let g = Grammar::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = IMAGE_SIZE * IMAGE_SIZE;
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let mut a = g.sample_attributes(&mut rng);
        a.color2 = None;
        let s = render_sample(&g, &a, seed).unwrap();
        let anchor = g.color_rgb(&a.color).unwrap();
        let m = s.mask.data();
        let count = m.iter().filter(|&&v| v > 0.5).count() as f64;
        for (c, &anchor_c) in anchor.iter().enumerate() {
            let sum: f64 = (0..n)
                .filter(|&p| m[p] > 0.5)
                .map(|p| s.image.data()[c * n + p] as f64)
                .sum();
            worst = worst.max((sum / count - anchor_c as f64).abs());
        }
    }
    assert!(worst <= 0.15, "worst channel deviation {worst}");
}

#[test]
fn outside_mask_equals_background() {
    let g = Grammar::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = IMAGE_SIZE * IMAGE_SIZE;
    for seed in 0..20 {
        let a = g.sample_attributes(&mut rng);
        let s = render_sample(&g, &a, seed).unwrap();
        let bg = background_image(&g, &a.background).unwrap();
        for p in 0..n {
            if s.mask.data()[p] == 0.0 {
                for c in 0..3 {
                    assert_eq!(s.image.data()[c * n + p], bg.data()[c * n + p]);
                }
            }
        }
    }
}

#[test]
fn every_caption_parses_back() {
    let g = Grammar::default();
    let caps = g.all_captions();
    // 4 shapes x 6 colours x 4 backgrounds x (1 + 5 second colours)
    assert_eq!(caps.len(), 4 * 6 * 4 * 6);
    for c in &caps {
        let a = Attributes::parse_caption(c).unwrap();
        assert_eq!(&a.caption(), c);
        g.validate(&a).unwrap();
    }
    assert!(matches!(
        Attributes::parse_caption(&["a", "red", "circle"]),
        Err(Error::Load(_))
    ));
}

#[test]
fn vocabulary_covers_grammar() {
    let g = Grammar::default();
    let v = Vocabulary::build(&g.all_captions()).unwrap();
    assert_eq!(v.size(), COLORS.len() + SHAPES.len() + BACKGROUNDS.len() + TEMPLATE_WORDS.len() + 2);
}

#[test]
fn make_dataset_splits_and_ids() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grammar::default();
    let ds = make_dataset(dir.path(), &g, 64, 16, 16, 9).unwrap();
    assert_eq!(ds.len(), 96);
    assert_eq!(ds.split_indices(Split::Train).len(), 64);
    assert_eq!(ds.split_indices(Split::Val).len(), 16);
    assert_eq!(ds.split_indices(Split::Test).len(), 16);
    let ids: HashSet<_> = ds.records.iter().map(|r| r.id.clone()).collect();
    assert_eq!(ids.len(), 96);
    assert!(dir.path().join("manifest.txt").exists());
    assert!(dir.path().join("vocab.txt").exists());
    assert!(dir.path().join("images/train-00000.png").exists());
    assert!(dir.path().join("masks/test-00015.png").exists());

    // round trip through the manifest
    let loaded = load_manifest(&dir.path().join("manifest.txt")).unwrap();
    assert_eq!(loaded.records, ds.records);

    for i in 0..loaded.len() {
        loaded.get(i).unwrap();
    }
    assert!(matches!(make_dataset(dir.path(), &g, 0, 1, 1, 0), Err(Error::Config(_))));
}

#[test]
fn loaded_image_matches_rendered_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grammar::default();
    let a = Attributes {
        color2: Some("green".into()),
        ..one_part("diamond", "orange", "brown")
    };
    let s = render_sample(&g, &a, 77).unwrap();
    let p = dir.path().join("x.png");
    write_png(&p, &s.image).unwrap();
    let back = read_png(&p).unwrap();
    assert_eq!(back.data(), s.image.data());
    let pm = dir.path().join("m.png");
    write_png(&pm, &s.mask).unwrap();
    assert_eq!(read_png(&pm).unwrap(), s.mask);
}

#[test]
fn make_dataset_is_deterministic() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let g = Grammar::default();
    let a = make_dataset(d1.path(), &g, 6, 2, 2, 4).unwrap();
    let b = make_dataset(d2.path(), &g, 6, 2, 2, 4).unwrap();
    assert_eq!(a.records, b.records);
    for i in 0..a.len() {
        assert_eq!(a.get(i).unwrap(), b.get(i).unwrap());
    }
}

#[test]
fn colour_marginals_roughly_uniform() {
    let g = Grammar::default();
    let mut counts: HashMap<String, usize> = HashMap::new();
    let n = 512;
    for i in 0..n as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(super::manifest::sample_seed(2024, i));
        *counts.entry(g.sample_attributes(&mut rng).color).or_default() += 1;
    }
    let share = n as f64 / COLORS.len() as f64;
    for (c, _) in COLORS {
        let k = counts.get(c).copied().unwrap_or(0) as f64;
        assert!((k - share).abs() <= 0.3 * share, "{c}: {k} vs {share}");
    }
}

#[test]
fn truncated_manifest_line_names_line() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grammar::default();
    make_dataset(dir.path(), &g, 3, 1, 1, 1).unwrap();
    let path = dir.path().join("manifest.txt");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let cut = lines[2].rfind('|').unwrap();
    lines[2].truncate(cut);
    std::fs::write(&path, lines.join("\n")).unwrap();
    let err = load_manifest(&path).unwrap_err().to_string();
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn invariant_violation_names_record() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grammar::default();
    let ds = make_dataset(dir.path(), &g, 2, 1, 1, 1).unwrap();
    // blank the mask of the first record
    let rec = &ds.records[0];
    write_png(&dir.path().join(&rec.mask_path), &crate::Tensor::zeros(&[1, 64, 64])).unwrap();
    let loaded = load_manifest(&dir.path().join("manifest.txt")).unwrap();
    let err = loaded.get(0).unwrap_err().to_string();
    assert!(err.contains(&rec.id), "{err}");
    // missing image
    std::fs::remove_file(dir.path().join(&ds.records[1].image_path)).unwrap();
    let err = loaded.get(1).unwrap_err().to_string();
    assert!(err.contains(&ds.records[1].id), "{err}");
    assert!(matches!(
        load_manifest(&dir.path().join("nope.txt")),
        Err(Error::Storage { .. })
    ));
}

fn sample_for(g: &Grammar, a: Attributes) -> CaptionedSample {
    render_sample(g, &a, 1).unwrap()
}

#[test]
fn single_mutable_attribute_flips() {
    let g = Grammar {
        shapes: vec!["circle".into()],
        colors: vec![("red".into(), [1.0, 0.0, 0.0]), ("blue".into(), [0.0, 0.0, 1.0])],
        backgrounds: vec![("black".into(), [0.0; 3])],
        two_part_prob: 0.0,
    };
    let s = sample_for(&g, one_part("circle", "red", "black"));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let m = sample_mismatch(&g, &s, MismatchKind::Any, &mut rng).unwrap();
        assert_eq!(m.new_attributes.color, "blue");
        assert_eq!(m.changed, vec![AttributeField::Color]);
    }
}

#[test]
fn mismatch_always_changes_and_covers_all_fields() {
    let g = Grammar::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let plain = sample_for(&g, one_part("square", "red", "gray"));
    let two = sample_for(
        &g,
        Attributes {
            color2: Some("yellow".into()),
            ..one_part("circle", "blue", "white")
        },
    );
    let mut seen = HashSet::new();
    for i in 0..1000 {
        let s = if i % 2 == 0 { &plain } else { &two };
        let m = sample_mismatch(&g, s, MismatchKind::Any, &mut rng).unwrap();
        assert_ne!(m.new_tokens, s.tokens);
        assert_eq!(m.new_attributes.shape, s.attributes.shape);
        g.validate(&m.new_attributes).unwrap();
        for f in &m.changed {
            seen.insert(*f);
        }
        let o = sample_mismatch(&g, s, MismatchKind::ObjectColor, &mut rng).unwrap();
        assert_eq!(o.changed, vec![AttributeField::Color]);
        assert_eq!(o.new_attributes.background, s.attributes.background);
    }
    assert_eq!(seen.len(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn caption_bijective(seed in any::<u64>()) {
        let g = Grammar::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = g.sample_attributes(&mut rng);
        prop_assert_eq!(Attributes::parse_caption(&a.caption()).unwrap(), a);
    }

    #[test]
    fn mismatch_differs(seed in any::<u64>()) {
        let g = Grammar::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = g.sample_attributes(&mut rng);
        let s = CaptionedSample {
            id: "p".into(),
            image: crate::Tensor::zeros(&[3, 64, 64]),
            mask: crate::Tensor::zeros(&[1, 64, 64]),
            tokens: a.caption(),
            attributes: a,
        };
        let m = sample_mismatch(&g, &s, MismatchKind::Any, &mut rng).unwrap();
        prop_assert_ne!(m.new_tokens, s.tokens);
        prop_assert_eq!(m.new_attributes.shape, s.attributes.shape);
    }
}
