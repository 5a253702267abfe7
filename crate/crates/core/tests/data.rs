use proptest::prelude::*;
use twinlab::data::{
    augment, augment_traced, generate_toy_dataset, load_dataset, save_dataset, two_views,
    AugmentationPolicy, AugmentationStage, Dataset, Image, Recipe, RecipeParams, View,
};
use twinlab::Error;

fn sample_image(c: usize) -> Image {
    let n = 8 * 8 * c;
    Image::new(8, 8, c, (0..n).map(|i| ((i * 37) % 101) as f64 / 100.0).collect()).unwrap()
}

#[test]
fn transform_rates_match_policy_over_10k_draws() {
    let img = sample_image(3);
    let policy = AugmentationPolicy::default();
    let draws = 10_000u64;
    for view in [View::A, View::B] {
        let mut counts = [0usize; 5];
        for s in 0..draws {
            let (_, a) = augment_traced(&img, &policy, view, 7, s, s / 97).unwrap();
            for (k, fired) in [a.flip, a.jitter, a.grayscale, a.blur, a.solarize].into_iter().enumerate() {
                counts[k] += fired as usize;
            }
        }
        let want = [
            policy.flip_p,
            policy.jitter_p,
            policy.grayscale_p,
            policy.blur_p(view),
            policy.solarize_p(view),
        ];
        for (k, (&c, &p)) in counts.iter().zip(&want).enumerate() {
            let rate = c as f64 / draws as f64;
            assert!((rate - p).abs() <= 0.02, "{view:?} transform {k}: rate {rate} vs {p}");
        }
    }
}

#[test]
fn views_use_their_own_blur_and_solarize_rates() {
    let p = AugmentationPolicy::default();
    assert_eq!((p.blur_p(View::A), p.blur_p(View::B)), (1.0, 0.1));
    assert_eq!((p.solarize_p(View::A), p.solarize_p(View::B)), (0.0, 0.2));
}

#[test]
fn identity_pipeline_returns_input() {
    for c in [1, 3] {
        let img = sample_image(c);
        for view in [View::A, View::B] {
            let out = augment(&img, &AugmentationPolicy::identity(), view, 3, 1, 4).unwrap();
            for (a, b) in img.pixels.iter().zip(&out.pixels) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn augmentation_is_keyed_and_reproducible() {
    let img = sample_image(3);
    let p = AugmentationPolicy::default();
    let a = two_views(&img, &p, 1, 2, 3).unwrap();
    let b = two_views(&img, &p, 1, 2, 3).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.0, a.1);
    assert_ne!(two_views(&img, &p, 1, 2, 4).unwrap().0, a.0);
}

#[test]
fn masking_a_transform_keeps_other_draws() {
    let img = sample_image(3);
    let full = AugmentationPolicy::default();
    let mut no_gray = full.clone();
    no_gray.enabled.grayscale = false;
    for s in 0..200 {
        let (_, a) = augment_traced(&img, &full, View::B, 9, s, 0).unwrap();
        let (_, b) = augment_traced(&img, &no_gray, View::B, 9, s, 0).unwrap();
        assert_eq!((a.flip, a.jitter, a.blur, a.solarize), (b.flip, b.jitter, b.blur, b.solarize));
        assert!(!b.grayscale);
    }
}

#[test]
fn crop_only_stage_fires_nothing_else() {
    let img = sample_image(3);
    let policy = AugmentationPolicy {
        enabled: AugmentationStage::CropOnly.enabled(),
        ..Default::default()
    };
    for s in 0..100 {
        for view in [View::A, View::B] {
            let (_, a) = augment_traced(&img, &policy, view, 0, s, 0).unwrap();
            assert!(!(a.flip || a.jitter || a.grayscale || a.blur || a.solarize));
        }
    }
}

#[test]
fn outputs_stay_in_unit_range() {
    let img = sample_image(3);
    let p = AugmentationPolicy::default();
    for s in 0..300 {
        let (a, b) = two_views(&img, &p, 5, s, 1).unwrap();
        assert!(a.pixels.iter().chain(&b.pixels).all(|v| (0.0..=1.0).contains(v)));
    }
}

fn dataset(recipe: Recipe, n: usize) -> Dataset {
    generate_toy_dataset(recipe, n, 3, &RecipeParams::default()).unwrap()
}

#[test]
fn btds_round_trip_is_bitwise() {
    for recipe in [Recipe::Shapes, Recipe::TwoMoonsImages, Recipe::Blobs, Recipe::Gratings] {
        let ds = dataset(recipe, 50);
        let bytes = ds.to_btds().unwrap();
        let back = Dataset::from_btds(&bytes, Some(ds.num_classes), &ds.source).unwrap();
        assert_eq!(back.to_btds().unwrap(), bytes);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.pixels, ds.pixels, "{recipe}");
    }
}

#[test]
fn btds_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.btds");
    let ds = dataset(Recipe::Gratings, 40);
    save_dataset(&ds, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.pixels, ds.pixels);
    assert_eq!((back.height, back.width, back.channels), (ds.height, ds.width, ds.channels));
    assert_eq!(std::fs::read(&path).unwrap(), ds.to_btds().unwrap());
}

#[test]
fn truncated_btds_reports_section() {
    let bytes = dataset(Recipe::Shapes, 10).to_btds().unwrap();
    match Dataset::from_btds(&bytes[..bytes.len() - 1], None, "t") {
        Err(Error::Truncated { section, needed, available }) => {
            assert_eq!(section, "payload");
            assert_eq!(needed, bytes.len());
            assert_eq!(available, bytes.len() - 1);
        }
        other => panic!("expected truncation error, got {other:?}"),
    }
    assert!(matches!(Dataset::from_btds(&bytes[..5], None, "t"), Err(Error::Truncated { .. })));
}

#[test]
fn corrupt_btds_is_rejected() {
    let mut bytes = dataset(Recipe::Shapes, 10).to_btds().unwrap();
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Dataset::from_btds(&extra, None, "t").is_err());
    bytes[0] = b'X';
    assert!(Dataset::from_btds(&bytes, None, "t").is_err());
}

#[test]
fn gratings_are_balanced_and_deterministic() {
    let a = dataset(Recipe::Gratings, 400);
    let b = dataset(Recipe::Gratings, 400);
    assert_eq!(a.pixels, b.pixels);
    assert_eq!(a.num_classes, 4);
    assert_eq!((a.height, a.width), (8, 8));
    for class in 0..4 {
        assert_eq!(a.labels.iter().filter(|&&l| l == class).count(), 100);
    }
    assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    let c = generate_toy_dataset(Recipe::Gratings, 400, 4, &RecipeParams::default()).unwrap();
    assert_ne!(a.pixels, c.pixels);
}

#[test]
fn gratings_orientation_shows_in_gradients() {
    // class 0 varies along x, class 1 along y
    let ds = generate_toy_dataset(
        Recipe::Gratings,
        200,
        1,
        &RecipeParams {
            noise: 0.0,
            classes: 2,
            ..RecipeParams::default()
        },
    )
    .unwrap();
    let mut wins = 0;
    for i in 0..ds.len() {
        let img = ds.image(i);
        let (mut dx, mut dy) = (0.0, 0.0);
        for y in 0..7 {
            for x in 0..7 {
                dx += (img.get(y, x + 1, 0) - img.get(y, x, 0)).abs();
                dy += (img.get(y + 1, x, 0) - img.get(y, x, 0)).abs();
            }
        }
        wins += ((dx > dy) == (ds.labels[i] == 0)) as usize;
    }
    assert!(wins as f64 / ds.len() as f64 > 0.9, "{wins} of {}", ds.len());
}

#[test]
fn split_keeps_every_sample() {
    let ds = dataset(Recipe::Blobs, 100);
    let (train, test) = ds.split(0.25).unwrap();
    assert_eq!(train.len() + test.len(), 100);
    assert_eq!(test.len(), 25);
    let mut pixels = train.pixels.clone();
    pixels.extend(&test.pixels);
    assert_eq!(pixels, ds.pixels);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn btds_round_trips_any_size(n in 1usize..60, seed in any::<u64>(), classes in 2usize..=4) {
        let params = RecipeParams { classes, ..RecipeParams::default() };
        let ds = generate_toy_dataset(Recipe::Shapes, n, seed, &params).unwrap();
        let bytes = ds.to_btds().unwrap();
        let back = Dataset::from_btds(&bytes, Some(classes), "p").unwrap();
        prop_assert_eq!(back.pixels, ds.pixels);
        prop_assert_eq!(back.labels, ds.labels);
    }
}
