mod common;

use occnet::dataset::synth::{random_segments, render_sequence};
use occnet::dataset::{
    balance, extract_all, read_patch_cache, split_sequence, write_patch_cache, Channels, ExtractConfig, Patch, PatchLabel,
    PatchSource, SplitSpec,
};
use occnet::evaluator::{metrics, ConfusionCounts};
use occnet::fusion::{binarize, fuse, gaussian_kernel, Classification, FusionConfig, FusionMode};
use occnet::model::{init_model, InitSchedule};
use occnet::tensor::{softmax, Tensor};
use occnet::trainer::{train, TrainConfig};
use proptest::prelude::*;

fn classifications(w: usize, h: usize) -> impl Strategy<Value = Vec<Classification>> {
    prop::collection::vec(
        (0..h, 0..w, 0.0f32..=1.0).prop_map(|(row, col, confidence)| Classification { row, col, confidence }),
        1..25,
    )
}

fn fuse_case() -> impl Strategy<Value = (usize, usize, f64, Vec<Classification>)> {
    (8usize..36, 8usize..36, 1.0f64..12.0).prop_flat_map(|(w, h, fwhm)| (Just(w), Just(h), Just(fwhm), classifications(w, h)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fuse_matches_naive_oracle((w, h, fwhm, classes) in fuse_case(), sum in any::<bool>()) {
        let cfg = FusionConfig {
            fwhm,
            mode: if sum { FusionMode::Sum } else { FusionMode::Normalized },
            ..Default::default()
        };
        prop_assert!(common::max_fuse_gap(&classes, &cfg, w, h) <= 1e-6);
    }

    #[test]
    fn fuse_ignores_order((w, h, fwhm, classes) in fuse_case(), rot in 0usize..25) {
        let cfg = FusionConfig { fwhm, ..Default::default() };
        let mut shuffled = classes.clone();
        shuffled.reverse();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        let a = fuse(&classes, &cfg, w, h, 0).unwrap();
        let b = fuse(&shuffled, &cfg, w, h, 0).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn fused_values_stay_within_confidence_range((w, h, fwhm, classes) in fuse_case()) {
        let cfg = FusionConfig { fwhm, ..Default::default() };
        let lo = classes.iter().map(|c| c.confidence).fold(f32::INFINITY, f32::min);
        let hi = classes.iter().map(|c| c.confidence).fold(f32::NEG_INFINITY, f32::max);
        let hm = fuse(&classes, &cfg, w, h, 0).unwrap();
        for (v, cov) in hm.values.iter().zip(&hm.coverage) {
            if *cov > 0.0 {
                prop_assert!(*v >= lo - 1e-6 && *v <= hi + 1e-6, "{} outside [{}, {}]", v, lo, hi);
            } else {
                prop_assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn raising_threshold_never_adds_pixels((w, h, fwhm, classes) in fuse_case(), t1 in 0.01f64..0.99, t2 in 0.01f64..0.99) {
        let cfg = FusionConfig { fwhm, ..Default::default() };
        let hm = fuse(&classes, &cfg, w, h, 0).unwrap();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = binarize(&hm, lo).unwrap();
        let b = binarize(&hm, hi).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(&x, &y)| x || !y));
    }

    #[test]
    fn kernel_is_half_at_half_width(conf in 0.0f64..1.0, fwhm in 0.5f64..20.0, angle in 0.0f64..std::f64::consts::TAU) {
        let k = gaussian_kernel(conf, fwhm);
        let r = fwhm / 2.0;
        prop_assert!((k.value(r * angle.sin(), r * angle.cos()) - conf / 2.0).abs() <= 1e-9);
        prop_assert!((k.value(0.0, 0.0) - conf).abs() <= 1e-12);
    }

    #[test]
    fn overall_error_is_prevalence_weighted(tp in 0u64..5000, fp in 0u64..5000, tn in 0u64..5000, fn_ in 0u64..5000) {
        let c = ConfusionCounts { tp, fp, tn, fn_ };
        let m = metrics(&c);
        let n = (tp + fp + tn + fn_) as f64;
        match (m.overall_error, m.false_alarm, m.missed_detection) {
            (Some(overall), Some(fa), Some(md)) => {
                let p = (tp + fn_) as f64 / n;
                prop_assert!((overall - (p * md + (1.0 - p) * fa)).abs() <= 1e-12);
            }
            (overall, fa, md) => {
                prop_assert_eq!(overall.is_none(), n == 0.0);
                prop_assert_eq!(fa.is_none(), fp + tn == 0);
                prop_assert_eq!(md.is_none(), tp + fn_ == 0);
            }
        }
    }

    #[test]
    fn duplicating_the_test_set_keeps_rates(tp in 0u64..5000, fp in 0u64..5000, tn in 0u64..5000, fn_ in 0u64..5000, k in 2u64..6) {
        let c = ConfusionCounts { tp, fp, tn, fn_ };
        let scaled = ConfusionCounts { tp: k * tp, fp: k * fp, tn: k * tn, fn_: k * fn_ };
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
            (None, None) => true,
            _ => false,
        };
        let (a, b) = (metrics(&c), metrics(&scaled));
        prop_assert!(close(a.overall_error, b.overall_error));
        prop_assert!(close(a.false_alarm, b.false_alarm));
        prop_assert!(close(a.missed_detection, b.missed_detection));
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 1..8)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn balance_keeps_positives_and_caps_negatives(labels in prop::collection::vec(any::<bool>(), 0..60), ratio in 0.0f64..3.0, seed in any::<u64>()) {
        let patches: Vec<Patch> = labels.iter().enumerate().map(|(i, &pos)| tiny_patch(i, pos)).collect();
        let kept = balance(patches.clone(), ratio, seed);
        let pos = labels.iter().filter(|&&p| p).count();
        let neg = labels.len() - pos;
        let kept_pos = kept.iter().filter(|p| p.label == PatchLabel::Occlusion).count();
        let kept_neg = kept.len() - kept_pos;
        prop_assert_eq!(kept_pos, pos);
        prop_assert_eq!(kept_neg, ((pos as f64 * ratio).round() as usize).min(neg));
        prop_assert!(kept.windows(2).all(|w| w[0].source.frame_id < w[1].source.frame_id));
        prop_assert_eq!(kept, balance(patches, ratio, seed));
    }
}

fn tiny_patch(id: usize, positive: bool) -> Patch {
    Patch {
        data: Tensor::full(&[1, 32, 32], id as f32).unwrap(),
        label: if positive { PatchLabel::Occlusion } else { PatchLabel::NoOcclusion },
        source: PatchSource {
            frame_id: id,
            row: 0,
            col: 0,
        },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn training_patches_never_come_from_test_frames(seed in 0u64..1000, frames in 3usize..8, fraction in 0.2f64..0.8) {
        let rendered = render_sequence(&random_segments(seed, 1, frames, 64, 48)).unwrap();
        let split = SplitSpec::from_fraction(fraction, rendered.len()).unwrap();
        let (tr, te) = split_sequence(&rendered, &split).unwrap();
        let cfg = ExtractConfig { stride: 8, ..Default::default() };
        let extract = |fs: &[occnet::dataset::SyntheticFrame]| {
            let f: Vec<_> = fs.iter().map(|f| f.frame.clone()).collect();
            let l: Vec<_> = fs.iter().map(|f| f.labels.clone()).collect();
            extract_all(&f, &l, &cfg).unwrap()
        };
        let test_ids: std::collections::HashSet<usize> = te.iter().map(|f| f.frame.id).collect();
        prop_assert!(extract(tr).iter().all(|p| !test_ids.contains(&p.source.frame_id)));
        prop_assert!(extract(te).iter().all(|p| test_ids.contains(&p.source.frame_id)));
    }

    #[test]
    fn patch_cache_round_trips(n in 1usize..6, channels in 3usize..5, seed in any::<u32>()) {
        let patches: Vec<Patch> = (0..n)
            .map(|i| Patch {
                data: Tensor::from_fn(&[channels, 32, 32], |j| ((j as u32 ^ seed).wrapping_mul(2654435761) >> 8) as f32 * 1e-3 - i as f32).unwrap(),
                label: if (seed as usize + i).is_multiple_of(2) { PatchLabel::Occlusion } else { PatchLabel::NoOcclusion },
                source: PatchSource { frame_id: i, row: i * 3, col: seed as usize % 1000 },
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        write_patch_cache(&path, &patches).unwrap();
        prop_assert_eq!(read_patch_cache(&path).unwrap(), patches);
    }
}

fn noise_patches(n: usize) -> Vec<Patch> {
    (0..n)
        .map(|i| Patch {
            data: Tensor::from_fn(&[4, 32, 32], |j| (((i * 7919 + j * 104729) % 1000) as f32 / 1000.0) - 0.5).unwrap(),
            label: if i % 2 == 0 { PatchLabel::Occlusion } else { PatchLabel::NoOcclusion },
            source: PatchSource {
                frame_id: i,
                row: 0,
                col: 0,
            },
        })
        .collect()
}

fn short_training(patches: &[Patch], seed: u64) -> Vec<f32> {
    let mut model = init_model(4, &InitSchedule::default(), 3).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 3,
        shuffle_seed: seed,
        channels: Channels::Rgbd,
        ..Default::default()
    };
    train(&mut model, patches, &patches[..2], &cfg).unwrap();
    model.params().layers.iter().flat_map(|l| l.weights.data().to_vec()).collect()
}

#[test]
fn shuffling_is_seeded() {
    let patches = noise_patches(7);
    let a = short_training(&patches, 1);
    assert_eq!(a, short_training(&patches, 1));
    assert_ne!(a, short_training(&patches, 2));
    let mut reordered = patches.clone();
    reordered.reverse();
    assert_ne!(a, short_training(&reordered, 1));
}

#[test]
fn normalization_is_a_shift() {
    use occnet::dataset::NormStats;
    let mut patches = noise_patches(5);
    let raw = patches.clone();
    let stats = NormStats::compute(&patches).unwrap();
    stats.normalize(&mut patches).unwrap();
    for c in 0..4 {
        let plane = 32 * 32;
        let mean: f64 = patches.iter().flat_map(|p| &p.data.data()[c * plane..(c + 1) * plane]).map(|&v| v as f64).sum::<f64>()
            / (5 * plane) as f64;
        assert!(mean.abs() < 1e-6);
    }
    for (a, b) in [(0, 1), (2, 4)] {
        for i in 0..raw[a].data.len() {
            let before = raw[a].data.data()[i] - raw[b].data.data()[i];
            let after = patches[a].data.data()[i] - patches[b].data.data()[i];
            assert!((before - after).abs() < 1e-6);
        }
    }
}
