use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vqunet_core::codebook::site_vectors;
use vqunet_core::dataset::GroundTruthLabels;
use vqunet_core::detect::{auc, frame_score, normalize, SaliencyMap};
use vqunet_core::explain::{
    self, evaluate_map, explain_frame, Detection, ExplanationEntry, ExplanationRecord, Source,
};
use vqunet_core::losses::{total_loss, total_loss_grads, LossInputs, LossWeights};
use vqunet_core::model::{NetworkConfig, VqUNet};
use vqunet_core::nn::{zero_grads, Adam, Parameters, Phase};
use vqunet_core::tensor::Tensor;

fn small_net() -> NetworkConfig {
    NetworkConfig {
        n: 2,
        levels: 2,
        base_channels: 4,
        bottleneck_dim: 4,
        codebook_size: 8,
        ..NetworkConfig::default()
    }
}

fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (4usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(0u8..12, n).prop_map(|v| v.into_iter().map(|x| x as f64 * 0.5).collect()),
            prop::collection::vec(any::<bool>(), n).prop_map(|mut l| {
                l[0] = true;
                l[1] = false;
                l
            }),
        )
    })
}

fn map_from(values: Vec<f64>, width: usize) -> SaliencyMap {
    SaliencyMap {
        clip_id: "c".into(),
        frame_index: 0,
        width,
        height: values.len() / width,
        values,
    }
}

fn detections(boxes: &[[f64; 4]]) -> Vec<Detection> {
    boxes
        .iter()
        .enumerate()
        .map(|(i, &bbox)| Detection {
            bbox,
            label: format!("d{i}"),
            confidence: 1.0,
            source: Source::Object,
        })
        .collect()
}

fn box_strategy(w: usize, h: usize) -> impl Strategy<Value = [f64; 4]> {
    (0..w - 1, 0..h - 1, 1..w, 1..h).prop_map(move |(x, y, bw, bh)| {
        [x as f64, y as f64, (x + bw).min(w) as f64, (y + bh).min(h) as f64]
    })
}

fn map_fixture(seed: u64) -> (Vec<ExplanationRecord>, BTreeMap<String, GroundTruthLabels>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = ["a", "b", "c"];
    let labels: Vec<BTreeSet<String>> = (0..15)
        .map(|_| classes.iter().filter(|_| rng.random_bool(0.4)).map(|c| c.to_string()).collect())
        .collect();
    let records = (0..15)
        .map(|frame| ExplanationRecord {
            clip: "v".into(),
            frame,
            frame_score: 0.0,
            entries: (0..rng.random_range(0..4))
                .map(|_| ExplanationEntry {
                    bbox: [0.0, 0.0, 1.0, 1.0],
                    label: classes[rng.random_range(0..3)].into(),
                    source: Source::Action,
                    confidence: 0.5,
                    box_score: rng.random_range(0.0..10.0),
                    anomalous: rng.random_bool(0.8),
                })
                .collect(),
        })
        .collect();
    let gt = BTreeMap::from([(
        "v".to_string(),
        GroundTruthLabels {
            frame_flags: labels.iter().map(|l| !l.is_empty()).collect(),
            explanation_labels: labels,
        },
    )]);
    (records, gt)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_is_invariant_under_increasing_transforms((scores, labels) in scored_labels(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let base = auc(&scores, &labels).unwrap();
        let affine: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        prop_assert!((auc(&affine, &labels).unwrap() - base).abs() < 1e-12);
        prop_assert!((auc(&exp, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn flipping_labels_mirrors_auc((scores, labels) in scored_labels()) {
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let sum = auc(&scores, &labels).unwrap() + auc(&scores, &flipped).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn minmax_preserves_rank_within_a_clip(raw in prop::collection::vec(0.0f64..1e4, 1..80)) {
        let z = normalize("per_video_minmax", &raw).unwrap();
        prop_assert!(z.iter().all(|v| (0.0..=1.0).contains(v)));
        for i in 0..raw.len() {
            for j in 0..raw.len() {
                prop_assert_eq!(raw[i].partial_cmp(&raw[j]), z[i].partial_cmp(&z[j]));
            }
        }
    }

    #[test]
    fn constant_clip_normalizes_to_zero(v in 0.0f64..100.0, n in 1usize..30) {
        let z = normalize("per_video_minmax", &vec![v; n]).unwrap();
        prop_assert!(z.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn box_ranking_ignores_positive_rescaling(
        values in prop::collection::vec(0.0f64..4.0, 12 * 10),
        boxes in prop::collection::vec(box_strategy(12, 10), 1..8),
        scale in 0.01f64..100.0,
    ) {
        let dets = detections(&boxes);
        let map = map_from(values.clone(), 12);
        let scaled = map_from(values.iter().map(|v| v * scale).collect(), 12);
        for name in ["sum", "mean"] {
            let agg = explain::registry().get(name).unwrap();
            let order = |m: &SaliencyMap| -> Vec<String> {
                explain_frame(m, &dets, 0.0, agg).entries.into_iter().map(|e| e.label).collect()
            };
            prop_assert_eq!(order(&map), order(&scaled));
        }
    }

    #[test]
    fn frame_score_is_monotone_in_the_map(
        values in prop::collection::vec(0.0f64..4.0, 64),
        bump in prop::collection::vec(0.0f64..1.0, 64),
    ) {
        let base = frame_score(&map_from(values.clone(), 8));
        let raised = frame_score(&map_from(values.iter().zip(&bump).map(|(v, b)| v + b).collect(), 8));
        prop_assert!(base >= 0.0);
        prop_assert!(raised >= base);
    }

    #[test]
    fn map_is_invariant_under_increasing_score_transforms(seed in any::<u64>(), a in 0.1f64..10.0) {
        let (records, gt) = map_fixture(seed);
        if gt["v"].explanation_labels.iter().all(BTreeSet::is_empty) {
            return Ok(());
        }
        let base = evaluate_map(&records, &gt, &[]).unwrap();
        let mut moved = records.clone();
        for e in moved.iter_mut().flat_map(|r| r.entries.iter_mut()) {
            e.box_score = (a * e.box_score).ln_1p();
        }
        let after = evaluate_map(&moved, &gt, &[]).unwrap();
        prop_assert_eq!(base.map, after.map);
    }

    #[test]
    fn empty_predictions_give_zero_map(seed in any::<u64>()) {
        let (mut records, gt) = map_fixture(seed);
        if gt["v"].explanation_labels.iter().all(BTreeSet::is_empty) {
            return Ok(());
        }
        records.iter_mut().for_each(|r| r.entries.clear());
        prop_assert_eq!(evaluate_map(&records, &gt, &[]).unwrap().map, 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn quantized_bottleneck_uses_at_most_k_vectors(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = VqUNet::<f64>::new(small_net(), seed).unwrap();
        let out = model.infer(&rand_tensor([3, 6, 16, 16], &mut rng)).unwrap();
        let q = out.quantization.unwrap();
        let distinct: BTreeSet<Vec<u64>> = site_vectors(&q.z_q)
            .into_iter()
            .map(|v| v.into_iter().map(f64::to_bits).collect())
            .collect();
        prop_assert!(distinct.len() <= small_net().codebook_size);
        let cb = model.codebook.as_ref().unwrap();
        for (site, &k) in q.nearest.iter().enumerate() {
            let v = &site_vectors(&q.z_q)[site];
            prop_assert_eq!(v.as_slice(), cb.entry(k));
        }
    }

    #[test]
    fn parameters_stay_finite_after_one_optimizer_step(seed in any::<u64>(), lr in 1e-5f64..1e-2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = VqUNet::<f64>::new(small_net(), seed).unwrap();
        let inputs = rand_tensor([2, 6, 16, 16], &mut rng);
        let target = rand_tensor([2, 3, 16, 16], &mut rng);
        let weights = LossWeights::default();
        let (out, tape) = model.forward(&inputs, Phase::Train).unwrap();
        let li = LossInputs { predicted: &out.predicted, target: &target, quantization: out.quantization.as_ref() };
        prop_assert!(total_loss(&li, &weights).total.is_finite());
        let grads = total_loss_grads(&li, &weights, small_net().codebook_size);
        zero_grads(&mut model);
        model.backward(&tape, &grads.predicted, grads.encoder_output.as_ref());
        if let (Some(cb), Some(g)) = (model.codebook.as_mut(), grads.codebook) {
            cb.entries.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        Adam::new(lr).step(&mut model);
        model.absorb(&tape);
        let mut finite = true;
        model.visit_params("", &mut |_, p| finite &= p.value.iter().all(|v| v.is_finite()));
        prop_assert!(finite);
        let again = model.infer(&inputs).unwrap();
        prop_assert!(again.predicted.all_finite());
    }
}
