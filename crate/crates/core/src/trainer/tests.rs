use super::*;
use crate::dataset::{image_rng, render, ManifestEntry, SyntheticSpec};
use crate::losses::soft_distance;
use crate::model::is_local_branch;

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        input_size: 16,
        in_channels: 1,
        shallow_channels: 4,
        deep_channels: 4,
        blocks_shallow: 2,
        blocks_deep: 2,
        downsample_factor_shallow: 4,
        num_classes: 3,
    }
}

fn tiny_set(n: usize, seed: u64) -> LoadedSet {
    let spec = SyntheticSpec {
        num_classes: 3,
        image_size: 16,
        motif_min: 6,
        motif_max: 9,
        ..SyntheticSpec::default()
    };
    let mut entries = Vec::new();
    let mut pixels = Vec::new();
    for id in 0..n as u64 {
        let label = id as usize % 3;
        let (px, b) = render(&spec, label, &mut image_rng(seed, id));
        entries.push(ManifestEntry {
            id,
            path: String::new(),
            label,
            r#box: Some(b),
        });
        pixels.push(px);
    }
    LoadedSet::from_parts(entries, 16, pixels).unwrap()
}

fn tiny_train(bits: usize) -> TrainConfig {
    TrainConfig {
        bits,
        epochs_per_stage: 1,
        batch_size: 16,
        lr: 1e-2,
        lr_stage2: 1e-2,
        seed: 5,
        skip_validation: true,
        ..TrainConfig::default()
    }
}

fn tiny_model(bits: usize) -> Model {
    Model::new(ModelConfig::new(tiny_backbone(), bits), 9).unwrap()
}

fn snapshot(store: &ParamStore, keep: impl Fn(&str) -> bool) -> Vec<(String, Vec<u64>)> {
    store
        .iter()
        .filter(|(n, _)| keep(n))
        .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(1e-3, 0, 10), 1e-3);
    assert!(cosine_lr(1e-3, 9, 10) <= 0.01 * 1e-3 + 1e-18);
    let mid = cosine_lr(1.0, 5, 11);
    assert!((mid - 0.505).abs() < 1e-12);
    let lrs: Vec<f64> = (0..10).map(|e| cosine_lr(1.0, e, 10)).collect();
    assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    assert_eq!(cosine_lr(0.5, 0, 1), 0.5);
}

#[test]
fn adamw_hand_step() {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::from_vec(vec![1.0, -2.0]));
    let mut g = Gradients::new();
    g.insert("w".into(), Tensor::from_vec(vec![1.0, 0.5]));
    let mut opt = AdamW::new(0.5);
    opt.step(&mut p, &g, 0.1).unwrap();
    // first step: bias-corrected m/√v = sign(g) up to eps
    let unit = 1.0 / (1.0 + 1e-8);
    let want0 = 1.0 - 0.1 * (unit + 0.5 * 1.0);
    let want1 = -2.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.5 * -2.0);
    let got = p.get("w").unwrap().data();
    assert!((got[0] - want0).abs() < 1e-15 && (got[1] - want1).abs() < 1e-15, "{got:?}");
    assert_eq!(opt.steps(), 1);

    let before: Vec<u64> = got.iter().map(|v| v.to_bits()).collect();
    opt.step(&mut p, &g, 0.0).unwrap();
    let after: Vec<u64> = p.get("w").unwrap().data().iter().map(|v| v.to_bits()).collect();
    assert_eq!(before, after);
}

fn marked(h: usize, w: usize) -> Tensor {
    Tensor::new(vec![1, h, w], (0..h * w).map(|v| v as f64 + 1.0).collect()).unwrap()
}

#[test]
fn augment_permutations() {
    let img = marked(2, 2);
    // [[1,2],[3,4]] turned a quarter clockwise is [[3,1],[4,2]]
    assert_eq!(apply_augment(&img, AugmentOp::Rot90).unwrap().data(), &[3.0, 1.0, 4.0, 2.0]);
    assert_eq!(apply_augment(&img, AugmentOp::Rot270).unwrap().data(), &[2.0, 4.0, 1.0, 3.0]);
    assert_eq!(apply_augment(&img, AugmentOp::FlipH).unwrap().data(), &[2.0, 1.0, 4.0, 3.0]);
    assert_eq!(apply_augment(&img, AugmentOp::FlipV).unwrap().data(), &[3.0, 4.0, 1.0, 2.0]);

    let img = marked(3, 5);
    let hh = apply_augment(&apply_augment(&img, AugmentOp::FlipH).unwrap(), AugmentOp::FlipH).unwrap();
    assert_eq!(hh, img);
    let hv = apply_augment(&apply_augment(&img, AugmentOp::FlipV).unwrap(), AugmentOp::FlipH).unwrap();
    assert_eq!(apply_augment(&img, AugmentOp::Rot180).unwrap(), hv);
    let r = apply_augment(&img, AugmentOp::Rot90).unwrap();
    assert_eq!(r.shape(), &[1, 5, 3]);
    assert_eq!(apply_augment(&r, AugmentOp::Rot270).unwrap(), img);
    let mut sorted = r.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    assert_eq!(sorted, img.data());
    assert!(apply_augment(&Tensor::zeros(&[4, 4]), AugmentOp::FlipH).is_err());
}

#[test]
fn augment_sampling_covers_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for _ in 0..3000 {
        *counts.entry(format!("{:?}", AugmentOp::sample(&mut rng))).or_default() += 1;
    }
    assert_eq!(counts.len(), 5);
    for flip in ["FlipH", "FlipV"] {
        assert!((counts[flip] as f64 - 1000.0).abs() < 120.0, "{counts:?}");
    }
    for rot in ["Rot90", "Rot180", "Rot270"] {
        assert!((counts[rot] as f64 - 333.0).abs() < 80.0, "{counts:?}");
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { batch_size: 1, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { lr: -1.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { lr_stage2: f64::NAN, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { alpha: 1.5, ..TrainConfig::default() }.validate().is_err());
    let mut model = tiny_model(4);
    let set = tiny_set(8, 1);
    let err = stage1_train(&mut model, &tiny_train(8), &set, None, |_| {}).unwrap_err();
    assert!(err.to_string().contains("bits"));
}

#[test]
fn stage1_one_epoch_lowers_loss() {
    let set = tiny_set(64, 2);
    let mut model = tiny_model(4);
    let before = stage1_loss(&model, &set, 16).unwrap().total();
    let mut seen = Vec::new();
    let cfg = TrainConfig {
        batch_size: 8,
        ..tiny_train(4)
    };
    let log = stage1_train(&mut model, &cfg, &set, None, |m| seen.push(m.clone())).unwrap();
    let after = stage1_loss(&model, &set, 16).unwrap().total();
    assert!(after < before, "{after} !< {before}");
    assert_eq!(log, seen);
    assert_eq!(log.len(), 1);
    assert_eq!(log[0].stage, 1);
    assert!(log[0].consist.is_none() && log[0].contrast.is_some());
}

#[test]
fn zero_lr_leaves_parameters_bitwise() {
    let set = tiny_set(32, 3);
    let mut model = tiny_model(4);
    let before = snapshot(&model.params, |_| true);
    let cfg = TrainConfig {
        lr: 0.0,
        lr_stage2: 0.0,
        ..tiny_train(4)
    };
    stage1_train(&mut model, &cfg, &set, None, |_| {}).unwrap();
    stage2_train(&mut model, &cfg, &set, None, |_| {}).unwrap();
    assert_eq!(snapshot(&model.params, |_| true), before);
}

#[test]
fn training_is_deterministic() {
    let set = tiny_set(32, 4);
    let val = tiny_set(12, 40);
    let cfg = TrainConfig {
        skip_validation: false,
        ..tiny_train(4)
    };
    let run = || train_both_stages(&tiny_backbone(), &cfg, &set, Some(&val), |_| {}).unwrap();
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(crate::model::checkpoint_bytes(&a).unwrap(), crate::model::checkpoint_bytes(&b).unwrap());
    assert_eq!(la, lb);
    assert_eq!(la.len(), 2);
    assert!(la.iter().all(|m| m.val_map.is_some()));
}

#[test]
fn stage2_touches_only_the_local_branch() {
    let set = tiny_set(32, 6);
    let mut model = tiny_model(4);
    stage1_train(&mut model, &tiny_train(4), &set, None, |_| {}).unwrap();
    let copied = clone_expert0_to_expert1(&mut model, 1).unwrap();
    assert!(copied.is_empty());
    let frozen = snapshot(&model.params, |n| !is_local_branch(n));
    let local = snapshot(&model.params, is_local_branch);
    let cfg = TrainConfig {
        epochs_per_stage: 3,
        ..tiny_train(4)
    };
    let log = stage2_train(&mut model, &cfg, &set, None, |_| {}).unwrap();
    assert_eq!(snapshot(&model.params, |n| !is_local_branch(n)), frozen);
    let after = snapshot(&model.params, is_local_branch);
    assert_eq!(after.len(), local.len());
    let moved: Vec<&String> = after.iter().zip(&local).filter(|(a, b)| a.1 != b.1).map(|(a, _)| &a.0).collect();
    assert!(moved.iter().any(|n| n.starts_with("kan_local.")), "{moved:?}");
    assert!(moved.iter().any(|n| n.contains(".ca.")), "{moved:?}");
    assert_eq!(log.len(), 3);
    assert!(log.iter().all(|m| m.stage == 2 && m.contrast.is_none() && m.consist.is_some()));
    let line = log[0].tsv_line();
    let fields: Vec<&str> = line.split('\t').collect();
    assert_eq!(fields.len(), 8);
    assert_eq!(&fields[..5], &["1", "2", "-", "-", "-"]);
}

fn mean_pair_distance(model: &Model, set: &LoadedSet, op: AugmentOp) -> f64 {
    let a = continuous_local_codes(model, set, 0.0).unwrap();
    let flipped: Vec<Vec<f64>> = (0..set.len())
        .map(|i| {
            let t = Tensor::new(vec![1, 16, 16], set.pixels(i).to_vec()).unwrap();
            apply_augment(&t, op).unwrap().into_data()
        })
        .collect();
    let fset = LoadedSet::from_parts(set.entries.clone(), 16, flipped).unwrap();
    let b = continuous_local_codes(model, &fset, 0.0).unwrap();
    a.iter().zip(&b).map(|(x, y)| soft_distance(x, y).unwrap()).sum::<f64>() / a.len() as f64
}

#[test]
fn stage2_improves_consistency() {
    let set = tiny_set(48, 7);
    let mut model = tiny_model(8);
    stage1_train(&mut model, &tiny_train(8), &set, None, |_| {}).unwrap();
    clone_expert0_to_expert1(&mut model, 2).unwrap();
    // running statistics of the local norm are only meaningful after a stage-2 pass
    let warm = TrainConfig {
        lr_stage2: 0.0,
        ..tiny_train(8)
    };
    stage2_train(&mut model, &warm, &set, None, |_| {}).unwrap();
    let before = mean_pair_distance(&model, &set, AugmentOp::Rot90);
    let cfg = TrainConfig {
        epochs_per_stage: 4,
        ..tiny_train(8)
    };
    stage2_train(&mut model, &cfg, &set, None, |_| {}).unwrap();
    let after = mean_pair_distance(&model, &set, AugmentOp::Rot90);
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn non_finite_loss_reports_coordinates() {
    let mut set = tiny_set(32, 8);
    let mut px: Vec<Vec<f64>> = (0..set.len()).map(|i| set.pixels(i).to_vec()).collect();
    px.iter_mut().for_each(|p| p[5] = f64::INFINITY);
    set = LoadedSet::from_parts(set.entries.clone(), 16, px).unwrap();
    let mut model = tiny_model(4);
    let err = stage1_train(&mut model, &tiny_train(4), &set, None, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
    assert!(err.to_string().contains("stage 1 epoch 1 batch 1"), "{err}");
    let err = stage2_train(&mut model, &tiny_train(4), &set, None, |_| {}).unwrap_err();
    assert!(err.to_string().contains("stage 2 epoch 1 batch 1"), "{err}");
}

#[test]
fn clone_redraws_attention_from_seed() {
    let mut a = tiny_model(4);
    let expert0 = snapshot(&a.params, |n| n.contains("expert0."));
    let others = snapshot(&a.params, |n| !n.contains("expert1."));
    clone_expert0_to_expert1(&mut a, 77).unwrap();
    assert_eq!(snapshot(&a.params, |n| n.contains("expert0.")), expert0);
    assert_eq!(snapshot(&a.params, |n| !n.contains("expert1.")), others);
    let mut b = tiny_model(4);
    clone_expert0_to_expert1(&mut b, 77).unwrap();
    let ca = |m: &Model| snapshot(&m.params, |n| n.contains("expert1."));
    assert_eq!(ca(&a), ca(&b));
    let mut c = tiny_model(4);
    clone_expert0_to_expert1(&mut c, 78).unwrap();
    assert_ne!(ca(&a), ca(&c));

    let mut only_ca = ParamStore::new();
    for (n, t) in a.params.iter().filter(|(n, _)| n.contains("expert1.")) {
        only_ca.insert(n.clone(), t.clone());
    }
    assert_eq!(only_ca.checksum(), GOLDEN_CLONE_CA);
}

const GOLDEN_CLONE_CA: f64 = -9.115625122722864;

#[test]
fn progressive_run_warm_starts_backbones() {
    let set = tiny_set(16, 9);
    assert!(progressive_bit_run(&[], &tiny_backbone(), &tiny_train(4), &set, None, |_, _| {}).is_err());
    let single = progressive_bit_run(&[4], &tiny_backbone(), &tiny_train(4), &set, None, |_, _| {}).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single[0].0, 4);

    let mut epochs = Vec::new();
    let runs = progressive_bit_run(&[8, 4], &tiny_backbone(), &tiny_train(4), &set, None, |q, m| {
        epochs.push((q, m.stage))
    })
    .unwrap();
    assert_eq!(runs.iter().map(|r| r.0).collect::<Vec<_>>(), vec![4, 8]);
    assert_eq!(epochs, vec![(4, 1), (4, 2), (8, 1), (8, 2)]);
    // the first bit length is reproduced exactly by the single run
    assert_eq!(snapshot(&runs[0].1.params, |_| true), snapshot(&single[0].1.params, |_| true));

    let mut fresh = Model::new(ModelConfig::new(tiny_backbone(), 8), 5).unwrap();
    warm_start(&mut fresh, &runs[0].1).unwrap();
    assert_eq!(snapshot(&fresh.params, |n| !is_head(n)), snapshot(&runs[0].1.params, |n| !is_head(n)));
    assert_eq!(fresh.params.get("kan_global.coeffs").unwrap().shape()[0], 8);
}
