//! Two-stage training: global contrastive hashing, then Expert₁ specialization
//! for transform-invariant local codes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LoadedSet;
use crate::error::{domain_err, Error, Result};
use crate::losses::{
    downsample_for_similarity, similarity_matrix, stage1_objective, stage2_objective, Stage1Terms, Stage2Terms,
    LAMBDA_REG,
};
use crate::model::{init_channel_attention, BackboneConfig, Model, ModelConfig, Phase};
use crate::numerics::{Gradients, ParamStore, Tensor};
use crate::retrieval::{compute_map, one_hot, MapOptions, PackedCodeSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub bits: usize,
    pub epochs_per_stage: usize,
    pub batch_size: usize,
    /// Initial Stage-1 learning rate.
    pub lr: f64,
    /// Initial Stage-2 learning rate.
    pub lr_stage2: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub lambda_reg: f64,
    /// Expert₀ weight on the local path during Stage 2 (0 = pure Expert₁).
    pub alpha: f64,
    /// Skip the per-epoch validation mAP even when a validation set is given.
    pub skip_validation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            bits: 16,
            epochs_per_stage: 10,
            batch_size: 32,
            lr: 5e-3,
            lr_stage2: 3e-3,
            weight_decay: 1e-4,
            seed: 0,
            lambda_reg: LAMBDA_REG,
            alpha: 0.0,
            skip_validation: false,
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is accepted so a run can be checked for bitwise no-ops.
    pub fn validate(&self) -> Result<()> {
        for lr in [self.lr, self.lr_stage2] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return domain_err(format!("learning rates must be finite and non-negative, got {lr}"));
            }
        }
        if self.batch_size < 2 {
            return domain_err(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.bits == 0 || self.epochs_per_stage == 0 {
            return domain_err("bits and epochs_per_stage must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(self.lambda_reg >= 0.0) || !(0.0..=1.0).contains(&self.alpha) {
            return domain_err("weight_decay, lambda_reg must be ≥ 0 and alpha in [0, 1]");
        }
        Ok(())
    }
}

/// Cosine annealing from `lr0` at epoch 0 to `0.01·lr0` at the final epoch.
pub fn cosine_lr(lr0: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return lr0;
    }
    let floor = 0.01 * lr0;
    let t = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    floor + (lr0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.numel() != g.numel() {
                return Err(Error::Shape(format!("gradient for `{name}` has wrong size")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            if lr == 0.0 {
                continue;
            }
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *w -= lr * (update + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AugmentOp {
    /// Clockwise quarter turn.
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
}

impl AugmentOp {
    /// Rotation, horizontal flip or vertical flip with equal probability; the
    /// rotation angle is then uniform over the three right angles.
    pub fn sample(rng: &mut impl Rng) -> Self {
        match rng.random_range(0..3) {
            0 => [AugmentOp::Rot90, AugmentOp::Rot180, AugmentOp::Rot270][rng.random_range(0..3)],
            1 => AugmentOp::FlipH,
            _ => AugmentOp::FlipV,
        }
    }
}

/// Lossless right-angle transform of a `[C, H, W]` image.
pub fn apply_augment(image: &Tensor, op: AugmentOp) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("augment expects [C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = image.data();
    let (oh, ow) = match op {
        AugmentOp::Rot90 | AugmentOp::Rot270 => (w, h),
        _ => (h, w),
    };
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = match op {
                    AugmentOp::Rot90 => (h - 1 - x, y),
                    AugmentOp::Rot180 => (h - 1 - y, w - 1 - x),
                    AugmentOp::Rot270 => (x, w - 1 - y),
                    AugmentOp::FlipH => (y, w - 1 - x),
                    AugmentOp::FlipV => (h - 1 - y, x),
                };
                out.push(plane[sy * w + sx]);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Per-epoch averages; components a stage does not optimize are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: u8,
    pub contrast: Option<f64>,
    pub quant: Option<f64>,
    pub ce: Option<f64>,
    pub consist: Option<f64>,
    pub reg: Option<f64>,
    pub val_map: Option<f64>,
}

impl EpochMetrics {
    /// Tab-separated: epoch, stage, L_contrast, L_quant, L_CE, L_consist, L_reg, val_mAP.
    pub fn tsv_line(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch,
            self.stage,
            f(self.contrast),
            f(self.quant),
            f(self.ce),
            f(self.consist),
            f(self.reg),
            f(self.val_map)
        )
    }
}

pub fn metrics_tsv(log: &[EpochMetrics]) -> String {
    let mut out = String::new();
    for m in log {
        let _ = writeln!(out, "{}", m.tsv_line());
    }
    out
}

fn numeric_at(stage: u8, epoch: usize, batch: usize, e: Error) -> Error {
    Error::Numeric(format!("stage {stage} epoch {epoch} batch {batch}: {e}"))
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    // a trailing singleton batch has no pairs and degenerate batch statistics
    order.chunks(size).filter(|b| b.len() >= 2)
}

fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

const ENCODE_CHUNK: usize = 64;

fn encode_chunks(set: &LoadedSet, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(set.len());
    let rows: Vec<usize> = (0..set.len()).collect();
    for chunk in rows.chunks(ENCODE_CHUNK) {
        let codes = f(&set.batch(chunk)?)?;
        let q = codes.shape()[1];
        out.extend(codes.data().chunks(q).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Continuous global codes, one row per image.
pub fn continuous_global_codes(model: &Model, set: &LoadedSet) -> Result<Vec<Vec<f64>>> {
    encode_chunks(set, |b| model.global_codes(b))
}

/// Continuous full-map local codes, one row per image.
pub fn continuous_local_codes(model: &Model, set: &LoadedSet, alpha: f64) -> Result<Vec<Vec<f64>>> {
    encode_chunks(set, |b| model.local_codes(b, alpha))
}

pub fn pack_rows(bits: usize, set: &LoadedSet, codes: &[Vec<f64>]) -> Result<PackedCodeSet> {
    PackedCodeSet::from_rows(bits, set.entries.iter().map(|e| e.id).zip(codes.iter().map(Vec::as_slice)))
}

/// Leave-one-out mAP of `codes` within `set`.
pub fn self_map(set: &LoadedSet, codes: &[Vec<f64>], bits: usize) -> Result<f64> {
    let packed = pack_rows(bits, set, codes)?;
    let classes = set.entries.iter().map(|e| e.label + 1).max().unwrap_or(1);
    let labels: Vec<Vec<f64>> = set.entries.iter().map(|e| one_hot(e.label, classes)).collect();
    compute_map(
        &packed,
        &labels,
        &packed,
        &labels,
        MapOptions {
            top_k: None,
            exclude_self: true,
        },
    )
}

/// Sets the local-head norm statistics to the exact mean and unbiased variance
/// of the pooled local descriptors over `set`. The local path is never run in
/// Stage 1, so without this its running statistics would still be the defaults.
pub fn calibrate_local_norm(model: &mut Model, set: &LoadedSet, alpha: f64) -> Result<()> {
    if set.len() < 2 {
        return domain_err("need at least two images to calibrate");
    }
    let mut pooled: Vec<Vec<f64>> = Vec::with_capacity(set.len());
    let rows: Vec<usize> = (0..set.len()).collect();
    for chunk in rows.chunks(ENCODE_CHUNK) {
        let fmaps = model.extract_local_feature_map(&set.batch(chunk)?, alpha)?;
        let s = fmaps.shape().to_vec();
        let mut g = model.graph(Phase::Inference);
        let f = g.tape.constant(fmaps);
        let full = crate::retrieval::FeatureBox {
            row: 0,
            col: 0,
            height: s[2],
            width: s[3],
        };
        let p = g.pool_window(f, full)?;
        pooled.extend(g.tape.value(p).data().chunks(s[1]).map(<[f64]>::to_vec));
    }
    let c = pooled[0].len();
    let n = pooled.len() as f64;
    let mut mean = vec![0.0; c];
    for row in &pooled {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; c];
    for row in &pooled {
        var.iter_mut().zip(row).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / (n - 1.0));
    }
    *model.buffers.get_mut("embed_local.bn.running_mean")? = Tensor::from_vec(mean);
    *model.buffers.get_mut("embed_local.bn.running_var")? = Tensor::from_vec(var);
    Ok(())
}

/// Block-averaged rasters feeding the visual-similarity weights.
pub fn similarity_cache(set: &LoadedSet) -> Result<Vec<Vec<f64>>> {
    (0..set.len())
        .map(|i| downsample_for_similarity(set.pixels(i), set.side))
        .collect()
}

fn stage1_batch(model: &Model, set: &LoadedSet, small: &[Vec<f64>], rows: &[usize]) -> Result<(Gradients, Stage1Terms, Vec<(String, Vec<f64>, Vec<f64>)>)> {
    let images = set.batch(rows)?;
    let labels: Vec<usize> = rows.iter().map(|&r| set.entries[r].label).collect();
    let refs: Vec<&[f64]> = rows.iter().map(|&r| small[r].as_slice()).collect();
    let sim = similarity_matrix(&refs)?;
    let mut g = model.graph(Phase::Stage1);
    let x = g.tape.constant(images);
    let (h, logits) = g.global_head(x)?;
    let (loss, terms) = stage1_objective(&mut g.tape, h, logits, &labels, &sim)?;
    let grads = g.tape.backward(loss)?;
    Ok((grads, terms, g.norm_updates()))
}

/// Mean Stage-1 terms over fixed consecutive batches, without updating anything.
pub fn stage1_loss(model: &Model, set: &LoadedSet, batch_size: usize) -> Result<Stage1Terms> {
    let small = similarity_cache(set)?;
    let order: Vec<usize> = (0..set.len()).collect();
    let mut acc = Stage1Terms::default();
    let mut n = 0;
    for rows in batches(&order, batch_size) {
        let (_, t, _) = stage1_batch(model, set, &small, rows)?;
        acc.contrast += t.contrast;
        acc.quant += t.quant;
        acc.ce += t.ce;
        n += 1;
    }
    if n == 0 {
        return domain_err("need at least two images to evaluate the loss");
    }
    let k = n as f64;
    Ok(Stage1Terms {
        contrast: acc.contrast / k,
        quant: acc.quant / k,
        ce: acc.ce / k,
    })
}

/// Stage 1: gate pinned to Expert₀, global head and classifier optimized.
pub fn stage1_train(
    model: &mut Model,
    config: &TrainConfig,
    train: &LoadedSet,
    val: Option<&LoadedSet>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    check_bits(model, config)?;
    let small = similarity_cache(train)?;
    let mut rng = stage_rng(config.seed, 1);
    let mut opt = AdamW::new(config.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    for epoch in 0..config.epochs_per_stage {
        let lr = cosine_lr(config.lr, epoch, config.epochs_per_stage);
        order.shuffle(&mut rng);
        let (mut acc, mut n) = (Stage1Terms::default(), 0usize);
        for (b, rows) in batches(&order, config.batch_size).enumerate() {
            let (grads, terms, norms) =
                stage1_batch(model, train, &small, rows).map_err(|e| numeric_at(1, epoch + 1, b + 1, e))?;
            opt.step(&mut model.params, &grads, lr)?;
            model.apply_norm_updates(&norms)?;
            acc.contrast += terms.contrast;
            acc.quant += terms.quant;
            acc.ce += terms.ce;
            n += 1;
        }
        let k = n.max(1) as f64;
        let val_map = match val {
            Some(v) if !config.skip_validation && v.len() >= 2 => {
                Some(self_map(v, &continuous_global_codes(model, v)?, model.bits())?)
            }
            _ => None,
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            stage: 1,
            contrast: Some(acc.contrast / k),
            quant: Some(acc.quant / k),
            ce: Some(acc.ce / k),
            val_map,
            ..EpochMetrics::default()
        };
        on_epoch(&m);
        log.push(m);
    }
    calibrate_local_norm(model, train, config.alpha)?;
    Ok(log)
}

fn check_bits(model: &Model, config: &TrainConfig) -> Result<()> {
    if model.bits() != config.bits {
        return domain_err(format!(
            "model has {} bits but the training config asks for {}",
            model.bits(),
            config.bits
        ));
    }
    Ok(())
}

/// Copies every Expert₁ tensor that has a same-shaped Expert₀ counterpart and
/// re-draws the channel-attention weights from `seed`. Returns the names copied.
pub fn clone_expert0_to_expert1(model: &mut Model, seed: u64) -> Result<Vec<String>> {
    let mut copied = Vec::new();
    let targets: Vec<String> = model.params.names().filter(|n| n.contains("expert1.")).cloned().collect();
    for name in targets {
        let source = name.replace("expert1.", "expert0.");
        let src = match model.params.get(&source) {
            Ok(t) if t.shape() == model.params.get(&name)?.shape() => t.clone(),
            _ => continue,
        };
        *model.params.get_mut(&name)? = src;
        copied.push(name);
    }
    let mut fresh = ParamStore::new();
    let backbone = model.config().backbone.clone();
    init_channel_attention(&mut fresh, &backbone, &mut ChaCha8Rng::seed_from_u64(seed));
    for (name, t) in fresh.iter() {
        *model.params.get_mut(name)? = t.clone();
    }
    Ok(copied)
}

/// Stage 2: consistency between each image and one random transform of it,
/// through the local path, with every non-local parameter frozen.
pub fn stage2_train(
    model: &mut Model,
    config: &TrainConfig,
    train: &LoadedSet,
    val: Option<&LoadedSet>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    check_bits(model, config)?;
    calibrate_local_norm(model, train, config.alpha)?;
    let mut rng = stage_rng(config.seed, 2);
    let mut opt = AdamW::new(config.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let side = train.side;
    let mut log = Vec::new();
    for epoch in 0..config.epochs_per_stage {
        let lr = cosine_lr(config.lr_stage2, epoch, config.epochs_per_stage);
        order.shuffle(&mut rng);
        let (mut acc, mut n) = (Stage2Terms::default(), 0usize);
        for (b, rows) in batches(&order, config.batch_size).enumerate() {
            let mut data = Vec::with_capacity(2 * rows.len() * side * side);
            for &r in rows {
                data.extend_from_slice(train.pixels(r));
            }
            for &r in rows {
                let img = Tensor::new(vec![1, side, side], train.pixels(r).to_vec())?;
                data.extend_from_slice(apply_augment(&img, AugmentOp::sample(&mut rng))?.data());
            }
            let images = Tensor::new(vec![2 * rows.len(), 1, side, side], data)?;
            let step = || -> Result<_> {
                let mut g = model.graph(Phase::Stage2);
                let x = g.tape.constant(images);
                let codes = g.local_code(x, config.alpha)?;
                let orig = g.tape.rows(codes, 0, rows.len())?;
                let trans = g.tape.rows(codes, rows.len(), 2 * rows.len())?;
                let (loss, terms) = stage2_objective(&mut g.tape, orig, trans, config.lambda_reg)?;
                let grads = g.tape.backward(loss)?;
                Ok((grads, terms, g.norm_updates()))
            };
            let (grads, terms, norms) = step().map_err(|e| numeric_at(2, epoch + 1, b + 1, e))?;
            opt.step(&mut model.params, &grads, lr)?;
            model.apply_norm_updates(&norms)?;
            acc.consist += terms.consist;
            acc.reg += terms.reg;
            n += 1;
        }
        let k = n.max(1) as f64;
        let val_map = match val {
            Some(v) if !config.skip_validation && v.len() >= 2 => {
                Some(self_map(v, &continuous_local_codes(model, v, config.alpha)?, model.bits())?)
            }
            _ => None,
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            stage: 2,
            consist: Some(acc.consist / k),
            reg: Some(acc.reg / k),
            val_map,
            ..EpochMetrics::default()
        };
        on_epoch(&m);
        log.push(m);
    }
    Ok(log)
}

/// Seed offset for the Expert₁ re-initialization between the stages.
const CLONE_SEED_OFFSET: u64 = 0x5eed;

/// Fresh model, Stage 1, expert cloning, Stage 2.
pub fn train_both_stages(
    backbone: &BackboneConfig,
    config: &TrainConfig,
    train: &LoadedSet,
    val: Option<&LoadedSet>,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Model, Vec<EpochMetrics>)> {
    let model = Model::new(ModelConfig::new(backbone.clone(), config.bits), config.seed)?;
    continue_both_stages(model, config, train, val, on_epoch)
}

fn continue_both_stages(
    mut model: Model,
    config: &TrainConfig,
    train: &LoadedSet,
    val: Option<&LoadedSet>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Model, Vec<EpochMetrics>)> {
    let mut log = stage1_train(&mut model, config, train, val, &mut on_epoch)?;
    log.extend(stage2_after_stage1(&mut model, config, train, val, &mut on_epoch)?);
    Ok((model, log))
}

/// Expert cloning followed by Stage 2, for a model that has finished Stage 1.
pub fn stage2_after_stage1(
    model: &mut Model,
    config: &TrainConfig,
    train: &LoadedSet,
    val: Option<&LoadedSet>,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    clone_expert0_to_expert1(model, config.seed.wrapping_add(CLONE_SEED_OFFSET))?;
    stage2_train(model, config, train, val, on_epoch)
}

/// Hash heads and the classifier; everything else counts as backbone.
pub fn is_head(name: &str) -> bool {
    name.starts_with("kan_global.") || name.starts_with("kan_local.") || name.starts_with("classifier.")
}

/// One model per bit length in ascending order; each backbone starts from the
/// previous bit length's final backbone, hash heads start fresh.
pub fn progressive_bit_run(
    bit_list: &[usize],
    backbone: &BackboneConfig,
    base: &TrainConfig,
    train: &LoadedSet,
    val: Option<&LoadedSet>,
    mut on_epoch: impl FnMut(usize, &EpochMetrics),
) -> Result<Vec<(usize, Model)>> {
    if bit_list.is_empty() {
        return domain_err("bit list is empty");
    }
    let mut bits = bit_list.to_vec();
    bits.sort_unstable();
    bits.dedup();
    let mut out: Vec<(usize, Model)> = Vec::new();
    for &q in &bits {
        let config = TrainConfig { bits: q, ..base.clone() };
        let mut model = Model::new(ModelConfig::new(backbone.clone(), q), config.seed)?;
        if let Some((_, prev)) = out.last() {
            warm_start(&mut model, prev)?;
        }
        let (model, _) = continue_both_stages(model, &config, train, val, |m| on_epoch(q, m))?;
        out.push((q, model));
    }
    Ok(out)
}

/// Copies all backbone parameters and running statistics from `prev`.
pub fn warm_start(model: &mut Model, prev: &Model) -> Result<()> {
    for (name, t) in prev.params.iter().filter(|(n, _)| !is_head(n)) {
        *model.params.get_mut(name)? = t.clone();
    }
    for (name, t) in prev.buffers.iter() {
        *model.buffers.get_mut(name)? = t.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests;
