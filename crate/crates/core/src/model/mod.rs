//! Toy-scale backbone with a shallow/deep split, gated residual blocks hosting
//! a position-aware expert (convolution) and a position-invariant expert
//! (spatial pooling plus channel attention), and two spline hash heads.
//!
//! Resolution contract: the stem (stride-2 conv, stride-2 max-pool) brings the
//! input to 1/4, where the gated blocks and every local window live; the deep
//! stage adds two stride-2 stages for 1/16.

mod checkpoint;

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint_bytes, load_checkpoint, model_from_bytes, save_checkpoint, CHECKPOINT_MAGIC};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::kanhash::{kan_forward, KanConfig, KanLayer, SplineGrid};
use crate::numerics::{NormMode, ParamStore, Tape, Tensor, Var};
use crate::retrieval::{BoundingBox, FeatureBox};

/// Running-statistic momentum: `running = m·running + (1 − m)·batch`.
pub const NORM_MOMENTUM: f64 = 0.9;

const CA_REDUCTION: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    pub in_channels: usize,
    pub shallow_channels: usize,
    pub deep_channels: usize,
    pub blocks_shallow: usize,
    pub blocks_deep: usize,
    pub downsample_factor_shallow: usize,
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_size: 64,
            in_channels: 1,
            shallow_channels: 32,
            deep_channels: 64,
            blocks_shallow: 2,
            blocks_deep: 2,
            downsample_factor_shallow: 4,
            num_classes: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample_factor_shallow != 4 {
            return domain_err(format!(
                "shallow downsample factor is fixed at 4 by the stem strides, got {}",
                self.downsample_factor_shallow
            ));
        }
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return domain_err(format!(
                "input size {} must be a positive multiple of 16",
                self.input_size
            ));
        }
        if self.shallow_channels < CA_REDUCTION || self.shallow_channels % CA_REDUCTION != 0 {
            return domain_err(format!(
                "shallow channels {} must be a multiple of {CA_REDUCTION}",
                self.shallow_channels
            ));
        }
        if self.blocks_deep < 2 {
            return domain_err("the deep stage needs at least two blocks for its two stride-2 stages");
        }
        if self.num_classes < 2 || self.in_channels == 0 || self.deep_channels == 0 {
            return domain_err("need ≥2 classes and non-empty channel counts");
        }
        Ok(())
    }

    pub fn shallow_size(&self) -> usize {
        self.input_size / self.downsample_factor_shallow
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub bits: usize,
    pub kan: KanConfig,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, bits: usize) -> Self {
        ModelConfig {
            backbone,
            bits,
            kan: KanConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.bits == 0 || self.bits > u16::MAX as usize {
            return domain_err(format!("invalid code length {}", self.bits));
        }
        SplineGrid::new(self.kan).map(|_| ())
    }
}

/// Which retrieval pathway a request takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeKind {
    Global,
    Local,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalMode {
    pub kind: ModeKind,
    pub alpha: f64,
    pub bbox: Option<BoundingBox>,
}

impl RetrievalMode {
    pub fn global() -> Self {
        RetrievalMode {
            kind: ModeKind::Global,
            alpha: 0.0,
            bbox: None,
        }
    }

    pub fn local(alpha: f64, bbox: BoundingBox) -> Self {
        RetrievalMode {
            kind: ModeKind::Local,
            alpha,
            bbox: Some(bbox),
        }
    }
}

/// Weight on the position-aware expert. Global mode runs it exclusively; local
/// mode passes `alpha` through (0 = position-invariant expert only).
pub fn mode_gate(mode: &RetrievalMode) -> Result<f64> {
    match mode.kind {
        ModeKind::Global => Ok(1.0),
        ModeKind::Local => {
            if mode.bbox.is_none() {
                return domain_err("contract violation: local mode requires a bounding box");
            }
            if !(0.0..=1.0).contains(&mode.alpha) {
                return domain_err(format!("alpha {} outside [0, 1]", mode.alpha));
            }
            Ok(mode.alpha)
        }
    }
}

/// Parameter subsets owned by the position-invariant expert and the local head.
pub fn is_local_branch(name: &str) -> bool {
    name.contains("expert1.") || name.starts_with("kan_local.")
}

/// Which parameters a graph differentiates and which norms use batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Nothing trainable, running statistics everywhere.
    Inference,
    /// Global pathway trainable; the local branch is frozen.
    Stage1,
    /// Only the position-invariant expert and the local head are trainable.
    Stage2,
    /// Every parameter trainable with running statistics; for gradient checks.
    Probe,
}

impl Phase {
    fn trains(self, name: &str) -> bool {
        match self {
            Phase::Inference => false,
            Phase::Stage1 => !is_local_branch(name),
            Phase::Stage2 => is_local_branch(name),
            Phase::Probe => true,
        }
    }

    fn batch_stats(self, norm: &str) -> bool {
        match self {
            Phase::Stage1 => norm != "embed_local.bn",
            Phase::Stage2 => norm == "embed_local.bn",
            Phase::Inference | Phase::Probe => false,
        }
    }
}

/// Learnable tensors of one channel-attention bottleneck.
#[derive(Clone, Copy, Debug)]
pub struct CaVars {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

/// `CA(p) = sigmoid(W2·relu(W1·p + b1) + b2) ⊙ p` on `[N, C, 1, 1]`.
pub fn channel_attention(tape: &mut Tape, pooled: Var, ca: &CaVars) -> Result<Var> {
    let s = tape.shape(pooled).to_vec();
    if s.len() != 4 || s[2] != 1 || s[3] != 1 {
        return shape_err(format!("channel attention expects [N,C,1,1], got {s:?}"));
    }
    let flat = tape.reshape(pooled, &[s[0], s[1]])?;
    let hidden = tape.dense(flat, ca.fc1_w, ca.fc1_b)?;
    let hidden = tape.relu(hidden);
    let logits = tape.dense(hidden, ca.fc2_w, ca.fc2_b)?;
    let gate = tape.sigmoid(logits);
    let weighted = tape.mul(gate, flat)?;
    tape.reshape(weighted, &s)
}

/// Position-invariant expert: `CA(AvgPool(F) + MaxPool(F))`, `[N,C,H,W] -> [N,C,1,1]`.
pub fn expert1_forward(tape: &mut Tape, f: Var, ca: &CaVars) -> Result<Var> {
    let avg = tape.global_avg_pool(f)?;
    let max = tape.global_max_pool(f)?;
    let pooled = tape.add(avg, max)?;
    channel_attention(tape, pooled, ca)
}

/// Conv 3×3 → norm → ReLU.
pub fn conv_norm_relu(
    tape: &mut Tape,
    x: Var,
    w: Var,
    gamma: Var,
    beta: Var,
    stride: usize,
    mode: NormMode,
) -> Result<Var> {
    let c = tape.conv2d(x, w, None, stride, 1)?;
    let n = tape.batch_norm(c, Some(gamma), Some(beta), mode)?;
    Ok(tape.relu(n))
}

/// `F + w0·Expert₀(F) + (1 − w0)·Expert₁(F)`, with the pooled Expert₁ output
/// broadcast over space. At the endpoints the unused expert is not evaluated.
pub fn moe_mix(
    tape: &mut Tape,
    f: Var,
    w0: f64,
    expert0: impl FnOnce(&mut Tape) -> Result<Var>,
    expert1: impl FnOnce(&mut Tape) -> Result<Var>,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&w0) {
        return domain_err(format!("gate weight {w0} outside [0, 1]"));
    }
    let mix = if w0 == 1.0 {
        expert0(tape)?
    } else if w0 == 0.0 {
        expert1(tape)?
    } else {
        let e0 = expert0(tape)?;
        let e1 = expert1(tape)?;
        let a = tape.scale(e0, w0);
        let b = tape.scale(e1, 1.0 - w0);
        tape.add(a, b)?
    };
    tape.add(f, mix)
}

/// A network instance: configuration, learnable parameters, and running statistics.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    grid: Arc<SplineGrid>,
    pub params: ParamStore,
    pub buffers: ParamStore,
}

fn he(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("init shape")
}

pub(crate) fn ca_prefixes(config: &BackboneConfig) -> Vec<String> {
    let mut out: Vec<String> = (0..config.blocks_shallow)
        .map(|l| format!("shallow.{l}.expert1.ca"))
        .collect();
    out.push("expert1.window_ca".to_string());
    out
}

/// Fresh channel-attention weights for every Expert₁ bottleneck.
pub(crate) fn init_channel_attention(params: &mut ParamStore, config: &BackboneConfig, rng: &mut ChaCha8Rng) {
    let c = config.shallow_channels;
    let r = c / CA_REDUCTION;
    for prefix in ca_prefixes(config) {
        params.insert(format!("{prefix}.fc1.w"), he(rng, &[r, c], c));
        params.insert(format!("{prefix}.fc1.b"), Tensor::zeros(&[r]));
        params.insert(format!("{prefix}.fc2.w"), he(rng, &[c, r], r));
        params.insert(format!("{prefix}.fc2.b"), Tensor::zeros(&[c]));
    }
}

impl Model {
    /// Seeded initialization; identical seeds give identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let grid = Arc::new(SplineGrid::new(config.kan)?);
        let b = &config.backbone;
        let (cs, cd) = (b.shallow_channels, b.deep_channels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let norm = |params: &mut ParamStore, buffers: &mut ParamStore, prefix: &str, c: usize, affine: bool| {
            if affine {
                params.insert(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0));
                params.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]));
            }
            buffers.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[c]));
            buffers.insert(format!("{prefix}.running_var"), Tensor::full(&[c], 1.0));
        };

        params.insert("stem.conv.w", he(&mut rng, &[cs, b.in_channels, 3, 3], b.in_channels * 9));
        norm(&mut params, &mut buffers, "stem.bn", cs, true);
        for l in 0..b.blocks_shallow {
            params.insert(format!("shallow.{l}.expert0.conv.w"), he(&mut rng, &[cs, cs, 3, 3], cs * 9));
            norm(&mut params, &mut buffers, &format!("shallow.{l}.expert0.bn"), cs, true);
        }
        for d in 0..b.blocks_deep {
            let cin = if d == 0 { cs } else { cd };
            params.insert(format!("deep.{d}.down.conv.w"), he(&mut rng, &[cd, cin, 3, 3], cin * 9));
            norm(&mut params, &mut buffers, &format!("deep.{d}.down.bn"), cd, true);
            params.insert(format!("deep.{d}.res.conv.w"), he(&mut rng, &[cd, cd, 3, 3], cd * 9));
            norm(&mut params, &mut buffers, &format!("deep.{d}.res.bn"), cd, true);
        }
        norm(&mut params, &mut buffers, "embed_global.bn", cd, false);
        norm(&mut params, &mut buffers, "embed_local.bn", cs, false);
        params.insert("kan_global.coeffs", KanLayer::init_coeffs(cd, config.bits, &grid, &mut rng));
        params.insert("kan_local.coeffs", KanLayer::init_coeffs(cs, config.bits, &grid, &mut rng));
        params.insert(
            "classifier.w",
            he(&mut rng, &[b.num_classes, config.bits], config.bits),
        );
        params.insert("classifier.b", Tensor::zeros(&[b.num_classes]));
        init_channel_attention(&mut params, b, &mut rng);
        Ok(Model {
            config,
            grid,
            params,
            buffers,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: ParamStore, buffers: ParamStore) -> Result<Self> {
        let reference = Model::new(config.clone(), 0)?;
        for (store, expected, what) in [(&params, &reference.params, "parameter"), (&buffers, &reference.buffers, "buffer")] {
            for (name, t) in expected.iter() {
                let got = store.get(name).map_err(|_| Error::Format(format!("missing {what} `{name}`")))?;
                if got.shape() != t.shape() {
                    return Err(Error::Format(format!(
                        "{what} `{name}` has shape {:?}, expected {:?}",
                        got.shape(),
                        t.shape()
                    )));
                }
            }
            if store.len() != expected.len() {
                return Err(Error::Format(format!("unexpected extra {what}s in checkpoint")));
            }
        }
        Ok(Model {
            grid: reference.grid,
            config,
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn bits(&self) -> usize {
        self.config.bits
    }

    pub fn grid(&self) -> &Arc<SplineGrid> {
        &self.grid
    }

    pub fn graph(&self, phase: Phase) -> Graph<'_> {
        Graph {
            model: self,
            phase,
            tape: Tape::new(),
            vars: HashMap::new(),
            norms: Vec::new(),
        }
    }

    /// Fold recorded batch statistics into the running buffers.
    pub fn apply_norm_updates(&mut self, updates: &[(String, Vec<f64>, Vec<f64>)]) -> Result<()> {
        for (prefix, mean, var) in updates {
            for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
                let buf = self.buffers.get_mut(&format!("{prefix}.{suffix}"))?;
                for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = NORM_MOMENTUM * *r + (1.0 - NORM_MOMENTUM) * b;
                }
            }
        }
        Ok(())
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let s = images.shape();
        let b = &self.config.backbone;
        if s.len() != 4 || s[1] != b.in_channels {
            return shape_err(format!(
                "expected images [N,{},H,W], got {s:?}",
                b.in_channels
            ));
        }
        if s[2] % b.downsample_factor_shallow != 0 || s[3] % b.downsample_factor_shallow != 0 {
            return shape_err(format!(
                "image size {}x{} not divisible by {}",
                s[2], s[3], b.downsample_factor_shallow
            ));
        }
        Ok(())
    }

    pub fn forward_shallow(&self, images: &Tensor, mode: &RetrievalMode) -> Result<Tensor> {
        self.check_images(images)?;
        let w0 = mode_gate(mode)?;
        let mut g = self.graph(Phase::Inference);
        let x = g.tape.constant(images.clone());
        let y = g.forward_shallow(x, w0)?;
        Ok(g.tape.value(y).clone())
    }

    pub fn forward_deep(&self, shallow: &Tensor) -> Result<Tensor> {
        let s = shallow.shape();
        let b = &self.config.backbone;
        if s.len() != 4 || s[1] != b.shallow_channels {
            return shape_err(format!(
                "expected shallow map [N,{},h,w], got {s:?}",
                b.shallow_channels
            ));
        }
        let mut g = self.graph(Phase::Inference);
        let x = g.tape.constant(shallow.clone());
        let y = g.forward_deep(x)?;
        Ok(g.tape.value(y).clone())
    }

    /// Deep features average-pooled to `[N, deep_channels]`.
    pub fn extract_global_embedding(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        let mut g = self.graph(Phase::Inference);
        let x = g.tape.constant(images.clone());
        let e = g.global_embedding(x)?;
        Ok(g.tape.value(e).clone())
    }

    /// Continuous global codes `[N, bits]`.
    pub fn global_codes(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        let mut g = self.graph(Phase::Inference);
        let x = g.tape.constant(images.clone());
        let (h, _) = g.global_head(x)?;
        Ok(g.tape.value(h).clone())
    }

    /// The 1/4-resolution map all local windows are pooled from.
    pub fn extract_local_feature_map(&self, images: &Tensor, alpha: f64) -> Result<Tensor> {
        self.check_images(images)?;
        if !(0.0..=1.0).contains(&alpha) {
            return domain_err(format!("alpha {alpha} outside [0, 1]"));
        }
        let mut g = self.graph(Phase::Inference);
        let x = g.tape.constant(images.clone());
        let y = g.forward_shallow(x, alpha)?;
        Ok(g.tape.value(y).clone())
    }

    /// Pooled window descriptor `[C]` of a single feature map `[1, C, h, w]`.
    pub fn pool_window(&self, fmap: &Tensor, window: FeatureBox) -> Result<Tensor> {
        let mut g = self.graph(Phase::Inference);
        let f = g.tape.constant(fmap.clone());
        let p = g.pool_window(f, window)?;
        let v = g.tape.value(p);
        Tensor::new(vec![v.numel()], v.data().to_vec())
    }

    /// Continuous local codes `[N, bits]` for one window of each map in `fmaps`.
    pub fn local_window_codes(&self, fmaps: &Tensor, window: FeatureBox) -> Result<Tensor> {
        let mut g = self.graph(Phase::Inference);
        let f = g.tape.constant(fmaps.clone());
        let p = g.pool_window(f, window)?;
        let h = g.local_head(p)?;
        Ok(g.tape.value(h).clone())
    }

    /// Continuous codes `[W, bits]` for several same-sized windows of one map
    /// `[1, C, h, w]`, evaluated as a single batch of crops.
    pub fn window_codes(&self, fmap: &Tensor, windows: &[FeatureBox]) -> Result<Tensor> {
        let s = fmap.shape();
        if s.len() != 4 || s[0] != 1 {
            return shape_err(format!("expected one feature map [1,C,h,w], got {s:?}"));
        }
        let first = match windows.first() {
            Some(w) => *w,
            None => return domain_err("no windows to encode"),
        };
        let (c, h, w) = (s[1], s[2], s[3]);
        let mut data = Vec::with_capacity(windows.len() * c * first.height * first.width);
        for win in windows {
            win.check_within(h, w)?;
            if (win.height, win.width) != (first.height, first.width) {
                return domain_err("windows in one batch must share a size");
            }
            for ch in 0..c {
                for y in win.row..win.row + win.height {
                    let base = ch * h * w + y * w;
                    data.extend_from_slice(&fmap.data()[base + win.col..base + win.col + win.width]);
                }
            }
        }
        let crops = Tensor::new(vec![windows.len(), c, first.height, first.width], data)?;
        let full = FeatureBox {
            row: 0,
            col: 0,
            height: first.height,
            width: first.width,
        };
        self.local_window_codes(&crops, full)
    }

    /// Continuous local codes `[N, bits]` pooled over the entire map of each image.
    pub fn local_codes(&self, images: &Tensor, alpha: f64) -> Result<Tensor> {
        self.check_images(images)?;
        let mut g = self.graph(Phase::Inference);
        let x = g.tape.constant(images.clone());
        let h = g.local_code(x, alpha)?;
        Ok(g.tape.value(h).clone())
    }

    /// Differentiates `build` (a scalar objective over a graph in `phase`) and
    /// compares every trainable entry against central differences. Returns the
    /// largest `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub fn finite_difference_check<F>(&self, phase: Phase, step: f64, build: F) -> Result<f64>
    where
        F: Fn(&mut Graph<'_>) -> Result<Var>,
    {
        if !(step > 0.0) {
            return domain_err(format!("finite-difference step must be positive, got {step}"));
        }
        let eval = |m: &Model| -> Result<f64> {
            let mut g = m.graph(phase);
            let root = build(&mut g)?;
            let v = g.tape.value(root);
            if !v.is_scalar() {
                return shape_err(format!("objective must be scalar, got {:?}", v.shape()));
            }
            Ok(v.item())
        };
        let analytic = {
            let mut g = self.graph(phase);
            let root = build(&mut g)?;
            g.tape.backward(root)?
        };
        let mut probe = self.clone();
        let mut worst: f64 = 0.0;
        let names: Vec<String> = self.params.names().filter(|n| phase.trains(n)).cloned().collect();
        for name in names {
            let n = self.params.get(&name)?.numel();
            for i in 0..n {
                let orig = self.params.get(&name)?.data()[i];
                probe.params.get_mut(&name)?.data_mut()[i] = orig + step;
                let up = eval(&probe)?;
                probe.params.get_mut(&name)?.data_mut()[i] = orig - step;
                let down = eval(&probe)?;
                probe.params.get_mut(&name)?.data_mut()[i] = orig;
                if !up.is_finite() || !down.is_finite() {
                    return Err(Error::Numeric(format!("objective non-finite while probing `{name}`")));
                }
                let numeric = (up - down) / (2.0 * step);
                let a = analytic.get(&name).map_or(0.0, |g| g.data()[i]);
                worst = worst.max((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()));
            }
        }
        Ok(worst)
    }

    pub fn kan_global(&self) -> Result<KanLayer> {
        KanLayer::new(self.grid.clone(), self.params.get("kan_global.coeffs")?.clone())
    }

    pub fn kan_local(&self) -> Result<KanLayer> {
        KanLayer::new(self.grid.clone(), self.params.get("kan_local.coeffs")?.clone())
    }
}

/// One forward computation over a model, recorded on a tape.
pub struct Graph<'m> {
    model: &'m Model,
    phase: Phase,
    pub tape: Tape,
    vars: HashMap<String, Var>,
    norms: Vec<(String, Var)>,
}

impl<'m> Graph<'m> {
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.model.params.get(name)?.clone();
        let v = if self.phase.trains(name) {
            self.tape.param(name, t)
        } else {
            self.tape.constant(t)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn norm_mode(&self, prefix: &str) -> Result<NormMode> {
        if self.phase.batch_stats(prefix) {
            Ok(NormMode::Batch)
        } else {
            Ok(NormMode::Running {
                mean: self.model.buffers.get(&format!("{prefix}.running_mean"))?.data().to_vec(),
                var: self.model.buffers.get(&format!("{prefix}.running_var"))?.data().to_vec(),
            })
        }
    }

    fn norm(&mut self, x: Var, prefix: &str, affine: bool) -> Result<Var> {
        let mode = self.norm_mode(prefix)?;
        let (gamma, beta) = if affine {
            (
                Some(self.param(&format!("{prefix}.gamma"))?),
                Some(self.param(&format!("{prefix}.beta"))?),
            )
        } else {
            (None, None)
        };
        let batch = matches!(mode, NormMode::Batch);
        let y = self.tape.batch_norm(x, gamma, beta, mode)?;
        if batch {
            self.norms.push((prefix.to_string(), y));
        }
        Ok(y)
    }

    fn conv_block(&mut self, x: Var, prefix: &str, stride: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.conv.w"))?;
        let c = self.tape.conv2d(x, w, None, stride, 1)?;
        let n = self.norm(c, &format!("{prefix}.bn"), true)?;
        Ok(self.tape.relu(n))
    }

    pub fn ca_vars(&mut self, prefix: &str) -> Result<CaVars> {
        Ok(CaVars {
            fc1_w: self.param(&format!("{prefix}.fc1.w"))?,
            fc1_b: self.param(&format!("{prefix}.fc1.b"))?,
            fc2_w: self.param(&format!("{prefix}.fc2.w"))?,
            fc2_b: self.param(&format!("{prefix}.fc2.b"))?,
        })
    }

    /// Stem plus gated blocks: `[N, C_in, H, W] -> [N, C_s, H/4, W/4]`.
    pub fn forward_shallow(&mut self, images: Var, w0: f64) -> Result<Var> {
        let s = self.tape.shape(images).to_vec();
        let f = self.model.config.backbone.downsample_factor_shallow;
        if s.len() != 4 || s[2] % f != 0 || s[3] % f != 0 {
            return shape_err(format!("image batch {s:?} not divisible by {f}"));
        }
        let stem = self.conv_block(images, "stem", 2)?;
        let mut x = self.tape.maxpool2d(stem, 2, 2)?;
        for l in 0..self.model.config.backbone.blocks_shallow {
            x = self.moe_block(x, l, w0)?;
        }
        Ok(x)
    }

    /// One gated residual block of the shallow stage.
    pub fn moe_block(&mut self, x: Var, layer: usize, w0: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&w0) {
            return domain_err(format!("gate weight {w0} outside [0, 1]"));
        }
        let e0 = if w0 > 0.0 {
            Some(self.conv_block(x, &format!("shallow.{layer}.expert0"), 1)?)
        } else {
            None
        };
        let ca = if w0 < 1.0 {
            Some(self.ca_vars(&format!("shallow.{layer}.expert1.ca"))?)
        } else {
            None
        };
        moe_mix(
            &mut self.tape,
            x,
            w0,
            |_| Ok(e0.expect("expert0 evaluated when w0 > 0")),
            |t| expert1_forward(t, x, &ca.expect("expert1 weights bound when w0 < 1")),
        )
    }

    /// Two stride-2 stages (plus any stride-1 stages) with residual refinements.
    pub fn forward_deep(&mut self, shallow: Var) -> Result<Var> {
        let mut x = shallow;
        for d in 0..self.model.config.backbone.blocks_deep {
            let stride = if d < 2 { 2 } else { 1 };
            let down = self.conv_block(x, &format!("deep.{d}.down"), stride)?;
            let res = self.conv_block(down, &format!("deep.{d}.res"), 1)?;
            x = self.tape.add(down, res)?;
        }
        Ok(x)
    }

    pub fn global_embedding(&mut self, images: Var) -> Result<Var> {
        let shallow = self.forward_shallow(images, 1.0)?;
        let deep = self.forward_deep(shallow)?;
        let pooled = self.tape.global_avg_pool(deep)?;
        let n = self.tape.shape(pooled)[0];
        self.tape.reshape(pooled, &[n, self.model.config.backbone.deep_channels])
    }

    /// Continuous global codes and class logits.
    pub fn global_head(&mut self, images: Var) -> Result<(Var, Var)> {
        let emb = self.global_embedding(images)?;
        let normed = self.norm(emb, "embed_global.bn", false)?;
        let coeffs = self.param("kan_global.coeffs")?;
        let grid = self.model.grid.clone();
        let h = kan_forward(&mut self.tape, normed, coeffs, &grid)?;
        let (w, b) = (self.param("classifier.w")?, self.param("classifier.b")?);
        let logits = self.tape.dense(h, w, b)?;
        Ok((h, logits))
    }

    /// Expert₁ recipe restricted to a window: `[N,C,h,w] -> [N,C]`.
    pub fn pool_window(&mut self, fmap: Var, window: FeatureBox) -> Result<Var> {
        let s = self.tape.shape(fmap).to_vec();
        if s.len() != 4 {
            return shape_err(format!("feature map must be NCHW, got {s:?}"));
        }
        window.check_within(s[2], s[3])?;
        let crop = if window.row == 0 && window.col == 0 && window.height == s[2] && window.width == s[3] {
            fmap
        } else {
            self.tape.crop(fmap, window.row, window.col, window.height, window.width)?
        };
        let ca = self.ca_vars("expert1.window_ca")?;
        let out = expert1_forward(&mut self.tape, crop, &ca)?;
        self.tape.reshape(out, &[s[0], s[1]])
    }

    /// Continuous local codes from pooled window descriptors `[N, C]`.
    pub fn local_head(&mut self, pooled: Var) -> Result<Var> {
        let normed = self.norm(pooled, "embed_local.bn", false)?;
        let coeffs = self.param("kan_local.coeffs")?;
        let grid = self.model.grid.clone();
        kan_forward(&mut self.tape, normed, coeffs, &grid)
    }

    /// Local codes for whole images, pooling over the full 1/4 map.
    pub fn local_code(&mut self, images: Var, alpha: f64) -> Result<Var> {
        let fmap = self.forward_shallow(images, alpha)?;
        let s = self.tape.shape(fmap).to_vec();
        let full = FeatureBox {
            row: 0,
            col: 0,
            height: s[2],
            width: s[3],
        };
        let pooled = self.pool_window(fmap, full)?;
        self.local_head(pooled)
    }

    /// Batch statistics recorded by batch-mode norms, as (prefix, mean, var).
    pub fn norm_updates(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        self.norms
            .iter()
            .filter_map(|(prefix, v)| {
                self.tape
                    .norm_stats(*v)
                    .map(|(m, s)| (prefix.clone(), m.to_vec(), s.to_vec()))
            })
            .collect()
    }
}
