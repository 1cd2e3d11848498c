//! Finite-difference verification of every differentiable building block:
//! KAN layer, channel attention, conv blocks in both norm modes, the composed
//! network, and each training loss.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kanhash::{kan_forward, KanConfig, KanLayer, SplineGrid};
use crate::losses::{
    consistency_loss_batch, contrastive_loss, diversity_regularizer_batch, quantization_loss_batch,
    stage1_objective, stage2_objective, LAMBDA_REG,
};
use crate::model::{channel_attention, conv_norm_relu, expert1_forward, BackboneConfig, CaVars, Model, ModelConfig, Phase};
use crate::numerics::{finite_difference_check, NormMode, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: [u64; 3] = [11, 12, 13];

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentError {
    pub component: &'static str,
    pub max_rel_err: f64,
}

impl ComponentError {
    pub fn passes(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

type Check = fn(u64, f64) -> Result<f64>;

const COMPONENTS: [(&str, Check); 14] = [
    ("kan_layer", kan_layer),
    ("channel_attention", channel_attention_check),
    ("expert1", expert1_check),
    ("conv_block_batch_norm", |s, h| conv_block(s, h, true)),
    ("conv_block_running_norm", |s, h| conv_block(s, h, false)),
    ("network_probe", network_probe),
    ("network_stage1", network_stage1),
    ("contrastive_loss", contrastive),
    ("quantization_loss", quantization),
    ("cross_entropy", cross_entropy),
    ("consistency_loss", consistency),
    ("diversity_regularizer", diversity),
    ("stage1_total", stage1_total),
    ("stage2_total", stage2_total),
];

pub fn component_names() -> Vec<&'static str> {
    COMPONENTS.iter().map(|(n, _)| *n).collect()
}

/// Worst relative error per component over `seeds`.
pub fn run_suite(step: f64, seeds: &[u64]) -> Result<Vec<ComponentError>> {
    let mut out = Vec::with_capacity(COMPONENTS.len());
    for (component, check) in COMPONENTS {
        let mut worst: f64 = 0.0;
        for &seed in seeds {
            worst = worst.max(check(seed, step)?);
        }
        out.push(ComponentError { component, max_rel_err: worst });
    }
    Ok(out)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// `Σ w ⊙ v` with fixed random weights, so no output entry is privileged.
fn weighted_sum(t: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(v).to_vec();
    let w = uniform(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x77), &shape, -1.0, 1.0);
    let w = t.constant(w);
    let p = t.mul(v, w)?;
    Ok(t.sum(p))
}

fn kan_layer(seed: u64, step: f64) -> Result<f64> {
    let grid = Arc::new(SplineGrid::new(KanConfig::default())?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    p.insert("coeffs", KanLayer::init_coeffs(3, 4, &grid, &mut rng));
    p.insert("x", uniform(&mut rng, &[2, 3], -1.9, 1.9));
    finite_difference_check(&p, step, |t, v| {
        let out = kan_forward(t, v["x"], v["coeffs"], &grid)?;
        weighted_sum(t, out, seed)
    })
}

fn ca_params(rng: &mut ChaCha8Rng, p: &mut ParamStore, c: usize, r: usize) {
    p.insert("fc1_w", uniform(rng, &[r, c], -0.8, 0.8));
    p.insert("fc1_b", uniform(rng, &[r], -0.3, 0.3));
    p.insert("fc2_w", uniform(rng, &[c, r], -0.8, 0.8));
    p.insert("fc2_b", uniform(rng, &[c], -0.3, 0.3));
}

fn ca_vars(v: &BTreeMap<String, Var>) -> CaVars {
    CaVars {
        fc1_w: v["fc1_w"],
        fc1_b: v["fc1_b"],
        fc2_w: v["fc2_w"],
        fc2_b: v["fc2_b"],
    }
}

fn channel_attention_check(seed: u64, step: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    ca_params(&mut rng, &mut p, 6, 3);
    p.insert("pooled", uniform(&mut rng, &[2, 6, 1, 1], 0.1, 2.0));
    finite_difference_check(&p, step, |t, v| {
        let out = channel_attention(t, v["pooled"], &ca_vars(v))?;
        weighted_sum(t, out, seed)
    })
}

fn expert1_check(seed: u64, step: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    ca_params(&mut rng, &mut p, 4, 2);
    p.insert("f", uniform(&mut rng, &[2, 4, 5, 5], -1.0, 1.0));
    finite_difference_check(&p, step, |t, v| {
        let out = expert1_forward(t, v["f"], &ca_vars(v))?;
        weighted_sum(t, out, seed)
    })
}

fn conv_block(seed: u64, step: f64, batch: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    p.insert("x", uniform(&mut rng, &[2, 2, 7, 7], -1.0, 1.0));
    p.insert("w", uniform(&mut rng, &[3, 2, 3, 3], -0.5, 0.5));
    p.insert("gamma", uniform(&mut rng, &[3], 0.7, 1.3));
    p.insert("beta", uniform(&mut rng, &[3], -0.3, 0.3));
    let running = NormMode::Running {
        mean: (0..3).map(|_| rng.random_range(-0.2..0.2)).collect(),
        var: (0..3).map(|_| rng.random_range(0.5..1.5)).collect(),
    };
    let mode = if batch { NormMode::Batch } else { running };
    finite_difference_check(&p, step, |t, v| {
        let a = conv_norm_relu(t, v["x"], v["w"], v["gamma"], v["beta"], 1, mode.clone())?;
        let b = conv_norm_relu(t, v["x"], v["w"], v["gamma"], v["beta"], 2, mode.clone())?;
        let a = weighted_sum(t, a, seed)?;
        let b = weighted_sum(t, b, seed + 1)?;
        t.add(a, b)
    })
}

fn tiny_model(seed: u64) -> Result<Model> {
    let backbone = BackboneConfig {
        input_size: 16,
        in_channels: 1,
        shallow_channels: 4,
        deep_channels: 4,
        blocks_shallow: 2,
        blocks_deep: 2,
        downsample_factor_shallow: 4,
        num_classes: 3,
    };
    let mut model = Model::new(ModelConfig::new(backbone, 4), seed)?;
    // nonzero biases and running statistics so every branch carries signal
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for (name, t) in model.params.iter_mut() {
        if name.ends_with(".b") || name.ends_with(".beta") || name.ends_with(".gamma") {
            let base = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
            t.data_mut().iter_mut().for_each(|v| *v = base + rng.random_range(-0.3..0.3));
        }
    }
    for (name, t) in model.buffers.iter_mut() {
        let var = name.ends_with("running_var");
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = if var { rng.random_range(0.5..1.5) } else { rng.random_range(-0.2..0.2) });
    }
    Ok(model)
}

/// All parameters, running statistics, both heads and a mixed gate.
fn network_probe(seed: u64, step: f64) -> Result<f64> {
    let model = tiny_model(seed)?;
    let x = uniform(&mut ChaCha8Rng::seed_from_u64(seed + 100), &[2, 1, 16, 16], -1.0, 1.0);
    model.finite_difference_check(Phase::Probe, step, |g| {
        let xv = g.tape.constant(x.clone());
        let (h, logits) = g.global_head(xv)?;
        let local = g.local_code(xv, 0.4)?;
        let a = weighted_sum(&mut g.tape, h, seed)?;
        let b = g.tape.cross_entropy(logits, &[0, 2])?;
        let c = weighted_sum(&mut g.tape, local, seed + 1)?;
        let ab = g.tape.add(a, b)?;
        g.tape.add(ab, c)
    })
}

/// Global pathway with batch statistics, as trained in the first stage.
fn network_stage1(seed: u64, step: f64) -> Result<f64> {
    let model = tiny_model(seed)?;
    let x = uniform(&mut ChaCha8Rng::seed_from_u64(seed + 200), &[3, 1, 16, 16], -1.0, 1.0);
    model.finite_difference_check(Phase::Stage1, step, |g| {
        let xv = g.tape.constant(x.clone());
        let (h, logits) = g.global_head(xv)?;
        let a = weighted_sum(&mut g.tape, h, seed)?;
        let b = g.tape.cross_entropy(logits, &[1, 0, 2])?;
        g.tape.add(a, b)
    })
}

struct LossInputs {
    params: ParamStore,
    labels: Vec<usize>,
    sim: Vec<f64>,
}

fn loss_inputs(seed: u64) -> LossInputs {
    let (n, q) = (5, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    params.insert("h", uniform(&mut rng, &[n, q], -0.95, 0.95));
    params.insert("t", uniform(&mut rng, &[n, q], -0.95, 0.95));
    params.insert("z", uniform(&mut rng, &[n, 3], -2.0, 2.0));
    let labels = (0..n).map(|i| i % 3).collect();
    let mut sim = vec![1.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s = rng.random::<f64>();
            sim[i * n + j] = s;
            sim[j * n + i] = s;
        }
    }
    LossInputs { params, labels, sim }
}

fn contrastive(seed: u64, step: f64) -> Result<f64> {
    let li = loss_inputs(seed);
    finite_difference_check(&li.params, step, |t, v| contrastive_loss(t, v["h"], &li.labels, &li.sim))
}

fn quantization(seed: u64, step: f64) -> Result<f64> {
    let li = loss_inputs(seed);
    finite_difference_check(&li.params, step, |t, v| quantization_loss_batch(t, v["h"]))
}

fn cross_entropy(seed: u64, step: f64) -> Result<f64> {
    let li = loss_inputs(seed);
    finite_difference_check(&li.params, step, |t, v| t.cross_entropy(v["z"], &li.labels))
}

fn consistency(seed: u64, step: f64) -> Result<f64> {
    let li = loss_inputs(seed);
    finite_difference_check(&li.params, step, |t, v| consistency_loss_batch(t, v["h"], v["t"]))
}

fn diversity(seed: u64, step: f64) -> Result<f64> {
    let li = loss_inputs(seed);
    finite_difference_check(&li.params, step, |t, v| diversity_regularizer_batch(t, v["h"]))
}

fn stage1_total(seed: u64, step: f64) -> Result<f64> {
    let li = loss_inputs(seed);
    finite_difference_check(&li.params, step, |t, v| {
        Ok(stage1_objective(t, v["h"], v["z"], &li.labels, &li.sim)?.0)
    })
}

fn stage2_total(seed: u64, step: f64) -> Result<f64> {
    let li = loss_inputs(seed);
    finite_difference_check(&li.params, step, |t, v| Ok(stage2_objective(t, v["h"], v["t"], LAMBDA_REG)?.0))
}
