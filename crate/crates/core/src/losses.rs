//! Training objectives over continuous codes, in scalar form for single pairs
//! and in tape form for batches, plus the SSIM-based pair similarity.

use crate::error::{domain_err, shape_err, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Clamp on the soft distance so both logarithms stay finite.
pub const DIST_EPS: f64 = 1e-6;
pub const QUANT_WEIGHT: f64 = 0.5;
pub const CE_WEIGHT: f64 = 0.5;
pub const LAMBDA_REG: f64 = 1.0;

/// `(q − a·b) / 2q`, clamped to `[ε, 1 − ε]`. On ±1 codes this is Hamming / q.
pub fn soft_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return shape_err(format!("soft distance over lengths {} and {}", a.len(), b.len()));
    }
    let q = a.len() as f64;
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(((q - dot) / (2.0 * q)).clamp(DIST_EPS, 1.0 - DIST_EPS))
}

/// `w·(L_pos − L_neg)` with `L_pos = S·y·(−log(1 − d))`, `L_neg = e^S·(1 − y)·log d`.
pub fn contrastive_pair_loss(d: f64, s: f64, same_class: bool, w: f64) -> f64 {
    let d = d.clamp(DIST_EPS, 1.0 - DIST_EPS);
    let y = if same_class { 1.0 } else { 0.0 };
    let pos = s * y * -(1.0 - d).ln();
    let neg = s.exp() * (1.0 - y) * d.ln();
    w * (pos - neg)
}

/// `log(1 + mean_i |1 − |u_i||)`.
pub fn quantization_loss(u: &[f64]) -> f64 {
    let dev = u.iter().map(|v| (1.0 - v.abs()).abs()).sum::<f64>() / u.len() as f64;
    dev.ln_1p()
}

/// `−log softmax(z)[label]`.
pub fn cross_entropy(z: &[f64], label: usize) -> Result<f64> {
    if z.len() < 2 {
        return domain_err("cross entropy needs at least two classes");
    }
    if label >= z.len() {
        return domain_err(format!("label {label} out of range for {} classes", z.len()));
    }
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    Ok(lse - z[label])
}

/// Mean soft distance between paired codes.
pub fn consistency_loss(orig: &[Vec<f64>], trans: &[Vec<f64>]) -> Result<f64> {
    if orig.len() != trans.len() || orig.is_empty() {
        return shape_err(format!("{} original vs {} transformed codes", orig.len(), trans.len()));
    }
    let mut acc = 0.0;
    for (a, b) in orig.iter().zip(trans) {
        acc += soft_distance(a, b)?;
    }
    Ok(acc / orig.len() as f64)
}

/// `−(1/N²)·Σ_{i≠j} d(h_i, h_j)`.
pub fn diversity_regularizer(codes: &[Vec<f64>]) -> Result<f64> {
    let n = codes.len();
    if n < 2 {
        return domain_err("diversity needs a batch of at least two codes");
    }
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += soft_distance(&codes[i], &codes[j])?;
            }
        }
    }
    Ok(-acc / (n * n) as f64)
}

pub fn stage1_total(contrast: f64, quant: f64, ce: f64) -> f64 {
    contrast + QUANT_WEIGHT * quant + CE_WEIGHT * ce
}

pub fn stage2_total(consist: f64, reg: f64) -> f64 {
    consist + LAMBDA_REG * reg
}

/// `[N, M]` matrix of soft distances between rows of `a: [N, q]` and `b: [M, q]`.
pub fn soft_distance_matrix(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let q = tape.shape(a)[1] as f64;
    let dot = tape.matmul_nt(a, b)?;
    let scaled = tape.scale(dot, -1.0 / (2.0 * q));
    let d = tape.shift(scaled, 0.5);
    Ok(tape.clamp(d, DIST_EPS, 1.0 - DIST_EPS))
}

/// Row-wise soft distance between equally shaped `[N, q]` code batches.
pub fn paired_soft_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) || tape.shape(a).len() != 2 {
        return shape_err(format!(
            "paired codes {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        ));
    }
    let q = tape.shape(a)[1] as f64;
    let prod = tape.mul(a, b)?;
    let dot = tape.row_sum(prod)?;
    let scaled = tape.scale(dot, -1.0 / (2.0 * q));
    let d = tape.shift(scaled, 0.5);
    Ok(tape.clamp(d, DIST_EPS, 1.0 - DIST_EPS))
}

/// Mean of [`contrastive_pair_loss`] over all `i < j` pairs of the batch, `w = 1`.
/// `similarity` is the row-major `N × N` matrix of `S`.
pub fn contrastive_loss(tape: &mut Tape, codes: Var, labels: &[usize], similarity: &[f64]) -> Result<Var> {
    let n = tape.shape(codes)[0];
    if labels.len() != n || similarity.len() != n * n {
        return shape_err(format!(
            "{n} codes with {} labels and {} similarities",
            labels.len(),
            similarity.len()
        ));
    }
    if n < 2 {
        return domain_err("contrastive loss needs at least two codes");
    }
    let (mut pos, mut neg) = (vec![0.0; n * n], vec![0.0; n * n]);
    for i in 0..n {
        for j in i + 1..n {
            let s = similarity[i * n + j];
            if labels[i] == labels[j] {
                pos[i * n + j] = s;
            } else {
                neg[i * n + j] = s.exp();
            }
        }
    }
    let d = soft_distance_matrix(tape, codes, codes)?;
    let neg_d = tape.scale(d, -1.0);
    let one_minus = tape.shift(neg_d, 1.0);
    let log_pull = tape.log(one_minus);
    let log_push = tape.log(d);
    let pos = tape.constant(Tensor::new(vec![n, n], pos)?);
    let neg = tape.constant(Tensor::new(vec![n, n], neg)?);
    let a = tape.mul(pos, log_pull)?;
    let b = tape.mul(neg, log_push)?;
    let total = tape.add(a, b)?;
    let total = tape.sum(total);
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(tape.scale(total, -1.0 / pairs))
}

/// Batch mean of [`quantization_loss`] over rows of `[N, q]`.
pub fn quantization_loss_batch(tape: &mut Tape, u: Var) -> Result<Var> {
    let q = tape.shape(u)[1] as f64;
    let a = tape.abs(u);
    let a = tape.scale(a, -1.0);
    let a = tape.shift(a, 1.0);
    let dev = tape.abs(a);
    let per_row = tape.row_sum(dev)?;
    let per_row = tape.scale(per_row, 1.0 / q);
    let per_row = tape.shift(per_row, 1.0);
    let logs = tape.log(per_row);
    Ok(tape.mean(logs))
}

pub fn consistency_loss_batch(tape: &mut Tape, orig: Var, trans: Var) -> Result<Var> {
    let d = paired_soft_distance(tape, orig, trans)?;
    Ok(tape.mean(d))
}

pub fn diversity_regularizer_batch(tape: &mut Tape, codes: Var) -> Result<Var> {
    let n = tape.shape(codes)[0];
    if n < 2 {
        return domain_err("diversity needs a batch of at least two codes");
    }
    let d = soft_distance_matrix(tape, codes, codes)?;
    let mask: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { 0.0 } else { 1.0 }).collect();
    let mask = tape.constant(Tensor::new(vec![n, n], mask)?);
    let off = tape.mul(mask, d)?;
    let total = tape.sum(off);
    Ok(tape.scale(total, -1.0 / (n * n) as f64))
}

/// Component values of one Stage-1 objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stage1Terms {
    pub contrast: f64,
    pub quant: f64,
    pub ce: f64,
}

impl Stage1Terms {
    pub fn total(&self) -> f64 {
        stage1_total(self.contrast, self.quant, self.ce)
    }
}

/// Stage-1 objective on a batch of continuous codes and class logits.
pub fn stage1_objective(
    tape: &mut Tape,
    codes: Var,
    logits: Var,
    labels: &[usize],
    similarity: &[f64],
) -> Result<(Var, Stage1Terms)> {
    let c = contrastive_loss(tape, codes, labels, similarity)?;
    let q = quantization_loss_batch(tape, codes)?;
    let e = tape.cross_entropy(logits, labels)?;
    let terms = Stage1Terms {
        contrast: tape.value(c).item(),
        quant: tape.value(q).item(),
        ce: tape.value(e).item(),
    };
    let qw = tape.scale(q, QUANT_WEIGHT);
    let ew = tape.scale(e, CE_WEIGHT);
    let t = tape.add(c, qw)?;
    Ok((tape.add(t, ew)?, terms))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stage2Terms {
    pub consist: f64,
    pub reg: f64,
}

impl Stage2Terms {
    pub fn total(&self) -> f64 {
        stage2_total(self.consist, self.reg)
    }
}

/// Stage-2 objective: consistency between paired rows plus the diversity term
/// over the original codes.
pub fn stage2_objective(tape: &mut Tape, orig: Var, trans: Var, lambda_reg: f64) -> Result<(Var, Stage2Terms)> {
    let c = consistency_loss_batch(tape, orig, trans)?;
    let r = diversity_regularizer_batch(tape, orig)?;
    let terms = Stage2Terms {
        consist: tape.value(c).item(),
        reg: tape.value(r).item(),
    };
    let rw = tape.scale(r, lambda_reg);
    Ok((tape.add(c, rw)?, terms))
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Side of the block-averaged raster SSIM is computed on.
pub const SSIM_GRID: usize = 8;

/// Block-average a square `side × side` raster down to `SSIM_GRID × SSIM_GRID`.
pub fn downsample_for_similarity(pixels: &[f64], side: usize) -> Result<Vec<f64>> {
    if side * side != pixels.len() || side % SSIM_GRID != 0 {
        return shape_err(format!(
            "similarity needs a square raster with side divisible by {SSIM_GRID}, got {} values",
            pixels.len()
        ));
    }
    let b = side / SSIM_GRID;
    let mut out = vec![0.0; SSIM_GRID * SSIM_GRID];
    for y in 0..side {
        for x in 0..side {
            out[(y / b) * SSIM_GRID + x / b] += pixels[y * side + x];
        }
    }
    let area = (b * b) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    Ok(out)
}

/// Mean SSIM over all 3×3 windows of two downsampled rasters, mapped to `[0, 1]`.
pub fn ssim_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let g = SSIM_GRID;
    if a.len() != g * g || b.len() != g * g {
        return shape_err(format!("ssim expects {g}x{g} rasters"));
    }
    let mut total = 0.0;
    let mut count = 0;
    for y in 0..=g - 3 {
        for x in 0..=g - 3 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for dy in 0..3 {
                for dx in 0..3 {
                    ma += a[(y + dy) * g + x + dx];
                    mb += b[(y + dy) * g + x + dx];
                }
            }
            ma /= 9.0;
            mb /= 9.0;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dy in 0..3 {
                for dx in 0..3 {
                    let (pa, pb) = (a[(y + dy) * g + x + dx] - ma, b[(y + dy) * g + x + dx] - mb);
                    va += pa * pa;
                    vb += pb * pb;
                    cov += pa * pb;
                }
            }
            va /= 9.0;
            vb /= 9.0;
            cov /= 9.0;
            total += (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(((total / count as f64 + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Visual similarity `S ∈ [0, 1]` of two square grayscale rasters.
pub fn visual_similarity(a: &[f64], b: &[f64], side: usize) -> Result<f64> {
    ssim_similarity(&downsample_for_similarity(a, side)?, &downsample_for_similarity(b, side)?)
}

/// Row-major `N × N` similarity matrix from pre-downsampled rasters.
pub fn similarity_matrix(small: &[&[f64]]) -> Result<Vec<f64>> {
    let n = small.len();
    let mut out = vec![1.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s = ssim_similarity(small[i], small[j])?;
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    Ok(out)
}
