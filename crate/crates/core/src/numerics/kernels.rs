//! Raw NCHW kernels backing the differentiable ops.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Output indices `lo..hi` whose input coordinate `out*stride + k - pad` is in `0..len`.
    fn valid_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k {
            (self.pad - k).div_ceil(s)
        } else {
            0
        };
        let hi = if len + self.pad > k {
            ((len + self.pad - k - 1) / s + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let mut out = vec![0.0; g.n * g.o * plane];
    for n in 0..g.n {
        for o in 0..g.o {
            let dst = &mut out[(n * g.o + o) * plane..(n * g.o + o + 1) * plane];
            if let Some(b) = bias {
                dst.iter_mut().for_each(|v| *v = b[o]);
            }
            for c in 0..g.c {
                let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    let (y0, y1) = g.valid_range(ky, g.h, oh);
                    for kx in 0..g.kw {
                        let wv = w[((o * g.c + c) * g.kh + ky) * g.kw + kx];
                        let (x0, x1) = g.valid_range(kx, g.w, ow);
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row = &src[iy * g.w..(iy + 1) * g.w];
                            let drow = &mut dst[oy * ow..(oy + 1) * ow];
                            if g.stride == 1 {
                                let off = kx as isize - g.pad as isize;
                                let xs = &row[(x0 as isize + off) as usize..(x1 as isize + off) as usize];
                                for (d, &s) in drow[x0..x1].iter_mut().zip(xs) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in x0..x1 {
                                    drow[ox] += wv * row[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad_input, grad_kernel, grad_bias).
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    need_input_grad: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let mut gx = if need_input_grad { vec![0.0; x.len()] } else { Vec::new() };
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.o];
    for n in 0..g.n {
        for o in 0..g.o {
            let go = &grad_out[(n * g.o + o) * plane..(n * g.o + o + 1) * plane];
            gb[o] += go.iter().sum::<f64>();
            for c in 0..g.c {
                let base = (n * g.c + c) * g.h * g.w;
                for ky in 0..g.kh {
                    let (y0, y1) = g.valid_range(ky, g.h, oh);
                    for kx in 0..g.kw {
                        let widx = ((o * g.c + c) * g.kh + ky) * g.kw + kx;
                        let wv = w[widx];
                        let (x0, x1) = g.valid_range(kx, g.w, ow);
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &go[oy * ow..(oy + 1) * ow];
                            let row_off = base + iy * g.w;
                            if g.stride == 1 {
                                let lo = row_off + x0 + kx - g.pad;
                                let xs = &x[lo..lo + (x1 - x0)];
                                acc += grow[x0..x1].iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                                if need_input_grad {
                                    for (d, &gv) in gx[lo..lo + (x1 - x0)].iter_mut().zip(&grow[x0..x1]) {
                                        *d += wv * gv;
                                    }
                                }
                            } else {
                                for ox in x0..x1 {
                                    let ix = ox * g.stride + kx - g.pad;
                                    let gv = grow[ox];
                                    acc += gv * x[row_off + ix];
                                    if need_input_grad {
                                        gx[row_off + ix] += wv * gv;
                                    }
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Max pooling without padding; returns values and flat argmax indices.
pub fn maxpool2d_forward(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}
