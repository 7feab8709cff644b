//! Forward and backward kernels for the supported layer kinds.
//!
//! All kernels work on flat row-major slices and accumulate in `f64`.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// `y[b][o] = bias[o] + sum_i x[b][i] * w[o][i]`
pub(crate) fn dense_forward(
    x: &[f64],
    batch: usize,
    w: &[f64],
    bias: &[f64],
    inputs: usize,
    outputs: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; batch * outputs];
    for b in 0..batch {
        let xr = &x[b * inputs..(b + 1) * inputs];
        let yr = &mut y[b * outputs..(b + 1) * outputs];
        for (o, out) in yr.iter_mut().enumerate() {
            let wr = &w[o * inputs..(o + 1) * inputs];
            let dot: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            *out = bias[o] + dot;
        }
    }
    y
}

/// Returns `(dx, dw, dbias)`.
pub(crate) fn dense_backward(
    x: &[f64],
    dy: &[f64],
    batch: usize,
    w: &[f64],
    inputs: usize,
    outputs: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; batch * inputs];
    let mut dw = vec![0.0; outputs * inputs];
    let mut db = vec![0.0; outputs];
    for b in 0..batch {
        let xr = &x[b * inputs..(b + 1) * inputs];
        let dxr = &mut dx[b * inputs..(b + 1) * inputs];
        for o in 0..outputs {
            let g = dy[b * outputs + o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let wr = &w[o * inputs..(o + 1) * inputs];
            let dwr = &mut dw[o * inputs..(o + 1) * inputs];
            for i in 0..inputs {
                dwr[i] += g * xr[i];
                dxr[i] += g * wr[i];
            }
        }
    }
    (dx, dw, db)
}

/// Unfolds one sample into a `[C*k*k, Ho*Wo]` patch matrix (zero padding).
fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let dst = &mut col[r * ho * wo..(r + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    let row = &mut dst[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= g.height as isize {
                        row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for (oj, v) in row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        *v = if jj < 0 || jj >= g.width as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let src = &col[r * ho * wo..(r + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj >= 0 && jj < g.width as isize {
                            plane[ii as usize * g.width + jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Input `[B, C, H, W]`, weight `[O, C, k, k]`, output `[B, O, Ho, Wo]`.
pub(crate) fn conv_forward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    w: &[f64],
    bias: &[f64],
    outputs: usize,
) -> Vec<f64> {
    let in_len = g.channels * g.height * g.width;
    let (plen, npos) = (g.patch_len(), g.positions());
    let mut col = vec![0.0; plen * npos];
    let mut y = vec![0.0; batch * outputs * npos];
    for b in 0..batch {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut col);
        let yb = &mut y[b * outputs * npos..(b + 1) * outputs * npos];
        for o in 0..outputs {
            let yo = &mut yb[o * npos..(o + 1) * npos];
            yo.iter_mut().for_each(|v| *v = bias[o]);
            let wo = &w[o * plen..(o + 1) * plen];
            for (r, &wr) in wo.iter().enumerate() {
                let cr = &col[r * npos..(r + 1) * npos];
                for (v, c) in yo.iter_mut().zip(cr) {
                    *v += wr * c;
                }
            }
        }
    }
    y
}

/// Returns `(dx, dw, dbias)`.
pub(crate) fn conv_backward(
    x: &[f64],
    dy: &[f64],
    batch: usize,
    g: &ConvGeom,
    w: &[f64],
    outputs: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let in_len = g.channels * g.height * g.width;
    let (plen, npos) = (g.patch_len(), g.positions());
    let mut col = vec![0.0; plen * npos];
    let mut dcol = vec![0.0; plen * npos];
    let mut dx = vec![0.0; batch * in_len];
    let mut dw = vec![0.0; outputs * plen];
    let mut db = vec![0.0; outputs];
    for b in 0..batch {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut col);
        dcol.iter_mut().for_each(|v| *v = 0.0);
        let dyb = &dy[b * outputs * npos..(b + 1) * outputs * npos];
        for o in 0..outputs {
            let dyo = &dyb[o * npos..(o + 1) * npos];
            db[o] += dyo.iter().sum::<f64>();
            let wo = &w[o * plen..(o + 1) * plen];
            let dwo = &mut dw[o * plen..(o + 1) * plen];
            for r in 0..plen {
                let cr = &col[r * npos..(r + 1) * npos];
                dwo[r] += cr.iter().zip(dyo).map(|(c, d)| c * d).sum::<f64>();
                let dcr = &mut dcol[r * npos..(r + 1) * npos];
                let wr = wo[r];
                for (dc, d) in dcr.iter_mut().zip(dyo) {
                    *dc += wr * d;
                }
            }
        }
        col2im_add(&dcol, g, &mut dx[b * in_len..(b + 1) * in_len]);
    }
    (dx, dw, db)
}

/// Max pooling with implicit `-inf` padding. Returns the output and, for
/// each output cell, the flat input index that won (first maximum on ties).
pub(crate) fn maxpool_forward(x: &[f64], batch: usize, g: &ConvGeom) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let n = batch * g.channels * ho * wo;
    let mut y = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for bc in 0..batch * g.channels {
        let base = bc * g.height * g.width;
        for oi in 0..ho {
            for oj in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ki in 0..g.kernel {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    for kj in 0..g.kernel {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj < 0 || jj >= g.width as isize {
                            continue;
                        }
                        let idx = base + ii as usize * g.width + jj as usize;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                y.push(best);
                arg.push(best_idx);
            }
        }
    }
    (y, arg)
}

pub(crate) fn maxpool_backward(dy: &[f64], argmax: &[usize], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&g, &i) in dy.iter().zip(argmax) {
        dx[i] += g;
    }
    dx
}

/// NaN passes through so divergence reaches the loss instead of being masked.
pub(crate) fn relu(x: &[f64], y: &mut [f64]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = if v <= 0.0 { 0.0 } else { v };
    }
}

/// Adds one sample's strictly-positive indicators to `counts`. Returns true
/// if any entry is NaN or infinite.
pub(crate) fn count_positive(x: &[f64], counts: &mut [u64]) -> bool {
    let mut non_finite = false;
    for (c, &v) in counts.iter_mut().zip(x) {
        // a count never exceeds the batch size; wrapping keeps the loop
        // vectorized when overflow checks are on
        *c = c.wrapping_add(u64::from(v > 0.0));
        // v - v is NaN exactly when v is NaN or infinite
        non_finite |= !(v - v == 0.0);
    }
    non_finite
}
