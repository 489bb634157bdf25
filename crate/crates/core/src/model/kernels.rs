//! Batched operator kernels. Buffers are `[batch][channel][row][col]`.
//!
//! Work is split per sample and reassembled in sample order, and every
//! reduction over the batch runs serially in sample order, so results do not
//! depend on the number of worker threads.

use super::graph::{window_out, Padding, Shape};
use super::scalar::{gemm, Scalar, View};

pub(crate) fn map_samples<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub input: Shape,
    pub output: Shape,
    pub kernel: [usize; 2],
    pub stride: usize,
    pub pad: [usize; 2],
}

impl ConvGeom {
    pub fn new(
        input: Shape,
        output: Shape,
        kernel: [usize; 2],
        stride: usize,
        padding: Padding,
    ) -> Self {
        let pad_h = window_out(input.h, kernel[0], stride, padding).map_or(0, |o| o.1);
        let pad_w = window_out(input.w, kernel[1], stride, padding).map_or(0, |o| o.1);
        Self {
            input,
            output,
            kernel,
            stride,
            pad: [pad_h, pad_w],
        }
    }

    fn patch(&self) -> usize {
        self.input.c * self.kernel[0] * self.kernel[1]
    }

    /// 1x1, stride 1, no padding: the input already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1] && self.stride == 1 && self.pad == [0, 0]
    }

    /// Source index for (kernel row, output row), or `None` inside padding.
    #[inline]
    fn src(&self, k: usize, o: usize, pad: usize, len: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(pad).filter(|&i| i < len)
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let (oh, ow) = (self.output.h, self.output.w);
        let p = oh * ow;
        let [kh, kw] = self.kernel;
        for c in 0..self.input.c {
            let plane = &x[c * self.input.plane()..(c + 1) * self.input.plane()];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = &mut cols[((c * kh + ky) * kw + kx) * p..][..p];
                    for oy in 0..oh {
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        match self.src(ky, oy, self.pad[0], self.input.h) {
                            None => dst.fill(T::zero()),
                            Some(iy) => {
                                let src_row = &plane[iy * self.input.w..(iy + 1) * self.input.w];
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d = self
                                        .src(kx, ox, self.pad[1], self.input.w)
                                        .map_or(T::zero(), |ix| src_row[ix]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let (oh, ow) = (self.output.h, self.output.w);
        let p = oh * ow;
        let [kh, kw] = self.kernel;
        for c in 0..self.input.c {
            let plane = &mut dx[c * self.input.plane()..(c + 1) * self.input.plane()];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = &cols[((c * kh + ky) * kw + kx) * p..][..p];
                    for oy in 0..oh {
                        let Some(iy) = self.src(ky, oy, self.pad[0], self.input.h) else {
                            continue;
                        };
                        for ox in 0..ow {
                            if let Some(ix) = self.src(kx, ox, self.pad[1], self.input.w) {
                                plane[iy * self.input.w + ix] =
                                    plane[iy * self.input.w + ix] + row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward; `weight` is `[filters, in_c, kh, kw]`.
pub(crate) fn conv_forward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (cin, cout) = (g.input.len(), g.output.len());
    let p = g.output.plane();
    let k = g.patch();
    let w = View::row_major(weight, g.output.c, k);
    let per_sample = map_samples(batch, |b| {
        let xs = &x[b * cin..(b + 1) * cin];
        let mut out = vec![T::zero(); cout];
        if let Some(bias) = bias {
            for (row, &bv) in out.chunks_exact_mut(p).zip(bias) {
                row.fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if g.is_pointwise() {
            gemm(T::one(), w, View::row_major(xs, k, p), beta, &mut out);
        } else {
            let mut cols = vec![T::zero(); k * p];
            g.im2col(xs, &mut cols);
            gemm(T::one(), w, View::row_major(&cols, k, p), beta, &mut out);
        }
        out
    });
    per_sample.concat()
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    weight: &[T],
    dy: &[T],
    want_dx: bool,
    want_params: bool,
    has_bias: bool,
) -> ConvGrads<T> {
    let (cin, cout) = (g.input.len(), g.output.len());
    let p = g.output.plane();
    let k = g.patch();
    let w = View::row_major(weight, g.output.c, k);
    let per_sample = map_samples(batch, |b| {
        let xs = &x[b * cin..(b + 1) * cin];
        let dys = View::row_major(&dy[b * cout..(b + 1) * cout], g.output.c, p);
        let cols_buf;
        let cols = if g.is_pointwise() {
            xs
        } else {
            let mut buf = vec![T::zero(); k * p];
            if want_params {
                g.im2col(xs, &mut buf);
            }
            cols_buf = buf;
            &cols_buf[..]
        };
        let dw = want_params.then(|| {
            let mut dw = vec![T::zero(); g.output.c * k];
            gemm(T::one(), dys, View::row_major(cols, k, p).t(), T::zero(), &mut dw);
            dw
        });
        let dx = want_dx.then(|| {
            if g.is_pointwise() {
                let mut dx = vec![T::zero(); cin];
                gemm(T::one(), w.t(), dys, T::zero(), &mut dx);
                dx
            } else {
                let mut dcols = vec![T::zero(); k * p];
                gemm(T::one(), w.t(), dys, T::zero(), &mut dcols);
                let mut dx = vec![T::zero(); cin];
                g.col2im(&dcols, &mut dx);
                dx
            }
        });
        (dx, dw)
    });
    let mut dx = want_dx.then(|| Vec::with_capacity(batch * cin));
    let mut dw: Option<Vec<T>> = None;
    for (sdx, sdw) in per_sample {
        if let (Some(acc), Some(s)) = (dx.as_mut(), sdx) {
            acc.extend_from_slice(&s);
        }
        if let Some(s) = sdw {
            match dw.as_mut() {
                None => dw = Some(s),
                Some(acc) => acc.iter_mut().zip(&s).for_each(|(a, v)| *a = *a + *v),
            }
        }
    }
    let db = (want_params && has_bias).then(|| {
        let mut db = vec![T::zero(); g.output.c];
        for b in 0..batch {
            for (c, acc) in db.iter_mut().enumerate() {
                let row = &dy[b * cout + c * p..b * cout + (c + 1) * p];
                *acc = *acc + row.iter().copied().sum::<T>();
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}

/// Per-channel statistics of a batch-norm forward pass.
#[derive(Debug, Clone)]
pub(crate) struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Whether `mean`/`var` came from the batch (training) or the moving
    /// averages (inference).
    pub from_batch: bool,
}

pub(crate) fn bn_batch_stats<T: Scalar>(shape: Shape, batch: usize, x: &[T]) -> (Vec<f64>, Vec<f64>) {
    let p = shape.plane();
    let n = (batch * p) as f64;
    let mut mean = vec![0.0; shape.c];
    let mut var = vec![0.0; shape.c];
    for c in 0..shape.c {
        let mut s = 0.0;
        for b in 0..batch {
            s += x[b * shape.len() + c * p..][..p].iter().map(|v| v.f64()).sum::<f64>();
        }
        let m = s / n;
        let mut q = 0.0;
        for b in 0..batch {
            q += x[b * shape.len() + c * p..][..p]
                .iter()
                .map(|v| (v.f64() - m).powi(2))
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = q / n;
    }
    (mean, var)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_forward<T: Scalar>(
    shape: Shape,
    batch: usize,
    x: &[T],
    gamma: &[T],
    beta: &[T],
    mean: Vec<f64>,
    var: Vec<f64>,
    epsilon: f64,
    from_batch: bool,
) -> (Vec<T>, BnStats) {
    let p = shape.plane();
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut y = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..shape.c {
            let scale = T::of(gamma[c].f64() * inv_std[c]);
            let shift = T::of(beta[c].f64() - gamma[c].f64() * inv_std[c] * mean[c]);
            let off = b * shape.len() + c * p;
            for (o, &v) in y[off..off + p].iter_mut().zip(&x[off..off + p]) {
                *o = v * scale + shift;
            }
        }
    }
    (
        y,
        BnStats {
            mean,
            var,
            inv_std,
            from_batch,
        },
    )
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn bn_backward<T: Scalar>(
    shape: Shape,
    batch: usize,
    x: &[T],
    gamma: &[T],
    stats: &BnStats,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let p = shape.plane();
    let n = (batch * p) as f64;
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); shape.c];
    let mut dbeta = vec![T::zero(); shape.c];
    for c in 0..shape.c {
        let (m, is) = (stats.mean[c], stats.inv_std[c]);
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for b in 0..batch {
            let off = b * shape.len() + c * p;
            for (&g, &v) in dy[off..off + p].iter().zip(&x[off..off + p]) {
                sum_dy += g.f64();
                sum_dy_xhat += g.f64() * (v.f64() - m) * is;
            }
        }
        dgamma[c] = T::of(sum_dy_xhat);
        dbeta[c] = T::of(sum_dy);
        let gs = gamma[c].f64() * is;
        for b in 0..batch {
            let off = b * shape.len() + c * p;
            for i in off..off + p {
                let g = dy[i].f64();
                dx[i] = T::of(if stats.from_batch {
                    let xhat = (x[i].f64() - m) * is;
                    gs * (g - sum_dy / n - xhat * sum_dy_xhat / n)
                } else {
                    gs * g
                });
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) struct PoolGeom {
    pub input: Shape,
    pub output: Shape,
    pub size: usize,
    pub stride: usize,
    pub pad: [usize; 2],
}

impl PoolGeom {
    pub fn new(input: Shape, output: Shape, size: usize, stride: usize, padding: Padding) -> Self {
        let pad_h = window_out(input.h, size, stride, padding).map_or(0, |o| o.1);
        let pad_w = window_out(input.w, size, stride, padding).map_or(0, |o| o.1);
        Self {
            input,
            output,
            size,
            stride,
            pad: [pad_h, pad_w],
        }
    }

    /// In-bounds input offsets (within one channel plane) covered by output
    /// position `(oy, ox)`, row-major.
    fn window(&self, oy: usize, ox: usize) -> impl Iterator<Item = usize> + '_ {
        let ys = (0..self.size).filter_map(move |k| {
            (oy * self.stride + k).checked_sub(self.pad[0]).filter(|&i| i < self.input.h)
        });
        ys.flat_map(move |iy| {
            (0..self.size).filter_map(move |k| {
                (ox * self.stride + k)
                    .checked_sub(self.pad[1])
                    .filter(|&i| i < self.input.w)
                    .map(|ix| iy * self.input.w + ix)
            })
        })
    }
}

/// Max-pool forward; also returns the winning input offset of each output.
/// Ties keep the first maximum in row-major window order.
pub(crate) fn maxpool_forward<T: Scalar>(g: &PoolGeom, batch: usize, x: &[T]) -> (Vec<T>, Vec<u32>) {
    let mut y = Vec::with_capacity(batch * g.output.len());
    let mut arg = Vec::with_capacity(batch * g.output.len());
    for b in 0..batch {
        for c in 0..g.input.c {
            let base = b * g.input.len() + c * g.input.plane();
            for oy in 0..g.output.h {
                for ox in 0..g.output.w {
                    let mut best = usize::MAX;
                    for i in g.window(oy, ox) {
                        if best == usize::MAX || x[base + i] > x[base + best] {
                            best = i;
                        }
                    }
                    y.push(x[base + best]);
                    arg.push((base + best) as u32);
                }
            }
        }
    }
    (y, arg)
}

pub(crate) fn maxpool_backward<T: Scalar>(input_len: usize, arg: &[u32], dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&a, &g) in arg.iter().zip(dy) {
        dx[a as usize] = dx[a as usize] + g;
    }
    dx
}

pub(crate) fn avgpool_forward<T: Scalar>(g: &PoolGeom, batch: usize, x: &[T]) -> Vec<T> {
    let mut y = Vec::with_capacity(batch * g.output.len());
    for b in 0..batch {
        for c in 0..g.input.c {
            let base = b * g.input.len() + c * g.input.plane();
            for oy in 0..g.output.h {
                for ox in 0..g.output.w {
                    let (mut s, mut n) = (T::zero(), 0usize);
                    for i in g.window(oy, ox) {
                        s = s + x[base + i];
                        n += 1;
                    }
                    y.push(s / T::of(n as f64));
                }
            }
        }
    }
    y
}

pub(crate) fn avgpool_backward<T: Scalar>(g: &PoolGeom, batch: usize, dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); batch * g.input.len()];
    let mut k = 0;
    for b in 0..batch {
        for c in 0..g.input.c {
            let base = b * g.input.len() + c * g.input.plane();
            for oy in 0..g.output.h {
                for ox in 0..g.output.w {
                    let n = g.window(oy, ox).count();
                    let share = dy[k] / T::of(n as f64);
                    for i in g.window(oy, ox) {
                        dx[base + i] = dx[base + i] + share;
                    }
                    k += 1;
                }
            }
        }
    }
    dx
}

/// Dense forward: `y[b] = W x[b] + bias`, `W` is `[units, fan_in]`.
pub(crate) fn dense_forward<T: Scalar>(
    batch: usize,
    fan_in: usize,
    units: usize,
    x: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let mut y: Vec<T> = (0..batch).flat_map(|_| bias.iter().copied()).collect();
    gemm(
        T::one(),
        View::row_major(x, batch, fan_in),
        View::row_major(weight, units, fan_in).t(),
        T::one(),
        &mut y,
    );
    y
}

type DenseGrads<T> = (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>);

/// Returns `(dx, dW, db)`; `dx` only when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward<T: Scalar>(
    batch: usize,
    fan_in: usize,
    units: usize,
    x: &[T],
    weight: &[T],
    dy: &[T],
    want_dx: bool,
    want_params: bool,
) -> DenseGrads<T> {
    let dyv = View::row_major(dy, batch, units);
    let dx = want_dx.then(|| {
        let mut dx = vec![T::zero(); batch * fan_in];
        gemm(T::one(), dyv, View::row_major(weight, units, fan_in), T::zero(), &mut dx);
        dx
    });
    let (dw, db) = if want_params {
        let mut dw = vec![T::zero(); units * fan_in];
        gemm(T::one(), dyv.t(), View::row_major(x, batch, fan_in), T::zero(), &mut dw);
        let mut db = vec![T::zero(); units];
        for row in dy.chunks_exact(units) {
            db.iter_mut().zip(row).for_each(|(a, v)| *a = *a + *v);
        }
        (Some(dw), Some(db))
    } else {
        (None, None)
    };
    (dx, dw, db)
}

/// Row-wise softmax, computed with the row maximum subtracted.
pub(crate) fn softmax<T: Scalar>(k: usize, logits: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).f64().exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| T::of(e / sum)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle for im2col + gemm.
    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; g.output.len()];
        let [kh, kw] = g.kernel;
        for co in 0..g.output.c {
            for oy in 0..g.output.h {
                for ox in 0..g.output.w {
                    let mut s = 0.0;
                    for ci in 0..g.input.c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad[0] as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad[1] as isize;
                                if iy < 0 || ix < 0 || iy >= g.input.h as isize || ix >= g.input.w as isize {
                                    continue;
                                }
                                s += x[ci * g.input.plane() + iy as usize * g.input.w + ix as usize]
                                    * w[((co * g.input.c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    y[co * g.output.plane() + oy * g.output.w + ox] = s;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let cases = [
            (Shape::new(2, 5, 6), 3, [3, 3], 1, Padding::Same),
            (Shape::new(3, 7, 7), 2, [3, 3], 2, Padding::Valid),
            (Shape::new(2, 4, 5), 3, [1, 3], 1, Padding::Same),
            (Shape::new(2, 6, 4), 2, [7, 1], 1, Padding::Same),
            (Shape::new(4, 3, 3), 5, [1, 1], 1, Padding::Same),
        ];
        for (input, filters, kernel, stride, padding) in cases {
            let oh = window_out(input.h, kernel[0], stride, padding).unwrap().0;
            let ow = window_out(input.w, kernel[1], stride, padding).unwrap().0;
            let g = ConvGeom::new(input, Shape::new(filters, oh, ow), kernel, stride, padding);
            let x: Vec<f64> = (0..input.len()).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..filters * input.c * kernel[0] * kernel[1])
                .map(|i| ((i * 5 % 9) as f64) * 0.25 - 1.0)
                .collect();
            let fast = conv_forward(&g, 1, &x, &w, None);
            assert_eq!(fast, naive_conv(&g, &x, &w), "{kernel:?} {padding:?}");
        }
    }

    #[test]
    fn pooling_windows() {
        // 1 channel 4x4, max 3x3 stride 1 same: corners see a 2x2 window.
        let input = Shape::new(1, 4, 4);
        let g = PoolGeom::new(input, input, 3, 1, Padding::Same);
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let avg = avgpool_forward(&g, 1, &x);
        assert_eq!(avg[0], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        let (mx, arg) = maxpool_forward(&g, 1, &x);
        assert_eq!(mx[0], 5.0);
        assert_eq!(arg[15], 15);
        let dx = maxpool_backward(16, &arg, &[1.0; 16]);
        assert_eq!(dx.iter().sum::<f64>(), 16.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax(3, &[1000.0f32, 1000.0, 1000.0, -3.0, 0.0, 3.0]);
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-7);
        assert!((p[3..].iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}
