//! Differentiable building blocks over row-major `[rows x cols]` buffers.
//! Each forward returns what its backward needs; backward functions
//! accumulate parameter gradients in place and return input gradients.

use crate::par;
use crate::scalar::{gemm, Op, Scalar};

pub struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Scalar>(
    x: &[T],
    d: usize,
    g: &[T],
    b: &[T],
    eps: T,
) -> (Vec<T>, LnCache<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::one() / T::from_usize(d).unwrap();
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (xr[c] - mean) * rs;
            xhat[r * d + c] = h;
            y[r * d + c] = h * g[c] + b[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

pub fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &LnCache<T>,
    d: usize,
    g: &[T],
    dg: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let rows = dy.len() / d;
    let mut dx = vec![T::zero(); dy.len()];
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for c in 0..d {
            dg[c] = dg[c] + dyr[c] * xh[c];
            db[c] = db[c] + dyr[c];
            dxhat[c] = dyr[c] * g[c];
            mean_dxhat = mean_dxhat + dxhat[c];
            mean_dxhat_xhat = mean_dxhat_xhat + dxhat[c] * xh[c];
        }
        mean_dxhat = mean_dxhat * inv_d;
        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
        let rs = cache.rstd[r];
        for c in 0..d {
            dx[r * d + c] = rs * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

/// `y = x w + b` with `w` stored `[din x dout]`.
pub fn linear<T: Scalar>(x: &[T], din: usize, w: &[T], b: &[T], dout: usize) -> Vec<T> {
    let rows = x.len() / din;
    let mut y = vec![T::zero(); rows * dout];
    for r in 0..rows {
        y[r * dout..(r + 1) * dout].copy_from_slice(b);
    }
    gemm(rows, din, dout, x, Op::N, w, Op::N, T::one(), &mut y);
    y
}

/// Accumulates `dw`, `db`; returns `dx` when requested.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    din: usize,
    w: &[T],
    dout: usize,
    dw: &mut [T],
    db: &mut [T],
    need_dx: bool,
) -> Option<Vec<T>> {
    let rows = dy.len() / dout;
    gemm(din, rows, dout, x, Op::T, dy, Op::N, T::one(), dw);
    for r in 0..rows {
        for c in 0..dout {
            db[c] = db[c] + dy[r * dout + c];
        }
    }
    need_dx.then(|| {
        let mut dx = vec![T::zero(); rows * din];
        gemm(rows, dout, din, dy, Op::N, w, Op::T, T::zero(), &mut dx);
        dx
    })
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (T::lit((2.0 / std::f64::consts::PI).sqrt()), T::lit(0.044715))
}

/// Tanh approximation of GELU, written as `x * sigmoid(2u)` with
/// `u = s (x + c x^3)`, which equals `x (1 + tanh u) / 2` and avoids the
/// much slower `tanh`.
pub fn gelu<T: Scalar>(x: &[T]) -> Vec<T> {
    let (s, c) = gelu_consts::<T>();
    let two = T::lit(2.0);
    x.iter()
        .map(|&v| v / (T::one() + (-two * s * (v + c * v * v * v)).exp()))
        .collect()
}

pub fn gelu_backward<T: Scalar>(dy: &[T], x: &[T]) -> Vec<T> {
    let (s, c) = gelu_consts::<T>();
    let two = T::lit(2.0);
    let three = T::lit(3.0);
    dy.iter()
        .zip(x)
        .map(|(&g, &v)| {
            let sig = T::one() / (T::one() + (-two * s * (v + c * v * v * v)).exp());
            let du = two * s * (T::one() + three * c * v * v);
            g * (sig + v * sig * (T::one() - sig) * du)
        })
        .collect()
}

fn gather_head<T: Scalar>(src: &[T], b: usize, h: usize, frames: usize, d: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(frames * dh);
    for n in 0..frames {
        let row = (b * frames + n) * d + h * dh;
        out.extend_from_slice(&src[row..row + dh]);
    }
    out
}

fn scatter_head<T: Scalar>(dst: &mut [T], part: &[T], b: usize, h: usize, frames: usize, d: usize, dh: usize) {
    for n in 0..frames {
        let row = (b * frames + n) * d + h * dh;
        dst[row..row + dh].copy_from_slice(&part[n * dh..(n + 1) * dh]);
    }
}

/// Geometry shared by the attention forward and backward passes.
#[derive(Clone, Copy, Debug)]
pub struct AttnShape {
    pub batch: usize,
    pub frames: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnShape {
    fn dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Multi-head scaled dot-product attention. Keys at invalid positions get
/// zero weight. Returns the attended values and the `[B, H, N, N]`
/// attention probabilities.
pub fn attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    shape: AttnShape,
    valid: &[bool],
) -> (Vec<T>, Vec<T>) {
    let AttnShape {
        batch,
        frames: n,
        heads,
        head_dim: dh,
    } = shape;
    let d = shape.dim();
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let parts = par::map_range(batch * heads, |bh| {
        let (b, h) = (bh / heads, bh % heads);
        let qh = gather_head(q, b, h, n, d, dh);
        let kh = gather_head(k, b, h, n, d, dh);
        let vh = gather_head(v, b, h, n, d, dh);
        let mut p = vec![T::zero(); n * n];
        gemm(n, dh, n, &qh, Op::N, &kh, Op::T, T::zero(), &mut p);
        let row_valid = &valid[b * n..(b + 1) * n];
        for i in 0..n {
            let row = &mut p[i * n..(i + 1) * n];
            let mut max = T::neg_infinity();
            for j in 0..n {
                if row_valid[j] {
                    row[j] = row[j] * scale;
                    max = max.max(row[j]);
                }
            }
            let mut total = T::zero();
            for j in 0..n {
                if row_valid[j] {
                    row[j] = (row[j] - max).exp();
                    total = total + row[j];
                } else {
                    row[j] = T::zero();
                }
            }
            if total > T::zero() {
                for x in row.iter_mut() {
                    *x = *x / total;
                }
            }
        }
        let mut o = vec![T::zero(); n * dh];
        gemm(n, n, dh, &p, Op::N, &vh, Op::N, T::zero(), &mut o);
        (p, o)
    });
    let mut out = vec![T::zero(); batch * n * d];
    let mut probs = Vec::with_capacity(batch * heads * n * n);
    for (bh, (p, o)) in parts.into_iter().enumerate() {
        scatter_head(&mut out, &o, bh / heads, bh % heads, n, d, dh);
        probs.extend_from_slice(&p);
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
pub fn attention_backward<T: Scalar>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    shape: AttnShape,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnShape {
        batch,
        frames: n,
        heads,
        head_dim: dh,
    } = shape;
    let d = shape.dim();
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let parts = par::map_range(batch * heads, |bh| {
        let (b, h) = (bh / heads, bh % heads);
        let p = &probs[bh * n * n..(bh + 1) * n * n];
        let qh = gather_head(q, b, h, n, d, dh);
        let kh = gather_head(k, b, h, n, d, dh);
        let vh = gather_head(v, b, h, n, d, dh);
        let doh = gather_head(dout, b, h, n, d, dh);
        let mut dv = vec![T::zero(); n * dh];
        gemm(n, n, dh, p, Op::T, &doh, Op::N, T::zero(), &mut dv);
        let mut dp = vec![T::zero(); n * n];
        gemm(n, dh, n, &doh, Op::N, &vh, Op::T, T::zero(), &mut dp);
        for i in 0..n {
            let pr = &p[i * n..(i + 1) * n];
            let dr = &mut dp[i * n..(i + 1) * n];
            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
            for j in 0..n {
                dr[j] = pr[j] * (dr[j] - dot) * scale;
            }
        }
        let mut dq = vec![T::zero(); n * dh];
        gemm(n, n, dh, &dp, Op::N, &kh, Op::N, T::zero(), &mut dq);
        let mut dk = vec![T::zero(); n * dh];
        gemm(n, n, dh, &dp, Op::T, &qh, Op::N, T::zero(), &mut dk);
        (dq, dk, dv)
    });
    let mut dq = vec![T::zero(); batch * n * d];
    let mut dk = vec![T::zero(); batch * n * d];
    let mut dv = vec![T::zero(); batch * n * d];
    for (bh, (a, b_, c)) in parts.into_iter().enumerate() {
        let (b, h) = (bh / heads, bh % heads);
        scatter_head(&mut dq, &a, b, h, n, d, dh);
        scatter_head(&mut dk, &b_, b, h, n, d, dh);
        scatter_head(&mut dv, &c, b, h, n, d, dh);
    }
    (dq, dk, dv)
}

/// Geometry of a same-padded grouped convolution over the frame axis.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub batch: usize,
    pub frames: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub groups: usize,
}

impl ConvShape {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn col_width(&self) -> usize {
        self.kernel * self.cin_g()
    }
}

/// Per-group im2col buffers kept for the backward pass.
pub struct ConvCache<T> {
    pub cols: Vec<Vec<T>>,
}

fn im2col<T: Scalar>(x: &[T], s: ConvShape, g: usize, valid: &[bool]) -> Vec<T> {
    let (n, cin_g, w) = (s.frames, s.cin_g(), s.col_width());
    let pad = s.kernel / 2;
    let mut cols = vec![T::zero(); s.batch * n * w];
    for b in 0..s.batch {
        for t in 0..n {
            let dst = &mut cols[(b * n + t) * w..(b * n + t + 1) * w];
            for tap in 0..s.kernel {
                let src_t = t as isize + tap as isize - pad as isize;
                if src_t < 0 || src_t >= n as isize {
                    continue;
                }
                let src_row = b * n + src_t as usize;
                if !valid[src_row] {
                    continue;
                }
                let src = &x[src_row * s.cin + g * cin_g..src_row * s.cin + (g + 1) * cin_g];
                dst[tap * cin_g..(tap + 1) * cin_g].copy_from_slice(src);
            }
        }
    }
    cols
}

/// Same-padded convolution over frames. Inputs at invalid frames are
/// treated as zero, so padding never leaks into valid outputs.
/// `w` is `[groups, kernel * cin/groups, cout/groups]`.
pub fn conv1d<T: Scalar>(
    x: &[T],
    s: ConvShape,
    w: &[T],
    bias: &[T],
    valid: &[bool],
) -> (Vec<T>, ConvCache<T>) {
    let rows = s.batch * s.frames;
    let (cw, cout_g) = (s.col_width(), s.cout_g());
    let mut y = vec![T::zero(); rows * s.cout];
    let mut cols_all = Vec::with_capacity(s.groups);
    for g in 0..s.groups {
        let cols = im2col(x, s, g, valid);
        let wg = &w[g * cw * cout_g..(g + 1) * cw * cout_g];
        if s.groups == 1 {
            for r in 0..rows {
                y[r * s.cout..(r + 1) * s.cout].copy_from_slice(bias);
            }
            gemm(rows, cw, cout_g, &cols, Op::N, wg, Op::N, T::one(), &mut y);
        } else {
            let mut yg = vec![T::zero(); rows * cout_g];
            gemm(rows, cw, cout_g, &cols, Op::N, wg, Op::N, T::zero(), &mut yg);
            for r in 0..rows {
                for c in 0..cout_g {
                    let oc = g * cout_g + c;
                    y[r * s.cout + oc] = yg[r * cout_g + c] + bias[oc];
                }
            }
        }
        cols_all.push(cols);
    }
    (y, ConvCache { cols: cols_all })
}

pub fn conv1d_backward<T: Scalar>(
    dy: &[T],
    cache: &ConvCache<T>,
    s: ConvShape,
    w: &[T],
    dw: &mut [T],
    db: &mut [T],
    valid: &[bool],
) -> Vec<T> {
    let rows = s.batch * s.frames;
    let (cw, cin_g, cout_g) = (s.col_width(), s.cin_g(), s.cout_g());
    let pad = s.kernel / 2;
    let n = s.frames;
    for r in 0..rows {
        for c in 0..s.cout {
            db[c] = db[c] + dy[r * s.cout + c];
        }
    }
    let mut dx = vec![T::zero(); rows * s.cin];
    for g in 0..s.groups {
        let dyg: Vec<T> = if s.groups == 1 {
            dy.to_vec()
        } else {
            let mut out = Vec::with_capacity(rows * cout_g);
            for r in 0..rows {
                out.extend_from_slice(&dy[r * s.cout + g * cout_g..r * s.cout + (g + 1) * cout_g]);
            }
            out
        };
        let wg = &w[g * cw * cout_g..(g + 1) * cw * cout_g];
        let dwg = &mut dw[g * cw * cout_g..(g + 1) * cw * cout_g];
        gemm(cw, rows, cout_g, &cache.cols[g], Op::T, &dyg, Op::N, T::one(), dwg);
        let mut dcols = vec![T::zero(); rows * cw];
        gemm(rows, cout_g, cw, &dyg, Op::N, wg, Op::T, T::zero(), &mut dcols);
        for b in 0..s.batch {
            for t in 0..n {
                let src = &dcols[(b * n + t) * cw..(b * n + t + 1) * cw];
                for tap in 0..s.kernel {
                    let dst_t = t as isize + tap as isize - pad as isize;
                    if dst_t < 0 || dst_t >= n as isize {
                        continue;
                    }
                    let dst_row = b * n + dst_t as usize;
                    if !valid[dst_row] {
                        continue;
                    }
                    let dst = &mut dx[dst_row * s.cin + g * cin_g..dst_row * s.cin + (g + 1) * cin_g];
                    for (d, &v) in dst.iter_mut().zip(&src[tap * cin_g..(tap + 1) * cin_g]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) {
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] += eps;
            let mut xm = x.to_vec();
            xm[i] -= eps;
            let num = (f(&xp) - f(&xm)) / (2.0 * eps);
            assert!(
                (num - analytic[i]).abs() <= 1e-6 * (1.0 + num.abs()),
                "coord {i}: numeric {num} analytic {}",
                analytic[i]
            );
        }
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let v = (i as u64 * 2654435761 + seed * 97) % 1000;
                v as f64 / 500.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn layer_norm_gradient() {
        let d = 5;
        let x = pseudo(15, 1);
        let g = pseudo(d, 2);
        let b = pseudo(d, 3);
        let up = pseudo(15, 4);
        let loss = |x: &[f64]| {
            let (y, _) = layer_norm(x, d, &g, &b, 1e-5);
            y.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = layer_norm(&x, d, &g, &b, 1e-5);
        let mut dg = vec![0.0; d];
        let mut db = vec![0.0; d];
        let dx = layer_norm_backward(&up, &cache, d, &g, &mut dg, &mut db);
        fd_check(loss, &x, &dx);
    }

    #[test]
    fn gelu_gradient() {
        let x = pseudo(20, 5).iter().map(|v| v * 3.0).collect::<Vec<_>>();
        let up = vec![1.0; 20];
        let dx = gelu_backward(&up, &x);
        fd_check(|x| gelu(x).iter().sum(), &x, &dx);
        assert_eq!(gelu(&[0.0f64])[0], 0.0);
    }

    #[test]
    fn attention_gradient_and_masking() {
        let shape = AttnShape {
            batch: 2,
            frames: 4,
            heads: 2,
            head_dim: 3,
        };
        let len = 2 * 4 * 6;
        let q = pseudo(len, 1);
        let k = pseudo(len, 2);
        let v = pseudo(len, 3);
        let up = pseudo(len, 4);
        let valid = vec![true, true, true, true, true, true, false, false];
        let (_, probs) = attention(&q, &k, &v, shape, &valid);
        for bh in 2..4 {
            for i in 0..4 {
                assert_eq!(probs[bh * 16 + i * 4 + 2], 0.0);
                assert_eq!(probs[bh * 16 + i * 4 + 3], 0.0);
            }
        }
        let (dq, dk, dv) = attention_backward(&up, &q, &k, &v, &probs, shape);
        let dot = |o: Vec<f64>| o.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
        fd_check(|x| dot(attention(x, &k, &v, shape, &valid).0), &q, &dq);
        fd_check(|x| dot(attention(&q, x, &v, shape, &valid).0), &k, &dk);
        fd_check(|x| dot(attention(&q, &k, x, shape, &valid).0), &v, &dv);
    }

    #[test]
    fn conv_gradient_with_groups() {
        let s = ConvShape {
            batch: 2,
            frames: 6,
            cin: 4,
            cout: 6,
            kernel: 3,
            groups: 2,
        };
        let x = pseudo(2 * 6 * 4, 1);
        let w = pseudo(2 * 3 * 2 * 3, 2);
        let b = pseudo(6, 3);
        let up = pseudo(2 * 6 * 6, 4);
        let mut valid = vec![true; 12];
        valid[10] = false;
        valid[11] = false;
        let dot = |o: Vec<f64>| o.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
        let (_, cache) = conv1d(&x, s, &w, &b, &valid);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; b.len()];
        let dx = conv1d_backward(&up, &cache, s, &w, &mut dw, &mut db, &valid);
        fd_check(|x| dot(conv1d(x, s, &w, &b, &valid).0), &x, &dx);
        fd_check(|w| dot(conv1d(&x, s, w, &b, &valid).0), &w, &dw);
        fd_check(|b| dot(conv1d(&x, s, &w, b, &valid).0), &b, &db);
    }

    #[test]
    fn conv_receptive_field() {
        let s = ConvShape {
            batch: 1,
            frames: 12,
            cin: 2,
            cout: 2,
            kernel: 7,
            groups: 1,
        };
        let x = pseudo(24, 1);
        let w = pseudo(7 * 2 * 2, 2);
        let b = vec![0.0; 2];
        let valid = vec![true; 12];
        let (y0, _) = conv1d(&x, s, &w, &b, &valid);
        let mut x1 = x.clone();
        x1[0] += 1.0;
        x1[1] -= 2.0;
        let (y1, _) = conv1d(&x1, s, &w, &b, &valid);
        for t in 0..12 {
            let changed = y0[t * 2..t * 2 + 2] != y1[t * 2..t * 2 + 2];
            assert_eq!(changed, t <= 3, "frame {t}");
        }
    }

    #[test]
    fn linear_gradient() {
        let x = pseudo(12, 1);
        let w = pseudo(12, 2);
        let b = pseudo(3, 3);
        let up = pseudo(9, 4);
        let dot = |o: Vec<f64>| o.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
        let mut dw = vec![0.0; 12];
        let mut db = vec![0.0; 3];
        let dx = linear_backward(&up, &x, 4, &w, 3, &mut dw, &mut db, true).unwrap();
        fd_check(|x| dot(linear(x, 4, &w, &b, 3)), &x, &dx);
        fd_check(|w| dot(linear(&x, 4, w, &b, 3)), &w, &dw);
    }
}
