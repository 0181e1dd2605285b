//! Forward and backward passes of the encoder and the convolutional heads.

use super::ops::{self, AttnShape, ConvCache, ConvShape, LnCache};
use super::params::{ConvHead, ModelConfig, ModelParams};
use super::EncoderOutput;
use crate::corpus::FrameBatch;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

struct LayerCache<T> {
    x_in: Vec<T>,
    ln1: LnCache<T>,
    h: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    ln2: LnCache<T>,
    h2: Vec<T>,
    f1: Vec<T>,
    g: Vec<T>,
}

/// Activations retained by [`encoder_forward`] for [`encoder_backward`].
pub struct EncoderCache<T> {
    feat_ln: LnCache<T>,
    u: Vec<T>,
    masked: Vec<bool>,
    layers: Vec<LayerCache<T>>,
    final_ln: LnCache<T>,
    shape: AttnShape,
}

pub(crate) fn check_batch(cfg: &ModelConfig, batch: &FrameBatch, mask: Option<&[bool]>) -> Result<()> {
    if batch.dim != cfg.dim {
        return Err(Error::Contract(format!(
            "batch feature dim {} does not match model dim {}",
            batch.dim, cfg.dim
        )));
    }
    if batch.frames > cfg.max_frames {
        return Err(Error::Contract(format!(
            "{} frames exceed the positional table ({})",
            batch.frames, cfg.max_frames
        )));
    }
    if let Some(m) = mask {
        if m.len() != batch.tokens() {
            return Err(Error::Contract(format!(
                "mask covers {} positions, batch has {}",
                m.len(),
                batch.tokens()
            )));
        }
    }
    Ok(())
}

/// Runs the frontend projection and the `K` pre-norm transformer layers.
/// `per_layer[i]` is the residual stream after layer `i`; `final_out` is
/// the final layer norm applied to `per_layer[K-1]`.
pub fn encoder_forward<T: Scalar>(
    p: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &FrameBatch,
    mask: Option<&[bool]>,
) -> Result<(EncoderOutput<T>, EncoderCache<T>)> {
    check_batch(cfg, batch, mask)?;
    let d = cfg.dim;
    let n = batch.frames;
    let rows = batch.tokens();
    let eps = T::lit(cfg.layer_norm_eps);
    let z: Vec<T> = batch.features.iter().map(|&v| T::from_f32(v).unwrap()).collect();
    let (u, feat_ln) = ops::layer_norm(&z, d, &p.feat_ln_g.data, &p.feat_ln_b.data, eps);
    let mut x = ops::linear(&u, d, &p.proj_w.data, &p.proj_b.data, d);
    let masked = mask.map_or_else(|| vec![false; rows], <[bool]>::to_vec);
    for r in 0..rows {
        let row = &mut x[r * d..(r + 1) * d];
        if masked[r] {
            row.copy_from_slice(&p.mask_emb.data);
        }
        let pos = &p.pos_emb.data[(r % n) * d..(r % n + 1) * d];
        for (a, &b) in row.iter_mut().zip(pos) {
            *a = *a + b;
        }
    }
    let shape = AttnShape {
        batch: batch.batch,
        frames: n,
        heads: cfg.heads,
        head_dim: cfg.head_dim(),
    };
    let mut per_layer = Vec::with_capacity(cfg.layers);
    let mut caches = Vec::with_capacity(cfg.layers);
    for l in &p.layers {
        let x_in = x;
        let (h, ln1) = ops::layer_norm(&x_in, d, &l.ln1_g.data, &l.ln1_b.data, eps);
        let q = ops::linear(&h, d, &l.wq.data, &l.bq.data, d);
        let k = ops::linear(&h, d, &l.wk.data, &l.bk.data, d);
        let v = ops::linear(&h, d, &l.wv.data, &l.bv.data, d);
        let (attn, probs) = ops::attention(&q, &k, &v, shape, &batch.valid);
        let o = ops::linear(&attn, d, &l.wo.data, &l.bo.data, d);
        let mid: Vec<T> = x_in.iter().zip(&o).map(|(&a, &b)| a + b).collect();
        let (h2, ln2) = ops::layer_norm(&mid, d, &l.ln2_g.data, &l.ln2_b.data, eps);
        let f1 = ops::linear(&h2, d, &l.w1.data, &l.b1.data, cfg.ff_dim);
        let g = ops::gelu(&f1);
        let f2 = ops::linear(&g, cfg.ff_dim, &l.w2.data, &l.b2.data, d);
        x = mid.iter().zip(&f2).map(|(&a, &b)| a + b).collect();
        per_layer.push(x.clone());
        caches.push(LayerCache {
            x_in,
            ln1,
            h,
            q,
            k,
            v,
            probs,
            attn,
            ln2,
            h2,
            f1,
            g,
        });
    }
    let (final_out, final_ln) =
        ops::layer_norm(&x, d, &p.final_ln_g.data, &p.final_ln_b.data, eps);
    let out = EncoderOutput {
        batch: batch.batch,
        frames: n,
        dim: d,
        final_out,
        per_layer,
        valid: batch.valid.clone(),
        lengths: batch.lengths.clone(),
    };
    let cache = EncoderCache {
        feat_ln,
        u,
        masked,
        layers: caches,
        final_ln,
        shape,
    };
    Ok((out, cache))
}

/// Back-propagates `d_final` (gradient w.r.t. `final_out`) into `grads`.
pub fn encoder_backward<T: Scalar>(
    p: &ModelParams<T>,
    cfg: &ModelConfig,
    cache: &EncoderCache<T>,
    d_final: &[T],
    grads: &mut ModelParams<T>,
) {
    let d = cfg.dim;
    let ff = cfg.ff_dim;
    let n = cache.shape.frames;
    let mut dx = ops::layer_norm_backward(
        d_final,
        &cache.final_ln,
        d,
        &p.final_ln_g.data,
        &mut grads.final_ln_g.data,
        &mut grads.final_ln_b.data,
    );
    for (li, (l, c)) in p.layers.iter().zip(&cache.layers).enumerate().rev() {
        let gl = &mut grads.layers[li];
        // feed-forward branch
        let dg = ops::linear_backward(&dx, &c.g, ff, &l.w2.data, d, &mut gl.w2.data, &mut gl.b2.data, true)
            .expect("dx requested");
        let df1 = ops::gelu_backward(&dg, &c.f1);
        let dh2 = ops::linear_backward(&df1, &c.h2, d, &l.w1.data, ff, &mut gl.w1.data, &mut gl.b1.data, true)
            .expect("dx requested");
        let dmid_ffn =
            ops::layer_norm_backward(&dh2, &c.ln2, d, &l.ln2_g.data, &mut gl.ln2_g.data, &mut gl.ln2_b.data);
        let dmid: Vec<T> = dx.iter().zip(&dmid_ffn).map(|(&a, &b)| a + b).collect();
        // attention branch
        let dattn = ops::linear_backward(&dmid, &c.attn, d, &l.wo.data, d, &mut gl.wo.data, &mut gl.bo.data, true)
            .expect("dx requested");
        let (dq, dk, dv) = ops::attention_backward(&dattn, &c.q, &c.k, &c.v, &c.probs, cache.shape);
        let mut dh = ops::linear_backward(&dq, &c.h, d, &l.wq.data, d, &mut gl.wq.data, &mut gl.bq.data, true)
            .expect("dx requested");
        let dhk = ops::linear_backward(&dk, &c.h, d, &l.wk.data, d, &mut gl.wk.data, &mut gl.bk.data, true)
            .expect("dx requested");
        let dhv = ops::linear_backward(&dv, &c.h, d, &l.wv.data, d, &mut gl.wv.data, &mut gl.bv.data, true)
            .expect("dx requested");
        for ((a, &b), &c2) in dh.iter_mut().zip(&dhk).zip(&dhv) {
            *a = *a + b + c2;
        }
        let dx_attn =
            ops::layer_norm_backward(&dh, &c.ln1, d, &l.ln1_g.data, &mut gl.ln1_g.data, &mut gl.ln1_b.data);
        debug_assert_eq!(c.x_in.len(), dx.len());
        dx = dmid.iter().zip(&dx_attn).map(|(&a, &b)| a + b).collect();
    }
    // input embedding
    let rows = dx.len() / d;
    let mut dproj = dx;
    for r in 0..rows {
        let pos = r % n;
        for c in 0..d {
            let g = dproj[r * d + c];
            grads.pos_emb.data[pos * d + c] = grads.pos_emb.data[pos * d + c] + g;
            if cache.masked[r] {
                grads.mask_emb.data[c] = grads.mask_emb.data[c] + g;
            }
        }
        if cache.masked[r] {
            dproj[r * d..(r + 1) * d].fill(T::zero());
        }
    }
    let du = ops::linear_backward(
        &dproj,
        &cache.u,
        d,
        &p.proj_w.data,
        d,
        &mut grads.proj_w.data,
        &mut grads.proj_b.data,
        true,
    )
    .expect("dx requested");
    ops::layer_norm_backward(
        &du,
        &cache.feat_ln,
        d,
        &p.feat_ln_g.data,
        &mut grads.feat_ln_g.data,
        &mut grads.feat_ln_b.data,
    );
}

/// Activations retained by [`head_forward`].
pub struct HeadCache<T> {
    inputs: Vec<Vec<T>>,
    convs: Vec<ConvCache<T>>,
    pre: Vec<Vec<T>>,
    last: Vec<T>,
    batch: usize,
    frames: usize,
}

fn conv_shape(cfg: &ModelConfig, layer: usize, batch: usize, frames: usize) -> ConvShape {
    ConvShape {
        batch,
        frames,
        cin: if layer == 0 { cfg.dim } else { cfg.conv_dim },
        cout: cfg.conv_dim,
        kernel: cfg.conv_kernel,
        groups: cfg.conv_groups,
    }
}

/// `D` GELU convolutions over the frame axis, then a per-frame linear map.
pub fn head_forward<T: Scalar>(
    head: &ConvHead<T>,
    cfg: &ModelConfig,
    x: &[T],
    batch: usize,
    frames: usize,
    valid: &[bool],
) -> (Vec<T>, HeadCache<T>) {
    let mut cur = x.to_vec();
    let mut inputs = Vec::with_capacity(head.convs.len());
    let mut convs = Vec::with_capacity(head.convs.len());
    let mut pre = Vec::with_capacity(head.convs.len());
    for (i, c) in head.convs.iter().enumerate() {
        let s = conv_shape(cfg, i, batch, frames);
        let (y, cc) = ops::conv1d(&cur, s, &c.w.data, &c.b.data, valid);
        let a = ops::gelu(&y);
        inputs.push(std::mem::replace(&mut cur, a));
        convs.push(cc);
        pre.push(y);
    }
    let out_dim = head.out_b.len();
    let out = ops::linear(&cur, cfg.conv_dim, &head.out_w.data, &head.out_b.data, out_dim);
    (
        out,
        HeadCache {
            inputs,
            convs,
            pre,
            last: cur,
            batch,
            frames,
        },
    )
}

/// Returns the gradient w.r.t. the head input.
pub fn head_backward<T: Scalar>(
    head: &ConvHead<T>,
    cfg: &ModelConfig,
    cache: &HeadCache<T>,
    dout: &[T],
    grads: &mut ConvHead<T>,
    valid: &[bool],
) -> Vec<T> {
    let out_dim = head.out_b.len();
    let mut dx = ops::linear_backward(
        dout,
        &cache.last,
        cfg.conv_dim,
        &head.out_w.data,
        out_dim,
        &mut grads.out_w.data,
        &mut grads.out_b.data,
        true,
    )
    .expect("dx requested");
    for i in (0..head.convs.len()).rev() {
        let s = conv_shape(cfg, i, cache.batch, cache.frames);
        let dy = ops::gelu_backward(&dx, &cache.pre[i]);
        let gc = &mut grads.convs[i];
        dx = ops::conv1d_backward(
            &dy,
            &cache.convs[i],
            s,
            &head.convs[i].w.data,
            &mut gc.w.data,
            &mut gc.b.data,
            valid,
        );
        debug_assert_eq!(dx.len(), cache.inputs[i].len());
    }
    dx
}
