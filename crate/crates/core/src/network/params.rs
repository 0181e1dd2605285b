//! Parameter containers for the student and teacher networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }
}

/// Which logical part of the network a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Frontend,
    Encoder,
    Predictor,
    Decoder,
}

impl ParamGroup {
    /// Groups shared by student and teacher (and averaged by EMA).
    pub fn is_shared(self) -> bool {
        !matches!(self, ParamGroup::Decoder)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Student,
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature, model and target dimension `d`.
    pub dim: usize,
    /// Transformer layers `K`.
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Convolution layers `D` in the decoder and the loss predictor.
    pub conv_layers: usize,
    pub conv_kernel: usize,
    pub conv_groups: usize,
    /// Channel width of the convolution stacks.
    pub conv_dim: usize,
    /// Size of the learned positional table.
    pub max_frames: usize,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 4,
            heads: 2,
            ff_dim: 128,
            conv_layers: 2,
            conv_kernel: 7,
            conv_groups: 1,
            conv_dim: 64,
            max_frames: 256,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Base-size geometry from the reference hyper-parameter table.
    /// Documentation only; far too slow for CPU training.
    pub fn large_profile() -> Self {
        Self {
            dim: 768,
            layers: 12,
            heads: 12,
            ff_dim: 3072,
            conv_layers: 4,
            conv_kernel: 7,
            conv_groups: 16,
            conv_dim: 384,
            max_frames: 2048,
            layer_norm_eps: 1e-5,
        }
    }

    /// Gradient-check geometry: d=8, K=2, D=1.
    pub fn tiny() -> Self {
        Self {
            dim: 8,
            layers: 2,
            heads: 2,
            ff_dim: 16,
            conv_layers: 1,
            conv_kernel: 7,
            conv_groups: 1,
            conv_dim: 8,
            max_frames: 32,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.layers == 0 || self.ff_dim == 0 || self.max_frames == 0 {
            return err("model dimensions must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return err(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.conv_layers == 0 || self.conv_kernel == 0 || self.conv_dim == 0 {
            return err("convolution stack dimensions must be positive".into());
        }
        if self.conv_groups == 0 || self.conv_dim % self.conv_groups != 0 {
            return err(format!(
                "conv_dim {} not divisible by conv_groups {}",
                self.conv_dim, self.conv_groups
            ));
        }
        if self.conv_groups > 1 && self.dim % self.conv_groups != 0 {
            return err(format!(
                "dim {} not divisible by conv_groups {}",
                self.dim, self.conv_groups
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

/// Grouped 1-D convolution; `w` is `[groups, kernel * in/groups, out/groups]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

/// `D` convolution layers followed by a per-frame linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvHead<T> {
    pub convs: Vec<ConvParams<T>>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub feat_ln_g: Tensor<T>,
    pub feat_ln_b: Tensor<T>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    pub mask_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_ln_g: Tensor<T>,
    pub final_ln_b: Tensor<T>,
    pub predictor: ConvHead<T>,
    /// Present only in the student.
    pub decoder: Option<ConvHead<T>>,
}

macro_rules! collect_slots {
    ($self:ident, $r:ident) => {{
        let mut out = Vec::new();
        for (leaf, t) in [
            ("ln_g", $r!($self.feat_ln_g)),
            ("ln_b", $r!($self.feat_ln_b)),
            ("proj_w", $r!($self.proj_w)),
            ("proj_b", $r!($self.proj_b)),
        ] {
            out.push((format!("frontend.{leaf}"), ParamGroup::Frontend, t));
        }
        out.push(("encoder.mask_emb".to_string(), ParamGroup::Encoder, $r!($self.mask_emb)));
        out.push(("encoder.pos_emb".to_string(), ParamGroup::Encoder, $r!($self.pos_emb)));
        for (i, l) in $r!(iter $self.layers).enumerate() {
            for (leaf, t) in [
                ("ln1_g", $r!(l.ln1_g)),
                ("ln1_b", $r!(l.ln1_b)),
                ("wq", $r!(l.wq)),
                ("bq", $r!(l.bq)),
                ("wk", $r!(l.wk)),
                ("bk", $r!(l.bk)),
                ("wv", $r!(l.wv)),
                ("bv", $r!(l.bv)),
                ("wo", $r!(l.wo)),
                ("bo", $r!(l.bo)),
                ("ln2_g", $r!(l.ln2_g)),
                ("ln2_b", $r!(l.ln2_b)),
                ("w1", $r!(l.w1)),
                ("b1", $r!(l.b1)),
                ("w2", $r!(l.w2)),
                ("b2", $r!(l.b2)),
            ] {
                out.push((format!("encoder.layers.{i}.{leaf}"), ParamGroup::Encoder, t));
            }
        }
        out.push(("encoder.final_ln_g".to_string(), ParamGroup::Encoder, $r!($self.final_ln_g)));
        out.push(("encoder.final_ln_b".to_string(), ParamGroup::Encoder, $r!($self.final_ln_b)));
        let heads = [
            ("predictor", ParamGroup::Predictor, Some($r!($self.predictor))),
            ("decoder", ParamGroup::Decoder, $r!(opt $self.decoder)),
        ];
        for (prefix, group, head) in heads {
            let Some(head) = head else { continue };
            for (i, c) in $r!(iter head.convs).enumerate() {
                out.push((format!("{prefix}.conv.{i}.w"), group, $r!(c.w)));
                out.push((format!("{prefix}.conv.{i}.b"), group, $r!(c.b)));
            }
            out.push((format!("{prefix}.out_w"), group, $r!(head.out_w)));
            out.push((format!("{prefix}.out_b"), group, $r!(head.out_b)));
        }
        out
    }};
}

macro_rules! by_ref {
    (iter $e:expr) => {
        $e.iter()
    };
    (opt $e:expr) => {
        $e.as_ref()
    };
    ($e:expr) => {
        &$e
    };
}

macro_rules! by_mut {
    (iter $e:expr) => {
        $e.iter_mut()
    };
    (opt $e:expr) => {
        $e.as_mut()
    };
    ($e:expr) => {
        &mut $e
    };
}

/// Named tensor slot: `(name, group, tensor)`.
pub type Slot<'a, T> = (String, ParamGroup, &'a Tensor<T>);
pub type SlotMut<'a, T> = (String, ParamGroup, &'a mut Tensor<T>);

impl<T: Scalar> ModelParams<T> {
    /// Every tensor in a fixed canonical order.
    pub fn slots(&self) -> Vec<Slot<'_, T>> {
        collect_slots!(self, by_ref)
    }

    pub fn slots_mut(&mut self) -> Vec<SlotMut<'_, T>> {
        collect_slots!(self, by_mut)
    }

    /// Zero-valued parameters with the given geometry.
    pub fn zeros(cfg: &ModelConfig, with_decoder: bool) -> Self {
        let d = cfg.dim;
        let z = |s: &[usize]| Tensor::zeros(s);
        let layer = || LayerParams {
            ln1_g: z(&[d]),
            ln1_b: z(&[d]),
            wq: z(&[d, d]),
            bq: z(&[d]),
            wk: z(&[d, d]),
            bk: z(&[d]),
            wv: z(&[d, d]),
            bv: z(&[d]),
            wo: z(&[d, d]),
            bo: z(&[d]),
            ln2_g: z(&[d]),
            ln2_b: z(&[d]),
            w1: z(&[d, cfg.ff_dim]),
            b1: z(&[cfg.ff_dim]),
            w2: z(&[cfg.ff_dim, d]),
            b2: z(&[d]),
        };
        let head = |out_dim: usize| {
            let g = cfg.conv_groups;
            let c = cfg.conv_dim;
            let convs = (0..cfg.conv_layers)
                .map(|i| {
                    let cin = if i == 0 { d } else { c };
                    ConvParams {
                        w: z(&[g, cfg.conv_kernel * cin / g, c / g]),
                        b: z(&[c]),
                    }
                })
                .collect();
            ConvHead {
                convs,
                out_w: z(&[c, out_dim]),
                out_b: z(&[out_dim]),
            }
        };
        Self {
            feat_ln_g: z(&[d]),
            feat_ln_b: z(&[d]),
            proj_w: z(&[d, d]),
            proj_b: z(&[d]),
            mask_emb: z(&[d]),
            pos_emb: z(&[cfg.max_frames, d]),
            layers: (0..cfg.layers).map(|_| layer()).collect(),
            final_ln_g: z(&[d]),
            final_ln_b: z(&[d]),
            predictor: head(1),
            decoder: with_decoder.then(|| head(d)),
        }
    }

    /// Seeded initialisation: truncated normal (|z| <= 2) scaled by
    /// `1/sqrt(fan_in)` for weight matrices and convolutions, `0.02` for
    /// the mask and position embeddings, ones for norm gains, zero biases.
    pub fn init(cfg: &ModelConfig, with_decoder: bool, seed: u64) -> Self {
        let mut p = Self::zeros(cfg, with_decoder);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, _, t) in p.slots_mut() {
            let leaf = name.rsplit('.').next().unwrap_or("");
            if leaf.ends_with("_g") {
                t.data.fill(T::one());
            } else if leaf == "mask_emb" || leaf == "pos_emb" {
                fill_trunc_normal(&mut t.data, 0.02, &mut rng);
            } else if t.shape.len() >= 2 {
                let fan_in = match t.shape.len() {
                    3 => t.shape[1],
                    _ => t.shape[0],
                };
                fill_trunc_normal(&mut t.data, 1.0 / (fan_in as f64).sqrt(), &mut rng);
            }
        }
        p
    }

    pub fn num_elements(&self) -> usize {
        self.slots().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// Concatenates every tensor in canonical order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_elements());
        for (_, _, t) in self.slots() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.num_elements(), "unflatten: length mismatch");
        let mut pos = 0;
        for (_, _, t) in self.slots_mut() {
            let n = t.len();
            t.data.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, _, t) in out.slots_mut() {
            t.data.fill(T::zero());
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let cast_head = |h: &ConvHead<T>| ConvHead {
            convs: h
                .convs
                .iter()
                .map(|c| ConvParams {
                    w: c.w.cast(),
                    b: c.b.cast(),
                })
                .collect(),
            out_w: h.out_w.cast(),
            out_b: h.out_b.cast(),
        };
        ModelParams {
            feat_ln_g: self.feat_ln_g.cast(),
            feat_ln_b: self.feat_ln_b.cast(),
            proj_w: self.proj_w.cast(),
            proj_b: self.proj_b.cast(),
            mask_emb: self.mask_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: l.ln1_g.cast(),
                    ln1_b: l.ln1_b.cast(),
                    wq: l.wq.cast(),
                    bq: l.bq.cast(),
                    wk: l.wk.cast(),
                    bk: l.bk.cast(),
                    wv: l.wv.cast(),
                    bv: l.bv.cast(),
                    wo: l.wo.cast(),
                    bo: l.bo.cast(),
                    ln2_g: l.ln2_g.cast(),
                    ln2_b: l.ln2_b.cast(),
                    w1: l.w1.cast(),
                    b1: l.b1.cast(),
                    w2: l.w2.cast(),
                    b2: l.b2.cast(),
                })
                .collect(),
            final_ln_g: self.final_ln_g.cast(),
            final_ln_b: self.final_ln_b.cast(),
            predictor: cast_head(&self.predictor),
            decoder: self.decoder.as_ref().map(cast_head),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slots()
            .iter()
            .all(|(_, _, t)| t.data.iter().all(|v| v.is_finite()))
    }

    /// FNV-1a over the raw bit patterns of the selected groups.
    pub fn fingerprint(&self, include: impl Fn(ParamGroup) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut buf = Vec::new();
        for (_, g, t) in self.slots() {
            if !include(g) {
                continue;
            }
            buf.clear();
            for v in &t.data {
                v.write_le(&mut buf);
            }
            for b in &buf {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

fn fill_trunc_normal<T: Scalar>(data: &mut [T], std: f64, rng: &mut ChaCha8Rng) {
    for v in data.iter_mut() {
        let z = loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z;
            }
        };
        *v = T::lit(z * std);
    }
}
