//! Context encoder, reconstruction decoder, loss predictor and target
//! construction for the teacher/student pair.

pub mod checkpoint;
pub mod frontend;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod params;

pub use frontend::{extract_features, FrontendConfig};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use params::{ModelConfig, ModelParams, ParamGroup, Role, Tensor};

use crate::corpus::FrameBatch;
use crate::error::{Error, Result};
use crate::losses::LossVector;
use crate::masking::MaskSet;
use crate::scalar::Scalar;

/// Parameters for one network role.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T = f32> {
    pub role: Role,
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Scalar> ModelState<T> {
    pub fn new_student(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, true, seed);
        Ok(Self {
            role: Role::Student,
            config,
            params,
        })
    }

    /// Teacher initialised as a copy of the student's shared groups.
    pub fn teacher_from(student: &ModelState<T>) -> Self {
        let mut params = student.params.clone();
        params.decoder = None;
        Self {
            role: Role::Teacher,
            config: student.config.clone(),
            params,
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            role: self.role,
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

/// Encoder activations for a batch.
#[derive(Clone, Debug)]
pub struct EncoderOutput<T = f32> {
    pub batch: usize,
    pub frames: usize,
    pub dim: usize,
    /// `final_norm(per_layer[K-1])`, `B x N x d`.
    pub final_out: Vec<T>,
    /// Residual stream after each transformer layer.
    pub per_layer: Vec<Vec<T>>,
    pub valid: Vec<bool>,
    pub lengths: Vec<usize>,
}

/// Encodes a batch; masked positions are replaced by the learned mask
/// embedding before the transformer stack. Padded keys get zero attention.
pub fn encode<T: Scalar>(
    state: &ModelState<T>,
    batch: &FrameBatch,
    mask: Option<&MaskSet>,
) -> Result<EncoderOutput<T>> {
    if let Some(m) = mask {
        m.check_against(batch)?;
    }
    let positions = mask.map(|m| m.adaptive.as_slice());
    model::encoder_forward(&state.params, &state.config, batch, positions).map(|(out, _)| out)
}

/// Per-frame predicted reconstruction loss; invalid frames hold `-inf`.
pub fn predict_frame_losses<T: Scalar>(
    state: &ModelState<T>,
    enc: &EncoderOutput<T>,
    valid: &[bool],
) -> Result<LossVector<T>> {
    check_encoder_output(state, enc)?;
    if valid.len() != enc.batch * enc.frames {
        return Err(Error::Contract("validity mask does not match encoder output".into()));
    }
    let (raw, _) = model::head_forward(
        &state.params.predictor,
        &state.config,
        &enc.final_out,
        enc.batch,
        enc.frames,
        valid,
    );
    Ok(LossVector::predicted(enc.batch, enc.frames, raw, valid))
}

/// Student-only reconstruction of the `B x N x d` targets.
pub fn decode_reconstruction<T: Scalar>(state: &ModelState<T>, enc: &EncoderOutput<T>) -> Result<Vec<T>> {
    check_encoder_output(state, enc)?;
    let decoder = match (state.role, state.params.decoder.as_ref()) {
        (Role::Student, Some(d)) => d,
        _ => {
            return Err(Error::Contract(
                "reconstruction decoder exists only in the student".into(),
            ))
        }
    };
    let (out, _) = model::head_forward(decoder, &state.config, &enc.final_out, enc.batch, enc.frames, &enc.valid);
    Ok(out)
}

fn check_encoder_output<T: Scalar>(state: &ModelState<T>, enc: &EncoderOutput<T>) -> Result<()> {
    if enc.dim != state.config.dim || enc.final_out.len() != enc.batch * enc.frames * enc.dim {
        return Err(Error::Contract("encoder output geometry mismatch".into()));
    }
    Ok(())
}

/// Epsilon of the target instance normalisation.
pub const TARGET_NORM_EPS: f64 = 1e-5;

/// Instance-normalises each of the top `layers_to_average` layer outputs
/// (per sample and channel, over valid frames) and averages them. Padded
/// positions are zero. The result is a plain value: nothing flows back.
pub fn build_targets<T: Scalar>(teacher_out: &EncoderOutput<T>, layers_to_average: usize) -> Result<Vec<T>> {
    let k = teacher_out.per_layer.len();
    if layers_to_average == 0 || layers_to_average > k {
        return Err(Error::Contract(format!(
            "layers_to_average must lie in 1..={k}, got {layers_to_average}"
        )));
    }
    let (b_sz, n, d) = (teacher_out.batch, teacher_out.frames, teacher_out.dim);
    let mut out = vec![T::zero(); b_sz * n * d];
    let eps = T::lit(TARGET_NORM_EPS);
    let weight = T::one() / T::from_usize(layers_to_average).unwrap();
    for layer in &teacher_out.per_layer[k - layers_to_average..] {
        for b in 0..b_sz {
            let len = teacher_out.lengths[b];
            if len == 0 {
                continue;
            }
            let inv_len = T::one() / T::from_usize(len).unwrap();
            for c in 0..d {
                let at = |t: usize| layer[(b * n + t) * d + c];
                let mean = (0..len).map(at).sum::<T>() * inv_len;
                let var = (0..len).map(|t| (at(t) - mean) * (at(t) - mean)).sum::<T>() * inv_len;
                let rs = T::one() / (var + eps).sqrt();
                for t in 0..len {
                    let slot = &mut out[(b * n + t) * d + c];
                    *slot = *slot + (at(t) - mean) * rs * weight;
                }
            }
        }
    }
    Ok(out)
}
