//! Student objective: masked encoding, reconstruction, loss prediction and
//! the joint loss, with its full backward pass.

use crate::corpus::{Features, FrameBatch};
use crate::error::{Error, Result};
use crate::losses::{
    auxiliary_loss, auxiliary_loss_backward, build_indicator, joint_loss, per_frame_reconstruction,
    reconstruction_backward, AuxLoss, LossVector, PairTargets, Reconstruction,
};
use crate::masking::{build_adaptive_mask, MaskSet, Progress, SeededRng};
use crate::network::model::{encoder_backward, encoder_forward, head_backward, head_forward};
use crate::network::{
    build_targets, encode, gradient_check, predict_frame_losses, GradCheckReport, ModelParams, ModelState, Role,
};
use crate::scalar::Scalar;
use crate::trainer::{derive_seed, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveOptions {
    pub alpha: f64,
    pub normalize_aux: bool,
    /// Stop the auxiliary gradient at the predictor input.
    pub detach_predictor: bool,
}

#[derive(Clone, Debug)]
pub struct ObjectiveOutput<T> {
    pub rec: Reconstruction<T>,
    pub aux: AuxLoss<T>,
    pub joint: T,
    pub indicator: PairTargets,
    pub predicted: LossVector<T>,
}

/// Evaluates the joint loss for the student on a masked batch, and its
/// gradient when `with_grads` is set. `indicator` overrides the pair
/// targets; the gradient check uses that to hold them fixed.
pub fn student_objective<T: Scalar>(
    student: &ModelState<T>,
    batch: &FrameBatch,
    mask: &MaskSet,
    targets: &[T],
    opts: ObjectiveOptions,
    indicator: Option<&PairTargets>,
    with_grads: bool,
) -> Result<(ObjectiveOutput<T>, Option<ModelParams<T>>)> {
    if student.role != Role::Student {
        return Err(Error::Contract("objective needs the student".into()));
    }
    mask.check_against(batch)?;
    let cfg = &student.config;
    let p = &student.params;
    let decoder = p
        .decoder
        .as_ref()
        .ok_or_else(|| Error::Contract("student has no decoder".into()))?;
    let (b, n, d) = (batch.batch, batch.frames, cfg.dim);
    let (enc, cache) = encoder_forward(p, cfg, batch, Some(&mask.adaptive))?;
    let (recon, dec_cache) = head_forward(decoder, cfg, &enc.final_out, b, n, &batch.valid);
    let rec = per_frame_reconstruction(&recon, targets, d, mask)?;
    let (raw, pred_cache) = head_forward(&p.predictor, cfg, &enc.final_out, b, n, &batch.valid);
    let predicted = LossVector::predicted(b, n, raw, &batch.valid);
    let indicator = match indicator {
        Some(i) => i.clone(),
        None => build_indicator(&rec.per_frame, mask)?,
    };
    let aux = auxiliary_loss(&predicted, &indicator, mask, opts.normalize_aux)?;
    let joint = joint_loss(rec.scalar, aux.value, T::lit(opts.alpha))?;
    let grads = if with_grads {
        let mut g = p.zeros_like();
        let d_recon = reconstruction_backward(&recon, targets, d, mask)?;
        let mut d_final = head_backward(
            decoder,
            cfg,
            &dec_cache,
            &d_recon,
            g.decoder.as_mut().expect("zeros_like keeps the decoder"),
            &batch.valid,
        );
        if opts.alpha != 0.0 && !aux.degenerate {
            let alpha = T::lit(opts.alpha);
            let d_pred: Vec<T> = auxiliary_loss_backward(&predicted, &indicator, mask, opts.normalize_aux)?
                .into_iter()
                .map(|v| v * alpha)
                .collect();
            let d_trunk = head_backward(&p.predictor, cfg, &pred_cache, &d_pred, &mut g.predictor, &batch.valid);
            if !opts.detach_predictor {
                for (a, v) in d_final.iter_mut().zip(d_trunk) {
                    *a = *a + v;
                }
            }
        }
        encoder_backward(p, cfg, &cache, &d_final, &mut g);
        Some(g)
    } else {
        None
    };
    Ok((
        ObjectiveOutput {
            rec,
            aux,
            joint,
            indicator,
            predicted,
        },
        grads,
    ))
}

/// Central-difference check of the joint-loss gradient in 64-bit mode.
/// The teacher targets, the mask and the pair indicator are computed once
/// at the base point and held fixed, so the objective is a smooth function
/// of the student parameters alone.
pub fn joint_gradient_check(
    student: &ModelState<f64>,
    batch: &FrameBatch,
    cfg: &TrainConfig,
    eps: f64,
    coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let teacher = ModelState::teacher_from(student);
    let t_out = encode(&teacher, batch, None)?;
    let predicted = predict_frame_losses(&teacher, &t_out, &batch.valid)?;
    let targets = build_targets(&t_out, cfg.effective_target_layers())?;
    let mut rng = SeededRng::new(derive_seed(&[seed, 0x6763]));
    let mask = build_adaptive_mask(
        &batch.valid,
        &batch.lengths,
        &predicted.cast::<f32>(),
        &cfg.mask,
        Progress {
            current: cfg.mask.total_epochs / 2,
            total: cfg.mask.total_epochs,
        },
        &mut rng,
    )?;
    let opts = cfg.objective_options();
    let (base, grads) = student_objective(student, batch, &mask, &targets, opts, None, true)?;
    let frozen = base.indicator;
    let analytic = grads.expect("requested").flatten();
    let mut probe = student.clone();
    let mut failure = None;
    let report = gradient_check(
        |x: &[f64]| {
            probe.params.unflatten(x);
            match student_objective(&probe, batch, &mask, &targets, opts, Some(&frozen), false) {
                Ok((o, _)) => o.joint,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &student.params.flatten(),
        &analytic,
        eps,
        coords,
        seed,
    );
    match failure {
        Some(e) => Err(e),
        None => report,
    }
}

/// Two-utterance batch of pseudo-random features (`frames` and
/// `frames * 3 / 4` long) for gradient checks.
pub fn gradcheck_batch(dim: usize, frames: usize, seed: u64) -> Result<FrameBatch> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let feats: Vec<Features> = [frames, (frames * 3 / 4).max(1)]
        .iter()
        .map(|&n| Features {
            frames: n,
            dim,
            data: (0..n * dim).map(|_| rng.gen_range(-1.5f32..1.5)).collect(),
        })
        .collect();
    FrameBatch::from_features(&feats.iter().collect::<Vec<_>>())
}
