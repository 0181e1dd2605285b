//! Reconstruction loss, pairwise ranking targets and the auxiliary
//! ranking loss that trains the loss predictor.

use crate::error::{Error, Result};
use crate::masking::MaskSet;
use crate::scalar::Scalar;

/// Per-frame scalar losses aligned to a `B x N` batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossVector<T = f32> {
    pub batch: usize,
    pub frames: usize,
    pub values: Vec<T>,
    /// Masked frames for actual losses, valid frames for predicted ones.
    pub defined: Vec<bool>,
}

impl<T: Scalar> LossVector<T> {
    /// Predictor output; undefined positions carry `-inf`.
    pub fn predicted(batch: usize, frames: usize, mut raw: Vec<T>, valid: &[bool]) -> Self {
        assert_eq!(raw.len(), batch * frames, "prediction geometry");
        for (v, ok) in raw.iter_mut().zip(valid) {
            if !ok {
                *v = T::neg_infinity();
            }
        }
        Self {
            batch,
            frames,
            values: raw,
            defined: valid.to_vec(),
        }
    }

    pub fn row(&self, b: usize) -> &[T] {
        &self.values[b * self.frames..(b + 1) * self.frames]
    }

    pub fn cast<U: Scalar>(&self) -> LossVector<U> {
        LossVector {
            batch: self.batch,
            frames: self.frames,
            values: self.values.iter().map(|v| U::from(*v).unwrap()).collect(),
            defined: self.defined.clone(),
        }
    }

    /// Defined values, row-major.
    pub fn defined_values(&self) -> impl Iterator<Item = T> + '_ {
        self.values.iter().zip(&self.defined).filter(|(_, d)| **d).map(|(v, _)| *v)
    }

    /// Mean of the defined values, `None` when nothing is defined.
    pub fn mean_defined(&self) -> Option<f64> {
        let (sum, n) = self
            .defined_values()
            .fold((0.0f64, 0usize), |(s, n), v| (s + v.to_f64().unwrap(), n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

/// Per-frame losses plus the scalar that is backpropagated.
#[derive(Clone, Debug)]
pub struct Reconstruction<T = f32> {
    pub per_frame: LossVector<T>,
    pub scalar: T,
    /// Set when the mask was empty and the scalar is a placeholder zero.
    pub empty: bool,
}

fn check_dense<T>(name: &str, x: &[T], mask: &MaskSet, dim: usize) -> Result<()> {
    if x.len() != mask.batch * mask.frames * dim {
        return Err(Error::Contract(format!(
            "{name} has {} values, expected {}x{}x{dim}",
            x.len(),
            mask.batch,
            mask.frames
        )));
    }
    Ok(())
}

/// Mean squared error over the feature dimension at each masked frame; the
/// scalar is the mean over masked frames.
pub fn per_frame_reconstruction<T: Scalar>(
    recon: &[T],
    targets: &[T],
    dim: usize,
    mask: &MaskSet,
) -> Result<Reconstruction<T>> {
    check_dense("reconstruction", recon, mask, dim)?;
    check_dense("targets", targets, mask, dim)?;
    let inv_d = T::one() / T::from_usize(dim).unwrap();
    let values: Vec<T> = (0..mask.batch * mask.frames)
        .map(|t| {
            if !mask.adaptive[t] {
                return T::zero();
            }
            let r = &recon[t * dim..(t + 1) * dim];
            let g = &targets[t * dim..(t + 1) * dim];
            r.iter().zip(g).map(|(a, b)| (*a - *b) * (*a - *b)).sum::<T>() * inv_d
        })
        .collect();
    let per_frame = LossVector {
        batch: mask.batch,
        frames: mask.frames,
        values,
        defined: mask.adaptive.clone(),
    };
    let count = mask.count();
    let scalar = if count == 0 {
        T::zero()
    } else {
        per_frame.defined_values().sum::<T>() / T::from_usize(count).unwrap()
    };
    Ok(Reconstruction {
        per_frame,
        scalar,
        empty: count == 0,
    })
}

/// Gradient of the scalar reconstruction loss with respect to `recon`.
pub fn reconstruction_backward<T: Scalar>(recon: &[T], targets: &[T], dim: usize, mask: &MaskSet) -> Result<Vec<T>> {
    check_dense("reconstruction", recon, mask, dim)?;
    check_dense("targets", targets, mask, dim)?;
    let mut grad = vec![T::zero(); recon.len()];
    let count = mask.count();
    if count == 0 {
        return Ok(grad);
    }
    let scale = T::lit(2.0) / T::from_usize(dim * count).unwrap();
    for t in (0..mask.adaptive.len()).filter(|&t| mask.adaptive[t]) {
        for c in t * dim..(t + 1) * dim {
            grad[c] = (recon[c] - targets[c]) * scale;
        }
    }
    Ok(grad)
}

/// Ordered-pair indicators for one row, over its masked frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowPairs {
    /// Masked frame indices, ascending.
    pub indices: Vec<usize>,
    /// `m x m`; entry `(a, c)` is 1 when frame `indices[a]` has strictly
    /// larger actual loss than frame `indices[c]`.
    pub indicator: Vec<bool>,
}

impl RowPairs {
    pub fn get(&self, a: usize, c: usize) -> bool {
        self.indicator[a * self.indices.len() + c]
    }

    pub fn pair_count(&self) -> usize {
        let m = self.indices.len();
        m * m.saturating_sub(1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairTargets {
    pub batch: usize,
    pub frames: usize,
    pub rows: Vec<RowPairs>,
}

impl PairTargets {
    pub fn pair_count(&self) -> usize {
        self.rows.iter().map(RowPairs::pair_count).sum()
    }

    /// Indicator by frame index; `None` unless both frames are masked.
    pub fn lookup(&self, b: usize, i: usize, j: usize) -> Option<bool> {
        let row = &self.rows[b];
        let a = row.indices.binary_search(&i).ok()?;
        let c = row.indices.binary_search(&j).ok()?;
        Some(row.get(a, c))
    }
}

/// Strict-inequality indicator over ordered masked pairs. The values are
/// copied, so nothing downstream depends on them.
pub fn build_indicator<T: Scalar>(actual: &LossVector<T>, mask: &MaskSet) -> Result<PairTargets> {
    if actual.batch != mask.batch || actual.frames != mask.frames {
        return Err(Error::Contract("actual losses not aligned with mask".into()));
    }
    let rows = (0..mask.batch)
        .map(|b| {
            let indices: Vec<usize> = (0..mask.frames).filter(|&n| mask.row(b)[n]).collect();
            let vals: Vec<T> = indices.iter().map(|&n| actual.row(b)[n]).collect();
            let m = indices.len();
            let mut indicator = vec![false; m * m];
            for a in 0..m {
                for c in 0..m {
                    indicator[a * m + c] = vals[a] > vals[c];
                }
            }
            RowPairs { indices, indicator }
        })
        .collect();
    Ok(PairTargets {
        batch: mask.batch,
        frames: mask.frames,
        rows,
    })
}

/// Logistic function in the branch form that never overflows.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `S_ij = sigmoid(p_i - p_j)` for frames `i`, `j` of row `b`.
pub fn pairwise_sigmoid<T: Scalar>(predicted: &LossVector<T>, b: usize, i: usize, j: usize) -> Result<T> {
    let at = |n: usize| -> Result<T> {
        let k = b * predicted.frames + n;
        match predicted.defined.get(k) {
            Some(true) if n < predicted.frames => Ok(predicted.values[k]),
            _ => Err(Error::Contract(format!("prediction ({b}, {n}) is undefined"))),
        }
    };
    Ok(sigmoid(at(i)? - at(j)?))
}

/// Binary cross-entropy of `sigmoid(x)` against `target`, in logit space.
pub fn pair_bce<T: Scalar>(x: T, target: bool) -> T {
    let i = if target { T::one() } else { T::zero() };
    x.max(T::zero()) - x * i + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuxLoss<T = f32> {
    pub value: T,
    pub pairs: usize,
    /// Set when no row had two masked frames.
    pub degenerate: bool,
}

fn check_aux_inputs<T>(predicted: &LossVector<T>, targets: &PairTargets, mask: &MaskSet) -> Result<()> {
    if predicted.batch != targets.batch
        || predicted.frames != targets.frames
        || targets.batch != mask.batch
        || targets.frames != mask.frames
    {
        return Err(Error::Contract("auxiliary loss inputs disagree on geometry".into()));
    }
    for (b, row) in targets.rows.iter().enumerate() {
        let masked = mask.row(b).iter().filter(|m| **m).count();
        if masked != row.indices.len() {
            return Err(Error::Contract(format!("row {b}: pair targets built from a different mask")));
        }
        if let Some(&n) = row.indices.iter().find(|&&n| !predicted.defined[b * predicted.frames + n]) {
            return Err(Error::Contract(format!("prediction ({b}, {n}) undefined at a masked frame")));
        }
    }
    Ok(())
}

fn aux_denominator(targets: &PairTargets, normalize: bool) -> usize {
    if normalize {
        targets.pair_count()
    } else {
        targets.batch
    }
}

/// Pairwise ranking loss summed over ordered masked pairs of each row.
/// Unnormalised, rows are averaged; normalised, the batch total is divided
/// by the total pair count.
pub fn auxiliary_loss<T: Scalar>(
    predicted: &LossVector<T>,
    targets: &PairTargets,
    mask: &MaskSet,
    normalize: bool,
) -> Result<AuxLoss<T>> {
    check_aux_inputs(predicted, targets, mask)?;
    let pairs = targets.pair_count();
    if pairs == 0 {
        return Ok(AuxLoss {
            value: T::zero(),
            pairs,
            degenerate: true,
        });
    }
    let mut total = T::zero();
    for (b, row) in targets.rows.iter().enumerate() {
        let p = predicted.row(b);
        let m = row.indices.len();
        for a in 0..m {
            for c in (0..m).filter(|&c| c != a) {
                total = total + pair_bce(p[row.indices[a]] - p[row.indices[c]], row.get(a, c));
            }
        }
    }
    let denom = T::from_usize(aux_denominator(targets, normalize)).unwrap();
    Ok(AuxLoss {
        value: total / denom,
        pairs,
        degenerate: false,
    })
}

/// Gradient of [`auxiliary_loss`] with respect to the predicted values.
pub fn auxiliary_loss_backward<T: Scalar>(
    predicted: &LossVector<T>,
    targets: &PairTargets,
    mask: &MaskSet,
    normalize: bool,
) -> Result<Vec<T>> {
    check_aux_inputs(predicted, targets, mask)?;
    let mut grad = vec![T::zero(); predicted.values.len()];
    if targets.pair_count() == 0 {
        return Ok(grad);
    }
    let scale = T::one() / T::from_usize(aux_denominator(targets, normalize)).unwrap();
    for (b, row) in targets.rows.iter().enumerate() {
        let base = b * predicted.frames;
        let p = predicted.row(b);
        let m = row.indices.len();
        for a in 0..m {
            for c in (0..m).filter(|&c| c != a) {
                let (i, j) = (row.indices[a], row.indices[c]);
                let t = if row.get(a, c) { T::one() } else { T::zero() };
                let g = (sigmoid(p[i] - p[j]) - t) * scale;
                grad[base + i] = grad[base + i] + g;
                grad[base + j] = grad[base + j] - g;
            }
        }
    }
    Ok(grad)
}

/// `rec + alpha * aux`.
pub fn joint_loss<T: Scalar>(rec: T, aux: T, alpha: T) -> Result<T> {
    if !(rec.is_finite() && aux.is_finite() && alpha.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite joint loss input (rec {rec:?}, aux {aux:?}, alpha {alpha:?})"
        )));
    }
    Ok(rec + alpha * aux)
}
