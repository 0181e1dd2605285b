//! Analysis experiments on trained states: frozen linear probe,
//! degradation under selective versus random masking, predictor ranking
//! quality, and per-epoch loss reports.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{batch_prepared, split_indices, FrameBatch, Prepared};
use crate::error::{Error, Result};
use crate::losses::per_frame_reconstruction;
use crate::masking::{build_adaptive_mask, select_hard_starts, MaskConfig, MaskRng, MaskSet, Progress, SeededRng};
use crate::network::{build_targets, decode_reconstruction, encode, predict_frame_losses, EncoderOutput, ModelState};
use crate::trainer::{derive_seed, Landscape};

/// Utterances encoded together by the harness.
const EVAL_BATCH: usize = 16;

fn batches(corpus: &[&Prepared]) -> Result<Vec<(FrameBatch, Option<Vec<u32>>)>> {
    corpus
        .chunks(EVAL_BATCH)
        .map(|c| batch_prepared(c).map(|b| (b.frames, b.labels)))
        .collect()
}

/// Layer `layer < K` is the residual stream after that transformer layer;
/// `layer == K` is the final normalised output.
fn layer_output<'a>(enc: &'a EncoderOutput<f32>, layer: usize) -> Result<&'a [f32]> {
    let k = enc.per_layer.len();
    match layer.cmp(&k) {
        std::cmp::Ordering::Less => Ok(&enc.per_layer[layer]),
        std::cmp::Ordering::Equal => Ok(&enc.final_out),
        std::cmp::Ordering::Greater => Err(Error::Config(format!("probe layer {layer} outside 0..={k}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Full-batch optimisation passes.
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub held_out_fraction: f64,
    pub seed: u64,
    /// Fraction of frames replaced by the mask embedding while collecting
    /// training features, like masked fine-tuning. Evaluation is unmasked.
    pub train_mask_fraction: f64,
    /// Neighbouring frames on each side concatenated to the input; 0 gives
    /// a purely per-frame probe.
    pub context: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.05,
            l2: 1e-4,
            held_out_fraction: 0.2,
            seed: 0,
            train_mask_fraction: 0.2,
            context: 2,
        }
    }
}

/// Softmax classifier over standardised frame vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    /// Input width, `(2 * context + 1) * model dim`.
    pub dim: usize,
    pub classes: usize,
    pub layer: usize,
    pub context: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `dim x classes`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LinearProbe {
    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        let mut out = self.b.clone();
        for (i, &v) in x.iter().enumerate() {
            let z = (v as f64 - self.mean[i]) * self.scale[i];
            for (c, o) in out.iter_mut().enumerate() {
                *o += z * self.w[i * self.classes + c];
            }
        }
        out
    }

    pub fn predict(&self, x: &[f32]) -> usize {
        let l = self.logits(x);
        (0..self.classes)
            .max_by(|&a, &b| l[a].partial_cmp(&l[b]).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a)))
            .unwrap_or(0)
    }

    /// Number of rows of `x` (`n x dim`) whose prediction differs from the label.
    pub fn errors(&self, x: &[f32], labels: &[u32]) -> usize {
        x.chunks(self.dim)
            .zip(labels)
            .filter(|(row, &l)| self.predict(row) != l as usize)
            .count()
    }

    pub fn accuracy(&self, x: &[f32], labels: &[u32]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        1.0 - self.errors(x, labels) as f64 / labels.len() as f64
    }
}

/// Trains a softmax probe on `x` (`n x dim`) with full-batch Adam.
pub fn fit_linear_probe(x: &[f32], labels: &[u32], dim: usize, classes: usize, layer: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    let n = labels.len();
    if n == 0 || x.len() != n * dim || classes == 0 {
        return Err(Error::Contract("probe needs a non-empty, consistent training set".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Contract(format!("label {bad} outside {classes} classes")));
    }
    let mut mean = vec![0.0; dim];
    for row in x.chunks(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += *v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; dim];
    for row in x.chunks(dim) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (*v as f64 - m).powi(2);
        }
    }
    let scale: Vec<f64> = var.iter().map(|v| 1.0 / (v / n as f64 + 1e-8).sqrt()).collect();
    let z: Vec<f64> = x
        .chunks(dim)
        .flat_map(|row| row.iter().enumerate().map(|(i, v)| (*v as f64 - mean[i]) * scale[i]))
        .collect();
    let mut probe = LinearProbe {
        dim,
        classes,
        layer,
        context: 0,
        mean,
        scale,
        w: vec![0.0; dim * classes],
        b: vec![0.0; classes],
    };
    let np = dim * classes + classes;
    let (mut m, mut v) = (vec![0.0; np], vec![0.0; np]);
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    for epoch in 1..=cfg.epochs {
        let mut g = vec![0.0; np];
        for (row, &label) in z.chunks(dim).zip(labels) {
            let mut logits = probe.b.clone();
            for (i, zi) in row.iter().enumerate() {
                for (c, l) in logits.iter_mut().enumerate() {
                    *l += zi * probe.w[i * classes + c];
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for c in 0..classes {
                let p = (logits[c] - mx).exp() / sum - if c == label as usize { 1.0 } else { 0.0 };
                for (i, zi) in row.iter().enumerate() {
                    g[i * classes + c] += p * zi;
                }
                g[dim * classes + c] += p;
            }
        }
        let inv_n = 1.0 / n as f64;
        let t = epoch as i32;
        for k in 0..np {
            let param = if k < dim * classes { probe.w[k] } else { probe.b[k - dim * classes] };
            let gk = g[k] * inv_n + if k < dim * classes { cfg.l2 * param } else { 0.0 };
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let step = cfg.lr * (m[k] / (1.0 - b1.powi(t))) / ((v[k] / (1.0 - b2.powi(t))).sqrt() + eps);
            if k < dim * classes {
                probe.w[k] -= step;
            } else {
                probe.b[k - dim * classes] -= step;
            }
        }
    }
    Ok(probe)
}

/// Probe inputs for every valid frame of `batch`, in token order: the
/// frame's vector followed by its neighbours out to `context` frames on
/// each side, zero outside the utterance.
pub fn window_features(out: &[f32], batch: &FrameBatch, dim: usize, context: usize) -> Vec<f32> {
    let width = (2 * context + 1) * dim;
    let mut x = Vec::with_capacity(batch.lengths.iter().sum::<usize>() * width);
    for (b, &len) in batch.lengths.iter().enumerate() {
        for i in 0..len {
            for off in -(context as isize)..=context as isize {
                let j = i as isize + off;
                if (0..len as isize).contains(&j) {
                    let t = b * batch.frames + j as usize;
                    x.extend_from_slice(&out[t * dim..(t + 1) * dim]);
                } else {
                    x.extend(std::iter::repeat(0.0).take(dim));
                }
            }
        }
    }
    x
}

/// Probe inputs at `layer` and labels for every valid frame, in corpus
/// order.
fn collect_frames(
    state: &ModelState<f32>,
    corpus: &[&Prepared],
    layer: usize,
    context: usize,
    masking: Option<(f64, u64)>,
) -> Result<(Vec<f32>, Vec<u32>)> {
    let d = state.config.dim;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (bi, (batch, labels)) in batches(corpus)?.into_iter().enumerate() {
        let labels = labels.ok_or(Error::MissingLabels)?;
        let mask = masking.filter(|(f, _)| *f > 0.0).map(|(f, seed)| {
            let mut rng = SeededRng::new(derive_seed(&[seed, bi as u64, 0x9a0b]));
            let rows: Vec<Vec<usize>> = batch
                .lengths
                .iter()
                .map(|&l| rng.choose(l, (f * l as f64).round() as usize))
                .collect();
            mask_from_rows(&batch, &rows)
        });
        let enc = encode(state, &batch, mask.as_ref())?;
        x.extend(window_features(layer_output(&enc, layer)?, &batch, d, context));
        y.extend((0..batch.tokens()).filter(|&t| batch.valid[t]).map(|t| labels[t]));
    }
    Ok((x, y))
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub probe: LinearProbe,
    pub train_accuracy: f64,
    /// Frame accuracy on the held-out utterances.
    pub accuracy: f64,
}

/// Fits a probe on frozen student outputs at `layer` and reports held-out
/// frame accuracy. The class count is one more than the largest label.
pub fn probe_train(student: &ModelState<f32>, corpus: &[Prepared], layer: usize, cfg: &ProbeConfig) -> Result<ProbeResult> {
    if corpus.iter().any(|p| p.labels.is_none()) {
        return Err(Error::MissingLabels);
    }
    let (train_idx, test_idx) = split_indices(corpus.len(), cfg.held_out_fraction, cfg.seed);
    let train: Vec<&Prepared> = train_idx.iter().map(|&i| &corpus[i]).collect();
    let test: Vec<&Prepared> = test_idx.iter().map(|&i| &corpus[i]).collect();
    let classes = corpus
        .iter()
        .flat_map(|p| p.labels.as_ref().expect("checked").iter())
        .max()
        .map_or(1, |m| *m as usize + 1);
    let (xtr, ytr) = collect_frames(student, &train, layer, cfg.context, Some((cfg.train_mask_fraction, cfg.seed)))?;
    let dim = (2 * cfg.context + 1) * student.config.dim;
    let mut probe = fit_linear_probe(&xtr, &ytr, dim, classes, layer, cfg)?;
    probe.context = cfg.context;
    let train_accuracy = probe.accuracy(&xtr, &ytr);
    let accuracy = if test.is_empty() {
        train_accuracy
    } else {
        let (xte, yte) = collect_frames(student, &test, layer, cfg.context, None)?;
        probe.accuracy(&xte, &yte)
    };
    Ok(ProbeResult {
        probe,
        train_accuracy,
        accuracy,
    })
}

/// Which per-frame scores drive selective masking in the degradation
/// experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Teacher loss predictor.
    #[default]
    Predicted,
    /// Measured student reconstruction losses.
    Actual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeConfig {
    pub percentages: Vec<f64>,
    pub seed: u64,
    pub selection: Selection,
    /// Teacher layers averaged into the targets (actual-loss selection).
    pub target_layers: usize,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            percentages: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            seed: 0,
            selection: Selection::Predicted,
            target_layers: 8,
        }
    }
}

/// Relative probe-error increase per masking percentage.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DegradeCurve {
    pub percentages: Vec<f64>,
    pub random: Vec<f64>,
    pub selective: Vec<f64>,
    pub baseline_errors: usize,
    pub frames: usize,
}

impl DegradeCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("percentage,random,selective\n");
        for i in 0..self.percentages.len() {
            let _ = writeln!(s, "{},{},{}", self.percentages[i], self.random[i], self.selective[i]);
        }
        s
    }
}

fn mask_from_rows(batch: &FrameBatch, rows: &[Vec<usize>]) -> MaskSet {
    let mut m = vec![false; batch.tokens()];
    for (b, idx) in rows.iter().enumerate() {
        for &n in idx {
            m[b * batch.frames + n] = true;
        }
    }
    MaskSet::from_positions(batch.batch, batch.frames, m, 0)
}

/// Per-frame student reconstruction loss at every valid frame, measured
/// under a random half mask and its complement.
fn actual_losses_everywhere(
    student: &ModelState<f32>,
    batch: &FrameBatch,
    targets: &[f32],
    rng: &mut impl MaskRng,
) -> Result<Vec<f32>> {
    let half: Vec<Vec<usize>> = batch.lengths.iter().map(|&l| rng.choose(l, l / 2)).collect();
    let mask_a = mask_from_rows(batch, &half);
    let mut comp = batch.valid.clone();
    for (t, c) in comp.iter_mut().enumerate() {
        *c = *c && !mask_a.adaptive[t];
    }
    let mask_b = MaskSet::from_positions(batch.batch, batch.frames, comp, 0);
    let mut out = vec![f32::NEG_INFINITY; batch.tokens()];
    for m in [&mask_a, &mask_b] {
        let enc = encode(student, batch, Some(m))?;
        let recon = decode_reconstruction(student, &enc)?;
        let r = per_frame_reconstruction(&recon, targets, student.config.dim, m)?;
        for t in (0..out.len()).filter(|&t| m.adaptive[t]) {
            out[t] = r.per_frame.values[t];
        }
    }
    Ok(out)
}

/// Masks a fraction `p` of each utterance's frames, either the frames with
/// the highest scores or uniformly at random, and measures how much the
/// probe error on the student's outputs rises over the unmasked baseline.
/// The relative increase is `masked / max(baseline, 1) - 1` in error
/// counts.
pub fn degrade_experiment(
    student: &ModelState<f32>,
    teacher: &ModelState<f32>,
    probe: &LinearProbe,
    corpus: &[Prepared],
    cfg: &DegradeConfig,
) -> Result<DegradeCurve> {
    if cfg.percentages.iter().any(|p| !(0.0..1.0).contains(p)) {
        return Err(Error::Config("masking percentages must lie in [0, 1)".into()));
    }
    if cfg.percentages.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("masking percentages must be strictly increasing".into()));
    }
    if corpus.iter().any(|p| p.labels.is_none()) {
        return Err(Error::MissingLabels);
    }
    let d = student.config.dim;
    let items: Vec<&Prepared> = corpus.iter().collect();
    let np = cfg.percentages.len();
    let (mut base_err, mut frames) = (0usize, 0usize);
    let mut rand_err = vec![0usize; np];
    let mut sel_err = vec![0usize; np];
    let errors = |enc: &EncoderOutput<f32>, batch: &FrameBatch, labels: &[u32]| -> Result<usize> {
        let x = window_features(layer_output(enc, probe.layer)?, batch, d, probe.context);
        let y: Vec<u32> = (0..batch.tokens()).filter(|&t| batch.valid[t]).map(|t| labels[t]).collect();
        Ok(probe.errors(&x, &y))
    };
    for (bi, (batch, labels)) in batches(&items)?.into_iter().enumerate() {
        let labels = labels.expect("checked");
        frames += batch.lengths.iter().sum::<usize>();
        let clean = encode(student, &batch, None)?;
        base_err += errors(&clean, &batch, &labels)?;
        let scores: Vec<f32> = match cfg.selection {
            Selection::Predicted => {
                let t_out = encode(teacher, &batch, None)?;
                predict_frame_losses(teacher, &t_out, &batch.valid)?.values
            }
            Selection::Actual => {
                let t_out = encode(teacher, &batch, None)?;
                let targets = build_targets(&t_out, cfg.target_layers.min(teacher.config.layers))?;
                let mut rng = SeededRng::new(derive_seed(&[cfg.seed, bi as u64, u64::MAX]));
                actual_losses_everywhere(student, &batch, &targets, &mut rng)?
            }
        };
        for (pi, &p) in cfg.percentages.iter().enumerate() {
            let counts: Vec<usize> = batch.lengths.iter().map(|&l| (p * l as f64).round() as usize).collect();
            let mut rng = SeededRng::new(derive_seed(&[cfg.seed, bi as u64, pi as u64]));
            let random: Vec<Vec<usize>> = batch.lengths.iter().zip(&counts).map(|(&l, &k)| rng.choose(l, k)).collect();
            let selective = batch
                .lengths
                .iter()
                .zip(&counts)
                .enumerate()
                .map(|(b, (&l, &k))| select_hard_starts(&scores[b * batch.frames..(b + 1) * batch.frames], k, l))
                .collect::<Result<Vec<_>>>()?;
            let er = encode(student, &batch, Some(&mask_from_rows(&batch, &random)))?;
            rand_err[pi] += errors(&er, &batch, &labels)?;
            let es = encode(student, &batch, Some(&mask_from_rows(&batch, &selective)))?;
            sel_err[pi] += errors(&es, &batch, &labels)?;
        }
    }
    let denom = base_err.max(1) as f64;
    let rel = |e: &[usize]| e.iter().map(|&x| x as f64 / denom - base_err as f64 / denom).collect();
    Ok(DegradeCurve {
        percentages: cfg.percentages.clone(),
        random: rel(&rand_err),
        selective: rel(&sel_err),
        baseline_errors: base_err,
        frames,
    })
}

/// Pair counts for Kendall's tau-b.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PairCounts {
    pub concordant: u64,
    pub discordant: u64,
    /// Pairs tied in the first variable (including joint ties).
    pub tied_x: u64,
    pub tied_y: u64,
    pub total: u64,
}

impl PairCounts {
    pub fn add(&mut self, x: &[f64], y: &[f64]) {
        let n = x.len();
        for i in 0..n {
            for j in i + 1..n {
                let dx = x[i] - x[j];
                let dy = y[i] - y[j];
                self.total += 1;
                if dx == 0.0 {
                    self.tied_x += 1;
                }
                if dy == 0.0 {
                    self.tied_y += 1;
                }
                if dx * dy > 0.0 {
                    self.concordant += 1;
                } else if dx * dy < 0.0 {
                    self.discordant += 1;
                }
            }
        }
    }

    /// Tau-b; 0 when either variable is constant.
    pub fn tau_b(&self) -> f64 {
        let a = (self.total - self.tied_x) as f64;
        let b = (self.total - self.tied_y) as f64;
        if a == 0.0 || b == 0.0 {
            return 0.0;
        }
        (self.concordant as f64 - self.discordant as f64) / (a * b).sqrt()
    }
}

pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> f64 {
    let mut c = PairCounts::default();
    c.add(x, y);
    c.tau_b()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankingReport {
    /// Tau-b pooled over within-utterance pairs.
    pub tau: f64,
    pub frames: usize,
    pub utterances: usize,
}

/// Masks half of each utterance's frames at random, measures the student's
/// reconstruction losses there and ranks them against the teacher's
/// predictions. Only pairs within one utterance are compared, because the
/// predictor is trained to order frames of the same input.
pub fn ranking_quality(
    student: &ModelState<f32>,
    teacher: &ModelState<f32>,
    corpus: &[Prepared],
    target_layers: usize,
    seed: u64,
) -> Result<RankingReport> {
    let items: Vec<&Prepared> = corpus.iter().collect();
    let mut counts = PairCounts::default();
    let mut frames = 0;
    for (bi, (batch, _)) in batches(&items)?.into_iter().enumerate() {
        let t_out = encode(teacher, &batch, None)?;
        let predicted = predict_frame_losses(teacher, &t_out, &batch.valid)?;
        let targets = build_targets(&t_out, target_layers.min(teacher.config.layers))?;
        let mut rng = SeededRng::new(derive_seed(&[seed, bi as u64]));
        let rows: Vec<Vec<usize>> = batch.lengths.iter().map(|&l| rng.choose(l, l / 2)).collect();
        let mask = mask_from_rows(&batch, &rows);
        let enc = encode(student, &batch, Some(&mask))?;
        let recon = decode_reconstruction(student, &enc)?;
        let actual = per_frame_reconstruction(&recon, &targets, student.config.dim, &mask)?.per_frame;
        for (b, row) in rows.iter().enumerate() {
            let mut idx = row.clone();
            idx.sort_unstable();
            let at = |v: &[f32], n: usize| v[b * batch.frames + n] as f64;
            let x: Vec<f64> = idx.iter().map(|&n| at(&predicted.values, n)).collect();
            let y: Vec<f64> = idx.iter().map(|&n| at(&actual.values, n)).collect();
            counts.add(&x, &y);
            frames += idx.len();
        }
    }
    Ok(RankingReport {
        tau: counts.tau_b(),
        frames,
        utterances: corpus.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeReport {
    pub csv: String,
    /// Mean over masked cells; `None` where the epoch has none.
    pub epoch_means: Vec<Option<f64>>,
    /// Epochs in which the utterance was never sampled or nothing was masked.
    pub empty_epochs: Vec<usize>,
}

/// One CSV row per epoch, one column per frame; unmasked cells are empty.
pub fn loss_landscape_report(landscape: &Landscape) -> LandscapeReport {
    let mut csv = String::from("epoch");
    for n in 0..landscape.frames {
        let _ = write!(csv, ",f{n}");
    }
    csv.push('\n');
    let mut epoch_means = Vec::new();
    let mut empty_epochs = Vec::new();
    for (e, row) in landscape.rows.iter().enumerate() {
        let _ = write!(csv, "{e}");
        let cells: Vec<Option<f64>> = row.clone().unwrap_or_else(|| vec![None; landscape.frames]);
        let mut sum = 0.0;
        let mut count = 0;
        for c in &cells {
            csv.push(',');
            if let Some(v) = c {
                let _ = write!(csv, "{v}");
                sum += v;
                count += 1;
            }
        }
        csv.push('\n');
        if count == 0 {
            empty_epochs.push(e);
            epoch_means.push(None);
        } else {
            epoch_means.push(Some(sum / count as f64));
        }
    }
    LandscapeReport {
        csv,
        epoch_means,
        empty_epochs,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskReportRow {
    pub epoch: usize,
    pub row: usize,
    pub valid_len: usize,
    pub num_mask: usize,
    pub selective_count: usize,
    pub random_count: usize,
    pub final_cardinality: usize,
    pub clamp_flag: bool,
}

/// Replays the masking curriculum over every epoch on one batch with a
/// fixed teacher: `total_epochs x B` rows.
pub fn mask_report(teacher: &ModelState<f32>, batch: &FrameBatch, cfg: &MaskConfig, seed: u64) -> Result<Vec<MaskReportRow>> {
    let t_out = encode(teacher, batch, None)?;
    let predicted = predict_frame_losses(teacher, &t_out, &batch.valid)?;
    let mut rows = Vec::new();
    for epoch in 0..cfg.total_epochs {
        let mut rng = SeededRng::new(derive_seed(&[seed, epoch as u64]));
        let progress = Progress {
            current: epoch,
            total: cfg.total_epochs,
        };
        let m = build_adaptive_mask(&batch.valid, &batch.lengths, &predicted, cfg, progress, &mut rng)?;
        for (b, s) in m.rows.iter().enumerate() {
            rows.push(MaskReportRow {
                epoch,
                row: b,
                valid_len: batch.lengths[b],
                num_mask: s.num_mask,
                selective_count: s.selective_count,
                random_count: s.random_count,
                final_cardinality: s.final_cardinality,
                clamp_flag: s.clamp_flag,
            });
        }
    }
    Ok(rows)
}

pub fn mask_report_csv(rows: &[MaskReportRow]) -> String {
    let mut s = String::from("epoch,row,valid_len,num_mask,selective_count,random_count,final_cardinality,clamp_flag\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.row, r.valid_len, r.num_mask, r.selective_count, r.random_count, r.final_cardinality, r.clamp_flag
        );
    }
    s
}

/// Random permutation of `values`, for null-distribution checks.
pub fn shuffled(values: &[f64], seed: u64) -> Vec<f64> {
    let mut v = values.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}
