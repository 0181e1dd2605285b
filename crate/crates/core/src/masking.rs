//! Easy-to-hard adaptive masking.
//!
//! Each row gets a block budget `num_mask = floor(P * len / L + u)`. A
//! curriculum keep ratio splits that budget into selective starts (the
//! frames with the highest predicted reconstruction loss) and random starts
//! (drawn from a candidate pool that excludes the selective ones). Both are
//! expanded into blocks of width `L`, unioned, optionally trimmed to a
//! common cardinality across the batch, and thinned by mask dropout.
//!
//! Every random draw goes through [`MaskRng`] so a run can be recorded and
//! replayed against another implementation.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::FrameBatch;
use crate::error::{Error, Result};
use crate::losses::LossVector;

/// Source of the two kinds of draws the masking pipeline makes.
pub trait MaskRng {
    /// Uniform in `[0, 1)`.
    fn uniform(&mut self) -> f64;
    /// `k` distinct values from `0..n`, in draw order.
    fn choose(&mut self, n: usize, k: usize) -> Vec<usize>;
}

/// ChaCha-backed [`MaskRng`].
#[derive(Clone, Debug)]
pub struct SeededRng(pub ChaCha8Rng);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl MaskRng for SeededRng {
    fn uniform(&mut self) -> f64 {
        self.0.gen::<f64>()
    }

    fn choose(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.0, n, k).into_vec()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Draw {
    Uniform(f64),
    Choose { n: usize, k: usize, picked: Vec<usize> },
}

/// Wraps a source and logs every draw it hands out.
#[derive(Debug)]
pub struct RecordingRng<R> {
    inner: R,
    pub log: Vec<Draw>,
}

impl<R: MaskRng> RecordingRng<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            log: Vec::new(),
        }
    }
}

impl<R: MaskRng> MaskRng for RecordingRng<R> {
    fn uniform(&mut self) -> f64 {
        let v = self.inner.uniform();
        self.log.push(Draw::Uniform(v));
        v
    }

    fn choose(&mut self, n: usize, k: usize) -> Vec<usize> {
        let picked = self.inner.choose(n, k);
        self.log.push(Draw::Choose {
            n,
            k,
            picked: picked.clone(),
        });
        picked
    }
}

/// Replays a recorded log; panics if the caller asks for a different
/// sequence of draws than was recorded.
#[derive(Debug)]
pub struct ReplayRng {
    log: Vec<Draw>,
    pos: usize,
}

impl ReplayRng {
    pub fn new(log: Vec<Draw>) -> Self {
        Self { log, pos: 0 }
    }

    pub fn exhausted(&self) -> bool {
        self.pos == self.log.len()
    }

    fn next(&mut self) -> Draw {
        let d = self
            .log
            .get(self.pos)
            .unwrap_or_else(|| panic!("replay log exhausted after {} draws", self.pos))
            .clone();
        self.pos += 1;
        d
    }
}

impl MaskRng for ReplayRng {
    fn uniform(&mut self) -> f64 {
        match self.next() {
            Draw::Uniform(v) => v,
            other => panic!("draw {}: expected uniform, log has {other:?}", self.pos - 1),
        }
    }

    fn choose(&mut self, n: usize, k: usize) -> Vec<usize> {
        match self.next() {
            Draw::Choose { n: rn, k: rk, picked } if rn == n && rk == k => picked,
            other => panic!(
                "draw {}: expected choose({n}, {k}), log has {other:?}",
                self.pos - 1
            ),
        }
    }
}

/// How the selective share of the budget evolves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Keep ratio grows linearly: `(t + 1) / T`.
    #[default]
    E2h,
    /// Keep ratio fixed at 1 (selective only).
    Hard,
    /// Keep ratio fixed at 0 (random only).
    Random,
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e2h" => Ok(Schedule::E2h),
            "hard" => Ok(Schedule::Hard),
            "random" => Ok(Schedule::Random),
            other => Err(Error::Config(format!(
                "unknown schedule {other:?} (expected e2h, hard or random)"
            ))),
        }
    }
}

/// Whether the curriculum advances per epoch or per optimisation step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    #[default]
    Epoch,
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    /// Fraction `P` of frames covered by the block budget.
    pub mask_prob: f64,
    /// Block width `L`.
    pub mask_length: usize,
    pub min_masks: usize,
    pub require_same_masks: bool,
    pub mask_dropout: f64,
    pub total_epochs: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub clock: Clock,
    /// Listed with the reference hyper-parameters but never used by any
    /// computation; carried so configs round-trip.
    pub mask_adjust: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.5,
            mask_length: 5,
            min_masks: 0,
            require_same_masks: true,
            mask_dropout: 0.0,
            total_epochs: 30,
            seed: 0,
            schedule: Schedule::E2h,
            clock: Clock::Epoch,
            mask_adjust: 0.05,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(Error::Config(format!(
                "mask_prob must lie in (0, 1), got {}",
                self.mask_prob
            )));
        }
        if self.mask_length == 0 {
            return Err(Error::Config("mask_length must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.mask_dropout) {
            return Err(Error::Config(format!(
                "mask_dropout must lie in [0, 1), got {}",
                self.mask_dropout
            )));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Position in the curriculum: `current` of `total` (epochs or steps).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Progress {
    pub current: usize,
    pub total: usize,
}

impl Schedule {
    pub fn keep_ratio(self, progress: Progress) -> Result<f64> {
        if progress.current >= progress.total {
            return Err(Error::Contract(format!(
                "curriculum position {} outside 0..{}",
                progress.current, progress.total
            )));
        }
        Ok(match self {
            Schedule::E2h => (progress.current + 1) as f64 / progress.total as f64,
            Schedule::Hard => 1.0,
            Schedule::Random => 0.0,
        })
    }
}

/// `(selective, random)` split of a block budget for a keep ratio.
pub fn split_with_keep_ratio(num_mask: usize, keep_ratio: f64) -> (usize, usize) {
    let random = (num_mask as f64 * (1.0 - keep_ratio)) as usize;
    (num_mask - random, random)
}

/// Easy-to-hard split of `num_mask` at `epoch` of `total_epochs`.
pub fn schedule_split(num_mask: usize, epoch: usize, total_epochs: usize) -> Result<(usize, usize)> {
    let keep = Schedule::E2h.keep_ratio(Progress {
        current: epoch,
        total: total_epochs,
    })?;
    Ok(split_with_keep_ratio(num_mask, keep))
}

/// Block budget for one row: `max(min_masks, floor(P * len / L + u))`.
pub fn num_mask_blocks(valid_len: usize, cfg: &MaskConfig, rng: &mut impl MaskRng) -> usize {
    let u = rng.uniform();
    let n = (cfg.mask_prob * valid_len as f64 / cfg.mask_length as f64 + u) as usize;
    n.max(cfg.min_masks)
}

/// Indices of the `count` largest predictions among the first `valid_len`
/// positions, largest first; ties go to the lower index. Everything at or
/// beyond `valid_len` is treated as `-inf`.
pub fn select_hard_starts(predicted: &[f32], count: usize, valid_len: usize) -> Result<Vec<usize>> {
    if count > valid_len || valid_len > predicted.len() {
        return Err(Error::Contract(format!(
            "cannot select {count} of {valid_len} valid frames (row has {})",
            predicted.len()
        )));
    }
    let key = |i: usize| {
        let v = predicted[i];
        if i >= valid_len || v.is_nan() {
            f32::NEG_INFINITY
        } else {
            v
        }
    };
    let mut order: Vec<usize> = (0..predicted.len()).collect();
    order.sort_by(|&a, &b| key(b).partial_cmp(&key(a)).unwrap_or(Ordering::Equal));
    order.truncate(count);
    Ok(order)
}

/// Candidate window shrink rule: start at `L`, and if `len - L <= num_mask`
/// use `len - num_mask - 1` instead (may be negative).
pub fn candidate_min_len(valid_len: usize, num_mask: usize, mask_length: usize) -> i64 {
    let (len, n) = (valid_len as i64, num_mask as i64);
    let mut min_len = mask_length as i64;
    if len - min_len <= n {
        min_len = len - n - 1;
    }
    min_len
}

/// Random starts: `num_mask` candidates drawn without replacement from
/// `0..valid_len - min_len`, minus the selective starts, then
/// `random_count` of those drawn without replacement. When fewer remain
/// than requested the whole remainder is returned and the flag is set.
pub fn sample_random_starts(
    valid_len: usize,
    num_mask: usize,
    random_count: usize,
    selective_starts: &[usize],
    min_len: i64,
    rng: &mut impl MaskRng,
) -> Result<(Vec<usize>, bool)> {
    let range = valid_len as i64 - min_len;
    if range < num_mask as i64 {
        return Err(Error::DegenerateLength {
            valid_len,
            candidates: range,
            num_mask,
        });
    }
    let candidates = rng.choose(range as usize, num_mask);
    let mut pool: Vec<usize> = candidates
        .into_iter()
        .filter(|c| !selective_starts.contains(c))
        .collect();
    pool.sort_unstable();
    pool.dedup();
    if random_count == 0 {
        return Ok((Vec::new(), false));
    }
    if pool.len() < random_count {
        return Ok((pool, true));
    }
    let picks = rng.choose(pool.len(), random_count);
    Ok((picks.into_iter().map(|p| pool[p]).collect(), false))
}

/// Sorted union of `[s, s + block_len)` over `starts`, clipped to `valid_len`.
pub fn expand_blocks(starts: &[usize], block_len: usize, valid_len: usize) -> Vec<usize> {
    let mut out: Vec<usize> = starts
        .iter()
        .flat_map(|&s| s..s + block_len)
        .filter(|&i| i < valid_len)
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Per-row bookkeeping of one masking pass.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize)]
pub struct RowStats {
    pub num_mask: usize,
    pub selective_count: usize,
    pub random_count: usize,
    pub final_cardinality: usize,
    pub clamp_flag: bool,
}

/// Adaptive mask `M^A` with the seeds of its selective and random parts.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub batch: usize,
    pub frames: usize,
    /// `B x N`, row-major.
    pub adaptive: Vec<bool>,
    pub selective_starts: Vec<Vec<usize>>,
    pub random_starts: Vec<Vec<usize>>,
    pub epoch: usize,
    pub rows: Vec<RowStats>,
}

impl MaskSet {
    /// Mask from explicit positions, with no start provenance.
    pub fn from_positions(batch: usize, frames: usize, adaptive: Vec<bool>, epoch: usize) -> Self {
        assert_eq!(adaptive.len(), batch * frames, "mask geometry");
        let rows = (0..batch)
            .map(|b| RowStats {
                final_cardinality: adaptive[b * frames..(b + 1) * frames].iter().filter(|m| **m).count(),
                ..RowStats::default()
            })
            .collect();
        Self {
            batch,
            frames,
            adaptive,
            selective_starts: vec![Vec::new(); batch],
            random_starts: vec![Vec::new(); batch],
            epoch,
            rows,
        }
    }

    pub fn row(&self, b: usize) -> &[bool] {
        &self.adaptive[b * self.frames..(b + 1) * self.frames]
    }

    pub fn count(&self) -> usize {
        self.adaptive.iter().filter(|m| **m).count()
    }

    /// Fraction of the total block budget assigned to selective starts
    /// (1 when the budget is empty).
    pub fn selective_fraction(&self) -> f64 {
        let total: usize = self.rows.iter().map(|r| r.num_mask).sum();
        if total == 0 {
            return 1.0;
        }
        let sel: usize = self.rows.iter().map(|r| r.selective_count).sum();
        sel as f64 / total as f64
    }

    /// Geometry matches and no padded position is masked.
    pub fn check_against(&self, batch: &FrameBatch) -> Result<()> {
        if self.batch != batch.batch || self.frames != batch.frames {
            return Err(Error::Contract(format!(
                "mask is {}x{}, batch is {}x{}",
                self.batch, self.frames, batch.batch, batch.frames
            )));
        }
        if let Some(i) = (0..self.adaptive.len()).find(|&i| self.adaptive[i] && !batch.valid[i]) {
            return Err(Error::Contract(format!(
                "mask covers padded position (row {}, frame {})",
                i / self.frames,
                i % self.frames
            )));
        }
        Ok(())
    }
}

/// Builds `M^A` for a batch. `predicted` holds the teacher's per-frame loss
/// predictions; `progress` positions the curriculum.
pub fn build_adaptive_mask(
    valid: &[bool],
    lengths: &[usize],
    predicted: &LossVector<f32>,
    cfg: &MaskConfig,
    progress: Progress,
    rng: &mut impl MaskRng,
) -> Result<MaskSet> {
    let batch = lengths.len();
    let frames = predicted.frames;
    if predicted.batch != batch || valid.len() != batch * frames {
        return Err(Error::Contract("predicted losses not aligned with batch".into()));
    }
    for (b, &len) in lengths.iter().enumerate() {
        let row = &valid[b * frames..(b + 1) * frames];
        if len > frames || row.iter().filter(|v| **v).count() != len || row[..len].iter().any(|v| !v) {
            return Err(Error::Contract(format!("row {b}: validity mask disagrees with length {len}")));
        }
    }
    let keep_ratio = cfg.schedule.keep_ratio(progress)?;
    let mut rows = Vec::with_capacity(batch);
    let mut selective_all = Vec::with_capacity(batch);
    let mut random_all = Vec::with_capacity(batch);
    let mut indices: Vec<Vec<usize>> = Vec::with_capacity(batch);
    for (b, &sz) in lengths.iter().enumerate() {
        let num_mask = num_mask_blocks(sz, cfg, rng);
        if num_mask == 0 {
            rows.push(RowStats::default());
            selective_all.push(Vec::new());
            random_all.push(Vec::new());
            indices.push(Vec::new());
            continue;
        }
        let min_len = candidate_min_len(sz, num_mask, cfg.mask_length);
        let (sel_count, rand_count) = split_with_keep_ratio(num_mask, keep_ratio);
        let pred_row = &predicted.values[b * frames..(b + 1) * frames];
        let selective = select_hard_starts(pred_row, sel_count.min(sz), sz)?;
        let (random, clamped) = sample_random_starts(sz, num_mask, rand_count, &selective, min_len, rng)?;
        let mut starts = selective.clone();
        starts.extend_from_slice(&random);
        indices.push(expand_blocks(&starts, cfg.mask_length, sz));
        rows.push(RowStats {
            num_mask,
            selective_count: sel_count,
            random_count: rand_count,
            final_cardinality: 0,
            clamp_flag: clamped,
        });
        selective_all.push(selective);
        random_all.push(random);
    }
    let min_card = indices.iter().map(Vec::len).min().unwrap_or(0);
    let mut adaptive = vec![false; batch * frames];
    for (b, mut idx) in indices.into_iter().enumerate() {
        if cfg.require_same_masks && idx.len() > min_card {
            let picks = rng.choose(idx.len(), min_card);
            idx = picks.into_iter().map(|p| idx[p]).collect();
        }
        if cfg.mask_dropout > 0.0 {
            let holes = (idx.len() as f64 * cfg.mask_dropout).round_ties_even() as usize;
            let picks = rng.choose(idx.len(), idx.len() - holes);
            idx = picks.into_iter().map(|p| idx[p]).collect();
        }
        for &i in &idx {
            adaptive[b * frames + i] = true;
        }
        rows[b].final_cardinality = idx.len();
    }
    Ok(MaskSet {
        batch,
        frames,
        adaptive,
        selective_starts: selective_all,
        random_starts: random_all,
        epoch: progress.current,
        rows,
    })
}

/// A batch together with validated mask positions.
#[derive(Clone, Copy, Debug)]
pub struct MaskedBatch<'a> {
    pub batch: &'a FrameBatch,
    pub mask: &'a MaskSet,
}

/// Annotates a batch with mask positions. The actual substitution by the
/// mask embedding happens inside the encoder.
pub fn apply_mask<'a>(batch: &'a FrameBatch, mask: &'a MaskSet) -> Result<MaskedBatch<'a>> {
    mask.check_against(batch)?;
    Ok(MaskedBatch { batch, mask })
}
