//! Straight-line reading of the reference masking listing, kept separate
//! from the library on purpose. It consumes the same random stream through
//! `MaskRng`, so a recorded stream can be replayed into both.

use hardmask::losses::LossVector;
use hardmask::masking::{
    build_adaptive_mask, MaskConfig, MaskRng, Progress, RecordingRng, ReplayRng, Schedule, SeededRng,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Case {
    pub lengths: Vec<usize>,
    pub frames: usize,
    pub predicted: Vec<f32>,
    pub cfg: MaskConfig,
    pub progress: Progress,
    pub seed: u64,
}

impl Case {
    pub fn valid(&self) -> Vec<bool> {
        let mut v = vec![false; self.lengths.len() * self.frames];
        for (b, &l) in self.lengths.iter().enumerate() {
            v[b * self.frames..b * self.frames + l].fill(true);
        }
        v
    }
}

pub fn random_case(seed: u64) -> Case {
    let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let batch = r.gen_range(1..=4);
    let frames = r.gen_range(1..=64);
    let lengths: Vec<usize> = (0..batch)
        .map(|b| if b == 0 { frames } else { r.gen_range(1..=frames) })
        .collect();
    let mut predicted = vec![f32::NEG_INFINITY; batch * frames];
    for (b, &l) in lengths.iter().enumerate() {
        for i in 0..l {
            predicted[b * frames + i] = match r.gen_range(0..20) {
                0 => f32::NAN,
                1..=6 => r.gen_range(0..4) as f32 * 0.25,
                _ => r.gen::<f32>(),
            };
        }
    }
    let total_epochs = r.gen_range(1..=40);
    let schedule = match r.gen_range(0..3) {
        0 => Schedule::E2h,
        1 => Schedule::Hard,
        _ => Schedule::Random,
    };
    let cfg = MaskConfig {
        mask_prob: r.gen_range(0.05..0.9),
        mask_length: r.gen_range(1..=10),
        min_masks: r.gen_range(0..=3),
        require_same_masks: r.gen_bool(0.5),
        mask_dropout: if r.gen_bool(0.5) { 0.0 } else { r.gen_range(0.05..0.4) },
        total_epochs,
        schedule,
        ..MaskConfig::default()
    };
    Case {
        lengths,
        frames,
        predicted,
        cfg,
        progress: Progress {
            current: r.gen_range(0..total_epochs),
            total: total_epochs,
        },
        seed,
    }
}

/// Per-row sorted mask positions, or `None` where the candidate window is
/// too small for the drawn budget.
pub fn oracle(case: &Case, rng: &mut impl MaskRng) -> Option<Vec<Vec<usize>>> {
    let cfg = &case.cfg;
    let n = case.frames;
    let keep_ratio = match cfg.schedule {
        Schedule::E2h => (case.progress.current as f64 + 1.0) / case.progress.total as f64,
        Schedule::Hard => 1.0,
        Schedule::Random => 0.0,
    };
    let mut mask_idcs: Vec<Vec<usize>> = Vec::new();
    for (i, &sz) in case.lengths.iter().enumerate() {
        let mut num_mask = (cfg.mask_prob * sz as f64 / cfg.mask_length as f64 + rng.uniform()).floor() as i64;
        if num_mask < cfg.min_masks as i64 {
            num_mask = cfg.min_masks as i64;
        }
        if num_mask == 0 {
            mask_idcs.push(Vec::new());
            continue;
        }
        let mut min_len = cfg.mask_length as i64;
        if sz as i64 - min_len <= num_mask {
            min_len = sz as i64 - num_mask - 1;
        }
        let random_mask = (num_mask as f64 * (1.0 - keep_ratio)).floor() as i64;
        let learnable_mask = num_mask - random_mask;

        // highest predicted loss first, lower index on ties, NaN lowest
        let row = &case.predicted[i * n..i * n + sz];
        let mut taken = vec![false; sz];
        let mut sample_loss_index = Vec::new();
        for _ in 0..learnable_mask.min(sz as i64) {
            let mut best: Option<usize> = None;
            for j in 0..sz {
                if taken[j] {
                    continue;
                }
                let v = if row[j].is_nan() { f32::NEG_INFINITY } else { row[j] };
                let better = match best {
                    None => true,
                    Some(b) => {
                        let bv = if row[b].is_nan() { f32::NEG_INFINITY } else { row[b] };
                        v > bv
                    }
                };
                if better {
                    best = Some(j);
                }
            }
            let j = best.unwrap();
            taken[j] = true;
            sample_loss_index.push(j);
        }

        if (sz as i64 - min_len) < num_mask {
            return None;
        }
        let drawn = rng.choose((sz as i64 - min_len) as usize, num_mask as usize);
        let mut setdiff: Vec<usize> = Vec::new();
        for c in drawn {
            if !sample_loss_index.contains(&c) && !setdiff.contains(&c) {
                setdiff.push(c);
            }
        }
        setdiff.sort();
        let mut mask_idc = Vec::new();
        if random_mask > 0 {
            if setdiff.len() < random_mask as usize {
                mask_idc = setdiff;
            } else {
                for p in rng.choose(setdiff.len(), random_mask as usize) {
                    mask_idc.push(setdiff[p]);
                }
            }
        }

        let mut combine: Vec<usize> = Vec::new();
        for s in sample_loss_index.iter().chain(mask_idc.iter()) {
            for off in 0..cfg.mask_length {
                combine.push(s + off);
            }
        }
        combine.retain(|&x| x < sz);
        combine.sort();
        combine.dedup();
        mask_idcs.push(combine);
    }
    let min_len = mask_idcs.iter().map(|m| m.len()).min().unwrap();
    let mut out = Vec::new();
    for mut mask_idc in mask_idcs {
        if mask_idc.len() > min_len && cfg.require_same_masks {
            let pick = rng.choose(mask_idc.len(), min_len);
            mask_idc = pick.into_iter().map(|p| mask_idc[p]).collect();
        }
        if cfg.mask_dropout > 0.0 {
            let num_holes = (mask_idc.len() as f64 * cfg.mask_dropout).round_ties_even() as usize;
            let pick = rng.choose(mask_idc.len(), mask_idc.len() - num_holes);
            mask_idc = pick.into_iter().map(|p| mask_idc[p]).collect();
        }
        mask_idc.sort();
        out.push(mask_idc);
    }
    Some(out)
}

/// Runs the library on a recorded stream, replays it into the oracle and
/// reports the first disagreement.
pub fn compare(case: &Case) -> Result<(), String> {
    let valid = case.valid();
    let predicted = LossVector::predicted(case.lengths.len(), case.frames, case.predicted.clone(), &valid);
    let mut rec = RecordingRng::new(SeededRng::new(case.seed));
    let built = build_adaptive_mask(&valid, &case.lengths, &predicted, &case.cfg, case.progress, &mut rec);
    let mut replay = ReplayRng::new(rec.log);
    let expected = oracle(case, &mut replay);
    match (built, expected) {
        (Err(_), None) => Ok(()),
        (Ok(mask), Some(rows)) => {
            if !replay.exhausted() {
                return Err(format!("case {}: oracle consumed fewer draws", case.seed));
            }
            for (b, row) in rows.iter().enumerate() {
                let got: Vec<usize> = (0..case.frames).filter(|&i| mask.adaptive[b * case.frames + i]).collect();
                if &got != row {
                    return Err(format!("case {} row {b}: library {got:?}, oracle {row:?}", case.seed));
                }
            }
            Ok(())
        }
        (Ok(_), None) => Err(format!("case {}: oracle rejects, library accepts", case.seed)),
        (Err(e), Some(_)) => Err(format!("case {}: library rejects ({e}), oracle accepts", case.seed)),
    }
}

