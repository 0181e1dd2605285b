//! Training step and loop: teacher prediction, adaptive masking, student
//! update, EMA.

pub mod objective;
pub mod optim;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{batch_prepared, FrameBatch, Prepared};
use crate::ema::{decay_at, ema_update, EmaSchedule};
use crate::error::{Error, Result};
use crate::losses::LossVector;
use crate::masking::{build_adaptive_mask, Clock, MaskConfig, MaskRng, MaskSet, Progress, SeededRng};
use crate::network::checkpoint::{push_model, read_model, Container};
use crate::network::{build_targets, encode, predict_frame_losses, ModelConfig, ModelState, Role};
use crate::scalar::Scalar;

pub use objective::{gradcheck_batch, joint_gradient_check, student_objective, ObjectiveOptions, ObjectiveOutput};
pub use optim::{lr_at, AdamW, OptimConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub mask: MaskConfig,
    pub ema: EmaSchedule,
    pub optim: OptimConfig,
    pub total_steps: u64,
    pub batch_size: usize,
    pub alpha: f64,
    pub normalize_aux: bool,
    pub detach_predictor: bool,
    /// Teacher layers averaged into the target; clamped to the depth.
    pub target_layers: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Corpus index whose per-frame losses are logged once per epoch.
    pub tracked_utterance: usize,
    /// Fill `wall_ms`; off by default so metric streams are reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            mask: MaskConfig::default(),
            ema: EmaSchedule::default(),
            optim: OptimConfig::default(),
            total_steps: 3000,
            batch_size: 8,
            alpha: 0.05,
            normalize_aux: false,
            detach_predictor: false,
            target_layers: 8,
            seed: 0,
            precision: Precision::F32,
            checkpoint_every: 0,
            tracked_utterance: 0,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    /// The large-scale hyper-parameters, for documentation.
    pub fn large_profile() -> Self {
        Self {
            model: ModelConfig::large_profile(),
            ema: EmaSchedule::large_profile(),
            optim: OptimConfig {
                lr: 7.5e-4,
                warmup_steps: 8000,
                ..OptimConfig::default()
            },
            total_steps: 400_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mask.validate()?;
        self.ema.validate()?;
        self.optim.validate(self.total_steps)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if self.target_layers == 0 {
            return Err(Error::Config("target_layers must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_target_layers(&self) -> usize {
        self.target_layers.min(self.model.layers)
    }

    /// Curriculum epoch of 1-based `step`: the run is cut into
    /// `total_epochs` equal spans of steps.
    pub fn epoch_at(&self, step: u64) -> usize {
        if self.total_steps == 0 {
            return 0;
        }
        let e = self.mask.total_epochs as u64;
        ((step.saturating_sub(1) * e) / self.total_steps) as usize
    }

    pub fn progress(&self, epoch: usize, step: u64) -> Progress {
        match self.mask.clock {
            Clock::Epoch => Progress {
                current: epoch,
                total: self.mask.total_epochs,
            },
            Clock::Step => Progress {
                current: step.saturating_sub(1) as usize,
                total: self.total_steps.max(1) as usize,
            },
        }
    }

    pub fn objective_options(&self) -> ObjectiveOptions {
        ObjectiveOptions {
            alpha: self.alpha,
            normalize_aux: self.normalize_aux,
            detach_predictor: self.detach_predictor,
        }
    }
}

/// One step's metrics, one JSON object per line in `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub epoch: usize,
    pub rec_loss: f64,
    pub aux_loss: f64,
    pub joint_loss: f64,
    pub selective_fraction: f64,
    pub ema_decay: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// SplitMix64 finaliser folded over `parts`.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

const MASK_STREAM: u64 = 0x6d61_736b;
const DATA_STREAM: u64 = 0x6461_7461;
const INIT_STREAM: u64 = 0x696e_6974;

/// Masking randomness for 1-based `step`. Stateless, so a resumed run
/// draws exactly what an uninterrupted one would.
pub fn step_rng(cfg: &TrainConfig, step: u64) -> SeededRng {
    SeededRng::new(derive_seed(&[MASK_STREAM, cfg.seed, cfg.mask.seed, step]))
}

pub fn init_seed(cfg: &TrainConfig) -> u64 {
    derive_seed(&[INIT_STREAM, cfg.seed])
}

/// Concatenated shuffled passes over the corpus; step `t` takes items
/// `[(t-1)B, tB)`.
#[derive(Clone, Debug)]
pub struct DataStream {
    n: usize,
    batch_size: usize,
    seed: u64,
    pass: Option<(u64, Vec<usize>)>,
}

impl DataStream {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            n,
            batch_size,
            seed,
            pass: None,
        }
    }

    fn order(&mut self, pass: u64) -> &[usize] {
        if self.pass.as_ref().map(|(p, _)| *p) != Some(pass) {
            let mut idx: Vec<usize> = (0..self.n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[DATA_STREAM, self.seed, pass])));
            self.pass = Some((pass, idx));
        }
        &self.pass.as_ref().expect("just set").1
    }

    pub fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let start = (step - 1) * self.batch_size as u64;
        (start..start + self.batch_size as u64)
            .map(|pos| {
                let n = self.n as u64;
                self.order(pos / n)[(pos % n) as usize]
            })
            .collect()
    }
}

/// Result of one training step.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub record: TrainRecord,
    /// Actual per-frame reconstruction losses at masked frames.
    pub actual: LossVector<T>,
    pub mask: MaskSet,
}

/// Teacher prediction, masking, student update and EMA for 1-based `step`.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    student: &mut ModelState<T>,
    teacher: &mut ModelState<T>,
    optimizer: &mut AdamW<T>,
    batch: &FrameBatch,
    cfg: &TrainConfig,
    epoch: usize,
    step: u64,
    rng: &mut impl MaskRng,
) -> Result<StepOutput<T>> {
    let started = Instant::now();
    if student.role != Role::Student || teacher.role != Role::Teacher {
        return Err(Error::Contract("train_step expects (student, teacher)".into()));
    }
    // (1) teacher on the clean batch
    let t_out = encode(teacher, batch, None)?;
    let predicted = predict_frame_losses(teacher, &t_out, &batch.valid)?;
    let targets = build_targets(&t_out, cfg.effective_target_layers())?;
    // (2) adaptive mask
    let mask = build_adaptive_mask(
        &batch.valid,
        &batch.lengths,
        &predicted.cast::<f32>(),
        &cfg.mask,
        cfg.progress(epoch, step),
        rng,
    )?;
    // (3)-(5) student objective and gradient
    let (out, grads) = student_objective(student, batch, &mask, &targets, cfg.objective_options(), None, true)?;
    let joint = out.joint.to_f64().unwrap_or(f64::NAN);
    if !joint.is_finite() {
        return Err(Error::Numerical(format!("step {step}: joint loss is {joint}")));
    }
    let lr = lr_at(&cfg.optim, cfg.total_steps, step);
    optimizer.step(&mut student.params, &grads.expect("requested"), &cfg.optim, lr);
    if !student.params.all_finite() {
        return Err(Error::Numerical(format!("step {step}: non-finite parameters after update")));
    }
    let ema_decay = decay_at(&cfg.ema, step - 1);
    ema_update(teacher, student, ema_decay)?;
    let record = TrainRecord {
        step,
        epoch,
        rec_loss: out.rec.scalar.to_f64().unwrap(),
        aux_loss: out.aux.value.to_f64().unwrap(),
        joint_loss: joint,
        selective_fraction: mask.selective_fraction(),
        ema_decay,
        lr,
        wall_ms: if cfg.record_wall_time {
            started.elapsed().as_millis() as u64
        } else {
            0
        },
    };
    Ok(StepOutput {
        record,
        actual: out.rec.per_frame,
        mask,
    })
}

/// Per-epoch per-frame losses of one utterance; `None` cells were not
/// masked, `None` rows mean the utterance was not sampled that epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landscape {
    pub utterance: usize,
    pub frames: usize,
    pub rows: Vec<Option<Vec<Option<f64>>>>,
}

/// Student, teacher and optimiser after `step` completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub student: ModelState<T>,
    pub teacher: ModelState<T>,
    pub optimizer: AdamW<T>,
    pub step: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let student = ModelState::new_student(cfg.model.clone(), init_seed(cfg))?;
        let teacher = ModelState::teacher_from(&student);
        let optimizer = AdamW::new(&student.params);
        Ok(Self {
            student,
            teacher,
            optimizer,
            step: 0,
        })
    }
}

#[derive(Default)]
pub struct PretrainOptions<'a> {
    pub checkpoint_dir: Option<PathBuf>,
    pub resume_from: Option<PathBuf>,
    pub on_record: Option<&'a mut dyn FnMut(&TrainRecord) -> Result<()>>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutput<T> {
    pub state: TrainState<T>,
    pub records: Vec<TrainRecord>,
    pub landscape: Landscape,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:07}.bin"))
}

/// Runs `total_steps` steps over `corpus`, resuming if asked.
pub fn pretrain<T: Scalar>(
    corpus: &[Prepared],
    cfg: &TrainConfig,
    mut opts: PretrainOptions<'_>,
) -> Result<PretrainOutput<T>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    if cfg.tracked_utterance >= corpus.len() {
        return Err(Error::Config(format!(
            "tracked_utterance {} outside corpus of {}",
            cfg.tracked_utterance,
            corpus.len()
        )));
    }
    let tracked_frames = corpus[cfg.tracked_utterance].features.frames;
    let (mut state, mut landscape) = match &opts.resume_from {
        Some(path) => load_train_checkpoint::<T>(path, cfg)?,
        None => (
            TrainState::init(cfg)?,
            Landscape {
                utterance: cfg.tracked_utterance,
                frames: tracked_frames,
                rows: vec![None; cfg.mask.total_epochs],
            },
        ),
    };
    let mut stream = DataStream::new(corpus.len(), cfg.batch_size, cfg.seed);
    let mut records = Vec::new();
    while state.step < cfg.total_steps {
        let step = state.step + 1;
        let epoch = cfg.epoch_at(step);
        let picks = stream.batch_indices(step);
        let items: Vec<&Prepared> = picks.iter().map(|&i| &corpus[i]).collect();
        let batch = batch_prepared(&items)?.frames;
        let mut rng = step_rng(cfg, step);
        let out = train_step(
            &mut state.student,
            &mut state.teacher,
            &mut state.optimizer,
            &batch,
            cfg,
            epoch,
            step,
            &mut rng,
        )?;
        if let Some(row) = picks.iter().rposition(|&i| i == cfg.tracked_utterance) {
            let cells = (0..tracked_frames)
                .map(|n| {
                    let k = row * batch.frames + n;
                    out.actual.defined[k].then(|| out.actual.values[k].to_f64().unwrap())
                })
                .collect();
            landscape.rows[epoch] = Some(cells);
        }
        state.step = step;
        if let Some(cb) = opts.on_record.as_mut() {
            cb(&out.record)?;
        }
        records.push(out.record);
        if let Some(dir) = &opts.checkpoint_dir {
            let periodic = cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
            if periodic || step == cfg.total_steps {
                save_train_checkpoint(&checkpoint_path(dir, step), cfg, &state, &landscape)?;
            }
        }
    }
    Ok(PretrainOutput {
        state,
        records,
        landscape,
    })
}

pub fn save_train_checkpoint<T: Scalar>(
    path: &Path,
    cfg: &TrainConfig,
    state: &TrainState<T>,
    landscape: &Landscape,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut c = Container::new();
    c.meta.insert("kind".into(), "train".into());
    c.meta.insert("step".into(), state.step.to_string());
    c.meta.insert("adam_t".into(), state.optimizer.t.to_string());
    c.meta.insert("config".into(), serde_json::to_string(cfg).expect("config serialises"));
    c.meta.insert(
        "landscape".into(),
        serde_json::to_string(landscape).expect("landscape serialises"),
    );
    push_model(&mut c, "student", &state.student.params);
    push_model(&mut c, "teacher", &state.teacher.params);
    push_model(&mut c, "adam_m", &state.optimizer.m);
    push_model(&mut c, "adam_v", &state.optimizer.v);
    c.save(path)
}

fn meta_parse<V: std::str::FromStr>(c: &Container<impl Scalar>, key: &str) -> Result<V> {
    c.meta_str(key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("unreadable {key} in checkpoint metadata")))
}

/// Reads a training checkpoint's config without loading tensors twice.
pub fn checkpoint_config<T: Scalar>(c: &Container<T>) -> Result<TrainConfig> {
    if c.meta_str("kind")? != "train" {
        return Err(Error::Checkpoint("not a training checkpoint".into()));
    }
    serde_json::from_str(c.meta_str("config")?).map_err(|e| Error::Checkpoint(format!("config: {e}")))
}

/// Loads state for resuming under `cfg`; the stored config must match.
pub fn load_train_checkpoint<T: Scalar>(path: &Path, cfg: &TrainConfig) -> Result<(TrainState<T>, Landscape)> {
    let c = Container::<T>::load(path)?;
    let stored = checkpoint_config(&c)?;
    if &stored != cfg {
        return Err(Error::Checkpoint(format!(
            "{} was written under a different configuration",
            path.display()
        )));
    }
    let (state, landscape) = state_from_container(&c, cfg)?;
    Ok((state, landscape))
}

pub fn state_from_container<T: Scalar>(c: &Container<T>, cfg: &TrainConfig) -> Result<(TrainState<T>, Landscape)> {
    let m = &cfg.model;
    let student = ModelState {
        role: Role::Student,
        config: m.clone(),
        params: read_model(c, "student", m, true)?,
    };
    let teacher = ModelState {
        role: Role::Teacher,
        config: m.clone(),
        params: read_model(c, "teacher", m, false)?,
    };
    let optimizer = AdamW {
        m: read_model(c, "adam_m", m, true)?,
        v: read_model(c, "adam_v", m, true)?,
        t: meta_parse(c, "adam_t")?,
    };
    let landscape = serde_json::from_str(c.meta_str("landscape")?)
        .map_err(|e| Error::Checkpoint(format!("landscape: {e}")))?;
    Ok((
        TrainState {
            student,
            teacher,
            optimizer,
            step: meta_parse(c, "step")?,
        },
        landscape,
    ))
}

/// Loads a training checkpoint with whatever config it was written under.
pub fn load_any_checkpoint<T: Scalar>(path: &Path) -> Result<(TrainConfig, TrainState<T>, Landscape)> {
    let c = Container::<T>::load(path)?;
    let cfg = checkpoint_config(&c)?;
    let (state, landscape) = state_from_container(&c, &cfg)?;
    Ok((cfg, state, landscape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Features;
    use crate::masking::Schedule;

    fn tiny_cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            model: ModelConfig::tiny(),
            mask: MaskConfig {
                mask_length: 2,
                total_epochs: 4,
                ..MaskConfig::default()
            },
            optim: OptimConfig {
                warmup_steps: 2,
                lr: 1e-3,
                ..OptimConfig::default()
            },
            total_steps: steps,
            batch_size: 3,
            ..TrainConfig::default()
        }
    }

    fn corpus(n: usize) -> Vec<Prepared> {
        (0..n)
            .map(|u| {
                let frames = 8 + (u * 5) % 9;
                Prepared {
                    features: Features {
                        frames,
                        dim: 8,
                        data: (0..frames * 8)
                            .map(|i| (((i * 31 + u * 17) % 23) as f32 / 11.0 - 1.0) * ((i % 8) as f32 * 0.2 + 0.5))
                            .collect(),
                    },
                    labels: None,
                }
            })
            .collect()
    }

    #[test]
    fn stream_covers_each_pass() {
        let mut s = DataStream::new(7, 3, 1);
        let mut first: Vec<usize> = (1..=7).flat_map(|t| s.batch_indices(t)).take(7).collect();
        first.sort_unstable();
        assert_eq!(first, (0..7).collect::<Vec<_>>());
        let mut again = DataStream::new(7, 3, 1);
        assert_eq!(again.batch_indices(5), s.batch_indices(5));
    }

    #[test]
    fn epochs_split_the_run() {
        let cfg = TrainConfig {
            total_steps: 3000,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.epoch_at(1), 0);
        assert_eq!(cfg.epoch_at(100), 0);
        assert_eq!(cfg.epoch_at(101), 1);
        assert_eq!(cfg.epoch_at(3000), 29);
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let cfg = tiny_cfg(0);
        let out = pretrain::<f32>(&corpus(5), &cfg, PretrainOptions::default()).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.state, TrainState::init(&cfg).unwrap());
    }

    #[test]
    fn identical_runs_match_and_resume_is_seamless() {
        let data = corpus(6);
        let cfg = tiny_cfg(12);
        let a = pretrain::<f32>(&data, &cfg, PretrainOptions::default()).unwrap();
        let b = pretrain::<f32>(&data, &cfg, PretrainOptions::default()).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.state, b.state);

        let dir = tempfile::tempdir().unwrap();
        let split = TrainConfig {
            checkpoint_every: 5,
            ..cfg.clone()
        };
        let full = pretrain::<f32>(
            &data,
            &split,
            PretrainOptions {
                checkpoint_dir: Some(dir.path().to_path_buf()),
                ..PretrainOptions::default()
            },
        )
        .unwrap();
        assert_eq!(full.records, a.records);
        let resumed = pretrain::<f32>(
            &data,
            &split,
            PretrainOptions {
                resume_from: Some(checkpoint_path(dir.path(), 5)),
                ..PretrainOptions::default()
            },
        )
        .unwrap();
        assert_eq!(resumed.records[..], a.records[5..]);
        assert_eq!(resumed.state, a.state);
        assert_eq!(resumed.landscape, a.landscape);
        let wrong = pretrain::<f32>(
            &data,
            &TrainConfig { seed: 9, ..split },
            PretrainOptions {
                resume_from: Some(checkpoint_path(dir.path(), 5)),
                ..PretrainOptions::default()
            },
        );
        assert!(matches!(wrong, Err(Error::Checkpoint(_))));
    }

    #[test]
    fn frozen_teacher_never_moves() {
        let data = corpus(5);
        let cfg = TrainConfig {
            ema: EmaSchedule {
                tau_start: 1.0,
                tau_end: 1.0,
                anneal_steps: 1,
            },
            ..tiny_cfg(6)
        };
        let init = TrainState::<f32>::init(&cfg).unwrap();
        let out = pretrain::<f32>(&data, &cfg, PretrainOptions::default()).unwrap();
        assert_eq!(out.state.teacher, init.teacher);
        assert_ne!(out.state.student, init.student);
    }

    #[test]
    fn teacher_changes_only_through_ema() {
        let data = corpus(5);
        let cfg = tiny_cfg(4);
        let mut st = TrainState::<f32>::init(&cfg).unwrap();
        let mut stream = DataStream::new(data.len(), cfg.batch_size, cfg.seed);
        for step in 1..=4 {
            let items: Vec<&Prepared> = stream.batch_indices(step).iter().map(|&i| &data[i]).collect();
            let batch = batch_prepared(&items).unwrap().frames;
            // the mask must come from the teacher as it stands now
            let t_out = encode(&st.teacher, &batch, None).unwrap();
            let pred = predict_frame_losses(&st.teacher, &t_out, &batch.valid).unwrap();
            let epoch = cfg.epoch_at(step);
            let want = build_adaptive_mask(
                &batch.valid,
                &batch.lengths,
                &pred,
                &cfg.mask,
                cfg.progress(epoch, step),
                &mut step_rng(&cfg, step),
            )
            .unwrap();
            let mut expected_teacher = st.teacher.clone();
            let student_before = st.student.clone();
            let out = train_step(
                &mut st.student,
                &mut st.teacher,
                &mut st.optimizer,
                &batch,
                &cfg,
                epoch,
                step,
                &mut step_rng(&cfg, step),
            )
            .unwrap();
            assert_eq!(out.mask, want);
            if step < cfg.total_steps {
                assert_ne!(st.student, student_before);
            }
            ema_update(&mut expected_teacher, &st.student, decay_at(&cfg.ema, step - 1)).unwrap();
            let fp = |s: &ModelState<f32>| s.params.fingerprint(|_| true);
            assert_eq!(fp(&st.teacher), fp(&expected_teacher));
        }
    }

    #[test]
    fn selective_share_follows_curriculum() {
        let data = corpus(8);
        let cfg = TrainConfig {
            mask: MaskConfig {
                mask_length: 2,
                total_epochs: 4,
                mask_prob: 0.6,
                ..MaskConfig::default()
            },
            ..tiny_cfg(16)
        };
        let out = pretrain::<f32>(&data, &cfg, PretrainOptions::default()).unwrap();
        let last = out.records.last().unwrap();
        assert_eq!(last.epoch, 3);
        assert_eq!(last.selective_fraction, 1.0);
        for r in &out.records {
            assert!((0.0..=1.0).contains(&r.selective_fraction));
            assert!(r.rec_loss.is_finite() && r.aux_loss >= 0.0);
        }
        let hard = TrainConfig {
            mask: MaskConfig {
                schedule: Schedule::Hard,
                ..cfg.mask.clone()
            },
            ..cfg
        };
        let out = pretrain::<f32>(&data, &hard, PretrainOptions::default()).unwrap();
        assert!(out.records.iter().all(|r| r.selective_fraction == 1.0));
    }

    #[test]
    fn alpha_zero_still_updates_teacher() {
        let data = corpus(4);
        let cfg = TrainConfig {
            alpha: 0.0,
            ..tiny_cfg(3)
        };
        let init = TrainState::<f32>::init(&cfg).unwrap();
        let out = pretrain::<f32>(&data, &cfg, PretrainOptions::default()).unwrap();
        for r in &out.records {
            assert_eq!(r.joint_loss, r.rec_loss);
        }
        assert_ne!(out.state.teacher, init.teacher);
    }
}
