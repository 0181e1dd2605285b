//! Command-line front end: TOML run configs, overrides, and the
//! `pretrain`, `mask-report`, `degrade`, `probe` and `gradcheck` commands.
//!
//! Exit codes: 0 success, 1 configuration or I/O problem, 2 numerical
//! failure (non-finite loss, gradient check above threshold).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{generate_synthetic, prepare, read_manifest, split_indices, batch_prepared, Prepared, SynthConfig};
use crate::error::{Error, Result};
use crate::evalharness::{
    degrade_experiment, loss_landscape_report, mask_report, mask_report_csv, probe_train, ranking_quality,
    DegradeConfig, ProbeConfig, Selection,
};
use crate::masking::Schedule;
use crate::network::{FrontendConfig, ModelConfig, ModelState};
use crate::scalar::Scalar;
use crate::trainer::{
    gradcheck_batch, joint_gradient_check, load_any_checkpoint, pretrain, Landscape, Precision, PretrainOptions,
    TrainConfig, TrainRecord,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Manifest of `.wav` or binary utterance files; synthetic data when absent.
    pub manifest: Option<PathBuf>,
    pub held_out_fraction: f64,
    pub split_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            held_out_fraction: 0.2,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    /// Encoder layer read by the probe; the final output when absent.
    pub probe_layer: Option<usize>,
    pub probe: ProbeConfig,
    pub degrade: DegradeConfig,
    pub ranking_seed: u64,
}

/// Everything one invocation needs; `config.snapshot` is this, resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub synth: SynthConfig,
    pub frontend: FrontendConfig,
    pub train: TrainConfig,
    pub harness: HarnessConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            corpus: CorpusConfig::default(),
            synth: SynthConfig::default(),
            frontend: FrontendConfig::default(),
            train: TrainConfig::default(),
            harness: HarnessConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.corpus.manifest.is_none() {
            self.synth.validate()?;
        }
        self.frontend.validate()?;
        self.train.validate()?;
        if self.frontend.dim() != self.train.model.dim {
            return Err(Error::Config(format!(
                "frontend produces {} channels but the model expects {}",
                self.frontend.dim(),
                self.train.model.dim
            )));
        }
        if !(0.0..1.0).contains(&self.corpus.held_out_fraction) {
            return Err(Error::Config("held_out_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Canonical TOML form.
    pub fn snapshot(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }
}

#[derive(Parser, Debug)]
#[command(name = "hardmask", version, about = "Easy-to-hard masked acoustic model pretraining")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Masking curriculum: e2h, hard or random.
    #[arg(long)]
    pub schedule: Option<Schedule>,
    /// Training checkpoint: resume point for `pretrain`, input for the others.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, visible_alias = "total-steps")]
    pub steps: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long = "mask-prob")]
    pub mask_prob: Option<f64>,
    /// Dotted-path override, e.g. `--set train.optim.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train student and teacher; writes metrics, checkpoints and reports.
    Pretrain(Common),
    /// Replay the masking curriculum on one batch with a trained teacher.
    MaskReport(Common),
    /// Selective versus random masking degradation and ranking quality.
    Degrade {
        #[command(flatten)]
        common: Common,
        /// Comma-separated masking fractions.
        #[arg(long, value_delimiter = ',')]
        percentages: Option<Vec<f64>>,
        /// Select frames by measured rather than predicted loss.
        #[arg(long)]
        actual: bool,
    },
    /// Frozen linear probe on encoder outputs.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Finite-difference check of the joint-loss gradient (64-bit).
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 64)]
        coords: usize,
        #[arg(long, default_value_t = 1e-3)]
        threshold: f64,
    },
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => 2,
        _ => 1,
    }
}

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn parse_override(item: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} is not KEY=VALUE")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.trim().split('.').map(str::to_string).collect(), value))
}

fn set_path(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut cur = root;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path {} crosses a non-table value", path.join("."))))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Reads the config file, applies `--set` and flag overrides, validates.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut table = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    let mut overrides = Vec::new();
    for item in &common.set {
        overrides.push(parse_override(item)?);
    }
    let key = |s: &str| s.split('.').map(str::to_string).collect::<Vec<_>>();
    if let Some(out) = &common.out {
        overrides.push((key("out_dir"), toml::Value::String(out.display().to_string())));
    }
    if let Some(seed) = common.seed {
        let seed = i64::try_from(seed).map_err(|_| Error::Config("seed must fit in 63 bits".into()))?;
        overrides.push((key("train.seed"), toml::Value::Integer(seed)));
    }
    if let Some(s) = common.schedule {
        let name = match s {
            Schedule::E2h => "e2h",
            Schedule::Hard => "hard",
            Schedule::Random => "random",
        };
        overrides.push((key("train.mask.schedule"), toml::Value::String(name.into())));
    }
    if let Some(steps) = common.steps {
        overrides.push((key("train.total_steps"), toml::Value::Integer(steps as i64)));
    }
    if let Some(a) = common.alpha {
        overrides.push((key("train.alpha"), toml::Value::Float(a)));
    }
    if let Some(p) = common.mask_prob {
        overrides.push((key("train.mask.mask_prob"), toml::Value::Float(p)));
    }
    for (path, value) in overrides {
        set_path(&mut table, &path, value)?;
    }
    let source = common
        .config
        .as_ref()
        .map_or_else(|| "built-in defaults".to_string(), |p| p.display().to_string());
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(format!("{source}: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Prepared `(train, held_out)` utterances.
pub fn load_corpus(cfg: &RunConfig) -> Result<(Vec<Prepared>, Vec<Prepared>)> {
    let utterances = match &cfg.corpus.manifest {
        Some(path) => read_manifest(path)?,
        None => generate_synthetic(&cfg.synth, &cfg.frontend)?,
    };
    if utterances.is_empty() {
        return Err(Error::Config("corpus is empty".into()));
    }
    let prepared = prepare(&utterances, &cfg.frontend)?;
    let (train, test) = if cfg.corpus.held_out_fraction > 0.0 {
        split_indices(prepared.len(), cfg.corpus.held_out_fraction, cfg.corpus.split_seed)
    } else {
        ((0..prepared.len()).collect(), Vec::new())
    };
    let pick = |idx: &[usize]| idx.iter().map(|&i| prepared[i].clone()).collect::<Vec<_>>();
    Ok((pick(&train), pick(&test)))
}

fn record_line(r: &TrainRecord) -> String {
    serde_json::to_string(r).expect("records serialise")
}

/// Metric lines of an earlier run up to and including `step`.
fn metrics_prefix(path: &Path, step: u64) -> Result<Vec<String>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: TrainRecord = serde_json::from_str(line)
            .map_err(|e| Error::Config(format!("{}: unreadable metrics line: {e}", path.display())))?;
        if r.step <= step {
            out.push(line.to_string());
        }
    }
    Ok(out)
}

fn run_pretrain<T: Scalar>(cfg: &RunConfig, common: &Common) -> Result<()> {
    let (train, _) = load_corpus(cfg)?;
    let out = &cfg.out_dir;
    let metrics_path = out.join("metrics.jsonl");
    let mut lines = match &common.checkpoint {
        Some(ckpt) => {
            let c = crate::network::checkpoint::Container::<T>::load(ckpt)?;
            let step: u64 = c
                .meta_str("step")?
                .parse()
                .map_err(|_| Error::Checkpoint("unreadable step".into()))?;
            metrics_prefix(&metrics_path, step)?
        }
        None => Vec::new(),
    };
    write_atomic(&out.join("config.snapshot"), cfg.snapshot()?.as_bytes())?;
    let mut sink = |r: &TrainRecord| -> Result<()> {
        lines.push(record_line(r));
        Ok(())
    };
    let result = pretrain::<T>(
        &train,
        &cfg.train,
        PretrainOptions {
            checkpoint_dir: Some(out.join("checkpoints")),
            resume_from: common.checkpoint.clone(),
            on_record: Some(&mut sink),
        },
    );
    let mut body = lines.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    write_atomic(&metrics_path, body.as_bytes())?;
    let result = result?;
    let report = loss_landscape_report(&result.landscape);
    write_atomic(&out.join("reports").join("loss_landscape.csv"), report.csv.as_bytes())?;
    if let Some(last) = result.records.last() {
        println!(
            "step {} rec {:.5} aux {:.5} joint {:.5}",
            last.step, last.rec_loss, last.aux_loss, last.joint_loss
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

struct Loaded {
    student: ModelState<f32>,
    teacher: ModelState<f32>,
    landscape: Landscape,
}

fn load_states(path: &Path, expected: &ModelConfig) -> Result<Loaded> {
    let (cfg, student, teacher, landscape) = match load_any_checkpoint::<f32>(path) {
        Ok((c, s, l)) => (c, s.student, s.teacher, l),
        Err(first) => match load_any_checkpoint::<f64>(path) {
            Ok((c, s, l)) => (c, s.student.cast(), s.teacher.cast(), l),
            Err(_) => return Err(first),
        },
    };
    if &cfg.model != expected {
        return Err(Error::Checkpoint(format!(
            "{} holds a model of shape {:?}, the configuration describes {:?}",
            path.display(),
            cfg.model,
            expected
        )));
    }
    Ok(Loaded {
        student,
        teacher,
        landscape,
    })
}

fn require_checkpoint(common: &Common) -> Result<&Path> {
    common
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("--checkpoint is required for this command".into()))
}

fn cmd_mask_report(cfg: &RunConfig, common: &Common) -> Result<()> {
    let loaded = load_states(require_checkpoint(common)?, &cfg.train.model)?;
    // the first training batch, as the curriculum would see it
    let (train, _) = load_corpus(cfg)?;
    let take: Vec<&Prepared> = train.iter().take(cfg.train.batch_size).collect();
    let batch = batch_prepared(&take)?.frames;
    let rows = mask_report(&loaded.teacher, &batch, &cfg.train.mask, cfg.train.seed)?;
    let reports = cfg.out_dir.join("reports");
    write_atomic(&reports.join("mask_report.csv"), mask_report_csv(&rows).as_bytes())?;
    let landscape = loss_landscape_report(&loaded.landscape);
    write_atomic(&reports.join("loss_landscape.csv"), landscape.csv.as_bytes())?;
    if !landscape.empty_epochs.is_empty() {
        eprintln!("note: no tracked losses for epochs {:?}", landscape.empty_epochs);
    }
    println!("{} mask rows", rows.len());
    Ok(())
}

fn probe_layer(cfg: &RunConfig, layer: Option<usize>) -> usize {
    layer.or(cfg.harness.probe_layer).unwrap_or(cfg.train.model.layers)
}

fn cmd_degrade(cfg: &RunConfig, common: &Common, percentages: Option<Vec<f64>>, actual: bool) -> Result<()> {
    let loaded = load_states(require_checkpoint(common)?, &cfg.train.model)?;
    let (train, test) = load_corpus(cfg)?;
    let eval = if test.is_empty() { &train } else { &test };
    let probe_cfg = cfg.harness.probe.clone();
    let probe = probe_train(&loaded.student, &train, probe_layer(cfg, None), &probe_cfg)?;
    let mut dcfg = DegradeConfig {
        target_layers: cfg.train.target_layers,
        ..cfg.harness.degrade.clone()
    };
    if let Some(p) = percentages {
        dcfg.percentages = p;
    }
    if actual {
        dcfg.selection = Selection::Actual;
    }
    let curve = degrade_experiment(&loaded.student, &loaded.teacher, &probe.probe, eval, &dcfg)?;
    let ranking = ranking_quality(
        &loaded.student,
        &loaded.teacher,
        eval,
        cfg.train.target_layers,
        cfg.harness.ranking_seed,
    )?;
    let reports = cfg.out_dir.join("reports");
    write_atomic(&reports.join("degrade.csv"), curve.to_csv().as_bytes())?;
    let json = serde_json::to_string_pretty(&ranking).expect("report serialises");
    write_atomic(&reports.join("ranking.json"), json.as_bytes())?;
    print!("{}", curve.to_csv());
    println!("kendall tau {:.4} over {} frames", ranking.tau, ranking.frames);
    Ok(())
}

#[derive(Serialize)]
struct ProbeReport {
    layer: usize,
    classes: usize,
    accuracy: f64,
    train_accuracy: f64,
}

fn cmd_probe(cfg: &RunConfig, common: &Common, layer: Option<usize>) -> Result<()> {
    let loaded = load_states(require_checkpoint(common)?, &cfg.train.model)?;
    let (train, _) = load_corpus(cfg)?;
    let r = probe_train(&loaded.student, &train, probe_layer(cfg, layer), &cfg.harness.probe)?;
    let report = ProbeReport {
        layer: r.probe.layer,
        classes: r.probe.classes,
        accuracy: r.accuracy,
        train_accuracy: r.train_accuracy,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serialises");
    write_atomic(&cfg.out_dir.join("reports").join("probe.json"), json.as_bytes())?;
    println!("{json}");
    Ok(())
}

fn cmd_gradcheck(common: &Common, eps: f64, coords: usize, threshold: f64) -> Result<()> {
    // Without a config the tiny profile is checked.
    let mut cfg = if common.config.is_some() || !common.set.is_empty() {
        resolve_config(common)?
    } else {
        let mut c = RunConfig::default();
        c.train.model = ModelConfig::tiny();
        c.frontend = FrontendConfig::Passthrough { dim: c.train.model.dim };
        c
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    let student: ModelState<f64> = match &common.checkpoint {
        Some(path) => {
            let loaded = load_states(path, &cfg.train.model)?;
            loaded.student.cast()
        }
        None => ModelState::new_student(cfg.train.model.clone(), cfg.train.seed)?,
    };
    let frames = cfg.train.model.max_frames.min(12);
    let batch = gradcheck_batch(cfg.train.model.dim, frames, cfg.train.seed)?;
    let report = joint_gradient_check(&student, &batch, &cfg.train, eps, coords, cfg.train.seed)?;
    println!(
        "max relative error {:.3e} over {} coordinates (worst index {})",
        report.max_rel_error, report.coords_checked, report.worst_index
    );
    if let Some(out) = &common.out {
        let json = format!(
            "{{\"max_rel_error\": {}, \"coords_checked\": {}, \"worst_index\": {}}}\n",
            report.max_rel_error, report.coords_checked, report.worst_index
        );
        write_atomic(&out.join("reports").join("gradcheck.json"), json.as_bytes())?;
    }
    if report.max_rel_error >= threshold {
        return Err(Error::Numerical(format!(
            "gradient check error {:.3e} exceeds {threshold:.1e}",
            report.max_rel_error
        )));
    }
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(common) => {
            let cfg = resolve_config(&common)?;
            match cfg.train.precision {
                Precision::F32 => run_pretrain::<f32>(&cfg, &common),
                Precision::F64 => run_pretrain::<f64>(&cfg, &common),
            }
        }
        Command::MaskReport(common) => cmd_mask_report(&resolve_config(&common)?, &common),
        Command::Degrade {
            common,
            percentages,
            actual,
        } => cmd_degrade(&resolve_config(&common)?, &common, percentages, actual),
        Command::Probe { common, layer } => cmd_probe(&resolve_config(&common)?, &common, layer),
        Command::Gradcheck {
            common,
            eps,
            coords,
            threshold,
        } => cmd_gradcheck(&common, eps, coords, threshold),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_as_toml_values() {
        let (k, v) = parse_override("train.optim.lr=1e-3").unwrap();
        assert_eq!(k, vec!["train", "optim", "lr"]);
        assert_eq!(v, toml::Value::Float(1e-3));
        let (_, v) = parse_override("train.mask.schedule=hard").unwrap();
        assert_eq!(v, toml::Value::String("hard".into()));
        assert!(parse_override("nonsense").is_err());
    }

    #[test]
    fn defaults_validate_and_snapshot_round_trips() {
        let cfg = resolve_config(&Common::default()).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let text = cfg.snapshot().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let common = Common {
            set: vec!["train.bogus=1".into()],
            ..Common::default()
        };
        assert!(matches!(resolve_config(&common), Err(Error::Config(_))));
    }

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[train]\nalpha = 0.5\ntotal_steps = 10\n[train.optim]\nwarmup_steps = 2\n").unwrap();
        let common = Common {
            config: Some(path),
            alpha: Some(0.1),
            schedule: Some(Schedule::Hard),
            mask_prob: Some(0.4),
            seed: Some(3),
            ..Common::default()
        };
        let cfg = resolve_config(&common).unwrap();
        assert_eq!(cfg.train.alpha, 0.1);
        assert_eq!(cfg.train.total_steps, 10);
        assert_eq!(cfg.train.mask.schedule, Schedule::Hard);
        assert_eq!(cfg.train.mask.mask_prob, 0.4);
        assert_eq!(cfg.train.seed, 3);
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        write_atomic(&p, b"hi").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"hi");
        assert!(!dir.path().join("a/b.txt.tmp").exists());
    }
}
