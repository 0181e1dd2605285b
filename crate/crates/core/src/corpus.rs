//! Synthetic speech-like corpora, on-disk persistence and padded batching.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::frontend::{extract_features, FrontendConfig};
use crate::wav;

/// Row-major `frames x dim` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

/// Raw waveform with optional per-frame unit labels. `features` carries
/// precomputed frames for the passthrough frontend, in which case `samples`
/// may be empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub frame_labels: Option<Vec<u32>>,
    pub features: Option<Features>,
}

impl Utterance {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
            frame_labels: None,
            features: None,
        }
    }

    pub fn from_features(features: Features) -> Self {
        Self {
            samples: Vec::new(),
            sample_rate: 0,
            frame_labels: None,
            features: Some(features),
        }
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Self {
        self.frame_labels = Some(labels);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_utterances: usize,
    pub segments_per_utterance: usize,
    pub codebook_size: usize,
    /// Inclusive segment length bounds, in samples.
    pub segment_len_range: [usize; 2],
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_utterances: 200,
            segments_per_utterance: 5,
            codebook_size: 8,
            segment_len_range: [320, 800],
            sample_rate: 8000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_utterances == 0 {
            return Err(Error::Config("num_utterances must be positive".into()));
        }
        if self.segments_per_utterance == 0 {
            return Err(Error::Config("segments_per_utterance must be positive".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config(format!(
                "codebook_size must be at least 2, got {}",
                self.codebook_size
            )));
        }
        let [lo, hi] = self.segment_len_range;
        if lo == 0 || hi < lo {
            return Err(Error::Config(format!(
                "segment_len_range [{lo}, {hi}] is empty or non-positive"
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        Ok(())
    }
}

/// One codebook entry: a few sinusoids plus one-pole filtered noise.
#[derive(Clone, Debug)]
struct Unit {
    freqs: Vec<f64>,
    amps: Vec<f64>,
    noise_pole: f64,
    noise_gain: f64,
}

fn make_codebook(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Unit> {
    let nyquist = cfg.sample_rate as f64 / 2.0;
    (0..cfg.codebook_size)
        .map(|_| {
            let partials = rng.gen_range(2..=3);
            let freqs = (0..partials)
                .map(|_| rng.gen_range(0.02..0.85) * nyquist)
                .collect();
            let amps = (0..partials).map(|_| rng.gen_range(0.15..0.3)).collect();
            Unit {
                freqs,
                amps,
                noise_pole: rng.gen_range(-0.9..0.9),
                noise_gain: rng.gen_range(0.02..0.08),
            }
        })
        .collect()
}

/// Deterministic synthetic corpus. Each utterance concatenates segments,
/// each rendered from one codebook unit (never the same unit twice in a
/// row); `frame_labels` hold the unit at each frame's receptive-field
/// centre under `frontend`.
pub fn generate_synthetic(cfg: &SynthConfig, frontend: &FrontendConfig) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    frontend.validate()?;
    if matches!(frontend, FrontendConfig::Passthrough { .. }) {
        return Err(Error::Config(
            "synthetic waveforms need a convolutional frontend".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let codebook = make_codebook(cfg, &mut rng);
    let (_, field) = frontend.geometry();
    let rate = cfg.sample_rate as f64;
    let mut out = Vec::with_capacity(cfg.num_utterances);
    for _ in 0..cfg.num_utterances {
        let mut samples: Vec<f32> = Vec::new();
        let mut sample_units: Vec<u32> = Vec::new();
        let mut prev: Option<usize> = None;
        let mut noise_state = 0.0f64;
        for _ in 0..cfg.segments_per_utterance {
            let unit_id = loop {
                let u = rng.gen_range(0..cfg.codebook_size);
                if Some(u) != prev {
                    break u;
                }
            };
            prev = Some(unit_id);
            let unit = &codebook[unit_id];
            let len = rng.gen_range(cfg.segment_len_range[0]..=cfg.segment_len_range[1]);
            let phases: Vec<f64> = unit
                .freqs
                .iter()
                .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
                .collect();
            let gain = rng.gen_range(0.7..1.0);
            for t in 0..len {
                let time = t as f64 / rate;
                let mut v = 0.0;
                for ((f, a), p) in unit.freqs.iter().zip(&unit.amps).zip(&phases) {
                    v += a * (std::f64::consts::TAU * f * time + p).sin();
                }
                let white: f64 = rng.gen_range(-1.0..1.0);
                noise_state = unit.noise_pole * noise_state + white;
                v += unit.noise_gain * noise_state;
                samples.push((gain * v).clamp(-1.0, 1.0) as f32);
                sample_units.push(unit_id as u32);
            }
        }
        // pad short utterances so at least one frame exists
        while samples.len() < field {
            samples.push(0.0);
            sample_units.push(*sample_units.last().unwrap_or(&0));
        }
        let frames = frontend
            .frame_count(samples.len())
            .expect("padded to receptive field");
        let labels = (0..frames)
            .map(|n| sample_units[frontend.frame_center(n).min(sample_units.len() - 1)])
            .collect();
        out.push(Utterance::new(samples, cfg.sample_rate).with_labels(labels));
    }
    Ok(out)
}

const UTT_MAGIC: &[u8; 4] = b"HMUT";
const UTT_VERSION: u32 = 1;

/// Serialises one utterance: magic, version, rate, samples (f32 LE) and
/// optional labels (u32 LE).
pub fn encode_utterance(utt: &Utterance) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + utt.samples.len() * 4);
    out.extend_from_slice(UTT_MAGIC);
    out.extend_from_slice(&UTT_VERSION.to_le_bytes());
    out.extend_from_slice(&utt.sample_rate.to_le_bytes());
    out.extend_from_slice(&(utt.samples.len() as u64).to_le_bytes());
    for s in &utt.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    match &utt.frame_labels {
        Some(labels) => {
            out.push(1);
            out.extend_from_slice(&(labels.len() as u64).to_le_bytes());
            for l in labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        None => out.push(0),
    }
    out
}

pub fn decode_utterance(bytes: &[u8]) -> Result<Utterance> {
    let bad = |m: &str| Error::Contract(format!("utterance file: {m}"));
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4).ok_or_else(|| bad("truncated"))? != UTT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = cur.u32().ok_or_else(|| bad("truncated"))?;
    if version != UTT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let rate = cur.u32().ok_or_else(|| bad("truncated"))?;
    let n = cur.u64().ok_or_else(|| bad("truncated"))? as usize;
    let raw = cur.take(n * 4).ok_or_else(|| bad("truncated samples"))?;
    let samples = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut utt = Utterance::new(samples, rate);
    if cur.take(1).ok_or_else(|| bad("truncated"))?[0] == 1 {
        let m = cur.u64().ok_or_else(|| bad("truncated"))? as usize;
        let raw = cur.take(m * 4).ok_or_else(|| bad("truncated labels"))?;
        utt.frame_labels = Some(
            raw.chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        );
    }
    Ok(utt)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Writes `utt_NNNNN.bin` files plus `manifest.txt` (one path per line).
pub fn write_corpus(dir: impl AsRef<Path>, utterances: &[Utterance]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("manifest.txt");
    let mut manifest = Vec::new();
    for (i, utt) in utterances.iter().enumerate() {
        let name = format!("utt_{i:05}.bin");
        let path = dir.join(&name);
        std::fs::write(&path, encode_utterance(utt)).map_err(|e| Error::io(&path, e))?;
        writeln!(manifest, "{name}").expect("vec write");
    }
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Reads a manifest; relative entries resolve against the manifest's
/// directory. `.wav` entries go through the WAV reader, anything else is
/// read as a binary utterance file.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|line| {
            let p = base.join(line);
            if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
                wav::load_wav(&p)
            } else {
                let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
                decode_utterance(&bytes)
            }
        })
        .collect()
}

/// Padded `B x N x d` batch with validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBatch {
    pub batch: usize,
    pub frames: usize,
    pub dim: usize,
    pub features: Vec<f32>,
    pub valid: Vec<bool>,
    pub lengths: Vec<usize>,
}

impl FrameBatch {
    /// Right-pads each matrix to the longest; padded features are zero.
    pub fn from_features(items: &[&Features]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("cannot batch zero utterances".into()))?;
        let dim = first.dim;
        if items.iter().any(|f| f.dim != dim) {
            return Err(Error::Contract("feature dimensions differ within batch".into()));
        }
        let frames = items.iter().map(|f| f.frames).max().unwrap_or(0);
        let batch = items.len();
        let mut features = vec![0.0f32; batch * frames * dim];
        let mut valid = vec![false; batch * frames];
        let mut lengths = Vec::with_capacity(batch);
        for (b, f) in items.iter().enumerate() {
            let start = b * frames * dim;
            features[start..start + f.frames * dim].copy_from_slice(&f.data);
            valid[b * frames..b * frames + f.frames].fill(true);
            lengths.push(f.frames);
        }
        Ok(Self {
            batch,
            frames,
            dim,
            features,
            valid,
            lengths,
        })
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.frames
    }

    pub fn row_valid(&self, b: usize) -> &[bool] {
        &self.valid[b * self.frames..(b + 1) * self.frames]
    }
}

/// Batch plus `B x N` labels (zero at padding) when every item is labelled.
#[derive(Clone, Debug)]
pub struct LabelledBatch {
    pub frames: FrameBatch,
    pub labels: Option<Vec<u32>>,
}

/// Utterance after feature extraction, ready for repeated batching.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub features: Features,
    pub labels: Option<Vec<u32>>,
}

pub fn prepare(utterances: &[Utterance], frontend: &FrontendConfig) -> Result<Vec<Prepared>> {
    crate::par::map_slice(utterances, |u| {
        let features = extract_features(u, frontend)?;
        if let Some(labels) = &u.frame_labels {
            if labels.len() != features.frames {
                return Err(Error::Contract(format!(
                    "{} labels for {} frames",
                    labels.len(),
                    features.frames
                )));
            }
        }
        Ok(Prepared {
            features,
            labels: u.frame_labels.clone(),
        })
    })
    .into_iter()
    .collect()
}

pub fn batch_prepared(items: &[&Prepared]) -> Result<LabelledBatch> {
    let feats: Vec<&Features> = items.iter().map(|p| &p.features).collect();
    let frames = FrameBatch::from_features(&feats)?;
    let labels = if items.iter().all(|p| p.labels.is_some()) {
        let mut out = vec![0u32; frames.tokens()];
        for (b, p) in items.iter().enumerate() {
            let l = p.labels.as_ref().expect("checked");
            out[b * frames.frames..b * frames.frames + l.len()].copy_from_slice(l);
        }
        Some(out)
    } else {
        None
    };
    Ok(LabelledBatch { frames, labels })
}

/// Extracts features for every utterance and pads them into one batch.
pub fn make_batch(utterances: &[Utterance], frontend: &FrontendConfig) -> Result<LabelledBatch> {
    if utterances.is_empty() {
        return Err(Error::Contract("cannot batch zero utterances".into()));
    }
    let prepared = prepare(utterances, frontend)?;
    let refs: Vec<&Prepared> = prepared.iter().collect();
    batch_prepared(&refs)
}

/// Deterministic train/held-out split of indices.
pub fn split_indices(n: usize, held_out_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = if n < 2 {
        0
    } else {
        ((n as f64 * held_out_fraction).round() as usize).clamp(1, n - 1)
    };
    let test = idx.split_off(n - held);
    (idx, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small_cfg(seed: u64) -> SynthConfig {
        SynthConfig {
            num_utterances: 10,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let fe = FrontendConfig::default();
        let a = generate_synthetic(&small_cfg(7), &fe).unwrap();
        let b = generate_synthetic(&small_cfg(7), &fe).unwrap();
        let bytes = |v: &[Utterance]| v.iter().flat_map(encode_utterance).collect::<Vec<u8>>();
        assert_eq!(bytes(&a), bytes(&b));
        let c = generate_synthetic(&small_cfg(8), &fe).unwrap();
        assert_ne!(bytes(&a), bytes(&c));
    }

    #[test]
    fn degenerate_configs_rejected() {
        let fe = FrontendConfig::default();
        for cfg in [
            SynthConfig { codebook_size: 1, ..small_cfg(0) },
            SynthConfig { num_utterances: 0, ..small_cfg(0) },
            SynthConfig { segment_len_range: [10, 5], ..small_cfg(0) },
            SynthConfig { segment_len_range: [0, 5], ..small_cfg(0) },
        ] {
            assert!(matches!(generate_synthetic(&cfg, &fe), Err(Error::Config(_))));
        }
    }

    #[test]
    fn labels_align_with_frames_and_codebook() {
        let fe = FrontendConfig::default();
        let cfg = SynthConfig {
            num_utterances: 10,
            sample_rate: 8000,
            ..SynthConfig::default()
        };
        let utts = generate_synthetic(&cfg, &fe).unwrap();
        assert_eq!(utts.len(), 10);
        let mut distinct = HashSet::new();
        for u in &utts {
            let labels = u.frame_labels.as_ref().unwrap();
            assert_eq!(Some(labels.len()), fe.frame_count(u.samples.len()));
            assert!(u.samples.iter().all(|s| s.is_finite() && s.abs() <= 1.0));
            distinct.extend(labels.iter().copied());
        }
        assert!(distinct.len() <= cfg.codebook_size);
        assert!(distinct.len() >= 2);
    }

    #[test]
    fn batch_padding_layout() {
        let f = |n: usize| Features {
            frames: n,
            dim: 4,
            data: vec![1.5; n * 4],
        };
        let (a, b) = (f(50), f(30));
        let batch = FrameBatch::from_features(&[&a, &b]).unwrap();
        assert_eq!(batch.frames, 50);
        assert_eq!(batch.lengths, vec![50, 30]);
        assert!(batch.row_valid(1)[30..].iter().all(|v| !v));
        assert!(batch.row_valid(1)[..30].iter().all(|v| *v));
        let pad = &batch.features[(50 + 30) * 4..];
        assert!(pad.iter().all(|&v| v == 0.0));
        for bi in 0..2 {
            let count = batch.row_valid(bi).iter().filter(|v| **v).count();
            assert_eq!(count, batch.lengths[bi]);
        }
        let single = FrameBatch::from_features(&[&a]).unwrap();
        assert!(single.valid.iter().all(|v| *v));
        assert!(FrameBatch::from_features(&[]).is_err());
    }

    #[test]
    fn corpus_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let utts = generate_synthetic(&small_cfg(3), &FrontendConfig::default()).unwrap();
        let manifest = write_corpus(dir.path(), &utts).unwrap();
        let back = read_manifest(&manifest).unwrap();
        assert_eq!(back, utts);
    }

    #[test]
    fn make_batch_runs_the_frontend() {
        let fe = FrontendConfig::default();
        let utts = generate_synthetic(&small_cfg(5), &fe).unwrap();
        let lb = make_batch(&utts[..3], &fe).unwrap();
        assert_eq!(lb.frames.batch, 3);
        assert_eq!(lb.frames.dim, 64);
        let labels = lb.labels.unwrap();
        assert_eq!(labels.len(), lb.frames.tokens());
    }
}
