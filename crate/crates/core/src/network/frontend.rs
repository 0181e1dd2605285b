//! Fixed strided convolution frontend: waveform in, low-rate frame features
//! out. Weights are a deterministic function of the configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Features, Utterance};
use crate::error::{Error, Result};

/// How a frontend layer's filters are initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterInit {
    /// Hann-windowed cosines spread across the band (first layer only).
    Gabor,
    /// Per-channel moving average; requires `channels == in_channels`.
    Smooth,
    /// Gaussian weights scaled by `1/sqrt(fan_in)`.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Abs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendLayer {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
    pub init: FilterInit,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum FrontendConfig {
    /// Strided convolution stack over the waveform, optionally followed by
    /// `log(1 + x)` compression.
    Conv {
        layers: Vec<FrontendLayer>,
        log_compress: bool,
        seed: u64,
    },
    /// Accepts precomputed `N x dim` features unchanged.
    Passthrough { dim: usize },
}

impl Default for FrontendConfig {
    /// 64 Gabor channels (kernel 64, stride 16), then a depthwise smoother
    /// (kernel 8, stride 4): one frame per 64 samples.
    fn default() -> Self {
        FrontendConfig::Conv {
            layers: vec![
                FrontendLayer {
                    kernel: 64,
                    stride: 16,
                    channels: 64,
                    init: FilterInit::Gabor,
                    activation: Activation::Abs,
                },
                FrontendLayer {
                    kernel: 8,
                    stride: 4,
                    channels: 64,
                    init: FilterInit::Smooth,
                    activation: Activation::Identity,
                },
            ],
            log_compress: true,
            seed: 0,
        }
    }
}

/// Weights of one frontend layer: `w[out][in][tap]`.
#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub activation: Activation,
}

impl FrontendConfig {
    /// Output feature dimension.
    pub fn dim(&self) -> usize {
        match self {
            FrontendConfig::Conv { layers, .. } => layers.last().map_or(1, |l| l.channels),
            FrontendConfig::Passthrough { dim } => *dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FrontendConfig::Conv { layers, .. } => {
                if layers.is_empty() {
                    return Err(Error::Config("frontend needs at least one layer".into()));
                }
                let mut in_ch = 1;
                for (i, l) in layers.iter().enumerate() {
                    if l.kernel == 0 || l.stride == 0 || l.channels == 0 {
                        return Err(Error::Config(format!(
                            "frontend layer {i}: kernel, stride and channels must be positive"
                        )));
                    }
                    if l.init == FilterInit::Smooth && l.channels != in_ch {
                        return Err(Error::Config(format!(
                            "frontend layer {i}: smooth init needs channels == input channels"
                        )));
                    }
                    in_ch = l.channels;
                }
                Ok(())
            }
            FrontendConfig::Passthrough { dim } if *dim == 0 => {
                Err(Error::Config("passthrough dim must be positive".into()))
            }
            FrontendConfig::Passthrough { .. } => Ok(()),
        }
    }

    /// `(total stride, receptive field)` in samples; `(1, 1)` for passthrough.
    pub fn geometry(&self) -> (usize, usize) {
        match self {
            FrontendConfig::Conv { layers, .. } => {
                let mut stride = 1;
                let mut field = 1;
                for l in layers {
                    field += (l.kernel - 1) * stride;
                    stride *= l.stride;
                }
                (stride, field)
            }
            FrontendConfig::Passthrough { .. } => (1, 1),
        }
    }

    /// Frames produced from `len` samples, or `None` if shorter than the
    /// receptive field.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        match self {
            FrontendConfig::Conv { layers, .. } => {
                let mut n = len;
                for l in layers {
                    if n < l.kernel {
                        return None;
                    }
                    n = (n - l.kernel) / l.stride + 1;
                }
                Some(n)
            }
            FrontendConfig::Passthrough { .. } => Some(len),
        }
    }

    /// Center sample of frame `n`'s receptive field.
    pub fn frame_center(&self, n: usize) -> usize {
        let (stride, field) = self.geometry();
        n * stride + field / 2
    }

    /// Deterministic layer weights; empty for passthrough.
    pub fn weights(&self, sample_rate: u32) -> Vec<LayerWeights> {
        let FrontendConfig::Conv { layers, seed, .. } = self else {
            return Vec::new();
        };
        let mut rng = ChaCha8Rng::seed_from_u64(*seed);
        let mut in_ch = 1;
        let mut out = Vec::with_capacity(layers.len());
        for l in layers {
            let mut weight = vec![0.0f32; l.channels * in_ch * l.kernel];
            match l.init {
                FilterInit::Gabor => {
                    let nyquist = sample_rate as f64 / 2.0;
                    let lo = 60.0f64.min(nyquist * 0.05);
                    let hi = nyquist * 0.95;
                    for o in 0..l.channels {
                        // log-spaced centre frequencies
                        let frac = if l.channels > 1 {
                            o as f64 / (l.channels - 1) as f64
                        } else {
                            0.5
                        };
                        let freq = lo * (hi / lo).powf(frac);
                        let omega = 2.0 * std::f64::consts::PI * freq / sample_rate as f64;
                        for i in 0..in_ch {
                            for t in 0..l.kernel {
                                let hann = 0.5
                                    - 0.5
                                        * (2.0 * std::f64::consts::PI * t as f64
                                            / (l.kernel.max(2) - 1) as f64)
                                            .cos();
                                let v = hann * (omega * t as f64).cos() / l.kernel as f64;
                                weight[(o * in_ch + i) * l.kernel + t] = (v * 2.0) as f32;
                            }
                        }
                    }
                }
                FilterInit::Smooth => {
                    for c in 0..l.channels {
                        for t in 0..l.kernel {
                            weight[(c * in_ch + c) * l.kernel + t] = 1.0 / l.kernel as f32;
                        }
                    }
                }
                FilterInit::Random => {
                    let scale = 1.0 / ((in_ch * l.kernel) as f64).sqrt();
                    for w in weight.iter_mut() {
                        let g: f64 = rng.sample(StandardNormal);
                        *w = (g * scale) as f32;
                    }
                }
            }
            out.push(LayerWeights {
                in_channels: in_ch,
                out_channels: l.channels,
                kernel: l.kernel,
                stride: l.stride,
                weight,
                bias: vec![0.0; l.channels],
                activation: l.activation,
            });
            in_ch = l.channels;
        }
        out
    }
}

/// Applies one strided valid convolution to `input` laid out `[time][in]`,
/// producing `[time'][out]`.
pub fn conv_layer(input: &[f32], frames: usize, layer: &LayerWeights) -> (Vec<f32>, usize) {
    let cin = layer.in_channels;
    let cout = layer.out_channels;
    let k = layer.kernel;
    debug_assert_eq!(input.len(), frames * cin);
    let out_frames = (frames - k) / layer.stride + 1;
    let mut out = vec![0.0f32; out_frames * cout];
    for t in 0..out_frames {
        let start = t * layer.stride;
        let row = &mut out[t * cout..(t + 1) * cout];
        for (o, slot) in row.iter_mut().enumerate() {
            let mut acc = layer.bias[o];
            for i in 0..cin {
                let w = &layer.weight[(o * cin + i) * k..(o * cin + i + 1) * k];
                for (tap, wv) in w.iter().enumerate() {
                    acc += wv * input[(start + tap) * cin + i];
                }
            }
            *slot = match layer.activation {
                Activation::Identity => acc,
                Activation::Abs => acc.abs(),
            };
        }
    }
    (out, out_frames)
}

/// Maps an utterance to its `N x d` frame features.
pub fn extract_features(utterance: &Utterance, cfg: &FrontendConfig) -> Result<Features> {
    match cfg {
        FrontendConfig::Passthrough { dim } => {
            let feats = utterance.features.as_ref().ok_or_else(|| {
                Error::Contract("passthrough frontend needs precomputed features".into())
            })?;
            if feats.dim != *dim {
                return Err(Error::Contract(format!(
                    "passthrough expects dim {dim}, utterance has {}",
                    feats.dim
                )));
            }
            Ok(feats.clone())
        }
        FrontendConfig::Conv { log_compress, .. } => {
            let (_, field) = cfg.geometry();
            if cfg.frame_count(utterance.samples.len()).is_none() {
                return Err(Error::InputTooShort {
                    len: utterance.samples.len(),
                    field,
                });
            }
            let mut data = utterance.samples.clone();
            let mut frames = data.len();
            for layer in cfg.weights(utterance.sample_rate) {
                let (next, n) = conv_layer(&data, frames, &layer);
                data = next;
                frames = n;
            }
            if *log_compress {
                for v in data.iter_mut() {
                    *v = v.max(0.0).ln_1p();
                }
            }
            Ok(Features {
                frames,
                dim: cfg.dim(),
                data,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_layer(kernel: usize, stride: usize) -> FrontendConfig {
        FrontendConfig::Conv {
            layers: vec![FrontendLayer {
                kernel,
                stride,
                channels: 3,
                init: FilterInit::Random,
                activation: Activation::Identity,
            }],
            log_compress: false,
            seed: 11,
        }
    }

    #[test]
    fn frame_count_formula() {
        let cfg = single_layer(10, 5);
        assert_eq!(cfg.frame_count(100), Some(19));
        assert_eq!(cfg.frame_count(9), None);
        let dflt = FrontendConfig::default();
        assert_eq!(dflt.geometry(), (64, 176));
        assert_eq!(dflt.frame_count(176), Some(1));
        assert_eq!(dflt.frame_count(175), None);
    }

    #[test]
    fn single_layer_matches_naive_loop() {
        let cfg = single_layer(10, 5);
        let samples: Vec<f32> = (0..100).map(|i| ((i * 7) % 13) as f32 / 13.0 - 0.5).collect();
        let utt = Utterance::new(samples.clone(), 16_000);
        let got = extract_features(&utt, &cfg).unwrap();
        assert_eq!(got.frames, 19);
        let w = &cfg.weights(16_000)[0];
        for n in 0..19 {
            for o in 0..3 {
                let mut acc = 0.0f32;
                for t in 0..10 {
                    acc += w.weight[o * 10 + t] * samples[n * 5 + t];
                }
                assert_eq!(got.data[n * 3 + o], acc);
            }
        }
    }

    #[test]
    fn zero_waveform_gives_zero_features() {
        let utt = Utterance::new(vec![0.0; 2000], 8000);
        let f = extract_features(&utt, &FrontendConfig::default()).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
        assert_eq!(f.dim, 64);
    }

    #[test]
    fn too_short_input_is_rejected() {
        let utt = Utterance::new(vec![0.1; 50], 8000);
        let err = extract_features(&utt, &FrontendConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InputTooShort { len: 50, field: 176 }));
    }

    #[test]
    fn passthrough_is_identity() {
        let data: Vec<f32> = (0..80).map(|i| i as f32).collect();
        let utt = Utterance::from_features(Features {
            frames: 10,
            dim: 8,
            data: data.clone(),
        });
        let out = extract_features(&utt, &FrontendConfig::Passthrough { dim: 8 }).unwrap();
        assert_eq!(out.frames, 10);
        assert_eq!(out.data, data);
    }
}
