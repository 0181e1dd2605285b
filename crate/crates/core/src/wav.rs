//! Minimal RIFF/WAVE reader and PCM16 writer.

use std::path::Path;

use crate::corpus::Utterance;
use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

struct Format {
    code: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes a WAV byte buffer. Mono and multi-channel PCM16 or IEEE float32
/// are accepted; channels are averaged to mono.
pub fn decode_wav(bytes: &[u8]) -> Result<Utterance> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::CorruptHeader("missing RIFF/WAVE magic".into()));
    }
    let mut pos = 12;
    let mut format: Option<Format> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                Error::CorruptHeader(format!(
                    "chunk {:?} overruns file",
                    String::from_utf8_lossy(id)
                ))
            })?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::CorruptHeader("fmt chunk too short".into()));
                }
                let mut code = u16_at(body, 0);
                if code == FORMAT_EXTENSIBLE {
                    if body.len() < 26 {
                        return Err(Error::CorruptHeader("extensible fmt chunk too short".into()));
                    }
                    code = u16_at(body, 24);
                }
                format = Some(Format {
                    code,
                    channels: u16_at(body, 2),
                    sample_rate: u32_at(body, 4),
                    bits: u16_at(body, 14),
                });
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word aligned
        pos = body_end + (size & 1);
    }
    let format = format.ok_or_else(|| Error::CorruptHeader("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::CorruptHeader("no data chunk".into()))?;
    if format.channels == 0 || format.sample_rate == 0 {
        return Err(Error::CorruptHeader("zero channels or sample rate".into()));
    }
    let channels = format.channels as usize;
    let interleaved: Vec<f32> = match (format.code, format.bits) {
        (FORMAT_PCM, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
            .collect(),
        (FORMAT_FLOAT, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        (code, bits) => {
            return Err(Error::UnsupportedEncoding(format!(
                "format code {code} with {bits} bits per sample"
            )))
        }
    };
    let frames = interleaved.len() / channels;
    let samples: Vec<f32> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|c| c.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    debug_assert_eq!(samples.len(), frames);
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::UnsupportedEncoding("non-finite float samples".into()));
    }
    Ok(Utterance::new(samples, format.sample_rate))
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<Utterance> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

/// Encodes mono samples as PCM16; values are clamped to `[-1, 1]`.
pub fn encode_wav_pcm16(samples: &[f32], sample_rate: u32) -> Vec<u8> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, utterance: &Utterance) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_wav_pcm16(&utterance.samples, utterance.sample_rate))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wav_with(code: u16, channels: u16, bits: u16, payload: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&((36 + payload.len()) as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&code.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&16_000u32.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&(channels * bits / 8).to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(payload);
        out
    }

    // hand decoder for the 4-sample file
    fn decode_pcm16_by_hand(payload: &[u8]) -> Vec<f32> {
        let mut out = Vec::new();
        let mut i = 0;
        while i + 1 < payload.len() {
            let raw = (payload[i] as u16) | ((payload[i + 1] as u16) << 8);
            let signed = if raw >= 0x8000 {
                raw as i32 - 0x10000
            } else {
                raw as i32
            };
            out.push(signed as f32 / 32768.0);
            i += 2;
        }
        out
    }

    #[test]
    fn pcm16_full_scale_values() {
        let vals: [i16; 4] = [32767, -32768, 0, 1];
        let payload: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        let utt = decode_wav(&wav_with(FORMAT_PCM, 1, 16, &payload)).unwrap();
        assert_eq!(utt.samples, decode_pcm16_by_hand(&payload));
        assert_eq!(utt.samples[0], 32767.0 / 32768.0);
        assert_eq!(utt.samples[1], -1.0);
        assert_eq!(utt.sample_rate, 16_000);
        assert!(utt.frame_labels.is_none());
    }

    #[test]
    fn length_preserved_and_zero_payload() {
        let payload = vec![0u8; 3200];
        let utt = decode_wav(&wav_with(FORMAT_PCM, 1, 16, &payload)).unwrap();
        assert_eq!(utt.samples.len(), 1600);
        assert!(utt.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn stereo_is_averaged_and_float_is_accepted() {
        let vals = [0.5f32, -0.25, 1.0, 0.0];
        let payload: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        let utt = decode_wav(&wav_with(FORMAT_FLOAT, 2, 32, &payload)).unwrap();
        assert_eq!(utt.samples, vec![0.125, 0.5]);
    }

    #[test]
    fn distinct_errors() {
        let err = load_wav("/definitely/not/here.wav").unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
        let err = decode_wav(&wav_with(FORMAT_PCM, 1, 24, &[0; 6])).unwrap_err();
        assert!(matches!(err, Error::UnsupportedEncoding(_)));
        let err = decode_wav(b"RIFX\0\0\0\0WAVE").unwrap_err();
        assert!(matches!(err, Error::CorruptHeader(_)));
        let mut truncated = wav_with(FORMAT_PCM, 1, 16, &[0; 8]);
        truncated.truncate(truncated.len() - 4);
        assert!(matches!(decode_wav(&truncated), Err(Error::CorruptHeader(_))));
    }

    proptest! {
        #[test]
        fn pcm16_round_trip(raw in proptest::collection::vec(any::<i16>(), 1..200)) {
            let payload: Vec<u8> = raw.iter().flat_map(|v| v.to_le_bytes()).collect();
            let first = decode_wav(&wav_with(FORMAT_PCM, 1, 16, &payload)).unwrap();
            let again = decode_wav(&encode_wav_pcm16(&first.samples, first.sample_rate)).unwrap();
            prop_assert_eq!(first.samples, again.samples);
        }
    }
}
