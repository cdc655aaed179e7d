//! Waveforms, log-magnitude spectrograms and 16-bit PCM WAV files.

use std::io::{Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Offset added to magnitudes before taking the log.
pub const LOG_OFFSET: f64 = 1e-6;

/// Mono audio, samples clipped to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        let samples = samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftParams {
    pub n_fft: usize,
    pub hop: usize,
}

impl StftParams {
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frames(&self, n_samples: usize) -> usize {
        (n_samples - self.n_fft) / self.hop + 1
    }
}

/// `log(|STFT| + 1e-6)`, shaped `[F, T]` with `F = n_fft / 2 + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub bins: Tensor,
    pub params: StftParams,
}

impl Spectrogram {
    pub fn n_freq(&self) -> usize {
        self.bins.shape()[0]
    }

    pub fn n_frames(&self) -> usize {
        self.bins.shape()[1]
    }

    /// Frequency bin with the largest value, per frame.
    pub fn peak_bins(&self) -> Vec<usize> {
        let (f, t) = (self.n_freq(), self.n_frames());
        (0..t)
            .map(|frame| {
                let mut best = 0;
                for k in 1..f {
                    if self.bins.data()[k * t + frame] > self.bins.data()[best * t + frame] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Hann-windowed STFT magnitudes (not logged), shaped `[F, T]`.
pub fn stft_magnitude(w: &Waveform, n_fft: usize, hop: usize) -> Result<Tensor> {
    if n_fft < 2 || !n_fft.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "n_fft {n_fft} is not a power of two"
        )));
    }
    if hop == 0 {
        return Err(Error::InvalidArgument("hop must be >= 1".into()));
    }
    let x = w.samples();
    if x.len() < n_fft {
        return Err(Error::InvalidArgument(format!(
            "waveform of {} samples is shorter than one {n_fft}-sample frame",
            x.len()
        )));
    }
    let params = StftParams { n_fft, hop };
    let (nf, nt) = (params.bins(), params.frames(x.len()));
    let window = hann(n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut out = vec![0.0; nf * nt];
    for t in 0..nt {
        let frame = &x[t * hop..t * hop + n_fft];
        for ((b, s), wv) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex::new(s * wv, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..nf {
            out[k * nt + t] = buf[k].norm();
        }
    }
    Tensor::new(vec![nf, nt], out)
}

pub fn stft_log_magnitude(w: &Waveform, n_fft: usize, hop: usize) -> Result<Spectrogram> {
    let mag = stft_magnitude(w, n_fft, hop)?;
    Ok(Spectrogram {
        bins: mag.map(|m| (m + LOG_OFFSET).ln()),
        params: StftParams { n_fft, hop },
    })
}

/// Window of `seconds` centred at `center` seconds. Samples outside the clip
/// are zero; the second value counts them.
pub fn crop_audio(w: &Waveform, seconds: f64, center: f64) -> (Waveform, usize) {
    let sr = w.sample_rate() as f64;
    let len = (seconds * sr).round() as usize;
    let start = ((center - seconds / 2.0) * sr).round() as i64;
    let mut padded = 0;
    let samples = (0..len as i64)
        .map(|i| {
            let j = start + i;
            if j >= 0 && (j as usize) < w.samples.len() {
                w.samples[j as usize]
            } else {
                padded += 1;
                0.0
            }
        })
        .collect();
    if padded > 0 {
        log::warn!("crop window exceeds the clip; zero-padded {padded} samples");
    }
    (Waveform::new(samples, w.sample_rate()), padded)
}

fn quantize(s: f64) -> i16 {
    (s.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

/// Canonical 44-byte-header, mono, 16-bit little-endian PCM.
pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let data_len = (w.samples.len() * 2) as u32;
    let sr = w.sample_rate;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sr.to_le_bytes());
    out.extend_from_slice(&(sr * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        out.extend_from_slice(&quantize(s).to_le_bytes());
    }
    out
}

pub fn decode_wav(bytes: &[u8]) -> std::result::Result<Waveform, String> {
    if bytes.len() < 44 {
        return Err(format!(
            "{} bytes is shorter than a WAV header",
            bytes.len()
        ));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if &bytes[0..4] != b"RIFF" || &bytes[8..16] != b"WAVEfmt " || &bytes[36..40] != b"data" {
        return Err("not a canonical RIFF/WAVE file".into());
    }
    if u16_at(20) != 1 || u16_at(22) != 1 || u16_at(34) != 16 {
        return Err("only mono 16-bit PCM is supported".into());
    }
    let sr = u32_at(24);
    let len = u32_at(40) as usize;
    if bytes.len() < 44 + len || len % 2 != 0 {
        return Err(format!("data chunk of {len} bytes is truncated"));
    }
    let samples = bytes[44..44 + len]
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32767.0)
        .collect();
    Ok(Waveform::new(samples, sr))
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_wav(w)).map_err(|e| Error::io(path, e))
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes).map_err(|detail| Error::Malformed {
        path: path.into(),
        detail,
    })
}
