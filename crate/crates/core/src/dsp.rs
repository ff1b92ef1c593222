//! Audio front end: framing, magnitude STFT, mel-cepstral features and the
//! orthonormal DCT shared with RIR parametrization.
//!
//! Spectrograms are stored frequency-major (`F x T`), feature sequences are
//! frame-major (`T x D`).

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Floor applied before every logarithm of an energy or magnitude.
pub const LOG_FLOOR: f64 = 1e-10;

/// Half-width of the delta regression window, in frames.
pub const DELTA_WIDTH: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads a 16-bit PCM WAV file. Multi-channel input is averaged to mono.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
        let spec = reader.spec();
        if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                message: format!(
                    "only 16-bit PCM is supported, found {:?} {}-bit",
                    spec.sample_format, spec.bits_per_sample
                ),
            });
        }
        let channels = spec.channels.max(1) as usize;
        let raw = reader
            .samples::<i16>()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(wav_err)?;
        let samples = raw
            .chunks(channels)
            .map(|frame| {
                frame.iter().map(|&s| s as f64 / 32768.0).sum::<f64>() / frame.len() as f64
            })
            .collect();
        Self::new(samples, spec.sample_rate)
    }

    /// Writes the clip as mono 16-bit PCM. Samples outside `[-1, 1]` are clipped.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
        for &s in &self.samples {
            let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(q).map_err(wav_err)?;
        }
        writer.finalize().map_err(wav_err)
    }
}

/// Non-negative `F x T` magnitude spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    values: Array2<f64>,
    frame_hop_s: f64,
    bin_hz: f64,
}

impl Spectrogram {
    pub fn new(values: Array2<f64>, frame_hop_s: f64, bin_hz: f64) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::invalid("spectrogram must have at least one bin and one frame"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("spectrogram entries must be finite and non-negative"));
        }
        Ok(Self {
            values,
            frame_hop_s,
            bin_hz,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn n_bins(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn frame_hop_s(&self) -> f64 {
        self.frame_hop_s
    }

    pub fn bin_hz(&self) -> f64 {
        self.bin_hz
    }

    /// Averages contiguous frequency bins into `bands` equal-width groups.
    /// `bands == 0` or `bands >= F` returns the spectrogram unchanged.
    pub fn pool_bands(&self, bands: usize) -> Spectrogram {
        let f = self.n_bins();
        if bands == 0 || bands >= f {
            return self.clone();
        }
        let t = self.n_frames();
        let mut out = Array2::zeros((bands, t));
        for b in 0..bands {
            let lo = b * f / bands;
            let hi = ((b + 1) * f / bands).max(lo + 1);
            let width = (hi - lo) as f64;
            let mut row = out.row_mut(b);
            for bin in lo..hi {
                row.zip_mut_with(&self.values.row(bin), |o, v| *o += v);
            }
            row.mapv_inplace(|v| v / width);
        }
        Spectrogram {
            values: out,
            frame_hop_s: self.frame_hop_s,
            bin_hz: self.bin_hz * f as f64 / bands as f64,
        }
    }
}

/// `T x D` matrix of per-frame cepstral vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Array2<f64>,
}

impl FeatureSequence {
    pub fn new(frames: Array2<f64>) -> Result<Self> {
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature entries must be finite"));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// Converts a duration to a whole number of samples.
pub fn seconds_to_samples(seconds: f64, sample_rate: u32) -> usize {
    (seconds * sample_rate as f64).round() as usize
}

/// Number of complete frames that fit in `n_samples`; the tail is dropped.
pub fn frame_count(n_samples: usize, window: usize, hop: usize) -> usize {
    if window == 0 || hop == 0 || n_samples < window {
        0
    } else {
        (n_samples - window) / hop + 1
    }
}

pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Magnitude STFT with a Hamming window. Each frame is zero-padded to the
/// next power of two; frames that would overrun the signal are dropped.
pub fn stft(clip: &AudioClip, window_s: f64, hop_s: f64) -> Result<Spectrogram> {
    let sr = clip.sample_rate();
    let window = seconds_to_samples(window_s, sr);
    let hop = seconds_to_samples(hop_s, sr);
    if window < 2 {
        return Err(Error::invalid(format!(
            "window of {window_s} s is shorter than two samples at {sr} Hz"
        )));
    }
    if hop == 0 || hop_s > window_s {
        return Err(Error::invalid(format!(
            "hop {hop_s} s must be positive and no longer than the window {window_s} s"
        )));
    }
    let n = clip.samples().len();
    let n_frames = frame_count(n, window, hop);
    if n_frames == 0 {
        return Err(Error::InputTooShort {
            needed: window,
            got: n,
        });
    }

    let nfft = window.next_power_of_two();
    let n_bins = nfft / 2 + 1;
    let win = hamming(window);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut values = Array2::zeros((n_bins, n_frames));

    for t in 0..n_frames {
        let frame = &clip.samples()[t * hop..t * hop + window];
        for (slot, (&x, &w)) in buf.iter_mut().zip(frame.iter().zip(&win)) {
            *slot = Complex::new(x * w, 0.0);
        }
        buf[window..].fill(Complex::new(0.0, 0.0));
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (f, c) in buf[..n_bins].iter().enumerate() {
            values[[f, t]] = c.norm();
        }
    }

    Ok(Spectrogram {
        values,
        frame_hop_s: hop as f64 / sr as f64,
        bin_hz: sr as f64 / nfft as f64,
    })
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters spanning 0 Hz to the top bin, each normalized to
/// unit total weight. Returned as an `n_mel x F` matrix.
pub fn mel_filterbank(n_mel: usize, n_bins: usize, bin_hz: f64) -> Array2<f64> {
    let top_hz = (n_bins - 1) as f64 * bin_hz;
    let top_mel = hz_to_mel(top_hz);
    let edges: Vec<f64> = (0..n_mel + 2)
        .map(|i| mel_to_hz(top_mel * i as f64 / (n_mel + 1) as f64))
        .collect();
    let mut bank = Array2::zeros((n_mel, n_bins));
    for m in 0..n_mel {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut row = bank.row_mut(m);
        for bin in 0..n_bins {
            let hz = bin as f64 * bin_hz;
            let w = if hz > lo && hz <= mid {
                (hz - lo) / (mid - lo)
            } else if hz > mid && hz < hi {
                (hi - hz) / (hi - mid)
            } else {
                0.0
            };
            row[bin] = w;
        }
        let total: f64 = row.sum();
        if total > 0.0 {
            row.mapv_inplace(|w| w / total);
        } else {
            // Filter narrower than a bin: take the bin nearest its centre.
            let bin = ((mid / bin_hz).round() as usize).min(n_bins - 1);
            row[bin] = 1.0;
        }
    }
    bank
}

/// Orthonormal DCT-II basis, `keep x n`.
fn dct_basis(n: usize, keep: usize) -> Array2<f64> {
    let scale0 = (1.0 / n as f64).sqrt();
    let scale = (2.0 / n as f64).sqrt();
    Array2::from_shape_fn((keep, n), |(k, i)| {
        let s = if k == 0 { scale0 } else { scale };
        s * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos()
    })
}

/// Orthonormal DCT-II of each row, truncated to the first `keep` coefficients.
pub fn dct_rows(matrix: ArrayView2<'_, f64>, keep: usize) -> Result<Array2<f64>> {
    let n = matrix.ncols();
    if keep > n {
        return Err(Error::invalid(format!(
            "cannot keep {keep} DCT coefficients of rows of length {n}"
        )));
    }
    Ok(matrix.dot(&dct_basis(n, keep).t()))
}

/// Inverse of a full-length [`dct_rows`].
pub fn idct_rows(coeffs: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = coeffs.ncols();
    coeffs.dot(&dct_basis(n, n))
}

/// Delta coefficients by linear regression over `±DELTA_WIDTH` frames with
/// edge replication.
pub fn deltas(static_feats: ArrayView2<'_, f64>) -> Array2<f64> {
    let t_len = static_feats.nrows() as isize;
    let denom: f64 = 2.0 * (1..=DELTA_WIDTH).map(|n| (n * n) as f64).sum::<f64>();
    let mut out = Array2::zeros(static_feats.raw_dim());
    let clamp = |t: isize| t.clamp(0, t_len - 1) as usize;
    for t in 0..t_len {
        let mut row = out.row_mut(t as usize);
        for n in 1..=DELTA_WIDTH as isize {
            let ahead = static_feats.row(clamp(t + n));
            let behind = static_feats.row(clamp(t - n));
            for ((o, a), b) in row.iter_mut().zip(ahead).zip(behind) {
                *o += n as f64 * (a - b);
            }
        }
        row.mapv_inplace(|v| v / denom);
    }
    out
}

/// Static log-mel cepstra (`T x n_ceps`) without deltas.
pub fn cepstra(spec: &Spectrogram, n_mel: usize, n_ceps: usize) -> Result<Array2<f64>> {
    if n_ceps == 0 || n_ceps > n_mel || n_mel > spec.n_bins() {
        return Err(Error::invalid(format!(
            "need 0 < n_ceps ({n_ceps}) <= n_mel ({n_mel}) <= bins ({})",
            spec.n_bins()
        )));
    }
    let bank = mel_filterbank(n_mel, spec.n_bins(), spec.bin_hz());
    let power = spec.values().mapv(|m| m * m);
    // (n_mel x F) . (F x T) -> transpose to frames x mel
    let log_mel = bank
        .dot(&power)
        .reversed_axes()
        .mapv(|e| e.max(LOG_FLOOR).ln());
    dct_rows(log_mel.view(), n_ceps)
}

/// MFCCs with appended deltas: `T x 2*n_ceps`.
pub fn mfcc(spec: &Spectrogram, n_mel: usize, n_ceps: usize) -> Result<FeatureSequence> {
    let stat = cepstra(spec, n_mel, n_ceps)?;
    let delta = deltas(stat.view());
    let frames = ndarray::concatenate(Axis(1), &[stat.view(), delta.view()])
        .map_err(|e| Error::Numerical(e.to_string()))?;
    FeatureSequence::new(frames)
}
