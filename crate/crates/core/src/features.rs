//! Per-clip feature extraction shared by training and inference.

use serde::{Deserialize, Serialize};

use crate::dsp::{mfcc, stft, AudioClip, FeatureSequence};
use crate::error::{Error, Result};
use crate::nmfd::{estimate_rir, parametrize_rir, DctAxis, NmfdConfig, RirFeature, RIR_CEPSTRA};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub window_s: f64,
    pub hop_s: f64,
    pub n_mel: usize,
    pub n_ceps: usize,
    pub nmfd: NmfdConfig,
    /// Frequency bands the STFT is averaged into before deconvolution; 0 keeps every bin.
    pub nmfd_bands: usize,
    pub dct_axis: DctAxis,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            window_s: 0.064,
            hop_s: 0.032,
            n_mel: 40,
            n_ceps: 20,
            nmfd: NmfdConfig::default(),
            nmfd_bands: 128,
            dct_axis: DctAxis::Frequency,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ceps == 0 || self.n_ceps > self.n_mel {
            return Err(Error::invalid(format!(
                "n_ceps {} must lie in 1..={}",
                self.n_ceps, self.n_mel
            )));
        }
        self.nmfd.validate()
    }

    /// Length of the RIR descriptor, when it does not depend on the input
    /// spectrogram size.
    pub fn rir_dim(&self) -> Option<usize> {
        match self.dct_axis {
            DctAxis::Frequency => Some(RIR_CEPSTRA * self.nmfd.k),
            DctAxis::Time => None,
        }
    }
}

/// Everything the detectors need from one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFeatures {
    pub mfcc: FeatureSequence,
    pub rir: RirFeature,
}

pub fn extract(clip: &AudioClip, cfg: &FeatureConfig) -> Result<ClipFeatures> {
    cfg.validate()?;
    let spec = stft(clip, cfg.window_s, cfg.hop_s)?;
    let mfcc = mfcc(&spec, cfg.n_mel, cfg.n_ceps)?;
    let pooled = spec.pool_bands(cfg.nmfd_bands);
    let out = estimate_rir(&pooled, &cfg.nmfd)?;
    let rir = parametrize_rir(&out.rir, cfg.dct_axis)?;
    Ok(ClipFeatures { mfcc, rir })
}
