//! Fusion of scene and RIR evidence, and the per-label incremental confidence.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{extract, ClipFeatures, FeatureConfig};
use crate::gmm::{fit_1d, GaussianMixture, GmmConfig, ScenePair};
use crate::svm::SvmModel;
use crate::dsp::AudioClip;

pub const DEFAULT_ALPHA: f64 = 0.10;
pub const DEFAULT_OMEGA: f64 = 4.0;
pub const SCORE_COMPONENTS: usize = 4;
/// Lower clamp on per-recording log densities, `ln(1e-300)`.
pub const LOG_DENSITY_FLOOR: f64 = -690.775_527_898_213_7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridScore {
    pub p: f64,
    pub p_shifted: f64,
}

/// `p = alpha * scene_ratio + (1 - alpha) * rir_ratio`, `p' = p - t_c`.
pub fn hybrid_score(scene_ratio: f64, rir_ratio: f64, alpha: f64, t_c: f64) -> Result<HybridScore> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    if !(scene_ratio.is_finite() && rir_ratio.is_finite() && t_c.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite score input: scene {scene_ratio}, rir {rir_ratio}, threshold {t_c}"
        )));
    }
    let p = alpha * scene_ratio + (1.0 - alpha) * rir_ratio;
    Ok(HybridScore { p, p_shifted: p - t_c })
}

/// Densities of the shifted score under the label and under its complement.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDistributions {
    pub pos: GaussianMixture,
    pub neg: GaussianMixture,
}

impl ScoreDistributions {
    pub fn new(pos: GaussianMixture, neg: GaussianMixture) -> Result<Self> {
        if pos.dim() != 1 || neg.dim() != 1 {
            return Err(Error::invalid("score distributions must be one-dimensional"));
        }
        Ok(Self { pos, neg })
    }

    /// Clamped `(log P(p'|C), log P(p'|not C))`.
    pub fn log_densities(&self, p_shifted: f64) -> (f64, f64) {
        let clamp = |v: f64| if v.is_nan() { LOG_DENSITY_FLOOR } else { v.max(LOG_DENSITY_FLOOR) };
        (
            clamp(self.pos.log_pdf_scalar(p_shifted)),
            clamp(self.neg.log_pdf_scalar(p_shifted)),
        )
    }
}

pub fn fit_score_distributions(pos: &[f64], neg: &[f64], seed: u64) -> Result<ScoreDistributions> {
    for (name, scores) in [("positive", pos), ("negative", neg)] {
        if scores.len() < SCORE_COMPONENTS {
            return Err(Error::InsufficientData(format!(
                "{} {name} scores, need at least {SCORE_COMPONENTS}",
                scores.len()
            )));
        }
    }
    let cfg = GmmConfig {
        seed,
        ..GmmConfig::with_components(SCORE_COMPONENTS)
    };
    ScoreDistributions::new(fit_1d(pos, &cfg)?.model, fit_1d(neg, &cfg)?.model)
}

/// Running evidence for one label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelEvidence {
    pub n: u64,
    pub sum_log_pos: f64,
    pub sum_log_neg: f64,
    pub omega: f64,
}

impl LabelEvidence {
    pub fn new(omega: f64) -> Result<Self> {
        if !(omega > 0.0 && omega.is_finite()) {
            return Err(Error::invalid(format!("omega {omega} must be positive")));
        }
        Ok(Self {
            n: 0,
            sum_log_pos: 0.0,
            sum_log_neg: 0.0,
            omega,
        })
    }

    pub fn absorb(&mut self, log_pos: f64, log_neg: f64) {
        self.n += 1;
        self.sum_log_pos += log_pos.max(LOG_DENSITY_FLOOR);
        self.sum_log_neg += log_neg.max(LOG_DENSITY_FLOOR);
    }

    /// `1 / (1 + omega * prod P(p'|not C) / prod P(p'|C))` in log form.
    pub fn confidence(&self) -> f64 {
        // exp(0) = 1 keeps the empty ledger at exactly 1 / (1 + omega)
        1.0 / (1.0 + self.omega * (self.sum_log_neg - self.sum_log_pos).exp())
    }
}

/// Per-label evidence sums. Labels never interact.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceLedger {
    labels: BTreeMap<String, LabelEvidence>,
}

impl ConfidenceLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// A fresh ledger with one entry per detector.
    pub fn for_detectors(detectors: &[RoomDetector]) -> Result<Self> {
        let mut ledger = Self::new();
        for d in detectors {
            ledger.init_label(&d.label, d.omega)?;
        }
        Ok(ledger)
    }

    /// Adds a label if it is missing; existing evidence is kept.
    pub fn init_label(&mut self, label: &str, omega: f64) -> Result<()> {
        if !self.labels.contains_key(label) {
            self.labels.insert(label.to_string(), LabelEvidence::new(omega)?);
        }
        Ok(())
    }

    pub fn get(&self, label: &str) -> Option<&LabelEvidence> {
        self.labels.get(label)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &LabelEvidence)> {
        self.labels.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn insert(&mut self, label: &str, evidence: LabelEvidence) {
        self.labels.insert(label.to_string(), evidence);
    }

    pub fn update(&mut self, label: &str, p_shifted: f64, dists: &ScoreDistributions) -> Result<()> {
        let entry = self
            .labels
            .get_mut(label)
            .ok_or_else(|| Error::invalid(format!("label `{label}` has no ledger entry")))?;
        let (lp, ln) = dists.log_densities(p_shifted);
        entry.absorb(lp, ln);
        Ok(())
    }

    pub fn confidence(&self, label: &str) -> Result<f64> {
        self.labels
            .get(label)
            .map(LabelEvidence::confidence)
            .ok_or_else(|| Error::invalid(format!("label `{label}` has no ledger entry")))
    }
}

/// One label's trained detector.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomDetector {
    pub label: String,
    pub scene: ScenePair,
    pub svm: SvmModel,
    pub alpha: f64,
    pub t_c: f64,
    pub dists: ScoreDistributions,
    pub omega: f64,
}

impl RoomDetector {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !self.t_c.is_finite() {
            return Err(Error::invalid("threshold must be finite"));
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(Error::invalid("omega must be positive"));
        }
        if self.dists.pos.dim() != 1 || self.dists.neg.dim() != 1 {
            return Err(Error::invalid("score distributions must be one-dimensional"));
        }
        self.svm.validate()
    }

    /// `(scene ratio, rir ratio)` for one clip.
    pub fn ratios(&self, features: &ClipFeatures) -> Result<(f64, f64)> {
        let (a_in, a_out) = self.scene.sequence_score(&features.mfcc)?;
        let (r_in, r_out) = self.svm.predict_log_probs(ndarray::ArrayView1::from(&features.rir.0))?;
        Ok((a_in - a_out, r_in - r_out))
    }

    pub fn score(&self, features: &ClipFeatures) -> Result<HybridScore> {
        let (scene, rir) = self.ratios(features)?;
        hybrid_score(scene, rir, self.alpha, self.t_c)
    }
}

/// Result of one recording for one label.
#[derive(Debug)]
pub struct LabelOutcome {
    pub label: String,
    pub result: Result<(HybridScore, f64)>,
}

/// Scores precomputed features against every detector and absorbs the
/// evidence. A failing label leaves its ledger entry untouched.
pub fn absorb_features(
    detectors: &[RoomDetector],
    features: &ClipFeatures,
    ledger: &mut ConfidenceLedger,
) -> Vec<LabelOutcome> {
    detectors
        .iter()
        .map(|d| {
            let result = (|| {
                ledger.init_label(&d.label, d.omega)?;
                let score = d.score(features)?;
                ledger.update(&d.label, score.p_shifted, &d.dists)?;
                Ok((score, ledger.confidence(&d.label)?))
            })()
            .map_err(|e| Error::for_label(&d.label, e));
            LabelOutcome {
                label: d.label.clone(),
                result,
            }
        })
        .collect()
}

pub fn infer_recording(
    detectors: &[RoomDetector],
    feature_cfg: &FeatureConfig,
    clip: &AudioClip,
    ledger: &mut ConfidenceLedger,
) -> Result<Vec<LabelOutcome>> {
    let features = extract(clip, feature_cfg)?;
    Ok(absorb_features(detectors, &features, ledger))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub recording_index: usize,
    pub label: String,
    pub p_i: f64,
    pub p_i_shifted: f64,
    pub confidence: f64,
}

pub const TRACE_HEADER: [&str; 5] = ["recording_index", "label", "p_i", "p_i_shifted", "confidence"];

/// Writes the trace CSV; the header is present even when `rows` is empty.
pub fn write_trace<W: Write>(out: W, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(TRACE_HEADER)
            .map_err(|e| Error::invalid(format!("writing trace: {e}")))?;
    }
    for row in rows {
        w.serialize(row).map_err(|e| Error::invalid(format!("writing trace: {e}")))?;
    }
    w.flush().map_err(|e| Error::invalid(format!("writing trace: {e}")))?;
    Ok(())
}
