//! Detector calibration and evaluation: equal error rate, fusion-weight sweep,
//! confusion matrices and room-grouped fold assignment.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Error rates at ascending thresholds. A score is accepted when `score >= threshold`.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub fnr: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

fn check_scores(pos: &[f64], neg: &[f64]) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InsufficientData(format!(
            "EER needs both classes, got {} positive and {} negative scores",
            pos.len(),
            neg.len()
        )));
    }
    if pos.iter().chain(neg).any(|s| !s.is_finite()) {
        return Err(Error::Numerical("EER scores must be finite".into()));
    }
    Ok(())
}

/// Midpoints between consecutive distinct scores, bracketed by one threshold
/// below the minimum and one above the maximum.
pub fn candidate_thresholds(pos: &[f64], neg: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = pos.iter().chain(neg).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let (lo, hi) = (all[0], all[all.len() - 1]);
    let delta = if hi > lo { 0.5 * (hi - lo) } else { 0.5 };
    let mut out = Vec::with_capacity(all.len() + 1);
    out.push(lo - delta);
    out.extend(all.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    out.push(hi + delta);
    out
}

pub fn roc_curve(pos: &[f64], neg: &[f64]) -> Result<RocCurve> {
    check_scores(pos, neg)?;
    let thresholds = candidate_thresholds(pos, neg);
    let mut p = pos.to_vec();
    let mut n = neg.to_vec();
    p.sort_by(f64::total_cmp);
    n.sort_by(f64::total_cmp);
    let (np, nn) = (p.len() as f64, n.len() as f64);
    let (mut ip, mut in_) = (0usize, 0usize);
    let mut fpr = Vec::with_capacity(thresholds.len());
    let mut fnr = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        while ip < p.len() && p[ip] < t {
            ip += 1;
        }
        while in_ < n.len() && n[in_] < t {
            in_ += 1;
        }
        fpr.push((n.len() - in_) as f64 / nn);
        fnr.push(ip as f64 / np);
    }
    Ok(RocCurve { thresholds, fpr, fnr })
}

/// Locates the FPR = FNR point on a curve: the first threshold where the
/// rates are equal, otherwise linear interpolation across the first sign
/// change of `FPR - FNR`.
pub fn eer_from_curve(curve: &RocCurve) -> EerResult {
    let d: Vec<f64> = curve.fpr.iter().zip(&curve.fnr).map(|(a, b)| a - b).collect();
    if let Some(j) = d.iter().position(|&v| v == 0.0) {
        return EerResult {
            eer: curve.fpr[j],
            threshold: curve.thresholds[j],
        };
    }
    // d starts at +1 (everything accepted) and ends at -1
    let j = d
        .windows(2)
        .position(|w| w[0] > 0.0 && w[1] < 0.0)
        .expect("rate difference changes sign");
    let t = d[j] / (d[j] - d[j + 1]);
    EerResult {
        eer: curve.fpr[j] + t * (curve.fpr[j + 1] - curve.fpr[j]),
        threshold: curve.thresholds[j] + t * (curve.thresholds[j + 1] - curve.thresholds[j]),
    }
}

pub fn compute_eer(pos: &[f64], neg: &[f64]) -> Result<EerResult> {
    Ok(eer_from_curve(&roc_curve(pos, neg)?))
}

/// Per-clip detector outputs for one label.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelScores {
    pub label: String,
    pub scene: Vec<f64>,
    pub rir: Vec<f64>,
    /// True when the clip belongs to the label.
    pub is_pos: Vec<bool>,
}

impl LabelScores {
    fn check(&self) -> Result<()> {
        if self.scene.len() != self.is_pos.len() || self.rir.len() != self.is_pos.len() {
            return Err(Error::invalid(format!("label `{}`: score lists are not aligned", self.label)));
        }
        Ok(())
    }

    /// Fused scores `alpha * scene + (1 - alpha) * rir`.
    pub fn fused(&self, alpha: f64) -> Vec<f64> {
        self.scene
            .iter()
            .zip(&self.rir)
            .map(|(a, r)| alpha * a + (1.0 - alpha) * r)
            .collect()
    }

    pub fn eer_of(&self, scores: &[f64]) -> Result<EerResult> {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (s, &p) in scores.iter().zip(&self.is_pos) {
            if p {
                pos.push(*s);
            } else {
                neg.push(*s);
            }
        }
        compute_eer(&pos, &neg).map_err(|e| Error::for_label(&self.label, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub alphas: Vec<f64>,
    /// Unweighted mean EER across labels, per alpha.
    pub total_eer: Vec<f64>,
    pub best_alpha: f64,
}

pub fn total_eer(scores: &[LabelScores], alpha: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("no labels to evaluate"));
    }
    let mut sum = 0.0;
    for s in scores {
        s.check()?;
        sum += s.eer_of(&s.fused(alpha))?.eer;
    }
    Ok(sum / scores.len() as f64)
}

/// Total EER for every alpha; the best alpha is the argmin, ties going to
/// the smaller alpha.
pub fn sweep_alpha(scores: &[LabelScores], alphas: &[f64]) -> Result<SweepResult> {
    if alphas.is_empty() {
        return Err(Error::invalid("alpha grid is empty"));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::invalid(format!("alpha {a} outside [0, 1]")));
    }
    let total = alphas
        .iter()
        .map(|&a| total_eer(scores, a))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for i in 1..alphas.len() {
        if total[i] < total[best] || (total[i] == total[best] && alphas[i] < alphas[best]) {
            best = i;
        }
    }
    Ok(SweepResult {
        alphas: alphas.to_vec(),
        best_alpha: alphas[best],
        total_eer: total,
    })
}

/// `{0, step, ..., 1}`.
pub fn alpha_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::invalid(format!("alpha step {step} must lie in (0, 1]")));
    }
    let n = (1.0 / step).round() as usize;
    Ok((0..=n).map(|i| (i as f64 * step).min(1.0)).collect())
}

/// Final per-label confidences for one room.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomConfidences {
    pub room_id: String,
    pub true_label: String,
    pub confidences: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    /// Row: true label; column: candidate label; cell: mean final confidence.
    pub cells: Array2<f64>,
}

impl ConfusionMatrix {
    /// Whether the diagonal cell strictly exceeds every other cell of row `i`.
    pub fn row_dominant(&self, i: usize) -> bool {
        let row = self.cells.row(i);
        (0..row.len()).all(|j| j == i || row[i] > row[j])
    }

    pub fn dominant_rows(&self) -> usize {
        (0..self.labels.len()).filter(|&i| self.row_dominant(i)).count()
    }
}

pub fn confusion_matrix(rooms: &[RoomConfidences], labels: &[String]) -> Result<ConfusionMatrix> {
    let n = labels.len();
    let mut cells = Array2::zeros((n, n));
    for (i, truth) in labels.iter().enumerate() {
        let members: Vec<&RoomConfidences> = rooms.iter().filter(|r| &r.true_label == truth).collect();
        if members.is_empty() {
            return Err(Error::InsufficientData(format!("no rooms with true label `{truth}`")));
        }
        for (j, cand) in labels.iter().enumerate() {
            let mut sum = 0.0;
            for r in &members {
                sum += r.confidences.get(cand).copied().ok_or_else(|| {
                    Error::invalid(format!("room `{}` has no confidence for `{cand}`", r.room_id))
                })?;
            }
            cells[[i, j]] = sum / members.len() as f64;
        }
    }
    Ok(ConfusionMatrix {
        labels: labels.to_vec(),
        cells,
    })
}

/// Assigns each room to a fold, never splitting a room. Within each label
/// (in sorted order) rooms are shuffled by the seed and dealt round-robin,
/// the deal continuing across labels. Returns room id -> fold.
pub fn room_folds(rooms: &[(String, String)], folds: usize, seed: u64) -> Result<BTreeMap<String, usize>> {
    if folds < 2 {
        return Err(Error::invalid("cross-validation needs at least 2 folds"));
    }
    let mut by_label: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for (room, label) in rooms {
        by_label.entry(label.as_str()).or_default().insert(room.as_str());
    }
    let distinct: BTreeSet<&str> = rooms.iter().map(|(r, _)| r.as_str()).collect();
    if distinct.len() < folds {
        return Err(Error::InsufficientData(format!(
            "{} rooms cannot fill {folds} folds",
            distinct.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    let mut next = 0;
    for ids in by_label.values() {
        let mut ids: Vec<&str> = ids.iter().copied().collect();
        ids.shuffle(&mut rng);
        for id in ids {
            if out.insert(id.to_string(), next % folds).is_some() {
                return Err(Error::invalid(format!("room `{id}` carries more than one label")));
            }
            next += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EerRow {
    pub label: String,
    pub scene_eer: f64,
    pub rir_eer: f64,
    pub fused_eer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub total_eer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRow {
    pub true_label: String,
    pub candidate_label: String,
    pub mean_confidence: f64,
}

impl ConfusionMatrix {
    pub fn rows(&self) -> Vec<ConfusionRow> {
        let mut out = Vec::new();
        for (i, t) in self.labels.iter().enumerate() {
            for (j, c) in self.labels.iter().enumerate() {
                out.push(ConfusionRow {
                    true_label: t.clone(),
                    candidate_label: c.clone(),
                    mean_confidence: self.cells[[i, j]],
                });
            }
        }
        out
    }
}

impl SweepResult {
    pub fn rows(&self) -> Vec<SweepRow> {
        self.alphas
            .iter()
            .zip(&self.total_eer)
            .map(|(&alpha, &total_eer)| SweepRow { alpha, total_eer })
            .collect()
    }
}

/// Writes serializable rows as CSV with a header.
pub fn write_csv<W: Write, R: Serialize>(out: W, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::invalid(format!("writing CSV: {e}")))?;
    }
    w.flush().map_err(|e| Error::invalid(format!("writing CSV: {e}")))?;
    Ok(())
}
