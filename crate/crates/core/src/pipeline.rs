//! End-to-end training, evaluation and inference over a corpus manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use crate::eval::{
    alpha_grid, compute_eer, confusion_matrix, room_folds, sweep_alpha, ConfusionMatrix, EerRow, LabelScores,
    RoomConfidences, SweepResult,
};
use crate::features::{extract, ClipFeatures, FeatureConfig};
use crate::fusion::{
    absorb_features, fit_score_distributions, hybrid_score, ConfidenceLedger, RoomDetector, TraceRow,
};
use crate::gmm::{fit, ScenePair};
use crate::persistence::{BundleMetadata, ModelBundle};
use crate::svm::{calibrate, grid_search, train, GridSpec, SvmModel, SvmParams};
use crate::synthgen::{mix_seed, CorpusManifest};

/// Features of every manifest row, in manifest order.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    pub features: Vec<ClipFeatures>,
}

pub fn extract_bank(manifest: &CorpusManifest, cfg: &FeatureConfig) -> Result<FeatureBank> {
    let features = manifest
        .rows
        .iter()
        .map(|row| {
            let path = manifest.resolve(row);
            let clip = AudioClip::read_wav(&path)?;
            extract(&clip, cfg).map_err(|e| Error::Manifest {
                path,
                message: e.to_string(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(FeatureBank { features })
}

/// A manifest with its features, the unit that training and evaluation work on.
#[derive(Clone, Copy)]
pub struct Corpus<'a> {
    pub manifest: &'a CorpusManifest,
    pub bank: &'a FeatureBank,
}

impl<'a> Corpus<'a> {
    pub fn new(manifest: &'a CorpusManifest, bank: &'a FeatureBank) -> Result<Self> {
        if manifest.rows.len() != bank.features.len() {
            return Err(Error::invalid("feature bank does not match the manifest"));
        }
        Ok(Self { manifest, bank })
    }

    fn label(&self, i: usize) -> &'a str {
        &self.manifest.rows[i].label
    }

    fn room(&self, i: usize) -> &'a str {
        &self.manifest.rows[i].room_id
    }

    fn labels_of(&self, idx: &[usize]) -> Vec<String> {
        let set: BTreeSet<&str> = idx.iter().map(|&i| self.label(i)).collect();
        set.into_iter().map(String::from).collect()
    }

    fn frames(&self, idx: &[usize]) -> Array2<f64> {
        let views: Vec<ArrayView2<'_, f64>> = idx.iter().map(|&i| self.bank.features[i].mfcc.frames().view()).collect();
        concatenate(Axis(0), &views).expect("frame blocks share a width")
    }

    fn rir_matrix(&self, idx: &[usize]) -> Array2<f64> {
        let dim = self.bank.features[idx[0]].rir.0.len();
        let flat: Vec<f64> = idx.iter().flat_map(|&i| self.bank.features[i].rir.0.iter().copied()).collect();
        Array2::from_shape_vec((idx.len(), dim), flat).expect("RIR features share a length")
    }
}

fn label_seed(cfg: &RunConfig, label: &str, purpose: u64, fold: u64) -> u64 {
    let tag = label.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(u64::from(b)));
    mix_seed(&[cfg.seed, tag, purpose, fold])
}

/// Scene models for `label`: its own frames against a pool of the same size
/// drawn in equal shares from every other label.
fn fit_scene(corpus: Corpus<'_>, label: &str, idx: &[usize], cfg: &RunConfig, seed: u64) -> Result<ScenePair> {
    let own: Vec<usize> = idx.iter().copied().filter(|&i| corpus.label(i) == label).collect();
    let in_frames = corpus.frames(&own);
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in idx.iter().filter(|&&i| corpus.label(i) != label) {
        by_label.entry(corpus.label(i)).or_default().push(i);
    }
    if by_label.is_empty() {
        return Err(Error::InsufficientData("no out-of-class recordings".into()));
    }
    let pools: Vec<Array2<f64>> = by_label.values().map(|rows| corpus.frames(rows)).collect();
    let share = in_frames.nrows().div_ceil(pools.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let picked: Vec<Array2<f64>> = pools
        .iter()
        .map(|p| {
            let mut rows = sample(&mut rng, p.nrows(), share.min(p.nrows())).into_vec();
            rows.sort_unstable();
            p.select(Axis(0), &rows)
        })
        .collect();
    let views: Vec<ArrayView2<'_, f64>> = picked.iter().map(|p| p.view()).collect();
    let out_frames = concatenate(Axis(0), &views).expect("frame blocks share a width");
    let in_model = fit(in_frames.view(), &cfg.gmm(seed))?.model;
    let out_model = fit(out_frames.view(), &cfg.gmm(seed.wrapping_add(1)))?.model;
    ScenePair::new(in_model, out_model)
}

fn svm_targets(corpus: Corpus<'_>, label: &str, idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| if corpus.label(i) == label { 1.0 } else { -1.0 }).collect()
}

/// Grid-searched, Platt-calibrated RIR detector.
fn fit_svm(corpus: Corpus<'_>, label: &str, idx: &[usize], grid: &GridSpec, cfg: &RunConfig, seed: u64) -> Result<SvmModel> {
    let x = corpus.rir_matrix(idx);
    let y = svm_targets(corpus, label, idx);
    let best = grid_search(x.view(), &y, grid, cfg.svm_tol, seed)?;
    let params = SvmParams {
        tol: cfg.svm_tol,
        ..SvmParams::new(best.c, best.gamma)
    };
    let model = train(x.view(), &y, &params)?;
    calibrate(&model, &best.cv_decision_values, &y)
}

/// Raw `(scene ratio, rir ratio)` of one clip under a detector's models.
fn raw_ratios(scene: &ScenePair, svm: &SvmModel, f: &ClipFeatures) -> Result<(f64, f64)> {
    let (a_in, a_out) = scene.sequence_score(&f.mfcc)?;
    let (r_in, r_out) = svm.predict_log_probs(ndarray::ArrayView1::from(&f.rir.0))?;
    Ok((a_in - a_out, r_in - r_out))
}

fn train_label(corpus: Corpus<'_>, label: &str, idx: &[usize], cfg: &RunConfig) -> Result<RoomDetector> {
    let scene = fit_scene(corpus, label, idx, cfg, label_seed(cfg, label, 1, 0))?;
    let svm = fit_svm(corpus, label, idx, &cfg.grid(), cfg, label_seed(cfg, label, 2, 0))?;

    // held-out fused scores from room-grouped folds inside the training set
    let rooms: Vec<(String, String)> = idx
        .iter()
        .map(|&i| (corpus.room(i).to_string(), corpus.label(i).to_string()))
        .collect();
    let folds = room_folds(&rooms, cfg.calibration_folds, label_seed(cfg, label, 3, 0))?;
    let fixed = GridSpec {
        c_values: vec![svm.c],
        gamma_values: vec![svm.gamma],
        folds: cfg.svm_folds,
    };
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for f in 0..cfg.calibration_folds {
        let (held, kept): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| folds[corpus.room(i)] == f);
        let seed = label_seed(cfg, label, 4, f as u64);
        let scene_f = fit_scene(corpus, label, &kept, cfg, seed)?;
        let svm_f = fit_svm(corpus, label, &kept, &fixed, cfg, seed)?;
        for &i in &held {
            let (a, r) = raw_ratios(&scene_f, &svm_f, &corpus.bank.features[i])?;
            let p = hybrid_score(a, r, cfg.alpha, 0.0)?.p;
            if corpus.label(i) == label {
                pos.push(p);
            } else {
                neg.push(p);
            }
        }
    }
    let t_c = compute_eer(&pos, &neg)?.threshold;
    let shift = |v: &[f64]| v.iter().map(|p| p - t_c).collect::<Vec<_>>();
    let dists = fit_score_distributions(&shift(&pos), &shift(&neg), label_seed(cfg, label, 5, 0))?;
    let det = RoomDetector {
        label: label.to_string(),
        scene,
        svm,
        alpha: cfg.alpha,
        t_c,
        dists,
        omega: cfg.omega,
    };
    det.validate()?;
    Ok(det)
}

/// Trains one detector per label present in `idx`.
pub fn train_detectors(corpus: Corpus<'_>, idx: &[usize], cfg: &RunConfig) -> Result<Vec<RoomDetector>> {
    cfg.validate()?;
    let labels = corpus.labels_of(idx);
    if labels.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "training needs at least 2 labels, found {}",
            labels.len()
        )));
    }
    for label in &labels {
        let rooms: BTreeSet<&str> = idx.iter().filter(|&&i| corpus.label(i) == label).map(|&i| corpus.room(i)).collect();
        if rooms.len() < cfg.calibration_folds {
            return Err(Error::for_label(
                label,
                Error::InsufficientData(format!(
                    "{} rooms, need at least {} for threshold calibration",
                    rooms.len(),
                    cfg.calibration_folds
                )),
            ));
        }
    }
    labels
        .iter()
        .map(|label| train_label(corpus, label, idx, cfg).map_err(|e| Error::for_label(label, e)))
        .collect()
}

pub fn train_bundle(corpus: Corpus<'_>, idx: &[usize], cfg: &RunConfig) -> Result<ModelBundle> {
    let detectors = train_detectors(corpus, idx, cfg)?;
    let buildings: BTreeSet<String> = idx.iter().map(|&i| corpus.manifest.rows[i].building_id.clone()).collect();
    let bundle = ModelBundle {
        metadata: BundleMetadata {
            seed: cfg.seed,
            train_buildings: buildings.into_iter().collect(),
            config: serde_json::to_value(cfg).map_err(|e| Error::invalid(e.to_string()))?,
        },
        features: cfg.features(),
        detectors,
    };
    bundle.validate()?;
    Ok(bundle)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTraceRow {
    pub room_id: String,
    pub true_label: String,
    pub recording_index: usize,
    pub label: String,
    pub p_i: f64,
    pub p_i_shifted: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub labels: Vec<String>,
    /// Per-label EERs, averaged over folds.
    pub eer_rows: Vec<EerRow>,
    /// Total EER per alpha, averaged over folds.
    pub sweep: SweepResult,
    pub confusion: ConfusionMatrix,
    pub traces: Vec<EvalTraceRow>,
    /// Per label, the first clip count at which the true-label confidence,
    /// averaged over that label's rooms, reaches 0.99.
    pub reach_099: BTreeMap<String, Option<usize>>,
    pub folds: usize,
}

impl EvalReport {
    pub fn scene_total(&self) -> f64 {
        mean(self.eer_rows.iter().map(|r| r.scene_eer))
    }

    pub fn rir_total(&self) -> f64 {
        mean(self.eer_rows.iter().map(|r| r.rir_eer))
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Scores of one test split under one trained bank.
struct FoldOutcome {
    eer: Vec<EerRow>,
    sweep_totals: Vec<f64>,
    rooms: Vec<RoomConfidences>,
    traces: Vec<EvalTraceRow>,
    /// room -> per-clip true-label confidence
    true_traces: BTreeMap<String, (String, Vec<f64>)>,
}

fn evaluate_split(
    corpus: Corpus<'_>,
    detectors: &[RoomDetector],
    test: &[usize],
    alphas: &[f64],
) -> Result<FoldOutcome> {
    let mut scores: Vec<LabelScores> = detectors
        .iter()
        .map(|d| LabelScores {
            label: d.label.clone(),
            ..LabelScores::default()
        })
        .collect();
    for &i in test {
        for (d, s) in detectors.iter().zip(scores.iter_mut()) {
            let (a, r) = d.ratios(&corpus.bank.features[i]).map_err(|e| Error::for_label(&d.label, e))?;
            s.scene.push(a);
            s.rir.push(r);
            s.is_pos.push(corpus.label(i) == d.label);
        }
    }
    let mut eer = Vec::new();
    for (d, s) in detectors.iter().zip(&scores) {
        eer.push(EerRow {
            label: d.label.clone(),
            scene_eer: s.eer_of(&s.scene)?.eer,
            rir_eer: s.eer_of(&s.rir)?.eer,
            fused_eer: s.eer_of(&s.fused(d.alpha))?.eer,
        });
    }
    let sweep_totals = sweep_alpha(&scores, alphas)?.total_eer;

    // per-room evidence accumulation in manifest order
    let mut by_room: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in test {
        by_room.entry(corpus.room(i)).or_default().push(i);
    }
    let mut rooms = Vec::new();
    let mut traces = Vec::new();
    let mut true_traces = BTreeMap::new();
    for (room, clips) in by_room {
        let truth = corpus.label(clips[0]).to_string();
        let mut ledger = ConfidenceLedger::for_detectors(detectors)?;
        let mut own = Vec::new();
        for (n, &i) in clips.iter().enumerate() {
            for outcome in absorb_features(detectors, &corpus.bank.features[i], &mut ledger) {
                let (score, conf) = outcome.result?;
                if outcome.label == truth {
                    own.push(conf);
                }
                traces.push(EvalTraceRow {
                    room_id: room.to_string(),
                    true_label: truth.clone(),
                    recording_index: n,
                    label: outcome.label,
                    p_i: score.p,
                    p_i_shifted: score.p_shifted,
                    confidence: conf,
                });
            }
        }
        let confidences = detectors
            .iter()
            .map(|d| Ok((d.label.clone(), ledger.confidence(&d.label)?)))
            .collect::<Result<_>>()?;
        true_traces.insert(room.to_string(), (truth.clone(), own));
        rooms.push(RoomConfidences {
            room_id: room.to_string(),
            true_label: truth,
            confidences,
        });
    }
    Ok(FoldOutcome {
        eer,
        sweep_totals,
        rooms,
        traces,
        true_traces,
    })
}

fn assemble(labels: Vec<String>, alphas: Vec<f64>, outcomes: Vec<FoldOutcome>) -> Result<EvalReport> {
    let folds = outcomes.len();
    let eer_rows = labels
        .iter()
        .map(|l| {
            let rows: Vec<&EerRow> = outcomes.iter().filter_map(|o| o.eer.iter().find(|r| &r.label == l)).collect();
            EerRow {
                label: l.clone(),
                scene_eer: mean(rows.iter().map(|r| r.scene_eer)),
                rir_eer: mean(rows.iter().map(|r| r.rir_eer)),
                fused_eer: mean(rows.iter().map(|r| r.fused_eer)),
            }
        })
        .collect();
    let total_eer: Vec<f64> = (0..alphas.len())
        .map(|k| mean(outcomes.iter().map(|o| o.sweep_totals[k])))
        .collect();
    let mut best = 0;
    for k in 1..alphas.len() {
        if total_eer[k] < total_eer[best] || (total_eer[k] == total_eer[best] && alphas[k] < alphas[best]) {
            best = k;
        }
    }
    let sweep = SweepResult {
        best_alpha: alphas[best],
        alphas,
        total_eer,
    };
    let rooms: Vec<RoomConfidences> = outcomes.iter().flat_map(|o| o.rooms.iter().cloned()).collect();
    let confusion = confusion_matrix(&rooms, &labels)?;

    let mut reach_099 = BTreeMap::new();
    for l in &labels {
        let series: Vec<&Vec<f64>> = outcomes
            .iter()
            .flat_map(|o| o.true_traces.values())
            .filter(|(t, _)| t == l)
            .map(|(_, s)| s)
            .collect();
        let len = series.iter().map(|s| s.len()).min().unwrap_or(0);
        let hit = (0..len).find(|&n| mean(series.iter().map(|s| s[n])) >= 0.99).map(|n| n + 1);
        reach_099.insert(l.clone(), hit);
    }
    Ok(EvalReport {
        labels,
        eer_rows,
        sweep,
        confusion,
        traces: outcomes.into_iter().flat_map(|o| o.traces).collect(),
        reach_099,
        folds,
    })
}

/// Room-grouped k-fold cross-validation.
pub fn cross_validate(corpus: Corpus<'_>, cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let rows = &corpus.manifest.rows;
    let rooms: Vec<(String, String)> = rows.iter().map(|r| (r.room_id.clone(), r.label.clone())).collect();
    let assignment = room_folds(&rooms, cfg.cv_folds, mix_seed(&[cfg.seed, 0xF01D]))?;
    let labels = corpus.manifest.labels();
    let alphas = alpha_grid(cfg.alpha_step)?;
    let mut outcomes = Vec::new();
    for f in 0..cfg.cv_folds {
        let (test, train_idx): (Vec<usize>, Vec<usize>) =
            (0..rows.len()).partition(|&i| assignment[&rows[i].room_id] == f);
        if corpus.labels_of(&test) != labels {
            return Err(Error::InsufficientData(format!(
                "fold {f} does not contain every label; add rooms or reduce cv_folds"
            )));
        }
        let detectors = train_detectors(corpus, &train_idx, cfg)?;
        outcomes.push(evaluate_split(corpus, &detectors, &test, &alphas)?);
    }
    assemble(labels, alphas, outcomes)
}

fn unseen_split(corpus: Corpus<'_>, building: &str) -> Result<(Vec<usize>, Vec<usize>)> {
    let rows = &corpus.manifest.rows;
    let (test, train_idx): (Vec<usize>, Vec<usize>) = (0..rows.len()).partition(|&i| rows[i].building_id == building);
    if test.is_empty() {
        return Err(Error::InsufficientData(format!("no recordings from building `{building}`")));
    }
    Ok((test, train_idx))
}

/// Trains on every building except `cfg.test_building` and tests on it.
pub fn evaluate_unseen(corpus: Corpus<'_>, cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let (test, train_idx) = unseen_split(corpus, &cfg.test_building)?;
    let leaked: BTreeSet<&str> = train_idx.iter().map(|&i| corpus.manifest.rows[i].building_id.as_str()).collect();
    if leaked.contains(cfg.test_building.as_str()) {
        return Err(Error::invalid(format!("building `{}` appears in training rows", cfg.test_building)));
    }
    let detectors = train_detectors(corpus, &train_idx, cfg)?;
    let labels = corpus.labels_of(&test);
    let alphas = alpha_grid(cfg.alpha_step)?;
    let outcome = evaluate_split(corpus, &detectors, &test, &alphas)?;
    assemble(labels, alphas, vec![outcome])
}

/// Evaluates an already trained bundle on one building it was not trained on.
pub fn evaluate_bundle_unseen(corpus: Corpus<'_>, bundle: &ModelBundle, building: &str, alpha_step: f64) -> Result<EvalReport> {
    if bundle.metadata.train_buildings.iter().any(|b| b == building) {
        return Err(Error::invalid(format!("building `{building}` was used to train this model")));
    }
    let (test, _) = unseen_split(corpus, building)?;
    let labels = corpus.labels_of(&test);
    if let Some(l) = labels.iter().find(|l| bundle.detector(l).is_none()) {
        return Err(Error::invalid(format!("model has no detector for `{l}`")));
    }
    let alphas = alpha_grid(alpha_step)?;
    let outcome = evaluate_split(corpus, &bundle.detectors, &test, &alphas)?;
    assemble(labels, alphas, vec![outcome])
}

/// A recording that could not be processed.
#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    pub recording_index: usize,
    pub path: String,
    pub message: String,
}

/// Absorbs each clip in order. Unreadable clips and failing labels are
/// reported and skipped.
pub fn infer_paths(
    bundle: &ModelBundle,
    paths: &[impl AsRef<Path>],
    ledger: &mut ConfidenceLedger,
) -> (Vec<TraceRow>, Vec<RowError>) {
    let start = bundle
        .detectors
        .iter()
        .filter_map(|d| ledger.get(&d.label).map(|e| e.n as usize))
        .max()
        .unwrap_or(0);
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (k, path) in paths.iter().enumerate() {
        let path = path.as_ref();
        let index = start + k;
        let features = AudioClip::read_wav(path).and_then(|clip| extract(&clip, &bundle.features));
        let features = match features {
            Ok(f) => f,
            Err(e) => {
                errors.push(RowError {
                    recording_index: index,
                    path: path.display().to_string(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        for outcome in absorb_features(&bundle.detectors, &features, ledger) {
            match outcome.result {
                Ok((score, confidence)) => rows.push(TraceRow {
                    recording_index: index,
                    label: outcome.label,
                    p_i: score.p,
                    p_i_shifted: score.p_shifted,
                    confidence,
                }),
                Err(e) => errors.push(RowError {
                    recording_index: index,
                    path: path.display().to_string(),
                    message: e.to_string(),
                }),
            }
        }
    }
    (rows, errors)
}
