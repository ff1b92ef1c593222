//! Flat run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::fusion::{DEFAULT_ALPHA, DEFAULT_OMEGA};
use crate::gmm::GmmConfig;
use crate::nmfd::{DctAxis, NmfdConfig, SourceRule};
use crate::svm::GridSpec;
use crate::synthgen::CorpusConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub rooms_per_label: usize,
    pub clips_per_room: usize,
    pub buildings: usize,
    pub clip_duration_s: f64,

    pub window_s: f64,
    pub hop_s: f64,
    pub n_mel: usize,
    pub n_ceps: usize,

    pub nmfd_k: usize,
    pub nmfd_lambda: f64,
    pub nmfd_p: f64,
    pub nmfd_max_iters: usize,
    pub nmfd_rel_tol: f64,
    pub nmfd_init_decay: f64,
    pub nmfd_source_rule: SourceRule,
    pub nmfd_bands: usize,
    pub rir_dct_axis: DctAxis,

    pub gmm_components: usize,
    pub gmm_max_iters: usize,
    pub gmm_rel_tol: f64,
    /// Frames per mixture fit; larger training sets are subsampled.
    pub gmm_max_points: usize,
    pub gmm_var_floor_frac: f64,
    pub gmm_weight_floor: f64,

    pub svm_c_values: Vec<f64>,
    pub svm_gamma_values: Vec<f64>,
    pub svm_folds: usize,
    pub svm_tol: f64,

    pub alpha: f64,
    pub omega: f64,
    /// Room-grouped folds inside the training set used to fit the threshold
    /// and the score distributions.
    pub calibration_folds: usize,

    pub cv_folds: usize,
    pub alpha_step: f64,
    pub test_building: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        let feats = FeatureConfig::default();
        let gmm = GmmConfig::default();
        let grid = GridSpec::default();
        Self {
            seed: corpus.seed,
            rooms_per_label: corpus.rooms_per_label,
            clips_per_room: corpus.clips_per_room,
            buildings: corpus.buildings,
            clip_duration_s: corpus.clip_duration_s,
            window_s: feats.window_s,
            hop_s: feats.hop_s,
            n_mel: feats.n_mel,
            n_ceps: feats.n_ceps,
            nmfd_k: feats.nmfd.k,
            nmfd_lambda: feats.nmfd.lambda,
            nmfd_p: feats.nmfd.p,
            nmfd_max_iters: feats.nmfd.max_iters,
            nmfd_rel_tol: feats.nmfd.rel_tol,
            nmfd_init_decay: feats.nmfd.init_decay,
            nmfd_source_rule: feats.nmfd.source_rule,
            nmfd_bands: feats.nmfd_bands,
            rir_dct_axis: feats.dct_axis,
            gmm_components: gmm.n_components,
            gmm_max_iters: gmm.max_iters,
            gmm_rel_tol: gmm.rel_tol,
            gmm_max_points: 3000,
            gmm_var_floor_frac: gmm.var_floor_frac,
            gmm_weight_floor: gmm.weight_floor,
            svm_c_values: grid.c_values,
            svm_gamma_values: grid.gamma_values,
            svm_folds: grid.folds,
            svm_tol: 1e-3,
            alpha: DEFAULT_ALPHA,
            omega: DEFAULT_OMEGA,
            calibration_folds: 3,
            cv_folds: 4,
            alpha_step: 0.05,
            test_building: "B3".into(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.features().validate()?;
        self.grid().validate()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(Error::invalid(format!("omega {} must be positive", self.omega)));
        }
        if self.gmm_components == 0 || self.gmm_max_iters == 0 {
            return Err(Error::invalid("GMM components and iterations must be positive"));
        }
        if self.calibration_folds < 2 || self.cv_folds < 2 {
            return Err(Error::invalid("fold counts must be at least 2"));
        }
        if !(self.alpha_step > 0.0 && self.alpha_step <= 1.0) {
            return Err(Error::invalid("alpha_step must lie in (0, 1]"));
        }
        if !(self.svm_tol > 0.0) {
            return Err(Error::invalid("svm_tol must be positive"));
        }
        Ok(())
    }

    pub fn features(&self) -> FeatureConfig {
        FeatureConfig {
            window_s: self.window_s,
            hop_s: self.hop_s,
            n_mel: self.n_mel,
            n_ceps: self.n_ceps,
            nmfd: NmfdConfig {
                k: self.nmfd_k,
                lambda: self.nmfd_lambda,
                p: self.nmfd_p,
                max_iters: self.nmfd_max_iters,
                rel_tol: self.nmfd_rel_tol,
                seed: self.seed,
                init_decay: self.nmfd_init_decay,
                source_rule: self.nmfd_source_rule,
            },
            nmfd_bands: self.nmfd_bands,
            dct_axis: self.rir_dct_axis,
        }
    }

    pub fn gmm(&self, seed: u64) -> GmmConfig {
        GmmConfig {
            n_components: self.gmm_components,
            max_iters: self.gmm_max_iters,
            rel_tol: self.gmm_rel_tol,
            seed,
            max_points: self.gmm_max_points,
            var_floor_frac: self.gmm_var_floor_frac,
            weight_floor: self.gmm_weight_floor,
            ..GmmConfig::default()
        }
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            c_values: self.svm_c_values.clone(),
            gamma_values: self.svm_gamma_values.clone(),
            folds: self.svm_folds,
        }
    }

    pub fn corpus(&self) -> CorpusConfig {
        CorpusConfig {
            rooms_per_label: self.rooms_per_label,
            clips_per_room: self.clips_per_room,
            buildings: self.buildings,
            clip_duration_s: self.clip_duration_s,
            seed: self.seed,
        }
    }
}
