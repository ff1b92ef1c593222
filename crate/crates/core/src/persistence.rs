//! Versioned `.roommodel` files and ledger files.
//!
//! Both are JSON documents in which every floating-point number is stored as
//! a canonical hexadecimal literal (`0x1.8p+1`), so save/load is bit exact.
//! The `version` field is checked before anything else is decoded.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::fusion::{ConfidenceLedger, LabelEvidence, RoomDetector, ScoreDistributions};
use crate::gmm::{GaussianMixture, ScenePair};
use crate::nmfd::{DctAxis, NmfdConfig, SourceRule};
use crate::svm::{Platt, Standardizer, SvmModel};

pub const FORMAT_VERSION: u64 = 1;
pub const LEDGER_VERSION: u64 = 1;

/// Canonical hexadecimal form of a finite double.
pub fn format_hex(v: f64) -> String {
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let mant = bits & ((1u64 << 52) - 1);
    if exp == 0 && mant == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, e) = if exp == 0 { (0, -1022) } else { (1, exp - 1023) };
    let frac = format!("{mant:013x}");
    let frac = frac.trim_end_matches('0');
    if frac.is_empty() {
        format!("{sign}0x{lead}p{e:+}")
    } else {
        format!("{sign}0x{lead}.{frac}p{e:+}")
    }
}

/// Inverse of [`format_hex`]; accepts only its canonical output.
pub fn parse_hex(s: &str) -> Option<f64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let body = body.strip_prefix("0x")?;
    let (mantissa, exponent) = body.split_once('p')?;
    let e: i64 = exponent.parse().ok()?;
    let (lead, frac) = match mantissa.split_once('.') {
        Some((l, f)) => (l, f),
        None => (mantissa, ""),
    };
    if frac.len() > 13 || !frac.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()) {
        return None;
    }
    let mant = if frac.is_empty() {
        0
    } else {
        u64::from_str_radix(&format!("{frac:0<13}"), 16).ok()?
    };
    let exp_field: u64 = match lead {
        "1" if (-1022..=1023).contains(&e) => (e + 1023) as u64,
        "0" if e == -1022 && mant != 0 => 0,
        "0" if e == 0 && mant == 0 => 0,
        _ => return None,
    };
    let v = f64::from_bits(((neg as u64) << 63) | (exp_field << 52) | mant);
    (format_hex(v) == s).then_some(v)
}

/// A double serialized as its hexadecimal literal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hex(pub f64);

impl Serialize for Hex {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&format_hex(self.0))
    }
}

impl<'de> Deserialize<'de> for Hex {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_hex(&s)
            .map(Hex)
            .ok_or_else(|| D::Error::custom(format!("`{s}` is not a canonical hex float")))
    }
}

fn hexes<'a>(v: impl IntoIterator<Item = &'a f64>) -> Vec<Hex> {
    v.into_iter().map(|&x| Hex(x)).collect()
}

fn floats(v: &[Hex]) -> Vec<f64> {
    v.iter().map(|h| h.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleMetadata {
    pub seed: u64,
    /// Buildings whose recordings were used for training.
    pub train_buildings: Vec<String>,
    /// Snapshot of the configuration used for training (informational).
    pub config: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub metadata: BundleMetadata,
    pub features: FeatureConfig,
    pub detectors: Vec<RoomDetector>,
}

impl ModelBundle {
    pub fn validate(&self) -> Result<()> {
        if self.detectors.is_empty() {
            return Err(Error::invalid("bundle holds no detectors"));
        }
        self.features.validate()?;
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.detectors {
            if !seen.insert(d.label.as_str()) {
                return Err(Error::invalid(format!("duplicate detector `{}`", d.label)));
            }
            d.validate().map_err(|e| Error::for_label(&d.label, e))?;
            if d.scene.dim() != self.features.n_ceps * 2 {
                return Err(Error::invalid(format!(
                    "detector `{}` scene dimension {} does not match features",
                    d.label,
                    d.scene.dim()
                )));
            }
            if self.features.rir_dim().is_some_and(|n| n != d.svm.dim()) {
                return Err(Error::invalid(format!(
                    "detector `{}` SVM dimension {} does not match features",
                    d.label,
                    d.svm.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn detector(&self, label: &str) -> Option<&RoomDetector> {
        self.detectors.iter().find(|d| d.label == label)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GmmDto {
    n_components: usize,
    dim: usize,
    weights: Vec<Hex>,
    means: Vec<Hex>,
    variances: Vec<Hex>,
}

impl GmmDto {
    fn from_model(m: &GaussianMixture) -> Self {
        Self {
            n_components: m.n_components(),
            dim: m.dim(),
            weights: hexes(m.weights()),
            means: hexes(m.means().iter()),
            variances: hexes(m.variances().iter()),
        }
    }

    fn into_model(self, what: &str) -> Result<GaussianMixture> {
        let shape = (self.n_components, self.dim);
        let corrupt = |m: String| Error::CorruptModel(format!("{what}: {m}"));
        let means = Array2::from_shape_vec(shape, floats(&self.means)).map_err(|e| corrupt(e.to_string()))?;
        let variances =
            Array2::from_shape_vec(shape, floats(&self.variances)).map_err(|e| corrupt(e.to_string()))?;
        if self.weights.len() != self.n_components {
            return Err(corrupt("weight count does not match n_components".into()));
        }
        GaussianMixture::from_parts(Array1::from(floats(&self.weights)), means, variances)
            .map_err(|e| corrupt(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SvmDto {
    dim: usize,
    n_support: usize,
    support: Vec<Hex>,
    coef: Vec<Hex>,
    bias: Hex,
    gamma: Hex,
    c: Hex,
    mean: Vec<Hex>,
    scale: Vec<Hex>,
    platt_a: Hex,
    platt_b: Hex,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectorDto {
    label: String,
    alpha: Hex,
    t_c: Hex,
    omega: Hex,
    scene_in: GmmDto,
    scene_out: GmmDto,
    svm: SvmDto,
    score_pos: GmmDto,
    score_neg: GmmDto,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NmfdDto {
    k: usize,
    lambda: Hex,
    p: Hex,
    max_iters: usize,
    rel_tol: Hex,
    seed: u64,
    init_decay: Hex,
    source_rule: SourceRule,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeaturesDto {
    window_s: Hex,
    hop_s: Hex,
    n_mel: usize,
    n_ceps: usize,
    nmfd: NmfdDto,
    nmfd_bands: usize,
    dct_axis: DctAxis,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleDto {
    format: String,
    version: u64,
    seed: u64,
    train_buildings: Vec<String>,
    config: Value,
    features: FeaturesDto,
    detectors: Vec<DetectorDto>,
}

const FORMAT_NAME: &str = "roommodel";

fn features_dto(f: &FeatureConfig) -> FeaturesDto {
    FeaturesDto {
        window_s: Hex(f.window_s),
        hop_s: Hex(f.hop_s),
        n_mel: f.n_mel,
        n_ceps: f.n_ceps,
        nmfd: NmfdDto {
            k: f.nmfd.k,
            lambda: Hex(f.nmfd.lambda),
            p: Hex(f.nmfd.p),
            max_iters: f.nmfd.max_iters,
            rel_tol: Hex(f.nmfd.rel_tol),
            seed: f.nmfd.seed,
            init_decay: Hex(f.nmfd.init_decay),
            source_rule: f.nmfd.source_rule,
        },
        nmfd_bands: f.nmfd_bands,
        dct_axis: f.dct_axis,
    }
}

fn features_from(d: FeaturesDto) -> FeatureConfig {
    FeatureConfig {
        window_s: d.window_s.0,
        hop_s: d.hop_s.0,
        n_mel: d.n_mel,
        n_ceps: d.n_ceps,
        nmfd: NmfdConfig {
            k: d.nmfd.k,
            lambda: d.nmfd.lambda.0,
            p: d.nmfd.p.0,
            max_iters: d.nmfd.max_iters,
            rel_tol: d.nmfd.rel_tol.0,
            seed: d.nmfd.seed,
            init_decay: d.nmfd.init_decay.0,
            source_rule: d.nmfd.source_rule,
        },
        nmfd_bands: d.nmfd_bands,
        dct_axis: d.dct_axis,
    }
}

fn detector_dto(d: &RoomDetector) -> Result<DetectorDto> {
    let platt = d
        .svm
        .platt
        .ok_or_else(|| Error::invalid(format!("detector `{}` has an uncalibrated SVM", d.label)))?;
    Ok(DetectorDto {
        label: d.label.clone(),
        alpha: Hex(d.alpha),
        t_c: Hex(d.t_c),
        omega: Hex(d.omega),
        scene_in: GmmDto::from_model(&d.scene.in_model),
        scene_out: GmmDto::from_model(&d.scene.out_model),
        svm: SvmDto {
            dim: d.svm.dim(),
            n_support: d.svm.coef.len(),
            support: hexes(d.svm.support.iter()),
            coef: hexes(&d.svm.coef),
            bias: Hex(d.svm.bias),
            gamma: Hex(d.svm.gamma),
            c: Hex(d.svm.c),
            mean: hexes(&d.svm.standardizer.mean),
            scale: hexes(&d.svm.standardizer.scale),
            platt_a: Hex(platt.a),
            platt_b: Hex(platt.b),
        },
        score_pos: GmmDto::from_model(&d.dists.pos),
        score_neg: GmmDto::from_model(&d.dists.neg),
    })
}

fn detector_from(d: DetectorDto) -> Result<RoomDetector> {
    let label = d.label;
    let corrupt = |m: String| Error::CorruptModel(format!("detector `{label}`: {m}"));
    let s = d.svm;
    let support = Array2::from_shape_vec((s.n_support, s.dim), floats(&s.support))
        .map_err(|e| corrupt(format!("SVM support vectors: {e}")))?;
    if s.mean.len() != s.dim || s.scale.len() != s.dim || s.coef.len() != s.n_support {
        return Err(corrupt("SVM vector lengths disagree".into()));
    }
    let svm = SvmModel {
        support,
        coef: Array1::from(floats(&s.coef)),
        bias: s.bias.0,
        gamma: s.gamma.0,
        c: s.c.0,
        standardizer: Standardizer {
            mean: Array1::from(floats(&s.mean)),
            scale: Array1::from(floats(&s.scale)),
        },
        platt: Some(Platt {
            a: s.platt_a.0,
            b: s.platt_b.0,
        }),
    };
    let scene = ScenePair::new(d.scene_in.into_model("scene in-model")?, d.scene_out.into_model("scene out-model")?)
        .map_err(|e| corrupt(e.to_string()))?;
    let dists = ScoreDistributions::new(
        d.score_pos.into_model("positive score mixture")?,
        d.score_neg.into_model("negative score mixture")?,
    )
    .map_err(|e| corrupt(e.to_string()))?;
    let det = RoomDetector {
        label: label.clone(),
        scene,
        svm,
        alpha: d.alpha.0,
        t_c: d.t_c.0,
        dists,
        omega: d.omega.0,
    };
    det.validate().map_err(|e| corrupt(e.to_string()))?;
    Ok(det)
}

/// Deterministic byte encoding of a bundle.
pub fn encode_bundle(bundle: &ModelBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let dto = BundleDto {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        seed: bundle.metadata.seed,
        train_buildings: bundle.metadata.train_buildings.clone(),
        config: bundle.metadata.config.clone(),
        features: features_dto(&bundle.features),
        detectors: bundle.detectors.iter().map(detector_dto).collect::<Result<_>>()?,
    };
    let mut bytes = serde_json::to_vec_pretty(&dto).map_err(|e| Error::invalid(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Reads the `version` field of a parsed document without touching anything else.
fn check_version(doc: &Value, expected: u64) -> Result<()> {
    let found = doc
        .get("version")
        .ok_or_else(|| Error::CorruptModel("missing `version` field".into()))?
        .as_u64()
        .ok_or_else(|| Error::CorruptModel("`version` is not an unsigned integer".into()))?;
    if found != expected {
        return Err(Error::UnsupportedVersion { found, expected });
    }
    Ok(())
}

pub fn decode_bundle(bytes: &[u8]) -> Result<ModelBundle> {
    let doc: Value =
        serde_json::from_slice(bytes).map_err(|e| Error::CorruptModel(format!("malformed document: {e}")))?;
    check_version(&doc, FORMAT_VERSION)?;
    let dto: BundleDto =
        serde_json::from_value(doc).map_err(|e| Error::CorruptModel(format!("schema mismatch: {e}")))?;
    if dto.format != FORMAT_NAME {
        return Err(Error::CorruptModel(format!("unknown format `{}`", dto.format)));
    }
    let bundle = ModelBundle {
        metadata: BundleMetadata {
            seed: dto.seed,
            train_buildings: dto.train_buildings,
            config: dto.config,
        },
        features: features_from(dto.features),
        detectors: dto.detectors.into_iter().map(detector_from).collect::<Result<_>>()?,
    };
    bundle.validate().map_err(|e| Error::CorruptModel(e.to_string()))?;
    Ok(bundle)
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("`{}` has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn save(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_bundle(bundle)?)
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bundle(&bytes)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvidenceDto {
    label: String,
    n: u64,
    sum_log_pos: Hex,
    sum_log_neg: Hex,
    omega: Hex,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LedgerDto {
    version: u64,
    labels: Vec<EvidenceDto>,
}

pub fn encode_ledger(ledger: &ConfidenceLedger) -> Result<Vec<u8>> {
    let labels = ledger
        .entries()
        .map(|(label, e)| {
            if !(e.sum_log_pos.is_finite() && e.sum_log_neg.is_finite()) {
                return Err(Error::Numerical(format!("ledger sums for `{label}` are not finite")));
            }
            Ok(EvidenceDto {
                label: label.to_string(),
                n: e.n,
                sum_log_pos: Hex(e.sum_log_pos),
                sum_log_neg: Hex(e.sum_log_neg),
                omega: Hex(e.omega),
            })
        })
        .collect::<Result<_>>()?;
    let mut bytes = serde_json::to_vec_pretty(&LedgerDto {
        version: LEDGER_VERSION,
        labels,
    })
    .map_err(|e| Error::invalid(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn decode_ledger(bytes: &[u8]) -> Result<ConfidenceLedger> {
    let doc: Value =
        serde_json::from_slice(bytes).map_err(|e| Error::CorruptModel(format!("malformed ledger: {e}")))?;
    check_version(&doc, LEDGER_VERSION)?;
    let dto: LedgerDto =
        serde_json::from_value(doc).map_err(|e| Error::CorruptModel(format!("ledger schema mismatch: {e}")))?;
    let mut ledger = ConfidenceLedger::new();
    for e in dto.labels {
        let mut ev = LabelEvidence::new(e.omega.0).map_err(|err| Error::CorruptModel(err.to_string()))?;
        ev.n = e.n;
        ev.sum_log_pos = e.sum_log_pos.0;
        ev.sum_log_neg = e.sum_log_neg.0;
        if ledger.get(&e.label).is_some() {
            return Err(Error::CorruptModel(format!("ledger lists `{}` twice", e.label)));
        }
        ledger.insert(&e.label, ev);
    }
    Ok(ledger)
}
