//! Synthetic labelled corpus: parametric room impulse responses, speech-like
//! excitation and band-limited ambience, written as WAV files plus a manifest.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::AudioClip;
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 44_100;
const SPEED_OF_SOUND: f64 = 343.0;
const PEAK: f64 = 0.9;
/// Image sources arriving later than this are left to the stochastic tail.
const EARLY_WINDOW_S: f64 = 0.08;
const IMAGE_ORDER: i32 = 3;
/// Tail level relative to the direct path, before reflectivity scaling.
const TAIL_GAIN: f64 = 0.5;

/// One stationary ambient component: band-limited noise with slow amplitude modulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbienceBand {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    /// Level relative to the reverberant speech RMS.
    pub level_db: f64,
    /// 0 disables modulation.
    pub am_rate_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub label: String,
    pub rt60: f64,
    /// Length, width, height in meters.
    pub dims: [f64; 3],
    /// Pressure reflection coefficients of the walls x=0, x=L, y=0, y=W, floor, ceiling.
    pub reflectivity: [f64; 6],
    pub ambience: Vec<AmbienceBand>,
}

impl RoomSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.rt60 > 0.0 && self.rt60.is_finite()) {
            return Err(Error::invalid(format!("`{}`: rt60 must be positive", self.label)));
        }
        if self.dims.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(Error::invalid(format!("`{}`: dimensions must be positive", self.label)));
        }
        if self.reflectivity.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::invalid(format!("`{}`: reflectivity must lie in [0, 1)", self.label)));
        }
        for b in &self.ambience {
            let ok = b.center_hz > 0.0
                && b.bandwidth_hz > 0.0
                && b.level_db.is_finite()
                && b.am_rate_hz >= 0.0
                && b.center_hz < f64::from(SAMPLE_RATE) / 2.0;
            if !ok {
                return Err(Error::invalid(format!("`{}`: invalid ambience band {b:?}", self.label)));
            }
        }
        Ok(())
    }

    /// Per-room variation: rt60 within +-20%, each dimension within +-15%,
    /// each ambience level within +-3 dB.
    pub fn jittered(&self, rng: &mut impl Rng) -> RoomSpec {
        let mut out = self.clone();
        out.rt60 *= rng.gen_range(0.8..=1.2);
        for d in &mut out.dims {
            *d *= rng.gen_range(0.85..=1.15);
        }
        for b in &mut out.ambience {
            b.level_db += rng.gen_range(-3.0..=3.0);
        }
        out
    }

    fn source_and_mic(&self) -> ([f64; 3], [f64; 3]) {
        let [l, w, h] = self.dims;
        ([0.3 * l, 0.4 * w, 0.45 * h], [0.7 * l, 0.65 * w, 0.35 * h])
    }
}

fn band(center_hz: f64, bandwidth_hz: f64, level_db: f64, am_rate_hz: f64) -> AmbienceBand {
    AmbienceBand {
        center_hz,
        bandwidth_hz,
        level_db,
        am_rate_hz,
    }
}

/// The five reference room types.
pub fn default_specs() -> Vec<RoomSpec> {
    vec![
        RoomSpec {
            label: "bathroom".into(),
            rt60: 0.35,
            dims: [2.5, 2.0, 2.5],
            reflectivity: [0.92; 6],
            ambience: vec![band(4000.0, 5000.0, -10.0, 0.7), band(60.0, 30.0, -28.0, 0.0)],
        },
        RoomSpec {
            label: "office".into(),
            rt60: 0.45,
            dims: [5.0, 4.0, 3.0],
            reflectivity: [0.6, 0.6, 0.6, 0.6, 0.5, 0.4],
            ambience: vec![band(220.0, 120.0, -18.0, 0.0), band(2500.0, 1500.0, -26.0, 7.0)],
        },
        RoomSpec {
            label: "pantry".into(),
            rt60: 0.6,
            dims: [4.0, 3.0, 3.0],
            reflectivity: [0.75, 0.75, 0.7, 0.7, 0.8, 0.6],
            ambience: vec![band(110.0, 50.0, -12.0, 0.2), band(1200.0, 400.0, -22.0, 1.5)],
        },
        RoomSpec {
            label: "classroom".into(),
            rt60: 0.85,
            dims: [9.0, 7.0, 3.2],
            reflectivity: [0.75, 0.75, 0.75, 0.75, 0.7, 0.65],
            ambience: vec![band(600.0, 900.0, -16.0, 4.0), band(90.0, 80.0, -22.0, 0.0)],
        },
        RoomSpec {
            label: "lecture_hall".into(),
            rt60: 1.4,
            dims: [20.0, 15.0, 6.0],
            reflectivity: [0.85, 0.85, 0.85, 0.85, 0.7, 0.8],
            ambience: vec![band(160.0, 300.0, -15.0, 0.1), band(900.0, 1800.0, -27.0, 3.0)],
        },
    ]
}

/// Splitmix-style mixing of several integers into one seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; one value per call keeps the stream simple to reproduce
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Amplitude envelope of the late tail: energy falls by 60 dB over `rt60`.
pub fn tail_envelope(rt60: f64, t: f64) -> f64 {
    (-3.0 * std::f64::consts::LN_10 * t / rt60).exp()
}

pub fn rir_len(spec: &RoomSpec, sample_rate: u32) -> usize {
    ((1.2 * spec.rt60).max(0.3) * f64::from(sample_rate)).ceil() as usize
}

/// Image-source early reflections plus an exponentially decaying noise tail.
pub fn synth_rir(spec: &RoomSpec, sample_rate: u32, seed: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    let sr = f64::from(sample_rate);
    let n = rir_len(spec, sample_rate);
    let mut h = vec![0.0; n];
    let (src, mic) = spec.source_and_mic();
    let dist = |p: [f64; 3]| ((p[0] - mic[0]).powi(2) + (p[1] - mic[1]).powi(2) + (p[2] - mic[2]).powi(2)).sqrt();
    let d_direct = dist(src);
    let t_direct = d_direct / SPEED_OF_SOUND;

    for nx in -IMAGE_ORDER..=IMAGE_ORDER {
        for ny in -IMAGE_ORDER..=IMAGE_ORDER {
            for nz in -IMAGE_ORDER..=IMAGE_ORDER {
                for parity in 0..8 {
                    let pp = [parity & 1, (parity >> 1) & 1, (parity >> 2) & 1];
                    let ns = [nx, ny, nz];
                    let mut pos = [0.0; 3];
                    let mut gain = 1.0;
                    for a in 0..3 {
                        let p = pp[a];
                        pos[a] = (1.0 - 2.0 * p as f64) * src[a] + 2.0 * ns[a] as f64 * spec.dims[a];
                        let near = (ns[a] - p).unsigned_abs() as i32;
                        let far = ns[a].unsigned_abs() as i32;
                        gain *= spec.reflectivity[2 * a].powi(near) * spec.reflectivity[2 * a + 1].powi(far);
                    }
                    if gain == 0.0 {
                        continue;
                    }
                    let d = dist(pos);
                    let t = d / SPEED_OF_SOUND;
                    if t - t_direct > EARLY_WINDOW_S {
                        continue;
                    }
                    let idx = (t * sr).round() as usize;
                    if idx < n {
                        h[idx] += gain / (4.0 * PI * d.max(0.1));
                    }
                }
            }
        }
    }

    let mean_refl = spec.reflectivity.iter().sum::<f64>() / 6.0;
    let tail_gain = TAIL_GAIN * mean_refl / (4.0 * PI * d_direct.max(0.1));
    if tail_gain > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = (t_direct * sr).round() as usize + 1;
        for (i, v) in h.iter_mut().enumerate().skip(start) {
            let t = i as f64 / sr - t_direct;
            *v += tail_gain * tail_envelope(spec.rt60, t) * gaussian(&mut rng);
        }
    }
    Ok(h)
}

/// Linear convolution through the FFT.
pub fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |x: &[f64]| {
        let mut v: Vec<Complex<f64>> = x.iter().map(|&r| Complex::new(r, 0.0)).collect();
        v.resize(n, Complex::new(0.0, 0.0));
        v
    };
    let mut fa = pad(a);
    let mut fb = pad(b);
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    fa.truncate(out_len);
    fa.iter().map(|c| c.re / n as f64).collect()
}

/// Two-pole resonator with unit peak gain at `freq`.
fn resonate(x: &mut [f64], freq: f64, bw: f64, sr: f64) {
    let r = (-PI * bw / sr).exp();
    let theta = 2.0 * PI * freq / sr;
    let (a1, a2) = (2.0 * r * theta.cos(), -r * r);
    let g = (1.0 - r) * (1.0 - 2.0 * r * (2.0 * theta).cos() + r * r).sqrt();
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let y = g * *v + a1 * y1 + a2 * y2;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

/// Speech-like source: voiced bursts (glottal pulse trains through three
/// formant resonators) separated by silent pauses.
pub fn excitation(n_samples: usize, sample_rate: u32, seed: u64) -> Vec<f64> {
    let sr = f64::from(sample_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; n_samples];
    let mut pos = (rng.gen_range(0.02..0.2) * sr) as usize;
    while pos < n_samples {
        let len = ((rng.gen_range(0.12..0.35) * sr) as usize).min(n_samples - pos);
        let f0: f64 = rng.gen_range(90.0..220.0);
        let formants = [
            (rng.gen_range(300.0..900.0), 90.0),
            (rng.gen_range(900.0..2500.0), 120.0),
            (rng.gen_range(2200.0..3400.0), 170.0),
        ];
        let mut burst = vec![0.0; len];
        let mut t = 0.0;
        while (t as usize) < len {
            burst[t as usize] += 1.0;
            t += sr / (f0 * rng.gen_range(0.98..1.02));
        }
        for v in burst.iter_mut() {
            *v += 0.02 * gaussian(&mut rng);
        }
        for &(f, bw) in &formants {
            resonate(&mut burst, f, bw, sr);
        }
        for (i, v) in burst.iter().enumerate() {
            let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / len.max(2) as f64).cos();
            out[pos + i] += w * v;
        }
        pos += len + (rng.gen_range(0.08..0.4) * sr) as usize;
    }
    out
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Unit-RMS band noise with a Gaussian spectral shape and optional 80% AM.
pub fn band_noise(b: &AmbienceBand, n_samples: usize, sample_rate: u32, seed: u64) -> Vec<f64> {
    let sr = f64::from(sample_rate);
    let n = n_samples.next_power_of_two().max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = vec![Complex::new(0.0, 0.0); n];
    let sigma = b.bandwidth_hz / 2.0;
    for k in 1..n / 2 {
        let f = k as f64 * sr / n as f64;
        let mag = (-0.5 * ((f - b.center_hz) / sigma).powi(2)).exp();
        if mag < 1e-8 {
            continue;
        }
        let c = Complex::new(gaussian(&mut rng), gaussian(&mut rng)) * mag;
        spec[k] = c;
        spec[n - k] = c.conj();
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut spec);
    let mut x: Vec<f64> = spec[..n_samples].iter().map(|c| c.re).collect();
    if b.am_rate_hz > 0.0 {
        let phase: f64 = rng.gen_range(0.0..2.0 * PI);
        for (i, v) in x.iter_mut().enumerate() {
            *v *= 1.0 + 0.8 * (2.0 * PI * b.am_rate_hz * i as f64 / sr + phase).sin();
        }
    }
    let r = rms(&x);
    if r > 0.0 {
        x.iter_mut().for_each(|v| *v /= r);
    }
    x
}

#[derive(Debug, Clone)]
pub struct SynthClip {
    pub clip: AudioClip,
    pub rir: Vec<f64>,
}

/// Reverberant speech-like excitation plus ambience, peak-normalized to 0.9.
pub fn synth_clip(spec: &RoomSpec, duration_s: f64, seed: u64) -> Result<SynthClip> {
    spec.validate()?;
    if !(duration_s >= 1.0) {
        return Err(Error::invalid(format!("clip duration {duration_s} s is below 1 s")));
    }
    let n = (duration_s * f64::from(SAMPLE_RATE)).round() as usize;
    let rir = synth_rir(spec, SAMPLE_RATE, mix_seed(&[seed, 1]))?;
    let src = excitation(n, SAMPLE_RATE, mix_seed(&[seed, 2]));
    let mut y = convolve(&src, &rir);
    y.truncate(n);
    let speech_rms = rms(&y);
    for (i, b) in spec.ambience.iter().enumerate() {
        let gain = speech_rms * 10f64.powf(b.level_db / 20.0);
        let noise = band_noise(b, n, SAMPLE_RATE, mix_seed(&[seed, 3, i as u64]));
        for (v, a) in y.iter_mut().zip(&noise) {
            *v += gain * a;
        }
    }
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::DegenerateInput("synthesized clip is silent".into()));
    }
    y.iter_mut().for_each(|v| *v *= PEAK / peak);
    Ok(SynthClip {
        clip: AudioClip::new(y, SAMPLE_RATE)?,
        rir,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub rooms_per_label: usize,
    pub clips_per_room: usize,
    pub buildings: usize,
    pub clip_duration_s: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            rooms_per_label: 4,
            clips_per_room: 25,
            buildings: 3,
            clip_duration_s: 3.0,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub label: String,
    pub room_id: String,
    pub building_id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    /// Directory that relative paths are resolved against.
    pub base_dir: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl CorpusManifest {
    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        self.base_dir.join(&row.path)
    }

    pub fn labels(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&str> = self.rows.iter().map(|r| r.label.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest_err = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            message,
        };
        let mut reader = csv::Reader::from_path(path).map_err(|e| manifest_err(e.to_string()))?;
        let rows = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestRow>, _>>()
            .map_err(|e| manifest_err(e.to_string()))?;
        if rows.is_empty() {
            return Err(manifest_err("manifest has no rows".into()));
        }
        Ok(Self {
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            rows,
        })
    }

    /// Writes the manifest through a temporary file and a rename.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::invalid(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        crate::persistence::write_atomic(path, &bytes)
    }
}

/// The spec of room `room` of label index `label_idx`, including the
/// per-room jitter. Room r sits in building r mod `buildings`.
pub fn room_spec(base: &RoomSpec, label_idx: usize, room: usize, master_seed: u64) -> RoomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[master_seed, label_idx as u64, room as u64, 0xA11]));
    base.jittered(&mut rng)
}

pub fn room_id(label: &str, room: usize) -> String {
    format!("{label}-r{room:02}")
}

pub fn building_id(room: usize, buildings: usize) -> String {
    format!("B{}", room % buildings + 1)
}

pub fn clip_seed(master_seed: u64, label_idx: usize, room: usize, clip: usize) -> u64 {
    mix_seed(&[master_seed, label_idx as u64, room as u64, clip as u64])
}

/// Generates every clip, writes `label/room/clip_NNN.wav` under `out_dir`
/// and finally `manifest.csv`.
pub fn synth_corpus(specs: &[RoomSpec], cfg: &CorpusConfig, out_dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    let out_dir = out_dir.as_ref();
    if specs.is_empty() {
        return Err(Error::invalid("no room specs given"));
    }
    if cfg.rooms_per_label == 0 || cfg.clips_per_room == 0 || cfg.buildings == 0 {
        return Err(Error::invalid("corpus counts must be positive"));
    }
    for s in specs {
        s.validate()?;
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::new();
    for (li, base) in specs.iter().enumerate() {
        for room in 0..cfg.rooms_per_label {
            let spec = room_spec(base, li, room, cfg.seed);
            let rid = room_id(&base.label, room);
            let rel_dir = Path::new(&base.label).join(&rid);
            let dir = out_dir.join(&rel_dir);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for clip in 0..cfg.clips_per_room {
                let seed = clip_seed(cfg.seed, li, room, clip);
                let c = synth_clip(&spec, cfg.clip_duration_s, seed)?;
                let rel = rel_dir.join(format!("clip_{clip:03}.wav"));
                c.clip.write_wav(out_dir.join(&rel))?;
                rows.push(ManifestRow {
                    path: rel.to_string_lossy().replace('\\', "/"),
                    label: base.label.clone(),
                    room_id: rid.clone(),
                    building_id: building_id(room, cfg.buildings),
                    seed,
                });
            }
        }
    }
    let manifest = CorpusManifest {
        base_dir: out_dir.to_path_buf(),
        rows,
    };
    manifest.write(out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn band_energy_db(h: &[f64], start: usize, len: usize) -> f64 {
        let e: f64 = h[start..start + len].iter().map(|v| v * v).sum::<f64>() / len as f64;
        10.0 * e.log10()
    }

    #[test]
    fn envelope_drops_sixty_db_at_rt60() {
        for rt in [0.3, 0.8, 1.7] {
            let drop = 20.0 * (tail_envelope(rt, 0.0) / tail_envelope(rt, rt)).log10();
            assert!((drop - 60.0).abs() < 1.0);
        }
    }

    #[test]
    fn measured_tail_decay_matches_rt60() {
        let spec = default_specs()[3].clone();
        let h = synth_rir(&spec, SAMPLE_RATE, 5).unwrap();
        let sr = SAMPLE_RATE as usize;
        let w = sr / 20;
        // fit a line to band energies past the early part
        let (xs, ys): (Vec<f64>, Vec<f64>) = (3..(spec.rt60 * 20.0) as usize)
            .map(|b| (b as f64 * 0.05, band_energy_db(&h, b * w, w)))
            .unzip();
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((slope * spec.rt60 + 60.0).abs() < 3.0, "slope {slope}");
    }

    #[test]
    fn zero_reflectivity_gives_direct_path() {
        let mut spec = default_specs()[1].clone();
        spec.reflectivity = [0.0; 6];
        let h = synth_rir(&spec, SAMPLE_RATE, 1).unwrap();
        let nonzero: Vec<usize> = (0..h.len()).filter(|&i| h[i] != 0.0).collect();
        assert_eq!(nonzero.len(), 1);
    }

    #[test]
    fn seeds_share_envelope() {
        let spec = default_specs()[4].clone();
        let a = synth_rir(&spec, SAMPLE_RATE, 1).unwrap();
        let b = synth_rir(&spec, SAMPLE_RATE, 2).unwrap();
        assert_ne!(a, b);
        let w = SAMPLE_RATE as usize / 20;
        for band in 0..a.len() / w {
            let d = band_energy_db(&a, band * w, w) - band_energy_db(&b, band * w, w);
            assert!(d.abs() < 1.0, "band {band}: {d} dB");
        }
    }

    #[test]
    fn fft_convolution_matches_direct() {
        let a = [1.0, -2.0, 0.5, 3.0];
        let b = [0.25, 1.0, -1.0];
        let mut direct = vec![0.0; 6];
        for (i, x) in a.iter().enumerate() {
            for (j, y) in b.iter().enumerate() {
                direct[i + j] += x * y;
            }
        }
        for (u, v) in convolve(&a, &b).iter().zip(&direct) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_without_ambience_is_normalized_reverberant_source() {
        let mut spec = default_specs()[2].clone();
        spec.ambience.clear();
        let c = synth_clip(&spec, 1.5, 9).unwrap();
        let n = c.clip.samples().len();
        let mut y = convolve(&excitation(n, SAMPLE_RATE, mix_seed(&[9, 2])), &c.rir);
        y.truncate(n);
        let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (u, v) in c.clip.samples().iter().zip(&y) {
            assert!((u - v * PEAK / peak).abs() < 1e-12);
        }
    }

    #[test]
    fn clips_are_deterministic_and_bounded() {
        let spec = default_specs()[0].clone();
        let a = synth_clip(&spec, 1.0, 3).unwrap();
        let b = synth_clip(&spec, 1.0, 3).unwrap();
        assert_eq!(a.clip.samples(), b.clip.samples());
        let peak = a.clip.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - PEAK).abs() < 1e-12);
        assert!(synth_clip(&spec, 0.5, 3).is_err());
    }

    #[test]
    fn excitation_has_pauses() {
        let x = excitation(3 * SAMPLE_RATE as usize, SAMPLE_RATE, 4);
        let silent = x.iter().filter(|v| **v == 0.0).count();
        assert!(silent as f64 > 0.15 * x.len() as f64);
    }

    #[test]
    fn jitter_stays_in_range() {
        let base = default_specs()[3].clone();
        for room in 0..20 {
            let s = room_spec(&base, 3, room, 1);
            assert!((0.8..=1.2).contains(&(s.rt60 / base.rt60)));
            for (d, b) in s.dims.iter().zip(&base.dims) {
                assert!((0.85..=1.15).contains(&(d / b)));
            }
            for (x, y) in s.ambience.iter().zip(&base.ambience) {
                assert!((x.level_db - y.level_db).abs() <= 3.0);
            }
        }
        assert_eq!(room_spec(&base, 3, 1, 1), room_spec(&base, 3, 1, 1));
        assert_ne!(room_spec(&base, 3, 1, 1), room_spec(&base, 3, 2, 1));
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut s = default_specs()[0].clone();
        s.rt60 = 0.0;
        assert!(s.validate().is_err());
        let mut s = default_specs()[0].clone();
        s.dims[1] = -1.0;
        assert!(synth_rir(&s, SAMPLE_RATE, 0).is_err());
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        cov / (va * vb).sqrt()
    }

    fn log_column_energy(m: &ndarray::Array2<f64>) -> Vec<f64> {
        m.columns().into_iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().ln()).collect()
    }

    #[test]
    fn deconvolution_recovers_the_decay_profile() {
        use crate::dsp::{seconds_to_samples, stft};
        use crate::nmfd::{estimate_rir, NmfdConfig};
        let cfg = NmfdConfig::default();
        let (window, hop, bands) = (0.064, 0.032, 128);
        for (i, spec) in default_specs().iter().enumerate() {
            let sc = synth_clip(spec, 3.0, 40 + i as u64).unwrap();
            let x = stft(&sc.clip, window, hop).unwrap().pool_bands(bands);
            let est = estimate_rir(&x, &cfg).unwrap();

            // reference: the true response's own spectrogram over the same K frames
            let need = seconds_to_samples(window + hop * (cfg.k - 1) as f64, SAMPLE_RATE) + 1;
            let mut h = sc.rir.clone();
            h.resize(h.len().max(need), 0.0);
            let truth = stft(&AudioClip::new(h, SAMPLE_RATE).unwrap(), window, hop).unwrap().pool_bands(bands);
            let truth = truth.values().slice(ndarray::s![.., ..cfg.k]).to_owned();

            // compare only the frames where the true response is still within
            // 60 dB of its strongest frame
            let t = log_column_energy(&truth);
            let top = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let live = t.iter().take_while(|&&v| v > top - 60.0 * std::f64::consts::LN_10 / 10.0).count();
            assert!(live >= 10, "{}: only {live} live frames", spec.label);
            let e = log_column_energy(&est.rir.0);
            let r = pearson(&e[..live], &t[..live]);
            assert!(r > 0.8, "{}: correlation {r}", spec.label);
        }
    }
}
