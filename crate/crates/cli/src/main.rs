use std::fs::{self, File};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use roomsense::config::RunConfig;
use roomsense::eval::write_csv;
use roomsense::fusion::{write_trace, ConfidenceLedger};
use roomsense::persistence::{self, decode_ledger, encode_ledger, write_atomic};
use roomsense::pipeline::{
    cross_validate, evaluate_bundle_unseen, evaluate_unseen, extract_bank, infer_paths, train_bundle, Corpus,
    EvalReport,
};
use roomsense::synthgen::{default_specs, synth_corpus, CorpusManifest};
use roomsense::Error;

#[derive(Parser)]
#[command(name = "roomsense", version, about = "Label rooms from streams of audio recordings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved configuration as JSON.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate a labelled synthetic corpus and its manifest.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory for WAV files and manifest.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one detector per label and save the model bundle.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model_out: PathBuf,
    },
    /// Score clips in order and accumulate per-label confidence.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// Ledger file; created when missing, resumed otherwise.
        #[arg(long)]
        ledger: Option<PathBuf>,
        /// File listing one WAV path per line.
        #[arg(long)]
        list: Option<PathBuf>,
        /// Trace CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        wavs: Vec<PathBuf>,
    },
    /// Cross-validate or test on an unseen building and write metric CSVs.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Cv)]
        mode: Mode,
        /// Evaluate this model instead of training (unseen mode only).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Cv,
    UnseenBuilding,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

/// One optional flag per config field, named identically.
#[derive(Args, Serialize, Default)]
#[command(rename_all = "snake_case")]
struct Overrides {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    rooms_per_label: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    clips_per_room: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    buildings: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    clip_duration_s: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    window_s: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    hop_s: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n_mel: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n_ceps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    nmfd_k: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    nmfd_lambda: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    nmfd_p: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    nmfd_max_iters: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    nmfd_rel_tol: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    nmfd_init_decay: Option<f64>,
    /// `kl` or `euclidean`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    nmfd_source_rule: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    nmfd_bands: Option<usize>,
    /// `frequency` or `time`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    rir_dct_axis: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    gmm_components: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    gmm_max_iters: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    gmm_rel_tol: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    gmm_max_points: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    gmm_var_floor_frac: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    gmm_weight_floor: Option<f64>,
    /// Comma-separated.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    svm_c_values: Option<Vec<f64>>,
    /// Comma-separated.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    svm_gamma_values: Option<Vec<f64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    svm_folds: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    svm_tol: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    omega: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    calibration_folds: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    cv_folds: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha_step: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    test_building: Option<String>,
}

#[derive(Debug)]
enum Failure {
    Data(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_data_error() {
            Failure::Data(e.to_string())
        } else {
            Failure::Internal(e.to_string())
        }
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

type CmdResult = Result<(), Failure>;

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut merged = serde_json::to_value(&base).map_err(|e| Failure::Internal(e.to_string()))?;
        let patch = serde_json::to_value(&self.overrides).map_err(|e| Failure::Internal(e.to_string()))?;
        if let (Value::Object(dst), Value::Object(src)) = (&mut merged, patch) {
            dst.extend(src);
        }
        Ok(RunConfig::from_json(&merged.to_string())?)
    }
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> CmdResult {
    let manifest = synth_corpus(&default_specs(), &cfg.corpus(), out)?;
    println!("{} clips written to {}", manifest.rows.len(), out.join("manifest.csv").display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, manifest: &Path, model_out: &Path) -> CmdResult {
    let manifest = CorpusManifest::read(manifest)?;
    let bank = extract_bank(&manifest, &cfg.features())?;
    let corpus = Corpus::new(&manifest, &bank)?;
    let all: Vec<usize> = (0..manifest.rows.len()).collect();
    let bundle = train_bundle(corpus, &all, cfg)?;
    persistence::save(&bundle, model_out)?;
    println!("{} detectors saved to {}", bundle.detectors.len(), model_out.display());
    Ok(())
}

fn read_list(path: &Path) -> Result<Vec<PathBuf>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(PathBuf::from)
        .collect())
}

fn cmd_infer(model: &Path, ledger: Option<&Path>, list: Option<&Path>, out: Option<&Path>, wavs: &[PathBuf]) -> CmdResult {
    let bundle = persistence::load(model)?;
    let mut paths = match list {
        Some(l) => read_list(l)?,
        None => Vec::new(),
    };
    paths.extend(wavs.iter().cloned());

    // Held for the whole run so two processes never interleave updates.
    let mut lock = match ledger {
        Some(p) => {
            let f = File::options()
                .read(true)
                .write(true)
                .create(true)
                .truncate(false)
                .open(p)
                .map_err(|e| io_failure(p, e))?;
            f.lock().map_err(|e| io_failure(p, e))?;
            Some((p, f))
        }
        None => None,
    };
    let mut state = match &mut lock {
        Some((p, f)) => {
            let mut bytes = Vec::new();
            f.read_to_end(&mut bytes).map_err(|e| io_failure(p, e))?;
            if bytes.is_empty() {
                ConfidenceLedger::for_detectors(&bundle.detectors)?
            } else {
                decode_ledger(&bytes)?
            }
        }
        None => ConfidenceLedger::for_detectors(&bundle.detectors)?,
    };
    for d in &bundle.detectors {
        if state.get(&d.label).is_none() {
            state.init_label(&d.label, d.omega)?;
        }
    }

    let (rows, errors) = infer_paths(&bundle, &paths, &mut state);
    for e in &errors {
        eprintln!("recording {} ({}): {}", e.recording_index, e.path, e.message);
    }
    match out {
        Some(p) => {
            let mut buf = Vec::new();
            write_trace(&mut buf, &rows)?;
            write_atomic(p, &buf)?;
        }
        None => write_trace(io::stdout().lock(), &rows)?,
    }
    if let Some((p, f)) = &mut lock {
        // Rewrite in place: a rename would swap the locked inode.
        let bytes = encode_ledger(&state)?;
        f.set_len(0).map_err(|e| io_failure(p, e))?;
        f.seek(SeekFrom::Start(0)).map_err(|e| io_failure(p, e))?;
        f.write_all(&bytes).map_err(|e| io_failure(p, e))?;
        f.sync_all().map_err(|e| io_failure(p, e))?;
    }
    for (label, ev) in state.entries() {
        eprintln!("{label}: confidence {:.6} after {} recordings", ev.confidence(), ev.n);
    }
    Ok(())
}

fn write_report(report: &EvalReport, out_dir: &Path) -> CmdResult {
    fs::create_dir_all(out_dir).map_err(|e| io_failure(out_dir, e))?;
    let emit = |name: &str, bytes: Vec<u8>| -> CmdResult { Ok(write_atomic(out_dir.join(name), &bytes)?) };
    fn csv<R: Serialize>(rows: &[R]) -> Result<Vec<u8>, Failure> {
        let mut buf = Vec::new();
        write_csv(&mut buf, rows)?;
        Ok(buf)
    }
    emit("eer.csv", csv(&report.eer_rows)?)?;
    emit("sweep.csv", csv(&report.sweep.rows())?)?;
    emit("confusion.csv", csv(&report.confusion.rows())?)?;
    emit("traces.csv", csv(&report.traces)?)?;
    println!(
        "total EER: scene {:.4}, rir {:.4}, best fused {:.4} at alpha {}",
        report.scene_total(),
        report.rir_total(),
        report.sweep.total_eer.iter().cloned().fold(f64::INFINITY, f64::min),
        report.sweep.best_alpha
    );
    println!(
        "{} of {} confusion rows diagonal-dominant",
        report.confusion.dominant_rows(),
        report.labels.len()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, manifest: &Path, mode: Mode, model: Option<&Path>, out_dir: &Path) -> CmdResult {
    let manifest = CorpusManifest::read(manifest)?;
    let report = match (mode, model) {
        (Mode::Cv, Some(_)) => {
            return Err(Failure::Data(
                "--model applies to unseen-building mode; cv mode trains its own folds".into(),
            ))
        }
        (Mode::Cv, None) => {
            let bank = extract_bank(&manifest, &cfg.features())?;
            cross_validate(Corpus::new(&manifest, &bank)?, cfg)?
        }
        (Mode::UnseenBuilding, None) => {
            let bank = extract_bank(&manifest, &cfg.features())?;
            evaluate_unseen(Corpus::new(&manifest, &bank)?, cfg)?
        }
        (Mode::UnseenBuilding, Some(m)) => {
            let bundle = persistence::load(m)?;
            let bank = extract_bank(&manifest, &bundle.features)?;
            evaluate_bundle_unseen(Corpus::new(&manifest, &bank)?, &bundle, &cfg.test_building, cfg.alpha_step)?
        }
    };
    write_report(&report, out_dir)
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Config { cfg } => {
            print!("{}", cfg.resolve()?.to_json());
            Ok(())
        }
        Command::Synth { cfg, out } => cmd_synth(&cfg.resolve()?, &out),
        Command::Train { cfg, manifest, model_out } => cmd_train(&cfg.resolve()?, &manifest, &model_out),
        Command::Infer {
            model,
            ledger,
            list,
            out,
            wavs,
        } => cmd_infer(&model, ledger.as_deref(), list.as_deref(), out.as_deref(), &wavs),
        Command::Eval {
            cfg,
            manifest,
            mode,
            model,
            out_dir,
        } => cmd_eval(&cfg.resolve()?, &manifest, mode, model.as_deref(), &out_dir),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(3)
        }
    }
}
