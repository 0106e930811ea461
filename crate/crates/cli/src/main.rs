//! `pulmo`: synthetic data, splits, training, evaluation, prediction and
//! timing from the command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pulmo_core::checkpoint::{load_checkpoint, save_checkpoint};
use pulmo_core::data::{
    load_manifest, prepare, subject_kfold, subject_labels, synth_generate, ManifestDataset,
    Modality, SynthConfig,
};
use pulmo_core::eval::{combine, ensemble_predict, run_crossval, Prediction};
use pulmo_core::experiment::{
    compare_default_models, derive_seed, train_ensemble, CycleInput, ExperimentConfig, Rung, Task,
    TrainedModel,
};
use pulmo_core::parallel::configure_threads;
use pulmo_core::spirometry::ReferenceCoefficients;
use pulmo_core::stcnn::FusionMode;
use pulmo_core::{PulmoError, Result};

const DATA_ENV: &str = "PULMO_DATA_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "pulmo",
    version,
    about = "Lung function assessment from breathing videos"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Experiment config file (JSON); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 selects the sequential, determinism-critical mode.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 24)]
        subjects: usize,
        #[arg(long, default_value_t = 6)]
        cycles: usize,
        #[arg(long, default_value = "thermal")]
        modality: Modality,
    },
    /// Write a subject-wise stratified k-fold split.
    Split(ExperimentArgs),
    /// Train a model (or ensemble) and write its checkpoints.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Train on the training subjects of this fold only.
        #[arg(long, requires = "split")]
        fold: Option<usize>,
        /// Split file written by `pulmo split`.
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Cross-validate and write report.txt and summary.json.
    Eval(ExperimentArgs),
    /// Label or regress the subjects of one dataset directory.
    Predict {
        /// Directory holding model_*.pfsn checkpoints.
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory with manifest.csv, metadata.json and clips.
        #[arg(long)]
        subject: PathBuf,
        #[arg(long)]
        coefficients: Option<PathBuf>,
    },
    /// Time SNN against X3D-lite per-sample inference.
    Bench {
        #[arg(long, default_value_t = 20)]
        repeats: usize,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct ExperimentArgs {
    /// Dataset directory (falls back to the config, then PULMO_DATA_DIR).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    coefficients: Option<PathBuf>,
    /// Ablation preset applied before the individual flags.
    #[arg(long)]
    rung: Option<Rung>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    modality: Option<Modality>,
    #[arg(long)]
    fusion: Option<FusionMode>,
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    augment: Option<bool>,
    #[arg(long)]
    k: Option<usize>,
    /// Training epochs of the selected model family.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl ExperimentArgs {
    fn apply(&self, mut cfg: ExperimentConfig) -> ExperimentConfig {
        if let Some(r) = self.rung {
            let preset = ExperimentConfig::rung(self.task.unwrap_or(cfg.task), r);
            cfg.augment = preset.augment;
            cfg.fusion = preset.fusion;
            cfg.ensemble_size = preset.ensemble_size;
        }
        if let Some(v) = self.task {
            cfg.task = v;
        }
        if let Some(v) = self.modality {
            cfg.modality = v;
        }
        if let Some(v) = self.fusion {
            cfg.fusion = v;
        }
        if let Some(v) = self.ensemble {
            cfg.ensemble_size = v;
        }
        if let Some(v) = self.augment {
            cfg.augment = v;
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        let snn = cfg.task.uses_snn();
        if let Some(v) = self.epochs {
            if snn {
                cfg.snn.epochs = v
            } else {
                cfg.cnn.epochs = v
            }
        }
        if let Some(v) = self.lr {
            if snn {
                cfg.snn.lr = v
            } else {
                cfg.cnn.lr = v
            }
        }
        if let Some(v) = self.batch_size {
            if snn {
                cfg.snn.batch_size = v
            } else {
                cfg.cnn.batch_size = v
            }
        }
        if self.data.is_some() {
            cfg.data_dir = self.data.clone();
        }
        if self.coefficients.is_some() {
            cfg.coefficients = self.coefficients.clone();
        }
        cfg
    }
}

fn read_config(cli: &Cli, args: &ExperimentArgs) -> Result<ExperimentConfig> {
    let base = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| PulmoError::io(p, e))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    let mut cfg = args.apply(base);
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cfg.data_dir.is_none() {
        cfg.data_dir = std::env::var_os(DATA_ENV).map(PathBuf::from);
    }
    if cli.out.is_some() {
        cfg.out_dir = cli.out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn data_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    cfg.data_dir.as_deref().ok_or_else(|| {
        PulmoError::Config(format!(
            "no dataset: pass --data, set data_dir or {DATA_ENV}"
        ))
    })
}

fn open_dataset(
    dir: &Path,
    coefficients: Option<&Path>,
) -> Result<(ManifestDataset, ReferenceCoefficients)> {
    let ds = load_manifest(&dir.join("manifest.csv"))?;
    let path = coefficients.map_or_else(|| dir.join("coefficients.json"), Path::to_path_buf);
    Ok((ds, ReferenceCoefficients::load(&path)?))
}

fn out_dir(cli: &Cli, fallback: &str) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from(fallback));
    std::fs::create_dir_all(&dir).map_err(|e| PulmoError::io(&dir, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| PulmoError::io(path, e))
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        configure_threads(n);
    }
    match &cli.command {
        Command::Synth {
            subjects,
            cycles,
            modality,
        } => {
            let dir = out_dir(cli, "synth-data")?;
            let seed = cli.seed.unwrap_or(0);
            let data = synth_generate(
                *subjects,
                *cycles,
                seed,
                &SynthConfig::with_modality(*modality),
            )?;
            data.write(&dir)?;
            println!(
                "wrote {} clips of {} subjects to {}",
                data.len(),
                subjects,
                dir.display()
            );
        }
        Command::Split(args) => {
            let cfg = read_config(cli, args)?;
            let (ds, coeffs) = open_dataset(data_dir(&cfg)?, cfg.coefficients.as_deref())?;
            let (ids, labels) = subject_labels(&ds, cfg.modality, &coeffs)?;
            let split = subject_kfold(&ids, &labels, cfg.k, cfg.seed)?;
            let dir = out_dir(cli, ".")?;
            let path = dir.join("split.json");
            split.save(&path)?;
            println!(
                "wrote {}-fold split of {} subjects to {}",
                cfg.k,
                ids.len(),
                path.display()
            );
        }
        Command::Train { exp, fold, split } => {
            let cfg = read_config(cli, exp)?;
            let (ds, coeffs) = open_dataset(data_dir(&cfg)?, cfg.coefficients.as_deref())?;
            let data = prepare(&ds, cfg.modality, cfg.input_side(), &coeffs)?;
            let train_ids = match (fold, split) {
                (Some(f), Some(p)) => pulmo_core::data::FoldSplit::load(p)?.train_test(*f)?.0,
                _ => data.subject_ids(),
            };
            let members =
                train_ensemble(&cfg, &data, &train_ids, derive_seed(cfg.seed, &[u64::MAX]))?;
            let dir = out_dir(cli, "model")?;
            for (i, m) in members.iter().enumerate() {
                save_checkpoint(&dir.join(format!("model_{i}.pfsn")), &m.to_checkpoint())?;
            }
            write_text(&dir.join("experiment.json"), &cfg.to_json())?;
            println!(
                "trained {} model(s) on {} subjects into {}",
                members.len(),
                train_ids.len(),
                dir.display()
            );
        }
        Command::Eval(args) => {
            let cfg = read_config(cli, args)?;
            let (ds, coeffs) = open_dataset(data_dir(&cfg)?, cfg.coefficients.as_deref())?;
            let data = prepare(&ds, cfg.modality, cfg.input_side(), &coeffs)?;
            let report = run_crossval(&cfg, &data)?;
            let dir = out_dir(cli, "eval")?;
            report.write(&dir)?;
            print!("{}", report.to_text());
        }
        Command::Predict {
            model,
            subject,
            coefficients,
        } => predict(model, subject, coefficients.as_deref())?,
        Command::Bench { repeats } => {
            let t = compare_default_models(*repeats, cli.seed.unwrap_or(0))?;
            println!(
                "snn_ms={:.3} cnn_ms={:.3} ratio={:.4}",
                t.snn.as_secs_f64() * 1e3,
                t.cnn.as_secs_f64() * 1e3,
                t.ratio()
            );
        }
    }
    Ok(())
}

fn predict(model_dir: &Path, subject_dir: &Path, coefficients: Option<&Path>) -> Result<()> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(model_dir)
        .map_err(|e| PulmoError::io(model_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pfsn"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(PulmoError::Config(format!(
            "no .pfsn checkpoints in {}",
            model_dir.display()
        )));
    }
    let members = paths
        .iter()
        .map(|p| TrainedModel::from_checkpoint(load_checkpoint(p)?))
        .collect::<Result<Vec<_>>>()?;
    let first = &members[0];
    if members.iter().any(|m| {
        m.task != first.task || m.modality != first.modality || m.input_side() != first.input_side()
    }) {
        return Err(PulmoError::Config(
            "checkpoints mix tasks, modalities or input sizes".into(),
        ));
    }
    let (ds, coeffs) = open_dataset(subject_dir, coefficients)?;
    let data = prepare(&ds, first.modality, first.input_side(), &coeffs)?;
    let mut per_subject: BTreeMap<usize, Vec<Prediction>> = BTreeMap::new();
    for (i, s) in data.samples.iter().enumerate() {
        let input = CycleInput {
            frames: &s.frames,
            meta: &data.subjects[s.subject],
            seed: derive_seed(0, &[i as u64]),
        };
        per_subject
            .entry(s.subject)
            .or_default()
            .push(ensemble_predict(&members, &input)?);
    }
    for (subject, preds) in per_subject {
        // per-subject vote or mean, as across ensemble members
        let overall = combine(&preds)?;
        let line = serde_json::json!({
            "subject": data.subjects[subject].subject_id,
            "task": first.task.to_string(),
            "cycles": preds.len(),
            "prediction": overall,
            "cycle_predictions": preds,
        });
        println!("{line}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} msg={}", e.kind(), msg);
            ExitCode::from(1)
        }
    }
}
