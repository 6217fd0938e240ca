//! Command-line front end: `gen-data`, `train`, `eval`, `ablate`, `grad-check`.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::config::Config;
use crate::data::{self, SplitData};
use crate::error::{Error, Result};
use crate::eval::{ablation_ladder, eval_masks, eval_matrix, LadderMode};
use crate::gradients::{check_seeds, GradModule, ModelCheckOptions, GRAD_TOLERANCE};
use crate::modality::ModalityMask;
use crate::model::AblationFlags;
use crate::trainer::{fit, load_model, save_model};

#[derive(Debug, Parser)]
#[command(name = "trifuse", version, about = "Trimodal face/gesture/voice identification")]
pub struct Cli {
    /// Print the resolved configuration (defaults merged with --config) and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with train/val/test splits.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes model.ckpt, metrics.jsonl and config.json.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Single availability condition, e.g. `face,voice` or `trimodal`.
        #[arg(long)]
        mask: Option<String>,
        /// Comma-separated modules to bypass at inference, e.g. `no_confidence`.
        #[arg(long)]
        ablate: Option<String>,
        /// Directory for report.json and report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the ablation ladder.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "cumulative")]
        mode: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    GradCheck {
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Entries sampled per parameter tensor (0 checks every entry).
        #[arg(long, default_value_t = 6)]
        entries: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let cfg = cfg.with_env_overrides()?;
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn config_path(cmd: &Option<Command>) -> Option<&Path> {
    match cmd {
        Some(Command::GenData { config, .. })
        | Some(Command::Train { config, .. })
        | Some(Command::Ablate { config, .. }) => config.as_deref(),
        _ => None,
    }
}

/// Runs the CLI; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cli: Cli) -> Result<i32> {
    if cli.print_config {
        println!("{}", load_config(config_path(&cli.command))?.to_json_pretty());
        return Ok(0);
    }
    let Some(command) = cli.command else {
        return Err(Error::Invalid("no subcommand given (try --help)".into()));
    };
    match command {
        Command::GenData { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let syn = cfg.synthetic();
            let split = SplitData::synthetic(&syn)?;
            let manifest = data::write_split_dir(&out, &split, Some(&syn))?;
            println!(
                "wrote {} identities: {} train / {} val / {} test samples to {}",
                manifest.num_identities,
                manifest.train.count,
                manifest.val.count,
                manifest.test.count,
                out.display()
            );
            Ok(0)
        }
        Command::Train { config, data: dir, out } => {
            let cfg = load_config(config.as_deref())?;
            let split = data::ingest(&dir)?;
            create_dir(&out)?;
            write_file(&out.join("config.json"), &cfg.to_json_pretty())?;
            let metrics_path = out.join("metrics.jsonl");
            let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
            let mut log = BufWriter::new(file);
            let start = Instant::now();
            let (model, report) = fit(&split, &cfg, Some(&mut log))?;
            log.flush().map_err(|e| Error::io(&metrics_path, e))?;
            save_model(&out.join("model.ckpt"), &model, &cfg, report.best_epoch)?;
            eprintln!(
                "trained {} steps in {:.1}s; best epoch {} (validation score {:.2})",
                report.steps,
                start.elapsed().as_secs_f64(),
                report.best_epoch,
                report.best_score
            );
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            data: dir,
            mask,
            ablate,
            out,
        } => {
            let (model, header) = load_model(&checkpoint)?;
            let split = data::ingest(&dir)?;
            let ablation = match ablate {
                Some(s) => s.parse::<AblationFlags>()?,
                None => header.config.ablation,
            };
            let report = match mask {
                Some(m) => {
                    let mask: ModalityMask = m.parse()?;
                    eval_masks(&model, &split.test, &split.multi_session, ablation, &[mask], &header.config_hash)?
                }
                None => eval_matrix(&model, &split.test, &split.multi_session, ablation, &header.config_hash)?,
            };
            print!("{}", report.table());
            if let Some(out) = out {
                create_dir(&out)?;
                write_file(&out.join("report.json"), &report.to_json_pretty())?;
                write_file(&out.join("report.txt"), &report.table())?;
            }
            Ok(0)
        }
        Command::Ablate {
            config,
            data: dir,
            mode,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let mode: LadderMode = mode.parse()?;
            let split = data::ingest(&dir)?;
            let table = ablation_ladder(mode, |ablation| {
                let run = Config { ablation, ..cfg.clone() };
                let (model, _) = fit(&split, &run, None)?;
                eprintln!("finished {ablation}");
                eval_matrix(&model, &split.test, &split.multi_session, ablation, &run.hash())
            })?;
            print!("{}", table.table());
            if let Some(out) = out {
                create_dir(&out)?;
                write_file(&out.join("ladder.json"), &serde_json::to_string_pretty(&table)?)?;
                write_file(&out.join("ladder.txt"), &table.table())?;
            }
            Ok(0)
        }
        Command::GradCheck {
            module,
            seeds,
            entries,
            out,
        } => {
            let module: GradModule = module.parse()?;
            let modules: Vec<GradModule> = if module == GradModule::All {
                GradModule::ALL.to_vec()
            } else {
                vec![module]
            };
            let opts = ModelCheckOptions {
                entries_per_param: (entries > 0).then_some(entries),
                ..ModelCheckOptions::default()
            };
            let start = Instant::now();
            let results = check_seeds(&modules, 0..seeds, &opts)?;
            let mut ok = true;
            for m in &modules {
                let rs: Vec<_> = results.iter().filter(|r| r.module == *m).collect();
                let worst = rs
                    .iter()
                    .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
                    .expect("at least one seed");
                let pass = rs.iter().all(|r| r.passed());
                ok &= pass;
                println!(
                    "{:<10} seeds {:>3}  max rel error {:.3e} ({})  checked {:>6}  kinks skipped {:>3}  {}",
                    m.key(),
                    rs.len(),
                    worst.max_rel_error,
                    worst.worst_param,
                    rs.iter().map(|r| r.checked).sum::<usize>(),
                    rs.iter().map(|r| r.skipped_kinks).sum::<usize>(),
                    if pass { "PASS" } else { "FAIL" }
                );
            }
            println!(
                "tolerance {GRAD_TOLERANCE:e}; {:.1}s; {}",
                start.elapsed().as_secs_f64(),
                if ok { "all checks passed" } else { "FAILED" }
            );
            if let Some(out) = out {
                create_dir(&out)?;
                write_file(&out.join("grad_check.json"), &serde_json::to_string_pretty(&results)?)?;
            }
            Ok(if ok { 0 } else { 1 })
        }
    }
}
