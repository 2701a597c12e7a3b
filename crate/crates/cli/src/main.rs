//! `phama`: training, evaluation, ablation grids, spectral audits and
//! amplitude/phase reconstructions from one binary.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use phama_core::ablation::{beta_curve_csv, grid_cells, results_csv, run_ablation_grid, GridKind, GridOptions};
use phama_core::config::{config_keys, ExperimentConfig};
use phama_core::error::Category;
use phama_core::eval::{emit_report, evaluate_corruptions, evaluate_domain, export_embeddings, Classifier, EvalReport};
use phama_core::spectral::{audit_dataset, DEFAULT_KEEP_FRACTION};
use phama_core::trainer::{train, TrainOptions};
use phama_core::{fourier, Error, ImageTensor, Result};

/// Environment variable naming the directory that default output paths go under.
const OUTPUT_ROOT_ENV: &str = "PHAMA_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "phama", version, about = "Amplitude-perturbation and patch-contrast domain generalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes best.ckpt, last.ckpt, train_log.jsonl and config_resolved.json.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a held-out domain, optionally under corruptions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Folder dataset root (`<root>/<domain>/<class>/<image>`); synthetic data when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Domain name, or `all`; defaults to the configured target domain.
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        corruptions: bool,
        /// Also write pooled last-level features of each evaluated domain.
        #[arg(long)]
        embeddings: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation grid over seeds and held-out domains.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "table5", value_parser = GridKind::NAMES)]
        grid: String,
        /// Number of seeds, counted up from the configured seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Hold out every domain in turn instead of only the configured target.
        #[arg(long)]
        all_targets: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Centroid frequency and frequency spread per domain, plus low-frequency amplitude embeddings.
    AnalyzeSpectra {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 200)]
        per_domain: usize,
        #[arg(long, default_value_t = DEFAULT_KEEP_FRACTION)]
        keep_fraction: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Phase-only or amplitude-only reconstruction of an image.
    Reconstruct {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum)]
        mode: ReconstructMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dataset utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Print domain, class and split counts as JSON.
    Describe {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReconstructMode {
    PhaseOnly,
    AmplitudeOnly,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file, or a config_resolved.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set optim.lr=0.1`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self, extra: &[String]) -> Result<ExperimentConfig> {
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        overrides.extend_from_slice(extra);
        match &self.config {
            Some(p) => ExperimentConfig::from_file(p, &overrides),
            None => ExperimentConfig::resolve(None, &overrides),
        }
    }
}

fn keys_help() -> String {
    let keys = config_keys();
    let width = keys.iter().map(|(k, _, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (set with --set key=value or in the --config file):\n");
    for (k, default, note) in keys {
        s += &format!("  {k:<width$}  default {default}\n  {:<width$}  {note}\n", "");
    }
    s += &format!("\nOutputs default to ${OUTPUT_ROOT_ENV}/<command>-<config hash> (or ./runs when unset).");
    s
}

fn default_out(command: &str, cfg: &ExperimentConfig) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(format!("{command}-{}", &cfg.hash()[..12]))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value serializes"));
}

fn cmd_train(config: &ConfigArgs, out: Option<PathBuf>) -> Result<()> {
    let cfg = config.resolve(&[])?;
    let ds = cfg.load_dataset()?;
    let out = out.unwrap_or_else(|| default_out("train", &cfg));
    create_dir(&out)?;
    let res = train(
        &cfg,
        &ds,
        &TrainOptions {
            out_dir: Some(&out),
            save_checkpoints: true,
            on_epoch: None,
        },
    )?;
    let mut report = EvalReport::new(cfg.hash());
    if let Some(t) = res.target {
        let acc = evaluate_domain(&res.selected_model(), &ds, t)?;
        report.add_domain(&ds.domain_names()[t], acc, ds.domain_ids(t).len());
    }
    emit_report(&out, &report, &[])?;
    print_json(&serde_json::json!({
        "out": out,
        "selected_epoch": res.selected_epoch,
        "steps": res.steps,
        "target_accuracy": report.average_accuracy,
        "config_hash": report.config_hash,
    }));
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    config: &ConfigArgs,
    data: Option<&Path>,
    target: Option<&str>,
    corruptions: bool,
    embeddings: bool,
    out: Option<PathBuf>,
) -> Result<()> {
    let (model, manifest) = Classifier::load(checkpoint)?;
    let sibling = checkpoint.with_file_name("config_resolved.json");
    let mut extra = Vec::new();
    if let Some(root) = data {
        extra.push("data.source=\"folder\"".to_string());
        extra.push(format!("data.root={:?}", root.display().to_string()));
        extra.push(format!("data.image_size={}", manifest.spec.input_size));
    }
    let cfg = if config.config.is_none() && sibling.exists() {
        ExperimentConfig::from_file(&sibling, &[])?.with_overrides(&config.set)?.with_overrides(&extra)?
    } else {
        config.resolve(&extra)?
    };
    let ds = cfg.load_dataset()?;
    let wanted = target.unwrap_or(&cfg.target_domain);
    let domains: Vec<usize> = if wanted == "all" || wanted == "none" {
        (0..ds.num_domains()).collect()
    } else {
        vec![ds.domain_index(wanted).ok_or_else(|| Error::Unknown {
            kind: "domain",
            name: wanted.to_string(),
        })?]
    };
    let out = out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("eval"));
    create_dir(&out)?;
    let mut report = EvalReport::new(cfg.hash());
    for &d in &domains {
        let acc = evaluate_domain(&model, &ds, d)?;
        report.add_domain(&ds.domain_names()[d], acc, ds.domain_ids(d).len());
        if embeddings {
            export_embeddings(&model, &ds, d)?.write(&out, &format!("embeddings_{}", ds.domain_names()[d]), &ds)?;
        }
    }
    if corruptions {
        let samples: Vec<_> = ds.samples().iter().filter(|s| domains.contains(&s.domain)).collect();
        report.corruption = Some(evaluate_corruptions(
            &model,
            &samples,
            &cfg.corruption.kinds,
            &cfg.corruption.severities,
            cfg.seed,
        )?);
    }
    emit_report(&out, &report, &[])?;
    print_json(&serde_json::to_value(&report)?);
    Ok(())
}

fn cmd_ablate(config: &ConfigArgs, grid: &str, seeds: u64, all_targets: bool, out: Option<PathBuf>) -> Result<()> {
    let kind: GridKind = grid.parse()?;
    let cfg = config.resolve(&[])?;
    if seeds == 0 {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    let ds = cfg.load_dataset()?;
    let targets: Vec<String> = if all_targets {
        ds.domain_names().to_vec()
    } else {
        cfg.target_index(&ds)?
            .map(|t| vec![ds.domain_names()[t].clone()])
            .ok_or_else(|| Error::config("target_domain", "ablation needs a held-out domain or --all-targets"))?
    };
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + seeds).collect();
    let out = out.unwrap_or_else(|| default_out(&format!("ablate-{grid}"), &cfg));
    create_dir(&out)?;
    cfg.write_resolved(&out)?;
    let cells = grid_cells(kind);
    let progress = |cell: &phama_core::ablation::GridCell, run: &phama_core::ablation::RunResult| match run.accuracy {
        Some(a) => log::info!("{} {} seed {} target {}: {a:.2}%", cell.grid, cell.label, run.seed, run.target),
        None => log::warn!("{} {} seed {} target {}: no result", cell.grid, cell.label, run.seed, run.target),
    };
    let results = run_ablation_grid(
        &cfg,
        &ds,
        &cells,
        &GridOptions {
            seeds: &seeds,
            targets: &targets,
            out_dir: Some(&out),
            on_run: Some(&progress),
        },
    )?;
    let csv = results_csv(&results);
    write(&out.join("ablation.csv"), csv.as_bytes())?;
    write(&out.join("ablation.json"), &serde_json::to_vec_pretty(&results)?)?;
    if results.iter().any(|r| r.cell.grid == "beta") {
        write(&out.join("beta_sweep.csv"), beta_curve_csv(&results).as_bytes())?;
    }
    print!("{csv}");
    Ok(())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_analyze(config: &ConfigArgs, per_domain: usize, keep_fraction: f64, out: Option<PathBuf>) -> Result<()> {
    let cfg = config.resolve(&[])?;
    let ds = cfg.load_dataset()?;
    let audit = audit_dataset(&ds, per_domain, keep_fraction, cfg.data.seed)?;
    let out = out.unwrap_or_else(|| default_out("spectra", &cfg));
    audit.write(&out)?;
    cfg.write_resolved(&out)?;
    let summary: Vec<_> = ds
        .domain_names()
        .iter()
        .zip(audit.domain_means())
        .map(|(name, m)| serde_json::json!({"domain": name, "f_c": m.map(|m| m.0), "f_std": m.map(|m| m.1)}))
        .collect();
    print_json(&serde_json::json!({ "out": out, "domains": summary }));
    Ok(())
}

fn cmd_reconstruct(image: &Path, mode: ReconstructMode, out: &Path) -> Result<()> {
    let img = ImageTensor::load(image)?;
    let (recon, suffix) = match mode {
        ReconstructMode::PhaseOnly => (fourier::phase_only(&img)?, "phase_only"),
        ReconstructMode::AmplitudeOnly => (fourier::amplitude_only(&img)?, "amplitude_only"),
    };
    create_dir(out)?;
    let stem = image.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy());
    let path = out.join(format!("{stem}.{suffix}.png"));
    recon.save_png(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => cmd_train(&config, out),
        Command::Eval {
            checkpoint,
            config,
            data,
            target,
            corruptions,
            embeddings,
            out,
        } => cmd_eval(
            &checkpoint,
            &config,
            data.as_deref(),
            target.as_deref(),
            corruptions,
            embeddings,
            out,
        ),
        Command::Ablate {
            config,
            grid,
            seeds,
            all_targets,
            out,
        } => cmd_ablate(&config, &grid, seeds, all_targets, out),
        Command::AnalyzeSpectra {
            config,
            per_domain,
            keep_fraction,
            out,
        } => cmd_analyze(&config, per_domain, keep_fraction, out),
        Command::Reconstruct { image, mode, out } => cmd_reconstruct(&image, mode, &out),
        Command::Data {
            command: DataCommand::Describe { config },
        } => {
            let cfg = config.resolve(&[])?;
            print_json(&cfg.load_dataset()?.describe());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let help = keys_help();
    let mut command = Cli::command().after_long_help(help.clone());
    for name in ["train", "eval", "ablate", "analyze-spectra", "data"] {
        command = command.mut_subcommand(name, |c| c.after_long_help(help.clone()));
    }
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            let key = match &e {
                Error::Config { key, .. } => format!(" key={key}"),
                _ => String::new(),
            };
            let message = e.to_string().replace('\n', " ");
            eprintln!("error category={}{key}: {message}", category.as_str());
            ExitCode::from(if category == Category::Config { 2 } else { 1 })
        }
    }
}
