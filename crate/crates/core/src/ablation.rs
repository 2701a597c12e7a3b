//! Ablation grids: each cell is a set of config overrides trained over several
//! seeds and held-out targets, summarized as mean±std of target accuracy.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::MultiDomainDataset;
use crate::error::{Error, Result};
use crate::eval::evaluate_domain;
use crate::objective::{AblationVariant, MatchingKind};
use crate::trainer::{train, TrainOptions};

pub const BETA_SWEEP: [f64; 5] = [0.1, 0.5, 1.0, 2.0, 5.0];
pub const FUSION_GRID: [[usize; 2]; 3] = [[1, 2], [2, 3], [3, 4]];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    /// Module ablation over the six variants.
    Table5,
    /// Matching-loss kinds.
    Table6,
    Beta,
    Fusion,
    All,
}

impl GridKind {
    pub const NAMES: [&'static str; 5] = ["table5", "table6", "beta", "fusion", "all"];
}

impl FromStr for GridKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "table5" | "variants" => Self::Table5,
            "table6" | "losses" => Self::Table6,
            "beta" => Self::Beta,
            "fusion" => Self::Fusion,
            "all" => Self::All,
            _ => {
                return Err(Error::Unknown {
                    kind: "grid",
                    name: s.to_string(),
                })
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub grid: &'static str,
    pub label: String,
    /// `key=value` overrides applied on top of the base config.
    pub overrides: Vec<String>,
}

pub fn grid_cells(kind: GridKind) -> Vec<GridCell> {
    let full = format!("variant={}", AblationVariant::FullPhama.name());
    let mut cells = Vec::new();
    if matches!(kind, GridKind::Table5 | GridKind::All) {
        for v in AblationVariant::ALL {
            cells.push(GridCell {
                grid: "table5",
                label: v.name().to_string(),
                overrides: vec![format!("variant={}", v.name())],
            });
        }
    }
    if matches!(kind, GridKind::Table6 | GridKind::All) {
        for k in MatchingKind::ALL {
            cells.push(GridCell {
                grid: "table6",
                label: k.name().to_string(),
                overrides: vec![full.clone(), format!("matching_loss={}", k.name())],
            });
        }
    }
    if matches!(kind, GridKind::Beta | GridKind::All) {
        for b in BETA_SWEEP {
            cells.push(GridCell {
                grid: "beta",
                label: format!("beta={b}"),
                overrides: vec![full.clone(), format!("beta_max={b:?}")],
            });
        }
    }
    if matches!(kind, GridKind::Fusion | GridKind::All) {
        for [a, b] in FUSION_GRID {
            cells.push(GridCell {
                grid: "fusion",
                label: format!("levels={a}-{b}"),
                overrides: vec![full.clone(), format!("model.fusion_levels=[{a},{b}]")],
            });
        }
    }
    cells
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    /// Training diverged for at least one (seed, target) run.
    Collapsed,
    Failed,
}

impl CellStatus {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ok => "ok",
            Self::Collapsed => "collapsed",
            Self::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub seed: u64,
    pub target: String,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub cell: GridCell,
    pub status: CellStatus,
    /// Per-seed mean target accuracy; `None` when any run of that seed did not finish.
    pub seed_values: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub runs: Vec<RunResult>,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some((mean, std))
}

pub struct GridOptions<'a> {
    pub seeds: &'a [u64],
    /// Held-out domains; each seed's value is the mean over them.
    pub targets: &'a [String],
    /// Per-run output directories are created below this when set.
    pub out_dir: Option<&'a Path>,
    pub on_run: Option<&'a dyn Fn(&GridCell, &RunResult)>,
}

fn run_cell(base: &ExperimentConfig, ds: &MultiDomainDataset, cell: &GridCell, opts: &GridOptions) -> CellResult {
    let mut runs = Vec::new();
    let mut seed_values = Vec::new();
    let mut collapsed = false;
    let mut failed = false;
    for &seed in opts.seeds {
        let mut accs = Vec::new();
        for target in opts.targets {
            let mut overrides = cell.overrides.clone();
            overrides.push(format!("seed={seed}"));
            overrides.push(format!("target_domain=\"{target}\""));
            let dir = opts
                .out_dir
                .map(|d| d.join(cell.grid).join(&cell.label).join(format!("seed{seed}")).join(target));
            let outcome = base.with_overrides(&overrides).and_then(|cfg| {
                let res = train(
                    &cfg,
                    ds,
                    &TrainOptions {
                        out_dir: dir.as_deref(),
                        save_checkpoints: false,
                        on_epoch: None,
                    },
                )?;
                let target_idx = res
                    .target
                    .ok_or_else(|| Error::config("target_domain", "ablation cells need a held-out domain"))?;
                evaluate_domain(&res.selected_model(), ds, target_idx)
            });
            let run = match outcome {
                Ok(acc) => {
                    accs.push(acc);
                    RunResult {
                        seed,
                        target: target.clone(),
                        accuracy: Some(acc),
                        error: None,
                    }
                }
                Err(e) => {
                    match e {
                        Error::Divergence { .. } => collapsed = true,
                        _ => failed = true,
                    }
                    log::warn!("{} {} seed {seed} target {target}: {e}", cell.grid, cell.label);
                    RunResult {
                        seed,
                        target: target.clone(),
                        accuracy: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            if let Some(cb) = opts.on_run {
                cb(cell, &run);
            }
            runs.push(run);
        }
        seed_values.push((accs.len() == opts.targets.len()).then(|| accs.iter().sum::<f64>() / accs.len() as f64));
    }
    let done: Vec<f64> = seed_values.iter().flatten().copied().collect();
    let stats = mean_std(&done);
    CellResult {
        cell: cell.clone(),
        status: if failed {
            CellStatus::Failed
        } else if collapsed {
            CellStatus::Collapsed
        } else {
            CellStatus::Ok
        },
        seed_values,
        mean: stats.map(|s| s.0),
        std: stats.map(|s| s.1),
        runs,
    }
}

/// Trains and evaluates every cell; failures are recorded and the grid continues.
pub fn run_ablation_grid(
    base: &ExperimentConfig,
    ds: &MultiDomainDataset,
    cells: &[GridCell],
    opts: &GridOptions,
) -> Result<Vec<CellResult>> {
    if opts.seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    if opts.targets.is_empty() {
        return Err(Error::config("target_domain", "at least one target domain is required"));
    }
    Ok(cells.iter().map(|c| run_cell(base, ds, c, opts)).collect())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.4}"))
}

/// `grid,cell,status,mean,std,seeds_done,seed_values` with seed values joined by `;`.
pub fn results_csv(results: &[CellResult]) -> String {
    let mut out = String::from("grid,cell,status,mean,std,seeds_done,seed_values\n");
    for r in results {
        let vals: Vec<String> = r.seed_values.iter().map(|v| fmt_opt(*v)).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.cell.grid,
            r.cell.label,
            r.status.name(),
            fmt_opt(r.mean),
            fmt_opt(r.std),
            r.seed_values.iter().flatten().count(),
            vals.join(";")
        );
    }
    out
}

/// Curve data for the β sweep: `beta,mean,std,status`.
pub fn beta_curve_csv(results: &[CellResult]) -> String {
    let mut out = String::from("beta,mean,std,status\n");
    for r in results.iter().filter(|r| r.cell.grid == "beta") {
        let beta = r.cell.label.trim_start_matches("beta=");
        let _ = writeln!(out, "{beta},{},{},{}", fmt_opt(r.mean), fmt_opt(r.std), r.status.name());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_cell_counts() {
        assert_eq!(grid_cells(GridKind::Table5).len(), 6);
        assert_eq!(grid_cells(GridKind::Table6).len(), 3);
        assert_eq!(grid_cells(GridKind::Beta).len(), 5);
        assert_eq!(grid_cells(GridKind::Fusion).len(), 3);
        assert_eq!(grid_cells(GridKind::All).len(), 17);
        let base = ExperimentConfig::default();
        for cell in grid_cells(GridKind::All) {
            base.with_overrides(&cell.overrides).unwrap();
        }
    }

    #[test]
    fn mean_std_oracle() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[7.0]), Some((7.0, 0.0)));
        assert_eq!(mean_std(&[]), None);
    }

    #[test]
    fn collapsed_cell_does_not_stop_the_grid() {
        let base = ExperimentConfig::resolve(
            None,
            &[
                "epochs=1".into(),
                "batch_size=16".into(),
                "data.image_size=16".into(),
                "data.synth.per_class=4".into(),
                "data.synth.classes=2".into(),
                "model.width=4".into(),
                "model.proj_dim=8".into(),
            ],
        )
        .unwrap();
        let ds = base.load_dataset().unwrap();
        let cells = vec![
            GridCell {
                grid: "beta",
                label: "blowup".into(),
                overrides: vec!["optim.lr=1e30".into()],
            },
            GridCell {
                grid: "beta",
                label: "beta=0.1".into(),
                overrides: vec!["beta_max=0.1".into()],
            },
        ];
        let targets = vec!["color_map".to_string()];
        let res = run_ablation_grid(
            &base,
            &ds,
            &cells,
            &GridOptions {
                seeds: &[0, 1],
                targets: &targets,
                out_dir: None,
                on_run: None,
            },
        )
        .unwrap();
        assert_eq!(res[0].status, CellStatus::Collapsed);
        assert_eq!(res[0].mean, None);
        assert_eq!(res[1].status, CellStatus::Ok);
        assert_eq!(res[1].seed_values.len(), 2);
        let csv = results_csv(&res);
        assert!(csv.contains("beta,blowup,collapsed,,,0,;"));
        assert_eq!(beta_curve_csv(&res).lines().count(), 3);
    }
}
