//! Algorithm × seed matrices and static reports.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use grpo_forge::algorithms::Algorithm;
use grpo_forge::trainer::{read_steps_csv, train_in_dir, EvalReport, RunDir, StepLog, TrainerConfig};
use grpo_forge::par;

use crate::svg::{smooth, Chart, Series};
use crate::{exit, usage};

pub const COMPARISON_CSV: &str = "comparison.csv";
pub const REWARD_SVG: &str = "reward_curve.svg";
pub const VANISHING_SVG: &str = "vanishing_ratio.svg";
pub const METRICS_TABLE: &str = "metrics_table.csv";
const COMPARISON_HEADER: &str = "algorithm,seed,status,initial_mean_reward,final_mean_reward,final_acc,final_miou,\
final_r_at_03,final_r_at_05,mean_vanishing_ratio,run_dir";

#[derive(Clone, Debug)]
pub struct RunFinal {
    pub initial: EvalReport,
    pub last: EvalReport,
    pub mean_vanishing_ratio: f64,
}

#[derive(Clone, Debug)]
pub struct MatrixOutcome {
    pub algorithm: Algorithm,
    pub seed: u64,
    /// Relative to the comparison directory.
    pub run_dir: String,
    pub result: std::result::Result<RunFinal, String>,
    pub exit_code: i32,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() { f64::NAN } else { xs.iter().sum::<f64>() / xs.len() as f64 }
}

/// Train every (algorithm, seed) pair in its own sub-directory.
pub fn run_matrix(cfg: &TrainerConfig, algs: &[Algorithm], seeds: &[u64], out: &Path, jobs: usize) -> Vec<MatrixOutcome> {
    let cells: Vec<(Algorithm, u64)> = algs.iter().flat_map(|&a| seeds.iter().map(move |&s| (a, s))).collect();
    par::with_jobs(jobs, || {
        par::map_slice(&cells, |&(algorithm, seed)| {
            let run_dir = format!("runs/{}-seed{}", algorithm.id(), seed);
            let sub = TrainerConfig {
                algorithm,
                seed,
                ..cfg.clone()
            };
            log::info!("compare: starting {run_dir}");
            let result = train_in_dir(&sub, &out.join(&run_dir), None);
            let exit_code = match &result {
                Ok(_) => exit::SUCCESS,
                Err(grpo_forge::Error::NumericAbort { .. }) => exit::NUMERIC_ABORT,
                Err(_) => exit::VERIFICATION_FAILED,
            };
            let result = result
                .map(|r| RunFinal {
                    initial: r.initial_eval,
                    last: r.final_eval,
                    mean_vanishing_ratio: mean(&r.logs.iter().map(|l| l.vanishing_ratio).collect::<Vec<_>>()),
                })
                .map_err(|e| e.to_string());
            MatrixOutcome {
                algorithm,
                seed,
                run_dir,
                result,
                exit_code,
            }
        })
    })
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

pub fn write_comparison(out: &Path, outcomes: &[MatrixOutcome]) -> Result<()> {
    let mut s = String::from(COMPARISON_HEADER);
    s.push('\n');
    for o in outcomes {
        let line = match &o.result {
            Ok(r) => format!(
                "{},{},ok,{},{},{},{},{},{},{},{}",
                o.algorithm.id(),
                o.seed,
                r.initial.mean_reward,
                r.last.mean_reward,
                opt(r.last.acc),
                opt(r.last.miou),
                opt(r.last.r_at_03),
                opt(r.last.r_at_05),
                r.mean_vanishing_ratio,
                o.run_dir
            ),
            Err(_) => format!("{},{},failed,,,,,,,,{}", o.algorithm.id(), o.seed, o.run_dir),
        };
        s.push_str(&line);
        s.push('\n');
    }
    let path = out.join(COMPARISON_CSV);
    fs::write(&path, s).with_context(|| format!("writing {}", path.display()))
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
}

fn series(logs: &[StepLog], f: impl Fn(&StepLog) -> f64) -> Vec<(f64, f64)> {
    logs.iter().map(|l| (l.step as f64, f(l))).collect()
}

fn smoothing_window(n: usize) -> usize {
    (n / 25).max(1)
}

/// Plots and metrics table for a single run directory.
pub fn run_report(dir: &Path) -> Result<()> {
    let logs = read_steps_csv(&dir.join(RunDir::STEPS))?;
    if logs.is_empty() {
        return Err(usage(format!("{} has no step rows", dir.join(RunDir::STEPS).display())));
    }
    let w = smoothing_window(logs.len());
    let reward = series(&logs, |l| l.mean_reward);
    let vanishing = series(&logs, |l| l.vanishing_ratio);
    let chart = |title: &str, y: &str, raw: Vec<(f64, f64)>, range| Chart {
        title: title.into(),
        x_label: "step".into(),
        y_label: y.into(),
        y_range: range,
        series: vec![
            Series {
                label: "per step".into(),
                points: raw.clone(),
            },
            Series {
                label: format!("{w}-step mean"),
                points: smooth(&raw, w),
            },
        ],
    };
    write(dir, REWARD_SVG, &chart("Reward curve", "mean reward", reward, None).render())?;
    write(
        dir,
        VANISHING_SVG,
        &chart("Vanishing advantage ratio", "ratio", vanishing, Some((0.0, 1.0))).render(),
    )?;
    let metrics = dir.join(RunDir::METRICS);
    let table = if metrics.exists() {
        fs::read_to_string(&metrics).with_context(|| format!("reading {}", metrics.display()))?
    } else {
        format!("{}\n", grpo_forge::rewards::MetricsRow::CSV_HEADER)
    };
    write(dir, METRICS_TABLE, &table)
}

struct ComparisonRow {
    algorithm: String,
    ok: bool,
    fields: Vec<String>,
    run_dir: PathBuf,
}

fn read_comparison(dir: &Path) -> Result<Vec<ComparisonRow>> {
    let path = dir.join(COMPARISON_CSV);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let fields: Vec<String> = line.split(',').map(str::to_string).collect();
        if fields.len() != COMPARISON_HEADER.split(',').count() {
            return Err(usage(format!("malformed row in {}: `{line}`", path.display())));
        }
        rows.push(ComparisonRow {
            algorithm: fields[0].clone(),
            ok: fields[2] == "ok",
            run_dir: dir.join(&fields[10]),
            fields,
        });
    }
    Ok(rows)
}

/// Per-step mean over runs, truncated to the shortest run.
fn mean_curve(runs: &[Vec<StepLog>], f: impl Fn(&StepLog) -> f64) -> Vec<(f64, f64)> {
    let n = runs.iter().map(Vec::len).min().unwrap_or(0);
    (0..n)
        .map(|i| {
            let v: Vec<f64> = runs.iter().map(|r| f(&r[i])).collect();
            (runs[0][i].step as f64, mean(&v))
        })
        .collect()
}

/// Overlay plots (one polyline per algorithm) and a per-algorithm table.
pub fn comparison_report(dir: &Path) -> Result<()> {
    let rows = read_comparison(dir)?;
    let mut order: Vec<String> = Vec::new();
    for r in &rows {
        if !order.contains(&r.algorithm) {
            order.push(r.algorithm.clone());
        }
    }
    let mut reward = Vec::new();
    let mut vanishing = Vec::new();
    let mut table = String::from("algorithm,runs,mean_initial_reward,mean_final_reward,mean_final_acc,mean_final_miou,mean_vanishing_ratio\n");
    for alg in &order {
        let ok: Vec<&ComparisonRow> = rows.iter().filter(|r| &r.algorithm == alg && r.ok).collect();
        let runs = ok
            .iter()
            .map(|r| read_steps_csv(&r.run_dir.join(RunDir::STEPS)).map_err(anyhow::Error::from))
            .collect::<Result<Vec<_>>>()?;
        let col = |i: usize| -> String {
            let v: Vec<f64> = ok.iter().filter_map(|r| r.fields[i].parse().ok()).collect();
            if v.is_empty() { String::new() } else { mean(&v).to_string() }
        };
        table.push_str(&format!("{alg},{},{},{},{},{},{}\n", ok.len(), col(3), col(4), col(5), col(6), col(9)));
        if runs.is_empty() {
            continue;
        }
        let w = smoothing_window(runs.iter().map(Vec::len).min().unwrap_or(1));
        reward.push(Series {
            label: alg.clone(),
            points: smooth(&mean_curve(&runs, |l| l.mean_reward), w),
        });
        vanishing.push(Series {
            label: alg.clone(),
            points: smooth(&mean_curve(&runs, |l| l.vanishing_ratio), w),
        });
    }
    let chart = |title: &str, y: &str, series, range| Chart {
        title: title.into(),
        x_label: "step".into(),
        y_label: y.into(),
        y_range: range,
        series,
    };
    write(dir, REWARD_SVG, &chart("Reward curves (mean over seeds)", "mean reward", reward, None).render())?;
    write(
        dir,
        VANISHING_SVG,
        &chart("Vanishing advantage ratio (mean over seeds)", "ratio", vanishing, Some((0.0, 1.0))).render(),
    )?;
    write(dir, METRICS_TABLE, &table)
}

pub fn cmd_report(dir: &Path) -> Result<i32> {
    if dir.join(RunDir::STEPS).exists() {
        run_report(dir)?;
    } else if dir.join(COMPARISON_CSV).exists() {
        comparison_report(dir)?;
    } else {
        return Err(usage(format!(
            "{} holds neither {} nor {}",
            dir.display(),
            RunDir::STEPS,
            COMPARISON_CSV
        )));
    }
    println!("wrote {REWARD_SVG}, {VANISHING_SVG} and {METRICS_TABLE} to {}", dir.display());
    Ok(exit::SUCCESS)
}
