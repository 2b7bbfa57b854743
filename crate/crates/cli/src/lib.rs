//! Command-line driver: training runs, algorithm comparisons, verification
//! suites and static reports.
//!
//! Exit codes are a stable contract, see [`exit`].

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use grpo_forge::algorithms::Algorithm;
use grpo_forge::envs::write_jsonl;
use grpo_forge::gradcheck::{self, GradcheckOptions};
use grpo_forge::oracle::{self, SweepOptions};
use grpo_forge::trainer::{train_in_dir, TrainerConfig, TrainingSetup};

pub mod manifest;
pub mod report;
pub mod svg;

use manifest::RunManifest;

pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const VERIFICATION_FAILED: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const NUMERIC_ABORT: i32 = 3;
}

/// Marks an error as a usage/configuration problem (exit 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Map an error chain onto an exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use grpo_forge::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return exit::USAGE;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::NumericAbort { .. } => exit::NUMERIC_ABORT,
                E::Config(_)
                | E::InvalidInput(_)
                | E::Parse(_)
                | E::Json(_)
                | E::Descriptor(_)
                | E::Integrity(_)
                | E::Io { .. } => exit::USAGE,
                E::NotEnumerable { .. } | E::Unavailable(_) => exit::VERIFICATION_FAILED,
            };
        }
    }
    exit::VERIFICATION_FAILED
}

#[derive(Debug, Parser)]
#[command(name = "grpo-forge", version, about = "Group-relative policy optimization laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one algorithm into a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train several algorithms over several seeds and compare them.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        algorithms: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (0: all cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Perturb one algorithm's analytic gradient (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Check the closed-form optimum and its identities by exact enumeration.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Response groups per (vocab, length, λ) configuration.
        #[arg(long, default_value_t = 20)]
        groups: usize,
        /// Substitute π_old for the optimal policy (negative control).
        #[arg(long, hide = true)]
        negative_control: bool,
    },
    /// Render plots and a metrics table for a run or comparison directory.
    Report { dir: PathBuf },
    /// Write a task set as JSON lines.
    Dataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
    },
    /// Print the fully defaulted configuration.
    DefaultConfig,
}

pub fn load_config(path: &Path) -> Result<TrainerConfig> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    TrainerConfig::from_json(&text).with_context(|| format!("invalid config {}", path.display()))
}

pub fn parse_algorithm(id: &str) -> Result<Algorithm> {
    id.trim().parse::<Algorithm>().map_err(anyhow::Error::from)
}

/// Parse and run; returns the process exit code.
pub fn run_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() { exit::USAGE } else { exit::SUCCESS }
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Train {
            config,
            out,
            seed,
            resume,
        } => cmd_train(&config, &out, seed, resume.as_deref()),
        Command::Compare {
            config,
            algorithms,
            seeds,
            out,
            jobs,
        } => cmd_compare(&config, &algorithms, &seeds, &out, jobs),
        Command::Gradcheck { seed, trials, corrupt } => cmd_gradcheck(seed, trials, corrupt.as_deref()),
        Command::OracleCheck {
            seed,
            groups,
            negative_control,
        } => cmd_oracle(seed, groups, negative_control),
        Command::Report { dir } => report::cmd_report(&dir),
        Command::Dataset { config, out, split } => cmd_dataset(&config, &out, split),
        Command::DefaultConfig => {
            println!("{}", TrainerConfig::default().to_json());
            Ok(exit::SUCCESS)
        }
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code(&err)
        }
    }
}

pub fn cmd_train(config: &Path, out: &Path, seed: Option<u64>, resume: Option<&Path>) -> Result<i32> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut manifest = RunManifest::begin("train", &cfg);
    manifest.write(out)?;
    log::info!("run {} ({} steps of {}) -> {}", manifest.run_id, cfg.steps, cfg.algorithm, out.display());
    match train_in_dir(&cfg, out, resume) {
        Ok(run) => {
            manifest.finish();
            manifest.write(out)?;
            println!(
                "{} seed {}: eval mean reward {:.4} -> {:.4} over {} steps",
                cfg.algorithm,
                cfg.seed,
                run.initial_eval.mean_reward,
                run.final_eval.mean_reward,
                cfg.steps
            );
            Ok(exit::SUCCESS)
        }
        Err(err) => {
            if let grpo_forge::Error::NumericAbort { .. } = &err {
                eprintln!(
                    "diagnostic dump written to {}",
                    out.join(grpo_forge::trainer::RunDir::ABORT_DUMP).display()
                );
            }
            Err(err.into())
        }
    }
}

pub fn cmd_compare(config: &Path, algorithms: &[String], seeds: &[u64], out: &Path, jobs: usize) -> Result<i32> {
    let cfg = load_config(config)?;
    let algs = algorithms.iter().map(|a| parse_algorithm(a)).collect::<Result<Vec<_>>>()?;
    if algs.len() < 2 || algs.iter().enumerate().any(|(i, a)| algs[..i].contains(a)) {
        return Err(usage("compare needs at least two distinct algorithms"));
    }
    if seeds.is_empty() {
        return Err(usage("compare needs at least one seed"));
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut manifest = RunManifest::begin("compare", &cfg);
    manifest.write(out)?;
    let outcomes = report::run_matrix(&cfg, &algs, seeds, out, jobs);
    report::write_comparison(out, &outcomes)?;
    report::comparison_report(out)?;
    manifest.finish();
    manifest.write(out)?;

    let mut code = exit::SUCCESS;
    for o in &outcomes {
        if let Err(msg) = &o.result {
            eprintln!("{} seed {} failed: {msg}", o.algorithm, o.seed);
            code = code.max(o.exit_code);
        }
    }
    println!("{}", fs::read_to_string(out.join(report::COMPARISON_CSV))?.trim_end());
    Ok(code)
}

pub fn cmd_gradcheck(seed: u64, trials: usize, corrupt: Option<&str>) -> Result<i32> {
    if trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    let opts = GradcheckOptions {
        corrupt: corrupt.map(parse_algorithm).transpose()?,
        ..GradcheckOptions::new(seed, trials)
    };
    let report = gradcheck::run(&opts)?;
    println!("{:<18} {:>7} {:>14} {:>8}  status", "algorithm", "trials", "max_rel_error", "redrawn");
    for r in &report.results {
        println!(
            "{:<18} {:>7} {:>14.3e} {:>8}  {}",
            r.algorithm.id(),
            r.trials,
            r.max_rel_error,
            r.redrawn,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let mut code = exit::SUCCESS;
    for r in report.results.iter().filter(|r| !r.passed()) {
        eprintln!(
            "gradcheck failed: {} relative error {:.3e} > {:e} (instance seed {})",
            r.algorithm,
            r.max_rel_error,
            gradcheck::REL_TOL,
            r.worst_seed
        );
        code = exit::VERIFICATION_FAILED;
    }
    Ok(code)
}

pub fn cmd_oracle(seed: u64, groups: usize, negative_control: bool) -> Result<i32> {
    let report = oracle::run_sweep(&SweepOptions {
        seed,
        substitute_old_policy: negative_control,
        groups_per_config: groups,
    })?;
    println!(
        "{:<20} {:>5} {:>3} {:>6} {:>12} {:>10}  status",
        "check", "vocab", "L", "lambda", "max_error", "threshold"
    );
    for r in &report.rows {
        let bound = if r.must_exceed { format!(">{:.0e}", r.threshold) } else { format!("<={:.0e}", r.threshold) };
        println!(
            "{:<20} {:>5} {:>3} {:>6} {:>12.3e} {:>10}  {}",
            r.check,
            r.vocab,
            r.len,
            r.lambda,
            r.max_error,
            bound,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    if report.passed() {
        return Ok(exit::SUCCESS);
    }
    let failures: Vec<_> = report.failures().collect();
    eprintln!("{} identity check(s) failed:", failures.len());
    eprintln!("{}", serde_json::to_string_pretty(&failures)?);
    Ok(exit::VERIFICATION_FAILED)
}

pub fn cmd_dataset(config: &Path, out: &Path, split: Split) -> Result<i32> {
    let cfg = load_config(config)?;
    let setup = TrainingSetup::from_config(&cfg)?;
    let data = match split {
        Split::Train => &setup.train,
        Split::Eval => &setup.eval,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_jsonl(out, data)?;
    println!("wrote {} instances to {}", data.len(), out.display());
    Ok(exit::SUCCESS)
}

/// Install the logger; verbosity comes from `GRPO_FORGE_LOG`.
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("GRPO_FORGE_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let cfg: anyhow::Error = grpo_forge::Error::Config("x".into()).into();
        assert_eq!(exit_code(&cfg), exit::USAGE);
        let abort: anyhow::Error = grpo_forge::Error::NumericAbort {
            step: 0,
            reason: "nan".into(),
            dump: String::new(),
        }
        .into();
        assert_eq!(exit_code(&abort.context("training")), exit::NUMERIC_ABORT);
        assert_eq!(exit_code(&usage("bad flag")), exit::USAGE);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), exit::VERIFICATION_FAILED);
    }

    #[test]
    fn unknown_algorithm_names_valid_ids() {
        let err = parse_algorithm("sgd").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("reg-grpo") && msg.contains("online-dpo"), "{msg}");
        assert_eq!(exit_code(&err), exit::USAGE);
    }

    #[test]
    fn flag_parsing() {
        assert_eq!(run_args(["grpo-forge", "gradcheck", "--trials", "0"]), exit::USAGE);
        assert_eq!(run_args(["grpo-forge", "no-such-command"]), exit::USAGE);
        let cli = Cli::try_parse_from(["grpo-forge", "compare", "--config", "c.json", "--algorithms", "grpo,reg-grpo", "--out", "o"]).unwrap();
        match cli.command {
            Command::Compare { algorithms, seeds, jobs, .. } => {
                assert_eq!(algorithms, ["grpo", "reg-grpo"]);
                assert_eq!(seeds, [0, 1, 2]);
                assert_eq!(jobs, 0);
            }
            other => panic!("{other:?}"),
        }
    }
}
