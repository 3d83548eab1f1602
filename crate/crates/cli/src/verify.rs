use std::path::PathBuf;

use clap::{Subcommand, ValueEnum};
use deltakit::harness::{gradient_check, homogeneity_check, verify_merge_ratio, OptimizerKind, Variant};
use deltakit::io::{format_float, CsvTable};

use crate::{emit, CliError, CliResult, Outcome};

pub const MERGE_RATIO_TOL: f64 = 1e-8;
pub const HOMOGENEITY_TOL: f64 = 1e-12;
pub const GRADIENT_TOL: f64 = 1e-5;

#[derive(Subcommand, Debug)]
pub enum VerifyCmd {
    /// Train at merge ratio `s` and at ratio 1 with rescaled factors and
    /// learning rate, and compare the effective updates step by step.
    MergeRatio {
        #[arg(long, value_parser = parse_variant)]
        algo: Variant,
        #[arg(long)]
        scale: f64,
        #[arg(long, value_enum)]
        opt: OptArg,
        /// Added to the root of the second-moment estimate.
        #[arg(long, default_value_t = 0.0)]
        eps: f64,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// `ΔW(c·θ) = c^k·ΔW(θ)` over random draws.
    Homogeneity {
        #[arg(long, value_parser = parse_variant)]
        algo: Variant,
        #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
        c: f64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Hand-written gradients against central differences.
    Gradients {
        #[arg(long, value_parser = parse_variant)]
        algo: Variant,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum OptArg {
    Sgd,
    Adam,
    Adagrad,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse::<Variant>().map_err(|_| {
        let names: Vec<&str> = Variant::ALL.iter().map(|v| v.as_str()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn finish(table: CsvTable, out: &Option<PathBuf>, pass: bool) -> CliResult<Outcome> {
    emit(&table, out.as_deref())?;
    Ok(if pass { Outcome::Ok } else { Outcome::CheckFailed })
}

pub fn run(cmd: VerifyCmd) -> CliResult<Outcome> {
    match cmd {
        VerifyCmd::MergeRatio { algo, scale, opt, eps, steps, seed, out } => {
            let kind = match opt {
                OptArg::Sgd if eps != 0.0 => {
                    return Err(CliError::usage("--eps only applies to adam and adagrad"))
                }
                OptArg::Sgd => OptimizerKind::Sgd,
                OptArg::Adam => OptimizerKind::adam(eps),
                OptArg::Adagrad => OptimizerKind::adagrad(eps),
            };
            let report = verify_merge_ratio(algo, scale, kind, steps, seed)?;
            let pass = report.max_deviation < MERGE_RATIO_TOL;
            let mut table = CsvTable::new([
                "algo", "optimizer", "eps", "scale", "steps", "seed", "degree",
                "max_deviation", "max_delta", "max_change", "result",
            ]);
            table.push([
                algo.to_string(),
                kind.name().to_string(),
                format_float(eps),
                format_float(scale),
                steps.to_string(),
                seed.to_string(),
                report.degree.to_string(),
                format_float(report.max_deviation),
                format_float(report.max_delta),
                format_float(report.max_change),
                verdict(pass).to_string(),
            ]);
            finish(table, &out, pass)
        }
        VerifyCmd::Homogeneity { algo, c, trials, seed, out } => {
            let err = homogeneity_check(algo, c, trials, seed)?;
            let pass = err < HOMOGENEITY_TOL;
            let mut table = CsvTable::new(["algo", "degree", "c", "trials", "max_rel_err", "result"]);
            table.push([
                algo.to_string(),
                algo.degree().to_string(),
                format_float(c),
                trials.to_string(),
                format_float(err),
                verdict(pass).to_string(),
            ]);
            finish(table, &out, pass)
        }
        VerifyCmd::Gradients { algo, step, seed, out } => {
            if !(step.is_finite() && step > 0.0) {
                return Err(CliError::usage(format!("--step must be positive, got {step}")));
            }
            let err = gradient_check(algo, step, seed)?;
            let pass = err < GRADIENT_TOL;
            let mut table = CsvTable::new(["algo", "step", "max_rel_err", "result"]);
            table.push([
                algo.to_string(),
                format_float(step),
                format_float(err),
                verdict(pass).to_string(),
            ]);
            finish(table, &out, pass)
        }
    }
}
