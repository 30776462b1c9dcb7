//! `debias-bench`: generate synthetic data, run sweeps, re-emit reports and
//! check gradients.
//!
//! Exit status is 0 on success, 1 for bad arguments or inputs, and 2 when a
//! run fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use debias_core::dataset::{synth_generate, write_features, write_manifest, SynthConfig};
use debias_core::harness::{
    emit_report, load_rows, run_experiment, ExperimentSpec, MethodEntry, ReportFormat,
};
use debias_core::trainers::gradcheck::{loss_checks, step_checks};
use debias_core::trainers::MethodKind;
use debias_core::Error;

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "debias-bench",
    version,
    about = "Gender debiasing benchmark for emotion classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic manifest (manifest.csv) and feature file (features.bin).
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        dims: usize,
        /// Gender ratio imposed on every split.
        #[arg(long, default_value_t = 1)]
        ratio: u32,
        #[arg(long)]
        bias_strength: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a sweep described by a JSON experiment file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated method names, replacing the file's list.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<u32>>,
        /// Run seeds 0..N.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the report of a finished (or partial) sweep directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "md")]
        format: String,
    },
    /// Finite-difference check of every loss and every method's step loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn synth(
    n: usize,
    classes: usize,
    dims: usize,
    ratio: u32,
    bias_strength: f64,
    seed: u64,
    out: &Path,
) -> Result<(), Failure> {
    let cfg = SynthConfig::new(n, classes, dims, ratio, bias_strength, seed)?;
    let ds = synth_generate(&cfg)?;
    fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    write_manifest(&out.join("manifest.csv"), &ds)?;
    write_features(&out.join("features.bin"), &ds)?;
    println!("wrote {} samples to {}", ds.len(), out.display());
    Ok(())
}

fn load_spec(config: &Path, out: Option<&Path>) -> Result<ExperimentSpec, Failure> {
    let text = fs::read_to_string(config)
        .map_err(|e| Failure::Validation(format!("{}: {e}", config.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
    if let (Some(out), Some(obj)) = (out, value.as_object_mut()) {
        obj.insert(
            "output_dir".into(),
            serde_json::Value::String(out.display().to_string()),
        );
    }
    Ok(serde_json::from_value(value).map_err(Error::from)?)
}

fn run(
    config: &Path,
    methods: Option<Vec<String>>,
    ratios: Option<Vec<u32>>,
    seeds: Option<u64>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let mut spec = load_spec(config, out)?;
    if let Some(names) = methods {
        spec.methods = names
            .iter()
            .map(|s| s.trim().parse::<MethodKind>().map(MethodEntry::Name))
            .collect::<Result<_, _>>()?;
    }
    if let Some(r) = ratios {
        spec.ratios = r;
    }
    if let Some(n) = seeds {
        spec.seeds = (0..n).collect();
    }
    spec.validate()?;
    let rows = run_experiment(&spec)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    println!("{}", emit_report(&rows, ReportFormat::Markdown));
    info!("reports written to {}", spec.output_dir.display());
    if failed > 0 {
        return Err(Failure::Runtime(format!(
            "{failed} of {} runs failed",
            rows.len()
        )));
    }
    Ok(())
}

fn report(input: &Path, format: &str) -> Result<(), Failure> {
    let format: ReportFormat = format.parse()?;
    let rows = load_rows(input)?;
    if rows.is_empty() {
        return Err(Failure::Validation(format!(
            "no run records under {}",
            input.display()
        )));
    }
    print!("{}", emit_report(&rows, format));
    Ok(())
}

fn gradcheck(seed: u64) -> Result<(), Failure> {
    let mut worst = 0.0_f64;
    for (group, checks) in [("loss", loss_checks(seed)?), ("step", step_checks(seed)?)] {
        for c in checks {
            let verdict = if c.error <= GRAD_TOLERANCE {
                "ok"
            } else {
                "FAIL"
            };
            println!("{group:5} {:16} {:.3e} {verdict}", c.name, c.error);
            worst = worst.max(c.error);
        }
    }
    if worst > GRAD_TOLERANCE {
        return Err(Failure::Runtime(format!(
            "worst relative error {worst:.3e} exceeds {GRAD_TOLERANCE:e}"
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth {
            n,
            classes,
            dims,
            ratio,
            bias_strength,
            seed,
            out,
        } => synth(n, classes, dims, ratio, bias_strength, seed, &out),
        Command::Run {
            config,
            methods,
            ratios,
            seeds,
            out,
        } => run(&config, methods, ratios, seeds, out.as_deref()),
        Command::Report { input, format } => report(&input, &format),
        Command::Gradcheck { seed } => gradcheck(seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
