use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mmdyn_core::contextualization::PhaseConfig;
use mmdyn_core::dump_io::{generate_synthetic_dump, SynthSpec};
use mmdyn_core::logit_lens::DEFAULT_TOP_K;
use mmdyn_core::report::{parse_analyses, run_analysis, validate_paths, RunConfig};

#[derive(Parser)]
#[command(
    name = "mmdyn",
    version,
    about = "Layer-wise multimodal interaction profiler"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check dump archives against the format invariants.
    Validate {
        #[arg(required = true)]
        dumps: Vec<PathBuf>,
        /// Print every check, not only failures.
        #[arg(long)]
        verbose: bool,
        /// Emit the reports as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run analyses over one or more dumps and write a report bundle.
    Analyze(AnalyzeArgs),
    /// Write a synthetic dump with planted ground truth.
    Synth {
        /// SynthSpec JSON file.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Comma-separated subset of contextualization,intra,attention,logitlens,phases.
    /// Empty runs validation only.
    #[arg(
        long,
        default_value = "contextualization,intra,attention,logitlens,phases"
    )]
    analyses: String,
    /// LogitLens top-k per visual token.
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    k: usize,
    /// Tokens reported per layer in the attention summary.
    #[arg(long, default_value_t = 5)]
    top_tokens: usize,
    #[arg(long, default_value_t = PhaseConfig::default().smooth_window)]
    smooth_window: usize,
    #[arg(long, default_value_t = PhaseConfig::default().deadband)]
    deadband: f64,
    #[arg(long, default_value_t = PhaseConfig::default().target_phases)]
    target_phases: usize,
    /// Stoplist file, one word per line. Defaults to the built-in English list.
    #[arg(long)]
    stoplist: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads, 0 = one per core. MMDYN_THREADS takes precedence.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(required = true)]
    dumps: Vec<PathBuf>,
}

fn validate(dumps: &[PathBuf], verbose: bool, json: bool) -> Result<bool> {
    let mut all_ok = true;
    let mut reports = Vec::new();
    for (path, result) in dumps.iter().zip(validate_paths(dumps)) {
        let report = match result {
            Ok(r) => r,
            Err(e) => {
                all_ok = false;
                eprintln!("{}: error: {e}", path.display());
                continue;
            }
        };
        all_ok &= report.ok();
        if json {
            reports.push(report);
            continue;
        }
        let failed = report.failures().count();
        if failed == 0 {
            println!("{}: ok ({} checks)", path.display(), report.entries.len());
        } else {
            println!(
                "{}: FAILED ({failed} of {} checks)",
                path.display(),
                report.entries.len()
            );
        }
        for e in &report.entries {
            if e.ok && !verbose {
                continue;
            }
            let status = if e.ok { "pass" } else { "FAIL" };
            if e.detail.is_empty() {
                println!("  {status} {e}");
            } else {
                println!("  {status} {e} ({})", e.detail);
            }
        }
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&reports)?);
    }
    Ok(all_ok)
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let mut cfg = RunConfig::new(args.dumps, args.out);
    cfg.analyses = parse_analyses(&args.analyses)?;
    cfg.k = args.k;
    cfg.top_tokens = args.top_tokens;
    cfg.phases = PhaseConfig {
        smooth_window: args.smooth_window,
        deadband: args.deadband,
        target_phases: args.target_phases,
    };
    cfg.stoplist_path = args.stoplist;
    cfg.threads = args.threads;
    let bundle = run_analysis(&cfg)?;
    for f in &bundle.files {
        println!("{}  {}", f.sha256, cfg.out_dir.join(&f.path).display());
    }
    if let Some(d) = &bundle.phase_diagram {
        println!(
            "phases: boundaries {:?}, canonical {}",
            d.boundaries, d.canonical
        );
    }
    println!("bundle {}", bundle.fingerprint());
    Ok(())
}

fn synth(spec: &Path, seed: u64, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let spec: SynthSpec =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", spec.display()))?;
    let manifest = generate_synthetic_dump(&spec, seed, out)?;
    println!("{}", manifest.manifest_path().display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Validate {
            dumps,
            verbose,
            json,
        } => validate(&dumps, verbose, json),
        Command::Analyze(args) => analyze(args).map(|_| true),
        Command::Synth { spec, seed, out } => synth(&spec, seed, &out).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
