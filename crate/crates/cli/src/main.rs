mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use commands::{Ctx, PromptSpec};
use config::Override;
use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "protoerase", version, about = "Prototype-guided concept erasure on an analytic diffusion world")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON run configuration; `PROTO_ERASE_*` variables and flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// World file to load.
    #[arg(long, global = true)]
    world: Option<PathBuf>,
    /// Build the world from this seed instead of loading it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    bank: Option<PathBuf>,
    #[arg(long, global = true)]
    records: Option<PathBuf>,
    /// Directory for report files.
    #[arg(long, global = true)]
    reports: Option<PathBuf>,
    /// Maximum worker threads; results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Print the fully resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Paired generation, differences and clustering into image prototypes.
    Extract {
        /// Prototypes per concept (K).
        #[arg(long)]
        k: Option<usize>,
        /// Concept prompts per concept (N).
        #[arg(long)]
        prompts: Option<usize>,
        /// Images per prompt (M).
        #[arg(long)]
        per_prompt: Option<usize>,
    },
    /// Soft-prompt optimization of every image prototype in the bank.
    Optimize {
        /// Ascent iterations (U).
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        /// Soft tokens per prototype (L).
        #[arg(long)]
        len: Option<usize>,
    },
    /// Guided sampling with prototype selection; writes JSON-lines records.
    Sample {
        /// Comma-separated token ids; repeat for several prompts.
        #[arg(long = "prompt", value_delimiter = ';')]
        prompts: Vec<String>,
        #[arg(long, default_value_t = 0)]
        concept_prompts: usize,
        #[arg(long, default_value_t = 0)]
        neutral_prompts: usize,
        #[arg(long, default_value_t = 0)]
        prompt_seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Force β = 0 for a baseline run.
        #[arg(long)]
        no_erase: bool,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Flagged rate and context alignment from records files, or live when none are given.
    #[command(alias = "rescore")]
    Eval {
        #[arg(value_name = "RECORDS")]
        records: Vec<PathBuf>,
        #[arg(long)]
        concept: Option<String>,
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        formats: Option<Vec<String>>,
    },
    /// Rebuild the bank for several K and evaluate each on one grid.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long)]
        concept: Option<String>,
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        formats: Option<Vec<String>>,
    },
    /// Nearest vocabulary tokens of every prototype.
    Inspect {
        #[arg(long)]
        top: Option<usize>,
    },
    /// Fit the concept detector(s) and the selection threshold τ.
    Calibrate {
        /// Samples per class and split for the detector fit.
        #[arg(long)]
        n: Option<usize>,
    },
}

fn parse_prompt(raw: &str) -> CliResult<Vec<usize>> {
    raw.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad token id {t:?} in prompt {raw:?}")))
        })
        .collect()
}

fn overrides(cli: &Cli) -> Vec<Override> {
    let g = &cli.global;
    let mut o: Vec<Override> = Vec::new();
    let mut put = |k: &'static str, v: Option<serde_json::Value>| {
        if let Some(v) = v {
            o.push((k, v));
        }
    };
    put("paths.world", g.world.as_ref().map(|p| json!(p)));
    put("world.seed", g.seed.map(|s| json!(s)));
    put("pipeline.seed", g.seed.map(|s| json!(s)));
    put("paths.bank", g.bank.as_ref().map(|p| json!(p)));
    put("paths.records", g.records.as_ref().map(|p| json!(p)));
    put("paths.reports", g.reports.as_ref().map(|p| json!(p)));
    put("jobs", g.jobs.map(|j| json!(j)));
    match &cli.command {
        Command::Extract { k, prompts, per_prompt } => {
            put("pipeline.k", k.map(|v| json!(v)));
            put("pipeline.prompts", prompts.map(|v| json!(v)));
            put("pipeline.per_prompt", per_prompt.map(|v| json!(v)));
        }
        Command::Optimize { iters, eta, len } => {
            put("pipeline.textual.iters", iters.map(|v| json!(v)));
            put("pipeline.textual.eta", eta.map(|v| json!(v)));
            put("pipeline.textual.len", len.map(|v| json!(v)));
        }
        Command::Sample { tau, beta, .. } => {
            put("guidance.tau", tau.map(|v| json!(v)));
            put("guidance.beta", beta.map(|v| json!(v)));
        }
        Command::Eval { formats, .. } => put("eval.formats", formats.as_ref().map(|v| json!(v))),
        Command::Ablate { ks, formats, .. } => {
            put("eval.ks", ks.as_ref().map(|v| json!(v)));
            put("eval.formats", formats.as_ref().map(|v| json!(v)));
        }
        Command::Inspect { top } => put("eval.top", top.map(|v| json!(v))),
        Command::Calibrate { n } => put("eval.detector_samples", n.map(|v| json!(v))),
    }
    o
}

fn run(cli: Cli) -> CliResult<()> {
    let resolved = config::resolve(cli.global.config.as_deref(), std::env::vars(), overrides(&cli))?;
    if cli.global.print_config {
        println!("{}", serde_json::to_string_pretty(&resolved.config).expect("config serializes"));
        return Ok(());
    }
    if let Some(jobs) = resolved.config.jobs {
        // only fails if a pool already exists, which cannot happen this early
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let top = resolved.config.eval.top;
    let ctx = Ctx { resolved };
    match &cli.command {
        Command::Extract { .. } => commands::extract(&ctx),
        Command::Optimize { .. } => commands::optimize(&ctx),
        Command::Sample {
            prompts,
            concept_prompts,
            neutral_prompts,
            prompt_seed,
            seeds,
            no_erase,
            calibration,
            ..
        } => {
            let spec = PromptSpec {
                explicit: prompts.iter().map(|p| parse_prompt(p)).collect::<CliResult<_>>()?,
                concept_prompts: *concept_prompts,
                neutral_prompts: *neutral_prompts,
                prompt_seed: *prompt_seed,
            };
            commands::sample(&ctx, &spec, seeds, *no_erase, calibration.as_deref())
        }
        Command::Eval {
            records,
            concept,
            calibration,
            ..
        } => commands::eval(&ctx, records, concept.as_deref(), calibration.as_deref()),
        Command::Ablate { concept, calibration, .. } => commands::ablate(&ctx, concept.as_deref(), calibration.as_deref()),
        Command::Inspect { .. } => commands::inspect(&ctx, top),
        Command::Calibrate { .. } => commands::calibrate(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
