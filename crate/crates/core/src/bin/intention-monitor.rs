use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use intention_monitor::pipeline::{Pipeline, PipelineConfig};
use intention_monitor::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "intention-monitor", version, about = "Early detection of malicious addresses")]
struct Cli {
    /// Pipeline config (JSON); defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a synthetic universe (transactions.jsonl, labels.csv, truth.json).
    Synth,
    /// Parse transactions and labels, write ingest_report.json and split.json.
    Ingest,
    /// Write the four path sets of every labeled address under paths/.
    Paths,
    /// Hourly feature timelines under features/.
    Features,
    /// Decision-tree feature selection and complement (featurespec.json).
    Select,
    /// Breakpoints and status/action catalogs.
    Segment,
    /// Boosted trees and the intention network.
    Train,
    /// predictions.csv for the test split.
    Predict,
    /// eval_report.{json,csv} and survival_curves.csv.
    Eval,
    /// Status/action sequence, decision paths, motif and survival trace of one address.
    Explain {
        address: String,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// ingest through eval.
    Run,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Internal(e.to_string()))?;
    }
    let p = Pipeline::new(&cli.out_dir, cfg)?;
    match cli.cmd {
        Cmd::Synth => p.synth()?,
        Cmd::Ingest => {
            let r = p.ingest()?;
            println!(
                "{} transactions, {} addresses, {} labeled ({} positive), {} rejected lines",
                r.transactions, r.addresses, r.labeled, r.positives, r.rejected
            );
        }
        Cmd::Paths => p.paths()?,
        Cmd::Features => p.features()?,
        Cmd::Select => {
            let spec = p.select()?;
            println!("round {}: {} columns", spec.round, spec.columns().len());
        }
        Cmd::Segment => {
            let m = p.segment()?;
            println!(
                "breakpoints {:?}, {} status / {} action clusters",
                m.plan.breakpoints, m.status.k, m.action.k
            );
        }
        Cmd::Train => {
            let hist = p.train()?;
            if let Some(last) = hist.last() {
                println!("epoch {} loss {}", last.epoch, last.mean_loss);
            }
        }
        Cmd::Predict => {
            let preds = p.predict()?;
            println!("{} addresses predicted", preds.len());
        }
        Cmd::Eval => print_report(&p.eval()?),
        Cmd::Run => print_report(&p.run()?),
        Cmd::Explain { address, json } => {
            let ex = p.explain(&address)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&ex)?);
            } else {
                print!("{}", ex.render());
            }
        }
    }
    Ok(())
}

fn print_report(r: &intention_monitor::metrics::EvalReport) {
    println!(
        "addresses {} positives {} F1_E {:.4} F1_C {:.4} mean F1 {:.4} median t_fc(pos) {}",
        r.addresses,
        r.positives,
        r.f1_early,
        r.f1_consistency,
        r.mean_f1,
        r.confidence
            .median_positive
            .map(|v| v.to_string())
            .unwrap_or_else(|| "none".into())
    );
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
