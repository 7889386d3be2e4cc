use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use disenhcn::commands::{
    cmd_evaluate, cmd_gradcheck, cmd_inspect, cmd_predict, cmd_prepare, cmd_synth, cmd_train, ensure_passed,
    gradcheck_summary,
};
use disenhcn::config::RunConfig;
use disenhcn::evaluator::popularity_baseline;

#[derive(Parser)]
#[command(name = "disenhcn", version, about = "Disentangled hypergraph activity prediction")]
struct Cli {
    /// Flat key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for generation, splitting, initialisation and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 keeps every output reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clustered corpus as `<out>/records.csv`.
    Synth,
    /// Filter, encode and split a raw CSV into a bundle directory.
    Prepare {
        #[arg(long)]
        input: PathBuf,
    },
    /// Train on a bundle; writes best.ckpt, last.ckpt and train_log.csv.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Test-split Recall@K and NDCG@K.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Also report the popularity baseline.
        #[arg(long)]
        baseline: bool,
    },
    /// Top-K activities for one raw (user, location, time) context.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long)]
        location: String,
        #[arg(long)]
        time: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Adjacency statistics and attention distributions.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of the full objective on a tiny model.
    Gradcheck,
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().context("--out DIR is required for this command")
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.set)?;
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .context("configuring the thread pool")?;
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth => {
            let path = out_dir(cli)?.join("records.csv");
            let n = cmd_synth(&cfg.synth, &path)?;
            println!("wrote {n} records to {}", path.display());
        }
        Command::Prepare { input } => {
            let summary = cmd_prepare(input, &cfg, out_dir(cli)?)?;
            print!("{}", summary.table());
            println!("train {} / valid {} / test {}", summary.train, summary.valid, summary.test);
        }
        Command::Train { data } => {
            let out = out_dir(cli)?;
            print!("{}", cfg.to_text());
            let mut report = |r: &disenhcn::trainer::LogRow| {
                eprintln!(
                    "epoch {:>4}  loss {:.6}  val recall {:.4}  ndcg {:.4}  lr {:e}",
                    r.epoch, r.total, r.val_recall, r.val_ndcg, r.lr
                );
            };
            let outcome = cmd_train(data, &cfg, out, Some(&mut report))?;
            if let Some(b) = outcome.best.progress.best {
                println!("best epoch {}: val recall {:.4}, ndcg {:.4}", b.epoch, b.recall, b.ndcg);
            }
            println!("checkpoints written to {}", out.display());
        }
        Command::Evaluate { ckpt, data, k, baseline } => {
            let report = cmd_evaluate(ckpt, data, *k, cfg.exclude_train, cli.out.as_deref())?;
            println!("{}", serde_json::to_string(&report)?);
            if *baseline {
                let bundle = disenhcn::data::load_bundle(data)?;
                let pop = popularity_baseline(&bundle, *k)?;
                println!("popularity {}", serde_json::to_string(&pop)?);
            }
        }
        Command::Predict {
            ckpt,
            data,
            user,
            location,
            time,
            k,
        } => {
            for (rank, (a, s)) in cmd_predict(ckpt, data, (user, location, time), *k)?.iter().enumerate() {
                println!("{}\t{a}\t{s:.6}", rank + 1);
            }
        }
        Command::Inspect { ckpt, data } => {
            let out = out_dir(cli)?;
            let result = cmd_inspect(ckpt, data, out)?;
            println!(
                "{} operators, {} stored entries, {} bytes",
                result.stats.types.len() + result.stats.user_edges.len(),
                result.stats.total_nnz,
                result.stats.total_bytes
            );
            if let Some(rows) = result.attention {
                println!("{} attention rows written to {}", rows.len(), out.join("attention.csv").display());
            }
        }
        Command::Gradcheck => {
            let report = cmd_gradcheck(&cfg)?;
            print!("{}", gradcheck_summary(&report));
            ensure_passed(&report)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<disenhcn::Error>()
                .map_or(1, |err| err.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
