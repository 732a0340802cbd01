use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use genret::pipeline::{self, Dataset, EvalPlan, TrainOutputs};
use genret::service::{self, AppState};
use genret::{report, Config};
use genret_core::eval::{write_eval_csv, write_lift_csv, write_sweep_csv};
use genret_core::index::load_index;
use genret_core::signals::{EventLimits, SignalStore};

#[derive(Parser)]
#[command(name = "genret", version, about = "Generative retrieval: synthetic data, training, evaluation and serving")]
struct Cli {
    /// TOML run configuration; every table is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world into a data directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Overrides `world.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on the non-held-out users of a data directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Final model checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Overrides `training.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// none, outcome or outcome-temporal; overrides `model.conditioning`.
        #[arg(long)]
        conditioning: Option<String>,
        /// Directory for per-epoch checkpoints.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// CSV log of per-step loss and per-epoch validation recall.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Score a model on held-out users and write CSV reports.
    Eval(EvalArgs),
    /// Build or query an item index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Run the HTTP retrieval service.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// 0 binds an ephemeral port.
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Render SVG charts from evaluation CSVs.
    Report {
        #[arg(long)]
        eval: Vec<PathBuf>,
        #[arg(long)]
        lift: Option<PathBuf>,
        #[arg(long)]
        sweep: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Signal store maintenance.
    #[command(subcommand)]
    Signals(SignalsCommand),
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// uc, oc or mt.
    #[arg(long, default_value = "uc")]
    mode: String,
    /// Overrides `eval.k`.
    #[arg(long)]
    k: Option<usize>,
    /// Per-surface CSV: surface, mode, recall_at_<k>, prop_unique, users.
    #[arg(long)]
    out: PathBuf,
    /// Unconditioned model; enables the lift matrix.
    #[arg(long, requires = "lift_out")]
    uc_model: Option<PathBuf>,
    #[arg(long, requires = "uc_model")]
    lift_out: Option<PathBuf>,
    /// Multi-token sweep CSV over `--sweep-g`.
    #[arg(long)]
    sweep_out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    sweep_g: Vec<usize>,
    /// Embeddings per request in the sweep.
    #[arg(long, default_value_t = 16)]
    sweep_total: usize,
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Embed every pin with a model and write an index file.
    Build {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the nearest indexed items to an item, one JSON object per line.
    Query {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        item_id: u64,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
}

#[derive(Subcommand)]
enum SignalsCommand {
    /// Fold realtime events up to `cutoff` into the batch segment.
    Compact {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cutoff: i64,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    Config::load(path).map_err(anyhow::Error::msg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth { out, seed } => {
            if let Some(s) = seed {
                cfg.world.seed = s;
            }
            let s = pipeline::synth(&cfg, &out)?;
            println!("wrote {} items, {} users, {} events to {} (batch cutoff {})", s.items, s.users, s.events, out.display(), s.cutoff);
        }
        Command::Train { data, out, epochs, conditioning, checkpoint_dir, metrics } => {
            if let Some(e) = epochs {
                cfg.training.epochs = e;
            }
            if let Some(c) = conditioning {
                cfg.model.conditioning = pipeline::parse_conditioning(&c)?;
            }
            cfg.validate().map_err(anyhow::Error::msg)?;
            let data = Dataset::load(&data)?;
            let (_, report) = pipeline::train_model(&cfg, &data, &out, &TrainOutputs { checkpoint_dir, metrics })?;
            let last = report.metrics.last();
            println!(
                "trained {} steps; final loss {:.4}; validation recall@10 {}; model written to {}",
                report.steps(),
                last.map_or(f64::NAN, |m| m.loss),
                last.and_then(|m| m.val_recall_at_10).map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}")),
                out.display()
            );
        }
        Command::Eval(a) => {
            if let Some(k) = a.k {
                cfg.eval.k = k;
            }
            cfg.validate().map_err(anyhow::Error::msg)?;
            let mode = pipeline::parse_mode(&a.mode)?;
            let model = pipeline::load_model(&a.model)?;
            let uc = a.uc_model.as_deref().map(pipeline::load_model).transpose()?;
            let data = Dataset::load(&a.data)?;
            let plan = EvalPlan { mode, uc_model: uc.as_ref(), sweep: a.sweep_out.as_ref().map(|_| (a.sweep_g.clone(), a.sweep_total)) };
            let out = pipeline::evaluate(&cfg.eval, &model, &data, &plan)?;
            write_eval_csv(&a.out, cfg.eval.k, &out.rows)?;
            for r in &out.rows {
                println!("{:<14} {} recall@{} {:.4} prop_unique {:.4} users {}", r.surface, r.mode, cfg.eval.k, r.recall, r.prop_unique, r.users);
            }
            println!("random baseline {:.5}", out.random_baseline);
            if let (Some(path), Some(m)) = (&a.lift_out, &out.lift) {
                write_lift_csv(path, m)?;
                println!("lift diagonal mean {:?}, diagonally dominant {}", m.diagonal_mean(), m.diagonal_dominant());
            }
            if let (Some(path), Some(rows)) = (&a.sweep_out, &out.sweep) {
                write_sweep_csv(path, cfg.eval.k, rows)?;
            }
        }
        Command::Index(IndexCommand::Build { model, data, out }) => {
            let model = pipeline::load_model(&model)?;
            let data = Dataset::load(&data)?;
            let index = pipeline::build_index(&cfg.index, &model, &data.catalog)?;
            pipeline::write_index(&index, &out)?;
            println!("indexed {} items ({:?}, {} partitions) to {}", index.len(), index.mode(), index.num_partitions(), out.display());
        }
        Command::Index(IndexCommand::Query { model, index, data, item_id, k }) => {
            let model = pipeline::load_model(&model)?;
            let index = load_index(&index).with_context(|| format!("reading index {}", index.display()))?;
            let data = Dataset::load(&data)?;
            let mut stdout = std::io::stdout().lock();
            for n in pipeline::query_index(&model, &index, &data.catalog, item_id, k)? {
                writeln!(stdout, "{}", serde_json::to_string(&n)?)?;
            }
        }
        Command::Serve { model, index, data, host, port } => serve(cfg, model, index, data, &host, port)?,
        Command::Report { eval, lift, sweep, out } => {
            for path in report::render(&out, &eval, lift.as_deref(), sweep.as_deref()).map_err(anyhow::Error::msg)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Signals(SignalsCommand::Compact { data, cutoff }) => {
            let dir = data.join(pipeline::SIGNALS_DIR);
            let limits = EventLimits { num_actions: usize::MAX, num_surfaces: usize::MAX };
            let store = SignalStore::open(&dir, limits)?.compact(cutoff)?;
            println!("compacted {}: batch cutoff now {}", dir.display(), store.cutoff());
        }
    }
    Ok(())
}

fn serve(cfg: Config, model: PathBuf, index: PathBuf, data: PathBuf, host: &str, port: u16) -> Result<()> {
    let engine = pipeline::build_engine(&cfg, &model, &index, &data)?;
    let reload_cfg = cfg.clone();
    let state = Arc::new(AppState::with_loader(engine, move || {
        pipeline::build_engine(&reload_cfg, &model, &index, &data).map_err(|e| format!("{e:#}"))
    }));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let addr: SocketAddr = format!("{host}:{port}").parse().with_context(|| format!("bad listen address {host}:{port}"))?;
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        let bound = listener.local_addr()?;
        println!("listening on http://{bound}");
        std::io::stdout().flush()?;
        log::info!("serving on {bound}");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        service::serve(listener, state, shutdown).await?;
        Ok(())
    })
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GENRET_LOG", "info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
