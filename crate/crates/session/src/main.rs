use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use xtamer::config::{SessionConfig, UserSource};
use xtamer::report::{parse_report, read_log, summarize, REPORT_FILE, SUMMARY_FILE, LOG_FILE};
use xtamer::server::{serve, AppState};
use xtamer::simulate::{run_simulation, SimulationSummary};
use xtamer_core::cnn::{pretrain, CnnModel, PretrainConfig};
use xtamer_core::face::{generate_dataset, DatasetManifest, Emotion};
use xtamer_core::som::{train_som, SomConfig};
use xtamer_core::user::UserProfile;

#[derive(Parser)]
#[command(name = "xtamer", version, about = "Teach a robot face to answer human expressions from mimicry rewards")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labeled synthetic face dataset (PGM files plus manifest.tsv).
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 143)]
        per_class: usize,
        #[arg(long, default_value_t = 20)]
        identities: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Pretrain the CNN encoder on a dataset directory.
    TrainCnn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Optional dataset to report held-out accuracy on.
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Train a SOM on CNN features of a dataset and report its purity.
    TrainSom {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cnn: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Run a closed-loop session against a simulated trainer.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Simulated user profile (TOML).
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Interactions per epoch.
        #[arg(long)]
        interactions: Option<usize>,
        /// Pretrained CNN checkpoint (overrides the config).
        #[arg(long)]
        cnn: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Serve the HTTP API for interactive sessions.
    Serve {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        cnn: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
    /// Print a finished session's report and check it against the log.
    Report {
        /// Session output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        interactions: usize,
    },
}

fn load_config(path: Option<&PathBuf>, seed: Option<u64>) -> Result<SessionConfig> {
    let mut c = match path {
        Some(p) => SessionConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => SessionConfig::default(),
    };
    if let Some(s) = seed {
        c.seed = s;
    }
    Ok(c)
}

fn load_cnn(path: &PathBuf) -> Result<Arc<CnnModel>> {
    Ok(Arc::new(
        CnnModel::load(path).with_context(|| format!("loading CNN {}", path.display()))?,
    ))
}

fn print_summary(s: &SimulationSummary) {
    if let Some(c) = &s.calibration {
        println!("calibration purity {:.3} ({} samples, {} units visited)", c.purity, c.samples, c.visited_units);
    }
    let e = &s.evaluation;
    println!(
        "held-out: {}/{} emotions mapped, accuracy {:.3} ({:?} of {} per class)",
        e.mapped,
        Emotion::COUNT,
        e.accuracy,
        e.correct,
        e.per_class
    );
    match (s.convergence.epoch, s.convergence.interaction) {
        (Some(ep), Some(i)) => println!("converged in epoch {ep}; trailing window reached {} after {i} interactions", s.convergence.threshold),
        (Some(ep), None) => println!("converged in epoch {ep}"),
        _ => println!("did not converge"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, per_class, identities, noise } => {
            let seed = common.seed.unwrap_or(1);
            let m = generate_dataset(&common.out, per_class, identities, noise, seed)?;
            println!("wrote {} images to {}", m.records.len(), common.out.display());
        }
        Command::TrainCnn { common, data, heldout, epochs, lr, batch } => {
            let mut cfg: PretrainConfig = match &common.config {
                Some(p) => toml::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => PretrainConfig::default(),
            };
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.learning_rate = lr.unwrap_or(cfg.learning_rate);
            cfg.batch_size = batch.unwrap_or(cfg.batch_size);
            let (_, train) = DatasetManifest::load(&data)?;
            let start = Instant::now();
            let (model, _) = pretrain(&train, &cfg, |s| {
                println!(
                    "epoch {:>3}  loss {:.4}  accuracy {:.3}  ({:.0}s)",
                    s.epoch,
                    s.loss,
                    s.accuracy,
                    start.elapsed().as_secs_f64()
                )
            })?;
            println!("training accuracy {:.3}", model.accuracy(&train)?);
            if let Some(h) = heldout {
                let (_, held) = DatasetManifest::load(&h)?;
                println!("held-out accuracy {:.3}", model.accuracy(&held)?);
            }
            model.save(&common.out)?;
            println!("saved {}", common.out.display());
        }
        Command::TrainSom { common, cnn, data, iterations } => {
            let config = load_config(common.config.as_ref(), common.seed)?;
            let cnn = load_cnn(&cnn)?;
            let (_, set) = DatasetManifest::load(&data)?;
            let images: Vec<_> = set.iter().map(|s| s.image.clone()).collect();
            let labels: Vec<_> = set.iter().map(|s| s.label).collect();
            let features = cnn.features_batch(&images)?;
            let mut som_cfg = config.som_config();
            som_cfg.iterations = iterations.unwrap_or(som_cfg.iterations);
            let som = train_som(&features, &SomConfig { ..som_cfg })?;
            let map = som.label_map(&features, &labels)?;
            print!("{}", map.render_ascii());
            println!(
                "purity {:.3}, quantization error {:.4}, {} units visited",
                map.purity,
                som.quantization_error(&features)?,
                map.visited
            );
            som.save(&common.out)?;
            println!("saved {}", common.out.display());
        }
        Command::Simulate { common, profile, epochs, interactions, cnn, resume } => {
            let mut config = load_config(common.config.as_ref(), common.seed)?;
            if let Some(p) = profile {
                config.user = UserSource::Simulated { profile: Some(p) };
            }
            config.epochs = epochs.unwrap_or(config.epochs);
            config.interactions_per_epoch = interactions.unwrap_or(config.interactions_per_epoch);
            if let Some(c) = cnn {
                config.cnn = c;
            }
            config.validate()?;
            let profile: UserProfile = config.simulated_profile()?;
            let model = load_cnn(&config.cnn)?;
            let summary = run_simulation(&config, model, &profile, &common.out, resume, |e| {
                println!(
                    "epoch {:>3}  avg_cost {:.4}  accuracy {}",
                    e.epoch,
                    e.avg_cost,
                    e.accuracy.map_or("NA".into(), |a| format!("{a:.3}"))
                )
            })?;
            print_summary(&summary);
        }
        Command::Serve { seed, config, cnn, bind } => {
            let mut config = load_config(config.as_ref(), seed)?;
            if let Some(c) = cnn {
                config.cnn = c;
            }
            let model = load_cnn(&config.cnn)?;
            let state = AppState::new(config, model);
            let rt = tokio::runtime::Runtime::new()?;
            println!("listening on http://{bind}");
            rt.block_on(serve(state, bind)).with_context(|| format!("serving on {bind}"))?;
        }
        Command::Report { out, interactions } => {
            let text = std::fs::read_to_string(out.join(REPORT_FILE))
                .with_context(|| format!("reading {}", out.join(REPORT_FILE).display()))?;
            print!("{text}");
            let rows = parse_report(&text)?;
            let records = read_log(&out.join(LOG_FILE))?;
            let recomputed = summarize(&records, interactions)?;
            if recomputed.len() != rows.len() {
                bail!("report has {} epochs but the log holds {}", rows.len(), recomputed.len());
            }
            for (row, e) in rows.iter().zip(&recomputed) {
                if (row.1 - e.avg_cost).abs() > 1e-12 || row.2 != e.accuracy {
                    bail!("epoch {} in the report disagrees with the log", row.0);
                }
            }
            println!("log check: {} records, {} epochs consistent", records.len(), recomputed.len());
            if let Ok(s) = std::fs::read_to_string(out.join(SUMMARY_FILE)) {
                let summary: SimulationSummary = serde_json::from_str(&s)?;
                print_summary(&summary);
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
