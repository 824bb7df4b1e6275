use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use evdet::bridge::BridgeVariant;
use evdet::checkpoint::Checkpoint;
use evdet::config::{load_config, RunConfig};
use evdet::event_io::{read_events, EventFormat, EventStream};
use evdet::pipeline::{self, QuantizeOutput};
use evdet::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "evdet",
    version,
    about = "Hybrid spiking/dense event-camera detector"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides training.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides io.out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sequential reductions only. Every reduction in this build is already
    /// sequential, so the flag only documents intent.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Evs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a synthetic moving-shape stream and its labels.
    Gen {
        #[arg(long, value_enum, default_value = "evs")]
        format: Format,
    },
    /// Detections for every window of an event file, plus a profile.
    Infer {
        events: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Trains the toy detector on synthetic streams.
    Train,
    /// Quantizes the spiking front-end and reports spike fidelity.
    Quantize {
        /// Overrides quantization.bits.
        #[arg(long)]
        bits: Option<u32>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// MAC/AC counts and the energy estimate over an event file.
    Profile {
        events: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Trains and evaluates bridge variants.
    Ablate {
        /// Comma-separated subset of full, no-ta, no-deform, no-ers, no-asab.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Number of seeds, starting at the run seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Fidelity at every supported bit width.
    Fidelity {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.training.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.io.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint(cfg: &RunConfig, flag: &Option<PathBuf>) -> Result<Option<Checkpoint>> {
    let path = flag.clone().unwrap_or_else(|| cfg.io.checkpoint_path());
    match Checkpoint::load(&path) {
        Ok(c) => Ok(Some(c)),
        Err(Error::Io(e)) if flag.is_none() && e.kind() == std::io::ErrorKind::NotFound => {
            eprintln!(
                "warning: no checkpoint at {}, using seeded random weights",
                path.display()
            );
            Ok(None)
        }
        Err(Error::Io(e)) => Err(Error::Checkpoint(format!("{}: {e}", path.display()))),
        Err(e) => Err(e),
    }
}

fn events(cfg: &RunConfig, path: &Path) -> Result<EventStream> {
    let format = EventFormat::from_path(path).ok_or_else(|| {
        Error::Config(format!("{}: expected a .csv or .evs file", path.display()))
    })?;
    let loaded = read_events(
        path,
        format,
        Some((cfg.simulation.width as u32, cfg.simulation.height as u32)),
    )?;
    if loaded.resorted {
        eprintln!(
            "warning: {} was not time-ordered and has been sorted",
            path.display()
        );
    }
    Ok(loaded.stream)
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(&path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn quant_summary(q: &QuantizeOutput) -> String {
    format!(
        "int{}: match_rate={:.6} first_divergence={} overflows={}",
        q.model.bits,
        q.report.match_rate(),
        q.report
            .first_divergence
            .map_or("none".into(), |t| t.to_string()),
        q.overflows
    )
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli)?;
    let out = cfg.io.out_dir.clone();
    match &cli.command {
        Command::Gen { format } => {
            let g = pipeline::run_gen(&cfg)?;
            if let Some(w) = &g.warning {
                eprintln!("warning: {w}");
            }
            let f = match format {
                Format::Csv => EventFormat::Csv,
                Format::Evs => EventFormat::Evs,
            };
            pipeline::write_generated(&g, &out, f)?;
            println!(
                "{} events, {} labelled windows -> {}",
                g.stream.len(),
                g.labels.len(),
                out.display()
            );
        }
        Command::Infer {
            events: path,
            checkpoint: ck,
        } => {
            let model = pipeline::model_for(&cfg, checkpoint(&cfg, ck)?.as_ref())?;
            let r = pipeline::run_infer(&cfg, &model, &events(&cfg, path)?)?;
            write(
                out.join("detections.csv"),
                &pipeline::detections_csv(&r.windows),
            )?;
            write(out.join("profile.txt"), &r.report.to_text())?;
            let n: usize = r.windows.iter().map(|w| w.detections.len()).sum();
            println!(
                "{} windows, {n} detections, {:.4} mJ",
                r.windows.len(),
                r.report.joules() * 1e3
            );
        }
        Command::Train => {
            let mut curve = String::from("step,loss,lr\n");
            let run = pipeline::run_train_toy(&cfg, |step, loss, lr| {
                let _ = writeln!(curve, "{step},{loss:.9},{lr:.6e}");
                if step % 100 == 0 {
                    eprintln!("step {step}: loss {loss:.6} lr {lr:.3e}");
                }
            })?;
            let path = cfg.io.checkpoint_path();
            run.checkpoint.save(&path)?;
            println!("wrote {}", path.display());
            write(out.join("loss.csv"), &curve)?;
            let e = &run.eval;
            let first = run.losses.first().copied().unwrap_or(f64::NAN);
            let last = run.losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "loss {first:.6} -> {last:.6}; held-out hits {}/{} ({:.1}%), mean center error {:.3} cells, AP50 {:.3}",
                e.hits,
                e.windows,
                100.0 * e.hit_rate(),
                e.mean_center_error,
                e.ap50
            );
        }
        Command::Quantize {
            bits,
            checkpoint: ck,
        } => {
            let model = pipeline::model_for(&cfg, checkpoint(&cfg, ck)?.as_ref())?;
            let q = pipeline::run_quantize(&cfg, &model, bits.unwrap_or(cfg.quantization.bits))?;
            let dir = out.join(format!("quant-int{}", q.model.bits));
            pipeline::write_quantize_output(&q, &dir)?;
            println!("{}", quant_summary(&q));
            println!("wrote {}", dir.display());
        }
        Command::Profile {
            events: path,
            checkpoint: ck,
        } => {
            let model = pipeline::model_for(&cfg, checkpoint(&cfg, ck)?.as_ref())?;
            let r = pipeline::run_profile(&cfg, &model, &events(&cfg, path)?)?;
            print!("{}", r.to_text());
            write(out.join("profile.csv"), &r.to_csv())?;
        }
        Command::Ablate { variants, seeds } => {
            let vs: Vec<BridgeVariant> = if variants.is_empty() {
                BridgeVariant::ALL.to_vec()
            } else {
                variants.iter().map(|v| v.parse()).collect::<Result<_>>()?
            };
            let seeds: Vec<u64> = (0..*seeds).map(|i| cfg.training.seed + i).collect();
            let rows = pipeline::run_ablate(&cfg, &vs, &seeds)?;
            let text = pipeline::ablation_text(&rows);
            print!("{text}");
            write(out.join("ablation.csv"), &text)?;
        }
        Command::Fidelity { checkpoint: ck } => {
            let model = pipeline::model_for(&cfg, checkpoint(&cfg, ck)?.as_ref())?;
            let mut text = String::new();
            for q in pipeline::run_fidelity(&cfg, &model)? {
                println!("{}", quant_summary(&q));
                text.push_str(&pipeline::fidelity_text(
                    q.model.bits,
                    &q.report,
                    q.overflows,
                ));
                text.push('\n');
            }
            write(out.join("fidelity.txt"), &text)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
