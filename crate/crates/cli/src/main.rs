use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use autohr::backbone::RppgNet;
use autohr::dataset::{load_dataset, save_dataset, Sample};
use autohr::harness::eval::{evaluate, evaluate_with, write_signals, write_video_csv, EvalOutcome};
use autohr::harness::plot::plot_from_results;
use autohr::harness::train::{train, TrainConfig};
use autohr::harness::{ExperimentConfig, FoldPlan, RunMode};
use autohr::nas::{derive_architecture, search};
use autohr::signal::{write_metrics_csv, Band, Region};
use autohr::synth::{gen_dataset, Baseline, DatasetSpec};

#[derive(Parser)]
#[command(name = "autohr", version, about = "Remote heart-rate measurement from face video")]
struct Cli {
    /// Flat key=value experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    fold: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Split {
    /// Use every video instead of the configured fold.
    #[arg(long)]
    all_videos: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        subjects: usize,
        #[arg(long, default_value_t = 55.0)]
        hr_min: f64,
        #[arg(long, default_value_t = 130.0)]
        hr_max: f64,
        #[arg(long, default_value_t = 300)]
        frames: usize,
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
        /// Frame height and width.
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Run the differentiable architecture search on the training fold.
    Search {
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        split: Split,
    },
    /// Derive a discrete genotype from a saved supernet.
    Derive {
        #[arg(long)]
        supernet: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on the training fold.
    Train {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        split: Split,
    },
    /// Evaluate a checkpoint on the test fold.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        split: Split,
    },
    /// Evaluate the classical extractors on the test fold.
    Baseline {
        /// green, chrom, pos or all.
        #[arg(long, default_value = "all")]
        method: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        split: Split,
    },
    /// Render figures from a per-video results CSV.
    Plot {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn mode(&self) -> RunMode {
        match self {
            Command::Synth { .. } => RunMode::Synth,
            Command::Search { .. } | Command::Derive { .. } => RunMode::Search,
            Command::Train { .. } => RunMode::Train,
            Command::Eval { .. } => RunMode::Eval,
            Command::Baseline { .. } => RunMode::Baseline,
            Command::Plot { .. } => RunMode::Plot,
        }
    }
}

fn experiment(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let mut c = ExperimentConfig::default();
            c.apply_env()?;
            c
        }
    };
    cfg.mode = cli.command.mode();
    for o in &cli.overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("override `{o}` is not KEY=VALUE"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(d) = &cli.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(f) = cli.fold {
        cfg.fold = f;
    }
    Ok(cfg)
}

fn load_split(cfg: &ExperimentConfig, split: &Split) -> Result<(Vec<Sample>, Vec<usize>, Vec<usize>)> {
    let samples = load_dataset(&cfg.dataset, cfg.exec())
        .with_context(|| format!("loading dataset {}", cfg.dataset.display()))?;
    if samples.is_empty() {
        bail!("dataset {} has no videos", cfg.dataset.display());
    }
    if split.all_videos {
        let all: Vec<usize> = (0..samples.len()).collect();
        return Ok((samples, all.clone(), all));
    }
    let plan = FoldPlan::for_samples(&samples, cfg.folds, cfg.seed)?;
    let fold = &plan.folds[cfg.fold];
    let pick = |set: &[String]| -> Vec<usize> {
        (0..samples.len()).filter(|&i| set.contains(&samples[i].subject)).collect()
    };
    let (train, test) = (pick(&fold.train), pick(&fold.test));
    log::info!("fold {}/{}: {} train, {} test videos", cfg.fold, cfg.folds, train.len(), test.len());
    Ok((samples, train, test))
}

fn select(samples: &[Sample], idx: &[usize]) -> Vec<Sample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

fn write_eval(out: &Path, stem: &str, outcome: &EvalOutcome) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_video_csv(&out.join(format!("{stem}.csv")), &outcome.videos)?;
    let mpath = out.join(format!("{stem}_metrics.csv"));
    let file = fs::File::create(&mpath).with_context(|| format!("creating {}", mpath.display()))?;
    write_metrics_csv(file, &[(stem.to_string(), outcome.report.clone())])?;
    write_signals(&out.join("signals"), &outcome.signals)?;
    let m = &outcome.report;
    println!(
        "{stem}: videos={} sd={:.3} mae={:.3} rmse={:.3} r={}",
        outcome.videos.iter().filter(|v| v.pred_hr.is_some()).count(),
        m.sd,
        m.mae,
        m.rmse,
        m.pearson_r.map_or("undefined".to_string(), |r| format!("{r:.4}"))
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = experiment(&cli)?;
    cfg.validate()?;
    match &cli.command {
        Command::Synth {
            n,
            out,
            subjects,
            hr_min,
            hr_max,
            frames,
            fps,
            size,
            noise,
        } => {
            let mut spec = DatasetSpec::new(*n, (*hr_min, *hr_max), *subjects, cfg.seed);
            spec.template.frames = *frames;
            spec.template.fps = *fps;
            spec.template.height = *size;
            spec.template.width = *size;
            let m = size / 8;
            spec.template.skin_region = Region {
                top: m,
                left: m,
                height: size - 2 * m,
                width: size - 2 * m,
            };
            if let Some(s) = noise {
                spec.template.noise_sigma = *s;
            }
            let samples = gen_dataset(&spec, cfg.exec())?;
            let rows = save_dataset(out, &samples, cfg.exec())?;
            println!("wrote {} videos to {}", rows.len(), out.display());
        }
        Command::Search { out, split } => {
            let (samples, train_idx, _) = load_split(&cfg, split)?;
            let out = out.clone().unwrap_or_else(|| cfg.out.join("search"));
            let outcome = search(&select(&samples, &train_idx), &cfg.search())?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            outcome.supernet.save(&out.join("supernet"))?;
            outcome.genotype.save(&out.join("genotype.txt"))?;
            let mut log = String::from("epoch,train_loss,val_loss,entropy,arch_updated\n");
            for e in &outcome.trace {
                log.push_str(&format!(
                    "{},{},{},{},{}\n",
                    e.epoch,
                    e.train_loss,
                    e.val_loss.map_or(String::new(), |v| v.to_string()),
                    e.entropy,
                    e.arch_updated
                ));
            }
            let lpath = out.join("search_log.csv");
            fs::write(&lpath, log).with_context(|| format!("writing {}", lpath.display()))?;
            print!("{}", outcome.genotype.to_text());
        }
        Command::Derive { supernet, out } => {
            if !supernet.exists() {
                bail!("supernet directory {} does not exist", supernet.display());
            }
            let net = RppgNet::load(supernet)?;
            let arch = net
                .arch_params()
                .with_context(|| format!("{} holds a discrete network, not a supernet", supernet.display()))?;
            let g = derive_architecture(&arch)?;
            g.save(out)?;
            print!("{}", g.to_text());
        }
        Command::Train {
            out,
            epochs,
            resume,
            split,
        } => {
            let (samples, train_idx, _) = load_split(&cfg, split)?;
            let out = out.clone().unwrap_or_else(|| cfg.out.clone());
            let mut tcfg = TrainConfig::from_experiment(&cfg)?;
            if let Some(e) = epochs {
                tcfg.epochs = *e;
            }
            if let Some(r) = resume {
                if !r.exists() {
                    bail!("checkpoint {} does not exist", r.display());
                }
            }
            let refs: Vec<&Sample> = train_idx.iter().map(|&i| &samples[i]).collect();
            let outcome = train(&refs, &tcfg, Some(&out), resume.as_deref())?;
            let final_dir = out.join("final");
            outcome.net.save(&final_dir)?;
            if let Some(last) = outcome.log.last() {
                println!(
                    "epoch {}: L_time={:.4} L_fre={:.4} L_overall={:.4}; checkpoint {}",
                    last.epoch,
                    last.time,
                    last.freq,
                    last.overall,
                    final_dir.display()
                );
            }
        }
        Command::Eval { checkpoint, out, split } => {
            if !checkpoint.join("config.txt").exists() {
                bail!("checkpoint {} not found (no config.txt)", checkpoint.display());
            }
            let mut net = RppgNet::load(checkpoint)?.with_exec(cfg.exec());
            let (samples, _, test_idx) = load_split(&cfg, split)?;
            let refs: Vec<&Sample> = test_idx.iter().map(|&i| &samples[i]).collect();
            let outcome = evaluate(&mut net, &refs, cfg.eval_clip_secs)?;
            write_eval(&out.clone().unwrap_or_else(|| cfg.out.join("eval")), "results", &outcome)?;
        }
        Command::Baseline { method, out, split } => {
            let methods = if method == "all" {
                Baseline::ALL.to_vec()
            } else {
                vec![Baseline::from_name(method).with_context(|| format!("unknown baseline `{method}`"))?]
            };
            let (samples, _, test_idx) = load_split(&cfg, split)?;
            let refs: Vec<&Sample> = test_idx.iter().map(|&i| &samples[i]).collect();
            let out = out.clone().unwrap_or_else(|| cfg.out.join("baseline"));
            for b in methods {
                let outcome = evaluate_with(&refs, cfg.eval_clip_secs, 1, Band::default(), |clips| {
                    clips
                        .iter()
                        .map(|c| b.extract(c, Region::full(c.height(), c.width())))
                        .collect()
                })?;
                let stem = b.name().to_lowercase();
                write_eval(&out.join(&stem), &stem, &outcome)?;
            }
        }
        Command::Plot { from, out } => {
            if !from.exists() {
                bail!("results file {} does not exist", from.display());
            }
            let out = out
                .clone()
                .unwrap_or_else(|| from.parent().unwrap_or(Path::new(".")).join("plots"));
            for p in plot_from_results(from, &out)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
