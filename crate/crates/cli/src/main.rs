//! `pclab` — train and probe predictive-coding networks.
//!
//! Exit codes: 0 success, 2 configuration error, 3 divergence during
//! relaxation.

use clap::{Args, Parser, Subcommand};
use pclab_cli::config::{Algo, BnMode, DatasetKind, ExperimentConfig};
use pclab_cli::error::{CliError, Result};
use pclab_cli::export::{export_energy_trace, export_metrics_csv};
use pclab_cli::gradcheck::run_gradcheck;
use pclab_cli::runner::{evaluate, load_dataset, run_experiment};
use pclab_core::checkpoint;
use pclab_core::dataio::Split;
use pclab_core::tensor::Rng;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "pclab", version, about = "Predictive-coding network training laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Experiment config file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training algorithm: bp, pc, pc-d, pc-s, pc-f, pc-df, pc-sf.
    #[arg(long)]
    algo: Option<String>,
    /// Batch-norm handling: standard, freeze, off.
    #[arg(long)]
    bn: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for metrics, traces, and the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset: mnist, cifar10.
    #[arg(long)]
    dataset: Option<String>,
    /// Use only the first N training examples (class-balanced).
    #[arg(long)]
    subset: Option<usize>,
    /// Architecture preset, e.g. mlp-8, vgg5-narrow.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Directory with the dataset files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(a) = &self.algo {
            cfg.algo = Algo::parse(a)?;
        }
        if let Some(b) = &self.bn {
            cfg.bn = BnMode::parse(b)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.display().to_string();
        }
        if let Some(d) = &self.dataset {
            cfg.dataset = DatasetKind::parse(d)?;
        }
        if let Some(n) = self.subset {
            cfg.subset = n;
        }
        if let Some(a) = &self.arch {
            cfg.arch = a.clone();
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(p) = &self.data_dir {
            cfg.data_dir = p.display().to_string();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and export metrics, the probe-batch energy
    /// trace, and a checkpoint.
    Train(Overrides),
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to evaluate: train or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Check activity, standard, and forward-update gradients of small
    /// random nets against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Depth sweep: train every (depth, algo, seed) combination of the
    /// mlp family and summarize accuracies.
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
        /// Comma-separated mlp depths.
        #[arg(long, default_value = "4,8,12")]
        depths: String,
        /// Comma-separated algorithms.
        #[arg(long, default_value = "bp,pc,pc-sf")]
        algos: String,
        /// Seeds 0..N.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Parallel runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn out_dir_for(cfg: &ExperimentConfig) -> PathBuf {
    if cfg.out_dir.is_empty() {
        PathBuf::from(format!("runs/{}-{}-s{}", cfg.algo.name(), cfg.arch, cfg.seed))
    } else {
        PathBuf::from(&cfg.out_dir)
    }
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let out_dir = out_dir_for(cfg);
    std::fs::create_dir_all(&out_dir)?;
    println!(
        "training {} on {:?} ({}), seed {} -> {}",
        cfg.arch,
        cfg.dataset,
        cfg.algo.name(),
        cfg.seed,
        out_dir.display()
    );
    let out = run_experiment(cfg)?;
    for r in &out.records {
        println!(
            "epoch {:>3}: train {:.4} test {:.4} ({:.1}s)",
            r.epoch, r.train_top1, r.test_top1, r.seconds
        );
    }
    export_metrics_csv(&out.records, &out_dir.join("metrics.csv"))?;
    export_energy_trace(&out.probe_traces, &out_dir.join("trace.json"))?;
    checkpoint::save_network(&out_dir.join("model.pckp"), &out.network)
        .map_err(CliError::Core)?;
    let resolved = toml::to_string(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(out_dir.join("config.toml"), resolved)?;
    println!(
        "done: best test top-1 {:.4}, final {:.4}",
        out.best_top1, out.final_top1
    );
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, ckpt: &PathBuf, split: &str) -> Result<()> {
    let split = match split {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(CliError::Config(format!("unknown split {other:?}"))),
    };
    let ds = load_dataset(cfg, split)?;
    let mut root = Rng::new(cfg.seed);
    let mut init_rng = root.derive();
    let mut net = pclab_cli::runner::build_for(cfg, &ds.sample_shape(), ds.num_classes, &mut init_rng)?;
    checkpoint::load_network(ckpt, &mut net).map_err(CliError::Core)?;
    let (top1, top5) = evaluate(&mut net, &ds, 256)?;
    println!("top1 {top1:.4} top5 {top5:.4} ({} examples)", ds.len());
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let report = run_gradcheck(seed)?;
    println!(
        "gradcheck over {} nets (tolerance {:.0e}, {} kink coords skipped):",
        report.nets, report.tolerance, report.skipped_kink_coords
    );
    println!("  activity  max rel err {:.3e}", report.activity_max);
    println!("  standard  max rel err {:.3e}", report.standard_max);
    println!("  forward   max rel err {:.3e}", report.forward_max);
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL at {}", report.worst_site);
        std::process::exit(1);
    }
}

fn cmd_sweep(base: &ExperimentConfig, depths: &str, algos: &str, seeds: u64, jobs: usize) -> Result<()> {
    let depths: Vec<usize> = depths
        .split(',')
        .map(|d| {
            d.trim()
                .parse()
                .map_err(|_| CliError::Config(format!("bad depth {d:?}")))
        })
        .collect::<Result<_>>()?;
    let algos: Vec<Algo> = algos
        .split(',')
        .map(|a| Algo::parse(a.trim()))
        .collect::<Result<_>>()?;

    let mut configs = Vec::new();
    for &depth in &depths {
        for &algo in &algos {
            for seed in 0..seeds {
                let mut cfg = base.clone();
                cfg.arch = format!("mlp-{depth}");
                cfg.algo = algo;
                cfg.seed = seed;
                cfg.out_dir = String::new();
                cfg.validate()?;
                configs.push(cfg);
            }
        }
    }

    let root = out_dir_for(base).join("sweep");
    std::fs::create_dir_all(&root)?;
    let jobs = jobs.max(1);
    let mut rows: Vec<(String, String, u64, f64, f64)> = Vec::new();
    for chunk in configs.chunks(jobs) {
        let outputs: Vec<Result<_>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|cfg| scope.spawn(move || run_experiment(cfg)))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for (cfg, out) in chunk.iter().zip(outputs) {
            let out = out?;
            let dir = root.join(format!("{}-{}-s{}", cfg.algo.name(), cfg.arch, cfg.seed));
            std::fs::create_dir_all(&dir)?;
            export_metrics_csv(&out.records, &dir.join("metrics.csv"))?;
            export_energy_trace(&out.probe_traces, &dir.join("trace.json"))?;
            println!(
                "{:6} {:7} seed {}: best {:.4} final {:.4}",
                cfg.algo.name(),
                cfg.arch,
                cfg.seed,
                out.best_top1,
                out.final_top1
            );
            rows.push((
                cfg.arch.clone(),
                cfg.algo.name().to_string(),
                cfg.seed,
                out.best_top1,
                out.final_top1,
            ));
        }
    }
    let mut summary = String::from("arch,algo,seed,best_top1,final_top1\n");
    for (arch, algo, seed, best, fin) in &rows {
        summary.push_str(&format!("{arch},{algo},{seed},{best},{fin}\n"));
    }
    std::fs::write(root.join("summary.csv"), summary)?;
    println!("summary written to {}", root.join("summary.csv").display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(overrides) => cmd_train(&overrides.apply()?),
        Command::Eval {
            overrides,
            checkpoint,
            split,
        } => cmd_eval(&overrides.apply()?, &checkpoint, &split),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Sweep {
            overrides,
            depths,
            algos,
            seeds,
            jobs,
        } => cmd_sweep(&overrides.apply()?, &depths, &algos, seeds, jobs),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
