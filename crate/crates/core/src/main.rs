use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use svla::config::RunConfig;
use svla::dump::dump_attention;
use svla::efficiency::{baseline_of, bench, BENCH_HEADER};
use svla::scene::{generate_episode, generate_episodes, read_dataset, target_histogram, write_dataset};
use svla::train::{
    ablation_csv, ablation_row, eval_episodes, evaluate, load_checkpoint, load_checkpoint_for, train, METRICS_HEADER,
};
use svla::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "svla",
    version,
    about = "Sparse visual tokens for parallel action-chunk decoding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Shared {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "K=V")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded episode dataset.
    GenData {
        #[command(flatten)]
        shared: Shared,
        /// Defaults to `data_count`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train from a dataset; writes checkpoint.svt and metrics.csv under --out.
    Train {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a checkpoint on a dataset (or the seeded held-out set).
    Eval {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Time the configured pipeline against its dense conventional baseline.
    Bench {
        #[command(flatten)]
        shared: Shared,
    },
    /// Train one model per sparsification ratio.
    Ablate {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8, 16, 32])]
        ratios: Vec<usize>,
    },
    /// Write cue, anchor and aggregation maps for one episode.
    DumpAttn {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        episode_seed: u64,
        /// Falls back to --out.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

impl Shared {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            cfg.apply_override(kv)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn has_overrides(&self) -> bool {
        self.config.is_some() || !self.set.is_empty() || self.seed.is_some()
    }

    fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { shared, count } => {
            let cfg = shared.config()?;
            let spec = cfg.scene();
            let eps = generate_episodes(cfg.seed, count.unwrap_or(cfg.data_count), &spec)?;
            let out = shared.out_or("data.svt");
            write_dataset(&out, &eps)?;
            println!("type,episodes");
            for (t, n) in target_histogram(&eps, &spec).iter().enumerate().skip(1) {
                println!("{t},{n}");
            }
            eprintln!("wrote {} episodes to {}", eps.len(), out.display());
        }
        Command::Train { shared, data } => {
            let cfg = shared.config()?;
            let train_set = read_dataset(&data)?;
            let eval_set = eval_episodes(&cfg)?;
            let out = shared.out_or("run");
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            println!("{METRICS_HEADER}");
            train(&cfg, &train_set, &eval_set, Some(&out), &mut |row| {
                println!("{}", row.csv())
            })?;
            eprintln!("wrote {}", out.display());
        }
        Command::Eval {
            shared,
            checkpoint,
            data,
        } => {
            let model = if shared.has_overrides() {
                load_checkpoint_for(&checkpoint, &shared.config()?)?
            } else {
                load_checkpoint(&checkpoint)?
            };
            let eps = match data {
                Some(p) => read_dataset(&p)?,
                None => eval_episodes(&model.cfg)?,
            };
            let m = evaluate(&model, &eps)?;
            let csv = format!(
                "episodes,eval_mse,recall,success\n{},{:e},{},{}\n",
                m.count, m.mse, m.recall, m.success
            );
            print!("{csv}");
            if let Some(out) = &shared.out {
                write_text(out, &csv)?;
            }
        }
        Command::Bench { shared } => {
            let cfg = shared.config()?;
            let mut csv = format!("{BENCH_HEADER}\n");
            for (label, c) in [("baseline", baseline_of(&cfg)), ("sparse", cfg)] {
                for row in bench(&c, label)? {
                    csv.push_str(&row.csv());
                    csv.push('\n');
                }
            }
            print!("{csv}");
            if let Some(out) = &shared.out {
                write_text(out, &csv)?;
            }
        }
        Command::Ablate { shared, ratios } => {
            let cfg = shared.config()?;
            let train_set = generate_episodes(cfg.seed, cfg.data_count, &cfg.scene())?;
            let eval_set = eval_episodes(&cfg)?;
            let rows: Vec<_> = ratios
                .iter()
                .map(|&r| {
                    let row = ablation_row(&cfg, r, &train_set, &eval_set);
                    if let Err(e) = &row {
                        eprintln!("ratio {r}: {e}");
                    }
                    (r, row)
                })
                .collect();
            let csv = ablation_csv(&rows);
            print!("{csv}");
            write_text(&shared.out_or("ablation.csv"), &csv)?;
        }
        Command::DumpAttn {
            shared,
            checkpoint,
            episode_seed,
            out_dir,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let ep = generate_episode(episode_seed, &model.cfg.scene())?;
            let dir = out_dir.or(shared.out).unwrap_or_else(|| PathBuf::from("attn"));
            for f in dump_attention(&model, &ep, &dir)? {
                println!("{}", f.display());
            }
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
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            // a rejected config is a usage error
            ExitCode::from(if matches!(e, Error::Config(_)) { 1 } else { 2 })
        }
    }
}
