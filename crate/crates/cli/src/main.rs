use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use gtsp_core::checkpoint::Checkpoint;
use gtsp_core::config;
use gtsp_core::graph::{self, Motif, SynthSpec};
use gtsp_core::harness::{checkpoint_dataset, cmd_analyze, cmd_report, cmd_train, AnalyzeKind};
use gtsp_core::train::Dataset;

#[derive(Parser)]
#[command(name = "gtsp", version, about = "Train and prune graph transformers, then compare and analyze the runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Extra key=value overrides applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Compare a dense and a pruned checkpoint on the same dataset.
    Report {
        #[arg(long)]
        dense: PathBuf,
        #[arg(long)]
        pruned: PathBuf,
        /// Also write report.csv and report.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Record activations on the test split and run one analysis.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        which: AnalyzeKind,
        /// Dataset file to use instead of the one named in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory (default: `analysis/` next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic motif dataset as JSONL.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 8)]
        n_min: usize,
        #[arg(long, default_value_t = 20)]
        n_max: usize,
        #[arg(long, default_value_t = 8)]
        feature_dim: usize,
        #[arg(long, default_value_t = 3)]
        walk_channels: usize,
        #[arg(long, default_value = "triangle")]
        motif: Motif,
        #[arg(long, default_value_t = 0.15)]
        edge_prob: f64,
        #[arg(long, default_value_t = 0.5)]
        positive_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Convert a TU-format dataset directory to JSONL.
    ConvertTu {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { config: path, set } => {
            let mut text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            for kv in &set {
                text.push('\n');
                text.push_str(kv);
            }
            let cfg = config::parse_str(&text).with_context(|| format!("config {}", path.display()))?;
            let run = cmd_train(&cfg)?;
            let last = run.report.final_record();
            println!(
                "{}: {} test {:.4}, params {} -> {}, FLOPs saving {:.2}%",
                run.dir.display(),
                run.report.metric,
                last.test_metric,
                run.report.params_dense,
                run.report.params_final,
                run.report.flops_saving * 100.0
            );
        }
        Command::Report { dense, pruned, out } => {
            let d = Checkpoint::load(&dense).with_context(|| format!("loading {}", dense.display()))?;
            let p = Checkpoint::load(&pruned).with_context(|| format!("loading {}", pruned.display()))?;
            let table = cmd_report(&d, &p)?;
            print!("{}", table.to_text());
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("report.csv"), table.to_csv())?;
                fs::write(dir.join("report.txt"), table.to_text())?;
            }
        }
        Command::Analyze { ckpt, which, data, out } => {
            let c = Checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let dataset = match data {
                Some(p) => {
                    let graphs = graph::load_jsonl(&p, Some(c.params.config.num_classes))?;
                    Dataset::new(graphs, c.header.split.clone())?
                }
                None => checkpoint_dataset(&c)?,
            };
            let out = out.unwrap_or_else(|| ckpt.parent().unwrap_or(&PathBuf::from(".")).join("analysis"));
            for p in cmd_analyze(&c, &dataset, which, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Synth {
            out,
            count,
            n_min,
            n_max,
            feature_dim,
            walk_channels,
            motif,
            edge_prob,
            positive_fraction,
            seed,
        } => {
            let spec = SynthSpec {
                count,
                n_min,
                n_max,
                feature_dim,
                motif,
                positive_fraction,
                edge_prob,
                walk_channels,
                seed,
            };
            let graphs = graph::synth_motif_dataset(&spec)?;
            graph::write_jsonl(&graphs, &out)?;
            println!("{} graphs, hash {}", graphs.len(), graph::dataset_hash(&graphs));
        }
        Command::ConvertTu { input, out } => {
            let graphs = graph::convert_tu(&input)?;
            if graphs.is_empty() {
                bail!("no graphs found in {}", input.display());
            }
            graph::write_jsonl(&graphs, &out)?;
            println!("{} graphs, {} classes", graphs.len(), graph::num_classes(&graphs));
        }
    }
    Ok(())
}
