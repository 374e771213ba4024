use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use ftz::checkpoint;
use ftz::checks;
use ftz::data::{self, Split};
use ftz::eval;
use ftz::experiment::{self, ExperimentConfig};
use ftz::fusion;
use ftz::training::{self, Model};

#[derive(Parser)]
#[command(name = "ftz", version, about = "Composed vision encoders fused by cross-attention, at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic VQA split as JSONL.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stage: u8,
        #[arg(long)]
        out: PathBuf,
        /// Stage 2: checkpoint to continue from (normally stage 1's).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Stage 1: reuse a saved pretrained base instead of building it.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Greedy-decode a dataset and write per-task accuracy CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed recorded in the report.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the fusion points as CSV.
    MapLayers {
        #[arg(long)]
        anchor_depth: usize,
        #[arg(long)]
        augment_depth: usize,
        #[arg(long)]
        k: usize,
    },
    /// Print a checkpoint's manifest.
    InspectCkpt {
        #[arg(long)]
        path: PathBuf,
    },
    /// Train and evaluate all tower modes for each seed.
    CompareTowers {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const BASE_FILE: &str = "pretrained.ftz";

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenData { seed, n, split, out } => {
            let samples = data::generate_dataset(seed, n, split)?;
            data::save_jsonl(&samples, &out)?;
            eprintln!("wrote {} {} samples to {}", samples.len(), split.label(), out.display());
        }
        Command::Train {
            config,
            stage,
            out,
            init,
            base,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let stage_cfg = cfg.stage(stage)?;
            let train = cfg.train_data()?;
            let mut model = match (stage, init) {
                (1, Some(_)) => bail!("--init applies to stage 2 only"),
                (1, None) => {
                    let base = match base {
                        Some(p) => checkpoint::load_checkpoint(&p)?,
                        None => {
                            let b = experiment::pretrained_base(&cfg, &train)?;
                            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
                            checkpoint::save_checkpoint(&b, out.join(BASE_FILE))?;
                            b
                        }
                    };
                    experiment::fresh_model(&cfg, &base, cfg.model.tower.mode, cfg.seed)?
                }
                (_, Some(p)) => {
                    let m = Model::load(&p)?;
                    if m.cfg != cfg.model {
                        bail!("model config of {} differs from {}", p.display(), config.display());
                    }
                    m
                }
                (_, None) => bail!("stage 2 needs --init <stage-1 checkpoint>"),
            };
            let log = training::run_stage(&mut model, stage_cfg, cfg.seed, &train, Some(&out))?;
            let last = log.rows.last().map_or(f64::NAN, |r| r.loss);
            eprintln!("stage {stage}: {} steps, final loss {last:.4}, wrote {}", log.rows.len(), out.display());
        }
        Command::Eval { ckpt, data, out, seed } => {
            let model = Model::load(&ckpt)?;
            let samples = data::load_jsonl(&data)?;
            let report = eval::evaluate(&model, &samples, seed)?;
            experiment::write_file(&out, &report.to_csv())?;
            print!("{}", report.to_csv());
        }
        Command::Gradcheck { instances, seed } => {
            let results = checks::gradcheck_suite(instances, seed)?;
            println!("op,instances,max_rel_error,passed");
            for r in &results {
                println!("{},{},{:.3e},{}", r.name, r.instances, r.max_rel_error, r.passed());
            }
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
            if !failed.is_empty() {
                bail!("gradient check failed for {}", failed.join(", "));
            }
        }
        Command::MapLayers {
            anchor_depth,
            augment_depth,
            k,
        } => {
            let points = fusion::map_layers(anchor_depth, augment_depth, k)?;
            println!("i,j");
            for p in points {
                println!("{p}");
            }
        }
        Command::InspectCkpt { path } => {
            let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            let entries = checkpoint::manifest(&bytes)?;
            println!("name,dtype,frozen,shape");
            for e in entries {
                let shape: Vec<String> = e.shape.iter().map(usize::to_string).collect();
                println!("{},{},{},{}", e.name, e.dtype, e.frozen, shape.join("x"));
            }
        }
        Command::CompareTowers { config, seeds, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let cmp = experiment::compare_towers(&cfg, &seeds, out.as_deref())?;
            print!("{}", cmp.table_csv());
            eprint!("{}", cmp.means_csv());
        }
    }
    Ok(())
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let head: Vec<&str> = msg.lines().take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .collect();
            eprintln!("error: {}", one_line(head.join(" ").trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    msg = if msg.is_empty() { cause } else { format!("{msg}: {cause}") };
                }
            }
            eprintln!("error: {}", one_line(&msg));
            ExitCode::FAILURE
        }
    }
}
