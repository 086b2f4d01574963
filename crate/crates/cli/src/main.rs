//! `vistext` command line: synthetic data, the three training phases,
//! evaluation and exports.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use vistext::checkpoint::Checkpoint;
use vistext::config::{parse_pairs, RunConfig};
use vistext::data::{generate_corpus, write_dataset, Dataset, Split};
use vistext::eval::{class_similarity_map, embedding_rows, evaluate};
use vistext::metrics::{write_embeddings, RetrievalSpec};
use vistext::trainer::{Ablation, Trainer};

#[derive(Parser)]
#[command(name = "vistext", version, about = "Joint visual-textual representation learning on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus into a dataset directory.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Phase 1: matching pretraining of both encoders.
    TrainVta(Train),
    /// Phase 2: generator cascade and discriminators against frozen encoders.
    TrainTim(Train),
    /// Phase 2: captioner against frozen region features.
    TrainItm(Train),
    /// Phase 3: joint training, optionally ablated.
    TrainJoint {
        #[command(flatten)]
        train: Train,
        /// full, vta-frozen, vta-trainable, img2txt-only or txt2img-only.
        #[arg(long, default_value = "full")]
        ablation: String,
    },
    /// Retrieval, attribute and (with --bleu) captioning report.
    Eval {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        pool: Option<usize>,
        /// Also decode captions and report BLEU-1..4.
        #[arg(long)]
        bleu: bool,
        /// Write the report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Image and class-label embeddings for external projection.
    ExportEmbeddings {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        out: PathBuf,
    },
    /// Class-by-class similarity between label texts and image embeddings, as CSV.
    Simmap {
        #[command(flatten)]
        input: Input,
        /// Images per class.
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Profile whose defaults the other keys override: desk or paper.
    /// Takes precedence over a profile named in the file.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct Input {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to evaluate: train or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Accept a checkpoint written under a different configuration.
    #[arg(long)]
    allow_config_change: bool,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to continue from; required after phase 1.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Checkpoint to write; the loss trace goes next to it as `<out>.losses.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    allow_config_change: bool,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            pairs.extend(parse_pairs(&text)?);
        }
        if let Some(seed) = self.seed {
            pairs.push(("seed".into(), seed.to_string()));
        }
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .with_context(|| format!("override {o:?} is not key=value"))?;
            pairs.push((k.trim().into(), v.trim().into()));
        }
        // The last profile named wins, so the flag overrides the file.
        if let Some(p) = &self.profile {
            pairs.push(("profile".into(), p.clone()));
        }
        Ok(RunConfig::from_pairs(&pairs)?)
    }
}

fn load_checkpoint(path: &Path, cfg: &RunConfig, allow_change: bool) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.meta.config_hash != cfg.hash() && !allow_change {
        bail!(
            "{} was written under configuration {} but the current one hashes to {}; \
             rerun with the same configuration or pass --allow-config-change",
            path.display(),
            ck.meta.config_hash,
            cfg.hash()
        );
    }
    Ok(ck)
}

fn split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => bail!("unknown split {other:?}; expected train or test"),
    }
}

fn losses_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".losses.csv");
    PathBuf::from(s)
}

fn train(args: &Train, run: impl FnOnce(&mut Trainer) -> vistext::Result<()>, phase: u8) -> Result<()> {
    let cfg = args.common.config()?;
    let data = Dataset::load(&args.data)?;
    let mut t = match &args.from {
        Some(path) => {
            let ck = load_checkpoint(path, &cfg, args.allow_config_change)?;
            let (t, report) = Trainer::restore(cfg.clone(), &data, &ck)?;
            log::info!(
                "restored {} parameters, {} initialised fresh",
                report.restored.len(),
                report.fresh.len()
            );
            t
        }
        None => Trainer::new(cfg.clone(), &data)?,
    };
    run(&mut t)?;
    t.checkpoint(phase).save(&args.out)?;
    vistext::io::atomic_write(&losses_path(&args.out), t.log.to_csv().as_bytes())?;
    println!("wrote {} (config {})", args.out.display(), cfg.hash());
    Ok(())
}

fn with_model<T>(input: &Input, f: impl FnOnce(&RunConfig, &Dataset, &Trainer, &[usize]) -> Result<T>) -> Result<T> {
    let cfg = input.common.config()?;
    let data = Dataset::load(&input.data)?;
    let ck = load_checkpoint(&input.checkpoint, &cfg, input.allow_config_change)?;
    let (t, _) = Trainer::restore(cfg.clone(), &data, &ck)?;
    let items = data.split(split(&input.split)?);
    f(&cfg, &data, &t, &items)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = common.config()?;
            let corpus = generate_corpus(&cfg.corpus_spec())?;
            write_dataset(&out, &corpus)?;
            println!("wrote {} records to {}", corpus.records.len(), out.display());
        }
        Command::TrainVta(a) => train(&a, |t| t.run_phase1(), 1)?,
        Command::TrainItm(a) => train(&a, |t| t.run_captioner(), 2)?,
        Command::TrainTim(a) => train(&a, |t| t.run_gan(), 2)?,
        Command::TrainJoint { train: a, ablation } => {
            let ab = Ablation::parse(&ablation)?;
            train(&a, |t| t.run_phase3(ab), 3)?
        }
        Command::Eval {
            input,
            top_k,
            pool,
            bleu,
            out,
        } => {
            let text = with_model(&input, |cfg, data, t, items| {
                let spec = RetrievalSpec {
                    pool: pool.unwrap_or(cfg.eval_pool),
                    top_k: top_k.unwrap_or(cfg.eval_top_k),
                    seed: cfg.eval_seed,
                };
                Ok(evaluate(&t.model, data, items, spec, cfg.gammas, bleu)?.to_text())
            })?;
            print!("{text}");
            if let Some(path) = out {
                vistext::io::atomic_write(&path, text.as_bytes())?;
            }
        }
        Command::ExportEmbeddings { input, out } => {
            let n = with_model(&input, |cfg, data, t, items| {
                let rows = embedding_rows(&t.model, data, items)?;
                write_embeddings(&out, cfg.d, &rows)?;
                Ok(rows.len())
            })?;
            println!("wrote {n} rows to {}", out.display());
        }
        Command::Simmap { input, per_class, out } => {
            let csv = with_model(&input, |_, data, t, items| {
                let map = class_similarity_map(&t.model, data, items, per_class)?;
                let mut s = format!("class,{}\n", data.classes.join(","));
                for (i, c) in data.classes.iter().enumerate() {
                    let row: Vec<String> = map.row(i).iter().map(|x| x.to_string()).collect();
                    s.push_str(&format!("{c},{}\n", row.join(",")));
                }
                Ok(s)
            })?;
            match out {
                Some(path) => vistext::io::atomic_write(&path, csv.as_bytes())?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
