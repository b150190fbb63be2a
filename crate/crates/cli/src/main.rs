use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ouroboros::checkpoint;
use ouroboros::config::RunConfig;
use ouroboros::data::{heldout_passages, Batch};
use ouroboros::pipeline::{self, Evaluator};
use ouroboros::recurrence::{qwen25_3b_census, Census, OuroborosModel, Variant};
use ouroboros::surgery::{manifest, ConvertedModel};
use ouroboros::training::{grad_check, perturb_trainables, LogRow, GRAD_CHECK_STEP};
use ouroboros::{Element, Error};

#[derive(Parser)]
#[command(name = "ouroboros", version, about = "Recursive transformer toolkit: pretrain, convert, train, evaluate, sweep")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "OUROBOROS_OUT", default_value = "runs")]
    out: PathBuf,
    /// Compute in f64 instead of f32.
    #[arg(long = "f64")]
    double: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a dense base model from scratch.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Split a base checkpoint and build the frozen low-rank bases.
    Surgery {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        rank: Option<usize>,
    },
    /// Train the modulation, gate and step norms of a converted model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        converted: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Per-passage held-out loss against the unmodulated baseline and optionally the base model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        base: Option<PathBuf>,
        /// Blank-line separated passages; the built-in set when absent.
        #[arg(long)]
        passages: Option<PathBuf>,
    },
    /// Sweep variants, depths, ranks, learning rates and seeds from one base checkpoint.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
    },
    /// Compare autodiff against central differences on a fresh model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "controller")]
        variant: Variant,
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long, default_value_t = 5)]
        per_tensor: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Parameter census by component.
    Params {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "toy")]
        dims: Dims,
        #[arg(long, default_value = "controller")]
        variant: Variant,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Dims {
    Qwen3b,
    Toy,
}

enum Failure {
    Core(Error),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

type Outcome = Result<(), Failure>;

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Numeric(_) | Failure::Core(Error::NonFinite { .. }) => 3,
        Failure::Core(
            Error::Io(_)
            | Error::BadMagic
            | Error::BadVersion(_)
            | Error::ChecksumMismatch { .. }
            | Error::Malformed(_)
            | Error::DTypeMismatch { .. },
        ) => 4,
        Failure::Core(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let double = match &cli.command {
        Command::Pretrain { common, .. }
        | Command::Surgery { common, .. }
        | Command::Train { common, .. }
        | Command::Eval { common, .. }
        | Command::Ablate { common, .. }
        | Command::Gradcheck { common, .. }
        | Command::Params { common, .. } => common.double,
    };
    let result = if double { run::<f64>(cli.command) } else { run::<f32>(cli.command) };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Core(e) => eprintln!("error: {e}"),
                Failure::Numeric(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(exit_code(&f))
        }
    }
}

/// Starting point, then the config file, then `--set`, then `--seed`.
fn resolve(start: RunConfig, common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = start;
    if let Some(p) = &common.config {
        cfg.apply_text(&fs::read_to_string(p)?)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<PathBuf, Error> {
    fs::create_dir_all(&common.out)?;
    Ok(common.out.clone())
}

fn log_writer(path: &Path) -> Result<BufWriter<File>, Error> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", LogRow::HEADER)?;
    Ok(w)
}

fn run<T: Element>(command: Command) -> Outcome {
    match command {
        Command::Pretrain { common, steps } => {
            let mut cfg = resolve(RunConfig::default(), &common)?;
            if let Some(n) = steps {
                cfg.train.total_steps = n;
            }
            cfg.validate()?;
            let out = out_dir(&common)?;
            let corpus = pipeline::load_corpus(&cfg)?;
            let mut log = log_writer(&out.join("pretrain.log"))?;
            let every = cfg.log_every;
            let (model, outcome) = pipeline::pretrain::<T>(&cfg, &corpus, &mut |row, _| {
                writeln!(log, "{}", row.tsv())?;
                if row.step % every == 0 {
                    println!("{}", row.tsv());
                }
                Ok(())
            })?;
            log.flush()?;
            let ckpt = out.join("base.ckpt");
            pipeline::save_with_config(&ckpt, &model.params, &cfg)?;
            println!("wrote {}", ckpt.display());
            match outcome.aborted {
                Some(e) => Err(e.into()),
                None => Ok(()),
            }
        }
        Command::Surgery { common, base, rank } => {
            let mut cfg = resolve(pipeline::read_sidecar(&base)?, &common)?;
            if let Some(r) = rank {
                cfg.surgery.rank = r;
            }
            cfg.validate()?;
            let (_, model) = pipeline::load_base::<T>(&base)?;
            let (converted, bases) = pipeline::convert(&model, &cfg)?;
            let out = out_dir(&common)?;
            let text = manifest(&cfg.surgery, &bases);
            fs::write(out.join("manifest.txt"), &text)?;
            let ckpt = out.join("converted.ckpt");
            pipeline::save_with_config(&ckpt, &converted.params, &cfg)?;
            print!("{text}");
            println!("wrote {}", ckpt.display());
            Ok(())
        }
        Command::Train { common, converted, variant, depth, steps, lr } => {
            let mut cfg = resolve(pipeline::read_sidecar(&converted)?, &common)?;
            if let Some(v) = variant {
                cfg.ouro.variant = v;
            }
            if let Some(d) = depth {
                cfg.ouro.depth = d;
            }
            if let Some(n) = steps {
                cfg.train.total_steps = n;
            }
            if let Some(l) = lr {
                cfg.train.lr_peak = l;
            }
            cfg.validate()?;
            let conv = ConvertedModel {
                config: cfg.model.clone(),
                surgery: cfg.surgery.clone(),
                params: checkpoint::load_as::<T>(&converted)?,
            };
            let mut model = pipeline::build(&conv, &cfg)?;
            let out = out_dir(&common)?;
            let corpus = pipeline::load_corpus(&cfg)?;
            let eval = Evaluator::new(&corpus, &cfg)?;
            let mut log = log_writer(&out.join("train.log"))?;
            let every = cfg.checkpoint_every;
            let save_cfg = cfg.clone();
            let ckpt_dir = out.clone();
            let (report, outcome) = pipeline::train_reported(
                &mut model,
                &cfg,
                &corpus,
                &eval,
                &mut |r| println!("{}", r.tsv()),
                &mut |row, m: &OuroborosModel<T>| {
                    writeln!(log, "{}", row.tsv())?;
                    if every > 0 && (row.step + 1) % every == 0 {
                        let p = ckpt_dir.join(format!("model-step{}.ckpt", row.step + 1));
                        pipeline::save_with_config(&p, &m.params, &save_cfg)?;
                    }
                    Ok(())
                },
            )?;
            log.flush()?;
            fs::write(out.join("report.tsv"), report.tsv())?;
            let ckpt = out.join("model.ckpt");
            pipeline::save_with_config(&ckpt, &model.params, &cfg)?;
            println!("wrote {}", ckpt.display());
            match outcome.aborted {
                Some(e) => Err(e.into()),
                None => Ok(()),
            }
        }
        Command::Eval { common, model, base, passages } => {
            let (_, m) = pipeline::load_ouroboros::<T>(&model)?;
            let full = base.as_deref().map(pipeline::load_base::<T>).transpose()?.map(|(_, b)| b);
            let texts = match passages {
                Some(p) => fs::read(p)?
                    .split(|&b| b == b'\n')
                    .fold(vec![Vec::new()], |mut acc: Vec<Vec<u8>>, line| {
                        if line.is_empty() {
                            acc.push(Vec::new());
                        } else {
                            let cur = acc.last_mut().expect("non-empty");
                            if !cur.is_empty() {
                                cur.push(b'\n');
                            }
                            cur.extend_from_slice(line);
                        }
                        acc
                    })
                    .into_iter()
                    .filter(|p| p.len() >= 2)
                    .collect(),
                None => heldout_passages(),
            };
            if texts.is_empty() {
                return Err(Error::Config("no passages to evaluate".into()).into());
            }
            let report = pipeline::eval_heldout(&m, full.as_ref(), &texts)?;
            let text = report.render();
            let out = out_dir(&common)?;
            fs::write(out.join("eval.tsv"), &text)?;
            print!("{text}");
            Ok(())
        }
        Command::Ablate { common, base } => {
            let cfg = resolve(pipeline::read_sidecar(&base)?, &common)?;
            cfg.validate()?;
            let (_, model) = pipeline::load_base::<T>(&base)?;
            let corpus = pipeline::load_corpus(&cfg)?;
            let out = out_dir(&common)?;
            let mut rows = BufWriter::new(File::create(out.join("ablate.jsonl"))?);
            let report = pipeline::ablate(&model, &cfg, &corpus, &mut |r| {
                println!("{}", r.tsv());
                let _ = writeln!(rows, "{}", r.json());
            })?;
            rows.flush()?;
            fs::write(out.join("ablate.tsv"), report.tsv())?;
            fs::write(out.join("ablate.jsonl"), report.jsonl())?;
            fs::write(out.join("seed_means.tsv"), report.seed_means_tsv())?;
            let pivot = report.pivot();
            fs::write(out.join("pivot.txt"), &pivot)?;
            print!("{pivot}");
            Ok(())
        }
        Command::Gradcheck { common, variant, depth, per_tensor, tolerance } => {
            let mut cfg = resolve(RunConfig::default(), &common)?;
            cfg.ouro.variant = variant;
            cfg.ouro.depth = depth;
            cfg.validate()?;
            let seed = cfg.train.seed;
            let base = ouroboros::Transformer::<f64>::init(cfg.model.clone(), seed)?;
            let (conv, _) = pipeline::convert(&base, &cfg)?;
            let mut model = pipeline::build(&conv, &cfg)?;
            perturb_trainables(&mut model.params, 0.3, seed.wrapping_add(1))?;
            let corpus = pipeline::load_corpus(&cfg)?;
            let batch = Batch::at_offsets(&corpus.train, &[0, corpus.train.len() / 2], 8)?;
            let names = model.params.trainable_names();
            let report = grad_check(&model, &batch, &names, per_tensor, GRAD_CHECK_STEP, seed)?;
            println!("tensor\tmax_rel_err");
            for (name, err) in report.per_tensor() {
                println!("{name}\t{err:.3e}");
            }
            let worst = report.max_rel_err();
            println!("max\t{worst:.3e}");
            if worst < tolerance {
                Ok(())
            } else {
                Err(Failure::Numeric(format!("gradient check failed: {worst:.3e} >= {tolerance:.1e}")))
            }
        }
        Command::Params { common, dims, variant } => {
            let census = match dims {
                Dims::Qwen3b => qwen25_3b_census(variant),
                Dims::Toy => {
                    let mut cfg = resolve(RunConfig::default(), &common)?;
                    cfg.ouro.variant = variant;
                    if variant == Variant::Baseline17 {
                        cfg.ouro.depth = 1;
                    }
                    cfg.validate()?;
                    Census::analytic(&cfg.model, &cfg.surgery, &cfg.ouro)
                }
            };
            print!("{}", census.render());
            Ok(())
        }
    }
}
