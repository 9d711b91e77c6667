//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 for invalid input (bad flags, missing or
//! corrupted files, config errors), 2 for runtime aborts such as a
//! non-finite loss.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Device;
use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::{emit_report, evaluate, frontalize, EvalReport};
use crate::imageio::{read_image_blob, write_image_blob, write_png};
use crate::synthdata::{build_dataset, load_dataset, parse_yaws, save_dataset};
use crate::train::{
    load_checkpoint, load_identity_net, model_dtype, parse_kv, pretrain_identity_net, save_identity_net, PretrainOptions, train_loop,
    TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Name of the resolved-configuration snapshot written by every command.
pub const SNAPSHOT: &str = "config.resolved.txt";

#[derive(Debug, Parser)]
#[command(name = "hfpim", about = "Face frontalization pipeline on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    GenData(GenData),
    /// Pretrain and freeze the identity network.
    PretrainId(PretrainId),
    /// Train the frontalization model.
    Train(Train),
    /// Frontalize one image blob.
    Frontalize(Frontalize),
    /// Evaluate a checkpoint on a held-out split.
    Eval(Eval),
    /// Write tables and plots from evaluation results.
    Report(Report),
}

#[derive(Debug, Args)]
struct GenData {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    num_identities: usize,
    #[arg(long, default_value = "0,±30,±60,±90", allow_hyphen_values = true)]
    yaws: String,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    /// Defaults to the image size.
    #[arg(long)]
    texture_size: Option<usize>,
    /// Identities held out into `test/`; the rest go to `train/`.
    #[arg(long, default_value_t = 0)]
    test_identities: usize,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PretrainId {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "identity_net")]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Largest absolute profile yaw, in degrees, used besides the frontals.
    #[arg(long, default_value_t = 30.0)]
    max_yaw: f64,
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, Args)]
struct Train {
    /// Flat `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    identity_net: Option<PathBuf>,
    #[arg(long)]
    max_iter: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Any config key, as `key=value`; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct Frontalize {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// PNG export path; defaults to the output path with a `.png` extension.
    #[arg(long)]
    png: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Held-out split directory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "eval")]
    out: PathBuf,
    /// Separate feature network; defaults to the one stored in the checkpoint.
    #[arg(long)]
    feature_net: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "full")]
    label: String,
}

#[derive(Debug, Args)]
struct Report {
    /// `eval.json` written by the eval command.
    #[arg(long)]
    eval: PathBuf,
    /// `eval.json` of a comparison run.
    #[arg(long)]
    ablation: Option<PathBuf>,
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

pub const EVAL_JSON: &str = "eval.json";

fn write_snapshot(dir: &Path, command: &str, entries: &[(String, String)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut text = format!("# hfpim {command}\n");
    for (k, v) in entries {
        text.push_str(&format!("{k} = {v}\n"));
        log::info!("{command}: {k} = {v}");
    }
    fs::write(dir.join(SNAPSHOT), text)?;
    Ok(())
}

fn kv(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn gen_data(a: GenData) -> Result<()> {
    let yaws = parse_yaws(&a.yaws)?;
    let texture_size = a.texture_size.unwrap_or(a.image_size);
    let ds = build_dataset(a.num_identities, &yaws, a.image_size, texture_size, a.seed)?;
    if a.test_identities > 0 {
        let (train, test) = ds.split_by_identity(a.test_identities)?;
        save_dataset(&train, &a.out.join("train"))?;
        save_dataset(&test, &a.out.join("test"))?;
    }
    save_dataset(&ds, &a.out)?;
    let preview = a.out.join("preview");
    fs::create_dir_all(&preview)?;
    for s in ds.samples.iter().filter(|s| s.identity == 0) {
        let stem = format!("id0_yaw{}", s.yaw_deg);
        write_image_blob(&preview.join(format!("{stem}.bin")), &s.profile)?;
        write_png(&preview.join(format!("{stem}.png")), &s.profile)?;
    }
    write_snapshot(
        &a.out,
        "gen-data",
        &[
            kv("seed", a.seed),
            kv("num_identities", a.num_identities),
            kv("yaws", &a.yaws),
            kv("image_size", a.image_size),
            kv("texture_size", texture_size),
            kv("test_identities", a.test_identities),
        ],
    )?;
    println!("wrote {} samples to {}", ds.samples.len(), a.out.display());
    Ok(())
}

fn pretrain_id(a: PretrainId) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let cfg = TrainConfig {
        deterministic: a.deterministic,
        ..TrainConfig::default()
    };
    write_snapshot(
        &a.out,
        "pretrain-id",
        &[
            kv("dataset", a.dataset.display()),
            kv("epochs", a.epochs),
            kv("seed", a.seed),
            kv("batch_size", a.batch_size),
            kv("learning_rate", a.learning_rate),
            kv("max_yaw", a.max_yaw),
            kv("deterministic", a.deterministic),
        ],
    )?;
    let opts = PretrainOptions {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        max_yaw: a.max_yaw,
    };
    let p = pretrain_identity_net(
        &ds,
        &opts,
        a.seed,
        model_dtype(&cfg),
        &Device::Cpu,
    )?;
    let snapshot = fs::read(a.out.join(SNAPSHOT))?;
    save_identity_net(&p.phi, &p.info, &a.out)?;
    fs::write(a.out.join(SNAPSHOT), snapshot)?;
    println!("identity network train accuracy {:.4}", p.info.train_accuracy);
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(d) = a.dataset {
        cfg.dataset = d;
    }
    if let Some(p) = a.identity_net {
        cfg.identity_net = Some(p);
    }
    if let Some(m) = a.max_iter {
        cfg.max_iter = m;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(c) = a.checkpoint_every {
        cfg.checkpoint_every = c;
    }
    let overrides = parse_kv(&a.set.join("\n"))?;
    cfg.apply(&overrides)?;
    cfg.validate()?;
    for (k, v) in cfg.entries() {
        log::info!("train: {k} = {v}");
    }
    let outcome = train_loop(&cfg, &a.out, a.resume.as_deref())?;
    println!("final checkpoint {}", outcome.final_checkpoint.display());
    Ok(())
}

fn frontalize_cmd(a: Frontalize) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint, &Device::Cpu)?;
    let img = read_image_blob(&a.input)?;
    if img.height() != ck.bundle.spec.image_size {
        return Err(Error::shape(format!(
            "input is {}x{}, checkpoint expects {}x{}",
            img.height(),
            img.width(),
            ck.bundle.spec.image_size,
            ck.bundle.spec.image_size
        )));
    }
    let out = frontalize(&ck.bundle, &img)?;
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
        write_snapshot(
            parent,
            "frontalize",
            &[
                kv("checkpoint", a.checkpoint.display()),
                kv("input", a.input.display()),
                kv("output", a.output.display()),
            ],
        )?;
    }
    let png = a.png.unwrap_or_else(|| a.output.with_extension("png"));
    write_png(&png, &out)?;
    write_image_blob(&a.output, &out)?;
    println!("wrote {}", a.output.display());
    Ok(())
}

fn eval_cmd(a: Eval) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint, &Device::Cpu)?;
    let dataset = match a.dataset {
        Some(d) => d,
        None => {
            let train_dir = &ck.config.dataset;
            let sibling = train_dir.parent().map(|p| p.join("test"));
            sibling.ok_or_else(|| Error::Config("no --dataset given and no test split next to the training data".into()))?
        }
    };
    let test = load_dataset(&dataset)?;
    write_snapshot(
        &a.out,
        "eval",
        &[
            kv("checkpoint", a.checkpoint.display()),
            kv("dataset", dataset.display()),
            kv(
                "feature_net",
                a.feature_net.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            kv("seed", a.seed),
            kv("label", &a.label),
        ],
    )?;
    let report = match &a.feature_net {
        Some(p) => {
            let (net, _) = load_identity_net(p, &Device::Cpu)?;
            evaluate(&ck.bundle, &net, &test, a.seed, &a.label)?
        }
        None => evaluate(&ck.bundle, &ck.phi, &test, a.seed, &a.label)?,
    };
    fs::write(a.out.join(EVAL_JSON), serde_json::to_vec_pretty(&report)?)?;
    let (front, base) = report.large_pose_rank1();
    println!(
        "large-pose rank-1: frontalized {:.3}, raw profile {:.3}",
        front.unwrap_or(f64::NAN),
        base.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn read_eval(path: &Path) -> Result<EvalReport> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::CorruptedHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn report_cmd(a: Report) -> Result<()> {
    let mut report = read_eval(&a.eval)?;
    if let Some(p) = &a.ablation {
        report.ablation = Some(Box::new(read_eval(p)?));
    }
    write_snapshot(
        &a.out,
        "report",
        &[
            kv("eval", a.eval.display()),
            kv("ablation", a.ablation.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
        ],
    )?;
    for p in emit_report(&report, &a.out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

/// Runs one invocation; `argv[0]` is the program name.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_VALIDATION,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::PretrainId(a) => pretrain_id(a),
        Command::Train(a) => train(a),
        Command::Frontalize(a) => frontalize_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Report(a) => report_cmd(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
