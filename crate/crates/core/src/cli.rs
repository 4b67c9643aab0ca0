//! Command-line surface: `gen`, `train`, `eval`, `attn` and `selfcheck`.
//!
//! Configuration resolves in order: built-in defaults, `--config` file,
//! `CANREID_*` environment variables, then flags.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attention::Embedding;
use crate::config::RunConfig;
use crate::data::{export_dataset, generate_synthetic_dataset, import_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_embeddings, probe_gallery, single_shot_draws, write_curve_csv, write_report_csv, CmcSetting,
    EvalReport, Label,
};
use crate::exec::Execution;
use crate::heatmap::export_attention_maps;
use crate::image::ImageSample;
use crate::model::CanModel;
use crate::selfcheck::run_selfcheck;
use crate::trainer::{
    assemble_model, cold_model, pretrain_backbone, train_end_to_end, write_pretrain_log, write_train_log,
    Checkpoint,
};

pub const VERSION: &str = concat!("can-reid ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Parser)]
#[command(name = "canreid", version, about = "Comparative attention re-identification on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory (pixmaps + manifest.csv).
    Gen(GenArgs),
    /// Pretrain the backbone, train end-to-end, then evaluate on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split.
    Eval(EvalArgs),
    /// Export attention heatmaps for images of a dataset.
    Attn(AttnArgs),
    /// Finite-difference audit of every differentiable op.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset directory written by `gen`; generated from the config when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// none, avg_pool, max_pool or fc_head.
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub freeze_backbone: bool,
    /// Comma-separated glimpse steps, e.g. 2,4,8.
    #[arg(long)]
    pub steps: Option<String>,
    #[arg(long)]
    pub glimpses: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub skip_pretrain: bool,
    /// Stop end-to-end training after this many iterations (checkpoint kept).
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Continue from a checkpoint written by an interrupted run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use the checkpoint's current parameters instead of the best snapshot.
    #[arg(long)]
    pub last: bool,
    /// Gallery equals the probe set; rank-1 must be 1.
    #[arg(long)]
    pub sanity: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Number of images to export.
    #[arg(long, default_value_t = 4)]
    pub limit: usize,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    /// Corrupt the analytic gradient of this op (test fixture).
    #[arg(long)]
    pub inject_fault: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path.display().to_string(), e)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

/// Defaults, then file, then environment, then `--seed` and `--set`.
pub fn resolve_config(args: &ConfigArgs, env: impl Fn(&str) -> Option<String>) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = &args.config {
        config.apply_file(path)?;
    }
    config.apply_env_with(env)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    apply_overrides(&mut config, &args.overrides)?;
    Ok(config)
}

fn apply_overrides(config: &mut RunConfig, overrides: &[String]) -> Result<()> {
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{kv}' is not key=value")))?;
        config.set(k.trim(), v.trim())?;
    }
    Ok(())
}

fn apply_train_flags(config: &mut RunConfig, args: &TrainArgs) -> Result<()> {
    if let Some(a) = &args.ablation {
        config.set("model.ablation", a)?;
    }
    if args.freeze_backbone {
        config.set("train.freeze_backbone", "true")?;
    }
    if let Some(s) = &args.steps {
        config.set("model.steps", s)?;
    }
    if let Some(t) = args.glimpses {
        config.set("model.glimpses", &t.to_string())?;
    }
    if let Some(m) = args.margin {
        config.set("train.margin", &m.to_string())?;
    }
    if args.skip_pretrain {
        config.set("pretrain.skip", "true")?;
    }
    if let Some(n) = args.stop_after {
        config.set("train.stop_after", &n.to_string())?;
    }
    Ok(())
}

fn env_lookup(name: &str) -> Option<String> {
    std::env::var(name).ok()
}

pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    let config = resolve_config(&args.config, env_lookup)?;
    config.dataset.validate()?;
    let dataset = generate_synthetic_dataset(&config.dataset)?;
    let rows = export_dataset(&dataset, &args.out)?;
    write_file(&args.out.join("config.txt"), &config.to_text())?;
    println!("wrote {} images to {}", rows.len(), args.out.display());
    Ok(())
}

fn load_or_generate(config: &RunConfig, dir: Option<&Path>) -> Result<Dataset> {
    match dir {
        Some(d) => import_dataset(d),
        None => generate_synthetic_dataset(&config.dataset),
    }
}

fn write_run_info(out: &Path, config: &RunConfig, regime: &str) -> Result<()> {
    write_file(&out.join("config.txt"), &config.to_text())?;
    write_file(
        &out.join("run.txt"),
        &format!("version = {VERSION}\nseed = {}\nregime = {regime}\n", config.seed),
    )
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let exec = exec(args.sequential);
    let resume = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut config = match &resume {
        // a resumed run replays the interrupted run's resolved config
        Some(ckpt) => {
            let mut c = RunConfig::default();
            c.apply_text(&ckpt.config_echo)?;
            c.set("train.stop_after", "none")?;
            if let Some(seed) = args.config.seed {
                c.seed = seed;
            }
            apply_overrides(&mut c, &args.config.overrides)?;
            c
        }
        None => resolve_config(&args.config, env_lookup)?,
    };
    apply_train_flags(&mut config, args)?;
    config.validate()?;
    let model_config = config.model_config()?;
    let train_config = config.train_config();
    let dataset = load_or_generate(&config, args.dataset.as_deref())?;
    create_dir(&args.out)?;
    write_run_info(&args.out, &config, train_config.regime())?;
    let echo = config.to_text();

    let model = match &resume {
        Some(ckpt) => ckpt.model()?,
        None if config.skip_pretrain => cold_model(model_config, dataset.train_identity_count(), config.seed)?,
        None => {
            let pre = pretrain_backbone(&dataset, &model_config.backbone, &config.pretrain_config(), exec)?;
            write_pretrain_log(&args.out.join("pretrain_log.csv"), &pre.log)?;
            assemble_model(model_config, pre.backbone, dataset.train_identity_count(), config.seed)?
        }
    };
    let ckpt_path = args.out.join("checkpoint.json");
    let outcome = train_end_to_end(model, &dataset, &train_config, &echo, resume, Some(&ckpt_path), exec)?;
    write_train_log(&args.out.join("train_log.csv"), &outcome.checkpoint.history)?;
    if !outcome.finished {
        println!(
            "stopped at iteration {}; resume with --resume {}",
            outcome.checkpoint.iteration,
            ckpt_path.display()
        );
        return Ok(());
    }
    let report = evaluate_into(&args.out, &outcome.best, &dataset.test, &config, false, exec)?;
    println!(
        "{} test rank-1 {:.3} mAP {:.3}",
        train_config.regime(),
        report.rank1,
        report.map
    );
    Ok(())
}

/// Embeds `samples`, evaluates and writes report, curve, embeddings and
/// gallery draws into `out`.
fn evaluate_into(
    out: &Path,
    model: &CanModel,
    samples: &[ImageSample],
    config: &RunConfig,
    sanity: bool,
    exec: Execution,
) -> Result<EvalReport> {
    let (probes, gallery) = if sanity {
        (samples.to_vec(), samples.to_vec())
    } else {
        probe_gallery(samples)
    };
    let q = model.embed_all(&probes, exec)?;
    let g = model.embed_all(&gallery, exec)?;
    let ql: Vec<Label> = probes.iter().map(Label::from).collect();
    let gl: Vec<Label> = gallery.iter().map(Label::from).collect();
    let setting = if sanity {
        CmcSetting::FirstMatch
    } else {
        CmcSetting::SingleShot {
            repeats: config.eval_repeats,
            seed: config.seed,
        }
    };
    let report = evaluate_embeddings(&q, ql.clone(), &g, gl.clone(), setting)?;
    let name = if sanity { "sanity" } else { "test" };
    write_report_csv(&out.join("report.csv"), &[(name.to_string(), report.clone())])?;
    write_curve_csv(&out.join("curve.csv"), &report.curve)?;
    write_embeddings(&out.join("embeddings.csv"), &[("query", &q, &ql), ("gallery", &g, &gl)])?;
    if let CmcSetting::SingleShot { repeats, seed } = setting {
        let mut text = String::from("repeat,gallery_index\n");
        for (r, draw) in single_shot_draws(&gl, repeats, seed).iter().enumerate() {
            for j in draw {
                text.push_str(&format!("{r},{j}\n"));
            }
        }
        write_file(&out.join("gallery_draws.csv"), &text)?;
    }
    Ok(report)
}

type EmbeddingSide<'a> = (&'a str, &'a [Embedding], &'a [Label]);

/// `role,index,identity,camera,v0..` with full-precision values.
fn write_embeddings(path: &Path, sides: &[EmbeddingSide]) -> Result<()> {
    let mut text = String::from("role,index,identity,camera,values\n");
    for (role, embs, labels) in sides {
        for (i, (e, l)) in embs.iter().zip(labels.iter()).enumerate() {
            let values: Vec<String> = e.values.data().iter().map(|v| format!("{v:e}")).collect();
            text.push_str(&format!("{role},{i},{},{},{}\n", l.identity, l.camera, values.join(" ")));
        }
    }
    write_file(path, &text)
}

fn checkpoint_config(ckpt: &Checkpoint) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    c.apply_text(&ckpt.config_echo)?;
    Ok(c)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut config = checkpoint_config(&ckpt)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let model = if args.last { ckpt.model()? } else { ckpt.best_model()? };
    let dataset = import_dataset(&args.dataset)?;
    create_dir(&args.out)?;
    write_run_info(&args.out, &config, &ckpt.regime)?;
    let report = evaluate_into(&args.out, &model, &dataset.test, &config, args.sanity, exec(args.sequential))?;
    println!(
        "rank-1 {:.3} rank-5 {:.3} rank-10 {:.3} rank-20 {:.3} mAP {:.3}",
        report.rank1, report.rank5, report.rank10, report.rank20, report.map
    );
    Ok(())
}

pub fn cmd_attn(args: &AttnArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.best_model()?;
    let dataset = import_dataset(&args.dataset)?;
    let split = Split::parse(&args.split)?;
    let images: Vec<(String, ImageSample)> = dataset
        .split(split)
        .iter()
        .take(args.limit)
        .enumerate()
        .map(|(i, s)| (format!("{}_{i:03}_id{}_cam{}", split.name(), s.identity, s.camera), s.clone()))
        .collect();
    let maps = export_attention_maps(&model, &images, &args.out)?;
    println!("wrote {} attention maps to {}", maps.len(), args.out.display());
    Ok(())
}

pub fn cmd_selfcheck(args: &SelfcheckArgs) -> Result<()> {
    let report = run_selfcheck(args.inject_fault.as_deref(), args.seed)?;
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed for: {}",
            report.failing().join(", ")
        )))
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Attn(a) => cmd_attn(a),
        Command::Selfcheck(a) => cmd_selfcheck(a),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Usage(e.to_string()))?;
    run(&cli)
}
