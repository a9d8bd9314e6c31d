use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use defstereo::config::KvConfig;
use defstereo::datagen::{self, DatagenConfig, Patch, SceneRecipe, Split};
use defstereo::eval::{self, MetricReport};
use defstereo::model::{Model, ModelConfig};
use defstereo::optics::{self, DefocusConfig, LightField, RefocusParams};
use defstereo::train::{TrainConfig, Trainer};
use defstereo::{Checkpoint, FusionVariant, Image};

mod vis;

/// Depth from defocus + stereo: data synthesis, optics utilities, training
/// and evaluation.
#[derive(Parser, Debug)]
#[command(name = "defstereo", version)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a procedural dataset.
    Gen(GenArgs),
    /// Render the defocused left view of a procedural scene.
    Defocus(DefocusArgs),
    /// Render a light field of a procedural scene.
    LfSynth(LfSynthArgs),
    /// Refocus a light field directory.
    LfRefocus(LfRefocusArgs),
    /// Train a network on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Predict the disparity of one sample.
    Predict(PredictArgs),
    /// Colour-map a disparity PFM.
    ExportVis(ExportVisArgs),
}

#[derive(Args, Debug)]
struct SceneArgs {
    /// Scene recipe: random or staircase.
    #[arg(long, default_value = "random")]
    recipe: String,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Number of training samples.
    #[arg(long)]
    count: usize,
    /// Number of test samples (drawn from a disjoint seed range).
    #[arg(long, default_value_t = 0)]
    test_count: usize,
    /// Dataset root; `train/`, `test/` and the manifest are written here.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DefocusArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// In-focus disparity; drawn from the configured range when omitted.
    #[arg(long, allow_hyphen_values = true)]
    focal_disparity: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    /// Photons at intensity 1.0 (0 disables noise).
    #[arg(long, default_value_t = 0.0)]
    noise_peak: f64,
    /// Defocused image (.png or .pfm).
    #[arg(long)]
    out: PathBuf,
    /// Also write the pinhole left view.
    #[arg(long)]
    pinhole: Option<PathBuf>,
    /// Also write the ground-truth disparity (.pfm).
    #[arg(long)]
    disparity: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LfSynthArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Views per side (odd).
    #[arg(long, default_value_t = 9)]
    angular: usize,
    /// Baseline between neighbouring views, in units of the stereo baseline.
    #[arg(long)]
    u_scale: Option<f64>,
    /// Output light-field directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("focus").required(true).args(["slope", "alpha"])))]
struct LfRefocusArgs {
    #[arg(long)]
    lf: PathBuf,
    /// Refocus slope σ in pixels of disparity.
    #[arg(long, allow_hyphen_values = true)]
    slope: Option<f64>,
    /// Relative focal depth α (σ = 1 − 1/α).
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    /// Synthetic aperture radius in views (anti-aliased disc).
    #[arg(long)]
    aperture: Option<f64>,
    /// Output image (.png or .pfm).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory (its train split is used).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and loss.csv.
    #[arg(long)]
    out: PathBuf,
    /// dfd, stereo or fusion.
    #[arg(long)]
    model: Option<String>,
    /// Fusion interconnection: full, none, less or identity.
    #[arg(long)]
    variant: Option<FusionVariant>,
    /// Number of optimiser steps (overrides `max_steps`).
    #[arg(long)]
    steps: Option<usize>,
    /// Patches per step (overrides `batch_size`).
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// train or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Expected model (dfd, stereo, fusion or fusion/<variant>); must match
    /// the checkpoint.
    #[arg(long)]
    model: Option<String>,
    /// MetricReport JSON output.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Table output (also printed to stdout).
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sample directory with left.png, right.png and defocus.png.
    #[arg(long)]
    sample: PathBuf,
    /// Output disparity (.pfm).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportVisArgs {
    /// Disparity map (.pfm).
    #[arg(long)]
    disp: PathBuf,
    /// Colour PNG.
    #[arg(long)]
    out: PathBuf,
    /// Disparity mapped to the low end of the colour map.
    #[arg(long, allow_hyphen_values = true)]
    min: f32,
    /// Disparity mapped to the high end of the colour map.
    #[arg(long, allow_hyphen_values = true)]
    max: f32,
}

fn load_kv(path: Option<&Path>) -> Result<KvConfig> {
    match path {
        Some(p) => Ok(KvConfig::load(p)?),
        None => Ok(KvConfig::default()),
    }
}

fn save_image(img: &Image, path: &Path) -> Result<()> {
    let is_pfm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pfm"));
    if is_pfm {
        img.save_pfm(path)?;
    } else {
        img.save_png(path)?;
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

/// Datagen config and recipe from the config file; every key must be used.
fn scene_setup(recipe: &str, config: Option<&Path>) -> Result<(DatagenConfig, SceneRecipe)> {
    let mut kv = load_kv(config)?;
    let cfg = DatagenConfig::from_kv(&mut kv)?;
    let recipe = SceneRecipe::from_kv(recipe, &mut kv)?;
    kv.ensure_consumed()?;
    Ok((cfg, recipe))
}

fn gen(a: &GenArgs, seed: u64, config: Option<&Path>) -> Result<()> {
    let (cfg, recipe) = scene_setup(&a.scene.recipe, config)?;
    let entries = datagen::generate_dataset(&recipe, &cfg, seed, a.count, a.test_count)?;
    let manifest = datagen::write_dataset(&entries, &a.out, seed, &recipe, &cfg)?;
    println!("{}", manifest.display());
    Ok(())
}

fn defocus(a: &DefocusArgs, seed: u64, config: Option<&Path>) -> Result<()> {
    let (cfg, recipe) = scene_setup(&a.scene.recipe, config)?;
    let mut rng = datagen::scene_rng(seed, 0);
    let scene = datagen::generate_scene(&recipe, &cfg, &mut rng)?;
    let drawn = cfg.draw_defocus(&mut rng)?;
    let dc = DefocusConfig {
        focal_disparity: a.focal_disparity.unwrap_or(drawn.focal_disparity),
        kappa: a.kappa.unwrap_or(drawn.kappa),
        noise_peak: a.noise_peak,
    };
    let mut img = optics::render_defocus(&scene, &dc)?;
    if dc.noise_peak > 0.0 {
        img = optics::add_poisson_noise(&img, dc.noise_peak, &mut rng)?;
    }
    ensure_parent(&a.out)?;
    save_image(&img, &a.out)?;
    if let Some(p) = &a.pinhole {
        ensure_parent(p)?;
        save_image(&optics::render_view(&scene, 0.0)?, p)?;
    }
    if let Some(p) = &a.disparity {
        ensure_parent(p)?;
        scene.disparity_map().save_pfm(p)?;
    }
    Ok(())
}

fn lf_synth(a: &LfSynthArgs, seed: u64, config: Option<&Path>) -> Result<()> {
    let (cfg, recipe) = scene_setup(&a.scene.recipe, config)?;
    let scene = datagen::generate_scene(&recipe, &cfg, &mut datagen::scene_rng(seed, 0))?;
    let u = a
        .u_scale
        .unwrap_or_else(|| optics::default_u_scale(a.angular));
    let lf = optics::synth_lightfield_scaled(&scene, a.angular, u)?;
    lf.save(&a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn lf_refocus(a: &LfRefocusArgs) -> Result<()> {
    let lf = LightField::load(&a.lf)?;
    let params = match (a.slope, a.alpha) {
        (Some(s), None) => RefocusParams::from_slope(s),
        (None, Some(al)) => RefocusParams::from_alpha(al)?,
        _ => unreachable!("clap enforces exactly one of --slope / --alpha"),
    };
    let img = optics::refocus_with_aperture(&lf, params, a.aperture);
    ensure_parent(&a.out)?;
    save_image(&img, &a.out)
}

fn train(a: &TrainArgs, seed: Option<u64>, config: Option<&Path>) -> Result<()> {
    let mut kv = load_kv(config)?;
    if let Some(m) = &a.model {
        kv.set("model", m);
    }
    if let Some(v) = a.variant {
        kv.set("variant", v);
    }
    if let Some(s) = a.steps {
        kv.set("max_steps", s);
    }
    if let Some(b) = a.batch_size {
        kv.set("batch_size", b);
    }
    if let Some(s) = seed {
        kv.set("seed", s);
    }
    let cfg = TrainConfig::from_kv(kv)?;
    let (_, train_set) = datagen::load_dataset(&a.data, Some(Split::Train))?;
    let mut patches: Vec<Patch> = Vec::new();
    for e in &train_set {
        patches.extend(
            datagen::extract_patches(&e.sample, cfg.patch_h, cfg.patch_w, cfg.patch_stride)?
                .patches,
        );
    }
    let validation = if cfg.eval_every > 0 {
        datagen::load_dataset(&a.data, Some(Split::Test))?
            .1
            .into_iter()
            .map(|e| e.sample)
            .collect()
    } else {
        Vec::new()
    };
    let mut trainer = Trainer::new(cfg, patches)?;
    let mut eval_rows = String::from("step,mae_px\n");
    trainer.run(Some(&a.out), |step, model, store| {
        if !validation.is_empty() {
            let r = eval::evaluate(model, store, &validation)?;
            eval_rows.push_str(&format!("{},{}\n", step, r.mae_px));
        }
        Ok(())
    })?;
    if !validation.is_empty() {
        let p = a.out.join("eval.csv");
        fs::write(&p, eval_rows).with_context(|| format!("writing {}", p.display()))?;
    }
    println!(
        "{}",
        defstereo::train::final_checkpoint_path(&a.out).display()
    );
    Ok(())
}

/// Loads a checkpoint, checking it against `--model` when given.
fn load_model(path: &Path, expected: Option<&str>) -> Result<(Model, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    if let Some(m) = expected {
        let want = ModelConfig {
            kind: m.parse()?,
            hg: ck.config.hg.clone(),
        };
        ck.ensure_compatible(&want)?;
    }
    let mut store = defstereo::ParamStore::<f32>::new();
    let model = Model::build(&ck.config, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok((model, ck))
}

fn evaluate(a: &EvalArgs) -> Result<()> {
    let split = match a.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => bail!("unknown split `{}` (train or test)", other),
    };
    let (model, ck) = load_model(&a.checkpoint, a.model.as_deref())?;
    let (_, entries) = datagen::load_dataset(&a.data, Some(split))?;
    let samples: Vec<_> = entries.into_iter().map(|e| e.sample).collect();
    let report = eval::evaluate(&model, &ck.store, &samples)?;
    let table = MetricReport::table(&[(&model.kind().display_name(), &report)]);
    print!("{}", table);
    if let Some(p) = &a.json {
        ensure_parent(p)?;
        fs::write(p, report.to_json()).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.table {
        ensure_parent(p)?;
        fs::write(p, &table).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    let (model, ck) = load_model(&a.checkpoint, None)?;
    let dir = &a.sample;
    let sample = datagen::SampleTriplet {
        left: Image::load_png(&dir.join("left.png"))?,
        right: Image::load_png(&dir.join("right.png"))?,
        left_defocus: Image::load_png(&dir.join("defocus.png"))?,
        disparity: Image::new(1, 0, 0),
        meta: datagen::SampleMeta {
            focal_disparity: 0.0,
            kappa: 0.0,
            noise_peak: 0.0,
            scene_seed: 0,
            recipe: String::new(),
        },
    };
    let disp = eval::predict(&model, &ck.store, &sample)?;
    let gt = dir.join("disp.pfm");
    if gt.exists() {
        let gt = Image::load_pfm(&gt)?;
        if gt.same_dims(&disp) {
            let r = eval::metrics(&disp.data, &gt.data)?;
            eprintln!("mae_px = {}", r.mae_px);
        }
    }
    ensure_parent(&a.out)?;
    disp.save_pfm(&a.out)?;
    Ok(())
}

fn export_vis(a: &ExportVisArgs) -> Result<()> {
    if !(a.max > a.min) {
        bail!("--max ({}) must exceed --min ({})", a.max, a.min);
    }
    let disp = Image::load_pfm(&a.disp)?;
    ensure_parent(&a.out)?;
    vis::turbo(&disp, a.min, a.max).save_png(&a.out)?;
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DEFSTEREO_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).with_context(|| {
            format!("DEFSTEREO_THREADS must be a positive integer, got `{}`", v)
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let seed = cli.seed.unwrap_or(0);
    let config = cli.config.as_deref();
    match &cli.command {
        Command::Gen(a) => gen(a, seed, config),
        Command::Defocus(a) => defocus(a, seed, config),
        Command::LfSynth(a) => lf_synth(a, seed, config),
        Command::LfRefocus(a) => lf_refocus(a),
        Command::Train(a) => train(a, cli.seed, config),
        Command::Eval(a) => evaluate(a),
        Command::Predict(a) => predict(a),
        Command::ExportVis(a) => export_vis(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with 2 on usage errors and 0 for --help / --version.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(1)
        }
    }
}
