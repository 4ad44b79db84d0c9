//! Command-line surface tying the pipeline stages together:
//! synth-data -> fit -> nmfc -> reenact -> train-init -> finetune ->
//! render -> metrics.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use reenact_core::camera::load_landmarks;
use reenact_core::data::{
    load_dataset, mask_from_tensor, rgb_from_tensor, save_dataset, sequence_metrics, synth_person,
    tensor_from_mask, tensor_from_nmfc, tensor_from_rgb, SynthPersonConfig,
};
use reenact_core::fitter::{load_fit, save_fit, fit_video, BoxConstraints, EnergyWeights, FitOptions};
use reenact_core::gan::{
    finetune_init, finetune_train, load_gan_checkpoint, rollout, save_gan_checkpoint,
    train_init_stage, write_train_log, GanCheckpoint, GanConfig, TrainClip, TrainOptions,
};
use reenact_core::model::{load_model, save_model};
use reenact_core::raster::{load_nmfc, render_nmfc_sequence, save_nmfc, save_nmfc_png};
use reenact_core::reenact::{transfer_params, ScalePolicy, TransferSpec};
use reenact_core::tensor::Tensor;
use reenact_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "reenact",
    about = "Head-reenactment geometry pipeline and toy neural renderer",
    version
)]
struct Cli {
    /// Seed for every random choice of the invoked stage.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Optional JSON file with network/training settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker thread count (the pipeline is currently single-threaded; the
    /// value is validated and reserved).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a self-consistent synthetic person dataset.
    SynthData(SynthDataArgs),
    /// Fit model parameters and cameras to a landmark track.
    Fit(FitArgs),
    /// Render conditioning images for a fitted sequence.
    Nmfc(NmfcArgs),
    /// Compose source motion with a target identity and render.
    Reenact(ReenactArgs),
    /// Multi-person adversarial training stage.
    TrainInit(TrainInitArgs),
    /// Convert a checkpoint to one person and refine it.
    Finetune(FinetuneArgs),
    /// Roll out a person-specific generator over conditioning images.
    Render(RenderArgs),
    /// Compare generated frames against ground truth.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct SynthDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    landmarks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    max_iters: usize,
    #[arg(long, default_value_t = 1.0)]
    w_landmark: f64,
    #[arg(long, default_value_t = 0.05)]
    w_prior: f64,
    #[arg(long, default_value_t = 0.5)]
    w_smooth: f64,
    /// Coefficient box half-width in standard deviations.
    #[arg(long, default_value_t = 3.0)]
    box_k: f64,
}

#[derive(Args)]
struct NmfcArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    fit: PathBuf,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReenactArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    source_fit: PathBuf,
    #[arg(long)]
    target_fit: PathBuf,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainInitArgs {
    /// Directory with one dataset subdirectory per person.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Optional CSV loss-trace destination.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Single-person dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of conditioning sidecars (%06d.nmfc).
    #[arg(long)]
    nmfc: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    fake: PathBuf,
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    gt_masks: Option<PathBuf>,
    #[arg(long)]
    pred_masks: Option<PathBuf>,
    /// Optional JSON report destination; always printed to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // Clap exits 2 on usage errors, 0 for --help/--version.
        Err(e) => e.exit(),
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::SynthData(a) => cmd_synth_data(cli, a),
        Command::Fit(a) => cmd_fit(a),
        Command::Nmfc(a) => cmd_nmfc(a),
        Command::Reenact(a) => cmd_reenact(a),
        Command::TrainInit(a) => cmd_train_init(cli, a),
        Command::Finetune(a) => cmd_finetune(cli, a),
        Command::Render(a) => cmd_render(a),
        Command::Metrics(a) => cmd_metrics(a),
    }
}

fn load_config(cli: &Cli) -> Result<Option<GanConfig>> {
    match &cli.config {
        None => Ok(None),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Ok(Some(serde_json::from_str(&text)?))
        }
    }
}

fn numbered(dir: &Path, index: usize, ext: &str) -> PathBuf {
    dir.join(format!("{index:06}.{ext}"))
}

fn cmd_synth_data(cli: &Cli, a: &SynthDataArgs) -> Result<()> {
    let person = synth_person(&SynthPersonConfig {
        seed: cli.seed,
        num_frames: a.frames,
        resolution: a.size,
    })?;
    save_dataset(&a.out, &person.dataset)?;
    save_model(&person.basis, a.out.join("model.fmm"))?;
    save_fit(&person.fit, a.out.join("fit.json"))?;
    let nmfc_dir = a.out.join("nmfc");
    fs::create_dir_all(&nmfc_dir).map_err(|e| Error::io(&nmfc_dir, e))?;
    for (t, img) in person.nmfcs.iter().enumerate() {
        save_nmfc(img, numbered(&nmfc_dir, t, "nmfc"))?;
        save_nmfc_png(img, numbered(&nmfc_dir, t, "png"))?;
    }
    println!(
        "wrote {} frames with landmarks, masks and conditioning images to {}",
        a.frames,
        a.out.display()
    );
    Ok(())
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let basis = load_model::<f64>(&a.model)?;
    let landmarks = load_landmarks::<f64>(&a.landmarks)?;
    let options = FitOptions {
        weights: EnergyWeights {
            w_l: a.w_landmark,
            w_pr: a.w_prior,
            w_sm: a.w_smooth,
        },
        box_constraints: BoxConstraints {
            k_id: a.box_k,
            k_exp: a.box_k,
        },
        max_outer_iters: a.max_iters,
        ..FitOptions::default()
    };
    let fit = fit_video(&basis, &landmarks, &options)?;
    save_fit(&fit, &a.out)?;
    if let Some(energy) = &fit.energy {
        println!(
            "fitted {} frames; energy {:.6e} (landmark {:.6e})",
            fit.num_frames(),
            energy.total,
            energy.landmark
        );
    }
    Ok(())
}

fn write_nmfc_sequence(
    basis: &reenact_core::ShapeBasis64,
    fit: &reenact_core::FitResult64,
    size: usize,
    out: &Path,
) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let frames = render_nmfc_sequence(basis, fit, size, size)?;
    for (t, img) in frames.iter().enumerate() {
        save_nmfc(img, numbered(out, t, "nmfc"))?;
        save_nmfc_png(img, numbered(out, t, "png"))?;
    }
    println!("wrote {} conditioning frames to {}", frames.len(), out.display());
    Ok(())
}

fn cmd_nmfc(a: &NmfcArgs) -> Result<()> {
    let basis = load_model::<f64>(&a.model)?;
    let fit = load_fit::<f64>(&a.fit)?;
    write_nmfc_sequence(&basis, &fit, a.size, &a.out)
}

fn cmd_reenact(a: &ReenactArgs) -> Result<()> {
    let basis = load_model::<f64>(&a.model)?;
    let source = load_fit::<f64>(&a.source_fit)?;
    let target = load_fit::<f64>(&a.target_fit)?;
    let transfer = transfer_params(&TransferSpec {
        source_fit: source,
        target_identity: target.identity,
        scale_policy: ScalePolicy::KeepSourceCamera,
    })?;
    write_nmfc_sequence(&basis, &transfer, a.size, &a.out)
}

fn load_clip(root: &Path, resolution: usize) -> Result<TrainClip> {
    let ds = load_dataset(root)?;
    let masks = ds
        .masks
        .as_ref()
        .ok_or_else(|| Error::Dataset(format!("{} has no masks", root.display())))?;
    let nmfc_dir = root.join("nmfc");
    let mut nmfcs: Vec<Tensor> = Vec::with_capacity(ds.len());
    for t in 0..ds.len() {
        let img = load_nmfc::<f64>(numbered(&nmfc_dir, t, "nmfc"))?;
        nmfcs.push(tensor_from_nmfc(&img));
    }
    let clip = TrainClip {
        frames: ds.frames.iter().map(tensor_from_rgb).collect(),
        nmfcs,
        masks: masks.iter().map(tensor_from_mask).collect(),
        landmarks: ds.landmarks.clone(),
    };
    if clip.frames.iter().any(|f| f.shape != [3, resolution, resolution]) {
        return Err(Error::Dataset(format!(
            "{} is not at the configured resolution {resolution}",
            root.display()
        )));
    }
    Ok(clip)
}

fn person_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Dataset(format!(
            "no person subdirectories in {}",
            root.display()
        )));
    }
    Ok(dirs)
}

fn cmd_train_init(cli: &Cli, a: &TrainInitArgs) -> Result<()> {
    let dirs = person_dirs(&a.data)?;
    let mut cfg = load_config(cli)?.unwrap_or_default();
    cfg.num_identities = dirs.len();
    cfg.person_specific = false;
    let clips: Vec<TrainClip> = dirs
        .iter()
        .map(|d| load_clip(d, cfg.resolution))
        .collect::<Result<_>>()?;
    eprintln!(
        "note: perceptual features use a frozen random conv stack and flow \
         uses block matching (stand-ins for pretrained networks)"
    );
    let opts = TrainOptions {
        steps: a.steps,
        seed: cli.seed,
        ..TrainOptions::default()
    };
    let (params, log) = train_init_stage(&clips, &cfg, &opts)?;
    save_gan_checkpoint(&a.out, &GanCheckpoint { config: cfg, params })?;
    if let Some(path) = &a.log {
        write_train_log(path, &log)?;
    }
    if let Some(last) = log.last() {
        println!(
            "trained {} steps over {} identities; final G loss {:.4}, D loss {:.4}",
            a.steps,
            dirs.len(),
            last.l_g_total,
            last.l_d
        );
    }
    Ok(())
}

fn cmd_finetune(cli: &Cli, a: &FinetuneArgs) -> Result<()> {
    let ckpt = load_gan_checkpoint(&a.checkpoint)?;
    let clip = load_clip(&a.data, ckpt.config.resolution)?;
    let (converted, pcfg) = if ckpt.config.person_specific {
        (ckpt.params, ckpt.config)
    } else {
        finetune_init(&ckpt.params, &ckpt.config, &clip.frames)?
    };
    let opts = TrainOptions {
        steps: a.steps,
        seed: cli.seed,
        ..TrainOptions::default()
    };
    let (params, log) = finetune_train(&converted, &pcfg, &clip, &opts)?;
    save_gan_checkpoint(&a.out, &GanCheckpoint { config: pcfg, params })?;
    if let Some(path) = &a.log {
        write_train_log(path, &log)?;
    }
    println!(
        "fine-tuned {} steps on {} frames; checkpoint at {}",
        a.steps,
        clip.frames.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    let ckpt = load_gan_checkpoint(&a.checkpoint)?;
    if !ckpt.config.person_specific {
        return Err(Error::InvalidArgument(
            "render needs a fine-tuned (person-specific) checkpoint".into(),
        ));
    }
    let mut nmfcs = Vec::new();
    let dir = &a.nmfc;
    while numbered(dir, nmfcs.len(), "nmfc").is_file() {
        let img = load_nmfc::<f64>(numbered(dir, nmfcs.len(), "nmfc"))?;
        nmfcs.push(tensor_from_nmfc(&img));
    }
    if nmfcs.is_empty() {
        return Err(Error::Dataset(format!(
            "no conditioning sidecars in {}",
            dir.display()
        )));
    }
    let (frames, masks) = rollout(&ckpt.params, &ckpt.config, &nmfcs, None)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mask_dir = a.out.join("masks");
    fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    for t in 0..frames.len() {
        rgb_from_tensor(&frames[t])?
            .save(numbered(&a.out, t, "png"))
            .map_err(Error::from)?;
        mask_from_tensor(&masks[t])?
            .save(numbered(&mask_dir, t, "png"))
            .map_err(Error::from)?;
    }
    println!("rendered {} frames to {}", frames.len(), a.out.display());
    Ok(())
}

fn load_pngs(dir: &Path) -> Result<Vec<image::RgbImage>> {
    let mut out = Vec::new();
    while numbered(dir, out.len(), "png").is_file() {
        out.push(image::open(numbered(dir, out.len(), "png"))?.to_rgb8());
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("no frames in {}", dir.display())));
    }
    Ok(out)
}

fn load_gray_pngs(dir: &Path) -> Result<Vec<image::GrayImage>> {
    let mut out = Vec::new();
    while numbered(dir, out.len(), "png").is_file() {
        out.push(image::open(numbered(dir, out.len(), "png"))?.to_luma8());
    }
    Ok(out)
}

fn cmd_metrics(a: &MetricsArgs) -> Result<()> {
    let fake = load_pngs(&a.fake)?;
    let real = load_pngs(&a.real)?;
    let gt = a.gt_masks.as_deref().map(load_gray_pngs).transpose()?;
    let pred = a.pred_masks.as_deref().map(load_gray_pngs).transpose()?;
    let report = sequence_metrics(&fake, &real, gt.as_deref(), pred.as_deref())?;
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(path) = &a.out {
        fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
