//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::info;

use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, SUITE_MODULES};
use crate::metrics::{consistency_strip, evaluate};
use crate::render::{render_view, Model};
use crate::scene::{generate_toy_scene, Dataset, Image, Manifest};
use crate::trainer::{Phase, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Gradient tolerance of the `gradcheck` command.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "voxray", version, about = "Voxel-grid radiance fields with a super-resolving conv decoder")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the seeded analytic toy scene (train/test/sweep manifests and PNGs).
    GenScene(GenSceneArgs),
    /// Pretrain the encoder, then train encoder and decoder jointly.
    Train(TrainArgs),
    /// Render full-resolution views of a checkpoint.
    Render(RenderArgs),
    /// Score a checkpoint against held-out views (PSNR, SSIM, bicubic baseline).
    Eval(EvalArgs),
    /// Run the 64-bit finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Stack one pixel column of every frame into a view-consistency strip.
    Strip(StripArgs),
}

#[derive(Args, Debug)]
pub struct GenSceneArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub views: usize,
    #[arg(long, default_value_t = 128)]
    pub res: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON config (profile plus overrides); desk profile when omitted.
    #[arg(long, conflicts_with = "resume")]
    pub config: Option<PathBuf>,
    /// Scene directory (uses transforms_train.json) or manifest file.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path, rewritten at every checkpoint interval and at the end.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint with its stored config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Render only this frame of the manifest.
    #[arg(long)]
    pub pose: Option<usize>,
    /// Camera manifest; defaults to `<data>/transforms_test.json`.
    #[arg(long, required_unless_present = "data")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Rays per chunk.
    #[arg(long, default_value_t = 4096)]
    pub chunk: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// JSON report path; the report goes to stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 4096)]
    pub chunk: usize,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(SUITE_MODULES))]
    pub module: Option<String>,
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
}

#[derive(Args, Debug)]
pub struct StripArgs {
    /// Directory of PNG frames, ordered by the number in their names.
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub column: usize,
    /// Segment height (default: full frame height).
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return EXIT_USAGE;
        }
        // Fails only if the pool was already set up (repeated in-process calls).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenScene(a) => {
            let scene = generate_toy_scene(&a.out, a.views, a.res, a.seed)?;
            info!(
                "wrote {} train, {} test and {} sweep poses to {}",
                scene.train.len(),
                scene.test.len(),
                scene.sweep.len(),
                a.out.display()
            );
        }
        Command::Train(a) => train(a)?,
        Command::Render(a) => render(a)?,
        Command::Eval(a) => {
            let model = Model::load(&a.ckpt)?;
            let ds = Dataset::load_split(&a.data, &a.split, model.scale())?;
            let report = evaluate(&model, &ds, a.chunk)?;
            match &a.report {
                Some(p) => {
                    report.write(p)?;
                    println!(
                        "psnr {:.3} ssim {:.4} bicubic_psnr {:.3} low_psnr {:.3}",
                        report.mean_psnr, report.mean_ssim, report.mean_psnr_bicubic, report.mean_psnr_low
                    );
                }
                None => println!("{}", report.to_json()?),
            }
        }
        Command::Gradcheck(a) => {
            let results = run_suite(a.module.as_deref(), a.instances)?;
            let mut ok = true;
            for r in &results {
                let pass = r.max_error < GRADCHECK_TOL;
                ok &= pass;
                println!(
                    "{:<8} {:<24} instances {:>3}  max_rel_err {:.3e}  {:.2}s  {}",
                    r.module,
                    r.name,
                    r.instances,
                    r.max_error,
                    r.seconds,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            return Ok(if ok { EXIT_OK } else { EXIT_RUNTIME });
        }
        Command::Strip(a) => {
            let frames = load_frames(&a.frames)?;
            let h = a.height.unwrap_or_else(|| frames.first().map_or(0, Image::height));
            consistency_strip(&frames, a.column, h)?.save_png(&a.out)?;
            info!("strip of {} frames written to {}", frames.len(), a.out.display());
        }
    }
    Ok(EXIT_OK)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(p) => {
            let t = Trainer::load(p)?;
            info!("resuming from {} at iteration {}", p.display(), t.global_step());
            t
        }
        None => {
            let config = match &a.config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::desk(),
            };
            let ds = Dataset::load(&a.data, config.scale)?;
            Trainer::new(config, &ds)?
        }
    };
    let ds = Dataset::load(&a.data, trainer.config.scale)?;
    info!(
        "{} views, {}x{} at upscale {}, {} pretrain + {} joint iterations",
        ds.views.len(),
        trainer.progress.width,
        trainer.progress.height,
        trainer.config.scale,
        trainer.config.pretrain_iters,
        trainer.config.joint_iters
    );
    trainer.run(&ds, Some(&a.out), None)?;
    debug_assert_eq!(trainer.progress.phase, Phase::Done);
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let manifest_path = match (&a.manifest, &a.data) {
        (Some(m), _) => m.clone(),
        (None, Some(d)) => d.join("transforms_test.json"),
        (None, None) => unreachable!("clap requires --manifest or --data"),
    };
    let manifest = Manifest::read(&manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let cams = manifest.cameras(base)?;
    let selected: Vec<usize> = match a.pose {
        Some(i) if i < cams.len() => vec![i],
        Some(i) => {
            return Err(Error::InvalidArgument(format!("pose {i} out of range; manifest has {} frames", cams.len())))
        }
        None => (0..cams.len()).collect(),
    };
    let model = Model::load(&a.ckpt)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for i in selected {
        let r = render_view(&model, &cams[i], a.chunk)?;
        let path = a.out.join(format!("r_{i}.png"));
        r.image.save_png(&path)?;
        info!("rendered pose {i} in {:.3}s -> {}", r.seconds, path.display());
    }
    Ok(())
}

/// PNGs of a directory ordered by the first run of digits in their names,
/// then by name.
pub fn load_frames(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    let key = |p: &PathBuf| {
        let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let digits: String = name.chars().skip_while(|c| !c.is_ascii_digit()).take_while(char::is_ascii_digit).collect();
        (digits.parse::<u64>().unwrap_or(u64::MAX), name)
    };
    paths.sort_by_key(key);
    paths.iter().map(|p| Image::load_png(p)).collect()
}
