mod io;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use aberration_core::adapt::{refine, trace_to_csv, Objective, RefineConfig};
use aberration_core::hyper::{load_hyper_map, save_hyper_map, schedules_from, HyperParamMap, ScheduleSpec};
use aberration_core::metrics::{benchmark, psnr, reports_to_csv, reports_to_json, Scene};
use aberration_core::projector::{load_weights, Projector};
use aberration_core::psf::{load_psf_map, save_psf_map, synth_gaussian_map, GaussianMapSpec, PsfMap};
use aberration_core::solver::{solve, SolverConfig, DEFAULT_STAGES};
use aberration_core::{degrade, synthetic, Image, NoiseSpec};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::io::{load_png, save_png, BitDepth};
use crate::manifest::RunManifest;

#[derive(Parser)]
#[command(name = "aberration", version, about = "Correct spatially-varying lens blur with patch-wise deconvolution")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a grid of anisotropic Gaussian PSFs.
    SynthPsf(SynthPsfArgs),
    /// Blur an image with a PSF map and add noise.
    Degrade(DegradeArgs),
    /// Restore a degraded image.
    Deconv(DeconvArgs),
    /// Refine per-cell mu/lambda maps on calibration pairs.
    Refine(RefineArgs),
    /// Score restorations against ground truth.
    Eval(EvalArgs),
}

#[derive(Args, Serialize)]
struct SynthPsfArgs {
    #[arg(long, default_value_t = 16)]
    rows: usize,
    #[arg(long, default_value_t = 16)]
    cols: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 25)]
    size: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma_min: f64,
    #[arg(long, default_value_t = 3.0)]
    sigma_max: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Serialize)]
struct DegradeArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long)]
    psf: PathBuf,
    /// `none` or `gaussian:SIGMA[:seed=N]`.
    #[arg(long, default_value = "none")]
    noise: String,
    /// Output bit depth; defaults to the input's.
    #[arg(long, value_enum)]
    bit_depth: Option<BitDepth>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ProjectorKind {
    Identity,
    Tv,
    Cnn,
}

#[derive(Args, Serialize)]
struct SolverArgs {
    #[arg(long, value_enum, default_value = "tv")]
    projector: ProjectorKind,
    /// UABC weight file for `--projector cnn`.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = aberration_core::projector::DEFAULT_TV_ITERATIONS)]
    tv_iters: usize,
    #[arg(long, default_value_t = DEFAULT_STAGES)]
    stages: usize,
    /// HPMV file overriding the default schedules.
    #[arg(long)]
    hpm: Option<PathBuf>,
    #[arg(long, default_value_t = ScheduleSpec::default().mu_first)]
    mu_first: f64,
    #[arg(long, default_value_t = ScheduleSpec::default().mu_last)]
    mu_last: f64,
    #[arg(long, default_value_t = ScheduleSpec::default().lambda_first)]
    lambda_first: f64,
    #[arg(long, default_value_t = ScheduleSpec::default().lambda_last)]
    lambda_last: f64,
    /// Patch padding in pixels; defaults to the kernel radius.
    #[arg(long)]
    pad: Option<usize>,
}

impl SolverArgs {
    fn projector(&self) -> Result<Projector> {
        Ok(match self.projector {
            ProjectorKind::Identity => Projector::Identity,
            ProjectorKind::Tv => Projector::Tv {
                iterations: self.tv_iters,
            },
            ProjectorKind::Cnn => {
                let path = self.weights.as_ref().context("--projector cnn needs --weights")?;
                let weights = load_weights(path).with_context(|| format!("loading {}", path.display()))?;
                Projector::Cnn(Arc::new(weights))
            }
        })
    }

    fn schedules(&self, psf: &PsfMap) -> Result<HyperParamMap> {
        match &self.hpm {
            Some(path) => load_hyper_map(path).with_context(|| format!("loading {}", path.display())),
            None => Ok(schedules_from(
                self.stages,
                psf,
                &ScheduleSpec {
                    mu_first: self.mu_first,
                    mu_last: self.mu_last,
                    lambda_first: self.lambda_first,
                    lambda_last: self.lambda_last,
                },
            )?),
        }
    }

    fn config(&self, psf: &PsfMap) -> Result<SolverConfig> {
        let schedules = self.schedules(psf)?;
        Ok(SolverConfig {
            stages: schedules.stages,
            pad: self.pad,
            schedules,
            projector: self.projector()?,
        })
    }
}

#[derive(Args, Serialize)]
struct DeconvArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long)]
    psf: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, value_enum)]
    bit_depth: Option<BitDepth>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Serialize)]
struct SceneArgs {
    /// `DEGRADED.png,SHARP.png`; repeatable.
    #[arg(long = "pair")]
    pairs: Vec<String>,
    /// Generate this many synthetic scenes instead of (or besides) --pair.
    #[arg(long, default_value_t = 0)]
    synthetic: usize,
    #[arg(long, default_value_t = 256)]
    scene_height: usize,
    #[arg(long, default_value_t = 256)]
    scene_width: usize,
    /// Noise added to synthetic scenes.
    #[arg(long, default_value = "gaussian:0.01:seed=1")]
    noise: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SceneArgs {
    fn load(&self, psf: &PsfMap) -> Result<Vec<Scene>> {
        let mut scenes = Vec::new();
        for pair in &self.pairs {
            let (blurred, sharp) = pair
                .split_once(',')
                .with_context(|| format!("--pair `{pair}` must be DEGRADED,SHARP"))?;
            let degraded = load_png(Path::new(blurred), psf.channels)?.image;
            let sharp_img = load_png(Path::new(sharp), psf.channels)?.image;
            let name = Path::new(blurred)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| blurred.to_string());
            scenes.push(Scene {
                name,
                degraded,
                sharp: sharp_img,
            });
        }
        let noise: NoiseSpec = self.noise.parse()?;
        for i in 0..self.synthetic {
            let seed = self.seed.wrapping_add(i as u64);
            let mut sharp = synthetic::scene(self.scene_height, self.scene_width, seed);
            if psf.channels == 1 {
                sharp = sharp.mean_axis(ndarray::Axis(0)).expect("3 channels").insert_axis(ndarray::Axis(0));
            }
            let degraded = degrade(
                &sharp,
                psf,
                &NoiseSpec {
                    seed: noise.seed.wrapping_add(i as u64),
                    ..noise
                },
            )?;
            scenes.push(Scene {
                name: format!("synthetic-{i}"),
                degraded,
                sharp,
            });
        }
        if scenes.is_empty() {
            bail!("no scenes: pass --pair or --synthetic");
        }
        Ok(scenes)
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ObjectiveArg {
    Psnr,
    L1,
}

#[derive(Args, Serialize)]
struct RefineArgs {
    #[arg(long)]
    psf: PathBuf,
    #[command(flatten)]
    scenes: SceneArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, default_value_t = RefineConfig::default().max_iters)]
    max_iters: usize,
    #[arg(long, default_value_t = RefineConfig::default().step_factor)]
    step_factor: f64,
    #[arg(long, default_value_t = RefineConfig::default().patience)]
    patience: usize,
    #[arg(long, value_enum, default_value = "psnr")]
    objective: ObjectiveArg,
    /// Refined HPMV map.
    #[arg(short, long)]
    output: PathBuf,
    /// Objective trace CSV; defaults to `<output>.trace.csv`.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    psf: PathBuf,
    #[command(flatten)]
    scenes: SceneArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// CSV report; a JSON mirror is written next to it.
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    json: Option<PathBuf>,
}

fn load_psf(path: &Path) -> Result<PsfMap> {
    load_psf_map(path).with_context(|| format!("loading {}", path.display()))
}

fn cmd_synth_psf(args: &SynthPsfArgs) -> Result<()> {
    let spec = GaussianMapSpec {
        rows: args.rows,
        cols: args.cols,
        channels: args.channels,
        size: args.size,
        sigma_min: args.sigma_min,
        sigma_max: args.sigma_max,
        seed: args.seed,
    };
    let map = synth_gaussian_map(&spec)?;
    save_psf_map(&map, &args.output).with_context(|| format!("writing {}", args.output.display()))?;
    let mut m = RunManifest::new("synth-psf", args)?;
    m.seed = Some(args.seed);
    m.outputs.push(args.output.clone());
    m.write_next_to(&args.output)?;
    Ok(())
}

fn cmd_degrade(args: &DegradeArgs) -> Result<()> {
    let psf = load_psf(&args.psf)?;
    let noise: NoiseSpec = args.noise.parse()?;
    let input = load_png(&args.input, psf.channels)?;
    let y = degrade(&input.image, &psf, &noise)?;
    save_png(&args.output, &y, args.bit_depth.unwrap_or(input.depth))?;
    let mut m = RunManifest::new("degrade", args)?;
    m.seed = Some(noise.seed);
    m.inputs = vec![args.input.clone(), args.psf.clone()];
    m.outputs.push(args.output.clone());
    m.write_next_to(&args.output)?;
    Ok(())
}

fn cmd_deconv(args: &DeconvArgs) -> Result<()> {
    let psf = load_psf(&args.psf)?;
    let input = load_png(&args.input, psf.channels)?;
    let config = args.solver.config(&psf)?;
    let x = solve(&input.image, &psf, &config)?;
    save_png(&args.output, &x, args.bit_depth.unwrap_or(input.depth))?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        args: &'a DeconvArgs,
        stages: usize,
        projector: &'static str,
        mu: &'a [f32],
        lambda: &'a [f32],
    }
    let mut m = RunManifest::new(
        "deconv",
        Resolved {
            args,
            stages: config.stages,
            projector: config.projector.name(),
            mu: &config.schedules.mu,
            lambda: &config.schedules.lambda,
        },
    )?;
    m.inputs = vec![args.input.clone(), args.psf.clone()];
    m.inputs.extend(args.solver.weights.clone());
    m.inputs.extend(args.solver.hpm.clone());
    m.outputs.push(args.output.clone());
    m.write_next_to(&args.output)?;
    Ok(())
}

fn cmd_refine(args: &RefineArgs) -> Result<()> {
    let psf = load_psf(&args.psf)?;
    let scenes = args.scenes.load(&psf)?;
    let config = args.solver.config(&psf)?;
    let pairs: Vec<(Image, Image)> = scenes.into_iter().map(|s| (s.degraded, s.sharp)).collect();
    let refine_config = RefineConfig {
        max_iters: args.max_iters,
        step_factor: args.step_factor,
        patience: args.patience,
        objective: match args.objective {
            ObjectiveArg::Psnr => Objective::Psnr,
            ObjectiveArg::L1 => Objective::L1,
        },
        ..Default::default()
    };
    let outcome = refine(&psf, &pairs, &config.schedules, &refine_config, &config.projector)?;
    save_hyper_map(&outcome.map, &args.output).with_context(|| format!("writing {}", args.output.display()))?;
    let trace_path = args.trace.clone().unwrap_or_else(|| {
        let mut p = args.output.as_os_str().to_owned();
        p.push(".trace.csv");
        PathBuf::from(p)
    });
    std::fs::write(&trace_path, trace_to_csv(&outcome.trace))
        .with_context(|| format!("writing {}", trace_path.display()))?;
    eprintln!(
        "objective {:.4} -> {:.4} ({} accepted moves)",
        outcome.initial_objective,
        outcome.objective,
        outcome.accepted_moves()
    );

    #[derive(Serialize)]
    struct Resolved<'a> {
        args: &'a RefineArgs,
        refine: &'a RefineConfig,
        initial_objective: f64,
        objective: f64,
    }
    let mut m = RunManifest::new(
        "refine",
        Resolved {
            args,
            refine: &refine_config,
            initial_objective: outcome.initial_objective,
            objective: outcome.objective,
        },
    )?;
    m.seed = Some(args.scenes.seed);
    m.inputs.push(args.psf.clone());
    m.outputs = vec![args.output.clone(), trace_path];
    m.write_next_to(&args.output)?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let psf = load_psf(&args.psf)?;
    let scenes = args.scenes.load(&psf)?;
    let config = args.solver.config(&psf)?;
    let reports = benchmark(&scenes, &psf, &config)?;
    for (scene, report) in scenes.iter().zip(&reports) {
        eprintln!(
            "{}: {:.3} dB (input {:.3} dB), ssim {:.4}, {:.0} ms",
            report.scene,
            report.psnr_db,
            psnr(&scene.degraded, &scene.sharp, 1.0)?,
            report.ssim,
            report.wall_time_ms
        );
    }
    std::fs::write(&args.output, reports_to_csv(&reports))
        .with_context(|| format!("writing {}", args.output.display()))?;
    let json = args
        .json
        .clone()
        .unwrap_or_else(|| args.output.with_extension("json"));
    std::fs::write(&json, reports_to_json(&reports) + "\n").with_context(|| format!("writing {}", json.display()))?;
    let mut m = RunManifest::new("eval", args)?;
    m.seed = Some(args.scenes.seed);
    m.inputs.push(args.psf.clone());
    m.outputs = vec![args.output.clone(), json];
    m.write_next_to(&args.output)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::SynthPsf(a) => cmd_synth_psf(a),
        Command::Degrade(a) => cmd_degrade(a),
        Command::Deconv(a) => cmd_deconv(a),
        Command::Refine(a) => cmd_refine(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
