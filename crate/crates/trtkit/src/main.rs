//! Command-line interface: dataset simulation, training, evaluation,
//! single-cube reconstruction, classical baselines, and a gradient audit.
//!
//! Exit codes: 0 on success, 2 for validation/configuration errors, 3 for
//! numerical failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trtkit::attention::load_checkpoint;
use trtkit::baselines::{log_matched_filter, raw_argmax};
use trtkit::data::{self, DepthUnit, TransientCube};
use trtkit::harness::{
    evaluate_los, evaluate_nlos, generate_nlos_dataset, gradcheck_suite, infer_los, infer_nlos,
    load_nlos_manifest, train, HarnessError, NlosSimConfig, Task, TrainConfig,
};
use trtkit::los_sim::{generate_los_dataset, load_manifest, LosSimConfig};
use trtkit::par;
use trtkit::pulse::PulseModel;

#[derive(Parser)]
#[command(
    name = "trtkit",
    version,
    about = "Transient-measurement simulation and reconstruction"
)]
struct Cli {
    /// Force sequential execution for bitwise-reproducible runs.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SimCommon {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON file with the full simulation config; flags override.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    bin_width_ps: Option<f64>,
    /// Mean signal photons per pixel.
    #[arg(long)]
    signal: Option<f64>,
    /// Mean background photons per pixel over the full window.
    #[arg(long)]
    background: Option<f64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainCommon {
    /// Dataset directory holding manifest.json.
    #[arg(long)]
    data: PathBuf,
    /// Optional JSON file with the full training config; flags override.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cap on samples per epoch.
    #[arg(long)]
    limit: Option<usize>,
    /// Checkpoint written after every epoch.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Where to write the JSON run report (stdout if omitted).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCommon {
    /// Dataset directory holding manifest.json.
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Where to write the JSON report (stdout if omitted).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a direct-view single-photon dataset.
    SimulateLos(SimCommon),
    /// Simulate a confocal hidden-scene dataset.
    SimulateNlos {
        #[command(flatten)]
        common: SimCommon,
        /// Side length of the scanned wall patch in meters.
        #[arg(long)]
        wall_extent_m: Option<f64>,
    },
    /// Train the direct-view reconstruction head.
    TrainLos(TrainCommon),
    /// Train the hidden-scene reconstruction head.
    TrainNlos(TrainCommon),
    /// Evaluate a trained direct-view model, grouped by photon budget.
    EvalLos(EvalCommon),
    /// Evaluate a trained hidden-scene model.
    EvalNlos(EvalCommon),
    /// Reconstruct depth from one measured direct-view cube.
    ReconstructLos {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Output 16-bit depth image (meters).
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct intensity and depth from one confocal hidden-scene cube.
    ReconstructNlos {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Prefix for `<prefix>_intensity.png` and `<prefix>_depth.png`.
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Classical depth estimators over a direct-view dataset.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        /// `lm` (log-matched filter) or `argmax`.
        #[arg(long)]
        method: String,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference audit of the gradient paths.
    Gradcheck,
}

fn load_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, HarnessError> {
    let f = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(f)?)
}

fn emit_json<T: serde::Serialize>(value: &T, path: &Option<PathBuf>) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn sim_los_config(c: &SimCommon) -> Result<LosSimConfig, HarnessError> {
    let mut cfg: LosSimConfig = match &c.config {
        Some(p) => load_json(p)?,
        None => LosSimConfig::default(),
    };
    if let Some(v) = c.height {
        cfg.height = v;
    }
    if let Some(v) = c.width {
        cfg.width = v;
    }
    if let Some(v) = c.bins {
        cfg.bins = v;
    }
    if let Some(v) = c.bin_width_ps {
        cfg.bin_width_ps = v;
    }
    if let Some(v) = c.signal {
        cfg.sbr.signal = v;
    }
    if let Some(v) = c.background {
        cfg.sbr.background = v;
    }
    if let Some(v) = c.count {
        cfg.count = v;
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    Ok(cfg)
}

fn sim_nlos_config(c: &SimCommon, wall: Option<f64>) -> Result<NlosSimConfig, HarnessError> {
    let mut cfg: NlosSimConfig = match &c.config {
        Some(p) => load_json(p)?,
        None => NlosSimConfig::default(),
    };
    if let Some(v) = c.height {
        cfg.height = v;
    }
    if let Some(v) = c.width {
        cfg.width = v;
    }
    if let Some(v) = c.bins {
        cfg.bins = v;
    }
    if let Some(v) = c.bin_width_ps {
        cfg.bin_width_ps = v;
    }
    if let Some(v) = c.signal {
        cfg.signal = v;
    }
    if let Some(v) = c.background {
        cfg.background = v;
    }
    if let Some(v) = c.count {
        cfg.count = v;
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = wall {
        cfg.wall_extent_m = v;
    }
    Ok(cfg)
}

fn train_config(c: &TrainCommon, task: Task) -> Result<TrainConfig, HarnessError> {
    let mut cfg: TrainConfig = match &c.config {
        Some(p) => load_json(p)?,
        None => match task {
            Task::Los => TrainConfig::los_default(&c.data),
            Task::Nlos => TrainConfig::nlos_default(&c.data),
        },
    };
    if cfg.task != task {
        return Err(HarnessError::InvalidConfig(
            "config file task does not match the subcommand".into(),
        ));
    }
    cfg.data_dir = c.data.clone();
    if let Some(v) = c.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = c.lr {
        cfg.lr = v;
    }
    if let Some(v) = c.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = c.lr_decay {
        cfg.lr_decay = v;
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if c.limit.is_some() {
        cfg.limit = c.limit;
    }
    if c.ckpt.is_some() {
        cfg.ckpt_path = c.ckpt.clone();
    }
    Ok(cfg)
}

/// Recover the training config stored in a checkpoint header.
fn checkpoint_config(
    path: &PathBuf,
) -> Result<(TrainConfig, trtkit::ad::ParameterSet), HarnessError> {
    let (config, params) = load_checkpoint(path)?;
    let cfg: TrainConfig = serde_json::from_value(config)?;
    Ok((cfg, params))
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    if cli.deterministic {
        par::set_sequential(true);
    }
    match cli.command {
        Command::SimulateLos(c) => {
            let cfg = sim_los_config(&c)?;
            let manifest = generate_los_dataset(&c.out, &cfg)?;
            eprintln!("wrote {} samples to {}", manifest.len(), c.out.display());
        }
        Command::SimulateNlos {
            common,
            wall_extent_m,
        } => {
            let cfg = sim_nlos_config(&common, wall_extent_m)?;
            let manifest = generate_nlos_dataset(&common.out, &cfg)?;
            eprintln!(
                "wrote {} samples to {}",
                manifest.len(),
                common.out.display()
            );
        }
        Command::TrainLos(c) => {
            let cfg = train_config(&c, Task::Los)?;
            let (_, report) = train(&cfg)?;
            emit_json(&report, &c.report)?;
        }
        Command::TrainNlos(c) => {
            let cfg = train_config(&c, Task::Nlos)?;
            let (_, report) = train(&cfg)?;
            emit_json(&report, &c.report)?;
        }
        Command::EvalLos(c) => {
            let (cfg, params) = checkpoint_config(&c.ckpt)?;
            let model = cfg
                .los
                .ok_or_else(|| HarnessError::InvalidConfig("checkpoint lacks a model".into()))?;
            let manifest = load_manifest(&c.data.join("manifest.json"))?;
            let report = evaluate_los(&params, &model, &manifest)?;
            emit_json(&report, &c.report)?;
        }
        Command::EvalNlos(c) => {
            let (cfg, params) = checkpoint_config(&c.ckpt)?;
            let model = cfg
                .nlos
                .ok_or_else(|| HarnessError::InvalidConfig("checkpoint lacks a model".into()))?;
            let manifest = load_nlos_manifest(&c.data.join("manifest.json"))?;
            let report = evaluate_nlos(&params, &model, &manifest)?;
            emit_json(&report, &c.report)?;
        }
        Command::ReconstructLos { cube, ckpt, out } => {
            let (cfg, params) = checkpoint_config(&ckpt)?;
            let model = cfg
                .los
                .ok_or_else(|| HarnessError::InvalidConfig("checkpoint lacks a model".into()))?;
            let cube = TransientCube::load(&cube)?;
            let input = trtkit::trt_los::cube_tensor(&cube);
            let pred = infer_los(&params, &model, &input, cube.bin_width_ps())?;
            let d = pred.depth_argmax; // meters
            data::save_gray16(&out, d.height(), d.width(), &d.values, Some(&d.valid), "m")?;
            eprintln!("wrote {}", out.display());
        }
        Command::ReconstructNlos {
            cube,
            ckpt,
            out_prefix,
        } => {
            let (cfg, params) = checkpoint_config(&ckpt)?;
            let model = cfg
                .nlos
                .ok_or_else(|| HarnessError::InvalidConfig("checkpoint lacks a model".into()))?;
            let cube = TransientCube::load(&cube)?;
            let input = trtkit::trt_los::cube_tensor(&cube);
            let pred = infer_nlos(&params, &model, &input, cube.bin_width_ps())?;
            // the volume's temporal axis is downsampled, so its bin width scales
            let coarse_ps = cube.bin_width_ps() * model.temporal_down as f64;
            let d = pred.depth_argmax.converted(DepthUnit::Meters, coarse_ps);
            let ip = out_prefix.with_file_name(format!(
                "{}_intensity.png",
                out_prefix.file_name().unwrap_or_default().to_string_lossy()
            ));
            let dp = out_prefix.with_file_name(format!(
                "{}_depth.png",
                out_prefix.file_name().unwrap_or_default().to_string_lossy()
            ));
            data::save_gray16(
                &ip,
                pred.intensity.height(),
                pred.intensity.width(),
                &pred.intensity.values,
                None,
                "albedo",
            )?;
            data::save_gray16(&dp, d.height(), d.width(), &d.values, Some(&d.valid), "m")?;
            eprintln!("wrote {} and {}", ip.display(), dp.display());
        }
        Command::Baseline {
            data: dir,
            method,
            report,
        } => {
            let manifest = load_manifest(&dir.join("manifest.json"))?;
            let kernel = PulseModel::default().combined_kernel(
                manifest
                    .first()
                    .map(|s| TransientCube::load(&s.cube_path).map(|c| c.bin_width_ps()))
                    .transpose()?
                    .unwrap_or(80.0),
            )?;
            #[derive(serde::Serialize)]
            struct BaselineReport {
                method: String,
                count: usize,
                mean_rmse_m: f64,
                mean_mad_m: f64,
            }
            let (mut rmse_sum, mut mad_sum, mut n) = (0.0, 0.0, 0usize);
            for s in &manifest {
                let cube = TransientCube::load(&s.cube_path)?;
                let pred = match method.as_str() {
                    "lm" => log_matched_filter(&cube, &kernel)
                        .converted(DepthUnit::Meters, cube.bin_width_ps()),
                    "argmax" => raw_argmax(&cube),
                    other => {
                        return Err(HarnessError::InvalidConfig(format!(
                            "unknown baseline method '{other}' (expected lm or argmax)"
                        )))
                    }
                };
                let (h, w, dvals, _) = data::load_gray16(&s.gt_depth_path)?;
                let valid: Vec<bool> = dvals.iter().map(|v| v.is_finite()).collect();
                let gt = data::DepthMap::new(h, w, dvals, valid, DepthUnit::Meters)?;
                rmse_sum += data::rmse(&pred, &gt)?;
                mad_sum += data::mad(&pred, &gt)?;
                n += 1;
            }
            let nf = n.max(1) as f64;
            emit_json(
                &BaselineReport {
                    method,
                    count: n,
                    mean_rmse_m: rmse_sum / nf,
                    mean_mad_m: mad_sum / nf,
                },
                &report,
            )?;
        }
        Command::Gradcheck => {
            let results = gradcheck_suite();
            let failed = results.iter().filter(|r| !r.pass).count();
            for r in &results {
                println!(
                    "{}: max rel err {:.3e} (tol {:.1e}) -> {}",
                    r.name,
                    r.max_rel_err,
                    r.tol,
                    if r.pass { "pass" } else { "FAIL" }
                );
            }
            if failed > 0 {
                return Err(HarnessError::Numerical(format!(
                    "{failed} gradient checks failed"
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
