use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use hvpr::config::{RunConfig, SynthJob};
use hvpr::gradsuite::{broken_gradient_fixture, run_gradcheck, suite_options, SuiteShapes};
use hvpr::pipeline::{run_eval, run_infer, run_train, synthetic_scenes, write_kitti_dir};
use hvpr::scene::parse_velodyne_bin;
use hvpr::HvprError;

/// Hybrid voxel-point LiDAR car detector.
#[derive(Parser)]
#[command(name = "hvpr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config; writes metrics.jsonl and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Score a checkpoint on a KITTI-layout directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Detect cars in one velodyne `.bin` scan.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Append a deliberately wrong gradient to the run.
        #[arg(long, hide = true)]
        inject_broken: bool,
    },
    /// Write synthetic scenes in KITTI layout.
    SynthGen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Raised when gradient checks fail; maps to the numeric exit code.
#[derive(Debug)]
struct GradFailure(usize);

impl std::fmt::Display for GradFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} gradient check(s) failed", self.0)
    }
}

impl std::error::Error for GradFailure {}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| HvprError::io(path, e).into())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| HvprError::io(path, e).into())
}

fn train(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = RunConfig::from_toml(&read_text(config)?)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let outcome = run_train(&cfg, Some(out))?;
    if let Some(last) = outcome.records.last() {
        println!(
            "step {} total {:.6} reg {:.6} dir {:.6} cls {:.6} mem {:.6}",
            last.step, last.total, last.reg, last.dir, last.cls, last.mem
        );
    }
    println!("checkpoint {}", out.join("final.ckpt").display());
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, json: Option<&Path>) -> Result<()> {
    let report = run_eval(&read(ckpt)?, data)?;
    print!("{}", report.to_text());
    if let Some(path) = json {
        fs::write(path, report.to_json()).map_err(|e| HvprError::io(path, e))?;
    }
    Ok(())
}

fn infer(ckpt: &Path, scene: &Path) -> Result<()> {
    let cloud = parse_velodyne_bin(&read(scene)?)?;
    for d in run_infer(&read(ckpt)?, &cloud)? {
        let b = d.bbox;
        println!(
            "Car {:.4} {:.4} {:.4} {:.4} {:.4} {:.4} {:.4} {:.4}",
            b.center[0],
            b.center[1],
            b.center[2],
            b.size[0],
            b.size[1],
            b.size[2],
            b.heading,
            d.score
        );
    }
    Ok(())
}

fn gradcheck(config: &Path, inject_broken: bool) -> Result<()> {
    let cfg = RunConfig::from_toml(&read_text(config)?)?;
    let options = suite_options();
    let mut reports = run_gradcheck(cfg.seed, &SuiteShapes::from_config(&cfg), &options)?;
    if inject_broken {
        reports.push(broken_gradient_fixture(&options)?);
    }
    for r in &reports {
        println!(
            "{} {} rel={:.3e} abs={:.3e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.op_name,
            r.max_rel_error,
            r.max_abs_error
        );
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} ops checked, {failed} failed", reports.len());
    if failed > 0 {
        return Err(GradFailure(failed).into());
    }
    Ok(())
}

fn synth_gen(spec: &Path, out: &Path) -> Result<()> {
    let job = SynthJob::from_toml(&read_text(spec)?)?;
    let scenes = synthetic_scenes(&job)?;
    write_kitti_dir(out, &scenes)?;
    println!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<GradFailure>().is_some() {
        return 3;
    }
    match err.downcast_ref::<HvprError>() {
        Some(e) => e.exit_code() as u8,
        None => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Train { config, seed, out } => {
            train(config, *seed, out).with_context(|| format!("training from {}", config.display()))
        }
        Command::Eval { ckpt, data, json } => eval(ckpt, data, json.as_deref()),
        Command::Infer { ckpt, scene } => infer(ckpt, scene),
        Command::Gradcheck {
            config,
            inject_broken,
        } => gradcheck(config, *inject_broken),
        Command::SynthGen { spec, out } => synth_gen(spec, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
