//! Command-line entry point.
//!
//! Exit status: 0 success, 2 usage, 3 input file, 4 numerical failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use cyclesketch_core::train::{LossTerms, TrainObserver};
use cyclesketch_core::{IntegratorConfig, Method, Region2};

use crate::checkpoint::{load_model, save_model, write_atomic};
use crate::error::{AppError, AppResult};
use crate::formats::{read_camera, read_config, read_plane, read_sketch, read_target, ConfigJson};
use crate::pipeline;

#[derive(Debug, Parser)]
#[command(name = "cyclesketch", version, about = "Teach a stable limit cycle by sketching it")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Rk4,
    Euler,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Rk4 => Method::Rk4,
            MethodArg::Euler => Method::Euler,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trace sketch pixels onto the surface and normalize them.
    Project {
        #[arg(long)]
        sketch: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        plane: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model whose limit cycle matches a projected target.
    Train {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Print the loss to standard error every N epochs.
        #[arg(long, value_name = "N")]
        progress: Option<usize>,
    },
    /// Integrate the learned system from one start state.
    Rollout {
        #[arg(long)]
        model: PathBuf,
        /// Start state "x,y,z" in surface-plane units.
        #[arg(long, value_parser = parse_triple, allow_hyphen_values = true)]
        start: [f64; 3],
        #[arg(long, default_value_t = 50.0)]
        duration: f64,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long, value_enum, default_value_t = MethodArg::Rk4)]
        method: MethodArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score rollouts from seeded starts against a target.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 3)]
        starts: usize,
        /// Seed of the start-state stream; defaults to the training seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 50.0)]
        duration: f64,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Export the learned field on the surface as CSV.
    Field {
        #[arg(long)]
        model: PathBuf,
        /// Box "x0,z0,x1,z1" in surface-plane units.
        #[arg(long, value_parser = parse_quad, allow_hyphen_values = true)]
        region: [f64; 4],
        #[arg(long)]
        res: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        /// Directory where trained models are also written.
        #[arg(long)]
        models: Option<PathBuf>,
    },
}

fn parse_numbers<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(format!("expected {N} comma-separated numbers"));
    }
    let mut out = [0.0f64; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("{p:?} is not a number"))?;
        if !o.is_finite() {
            return Err(format!("{p:?} is not finite"));
        }
    }
    Ok(out)
}

fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    parse_numbers::<3>(s)
}

fn parse_quad(s: &str) -> Result<[f64; 4], String> {
    parse_numbers::<4>(s)
}

fn write_file(path: &Path, text: &str) -> AppResult<()> {
    write_atomic(path, text.as_bytes()).map_err(|e| AppError::io(path, e))
}

struct Progress {
    every: usize,
}

impl TrainObserver for Progress {
    fn on_epoch(&mut self, epoch: usize, loss: &LossTerms) {
        if epoch % self.every == 0 {
            eprintln!("epoch {epoch}: loss {:.6} (hausdorff {:.6})", loss.total, loss.hausdorff);
        }
    }
}

fn integrator(method: Method, step: f64, duration: f64) -> AppResult<IntegratorConfig> {
    IntegratorConfig::new(method, step, duration).map_err(|e| AppError::Usage(e.to_string()))
}

pub fn execute(command: Command) -> AppResult<()> {
    match command {
        Command::Project { sketch, camera, plane, out } => {
            let sketch = read_sketch(&sketch)?;
            let camera = read_camera(&camera)?;
            let (plane, hint) = read_plane(&plane)?;
            let target = pipeline::project(&camera, &sketch, &plane, hint)?;
            write_file(&out, &target.to_json())
        }
        Command::Train { target, config, out, seed, epochs, progress } => {
            let target = read_target(&target)?;
            let mut cfg = match &config {
                Some(path) => read_config(path)?,
                None => ConfigJson::default(),
            };
            if seed.is_some() {
                cfg.seed = seed;
            }
            if epochs.is_some() {
                cfg.epochs = epochs;
            }
            let run = cfg.resolve().map_err(|e| match &config {
                Some(path) => AppError::format(path, e),
                None => AppError::Usage(e.to_string()),
            })?;
            let ckpt = match progress {
                Some(every) if every > 0 => pipeline::train_model(&target, &run, &mut Progress { every })?,
                _ => pipeline::train_model(&target, &run, &mut ())?,
            };
            save_model(&ckpt, &out)?;
            Ok(())
        }
        Command::Rollout { model, start, duration, step, method, out } => {
            let ckpt = load_model(&model)?;
            let cfg = integrator(method.into(), step, duration)?;
            let traj = pipeline::rollout(&ckpt, start, &cfg)?;
            write_file(&out, &pipeline::trajectory_csv(&traj))
        }
        Command::Eval { model, target, starts, seed, duration, step, report } => {
            let ckpt = load_model(&model)?;
            let target = read_target(&target)?;
            let cfg = integrator(Method::Rk4, step, duration)?;
            let seed = seed.unwrap_or(ckpt.training.seed);
            let r = pipeline::evaluate(&ckpt, &target, starts, seed, &cfg)?;
            write_file(&report, &r.to_json())
        }
        Command::Field { model, region, res, out } => {
            let ckpt = load_model(&model)?;
            let region = Region2::new([region[0], region[1]], [region[2], region[3]])
                .map_err(|e| AppError::Usage(e.to_string()))?;
            if res == 0 {
                return Err(AppError::Usage("--res must be positive".into()));
            }
            let grid = pipeline::field(&ckpt, &region, res)?;
            write_file(&out, &pipeline::field_csv(&grid))
        }
        Command::Serve { port, static_dir, models } => {
            let runtime = tokio::runtime::Runtime::new().map_err(|e| AppError::Input(e.to_string()))?;
            runtime.block_on(crate::service::serve(port, static_dir, models))
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_lists() {
        assert_eq!(parse_triple("1, -2.5,3").unwrap(), [1.0, -2.5, 3.0]);
        assert!(parse_triple("1,2").is_err());
        assert!(parse_triple("1,2,x").is_err());
        assert!(parse_quad("0,0,1,inf").is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["cyclesketch", "train", "--bogus"]), 2);
        assert_eq!(run(["cyclesketch"]), 2);
        assert_eq!(run(["cyclesketch", "rollout", "--model", "m", "--start", "1,2", "--out", "o"]), 2);
    }

    #[test]
    fn missing_input_exits_3() {
        assert_eq!(run(["cyclesketch", "eval", "--model", "/nonexistent", "--target", "t", "--report", "r"]), 3);
    }
}
