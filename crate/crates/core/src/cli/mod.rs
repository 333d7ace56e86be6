//! `usrender` command line: `render`, `optimize`, `gradcheck`, `augment`.
//!
//! Exit codes: 0 ok, 1 configuration error, 2 runtime error, 3 non-finite
//! numerics, 4 gradient check failure.

mod config;
mod output;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::{load, AugmentSection, ConfigError, Overrides, Resolved, RunConfig, TaskKind, TaskSection};
pub use output::{read_raw, write_image, RawSidecar};

use crate::autodiff::{gradcheck, Fault, OpKind};
use crate::error::Error;
use crate::labelmap::{apply_transform, sample_transform, save_labelmap, Transform};
use crate::renderer::{render_with, ExecMode, RenderOutput};
use crate::tasks::{optimize_problem, Problem};
use crate::tissue::save_table;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_GRADCHECK: i32 = 4;

pub const THREADS_ENV: &str = "USRENDER_THREADS";

#[derive(Debug, Parser)]
#[command(name = "usrender", version, about = "Differentiable ultrasound B-mode renderer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Global seed; overrides `seed` in the file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 is bit-deterministic.
    #[arg(long, env = THREADS_ENV, default_value_t = 1)]
    pub threads: usize,
    /// Output directory; overrides `paths.out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override any config key, e.g. `--set render.beta=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the B-mode image and its sub-maps.
    Render(Common),
    /// Optimize the tissue table for the configured task.
    Optimize(Common),
    /// Compare autodiff gradients with central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        fd_step: Option<f64>,
        /// Scale the backward rule of one op (negative control).
        #[arg(long, hide = true, value_name = "OP")]
        corrupt_backward: Option<String>,
    },
    /// Write randomly transformed copies of the label map.
    Augment {
        #[command(flatten)]
        common: Common,
        /// Number of maps; overrides `augment.n`.
        #[arg(long)]
        n: Option<usize>,
    },
}

/// Failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn config(msg: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: msg.into(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::config(e.0)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite { .. } | Error::NonFiniteObjective { .. } | Error::Divergence { .. } => EXIT_NUMERIC,
            Error::Config(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<i32, Failure>;

/// Parse `std::env::args` and run; returns the process exit code.
pub fn run() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    match Cli::try_parse() {
        Ok(cli) => execute(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}

pub fn execute(cli: Cli) -> i32 {
    let threads = match &cli.command {
        Command::Render(c) | Command::Optimize(c) => c.threads,
        Command::Gradcheck { common, .. } | Command::Augment { common, .. } => common.threads,
    };
    if threads == 0 {
        eprintln!("error: --threads must be >= 1");
        return EXIT_CONFIG;
    }
    let result = if threads == 1 {
        dispatch(cli, ExecMode::Sequential)
    } else {
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(|| dispatch(cli, ExecMode::Parallel)),
            Err(e) => Err(Failure {
                code: EXIT_RUNTIME,
                message: format!("cannot start thread pool: {e}"),
            }),
        }
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cli: Cli, mode: ExecMode) -> CmdResult {
    match cli.command {
        Command::Render(c) => cmd_render(&resolve(&c)?, mode),
        Command::Optimize(c) => cmd_optimize(&resolve(&c)?, mode),
        Command::Gradcheck {
            common,
            tol,
            fd_step,
            corrupt_backward,
        } => {
            let mut r = resolve(&common)?;
            if let Some(t) = tol {
                r.gradcheck.tol = t;
            }
            if let Some(h) = fd_step {
                r.gradcheck.fd_step = h;
            }
            let fault = corrupt_backward
                .map(|name| {
                    OpKind::from_name(&name)
                        .map(|op| Fault { op, factor: 1.5 })
                        .ok_or_else(|| Failure::config(format!("--corrupt-backward: unknown op `{name}`")))
                })
                .transpose()?;
            cmd_gradcheck(&r, mode, fault)
        }
        Command::Augment { common, n } => {
            let mut r = resolve(&common)?;
            if let Some(n) = n {
                r.augment.n = n;
            }
            cmd_augment(&r)
        }
    }
}

fn resolve(c: &Common) -> std::result::Result<Resolved, Failure> {
    let ov = Overrides {
        seed: c.seed,
        out: c.out.clone(),
        set: c.set.clone(),
    };
    Ok(load(&c.config, &ov)?)
}

fn create_dir(dir: &Path) -> std::result::Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure {
        code: EXIT_RUNTIME,
        message: format!("{}: {e}", dir.display()),
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> std::result::Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

/// Names of the image artifacts written for each render.
pub const RENDER_OUTPUTS: [&str; 5] = ["bmode", "attenuation", "reflection", "scatter", "transmission"];

fn write_render(dir: &Path, out: &RenderOutput) -> std::result::Result<(), Failure> {
    create_dir(dir)?;
    let grids = [
        &out.bmode,
        &out.attenuation_map,
        &out.reflection_map,
        &out.scatter_map,
        &out.transmission_map,
    ];
    for (name, grid) in RENDER_OUTPUTS.iter().zip(grids) {
        write_image(dir, name, grid)?;
    }
    Ok(())
}

pub fn cmd_render(r: &Resolved, mode: ExecMode) -> CmdResult {
    let out = render_with(&r.map, &r.table, &r.render, mode)?;
    write_render(&r.out_dir, &out)?;
    write_file(&r.out_dir.join("config.resolved.toml"), r.snapshot())?;
    println!("wrote {} images to {}", RENDER_OUTPUTS.len(), r.out_dir.display());
    Ok(EXIT_OK)
}

pub fn cmd_optimize(r: &Resolved, mode: ExecMode) -> CmdResult {
    r.optim.validate()?;
    let task = r.task()?;
    let problem = Problem::new(&r.map, &r.render, task, r.table.len())?.with_mode(mode);
    create_dir(&r.out_dir)?;
    write_file(&r.out_dir.join("config.resolved.toml"), r.snapshot())?;
    write_render(&r.out_dir.join("initial"), &render_with(&r.map, &r.table, &r.render, mode)?)?;

    let (table, history) = optimize_problem(&problem, &r.table, &r.optim, |rec| {
        if rec.step % 100 == 0 {
            log::info!("step {} loss {:.6e} |grad| {:.3e}", rec.step, rec.loss, rec.grad_norm);
        }
    })?;
    save_table(&table, &r.out_dir.join("table.optimized.toml"))?;
    write_file(&r.out_dir.join("history.csv"), history.to_csv())?;
    write_render(&r.out_dir.join("final"), &render_with(&r.map, &table, &r.render, mode)?)?;

    let initial = history.initial_loss().unwrap_or(f64::NAN);
    let best = history.best_loss().unwrap_or(f64::NAN);
    println!("initial loss: {initial:.9e}");
    println!("final loss: {best:.9e}");
    println!("steps: {} (best at step {})", history.records.len(), history.best_step);
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(r: &Resolved, mode: ExecMode, fault: Option<Fault>) -> CmdResult {
    let task = r.task()?;
    let problem = Problem::new(&r.map, &r.render, task, r.table.len())?
        .with_mode(mode)
        .with_fault(fault);
    let theta = crate::tissue::flatten(&r.table);
    let report = gradcheck(&problem, theta.as_slice(), r.gradcheck)?;
    create_dir(&r.out_dir)?;
    write_file(&r.out_dir.join("gradcheck.json"), report.to_json())?;
    print!("{}", report.to_text());
    if report.passed {
        Ok(EXIT_OK)
    } else {
        eprintln!("gradcheck failed; worst coordinates:");
        for c in report.worst(5) {
            eprintln!(
                "  {:<20} analytic {:.6e} numeric {:.6e} rel_err {:.3e}",
                c.name, c.analytic, c.numeric, c.rel_error
            );
        }
        Ok(EXIT_GRADCHECK)
    }
}

#[derive(Debug, Serialize)]
struct AugmentRecord {
    file: String,
    seed: u64,
    transform: Transform,
}

#[derive(Debug, Serialize)]
struct AugmentIndex {
    source: PathBuf,
    fill_label: u8,
    records: Vec<AugmentRecord>,
}

pub fn cmd_augment(r: &Resolved) -> CmdResult {
    let spec = r.augment.spec();
    spec.validate(r.table.len())?;
    create_dir(&r.out_dir)?;
    let ext = match r.labelmap_format {
        crate::labelmap::LabelFormat::Pgm8 => "pgm",
        crate::labelmap::LabelFormat::Png8 => "png",
        crate::labelmap::LabelFormat::Csv => "csv",
    };
    let mut records = Vec::with_capacity(r.augment.n);
    for i in 0..r.augment.n {
        let seed = spec.seed.wrapping_add(i as u64);
        let t = sample_transform(&spec, seed);
        let file = format!("aug_{i:04}.{ext}");
        save_labelmap(&apply_transform(&r.map, &t, spec.fill_label), &r.out_dir.join(&file), r.labelmap_format)?;
        records.push(AugmentRecord { file, seed, transform: t });
    }
    let index = AugmentIndex {
        source: r.labelmap_path.clone(),
        fill_label: spec.fill_label,
        records,
    };
    write_file(
        &r.out_dir.join("index.json"),
        serde_json::to_string_pretty(&index).expect("index serializes"),
    )?;
    write_file(&r.out_dir.join("config.resolved.toml"), r.snapshot())?;
    println!("wrote {} augmented maps to {}", r.augment.n, r.out_dir.display());
    Ok(EXIT_OK)
}
