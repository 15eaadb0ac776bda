use clap::{Args, Parser, Subcommand};
use monodomain::app::{self, AppError};
use monodomain::bench::{self, BdfStudyConfig, BenchError, SpectralStudyConfig, SweepPlan};
use monodomain::config::{ConfigError, RunConfig};
use monodomain::mesh::DofMap;
use monodomain::post::write_vtk;
use monodomain::stepper::PreconditionerKind;
use monodomain::{Bdf, Flavor, SolverMode};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "monodomain", version, about = "Matrix-free spectral-element monodomain solver")]
struct Cli {
    /// Worker threads (default: SOLVER_THREADS, then the config, then physical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write its output directory.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "output")]
        output_dir: PathBuf,
    },
    /// Run a sweep plan and write runs.jsonl plus the summary tables.
    Sweep {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, default_value = "sweep")]
        output_dir: PathBuf,
    },
    /// Temporal order study on the manufactured heat problem.
    BdfStudy {
        /// TOML file with study overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "bdf-study")]
        output_dir: PathBuf,
    },
    /// Degree and mesh refinement study of the shifted elliptic operator.
    SpectralStudy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "spectral-study")]
        output_dir: PathBuf,
    },
    /// Write the node lattice of the configured mesh as legacy VTK.
    ExportMesh {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "output")]
        output_dir: PathBuf,
    },
    /// Print the resolved configuration as TOML.
    EmitConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Polynomial degree.
    #[arg(long)]
    p: Option<usize>,
    /// Cells per axis, e.g. 36,12,6.
    #[arg(long, value_parser = parse_cells)]
    cells: Option<[usize; 3]>,
    /// Time step in ms.
    #[arg(long)]
    dt: Option<f64>,
    /// bdf1, bdf2 or bdf3.
    #[arg(long)]
    scheme: Option<Bdf>,
    /// lg or lgl.
    #[arg(long)]
    flavor: Option<Flavor>,
    /// mf or mb.
    #[arg(long)]
    solver: Option<SolverMode>,
    /// none, gmg or jacobi.
    #[arg(long)]
    precond: Option<PreconditionerKind>,
}

fn parse_cells(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<Result<_, _>>()?;
    <[usize; 3]>::try_from(v).map_err(|v| format!("expected three comma-separated counts, got {}", v.len()))
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(p) = self.p {
            c.mesh.degree = p;
        }
        if let Some(cells) = self.cells {
            c.mesh.cells = cells;
        }
        if let Some(dt) = self.dt {
            c.time.dt = dt;
        }
        if let Some(s) = self.scheme {
            c.time.scheme = s;
        }
        if let Some(f) = self.flavor {
            c.mesh.flavor = f;
        }
        if let Some(s) = self.solver {
            c.solver.mode = s;
        }
        if let Some(p) = self.precond {
            c.solver.preconditioner = p;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    App(#[from] AppError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("thread pool: {0}")]
    Threads(String),
}

impl CliError {
    fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::App(e) => e.category(),
            CliError::Bench(BenchError::App(e)) => e.category(),
            CliError::Bench(_) => "bench",
            CliError::Threads(_) => "threads",
        }
    }

    fn exit_code(&self) -> u8 {
        match self.category() {
            "config" | "bench" => 3,
            "simulation" => 4,
            "io" => 5,
            "postprocessing" => 6,
            _ => 7,
        }
    }
}

/// Flag, then `SOLVER_THREADS`, then the config value, then physical cores.
fn thread_count(flag: Option<usize>, config: usize) -> usize {
    let env = std::env::var("SOLVER_THREADS").ok().and_then(|v| v.trim().parse().ok());
    [flag, env, Some(config)]
        .into_iter()
        .flatten()
        .find(|&n| n > 0)
        .unwrap_or_else(num_cpus::get_physical)
}

fn init_threads(n: usize) -> Result<(), CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Threads(e.to_string()))
}

fn load_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| CliError::Config(ConfigError::Parse(format!("{}: {e}", path.display()))))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { cfg, output_dir } => {
            let c = cfg.resolve()?;
            init_threads(thread_count(cli.threads, c.threads))?;
            eprintln!(
                "running p={} cells={:?} ({} DOFs), {} {}, dt={} ms to {} ms",
                c.mesh.degree,
                c.mesh.cells,
                c.n_dofs(),
                c.solver.mode,
                c.solver.preconditioner,
                c.time.dt,
                c.time.t_final
            );
            let out = app::run(&c)?;
            app::write_outputs(&output_dir, &c, &out)?;
            eprintln!(
                "done in {:.1} s, mean {:.2} CG iterations per step; wrote {}",
                out.wall_seconds,
                out.mean_iterations(),
                output_dir.display()
            );
        }
        Command::Sweep { plan, output_dir } => {
            let plan = SweepPlan::load(&plan)?;
            init_threads(thread_count(cli.threads, plan.base.threads))?;
            let report = bench::slab_study(&plan, &output_dir, |m| eprintln!("{m}"))?;
            for s in &report.speedups {
                eprintln!("p={} {}x{}x{}: speedup {:.2}", s.degree, s.cells[0], s.cells[1], s.cells[2], s.speedup);
            }
            eprintln!("wrote {}", output_dir.display());
        }
        Command::BdfStudy { config, output_dir } => {
            let cfg: BdfStudyConfig = load_toml(config.as_deref())?;
            init_threads(thread_count(cli.threads, 0))?;
            let study = bench::bdf_study(&cfg, |r| {
                eprintln!("{} p={} {} dt={:e}: L2 {:.3e} H1 {:.3e}", r.solution.label(), r.degree, r.scheme, r.dt, r.l2, r.h1)
            })?;
            bench::write_bdf_tables(&output_dir, &study)?;
            for s in &study.slopes {
                println!("{} p={} {}: slope L2 {:.2}, H1 {:.2}", s.solution.label(), s.degree, s.scheme, s.slope_l2, s.slope_h1);
            }
            for s in &study.plateau_slopes {
                println!("{} p={} {} (dt <= {:e}): slope L2 {:.2}, H1 {:.2}", s.solution.label(), s.degree, s.scheme, cfg.plateau_dt, s.slope_l2, s.slope_h1);
            }
        }
        Command::SpectralStudy { config, output_dir } => {
            let cfg: SpectralStudyConfig = load_toml(config.as_deref())?;
            init_threads(thread_count(cli.threads, 0))?;
            let study = bench::spectral_study(&cfg, |r| eprintln!("{} p={} {}^3 cells: H1 {:.3e}", r.solution.label(), r.degree, r.cells, r.h1))?;
            bench::write_spectral_table(&output_dir, &study)?;
            for w in study.p_rows.windows(2) {
                println!("p={} -> {}: H1 error ratio {:.1}", w[0].degree, w[1].degree, w[0].h1 / w[1].h1);
            }
            println!("p=1 H1 slope in h: {:.2}", study.h_slope);
        }
        Command::ExportMesh { cfg, output_dir } => {
            let c = cfg.resolve()?;
            init_threads(thread_count(cli.threads, c.threads))?;
            let dofs = DofMap::new(&c.mesh(), c.mesh.degree).map_err(|e| ConfigError::Invalid {
                key: "mesh",
                reason: e.to_string(),
            })?;
            let boundary: Vec<f64> = (0..dofs.n_dofs).map(|i| f64::from(u8::from(dofs.is_boundary(i)))).collect();
            std::fs::create_dir_all(&output_dir).map_err(app::io_context(format!("creating {}", output_dir.display())))?;
            let path = output_dir.join("mesh.vtk");
            let file = std::fs::File::create(&path).map_err(app::io_context(format!("creating {}", path.display())))?;
            write_vtk(std::io::BufWriter::new(file), "monodomain mesh", &dofs, &[("boundary", &boundary)])
                .map_err(app::io_context(format!("writing {}", path.display())))?;
            eprintln!("wrote {} ({} nodes)", path.display(), dofs.n_dofs);
        }
        Command::EmitConfig { cfg } => {
            print!("{}", cfg.resolve()?.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}
