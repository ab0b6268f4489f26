//! Batch driver for the landaulab toolkit: field classification, eigenvalue
//! densities, counting curves, classical drift runs, and remainder sweeps.
//!
//! Every subcommand is a pure function of (config, seed) to output files:
//! data goes to standard output or to `--out` paths, diagnostics to standard
//! error. Exit codes: 0 success, 1 usage error, 2 numerical failure. The
//! resolved job description round-trips through `--emit-config` / `--config`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use landaulab::classical_dynamics::{drift_report, drift_sweep, PhaseState};
use landaulab::discrete_operator::{build_hamiltonian, GridSpec};
use landaulab::experiments::{
    classify_domain, integrate_density_2d, magnetic_weyl_density_2d, run_sweep, weyl_density_2d,
    FamilySpec, FitOutcome, GridPolicy, KpmOptions, MethodChoice, MuH, RowOutcome, SweepSpec,
};
use landaulab::field_geometry::{classify_point, ClassifyOptions, PointClassification};
use landaulab::fields::{SemiclassicalParams, MAX_DIM};
use landaulab::spectral_count::{
    dense_count, inertia_count_capped, kpm_count, spectral_bounds, CountMethod, CountingCurve,
    DEFAULT_INERTIA_CAP,
};
use landaulab::weyl_laws::{
    corrected_density, integrate_density, magnetic_weyl_density, weyl_density, DensityKind,
    DensityQuery, IntegratedDensity,
};

// ─────────────────────────────────────────────────────────────────────────
// Command line
// ─────────────────────────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "landaulab",
    version,
    about = "Semiclassical spectral toolkit: classification, Weyl densities, counting curves, drift dynamics, remainder sweeps",
    subcommand_negates_reqs = true
)]
struct Cli {
    /// Worker threads for the parallel kernels (default: rayon's choice).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Suppress progress notes on standard error.
    #[arg(long, global = true)]
    quiet: bool,

    /// Seed for stochastic estimators (spectrum --method kpm).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run a job description file instead of subcommand flags.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Write the resolved job description as TOML (`-` = stdout) and exit.
    #[arg(long, global = true, value_name = "FILE")]
    emit_config: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Classify field geometry at a point or over a domain atlas.
    Classify(ClassifyArgs),
    /// Evaluate or integrate eigenvalue densities.
    Weyl(WeylArgs),
    /// Counting curves N(tau) of the discretized operator.
    Spectrum(SpectrumArgs),
    /// Classical drift reports and mu-sweeps.
    Dynamics(DynamicsArgs),
    /// Remainder sweep driven by a sweep description file.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FamilyKind {
    Constant,
    Constant2d,
    Pilot2d,
    Tilted2d,
    RatioWell,
}

/// Field-family registry flags shared by the subcommands. Families are
/// vetted built-ins (analytic derivatives needed downstream), not parsed
/// expressions.
#[derive(Args, Clone)]
struct FamilyArgs {
    /// Field family.
    #[arg(long, value_enum)]
    family: FamilyKind,

    /// First block intensity b1 (the only intensity for 2-D families).
    #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
    f1: f64,

    /// Second block intensity b2 (4-D families).
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    f2: f64,

    /// Constant part of the scalar potential.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    v0: f64,

    /// Ratio-well bend strength.
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
    eps: f64,

    /// Pilot-family potential amplitudes a1,a2.
    #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = [0.2, 0.1], allow_hyphen_values = true)]
    v_amp: Vec<f64>,

    /// Tilted-box potential gradient t1,t2.
    #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = [0.1, 0.05], allow_hyphen_values = true)]
    tilt: Vec<f64>,

    /// Domain edge lengths; a single value is replicated across axes.
    #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = [1.0])]
    lengths: Vec<f64>,

    /// Ratio-well critical point (defaults to the domain center).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    center: Option<Vec<f64>>,

    /// Retune field strengths to the nearest integer flux per plane
    /// (defaults: on for lattice subcommands, off for pointwise ones).
    #[arg(long)]
    tune_flux: Option<bool>,
}

#[derive(Args, Clone)]
struct ParamsArgs {
    /// Field-strength parameter mu >= 1.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    mu: f64,

    /// Semiclassical parameter h > 0.
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
    h: f64,

    /// Spectral threshold tau.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    tau: f64,
}

#[derive(Args)]
struct ClassifyArgs {
    #[command(flatten)]
    family: FamilyArgs,
    #[command(flatten)]
    params: ParamsArgs,

    /// Point to classify (defaults to the domain center).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    point: Option<Vec<f64>>,

    /// Classify a whole atlas with this many cells per axis instead.
    #[arg(long, conflicts_with = "point")]
    atlas: Option<usize>,

    /// Output path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum DensityKindArg {
    Weyl,
    MagneticWeyl,
    Corrected,
}

impl DensityKindArg {
    fn to_kind(self) -> DensityKind {
        match self {
            DensityKindArg::Weyl => DensityKind::Weyl,
            DensityKindArg::MagneticWeyl => DensityKind::MagneticWeyl,
            DensityKindArg::Corrected => DensityKind::Corrected,
        }
    }

    fn name(self) -> &'static str {
        match self {
            DensityKindArg::Weyl => "weyl",
            DensityKindArg::MagneticWeyl => "magnetic-weyl",
            DensityKindArg::Corrected => "corrected",
        }
    }
}

#[derive(Args)]
struct WeylArgs {
    #[command(flatten)]
    family: FamilyArgs,
    #[command(flatten)]
    params: ParamsArgs,

    /// Density expression to evaluate.
    #[arg(long, value_enum, default_value_t = DensityKindArg::MagneticWeyl)]
    kind: DensityKindArg,

    /// Evaluation point (defaults to the domain center).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    point: Option<Vec<f64>>,

    /// Emit an (x-grid, density) CSV table with this many cells per axis.
    #[arg(long, conflicts_with = "point")]
    table: Option<usize>,

    /// Integrate the density over the whole domain instead.
    #[arg(long, conflicts_with_all = ["point", "table"])]
    integrate: bool,

    /// Quadrature nodes per axis for --integrate (default 128 in 2-D, 16 in 4-D).
    #[arg(long)]
    nodes: Option<usize>,

    /// Output path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum CountMethodArg {
    Dense,
    Inertia,
    Kpm,
}

#[derive(Args)]
struct SpectrumArgs {
    #[command(flatten)]
    family: FamilyArgs,
    #[command(flatten)]
    params: ParamsArgs,

    /// Lattice nodes per axis, e.g. 12,12 or 6,6,6,6.
    #[arg(long, value_delimiter = ',', required = true)]
    dims: Vec<usize>,

    /// Explicit threshold list (sorted ascending).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    taus: Option<Vec<f64>>,

    /// Uniform threshold grid [tau-min, tau-max] with tau-points entries.
    #[arg(long, requires = "tau_max", allow_negative_numbers = true)]
    tau_min: Option<f64>,
    #[arg(long, requires = "tau_min", allow_negative_numbers = true)]
    tau_max: Option<f64>,
    #[arg(long, default_value_t = 33)]
    tau_points: usize,

    #[arg(long, value_enum, default_value_t = CountMethodArg::Dense)]
    method: CountMethodArg,

    /// Chebyshev moments (kpm).
    #[arg(long, default_value_t = 512)]
    moments: usize,

    /// Stochastic probe vectors (kpm).
    #[arg(long, default_value_t = 32)]
    probes: usize,

    /// CSV output path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Also write a provenance record (operator descriptor + curve) as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct DynamicsArgs {
    #[command(flatten)]
    family: FamilyArgs,
    #[command(flatten)]
    params: ParamsArgs,

    /// Initial position (defaults to the domain center).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,

    /// Initial kinetic momenta p = xi - mu V(x).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    p0: Option<Vec<f64>>,

    /// Integration horizon.
    #[arg(long, default_value_t = 200.0, allow_negative_numbers = true)]
    t_final: f64,

    /// Run a mu-sweep over these values instead of a single report.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    mus: Option<Vec<f64>>,

    /// JSON output path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Also write the trajectory table as CSV (single-report mode).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep description file (TOML).
    #[arg(long, required = true)]
    config: PathBuf,

    /// Override the artifact directory of the sweep description.
    #[arg(long)]
    output_dir: Option<PathBuf>,

    /// Override the point-cache directory of the sweep description.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

// ─────────────────────────────────────────────────────────────────────────
// Job description (round-trips through --emit-config / --config)
// ─────────────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default = "default_schema")]
    schema_version: u32,
    #[serde(default)]
    quiet: bool,
    #[serde(default = "default_seed")]
    seed: u64,
    task: Task,
}

fn default_schema() -> u32 {
    landaulab::SCHEMA_VERSION
}

fn default_seed() -> u64 {
    0x1a11da0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case", deny_unknown_fields)]
enum Task {
    Classify {
        family: FamilySpec,
        mu: f64,
        h: f64,
        tau: f64,
        #[serde(default)]
        point: Option<Vec<f64>>,
        #[serde(default)]
        atlas: Option<usize>,
        #[serde(default)]
        out: Option<PathBuf>,
    },
    Weyl {
        family: FamilySpec,
        mu: f64,
        h: f64,
        tau: f64,
        kind: DensityKindArg,
        #[serde(default)]
        point: Option<Vec<f64>>,
        #[serde(default)]
        table: Option<usize>,
        #[serde(default)]
        integrate: bool,
        #[serde(default)]
        nodes: Option<usize>,
        #[serde(default)]
        out: Option<PathBuf>,
    },
    Spectrum {
        family: FamilySpec,
        mu: f64,
        h: f64,
        dims: Vec<usize>,
        taus: Vec<f64>,
        method: CountMethodArg,
        #[serde(default = "default_moments")]
        moments: usize,
        #[serde(default = "default_probes")]
        probes: usize,
        #[serde(default)]
        out: Option<PathBuf>,
        #[serde(default)]
        json: Option<PathBuf>,
    },
    Dynamics {
        family: FamilySpec,
        mu: f64,
        h: f64,
        #[serde(default)]
        x0: Option<Vec<f64>>,
        #[serde(default)]
        p0: Option<Vec<f64>>,
        t_final: f64,
        #[serde(default)]
        mus: Option<Vec<f64>>,
        #[serde(default)]
        out: Option<PathBuf>,
        #[serde(default)]
        csv: Option<PathBuf>,
    },
    Sweep {
        spec: SweepSpec,
    },
}

fn default_moments() -> usize {
    512
}

fn default_probes() -> usize {
    32
}

// ─────────────────────────────────────────────────────────────────────────
// Error and exit-code plumbing
// ─────────────────────────────────────────────────────────────────────────

enum CliError {
    /// Malformed flags or configuration: exit 1.
    Usage(String),
    /// A computation refused or failed: exit 2.
    Run(landaulab::Error),
    Io(std::io::Error),
}

impl From<landaulab::Error> for CliError {
    fn from(e: landaulab::Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

fn usage<T: std::fmt::Display>(msg: T) -> CliError {
    CliError::Usage(msg.to_string())
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { 0 } else { 1 };
        }
    };

    let quiet = cli.quiet;
    let result = (|| -> Result<(), CliError> {
        let config = resolve_config(&cli)?;
        if let Some(path) = &cli.emit_config {
            let text = toml::to_string_pretty(&config)
                .map_err(|e| usage(format!("job description not serializable: {e}")))?;
            return write_bytes(&Some(path.clone()), text.as_bytes(), config.quiet, "job description");
        }
        match cli.threads {
            None => execute(&config),
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| usage(format!("worker pool: {e}")))?;
                pool.install(|| execute(&config))
            }
        }
    })();

    match result {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            1
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            2
        }
        Err(CliError::Io(e)) => {
            if !quiet {
                eprintln!("i/o error: {e}");
            } else {
                eprintln!("{e}");
            }
            2
        }
    }
}

// ─────────────────────────────────────────────────────────────────────────
// Flag resolution
// ─────────────────────────────────────────────────────────────────────────

fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let seed = cli.seed.unwrap_or_else(default_seed);
    match (&cli.config, &cli.command) {
        (Some(_), Some(_)) => Err(usage("give either --config or a subcommand, not both")),
        (None, None) => Err(usage("a subcommand or --config FILE is required (see --help)")),
        (Some(path), None) => {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            let mut config: RunConfig = toml::from_str(&text)
                .map_err(|e| usage(format!("job description {}: {e}", path.display())))?;
            if config.schema_version != landaulab::SCHEMA_VERSION {
                return Err(usage(format!(
                    "job description schema version {} (this build reads {})",
                    config.schema_version,
                    landaulab::SCHEMA_VERSION
                )));
            }
            config.quiet |= cli.quiet;
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            Ok(config)
        }
        (None, Some(cmd)) => {
            let task = match cmd {
                Command::Classify(a) => Task::Classify {
                    family: a.family.to_spec(false)?,
                    mu: a.params.mu,
                    h: a.params.h,
                    tau: a.params.tau,
                    point: a.point.clone(),
                    atlas: a.atlas,
                    out: a.out.clone(),
                },
                Command::Weyl(a) => Task::Weyl {
                    family: a.family.to_spec(false)?,
                    mu: a.params.mu,
                    h: a.params.h,
                    tau: a.params.tau,
                    kind: a.kind,
                    point: a.point.clone(),
                    table: a.table,
                    integrate: a.integrate,
                    nodes: a.nodes,
                    out: a.out.clone(),
                },
                Command::Spectrum(a) => Task::Spectrum {
                    family: a.family.to_spec(true)?,
                    mu: a.params.mu,
                    h: a.params.h,
                    dims: a.dims.clone(),
                    taus: resolve_taus(a)?,
                    method: a.method,
                    moments: a.moments,
                    probes: a.probes,
                    out: a.out.clone(),
                    json: a.json.clone(),
                },
                Command::Dynamics(a) => Task::Dynamics {
                    family: a.family.to_spec(false)?,
                    mu: a.params.mu,
                    h: a.params.h,
                    x0: a.x0.clone(),
                    p0: a.p0.clone(),
                    t_final: a.t_final,
                    mus: a.mus.clone(),
                    out: a.out.clone(),
                    csv: a.csv.clone(),
                },
                Command::Sweep(a) => {
                    let mut spec = SweepSpec::from_path(&a.config).map_err(usage)?;
                    if let Some(dir) = &a.output_dir {
                        spec.output_dir = Some(dir.clone());
                    }
                    if let Some(dir) = &a.cache_dir {
                        spec.cache_dir = Some(dir.clone());
                    }
                    Task::Sweep { spec }
                }
            };
            Ok(RunConfig {
                schema_version: landaulab::SCHEMA_VERSION,
                quiet: cli.quiet,
                seed,
                task,
            })
        }
    }
}

impl FamilyArgs {
    fn to_spec(&self, lattice_default_tune: bool) -> Result<FamilySpec, CliError> {
        let dim = match self.family {
            FamilyKind::Constant | FamilyKind::RatioWell => 4,
            FamilyKind::Constant2d | FamilyKind::Pilot2d | FamilyKind::Tilted2d => 2,
        };
        let lengths = expand(&self.lengths, dim, "--lengths")?;
        let tune = self.tune_flux.unwrap_or(lattice_default_tune);
        Ok(match self.family {
            FamilyKind::Constant => FamilySpec::Constant {
                b1: self.f1,
                b2: self.f2,
                v0: self.v0,
                lengths: [lengths[0], lengths[1], lengths[2], lengths[3]],
                tune_flux: tune,
            },
            FamilyKind::Constant2d => FamilySpec::Constant2d {
                b: self.f1,
                v0: self.v0,
                lengths: [lengths[0], lengths[1]],
                tune_flux: tune,
            },
            FamilyKind::Pilot2d => {
                if self.v_amp.len() != 2 {
                    return Err(usage("--v-amp takes exactly two amplitudes"));
                }
                FamilySpec::Pilot2d {
                    b0: self.f1,
                    v0: self.v0,
                    v_amp: [self.v_amp[0], self.v_amp[1]],
                    lengths: [lengths[0], lengths[1]],
                }
            }
            FamilyKind::Tilted2d => {
                if self.tilt.len() != 2 {
                    return Err(usage("--tilt takes exactly two components"));
                }
                FamilySpec::Tilted2d {
                    b: self.f1,
                    v0: self.v0,
                    tilt: [self.tilt[0], self.tilt[1]],
                    lengths: [lengths[0], lengths[1]],
                }
            }
            FamilyKind::RatioWell => {
                let center = match &self.center {
                    Some(c) => expand(c, 4, "--center")?,
                    None => lengths.iter().map(|l| 0.5 * l).collect(),
                };
                FamilySpec::RatioWell {
                    b1: self.f1,
                    b2: self.f2,
                    eps: self.eps,
                    v0: self.v0,
                    center: [center[0], center[1], center[2], center[3]],
                    lengths: [lengths[0], lengths[1], lengths[2], lengths[3]],
                }
            }
        })
    }
}

/// One value replicates across axes; otherwise the count must match.
fn expand(values: &[f64], dim: usize, flag: &str) -> Result<Vec<f64>, CliError> {
    match values.len() {
        1 => Ok(vec![values[0]; dim]),
        n if n == dim => Ok(values.to_vec()),
        n => Err(usage(format!("{flag} needs 1 or {dim} values, got {n}"))),
    }
}

fn resolve_taus(a: &SpectrumArgs) -> Result<Vec<f64>, CliError> {
    let taus = if let Some(taus) = &a.taus {
        taus.clone()
    } else if let (Some(lo), Some(hi)) = (a.tau_min, a.tau_max) {
        if a.tau_points < 2 || hi <= lo {
            return Err(usage("--tau-min/--tau-max need tau-max > tau-min and >= 2 points"));
        }
        let n = a.tau_points;
        (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect()
    } else {
        vec![a.params.tau]
    };
    if taus.windows(2).any(|w| w[0] > w[1]) {
        return Err(usage("--taus must be sorted ascending"));
    }
    Ok(taus)
}

// ─────────────────────────────────────────────────────────────────────────
// Execution
// ─────────────────────────────────────────────────────────────────────────

fn execute(config: &RunConfig) -> Result<(), CliError> {
    let quiet = config.quiet;
    match &config.task {
        Task::Classify { family, mu, h, tau, point, atlas, out } => {
            exec_classify(family, *mu, *h, *tau, point, *atlas, out, config.seed, quiet)
        }
        Task::Weyl { family, mu, h, tau, kind, point, table, integrate, nodes, out } => {
            exec_weyl(family, *mu, *h, *tau, *kind, point, *table, *integrate, *nodes, out, quiet)
        }
        Task::Spectrum { family, mu, h, dims, taus, method, moments, probes, out, json } => {
            exec_spectrum(
                family, *mu, *h, dims, taus, *method, *moments, *probes, out, json,
                config.seed, quiet,
            )
        }
        Task::Dynamics { family, mu, h, x0, p0, t_final, mus, out, csv } => {
            exec_dynamics(family, *mu, *h, x0, p0, *t_final, mus, out, csv, quiet)
        }
        Task::Sweep { spec } => exec_sweep(spec, quiet),
    }
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::Usage(format!("record not serializable: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn write_bytes(
    out: &Option<PathBuf>,
    bytes: &[u8],
    quiet: bool,
    what: &str,
) -> Result<(), CliError> {
    match out {
        Some(path) if path != Path::new("-") => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            fs::write(path, bytes)?;
            if !quiet {
                eprintln!("wrote {what} to {}", path.display());
            }
            Ok(())
        }
        _ => {
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

/// SweepSpec shell for entry points that want a family at one (mu, h).
fn spec_shell(family: &FamilySpec, mu: f64, h: f64, tau: f64, seed: u64) -> SweepSpec {
    SweepSpec {
        schema_version: landaulab::SCHEMA_VERSION,
        family: family.clone(),
        tau,
        points: vec![MuH { mu, h }],
        ladder: None,
        grid: GridPolicy::default(),
        psi: None,
        method: MethodChoice::Auto,
        kpm: KpmOptions::default(),
        quad_nodes: None,
        seed,
        cache_dir: None,
        output_dir: None,
    }
}

#[derive(Serialize)]
struct ClassifyRecord {
    schema_version: u32,
    #[serde(flatten)]
    classification: PointClassification,
}

#[allow(clippy::too_many_arguments)]
fn exec_classify(
    family: &FamilySpec,
    mu: f64,
    h: f64,
    tau: f64,
    point: &Option<Vec<f64>>,
    atlas: Option<usize>,
    out: &Option<PathBuf>,
    seed: u64,
    quiet: bool,
) -> Result<(), CliError> {
    let params = SemiclassicalParams::new(mu, h, tau).map_err(usage)?;
    if let Some(per_axis) = atlas {
        let shell = spec_shell(family, mu, h, tau, seed);
        let atlas = classify_domain(&shell, per_axis)?;
        return write_bytes(out, &json_bytes(&atlas)?, quiet, "classification atlas");
    }
    let realized = family.realize(&params).map_err(usage)?;
    let x = match point {
        Some(x) => {
            if x.len() != realized.domain.dim() {
                return Err(usage(format!(
                    "--point has {} coordinates but the family is {}-dimensional",
                    x.len(),
                    realized.domain.dim()
                )));
            }
            x.clone()
        }
        None => realized.domain.center(),
    };
    let classification =
        classify_point(&realized.fields, &x, &params, &ClassifyOptions::default())?;
    let record = ClassifyRecord { schema_version: landaulab::SCHEMA_VERSION, classification };
    write_bytes(out, &json_bytes(&record)?, quiet, "classification record")
}

#[derive(Serialize)]
struct DensityValueRecord {
    schema_version: u32,
    kind: &'static str,
    x: Vec<f64>,
    density: f64,
    mu: f64,
    h: f64,
    tau: f64,
}

#[derive(Serialize)]
struct IntegratedRecord {
    schema_version: u32,
    kind: &'static str,
    value: f64,
    quadrature_error_estimate: f64,
    node_count: usize,
    boundary_touched: bool,
    mu: f64,
    h: f64,
    tau: f64,
}

#[allow(clippy::too_many_arguments)]
fn exec_weyl(
    family: &FamilySpec,
    mu: f64,
    h: f64,
    tau: f64,
    kind: DensityKindArg,
    point: &Option<Vec<f64>>,
    table: Option<usize>,
    integrate: bool,
    nodes: Option<usize>,
    out: &Option<PathBuf>,
    quiet: bool,
) -> Result<(), CliError> {
    let params = SemiclassicalParams::new(mu, h, tau).map_err(usage)?;
    let realized = family.realize(&params).map_err(usage)?;
    let d = realized.domain.dim();
    if kind == DensityKindArg::Corrected && d == 2 {
        return Err(usage("the corrected density is defined only for 4-D families"));
    }

    let density_at = |x: &[f64]| -> landaulab::Result<f64> {
        if d == 4 {
            let q = DensityQuery {
                fields: &realized.fields,
                params,
                x: x.to_vec(),
                omega: None,
            };
            match kind {
                DensityKindArg::Weyl => Ok(weyl_density(&q)),
                DensityKindArg::MagneticWeyl => magnetic_weyl_density(&q),
                DensityKindArg::Corrected => corrected_density(&q),
            }
        } else {
            match kind {
                DensityKindArg::Weyl => Ok(weyl_density_2d(&realized.fields, &params, x)),
                DensityKindArg::MagneticWeyl => {
                    magnetic_weyl_density_2d(&realized.fields, &params, x)
                }
                DensityKindArg::Corrected => unreachable!("rejected above"),
            }
        }
    };

    if integrate {
        let n = nodes.unwrap_or(if d == 2 { 128 } else { 16 });
        let one = |_: &[f64]| 1.0;
        let rec: IntegratedDensity = if d == 4 {
            integrate_density(
                kind.to_kind(),
                &realized.fields,
                &params,
                None,
                &one,
                &realized.domain,
                n,
            )?
        } else {
            integrate_density_2d(
                kind.to_kind(),
                &realized.fields,
                &params,
                &one,
                &realized.domain,
                n,
            )?
        };
        let record = IntegratedRecord {
            schema_version: landaulab::SCHEMA_VERSION,
            kind: kind.name(),
            value: rec.value,
            quadrature_error_estimate: rec.quadrature_error_estimate,
            node_count: rec.node_count,
            boundary_touched: rec.boundary_touched,
            mu,
            h,
            tau,
        };
        return write_bytes(out, &json_bytes(&record)?, quiet, "integrated density record");
    }

    if let Some(per_axis) = table {
        if per_axis < 2 {
            return Err(usage("--table needs at least 2 cells per axis"));
        }
        let mut csv = String::new();
        csv.push_str(&format!("# schema_version {}\n", landaulab::SCHEMA_VERSION));
        for j in 1..=d {
            csv.push_str(&format!("x{j},"));
        }
        csv.push_str("density\n");
        let lengths = &realized.domain.lengths;
        let total = per_axis.pow(d as u32);
        let mut x = vec![0.0; d];
        for flat in 0..total {
            let mut rem = flat;
            for j in (0..d).rev() {
                let i = rem % per_axis;
                rem /= per_axis;
                x[j] = (i as f64 + 0.5) * lengths[j] / per_axis as f64;
            }
            let rho = density_at(&x)?;
            for v in &x {
                csv.push_str(&format!("{v},"));
            }
            csv.push_str(&format!("{rho}\n"));
        }
        return write_bytes(out, csv.as_bytes(), quiet, "density table");
    }

    let x = match point {
        Some(x) => {
            if x.len() != d {
                return Err(usage(format!(
                    "--point has {} coordinates but the family is {d}-dimensional",
                    x.len()
                )));
            }
            x.clone()
        }
        None => realized.domain.center(),
    };
    let density = density_at(&x)?;
    let record = DensityValueRecord {
        schema_version: landaulab::SCHEMA_VERSION,
        kind: kind.name(),
        x,
        density,
        mu,
        h,
        tau,
    };
    write_bytes(out, &json_bytes(&record)?, quiet, "density record")
}

#[derive(Serialize)]
struct SpectrumProvenance<'a> {
    schema_version: u32,
    operator: landaulab::discrete_operator::OperatorDescriptor,
    seed: u64,
    curve: &'a CountingCurve,
}

#[allow(clippy::too_many_arguments)]
fn exec_spectrum(
    family: &FamilySpec,
    mu: f64,
    h: f64,
    dims: &[usize],
    taus: &[f64],
    method: CountMethodArg,
    moments: usize,
    probes: usize,
    out: &Option<PathBuf>,
    json: &Option<PathBuf>,
    seed: u64,
    quiet: bool,
) -> Result<(), CliError> {
    if taus.is_empty() {
        return Err(usage("spectrum needs at least one threshold"));
    }
    let params = SemiclassicalParams::new(mu, h, taus[0]).map_err(usage)?;
    let realized = family.realize(&params).map_err(usage)?;
    if dims.len() != realized.domain.dim() {
        return Err(usage(format!(
            "--dims has {} axes but the family is {}-dimensional",
            dims.len(),
            realized.domain.dim()
        )));
    }
    let grid = GridSpec::new(realized.domain.clone(), dims).map_err(usage)?;
    let ham = build_hamiltonian(&realized.fields, &grid, &params)?;
    let curve = match method {
        CountMethodArg::Dense => dense_count(&ham, taus)?,
        CountMethodArg::Kpm => kpm_count(&ham, taus, moments, probes, seed)?,
        CountMethodArg::Inertia => {
            let counts: Vec<f64> = taus
                .iter()
                .map(|&tau| inertia_count_capped(&ham, tau, DEFAULT_INERTIA_CAP).map(|n| n as f64))
                .collect::<landaulab::Result<_>>()?;
            CountingCurve {
                schema_version: landaulab::SCHEMA_VERSION,
                tau_grid: taus.to_vec(),
                counts,
                stderr: None,
                method: CountMethod::Inertia,
                bounds: spectral_bounds(&ham)?,
                eigenvalues: None,
                kpm: None,
                warnings: Vec::new(),
            }
        }
    };
    for w in &curve.warnings {
        if !quiet {
            eprintln!("note: {w}");
        }
    }
    let mut csv = Vec::new();
    curve.write_csv(&mut csv)?;
    write_bytes(out, &csv, quiet, "counting curve")?;
    if json.is_some() {
        let record = SpectrumProvenance {
            schema_version: landaulab::SCHEMA_VERSION,
            operator: ham.descriptor(),
            seed,
            curve: &curve,
        };
        write_bytes(json, &json_bytes(&record)?, quiet, "provenance record")?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn exec_dynamics(
    family: &FamilySpec,
    mu: f64,
    h: f64,
    x0: &Option<Vec<f64>>,
    p0: &Option<Vec<f64>>,
    t_final: f64,
    mus: &Option<Vec<f64>>,
    out: &Option<PathBuf>,
    csv: &Option<PathBuf>,
    quiet: bool,
) -> Result<(), CliError> {
    let params = SemiclassicalParams::new(mu, h, 0.0).map_err(usage)?;
    let realized = family.realize(&params).map_err(usage)?;
    let d = realized.domain.dim();
    let x0 = match x0 {
        Some(x) if x.len() == d => x.clone(),
        Some(x) => {
            return Err(usage(format!(
                "--x0 has {} coordinates but the family is {d}-dimensional",
                x.len()
            )))
        }
        None => realized.domain.center(),
    };
    let p0 = match p0 {
        Some(p) if p.len() == d => p.clone(),
        Some(p) => {
            return Err(usage(format!(
                "--p0 has {} components but the family is {d}-dimensional",
                p.len()
            )))
        }
        None => [0.25, 0.0, 0.15, 0.0][..d].to_vec(),
    };

    if let Some(mus) = mus {
        let sweep = drift_sweep(&realized.fields, &params, &x0, &p0, t_final, mus)?;
        return write_bytes(out, &json_bytes(&sweep)?, quiet, "drift sweep");
    }

    let mut gauge = [0.0; MAX_DIM];
    realized.fields.gauge.eval(&x0, &mut gauge);
    let xi: Vec<f64> = (0..d).map(|j| p0[j] + mu * gauge[j]).collect();
    let state0 = PhaseState::new(x0, xi).map_err(usage)?;
    let report = drift_report(&realized.fields, &params, &state0, t_final)?;
    write_bytes(out, &json_bytes(&report)?, quiet, "drift report")?;
    if csv.is_some() {
        let mut table = Vec::new();
        report.write_csv(&mut table)?;
        write_bytes(csv, &table, quiet, "trajectory table")?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepStdoutRecord<'a> {
    schema_version: u32,
    points: usize,
    failed: usize,
    fit: &'a FitOutcome,
}

fn exec_sweep(spec: &SweepSpec, quiet: bool) -> Result<(), CliError> {
    let fit = run_sweep(spec)?;
    let failed = fit
        .rows
        .iter()
        .filter(|r| matches!(r.outcome, RowOutcome::Failed { .. }))
        .count();
    if let (Some(dir), false) = (&spec.output_dir, quiet) {
        eprintln!("wrote sweep artifacts under {}", dir.display());
    }
    let record = SweepStdoutRecord {
        schema_version: landaulab::SCHEMA_VERSION,
        points: fit.rows.len(),
        failed,
        fit: &fit.fit,
    };
    write_bytes(&None, &json_bytes(&record)?, quiet, "fit summary")
}

// ─────────────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_config() -> RunConfig {
        RunConfig {
            schema_version: 1,
            quiet: false,
            seed: 42,
            task: Task::Spectrum {
                family: FamilySpec::Constant2d {
                    b: 1.0,
                    v0: 1.0,
                    lengths: [1.0, 1.0],
                    tune_flux: true,
                },
                mu: 2.0,
                h: 0.1,
                dims: vec![12, 12],
                taus: vec![-0.25, 0.0, 0.25],
                method: CountMethodArg::Dense,
                moments: 512,
                probes: 32,
                out: None,
                json: Some(PathBuf::from("prov.json")),
            },
        }
    }

    #[test]
    fn job_description_round_trips_through_toml() {
        let config = sample_config();
        let text = toml::to_string_pretty(&config).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(config, back);

        // and a second emit of the parsed value is byte-identical
        assert_eq!(text, toml::to_string_pretty(&back).unwrap());
    }

    #[test]
    fn job_description_rejects_unknown_keys() {
        let text = toml::to_string_pretty(&sample_config()).unwrap();
        let bad = text.replace("schema_version", "schema_versionn");
        assert!(toml::from_str::<RunConfig>(&bad).is_err());
    }

    #[test]
    fn every_task_kind_round_trips() {
        let family = FamilySpec::Constant {
            b1: 2.0,
            b2: 1.0,
            v0: 1.0,
            lengths: [1.0; 4],
            tune_flux: false,
        };
        let tasks = vec![
            Task::Classify {
                family: family.clone(),
                mu: 1.0,
                h: 0.1,
                tau: 0.0,
                point: Some(vec![0.0; 4]),
                atlas: None,
                out: None,
            },
            Task::Weyl {
                family: family.clone(),
                mu: 100.0,
                h: 0.01,
                tau: 0.0,
                kind: DensityKindArg::MagneticWeyl,
                point: None,
                table: None,
                integrate: true,
                nodes: Some(16),
                out: Some(PathBuf::from("density.json")),
            },
            Task::Dynamics {
                family,
                mu: 30.0,
                h: 0.01,
                x0: None,
                p0: Some(vec![0.25, 0.0, 0.15, 0.0]),
                t_final: 100.0,
                mus: Some(vec![10.0, 30.0, 100.0]),
                out: None,
                csv: None,
            },
        ];
        for task in tasks {
            let config = RunConfig { schema_version: 1, quiet: true, seed: 7, task };
            let text = toml::to_string_pretty(&config).unwrap();
            let back: RunConfig = toml::from_str(&text).unwrap();
            assert_eq!(config, back);
        }
    }
}
