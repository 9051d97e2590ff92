//! `ddflow` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::behavior::{is_persistently_exciting, LiftMode, Trajectory, DEFAULT_RANK_TOL};
use crate::error::{
    BehaviorError, ExcitationError, GridError, MicrogridError, OpfError, OptError, PhysicsError,
    ReportError,
};
use crate::excitation::{
    export_trajectory, generate_excitation, import_trajectory, ExcitationOptions,
};
use crate::grid::Grid;
use crate::microgrid::report::{compare_tables, kpi_table, results_table, solve_time_table, Table};
use crate::microgrid::{
    generate_profiles, run_closed_loop, MicrogridConfig, MpcOptions, ProfileShape, Profiles,
};
use crate::opf::{
    ApplicationConstraints, OpfObjective, OpfProblem, OpfSolution, OpfVariant, VariantTag,
};
use crate::opt::MixedBinaryOptions;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  other failure (excitation failed, comparison outside tolerance, ...)
  2  problem infeasible
  3  numerical failure in the solver
  4  schema or i/o error
  5  dimension mismatch";

pub const RESULTS_FILE: &str = "results.csv";
pub const SOLVE_TIMES_FILE: &str = "solve_times.csv";
pub const KPI_FILE: &str = "kpis.csv";

#[derive(Debug, Parser)]
#[command(
    name = "ddflow",
    version,
    about = "Data-driven optimal power flow and microgrid MPC on radial grids",
    after_help = EXIT_CODES
)]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate excitation data and check persistency of excitation.
    GenerateData(GenerateArgs),
    /// Solve one optimal power flow problem.
    SolveOpf(SolveArgs),
    /// Run the closed-loop microgrid MPC.
    RunMpc(MpcArgs),
    /// Compare result directories column by column.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    PerEdge,
    AllPairs,
}

impl From<ModeArg> for LiftMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::PerEdge => LiftMode::PerEdge,
            ModeArg::AllPairs => LiftMode::AllPairs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Reference,
    Dd,
    DdConvex,
    DdGeneralized,
}

impl From<VariantArg> for VariantTag {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Reference => VariantTag::Reference,
            VariantArg::Dd => VariantTag::NonconvexDd,
            VariantArg::DdConvex => VariantTag::ConvexDd,
            VariantArg::DdGeneralized => VariantTag::GeneralizedDd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    /// Total active losses.
    Losses,
}

#[derive(Debug, clap::Args)]
pub struct GenerateArgs {
    /// Grid TOML; the five-bus case grid when omitted.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub samples: usize,
    /// Angle range in radians.
    #[arg(long, default_value_t = 0.3)]
    pub range: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "per-edge")]
    pub mode: ModeArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Trajectory CSV; required for the data-driven variants.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub variant: VariantArg,
    #[arg(long, value_enum, default_value = "losses")]
    pub objective: ObjectiveArg,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Fixed node injections in node order, `_` for free, e.g. `0.6,-0.3,0.4,0.2,_`.
    #[arg(long)]
    pub injections: Option<String>,
    /// Symmetric bound on every directional line power.
    #[arg(long)]
    pub line_limit: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct MpcArgs {
    /// Microgrid TOML; the case-study parameters when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Trajectory CSV or `seed:<int>` for the data-driven variants.
    #[arg(long, default_value = "seed:0")]
    pub data: String,
    /// Profile CSV or `seed:<int>`.
    #[arg(long)]
    pub profiles: String,
    #[arg(long, value_enum)]
    pub variant: VariantArg,
    #[arg(long)]
    pub steps: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct CompareArgs {
    /// Result directories (or result CSV files); the first is the baseline.
    #[arg(long, num_args = 2.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

/// Error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

fn opt_code(e: &OptError) -> i32 {
    match e {
        OptError::NumericalBreakdown { .. } => 3,
        OptError::TooManyBinaries { .. } | OptError::InvalidProgram(_) => 1,
    }
}

fn behavior_code(e: &BehaviorError) -> i32 {
    match e {
        BehaviorError::Grid(g) => grid_code(g),
        BehaviorError::InconsistentQuery { .. } => 1,
        _ => 5,
    }
}

fn grid_code(e: &GridError) -> i32 {
    match e {
        GridError::Parse(_) => 4,
        _ => 1,
    }
}

fn physics_code(e: &PhysicsError) -> i32 {
    match e {
        PhysicsError::DimensionMismatch { .. } => 5,
        PhysicsError::NoConvergence { .. } => 3,
        PhysicsError::Grid(g) => grid_code(g),
        _ => 1,
    }
}

fn opf_code(e: &OpfError) -> i32 {
    match e {
        OpfError::Infeasible | OpfError::Unbounded | OpfError::ProjectionInfeasible { .. } => 2,
        OpfError::ToleranceNotMet => 3,
        OpfError::ModelNotPE | OpfError::DimensionMismatch { .. } => 5,
        OpfError::Opt(o) => opt_code(o),
        OpfError::Behavior(b) => behavior_code(b),
        OpfError::Physics(p) => physics_code(p),
    }
}

fn microgrid_code(e: &MicrogridError) -> i32 {
    match e {
        MicrogridError::ForecastTooShort { .. } => 5,
        MicrogridError::StateBoundViolation { .. } => 3,
        MicrogridError::InfeasibleProfile { .. } => 2,
        MicrogridError::InvalidConfig(_) => 4,
        MicrogridError::Step { source, .. } => microgrid_code(source),
        MicrogridError::Opf(o) => opf_code(o),
        MicrogridError::Opt(o) => opt_code(o),
        MicrogridError::Physics(p) => physics_code(p),
        MicrogridError::Behavior(b) => behavior_code(b),
    }
}

fn excitation_code(e: &ExcitationError) -> i32 {
    match e {
        ExcitationError::ExcitationFailed { .. } | ExcitationError::InvalidOptions(_) => 1,
        ExcitationError::Io(_) | ExcitationError::Schema(_) => 4,
        ExcitationError::Behavior(b) => behavior_code(b),
        ExcitationError::Physics(p) => physics_code(p),
    }
}

macro_rules! into_cli {
    ($($t:ty => $f:expr),* $(,)?) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                let code = $f(&e);
                Self::new(code, e.to_string())
            }
        })*
    };
}

into_cli! {
    OptError => opt_code,
    OpfError => opf_code,
    MicrogridError => microgrid_code,
    ExcitationError => excitation_code,
    BehaviorError => behavior_code,
    GridError => grid_code,
    ReportError => |_: &ReportError| 4,
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(4, format!("{}: {e}", path.display()))
}

fn load_grid(path: Option<&Path>) -> Result<Grid, CliError> {
    match path {
        None => Ok(Grid::case_study()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io(p, e))?;
            Ok(Grid::from_toml(&text)?)
        }
    }
}

fn parse_seed(arg: &str) -> Option<Result<u64, CliError>> {
    arg.strip_prefix("seed:").map(|s| {
        s.trim()
            .parse()
            .map_err(|_| CliError::new(4, format!("bad seed in `{arg}`")))
    })
}

fn print_certificate(traj: &Trajectory) -> Result<(), CliError> {
    let c = is_persistently_exciting(&traj.phi, 1, DEFAULT_RANK_TOL)?;
    println!(
        "PE: rank {}/{} (threshold {:e}, smallest kept singular value {:e})",
        c.rank, c.required, c.threshold, c.smallest_kept_singular_value
    );
    Ok(())
}

fn generate_data(a: &GenerateArgs) -> Result<(), CliError> {
    let grid = load_grid(a.grid.as_deref())?;
    let mut opts = ExcitationOptions::new(a.samples, a.mode.into(), a.seed);
    opts.angle_range = a.range;
    let traj = generate_excitation(&grid, &opts)?;
    export_trajectory(&traj, &a.out)?;
    print_certificate(&traj)
}

fn variant_for(
    tag: VariantTag,
    grid: &Grid,
    traj: Option<&Trajectory>,
    beta: f64,
) -> Result<OpfVariant, CliError> {
    match (tag, traj) {
        (VariantTag::Reference, _) => Ok(OpfVariant::reference(grid, beta)),
        (_, None) => Err(CliError::new(
            4,
            format!("variant `{}` needs --data", tag.as_str()),
        )),
        (tag, Some(t)) => Ok(OpfVariant::from_trajectory(tag, t, beta, DEFAULT_RANK_TOL)?),
    }
}

fn parse_injections(text: &str, nodes: usize) -> Result<Vec<Option<f64>>, CliError> {
    let vals: Vec<Option<f64>> = text
        .split(',')
        .map(|s| match s.trim() {
            "" | "_" => Ok(None),
            v => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::new(4, format!("bad injection `{v}`"))),
        })
        .collect::<Result<_, _>>()?;
    if vals.len() != nodes {
        return Err(CliError::new(
            5,
            format!("{} injections given for {nodes} nodes", vals.len()),
        ));
    }
    Ok(vals)
}

/// `key,value` rows for one OPF solution.
pub fn solution_table(grid: &Grid, sol: &OpfSolution) -> Vec<(String, f64)> {
    let mut rows = vec![
        ("objective".to_string(), sol.objective),
        ("augmented_objective".to_string(), sol.augmented_objective),
        (
            "max_tightness_residual".to_string(),
            sol.tightness.max_residual,
        ),
        ("projected".to_string(), f64::from(u8::from(sol.projected))),
        ("solve_time_s".to_string(), sol.solve_time),
    ];
    for (k, &(a, b)) in grid.edges().iter().enumerate() {
        rows.push((format!("pe_{a}_{b}"), sol.p_e[2 * k]));
        rows.push((format!("pe_{b}_{a}"), sol.p_e[2 * k + 1]));
    }
    for (n, id) in grid.nodes().iter().enumerate() {
        rows.push((format!("pg_{id}"), sol.p_g[n]));
    }
    rows.extend(
        sol.theta
            .iter()
            .enumerate()
            .map(|(k, v)| (format!("theta_{k}"), *v)),
    );
    rows.extend(
        sol.phi
            .iter()
            .enumerate()
            .map(|(k, v)| (format!("phi_{k}"), *v)),
    );
    if let Some(alpha) = &sol.alpha {
        rows.extend(
            alpha
                .iter()
                .enumerate()
                .map(|(k, v)| (format!("alpha_{k}"), *v)),
        );
    }
    rows
}

fn solve_opf(a: &SolveArgs) -> Result<(), CliError> {
    let grid = load_grid(a.grid.as_deref())?;
    let traj = a.data.as_deref().map(import_trajectory).transpose()?;
    let variant = variant_for(a.variant.into(), &grid, traj.as_ref(), a.beta)?;
    let mut app = match &a.injections {
        Some(text) => {
            ApplicationConstraints::fixed_injections(&parse_injections(text, grid.node_count())?)
        }
        None => ApplicationConstraints::new(),
    };
    if let Some(l) = a.line_limit {
        app = app.line_limits(-l, l, grid.edge_count());
    }
    let objective = match a.objective {
        ObjectiveArg::Losses => OpfObjective::losses(&grid),
    };
    let problem = OpfProblem::new(grid.clone(), variant, app, objective);
    let sol = problem.solve(&MixedBinaryOptions::default())?;
    let mut w = csv::Writer::from_path(&a.out)
        .map_err(|e| CliError::new(4, format!("{}: {e}", a.out.display())))?;
    let csv_err = |e: csv::Error| CliError::new(4, e.to_string());
    w.write_record(["key", "value"]).map_err(csv_err)?;
    for (k, v) in solution_table(&grid, &sol) {
        w.write_record([k, v.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| io(&a.out, e))?;
    println!("objective: {}", sol.objective);
    println!("max tightness residual: {:e}", sol.tightness.max_residual);
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<MicrogridConfig, CliError> {
    match path {
        None => Ok(MicrogridConfig::table1()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io(p, e))?;
            Ok(MicrogridConfig::from_toml(&text)?)
        }
    }
}

fn load_profiles(arg: &str, steps: usize, cfg: &MicrogridConfig) -> Result<Profiles, CliError> {
    match parse_seed(arg) {
        Some(seed) => Ok(generate_profiles(
            seed?,
            steps,
            &ProfileShape::for_config(cfg),
            cfg,
        )?),
        None => {
            let p = Path::new(arg);
            let file = fs::File::open(p).map_err(|e| io(p, e))?;
            Ok(Profiles::read_csv(file)?)
        }
    }
}

fn load_data(arg: &str, grid: &Grid, mode: LiftMode) -> Result<Trajectory, CliError> {
    match parse_seed(arg) {
        Some(seed) => {
            let n = ExcitationOptions::minimal_samples(grid, mode);
            Ok(generate_excitation(
                grid,
                &ExcitationOptions::new(n, mode, seed?),
            )?)
        }
        None => Ok(import_trajectory(Path::new(arg))?),
    }
}

fn write_table(t: &Table, path: &Path) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(|e| io(path, e))?;
    Ok(t.write(std::io::BufWriter::new(file))?)
}

fn run_mpc(a: &MpcArgs) -> Result<(), CliError> {
    let cfg = load_config(a.config.as_deref())?;
    let grid = load_grid(a.grid.as_deref())?;
    cfg.validate_for(&grid)?;
    let tag: VariantTag = a.variant.into();
    let traj = match tag {
        VariantTag::Reference => None,
        t => Some(load_data(&a.data, &grid, t.lift_mode())?),
    };
    let variant = variant_for(tag, &grid, traj.as_ref(), cfg.beta)?;
    let profiles = load_profiles(&a.profiles, a.steps, &cfg)?;
    let result = run_closed_loop(
        &cfg,
        &grid,
        &profiles,
        &variant,
        a.steps,
        &MpcOptions::default(),
    )?;
    fs::create_dir_all(&a.out_dir).map_err(|e| io(&a.out_dir, e))?;
    write_table(
        &results_table(&cfg, &grid, &result),
        &a.out_dir.join(RESULTS_FILE),
    )?;
    write_table(
        &solve_time_table(&result),
        &a.out_dir.join(SOLVE_TIMES_FILE),
    )?;
    write_table(&kpi_table(&result), &a.out_dir.join(KPI_FILE))?;
    println!(
        "{} steps, mean operating cost {:.6}, mean loss cost {:.6}",
        result.records.len(),
        result.kpis.mean_operating_cost,
        result.kpis.mean_loss_cost
    );
    Ok(())
}

fn read_run(path: &Path) -> Result<Table, CliError> {
    let file = if path.is_dir() {
        path.join(RESULTS_FILE)
    } else {
        path.to_path_buf()
    };
    let f = fs::File::open(&file).map_err(|e| io(&file, e))?;
    Ok(Table::read(f)?)
}

fn compare(a: &CompareArgs) -> Result<(), CliError> {
    let tables = a
        .runs
        .iter()
        .map(|p| read_run(p))
        .collect::<Result<Vec<_>, _>>()?;
    let dev = compare_tables(&tables[0], &tables[1..], a.tol).map_err(|e| {
        let code = if matches!(e, ReportError::LengthMismatch { .. }) {
            5
        } else {
            4
        };
        CliError::new(code, e.to_string())
    })?;
    let mut all = true;
    for d in &dev {
        all &= d.pass;
        println!(
            "{:<16} {:.3e} {}",
            d.column,
            d.max_abs,
            if d.pass { "PASS" } else { "FAIL" }
        );
    }
    if all {
        println!("all columns within {:e}", a.tol);
        Ok(())
    } else {
        Err(CliError::new(1, format!("deviation above {:e}", a.tol)))
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenerateData(a) => generate_data(a),
        Command::SolveOpf(a) => solve_opf(a),
        Command::RunMpc(a) => run_mpc(a),
        Command::Compare(a) => compare(a),
    }
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 4 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
