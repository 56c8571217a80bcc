//! `pte-lab`: risk curves, regression AMSE matrices and Monte Carlo runs for
//! preliminary test estimators.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use pte_lab::linreg::{amse_pte_linreg, amse_pte_linreg_general};
use pte_lab::montecarlo::{run_simulation, AmseScaling, SimConfig, SimResult};
use pte_lab::multicov::HomogeneityKind;
use pte_lab::pte::amse_curve;
use pte_lab::statfn::gamma_pair;
use pte_lab::PteError;

use config::{parse_grid, parse_indices, RunFile};
use output::{emit, sibling, to_json, Cell, Format, Table};

const DEFAULT_GRID: &str = "0:30:0.5";
const VERIFY_TOL: f64 = 1e-10;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Model(PteError),
    Io(String),
    /// Too many replications were excluded; outputs were still written.
    Breach(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Io(_) => 1,
            CliError::Model(_) => 2,
            CliError::Breach(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Breach(m) => f.write_str(m),
            CliError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl From<PteError> for CliError {
    fn from(e: PteError) -> Self {
        CliError::Model(e)
    }
}

#[derive(Debug, Parser)]
#[command(name = "pte-lab", version, about = "Preliminary test estimation: risk curves and simulations")]
struct Cli {
    /// Output file (standard output when omitted; simulate defaults to simulation.<format>)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output format
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Master seed for simulations
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = automatic)
    #[arg(long, global = true, env = "PTE_LAB_THREADS")]
    threads: Option<usize>,
    /// TOML run file; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Acceptance probabilities γ₂ and γ₄ over a grid of noncentralities
    Gamma(CurveArgs),
    /// Scalar AMSE of the unconstrained, constrained and pretest estimators
    AmseCurve(CurveArgs),
    /// Closed-form AMSE matrix of the simple-regression pretest estimator
    LinregAmse(LinRegArgs),
    /// Monte Carlo comparison of empirical and analytic risk in the two-sample covariance model
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct CurveArgs {
    /// Parameter dimension
    #[arg(long)]
    p: Option<usize>,
    /// Constraint dimension
    #[arg(long)]
    r: Option<usize>,
    /// Pretest level
    #[arg(long)]
    alpha: Option<f64>,
    /// Noncentrality grid: start:stop:step or a comma list
    #[arg(long, allow_hyphen_values = true)]
    grid: Option<String>,
}

#[derive(Debug, Args)]
struct LinRegArgs {
    /// Error variance
    #[arg(long)]
    sigma_sq: Option<f64>,
    /// Limit of the regressor mean
    #[arg(long, allow_hyphen_values = true)]
    x_bar0: Option<f64>,
    /// Limit of the centred regressor second moment
    #[arg(long)]
    s0: Option<f64>,
    /// Pretest level
    #[arg(long)]
    alpha: Option<f64>,
    /// Slope-shift grid: start:stop:step or a comma list
    #[arg(long, allow_hyphen_values = true)]
    delta_grid: Option<String>,
    /// Check every row against the general efficient-case formula
    #[arg(long)]
    verify: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Number of samples
    #[arg(long)]
    m: Option<usize>,
    /// Per-sample sizes, comma separated (a single value is repeated)
    #[arg(long, value_delimiter = ',')]
    n_i: Option<Vec<usize>>,
    /// Replications per localisation index
    #[arg(long = "M")]
    reps: Option<usize>,
    /// Pretest level
    #[arg(long)]
    alpha: Option<f64>,
    /// Localisation indices: start:stop:step or a comma list
    #[arg(long)]
    ells: Option<String>,
    /// Empirical AMSE scaling: nu_n or paper_n
    #[arg(long)]
    scaling: Option<String>,
}

struct Common {
    out: Option<PathBuf>,
    format: Format,
    seed: Option<u64>,
    threads: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pte-lab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => RunFile::load(p)?,
        None => RunFile::default(),
    };
    let format = match (cli.format, &file.format) {
        (Some(f), _) => f,
        (None, Some(s)) => Format::parse(s)?,
        (None, None) => Format::Csv,
    };
    let common = Common {
        out: cli.out.or_else(|| file.out.as_ref().map(PathBuf::from)),
        format,
        seed: cli.seed.or(file.seed),
        threads: cli.threads.or(file.threads).unwrap_or(0),
    };
    match cli.command {
        Command::Gamma(a) => cmd_gamma(&common, merge_curve(a, &file.gamma)?),
        Command::AmseCurve(a) => cmd_amse_curve(&common, merge_curve(a, &file.amse_curve)?),
        Command::LinregAmse(a) => cmd_linreg_amse(&common, a, &file.linreg_amse),
        Command::Simulate(a) => cmd_simulate(&common, a, &file.simulate),
    }
}

struct CurveParams {
    p: usize,
    r: usize,
    alpha: f64,
    grid: Vec<f64>,
}

fn merge_curve(a: CurveArgs, f: &config::CurveSection) -> Result<CurveParams, CliError> {
    let grid = a.grid.or_else(|| f.grid.clone()).unwrap_or_else(|| DEFAULT_GRID.to_string());
    Ok(CurveParams {
        p: a.p.or(f.p).unwrap_or(10),
        r: a.r.or(f.r).unwrap_or(1),
        alpha: a.alpha.or(f.alpha).unwrap_or(0.05),
        grid: parse_grid(&grid)?,
    })
}

#[derive(Serialize)]
struct GammaRow {
    delta_sq: f64,
    gamma2: f64,
    gamma4: f64,
}

#[derive(Serialize)]
struct CurveOutput<T> {
    p: usize,
    r: usize,
    alpha: f64,
    rows: Vec<T>,
}

fn cmd_gamma(common: &Common, c: CurveParams) -> Result<(), CliError> {
    let rows = c
        .grid
        .iter()
        .map(|&d| {
            let (gamma2, gamma4) = gamma_pair(c.p, c.r, c.alpha, d)?;
            Ok(GammaRow { delta_sq: d, gamma2, gamma4 })
        })
        .collect::<Result<Vec<_>, PteError>>()?;
    let bytes = match common.format {
        Format::Json => to_json(&CurveOutput { p: c.p, r: c.r, alpha: c.alpha, rows })?,
        Format::Csv => {
            let mut t = Table::new(vec!["delta_sq", "gamma2", "gamma4"]);
            for r in rows {
                t.push(vec![Cell::Num(r.delta_sq), Cell::Num(r.gamma2), Cell::Num(r.gamma4)]);
            }
            t.to_csv()?
        }
    };
    emit(common.out.as_deref(), &bytes)
}

fn cmd_amse_curve(common: &Common, c: CurveParams) -> Result<(), CliError> {
    let rows = amse_curve(c.p, c.r, c.alpha, &c.grid)?;
    let bytes = match common.format {
        Format::Json => to_json(&CurveOutput { p: c.p, r: c.r, alpha: c.alpha, rows })?,
        Format::Csv => {
            let mut t = Table::new(vec!["delta_sq", "amse_u", "amse_c", "amse_pte"]);
            for r in rows {
                t.push(vec![
                    Cell::Num(r.delta_sq),
                    Cell::Num(r.unconstrained),
                    Cell::Num(r.constrained),
                    Cell::Num(r.pretest),
                ]);
            }
            t.to_csv()?
        }
    };
    emit(common.out.as_deref(), &bytes)
}

#[derive(Serialize)]
struct LinRegRow {
    delta: f64,
    matrix: [[f64; 2]; 2],
}

#[derive(Serialize)]
struct LinRegOutput {
    sigma_sq: f64,
    x_bar0: f64,
    s0: f64,
    alpha: f64,
    rows: Vec<LinRegRow>,
}

fn cmd_linreg_amse(common: &Common, a: LinRegArgs, f: &config::LinRegSection) -> Result<(), CliError> {
    let sigma_sq = a.sigma_sq.or(f.sigma_sq).unwrap_or(1.0);
    let x_bar0 = a.x_bar0.or(f.x_bar0).unwrap_or(0.0);
    let s0 = a.s0.or(f.s0).unwrap_or(1.0);
    let alpha = a.alpha.or(f.alpha).unwrap_or(0.05);
    let grid = parse_grid(&a.delta_grid.or_else(|| f.delta_grid.clone()).unwrap_or_else(|| "0:6:0.25".into()))?;
    let mut rows = Vec::with_capacity(grid.len());
    for &delta in &grid {
        let m = amse_pte_linreg(sigma_sq, x_bar0, s0, delta, alpha)?;
        if a.verify {
            let general = amse_pte_linreg_general(sigma_sq, x_bar0, s0, delta, alpha)?;
            let gap = (&m - &general).amax();
            if gap > VERIFY_TOL * m.amax().max(1.0) {
                return Err(CliError::Model(PteError::Numeric(format!(
                    "closed form and general route differ by {gap:e} at δ = {delta}"
                ))));
            }
        }
        rows.push(LinRegRow { delta, matrix: [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]] });
    }
    if a.verify {
        eprintln!("verified {} rows against the general route (tolerance {VERIFY_TOL:e})", rows.len());
    }
    let bytes = match common.format {
        Format::Json => to_json(&LinRegOutput { sigma_sq, x_bar0, s0, alpha, rows })?,
        Format::Csv => {
            let mut t = Table::new(vec!["delta", "a11", "a12", "a21", "a22"]);
            for r in rows {
                let m = r.matrix;
                t.push(vec![
                    Cell::Num(r.delta),
                    Cell::Num(m[0][0]),
                    Cell::Num(m[0][1]),
                    Cell::Num(m[1][0]),
                    Cell::Num(m[1][1]),
                ]);
            }
            t.to_csv()?
        }
    };
    emit(common.out.as_deref(), &bytes)
}

fn simulate_config(common: &Common, a: SimulateArgs, f: &config::SimulateSection) -> Result<SimConfig, CliError> {
    let desk = SimConfig::desk();
    let m = a.m.or(f.m).unwrap_or(desk.m);
    let mut n_i = a.n_i.or_else(|| f.n_i.clone()).unwrap_or_else(|| vec![desk.n_i[0]]);
    if n_i.len() == 1 {
        n_i = vec![n_i[0]; m];
    }
    let ells = match a.ells.or_else(|| f.ells.clone()) {
        Some(s) => parse_indices(&s)?,
        None => desk.ells,
    };
    let scaling = match a.scaling.or_else(|| f.scaling.clone()) {
        Some(s) => s.parse::<AmseScaling>().map_err(|e| CliError::Usage(e.to_string()))?,
        None => desk.scaling,
    };
    let cfg = SimConfig {
        m,
        k: 2,
        n_i,
        reps: a.reps.or(f.reps).unwrap_or(desk.reps),
        alpha: a.alpha.or(f.alpha).unwrap_or(desk.alpha),
        ells,
        seed: common.seed.unwrap_or(desk.seed),
        scaling,
        threads: common.threads,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_simulate(common: &Common, a: SimulateArgs, f: &config::SimulateSection) -> Result<(), CliError> {
    let cfg = simulate_config(common, a, f)?;
    let result = run_simulation(&cfg)?;
    let main_path = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("simulation.{}", common.format.extension())));
    let bytes = match common.format {
        Format::Json => to_json(&result)?,
        Format::Csv => main_table(&result).to_csv()?,
    };
    emit(Some(&main_path), &bytes)?;
    write_curves(&main_path, &result)?;
    print_summary(&result);
    if result.exclusion_breach() {
        return Err(CliError::Breach(format!(
            "{} of {} replications excluded (rate {:.4}%)",
            result.total_excluded(),
            result.levels.len() * cfg.reps,
            100.0 * result.exclusion_rate()
        )));
    }
    Ok(())
}

fn main_table(result: &SimResult) -> Table {
    let mut t = Table::new(vec![
        "kind",
        "ell",
        "delta_sq",
        "estimator",
        "empirical_amse_s",
        "se",
        "analytic_amse_s",
        "M_effective",
    ]);
    for level in &result.levels {
        for pt in &level.points {
            t.push(vec![
                Cell::Text(pt.kind.to_string()),
                Cell::Int(level.ell.into()),
                Cell::Num(pt.delta_sq),
                Cell::Text(pt.estimator.clone()),
                Cell::Num(pt.empirical_amse_s),
                Cell::Num(pt.se),
                Cell::Num(pt.analytic_amse_s),
                Cell::Int(level.m_effective as u64),
            ]);
        }
    }
    t
}

fn write_curves(main: &Path, result: &SimResult) -> Result<(), CliError> {
    for kind in HomogeneityKind::ALL {
        let mut emp = Table::new(vec!["ell", "delta_sq", "U", "U_se", "C", "C_se", "PTE", "PTE_se"]);
        let mut ana = Table::new(vec!["ell", "delta_sq", "U", "C", "PTE"]);
        for level in &result.levels {
            let pts: Vec<_> = level.points.iter().filter(|p| p.kind == kind).collect();
            let d2 = pts[0].delta_sq;
            let mut e = vec![Cell::Int(level.ell.into()), Cell::Num(d2)];
            let mut a = e.clone();
            for p in &pts {
                e.push(Cell::Num(p.empirical_amse_s));
                e.push(Cell::Num(p.se));
                a.push(Cell::Num(p.analytic_amse_s));
            }
            emp.push(e);
            ana.push(a);
        }
        emit(Some(&sibling(main, &format!("{kind}_empirical"))), &emp.to_csv()?)?;
        emit(Some(&sibling(main, &format!("{kind}_analytic"))), &ana.to_csv()?)?;
    }
    Ok(())
}

fn print_summary(result: &SimResult) {
    println!(
        "{:>5} {:>3} {:>9} {:>10} {:>8} {:>10} {:>7}",
        "kind", "ell", "delta_sq", "estimator", "emp", "analytic", "z"
    );
    for level in &result.levels {
        for pt in &level.points {
            let z = if pt.se > 0.0 { (pt.empirical_amse_s - pt.analytic_amse_s) / pt.se } else { f64::NAN };
            println!(
                "{:>5} {:>3} {:>9.4} {:>10} {:>8.4} {:>10.4} {:>7.2}",
                pt.kind.as_str(),
                level.ell,
                pt.delta_sq,
                pt.estimator,
                pt.empirical_amse_s,
                pt.analytic_amse_s,
                z
            );
        }
    }
    println!(
        "scaling {}, {} replications per index, {} excluded",
        result.config.scaling.as_str(),
        result.config.reps,
        result.total_excluded()
    );
}
