//! `lamina`: command-line driver for the laminate constructions.
//!
//! Exit status is 0 when every check in the produced reports passes, 2 when
//! some check fails and 1 on any error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use laminate_core::field::{trace_to_csv, FieldDoc};
use laminate_core::zero_det::scan_to_csv;
use laminate_core::{
    build_delta_laminate, build_zero_det_laminate, energy_compare, realize_laminate, rigidity_scan, strict_repair,
    suite, verify_delta, verify_geometry, weak_repair, EstimateReport, Generator, GradientField, Integrand,
    LaminateDoc, Mat, StrictParams, WeakParams,
};
use serde_json::Value;

#[derive(Parser, Debug)]
#[command(name = "lamina", version, about = "Build and check finite-order matrix laminates")]
struct Cli {
    /// Directory that receives every artifact.
    #[arg(long, global = true, default_value = ".")]
    emit_dir: PathBuf,
    /// Seed for the ChaCha8 generator used by random inputs.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Zero-determinant laminate of a matrix with negative determinant.
    ZeroDet(ZeroDetArgs),
    /// Shifted laminate with mostly positive determinants.
    DeltaShift(DeltaArgs),
    /// Weak repair of a gradient field.
    Repair(RepairArgs),
    /// Strict repair of a weakly oriented field.
    StrictRepair(StrictArgs),
    /// Centered moments over a grid of exponents and levels.
    RigidityScan(ScanArgs),
    /// Sawtooth realization of a planar laminate.
    Realize(RealizeArgs),
    /// Field energy against the laminate energy through both repairs.
    Energy(EnergyArgs),
    /// Runs the ten acceptance criteria.
    VerifySuite,
}

#[derive(Args, Debug)]
struct ZeroDetArgs {
    /// JSON matrix or a path to a file holding one.
    #[arg(long)]
    matrix: String,
    #[arg(long)]
    levels: usize,
    /// Check the moment estimates at this exponent.
    #[arg(long)]
    verify: Option<f64>,
    /// Also run a rigidity scan over these exponents.
    #[arg(long, value_delimiter = ',')]
    scan: Vec<f64>,
    /// Levels for `--scan`, as `a..b` (inclusive) or a comma list.
    #[arg(long)]
    levels_grid: Option<String>,
}

#[derive(Args, Debug)]
struct DeltaArgs {
    #[arg(long)]
    matrix: String,
    #[arg(long)]
    delta: f64,
    #[arg(long)]
    verify: Option<f64>,
}

#[derive(Args, Debug)]
struct FieldSource {
    /// Field JSON file.
    #[arg(long, conflicts_with = "generator")]
    field: Option<PathBuf>,
    /// identity, zero, reflection, constant:<json>, vortex[:a] or random[:mix].
    #[arg(long)]
    generator: Option<String>,
    /// Grid size for `--generator`.
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Dimension for `--generator`.
    #[arg(long, default_value_t = 2)]
    d: usize,
}

#[derive(Args, Debug)]
struct RepairArgs {
    #[command(flatten)]
    source: FieldSource,
    #[arg(long, default_value_t = 1.5)]
    p: f64,
    /// Number of iterations.
    #[arg(long, default_value_t = 3)]
    levels: usize,
    /// Offset of the level schedule `j(l) = l + j0`.
    #[arg(long, default_value_t = 0)]
    j0: usize,
}

#[derive(Args, Debug)]
struct StrictArgs {
    #[command(flatten)]
    source: FieldSource,
    #[arg(long, default_value_t = 1.5)]
    p: f64,
    #[arg(long, default_value_t = 4)]
    levels: usize,
    #[arg(long, default_value_t = 0.5)]
    delta0: f64,
    #[arg(long, default_value_t = 1.0)]
    budget: f64,
    #[arg(long, default_value_t = 2)]
    j_inner: usize,
}

#[derive(Args, Debug)]
struct ScanArgs {
    #[arg(long)]
    matrix: String,
    #[arg(long, value_delimiter = ',', required = true)]
    p: Vec<f64>,
    /// `a..b` (inclusive) or a comma list.
    #[arg(long)]
    levels: String,
}

#[derive(Args, Debug)]
struct RealizeArgs {
    /// Laminate JSON with `d = 2`.
    #[arg(long)]
    laminate: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 8)]
    periods: usize,
    /// Output file names; `.json` gets the piece list, `.csv` a sample grid.
    #[arg(long, value_delimiter = ',', default_value = "map.json")]
    emit: Vec<String>,
    /// Grid resolution for CSV output.
    #[arg(long, default_value_t = 64)]
    grid: usize,
}

#[derive(Args, Debug)]
struct EnergyArgs {
    #[command(flatten)]
    source: FieldSource,
    /// pnorm:P, det, negdet:Q or composite:c1,p,c2.
    #[arg(long, default_value = "pnorm:2")]
    integrand: String,
    #[arg(long, default_value_t = 1.5)]
    p: f64,
    #[arg(long, default_value_t = 2)]
    weak_levels: usize,
    #[arg(long, default_value_t = 2)]
    strict_levels: usize,
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> anyhow::Error {
    anyhow!("invalid configuration: --{field}: {msg}")
}

/// Dispatches a generic function on the runtime dimension.
macro_rules! by_dim {
    ($d:expr, $f:ident($($arg:expr),*)) => {
        match $d {
            2 => $f::<2>($($arg),*),
            3 => $f::<3>($($arg),*),
            4 => $f::<4>($($arg),*),
            d => Err(invalid("matrix", format!("dimension {d} is not one of 2, 3, 4"))),
        }
    };
}

struct Out<'a> {
    dir: &'a Path,
}

impl Out<'_> {
    fn write(&self, name: &str, contents: &str) -> Result<()> {
        fs::create_dir_all(self.dir).map_err(|e| invalid("emit-dir", e))?;
        let path = self.dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
        Ok(())
    }

    fn json<S: serde::Serialize>(&self, name: &str, value: &S) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, &s)
    }
}

fn read_matrix_value(arg: &str) -> Result<Value> {
    let text = if arg.trim_start().starts_with('[') {
        arg.to_string()
    } else {
        fs::read_to_string(arg).map_err(|e| invalid("matrix", format!("{arg}: {e}")))?
    };
    let v: Value = serde_json::from_str(&text).map_err(|e| invalid("matrix", e))?;
    if !v.is_array() {
        return Err(invalid("matrix", "expected a JSON array of rows"));
    }
    Ok(v)
}

fn matrix_dim(v: &Value) -> usize {
    v.as_array().map_or(0, Vec::len)
}

fn to_matrix<const D: usize>(v: &Value) -> Result<Mat<f64, D>> {
    serde_json::from_value(v.clone()).map_err(|e| invalid("matrix", e))
}

fn parse_levels(s: &str) -> Result<Vec<usize>> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| invalid("levels", format!("`{t}`: {e}")));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        if a == 0 || a > b {
            return Err(invalid("levels", format!("empty or zero-based range `{s}`")));
        }
        Ok((a..=b).collect())
    } else {
        s.split(',').map(num).collect()
    }
}

fn finish_report(out: &Out, name: &str, report: &EstimateReport) -> Result<bool> {
    out.write(name, &report.to_csv())?;
    for c in report.checks.iter().filter(|c| !c.pass) {
        eprintln!("check failed: {} (measured {:?}, bound {:?}) {}", c.id, c.measured, c.bound, c.note);
    }
    Ok(report.all_pass())
}

fn zero_det<const D: usize>(args: &ZeroDetArgs, v: &Value, out: &Out) -> Result<bool> {
    let m0 = to_matrix::<D>(v)?;
    let build = build_zero_det_laminate(&m0, args.levels)?;
    out.json("laminate.json", &LaminateDoc::from_laminate(&build.laminate))?;
    out.json("stats.json", &build.laminate.statistics(args.verify.unwrap_or(1.0), 1.0))?;
    let mut ok = true;
    if let Some(p) = args.verify {
        let report = verify_geometry(&build, &m0, p)?;
        ok &= finish_report(out, "report.csv", &report)?;
    }
    if !args.scan.is_empty() {
        let grid = args.levels_grid.as_deref().ok_or_else(|| invalid("levels-grid", "required with --scan"))?;
        let rows = rigidity_scan(&m0, &args.scan, &parse_levels(grid)?)?;
        out.write("scan.csv", &scan_to_csv(&rows))?;
        ok &= rows.iter().all(|r| r.pass);
    }
    Ok(ok)
}

fn delta_shift<const D: usize>(args: &DeltaArgs, v: &Value, out: &Out) -> Result<bool> {
    let m0 = to_matrix::<D>(v)?;
    let build = build_delta_laminate(&m0, args.delta)?;
    out.json("laminate.json", &LaminateDoc::from_laminate(&build.laminate))?;
    match args.verify {
        Some(p) => finish_report(out, "report.csv", &verify_delta(&build, &m0, args.delta, p)?),
        None => Ok(true),
    }
}

fn rigidity<const D: usize>(args: &ScanArgs, v: &Value, out: &Out) -> Result<bool> {
    let m0 = to_matrix::<D>(v)?;
    let rows = rigidity_scan(&m0, &args.p, &parse_levels(&args.levels)?)?;
    out.write("scan.csv", &scan_to_csv(&rows))?;
    Ok(rows.iter().all(|r| r.pass))
}

enum FieldInput {
    Doc(Value),
    Gen(String),
}

fn field_input(src: &FieldSource) -> Result<(usize, FieldInput)> {
    match (&src.field, &src.generator) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| invalid("field", format!("{}: {e}", path.display())))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| invalid("field", e))?;
            let d = v.get("d").and_then(Value::as_u64).ok_or_else(|| invalid("field", "missing integer `d`"))?;
            Ok((d as usize, FieldInput::Doc(v)))
        }
        (None, Some(tag)) => Ok((src.d, FieldInput::Gen(tag.clone()))),
        (None, None) => Err(invalid("field", "give either --field or --generator")),
    }
}

fn load_field<const D: usize>(input: &FieldInput, n: usize, seed: u64) -> Result<GradientField<f64, D>> {
    match input {
        FieldInput::Doc(v) => {
            let doc: FieldDoc<f64, D> = serde_json::from_value(v.clone()).map_err(|e| invalid("field", e))?;
            Ok(GradientField::from_doc(doc)?)
        }
        FieldInput::Gen(tag) => {
            let gen = Generator::<f64, D>::parse(tag).map_err(|e| invalid("generator", e))?;
            GradientField::generate(&gen, n, seed).map_err(|e| invalid("n", e))
        }
    }
}

fn repair<const D: usize>(args: &RepairArgs, input: &FieldInput, seed: u64, out: &Out) -> Result<bool> {
    let f = load_field::<D>(input, args.source.n, seed)?;
    let params = WeakParams { j0: args.j0, ..WeakParams::new(args.p, args.levels) };
    let res = weak_repair(&f, &params)?;
    out.json("field.json", &res.field.to_doc())?;
    out.write("trace.csv", &trace_to_csv(&res.trace))?;
    finish_report(out, "report.csv", &res.report)
}

fn strict<const D: usize>(args: &StrictArgs, input: &FieldInput, seed: u64, out: &Out) -> Result<bool> {
    let f = load_field::<D>(input, args.source.n, seed)?;
    let params = StrictParams {
        delta0: args.delta0,
        budget: args.budget,
        j_inner: args.j_inner,
        ..StrictParams::new(args.p, args.levels)
    };
    let res = strict_repair(&f, &params)?;
    out.json("field.json", &res.field.to_doc())?;
    out.write("trace.csv", &trace_to_csv(&res.trace))?;
    finish_report(out, "report.csv", &res.report)
}

fn energy<const D: usize>(args: &EnergyArgs, input: &FieldInput, seed: u64, out: &Out) -> Result<bool> {
    let f = load_field::<D>(input, args.source.n, seed)?;
    let integrand = Integrand::<f64>::parse(&args.integrand).map_err(|e| invalid("integrand", e))?;
    let cmp = energy_compare(
        &f,
        integrand,
        &WeakParams::new(args.p, args.weak_levels),
        &StrictParams::new(args.p, args.strict_levels),
    )?;
    out.write("energy.csv", &cmp.to_csv())?;
    let mut report = EstimateReport::default();
    report.upper("final_gap", cmp.final_gap, 1e-10, 0.0, format!("|I(G) - I_YM| for {integrand}"));
    finish_report(out, "report.csv", &report)
}

fn realize(args: &RealizeArgs, out: &Out) -> Result<bool> {
    let text = fs::read_to_string(&args.laminate)
        .map_err(|e| invalid("laminate", format!("{}: {e}", args.laminate.display())))?;
    let doc: LaminateDoc<f64, 2> = serde_json::from_str(&text).map_err(|e| invalid("laminate", e))?;
    let lam = doc.into_laminate()?;
    let map = realize_laminate(&lam, args.depth, args.epsilon, args.periods)?;
    for name in &args.emit {
        match Path::new(name).extension().and_then(|e| e.to_str()) {
            Some("json") => out.json(name, &map.to_doc())?,
            Some("csv") => out.write(name, &map.grid_csv(args.grid))?,
            _ => bail!(invalid("emit", format!("`{name}` needs a .json or .csv extension"))),
        }
    }
    let mut report = EstimateReport::default();
    let tv = map.tv_distance(&lam);
    report.upper("tv_distance", tv, 2.0 * args.epsilon * lam.depth() as f64, 0.0, "gradient law vs leaf weights");
    report.upper("continuity", map.continuity_residual(), 1e-12, 0.0, "jump across shared edges");
    report.upper("area", (map.total_area() - 1.0).abs(), 1e-12, 0.0, "pieces tile the unit square");
    finish_report(out, "report.csv", &report)
}

fn verify_suite(out: &Out) -> Result<bool> {
    let results = suite::run_all();
    for r in &results {
        eprintln!("{}", r.line());
    }
    out.write("summary.csv", &suite::summary_csv(&results))?;
    Ok(results.iter().all(|r| r.pass))
}

fn run(cli: Cli) -> Result<bool> {
    let out = Out { dir: &cli.emit_dir };
    let seed = cli.seed;
    match &cli.command {
        Command::ZeroDet(a) => {
            let v = read_matrix_value(&a.matrix)?;
            by_dim!(matrix_dim(&v), zero_det(a, &v, &out))
        }
        Command::DeltaShift(a) => {
            let v = read_matrix_value(&a.matrix)?;
            by_dim!(matrix_dim(&v), delta_shift(a, &v, &out))
        }
        Command::RigidityScan(a) => {
            let v = read_matrix_value(&a.matrix)?;
            by_dim!(matrix_dim(&v), rigidity(a, &v, &out))
        }
        Command::Repair(a) => {
            let (d, input) = field_input(&a.source)?;
            by_dim!(d, repair(a, &input, seed, &out))
        }
        Command::StrictRepair(a) => {
            let (d, input) = field_input(&a.source)?;
            by_dim!(d, strict(a, &input, seed, &out))
        }
        Command::Energy(a) => {
            let (d, input) = field_input(&a.source)?;
            by_dim!(d, energy(a, &input, seed, &out))
        }
        Command::Realize(a) => realize(a, &out),
        Command::VerifySuite => verify_suite(&out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
