//! One function per subcommand. Each writes its artifacts and a manifest and
//! returns the exit code.

use serde::Serialize;
use sparse_chaos::excursions::{delta_summary, poisson_limit_constant, PoissonConfig, QSampler};
use sparse_chaos::experiments::{desk_run, ExperimentConfig};
use sparse_chaos::forest::{sample_forest, ForestParams};
use sparse_chaos::model::validate_setting;
use sparse_chaos::paths::{
    simulate_xd, simulate_xd_levels, simulate_y, simulate_zd_levels, Record, SimOptions, TimeGrid,
};
use sparse_chaos::quadrature::{excursion_area_with, mean_excursion_mass_with, ScaleTable};
use sparse_chaos::{CoefficientBundle, Error, RngStream};

use crate::output::{Artifacts, Csv, SCHEMA_VERSION};
use crate::{plot, CliError, Command, Context, SystemArg, EXIT_INDETERMINATE, EXIT_NUMERIC, EXIT_OK, EXIT_VALIDATION};

pub fn dispatch(cmd: &Command, ctx: &Context) -> Result<i32, CliError> {
    match cmd {
        Command::Validate => validate(ctx),
        Command::Quadrature => quadrature(ctx),
        Command::Simulate {
            system,
            demes,
            trajectory,
        } => simulate(ctx, *system, *demes, *trajectory),
        Command::Excursion { poisson } => excursion(ctx, *poisson),
        Command::Forest { probes } => forest(ctx, *probes),
        Command::Converge { plot } => converge(ctx, *plot),
        Command::CriterionSweep { alpha_grid } => criterion_sweep(ctx, alpha_grid),
        Command::Reference { .. } => unreachable!("handled before dispatch"),
    }
}

/// Shortest round-trip form, in exponent notation for very small or large
/// magnitudes.
fn num(x: f64) -> String {
    let a = x.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

fn stream(ctx: &Context) -> RngStream {
    RngStream::new(ctx.config.run.master_seed, 0)
}

fn dt(ctx: &Context, b: &CoefficientBundle) -> f64 {
    ctx.config.numerics.dt.unwrap_or_else(|| b.default_dt())
}

fn finish(art: Artifacts, ctx: &Context, code: i32) -> Result<i32, CliError> {
    let path = art.finish(&ctx.config_hash, ctx.config.run.master_seed)?;
    println!("wrote {}", path.display());
    Ok(code)
}

fn validate(ctx: &Context) -> Result<i32, CliError> {
    let b = ctx.config.bundle()?;
    let ladder: Vec<u64> = ctx.config.numerics.d_ladder.iter().map(|&d| d as u64).collect();
    let report = validate_setting(&b, ctx.config.numerics.grid_n, &ladder)?;
    let mut art = Artifacts::new(ctx.out_dir.clone(), "validate");
    art.write_json("validate.json", &report)?;
    for c in report.failures() {
        eprintln!("failed: {} (worst margin {} at {:?})", c.id, c.worst_margin, c.worst_point);
    }
    let code = if report.all_passed() {
        println!("{}: all {} checks passed", report.bundle, report.checks.len());
        EXIT_OK
    } else {
        EXIT_VALIDATION
    };
    finish(art, ctx, code)
}

#[derive(Serialize)]
struct QuadratureSummary {
    schema_version: u32,
    bundle: String,
    area: f64,
    area_error: f64,
    margin: f64,
    verdict: &'static str,
    mean_excursion_mass: f64,
}

fn verdict_of(margin: f64, error: f64, tol: f64) -> &'static str {
    if margin.abs() < error.max(tol) {
        "indeterminate"
    } else if margin >= 0.0 {
        "dies_out"
    } else {
        "survives"
    }
}

fn quadrature(ctx: &Context) -> Result<i32, CliError> {
    let b = ctx.config.bundle()?;
    let tol = ctx.config.numerics.tol;
    let table = ScaleTable::build(&b, tol)?;
    let mut csv = Csv::new(&["y", "s", "S", "a_tilde", "integrand_area"]);
    for r in table.rows() {
        csv.row(r.iter().map(|&v| num(v)));
    }
    let area = excursion_area_with(&table, tol)?;
    let mass = mean_excursion_mass_with(&table, tol)?;
    let margin = 1.0 - area.value;
    let verdict = verdict_of(margin, area.abs_error, tol);
    let mut art = Artifacts::new(ctx.out_dir.clone(), "quadrature");
    art.write("quadrature.csv", &csv.into_bytes())?;
    art.write_json(
        "quadrature.json",
        &QuadratureSummary {
            schema_version: SCHEMA_VERSION,
            bundle: b.name().to_string(),
            area: area.value,
            area_error: area.abs_error,
            margin,
            verdict,
            mean_excursion_mass: mass.value,
        },
    )?;
    println!("area {} margin {} verdict {verdict}", area.value, margin);
    finish(art, ctx, if verdict == "indeterminate" { EXIT_INDETERMINATE } else { EXIT_OK })
}

#[derive(Serialize)]
struct SimulateSummary {
    schema_version: u32,
    system: SystemArg,
    demes: usize,
    levels: usize,
    n_steps: usize,
    dt: f64,
    sup_total: f64,
    final_total: f64,
    tail_flag: bool,
}

fn simulate(ctx: &Context, system: SystemArg, demes: Option<usize>, trajectory: bool) -> Result<i32, CliError> {
    let b = ctx.config.bundle()?;
    let init = ctx.config.init()?;
    let n = &ctx.config.numerics;
    let grid = TimeGrid::covering(0.0, n.horizon, dt(ctx, &b))?;
    let d = demes.unwrap_or(n.d_ladder[0]);
    let opts = SimOptions {
        record: if trajectory { Record::All } else { Record::Nothing },
        ..SimOptions::default()
    };
    let s = stream(ctx);
    let mut art = Artifacts::new(ctx.out_dir.clone(), "simulate");
    let mut totals = Csv::new(&["step", "time", "total_mass"]);
    let summary = if system == SystemArg::Y {
        let y0 = init.entries().first().map_or(0.0, |e| e.1);
        let p = simulate_y(&b, y0, &grid, &s, &SimOptions::default())?;
        for k in 0..=grid.n_steps {
            totals.row([k.to_string(), num(grid.time(k)), num(p.value(k))]);
        }
        if trajectory {
            let mut t = Csv::new(&["step", "time", "deme", "level", "value"]);
            for k in 0..=grid.n_steps {
                t.row([k.to_string(), num(grid.time(k)), "1".into(), "0".into(), num(p.value(k))]);
            }
            art.write("simulate_trajectory.csv", &t.into_bytes())?;
        }
        SimulateSummary {
            schema_version: SCHEMA_VERSION,
            system,
            demes: 1,
            levels: 1,
            n_steps: grid.n_steps,
            dt: grid.dt,
            sup_total: p.peak(),
            final_total: p.value(grid.n_steps),
            tail_flag: false,
        }
    } else {
        let p = match system {
            SystemArg::Demes => simulate_xd(&b, d, &init, &grid, &s, &opts)?,
            SystemArg::Levels => simulate_xd_levels(&b, d, n.k_max, &init, &grid, &s, &opts)?,
            SystemArg::Loopfree => simulate_zd_levels(&b, d, n.k_max, &init, &grid, &s, &opts)?,
            SystemArg::Y => unreachable!(),
        };
        for (k, &tot) in p.totals.iter().enumerate() {
            totals.row([k.to_string(), num(grid.time(k)), num(tot)]);
        }
        if trajectory {
            // Only nonzero cells are listed; absent cells are zero.
            let mut t = Csv::new(&["step", "time", "deme", "level", "value"]);
            for &k in &p.recorded_steps {
                let frame = p.frame(k).expect("recorded step");
                for (cell, &v) in frame.iter().enumerate() {
                    if v != 0.0 {
                        t.row([
                            k.to_string(),
                            num(grid.time(k)),
                            (cell / p.levels + 1).to_string(),
                            (cell % p.levels).to_string(),
                            num(v),
                        ]);
                    }
                }
            }
            art.write("simulate_trajectory.csv", &t.into_bytes())?;
        }
        SimulateSummary {
            schema_version: SCHEMA_VERSION,
            system,
            demes: p.demes,
            levels: p.levels,
            n_steps: grid.n_steps,
            dt: grid.dt,
            sup_total: p.sup_total(),
            final_total: *p.totals.last().unwrap_or(&0.0),
            tail_flag: p.tail_flag,
        }
    };
    art.write("simulate_totals.csv", &totals.into_bytes())?;
    art.write_json("simulate.json", &summary)?;
    finish(art, ctx, EXIT_OK)
}

#[derive(Serialize)]
struct ExcursionSummary {
    schema_version: u32,
    quadrature_mean_excursion_mass: f64,
    rows: Vec<sparse_chaos::excursions::DeltaSummary>,
}

fn excursion(ctx: &Context, poisson: bool) -> Result<i32, CliError> {
    let b = ctx.config.bundle()?;
    let e = &ctx.config.excursion;
    let step = dt(ctx, &b);
    let table = std::sync::Arc::new(ScaleTable::build(&b, ctx.config.numerics.tol)?);
    let s = stream(ctx);
    let mut csv = Csv::new(&["delta", "mass", "mean_area", "mean_area_se", "censor_rate"]);
    let mut rows = Vec::new();
    for (k, &delta) in e.deltas.iter().enumerate() {
        let sampler = QSampler::from_table(table.clone(), delta)?.with_dt(step)?;
        let r = delta_summary(&sampler, e.q_reps, &s.fork(k as u64))?;
        csv.row([
            num(r.delta),
            num(r.mass),
            num(r.mean_area.mean),
            num(r.mean_area.std_error),
            num(r.censor_rate),
        ]);
        rows.push(r);
    }
    let mut art = Artifacts::new(ctx.out_dir.clone(), "excursion");
    art.write("excursion.csv", &csv.into_bytes())?;
    art.write_json(
        "excursion.json",
        &ExcursionSummary {
            schema_version: SCHEMA_VERSION,
            quadrature_mean_excursion_mass: mean_excursion_mass_with(&table, ctx.config.numerics.tol)?.value,
            rows,
        },
    )?;
    if poisson {
        let cfg = PoissonConfig {
            delta: ctx.config.numerics.delta,
            q_reps: e.q_reps,
            dt: Some(step),
            ..PoissonConfig::default()
        };
        let phi = |x: f64| x;
        let report = poisson_limit_constant(
            &b,
            e.c,
            e.s,
            e.t,
            &phi,
            &e.d_ladder,
            ctx.config.numerics.n_reps,
            &s.fork(1000),
            &cfg,
        )?;
        art.write_json("poisson.json", &report)?;
    }
    finish(art, ctx, EXIT_OK)
}

#[derive(Serialize)]
struct NodeLine {
    id: usize,
    gen: usize,
    parent: Option<usize>,
    birth: f64,
    length: f64,
    peak: f64,
}

fn forest(ctx: &Context, probes: usize) -> Result<i32, CliError> {
    let b = ctx.config.bundle()?;
    let n = &ctx.config.numerics;
    let init = ctx.config.init()?;
    let sampler = QSampler::new(&b, n.delta)?.with_dt(dt(ctx, &b))?;
    let params = ForestParams::new(n.horizon).with_node_cap(n.node_cap);
    let f = sample_forest(&sampler, &init, &params, &stream(ctx))?;
    let mut nd = String::new();
    for node in &f.nodes {
        let line = NodeLine {
            id: node.id,
            gen: node.generation,
            parent: node.parent,
            birth: node.birth_time,
            length: node.length,
            peak: node.peak,
        };
        nd.push_str(&serde_json::to_string(&line).map_err(|e| CliError::Io(e.to_string()))?);
        nd.push('\n');
    }
    let mut csv = Csv::new(&["t", "total_mass"]);
    let m = probes.max(2) - 1;
    for k in 0..=m {
        let t = n.horizon * k as f64 / m as f64;
        csv.row([num(t), num(f.total_mass(t))]);
    }
    let mut art = Artifacts::new(ctx.out_dir.clone(), "forest");
    art.write("forest_nodes.ndjson", nd.as_bytes())?;
    art.write("forest_mass.csv", &csv.into_bytes())?;
    if f.capped {
        eprintln!("forest stopped at the node cap ({} nodes); output is partial", f.nodes.len());
    }
    finish(art, ctx, if f.capped { EXIT_NUMERIC } else { EXIT_OK })
}

fn converge(ctx: &Context, with_plot: bool) -> Result<i32, CliError> {
    let b = ctx.config.bundle()?;
    let n = &ctx.config.numerics;
    let init = ctx.config.init()?;
    let spec = ctx.config.functional()?;
    let step = dt(ctx, &b);
    let sampler = QSampler::new(&b, n.delta)?.with_dt(step)?;
    let cfg = ExperimentConfig {
        dt: Some(step),
        k_max: n.k_max,
        node_cap: n.node_cap,
    };
    let r = desk_run(&b, &init, &spec, &n.d_ladder, &sampler, n.n_reps, &stream(ctx), &cfg)?;
    let mut csv = Csv::new(&[
        "d",
        "estimate",
        "estimate_se",
        "error",
        "error_se",
        "overlap",
        "loopfree",
        "loopfree_se",
        "paired_diff",
        "paired_se",
        "unpaired_se",
        "purity",
        "purity_se",
        "tail_flags",
    ]);
    for (row, desk) in r.theorem.rows.iter().zip(&r.rows) {
        csv.row([
            row.d.to_string(),
            num(row.estimate.mean),
            num(row.estimate.std_error),
            num(row.error.mean),
            num(row.error.std_error),
            row.overlap.to_string(),
            num(desk.loopfree.mean),
            num(desk.loopfree.std_error),
            num(desk.paired.mean),
            num(desk.paired.std_error),
            num(desk.unpaired_se),
            num(desk.purity.mean),
            num(desk.purity.std_error),
            desk.tail_flags.to_string(),
        ]);
    }
    let mut art = Artifacts::new(ctx.out_dir.clone(), "converge");
    art.write("converge.csv", &csv.into_bytes())?;
    art.write_json("converge.json", &r)?;
    if with_plot {
        art.write("converge.svg", plot::render(&r.theorem)?.as_bytes())?;
    }
    println!(
        "target {} overlap at largest D: {}, trend: {}",
        r.theorem.target.mean, r.theorem.overlap_at_largest, r.theorem.trend.lenient
    );
    let code = if r.theorem.indeterminate { EXIT_INDETERMINATE } else { EXIT_OK };
    finish(art, ctx, code)
}

/// `start:end:count` with `count >= 2` points including both ends.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Validation(format!("grid `{spec}` is not start:end:count"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let a: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let b: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if n < 2 || !(a.is_finite() && b.is_finite()) || b <= a {
        return Err(bad());
    }
    Ok((0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect())
}

fn criterion_sweep(ctx: &Context, grid: &str) -> Result<i32, CliError> {
    if ctx.config.model.preset != "altruism" {
        return Err(CliError::Validation("criterion-sweep needs the altruism preset".into()));
    }
    let alphas = parse_grid(grid)?;
    let tol = ctx.config.numerics.tol;
    let mut csv = Csv::new(&["alpha", "area", "area_error", "margin", "dies_out"]);
    for alpha in alphas {
        let mut cfg = ctx.config.clone();
        cfg.model.alpha = alpha;
        let b = cfg.bundle()?;
        let table = ScaleTable::build(&b, tol)?;
        let area = match excursion_area_with(&table, tol) {
            Ok(a) => a,
            Err(Error::ExcursionAreaInfinite) => {
                csv.row([num(alpha), "inf".into(), "0".into(), "-inf".into(), "false".into()]);
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let margin = 1.0 - area.value;
        let dies = match verdict_of(margin, area.abs_error, tol) {
            "dies_out" => "true",
            "survives" => "false",
            _ => "indeterminate",
        };
        csv.row([num(alpha), num(area.value), num(area.abs_error), num(margin), dies.into()]);
    }
    let mut art = Artifacts::new(ctx.out_dir.clone(), "criterion-sweep");
    art.write("criterion_sweep.csv", &csv.into_bytes())?;
    finish(art, ctx, EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0.5:2.0:16").unwrap();
        assert_eq!(g.len(), 16);
        assert_eq!(g[0], 0.5);
        assert_eq!(g[15], 2.0);
        assert!(g.iter().any(|&a| a == 1.0));
        assert!(parse_grid("1:0:3").is_err());
        assert!(parse_grid("1:2").is_err());
    }
}
