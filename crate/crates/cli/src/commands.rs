//! The four subcommands. Each takes parsed inputs, writes its outputs and
//! manifest into `out_dir`, and returns the manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use merton_hjb::dgm::{train, write_history_csv};
use merton_hjb::fdm::{BoundaryProvider, ConstantOne, FdmSolver, Grid3D, SolutionCube};
use merton_hjb::net::Network;
use merton_hjb::portfolio::{optimal_weight, CubeSurface, SolvedSurface};
use merton_hjb::surface::{lattice, SurfaceGrid};
use merton_hjb::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::manifest::RunManifest;
use crate::CliError;

pub const MODEL_FILE: &str = "model.txt";
pub const HISTORY_FILE: &str = "loss_history.csv";
pub const CONFIG_FILE: &str = "config.toml";

/// Side length (in cells) of the lattice used for network surfaces.
pub const SURFACE_CELLS: usize = 40;

/// Mixed into the seed so the weight initialisation and the sampler draw
/// from different streams.
const INIT_STREAM: u64 = 0x1d1c_0ffe_e5ee_d5a1;

fn surface_name(prefix: &str, t: f64) -> String {
    format!("{prefix}_t{t:.4}.csv")
}

fn csv_bytes(s: &SurfaceGrid) -> Vec<u8> {
    let mut buf = Vec::new();
    s.write_csv(&mut buf).expect("writing to a Vec cannot fail");
    buf
}

/// One exported fixed-time surface of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceEntry {
    pub t: f64,
    pub path: String,
}

fn surface_entries(details: &serde_json::Value) -> Result<Vec<SurfaceEntry>, CliError> {
    serde_json::from_value(details["surfaces"].clone())
        .map_err(|e| CliError::Usage(format!("manifest lists no surfaces: {e}")))
}

fn elapsed(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

pub fn solve_dgm(cfg: &RunConfig, out_dir: &Path) -> Result<RunManifest, CliError> {
    let market = cfg.market()?;
    let domain = cfg.model.domain;
    let mut manifest = RunManifest::new("solve-dgm", cfg.train.seed, &cfg.snapshot());

    let start = Instant::now();
    let (lo, hi) = domain.input_bounds();
    let net = Network::init(cfg.train.n_hidden, &lo, &hi, cfg.train.seed ^ INIT_STREAM)?;
    let outcome = train(net, &cfg.train, market.as_ref(), &domain)?;
    manifest.timings.insert("train".into(), elapsed(start));

    let start = Instant::now();
    std::fs::create_dir_all(out_dir)?;
    manifest.emit(out_dir, CONFIG_FILE, cfg.snapshot().as_bytes())?;
    manifest.emit(out_dir, MODEL_FILE, outcome.net.to_text().as_bytes())?;
    let mut hist = Vec::new();
    write_history_csv(&outcome.history, &mut hist)?;
    manifest.emit(out_dir, HISTORY_FILE, &hist)?;

    let w = cfg.window();
    let mut surfaces = Vec::new();
    for frac in cfg.time_fractions() {
        let t = frac * cfg.horizon();
        let s = SurfaceGrid::from_fn(
            "u",
            lattice(w[0], w[1], SURFACE_CELLS),
            lattice(w[2], w[3], SURFACE_CELLS),
            |a, b| outcome.net.forward(t, &[a, b]),
        );
        let name = surface_name("u", t);
        manifest.emit(out_dir, &name, &csv_bytes(&s))?;
        surfaces.push(SurfaceEntry { t, path: name });
    }
    manifest.timings.insert("export".into(), elapsed(start));
    manifest.details = json!({
        "updates": outcome.history.len(),
        "final_loss": outcome.history.last().map(|h| h.j),
        "window": w,
        "surfaces": surfaces,
    });
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Where the finite difference solver takes its edge values from.
#[derive(Debug, Clone, PartialEq)]
pub enum BoundarySource {
    One,
    /// A trained network file, or a `solve-dgm` run directory holding one.
    Model(PathBuf),
}

fn load_network(path: &Path) -> Result<Network, CliError> {
    let file = if path.is_dir() { path.join(MODEL_FILE) } else { path.to_path_buf() };
    if !file.is_file() {
        return Err(CliError::Usage(format!("model file {} not found", file.display())));
    }
    Network::load(&file).map_err(|e| CliError::Usage(e.to_string()))
}

/// Levels whose time is `frac * T` for the requested fractions.
fn levels_for(grid: &Grid3D, fracs: &[f64]) -> Result<Vec<usize>, CliError> {
    fracs
        .iter()
        .map(|&f| {
            let s = f * grid.nt as f64;
            let n = s.round();
            if !(0.0..=grid.nt as f64).contains(&n) || (s - n).abs() > 1e-9 {
                Err(CliError::Usage(format!("time fraction {f} does not fall on a grid level")))
            } else {
                Ok(n as usize)
            }
        })
        .collect()
}

/// Node indices of the grid inside `[lo, hi]`.
fn window_indices(count: usize, node: impl Fn(usize) -> f64, lo: f64, hi: f64) -> Vec<usize> {
    let tol = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
    (0..=count).filter(|&k| node(k) >= lo - tol && node(k) <= hi + tol).collect()
}

fn is_singular(e: &Error) -> bool {
    match e {
        Error::AtLevel { source, .. } => is_singular(source),
        Error::NewtonNonConvergence { .. } | Error::SingularJacobian { .. } | Error::DivisionHazard { .. } => true,
        _ => false,
    }
}

fn finite_max_abs(values: &[f64]) -> Option<f64> {
    if values.iter().all(|v| v.is_finite()) {
        Some(values.iter().fold(0.0f64, |m, v| m.max(v.abs())))
    } else {
        None
    }
}

/// Runs the backward march and exports the cube. A level that Newton
/// cannot solve, or non-finite values, give [`CliError::Singular`] after
/// everything has been written. Non-positive values in a completed run are
/// counted per level in the manifest but do not fail the run.
pub fn solve_fdm(cfg: &RunConfig, boundary: &BoundarySource, out_dir: &Path) -> Result<RunManifest, CliError> {
    let start = Instant::now();
    let provider: Box<dyn BoundaryProvider> = match boundary {
        BoundarySource::One => Box::new(ConstantOne),
        BoundarySource::Model(p) => Box::new(load_network(p)?),
    };
    let grid = cfg.grid()?;
    let levels = levels_for(&grid, &cfg.time_fractions())?;
    let w = cfg.window();
    let rows = window_indices(grid.n1, |i| grid.y1(i), w[0], w[1]);
    let cols = window_indices(grid.n2, |j| grid.y2(j), w[2], w[3]);
    if rows.is_empty() || cols.is_empty() {
        return Err(CliError::Usage("plot window contains no grid nodes".into()));
    }
    let market = cfg.market()?;
    let solver = FdmSolver::new(grid, market.as_ref())?;
    let mut manifest = RunManifest::new("solve-fdm", cfg.train.seed, &cfg.snapshot());
    manifest.timings.insert("setup".into(), elapsed(start));

    let start = Instant::now();
    let (solution, failure) = solver.solve_backward_partial(provider.as_ref(), cfg.fdm.newton_tol, cfg.fdm.newton_max_iter);
    manifest.timings.insert("solve".into(), elapsed(start));

    let start = Instant::now();
    std::fs::create_dir_all(out_dir)?;
    manifest.emit(out_dir, CONFIG_FILE, cfg.snapshot().as_bytes())?;
    let cube = &solution.cube;
    let all_y1 = lattice(grid.y1_lo, grid.y1_hi, grid.n1);
    let all_y2 = lattice(grid.y2_lo, grid.y2_hi, grid.n2);
    for n in 0..=grid.nt {
        let level = cube.level(n);
        let s = SurfaceGrid {
            column: "u".into(),
            y1: (0..=grid.n1).map(|i| grid.y1(i)).collect(),
            y2: (0..=grid.n2).map(|j| grid.y2(j)).collect(),
            values: level.to_vec(),
        };
        debug_assert_eq!((s.y1.len(), s.y2.len()), (all_y1.len(), all_y2.len()));
        manifest.emit(out_dir, &format!("cube/level_{n:02}.csv"), &csv_bytes(&s))?;
    }
    let mut surfaces = Vec::new();
    for &n in &levels {
        let t = grid.t(n);
        let mut values = Vec::with_capacity(rows.len() * cols.len());
        for &i in &rows {
            for &j in &cols {
                values.push(cube.at(n, i, j));
            }
        }
        let s = SurfaceGrid {
            column: "u".into(),
            y1: rows.iter().map(|&i| grid.y1(i)).collect(),
            y2: cols.iter().map(|&j| grid.y2(j)).collect(),
            values,
        };
        let name = surface_name("u", t);
        manifest.emit(out_dir, &name, &csv_bytes(&s))?;
        surfaces.push(SurfaceEntry { t, path: name });
    }
    manifest.timings.insert("export".into(), elapsed(start));

    let finite = (0..=grid.nt).all(|n| cube.level(n).iter().all(|v| v.is_finite()));
    let (status, outcome) = match &failure {
        None if finite => ("ok", Ok(())),
        None => (
            "singular-values",
            Err(CliError::Singular("non-finite values in the solution".into())),
        ),
        Some(e) if is_singular(e) => ("singular-values", Err(CliError::Singular(e.to_string()))),
        Some(e) => ("numerical-failure", Err(CliError::Numerical(e.to_string()))),
    };
    let reports: Vec<_> = solution
        .levels
        .iter()
        .map(|r| {
            json!({
                "level": r.level,
                "iterations": r.iterations,
                "residual_norms": r.residual_norms,
                "rounding_floor": r.rounding_floor,
            })
        })
        .collect();
    let max_abs: Vec<Option<f64>> = (0..=grid.nt).map(|n| finite_max_abs(cube.level(n))).collect();
    let non_positive: Vec<usize> = (0..=grid.nt)
        .map(|n| cube.level(n).iter().filter(|v| **v <= 0.0).count())
        .collect();
    manifest.details = json!({
        "status": status,
        "error": failure.as_ref().map(|e| e.to_string()),
        "boundary": match boundary {
            BoundarySource::One => "one".to_string(),
            BoundarySource::Model(p) => p.display().to_string(),
        },
        "nt": grid.nt,
        "n1": grid.n1,
        "n2": grid.n2,
        "dt": grid.dt(),
        "dy1": grid.dy1(),
        "dy2": grid.dy2(),
        "tol": cfg.fdm.newton_tol,
        "max_iter": cfg.fdm.newton_max_iter,
        "iterations": solution.iterations(),
        "levels": reports,
        "max_abs_u": max_abs,
        "non_positive_nodes": non_positive,
        "window": w,
        "surfaces": surfaces,
    });
    manifest.write(out_dir)?;
    outcome.map(|_| manifest)
}

/// A finished run opened for evaluation.
pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub config: RunConfig,
    pub surface: Box<dyn SolvedSurface>,
}

impl LoadedRun {
    pub fn is_fdm(&self) -> bool {
        self.manifest.kind == "solve-fdm"
    }
}

pub fn load_cube(dir: &Path, grid: Grid3D) -> Result<SolutionCube, CliError> {
    let mut cube = SolutionCube::filled(grid, f64::NAN);
    for n in 0..=grid.nt {
        let path = dir.join(format!("cube/level_{n:02}.csv"));
        let file = std::fs::File::open(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let s = SurfaceGrid::read_csv(std::io::BufReader::new(file))?;
        if s.values.len() != grid.level_len() {
            return Err(CliError::Usage(format!("{} does not match the configured grid", path.display())));
        }
        cube.level_mut(n).copy_from_slice(&s.values);
    }
    Ok(cube)
}

pub fn load_run(dir: &Path) -> Result<LoadedRun, CliError> {
    let manifest = RunManifest::read(dir)?;
    manifest.verify(dir)?;
    let config = RunConfig::from_toml_str(&manifest.config)?;
    let surface: Box<dyn SolvedSurface> = match manifest.kind.as_str() {
        "solve-dgm" => Box::new(load_network(dir)?),
        "solve-fdm" => Box::new(CubeSurface::new(load_cube(dir, config.grid()?)?)),
        other => return Err(CliError::Usage(format!("{} holds a `{other}` run, not a solver run", dir.display()))),
    };
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        manifest,
        config,
        surface,
    })
}

fn read_surface(dir: &Path, rel: &str) -> Result<SurfaceGrid, CliError> {
    let path = dir.join(rel);
    let file = std::fs::File::open(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(SurfaceGrid::read_csv(std::io::BufReader::new(file))?)
}

/// Values of `run` at time `t` on the lattice of `target`. A finite
/// difference run with a stored surface on the same lattice is read back
/// verbatim; anything else is evaluated through its surface.
fn values_on(run: &LoadedRun, t: f64, target: &SurfaceGrid) -> Result<Vec<f64>, CliError> {
    if run.is_fdm() {
        for e in surface_entries(&run.manifest.details)? {
            if e.t == t {
                let s = read_surface(&run.dir, &e.path)?;
                if s.y1 == target.y1 && s.y2 == target.y2 {
                    return Ok(s.values);
                }
            }
        }
    }
    let mut out = Vec::with_capacity(target.values.len());
    for &a in &target.y1 {
        for &b in &target.y2 {
            out.push(run.surface.value(t, &[a, b]));
        }
    }
    Ok(out)
}

/// `|u_a - u_b|` on the lattice of the finite difference run (or of `a` when
/// neither is one), at that run's surface times.
pub fn compare(dir_a: &Path, dir_b: &Path, out_dir: &Path) -> Result<RunManifest, CliError> {
    let start = Instant::now();
    let a = load_run(dir_a)?;
    let b = load_run(dir_b)?;
    if a.config.model.domain != b.config.model.domain {
        return Err(CliError::Usage("domain mismatch between the two runs".into()));
    }
    if a.config.model.params.p != b.config.model.params.p {
        return Err(CliError::Usage("the two runs use different p".into()));
    }
    let reference = if !a.is_fdm() && b.is_fdm() { &b } else { &a };
    let key = format!("{}\n{}\n", a.manifest.run_id, b.manifest.run_id);
    let mut manifest = RunManifest::new("compare", 0, &key);
    std::fs::create_dir_all(out_dir)?;
    let mut summary = String::from("t,mean_abs_err,max_abs_err\n");
    let mut surfaces = Vec::new();
    for e in surface_entries(&reference.manifest.details)? {
        let lat = read_surface(&reference.dir, &e.path)?;
        let va = values_on(&a, e.t, &lat)?;
        let vb = values_on(&b, e.t, &lat)?;
        let err = SurfaceGrid {
            column: "abs_err".into(),
            y1: lat.y1.clone(),
            y2: lat.y2.clone(),
            values: va.iter().zip(&vb).map(|(x, y)| (x - y).abs()).collect(),
        };
        let name = surface_name("abs_err", e.t);
        manifest.emit(out_dir, &name, &csv_bytes(&err))?;
        summary.push_str(&format!("{:.16e},{:.16e},{:.16e}\n", e.t, err.mean_abs(), err.max_abs()));
        surfaces.push(SurfaceEntry { t: e.t, path: name });
    }
    manifest.emit(out_dir, "summary.csv", summary.as_bytes())?;
    manifest.timings.insert("compare".into(), elapsed(start));
    manifest.details = json!({
        "runs": [dir_a.display().to_string(), dir_b.display().to_string()],
        "run_ids": [a.manifest.run_id, b.manifest.run_id],
        "surfaces": surfaces,
    });
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Reads `summary.csv` of a compare run as `(t, mean, max)` rows.
pub fn read_summary(dir: &Path) -> Result<Vec<(f64, f64, f64)>, CliError> {
    let text = std::fs::read_to_string(dir.join("summary.csv"))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let v: Vec<f64> = l.split(',').filter_map(|x| x.parse().ok()).collect();
            match v[..] {
                [t, mean, max] => Ok((t, mean, max)),
                _ => Err(CliError::Usage(format!("bad summary row `{l}`"))),
            }
        })
        .collect()
}

/// Options of the portfolio command beyond the run directory.
#[derive(Debug, Clone, Default)]
pub struct PortfolioSpec {
    /// Fractions of `T`; the run's configured times when absent.
    pub times: Option<Vec<f64>>,
    pub window: Option<[f64; 4]>,
    /// Cells per side of the output lattice.
    pub cells: usize,
}

/// Optimal weight surfaces `pi_t*.csv`. Nodes where the weight cannot be
/// formed (u below the guard, singular covariance) are written as `NaN`
/// and counted.
pub fn portfolio(run_dir: &Path, spec: &PortfolioSpec, out_dir: &Path) -> Result<RunManifest, CliError> {
    let start = Instant::now();
    if spec.cells == 0 {
        return Err(CliError::Usage("portfolio lattice needs at least one cell".into()));
    }
    let run = load_run(run_dir)?;
    let market = run.config.market()?;
    let w = spec.window.unwrap_or_else(|| run.config.window());
    let fracs = spec.times.clone().unwrap_or_else(|| run.config.time_fractions());
    let mut manifest = RunManifest::new("portfolio", 0, &format!("{}\n{w:?}\n{fracs:?}\n{}\n", run.manifest.run_id, spec.cells));
    std::fs::create_dir_all(out_dir)?;
    let mut surfaces = Vec::new();
    let mut degenerate = Vec::new();
    for f in fracs {
        let t = f * run.config.horizon();
        let mut bad = 0usize;
        let s = SurfaceGrid::from_fn(
            "pi",
            lattice(w[0], w[1], spec.cells),
            lattice(w[2], w[3], spec.cells),
            |a, b| match optimal_weight(t, &[a, b], run.surface.as_ref(), market.as_ref()) {
                Ok(pi) => pi[0],
                Err(_) => {
                    bad += 1;
                    f64::NAN
                }
            },
        );
        let name = surface_name("pi", t);
        manifest.emit(out_dir, &name, &csv_bytes(&s))?;
        surfaces.push(SurfaceEntry { t, path: name });
        degenerate.push(json!({ "t": t, "degenerate_nodes": bad }));
    }
    manifest.timings.insert("portfolio".into(), elapsed(start));
    manifest.details = json!({
        "run": run_dir.display().to_string(),
        "run_id": run.manifest.run_id,
        "window": w,
        "surfaces": surfaces,
        "degenerate": degenerate,
    });
    manifest.write(out_dir)?;
    Ok(manifest)
}
