//! Acceptance checks for the solver toolkit. Prints one PASS/FAIL line per
//! criterion and a closing tally.
//!
//! By default the target exits successfully once every criterion has been
//! evaluated, whatever the verdicts; set `ACCEPTANCE_STRICT=1` to turn any
//! FAIL into a nonzero exit. Runs are written under cargo's target tmpdir
//! (`acceptance/`) and left there for inspection.
//!
//! The end-to-end criteria train two networks with the bundled full
//! configurations, which takes on the order of ten minutes per network on a
//! single core.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use merton_hjb::dgm::{loss, loss_and_gradient, PreparedBatch, SampleBatch};
use merton_hjb::fdm::{FdmSolver, FnBoundary, Grid3D};
use merton_hjb::model::{ConstantModel, HestonModel, Market, ModelConfig, StateDomain};
use merton_hjb::net::Network;
use merton_hjb::pde::{constant_oracle, residual, PointJet};
use merton_hjb::portfolio::{homothetic_derivatives, optimal_weight, unreduced_weight, SolvedSurface};
use merton_hjb::surface::{lattice, SurfaceGrid};
use merton_hjb_cli::commands;
use merton_hjb_cli::config::{RunConfig, CONSTANT, REFERENCE_P0005, REFERENCE_P05};
use merton_hjb_cli::manifest::RunManifest;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

const BIN: &str = env!("CARGO_BIN_EXE_merton-hjb");

fn work_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_bin(args: &[&str]) -> (i32, String) {
    let out = Command::new(BIN).args(args).output().expect("binary runs");
    let msg = String::from_utf8_lossy(&out.stderr).trim().to_string();
    (out.status.code().unwrap_or(-1), msg)
}

fn bounds() -> (Vec<f64>, Vec<f64>) {
    ModelConfig::reference().domain.input_bounds()
}

/// A freshly initialised network with its output bias set to the terminal
/// value 1, keeping the output at the scale of the true solution.
fn random_net(n_hidden: usize, rng: &mut ChaCha8Rng) -> Network {
    let (lo, hi) = bounds();
    let mut net = Network::init(n_hidden, &lo, &hi, rng.random()).unwrap();
    *net.output_bias_mut() = 1.0;
    net
}

/// A random network kept within 0.5 of 1, so the surface stays positive.
fn positive_net(n_hidden: usize, rng: &mut ChaCha8Rng) -> Network {
    let mut net = random_net(n_hidden, rng);
    let spread: f64 = net.output_weights_mut().iter().map(|w| w.abs()).sum();
    let scale = rng.random_range(0.1..0.5) / spread;
    for w in net.output_weights_mut() {
        *w *= scale;
    }
    net
}

fn reference(p: f64) -> HestonModel {
    let mut ps = ModelConfig::reference().params;
    ps.p = p;
    HestonModel::new(ps, 1e-2).unwrap()
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let d = (a - b).abs();
    if d <= floor {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let model = reference(0.0005);
    let dom = ModelConfig::reference().domain;
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for k in 0..20 {
        let n_hidden = [1, 5, 50][k % 3];
        let net = random_net(n_hidden, &mut rng);
        let batch = SampleBatch::draw(&dom, 12, 4, &mut rng);
        let prepared = PreparedBatch::new(batch.clone(), &model).unwrap();
        let (_, grad, _) = loss_and_gradient(&net, &prepared, false).unwrap();
        for i in 0..grad.len() {
            let mut up = net.clone();
            up.params_mut()[i] += h;
            let mut down = net.clone();
            down.params_mut()[i] -= h;
            let fd = (loss(&up, &batch, &model).unwrap().j - loss(&down, &batch, &model).unwrap().j) / (2.0 * h);
            worst = worst.max(rel_err(grad[i], fd, 1e-9));
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-5 && secs < 60.0,
        format!("worst rel err {worst:.2e} over {checked} parameters of 20 nets (limit 1e-5), {secs:.1} s"),
    )
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (lo, hi) = bounds();
    let h = 1e-5;
    let (mut worst_g, mut worst_h) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let net = random_net(rng.random_range(1..=50), &mut rng);
        let x: Vec<f64> = (0..3).map(|k| rng.random_range(lo[k]..hi[k])).collect();
        let (t, y) = (x[0], [x[1], x[2]]);
        let (dt, grad) = net.input_gradient(t, &y);
        let analytic = [dt, grad[0], grad[1]];
        let mut fd = [0.0; 3];
        for k in 0..3 {
            let mut a = x.clone();
            let mut b = x.clone();
            a[k] += h;
            b[k] -= h;
            fd[k] = (net.forward(a[0], &a[1..]) - net.forward(b[0], &b[1..])) / (2.0 * h);
        }
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let e = (0..3).map(|k| (analytic[k] - fd[k]).abs()).fold(0.0, f64::max) / scale;
        worst_g = worst_g.max(e);

        let hess = net.input_hessian(t, &y);
        let mut fd_h = [[0.0; 2]; 2];
        for c in 0..2 {
            let mut a = y;
            let mut b = y;
            a[c] += h;
            b[c] -= h;
            let (ga, gb) = (net.input_gradient(t, &a).1, net.input_gradient(t, &b).1);
            for r in 0..2 {
                fd_h[r][c] = (ga[r] - gb[r]) / (2.0 * h);
            }
        }
        let scale = fd_h.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let mut e = 0.0f64;
        for r in 0..2 {
            for c in 0..2 {
                e = e.max((hess[(r, c)] - fd_h[r][c]).abs());
            }
        }
        worst_h = worst_h.max(e / scale);
    }
    verdict(
        worst_g <= 1e-6 && worst_h <= 1e-4,
        format!("gradient rel err {worst_g:.2e} (limit 1e-6), hessian rel err {worst_h:.2e} (limit 1e-4) at 100 points"),
    )
}

fn criterion_3(work: &Path) -> Verdict {
    let cfg = RunConfig::from_toml_str(CONSTANT).unwrap();
    let ps = cfg.model.params;
    let model = ConstantModel::new(ps.p, ps.r, cfg.mu_const, cfg.sigma2_const, ps.horizon).unwrap();
    let c = model.decay_rate();
    let horizon = ps.horizon;
    let dom = cfg.model.domain;

    let start = Instant::now();
    let dir = work.join("constant-dgm");
    if let Err(e) = commands::solve_dgm(&cfg, &dir) {
        return verdict(false, format!("training failed: {e}"));
    }
    let dgm_secs = start.elapsed().as_secs_f64();
    let net = Network::load(&dir.join(commands::MODEL_FILE)).unwrap();
    let mut dgm_err = 0.0f64;
    for t in lattice(0.0, horizon, 4) {
        for y1 in lattice(dom.y1_lo, dom.y1_hi, 20) {
            for y2 in lattice(dom.y2_lo, dom.y2_hi, 20) {
                dgm_err = dgm_err.max((net.forward(t, &[y1, y2]) - constant_oracle(t, c, horizon)).abs());
            }
        }
    }

    let start = Instant::now();
    let grid = Grid3D::standard(&dom).unwrap();
    let exact = FnBoundary(|t: f64, _: f64, _: f64| constant_oracle(t, c, horizon));
    let sol = FdmSolver::new(grid, &model).unwrap().solve_backward(&exact, 1e-10, 20).unwrap();
    let fdm_secs = start.elapsed().as_secs_f64();
    let mut fdm_err = 0.0f64;
    for n in 0..=grid.nt {
        let want = constant_oracle(grid.t(n), c, horizon);
        for v in sol.cube.level(n) {
            fdm_err = fdm_err.max((v - want).abs());
        }
    }
    verdict(
        dgm_err <= 1e-2 && fdm_err <= 1e-3 && fdm_secs < 5.0,
        format!(
            "c = {c}: DGM max err {dgm_err:.2e} (limit 1e-2, {} outer steps, {dgm_secs:.0} s), \
             FDM max err {fdm_err:.2e} over 41 levels (limit 1e-3, {fdm_secs:.2} s)",
            cfg.train.max_outer_steps
        ),
    )
}

/// `u* = 1 + 0.5 (T - t) sin(0.3 y1 + 0.2) cos(0.25 y2)` and its exact
/// spatial derivatives.
fn manufactured(t: f64, y1: f64, y2: f64) -> (f64, [f64; 2], [f64; 4]) {
    let a = 0.5 * (1.0 - t);
    let (s, c) = (0.3 * y1 + 0.2).sin_cos();
    let (s2, c2) = (0.25 * y2).sin_cos();
    let h12 = -a * 0.075 * c * s2;
    (
        1.0 + a * s * c2,
        [a * 0.3 * c * c2, -a * 0.25 * s * s2],
        [-a * 0.09 * s * c2, h12, h12, -a * 0.0625 * s * c2],
    )
}

/// Max nodal error of one forced level solve, time step `T / nt`.
fn manufactured_error(model: &dyn Market, dom: &StateDomain, n: usize, nt: usize) -> f64 {
    let g = Grid3D::new(nt, n, n, dom).unwrap();
    let solver = FdmSolver::new(g, model).unwrap();
    let (t0, t1) = (g.t(0), g.t(1));
    let mut above = vec![0.0; g.level_len()];
    for i in 0..=g.n1 {
        for j in 0..=g.n2 {
            above[g.node(i, j)] = manufactured(t1, g.y1(i), g.y2(j)).0;
        }
    }
    let mut forcing = Vec::with_capacity(g.interior_count());
    for i in 1..g.n1 {
        for j in 1..g.n2 {
            let (y1, y2) = (g.y1(i), g.y2(j));
            let (u, gr, h) = manufactured(t0, y1, y2);
            let jet = PointJet {
                t: t0,
                y: DVector::from_vec(vec![y1, y2]),
                u,
                du_dt: (manufactured(t1, y1, y2).0 - u) / g.dt(),
                grad: DVector::from_vec(gr.to_vec()),
                hess: DMatrix::from_row_slice(2, 2, &h),
            };
            forcing.push(residual(&jet, &model.coefficients(&[y1, y2]).unwrap()).unwrap());
        }
    }
    let bc = FnBoundary(|t: f64, y1: f64, y2: f64| manufactured(t, y1, y2).0);
    let sol = solver
        .newton_solve_level_forced(0, &above, &bc, Some(&forcing), 1e-10, 30)
        .unwrap();
    let mut err = 0.0f64;
    for i in 1..g.n1 {
        for j in 1..g.n2 {
            err = err.max((sol.field[g.node(i, j)] - manufactured(t0, g.y1(i), g.y2(j)).0).abs());
        }
    }
    err
}

fn criterion_4() -> Verdict {
    // dt = T/1000 keeps Z dt below 0.1 on the 160-cell grid
    let model = reference(0.0005);
    let dom = ModelConfig::reference().domain;
    let errs: Vec<f64> = [40, 80, 160].iter().map(|&n| manufactured_error(&model, &dom, n, 1000)).collect();
    let orders: Vec<f64> = errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    verdict(
        orders.iter().all(|&o| o >= 1.8),
        format!(
            "max errors [{}] on 40/80/160 cells, observed orders {orders:.3?} (limit 1.8)",
            errs.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

/// Trains (via the binary) and solves the finite difference problem with the
/// trained boundary. Returns the two run directories and the solver's exit
/// status.
fn pipeline(work: &Path, name: &str, config: &str) -> Result<(PathBuf, PathBuf, i32), String> {
    let cfg_path = work.join(format!("{name}.toml"));
    std::fs::write(&cfg_path, config).unwrap();
    let dgm = work.join(format!("{name}-dgm"));
    let fdm = work.join(format!("{name}-fdm"));
    let cfg = cfg_path.to_str().unwrap();
    let (code, msg) = run_bin(&["solve-dgm", "--config", cfg, "--out-dir", dgm.to_str().unwrap()]);
    if code != 0 {
        return Err(format!("solve-dgm exited {code}: {msg}"));
    }
    let (code, msg) = run_bin(&[
        "solve-fdm",
        "--config",
        cfg,
        "--model",
        dgm.to_str().unwrap(),
        "--out-dir",
        fdm.to_str().unwrap(),
    ]);
    if code != 0 && code != 4 {
        return Err(format!("solve-fdm exited {code}: {msg}"));
    }
    Ok((dgm, fdm, code))
}

fn surface_means(dir: &Path) -> Vec<(f64, f64)> {
    let m = RunManifest::read(dir).unwrap();
    let entries: Vec<commands::SurfaceEntry> = serde_json::from_value(m.details["surfaces"].clone()).unwrap();
    entries
        .iter()
        .map(|e| {
            let text = std::fs::read(dir.join(&e.path)).unwrap();
            let s = SurfaceGrid::read_csv(text.as_slice()).unwrap();
            let mean = s.values.iter().map(|v| (v - 1.0).abs()).sum::<f64>() / s.values.len() as f64;
            (e.t, mean)
        })
        .collect()
}

fn nonincreasing(means: &[(f64, f64)]) -> bool {
    means.windows(2).all(|w| w[1].1 <= w[0].1)
}

fn fmt_means(means: &[(f64, f64)]) -> String {
    means.iter().map(|(t, m)| format!("{t}:{m:.4}")).collect::<Vec<_>>().join(" ")
}

fn criterion_5(fdm: &Path, code: i32) -> Verdict {
    let m = RunManifest::read(fdm).unwrap();
    let levels = m.details["levels"].as_array().cloned().unwrap_or_default();
    let mut worst = 0.0f64;
    let mut worst_level = 0;
    let mut floor = 0.0f64;
    let mut max_it = 0;
    for l in &levels {
        let r = l["residual_norms"].as_array().unwrap().last().unwrap().as_f64().unwrap();
        if r > worst {
            worst = r;
            worst_level = l["level"].as_u64().unwrap();
        }
        floor = floor.max(l["rounding_floor"].as_f64().unwrap());
        max_it = max_it.max(l["iterations"].as_u64().unwrap());
    }
    let secs = m.timings.values().sum::<f64>();
    let solved = levels.len();
    verdict(
        code == 0 && solved == 40 && worst <= 1e-10 && max_it <= 20 && secs <= 120.0,
        format!(
            "{solved}/40 levels, max iterations {max_it}, worst final |F| {worst:.2e} at level {worst_level} \
             (limit 1e-10; largest rounding floor of F {floor:.2e}), {secs:.1} s"
        ),
    )
}

fn criterion_6(dgm: &Path, fdm: &Path, cfg: &RunConfig) -> Verdict {
    let dgm_means = surface_means(dgm);
    let fdm_means = surface_means(fdm);
    let net = Network::load(&dgm.join(commands::MODEL_FILE)).unwrap();
    let w = cfg.window();
    let mut terminal = 0.0f64;
    for y1 in lattice(w[0], w[1], 20) {
        for y2 in lattice(w[2], w[3], 20) {
            terminal = terminal.max((net.forward(cfg.horizon(), &[y1, y2]) - 1.0).abs());
        }
    }
    verdict(
        nonincreasing(&dgm_means) && nonincreasing(&fdm_means) && terminal <= 0.05,
        format!(
            "mean |u-1| by t: DGM [{}], FDM [{}]; DGM max |f(T)-1| on 21x21 window lattice {terminal:.4} (limit 0.05)",
            fmt_means(&dgm_means),
            fmt_means(&fdm_means)
        ),
    )
}

fn criterion_7(work: &Path, dgm: &Path, fdm: &Path) -> Verdict {
    let out = work.join("p0005-compare");
    let (code, msg) = run_bin(&["compare", dgm.to_str().unwrap(), fdm.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    if code != 0 {
        return verdict(false, format!("compare exited {code}: {msg}"));
    }
    let rows = commands::read_summary(&out).unwrap();
    let at = |t: f64| rows.iter().find(|r| (r.0 - t).abs() < 1e-12).map(|r| r.1);
    match (at(0.0), at(0.75)) {
        (Some(a), Some(b)) => verdict(a >= b, format!("mean |u_DGM - u_FDM|: t=0 {a:.4e}, t=0.75T {b:.4e}")),
        _ => verdict(false, "summary lacks t = 0 or t = 0.75T".into()),
    }
}

struct Affine;

impl SolvedSurface for Affine {
    fn value(&self, t: f64, y: &[f64]) -> f64 {
        2.0 + 0.1 * t + 0.03 * y[0] - 0.02 * y[1]
    }
    fn gradient(&self, _t: f64, _y: &[f64]) -> DVector<f64> {
        DVector::from_vec(vec![0.03, -0.02])
    }
}

fn criterion_8() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut worst_ratio = 0.0f64;
    let mut worst_red = 0.0f64;
    for k in 0..100 {
        let p = [0.0005, 0.3, 0.5][k % 3];
        let mut ps = ModelConfig::reference().params;
        ps.p = p;
        ps.rho1 = 0.0;
        ps.rho2 = 0.0;
        let m = HestonModel::new(ps, 1e-2).unwrap();
        let net = positive_net(10, &mut rng);
        let (t, y) = (rng.random_range(0.0..1.0), [rng.random_range(-10.0..10.0), rng.random_range(0.05..10.0)]);
        let surfaces: [&dyn SolvedSurface; 2] = [&net, &Affine];
        for s in surfaces {
            let w = optimal_weight(t, &y, s, &m).unwrap()[0];
            let want = y[0] / ((1.0 - p) * ps.sigma * ps.sigma * y[1]);
            worst_ratio = worst_ratio.max((w - want).abs() / want.abs().max(1.0));
        }

        let full = reference(p);
        let x = rng.random_range(0.01..100.0);
        let w = optimal_weight(t, &y, &net, &full).unwrap()[0];
        let d = homothetic_derivatives(x, p, net.value(t, &y), &net.gradient(t, &y));
        let wu = unreduced_weight(x, &y, &d, &full).unwrap()[0];
        worst_red = worst_red.max((w - wu).abs() / w.abs().max(1.0));
    }
    verdict(
        worst_ratio <= 1e-10 && worst_red <= 1e-12,
        format!(
            "Merton ratio err {worst_ratio:.2e} (limit 1e-10), unreduced vs reduced {worst_red:.2e} (limit 1e-12); \
             errors relative to max(1, |weight|)"
        ),
    )
}

fn criterion_9(work: &Path) -> Verdict {
    let text = REFERENCE_P0005.replace("max_outer_steps = 5000", "max_outer_steps = 30");
    let cfg = work.join("determinism.toml");
    std::fs::write(&cfg, text).unwrap();
    let dirs = [work.join("det-a"), work.join("det-b")];
    for d in &dirs {
        let (code, msg) = run_bin(&["solve-dgm", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out-dir", d.to_str().unwrap()]);
        if code != 0 {
            return verdict(false, format!("solve-dgm exited {code}: {msg}"));
        }
    }
    let a = RunManifest::read(&dirs[0]).unwrap();
    let mut same = 0;
    let mut differ = Vec::new();
    for out in &a.outputs {
        let x = std::fs::read(dirs[0].join(&out.path)).unwrap();
        let y = std::fs::read(dirs[1].join(&out.path)).unwrap();
        if x == y {
            same += 1;
        } else {
            differ.push(out.path.clone());
        }
    }
    verdict(
        differ.is_empty() && same >= 7,
        format!("{same} of {} output files byte-identical across two runs (seed 7, 30 outer steps){}",
            a.outputs.len(),
            if differ.is_empty() { String::new() } else { format!("; differing: {differ:?}") }),
    )
}

fn criterion_10(fdm: &Path, code: i32) -> Verdict {
    let m = RunManifest::read(fdm).unwrap();
    let max_abs: Vec<String> = m.details["max_abs_u"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().map_or("-".into(), |x| format!("{x:.3e}")))
        .collect();
    let levels = m.details["levels"].as_array().map_or(0, |l| l.len());
    verdict(
        code == 0 || code == 4,
        format!(
            "exit status {code} ({}), {levels}/40 levels solved; max |u| per level 0..40: [{}]",
            m.details["status"].as_str().unwrap_or("?"),
            max_abs.join(" ")
        ),
    )
}

fn main() {
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let work = work_dir();
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut report = |id: usize, name: &'static str, v: Verdict| {
        println!("criterion {id:>2} {}: {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((id, name, v));
    };

    report(1, "parameter gradient vs finite differences", criterion_1());
    report(2, "input derivative consistency", criterion_2());
    report(3, "constant-coefficient oracle", criterion_3(&work));
    report(4, "stencil order on a manufactured solution", criterion_4());

    let cfg = RunConfig::from_toml_str(REFERENCE_P0005).unwrap();
    match pipeline(&work, "p0005", REFERENCE_P0005) {
        Ok((dgm, fdm, code)) => {
            report(5, "Newton robustness at p = 0.0005", criterion_5(&fdm, code));
            report(6, "approach to the terminal plane", criterion_6(&dgm, &fdm, &cfg));
            report(7, "error growth toward t = 0", criterion_7(&work, &dgm, &fdm));
        }
        Err(e) => {
            for (id, name) in [(5, "Newton robustness at p = 0.0005"), (6, "approach to the terminal plane"), (7, "error growth toward t = 0")] {
                report(id, name, verdict(false, e.clone()));
            }
        }
    }
    report(8, "Merton ratio and reduction identity", criterion_8());
    report(9, "determinism of solve-dgm", criterion_9(&work));
    match pipeline(&work, "p05", REFERENCE_P05) {
        Ok((_, fdm, code)) => report(10, "finite differences at p = 0.5", criterion_10(&fdm, code)),
        Err(e) => report(10, "finite differences at p = 0.5", verdict(false, e)),
    }

    let passed = results.iter().filter(|r| r.2.pass).count();
    println!("acceptance: {passed} of {} criteria passed; runs kept in {}", results.len(), work.display());
    if strict && passed != results.len() {
        std::process::exit(1);
    }
}
