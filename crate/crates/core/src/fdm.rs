//! Backward-in-time finite difference solver on a uniform `(t, y1, y2)` grid.
//!
//! Each time level `n` solves the nonlinear system
//!
//! ```text
//! (u^{n+1} - u^n)/dt + C1 D1 + C2 D2 + C3 D11 + C4 D12 + C5 D22 + C6 u^n
//!     - (1/u^n) [C7 D1^2 + C8 D1 D2 + C9 D2^2] = 0
//! ```
//!
//! for the interior values of `u^n` by Newton's method with an analytic
//! sparse Jacobian. `D*` are central differences of `u^n`; the boundary shell
//! of every level comes from a [`BoundaryProvider`].

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Market, StateDomain};
use crate::net::Network;
use crate::pde::U_GUARD;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid3D {
    pub nt: usize,
    pub n1: usize,
    pub n2: usize,
    pub horizon: f64,
    pub y1_lo: f64,
    pub y1_hi: f64,
    pub y2_lo: f64,
    pub y2_hi: f64,
}

impl Grid3D {
    pub fn new(nt: usize, n1: usize, n2: usize, domain: &StateDomain) -> Result<Self> {
        if nt < 1 || n1 < 2 || n2 < 2 {
            return Err(Error::InvalidParameter(
                "grid needs nt >= 1 and at least one interior node per state axis".into(),
            ));
        }
        domain.validate()?;
        Ok(Self {
            nt,
            n1,
            n2,
            horizon: domain.horizon,
            y1_lo: domain.y1_lo,
            y1_hi: domain.y1_hi,
            y2_lo: domain.y2_lo,
            y2_hi: domain.y2_hi,
        })
    }

    /// The 40 x 40 x 40 grid.
    pub fn standard(domain: &StateDomain) -> Result<Self> {
        Self::new(40, 40, 40, domain)
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.nt as f64
    }

    pub fn dy1(&self) -> f64 {
        (self.y1_hi - self.y1_lo) / self.n1 as f64
    }

    pub fn dy2(&self) -> f64 {
        (self.y2_hi - self.y2_lo) / self.n2 as f64
    }

    pub fn t(&self, n: usize) -> f64 {
        if n == self.nt {
            self.horizon
        } else {
            n as f64 * self.dt()
        }
    }

    pub fn y1(&self, i: usize) -> f64 {
        if i == self.n1 {
            self.y1_hi
        } else {
            self.y1_lo + i as f64 * self.dy1()
        }
    }

    pub fn y2(&self, j: usize) -> f64 {
        if j == self.n2 {
            self.y2_hi
        } else {
            self.y2_lo + j as f64 * self.dy2()
        }
    }

    /// Nodes per level, boundary included.
    pub fn level_len(&self) -> usize {
        (self.n1 + 1) * (self.n2 + 1)
    }

    pub fn interior_count(&self) -> usize {
        (self.n1 - 1) * (self.n2 - 1)
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize) -> usize {
        i * (self.n2 + 1) + j
    }

    #[inline]
    fn unknown(&self, i: usize, j: usize) -> usize {
        (i - 1) * (self.n2 - 1) + (j - 1)
    }

    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i == self.n1 || j == self.n2
    }

    fn interior_nodes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (1..self.n1).flat_map(move |i| (1..self.n2).map(move |j| (i, j)))
    }
}

/// Values on the spatial boundary shell.
pub trait BoundaryProvider {
    fn value(&self, t: f64, y1: f64, y2: f64) -> f64;
}

/// `u = 1` on the whole shell.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantOne;

impl BoundaryProvider for ConstantOne {
    fn value(&self, _t: f64, _y1: f64, _y2: f64) -> f64 {
        1.0
    }
}

/// Trained network evaluated at the exact node time.
impl BoundaryProvider for Network {
    fn value(&self, t: f64, y1: f64, y2: f64) -> f64 {
        self.forward(t, &[y1, y2])
    }
}

/// Boundary values from a closure.
pub struct FnBoundary<F>(pub F);

impl<F: Fn(f64, f64, f64) -> f64> BoundaryProvider for FnBoundary<F> {
    fn value(&self, t: f64, y1: f64, y2: f64) -> f64 {
        (self.0)(t, y1, y2)
    }
}

/// Solution values `u[n][i][j]`, time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionCube {
    pub grid: Grid3D,
    values: Vec<f64>,
}

impl SolutionCube {
    pub fn filled(grid: Grid3D, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; (grid.nt + 1) * grid.level_len()],
        }
    }

    pub fn at(&self, n: usize, i: usize, j: usize) -> f64 {
        self.values[n * self.grid.level_len() + self.grid.node(i, j)]
    }

    pub fn level(&self, n: usize) -> &[f64] {
        let len = self.grid.level_len();
        &self.values[n * len..(n + 1) * len]
    }

    pub fn level_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.grid.level_len();
        &mut self.values[n * len..(n + 1) * len]
    }

    pub fn max_abs(&self, n: usize) -> f64 {
        self.level(n).iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// `C1..C9` at one interior node; `C7..C9` already carry `q/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StencilCoefficients(pub [f64; 9]);

/// Relative size of the rounding floor: a node counts as converged once
/// `|F_i| <= max(tol, FLOOR_FACTOR * eps * sum_k |term_k|)`. When `u` is
/// large the terms of `F` are large too, and an absolute `tol` alone can sit
/// below what any `f64` field can reach.
pub const FLOOR_FACTOR: f64 = 16.0;

#[derive(Debug, Clone)]
pub struct LevelSolution {
    pub field: Vec<f64>,
    pub iterations: usize,
    pub residual_norms: Vec<f64>,
    /// Largest per-node rounding floor at the accepted iterate.
    pub rounding_floor: f64,
}

/// Per-level Newton report.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelReport {
    pub level: usize,
    pub iterations: usize,
    pub residual_norms: Vec<f64>,
    pub rounding_floor: f64,
}

#[derive(Debug, Clone)]
pub struct FdmSolution {
    pub cube: SolutionCube,
    /// Levels `nt - 1` down to `0` in solve order.
    pub levels: Vec<LevelReport>,
}

impl FdmSolution {
    pub fn iterations(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.iterations).collect()
    }
}

pub struct FdmSolver {
    grid: Grid3D,
    coeffs: Vec<StencilCoefficients>,
}

impl FdmSolver {
    /// Evaluates `C1..C9` pointwise at every interior node.
    pub fn new(grid: Grid3D, model: &dyn Market) -> Result<Self> {
        if model.state_dim() != 2 {
            return Err(Error::InvalidParameter("the stencil is two-dimensional".into()));
        }
        let coeffs = grid
            .interior_nodes()
            .map(|(i, j)| {
                let c = model.coefficients(&[grid.y1(i), grid.y2(j)])?;
                Ok(StencilCoefficients([
                    c.first_order[0],
                    c.first_order[1],
                    c.second_order[(0, 0)],
                    2.0 * c.second_order[(0, 1)],
                    c.second_order[(1, 1)],
                    c.zeroth_order,
                    c.grad_quad[(0, 0)],
                    2.0 * c.grad_quad[(0, 1)],
                    c.grad_quad[(1, 1)],
                ]))
            })
            .collect::<Result<_>>()?;
        Ok(Self { grid, coeffs })
    }

    pub fn grid(&self) -> &Grid3D {
        &self.grid
    }

    pub fn coefficients_at(&self, i: usize, j: usize) -> StencilCoefficients {
        self.coeffs[self.grid.unknown(i, j)]
    }

    /// Left-hand side of the discrete equation at every interior node, ordered
    /// `(i, j)` with `j` fastest. Both fields include the boundary shell.
    pub fn stencil_residual(&self, level_n: &[f64], level_np1: &[f64]) -> Result<Vec<f64>> {
        Ok(self.residual_with_magnitude(level_n, level_np1)?.0)
    }

    /// The residual together with, per node, the sum of the absolute values
    /// of the quantities it is assembled from.
    fn residual_with_magnitude(&self, level_n: &[f64], level_np1: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let g = &self.grid;
        let (dt, h1, h2) = (g.dt(), g.dy1(), g.dy2());
        let mut out = Vec::with_capacity(g.interior_count());
        let mut mag = Vec::with_capacity(g.interior_count());
        for (i, j) in g.interior_nodes() {
            let u = |a: usize, b: usize| level_n[g.node(a, b)];
            let c = &self.coeffs[g.unknown(i, j)].0;
            let uc = u(i, j);
            if !(uc.abs() >= U_GUARD) {
                return Err(Error::DivisionHazard { u: uc });
            }
            let d1 = (u(i + 1, j) - u(i - 1, j)) / (2.0 * h1);
            let d2 = (u(i, j + 1) - u(i, j - 1)) / (2.0 * h2);
            let d11 = (u(i + 1, j) - 2.0 * uc + u(i - 1, j)) / (h1 * h1);
            let d22 = (u(i, j + 1) - 2.0 * uc + u(i, j - 1)) / (h2 * h2);
            let d12 = (u(i + 1, j + 1) - u(i + 1, j - 1) - u(i - 1, j + 1) + u(i - 1, j - 1))
                / (4.0 * h1 * h2);
            let time = (level_np1[g.node(i, j)] - uc) / dt;
            let quad = c[6] * d1 * d1 + c[7] * d1 * d2 + c[8] * d2 * d2;
            out.push(
                time + c[0] * d1 + c[1] * d2 + c[2] * d11 + c[3] * d12 + c[4] * d22 + c[5] * uc
                    - quad / uc,
            );
            let near = (i - 1..=i + 1)
                .flat_map(|a| (j - 1..=j + 1).map(move |b| (a, b)))
                .fold(0.0f64, |m, (a, b)| m.max(u(a, b).abs()));
            mag.push(
                (level_np1[g.node(i, j)].abs() + uc.abs()) / dt
                    + near
                        * (c[0].abs() / h1
                            + c[1].abs() / h2
                            + 4.0 * c[2].abs() / (h1 * h1)
                            + c[3].abs() / (h1 * h2)
                            + 4.0 * c[4].abs() / (h2 * h2)
                            + c[5].abs())
                    + (c[6] * d1 * d1).abs()
                    + (c[7] * d1 * d2).abs()
                    + (c[8] * d2 * d2).abs(),
            );
        }
        Ok((out, mag))
    }

    /// Analytic Jacobian of [`Self::stencil_residual`] in the interior unknowns.
    pub fn jacobian_triplets(&self, level_n: &[f64]) -> Vec<Triplet<usize, usize, f64>> {
        let g = &self.grid;
        let (dt, h1, h2) = (g.dt(), g.dy1(), g.dy2());
        let mut trips = Vec::with_capacity(9 * g.interior_count());
        for (i, j) in g.interior_nodes() {
            let row = g.unknown(i, j);
            let u = |a: usize, b: usize| level_n[g.node(a, b)];
            let c = &self.coeffs[row].0;
            let uc = u(i, j);
            let d1 = (u(i + 1, j) - u(i - 1, j)) / (2.0 * h1);
            let d2 = (u(i, j + 1) - u(i, j - 1)) / (2.0 * h2);
            let quad = c[6] * d1 * d1 + c[7] * d1 * d2 + c[8] * d2 * d2;
            // d quad / d D1 and d quad / d D2
            let q1 = 2.0 * c[6] * d1 + c[7] * d2;
            let q2 = c[7] * d1 + 2.0 * c[8] * d2;

            let diag = -1.0 / dt - 2.0 * c[2] / (h1 * h1) - 2.0 * c[4] / (h2 * h2) + c[5] + quad / (uc * uc);
            let e1 = (c[0] - q1 / uc) / (2.0 * h1);
            let e2 = (c[1] - q2 / uc) / (2.0 * h2);
            let s1 = c[2] / (h1 * h1);
            let s2 = c[4] / (h2 * h2);
            let x = c[3] / (4.0 * h1 * h2);

            let mut push = |a: usize, b: usize, v: f64| {
                if !g.is_boundary(a, b) && v != 0.0 {
                    trips.push(Triplet::new(row, g.unknown(a, b), v));
                }
            };
            push(i, j, diag);
            push(i + 1, j, s1 + e1);
            push(i - 1, j, s1 - e1);
            push(i, j + 1, s2 + e2);
            push(i, j - 1, s2 - e2);
            push(i + 1, j + 1, x);
            push(i - 1, j - 1, x);
            push(i + 1, j - 1, -x);
            push(i - 1, j + 1, -x);
        }
        trips
    }

    fn boundary_field(&self, n: usize, boundary: &dyn BoundaryProvider, interior_from: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        let t = g.t(n);
        let mut field = interior_from.to_vec();
        for i in 0..=g.n1 {
            for j in 0..=g.n2 {
                if g.is_boundary(i, j) {
                    field[g.node(i, j)] = boundary.value(t, g.y1(i), g.y2(j));
                }
            }
        }
        field
    }

    /// Newton solve for level `level` given the completed level above. The
    /// iteration count includes the final convergence check, so an exact
    /// initial guess reports one iteration.
    pub fn newton_solve_level(
        &self,
        level: usize,
        level_np1: &[f64],
        boundary: &dyn BoundaryProvider,
        tol: f64,
        max_iter: usize,
    ) -> Result<LevelSolution> {
        self.newton_solve_level_forced(level, level_np1, boundary, None, tol, max_iter)
    }

    /// As [`Self::newton_solve_level`] for the forced equation
    /// `F(u) = forcing`, with `forcing` ordered like the residual. Used to
    /// verify the stencil against manufactured solutions.
    pub fn newton_solve_level_forced(
        &self,
        level: usize,
        level_np1: &[f64],
        boundary: &dyn BoundaryProvider,
        forcing: Option<&[f64]>,
        tol: f64,
        max_iter: usize,
    ) -> Result<LevelSolution> {
        if forcing.is_some_and(|f| f.len() != self.grid.interior_count()) {
            return Err(Error::InvalidParameter("forcing must have one value per interior node".into()));
        }
        if !(tol > 0.0) {
            return Err(Error::InvalidParameter("newton tolerance must be positive".into()));
        }
        let g = &self.grid;
        let at = |e: Error| Error::AtLevel {
            level,
            source: Box::new(e),
        };
        let mut field = self.boundary_field(level, boundary, level_np1);
        if let Some(bad) = field.iter().find(|v| !v.is_finite()) {
            return Err(at(Error::InvalidParameter(format!("non-finite boundary value {bad}"))));
        }
        let mut norms = Vec::new();
        for it in 1..=max_iter {
            let (mut f, mag) = self.residual_with_magnitude(&field, level_np1).map_err(at)?;
            let mut mag = mag;
            if let Some(src) = forcing {
                for ((r, m), s) in f.iter_mut().zip(mag.iter_mut()).zip(src) {
                    *r -= s;
                    *m += s.abs();
                }
            }
            let norm = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            norms.push(norm);
            let floor = mag.iter().fold(0.0f64, |m, v| m.max(FLOOR_FACTOR * f64::EPSILON * v));
            if !norm.is_finite() {
                return Err(Error::NewtonNonConvergence {
                    level,
                    iterations: it,
                    residual: norm,
                });
            }
            let converged = f
                .iter()
                .zip(&mag)
                .all(|(r, m)| r.abs() <= tol.max(FLOOR_FACTOR * f64::EPSILON * m));
            if converged {
                return Ok(LevelSolution {
                    field,
                    iterations: it,
                    residual_norms: norms,
                    rounding_floor: floor,
                });
            }
            let m = g.interior_count();
            let jac = SparseColMat::<usize, f64>::try_new_from_triplets(m, m, &self.jacobian_triplets(&field))
                .map_err(|_| Error::SingularJacobian { level })?;
            let lu = jac.sp_lu().map_err(|_| Error::SingularJacobian { level })?;
            let mut rhs = Mat::<f64>::from_fn(m, 1, |r, _| -f[r]);
            lu.solve_in_place(rhs.as_mut());
            if (0..m).any(|r| !rhs[(r, 0)].is_finite()) {
                return Err(Error::SingularJacobian { level });
            }
            for (i, j) in g.interior_nodes() {
                field[g.node(i, j)] += rhs[(g.unknown(i, j), 0)];
            }
        }
        Err(Error::NewtonNonConvergence {
            level,
            iterations: max_iter,
            residual: norms.last().copied().unwrap_or(f64::NAN),
        })
    }

    /// Marches from the terminal level down to `t = 0`. On failure the cube
    /// holds every level solved so far, `NaN` below, together with the error.
    pub fn solve_backward_partial(
        &self,
        boundary: &dyn BoundaryProvider,
        tol: f64,
        max_iter: usize,
    ) -> (FdmSolution, Option<Error>) {
        let g = self.grid;
        let mut cube = SolutionCube::filled(g, f64::NAN);
        cube.level_mut(g.nt).fill(1.0);
        let mut levels = Vec::with_capacity(g.nt);
        for n in (0..g.nt).rev() {
            let above = cube.level(n + 1).to_vec();
            match self.newton_solve_level(n, &above, boundary, tol, max_iter) {
                Ok(sol) => {
                    cube.level_mut(n).copy_from_slice(&sol.field);
                    levels.push(LevelReport {
                        level: n,
                        iterations: sol.iterations,
                        residual_norms: sol.residual_norms,
                        rounding_floor: sol.rounding_floor,
                    });
                }
                Err(e) => return (FdmSolution { cube, levels }, Some(e)),
            }
        }
        (FdmSolution { cube, levels }, None)
    }

    pub fn solve_backward(&self, boundary: &dyn BoundaryProvider, tol: f64, max_iter: usize) -> Result<FdmSolution> {
        match self.solve_backward_partial(boundary, tol, max_iter) {
            (sol, None) => Ok(sol),
            (_, Some(e)) => Err(e),
        }
    }
}
