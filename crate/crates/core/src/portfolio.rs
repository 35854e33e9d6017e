//! Optimal portfolio weights from a solved reduced value function.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::fdm::SolutionCube;
use crate::model::{Market, ReturnMoments};
use crate::net::Network;
use crate::pde::U_GUARD;

/// A solved `u(t, y)` with its spatial gradient.
pub trait SolvedSurface {
    fn value(&self, t: f64, y: &[f64]) -> f64;
    fn gradient(&self, t: f64, y: &[f64]) -> DVector<f64>;
}

impl SolvedSurface for Network {
    fn value(&self, t: f64, y: &[f64]) -> f64 {
        self.forward(t, y)
    }

    fn gradient(&self, t: f64, y: &[f64]) -> DVector<f64> {
        self.input_gradient(t, y).1
    }
}

/// Trilinear interpolation of a finite difference cube. The gradient is a
/// central difference of the interpolant with the grid spacing as step,
/// one-sided where the stencil would leave the grid.
#[derive(Debug, Clone)]
pub struct CubeSurface {
    cube: SolutionCube,
}

fn locate(x: f64, lo: f64, step: f64, cells: usize) -> (usize, f64) {
    let s = ((x - lo) / step).clamp(0.0, cells as f64);
    let k = (s.floor() as usize).min(cells - 1);
    (k, s - k as f64)
}

impl CubeSurface {
    pub fn new(cube: SolutionCube) -> Self {
        Self { cube }
    }

    pub fn cube(&self) -> &SolutionCube {
        &self.cube
    }
}

impl SolvedSurface for CubeSurface {
    fn value(&self, t: f64, y: &[f64]) -> f64 {
        let g = &self.cube.grid;
        let (n, ft) = locate(t, 0.0, g.dt(), g.nt);
        let (i, f1) = locate(y[0], g.y1_lo, g.dy1(), g.n1);
        let (j, f2) = locate(y[1], g.y2_lo, g.dy2(), g.n2);
        let mut acc = 0.0;
        for (dn, wt) in [(0, 1.0 - ft), (1, ft)] {
            for (di, w1) in [(0, 1.0 - f1), (1, f1)] {
                for (dj, w2) in [(0, 1.0 - f2), (1, f2)] {
                    let w = wt * w1 * w2;
                    if w != 0.0 {
                        acc += w * self.cube.at(n + dn, i + di, j + dj);
                    }
                }
            }
        }
        acc
    }

    fn gradient(&self, t: f64, y: &[f64]) -> DVector<f64> {
        let g = &self.cube.grid;
        let bounds = [(g.y1_lo, g.y1_hi, g.dy1()), (g.y2_lo, g.y2_hi, g.dy2())];
        let mut grad = DVector::zeros(2);
        for (k, &(lo, hi, h)) in bounds.iter().enumerate() {
            let mut up = [y[0], y[1]];
            let mut down = [y[0], y[1]];
            let tol = 1e-12 * h;
            let (hu, hd) = if y[k] - h < lo - tol {
                (h, 0.0)
            } else if y[k] + h > hi + tol {
                (0.0, h)
            } else {
                (h, h)
            };
            up[k] += hu;
            down[k] -= hd;
            grad[k] = (self.value(t, &up) - self.value(t, &down)) / (hu + hd);
        }
        grad
    }
}

/// `(Sigma^-1 mu + Sigma^-1 Upsilon grad u / u) / (1 - p)`.
pub fn optimal_weight(t: f64, y: &[f64], surface: &dyn SolvedSurface, model: &dyn Market) -> Result<DVector<f64>> {
    let u = surface.value(t, y);
    if !(u >= U_GUARD) {
        return Err(Error::DegenerateSurface { u });
    }
    let grad = surface.gradient(t, y);
    let moments = model.return_moments(y)?;
    weight_from_parts(&moments, u, &grad, model.p())
}

pub(crate) fn weight_from_parts(moments: &ReturnMoments, u: f64, grad: &DVector<f64>, p: f64) -> Result<DVector<f64>> {
    let sigma_inv = moments.sigma_inverse()?;
    let tilt = &moments.mu + &moments.upsilon * grad / u;
    Ok(sigma_inv * tilt / (1.0 - p))
}

/// Wealth derivatives of the full value function `V(t, x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueDerivatives {
    pub v_x: f64,
    pub v_xx: f64,
    /// `grad_y V_x`.
    pub grad_y_v_x: DVector<f64>,
}

/// `-(1 / (x V_xx)) Sigma^-1 (mu V_x + Upsilon grad_y V_x)`.
pub fn unreduced_weight(x: f64, y: &[f64], derivs: &ValueDerivatives, model: &dyn Market) -> Result<DVector<f64>> {
    if !(x > 0.0) {
        return Err(Error::NonPositiveWealth(x));
    }
    if !(derivs.v_xx < 0.0) {
        return Err(Error::NotConcave { vxx: derivs.v_xx });
    }
    let moments = model.return_moments(y)?;
    let sigma_inv = moments.sigma_inverse()?;
    let inner = &moments.mu * derivs.v_x + &moments.upsilon * &derivs.grad_y_v_x;
    Ok(sigma_inv * inner * (-1.0 / (x * derivs.v_xx)))
}

/// Wealth derivatives of `V = x^p u / p` from `u` and `grad_y u`.
pub fn homothetic_derivatives(x: f64, p: f64, u: f64, grad_u: &DVector<f64>) -> ValueDerivatives {
    let xp1 = x.powf(p - 1.0);
    ValueDerivatives {
        v_x: xp1 * u,
        v_xx: (p - 1.0) * x.powf(p - 2.0) * u,
        grad_y_v_x: grad_u * xp1,
    }
}
