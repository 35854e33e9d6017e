//! Residual operator of the reduced HJB equation, terminal data and the
//! constant-coefficient analytic solution.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::CoefficientSet;

/// Smallest `|u|` accepted wherever the equation divides by `u`.
pub const U_GUARD: f64 = 1e-8;

/// Value and derivatives of a candidate solution at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointJet {
    pub t: f64,
    pub y: DVector<f64>,
    pub u: f64,
    pub du_dt: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl PointJet {
    /// A jet with zero spatial derivatives.
    pub fn flat(t: f64, y: &[f64], u: f64, du_dt: f64) -> Self {
        let d = y.len();
        Self {
            t,
            y: DVector::from_column_slice(y),
            u,
            du_dt,
            grad: DVector::zeros(d),
            hess: DMatrix::zeros(d, d),
        }
    }
}

/// Partial derivatives of the residual with respect to the jet entries.
/// The `du_dt` partial is always 1 and the Hessian partial is `second_order`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSensitivity {
    pub value: f64,
    pub d_u: f64,
    pub d_grad: DVector<f64>,
}

/// `u_t + F.grad + sum S_ij H_ij + Z u - (1/u) grad' G grad`.
pub fn residual(jet: &PointJet, coeffs: &CoefficientSet) -> Result<f64> {
    residual_parts(jet.u, jet.du_dt, &jet.grad, &jet.hess, coeffs)
}

pub(crate) fn residual_parts(
    u: f64,
    du_dt: f64,
    grad: &DVector<f64>,
    hess: &DMatrix<f64>,
    coeffs: &CoefficientSet,
) -> Result<f64> {
    if !(u.abs() >= U_GUARD) {
        return Err(Error::DivisionHazard { u });
    }
    let d = grad.len();
    let mut trace = 0.0;
    let mut quad = 0.0;
    for i in 0..d {
        for j in 0..d {
            trace += coeffs.second_order[(i, j)] * hess[(i, j)];
            quad += grad[i] * coeffs.grad_quad[(i, j)] * grad[j];
        }
    }
    Ok(du_dt + coeffs.first_order.dot(grad) + trace + coeffs.zeroth_order * u - quad / u)
}

/// Residual together with its partials in `u` and `grad`.
pub fn residual_with_sensitivity(
    u: f64,
    du_dt: f64,
    grad: &DVector<f64>,
    hess: &DMatrix<f64>,
    coeffs: &CoefficientSet,
) -> Result<ResidualSensitivity> {
    let value = residual_parts(u, du_dt, grad, hess, coeffs)?;
    let g_grad = &coeffs.grad_quad * grad;
    let quad = grad.dot(&g_grad);
    let d_u = coeffs.zeroth_order + quad / (u * u);
    let d_grad = &coeffs.first_order - g_grad * (2.0 / u);
    Ok(ResidualSensitivity {
        value,
        d_u,
        d_grad,
    })
}

/// `u(T, y) = 1`.
pub fn terminal_value(_y: &[f64]) -> f64 {
    1.0
}

/// `V = x^p u / p`.
pub fn value_from_reduced(x: f64, u: f64, p: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::NonPositiveWealth(x));
    }
    Ok(x.powf(p) * u / p)
}

/// Solution of `u_t + c u = 0`, `u(T) = 1`.
pub fn constant_oracle(t: f64, c: f64, horizon: f64) -> f64 {
    (c * (horizon - t)).exp()
}
