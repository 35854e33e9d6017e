//! Market parameters and the pointwise coefficients of the reduced PDE.
//!
//! The state process is `dY = b(Y) dt + a(Y) dW` and the excess return of the
//! risky assets is `dR = mu(Y) dt + sigma(Y) dZ` with `d<Z, W> = rho dt`.
//! After the homothetic reduction `V = x^p u / p` the value function factor
//! `u(t, y)` satisfies
//!
//! ```text
//! u_t + F . grad u + sum_ij S_ij u_{y_i y_j} + Z u - (1/u) grad u' G grad u = 0
//! ```
//!
//! where [`CoefficientSet`] carries `F`, `S`, `Z` and `G`.

use nalgebra::{DMatrix, DVector, Matrix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference calibration with `r = 1%`, `T = 1`, `p = 0.0005` and the
/// `[-10, 10] x [0, 10]` sampling box.
pub const REFERENCE_CONFIG: &str = include_str!("../configs/reference.toml");

/// Default clamp applied to `y2` wherever `sqrt(y2)` or `1 / y2` is evaluated.
pub const DEFAULT_Y2_FLOOR: f64 = 1e-2;

/// Smallest return variance accepted before `Sigma` is treated as singular.
pub const DEFAULT_VARIANCE_EPS: f64 = 1e-14;

/// Market and utility constants of the OU+CIR / Heston instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub theta1: f64,
    pub theta2: f64,
    pub k1: f64,
    pub k2: f64,
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
    pub sigma: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub r: f64,
    pub p: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.theta1,
            self.theta2,
            self.k1,
            self.k2,
            self.a11,
            self.a12,
            self.a21,
            self.a22,
            self.sigma,
            self.rho1,
            self.rho2,
            self.r,
            self.p,
            self.horizon,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite model parameter".into()));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "p must lie in (0, 1), got {}",
                self.p
            )));
        }
        if self.sigma <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.horizon <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "T must be positive, got {}",
                self.horizon
            )));
        }
        if self.rho1.abs() > 1.0 || self.rho2.abs() > 1.0 {
            return Err(Error::InvalidParameter(
                "correlations must lie in [-1, 1]".into(),
            ));
        }
        Ok(())
    }

    /// `q = p / (p - 1)`, always negative for admissible `p`.
    pub fn q(&self) -> f64 {
        self.p / (self.p - 1.0)
    }

    /// The constant loading matrix `A`.
    pub fn loading(&self) -> Matrix2<f64> {
        Matrix2::new(self.a11, self.a12, self.a21, self.a22)
    }
}

/// Box on which the PDE is sampled, gridded and plotted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateDomain {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub y1_lo: f64,
    pub y1_hi: f64,
    pub y2_lo: f64,
    pub y2_hi: f64,
    #[serde(default = "default_floor")]
    pub y2_floor: f64,
}

fn default_floor() -> f64 {
    DEFAULT_Y2_FLOOR
}

impl StateDomain {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidParameter("T must be positive".into()));
        }
        if !(self.y1_lo < self.y1_hi) {
            return Err(Error::InvalidParameter("y1_lo must be below y1_hi".into()));
        }
        if !(self.y2_lo < self.y2_hi) {
            return Err(Error::InvalidParameter("y2_lo must be below y2_hi".into()));
        }
        if !(self.y2_floor > 0.0 && self.y2_floor <= self.y2_hi) {
            return Err(Error::InvalidParameter(
                "y2_floor must lie in (0, y2_hi]".into(),
            ));
        }
        Ok(())
    }

    pub fn t_lo(&self) -> f64 {
        0.0
    }

    pub fn t_hi(&self) -> f64 {
        self.horizon
    }

    /// Lower and upper bounds of the network input `(t, y1, y2)`.
    pub fn input_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (
            vec![0.0, self.y1_lo, self.y2_lo],
            vec![self.horizon, self.y1_hi, self.y2_hi],
        )
    }

    pub fn contains(&self, t: f64, y: &[f64]) -> bool {
        (0.0..=self.horizon).contains(&t)
            && (self.y1_lo..=self.y1_hi).contains(&y[0])
            && (self.y2_lo..=self.y2_hi).contains(&y[1])
    }
}

/// Model parameters together with the domain, as read from a flat key-value
/// file (`theta1`, ..., `T`, `y1_lo`, ..., `y2_floor`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub params: ModelParams,
    pub domain: StateDomain,
}

impl ModelConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let params: ModelParams =
            toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let domain: StateDomain =
            toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        params.validate()?;
        domain.validate()?;
        if params.horizon != domain.horizon {
            return Err(Error::InvalidParameter("inconsistent horizon".into()));
        }
        Ok(Self { params, domain })
    }

    pub fn reference() -> Self {
        Self::from_toml_str(REFERENCE_CONFIG).expect("bundled configuration is valid")
    }
}

/// Pointwise coefficients of the reduced PDE.
///
/// `first_order = b - q Upsilon' Sigma^-1 mu`, `second_order = a a' / 2`,
/// `zeroth_order = p r - (q/2) mu' Sigma^-1 mu` and
/// `grad_quad = (q/2) Upsilon' Sigma^-1 Upsilon`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub first_order: DVector<f64>,
    pub second_order: DMatrix<f64>,
    pub zeroth_order: f64,
    pub grad_quad: DMatrix<f64>,
}

impl CoefficientSet {
    pub fn zeros(d: usize) -> Self {
        Self {
            first_order: DVector::zeros(d),
            second_order: DMatrix::zeros(d, d),
            zeroth_order: 0.0,
            grad_quad: DMatrix::zeros(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.first_order.len()
    }
}

/// Instantaneous return moments at a state: excess return `mu` (n), return
/// covariance `Sigma` (n x n) and return/state covariance `Upsilon` (n x d).
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnMoments {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub upsilon: DMatrix<f64>,
}

impl ReturnMoments {
    pub fn sigma_inverse(&self) -> Result<DMatrix<f64>> {
        self.sigma
            .clone()
            .try_inverse()
            .ok_or(Error::SingularCovariance {
                y2: f64::NAN,
                variance: self.sigma.determinant(),
            })
    }
}

/// A state/return model that yields the reduced PDE coefficients.
pub trait Market: Send + Sync {
    /// State dimension `d`.
    fn state_dim(&self) -> usize;

    fn p(&self) -> f64;

    fn r(&self) -> f64;

    fn horizon(&self) -> f64;

    fn q(&self) -> f64 {
        let p = self.p();
        p / (p - 1.0)
    }

    fn drift(&self, y: &[f64]) -> DVector<f64>;

    fn diffusion(&self, y: &[f64]) -> Result<DMatrix<f64>>;

    fn return_moments(&self, y: &[f64]) -> Result<ReturnMoments>;

    fn coefficients(&self, y: &[f64]) -> Result<CoefficientSet> {
        assemble_coefficients(
            &self.drift(y),
            &self.diffusion(y)?,
            &self.return_moments(y)?,
            self.p(),
            self.r(),
        )
    }
}

/// Generic `(d, n)` assembly of the reduced-PDE coefficients.
pub fn assemble_coefficients(
    drift: &DVector<f64>,
    diffusion: &DMatrix<f64>,
    moments: &ReturnMoments,
    p: f64,
    r: f64,
) -> Result<CoefficientSet> {
    let q = p / (p - 1.0);
    let sigma_inv = moments.sigma_inverse()?;
    let sinv_mu = &sigma_inv * &moments.mu;
    let sinv_ups = &sigma_inv * &moments.upsilon;

    let first_order = drift - (moments.upsilon.transpose() * &sinv_mu) * q;
    let second_order = (diffusion * diffusion.transpose()) * 0.5;
    let zeroth_order = p * r - 0.5 * q * moments.mu.dot(&sinv_mu);
    let mut grad_quad = (moments.upsilon.transpose() * sinv_ups) * (0.5 * q);
    // exact symmetry for the stencil and Hessian contractions
    grad_quad = (&grad_quad + grad_quad.transpose()) * 0.5;

    Ok(CoefficientSet {
        first_order,
        second_order,
        zeroth_order,
        grad_quad,
    })
}

/// OU mean-reverting `y1`, CIR `y2`, Heston-type single risky asset.
#[derive(Debug, Clone)]
pub struct HestonModel {
    params: ModelParams,
    y2_floor: f64,
    clamp: bool,
    variance_eps: f64,
    // A A', state independent
    m: Matrix2<f64>,
}

impl HestonModel {
    pub fn new(params: ModelParams, y2_floor: f64) -> Result<Self> {
        params.validate()?;
        if !(y2_floor > 0.0) {
            return Err(Error::InvalidParameter("y2_floor must be positive".into()));
        }
        let a = params.loading();
        Ok(Self {
            params,
            y2_floor,
            clamp: true,
            variance_eps: DEFAULT_VARIANCE_EPS,
            m: a * a.transpose(),
        })
    }

    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        Self::new(cfg.params, cfg.domain.y2_floor)
    }

    /// Disables the `y2` floor; negative `y2` is then rejected.
    pub fn without_clamp(mut self) -> Self {
        self.clamp = false;
        self
    }

    pub fn with_variance_eps(mut self, eps: f64) -> Self {
        self.variance_eps = eps;
        self
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn y2_floor(&self) -> f64 {
        self.y2_floor
    }

    fn effective_y2(&self, y2: f64) -> Result<f64> {
        if self.clamp {
            Ok(y2.max(self.y2_floor))
        } else if y2 < 0.0 {
            Err(Error::OutOfDomain { y2 })
        } else {
            Ok(y2)
        }
    }

    fn variance(&self, y2: f64) -> Result<f64> {
        let v = self.params.sigma * self.params.sigma * y2;
        if v < self.variance_eps {
            return Err(Error::SingularCovariance { y2, variance: v });
        }
        Ok(v)
    }

    /// `Upsilon = sigma sqrt(y2) rho a(y)'` as a row vector.
    fn upsilon_row(&self, y2: f64) -> [f64; 2] {
        let ps = &self.params;
        let sq = y2.sqrt();
        [
            ps.sigma * sq * (ps.rho1 * ps.a11 + ps.rho2 * ps.a12),
            ps.sigma * y2 * (ps.rho1 * ps.a21 + ps.rho2 * ps.a22),
        ]
    }
}

impl Market for HestonModel {
    fn state_dim(&self) -> usize {
        2
    }

    fn p(&self) -> f64 {
        self.params.p
    }

    fn r(&self) -> f64 {
        self.params.r
    }

    fn horizon(&self) -> f64 {
        self.params.horizon
    }

    fn drift(&self, y: &[f64]) -> DVector<f64> {
        let ps = &self.params;
        DVector::from_vec(vec![
            ps.theta1 * (ps.k1 - y[0]),
            ps.theta2 * (ps.k2 - y[1]),
        ])
    }

    fn diffusion(&self, y: &[f64]) -> Result<DMatrix<f64>> {
        let y2 = self.effective_y2(y[1])?;
        let sq = y2.sqrt();
        let ps = &self.params;
        Ok(DMatrix::from_row_slice(
            2,
            2,
            &[ps.a11, ps.a12, sq * ps.a21, sq * ps.a22],
        ))
    }

    fn return_moments(&self, y: &[f64]) -> Result<ReturnMoments> {
        let y2 = self.effective_y2(y[1])?;
        let var = self.variance(y2)?;
        let ups = self.upsilon_row(y2);
        Ok(ReturnMoments {
            mu: DVector::from_element(1, y[0]),
            sigma: DMatrix::from_element(1, 1, var),
            upsilon: DMatrix::from_row_slice(1, 2, &ups),
        })
    }

    fn coefficients(&self, y: &[f64]) -> Result<CoefficientSet> {
        let ps = &self.params;
        let y2 = self.effective_y2(y[1])?;
        let var = self.variance(y2)?;
        let q = ps.q();
        let ups = self.upsilon_row(y2);
        let b = self.drift(y);
        let mu_over_var = y[0] / var;
        let sq = y2.sqrt();
        let m = &self.m;

        let first_order = DVector::from_vec(vec![
            b[0] - q * mu_over_var * ups[0],
            b[1] - q * mu_over_var * ups[1],
        ]);
        let off = 0.5 * sq * m[(0, 1)];
        let second_order =
            DMatrix::from_row_slice(2, 2, &[0.5 * m[(0, 0)], off, off, 0.5 * y2 * m[(1, 1)]]);
        let zeroth_order = ps.p * ps.r - 0.5 * q * y[0] * y[0] / var;
        let h = 0.5 * q / var;
        let g01 = h * ups[0] * ups[1];
        let grad_quad = DMatrix::from_row_slice(
            2,
            2,
            &[h * ups[0] * ups[0], g01, g01, h * ups[1] * ups[1]],
        );
        Ok(CoefficientSet {
            first_order,
            second_order,
            zeroth_order,
            grad_quad,
        })
    }
}

/// Frozen-moment model: constant `mu` and `Sigma`, `Upsilon = 0`, no state
/// dynamics. Its reduced PDE is `u_t + c u = 0` with
/// `c = p r - (q/2) mu^2 / Sigma`, solved by `exp(c (T - t))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantModel {
    pub p: f64,
    pub r: f64,
    pub mu: f64,
    pub sigma2: f64,
    pub horizon: f64,
}

impl ConstantModel {
    pub fn new(p: f64, r: f64, mu: f64, sigma2: f64, horizon: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidParameter(format!("p must lie in (0, 1), got {p}")));
        }
        if !(sigma2 > 0.0) {
            return Err(Error::InvalidParameter("frozen variance must be positive".into()));
        }
        if !(horizon > 0.0) {
            return Err(Error::InvalidParameter("T must be positive".into()));
        }
        Ok(Self {
            p,
            r,
            mu,
            sigma2,
            horizon,
        })
    }

    /// The zeroth-order coefficient `c`, uniform over the state space.
    pub fn decay_rate(&self) -> f64 {
        let q = self.p / (self.p - 1.0);
        self.p * self.r - 0.5 * q * self.mu * self.mu / self.sigma2
    }
}

impl Market for ConstantModel {
    fn state_dim(&self) -> usize {
        2
    }

    fn p(&self) -> f64 {
        self.p
    }

    fn r(&self) -> f64 {
        self.r
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn drift(&self, _y: &[f64]) -> DVector<f64> {
        DVector::zeros(2)
    }

    fn diffusion(&self, _y: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::zeros(2, 2))
    }

    fn return_moments(&self, _y: &[f64]) -> Result<ReturnMoments> {
        Ok(ReturnMoments {
            mu: DVector::from_element(1, self.mu),
            sigma: DMatrix::from_element(1, 1, self.sigma2),
            upsilon: DMatrix::zeros(1, 2),
        })
    }
}
