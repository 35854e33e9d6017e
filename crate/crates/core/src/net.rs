//! Single-hidden-layer tanh network `f(t, y) = c + sum_i beta_i tanh(W_i z + b_i)`
//! with closed-form input derivatives up to the `y`-Hessian and exact
//! parameter gradients of losses built from those derivatives.
//!
//! The raw input `(t, y)` is mapped affinely onto `[-1, 1]` per coordinate
//! before it reaches the hidden layer, so every input derivative carries the
//! scale of that map.
//!
//! Parameters are stored flat: `W` (row-major, `n_hidden x (1 + d)`), the
//! hidden biases, the output weights `beta`, then the output bias `c`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pde::PointJet;

/// Number of points per work unit in the batched gradient. Partial sums are
/// reduced in chunk order, so the result is independent of the thread count.
const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    n_hidden: usize,
    dim: usize,
    params: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

/// Network value with its first derivatives and the `y`-Hessian.
#[derive(Debug, Clone, PartialEq)]
pub struct NetJet {
    pub value: f64,
    pub dt: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl NetJet {
    pub fn into_point_jet(self, t: f64, y: &[f64]) -> PointJet {
        PointJet {
            t,
            y: DVector::from_column_slice(y),
            u: self.value,
            du_dt: self.dt,
            grad: self.grad,
            hess: self.hess,
        }
    }
}

/// Sensitivity of a scalar loss to the entries of a [`NetJet`].
#[derive(Debug, Clone, PartialEq)]
pub struct JetAdjoint {
    pub value: f64,
    pub dt: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl JetAdjoint {
    pub fn value_only(d: usize, value: f64) -> Self {
        Self {
            value,
            dt: 0.0,
            grad: DVector::zeros(d),
            hess: DMatrix::zeros(d, d),
        }
    }
}

#[inline]
fn tanh_derivs(a: f64) -> (f64, f64, f64, f64) {
    let s = a.tanh();
    let s1 = 1.0 - s * s;
    let s2 = -2.0 * s * s1;
    let s3 = s1 * (6.0 * s * s - 2.0);
    (s, s1, s2, s3)
}

impl Network {
    pub fn param_count(n_hidden: usize, dim: usize) -> usize {
        n_hidden * (1 + dim) + 2 * n_hidden + 1
    }

    /// Fan-based uniform initialisation, zero biases. `lo`/`hi` bound the raw
    /// input `(t, y_1, .., y_d)`.
    pub fn init(n_hidden: usize, lo: &[f64], hi: &[f64], seed: u64) -> Result<Self> {
        if n_hidden == 0 {
            return Err(Error::InvalidParameter("n_hidden must be at least 1".into()));
        }
        let mut net = Self::zeros(n_hidden, lo, hi)?;
        let fan_in = 1 + net.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s_hidden = (6.0 / (fan_in + n_hidden) as f64).sqrt();
        let s_out = (6.0 / (n_hidden + 1) as f64).sqrt();
        for w in net.weights_mut() {
            *w = rng.random_range(-s_hidden..=s_hidden);
        }
        for b in net.output_weights_mut() {
            *b = rng.random_range(-s_out..=s_out);
        }
        Ok(net)
    }

    pub fn zeros(n_hidden: usize, lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() < 2 {
            return Err(Error::InvalidParameter("input bounds must cover (t, y)".into()));
        }
        if lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
            return Err(Error::InvalidParameter("input bounds must satisfy lo < hi".into()));
        }
        let dim = lo.len() - 1;
        Ok(Self {
            n_hidden,
            dim,
            params: vec![0.0; Self::param_count(n_hidden, dim)],
            lo: lo.to_vec(),
            hi: hi.to_vec(),
        })
    }

    pub fn n_hidden(&self) -> usize {
        self.n_hidden
    }

    /// State dimension `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input_bounds(&self) -> (&[f64], &[f64]) {
        (&self.lo, &self.hi)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b = self.n_hidden * (1 + self.dim);
        (b, b + self.n_hidden, b + 2 * self.n_hidden)
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        let (b, _, _) = self.offsets();
        &mut self.params[..b]
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        let (b, beta, _) = self.offsets();
        &mut self.params[b..beta]
    }

    pub fn output_weights_mut(&mut self) -> &mut [f64] {
        let (_, beta, c) = self.offsets();
        &mut self.params[beta..c]
    }

    pub fn output_bias_mut(&mut self) -> &mut f64 {
        let (_, _, c) = self.offsets();
        &mut self.params[c]
    }

    /// Scale of the input normalisation for each raw coordinate.
    fn scales(&self) -> impl Iterator<Item = f64> + '_ {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 2.0 / (h - l))
    }

    fn normalized(&self, t: f64, y: &[f64], z: &mut [f64]) {
        debug_assert_eq!(y.len(), self.dim);
        for (k, zk) in z.iter_mut().enumerate() {
            let raw = if k == 0 { t } else { y[k - 1] };
            *zk = 2.0 * (raw - self.lo[k]) / (self.hi[k] - self.lo[k]) - 1.0;
        }
    }

    pub fn forward(&self, t: f64, y: &[f64]) -> f64 {
        let n_in = 1 + self.dim;
        let mut z = vec![0.0; n_in];
        self.normalized(t, y, &mut z);
        let (b_off, beta_off, c_off) = self.offsets();
        let mut out = self.params[c_off];
        for i in 0..self.n_hidden {
            let w = &self.params[i * n_in..(i + 1) * n_in];
            let a = self.params[b_off + i] + w.iter().zip(&z).map(|(w, z)| w * z).sum::<f64>();
            out += self.params[beta_off + i] * a.tanh();
        }
        out
    }

    /// `(df/dt, grad_y f)`.
    pub fn input_gradient(&self, t: f64, y: &[f64]) -> (f64, DVector<f64>) {
        let jet = self.jet(t, y);
        (jet.dt, jet.grad)
    }

    /// `grad_y^2 f`.
    pub fn input_hessian(&self, t: f64, y: &[f64]) -> DMatrix<f64> {
        self.jet(t, y).hess
    }

    pub fn jet(&self, t: f64, y: &[f64]) -> NetJet {
        let d = self.dim;
        let n_in = 1 + d;
        let mut z = vec![0.0; n_in];
        self.normalized(t, y, &mut z);
        let scale: Vec<f64> = self.scales().collect();
        let (b_off, beta_off, c_off) = self.offsets();

        let mut value = self.params[c_off];
        let mut first = vec![0.0; n_in];
        let mut hess = DMatrix::zeros(d, d);
        let mut v = vec![0.0; n_in];
        for i in 0..self.n_hidden {
            let w = &self.params[i * n_in..(i + 1) * n_in];
            let a = self.params[b_off + i] + w.iter().zip(&z).map(|(w, z)| w * z).sum::<f64>();
            let (s, s1, s2, _) = tanh_derivs(a);
            let beta = self.params[beta_off + i];
            for k in 0..n_in {
                v[k] = w[k] * scale[k];
            }
            value += beta * s;
            let bs1 = beta * s1;
            for k in 0..n_in {
                first[k] += bs1 * v[k];
            }
            let bs2 = beta * s2;
            for j in 0..d {
                for l in j..d {
                    hess[(j, l)] += bs2 * v[j + 1] * v[l + 1];
                }
            }
        }
        for j in 0..d {
            for l in 0..j {
                hess[(j, l)] = hess[(l, j)];
            }
        }
        NetJet {
            value,
            dt: first[0],
            grad: DVector::from_column_slice(&first[1..]),
            hess,
        }
    }

    /// Adds `d loss / d theta` for one point, given the loss sensitivity to the
    /// jet at that point.
    pub fn accumulate_param_gradient(&self, t: f64, y: &[f64], adj: &JetAdjoint, out: &mut [f64]) {
        let d = self.dim;
        let n_in = 1 + d;
        let mut z = vec![0.0; n_in];
        self.normalized(t, y, &mut z);
        let scale: Vec<f64> = self.scales().collect();
        let (b_off, beta_off, c_off) = self.offsets();

        // adjoint of (df/dt, grad_y f) as one (1 + d) vector
        let mut a_first = vec![adj.dt; n_in];
        for j in 0..d {
            a_first[j + 1] = adj.grad[j];
        }
        let mut v = vec![0.0; n_in];
        let mut hv = vec![0.0; d];
        for i in 0..self.n_hidden {
            let w = &self.params[i * n_in..(i + 1) * n_in];
            let a = self.params[b_off + i] + w.iter().zip(&z).map(|(w, z)| w * z).sum::<f64>();
            let (s, s1, s2, s3) = tanh_derivs(a);
            let beta = self.params[beta_off + i];
            for k in 0..n_in {
                v[k] = w[k] * scale[k];
            }
            let first_dot: f64 = a_first.iter().zip(&v).map(|(a, v)| a * v).sum();
            // (A + A') v restricted to the y block
            let mut hess_quad = 0.0;
            for j in 0..d {
                let mut acc = 0.0;
                for l in 0..d {
                    acc += (adj.hess[(j, l)] + adj.hess[(l, j)]) * v[l + 1];
                }
                hv[j] = acc;
                hess_quad += 0.5 * acc * v[j + 1];
            }

            let g_beta = adj.value * s + s1 * first_dot + s2 * hess_quad;
            let g_pre = beta * (adj.value * s1 + s2 * first_dot + s3 * hess_quad);
            out[beta_off + i] += g_beta;
            out[b_off + i] += g_pre;
            let row = &mut out[i * n_in..(i + 1) * n_in];
            for k in 0..n_in {
                let mut g_v = s1 * a_first[k];
                if k > 0 {
                    g_v += s2 * hv[k - 1];
                }
                row[k] += g_pre * z[k] + beta * g_v * scale[k];
            }
        }
        out[c_off] += adj.value;
    }

    /// Gradient of `L = sum_k loss_k(jet(p_k))` over a batch of points
    /// `p_k = (t, y_1, .., y_d)`. `per_point` returns the point's loss term and
    /// its sensitivity to the jet.
    pub fn loss_param_gradient<P, F>(&self, points: &[P], per_point: F) -> Result<(f64, Vec<f64>)>
    where
        P: AsRef<[f64]> + Sync,
        F: Fn(usize, &NetJet) -> Result<(f64, JetAdjoint)> + Sync,
    {
        let n_params = self.params.len();
        let partials: Vec<(f64, Vec<f64>)> = points
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(ci, chunk)| {
                let mut grad = vec![0.0; n_params];
                let mut loss = 0.0;
                for (k, p) in chunk.iter().enumerate() {
                    let p = p.as_ref();
                    let (t, y) = (p[0], &p[1..]);
                    let jet = self.jet(t, y);
                    let (l, adj) = per_point(ci * CHUNK + k, &jet)?;
                    loss += l;
                    self.accumulate_param_gradient(t, y, &adj, &mut grad);
                }
                Ok((loss, grad))
            })
            .collect::<Result<_>>()?;

        let mut total = 0.0;
        let mut grad = vec![0.0; n_params];
        for (l, g) in partials {
            total += l;
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += gi;
            }
        }
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        Ok((total, grad))
    }

    /// `|c| + sum |beta_i|`, an upper bound on `|f|`.
    pub fn output_bound(&self) -> f64 {
        let (_, beta, c) = self.offsets();
        self.params[c].abs() + self.params[beta..c].iter().map(|b| b.abs()).sum::<f64>()
    }

    /// Text form: a header `n_hidden d`, a line of input bounds
    /// `lo_0 hi_0 .. lo_d hi_d`, then one parameter per line in storage order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{} {}", self.n_hidden, self.dim).unwrap();
        let bounds: Vec<String> = self
            .lo
            .iter()
            .zip(&self.hi)
            .flat_map(|(l, h)| [format!("{l:.16e}"), format!("{h:.16e}")])
            .collect();
        writeln!(s, "{}", bounds.join(" ")).unwrap();
        for p in &self.params {
            writeln!(s, "{p:.16e}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let bad = |m: &str| Error::Parse(format!("network file: {m}"));
        let header: Vec<usize> = lines
            .next()
            .ok_or_else(|| bad("empty"))?
            .split_whitespace()
            .map(|x| x.parse().map_err(|_| bad("bad header")))
            .collect::<Result<_>>()?;
        let [n_hidden, dim] = header[..] else {
            return Err(bad("header must be `n_hidden d`"));
        };
        let bounds: Vec<f64> = lines
            .next()
            .ok_or_else(|| bad("missing bounds"))?
            .split_whitespace()
            .map(|x| x.parse().map_err(|_| bad("bad bound")))
            .collect::<Result<_>>()?;
        if bounds.len() != 2 * (1 + dim) {
            return Err(bad("bounds line has the wrong length"));
        }
        let lo: Vec<f64> = bounds.iter().step_by(2).copied().collect();
        let hi: Vec<f64> = bounds.iter().skip(1).step_by(2).copied().collect();
        let params: Vec<f64> = lines
            .map(|l| l.trim().parse().map_err(|_| bad("bad parameter")))
            .collect::<Result<_>>()?;
        let mut net = Self::zeros(n_hidden, &lo, &hi)?;
        if params.len() != net.params.len() {
            return Err(bad("parameter count does not match header"));
        }
        net.params = params;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }
}
