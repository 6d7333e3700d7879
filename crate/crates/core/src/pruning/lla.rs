//! Linear-model solvers: weighted Lasso by coordinate descent, local linear
//! approximation, restricted least squares and the alternating HALO MAP fit.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::penalties::{h_eval, HKind};

use super::threshold_for_sparsity;

/// Least-squares problem with loss (1/2n)‖y − Xw‖².
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProblem {
    pub n: usize,
    pub p: usize,
    /// Row-major n × p.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl LinearProblem {
    pub fn new(n: usize, p: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != n * p || y.len() != n || n == 0 || p == 0 {
            return Err(Error::Dimension(format!(
                "design of {} values and {} responses for n={n}, p={p}",
                x.len(),
                y.len()
            )));
        }
        Ok(Self { n, p, x, y })
    }

    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let (rows, y) = data.regression_view()?;
        let p = data.num_features();
        Self::new(rows.len(), p, rows.concat(), y)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.x[i * self.p + j]).collect()
    }

    pub fn residual(&self, w: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let row = &self.x[i * self.p..(i + 1) * self.p];
                self.y[i] - row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        self.residual(w).iter().map(|r| r * r).sum::<f64>() / (2.0 * self.n as f64)
    }

    /// (1/n) XᵀX restricted to `cols`.
    fn gram(&self, cols: &[usize]) -> Vec<f64> {
        let k = cols.len();
        let mut g = vec![0.0; k * k];
        for i in 0..self.n {
            let row = &self.x[i * self.p..(i + 1) * self.p];
            for (a, &ca) in cols.iter().enumerate() {
                for (b, &cb) in cols.iter().enumerate().skip(a) {
                    g[a * k + b] += row[ca] * row[cb];
                }
            }
        }
        for a in 0..k {
            for b in a..k {
                g[a * k + b] /= self.n as f64;
                g[b * k + a] = g[a * k + b];
            }
        }
        g
    }
}

/// In-place Cholesky factor (lower triangle); fails on a non-positive pivot.
fn cholesky(a: &mut [f64], k: usize) -> Result<()> {
    for j in 0..k {
        let mut d = a[j * k + j];
        for m in 0..j {
            d -= a[j * k + m] * a[j * k + m];
        }
        if !(d > 1e-12) {
            return Err(Error::Solver(format!("design is rank deficient (pivot {j} = {d:e})")));
        }
        let d = d.sqrt();
        a[j * k + j] = d;
        for i in j + 1..k {
            let mut s = a[i * k + j];
            for m in 0..j {
                s -= a[i * k + m] * a[j * k + m];
            }
            a[i * k + j] = s / d;
        }
    }
    Ok(())
}

/// Least squares restricted to `support`; other coefficients are zero.
pub fn ols(problem: &LinearProblem, support: &[bool]) -> Result<Vec<f64>> {
    let cols: Vec<usize> = (0..problem.p).filter(|&j| support[j]).collect();
    let k = cols.len();
    let mut w = vec![0.0; problem.p];
    if k == 0 {
        return Ok(w);
    }
    let mut g = problem.gram(&cols);
    cholesky(&mut g, k)?;
    let mut rhs: Vec<f64> = cols
        .iter()
        .map(|&c| (0..problem.n).map(|i| problem.x[i * problem.p + c] * problem.y[i]).sum::<f64>() / problem.n as f64)
        .collect();
    for i in 0..k {
        for m in 0..i {
            rhs[i] -= g[i * k + m] * rhs[m];
        }
        rhs[i] /= g[i * k + i];
    }
    for i in (0..k).rev() {
        for m in i + 1..k {
            rhs[i] -= g[m * k + i] * rhs[m];
        }
        rhs[i] /= g[i * k + i];
    }
    for (c, v) in cols.into_iter().zip(rhs) {
        w[c] = v;
    }
    Ok(w)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CdOptions {
    /// Convergence when the largest coordinate change in a sweep is below
    /// this.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for CdOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_sweeps: 100_000,
        }
    }
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Minimizes (1/2n)‖y − Xw‖² + Σ ω_j|w_j| by cyclic coordinate descent. An
/// infinite ω_j pins w_j at zero.
pub fn weighted_lasso(problem: &LinearProblem, omega: &[f64], warm: Option<&[f64]>, opts: CdOptions) -> Result<Vec<f64>> {
    let (n, p) = (problem.n, problem.p);
    if omega.len() != p {
        return Err(Error::Contract(format!("{} penalty weights for {p} coefficients", omega.len())));
    }
    let cols: Vec<Vec<f64>> = (0..p).map(|j| problem.column(j)).collect();
    let scale: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / n as f64).collect();
    for j in 0..p {
        if omega[j].is_finite() && !(scale[j] > 1e-14) {
            return Err(Error::Solver(format!("column {j} is identically zero")));
        }
        if omega[j] < 0.0 || omega[j].is_nan() {
            return Err(Error::Contract(format!("penalty weight {j} is {}", omega[j])));
        }
    }
    let mut w: Vec<f64> = match warm {
        Some(w0) => w0.iter().zip(omega).map(|(&v, o)| if o.is_finite() { v } else { 0.0 }).collect(),
        None => vec![0.0; p],
    };
    let mut r = problem.residual(&w);
    let mut last_change = f64::INFINITY;
    for _ in 0..opts.max_sweeps {
        let mut max_change = 0.0f64;
        for j in 0..p {
            if !omega[j].is_finite() {
                continue;
            }
            let col = &cols[j];
            let z = col.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / n as f64 + scale[j] * w[j];
            let new = soft_threshold(z, omega[j]) / scale[j];
            let delta = new - w[j];
            if delta != 0.0 {
                for (ri, a) in r.iter_mut().zip(col) {
                    *ri -= a * delta;
                }
                w[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        last_change = max_change;
        if max_change < opts.tol {
            return Ok(w);
        }
    }
    // KKT violation serves as a duality-gap proxy.
    let kkt = (0..p)
        .filter(|&j| omega[j].is_finite())
        .map(|j| {
            let g = cols[j].iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            if w[j] != 0.0 {
                (g - omega[j] * w[j].signum()).abs()
            } else {
                (g.abs() - omega[j]).max(0.0)
            }
        })
        .fold(0.0, f64::max);
    Err(Error::Solver(format!(
        "coordinate descent did not converge in {} sweeps (last change {last_change:e}, max KKT violation {kkt:e})",
        opts.max_sweeps
    )))
}

/// Penalty derivative p'(|w|) feeding each reweighting step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PenaltyDeriv {
    /// Constant ξ: every step is the same Lasso.
    Lasso(f64),
    /// 0 above the magnitude threshold, infinite at or below it.
    Pruning { tau: f64 },
    /// max(λ − |w|/γ, 0).
    Mcp { lambda: f64, gamma: f64 },
}

impl PenaltyDeriv {
    pub fn eval(&self, magnitude: f64) -> f64 {
        match *self {
            PenaltyDeriv::Lasso(xi) => xi,
            PenaltyDeriv::Pruning { tau } => {
                if magnitude > tau {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            PenaltyDeriv::Mcp { lambda, gamma } => (lambda - magnitude / gamma).max(0.0),
        }
    }
}

/// Local linear approximation: W⁽⁰⁾ solves the weighted Lasso with
/// `initial_weights`, and each of the `k` further iterates reweights by the
/// penalty derivative at the previous one. Returns W⁽⁰⁾…W⁽ᵏ⁾.
pub fn lla(
    problem: &LinearProblem,
    initial_weights: &[f64],
    deriv: &dyn Fn(f64) -> f64,
    k: usize,
    opts: CdOptions,
) -> Result<Vec<Vec<f64>>> {
    let all: Vec<usize> = (0..problem.p).collect();
    cholesky(&mut problem.gram(&all), problem.p)?;
    let mut iterates = vec![weighted_lasso(problem, initial_weights, None, opts)?];
    for _ in 0..k {
        let prev = iterates.last().expect("nonempty");
        let omega: Vec<f64> = prev.iter().map(|w| deriv(w.abs())).collect();
        let warm = prev.clone();
        iterates.push(weighted_lasso(problem, &omega, Some(&warm), opts)?);
    }
    Ok(iterates)
}

/// Dense least squares, global magnitude mask at `target`, restricted refit.
pub fn two_stage_linear(problem: &LinearProblem, target: f64) -> Result<(Vec<f64>, Vec<bool>)> {
    let dense = ols(problem, &vec![true; problem.p])?;
    let tau = threshold_for_sparsity(&dense, target)?;
    let support: Vec<bool> = dense.iter().map(|w| w.abs() > tau).collect();
    Ok((ols(problem, &support)?, support))
}

/// Coefficient minimizing ξ·h(λ)·|w| + ψ·λ over λ > 0, clamped at `floor`.
pub fn halo_lambda_update(h_kind: HKind, k: f64, xi: f64, psi: f64, magnitude: f64, floor: f64) -> f64 {
    let a = xi * magnitude;
    if a <= 0.0 {
        return floor;
    }
    let lam = match h_kind {
        HKind::InvPow => (k * a / psi).powf(1.0 / (k + 1.0)),
        HKind::LogSq => {
            // Stationarity 2a·ln λ + ψλ = 0 has its root in (0, 1); bisect
            // on ln λ, where the left side is increasing.
            let (mut lo, mut hi) = (-700.0f64, 0.0f64);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if 2.0 * a * mid + psi * mid.exp() > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            (0.5 * (lo + hi)).exp()
        }
    };
    lam.max(floor)
}

/// Result of the alternating HALO fit.
#[derive(Clone, Debug, PartialEq)]
pub struct HaloMap {
    pub w: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub iterations: usize,
    /// Objective after each outer iteration.
    pub objective: Vec<f64>,
}

/// MAP estimate of the HALO-penalized linear model by block coordinate
/// descent: weighted Lasso in W with weights ξ·h(λ), then the closed-form λ
/// update. Starts from Λ ≡ 1, so the first W block is the Lasso.
#[allow(clippy::too_many_arguments)]
pub fn halo_map(
    problem: &LinearProblem,
    xi: f64,
    psi: f64,
    h_kind: HKind,
    k: f64,
    floor: f64,
    max_outer: usize,
    opts: CdOptions,
) -> Result<HaloMap> {
    if !(psi > 0.0) {
        return Err(Error::Config("the alternating HALO fit needs psi > 0".into()));
    }
    let p = problem.p;
    let mut lambdas = vec![1.0; p];
    let mut w: Vec<f64> = vec![0.0; p];
    let mut objective = Vec::new();
    let objective_of = |w: &[f64], lam: &[f64]| -> Result<f64> {
        let mut v = problem.loss(w);
        for (wj, &l) in w.iter().zip(lam) {
            v += xi * h_eval(h_kind, k, l)? * wj.abs() + psi * l;
        }
        Ok(v)
    };
    for it in 0..max_outer {
        let omega: Vec<f64> = lambdas
            .iter()
            .map(|&l| h_eval(h_kind, k, l).map(|h| xi * h))
            .collect::<Result<_>>()?;
        let next = weighted_lasso(problem, &omega, Some(&w), opts)?;
        let new_lambdas: Vec<f64> = next
            .iter()
            .map(|v| halo_lambda_update(h_kind, k, xi, psi, v.abs(), floor))
            .collect();
        let change = next
            .iter()
            .zip(&w)
            .map(|(a, b)| (a - b).abs())
            .chain(new_lambdas.iter().zip(&lambdas).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        w = next;
        lambdas = new_lambdas;
        objective.push(objective_of(&w, &lambdas)?);
        if change < opts.tol.max(1e-10) * 10.0 {
            return Ok(HaloMap {
                w,
                lambdas,
                iterations: it + 1,
                objective,
            });
        }
    }
    Ok(HaloMap {
        w,
        lambdas,
        iterations: max_outer,
        objective,
    })
}
