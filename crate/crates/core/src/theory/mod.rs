//! Convexity region of the HALO-penalized least-squares objective: exact
//! Hessian blocks, the region bracket and sampled eigenvalue checks.

pub mod linalg;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use linalg::{gram, symmetric_eigenvalues, symmetric_norm, Matrix};

/// HALO-penalized linear model at a fixed point (W, Λ) with h(λ) = λ⁻².
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearInstance {
    pub n: usize,
    pub p: usize,
    /// Row-major n × p design.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub xi: f64,
}

impl LinearInstance {
    pub fn validate(&self) -> Result<()> {
        if self.x.len() != self.n * self.p || self.y.len() != self.n {
            return Err(Error::Dimension(format!(
                "design has {} values for {}×{}, {} responses",
                self.x.len(),
                self.n,
                self.p,
                self.y.len()
            )));
        }
        if self.w.len() != self.p || self.lambdas.len() != self.p {
            return Err(Error::Dimension(format!(
                "{} weights and {} coefficients for p={}",
                self.w.len(),
                self.lambdas.len(),
                self.p
            )));
        }
        if let Some(j) = self.lambdas.iter().position(|l| !(*l > 0.0)) {
            return Err(Error::Domain(format!("lambda[{j}] = {} is not positive", self.lambdas[j])));
        }
        if let Some(j) = self.w.iter().position(|w| *w == 0.0) {
            return Err(Error::Domain(format!("w[{j}] is zero")));
        }
        Ok(())
    }

    /// Objective (s/2)‖y − Xw‖² + ξ Σ|w_j|/λ_j² at arbitrary (Λ, W); the ψ
    /// term is linear and drops out of the Hessian.
    pub fn objective(&self, lambdas: &[f64], w: &[f64], loss_scale: f64) -> f64 {
        let mut rss = 0.0;
        for i in 0..self.n {
            let row = &self.x[i * self.p..(i + 1) * self.p];
            let r = self.y[i] - row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            rss += r * r;
        }
        let pen: f64 = w.iter().zip(lambdas).map(|(wj, l)| wj.abs() / (l * l)).sum();
        0.5 * loss_scale * rss + self.xi * pen
    }
}

/// Smallest singular value of a row-major n × p matrix.
pub fn smallest_singular_value(x: &[f64], n: usize, p: usize) -> f64 {
    if p == 0 {
        return 0.0;
    }
    let e = symmetric_eigenvalues(&gram(x, n, p));
    e[0].max(0.0).sqrt()
}

/// Hessian in the variable order (λ₁…λ_p, w₁…w_p).
#[derive(Clone, Debug, PartialEq)]
pub struct HaloHessian {
    /// Diagonal of the λλ block: 6ξ|w|/λ⁴.
    pub a: Vec<f64>,
    /// Diagonal of the λw block: −2ξ·sign(w)/λ³.
    pub b: Vec<f64>,
    /// ww block: s·XᵀX.
    pub c: Matrix,
    pub full: Matrix,
}

/// Analytic Hessian of the objective; `loss_scale` is 1 for ½‖y − Xw‖² and 2
/// for the unscaled residual sum.
pub fn halo_hessian(inst: &LinearInstance, loss_scale: f64) -> Result<HaloHessian> {
    inst.validate()?;
    let p = inst.p;
    let xi = inst.xi;
    let a: Vec<f64> = inst
        .w
        .iter()
        .zip(&inst.lambdas)
        .map(|(w, l)| 6.0 * xi * w.abs() / l.powi(4))
        .collect();
    let b: Vec<f64> = inst
        .w
        .iter()
        .zip(&inst.lambdas)
        .map(|(w, l)| -2.0 * xi * w.signum() / l.powi(3))
        .collect();
    let mut c = gram(&inst.x, inst.n, p);
    for v in &mut c.data {
        *v *= loss_scale;
    }
    let mut full = Matrix::zeros(2 * p);
    for j in 0..p {
        full.set(j, j, a[j]);
        full.set(j, p + j, b[j]);
        full.set(p + j, j, b[j]);
        for k in 0..p {
            full.set(p + j, p + k, c.get(j, k));
        }
    }
    Ok(HaloHessian { a, b, c, full })
}

/// The region bracket [24ν·min r, 24ν·max r] with r_j = λ_j¹⁰/|w_j|.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub nu: f64,
    pub lower: f64,
    pub xi_cubed: f64,
    pub upper: f64,
    pub inside: bool,
}

/// Relative slack for classifying points on the (closed) boundary.
const BOUNDARY_RTOL: f64 = 1e-12;

pub fn region_bracket(inst: &LinearInstance) -> Result<(f64, f64, f64)> {
    inst.validate()?;
    let nu = smallest_singular_value(&inst.x, inst.n, inst.p);
    let mut ratios: Vec<f64> = inst
        .lambdas
        .iter()
        .zip(&inst.w)
        .map(|(l, w)| l.powi(10) / w.abs())
        .collect();
    ratios.sort_by(|a, b| b.total_cmp(a));
    let hi = ratios[0];
    let lo = ratios[ratios.len() - 1];
    Ok((nu, 24.0 * nu * lo, 24.0 * nu * hi))
}

pub fn in_region(inst: &LinearInstance) -> Result<Region> {
    let (nu, lower, upper) = region_bracket(inst)?;
    let xi_cubed = inst.xi.powi(3);
    let inside = xi_cubed >= lower * (1.0 - BOUNDARY_RTOL) && xi_cubed <= upper * (1.0 + BOUNDARY_RTOL);
    Ok(Region {
        nu,
        lower,
        xi_cubed,
        upper,
        inside,
    })
}

/// C − BᵀA⁻¹B from the closed form C − diag(b²/a).
pub fn schur_direct(h: &HaloHessian) -> Matrix {
    let mut s = h.c.clone();
    for j in 0..h.a.len() {
        s.set(j, j, s.get(j, j) - h.b[j] * h.b[j] / h.a[j]);
    }
    s
}

/// C − BᵀA⁻¹B by general block elimination on the assembled Hessian.
pub fn schur_eliminated(h: &HaloHessian) -> Result<Matrix> {
    let p = h.a.len();
    let block = |r0: usize, c0: usize| Matrix::from_fn(p, |i, j| h.full.get(r0 + i, c0 + j));
    let a = block(0, 0);
    let b = block(0, p);
    let c = block(p, p);
    let a_inv = a
        .inverse()
        .ok_or_else(|| Error::Domain("λλ block is singular (ξ = 0?)".into()))?;
    Ok(c.sub(&b.transpose().matmul(&a_inv).matmul(&b)))
}

/// Eigenvalue checks at one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceCheck {
    pub p: usize,
    pub n: usize,
    pub region: Region,
    pub min_eig: f64,
    pub norm: f64,
    /// min eigenvalue ≥ −1e-9·‖H‖₂.
    pub psd: bool,
    pub schur_min_eig: f64,
    pub schur_max_diff: f64,
    /// Smallest eigenvalue of XᵀX (the ww block).
    pub c_min_eig: f64,
    /// Eigenvalues of BᵀA⁻¹B, recomputed from the blocks: 2ξ/(3λ²|w|).
    pub rho_min: f64,
    pub rho_max: f64,
    /// The printed product (4ξ²/λ⁶)·(6ξ|w|/λ⁴), reported for comparison.
    pub rho_printed_min: f64,
    pub rho_printed_max: f64,
    /// λ_min(C) − ρ_max ≤ μ_min ≤ λ_min(C) − ρ_min.
    pub weyl_holds: bool,
    /// The same sandwich with the printed ρ.
    pub weyl_printed_holds: bool,
}

pub const PSD_RTOL: f64 = 1e-9;

pub fn check_instance(inst: &LinearInstance, loss_scale: f64) -> Result<InstanceCheck> {
    let region = in_region(inst)?;
    let h = halo_hessian(inst, loss_scale)?;
    let eig = symmetric_eigenvalues(&h.full);
    let norm = eig.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let min_eig = eig[0];
    let direct = schur_direct(&h);
    let (schur_min_eig, schur_max_diff) = if inst.xi > 0.0 {
        let elim = schur_eliminated(&h)?;
        (symmetric_eigenvalues(&direct)[0], direct.max_abs_diff(&elim))
    } else {
        (symmetric_eigenvalues(&h.c)[0], 0.0)
    };
    let c_min_eig = symmetric_eigenvalues(&h.c)[0];
    let xi = inst.xi;
    let rho: Vec<f64> = inst
        .w
        .iter()
        .zip(&inst.lambdas)
        .map(|(w, l)| 2.0 * xi / (3.0 * l * l * w.abs()))
        .collect();
    let rho_printed: Vec<f64> = inst
        .w
        .iter()
        .zip(&inst.lambdas)
        .map(|(w, l)| (4.0 * xi * xi / l.powi(6)) * (6.0 * xi * w.abs() / l.powi(4)))
        .collect();
    let minmax = |v: &[f64]| {
        v.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
    };
    let (rho_min, rho_max) = minmax(&rho);
    let (rho_printed_min, rho_printed_max) = minmax(&rho_printed);
    let slack = 1e-9 * (1.0 + c_min_eig.abs() + rho_max.abs());
    let sandwich = |lo_rho: f64, hi_rho: f64| {
        c_min_eig - hi_rho <= schur_min_eig + slack && schur_min_eig <= c_min_eig - lo_rho + slack
    };
    Ok(InstanceCheck {
        p: inst.p,
        n: inst.n,
        region,
        min_eig,
        norm,
        psd: min_eig >= -PSD_RTOL * norm,
        schur_min_eig,
        schur_max_diff,
        c_min_eig,
        rho_min,
        rho_max,
        rho_printed_min,
        rho_printed_max,
        weyl_holds: xi == 0.0 || sandwich(rho_min, rho_max),
        weyl_printed_holds: xi == 0.0 || sandwich(rho_printed_min, rho_printed_max),
    })
}

/// Sampling ranges for [`verify_convexity`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub p_min: usize,
    pub p_max: usize,
    /// Coefficients drawn from U(lo, hi).
    pub lambda_range: (f64, f64),
    /// Weight magnitudes drawn from U(lo, hi) with random sign.
    pub weight_range: (f64, f64),
    pub loss_scale: f64,
    /// Multiple of the upper bracket used for the outside probe.
    pub outside_factor: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            p_min: 2,
            p_max: 6,
            lambda_range: (0.5, 1.5),
            weight_range: (0.5, 2.0),
            loss_scale: 1.0,
            outside_factor: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub index: usize,
    pub instance: LinearInstance,
    pub inside: InstanceCheck,
    /// Same W, Λ, X with ξ³ at `outside_factor`× the upper bracket.
    pub outside: InstanceCheck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub seed: u64,
    pub options: VerifyOptions,
    pub inside_tested: usize,
    pub counterexamples: usize,
    /// Smallest Hessian eigenvalue over the inside samples.
    pub min_eig_inside: Option<f64>,
    /// Smallest eigenvalue divided by ‖H‖₂ over the inside samples.
    pub min_relative_eig_inside: Option<f64>,
    pub weyl_bounds_hold: bool,
    pub weyl_printed_bounds_hold: bool,
    pub schur_max_diff: f64,
    pub outside_indefinite: usize,
    pub samples: Vec<SampleReport>,
}

impl ConvexityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

/// Draws one random instance with ξ³ uniform inside its region bracket.
pub fn sample_instance(seed: u64, index: usize, opts: &VerifyOptions) -> Result<LinearInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let p = rng.gen_range(opts.p_min..=opts.p_max);
    let n = 2 * p + 4;
    let x: Vec<f64> = (0..n * p).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let lambdas: Vec<f64> = (0..p)
        .map(|_| rng.gen_range(opts.lambda_range.0..opts.lambda_range.1))
        .collect();
    let w: Vec<f64> = (0..p)
        .map(|_| {
            let m = rng.gen_range(opts.weight_range.0..opts.weight_range.1);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    let mut inst = LinearInstance {
        n,
        p,
        x,
        y,
        w,
        lambdas,
        xi: 1.0,
    };
    let (_, lower, upper) = region_bracket(&inst)?;
    let u: f64 = rng.gen();
    inst.xi = (lower + u * (upper - lower)).cbrt();
    Ok(inst)
}

/// Samples inside-region instances and checks positive semidefiniteness, the
/// Schur complement and the Weyl sandwich at each. Findings are data: a
/// counterexample is reported, not raised.
pub fn verify_convexity(samples: usize, seed: u64, opts: &VerifyOptions) -> Result<ConvexityReport> {
    let run = |i: usize| -> Result<SampleReport> {
        let instance = sample_instance(seed, i, opts)?;
        let inside = check_instance(&instance, opts.loss_scale)?;
        let mut far = instance.clone();
        far.xi = (opts.outside_factor * inside.region.upper).cbrt();
        let outside = check_instance(&far, opts.loss_scale)?;
        Ok(SampleReport {
            index: i,
            instance,
            inside,
            outside,
        })
    };
    let reports: Vec<SampleReport> = par::map_indexed(samples, run).into_iter().collect::<Result<_>>()?;
    Ok(summarize(seed, opts, reports))
}

/// As [`verify_convexity`] but always sequential.
pub fn verify_convexity_sequential(samples: usize, seed: u64, opts: &VerifyOptions) -> Result<ConvexityReport> {
    let mut reports = Vec::with_capacity(samples);
    for i in 0..samples {
        let instance = sample_instance(seed, i, opts)?;
        let inside = check_instance(&instance, opts.loss_scale)?;
        let mut far = instance.clone();
        far.xi = (opts.outside_factor * inside.region.upper).cbrt();
        let outside = check_instance(&far, opts.loss_scale)?;
        reports.push(SampleReport {
            index: i,
            instance,
            inside,
            outside,
        });
    }
    Ok(summarize(seed, opts, reports))
}

fn summarize(seed: u64, opts: &VerifyOptions, samples: Vec<SampleReport>) -> ConvexityReport {
    let inside: Vec<&InstanceCheck> = samples.iter().map(|s| &s.inside).filter(|c| c.region.inside).collect();
    let fold_min = |it: &mut dyn Iterator<Item = f64>| it.fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v))));
    ConvexityReport {
        seed,
        options: opts.clone(),
        inside_tested: inside.len(),
        counterexamples: inside.iter().filter(|c| !c.psd).count(),
        min_eig_inside: fold_min(&mut inside.iter().map(|c| c.min_eig)),
        min_relative_eig_inside: fold_min(&mut inside.iter().map(|c| c.min_eig / c.norm)),
        weyl_bounds_hold: inside.iter().all(|c| c.weyl_holds),
        weyl_printed_bounds_hold: inside.iter().all(|c| c.weyl_printed_holds),
        schur_max_diff: samples
            .iter()
            .flat_map(|s| [s.inside.schur_max_diff, s.outside.schur_max_diff])
            .fold(0.0, f64::max),
        outside_indefinite: samples.iter().filter(|s| !s.outside.psd).count(),
        samples,
    }
}

/// Spectral norm helper re-exported for reports.
pub fn hessian_norm(h: &HaloHessian) -> f64 {
    symmetric_norm(&h.full)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_instance(xi: f64) -> LinearInstance {
        LinearInstance {
            n: 2,
            p: 2,
            x: vec![1.0, 0.0, 0.0, 1.0],
            y: vec![0.0, 0.0],
            w: vec![2.0, 1.0],
            lambdas: vec![1.0, 1.0],
            xi,
        }
    }

    #[test]
    fn singular_value_examples() {
        assert!((smallest_singular_value(&[1.0, 0.0, 0.0, 1.0], 2, 2) - 1.0).abs() < 1e-15);
        assert_eq!(smallest_singular_value(&[3.0, 0.0, 0.0, 0.0], 2, 2), 0.0);
    }

    #[test]
    fn hessian_block_examples() {
        let inst = LinearInstance {
            n: 1,
            p: 1,
            x: vec![1.0],
            y: vec![0.0],
            w: vec![2.0],
            lambdas: vec![1.0],
            xi: 1.0,
        };
        let h = halo_hessian(&inst, 1.0).unwrap();
        assert_eq!(h.a, vec![12.0]);
        assert_eq!(h.b, vec![-2.0]);
        assert_eq!(h.c.data, vec![1.0]);

        let mut off = identity_instance(0.0);
        off.xi = 0.0;
        let h = halo_hessian(&off, 1.0).unwrap();
        assert!(h.a.iter().chain(&h.b).all(|v| *v == 0.0));
        let check = check_instance(&off, 1.0).unwrap();
        assert!(check.psd);

        let mut zero_w = identity_instance(1.0);
        zero_w.w[0] = 0.0;
        assert!(matches!(halo_hessian(&zero_w, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn region_examples() {
        let r = in_region(&identity_instance(2.5)).unwrap();
        assert_eq!((r.lower, r.upper), (12.0, 24.0));
        assert!(r.inside);
        assert!(!in_region(&identity_instance(3.0)).unwrap().inside);
    }

    #[test]
    fn single_weight_boundary_is_inside() {
        let mut inst = LinearInstance {
            n: 3,
            p: 1,
            x: vec![1.0, 2.0, 0.5],
            y: vec![0.0; 3],
            w: vec![0.8],
            lambdas: vec![1.1],
            xi: 1.0,
        };
        let (_, lower, upper) = region_bracket(&inst).unwrap();
        assert_eq!(lower, upper);
        inst.xi = lower.cbrt();
        assert!(in_region(&inst).unwrap().inside);
    }

    #[test]
    fn schur_two_ways_agree() {
        let inst = sample_instance(11, 0, &VerifyOptions::default()).unwrap();
        let h = halo_hessian(&inst, 1.0).unwrap();
        assert!(schur_direct(&h).max_abs_diff(&schur_eliminated(&h).unwrap()) < 1e-10);
    }

    #[test]
    fn zero_samples_give_empty_report() {
        let r = verify_convexity(0, 1, &VerifyOptions::default()).unwrap();
        assert_eq!(r.inside_tested, 0);
        assert!(r.samples.is_empty());
    }

    #[test]
    fn report_is_seed_deterministic() {
        let opts = VerifyOptions::default();
        let a = verify_convexity(8, 5, &opts).unwrap().to_json();
        let b = verify_convexity(8, 5, &opts).unwrap().to_json();
        let c = verify_convexity_sequential(8, 5, &opts).unwrap().to_json();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }
}
