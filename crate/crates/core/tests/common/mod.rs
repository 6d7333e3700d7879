//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use halo_core::pruning::LinearProblem;

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Fourth-order five-point central differences.
pub fn central_diff5(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let mut at = |d: f64| {
                probe[i] = x[i] + d;
                let v = f(&probe);
                probe[i] = x[i];
                v
            };
            (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h)
        })
        .collect()
}

/// Hessian by central differences of a scalar function.
pub fn fd_hessian(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut out = vec![vec![0.0; n]; n];
    let mut p = x.to_vec();
    for i in 0..n {
        for j in 0..n {
            let mut eval = |di: f64, dj: f64| {
                p[i] += di;
                p[j] += dj;
                let v = f(&p);
                p[i] -= di;
                p[j] -= dj;
                v
            };
            out[i][j] = (eval(h, h) - eval(h, -h) - eval(-h, h) + eval(-h, -h)) / (4.0 * h * h);
        }
    }
    out
}

/// Largest relative error between two vectors, relative to the larger
/// magnitude (with a floor for values near zero).
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Solves a dense square system by Gaussian elimination with partial
/// pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

pub fn gram_rows(x: &[f64], n: usize, p: usize) -> Vec<Vec<f64>> {
    (0..p)
        .map(|i| (0..p).map(|j| (0..n).map(|r| x[r * p + i] * x[r * p + j]).sum()).collect())
        .collect()
}

/// Smallest eigenvalue of a symmetric positive-definite matrix by inverse
/// power iteration.
pub fn inverse_power_min_eig(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
    let mut estimate = 0.0;
    for _ in 0..500 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        let next = solve(a.to_vec(), v.clone());
        let rayleigh: f64 = next.iter().zip(&v).map(|(x, y)| x * y).sum();
        let new_estimate = 1.0 / rayleigh;
        v = next;
        if (new_estimate - estimate).abs() <= 1e-15 * new_estimate.abs() {
            return new_estimate;
        }
        estimate = new_estimate;
    }
    estimate
}

/// Least squares on the columns flagged in `support` via normal equations.
pub fn restricted_ols(x: &[f64], y: &[f64], n: usize, p: usize, support: &[bool]) -> Vec<f64> {
    let cols: Vec<usize> = (0..p).filter(|&j| support[j]).collect();
    let a: Vec<Vec<f64>> = cols
        .iter()
        .map(|&i| cols.iter().map(|&j| (0..n).map(|r| x[r * p + i] * x[r * p + j]).sum()).collect())
        .collect();
    let b: Vec<f64> = cols.iter().map(|&i| (0..n).map(|r| x[r * p + i] * y[r]).sum()).collect();
    let sol = if cols.is_empty() { vec![] } else { solve(a, b) };
    let mut w = vec![0.0; p];
    for (c, v) in cols.into_iter().zip(sol) {
        w[c] = v;
    }
    w
}

/// Minimizer of (1/2n)‖y − Xw‖² + Σ MCP(w_j; λ, γ) by coordinate descent
/// with the firm-thresholding update (requires ‖x_j‖²/n > 1/γ).
pub fn mcp_coordinate_descent(prob: &LinearProblem, lambda: f64, gamma: f64, w0: &[f64]) -> Vec<f64> {
    let (n, p) = (prob.n, prob.p);
    let cols: Vec<Vec<f64>> = (0..p).map(|j| prob.column(j)).collect();
    let a: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / n as f64).collect();
    let mut w = w0.to_vec();
    let mut r = prob.residual(&w);
    for _ in 0..100_000 {
        let mut change = 0.0f64;
        for j in 0..p {
            let z = cols[j].iter().zip(&r).map(|(x, y)| x * y).sum::<f64>() / n as f64 + a[j] * w[j];
            let new = if z.abs() <= gamma * lambda * a[j] {
                let s = z.signum() * (z.abs() - lambda).max(0.0);
                s / (a[j] - 1.0 / gamma)
            } else {
                z / a[j]
            };
            let d = new - w[j];
            if d != 0.0 {
                for (ri, x) in r.iter_mut().zip(&cols[j]) {
                    *ri -= x * d;
                }
                w[j] = new;
                change = change.max(d.abs());
            }
        }
        if change < 1e-12 {
            break;
        }
    }
    w
}

/// Standard-form MCP objective used to compare solutions.
pub fn mcp_objective(prob: &LinearProblem, lambda: f64, gamma: f64, w: &[f64]) -> f64 {
    prob.loss(w)
        + w.iter()
            .map(|v| {
                let a = v.abs();
                if a <= gamma * lambda {
                    lambda * a - a * a / (2.0 * gamma)
                } else {
                    gamma * lambda * lambda / 2.0
                }
            })
            .sum::<f64>()
}

use halo_core::engine::{Tape, Tensor, Var};
use halo_core::penalties::{penalty_subgrad, penalty_value, Coeffs, HKind, PenaltyConfig, PenaltyKind};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> halo_core::Result<Var>>;

/// A randomized engine instance: input leaves plus the op applied to them.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
    pub tol: f64,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values with |v| ≥ 1e-3 so that ReLU kinks are far from the FD stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(1e-3..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values separated by at least 1e-3, so max-pool winners are
/// stable under perturbation.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// One randomized instance of every differentiable engine op.
pub fn engine_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
    let targets: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    vec![
        OpCase {
            name: "matmul",
            inputs: vec![rand_tensor(rng, &[3, 4]), rand_tensor(rng, &[4, 2])],
            build: Box::new(|t, v| t.matmul(v[0], v[1])),
            tol: 1e-4,
        },
        OpCase {
            name: "add_bias",
            inputs: vec![rand_tensor(rng, &[2, 3, 2, 2]), rand_tensor(rng, &[3])],
            build: Box::new(|t, v| t.add_bias(v[0], v[1])),
            tol: 1e-4,
        },
        OpCase {
            name: "conv2d",
            inputs: vec![rand_tensor(rng, &[2, 2, 5, 5]), rand_tensor(rng, &[3, 2, 3, 3])],
            build: Box::new(|t, v| t.conv2d(v[0], v[1], 2, 1)),
            tol: 1e-4,
        },
        OpCase {
            name: "conv2d_kernel",
            inputs: vec![rand_tensor(rng, &[1, 1, 4, 4]), rand_tensor(rng, &[1, 1, 3, 3])],
            build: Box::new(|t, v| t.conv2d(v[0], v[1], 1, 0)),
            tol: 1e-5,
        },
        OpCase {
            name: "relu",
            inputs: vec![away_from_zero(rng, &[3, 4])],
            build: Box::new(|t, v| Ok(t.relu(v[0]))),
            tol: 1e-4,
        },
        OpCase {
            name: "maxpool2d",
            inputs: vec![distinct(rng, &[2, 2, 4, 4])],
            build: Box::new(|t, v| t.maxpool2d(v[0], 2)),
            tol: 1e-4,
        },
        OpCase {
            name: "reshape",
            inputs: vec![rand_tensor(rng, &[2, 6])],
            build: Box::new(|t, v| t.reshape(v[0], vec![3, 4])),
            tol: 1e-4,
        },
        OpCase {
            name: "mul",
            inputs: vec![rand_tensor(rng, &[3, 3]), rand_tensor(rng, &[3, 3])],
            build: Box::new(|t, v| t.mul(v[0], v[1])),
            tol: 1e-4,
        },
        OpCase {
            name: "sum",
            inputs: vec![rand_tensor(rng, &[2, 5])],
            build: Box::new(|t, v| Ok(t.sum(v[0]))),
            tol: 1e-4,
        },
        OpCase {
            name: "softmax_cross_entropy",
            inputs: vec![rand_tensor(rng, &[4, 3])],
            build: Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)),
            tol: 1e-6,
        },
        OpCase {
            name: "half_squared_error",
            inputs: vec![rand_tensor(rng, &[5, 1])],
            build: Box::new(move |t, v| t.half_squared_error(v[0], &targets)),
            tol: 1e-4,
        },
    ]
}

/// Scalarizes the op output with a fixed random projection so that every
/// output element contributes to the checked gradient.
fn projected_loss(case: &OpCase, inputs: &[Tensor], proj: Option<&Tensor>) -> (Tape, Vec<Var>, Var, Tensor) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = (case.build)(&mut tape, &vars).unwrap();
    let shape = tape.value(out).shape().to_vec();
    let proj = match proj {
        Some(p) => p.clone(),
        None => {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|i| 0.5 + ((i * 7919) % 13) as f64 / 13.0).collect();
            Tensor::new(shape.clone(), data).unwrap()
        }
    };
    let r = tape.leaf(proj.clone(), false);
    let prod = tape.mul(out, r).unwrap();
    let loss = tape.sum(prod);
    (tape, vars, loss, proj)
}

/// Maximum elementwise relative error between backward() and central
/// differences with step 1e-6.
pub fn engine_grad_error(case: &OpCase) -> f64 {
    let (mut tape, vars, loss, proj) = projected_loss(case, &case.inputs, None);
    tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; case.inputs[i].len()]);
        let f = |x: &[f64]| {
            let mut inputs = case.inputs.clone();
            inputs[i] = Tensor::new(case.inputs[i].shape().to_vec(), x.to_vec()).unwrap();
            let (t, _, l, _) = projected_loss(case, &inputs, Some(&proj));
            t.value(l).data()[0]
        };
        let numeric = central_diff(&f, case.inputs[i].data(), 1e-6);
        worst = worst.max(max_rel_err(&analytic, &numeric, 1e-4));
    }
    worst
}

/// Random penalty configuration of the given kind with inputs away from
/// kinks: |w| ∈ [0.1, 2], λ ∈ [0.5, 2], and MCP weights off |w| = γλ.
pub struct PenaltyCase {
    pub cfg: PenaltyConfig,
    pub w: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub assign: Vec<usize>,
    pub groups: Vec<f64>,
}

pub fn penalty_case(kind: PenaltyKind, rng: &mut ChaCha8Rng, log_sq: bool) -> PenaltyCase {
    let p = rng.gen_range(3..9);
    let mut cfg = PenaltyConfig::halo(rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0)).with_kind(kind);
    cfg.q = rng.gen_range(0.5..2.0);
    cfg.gamma = rng.gen_range(1.5..4.0);
    if log_sq {
        cfg.h_kind = HKind::LogSq;
    }
    let mut w: Vec<f64> = (0..p)
        .map(|_| {
            let m = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    if kind == PenaltyKind::Mcp {
        let knot = cfg.gamma * cfg.xi;
        for v in &mut w {
            if (v.abs() - knot).abs() < 1e-2 {
                *v *= 1.05;
            }
        }
    }
    let mut lambdas: Vec<f64> = (0..p).map(|_| rng.gen_range(0.5..2.0)).collect();
    if log_sq {
        // keep λ off 1, where (ln λ)² has a stationary point
        for l in &mut lambdas {
            if (*l - 1.0).abs() < 0.1 {
                *l += 0.2;
            }
        }
    }
    let ngroups = if kind == PenaltyKind::Sws { 1 } else { 2 };
    let assign: Vec<usize> = (0..p).map(|j| j % ngroups).collect();
    let mut groups: Vec<f64> = (0..ngroups).map(|_| rng.gen_range(0.5..2.0)).collect();
    if log_sq {
        for l in &mut groups {
            if (*l - 1.0).abs() < 0.1 {
                *l += 0.2;
            }
        }
    }
    PenaltyCase {
        cfg,
        w,
        lambdas,
        assign,
        groups,
    }
}

impl PenaltyCase {
    pub fn coeffs(&self) -> Coeffs<'_> {
        let mut c = Coeffs::none();
        if self.cfg.kind.uses_weight_lambdas() {
            c = Coeffs::per_weight(&self.lambdas);
        }
        if self.cfg.kind.uses_group_lambdas() {
            let g = Coeffs::grouped(&self.assign, &self.groups);
            c.groups = g.groups;
        }
        c
    }

    /// Largest relative error of the subgradient against five-point central
    /// differences over W, per-weight Λ and group Λ.
    pub fn fd_error(&self) -> f64 {
        let h = 1e-3;
        let sg = penalty_subgrad(&self.cfg, &self.w, &self.coeffs()).unwrap();
        let fw = |x: &[f64]| {
            let mut c = self.clone_inputs();
            c.w = x.to_vec();
            penalty_value(&c.cfg, &c.w, &c.coeffs()).unwrap()
        };
        let mut worst = max_rel_err(&sg.dw, &central_diff5(&fw, &self.w, h), 1e-6);
        if self.cfg.kind.uses_weight_lambdas() && self.cfg.kind.learns_lambdas() {
            let fl = |x: &[f64]| {
                let mut c = self.clone_inputs();
                c.lambdas = x.to_vec();
                penalty_value(&c.cfg, &c.w, &c.coeffs()).unwrap()
            };
            let dl = &sg.dlambda;
            worst = worst.max(max_rel_err(dl, &central_diff5(&fl, &self.lambdas, h), 1e-6));
        }
        if self.cfg.kind.uses_group_lambdas() {
            let fg = |x: &[f64]| {
                let mut c = self.clone_inputs();
                c.groups = x.to_vec();
                penalty_value(&c.cfg, &c.w, &c.coeffs()).unwrap()
            };
            let dg = &sg.dgroup;
            worst = worst.max(max_rel_err(dg, &central_diff5(&fg, &self.groups, h), 1e-6));
        }
        worst
    }

    fn clone_inputs(&self) -> PenaltyCase {
        PenaltyCase {
            cfg: self.cfg.clone(),
            w: self.w.clone(),
            lambdas: self.lambdas.clone(),
            assign: self.assign.clone(),
            groups: self.groups.clone(),
        }
    }
}

use halo_core::pruning::{lla, threshold_for_sparsity, two_stage_linear, CdOptions, PenaltyDeriv};

/// Random dense regression instance with a few strong, a few weak and some
/// null coefficients.
pub fn random_problem(n: usize, p: usize, seed: u64) -> LinearProblem {
    use rand::SeedableRng;
    use rand_distr::StandardNormal;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n * p).map(|_| rng.sample(StandardNormal)).collect();
    let w: Vec<f64> = (0..p).map(|j| if j % 3 == 0 { 0.0 } else { rng.gen_range(-3.0..3.0) }).collect();
    let y = (0..n)
        .map(|i| {
            let e: f64 = rng.sample(StandardNormal);
            x[i * p..(i + 1) * p].iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.5 * e
        })
        .collect();
    LinearProblem::new(n, p, x, y).unwrap()
}

/// Support selected by magnitude pruning at `target` followed by a restricted
/// refit, computed two ways: the two-stage path and two LLA iterations with
/// the pruning derivative. Returns (two-stage, lla) coefficient vectors.
pub fn pruning_paths(prob: &LinearProblem, target: f64) -> (Vec<f64>, Vec<f64>) {
    let (refit, _) = two_stage_linear(prob, target).unwrap();
    let opts = CdOptions::default();
    let zeros = vec![0.0; prob.p];
    // W⁽⁰⁾ with no penalty is the dense least-squares fit; τ comes from it
    let w0 = lla(prob, &zeros, &|_| 0.0, 0, opts).unwrap().remove(0);
    let tau = threshold_for_sparsity(&w0, target).unwrap();
    let deriv = PenaltyDeriv::Pruning { tau };
    let iterates = lla(prob, &zeros, &|m| deriv.eval(m), 1, opts).unwrap();
    (refit, iterates[1].clone())
}

/// Standardized 10×5 instance with strong signals and low noise. γ is twice
/// the reciprocal of the smallest eigenvalue of XᵀX/n, so the MCP objective is
/// convex, and γλ = 1 sits well below the smallest true coefficient.
pub fn mcp_instance(seed: u64) -> (LinearProblem, f64, f64) {
    use rand::SeedableRng;
    use rand_distr::StandardNormal;
    let (n, p) = (10, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..n * p).map(|_| rng.sample(StandardNormal)).collect();
    for j in 0..p {
        let mean = (0..n).map(|i| x[i * p + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            x[i * p + j] -= mean;
        }
        let scale = ((0..n).map(|i| x[i * p + j].powi(2)).sum::<f64>() / n as f64).sqrt();
        for i in 0..n {
            x[i * p + j] /= scale;
        }
    }
    let w = [6.0, -5.0, 0.0, 0.0, 4.0];
    let y = (0..n)
        .map(|i| {
            let e: f64 = rng.sample(StandardNormal);
            x[i * p..(i + 1) * p].iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.01 * e
        })
        .collect();
    let prob = LinearProblem::new(n, p, x, y).unwrap();
    let g = gram_rows(&prob.x, n, p)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v / n as f64).collect())
        .collect::<Vec<Vec<f64>>>();
    let gamma = 2.0 / inverse_power_min_eig(&g);
    // γλ = 1 keeps every true coefficient on the flat part of the penalty
    (prob, 1.0 / gamma, gamma)
}
