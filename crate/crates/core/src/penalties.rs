//! Sparsity penalties: values and subgradients over the flat penalized
//! weight vector.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    None,
    L1,
    Lq,
    Weighted,
    Mcp,
    Sws,
    Halo,
    Shalo1,
    Shalo2,
}

impl PenaltyKind {
    pub const ALL: [PenaltyKind; 9] = [
        PenaltyKind::None,
        PenaltyKind::L1,
        PenaltyKind::Lq,
        PenaltyKind::Weighted,
        PenaltyKind::Mcp,
        PenaltyKind::Sws,
        PenaltyKind::Halo,
        PenaltyKind::Shalo1,
        PenaltyKind::Shalo2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PenaltyKind::None => "none",
            PenaltyKind::L1 => "l1",
            PenaltyKind::Lq => "lq",
            PenaltyKind::Weighted => "weighted",
            PenaltyKind::Mcp => "mcp",
            PenaltyKind::Sws => "sws",
            PenaltyKind::Halo => "halo",
            PenaltyKind::Shalo1 => "shalo1",
            PenaltyKind::Shalo2 => "shalo2",
        }
    }

    /// Kinds that read per-weight coefficients.
    pub fn uses_weight_lambdas(self) -> bool {
        matches!(self, PenaltyKind::Weighted | PenaltyKind::Halo | PenaltyKind::Shalo2)
    }

    /// Kinds that read group (or shared) coefficients.
    pub fn uses_group_lambdas(self) -> bool {
        matches!(self, PenaltyKind::Sws | PenaltyKind::Shalo1 | PenaltyKind::Shalo2)
    }

    /// Kinds whose coefficients are trained jointly with the weights.
    pub fn learns_lambdas(self) -> bool {
        matches!(
            self,
            PenaltyKind::Sws | PenaltyKind::Halo | PenaltyKind::Shalo1 | PenaltyKind::Shalo2
        )
    }

    pub fn uses_psi(self) -> bool {
        self.learns_lambdas()
    }
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PenaltyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PenaltyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = PenaltyKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown penalty kind {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HKind {
    /// λ^(−k)
    InvPow,
    /// (ln λ)²
    LogSq,
}

impl FromStr for HKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inv_pow" => Ok(HKind::InvPow),
            "log_sq" => Ok(HKind::LogSq),
            _ => Err(Error::Config(format!("unknown h_kind {s:?}; expected inv_pow or log_sq"))),
        }
    }
}

impl HKind {
    pub fn name(self) -> &'static str {
        match self {
            HKind::InvPow => "inv_pow",
            HKind::LogSq => "log_sq",
        }
    }
}

/// Which MCP expression to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McpForm {
    /// λ|w| − w²/(2γ) below γλ, continuous with the plateau γλ²/2.
    Standard,
    /// λ|w| − w²/γ below γλ; jumps at |w| = γλ.
    Printed,
}

impl FromStr for McpForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(McpForm::Standard),
            "printed" => Ok(McpForm::Printed),
            _ => Err(Error::Config(format!("unknown mcp_form {s:?}; expected standard or printed"))),
        }
    }
}

impl McpForm {
    pub fn name(self) -> &'static str {
        match self {
            McpForm::Standard => "standard",
            McpForm::Printed => "printed",
        }
    }
}

/// How penalized weights are grouped for the structured kinds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupMap {
    /// One group per penalized layer.
    Layer,
    /// One group per output unit (dense column or conv filter).
    Unit,
    /// Explicit group index for every penalized weight.
    Explicit(Vec<usize>),
}

impl FromStr for GroupMap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(GroupMap::Layer),
            "unit" => Ok(GroupMap::Unit),
            _ => Err(Error::Config(format!("unknown group_map {s:?}; expected layer or unit"))),
        }
    }
}

impl GroupMap {
    pub fn name(&self) -> &'static str {
        match self {
            GroupMap::Layer => "layer",
            GroupMap::Unit => "unit",
            GroupMap::Explicit(_) => "explicit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub kind: PenaltyKind,
    pub xi: f64,
    pub psi: f64,
    pub gamma: f64,
    pub q: f64,
    pub h_kind: HKind,
    pub k: f64,
    pub mcp_form: McpForm,
    pub group_map: GroupMap,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            kind: PenaltyKind::None,
            xi: 0.0,
            psi: 0.0,
            gamma: 3.0,
            q: 1.0,
            h_kind: HKind::InvPow,
            k: 2.0,
            mcp_form: McpForm::Standard,
            group_map: GroupMap::Layer,
        }
    }
}

impl PenaltyConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn l1(xi: f64) -> Self {
        Self {
            kind: PenaltyKind::L1,
            xi,
            ..Self::default()
        }
    }

    pub fn halo(xi: f64, psi: f64) -> Self {
        Self {
            kind: PenaltyKind::Halo,
            xi,
            psi,
            ..Self::default()
        }
    }

    pub fn with_kind(mut self, kind: PenaltyKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.xi >= 0.0 && self.xi.is_finite()) {
            return bad(format!("xi must be a finite value >= 0, got {}", self.xi));
        }
        if !(self.psi >= 0.0 && self.psi.is_finite()) {
            return bad(format!("psi must be a finite value >= 0, got {}", self.psi));
        }
        if !(self.gamma > 0.0) {
            return bad(format!("gamma must be > 0, got {}", self.gamma));
        }
        if !(self.q > 0.0 && self.q <= 2.0) {
            return bad(format!("q must lie in (0, 2], got {}", self.q));
        }
        if !(self.k > 0.0) {
            return bad(format!("k must be > 0, got {}", self.k));
        }
        Ok(())
    }

    pub fn h(&self, lambda: f64) -> Result<f64> {
        h_eval(self.h_kind, self.k, lambda)
    }

    pub fn h_prime(&self, lambda: f64) -> Result<f64> {
        h_deriv(self.h_kind, self.k, lambda)
    }
}

pub fn h_eval(kind: HKind, k: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("h requires lambda > 0, got {lambda}")));
    }
    Ok(match kind {
        HKind::InvPow if k == 2.0 => 1.0 / (lambda * lambda),
        HKind::InvPow => lambda.powf(-k),
        HKind::LogSq => lambda.ln().powi(2),
    })
}

pub fn h_deriv(kind: HKind, k: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("h requires lambda > 0, got {lambda}")));
    }
    Ok(match kind {
        HKind::InvPow if k == 2.0 => -2.0 / (lambda * lambda * lambda),
        HKind::InvPow => -k * lambda.powf(-k - 1.0),
        HKind::LogSq => 2.0 * lambda.ln() / lambda,
    })
}

/// Group assignment and one coefficient per group.
#[derive(Clone, Copy, Debug)]
pub struct Groups<'a> {
    pub assign: &'a [usize],
    pub lambdas: &'a [f64],
}

/// Regularization coefficients handed to the penalty.
#[derive(Clone, Copy, Debug, Default)]
pub struct Coeffs<'a> {
    pub per_weight: Option<&'a [f64]>,
    pub groups: Option<Groups<'a>>,
}

impl<'a> Coeffs<'a> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn per_weight(lambdas: &'a [f64]) -> Self {
        Self {
            per_weight: Some(lambdas),
            groups: None,
        }
    }

    pub fn grouped(assign: &'a [usize], lambdas: &'a [f64]) -> Self {
        Self {
            per_weight: None,
            groups: Some(Groups { assign, lambdas }),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Subgrad {
    pub dw: Vec<f64>,
    /// Per-weight coefficient gradient; empty when not trained.
    pub dlambda: Vec<f64>,
    /// Group coefficient gradient; empty when not used.
    pub dgroup: Vec<f64>,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Checks that `assign` maps every weight to an existing group and leaves no
/// group empty.
pub fn check_partition(assign: &[usize], weights: usize, groups: usize) -> Result<()> {
    if assign.len() != weights {
        return Err(Error::Config(format!(
            "group map covers {} weights, {} are penalized",
            assign.len(),
            weights
        )));
    }
    let mut seen = vec![false; groups];
    for (j, &g) in assign.iter().enumerate() {
        match seen.get_mut(g) {
            Some(s) => *s = true,
            None => {
                return Err(Error::Config(format!(
                    "weight {j} assigned to group {g}, only {groups} groups"
                )))
            }
        }
    }
    if let Some(g) = seen.iter().position(|s| !s) {
        return Err(Error::Config(format!("group {g} has no members")));
    }
    Ok(())
}

fn weight_lambdas<'a>(cfg: &PenaltyConfig, w: &[f64], c: &Coeffs<'a>) -> Result<&'a [f64]> {
    let lam = c
        .per_weight
        .ok_or_else(|| Error::Config(format!("penalty {} needs per-weight coefficients", cfg.kind)))?;
    if lam.len() != w.len() {
        return Err(Error::Contract(format!("{} coefficients for {} weights", lam.len(), w.len())));
    }
    if let Some(bad) = lam.iter().find(|l| !(**l > 0.0)) {
        return Err(Error::Domain(format!("coefficients must be > 0, found {bad}")));
    }
    Ok(lam)
}

fn group_lambdas<'a>(cfg: &PenaltyConfig, w: &[f64], c: &Coeffs<'a>) -> Result<Groups<'a>> {
    let g = c
        .groups
        .ok_or_else(|| Error::Config(format!("penalty {} needs group coefficients", cfg.kind)))?;
    check_partition(g.assign, w.len(), g.lambdas.len())?;
    if let Some(bad) = g.lambdas.iter().find(|l| !(**l > 0.0)) {
        return Err(Error::Domain(format!("group coefficients must be > 0, found {bad}")));
    }
    if cfg.kind == PenaltyKind::Sws && g.lambdas.len() != 1 {
        return Err(Error::Config(format!(
            "sws shares one coefficient, got {} groups",
            g.lambdas.len()
        )));
    }
    Ok(g)
}

/// MCP value for one weight with threshold parameter `lam`.
pub fn mcp_value(form: McpForm, lam: f64, gamma: f64, w: f64) -> f64 {
    let a = w.abs();
    if a <= gamma * lam {
        match form {
            McpForm::Standard => lam * a - a * a / (2.0 * gamma),
            McpForm::Printed => lam * a - a * a / gamma,
        }
    } else {
        gamma * lam * lam / 2.0
    }
}

pub fn mcp_deriv(form: McpForm, lam: f64, gamma: f64, w: f64) -> f64 {
    let a = w.abs();
    if a <= gamma * lam {
        let slope = match form {
            McpForm::Standard => lam - a / gamma,
            McpForm::Printed => lam - 2.0 * a / gamma,
        };
        sign(w) * slope
    } else {
        0.0
    }
}

/// Per-group inner sums: Σ|w| (shalo1) or Σ h(λ_j)|w_j| + ψλ_j (shalo2).
fn group_inner(cfg: &PenaltyConfig, w: &[f64], groups: &Groups, inner: Option<&[f64]>) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; groups.lambdas.len()];
    for (j, (&wj, &g)) in w.iter().zip(groups.assign).enumerate() {
        sums[g] += match inner {
            Some(lam) => cfg.h(lam[j])? * wj.abs() + cfg.psi * lam[j],
            None => wj.abs(),
        };
    }
    Ok(sums)
}

pub fn penalty_value(cfg: &PenaltyConfig, w: &[f64], coeffs: &Coeffs) -> Result<f64> {
    let xi = cfg.xi;
    Ok(match cfg.kind {
        PenaltyKind::None => 0.0,
        PenaltyKind::L1 => xi * w.iter().map(|v| v.abs()).sum::<f64>(),
        PenaltyKind::Lq => xi * w.iter().map(|v| v.abs().powf(cfg.q)).sum::<f64>().powf(1.0 / cfg.q),
        PenaltyKind::Weighted => {
            let lam = weight_lambdas(cfg, w, coeffs)?;
            xi * w.iter().zip(lam).map(|(v, l)| l * v.abs()).sum::<f64>()
        }
        PenaltyKind::Mcp => w
            .iter()
            .map(|&v| mcp_value(cfg.mcp_form, xi, cfg.gamma, v))
            .sum(),
        PenaltyKind::Halo => {
            let lam = weight_lambdas(cfg, w, coeffs)?;
            let mut shrink = 0.0;
            for (v, &l) in w.iter().zip(lam) {
                shrink += cfg.h(l)? * v.abs();
            }
            xi * shrink + cfg.psi * lam.iter().sum::<f64>()
        }
        PenaltyKind::Sws | PenaltyKind::Shalo1 | PenaltyKind::Shalo2 => {
            let groups = group_lambdas(cfg, w, coeffs)?;
            let inner = if cfg.kind == PenaltyKind::Shalo2 {
                Some(weight_lambdas(cfg, w, coeffs)?)
            } else {
                None
            };
            let sums = group_inner(cfg, w, &groups, inner)?;
            let mut total = 0.0;
            for (&lg, s) in groups.lambdas.iter().zip(&sums) {
                total += xi * cfg.h(lg)? * s + cfg.psi * lg;
            }
            total
        }
    })
}

pub fn penalty_subgrad(cfg: &PenaltyConfig, w: &[f64], coeffs: &Coeffs) -> Result<Subgrad> {
    let xi = cfg.xi;
    let mut out = Subgrad {
        dw: vec![0.0; w.len()],
        ..Subgrad::default()
    };
    match cfg.kind {
        PenaltyKind::None => {}
        PenaltyKind::L1 => {
            for (d, &v) in out.dw.iter_mut().zip(w) {
                *d = xi * sign(v);
            }
        }
        PenaltyKind::Lq => {
            let s: f64 = w.iter().map(|v| v.abs().powf(cfg.q)).sum();
            if s > 0.0 {
                let outer = xi * s.powf(1.0 / cfg.q - 1.0);
                for (d, &v) in out.dw.iter_mut().zip(w) {
                    if v != 0.0 {
                        *d = outer * v.abs().powf(cfg.q - 1.0) * sign(v);
                    }
                }
            }
        }
        PenaltyKind::Weighted => {
            let lam = weight_lambdas(cfg, w, coeffs)?;
            for ((d, &v), &l) in out.dw.iter_mut().zip(w).zip(lam) {
                *d = xi * l * sign(v);
            }
        }
        PenaltyKind::Mcp => {
            for (d, &v) in out.dw.iter_mut().zip(w) {
                *d = mcp_deriv(cfg.mcp_form, xi, cfg.gamma, v);
            }
        }
        PenaltyKind::Halo => {
            let lam = weight_lambdas(cfg, w, coeffs)?;
            out.dlambda = vec![0.0; w.len()];
            for j in 0..w.len() {
                out.dw[j] = xi * cfg.h(lam[j])? * sign(w[j]);
                out.dlambda[j] = xi * cfg.h_prime(lam[j])? * w[j].abs() + cfg.psi;
            }
        }
        PenaltyKind::Sws | PenaltyKind::Shalo1 | PenaltyKind::Shalo2 => {
            let groups = group_lambdas(cfg, w, coeffs)?;
            let inner = if cfg.kind == PenaltyKind::Shalo2 {
                Some(weight_lambdas(cfg, w, coeffs)?)
            } else {
                None
            };
            let sums = group_inner(cfg, w, &groups, inner)?;
            let mut outer = Vec::with_capacity(sums.len());
            out.dgroup = Vec::with_capacity(sums.len());
            for (&lg, s) in groups.lambdas.iter().zip(&sums) {
                outer.push(xi * cfg.h(lg)?);
                out.dgroup.push(xi * cfg.h_prime(lg)? * s + cfg.psi);
            }
            if let Some(lam) = inner {
                out.dlambda = vec![0.0; w.len()];
                for j in 0..w.len() {
                    let o = outer[groups.assign[j]];
                    out.dw[j] = o * cfg.h(lam[j])? * sign(w[j]);
                    out.dlambda[j] = o * (cfg.h_prime(lam[j])? * w[j].abs() + cfg.psi);
                }
            } else {
                for j in 0..w.len() {
                    out.dw[j] = outer[groups.assign[j]] * sign(w[j]);
                }
            }
        }
    }
    Ok(out)
}

/// Structured HALO value for a grouped weight vector. `inner` selects the
/// nested variant.
pub fn shalo_value(cfg: &PenaltyConfig, w: &[f64], assign: &[usize], group_lambdas: &[f64], inner: Option<&[f64]>) -> Result<f64> {
    let kind = if inner.is_some() {
        PenaltyKind::Shalo2
    } else {
        PenaltyKind::Shalo1
    };
    let cfg = cfg.clone().with_kind(kind);
    let coeffs = Coeffs {
        per_weight: inner,
        groups: Some(Groups {
            assign,
            lambdas: group_lambdas,
        }),
    };
    penalty_value(&cfg, w, &coeffs)
}
