//! `sweep`: train over a ξ = ψ grid and seeds, prune each model at every
//! target, and tabulate accuracy.

use std::fmt::Write as _;
use std::path::Path;

use halo_core::Result;
use serde::Serialize;

use crate::config::RunConfig;
use crate::prune::{prune_and_evaluate, Mode, Selector};
use crate::run::{load_data, train_run};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub xi: f64,
    pub target: f64,
    pub seed: u64,
    pub sparsity: f64,
    pub accuracy: Option<f64>,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetSummary {
    pub target: f64,
    pub best_xi: f64,
    pub best_median_accuracy: f64,
    /// ξ values whose median accuracy is within one point of the best.
    pub xi_within_one_point: Vec<f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn cmd_sweep(cfg: &RunConfig, xis: &[f64], targets: &[f64], seeds: &[u64], out: &Path) -> Result<Vec<SweepRow>> {
    if xis.is_empty() || targets.is_empty() || seeds.is_empty() {
        return Err(halo_core::Error::Config("sweep grid is empty".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for &xi in xis {
        for &seed in seeds {
            let mut overrides = vec![("xi", xi.to_string()), ("seed", seed.to_string())];
            if cfg.penalty.kind.uses_psi() {
                overrides.push(("psi", xi.to_string()));
            }
            let cell = cfg.with_overrides(&overrides)?;
            let data = load_data(&cell)?;
            let dir = out.join("cells").join(format!("xi={xi}_seed={seed}"));
            let trained = train_run(&cell, &data, &dir)?;
            for &target in targets {
                let (_, _, report) = prune_and_evaluate(
                    &trained.model,
                    Selector::Target(target),
                    Mode::Threshold,
                    data.eval_set(),
                    cell.optim.eval_chunk,
                )?;
                rows.push(SweepRow {
                    xi,
                    target,
                    seed,
                    sparsity: report.sparsity_ratio,
                    accuracy: report.accuracy,
                    loss: report.loss,
                });
            }
        }
    }
    rows.sort_by(|a, b| {
        a.xi.total_cmp(&b.xi)
            .then(a.target.total_cmp(&b.target))
            .then(a.seed.cmp(&b.seed))
    });

    let mut csv = String::from("row,xi,target,seed,sparsity,accuracy,loss\n");
    for r in &rows {
        let _ = writeln!(csv, "cell,{},{},{},{},{},{}", r.xi, r.target, r.seed, r.sparsity, opt(r.accuracy), r.loss);
    }
    let mut summaries = Vec::new();
    for &target in targets {
        let mut medians = Vec::new();
        for &xi in xis {
            let cell: Vec<&SweepRow> = rows.iter().filter(|r| r.xi == xi && r.target == target).collect();
            let acc: Option<Vec<f64>> = cell.iter().map(|r| r.accuracy).collect();
            let acc = acc.map(median);
            let sparsity = median(cell.iter().map(|r| r.sparsity).collect());
            let loss = median(cell.iter().map(|r| r.loss).collect());
            let _ = writeln!(csv, "median,{xi},{target},,{sparsity},{},{loss}", opt(acc));
            if let Some(a) = acc {
                medians.push((xi, a));
            }
        }
        if let Some(&(best_xi, best)) = medians.iter().max_by(|a, b| a.1.total_cmp(&b.1)) {
            summaries.push(TargetSummary {
                target,
                best_xi,
                best_median_accuracy: best,
                xi_within_one_point: medians.iter().filter(|(_, a)| best - a <= 0.01).map(|(x, _)| *x).collect(),
            });
        }
    }
    std::fs::write(out.join("sweep.csv"), csv)?;
    let json = serde_json::to_string_pretty(&summaries).expect("serializable");
    std::fs::write(out.join("sweep_summary.json"), format!("{json}\n"))?;
    Ok(rows)
}
