//! Bit-width assignment under an average-precision budget, and fine-tuning
//! of models stitched together from uniform-precision prototypes.

use serde::{Deserialize, Serialize};

use crate::admm::{train_quantized_from, AdmmConfig, AdmmOutcome, AdmmState, ClusterState};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{cluster_layout, ClusterLayout, ModelSpec};
use crate::quant::{self, PrecisionAssignment, BIT_WIDTHS};
use crate::sensitivity::SensitivityReport;
use crate::tensor::ParamVector;

/// Cluster count up to which the solver is exact.
pub const EXACT_LIMIT: usize = 24;

/// Frontier size beyond which the exact solver gives up for the greedy one.
const FRONTIER_LIMIT: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub target_avg_bits: f64,
    /// `true`: never exceed the target. `false`: spend the achievable total
    /// closest to the target, on either side.
    pub hard_cap: bool,
}

impl BudgetSpec {
    pub fn validate(&self) -> Result<()> {
        let t = self.target_avg_bits;
        if !(t >= 1.0) {
            return Err(Error::config(format!("infeasible budget: {t} average bits is below 1")));
        }
        if !(t <= 8.0) {
            return Err(Error::config(format!("budget {t} exceeds 8 average bits")));
        }
        Ok(())
    }
}

/// `Σ_i Ω[i][choice_i]`.
pub fn objective(table: &[[f64; 4]], choice: &[usize]) -> f64 {
    table.iter().zip(choice).map(|(row, &j)| row[j]).sum()
}

#[derive(Clone)]
struct Point {
    bits: u64,
    omega: f64,
    /// Index into the back-pointer arena.
    node: usize,
}

/// All Pareto-optimal (total bits, Ω) trade-offs, smallest total first.
fn pareto_frontier(table: &[[f64; 4]], counts: &[u64]) -> Option<Vec<(u64, f64, Vec<usize>)>> {
    // Arena of (parent, choice) links so choices are not copied per state.
    let mut arena: Vec<(usize, usize)> = vec![(usize::MAX, usize::MAX)];
    let mut front = vec![Point { bits: 0, omega: 0.0, node: 0 }];
    for (row, &count) in table.iter().zip(counts) {
        let mut next = Vec::with_capacity(front.len() * 4);
        for p in &front {
            for (j, &b) in BIT_WIDTHS.iter().enumerate() {
                next.push((p.bits + b as u64 * count, p.omega + row[j], p.node, j));
            }
        }
        // Smaller total first; equal totals keep the lower Ω, then the earlier candidate.
        next.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        front.clear();
        let mut best = f64::INFINITY;
        for (bits, omega, parent, j) in next {
            if omega < best {
                best = omega;
                arena.push((parent, j));
                front.push(Point { bits, omega, node: arena.len() - 1 });
            }
        }
        if front.len() > FRONTIER_LIMIT {
            return None;
        }
    }
    Some(
        front
            .into_iter()
            .map(|p| {
                let mut choice = Vec::with_capacity(table.len());
                let mut n = p.node;
                while arena[n].0 != usize::MAX {
                    choice.push(arena[n].1);
                    n = arena[n].0;
                }
                choice.reverse();
                (p.bits, p.omega, choice)
            })
            .collect(),
    )
}

/// Greedy upgrades by Ω reduction per extra bit, compared against every feasible uniform assignment.
fn greedy(table: &[[f64; 4]], counts: &[u64], cap: u64) -> Option<Vec<usize>> {
    let total = |c: &[usize]| -> u64 { c.iter().zip(counts).map(|(&j, &n)| BIT_WIDTHS[j] as u64 * n).sum() };
    let mut choice = vec![0usize; table.len()];
    let mut used = total(&choice);
    if used > cap {
        return None;
    }
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, row) in table.iter().enumerate() {
            for j in choice[i] + 1..4 {
                let extra = (BIT_WIDTHS[j] - BIT_WIDTHS[choice[i]]) as u64 * counts[i];
                let gain = row[choice[i]] - row[j];
                if gain <= 0.0 || used + extra > cap {
                    continue;
                }
                let rate = gain / extra as f64;
                if best.map_or(true, |(r, _, _)| rate > r) {
                    best = Some((rate, i, j));
                }
            }
        }
        match best {
            Some((_, i, j)) => {
                used += (BIT_WIDTHS[j] - BIT_WIDTHS[choice[i]]) as u64 * counts[i];
                choice[i] = j;
            }
            None => break,
        }
    }
    for j in 0..4 {
        let uniform = vec![j; table.len()];
        if total(&uniform) <= cap && objective(table, &uniform) < objective(table, &choice) {
            choice = uniform;
        }
    }
    Some(choice)
}

/// Minimizes total sensitivity subject to the average-bit budget.
pub fn solve(report: &SensitivityReport, layout: &ClusterLayout, budget: &BudgetSpec) -> Result<PrecisionAssignment> {
    let table = report.table(layout)?;
    let counts: Vec<u64> = layout.clusters.iter().map(|c| c.count() as u64).collect();
    let choice = solve_table(&table, &counts, budget)?;
    let bits: Vec<u8> = choice.iter().map(|&j| BIT_WIDTHS[j]).collect();
    PrecisionAssignment::from_bits(layout, &bits)
}

/// Index into `BIT_WIDTHS` per cluster.
pub fn solve_table(table: &[[f64; 4]], counts: &[u64], budget: &BudgetSpec) -> Result<Vec<usize>> {
    budget.validate()?;
    if table.len() != counts.len() || table.is_empty() {
        return Err(Error::config("sensitivity table and layout disagree"));
    }
    if table.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::config("sensitivity table has non-finite entries"));
    }
    let total: u64 = counts.iter().sum();
    let target = budget.target_avg_bits * total as f64;
    let hard = (target + 1e-9 * total as f64).floor() as u64;
    if table.len() <= EXACT_LIMIT {
        if let Some(front) = pareto_frontier(table, counts) {
            let below = front.iter().rposition(|p| p.0 <= hard);
            let pick = if budget.hard_cap {
                below
            } else {
                let above = front.iter().position(|p| p.0 as f64 >= target);
                match (below, above) {
                    (Some(b), Some(a)) => {
                        if (front[a].0 as f64 - target) < (target - front[b].0 as f64) {
                            Some(a)
                        } else {
                            Some(b)
                        }
                    }
                    (b, a) => b.or(a),
                }
            };
            let i = pick.ok_or_else(|| Error::config("no assignment satisfies the budget"))?;
            return Ok(front[i].2.clone());
        }
        log::warn!("pareto frontier too large, using the greedy solver");
    }
    greedy(table, counts, hard).ok_or_else(|| Error::config("no assignment satisfies the budget"))
}

/// Per-bit-width ADMM results used as building blocks for mixed models.
#[derive(Debug, Clone)]
pub struct Prototype {
    pub bits: u8,
    pub theta: ParamVector,
    pub lambda: ParamVector,
    pub scales: Vec<f64>,
    pub codes: Vec<Vec<i8>>,
}

impl Prototype {
    pub fn from_outcome(outcome: &AdmmOutcome) -> Result<Self> {
        let s = &outcome.state;
        let bits = s.clusters[0].bits;
        if s.clusters.iter().any(|c| c.bits != bits) {
            return Err(Error::config("prototype is not uniformly quantized"));
        }
        Ok(Prototype {
            bits,
            theta: s.theta.clone(),
            lambda: s.lambda.clone(),
            scales: s.scales(),
            codes: s.clusters.iter().map(|c| c.codes.clone()).collect(),
        })
    }
}

/// ADMM state assembled cluster by cluster from the prototype of the assigned width.
pub fn stitch(spec: &ModelSpec, prototypes: &[Prototype], assignment: &PrecisionAssignment) -> Result<AdmmState> {
    let layout = cluster_layout(spec);
    assignment.validate(&layout)?;
    let first = prototypes.first().ok_or_else(|| Error::config("no prototypes"))?;
    let mut theta = first.theta.clone();
    let mut lambda = first.lambda.clone();
    let mut reference = first.theta.zeros_like();
    let mut clusters = Vec::with_capacity(layout.len());
    for (i, (c, (_, bits))) in layout.clusters.iter().zip(&assignment.entries).enumerate() {
        let p = prototypes
            .iter()
            .find(|p| p.bits == *bits)
            .ok_or_else(|| Error::config(format!("missing {bits}-bit prototype")))?;
        spec.check_params(&p.theta)?;
        c.slice_mut(&mut theta).copy_from_slice(c.slice(&p.theta));
        c.slice_mut(&mut lambda).copy_from_slice(c.slice(&p.lambda));
        c.slice_mut(&mut reference).copy_from_slice(&quant::dequantize(&p.codes[i], p.scales[i]));
        clusters.push(ClusterState { bits: *bits, scale: p.scales[i], codes: p.codes[i].clone() });
    }
    Ok(AdmmState { theta, lambda, clusters, reference, k: 0, val_history: Vec::new() })
}

/// Stitches the mixed model and runs a short ADMM schedule on it.
/// Multipliers are carried over from the prototypes.
pub fn finetune_assignment(
    spec: &ModelSpec,
    prototypes: &[Prototype],
    assignment: &PrecisionAssignment,
    train: &Corpus,
    valid: &Corpus,
    cfg: &AdmmConfig,
    vocab_hash: u64,
) -> Result<AdmmOutcome> {
    let state = stitch(spec, prototypes, assignment)?;
    train_quantized_from(spec, train, valid, state, cfg, vocab_hash)
}
