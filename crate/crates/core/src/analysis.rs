//! Diagnostics over learned tables and experiment outcomes: loop returns,
//! termination classes, the loop/termination hypothesis, Wilcoxon signed-rank
//! tests, and area above a learning curve.

use statrs::function::erf::erfc;

use crate::dp::{argmax, check_table, greedy_policy, Policy, ValueBundle};
use crate::error::{Error, Result};
use crate::gridworld::{Mdp, N_ACTIONS};
use crate::learner::GTable;

/// Mean cycle weights within this distance of zero count as zero.
pub const SIGN_DEAD_ZONE: f64 = 1e-9;

/// Default cap on depth-first steps spent enumerating simple cycles.
pub const CYCLE_SEARCH_BUDGET: u64 = 20_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LoopSign {
    Positive,
    Negative,
    Zero,
}

named_enum!(LoopSign {
    Positive => "positive",
    Negative => "negative",
    Zero => "zero",
});

impl LoopSign {
    pub fn of(weight: f64) -> LoopSign {
        if weight > SIGN_DEAD_ZONE {
            LoopSign::Positive
        } else if weight < -SIGN_DEAD_ZONE {
            LoopSign::Negative
        } else {
            LoopSign::Zero
        }
    }
}

/// Cycle structure of a weight table over the non-terminal part of an MDP.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopReport {
    /// Largest total weight of a simple cycle (a lower bound when `exhaustive` is false).
    pub max_simple_cycle_return: f64,
    /// Largest mean weight per transition over all cycles.
    pub max_mean_cycle_weight: f64,
    pub sign: LoopSign,
    /// No cycle exists; both weights are then negative infinity.
    pub no_cycles: bool,
    /// Simple-cycle enumeration finished within its budget.
    pub exhaustive: bool,
}

struct CycleGraph {
    // best weight per (from, to) pair; parallel actions collapse to their max
    adj: Vec<Vec<(usize, f64)>>,
}

impl CycleGraph {
    fn new(mdp: &Mdp, weights: &[f64]) -> CycleGraph {
        let nodes: Vec<usize> = (0..mdp.n_states())
            .filter(|&s| !mdp.is_terminal(s) && !mdp.is_absorbing(s))
            .collect();
        let mut index = vec![usize::MAX; mdp.n_states()];
        for (i, &s) in nodes.iter().enumerate() {
            index[s] = i;
        }
        let mut adj = vec![Vec::new(); nodes.len()];
        for (i, &s) in nodes.iter().enumerate() {
            for a in 0..N_ACTIONS {
                let j = index[mdp.next(s, a)];
                if j == usize::MAX {
                    continue;
                }
                let w = weights[s * N_ACTIONS + a];
                let edges: &mut Vec<(usize, f64)> = &mut adj[i];
                match edges.iter_mut().find(|(t, _)| *t == j) {
                    Some(e) => e.1 = e.1.max(w),
                    None => edges.push((j, w)),
                }
            }
            adj[i].sort_by_key(|&(t, _)| t);
        }
        CycleGraph { adj }
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    /// Karp's maximum mean cycle with every node as a zero-weight source.
    fn max_mean_cycle(&self) -> f64 {
        let n = self.len();
        if n == 0 {
            return f64::NEG_INFINITY;
        }
        let mut d = vec![vec![f64::NEG_INFINITY; n]; n + 1];
        d[0].fill(0.0);
        for k in 1..=n {
            for u in 0..n {
                let du = d[k - 1][u];
                if du == f64::NEG_INFINITY {
                    continue;
                }
                for &(v, w) in &self.adj[u] {
                    let cand = du + w;
                    if cand > d[k][v] {
                        d[k][v] = cand;
                    }
                }
            }
        }
        let mut best = f64::NEG_INFINITY;
        for v in 0..n {
            if d[n][v] == f64::NEG_INFINITY {
                continue;
            }
            let worst = (0..n)
                .filter(|&k| d[k][v] > f64::NEG_INFINITY)
                .map(|k| (d[n][v] - d[k][v]) / (n - k) as f64)
                .fold(f64::INFINITY, f64::min);
            best = best.max(worst);
        }
        best
    }

    /// Best simple-cycle total, each cycle rooted at its lowest node.
    fn max_simple_cycle(&self, budget: u64) -> (f64, bool) {
        let n = self.len();
        let mut best = f64::NEG_INFINITY;
        let mut steps = 0u64;
        let mut on_path = vec![false; n];
        for root in 0..n {
            // (node, next edge index, weight so far)
            let mut stack = vec![(root, 0usize, 0.0f64)];
            on_path[root] = true;
            while let Some(top) = stack.last_mut() {
                let (u, ei, acc) = *top;
                if ei == self.adj[u].len() {
                    on_path[u] = false;
                    stack.pop();
                    continue;
                }
                top.1 += 1;
                steps += 1;
                if steps > budget {
                    return (best, false);
                }
                let (v, w) = self.adj[u][ei];
                if v == root {
                    best = best.max(acc + w);
                } else if v > root && !on_path[v] {
                    on_path[v] = true;
                    stack.push((v, 0, acc + w));
                }
            }
        }
        (best, true)
    }
}

/// Loop analysis of `weights` over the MDP's non-terminal, non-absorbing states.
pub fn loop_analysis(mdp: &Mdp, weights: &[f64]) -> Result<LoopReport> {
    loop_analysis_with_budget(mdp, weights, CYCLE_SEARCH_BUDGET)
}

pub fn loop_analysis_with_budget(mdp: &Mdp, weights: &[f64], budget: u64) -> Result<LoopReport> {
    check_table(mdp, weights)?;
    let graph = CycleGraph::new(mdp, weights);
    let mean = graph.max_mean_cycle();
    if mean == f64::NEG_INFINITY {
        return Ok(LoopReport {
            max_simple_cycle_return: f64::NEG_INFINITY,
            max_mean_cycle_weight: f64::NEG_INFINITY,
            sign: LoopSign::Negative,
            no_cycles: true,
            exhaustive: true,
        });
    }
    let (simple, exhaustive) = graph.max_simple_cycle(budget);
    Ok(LoopReport {
        max_simple_cycle_return: simple,
        max_mean_cycle_weight: mean,
        sign: LoopSign::of(mean),
        no_cycles: false,
        exhaustive,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TerminationClass {
    Terminates,
    DoesNotTerminate,
}

named_enum!(TerminationClass {
    Terminates => "terminates",
    DoesNotTerminate => "does_not_terminate",
});

/// Whether the deterministic `policy` reaches a terminal cell from every start
/// state within `n_states` steps.
pub fn policy_terminates(mdp: &Mdp, policy: &Policy) -> bool {
    mdp.start_states().iter().all(|&start| {
        let mut s = start;
        for _ in 0..mdp.n_states() {
            if mdp.is_terminal(s) {
                return true;
            }
            let a = match policy {
                Policy::Deterministic(actions) => actions[s],
                Policy::Stochastic(_) => argmax(&policy.probs(s)),
            };
            s = mdp.next(s, a);
        }
        mdp.is_terminal(s)
    })
}

/// Termination class of the greedy policy of `bundle` (solved under the
/// ground-truth reward).
pub fn classify_termination(mdp: &Mdp, bundle: &ValueBundle) -> TerminationClass {
    if policy_terminates(mdp, &greedy_policy(bundle)) {
        TerminationClass::Terminates
    } else {
        TerminationClass::DoesNotTerminate
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HypothesisPrediction {
    GreedyQOnReward,
    GreedyAdvantage,
    NoPrediction,
}

named_enum!(HypothesisPrediction {
    GreedyQOnReward => "greedy_q_on_reward",
    GreedyAdvantage => "greedy_advantage",
    NoPrediction => "no_prediction",
});

/// Which way round the loop-sign/termination table is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum HypothesisTable {
    /// Positive loops make planning on the learned table avoid termination, so
    /// acting greedily wins when the optimal policy terminates, and planning
    /// wins when it does not. Negative loops mirror this.
    #[default]
    Reasoned,
    /// The transposed reading: positive loops with a terminating optimal
    /// policy favor planning on the learned table.
    Tabulated,
}

named_enum!(HypothesisTable {
    Reasoned => "reasoned",
    Tabulated => "tabulated",
});

/// Predicted better-or-equal algorithm given the loop sign under the learned
/// table and the termination class of the true optimal policy.
pub fn hypothesis_prediction(
    sign: LoopSign,
    term: TerminationClass,
    table: HypothesisTable,
) -> HypothesisPrediction {
    use HypothesisPrediction::*;
    let reasoned = match (sign, term) {
        (LoopSign::Zero, _) => return NoPrediction,
        (LoopSign::Positive, TerminationClass::Terminates) => GreedyAdvantage,
        (LoopSign::Positive, TerminationClass::DoesNotTerminate) => GreedyQOnReward,
        (LoopSign::Negative, TerminationClass::Terminates) => GreedyQOnReward,
        (LoopSign::Negative, TerminationClass::DoesNotTerminate) => GreedyAdvantage,
    };
    match (table, reasoned) {
        (HypothesisTable::Reasoned, p) => p,
        (HypothesisTable::Tabulated, GreedyAdvantage) => GreedyQOnReward,
        (HypothesisTable::Tabulated, _) => GreedyAdvantage,
    }
}

/// Whether an outcome agrees with a prediction. Only meaningful when the two
/// returns differ; `NoPrediction` never conforms.
pub fn conforms(
    prediction: HypothesisPrediction,
    return_greedy_adv: f64,
    return_greedy_q: f64,
) -> bool {
    match prediction {
        HypothesisPrediction::GreedyAdvantage => return_greedy_adv >= return_greedy_q,
        HypothesisPrediction::GreedyQOnReward => return_greedy_q >= return_greedy_adv,
        HypothesisPrediction::NoPrediction => false,
    }
}

/// `max_a g(s, a)` for every non-terminal, non-absorbing state.
pub fn max_a_stats(g: &GTable, mdp: &Mdp) -> Result<Vec<f64>> {
    if g.n_states() != mdp.n_states() {
        return Err(Error::ShapeMismatch {
            expected: mdp.n_states() * N_ACTIONS,
            actual: g.values().len(),
        });
    }
    Ok((0..mdp.n_states())
        .filter(|&s| !mdp.is_terminal(s) && !mdp.is_absorbing(s))
        .map(|s| g.row_max(s))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Alternative {
    #[default]
    TwoSided,
    /// Differences tend to be negative.
    Less,
    /// Differences tend to be positive.
    Greater,
}

named_enum!(Alternative {
    TwoSided => "two_sided",
    Less => "less",
    Greater => "greater",
});

/// Exact enumeration is used up to this many nonzero differences.
pub const WILCOXON_EXACT_MAX: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WilcoxonResult {
    pub p_value: f64,
    /// Number of nonzero differences.
    pub n: usize,
    /// Sum of ranks of the positive differences.
    pub w_plus: f64,
    pub exact: bool,
}

struct Ranked {
    // ranks doubled so tied averages stay integral
    doubled_ranks: Vec<u64>,
    positive: Vec<bool>,
    tie_sizes: Vec<usize>,
}

fn rank(diffs: &[f64]) -> Ranked {
    let mut nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    nz.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let n = nz.len();
    let mut doubled_ranks = vec![0u64; n];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && nz[j + 1].abs() == nz[i].abs() {
            j += 1;
        }
        // ranks i+1..=j+1 averaged, doubled
        let doubled = (i + 1 + j + 1) as u64;
        for r in &mut doubled_ranks[i..=j] {
            *r = doubled;
        }
        tie_sizes.push(j - i + 1);
        i = j + 1;
    }
    Ranked {
        doubled_ranks,
        positive: nz.iter().map(|&d| d > 0.0).collect(),
        tie_sizes,
    }
}

fn tail_p(lower: f64, upper: f64, alternative: Alternative) -> f64 {
    let p = match alternative {
        Alternative::TwoSided => 2.0 * lower.min(upper),
        Alternative::Less => lower,
        Alternative::Greater => upper,
    };
    p.min(1.0)
}

/// Wilcoxon signed-rank test by exact enumeration of sign assignments.
pub fn wilcoxon_exact(diffs: &[f64], alternative: Alternative) -> WilcoxonResult {
    let r = rank(diffs);
    let n = r.doubled_ranks.len();
    let w2: u64 = r
        .doubled_ranks
        .iter()
        .zip(&r.positive)
        .filter(|(_, &p)| p)
        .map(|(&x, _)| x)
        .sum();
    if n == 0 {
        return WilcoxonResult {
            p_value: 1.0,
            n,
            w_plus: 0.0,
            exact: true,
        };
    }
    let total: u64 = r.doubled_ranks.iter().sum();
    // counts[k] = number of sign assignments with doubled positive-rank sum k
    let mut counts = vec![0f64; total as usize + 1];
    counts[0] = 1.0;
    for &x in &r.doubled_ranks {
        for k in (x as usize..=total as usize).rev() {
            counts[k] += counts[k - x as usize];
        }
    }
    let all = 2f64.powi(n as i32);
    let lower: f64 = counts[..=w2 as usize].iter().sum::<f64>() / all;
    let upper: f64 = counts[w2 as usize..].iter().sum::<f64>() / all;
    WilcoxonResult {
        p_value: tail_p(lower, upper, alternative),
        n,
        w_plus: w2 as f64 / 2.0,
        exact: true,
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Wilcoxon signed-rank test by the normal approximation with tie and
/// continuity corrections.
pub fn wilcoxon_normal(diffs: &[f64], alternative: Alternative) -> WilcoxonResult {
    let r = rank(diffs);
    let n = r.doubled_ranks.len();
    let w_plus: f64 = r
        .doubled_ranks
        .iter()
        .zip(&r.positive)
        .filter(|(_, &p)| p)
        .map(|(&x, _)| x as f64 / 2.0)
        .sum();
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let ties: f64 = r
        .tie_sizes
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum();
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    if n == 0 || var <= 0.0 {
        return WilcoxonResult {
            p_value: 1.0,
            n,
            w_plus,
            exact: false,
        };
    }
    let sd = var.sqrt();
    let lower = normal_cdf((w_plus - mean + 0.5) / sd);
    let upper = 1.0 - normal_cdf((w_plus - mean - 0.5) / sd);
    WilcoxonResult {
        p_value: tail_p(lower, upper, alternative),
        n,
        w_plus,
        exact: false,
    }
}

/// Paired Wilcoxon signed-rank test on differences. Zero differences are
/// dropped, ties share average ranks, and the exact null distribution is used
/// for up to [`WILCOXON_EXACT_MAX`] nonzero differences.
pub fn wilcoxon_signed_rank(diffs: &[f64], alternative: Alternative) -> WilcoxonResult {
    let n = diffs.iter().filter(|&&d| d != 0.0).count();
    if n <= WILCOXON_EXACT_MAX {
        wilcoxon_exact(diffs, alternative)
    } else {
        wilcoxon_normal(diffs, alternative)
    }
}

/// Mean of `1 - value` over a learning curve, values floored at -1.
pub fn area_above_curve(curve: &[f64]) -> Result<f64> {
    if curve.is_empty() {
        return Err(Error::Empty("learning curve"));
    }
    Ok(curve.iter().map(|&v| 1.0 - v.max(-1.0)).sum::<f64>() / curve.len() as f64)
}
