//! Exact tabular dynamic programming: optimal values and advantages, policy
//! evaluation, and normalized-return scoring.

use std::io::Write;

use crate::error::{Error, Result};
use crate::gridworld::{Mdp, N_ACTIONS};

/// Which reward a [`ValueBundle`] was solved for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardSource {
    GroundTruth,
    LearnedG,
    ShiftedG,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    /// Sup-norm Bellman residual at which iteration stops.
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-10,
            max_iterations: 1_000_000,
        }
    }
}

/// Optimal state values, action values and advantages for one reward.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueBundle {
    pub v_star: Vec<f64>,
    pub q_star: Vec<f64>,
    pub a_star: Vec<f64>,
    pub gamma: f64,
    pub reward_source: RewardSource,
}

impl ValueBundle {
    pub fn n_states(&self) -> usize {
        self.v_star.len()
    }

    pub fn v(&self, s: usize) -> f64 {
        self.v_star[s]
    }

    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q_star[s * N_ACTIONS + a]
    }

    pub fn a(&self, s: usize, a: usize) -> f64 {
        self.a_star[s * N_ACTIONS + a]
    }

    pub fn q_row(&self, s: usize) -> &[f64] {
        &self.q_star[s * N_ACTIONS..(s + 1) * N_ACTIONS]
    }

    pub fn with_source(mut self, source: RewardSource) -> Self {
        self.reward_source = source;
        self
    }
}

/// A deterministic or stochastic stationary policy.
#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    Deterministic(Vec<usize>),
    Stochastic(Vec<[f64; N_ACTIONS]>),
}

impl Policy {
    pub fn uniform(n_states: usize) -> Policy {
        Policy::Stochastic(vec![[1.0 / N_ACTIONS as f64; N_ACTIONS]; n_states])
    }

    pub fn n_states(&self) -> usize {
        match self {
            Policy::Deterministic(a) => a.len(),
            Policy::Stochastic(p) => p.len(),
        }
    }

    pub fn probs(&self, s: usize) -> [f64; N_ACTIONS] {
        match self {
            Policy::Deterministic(actions) => {
                let mut row = [0.0; N_ACTIONS];
                row[actions[s]] = 1.0;
                row
            }
            Policy::Stochastic(rows) => rows[s],
        }
    }

    pub fn action(&self, s: usize) -> Option<usize> {
        match self {
            Policy::Deterministic(actions) => Some(actions[s]),
            Policy::Stochastic(_) => None,
        }
    }

    pub fn actions(&self) -> Option<&[usize]> {
        match self {
            Policy::Deterministic(actions) => Some(actions),
            Policy::Stochastic(_) => None,
        }
    }
}

/// Index of the first maximal entry.
///
/// Every argmax in the crate goes through here so that ties resolve to the
/// lowest action index everywhere.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn row_max(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub(crate) fn check_table(mdp: &Mdp, table: &[f64]) -> Result<()> {
    let expected = mdp.n_states() * N_ACTIONS;
    if table.len() != expected {
        return Err(Error::ShapeMismatch {
            expected,
            actual: table.len(),
        });
    }
    Ok(())
}

fn effective_tol(tol: f64, values: &[f64]) -> f64 {
    // Large value magnitudes cannot resolve residuals below a few ulps.
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    tol.max(8.0 * f64::EPSILON * scale)
}

/// Solves for the optimal values of `reward` on `mdp` by value iteration.
///
/// Pinned states (terminal cells, or the absorbing state when enabled) have
/// value 0 and all-zero Q and advantage rows. For every other state V* is the
/// row maximum of the final Q*, so each advantage row has maximum exactly 0.
pub fn value_iteration(
    mdp: &Mdp,
    reward: &[f64],
    gamma: f64,
    cfg: &SolverConfig,
) -> Result<ValueBundle> {
    check_table(mdp, reward)?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!("gamma {gamma} outside (0, 1]")));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::Config(format!(
            "tolerance {} must be positive",
            cfg.tol
        )));
    }
    let n = mdp.n_states();
    let mut v = vec![0.0; n];
    let mut next_v = vec![0.0; n];
    let mut residual = f64::INFINITY;
    let mut converged = false;

    for _ in 0..cfg.max_iterations {
        residual = 0.0;
        for s in 0..n {
            let value = if mdp.value_pinned(s) {
                0.0
            } else {
                (0..N_ACTIONS)
                    .map(|a| reward[s * N_ACTIONS + a] + gamma * v[mdp.next(s, a)])
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            residual = residual.max((value - v[s]).abs());
            next_v[s] = value;
        }
        std::mem::swap(&mut v, &mut next_v);
        if residual.is_nan() {
            break;
        }
        if residual <= effective_tol(cfg.tol, &v) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            iterations: cfg.max_iterations,
            residual,
        });
    }

    let mut q_star = vec![0.0; n * N_ACTIONS];
    let mut a_star = vec![0.0; n * N_ACTIONS];
    let mut v_star = vec![0.0; n];
    for s in 0..n {
        if mdp.value_pinned(s) {
            continue;
        }
        let row = &mut q_star[s * N_ACTIONS..(s + 1) * N_ACTIONS];
        for (a, q) in row.iter_mut().enumerate() {
            *q = reward[s * N_ACTIONS + a] + gamma * v[mdp.next(s, a)];
        }
        let best = row_max(row);
        v_star[s] = best;
        for a in 0..N_ACTIONS {
            a_star[s * N_ACTIONS + a] = q_star[s * N_ACTIONS + a] - best;
        }
    }
    Ok(ValueBundle {
        v_star,
        q_star,
        a_star,
        gamma,
        reward_source: RewardSource::GroundTruth,
    })
}

/// Lowest-index argmax of each Q* row.
pub fn greedy_policy(bundle: &ValueBundle) -> Policy {
    Policy::Deterministic(
        (0..bundle.n_states())
            .map(|s| argmax(bundle.q_row(s)))
            .collect(),
    )
}

/// Iterative evaluation of an arbitrary (possibly stochastic) policy.
pub fn policy_evaluation(
    mdp: &Mdp,
    policy: &Policy,
    reward: &[f64],
    gamma: f64,
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    check_table(mdp, reward)?;
    if policy.n_states() != mdp.n_states() {
        return Err(Error::ShapeMismatch {
            expected: mdp.n_states(),
            actual: policy.n_states(),
        });
    }
    let n = mdp.n_states();
    let mut v = vec![0.0; n];
    let mut next_v = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..cfg.max_iterations {
        residual = 0.0;
        for s in 0..n {
            let value = if mdp.value_pinned(s) {
                0.0
            } else {
                let probs = policy.probs(s);
                (0..N_ACTIONS)
                    .filter(|&a| probs[a] > 0.0)
                    .map(|a| probs[a] * (reward[s * N_ACTIONS + a] + gamma * v[mdp.next(s, a)]))
                    .sum()
            };
            residual = residual.max((value - v[s]).abs());
            next_v[s] = value;
        }
        std::mem::swap(&mut v, &mut next_v);
        if residual <= effective_tol(cfg.tol, &v) {
            return Ok(v);
        }
        if residual.is_nan() {
            break;
        }
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_iterations,
        residual,
    })
}

/// Exact values of a deterministic policy on a deterministic MDP.
///
/// Each state's trajectory either reaches a pinned state or closes a cycle;
/// cycles are summed as a geometric series, so no iteration is involved. With
/// `gamma == 1` a cycle of positive (negative) return has value +inf (-inf).
pub fn evaluate_deterministic(
    mdp: &Mdp,
    actions: &[usize],
    reward: &[f64],
    gamma: f64,
) -> Vec<f64> {
    const UNSEEN: u8 = 0;
    const ON_PATH: u8 = 1;
    const DONE: u8 = 2;

    let n = mdp.n_states();
    let mut value = vec![0.0; n];
    let mut state = vec![UNSEEN; n];
    let mut path = Vec::new();

    for root in 0..n {
        if state[root] != UNSEEN {
            continue;
        }
        path.clear();
        let mut s = root;
        // Walk until a state with known value or a repeat.
        let tail_value = loop {
            if state[s] == DONE {
                break value[s];
            }
            if mdp.value_pinned(s) {
                state[s] = DONE;
                value[s] = 0.0;
                break 0.0;
            }
            if state[s] == ON_PATH {
                // Close the cycle that starts at `s`.
                let start = path.iter().position(|&p| p == s).expect("state on path");
                let cycle = &path[start..];
                let (mut ret, mut disc) = (0.0, 1.0);
                for &c in cycle {
                    ret += disc * reward[c * N_ACTIONS + actions[c]];
                    disc *= gamma;
                }
                let denom = 1.0 - disc;
                let entry = if denom > 0.0 {
                    ret / denom
                } else if ret > 0.0 {
                    f64::INFINITY
                } else if ret < 0.0 {
                    f64::NEG_INFINITY
                } else {
                    0.0
                };
                // Values around the cycle, backwards from the state entering `s`.
                let mut after = entry;
                for &c in cycle.iter().skip(1).rev() {
                    after = reward[c * N_ACTIONS + actions[c]] + gamma * after;
                    value[c] = after;
                    state[c] = DONE;
                }
                value[s] = entry;
                state[s] = DONE;
                path.truncate(start);
                break entry;
            }
            state[s] = ON_PATH;
            path.push(s);
            s = mdp.next(s, actions[s]);
        };
        let mut after = tail_value;
        for &p in path.iter().rev() {
            after = reward[p * N_ACTIONS + actions[p]] + gamma * after;
            value[p] = after;
            state[p] = DONE;
        }
    }
    value
}

/// A policy's return rescaled so the uniform policy scores 0 and an optimal
/// policy scores 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizedReturn {
    pub value: f64,
    /// Set when optimal and uniform returns coincide; `value` is then 0.
    pub degenerate: bool,
}

/// Below this spread between optimal and uniform returns normalization is undefined.
pub const DEGENERATE_SPREAD: f64 = 1e-9;

/// Mean optimal and uniform-policy returns of a task under its ground-truth
/// reward, from the uniform start distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnBaseline {
    pub mean_optimal: f64,
    pub mean_uniform: f64,
    pub gamma: f64,
    pub optimal: ValueBundle,
}

impl ReturnBaseline {
    pub fn new(mdp: &Mdp, cfg: &SolverConfig) -> Result<Self> {
        let gamma = mdp.gamma();
        let optimal = value_iteration(mdp, mdp.reward_table(), gamma, cfg)?;
        let uniform = policy_evaluation(
            mdp,
            &Policy::uniform(mdp.n_states()),
            mdp.reward_table(),
            gamma,
            cfg,
        )?;
        Ok(ReturnBaseline {
            mean_optimal: start_mean(mdp, &optimal.v_star),
            mean_uniform: start_mean(mdp, &uniform),
            gamma,
            optimal,
        })
    }

    pub fn normalize(&self, mean_return: f64) -> NormalizedReturn {
        let spread = self.mean_optimal - self.mean_uniform;
        if spread.abs() < DEGENERATE_SPREAD {
            return NormalizedReturn {
                value: 0.0,
                degenerate: true,
            };
        }
        NormalizedReturn {
            value: (mean_return - self.mean_uniform) / spread,
            degenerate: false,
        }
    }

    /// Normalized return of `policy` under the ground-truth reward.
    pub fn score(&self, mdp: &Mdp, policy: &Policy) -> Result<NormalizedReturn> {
        let values = match policy {
            Policy::Deterministic(actions) => {
                if actions.len() != mdp.n_states() {
                    return Err(Error::ShapeMismatch {
                        expected: mdp.n_states(),
                        actual: actions.len(),
                    });
                }
                evaluate_deterministic(mdp, actions, mdp.reward_table(), self.gamma)
            }
            Policy::Stochastic(_) => policy_evaluation(
                mdp,
                policy,
                mdp.reward_table(),
                self.gamma,
                &SolverConfig::default(),
            )?,
        };
        Ok(self.normalize(start_mean(mdp, &values)))
    }
}

/// Normalized return of `policy` on `mdp` (ground-truth reward, the MDP's gamma).
pub fn normalized_return(mdp: &Mdp, policy: &Policy) -> Result<NormalizedReturn> {
    ReturnBaseline::new(mdp, &SolverConfig::default())?.score(mdp, policy)
}

/// Mean of `values` over the start distribution.
pub fn start_mean(mdp: &Mdp, values: &[f64]) -> f64 {
    let starts = mdp.start_states();
    starts.iter().map(|&s| values[s]).sum::<f64>() / starts.len() as f64
}

/// Normalized returns are floored at -1 before averaging.
pub fn floored(value: f64) -> f64 {
    value.max(-1.0)
}

pub fn floored_mean(values: &[f64]) -> f64 {
    values.iter().map(|&v| floored(v)).sum::<f64>() / values.len() as f64
}

/// Writes a (state, action) table as CSV with header `state,action,value`.
pub fn write_table_csv<W: Write>(out: W, table: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["state", "action", "value"])?;
    for (i, v) in table.iter().enumerate() {
        w.write_record([
            (i / N_ACTIONS).to_string(),
            (i % N_ACTIONS).to_string(),
            v.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<table>", e))?;
    Ok(())
}

/// Reads a table written by [`write_table_csv`].
pub fn read_table_csv<R: std::io::Read>(input: R) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_reader(input);
    let mut entries: Vec<(usize, usize, f64)> = Vec::new();
    for (i, record) in r.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let field = |k: usize| {
            record
                .get(k)
                .ok_or_else(|| Error::parse(line, "expected state,action,value"))
        };
        let s: usize = field(0)?
            .parse()
            .map_err(|_| Error::parse(line, "bad state id"))?;
        let a: usize = field(1)?
            .parse()
            .ok()
            .filter(|&a| a < N_ACTIONS)
            .ok_or_else(|| Error::parse(line, "bad action id"))?;
        let v: f64 = field(2)?
            .parse()
            .map_err(|_| Error::parse(line, "bad value"))?;
        entries.push((s, a, v));
    }
    let n_states = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
    let mut table = vec![f64::NAN; n_states * N_ACTIONS];
    for (s, a, v) in entries {
        table[s * N_ACTIONS + a] = v;
    }
    if let Some(i) = table.iter().position(|v| v.is_nan()) {
        return Err(Error::parse(
            0,
            format!(
                "missing entry for state {} action {}",
                i / N_ACTIONS,
                i % N_ACTIONS
            ),
        ));
    }
    Ok(table)
}
