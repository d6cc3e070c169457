//! Fitting a per-(state, action) statistic to preferences by minimizing
//! cross-entropy under the logistic summed-statistic model, with Adam.
//!
//! Each sample only depends on the statistic through the count difference
//! `c(s, a) = #(s, a) in seg1 - #(s, a) in seg2`, so a dataset is compiled once
//! into sparse count vectors. The compiled samples are kept in a canonical
//! order, which makes loss and gradient independent of sample order: any
//! permutation of a dataset gives bit-identical results.

use std::io::{Read, Write};

use crate::dp::{read_table_csv, row_max, write_table_csv};
use crate::error::{Error, Result};
use crate::gridworld::{Mdp, N_ACTIONS};
use crate::preferences::{log_logistic, logistic, Label, PreferenceDataset, PreferenceSample};

/// A learned real value per (state, action).
#[derive(Clone, Debug, PartialEq)]
pub struct GTable {
    values: Vec<f64>,
}

impl GTable {
    pub fn zeros(n_states: usize) -> GTable {
        GTable {
            values: vec![0.0; n_states * N_ACTIONS],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Result<GTable> {
        if values.is_empty() || values.len() % N_ACTIONS != 0 {
            return Err(Error::ShapeMismatch {
                expected: (values.len() / N_ACTIONS).max(1) * N_ACTIONS,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(
                "statistic table has non-finite entries".into(),
            ));
        }
        Ok(GTable { values })
    }

    pub fn n_states(&self) -> usize {
        self.values.len() / N_ACTIONS
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * N_ACTIONS + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * N_ACTIONS..(s + 1) * N_ACTIONS]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// The table with `c` added to every entry.
    pub fn offset(&self, c: f64) -> GTable {
        GTable {
            values: self.values.iter().map(|v| v + c).collect(),
        }
    }

    /// The first `n_states` rows.
    ///
    /// A table learned on an MDP with the absorbing state restricts to the
    /// same layout without it, since the absorbing state is the last index.
    pub fn truncated(&self, n_states: usize) -> GTable {
        GTable {
            values: self.values[..n_states * N_ACTIONS].to_vec(),
        }
    }

    /// Restriction to `mdp`'s states, for tables learned on the absorbing
    /// compilation of the same layout.
    pub fn for_mdp(&self, mdp: &Mdp) -> Result<GTable> {
        if self.n_states() < mdp.n_states() || self.n_states() > mdp.n_cells() + 1 {
            return Err(Error::ShapeMismatch {
                expected: mdp.n_states() * N_ACTIONS,
                actual: self.values.len(),
            });
        }
        Ok(self.truncated(mdp.n_states()))
    }

    pub fn row_max(&self, s: usize) -> f64 {
        row_max(self.row(s))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_table_csv(out, &self.values)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<GTable> {
        GTable::from_values(read_table_csv(input)?)
    }
}

/// A sample reduced to its sparse count difference.
#[derive(Clone, Debug, PartialEq)]
struct CompiledSample {
    /// `(table index, count in seg1 - count in seg2)`, sorted, nonzero counts.
    counts: Vec<(usize, f64)>,
    mu1: f64,
    mu2: f64,
}

/// A dataset compiled for repeated loss and gradient evaluation.
#[derive(Clone, Debug)]
pub struct CompiledDataset {
    samples: Vec<CompiledSample>,
    n_entries: usize,
}

impl CompiledDataset {
    pub fn new(samples: &[PreferenceSample], n_states: usize) -> Result<CompiledDataset> {
        Self::with_fixed_states(samples, n_states, &[])
    }

    /// Compiles with the rows of `fixed` held at zero: their counts are
    /// dropped, so they never receive a gradient and never move from a zero
    /// initialization.
    pub fn with_fixed_states(
        samples: &[PreferenceSample],
        n_states: usize,
        fixed: &[usize],
    ) -> Result<CompiledDataset> {
        if samples.is_empty() {
            return Err(Error::Empty("preference dataset"));
        }
        let n_entries = n_states * N_ACTIONS;
        let mut compiled = Vec::with_capacity(samples.len());
        for sample in samples {
            let mut counts: Vec<(usize, f64)> = Vec::new();
            let mut add = |s: usize, a: usize, c: f64| -> Result<()> {
                if s >= n_states {
                    return Err(Error::InconsistentSegment(format!(
                        "state id {s} outside a table of {n_states} states"
                    )));
                }
                counts.push((s * N_ACTIONS + a, c));
                Ok(())
            };
            for (s, a) in sample.seg1.transitions() {
                add(s, a, 1.0)?;
            }
            for (s, a) in sample.seg2.transitions() {
                add(s, a, -1.0)?;
            }
            counts.sort_by_key(|&(i, _)| i);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(counts.len());
            for (i, c) in counts {
                match merged.last_mut() {
                    Some((j, total)) if *j == i => *total += c,
                    _ => merged.push((i, c)),
                }
            }
            merged.retain(|&(i, c)| c != 0.0 && !fixed.contains(&(i / N_ACTIONS)));
            let (mu1, mu2) = sample.label.mu();
            compiled.push(CompiledSample {
                counts: merged,
                mu1,
                mu2,
            });
        }
        compiled.sort_by_cached_key(|s| {
            let counts: Vec<(usize, i64)> = s.counts.iter().map(|&(i, c)| (i, c as i64)).collect();
            (counts, (2.0 * s.mu1) as i64)
        });
        Ok(CompiledDataset {
            samples: compiled,
            n_entries,
        })
    }

    pub fn from_dataset(ds: &PreferenceDataset, n_states: usize) -> Result<CompiledDataset> {
        Self::new(&ds.samples, n_states)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn check(&self, g: &GTable) -> Result<()> {
        if g.values.len() != self.n_entries {
            return Err(Error::ShapeMismatch {
                expected: self.n_entries,
                actual: g.values.len(),
            });
        }
        Ok(())
    }

    /// Summed cross-entropy of the labels under the model with statistic `g`.
    pub fn loss(&self, g: &GTable) -> Result<f64> {
        self.check(g)?;
        Ok(self.samples.iter().map(|s| sample_loss(s, &g.values)).sum())
    }

    /// Loss and its gradient with respect to every table entry.
    pub fn loss_and_gradient(&self, g: &GTable) -> Result<(f64, Vec<f64>)> {
        self.check(g)?;
        let mut grad = vec![0.0; self.n_entries];
        let mut loss = 0.0;
        for s in &self.samples {
            let d = statistic_difference(s, &g.values);
            loss += s.mu1 * -log_logistic(d) + s.mu2 * -log_logistic(-d);
            // d(loss)/d(d) = p - mu1 when mu1 + mu2 = 1
            let slope = logistic(d) - s.mu1;
            for &(i, c) in &s.counts {
                grad[i] += slope * c;
            }
        }
        Ok((loss, grad))
    }
}

fn statistic_difference(s: &CompiledSample, g: &[f64]) -> f64 {
    s.counts.iter().map(|&(i, c)| c * g[i]).sum()
}

fn sample_loss(s: &CompiledSample, g: &[f64]) -> f64 {
    let d = statistic_difference(s, g);
    s.mu1 * -log_logistic(d) + s.mu2 * -log_logistic(-d)
}

/// Cross-entropy of `ds` under the logistic model with statistic `g`.
pub fn dataset_loss(g: &GTable, ds: &PreferenceDataset) -> Result<f64> {
    CompiledDataset::from_dataset(ds, g.n_states())?.loss(g)
}

/// Analytic gradient of [`dataset_loss`].
pub fn loss_gradient(g: &GTable, ds: &PreferenceDataset) -> Result<Vec<f64>> {
    Ok(CompiledDataset::from_dataset(ds, g.n_states())?
        .loss_and_gradient(g)?
        .1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(n_entries: usize, config: AdamConfig) -> AdamState {
        AdamState {
            first_moment: vec![0.0; n_entries],
            second_moment: vec![0.0; n_entries],
            step_count: 0,
            config,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            *m = beta1 * *m + (1.0 - beta1) * grad[i];
            *v = beta2 * *v + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Functional form of [`AdamState::update`].
pub fn adam_step(g: &GTable, grad: &[f64], state: &AdamState) -> Result<(GTable, AdamState)> {
    if grad.len() != g.values.len() || state.first_moment.len() != g.values.len() {
        return Err(Error::ShapeMismatch {
            expected: g.values.len(),
            actual: grad.len(),
        });
    }
    let mut next = g.clone();
    let mut state = state.clone();
    state.update(&mut next.values, grad);
    Ok((next, state))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Loss of the table at the start of each epoch.
    pub loss_per_epoch: Vec<f64>,
    pub final_g: GTable,
    pub config: TrainConfig,
}

impl TrainReport {
    pub fn write_loss_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "loss"])?;
        for (e, l) in self.loss_per_epoch.iter().enumerate() {
            w.write_record([e.to_string(), l.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<loss trace>", e))?;
        Ok(())
    }

    pub fn config_text(&self) -> String {
        let c = &self.config;
        format!(
            "epochs={}\nlr={}\nbeta1={}\nbeta2={}\neps={}\ninit=zeros\n",
            c.epochs, c.adam.lr, c.adam.beta1, c.adam.beta2, c.adam.eps
        )
    }
}

/// States whose rows hold a known zero reward: the terminal cells and the
/// absorbing state when the absorbing state is enabled. Without it, terminal
/// cells never start a transition, so nothing needs fixing.
pub fn post_terminal_states(mdp: &Mdp) -> Vec<usize> {
    if !mdp.absorbing_enabled() {
        return Vec::new();
    }
    (0..mdp.n_states())
        .filter(|&s| mdp.is_terminal(s) || mdp.is_absorbing(s))
        .collect()
}

/// Full-batch training from a zero table over `mdp`'s states, with
/// post-terminal rows held at zero.
///
/// The dataset is expected to be reverse-augmented already.
pub fn train(mdp: &Mdp, ds: &PreferenceDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let compiled = CompiledDataset::with_fixed_states(
        &ds.samples,
        mdp.n_states(),
        &post_terminal_states(mdp),
    )?;
    train_compiled(mdp.n_states(), &compiled, cfg)
}

pub fn train_compiled(
    n_states: usize,
    data: &CompiledDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let mut g = GTable::zeros(n_states);
    let mut adam = AdamState::new(g.values.len(), cfg.adam);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (loss, grad) = data.loss_and_gradient(&g)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        trace.push(loss);
        adam.update(&mut g.values, &grad);
    }
    if g.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss { epoch: cfg.epochs });
    }
    Ok(TrainReport {
        loss_per_epoch: trace,
        final_g: g,
        config: *cfg,
    })
}

/// Labels of a dataset, for diagnostics.
pub fn label_counts(ds: &PreferenceDataset) -> [usize; 3] {
    let mut counts = [0; 3];
    for s in &ds.samples {
        counts[match s.label {
            Label::First => 0,
            Label::Second => 1,
            Label::Tie => 2,
        }] += 1;
    }
    counts
}
