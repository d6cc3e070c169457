//! Seeded experiment runners.
//!
//! Every run is a pure function of the resolved [`ExperimentConfig`] and its
//! replicate seed. Runs are scheduled over a worker pool and collected in job
//! order, then sorted by provenance key, so output files do not depend on the
//! number of workers.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::analysis::{
    area_above_curve, classify_termination, conforms, hypothesis_prediction, loop_analysis,
    max_a_stats, wilcoxon_signed_rank, Alternative, HypothesisPrediction, HypothesisTable,
    TerminationClass,
};
use crate::dp::{floored_mean, value_iteration, ReturnBaseline, SolverConfig, ValueBundle};
use crate::error::{Error, Result};
use crate::gridworld::{
    generate_mdp_100, generate_mdp_90, GridSpec, Mdp, MdpClass90, DEFAULT_GAMMA,
};
use crate::learner::{train, AdamConfig, GTable, TrainConfig};
use crate::policies::{
    greedy_advantage_policy, policy_via_reward, q_learning, shifted_reward, QLearnConfig,
};
use crate::preferences::{
    augment_reverse, build_dataset, parse_key_values, LabelNoise, PreferenceModel,
};
use crate::seed;

/// Returns closer than this are treated as a tie when checking the hypothesis.
pub const CONFORMANCE_MARGIN: f64 = 0.1;

/// Attempts per MDP slot when drawing layouts under a filter.
pub const MAX_MDP_DRAWS: u64 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Experiment {
    AbsorbingCompare,
    LoopHypothesis,
    Shaping,
    ShiftCheck,
}

named_enum!(Experiment {
    AbsorbingCompare => "absorbing_compare",
    LoopHypothesis => "loop_hypothesis",
    Shaping => "shaping",
    ShiftCheck => "shift_check",
});

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MdpFamily {
    /// The general random family.
    Random,
    /// The small three-class family.
    Small,
}

named_enum!(MdpFamily {
    Random => "100",
    Small => "90",
});

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MdpFilter {
    Any,
    /// Keep layouts whose optimal policy reaches a terminal cell from every start.
    MustTerminate,
}

named_enum!(MdpFilter {
    Any => "any",
    MustTerminate => "must_terminate",
});

/// A generated layout with its stable id.
#[derive(Clone, Debug, PartialEq)]
pub struct MdpDraw {
    pub index: usize,
    pub id: String,
    pub class: Option<MdpClass90>,
    pub spec: GridSpec,
}

fn terminates(spec: &GridSpec, gamma: f64, solver: &SolverConfig) -> Result<bool> {
    let mdp = spec.compile(false, gamma)?;
    let bundle = value_iteration(&mdp, mdp.reward_table(), gamma, solver)?;
    Ok(classify_termination(&mdp, &bundle) == TerminationClass::Terminates)
}

/// Draws `count` layouts. Slot `i` depends only on `(seed, i)`; small-family
/// classes cycle through `classes`.
pub fn generate_mdps(
    family: MdpFamily,
    classes: &[MdpClass90],
    filter: MdpFilter,
    count: usize,
    gamma: f64,
    seed: u64,
) -> Result<Vec<MdpDraw>> {
    if family == MdpFamily::Small && classes.is_empty() {
        return Err(Error::Config("no mdp classes given".into()));
    }
    let solver = SolverConfig::default();
    (0..count)
        .map(|i| {
            let class = (family == MdpFamily::Small).then(|| classes[i % classes.len()]);
            for attempt in 0..MAX_MDP_DRAWS {
                let mut rng = seed::stream(seed::derive(
                    seed,
                    &[seed::label(family.name()), i as u64, attempt],
                ));
                let spec = match class {
                    Some(c) => generate_mdp_90(&mut rng, c),
                    None => generate_mdp_100(&mut rng),
                };
                if filter == MdpFilter::Any || terminates(&spec, gamma, &solver)? {
                    let id = match class {
                        Some(c) => format!("{}-{i:03}", c.name()),
                        None => format!("mdp-{i:03}"),
                    };
                    return Ok(MdpDraw {
                        index: i,
                        id,
                        class,
                        spec,
                    });
                }
            }
            Err(Error::Config(format!(
                "no layout passed the {} filter",
                filter.name()
            )))
        })
        .collect()
}

/// Resolved settings of one experiment. Keys of the flat config format match
/// the field names, with Adam and Q-learning settings flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub n_mdps: usize,
    pub mdp_family: MdpFamily,
    pub mdp_classes: Vec<MdpClass90>,
    pub mdp_filter: MdpFilter,
    pub pref_sizes: Vec<usize>,
    pub segment_lengths: Vec<usize>,
    pub noise_modes: Vec<LabelNoise>,
    pub absorbing_modes: Vec<bool>,
    pub seeds: Vec<u64>,
    pub gamma: f64,
    pub train: TrainConfig,
    pub qlearn: QLearnConfig,
    pub solver: SolverConfig,
    pub hypothesis_table: HypothesisTable,
    pub workers: usize,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Desk-scale defaults for `experiment`.
    pub fn desk(experiment: Experiment) -> ExperimentConfig {
        let base = ExperimentConfig {
            experiment,
            n_mdps: 10,
            mdp_family: MdpFamily::Random,
            mdp_classes: MdpClass90::ALL.to_vec(),
            mdp_filter: MdpFilter::MustTerminate,
            pref_sizes: vec![300, 3000],
            segment_lengths: vec![3],
            noise_modes: vec![LabelNoise::Noiseless, LabelNoise::Stochastic],
            absorbing_modes: vec![false, true],
            seeds: vec![0],
            gamma: DEFAULT_GAMMA,
            train: TrainConfig::default(),
            qlearn: QLearnConfig::default(),
            solver: SolverConfig::default(),
            hypothesis_table: HypothesisTable::default(),
            workers: 1,
            output_dir: None,
        };
        match experiment {
            Experiment::AbsorbingCompare => base,
            Experiment::LoopHypothesis => ExperimentConfig {
                n_mdps: 18,
                mdp_family: MdpFamily::Small,
                mdp_filter: MdpFilter::Any,
                pref_sizes: vec![10, 100],
                segment_lengths: vec![1, 2],
                absorbing_modes: vec![false],
                ..base
            },
            Experiment::Shaping => ExperimentConfig {
                n_mdps: 20,
                pref_sizes: vec![5000],
                noise_modes: vec![LabelNoise::Noiseless],
                absorbing_modes: vec![true],
                train: TrainConfig {
                    epochs: 3000,
                    ..TrainConfig::default()
                },
                ..base
            },
            Experiment::ShiftCheck => ExperimentConfig {
                n_mdps: 20,
                pref_sizes: vec![300],
                noise_modes: vec![LabelNoise::Noiseless],
                absorbing_modes: vec![true],
                ..base
            },
        }
    }

    /// Parses the flat `key=value` format. `experiment` is required and
    /// selects the defaults that the remaining keys override.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let map = parse_key_values(text)?;
        let (_, exp) = map
            .get("experiment")
            .ok_or_else(|| Error::Config("missing key \"experiment\"".into()))?;
        let mut cfg = ExperimentConfig::desk(exp.parse()?);
        for (key, (line, value)) in &map {
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::parse(*line, m),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::parse(&text)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key:?}")))
        }
        fn list<T>(key: &str, v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
            let items = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(f)
                .collect::<Result<Vec<T>>>()?;
            if items.is_empty() {
                return Err(Error::Config(format!("{key:?} must not be empty")));
            }
            Ok(items)
        }
        match key {
            "experiment" => self.experiment = value.parse()?,
            "n_mdps" => self.n_mdps = num(key, value)?,
            "mdp_family" => self.mdp_family = value.parse()?,
            "mdp_classes" => self.mdp_classes = list(key, value, str::parse)?,
            "mdp_filter" => self.mdp_filter = value.parse()?,
            "pref_sizes" => self.pref_sizes = list(key, value, |v| num(key, v))?,
            "segment_lengths" => self.segment_lengths = list(key, value, |v| num(key, v))?,
            "noise_modes" => self.noise_modes = list(key, value, str::parse)?,
            "absorbing_modes" => self.absorbing_modes = list(key, value, |v| num(key, v))?,
            "seeds" => self.seeds = list(key, value, |v| num(key, v))?,
            "gamma" => self.gamma = num(key, value)?,
            "epochs" => self.train.epochs = num(key, value)?,
            "lr" => self.train.adam.lr = num(key, value)?,
            "beta1" => self.train.adam.beta1 = num(key, value)?,
            "beta2" => self.train.adam.beta2 = num(key, value)?,
            "eps" => self.train.adam.eps = num(key, value)?,
            "q_lr" => self.qlearn.lr = num(key, value)?,
            "q_episodes" => self.qlearn.episodes = num(key, value)?,
            "q_max_steps" => self.qlearn.max_steps = num(key, value)?,
            "q_epsilon" => self.qlearn.epsilon = num(key, value)?,
            "q_epsilon_decay" => self.qlearn.epsilon_decay = num(key, value)?,
            "q_init" => self.qlearn.q_init = num(key, value)?,
            "q_gamma" => self.qlearn.gamma = num(key, value)?,
            "solver_tol" => self.solver.tol = num(key, value)?,
            "solver_max_iterations" => self.solver.max_iterations = num(key, value)?,
            "hypothesis_table" => self.hypothesis_table = value.parse()?,
            "workers" => self.workers = num(key, value)?,
            "output_dir" => self.output_dir = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_mdps == 0 {
            return fail("n_mdps must be at least 1");
        }
        if self.pref_sizes.is_empty() || self.pref_sizes.contains(&0) {
            return fail("pref_sizes must be nonempty and positive");
        }
        if self.segment_lengths.is_empty() || self.segment_lengths.contains(&0) {
            return fail("segment_lengths must be nonempty and positive");
        }
        if self.noise_modes.is_empty() || self.absorbing_modes.is_empty() || self.seeds.is_empty() {
            return fail("noise_modes, absorbing_modes and seeds must be nonempty");
        }
        if self.mdp_classes.is_empty() {
            return fail("mdp_classes must be nonempty");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail("gamma must lie in (0, 1]");
        }
        if self.train.epochs == 0 || !(self.train.adam.lr > 0.0) {
            return fail("epochs and lr must be positive");
        }
        if self.workers == 0 {
            return fail("workers must be at least 1");
        }
        self.qlearn.validate()
    }

    /// Every key in a fixed order; parsing the result reproduces the config.
    pub fn to_text(&self) -> String {
        fn join<T: ToString>(xs: &[T]) -> String {
            xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
        }
        let mut lines = vec![
            format!("experiment={}", self.experiment),
            format!("n_mdps={}", self.n_mdps),
            format!("mdp_family={}", self.mdp_family),
            format!(
                "mdp_classes={}",
                join(
                    &self
                        .mdp_classes
                        .iter()
                        .map(|c| c.name())
                        .collect::<Vec<_>>()
                )
            ),
            format!("mdp_filter={}", self.mdp_filter),
            format!("pref_sizes={}", join(&self.pref_sizes)),
            format!("segment_lengths={}", join(&self.segment_lengths)),
            format!("noise_modes={}", join(&self.noise_modes)),
            format!("absorbing_modes={}", join(&self.absorbing_modes)),
            format!("seeds={}", join(&self.seeds)),
            format!("gamma={}", self.gamma),
            format!("epochs={}", self.train.epochs),
            format!("lr={}", self.train.adam.lr),
            format!("beta1={}", self.train.adam.beta1),
            format!("beta2={}", self.train.adam.beta2),
            format!("eps={}", self.train.adam.eps),
            format!("q_lr={}", self.qlearn.lr),
            format!("q_episodes={}", self.qlearn.episodes),
            format!("q_max_steps={}", self.qlearn.max_steps),
            format!("q_epsilon={}", self.qlearn.epsilon),
            format!("q_epsilon_decay={}", self.qlearn.epsilon_decay),
            format!("q_init={}", self.qlearn.q_init),
            format!("q_gamma={}", self.qlearn.gamma),
            format!("solver_tol={}", self.solver.tol),
            format!("solver_max_iterations={}", self.solver.max_iterations),
            format!("hypothesis_table={}", self.hypothesis_table),
        ];
        if let Some(dir) = &self.output_dir {
            lines.push(format!("output_dir={}", dir.display()));
        }
        lines.join("\n") + "\n"
    }

    fn adam(&self) -> AdamConfig {
        self.train.adam
    }
}

/// A CSV file held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub name: String,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    fn new(name: &str, header: &[&'static str]) -> CsvTable {
        CsvTable {
            name: name.to_string(),
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.into_inner()
            .map_err(|e| Error::io(&self.name, e.into_error()))
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(&self.name);
        fs::write(&path, self.to_bytes()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// A paired significance test across MDPs.
#[derive(Clone, Debug, PartialEq)]
pub struct StatRow {
    pub condition: String,
    pub test: String,
    pub p_value: f64,
    pub n: usize,
}

/// An aggregate over runs.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub condition: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

fn stat(condition: String, test: &str, diffs: &[f64], alt: Alternative) -> StatRow {
    let w = wilcoxon_signed_rank(diffs, alt);
    StatRow {
        condition,
        test: format!("wilcoxon_{test}_{}", alt.name()),
        p_value: w.p_value,
        n: w.n,
    }
}

fn summary(condition: String, metric: &str, value: f64, n: usize) -> SummaryRow {
    SummaryRow {
        condition,
        metric: metric.to_string(),
        value,
        n,
    }
}

fn stats_table(stats: &[StatRow]) -> CsvTable {
    let mut t = CsvTable::new("stats.csv", &["condition", "test", "p_value", "n"]);
    for s in stats {
        t.push(vec![
            s.condition.clone(),
            s.test.clone(),
            s.p_value.to_string(),
            s.n.to_string(),
        ]);
    }
    t
}

fn summary_table(rows: &[SummaryRow]) -> CsvTable {
    let mut t = CsvTable::new("summary.csv", &["condition", "metric", "value", "n"]);
    for s in rows {
        t.push(vec![
            s.condition.clone(),
            s.metric.clone(),
            s.value.to_string(),
            s.n.to_string(),
        ]);
    }
    t
}

/// Per-MDP state shared by all runs on that layout.
struct Task {
    draw: MdpDraw,
    seed: u64,
    task: Mdp,
    baseline: ReturnBaseline,
    absorbing: Mdp,
    absorbing_bundle: ValueBundle,
}

impl Task {
    fn new(draw: MdpDraw, seed: u64, cfg: &ExperimentConfig) -> Result<Task> {
        let task = draw.spec.compile(false, cfg.gamma)?;
        let baseline = ReturnBaseline::new(&task, &cfg.solver)?;
        let absorbing = draw.spec.compile(true, cfg.gamma)?;
        let absorbing_bundle =
            value_iteration(&absorbing, absorbing.reward_table(), cfg.gamma, &cfg.solver)?;
        Ok(Task {
            draw,
            seed,
            task,
            baseline,
            absorbing,
            absorbing_bundle,
        })
    }

    fn bundle(&self) -> &ValueBundle {
        &self.baseline.optimal
    }

    fn data_mdp(&self, absorbing: bool) -> (&Mdp, &ValueBundle) {
        if absorbing {
            (&self.absorbing, &self.absorbing_bundle)
        } else {
            (&self.task, self.bundle())
        }
    }

    /// Learns from augmented regret preferences; the result is restricted to
    /// the task's states.
    fn learn(&self, cond: &Condition, cfg: &ExperimentConfig) -> Result<GTable> {
        let (mdp, bundle) = self.data_mdp(cond.absorbing);
        let ds = build_dataset(
            mdp,
            bundle,
            cond.n_prefs,
            cond.segment_length,
            PreferenceModel::Regret,
            cond.noise,
            cond.data_seed(self),
        )?;
        let report = train(
            mdp,
            &augment_reverse(&ds),
            &TrainConfig {
                epochs: cfg.train.epochs,
                adam: cfg.adam(),
            },
        )?;
        report.final_g.for_mdp(&self.task)
    }
}

/// One cell of the condition grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Condition {
    pub n_prefs: usize,
    pub segment_length: usize,
    pub noise: LabelNoise,
    pub absorbing: bool,
}

impl Condition {
    fn data_seed(&self, task: &Task) -> u64 {
        seed::derive(
            task.seed,
            &[
                seed::label("prefs"),
                task.draw.index as u64,
                self.n_prefs as u64,
                self.segment_length as u64,
                seed::label(self.noise.name()),
                u64::from(self.absorbing),
            ],
        )
    }
}

fn conditions(cfg: &ExperimentConfig) -> Vec<Condition> {
    let mut out = Vec::new();
    for &n_prefs in &cfg.pref_sizes {
        for &segment_length in &cfg.segment_lengths {
            for &noise in &cfg.noise_modes {
                for &absorbing in &cfg.absorbing_modes {
                    out.push(Condition {
                        n_prefs,
                        segment_length,
                        noise,
                        absorbing,
                    });
                }
            }
        }
    }
    out
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

fn build_tasks(cfg: &ExperimentConfig) -> Result<Vec<Task>> {
    let draws: Vec<(u64, MdpDraw)> = cfg
        .seeds
        .iter()
        .map(|&s| {
            generate_mdps(
                cfg.mdp_family,
                &cfg.mdp_classes,
                cfg.mdp_filter,
                cfg.n_mdps,
                cfg.gamma,
                s,
            )
            .map(|d| d.into_iter().map(move |m| (s, m)))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    draws
        .into_par_iter()
        .map(|(s, d)| Task::new(d, s, cfg))
        .collect()
}

/// Runs `job` on every (task, condition) pair in parallel, in job order.
fn grid_jobs<T: Send>(
    tasks: &[Task],
    conds: &[Condition],
    job: impl Fn(&Task, &Condition) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let pairs: Vec<(&Task, &Condition)> = tasks
        .iter()
        .flat_map(|t| conds.iter().map(move |c| (t, c)))
        .collect();
    pairs.into_par_iter().map(|(t, c)| job(t, c)).collect()
}

fn mean(xs: impl IntoIterator<Item = f64>) -> (f64, usize) {
    let v: Vec<f64> = xs.into_iter().collect();
    (v.iter().sum::<f64>() / v.len().max(1) as f64, v.len())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbsorbingRow {
    pub mdp_id: String,
    pub seed: u64,
    pub condition: Condition,
    pub return_greedy_adv: f64,
    pub return_greedy_q: f64,
    pub degenerate: bool,
    /// `max_a Â(s, ·)` per non-terminal state.
    pub max_a: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbsorbingCompare {
    pub rows: Vec<AbsorbingRow>,
    pub stats: Vec<StatRow>,
    pub summary: Vec<SummaryRow>,
}

fn cond_label(c: &Condition) -> String {
    format!(
        "n_prefs={} segment_length={} noise={}",
        c.n_prefs, c.segment_length, c.noise
    )
}

/// Greedy-Â and planning on Â, learned with and without segments that
/// extend into the absorbing state.
pub fn run_absorbing_compare(cfg: &ExperimentConfig) -> Result<AbsorbingCompare> {
    cfg.validate()?;
    let pool = pool(cfg.workers)?;
    pool.install(|| {
        let tasks = build_tasks(cfg)?;
        let conds = conditions(cfg);
        let mut rows = grid_jobs(&tasks, &conds, |t, c| {
            let g = t.learn(c, cfg)?;
            let adv = t.baseline.score(&t.task, &greedy_advantage_policy(&g))?;
            let via = policy_via_reward(&t.task, &g, cfg.gamma, &cfg.solver)?;
            let q = t.baseline.score(&t.task, &via)?;
            Ok(AbsorbingRow {
                mdp_id: t.draw.id.clone(),
                seed: t.seed,
                condition: *c,
                return_greedy_adv: adv.value,
                return_greedy_q: q.value,
                degenerate: adv.degenerate,
                max_a: max_a_stats(&g, &t.task)?,
            })
        })?;
        rows.sort_by(|a, b| {
            (&a.mdp_id, a.seed, a.condition).cmp(&(&b.mdp_id, b.seed, b.condition))
        });

        let mut stats = Vec::new();
        let mut summary_rows = Vec::new();
        let mut base_conds: Vec<Condition> = conds
            .iter()
            .map(|c| Condition {
                absorbing: false,
                ..*c
            })
            .collect();
        base_conds.dedup();
        for c in &base_conds {
            let label = cond_label(c);
            for absorbing in [false, true] {
                let sel: Vec<&AbsorbingRow> = rows
                    .iter()
                    .filter(|r| r.condition == Condition { absorbing, ..*c })
                    .collect();
                if sel.is_empty() {
                    continue;
                }
                let adv: Vec<f64> = sel.iter().map(|r| r.return_greedy_adv).collect();
                let q: Vec<f64> = sel.iter().map(|r| r.return_greedy_q).collect();
                let cond = format!("{label} absorbing={absorbing}");
                summary_rows.push(summary(
                    cond.clone(),
                    "mean_return_greedy_adv",
                    floored_mean(&adv),
                    adv.len(),
                ));
                summary_rows.push(summary(
                    cond.clone(),
                    "mean_return_greedy_q",
                    floored_mean(&q),
                    q.len(),
                ));
                let (m, n) = mean(sel.iter().flat_map(|r| r.max_a.iter().map(|x| x.abs())));
                summary_rows.push(summary(cond, "mean_abs_max_a", m, n));
            }
            // pair runs on the same MDP and seed across the absorbing setting
            let pairs: Vec<(&AbsorbingRow, &AbsorbingRow)> = rows
                .iter()
                .filter(|r| {
                    r.condition
                        == Condition {
                            absorbing: true,
                            ..*c
                        }
                })
                .filter_map(|on| {
                    rows.iter()
                        .find(|off| {
                            off.condition
                                == Condition {
                                    absorbing: false,
                                    ..*c
                                }
                                && off.mdp_id == on.mdp_id
                                && off.seed == on.seed
                        })
                        .map(|off| (on, off))
                })
                .collect();
            if pairs.is_empty() {
                continue;
            }
            let d_adv: Vec<f64> = pairs
                .iter()
                .map(|(on, off)| on.return_greedy_adv - off.return_greedy_adv)
                .collect();
            let d_q: Vec<f64> = pairs
                .iter()
                .map(|(on, off)| on.return_greedy_q - off.return_greedy_q)
                .collect();
            let d_max: Vec<f64> = pairs
                .iter()
                .flat_map(|(on, off)| {
                    on.max_a
                        .iter()
                        .zip(&off.max_a)
                        .map(|(a, b)| a.abs() - b.abs())
                })
                .collect();
            stats.push(stat(
                label.clone(),
                "greedy_adv_absorbing_minus_not",
                &d_adv,
                Alternative::TwoSided,
            ));
            stats.push(stat(
                label.clone(),
                "greedy_q_absorbing_minus_not",
                &d_q,
                Alternative::TwoSided,
            ));
            stats.push(stat(
                label,
                "abs_max_a_absorbing_minus_not",
                &d_max,
                Alternative::Less,
            ));
        }
        Ok(AbsorbingCompare {
            rows,
            stats,
            summary: summary_rows,
        })
    })
}

impl AbsorbingCompare {
    pub fn tables(&self) -> Vec<CsvTable> {
        let mut main = CsvTable::new(
            "absorbing_compare.csv",
            &[
                "mdp_id",
                "seed",
                "n_prefs",
                "segment_length",
                "noise_mode",
                "absorbing",
                "return_greedy_adv",
                "return_greedy_q",
                "degenerate",
                "mean_abs_max_a",
                "max_abs_max_a",
            ],
        );
        let mut max_a = CsvTable::new(
            "max_a.csv",
            &[
                "mdp_id",
                "seed",
                "n_prefs",
                "segment_length",
                "noise_mode",
                "absorbing",
                "state_rank",
                "max_a",
            ],
        );
        for r in &self.rows {
            let c = &r.condition;
            let prov = vec![
                r.mdp_id.clone(),
                r.seed.to_string(),
                c.n_prefs.to_string(),
                c.segment_length.to_string(),
                c.noise.to_string(),
                c.absorbing.to_string(),
            ];
            let (m, _) = mean(r.max_a.iter().map(|x| x.abs()));
            let mx = r.max_a.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            let mut row = prov.clone();
            row.extend([
                r.return_greedy_adv.to_string(),
                r.return_greedy_q.to_string(),
                r.degenerate.to_string(),
                m.to_string(),
                mx.to_string(),
            ]);
            main.push(row);
            for (i, v) in r.max_a.iter().enumerate() {
                let mut row = prov.clone();
                row.extend([i.to_string(), v.to_string()]);
                max_a.push(row);
            }
        }
        vec![
            main,
            max_a,
            stats_table(&self.stats),
            summary_table(&self.summary),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopRow {
    pub mdp_id: String,
    pub seed: u64,
    pub condition: Condition,
    pub loop_sign: crate::analysis::LoopSign,
    pub max_loop_return: f64,
    pub termination: TerminationClass,
    pub predicted: HypothesisPrediction,
    pub return_greedy_adv: f64,
    pub return_greedy_q: f64,
}

impl LoopRow {
    pub fn difference(&self) -> f64 {
        self.return_greedy_adv - self.return_greedy_q
    }

    /// Whether the run counts towards conformance.
    pub fn decisive(&self) -> bool {
        self.difference().abs() > CONFORMANCE_MARGIN
    }

    pub fn conforms(&self) -> bool {
        conforms(self.predicted, self.return_greedy_adv, self.return_greedy_q)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopHypothesis {
    pub rows: Vec<LoopRow>,
    pub summary: Vec<SummaryRow>,
}

impl LoopHypothesis {
    /// Share of decisive runs whose outcome matches the prediction, and the
    /// number of decisive runs.
    pub fn conformance(&self) -> (f64, usize) {
        let decisive: Vec<&LoopRow> = self.rows.iter().filter(|r| r.decisive()).collect();
        let hits = decisive.iter().filter(|r| r.conforms()).count();
        (hits as f64 / decisive.len().max(1) as f64, decisive.len())
    }
}

/// Relates the loop sign of the learned table to which derivation wins.
pub fn run_loop_hypothesis(cfg: &ExperimentConfig) -> Result<LoopHypothesis> {
    cfg.validate()?;
    let pool = pool(cfg.workers)?;
    pool.install(|| {
        let tasks = build_tasks(cfg)?;
        let conds = conditions(cfg);
        let mut rows = grid_jobs(&tasks, &conds, |t, c| {
            let g = t.learn(c, cfg)?;
            let adv = t.baseline.score(&t.task, &greedy_advantage_policy(&g))?;
            let via = policy_via_reward(&t.task, &g, cfg.gamma, &cfg.solver)?;
            let q = t.baseline.score(&t.task, &via)?;
            let report = loop_analysis(&t.task, g.values())?;
            let termination = classify_termination(&t.task, t.bundle());
            Ok(LoopRow {
                mdp_id: t.draw.id.clone(),
                seed: t.seed,
                condition: *c,
                loop_sign: report.sign,
                max_loop_return: report.max_simple_cycle_return,
                termination,
                predicted: hypothesis_prediction(report.sign, termination, cfg.hypothesis_table),
                return_greedy_adv: adv.value,
                return_greedy_q: q.value,
            })
        })?;
        rows.sort_by(|a, b| {
            (&a.mdp_id, a.seed, a.condition).cmp(&(&b.mdp_id, b.seed, b.condition))
        });

        let mut out = LoopHypothesis {
            rows,
            summary: Vec::new(),
        };
        let (rate, n) = out.conformance();
        let other = match cfg.hypothesis_table {
            HypothesisTable::Tabulated => HypothesisTable::Reasoned,
            HypothesisTable::Reasoned => HypothesisTable::Tabulated,
        };
        let decisive: Vec<&LoopRow> = out.rows.iter().filter(|r| r.decisive()).collect();
        let other_hits = decisive
            .iter()
            .filter(|r| {
                let p = hypothesis_prediction(r.loop_sign, r.termination, other);
                conforms(p, r.return_greedy_adv, r.return_greedy_q)
            })
            .count();
        let no_pred = decisive
            .iter()
            .filter(|r| r.predicted == HypothesisPrediction::NoPrediction)
            .count();
        out.summary = vec![
            summary("all".into(), "runs", out.rows.len() as f64, out.rows.len()),
            summary(
                format!("table={}", cfg.hypothesis_table),
                "conformance_rate",
                rate,
                n,
            ),
            summary(
                format!("table={other}"),
                "conformance_rate",
                other_hits as f64 / n.max(1) as f64,
                n,
            ),
            summary("decisive".into(), "no_prediction_runs", no_pred as f64, n),
        ];
        Ok(out)
    })
}

impl LoopHypothesis {
    pub fn tables(&self) -> Vec<CsvTable> {
        let mut t = CsvTable::new(
            "loop_hypothesis.csv",
            &[
                "mdp_id",
                "seed",
                "n_prefs",
                "segment_length",
                "noise_mode",
                "absorbing",
                "loop_sign",
                "max_loop_return",
                "termination_class",
                "predicted_favored",
                "return_greedy_adv",
                "return_greedy_q",
                "conforms",
            ],
        );
        for r in &self.rows {
            let c = &r.condition;
            t.push(vec![
                r.mdp_id.clone(),
                r.seed.to_string(),
                c.n_prefs.to_string(),
                c.segment_length.to_string(),
                c.noise.to_string(),
                c.absorbing.to_string(),
                r.loop_sign.to_string(),
                r.max_loop_return.to_string(),
                r.termination.to_string(),
                r.predicted.to_string(),
                r.return_greedy_adv.to_string(),
                r.return_greedy_q.to_string(),
                if r.decisive() {
                    r.conforms().to_string()
                } else {
                    String::new()
                },
            ]);
        }
        vec![t, summary_table(&self.summary)]
    }
}

/// Reward handed to the Q-learning agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ShapingReward {
    GroundTruth,
    TrueAdvantage,
    LearnedAdvantage,
}

named_enum!(ShapingReward {
    GroundTruth => "r",
    TrueAdvantage => "a_star",
    LearnedAdvantage => "a_hat",
});

#[derive(Clone, Debug, PartialEq)]
pub struct ShapingRow {
    pub mdp_id: String,
    pub seed: u64,
    pub condition: Condition,
    pub reward: ShapingReward,
    pub aac: f64,
    pub curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shaping {
    pub rows: Vec<ShapingRow>,
    pub stats: Vec<StatRow>,
    pub summary: Vec<SummaryRow>,
}

impl Shaping {
    fn aacs(&self, reward: ShapingReward) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.reward == reward)
            .map(|r| r.aac)
            .collect()
    }

    /// Share of runs where learning on `a` leaves more area above the curve than on `b`.
    pub fn fraction_larger(&self, a: ShapingReward, b: ShapingReward) -> f64 {
        let (xa, xb) = (self.aacs(a), self.aacs(b));
        let wins = xa.iter().zip(&xb).filter(|(x, y)| x > y).count();
        wins as f64 / xa.len().max(1) as f64
    }
}

/// Q-learning on the ground-truth reward, the true optimal advantage, and a
/// learned advantage, compared by area above the learning curve.
pub fn run_shaping(cfg: &ExperimentConfig) -> Result<Shaping> {
    cfg.validate()?;
    let pool = pool(cfg.workers)?;
    pool.install(|| {
        let tasks = build_tasks(cfg)?;
        let conds = conditions(cfg);
        let per_run = grid_jobs(&tasks, &conds, |t, c| {
            let learned = t.learn(c, cfg)?;
            let sources = [
                (ShapingReward::GroundTruth, t.task.reward_table().to_vec()),
                (ShapingReward::TrueAdvantage, t.bundle().a_star.clone()),
                (ShapingReward::LearnedAdvantage, learned.into_values()),
            ];
            sources
                .into_par_iter()
                .map(|(reward, table)| {
                    let s = seed::derive(
                        c.data_seed(t),
                        &[seed::label("qlearn"), seed::label(reward.name())],
                    );
                    let (_, curve) = q_learning(
                        &t.task,
                        &table,
                        &cfg.qlearn,
                        &mut seed::stream(s),
                        &t.baseline,
                    )?;
                    Ok(ShapingRow {
                        mdp_id: t.draw.id.clone(),
                        seed: t.seed,
                        condition: *c,
                        reward,
                        aac: area_above_curve(curve.values())?,
                        curve: curve.0,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut rows: Vec<ShapingRow> = per_run.into_iter().flatten().collect();
        rows.sort_by(|a, b| {
            (&a.mdp_id, a.seed, a.condition, a.reward).cmp(&(
                &b.mdp_id,
                b.seed,
                b.condition,
                b.reward,
            ))
        });
        let mut out = Shaping {
            rows,
            stats: Vec::new(),
            summary: Vec::new(),
        };
        let r = out.aacs(ShapingReward::GroundTruth);
        let a = out.aacs(ShapingReward::TrueAdvantage);
        let h = out.aacs(ShapingReward::LearnedAdvantage);
        let d_ra: Vec<f64> = r.iter().zip(&a).map(|(x, y)| x - y).collect();
        let d_ah: Vec<f64> = a.iter().zip(&h).map(|(x, y)| x - y).collect();
        out.stats = vec![
            stat(
                "all".into(),
                "aac_r_minus_a_star",
                &d_ra,
                Alternative::TwoSided,
            ),
            stat(
                "all".into(),
                "aac_a_star_minus_a_hat",
                &d_ah,
                Alternative::TwoSided,
            ),
        ];
        let frac = out.fraction_larger(ShapingReward::GroundTruth, ShapingReward::TrueAdvantage);
        out.summary = vec![
            summary("all".into(), "fraction_aac_r_above_a_star", frac, r.len()),
            summary(
                "reward=r".into(),
                "mean_aac",
                mean(r.iter().copied()).0,
                r.len(),
            ),
            summary(
                "reward=a_star".into(),
                "mean_aac",
                mean(a.iter().copied()).0,
                a.len(),
            ),
            summary(
                "reward=a_hat".into(),
                "mean_aac",
                mean(h.iter().copied()).0,
                h.len(),
            ),
        ];
        Ok(out)
    })
}

impl Shaping {
    pub fn tables(&self) -> Vec<CsvTable> {
        let prov = [
            "mdp_id",
            "seed",
            "n_prefs",
            "segment_length",
            "noise_mode",
            "absorbing",
            "reward",
        ];
        let mut main = CsvTable::new(
            "shaping.csv",
            &[&prov[..], &["aac", "final_return"]].concat(),
        );
        let mut curves = CsvTable::new(
            "curves.csv",
            &[&prov[..], &["episode", "normalized_return"]].concat(),
        );
        for r in &self.rows {
            let c = &r.condition;
            let p = vec![
                r.mdp_id.clone(),
                r.seed.to_string(),
                c.n_prefs.to_string(),
                c.segment_length.to_string(),
                c.noise.to_string(),
                c.absorbing.to_string(),
                r.reward.to_string(),
            ];
            let last = r.curve.last().copied().unwrap_or(f64::NAN);
            main.push([p.clone(), vec![r.aac.to_string(), last.to_string()]].concat());
            for (e, v) in r.curve.iter().enumerate() {
                curves.push([p.clone(), vec![e.to_string(), v.to_string()]].concat());
            }
        }
        vec![
            main,
            curves,
            stats_table(&self.stats),
            summary_table(&self.summary),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftRow {
    pub mdp_id: String,
    pub seed: u64,
    pub condition: Condition,
    /// Share of start states where greedy-Â and planning on the shifted table agree.
    pub match_rate: f64,
    pub return_delta: f64,
    /// The same comparison against planning on the unshifted table.
    pub match_rate_unshifted: f64,
    pub return_delta_unshifted: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftCheck {
    pub rows: Vec<ShiftRow>,
    pub summary: Vec<SummaryRow>,
}

/// Checks that planning on a per-state shifted Â reproduces greedy-Â.
pub fn run_shift_check(cfg: &ExperimentConfig) -> Result<ShiftCheck> {
    cfg.validate()?;
    let pool = pool(cfg.workers)?;
    pool.install(|| {
        let tasks = build_tasks(cfg)?;
        let conds = conditions(cfg);
        let mut rows = grid_jobs(&tasks, &conds, |t, c| {
            let g = t.learn(c, cfg)?;
            let greedy = greedy_advantage_policy(&g);
            let shifted = policy_via_reward(&t.task, &shifted_reward(&g), cfg.gamma, &cfg.solver)?;
            let plain = policy_via_reward(&t.task, &g, cfg.gamma, &cfg.solver)?;
            let starts = t.task.start_states();
            let rate = |p: &crate::dp::Policy| {
                let hits = starts
                    .iter()
                    .filter(|&&s| p.action(s) == greedy.action(s))
                    .count();
                hits as f64 / starts.len() as f64
            };
            let base = t.baseline.score(&t.task, &greedy)?.value;
            Ok(ShiftRow {
                mdp_id: t.draw.id.clone(),
                seed: t.seed,
                condition: *c,
                match_rate: rate(&shifted),
                return_delta: t.baseline.score(&t.task, &shifted)?.value - base,
                match_rate_unshifted: rate(&plain),
                return_delta_unshifted: t.baseline.score(&t.task, &plain)?.value - base,
            })
        })?;
        rows.sort_by(|a, b| {
            (&a.mdp_id, a.seed, a.condition).cmp(&(&b.mdp_id, b.seed, b.condition))
        });
        let n = rows.len();
        let min_match = rows.iter().map(|r| r.match_rate).fold(1.0, f64::min);
        let max_delta = rows
            .iter()
            .map(|r| r.return_delta.abs())
            .fold(0.0, f64::max);
        let (m_un, _) = mean(rows.iter().map(|r| r.match_rate_unshifted));
        let summary_rows = vec![
            summary("shifted".into(), "min_match_rate", min_match, n),
            summary("shifted".into(), "max_abs_return_delta", max_delta, n),
            summary("unshifted".into(), "mean_match_rate", m_un, n),
        ];
        Ok(ShiftCheck {
            rows,
            summary: summary_rows,
        })
    })
}

impl ShiftCheck {
    pub fn tables(&self) -> Vec<CsvTable> {
        let mut t = CsvTable::new(
            "shift_check.csv",
            &[
                "mdp_id",
                "seed",
                "n_prefs",
                "segment_length",
                "noise_mode",
                "absorbing",
                "match_rate",
                "return_delta",
                "match_rate_unshifted",
                "return_delta_unshifted",
            ],
        );
        for r in &self.rows {
            let c = &r.condition;
            t.push(vec![
                r.mdp_id.clone(),
                r.seed.to_string(),
                c.n_prefs.to_string(),
                c.segment_length.to_string(),
                c.noise.to_string(),
                c.absorbing.to_string(),
                r.match_rate.to_string(),
                r.return_delta.to_string(),
                r.match_rate_unshifted.to_string(),
                r.return_delta_unshifted.to_string(),
            ]);
        }
        vec![t, summary_table(&self.summary)]
    }
}

/// Runs the configured experiment and returns its output files.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<CsvTable>> {
    Ok(match cfg.experiment {
        Experiment::AbsorbingCompare => run_absorbing_compare(cfg)?.tables(),
        Experiment::LoopHypothesis => run_loop_hypothesis(cfg)?.tables(),
        Experiment::Shaping => run_shaping(cfg)?.tables(),
        Experiment::ShiftCheck => run_shift_check(cfg)?.tables(),
    })
}

/// Writes the tables plus a `config.txt` snapshot into `dir`.
pub fn write_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    tables: &[CsvTable],
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let cfg_path = dir.join("config.txt");
    let mut snapshot = cfg.clone();
    // the snapshot must not depend on where or how fast it ran
    snapshot.output_dir = None;
    snapshot.workers = 1;
    fs::write(&cfg_path, snapshot.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    written.push(cfg_path);
    for t in tables {
        written.push(t.write(dir)?);
    }
    Ok(written)
}
