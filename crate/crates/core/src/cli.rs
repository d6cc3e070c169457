//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 on invalid input or usage, 2 when a run fails.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{wilcoxon_signed_rank, Alternative};
use crate::dp::{ReturnBaseline, SolverConfig};
use crate::error::{Error, Result};
use crate::gridworld::{GridSpec, MdpClass90, DEFAULT_GAMMA};
use crate::harness::{
    generate_mdps, run_experiment, write_outputs, ExperimentConfig, MdpFamily, MdpFilter,
};
use crate::learner::{train, AdamConfig, GTable, TrainConfig};
use crate::policies::{greedy_advantage_policy, policy_via_reward, shifted_reward};
use crate::preferences::{
    augment_reverse, build_dataset, read_dataset_csv, write_dataset_csv, LabelNoise,
    PreferenceDataset, PreferenceModel, Provenance,
};

#[derive(Debug, Parser)]
#[command(
    name = "prefgrid",
    version,
    about = "Learn optimal advantage from regret preferences in gridworlds"
)]
struct Cli {
    /// Seed for every random draw; required by stochastic subcommands.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Experiment config file (flat key=value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output file or directory.
    #[arg(long, global = true, env = "PREFGRID_OUT")]
    out: Option<PathBuf>,

    /// Worker threads for experiments.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate random grid layouts.
    GenMdps(GenMdps),
    /// Sample a labeled preference dataset on a layout.
    GenPrefs(GenPrefs),
    /// Fit a table to a preference dataset.
    Train(Train),
    /// Score the policies derived from a table.
    Eval(Eval),
    /// Run a configured experiment.
    Experiment(RunExperiment),
    /// Paired Wilcoxon test between two CSV columns.
    Stats(Stats),
}

#[derive(Debug, Args)]
struct GenMdps {
    /// Layout family: 100 (general) or 90 (small three-class).
    #[arg(long, default_value = "100")]
    family: String,
    /// Class for the small family; repeat to cycle through several.
    #[arg(long)]
    class: Vec<String>,
    /// any or must_terminate.
    #[arg(long, default_value = "any")]
    filter: String,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
}

#[derive(Debug, Args)]
struct GenPrefs {
    #[arg(long)]
    mdp: PathBuf,
    /// Number of segment pairs.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    length: usize,
    #[arg(long, default_value = "regret")]
    model: String,
    #[arg(long, default_value = "noiseless")]
    noise: String,
    /// Let segments continue into the absorbing state.
    #[arg(long)]
    absorbing: bool,
    /// Append the segment-swapped copy of every pair.
    #[arg(long)]
    augment: bool,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
}

#[derive(Debug, Args)]
struct Train {
    #[arg(long)]
    prefs: PathBuf,
    #[arg(long)]
    mdp: PathBuf,
    /// The dataset was sampled with the absorbing state enabled.
    #[arg(long)]
    absorbing: bool,
    /// Reverse-augment the dataset before training.
    #[arg(long)]
    augment: bool,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = AdamConfig::default().lr)]
    lr: f64,
}

#[derive(Debug, Args)]
struct Eval {
    #[arg(long)]
    mdp: PathBuf,
    /// Learned table CSV.
    #[arg(long)]
    g: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
}

#[derive(Debug, Args)]
struct RunExperiment {
    /// Experiment name; overrides the config file's.
    #[arg(long)]
    experiment: Option<String>,
}

#[derive(Debug, Args)]
struct Stats {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    a: String,
    #[arg(long)]
    b: String,
    #[arg(long, default_value = "two_sided")]
    alternative: String,
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn need_seed(cli: &Cli, what: &str) -> Result<u64> {
    cli.seed
        .ok_or_else(|| Error::Config(format!("{what} is stochastic; pass --seed")))
}

fn need_out<'a>(cli: &'a Cli, what: &str) -> Result<&'a Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::Config(format!("{what} needs --out or PREFGRID_OUT")))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenMdps(a) => gen_mdps(&cli, a),
        Command::GenPrefs(a) => gen_prefs(&cli, a),
        Command::Train(a) => train_cmd(&cli, a),
        Command::Eval(a) => eval(a),
        Command::Experiment(a) => experiment(&cli, a),
        Command::Stats(a) => stats(a),
    }
}

fn gen_mdps(cli: &Cli, a: &GenMdps) -> Result<()> {
    let seed = need_seed(cli, "gen-mdps")?;
    let out = need_out(cli, "gen-mdps")?;
    let family: MdpFamily = a.family.parse()?;
    let classes = if a.class.is_empty() {
        MdpClass90::ALL.to_vec()
    } else {
        a.class
            .iter()
            .map(|c| c.parse())
            .collect::<Result<Vec<_>>>()?
    };
    let filter: MdpFilter = a.filter.parse()?;
    let draws = generate_mdps(family, &classes, filter, a.count, a.gamma, seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for d in &draws {
        write(
            &out.join(format!("{}.grid", d.id)),
            d.spec.to_text().as_bytes(),
        )?;
    }
    eprintln!("wrote {} layouts to {}", draws.len(), out.display());
    Ok(())
}

fn load_spec(path: &Path) -> Result<GridSpec> {
    GridSpec::parse(&read(path)?)
}

fn gen_prefs(cli: &Cli, a: &GenPrefs) -> Result<()> {
    let seed = need_seed(cli, "gen-prefs")?;
    let out = need_out(cli, "gen-prefs")?;
    let mdp = load_spec(&a.mdp)?.compile(a.absorbing, a.gamma)?;
    let model: PreferenceModel = a.model.parse()?;
    let noise: LabelNoise = a.noise.parse()?;
    let bundle =
        crate::dp::value_iteration(&mdp, mdp.reward_table(), a.gamma, &SolverConfig::default())?;
    let mut ds = build_dataset(&mdp, &bundle, a.n, a.length, model, noise, seed)?;
    if a.augment {
        ds = augment_reverse(&ds);
    }
    let mut buf = Vec::new();
    write_dataset_csv(&mut buf, &ds)?;
    write(out, &buf)?;
    write(
        &sidecar(out, ".provenance"),
        ds.provenance.to_text().as_bytes(),
    )?;
    eprintln!("wrote {} preferences to {}", ds.len(), out.display());
    Ok(())
}

fn train_cmd(cli: &Cli, a: &Train) -> Result<()> {
    let out = need_out(cli, "train")?;
    let mdp = load_spec(&a.mdp)?.compile(a.absorbing, DEFAULT_GAMMA)?;
    let file = fs::File::open(&a.prefs).map_err(|e| Error::io(&a.prefs, e))?;
    let samples = read_dataset_csv(file)?;
    for s in &samples {
        s.seg1.validate(&mdp)?;
        s.seg2.validate(&mdp)?;
    }
    let provenance = match read(&sidecar(&a.prefs, ".provenance")) {
        Ok(text) => Provenance::parse(&text)?,
        Err(_) => Provenance {
            model: PreferenceModel::Regret,
            noise: LabelNoise::Noiseless,
            absorbing: a.absorbing,
            seed: 0,
            segment_length: samples.first().map_or(0, |s| s.seg1.len()),
            augmented: false,
        },
    };
    let mut ds = PreferenceDataset {
        samples,
        provenance,
    };
    if a.augment {
        ds = augment_reverse(&ds);
    }
    let cfg = TrainConfig {
        epochs: a.epochs,
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
    };
    let report = train(&mdp, &ds, &cfg)?;
    let mut buf = Vec::new();
    report.final_g.write_csv(&mut buf)?;
    write(out, &buf)?;
    let mut loss = Vec::new();
    report.write_loss_csv(&mut loss)?;
    write(&sidecar(out, ".loss.csv"), &loss)?;
    write(
        &sidecar(out, ".config.txt"),
        report.config_text().as_bytes(),
    )?;
    eprintln!(
        "trained {} epochs on {} preferences; final loss {}",
        a.epochs,
        ds.len(),
        report.loss_per_epoch.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn eval(a: &Eval) -> Result<()> {
    let mdp = load_spec(&a.mdp)?.compile(false, a.gamma)?;
    let file = fs::File::open(&a.g).map_err(|e| Error::io(&a.g, e))?;
    let g = GTable::read_csv(file)?.for_mdp(&mdp)?;
    let solver = SolverConfig::default();
    let baseline = ReturnBaseline::new(&mdp, &solver)?;
    let policies = [
        ("greedy_advantage", greedy_advantage_policy(&g)),
        (
            "greedy_q_on_reward",
            policy_via_reward(&mdp, &g, a.gamma, &solver)?,
        ),
        (
            "greedy_q_on_shifted",
            policy_via_reward(&mdp, &shifted_reward(&g), a.gamma, &solver)?,
        ),
    ];
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let io = |e| Error::io("<stdout>", e);
    writeln!(out, "method,normalized_return,degenerate").map_err(io)?;
    for (name, p) in &policies {
        let s = baseline.score(&mdp, p)?;
        writeln!(out, "{name},{},{}", s.value, s.degenerate).map_err(io)?;
    }
    Ok(())
}

fn experiment(cli: &Cli, a: &RunExperiment) -> Result<()> {
    let seed = need_seed(cli, "experiment")?;
    let mut cfg = match (&cli.config, &a.experiment) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::desk(name.parse()?),
        (None, None) => {
            return Err(Error::Config(
                "experiment needs --config or --experiment".into(),
            ))
        }
    };
    if let Some(name) = &a.experiment {
        cfg.experiment = name.parse()?;
    }
    cfg.seeds = vec![seed];
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| {
            Error::Config("experiment needs --out, PREFGRID_OUT or output_dir".into())
        })?;
    eprintln!(
        "running {} with seed {seed} on {} workers",
        cfg.experiment, cfg.workers
    );
    let tables = run_experiment(&cfg)?;
    let files = write_outputs(&out, &cfg, &tables)?;
    eprintln!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

fn stats(a: &Stats) -> Result<()> {
    let alternative: Alternative = a.alternative.parse()?;
    let mut reader = csv::Reader::from_path(&a.input)?;
    let header = reader.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("no column {name:?} in {}", a.input.display())))
    };
    let (ia, ib) = (col(&a.a)?, col(&a.b)?);
    let mut diffs = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let num = |j: usize| {
            rec[j]
                .parse::<f64>()
                .map_err(|_| Error::parse(i + 2, format!("not a number: {:?}", &rec[j])))
        };
        diffs.push(num(ia)? - num(ib)?);
    }
    let w = wilcoxon_signed_rank(&diffs, alternative);
    println!("test,alternative,p_value,n,w_plus,exact");
    println!(
        "wilcoxon,{},{},{},{},{}",
        alternative, w.p_value, w.n, w.w_plus, w.exact
    );
    Ok(())
}
