//! Delivery gridworlds: layouts, the text grid format, random generators and
//! compilation into deterministic tabular MDPs.
//!
//! States are grid cells indexed row-major from the top-left corner. When the
//! absorbing state is enabled it is appended as the last state index, so the
//! cell states keep the same ids in both compilations of a layout.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

pub const N_ACTIONS: usize = 4;

/// Reward component of a mildly good object.
pub const MILDLY_GOOD_REWARD: f64 = 1.0;
/// Default reward of every transition into a cell (the time penalty).
pub const TIME_PENALTY: f64 = -1.0;
/// Discount used for all planning and evaluation unless configured otherwise.
pub const DEFAULT_GAMMA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Up,
    Right,
    Down,
    Left,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [Action::Up, Action::Right, Action::Down, Action::Left];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Right => (0, 1),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    Empty,
    MildlyGood,
    MildlyBad,
    TerminalSuccess,
    TerminalFailure,
}

impl CellKind {
    pub fn is_terminal(self) -> bool {
        matches!(self, CellKind::TerminalSuccess | CellKind::TerminalFailure)
    }

    pub fn symbol(self) -> char {
        match self {
            CellKind::Empty => '.',
            CellKind::MildlyGood => 'g',
            CellKind::MildlyBad => 'b',
            CellKind::TerminalSuccess => 'S',
            CellKind::TerminalFailure => 'F',
        }
    }

    pub fn from_symbol(c: char) -> Option<CellKind> {
        Some(match c {
            '.' => CellKind::Empty,
            'g' => CellKind::MildlyGood,
            'b' => CellKind::MildlyBad,
            'S' => CellKind::TerminalSuccess,
            'F' => CellKind::TerminalFailure,
            _ => return None,
        })
    }
}

/// A gridworld layout together with its reward components.
///
/// A component is only stored for object kinds that occur in the grid; the
/// mildly good component is fixed at [`MILDLY_GOOD_REWARD`]. `time_penalty`
/// is the reward of every transition into a blank cell, and it is also the
/// base of every other transition reward.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<CellKind>,
    pub success: Option<f64>,
    pub failure: Option<f64>,
    pub bad: Option<f64>,
    pub time_penalty: f64,
}

impl GridSpec {
    /// A blank grid with the default time penalty.
    pub fn blank(height: usize, width: usize) -> Self {
        GridSpec {
            height,
            width,
            cells: vec![CellKind::Empty; height * width],
            success: None,
            failure: None,
            bad: None,
            time_penalty: TIME_PENALTY,
        }
    }

    pub fn cell(&self, row: usize, col: usize) -> CellKind {
        self.cells[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, kind: CellKind) {
        self.cells[row * self.width + col] = kind;
    }

    pub fn count(&self, kind: CellKind) -> usize {
        self.cells.iter().filter(|&&c| c == kind).count()
    }

    /// Reward component of the object in a cell.
    pub fn component(&self, kind: CellKind) -> f64 {
        match kind {
            CellKind::Empty => 0.0,
            CellKind::MildlyGood => MILDLY_GOOD_REWARD,
            CellKind::MildlyBad => self.bad.unwrap_or(0.0),
            CellKind::TerminalSuccess => self.success.unwrap_or(0.0),
            CellKind::TerminalFailure => self.failure.unwrap_or(0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidSpec(format!(
                "dimensions must be positive, got {}x{}",
                self.height, self.width
            )));
        }
        if self.cells.len() != self.height * self.width {
            return Err(Error::InvalidSpec(format!(
                "{}x{} grid needs {} cells, got {}",
                self.height,
                self.width,
                self.height * self.width,
                self.cells.len()
            )));
        }
        let required = [
            (CellKind::TerminalSuccess, self.success, "success"),
            (CellKind::TerminalFailure, self.failure, "failure"),
            (CellKind::MildlyBad, self.bad, "bad"),
        ];
        for (kind, value, key) in required {
            if self.count(kind) > 0 && value.is_none() {
                return Err(Error::InvalidSpec(format!("missing {key} component")));
            }
        }
        let values = [
            self.success,
            self.failure,
            self.bad,
            Some(self.time_penalty),
        ];
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("non-finite reward component".into()));
        }
        if self.cells.iter().all(|c| c.is_terminal()) {
            return Err(Error::InvalidSpec("grid has no non-terminal cell".into()));
        }
        Ok(())
    }

    /// Renders the grid file format.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.height, self.width);
        for row in self.cells.chunks(self.width) {
            out.extend(row.iter().map(|c| c.symbol()));
            out.push('\n');
        }
        let keyed = [
            ("success", self.success),
            ("failure", self.failure),
            ("bad", self.bad),
        ];
        for (key, value) in keyed {
            if let Some(v) = value {
                let _ = writeln!(out, "{key}={v}");
            }
        }
        if self.time_penalty != TIME_PENALTY {
            let _ = writeln!(out, "blank={}", self.time_penalty);
        }
        out
    }

    /// Parses the grid file format.
    pub fn parse(text: &str) -> Result<GridSpec> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(1, "empty grid file"))?;
        let dims: Vec<&str> = header.split_whitespace().collect();
        let parse_dim = |s: &str| {
            s.parse::<usize>()
                .ok()
                .filter(|&d| d > 0)
                .ok_or_else(|| Error::parse(1, format!("bad dimension {s:?}")))
        };
        let (height, width) = match dims.as_slice() {
            [h, w] => (parse_dim(h)?, parse_dim(w)?),
            _ => return Err(Error::parse(1, "expected \"H W\"")),
        };

        let mut spec = GridSpec::blank(height, width);
        for row in 0..height {
            let (line_no, line) = lines
                .next()
                .ok_or_else(|| Error::parse(row + 2, format!("expected {height} grid rows")))?;
            let kinds: Vec<CellKind> = line
                .chars()
                .map(|c| {
                    CellKind::from_symbol(c).ok_or_else(|| {
                        Error::parse(line_no, format!("unknown cell character {c:?}"))
                    })
                })
                .collect::<Result<_>>()?;
            if kinds.len() != width {
                return Err(Error::parse(
                    line_no,
                    format!("row has {} cells, expected {width}", kinds.len()),
                ));
            }
            spec.cells[row * width..(row + 1) * width].copy_from_slice(&kinds);
        }

        let mut last_line = height + 1;
        let mut seen_blank = false;
        for (line_no, line) in lines {
            last_line = line_no;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(line_no, format!("expected key=value, got {line:?}"))
            })?;
            let value = f64::from_str(value.trim())
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(line_no, format!("bad number {:?}", value.trim())))?;
            let slot = match key.trim() {
                "success" => &mut spec.success,
                "failure" => &mut spec.failure,
                "bad" => &mut spec.bad,
                "blank" => {
                    if seen_blank {
                        return Err(Error::parse(line_no, "duplicate key \"blank\""));
                    }
                    seen_blank = true;
                    spec.time_penalty = value;
                    continue;
                }
                other => return Err(Error::parse(line_no, format!("unknown key {other:?}"))),
            };
            if slot.replace(value).is_some() {
                return Err(Error::parse(
                    line_no,
                    format!("duplicate key {:?}", key.trim()),
                ));
            }
        }

        let required = [
            (CellKind::TerminalSuccess, spec.success, "success"),
            (CellKind::TerminalFailure, spec.failure, "failure"),
            (CellKind::MildlyBad, spec.bad, "bad"),
        ];
        for (kind, value, key) in required {
            if spec.count(kind) > 0 && value.is_none() {
                return Err(Error::parse(
                    last_line + 1,
                    format!("missing component line \"{key}=\""),
                ));
            }
        }
        spec.validate()
            .map_err(|e| Error::parse(1, e.to_string()))?;
        Ok(spec)
    }

    /// Compiles the layout into a deterministic tabular MDP.
    pub fn compile(&self, absorbing: bool, gamma: f64) -> Result<Mdp> {
        Mdp::compile(self, absorbing, gamma)
    }
}

/// A deterministic tabular MDP with four actions per state.
///
/// Rewards are stored per (state, action); transitions are deterministic so
/// this is equivalent to a reward on (state, action, next state).
#[derive(Clone, Debug, PartialEq)]
pub struct Mdp {
    height: usize,
    width: usize,
    n_states: usize,
    next_state: Vec<usize>,
    reward: Vec<f64>,
    terminal: Vec<bool>,
    absorbing: Option<usize>,
    start_states: Vec<usize>,
    gamma: f64,
}

impl Mdp {
    fn compile(spec: &GridSpec, absorbing: bool, gamma: f64) -> Result<Mdp> {
        spec.validate()?;
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidSpec(format!("gamma {gamma} outside (0, 1]")));
        }
        let (h, w) = (spec.height, spec.width);
        let n_cells = h * w;
        let n_states = n_cells + usize::from(absorbing);
        let absorbing_state = absorbing.then_some(n_cells);

        let mut next_state = vec![0; n_states * N_ACTIONS];
        let mut reward = vec![0.0; n_states * N_ACTIONS];
        let mut terminal = vec![false; n_states];

        for s in 0..n_cells {
            let kind = spec.cells[s];
            terminal[s] = kind.is_terminal();
            let (row, col) = (s / w, s % w);
            for a in Action::ALL {
                let i = s * N_ACTIONS + a.index();
                if kind.is_terminal() {
                    // Terminal cells either feed the absorbing state or end
                    // the episode; both carry zero reward.
                    next_state[i] = absorbing_state.unwrap_or(s);
                    continue;
                }
                let (dr, dc) = a.delta();
                let (r2, c2) = (row as isize + dr, col as isize + dc);
                if r2 < 0 || c2 < 0 || r2 >= h as isize || c2 >= w as isize {
                    next_state[i] = s;
                    reward[i] = spec.time_penalty;
                } else {
                    let dest = r2 as usize * w + c2 as usize;
                    next_state[i] = dest;
                    reward[i] = spec.time_penalty + spec.component(spec.cells[dest]);
                }
            }
        }
        if let Some(abs) = absorbing_state {
            for a in 0..N_ACTIONS {
                next_state[abs * N_ACTIONS + a] = abs;
            }
        }
        let start_states = (0..n_cells).filter(|&s| !terminal[s]).collect();

        Ok(Mdp {
            height: h,
            width: w,
            n_states,
            next_state,
            reward,
            terminal,
            absorbing: absorbing_state,
            start_states,
            gamma,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        N_ACTIONS
    }

    /// Number of grid cells; equals `n_states` unless the absorbing state is enabled.
    pub fn n_cells(&self) -> usize {
        self.height * self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn next(&self, s: usize, a: usize) -> usize {
        self.next_state[s * N_ACTIONS + a]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * N_ACTIONS + a]
    }

    /// Ground-truth reward table indexed `s * N_ACTIONS + a`.
    pub fn reward_table(&self) -> &[f64] {
        &self.reward
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn absorbing_state(&self) -> Option<usize> {
        self.absorbing
    }

    pub fn absorbing_enabled(&self) -> bool {
        self.absorbing.is_some()
    }

    pub fn is_absorbing(&self, s: usize) -> bool {
        self.absorbing == Some(s)
    }

    /// States whose value is pinned at 0 by construction: terminal cells when
    /// episodes end there, the absorbing state otherwise.
    pub fn value_pinned(&self, s: usize) -> bool {
        match self.absorbing {
            Some(abs) => s == abs,
            None => self.terminal[s],
        }
    }

    /// Support of the uniform start distribution (non-terminal cells).
    pub fn start_states(&self) -> &[usize] {
        &self.start_states
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }
}

/// Class labels of the small loop-hypothesis MDP family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MdpClass90 {
    MustTerminateAny,
    MustTerminateSuccess,
    MustLoop,
}

impl MdpClass90 {
    pub const ALL: [MdpClass90; 3] = [
        MdpClass90::MustTerminateAny,
        MdpClass90::MustTerminateSuccess,
        MdpClass90::MustLoop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MdpClass90::MustTerminateAny => "must_terminate_any",
            MdpClass90::MustTerminateSuccess => "must_terminate_success",
            MdpClass90::MustLoop => "must_loop",
        }
    }
}

impl FromStr for MdpClass90 {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mdp class {s:?}")))
    }
}

fn pick<T: Copy, R: Rng + ?Sized>(rng: &mut R, options: &[T]) -> T {
    options[rng.gen_range(0..options.len())]
}

/// Draws a layout from the general random family (5-10 rows, 3-15 columns,
/// random object proportions and components).
pub fn generate_mdp_100<R: Rng + ?Sized>(rng: &mut R) -> GridSpec {
    let height = pick(rng, &[5, 6, 10]);
    let width = pick(rng, &[3, 6, 10, 15]);
    // proportions in percent so the floor is exact
    let failure_pct: usize = pick(rng, &[0, 10, 30]);
    let bad_pct: usize = pick(rng, &[0, 10, 50, 80]);
    let good_pct: usize = pick(rng, &[0, 10, 20]);
    let success = pick(rng, &[0.0, 1.0, 5.0, 10.0, 50.0]);
    let failure = pick(rng, &[-5.0, -10.0, -50.0]);
    let bad = pick(rng, &[-2.0, -5.0, -10.0]);

    let n = height * width;
    let mut free: Vec<usize> = (0..n).collect();
    free.shuffle(rng);

    let mut spec = GridSpec::blank(height, width);
    let quotas = [
        (CellKind::TerminalSuccess, 1),
        (CellKind::TerminalFailure, failure_pct * n / 100),
        (CellKind::MildlyBad, bad_pct * n / 100),
        (CellKind::MildlyGood, good_pct * n / 100),
    ];
    for (kind, quota) in quotas {
        // Leave at least one empty cell so the start distribution is never empty.
        for _ in 0..quota.min(free.len().saturating_sub(1)) {
            let cell = free.pop().expect("free cell");
            spec.cells[cell] = kind;
        }
    }
    spec.success = Some(success);
    if spec.count(CellKind::TerminalFailure) > 0 {
        spec.failure = Some(failure);
    }
    if spec.count(CellKind::MildlyBad) > 0 {
        spec.bad = Some(bad);
    }
    spec
}

/// Draws a layout from the small loop-hypothesis family of the given class.
pub fn generate_mdp_90<R: Rng + ?Sized>(rng: &mut R, class: MdpClass90) -> GridSpec {
    let height = pick(rng, &[3, 5]);
    let width = pick(rng, &[1, 2]);
    let mut corners = vec![
        (0, 0),
        (0, width - 1),
        (height - 1, 0),
        (height - 1, width - 1),
    ];
    corners.dedup();
    corners.sort_unstable();
    corners.dedup();

    let mut spec = GridSpec::blank(height, width);
    let success_at = corners.remove(rng.gen_range(0..corners.len()));
    spec.set(success_at.0, success_at.1, CellKind::TerminalSuccess);
    spec.success = Some(pick(rng, &[0.0, 1.5, 10.0]));

    let (has_failure, failure, blank) = match class {
        MdpClass90::MustTerminateAny => {
            let exists = rng.gen_bool(0.5);
            (exists, pick(rng, &[-5.0, -10.0]), -1.0)
        }
        MdpClass90::MustTerminateSuccess => (true, -10.0, -1.0),
        MdpClass90::MustLoop => (true, -10.0, 1.0),
    };
    if has_failure {
        let at = corners[rng.gen_range(0..corners.len())];
        spec.set(at.0, at.1, CellKind::TerminalFailure);
        spec.failure = Some(failure);
    }
    spec.time_penalty = blank;
    spec
}
