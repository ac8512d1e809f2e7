//! Decoupled path/goal-state MDP over a 2D terrain grid.
//!
//! Every cell has a path state (the robot crosses it) and a co-located goal
//! state (the robot stops there). Moves between path states are
//! deterministic; `End` transfers a path state to its goal state, and goal
//! states are terminal.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{Cell, Field};

/// Discount used when none is configured.
pub const DEFAULT_GAMMA: f64 = 0.95;

/// Upper bound on the number of actions (8-connected moves plus `End`).
pub const MAX_ACTIONS: usize = 9;

#[derive(Debug, Error, PartialEq)]
pub enum MdpError {
    #[error("grid must have at least one row and one column (got {rows}x{cols})")]
    EmptyGrid { rows: usize, cols: usize },
    #[error("discount factor {0} outside [0, 1)")]
    BadDiscount(f64),
    #[error("cell ({row}, {col}) outside the grid")]
    OutOfGrid { row: usize, col: usize },
    #[error("action {action} unavailable at {state}")]
    Unavailable { state: StateId, action: Action },
    #[error("reward field is {got_rows}x{got_cols}, grid is {rows}x{cols}")]
    Dimension {
        rows: usize,
        cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(Violation),
}

/// Grid geometry and discount.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    /// Meters per cell. Carried as metadata only.
    pub resolution_m: f64,
    pub gamma: f64,
    /// Enables the diagonal moves (action codes 5..8).
    #[serde(default)]
    pub eight_connected: bool,
    /// Admits `gamma == 1`, used by the enumeration oracles.
    #[serde(default)]
    pub oracle_mode: bool,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            resolution_m: 0.1,
            gamma: DEFAULT_GAMMA,
            eight_connected: false,
            oracle_mode: false,
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    /// Undiscounted grid for oracle checks.
    pub fn oracle(rows: usize, cols: usize) -> Self {
        Self {
            gamma: 1.0,
            oracle_mode: true,
            ..Self::new(rows, cols)
        }
    }

    pub fn validate(&self) -> Result<(), MdpError> {
        if self.rows == 0 || self.cols == 0 {
            return Err(MdpError::EmptyGrid {
                rows: self.rows,
                cols: self.cols,
            });
        }
        let upper_ok = self.gamma < 1.0 || (self.oracle_mode && self.gamma == 1.0);
        if !(self.gamma >= 0.0 && upper_ok) {
            return Err(MdpError::BadDiscount(self.gamma));
        }
        Ok(())
    }

    pub fn state_count(&self) -> usize {
        2 * self.rows * self.cols
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StateKind {
    Path,
    Goal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateId {
    pub kind: StateKind,
    pub row: usize,
    pub col: usize,
}

impl StateId {
    pub const fn path(row: usize, col: usize) -> Self {
        Self {
            kind: StateKind::Path,
            row,
            col,
        }
    }

    pub const fn goal(row: usize, col: usize) -> Self {
        Self {
            kind: StateKind::Goal,
            row,
            col,
        }
    }

    pub fn cell(&self) -> Cell {
        Cell::new(self.row, self.col)
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            StateKind::Path => "Path",
            StateKind::Goal => "Goal",
        };
        write!(f, "({kind},{},{})", self.row, self.col)
    }
}

/// Agent actions. Codes are stable and used by the dataset format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
    End = 4,
    UpLeft = 5,
    UpRight = 6,
    DownLeft = 7,
    DownRight = 8,
}

impl Action {
    /// The five default actions in tie-breaking order.
    pub const CARDINAL: [Action; 5] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::End,
    ];

    pub const ALL: [Action; MAX_ACTIONS] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::End,
        Action::UpLeft,
        Action::UpRight,
        Action::DownLeft,
        Action::DownRight,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Action> {
        Action::ALL.get(code as usize).copied()
    }

    /// Row/col offset of a move; `None` for `End`.
    pub fn offset(self) -> Option<(isize, isize)> {
        match self {
            Action::Up => Some((-1, 0)),
            Action::Down => Some((1, 0)),
            Action::Left => Some((0, -1)),
            Action::Right => Some((0, 1)),
            Action::UpLeft => Some((-1, -1)),
            Action::UpRight => Some((-1, 1)),
            Action::DownLeft => Some((1, -1)),
            Action::DownRight => Some((1, 1)),
            Action::End => None,
        }
    }

    pub fn opposite(self) -> Option<Action> {
        match self {
            Action::Up => Some(Action::Down),
            Action::Down => Some(Action::Up),
            Action::Left => Some(Action::Right),
            Action::Right => Some(Action::Left),
            Action::UpLeft => Some(Action::DownRight),
            Action::DownRight => Some(Action::UpLeft),
            Action::UpRight => Some(Action::DownLeft),
            Action::DownLeft => Some(Action::UpRight),
            Action::End => None,
        }
    }

    pub fn is_move(self) -> bool {
        self != Action::End
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Successor of a path state under an available action.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Successor {
    /// Flat index of the next path cell.
    Path(usize),
    /// Flat index of the goal cell (always the current cell).
    Goal(usize),
}

/// Immutable MDP built from a [`GridSpec`].
#[derive(Clone, Debug)]
pub struct GridMdp {
    spec: GridSpec,
    /// Per path cell: available actions and successors, in action-code order
    /// with `End` last among the cardinal set.
    available: Vec<Vec<(Action, Successor)>>,
}

pub fn build_mdp(spec: GridSpec) -> Result<GridMdp, MdpError> {
    GridMdp::new(spec)
}

impl GridMdp {
    pub fn new(spec: GridSpec) -> Result<Self, MdpError> {
        spec.validate()?;
        let actions: &[Action] = if spec.eight_connected {
            &Action::ALL
        } else {
            &Action::CARDINAL
        };
        let mut available = Vec::with_capacity(spec.rows * spec.cols);
        for row in 0..spec.rows {
            for col in 0..spec.cols {
                let here = row * spec.cols + col;
                let mut list = Vec::with_capacity(actions.len());
                for &a in actions {
                    match a.offset() {
                        None => list.push((a, Successor::Goal(here))),
                        Some((dr, dc)) => {
                            let r = row as isize + dr;
                            let c = col as isize + dc;
                            if r >= 0 && c >= 0 && (r as usize) < spec.rows && (c as usize) < spec.cols
                            {
                                list.push((a, Successor::Path(r as usize * spec.cols + c as usize)));
                            }
                        }
                    }
                }
                available.push(list);
            }
        }
        Ok(Self { spec, available })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn rows(&self) -> usize {
        self.spec.rows
    }

    pub fn cols(&self) -> usize {
        self.spec.cols
    }

    pub fn gamma(&self) -> f64 {
        self.spec.gamma
    }

    pub fn cell_count(&self) -> usize {
        self.spec.rows * self.spec.cols
    }

    pub fn state_count(&self) -> usize {
        self.spec.state_count()
    }

    pub fn contains(&self, cell: Cell) -> bool {
        cell.row < self.spec.rows && cell.col < self.spec.cols
    }

    #[inline]
    pub fn index_of(&self, cell: Cell) -> usize {
        cell.row * self.spec.cols + cell.col
    }

    #[inline]
    pub fn cell_of(&self, idx: usize) -> Cell {
        Cell::new(idx / self.spec.cols, idx % self.spec.cols)
    }

    /// Available actions and successors at a path cell (by flat index).
    #[inline]
    pub fn moves(&self, idx: usize) -> &[(Action, Successor)] {
        &self.available[idx]
    }

    /// Available actions at a state; empty for goal states.
    pub fn available_actions(&self, s: StateId) -> Vec<Action> {
        if s.kind == StateKind::Goal || !self.contains(s.cell()) {
            return Vec::new();
        }
        self.available[self.index_of(s.cell())]
            .iter()
            .map(|&(a, _)| a)
            .collect()
    }

    pub fn transition(&self, s: StateId, a: Action) -> Result<StateId, MdpError> {
        if !self.contains(s.cell()) {
            return Err(MdpError::OutOfGrid {
                row: s.row,
                col: s.col,
            });
        }
        if s.kind == StateKind::Goal {
            return Err(MdpError::Unavailable { state: s, action: a });
        }
        let idx = self.index_of(s.cell());
        self.available[idx]
            .iter()
            .find(|&&(b, _)| b == a)
            .map(|&(_, succ)| match succ {
                Successor::Path(j) => {
                    let c = self.cell_of(j);
                    StateId::path(c.row, c.col)
                }
                Successor::Goal(j) => {
                    let c = self.cell_of(j);
                    StateId::goal(c.row, c.col)
                }
            })
            .ok_or(MdpError::Unavailable { state: s, action: a })
    }

    pub fn check_field(&self, field: &Field) -> Result<(), MdpError> {
        if field.dims() != (self.spec.rows, self.spec.cols) {
            return Err(MdpError::Dimension {
                rows: self.spec.rows,
                cols: self.spec.cols,
                got_rows: field.rows(),
                got_cols: field.cols(),
            });
        }
        Ok(())
    }

    /// Checks transition consistency and terminal structure of `traj`.
    pub fn validate_trajectory(&self, traj: &Trajectory) -> Result<(), Violation> {
        if traj.steps.is_empty() {
            return Err(Violation {
                index: 0,
                kind: ViolationKind::Empty,
            });
        }
        let last = traj.steps.len() - 1;
        for (i, step) in traj.steps.iter().enumerate() {
            if !self.contains(step.cell) {
                return Err(Violation {
                    index: i,
                    kind: ViolationKind::OutOfGrid,
                });
            }
            if i > 0 {
                let prev = &traj.steps[i - 1];
                match self.transition(StateId::path(prev.cell.row, prev.cell.col), prev.action) {
                    Ok(next) if next.kind == StateKind::Path && next.cell() == step.cell => {}
                    Ok(_) | Err(_) => {
                        return Err(Violation {
                            index: i,
                            kind: ViolationKind::Discontinuous,
                        })
                    }
                }
            }
            if step.action == Action::End && i != last {
                return Err(Violation {
                    index: i,
                    kind: ViolationKind::EarlyEnd,
                });
            }
            if !self.spec.eight_connected && step.action.code() > Action::End.code() {
                return Err(Violation {
                    index: i,
                    kind: ViolationKind::UnavailableAction,
                });
            }
        }
        let tail = &traj.steps[last];
        if tail.action != Action::End {
            return Err(Violation {
                index: last,
                kind: ViolationKind::MissingEnd,
            });
        }
        if traj.terminal != tail.cell {
            return Err(Violation {
                index: last,
                kind: ViolationKind::TerminalMismatch,
            });
        }
        Ok(())
    }
}

pub fn transition(mdp: &GridMdp, s: StateId, a: Action) -> Result<StateId, MdpError> {
    mdp.transition(s, a)
}

pub fn validate_trajectory(mdp: &GridMdp, traj: &Trajectory) -> Result<(), Violation> {
    mdp.validate_trajectory(traj)
}

/// One occupied path cell and the action taken there.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub cell: Cell,
    pub action: Action,
}

impl Step {
    pub const fn new(cell: Cell, action: Action) -> Self {
        Self { cell, action }
    }
}

/// A demonstrated or sampled trajectory ending in a goal state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    /// Cell of the terminal goal state.
    pub terminal: Cell,
    /// Average energy consumption label.
    pub aec: Option<f64>,
}

impl Trajectory {
    /// Builds a trajectory by following `actions` from `start`. The last
    /// action should be `End`.
    pub fn from_actions(mdp: &GridMdp, start: Cell, actions: &[Action]) -> Result<Self, MdpError> {
        let mut steps = Vec::with_capacity(actions.len());
        let mut state = StateId::path(start.row, start.col);
        for &a in actions {
            if state.kind == StateKind::Goal {
                return Err(MdpError::Unavailable { state, action: a });
            }
            steps.push(Step::new(state.cell(), a));
            state = mdp.transition(state, a)?;
        }
        let traj = Trajectory {
            steps,
            terminal: state.cell(),
            aec: None,
        };
        mdp.validate_trajectory(&traj)
            .map_err(MdpError::InvalidTrajectory)?;
        Ok(traj)
    }

    pub fn with_aec(mut self, aec: f64) -> Self {
        self.aec = Some(aec);
        self
    }

    /// Number of path steps, `|τ|`.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn start(&self) -> Cell {
        self.steps[0].cell
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        self.steps.iter().map(|s| s.cell)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    Empty,
    OutOfGrid,
    /// The cell is not the successor of the previous step's action.
    Discontinuous,
    /// `End` appears before the last step.
    EarlyEnd,
    UnavailableAction,
    MissingEnd,
    TerminalMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.kind {
            ViolationKind::Empty => "empty trajectory",
            ViolationKind::OutOfGrid => "cell outside the grid",
            ViolationKind::Discontinuous => "step does not follow from the previous action",
            ViolationKind::EarlyEnd => "End before the last step",
            ViolationKind::UnavailableAction => "action unavailable in this configuration",
            ViolationKind::MissingEnd => "missing terminal End",
            ViolationKind::TerminalMismatch => "terminal is not co-located with the last path cell",
        };
        write!(f, "{what} at index {}", self.index)
    }
}

/// Discounted return `Σ_t γ^t r_p(s_t) + γ^{|τ|} r_g(terminal)`.
pub fn trajectory_return(
    traj: &Trajectory,
    path_reward: &Field,
    goal_reward: &Field,
    gamma: f64,
) -> Result<f64, MdpError> {
    if path_reward.dims() != goal_reward.dims() {
        return Err(MdpError::Dimension {
            rows: path_reward.rows(),
            cols: path_reward.cols(),
            got_rows: goal_reward.rows(),
            got_cols: goal_reward.cols(),
        });
    }
    let mut total = 0.0;
    let mut discount = 1.0;
    for step in &traj.steps {
        if !path_reward.contains(step.cell) {
            return Err(MdpError::OutOfGrid {
                row: step.cell.row,
                col: step.cell.col,
            });
        }
        total += discount * path_reward[step.cell];
        discount *= gamma;
    }
    if !goal_reward.contains(traj.terminal) {
        return Err(MdpError::OutOfGrid {
            row: traj.terminal.row,
            col: traj.terminal.col,
        });
    }
    Ok(total + discount * goal_reward[traj.terminal])
}
