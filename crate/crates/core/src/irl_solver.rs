//! Maximum-entropy soft value iteration, policy propagation and the
//! reward-space MEDIRL gradient.
//!
//! Goal-state values are pinned to the current goal rewards on every sweep,
//! so the solver learns path and goal rewards jointly instead of assuming a
//! fixed absorbing goal.

use thiserror::Error;

use crate::field::{Cell, Field};
use crate::grid_mdp::{Action, GridMdp, MdpError, Successor, Trajectory, MAX_ACTIONS};
use crate::reward_model::RewardMaps;

/// Propagation stops once the path mass left falls below this.
pub const MASS_EPSILON: f64 = 1e-9;

pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("non-finite value at path state ({row}, {col}) in sweep {sweep}")]
    NonFinite { row: usize, col: usize, sweep: usize },
    #[error("at least one sweep is required")]
    NoSweeps,
    #[error("start distribution sums to {0}, expected 1")]
    StartNotNormalized(f64),
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// Default sweep budget: enough for information to cross the grid.
pub fn default_sweeps(mdp: &GridMdp) -> usize {
    2 * (mdp.rows() + mdp.cols())
}

/// Per-path-state action probabilities indexed by action code.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    rows: usize,
    cols: usize,
    probs: Vec<[f64; MAX_ACTIONS]>,
}

impl Policy {
    /// Uniform over the available actions of every path state.
    pub fn uniform(mdp: &GridMdp) -> Self {
        let probs = (0..mdp.cell_count())
            .map(|idx| {
                let moves = mdp.moves(idx);
                let mut row = [0.0; MAX_ACTIONS];
                for &(a, _) in moves {
                    row[a as usize] = 1.0 / moves.len() as f64;
                }
                row
            })
            .collect();
        Self {
            rows: mdp.rows(),
            cols: mdp.cols(),
            probs,
        }
    }

    /// Builds a policy from explicit rows (indexed by action code).
    pub fn from_rows(rows: usize, cols: usize, probs: Vec<[f64; MAX_ACTIONS]>) -> Self {
        assert_eq!(probs.len(), rows * cols);
        Self { rows, cols, probs }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn prob(&self, cell: Cell, action: Action) -> f64 {
        self.probs[cell.row * self.cols + cell.col][action as usize]
    }

    #[inline]
    pub fn row(&self, idx: usize) -> &[f64; MAX_ACTIONS] {
        &self.probs[idx]
    }

    /// Most likely action, ties broken by action code order.
    pub fn argmax(&self, mdp: &GridMdp, cell: Cell) -> Action {
        let row = &self.probs[mdp.index_of(cell)];
        let mut best = (Action::End, f64::NEG_INFINITY);
        for &(a, _) in mdp.moves(mdp.index_of(cell)) {
            let p = row[a as usize];
            if p > best.1 || (p == best.1 && a < best.0) {
                best = (a, p);
            }
        }
        best.0
    }
}

/// Converged (or budget-limited) soft values and the induced policy.
#[derive(Clone, Debug)]
pub struct SoftSolution {
    /// Soft value of every path state.
    pub values: Field,
    pub policy: Policy,
    pub sweeps: usize,
    /// Max absolute value change in the final sweep.
    pub residual: f64,
}

#[inline]
fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

#[inline]
fn successor_value(succ: Successor, values: &[f64], goal: &[f64]) -> f64 {
    match succ {
        Successor::Path(j) => values[j],
        Successor::Goal(j) => goal[j],
    }
}

/// Soft value iteration with goal values pinned to `r_g`.
///
/// Starts from `V_0(s) = r_p(s) + γ r_g(s)` and applies
/// `V_k(s) = r_p(s) + logsumexp_a γ V_{k-1}(T(s, a))` for at most `sweeps`
/// sweeps, stopping early once the max change drops below `tol`.
pub fn soft_value_iteration(
    mdp: &GridMdp,
    rewards: &RewardMaps,
    sweeps: usize,
    tol: f64,
) -> Result<SoftSolution, SolverError> {
    if sweeps == 0 {
        return Err(SolverError::NoSweeps);
    }
    mdp.check_field(&rewards.path)?;
    mdp.check_field(&rewards.goal)?;
    let gamma = mdp.gamma();
    let rp = rewards.path.as_slice();
    let rg = rewards.goal.as_slice();
    let n = mdp.cell_count();

    let mut values: Vec<f64> = (0..n).map(|i| rp[i] + gamma * rg[i]).collect();
    check_finite(mdp, &values, 0)?;
    let mut next = vec![0.0; n];
    let mut scores = [0.0; MAX_ACTIONS];
    let mut residual = f64::INFINITY;
    let mut done = 0;
    for sweep in 1..=sweeps {
        residual = 0.0;
        for (i, slot) in next.iter_mut().enumerate() {
            let moves = mdp.moves(i);
            for (k, &(_, succ)) in moves.iter().enumerate() {
                scores[k] = gamma * successor_value(succ, &values, rg);
            }
            *slot = rp[i] + log_sum_exp(&scores[..moves.len()]);
            residual = f64::max(residual, (*slot - values[i]).abs());
        }
        std::mem::swap(&mut values, &mut next);
        check_finite(mdp, &values, sweep)?;
        done = sweep;
        if residual < tol {
            break;
        }
    }

    let policy = extract_policy(mdp, &values, rg);
    Ok(SoftSolution {
        values: Field::from_vec(mdp.rows(), mdp.cols(), values),
        policy,
        sweeps: done,
        residual,
    })
}

fn check_finite(mdp: &GridMdp, values: &[f64], sweep: usize) -> Result<(), SolverError> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => {
            let c = mdp.cell_of(i);
            Err(SolverError::NonFinite {
                row: c.row,
                col: c.col,
                sweep,
            })
        }
    }
}

fn extract_policy(mdp: &GridMdp, values: &[f64], goal: &[f64]) -> Policy {
    let gamma = mdp.gamma();
    let mut scores = [0.0; MAX_ACTIONS];
    let probs = (0..mdp.cell_count())
        .map(|i| {
            let moves = mdp.moves(i);
            for (k, &(_, succ)) in moves.iter().enumerate() {
                scores[k] = gamma * successor_value(succ, values, goal);
            }
            let lse = log_sum_exp(&scores[..moves.len()]);
            let mut row = [0.0; MAX_ACTIONS];
            for (k, &(a, _)) in moves.iter().enumerate() {
                row[a as usize] = (scores[k] - lse).exp();
            }
            row
        })
        .collect();
    Policy {
        rows: mdp.rows(),
        cols: mdp.cols(),
        probs,
    }
}

/// Path and goal visitation weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Visitation {
    pub path: Field,
    pub goal: Field,
}

impl Visitation {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            path: Field::zeros(rows, cols),
            goal: Field::zeros(rows, cols),
        }
    }
}

/// Demonstrated and expected visitation frequencies for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SvfPair {
    pub demo: Visitation,
    pub expected: Visitation,
}

/// Visitation weights of a single demonstration. With `discount` each visit
/// at step `t` weighs `γ^t` and the goal `γ^{|τ|}`; otherwise every visit
/// weighs 1.
pub fn demo_svf(mdp: &GridMdp, traj: &Trajectory, discount: bool) -> Result<Visitation, SolverError> {
    mdp.validate_trajectory(traj)
        .map_err(|v| SolverError::Mdp(MdpError::InvalidTrajectory(v)))?;
    let gamma = if discount { mdp.gamma() } else { 1.0 };
    let mut out = Visitation::zeros(mdp.rows(), mdp.cols());
    let mut w = 1.0;
    for step in &traj.steps {
        out.path[step.cell] += w;
        w *= gamma;
    }
    out.goal[traj.terminal] += w;
    Ok(out)
}

/// Expected visitation plus the path mass still unabsorbed at the horizon.
#[derive(Clone, Debug)]
pub struct Propagation {
    pub svf: Visitation,
    /// Probability mass (undiscounted) still on path states.
    pub remaining_mass: f64,
    /// Number of propagation steps actually taken.
    pub steps: usize,
}

/// Forward-propagates `start` through `policy` for up to `horizon` steps.
pub fn policy_propagation(
    mdp: &GridMdp,
    policy: &Policy,
    start: &Field,
    horizon: usize,
    discount: bool,
) -> Result<Propagation, SolverError> {
    if horizon == 0 {
        return Err(SolverError::ZeroHorizon);
    }
    mdp.check_field(start)?;
    let total = start.sum();
    if (total - 1.0).abs() > 1e-9 || start.as_slice().iter().any(|&v| v < 0.0) {
        return Err(SolverError::StartNotNormalized(total));
    }
    let gamma = if discount { mdp.gamma() } else { 1.0 };
    let n = mdp.cell_count();
    let mut svf = Visitation::zeros(mdp.rows(), mdp.cols());
    let mut mass = start.as_slice().to_vec();
    let mut next = vec![0.0; n];
    let mut remaining = total;
    let mut w = 1.0;
    let mut steps = 0;
    for _ in 0..horizon {
        steps += 1;
        next.iter_mut().for_each(|v| *v = 0.0);
        let path = svf.path.as_mut_slice();
        let goal = svf.goal.as_mut_slice();
        for i in 0..n {
            let d = mass[i];
            if d == 0.0 {
                continue;
            }
            path[i] += w * d;
            let row = policy.row(i);
            for &(a, succ) in mdp.moves(i) {
                let p = row[a as usize];
                match succ {
                    Successor::Path(j) => next[j] += d * p,
                    Successor::Goal(j) => goal[j] += w * gamma * d * p,
                }
            }
        }
        std::mem::swap(&mut mass, &mut next);
        remaining = mass.iter().sum();
        w *= gamma;
        if remaining < MASS_EPSILON {
            break;
        }
    }
    Ok(Propagation {
        svf,
        remaining_mass: remaining,
        steps,
    })
}

/// Point mass on `cell`.
pub fn point_start(mdp: &GridMdp, cell: Cell) -> Field {
    let mut f = Field::zeros(mdp.rows(), mdp.cols());
    f[cell] = 1.0;
    f
}

/// Reward-space ascent direction `D_τ − D_r` for path and goal maps.
pub fn medirl_grad(svf: &SvfPair) -> Result<RewardMaps, SolverError> {
    let mismatch = |a: &Field, b: &Field| {
        SolverError::Mdp(MdpError::Dimension {
            rows: a.rows(),
            cols: a.cols(),
            got_rows: b.rows(),
            got_cols: b.cols(),
        })
    };
    let path = svf
        .demo
        .path
        .sub(&svf.expected.path)
        .ok_or_else(|| mismatch(&svf.demo.path, &svf.expected.path))?;
    let goal = svf
        .demo
        .goal
        .sub(&svf.expected.goal)
        .ok_or_else(|| mismatch(&svf.demo.goal, &svf.expected.goal))?;
    if path.dims() != goal.dims() {
        return Err(mismatch(&path, &goal));
    }
    Ok(RewardMaps { path, goal })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_mdp::GridSpec;

    fn maps(rows: usize, cols: usize, rp: Vec<f64>, rg: Vec<f64>) -> RewardMaps {
        RewardMaps {
            path: Field::from_vec(rows, cols, rp),
            goal: Field::from_vec(rows, cols, rg),
        }
    }

    #[test]
    fn single_cell_value() {
        let mdp = GridMdp::new(GridSpec::new(1, 1).with_gamma(0.5)).unwrap();
        let sol = soft_value_iteration(&mdp, &maps(1, 1, vec![-1.0], vec![2.0]), 10, 0.0).unwrap();
        assert!(sol.values.as_slice()[0].abs() < 1e-15);
        assert_eq!(sol.policy.prob(Cell::new(0, 0), Action::End), 1.0);
    }

    #[test]
    fn two_cells_one_sweep() {
        let mdp = GridMdp::new(GridSpec::oracle(1, 2)).unwrap();
        let sol =
            soft_value_iteration(&mdp, &maps(1, 2, vec![0.0; 2], vec![0.0; 2]), 1, 0.0).unwrap();
        assert!((sol.values.as_slice()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(sol.sweeps, 1);
    }

    #[test]
    fn equal_scores_give_uniform_policy() {
        let mdp = GridMdp::new(GridSpec::new(3, 3)).unwrap();
        let policy = extract_policy(&mdp, &[1.7; 9], &[1.7; 9]);
        for i in 0..9 {
            let n = mdp.moves(i).len() as f64;
            for &(a, _) in mdp.moves(i) {
                assert!((policy.row(i)[a as usize] - 1.0 / n).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn policy_rows_normalized_under_large_rewards() {
        let mdp = GridMdp::new(GridSpec::new(6, 7)).unwrap();
        let rp: Vec<f64> = (0..42).map(|i| if i % 3 == 0 { 1e3 } else { -1e3 }).collect();
        let rg: Vec<f64> = (0..42).map(|i| if i % 5 == 0 { 1e3 } else { -7e2 }).collect();
        let sol = soft_value_iteration(&mdp, &maps(6, 7, rp, rg), 200, 1e-9).unwrap();
        assert!(sol.values.is_finite());
        for i in 0..42 {
            let s: f64 = sol.policy.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn overflow_is_reported() {
        let mdp = GridMdp::new(GridSpec::new(2, 2)).unwrap();
        let err = soft_value_iteration(&mdp, &maps(2, 2, vec![f64::MAX; 4], vec![f64::MAX; 4]), 5, 0.0)
            .unwrap_err();
        assert!(matches!(err, SolverError::NonFinite { .. }));
    }

    #[test]
    fn demo_svf_weights() {
        let mdp = GridMdp::new(GridSpec::oracle(2, 2)).unwrap();
        let traj = Trajectory::from_actions(&mdp, Cell::new(0, 0), &[Action::Right, Action::End]).unwrap();
        let v = demo_svf(&mdp, &traj, true).unwrap();
        assert_eq!(v.path.as_slice(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(v.goal.as_slice(), &[0.0, 1.0, 0.0, 0.0]);

        let mdp9 = GridMdp::new(GridSpec::new(2, 2).with_gamma(0.9)).unwrap();
        let v = demo_svf(&mdp9, &traj, true).unwrap();
        assert_eq!(v.path.as_slice(), &[1.0, 0.9, 0.0, 0.0]);
        assert!((v.goal.as_slice()[1] - 0.81).abs() < 1e-15);
        let plain = demo_svf(&mdp9, &traj, false).unwrap();
        assert_eq!(plain.goal.as_slice()[1], 1.0);

        let loop_traj = Trajectory::from_actions(
            &mdp,
            Cell::new(0, 0),
            &[Action::Right, Action::Left, Action::End],
        )
        .unwrap();
        assert_eq!(demo_svf(&mdp, &loop_traj, true).unwrap().path.as_slice()[0], 2.0);
    }

    #[test]
    fn always_end_absorbs_immediately() {
        let mdp = GridMdp::new(GridSpec::oracle(2, 2)).unwrap();
        let mut rows = vec![[0.0; MAX_ACTIONS]; 4];
        for r in &mut rows {
            r[Action::End as usize] = 1.0;
        }
        let policy = Policy::from_rows(2, 2, rows);
        let prop = policy_propagation(&mdp, &policy, &point_start(&mdp, Cell::new(0, 0)), 5, true).unwrap();
        assert_eq!(prop.svf.path.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(prop.svf.goal.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(prop.remaining_mass, 0.0);
        assert_eq!(prop.steps, 1);
    }

    #[test]
    fn propagation_rejects_bad_start() {
        let mdp = GridMdp::new(GridSpec::new(2, 2)).unwrap();
        let policy = Policy::uniform(&mdp);
        let start = Field::filled(2, 2, 0.5);
        assert!(matches!(
            policy_propagation(&mdp, &policy, &start, 3, true),
            Err(SolverError::StartNotNormalized(_))
        ));
        assert_eq!(
            policy_propagation(&mdp, &policy, &point_start(&mdp, Cell::new(0, 0)), 0, true).unwrap_err(),
            SolverError::ZeroHorizon
        );
    }

    #[test]
    fn mass_is_conserved_each_step() {
        let mdp = GridMdp::new(GridSpec::oracle(3, 3)).unwrap();
        let rp: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).sin()).collect();
        let rg: Vec<f64> = (0..9).map(|i| (i as f64 * 1.3).cos()).collect();
        let sol = soft_value_iteration(&mdp, &maps(3, 3, rp, rg), 4, 0.0).unwrap();
        let start = point_start(&mdp, Cell::new(1, 1));
        for horizon in 1..30 {
            let prop = policy_propagation(&mdp, &sol.policy, &start, horizon, false).unwrap();
            let absorbed = prop.svf.goal.sum();
            assert!((absorbed + prop.remaining_mass - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn medirl_grad_arithmetic() {
        let demo = Visitation {
            path: Field::from_vec(1, 2, vec![1.0, 0.0]),
            goal: Field::from_vec(1, 2, vec![0.0, 1.0]),
        };
        let expected = Visitation {
            path: Field::from_vec(1, 2, vec![0.25, 0.0]),
            goal: Field::from_vec(1, 2, vec![0.0, 1.0]),
        };
        let g = medirl_grad(&SvfPair {
            demo: demo.clone(),
            expected,
        })
        .unwrap();
        assert_eq!(g.path.as_slice(), &[0.75, 0.0]);
        let zero = medirl_grad(&SvfPair {
            demo: demo.clone(),
            expected: demo.clone(),
        })
        .unwrap();
        assert!(zero.path.as_slice().iter().chain(zero.goal.as_slice()).all(|&v| v == 0.0));
        let bad = SvfPair {
            demo,
            expected: Visitation::zeros(2, 2),
        };
        assert!(medirl_grad(&bad).is_err());
    }

    #[test]
    fn raising_goal_reward_raises_end_probability() {
        let mdp = GridMdp::new(GridSpec::new(4, 4)).unwrap();
        let rp: Vec<f64> = (0..16).map(|i| -0.5 - 0.1 * (i % 4) as f64).collect();
        let rg: Vec<f64> = (0..16).map(|i| 0.2 * (i % 3) as f64).collect();
        let base = maps(4, 4, rp.clone(), rg.clone());
        let before = soft_value_iteration(&mdp, &base, 50, 1e-12).unwrap();
        for target in 0..16 {
            let mut rg2 = rg.clone();
            rg2[target] += 0.8;
            let after = soft_value_iteration(&mdp, &maps(4, 4, rp.clone(), rg2), 50, 1e-12).unwrap();
            let cell = mdp.cell_of(target);
            assert!(
                after.policy.prob(cell, Action::End) >= before.policy.prob(cell, Action::End) - 1e-15
            );
        }
    }
}
