//! Evaluation of learned rewards and policies: demonstration NLL, Hausdorff
//! distance, energy-ranking accuracy, greedy planning, rank correlation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{Cell, Field};
use crate::grid_mdp::{Action, GridMdp, StateId, StateKind, Step, Trajectory};
use crate::irl_solver::{default_sweeps, soft_value_iteration, Policy, SolverError, DEFAULT_TOL};
use crate::ranking::path_return;
use crate::reward_model::{ModelError, RewardMaps, RewardNet};
use crate::sample::{derive_seed, Sample, Split};
use crate::synth::energy_for_cost;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("demonstrated action {action} at step {step} has zero probability")]
    ZeroProbability { step: usize, action: Action },
    #[error("point set is empty")]
    EmptySet,
    #[error("no test pairs with distinct AEC")]
    NoValidPairs,
    #[error("input has {0} values but {1} were expected")]
    LengthMismatch(usize, usize),
    #[error("constant input; rank correlation is undefined")]
    Constant,
    #[error("no test samples")]
    NoTestSamples,
    #[error("sample {id}: {source}")]
    Model { id: String, source: ModelError },
    #[error("sample {id}: {source}")]
    Solver { id: String, source: SolverError },
    #[error("thread pool: {0}")]
    Pool(String),
}

/// Mean per-step `−ln π(a_t | s_t)` including the final End.
pub fn nll(policy: &Policy, traj: &Trajectory) -> Result<f64, MetricError> {
    if traj.is_empty() {
        return Err(MetricError::EmptySet);
    }
    let mut total = 0.0;
    for (t, step) in traj.steps.iter().enumerate() {
        let p = policy.prob(step.cell, step.action);
        if p <= 0.0 {
            return Err(MetricError::ZeroProbability {
                step: t,
                action: step.action,
            });
        }
        total -= p.ln();
    }
    Ok(total / traj.len() as f64)
}

fn dist(a: Cell, b: Cell) -> f64 {
    let dr = a.row as f64 - b.row as f64;
    let dc = a.col as f64 - b.col as f64;
    (dr * dr + dc * dc).sqrt()
}

fn directed(a: &[Cell], b: &[Cell]) -> f64 {
    a.iter()
        .map(|&p| b.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

/// Symmetric Hausdorff distance with Euclidean cell distance.
pub fn hausdorff(a: &[Cell], b: &[Cell]) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::EmptySet);
    }
    Ok(directed(a, b).max(directed(b, a)))
}

/// Fraction of distinct-AEC pairs where the higher predicted return has the
/// smaller AEC. Return ties count as incorrect.
pub fn rank_accuracy(returns: &[f64], aecs: &[f64]) -> Result<f64, MetricError> {
    if returns.len() != aecs.len() {
        return Err(MetricError::LengthMismatch(returns.len(), aecs.len()));
    }
    let (mut valid, mut correct) = (0usize, 0usize);
    for i in 0..aecs.len() {
        for j in i + 1..aecs.len() {
            if aecs[i] == aecs[j] {
                continue;
            }
            valid += 1;
            let (better, worse) = if aecs[i] < aecs[j] { (i, j) } else { (j, i) };
            if returns[better] > returns[worse] {
                correct += 1;
            }
        }
    }
    if valid == 0 {
        return Err(MetricError::NoValidPairs);
    }
    Ok(correct as f64 / valid as f64)
}

fn rollout(
    mdp: &GridMdp,
    start: Cell,
    horizon: usize,
    mut pick: impl FnMut(usize) -> Action,
) -> Trajectory {
    let mut steps = Vec::new();
    let mut state = StateId::path(start.row, start.col);
    loop {
        let idx = mdp.index_of(state.cell());
        let action = if steps.len() + 1 >= horizon.max(1) {
            Action::End
        } else {
            pick(idx)
        };
        steps.push(Step::new(state.cell(), action));
        state = mdp
            .transition(state, action)
            .expect("policy actions are available by construction");
        if state.kind == StateKind::Goal {
            break;
        }
    }
    Trajectory {
        steps,
        terminal: state.cell(),
        aec: None,
    }
}

/// Most-likely rollout; End is forced once the trajectory reaches
/// `horizon` steps.
pub fn plan_path(mdp: &GridMdp, policy: &Policy, start: Cell, horizon: usize) -> Trajectory {
    rollout(mdp, start, horizon, |idx| policy.argmax(mdp, mdp.cell_of(idx)))
}

/// One stochastic rollout of `policy`.
pub fn sample_path(mdp: &GridMdp, policy: &Policy, start: Cell, horizon: usize, rng: &mut ChaCha8Rng) -> Trajectory {
    rollout(mdp, start, horizon, |idx| {
        let row = policy.row(idx);
        let moves = mdp.moves(idx);
        let mut u: f64 = rng.gen();
        for &(a, _) in moves {
            u -= row[a as usize];
            if u <= 0.0 {
                return a;
            }
        }
        // rounding leftovers go to the last available action with mass
        moves
            .iter()
            .rev()
            .find(|(a, _)| row[*a as usize] > 0.0)
            .map_or(moves[0].0, |&(a, _)| a)
    })
}

/// Average ranks (1-based) with ties sharing their mean rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman_slices(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(MetricError::Constant);
    }
    Ok(cov / (va * vb).sqrt())
}

pub fn spearman(learned: &Field, truth: &Field) -> Result<f64, MetricError> {
    spearman_slices(learned.as_slice(), truth.as_slice())
}

/// Test-split summary. Serialized keys are fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean per-step NLL over samples whose demonstration has nonzero
    /// probability.
    pub nll: f64,
    pub hd: f64,
    pub rank_acc: f64,
    pub mean_aec: f64,
    pub spearman: Option<f64>,
    /// Samples whose demonstration had a zero-probability action.
    #[serde(default)]
    pub nll_infinite: usize,
    #[serde(default)]
    pub samples: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "nll,hd,rank_acc,mean_aec,spearman";

    pub fn csv_row(&self) -> String {
        let sp = self.spearman.map_or(String::new(), |s| s.to_string());
        format!("{},{},{},{},{}", self.nll, self.hd, self.rank_acc, self.mean_aec, sp)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub sweeps: Option<usize>,
    pub tol: f64,
    /// Stochastic rollouts per sample for the Hausdorff distance.
    pub rollouts: usize,
    pub seed: u64,
    /// Score the uniform policy instead of the model.
    pub uniform_baseline: bool,
    /// Caps worker threads; `None` reads `TRAV_THREADS`.
    pub threads: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sweeps: None,
            tol: DEFAULT_TOL,
            rollouts: 16,
            seed: 0,
            uniform_baseline: false,
            threads: None,
        }
    }
}

/// Per-sample evaluation quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleEval {
    pub nll: Option<f64>,
    pub hd: f64,
    /// Undiscounted predicted path return of the demonstration.
    pub demo_return: f64,
    pub planned: Trajectory,
    /// Noise-free synthetic AEC of the planned path, or the demonstration's
    /// label when no ground truth is available.
    pub planned_aec: Option<f64>,
    pub spearman: Option<f64>,
}

/// Planning horizon used for greedy and sampled rollouts.
pub fn rollout_horizon(mdp: &GridMdp) -> usize {
    4 * (mdp.rows() + mdp.cols())
}

pub fn evaluate_sample(
    net: &RewardNet,
    mdp: &GridMdp,
    sample: &Sample,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<SampleEval, MetricError> {
    let (rewards, policy) = if cfg.uniform_baseline {
        (RewardMaps::zeros(mdp.rows(), mdp.cols()), Policy::uniform(mdp))
    } else {
        let (maps, _) = net.forward(&sample.features, &sample.imu).map_err(|source| MetricError::Model {
            id: sample.id.clone(),
            source,
        })?;
        let sweeps = cfg.sweeps.unwrap_or_else(|| default_sweeps(mdp));
        let sol = soft_value_iteration(mdp, &maps, sweeps, cfg.tol).map_err(|source| MetricError::Solver {
            id: sample.id.clone(),
            source,
        })?;
        (maps, sol.policy)
    };
    let demo = &sample.trajectory;
    let nll = match nll(&policy, demo) {
        Ok(v) => Some(v),
        Err(MetricError::ZeroProbability { .. }) => None,
        Err(e) => return Err(e),
    };
    let horizon = rollout_horizon(mdp);
    let demo_cells: Vec<Cell> = demo.cells().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hd = 0.0;
    for _ in 0..cfg.rollouts.max(1) {
        let sampled = sample_path(mdp, &policy, demo.start(), horizon, &mut rng);
        let cells: Vec<Cell> = sampled.cells().collect();
        hd += hausdorff(&demo_cells, &cells)?;
    }
    hd /= cfg.rollouts.max(1) as f64;
    let planned = plan_path(mdp, &policy, demo.start(), horizon);
    let planned_aec = match &sample.gt_cost {
        Some(gt) => Some(energy_for_cost(gt, &planned, 0.0, 0).1),
        None => sample.aec(),
    };
    let spearman = match (&sample.gt_cost, cfg.uniform_baseline) {
        (Some(gt), false) => Some(spearman(&rewards.cost(), gt)?),
        _ => None,
    };
    Ok(SampleEval {
        nll,
        hd,
        demo_return: path_return(demo, &rewards.path),
        planned,
        planned_aec,
        spearman,
    })
}

fn thread_cap(cfg: &EvalConfig) -> Option<usize> {
    cfg.threads.or_else(|| {
        std::env::var("TRAV_THREADS")
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .filter(|&n: &usize| n > 0)
    })
}

/// Evaluates every sample on the test split, in parallel.
pub fn evaluate_all(net: &RewardNet, mdp: &GridMdp, samples: &[Sample], cfg: &EvalConfig) -> Result<Vec<SampleEval>, MetricError> {
    let test: Vec<(usize, &Sample)> = samples.iter().enumerate().filter(|(_, s)| s.split == Split::Test).collect();
    if test.is_empty() {
        return Err(MetricError::NoTestSamples);
    }
    let run = || {
        test.par_iter()
            .map(|&(i, s)| evaluate_sample(net, mdp, s, cfg, derive_seed(cfg.seed, 20, i as u64)))
            .collect::<Result<Vec<_>, _>>()
    };
    match thread_cap(cfg) {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| MetricError::Pool(e.to_string()))?
            .install(run),
        None => run(),
    }
}

pub fn summarize(evals: &[SampleEval], aecs: &[f64]) -> Result<EvalReport, MetricError> {
    if evals.is_empty() {
        return Err(MetricError::NoTestSamples);
    }
    let n = evals.len() as f64;
    let finite: Vec<f64> = evals.iter().filter_map(|e| e.nll).collect();
    let nll = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    let returns: Vec<f64> = evals.iter().map(|e| e.demo_return).collect();
    let rank_acc = rank_accuracy(&returns, aecs)?;
    let planned: Vec<f64> = evals.iter().filter_map(|e| e.planned_aec).collect();
    let mean_aec = if planned.is_empty() {
        0.0
    } else {
        planned.iter().sum::<f64>() / planned.len() as f64
    };
    let sp: Vec<f64> = evals.iter().filter_map(|e| e.spearman).collect();
    Ok(EvalReport {
        nll,
        hd: evals.iter().map(|e| e.hd).sum::<f64>() / n,
        rank_acc,
        mean_aec,
        spearman: (!sp.is_empty()).then(|| sp.iter().sum::<f64>() / sp.len() as f64),
        nll_infinite: evals.len() - finite.len(),
        samples: evals.len(),
    })
}

/// Full test-split evaluation. Rank accuracy needs AEC labels on the test
/// samples.
pub fn evaluate(net: &RewardNet, mdp: &GridMdp, samples: &[Sample], cfg: &EvalConfig) -> Result<EvalReport, MetricError> {
    let evals = evaluate_all(net, mdp, samples, cfg)?;
    let aecs: Vec<f64> = samples
        .iter()
        .filter(|s| s.split == Split::Test)
        .map(|s| s.aec().unwrap_or(f64::NAN))
        .collect();
    if aecs.iter().any(|a| a.is_nan()) {
        return Err(MetricError::NoValidPairs);
    }
    summarize(&evals, &aecs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_mdp::GridSpec;

    fn cells(v: &[(usize, usize)]) -> Vec<Cell> {
        v.iter().map(|&(r, c)| Cell::new(r, c)).collect()
    }

    #[test]
    fn nll_uniform_interior() {
        let mdp = GridMdp::new(GridSpec::new(5, 5)).unwrap();
        let policy = Policy::uniform(&mdp);
        let t = Trajectory::from_actions(&mdp, Cell::new(2, 2), &[Action::Up, Action::Down, Action::Right, Action::End]).unwrap();
        assert!((nll(&policy, &t).unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_perfect_and_zero() {
        let mdp = GridMdp::new(GridSpec::new(2, 2)).unwrap();
        let t = Trajectory::from_actions(&mdp, Cell::new(0, 0), &[Action::Right, Action::End]).unwrap();
        let mut probs = vec![[0.0; crate::grid_mdp::MAX_ACTIONS]; 4];
        probs[0][Action::Right as usize] = 1.0;
        probs[1][Action::End as usize] = 1.0;
        let sure = Policy::from_rows(2, 2, probs.clone());
        assert_eq!(nll(&sure, &t).unwrap(), 0.0);
        probs[1][Action::End as usize] = 0.0;
        probs[1][Action::Down as usize] = 1.0;
        let err = nll(&Policy::from_rows(2, 2, probs), &t).unwrap_err();
        assert_eq!(err, MetricError::ZeroProbability { step: 1, action: Action::End });
    }

    #[test]
    fn hausdorff_cases() {
        let a = cells(&[(0, 0), (0, 1)]);
        assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
        assert_eq!(hausdorff(&cells(&[(0, 0)]), &cells(&[(3, 4)])).unwrap(), 5.0);
        assert_eq!(hausdorff(&a, &cells(&[(0, 0)])).unwrap(), 1.0);
        assert_eq!(hausdorff(&[], &a).unwrap_err(), MetricError::EmptySet);
    }

    #[test]
    fn rank_accuracy_cases() {
        let aecs = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(rank_accuracy(&[4.0, 3.0, 2.0, 1.0], &aecs).unwrap(), 1.0);
        assert_eq!(rank_accuracy(&[1.0; 4], &aecs).unwrap(), 0.0);
        assert_eq!(rank_accuracy(&[1.0, 2.0, 3.0, 4.0], &aecs).unwrap(), 0.0);
        assert_eq!(rank_accuracy(&[1.0, 2.0], &[0.5, 0.5]).unwrap_err(), MetricError::NoValidPairs);
        // ties in AEC are skipped, not counted
        assert_eq!(rank_accuracy(&[2.0, 1.0, 0.0], &[0.1, 0.2, 0.2]).unwrap(), 1.0);
    }

    #[test]
    fn plan_path_cases() {
        let mdp = GridMdp::new(GridSpec::new(3, 3)).unwrap();
        let mut probs = vec![[0.0; crate::grid_mdp::MAX_ACTIONS]; 9];
        for row in &mut probs {
            row[Action::End as usize] = 0.6;
        }
        probs[4][Action::End as usize] = 0.2;
        probs[4][Action::Left as usize] = 0.4;
        probs[4][Action::Right as usize] = 0.4;
        let policy = Policy::from_rows(3, 3, probs);
        let t = plan_path(&mdp, &policy, Cell::new(1, 1), 10);
        // tie between Left and Right goes to Left
        assert_eq!(t.cells().collect::<Vec<_>>(), cells(&[(1, 1), (1, 0)]));
        assert_eq!(t.terminal, Cell::new(1, 0));
        assert!(mdp.validate_trajectory(&t).is_ok());
        let forced = plan_path(&mdp, &policy, Cell::new(1, 1), 1);
        assert_eq!(forced.len(), 1);
        assert_eq!(forced.steps[0].action, Action::End);
    }

    #[test]
    fn sampled_paths_are_valid() {
        let mdp = GridMdp::new(GridSpec::new(4, 5)).unwrap();
        let policy = Policy::uniform(&mdp);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let t = sample_path(&mdp, &policy, Cell::new(2, 2), 12, &mut rng);
            assert!(mdp.validate_trajectory(&t).is_ok());
            assert!(t.len() <= 12);
        }
    }

    #[test]
    fn spearman_cases() {
        let gt = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman_slices(&[1.0, 3.0, 2.0, 4.0], &gt).unwrap() - 0.8).abs() < 1e-12);
        assert!((spearman_slices(&gt, &gt).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = gt.iter().map(|v| -v).collect();
        assert!((spearman_slices(&neg, &gt).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(spearman_slices(&[2.0; 4], &gt).unwrap_err(), MetricError::Constant);
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 0.0]), vec![3.5, 2.0, 3.5, 1.0]);
    }
}
