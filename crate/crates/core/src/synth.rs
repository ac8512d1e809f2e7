//! Synthetic terrain, demonstrations, IMU windows and joint-energy logs with
//! known ground-truth traversability cost.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::field::{Cell, Field};
use crate::grid_mdp::{Action, GridMdp, GridSpec, StateId, StateKind, Step, Trajectory, MAX_ACTIONS};
use crate::irl_solver::{soft_value_iteration, SolverError};
use crate::ranking::{aec, trajectory_energy, JointLog};
use crate::reward_model::{
    FeatureStack, ImuWindow, RewardMaps, CH_BLUE, CH_ELEVATION, CH_GREEN, CH_RED, CH_VARIANCE, IMU_CHANNELS,
};
use crate::sample::{derive_seed, Sample, Split};

/// Ground-truth cost `c0 + c1·variance + c2·slope + c_obs·[obstacle]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub base: f64,
    pub variance: f64,
    pub slope: f64,
    pub obstacle: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            base: 0.2,
            variance: 5.0,
            slope: 2.0,
            obstacle: 10.0,
        }
    }
}

/// Energy per step is `ENERGY_PER_COST · gt_cost(cell)` plus noise.
pub const ENERGY_PER_COST: f64 = 0.05;
pub const JOINTS: usize = 12;
pub const GRAVITY: f64 = 9.81;
/// Variance bump added on obstacle cells.
pub const OBSTACLE_BUMP: f64 = 0.5;
/// Variance above which a non-obstacle cell is colored as rough.
pub const ROUGH_VARIANCE: f64 = 0.1;
const COLOR_JITTER: f64 = 0.05;
/// Color of the demonstrator's target cell.
pub const BEACON: [f64; 3] = [1.0, 1.0, 1.0];
/// The demonstrator plans with soft values at this temperature, which is
/// close to optimal planning.
pub const PLANNING_TEMPERATURE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    /// Fraction of cells covered by obstacles.
    pub obstacle_density: f64,
    /// Scales elevation relief, hence slope and variance.
    pub roughness: f64,
    /// Demonstrator action temperature; 0 is greedy.
    pub beta: f64,
    /// Std of the per-step energy noise.
    pub energy_noise: f64,
    /// IMU window length `T`.
    pub imu_len: usize,
    /// Bonus of the demonstrator's target goal cell.
    pub goal_bonus: f64,
    /// Manhattan distance range of the target from the start.
    pub goal_distance: (usize, usize),
    /// Paint the demonstrator's target with [`BEACON`] in the color channels.
    pub beacon: bool,
    pub gamma: f64,
    pub costs: CostModel,
}

impl WorldSpec {
    pub fn new(rows: usize, cols: usize, seed: u64) -> Self {
        Self {
            rows,
            cols,
            seed,
            obstacle_density: 0.1,
            roughness: 2.0,
            beta: 0.0,
            energy_noise: 0.0,
            imu_len: 32,
            goal_bonus: 40.0,
            goal_distance: (4, 10),
            beacon: true,
            gamma: crate::grid_mdp::DEFAULT_GAMMA,
            costs: CostModel::default(),
        }
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::new(self.rows, self.cols).with_gamma(self.gamma)
    }

    /// Robot-centric start cell.
    pub fn start(&self) -> Cell {
        Cell::new(self.rows / 2, self.cols / 2)
    }
}

/// A generated terrain with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub features: FeatureStack,
    pub gt_cost: Field,
    pub slope: Field,
    pub obstacles: Vec<bool>,
}

/// Bilinear value noise over a lattice with the given spacing, in `[0, 1]`.
fn value_noise(rows: usize, cols: usize, spacing: usize, rng: &mut ChaCha8Rng) -> Field {
    let lr = rows / spacing + 2;
    let lc = cols / spacing + 2;
    let lattice: Vec<f64> = (0..lr * lc).map(|_| rng.gen::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    Field::from_fn(rows, cols, |c| {
        let y = c.row as f64 / spacing as f64;
        let x = c.col as f64 / spacing as f64;
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (ty, tx) = (smooth(y - y0 as f64), smooth(x - x0 as f64));
        let at = |r: usize, q: usize| lattice[r * lc + q];
        let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
        let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

/// Central-difference gradient magnitude (one-sided at borders).
fn slope_of(elev: &Field) -> Field {
    let (rows, cols) = elev.dims();
    Field::from_fn(rows, cols, |c| {
        let diff = |lo: f64, hi: f64, span: f64| if span > 0.0 { (hi - lo) / span } else { 0.0 };
        let r0 = c.row.saturating_sub(1);
        let r1 = (c.row + 1).min(rows - 1);
        let c0 = c.col.saturating_sub(1);
        let c1 = (c.col + 1).min(cols - 1);
        let dy = diff(elev[Cell::new(r0, c.col)], elev[Cell::new(r1, c.col)], (r1 - r0) as f64);
        let dx = diff(elev[Cell::new(c.row, c0)], elev[Cell::new(c.row, c1)], (c1 - c0) as f64);
        (dy * dy + dx * dx).sqrt()
    })
}

pub fn gen_world(spec: &WorldSpec) -> World {
    let (rows, cols) = (spec.rows, spec.cols);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 1, 0));
    let coarse = value_noise(rows, cols, 6, &mut rng);
    let fine = value_noise(rows, cols, 3, &mut rng);
    let elevation = Field::from_fn(rows, cols, |c| spec.roughness * (coarse[c] + 0.5 * fine[c]));
    let slope = slope_of(&elevation);

    let blobs = value_noise(rows, cols, 3, &mut rng);
    let obstacle_count = (spec.obstacle_density.clamp(0.0, 1.0) * (rows * cols) as f64).round() as usize;
    let mut order: Vec<usize> = (0..rows * cols).collect();
    order.sort_by(|&a, &b| blobs.as_slice()[b].total_cmp(&blobs.as_slice()[a]).then(a.cmp(&b)));
    let mut obstacles = vec![false; rows * cols];
    for &i in order.iter().take(obstacle_count) {
        obstacles[i] = true;
    }

    let variance = Field::from_fn(rows, cols, |c| {
        let i = c.row * cols + c.col;
        spec.roughness * slope[c] + if obstacles[i] { OBSTACLE_BUMP } else { 0.0 }
    });
    let costs = spec.costs;
    let gt_cost = Field::from_fn(rows, cols, |c| {
        let i = c.row * cols + c.col;
        costs.base
            + costs.variance * variance[c]
            + costs.slope * slope[c]
            + if obstacles[i] { costs.obstacle } else { 0.0 }
    });

    let mut features = FeatureStack::zeros(rows, cols);
    for idx in 0..rows * cols {
        let c = Cell::new(idx / cols, idx % cols);
        features.set(CH_ELEVATION, c, elevation[c]);
        features.set(CH_VARIANCE, c, variance[c]);
        let base = if obstacles[idx] {
            [0.1, 0.08, 0.06]
        } else if variance[c] > ROUGH_VARIANCE {
            [0.4, 0.3, 0.15]
        } else {
            [0.15, 0.4, 0.1]
        };
        for (ch, b) in [CH_RED, CH_GREEN, CH_BLUE].into_iter().zip(base) {
            let jitter = rng.gen_range(-COLOR_JITTER..=COLOR_JITTER);
            features.set(ch, c, (b + jitter).clamp(0.0, 1.0));
        }
    }
    World {
        spec: *spec,
        features,
        gt_cost,
        slope,
        obstacles,
    }
}

/// The demonstrator's goal bonus: one seeded target cell whose Manhattan
/// distance from `start` lies in `goal_distance` (the start itself if no
/// cell qualifies).
pub fn goal_bonus(spec: &WorldSpec, start: Cell, seed: u64) -> Field {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = spec.goal_distance;
    let dist = |c: Cell| c.row.abs_diff(start.row) + c.col.abs_diff(start.col);
    let candidates: Vec<Cell> = (0..spec.rows * spec.cols)
        .map(|i| Cell::new(i / spec.cols, i % spec.cols))
        .filter(|&c| (lo..=hi).contains(&dist(c)))
        .collect();
    let target = if candidates.is_empty() {
        start
    } else {
        candidates[rng.gen_range(0..candidates.len())]
    };
    let mut bonus = Field::zeros(spec.rows, spec.cols);
    bonus[target] = spec.goal_bonus;
    bonus
}

/// Paints every cell with a positive bonus in the beacon color.
pub fn mark_goal(features: &mut FeatureStack, bonus: &Field) {
    for (i, &b) in bonus.as_slice().iter().enumerate() {
        if b > 0.0 {
            let c = bonus.cell_of(i);
            for (ch, v) in [CH_RED, CH_GREEN, CH_BLUE].into_iter().zip(BEACON) {
                features.set(ch, c, v);
            }
        }
    }
}

/// Action scores `γ V(T(s, a))` of the demonstrator, per cell and action code.
pub fn demonstrator_scores(mdp: &GridMdp, rewards: &RewardMaps) -> Result<Vec<[f64; MAX_ACTIONS]>, SolverError> {
    let t = PLANNING_TEMPERATURE;
    let scaled = RewardMaps {
        path: rewards.path.map(|v| v / t),
        goal: rewards.goal.map(|v| v / t),
    };
    let sweeps = 4 * (mdp.rows() + mdp.cols());
    let sol = soft_value_iteration(mdp, &scaled, sweeps, 1e-9)?;
    let gamma = mdp.gamma();
    Ok((0..mdp.cell_count())
        .map(|i| {
            let mut q = [f64::NEG_INFINITY; MAX_ACTIONS];
            for &(a, succ) in mdp.moves(i) {
                let v = match succ {
                    crate::grid_mdp::Successor::Path(j) => t * sol.values.as_slice()[j],
                    crate::grid_mdp::Successor::Goal(j) => rewards.goal.as_slice()[j],
                };
                q[a as usize] = gamma * v;
            }
            q
        })
        .collect())
}

/// Picks an action from scores with temperature `beta` (0 = argmax, ties by
/// action order).
fn choose(mdp: &GridMdp, idx: usize, q: &[f64; MAX_ACTIONS], beta: f64, rng: &mut ChaCha8Rng) -> Action {
    let moves = mdp.moves(idx);
    if beta <= 0.0 {
        let mut best = moves[0].0;
        for &(a, _) in moves {
            let (qa, qb) = (q[a as usize], q[best as usize]);
            if qa > qb || (qa == qb && a < best) {
                best = a;
            }
        }
        return best;
    }
    let m = moves.iter().map(|&(a, _)| q[a as usize] / beta).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = moves.iter().map(|&(a, _)| (q[a as usize] / beta - m).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (k, &(a, _)) in moves.iter().enumerate() {
        u -= weights[k];
        if u <= 0.0 {
            return a;
        }
    }
    moves[moves.len() - 1].0
}

/// Rolls out the demonstrator from `start`; End is forced at the horizon
/// cap `4·(rows + cols)`.
pub fn gen_demo_with_bonus(
    world: &World,
    bonus: &Field,
    start: Cell,
    beta: f64,
    seed: u64,
) -> Result<Trajectory, SolverError> {
    let mdp = GridMdp::new(world.spec.grid())?;
    let rewards = RewardMaps {
        path: world.gt_cost.map(|c| -c),
        goal: bonus.clone(),
    };
    let scores = demonstrator_scores(&mdp, &rewards)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = 4 * (mdp.rows() + mdp.cols());
    let mut steps = Vec::new();
    let mut state = StateId::path(start.row, start.col);
    loop {
        let idx = mdp.index_of(state.cell());
        let action = if steps.len() + 1 >= cap {
            Action::End
        } else {
            choose(&mdp, idx, &scores[idx], beta, &mut rng)
        };
        steps.push(Step::new(state.cell(), action));
        state = mdp.transition(state, action)?;
        if state.kind == StateKind::Goal {
            break;
        }
    }
    Ok(Trajectory {
        steps,
        terminal: state.cell(),
        aec: None,
    })
}

pub fn gen_demo(world: &World, start: Cell, beta: f64, seed: u64) -> Result<Trajectory, SolverError> {
    let bonus = goal_bonus(&world.spec, start, derive_seed(seed, 2, 0));
    gen_demo_with_bonus(world, &bonus, start, beta, seed)
}

/// Gaussian IMU window whose spread grows with the roughness underfoot.
pub fn gen_imu(world: &World, traj: &Trajectory, len: usize, seed: u64) -> ImuWindow {
    let variance = world.features.channel(CH_VARIANCE);
    let cols = world.spec.cols;
    let mean_var = traj.cells().map(|c| variance[c.row * cols + c.col]).sum::<f64>() / traj.len() as f64;
    let std = 0.05 + 0.5 * mean_var;
    let noise = Normal::new(0.0, std).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(len * IMU_CHANNELS);
    for _ in 0..len {
        for ch in 0..IMU_CHANNELS {
            let offset = if ch == 2 { GRAVITY } else { 0.0 };
            data.push(offset + noise.sample(&mut rng));
        }
    }
    ImuWindow::new(len, data).expect("generated IMU window is well formed")
}

/// Joint log whose per-step energy is `k·gt_cost + ε` (ε truncated so the
/// step energy stays non-negative), and the resulting AEC.
pub fn gen_energy(world: &World, traj: &Trajectory, noise_std: f64, seed: u64) -> (JointLog, f64) {
    energy_for_cost(&world.gt_cost, traj, noise_std, seed)
}

/// [`gen_energy`] against a bare cost field.
pub fn energy_for_cost(gt_cost: &Field, traj: &Trajectory, noise_std: f64, seed: u64) -> (JointLog, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (noise_std > 0.0).then(|| Normal::new(0.0, noise_std).expect("finite std"));
    let pattern: Vec<f64> = (0..JOINTS)
        .map(|j| {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            sign * 0.01 * (1 + j % 3) as f64
        })
        .collect();
    let norm: f64 = pattern.iter().map(|q| q.abs()).sum();
    let mut torques = Vec::with_capacity(traj.len() * JOINTS);
    let mut displacements = Vec::with_capacity(traj.len() * JOINTS);
    for (t, cell) in traj.cells().enumerate() {
        let eps = noise.as_ref().map_or(0.0, |n| n.sample(&mut rng));
        let target = (ENERGY_PER_COST * gt_cost[cell] + eps).max(0.0);
        let scale = target / norm;
        for (j, &q) in pattern.iter().enumerate() {
            // alternate torque signs so the log is not trivially positive
            let sign = if (t + j) % 3 == 0 { -1.0 } else { 1.0 };
            torques.push(sign * scale);
            displacements.push(q);
        }
    }
    let log = JointLog::new(traj.len(), JOINTS, torques, displacements).expect("well-formed joint log");
    let value = aec(trajectory_energy(&log), traj.len()).expect("trajectory is non-empty");
    (log, value)
}

/// `count` samples with distinct world seeds; the first
/// `round(count·train_ratio)` are tagged train.
pub fn gen_dataset(spec: &WorldSpec, count: usize, train_ratio: f64) -> Result<Vec<Sample>, SolverError> {
    let n_train = train_count(count, train_ratio);
    (0..count)
        .map(|i| {
            let i64 = i as u64;
            let mut ws = *spec;
            ws.seed = derive_seed(spec.seed, 10, i64);
            let mut world = gen_world(&ws);
            let start = ws.start();
            let demo_seed = derive_seed(spec.seed, 11, i64);
            let bonus = goal_bonus(&ws, start, derive_seed(demo_seed, 2, 0));
            let mut traj = gen_demo_with_bonus(&world, &bonus, start, spec.beta, demo_seed)?;
            if spec.beacon {
                mark_goal(&mut world.features, &bonus);
            }
            let imu = gen_imu(&world, &traj, spec.imu_len, derive_seed(spec.seed, 12, i64));
            let (_, label) = gen_energy(&world, &traj, spec.energy_noise, derive_seed(spec.seed, 13, i64));
            traj.aec = Some(label);
            Ok(Sample {
                id: format!("s{i:05}"),
                features: world.features,
                imu,
                trajectory: traj,
                gt_cost: Some(world.gt_cost),
                split: if i < n_train { Split::Train } else { Split::Test },
            })
        })
        .collect()
}

pub fn train_count(count: usize, train_ratio: f64) -> usize {
    ((count as f64 * train_ratio.clamp(0.0, 1.0)).round() as usize).min(count)
}
