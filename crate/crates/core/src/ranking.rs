//! Locomotion energy, average energy consumption (AEC) labels, rank pairs
//! and the pairwise trajectory ranking loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::field::Field;
use crate::grid_mdp::Trajectory;

#[derive(Debug, Error, PartialEq)]
pub enum RankingError {
    #[error("torques are {0:?} but displacements are {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("joint log data length does not match {0}x{1}")]
    BadLength(usize, usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("trajectory length must be at least 1")]
    ZeroLength,
    #[error("need at least two distinct AEC labels to form rank pairs")]
    NotEnoughDistinct,
    #[error("trajectory {0} has no AEC label")]
    MissingLabel(usize),
}

/// Joint torques (N·m) and joint displacements (rad) per time stamp,
/// both `samples × joints`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct JointLog {
    samples: usize,
    joints: usize,
    torques: Vec<f64>,
    displacements: Vec<f64>,
}

impl JointLog {
    pub fn new(
        samples: usize,
        joints: usize,
        torques: Vec<f64>,
        displacements: Vec<f64>,
    ) -> Result<Self, RankingError> {
        if torques.len() != samples * joints || displacements.len() != samples * joints {
            return Err(RankingError::BadLength(samples, joints));
        }
        if torques.iter().chain(&displacements).any(|v| !v.is_finite()) {
            return Err(RankingError::NonFinite("joint log"));
        }
        Ok(Self {
            samples,
            joints,
            torques,
            displacements,
        })
    }

    /// From per-stamp rows; the two row sets must have identical shapes.
    pub fn from_rows(torques: &[Vec<f64>], displacements: &[Vec<f64>]) -> Result<Self, RankingError> {
        let shape = |rows: &[Vec<f64>]| (rows.len(), rows.first().map_or(0, Vec::len));
        let (ts, ds) = (shape(torques), shape(displacements));
        let ragged = |rows: &[Vec<f64>], m: usize| rows.iter().any(|r| r.len() != m);
        if ts != ds || ragged(torques, ts.1) || ragged(displacements, ds.1) {
            return Err(RankingError::ShapeMismatch(ts, ds));
        }
        Self::new(ts.0, ts.1, torques.concat(), displacements.concat())
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn torques(&self) -> &[f64] {
        &self.torques
    }

    pub fn displacements(&self) -> &[f64] {
        &self.displacements
    }
}

/// `e = Σ_i ⟨|u_i|, |Δq_i|⟩` over all time stamps.
pub fn trajectory_energy(log: &JointLog) -> f64 {
    log.torques
        .iter()
        .zip(&log.displacements)
        .map(|(u, q)| u.abs() * q.abs())
        .sum()
}

/// Average energy consumption: energy per path step.
pub fn aec(energy: f64, length: usize) -> Result<f64, RankingError> {
    if length == 0 {
        return Err(RankingError::ZeroLength);
    }
    Ok(energy / length as f64)
}

/// `τ_low ≺ τ_high`: the trajectory at `high` is preferred.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankPair {
    pub low: usize,
    pub high: usize,
}

/// Pair loss value and its derivatives with respect to both returns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankLoss {
    pub loss: f64,
    /// `dL/dG_low`
    pub d_low: f64,
    /// `dL/dG_high`
    pub d_high: f64,
}

/// Numerically safe `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−log(e^{G_high} / (e^{G_low} + e^{G_high})) = softplus(G_low − G_high)`.
pub fn ranking_loss(g_low: f64, g_high: f64) -> Result<RankLoss, RankingError> {
    if !g_low.is_finite() || !g_high.is_finite() {
        return Err(RankingError::NonFinite("trajectory return"));
    }
    let diff = g_low - g_high;
    let s = sigmoid(diff);
    Ok(RankLoss {
        loss: softplus(diff),
        d_low: s,
        d_high: -s,
    })
}

/// Undiscounted sum of path rewards over visited cells (with multiplicity).
pub fn path_return(traj: &Trajectory, path_reward: &Field) -> f64 {
    traj.cells().map(|c| path_reward[c]).sum()
}

/// Spreads `dL/dG` onto every visited path cell, once per visit.
pub fn path_return_grad(traj: &Trajectory, rows: usize, cols: usize, d_return: f64) -> Field {
    let mut g = Field::zeros(rows, cols);
    for c in traj.cells() {
        g[c] += d_return;
    }
    g
}

/// Draws `count` strictly ordered pairs. Index pairs with equal AEC are
/// skipped and redrawn.
pub fn rank_pairs(aecs: &[f64], count: usize, seed: u64) -> Result<Vec<RankPair>, RankingError> {
    if aecs.iter().any(|a| !a.is_finite()) {
        return Err(RankingError::NonFinite("AEC label"));
    }
    let distinct = aecs.iter().any(|&a| a != aecs[0]);
    if aecs.len() < 2 || !distinct {
        return Err(RankingError::NotEnoughDistinct);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = aecs.len();
    let mut pairs = Vec::with_capacity(count);
    while pairs.len() < count {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        if i == j || aecs[i] == aecs[j] {
            continue;
        }
        pairs.push(if aecs[i] > aecs[j] {
            RankPair { low: i, high: j }
        } else {
            RankPair { low: j, high: i }
        });
    }
    Ok(pairs)
}

/// AEC labels of `trajs`, failing on the first unlabeled one.
pub fn aec_labels(trajs: &[&Trajectory]) -> Result<Vec<f64>, RankingError> {
    trajs
        .iter()
        .enumerate()
        .map(|(i, t)| t.aec.ok_or(RankingError::MissingLabel(i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn energy_hand_case() {
        let log = JointLog::from_rows(&[vec![2.0, -3.0]], &[vec![0.1, -0.2]]).unwrap();
        assert!((trajectory_energy(&log) - 0.8).abs() < 1e-15);
        let idle = JointLog::from_rows(&[vec![0.0, 0.0]], &[vec![5.0, -1.0]]).unwrap();
        assert_eq!(trajectory_energy(&idle), 0.0);
        assert!(JointLog::from_rows(&[vec![1.0]], &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn aec_cases() {
        assert!((aec(0.8, 4).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(aec(0.0, 3).unwrap(), 0.0);
        assert_eq!(aec(1.0, 0).unwrap_err(), RankingError::ZeroLength);
        assert_eq!(aec(1.6, 8).unwrap(), aec(0.8, 4).unwrap());
    }

    #[test]
    fn loss_cases() {
        let eq = ranking_loss(1.5, 1.5).unwrap();
        assert!((eq.loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!((eq.d_low, eq.d_high), (0.5, -0.5));
        let far = ranking_loss(0.0, 20.0).unwrap();
        assert!((far.loss - 2.0611536e-9).abs() < 1e-15);
        assert!(ranking_loss(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn pairs_are_oriented_and_seeded() {
        let pairs = rank_pairs(&[0.3, 0.1], 10, 4).unwrap();
        assert!(pairs.iter().all(|p| *p == RankPair { low: 0, high: 1 }));
        let aecs = [0.5, 0.5, 0.2, 0.9, 0.2];
        let a = rank_pairs(&aecs, 50, 9).unwrap();
        assert_eq!(a, rank_pairs(&aecs, 50, 9).unwrap());
        for p in &a {
            assert!(aecs[p.low] > aecs[p.high]);
        }
        assert_eq!(rank_pairs(&[0.2, 0.2, 0.2], 1, 0).unwrap_err(), RankingError::NotEnoughDistinct);
        assert!(rank_pairs(&[0.2], 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn loss_properties(gi in -50.0f64..50.0, gj in -50.0f64..50.0, c in -100.0f64..100.0) {
            let l = ranking_loss(gi, gj).unwrap();
            prop_assert!(l.loss >= 0.0);
            prop_assert_eq!(l.d_low + l.d_high, 0.0);
            let shifted = ranking_loss(gi + c, gj + c).unwrap();
            prop_assert!((shifted.loss - l.loss).abs() < 1e-9 * (1.0 + l.loss));
        }

        #[test]
        fn energy_sign_and_permutation_invariance(
            u in prop::collection::vec(-10.0f64..10.0, 12),
            q in prop::collection::vec(-1.0f64..1.0, 12),
            flip in 0usize..12,
            shift in 1usize..4,
        ) {
            let log = JointLog::new(3, 4, u.clone(), q.clone()).unwrap();
            let e = trajectory_energy(&log);
            prop_assert!(e >= 0.0);
            let mut u2 = u.clone();
            u2[flip] = -u2[flip];
            let mut q2 = q.clone();
            q2[(flip + 5) % 12] *= -1.0;
            prop_assert_eq!(trajectory_energy(&JointLog::new(3, 4, u2, q2).unwrap()), e);
            // rotate the joint order identically in both arrays
            let rot = |v: &[f64]| -> Vec<f64> {
                v.chunks(4).flat_map(|r| {
                    let mut r = r.to_vec();
                    r.rotate_left(shift);
                    r
                }).collect()
            };
            let permuted = trajectory_energy(&JointLog::new(3, 4, rot(&u), rot(&q)).unwrap());
            prop_assert!((permuted - e).abs() < 1e-12);
        }
    }
}
