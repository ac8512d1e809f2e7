//! MEDIRL and T-MEDIRL training loops.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid_mdp::GridMdp;
use crate::irl_solver::{
    default_sweeps, demo_svf, medirl_grad, point_start, policy_propagation, soft_value_iteration, SolverError,
    SvfPair, DEFAULT_TOL,
};
use crate::ranking::{path_return, path_return_grad, rank_pairs, ranking_loss, RankPair, RankingError};
use crate::reward_model::{ModelError, RewardMaps, RewardNet, Tape};
use crate::sample::{derive_seed, Sample, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Medirl,
    Tmedirl,
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "medirl" => Ok(Algorithm::Medirl),
            "tmedirl" => Ok(Algorithm::Tmedirl),
            other => Err(format!("unknown algorithm `{other}`")),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Medirl => "medirl",
            Algorithm::Tmedirl => "tmedirl",
        })
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("sample {id}: {source}")]
    Solver { id: String, source: SolverError },
    #[error("sample {id}: {source}")]
    Model { id: String, source: ModelError },
    #[error("ranking: {0}")]
    Ranking(#[from] RankingError),
    #[error("non-finite {what} at iteration {iter}")]
    NonFinite { what: &'static str, iter: usize },
    #[error("checkpoint callback: {0}")]
    Checkpoint(String),
}

impl TrainError {
    /// Whether this is a configuration or labeling problem rather than a
    /// numeric failure.
    pub fn is_config(&self) -> bool {
        matches!(self, TrainError::Config(_) | TrainError::EmptyTrainSplit | TrainError::Ranking(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Soft value iteration sweeps; `None` uses `2·(rows + cols)`.
    pub sweeps: Option<usize>,
    pub tol: f64,
    /// Weight SVF visits by `γ^t`.
    pub discount: bool,
    pub weight_decay: f64,
    pub dropout: f64,
    /// Checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    /// Samples (MEDIRL) or pairs (T-MEDIRL) averaged per update.
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Medirl,
            lr: 1e-3,
            iterations: 2000,
            seed: 0,
            sweeps: None,
            tol: DEFAULT_TOL,
            discount: true,
            weight_decay: 0.0,
            dropout: 0.0,
            checkpoint_every: 0,
            batch: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.tol >= 0.0) {
            return bad("tolerance must be non-negative");
        }
        if self.sweeps == Some(0) {
            return bad("sweeps must be at least 1");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        Ok(())
    }
}

/// One row of the training report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    /// `Σ |D_τ − D_r|` over path and goal maps.
    pub nll_proxy: f64,
    /// Zero for MEDIRL.
    pub rank_loss: f64,
    /// Norm of the parameter-space update direction.
    pub grad_norm: f64,
    pub millis: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<IterRecord>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "iter,nll_proxy,rank_loss,grad_norm,millis";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{},{},{},{:.3}\n", r.iter, r.nll_proxy, r.rank_loss, r.grad_norm, r.millis));
        }
        out
    }
}

/// Forward pass, soft solve and SVF pair for one sample.
pub struct SampleGrad {
    pub maps: RewardMaps,
    pub tape: Tape,
    pub svf: SvfPair,
    /// `D_τ − D_r`.
    pub reward_grad: RewardMaps,
}

impl SampleGrad {
    pub fn nll_proxy(&self) -> f64 {
        self.reward_grad.path.l1_norm() + self.reward_grad.goal.l1_norm()
    }
}

/// Reward-space MEDIRL gradient of one sample under the current parameters.
pub fn sample_grad(
    net: &RewardNet,
    mdp: &GridMdp,
    sample: &Sample,
    cfg: &TrainConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<SampleGrad, TrainError> {
    let model_err = |source| TrainError::Model {
        id: sample.id.clone(),
        source,
    };
    let solver_err = |source| TrainError::Solver {
        id: sample.id.clone(),
        source,
    };
    let (maps, tape) = net
        .forward_with(&sample.features, &sample.imu, dropout_rng)
        .map_err(model_err)?;
    let sweeps = cfg.sweeps.unwrap_or_else(|| default_sweeps(mdp));
    let sol = soft_value_iteration(mdp, &maps, sweeps, cfg.tol).map_err(solver_err)?;
    let traj = &sample.trajectory;
    let demo = demo_svf(mdp, traj, cfg.discount).map_err(solver_err)?;
    let start = point_start(mdp, traj.start());
    let horizon = 2 * traj.len();
    let expected = policy_propagation(mdp, &sol.policy, &start, horizon, cfg.discount)
        .map_err(solver_err)?
        .svf;
    let svf = SvfPair { demo, expected };
    let reward_grad = medirl_grad(&svf).map_err(solver_err)?;
    Ok(SampleGrad {
        maps,
        tape,
        svf,
        reward_grad,
    })
}

fn backward_direction(net: &mut RewardNet, parts: &[(&Tape, &RewardMaps, &str)]) -> Result<Vec<f64>, TrainError> {
    net.params_mut().zero_grad();
    for &(tape, upstream, id) in parts {
        net.backward(tape, upstream).map_err(|source| TrainError::Model {
            id: id.to_string(),
            source,
        })?;
    }
    Ok(net.params().grad.clone())
}

fn dropout_rng(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Option<ChaCha8Rng> {
    (cfg.dropout > 0.0).then(|| ChaCha8Rng::seed_from_u64(rng.gen()))
}

/// Parameter-space direction of the demonstration term for `samples`,
/// averaged, together with the mean NLL proxy.
fn medirl_direction(
    net: &mut RewardNet,
    mdp: &GridMdp,
    samples: &[&Sample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, f64), TrainError> {
    let grads = samples
        .iter()
        .map(|s| sample_grad(net, mdp, s, cfg, dropout_rng(cfg, rng).as_mut()))
        .collect::<Result<Vec<_>, _>>()?;
    let parts: Vec<_> = grads
        .iter()
        .zip(samples)
        .map(|(g, s)| (&g.tape, &g.reward_grad, s.id.as_str()))
        .collect();
    let mut dir = backward_direction(net, &parts)?;
    let k = samples.len() as f64;
    if k > 1.0 {
        dir.iter_mut().for_each(|d| *d /= k);
    }
    Ok((dir, grads.iter().map(SampleGrad::nll_proxy).sum::<f64>() / k))
}

fn apply(net: &mut RewardNet, dir: &[f64], cfg: &TrainConfig, iter: usize) -> Result<f64, TrainError> {
    let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(TrainError::NonFinite { what: "gradient norm", iter });
    }
    net.params_mut().ascend(dir, cfg.lr, cfg.weight_decay);
    Ok(norm)
}

/// One MEDIRL update: `θ ← θ·(1 − αλ) + α·∇L_D`.
pub fn medirl_step(
    net: &mut RewardNet,
    mdp: &GridMdp,
    sample: &Sample,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    iter: usize,
) -> Result<IterRecord, TrainError> {
    let clock = Instant::now();
    let (dir, nll_proxy) = medirl_direction(net, mdp, &[sample], cfg, rng)?;
    let grad_norm = apply(net, &dir, cfg, iter)?;
    Ok(IterRecord {
        iter,
        nll_proxy,
        rank_loss: 0.0,
        grad_norm,
        millis: clock.elapsed().as_secs_f64() * 1e3,
    })
}

/// Update direction of one ranked pair, `∇L_low + ∇L_high − ∇L_pair`,
/// with the pair loss value and summed NLL proxy.
pub fn tmedirl_direction(
    net: &mut RewardNet,
    mdp: &GridMdp,
    low: &Sample,
    high: &Sample,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, f64, f64), TrainError> {
    if low.aec().is_none() || high.aec().is_none() {
        return Err(TrainError::Config(format!(
            "T-MEDIRL needs AEC labels (sample {} or {})",
            low.id, high.id
        )));
    }
    let (mut r_low, mut r_high) = (dropout_rng(cfg, rng), dropout_rng(cfg, rng));
    let net_ref = &*net;
    let (g_low, g_high) = rayon::join(
        || sample_grad(net_ref, mdp, low, cfg, r_low.as_mut()),
        || sample_grad(net_ref, mdp, high, cfg, r_high.as_mut()),
    );
    let (g_low, g_high) = (g_low?, g_high?);
    let (rows, cols) = (mdp.rows(), mdp.cols());
    let ret_low = path_return(&low.trajectory, &g_low.maps.path);
    let ret_high = path_return(&high.trajectory, &g_high.maps.path);
    let rank = ranking_loss(ret_low, ret_high)?;
    // upstream per sample: D_τ − D_r − dL_pair/dr
    let mut up_low = g_low.reward_grad.clone();
    up_low
        .path
        .add_scaled(&path_return_grad(&low.trajectory, rows, cols, rank.d_low), -1.0);
    let mut up_high = g_high.reward_grad.clone();
    up_high
        .path
        .add_scaled(&path_return_grad(&high.trajectory, rows, cols, rank.d_high), -1.0);
    let dir = backward_direction(
        net,
        &[
            (&g_low.tape, &up_low, low.id.as_str()),
            (&g_high.tape, &up_high, high.id.as_str()),
        ],
    )?;
    Ok((dir, rank.loss, g_low.nll_proxy() + g_high.nll_proxy()))
}

/// One T-MEDIRL update: `θ ← θ·(1 − αλ) + α∇L_i + α∇L_j − α∇L_ij`.
pub fn tmedirl_step(
    net: &mut RewardNet,
    mdp: &GridMdp,
    low: &Sample,
    high: &Sample,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    iter: usize,
) -> Result<IterRecord, TrainError> {
    let clock = Instant::now();
    let (dir, rank_loss, nll_proxy) = tmedirl_direction(net, mdp, low, high, cfg, rng)?;
    if !rank_loss.is_finite() {
        return Err(TrainError::NonFinite { what: "ranking loss", iter });
    }
    let grad_norm = apply(net, &dir, cfg, iter)?;
    Ok(IterRecord {
        iter,
        nll_proxy,
        rank_loss,
        grad_norm,
        millis: clock.elapsed().as_secs_f64() * 1e3,
    })
}

/// Runs `cfg.iterations` updates on the train split. `on_checkpoint` is
/// called with the iteration count every `checkpoint_every` iterations.
pub fn train_with(
    net: &mut RewardNet,
    mdp: &GridMdp,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(usize, &RewardNet) -> Result<(), String>,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let train: Vec<&Sample> = samples.iter().filter(|s| s.split == Split::Train).collect();
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 30, 0));
    let pairs: Vec<RankPair> = match cfg.algorithm {
        Algorithm::Medirl => Vec::new(),
        Algorithm::Tmedirl => {
            let labels = train
                .iter()
                .map(|s| {
                    s.aec()
                        .ok_or_else(|| TrainError::Config(format!("T-MEDIRL needs AEC labels; sample {} has none", s.id)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            if cfg.iterations == 0 {
                Vec::new()
            } else {
                rank_pairs(&labels, cfg.iterations * cfg.batch, derive_seed(cfg.seed, 31, 0))?
            }
        }
    };
    let mut report = TrainReport::default();
    for iter in 0..cfg.iterations {
        let clock = Instant::now();
        let (dir, nll_proxy, rank_loss) = match cfg.algorithm {
            Algorithm::Medirl => {
                let batch: Vec<&Sample> = (0..cfg.batch).map(|_| train[rng.gen_range(0..train.len())]).collect();
                let (dir, nll) = medirl_direction(net, mdp, &batch, cfg, &mut rng)?;
                (dir, nll, 0.0)
            }
            Algorithm::Tmedirl => {
                let mut total: Option<Vec<f64>> = None;
                let (mut nll, mut loss) = (0.0, 0.0);
                for p in &pairs[iter * cfg.batch..(iter + 1) * cfg.batch] {
                    let (d, l, n) = tmedirl_direction(net, mdp, train[p.low], train[p.high], cfg, &mut rng)?;
                    nll += n;
                    loss += l;
                    match &mut total {
                        None => total = Some(d),
                        Some(t) => t.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                    }
                }
                let k = cfg.batch as f64;
                let mut dir = total.expect("batch is at least one pair");
                dir.iter_mut().for_each(|d| *d /= k);
                (dir, nll / k, loss / k)
            }
        };
        if !rank_loss.is_finite() {
            return Err(TrainError::NonFinite { what: "ranking loss", iter });
        }
        let grad_norm = apply(net, &dir, cfg, iter)?;
        report.records.push(IterRecord {
            iter,
            nll_proxy,
            rank_loss,
            grad_norm,
            millis: clock.elapsed().as_secs_f64() * 1e3,
        });
        let done = iter + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            on_checkpoint(done, net).map_err(TrainError::Checkpoint)?;
        }
    }
    Ok(report)
}

pub fn train(net: &mut RewardNet, mdp: &GridMdp, samples: &[Sample], cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    train_with(net, mdp, samples, cfg, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward_model::{ModelConfig, ModelKind};
    use crate::synth::{gen_dataset, WorldSpec};

    fn setup(n: usize) -> (GridMdp, Vec<Sample>, RewardNet) {
        let spec = WorldSpec::new(8, 8, 3);
        let data = gen_dataset(&spec, n, 1.0).unwrap();
        let mdp = GridMdp::new(spec.grid()).unwrap();
        let net = RewardNet::init(ModelConfig::new(ModelKind::Linear, 8, 8, spec.imu_len), 1).unwrap();
        (mdp, data, net)
    }

    #[test]
    fn zero_iterations_keep_params() {
        let (mdp, data, mut net) = setup(3);
        let before = net.params().values.clone();
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        let report = train(&mut net, &mdp, &data, &cfg).unwrap();
        assert!(report.records.is_empty());
        assert_eq!(net.params().values, before);
    }

    #[test]
    fn report_length_and_determinism() {
        let (mdp, data, net) = setup(4);
        for algorithm in [Algorithm::Medirl, Algorithm::Tmedirl] {
            let cfg = TrainConfig {
                algorithm,
                iterations: 7,
                lr: 1e-2,
                ..TrainConfig::default()
            };
            let (mut a, mut b) = (net.clone(), net.clone());
            let ra = train(&mut a, &mdp, &data, &cfg).unwrap();
            let rb = train(&mut b, &mdp, &data, &cfg).unwrap();
            assert_eq!(ra.records.len(), 7);
            assert_eq!(a.params().values, b.params().values);
            assert_ne!(a.params().values, net.params().values);
            let strip = |r: &TrainReport| r.records.iter().map(|x| (x.nll_proxy, x.rank_loss, x.grad_norm)).collect::<Vec<_>>();
            assert_eq!(strip(&ra), strip(&rb));
        }
    }

    #[test]
    fn tmedirl_needs_labels() {
        let (mdp, mut data, mut net) = setup(3);
        data[1].trajectory.aec = None;
        let cfg = TrainConfig {
            algorithm: Algorithm::Tmedirl,
            iterations: 2,
            ..TrainConfig::default()
        };
        let err = train(&mut net, &mdp, &data, &cfg).unwrap_err();
        assert!(err.is_config(), "{err}");
    }

    #[test]
    fn empty_train_split() {
        let (mdp, mut data, mut net) = setup(2);
        data.iter_mut().for_each(|s| s.split = Split::Test);
        assert!(matches!(
            train(&mut net, &mdp, &data, &TrainConfig::default()),
            Err(TrainError::EmptyTrainSplit)
        ));
    }

    #[test]
    fn checkpoint_cadence() {
        let (mdp, data, mut net) = setup(2);
        let cfg = TrainConfig {
            iterations: 7,
            checkpoint_every: 3,
            ..TrainConfig::default()
        };
        let mut seen = Vec::new();
        train_with(&mut net, &mdp, &data, &cfg, |i, _| {
            seen.push(i);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![3, 6]);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig { lr: 0.0, ..ok.clone() },
            TrainConfig { dropout: 1.0, ..ok.clone() },
            TrainConfig { weight_decay: -1.0, ..ok.clone() },
            TrainConfig { sweeps: Some(0), ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert_eq!("T-MEDIRL".parse::<Algorithm>().unwrap(), Algorithm::Tmedirl);
    }
}
