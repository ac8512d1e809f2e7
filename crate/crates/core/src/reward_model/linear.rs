use super::{
    position_encoding, FeatureStack, ImuWindow, ModelConfig, ParamVector, RewardMaps, ENV_CHANNELS,
    IMU_CHANNELS,
};
use crate::field::Field;

/// Environment channels, IMU per-channel mean and std, two position ramps.
pub const LINEAR_FEATURES: usize = ENV_CHANNELS + 2 * IMU_CHANNELS + 2;

/// Subtracted from the vertical accelerometer mean so the summary reads
/// linear acceleration.
pub const STANDARD_GRAVITY: f64 = 9.81;
const VERTICAL_ACCEL: usize = 2;

/// Affine per-cell reward: `r(cell) = w · φ(cell) + b`, one head for path
/// rewards and one for goal rewards.
#[derive(Clone, Debug)]
pub struct LinearReward {
    config: ModelConfig,
    pub params: ParamVector,
}

#[derive(Clone, Debug)]
pub(super) struct LinearTape {
    /// `[cells][LINEAR_FEATURES]`
    phi: Vec<f64>,
}

impl LinearReward {
    pub fn new(config: ModelConfig) -> Self {
        let params = ParamVector::from_shapes(&[
            ("head.weight", vec![2, LINEAR_FEATURES]),
            ("head.bias", vec![2]),
        ]);
        Self { config, params }
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub(super) fn fans(&self) -> Vec<(usize, usize, usize)> {
        vec![(0, LINEAR_FEATURES, 2)]
    }

    /// Feature vectors of every cell, row-major.
    pub fn features(features: &FeatureStack, imu: &ImuWindow) -> Vec<f64> {
        let (rows, cols) = (features.rows(), features.cols());
        let (mut mean, std) = imu.channel_stats();
        mean[VERTICAL_ACCEL] -= STANDARD_GRAVITY;
        let plane = rows * cols;
        let mut phi = Vec::with_capacity(plane * LINEAR_FEATURES);
        for idx in 0..plane {
            let (r, c) = (idx / cols, idx % cols);
            for ch in 0..ENV_CHANNELS {
                phi.push(features.as_slice()[ch * plane + idx]);
            }
            phi.extend_from_slice(&mean);
            phi.extend_from_slice(&std);
            phi.push(position_encoding(r, rows));
            phi.push(position_encoding(c, cols));
        }
        phi
    }

    pub(super) fn forward(&self, features: &FeatureStack, imu: &ImuWindow) -> (RewardMaps, LinearTape) {
        let (rows, cols) = (features.rows(), features.cols());
        let phi = Self::features(features, imu);
        let w = &self.params.values;
        let (wp, wg) = w[..2 * LINEAR_FEATURES].split_at(LINEAR_FEATURES);
        let (bp, bg) = (w[2 * LINEAR_FEATURES], w[2 * LINEAR_FEATURES + 1]);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut path = Vec::with_capacity(rows * cols);
        let mut goal = Vec::with_capacity(rows * cols);
        for f in phi.chunks_exact(LINEAR_FEATURES) {
            path.push(dot(wp, f) + bp);
            goal.push(dot(wg, f) + bg);
        }
        (
            RewardMaps {
                path: Field::from_vec(rows, cols, path),
                goal: Field::from_vec(rows, cols, goal),
            },
            LinearTape { phi },
        )
    }

    pub(super) fn backward(&mut self, tape: &LinearTape, upstream: &RewardMaps) {
        let grad = &mut self.params.grad;
        let (gw, gb) = grad.split_at_mut(2 * LINEAR_FEATURES);
        let (gwp, gwg) = gw.split_at_mut(LINEAR_FEATURES);
        for ((f, &up), &ug) in tape
            .phi
            .chunks_exact(LINEAR_FEATURES)
            .zip(upstream.path.as_slice())
            .zip(upstream.goal.as_slice())
        {
            for k in 0..LINEAR_FEATURES {
                gwp[k] += up * f[k];
                gwg[k] += ug * f[k];
            }
            gb[0] += up;
            gb[1] += ug;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;
    use crate::field::Cell;

    fn inputs(rows: usize, cols: usize) -> (FeatureStack, ImuWindow) {
        let mut feats = FeatureStack::zeros(rows, cols);
        for (i, v) in feats.channel_mut(CH_VARIANCE).iter_mut().enumerate() {
            *v = 0.01 * i as f64;
        }
        let imu = ImuWindow::new(8, (0..48).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        (feats, imu)
    }

    #[test]
    fn parameter_count() {
        let net = RewardNet::init(ModelConfig::new(ModelKind::Linear, 4, 4, 8), 0).unwrap();
        assert_eq!(net.params().len(), 2 * (LINEAR_FEATURES + 1));
        assert_eq!(net.params().len(), 40);
    }

    #[test]
    fn elevation_identity() {
        let (mut feats, imu) = inputs(4, 5);
        feats.set(CH_ELEVATION, Cell::new(2, 3), 0.3);
        let mut net = RewardNet::zeros(ModelConfig::new(ModelKind::Linear, 4, 5, 8)).unwrap();
        let mut w = vec![0.0; 40];
        w[0] = 1.0;
        net.params_mut().set_values(&w);
        let (maps, _) = net.forward(&feats, &imu).unwrap();
        assert_eq!(maps.path[Cell::new(2, 3)], 0.3);
    }

    #[test]
    fn zero_params_zero_maps() {
        let (feats, imu) = inputs(3, 3);
        let net = RewardNet::zeros(ModelConfig::new(ModelKind::Linear, 3, 3, 8)).unwrap();
        let (maps, _) = net.forward(&feats, &imu).unwrap();
        assert!(maps.path.as_slice().iter().chain(maps.goal.as_slice()).all(|&v| v == 0.0));
    }

    #[test]
    fn single_cell_upstream_gradient() {
        let (feats, imu) = inputs(4, 5);
        let mut net = RewardNet::init(ModelConfig::new(ModelKind::Linear, 4, 5, 8), 3).unwrap();
        let (_, tape) = net.forward(&feats, &imu).unwrap();
        let mut up = RewardMaps::zeros(4, 5);
        up.path[Cell::new(2, 3)] = 1.0;
        net.backward(&tape, &up).unwrap();
        let phi = LinearReward::features(&feats, &imu);
        let idx = 2 * 5 + 3;
        let g = &net.params().grad;
        assert_eq!(&g[..LINEAR_FEATURES], &phi[idx * LINEAR_FEATURES..(idx + 1) * LINEAR_FEATURES]);
        assert_eq!(g[2 * LINEAR_FEATURES], 1.0);
        assert!(g[LINEAR_FEATURES..2 * LINEAR_FEATURES].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let (feats, imu) = inputs(3, 3);
        let mut net = RewardNet::init(ModelConfig::new(ModelKind::Linear, 3, 3, 8), 3).unwrap();
        let (_, tape) = net.forward(&feats, &imu).unwrap();
        net.backward(&tape, &RewardMaps::zeros(3, 3)).unwrap();
        assert!(net.params().grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn homogeneous_in_parameters() {
        let (feats, imu) = inputs(3, 4);
        let net = RewardNet::init(ModelConfig::new(ModelKind::Linear, 3, 4, 8), 11).unwrap();
        let (base, _) = net.forward(&feats, &imu).unwrap();
        let mut scaled = net.clone();
        let w: Vec<f64> = net.params().values.iter().map(|v| v * 4.0).collect();
        scaled.params_mut().set_values(&w);
        let (out, _) = scaled.forward(&feats, &imu).unwrap();
        for (a, b) in out.path.as_slice().iter().zip(base.path.as_slice()) {
            assert_eq!(*a, 4.0 * b);
        }
        for (a, b) in out.goal.as_slice().iter().zip(base.goal.as_slice()) {
            assert_eq!(*a, 4.0 * b);
        }
    }
}
