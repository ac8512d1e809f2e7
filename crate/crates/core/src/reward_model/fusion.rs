//! Two-branch reward network: a 1D convolutional inertial branch, a small
//! skip-connected 2D convolutional environmental branch, and a fusion stage
//! over the concatenated feature maps plus two position channels.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layers::{maxpool1d, maxpool1d_backward, relu_backward, relu_inplace, Conv1d, Conv2d, Dense};
use super::{position_encoding, FeatureStack, ImuWindow, ModelConfig, ParamVector, RewardMaps, ENV_CHANNELS, IMU_CHANNELS};
use crate::field::Field;

/// IMU embedding width, broadcast as that many 2D feature maps.
pub const EMBEDDING: usize = 16;
const ENV_WIDTH: usize = 16;
const FUSE_WIDTH: usize = 16;
/// Channels entering the fusion convolution.
pub const FUSION_CHANNELS: usize = ENV_WIDTH + EMBEDDING + 2;
const IMU_KERNEL: usize = 5;

const IMU1: Conv1d = Conv1d { cin: IMU_CHANNELS, cout: 16, kernel: IMU_KERNEL };
const IMU2: Conv1d = Conv1d { cin: 16, cout: 16, kernel: IMU_KERNEL };
const IMU3: Conv1d = Conv1d { cin: 16, cout: 32, kernel: IMU_KERNEL };
const IMU4: Conv1d = Conv1d { cin: 32, cout: 32, kernel: IMU_KERNEL };
const ENV1: Conv2d = Conv2d { cin: ENV_CHANNELS, cout: ENV_WIDTH, kernel: 3 };
const ENV2: Conv2d = Conv2d { cin: ENV_WIDTH, cout: ENV_WIDTH, kernel: 3 };
const ENV3: Conv2d = Conv2d { cin: ENV_WIDTH, cout: ENV_WIDTH, kernel: 3 };
const FUSE: Conv2d = Conv2d { cin: FUSION_CHANNELS, cout: FUSE_WIDTH, kernel: 3 };
const HEAD: Conv2d = Conv2d { cin: FUSE_WIDTH, cout: 2, kernel: 1 };

// parameter layer indices, weight then bias
const L_IMU1: usize = 0;
const L_IMU2: usize = 2;
const L_IMU3: usize = 4;
const L_IMU4: usize = 6;
const L_FC: usize = 8;
const L_ENV1: usize = 10;
const L_ENV2: usize = 12;
const L_ENV3: usize = 14;
const L_FUSE: usize = 16;
const L_HEAD: usize = 18;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub model: ModelConfig,
    /// Replaces both position channels with zeros.
    pub zero_positional: bool,
}

impl FusionConfig {
    pub fn from_model(model: ModelConfig) -> Self {
        Self {
            model,
            zero_positional: false,
        }
    }

    fn pooled_len(&self) -> usize {
        self.model.imu_len / 2 / 2
    }
}

#[derive(Clone, Debug)]
pub struct FusionNet {
    config: FusionConfig,
    pub params: ParamVector,
}

#[derive(Clone, Debug)]
pub(super) struct FusionTape {
    imu_x: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    p1: Vec<f64>,
    p1_idx: Vec<usize>,
    z3: Vec<f64>,
    a3: Vec<f64>,
    z4: Vec<f64>,
    p2: Vec<f64>,
    p2_idx: Vec<usize>,
    env_x: Vec<f64>,
    e1: Vec<f64>,
    h1: Vec<f64>,
    e2: Vec<f64>,
    h2: Vec<f64>,
    e3: Vec<f64>,
    fused: Vec<f64>,
    u_pre: Vec<f64>,
    u: Vec<f64>,
    mask: Option<Vec<f64>>,
}

impl FusionNet {
    pub fn new(config: FusionConfig) -> Self {
        let pooled = config.pooled_len();
        let shapes: Vec<(&str, Vec<usize>)> = vec![
            ("imu.conv1.weight", vec![IMU1.cout, IMU1.cin, IMU_KERNEL]),
            ("imu.conv1.bias", vec![IMU1.cout]),
            ("imu.conv2.weight", vec![IMU2.cout, IMU2.cin, IMU_KERNEL]),
            ("imu.conv2.bias", vec![IMU2.cout]),
            ("imu.conv3.weight", vec![IMU3.cout, IMU3.cin, IMU_KERNEL]),
            ("imu.conv3.bias", vec![IMU3.cout]),
            ("imu.conv4.weight", vec![IMU4.cout, IMU4.cin, IMU_KERNEL]),
            ("imu.conv4.bias", vec![IMU4.cout]),
            ("imu.fc.weight", vec![EMBEDDING, IMU4.cout * pooled]),
            ("imu.fc.bias", vec![EMBEDDING]),
            ("env.conv1.weight", vec![ENV1.cout, ENV1.cin, 3, 3]),
            ("env.conv1.bias", vec![ENV1.cout]),
            ("env.conv2.weight", vec![ENV2.cout, ENV2.cin, 3, 3]),
            ("env.conv2.bias", vec![ENV2.cout]),
            ("env.conv3.weight", vec![ENV3.cout, ENV3.cin, 3, 3]),
            ("env.conv3.bias", vec![ENV3.cout]),
            ("fuse.conv.weight", vec![FUSE.cout, FUSE.cin, 3, 3]),
            ("fuse.conv.bias", vec![FUSE.cout]),
            ("fuse.head.weight", vec![HEAD.cout, HEAD.cin, 1, 1]),
            ("fuse.head.bias", vec![HEAD.cout]),
        ];
        Self {
            config,
            params: ParamVector::from_shapes(&shapes),
        }
    }

    pub fn config(&self) -> FusionConfig {
        self.config
    }

    pub fn set_zero_positional(&mut self, on: bool) {
        self.config.zero_positional = on;
    }

    pub(super) fn fans(&self) -> Vec<(usize, usize, usize)> {
        let c1 = |c: Conv1d| (c.cin * c.kernel, c.cout * c.kernel);
        let c2 = |c: Conv2d| (c.cin * c.kernel * c.kernel, c.cout * c.kernel * c.kernel);
        let fc_in = IMU4.cout * self.config.pooled_len();
        [
            (L_IMU1, c1(IMU1)),
            (L_IMU2, c1(IMU2)),
            (L_IMU3, c1(IMU3)),
            (L_IMU4, c1(IMU4)),
            (L_FC, (fc_in, EMBEDDING)),
            (L_ENV1, c2(ENV1)),
            (L_ENV2, c2(ENV2)),
            (L_ENV3, c2(ENV3)),
            (L_FUSE, c2(FUSE)),
            (L_HEAD, c2(HEAD)),
        ]
        .into_iter()
        .map(|(l, (fi, fo))| (l, fi, fo))
        .collect()
    }

    fn w(&self, layer: usize) -> &[f64] {
        &self.params.values[self.params.layers()[layer].range()]
    }

    /// Inertial branch up to the embedding; also returns the retained pieces.
    fn embed(&self, imu: &ImuWindow) -> (Vec<f64>, InertialActs) {
        let t0 = imu.len();
        let x = imu.channels_first();
        let z1 = IMU1.forward(&x, t0, self.w(L_IMU1), self.w(L_IMU1 + 1));
        let mut a1 = z1.clone();
        relu_inplace(&mut a1);
        let z2 = IMU2.forward(&a1, t0, self.w(L_IMU2), self.w(L_IMU2 + 1));
        let mut a2 = z2.clone();
        relu_inplace(&mut a2);
        let (p1, p1_idx) = maxpool1d(&a2, IMU2.cout, t0);
        let t1 = t0 / 2;
        let z3 = IMU3.forward(&p1, t1, self.w(L_IMU3), self.w(L_IMU3 + 1));
        let mut a3 = z3.clone();
        relu_inplace(&mut a3);
        let z4 = IMU4.forward(&a3, t1, self.w(L_IMU4), self.w(L_IMU4 + 1));
        let mut a4 = z4.clone();
        relu_inplace(&mut a4);
        let (p2, p2_idx) = maxpool1d(&a4, IMU4.cout, t1);
        let fc = Dense {
            input: p2.len(),
            output: EMBEDDING,
        };
        let e = fc.forward(&p2, self.w(L_FC), self.w(L_FC + 1));
        (
            e,
            InertialActs {
                x,
                z1,
                a1,
                z2,
                p1,
                p1_idx,
                z3,
                a3,
                z4,
                p2,
                p2_idx,
            },
        )
    }

    pub(super) fn forward(
        &self,
        features: &FeatureStack,
        imu: &ImuWindow,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> (RewardMaps, FusionTape) {
        let (rows, cols) = (features.rows(), features.cols());
        let plane = rows * cols;
        let (embedding, ia) = self.embed(imu);

        let env_x = features.as_slice().to_vec();
        let e1 = ENV1.forward(&env_x, rows, cols, self.w(L_ENV1), self.w(L_ENV1 + 1));
        let mut h1 = e1.clone();
        relu_inplace(&mut h1);
        let e2 = ENV2.forward(&h1, rows, cols, self.w(L_ENV2), self.w(L_ENV2 + 1));
        let mut h2 = e2.clone();
        relu_inplace(&mut h2);
        let mut e3 = ENV3.forward(&h2, rows, cols, self.w(L_ENV3), self.w(L_ENV3 + 1));
        for (v, s) in e3.iter_mut().zip(&h1) {
            *v += s;
        }
        let mut h3 = e3.clone();
        relu_inplace(&mut h3);

        let mut fused = Vec::with_capacity(FUSION_CHANNELS * plane);
        fused.extend_from_slice(&h3);
        for &e in &embedding {
            fused.extend(std::iter::repeat(e).take(plane));
        }
        let zero_pos = self.config.zero_positional;
        for idx in 0..plane {
            fused.push(if zero_pos { 0.0 } else { position_encoding(idx / cols, rows) });
        }
        for idx in 0..plane {
            fused.push(if zero_pos { 0.0 } else { position_encoding(idx % cols, cols) });
        }

        let u_pre = FUSE.forward(&fused, rows, cols, self.w(L_FUSE), self.w(L_FUSE + 1));
        let mut u = u_pre.clone();
        relu_inplace(&mut u);
        let rate = self.config.model.dropout;
        let mask = match dropout_rng {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let m: Vec<f64> = (0..u.len())
                    .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                    .collect();
                for (v, k) in u.iter_mut().zip(&m) {
                    *v *= k;
                }
                Some(m)
            }
            _ => None,
        };
        let out = HEAD.forward(&u, rows, cols, self.w(L_HEAD), self.w(L_HEAD + 1));
        let maps = RewardMaps {
            path: Field::from_vec(rows, cols, out[..plane].to_vec()),
            goal: Field::from_vec(rows, cols, out[plane..].to_vec()),
        };
        let tape = FusionTape {
            imu_x: ia.x,
            z1: ia.z1,
            a1: ia.a1,
            z2: ia.z2,
            p1: ia.p1,
            p1_idx: ia.p1_idx,
            z3: ia.z3,
            a3: ia.a3,
            z4: ia.z4,
            p2: ia.p2,
            p2_idx: ia.p2_idx,
            env_x,
            e1,
            h1,
            e2,
            h2,
            e3,
            fused,
            u_pre,
            u,
            mask,
        };
        (maps, tape)
    }

    /// Output of the fusion convolution (after ReLU), for inspection.
    pub fn fusion_features(&self, features: &FeatureStack, imu: &ImuWindow) -> Vec<f64> {
        self.forward(features, imu, None).1.u
    }

    pub(super) fn backward(&mut self, tape: &FusionTape, upstream: &RewardMaps) {
        let rows = self.config.model.rows;
        let cols = self.config.model.cols;
        let plane = rows * cols;
        let layers = self.params.layers().to_vec();
        let (values, grad) = (&self.params.values, &mut self.params.grad);
        let w = |l: usize| &values[layers[l].range()];
        // split the gradient buffer per layer
        let mut slots: Vec<&mut [f64]> = Vec::with_capacity(layers.len());
        let mut rest: &mut [f64] = grad.as_mut_slice();
        for l in &layers {
            let (head, tail) = rest.split_at_mut(l.len());
            slots.push(head);
            rest = tail;
        }
        let mut slot_iter = slots.into_iter();
        let mut take2 = || {
            let a = slot_iter.next().unwrap();
            let b = slot_iter.next().unwrap();
            (a, b)
        };
        let (g_imu1_w, g_imu1_b) = take2();
        let (g_imu2_w, g_imu2_b) = take2();
        let (g_imu3_w, g_imu3_b) = take2();
        let (g_imu4_w, g_imu4_b) = take2();
        let (g_fc_w, g_fc_b) = take2();
        let (g_env1_w, g_env1_b) = take2();
        let (g_env2_w, g_env2_b) = take2();
        let (g_env3_w, g_env3_b) = take2();
        let (g_fuse_w, g_fuse_b) = take2();
        let (g_head_w, g_head_b) = take2();

        let mut d_out = Vec::with_capacity(2 * plane);
        d_out.extend_from_slice(upstream.path.as_slice());
        d_out.extend_from_slice(upstream.goal.as_slice());

        // head
        let mut d_u = vec![0.0; tape.u.len()];
        HEAD.backward(&tape.u, rows, cols, w(L_HEAD), &d_out, Some(&mut d_u), g_head_w, g_head_b);
        if let Some(mask) = &tape.mask {
            for (g, m) in d_u.iter_mut().zip(mask) {
                *g *= m;
            }
        }
        relu_backward(&tape.u_pre, &mut d_u);

        // fusion conv
        let mut d_fused = vec![0.0; tape.fused.len()];
        FUSE.backward(&tape.fused, rows, cols, w(L_FUSE), &d_u, Some(&mut d_fused), g_fuse_w, g_fuse_b);
        let mut d_h3 = d_fused[..ENV_WIDTH * plane].to_vec();
        let d_embed: Vec<f64> = (0..EMBEDDING)
            .map(|k| {
                let start = (ENV_WIDTH + k) * plane;
                d_fused[start..start + plane].iter().sum()
            })
            .collect();

        // environmental branch
        relu_backward(&tape.e3, &mut d_h3);
        let mut d_h2 = vec![0.0; tape.h2.len()];
        ENV3.backward(&tape.h2, rows, cols, w(L_ENV3), &d_h3, Some(&mut d_h2), g_env3_w, g_env3_b);
        relu_backward(&tape.e2, &mut d_h2);
        // skip connection feeds h1 directly
        let mut d_h1 = d_h3;
        ENV2.backward(&tape.h1, rows, cols, w(L_ENV2), &d_h2, Some(&mut d_h1), g_env2_w, g_env2_b);
        relu_backward(&tape.e1, &mut d_h1);
        ENV1.backward(&tape.env_x, rows, cols, w(L_ENV1), &d_h1, None, g_env1_w, g_env1_b);

        // inertial branch
        let t0 = self.config.model.imu_len;
        let t1 = t0 / 2;
        let fc = Dense {
            input: tape.p2.len(),
            output: EMBEDDING,
        };
        let mut d_p2 = vec![0.0; tape.p2.len()];
        fc.backward(&tape.p2, w(L_FC), &d_embed, &mut d_p2, g_fc_w, g_fc_b);
        let mut d_a4 = vec![0.0; tape.z4.len()];
        maxpool1d_backward(&d_p2, &tape.p2_idx, &mut d_a4);
        relu_backward(&tape.z4, &mut d_a4);
        let mut d_a3 = vec![0.0; tape.a3.len()];
        IMU4.backward(&tape.a3, t1, w(L_IMU4), &d_a4, Some(&mut d_a3), g_imu4_w, g_imu4_b);
        relu_backward(&tape.z3, &mut d_a3);
        let mut d_p1 = vec![0.0; tape.p1.len()];
        IMU3.backward(&tape.p1, t1, w(L_IMU3), &d_a3, Some(&mut d_p1), g_imu3_w, g_imu3_b);
        let mut d_a2 = vec![0.0; tape.z2.len()];
        maxpool1d_backward(&d_p1, &tape.p1_idx, &mut d_a2);
        relu_backward(&tape.z2, &mut d_a2);
        let mut d_a1 = vec![0.0; tape.a1.len()];
        IMU2.backward(&tape.a1, t0, w(L_IMU2), &d_a2, Some(&mut d_a1), g_imu2_w, g_imu2_b);
        relu_backward(&tape.z1, &mut d_a1);
        IMU1.backward(&tape.imu_x, t0, w(L_IMU1), &d_a1, None, g_imu1_w, g_imu1_b);
    }
}

struct InertialActs {
    x: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    p1: Vec<f64>,
    p1_idx: Vec<usize>,
    z3: Vec<f64>,
    a3: Vec<f64>,
    z4: Vec<f64>,
    p2: Vec<f64>,
    p2_idx: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;
    use rand::SeedableRng;

    fn random_inputs(rows: usize, cols: usize, t: usize, seed: u64) -> (FeatureStack, ImuWindow) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut feats = FeatureStack::zeros(rows, cols);
        for c in 0..ENV_CHANNELS {
            for v in feats.channel_mut(c) {
                *v = rng.gen_range(0.0..1.0);
            }
        }
        let imu = ImuWindow::new(t, (0..t * 6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        (feats, imu)
    }

    fn manifest_count(t: usize) -> usize {
        let conv1 = |cin: usize, cout: usize, k: usize| cout * cin * k + cout;
        let conv2 = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        conv1(6, 16, 5)
            + conv1(16, 16, 5)
            + conv1(16, 32, 5)
            + conv1(32, 32, 5)
            + (32 * (t / 4) * 16 + 16)
            + conv2(5, 16, 3)
            + conv2(16, 16, 3)
            + conv2(16, 16, 3)
            + conv2(34, 16, 3)
            + conv2(16, 2, 1)
    }

    #[test]
    fn parameter_count_matches_manifest() {
        for t in [8, 16, 100] {
            let net = RewardNet::init(ModelConfig::new(ModelKind::Fusion, 6, 6, t), 1).unwrap();
            assert_eq!(net.params().len(), manifest_count(t));
            let summed: usize = net.params().layers().iter().map(|l| l.len()).sum();
            assert_eq!(summed, net.params().len());
        }
        // T = 100: 9536 inertial conv + 12816 fc + 5376 env + 4912 fusion + 34 head
        assert_eq!(manifest_count(100), 32674);
    }

    #[test]
    fn output_shape() {
        let (feats, imu) = random_inputs(32, 32, 100, 1);
        let net = RewardNet::init(ModelConfig::new(ModelKind::Fusion, 32, 32, 100), 1).unwrap();
        let (maps, _) = net.forward(&feats, &imu).unwrap();
        assert_eq!(maps.path.dims(), (32, 32));
        assert_eq!(maps.goal.dims(), (32, 32));
    }

    #[test]
    fn zero_params_zero_maps() {
        let (feats, imu) = random_inputs(5, 4, 8, 2);
        let net = RewardNet::zeros(ModelConfig::new(ModelKind::Fusion, 5, 4, 8)).unwrap();
        let (maps, _) = net.forward(&feats, &imu).unwrap();
        assert!(maps.path.as_slice().iter().chain(maps.goal.as_slice()).all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let (feats, imu) = random_inputs(6, 5, 12, 3);
        let net = RewardNet::init(ModelConfig::new(ModelKind::Fusion, 6, 5, 12), 9).unwrap();
        let (a, _) = net.forward(&feats, &imu).unwrap();
        let (b, _) = net.forward(&feats, &imu).unwrap();
        let bits = |m: &RewardMaps| {
            m.path
                .as_slice()
                .iter()
                .chain(m.goal.as_slice())
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn dropout_masks_are_seeded() {
        let (feats, imu) = random_inputs(4, 4, 8, 4);
        let mut cfg = ModelConfig::new(ModelKind::Fusion, 4, 4, 8);
        cfg.dropout = 0.1;
        let net = RewardNet::init(cfg, 2).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            net.forward_with(&feats, &imu, Some(&mut rng)).unwrap().0
        };
        assert_eq!(run(5), run(5));
        let (eval, _) = net.forward(&feats, &imu).unwrap();
        assert_ne!(run(5), eval);
    }
}
