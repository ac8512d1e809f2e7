//! Differentiable reward models mapping terrain features and an IMU window
//! to path and goal reward maps.

mod fusion;
pub mod layers;
mod linear;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{Cell, Field};

pub use fusion::{FusionConfig, FusionNet, EMBEDDING, FUSION_CHANNELS};
pub use linear::{LinearReward, LINEAR_FEATURES};

/// Elevation, elevation variance, red, green, blue.
pub const ENV_CHANNELS: usize = 5;
/// Three accelerometer axes then three gyroscope axes.
pub const IMU_CHANNELS: usize = 6;
/// Two pooling stages need at least this many samples.
pub const MIN_IMU_LEN: usize = 8;

pub const CH_ELEVATION: usize = 0;
pub const CH_VARIANCE: usize = 1;
pub const CH_RED: usize = 2;
pub const CH_GREEN: usize = 3;
pub const CH_BLUE: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("{what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("negative value in the elevation variance channel")]
    NegativeVariance,
    #[error("backward called without a retained forward pass")]
    NoForward,
    #[error("forward pass was recorded against different parameters")]
    StaleTape,
    #[error("tape belongs to a different model variant")]
    WrongTape,
}

fn dim_err(what: &'static str, expected: impl ToString, got: impl ToString) -> ModelError {
    ModelError::Dimension {
        what,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

/// Per-cell environmental features, channel-major `[5][rows][cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureStack {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != ENV_CHANNELS * rows * cols {
            return Err(dim_err(
                "feature stack length",
                ENV_CHANNELS * rows * cols,
                data.len(),
            ));
        }
        let stack = Self { rows, cols, data };
        stack.validate()?;
        Ok(stack)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; ENV_CHANNELS * rows * cols],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("feature stack"));
        }
        if self.channel(CH_VARIANCE).iter().any(|&v| v < 0.0) {
            return Err(ModelError::NegativeVariance);
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.rows * self.cols;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.rows * self.cols;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_field(&self, c: usize) -> Field {
        Field::from_vec(self.rows, self.cols, self.channel(c).to_vec())
    }

    pub fn get(&self, c: usize, cell: Cell) -> f64 {
        self.data[(c * self.rows + cell.row) * self.cols + cell.col]
    }

    pub fn set(&mut self, c: usize, cell: Cell, v: f64) {
        self.data[(c * self.rows + cell.row) * self.cols + cell.col] = v;
    }
}

/// Fixed-length window of raw IMU samples, time-major `[T][6]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuWindow {
    len: usize,
    data: Vec<f64>,
}

impl ImuWindow {
    pub fn new(len: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if len < MIN_IMU_LEN {
            return Err(dim_err("imu window length", format!(">= {MIN_IMU_LEN}"), len));
        }
        if data.len() != len * IMU_CHANNELS {
            return Err(dim_err("imu window data", len * IMU_CHANNELS, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("imu window"));
        }
        Ok(Self { len, data })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn sample(&self, t: usize, channel: usize) -> f64 {
        self.data[t * IMU_CHANNELS + channel]
    }

    /// Channel-major copy `[6][T]`.
    pub fn channels_first(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        for t in 0..self.len {
            for c in 0..IMU_CHANNELS {
                out[c * self.len + t] = self.data[t * IMU_CHANNELS + c];
            }
        }
        out
    }

    /// Per-channel mean and (population) standard deviation.
    pub fn channel_stats(&self) -> ([f64; IMU_CHANNELS], [f64; IMU_CHANNELS]) {
        let n = self.len as f64;
        let mut mean = [0.0; IMU_CHANNELS];
        let mut std = [0.0; IMU_CHANNELS];
        for c in 0..IMU_CHANNELS {
            let m = (0..self.len).map(|t| self.sample(t, c)).sum::<f64>() / n;
            let var = (0..self.len)
                .map(|t| (self.sample(t, c) - m).powi(2))
                .sum::<f64>()
                / n;
            mean[c] = m;
            std[c] = var.sqrt();
        }
        (mean, std)
    }
}

/// Path and goal reward fields.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardMaps {
    pub path: Field,
    pub goal: Field,
}

impl RewardMaps {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            path: Field::zeros(rows, cols),
            goal: Field::zeros(rows, cols),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.path.dims()
    }

    pub fn is_finite(&self) -> bool {
        self.path.is_finite() && self.goal.is_finite()
    }

    /// Traversability cost map, the negated path reward.
    pub fn cost(&self) -> Field {
        self.path.map(|v| -v)
    }
}

/// Named slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayerSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameters with a parallel gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    layers: Vec<LayerSpec>,
    /// Bumped whenever `values` changes through the update helpers.
    version: u64,
}

impl ParamVector {
    /// Zero parameters laid out by `(name, shape)` in order.
    pub fn from_shapes(shapes: &[(&str, Vec<usize>)]) -> Self {
        let mut layers = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for (name, shape) in shapes {
            let spec = LayerSpec {
                name: (*name).to_string(),
                shape: shape.clone(),
                offset,
            };
            offset += spec.len();
            layers.push(spec);
        }
        Self {
            values: vec![0.0; offset],
            grad: vec![0.0; offset],
            layers,
            version: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Replaces all values; lengths must agree.
    pub fn set_values(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.values.len());
        self.values.copy_from_slice(values);
        self.version += 1;
    }

    /// `θ ← θ·(1 − lr·decay) + lr·direction`.
    pub fn ascend(&mut self, direction: &[f64], lr: f64, decay: f64) {
        assert_eq!(direction.len(), self.values.len());
        let shrink = 1.0 - lr * decay;
        for (v, d) in self.values.iter_mut().zip(direction) {
            if decay != 0.0 {
                *v *= shrink;
            }
            *v += lr * d;
        }
        self.version += 1;
    }

    /// Xavier-uniform weights (`±sqrt(6 / (fan_in + fan_out))`), zero biases.
    pub(crate) fn init_xavier(&mut self, seed: u64, fans: &[(usize, usize, usize)]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.values.iter_mut().for_each(|v| *v = 0.0);
        for &(layer, fan_in, fan_out) in fans {
            let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let range = self.layers[layer].range();
            for v in &mut self.values[range] {
                *v = rng.gen_range(-scale..scale);
            }
        }
        self.version += 1;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Fusion,
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "linear" => Ok(ModelKind::Linear),
            "fusion" => Ok(ModelKind::Fusion),
            other => Err(format!("unknown model kind {other:?}")),
        }
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub rows: usize,
    pub cols: usize,
    pub imu_len: usize,
    /// Inverted-dropout rate on the fusion hidden layer (train mode only).
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, rows: usize, cols: usize, imu_len: usize) -> Self {
        Self {
            kind,
            rows,
            cols,
            imu_len,
            dropout: 0.0,
        }
    }
}

/// Activations retained by a forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    version: u64,
    inner: TapeInner,
}

#[derive(Clone, Debug)]
enum TapeInner {
    Linear(linear::LinearTape),
    Fusion(Box<fusion::FusionTape>),
}

/// A reward model variant.
#[derive(Clone, Debug)]
pub enum RewardNet {
    Linear(LinearReward),
    Fusion(FusionNet),
}

impl RewardNet {
    /// Fresh model with seeded initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut net = Self::zeros(config)?;
        let fans = net.fans();
        net.params_mut().init_xavier(seed, &fans);
        Ok(net)
    }

    /// Model with every parameter zero.
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        if config.rows == 0 || config.cols == 0 {
            return Err(dim_err("grid", "non-empty", format!("{}x{}", config.rows, config.cols)));
        }
        if config.imu_len < MIN_IMU_LEN {
            return Err(dim_err("imu window length", format!(">= {MIN_IMU_LEN}"), config.imu_len));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(dim_err("dropout rate", "[0, 1)", config.dropout));
        }
        Ok(match config.kind {
            ModelKind::Linear => RewardNet::Linear(LinearReward::new(config)),
            ModelKind::Fusion => RewardNet::Fusion(FusionNet::new(FusionConfig::from_model(config))),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            RewardNet::Linear(m) => m.config(),
            RewardNet::Fusion(m) => m.config().model,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.config().kind
    }

    pub fn params(&self) -> &ParamVector {
        match self {
            RewardNet::Linear(m) => &m.params,
            RewardNet::Fusion(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        match self {
            RewardNet::Linear(m) => &mut m.params,
            RewardNet::Fusion(m) => &mut m.params,
        }
    }

    fn fans(&self) -> Vec<(usize, usize, usize)> {
        match self {
            RewardNet::Linear(m) => m.fans(),
            RewardNet::Fusion(m) => m.fans(),
        }
    }

    fn check_inputs(&self, features: &FeatureStack, imu: &ImuWindow) -> Result<(), ModelError> {
        let cfg = self.config();
        if (features.rows(), features.cols()) != (cfg.rows, cfg.cols) {
            return Err(dim_err(
                "feature stack grid",
                format!("{}x{}", cfg.rows, cfg.cols),
                format!("{}x{}", features.rows(), features.cols()),
            ));
        }
        if imu.len() != cfg.imu_len {
            return Err(dim_err("imu window length", cfg.imu_len, imu.len()));
        }
        features.validate()?;
        if imu.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("imu window"));
        }
        Ok(())
    }

    /// Inference pass (dropout disabled).
    pub fn forward(&self, features: &FeatureStack, imu: &ImuWindow) -> Result<(RewardMaps, Tape), ModelError> {
        self.forward_with(features, imu, None)
    }

    /// Forward pass; `dropout_rng` enables train-mode dropout masks.
    pub fn forward_with(
        &self,
        features: &FeatureStack,
        imu: &ImuWindow,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(RewardMaps, Tape), ModelError> {
        self.check_inputs(features, imu)?;
        let (maps, inner) = match self {
            RewardNet::Linear(m) => {
                let (maps, tape) = m.forward(features, imu);
                (maps, TapeInner::Linear(tape))
            }
            RewardNet::Fusion(m) => {
                let (maps, tape) = m.forward(features, imu, dropout_rng);
                (maps, TapeInner::Fusion(Box::new(tape)))
            }
        };
        if !maps.is_finite() {
            return Err(ModelError::NonFinite("reward maps"));
        }
        Ok((
            maps,
            Tape {
                version: self.params().version(),
                inner,
            },
        ))
    }

    /// Accumulates `dL/dθ` for the upstream reward-map gradient into
    /// `params().grad`.
    pub fn backward(&mut self, tape: &Tape, upstream: &RewardMaps) -> Result<(), ModelError> {
        let cfg = self.config();
        if upstream.path.dims() != (cfg.rows, cfg.cols) || upstream.goal.dims() != (cfg.rows, cfg.cols) {
            return Err(dim_err(
                "upstream gradient",
                format!("{}x{}", cfg.rows, cfg.cols),
                format!("{}x{}", upstream.path.rows(), upstream.path.cols()),
            ));
        }
        if tape.version != self.params().version() {
            return Err(ModelError::StaleTape);
        }
        match (&mut *self, &tape.inner) {
            (RewardNet::Linear(m), TapeInner::Linear(t)) => m.backward(t, upstream),
            (RewardNet::Fusion(m), TapeInner::Fusion(t)) => m.backward(t, upstream),
            _ => return Err(ModelError::WrongTape),
        }
        if self.params().grad.iter().any(|g| !g.is_finite()) {
            return Err(ModelError::NonFinite("parameter gradient"));
        }
        Ok(())
    }
}

/// A model that keeps the activations of its latest forward pass, for
/// callers that want the classic `forward(); backward()` pairing.
#[derive(Clone, Debug)]
pub struct RetainingModel {
    pub net: RewardNet,
    retained: Option<Tape>,
}

impl RetainingModel {
    pub fn new(net: RewardNet) -> Self {
        Self { net, retained: None }
    }

    pub fn forward(&mut self, features: &FeatureStack, imu: &ImuWindow) -> Result<RewardMaps, ModelError> {
        let (maps, tape) = self.net.forward(features, imu)?;
        self.retained = Some(tape);
        Ok(maps)
    }

    pub fn backward(&mut self, upstream: &RewardMaps) -> Result<(), ModelError> {
        let tape = self.retained.as_ref().ok_or(ModelError::NoForward)?;
        self.net.backward(tape, upstream)
    }
}

/// Parameter initialization entry point.
pub fn param_init(config: ModelConfig, seed: u64) -> Result<ParamVector, ModelError> {
    Ok(RewardNet::init(config, seed)?.params().clone())
}

/// Normalized positional encodings in `[-1, 1]` (0 on a length-1 axis).
pub fn position_encoding(index: usize, extent: usize) -> f64 {
    if extent <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * index as f64 / (extent - 1) as f64
    }
}
