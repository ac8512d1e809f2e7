//! `gen`, `train`, `eval` and `render` as library functions. Each returns
//! the lines to print or a [`CliError`] carrying the process exit code.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

use super::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta};
use super::manifest::{read_dataset, write_dataset, ManifestError};
use super::render::{render_overlay, render_pgm};
use crate::grid_mdp::{GridMdp, GridSpec};
use crate::irl_solver::{default_sweeps, point_start, policy_propagation, soft_value_iteration, DEFAULT_TOL};
use crate::metrics::{evaluate, EvalConfig, EvalReport, MetricError};
use crate::reward_model::{ModelConfig, ModelKind, RewardNet};
use crate::sample::{Sample, Split};
use crate::synth::{gen_dataset, train_count, WorldSpec};
use crate::trainer::{train_with, Algorithm, TrainConfig, TrainError, TrainReport};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Labels(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io(_) => 2,
            CliError::Labels(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Mismatch(_) => 5,
        }
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Layout(_) | CheckpointError::Model(_) => CliError::Mismatch(e.to_string()),
            other => CliError::Io(other.to_string()),
        }
    }
}

/// Printed output: informational lines and warnings.
#[derive(Debug, Default)]
pub struct Output {
    pub lines: Vec<String>,
    pub warnings: Vec<String>,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug)]
pub struct GenOptions {
    pub out: PathBuf,
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    pub beta: f64,
    pub noise: f64,
    pub split_ratio: f64,
}

pub fn gen(opts: &GenOptions) -> Result<Output, CliError> {
    if opts.rows == 0 || opts.cols == 0 {
        return Err(CliError::Usage("--rows and --cols must be positive".into()));
    }
    if opts.count < 2 {
        return Err(CliError::Usage("--count must be at least 2".into()));
    }
    if !(0.0..=1.0).contains(&opts.split_ratio) {
        return Err(CliError::Usage("--split-ratio must be in [0, 1]".into()));
    }
    if !(opts.beta >= 0.0 && opts.beta.is_finite()) || !(opts.noise >= 0.0 && opts.noise.is_finite()) {
        return Err(CliError::Usage("--beta and --noise must be non-negative".into()));
    }
    let mut spec = WorldSpec::new(opts.rows, opts.cols, opts.seed);
    spec.beta = opts.beta;
    spec.energy_noise = opts.noise;
    let data = gen_dataset(&spec, opts.count, opts.split_ratio).map_err(|e| CliError::Numeric(e.to_string()))?;
    let manifest = write_dataset(&opts.out, &data)?;
    let train = train_count(opts.count, opts.split_ratio);
    Ok(Output {
        lines: vec![format!(
            "wrote {} samples ({} train, {} test) to {}",
            opts.count,
            train,
            opts.count - train,
            manifest.display()
        )],
        warnings: vec![],
    })
}

/// Grid and IMU dimensions shared by every sample.
fn dataset_dims(data: &[Sample]) -> Result<(usize, usize, usize), CliError> {
    let first = &data[0];
    let dims = (first.features.rows(), first.features.cols(), first.imu.len());
    if let Some(s) = data
        .iter()
        .find(|s| (s.features.rows(), s.features.cols(), s.imu.len()) != dims)
    {
        return Err(CliError::Mismatch(format!(
            "sample {} is {}x{} with IMU length {}, sample {} is {}x{} with IMU length {}",
            s.id,
            s.features.rows(),
            s.features.cols(),
            s.imu.len(),
            first.id,
            dims.0,
            dims.1,
            dims.2
        )));
    }
    Ok(dims)
}

fn grid(rows: usize, cols: usize, gamma: f64) -> Result<GridMdp, CliError> {
    GridMdp::new(GridSpec::new(rows, cols).with_gamma(gamma)).map_err(|e| CliError::Usage(e.to_string()))
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub data: PathBuf,
    pub algo: Algorithm,
    pub model: ModelKind,
    pub iters: usize,
    pub lr: f64,
    pub gamma: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub batch: usize,
    pub discount: bool,
    pub weight_decay: f64,
    pub dropout: f64,
    pub checkpoint_every: usize,
}

pub const MODEL_FILE: &str = "model.ckpt";
pub const TRAIN_REPORT: &str = "train.csv";

pub fn train(opts: &TrainOptions) -> Result<Output, CliError> {
    let cfg = TrainConfig {
        algorithm: opts.algo,
        lr: opts.lr,
        iterations: opts.iters,
        seed: opts.seed,
        discount: opts.discount,
        weight_decay: opts.weight_decay,
        dropout: opts.dropout,
        checkpoint_every: opts.checkpoint_every,
        batch: opts.batch,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let data = read_dataset(&opts.data)?;
    let (rows, cols, imu_len) = dataset_dims(&data)?;
    let mdp = grid(rows, cols, opts.gamma)?;
    if opts.algo == Algorithm::Tmedirl {
        if let Some(s) = data.iter().find(|s| s.split == Split::Train && s.aec().is_none()) {
            return Err(CliError::Labels(format!("tmedirl needs AEC labels; sample {} has none", s.id)));
        }
    }
    let mut model = ModelConfig::new(opts.model, rows, cols, imu_len);
    model.dropout = opts.dropout;
    let mut net = RewardNet::init(model, opts.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    create_dir(&opts.out)?;
    let provenance = |iters: usize| {
        json!({
            "algorithm": opts.algo.to_string(),
            "seed": opts.seed,
            "iterations": iters,
            "lr": opts.lr,
        })
    };
    let report = train_with(&mut net, &mdp, &data, &cfg, |iter, n| {
        let path = opts.out.join(format!("ckpt_{iter:06}.ckpt"));
        save_checkpoint(&path, n, opts.gamma, provenance(iter)).map_err(|e| e.to_string())
    })
    .map_err(|e| match e {
        e if e.is_config() => CliError::Labels(e.to_string()),
        TrainError::Checkpoint(m) => CliError::Io(m),
        e => CliError::Numeric(format!("training aborted: {e}")),
    })?;
    let ckpt = opts.out.join(MODEL_FILE);
    save_checkpoint(&ckpt, &net, opts.gamma, provenance(opts.iters))?;
    write_file(&opts.out.join(TRAIN_REPORT), report.to_csv())?;
    Ok(Output {
        lines: vec![summary_line(&report, &ckpt)],
        warnings: vec![],
    })
}

fn summary_line(report: &TrainReport, ckpt: &Path) -> String {
    match report.records.last() {
        Some(r) => format!(
            "trained {} iterations, final nll_proxy {:.6}, rank_loss {:.6}; checkpoint {}",
            report.records.len(),
            r.nll_proxy,
            r.rank_loss,
            ckpt.display()
        ),
        None => format!("0 iterations; checkpoint {}", ckpt.display()),
    }
}

fn check_compatible(meta: &CheckpointMeta, data: &[Sample]) -> Result<(), CliError> {
    let (rows, cols, imu_len) = dataset_dims(data)?;
    let m = &meta.model;
    if (m.rows, m.cols, m.imu_len) != (rows, cols, imu_len) {
        return Err(CliError::Mismatch(format!(
            "checkpoint expects {}x{} grids with IMU length {}, data has {rows}x{cols} with IMU length {imu_len}",
            m.rows, m.cols, m.imu_len
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub data: PathBuf,
    pub ckpt: PathBuf,
    pub out: PathBuf,
    pub uniform: bool,
    pub seed: u64,
}

pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_JSON: &str = "eval.json";

pub fn eval(opts: &EvalOptions) -> Result<(Output, EvalReport), CliError> {
    let (net, meta) = load_checkpoint(&opts.ckpt)?;
    let data = read_dataset(&opts.data)?;
    check_compatible(&meta, &data)?;
    if !data.iter().any(|s| s.split == Split::Test) {
        return Err(CliError::Mismatch("dataset has no test split".into()));
    }
    let mdp = grid(meta.model.rows, meta.model.cols, meta.gamma)?;
    let cfg = EvalConfig {
        uniform_baseline: opts.uniform,
        seed: opts.seed,
        ..EvalConfig::default()
    };
    let report = evaluate(&net, &mdp, &data, &cfg).map_err(|e| match e {
        MetricError::NoTestSamples => CliError::Mismatch(e.to_string()),
        MetricError::NoValidPairs => CliError::Labels(format!("rank accuracy: {e}")),
        e => CliError::Numeric(e.to_string()),
    })?;
    create_dir(&opts.out)?;
    write_file(
        &opts.out.join(EVAL_CSV),
        format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()),
    )?;
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    write_file(&opts.out.join(EVAL_JSON), text)?;
    let mut warnings = vec![];
    if report.nll_infinite > 0 {
        warnings.push(format!(
            "{} test demonstrations have zero probability under the model; nll averages the rest",
            report.nll_infinite
        ));
    }
    Ok((
        Output {
            lines: vec![EvalReport::CSV_HEADER.to_string(), report.csv_row()],
            warnings,
        },
        report,
    ))
}

#[derive(Clone, Debug)]
pub struct RenderOptions {
    pub data: PathBuf,
    pub ckpt: PathBuf,
    pub sample: String,
    pub out: PathBuf,
}

/// Output paths `<prefix>_{path,goal,svf}.pgm` and `<prefix>_overlay.ppm`.
pub fn render_paths(prefix: &Path) -> [PathBuf; 4] {
    let with = |suffix: &str| {
        let mut s = prefix.as_os_str().to_os_string();
        s.push(suffix);
        PathBuf::from(s)
    };
    [
        with("_path.pgm"),
        with("_goal.pgm"),
        with("_svf.pgm"),
        with("_overlay.ppm"),
    ]
}

pub fn render(opts: &RenderOptions) -> Result<Output, CliError> {
    let (net, meta) = load_checkpoint(&opts.ckpt)?;
    let data = read_dataset(&opts.data)?;
    let sample = data
        .iter()
        .find(|s| s.id == opts.sample)
        .ok_or_else(|| CliError::Usage(format!("no sample {:?} in the dataset", opts.sample)))?;
    check_compatible(&meta, std::slice::from_ref(sample))?;
    let mdp = grid(meta.model.rows, meta.model.cols, meta.gamma)?;
    let numeric = |e: String| CliError::Numeric(format!("sample {}: {e}", sample.id));
    let (maps, _) = net
        .forward(&sample.features, &sample.imu)
        .map_err(|e| numeric(e.to_string()))?;
    let sol = soft_value_iteration(&mdp, &maps, default_sweeps(&mdp), DEFAULT_TOL).map_err(|e| numeric(e.to_string()))?;
    let horizon = 2 * sample.trajectory.len();
    let prop = policy_propagation(&mdp, &sol.policy, &point_start(&mdp, sample.trajectory.start()), horizon, true)
        .map_err(|e| numeric(e.to_string()))?;
    if let Some(parent) = opts.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let [p_path, p_goal, p_svf, p_overlay] = render_paths(&opts.out);
    let mut out = Output::default();
    for (name, field, path) in [
        ("path reward", &maps.path, &p_path),
        ("goal reward", &maps.goal, &p_goal),
        ("expected SVF", &prop.svf.path, &p_svf),
    ] {
        let img = render_pgm(field);
        if img.degenerate {
            out.warnings.push(format!("{name} map is constant; rendered mid-gray"));
        }
        write_file(path, &img.bytes)?;
        out.lines.push(format!("wrote {}", path.display()));
    }
    write_file(&p_overlay, render_overlay(&sample.features, &sample.trajectory))?;
    out.lines.push(format!("wrote {}", p_overlay.display()));
    Ok(out)
}
