//! JSON-lines dataset manifest with per-sample tensor files.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tensor::{Tensor, TensorError};
use crate::field::{Cell, Field};
use crate::grid_mdp::{Action, GridMdp, GridSpec, Step, Trajectory};
use crate::reward_model::{FeatureStack, ImuWindow, ENV_CHANNELS, IMU_CHANNELS};
use crate::sample::{Sample, Split};

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// One manifest line. Tensor paths are relative to the manifest directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub features: String,
    pub imu: String,
    /// `[row, col, action code]` per step.
    pub trajectory: Vec<[u32; 3]>,
    pub terminal: [u32; 2],
    pub aec: Option<f64>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_cost: Option<String>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("manifest line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("manifest line {line}: {path}: {source}")]
    Tensor {
        line: usize,
        path: PathBuf,
        source: TensorError,
    },
    #[error("manifest is empty")]
    Empty,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl ManifestEntry {
    pub fn from_trajectory(id: &str, traj: &Trajectory, split: Split) -> Self {
        Self {
            id: id.to_string(),
            features: format!("{id}.features.trav"),
            imu: format!("{id}.imu.trav"),
            trajectory: traj
                .steps
                .iter()
                .map(|s| [s.cell.row as u32, s.cell.col as u32, s.action.code() as u32])
                .collect(),
            terminal: [traj.terminal.row as u32, traj.terminal.col as u32],
            aec: traj.aec,
            split,
            gt_cost: None,
        }
    }

    pub fn decode_trajectory(&self) -> Result<Trajectory, String> {
        let steps = self
            .trajectory
            .iter()
            .map(|&[r, c, a]| {
                let action = u8::try_from(a)
                    .ok()
                    .and_then(Action::from_code)
                    .ok_or_else(|| format!("unknown action code {a}"))?;
                Ok(Step::new(Cell::new(r as usize, c as usize), action))
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(Trajectory {
            steps,
            terminal: Cell::new(self.terminal[0] as usize, self.terminal[1] as usize),
            aec: self.aec,
        })
    }
}

/// Writes samples as `manifest.jsonl` plus tensor files under `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf, ManifestError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut lines = Vec::new();
    for s in samples {
        let mut entry = ManifestEntry::from_trajectory(&s.id, &s.trajectory, s.split);
        let (rows, cols) = (s.features.rows(), s.features.cols());
        let feats = Tensor::f64(vec![ENV_CHANNELS, rows, cols], s.features.as_slice().to_vec()).expect("feature shape");
        write_tensor(dir, &entry.features, &feats)?;
        let imu = Tensor::f64(vec![s.imu.len(), IMU_CHANNELS], s.imu.as_slice().to_vec()).expect("imu shape");
        write_tensor(dir, &entry.imu, &imu)?;
        if let Some(gt) = &s.gt_cost {
            let name = format!("{}.gt_cost.trav", s.id);
            write_tensor(dir, &name, &Tensor::f64(vec![rows, cols], gt.as_slice().to_vec()).expect("cost shape"))?;
            entry.gt_cost = Some(name);
        }
        lines.push(serde_json::to_string(&entry).expect("manifest entry serializes"));
    }
    let path = dir.join(MANIFEST_NAME);
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    for line in lines {
        writeln!(f, "{line}").map_err(io_err(&path))?;
    }
    Ok(path)
}

fn write_tensor(dir: &Path, name: &str, t: &Tensor) -> Result<(), ManifestError> {
    let path = dir.join(name);
    t.write(&path).map_err(|e| match e {
        TensorError::Io(source) => ManifestError::Io { path, source },
        other => unreachable!("{other}"),
    })
}

/// Manifest path for a dataset given as a directory or a manifest file.
pub fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_NAME)
    } else {
        data.to_path_buf()
    }
}

/// Parses a single manifest line (1-based `line` for errors).
pub fn parse_line(text: &str, line: usize) -> Result<ManifestEntry, ManifestError> {
    serde_json::from_str(text).map_err(|e| ManifestError::Line {
        line,
        msg: e.to_string(),
    })
}

/// Reads a manifest and all tensors it references.
pub fn read_dataset(data: &Path) -> Result<Vec<Sample>, ManifestError> {
    let path = manifest_path(data);
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let entry = parse_line(raw, line)?;
        out.push(load_entry(&dir, &entry, line)?);
    }
    if out.is_empty() {
        return Err(ManifestError::Empty);
    }
    Ok(out)
}

fn load_tensor(dir: &Path, name: &str, line: usize) -> Result<Tensor, ManifestError> {
    let path = dir.join(name);
    Tensor::read(&path).map_err(|source| ManifestError::Tensor { line, path, source })
}

fn load_entry(dir: &Path, entry: &ManifestEntry, line: usize) -> Result<Sample, ManifestError> {
    let bad = |msg: String| ManifestError::Line { line, msg };
    let feats = load_tensor(dir, &entry.features, line)?;
    if feats.dims.len() != 3 || feats.dims[0] != ENV_CHANNELS {
        return Err(bad(format!("features tensor has dims {:?}, expected [{ENV_CHANNELS}, rows, cols]", feats.dims)));
    }
    let (rows, cols) = (feats.dims[1], feats.dims[2]);
    let features = FeatureStack::new(rows, cols, feats.data.to_f64()).map_err(|e| bad(e.to_string()))?;
    let imu_t = load_tensor(dir, &entry.imu, line)?;
    if imu_t.dims.len() != 2 || imu_t.dims[1] != IMU_CHANNELS {
        return Err(bad(format!("imu tensor has dims {:?}, expected [T, {IMU_CHANNELS}]", imu_t.dims)));
    }
    let imu = ImuWindow::new(imu_t.dims[0], imu_t.data.to_f64()).map_err(|e| bad(e.to_string()))?;
    let gt_cost = match &entry.gt_cost {
        Some(name) => {
            let t = load_tensor(dir, name, line)?;
            t.expect_dims(&[rows, cols]).map_err(|e| bad(format!("gt_cost: {e}")))?;
            Some(Field::from_vec(rows, cols, t.data.to_f64()))
        }
        None => None,
    };
    let trajectory = entry.decode_trajectory().map_err(bad)?;
    let mdp = GridMdp::new(GridSpec::new(rows, cols)).map_err(|e| bad(e.to_string()))?;
    mdp.validate_trajectory(&trajectory)
        .map_err(|v| bad(format!("invalid trajectory: {v}")))?;
    Ok(Sample {
        id: entry.id.clone(),
        features,
        imu,
        trajectory,
        gt_cost,
        split: entry.split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_dataset, WorldSpec};

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_dataset(&WorldSpec::new(6, 7, 4), 5, 0.6).unwrap();
        write_dataset(dir.path(), &data).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn bad_line_reports_number() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_dataset(&WorldSpec::new(5, 5, 1), 3, 0.6).unwrap();
        let path = write_dataset(dir.path(), &data).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[1] = "{\"id\": 3";
        fs::write(&path, lines.join("\n")).unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert!(matches!(err, ManifestError::Line { line: 2, .. }), "{err}");
    }

    #[test]
    fn invalid_trajectory_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_dataset(&WorldSpec::new(5, 5, 1), 2, 0.5).unwrap();
        let path = write_dataset(dir.path(), &data).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut entry = parse_line(text.lines().next().unwrap(), 1).unwrap();
        entry.terminal = [0, 0];
        entry.trajectory = vec![[4, 4, 4]];
        fs::write(&path, serde_json::to_string(&entry).unwrap()).unwrap();
        assert!(matches!(read_dataset(&path), Err(ManifestError::Line { line: 1, .. })));
    }

    #[test]
    fn missing_tensor_file() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_dataset(&WorldSpec::new(5, 5, 1), 2, 0.5).unwrap();
        write_dataset(dir.path(), &data).unwrap();
        fs::remove_file(dir.path().join("s00001.imu.trav")).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(ManifestError::Tensor { line: 2, .. })));
    }
}
