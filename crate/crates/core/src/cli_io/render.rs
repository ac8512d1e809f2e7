//! Binary PGM/PPM rendering of reward maps and trajectory overlays.

use crate::field::Field;
use crate::grid_mdp::Trajectory;
use crate::reward_model::{FeatureStack, CH_BLUE, CH_GREEN, CH_RED};

/// Gray level used for constant maps.
pub const DEGENERATE_GRAY: u8 = 128;
pub const PAST: [u8; 3] = [255, 0, 0];
pub const TERMINAL: [u8; 3] = [0, 255, 255];

/// A rendered image and whether the source map was constant.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub bytes: Vec<u8>,
    pub degenerate: bool,
}

pub fn pgm_header(rows: usize, cols: usize) -> String {
    format!("P5\n{cols} {rows}\n255\n")
}

/// Min-max normalizes `field` to 0..=255 as a P5 image.
pub fn render_pgm(field: &Field) -> Rendered {
    let (lo, hi) = field.min_max();
    let degenerate = !(hi > lo) || !(hi - lo).is_finite();
    let mut bytes = pgm_header(field.rows(), field.cols()).into_bytes();
    bytes.extend(field.as_slice().iter().map(|&v| {
        if degenerate {
            DEGENERATE_GRAY
        } else {
            (255.0 * (v - lo) / (hi - lo)).round().clamp(0.0, 255.0) as u8
        }
    }));
    Rendered { bytes, degenerate }
}

/// P6 image of the color channels with the trajectory's cells in red and
/// its terminal cell in cyan.
pub fn render_overlay(features: &FeatureStack, traj: &Trajectory) -> Vec<u8> {
    let (rows, cols) = (features.rows(), features.cols());
    let to_byte = |v: f64| (255.0 * v).round().clamp(0.0, 255.0) as u8;
    let mut px: Vec<[u8; 3]> = (0..rows * cols)
        .map(|i| {
            [
                to_byte(features.channel(CH_RED)[i]),
                to_byte(features.channel(CH_GREEN)[i]),
                to_byte(features.channel(CH_BLUE)[i]),
            ]
        })
        .collect();
    for step in &traj.steps {
        px[step.cell.row * cols + step.cell.col] = PAST;
    }
    px[traj.terminal.row * cols + traj.terminal.col] = TERMINAL;
    let mut bytes = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend(px.iter().flatten());
    bytes
}
