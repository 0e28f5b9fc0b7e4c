//! Motion data in a HumanML3D-style per-frame feature layout, plus a
//! procedural toy corpus of (motion, description, gold graph) triples.

mod dataset;
mod io;
mod toy;

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dataset::{make_dataset, random_params, Dataset, DatasetConfig, Manifest, ManifestEntry, Normalizer, Sample, Split};
pub use io::{load_motion, load_motion_expecting, save_motion};
pub use toy::{
    describe_toy_motion, lateral_displacement, root_trajectory, synthesize_toy_motion, ActionKind, Direction,
    PathShape, Speed, ToyAction, ToyMotionParams, TOY_FPS,
};

/// Joint count of the toy skeleton: root, two hands, two feet.
pub const TOY_JOINTS: usize = 5;

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("layout mismatch: expected {expected} joints, found {found}")]
    LayoutMismatch { expected: usize, found: usize },
    #[error("corrupt motion file: {0}")]
    CorruptFile(String),
    #[error("invalid motion: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-frame feature layout: root angular velocity, root linear velocity
/// (x, z), root height, local joint positions, joint velocities, 6D joint
/// rotations, and four foot contacts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub joints: usize,
}

impl Default for FeatureLayout {
    fn default() -> Self {
        FeatureLayout { joints: TOY_JOINTS }
    }
}

impl FeatureLayout {
    pub fn new(joints: usize) -> Self {
        FeatureLayout { joints }
    }

    pub fn width(&self) -> usize {
        4 + 12 * self.joints + 4
    }

    pub fn root_angular_velocity(&self) -> usize {
        0
    }

    pub fn root_velocity_x(&self) -> usize {
        1
    }

    pub fn root_velocity_z(&self) -> usize {
        2
    }

    pub fn root_height(&self) -> usize {
        3
    }

    pub fn joint_positions(&self) -> Range<usize> {
        4..4 + 3 * self.joints
    }

    pub fn joint_velocities(&self) -> Range<usize> {
        let s = 4 + 3 * self.joints;
        s..s + 3 * self.joints
    }

    pub fn joint_rotations(&self) -> Range<usize> {
        let s = 4 + 6 * self.joints;
        s..s + 6 * self.joints
    }

    pub fn contacts(&self) -> Range<usize> {
        let s = 4 + 12 * self.joints;
        s..s + 4
    }
}

/// `L × F` motion frames stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    frames: Vec<f64>,
    len: usize,
    pub fps: f64,
    pub layout: FeatureLayout,
}

impl MotionSequence {
    pub fn new(frames: Vec<f64>, fps: f64, layout: FeatureLayout) -> Result<Self, MotionError> {
        let w = layout.width();
        if frames.is_empty() || frames.len() % w != 0 {
            return Err(MotionError::Invalid(format!("{} values do not form frames of width {w}", frames.len())));
        }
        if let Some(i) = frames.iter().position(|x| !x.is_finite()) {
            return Err(MotionError::Invalid(format!("non-finite value at index {i}")));
        }
        let len = frames.len() / w;
        let m = MotionSequence { frames, len, fps, layout };
        for t in 0..len {
            if m.frame(t)[layout.contacts()].iter().any(|&c| c != 0.0 && c != 1.0) {
                return Err(MotionError::Invalid(format!("contact feature at frame {t} is not binary")));
            }
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn width(&self) -> usize {
        self.layout.width()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.width();
        &self.frames[t * w..(t + 1) * w]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.frames
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.frames.chunks(self.width())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.frames().map(<[f64]>::to_vec).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_width_formula() {
        for j in 1..30 {
            let l = FeatureLayout::new(j);
            assert_eq!(l.width(), 4 + 12 * j + 4);
            assert_eq!(l.contacts().end, l.width());
            assert_eq!(l.joint_rotations().end, l.contacts().start);
        }
        assert_eq!(FeatureLayout::default().width(), 68);
    }

    #[test]
    fn rejects_bad_frames() {
        let l = FeatureLayout::default();
        assert!(MotionSequence::new(vec![0.0; 67], 10.0, l).is_err());
        assert!(MotionSequence::new(vec![], 10.0, l).is_err());
        let mut f = vec![0.0; 68];
        f[l.contacts().start] = 0.5;
        assert!(MotionSequence::new(f, 10.0, l).is_err());
        let mut f = vec![0.0; 68];
        f[3] = f64::NAN;
        assert!(MotionSequence::new(f, 10.0, l).is_err());
    }
}
