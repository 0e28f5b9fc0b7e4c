//! Binary motion files: `STMO` magic, a little-endian header
//! `(version u32, joints u32, frames u32, width u32, fps f64)`, then the frames
//! as row-major `f64`.

use std::fs;
use std::path::Path;

use super::{FeatureLayout, MotionError, MotionSequence};

const MAGIC: &[u8; 4] = b"STMO";
const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 * 4 + 8;

pub fn save_motion(path: impl AsRef<Path>, m: &MotionSequence) -> Result<(), MotionError> {
    let mut buf = Vec::with_capacity(HEADER + 8 * m.as_slice().len());
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, m.layout.joints as u32, m.len() as u32, m.width() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&m.fps.to_le_bytes());
    for x in m.as_slice() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_motion(path: impl AsRef<Path>) -> Result<MotionSequence, MotionError> {
    decode(&fs::read(path)?, None)
}

/// Loads a motion and checks it uses `layout`.
pub fn load_motion_expecting(path: impl AsRef<Path>, layout: FeatureLayout) -> Result<MotionSequence, MotionError> {
    decode(&fs::read(path)?, Some(layout))
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn decode(b: &[u8], expect: Option<FeatureLayout>) -> Result<MotionSequence, MotionError> {
    if b.len() < HEADER {
        return Err(MotionError::CorruptFile(format!("file has {} bytes, header needs {HEADER}", b.len())));
    }
    if &b[..4] != MAGIC {
        return Err(MotionError::CorruptFile("bad magic".into()));
    }
    let version = u32_at(b, 4);
    if version != VERSION {
        return Err(MotionError::CorruptFile(format!("unsupported version {version}")));
    }
    let (joints, frames, width) = (u32_at(b, 8) as usize, u32_at(b, 12) as usize, u32_at(b, 16) as usize);
    let layout = FeatureLayout::new(joints);
    if layout.width() != width {
        return Err(MotionError::CorruptFile(format!("width {width} does not match {joints} joints")));
    }
    if let Some(e) = expect {
        if e != layout {
            return Err(MotionError::LayoutMismatch { expected: e.joints, found: joints });
        }
    }
    let fps = f64::from_le_bytes(b[20..28].try_into().unwrap());
    let body = &b[HEADER..];
    let need = frames * width * 8;
    if body.len() != need {
        return Err(MotionError::CorruptFile(format!("expected {need} bytes of frames, found {}", body.len())));
    }
    let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    MotionSequence::new(values, fps, layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motionrep::{synthesize_toy_motion, ActionKind, ToyAction, ToyMotionParams};

    fn sample() -> MotionSequence {
        synthesize_toy_motion(&ToyMotionParams::new(vec![ToyAction::new(ActionKind::Walk, 14)]), 2).unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let m = sample();
        save_motion(&p, &m).unwrap();
        assert_eq!(load_motion(&p).unwrap(), m);
    }

    #[test]
    fn truncation_and_layout_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        save_motion(&p, &sample()).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_motion(&p), Err(MotionError::CorruptFile(_))));
        fs::write(&p, &bytes).unwrap();
        let err = load_motion_expecting(&p, FeatureLayout::new(22)).unwrap_err();
        assert!(matches!(err, MotionError::LayoutMismatch { expected: 22, found: 5 }));
    }
}
