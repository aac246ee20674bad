//! Frame-sequence data: normalisation, window selection, augmentation,
//! manifests and a synthetic dataset generator.

pub mod image;
pub mod manifest;
pub mod synth;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use self::image::{load_frame, normalize_frame, GrayFrame};
pub use manifest::{
    load_dataset, load_sequence, stream_manifest, DatasetManifest, DatasetStream, LoadOptions, ManifestEntry, Split,
    SplitOptions,
};
pub use synth::{generate_synthetic, SyntheticSpec, MANIFEST_FILE};

pub const DEFAULT_SEQUENCE_LENGTH: usize = 16;

/// Rotation angles in degrees applied by [`augment_x8`], in output order.
pub const AUGMENT_ANGLES: [f64; 6] = [5.0, 10.0, 15.0, -5.0, -10.0, -15.0];

/// `L` consecutive `[1, S, S]` frames with one label.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    /// `[L, 1, S, S]`, pixels in `[0, 1]`.
    pub frames: Tensor<f32>,
    pub label: usize,
    pub source_id: String,
}

impl FrameSequence {
    pub fn from_frames(frames: &[GrayFrame], label: usize, source_id: impl Into<String>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::dim("frame_sequence", "no frames"))?;
        if first.width != first.height {
            return Err(Error::dim(
                "frame_sequence",
                format!("frames must be square, got {}x{}", first.width, first.height),
            ));
        }
        let side = first.width;
        let mut data = Vec::with_capacity(frames.len() * side * side);
        for f in frames {
            if f.width != side || f.height != side {
                return Err(Error::dim("frame_sequence", "frames differ in size"));
            }
            if f.pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::dim("frame_sequence", "pixel outside [0, 1]"));
            }
            data.extend_from_slice(&f.pixels);
        }
        Ok(FrameSequence {
            frames: Tensor::new(&[frames.len(), 1, side, side], data)?,
            label,
            source_id: source_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn side(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn frame_pixels(&self, t: usize) -> &[f32] {
        let n = self.side() * self.side();
        &self.frames.data()[t * n..(t + 1) * n]
    }

    pub fn frame(&self, t: usize) -> GrayFrame {
        GrayFrame::new(self.side(), self.side(), self.frame_pixels(t).to_vec())
    }

    pub fn frames(&self) -> Vec<GrayFrame> {
        (0..self.len()).map(|t| self.frame(t)).collect()
    }

    /// Applies the same per-frame transform to every frame.
    pub fn map_frames(&self, f: impl Fn(&GrayFrame) -> GrayFrame, suffix: &str) -> FrameSequence {
        let frames: Vec<GrayFrame> = self.frames().iter().map(|fr| {
            let mut out = f(fr);
            out.pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
            out
        }).collect();
        FrameSequence::from_frames(&frames, self.label, format!("{}{suffix}", self.source_id))
            .expect("transform keeps the frame geometry")
    }
}

/// The contiguous window of `window` frames starting at `floor((L - window) / 2)`.
pub fn select_middle_frames<F: Clone>(frames: &[F], window: usize) -> Result<Vec<F>> {
    if frames.len() < window {
        return Err(Error::SequenceTooShort {
            len: frames.len(),
            needed: window,
        });
    }
    let start = (frames.len() - window) / 2;
    Ok(frames[start..start + window].to_vec())
}

/// `[original, mirror, rotations by +5, +10, +15, -5, -10, -15 degrees]`, one
/// transform shared by all frames of the sequence.
pub fn augment_x8(seq: &FrameSequence) -> Vec<FrameSequence> {
    let mut out = Vec::with_capacity(8);
    out.push(seq.clone());
    out.push(seq.map_frames(GrayFrame::mirror, "#mirror"));
    for deg in AUGMENT_ANGLES {
        out.push(seq.map_frames(|f| f.rotate(deg), &format!("#rot{deg:+}")));
    }
    out
}

/// Directory names used by [`preprocess`] for the members of [`augment_x8`].
pub const AUGMENT_NAMES: [&str; 8] = ["original", "mirror", "rot+5", "rot+10", "rot+15", "rot-5", "rot-10", "rot-15"];

/// Writes the frames as `frame_0000.png`, ... into `dir`.
pub fn save_sequence(seq: &FrameSequence, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (t, frame) in seq.frames().iter().enumerate() {
        frame.save_png(&dir.join(format!("frame_{t:04}.png")))?;
    }
    Ok(())
}

/// Normalises one directory of raw frames, keeps the middle `length`, and
/// writes the result to `output` (or one subdirectory per augmented variant).
/// Returns the directories written.
pub fn preprocess(input: &Path, output: &Path, length: usize, side: usize, augment: bool) -> Result<Vec<PathBuf>> {
    let seq = manifest::load_sequence(input, 0, length, side)?;
    if !augment {
        save_sequence(&seq, output)?;
        return Ok(vec![output.to_path_buf()]);
    }
    let mut dirs = Vec::with_capacity(8);
    for (variant, name) in augment_x8(&seq).iter().zip(AUGMENT_NAMES) {
        let dir = output.join(name);
        save_sequence(variant, &dir)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq() -> FrameSequence {
        let frames: Vec<GrayFrame> = (0..16)
            .map(|t| GrayFrame::new(8, 8, (0..64).map(|i| ((i * 7 + t) % 64) as f32 / 63.0).collect()))
            .collect();
        FrameSequence::from_frames(&frames, 2, "s").unwrap()
    }

    #[test]
    fn middle_window_index_arithmetic() {
        let idx: Vec<usize> = (0..32).collect();
        assert_eq!(select_middle_frames(&idx[..16], 16).unwrap(), idx[..16].to_vec());
        assert_eq!(select_middle_frames(&idx, 16).unwrap(), (8..24).collect::<Vec<_>>());
        assert_eq!(select_middle_frames(&idx[..17], 16).unwrap(), (0..16).collect::<Vec<_>>());
        assert!(matches!(
            select_middle_frames(&idx[..15], 16),
            Err(Error::SequenceTooShort { len: 15, needed: 16 })
        ));
    }

    #[test]
    fn augmentation_counts_and_members() {
        let s = seq();
        let out = augment_x8(&s);
        assert_eq!(out.len(), 8);
        assert_eq!(out[0], s);
        for a in &out {
            assert_eq!(a.label, s.label);
            assert_eq!(a.len(), 16);
            assert!(a.frames.data().iter().all(|p| (0.0..=1.0).contains(p)));
        }
        let twice = out[1].map_frames(GrayFrame::mirror, "");
        assert_eq!(twice.frames, s.frames);
    }
}
