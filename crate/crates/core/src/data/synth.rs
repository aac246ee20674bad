//! Synthetic frame sequences: a bright bar drifting across a dark field.
//!
//! Class `k` of `K` fixes the bar orientation (`πk/K`) and the drift
//! direction (`2πk/K`); start position, angle, speed and pixel noise are
//! jittered per sequence from the seed.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::image::GrayFrame;
use super::manifest::{DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub seed: u64,
    pub frames: usize,
    pub side: usize,
    /// Pixels moved per frame.
    pub speed: f64,
    pub noise_std: f64,
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, per_class: usize, seed: u64) -> Self {
        SyntheticSpec {
            num_classes,
            per_class,
            seed,
            frames: 16,
            side: 48,
            speed: 1.5,
            noise_std: 0.03,
        }
    }

    pub fn label_name(&self, class: usize) -> String {
        let width = (self.num_classes.max(2) - 1).to_string().len();
        format!("class_{class:0width$}")
    }

    /// Unit drift direction of a class in image coordinates (y down).
    pub fn direction(&self, class: usize) -> (f64, f64) {
        let phi = 2.0 * PI * class as f64 / self.num_classes as f64;
        (phi.cos(), phi.sin())
    }

    /// Frames of one sequence, independent of every other sequence.
    pub fn render(&self, class: usize, index: usize) -> Vec<GrayFrame> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((class * self.per_class + index) as u64);
        let noise = Normal::new(0.0, self.noise_std.max(0.0)).expect("finite std");

        let theta = PI * class as f64 / self.num_classes as f64 + rng.random_range(-0.08..0.08);
        let (dx, dy) = self.direction(class);
        let speed = self.speed * rng.random_range(0.85..1.15);
        let centre = (self.side as f64 - 1.0) / 2.0;
        let span = speed * (self.frames as f64 - 1.0) / 2.0;
        let cx0 = centre - dx * span + rng.random_range(-2.0..2.0);
        let cy0 = centre - dy * span + rng.random_range(-2.0..2.0);
        let half_len = self.side as f64 / 6.0;
        let half_width = 1.5;
        let (bx, by) = (theta.cos(), theta.sin());

        (0..self.frames)
            .map(|t| {
                let cx = cx0 + dx * speed * t as f64;
                let cy = cy0 + dy * speed * t as f64;
                let mut pixels = Vec::with_capacity(self.side * self.side);
                for y in 0..self.side {
                    for x in 0..self.side {
                        let (rx, ry) = (x as f64 - cx, y as f64 - cy);
                        let along = (rx * bx + ry * by).clamp(-half_len, half_len);
                        let dist = ((rx - along * bx).powi(2) + (ry - along * by).powi(2)).sqrt();
                        let ink = (half_width + 0.5 - dist).clamp(0.0, 1.0);
                        let v = 0.1 + 0.8 * ink + noise.sample(&mut rng);
                        pixels.push(v.clamp(0.0, 1.0) as f32);
                    }
                }
                GrayFrame::new(self.side, self.side, pixels)
            })
            .collect()
    }
}

/// Writes `<out>/<label>/seq_NNNN/frame_NNNN.png` plus `<out>/manifest.tsv`
/// and returns the manifest.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<DatasetManifest> {
    if spec.num_classes < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs at least 2 classes, got {}",
            spec.num_classes
        )));
    }
    let labels: Vec<String> = (0..spec.num_classes).map(|k| spec.label_name(k)).collect();
    let mut entries = Vec::with_capacity(spec.num_classes * spec.per_class);
    for (class, label) in labels.iter().enumerate() {
        for index in 0..spec.per_class {
            let rel = PathBuf::from(label).join(format!("seq_{index:04}"));
            let dir = out.join(&rel);
            std::fs::create_dir_all(&dir)?;
            for (t, frame) in spec.render(class, index).iter().enumerate() {
                frame.save_png(&dir.join(format!("frame_{t:04}.png")))?;
            }
            entries.push(ManifestEntry {
                path: rel,
                label: label.clone(),
                subject: None,
            });
        }
    }
    let manifest = DatasetManifest::new(labels, entries, out.to_path_buf())?;
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Intensity-weighted centroid of the pixels above the frame mean.
pub fn bright_centroid(frame: &GrayFrame) -> (f64, f64) {
    let mean = frame.mean();
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for (i, &p) in frame.pixels.iter().enumerate() {
        let w = (p as f64 - mean).max(0.0);
        sx += w * (i % frame.width) as f64;
        sy += w * (i / frame.width) as f64;
        sw += w;
    }
    if sw == 0.0 {
        ((frame.width as f64 - 1.0) / 2.0, (frame.height as f64 - 1.0) / 2.0)
    } else {
        (sx / sw, sy / sw)
    }
}

/// Mean per-frame centroid displacement.
pub fn mean_displacement(frames: &[GrayFrame]) -> (f64, f64) {
    let c: Vec<(f64, f64)> = frames.iter().map(bright_centroid).collect();
    let steps = (c.len().max(2) - 1) as f64;
    let (first, last) = (c[0], c[c.len() - 1]);
    ((last.0 - first.0) / steps, (last.1 - first.1) / steps)
}
