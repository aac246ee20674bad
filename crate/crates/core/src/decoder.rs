//! Reconstruction decoder fed by a single class capsule.

use rand::Rng;

use crate::capsule::longest_capsule;
use crate::config::{DecoderKind, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{uniform, BoundParams, ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Element;

/// The one capsule row kept for reconstruction.
#[derive(Clone, Copy, Debug)]
pub struct MaskedCapsule {
    /// `[D]`
    pub vector: Var,
    pub class_index: usize,
}

/// Keeps row `true_label` when training, otherwise the longest row.
pub fn mask<T: Element>(tape: &mut Tape<T>, capsules: Var, true_label: Option<usize>) -> Result<MaskedCapsule> {
    let shape = tape.shape(capsules).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("mask", format!("capsules must be [N, D], got {shape:?}")));
    }
    let class_index = match true_label {
        Some(l) if l >= shape[0] => {
            return Err(Error::Label {
                label: l,
                num_classes: shape[0],
            })
        }
        Some(l) => l,
        None => longest_capsule(tape.data(capsules), shape[1]),
    };
    let vector = tape.select(capsules, class_index)?;
    Ok(MaskedCapsule { vector, class_index })
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

impl Dense {
    fn new<T: Element, R: Rng>(params: &mut ParamSet<T>, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Dense {
            weight: params.register(format!("{name}.weight"), uniform(rng, &[fan_out, fan_in], bound)),
            bias: params.register(format!("{name}.bias"), uniform(rng, &[fan_out], bound)),
        }
    }

    /// `[in]` -> `[out]`
    pub(crate) fn forward<T: Element>(&self, tape: &mut Tape<T>, bound: &BoundParams, x: Var) -> Result<Var> {
        let n_in = tape.data(x).len();
        let col = tape.reshape(x, &[n_in, 1])?;
        let y = tape.matmul(bound[self.weight], col)?;
        let n_out = tape.shape(y)[0];
        let y = tape.reshape(y, &[n_out])?;
        tape.add(y, bound[self.bias])
    }
}

#[derive(Clone, Copy, Debug)]
struct Deconv {
    kernel: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
enum Layers {
    Fc(Vec<Dense>),
    Deconv {
        seed: Dense,
        channels: usize,
        side: usize,
        ups: Vec<Deconv>,
    },
}

#[derive(Clone, Debug)]
pub struct CapsuleDecoder {
    capsule_dim: usize,
    frame_size: usize,
    layers: Layers,
}

impl CapsuleDecoder {
    pub fn new<T: Element, R: Rng>(cfg: &ModelConfig, params: &mut ParamSet<T>, rng: &mut R) -> Self {
        let pixels = cfg.frame_size * cfg.frame_size;
        let layers = match cfg.decoder {
            DecoderKind::Fc => {
                let mut sizes = vec![cfg.capsule_dim];
                sizes.extend(&cfg.decoder_hidden_sizes);
                sizes.push(pixels);
                Layers::Fc(
                    sizes
                        .windows(2)
                        .enumerate()
                        .map(|(l, w)| Dense::new(params, rng, &format!("decoder.fc{l}"), w[0], w[1]))
                        .collect(),
                )
            }
            DecoderKind::Deconv => {
                let channels = cfg.decoder_hidden_sizes[0];
                let side = cfg.deconv_seed_side().expect("validated frame size");
                let seed = Dense::new(params, rng, "decoder.seed", cfg.capsule_dim, channels * side * side);
                let widths = [channels, (channels / 2).max(1), (channels / 4).max(1), 1];
                let ups = widths
                    .windows(2)
                    .enumerate()
                    .map(|(l, w)| {
                        let bound = 1.0 / ((w[0] * 9) as f64).sqrt();
                        Deconv {
                            kernel: params.register(format!("decoder.up{l}.kernel"), uniform(rng, &[w[0], w[1], 3, 3], bound)),
                            bias: params.register(format!("decoder.up{l}.bias"), uniform(rng, &[w[1]], bound)),
                        }
                    })
                    .collect();
                Layers::Deconv {
                    seed,
                    channels,
                    side,
                    ups,
                }
            }
        };
        CapsuleDecoder {
            capsule_dim: cfg.capsule_dim,
            frame_size: cfg.frame_size,
            layers,
        }
    }

    /// Reconstructs a `[1, S, S]` image with pixels in (0, 1).
    pub fn decode<T: Element>(&self, tape: &mut Tape<T>, bound: &BoundParams, capsule: &MaskedCapsule) -> Result<Var> {
        let x = capsule.vector;
        if tape.data(x).len() != self.capsule_dim {
            return Err(Error::dim(
                "decode",
                format!("expected a {}-dim capsule, got {:?}", self.capsule_dim, tape.shape(x)),
            ));
        }
        let s = self.frame_size;
        match &self.layers {
            Layers::Fc(layers) => {
                let mut h = x;
                for (l, dense) in layers.iter().enumerate() {
                    let z = dense.forward(tape, bound, h)?;
                    h = if l + 1 == layers.len() { tape.sigmoid(z) } else { tape.relu(z) };
                }
                tape.reshape(h, &[1, s, s])
            }
            Layers::Deconv {
                seed,
                channels,
                side,
                ups,
            } => {
                let z = seed.forward(tape, bound, x)?;
                let z = tape.relu(z);
                let mut h = tape.reshape(z, &[*channels, *side, *side])?;
                for (l, up) in ups.iter().enumerate() {
                    let z = tape.conv_transpose2d(h, bound[up.kernel], bound[up.bias], 2, 1, 1)?;
                    h = if l + 1 == ups.len() { tape.sigmoid(z) } else { tape.relu(z) };
                }
                Ok(h)
            }
        }
    }
}
