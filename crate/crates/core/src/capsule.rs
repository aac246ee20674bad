//! Capsule encoder: conv stack, primary capsules, prediction vectors and
//! routing-by-agreement down to one capsule per class.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{uniform, BoundParams, ParamId, ParamSet};
use crate::tape::{softmax_row, Tape, Var};
use crate::tensor::Element;

/// Raw-value routing state after the last iteration.
///
/// `couplings` and `logits` are `[P, N]` row-major; `coupling_history` holds the
/// couplings used by each iteration in order.
#[derive(Clone, Debug)]
pub struct RoutingState<T> {
    pub logits: Vec<T>,
    pub couplings: Vec<T>,
    pub coupling_history: Vec<Vec<T>>,
    pub num_inputs: usize,
    pub num_outputs: usize,
}

/// Output of routing: the `[N, D]` class capsules and the routing state.
#[derive(Clone, Debug)]
pub struct Routed<T> {
    pub capsules: Var,
    pub state: RoutingState<T>,
}

fn squash_in_place(s: &mut [f64]) {
    let n = s.iter().map(|x| x * x).sum::<f64>().sqrt();
    let f = n / (1.0 + n * n);
    s.iter_mut().for_each(|x| *x *= f);
}

/// Iterates couplings on values only: `c = softmax_j(b)`, `s_j = Σ_i c_ij û_j|i`,
/// `v_j = squash(s_j)`, `b_ij += v_j·û_j|i`. Starts from `b = 0`.
pub fn route_couplings<T: Element>(votes: &[T], p: usize, n: usize, d: usize, iterations: usize) -> Result<RoutingState<T>> {
    if iterations < 1 {
        return Err(Error::Config("routing needs at least one iteration".into()));
    }
    if votes.len() != p * n * d {
        return Err(Error::dim(
            "dynamic_routing",
            format!("{} votes for P={p}, N={n}, D={d}", votes.len()),
        ));
    }
    let mut logits = vec![T::zero(); p * n];
    let mut history = Vec::with_capacity(iterations);
    let mut outputs = vec![0.0f64; n * d];
    for _ in 0..iterations {
        let couplings: Vec<T> = logits.chunks(n).flat_map(softmax_row).collect();

        outputs.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..p {
            for j in 0..n {
                let c = couplings[i * n + j].acc();
                let u = &votes[(i * n + j) * d..][..d];
                for (s, &x) in outputs[j * d..(j + 1) * d].iter_mut().zip(u) {
                    *s += c * x.acc();
                }
            }
        }
        for j in 0..n {
            squash_in_place(&mut outputs[j * d..(j + 1) * d]);
        }
        for i in 0..p {
            for j in 0..n {
                let u = &votes[(i * n + j) * d..][..d];
                let agreement: f64 = outputs[j * d..(j + 1) * d]
                    .iter()
                    .zip(u)
                    .map(|(v, x)| v * x.acc())
                    .sum();
                let b = &mut logits[i * n + j];
                *b = T::from_acc(b.acc() + agreement);
            }
        }
        history.push(couplings);
    }
    Ok(RoutingState {
        logits,
        couplings: history.last().cloned().unwrap(),
        coupling_history: history,
        num_inputs: p,
        num_outputs: n,
    })
}

/// Routes `[P, N, D]` votes to `[N, D]` capsules.
///
/// Couplings are computed on values and enter the tape as constants, so
/// gradients flow only through the final weighted sum and squash. `frozen`
/// replays previously computed couplings instead of iterating.
pub fn dynamic_routing<T: Element>(
    tape: &mut Tape<T>,
    votes: Var,
    iterations: usize,
    frozen: Option<&[T]>,
) -> Result<Routed<T>> {
    let s = tape.shape(votes).to_vec();
    if s.len() != 3 {
        return Err(Error::dim("dynamic_routing", format!("votes must be [P, N, D], got {s:?}")));
    }
    let (p, n, d) = (s[0], s[1], s[2]);
    let state = match frozen {
        Some(c) => RoutingState {
            logits: Vec::new(),
            couplings: c.to_vec(),
            coupling_history: vec![c.to_vec()],
            num_inputs: p,
            num_outputs: n,
        },
        None => route_couplings(tape.data(votes), p, n, d, iterations)?,
    };
    let weighted = tape.routing_combine(votes, &state.couplings)?;
    let capsules = tape.squash(weighted);
    Ok(Routed { capsules, state })
}

/// Class distribution over capsule lengths: `softmax(‖v_j‖)`, shape `[N]`.
pub fn capsule_probabilities<T: Element>(tape: &mut Tape<T>, capsules: Var) -> Result<Var> {
    let n = tape.shape(capsules)[0];
    let lengths = tape.norm_last(capsules);
    let lengths = tape.reshape(lengths, &[n])?;
    Ok(tape.softmax(lengths))
}

/// Index of the longest capsule, lowest index on ties.
pub fn longest_capsule<T: Element>(capsules: &[T], dim: usize) -> usize {
    argmax(capsules.chunks(dim).map(kernels::norm))
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvLayer {
    fn new<T: Element, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        let bound = 1.0 / ((c_in * 9) as f64).sqrt();
        ConvLayer {
            kernel: params.register(format!("{name}.kernel"), uniform(rng, &[c_out, c_in, 3, 3], bound)),
            bias: params.register(format!("{name}.bias"), uniform(rng, &[c_out], bound)),
            stride,
        }
    }

    fn forward<T: Element>(&self, tape: &mut Tape<T>, bound: &BoundParams, x: Var) -> Result<Var> {
        tape.conv2d(x, bound[self.kernel], bound[self.bias], self.stride, 0)
    }
}

/// Everything the encoder produces for one frame.
#[derive(Clone, Debug)]
pub struct EncoderOutput<T> {
    /// `[P, d_p]`, squashed.
    pub primary: Var,
    /// `[P, N, D]`
    pub votes: Var,
    /// `[N, D]`
    pub capsules: Var,
    pub routing: RoutingState<T>,
}

#[derive(Clone, Debug)]
pub struct CapsuleEncoder {
    frame_size: usize,
    convs: Vec<ConvLayer>,
    primary: ConvLayer,
    votes: ParamId,
    primary_channels: usize,
    primary_dim: usize,
    routing_iterations: usize,
}

impl CapsuleEncoder {
    pub fn new<T: Element, R: Rng>(cfg: &ModelConfig, params: &mut ParamSet<T>, rng: &mut R) -> Self {
        let mut c_in = 1;
        let mut convs = Vec::new();
        for (l, &c_out) in cfg.conv_channels.iter().enumerate() {
            let stride = if l == 0 { 1 } else { 2 };
            convs.push(ConvLayer::new(params, rng, &format!("encoder.conv{l}"), c_in, c_out, stride));
            c_in = c_out;
        }
        let primary = ConvLayer::new(
            params,
            rng,
            "encoder.primary",
            c_in,
            cfg.primary_capsule_channels * cfg.primary_capsule_dim,
            2,
        );
        let p = cfg.primary_capsule_count();
        let blocks = if cfg.shared_vote_weights {
            cfg.primary_capsule_channels
        } else {
            p
        };
        // Keeps the initial weighted sums inside the squash's responsive range.
        let bound = 1.0 / ((cfg.primary_capsule_dim * p) as f64).sqrt();
        let votes = params.register(
            "encoder.votes",
            uniform(
                rng,
                &[blocks, cfg.num_classes, cfg.primary_capsule_dim, cfg.capsule_dim],
                bound,
            ),
        );
        CapsuleEncoder {
            frame_size: cfg.frame_size,
            convs,
            primary,
            votes,
            primary_channels: cfg.primary_capsule_channels,
            primary_dim: cfg.primary_capsule_dim,
            routing_iterations: cfg.routing_iterations,
        }
    }

    pub fn vote_weights(&self) -> ParamId {
        self.votes
    }

    /// Maps a `[1, S, S]` frame to `[N, D]` capsules.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        frame: Var,
        frozen: Option<&[T]>,
    ) -> Result<EncoderOutput<T>> {
        let s = self.frame_size;
        if tape.shape(frame) != [1, s, s] {
            return Err(Error::dim(
                "encoder",
                format!("expected a [1, {s}, {s}] frame, got {:?}", tape.shape(frame)),
            ));
        }
        let mut x = frame;
        for conv in &self.convs {
            let y = conv.forward(tape, bound, x)?;
            x = tape.relu(y);
        }
        let maps = self.primary.forward(tape, bound, x)?;
        let grid = tape.shape(maps)[1] * tape.shape(maps)[2];
        // [C·d_p, g, g] -> [C, d_p, G] -> [C, G, d_p] -> [P, d_p]
        let maps = tape.reshape(maps, &[self.primary_channels, self.primary_dim, grid])?;
        let caps = tape.transpose_last2(maps)?;
        let caps = tape.reshape(caps, &[self.primary_channels * grid, self.primary_dim])?;
        let primary = tape.squash(caps);
        let votes = tape.capsule_votes(primary, bound[self.votes])?;
        let routed = dynamic_routing(tape, votes, self.routing_iterations, frozen)?;
        Ok(EncoderOutput {
            primary,
            votes,
            capsules: routed.capsules,
            routing: routed.state,
        })
    }
}
