//! Oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use capsroute_core::capsule::{dynamic_routing, route_couplings};
use capsroute_core::config::DecoderKind;
use capsroute_core::decoder::{mask, CapsuleDecoder};
use capsroute_core::losses::{lstm_loss, margin_loss, reconstruction_loss};
use capsroute_core::lstm::TemporalLstm;
use capsroute_core::{CapsuleLstm, LossConfig, ModelConfig, ParamSet, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
/// Below this magnitude gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Uniform magnitude in `[lo, hi]` with random sign; keeps values off a kink at 0.
pub fn random_signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_f64(shape, &data).unwrap()
}

type Graph<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a;

/// Worst relative error between backward and central differences of
/// `Σ r ⊙ f(inputs)` for a fixed random `r`.
pub fn check_graph(inputs: &[Tensor<f64>], weight_seed: u64, f: &Graph<'_>) -> f64 {
    let scalarise = |tape: &mut Tape<f64>, y: Var, r: &Tensor<f64>| {
        let n = tape.data(y).len();
        let flat = tape.reshape(y, &[n]).unwrap();
        let w = tape.constant(r.clone());
        tape.dot(flat, w).unwrap()
    };
    let mut probe = Tape::<f64>::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let y = f(&mut probe, &vars);
    let r = random(&mut rng(weight_seed), &[probe.data(y).len()], -1.0, 1.0);

    let eval = |xs: &[Tensor<f64>]| {
        let mut tape = Tape::<f64>::inference();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&mut tape, &vars);
        let l = scalarise(&mut tape, y, &r);
        tape.data(l)[0]
    };

    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let y = f(&mut tape, &vars);
    let l = scalarise(&mut tape, y, &r);
    tape.backward(l).unwrap();

    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for e in 0..inputs[k].len() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[e] += FD_STEP;
            let up = eval(&xs);
            xs[k].data_mut()[e] -= 2.0 * FD_STEP;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[e], numeric));
        }
    }
    worst
}

/// Step used to re-check entries whose ±`FD_STEP` stencil crosses a relu kink.
pub const KINK_STEP: f64 = 1e-6;

/// Outcome of a finite-difference sweep over a parameter set.
#[derive(Debug, Default)]
pub struct GradReport {
    pub worst: f64,
    pub at: String,
    pub checked: usize,
    /// Entries whose stencil switched a relu; re-checked at `KINK_STEP`.
    pub kinks: usize,
}

impl GradReport {
    fn note(&mut self, err: f64, at: impl FnOnce() -> String) {
        if err > self.worst {
            self.worst = err;
            self.at = at();
        }
    }
}

/// Loss value plus the relu pattern of the forward pass that produced it.
pub type PatternedLoss<'a> = dyn Fn(&ParamSet<f64>) -> (f64, Vec<bool>) + 'a;

/// Central differences over every value of a parameter set. Entries whose
/// stencil changes the relu pattern are not differentiable at that scale and
/// are re-checked with a step small enough to stay on one linear piece.
pub fn check_params(params: &mut ParamSet<f64>, analytic: &[Vec<f64>], loss: &PatternedLoss<'_>) -> GradReport {
    let mut report = GradReport::default();
    let base_pattern = loss(params).1;
    for (slot, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        for e in 0..params.get(id).len() {
            let base = params.get(id).data()[e];
            let mut central = |h: f64| {
                params.get_mut(id).data_mut()[e] = base + h;
                let (up, pu) = loss(params);
                params.get_mut(id).data_mut()[e] = base - h;
                let (down, pd) = loss(params);
                params.get_mut(id).data_mut()[e] = base;
                ((up - down) / (2.0 * h), pu == base_pattern && pd == base_pattern)
            };
            let (mut numeric, smooth) = central(FD_STEP);
            if !smooth {
                report.kinks += 1;
                let (fine, fine_smooth) = central(KINK_STEP);
                assert!(fine_smooth, "{}[{e}] sits on a kink even at step {KINK_STEP}", params.name(id));
                numeric = fine;
            }
            report.checked += 1;
            let a = analytic[slot][e];
            report.note(rel_err(a, numeric), || format!("{}[{e}]: analytic {a} numeric {numeric}", params.name(id)));
        }
    }
    report
}

/// Named finite-difference checks over 20 random instances of every primitive.
pub fn primitive_suite(instances: u64) -> Vec<(&'static str, f64)> {
    let mut cases: Vec<(&'static str, f64)> = Vec::new();
    let mut run = |name: &'static str, make: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, f: &Graph<'_>| {
        let mut worst = 0.0f64;
        for k in 0..instances {
            let mut r = rng(1000 + k);
            let inputs = make(&mut r);
            worst = worst.max(check_graph(&inputs, 7 + k, f));
        }
        cases.push((name, worst));
    };

    run("add", &|r| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[3, 4], -1.0, 1.0)], &|t, v| t.add(v[0], v[1]).unwrap());
    run("sub", &|r| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[3, 4], -1.0, 1.0)], &|t, v| t.sub(v[0], v[1]).unwrap());
    run("mul", &|r| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[3, 4], -1.0, 1.0)], &|t, v| t.mul(v[0], v[1]).unwrap());
    run("affine", &|r| vec![random(r, &[5], -1.0, 1.0)], &|t, v| t.affine(v[0], -1.7, 0.3));
    run("relu", &|r| vec![random_signed(r, &[6], 0.05, 1.0)], &|t, v| t.relu(v[0]));
    run("sigmoid", &|r| vec![random(r, &[6], -3.0, 3.0)], &|t, v| t.sigmoid(v[0]));
    run("tanh", &|r| vec![random(r, &[6], -2.0, 2.0)], &|t, v| t.tanh(v[0]));
    run("log", &|r| vec![random(r, &[6], 0.2, 2.0)], &|t, v| t.log(v[0], 1e-12));
    run("matmul", &|r| vec![random(r, &[3, 3], -1.0, 1.0), random(r, &[3, 3], -1.0, 1.0)], &|t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
    run(
        "conv2d",
        &|r| vec![random(r, &[1, 5, 5], -1.0, 1.0), random(r, &[2, 1, 3, 3], -1.0, 1.0), random(r, &[2], -0.5, 0.5)],
        &|t, v| t.conv2d(v[0], v[1], v[2], 1, 0).unwrap(),
    );
    run(
        "conv2d stride 2 padded",
        &|r| vec![random(r, &[2, 6, 6], -1.0, 1.0), random(r, &[3, 2, 3, 3], -1.0, 1.0), random(r, &[3], -0.5, 0.5)],
        &|t, v| t.conv2d(v[0], v[1], v[2], 2, 1).unwrap(),
    );
    run(
        "conv_transpose2d",
        &|r| vec![random(r, &[2, 3, 3], -1.0, 1.0), random(r, &[2, 3, 3, 3], -1.0, 1.0), random(r, &[3], -0.5, 0.5)],
        &|t, v| t.conv_transpose2d(v[0], v[1], v[2], 2, 1, 1).unwrap(),
    );
    run("softmax", &|r| vec![random(r, &[5], -2.0, 2.0)], &|t, v| t.softmax(v[0]));
    run("norm_last", &|r| vec![random_signed(r, &[3, 4], 0.1, 1.0)], &|t, v| t.norm_last(v[0]));
    run("l2norm", &|r| vec![random_signed(r, &[4], 0.1, 1.0)], &|t, v| t.l2norm(v[0]));
    run("squash", &|r| vec![random_signed(r, &[3, 4], 0.05, 1.5)], &|t, v| t.squash(v[0]));
    run("reshape", &|r| vec![random(r, &[2, 6], -1.0, 1.0)], &|t, v| t.reshape(v[0], &[3, 4]).unwrap());
    run("concat", &|r| vec![random(r, &[2, 3], -1.0, 1.0), random(r, &[1, 3], -1.0, 1.0)], &|t, v| {
        t.concat(&[v[0], v[1]]).unwrap()
    });
    run("slice", &|r| vec![random(r, &[8], -1.0, 1.0)], &|t, v| t.slice(v[0], 2, 4).unwrap());
    run("select", &|r| vec![random(r, &[3, 4], -1.0, 1.0)], &|t, v| t.select(v[0], 1).unwrap());
    run("transpose_last2", &|r| vec![random(r, &[2, 3, 4], -1.0, 1.0)], &|t, v| t.transpose_last2(v[0]).unwrap());
    run("sum", &|r| vec![random(r, &[2, 3], -1.0, 1.0)], &|t, v| t.sum(v[0]));
    run("mean", &|r| vec![random(r, &[2, 3], -1.0, 1.0)], &|t, v| t.mean(v[0]));
    run("dot", &|r| vec![random(r, &[5], -1.0, 1.0), random(r, &[5], -1.0, 1.0)], &|t, v| t.dot(v[0], v[1]).unwrap());
    run(
        "capsule_votes",
        &|r| vec![random(r, &[4, 3], -1.0, 1.0), random(r, &[2, 2, 3, 4], -1.0, 1.0)],
        &|t, v| t.capsule_votes(v[0], v[1]).unwrap(),
    );
    // couplings come from a fixed instance so they stay constant under perturbation
    let fixed = random(&mut rng(99), &[4, 3, 5], -1.0, 1.0);
    let couplings = route_couplings(fixed.data(), 4, 3, 5, 3).unwrap().couplings;
    run("routing (frozen couplings)", &|r| vec![random(r, &[4, 3, 5], -1.0, 1.0)], &|t, v| {
        dynamic_routing(t, v[0], 3, Some(&couplings)).unwrap().capsules
    });
    run(
        "margin_loss",
        &|r| {
            // lengths kept off the 0.1 / 0.9 hinges
            let mut caps = random(r, &[3, 4], -1.0, 1.0);
            let targets = [0.5, 0.3, 0.95];
            for (row, &len) in caps.data_mut().chunks_mut(4).zip(&targets) {
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                row.iter_mut().for_each(|x| *x *= len / n);
            }
            vec![caps]
        },
        &|t, v| margin_loss(t, v[0], 0).unwrap(),
    );
    run(
        "reconstruction_loss",
        &|r| vec![random(r, &[1, 4, 4], 0.0, 1.0), random(r, &[1, 4, 4], 0.0, 1.0)],
        &|t, v| reconstruction_loss(t, v[0], v[1]).unwrap(),
    );
    run("lstm_loss", &|r| vec![random(r, &[4], -1.0, 1.0)], &|t, v| {
        let p = t.softmax(v[0]);
        lstm_loss(t, p, 2).unwrap()
    });
    cases
}

fn micro_lstm_config(h: usize, n: usize, len: usize) -> ModelConfig {
    ModelConfig {
        num_classes: n,
        lstm_hidden: h,
        sequence_length: len,
        ..ModelConfig::default()
    }
}

/// BPTT over `len` steps against central differences on every LSTM parameter.
pub fn lstm_bptt_check(h: usize, n: usize, len: usize, seed: u64) -> GradReport {
    let cfg = micro_lstm_config(h, n, len);
    let mut params = ParamSet::<f64>::new();
    let lstm = TemporalLstm::new(&cfg, &mut params, &mut rng(seed));
    let mut r = rng(seed + 1);
    let xs: Vec<Tensor<f64>> = (0..len).map(|_| random(&mut r, &[n], 0.0, 1.0)).collect();
    let loss = |params: &ParamSet<f64>, tape: &mut Tape<f64>| {
        let bound = params.bind(tape);
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let p = lstm.sequence_forward(tape, &bound, &vars).unwrap();
        (bound, lstm_loss(tape, p, 1).unwrap())
    };
    let mut tape = Tape::new();
    let (bound, l) = loss(&params, &mut tape);
    tape.backward(l).unwrap();
    let mut grads = params.zero_grads();
    params.accumulate_from(&tape, &bound, &mut grads);
    check_params(&mut params, &grads, &|p| {
        let mut t = Tape::inference();
        let (_, l) = loss(p, &mut t);
        (t.data(l)[0], t.relu_pattern())
    })
}

/// Reconstruction-loss gradient w.r.t. the selected capsule on a small FC decoder.
pub fn decoder_capsule_check(seed: u64) -> f64 {
    let cfg = ModelConfig {
        frame_size: 8,
        capsule_dim: 4,
        decoder: DecoderKind::Fc,
        decoder_hidden_sizes: vec![5, 6],
        num_classes: 3,
        conv_channels: vec![2],
        ..ModelConfig::default()
    };
    let mut params = ParamSet::<f64>::new();
    let dec = CapsuleDecoder::new(&cfg, &mut params, &mut rng(seed));
    let mut r = rng(seed + 1);
    let caps = random_signed(&mut r, &[3, 4], 0.1, 0.6);
    let image = random(&mut r, &[1, 8, 8], 0.0, 1.0);
    check_graph(&[caps, image], seed, &|t, v| {
        let bound = params.bind(t);
        let m = mask(t, v[0], Some(1)).unwrap();
        let out = dec.decode(t, &bound, &m).unwrap();
        reconstruction_loss(t, v[1], out).unwrap()
    })
}

/// The gradient-check micro model: 16×16 frames, N=2, d_p=4, H=8, 4 frames.
pub fn micro_model_config(decoder: DecoderKind) -> ModelConfig {
    ModelConfig {
        frame_size: 16,
        num_classes: 2,
        capsule_dim: 4,
        primary_capsule_dim: 4,
        primary_capsule_channels: 2,
        routing_iterations: 3,
        conv_channels: vec![3, 4],
        shared_vote_weights: true,
        decoder,
        decoder_hidden_sizes: if decoder == DecoderKind::Fc { vec![6, 8] } else { vec![4] },
        lstm_hidden: 8,
        sequence_length: 4,
    }
}

pub fn smooth_frames(cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
    let s = cfg.frame_size;
    let mut r = rng(seed);
    let (fx, fy, ph) = (r.random_range(0.2..0.6), r.random_range(0.2..0.6), r.random_range(0.0..6.0));
    let mut data = Vec::with_capacity(cfg.sequence_length * s * s);
    for t in 0..cfg.sequence_length {
        for y in 0..s {
            for x in 0..s {
                let v = 0.5 + 0.4 * (fx * x as f64 + fy * y as f64 + 0.7 * t as f64 + ph).sin();
                data.push(v);
            }
        }
    }
    Tensor::from_f64(&[cfg.sequence_length, 1, s, s], &data).unwrap()
}

/// Every parameter of the micro model against central differences of the
/// full sequence loss, routing couplings frozen at the base point.
pub fn full_model_check(decoder: DecoderKind, loss_config: LossConfig, seed: u64) -> GradReport {
    let cfg = micro_model_config(decoder);
    let mut model = CapsuleLstm::<f64>::new(&cfg, seed).unwrap();
    let frames = smooth_frames(&cfg, seed);
    let label = (seed % 2) as usize;
    let (grads, graph) = model.sequence_gradients(&frames, label, loss_config, None).unwrap();
    let couplings = graph.couplings;
    let template = model.clone();
    check_params(&mut model.params, &grads, &|p| {
        let mut tape = Tape::inference();
        let bound = p.bind(&mut tape);
        let g = template
            .sequence_graph(&mut tape, &bound, &frames, label, loss_config, Some(&couplings))
            .unwrap();
        (g.breakdown.total, tape.relu_pattern())
    })
}

/// Step-by-step routing written directly from the update rules, in f64.
pub struct ScriptedRouting {
    pub outputs: Vec<Vec<f64>>,
    pub couplings_per_iteration: Vec<Vec<Vec<f64>>>,
}

pub fn scripted_routing(votes: &[Vec<Vec<f64>>], iterations: usize) -> ScriptedRouting {
    let p = votes.len();
    let n = votes[0].len();
    let d = votes[0][0].len();
    let mut b = vec![vec![0.0; n]; p];
    let mut v = vec![vec![0.0; d]; n];
    let mut history = Vec::new();
    for _ in 0..iterations {
        // c_i = softmax over j of b_i
        let mut c = vec![vec![0.0; n]; p];
        for i in 0..p {
            let max = b[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = b[i].iter().map(|x| (x - max).exp()).sum();
            for j in 0..n {
                c[i][j] = (b[i][j] - max).exp() / z;
            }
        }
        // s_j = Σ_i c_ij û_j|i ; v_j = |s|²/(1+|s|²) · s/|s|
        for j in 0..n {
            let mut s = vec![0.0; d];
            for i in 0..p {
                for k in 0..d {
                    s[k] += c[i][j] * votes[i][j][k];
                }
            }
            let sq: f64 = s.iter().map(|x| x * x).sum();
            let norm = sq.sqrt();
            v[j] = if norm == 0.0 {
                vec![0.0; d]
            } else {
                s.iter().map(|x| sq / (1.0 + sq) * x / norm).collect()
            };
        }
        // b_ij += û_j|i · v_j
        for i in 0..p {
            for j in 0..n {
                b[i][j] += (0..d).map(|k| votes[i][j][k] * v[j][k]).sum::<f64>();
            }
        }
        history.push(c);
    }
    ScriptedRouting {
        outputs: v,
        couplings_per_iteration: history,
    }
}

/// Routing instance `(P, N, D, iterations, votes)`.
pub fn random_routing_instance(seed: u64) -> (usize, usize, usize, usize, Vec<Vec<Vec<f64>>>) {
    let mut r = rng(seed);
    let p = r.random_range(1..=4);
    let n = r.random_range(1..=3);
    let d = r.random_range(1..=4);
    let iters = r.random_range(1..=5);
    let votes = (0..p)
        .map(|_| (0..n).map(|_| (0..d).map(|_| r.random_range(-1.5..1.5)).collect()).collect())
        .collect();
    (p, n, d, iters, votes)
}

/// Largest deviation between the library routing and the scripted one, and
/// between any coupling row sum and 1.
pub fn routing_oracle_deviation(seed: u64) -> (f64, f64) {
    let (p, n, d, iters, votes) = random_routing_instance(seed);
    let flat: Vec<f64> = votes.iter().flatten().flatten().copied().collect();
    let mut tape = Tape::<f64>::inference();
    let u = tape.constant(Tensor::from_f64(&[p, n, d], &flat).unwrap());
    let routed = dynamic_routing(&mut tape, u, iters, None).unwrap();
    let oracle = scripted_routing(&votes, iters);

    let mut dev = 0.0f64;
    for (a, b) in tape.data(routed.capsules).iter().zip(oracle.outputs.iter().flatten()) {
        dev = dev.max((a - b).abs());
    }
    assert_eq!(routed.state.coupling_history.len(), iters);
    let mut row_dev = 0.0f64;
    for (lib, script) in routed.state.coupling_history.iter().zip(&oracle.couplings_per_iteration) {
        for (a, b) in lib.iter().zip(script.iter().flatten()) {
            dev = dev.max((a - b).abs());
        }
        for row in lib.chunks(n) {
            row_dev = row_dev.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    (dev, row_dev)
}

/// Config used by the desk-scale training tests: the reference topology with
/// narrower layers so a 30-epoch run fits in a few minutes on one core.
pub fn desk_train_config(text_extra: &str) -> capsroute_core::TrainConfig {
    let text = format!(
        "num_classes = 2\nconv_channels = 16, 32\nprimary_capsule_channels = 8\ndecoder_hidden_sizes = 64, 128\nlstm_hidden = 32\nlearning_rate = 0.001\nbatch_size = 4\naugment = false\nseed = 1\n{text_extra}"
    );
    capsroute_core::TrainConfig::parse(&text).unwrap()
}

/// Much smaller still, for tests that only need the loop to run.
pub fn tiny_train_config(text_extra: &str) -> capsroute_core::TrainConfig {
    let text = format!(
        "num_classes = 2\nconv_channels = 4, 8\nprimary_capsule_channels = 2\nprimary_capsule_dim = 4\ncapsule_dim = 8\ndecoder_hidden_sizes = 16, 32\nlstm_hidden = 8\nlearning_rate = 0.001\nbatch_size = 4\nseed = 3\n{text_extra}"
    );
    capsroute_core::TrainConfig::parse(&text).unwrap()
}
