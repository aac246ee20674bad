//! The full sequence model: per-frame capsule encoder and decoder feeding a
//! temporal LSTM, with the joint loss and its gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::capsule::{capsule_probabilities, CapsuleEncoder};
use crate::config::ModelConfig;
use crate::decoder::{mask, CapsuleDecoder};
use crate::error::{Error, Result};
use crate::losses::{lstm_loss, margin_from_lengths, margin_loss, reconstruction_loss, total_loss, LossBreakdown, LossConfig, LstmHeadLoss};
use crate::lstm::{classify, TemporalLstm};
use crate::params::{BoundParams, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct CapsuleLstm<T: Element = f32> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub encoder: CapsuleEncoder,
    pub decoder: CapsuleDecoder,
    pub lstm: TemporalLstm,
}

/// Handles into a sequence graph built by [`CapsuleLstm::sequence_graph`].
#[derive(Clone, Debug)]
pub struct SequenceGraph<T> {
    pub loss: Var,
    /// `[N]` LSTM output distribution.
    pub prediction: Var,
    /// One `[N]` capsule distribution per frame.
    pub frame_probs: Vec<Var>,
    /// Final routing couplings per frame, `[P·N]` each.
    pub couplings: Vec<Vec<T>>,
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub class: usize,
}

/// Summed gradients and losses of a batch, already divided by its size.
#[derive(Clone, Debug)]
pub struct BatchGradients<T> {
    pub grads: Vec<Vec<T>>,
    pub loss: LossBreakdown,
    /// Predicted class per sequence, in batch order.
    pub predictions: Vec<usize>,
}

impl<T: Element> CapsuleLstm<T> {
    /// Builds the model with parameters drawn from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = CapsuleEncoder::new(config, &mut params, &mut rng);
        let decoder = CapsuleDecoder::new(config, &mut params, &mut rng);
        let lstm = TemporalLstm::new(config, &mut params, &mut rng);
        Ok(CapsuleLstm {
            config: config.clone(),
            params,
            encoder,
            decoder,
            lstm,
        })
    }

    /// Same architecture, parameters converted to another element type.
    pub fn cast<U: Element>(&self) -> CapsuleLstm<U> {
        CapsuleLstm {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            lstm: self.lstm.clone(),
        }
    }

    fn check_frames(&self, frames: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        let want = [c.sequence_length, 1, c.frame_size, c.frame_size];
        if frames.shape() != want {
            return Err(Error::dim(
                "sequence",
                format!("expected frames {want:?}, got {:?}", frames.shape()),
            ));
        }
        Ok(())
    }

    fn frame_var(&self, tape: &mut Tape<T>, frames: &Tensor<T>, t: usize) -> Var {
        let s = self.config.frame_size;
        let n = s * s;
        let px = frames.data()[t * n..(t + 1) * n].to_vec();
        tape.constant(Tensor::new(&[1, s, s], px).expect("frame shape"))
    }

    /// Records the whole sequence loss on `tape`. `frozen` replays per-frame
    /// routing couplings instead of routing afresh.
    pub fn sequence_graph(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        frames: &Tensor<T>,
        label: usize,
        loss_config: LossConfig,
        frozen: Option<&[Vec<T>]>,
    ) -> Result<SequenceGraph<T>> {
        self.check_frames(frames)?;
        if label >= self.config.num_classes {
            return Err(Error::Label {
                label,
                num_classes: self.config.num_classes,
            });
        }
        let len = self.config.sequence_length;
        if frozen.is_some_and(|f| f.len() != len) {
            return Err(Error::Contract(format!("need frozen couplings for {len} frames")));
        }
        let mut margins = Vec::with_capacity(len);
        let mut recons = Vec::with_capacity(len);
        let mut frame_probs = Vec::with_capacity(len);
        let mut couplings = Vec::with_capacity(len);
        for t in 0..len {
            let frame = self.frame_var(tape, frames, t);
            let out = self
                .encoder
                .forward(tape, bound, frame, frozen.map(|f| f[t].as_slice()))?;
            margins.push(margin_loss(tape, out.capsules, label)?);
            if loss_config.uses_reconstruction() {
                let masked = mask(tape, out.capsules, Some(label))?;
                let image = self.decoder.decode(tape, bound, &masked)?;
                recons.push(reconstruction_loss(tape, frame, image)?);
            }
            frame_probs.push(capsule_probabilities(tape, out.capsules)?);
            couplings.push(out.routing.couplings);
        }
        let prediction = self.lstm.sequence_forward(tape, bound, &frame_probs)?;
        let head = match loss_config.lstm_head() {
            LstmHeadLoss::CrossEntropy => lstm_loss(tape, prediction, label)?,
            LstmHeadLoss::Margin => margin_from_lengths(tape, prediction, label)?,
        };

        let margin = tape.concat(&margins)?;
        let margin = tape.mean(margin);
        let mut loss = tape.add(margin, head)?;
        let mut recon_value = 0.0;
        if !recons.is_empty() {
            let recon = tape.concat(&recons)?;
            let recon = tape.mean(recon);
            recon_value = tape.data(recon)[0].acc();
            loss = tape.add(loss, recon)?;
        }
        let breakdown = total_loss(
            loss_config,
            tape.data(margin)[0].acc(),
            recon_value,
            tape.data(head)[0].acc(),
        );
        Ok(SequenceGraph {
            loss,
            prediction,
            frame_probs,
            couplings,
            breakdown,
        })
    }

    /// Loss value of one sequence without recording gradients.
    pub fn sequence_loss(
        &self,
        frames: &Tensor<T>,
        label: usize,
        loss_config: LossConfig,
        frozen: Option<&[Vec<T>]>,
    ) -> Result<SequenceGraph<T>> {
        let mut tape = Tape::inference();
        let bound = self.params.bind(&mut tape);
        self.sequence_graph(&mut tape, &bound, frames, label, loss_config, frozen)
    }

    /// Parameter gradients of one sequence's loss, in parameter order.
    pub fn sequence_gradients(
        &self,
        frames: &Tensor<T>,
        label: usize,
        loss_config: LossConfig,
        frozen: Option<&[Vec<T>]>,
    ) -> Result<(Vec<Vec<T>>, SequenceGraph<T>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let graph = self.sequence_graph(&mut tape, &bound, frames, label, loss_config, frozen)?;
        tape.backward(graph.loss)?;
        let mut grads = self.params.zero_grads();
        self.params.accumulate_from(&tape, &bound, &mut grads);
        Ok((grads, graph))
    }

    /// Mean gradient and loss over a batch. Sequences are processed in
    /// parallel and reduced in batch order, so the result does not depend on
    /// the thread count.
    pub fn batch_gradients(&self, batch: &[(&Tensor<T>, usize)], loss_config: LossConfig) -> Result<BatchGradients<T>> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let parts: Vec<(Vec<Vec<T>>, SequenceGraph<T>, usize)> = batch
            .par_iter()
            .map(|&(frames, label)| {
                let mut tape = Tape::new();
                let bound = self.params.bind(&mut tape);
                let graph = self.sequence_graph(&mut tape, &bound, frames, label, loss_config, None)?;
                tape.backward(graph.loss)?;
                let mut grads = self.params.zero_grads();
                self.params.accumulate_from(&tape, &bound, &mut grads);
                let class = classify(tape.data(graph.prediction));
                Ok((grads, graph, class))
            })
            .collect::<Result<_>>()?;

        let k = 1.0 / batch.len() as f64;
        let mut grads = self.params.zero_grads();
        let mut loss = LossBreakdown::default();
        let mut predictions = Vec::with_capacity(batch.len());
        for (g, graph, class) in &parts {
            for (acc, part) in grads.iter_mut().zip(g) {
                acc.iter_mut().zip(part).for_each(|(a, &b)| *a = *a + b);
            }
            loss.accumulate(&graph.breakdown);
            predictions.push(*class);
        }
        let scale = T::from_acc(k);
        grads.iter_mut().flatten().for_each(|g| *g = *g * scale);
        Ok(BatchGradients {
            grads,
            loss: loss.scaled(k),
            predictions,
        })
    }

    /// Sequence class distribution.
    pub fn predict(&self, frames: &Tensor<T>) -> Result<Prediction> {
        self.check_frames(frames)?;
        let mut tape = Tape::inference();
        let bound = self.params.bind(&mut tape);
        let mut probs = Vec::with_capacity(self.config.sequence_length);
        for t in 0..self.config.sequence_length {
            let frame = self.frame_var(&mut tape, frames, t);
            let out = self.encoder.forward(&mut tape, &bound, frame, None)?;
            probs.push(capsule_probabilities(&mut tape, out.capsules)?);
        }
        let pred = self.lstm.sequence_forward(&mut tape, &bound, &probs)?;
        let probs: Vec<f64> = tape.data(pred).iter().map(|p| p.acc()).collect();
        let class = classify(&probs);
        Ok(Prediction { probs, class })
    }
}
