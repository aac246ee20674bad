//! Epoch loop, evaluation and thread-pool setup.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::metrics::ConfusionMatrix;
use super::record::{EpochRecord, RunRecord};
use crate::checkpoint::{config_diffs, save_model, Checkpoint};
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{stream_manifest, DatasetManifest, FrameSequence, LoadOptions, Split, SplitOptions};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::CapsuleLstm;

pub const THREADS_ENV: &str = "CAPSROUTE_THREADS";
pub const BEST_CHECKPOINT: &str = "best.caps";
pub const CONFUSION_FILE: &str = "confusion.csv";

/// Stream used for batch shuffling, distinct from parameter initialisation.
const SHUFFLE_STREAM: u64 = 1;

/// Sizes the global rayon pool from `CAPSROUTE_THREADS` (default: rayon's
/// choice). Returns the pool size in effect.
pub fn init_thread_pool() -> usize {
    let requested = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    if let Some(n) = requested {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("rayon pool already initialised; {THREADS_ENV} ignored");
        }
    }
    rayon::current_num_threads()
}

/// Sequences of one run, loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub labels: Vec<String>,
    /// Training sequences, augmented if enabled.
    pub train: Vec<FrameSequence>,
    /// Unaugmented training sequences, for train accuracy.
    pub train_eval: Vec<FrameSequence>,
    pub test: Vec<FrameSequence>,
}

impl TrainConfig {
    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            split: SplitOptions {
                test_fraction: self.test_fraction,
                seed: self.split_seed,
                subject_disjoint: self.subject_disjoint,
            },
            augment: self.augment,
            sequence_length: self.model.sequence_length,
            frame_size: self.model.frame_size,
            data_root: self.data_root.clone(),
        }
    }

    /// Takes `num_classes` from the manifest unless it was set explicitly,
    /// in which case the two must agree.
    pub fn resolve_classes(&mut self, manifest: &DatasetManifest) -> Result<()> {
        let n = manifest.num_classes();
        if self.num_classes_set && self.model.num_classes != n {
            return Err(Error::Config(format!(
                "num_classes = {} but the manifest has {n} labels",
                self.model.num_classes
            )));
        }
        self.model.num_classes = n;
        self.num_classes_set = true;
        self.model.validate()
    }
}

pub fn open_manifest(cfg: &TrainConfig, manifest_path: &Path) -> Result<DatasetManifest> {
    let mut m = DatasetManifest::load(manifest_path)?;
    if let Some(root) = &cfg.data_root {
        m.root = root.clone();
    }
    Ok(m)
}

/// Loads both splits of `manifest` as `cfg` prescribes.
pub fn load_data(cfg: &TrainConfig, manifest: &DatasetManifest) -> Result<Dataset> {
    let opts = cfg.load_options();
    let train: Vec<FrameSequence> = stream_manifest(manifest.clone(), Split::Train, &opts)?.collect::<Result<_>>()?;
    let train_eval = if opts.augment {
        train.iter().step_by(8).cloned().collect()
    } else {
        train.clone()
    };
    let test = stream_manifest(manifest.clone(), Split::Test, &opts)?.collect::<Result<_>>()?;
    Ok(Dataset {
        labels: manifest.labels.clone(),
        train,
        train_eval,
        test,
    })
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<usize>,
}

/// Predicts every sequence (in parallel, order preserved).
pub fn evaluate_sequences(model: &CapsuleLstm<f32>, seqs: &[FrameSequence], labels: &[String]) -> Result<Evaluation> {
    let predictions: Vec<usize> = seqs
        .par_iter()
        .map(|s| model.predict(&s.frames).map(|p| p.class))
        .collect::<Result<_>>()?;
    let confusion = ConfusionMatrix::from_pairs(
        labels.to_vec(),
        seqs.iter().map(|s| s.label).zip(predictions.iter().copied()),
    );
    Ok(Evaluation {
        accuracy: confusion.accuracy(),
        confusion,
        predictions,
    })
}

/// Evaluates a checkpoint on one split of a manifest. `cfg` supplies the
/// split settings; `architecture`, when given, is what the checkpoint must
/// match. The manifest's label count must match in any case.
pub fn evaluate(
    checkpoint: &Path,
    manifest_path: &Path,
    split: Split,
    cfg: &TrainConfig,
    architecture: Option<&ModelConfig>,
) -> Result<Evaluation> {
    let ck = Checkpoint::load(checkpoint)?;
    let manifest = open_manifest(cfg, manifest_path)?;
    let mut expected = architecture.cloned().unwrap_or_else(|| ck.config.clone());
    expected.num_classes = manifest.num_classes();
    let diffs = config_diffs(&expected, &ck.config);
    if !diffs.is_empty() {
        return Err(Error::Version { diffs });
    }
    let model = ck.into_model_for(&expected)?;
    let mut opts = cfg.load_options();
    opts.augment = false;
    opts.sequence_length = expected.sequence_length;
    opts.frame_size = expected.frame_size;
    let seqs: Vec<FrameSequence> = stream_manifest(manifest.clone(), split, &opts)?.collect::<Result<_>>()?;
    evaluate_sequences(&model, &seqs, &manifest.labels)
}

/// Model plus optimizer with a seeded batch order.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: CapsuleLstm<f32>,
    pub adam: AdamState,
    pub steps: u64,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = CapsuleLstm::new(&config.model, config.seed)?;
        let adam = AdamState::new(
            &model.params,
            AdamConfig {
                learning_rate: config.learning_rate,
                beta1: config.beta1,
                beta2: config.beta2,
                epsilon: config.epsilon,
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SHUFFLE_STREAM);
        Ok(Trainer {
            config: config.clone(),
            model,
            adam,
            steps: 0,
            rng,
        })
    }

    /// One optimizer step on a batch; returns its mean loss.
    pub fn step(&mut self, batch: &[&FrameSequence], epoch: usize) -> Result<LossBreakdown> {
        let items: Vec<_> = batch.iter().map(|s| (&s.frames, s.label)).collect();
        let out = self.model.batch_gradients(&items, self.config.loss_config)?;
        if let Some(component) = out.loss.first_non_finite() {
            return Err(Error::Divergence { epoch, component });
        }
        self.model.params.set_grads(out.grads)?;
        adam_step(&mut self.model.params, &mut self.adam)?;
        self.steps += 1;
        Ok(out.loss)
    }

    /// One shuffled pass over `train`; returns the mean loss per sequence.
    pub fn run_epoch(&mut self, train: &[FrameSequence], epoch: usize) -> Result<LossBreakdown> {
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = LossBreakdown::default();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&FrameSequence> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = self.step(&batch, epoch)?;
            total.accumulate(&loss.scaled(chunk.len() as f64));
        }
        Ok(total.scaled(1.0 / train.len() as f64))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub record: RunRecord,
    /// Parameters at the end of training.
    pub model: CapsuleLstm<f32>,
    /// Checkpoint of the best-test-accuracy epoch, if written.
    pub best_checkpoint: Option<PathBuf>,
    /// Evaluation of the final model on the test split (train split if test is empty).
    pub final_eval: Evaluation,
}

/// Trains on in-memory data. With `out`, writes `metrics.csv` and `run.json`
/// after every epoch, `best.caps` whenever test accuracy improves, and
/// `confusion.csv` at the end.
pub fn train(cfg: &TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    if !cfg.num_classes_set {
        cfg.model.num_classes = data.labels.len();
        cfg.num_classes_set = true;
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let mut trainer = Trainer::new(&cfg)?;
    let mut record = RunRecord::new(&cfg, data.labels.clone(), data.train_eval.len(), data.test.len());
    let mut best_checkpoint = None;
    let mut best_loss = f64::INFINITY;
    let mut stagnant = 0;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let loss = trainer.run_epoch(&data.train, epoch)?;
        let train_acc = evaluate_sequences(&trainer.model, &data.train_eval, &data.labels)?.accuracy;
        let test_acc = if data.test.is_empty() {
            None
        } else {
            Some(evaluate_sequences(&trainer.model, &data.test, &data.labels)?.accuracy)
        };
        log::info!(
            "epoch {epoch}: loss {:.5} (margin {:.5}, recon {:.6}, lstm {:.5}) train {:.3} test {:?}",
            loss.total,
            loss.margin,
            loss.reconstruction,
            loss.lstm,
            train_acc,
            test_acc
        );
        record.push(EpochRecord {
            epoch,
            loss,
            train_acc,
            test_acc,
            seconds: started.elapsed().as_secs_f64(),
        });

        let score = test_acc.unwrap_or(train_acc);
        if record.best_test_acc.is_none_or(|b| score > b) {
            record.best_test_acc = Some(score);
            record.best_epoch = Some(epoch);
            if let Some(dir) = out {
                let path = dir.join(BEST_CHECKPOINT);
                save_model(&trainer.model, &path)?;
                best_checkpoint = Some(path);
            }
        }
        if let Some(dir) = out {
            record.write(dir)?;
        }

        if loss.total < best_loss {
            best_loss = loss.total;
            stagnant = 0;
        } else {
            stagnant += 1;
            if cfg.early_stop_patience > 0 && stagnant >= cfg.early_stop_patience {
                record.stopped_early = true;
                break;
            }
        }
    }
    let eval_set = if data.test.is_empty() { &data.train_eval } else { &data.test };
    let final_eval = evaluate_sequences(&trainer.model, eval_set, &data.labels)?;
    if let Some(dir) = out {
        record.write(dir)?;
        std::fs::write(dir.join(CONFUSION_FILE), final_eval.confusion.to_csv())?;
    }
    Ok(TrainOutcome {
        record,
        model: trainer.model,
        best_checkpoint,
        final_eval,
    })
}

/// Loads the manifest's data and trains.
pub fn train_from_manifest(cfg: &TrainConfig, manifest_path: &Path, out: Option<&Path>) -> Result<TrainOutcome> {
    let manifest = open_manifest(cfg, manifest_path)?;
    let mut cfg = cfg.clone();
    cfg.resolve_classes(&manifest)?;
    let data = load_data(&cfg, &manifest)?;
    train(&cfg, &data, out)
}
