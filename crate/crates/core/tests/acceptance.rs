//! End-to-end acceptance run. Prints one `PASS`/`FAIL` line per criterion and
//! fails if any criterion fails.
//!
//! `cargo test -p capsroute-core --test acceptance -- --nocapture`

mod common;

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use capsroute_core::checkpoint::{load_model, save_model, Checkpoint};
use capsroute_core::config::DecoderKind;
use capsroute_core::data::{
    augment_x8, generate_synthetic, select_middle_frames, stream_manifest, DatasetManifest, LoadOptions, ManifestEntry,
    Split, SplitOptions, SyntheticSpec, MANIFEST_FILE,
};
use capsroute_core::losses::{lstm_loss, margin_from_lengths, reconstruction_loss, total_loss};
use capsroute_core::train::{
    evaluate_sequences, load_data, moving_average, open_manifest, run_ablation, train, Dataset, Trainer,
};
use capsroute_core::{LossConfig, Tape, Tensor, TrainConfig};

use common::*;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// The 2-class synthetic set: 28 sequences, 20 for training and 8 held out.
const OVERFIT_EXTRA: &str = "epochs = 30\ntest_fraction = 0.2857142857142857\n";

fn synthetic_data(dir: &Path, cfg: &mut TrainConfig) -> Dataset {
    generate_synthetic(&SyntheticSpec::new(2, 14, 7), dir).unwrap();
    let manifest = open_manifest(cfg, &dir.join(MANIFEST_FILE)).unwrap();
    cfg.resolve_classes(&manifest).unwrap();
    let data = load_data(cfg, &manifest).unwrap();
    assert_eq!((data.train.len(), data.test.len()), (20, 8));
    data
}

fn routing_oracle() -> Verdict {
    let (mut dev, mut row) = (0.0f64, 0.0f64);
    for seed in 0..50 {
        let (d, r) = routing_oracle_deviation(seed);
        dev = dev.max(d);
        row = row.max(r);
    }
    verdict(dev <= 1e-6 && row <= 1e-6, format!("50 instances, max deviation {dev:.2e}, max row-sum error {row:.2e}"))
}

fn gradient_suite() -> Verdict {
    let mut failures = Vec::new();
    let mut worst_primitive = 0.0f64;
    for (name, err) in primitive_suite(3) {
        worst_primitive = worst_primitive.max(err);
        if err >= PRIMITIVE_TOL {
            failures.push(format!("{name} {err:.2e}"));
        }
    }
    let mut worst_model = 0.0f64;
    let mut kinks = 0;
    let mut checks = Vec::new();
    for (k, lc) in LossConfig::ALL.into_iter().enumerate() {
        checks.push((format!("model {lc}"), full_model_check(DecoderKind::Fc, lc, k as u64)));
    }
    checks.push(("model deconv".into(), full_model_check(DecoderKind::Deconv, LossConfig::MarginReconCrossEntropy, 5)));
    checks.push(("lstm bptt".into(), lstm_bptt_check(8, 2, 4, 1)));
    for (name, r) in checks {
        worst_model = worst_model.max(r.worst);
        kinks += r.kinks;
        if r.worst >= MODEL_TOL {
            failures.push(format!("{name} {:.2e} at {}", r.worst, r.at));
        }
    }
    let decoder = decoder_capsule_check(1);
    worst_model = worst_model.max(decoder);
    if decoder >= MODEL_TOL {
        failures.push(format!("decoder {decoder:.2e}"));
    }
    let mut detail = format!(
        "worst primitive {worst_primitive:.2e}, worst model {worst_model:.2e} ({kinks} kink entries re-checked)"
    );
    if !failures.is_empty() {
        let _ = write!(detail, "; failing: {}", failures.join(", "));
    }
    verdict(failures.is_empty(), detail)
}

fn loss_hand_values() -> Verdict {
    let mut tape = Tape::<f64>::inference();
    let mut margin = |norms: &[f64]| {
        let l = tape.constant(Tensor::from_f64(&[norms.len()], norms).unwrap());
        let m = margin_from_lengths(&mut tape, l, 0).unwrap();
        tape.data(m)[0]
    };
    let m1 = margin(&[0.6]);
    let m2 = margin(&[0.6, 0.6]);
    let mut tape = Tape::<f64>::inference();
    let ones = tape.constant(Tensor::full(&[1, 48, 48], 1.0));
    let zeros = tape.constant(Tensor::zeros(&[1, 48, 48]));
    let r = reconstruction_loss(&mut tape, ones, zeros).unwrap();
    let recon = tape.data(r)[0];
    let p = tape.constant(Tensor::from_f64(&[2], &[0.5, 0.5]).unwrap());
    let l = lstm_loss(&mut tape, p, 0).unwrap();
    let ce = tape.data(l)[0];
    let total = total_loss(LossConfig::MarginReconCrossEntropy, m1, recon, ce).total;

    let got = [m1, m2, recon, ce, total];
    let want = [0.09, 0.215, 5e-4, 0.34657, 0.43707];
    let worst = got.iter().zip(&want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    verdict(worst <= 1e-4, format!("values {got:.5?}, max deviation {worst:.2e}"))
}

fn overfit_oracle() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = desk_train_config(OVERFIT_EXTRA);
    let data = synthetic_data(dir.path(), &mut cfg);
    let outcome = train(&cfg, &data, None).unwrap();
    let record = &outcome.record;
    let first_full = record.epochs.iter().find(|e| e.train_acc == 1.0).map(|e| e.epoch);
    let test_acc = outcome.final_eval.accuracy;
    let totals = record.totals();
    let avg = moving_average(&totals, 20);
    let monotone = avg.windows(2).all(|w| w[1] <= w[0]);
    let pass = first_full.is_some() && test_acc >= 0.9 && monotone && !avg.is_empty();
    verdict(
        pass,
        format!(
            "100% train accuracy at epoch {first_full:?}, held-out accuracy {test_acc:.3} on {}, loss {:.4} -> {:.4}, 20-epoch average nonincreasing: {monotone}",
            data.test.len(),
            totals.first().copied().unwrap_or(f64::NAN),
            totals.last().copied().unwrap_or(f64::NAN),
        ),
    )
}

fn ablation_structure() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = desk_train_config(OVERFIT_EXTRA);
    let data = synthetic_data(&dir.path().join("data"), &mut cfg);
    let out = dir.path().join("ablation");
    let report = run_ablation(&cfg, &data, Some(&out)).unwrap();
    let csv = std::fs::read_to_string(out.join(capsroute_core::train::ablation::ABLATION_FILE)).unwrap();
    let rows = csv.lines().count() - 1;
    let accs: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("{}={}", r.loss_config, r.accuracy.map_or("failed".into(), |a| format!("{a:.3}"))))
        .collect();
    let beats_chance = report.rows.iter().all(|r| r.status == "ok" && r.accuracy.is_some_and(|a| a > 0.5));
    verdict(rows == 4 && beats_chance, format!("{rows} csv rows, accuracy {}", accs.join(" ")))
}

fn pipeline_counts() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SyntheticSpec::new(2, 2, 3);
    spec.frames = 18;
    let small = generate_synthetic(&spec, dir.path()).unwrap();

    let first = stream_manifest(small.clone(), Split::All, &LoadOptions::default()).unwrap().next().unwrap().unwrap();
    let augmented = augment_x8(&first).len();

    // 208 entries drawn round-robin from the four generated sequences
    let entries: Vec<ManifestEntry> = (0..208).map(|i| small.entries[i % small.entries.len()].clone()).collect();
    let big = DatasetManifest::new(small.labels.clone(), entries, small.root.clone()).unwrap();
    let opts = LoadOptions {
        split: SplitOptions {
            test_fraction: 0.0,
            ..SplitOptions::default()
        },
        augment: true,
        ..LoadOptions::default()
    };
    let stream = stream_manifest(big, Split::Train, &opts).unwrap();
    let expected = stream.expected_len();
    let mut streamed = 0;
    for seq in stream {
        seq.unwrap();
        streamed += 1;
    }

    let oracle = [(16, 0), (17, 0), (31, 7), (32, 8), (100, 42)];
    let middle_ok = oracle.iter().all(|&(len, start)| {
        let frames: Vec<usize> = (0..len).collect();
        select_middle_frames(&frames, 16).unwrap() == (start..start + 16).collect::<Vec<_>>()
    });
    verdict(
        augmented == 8 && streamed == 1664 && expected == 1664 && middle_ok,
        format!("augment_x8 gives {augmented}, 208 entries stream {streamed} sequences, middle-window oracle: {middle_ok}"),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = desk_train_config("epochs = 2\ntest_fraction = 0.2857142857142857\n");
    let data = synthetic_data(&dir.path().join("data"), &mut cfg);

    let ten_steps = |path: &Path| {
        let mut t = Trainer::new(&cfg).unwrap();
        for step in 0..10 {
            let batch: Vec<_> = (0..cfg.batch_size).map(|k| &data.train[(step * cfg.batch_size + k) % data.train.len()]).collect();
            t.step(&batch, 1).unwrap();
        }
        save_model(&t.model, path).unwrap();
        std::fs::read(path).unwrap()
    };
    let a = ten_steps(&dir.path().join("a.caps"));
    let b = ten_steps(&dir.path().join("b.caps"));
    let checkpoints_equal = a == b;

    let run = |name: &str| {
        let out = dir.path().join(name);
        let outcome = train(&cfg, &data, Some(&out)).unwrap();
        (std::fs::read(out.join("metrics.csv")).unwrap(), outcome.model)
    };
    let (m1, model) = run("run1");
    let (m2, _) = run("run2");
    let metrics_equal = m1 == m2;

    let path = dir.path().join("round.caps");
    save_model(&model, &path).unwrap();
    let loaded = load_model(&path).unwrap();
    let probs = |m: &capsroute_core::CapsuleLstm<f32>| -> Vec<Vec<f64>> {
        data.test.iter().map(|s| m.predict(&s.frames).unwrap().probs).collect()
    };
    let eval_a = evaluate_sequences(&model, &data.test, &data.labels).unwrap();
    let eval_b = evaluate_sequences(&loaded, &data.test, &data.labels).unwrap();
    let round_trip = probs(&model) == probs(&loaded)
        && eval_a.predictions == eval_b.predictions
        && eval_a.confusion == eval_b.confusion
        && Checkpoint::from_model(&loaded).to_bytes().unwrap() == Checkpoint::from_model(&model).to_bytes().unwrap();
    verdict(
        checkpoints_equal && metrics_equal && round_trip,
        format!("10-step checkpoints identical: {checkpoints_equal}, 2-epoch metrics.csv identical: {metrics_equal}, round-trip evaluation identical: {round_trip}"),
    )
}

type Criterion = (&'static str, Duration, fn() -> Verdict);

#[test]
fn acceptance() {
    let criteria: [Criterion; 7] = [
        ("routing oracle", Duration::from_secs(5), routing_oracle),
        ("gradient suite", Duration::from_secs(120), gradient_suite),
        ("loss hand values", Duration::from_secs(1), loss_hand_values),
        ("overfit oracle", Duration::from_secs(600), overfit_oracle),
        ("ablation structure", Duration::from_secs(2400), ablation_structure),
        ("pipeline counts", Duration::from_secs(60), pipeline_counts),
        ("determinism", Duration::from_secs(600), determinism),
    ];
    let mut failed = Vec::new();
    for (k, (name, budget, run)) in criteria.into_iter().enumerate() {
        let started = Instant::now();
        let v = run();
        let elapsed = started.elapsed();
        let pass = v.pass && elapsed <= budget;
        println!(
            "{} criterion {} ({name}): {}; {:.2}s of {}s",
            if pass { "PASS" } else { "FAIL" },
            k + 1,
            v.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
        if !pass {
            failed.push(k + 1);
        }
    }
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
