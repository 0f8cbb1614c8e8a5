use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tta_core::engine::{run, Adapter, AdaptationConfig, Method, Protocol, Runner, Stage, StageView, Stream};
use tta_core::error::Error;
use tta_core::nn::{Architecture, NormMode, SplitModel};
use tta_core::objectives::{entropy, marginal};
use tta_core::plr::WeakAugmenter;
use tta_core::tensor::{Image, Tensor};

fn arch() -> Architecture {
    Architecture {
        in_channels: 3,
        height: 12,
        width: 12,
        block_channels: vec![4, 6],
        block_strides: vec![2, 2],
        num_classes: 4,
    }
}

fn source(seed: u64) -> SplitModel {
    SplitModel::new(arch(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn images(n: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Image::from_vec(3, 12, 12, (0..3 * 144).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
        .collect()
}

fn small_cfg() -> AdaptationConfig {
    AdaptationConfig {
        batch_size: 4,
        policy_ops: tta_core::augment::ops::ALL_OPS[..6].to_vec(),
        ..Default::default()
    }
}

#[test]
fn mutual_information_degeneracy() {
    // No distillation, own-label refinement, one identity view and an
    // instantly updated teacher: the student objective is the batch
    // information-maximization loss of the student itself.
    let cfg = AdaptationConfig {
        lambda2: 0.0,
        num_neighbors: 1,
        queue_size: 1,
        num_weak_views: 1,
        alpha: 0.0,
        ..small_cfg()
    };
    let mut adapter = Adapter::new(cfg, source(1)).unwrap();
    adapter.weak = WeakAugmenter::identity(1);
    let batch = images(6, 2);
    for step in 0..3 {
        let probs = adapter
            .pair
            .student
            .predict(&Tensor::from_images(&batch).unwrap(), NormMode::Batch)
            .unwrap();
        let cond = probs.iter().map(|p| entropy(p)).sum::<f64>() / probs.len() as f64;
        let expected = cond - entropy(&marginal(&probs));
        let out = adapter.adapt_step(&batch, 0, step, &mut ()).unwrap();
        assert!((out.loss - expected).abs() < 1e-9, "step {step}: {} vs {expected}", out.loss);
    }
}

#[test]
fn identical_state_gives_bit_identical_steps() {
    let batch = images(5, 3);
    let mut a = Adapter::new(small_cfg(), source(2)).unwrap();
    let mut b = a.clone();
    let oa = a.adapt_step(&batch, 0, 0, &mut ()).unwrap();
    let ob = b.adapt_step(&batch, 0, 0, &mut ()).unwrap();
    assert_eq!(oa, ob);
    assert_eq!(a, b);
}

#[test]
fn batch_of_one_runs() {
    let mut adapter = Adapter::new(small_cfg(), source(3)).unwrap();
    let out = adapter.adapt_step(&images(1, 4), 0, 0, &mut ()).unwrap();
    assert!(out.loss.is_finite());
    assert_eq!(out.predictions.len(), 1);
}

#[test]
fn stages_run_in_order_and_policy_sees_old_teacher() {
    let mut adapter = Adapter::new(small_cfg(), source(4)).unwrap();
    let batch = images(4, 5);
    adapter.adapt_step(&batch, 0, 0, &mut ()).unwrap();
    let teacher_before = adapter.pair.teacher.param_vector();
    let student_before = adapter.pair.student.param_vector();
    let head = adapter.pair.student.head_bytes();
    let mut seen = Vec::new();
    let mut observer = |v: &StageView<'_>| {
        let teacher_moved = v.pair.teacher.param_vector() != teacher_before;
        let student_moved = v.pair.student.param_vector() != student_before;
        seen.push((v.stage, teacher_moved, student_moved));
        assert_eq!(v.pair.student.head_bytes(), head);
        v.policy.check_invariants().unwrap();
    };
    adapter.adapt_step(&batch, 0, 1, &mut observer).unwrap();
    assert_eq!(
        seen,
        vec![
            (Stage::PseudoLabels, false, false),
            (Stage::Policy, false, false),
            (Stage::Student, false, true),
            (Stage::Teacher, true, true),
            (Stage::Predict, true, true),
        ]
    );
    assert!(adapter.pair.heads_identical());
}

#[test]
fn one_pass_records_each_sample_once() {
    let data = images(10, 6);
    let labels: Vec<usize> = (0..10).map(|i| i % 4).collect();
    let stream = Stream::new(&data, Some(&labels)).unwrap();
    let cfg = AdaptationConfig {
        shuffle: true,
        ..small_cfg()
    };
    let report = run(Adapter::new(cfg, source(5)).unwrap(), &stream, &mut ()).unwrap();
    let mut seen: Vec<usize> = report.batches.iter().flat_map(|b| b.indices.clone()).collect();
    assert_eq!(seen.len(), 10);
    seen.sort();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());
    assert_eq!(report.final_predictions.len(), 10);
    assert_eq!(report.batches.len(), 3);
    assert_eq!(report.epochs.len(), 1);
    assert!(report.epochs[0].error_rate.is_some());
    for b in &report.batches {
        for (&i, p) in b.indices.iter().zip(&b.predictions) {
            assert_eq!(&report.final_predictions[i], p);
        }
    }
}

#[test]
fn multi_epoch_uses_a_final_pass() {
    let data = images(8, 7);
    let stream = Stream::new(&data, None).unwrap();
    let one = run(Adapter::new(small_cfg(), source(6)).unwrap(), &stream, &mut ()).unwrap();
    let cfg = AdaptationConfig {
        protocol: Protocol::MultiEpoch,
        epochs: 1,
        ..small_cfg()
    };
    let multi = run(Adapter::new(cfg.clone(), source(6)).unwrap(), &stream, &mut ()).unwrap();
    assert_eq!(one.batches.len(), multi.batches.len());
    // Same adaptation trajectory, but the final pass scores early batches
    // with the fully adapted model.
    assert_eq!(one.batches[1].predictions, multi.batches[1].predictions);
    assert_ne!(one.final_predictions, multi.final_predictions);

    let three = AdaptationConfig { epochs: 3, ..cfg };
    let report = run(Adapter::new(three, source(6)).unwrap(), &stream, &mut ()).unwrap();
    assert_eq!(report.batches.len(), 6);
    assert_eq!(report.epochs.len(), 3);
    for e in 0..3 {
        let n: usize = report.batches.iter().filter(|b| b.epoch == e).map(|b| b.indices.len()).sum();
        assert_eq!(n, 8);
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = images(14, 8);
    let labels: Vec<usize> = (0..14).map(|i| i % 4).collect();
    let stream = Stream::new(&data, Some(&labels)).unwrap();
    let cfg = AdaptationConfig {
        protocol: Protocol::MultiEpoch,
        epochs: 2,
        shuffle: true,
        seed: 9,
        ..small_cfg()
    };
    let full = run(Adapter::new(cfg.clone(), source(7)).unwrap(), &stream, &mut ()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    let mut first = Runner::new(Adapter::new(cfg, source(7)).unwrap(), 14).unwrap();
    assert!(!first.run_batches(&stream, Some(5), &mut ()).unwrap());
    first.save(&path).unwrap();
    drop(first);
    let mut resumed = Runner::load(&path).unwrap();
    assert_eq!((resumed.epoch, resumed.batch), (1, 1));
    assert!(resumed.run_batches(&stream, None, &mut ()).unwrap());
    assert_eq!(resumed.finish(&stream).unwrap(), full);
}

#[test]
fn same_seed_same_report() {
    let data = images(9, 10);
    let stream = Stream::new(&data, None).unwrap();
    let a = run(Adapter::new(small_cfg(), source(8)).unwrap(), &stream, &mut ()).unwrap();
    let b = run(Adapter::new(small_cfg(), source(8)).unwrap(), &stream, &mut ()).unwrap();
    assert_eq!(a, b);
    let other = AdaptationConfig {
        seed: 1,
        ..small_cfg()
    };
    let c = run(Adapter::new(other, source(8)).unwrap(), &stream, &mut ()).unwrap();
    assert_ne!(a.final_predictions, c.final_predictions);
}

#[test]
fn source_only_matches_direct_inference() {
    let data = images(7, 11);
    let stream = Stream::new(&data, None).unwrap();
    let model = source(9);
    let cfg = AdaptationConfig {
        method: Method::SourceOnly,
        ..small_cfg()
    };
    let adapter = Adapter::new(cfg, model.clone()).unwrap();
    let mut runner = Runner::new(adapter, 7).unwrap();
    runner.run_batches(&stream, None, &mut ()).unwrap();
    assert_eq!(runner.adapter.pair.student, model);
    let report = runner.finish(&stream).unwrap();
    let direct: Vec<Vec<f64>> = data
        .iter()
        .map(|x| model.predict(&Tensor::from_images(std::slice::from_ref(x)).unwrap(), NormMode::Running).unwrap().remove(0))
        .collect();
    for (a, b) in report.final_predictions.iter().zip(&direct) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn baselines_touch_only_their_parameters() {
    let batch = images(6, 12);
    let model = source(10);
    for method in [Method::EntropyMin, Method::PlHard, Method::BnStats] {
        let cfg = AdaptationConfig { method, ..small_cfg() };
        let mut adapter = Adapter::new(cfg, model.clone()).unwrap();
        adapter.adapt_step(&batch, 0, 0, &mut ()).unwrap();
        let s = &adapter.pair.student;
        let conv_same = s.blocks.iter().zip(&model.blocks).all(|(a, b)| a.conv.weight == b.conv.weight);
        let affine_same = s.blocks.iter().zip(&model.blocks).all(|(a, b)| a.norm.gamma == b.norm.gamma);
        match method {
            Method::EntropyMin => assert!(conv_same && !affine_same),
            Method::PlHard => assert!(!conv_same && !affine_same),
            _ => assert!(conv_same && affine_same),
        }
        assert_eq!(s.head_bytes(), model.head_bytes());
    }
}

#[test]
fn predict_then_adapt_reports_pre_update_predictions() {
    let batch = images(4, 13);
    let model = source(11);
    let cfg = AdaptationConfig {
        predict_then_adapt: true,
        ..small_cfg()
    };
    let mut adapter = Adapter::new(cfg, model.clone()).unwrap();
    let out = adapter.adapt_step(&batch, 0, 0, &mut ()).unwrap();
    let before = model.predict(&Tensor::from_images(&batch).unwrap(), NormMode::Batch).unwrap();
    assert_eq!(out.predictions, before);
}

#[test]
fn non_finite_state_aborts_with_diagnostics() {
    let mut model = source(12);
    model.blocks[1].conv.weight[0] = f64::NAN;
    let mut adapter = Adapter::new(small_cfg(), model).unwrap();
    let err = adapter.adapt_step(&images(4, 14), 2, 7, &mut ()).unwrap_err();
    match &err {
        Error::NanLoss { epoch, batch, policy } => {
            assert_eq!((*epoch, *batch), (2, 7));
            assert!(policy.contains("p="), "{policy}");
        }
        other => panic!("unexpected error {other:?}"),
    }
    assert!(err.to_string().contains("batch 7"));
}

#[test]
fn empty_stream_is_a_config_error() {
    assert!(matches!(Stream::new(&[], None), Err(Error::Config(_))));
}
