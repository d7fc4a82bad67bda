use lstf_core::attention::OpCounters;
use lstf_core::data::{split_ett, synth_generate, SynthKind};
use lstf_core::loss::metrics;
use lstf_core::optim::{EarlyStopping, StopDecision};
use lstf_core::train::{
    bench_reuse, checkpoint_windows, evaluate, evaluate_windows, prepare, train, RunReport,
};
use lstf_core::{Checkpoint, Error, Model, ModelConfig, ModelKind, Tensor, TrainConfig};
use proptest::prelude::*;

fn small(kind: ModelKind) -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        kind,
        lookback: 16,
        horizon: 8,
        channels: 2,
        d_model: 8,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        lr0: 1e-3,
        max_epochs: 3,
        batch_size: 16,
        seed: 21,
        ..TrainConfig::default()
    };
    (model, train)
}

fn strip_clock(mut r: RunReport) -> RunReport {
    r.wall_clock = Default::default();
    r
}

#[test]
fn fixed_seed_gives_identical_reports() {
    let frame = synth_generate(SynthKind::SineMix, 300, 2, 1).unwrap();
    for kind in [ModelKind::Mlinear, ModelKind::InformerLite] {
        let (m, t) = small(kind);
        let a = train(&m, &frame, &t).unwrap();
        let b = train(&m, &frame, &t).unwrap();
        assert_eq!(strip_clock(a.report.clone()), strip_clock(b.report));
        assert_eq!(a.checkpoint, b.checkpoint);
        assert!(a.report.test.normalized.mse.is_finite());
        assert_eq!(a.report.epochs.len(), 3);
    }
}

#[test]
fn evaluation_matches_manual_metrics_and_checkpoint() {
    let frame = synth_generate(SynthKind::SineMix, 300, 2, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for kind in [ModelKind::Mlinear, ModelKind::InformerLite] {
        let (m, t) = small(kind);
        let out = train(&m, &frame, &t).unwrap();
        let prep = prepare(&frame, &m, t.stride).unwrap();
        let (report, preds) = evaluate_windows(
            &out.model,
            out.memory.as_ref(),
            &prep.test,
            &prep.normalizer,
            &mut OpCounters::default(),
        )
        .unwrap();
        assert_eq!(report, out.report.test);

        let mut pred_rows = Vec::new();
        let mut target_rows = Vec::new();
        for (p, w) in preds.iter().zip(&prep.test) {
            pred_rows.extend((0..p.rows()).map(|i| p.row(i).to_vec()));
            target_rows.extend((0..w.target.rows()).map(|i| w.target.row(i).to_vec()));
        }
        let manual = metrics(&Tensor::from_rows(&pred_rows), &Tensor::from_rows(&target_rows)).unwrap();
        assert_eq!(manual, report.normalized);

        let path = dir.path().join(format!("{kind}.json"));
        out.checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, out.checkpoint);
        let test = split_ett(&frame).unwrap().test;
        assert_eq!(evaluate(&loaded, &test).unwrap(), out.report.test);
    }
}

#[test]
fn zero_model_scores_unit_mse_on_z_scored_targets() {
    let frame = synth_generate(SynthKind::SineMix, 6000, 2, 3).unwrap();
    let (mut m, t) = small(ModelKind::Mlinear);
    m.lookback = 48;
    m.horizon = 24;
    let prep = prepare(&frame, &m, 1).unwrap();
    let mut model = Model::new(&m, t.seed).unwrap();
    for w in model.params_mut().tensors_mut() {
        w.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let (report, _) =
        evaluate_windows(&model, None, &prep.test, &prep.normalizer, &mut OpCounters::default())
            .unwrap();
    assert!((report.normalized.mse - 1.0).abs() <= 0.1, "{report:?}");
}

#[test]
fn model_scored_against_itself_is_perfect() {
    let frame = synth_generate(SynthKind::SineMix, 300, 2, 4).unwrap();
    let (m, t) = small(ModelKind::Mlinear);
    let prep = prepare(&frame, &m, 1).unwrap();
    let model = Model::new(&m, t.seed).unwrap();
    let mut windows = prep.test.clone();
    for w in &mut windows {
        w.target = model.predict(&w.lookback, None, &mut OpCounters::default()).unwrap();
    }
    let (report, _) =
        evaluate_windows(&model, None, &windows, &prep.normalizer, &mut OpCounters::default())
            .unwrap();
    assert!(report.normalized.mse <= 1e-6);
}

#[test]
fn bench_reuse_contract() {
    let frame = synth_generate(SynthKind::SineMix, 300, 2, 5).unwrap();
    let (m, t) = small(ModelKind::InformerLite);
    let out = train(&m, &frame, &t).unwrap();
    let test = split_ett(&frame).unwrap().test;
    let b = bench_reuse(&out.checkpoint, &test, Some(20)).unwrap();
    assert_eq!(b.windows, 20);
    assert_eq!(b.reuse.measurement_dot_products, 0);
    assert!(b.reuse.multiplies_total < b.recompute.multiplies_total);
    assert_eq!(b.recompute, b.expected_recompute);
    assert_eq!(b.reuse, b.expected_reuse);
    assert!(b.matching_identical);

    let (m, t) = small(ModelKind::Mlinear);
    let out = train(&m, &frame, &t).unwrap();
    assert!(bench_reuse(&out.checkpoint, &test, None).is_err());
}

#[test]
fn identical_indices_give_bit_identical_outputs() {
    // With u = L_Q every site selects all queries, so recomputed and reused
    // indices always agree.
    let frame = synth_generate(SynthKind::SineMix, 300, 2, 6).unwrap();
    let (mut m, t) = small(ModelKind::InformerLite);
    m.attention.u_factor = 1e6;
    let out = train(&m, &frame, &t).unwrap();
    let test = split_ett(&frame).unwrap().test;
    let b = bench_reuse(&out.checkpoint, &test, Some(5)).unwrap();
    assert_eq!(b.matching_windows, 5);
    assert!(b.matching_identical);
    assert_eq!(b.max_abs_diff, 0.0);
    assert_eq!(b.recompute.attention_dot_products, b.reuse.attention_dot_products);
}

#[test]
fn divergence_reports_epoch_and_step() {
    let frame = synth_generate(SynthKind::SineMix, 300, 2, 7).unwrap();
    let (m, mut t) = small(ModelKind::Mlinear);
    t.lr0 = 1e300;
    match train(&m, &frame, &t) {
        Err(Error::Divergence { epoch, .. }) => assert!(epoch < 3),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.report.test)),
    }
}

#[test]
fn too_short_splits_are_rejected() {
    let frame = synth_generate(SynthKind::SineMix, 40, 2, 8).unwrap();
    let (m, t) = small(ModelKind::Mlinear);
    let err = train(&m, &frame, &t).err().unwrap();
    assert!(err.to_string().contains("empty"), "{err}");
}

#[test]
fn checkpoint_windows_use_training_statistics() {
    let frame = synth_generate(SynthKind::SineMix, 300, 2, 9).unwrap();
    let (m, t) = small(ModelKind::Mlinear);
    let out = train(&m, &frame, &t).unwrap();
    let prep = prepare(&frame, &m, 1).unwrap();
    let test = split_ett(&frame).unwrap().test;
    assert_eq!(checkpoint_windows(&out.checkpoint, &test).unwrap(), prep.test);
}

#[test]
fn best_epoch_weights_are_restored() {
    let frame = synth_generate(SynthKind::SineMix, 300, 2, 10).unwrap();
    let (m, mut t) = small(ModelKind::Mlinear);
    t.max_epochs = 5;
    let out = train(&m, &frame, &t).unwrap();
    let best = out.report.best_epoch;
    let best_val = out.report.epochs[best].val_loss;
    assert!(out.report.epochs.iter().all(|e| e.val_loss >= best_val));
}

proptest! {
    #[test]
    fn early_stopping_never_prefers_a_worse_epoch(losses in prop::collection::vec(0.0f64..10.0, 1..20), patience in 1usize..5) {
        let mut es = EarlyStopping::new(patience);
        let mut seen = Vec::new();
        for (e, &l) in losses.iter().enumerate() {
            seen.push(l);
            let d = es.observe(e, l);
            let best = es.best_loss().unwrap();
            prop_assert!(seen.iter().all(|&s| best <= s));
            prop_assert_eq!(seen[es.best_epoch().unwrap()], best);
            if d == StopDecision::Stop {
                prop_assert_eq!(e - es.best_epoch().unwrap(), patience);
                break;
            }
        }
    }
}
