use super::*;
use crate::data::synth_clusters;
use crate::graph::InitPolicy;
use crate::metrics::evaluate;
use crate::netspec::builders::mlp_chain;
use crate::netspec::{expand_treenet, NetworkSpec, SplitPoint};
use crate::tensor::Tensor;

fn scalar(v: f64) -> Tensor {
    Tensor::vector(&[v])
}

fn cfg(lr: f64, momentum: f64) -> SgdConfig {
    SgdConfig { lr, momentum, ..SgdConfig::default() }
}

#[test]
fn plain_step_moves_against_gradient() {
    let (mut p, mut v) = (scalar(0.0), scalar(0.0));
    sgd_step(&mut p, &scalar(1.0), &mut v, 0.1, &cfg(0.1, 0.0)).unwrap();
    assert!((p.data()[0] + 0.1).abs() < 1e-15);
}

#[test]
fn zero_gradient_velocity_decays_geometrically() {
    let (mut p, mut v) = (scalar(2.0), scalar(1.0));
    let c = cfg(0.1, 0.5);
    let mut expected_p = 2.0;
    for step in 1..=5 {
        sgd_step(&mut p, &scalar(0.0), &mut v, 0.1, &c).unwrap();
        let ev = 0.5f64.powi(step);
        expected_p += ev;
        assert!((v.data()[0] - ev).abs() < 1e-15);
        assert!((p.data()[0] - expected_p).abs() < 1e-14);
    }
}

#[test]
fn weight_decay_is_coupled() {
    let (mut p, mut v) = (scalar(1.0), scalar(0.0));
    let c = SgdConfig { weight_decay: 0.5, ..cfg(0.1, 0.0) };
    sgd_step(&mut p, &scalar(0.0), &mut v, 0.1, &c).unwrap();
    assert!((p.data()[0] - 0.95).abs() < 1e-15);
}

#[test]
fn quadratic_bowl_follows_closed_form() {
    // f = a θ² / 2; heavy-ball iterates satisfy θ_{t+1} = (1 + μ − ηa) θ_t − μ θ_{t−1}.
    let (a, eta, mu) = (1.0, 0.1, 0.2);
    let c = cfg(eta, mu);
    let (mut p, mut v) = (scalar(3.0), scalar(0.0));
    let disc = ((1.0 + mu - eta * a) * (1.0 + mu - eta * a) - 4.0 * mu as f64).sqrt();
    let r1 = (1.0 + mu - eta * a + disc) / 2.0;
    let r2 = (1.0 + mu - eta * a - disc) / 2.0;
    // θ_0 = 3, θ_1 = 3 (1 − ηa).
    let (t0, t1) = (3.0, 3.0 * (1.0 - eta * a));
    let bcoef = (t1 - r1 * t0) / (r2 - r1);
    let acoef = t0 - bcoef;
    let mut prev_loss = f64::INFINITY;
    for t in 1..=100 {
        let g = scalar(a * p.data()[0]);
        sgd_step(&mut p, &g, &mut v, eta, &c).unwrap();
        let closed = acoef * r1.powi(t) + bcoef * r2.powi(t);
        assert!((p.data()[0] - closed).abs() < 1e-12, "t={t}");
        let loss = 0.5 * a * p.data()[0].powi(2);
        if t > 2 {
            assert!(loss < prev_loss);
        }
        prev_loss = loss;
    }
    assert!(p.data()[0].abs() < 1e-4);
}

#[test]
fn config_reports_every_problem() {
    let bad = SgdConfig { lr: -1.0, momentum: 1.0, accumulation_steps: 0, batch_size: 0, ..SgdConfig::default() };
    assert_eq!(bad.problems().len(), 4);
    assert!(SgdConfig::default().validate().is_ok());
}

#[test]
fn stop_rule_needs_consecutive_flat_windows() {
    let rule = StopRule { window: 2, min_improvement: 0.01, patience: 2 };
    let mut s = StopState::default();
    let seq = [10.0, 10.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0];
    let fired: Vec<bool> = seq.iter().map(|&l| s.observe(&rule, l)).collect();
    assert_eq!(fired, vec![false, false, false, false, false, false, false, true]);
}

fn synth() -> crate::data::Dataset {
    synth_clusters(4, 40, 2, 0.15, 3).unwrap()
}

fn ensemble(members: usize, split: &SplitPoint, seed: u64) -> CompiledGraph {
    let spec: NetworkSpec = expand_treenet(&mlp_chain(2, &[12], 4), members, split).unwrap();
    CompiledGraph::compile(&spec, &InitPolicy::default(), seed).unwrap()
}

fn opts(iterations: usize) -> TrainOptions {
    TrainOptions {
        sgd: SgdConfig { lr: 0.1, batch_size: 16, iterations, ..SgdConfig::default() },
        log_every: 10,
        ..TrainOptions::default()
    }
}

#[test]
fn single_network_fits_separable_clusters() {
    let d = synth();
    let g = CompiledGraph::compile(&mlp_chain(2, &[12], 4), &InitPolicy::default(), 1).unwrap();
    let (mut t, report) = train_independent(vec![g], &d, Feed::all(d.len()), opts(600)).unwrap();
    assert_eq!(report.iterations, 600);
    assert_eq!(report.history.len(), 60);
    assert!(report.history.last().unwrap().loss < report.history[0].loss);
    let m = evaluate(&mut t.graphs, &d, None).unwrap();
    assert!(m.ensemble_mean_acc >= 0.99, "{}", m.ensemble_mean_acc);
}

#[test]
fn training_is_reproducible() {
    let d = synth();
    let run = || train_independent(vec![ensemble(2, &SplitPoint::None, 4)], &d, Feed::all(d.len()), opts(50)).unwrap();
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra, rb);
    assert!(a.graphs[0].params().iter().zip(b.graphs[0].params()).all(|(x, y)| x.bitwise_eq(&y)));
}

#[test]
fn mcl_with_k_equal_m_is_independent_training() {
    let d = synth();
    let (a, ra) = train_independent(vec![ensemble(3, &SplitPoint::None, 2)], &d, Feed::all(d.len()), opts(100)).unwrap();
    let (b, rb) = train_mcl_sgd(vec![ensemble(3, &SplitPoint::None, 2)], &d, (0..d.len()).collect(), 3, opts(100)).unwrap();
    for (x, y) in ra.losses.iter().zip(&rb.losses) {
        assert!((x - y).abs() <= 1e-12);
    }
    for (x, y) in a.graphs[0].params().iter().zip(b.graphs[0].params()) {
        assert!(x.max_abs_diff(&y) <= 1e-12);
    }
    assert_eq!(rb.history[0].k, Some(3));
}

#[test]
fn mcl_rejects_bad_k() {
    let d = synth();
    let idx: Vec<usize> = (0..d.len()).collect();
    assert!(train_mcl_sgd(vec![ensemble(2, &SplitPoint::None, 0)], &d, idx.clone(), 3, opts(1)).is_err());
    assert!(train_mcl_sgd(vec![ensemble(2, &SplitPoint::None, 0)], &d, idx, 0, opts(1)).is_err());
}

#[test]
fn accumulation_matches_a_larger_batch_on_replicated_examples() {
    let d = synth();
    let copies = d.subset(&[5; 64]).unwrap();
    let mut small = opts(8);
    small.sgd.batch_size = 4;
    small.sgd.accumulation_steps = 3;
    let mut large = opts(8);
    large.sgd.batch_size = 12;
    let (a, _) = train_independent(vec![ensemble(2, &SplitPoint::At("fc1".into()), 9)], &copies, Feed::all(64), small).unwrap();
    let (b, _) = train_independent(vec![ensemble(2, &SplitPoint::At("fc1".into()), 9)], &copies, Feed::all(64), large).unwrap();
    for (x, y) in a.graphs[0].params().iter().zip(b.graphs[0].params()) {
        assert!(x.max_abs_diff(&y) <= 1e-12);
    }
}

#[test]
fn averaged_modes_scale_the_rate() {
    let d = synth();
    let g = ensemble(4, &SplitPoint::None, 0);
    let mut o = opts(1);
    o.loss = Some(LossConfig::new(LossMode::ScoreAveraged));
    let t = Trainer::new(vec![g.clone()], Feed::all(d.len()), o.clone()).unwrap();
    assert!((t.current_lr() - 0.4).abs() < 1e-15);
    o.sgd.lr_ensemble_scale = false;
    assert_eq!(Trainer::new(vec![g.clone()], Feed::all(d.len()), o).unwrap().current_lr(), 0.1);
    assert_eq!(Trainer::new(vec![g], Feed::all(d.len()), opts(1)).unwrap().current_lr(), 0.1);
}

#[test]
fn divergence_aborts() {
    let d = synth();
    let mut o = opts(200);
    o.sgd.lr = 1e12;
    o.sgd.momentum = 0.99;
    let err = train_independent(vec![ensemble(1, &SplitPoint::None, 0)], &d, Feed::all(d.len()), o).err().unwrap();
    assert!(matches!(err, Error::Diverged(_)), "{err}");
}

#[test]
fn per_graph_feeds_need_independent_loss() {
    let feed = Feed::PerGraph(vec![(0..10).collect(), (10..20).collect()]);
    let graphs = vec![ensemble(1, &SplitPoint::None, 0), ensemble(1, &SplitPoint::None, 1)];
    assert!(Trainer::new(graphs.clone(), feed.clone(), opts(5)).is_ok());
    let mut o = opts(5);
    o.loss = Some(LossConfig::new(LossMode::ScoreAveraged));
    assert!(Trainer::new(graphs, feed, o).is_err());
}

#[test]
fn finetune_at_zero_rate_keeps_parameters() {
    let d = synth();
    let (t, _) = train_independent(vec![ensemble(2, &SplitPoint::None, 3)], &d, Feed::all(d.len()), opts(20)).unwrap();
    let records = t.graphs[0].checkpoint_records();
    let mut o = opts(10);
    o.sgd.lr = f64::MIN_POSITIVE;
    o.sgd.momentum = 0.0;
    let (f, _) = finetune(
        vec![ensemble(2, &SplitPoint::None, 99)],
        &[records],
        LossConfig::new(LossMode::Mcl).with_k(1),
        &d,
        Feed::all(d.len()),
        o,
    )
    .unwrap();
    for (x, y) in t.graphs[0].params().iter().zip(f.graphs[0].params()) {
        assert!(x.max_abs_diff(&y) < 1e-300);
    }
    assert!(f.velocity().iter().flatten().all(|v| v.max_abs() < 1e-300));
}

#[test]
fn replicated_records_seed_every_member() {
    let d = synth();
    let single = CompiledGraph::compile(&mlp_chain(2, &[12], 4), &InitPolicy::default(), 5).unwrap();
    let records = replicate_records(&single.checkpoint_records(), 3);
    assert_eq!(records.len(), 3 * single.checkpoint_records().len());
    let mut g = ensemble(3, &SplitPoint::None, 0);
    g.load_records(&records).unwrap();
    let out = g.forward(&d.gather(&[0, 1]).unwrap().0).unwrap();
    assert!(out.scores[0].bitwise_eq(&out.scores[2]));
}

#[test]
fn classical_mcl_recovers_separated_clusters() {
    let d = synth_clusters(2, 30, 2, 0.1, 1).unwrap();
    let graphs = (0..2)
        .map(|m| CompiledGraph::compile(&mlp_chain(2, &[6], 2), &InitPolicy::default(), m).unwrap())
        .collect();
    let cfg = ClassicalMclConfig { train: opts(150), rounds: 5, ..ClassicalMclConfig::default() };
    let idx: Vec<usize> = (0..d.len()).collect();
    let r = train_mcl_classical(graphs, &d, &idx, &cfg).unwrap();
    assert!(r.converged);
    let first = r.partition[0];
    assert!(r.partition.iter().zip(d.labels()).all(|(&p, &y)| (p == first) == (y == 0)));
}

#[test]
fn classical_mcl_with_one_member_is_ordinary_training() {
    let d = synth();
    let idx: Vec<usize> = (0..d.len()).collect();
    let g = || CompiledGraph::compile(&mlp_chain(2, &[12], 4), &InitPolicy::default(), 2).unwrap();
    let cfg = ClassicalMclConfig { train: opts(60), rounds: 3, ..ClassicalMclConfig::default() };
    let r = train_mcl_classical(vec![g()], &d, &idx, &cfg).unwrap();
    assert!(r.converged && r.rounds == 1);
    let (t, _) = train_independent(vec![g()], &d, Feed::all(d.len()), opts(60)).unwrap();
    assert!(r.graphs[0].params().iter().zip(t.graphs[0].params()).all(|(x, y)| x.bitwise_eq(&y)));
}
