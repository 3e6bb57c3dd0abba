use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::losses::independent_ce_loss;
use crate::netspec::builders::{mlp_chain, quick_cnn};
use crate::netspec::{expand_treenet, SplitPoint};
use crate::tensor::{finite_difference_check, GradCheckConfig};

fn batch(seed: u64, b: usize, dim: usize, classes: usize) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(&[b, dim], 1.0, &mut rng);
    let y = (0..b).map(|_| rng.random_range(0..classes)).collect();
    (x, y)
}

fn toy() -> NetworkSpec {
    mlp_chain(10, &[8, 8], 3)
}

#[test]
fn same_seed_same_params() {
    let a = CompiledGraph::compile(&toy(), &InitPolicy::default(), 5).unwrap();
    let b = CompiledGraph::compile(&toy(), &InitPolicy::default(), 5).unwrap();
    let c = CompiledGraph::compile(&toy(), &InitPolicy::default(), 6).unwrap();
    assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.bitwise_eq(&y)));
    assert!(!a.params()[0].bitwise_eq(&c.params()[0]));
    let bias = a.layer_params("fc1").unwrap()[1].clone();
    assert_eq!(bias.max_abs(), 0.0);
}

#[test]
fn param_count_matches_hand_tally() {
    let base = CompiledGraph::compile(&toy(), &InitPolicy::default(), 0).unwrap();
    let p = 10 * 8 + 8 + 8 * 8 + 8 + 8 * 3 + 3;
    assert_eq!(base.param_count(), p);
    let none = expand_treenet(&toy(), 4, &SplitPoint::None).unwrap();
    assert_eq!(CompiledGraph::compile(&none, &InitPolicy::default(), 0).unwrap().param_count(), 4 * p);
    let tree = expand_treenet(&toy(), 3, &SplitPoint::At("fc1".into())).unwrap();
    let g = CompiledGraph::compile(&tree, &InitPolicy::default(), 0).unwrap();
    assert_eq!(g.param_count(), 88 + 3 * (72 + 27));
    assert_eq!(g.param_count(), 385);
}

#[test]
fn backward_needs_forward() {
    let mut g = CompiledGraph::compile(&toy(), &InitPolicy::default(), 0).unwrap();
    assert!(matches!(g.backward(&[Tensor::zeros(&[2, 3])]), Err(Error::MissingCache)));
}

#[test]
fn input_shape_is_checked() {
    let mut g = CompiledGraph::compile(&toy(), &InitPolicy::default(), 0).unwrap();
    assert!(matches!(g.forward(&Tensor::zeros(&[2, 9])), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn split_none_equals_independent_networks() {
    let m = 3;
    let tree_spec = expand_treenet(&toy(), m, &SplitPoint::None).unwrap();
    let mut tree = CompiledGraph::compile(&tree_spec, &InitPolicy::default(), 9).unwrap();
    let (x, y) = batch(1, 5, 10, 3);
    let out = tree.forward(&x).unwrap();
    let loss = independent_ce_loss(&out.scores, &y).unwrap();
    tree.backward(&loss.grads).unwrap();
    for member in 0..m {
        let mut single = CompiledGraph::compile(&toy(), &InitPolicy::default(), member_seed(9, member)).unwrap();
        let s = single.forward(&x).unwrap();
        assert!(s.scores[0].bitwise_eq(&out.scores[member]));
        let l = independent_ce_loss(&s.scores, &y).unwrap();
        single.backward(&l.grads).unwrap();
        for layer in ["fc1", "fc2", "fc3"] {
            let a = single.layer_grads(layer).unwrap();
            let b = tree.layer_grads(&format!("{layer}@{member}")).unwrap();
            assert!(a.iter().zip(b).all(|(p, q)| p.bitwise_eq(q)));
        }
    }
}

#[test]
fn shared_prefix_grad_is_sum_over_members() {
    let spec = expand_treenet(&toy(), 3, &SplitPoint::At("fc1".into())).unwrap();
    let mut g = CompiledGraph::compile(&spec, &InitPolicy::default(), 2).unwrap();
    let (x, y) = batch(3, 6, 10, 3);
    let out = g.forward(&x).unwrap();
    let loss = independent_ce_loss(&out.scores, &y).unwrap();
    g.backward(&loss.grads).unwrap();
    let full = g.layer_grads("fc1").unwrap().to_vec();
    let mut parts = Vec::new();
    for m in 0..3 {
        g.zero_grads();
        let masked: Vec<Tensor> = loss
            .grads
            .iter()
            .enumerate()
            .map(|(i, t)| if i == m { t.clone() } else { Tensor::zeros(t.shape()) })
            .collect();
        g.backward(&masked).unwrap();
        parts.push(g.layer_grads("fc1").unwrap().to_vec());
    }
    for block in 0..2 {
        let mut sum = parts[0][block].clone();
        sum.add_assign(&parts[1][block]).unwrap();
        sum.add_assign(&parts[2][block]).unwrap();
        assert!(sum.max_abs_diff(&full[block]) < 1e-12);
    }
}

#[test]
fn identical_branches_double_the_shared_gradient() {
    let spec = expand_treenet(&toy(), 2, &SplitPoint::At("fc1".into())).unwrap();
    let init = InitPolicy::default().with_shared_member_init(true);
    let mut tree = CompiledGraph::compile(&spec, &init, 4).unwrap();
    let mut single = CompiledGraph::compile(&toy(), &init, 4).unwrap();
    let (x, _) = batch(7, 4, 10, 3);
    let up = Tensor::randn(&[4, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    tree.forward(&x).unwrap();
    tree.backward(&[up.clone(), up.clone()]).unwrap();
    single.forward(&x).unwrap();
    single.backward(&[up]).unwrap();
    let mut twice = single.layer_grads("fc1").unwrap()[0].clone();
    twice.scale(2.0);
    assert!(twice.max_abs_diff(&tree.layer_grads("fc1").unwrap()[0]) < 1e-15);
}

#[test]
fn shared_activation_feeds_every_branch() {
    let spec = expand_treenet(&toy(), 3, &SplitPoint::At("fc1".into())).unwrap();
    let mut g = CompiledGraph::compile(&spec, &InitPolicy::default(), 0).unwrap();
    g.forward(&batch(0, 2, 10, 3).0).unwrap();
    assert_eq!(g.nodes().iter().filter(|n| n.name == "fc1").count(), 1);
    let relu_inputs: Vec<_> = g.nodes().iter().filter(|n| n.name.starts_with("relu1@")).map(|n| n.inputs[0]).collect();
    assert_eq!(relu_inputs.len(), 3);
    assert!(relu_inputs.windows(2).all(|w| w[0] == w[1]));
}

fn graph_fd(spec: &NetworkSpec, init: &InitPolicy, x: &Tensor, y: &[usize], tol: f64) {
    let mut g = CompiledGraph::compile(spec, init, 0).unwrap();
    let out = g.forward(x).unwrap();
    let loss = independent_ce_loss(&out.scores, y).unwrap();
    g.backward(&loss.grads).unwrap();
    let analytic = g.grads();
    let params = g.params();
    let mut probe = g.clone();
    let report = finite_difference_check(
        |p| {
            probe.set_params(p)?;
            let o = probe.forward(x)?;
            Ok(independent_ce_loss(&o.scores, y)?.loss)
        },
        &params,
        &analytic,
        &GradCheckConfig { tolerance: tol, ..Default::default() },
    )
    .unwrap();
    assert!(report.passed(), "max rel error {}", report.max_rel_error());
}

#[test]
fn treenet_gradients_match_finite_differences() {
    let spec = expand_treenet(&mlp_chain(4, &[5, 5], 3), 3, &SplitPoint::At("fc1".into())).unwrap();
    let (x, y) = batch(11, 4, 4, 3);
    graph_fd(&spec, &InitPolicy::he(), &x, &y, 1e-5);
}

#[test]
fn small_cnn_gradients_match_finite_differences() {
    let spec = quick_cnn([2, 16, 16], [2, 2, 3], 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[2, 2, 16, 16], 1.0, &mut rng);
    graph_fd(&spec, &InitPolicy::he(), &x, &[0, 2], 1e-4);
}

#[test]
fn checkpoint_round_trip_restores_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let spec = expand_treenet(&toy(), 2, &SplitPoint::At("fc2".into())).unwrap();
    let a = CompiledGraph::compile(&spec, &InitPolicy::default(), 1).unwrap();
    a.save_checkpoint(&path).unwrap();
    let mut b = CompiledGraph::compile(&spec, &InitPolicy::default(), 2).unwrap();
    b.load_checkpoint(&path).unwrap();
    assert!(a.params().iter().zip(b.params()).all(|(p, q)| p.bitwise_eq(&q)));
    let mut other = CompiledGraph::compile(&mlp_chain(10, &[7, 8], 3), &InitPolicy::default(), 0).unwrap();
    assert!(other.load_checkpoint(&path).is_err());
}
