//! Full-batch softmax regression trained by the library, compared against a
//! plain-loop reference implementation.

use treenet::data::synth_clusters;
use treenet::netspec::builders::mlp_chain;
use treenet::trainer::{train_independent, Feed, SgdConfig, TrainOptions};
use treenet::{CompiledGraph, InitPolicy};

struct Reference {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    vw: Vec<Vec<f64>>,
    vb: Vec<f64>,
}

impl Reference {
    fn loss_and_grads(&self, xs: &[Vec<f64>], ys: &[usize]) -> (f64, Vec<Vec<f64>>, Vec<f64>) {
        let classes = self.b.len();
        let mut gw = vec![vec![0.0; xs[0].len()]; classes];
        let mut gb = vec![0.0; classes];
        let mut loss = 0.0;
        let n = xs.len() as f64;
        for (x, &y) in xs.iter().zip(ys) {
            let z: Vec<f64> = (0..classes).map(|c| self.b[c] + self.w[c].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).collect();
            let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let norm: f64 = z.iter().map(|v| (v - top).exp()).sum();
            loss += norm.ln() + top - z[y];
            for c in 0..classes {
                let d = ((z[c] - top).exp() / norm - if c == y { 1.0 } else { 0.0 }) / n;
                gb[c] += d;
                for (g, xi) in gw[c].iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
        }
        (loss / n, gw, gb)
    }

    fn step(&mut self, xs: &[Vec<f64>], ys: &[usize], lr: f64, mu: f64, wd: f64) -> f64 {
        let (loss, gw, gb) = self.loss_and_grads(xs, ys);
        for c in 0..self.b.len() {
            for j in 0..self.w[c].len() {
                self.vw[c][j] = mu * self.vw[c][j] - lr * (gw[c][j] + wd * self.w[c][j]);
                self.w[c][j] += self.vw[c][j];
            }
            self.vb[c] = mu * self.vb[c] - lr * (gb[c] + wd * self.b[c]);
            self.b[c] += self.vb[c];
        }
        loss
    }
}

#[test]
fn full_batch_training_matches_reference_loops() {
    let data = synth_clusters(4, 25, 2, 0.4, 8).unwrap();
    let graph = CompiledGraph::compile(&mlp_chain(2, &[], 4), &InitPolicy::default(), 17).unwrap();
    let start = graph.layer_params("fc1").unwrap().to_vec();
    let (lr, mu, wd) = (0.2, 0.8, 0.01);
    let opts = TrainOptions {
        sgd: SgdConfig { lr, momentum: mu, weight_decay: wd, batch_size: data.len(), iterations: 150, ..SgdConfig::default() },
        log_every: 150,
        ..TrainOptions::default()
    };
    let (trained, report) = train_independent(vec![graph], &data, Feed::all(data.len()), opts).unwrap();

    let xs: Vec<Vec<f64>> = (0..data.len()).map(|i| data.features().row(i).to_vec()).collect();
    let mut r = Reference {
        w: (0..4).map(|c| start[0].row(c).to_vec()).collect(),
        b: start[1].data().to_vec(),
        vw: vec![vec![0.0; 2]; 4],
        vb: vec![0.0; 4],
    };
    let reference: Vec<f64> = (0..150).map(|_| r.step(&xs, data.labels(), lr, mu, wd)).collect();

    assert_eq!(report.losses.len(), 150);
    for (t, (a, b)) in report.losses.iter().zip(&reference).enumerate() {
        assert!((a - b).abs() < 1e-10, "iteration {t}: {a} vs {b}");
    }
    assert!(reference[149] < 0.5 * reference[0]);
    let p = trained.graphs[0].layer_params("fc1").unwrap();
    for c in 0..4 {
        for j in 0..2 {
            assert!((p[0].row(c)[j] - r.w[c][j]).abs() < 1e-10);
        }
        assert!((p[1].data()[c] - r.b[c]).abs() < 1e-10);
    }
}
