//! Central finite-difference gradient checking.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub step: f64,
    /// Maximum accepted relative error per block.
    pub tolerance: f64,
    /// Added to the denominator of the relative error so that blocks whose
    /// gradients are all (near) zero are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-6, tolerance: 1e-5, floor: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct BlockReport {
    pub index: usize,
    pub max_abs_error: f64,
    /// `max |analytic - numeric| / (max(|analytic|∞, |numeric|∞) + floor)`.
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().fold(0.0, |m, b| m.max(b.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// Compares `analytic` gradients against central differences of `loss_fn`
/// taken over every scalar of every block in `params`.
pub fn finite_difference_check<F>(
    mut loss_fn: F,
    params: &[Tensor],
    analytic: &[Tensor],
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameter blocks but {} gradient blocks",
            params.len(),
            analytic.len()
        )));
    }
    let mut probe = params.to_vec();
    let base = loss_fn(&probe)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let mut blocks = Vec::with_capacity(params.len());
    for (index, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[index].shape() {
            return Err(Error::ShapeMismatch {
                layer: format!("gradient block {index}"),
                expected: params[index].shape().to_vec(),
                actual: grad.shape().to_vec(),
            });
        }
        let mut numeric = vec![0.0; grad.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = probe[index].data()[i];
            probe[index].data_mut()[i] = orig + config.step;
            let plus = loss_fn(&probe)?;
            probe[index].data_mut()[i] = orig - config.step;
            let minus = loss_fn(&probe)?;
            probe[index].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite("loss".into()));
            }
            *slot = (plus - minus) / (2.0 * config.step);
        }
        let max_abs_error = grad
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()));
        let scale = grad.max_abs().max(numeric.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
        blocks.push(BlockReport {
            index,
            max_abs_error,
            max_rel_error: max_abs_error / (scale + config.floor),
        });
    }
    Ok(GradCheckReport { blocks, tolerance: config.tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Loss `0.5 * |W x - y|^2` for a linear model with a fixed sample.
    fn linear_setup() -> (Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let x = Tensor::randn(&[4], 1.0, &mut rng);
        let y = Tensor::randn(&[3], 1.0, &mut rng);
        (w, x, y)
    }

    fn linear_loss(w: &Tensor, x: &Tensor, y: &Tensor) -> (f64, Tensor) {
        let mut grad = Tensor::zeros(w.shape());
        let mut loss = 0.0;
        for o in 0..3 {
            let pred: f64 = (0..4).map(|i| w.data()[o * 4 + i] * x.data()[i]).sum();
            let r = pred - y.data()[o];
            loss += 0.5 * r * r;
            for i in 0..4 {
                grad.data_mut()[o * 4 + i] = r * x.data()[i];
            }
        }
        (loss, grad)
    }

    #[test]
    fn quadratic_model_matches_tightly() {
        let (w, x, y) = linear_setup();
        let (_, grad) = linear_loss(&w, &x, &y);
        let cfg = GradCheckConfig { tolerance: 1e-8, ..Default::default() };
        let report =
            finite_difference_check(|p| Ok(linear_loss(&p[0], &x, &y).0), &[w], &[grad], &cfg).unwrap();
        assert!(report.passed(), "{:?}", report);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let (w, x, y) = linear_setup();
        let (_, mut grad) = linear_loss(&w, &x, &y);
        grad.scale(1.01);
        let report = finite_difference_check(
            |p| Ok(linear_loss(&p[0], &x, &y).0),
            &[w],
            &[grad],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_error() > 5e-3);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let w = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[2]);
        let res = finite_difference_check(|_| Ok(f64::NAN), &[w], &[g], &GradCheckConfig::default());
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }
}
