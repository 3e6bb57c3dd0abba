use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LrSchedule {
    Fixed,
    /// Multiply by `factor` every `every` updates.
    Step { factor: f64, every: usize },
    /// Multiply by `factor` once at each listed update.
    Milestones { factor: f64, at: Vec<usize> },
    /// Multiply by `factor` when the mean loss of a window of `window`
    /// updates has dropped by less than `min_drop_pct` percent relative to
    /// the reference value.
    Plateau { factor: f64, min_drop_pct: f64, window: usize },
}

impl LrSchedule {
    pub fn problems(&self) -> Vec<String> {
        let factor_ok = |f: f64| f > 0.0 && f <= 1.0;
        match self {
            Self::Fixed => vec![],
            Self::Step { factor, every } => {
                let mut p = vec![];
                if !factor_ok(*factor) {
                    p.push(format!("step factor must lie in (0, 1], got {factor}"));
                }
                if *every == 0 {
                    p.push("step interval must be positive".into());
                }
                p
            }
            Self::Milestones { factor, .. } if !factor_ok(*factor) => {
                vec![format!("milestone factor must lie in (0, 1], got {factor}")]
            }
            Self::Milestones { .. } => vec![],
            Self::Plateau { factor, min_drop_pct, window } => {
                let mut p = vec![];
                if !factor_ok(*factor) {
                    p.push(format!("plateau factor must lie in (0, 1], got {factor}"));
                }
                if *min_drop_pct < 0.0 {
                    p.push(format!("plateau threshold must be non-negative, got {min_drop_pct}"));
                }
                if *window == 0 {
                    p.push("plateau window must be positive".into());
                }
                p
            }
        }
    }

    pub fn is_plateau(&self) -> bool {
        matches!(self, Self::Plateau { .. })
    }
}

/// Tracks the rate across updates. `observe` is called once per update with
/// that update's loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LrScheduler {
    base: f64,
    schedule: LrSchedule,
    t: usize,
    rate: f64,
    window_sum: f64,
    window_len: usize,
    reference: Option<f64>,
    drops: usize,
}

impl LrScheduler {
    pub fn new(base: f64, schedule: LrSchedule) -> Self {
        Self { base, schedule, t: 0, rate: base, window_sum: 0.0, window_len: 0, reference: None, drops: 0 }
    }

    /// Rate for the next update.
    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn updates(&self) -> usize {
        self.t
    }

    /// Plateau reductions applied so far.
    pub fn drops(&self) -> usize {
        self.drops
    }

    pub fn observe(&mut self, loss: f64) {
        self.t += 1;
        match &self.schedule {
            LrSchedule::Fixed => {}
            LrSchedule::Step { factor, every } => {
                self.rate = self.base * factor.powi((self.t / every) as i32);
            }
            LrSchedule::Milestones { factor, at } => {
                let passed = at.iter().filter(|&&m| m <= self.t).count();
                self.rate = self.base * factor.powi(passed as i32);
            }
            LrSchedule::Plateau { factor, min_drop_pct, window } => {
                let reference = *self.reference.get_or_insert(loss);
                self.window_sum += loss;
                self.window_len += 1;
                if self.window_len == *window {
                    let mean = self.window_sum / *window as f64;
                    self.window_sum = 0.0;
                    self.window_len = 0;
                    let drop_pct = 100.0 * (reference - mean) / reference.abs().max(f64::MIN_POSITIVE);
                    if drop_pct < *min_drop_pct {
                        self.rate *= factor;
                        self.drops += 1;
                        self.reference = None;
                    } else {
                        self.reference = Some(mean);
                    }
                }
            }
        }
    }
}

/// Rate in effect for update `t` (0-based) given the losses of the updates
/// before it.
pub fn lr_at(base: f64, schedule: &LrSchedule, t: usize, losses: &[f64]) -> f64 {
    let mut s = LrScheduler::new(base, schedule.clone());
    match schedule {
        LrSchedule::Plateau { .. } => losses.iter().take(t).for_each(|&l| s.observe(l)),
        _ => (0..t).for_each(|_| s.observe(0.0)),
    }
    s.rate()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_cnn_schedule() {
        let sched = LrSchedule::Milestones { factor: 0.1, at: vec![4000] };
        assert_eq!(lr_at(0.001, &sched, 0, &[]), 0.001);
        assert_eq!(lr_at(0.001, &sched, 3999, &[]), 0.001);
        assert!((lr_at(0.001, &sched, 4000, &[]) - 0.0001).abs() < 1e-18);
        assert!((lr_at(0.001, &sched, 4999, &[]) - 0.0001).abs() < 1e-18);
    }

    #[test]
    fn step_schedule_compounds() {
        let sched = LrSchedule::Step { factor: 0.5, every: 10 };
        assert_eq!(lr_at(1.0, &sched, 9, &[]), 1.0);
        assert_eq!(lr_at(1.0, &sched, 10, &[]), 0.5);
        assert_eq!(lr_at(1.0, &sched, 25, &[]), 0.25);
    }

    #[test]
    fn flat_loss_drops_once_per_window() {
        let sched = LrSchedule::Plateau { factor: 0.1, min_drop_pct: 1.0, window: 5 };
        let flat = vec![2.0; 12];
        assert_eq!(lr_at(1.0, &sched, 4, &flat), 1.0);
        assert!((lr_at(1.0, &sched, 5, &flat) - 0.1).abs() < 1e-15);
        assert!((lr_at(1.0, &sched, 9, &flat) - 0.1).abs() < 1e-15);
        assert!((lr_at(1.0, &sched, 10, &flat) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn improving_loss_never_drops() {
        let sched = LrSchedule::Plateau { factor: 0.1, min_drop_pct: 1.0, window: 5 };
        let improving: Vec<f64> = (0..100).map(|i| 10.0 * 0.95f64.powi(i)).collect();
        assert_eq!(lr_at(1.0, &sched, 100, &improving), 1.0);
    }

    #[test]
    fn invalid_schedules_are_reported() {
        assert_eq!(LrSchedule::Step { factor: 2.0, every: 0 }.problems().len(), 2);
        assert!(LrSchedule::Fixed.problems().is_empty());
    }
}
