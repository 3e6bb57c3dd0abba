//! Prints the learning rate produced by each schedule over a short run,
//! feeding the plateau schedule a loss that stops improving.
//!
//! `cargo run --example lr_schedules`

use treenet::trainer::{LrSchedule, LrScheduler};

fn main() {
    let schedules = [
        LrSchedule::Fixed,
        LrSchedule::Step { factor: 0.5, every: 10 },
        LrSchedule::Milestones { factor: 0.1, at: vec![15, 25] },
        LrSchedule::Plateau { factor: 0.1, min_drop_pct: 1.0, window: 5 },
    ];
    for s in schedules {
        let mut sched = LrScheduler::new(0.1, s.clone());
        let mut rates = Vec::new();
        for t in 0..30 {
            rates.push(sched.rate());
            let loss = if t < 12 { 1.0 / (t + 1) as f64 } else { 0.08 };
            sched.observe(loss);
        }
        let shown: Vec<String> = rates.iter().step_by(5).map(|r| format!("{r:.4}")).collect();
        println!("{:<56} {}", format!("{s:?}"), shown.join(" "));
        if s.is_plateau() {
            println!("{:<56} plateau drops {}", "", sched.drops());
        }
    }
}
