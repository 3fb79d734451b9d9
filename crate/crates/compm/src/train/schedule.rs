//! Linear warmup followed by linear decay to zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub base_lr: f64,
}

impl ScheduleConfig {
    pub fn new(warmup_steps: usize, total_steps: usize, base_lr: f64) -> Result<ScheduleConfig> {
        if warmup_steps > total_steps {
            return Err(Error::invalid_argument(format!(
                "warmup_steps {warmup_steps} exceeds total_steps {total_steps}"
            )));
        }
        Ok(ScheduleConfig { warmup_steps, total_steps, base_lr })
    }
}

/// Piecewise-linear learning rate: 0 → base over the warmup, base → 0 at
/// `total_steps`, and 0 beyond.
pub fn lr_at(schedule: &ScheduleConfig, step: usize) -> f64 {
    let &ScheduleConfig { warmup_steps, total_steps, base_lr } = schedule;
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        // Degenerate schedule (warmup == total): peak exactly at the boundary.
        if step == total_steps && warmup_steps == total_steps {
            return base_lr;
        }
        return 0.0;
    }
    base_lr * (total_steps - step) as f64 / (total_steps - warmup_steps) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_endpoints() {
        let s = ScheduleConfig::new(10, 100, 1e-5).unwrap();
        assert_eq!(lr_at(&s, 0), 0.0);
        assert_eq!(lr_at(&s, 10), 1e-5);
        assert_eq!(lr_at(&s, 100), 0.0);
        assert_eq!(lr_at(&s, 250), 0.0);
        // No warmup: full rate immediately.
        let s0 = ScheduleConfig::new(0, 100, 1e-5).unwrap();
        assert_eq!(lr_at(&s0, 0), 1e-5);
    }

    #[test]
    fn midpoints_match_the_piecewise_formula() {
        let s = ScheduleConfig::new(10, 100, 2e-4).unwrap();
        // Independent evaluation of the two linear segments.
        for step in 0..=120 {
            let expected = if step < 10 {
                2e-4 * step as f64 / 10.0
            } else if step >= 100 {
                0.0
            } else {
                2e-4 * (100 - step) as f64 / 90.0
            };
            assert!((lr_at(&s, step) - expected).abs() < 1e-18, "step {step}");
        }
    }

    #[test]
    fn warmup_is_the_global_maximum_and_curve_is_continuous() {
        let s = ScheduleConfig::new(7, 53, 3e-5).unwrap();
        let peak = lr_at(&s, 7);
        let mut prev = lr_at(&s, 0);
        for step in 1..=60 {
            let cur = lr_at(&s, step);
            assert!(cur <= peak + 1e-18);
            // Piecewise-linear continuity: successive steps differ by at most
            // the larger segment slope.
            let max_slope = (3e-5 / 7.0).max(3e-5 / 46.0);
            assert!((cur - prev).abs() <= max_slope + 1e-18);
            prev = cur;
        }
    }

    #[test]
    fn rejects_warmup_beyond_total() {
        assert!(ScheduleConfig::new(11, 10, 1e-5).is_err());
    }
}
