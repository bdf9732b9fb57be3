use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    LinearDecay,
    CosineDecay,
    Constant,
}

/// Learning rate as a function of the update index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn linear(lr_start: f64, lr_end: f64, total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::LinearDecay,
            lr_start,
            lr_end,
            total_steps,
        }
    }

    pub fn cosine(lr_start: f64, lr_end: f64, total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::CosineDecay,
            lr_start,
            lr_end,
            total_steps,
        }
    }

    pub fn constant(lr: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            lr_start: lr,
            lr_end: lr,
            total_steps: 1,
        }
    }

    /// Steps past `total_steps` hold the final rate.
    pub fn lr(&self, step: u64) -> f64 {
        let total = self.total_steps.max(1);
        if step >= total {
            return match self.kind {
                ScheduleKind::Constant => self.lr_start,
                _ => self.lr_end,
            };
        }
        let frac = step as f64 / total as f64;
        match self.kind {
            ScheduleKind::Constant => self.lr_start,
            ScheduleKind::LinearDecay => self.lr_start + (self.lr_end - self.lr_start) * frac,
            ScheduleKind::CosineDecay => {
                self.lr_end
                    + (self.lr_start - self.lr_end) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_hits_end_exactly() {
        let s = LrSchedule::linear(1e-3, 0.0, 250);
        assert_eq!(s.lr(0), 1e-3);
        assert_eq!(s.lr(250), 0.0);
    }

    #[test]
    fn cosine_is_monotone() {
        let s = LrSchedule::cosine(8e-4, 4e-5, 97);
        let mut prev = f64::INFINITY;
        for t in 0..=120 {
            let lr = s.lr(t);
            assert!(lr <= prev);
            prev = lr;
        }
        assert_eq!(s.lr(97), 4e-5);
    }

    proptest! {
        #[test]
        fn rate_stays_between_endpoints(start in 1e-6f64..1.0, end in 0.0f64..1.0, total in 1u64..500, t in 0u64..600, cos in any::<bool>()) {
            let s = if cos { LrSchedule::cosine(start, end, total) } else { LrSchedule::linear(start, end, total) };
            let lr = s.lr(t);
            let (lo, hi) = (start.min(end), start.max(end));
            prop_assert!(lr >= lo - 1e-15 && lr <= hi + 1e-15);
        }
    }
}
