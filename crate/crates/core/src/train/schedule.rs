//! Linear warmup followed by cosine decay.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    /// Learning rate for update `step` (1-based in the training loops;
    /// step 0 is the warmup origin). Linear from 0 to `base_lr` over the
    /// warmup, then cosine down to `min_lr` at `total_steps`, clamped
    /// beyond.
    pub fn lr(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.base_lr * (step as f64 / self.warmup_steps as f64);
        }
        if step >= self.total_steps {
            return self.min_lr;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

pub fn lr_schedule(step: usize, s: &Schedule) -> f64 {
    s.lr(step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn finetune() -> Schedule {
        Schedule {
            base_lr: 1e-4,
            min_lr: 1e-6,
            warmup_steps: 2000,
            total_steps: 10_000,
        }
    }

    #[test]
    fn endpoints() {
        let s = finetune();
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(1000), 5e-5);
        assert_eq!(s.lr(2000), 1e-4);
        assert_eq!(s.lr(10_000), 1e-6);
        assert_eq!(s.lr(50_000), 1e-6);
    }

    #[test]
    fn no_warmup_starts_at_base() {
        let s = Schedule {
            warmup_steps: 0,
            ..finetune()
        };
        assert!((s.lr(0) - 1e-4).abs() < 1e-18);
        assert!(s.lr(1) < 1e-4);
    }

    #[test]
    fn equal_min_and_base_is_constant() {
        let s = Schedule {
            base_lr: 1e-4,
            min_lr: 1e-4,
            warmup_steps: 0,
            total_steps: 100,
        };
        for k in 0..150 {
            assert!((s.lr(k) - 1e-4).abs() < 1e-20);
        }
    }

    proptest! {
        #[test]
        fn nonincreasing_after_warmup(warm in 0usize..50, extra in 1usize..500, k in 0usize..600) {
            let s = Schedule { base_lr: 3e-3, min_lr: 1e-5, warmup_steps: warm, total_steps: warm + extra };
            let a = warm + k;
            prop_assert!(s.lr(a + 1) <= s.lr(a));
            prop_assert!(s.lr(a) >= s.min_lr && s.lr(a) <= s.base_lr);
        }

        #[test]
        fn continuous_at_warmup_boundary(warm in 1usize..5000) {
            let s = Schedule { base_lr: 1e-4, min_lr: 1e-6, warmup_steps: warm, total_steps: warm + 100_000 };
            let left = s.lr(warm - 1);
            let right = s.lr(warm + 1);
            let jump = s.base_lr / warm as f64;
            prop_assert!((s.lr(warm) - left) <= jump * (1.0 + 1e-12));
            prop_assert!((s.lr(warm) - right).abs() <= jump.max(1e-8));
        }
    }
}
