//! Emulated half precision with a single-precision master copy.

use half::f16;
use serde::{Deserialize, Serialize};

/// Arithmetic mode for forward and backward passes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    /// Values rounded to binary16 after every operation; master weights and
    /// the update kept in binary32.
    Half,
}

impl Precision {
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F64 => v,
            Precision::Half => round_half(v),
        }
    }

    /// Rounding applied to master weights and unscaled gradients.
    pub fn round_master(self, v: f64) -> f64 {
        match self {
            Precision::F64 => v,
            Precision::Half => round_single(v),
        }
    }
}

/// Nearest binary16 value, ties to even; overflows to infinity.
pub fn round_half(v: f64) -> f64 {
    f16::from_f64(v).to_f64()
}

pub fn round_single(v: f64) -> f64 {
    v as f32 as f64
}

/// Clean steps after which a dynamic scale doubles.
pub const SCALE_GROWTH_INTERVAL: u32 = 200;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossScale {
    pub scale: f64,
    pub dynamic: bool,
    /// Consecutive steps without overflow.
    pub clean: u32,
}

impl LossScale {
    pub fn fixed(scale: f64) -> Self {
        LossScale { scale, dynamic: false, clean: 0 }
    }

    pub fn dynamic(scale: f64) -> Self {
        LossScale { scale, dynamic: true, clean: 0 }
    }

    /// Records one step's outcome. Overflow halves a dynamic scale (never
    /// below 1); a long enough clean run doubles it.
    pub fn observe(&mut self, overflow: bool) {
        if !self.dynamic {
            return;
        }
        if overflow {
            self.scale = (self.scale / 2.0).max(1.0);
            self.clean = 0;
        } else {
            self.clean += 1;
            if self.clean >= SCALE_GROWTH_INTERVAL {
                self.scale *= 2.0;
                self.clean = 0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_rounding_edges() {
        assert_eq!(round_half(2f64.powi(-24)), 2f64.powi(-24));
        assert_eq!(round_half(2f64.powi(-26)), 0.0);
        assert_eq!(round_half(65504.0), 65504.0);
        assert!(round_half(70000.0).is_infinite());
        // 1 + 2^-11 is a tie between 1 and 1 + 2^-10; even mantissa wins
        assert_eq!(round_half(1.0 + 2f64.powi(-11)), 1.0);
    }

    #[test]
    fn dynamic_scale_schedule() {
        let mut s = LossScale::dynamic(1024.0);
        s.observe(true);
        assert_eq!(s.scale, 512.0);
        for _ in 0..SCALE_GROWTH_INTERVAL - 1 {
            s.observe(false);
        }
        assert_eq!(s.scale, 512.0);
        s.observe(false);
        assert_eq!(s.scale, 1024.0);
        let mut f = LossScale::fixed(8.0);
        f.observe(true);
        assert_eq!(f.scale, 8.0);
    }
}
