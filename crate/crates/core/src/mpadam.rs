//! Mixed-precision Adam over one contiguous shard of the flat parameter space.
//!
//! The shard keeps fp32 master weights, momentum and variance (4 bytes
//! each, 12 bytes per element). The fp16 working copy is produced from the
//! master by [`materialize_f16`].

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{ConfigError, NumericError};
use crate::numerics::{f32_to_f16, Half};

/// Bytes of optimizer state per parameter (fp32 master, momentum, variance).
pub const OPTIMIZER_BYTES_PER_ELEMENT: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Static loss scale; gradients arrive already divided by it.
    pub loss_scale: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss_scale: 1.0,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.loss_scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(ConfigError::Invalid(alloc::format!(
                "invalid Adam hyperparameters {self:?}"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerShard {
    range: Range<usize>,
    master: Vec<f32>,
    m: Vec<f32>,
    v: Vec<f32>,
    step_count: u32,
}

impl OptimizerShard {
    /// A fresh shard over `range` initialised from `master`.
    pub fn new(range: Range<usize>, master: Vec<f32>) -> Self {
        assert_eq!(master.len(), range.len(), "master length must match range");
        let n = master.len();
        OptimizerShard {
            range,
            master,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step_count: 0,
        }
    }

    pub fn range(&self) -> Range<usize> {
        self.range.clone()
    }

    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }

    pub fn master(&self) -> &[f32] {
        &self.master
    }

    pub fn momentum(&self) -> &[f32] {
        &self.m
    }

    pub fn variance(&self) -> &[f32] {
        &self.v
    }

    pub fn step_count(&self) -> u32 {
        self.step_count
    }

    /// Bytes held by master, momentum and variance.
    pub fn resident_bytes(&self) -> usize {
        (self.master.len() + self.m.len() + self.v.len()) * core::mem::size_of::<f32>()
    }
}

/// One Adam step with bias correction; `grad` must already be averaged
/// and unscaled.
pub fn adam_step(
    shard: &mut OptimizerShard,
    grad: &[f32],
    hyper: &AdamHyper,
) -> Result<(), NumericError> {
    assert_eq!(
        grad.len(),
        shard.len(),
        "gradient length must match the shard"
    );
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(NumericError::Gradient {
            index: shard.range.start + i,
        });
    }
    shard.step_count += 1;
    let t = shard.step_count as f32;
    let bias1 = 1.0 - libm::powf(hyper.beta1, t);
    let bias2 = 1.0 - libm::powf(hyper.beta2, t);
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    for (((p, m), v), &g) in shard
        .master
        .iter_mut()
        .zip(shard.m.iter_mut())
        .zip(shard.v.iter_mut())
        .zip(grad)
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= hyper.lr * m_hat / (libm::sqrtf(v_hat) + hyper.eps);
    }
    Ok(())
}

/// fp16 working copy of the shard's master weights.
pub fn materialize_f16(shard: &OptimizerShard) -> Result<Vec<Half>, NumericError> {
    shard
        .master
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let h = f32_to_f16(x);
            if h.is_finite() {
                Ok(h)
            } else {
                Err(NumericError::HalfOverflow {
                    index: shard.range.start + i,
                    value: x,
                })
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_master() {
        let mut shard = OptimizerShard::new(0..3, vec![0.5, -1.0, 2.0]);
        adam_step(&mut shard, &[0.0; 3], &AdamHyper::default()).unwrap();
        assert_eq!(shard.master(), &[0.5, -1.0, 2.0]);
        assert_eq!(shard.step_count(), 1);
    }

    #[test]
    fn hand_computed_first_step() {
        let hyper = AdamHyper {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss_scale: 1.0,
        };
        let mut shard = OptimizerShard::new(0..1, vec![1.0]);
        adam_step(&mut shard, &[1.0], &hyper).unwrap();
        assert!((shard.momentum()[0] - 0.1).abs() < 1e-7);
        // 1 - 0.999 loses digits to cancellation in f32.
        assert!((shard.variance()[0] - 0.001).abs() < 1e-7);
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!(
            (shard.master()[0] - expected).abs() < 1e-6,
            "{}",
            shard.master()[0]
        );
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut shard = OptimizerShard::new(4..6, vec![0.0; 2]);
        let err = adam_step(&mut shard, &[0.0, f32::NAN], &AdamHyper::default()).unwrap_err();
        assert_eq!(err, NumericError::Gradient { index: 5 });
        assert_eq!(shard.step_count(), 0);
    }

    #[test]
    fn state_bytes_are_twelve_per_element() {
        let shard = OptimizerShard::new(10..110, vec![0.0; 100]);
        assert_eq!(shard.resident_bytes(), OPTIMIZER_BYTES_PER_ELEMENT * 100);
    }

    #[test]
    fn materialize() {
        let shard = OptimizerShard::new(0..2, vec![0.0, 1.0]);
        let h = materialize_f16(&shard).unwrap();
        assert_eq!(h[0].to_bits(), 0x0000);
        assert_eq!(h[1].to_bits(), 0x3C00);
        assert_eq!(materialize_f16(&shard).unwrap(), h);
        let big = OptimizerShard::new(7..8, vec![1e6]);
        assert!(matches!(
            materialize_f16(&big),
            Err(NumericError::HalfOverflow { index: 7, .. })
        ));
    }

    #[test]
    fn hyper_validation() {
        assert!(AdamHyper::default().validate().is_ok());
        assert!(AdamHyper {
            beta1: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AdamHyper {
            lr: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
