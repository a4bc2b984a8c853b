//! A tanh MLP with mean-squared-error loss and hand-written gradients.
//!
//! Parameters live in one flat vector, block by block in forward order:
//! each block stores its weight matrix row-major (`fan_out x fan_in`)
//! followed by its bias vector. Hidden blocks apply `tanh`; the output
//! block is linear.
//!
//! The forward and backward passes consume parameters as a *stream* of flat
//! segments ([`Pass::forward_segment`] ascending, [`Pass::backward_segment`]
//! descending). Every floating-point operation is tied to a flat index, so
//! the result is bitwise independent of how the vector is cut into segments.
//! That is what lets a rank that only ever holds one parameter chunk at a
//! time reproduce a rank holding the full replica.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ConfigError, NumericError};
use crate::numerics::{f32_to_f16, to_f32s, FlatTensor, Half, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    /// Number of hidden layers, at least one.
    pub layers: usize,
}

/// Flat index range `[start, end)` of one weight+bias block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerRange {
    pub layer_index: usize,
    pub start: usize,
    pub end: usize,
}

impl LayerRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

impl ModelSpec {
    pub fn new(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        layers: usize,
    ) -> Result<Self, ConfigError> {
        let spec = ModelSpec {
            input_dim,
            hidden_dim,
            output_dim,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 || self.layers == 0 {
            return Err(ConfigError::Invalid(alloc::format!(
                "model dims must all be >= 1, got {}-{}-{} with {} hidden layers",
                self.input_dim,
                self.hidden_dim,
                self.output_dim,
                self.layers
            )));
        }
        Ok(())
    }

    /// Number of weight+bias blocks (hidden layers plus the output layer).
    pub fn blocks(&self) -> usize {
        self.layers + 1
    }

    /// `(fan_in, fan_out)` of block `index`.
    pub fn block_dims(&self, index: usize) -> (usize, usize) {
        let fan_in = if index == 0 {
            self.input_dim
        } else {
            self.hidden_dim
        };
        let fan_out = if index == self.layers {
            self.output_dim
        } else {
            self.hidden_dim
        };
        (fan_in, fan_out)
    }

    /// Total weights and biases.
    pub fn param_count(&self) -> usize {
        (self.input_dim + 1) * self.hidden_dim
            + (self.layers - 1) * (self.hidden_dim + 1) * self.hidden_dim
            + (self.hidden_dim + 1) * self.output_dim
    }

    pub fn layer_ranges(&self) -> Vec<LayerRange> {
        let mut start = 0;
        (0..self.blocks())
            .map(|layer_index| {
                let (fan_in, fan_out) = self.block_dims(layer_index);
                let end = start + (fan_in + 1) * fan_out;
                let range = LayerRange {
                    layer_index,
                    start,
                    end,
                };
                start = end;
                range
            })
            .collect()
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero. `padded` extra
    /// trailing zeros are appended.
    pub fn init_params(&self, rng: &mut SeededRng, padded: usize) -> FlatTensor {
        let mut out = Vec::with_capacity(padded.max(self.param_count()));
        for block in 0..self.blocks() {
            let (fan_in, fan_out) = self.block_dims(block);
            let scale = 1.0 / libm::sqrtf(fan_in as f32);
            out.extend((0..fan_in * fan_out).map(|_| rng.uniform(scale)));
            out.extend(core::iter::repeat_n(0.0, fan_out));
        }
        out.resize(padded.max(out.len()), 0.0);
        FlatTensor::from_vec(out)
    }
}

/// Row-major inputs and targets for `batch_size` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub inputs: Vec<f32>,
    pub targets: Vec<f32>,
}

impl Batch {
    pub fn new(
        spec: &ModelSpec,
        batch_size: usize,
        inputs: Vec<f32>,
        targets: Vec<f32>,
    ) -> Result<Self, ConfigError> {
        if batch_size == 0
            || inputs.len() != batch_size * spec.input_dim
            || targets.len() != batch_size * spec.output_dim
        {
            return Err(ConfigError::Invalid(alloc::format!(
                "batch shape mismatch: {} samples, {} inputs, {} targets for a {}->{} model",
                batch_size,
                inputs.len(),
                targets.len(),
                spec.input_dim,
                spec.output_dim
            )));
        }
        Ok(Batch {
            batch_size,
            inputs,
            targets,
        })
    }

    /// Inputs uniform in `[-1, 1]`, targets uniform in `[-0.5, 0.5]`.
    pub fn random(spec: &ModelSpec, batch_size: usize, rng: &mut SeededRng) -> Self {
        let inputs = (0..batch_size * spec.input_dim)
            .map(|_| rng.uniform(1.0))
            .collect();
        let targets = (0..batch_size * spec.output_dim)
            .map(|_| rng.uniform(0.5))
            .collect();
        Batch {
            batch_size,
            inputs,
            targets,
        }
    }

    /// Samples `[start, start + count)`.
    pub fn slice(&self, spec: &ModelSpec, start: usize, count: usize) -> Batch {
        Batch {
            batch_size: count,
            inputs: self.inputs[start * spec.input_dim..(start + count) * spec.input_dim].to_vec(),
            targets: self.targets[start * spec.output_dim..(start + count) * spec.output_dim]
                .to_vec(),
        }
    }

    fn check(&self, spec: &ModelSpec) -> Result<(), ConfigError> {
        if self.batch_size >= 1
            && self.inputs.len() == self.batch_size * spec.input_dim
            && self.targets.len() == self.batch_size * spec.output_dim
        {
            Ok(())
        } else {
            Err(ConfigError::Invalid(alloc::format!(
                "batch of {} samples does not match the model shape",
                self.batch_size
            )))
        }
    }
}

/// One forward+backward pass over a batch, fed parameters segment by segment.
pub struct Pass<'a> {
    spec: &'a ModelSpec,
    batch: &'a Batch,
    batch_start: usize,
    loss_scale: f32,
    psi: usize,
    padded: usize,
    ranges: Vec<LayerRange>,
    /// `acts[b]` is the input of block `b`; `acts[blocks]` is the model output.
    acts: Vec<Vec<f32>>,
    acc: Vec<f32>,
    fwd_pos: usize,
    fwd_block: usize,
    loss: Option<f32>,
    bwd_pos: usize,
    bwd_block: usize,
    delta: Vec<f32>,
    dx: Vec<f32>,
}

impl<'a> Pass<'a> {
    /// `padded` is the length of the flat space the caller will stream,
    /// at least `param_count`; indices past `param_count` are padding.
    pub fn new(
        spec: &'a ModelSpec,
        batch: &'a Batch,
        batch_start: usize,
        padded: usize,
        loss_scale: f32,
    ) -> Result<Self, ConfigError> {
        spec.validate()?;
        batch.check(spec)?;
        let psi = spec.param_count();
        let ranges = spec.layer_ranges();
        let (_, first_out) = spec.block_dims(0);
        Ok(Pass {
            spec,
            batch,
            batch_start,
            loss_scale,
            psi,
            padded: padded.max(psi),
            ranges,
            acts: vec![batch.inputs.clone()],
            acc: vec![0.0; batch.batch_size * first_out],
            fwd_pos: 0,
            fwd_block: 0,
            loss: None,
            bwd_pos: padded.max(psi),
            bwd_block: spec.layers,
            delta: Vec::new(),
            dx: Vec::new(),
        })
    }

    pub fn padded_len(&self) -> usize {
        self.padded
    }

    /// Next flat index the forward pass expects.
    pub fn forward_position(&self) -> usize {
        self.fwd_pos
    }

    /// Exclusive end the next backward segment must have.
    pub fn backward_position(&self) -> usize {
        self.bwd_pos
    }

    pub fn loss(&self) -> Option<f32> {
        self.loss
    }

    /// Consume parameters `[start, start + params.len())`. Segments must be
    /// contiguous and ascending.
    pub fn forward_segment(&mut self, start: usize, params: &[f32]) -> Result<(), NumericError> {
        assert_eq!(start, self.fwd_pos, "forward segments must be contiguous");
        assert!(start + params.len() <= self.padded);
        let b = self.batch.batch_size;
        for (offset, &w) in params.iter().enumerate() {
            let idx = start + offset;
            if idx >= self.psi {
                continue;
            }
            let range = self.ranges[self.fwd_block];
            let (fan_in, fan_out) = self.spec.block_dims(self.fwd_block);
            let local = idx - range.start;
            let prev = &self.acts[self.fwd_block];
            if local < fan_in * fan_out {
                let (o, i) = (local / fan_in, local % fan_in);
                for s in 0..b {
                    self.acc[s * fan_out + o] += w * prev[s * fan_in + i];
                }
                continue;
            }
            let o = local - fan_in * fan_out;
            let hidden = self.fwd_block < self.spec.layers;
            for s in 0..b {
                let z = self.acc[s * fan_out + o] + w;
                self.acc[s * fan_out + o] = if hidden { libm::tanhf(z) } else { z };
            }
            if o + 1 == fan_out {
                let out = core::mem::take(&mut self.acc);
                self.acts.push(out);
                self.fwd_block += 1;
                if self.fwd_block < self.spec.blocks() {
                    let (_, next_out) = self.spec.block_dims(self.fwd_block);
                    self.acc = vec![0.0; b * next_out];
                } else {
                    self.finish_forward()?;
                }
            }
        }
        self.fwd_pos = start + params.len();
        Ok(())
    }

    fn finish_forward(&mut self) -> Result<(), NumericError> {
        let out_dim = self.spec.output_dim;
        let count = (self.batch.batch_size * out_dim) as f32;
        let output = &self.acts[self.spec.blocks()];
        let mut sum = 0.0f32;
        let mut delta = Vec::with_capacity(output.len());
        for (k, (&y, &t)) in output.iter().zip(&self.batch.targets).enumerate() {
            let diff = y - t;
            sum += diff * diff;
            let d = 2.0 * diff / count * self.loss_scale;
            if !d.is_finite() {
                return Err(NumericError::Model {
                    what: "output gradient",
                    index: k,
                    batch_start: self.batch_start,
                });
            }
            delta.push(d);
        }
        let loss = sum / count;
        if !loss.is_finite() {
            return Err(NumericError::Model {
                what: "loss",
                index: 0,
                batch_start: self.batch_start,
            });
        }
        self.loss = Some(loss);
        self.delta = delta;
        let (fan_in, _) = self.spec.block_dims(self.spec.layers);
        self.dx = vec![0.0; self.batch.batch_size * fan_in];
        Ok(())
    }

    /// Consume parameters `[end - params.len(), end)` and write the matching
    /// fp32 gradients (scaled by the loss scale) into `grads`. Segments must
    /// be contiguous and descending, and the forward pass must be complete.
    pub fn backward_segment(
        &mut self,
        end: usize,
        params: &[f32],
        grads: &mut [f32],
    ) -> Result<(), NumericError> {
        assert!(
            self.loss.is_some(),
            "backward before the forward pass finished"
        );
        assert_eq!(end, self.bwd_pos, "backward segments must be contiguous");
        assert_eq!(params.len(), grads.len());
        let start = end - params.len();
        let b = self.batch.batch_size;
        for offset in (0..params.len()).rev() {
            let idx = start + offset;
            if idx >= self.psi {
                grads[offset] = 0.0;
                continue;
            }
            let block = self.bwd_block;
            let range = self.ranges[block];
            let (fan_in, fan_out) = self.spec.block_dims(block);
            let local = idx - range.start;
            let g = if local >= fan_in * fan_out {
                let o = local - fan_in * fan_out;
                let mut g = 0.0f32;
                for s in 0..b {
                    g += self.delta[s * fan_out + o];
                }
                g
            } else {
                let (o, i) = (local / fan_in, local % fan_in);
                let w = params[offset];
                let prev = &self.acts[block];
                let mut g = 0.0f32;
                for s in 0..b {
                    let d = self.delta[s * fan_out + o];
                    g += d * prev[s * fan_in + i];
                    if block > 0 {
                        self.dx[s * fan_in + i] += w * d;
                    }
                }
                g
            };
            if !g.is_finite() {
                return Err(NumericError::Model {
                    what: "gradient",
                    index: idx,
                    batch_start: self.batch_start,
                });
            }
            grads[offset] = g;
            if local == 0 && block > 0 {
                // Block input is the tanh output of the block below.
                let act = &self.acts[block];
                let dx = core::mem::take(&mut self.dx);
                self.delta = dx
                    .iter()
                    .zip(act)
                    .map(|(&g, &a)| g * (1.0 - a * a))
                    .collect();
                self.bwd_block -= 1;
                let (below_in, _) = self.spec.block_dims(self.bwd_block);
                self.dx = vec![0.0; b * below_in];
            }
        }
        self.bwd_pos = start;
        Ok(())
    }
}

/// Loss and unrounded fp32 gradients (length `param_count`) for fp32 parameters.
pub fn forward_backward_f32(
    spec: &ModelSpec,
    params: &[f32],
    batch: &Batch,
) -> Result<(f32, Vec<f32>), crate::error::Error> {
    let psi = spec.param_count();
    if params.len() != psi {
        return Err(ConfigError::Invalid(alloc::format!(
            "expected {psi} parameters, got {}",
            params.len()
        ))
        .into());
    }
    let mut pass = Pass::new(spec, batch, 0, psi, 1.0)?;
    pass.forward_segment(0, params)?;
    let mut grads = vec![0.0; psi];
    pass.backward_segment(psi, params, &mut grads)?;
    Ok((pass.loss().unwrap_or(0.0), grads))
}

/// Loss and fp16-rounded gradients for fp16 parameters.
pub fn forward_backward(
    spec: &ModelSpec,
    params_f16: &[Half],
    batch: &Batch,
) -> Result<(f32, FlatTensor), crate::error::Error> {
    let params = to_f32s(params_f16);
    let (loss, grads) = forward_backward_f32(spec, &params, batch)?;
    let rounded = grads
        .into_iter()
        .map(|g| f32_to_f16(g).to_f32())
        .collect::<Vec<_>>();
    Ok((loss, FlatTensor::from_vec(rounded)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelSpec {
        ModelSpec::new(2, 2, 1, 1).unwrap()
    }

    #[test]
    fn param_counts() {
        assert_eq!(tiny().param_count(), 9);
        assert_eq!(ModelSpec::new(4, 8, 2, 3).unwrap().param_count(), 202);
        assert_eq!(
            ModelSpec::new(2, 8, 1, 2).unwrap().param_count(),
            24 + 72 + 9
        );
        assert!(ModelSpec::new(0, 2, 1, 1).is_err());
        assert!(ModelSpec::new(2, 2, 1, 0).is_err());
    }

    #[test]
    fn ranges_tile_the_flat_space() {
        let r = tiny().layer_ranges();
        assert_eq!(
            r,
            vec![
                LayerRange {
                    layer_index: 0,
                    start: 0,
                    end: 6
                },
                LayerRange {
                    layer_index: 1,
                    start: 6,
                    end: 9
                },
            ]
        );
        let spec = ModelSpec::new(4, 8, 2, 3).unwrap();
        let r = spec.layer_ranges();
        assert_eq!(r.first().unwrap().start, 0);
        assert_eq!(r.last().unwrap().end, spec.param_count());
        assert!(r.windows(2).all(|w| w[0].end == w[1].start));
    }

    #[test]
    fn zeros_give_zero_loss_and_grads() {
        let spec = tiny();
        let batch = Batch::new(&spec, 3, vec![0.0; 6], vec![0.0; 3]).unwrap();
        let (loss, grads) = forward_backward(&spec, &[Half::ZERO; 9], &batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn duplicated_batch_is_invariant() {
        let spec = ModelSpec::new(3, 4, 2, 2).unwrap();
        let mut rng = SeededRng::new(11);
        let params = crate::numerics::to_halves(&spec.init_params(&mut rng, 0));
        let batch = Batch::random(&spec, 2, &mut rng);
        let doubled = Batch {
            batch_size: 4,
            inputs: [batch.inputs.clone(), batch.inputs.clone()].concat(),
            targets: [batch.targets.clone(), batch.targets.clone()].concat(),
        };
        let (l1, g1) = forward_backward(&spec, &params, &batch).unwrap();
        let (l2, g2) = forward_backward(&spec, &params, &doubled).unwrap();
        assert!((l1 - l2).abs() <= 1e-6 * l1.abs().max(1.0));
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((a - b).abs() <= 1e-3 * a.abs().max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn segmentation_does_not_change_bits() {
        let spec = ModelSpec::new(2, 8, 1, 2).unwrap();
        let mut rng = SeededRng::new(5);
        let padded = spec.param_count() + 3;
        let params = spec.init_params(&mut rng, padded);
        let batch = Batch::random(&spec, 4, &mut rng);

        let mut whole = Pass::new(&spec, &batch, 0, padded, 1.0).unwrap();
        whole.forward_segment(0, &params).unwrap();
        let mut g_whole = vec![0.0; padded];
        whole
            .backward_segment(padded, &params, &mut g_whole)
            .unwrap();

        for cut in [1usize, 3, 7, 13] {
            let mut pass = Pass::new(&spec, &batch, 0, padded, 1.0).unwrap();
            let mut pos = 0;
            while pos < padded {
                let end = (pos + cut).min(padded);
                pass.forward_segment(pos, &params[pos..end]).unwrap();
                pos = end;
            }
            let mut g = vec![0.0; padded];
            let mut end = padded;
            while end > 0 {
                let start = end.saturating_sub(cut);
                pass.backward_segment(end, &params[start..end], &mut g[start..end])
                    .unwrap();
                end = start;
            }
            assert_eq!(
                pass.loss().unwrap().to_bits(),
                whole.loss().unwrap().to_bits()
            );
            assert!(g
                .iter()
                .zip(&g_whole)
                .all(|(a, b)| a.to_bits() == b.to_bits()));
            assert!(g[spec.param_count()..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn non_finite_is_reported() {
        let spec = tiny();
        let batch = Batch::new(&spec, 1, vec![1.0, 1.0], vec![0.0]).unwrap();
        let mut params = vec![Half::ZERO; 9];
        params[6] = Half::INFINITY;
        let err = forward_backward(&spec, &params, &batch).unwrap_err();
        assert!(matches!(err, crate::error::Error::Numeric(_)));
    }
}
