//! Independent double-precision model used as a finite-difference oracle.

#![allow(dead_code)]

use zerodp_core::model::{Batch, ModelSpec};

/// Mean squared error of a tanh MLP with the flat layout: per block, an
/// `out x in` row-major weight matrix followed by `out` biases.
pub fn loss_f64(spec: &ModelSpec, params: &[f64], batch: &Batch) -> f64 {
    let mut total = 0.0;
    for s in 0..batch.batch_size {
        let mut act: Vec<f64> = batch.inputs[s * spec.input_dim..(s + 1) * spec.input_dim]
            .iter()
            .map(|&x| x as f64)
            .collect();
        let mut offset = 0;
        for block in 0..=spec.layers {
            let fan_in = act.len();
            let fan_out = if block == spec.layers {
                spec.output_dim
            } else {
                spec.hidden_dim
            };
            let weights = &params[offset..offset + fan_in * fan_out];
            let biases = &params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            offset += (fan_in + 1) * fan_out;
            act = (0..fan_out)
                .map(|o| {
                    let z: f64 = (0..fan_in)
                        .map(|i| weights[o * fan_in + i] * act[i])
                        .sum::<f64>()
                        + biases[o];
                    if block == spec.layers {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
        }
        let targets = &batch.targets[s * spec.output_dim..(s + 1) * spec.output_dim];
        total += act
            .iter()
            .zip(targets)
            .map(|(y, &t)| (y - t as f64).powi(2))
            .sum::<f64>();
    }
    total / (batch.batch_size * spec.output_dim) as f64
}

/// Central differences of [`loss_f64`] with step `h`.
pub fn numeric_grad(spec: &ModelSpec, params: &[f64], batch: &Batch, h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let x = p[i];
            p[i] = x + h;
            let up = loss_f64(spec, &p, batch);
            p[i] = x - h;
            let down = loss_f64(spec, &p, batch);
            p[i] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
