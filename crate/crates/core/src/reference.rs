// SPDX-License-Identifier: Apache-2.0

//! Brute-force reference implementations on dense `[H][W][C]` data.
//!
//! Convolution and FC oracles accumulate in f64 and also return the
//! magnitude `|b| + sum |w * x|` of every output, which bounds the rounding
//! error of any f32 summation order. Comparisons divide by that magnitude.

use crate::model::{LayerDescriptor, LrnSpec, PoolMode, PoolSpec, TensorShape};

/// f64 values plus per-element error scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub shape: TensorShape,
    pub values: Vec<f64>,
    pub magnitudes: Vec<f64>,
}

/// Nested-loop convolution. `weights` is dense `[M][K][K][C/groups]`.
/// Applies bias and the layer's ReLU; ignores pool and LRN attachments.
#[allow(clippy::needless_range_loop)]
pub fn conv_reference(layer: &LayerDescriptor, input: &[f32], weights: &[f32], bias: &[f32]) -> Reference {
    let s = layer.input_shape;
    let out = layer.conv_output_shape().expect("valid layer");
    let (k, st, p) = (layer.kernel, layer.stride, layer.pad as isize);
    let cg = layer.group_channels();
    let mg = layer.group_maps();
    assert_eq!(input.len(), s.len());
    assert_eq!(weights.len(), layer.output_maps * k * k * cg);
    let mut values = vec![0.0; out.len()];
    let mut magnitudes = vec![0.0; out.len()];
    for oy in 0..out.height {
        for ox in 0..out.width {
            for m in 0..layer.output_maps {
                let c0 = (m / mg) * cg;
                let mut acc = bias[m] as f64;
                let mut mag = (bias[m] as f64).abs();
                for ky in 0..k {
                    let iy = (oy * st + ky) as isize - p;
                    if iy < 0 || iy as usize >= s.height {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * st + kx) as isize - p;
                        if ix < 0 || ix as usize >= s.width {
                            continue;
                        }
                        let base = (iy as usize * s.width + ix as usize) * s.channels + c0;
                        let wbase = ((m * k + ky) * k + kx) * cg;
                        for c in 0..cg {
                            let t = weights[wbase + c] as f64 * input[base + c] as f64;
                            acc += t;
                            mag += t.abs();
                        }
                    }
                }
                if layer.relu && acc < 0.0 {
                    acc = 0.0;
                }
                let i = (oy * out.width + ox) * out.channels + m;
                values[i] = acc;
                magnitudes[i] = mag;
            }
        }
    }
    Reference {
        shape: out,
        values,
        magnitudes,
    }
}

/// Dense mat-vec with `weights` as `[M][C]`.
pub fn fc_reference(input: &[f32], weights: &[f32], bias: &[f32], relu: bool) -> Reference {
    let c = input.len();
    let m = bias.len();
    assert_eq!(weights.len(), m * c);
    let mut values = Vec::with_capacity(m);
    let mut magnitudes = Vec::with_capacity(m);
    for (row, b) in weights.chunks_exact(c).zip(bias) {
        let mut acc = *b as f64;
        let mut mag = (*b as f64).abs();
        for (w, x) in row.iter().zip(input) {
            let t = *w as f64 * *x as f64;
            acc += t;
            mag += t.abs();
        }
        if relu && acc < 0.0 {
            acc = 0.0;
        }
        values.push(acc);
        magnitudes.push(mag);
    }
    Reference {
        shape: TensorShape {
            width: 1,
            height: 1,
            channels: m,
        },
        values,
        magnitudes,
    }
}

fn pooled_shape(shape: TensorShape, spec: &PoolSpec) -> TensorShape {
    TensorShape {
        width: (shape.width - spec.window) / spec.stride + 1,
        height: (shape.height - spec.window) / spec.stride + 1,
        channels: shape.channels,
    }
}

/// Sliding-window pooling in f32, visiting each window row-major.
pub fn pool_reference_f32(shape: TensorShape, input: &[f32], spec: &PoolSpec) -> (TensorShape, Vec<f32>) {
    let out = pooled_shape(shape, spec);
    let mut values = Vec::with_capacity(out.len());
    for oy in 0..out.height {
        for ox in 0..out.width {
            for c in 0..shape.channels {
                let at = |r: usize, q: usize| {
                    input[((oy * spec.stride + r) * shape.width + ox * spec.stride + q) * shape.channels + c]
                };
                let v = match spec.mode {
                    PoolMode::Max => {
                        let mut m = at(0, 0);
                        for r in 0..spec.window {
                            for q in 0..spec.window {
                                if at(r, q) > m {
                                    m = at(r, q);
                                }
                            }
                        }
                        m
                    }
                    PoolMode::Avg => {
                        let mut sum = 0.0f32;
                        for r in 0..spec.window {
                            for q in 0..spec.window {
                                sum += at(r, q);
                            }
                        }
                        sum / (spec.window * spec.window) as f32
                    }
                };
                values.push(v);
            }
        }
    }
    (out, values)
}

/// Pools a reference tensor in f64. Magnitudes take the window maximum.
pub fn pool_reference(r: &Reference, spec: &PoolSpec) -> Reference {
    let shape = r.shape;
    let out = pooled_shape(shape, spec);
    let mut values = Vec::with_capacity(out.len());
    let mut magnitudes = Vec::with_capacity(out.len());
    let n = (spec.window * spec.window) as f64;
    for oy in 0..out.height {
        for ox in 0..out.width {
            for c in 0..shape.channels {
                let mut vmax = f64::NEG_INFINITY;
                let mut vsum = 0.0;
                let mut mag = 0.0f64;
                for dy in 0..spec.window {
                    for dx in 0..spec.window {
                        let i = ((oy * spec.stride + dy) * shape.width + ox * spec.stride + dx) * shape.channels + c;
                        vmax = vmax.max(r.values[i]);
                        vsum += r.values[i];
                        mag = mag.max(r.magnitudes[i]);
                    }
                }
                values.push(match spec.mode {
                    PoolMode::Max => vmax,
                    PoolMode::Avg => vsum / n,
                });
                magnitudes.push(mag);
            }
        }
    }
    Reference {
        shape: out,
        values,
        magnitudes,
    }
}

/// Textbook cross-channel LRN in f64.
pub fn lrn_reference(shape: TensorShape, input: &[f32], lrn: &LrnSpec) -> Vec<f64> {
    let c = shape.channels;
    let half = lrn.local_size / 2;
    let mut out = Vec::with_capacity(input.len());
    for px in input.chunks_exact(c) {
        for f in 0..c {
            let lo = f.saturating_sub(half);
            let hi = (f + half).min(c - 1);
            let sum: f64 = px[lo..=hi].iter().map(|v| (*v as f64) * (*v as f64)).sum();
            let scale = (lrn.k as f64 + lrn.alpha as f64 * sum).powf(-(lrn.beta as f64));
            out.push(px[f] as f64 * scale);
        }
    }
    out
}

/// `max |got - ref| / magnitude`; a zero magnitude demands an exact zero.
pub fn max_normalized_error(got: &[f32], r: &Reference) -> f64 {
    assert_eq!(got.len(), r.values.len(), "length mismatch");
    got.iter()
        .zip(&r.values)
        .zip(&r.magnitudes)
        .map(|((g, v), m)| {
            let d = (*g as f64 - v).abs();
            if *m > 0.0 {
                d / m
            } else if d == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

/// Elementwise `max |got - ref| / |ref|`; a zero reference demands an exact zero.
pub fn max_relative_error(got: &[f32], reference: &[f64]) -> f64 {
    assert_eq!(got.len(), reference.len(), "length mismatch");
    got.iter()
        .zip(reference)
        .map(|(g, v)| {
            let d = (*g as f64 - v).abs();
            if *v != 0.0 {
                d / v.abs()
            } else if d == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let shape = TensorShape::new(3, 3, 1).unwrap();
        let layer = LayerDescriptor::conv(shape, 1, 3, 1, 1);
        let input: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let r = conv_reference(&layer, &input, &w, &[0.5]);
        assert_eq!(r.values, input.iter().map(|v| *v as f64 + 0.5).collect::<Vec<_>>());
    }

    #[test]
    fn grouped_conv_uses_own_channels() {
        let shape = TensorShape::new(1, 1, 2).unwrap();
        let layer = LayerDescriptor::conv(shape, 2, 1, 1, 0).with_groups(2);
        let r = conv_reference(&layer, &[3.0, 5.0], &[2.0, 7.0], &[0.0, 0.0]);
        assert_eq!(r.values, vec![6.0, 35.0]);
    }

    #[test]
    fn fc_matvec() {
        let r = fc_reference(&[1.0, 2.0], &[1.0, 1.0, -1.0, 0.0], &[0.0, 0.0], true);
        assert_eq!(r.values, vec![3.0, 0.0]);
        assert_eq!(r.magnitudes, vec![3.0, 1.0]);
    }

    #[test]
    fn pool_f32_max() {
        let shape = TensorShape::new(3, 3, 1).unwrap();
        let input: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let spec = PoolSpec {
            mode: PoolMode::Max,
            window: 2,
            stride: 1,
        };
        assert_eq!(pool_reference_f32(shape, &input, &spec).1, vec![5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn normalized_error_zero_magnitude() {
        let r = Reference {
            shape: TensorShape::new(1, 1, 1).unwrap(),
            values: vec![0.0],
            magnitudes: vec![0.0],
        };
        assert_eq!(max_normalized_error(&[0.0], &r), 0.0);
        assert!(max_normalized_error(&[1e-30], &r).is_infinite());
    }
}
