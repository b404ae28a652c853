// SPDX-License-Identifier: Apache-2.0

//! Cross-channel LRN with a piecewise-linear exponent function.
//!
//! The table approximates `g(x) = (k + alpha * x)^(-beta)` where `x` is the
//! sum of squares over the channel neighbourhood. Segments follow the
//! floating-point grid: each octave `[2^e, 2^(e+1))` is cut into `2^n` equal
//! pieces, so the segment of `x` is its bit pattern shifted right by
//! `23 - n` minus a fixed offset. No search or comparator tree is needed.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FeatureMap, LrnSpec};

/// Default table input range.
pub const DEFAULT_X_MIN: f32 = 1.0 / 65536.0;
pub const DEFAULT_X_MAX: f32 = 65536.0;

const MANTISSA_BITS: u32 = 23;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub slope: f32,
    pub intercept: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwlTable {
    pub n: u32,
    pub shift_bit: u32,
    /// Shifted bit pattern of the first segment's lower boundary.
    pub offset: u32,
    pub x_min: f32,
    pub x_max: f32,
    pub k: f32,
    pub alpha: f32,
    pub beta: f32,
    pub segments: Vec<Segment>,
}

fn exact_g(k: f64, alpha: f64, beta: f64, x: f64) -> f64 {
    (k + alpha * x).powf(-beta)
}

/// Builds the table over `[x_min, x_max]` with `2^n` segments per octave.
pub fn lrn_build_table(n: u32, k: f32, alpha: f32, beta: f32, x_min: f32, x_max: f32) -> Result<PwlTable> {
    if n > MANTISSA_BITS {
        return Err(Error::InvalidRange(format!("n = {n} exceeds the mantissa width")));
    }
    if !(x_min > 0.0) || !x_min.is_finite() || !x_max.is_finite() || !(x_max > x_min) {
        return Err(Error::InvalidRange(format!("[{x_min}, {x_max}]")));
    }
    if !(k > 0.0) || !k.is_finite() || !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::InvalidRange(format!(
            "constants k = {k}, alpha = {alpha}, beta = {beta}"
        )));
    }
    let shift_bit = MANTISSA_BITS - n;
    let lo = x_min.to_bits() >> shift_bit;
    let hi_bits = x_max.to_bits();
    let mut hi = hi_bits >> shift_bit;
    if hi_bits & ((1 << shift_bit) - 1) != 0 {
        hi += 1;
    }
    let (kf, af, bf) = (k as f64, alpha as f64, beta as f64);
    let segments = (lo..hi)
        .map(|key| {
            let x0 = f32::from_bits(key << shift_bit) as f64;
            let x1 = f32::from_bits((key + 1) << shift_bit) as f64;
            let g0 = exact_g(kf, af, bf, x0);
            let g1 = exact_g(kf, af, bf, x1);
            let slope = (g1 - g0) / (x1 - x0);
            Segment {
                slope: slope as f32,
                intercept: (g0 - slope * x0) as f32,
            }
        })
        .collect();
    Ok(PwlTable {
        n,
        shift_bit,
        offset: lo,
        x_min,
        x_max,
        k,
        alpha,
        beta,
        segments,
    })
}

impl PwlTable {
    pub fn for_lrn(n: u32, lrn: &LrnSpec) -> Result<Self> {
        lrn_build_table(n, lrn.k, lrn.alpha, lrn.beta, DEFAULT_X_MIN, DEFAULT_X_MAX)
    }

    /// Segment index of an in-range `x`, straight from its bit pattern.
    #[inline]
    pub fn address(&self, x: f32) -> usize {
        let addr = ((x.to_bits() >> self.shift_bit) - self.offset) as usize;
        addr.min(self.segments.len() - 1)
    }

    /// Lower boundary of segment `i` (`i == len` gives the last upper boundary).
    pub fn boundary(&self, i: usize) -> f32 {
        f32::from_bits((self.offset + i as u32) << self.shift_bit)
    }

    #[inline]
    pub fn clamp(&self, x: f32) -> f32 {
        if x >= self.x_min {
            x.min(self.x_max)
        } else {
            self.x_min
        }
    }

    /// Exact value of the approximated function, for error measurements.
    pub fn exact(&self, x: f32) -> f64 {
        exact_g(self.k as f64, self.alpha as f64, self.beta as f64, x as f64)
    }

    /// Maximum relative error over `samples` log-spaced points in range.
    pub fn max_relative_error(&self, samples: usize) -> f64 {
        let (lo, hi) = ((self.x_min as f64).ln(), (self.x_max as f64).ln());
        (0..samples)
            .map(|i| {
                let t = i as f64 / (samples.max(2) - 1) as f64;
                let x = (lo + t * (hi - lo)).exp() as f32;
                let x = self.clamp(x);
                let exact = self.exact(x);
                ((pwlf_eval(self, x) as f64 - exact) / exact).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Flat text dump: a header line, then one `x0 x1 slope intercept` line
    /// per segment.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "pwl n={} shift_bit={} offset={} x_min={} x_max={} k={} alpha={} beta={} segments={}",
            self.n,
            self.shift_bit,
            self.offset,
            self.x_min,
            self.x_max,
            self.k,
            self.alpha,
            self.beta,
            self.segments.len()
        )
        .unwrap();
        for (i, seg) in self.segments.iter().enumerate() {
            writeln!(
                s,
                "{} {} {} {}",
                self.boundary(i),
                self.boundary(i + 1),
                seg.slope,
                seg.intercept
            )
            .unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Parse {
            line,
            column: 1,
            message: msg.to_string(),
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "empty table"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("pwl") {
            return Err(bad(1, "missing 'pwl' header"));
        }
        let mut get = |name: &str| -> Result<String> {
            let f = fields.next().ok_or_else(|| bad(1, &format!("missing {name}")))?;
            f.strip_prefix(&format!("{name}="))
                .map(str::to_string)
                .ok_or_else(|| bad(1, &format!("expected {name}=")))
        };
        fn num<T: std::str::FromStr>(s: String, line: usize) -> Result<T> {
            s.parse().map_err(|_| Error::Parse {
                line,
                column: 1,
                message: format!("bad number {s:?}"),
            })
        }
        let n: u32 = num(get("n")?, 1)?;
        let shift_bit: u32 = num(get("shift_bit")?, 1)?;
        let offset: u32 = num(get("offset")?, 1)?;
        let x_min: f32 = num(get("x_min")?, 1)?;
        let x_max: f32 = num(get("x_max")?, 1)?;
        let k: f32 = num(get("k")?, 1)?;
        let alpha: f32 = num(get("alpha")?, 1)?;
        let beta: f32 = num(get("beta")?, 1)?;
        let count: usize = num(get("segments")?, 1)?;
        let mut segments = Vec::with_capacity(count);
        for (i, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 4 {
                return Err(bad(i + 2, "expected 4 columns"));
            }
            segments.push(Segment {
                slope: num(cols[2].to_string(), i + 2)?,
                intercept: num(cols[3].to_string(), i + 2)?,
            });
        }
        if segments.len() != count {
            return Err(bad(count + 2, "segment count does not match header"));
        }
        Ok(Self {
            n,
            shift_bit,
            offset,
            x_min,
            x_max,
            k,
            alpha,
            beta,
            segments,
        })
    }
}

/// Piecewise-linear evaluation; inputs outside the range are clamped.
#[inline]
pub fn pwlf_eval(table: &PwlTable, x: f32) -> f32 {
    let x = table.clamp(x);
    let seg = table.segments[table.address(x)];
    seg.slope * x + seg.intercept
}

/// Maps a neighbourhood sum of squares to the LRN scale factor.
pub trait Normalizer: Sync {
    fn scale(&self, sum_of_squares: f32) -> f32;
}

impl Normalizer for PwlTable {
    fn scale(&self, sum_of_squares: f32) -> f32 {
        pwlf_eval(self, sum_of_squares)
    }
}

/// `(k + alpha * x)^(-beta)` evaluated directly.
#[derive(Debug, Clone, Copy)]
pub struct ExactNormalizer(pub LrnSpec);

impl Normalizer for ExactNormalizer {
    fn scale(&self, x: f32) -> f32 {
        exact_g(self.0.k as f64, self.0.alpha as f64, self.0.beta as f64, x as f64) as f32
    }
}

const TILE_ROWS: usize = 4;

fn lrn_tile(input: &FeatureMap, rows: std::ops::Range<usize>, local_size: usize, norm: &dyn Normalizer) -> Vec<f32> {
    let shape = input.shape();
    let c = shape.channels;
    let stride = input.blocks() * input.vec_size();
    let half = local_size / 2;

    // Load FIN into local memory.
    let start = input.offset(rows.start, 0, 0);
    let end = start + rows.len() * shape.width * stride;
    let fin = input.data()[start..end].to_vec();
    // barrier: FIN is complete before any neighbourhood access.

    let mut fout = vec![0.0f32; fin.len()];
    for (pixel_in, pixel_out) in fin.chunks_exact(stride).zip(fout.chunks_exact_mut(stride)) {
        for f in 0..c {
            let lo = f.saturating_sub(half);
            let hi = (f + half).min(c - 1);
            let mut sum = 0.0f32;
            for v in &pixel_in[lo..=hi] {
                sum += v * v;
            }
            pixel_out[f] = pixel_in[f] * norm.scale(sum);
        }
    }
    // barrier: FOUT is complete before it is stored back.
    fout
}

/// Cross-channel LRN over a whole tensor, tile by tile. `workers > 1` spreads
/// tiles across threads; the result does not depend on the worker count.
pub fn lrn_apply(input: &FeatureMap, params: &LrnSpec, norm: &dyn Normalizer, workers: usize) -> Result<FeatureMap> {
    if params.local_size == 0 {
        return Err(Error::InvalidLayer("LRN local_size must be at least 1".into()));
    }
    let shape = input.shape();
    let tiles: Vec<std::ops::Range<usize>> = (0..shape.height)
        .step_by(TILE_ROWS)
        .map(|r| r..(r + TILE_ROWS).min(shape.height))
        .collect();
    let results: Vec<Vec<f32>> = if workers <= 1 || tiles.len() == 1 {
        tiles
            .iter()
            .map(|t| lrn_tile(input, t.clone(), params.local_size, norm))
            .collect()
    } else {
        let per = tiles.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = tiles
                .chunks(per)
                .map(|chunk| {
                    s.spawn(move || {
                        chunk
                            .iter()
                            .map(|t| lrn_tile(input, t.clone(), params.local_size, norm))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("LRN worker panicked"))
                .collect()
        })
    };
    let dense: Vec<f32> = results
        .iter()
        .flat_map(|tile| tile.chunks_exact(input.blocks() * input.vec_size()))
        .flat_map(|px| px[..shape.channels].iter().copied())
        .collect();
    FeatureMap::from_dense(shape, &dense, input.vec_size())
}
