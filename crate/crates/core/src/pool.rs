// SPDX-License-Identifier: Apache-2.0

//! Line-buffer pooling kernel.
//!
//! Pixels arrive row by row. `L` line buffers keep the previous rows of every
//! column; each arriving pixel completes one `(L+1)`-tall column that shifts
//! into an `(L+1) x (L+1)` window register. Windows are reduced once the
//! buffers have filled and the window origin lands on the stride grid.
//! Every pixel carries one value per lane (one lane per CU).

use crate::error::{Error, Result};
use crate::model::{PoolMode, PoolSpec};

#[derive(Debug, Clone)]
pub struct LineBufferBank {
    spec: PoolSpec,
    lanes: usize,
    row_length: usize,
    /// `[L][row_length][lanes]`; buffer 0 holds the oldest row.
    buffers: Vec<f32>,
    /// `[L+1 columns][L+1 rows][lanes]`, oldest column first.
    window: Vec<f32>,
    y: usize,
    x: usize,
}

impl LineBufferBank {
    pub fn new(spec: PoolSpec, row_length: usize, lanes: usize) -> Self {
        let l = spec.line_buffers();
        Self {
            spec,
            lanes,
            row_length,
            buffers: vec![0.0; l * row_length * lanes],
            window: vec![0.0; spec.window * spec.window * lanes],
            y: 0,
            x: 0,
        }
    }

    pub fn line_buffers(&self) -> usize {
        self.spec.line_buffers()
    }

    /// Elements held on chip: line buffers plus the window register.
    pub fn capacity_elements(&self) -> usize {
        self.buffers.len() + self.window.len()
    }

    /// True once all `L` line buffers hold a full row.
    pub fn filled(&self) -> bool {
        self.y >= self.line_buffers()
    }

    /// Starts a new feature map.
    pub fn reset(&mut self) {
        self.y = 0;
        self.x = 0;
    }

    /// Feeds one pixel. Appends `lanes` pooled values to `out` and returns
    /// true when a window completes.
    pub fn push(&mut self, pixel: &[f32], out: &mut Vec<f32>) -> bool {
        debug_assert_eq!(pixel.len(), self.lanes);
        let l = self.line_buffers();
        let w = self.spec.window;
        let lanes = self.lanes;
        let x = self.x;

        // Shift the window left by one column.
        let col = w * lanes;
        self.window.copy_within(col.., 0);
        let newest = (w - 1) * col;
        for r in 0..l {
            let src = (r * self.row_length + x) * lanes;
            self.window[newest + r * lanes..newest + (r + 1) * lanes]
                .copy_from_slice(&self.buffers[src..src + lanes]);
        }
        self.window[newest + l * lanes..newest + w * lanes].copy_from_slice(pixel);

        // Shift column x of the line buffers up by one row.
        for r in 0..l {
            let dst = (r * self.row_length + x) * lanes;
            if r + 1 < l {
                let src = ((r + 1) * self.row_length + x) * lanes;
                self.buffers.copy_within(src..src + lanes, dst);
            } else {
                self.buffers[dst..dst + lanes].copy_from_slice(pixel);
            }
        }

        let s = self.spec.stride;
        let emit = self.y >= l && x >= l && (self.y - l).is_multiple_of(s) && (x - l).is_multiple_of(s);
        if emit {
            self.reduce(out);
        }

        self.x += 1;
        if self.x == self.row_length {
            self.x = 0;
            self.y += 1;
        }
        emit
    }

    /// Window values in row-major order (top row first, left to right).
    fn reduce(&self, out: &mut Vec<f32>) {
        let w = self.spec.window;
        let lanes = self.lanes;
        for lane in 0..lanes {
            let at = |r: usize, c: usize| self.window[(c * w + r) * lanes + lane];
            let v = match self.spec.mode {
                PoolMode::Max => {
                    let mut m = at(0, 0);
                    for r in 0..w {
                        for c in 0..w {
                            let v = at(r, c);
                            if v > m {
                                m = v;
                            }
                        }
                    }
                    m
                }
                PoolMode::Avg => {
                    let mut sum = 0.0f32;
                    for r in 0..w {
                        for c in 0..w {
                            sum += at(r, c);
                        }
                    }
                    sum / (w * w) as f32
                }
            };
            out.push(v);
        }
    }
}

/// Pools a complete row-major stream of `width x height` pixels with `lanes`
/// values each. `None` bypasses the kernel.
pub fn pool_stream<I, P>(
    input: I,
    width: usize,
    height: usize,
    lanes: usize,
    spec: Option<PoolSpec>,
) -> Result<Vec<Vec<f32>>>
where
    I: IntoIterator<Item = P>,
    P: AsRef<[f32]>,
{
    let Some(spec) = spec else {
        return Ok(input.into_iter().map(|p| p.as_ref().to_vec()).collect());
    };
    if spec.window < 2 || spec.stride == 0 || spec.window > width || spec.window > height {
        return Err(Error::InvalidLayer(format!(
            "pool window {} / stride {} does not fit a {width}x{height} map",
            spec.window, spec.stride
        )));
    }
    let mut bank = LineBufferBank::new(spec, width, lanes);
    let mut out = Vec::new();
    let mut scratch = Vec::with_capacity(lanes);
    let mut received = 0;
    for px in input {
        let px = px.as_ref();
        if px.len() != lanes {
            return Err(Error::PlanMismatch(format!(
                "pixel has {} lanes, expected {lanes}",
                px.len()
            )));
        }
        if received == width * height {
            return Err(Error::StreamOverrun(format!(
                "pooling expected {} pixels",
                width * height
            )));
        }
        scratch.clear();
        if bank.push(px, &mut scratch) {
            out.push(scratch.clone());
        }
        received += 1;
    }
    if received != width * height {
        return Err(Error::IncompleteRow {
            received,
            expected: width * height,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(mode: PoolMode, window: usize, stride: usize) -> Option<PoolSpec> {
        Some(PoolSpec {
            mode,
            window,
            stride,
        })
    }

    fn grid() -> Vec<[f32; 1]> {
        (1..=9).map(|v| [v as f32]).collect()
    }

    #[test]
    fn three_by_three_max_and_avg() {
        let max = pool_stream(grid(), 3, 3, 1, spec(PoolMode::Max, 3, 1)).unwrap();
        assert_eq!(max, vec![vec![9.0]]);
        let avg = pool_stream(grid(), 3, 3, 1, spec(PoolMode::Avg, 3, 1)).unwrap();
        assert_eq!(avg, vec![vec![5.0]]);
    }

    #[test]
    fn bypass_forwards_everything() {
        let out = pool_stream(grid(), 3, 3, 1, None).unwrap();
        assert_eq!(out.len(), 9);
        assert_eq!(out[4], vec![5.0]);
    }

    #[test]
    fn stride_two_window_two() {
        // 4x4 ramp, 2x2/2 max pooling keeps each quad's bottom-right.
        let input: Vec<[f32; 1]> = (0..16).map(|v| [v as f32]).collect();
        let out = pool_stream(input, 4, 4, 1, spec(PoolMode::Max, 2, 2)).unwrap();
        assert_eq!(out, vec![vec![5.0], vec![7.0], vec![13.0], vec![15.0]]);
    }

    #[test]
    fn lanes_are_independent() {
        let input: Vec<[f32; 2]> = (0..9).map(|v| [v as f32, -(v as f32)]).collect();
        let out = pool_stream(input, 3, 3, 2, spec(PoolMode::Max, 3, 1)).unwrap();
        assert_eq!(out, vec![vec![8.0, 0.0]]);
    }

    #[test]
    fn truncated_stream_is_rejected() {
        let mut input = grid();
        input.pop();
        let err = pool_stream(input, 3, 3, 1, spec(PoolMode::Max, 2, 1)).unwrap_err();
        assert_eq!(
            err,
            Error::IncompleteRow {
                received: 8,
                expected: 9
            }
        );
    }

    #[test]
    fn emission_waits_for_full_buffers() {
        let mut bank = LineBufferBank::new(PoolSpec { mode: PoolMode::Max, window: 3, stride: 1 }, 4, 1);
        let mut out = Vec::new();
        for i in 0..8 {
            assert!(!bank.push(&[i as f32], &mut out));
        }
        assert!(bank.filled());
        assert!(!bank.push(&[0.0], &mut out));
        assert!(!bank.push(&[0.0], &mut out));
        assert!(bank.push(&[0.0], &mut out));
    }
}
