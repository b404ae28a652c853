// SPDX-License-Identifier: Apache-2.0

//! The multi-mode convolution kernel.
//!
//! Each CU accumulates one output neuron at a time: every cycle it reads a
//! vectorized feature bundle and weight bundle, reduces their lane products
//! through a fixed binary tree, adds the oldest entry of an `N`-deep shift
//! register and shifts the sum in at lane 0. After `CN` bundles the register
//! lanes are summed in ascending order. Convolution (`CN = K*K*C'`) and FC
//! (`CN = C'`) share the same datapath.

use crate::error::{Error, Result};
use crate::model::{AcceleratorConfig, FeatureMap, LayerDescriptor, TensorShape, WeightBank};
use crate::movers::{launches, Launch, MemRd, MemWr, TrafficCounters};

/// One cycle's worth of operands for a CU.
#[derive(Debug, Clone, Copy)]
pub struct MacBundle<'a> {
    pub features: &'a [f32],
    pub weights: &'a [f32],
}

impl<'a> MacBundle<'a> {
    pub fn new(features: &'a [f32], weights: &'a [f32]) -> Self {
        debug_assert_eq!(features.len(), weights.len());
        Self { features, weights }
    }
}

/// The delayed buffer `Reg[N]`. Stored as a ring so a shift is an index move.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftRegister {
    buf: Vec<f32>,
    head: usize,
}

impl ShiftRegister {
    pub fn new(depth: usize) -> Self {
        assert!(depth >= 1, "shift register needs at least one stage");
        Self {
            buf: vec![0.0; depth],
            head: 0,
        }
    }

    pub fn from_lanes(lanes: &[f32]) -> Self {
        assert!(!lanes.is_empty());
        Self {
            buf: lanes.to_vec(),
            head: 0,
        }
    }

    pub fn depth(&self) -> usize {
        self.buf.len()
    }

    pub fn reset(&mut self) {
        self.buf.iter_mut().for_each(|v| *v = 0.0);
        self.head = 0;
    }

    /// Lane `n`; lane 0 is the most recent sum.
    #[inline]
    pub fn lane(&self, n: usize) -> f32 {
        self.buf[(self.head + n) % self.buf.len()]
    }

    pub fn lanes(&self) -> Vec<f32> {
        (0..self.depth()).map(|n| self.lane(n)).collect()
    }

    #[inline]
    fn oldest(&self) -> f32 {
        self.lane(self.buf.len() - 1)
    }

    /// `Reg[n] = Reg[n-1]`, `Reg[0] = value`.
    #[inline]
    fn shift_in(&mut self, value: f32) {
        let n = self.buf.len();
        self.head = (self.head + n - 1) % n;
        self.buf[self.head] = value;
    }
}

/// Lane products reduced pairwise, adjacent lanes first.
#[inline]
pub fn tree_dot(features: &[f32], weights: &[f32]) -> f32 {
    let n = features.len();
    let mut acc = [0.0f32; 16];
    if n > 16 || !n.is_power_of_two() {
        // Only reachable from hand-built bundles; configs restrict VEC_SIZE.
        return tree_reduce(features.iter().zip(weights).map(|(a, b)| a * b).collect());
    }
    for i in 0..n {
        acc[i] = features[i] * weights[i];
    }
    let mut width = n;
    while width > 1 {
        width /= 2;
        for i in 0..width {
            acc[i] = acc[2 * i] + acc[2 * i + 1];
        }
    }
    acc[0]
}

fn tree_reduce(mut v: Vec<f32>) -> f32 {
    if v.is_empty() {
        return 0.0;
    }
    while v.len() > 1 {
        v = v
            .chunks(2)
            .map(|c| if c.len() == 2 { c[0] + c[1] } else { c[0] })
            .collect();
    }
    v[0]
}

/// `Temp = W(j) . D(j) + Reg[N-1]`, shift, `Reg[0] = Temp`.
#[inline]
pub fn mac_accumulate(reg: &mut ShiftRegister, bundle: MacBundle<'_>) {
    let t = tree_dot(bundle.features, bundle.weights) + reg.oldest();
    reg.shift_in(t);
}

/// `D_o = sum Reg[n]`, ascending lane order.
pub fn reduce_shift_register(reg: &ShiftRegister) -> f32 {
    (0..reg.depth()).fold(0.0, |acc, n| acc + reg.lane(n))
}

/// Accumulates one output neuron from `CN` bundles laid out contiguously.
#[inline]
pub fn conv_neuron(features: &[f32], weights: &[f32], vec_size: usize, reg: &mut ShiftRegister) -> f32 {
    reg.reset();
    for (f, w) in features.chunks_exact(vec_size).zip(weights.chunks_exact(vec_size)) {
        mac_accumulate(reg, MacBundle::new(f, w));
    }
    reduce_shift_register(reg)
}

/// Bias and optional ReLU after accumulation.
#[inline]
pub fn finish_neuron(acc: f32, bias: f32, relu: bool) -> f32 {
    let v = acc + bias;
    if relu && v < 0.0 {
        0.0
    } else {
        v
    }
}

/// Pure stream form of one CU: consumes `cn` bundles per neuron from each
/// stream and emits the shift-register reduction of every neuron.
pub fn conv_pipeline<'a, F, W>(features: F, weights: W, cn: usize, cfg: &AcceleratorConfig) -> Result<Vec<f32>>
where
    F: IntoIterator<Item = &'a [f32]>,
    W: IntoIterator<Item = &'a [f32]>,
{
    if cn == 0 {
        return Err(Error::InvalidConfig("CN must be at least 1".into()));
    }
    let mut reg = ShiftRegister::new(cfg.reg_depth);
    let mut features = features.into_iter();
    let mut weights = weights.into_iter();
    let mut out = Vec::new();
    'neurons: loop {
        reg.reset();
        for j in 0..cn {
            let (f, w) = match (features.next(), weights.next()) {
                (Some(f), Some(w)) => (f, w),
                (None, None) if j == 0 => break 'neurons,
                _ => {
                    return Err(Error::StreamUnderrun(format!(
                        "stream ended after {j} of {cn} bundles of neuron {}",
                        out.len()
                    )))
                }
            };
            if f.len() != w.len() {
                return Err(Error::PlanMismatch(format!(
                    "bundle lane counts differ: {} features vs {} weights",
                    f.len(),
                    w.len()
                )));
            }
            mac_accumulate(&mut reg, MacBundle::new(f, w));
        }
        out.push(reduce_shift_register(&reg));
    }
    Ok(out)
}

/// Runs one launch sequentially: MemRD work-groups straight into the CU
/// datapaths and out through MemWR, without channels.
pub(crate) fn run_launch_sequential(
    launch: &Launch,
    input: &FeatureMap,
    weights: &WeightBank,
    bias: &[f32],
    cfg: &AcceleratorConfig,
    output: FeatureMap,
) -> Result<(FeatureMap, TrafficCounters)> {
    if launch.store_width != launch.out_width || launch.store_height != launch.out_height {
        return Err(Error::PlanMismatch("sequential launches do not pool".into()));
    }
    let mut rd = MemRd::new(launch, input, weights, bias, cfg)?;
    let mut wr = MemWr::new(launch, output)?;
    let mut reg = ShiftRegister::new(cfg.reg_depth);
    let mut lanes = vec![0.0f32; launch.cu_num];
    for wg in rd.by_ref() {
        for (cu, packet) in wg.weights.iter().enumerate() {
            lanes[cu] = match packet {
                Some(p) => finish_neuron(
                    conv_neuron(&wg.features, &p.weights, launch.vec_size, &mut reg),
                    p.bias,
                    launch.relu,
                ),
                None => 0.0,
            };
        }
        wr.accept(&lanes)?;
    }
    let mut counters = rd.counters();
    let (out, wc) = wr.finish()?;
    counters.add(&wc);
    Ok((out, counters))
}

fn conv_only(layer: &LayerDescriptor) -> LayerDescriptor {
    LayerDescriptor {
        pool: None,
        lrn: None,
        ..layer.clone()
    }
}

/// Full convolution layer: the 3-D multiply-accumulate plus bias and optional ReLU. Any pooling or
/// LRN attachment is ignored here; the pipeline runtime applies them.
pub fn run_conv_layer(
    layer: &LayerDescriptor,
    input: &FeatureMap,
    weights: &WeightBank,
    bias: &[f32],
    cfg: &AcceleratorConfig,
) -> Result<(FeatureMap, TrafficCounters)> {
    cfg.check()?;
    if layer.is_fc() {
        return Err(Error::InvalidLayer("run_conv_layer needs a conv layer".into()));
    }
    let layer = conv_only(layer);
    let input = input.repacked(cfg.vec_size);
    let weights = weights.repacked(cfg.vec_size);
    let mut output = FeatureMap::zeros(layer.conv_output_shape()?, cfg.vec_size);
    let mut counters = TrafficCounters::default();
    for launch in launches(&layer, cfg, 1)? {
        let (out, c) = run_launch_sequential(&launch, &input, &weights, bias, cfg, output)?;
        output = out;
        counters.add(&c);
    }
    Ok((output, counters))
}

/// Flattens a feature map to a 1x1xC vector in `[H][W][C]` order.
pub fn flatten(input: &FeatureMap, vec_size: usize) -> FeatureMap {
    let s = input.shape();
    let shape = TensorShape {
        width: 1,
        height: 1,
        channels: s.len(),
    };
    FeatureMap::from_dense(shape, &input.to_dense(), vec_size).expect("length preserved")
}

/// Packs a batch of FC inputs into the `(bx, by, C)` data set MemRD reads.
pub fn batch_to_plane(inputs: &[FeatureMap], launch: &Launch) -> Result<FeatureMap> {
    let shape = launch.input_shape;
    if inputs.len() > shape.width * shape.height {
        return Err(Error::PlanMismatch(format!(
            "{} images do not fit a {}x{} batch plane",
            inputs.len(),
            shape.width,
            shape.height
        )));
    }
    let mut dense = vec![0.0f32; shape.len()];
    for (i, img) in inputs.iter().enumerate() {
        if img.shape().len() != shape.channels {
            return Err(Error::ShapeMismatch {
                layer: 0,
                reason: format!(
                    "fc input {} has {} elements, layer expects {}",
                    img.shape(),
                    img.shape().len(),
                    shape.channels
                ),
            });
        }
        dense[i * shape.channels..(i + 1) * shape.channels].copy_from_slice(&img.to_dense());
    }
    FeatureMap::from_dense(shape, &dense, launch.vec_size)
}

/// Splits a `(bx, by, M)` FC result back into per-image `1x1xM` maps.
pub fn plane_to_batch(plane: &FeatureMap, count: usize) -> Vec<FeatureMap> {
    let m = plane.shape().channels;
    let dense = plane.to_dense();
    let shape = TensorShape {
        width: 1,
        height: 1,
        channels: m,
    };
    (0..count)
        .map(|i| {
            FeatureMap::from_dense(shape, &dense[i * m..(i + 1) * m], plane.vec_size())
                .expect("slice matches shape")
        })
        .collect()
}

/// Batched FC layer: weights are fetched once for the whole batch.
pub fn run_fc_batch(
    layer: &LayerDescriptor,
    inputs: &[FeatureMap],
    weights: &WeightBank,
    bias: &[f32],
    cfg: &AcceleratorConfig,
) -> Result<(Vec<FeatureMap>, TrafficCounters)> {
    cfg.check()?;
    if !layer.is_fc() {
        return Err(Error::InvalidLayer("run_fc_batch needs an fc layer".into()));
    }
    if inputs.is_empty() {
        return Ok((Vec::new(), TrafficCounters::default()));
    }
    let ls = launches(layer, cfg, inputs.len())?;
    let launch = &ls[0];
    let plane = batch_to_plane(inputs, launch)?;
    let weights = weights.repacked(cfg.vec_size);
    let out = FeatureMap::zeros(
        TensorShape {
            width: launch.out_width,
            height: launch.out_height,
            channels: layer.output_maps,
        },
        cfg.vec_size,
    );
    let (plane_out, counters) = run_launch_sequential(launch, &plane, &weights, bias, cfg, out)?;
    Ok((plane_to_batch(&plane_out, inputs.len()), counters))
}

/// Single-image FC layer, `D_o(f_o) = sum W(f_o, f_i) D_i(f_i) + b(f_o)`.
pub fn run_fc_layer(
    layer: &LayerDescriptor,
    input: &FeatureMap,
    weights: &WeightBank,
    bias: &[f32],
    cfg: &AcceleratorConfig,
) -> Result<FeatureMap> {
    let (mut out, _) = run_fc_batch(layer, std::slice::from_ref(input), weights, bias, cfg)?;
    Ok(out.remove(0))
}
