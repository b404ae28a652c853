// SPDX-License-Identifier: Apache-2.0

//! Domain types shared by every kernel: tensor shapes, the channel-blocked
//! feature/weight layouts, layer descriptors and the accelerator/device
//! parameter sets.
//!
//! Feature maps are stored as `[H][W][C'][VEC]` where `C' = ceil(C / VEC)`.
//! Lanes past `C` in the last block are always zero, so they add nothing to
//! any multiply-accumulate.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "C")]
    pub channels: usize,
}

impl TensorShape {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        let shape = Self {
            width,
            height,
            channels,
        };
        shape.check()?;
        Ok(shape)
    }

    pub fn check(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.channels == 0 {
            return Err(Error::InvalidLayer(format!(
                "tensor shape {}x{}x{} has a zero dimension",
                self.width, self.height, self.channels
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for TensorShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.channels)
    }
}

/// `(W - K + 2P) / S + 1`, rejecting strides that do not tile the padded
/// input exactly.
pub fn output_dim(width: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let err = Error::NonIntegralOutputDim {
        width,
        kernel,
        stride,
        pad,
    };
    if stride == 0 || width + 2 * pad < kernel {
        return Err(err);
    }
    let span = width + 2 * pad - kernel;
    if !span.is_multiple_of(stride) {
        return Err(err);
    }
    Ok(span / stride + 1)
}

/// Number of `vec_size`-lane blocks needed to hold `channels` channels.
pub fn c_prime(channels: usize, vec_size: usize) -> usize {
    channels.div_ceil(vec_size)
}

/// A 3-D activation tensor in channel-blocked layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    shape: TensorShape,
    vec_size: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(shape: TensorShape, vec_size: usize) -> Self {
        let len = shape.height * shape.width * c_prime(shape.channels, vec_size) * vec_size;
        Self {
            shape,
            vec_size,
            data: vec![0.0; len],
        }
    }

    /// Packs a dense `[H][W][C]` tensor.
    pub fn from_dense(shape: TensorShape, dense: &[f32], vec_size: usize) -> Result<Self> {
        shape.check()?;
        if dense.len() != shape.len() {
            return Err(Error::DimMismatch(format!(
                "dense tensor has {} elements, shape {} needs {}",
                dense.len(),
                shape,
                shape.len()
            )));
        }
        let mut map = Self::zeros(shape, vec_size);
        let c = shape.channels;
        for (pixel, values) in dense.chunks_exact(c).enumerate() {
            let base = pixel * map.blocks() * vec_size;
            map.data[base..base + c].copy_from_slice(values);
        }
        Ok(map)
    }

    /// Unpacks to a dense `[H][W][C]` tensor.
    pub fn to_dense(&self) -> Vec<f32> {
        let c = self.shape.channels;
        let stride = self.blocks() * self.vec_size;
        let mut out = Vec::with_capacity(self.shape.len());
        for pixel in self.data.chunks_exact(stride) {
            out.extend_from_slice(&pixel[..c]);
        }
        out
    }

    /// Repacks with a different lane count.
    pub fn with_vec_size(&self, vec_size: usize) -> Self {
        if vec_size == self.vec_size {
            return self.clone();
        }
        Self::from_dense(self.shape, &self.to_dense(), vec_size).expect("shape is already valid")
    }

    /// Borrows when the lane count already matches.
    pub fn repacked(&self, vec_size: usize) -> Cow<'_, Self> {
        if vec_size == self.vec_size {
            Cow::Borrowed(self)
        } else {
            Cow::Owned(self.with_vec_size(vec_size))
        }
    }

    pub fn shape(&self) -> TensorShape {
        self.shape
    }

    pub fn vec_size(&self) -> usize {
        self.vec_size
    }

    pub fn blocks(&self) -> usize {
        c_prime(self.shape.channels, self.vec_size)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Offset of the first lane of block `block` at pixel `(y, x)`.
    #[inline]
    pub fn offset(&self, y: usize, x: usize, block: usize) -> usize {
        ((y * self.shape.width + x) * self.blocks() + block) * self.vec_size
    }

    /// All blocks of one pixel.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let start = self.offset(y, x, 0);
        &self.data[start..start + self.blocks() * self.vec_size]
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.offset(y, x, 0) + c]
    }

    /// Writes one channel value. Tail lanes are not addressable.
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f32) {
        assert!(c < self.shape.channels, "channel {c} out of range");
        let off = self.offset(y, x, 0) + c;
        self.data[off] = value;
    }

    /// True if every padding lane past `C` is exactly zero.
    pub fn tail_is_zero(&self) -> bool {
        let c = self.shape.channels;
        let stride = self.blocks() * self.vec_size;
        self.data
            .chunks_exact(stride)
            .all(|pixel| pixel[c..].iter().all(|v| v.to_bits() == 0))
    }
}

/// Convolution or FC weights in `[M][K][K][C'][VEC]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBank {
    output_maps: usize,
    kernel: usize,
    input_channels: usize,
    vec_size: usize,
    data: Vec<f32>,
}

impl WeightBank {
    pub fn zeros(output_maps: usize, kernel: usize, input_channels: usize, vec_size: usize) -> Self {
        let len =
            output_maps * kernel * kernel * c_prime(input_channels, vec_size) * vec_size;
        Self {
            output_maps,
            kernel,
            input_channels,
            vec_size,
            data: vec![0.0; len],
        }
    }

    /// Packs dense `[M][K][K][C]` weights.
    pub fn from_dense(
        output_maps: usize,
        kernel: usize,
        input_channels: usize,
        dense: &[f32],
        vec_size: usize,
    ) -> Result<Self> {
        let expected = output_maps * kernel * kernel * input_channels;
        if dense.len() != expected {
            return Err(Error::DimMismatch(format!(
                "dense weights have {} elements, expected {expected}",
                dense.len()
            )));
        }
        let mut bank = Self::zeros(output_maps, kernel, input_channels, vec_size);
        let row = bank.blocks() * vec_size;
        for (tap, values) in dense.chunks_exact(input_channels).enumerate() {
            bank.data[tap * row..tap * row + input_channels].copy_from_slice(values);
        }
        Ok(bank)
    }

    pub fn to_dense(&self) -> Vec<f32> {
        let row = self.blocks() * self.vec_size;
        let mut out = Vec::with_capacity(self.output_maps * self.kernel * self.kernel * self.input_channels);
        for tap in self.data.chunks_exact(row) {
            out.extend_from_slice(&tap[..self.input_channels]);
        }
        out
    }

    pub fn with_vec_size(&self, vec_size: usize) -> Self {
        if vec_size == self.vec_size {
            return self.clone();
        }
        Self::from_dense(
            self.output_maps,
            self.kernel,
            self.input_channels,
            &self.to_dense(),
            vec_size,
        )
        .expect("dims are already consistent")
    }

    /// Borrows when the lane count already matches.
    pub fn repacked(&self, vec_size: usize) -> Cow<'_, Self> {
        if vec_size == self.vec_size {
            Cow::Borrowed(self)
        } else {
            Cow::Owned(self.with_vec_size(vec_size))
        }
    }

    pub fn output_maps(&self) -> usize {
        self.output_maps
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn vec_size(&self) -> usize {
        self.vec_size
    }

    pub fn blocks(&self) -> usize {
        c_prime(self.input_channels, self.vec_size)
    }

    /// Floats per output map: `K * K * C' * VEC`.
    pub fn slab_len(&self) -> usize {
        self.kernel * self.kernel * self.blocks() * self.vec_size
    }

    /// All weights of output map `map`, in the order the data mover streams them.
    pub fn slab(&self, map: usize) -> &[f32] {
        let len = self.slab_len();
        &self.data[map * len..(map + 1) * len]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn size_bytes(&self) -> u64 {
        (self.data.len() * 4) as u64
    }

    pub fn tail_is_zero(&self) -> bool {
        let row = self.blocks() * self.vec_size;
        self.data
            .chunks_exact(row)
            .all(|tap| tap[self.input_channels..].iter().all(|v| v.to_bits() == 0))
    }
}

/// Weights and biases of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub weights: WeightBank,
    pub bias: Vec<f32>,
}

impl LayerWeights {
    /// Checks the bank against the layer's `M`, `K` and per-group channels.
    pub fn check(&self, layer: &LayerDescriptor, index: usize) -> Result<()> {
        let w = &self.weights;
        let k = if layer.is_fc() { 1 } else { layer.kernel };
        if w.output_maps() != layer.output_maps
            || w.kernel() != k
            || w.input_channels() != layer.group_channels()
            || self.bias.len() != layer.output_maps
        {
            return Err(Error::ShapeMismatch {
                layer: index,
                reason: format!(
                    "weights are {}x{}x{}x{} with {} biases, layer needs {}x{}x{}x{}",
                    w.output_maps(),
                    w.kernel(),
                    w.kernel(),
                    w.input_channels(),
                    self.bias.len(),
                    layer.output_maps,
                    k,
                    k,
                    layer.group_channels()
                ),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerType {
    Conv,
    Fc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

/// Pooling attached to the tail of a convolution layer. `window` is `L + 1`
/// for a bank of `L` line buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub mode: PoolMode,
    pub window: usize,
    pub stride: usize,
}

impl PoolSpec {
    pub fn line_buffers(&self) -> usize {
        self.window - 1
    }
}

/// Cross-channel local response normalization constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrnSpec {
    pub local_size: usize,
    pub k: f32,
    pub alpha: f32,
    pub beta: f32,
}

impl Default for LrnSpec {
    fn default() -> Self {
        Self {
            local_size: 5,
            k: 2.0,
            alpha: 1e-4,
            beta: 0.75,
        }
    }
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

/// One weighted layer plus its optional pooling and LRN attachments.
///
/// `groups` splits input channels and output maps into independent
/// convolutions, as AlexNet's second, fourth and fifth layers require.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDescriptor {
    pub layer_type: LayerType,
    #[serde(rename = "K")]
    pub kernel: usize,
    #[serde(rename = "S")]
    pub stride: usize,
    #[serde(rename = "P")]
    pub pad: usize,
    pub input_shape: TensorShape,
    #[serde(rename = "M")]
    pub output_maps: usize,
    pub relu: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PoolSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lrn: Option<LrnSpec>,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub groups: usize,
}

impl LayerDescriptor {
    pub fn conv(
        input_shape: TensorShape,
        output_maps: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self {
            layer_type: LayerType::Conv,
            kernel,
            stride,
            pad,
            input_shape,
            output_maps,
            relu: false,
            pool: None,
            lrn: None,
            groups: 1,
        }
    }

    pub fn fc(input_shape: TensorShape, output_maps: usize) -> Self {
        Self {
            layer_type: LayerType::Fc,
            kernel: 1,
            stride: 1,
            pad: 0,
            input_shape,
            output_maps,
            relu: false,
            pool: None,
            lrn: None,
            groups: 1,
        }
    }

    pub fn with_relu(mut self) -> Self {
        self.relu = true;
        self
    }

    pub fn with_pool(mut self, mode: PoolMode, window: usize, stride: usize) -> Self {
        self.pool = Some(PoolSpec {
            mode,
            window,
            stride,
        });
        self
    }

    pub fn with_lrn(mut self, lrn: LrnSpec) -> Self {
        self.lrn = Some(lrn);
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn is_fc(&self) -> bool {
        self.layer_type == LayerType::Fc
    }

    /// Input channels seen by one output map. FC layers flatten the whole
    /// input tensor.
    pub fn group_channels(&self) -> usize {
        match self.layer_type {
            LayerType::Conv => self.input_shape.channels / self.groups,
            LayerType::Fc => self.input_shape.len(),
        }
    }

    pub fn group_maps(&self) -> usize {
        self.output_maps / self.groups
    }

    /// Bundles per output neuron: `K*K*C'` for convolution, `C'` for FC.
    pub fn cn(&self, vec_size: usize) -> usize {
        self.kernel * self.kernel * c_prime(self.group_channels(), vec_size)
    }

    /// Shape produced by the convolution datapath, before pooling.
    pub fn conv_output_shape(&self) -> Result<TensorShape> {
        match self.layer_type {
            LayerType::Conv => Ok(TensorShape {
                width: output_dim(self.input_shape.width, self.kernel, self.stride, self.pad)?,
                height: output_dim(self.input_shape.height, self.kernel, self.stride, self.pad)?,
                channels: self.output_maps,
            }),
            LayerType::Fc => Ok(TensorShape {
                width: 1,
                height: 1,
                channels: self.output_maps,
            }),
        }
    }

    /// Shape written back to global memory, after optional pooling.
    pub fn output_shape(&self) -> Result<TensorShape> {
        let conv = self.conv_output_shape()?;
        match self.pool {
            None => Ok(conv),
            Some(p) => Ok(TensorShape {
                width: output_dim(conv.width, p.window, p.stride, 0)?,
                height: output_dim(conv.height, p.window, p.stride, 0)?,
                channels: conv.channels,
            }),
        }
    }

    /// Multiply and add counted separately: `2 * Wo * Ho * M * K * K * C_group`.
    pub fn ops(&self) -> u64 {
        let out = self.conv_output_shape().expect("validated layer");
        2 * (out.width * out.height * self.output_maps) as u64
            * (self.kernel * self.kernel * self.group_channels()) as u64
    }

    /// Checks the invariants a single layer must satisfy on its own.
    pub fn check(&self) -> Result<()> {
        self.input_shape.check()?;
        if self.output_maps == 0 {
            return Err(Error::InvalidLayer("M must be at least 1".into()));
        }
        if self.groups == 0
            || !self.input_shape.channels.is_multiple_of(self.groups)
            || !self.output_maps.is_multiple_of(self.groups)
        {
            return Err(Error::InvalidLayer(format!(
                "groups = {} must divide C = {} and M = {}",
                self.groups, self.input_shape.channels, self.output_maps
            )));
        }
        match self.layer_type {
            LayerType::Conv => {
                if self.kernel == 0 || self.stride == 0 {
                    return Err(Error::InvalidLayer("K and S must be at least 1".into()));
                }
            }
            LayerType::Fc => {
                if self.kernel != 1 || self.stride != 1 || self.pad != 0 {
                    return Err(Error::InvalidLayer(
                        "fc layers require K = 1, S = 1, P = 0".into(),
                    ));
                }
                if self.groups != 1 {
                    return Err(Error::InvalidLayer("fc layers cannot be grouped".into()));
                }
                if self.pool.is_some() || self.lrn.is_some() {
                    return Err(Error::InvalidLayer(
                        "fc layers take no pooling or LRN attachment".into(),
                    ));
                }
            }
        }
        if let Some(p) = self.pool {
            if p.window < 2 || p.stride == 0 {
                return Err(Error::InvalidLayer(format!(
                    "pool window {} / stride {} invalid",
                    p.window, p.stride
                )));
            }
        }
        if let Some(l) = self.lrn {
            if l.local_size == 0 || !(l.k > 0.0) || !(l.beta >= 0.0) || !(l.alpha >= 0.0) {
                return Err(Error::InvalidLayer(format!("LRN constants invalid: {l:?}")));
            }
        }
        self.output_shape()?;
        Ok(())
    }
}

/// Checks every layer and the shape hand-off between consecutive layers.
pub fn validate_network(layers: &[LayerDescriptor]) -> std::result::Result<(), Vec<Error>> {
    let mut errors = Vec::new();
    if layers.is_empty() {
        errors.push(Error::InvalidLayer("network has no layers".into()));
        return Err(errors);
    }
    let mut previous: Option<TensorShape> = None;
    let mut seen_fc = false;
    for (i, layer) in layers.iter().enumerate() {
        match layer.check() {
            Ok(()) => {}
            Err(Error::NonIntegralOutputDim { .. }) => {
                errors.push(Error::LayerOutputDim { layer: i });
            }
            Err(e) => errors.push(Error::ShapeMismatch {
                layer: i,
                reason: e.to_string(),
            }),
        }
        if let Some(prev) = previous {
            if prev != layer.input_shape {
                errors.push(Error::ShapeMismatch {
                    layer: i,
                    reason: format!(
                        "input shape {} does not match previous output {}",
                        layer.input_shape, prev
                    ),
                });
            }
        }
        if layer.is_fc() {
            seen_fc = true;
        } else if seen_fc {
            errors.push(Error::ShapeMismatch {
                layer: i,
                reason: "convolution layer after a fully connected layer".into(),
            });
        }
        previous = layer.output_shape().ok();
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

/// Design-space point: datapath widths, buffer depths and clocking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcceleratorConfig {
    pub vec_size: usize,
    pub cu_num: usize,
    /// Shift-register (delayed buffer) depth `N`.
    pub reg_depth: usize,
    /// FIFO capacity of every inter-kernel channel, in elements.
    pub channel_depth: usize,
    pub clock_hz: f64,
    /// Initiation interval of the convolution pipeline, in cycles.
    pub ii: u64,
    /// LRN table segmentation exponent `n`: `2^n` segments per octave.
    pub lrn_n: u32,
    /// Fixed pipeline fill/drain cost per kernel launch, on top of `reg_depth`.
    pub drain_cycles: u64,
    /// Weight cache capacity in per-map slabs; `None` models an unbounded cache.
    pub weight_cache_slabs: Option<usize>,
}

impl Default for AcceleratorConfig {
    fn default() -> Self {
        Self {
            vec_size: 8,
            cu_num: 16,
            reg_depth: 8,
            channel_depth: 512,
            clock_hz: 181e6,
            ii: 2,
            lrn_n: 2,
            drain_cycles: 64,
            weight_cache_slabs: None,
        }
    }
}

impl AcceleratorConfig {
    pub fn with_dims(vec_size: usize, cu_num: usize) -> Self {
        Self {
            vec_size,
            cu_num,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        if !matches!(self.vec_size, 1 | 2 | 4 | 8 | 16) {
            return Err(Error::InvalidConfig(format!(
                "vec_size {} not in {{1, 2, 4, 8, 16}}",
                self.vec_size
            )));
        }
        if self.cu_num == 0 || self.reg_depth == 0 || self.channel_depth == 0 || self.ii == 0 {
            return Err(Error::InvalidConfig(
                "cu_num, reg_depth, channel_depth and ii must be at least 1".into(),
            ));
        }
        if !(self.clock_hz > 0.0) {
            return Err(Error::InvalidConfig("clock_hz must be positive".into()));
        }
        if self.lrn_n > 23 {
            return Err(Error::InvalidConfig("lrn_n must be at most 23".into()));
        }
        if self.weight_cache_slabs == Some(0) {
            return Err(Error::InvalidConfig("weight cache needs at least one slab".into()));
        }
        Ok(())
    }
}

/// FPGA capacity and off-chip bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    pub logic_elements: u64,
    pub dsp_blocks: u64,
    pub ram_blocks: u64,
    /// Bytes per second.
    pub dram_bandwidth: f64,
}

impl DeviceProfile {
    /// Stratix-V A7 on the DE5-net board.
    pub fn stratix_v_a7() -> Self {
        Self {
            name: "stratixv_a7".into(),
            logic_elements: 622_000,
            dsp_blocks: 256,
            ram_blocks: 2560,
            dram_bandwidth: 12.8e9,
        }
    }

    /// A device that never constrains anything.
    pub fn unlimited() -> Self {
        Self {
            name: "unlimited".into(),
            logic_elements: u64::MAX,
            dsp_blocks: u64::MAX,
            ram_blocks: u64::MAX,
            dram_bandwidth: f64::INFINITY,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "stratixv_a7" | "de5net" => Some(Self::stratix_v_a7()),
            "unlimited" => Some(Self::unlimited()),
            _ => None,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.logic_elements == 0
            || self.dsp_blocks == 0
            || self.ram_blocks == 0
            || !(self.dram_bandwidth > 0.0)
        {
            return Err(Error::InvalidDevice(format!(
                "{}: every capacity must be positive",
                self.name
            )));
        }
        Ok(())
    }
}
