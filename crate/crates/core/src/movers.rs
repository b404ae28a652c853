// SPDX-License-Identifier: Apache-2.0

//! MemRD and MemWR: the NDRange data movers between global memory and the
//! convolution pipeline.
//!
//! A work-group of local size `(K, K, C')` gathers the receptive field of one
//! output pixel. Work-groups are dispatched z-major (map group), then y, then
//! x. Map group `g` drives CU `i` with map `i * ceil(M / cu_num) + g`, so each
//! CU owns a contiguous block of output maps and the last CU may idle.
//!
//! Feature vectors fetched for a window are replicated by registers to every
//! CU and replayed for later map groups, so a window is charged to
//! `feature_bytes_read` once. Weight slabs go through [`WeightCache`].

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{c_prime, AcceleratorConfig, FeatureMap, LayerDescriptor, TensorShape, WeightBank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MoverMode {
    Conv,
    Fc,
}

/// NDRange geometry of one data-mover launch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkItemPlan {
    pub mode: MoverMode,
    pub global_size: [usize; 3],
    pub local_size: [usize; 3],
    pub groups: [usize; 3],
    /// z work-groups actually dispatched by MemRD: one per set of `cu_num` maps.
    pub map_groups: usize,
}

impl WorkItemPlan {
    fn new(mode: MoverMode, global: [usize; 3], local: [usize; 3], map_groups: usize) -> Self {
        debug_assert!(global.iter().zip(&local).all(|(g, l)| g % l == 0));
        Self {
            mode,
            global_size: global,
            local_size: local,
            groups: [global[0] / local[0], global[1] / local[1], global[2] / local[2]],
            map_groups,
        }
    }

    pub fn work_items(&self) -> usize {
        self.global_size.iter().product()
    }
}

/// Global-memory traffic observed (or predicted) for a kernel launch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficCounters {
    pub feature_bytes_read: u64,
    pub weight_bytes_read: u64,
    pub bytes_written: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

impl TrafficCounters {
    pub fn add(&mut self, other: &TrafficCounters) {
        self.feature_bytes_read += other.feature_bytes_read;
        self.weight_bytes_read += other.weight_bytes_read;
        self.bytes_written += other.bytes_written;
        self.cache_hits += other.cache_hits;
        self.cache_misses += other.cache_misses;
    }

    pub fn bytes_read(&self) -> u64 {
        self.feature_bytes_read + self.weight_bytes_read
    }
}

/// `(C, bx, by)` for a batch of FC classifications: the most-square
/// factorization with `bx >= by`.
pub fn map_fc_batch(batch: usize, channels: usize) -> (usize, usize, usize) {
    let batch = batch.max(1);
    let mut by = (batch as f64).sqrt() as usize;
    while by > 1 && !batch.is_multiple_of(by) {
        by -= 1;
    }
    let by = by.max(1);
    (channels, batch / by, by)
}

/// Everything MemRD/MemWR need to know about one pass over the datapath.
/// Grouped convolutions run one launch per group.
#[derive(Debug, Clone, PartialEq)]
pub struct Launch {
    pub mode: MoverMode,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Tensor MemRD reads; FC launches read the batch-mapped `(bx, by, C)` set.
    pub input_shape: TensorShape,
    pub channel_offset: usize,
    pub channels: usize,
    pub vec_size: usize,
    pub out_width: usize,
    pub out_height: usize,
    /// Dimensions MemWR stores (after pooling).
    pub store_width: usize,
    pub store_height: usize,
    pub map_offset: usize,
    pub maps: usize,
    pub cu_num: usize,
    pub relu: bool,
}

impl Launch {
    pub fn blocks(&self) -> usize {
        c_prime(self.channels, self.vec_size)
    }

    pub fn cn(&self) -> usize {
        self.kernel * self.kernel * self.blocks()
    }

    pub fn maps_per_cu(&self) -> usize {
        self.maps.div_ceil(self.cu_num)
    }

    /// Number of z work-groups MemRD dispatches.
    pub fn map_groups(&self) -> usize {
        self.maps_per_cu()
    }

    /// Launch-local map served by `cu` in map group `group`, if any.
    #[inline]
    pub fn map_for(&self, group: usize, cu: usize) -> Option<usize> {
        let m = cu * self.maps_per_cu() + group;
        (m < self.maps).then_some(m)
    }

    pub fn out_pixels(&self) -> usize {
        self.out_width * self.out_height
    }

    pub fn work_groups(&self) -> usize {
        self.map_groups() * self.out_pixels()
    }

    /// One-dimensional count of in-bounds kernel taps summed over all output
    /// positions.
    fn in_bounds_taps(extent: usize, out: usize, kernel: usize, stride: usize, pad: usize) -> usize {
        (0..out)
            .map(|o| {
                (0..kernel)
                    .filter(|&k| {
                        let i = (o * stride + k) as isize - pad as isize;
                        i >= 0 && (i as usize) < extent
                    })
                    .count()
            })
            .sum()
    }

    /// Traffic of this launch under an unbounded weight cache.
    pub fn expected_traffic(&self) -> TrafficCounters {
        let taps_x = Self::in_bounds_taps(
            self.input_shape.width,
            self.out_width,
            self.kernel,
            self.stride,
            self.pad,
        );
        let taps_y = Self::in_bounds_taps(
            self.input_shape.height,
            self.out_height,
            self.kernel,
            self.stride,
            self.pad,
        );
        let vec_bytes = (self.vec_size * 4) as u64;
        let slab_bytes = (self.cn() * self.vec_size * 4) as u64;
        let requests = (self.maps * self.out_pixels()) as u64;
        TrafficCounters {
            feature_bytes_read: (taps_x * taps_y * self.blocks()) as u64 * vec_bytes,
            weight_bytes_read: self.maps as u64 * slab_bytes,
            bytes_written: (self.store_width * self.store_height * self.maps * 4) as u64,
            cache_hits: requests - self.maps as u64,
            cache_misses: self.maps as u64,
        }
    }
}

/// Splits a layer into data-mover launches. For FC layers `batch` images are
/// mapped onto one launch.
pub fn launches(layer: &LayerDescriptor, cfg: &AcceleratorConfig, batch: usize) -> Result<Vec<Launch>> {
    layer.check()?;
    let conv_out = layer.conv_output_shape()?;
    let stored = layer.output_shape()?;
    if layer.is_fc() {
        let (c, bx, by) = map_fc_batch(batch, layer.group_channels());
        return Ok(vec![Launch {
            mode: MoverMode::Fc,
            kernel: 1,
            stride: 1,
            pad: 0,
            input_shape: TensorShape {
                width: bx,
                height: by,
                channels: c,
            },
            channel_offset: 0,
            channels: c,
            vec_size: cfg.vec_size,
            out_width: bx,
            out_height: by,
            store_width: bx,
            store_height: by,
            map_offset: 0,
            maps: layer.output_maps,
            cu_num: cfg.cu_num,
            relu: layer.relu,
        }]);
    }
    let cg = layer.group_channels();
    let mg = layer.group_maps();
    Ok((0..layer.groups)
        .map(|g| Launch {
            mode: MoverMode::Conv,
            kernel: layer.kernel,
            stride: layer.stride,
            pad: layer.pad,
            input_shape: layer.input_shape,
            channel_offset: g * cg,
            channels: cg,
            vec_size: cfg.vec_size,
            out_width: conv_out.width,
            out_height: conv_out.height,
            store_width: stored.width,
            store_height: stored.height,
            map_offset: g * mg,
            maps: mg,
            cu_num: cfg.cu_num,
            relu: layer.relu,
        })
        .collect())
}

/// MemRD NDRange for a layer. Conv: `(Wo*K, Ho*K, C'*M)` with local
/// `(K, K, C')`. FC: the batch becomes a `bx x by` plane of 1x1 windows.
pub fn memrd_plan(layer: &LayerDescriptor, cfg: &AcceleratorConfig, batch: usize) -> Result<WorkItemPlan> {
    let ls = launches(layer, cfg, batch)?;
    let first = &ls[0];
    let k = first.kernel;
    let cp = first.blocks();
    let mode = first.mode;
    Ok(WorkItemPlan::new(
        mode,
        [first.out_width * k, first.out_height * k, cp * layer.output_maps],
        [k, k, cp],
        ls.iter().map(Launch::map_groups).sum(),
    ))
}

/// MemWR NDRange: one stored element per work-item, `(Wo, Ho, M)`.
pub fn memwr_plan(layer: &LayerDescriptor, cfg: &AcceleratorConfig, batch: usize) -> Result<WorkItemPlan> {
    let ls = launches(layer, cfg, batch)?;
    let first = &ls[0];
    Ok(WorkItemPlan::new(
        first.mode,
        [first.store_width, first.store_height, layer.output_maps],
        [1, 1, 1],
        ls.iter().map(Launch::map_groups).sum(),
    ))
}

/// Predicted traffic for one layer over `batch` images.
pub fn expected_layer_traffic(layer: &LayerDescriptor, cfg: &AcceleratorConfig, batch: usize) -> Result<TrafficCounters> {
    let mut total = TrafficCounters::default();
    for l in launches(layer, cfg, batch)? {
        total.add(&l.expected_traffic());
    }
    if !layer.is_fc() {
        // Convolution layers launch once per image.
        let per_image = total;
        for _ in 1..batch {
            total.add(&per_image);
        }
    }
    Ok(total)
}

/// Per-launch weight cache, keyed by output map.
#[derive(Debug)]
pub struct WeightCache {
    slab_bytes: u64,
    store: CacheStore,
}

#[derive(Debug)]
enum CacheStore {
    Unbounded(HashMap<usize, Arc<[f32]>>),
    Lru {
        capacity: usize,
        entries: VecDeque<(usize, Arc<[f32]>)>,
    },
}

impl WeightCache {
    pub fn new(capacity: Option<usize>, slab_len: usize) -> Self {
        let store = match capacity {
            None => CacheStore::Unbounded(HashMap::new()),
            Some(capacity) => CacheStore::Lru {
                capacity,
                entries: VecDeque::with_capacity(capacity),
            },
        };
        Self {
            slab_bytes: (slab_len * 4) as u64,
            store,
        }
    }

    pub fn fetch(&mut self, map: usize, bank: &WeightBank, counters: &mut TrafficCounters) -> Arc<[f32]> {
        match &mut self.store {
            CacheStore::Unbounded(entries) => {
                if let Some(slab) = entries.get(&map) {
                    counters.cache_hits += 1;
                    return slab.clone();
                }
                counters.cache_misses += 1;
                counters.weight_bytes_read += self.slab_bytes;
                let slab: Arc<[f32]> = bank.slab(map).into();
                entries.insert(map, slab.clone());
                slab
            }
            CacheStore::Lru { capacity, entries } => {
                if let Some(pos) = entries.iter().position(|(m, _)| *m == map) {
                    counters.cache_hits += 1;
                    let entry = entries.remove(pos).expect("position is valid");
                    let slab = entry.1.clone();
                    entries.push_back(entry);
                    return slab;
                }
                counters.cache_misses += 1;
                counters.weight_bytes_read += self.slab_bytes;
                if entries.len() == *capacity {
                    entries.pop_front();
                }
                let slab: Arc<[f32]> = bank.slab(map).into();
                entries.push_back((map, slab.clone()));
                slab
            }
        }
    }
}

/// Weights and bias delivered to one CU for one work-group.
#[derive(Debug, Clone)]
pub struct WeightPacket {
    /// Absolute output map index.
    pub map: usize,
    pub weights: Arc<[f32]>,
    pub bias: f32,
}

/// One dispatched work-group: the gathered receptive field plus the weight
/// packet for every CU (`None` for idle CUs).
#[derive(Debug, Clone)]
pub struct WorkGroup {
    pub group: usize,
    pub y: usize,
    pub x: usize,
    pub features: Arc<[f32]>,
    pub weights: Vec<Option<WeightPacket>>,
}

/// MemRD as an iterator of work-groups in dispatch order.
pub struct MemRd<'a> {
    launch: &'a Launch,
    input: &'a FeatureMap,
    weights: &'a WeightBank,
    bias: &'a [f32],
    cache: WeightCache,
    counters: TrafficCounters,
    next: usize,
}

impl<'a> MemRd<'a> {
    pub fn new(
        launch: &'a Launch,
        input: &'a FeatureMap,
        weights: &'a WeightBank,
        bias: &'a [f32],
        cfg: &AcceleratorConfig,
    ) -> Result<Self> {
        if input.shape() != launch.input_shape {
            return Err(Error::PlanMismatch(format!(
                "input is {}, launch expects {}",
                input.shape(),
                launch.input_shape
            )));
        }
        if input.vec_size() != launch.vec_size || weights.vec_size() != launch.vec_size {
            return Err(Error::PlanMismatch("vec_size differs between tensors and launch".into()));
        }
        if weights.kernel() != launch.kernel
            || weights.input_channels() != launch.channels
            || weights.output_maps() < launch.map_offset + launch.maps
        {
            return Err(Error::PlanMismatch(format!(
                "weight bank {}x{}x{}x{} does not fit launch (K = {}, C = {}, maps {}..{})",
                weights.output_maps(),
                weights.kernel(),
                weights.kernel(),
                weights.input_channels(),
                launch.kernel,
                launch.channels,
                launch.map_offset,
                launch.map_offset + launch.maps
            )));
        }
        if bias.len() < launch.map_offset + launch.maps {
            return Err(Error::PlanMismatch(format!(
                "bias has {} entries, launch needs {}",
                bias.len(),
                launch.map_offset + launch.maps
            )));
        }
        Ok(Self {
            launch,
            input,
            weights,
            bias,
            cache: WeightCache::new(cfg.weight_cache_slabs, weights.slab_len()),
            counters: TrafficCounters::default(),
            next: 0,
        })
    }

    pub fn counters(&self) -> TrafficCounters {
        self.counters
    }

    fn gather(&mut self, oy: usize, ox: usize, count_fetch: bool) -> Arc<[f32]> {
        let l = self.launch;
        let vec = l.vec_size;
        let blocks = l.blocks();
        let shape = l.input_shape;
        let aligned = l.channel_offset.is_multiple_of(vec) && (l.channels.is_multiple_of(vec) || l.channel_offset + l.channels == shape.channels);
        let first_block = l.channel_offset / vec;
        let mut out = vec![0.0f32; l.cn() * vec];
        let mut fetched = 0u64;
        let mut pos = 0;
        for ky in 0..l.kernel {
            let iy = (oy * l.stride + ky) as isize - l.pad as isize;
            for kx in 0..l.kernel {
                let ix = (ox * l.stride + kx) as isize - l.pad as isize;
                let span = blocks * vec;
                if iy < 0 || ix < 0 || iy as usize >= shape.height || ix as usize >= shape.width {
                    // Padding: zero lanes, nothing fetched.
                    pos += span;
                    continue;
                }
                let pixel = self.input.pixel(iy as usize, ix as usize);
                if aligned {
                    let start = first_block * vec;
                    out[pos..pos + span].copy_from_slice(&pixel[start..start + span]);
                } else {
                    for c in 0..l.channels {
                        out[pos + c] = pixel[l.channel_offset + c];
                    }
                }
                fetched += blocks as u64;
                pos += span;
            }
        }
        if count_fetch {
            self.counters.feature_bytes_read += fetched * (vec * 4) as u64;
        }
        out.into()
    }
}

impl Iterator for MemRd<'_> {
    type Item = WorkGroup;

    fn next(&mut self) -> Option<WorkGroup> {
        let l = self.launch;
        if self.next >= l.work_groups() {
            return None;
        }
        let pixels = l.out_pixels();
        let group = self.next / pixels;
        let pixel = self.next % pixels;
        let (y, x) = (pixel / l.out_width, pixel % l.out_width);
        self.next += 1;

        // Later map groups replay windows already fetched by the first pass.
        let features = self.gather(y, x, group == 0);
        let mut weights = Vec::with_capacity(l.cu_num);
        for cu in 0..l.cu_num {
            weights.push(l.map_for(group, cu).map(|m| {
                let map = l.map_offset + m;
                WeightPacket {
                    map,
                    weights: self.cache.fetch(map, self.weights, &mut self.counters),
                    bias: self.bias[map],
                }
            }));
        }
        Some(WorkGroup {
            group,
            y,
            x,
            features,
            weights,
        })
    }
}

/// Per-CU bundle streams produced by one MemRD launch.
#[derive(Debug, Clone)]
pub struct CuStreams {
    /// `features[cu]`: one window per work-group, replicated to every CU.
    pub features: Vec<Vec<Arc<[f32]>>>,
    /// `weights[cu]`: one packet per work-group, `None` while the CU idles.
    pub weights: Vec<Vec<Option<WeightPacket>>>,
    pub counters: TrafficCounters,
}

impl CuStreams {
    /// Bundles (VEC-wide vectors) carried on CU `cu`'s feature stream.
    pub fn feature_bundles(&self, cu: usize, vec_size: usize) -> usize {
        self.features[cu].iter().map(|w| w.len() / vec_size).sum()
    }
}

/// Runs MemRD to completion and splits the work-groups into per-CU streams.
pub fn memrd_stream(
    launch: &Launch,
    input: &FeatureMap,
    weights: &WeightBank,
    bias: &[f32],
    cfg: &AcceleratorConfig,
) -> Result<CuStreams> {
    let mut rd = MemRd::new(launch, input, weights, bias, cfg)?;
    let mut out = CuStreams {
        features: vec![Vec::new(); launch.cu_num],
        weights: vec![Vec::new(); launch.cu_num],
        counters: TrafficCounters::default(),
    };
    for wg in rd.by_ref() {
        for (cu, w) in wg.weights.into_iter().enumerate() {
            out.features[cu].push(wg.features.clone());
            out.weights[cu].push(w);
        }
    }
    out.counters = rd.counters();
    Ok(out)
}

/// MemWR: scatters per-pixel CU lane vectors (map group major, then y, x)
/// into the channel-blocked output.
#[derive(Debug)]
pub struct MemWr {
    width: usize,
    height: usize,
    maps: usize,
    maps_per_cu: usize,
    cu_num: usize,
    map_offset: usize,
    output: FeatureMap,
    received: usize,
    expected: usize,
    counters: TrafficCounters,
}

impl MemWr {
    /// `output` must already have the full layer shape; grouped layers pass
    /// the same map through successive launches.
    pub fn new(launch: &Launch, output: FeatureMap) -> Result<Self> {
        let shape = output.shape();
        if shape.width != launch.store_width
            || shape.height != launch.store_height
            || shape.channels < launch.map_offset + launch.maps
        {
            return Err(Error::PlanMismatch(format!(
                "output {} cannot hold launch maps {}..{} at {}x{}",
                shape,
                launch.map_offset,
                launch.map_offset + launch.maps,
                launch.store_width,
                launch.store_height
            )));
        }
        Ok(Self {
            width: launch.store_width,
            height: launch.store_height,
            maps: launch.maps,
            maps_per_cu: launch.maps_per_cu(),
            cu_num: launch.cu_num,
            map_offset: launch.map_offset,
            output,
            received: 0,
            expected: launch.map_groups() * launch.store_width * launch.store_height,
            counters: TrafficCounters::default(),
        })
    }

    pub fn remaining(&self) -> usize {
        self.expected - self.received
    }

    pub fn accept(&mut self, lanes: &[f32]) -> Result<()> {
        if self.received >= self.expected {
            return Err(Error::StreamOverrun(format!(
                "MemWR expected {} pixels",
                self.expected
            )));
        }
        if lanes.len() != self.cu_num {
            return Err(Error::PlanMismatch(format!(
                "pixel carries {} lanes, expected {}",
                lanes.len(),
                self.cu_num
            )));
        }
        let pixels = self.width * self.height;
        let group = self.received / pixels;
        let pixel = self.received % pixels;
        let (y, x) = (pixel / self.width, pixel % self.width);
        for (cu, &v) in lanes.iter().enumerate() {
            let m = cu * self.maps_per_cu + group;
            if m < self.maps {
                self.output.set(y, x, self.map_offset + m, v);
                self.counters.bytes_written += 4;
            }
        }
        self.received += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<(FeatureMap, TrafficCounters)> {
        if self.received != self.expected {
            return Err(Error::StreamUnderrun(format!(
                "MemWR received {} of {} pixels",
                self.received, self.expected
            )));
        }
        Ok((self.output, self.counters))
    }
}

/// Commits a complete output stream.
pub fn memwr_commit<I, P>(stream: I, launch: &Launch, output: FeatureMap) -> Result<(FeatureMap, TrafficCounters)>
where
    I: IntoIterator<Item = P>,
    P: AsRef<[f32]>,
{
    let mut wr = MemWr::new(launch, output)?;
    for px in stream {
        wr.accept(px.as_ref())?;
    }
    wr.finish()
}
