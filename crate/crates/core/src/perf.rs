// SPDX-License-Identifier: Apache-2.0

//! First-order cycle, bandwidth and resource models plus the
//! `(vec_size, cu_num)` design-space sweep.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{c_prime, AcceleratorConfig, DeviceProfile, LayerDescriptor};
use crate::movers::{expected_layer_traffic, launches};

/// Affine resource coefficients: `cost = ceil(a * vec * cu) + c`.
/// Calibrated, not derived: the DSP pair reproduces 162 blocks at (8, 16).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResourceModel {
    pub a_dsp: f64,
    pub c_dsp: u64,
    pub a_logic: f64,
    pub c_logic: u64,
    pub a_ram: f64,
    pub c_ram: u64,
}

impl Default for ResourceModel {
    fn default() -> Self {
        Self {
            a_dsp: 1.2,
            c_dsp: 8,
            a_logic: 2300.0,
            c_logic: 150_000,
            a_ram: 9.0,
            c_ram: 400,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceEstimate {
    pub dsp: u64,
    pub logic: u64,
    pub ram: u64,
}

impl ResourceEstimate {
    pub fn fits(&self, device: &DeviceProfile) -> bool {
        self.dsp <= device.dsp_blocks && self.logic <= device.logic_elements && self.ram <= device.ram_blocks
    }
}

fn affine(a: f64, c: u64, lanes: usize) -> u64 {
    // Guard against 1.2 * 10 landing a hair above an integer.
    (a * lanes as f64 - 1e-9).ceil().max(0.0) as u64 + c
}

pub fn estimate_resources(cfg: &AcceleratorConfig) -> ResourceEstimate {
    estimate_resources_with(cfg, &ResourceModel::default())
}

pub fn estimate_resources_with(cfg: &AcceleratorConfig, model: &ResourceModel) -> ResourceEstimate {
    let lanes = cfg.vec_size * cfg.cu_num;
    ResourceEstimate {
        dsp: affine(model.a_dsp, model.c_dsp, lanes),
        logic: affine(model.a_logic, model.c_logic, lanes),
        ram: affine(model.a_ram, model.c_ram, lanes),
    }
}

/// Compute cycles of one layer for a single image (FC layers: one image on
/// a 1x1 batch plane).
pub fn estimate_layer_cycles(layer: &LayerDescriptor, cfg: &AcceleratorConfig) -> Result<u64> {
    estimate_layer_cycles_batched(layer, cfg, 1)
}

/// Compute cycles for `batch` images. Convolution layers launch once per
/// image; FC layers run the whole batch as one launch.
pub fn estimate_layer_cycles_batched(layer: &LayerDescriptor, cfg: &AcceleratorConfig, batch: usize) -> Result<u64> {
    let mut cycles = 0u64;
    for l in launches(layer, cfg, batch)? {
        cycles += l.maps_per_cu() as u64 * l.out_pixels() as u64 * l.cn() as u64 * cfg.ii
            + cfg.reg_depth as u64
            + cfg.drain_cycles;
    }
    if !layer.is_fc() {
        cycles *= batch as u64;
    }
    Ok(cycles)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub compute_cycles: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub memory_time: f64,
    pub compute_time: f64,
    pub effective_time: f64,
    pub stalled: bool,
}

impl LayerCost {
    fn new(compute_cycles: u64, bytes_in: u64, bytes_out: u64, cfg: &AcceleratorConfig, device: &DeviceProfile) -> Self {
        let compute_time = compute_cycles as f64 / cfg.clock_hz;
        let memory_time = (bytes_in + bytes_out) as f64 / device.dram_bandwidth;
        Self {
            compute_cycles,
            bytes_in,
            bytes_out,
            memory_time,
            compute_time,
            effective_time: compute_time.max(memory_time),
            stalled: memory_time > compute_time,
        }
    }
}

/// Pipeline cost of one layer for a single image.
pub fn estimate_bandwidth(layer: &LayerDescriptor, cfg: &AcceleratorConfig, device: &DeviceProfile) -> Result<LayerCost> {
    estimate_bandwidth_batched(layer, cfg, device, 1)
}

/// Pipeline cost of one layer over `batch` images.
pub fn estimate_bandwidth_batched(
    layer: &LayerDescriptor,
    cfg: &AcceleratorConfig,
    device: &DeviceProfile,
    batch: usize,
) -> Result<LayerCost> {
    let traffic = expected_layer_traffic(layer, cfg, batch)?;
    let cycles = estimate_layer_cycles_batched(layer, cfg, batch)?;
    Ok(LayerCost::new(cycles, traffic.bytes_read(), traffic.bytes_written, cfg, device))
}

/// Separate LRN pass: one vector per cycle, reading and writing the tensor once.
pub fn estimate_lrn(
    layer: &LayerDescriptor,
    cfg: &AcceleratorConfig,
    device: &DeviceProfile,
    batch: usize,
) -> Result<Option<LayerCost>> {
    if layer.lrn.is_none() {
        return Ok(None);
    }
    let s = layer.output_shape()?;
    let cycles = (s.width * s.height * c_prime(s.channels, cfg.vec_size) * batch) as u64 + cfg.drain_cycles;
    let bytes = (s.len() * 4 * batch) as u64;
    Ok(Some(LayerCost::new(cycles, bytes, bytes, cfg, device)))
}

/// Per-layer costs of a network over one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCost {
    pub batch: usize,
    pub layers: Vec<LayerCost>,
    pub lrn: Vec<Option<LayerCost>>,
    pub ops_per_image: u64,
}

impl NetworkCost {
    /// Seconds for the whole batch.
    pub fn batch_time(&self) -> f64 {
        self.layers.iter().map(|c| c.effective_time).sum::<f64>()
            + self.lrn.iter().flatten().map(|c| c.effective_time).sum::<f64>()
    }

    pub fn time_per_image(&self) -> f64 {
        self.batch_time() / self.batch as f64
    }

    pub fn gops(&self) -> f64 {
        self.ops_per_image as f64 * self.batch as f64 / self.batch_time() / 1e9
    }
}

pub fn total_ops(net: &[LayerDescriptor]) -> u64 {
    net.iter().map(LayerDescriptor::ops).sum()
}

pub fn estimate_network(
    net: &[LayerDescriptor],
    cfg: &AcceleratorConfig,
    device: &DeviceProfile,
    batch: usize,
) -> Result<NetworkCost> {
    let batch = batch.max(1);
    let mut layers = Vec::with_capacity(net.len());
    let mut lrn = Vec::with_capacity(net.len());
    for layer in net {
        layers.push(estimate_bandwidth_batched(layer, cfg, device, batch)?);
        lrn.push(estimate_lrn(layer, cfg, device, batch)?);
    }
    Ok(NetworkCost {
        batch,
        layers,
        lrn,
        ops_per_image: total_ops(net),
    })
}

pub fn performance_density(gops: f64, dsp: u64) -> Result<f64> {
    if dsp == 0 {
        return Err(Error::DivisionByZero("performance density needs at least one DSP"));
    }
    Ok(gops / dsp as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub cfg: AcceleratorConfig,
    pub resources: ResourceEstimate,
    /// Seconds per image.
    pub total_time: f64,
    pub gops: f64,
    pub feasible: bool,
    pub density: f64,
}

/// Evaluates every `(vec, cu)` pair. Feasible points come first, fastest
/// first; ties and the infeasible tail are ordered by `(vec, cu)`.
pub fn sweep(
    net: &[LayerDescriptor],
    device: &DeviceProfile,
    vec_candidates: &[usize],
    cu_candidates: &[usize],
    batch: usize,
    base: &AcceleratorConfig,
) -> Result<Vec<DesignPoint>> {
    sweep_with(net, device, vec_candidates, cu_candidates, batch, base, &ResourceModel::default())
}

pub fn sweep_with(
    net: &[LayerDescriptor],
    device: &DeviceProfile,
    vec_candidates: &[usize],
    cu_candidates: &[usize],
    batch: usize,
    base: &AcceleratorConfig,
    model: &ResourceModel,
) -> Result<Vec<DesignPoint>> {
    if vec_candidates.is_empty() || cu_candidates.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one vec and one cu candidate".into()));
    }
    let mut points = Vec::new();
    for &vec in vec_candidates {
        for &cu in cu_candidates {
            let cfg = AcceleratorConfig {
                vec_size: vec,
                cu_num: cu,
                ..base.clone()
            };
            cfg.check()?;
            let resources = estimate_resources_with(&cfg, model);
            let cost = estimate_network(net, &cfg, device, batch)?;
            let gops = cost.gops();
            points.push(DesignPoint {
                density: performance_density(gops, resources.dsp)?,
                feasible: resources.fits(device),
                total_time: cost.time_per_image(),
                gops,
                resources,
                cfg,
            });
        }
    }
    points.sort_by(|a, b| {
        b.feasible
            .cmp(&a.feasible)
            .then(if a.feasible { a.total_time.total_cmp(&b.total_time) } else { std::cmp::Ordering::Equal })
            .then((a.cfg.vec_size, a.cfg.cu_num).cmp(&(b.cfg.vec_size, b.cfg.cu_num)))
    });
    if !points.first().is_some_and(|p| p.feasible) {
        return Err(Error::NoFeasiblePoint);
    }
    Ok(points)
}

pub const SWEEP_COLUMNS: [&str; 9] = ["vec", "cu", "dsp", "logic", "ram", "time_ms", "gops", "density", "feasible"];

fn sweep_row(p: &DesignPoint) -> [String; 9] {
    [
        p.cfg.vec_size.to_string(),
        p.cfg.cu_num.to_string(),
        p.resources.dsp.to_string(),
        p.resources.logic.to_string(),
        p.resources.ram.to_string(),
        format!("{:.3}", p.total_time * 1e3),
        format!("{:.2}", p.gops),
        format!("{:.4}", p.density),
        p.feasible.to_string(),
    ]
}

pub fn sweep_csv(points: &[DesignPoint]) -> String {
    let mut s = SWEEP_COLUMNS.join(",");
    s.push('\n');
    for p in points {
        s.push_str(&sweep_row(p).join(","));
        s.push('\n');
    }
    s
}

/// Aligned columns for terminals.
pub fn sweep_text(points: &[DesignPoint]) -> String {
    let rows: Vec<[String; 9]> = points.iter().map(sweep_row).collect();
    let mut widths = SWEEP_COLUMNS.map(str::len);
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut s = String::new();
    let line = |s: &mut String, cells: &[&str]| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        writeln!(s, "{}", parts.join("  ")).unwrap();
    };
    line(&mut s, &SWEEP_COLUMNS);
    for r in &rows {
        let cells: Vec<&str> = r.iter().map(String::as_str).collect();
        line(&mut s, &cells);
    }
    s
}
