// SPDX-License-Identifier: Apache-2.0

//! Channel-connected execution of layers and networks.
//!
//! Each launch wires MemRD, the CU shards, Pool and MemWR together with
//! bounded channels and runs them either cooperatively on the calling
//! thread (`threads == 0`) or on one worker per stage. LRN runs as a
//! separate whole-tensor pass after the pipeline.

pub mod channel;
pub mod profile;
pub mod sched;
pub mod stages;

use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::conv::{batch_to_plane, plane_to_batch};
use crate::error::{Error, Result};
use crate::lrn::{lrn_apply, PwlTable};
use crate::model::{
    validate_network, AcceleratorConfig, DeviceProfile, FeatureMap, LayerDescriptor, LayerWeights, PoolSpec,
    TensorShape, WeightBank,
};
use crate::movers::{launches, Launch, MemRd, MemWr, TrafficCounters};
use crate::perf::estimate_network;

use channel::{Channel, ChannelStats, Notifier};
use profile::{LayerRecord, ProfileEvent, RunProfile};
use sched::{run_cooperative, run_threaded, StageReport};
use stages::{ConvShard, CuPorts, MemRdStage, MemWrStage, PoolStage, Stage};

pub const THREADS_ENV: &str = "PIPECNN_THREADS";

#[derive(Debug, Clone)]
pub struct RuntimeOptions {
    /// 0 runs every stage cooperatively on the calling thread; otherwise the
    /// CUs are split over `min(threads, cu_num)` conv workers.
    pub threads: usize,
    /// How long every stage may sit blocked with no channel activity.
    pub watchdog: Duration,
    /// Bandwidth source for the modeled timeline.
    pub device: DeviceProfile,
    /// Origin of the wall-clock timeline.
    pub epoch: Instant,
}

impl Default for RuntimeOptions {
    fn default() -> Self {
        Self {
            threads: 0,
            watchdog: Duration::from_secs(10),
            device: DeviceProfile::stratix_v_a7(),
            epoch: Instant::now(),
        }
    }
}

impl RuntimeOptions {
    pub fn with_threads(threads: usize) -> Self {
        Self {
            threads,
            ..Self::default()
        }
    }

    /// Reads the worker count from `PIPECNN_THREADS`. The default is the
    /// available parallelism, or cooperative mode on a single core where
    /// worker threads would only trade time slices.
    pub fn from_env() -> Result<Self> {
        let threads = match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{THREADS_ENV}={v:?} is not a worker count")))?,
            Err(_) => match std::thread::available_parallelism().map_or(1, |n| n.get()) {
                1 => 0,
                n => n,
            },
        };
        Ok(Self::with_threads(threads))
    }
}

/// Result of one pipelined launch.
#[derive(Debug)]
pub struct LaunchOutcome {
    pub output: FeatureMap,
    pub counters: TrafficCounters,
    pub reports: Vec<StageReport>,
    /// features, weights, results, pixels.
    pub channels: Vec<ChannelStats>,
    pub line_buffer_elements: usize,
    pub peak_results_buffered: usize,
}

fn merge_stats(name: &str, all: impl Iterator<Item = ChannelStats>) -> ChannelStats {
    let mut acc = ChannelStats {
        name: name.into(),
        ..ChannelStats::default()
    };
    for s in all {
        acc.capacity = s.capacity;
        acc.merge(&s);
    }
    acc
}

/// Runs one launch through MemRD -> CUs -> Pool -> MemWR, writing into `output`.
#[allow(clippy::too_many_arguments)]
pub fn run_launch(
    launch: &Launch,
    input: &FeatureMap,
    weights: &WeightBank,
    bias: &[f32],
    pool: Option<PoolSpec>,
    cfg: &AcceleratorConfig,
    opts: &RuntimeOptions,
    output: FeatureMap,
) -> Result<LaunchOutcome> {
    cfg.check()?;
    let cu = launch.cu_num;
    let shards = if opts.threads == 0 { 1 } else { opts.threads.min(cu) };
    let notifier = Notifier::new(3 + shards);
    fn make<T>(name: String, cfg: &AcceleratorConfig, n: &Arc<Notifier>, opts: &RuntimeOptions) -> Arc<Channel<T>> {
        Arc::new(Channel::with_notifier(name, cfg.channel_depth, n.clone(), opts.watchdog))
    }
    let features: Vec<_> = (0..cu)
        .map(|i| make(format!("memrd->conv.features[{i}]"), cfg, &notifier, opts))
        .collect();
    let weight_chs: Vec<_> = (0..cu)
        .map(|i| make(format!("memrd->conv.weights[{i}]"), cfg, &notifier, opts))
        .collect();
    let results: Vec<_> = (0..cu)
        .map(|i| make(format!("conv->pool[{i}]"), cfg, &notifier, opts))
        .collect();
    let pixels = make("pool->memwr".to_string(), cfg, &notifier, opts);

    let rd = MemRd::new(launch, input, weights, bias, cfg)?;
    let wr = MemWr::new(launch, output)?;
    let mut memrd = MemRdStage::new(rd, features.clone(), weight_chs.clone());
    let per = cu.div_ceil(shards);
    let mut convs: Vec<ConvShard> = (0..cu)
        .step_by(per)
        .enumerate()
        .map(|(i, first)| {
            let ports = (first..(first + per).min(cu))
                .map(|c| CuPorts {
                    features: features[c].clone(),
                    weights: weight_chs[c].clone(),
                    out: results[c].clone(),
                })
                .collect();
            ConvShard::new(i, launch, cfg.reg_depth, ports)
        })
        .collect();
    let mut pool_stage = PoolStage::new(launch, pool, results.clone(), pixels.clone());
    let mut memwr = MemWrStage::new(wr, pixels.clone());

    let reports = {
        let mut list: Vec<&mut dyn Stage> = Vec::with_capacity(3 + convs.len());
        list.push(&mut memrd);
        for c in convs.iter_mut() {
            list.push(c);
        }
        list.push(&mut pool_stage);
        list.push(&mut memwr);
        if opts.threads == 0 {
            run_cooperative(&mut list)?
        } else {
            run_threaded(&mut list, &notifier, opts.watchdog)?
        }
    };
    let (output, wc) = memwr
        .take_result()
        .ok_or_else(|| Error::StreamUnderrun("MemWR finished without output".into()))?;
    let mut counters = memrd.counters();
    counters.add(&wc);
    let channels = vec![
        merge_stats("features", features.iter().map(|c| c.stats())),
        merge_stats("weights", weight_chs.iter().map(|c| c.stats())),
        merge_stats("results", results.iter().map(|c| c.stats())),
        merge_stats("pixels", std::iter::once(pixels.stats())),
    ];
    Ok(LaunchOutcome {
        output,
        counters,
        reports,
        channels,
        line_buffer_elements: pool_stage.buffer_elements(),
        peak_results_buffered: pool_stage.peak_buffered(),
    })
}

fn micros(opts: &RuntimeOptions, t: Option<Instant>) -> f64 {
    t.map_or(0.0, |t| t.saturating_duration_since(opts.epoch).as_secs_f64() * 1e6)
}

fn record_launch(
    profile: &mut RunProfile,
    rec: &mut LayerRecord,
    out: &LaunchOutcome,
    opts: &RuntimeOptions,
    layer: usize,
    launch: usize,
    image: usize,
) {
    for r in &out.reports {
        profile.events.push(ProfileEvent {
            kernel: r.kernel.to_string(),
            instance: r.instance,
            layer,
            launch,
            image,
            wall_start_us: micros(opts, r.start),
            wall_end_us: micros(opts, r.end.or(r.start)),
            modeled_start_s: 0.0,
            modeled_end_s: 0.0,
            bytes: match r.kernel {
                "memrd" => out.counters.bytes_read(),
                "memwr" => out.counters.bytes_written,
                _ => r.bytes,
            },
            stall_ns: r.stall_ns,
            stall_events: r.stall_events,
        });
    }
    rec.counters.add(&out.counters);
    for ch in &out.channels {
        match rec.channels.iter_mut().find(|c| c.name == ch.name) {
            Some(c) => c.merge(ch),
            None => rec.channels.push(ch.clone()),
        }
    }
    rec.line_buffer_elements = rec.line_buffer_elements.max(out.line_buffer_elements);
    rec.peak_results_buffered = rec.peak_results_buffered.max(out.peak_results_buffered);
}

fn lrn_pass(
    layer: &LayerDescriptor,
    index: usize,
    image: usize,
    map: FeatureMap,
    cfg: &AcceleratorConfig,
    opts: &RuntimeOptions,
    profile: &mut RunProfile,
) -> Result<FeatureMap> {
    let Some(lrn) = layer.lrn else {
        return Ok(map);
    };
    let table = PwlTable::for_lrn(cfg.lrn_n, &lrn)?;
    let start = Instant::now();
    let out = lrn_apply(&map, &lrn, &table, opts.threads.max(1))?;
    let end = Instant::now();
    profile.events.push(ProfileEvent {
        kernel: "lrn".into(),
        instance: 0,
        layer: index,
        launch: 0,
        image,
        wall_start_us: micros(opts, Some(start)),
        wall_end_us: micros(opts, Some(end)),
        modeled_start_s: 0.0,
        modeled_end_s: 0.0,
        bytes: (map.shape().len() * 8) as u64,
        stall_ns: 0,
        stall_events: 0,
    });
    Ok(out)
}

fn new_record(layer: &LayerDescriptor, index: usize) -> LayerRecord {
    LayerRecord {
        layer: index,
        kind: if layer.is_fc() { "fc" } else { "conv" }.into(),
        ..LayerRecord::default()
    }
}

fn conv_image(
    layer: &LayerDescriptor,
    index: usize,
    image: usize,
    input: &FeatureMap,
    w: &LayerWeights,
    cfg: &AcceleratorConfig,
    opts: &RuntimeOptions,
    profile: &mut RunProfile,
    rec: &mut LayerRecord,
) -> Result<FeatureMap> {
    if input.shape() != layer.input_shape {
        return Err(Error::ShapeMismatch {
            layer: index,
            reason: format!("input is {}, layer expects {}", input.shape(), layer.input_shape),
        });
    }
    let input = input.repacked(cfg.vec_size);
    let bank = w.weights.repacked(cfg.vec_size);
    let mut output = FeatureMap::zeros(layer.output_shape()?, cfg.vec_size);
    for (li, launch) in launches(layer, cfg, 1)?.iter().enumerate() {
        let out = run_launch(launch, &input, &bank, &w.bias, layer.pool, cfg, opts, output)?;
        record_launch(profile, rec, &out, opts, index, li, image);
        output = out.output;
    }
    lrn_pass(layer, index, image, output, cfg, opts, profile)
}

fn fc_batch(
    layer: &LayerDescriptor,
    index: usize,
    inputs: &[FeatureMap],
    w: &LayerWeights,
    cfg: &AcceleratorConfig,
    opts: &RuntimeOptions,
    profile: &mut RunProfile,
    rec: &mut LayerRecord,
) -> Result<Vec<FeatureMap>> {
    let ls = launches(layer, cfg, inputs.len())?;
    let launch = &ls[0];
    let plane = batch_to_plane(inputs, launch).map_err(|e| match e {
        Error::ShapeMismatch { reason, .. } => Error::ShapeMismatch { layer: index, reason },
        other => other,
    })?;
    let bank = w.weights.repacked(cfg.vec_size);
    let output = FeatureMap::zeros(
        TensorShape {
            width: launch.out_width,
            height: launch.out_height,
            channels: layer.output_maps,
        },
        cfg.vec_size,
    );
    let out = run_launch(launch, &plane, &bank, &w.bias, None, cfg, opts, output)?;
    record_launch(profile, rec, &out, opts, index, 0, 0);
    Ok(plane_to_batch(&out.output, inputs.len()))
}

/// Runs one layer for one image: the pipelined launches, then LRN if attached.
pub fn execute_layer(
    layer: &LayerDescriptor,
    index: usize,
    input: &FeatureMap,
    weights: &LayerWeights,
    cfg: &AcceleratorConfig,
    opts: &RuntimeOptions,
) -> Result<(FeatureMap, RunProfile)> {
    let (mut out, profile) = execute_layer_batch(layer, index, std::slice::from_ref(input), weights, cfg, opts)?;
    Ok((out.remove(0), profile))
}

/// One layer over a batch: convolution launches per image, FC launches once
/// for the whole batch.
pub fn execute_layer_batch(
    layer: &LayerDescriptor,
    index: usize,
    inputs: &[FeatureMap],
    weights: &LayerWeights,
    cfg: &AcceleratorConfig,
    opts: &RuntimeOptions,
) -> Result<(Vec<FeatureMap>, RunProfile)> {
    cfg.check()?;
    layer.check()?;
    weights.check(layer, index)?;
    let mut profile = RunProfile::default();
    let mut rec = new_record(layer, index);
    let outputs = if inputs.is_empty() {
        Vec::new()
    } else if layer.is_fc() {
        fc_batch(layer, index, inputs, weights, cfg, opts, &mut profile, &mut rec)?
    } else {
        inputs
            .iter()
            .enumerate()
            .map(|(i, x)| conv_image(layer, index, i, x, weights, cfg, opts, &mut profile, &mut rec))
            .collect::<Result<_>>()?
    };
    profile.layers.push(rec);
    Ok((outputs, profile))
}

/// Spreads a layer's modeled interval over its events: pipeline kernels share
/// one slot per (image, launch), LRN passes follow the pipeline.
fn assign_modeled_times(profile: &mut RunProfile, layer: usize, start: f64, pipe: f64, lrn: f64) {
    let mut slots: Vec<(usize, usize)> = profile
        .events
        .iter()
        .filter(|e| e.layer == layer && e.kernel != "lrn")
        .map(|e| (e.image, e.launch))
        .collect();
    slots.sort_unstable();
    slots.dedup();
    let images = profile
        .events
        .iter()
        .filter(|e| e.layer == layer && e.kernel == "lrn")
        .count()
        .max(1);
    let slot_len = pipe / slots.len().max(1) as f64;
    let lrn_len = lrn / images as f64;
    for e in profile.events.iter_mut().filter(|e| e.layer == layer) {
        if e.kernel == "lrn" {
            e.modeled_start_s = start + pipe + lrn_len * e.image as f64;
            e.modeled_end_s = e.modeled_start_s + lrn_len;
        } else {
            let pos = slots.binary_search(&(e.image, e.launch)).expect("slot listed");
            e.modeled_start_s = start + slot_len * pos as f64;
            e.modeled_end_s = e.modeled_start_s + slot_len;
        }
    }
}

/// Runs a validated network over a batch of images, strictly layer by layer.
pub fn execute_network(
    net: &[LayerDescriptor],
    weights: &[LayerWeights],
    inputs: &[FeatureMap],
    cfg: &AcceleratorConfig,
    opts: &RuntimeOptions,
) -> Result<(Vec<FeatureMap>, RunProfile)> {
    validate_network(net).map_err(Error::Validation)?;
    cfg.check()?;
    if weights.len() != net.len() {
        return Err(Error::InvalidConfig(format!(
            "{} weight sets for {} layers",
            weights.len(),
            net.len()
        )));
    }
    for (i, (l, w)) in net.iter().zip(weights).enumerate() {
        w.check(l, i)?;
    }
    let cost = estimate_network(net, cfg, &opts.device, inputs.len())?;
    let mut profile = RunProfile::default();
    let mut current: Vec<FeatureMap> = inputs.to_vec();
    let mut t = 0.0;
    for (i, (layer, w)) in net.iter().zip(weights).enumerate() {
        let (next, mut p) = execute_layer_batch(layer, i, &current, w, cfg, opts)?;
        let pipe = cost.layers[i].effective_time;
        let lrn = cost.lrn[i].map_or(0.0, |c| c.effective_time);
        assign_modeled_times(&mut p, i, t, pipe, lrn);
        for rec in p.layers.iter_mut() {
            rec.modeled = Some(cost.layers[i]);
            rec.lrn_modeled = cost.lrn[i];
        }
        t += pipe + lrn;
        profile.absorb(p);
        current = next;
    }
    Ok((current, profile))
}
