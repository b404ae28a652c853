// SPDX-License-Identifier: Apache-2.0

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Tolerances are pinned below.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pipecnn_core::lrn::{lrn_apply, PwlTable};
use pipecnn_core::netio::{bundled_network, random_inputs, random_weights};
use pipecnn_core::perf::{estimate_network, estimate_resources, performance_density, sweep, sweep_csv, total_ops, SWEEP_COLUMNS};
use pipecnn_core::pool::pool_stream;
use pipecnn_core::reference::{
    conv_reference, fc_reference, lrn_reference, max_normalized_error, max_relative_error, pool_reference,
    pool_reference_f32, Reference,
};
use pipecnn_core::runtime::profile::RunProfile;
use pipecnn_core::runtime::{execute_layer_batch, THREADS_ENV};
use pipecnn_core::{
    execute_layer, execute_network, AcceleratorConfig, DeviceProfile, FeatureMap, LayerDescriptor, LayerWeights,
    LrnSpec, PoolMode, PoolSpec, RuntimeOptions, TensorShape, WeightBank,
};

const CONV_TOL: f64 = 1e-5;
const FC_TOL: f64 = 1e-5;
const AVG_POOL_TOL: f64 = 1e-6;
const LRN_TOL: f64 = 5e-3;
const CONV_BUDGET: Duration = Duration::from_secs(120);
const FC_BUDGET: Duration = Duration::from_secs(60);
const SMOKE_BUDGET: Duration = Duration::from_secs(300);
const GOPS_TARGET: f64 = 33.9;
const GOPS_BAND: f64 = 0.30;

type Criterion = (&'static str, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
}

fn integers(rng: &mut ChaCha8Rng, n: usize, bound: i32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-bound..=bound) as f32).collect()
}

fn random_cfg(rng: &mut ChaCha8Rng) -> AcceleratorConfig {
    let mut cfg = AcceleratorConfig::with_dims(*[1, 2, 4, 8, 16].choose(rng).unwrap(), rng.gen_range(1..=16));
    cfg.channel_depth = *[1, 2, 8, 64, 512].choose(rng).unwrap();
    cfg.reg_depth = rng.gen_range(1..=8);
    if rng.gen_bool(0.2) {
        cfg.weight_cache_slabs = Some(rng.gen_range(1..=4));
    }
    cfg
}

fn random_threads(rng: &mut ChaCha8Rng) -> RuntimeOptions {
    RuntimeOptions::with_threads(*[0, 0, 0, 2, 4].choose(rng).unwrap())
}

/// Spatial size in 1..=max for which (w + 2p - k) is a non-negative multiple of s.
fn conv_extent(rng: &mut ChaCha8Rng, k: usize, s: usize, p: usize, max: usize) -> Option<usize> {
    let valid: Vec<usize> = (1..=max).filter(|&w| w + 2 * p >= k && (w + 2 * p - k).is_multiple_of(s)).collect();
    valid.choose(rng).copied()
}

fn c1_conv() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let start = Instant::now();
    let (mut worst, mut int_runs, mut int_bad, mut runs) = (0.0f64, 0, 0, 0);
    while runs < 200 {
        let k = *[1, 3, 5, 7, 11].choose(&mut rng).unwrap();
        let s = *[1, 2, 4].choose(&mut rng).unwrap();
        let p = rng.gen_range(0..=3);
        let (Some(w), Some(h)) = (conv_extent(&mut rng, k, s, p, 32), conv_extent(&mut rng, k, s, p, 32)) else {
            continue;
        };
        let mut c = rng.gen_range(1..=64);
        let mut m = rng.gen_range(1..=64);
        let groups = if rng.gen_bool(0.2) { 2 } else { 1 };
        if groups == 2 {
            c += c % 2;
            m += m % 2;
        }
        let mut layer = LayerDescriptor::conv(TensorShape { width: w, height: h, channels: c }, m, k, s, p).with_groups(groups);
        layer.relu = rng.gen_bool(0.5);
        let cg = c / groups;
        let integer = runs % 5 == 0;
        let (x, wd, b) = if integer {
            (integers(&mut rng, w * h * c, 4), integers(&mut rng, m * k * k * cg, 3), integers(&mut rng, m, 8))
        } else {
            (uniform(&mut rng, w * h * c, -1.0, 1.0), uniform(&mut rng, m * k * k * cg, -1.0, 1.0), uniform(&mut rng, m, -1.0, 1.0))
        };
        let cfg = random_cfg(&mut rng);
        let opts = random_threads(&mut rng);
        let input = FeatureMap::from_dense(layer.input_shape, &x, cfg.vec_size).unwrap();
        let weights = LayerWeights {
            weights: WeightBank::from_dense(m, k, cg, &wd, cfg.vec_size).unwrap(),
            bias: b.clone(),
        };
        let got = match execute_layer(&layer, 0, &input, &weights, &cfg, &opts) {
            Ok((out, _)) => out.to_dense(),
            Err(e) => return outcome(false, format!("config {runs} ({layer:?}) failed: {e}")),
        };
        let reference = conv_reference(&layer, &x, &wd, &b);
        if integer {
            int_runs += 1;
            if got.iter().zip(&reference.values).any(|(g, v)| *g as f64 != *v) {
                int_bad += 1;
            }
        } else {
            worst = worst.max(max_normalized_error(&got, &reference));
        }
        runs += 1;
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= CONV_TOL && int_bad == 0 && elapsed < CONV_BUDGET,
        format!(
            "{runs} configs, max rel err {worst:.2e} (tol {CONV_TOL:.0e}), integer subset {}/{int_runs} exact, {:.1} s (budget {} s)",
            int_runs - int_bad,
            elapsed.as_secs_f64(),
            CONV_BUDGET.as_secs()
        ),
    )
}

fn c2_fc() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for run in 0..50 {
        let batch = [1, 16, 64][run % 3];
        let shape = if rng.gen_bool(0.5) {
            TensorShape { width: 1, height: 1, channels: rng.gen_range(1..=4096) }
        } else {
            let side = rng.gen_range(2..=6);
            TensorShape { width: side, height: side, channels: rng.gen_range(1..=4096 / (side * side)) }
        };
        let c = shape.len();
        let m = rng.gen_range(1..=1000);
        let mut layer = LayerDescriptor::fc(shape, m);
        layer.relu = rng.gen_bool(0.5);
        let cfg = random_cfg(&mut rng);
        let opts = random_threads(&mut rng);
        let wd = uniform(&mut rng, m * c, -1.0, 1.0);
        let b = uniform(&mut rng, m, -1.0, 1.0);
        let weights = LayerWeights {
            weights: WeightBank::from_dense(m, 1, c, &wd, cfg.vec_size).unwrap(),
            bias: b.clone(),
        };
        let dense: Vec<Vec<f32>> = (0..batch).map(|_| uniform(&mut rng, c, -1.0, 1.0)).collect();
        let inputs: Vec<FeatureMap> = dense.iter().map(|d| FeatureMap::from_dense(shape, d, cfg.vec_size).unwrap()).collect();
        let outputs = match execute_layer_batch(&layer, 0, &inputs, &weights, &cfg, &opts) {
            Ok((o, _)) => o,
            Err(e) => return outcome(false, format!("run {run} ({layer:?}, batch {batch}) failed: {e}")),
        };
        for (out, x) in outputs.iter().zip(&dense) {
            worst = worst.max(max_normalized_error(&out.to_dense(), &fc_reference(x, &wd, &b, layer.relu)));
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= FC_TOL && elapsed < FC_BUDGET,
        format!(
            "50 runs, max rel err {worst:.2e} (tol {FC_TOL:.0e}), {:.1} s (budget {} s)",
            elapsed.as_secs_f64(),
            FC_BUDGET.as_secs()
        ),
    )
}

/// 1x1 identity convolution, so the pipeline output equals its input.
fn identity_layer(shape: TensorShape, pool: Option<PoolSpec>, vec: usize) -> (LayerDescriptor, LayerWeights) {
    let c = shape.channels;
    let mut layer = LayerDescriptor::conv(shape, c, 1, 1, 0);
    layer.pool = pool;
    let mut dense = vec![0.0f32; c * c];
    for i in 0..c {
        dense[i * c + i] = 1.0;
    }
    let weights = LayerWeights {
        weights: WeightBank::from_dense(c, 1, c, &dense, vec).unwrap(),
        bias: vec![0.0; c],
    };
    (layer, weights)
}

fn c3_pool() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    let mut max_bad = 0;
    let mut bypass_bad = 0;
    let mut avg_worst = 0.0f64;
    let mut counts = [0usize; 3];
    for t in 0..100 {
        let mode = [Some(PoolMode::Max), Some(PoolMode::Avg), None][t % 3];
        let window = rng.gen_range(2..=4);
        let stride = rng.gen_range(1..=window);
        let extent = |rng: &mut ChaCha8Rng| {
            let outs = rng.gen_range(1..=8);
            (outs - 1) * stride + window
        };
        let shape = TensorShape { width: extent(&mut rng), height: extent(&mut rng), channels: rng.gen_range(1..=32) };
        let x = uniform(&mut rng, shape.len(), -4.0, 4.0);
        let spec = mode.map(|mode| PoolSpec { mode, window, stride });
        let vec = *[1, 4, 8, 16].choose(&mut rng).unwrap();
        let pixels: Vec<&[f32]> = x.chunks_exact(shape.channels).collect();
        let streamed: Vec<f32> = match pool_stream(pixels, shape.width, shape.height, shape.channels, spec) {
            Ok(p) => p.concat(),
            Err(e) => return outcome(false, format!("tensor {t}: pool_stream failed: {e}")),
        };
        let (layer, w) = identity_layer(shape, spec, vec);
        let cfg = AcceleratorConfig { channel_depth: rng.gen_range(1..=16), ..AcceleratorConfig::with_dims(vec, rng.gen_range(1..=8)) };
        let input = FeatureMap::from_dense(shape, &x, vec).unwrap();
        let piped = match execute_layer(&layer, 0, &input, &w, &cfg, &random_threads(&mut rng)) {
            Ok((o, _)) => o.to_dense(),
            Err(e) => return outcome(false, format!("tensor {t}: pipeline failed: {e}")),
        };
        match spec {
            None => {
                counts[2] += 1;
                let same = |v: &[f32]| v.iter().zip(&x).all(|(a, b)| a.to_bits() == b.to_bits()) && v.len() == x.len();
                if !same(&streamed) || !same(&piped) {
                    bypass_bad += 1;
                }
            }
            Some(s) if s.mode == PoolMode::Max => {
                counts[0] += 1;
                let (_, expect) = pool_reference_f32(shape, &x, &s);
                if streamed != expect || piped != expect {
                    max_bad += 1;
                }
            }
            Some(s) => {
                counts[1] += 1;
                let exact = Reference {
                    shape,
                    values: x.iter().map(|v| *v as f64).collect(),
                    magnitudes: x.iter().map(|v| v.abs() as f64).collect(),
                };
                let r = pool_reference(&exact, &s);
                avg_worst = avg_worst.max(max_normalized_error(&streamed, &r)).max(max_normalized_error(&piped, &r));
            }
        }
    }
    outcome(
        max_bad == 0 && bypass_bad == 0 && avg_worst <= AVG_POOL_TOL,
        format!(
            "max {}/{} exact, avg max rel err {avg_worst:.2e} over {} (tol {AVG_POOL_TOL:.0e}), bypass {}/{} bit-exact",
            counts[0] - max_bad,
            counts[0],
            counts[1],
            counts[2] - bypass_bad,
            counts[2]
        ),
    )
}

/// 10^6 single-channel pixels whose squares sweep the table range log-uniformly.
fn dense_lrn_samples() -> FeatureMap {
    let n = 1_000_000;
    let x: Vec<f32> = (0..n)
        .map(|i| {
            let v = 2f64.powf(-8.0 + 16.0 * i as f64 / (n - 1) as f64) as f32;
            if i % 2 == 0 { v } else { -v }
        })
        .collect();
    FeatureMap::from_dense(TensorShape { width: 1000, height: 1000, channels: 1 }, &x, 8).unwrap()
}

fn lrn_error(input: &FeatureMap, n: u32, lrn: &LrnSpec) -> f64 {
    let table = PwlTable::for_lrn(n, lrn).unwrap();
    let got = lrn_apply(input, lrn, &table, 1).unwrap();
    max_relative_error(&got.to_dense(), &lrn_reference(input.shape(), &input.to_dense(), lrn))
}

fn c4_lrn() -> Outcome {
    let lrn = LrnSpec::default();
    let dense = dense_lrn_samples();
    let dense_err = lrn_error(&dense, 2, &lrn);
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4);
    let mut tensor_err = 0.0f64;
    for t in 0..20 {
        let shape = if t % 2 == 0 {
            TensorShape { width: 27, height: 27, channels: 96 }
        } else {
            TensorShape { width: 13, height: 13, channels: 256 }
        };
        let amp = 10f32.powf(rng.gen_range(-1.0..2.0));
        let x = uniform(&mut rng, shape.len(), -amp, amp);
        tensor_err = tensor_err.max(lrn_error(&FeatureMap::from_dense(shape, &x, 8).unwrap(), 2, &lrn));
    }
    let e1 = lrn_error(&dense, 1, &lrn);
    let e4 = lrn_error(&dense, 4, &lrn);
    outcome(
        dense_err <= LRN_TOL && tensor_err <= LRN_TOL && e4 < e1,
        format!(
            "n=2: 1e6 samples {:.4}%, 20 tensors {:.4}% (tol {:.1}%); n=1 {:.4}% > n=4 {:.4}%",
            dense_err * 100.0,
            tensor_err * 100.0,
            LRN_TOL * 100.0,
            e1 * 100.0,
            e4 * 100.0
        ),
    )
}

fn layer_counters(layer: &LayerDescriptor, inputs: &[FeatureMap], w: &LayerWeights, cfg: &AcceleratorConfig) -> pipecnn_core::movers::TrafficCounters {
    let (_, p) = execute_layer_batch(layer, 0, inputs, w, cfg, &RuntimeOptions::with_threads(0)).unwrap();
    p.total_counters()
}

fn c5_counters() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC5);
    let mut failures = Vec::new();
    let mut cases = 0;
    for case in 0..12 {
        let k = *[1, 3, 5].choose(&mut rng).unwrap();
        let groups = if case % 3 == 0 { 2 } else { 1 };
        let c = 2 * rng.gen_range(1..=12);
        let m = 2 * rng.gen_range(1..=12);
        let vec = *[1, 4, 8, 16].choose(&mut rng).unwrap();
        let widths = [rng.gen_range(k..=12), rng.gen_range(13..=24)];
        let mut weight_bytes = Vec::new();
        for &wd in &widths {
            let layer = LayerDescriptor::conv(TensorShape { width: wd, height: wd, channels: c }, m, k, 1, k / 2).with_groups(groups);
            let lw = pipecnn_core::netio::random_layer_weights(&layer, &mut rng, vec, 0.1);
            let input = random_inputs(layer.input_shape, case as u64, 1, vec);
            let mut features = Vec::new();
            for cu in [1, 3, 8, 16] {
                let cfg = AcceleratorConfig::with_dims(vec, cu);
                let t = layer_counters(&layer, &input, &lw, &cfg);
                features.push(t.feature_bytes_read);
                let expect = (m * k * k * (c / groups).div_ceil(vec) * vec * 4) as u64;
                if t.weight_bytes_read != expect {
                    failures.push(format!("case {case}: weight bytes {} != {expect}", t.weight_bytes_read));
                }
                if cu == 1 {
                    weight_bytes.push(t.weight_bytes_read);
                }
            }
            if features.iter().any(|f| *f != features[0]) {
                failures.push(format!("case {case}: feature bytes vary with cu: {features:?}"));
            }
        }
        if weight_bytes[0] != weight_bytes[1] {
            failures.push(format!("case {case}: weight bytes depend on spatial size: {weight_bytes:?}"));
        }
        cases += 1;
    }
    // FC: batch 64 reads the weights exactly as often as batch 1.
    let fc = LayerDescriptor::fc(TensorShape { width: 1, height: 1, channels: 1024 }, 100);
    let lw = pipecnn_core::netio::random_layer_weights(&fc, &mut rng, 8, 0.1);
    let cfg = AcceleratorConfig::default();
    let one = layer_counters(&fc, &random_inputs(fc.input_shape, 1, 1, 8), &lw, &cfg).weight_bytes_read;
    let many = layer_counters(&fc, &random_inputs(fc.input_shape, 1, 64, 8), &lw, &cfg).weight_bytes_read;
    if one != many {
        failures.push(format!("fc weight bytes batch 1 = {one}, batch 64 = {many}"));
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{cases} conv layers x 2 sizes x 4 cu counts; fc weight bytes batch 1 = batch 64 = {one}")
        } else {
            failures.join("; ")
        },
    )
}

fn alexnet() -> Vec<LayerDescriptor> {
    bundled_network("alexnet").expect("bundled alexnet").layers
}

fn c6_determinism() -> Outcome {
    let net = alexnet();
    let weights = random_weights(&net, 11, 8, 0.05);
    let input = random_inputs(net[0].input_shape, 12, 1, 8);
    let previous = std::env::var(THREADS_ENV).ok();
    let mut reference: Option<Vec<u32>> = None;
    let mut mismatches = Vec::new();
    let mut runs = 0;
    for depth in [1, 16, 512] {
        for threads in [0, 4, 16] {
            std::env::set_var(THREADS_ENV, threads.to_string());
            let opts = RuntimeOptions::from_env().unwrap();
            let cfg = AcceleratorConfig { channel_depth: depth, ..AcceleratorConfig::default() };
            let bits: Vec<u32> = match execute_network(&net, &weights, &input, &cfg, &opts) {
                Ok((out, _)) => out.iter().flat_map(|o| o.to_dense()).map(f32::to_bits).collect(),
                Err(e) => return outcome(false, format!("depth {depth}, threads {threads}: {e}")),
            };
            runs += 1;
            match &reference {
                None => reference = Some(bits),
                Some(r) if *r != bits => mismatches.push(format!("depth {depth} threads {threads}")),
                Some(_) => {}
            }
        }
    }
    match previous {
        Some(v) => std::env::set_var(THREADS_ENV, v),
        None => std::env::remove_var(THREADS_ENV),
    }
    outcome(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{runs} runs (depths 1/16/512 x threads 0/4/16) bit-identical")
        } else {
            format!("outputs differ for {}", mismatches.join(", "))
        },
    )
}

fn c7_sweep() -> Outcome {
    let net = alexnet();
    let points = match sweep(&net, &DeviceProfile::stratix_v_a7(), &[4, 8, 16], &[2, 4, 8, 16], 16, &AcceleratorConfig::default()) {
        Ok(p) => p,
        Err(e) => return outcome(false, format!("sweep failed: {e}")),
    };
    let winner = (points[0].cfg.vec_size, points[0].cfg.cu_num);
    let big_infeasible = points
        .iter()
        .any(|p| p.cfg.vec_size == 16 && p.cfg.cu_num == 16 && !p.feasible);
    let dsp = estimate_resources(&AcceleratorConfig::with_dims(8, 16)).dsp;
    let density = performance_density(GOPS_TARGET, dsp).map(|d| format!("{d:.2}")).unwrap_or_default();
    outcome(
        winner == (8, 16) && big_infeasible && dsp == 162 && density == "0.21",
        format!(
            "winner {winner:?}, (16,16) infeasible: {big_infeasible}, dsp(8,16) = {dsp}, density(33.9, {dsp}) = {density}"
        ),
    )
}

fn network_gops(net: &[LayerDescriptor], cfg: &AcceleratorConfig, batch: usize) -> f64 {
    estimate_network(net, cfg, &DeviceProfile::stratix_v_a7(), batch).unwrap().gops()
}

fn c8a_gops() -> Outcome {
    let net = alexnet();
    let cfg = AcceleratorConfig::default();
    let gops = network_gops(&net, &cfg, 16);
    let (lo, hi) = (GOPS_TARGET * (1.0 - GOPS_BAND), GOPS_TARGET * (1.0 + GOPS_BAND));
    let peak = 2.0 * (cfg.vec_size * cfg.cu_num) as f64 * cfg.clock_hz / cfg.ii as f64 / 1e9;
    let ii1 = network_gops(&net, &AcceleratorConfig { ii: 1, ..cfg.clone() }, 16);
    outcome(
        (lo..=hi).contains(&gops),
        format!(
            "modeled {gops:.2} GOPS at (8,16), 181 MHz, ii = 2, batch 16; band [{lo:.2}, {hi:.2}]; \
             datapath peak at ii = 2 is {peak:.2} GOPS; ii = 1 would give {ii1:.2} GOPS"
        ),
    )
}

fn c8b_plateau() -> Outcome {
    let net = alexnet();
    let time = |cu| {
        estimate_network(&net, &AcceleratorConfig::with_dims(8, cu), &DeviceProfile::stratix_v_a7(), 16)
            .unwrap()
            .time_per_image()
    };
    let (t4, t8, t16) = (time(4), time(8), time(16));
    let (s48, s816) = (t4 / t8, t8 / t16);
    outcome(
        s816 < s48,
        format!("speedup cu 4->8 = {s48:.4}, cu 8->16 = {s816:.4} at 12.8 GB/s, batch 16"),
    )
}

fn c8c_ops() -> Outcome {
    let ops = total_ops(&alexnet()) as f64 / 1e9;
    outcome((1.3..=1.6).contains(&ops), format!("AlexNet ops = {ops:.4} GOP (range 1.3-1.6)"))
}

fn check_profile(name: &str, net: &[LayerDescriptor], profile: &RunProfile) -> Result<(), String> {
    let back: RunProfile = serde_json::from_str(&profile.to_json()).map_err(|e| format!("{name}: profile json: {e}"))?;
    if back.events.len() != profile.events.len() || back.layers.len() != net.len() {
        return Err(format!("{name}: profile json lost events or layers"));
    }
    for (i, _) in net.iter().enumerate() {
        for kernel in ["memrd", "conv", "pool", "memwr"] {
            if profile.events_for(kernel, i).next().is_none() {
                return Err(format!("{name}: no {kernel} event for layer {i}"));
            }
        }
    }
    if profile.to_csv().lines().count() != profile.events.len() + 1 || profile.to_text().is_empty() {
        return Err(format!("{name}: csv/text profile malformed"));
    }
    let points = sweep(net, &DeviceProfile::stratix_v_a7(), &[4, 8, 16], &[2, 4, 8, 16], 1, &AcceleratorConfig::default())
        .map_err(|e| format!("{name}: sweep: {e}"))?;
    let csv = sweep_csv(&points);
    if csv.lines().next() != Some(SWEEP_COLUMNS.join(",").as_str()) || csv.lines().count() != 13 {
        return Err(format!("{name}: sweep table malformed"));
    }
    Ok(())
}

fn smoke(name: &str) -> Outcome {
    let net = bundled_network(name).expect("bundled network").layers;
    let weights = random_weights(&net, 5, 8, 0.05);
    let input = random_inputs(net[0].input_shape, 6, 1, 8);
    let start = Instant::now();
    let (out, profile) = match execute_network(&net, &weights, &input, &AcceleratorConfig::default(), &RuntimeOptions::with_threads(0)) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("{name}: {e}")),
    };
    let elapsed = start.elapsed();
    let finite = out[0].to_dense().iter().all(|v| v.is_finite());
    let reports = check_profile(name, &net, &profile);
    outcome(
        elapsed < SMOKE_BUDGET && finite && reports.is_ok() && out[0].shape().channels == 1000,
        format!(
            "{name}: batch 1 in {:.1} s (budget {} s), {} profile events, output finite: {finite}{}",
            elapsed.as_secs_f64(),
            SMOKE_BUDGET.as_secs(),
            profile.events.len(),
            reports.err().map(|e| format!(", {e}")).unwrap_or_default()
        ),
    )
}

fn c9a_alexnet() -> Outcome {
    smoke("alexnet")
}

fn c9b_vgg16() -> Outcome {
    smoke("vgg16")
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("C1", "conv pipeline vs nested-loop oracle", c1_conv),
        ("C2", "fc pipeline vs dense mat-vec oracle", c2_fc),
        ("C3", "pooling vs sliding-window oracle", c3_pool),
        ("C4", "LRN piecewise-linear error bound", c4_lrn),
        ("C5", "data-reuse traffic counters", c5_counters),
        ("C6", "determinism across depths and threads", c6_determinism),
        ("C7", "design-space sweep", c7_sweep),
        ("C8a", "modeled AlexNet GOPS within 30% of 33.9", c8a_gops),
        ("C8b", "cu speedup plateau under 12.8 GB/s", c8b_plateau),
        ("C8c", "AlexNet operation count", c8c_ops),
        ("C9a", "AlexNet end-to-end smoke", c9a_alexnet),
        ("C9b", "VGG-16 end-to-end smoke", c9b_vgg16),
    ];
    let mut failed = 0;
    for (id, title, run) in criteria {
        let start = Instant::now();
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {id} {title}: {} [{:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
