// SPDX-License-Identifier: Apache-2.0

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pipecnn_core::conv::{run_conv_layer, run_fc_batch};
use pipecnn_core::netio::{
    bundled_network, load_weights, random_inputs, random_layer_weights, random_weights, save_weights,
};
use pipecnn_core::runtime::execute_layer_batch;
use pipecnn_core::{
    execute_layer, execute_network, AcceleratorConfig, Error, LayerDescriptor, LrnSpec, PoolMode, RuntimeOptions,
    TensorShape,
};

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn shape(width: usize, height: usize, channels: usize) -> TensorShape {
    TensorShape {
        width,
        height,
        channels,
    }
}

#[test]
fn pipeline_matches_sequential_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layer = LayerDescriptor::conv(shape(15, 11, 21), 13, 3, 2, 1).with_relu();
    for (vec, cu) in [(1, 1), (4, 3), (8, 16), (16, 5)] {
        let cfg = AcceleratorConfig {
            channel_depth: 2,
            ..AcceleratorConfig::with_dims(vec, cu)
        };
        let w = random_layer_weights(&layer, &mut rng, vec, 0.5);
        let x = random_inputs(layer.input_shape, 9, 1, vec).remove(0);
        let (seq, seq_traffic) = run_conv_layer(&layer, &x, &w.weights, &w.bias, &cfg).unwrap();
        for threads in [0, 3] {
            let (piped, profile) = execute_layer(&layer, 0, &x, &w, &cfg, &RuntimeOptions::with_threads(threads)).unwrap();
            assert_eq!(bits(&piped.to_dense()), bits(&seq.to_dense()), "vec {vec} cu {cu} threads {threads}");
            assert_eq!(profile.total_counters(), seq_traffic);
        }
    }
}

#[test]
fn pipeline_matches_sequential_fc_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layer = LayerDescriptor::fc(shape(3, 3, 40), 77);
    let cfg = AcceleratorConfig::with_dims(8, 6);
    let w = random_layer_weights(&layer, &mut rng, 8, 0.5);
    let xs = random_inputs(layer.input_shape, 10, 16, 8);
    let (seq, _) = run_fc_batch(&layer, &xs, &w.weights, &w.bias, &cfg).unwrap();
    let (piped, profile) = execute_layer_batch(&layer, 0, &xs, &w, &cfg, &RuntimeOptions::with_threads(2)).unwrap();
    assert_eq!(piped.len(), 16);
    for (a, b) in piped.iter().zip(&seq) {
        assert_eq!(bits(&a.to_dense()), bits(&b.to_dense()));
    }
    // One launch for the whole batch.
    assert_eq!(profile.events_for("memrd", 0).count(), 1);
}

#[test]
fn pooled_layer_with_lrn_runs_through_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layer = LayerDescriptor::conv(shape(13, 13, 8), 12, 3, 1, 0)
        .with_relu()
        .with_pool(PoolMode::Max, 3, 2)
        .with_lrn(LrnSpec::default());
    let cfg = AcceleratorConfig::with_dims(4, 4);
    let w = random_layer_weights(&layer, &mut rng, 4, 0.1);
    let x = random_inputs(layer.input_shape, 1, 1, 4).remove(0);
    let (out, profile) = execute_layer(&layer, 0, &x, &w, &cfg, &RuntimeOptions::default()).unwrap();
    assert_eq!(out.shape(), shape(5, 5, 12));
    assert_eq!(profile.events_for("lrn", 0).count(), 1);
    let rec = &profile.layers[0];
    // Two line buffers of 11 pixels plus the 3x3 window, one lane per CU.
    assert_eq!(rec.line_buffer_elements, (2 * 11 + 9) * 4);
    assert!(rec.channels.iter().any(|c| c.name == "features" && c.pushes > 0));
}

#[test]
fn fc_layers_launch_once_per_batch_in_network() {
    let net = vec![
        LayerDescriptor::conv(shape(8, 8, 3), 4, 3, 1, 1).with_relu(),
        LayerDescriptor::fc(shape(8, 8, 4), 10).with_relu(),
        LayerDescriptor::fc(shape(1, 1, 10), 5),
    ];
    let w = random_weights(&net, 2, 8, 0.1);
    let xs = random_inputs(net[0].input_shape, 3, 16, 8);
    let (out, profile) = execute_network(&net, &w, &xs, &AcceleratorConfig::default(), &RuntimeOptions::default()).unwrap();
    assert_eq!(out.len(), 16);
    assert_eq!(profile.events_for("memrd", 0).count(), 16);
    assert_eq!(profile.events_for("memrd", 1).count(), 1);
    assert_eq!(profile.events_for("memrd", 2).count(), 1);
    // The modeled timeline is monotone in layer order.
    let ends: Vec<f64> = (0..3)
        .map(|l| profile.events_for("memwr", l).map(|e| e.modeled_end_s).fold(0.0, f64::max))
        .collect();
    assert!(ends.windows(2).all(|p| p[0] <= p[1]), "{ends:?}");
}

#[test]
fn network_rejects_mismatched_weights() {
    let net = bundled_network("alexnet").unwrap().layers;
    let mut w = random_weights(&net, 1, 8, 0.0);
    w.swap(2, 3);
    let x = random_inputs(net[0].input_shape, 1, 1, 8);
    let err = execute_network(&net, &w, &x, &AcceleratorConfig::default(), &RuntimeOptions::default()).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { layer: 2, .. }), "{err}");
}

#[test]
fn saved_weights_reproduce_run() {
    let net = vec![
        LayerDescriptor::conv(shape(9, 9, 5), 6, 3, 1, 0).with_relu(),
        LayerDescriptor::fc(shape(7, 7, 6), 4),
    ];
    let w = random_weights(&net, 8, 4, 0.2);
    let dir = std::env::temp_dir().join(format!("pipecnn-weights-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    save_weights(&dir, &net, &w).unwrap();
    let loaded = load_weights(&dir, &net, 16).unwrap();
    std::fs::remove_dir_all(&dir).unwrap();
    let x = random_inputs(net[0].input_shape, 2, 2, 4);
    let run = |w| {
        let (o, _) = execute_network(&net, w, &x, &AcceleratorConfig::with_dims(4, 2), &RuntimeOptions::default()).unwrap();
        o.iter().flat_map(|m| bits(&m.to_dense())).collect::<Vec<_>>()
    };
    assert_eq!(run(&w), run(&loaded));
}

#[test]
fn invalid_config_is_rejected_before_running() {
    let layer = LayerDescriptor::conv(shape(4, 4, 2), 2, 3, 1, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = random_layer_weights(&layer, &mut rng, 8, 0.0);
    let x = random_inputs(layer.input_shape, 0, 1, 8).remove(0);
    let cfg = AcceleratorConfig {
        vec_size: 3,
        ..AcceleratorConfig::default()
    };
    let err = execute_layer(&layer, 0, &x, &w, &cfg, &RuntimeOptions::default()).unwrap_err();
    assert!(matches!(err, Error::InvalidConfig(_)), "{err}");
}
