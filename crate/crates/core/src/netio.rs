// SPDX-License-Identifier: Apache-2.0

//! Network definitions, tensor files and seeded initialization.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{validate_network, AcceleratorConfig, FeatureMap, LayerDescriptor, LayerWeights, TensorShape, WeightBank};

const ALEXNET: &str = include_str!("../networks/alexnet.json");
const VGG16: &str = include_str!("../networks/vgg16.json");

pub const BUNDLED: [&str; 2] = ["alexnet", "vgg16"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub name: String,
    pub layers: Vec<LayerDescriptor>,
    /// Accelerator settings the network prefers; missing keys keep defaults.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<AcceleratorConfig>,
}

impl NetworkFile {
    pub fn config(&self) -> AcceleratorConfig {
        self.config.clone().unwrap_or_default()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serializes")
    }
}

pub fn parse_network(text: &str) -> Result<NetworkFile> {
    let net: NetworkFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    validate_network(&net.layers).map_err(Error::Validation)?;
    Ok(net)
}

pub fn load_network(path: impl AsRef<Path>) -> Result<NetworkFile> {
    parse_network(&std::fs::read_to_string(path)?)
}

pub fn bundled_network(name: &str) -> Option<NetworkFile> {
    let text = match name {
        "alexnet" => ALEXNET,
        "vgg16" => VGG16,
        _ => return None,
    };
    Some(parse_network(text).expect("bundled networks are valid"))
}

/// A bundled name, or else a path to a network file.
pub fn resolve_network(name_or_path: &str) -> Result<NetworkFile> {
    match bundled_network(name_or_path) {
        Some(n) => Ok(n),
        None => load_network(name_or_path),
    }
}

const MAGIC: &[u8; 8] = b"PCNNTNSR";
const KIND_F32: &[u8] = b"f32";
const MAGIC_LEN: usize = 16;

/// Dense row-major f32 tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::DimMismatch(format!(
                "dims {dims:?} hold {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    /// `[H, W, C]`.
    pub fn from_feature_map(map: &FeatureMap) -> Self {
        let s = map.shape();
        Self {
            dims: vec![s.height, s.width, s.channels],
            data: map.to_dense(),
        }
    }

    pub fn to_feature_map(&self, vec_size: usize) -> Result<FeatureMap> {
        let [h, w, c] = self.dims[..] else {
            return Err(Error::DimMismatch(format!("expected [H, W, C], got {:?}", self.dims)));
        };
        FeatureMap::from_dense(TensorShape::new(w, h, c)?, &self.data, vec_size)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MAGIC_LEN + 4 + 4 * self.dims.len() + 4 * self.data.len());
        let mut magic = [0u8; MAGIC_LEN];
        magic[..8].copy_from_slice(MAGIC);
        magic[8..8 + KIND_F32.len()].copy_from_slice(KIND_F32);
        out.extend_from_slice(&magic);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < MAGIC_LEN + 4 {
            return Err(Error::ShortRead {
                expected: MAGIC_LEN + 4,
                actual: bytes.len(),
            });
        }
        let kind = &bytes[8..MAGIC_LEN];
        let kind_len = kind.iter().position(|b| *b == 0).unwrap_or(kind.len());
        if &kind[..kind_len] != KIND_F32 || kind[kind_len..].iter().any(|b| *b != 0) {
            return Err(Error::UnsupportedKind(String::from_utf8_lossy(&kind[..kind_len]).into_owned()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let rank = word(MAGIC_LEN) as usize;
        let header = MAGIC_LEN + 4 + 4 * rank;
        if bytes.len() < header {
            return Err(Error::ShortRead {
                expected: header,
                actual: bytes.len(),
            });
        }
        let dims: Vec<usize> = (0..rank).map(|i| word(MAGIC_LEN + 4 + 4 * i) as usize).collect();
        let count = dims
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| Error::DimMismatch(format!("dims {dims:?} overflow")))?;
        let expected = header + 4 * count;
        if bytes.len() < expected {
            return Err(Error::ShortRead {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::DimMismatch(format!(
                "{} trailing bytes after a {dims:?} payload",
                bytes.len() - expected
            )));
        }
        let data = bytes[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { dims, data })
    }
}

pub fn save_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    std::fs::write(path, tensor.to_bytes())?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    Tensor::from_bytes(&std::fs::read(path)?)
}

/// Weight tensor is `[M, K, K, C/groups]`, bias is `[M]`.
pub fn layer_weights_from_tensors(layer: &LayerDescriptor, index: usize, w: &Tensor, b: &Tensor, vec_size: usize) -> Result<LayerWeights> {
    let k = if layer.is_fc() { 1 } else { layer.kernel };
    let want = vec![layer.output_maps, k, k, layer.group_channels()];
    if w.dims != want {
        return Err(Error::DimMismatch(format!("layer {index} weights are {:?}, expected {want:?}", w.dims)));
    }
    if b.dims != [layer.output_maps] {
        return Err(Error::DimMismatch(format!(
            "layer {index} bias is {:?}, expected [{}]",
            b.dims, layer.output_maps
        )));
    }
    Ok(LayerWeights {
        weights: WeightBank::from_dense(layer.output_maps, k, layer.group_channels(), &w.data, vec_size)?,
        bias: b.data.clone(),
    })
}

pub fn weight_file_names(index: usize) -> (String, String) {
    (format!("layer{index}_w.pcnt"), format!("layer{index}_b.pcnt"))
}

/// Reads `layer{i}_w.pcnt` / `layer{i}_b.pcnt` for every layer from `dir`.
pub fn load_weights(dir: impl AsRef<Path>, net: &[LayerDescriptor], vec_size: usize) -> Result<Vec<LayerWeights>> {
    net.iter()
        .enumerate()
        .map(|(i, layer)| {
            let (wn, bn) = weight_file_names(i);
            let w = load_tensor(dir.as_ref().join(wn))?;
            let b = load_tensor(dir.as_ref().join(bn))?;
            layer_weights_from_tensors(layer, i, &w, &b, vec_size)
        })
        .collect()
}

pub fn save_weights(dir: impl AsRef<Path>, net: &[LayerDescriptor], weights: &[LayerWeights]) -> Result<()> {
    for (i, (layer, w)) in net.iter().zip(weights).enumerate() {
        let k = if layer.is_fc() { 1 } else { layer.kernel };
        let (wn, bn) = weight_file_names(i);
        save_tensor(
            dir.as_ref().join(wn),
            &Tensor::new(vec![layer.output_maps, k, k, layer.group_channels()], w.weights.to_dense())?,
        )?;
        save_tensor(dir.as_ref().join(bn), &Tensor::new(vec![layer.output_maps], w.bias.clone())?)?;
    }
    Ok(())
}

/// Uniform in `±sqrt(6 / fan_in)`; biases uniform in `±bias_scale`.
pub fn random_layer_weights(layer: &LayerDescriptor, rng: &mut ChaCha8Rng, vec_size: usize, bias_scale: f32) -> LayerWeights {
    let k = if layer.is_fc() { 1 } else { layer.kernel };
    let cg = layer.group_channels();
    let fan_in = (k * k * cg) as f32;
    let limit = (6.0 / fan_in).sqrt();
    let dense: Vec<f32> = (0..layer.output_maps * k * k * cg).map(|_| rng.gen_range(-limit..=limit)).collect();
    let bias = (0..layer.output_maps)
        .map(|_| if bias_scale > 0.0 { rng.gen_range(-bias_scale..=bias_scale) } else { 0.0 })
        .collect();
    LayerWeights {
        weights: WeightBank::from_dense(layer.output_maps, k, cg, &dense, vec_size).expect("dims match"),
        bias,
    }
}

pub fn random_weights(net: &[LayerDescriptor], seed: u64, vec_size: usize, bias_scale: f32) -> Vec<LayerWeights> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.iter()
        .map(|l| random_layer_weights(l, &mut rng, vec_size, bias_scale))
        .collect()
}

/// Uniform in `[-1, 1]`, one independent stream per image.
pub fn random_inputs(shape: TensorShape, seed: u64, batch: usize, vec_size: usize) -> Vec<FeatureMap> {
    (0..batch)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1));
            let dense: Vec<f32> = (0..shape.len()).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
            FeatureMap::from_dense(shape, &dense, vec_size).expect("shape matches")
        })
        .collect()
}
