// SPDX-License-Identifier: Apache-2.0

//! Emulator for a pipelined OpenCL CNN accelerator.
//!
//! MemRD streams receptive fields and weights into `cu_num` vectorized
//! convolution units over bounded channels; results flow through a
//! line-buffer pooling stage into MemWR. LRN runs as a separate pass. The
//! crate also carries first-order cycle, bandwidth and resource models and a
//! design-space sweep over `(vec_size, cu_num)`.

// `!(x > 0.0)` is deliberate: NaN must fail parameter checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::too_many_arguments)]

pub mod conv;
pub mod error;
pub mod lrn;
pub mod model;
pub mod movers;
pub mod netio;
pub mod perf;
pub mod pool;
pub mod reference;
pub mod runtime;
pub mod validate;

pub use error::{Error, Result};
pub use model::{
    AcceleratorConfig, DeviceProfile, FeatureMap, LayerDescriptor, LayerWeights, LrnSpec, PoolMode, PoolSpec,
    TensorShape, WeightBank,
};
pub use runtime::{execute_layer, execute_network, RuntimeOptions};
