//! Progressive delivery of quantized neural-network models.
//!
//! A server holds float models. A client first downloads a low-bitwidth
//! version (4, 8 or 16 bits) and can run inference as soon as it is decoded.
//! It then downloads a precision update, the quantized difference between the
//! server's 32-bit reference and the low-precision weights, and adds it to
//! get a proxy of the reference model.
//!
//! - [`model`] and [`store`]: float and quantized models, the `P2UM` file format.
//! - [`quant`]: per-tensor symmetric uniform quantization.
//! - [`update`]: computing, applying and sizing precision updates.
//! - [`codec`]: the `P2UB` bitstream, an adaptive binary arithmetic coder.
//! - [`proto`]: TCP server, client session and wire format.
//! - [`channel`]: modelled transfer time and per-delivery reports.
//! - [`evalnet`]: a small MLP engine for measuring fidelity.
//! - [`bench`], [`report`], [`cli`]: the `p2u` command-line tool.
//!
//! ```
//! use p2u::codec::encode;
//! use p2u::model::{Bitwidth, Tensor, TensorModel};
//! use p2u::quant::{dequantize, quantize};
//! use p2u::update::{apply_update, compute_update};
//!
//! let w = Tensor::new("w", vec![4], vec![0.9, -0.31, 0.05, 0.42]).unwrap();
//! let high = TensorModel::new("m", vec![w]).unwrap();
//!
//! let base = encode(&quantize(&high, Bitwidth::B4));
//! let low = dequantize(&quantize(&high, Bitwidth::B4));
//! let update = compute_update(&high, &low, Bitwidth::B32, Bitwidth::B4, base.checksum()).unwrap();
//! let proxy = apply_update(&low, &base.checksum(), &update).unwrap();
//!
//! let gap = p2u::model::model_delta_norms(&proxy, &high).unwrap().global_max_abs;
//! assert!(gap < 1e-7);
//! ```

pub mod bench;
pub mod channel;
pub mod checksum;
pub mod cli;
pub mod codec;
pub mod evalnet;
pub mod model;
pub mod proto;
pub mod quant;
pub mod report;
pub mod store;
pub mod synth;
pub mod update;

mod bytes;
