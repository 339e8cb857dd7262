//! Binarization of signed integer codes and the context set that models them.
//!
//! Each code `q` is coded as:
//!
//! 1. significance flag `q != 0`, context chosen by how many of the two
//!    previous codes in the tensor were non-zero (3 contexts);
//! 2. sign flag, context chosen by the sign of the previous code (3 contexts);
//! 3. exponent `k = floor(log2 |q|)` as a fixed-depth binary tree, MSB first,
//!    one context per tree node (depth 2/3/4/5 for 4/8/16/32-bit codes);
//! 4. remainder `|q| - 2^k` in `k` bits: the leading bit with one context per
//!    exponent, the rest as bypass bins.

use super::cabac::{ArithDecoder, ArithEncoder, BinContext, BitSink};
use crate::model::Bitwidth;

/// All adaptive state used by one stream.
#[derive(Clone, Debug, Default)]
pub struct ContextModel {
    sig: [BinContext; 3],
    sign: [BinContext; 3],
    exponent: [BinContext; 32],
    remainder_msb: [BinContext; 32],
}

/// Depth of the exponent tree: enough bits for exponents `0..=bits-2`.
fn exponent_depth(bitwidth: Bitwidth) -> u32 {
    match bitwidth {
        Bitwidth::B4 => 2,
        Bitwidth::B8 => 3,
        Bitwidth::B16 => 4,
        Bitwidth::B32 => 5,
    }
}

/// Neighbourhood of the code being coded: the previous two codes in the
/// same tensor (zero at the tensor start).
#[derive(Clone, Copy, Default)]
struct History {
    prev1: i32,
    prev2: i32,
}

impl History {
    fn sig_ctx(self) -> usize {
        (self.prev1 != 0) as usize + (self.prev2 != 0) as usize
    }

    fn sign_ctx(self) -> usize {
        match self.prev1.signum() {
            0 => 0,
            1 => 1,
            _ => 2,
        }
    }

    fn push(&mut self, q: i32) {
        self.prev2 = self.prev1;
        self.prev1 = q;
    }
}

/// Encodes one tensor's codes. Contexts carry over between tensors; the
/// neighbourhood history does not.
pub(crate) fn encode_codes<S: BitSink>(
    enc: &mut ArithEncoder<S>,
    ctx: &mut ContextModel,
    bitwidth: Bitwidth,
    codes: &[i32],
) {
    let depth = exponent_depth(bitwidth);
    let mut hist = History::default();
    for &q in codes {
        enc.encode(&mut ctx.sig[hist.sig_ctx()], q != 0);
        if q != 0 {
            enc.encode(&mut ctx.sign[hist.sign_ctx()], q < 0);
            let mag = q.unsigned_abs();
            let k = 31 - mag.leading_zeros();
            let mut node = 1usize;
            for i in (0..depth).rev() {
                let bit = (k >> i) & 1 == 1;
                enc.encode(&mut ctx.exponent[node], bit);
                node = 2 * node + bit as usize;
            }
            if k > 0 {
                let rem = mag - (1 << k);
                enc.encode(&mut ctx.remainder_msb[k as usize], (rem >> (k - 1)) & 1 == 1);
                for i in (0..k - 1).rev() {
                    enc.encode_bypass((rem >> i) & 1 == 1);
                }
            }
        }
        hist.push(q);
    }
}

/// A decoded magnitude that no valid encoder could have produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct InvalidCode;

pub(crate) fn decode_codes(
    dec: &mut ArithDecoder<'_>,
    ctx: &mut ContextModel,
    bitwidth: Bitwidth,
    out: &mut Vec<i32>,
    count: usize,
) -> Result<(), InvalidCode> {
    let depth = exponent_depth(bitwidth);
    let max_exp = bitwidth.bits() - 2;
    let qmax = bitwidth.qmax() as u32;
    let mut hist = History::default();
    out.reserve(count);
    for _ in 0..count {
        let mut q = 0i32;
        if dec.decode(&mut ctx.sig[hist.sig_ctx()]) {
            let negative = dec.decode(&mut ctx.sign[hist.sign_ctx()]);
            let mut node = 1usize;
            for _ in 0..depth {
                let bit = dec.decode(&mut ctx.exponent[node]);
                node = 2 * node + bit as usize;
            }
            let k = (node - (1 << depth)) as u32;
            if k > max_exp {
                return Err(InvalidCode);
            }
            let mut mag: u32 = 1;
            if k > 0 {
                mag = (mag << 1) | dec.decode(&mut ctx.remainder_msb[k as usize]) as u32;
                for _ in 0..k - 1 {
                    mag = (mag << 1) | dec.decode_bypass() as u32;
                }
            }
            if mag > qmax {
                return Err(InvalidCode);
            }
            q = if negative { -(mag as i32) } else { mag as i32 };
        }
        out.push(q);
        hist.push(q);
        if dec.overrun() {
            // Stop early; the caller reports exhaustion.
            return Ok(());
        }
    }
    Ok(())
}
