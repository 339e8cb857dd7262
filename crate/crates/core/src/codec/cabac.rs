//! Binary arithmetic coder with table-driven adaptive contexts.
//!
//! The engine is the classic 9-bit-range "M coder": 64 probability states per
//! context, a 64x4 LPS range table indexed by state and two range bits, and
//! fixed state-transition tables. Adaptation is a pure function of the bin
//! sequence, so streams are bit-identical across platforms.
//!
//! The encoder emits exactly as many bits as the decoder consumes, ending with
//! a terminating `1` bit; the payload is that bit string zero-padded to a byte.

/// LPS sub-range for each (state, (range >> 6) & 3).
const RANGE_LPS: [[u8; 4]; 64] = [
    [128, 176, 208, 240],
    [128, 167, 197, 227],
    [128, 158, 187, 216],
    [123, 150, 178, 205],
    [116, 142, 169, 195],
    [111, 135, 160, 185],
    [105, 128, 152, 175],
    [100, 122, 144, 166],
    [95, 116, 137, 158],
    [90, 110, 130, 150],
    [85, 104, 123, 142],
    [81, 99, 117, 135],
    [77, 94, 111, 128],
    [73, 89, 105, 122],
    [69, 85, 100, 116],
    [66, 80, 95, 110],
    [62, 76, 90, 104],
    [59, 72, 86, 99],
    [56, 69, 81, 94],
    [53, 65, 77, 89],
    [51, 62, 73, 85],
    [48, 59, 69, 80],
    [46, 56, 66, 76],
    [43, 53, 63, 72],
    [41, 50, 59, 69],
    [39, 48, 56, 65],
    [37, 45, 54, 62],
    [35, 43, 51, 59],
    [33, 41, 48, 56],
    [32, 39, 46, 53],
    [30, 37, 43, 50],
    [29, 35, 41, 48],
    [27, 33, 39, 45],
    [26, 31, 37, 43],
    [24, 30, 35, 41],
    [23, 28, 33, 39],
    [22, 27, 32, 37],
    [21, 26, 30, 35],
    [20, 24, 29, 33],
    [19, 23, 27, 31],
    [18, 22, 26, 30],
    [17, 21, 25, 28],
    [16, 20, 23, 27],
    [15, 19, 22, 25],
    [14, 18, 21, 24],
    [14, 17, 20, 23],
    [13, 16, 19, 22],
    [12, 15, 18, 21],
    [12, 14, 17, 20],
    [11, 14, 16, 19],
    [11, 13, 15, 18],
    [10, 12, 15, 17],
    [10, 12, 14, 16],
    [9, 11, 13, 15],
    [9, 11, 12, 14],
    [8, 10, 12, 14],
    [8, 9, 11, 13],
    [7, 9, 11, 12],
    [7, 9, 10, 12],
    [7, 8, 10, 11],
    [6, 8, 9, 11],
    [6, 7, 9, 10],
    [6, 7, 8, 9],
    [2, 2, 2, 2],
];

/// Next state after coding the least probable symbol.
const NEXT_LPS: [u8; 64] = [
    0, 0, 1, 2, 2, 4, 4, 5, 6, 7, 8, 9, 9, 11, 11, 12, 13, 13, 15, 15, 16, 16, 18, 18, 19, 19, 21,
    21, 22, 22, 23, 24, 24, 25, 26, 26, 27, 27, 28, 29, 29, 30, 30, 30, 31, 32, 32, 33, 33, 33, 34,
    34, 35, 35, 35, 36, 36, 36, 37, 37, 37, 38, 38, 63,
];

/// Adaptive probability estimate for one binary decision.
///
/// `state` 0 means p(LPS) = 0.5; each step up shrinks p(LPS) by a factor of
/// about 0.95, down to ~0.019 at state 62. State 63 is never reached.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BinContext {
    state: u8,
    mps: bool,
}

impl BinContext {
    #[inline]
    fn on_mps(&mut self) {
        if self.state < 62 {
            self.state += 1;
        }
    }

    #[inline]
    fn on_lps(&mut self) {
        if self.state == 0 {
            self.mps = !self.mps;
        }
        self.state = NEXT_LPS[self.state as usize];
    }

    /// Current probability that the next bin is `1`.
    pub fn p_one(&self) -> f64 {
        // p(LPS) for state s is 0.5 * alpha^s with alpha = (0.01875 / 0.5)^(1/63).
        let alpha = (0.01875f64 / 0.5).powf(1.0 / 63.0);
        let p_lps = 0.5 * alpha.powi(self.state as i32);
        if self.mps {
            1.0 - p_lps
        } else {
            p_lps
        }
    }
}

/// Destination for encoder output bits.
pub(crate) trait BitSink {
    fn put(&mut self, bit: bool);
    fn bits_written(&self) -> u64;
}

/// Collects bits MSB-first into bytes.
#[derive(Default)]
pub(crate) struct BitWriter {
    bytes: Vec<u8>,
    acc: u8,
    nbits: u8,
    total: u64,
}

impl BitWriter {
    pub fn into_bytes(mut self) -> Vec<u8> {
        if self.nbits > 0 {
            self.bytes.push(self.acc << (8 - self.nbits));
        }
        self.bytes
    }
}

impl BitSink for BitWriter {
    #[inline]
    fn put(&mut self, bit: bool) {
        self.acc = (self.acc << 1) | bit as u8;
        self.nbits += 1;
        self.total += 1;
        if self.nbits == 8 {
            self.bytes.push(self.acc);
            self.acc = 0;
            self.nbits = 0;
        }
    }

    fn bits_written(&self) -> u64 {
        self.total
    }
}

/// Counts bits without storing them.
#[derive(Default)]
pub(crate) struct BitCounter(u64);

impl BitSink for BitCounter {
    #[inline]
    fn put(&mut self, _bit: bool) {
        self.0 += 1;
    }

    fn bits_written(&self) -> u64 {
        self.0
    }
}

pub(crate) struct ArithEncoder<S: BitSink> {
    sink: S,
    low: u32,
    range: u32,
    first_bit: bool,
    outstanding: u64,
}

impl<S: BitSink> ArithEncoder<S> {
    pub fn new(sink: S) -> Self {
        ArithEncoder {
            sink,
            low: 0,
            range: 510,
            first_bit: true,
            outstanding: 0,
        }
    }

    #[inline]
    fn put_bit(&mut self, bit: bool) {
        if self.first_bit {
            self.first_bit = false;
        } else {
            self.sink.put(bit);
        }
        while self.outstanding > 0 {
            self.sink.put(!bit);
            self.outstanding -= 1;
        }
    }

    #[inline]
    fn renorm(&mut self) {
        while self.range < 256 {
            if self.low < 256 {
                self.put_bit(false);
            } else if self.low >= 512 {
                self.low -= 512;
                self.put_bit(true);
            } else {
                self.low -= 256;
                self.outstanding += 1;
            }
            self.range <<= 1;
            self.low <<= 1;
        }
    }

    #[inline]
    pub fn encode(&mut self, ctx: &mut BinContext, bin: bool) {
        let lps = RANGE_LPS[ctx.state as usize][((self.range >> 6) & 3) as usize] as u32;
        self.range -= lps;
        if bin != ctx.mps {
            self.low += self.range;
            self.range = lps;
            ctx.on_lps();
        } else {
            ctx.on_mps();
        }
        self.renorm();
    }

    #[inline]
    pub fn encode_bypass(&mut self, bin: bool) {
        self.low <<= 1;
        if bin {
            self.low += self.range;
        }
        if self.low >= 1024 {
            self.put_bit(true);
            self.low -= 1024;
        } else if self.low < 512 {
            self.put_bit(false);
        } else {
            self.low -= 512;
            self.outstanding += 1;
        }
    }

    /// Codes the end-of-stream marker and flushes. Returns the sink.
    pub fn finish(mut self) -> S {
        self.range -= 2;
        self.low += self.range;
        self.range = 2;
        self.renorm();
        self.put_bit((self.low >> 9) & 1 == 1);
        self.sink.put((self.low >> 8) & 1 == 1);
        self.sink.put(true);
        self.sink
    }
}

pub(crate) struct ArithDecoder<'a> {
    bytes: &'a [u8],
    bitpos: u64,
    nbits: u64,
    range: u32,
    offset: u32,
    overrun: bool,
}

impl<'a> ArithDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        let mut d = ArithDecoder {
            bytes,
            bitpos: 0,
            nbits: bytes.len() as u64 * 8,
            range: 510,
            offset: 0,
            overrun: false,
        };
        for _ in 0..9 {
            d.offset = (d.offset << 1) | d.read_bit();
        }
        d
    }

    #[inline]
    fn read_bit(&mut self) -> u32 {
        if self.bitpos >= self.nbits {
            self.overrun = true;
            return 0;
        }
        let byte = self.bytes[(self.bitpos >> 3) as usize];
        let bit = (byte >> (7 - (self.bitpos & 7))) & 1;
        self.bitpos += 1;
        bit as u32
    }

    /// True once the decoder has needed a bit beyond the end of the input.
    pub fn overrun(&self) -> bool {
        self.overrun
    }

    #[inline]
    pub fn decode(&mut self, ctx: &mut BinContext) -> bool {
        let lps = RANGE_LPS[ctx.state as usize][((self.range >> 6) & 3) as usize] as u32;
        self.range -= lps;
        let bin;
        if self.offset >= self.range {
            bin = !ctx.mps;
            self.offset -= self.range;
            self.range = lps;
            ctx.on_lps();
        } else {
            bin = ctx.mps;
            ctx.on_mps();
        }
        while self.range < 256 {
            self.range <<= 1;
            self.offset = (self.offset << 1) | self.read_bit();
        }
        bin
    }

    #[inline]
    pub fn decode_bypass(&mut self) -> bool {
        self.offset = (self.offset << 1) | self.read_bit();
        if self.offset >= self.range {
            self.offset -= self.range;
            true
        } else {
            false
        }
    }

    /// Decodes the end-of-stream marker. Returns whether it was present and
    /// every remaining input bit is zero padding within the final byte.
    pub fn finish(mut self) -> bool {
        self.range -= 2;
        if self.offset < self.range {
            return false;
        }
        let rest = self.nbits - self.bitpos;
        if self.overrun || rest >= 8 {
            return false;
        }
        (0..rest).all(|_| self.read_bit() == 0)
    }
}
