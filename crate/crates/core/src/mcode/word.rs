//! The 256-bit microcode word.
//!
//! Fields are packed LSB-first in the order of [`FIELDS`] and the word is
//! serialized as 32 little-endian bytes.

use std::fmt;

use super::McodeError;

/// `(name, width)` of every field, low bits first.
pub const FIELDS: [(&str, u32); 12] = [
    ("layer_type", 2),
    ("transpose_relu", 2),
    ("in_channels", 16),
    ("out_channels", 16),
    ("height", 20),
    ("width", 15),
    ("kernel", 2),
    ("stride", 1),
    ("res_op", 2),
    ("in_addr", 34),
    ("out_addr", 34),
    ("reserved", 112),
];

pub const WORD_BITS: u32 = 256;
pub const WORD_BYTES: usize = 32;
const RESERVED_START: u32 = 144;

pub const OP_NULL: u8 = 0;
pub const OP_CONV: u8 = 1;
/// Max pooling in the extraction list, sigmoid in the fusion list.
pub const OP_POOL: u8 = 2;
pub const OP_UPSAMPLE: u8 = 3;

pub const K1: u8 = 0;
pub const K3: u8 = 1;
pub const K7: u8 = 2;
pub const K2: u8 = 3;

pub const UPSAMPLE_NEAREST: u8 = 0;
pub const UPSAMPLE_BILINEAR: u8 = 1;

pub const RES_NONE: u8 = 0;
pub const RES_CACHE: u8 = 1;
pub const RES_ADD: u8 = 2;

const RELU_BIT: u8 = 1;
const TRANSPOSE_BIT: u8 = 2;

/// One decoded microcode word. Integer fields hold raw codes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct MicroOp {
    pub layer_type: u8,
    pub transpose_relu: u8,
    pub in_channels: u32,
    pub out_channels: u32,
    /// input feature map height
    pub height: u32,
    /// input feature map width
    pub width: u32,
    pub kernel_code: u8,
    pub stride_code: u8,
    pub res_op: u8,
    pub in_addr: u64,
    pub out_addr: u64,
}

impl MicroOp {
    pub fn relu(&self) -> bool {
        self.transpose_relu & RELU_BIT != 0
    }

    pub fn transpose(&self) -> bool {
        self.transpose_relu & TRANSPOSE_BIT != 0
    }

    pub fn set_relu(&mut self, on: bool) {
        self.transpose_relu = (self.transpose_relu & !RELU_BIT) | if on { RELU_BIT } else { 0 };
    }

    pub fn set_transpose(&mut self, on: bool) {
        self.transpose_relu = (self.transpose_relu & !TRANSPOSE_BIT) | if on { TRANSPOSE_BIT } else { 0 };
    }

    /// Spatial kernel size for conv and pool codes.
    pub fn kernel_size(&self) -> usize {
        match self.kernel_code {
            K1 => 1,
            K3 => 3,
            K7 => 7,
            _ => 2,
        }
    }

    pub fn stride(&self) -> usize {
        if self.stride_code == 0 {
            1
        } else {
            2
        }
    }

    fn values(&self) -> [u64; 11] {
        [
            self.layer_type as u64,
            self.transpose_relu as u64,
            self.in_channels as u64,
            self.out_channels as u64,
            self.height as u64,
            self.width as u64,
            self.kernel_code as u64,
            self.stride_code as u64,
            self.res_op as u64,
            self.in_addr,
            self.out_addr,
        ]
    }
}

/// 256 bits as little-endian bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Word256(pub [u8; WORD_BYTES]);

impl Word256 {
    pub const ZERO: Word256 = Word256([0; WORD_BYTES]);

    pub fn as_bytes(&self) -> &[u8; WORD_BYTES] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 2 * WORD_BYTES || !s.is_ascii() {
            return None;
        }
        let mut out = [0u8; WORD_BYTES];
        for (i, b) in out.iter_mut().enumerate() {
            *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
        }
        Some(Word256(out))
    }

    fn get(&self, pos: u32, width: u32) -> u64 {
        let mut v = 0u64;
        for i in 0..width {
            let bit = pos + i;
            if self.0[(bit / 8) as usize] >> (bit % 8) & 1 == 1 {
                v |= 1 << i;
            }
        }
        v
    }

    fn put(&mut self, pos: u32, width: u32, v: u64) {
        for i in 0..width {
            if v >> i & 1 == 1 {
                let bit = pos + i;
                self.0[(bit / 8) as usize] |= 1 << (bit % 8);
            }
        }
    }
}

impl fmt::Debug for Word256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Word256({})", self.to_hex())
    }
}

pub fn encode(op: &MicroOp) -> Result<Word256, McodeError> {
    let mut w = Word256::ZERO;
    let mut pos = 0;
    for ((name, width), v) in FIELDS.iter().zip(op.values()) {
        if v >> width != 0 {
            return Err(McodeError::Range {
                field: name,
                value: v,
                bits: *width,
            });
        }
        w.put(pos, *width, v);
        pos += width;
    }
    Ok(w)
}

pub fn decode(word: &Word256) -> Result<MicroOp, McodeError> {
    if (RESERVED_START..WORD_BITS).step_by(64).any(|p| word.get(p, 64.min(WORD_BITS - p)) != 0) {
        return Err(McodeError::Decode("reserved bits are not zero".into()));
    }
    let mut v = [0u64; 11];
    let mut pos = 0;
    for (slot, (_, width)) in v.iter_mut().zip(FIELDS.iter()) {
        *slot = word.get(pos, *width);
        pos += width;
    }
    let op = MicroOp {
        layer_type: v[0] as u8,
        transpose_relu: v[1] as u8,
        in_channels: v[2] as u32,
        out_channels: v[3] as u32,
        height: v[4] as u32,
        width: v[5] as u32,
        kernel_code: v[6] as u8,
        stride_code: v[7] as u8,
        res_op: v[8] as u8,
        in_addr: v[9],
        out_addr: v[10],
    };
    check_codes(&op)?;
    Ok(op)
}

/// Rejects enum codes with no meaning for the op's layer type.
pub fn check_codes(op: &MicroOp) -> Result<(), McodeError> {
    if op.res_op > RES_ADD {
        return Err(McodeError::Decode(format!("illegal res_op code {}", op.res_op)));
    }
    let ok = match op.layer_type {
        OP_CONV => op.kernel_code != K2,
        // opcode 2 is sigmoid in the fusion list, which ignores the kernel
        OP_POOL => true,
        OP_UPSAMPLE => matches!(op.kernel_code, UPSAMPLE_NEAREST | UPSAMPLE_BILINEAR),
        _ => true,
    };
    if !ok {
        return Err(McodeError::Decode(format!(
            "illegal kernel code {} for layer type {}",
            op.kernel_code, op.layer_type
        )));
    }
    Ok(())
}
