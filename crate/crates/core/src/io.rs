//! `TNSR` tensor files: magic, dtype code (0 = binary16, 1 = fp32),
//! `C, H, W` as u32, then the little-endian payload.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use half::f16;

use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TNSR";
const DTYPE_HALF: u32 = 0;
const DTYPE_F32: u32 = 1;

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn write_half(t: &Tensor<f16>, mut w: impl Write) -> io::Result<()> {
    header(&mut w, DTYPE_HALF, t.shape())?;
    w.write_all(&t.to_le_bytes())
}

pub fn write_f32(t: &Tensor<f32>, mut w: impl Write) -> io::Result<()> {
    header(&mut w, DTYPE_F32, t.shape())?;
    for &v in t.data() {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn header(w: &mut impl Write, dtype: u32, (c, h, wd): (usize, usize, usize)) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(dtype)?;
    for d in [c, h, wd] {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    Ok(())
}

pub fn half_to_bytes(t: &Tensor<f16>) -> Vec<u8> {
    let mut out = Vec::new();
    write_half(t, &mut out).expect("writing to a Vec cannot fail");
    out
}

/// Reads either dtype as binary16. FP32 payloads are rounded to nearest
/// even; NaN, infinities and values that overflow binary16 are rejected.
pub fn read_half(mut r: impl Read) -> io::Result<Tensor<f16>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(invalid("not a tensor file (bad magic)"));
    }
    let dtype = r.read_u32::<LittleEndian>()?;
    let c = r.read_u32::<LittleEndian>()? as usize;
    let h = r.read_u32::<LittleEndian>()? as usize;
    let w = r.read_u32::<LittleEndian>()? as usize;
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .filter(|&n| n > 0 && n < 1 << 31)
        .ok_or_else(|| invalid(format!("implausible tensor shape {c}x{h}x{w}")))?;
    let t = match dtype {
        DTYPE_HALF => {
            let mut bits = vec![0u16; n];
            r.read_u16_into::<LittleEndian>(&mut bits)?;
            Tensor::from_vec(c, h, w, bits.into_iter().map(f16::from_bits).collect())
                .map_err(|e| invalid(e.to_string()))?
        }
        DTYPE_F32 => {
            let mut v = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut v)?;
            let t = Tensor::from_vec(c, h, w, v).map_err(|e| invalid(e.to_string()))?;
            Tensor::<f16>::from_f32(&t).map_err(|e| invalid(e.to_string()))?
        }
        d => return Err(invalid(format!("unknown dtype code {d}"))),
    };
    t.check_finite().map_err(|e| invalid(e.to_string()))?;
    Ok(t)
}
