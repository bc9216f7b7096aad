use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::IrError;

const MAGIC: &[u8; 4] = b"FCNW";
const VERSION: u32 = 1;

/// FP32 parameters of one convolution, weights laid out `[out][in][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kernel: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvParams {
    pub fn new(out_ch: usize, in_ch: usize, kernel: usize, weight: Vec<f32>, bias: Vec<f32>) -> Result<Self, IrError> {
        if weight.len() != out_ch * in_ch * kernel * kernel || bias.len() != out_ch {
            return Err(IrError::Shape(format!(
                "conv params {out_ch}x{in_ch}x{kernel}x{kernel}: got {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            out_ch,
            in_ch,
            kernel,
            weight,
            bias,
        })
    }

    #[inline]
    pub fn w(&self, o: usize, c: usize, ky: usize, kx: usize) -> f32 {
        self.weight[((o * self.in_ch + c) * self.kernel + ky) * self.kernel + kx]
    }

    /// The `kernel x kernel` slice for one (output, input) channel pair.
    pub fn taps(&self, o: usize, c: usize) -> &[f32] {
        let k2 = self.kernel * self.kernel;
        let start = (o * self.in_ch + c) * k2;
        &self.weight[start..start + k2]
    }
}

/// Per-layer convolution parameters keyed by layer id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    layers: BTreeMap<String, ConvParams>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, params: ConvParams) {
        self.layers.insert(id.into(), params);
    }

    pub fn get(&self, id: &str) -> Option<&ConvParams> {
        self.layers.get(id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut ConvParams> {
        self.layers.get_mut(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ConvParams)> {
        self.layers.iter()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(self.layers.len() as u32)?;
        for (id, p) in &self.layers {
            w.write_u16::<LittleEndian>(id.len() as u16)?;
            w.write_all(id.as_bytes())?;
            for d in [p.out_ch, p.in_ch, p.kernel] {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in p.weight.iter().chain(&p.bias) {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(mut r: impl Read) -> io::Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(invalid("not a weight file (bad magic)"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(invalid(&format!("unsupported weight file version {version}")));
        }
        let n = r.read_u32::<LittleEndian>()?;
        let mut store = Self::new();
        for _ in 0..n {
            let len = r.read_u16::<LittleEndian>()? as usize;
            let mut id = vec![0u8; len];
            r.read_exact(&mut id)?;
            let id = String::from_utf8(id).map_err(|_| invalid("layer id is not UTF-8"))?;
            let out_ch = r.read_u32::<LittleEndian>()? as usize;
            let in_ch = r.read_u32::<LittleEndian>()? as usize;
            let kernel = r.read_u32::<LittleEndian>()? as usize;
            let count = out_ch
                .checked_mul(in_ch)
                .and_then(|v| v.checked_mul(kernel * kernel))
                .filter(|&v| v < 1 << 31)
                .ok_or_else(|| invalid("implausible layer dimensions"))?;
            let mut weight = vec![0f32; count];
            r.read_f32_into::<LittleEndian>(&mut weight)?;
            let mut bias = vec![0f32; out_ch];
            r.read_f32_into::<LittleEndian>(&mut bias)?;
            store.insert(id, ConvParams::new(out_ch, in_ch, kernel, weight, bias).map_err(|e| invalid(&e.to_string()))?);
        }
        Ok(store)
    }
}

fn invalid(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}
