use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use half::f16;
use serde::{Deserialize, Serialize};

use crate::bfp::BfpConfig;
use crate::datapath::{ConvWeights, WeightLayout};

use super::word::{decode, encode, MicroOp, Word256, OP_CONV, RES_ADD, RES_CACHE, WORD_BYTES};
use super::McodeError;

const PROGRAM_MAGIC: &[u8; 4] = b"FCNM";
const PROGRAM_VERSION: u32 = 1;
const WEIGHT_MAGIC: &[u8; 4] = b"BFPW";
const WEIGHT_VERSION: u32 = 1;
const META_MAGIC: &[u8; 4] = b"META";

/// Which op list an op belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Section {
    Extraction,
    Fusion,
}

/// A channel-major binary16 map in external memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRef {
    pub addr: u64,
    pub channels: u32,
    pub height: u32,
    pub width: u32,
}

impl TensorRef {
    pub fn bytes(&self) -> u64 {
        self.channels as u64 * self.height as u64 * self.width as u64 * 2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels as usize, self.height as usize, self.width as usize)
    }

    fn transposed(self) -> Self {
        Self {
            height: self.width,
            width: self.height,
            ..self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub in_addr: u64,
    pub out_addr: u64,
    /// size of the layer's output
    pub bytes: u64,
}

/// A lowered network: op lists, conv weights and the memory plan.
#[derive(Clone, Debug, PartialEq)]
pub struct MicroProgram {
    pub extraction: Vec<MicroOp>,
    pub fusion: Vec<MicroOp>,
    /// source layer of every op, extraction ops first
    pub layer_ids: Vec<String>,
    /// BFP weights of every conv layer, keyed by layer id
    pub weights: BTreeMap<String, ConvWeights>,
    /// layer id to addresses; includes the network input under `"input"`
    pub alloc_map: BTreeMap<String, Region>,
    /// named result maps (`"score"`, `"link"`)
    pub outputs: BTreeMap<String, TensorRef>,
    pub input: TensorRef,
    pub bfp: BfpConfig,
    /// ops, input and outputs are in transposed orientation
    pub transposed: bool,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    layer_ids: Vec<String>,
    alloc_map: BTreeMap<String, Region>,
    outputs: BTreeMap<String, TensorRef>,
    input: TensorRef,
    block_size: usize,
    mantissa_bits: u32,
    transposed: bool,
}

impl MicroProgram {
    pub fn ops(&self) -> impl Iterator<Item = (Section, &MicroOp)> {
        self.extraction
            .iter()
            .map(|op| (Section::Extraction, op))
            .chain(self.fusion.iter().map(|op| (Section::Fusion, op)))
    }

    pub fn len(&self) -> usize {
        self.extraction.len() + self.fusion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn words(&self) -> Result<Vec<Word256>, McodeError> {
        self.ops().map(|(_, op)| encode(op)).collect()
    }

    pub fn conv_count(&self) -> usize {
        self.ops().filter(|(_, op)| op.layer_type == OP_CONV).count()
    }

    /// Number of (cache, add) pairs in program order.
    pub fn residual_pairs(&self) -> usize {
        let mut open = false;
        let mut pairs = 0;
        for (_, op) in self.ops() {
            match op.res_op {
                RES_CACHE => open = true,
                RES_ADD if open => {
                    pairs += 1;
                    open = false;
                }
                _ => {}
            }
        }
        pairs
    }

    /// The same computation in the other orientation: height and width are
    /// swapped in every op and tensor, transpose bits and the kernels are
    /// transposed. Addresses do not change.
    pub fn transposed(&self) -> Self {
        let flip = |ops: &[MicroOp]| {
            ops.iter()
                .map(|op| {
                    let mut t = MicroOp {
                        height: op.width,
                        width: op.height,
                        ..*op
                    };
                    t.set_transpose(!op.transpose());
                    t
                })
                .collect()
        };
        Self {
            extraction: flip(&self.extraction),
            fusion: flip(&self.fusion),
            layer_ids: self.layer_ids.clone(),
            weights: self.weights.iter().map(|(k, w)| (k.clone(), w.transposed())).collect(),
            alloc_map: self.alloc_map.clone(),
            outputs: self.outputs.iter().map(|(k, t)| (k.clone(), t.transposed())).collect(),
            input: self.input.transposed(),
            bfp: self.bfp,
            transposed: !self.transposed,
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), McodeError> {
        w.write_all(PROGRAM_MAGIC)?;
        w.write_u32::<LittleEndian>(PROGRAM_VERSION)?;
        w.write_u32::<LittleEndian>(self.extraction.len() as u32)?;
        w.write_u32::<LittleEndian>(self.fusion.len() as u32)?;
        for word in self.words()? {
            w.write_all(word.as_bytes())?;
        }
        let (image, offsets) = write_weight_image(&self.weights);
        w.write_u32::<LittleEndian>(offsets.len() as u32)?;
        for (id, off) in &offsets {
            write_id(&mut w, id)?;
            w.write_u64::<LittleEndian>(*off)?;
        }
        w.write_u64::<LittleEndian>(image.len() as u64)?;
        w.write_all(&image)?;
        let meta = serde_json::to_vec(&Meta {
            layer_ids: self.layer_ids.clone(),
            alloc_map: self.alloc_map.clone(),
            outputs: self.outputs.clone(),
            input: self.input,
            block_size: self.bfp.block_size,
            mantissa_bits: self.bfp.mantissa_bits,
            transposed: self.transposed,
        })
        .expect("metadata serializes");
        w.write_all(META_MAGIC)?;
        w.write_u32::<LittleEndian>(meta.len() as u32)?;
        w.write_all(&meta)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, McodeError> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, McodeError> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != PROGRAM_MAGIC {
            return Err(McodeError::Format("not a program file (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != PROGRAM_VERSION {
            return Err(McodeError::Format(format!("unsupported program version {version}")));
        }
        let n_ext = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let n_fus = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        if (n_ext + n_fus) * WORD_BYTES > bytes.len() {
            return Err(McodeError::Format("op count exceeds file size".into()));
        }
        let mut ops = Vec::with_capacity(n_ext + n_fus);
        for _ in 0..n_ext + n_fus {
            let mut word = [0u8; WORD_BYTES];
            r.read_exact(&mut word).map_err(truncated)?;
            ops.push(decode(&Word256(word))?);
        }
        let n_off = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let mut offsets = Vec::new();
        for _ in 0..n_off {
            let id = read_id(&mut r)?;
            offsets.push((id, r.read_u64::<LittleEndian>().map_err(truncated)?));
        }
        let image_len = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        let start = r.position() as usize;
        let image = bytes
            .get(start..start.saturating_add(image_len))
            .ok_or_else(|| McodeError::Format("weight image truncated".into()))?;
        r.set_position((start + image_len) as u64);
        let weights = read_weight_image(image, &offsets)?;
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != META_MAGIC {
            return Err(McodeError::Format("metadata section missing".into()));
        }
        let meta_len = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(truncated)?;
        let meta: Meta =
            serde_json::from_slice(&meta).map_err(|e| McodeError::Format(format!("metadata: {e}")))?;
        if meta.layer_ids.len() != ops.len() {
            return Err(McodeError::Format("metadata does not match the op count".into()));
        }
        for (op, id) in ops.iter().zip(&meta.layer_ids) {
            if op.layer_type == OP_CONV && !weights.contains_key(id) {
                return Err(McodeError::Format(format!("no weights for conv layer {id:?}")));
            }
        }
        let fusion = ops.split_off(n_ext);
        Ok(Self {
            extraction: ops,
            fusion,
            layer_ids: meta.layer_ids,
            weights,
            alloc_map: meta.alloc_map,
            outputs: meta.outputs,
            input: meta.input,
            bfp: BfpConfig {
                block_size: meta.block_size,
                mantissa_bits: meta.mantissa_bits,
            },
            transposed: meta.transposed,
        })
    }
}

fn truncated(e: std::io::Error) -> McodeError {
    McodeError::Format(format!("truncated: {e}"))
}

fn write_id(w: &mut impl Write, id: &str) -> std::io::Result<()> {
    w.write_u16::<LittleEndian>(id.len() as u16)?;
    w.write_all(id.as_bytes())
}

fn read_id(r: &mut impl Read) -> Result<String, McodeError> {
    let len = r.read_u16::<LittleEndian>().map_err(truncated)? as usize;
    let mut id = vec![0u8; len];
    r.read_exact(&mut id).map_err(truncated)?;
    String::from_utf8(id).map_err(|_| McodeError::Format("layer id is not UTF-8".into()))
}

/// Serializes weights as a `BFPW` image; returns it with each layer's
/// record offset.
pub fn write_weight_image(weights: &BTreeMap<String, ConvWeights>) -> (Vec<u8>, Vec<(String, u64)>) {
    let mut out = Vec::new();
    let mut offsets = Vec::with_capacity(weights.len());
    out.extend_from_slice(WEIGHT_MAGIC);
    out.write_u32::<LittleEndian>(WEIGHT_VERSION).unwrap();
    out.write_u32::<LittleEndian>(weights.len() as u32).unwrap();
    for (id, w) in weights {
        offsets.push((id.clone(), out.len() as u64));
        write_id(&mut out, id).unwrap();
        let (layout, kernel) = match w.layout() {
            WeightLayout::Direct { kernel } => (0u8, kernel as u8),
            WeightLayout::Winograd => (1, 3),
        };
        out.push(layout);
        out.push(kernel);
        let cfg = w.config();
        for v in [w.out_ch() as u32, w.in_ch() as u32, cfg.block_size as u32, cfg.mantissa_bits] {
            out.write_u32::<LittleEndian>(v).unwrap();
        }
        out.write_u32::<LittleEndian>(w.exponents().len() as u32).unwrap();
        for &e in w.exponents() {
            out.write_i32::<LittleEndian>(e).unwrap();
        }
        out.write_u32::<LittleEndian>(w.mantissas().len() as u32).unwrap();
        for &m in w.mantissas() {
            out.write_i32::<LittleEndian>(m).unwrap();
        }
        for b in w.bias() {
            out.write_u16::<LittleEndian>(b.to_bits()).unwrap();
        }
    }
    (out, offsets)
}

/// Parses a `BFPW` image, checking that each record sits at its offset.
pub fn read_weight_image(image: &[u8], offsets: &[(String, u64)]) -> Result<BTreeMap<String, ConvWeights>, McodeError> {
    let mut r = Cursor::new(image);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != WEIGHT_MAGIC {
        return Err(McodeError::Format("weight image has a bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != WEIGHT_VERSION {
        return Err(McodeError::Format(format!("unsupported weight image version {version}")));
    }
    let n = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    if n != offsets.len() {
        return Err(McodeError::Format("offset table does not match the weight image".into()));
    }
    let mut out = BTreeMap::new();
    for (want_id, want_off) in offsets {
        if r.position() != *want_off {
            return Err(McodeError::Format(format!("record {want_id:?} is not at its offset")));
        }
        let id = read_id(&mut r)?;
        if &id != want_id {
            return Err(McodeError::Format(format!("offset table names {want_id:?}, image has {id:?}")));
        }
        let layout = r.read_u8().map_err(truncated)?;
        let kernel = r.read_u8().map_err(truncated)? as usize;
        let layout = match (layout, kernel) {
            (0, 1 | 3 | 7) => WeightLayout::Direct { kernel },
            (1, 3) => WeightLayout::Winograd,
            _ => return Err(McodeError::Format(format!("record {id:?}: bad layout {layout}/{kernel}"))),
        };
        let mut dims = [0u32; 4];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>().map_err(truncated)?;
        }
        let cfg = BfpConfig {
            block_size: dims[2] as usize,
            mantissa_bits: dims[3],
        };
        let remaining = image.len() as u64 - r.position();
        let read_i32s = |r: &mut Cursor<&[u8]>| -> Result<Vec<i32>, McodeError> {
            let len = r.read_u32::<LittleEndian>().map_err(truncated)? as u64;
            if len * 4 > remaining {
                return Err(McodeError::Format(format!("record {id:?} truncated")));
            }
            let mut v = vec![0i32; len as usize];
            r.read_i32_into::<LittleEndian>(&mut v).map_err(truncated)?;
            Ok(v)
        };
        let exps = read_i32s(&mut r)?;
        let mants = read_i32s(&mut r)?;
        let mut bias = Vec::with_capacity(dims[0] as usize);
        for _ in 0..dims[0] {
            bias.push(f16::from_bits(r.read_u16::<LittleEndian>().map_err(truncated)?));
        }
        let w = ConvWeights::from_raw(layout, dims[0] as usize, dims[1] as usize, cfg, exps, mants, bias)
            .map_err(|e| McodeError::Format(format!("record {id:?}: {e}")))?;
        out.insert(id, w);
    }
    Ok(out)
}
