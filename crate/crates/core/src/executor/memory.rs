use std::collections::BTreeMap;
use std::ops::Range;

use half::f16;

use crate::tensor::Tensor;

use super::ExecError;

/// Byte-addressable external memory with write tracking.
///
/// Storage grows on demand up to `capacity`. Reading a byte that was never
/// written is a fault, as is writing into a region claimed by another layer.
#[derive(Clone, Debug)]
pub struct MemoryPool {
    capacity: u64,
    bytes: Vec<u8>,
    written: Vec<u64>,
    /// start -> (end, owner)
    claims: BTreeMap<u64, (u64, String)>,
}

impl MemoryPool {
    pub fn new(capacity: u64) -> Self {
        Self {
            capacity,
            bytes: Vec::new(),
            written: Vec::new(),
            claims: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    fn check_bounds(&self, addr: u64, len: u64) -> Result<(), ExecError> {
        match addr.checked_add(len) {
            Some(end) if end <= self.capacity => Ok(()),
            _ => Err(ExecError::MemoryFault(format!(
                "access {addr:#x}+{len} beyond capacity {:#x}",
                self.capacity
            ))),
        }
    }

    /// Reserves `[addr, addr+len)` for `owner`. Re-claiming an identical
    /// range by the same owner is allowed.
    pub fn claim(&mut self, addr: u64, len: u64, owner: &str) -> Result<(), ExecError> {
        self.check_bounds(addr, len)?;
        let end = addr + len;
        if len == 0 {
            return Ok(());
        }
        let overlapping = self
            .claims
            .range(..end)
            .rev()
            .take_while(|(_, (e, _))| *e > addr)
            .find(|(&s, (e, o))| !(s == addr && *e == end && o == owner));
        if let Some((s, (e, o))) = overlapping {
            return Err(ExecError::MemoryFault(format!(
                "{owner:?} writes {addr:#x}..{end:#x}, overlapping live region {s:#x}..{e:#x} of {o:?}"
            )));
        }
        self.claims.insert(addr, (end, owner.to_string()));
        Ok(())
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) -> Result<(), ExecError> {
        self.check_bounds(addr, data.len() as u64)?;
        let (start, end) = (addr as usize, addr as usize + data.len());
        if self.bytes.len() < end {
            self.bytes.resize(end, 0);
            self.written.resize(end.div_ceil(64), 0);
        }
        self.bytes[start..end].copy_from_slice(data);
        for i in start..end {
            self.written[i / 64] |= 1 << (i % 64);
        }
        Ok(())
    }

    pub fn is_written(&self, addr: u64, len: u64) -> bool {
        let (start, end) = (addr as usize, (addr + len) as usize);
        if end > self.bytes.len() {
            return len == 0;
        }
        let mut i = start;
        while i < end {
            if i % 64 == 0 && i + 64 <= end {
                if self.written[i / 64] != u64::MAX {
                    return false;
                }
                i += 64;
            } else {
                if self.written[i / 64] >> (i % 64) & 1 == 0 {
                    return false;
                }
                i += 1;
            }
        }
        true
    }

    pub fn read(&self, addr: u64, len: u64) -> Result<&[u8], ExecError> {
        self.check_bounds(addr, len)?;
        if !self.is_written(addr, len) {
            return Err(ExecError::MemoryFault(format!(
                "read of unwritten memory in {addr:#x}..{:#x}",
                addr + len
            )));
        }
        Ok(&self.bytes[addr as usize..(addr + len) as usize])
    }

    pub fn write_halves(&mut self, addr: u64, data: &[f16]) -> Result<(), ExecError> {
        let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.write(addr, &bytes)
    }

    pub fn read_halves(&self, addr: u64, count: usize) -> Result<Vec<f16>, ExecError> {
        let raw = self.read(addr, 2 * count as u64)?;
        Ok(raw.chunks_exact(2).map(|b| f16::from_le_bytes([b[0], b[1]])).collect())
    }

    pub fn write_tensor(&mut self, addr: u64, t: &Tensor<f16>) -> Result<(), ExecError> {
        self.write_halves(addr, t.data())
    }

    pub fn read_tensor(&self, addr: u64, (c, h, w): (usize, usize, usize)) -> Result<Tensor<f16>, ExecError> {
        let data = self.read_halves(addr, c * h * w)?;
        Ok(Tensor::from_vec(c, h, w, data).expect("sizes match"))
    }

    /// Rows `rows` of channels `channels` of the `(c, h, w)` map at `addr`,
    /// laid out `[channel][row][x]`.
    pub fn read_rows(
        &self,
        addr: u64,
        (_, h, w): (usize, usize, usize),
        channels: Range<usize>,
        rows: Range<usize>,
    ) -> Result<Vec<f16>, ExecError> {
        let mut out = Vec::with_capacity(channels.len() * rows.len() * w);
        for c in channels {
            let at = addr + 2 * ((c * h + rows.start) * w) as u64;
            out.extend(self.read_halves(at, rows.len() * w)?);
        }
        Ok(out)
    }

    /// Writes `[channel][row][x]` data into rows `rows` of every channel.
    pub fn write_rows(
        &mut self,
        addr: u64,
        (c, h, w): (usize, usize, usize),
        rows: Range<usize>,
        data: &[f16],
    ) -> Result<(), ExecError> {
        let per_ch = rows.len() * w;
        debug_assert_eq!(data.len(), c * per_ch);
        for ch in 0..c {
            let at = addr + 2 * ((ch * h + rows.start) * w) as u64;
            self.write_halves(at, &data[ch * per_ch..(ch + 1) * per_ch])?;
        }
        Ok(())
    }
}
