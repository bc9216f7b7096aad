//! Text form of op lists, one op per line:
//!
//! ```text
//! .extraction
//! conv k3 s1 relu c=64->64 hw=56x56 res=none in=0x1000 out=0x40000
//! ```

use std::fmt::Write as _;

use super::program::{MicroProgram, Section};
use super::word::*;
use super::McodeError;

pub fn disassemble(program: &MicroProgram) -> Result<String, McodeError> {
    disassemble_words(&program.words()?, program.extraction.len())
}

/// Lists `words`; the first `n_extraction` belong to the extraction list.
pub fn disassemble_words(words: &[Word256], n_extraction: usize) -> Result<String, McodeError> {
    let mut out = String::new();
    for (i, w) in words.iter().enumerate() {
        if i == 0 && n_extraction > 0 {
            out.push_str(".extraction\n");
        }
        if i == n_extraction {
            out.push_str(".fusion\n");
        }
        let section = if i < n_extraction { Section::Extraction } else { Section::Fusion };
        writeln!(out, "{}", format_op(&decode(w)?, section)).unwrap();
    }
    Ok(out)
}

fn mnemonic(op: &MicroOp, section: Section) -> &'static str {
    match (op.layer_type, section) {
        (OP_NULL, _) => "null",
        (OP_CONV, _) => "conv",
        (OP_POOL, Section::Extraction) => "maxpool",
        (OP_POOL, Section::Fusion) => "sigmoid",
        _ => "upsample",
    }
}

fn kernel_token(op: &MicroOp) -> &'static str {
    match (op.layer_type, op.kernel_code) {
        (OP_UPSAMPLE, UPSAMPLE_NEAREST) => "nearest",
        (OP_UPSAMPLE, _) => "bilinear",
        (_, K1) => "k1",
        (_, K3) => "k3",
        (_, K7) => "k7",
        _ => "k2",
    }
}

fn format_op(op: &MicroOp, section: Section) -> String {
    let mut s = format!("{} {} s{}", mnemonic(op, section), kernel_token(op), op.stride());
    if op.relu() {
        s.push_str(" relu");
    }
    if op.transpose() {
        s.push_str(" transpose");
    }
    let res = match op.res_op {
        RES_NONE => "none",
        RES_CACHE => "cache",
        _ => "add",
    };
    write!(
        s,
        " c={}->{} hw={}x{} res={res} in={:#x} out={:#x}",
        op.in_channels, op.out_channels, op.height, op.width, op.in_addr, op.out_addr
    )
    .unwrap();
    s
}

/// Parses a listing back to words; returns (extraction, fusion).
pub fn assemble(text: &str) -> Result<(Vec<Word256>, Vec<Word256>), McodeError> {
    let mut ext = Vec::new();
    let mut fus = Vec::new();
    let mut section = Section::Extraction;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| McodeError::Asm { line: n + 1, msg };
        match line {
            ".extraction" => {
                section = Section::Extraction;
                continue;
            }
            ".fusion" => {
                section = Section::Fusion;
                continue;
            }
            _ => {}
        }
        let op = parse_op(line, section).map_err(err)?;
        let word = encode(&op)?;
        match section {
            Section::Extraction => ext.push(word),
            Section::Fusion => fus.push(word),
        }
    }
    Ok((ext, fus))
}

fn parse_op(line: &str, section: Section) -> Result<MicroOp, String> {
    let mut toks = line.split_whitespace();
    let mut op = MicroOp::default();
    let mnem = toks.next().ok_or("empty line")?;
    op.layer_type = match (mnem, section) {
        ("null", _) => OP_NULL,
        ("conv", _) => OP_CONV,
        ("maxpool", Section::Extraction) | ("sigmoid", Section::Fusion) => OP_POOL,
        ("upsample", _) => OP_UPSAMPLE,
        _ => return Err(format!("unknown mnemonic {mnem:?} in this section")),
    };
    op.kernel_code = match toks.next().ok_or("missing kernel")? {
        "k1" | "nearest" => K1,
        "k3" | "bilinear" => K3,
        "k7" => K7,
        "k2" => K2,
        k => return Err(format!("bad kernel {k:?}")),
    };
    op.stride_code = match toks.next().ok_or("missing stride")? {
        "s1" => 0,
        "s2" => 1,
        s => return Err(format!("bad stride {s:?}")),
    };
    for tok in toks {
        match tok {
            "relu" => op.set_relu(true),
            "transpose" => op.set_transpose(true),
            _ => {
                let (key, val) = tok.split_once('=').ok_or_else(|| format!("bad token {tok:?}"))?;
                match key {
                    "c" => {
                        let (a, b) = val.split_once("->").ok_or("channels need a->b")?;
                        op.in_channels = num(a)? as u32;
                        op.out_channels = num(b)? as u32;
                    }
                    "hw" => {
                        let (a, b) = val.split_once('x').ok_or("size needs HxW")?;
                        op.height = num(a)? as u32;
                        op.width = num(b)? as u32;
                    }
                    "res" => {
                        op.res_op = match val {
                            "none" => RES_NONE,
                            "cache" => RES_CACHE,
                            "add" => RES_ADD,
                            _ => return Err(format!("bad res {val:?}")),
                        }
                    }
                    "in" => op.in_addr = num(val)?,
                    "out" => op.out_addr = num(val)?,
                    _ => return Err(format!("unknown field {key:?}")),
                }
            }
        }
    }
    Ok(op)
}

fn num(s: &str) -> Result<u64, String> {
    let r = match s.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    };
    r.map_err(|_| format!("bad number {s:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_listing() {
        assert_eq!(disassemble_words(&[], 0).unwrap(), "");
        assert_eq!(assemble("").unwrap(), (vec![], vec![]));
    }

    #[test]
    fn conv_line() {
        let mut op = MicroOp {
            layer_type: OP_CONV,
            in_channels: 64,
            out_channels: 64,
            height: 56,
            width: 56,
            kernel_code: K3,
            in_addr: 0x1000,
            out_addr: 0x40000,
            ..Default::default()
        };
        op.set_relu(true);
        let words = [encode(&op).unwrap()];
        let text = disassemble_words(&words, 1).unwrap();
        assert!(text.contains("conv k3 s1 relu"), "{text}");
        assert_eq!(assemble(&text).unwrap().0, words);
    }

    #[test]
    fn sections_disambiguate_opcode_two() {
        let pool = MicroOp {
            layer_type: OP_POOL,
            kernel_code: K2,
            stride_code: 1,
            ..Default::default()
        };
        let sig = MicroOp {
            layer_type: OP_POOL,
            ..Default::default()
        };
        let words = [encode(&pool).unwrap(), encode(&sig).unwrap()];
        let text = disassemble_words(&words, 1).unwrap();
        assert!(text.contains("maxpool k2 s2") && text.contains("sigmoid k1 s1"), "{text}");
        let (e, f) = assemble(&text).unwrap();
        assert_eq!([e, f].concat(), words);
        assert!(assemble(".fusion\nmaxpool k2 s2").is_err());
    }
}
