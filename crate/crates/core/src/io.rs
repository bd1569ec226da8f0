//! On-disk formats.
//!
//! # Tensor binary layout (little endian)
//!
//! | offset | size | field                       |
//! |--------|------|-----------------------------|
//! | 0      | 4    | magic `SVT1`                |
//! | 4      | 1    | dtype (0 = f32, 1 = f64)    |
//! | 5      | 3    | zero padding                |
//! | 8      | 8    | rows (u64)                  |
//! | 16     | 8    | cols (u64)                  |
//! | 24     | ..   | row-major values            |
//!
//! # Index sets
//!
//! Fixed-width: `u32` per selected index, queries back to back, no header.
//! This is the in-memory buffer the dispatcher budgets for.
//!
//! Compact (`SVI1`): LEB128 varints. Header `keys`, `queries`, a theta flag
//! byte (followed by an f64 when set), then per query its length and the
//! first index followed by gaps to the previous index.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::attention::CriticalIndexSet;
use crate::error::{CoreError, Result};
use crate::tensor::{DType, Matrix, Real};

const TENSOR_MAGIC: &[u8; 4] = b"SVT1";
const INDEX_MAGIC: &[u8; 4] = b"SVI1";
const TENSOR_HEADER: usize = 24;

/// Bytes per index in the fixed-width buffer.
pub const INDEX_WIDTH: usize = 4;

pub fn encode_tensor<T: Real>(m: &Matrix<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(TENSOR_HEADER + m.data().len() * T::DTYPE.width());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(T::DTYPE.code());
    out.extend_from_slice(&[0; 3]);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for &v in m.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode_tensor<T: Real>(bytes: &[u8]) -> Result<Matrix<T>> {
    if bytes.len() < TENSOR_HEADER || &bytes[..4] != TENSOR_MAGIC {
        return Err(CoreError::Format("not a tensor file (bad magic or short header)".into()));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| CoreError::Format(format!("unknown dtype code {}", bytes[4])))?;
    if dtype != T::DTYPE {
        return Err(CoreError::Format(format!("tensor holds {dtype:?}, expected {:?}", T::DTYPE)));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    let width = dtype.width();
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| CoreError::Format("tensor dimensions overflow".into()))?;
    let body = &bytes[TENSOR_HEADER..];
    if body.len() != expected {
        return Err(CoreError::Format(format!("{rows}x{cols} tensor needs {expected} bytes, found {}", body.len())));
    }
    let data = body.chunks_exact(width).map(T::read_le).collect();
    Matrix::new(rows, cols, data)
}

pub fn write_tensor<T: Real>(path: &Path, m: &Matrix<T>) -> Result<()> {
    fs::write(path, encode_tensor(m))?;
    Ok(())
}

pub fn read_tensor<T: Real>(path: &Path) -> Result<Matrix<T>> {
    decode_tensor(&fs::read(path)?)
}

/// One CSV record per row, no header.
pub fn write_tensor_csv<W: Write>(out: W, m: &Matrix) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor_csv<R: Read>(input: R) -> Result<Matrix> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|e| CoreError::Format(format!("bad number {f:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

/// Size of the fixed-width index buffer for `queries` lists of `k` entries.
pub fn fixed_index_bytes(queries: usize, k: usize) -> u64 {
    (queries * k * INDEX_WIDTH) as u64
}

pub fn encode_indices_fixed(sets: &[Vec<usize>]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(sets.iter().map(Vec::len).sum::<usize>() * INDEX_WIDTH);
    for &i in sets.iter().flatten() {
        let v = u32::try_from(i).map_err(|_| CoreError::Format(format!("index {i} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Splits a fixed-width buffer back into lists of the given lengths.
pub fn decode_indices_fixed(bytes: &[u8], lengths: &[usize]) -> Result<Vec<Vec<usize>>> {
    if bytes.len() != lengths.iter().sum::<usize>() * INDEX_WIDTH {
        return Err(CoreError::Format("fixed-width index buffer size does not match lengths".into()));
    }
    let mut it = bytes.chunks_exact(INDEX_WIDTH).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize);
    Ok(lengths.iter().map(|&n| it.by_ref().take(n).collect()).collect())
}

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    while v >= 0x80 {
        out.push((v as u8) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

fn get_varint(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let b = *bytes.get(*pos).ok_or_else(|| CoreError::Format("truncated varint".into()))?;
        *pos += 1;
        v |= u64::from(b & 0x7f) << shift;
        if b & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(CoreError::Format("varint longer than 64 bits".into()))
}

pub fn encode_indices_compact(idx: &CriticalIndexSet) -> Result<Vec<u8>> {
    idx.validate()?;
    let mut out = INDEX_MAGIC.to_vec();
    put_varint(&mut out, idx.keys as u64);
    put_varint(&mut out, idx.queries() as u64);
    match idx.theta {
        Some(t) => {
            out.push(1);
            out.extend_from_slice(&t.to_le_bytes());
        }
        None => out.push(0),
    }
    for set in &idx.sets {
        put_varint(&mut out, set.len() as u64);
        let mut prev = 0;
        for (n, &i) in set.iter().enumerate() {
            put_varint(&mut out, if n == 0 { i } else { i - prev } as u64);
            prev = i;
        }
    }
    Ok(out)
}

pub fn decode_indices_compact(bytes: &[u8]) -> Result<CriticalIndexSet> {
    if bytes.len() < 4 || &bytes[..4] != INDEX_MAGIC {
        return Err(CoreError::Format("not an index file (bad magic)".into()));
    }
    let mut pos = 4;
    let keys = get_varint(bytes, &mut pos)? as usize;
    let queries = get_varint(bytes, &mut pos)? as usize;
    let theta = match bytes.get(pos) {
        Some(0) => {
            pos += 1;
            None
        }
        Some(1) => {
            let raw = bytes.get(pos + 1..pos + 9).ok_or_else(|| CoreError::Format("truncated theta".into()))?;
            pos += 9;
            Some(f64::from_le_bytes(raw.try_into().expect("8 bytes")))
        }
        _ => return Err(CoreError::Format("bad theta flag".into())),
    };
    let mut sets = Vec::with_capacity(queries.min(bytes.len()));
    for _ in 0..queries {
        let len = get_varint(bytes, &mut pos)? as usize;
        let mut set = Vec::with_capacity(len.min(keys));
        let mut prev = 0usize;
        for n in 0..len {
            let v = get_varint(bytes, &mut pos)? as usize;
            if n > 0 && v == 0 {
                return Err(CoreError::Format("duplicate index in compact set".into()));
            }
            prev = if n == 0 { v } else { prev.checked_add(v).ok_or_else(|| CoreError::Format("index overflow".into()))? };
            set.push(prev);
        }
        sets.push(set);
    }
    if pos != bytes.len() {
        return Err(CoreError::Format(format!("{} trailing bytes after index sets", bytes.len() - pos)));
    }
    CriticalIndexSet::new(keys, theta, sets)
}

pub fn indices_to_json(idx: &CriticalIndexSet) -> Result<String> {
    Ok(serde_json::to_string_pretty(idx)?)
}

pub fn indices_from_json(s: &str) -> Result<CriticalIndexSet> {
    let idx: CriticalIndexSet = serde_json::from_str(s)?;
    idx.validate()?;
    Ok(idx)
}
