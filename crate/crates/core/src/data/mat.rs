//! Reader and writer for Level-5 MAT files.
//!
//! Supports what the person-search annotation files use: numeric and logical
//! arrays, char arrays, cell arrays, struct arrays and zlib-compressed
//! elements. Sparse, complex and object arrays are rejected.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;

use crate::error::{Error, Result};

const MI_INT8: u32 = 1;
const MI_UINT8: u32 = 2;
const MI_INT16: u32 = 3;
const MI_UINT16: u32 = 4;
const MI_INT32: u32 = 5;
const MI_UINT32: u32 = 6;
const MI_SINGLE: u32 = 7;
const MI_DOUBLE: u32 = 9;
const MI_INT64: u32 = 12;
const MI_UINT64: u32 = 13;
const MI_MATRIX: u32 = 14;
const MI_COMPRESSED: u32 = 15;
const MI_UTF8: u32 = 16;
const MI_UTF16: u32 = 17;
const MI_UTF32: u32 = 18;

const MX_CELL: u8 = 1;
const MX_STRUCT: u8 = 2;
const MX_CHAR: u8 = 4;
const MX_SPARSE: u8 = 5;
const MX_DOUBLE: u8 = 6;

/// A decoded MATLAB value. Element order is column-major, as stored.
#[derive(Clone, Debug, PartialEq)]
pub enum MatValue {
    Numeric { dims: Vec<usize>, data: Vec<f64> },
    Char { dims: Vec<usize>, text: Vec<char> },
    Cell { dims: Vec<usize>, items: Vec<MatValue> },
    Struct {
        dims: Vec<usize>,
        fields: Vec<String>,
        /// One entry per struct element, each holding one value per field.
        elems: Vec<Vec<MatValue>>,
    },
}

impl MatValue {
    pub fn dims(&self) -> &[usize] {
        match self {
            MatValue::Numeric { dims, .. }
            | MatValue::Char { dims, .. }
            | MatValue::Cell { dims, .. }
            | MatValue::Struct { dims, .. } => dims,
        }
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.numel() == 0
    }

    /// Text of a char array, rows concatenated. Single-row arrays are the
    /// common case and come back verbatim.
    pub fn as_string(&self) -> Option<String> {
        match self {
            MatValue::Char { dims, text } => {
                let rows = dims.first().copied().unwrap_or(0);
                if rows <= 1 {
                    return Some(text.iter().collect());
                }
                let cols = text.len() / rows;
                let mut out = String::new();
                for r in 0..rows {
                    for c in 0..cols {
                        out.push(text[c * rows + r]);
                    }
                }
                Some(out)
            }
            // A 1x1 cell wrapping a string is common in hand-written files.
            MatValue::Cell { items, .. } if items.len() == 1 => items[0].as_string(),
            _ => None,
        }
    }

    pub fn as_numeric(&self) -> Option<&[f64]> {
        match self {
            MatValue::Numeric { data, .. } => Some(data),
            _ => None,
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        self.as_numeric().and_then(|d| d.first().copied())
    }

    /// Numeric matrix as rows (row-major), for `[rows, cols]` arrays.
    pub fn as_rows(&self) -> Option<Vec<Vec<f64>>> {
        let MatValue::Numeric { dims, data } = self else {
            return None;
        };
        let rows = *dims.first()?;
        let cols = if rows == 0 { 0 } else { data.len() / rows };
        Some(
            (0..rows)
                .map(|r| (0..cols).map(|c| data[c * rows + r]).collect())
                .collect(),
        )
    }

    /// Items of a cell array in storage order.
    pub fn cells(&self) -> Option<&[MatValue]> {
        match self {
            MatValue::Cell { items, .. } => Some(items),
            _ => None,
        }
    }

    /// Number of struct elements.
    pub fn struct_len(&self) -> Option<usize> {
        match self {
            MatValue::Struct { elems, .. } => Some(elems.len()),
            _ => None,
        }
    }

    /// Field `name` of struct element `index`.
    pub fn field(&self, index: usize, name: &str) -> Option<&MatValue> {
        let MatValue::Struct { fields, elems, .. } = self else {
            return None;
        };
        let f = fields.iter().position(|n| n == name)?;
        elems.get(index).map(|e| &e[f])
    }

    pub fn field_names(&self) -> Option<&[String]> {
        match self {
            MatValue::Struct { fields, .. } => Some(fields),
            _ => None,
        }
    }

    pub fn string(text: &str) -> Self {
        let text: Vec<char> = text.chars().collect();
        MatValue::Char {
            dims: vec![1, text.len()],
            text,
        }
    }

    pub fn row(data: &[f64]) -> Self {
        MatValue::Numeric {
            dims: vec![1, data.len()],
            data: data.to_vec(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::row(&[v])
    }

    /// Builds a numeric matrix from row-major rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = vec![0.0; r * c];
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                data[j * r + i] = v;
            }
        }
        MatValue::Numeric {
            dims: vec![r, c],
            data,
        }
    }

    pub fn column_cell(items: Vec<MatValue>) -> Self {
        MatValue::Cell {
            dims: vec![items.len(), 1],
            items,
        }
    }

    /// A `1 x n` struct array.
    pub fn struct_row(fields: &[&str], elems: Vec<Vec<MatValue>>) -> Self {
        MatValue::Struct {
            dims: vec![1, elems.len()],
            fields: fields.iter().map(|s| s.to_string()).collect(),
            elems,
        }
    }
}

/// Top-level variables of a MAT file, by name.
pub type MatFile = BTreeMap<String, MatValue>;

pub fn read_mat(path: &Path) -> Result<MatFile> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    parse_mat(&bytes).map_err(|msg| Error::Ingestion {
        path: path.to_path_buf(),
        msg,
    })
}

type ParseResult<T> = std::result::Result<T, String>;

pub fn parse_mat(bytes: &[u8]) -> ParseResult<MatFile> {
    if bytes.len() < 128 {
        return Err("file shorter than MAT header".into());
    }
    let endian = &bytes[126..128];
    let little = match endian {
        b"IM" => true,
        b"MI" => false,
        _ => {
            if bytes.starts_with(b"\x89HDF") || bytes[..128].windows(4).any(|w| w == b"7.3 ") {
                return Err("MAT v7.3 (HDF5) files are not supported".into());
            }
            return Err("missing MAT v5 endian indicator".into());
        }
    };
    let mut out = MatFile::new();
    let mut r = Cursor {
        buf: bytes,
        pos: 128,
        little,
    };
    while r.remaining() >= 8 {
        let (ty, data) = r.element()?;
        let (ty, data) = if ty == MI_COMPRESSED {
            let mut dec = Vec::new();
            ZlibDecoder::new(data)
                .read_to_end(&mut dec)
                .map_err(|e| format!("zlib: {e}"))?;
            let mut inner = Cursor {
                buf: &dec,
                pos: 0,
                little,
            };
            let (t, d) = inner.element()?;
            (t, d.to_vec())
        } else {
            (ty, data.to_vec())
        };
        if ty != MI_MATRIX {
            continue;
        }
        let (name, value) = parse_matrix(&data, little)?;
        out.insert(name, value);
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    little: bool,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.buf.len().saturating_sub(self.pos)
    }

    fn u32_at(&self, at: usize) -> ParseResult<u32> {
        let b: [u8; 4] = self
            .buf
            .get(at..at + 4)
            .ok_or("truncated element tag")?
            .try_into()
            .unwrap();
        Ok(if self.little {
            u32::from_le_bytes(b)
        } else {
            u32::from_be_bytes(b)
        })
    }

    /// Reads one data element, handling the small-element packing.
    fn element(&mut self) -> ParseResult<(u32, &'a [u8])> {
        let first = self.u32_at(self.pos)?;
        let small_len = first >> 16;
        if small_len != 0 {
            let ty = first & 0xffff;
            let start = self.pos + 4;
            let data = self
                .buf
                .get(start..start + small_len as usize)
                .ok_or("truncated small element")?;
            self.pos += 8;
            return Ok((ty, data));
        }
        let len = self.u32_at(self.pos + 4)? as usize;
        let start = self.pos + 8;
        let data = self.buf.get(start..start + len).ok_or("truncated element")?;
        // Compressed elements are not padded.
        let padded = if len % 8 == 0 || first == MI_COMPRESSED { len } else { len + 8 - len % 8 };
        self.pos = (start + padded).min(self.buf.len());
        Ok((first, data))
    }
}

fn numbers(ty: u32, data: &[u8], little: bool) -> ParseResult<Vec<f64>> {
    macro_rules! conv {
        ($t:ty, $n:expr) => {
            data.chunks_exact($n)
                .map(|c| {
                    let b = c.try_into().unwrap();
                    (if little {
                        <$t>::from_le_bytes(b)
                    } else {
                        <$t>::from_be_bytes(b)
                    }) as f64
                })
                .collect()
        };
    }
    Ok(match ty {
        MI_INT8 => data.iter().map(|&b| b as i8 as f64).collect(),
        MI_UINT8 | MI_UTF8 => data.iter().map(|&b| b as f64).collect(),
        MI_INT16 => conv!(i16, 2),
        MI_UINT16 | MI_UTF16 => conv!(u16, 2),
        MI_INT32 => conv!(i32, 4),
        MI_UINT32 | MI_UTF32 => conv!(u32, 4),
        MI_SINGLE => conv!(f32, 4),
        MI_DOUBLE => conv!(f64, 8),
        MI_INT64 => conv!(i64, 8),
        MI_UINT64 => conv!(u64, 8),
        other => return Err(format!("unsupported numeric data type {other}")),
    })
}

fn parse_matrix(data: &[u8], little: bool) -> ParseResult<(String, MatValue)> {
    if data.is_empty() {
        // An empty miMATRIX stands for an empty double array.
        return Ok((
            String::new(),
            MatValue::Numeric {
                dims: vec![0, 0],
                data: Vec::new(),
            },
        ));
    }
    let mut r = Cursor {
        buf: data,
        pos: 0,
        little,
    };
    let (_, flags) = r.element()?;
    let flags = numbers(MI_UINT32, flags, little)?;
    let class = (*flags.first().ok_or("missing array flags")? as u32 & 0xff) as u8;
    let complex = (*flags.first().unwrap() as u32) & 0x0800 != 0;
    let (dty, dims) = r.element()?;
    let dims: Vec<usize> = numbers(dty, dims, little)?
        .into_iter()
        .map(|d| d as usize)
        .collect();
    let (nty, name) = r.element()?;
    let name: String = numbers(nty, name, little)?
        .into_iter()
        .map(|c| c as u8 as char)
        .collect();
    let numel: usize = dims.iter().product();
    let value = match class {
        MX_CELL => {
            let mut items = Vec::with_capacity(numel);
            for _ in 0..numel {
                let (ty, d) = r.element()?;
                if ty != MI_MATRIX {
                    return Err(format!("cell item has type {ty}"));
                }
                items.push(parse_matrix(d, little)?.1);
            }
            MatValue::Cell { dims, items }
        }
        MX_STRUCT => {
            let (lty, len) = r.element()?;
            let field_len = *numbers(lty, len, little)?
                .first()
                .ok_or("missing field name length")? as usize;
            let (fty, names) = r.element()?;
            let raw = numbers(fty, names, little)?;
            let fields: Vec<String> = if field_len == 0 {
                Vec::new()
            } else {
                raw.chunks(field_len)
                    .map(|c| {
                        c.iter()
                            .take_while(|&&b| b != 0.0)
                            .map(|&b| b as u8 as char)
                            .collect()
                    })
                    .collect()
            };
            let mut elems = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut vals = Vec::with_capacity(fields.len());
                for _ in 0..fields.len() {
                    let (ty, d) = r.element()?;
                    if ty != MI_MATRIX {
                        return Err(format!("struct field has type {ty}"));
                    }
                    vals.push(parse_matrix(d, little)?.1);
                }
                elems.push(vals);
            }
            MatValue::Struct {
                dims,
                fields,
                elems,
            }
        }
        MX_CHAR => {
            let text = if numel == 0 {
                Vec::new()
            } else {
                let (ty, d) = r.element()?;
                if ty == MI_UTF8 {
                    String::from_utf8_lossy(d).chars().collect()
                } else {
                    numbers(ty, d, little)?
                        .into_iter()
                        .map(|c| char::from_u32(c as u32).unwrap_or('\u{fffd}'))
                        .collect()
                }
            };
            MatValue::Char { dims, text }
        }
        MX_SPARSE => return Err("sparse arrays are not supported".into()),
        c if (MX_DOUBLE..=15).contains(&c) => {
            if complex {
                return Err("complex arrays are not supported".into());
            }
            let data = if numel == 0 {
                Vec::new()
            } else {
                let (ty, d) = r.element()?;
                numbers(ty, d, little)?
            };
            MatValue::Numeric { dims, data }
        }
        other => return Err(format!("unsupported array class {other}")),
    };
    Ok((name, value))
}

/// Serialises variables to a little-endian Level-5 MAT file.
pub fn write_mat(path: &Path, vars: &[(&str, MatValue)], compress: bool) -> Result<()> {
    let mut out = Vec::new();
    let mut header = b"MATLAB 5.0 MAT-file, written by person-search".to_vec();
    header.resize(116, b' ');
    out.extend_from_slice(&header);
    out.extend_from_slice(&[0u8; 8]);
    out.extend_from_slice(&0x0100u16.to_le_bytes());
    out.extend_from_slice(b"IM");
    for (name, value) in vars {
        let mut body = Vec::new();
        encode_matrix(&mut body, name, value);
        let mut element = Vec::new();
        put_element(&mut element, MI_MATRIX, &body);
        if compress {
            let mut enc = ZlibEncoder::new(Vec::new(), flate2::Compression::default());
            enc.write_all(&element)?;
            let z = enc.finish()?;
            put_element(&mut out, MI_COMPRESSED, &z);
        } else {
            out.extend_from_slice(&element);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn put_element(out: &mut Vec<u8>, ty: u32, data: &[u8]) {
    out.extend_from_slice(&ty.to_le_bytes());
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    out.extend_from_slice(data);
    if ty != MI_COMPRESSED {
        while out.len() % 8 != 0 {
            out.push(0);
        }
    }
}

fn encode_matrix(out: &mut Vec<u8>, name: &str, value: &MatValue) {
    let class = match value {
        MatValue::Numeric { .. } => MX_DOUBLE,
        MatValue::Char { .. } => MX_CHAR,
        MatValue::Cell { .. } => MX_CELL,
        MatValue::Struct { .. } => MX_STRUCT,
    };
    let mut flags = Vec::new();
    flags.extend_from_slice(&(class as u32).to_le_bytes());
    flags.extend_from_slice(&0u32.to_le_bytes());
    put_element(out, MI_UINT32, &flags);
    let dims: Vec<u8> = value
        .dims()
        .iter()
        .flat_map(|&d| (d as i32).to_le_bytes())
        .collect();
    put_element(out, MI_INT32, &dims);
    put_element(out, MI_INT8, name.as_bytes());
    match value {
        MatValue::Numeric { data, .. } => {
            let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            put_element(out, MI_DOUBLE, &bytes);
        }
        MatValue::Char { text, .. } => {
            let bytes: Vec<u8> = text
                .iter()
                .flat_map(|&c| (c as u32 as u16).to_le_bytes())
                .collect();
            put_element(out, MI_UINT16, &bytes);
        }
        MatValue::Cell { items, .. } => {
            for item in items {
                let mut body = Vec::new();
                encode_matrix(&mut body, "", item);
                put_element(out, MI_MATRIX, &body);
            }
        }
        MatValue::Struct { fields, elems, .. } => {
            let width = fields.iter().map(|f| f.len() + 1).max().unwrap_or(1).max(8);
            put_element(out, MI_INT32, &(width as i32).to_le_bytes());
            let mut names = Vec::new();
            for f in fields {
                let mut b = f.as_bytes().to_vec();
                b.resize(width, 0);
                names.extend_from_slice(&b);
            }
            put_element(out, MI_INT8, &names);
            for elem in elems {
                for v in elem {
                    let mut body = Vec::new();
                    encode_matrix(&mut body, "", v);
                    put_element(out, MI_MATRIX, &body);
                }
            }
        }
    }
}
