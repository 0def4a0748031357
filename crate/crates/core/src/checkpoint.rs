//! Binary checkpoint format.
//!
//! ```text
//! "UNET" | version u32 | depth, base_features, in_channels, out_channels, feature_cap (u32 each)
//! tensor count u32 | per tensor: name_len u32, name, rank u32, dims u32 × rank, f32 × numel
//! ```
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvParams, Tensor4};
use crate::unet::{UNetParams, UNetSpec};

pub const MAGIC: &[u8; 4] = b"UNET";
pub const FORMAT_VERSION: u32 = 1;

/// Guards against absurd allocations when reading a corrupt header.
const MAX_NAME_LEN: usize = 256;
const MAX_RANK: usize = 4;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_params<T: Scalar>(params: &UNetParams<T>, w: &mut impl Write) -> Result<()> {
    let s = params.spec();
    w.write_all(MAGIC)?;
    put_u32(w, FORMAT_VERSION as usize)?;
    for v in [s.depth, s.base_features, s.in_channels, s.out_channels, s.feature_cap] {
        put_u32(w, v)?;
    }
    put_u32(w, 2 * params.layers().len())?;
    for (ls, p) in s.layout().iter().zip(params.layers()) {
        let d = p.weights.dims();
        let records: [(String, Vec<usize>, &[T]); 2] = [
            (format!("{}.weight", ls.name), vec![d.n, d.c, d.h, d.w], p.weights.data()),
            (format!("{}.bias", ls.name), vec![p.bias.len()], &p.bias),
        ];
        for (name, dims, data) in records {
            put_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            put_u32(w, dims.len())?;
            for d in dims {
                put_u32(w, d)?;
            }
            let mut buf = Vec::with_capacity(4 * data.len());
            for v in data {
                buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    Ok(())
}

struct Record {
    name: String,
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn read_record(r: &mut impl Read) -> Result<Record> {
    let name_len = get_u32(r)?;
    if name_len > MAX_NAME_LEN {
        return Err(Error::Format(format!("tensor name length {name_len} exceeds {MAX_NAME_LEN}")));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
    let rank = get_u32(r)?;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Format(format!("tensor {name} has unsupported rank {rank}")));
    }
    let dims = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
    let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let numel = numel.ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
    let mut raw = Vec::new();
    r.take(4 * numel as u64).read_to_end(&mut raw)?;
    if raw.len() != 4 * numel {
        return Err(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, format!("tensor {name} is truncated")).into());
    }
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Record { name, dims, data })
}

fn read_spec(r: &mut impl Read) -> Result<UNetSpec> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = get_u32(r)?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut f = [0usize; 5];
    for v in &mut f {
        *v = get_u32(r)?;
    }
    Ok(UNetSpec { depth: f[0], base_features: f[1], in_channels: f[2], out_channels: f[3], feature_cap: f[4] })
}

/// Reads a checkpoint and checks every tensor against `expected` (or the
/// stored spec when `None`). The first tensor that disagrees is named in the error.
pub fn read_params<T: Scalar>(r: &mut impl Read, expected: Option<&UNetSpec>) -> Result<UNetParams<T>> {
    let stored = read_spec(r)?;
    let spec = *expected.unwrap_or(&stored);
    spec.validate()?;
    let count = get_u32(r)?;
    let layout = spec.layout();
    let mut layers = Vec::with_capacity(layout.len());
    for (i, ls) in layout.iter().enumerate() {
        let mut template: ConvParams<T> = ls.zeros();
        let wd = template.weights.dims();
        let wanted = [
            (format!("{}.weight", ls.name), vec![wd.n, wd.c, wd.h, wd.w]),
            (format!("{}.bias", ls.name), vec![ls.out_c]),
        ];
        for (j, (name, dims)) in wanted.into_iter().enumerate() {
            if 2 * i + j >= count {
                return shape_err(format!("checkpoint ends before tensor {name}"));
            }
            let rec = read_record(r)?;
            if rec.name != name || rec.dims != dims {
                return shape_err(format!(
                    "tensor {} {:?} does not match expected {name} {:?}",
                    rec.name, rec.dims, dims
                ));
            }
            let values: Vec<T> = rec.data.iter().map(|&v| T::from_f32(v).unwrap_or_else(T::nan)).collect();
            if j == 0 {
                template.weights = Tensor4::from_vec(wd, values)?;
            } else {
                template.bias = values;
            }
        }
        layers.push(template);
    }
    if count != 2 * layout.len() {
        return shape_err(format!("checkpoint holds {count} tensors, spec needs {}", 2 * layout.len()));
    }
    UNetParams::from_layers(spec, layers)
}

pub fn save<T: Scalar>(params: &UNetParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<UNetParams<T>> {
    read_params(&mut BufReader::new(File::open(path)?), None)
}

/// Loads a checkpoint that must match `spec` tensor for tensor.
pub fn load_as<T: Scalar>(path: impl AsRef<Path>, spec: &UNetSpec) -> Result<UNetParams<T>> {
    read_params(&mut BufReader::new(File::open(path)?), Some(spec))
}
