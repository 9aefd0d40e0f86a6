//! CTTT container: the on-disk format for checkpoints, adapters, and videos.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic       4 bytes  "CTTT"
//! version     u16
//! meta_count  u32
//!   per entry:  key_len u32, key bytes, val_len u32, val bytes   (UTF-8)
//! array_count u32
//!   per array:  name_len u32, name bytes, dtype u8 (0=f32, 1=f64),
//!               ndim u8, dims u32 x ndim
//! data        raw row-major values per array, in manifest order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use ndarray::{ArrayD, Dimension};

use crate::error::{Error, Result};
use crate::real::{Dtype, Real};

pub const MAGIC: [u8; 4] = *b"CTTT";
pub const VERSION: u16 = 1;

const MAX_NAME_LEN: usize = 4096;
const MAX_NDIM: usize = 8;
const MAX_ELEMS: usize = 1 << 30;
const MAX_COUNT: usize = 1 << 20;

#[derive(Clone, Debug)]
pub enum ArrayData {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
}

impl ArrayData {
    pub fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            ArrayData::F32(a) => a.shape(),
            ArrayData::F64(a) => a.shape(),
        }
    }
}

/// A named-array container with string metadata. Insertion order is
/// preserved and defines the data layout on disk.
#[derive(Clone, Debug, Default)]
pub struct Container {
    pub meta: IndexMap<String, String>,
    pub arrays: IndexMap<String, ArrayData>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(|s| s.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Container(format!("missing meta key {key:?}")))
    }

    /// Stores an array under `name` with dtype `A::DTYPE`. Values round-trip
    /// exactly: the f64 hop is an identity for matching dtypes.
    pub fn insert<A, D>(&mut self, name: &str, arr: &ndarray::Array<A, D>)
    where
        A: Real,
        D: Dimension,
    {
        let dyn_arr = arr.view().into_dyn();
        let data = match A::DTYPE {
            Dtype::F32 => ArrayData::F32(dyn_arr.mapv(|x| x.as_f64() as f32)),
            Dtype::F64 => ArrayData::F64(dyn_arr.mapv(|x| x.as_f64())),
        };
        self.arrays.insert(name.to_string(), data);
    }

    /// Fetches `name` as element type `A`; the stored dtype must match.
    pub fn get<A: Real>(&self, name: &str) -> Result<ArrayD<A>> {
        let data = self
            .arrays
            .get(name)
            .ok_or_else(|| Error::Container(format!("missing array {name:?}")))?;
        match (data, A::DTYPE) {
            (ArrayData::F32(a), Dtype::F32) => Ok(a.mapv(|x| A::real(x as f64))),
            (ArrayData::F64(a), Dtype::F64) => Ok(a.mapv(A::real)),
            (stored, wanted) => Err(Error::Container(format!(
                "array {name:?} stored as {} but requested as {}",
                stored.dtype().name(),
                wanted.name()
            ))),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_u16::<LittleEndian>(VERSION)?;

        w.write_u32::<LittleEndian>(self.meta.len() as u32)?;
        for (k, v) in &self.meta {
            write_str(w, k)?;
            write_str(w, v)?;
        }

        w.write_u32::<LittleEndian>(self.arrays.len() as u32)?;
        for (name, data) in &self.arrays {
            write_str(w, name)?;
            w.write_u8(data.dtype().tag())?;
            let shape = data.shape();
            w.write_u8(shape.len() as u8)?;
            for &d in shape {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
        }

        for data in self.arrays.values() {
            match data {
                ArrayData::F32(a) => {
                    for &v in a.iter() {
                        w.write_f32::<LittleEndian>(v)?;
                    }
                }
                ArrayData::F64(a) => {
                    for &v in a.iter() {
                        w.write_f64::<LittleEndian>(v)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if magic != MAGIC {
            return Err(Error::Container("bad magic bytes".into()));
        }
        let version = read_u16(r)?;
        if version != VERSION {
            return Err(Error::Container(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }

        let meta_count = read_count(r, "meta entries")?;
        let mut meta = IndexMap::new();
        for _ in 0..meta_count {
            let k = read_str(r)?;
            let v = read_str(r)?;
            meta.insert(k, v);
        }

        let array_count = read_count(r, "arrays")?;
        let mut manifest = Vec::with_capacity(array_count);
        for _ in 0..array_count {
            let name = read_str(r)?;
            let tag = read_u8(r)?;
            let dtype = Dtype::from_tag(tag)
                .ok_or_else(|| Error::Container(format!("unknown dtype tag {tag}")))?;
            let ndim = read_u8(r)? as usize;
            if ndim > MAX_NDIM {
                return Err(Error::Container(format!("ndim {ndim} exceeds {MAX_NDIM}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut elems = 1usize;
            for _ in 0..ndim {
                let d = read_u32(r)? as usize;
                elems = elems
                    .checked_mul(d)
                    .filter(|&n| n <= MAX_ELEMS)
                    .ok_or_else(|| Error::Container("array too large".into()))?;
                shape.push(d);
            }
            manifest.push((name, dtype, shape, elems));
        }

        let mut arrays = IndexMap::new();
        for (name, dtype, shape, elems) in manifest {
            let data = match dtype {
                Dtype::F32 => {
                    let mut buf = vec![0f32; elems];
                    for v in buf.iter_mut() {
                        *v = read_f32(r)?;
                    }
                    ArrayData::F32(to_array(buf, &shape)?)
                }
                Dtype::F64 => {
                    let mut buf = vec![0f64; elems];
                    for v in buf.iter_mut() {
                        *v = read_f64(r)?;
                    }
                    ArrayData::F64(to_array(buf, &shape)?)
                }
            };
            if arrays.insert(name.clone(), data).is_some() {
                return Err(Error::Container(format!("duplicate array {name:?}")));
            }
        }

        Ok(Container { meta, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let c = Self::read_from(&mut r)?;
        // Trailing garbage means the file is not a clean container.
        let mut probe = [0u8; 1];
        match r.read(&mut probe)? {
            0 => Ok(c),
            _ => Err(Error::Container("trailing bytes after data section".into())),
        }
    }
}

fn to_array<T>(buf: Vec<T>, shape: &[usize]) -> Result<ArrayD<T>> {
    ArrayD::from_shape_vec(shape.to_vec(), buf)
        .map_err(|e| Error::Container(format!("shape disagrees with data: {e}")))
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

// Truncation surfaces as a corrupt-container error, not a bare I/O error.
fn trunc(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Container("truncated file".into())
    } else {
        Error::Io(e)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(trunc)
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    r.read_u8().map_err(trunc)
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    r.read_u16::<LittleEndian>().map_err(trunc)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    r.read_u32::<LittleEndian>().map_err(trunc)
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    r.read_f32::<LittleEndian>().map_err(trunc)
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    r.read_f64::<LittleEndian>().map_err(trunc)
}

fn read_count(r: &mut impl Read, what: &str) -> Result<usize> {
    let n = read_u32(r)? as usize;
    if n > MAX_COUNT {
        return Err(Error::Container(format!("implausible count of {what}: {n}")));
    }
    Ok(n)
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > MAX_NAME_LEN {
        return Err(Error::Container(format!("string length {len} exceeds limit")));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Container("non-UTF-8 string".into()))
}
