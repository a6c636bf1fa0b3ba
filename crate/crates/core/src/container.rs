//! Versioned flat container of named arrays, used for checkpoints and for
//! the persisted heatmap store.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "SPMLARR\0"
//! version    u32       currently 1
//! count      u32       number of arrays
//! count × {
//!     name_len  u32
//!     name      name_len bytes of UTF-8
//!     dtype     u8     0 = f32, 1 = f64, 2 = f16, 3 = u8, 4 = u32, 5 = i64
//!     ndim      u8
//!     dims      ndim × u64
//!     values    product(dims) × sizeof(dtype), little-endian
//! }
//! ```

use std::fs;
use std::path::Path;

use half::f16;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SPMLARR\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    F16(Vec<f16>),
    U8(Vec<u8>),
    U32(Vec<u32>),
    I64(Vec<i64>),
}

impl ArrayData {
    fn dtype(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
            ArrayData::F16(_) => 2,
            ArrayData::U8(_) => 3,
            ArrayData::U32(_) => 4,
            ArrayData::I64(_) => 5,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::F16(v) => v.len(),
            ArrayData::U8(v) => v.len(),
            ArrayData::U32(v) => v.len(),
            ArrayData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_values(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U8(v) => out.extend_from_slice(v),
            ArrayData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: ArrayData) -> Result<Self> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "array `{name}` has shape {shape:?} but {} values",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArrayFile {
    pub arrays: Vec<NamedArray>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_values(r: &mut Reader<'_>, dtype: u8, n: usize) -> std::result::Result<ArrayData, String> {
    let width = match dtype {
        0 | 4 => 4,
        1 | 5 => 8,
        2 => 2,
        3 => 1,
        other => return Err(format!("unknown dtype tag {other}")),
    };
    let bytes = r.take(n.checked_mul(width).ok_or("array size overflow")?)?;
    Ok(match dtype {
        0 => ArrayData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
        1 => ArrayData::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        2 => ArrayData::F16(bytes.chunks_exact(2).map(|c| f16::from_le_bytes(c.try_into().unwrap())).collect()),
        3 => ArrayData::U8(bytes.to_vec()),
        4 => ArrayData::U32(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
        _ => ArrayData::I64(bytes.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect()),
    })
}

impl ArrayFile {
    pub fn push(&mut self, array: NamedArray) {
        self.arrays.push(array);
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(a.data.dtype());
            out.push(a.shape.len() as u8);
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            a.data.write_values(&mut out);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not an array container (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported container version {version}"));
        }
        let count = r.u32()?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| "array name is not UTF-8".to_string())?
                .to_string();
            let dtype = r.u8()?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or("array size overflow")?;
            let data = decode_values(&mut r, dtype, n)?;
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != buf.len() {
            return Err(format!("{} trailing bytes", buf.len() - r.pos));
        }
        Ok(Self { arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| Error::format(path, m))
    }

    /// Typed lookup helpers; errors name the missing or mistyped array.
    pub fn f32s(&self, name: &str) -> std::result::Result<(&[usize], &[f32]), String> {
        match self.get(name).map(|a| (&a.shape, &a.data)) {
            Some((s, ArrayData::F32(v))) => Ok((s, v)),
            Some(_) => Err(format!("array `{name}` is not f32")),
            None => Err(format!("missing array `{name}`")),
        }
    }

    pub fn f64s(&self, name: &str) -> std::result::Result<(&[usize], &[f64]), String> {
        match self.get(name).map(|a| (&a.shape, &a.data)) {
            Some((s, ArrayData::F64(v))) => Ok((s, v)),
            Some(_) => Err(format!("array `{name}` is not f64")),
            None => Err(format!("missing array `{name}`")),
        }
    }

    pub fn u8s(&self, name: &str) -> std::result::Result<(&[usize], &[u8]), String> {
        match self.get(name).map(|a| (&a.shape, &a.data)) {
            Some((s, ArrayData::U8(v))) => Ok((s, v)),
            Some(_) => Err(format!("array `{name}` is not u8")),
            None => Err(format!("missing array `{name}`")),
        }
    }

    pub fn u32s(&self, name: &str) -> std::result::Result<(&[usize], &[u32]), String> {
        match self.get(name).map(|a| (&a.shape, &a.data)) {
            Some((s, ArrayData::U32(v))) => Ok((s, v)),
            Some(_) => Err(format!("array `{name}` is not u32")),
            None => Err(format!("missing array `{name}`")),
        }
    }

    pub fn i64s(&self, name: &str) -> std::result::Result<(&[usize], &[i64]), String> {
        match self.get(name).map(|a| (&a.shape, &a.data)) {
            Some((s, ArrayData::I64(v))) => Ok((s, v)),
            Some(_) => Err(format!("array `{name}` is not i64")),
            None => Err(format!("missing array `{name}`")),
        }
    }

    /// A UTF-8 string stored as a u8 array.
    pub fn text(&self, name: &str) -> std::result::Result<String, String> {
        let (_, bytes) = self.u8s(name)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| format!("array `{name}` is not UTF-8"))
    }

    pub fn push_text(&mut self, name: &str, text: &str) {
        self.arrays.push(NamedArray {
            name: name.into(),
            shape: vec![text.len()],
            data: ArrayData::U8(text.as_bytes().to_vec()),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_garbage() {
        assert!(ArrayFile::from_bytes(b"nope").is_err());
        let mut bytes = ArrayFile::default().to_bytes();
        bytes[8] = 9;
        assert!(ArrayFile::from_bytes(&bytes).unwrap_err().contains("version"));
        let mut f = ArrayFile::default();
        f.push(NamedArray::new("a", vec![2], ArrayData::F32(vec![1.0, 2.0])).unwrap());
        let bytes = f.to_bytes();
        assert!(ArrayFile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn shape_must_match() {
        assert!(NamedArray::new("a", vec![2, 2], ArrayData::U8(vec![0; 3])).is_err());
    }

    #[test]
    fn layout_is_stable() {
        let mut f = ArrayFile::default();
        f.push(NamedArray::new("w", vec![1], ArrayData::F32(vec![1.0])).unwrap());
        let b = f.to_bytes();
        let mut expected = b"SPMLARR\0".to_vec();
        expected.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, b'w', 0, 1]);
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(b, expected);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            a in proptest::collection::vec(any::<f32>(), 1..20),
            b in proptest::collection::vec(any::<f64>(), 1..20),
            c in proptest::collection::vec(any::<u16>(), 1..20),
            name in "[a-z.0-9]{1,12}",
        ) {
            let mut f = ArrayFile::default();
            f.push(NamedArray::new(name.clone(), vec![a.len()], ArrayData::F32(a.clone())).unwrap());
            f.push(NamedArray::new("b", vec![1, b.len()], ArrayData::F64(b.clone())).unwrap());
            let halves: Vec<f16> = c.iter().map(|&x| f16::from_bits(x)).collect();
            f.push(NamedArray::new("c", vec![c.len()], ArrayData::F16(halves)).unwrap());
            f.push_text("meta", "k = v");
            let bytes = f.to_bytes();
            let back = ArrayFile::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            let (_, a2) = back.f32s(&name).unwrap();
            prop_assert!(a2.iter().zip(&a).all(|(x, y)| x.to_bits() == y.to_bits()));
            prop_assert_eq!(back.text("meta").unwrap(), "k = v");
        }
    }
}
