//! Dense row-major `f64` tensors and the `TNSR` binary format.
//!
//! A `TNSR` blob is laid out as:
//!
//! ```text
//! b"TNSR" | u32 version (=1) | u8 ndim | ndim x u64 extents | f64 payload
//! ```
//!
//! All integers and floats are little-endian. Named tensor archives (used for
//! checkpoints and PCA models) are a `u32` count followed by
//! `u32 name length | UTF-8 name | TNSR blob` entries.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const TNSR_MAGIC: &[u8; 4] = b"TNSR";
pub const TNSR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Reinterprets the buffer with a new shape of equal element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Returns the item at a given position of the leading axis.
    pub fn row(&self, i: usize) -> &[f64] {
        let stride = self.data.len() / self.shape[0].max(1);
        &self.data[i * stride..(i + 1) * stride]
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let Some(first) = items.first() else {
            return Err(Error::dim("stack", "no tensors to stack"));
        };
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::dim(
                    "stack",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    pub fn write_tnsr<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(TNSR_MAGIC)?;
        w.write_all(&TNSR_VERSION.to_le_bytes())?;
        w.write_all(&[self.shape.len() as u8])?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_tnsr<R: Read>(r: &mut R) -> Result<Tensor> {
        let bad = |detail: String| Error::Format {
            what: "TNSR tensor",
            detail,
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| bad(format!("header: {e}")))?;
        if &magic != TNSR_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r).map_err(|e| bad(format!("version: {e}")))?;
        if version != TNSR_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)
            .map_err(|e| bad(format!("ndim: {e}")))?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|e| bad(format!("extent: {e}")))?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|e| bad(format!("payload of {n} values: {e}")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_tnsr(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Tensor> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Tensor::read_tnsr(&mut BufReader::new(file))
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_archive<W: Write>(w: &mut W, entries: &[(String, &Tensor)]) -> std::io::Result<()> {
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        t.write_tnsr(w)?;
    }
    Ok(())
}

pub fn read_archive<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let bad = |detail: String| Error::Format {
        what: "tensor archive",
        detail,
    };
    let count = read_u32(r).map_err(|e| bad(format!("count: {e}")))?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(r).map_err(|e| bad(format!("name length: {e}")))?;
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)
            .map_err(|e| bad(format!("name: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| bad(format!("name: {e}")))?;
        let t = Tensor::read_tnsr(r)?;
        out.push((name, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tnsr_layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        t.write_tnsr(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TNSR");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(buf[8], 2);
        assert_eq!(&buf[9..17], &1u64.to_le_bytes());
        assert_eq!(&buf[17..25], &2u64.to_le_bytes());
        assert_eq!(&buf[25..33], &1.0f64.to_le_bytes());
        assert_eq!(&buf[33..41], &(-2.5f64).to_le_bytes());
        assert_eq!(buf.len(), 41);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let t = Tensor::zeros(&[4]);
        let mut buf = Vec::new();
        t.write_tnsr(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        let err = Tensor::read_tnsr(&mut buf.as_slice()).unwrap_err();
        assert_eq!(err.category(), "format");
    }

    proptest::proptest! {
        #[test]
        fn tnsr_roundtrip_is_bit_exact(
            shape in proptest::collection::vec(1usize..4, 0..4),
            seed in proptest::num::u64::ANY,
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2))
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            t.write_tnsr(&mut buf).unwrap();
            let back = Tensor::read_tnsr(&mut buf.as_slice()).unwrap();
            proptest::prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                proptest::prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
