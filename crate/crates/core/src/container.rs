//! `DMLT` tensor container.
//!
//! Layout: the magic bytes `DMLT`, a little-endian `u32` rank, `rank`
//! little-endian `u32` dimensions, then the row-major payload as
//! little-endian `f32`.

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LatentGrid};

pub const MAGIC: &[u8; 4] = b"DMLT";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Container(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: impl IntoIterator<Item = f64>) -> Result<Self> {
        Self::new(dims, data.into_iter().map(|v| v as f32).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cursor.len() < n {
                return Err(Error::Container("truncated".into()));
            }
            let (head, tail) = cursor.split_at(n);
            cursor = tail;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err(Error::Container("bad magic".into()));
        }
        let read_u32 = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
        let rank = read_u32(take(4)?);
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(take(4)?));
        }
        let count: usize = dims.iter().product();
        let payload = take(count * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if !cursor.is_empty() {
            return Err(Error::Container(format!("{} trailing bytes", cursor.len())));
        }
        Self::new(dims, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn to_array3(&self) -> Result<Array3<f64>> {
        if self.dims.len() != 3 {
            return Err(Error::Container(format!("expected rank 3, got {:?}", self.dims)));
        }
        let data = self.data.iter().map(|&v| v as f64).collect();
        Array3::from_shape_vec((self.dims[0], self.dims[1], self.dims[2]), data)
            .map_err(|e| Error::Container(e.to_string()))
    }
}

impl From<&LatentGrid> for Tensor {
    fn from(g: &LatentGrid) -> Self {
        let (h, w, c) = g.dims();
        Tensor {
            dims: vec![h, w, c],
            data: g.array().iter().map(|&v| v as f32).collect(),
        }
    }
}

impl From<&ImageGrid> for Tensor {
    fn from(g: &ImageGrid) -> Self {
        let (h, w, c) = g.dims();
        Tensor {
            dims: vec![h, w, c],
            data: g.array().iter().map(|&v| v as f32).collect(),
        }
    }
}

impl TryFrom<&Tensor> for LatentGrid {
    type Error = Error;

    fn try_from(t: &Tensor) -> Result<Self> {
        LatentGrid::from_array(t.to_array3()?)
    }
}

impl TryFrom<&Tensor> for ImageGrid {
    type Error = Error;

    fn try_from(t: &Tensor) -> Result<Self> {
        ImageGrid::from_array(t.to_array3()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2, 1], vec![1.0, -2.5]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"DMLT");
        assert_eq!(&b[4..8], &3u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &1u32.to_le_bytes());
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
        assert_eq!(&b[24..28], &(-2.5f32).to_le_bytes());
        assert_eq!(b.len(), 28);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Tensor::from_bytes(b"XXXX\0\0\0\0").is_err());
        let mut b = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().to_bytes();
        b.pop();
        assert!(Tensor::from_bytes(&b).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32) * 0.37 - 11.0).collect();
            let t = Tensor::new(dims, data).unwrap();
            prop_assert_eq!(Tensor::from_bytes(&t.to_bytes()).unwrap(), t);
        }
    }
}
