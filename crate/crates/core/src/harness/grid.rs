//! Index-grid container for the encode/decode CLI interchange.
//!
//! Header `{magic "LVIG", version u32, height u32, width u32, d_Z u32}`
//! followed by `height * width` row-major 32-bit little-endian unsigned
//! indices.

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayD};
use std::path::Path;

const MAGIC: &[u8; 4] = b"LVIG";
const VERSION: u32 = 1;

pub struct IndexGrid {
    pub indices: Array2<u32>,
    pub d_z: u32,
}

impl IndexGrid {
    pub fn new(indices: Array2<u32>, d_z: u32) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= d_z) {
            return Err(Error::contract(format!(
                "index grid: value {bad} out of range for d_Z = {d_z}"
            )));
        }
        Ok(IndexGrid { indices, d_z })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (h, w) = self.indices.dim();
        let mut out = Vec::with_capacity(20 + 4 * h * w);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(h as u32).to_le_bytes());
        out.extend_from_slice(&(w as u32).to_le_bytes());
        out.extend_from_slice(&self.d_z.to_le_bytes());
        for &v in self.indices.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[0..4] != MAGIC {
            return Err(Error::format("index grid: bad magic"));
        }
        let rd = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if rd(4) != VERSION {
            return Err(Error::format("index grid: unsupported version"));
        }
        let (h, w, d_z) = (rd(8) as usize, rd(12) as usize, rd(16));
        if bytes.len() != 20 + 4 * h * w {
            return Err(Error::format("index grid: wrong payload size"));
        }
        let values: Vec<u32> = bytes[20..].chunks_exact(4).map(|c| rd0(c)).collect();
        if let Some(&bad) = values.iter().find(|&&v| v >= d_z) {
            return Err(Error::format(format!(
                "index grid: value {bad} out of range for d_Z = {d_z}"
            )));
        }
        Ok(IndexGrid {
            indices: Array2::from_shape_vec((h, w), values).unwrap(),
            d_z,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// As a `[1, h, w]` tensor for the decoder.
    pub fn to_batch(&self) -> ArrayD<u32> {
        let (h, w) = self.indices.dim();
        self.indices
            .clone()
            .into_dyn()
            .into_shape_with_order(ndarray::IxDyn(&[1, h, w]))
            .unwrap()
    }
}

fn rd0(c: &[u8]) -> u32 {
    u32::from_le_bytes(c.try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bytes() {
        let grid = Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as u32);
        let g = IndexGrid::new(grid.clone(), 64).unwrap();
        let bytes = g.to_bytes();
        assert_eq!(&bytes[0..4], b"LVIG");
        assert_eq!(bytes.len(), 20 + 4 * 15);
        let back = IndexGrid::from_bytes(&bytes).unwrap();
        assert_eq!(back.indices, grid);
        assert_eq!(back.d_z, 64);
    }

    #[test]
    fn out_of_range_rejected() {
        let grid = Array2::from_elem((2, 2), 9u32);
        assert!(IndexGrid::new(grid.clone(), 8).is_err());
        let ok = IndexGrid::new(grid, 16).unwrap();
        let mut bytes = ok.to_bytes();
        bytes[16..20].copy_from_slice(&4u32.to_le_bytes()); // shrink d_Z header
        assert!(matches!(
            IndexGrid::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }
}
