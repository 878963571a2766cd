use crate::error::{Error, Result};
use crate::quant::QuantGrid;

/// Grid indices stored with `bits` bits each, little-endian inside 64-bit
/// words, in row-major element order. Unused high bits of the last word are zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedIndices {
    pub bits: u32,
    pub len: usize,
    pub words: Vec<u64>,
}

pub fn words_for(len: usize, bits: u32) -> usize {
    (len * bits as usize).div_ceil(64)
}

pub fn pack(indices: &[usize], bits: u32) -> Result<PackedIndices> {
    if !(1..=8).contains(&bits) {
        return Err(Error::InvalidArgument(format!("packing supports 1..=8 bits, got {bits}")));
    }
    let mut words = vec![0u64; words_for(indices.len(), bits)];
    let limit = 1usize << bits;
    for (i, &v) in indices.iter().enumerate() {
        if v >= limit {
            return Err(Error::InvalidArgument(format!("index {v} does not fit in {bits} bits")));
        }
        let pos = i * bits as usize;
        let (w, sh) = (pos / 64, pos % 64);
        words[w] |= (v as u64) << sh;
        if sh + bits as usize > 64 {
            words[w + 1] |= (v as u64) >> (64 - sh);
        }
    }
    Ok(PackedIndices { bits, len: indices.len(), words })
}

impl PackedIndices {
    pub fn from_words(bits: u32, len: usize, words: Vec<u64>) -> Result<Self> {
        if !(1..=8).contains(&bits) || words.len() != words_for(len, bits) {
            return Err(Error::Format(format!(
                "{} words cannot hold {len} indices of {bits} bits",
                words.len()
            )));
        }
        let used = len * bits as usize % 64;
        if used != 0 && words.last().is_some_and(|w| w >> used != 0) {
            return Err(Error::Format("nonzero padding bits in packed indices".into()));
        }
        Ok(PackedIndices { bits, len, words })
    }

    pub fn unpack(&self) -> Vec<usize> {
        let b = self.bits as usize;
        let mask = (1u64 << b) - 1;
        (0..self.len)
            .map(|i| {
                let pos = i * b;
                let (w, sh) = (pos / 64, pos % 64);
                let mut v = self.words[w] >> sh;
                if sh + b > 64 {
                    v |= self.words[w + 1] << (64 - sh);
                }
                (v & mask) as usize
            })
            .collect()
    }

    pub fn byte_len(&self) -> usize {
        self.words.len() * 8
    }
}

/// Grid indices of one weight tensor together with their grid and shape.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedWeights {
    pub grid: QuantGrid,
    pub shape: Vec<usize>,
    pub indices: PackedIndices,
}

impl PackedWeights {
    pub fn new(grid: QuantGrid, shape: Vec<usize>, indices: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != indices.len() {
            return Err(Error::shape("packed_weights", format!("{} indices for shape {shape:?}", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= grid.len()) {
            return Err(Error::InvalidArgument(format!("index {bad} outside a grid of {}", grid.len())));
        }
        let indices = pack(indices, grid.bits())?;
        Ok(PackedWeights { grid, shape, indices })
    }

    /// Grid values in row-major order.
    pub fn values(&self) -> Vec<f64> {
        let v = self.grid.values();
        self.indices.unpack().into_iter().map(|i| v[i]).collect()
    }

    /// One word-aligned run of sign bits per leading-axis row, for the
    /// popcount kernel. Only a `{-1, +1}` grid qualifies.
    pub fn sign_rows(&self) -> Result<Vec<u64>> {
        if self.grid.values() != [-1.0, 1.0] {
            return Err(Error::InvalidArgument(format!(
                "popcount needs the binary grid [-1, 1], got {:?}",
                self.grid.values()
            )));
        }
        let rows = self.shape.first().copied().unwrap_or(1).max(1);
        let n = self.indices.len / rows;
        let wpr = n.div_ceil(64);
        let idx = self.indices.unpack();
        let mut out = vec![0u64; rows * wpr];
        for (i, &b) in idx.iter().enumerate() {
            let (r, t) = (i / n, i % n);
            out[r * wpr + t / 64] |= (b as u64) << (t % 64);
        }
        Ok(out)
    }
}
