//! MinMax barcodes and packed Hamming distance.

use crate::error::{Error, Result};

/// Bit vector packed little-endian into 64-bit words. Unused high bits of the
/// last word are always zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Barcode {
    words: Vec<u64>,
    nbits: usize,
}

impl Barcode {
    pub fn from_bits(bits: &[bool]) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidInput("barcode needs at least one bit".into()));
        }
        let mut words = vec![0u64; bits.len().div_ceil(64)];
        for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
            words[i / 64] |= 1 << (i % 64);
        }
        Ok(Barcode {
            words,
            nbits: bits.len(),
        })
    }

    pub fn nbits(&self) -> usize {
        self.nbits
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bit(&self, i: usize) -> bool {
        assert!(i < self.nbits, "bit {i} out of range for {} bits", self.nbits);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn to_bits(&self) -> Vec<bool> {
        (0..self.nbits).map(|i| self.bit(i)).collect()
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn byte_len(nbits: usize) -> usize {
        nbits.div_ceil(8)
    }

    /// `ceil(nbits / 8)` bytes, bit 0 in the low bit of byte 0.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        out.truncate(Self::byte_len(self.nbits));
        out
    }

    /// Inverse of [`Barcode::to_bytes`]. Set padding bits are rejected.
    pub fn from_bytes(bytes: &[u8], nbits: usize) -> Result<Self> {
        if nbits == 0 {
            return Err(Error::InvalidInput("barcode needs at least one bit".into()));
        }
        if bytes.len() != Self::byte_len(nbits) {
            return Err(Error::InvalidInput(format!(
                "{} bytes cannot hold exactly {nbits} bits",
                bytes.len()
            )));
        }
        let mut words = vec![0u64; nbits.div_ceil(64)];
        for (i, &b) in bytes.iter().enumerate() {
            words[i / 8] |= (b as u64) << (8 * (i % 8));
        }
        let code = Barcode { words, nbits };
        if code.words.last().copied().unwrap_or(0) & !code.tail_mask() != 0 {
            return Err(Error::InvalidInput("padding bits beyond nbits are set".into()));
        }
        Ok(code)
    }

    fn tail_mask(&self) -> u64 {
        match self.nbits % 64 {
            0 => u64::MAX,
            r => (1u64 << r) - 1,
        }
    }
}

/// Binarizes a feature vector by the sign of its discrete derivative:
/// bit `j` is set iff `feature[j + 1] > feature[j]`. Ties map to 0.
pub fn minmax_barcode(feature: &[f32]) -> Result<Barcode> {
    if feature.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "MinMax barcode needs at least 2 features, got {}",
            feature.len()
        )));
    }
    if feature.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("feature vector contains non-finite values".into()));
    }
    let nbits = feature.len() - 1;
    let mut words = vec![0u64; nbits.div_ceil(64)];
    for (j, pair) in feature.windows(2).enumerate() {
        if pair[1] > pair[0] {
            words[j / 64] |= 1 << (j % 64);
        }
    }
    Ok(Barcode { words, nbits })
}

/// Number of differing bits.
pub fn hamming(a: &Barcode, b: &Barcode) -> Result<u32> {
    if a.nbits != b.nbits {
        return Err(Error::DimMismatch {
            expected: a.nbits,
            actual: b.nbits,
        });
    }
    Ok(hamming_words(&a.words, &b.words, a.tail_mask()))
}

#[inline]
pub(crate) fn hamming_words(a: &[u64], b: &[u64], tail_mask: u64) -> u32 {
    let last = a.len() - 1;
    let body: u32 = a[..last]
        .iter()
        .zip(&b[..last])
        .map(|(x, y)| (x ^ y).count_ones())
        .sum();
    body + ((a[last] ^ b[last]) & tail_mask).count_ones()
}

/// Hamming distance without the length check, for hot loops where lengths were
/// validated up front.
#[inline]
pub(crate) fn hamming_unchecked(a: &Barcode, b: &Barcode) -> u32 {
    debug_assert_eq!(a.nbits, b.nbits);
    hamming_words(&a.words, &b.words, a.tail_mask())
}
