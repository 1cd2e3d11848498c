use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{domain_err, shape_err, Error, Result};

pub const CODE_DB_MAGIC: &[u8; 8] = b"HMARCODE";
pub const CODE_DB_VERSION: u16 = 1;

pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

/// Packs a ±1 (or continuous, by sign with `sign(0) = +1`) code: bit `i` of the
/// code is bit `i % 64` of word `i / 64`, set for +1. Pad bits stay zero.
pub fn pack_code(values: &[f64]) -> Vec<u64> {
    let mut words = vec![0u64; words_for(values.len())];
    for (i, &v) in values.iter().enumerate() {
        if v >= 0.0 {
            words[i / 64] |= 1 << (i % 64);
        }
    }
    words
}

pub fn unpack_code(words: &[u64], bits: usize) -> Vec<f64> {
    (0..bits)
        .map(|i| if words[i / 64] >> (i % 64) & 1 == 1 { 1.0 } else { -1.0 })
        .collect()
}

/// Popcount of the XOR over equal-length packed codes.
pub fn hamming(a: &[u64], b: &[u64]) -> Result<u32> {
    if a.len() != b.len() {
        return shape_err(format!("hamming over {} vs {} words", a.len(), b.len()));
    }
    Ok(hamming_words(a, b))
}

#[inline]
pub(crate) fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Bit-packed binary codes with an image id per row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedCodeSet {
    bits: usize,
    words: Vec<u64>,
    ids: Vec<u64>,
}

impl PackedCodeSet {
    pub fn new(bits: usize) -> Result<Self> {
        if bits == 0 || bits > u16::MAX as usize {
            return domain_err(format!("unsupported code length {bits}"));
        }
        Ok(PackedCodeSet {
            bits,
            words: Vec::new(),
            ids: Vec::new(),
        })
    }

    /// Packs each row of continuous or ±1 values.
    pub fn from_rows<'a>(bits: usize, rows: impl IntoIterator<Item = (u64, &'a [f64])>) -> Result<Self> {
        let mut set = PackedCodeSet::new(bits)?;
        for (id, row) in rows {
            set.push_values(id, row)?;
        }
        Ok(set)
    }

    pub fn push_values(&mut self, id: u64, values: &[f64]) -> Result<()> {
        if values.len() != self.bits {
            return shape_err(format!("code of length {} for a {}-bit set", values.len(), self.bits));
        }
        self.words.extend(pack_code(values));
        self.ids.push(id);
        Ok(())
    }

    pub fn push_packed(&mut self, id: u64, words: &[u64]) -> Result<()> {
        if words.len() != self.words_per_code() {
            return shape_err(format!("{} words for a {}-bit code", words.len(), self.bits));
        }
        let pad = self.words_per_code() * 64 - self.bits;
        if pad > 0 && words[words.len() - 1] >> (64 - pad) != 0 {
            return Err(Error::Format("pad bits must be zero".into()));
        }
        self.words.extend_from_slice(words);
        self.ids.push(id);
        Ok(())
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn words_per_code(&self) -> usize {
        words_for(self.bits)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> u64 {
        self.ids[row]
    }

    pub fn code(&self, row: usize) -> &[u64] {
        let w = self.words_per_code();
        &self.words[row * w..(row + 1) * w]
    }

    pub fn row_of(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    pub fn unpack(&self, row: usize) -> Vec<f64> {
        unpack_code(self.code(row), self.bits)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CODE_DB_MAGIC)?;
        w.write_all(&CODE_DB_VERSION.to_le_bytes())?;
        w.write_all(&(self.bits as u16).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for x in &self.words {
            w.write_all(&x.to_le_bytes())?;
        }
        for x in &self.ids {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 8 * (self.words.len() + self.ids.len()));
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CODE_DB_MAGIC {
            return Err(Error::Format("not a code database (bad magic)".into()));
        }
        let mut b2 = [0u8; 2];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != CODE_DB_VERSION {
            return Err(Error::Format(format!("unsupported code database version {version}")));
        }
        r.read_exact(&mut b2)?;
        let bits = u16::from_le_bytes(b2) as usize;
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        let mut set = PackedCodeSet::new(bits).map_err(|e| Error::Format(e.to_string()))?;
        let wpc = set.words_per_code();
        let mut words = Vec::with_capacity(n * wpc);
        for _ in 0..n * wpc {
            r.read_exact(&mut b8)?;
            words.push(u64::from_le_bytes(b8));
        }
        for row in words.chunks(wpc.max(1)).take(n) {
            set.push_packed(0, row)?;
        }
        for i in 0..n {
            r.read_exact(&mut b8)?;
            set.ids[i] = u64::from_le_bytes(b8);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after code database".into()));
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        PackedCodeSet::read_from(bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_hamming_example() {
        let a = pack_code(&[1.0, 1.0, -1.0, 1.0]);
        let b = pack_code(&[1.0, -1.0, -1.0, -1.0]);
        assert_eq!(hamming(&a, &b).unwrap(), 2);
        assert_eq!(hamming(&a, &a).unwrap(), 0);
    }

    #[test]
    fn antipodal_byte_code() {
        let a: Vec<f64> = (0..8).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert_eq!(hamming(&pack_code(&a), &pack_code(&neg)).unwrap(), 8);
    }

    #[test]
    fn zero_packs_as_plus_one_and_pad_is_clear() {
        let w = pack_code(&[0.0, -0.5, 0.25]);
        assert_eq!(w, vec![0b101]);
        assert!(hamming(&[0, 0], &[0]).is_err());
    }

    #[test]
    fn file_round_trip_and_rejections() {
        let rows = [vec![1.0; 70], vec![-1.0; 70]];
        let set = PackedCodeSet::from_rows(70, rows.iter().enumerate().map(|(i, r)| (i as u64 + 7, r.as_slice()))).unwrap();
        let bytes = set.to_bytes();
        assert_eq!(&bytes[..8], CODE_DB_MAGIC);
        assert_eq!(bytes.len(), 8 + 2 + 2 + 8 + 2 * 2 * 8 + 2 * 8);
        assert_eq!(PackedCodeSet::read_from(bytes.as_slice()).unwrap(), set);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(PackedCodeSet::read_from(bad.as_slice()), Err(Error::Format(_))));
        let mut padded = bytes.clone();
        padded[8 + 12 + 15] = 0xff;
        assert!(PackedCodeSet::read_from(padded.as_slice()).is_err());
        assert!(PackedCodeSet::read_from(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn empty_set_round_trips() {
        let set = PackedCodeSet::new(16).unwrap();
        assert_eq!(PackedCodeSet::read_from(set.to_bytes().as_slice()).unwrap(), set);
    }

    proptest! {
        #[test]
        fn pack_unpack_identity(bits in prop::sample::select(vec![8usize, 16, 64, 128]), seed in any::<u64>()) {
            let code: Vec<f64> = (0..bits).map(|i| if (seed.rotate_left(i as u32 % 64) ^ i as u64) & 1 == 1 { 1.0 } else { -1.0 }).collect();
            let packed = pack_code(&code);
            prop_assert_eq!(unpack_code(&packed, bits), code);
        }

        #[test]
        fn hamming_matches_dot_product(a in prop::collection::vec(prop::bool::ANY, 1..200), flips in prop::collection::vec(prop::bool::ANY, 200)) {
            let x: Vec<f64> = a.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
            let y: Vec<f64> = x.iter().zip(&flips).map(|(v, &f)| if f { -v } else { *v }).collect();
            let dot: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
            let d = hamming(&pack_code(&x), &pack_code(&y)).unwrap();
            prop_assert_eq!(d as f64, (x.len() as f64 - dot) / 2.0);
        }
    }
}
