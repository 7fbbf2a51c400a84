//! Bit-packed binary codes and exhaustive Hamming search.
//!
//! Bit `j` of a code lives in word `j / 64` at position `j % 64`; a set bit
//! encodes +1 and a clear bit encodes -1. Unused high bits are zero.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::models::HashNetwork;

pub const CODE_MAGIC: &[u8; 8] = b"DUCHCODE";
pub const CODE_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodes {
    n: usize,
    bits: usize,
    words_per_code: usize,
    data: Vec<u64>,
}

impl PackedCodes {
    pub fn new(bits: usize, n: usize, data: Vec<u64>) -> Result<Self> {
        let words_per_code = bits.div_ceil(64);
        if bits == 0 || data.len() != n * words_per_code {
            return Err(Error::dim(
                "PackedCodes",
                format!("{} words for {n} codes of {bits} bits", data.len()),
            ));
        }
        let tail = bits % 64;
        if tail != 0 {
            let mask = !0u64 << tail;
            if (0..n).any(|i| data[i * words_per_code + words_per_code - 1] & mask != 0) {
                return Err(Error::format("packed codes", "unused high bits are set"));
            }
        }
        Ok(Self {
            n,
            bits,
            words_per_code,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn words_per_code(&self) -> usize {
        self.words_per_code
    }

    pub fn words(&self) -> &[u64] {
        &self.data
    }

    #[inline]
    pub fn code(&self, i: usize) -> &[u64] {
        &self.data[i * self.words_per_code..(i + 1) * self.words_per_code]
    }

    /// Back to a ±1 matrix.
    pub fn unpack(&self) -> Matrix {
        Matrix::from_fn(self.n, self.bits, |r, j| {
            if self.code(r)[j / 64] >> (j % 64) & 1 == 1 {
                1.0
            } else {
                -1.0
            }
        })
    }

    pub fn select(&self, rows: &[usize]) -> PackedCodes {
        let mut data = Vec::with_capacity(rows.len() * self.words_per_code);
        for &r in rows {
            data.extend_from_slice(self.code(r));
        }
        PackedCodes {
            n: rows.len(),
            bits: self.bits,
            words_per_code: self.words_per_code,
            data,
        }
    }
}

/// Sign-quantizes each row (`h ≥ 0` → 1) and packs it.
pub fn binarize_and_pack(h: &Matrix) -> PackedCodes {
    let (n, bits) = h.shape();
    let wpc = bits.div_ceil(64);
    let mut data = vec![0u64; n * wpc];
    for r in 0..n {
        for (j, &v) in h.row(r).iter().enumerate() {
            if v >= 0.0 {
                data[r * wpc + j / 64] |= 1u64 << (j % 64);
            }
        }
    }
    PackedCodes {
        n,
        bits,
        words_per_code: wpc,
        data,
    }
}

#[inline]
fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Number of differing bits between two codes of equal width.
pub fn hamming(a: &[u64], b: &[u64]) -> Result<u32> {
    if a.len() != b.len() {
        return Err(Error::dim(
            "hamming",
            format!("{} words vs {} words", a.len(), b.len()),
        ));
    }
    Ok(hamming_words(a, b))
}

/// Packed codes with one identifier per code.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    codes: PackedCodes,
    ids: Vec<u64>,
}

impl RetrievalIndex {
    pub fn new(codes: PackedCodes, ids: Vec<u64>) -> Result<Self> {
        if ids.len() != codes.len() {
            return Err(Error::dim(
                "RetrievalIndex",
                format!("{} ids for {} codes", ids.len(), codes.len()),
            ));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::Config(format!("duplicate id {dup} in index")));
        }
        Ok(Self { codes, ids })
    }

    /// Index whose ids are the code positions `0..n`.
    pub fn with_positions(codes: PackedCodes) -> Self {
        let ids = (0..codes.len() as u64).collect();
        Self { codes, ids }
    }

    pub fn codes(&self) -> &PackedCodes {
        &self.codes
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The `min(k, n)` nearest codes as `(position, distance)`, ordered by
    /// ascending distance and then ascending id.
    pub fn nearest(&self, query: &[u64], k: usize) -> Result<Vec<(usize, u32)>> {
        if query.len() != self.codes.words_per_code() {
            return Err(Error::dim(
                "top_k",
                format!(
                    "query has {} words, index codes have {}",
                    query.len(),
                    self.codes.words_per_code()
                ),
            ));
        }
        let n = self.len();
        let k = k.min(n);
        if k == 0 {
            return Ok(Vec::new());
        }
        let dists: Vec<u32> = (0..n)
            .map(|i| hamming_words(query, self.codes.code(i)))
            .collect();
        // counting pass: smallest radius that already holds k items
        let mut hist = vec![0usize; self.codes.bits() + 1];
        for &d in &dists {
            hist[d as usize] += 1;
        }
        let mut radius = 0;
        let mut acc = 0;
        for (d, &c) in hist.iter().enumerate() {
            acc += c;
            if acc >= k {
                radius = d as u32;
                break;
            }
        }
        let mut hits: Vec<(usize, u32)> = dists
            .iter()
            .enumerate()
            .filter(|(_, &d)| d <= radius)
            .map(|(i, &d)| (i, d))
            .collect();
        hits.sort_unstable_by_key(|&(i, d)| (d, self.ids[i]));
        hits.truncate(k);
        Ok(hits)
    }
}

/// Top-`k` search returning `(id, distance)` pairs.
pub fn top_k(query: &[u64], index: &RetrievalIndex, k: usize) -> Result<Vec<(u64, u32)>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    Ok(index
        .nearest(query, k)?
        .into_iter()
        .map(|(i, d)| (index.ids[i], d))
        .collect())
}

/// Eval-mode codes for every row of `rows`, computed `batch_size` rows at a time.
pub fn encode_split(net: &HashNetwork, rows: &Matrix, batch_size: usize) -> Result<PackedCodes> {
    let bs = batch_size.max(1);
    let mut net = net.clone();
    let mut data = Vec::new();
    let mut start = 0;
    while start < rows.rows() {
        let end = (start + bs).min(rows.rows());
        let idx: Vec<usize> = (start..end).collect();
        let h = net.forward(&rows.select_rows(&idx), crate::autodiff::Mode::Eval)?;
        data.extend_from_slice(binarize_and_pack(&h).words());
        start = end;
    }
    PackedCodes::new(net.code_bits(), rows.rows(), data)
}

/// Path of the id list written next to a code file.
pub fn ids_path(code_path: &Path) -> PathBuf {
    let mut s = code_path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

/// Serializes codes: `"DUCHCODE"`, `u32` version, `u32` bits, `u64` n, then
/// `n * words_per_code` little-endian `u64` words.
pub fn encode_code_file(codes: &PackedCodes) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + codes.data.len() * 8);
    buf.extend_from_slice(CODE_MAGIC);
    buf.extend_from_slice(&CODE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(codes.bits as u32).to_le_bytes());
    buf.extend_from_slice(&(codes.n as u64).to_le_bytes());
    for w in &codes.data {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    buf
}

pub fn decode_code_file(bytes: &[u8]) -> Result<PackedCodes> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != CODE_MAGIC {
        return Err(Error::format("code file", "missing DUCHCODE header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CODE_VERSION {
        return Err(Error::Version {
            found: version.to_string(),
            expected: CODE_VERSION.to_string(),
        });
    }
    let bits = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let n = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    let want = n * bits.div_ceil(64) * 8;
    if body.len() != want {
        return Err(Error::format(
            "code file",
            format!("{} payload bytes, expected {want}", body.len()),
        ));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    PackedCodes::new(bits, n, data)
}

/// Writes the code file and its `.ids` sidecar (one decimal id per line).
pub fn write_codes(path: &Path, codes: &PackedCodes, ids: &[u64]) -> Result<()> {
    if ids.len() != codes.len() {
        return Err(Error::dim(
            "write_codes",
            format!("{} ids for {} codes", ids.len(), codes.len()),
        ));
    }
    fs::write(path, encode_code_file(codes)).map_err(|e| Error::io(path, e))?;
    let ids_text: String = ids.iter().map(|id| format!("{id}\n")).collect();
    let p = ids_path(path);
    fs::write(&p, ids_text).map_err(|e| Error::io(&p, e))
}

pub fn read_codes(path: &Path) -> Result<(PackedCodes, Vec<u64>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let codes = decode_code_file(&fs::read(path).map_err(|e| Error::io(path, e))?)?;
    let p = ids_path(path);
    if !p.exists() {
        return Err(Error::MissingFile(p));
    }
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let ids = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.trim()
                .parse::<u64>()
                .map_err(|_| Error::format(p.display().to_string(), format!("bad id {l:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if ids.len() != codes.len() {
        return Err(Error::dim(
            "read_codes",
            format!("{} ids for {} codes", ids.len(), codes.len()),
        ));
    }
    Ok((codes, ids))
}
