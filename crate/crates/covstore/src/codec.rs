//! `[n, k]` maximum-distance-separable erasure coding: systematic
//! Reed-Solomon over GF(2^8).
//!
//! A value is split into `k` equally sized data fragments (zero-padded to a
//! multiple of `k`); fragment `i` of the encoding is the projection of the
//! value onto index `i`. Indices below `k` carry the data fragments verbatim,
//! the remaining `n - k` carry parity, and any `k` distinct elements
//! reconstruct the value exactly.

use thiserror::Error;

// ---------------------------------------------------------------------------
// GF(2^8) arithmetic
// ---------------------------------------------------------------------------

/// Reduction polynomial x^8 + x^4 + x^3 + x^2 + 1.
const GF_POLY: u16 = 0x11d;

struct GfTables {
    exp: [u8; 512],
    log: [u8; 256],
}

const fn build_tables() -> GfTables {
    let mut exp = [0u8; 512];
    let mut log = [0u8; 256];
    let mut x: u16 = 1;
    let mut i = 0;
    while i < 255 {
        exp[i] = x as u8;
        log[x as usize] = i as u8;
        x <<= 1;
        if x & 0x100 != 0 {
            x ^= GF_POLY;
        }
        i += 1;
    }
    // Double the table so products of logs index without a modulo.
    let mut j = 255;
    while j < 512 {
        exp[j] = exp[j - 255];
        j += 1;
    }
    GfTables { exp, log }
}

static TABLES: GfTables = build_tables();

#[inline]
fn gf_mul(a: u8, b: u8) -> u8 {
    if a == 0 || b == 0 {
        return 0;
    }
    TABLES.exp[TABLES.log[a as usize] as usize + TABLES.log[b as usize] as usize]
}

#[inline]
fn gf_div(a: u8, b: u8) -> u8 {
    debug_assert!(b != 0, "division by zero in GF(256)");
    if a == 0 {
        return 0;
    }
    TABLES.exp[255 + TABLES.log[a as usize] as usize - TABLES.log[b as usize] as usize]
}

// ---------------------------------------------------------------------------
// Coded elements
// ---------------------------------------------------------------------------

/// One of the `n` coded elements of an encoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodedElement {
    /// Position in `[0, n)`; doubles as the evaluation point of the code.
    pub index: u16,
    /// `⌈|v|/k⌉` payload bytes (identical length across one encoding).
    pub payload: Vec<u8>,
    /// Exact length of the original value, for stripping the padding.
    pub orig_len: u64,
}

impl CodedElement {
    /// Wire layout: index (u16 BE) ‖ orig_len (u64 BE) ‖ payload.
    pub const HEADER_LEN: usize = 2 + 8;

    pub fn wire_len(&self) -> usize {
        Self::HEADER_LEN + self.payload.len()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.index.to_be_bytes());
        out.extend_from_slice(&self.orig_len.to_be_bytes());
        out.extend_from_slice(&self.payload);
    }

    pub fn decode(b: &[u8]) -> Option<CodedElement> {
        if b.len() < Self::HEADER_LEN {
            return None;
        }
        Some(CodedElement {
            index: u16::from_be_bytes(b[..2].try_into().ok()?),
            orig_len: u64::from_be_bytes(b[2..10].try_into().ok()?),
            payload: b[10..].to_vec(),
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("invalid code parameters n={n}, k={k}")]
    BadParams { n: usize, k: usize },
    #[error("{got} elements present, {need} needed to decode")]
    InsufficientFragments { got: usize, need: usize },
    #[error("elements disagree on shape or repeat an index")]
    Corrupt,
}

fn check_params(n: usize, k: usize) -> Result<(), CodecError> {
    if k == 0 || k > n || n > 255 {
        return Err(CodecError::BadParams { n, k });
    }
    Ok(())
}

/// Lagrange basis coefficients for evaluating, at point `target`, the unique
/// degree `< k` polynomial through the points in `xs`.
fn lagrange_coeffs(xs: &[u8], target: u8) -> Vec<u8> {
    let k = xs.len();
    let mut coeffs = vec![0u8; k];
    for i in 0..k {
        let mut num = 1u8;
        let mut den = 1u8;
        for m in 0..k {
            if m == i {
                continue;
            }
            // Addition and subtraction coincide in GF(2^8).
            num = gf_mul(num, target ^ xs[m]);
            den = gf_mul(den, xs[i] ^ xs[m]);
        }
        coeffs[i] = gf_div(num, den);
    }
    coeffs
}

/// Splits `value` into `k` data fragments and derives `n - k` parity
/// fragments; element `i` is the projection of the value onto index `i`.
/// Deterministic for fixed inputs.
pub fn encode(value: &[u8], n: usize, k: usize) -> Result<Vec<CodedElement>, CodecError> {
    check_params(n, k)?;
    let orig_len = value.len() as u64;
    let frag_len = value.len().div_ceil(k);

    let mut fragments: Vec<Vec<u8>> = Vec::with_capacity(n);
    for i in 0..k {
        let start = i * frag_len;
        let mut frag = vec![0u8; frag_len];
        if start < value.len() {
            let end = (start + frag_len).min(value.len());
            frag[..end - start].copy_from_slice(&value[start..end]);
        }
        fragments.push(frag);
    }

    let xs: Vec<u8> = (0..k as u8).collect();
    for target in k..n {
        let coeffs = lagrange_coeffs(&xs, target as u8);
        let mut parity = vec![0u8; frag_len];
        for (i, c) in coeffs.iter().enumerate() {
            if *c == 0 {
                continue;
            }
            let src = &fragments[i];
            for (p, s) in parity.iter_mut().zip(src.iter()) {
                *p ^= gf_mul(*c, *s);
            }
        }
        fragments.push(parity);
    }

    Ok(fragments
        .into_iter()
        .enumerate()
        .map(|(index, payload)| CodedElement {
            index: index as u16,
            payload,
            orig_len,
        })
        .collect())
}

/// Reconstructs the original value from any `k` or more distinct elements of
/// one encoding.
pub fn decode(elements: &[CodedElement], n: usize, k: usize) -> Result<Vec<u8>, CodecError> {
    check_params(n, k)?;
    if elements.len() < k {
        return Err(CodecError::InsufficientFragments {
            got: elements.len(),
            need: k,
        });
    }
    let orig_len = elements[0].orig_len;
    let frag_len = elements[0].payload.len();
    if frag_len != (orig_len as usize).div_ceil(k) {
        return Err(CodecError::Corrupt);
    }
    let mut seen = [false; 256];
    for e in elements {
        if e.index as usize >= n
            || e.orig_len != orig_len
            || e.payload.len() != frag_len
            || seen[e.index as usize]
        {
            return Err(CodecError::Corrupt);
        }
        seen[e.index as usize] = true;
    }

    // Prefer data elements: they are copied through untouched.
    let mut sources: Vec<&CodedElement> = elements.iter().collect();
    sources.sort_by_key(|e| e.index);
    sources.truncate(k);

    let xs: Vec<u8> = sources.iter().map(|e| e.index as u8).collect();
    let mut data: Vec<Option<&[u8]>> = vec![None; k];
    for e in &sources {
        if (e.index as usize) < k {
            data[e.index as usize] = Some(&e.payload);
        }
    }

    let mut out = Vec::with_capacity(k * frag_len);
    let mut recovered: Vec<Vec<u8>> = Vec::new();
    for t in 0..k {
        if data[t].is_some() {
            continue;
        }
        let coeffs = lagrange_coeffs(&xs, t as u8);
        let mut frag = vec![0u8; frag_len];
        for (src, c) in sources.iter().zip(coeffs.iter()) {
            if *c == 0 {
                continue;
            }
            for (f, s) in frag.iter_mut().zip(src.payload.iter()) {
                *f ^= gf_mul(*c, *s);
            }
        }
        recovered.push(frag);
    }
    let mut rec_it = recovered.into_iter();
    for t in 0..k {
        match data[t] {
            Some(frag) => out.extend_from_slice(frag),
            None => out.extend_from_slice(&rec_it.next().expect("recovered fragment")),
        }
    }
    out.truncate(orig_len as usize);
    Ok(out)
}

/// Wire size of one element of an `[n, k]` encoding of `value_len` bytes,
/// without materializing the encoding.
pub fn element_wire_len(value_len: usize, k: usize) -> usize {
    CodedElement::HEADER_LEN + value_len.div_ceil(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(len: usize, seed: u64) -> Vec<u8> {
        // Small deterministic generator, independent of the code under test.
        let mut state = seed.wrapping_add(0x9e3779b97f4a7c15);
        (0..len)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 24) as u8
            })
            .collect()
    }

    fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut cur = Vec::new();
        fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == k {
                out.push(cur.clone());
                return;
            }
            for i in start..n {
                cur.push(i);
                rec(i + 1, n, k, cur, out);
                cur.pop();
            }
        }
        rec(0, n, k, &mut cur, &mut out);
        out
    }

    #[test]
    fn k1_is_replication() {
        let v = b"replicate me".to_vec();
        let elems = encode(&v, 3, 1).unwrap();
        assert_eq!(elems.len(), 3);
        for e in &elems {
            assert_eq!(e.payload, v);
        }
        for e in &elems {
            assert_eq!(decode(std::slice::from_ref(e), 3, 1).unwrap(), v);
        }
    }

    #[test]
    fn empty_value() {
        let elems = encode(&[], 6, 2).unwrap();
        assert_eq!(elems.len(), 6);
        for e in &elems {
            assert!(e.payload.is_empty());
            assert_eq!(e.orig_len, 0);
        }
        assert_eq!(decode(&elems[..2], 6, 2).unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn every_two_subset_of_six_decodes() {
        // Brute-force roundtrip oracle over all C(6, 2) = 15 subsets.
        let v = sample(1024, 7);
        let elems = encode(&v, 6, 2).unwrap();
        let all = subsets(6, 2);
        assert_eq!(all.len(), 15);
        for subset in all {
            let picked: Vec<CodedElement> =
                subset.iter().map(|i| elems[*i].clone()).collect();
            assert_eq!(decode(&picked, 6, 2).unwrap(), v, "subset {subset:?}");
        }
    }

    #[test]
    fn below_threshold_fails() {
        let v = sample(64, 1);
        let elems = encode(&v, 6, 2).unwrap();
        assert_eq!(
            decode(&elems[..1], 6, 2),
            Err(CodecError::InsufficientFragments { got: 1, need: 2 })
        );
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let v = sample(64, 2);
        let elems = encode(&v, 5, 2).unwrap();
        // Duplicate index.
        let dup = vec![elems[0].clone(), elems[0].clone()];
        assert_eq!(decode(&dup, 5, 2), Err(CodecError::Corrupt));
        // orig_len mismatch.
        let mut bad = vec![elems[0].clone(), elems[1].clone()];
        bad[1].orig_len = 63;
        assert_eq!(decode(&bad, 5, 2), Err(CodecError::Corrupt));
    }

    #[test]
    fn bad_params_rejected() {
        assert!(encode(b"x", 3, 0).is_err());
        assert!(encode(b"x", 3, 4).is_err());
        assert!(encode(b"x", 256, 2).is_err());
    }

    #[test]
    fn storage_ratio_within_padding() {
        for (len, n, k) in [(1000usize, 6usize, 2usize), (4097, 7, 3), (10, 5, 4)] {
            let v = sample(len, len as u64);
            let elems = encode(&v, n, k).unwrap();
            let total: usize = elems.iter().map(|e| e.payload.len()).sum();
            let ideal = n * len / k;
            assert!(total >= ideal);
            assert!(total <= n * (len + k - 1) / k + n);
            assert_eq!(elems[0].wire_len(), element_wire_len(len, k));
        }
    }

    #[test]
    fn wire_roundtrip() {
        let v = sample(100, 3);
        let elems = encode(&v, 4, 2).unwrap();
        for e in &elems {
            let mut buf = Vec::new();
            e.encode_into(&mut buf);
            assert_eq!(buf.len(), e.wire_len());
            assert_eq!(CodedElement::decode(&buf).as_ref(), Some(e));
        }
    }

    #[test]
    fn exhaustive_small_mds_sweep() {
        // Every k-subset decodes, for all n ≤ 6 and all valid k.
        for n in 1..=6usize {
            for k in 1..=n {
                let v = sample(97, (n * 16 + k) as u64);
                let elems = encode(&v, n, k).unwrap();
                for subset in subsets(n, k) {
                    let picked: Vec<CodedElement> =
                        subset.iter().map(|i| elems[*i].clone()).collect();
                    assert_eq!(decode(&picked, n, k).unwrap(), v, "n={n} k={k}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn random_subset_roundtrip(
            len in 0usize..300,
            seed in 0u64..1000,
            n in 2usize..9,
            pick in prop::collection::vec(0usize..100, 1..9),
        ) {
            let k = 1 + seed as usize % n;
            let v = sample(len, seed);
            let elems = encode(&v, n, k).unwrap();
            // Derive a k-subset from the pick vector.
            let mut idx: Vec<usize> = (0..n).collect();
            for (i, p) in pick.iter().enumerate().take(n - 1) {
                let j = i + p % (n - i);
                idx.swap(i, j);
            }
            idx.truncate(k);
            let picked: Vec<CodedElement> = idx.iter().map(|i| elems[*i].clone()).collect();
            prop_assert_eq!(decode(&picked, n, k).unwrap(), v);
        }
    }
}
