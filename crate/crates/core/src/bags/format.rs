//! Binary bag files.
//!
//! Layout, all little-endian:
//!
//! | offset | size      | field                                   |
//! |--------|-----------|-----------------------------------------|
//! | 0      | 4         | magic `WSDB`                            |
//! | 4      | 4         | version, `u32` = 1                      |
//! | 8      | 4         | instance count `n`, `u32`               |
//! | 12     | 4         | feature dimension `d`, `u32`            |
//! | 16     | 4·n·d     | features, `f32`, row-major              |
//! | ...    | 8·n       | patch coordinates, `(i32 x, i32 y)`     |

use std::fs;
use std::path::Path;

use super::{Bag, BagError};
use crate::diff::Tensor;

pub const MAGIC: [u8; 4] = *b"WSDB";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_bag(bag: &Bag) -> Vec<u8> {
    let (n, d) = (bag.n(), bag.dim());
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * d + 8 * n);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for &v in bag.features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &(x, y) in &bag.coords {
        out.extend_from_slice(&x.to_le_bytes());
        out.extend_from_slice(&y.to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn i32_at(bytes: &[u8], at: usize) -> i32 {
    i32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_bag(bytes: &[u8], slide_id: &str) -> Result<Bag, BagError> {
    if bytes.len() < 4 {
        return Err(BagError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(BagError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(BagError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(BagError::UnsupportedVersion(version));
    }
    let n = u32_at(bytes, 8) as usize;
    let d = u32_at(bytes, 12) as usize;
    if n == 0 || d == 0 {
        return Err(BagError::EmptyDimension { n, d });
    }
    let expected = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_mul(4))
        .and_then(|f| f.checked_add(8 * n))
        .and_then(|p| p.checked_add(HEADER_LEN))
        .ok_or(BagError::EmptyDimension { n, d })?;
    if bytes.len() != expected {
        return Err(if bytes.len() < expected {
            BagError::Truncated {
                expected,
                actual: bytes.len(),
            }
        } else {
            BagError::TrailingBytes {
                expected,
                actual: bytes.len(),
            }
        });
    }
    let mut features = Vec::with_capacity(n * d);
    let mut at = HEADER_LEN;
    for _ in 0..n * d {
        let v = f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(BagError::NonFinite {
                index: (at - HEADER_LEN) / 4,
            });
        }
        features.push(f64::from(v));
        at += 4;
    }
    let mut coords = Vec::with_capacity(n);
    for _ in 0..n {
        coords.push((i32_at(bytes, at), i32_at(bytes, at + 4)));
        at += 8;
    }
    Ok(Bag {
        slide_id: slide_id.to_string(),
        features: Tensor::matrix(n, d, features).expect("checked length"),
        coords,
    })
}

pub fn write_bag(bag: &Bag, path: impl AsRef<Path>) -> Result<(), BagError> {
    bag.validate()?;
    fs::write(path.as_ref(), encode_bag(bag)).map_err(|e| BagError::io(path.as_ref(), e))
}

/// Reads a bag file. The slide id is taken from the file stem.
pub fn read_bag(path: impl AsRef<Path>) -> Result<Bag, BagError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| BagError::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_bag(&bytes, &id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bag(n: usize, d: usize, seed: u32) -> Bag {
        let features = (0..n * d)
            .map(|i| f64::from(((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / 1e9))
            .collect();
        Bag {
            slide_id: "b".into(),
            features: Tensor::matrix(n, d, features).unwrap(),
            coords: (0..n as i32).map(|i| (i, -i)).collect(),
        }
    }

    #[test]
    fn minimal_bag_round_trips() {
        let b = Bag {
            slide_id: "m".into(),
            features: Tensor::matrix(1, 1, vec![0.0]).unwrap(),
            coords: vec![(0, 0)],
        };
        let back = decode_bag(&encode_bag(&b), "m").unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode_bag(&bag(2, 3, 1));
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_bag(&bytes, "x"), Err(BagError::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn rejects_version_and_sizes() {
        let good = encode_bag(&bag(2, 3, 1));
        let mut v2 = good.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode_bag(&v2, "x"),
            Err(BagError::UnsupportedVersion(2))
        ));

        assert!(matches!(
            decode_bag(&good[..good.len() - 1], "x"),
            Err(BagError::Truncated { .. })
        ));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(
            decode_bag(&long, "x"),
            Err(BagError::TrailingBytes { .. })
        ));

        let mut zero = good.clone();
        zero[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            decode_bag(&zero, "x"),
            Err(BagError::EmptyDimension { n: 0, .. })
        ));

        let mut wrong_d = good.clone();
        wrong_d[12..16].copy_from_slice(&4u32.to_le_bytes());
        assert!(matches!(
            decode_bag(&wrong_d, "x"),
            Err(BagError::Truncated { .. })
        ));

        assert!(matches!(
            decode_bag(&good[..10], "x"),
            Err(BagError::Truncated { .. })
        ));
    }

    #[test]
    fn rejects_non_finite_payload() {
        let mut bytes = encode_bag(&bag(1, 2, 1));
        bytes[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_bag(&bytes, "x"),
            Err(BagError::NonFinite { index: 1 })
        ));
    }

    proptest! {
        #[test]
        fn byte_identical_round_trip(
            n in 1usize..20,
            d in 1usize..9,
            vals in proptest::collection::vec(-1e6f32..1e6, 180),
            xs in proptest::collection::vec(any::<i32>(), 40),
        ) {
            let features: Vec<f64> = (0..n * d).map(|i| f64::from(vals[i % vals.len()])).collect();
            let b = Bag {
                slide_id: "p".into(),
                features: Tensor::matrix(n, d, features).unwrap(),
                coords: (0..n).map(|i| (xs[2 * i], xs[2 * i + 1])).collect(),
            };
            let bytes = encode_bag(&b);
            let back = decode_bag(&bytes, "p").unwrap();
            prop_assert_eq!(&back, &b);
            prop_assert_eq!(encode_bag(&back), bytes);
        }
    }
}
