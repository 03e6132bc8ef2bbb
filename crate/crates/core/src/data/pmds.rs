use std::path::Path;

use super::{Dataset, Pixels, Split};
use crate::error::{Error, Result};

pub const PMDS_MAGIC: &[u8; 4] = b"PMDS";
pub const PMDS_VERSION: u32 = 1;
const HEADER_BYTES: usize = 4 + 4 + 8 + 4 * 4;

/// Serializes a byte-pixel dataset. Labels are written as `u16`.
pub fn encode_pmds(ds: &Dataset) -> Result<Vec<u8>> {
    let Pixels::U8(px) = &ds.pixels else {
        return Err(Error::invalid("PMDS stores 8-bit pixels only"));
    };
    let fits = |v: usize| u32::try_from(v).map_err(|_| Error::invalid(format!("{v} exceeds u32")));
    let mut out = Vec::with_capacity(HEADER_BYTES + 2 * ds.len() + px.len());
    out.extend_from_slice(PMDS_MAGIC);
    out.extend_from_slice(&PMDS_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for v in [ds.height, ds.width, ds.channels, ds.num_classes] {
        out.extend_from_slice(&fits(v)?.to_le_bytes());
    }
    for &y in &ds.labels {
        let y = u16::try_from(y).map_err(|_| Error::invalid(format!("label {y} exceeds u16")))?;
        out.extend_from_slice(&y.to_le_bytes());
    }
    out.extend_from_slice(px);
    Ok(out)
}

pub fn decode_pmds(bytes: &[u8], name: &str, split: Split) -> Result<Dataset> {
    let bad = |msg: String| Error::format(format!("PMDS {name}"), msg);
    if bytes.len() < HEADER_BYTES {
        return Err(bad(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != PMDS_MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let version = u32_at(4) as u32;
    if version != PMDS_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let (h, w, c, classes) = (u32_at(16), u32_at(20), u32_at(24), u32_at(28));
    let expected = usize::try_from(n)
        .ok()
        .and_then(|n| {
            let px = n.checked_mul(h)?.checked_mul(w)?.checked_mul(c)?;
            HEADER_BYTES.checked_add(n.checked_mul(2)?)?.checked_add(px)
        })
        .ok_or_else(|| bad("header extents overflow".into()))?;
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let n = n as usize;
    let labels: Vec<usize> = bytes[HEADER_BYTES..HEADER_BYTES + 2 * n]
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
        .collect();
    let pixels = bytes[HEADER_BYTES + 2 * n..].to_vec();
    Dataset::new(name, split, (h, w, c), classes, Pixels::U8(pixels), labels)
        .map_err(|e| bad(e.to_string()))
}

pub fn write_pmds(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pmds(ds)?).map_err(|e| Error::io(path, e))
}

pub fn load_raw_tensor_dataset(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "pmds".into());
    decode_pmds(&bytes, &name, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn minimal() -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"PMDS");
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u64.to_le_bytes());
        for v in [2u32, 2, 1, 3] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&2u16.to_le_bytes());
        b.extend_from_slice(&[1, 2, 3, 4]);
        b
    }

    #[test]
    fn minimal_file_parses() {
        let ds = decode_pmds(&minimal(), "m", Split::Train).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!((ds.height, ds.width, ds.channels), (2, 2, 1));
        assert_eq!(ds.labels, vec![2]);
        assert_eq!(encode_pmds(&ds).unwrap(), minimal());
    }

    #[test]
    fn rejects_bad_files() {
        let mut b = minimal();
        b[32] = 3; // label == num_classes
        assert!(decode_pmds(&b, "m", Split::Train).is_err());
        let mut b = minimal();
        b[0] = b'X';
        assert!(decode_pmds(&b, "m", Split::Train).is_err());
        let mut b = minimal();
        b[4] = 2;
        assert!(decode_pmds(&b, "m", Split::Train).is_err());
        let b = minimal();
        assert!(decode_pmds(&b[..b.len() - 1], "m", Split::Train).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_byte_identical(
            n in 1usize..6, h in 1usize..5, w in 1usize..5, c in 1usize..4,
            classes in 1usize..7, seed in any::<u64>(),
        ) {
            use rand::Rng;
            let mut g = crate::rng::seeded(seed);
            let px: Vec<u8> = (0..n * h * w * c).map(|_| g.random()).collect();
            let labels: Vec<usize> = (0..n).map(|_| g.random_range(0..classes)).collect();
            let ds = Dataset::new("p", Split::Train, (h, w, c), classes, Pixels::U8(px), labels).unwrap();
            let bytes = encode_pmds(&ds).unwrap();
            let back = decode_pmds(&bytes, "p", Split::Train).unwrap();
            prop_assert_eq!(&back, &ds);
            prop_assert_eq!(encode_pmds(&back).unwrap(), bytes);
        }
    }
}
