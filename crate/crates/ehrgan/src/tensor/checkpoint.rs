//! Binary container for named f64 tensors.
//!
//! Layout (all integers little-endian):
//! magic `NTCK` | version u32 | endian marker u32 (0x01020304) |
//! meta_len u32, meta utf-8 | count u64 | entries sorted by name, each:
//! name_len u32, name utf-8, rank u32, extents u64 * rank, data f64 * numel.
//!
//! Round-trips are bit-exact; the endian marker turns a byte-swapped file
//! into a load error instead of garbage values.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NTCK";
const VERSION: u32 = 1;
const ENDIAN_MARK: u32 = 0x0102_0304;

fn fmt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), msg: msg.into() }
}

/// Write `tensors` plus a free-form metadata string (typically `key=value`
/// lines with code version and config hashes).
pub fn save(path: &Path, meta: &str, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&ENDIAN_MARK.to_le_bytes())?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(String, BTreeMap<String, Tensor>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| fmt_err(path, "file too short for header"))?;
    if &magic != MAGIC {
        return Err(fmt_err(path, format!("bad magic {magic:?}, not a tensor container")));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::Mismatch(format!(
            "{}: container version {} (this build reads {})",
            path.display(),
            version,
            VERSION
        )));
    }
    let endian = read_u32(&mut r, path)?;
    if endian != ENDIAN_MARK {
        return Err(fmt_err(path, format!("endian marker {endian:#010x}, file not little-endian")));
    }
    let meta_len = read_u32(&mut r, path)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes).map_err(|_| fmt_err(path, "truncated metadata"))?;
    let meta = String::from_utf8(meta_bytes).map_err(|_| fmt_err(path, "metadata not UTF-8"))?;
    let count = read_u64(&mut r, path)?;
    let mut out = BTreeMap::new();
    for i in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        if name_len > 4096 {
            return Err(fmt_err(path, format!("entry {i}: name length {name_len} implausible")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|_| fmt_err(path, "truncated entry name"))?;
        let name =
            String::from_utf8(name_bytes).map_err(|_| fmt_err(path, "entry name not UTF-8"))?;
        let rank = read_u32(&mut r, path)? as usize;
        if rank > 8 {
            return Err(fmt_err(path, format!("entry {name}: rank {rank} implausible")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let e = read_u64(&mut r, path)?;
            numel = numel.saturating_mul(e.max(1));
            shape.push(e as usize);
        }
        let n: usize = shape.iter().product();
        if numel > (1 << 33) {
            return Err(fmt_err(path, format!("entry {name}: {n} elements implausible")));
        }
        let mut data = vec![0.0f64; n];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf)
                .map_err(|_| fmt_err(path, format!("entry {name}: truncated data")))?;
            *v = f64::from_le_bytes(buf);
        }
        if out.insert(name.clone(), Tensor::from_vec(&shape, data)?).is_some() {
            return Err(fmt_err(path, format!("duplicate entry {name}")));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(fmt_err(path, "trailing bytes after last entry"));
    }
    Ok((meta, out))
}

/// Parse `key=value` lines of a metadata string.
pub fn meta_map(meta: &str) -> BTreeMap<String, String> {
    meta.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| fmt_err(path, "unexpected end of file"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| fmt_err(path, "unexpected end of file"))?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_map() -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert(
            "a.weird/values".to_string(),
            Tensor::from_vec(&[2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e308]).unwrap(),
        );
        m.insert("scalar".to_string(), Tensor::scalar(-3.75));
        m.insert("empty".to_string(), Tensor::zeros(&[0]));
        m
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ntck");
        let tensors = sample_map();
        save(&path, "kind=test\nseed=7", &tensors).unwrap();
        let (meta, loaded) = load(&path).unwrap();
        assert_eq!(meta_map(&meta)["kind"], "test");
        assert_eq!(loaded.len(), tensors.len());
        for (name, t) in &tensors {
            let l = &loaded[name];
            assert_eq!(l.shape(), t.shape());
            let bits_a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = l.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "entry {name}");
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ntck");
        save(&path, "", &sample_map()).unwrap();
        let good = std::fs::read(&path).unwrap();

        // bad magic
        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(load(&path).is_err());

        // wrong version
        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load(&path), Err(Error::Mismatch(_))));

        // flipped endian marker
        let mut bad = good.clone();
        bad[8..12].copy_from_slice(&0x0403_0201u32.to_le_bytes());
        std::fs::write(&path, &bad).unwrap();
        assert!(load(&path).is_err());

        // truncation
        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(load(&path).is_err());

        // trailing junk
        let mut bad = good.clone();
        bad.push(0);
        std::fs::write(&path, &bad).unwrap();
        assert!(load(&path).is_err());
    }
}
