//! Checkpoint serialization: a binary blob of named f64 tensors plus a JSON
//! sidecar carrying configs and run position.
//!
//! Blob layout (little endian): magic `DAMLTNSR`, format version u32, tensor
//! count u32, then per tensor: name length u32, UTF-8 name, ndim u32, each
//! dim u64, then the f64 data in row-major order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::IxDyn;

use crate::autodiff::ArrD;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DAMLTNSR";
const VERSION: u32 = 1;

/// Write named tensors; entries are sorted by name so output is canonical.
pub fn write_tensors(path: &Path, tensors: &BTreeMap<String, ArrD>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, arr) in tensors {
        let bytes = name.as_bytes();
        f.write_all(&(bytes.len() as u32).to_le_bytes())?;
        f.write_all(bytes)?;
        f.write_all(&(arr.ndim() as u32).to_le_bytes())?;
        for &d in arr.shape() {
            f.write_all(&(d as u64).to_le_bytes())?;
        }
        let standard = arr.as_standard_layout();
        for &v in standard.as_slice().expect("standard layout") {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<BTreeMap<String, ArrD>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let bad = |what: &str| Error::InvalidState(format!("corrupt checkpoint: {what}"));

    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("wrong magic"));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)?;
    if u32::from_le_bytes(u32buf) != VERSION {
        return Err(bad("unsupported version"));
    }
    f.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;

    let mut out = BTreeMap::new();
    for _ in 0..count {
        f.read_exact(&mut u32buf)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("non-utf8 tensor name"))?;
        f.read_exact(&mut u32buf)?;
        let ndim = u32::from_le_bytes(u32buf) as usize;
        let mut dims = Vec::with_capacity(ndim);
        let mut u64buf = [0u8; 8];
        for _ in 0..ndim {
            f.read_exact(&mut u64buf)?;
            dims.push(u64::from_le_bytes(u64buf) as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            f.read_exact(&mut u64buf)?;
            data.push(f64::from_le_bytes(u64buf));
        }
        let arr = ArrD::from_shape_vec(IxDyn(&dims), data).map_err(|_| bad("shape mismatch"))?;
        out.insert(name, arr);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn roundtrip_preserves_names_shapes_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "a.weight".to_string(),
            arr2(&[[1.0, -2.5], [3.25, f64::MIN_POSITIVE]]).into_dyn(),
        );
        tensors.insert("b.bias".to_string(), ndarray::arr1(&[0.0, 9.75]).into_dyn());
        tensors.insert("scalar".to_string(), ndarray::arr0(42.0).into_dyn());
        write_tensors(&path, &tensors).unwrap();
        let loaded = read_tensors(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        for (k, v) in &tensors {
            assert_eq!(&loaded[k], v, "tensor {k}");
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(read_tensors(&path).is_err());
    }
}
