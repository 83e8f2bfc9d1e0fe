//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   "TARV"            4 bytes
//! version u32               (currently 1)
//! count   u32
//! entry*: name_len u32, name UTF-8, ndim u32, dims u64 each,
//!         payload f32 row-major
//! ```
//!
//! Writes are atomic (temp file + rename); reads validate magic, version,
//! and every length before allocating, and reject trailing bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::params::ParamSet;
use crate::tensor::Scalar;

pub const MAGIC: [u8; 4] = *b"TARV";
pub const VERSION: u32 = 1;

/// Guard against absurd allocation requests from corrupt headers.
const MAX_NDIM: u32 = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
    #[error("checkpoint carries unknown tensor {0:?}")]
    UnknownTensor(String),
    #[error("tensor {name:?} has shape {got:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

/// Serialize entries to `path` atomically: write `<path>.tmp`, then rename.
pub fn write_checkpoint(path: &Path, entries: &[CheckpointEntry]) -> Result<(), CheckpointError> {
    for (i, e) in entries.iter().enumerate() {
        if entries[..i].iter().any(|other| other.name == e.name) {
            return Err(CheckpointError::DuplicateName(e.name.clone()));
        }
        let numel: u64 = e.dims.iter().product();
        assert_eq!(
            numel as usize,
            e.data.len(),
            "entry {:?} dims/payload disagree",
            e.name
        );
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for &d in &e.dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let tmp = path.with_extension("tarv.tmp");
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(&buf)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.offset + n > self.bytes.len() {
            return Err(CheckpointError::Parse {
                offset: self.offset,
                msg: format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.offset
                ),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8-byte slice")))
    }
}

/// Parse a checkpoint file, validating every length before allocation.
pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>, CheckpointError> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        offset: 0,
    };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::Parse {
            offset: 0,
            msg: format!("bad magic {magic:02x?}, expected {MAGIC:02x?}"),
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Parse {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = cur.u32("entry count")? as usize;
    let mut entries = Vec::new();
    for i in 0..count {
        let name_offset = cur.offset;
        let name_len = cur.u32("name length")? as usize;
        let name_bytes = cur.take(name_len, "name")?;
        let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| CheckpointError::Parse {
            offset: name_offset,
            msg: format!("entry {i} name is not valid UTF-8"),
        })?;
        if entries.iter().any(|e: &CheckpointEntry| e.name == name) {
            return Err(CheckpointError::DuplicateName(name));
        }
        let ndim = cur.u32("ndim")?;
        if ndim > MAX_NDIM {
            return Err(CheckpointError::Parse {
                offset: cur.offset - 4,
                msg: format!("entry {name:?} claims {ndim} dimensions"),
            });
        }
        let mut dims = Vec::with_capacity(ndim as usize);
        let mut numel: u64 = 1;
        for _ in 0..ndim {
            let d = cur.u64("dimension")?;
            numel = numel.checked_mul(d).ok_or(CheckpointError::Parse {
                offset: cur.offset - 8,
                msg: format!("entry {name:?} dimension product overflows"),
            })?;
            dims.push(d);
        }
        let payload_bytes = (numel as usize).checked_mul(4).ok_or(CheckpointError::Parse {
            offset: cur.offset,
            msg: format!("entry {name:?} payload size overflows"),
        })?;
        let payload = cur.take(payload_bytes, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push(CheckpointEntry { name, dims, data });
    }
    if cur.offset != bytes.len() {
        return Err(CheckpointError::Parse {
            offset: cur.offset,
            msg: format!("{} unknown trailing bytes", bytes.len() - cur.offset),
        });
    }
    Ok(entries)
}

/// Save every parameter of a set, converting to f32 payloads. With an f32
/// parameter set the round trip is bit-exact.
pub fn save_params<S: Scalar>(path: &Path, set: &ParamSet<S>) -> Result<(), CheckpointError> {
    let entries: Vec<CheckpointEntry> = set
        .iter()
        .map(|(name, tensor)| CheckpointEntry {
            name: name.to_string(),
            dims: tensor.shape().iter().map(|&d| d as u64).collect(),
            data: tensor.data().iter().map(|&v| v.to_f64() as f32).collect(),
        })
        .collect();
    write_checkpoint(path, &entries)
}

/// Fill an existing parameter set from a checkpoint. Names and shapes must
/// match the set exactly, in either direction.
pub fn load_params<S: Scalar>(path: &Path, set: &mut ParamSet<S>) -> Result<(), CheckpointError> {
    let entries = read_checkpoint(path)?;
    for e in &entries {
        if set.find(&e.name).is_none() {
            return Err(CheckpointError::UnknownTensor(e.name.clone()));
        }
    }
    let ids: Vec<_> = set.ids().collect();
    for id in ids {
        let name = set.name(id).to_string();
        let entry = entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        let got: Vec<usize> = entry.dims.iter().map(|&d| d as usize).collect();
        let expected = set.get(id).shape().to_vec();
        if got != expected {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected,
                got,
            });
        }
        for (dst, &src) in set.get_mut(id).data_mut().iter_mut().zip(entry.data.iter()) {
            *dst = S::from_f64(src as f64);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn temp_path(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("tarpose-ckpt-{}-{name}", std::process::id()));
        p
    }

    fn random_entries(seed: u64) -> Vec<CheckpointEntry> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        [("a.w", vec![2u64, 3]), ("b.bias", vec![4]), ("c", vec![2, 2, 2])]
            .into_iter()
            .map(|(name, dims)| {
                let numel: u64 = dims.iter().product();
                CheckpointEntry {
                    name: name.to_string(),
                    dims,
                    data: (0..numel).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
                }
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let path = temp_path("roundtrip");
        let entries = random_entries(1);
        write_checkpoint(&path, &entries).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.len(), entries.len());
        for (a, b) in entries.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.dims, b.dims);
            assert!(a
                .data
                .iter()
                .zip(b.data.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn empty_set_is_twelve_bytes_and_rereadable() {
        let path = temp_path("empty");
        write_checkpoint(&path, &[]).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 12);
        assert!(read_checkpoint(&path).unwrap().is_empty());
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn zero_size_tensor_round_trips() {
        let path = temp_path("zerosize");
        let entries = vec![CheckpointEntry {
            name: "empty".into(),
            dims: vec![0, 3],
            data: vec![],
        }];
        write_checkpoint(&path, &entries).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, entries);
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn truncation_is_a_parse_error_not_a_crash() {
        let path = temp_path("trunc");
        write_checkpoint(&path, &random_entries(2)).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [0, 3, 7, 11, 13, bytes.len() - 5] {
            fs::write(&path, &bytes[..cut]).unwrap();
            let err = read_checkpoint(&path).unwrap_err();
            assert!(
                matches!(err, CheckpointError::Parse { .. }),
                "cut at {cut}: {err}"
            );
            let msg = err.to_string();
            assert!(msg.contains("byte"), "offset missing from: {msg}");
        }
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn corrupt_magic_and_trailing_bytes_are_rejected() {
        let path = temp_path("magic");
        write_checkpoint(&path, &random_entries(3)).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let good = bytes.clone();

        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("magic"));

        let mut extended = good;
        extended.push(0xAB);
        fs::write(&path, &extended).unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("trailing"));
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn oversized_header_claims_do_not_allocate() {
        let path = temp_path("bigclaim");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes()); // absurd name length
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(CheckpointError::Parse { .. })
        ));
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn param_set_save_load_round_trip() {
        let path = temp_path("params");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut set = ParamSet::<f32>::new();
        let a = set.add(
            "enc.w",
            Tensor::new(vec![3, 2], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        );
        set.add("enc.b", Tensor::zeros(&[2]));
        save_params(&path, &set).unwrap();

        let original = set.get(a).data().to_vec();
        set.get_mut(a).data_mut().fill(0.0);
        load_params(&path, &mut set).unwrap();
        assert!(set
            .get(a)
            .data()
            .iter()
            .zip(original.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));

        // a set with an extra parameter must reject the checkpoint
        let mut bigger = ParamSet::<f32>::new();
        bigger.add("enc.w", Tensor::zeros(&[3, 2]));
        bigger.add("enc.b", Tensor::zeros(&[2]));
        bigger.add("other", Tensor::zeros(&[1]));
        assert!(matches!(
            load_params(&path, &mut bigger),
            Err(CheckpointError::MissingTensor(_))
        ));
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn shape_mismatch_is_reported_by_name() {
        let path = temp_path("shapes");
        let mut set = ParamSet::<f32>::new();
        set.add("w", Tensor::zeros(&[2, 2]));
        save_params(&path, &set).unwrap();
        let mut other = ParamSet::<f32>::new();
        other.add("w", Tensor::zeros(&[4]));
        let err = load_params(&path, &mut other).unwrap_err();
        assert!(matches!(err, CheckpointError::ShapeMismatch { .. }));
        assert!(err.to_string().contains('w'));
        fs::remove_file(&path).unwrap();
    }
}
