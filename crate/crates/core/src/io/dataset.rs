//! Dataset directories. `save_dataset` writes a `dataset.toml` header, the
//! manifest and keypoint CSVs, and every frame as a P6 PPM. `load_dataset`
//! regenerates the clips from their manifest seeds (generation is pure), so
//! a manifest alone fully reproduces the data; the PPM frames exist for
//! inspection and for `infer --clip`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::image::{read_ppm, write_ppm, ImageError};
use crate::synth::{clip_from_record, BenchmarkKind, ClipRecord, Dataset, GenError};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum DatasetIoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error("dataset: {0}")]
    Format(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    image_h: usize,
    image_w: usize,
    span: usize,
    count: usize,
}

/// Write the full dataset directory.
pub fn save_dataset<S: Scalar>(dir: &Path, ds: &Dataset<S>) -> Result<(), DatasetIoError> {
    fs::create_dir_all(dir)?;
    let header = DatasetHeader {
        image_h: ds.image_h,
        image_w: ds.image_w,
        span: ds.span,
        count: ds.clips.len(),
    };
    fs::write(
        dir.join("dataset.toml"),
        toml::to_string_pretty(&header).expect("header serializes"),
    )?;
    fs::write(dir.join("manifest.csv"), ds.manifest_csv())?;
    fs::write(dir.join("keypoints.csv"), ds.keypoints_csv())?;
    for (i, clip) in ds.clips.iter().enumerate() {
        let clip_dir = dir.join(format!("clip_{i:04}"));
        fs::create_dir_all(&clip_dir)?;
        for (f, frame) in clip.frames.iter().enumerate() {
            write_ppm(&clip_dir.join(format!("frame_{f:02}.ppm")), frame)?;
        }
    }
    Ok(())
}

fn parse_manifest(text: &str) -> Result<Vec<ClipRecord>, DatasetIoError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| DatasetIoError::Format("empty manifest".into()))?;
    if header != "clip_id,kind,seed,params_hash" {
        return Err(DatasetIoError::Format(format!(
            "unexpected manifest header {header:?}"
        )));
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(DatasetIoError::Format(format!(
                "manifest line {}: expected 4 fields",
                lineno + 2
            )));
        }
        let parse_err = |what: &str| {
            DatasetIoError::Format(format!("manifest line {}: bad {what}", lineno + 2))
        };
        records.push(ClipRecord {
            clip_id: fields[0].parse().map_err(|_| parse_err("clip_id"))?,
            kind: BenchmarkKind::parse(fields[1]).ok_or_else(|| parse_err("kind"))?,
            seed: fields[2].parse().map_err(|_| parse_err("seed"))?,
            params_hash: u64::from_str_radix(fields[3], 16).map_err(|_| parse_err("hash"))?,
        });
    }
    Ok(records)
}

/// Rebuild a dataset from its directory by regenerating every clip from
/// its manifest seed.
pub fn load_dataset<S: Scalar>(dir: &Path) -> Result<Dataset<S>, DatasetIoError> {
    let header: DatasetHeader =
        toml::from_str(&fs::read_to_string(dir.join("dataset.toml"))?)
            .map_err(|e| DatasetIoError::Format(e.to_string()))?;
    let records = parse_manifest(&fs::read_to_string(dir.join("manifest.csv"))?)?;
    if records.len() != header.count {
        return Err(DatasetIoError::Format(format!(
            "manifest has {} records, header says {}",
            records.len(),
            header.count
        )));
    }
    let mut clips = Vec::with_capacity(records.len());
    for record in &records {
        clips.push(clip_from_record::<S>(
            record,
            header.span,
            header.image_h,
            header.image_w,
        )?);
    }
    Ok(Dataset {
        clips,
        records,
        image_h: header.image_h,
        image_w: header.image_w,
        span: header.span,
    })
}

/// Load the frames of one clip directory, ordered by file name
/// (`frame_00.ppm`, `frame_01.ppm`, ...).
pub fn load_clip_frames(dir: &Path) -> Result<Vec<Tensor<f32>>, DatasetIoError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(DatasetIoError::Format(format!(
            "no .ppm frames under {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| Ok(read_ppm(p)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::make_benchmark;

    fn temp_dir(name: &str) -> PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("tarpose-ds-{}-{name}", std::process::id()));
        p
    }

    #[test]
    fn save_load_round_trip_regenerates_identical_clips() {
        let dir = temp_dir("roundtrip");
        let ds = make_benchmark::<f32>(BenchmarkKind::Occlusion, 3, 1, 77, 64, 48).unwrap();
        save_dataset(&dir, &ds).unwrap();
        let back = load_dataset::<f32>(&dir).unwrap();
        assert_eq!(back.clips.len(), 3);
        assert_eq!(back.manifest_csv(), ds.manifest_csv());
        for (a, b) in ds.clips.iter().zip(back.clips.iter()) {
            for (fa, fb) in a.frames.iter().zip(b.frames.iter()) {
                assert!(fa
                    .data()
                    .iter()
                    .zip(fb.data().iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            assert_eq!(a.center_occlusions, b.center_occlusions);
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn clip_frames_load_in_order() {
        let dir = temp_dir("frames");
        let ds = make_benchmark::<f32>(BenchmarkKind::Plain, 1, 1, 5, 64, 48).unwrap();
        save_dataset(&dir, &ds).unwrap();
        let frames = load_clip_frames(&dir.join("clip_0000")).unwrap();
        assert_eq!(frames.len(), 3);
        // quantization to u8 is the only loss
        for (orig, loaded) in ds.clips[0].frames.iter().zip(frames.iter()) {
            for (a, b) in orig.data().iter().zip(loaded.data().iter()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn corrupt_manifest_is_rejected() {
        let dir = temp_dir("badmanifest");
        let ds = make_benchmark::<f32>(BenchmarkKind::Plain, 1, 1, 6, 64, 48).unwrap();
        save_dataset(&dir, &ds).unwrap();
        fs::write(dir.join("manifest.csv"), "clip_id,kind\n0,plain\n").unwrap();
        assert!(matches!(
            load_dataset::<f32>(&dir),
            Err(DatasetIoError::Format(_))
        ));
        fs::remove_dir_all(&dir).unwrap();
    }
}
