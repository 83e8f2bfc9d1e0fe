//! PGM (P5) and PPM (P6) emission and parsing: heatmap export with per-map
//! min-max normalization, frame export, skeleton overlays, and the readers
//! the CLI uses to load clip directories.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::model::Keypoint;
use crate::synth::SkeletonSpec;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
}

/// Write one heatmap as a P5 PGM, min-max normalized per map. A constant
/// map normalizes to all zeros. Visualization only; never feeds back into
/// computation.
pub fn write_pgm<S: Scalar>(path: &Path, map: &Tensor<S>) -> Result<(), ImageError> {
    assert_eq!(map.shape().len(), 2, "write_pgm expects an h x w map");
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in map.data() {
        lo = lo.min(v.to_f64());
        hi = hi.max(v.to_f64());
    }
    let range = hi - lo;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in map.data() {
        let g = if range > 0.0 {
            ((v.to_f64() - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        };
        bytes.push(g);
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Write an RGB frame (3×H×W, values in [0,1]) as a P6 PPM.
pub fn write_ppm<S: Scalar>(path: &Path, frame: &Tensor<S>) -> Result<(), ImageError> {
    assert_eq!(frame.shape().len(), 3, "write_ppm expects 3 x H x W");
    assert_eq!(frame.shape()[0], 3, "write_ppm expects 3 channels");
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = frame.data()[(c * h + y) * w + x].to_f64();
                bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Frame overlay: parent-bone segments plus 3×3 markers at each visible
/// keypoint, written as a P6 PPM.
pub fn write_overlay_ppm<S: Scalar>(
    path: &Path,
    frame: &Tensor<S>,
    keypoints: &[Keypoint],
    skeleton: &SkeletonSpec,
) -> Result<(), ImageError> {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let mut rgb: Vec<f64> = frame.data().iter().map(|&v| v.to_f64()).collect();

    let mut draw = |x: i64, y: i64, color: [f64; 3]| {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            return;
        }
        for (c, &col) in color.iter().enumerate() {
            rgb[(c * h + y as usize) * w + x as usize] = col;
        }
    };

    // bones as Bresenham lines
    for (j, parent) in skeleton.parents.iter().enumerate() {
        let Some(p) = parent else { continue };
        let (a, b) = (&keypoints[*p], &keypoints[j]);
        if !a.visible || !b.visible {
            continue;
        }
        let (mut x0, mut y0) = (a.x.round() as i64, a.y.round() as i64);
        let (x1, y1) = (b.x.round() as i64, b.y.round() as i64);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            draw(x0, y0, [1.0, 1.0, 1.0]);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    // 3x3 markers
    for kp in keypoints {
        if !kp.visible {
            continue;
        }
        let (cx, cy) = (kp.x.round() as i64, kp.y.round() as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                draw(cx + dx, cy + dy, [1.0, 0.1, 0.1]);
            }
        }
    }

    let overlay = Tensor::<f64>::new(vec![3, h, w], rgb).expect("overlay buffer matches dims");
    write_ppm(path, &overlay)
}

fn parse_header<'a>(
    bytes: &'a [u8],
    magic: &str,
    path: &Path,
) -> Result<(usize, usize, &'a [u8]), ImageError> {
    let err = |msg: String| ImageError::Parse {
        path: path.display().to_string(),
        msg,
    };
    // header tokens separated by whitespace, '#' starts a comment line
    let mut pos = 0usize;
    let mut tokens = Vec::new();
    while tokens.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos > start {
            tokens.push(
                std::str::from_utf8(&bytes[start..pos])
                    .map_err(|_| err("non-ASCII header".into()))?,
            );
        }
    }
    if tokens.len() < 4 {
        return Err(err("truncated header".into()));
    }
    if tokens[0] != magic {
        return Err(err(format!("expected {magic}, found {}", tokens[0])));
    }
    let w: usize = tokens[1].parse().map_err(|_| err("bad width".into()))?;
    let h: usize = tokens[2].parse().map_err(|_| err("bad height".into()))?;
    let maxval: usize = tokens[3].parse().map_err(|_| err("bad maxval".into()))?;
    if maxval != 255 {
        return Err(err(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    if pos > bytes.len() {
        return Err(err("missing payload".into()));
    }
    Ok((h, w, &bytes[pos..]))
}

/// Parse a P5 PGM into (h, w, grayscale bytes).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), ImageError> {
    let bytes = fs::read(path)?;
    let (h, w, payload) = parse_header(&bytes, "P5", path)?;
    if payload.len() != h * w {
        return Err(ImageError::Parse {
            path: path.display().to_string(),
            msg: format!("payload {} bytes, expected {}", payload.len(), h * w),
        });
    }
    Ok((h, w, payload.to_vec()))
}

/// Parse a P6 PPM into a 3×H×W tensor with values in [0,1].
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>, ImageError> {
    let bytes = fs::read(path)?;
    let (h, w, payload) = parse_header(&bytes, "P6", path)?;
    if payload.len() != 3 * h * w {
        return Err(ImageError::Parse {
            path: path.display().to_string(),
            msg: format!("payload {} bytes, expected {}", payload.len(), 3 * h * w),
        });
    }
    let mut out = Tensor::<f32>::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = payload[(y * w + x) * 3 + c] as f32 / 255.0;
                out.data_mut()[(c * h + y) * w + x] = v;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_path(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("tarpose-img-{}-{name}", std::process::id()));
        p
    }

    #[test]
    fn constant_heatmap_exports_all_zeros() {
        let path = temp_path("const.pgm");
        write_pgm(&path, &Tensor::<f32>::full(&[4, 5], 0.7)).unwrap();
        let (h, w, data) = read_pgm(&path).unwrap();
        assert_eq!((h, w), (4, 5));
        assert!(data.iter().all(|&b| b == 0));
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn spike_heatmap_exports_single_255() {
        let path = temp_path("spike.pgm");
        let mut map = Tensor::<f32>::zeros(&[4, 6]);
        map.set(&[2, 3], 5.0);
        write_pgm(&path, &map).unwrap();
        let (_, w, data) = read_pgm(&path).unwrap();
        assert_eq!(data.iter().filter(|&&b| b == 255).count(), 1);
        assert_eq!(data[2 * w + 3], 255);
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn ppm_round_trip_preserves_dimensions_and_pixels() {
        let path = temp_path("frame.ppm");
        let mut frame = Tensor::<f32>::full(&[3, 6, 4], 0.25);
        frame.set(&[0, 2, 1], 1.0);
        write_ppm(&path, &frame).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape(), &[3, 6, 4]);
        assert_eq!(back.at(&[0, 2, 1]), 1.0);
        // 0.25 quantizes to 64/255
        assert!((back.at(&[1, 0, 0]) - 64.0 / 255.0).abs() < 1e-6);
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn overlay_draws_markers_and_bones() {
        let path = temp_path("overlay.ppm");
        let frame = Tensor::<f32>::zeros(&[3, 32, 32]);
        let spec = SkeletonSpec::default_15();
        let mut kps = vec![
            Keypoint {
                x: 5.0,
                y: 5.0,
                visible: true,
            };
            15
        ];
        kps[1] = Keypoint {
            x: 20.0,
            y: 24.0,
            visible: true,
        };
        write_overlay_ppm(&path, &frame, &kps, &spec).unwrap();
        let img = read_ppm(&path).unwrap();
        // marker at keypoint 1 is red-ish
        assert!(img.at(&[0, 24, 20]) > 0.9);
        assert!(img.at(&[1, 24, 20]) < 0.3);
        // a bone pixel between (5,5) and (20,24) is white
        let mut found_white = false;
        for y in 0..32 {
            for x in 0..32 {
                if img.at(&[0, y, x]) > 0.9 && img.at(&[1, y, x]) > 0.9 && img.at(&[2, y, x]) > 0.9
                {
                    found_white = true;
                }
            }
        }
        assert!(found_white, "no bone segment pixels drawn");
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn corrupt_headers_are_parse_errors() {
        let path = temp_path("bad.ppm");
        fs::write(&path, b"P6\n4").unwrap();
        assert!(matches!(read_ppm(&path), Err(ImageError::Parse { .. })));
        fs::write(&path, b"P5\n2 2\n255\nXYZW").unwrap();
        assert!(read_pgm(&path).is_ok());
        fs::write(&path, b"P5\n2 2\n255\nXYZ").unwrap();
        assert!(matches!(read_pgm(&path), Err(ImageError::Parse { .. })));
        fs::remove_file(&path).unwrap();
    }
}
