//! Synthetic video clip generator: an articulated 15-joint skeleton with
//! smooth per-joint motion, rendered as anti-aliased colored limb segments,
//! cropped around the center frame's bounding box (expanded by 25%),
//! with controllable occlusion and blur, Gaussian ground-truth heatmaps,
//! shared-transform augmentation, and seeded benchmark suites.
//!
//! Everything is a pure function of its seed: identical inputs produce
//! bit-identical clips.

use std::f64::consts::PI;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{Keypoint, PersonClip};
use crate::tensor::{Scalar, Tensor};

/// Simulation canvas the skeleton moves on before cropping.
pub const WORLD_W: f64 = 200.0;
pub const WORLD_H: f64 = 200.0;

/// Fixed per-bone RGB palette (14 bones), bright against dark backgrounds.
const BONE_COLORS: [[f64; 3]; 14] = [
    [0.95, 0.55, 0.30], // neck -> nose
    [0.95, 0.80, 0.25], // nose -> head_top
    [0.35, 0.80, 0.95], // neck -> l_shoulder
    [0.30, 0.60, 0.95], // l_shoulder -> l_elbow
    [0.45, 0.40, 0.95], // l_elbow -> l_wrist
    [0.40, 0.95, 0.55], // neck -> r_shoulder
    [0.30, 0.85, 0.35], // r_shoulder -> r_elbow
    [0.70, 0.95, 0.30], // r_elbow -> r_wrist
    [0.95, 0.40, 0.70], // neck -> l_hip
    [0.90, 0.30, 0.45], // l_hip -> l_knee
    [0.95, 0.55, 0.85], // l_knee -> l_ankle
    [0.60, 0.90, 0.90], // neck -> r_hip
    [0.50, 0.75, 0.70], // r_hip -> r_knee
    [0.80, 0.90, 0.60], // r_knee -> r_ankle
];

#[derive(Debug, Error)]
pub enum GenError {
    #[error("skeleton: {0}")]
    Skeleton(String),
    #[error("scene: {0}")]
    Scene(String),
    #[error("skeleton leaves the frame after crop clamping")]
    OutOfFrame,
    #[error("could not construct an occlusion scenario for seed {seed}")]
    OcclusionSearch { seed: u64 },
}

/// Articulated skeleton: a rooted tree of joints with bone lengths in
/// world pixels and a left/right flip-pair table for horizontal flips.
#[derive(Debug, Clone)]
pub struct SkeletonSpec {
    pub names: Vec<&'static str>,
    /// Parent index per joint; exactly one root with `None`.
    pub parents: Vec<Option<usize>>,
    /// Distance to parent, world pixels. Root entry unused.
    pub bone_lengths: Vec<f64>,
    /// Canonical direction to parent->joint, radians, y-down screen coords.
    pub base_angles: Vec<f64>,
    /// Limb draw half-thickness is thickness/2, world pixels.
    pub thickness: f64,
    pub flip_pairs: Vec<(usize, usize)>,
}

impl SkeletonSpec {
    /// 15-joint human-like skeleton: neck root, head chain, two arms off
    /// the neck, two legs off the neck via long torso bones.
    pub fn default_15() -> Self {
        let down = PI / 2.0;
        SkeletonSpec {
            names: vec![
                "neck",
                "nose",
                "head_top",
                "left_shoulder",
                "left_elbow",
                "left_wrist",
                "right_shoulder",
                "right_elbow",
                "right_wrist",
                "left_hip",
                "left_knee",
                "left_ankle",
                "right_hip",
                "right_knee",
                "right_ankle",
            ],
            parents: vec![
                None,
                Some(0),
                Some(1),
                Some(0),
                Some(3),
                Some(4),
                Some(0),
                Some(6),
                Some(7),
                Some(0),
                Some(9),
                Some(10),
                Some(0),
                Some(12),
                Some(13),
            ],
            bone_lengths: vec![
                0.0, 6.0, 6.5, 9.0, 13.0, 12.0, 9.0, 13.0, 12.0, 26.0, 14.0, 13.0, 26.0, 14.0,
                13.0,
            ],
            base_angles: vec![
                0.0,
                -down,        // nose above neck
                -down,        // head_top above nose
                PI - 0.25,    // left shoulder out
                down + 0.35,  // left upper arm hangs
                down + 0.15,  // left forearm
                0.25,         // right shoulder out
                down - 0.35,  // right upper arm
                down - 0.15,  // right forearm
                down + 0.28,  // torso to left hip
                down + 0.10,  // left thigh
                down + 0.05,  // left shin
                down - 0.28,  // torso to right hip
                down - 0.10,  // right thigh
                down - 0.05,  // right shin
            ],
            thickness: 3.5,
            flip_pairs: vec![(3, 6), (4, 7), (5, 8), (9, 12), (10, 13), (11, 14)],
        }
    }

    pub fn n_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let n = self.n_joints();
        if self.names.len() != n
            || self.bone_lengths.len() != n
            || self.base_angles.len() != n
        {
            return Err(GenError::Skeleton("field lengths disagree".into()));
        }
        let roots = self.parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(GenError::Skeleton(format!("expected one root, got {roots}")));
        }
        for (j, parent) in self.parents.iter().enumerate() {
            if let Some(p) = parent {
                if *p >= n {
                    return Err(GenError::Skeleton(format!("joint {j} parent {p} out of range")));
                }
                if self.bone_lengths[j] <= 0.0 {
                    return Err(GenError::Skeleton(format!("joint {j} bone length must be > 0")));
                }
                // walk to the root; a cycle would loop past n steps
                let mut cur = *p;
                let mut steps = 0;
                while let Some(next) = self.parents[cur] {
                    cur = next;
                    steps += 1;
                    if steps > n {
                        return Err(GenError::Skeleton("parent graph has a cycle".into()));
                    }
                }
            }
        }
        for &(a, b) in &self.flip_pairs {
            if a >= n || b >= n {
                return Err(GenError::Skeleton("flip pair out of range".into()));
            }
        }
        Ok(())
    }

    /// Topological order: parents before children.
    fn traversal(&self) -> Vec<usize> {
        let n = self.n_joints();
        let mut order = Vec::with_capacity(n);
        let mut placed = vec![false; n];
        while order.len() < n {
            for j in 0..n {
                if placed[j] {
                    continue;
                }
                match self.parents[j] {
                    None => {
                        order.push(j);
                        placed[j] = true;
                    }
                    Some(p) if placed[p] => {
                        order.push(j);
                        placed[j] = true;
                    }
                    _ => {}
                }
            }
        }
        order
    }
}

/// Opaque rectangle drawn over the listed frames, in crop coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Occluder {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub frames: Vec<usize>,
    pub gray: f64,
}

impl Occluder {
    pub fn covers(&self, x: f64, y: f64) -> bool {
        x >= self.x && x <= self.x + self.w && y >= self.y && y <= self.y + self.h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Background {
    Flat(f64),
    /// Flat level plus a static seeded noise texture shared by all frames.
    Noise { level: f64, amplitude: f64 },
}

/// Everything that controls one clip besides the skeleton itself.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub seed: u64,
    /// Peak positional oscillation per joint, world px. Entry 0 also scales
    /// the root drift, so all-zero amplitudes freeze the scene completely.
    pub motion_amplitude: Vec<f64>,
    pub occluder: Option<Occluder>,
    /// Box-blur radius per frame; empty means no blur anywhere.
    pub blur: Vec<usize>,
    pub background: Background,
}

impl SceneParams {
    /// Smooth default motion: distal joints swing most, so their positions
    /// are hard to guess from a single frame yet trackable across frames.
    pub fn default_motion(seed: u64, n_joints: usize) -> SceneParams {
        let mut amp = vec![2.0; n_joints];
        for (j, a) in amp.iter_mut().enumerate() {
            *a = match j {
                5 | 8 => 9.0,   // wrists
                11 | 14 => 8.0, // ankles
                4 | 7 => 5.0,   // elbows
                10 | 13 => 4.0, // knees
                1 | 2 => 1.5,   // head
                _ => 2.0,
            };
        }
        SceneParams {
            seed,
            motion_amplitude: amp,
            occluder: None,
            blur: Vec::new(),
            background: Background::Noise {
                level: 0.12,
                amplitude: 0.03,
            },
        }
    }

    pub fn validate(&self, n_joints: usize, image_h: usize, image_w: usize) -> Result<(), GenError> {
        if self.motion_amplitude.len() != n_joints {
            return Err(GenError::Scene(format!(
                "motion_amplitude has {} entries for {n_joints} joints",
                self.motion_amplitude.len()
            )));
        }
        if let Some(occ) = &self.occluder {
            if occ.w <= 0.0
                || occ.h <= 0.0
                || occ.x < 0.0
                || occ.y < 0.0
                || occ.x + occ.w > image_w as f64
                || occ.y + occ.h > image_h as f64
            {
                return Err(GenError::Scene("occluder rectangle outside image".into()));
            }
        }
        Ok(())
    }

    fn hash_bytes(&self) -> Vec<u8> {
        let mut bytes = self.seed.to_le_bytes().to_vec();
        for a in &self.motion_amplitude {
            bytes.extend_from_slice(&a.to_bits().to_le_bytes());
        }
        if let Some(o) = &self.occluder {
            for v in [o.x, o.y, o.w, o.h, o.gray] {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            for f in &o.frames {
                bytes.extend_from_slice(&(*f as u64).to_le_bytes());
            }
        }
        for b in &self.blur {
            bytes.extend_from_slice(&(*b as u64).to_le_bytes());
        }
        match &self.background {
            Background::Flat(l) => bytes.extend_from_slice(&l.to_bits().to_le_bytes()),
            Background::Noise { level, amplitude } => {
                bytes.extend_from_slice(&level.to_bits().to_le_bytes());
                bytes.extend_from_slice(&amplitude.to_bits().to_le_bytes());
            }
        }
        bytes
    }

    pub fn params_hash(&self) -> u64 {
        fnv1a64(&self.hash_bytes())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// World-space joint positions for every frame: smooth angular oscillation
/// per bone plus a linear root drift, all derived from the scene seed.
fn joint_tracks(
    spec: &SkeletonSpec,
    params: &SceneParams,
    frames: usize,
) -> Vec<Vec<(f64, f64)>> {
    let n = spec.n_joints();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let root_x = WORLD_W * 0.5 + rng.random_range(-8.0..8.0);
    let root_y = WORLD_H * 0.42 + rng.random_range(-6.0..6.0);
    let drift_scale = params.motion_amplitude.first().copied().unwrap_or(0.0);
    let drift: (f64, f64) = (
        rng.random_range(-0.5..0.5) * drift_scale,
        rng.random_range(-0.25..0.25) * drift_scale,
    );
    // slow oscillation keeps consecutive frames temporally coherent
    let freqs: Vec<f64> = (0..n).map(|_| rng.random_range(0.04..0.12)).collect();
    let phases: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    let order = spec.traversal();
    let mut tracks = vec![vec![(0.0, 0.0); n]; frames];
    for (f, track) in tracks.iter_mut().enumerate() {
        let t = f as f64;
        for &j in &order {
            match spec.parents[j] {
                None => {
                    track[j] = (root_x + drift.0 * t, root_y + drift.1 * t);
                }
                Some(p) => {
                    let len = spec.bone_lengths[j];
                    // convert the pixel amplitude at the bone tip to an angle
                    let swing = (params.motion_amplitude[j] / len).min(0.9);
                    let angle = spec.base_angles[j]
                        + swing * (2.0 * PI * freqs[j] * t + phases[j]).sin();
                    let (px, py) = track[p];
                    track[j] = (px + len * angle.cos(), py + len * angle.sin());
                }
            }
        }
    }
    tracks
}

/// Crop window in world coordinates with a uniform world->crop scale.
#[derive(Debug, Clone, Copy)]
struct CropWindow {
    x0: f64,
    y0: f64,
    scale: f64,
}

impl CropWindow {
    fn to_crop(&self, p: (f64, f64)) -> (f64, f64) {
        ((p.0 - self.x0) * self.scale, (p.1 - self.y0) * self.scale)
    }
}

/// Bounding box of the center frame expanded by 25%, grown to the target
/// aspect ratio, shifted inside the world canvas.
fn crop_window(
    center_joints: &[(f64, f64)],
    image_h: usize,
    image_w: usize,
) -> Result<CropWindow, GenError> {
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in center_joints {
        min_x = min_x.min(x);
        min_y = min_y.min(y);
        max_x = max_x.max(x);
        max_y = max_y.max(y);
    }
    let (cx, cy) = ((min_x + max_x) / 2.0, (min_y + max_y) / 2.0);
    let mut bw = (max_x - min_x).max(1.0) * 1.25;
    let mut bh = (max_y - min_y).max(1.0) * 1.25;
    // grow one side to the output aspect so the scale is uniform
    let target_aspect = image_h as f64 / image_w as f64;
    if bh / bw > target_aspect {
        bw = bh / target_aspect;
    } else {
        bh = bw * target_aspect;
    }
    if bw > WORLD_W || bh > WORLD_H {
        return Err(GenError::OutOfFrame);
    }
    let x0 = (cx - bw / 2.0).clamp(0.0, WORLD_W - bw);
    let y0 = (cy - bh / 2.0).clamp(0.0, WORLD_H - bh);
    for &(x, y) in center_joints {
        if x < x0 || x > x0 + bw || y < y0 || y > y0 + bh {
            return Err(GenError::OutOfFrame);
        }
    }
    Ok(CropWindow {
        x0,
        y0,
        scale: image_w as f64 / bw,
    })
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * vx, a.1 + t * vy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Render one frame: background, anti-aliased bone segments in crop space,
/// optional occluder, optional box blur. Returns an f64 RGB image.
#[allow(clippy::too_many_arguments)]
fn render_frame(
    spec: &SkeletonSpec,
    params: &SceneParams,
    joints_crop: &[(f64, f64)],
    frame_index: usize,
    image_h: usize,
    image_w: usize,
    noise: Option<&[f64]>,
    half_width: f64,
) -> Vec<f64> {
    let (h, w) = (image_h, image_w);
    let level = match params.background {
        Background::Flat(l) => l,
        Background::Noise { level, .. } => level,
    };
    let mut rgb = vec![level; 3 * h * w];
    if let (Background::Noise { amplitude, .. }, Some(tex)) = (&params.background, noise) {
        for (i, v) in tex.iter().enumerate() {
            let shifted = level + amplitude * v;
            rgb[i] = shifted;
            rgb[h * w + i] = shifted;
            rgb[2 * h * w + i] = shifted;
        }
    }

    let mut bone_idx = 0usize;
    for j in 0..spec.n_joints() {
        let Some(p) = spec.parents[j] else { continue };
        let color = BONE_COLORS[bone_idx % BONE_COLORS.len()];
        bone_idx += 1;
        let (a, b) = (joints_crop[p], joints_crop[j]);
        let pad = half_width + 1.5;
        let x_lo = (a.0.min(b.0) - pad).floor().max(0.0) as usize;
        let x_hi = (a.0.max(b.0) + pad).ceil().min(w as f64 - 1.0) as usize;
        let y_lo = (a.1.min(b.1) - pad).floor().max(0.0) as usize;
        let y_hi = (a.1.max(b.1) + pad).ceil().min(h as f64 - 1.0) as usize;
        if x_lo > x_hi || y_lo > y_hi {
            continue;
        }
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let d = point_segment_distance((x as f64, y as f64), a, b);
                let coverage = (half_width + 0.5 - d).clamp(0.0, 1.0);
                if coverage > 0.0 {
                    let idx = y * w + x;
                    for (c, &col) in color.iter().enumerate() {
                        let dst = &mut rgb[c * h * w + idx];
                        *dst += coverage * (col - *dst);
                    }
                }
            }
        }
    }

    if let Some(&radius) = params.blur.get(frame_index) {
        if radius > 0 {
            rgb = box_blur(&rgb, h, w, radius);
        }
    }

    // the occluder goes on after any blur: nothing under it may leak out
    if let Some(occ) = &params.occluder {
        if occ.frames.contains(&frame_index) {
            let x_lo = occ.x.max(0.0) as usize;
            let x_hi = ((occ.x + occ.w).ceil() as usize).min(w - 1);
            let y_lo = occ.y.max(0.0) as usize;
            let y_hi = ((occ.y + occ.h).ceil() as usize).min(h - 1);
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    for c in 0..3 {
                        rgb[c * h * w + y * w + x] = occ.gray;
                    }
                }
            }
        }
    }
    for v in rgb.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    rgb
}

/// Separable box blur with edge clamping, per channel.
fn box_blur(rgb: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let norm = 1.0 / (2 * radius + 1) as f64;
    let mut tmp = vec![0.0; rgb.len()];
    let mut out = vec![0.0; rgb.len()];
    for c in 0..3 {
        let plane = &rgb[c * h * w..(c + 1) * h * w];
        let tplane = &mut tmp[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dx in -r..=r {
                    let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    acc += plane[y * w + sx];
                }
                tplane[y * w + x] = acc * norm;
            }
        }
    }
    for c in 0..3 {
        let plane = &tmp[c * h * w..(c + 1) * h * w];
        let oplane = &mut out[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -r..=r {
                    let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    acc += plane[sy * w + x];
                }
                oplane[y * w + x] = acc * norm;
            }
        }
    }
    out
}

/// Generate a deterministic clip of 2T+1 frames cropped around the center
/// frame's expanded bounding box. Ground truth is recorded in crop
/// coordinates; joints under the occluder or outside the frame are marked
/// invisible, and occluder-hidden center-frame joints are listed in
/// `center_occlusions`.
pub fn generate_clip<S: Scalar>(
    spec: &SkeletonSpec,
    params: &SceneParams,
    span: usize,
    image_h: usize,
    image_w: usize,
) -> Result<PersonClip<S>, GenError> {
    spec.validate()?;
    params.validate(spec.n_joints(), image_h, image_w)?;
    let frames = 2 * span + 1;
    let tracks = joint_tracks(spec, params, frames);
    let crop = crop_window(&tracks[span], image_h, image_w)?;

    let noise_tex: Option<Vec<f64>> = match params.background {
        Background::Noise { .. } => {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(params.seed ^ 0x6e6f697365));
            Some(
                (0..image_h * image_w)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            )
        }
        Background::Flat(_) => None,
    };
    let half_width = spec.thickness * crop.scale / 2.0;

    let mut out_frames = Vec::with_capacity(frames);
    let mut gt = Vec::with_capacity(frames);
    let mut center_occlusions = Vec::new();
    for (f, track) in tracks.iter().enumerate() {
        let joints_crop: Vec<(f64, f64)> = track.iter().map(|&p| crop.to_crop(p)).collect();
        let rgb = render_frame(
            spec,
            params,
            &joints_crop,
            f,
            image_h,
            image_w,
            noise_tex.as_deref(),
            half_width,
        );
        let data: Vec<S> = rgb.iter().map(|&v| S::from_f64(v)).collect();
        out_frames.push(
            Tensor::new(vec![3, image_h, image_w], data).expect("frame buffer matches dims"),
        );

        let mut frame_gt = Vec::with_capacity(spec.n_joints());
        for (j, &(x, y)) in joints_crop.iter().enumerate() {
            let in_bounds =
                x >= 0.0 && x < image_w as f64 && y >= 0.0 && y < image_h as f64;
            let occluded = params
                .occluder
                .as_ref()
                .is_some_and(|o| o.frames.contains(&f) && o.covers(x, y));
            if occluded && in_bounds && f == span {
                center_occlusions.push(j);
            }
            frame_gt.push(Keypoint {
                x,
                y,
                visible: in_bounds && !occluded,
            });
        }
        gt.push(frame_gt);
    }
    Ok(PersonClip {
        frames: out_frames,
        gt_keypoints: gt,
        center_occlusions,
    })
}

/// Unnormalized Gaussian ground-truth heatmaps at quarter input resolution:
/// peak value exactly 1 at the rounded quarter-res keypoint, all-zero for
/// invisible joints.
pub fn gt_heatmaps<S: Scalar>(
    keypoints: &[Keypoint],
    image_h: usize,
    image_w: usize,
    sigma: f64,
) -> Tensor<S> {
    let (h, w) = (image_h / 4, image_w / 4);
    let n = keypoints.len();
    let mut maps = Tensor::<S>::zeros(&[n, h, w]);
    for (j, kp) in keypoints.iter().enumerate() {
        if !kp.visible {
            continue;
        }
        let cx = (kp.x / 4.0).round().clamp(0.0, w as f64 - 1.0);
        let cy = (kp.y / 4.0).round().clamp(0.0, h as f64 - 1.0);
        for py in 0..h {
            for px in 0..w {
                let d2 = (px as f64 - cx).powi(2) + (py as f64 - cy).powi(2);
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                maps.data_mut()[(j * h + py) * w + px] = S::from_f64(v);
            }
        }
    }
    maps
}

// ── Augmentation ─────────────────────────────────────────────────────

/// One shared geometric transform, sampled per clip and applied to every
/// frame and every keypoint identically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub scale: f64,
    /// Radians, counterclockwise in image coordinates.
    pub rot: f64,
    pub tx: f64,
    pub ty: f64,
    pub flip: bool,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        scale: 1.0,
        rot: 0.0,
        tx: 0.0,
        ty: 0.0,
        flip: false,
    };
}

/// Scaling in [0.65, 1.35], rotation in [-45 deg, 45 deg], translation
/// jitter within 10% of the image size, horizontal flip with p = 1/2.
pub fn sample_affine<R: Rng>(rng: &mut R, image_h: usize, image_w: usize) -> AffineParams {
    AffineParams {
        scale: rng.random_range(0.65..1.35),
        rot: rng.random_range(-PI / 4.0..PI / 4.0),
        tx: rng.random_range(-0.1..0.1) * image_w as f64,
        ty: rng.random_range(-0.1..0.1) * image_h as f64,
        flip: rng.random::<bool>(),
    }
}

fn forward_point(p: (f64, f64), t: &AffineParams, cx: f64, cy: f64) -> (f64, f64) {
    let (mut x, y) = (p.0 - cx, p.1 - cy);
    if t.flip {
        x = -x;
    }
    let (x, y) = (x * t.scale, y * t.scale);
    let (sin, cos) = t.rot.sin_cos();
    (
        cos * x - sin * y + cx + t.tx,
        sin * x + cos * y + cy + t.ty,
    )
}

fn inverse_point(p: (f64, f64), t: &AffineParams, cx: f64, cy: f64) -> (f64, f64) {
    let (x, y) = (p.0 - cx - t.tx, p.1 - cy - t.ty);
    let (sin, cos) = (-t.rot).sin_cos();
    let (x, y) = (cos * x - sin * y, sin * x + cos * y);
    let (mut x, y) = (x / t.scale, y / t.scale);
    if t.flip {
        x = -x;
    }
    (x + cx, y + cy)
}

fn bilinear_sample<S: Scalar>(frame: &Tensor<S>, c: usize, x: f64, y: f64) -> f64 {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let xc = x.clamp(0.0, w as f64 - 1.0);
    let yc = y.clamp(0.0, h as f64 - 1.0);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let at = |yy: usize, xx: usize| frame.data()[(c * h + yy) * w + xx].to_f64();
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Apply one transform to every frame and keypoint of a clip. Horizontal
/// flips also swap left/right joint identities; keypoints leaving the
/// frame are marked invisible.
pub fn apply_affine<S: Scalar>(
    clip: &PersonClip<S>,
    spec: &SkeletonSpec,
    t: &AffineParams,
) -> PersonClip<S> {
    let (h, w) = (clip.frames[0].shape()[1], clip.frames[0].shape()[2]);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);

    let frames = clip
        .frames
        .iter()
        .map(|frame| {
            let mut out = Tensor::<S>::zeros(frame.shape());
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let src = inverse_point((x as f64, y as f64), t, cx, cy);
                        let v = bilinear_sample(frame, c, src.0, src.1);
                        out.data_mut()[(c * h + y) * w + x] = S::from_f64(v);
                    }
                }
            }
            out
        })
        .collect();

    let remap = |kps: &[Keypoint]| -> Vec<Keypoint> {
        let mut moved: Vec<Keypoint> = kps
            .iter()
            .map(|kp| {
                let (x, y) = forward_point((kp.x, kp.y), t, cx, cy);
                let inside = x >= 0.0 && x < w as f64 && y >= 0.0 && y < h as f64;
                Keypoint {
                    x,
                    y,
                    visible: kp.visible && inside,
                }
            })
            .collect();
        if t.flip {
            for &(a, b) in &spec.flip_pairs {
                moved.swap(a, b);
            }
        }
        moved
    };
    let gt_keypoints = clip.gt_keypoints.iter().map(|kps| remap(kps)).collect();
    let center_occlusions = if t.flip {
        clip.center_occlusions
            .iter()
            .map(|&j| {
                spec.flip_pairs
                    .iter()
                    .find_map(|&(a, b)| {
                        if a == j {
                            Some(b)
                        } else if b == j {
                            Some(a)
                        } else {
                            None
                        }
                    })
                    .unwrap_or(j)
            })
            .collect()
    } else {
        clip.center_occlusions.clone()
    };
    PersonClip {
        frames,
        gt_keypoints,
        center_occlusions,
    }
}

/// Sample one shared transform and apply it to the whole clip.
pub fn augment<S: Scalar, R: Rng>(
    clip: &PersonClip<S>,
    spec: &SkeletonSpec,
    rng: &mut R,
) -> PersonClip<S> {
    let (h, w) = (clip.frames[0].shape()[1], clip.frames[0].shape()[2]);
    let t = sample_affine(rng, h, w);
    apply_affine(clip, spec, &t)
}

// ── Benchmarks ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchmarkKind {
    Plain,
    Occlusion,
    Blur,
}

impl BenchmarkKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchmarkKind::Plain => "plain",
            BenchmarkKind::Occlusion => "occlusion",
            BenchmarkKind::Blur => "blur",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "plain" => BenchmarkKind::Plain,
            "occlusion" => BenchmarkKind::Occlusion,
            "blur" => BenchmarkKind::Blur,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ClipRecord {
    pub clip_id: usize,
    pub kind: BenchmarkKind,
    pub seed: u64,
    pub params_hash: u64,
}

/// A seeded suite of clips plus its manifest.
pub struct Dataset<S: Scalar> {
    pub clips: Vec<PersonClip<S>>,
    pub records: Vec<ClipRecord>,
    pub image_h: usize,
    pub image_w: usize,
    pub span: usize,
}

impl<S: Scalar> Dataset<S> {
    /// Manifest: one record per clip.
    pub fn manifest_csv(&self) -> String {
        let mut out = String::from("clip_id,kind,seed,params_hash\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{:016x}\n",
                r.clip_id,
                r.kind.as_str(),
                r.seed,
                r.params_hash
            ));
        }
        out
    }

    /// Keypoint table: `clip_id,frame,joint,x,y,visible`.
    pub fn keypoints_csv(&self) -> String {
        let mut out = String::from("clip_id,frame,joint,x,y,visible\n");
        for (id, clip) in self.clips.iter().enumerate() {
            for (f, kps) in clip.gt_keypoints.iter().enumerate() {
                for (j, kp) in kps.iter().enumerate() {
                    out.push_str(&format!(
                        "{},{},{},{:.3},{:.3},{}\n",
                        id,
                        f,
                        j,
                        kp.x,
                        kp.y,
                        u8::from(kp.visible)
                    ));
                }
            }
        }
        out
    }
}

/// Joints the occlusion benchmark prefers to hide: distal ones whose
/// position is hardest to infer from a single frame.
const OCCLUSION_TARGETS: [usize; 4] = [5, 8, 11, 14];

/// Scene for one benchmark clip. Occlusion scenes hide one distal joint at
/// the center frame only, verified visible in every auxiliary frame.
fn benchmark_scene(
    spec: &SkeletonSpec,
    kind: BenchmarkKind,
    clip_seed: u64,
    span: usize,
    image_h: usize,
    image_w: usize,
) -> Result<SceneParams, GenError> {
    let mut params = SceneParams::default_motion(clip_seed, spec.n_joints());
    match kind {
        BenchmarkKind::Plain => Ok(params),
        BenchmarkKind::Blur => {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(clip_seed ^ 0x626c7572));
            params.blur = (0..2 * span + 1)
                .map(|_| 1 + usize::from(rng.random::<bool>()))
                .collect();
            Ok(params)
        }
        BenchmarkKind::Occlusion => {
            // the center frame is also mildly blurred: localization from the
            // sharp auxiliary frames then genuinely reduces the training
            // loss, which is what makes temporal aggregation learnable from
            // visible-joint supervision alone
            let mut blur = vec![0usize; 2 * span + 1];
            blur[span] = 4;
            params.blur = blur;
            // dry run without the occluder to learn joint trajectories
            let frames = 2 * span + 1;
            let tracks = joint_tracks(spec, &params, frames);
            let crop = crop_window(&tracks[span], image_h, image_w)?;
            let rotate = (splitmix64(clip_seed) % OCCLUSION_TARGETS.len() as u64) as usize;
            for attempt in 0..OCCLUSION_TARGETS.len() {
                let joint = OCCLUSION_TARGETS[(rotate + attempt) % OCCLUSION_TARGETS.len()];
                let parent = spec.parents[joint].expect("occlusion targets have parents");
                let grandparent = spec.parents[parent].expect("targets sit two bones deep");
                let tip = crop.to_crop(tracks[span][joint]);
                let base = crop.to_crop(tracks[span][parent]);
                let root = crop.to_crop(tracks[span][grandparent]);
                // hide the whole distal limb, parent joint included, under a
                // LARGE jittered square. A tight cover would betray the limb
                // through its own geometry; a big square centered near the
                // limb midpoint with +-5 px jitter reveals only a coarse
                // region, so the hidden joints stay genuinely ambiguous in
                // this frame alone
                let jitter_bits = splitmix64(clip_seed ^ 0x6f63636c);
                let jx = ((jitter_bits & 0xFF) as f64 / 255.0 - 0.5) * 10.0;
                let jy = (((jitter_bits >> 8) & 0xFF) as f64 / 255.0 - 0.5) * 10.0;
                let size = 26.0 + ((jitter_bits >> 16) & 0x7) as f64;
                let mid = ((base.0 + tip.0) / 2.0 + jx, (base.1 + tip.1) / 2.0 + jy);
                let x0 = (mid.0 - size / 2.0).max(0.0);
                let y0 = (mid.1 - size / 2.0).max(0.0);
                let x1 = (mid.0 + size / 2.0).min(image_w as f64 - 1.0);
                let y1 = (mid.1 + size / 2.0).min(image_h as f64 - 1.0);
                let occ = Occluder {
                    x: x0,
                    y: y0,
                    w: x1 - x0,
                    h: y1 - y0,
                    frames: vec![span],
                    gray: 0.45,
                };
                // the limb must sit well inside the occluder at the center
                // frame (2.5 px margin so no anti-aliased pixels leak), the
                // limb's anchor joint must stay visible, and both hidden
                // joints must stay inside the frame in every auxiliary frame
                let margin = 2.5;
                let well_inside = |p: (f64, f64)| {
                    p.0 >= x0 + margin && p.0 <= x1 - margin && p.1 >= y0 + margin && p.1 <= y1 - margin
                };
                if !well_inside(tip) || !well_inside(base) || occ.covers(root.0, root.1) {
                    continue;
                }
                let all_aux_visible = (0..frames).filter(|&f| f != span).all(|f| {
                    [joint, parent].iter().all(|&j| {
                        let p = crop.to_crop(tracks[f][j]);
                        p.0 >= 0.0 && p.0 < image_w as f64 && p.1 >= 0.0 && p.1 < image_h as f64
                    })
                });
                if all_aux_visible {
                    params.occluder = Some(occ);
                    return Ok(params);
                }
            }
            Err(GenError::OcclusionSearch { seed: clip_seed })
        }
    }
}

/// Build a fixed-seed suite of `count` clips. Occlusion clips are
/// guaranteed to hide at least one joint at the center frame that is
/// visible in the auxiliary frames.
pub fn make_benchmark<S: Scalar>(
    kind: BenchmarkKind,
    count: usize,
    span: usize,
    seed: u64,
    image_h: usize,
    image_w: usize,
) -> Result<Dataset<S>, GenError> {
    let spec = SkeletonSpec::default_15();
    let mut clips = Vec::with_capacity(count);
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let mut clip_seed = splitmix64(seed ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15));
        // a handful of seeds cannot host a valid occlusion scenario; skip
        // them deterministically
        let (params, clip) = loop {
            match benchmark_scene(&spec, kind, clip_seed, span, image_h, image_w)
                .and_then(|p| generate_clip::<S>(&spec, &p, span, image_h, image_w).map(|c| (p, c)))
            {
                Ok((p, c)) => {
                    if kind == BenchmarkKind::Occlusion && c.center_occlusions.is_empty() {
                        clip_seed = splitmix64(clip_seed);
                        continue;
                    }
                    break (p, c);
                }
                Err(_) => {
                    clip_seed = splitmix64(clip_seed);
                }
            }
        };
        records.push(ClipRecord {
            clip_id: i,
            kind,
            seed: clip_seed,
            params_hash: params.params_hash(),
        });
        clips.push(clip);
    }
    Ok(Dataset {
        clips,
        records,
        image_h,
        image_w,
        span,
    })
}

/// Regenerate one clip from its manifest record.
pub fn clip_from_record<S: Scalar>(
    record: &ClipRecord,
    span: usize,
    image_h: usize,
    image_w: usize,
) -> Result<PersonClip<S>, GenError> {
    let spec = SkeletonSpec::default_15();
    let params = benchmark_scene(&spec, record.kind, record.seed, span, image_h, image_w)?;
    generate_clip(&spec, &params, span, image_h, image_w)
}

#[cfg(test)]
mod tests {
    use super::*;

    const H: usize = 64;
    const W: usize = 48;

    fn static_params(seed: u64) -> SceneParams {
        SceneParams {
            seed,
            motion_amplitude: vec![0.0; 15],
            occluder: None,
            blur: Vec::new(),
            background: Background::Flat(0.1),
        }
    }

    #[test]
    fn skeleton_spec_is_a_valid_tree() {
        let spec = SkeletonSpec::default_15();
        assert!(spec.validate().is_ok());
        assert_eq!(spec.n_joints(), 15);

        let mut bad = spec.clone();
        bad.parents[0] = Some(5); // second non-root creates a cycle check path
        bad.parents[5] = None;
        bad.parents[4] = Some(5);
        assert!(bad.validate().is_ok() || bad.validate().is_err()); // structural smoke
        let mut cyclic = SkeletonSpec::default_15();
        cyclic.parents[1] = Some(2); // 1 <-> 2 cycle
        assert!(cyclic.validate().is_err());
    }

    #[test]
    fn zero_motion_amplitude_freezes_the_clip() {
        let spec = SkeletonSpec::default_15();
        let clip = generate_clip::<f64>(&spec, &static_params(7), 1, H, W).unwrap();
        assert_eq!(clip.frames.len(), 3);
        for f in 1..3 {
            assert_eq!(clip.frames[0].data(), clip.frames[f].data());
            assert_eq!(clip.gt_keypoints[0], clip.gt_keypoints[f]);
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_clips() {
        let spec = SkeletonSpec::default_15();
        let params = SceneParams::default_motion(42, 15);
        let a = generate_clip::<f32>(&spec, &params, 2, H, W).unwrap();
        let b = generate_clip::<f32>(&spec, &params, 2, H, W).unwrap();
        for (fa, fb) in a.frames.iter().zip(b.frames.iter()) {
            assert!(fa
                .data()
                .iter()
                .zip(fb.data().iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(a.gt_keypoints, b.gt_keypoints);
    }

    #[test]
    fn occluder_flips_center_visibility_only() {
        let spec = SkeletonSpec::default_15();
        // find the wrist location first, then occlude it at the center frame
        let base = generate_clip::<f64>(&spec, &static_params(11), 1, H, W).unwrap();
        let wrist = base.gt_keypoints[1][5];
        assert!(wrist.visible);
        let mut params = static_params(11);
        params.occluder = Some(Occluder {
            x: (wrist.x - 4.0).max(0.0),
            y: (wrist.y - 4.0).max(0.0),
            w: 8.0,
            h: 8.0,
            frames: vec![1],
            gray: 0.5,
        });
        let clip = generate_clip::<f64>(&spec, &params, 1, H, W).unwrap();
        assert!(!clip.gt_keypoints[1][5].visible, "occluded at center");
        assert!(clip.gt_keypoints[0][5].visible, "visible before");
        assert!(clip.gt_keypoints[2][5].visible, "visible after");
        assert!(clip.center_occlusions.contains(&5));
        // the pixels under the occluder really are opaque gray
        let occ = params.occluder.as_ref().unwrap();
        let (px, py) = (wrist.x as usize, wrist.y as usize);
        for c in 0..3 {
            assert_eq!(clip.frames[1].at(&[c, py, px]), occ.gray);
        }
    }

    #[test]
    fn gt_heatmap_peak_is_one_at_rounded_quarter_res() {
        let kps = vec![
            Keypoint {
                x: 13.0,
                y: 22.0,
                visible: true,
            },
            Keypoint {
                x: 5.0,
                y: 5.0,
                visible: false,
            },
        ];
        let maps = gt_heatmaps::<f64>(&kps, H, W, 2.0);
        assert_eq!(maps.shape(), &[2, 16, 12]);
        let (cx, cy) = ((13.0f64 / 4.0).round() as usize, (22.0f64 / 4.0).round() as usize);
        assert_eq!(maps.at(&[0, cy, cx]), 1.0);
        // argmax equals the rounded quarter-res keypoint
        let plane = &maps.data()[0..16 * 12];
        let argmax = plane
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, cy * 12 + cx);
        // invisible joint yields an all-zero map
        assert!(maps.data()[16 * 12..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gt_heatmap_mass_matches_gaussian_integral() {
        // large grid so the tails fit: integral of exp(-r^2/2s^2) = 2 pi s^2
        let kps = vec![Keypoint {
            x: 128.0,
            y: 128.0,
            visible: true,
        }];
        let maps = gt_heatmaps::<f64>(&kps, 256, 256, 2.0);
        let sum: f64 = maps.data().iter().sum();
        let expected = 2.0 * PI * 4.0;
        assert!(
            (sum - expected).abs() / expected < 0.02,
            "sum {sum} vs {expected}"
        );
    }

    #[test]
    fn identity_transform_leaves_clip_unchanged() {
        let spec = SkeletonSpec::default_15();
        let clip = generate_clip::<f64>(&spec, &SceneParams::default_motion(3, 15), 1, H, W)
            .unwrap();
        let same = apply_affine(&clip, &spec, &AffineParams::IDENTITY);
        for (a, b) in clip.frames.iter().zip(same.frames.iter()) {
            assert!(a
                .data()
                .iter()
                .zip(b.data().iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        // keypoints go through (x - c) + c, exact only to the last ulp
        for (orig, back) in clip.gt_keypoints.iter().zip(same.gt_keypoints.iter()) {
            for (a, b) in orig.iter().zip(back.iter()) {
                assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
                assert_eq!(a.visible, b.visible);
            }
        }
    }

    #[test]
    fn double_flip_restores_keypoint_identities() {
        let spec = SkeletonSpec::default_15();
        let clip = generate_clip::<f64>(&spec, &SceneParams::default_motion(5, 15), 1, H, W)
            .unwrap();
        let flip = AffineParams {
            flip: true,
            ..AffineParams::IDENTITY
        };
        let twice = apply_affine(&apply_affine(&clip, &spec, &flip), &spec, &flip);
        for (orig, back) in clip.gt_keypoints.iter().zip(twice.gt_keypoints.iter()) {
            for (a, b) in orig.iter().zip(back.iter()) {
                assert!((a.x - b.x).abs() < 1e-9);
                assert!((a.y - b.y).abs() < 1e-9);
            }
        }
        // one flip must swap identities: left wrist becomes right wrist
        let once = apply_affine(&clip, &spec, &flip);
        let (cx, _) = ((W as f64 - 1.0) / 2.0, 0.0);
        let orig_lw = clip.gt_keypoints[1][5];
        let flipped_rw = once.gt_keypoints[1][8];
        assert!((flipped_rw.x - (2.0 * cx - orig_lw.x)).abs() < 1e-9);
        assert!((flipped_rw.y - orig_lw.y).abs() < 1e-9);
    }

    #[test]
    fn quarter_turn_matches_hand_rotated_coordinates() {
        let spec = SkeletonSpec::default_15();
        let clip = generate_clip::<f64>(&spec, &static_params(9), 0, H, W).unwrap();
        let t = AffineParams {
            rot: PI / 2.0,
            ..AffineParams::IDENTITY
        };
        let turned = apply_affine(&clip, &spec, &t);
        let (cx, cy) = ((W as f64 - 1.0) / 2.0, (H as f64 - 1.0) / 2.0);
        for (orig, moved) in clip.gt_keypoints[0].iter().zip(turned.gt_keypoints[0].iter()) {
            // rotation by +90 deg: (x, y) -> (cx - (y - cy), cy + (x - cx))
            let want_x = cx - (orig.y - cy);
            let want_y = cy + (orig.x - cx);
            assert!((moved.x - want_x).abs() <= 0.5);
            assert!((moved.y - want_y).abs() <= 0.5);
        }
    }

    #[test]
    fn augmented_keypoints_regenerate_consistent_heatmaps() {
        let spec = SkeletonSpec::default_15();
        let clip = generate_clip::<f64>(&spec, &SceneParams::default_motion(13, 15), 0, H, W)
            .unwrap();
        let t = AffineParams {
            scale: 1.1,
            rot: 0.3,
            tx: 2.0,
            ty: -1.5,
            flip: false,
        };
        let moved = apply_affine(&clip, &spec, &t);
        let maps = gt_heatmaps::<f64>(&moved.gt_keypoints[0], H, W, 2.0);
        for (j, kp) in moved.gt_keypoints[0].iter().enumerate() {
            if !kp.visible {
                continue;
            }
            let plane = &maps.data()[j * 16 * 12..(j + 1) * 16 * 12];
            let argmax = plane
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let (ay, ax) = (argmax / 12, argmax % 12);
            let want_x = (kp.x / 4.0).round().clamp(0.0, 11.0) as usize;
            let want_y = (kp.y / 4.0).round().clamp(0.0, 15.0) as usize;
            // within one quarter-res pixel of the transformed keypoint
            assert!(ax.abs_diff(want_x) <= 1 && ay.abs_diff(want_y) <= 1);
        }
    }

    #[test]
    fn occlusion_benchmark_guarantees_center_occlusion() {
        let ds = make_benchmark::<f32>(BenchmarkKind::Occlusion, 6, 1, 99, H, W).unwrap();
        for (i, clip) in ds.clips.iter().enumerate() {
            assert!(
                !clip.center_occlusions.is_empty(),
                "clip {i} lacks an occluded center joint"
            );
            for &j in &clip.center_occlusions {
                assert!(!clip.gt_keypoints[1][j].visible);
                assert!(clip.gt_keypoints[0][j].visible, "clip {i} joint {j} hidden before");
                assert!(clip.gt_keypoints[2][j].visible, "clip {i} joint {j} hidden after");
            }
        }
    }

    #[test]
    fn manifest_is_reproducible_and_seed_disjoint() {
        let a = make_benchmark::<f32>(BenchmarkKind::Plain, 8, 1, 1234, H, W).unwrap();
        let b = make_benchmark::<f32>(BenchmarkKind::Plain, 8, 1, 1234, H, W).unwrap();
        assert_eq!(a.manifest_csv(), b.manifest_csv());
        assert_eq!(
            fnv1a64(a.manifest_csv().as_bytes()),
            fnv1a64(b.manifest_csv().as_bytes())
        );

        let test = make_benchmark::<f32>(BenchmarkKind::Plain, 8, 1, 5678, H, W).unwrap();
        let train_seeds: Vec<u64> = a.records.iter().map(|r| r.seed).collect();
        assert!(test.records.iter().all(|r| !train_seeds.contains(&r.seed)));
    }

    #[test]
    fn clip_from_record_round_trips() {
        let ds = make_benchmark::<f32>(BenchmarkKind::Blur, 3, 1, 31, H, W).unwrap();
        for (record, clip) in ds.records.iter().zip(ds.clips.iter()) {
            let again = clip_from_record::<f32>(record, 1, H, W).unwrap();
            for (a, b) in clip.frames.iter().zip(again.frames.iter()) {
                assert!(a
                    .data()
                    .iter()
                    .zip(b.data().iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn blur_benchmark_applies_blur() {
        let plain = make_benchmark::<f64>(BenchmarkKind::Plain, 1, 1, 7, H, W).unwrap();
        let blur = make_benchmark::<f64>(BenchmarkKind::Blur, 1, 1, 7, H, W).unwrap();
        // same seed root, different pipelines; blurred frames have lower
        // total variation than the plain render of the same scene
        let tv = |t: &Tensor<f64>| -> f64 {
            let (h, w) = (t.shape()[1], t.shape()[2]);
            let mut acc = 0.0;
            for y in 0..h {
                for x in 1..w {
                    acc += (t.at(&[0, y, x]) - t.at(&[0, y, x - 1])).abs();
                }
            }
            acc
        };
        assert!(tv(&blur.clips[0].frames[1]) < tv(&plain.clips[0].frames[1]));
    }
}
