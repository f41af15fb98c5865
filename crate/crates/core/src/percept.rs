//! Depth rendering against a [`VoxelTerrain`]: the front camera, the
//! five-face privileged cube map, foot proximity probes and depth
//! corruption models.
//!
//! Rays are traversed cell by cell, crossing exactly one cell boundary
//! per step, so hit distances carry no step-size error. All geometry is
//! computed relative to the terrain origin.

use nalgebra::{Isometry3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::terrain::VoxelTerrain;
use crate::{Error, Result};

pub type Pose = Isometry3<f64>;

pub const MIN_RANGE: f32 = 0.05;
pub const MAX_RANGE: f32 = 4.0;
pub const FRONT_WIDTH: usize = 48;
pub const FRONT_HEIGHT: usize = 32;
pub const FACE_RES: usize = 16;
pub const PROBES_PER_FOOT: usize = 5;
pub const PROBE_RANGE: f64 = 0.5;
pub const FOOT_SAMPLES: usize = 4 * PROBES_PER_FOOT;

/// Distance along `dir` to the first occupied cell boundary or the bedrock
/// plane, capped at `max_range`. Starting inside solid space gives `0`.
pub fn raycast(t: &VoxelTerrain, origin: [f64; 3], dir: [f64; 3], max_range: f64) -> f64 {
    let g = t.origin();
    raycast_local(
        t,
        [origin[0] - g[0], origin[1] - g[1], origin[2] - g[2]],
        dir,
        max_range,
    )
}

/// As [`raycast`] with `origin` given relative to the terrain origin.
pub fn raycast_local(t: &VoxelTerrain, o: [f64; 3], d: [f64; 3], max_range: f64) -> f64 {
    let bedrock = -t.origin()[2];
    if o[2] < bedrock {
        return 0.0;
    }
    let cs = t.cell_size();
    let [nx, ny, _] = t.extents();
    let cell = o.map(|v| (v / cs).floor() as i64);
    if t.cell_signed(cell[0], cell[1], cell[2]) {
        return 0.0;
    }
    let mut limit = max_range;
    if d[2] < 0.0 {
        limit = limit.min((bedrock - o[2]) / d[2]);
    }
    let n = [nx, ny, t.top_layer()];
    traverse(t, o, d, limit, n, cs).unwrap_or(limit)
}

fn traverse(
    t: &VoxelTerrain,
    o: [f64; 3],
    d: [f64; 3],
    limit: f64,
    n: [usize; 3],
    cs: f64,
) -> Option<f64> {
    if n[2] == 0 {
        return None;
    }
    let mut t0: f64 = 0.0;
    let mut t1 = limit;
    for a in 0..3 {
        let hi = n[a] as f64 * cs;
        if d[a] == 0.0 {
            if o[a] < 0.0 || o[a] >= hi {
                return None;
            }
        } else {
            let (mut ta, mut tb) = ((0.0 - o[a]) / d[a], (hi - o[a]) / d[a]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
    }
    if t0 > t1 {
        return None;
    }
    let mut idx = [0i64; 3];
    let mut step = [0i64; 3];
    let mut tmax = [f64::INFINITY; 3];
    for a in 0..3 {
        let p = o[a] + d[a] * t0;
        idx[a] = ((p / cs).floor() as i64).clamp(0, n[a] as i64 - 1);
        if d[a] > 0.0 {
            step[a] = 1;
            tmax[a] = ((idx[a] + 1) as f64 * cs - o[a]) / d[a];
        } else if d[a] < 0.0 {
            step[a] = -1;
            tmax[a] = (idx[a] as f64 * cs - o[a]) / d[a];
        }
    }
    let mut t_cur = t0;
    loop {
        if t.cell(idx[0] as usize, idx[1] as usize, idx[2] as usize) {
            return Some(t_cur);
        }
        let a = if tmax[0] <= tmax[1] && tmax[0] <= tmax[2] {
            0
        } else if tmax[1] <= tmax[2] {
            1
        } else {
            2
        };
        t_cur = tmax[a];
        if t_cur > t1 {
            return None;
        }
        idx[a] += step[a];
        if idx[a] < 0 || idx[a] >= n[a] as i64 {
            return None;
        }
        let boundary = if step[a] > 0 { idx[a] + 1 } else { idx[a] };
        tmax[a] = (boundary as f64 * cs - o[a]) / d[a];
    }
}

/// Row-major depth image in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
    pub min_range: f32,
    pub max_range: f32,
}

impl DepthImage {
    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
            min_range: MIN_RANGE,
            max_range: MAX_RANGE,
        }
    }

    pub fn at(&self, col: usize, row: usize) -> f32 {
        self.data[row * self.width + col]
    }

    fn clamp_range(&self, v: f64) -> f32 {
        (v as f32).clamp(self.min_range, self.max_range)
    }

    /// Binary PGM, 16-bit big-endian samples of millimetres.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        for &v in &self.data {
            let mm = (v as f64 * 1000.0).round().clamp(0.0, 65535.0) as u16;
            out.extend_from_slice(&mm.to_be_bytes());
        }
        out
    }
}

/// Pinhole depth camera mounted on the body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub translation: [f64; 3],
    /// Mount orientation as roll, pitch, yaw (radians); positive pitch looks down.
    pub rpy: [f64; 3],
    pub hfov: f64,
    pub vfov: f64,
    pub width: usize,
    pub height: usize,
    /// Extra mount height, in `[0, 0.2]` m.
    pub z_offset: f64,
    pub min_range: f32,
    pub max_range: f32,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            translation: [0.28, 0.0, 0.03],
            rpy: [0.0, 0.3, 0.0],
            hfov: 87f64.to_radians(),
            vfov: 58f64.to_radians(),
            width: FRONT_WIDTH,
            height: FRONT_HEIGHT,
            z_offset: 0.0,
            min_range: MIN_RANGE,
            max_range: MAX_RANGE,
        }
    }
}

impl CameraModel {
    pub fn with_z_offset(mut self, z: f64) -> Result<Self> {
        if !(0.0..=0.2).contains(&z) {
            return Err(Error::Invalid(format!(
                "camera z offset {z} outside [0, 0.2] m"
            )));
        }
        self.z_offset = z;
        Ok(self)
    }

    pub fn mount(&self) -> Pose {
        let [x, y, z] = self.translation;
        let [r, p, w] = self.rpy;
        Isometry3::from_parts(
            Vector3::new(x, y, z + self.z_offset).into(),
            UnitQuaternion::from_euler_angles(r, p, w),
        )
    }

    /// Camera-frame ray through a texel center; +x forward, +z up.
    pub fn texel_ray(&self, col: usize, row: usize) -> Vector3<f64> {
        let u = 2.0 * (col as f64 + 0.5) / self.width as f64 - 1.0;
        let v = 1.0 - 2.0 * (row as f64 + 0.5) / self.height as f64;
        let right = -Vector3::y() * (u * (self.hfov / 2.0).tan());
        let up = Vector3::z() * (v * (self.vfov / 2.0).tan());
        (Vector3::x() + right + up).normalize()
    }
}

fn local_position(t: &VoxelTerrain, body: &Pose) -> Vector3<f64> {
    let g = t.origin();
    body.translation.vector - Vector3::new(g[0], g[1], g[2])
}

fn cast_from(t: &VoxelTerrain, local: &Vector3<f64>, dir: &Vector3<f64>, max_range: f64) -> f64 {
    raycast_local(
        t,
        [local.x, local.y, local.z],
        [dir.x, dir.y, dir.z],
        max_range,
    )
}

pub fn render_front(t: &VoxelTerrain, cam: &CameraModel, body: &Pose) -> DepthImage {
    let mount = cam.mount();
    let rot = body.rotation * mount.rotation;
    let origin = local_position(t, body) + body.rotation * mount.translation.vector;
    let mut img = DepthImage::filled(cam.width, cam.height, cam.max_range);
    img.min_range = cam.min_range;
    for row in 0..cam.height {
        for col in 0..cam.width {
            let dir = rot * cam.texel_ray(col, row);
            let r = cast_from(t, &origin, &dir, cam.max_range as f64);
            img.data[row * cam.width + col] = img.clamp_range(r);
        }
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Face {
    Front,
    Up,
    Down,
    Left,
    Right,
}

impl Face {
    pub const ALL: [Face; 5] = [Face::Front, Face::Up, Face::Down, Face::Left, Face::Right];

    /// Body-frame (forward, texel-right, texel-up) axes.
    pub fn basis(self) -> [Vector3<f64>; 3] {
        let (x, y, z) = (Vector3::x(), Vector3::y(), Vector3::z());
        match self {
            Face::Front => [x, -y, z],
            Face::Up => [z, -y, -x],
            Face::Down => [-z, -y, x],
            Face::Left => [y, x, z],
            Face::Right => [-y, -x, z],
        }
    }

    /// Body-frame direction at face coordinates `u, v` in `[-1, 1]`.
    pub fn direction(self, u: f64, v: f64) -> Vector3<f64> {
        let [f, r, up] = self.basis();
        (f + r * u + up * v).normalize()
    }
}

/// Five 90-degree faces around the body center, ordered as [`Face::ALL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeMap {
    pub faces: Vec<DepthImage>,
}

impl CubeMap {
    pub fn face(&self, f: Face) -> &DepthImage {
        &self.faces[f as usize]
    }

    pub fn flatten(&self) -> Vec<f32> {
        self.faces
            .iter()
            .flat_map(|f| f.data.iter().copied())
            .collect()
    }
}

fn face_coord(i: usize, n: usize) -> f64 {
    2.0 * (i as f64 + 0.5) / n as f64 - 1.0
}

pub fn render_cubemap(t: &VoxelTerrain, body: &Pose) -> CubeMap {
    render_cubemap_with(t, body, FACE_RES)
}

pub fn render_cubemap_with(t: &VoxelTerrain, body: &Pose, res: usize) -> CubeMap {
    let origin = local_position(t, body);
    let faces = Face::ALL
        .iter()
        .map(|&face| {
            let mut img = DepthImage::filled(res, res, MAX_RANGE);
            for row in 0..res {
                for col in 0..res {
                    let dir =
                        body.rotation * face.direction(face_coord(col, res), -face_coord(row, res));
                    let r = cast_from(t, &origin, &dir, MAX_RANGE as f64);
                    img.data[row * res + col] = img.clamp_range(r);
                }
            }
            img
        })
        .collect();
    CubeMap { faces }
}

/// Clearance along the central ray of one cube face, unclamped below.
pub fn face_center_range(t: &VoxelTerrain, body: &Pose, face: Face) -> f64 {
    let dir = body.rotation * face.direction(0.0, 0.0);
    cast_from(t, &local_position(t, body), &dir, MAX_RANGE as f64)
}

/// Probe clearances per foot in order down, +x, -x, +y, -y, with the
/// horizontal axes following body yaw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootProximity {
    pub samples: Vec<f32>,
}

pub fn probe_feet(t: &VoxelTerrain, feet: &[Vector3<f64>; 4], yaw: f64) -> FootProximity {
    let (s, c) = yaw.sin_cos();
    let fwd = Vector3::new(c, s, 0.0);
    let left = Vector3::new(-s, c, 0.0);
    let dirs = [-Vector3::z(), fwd, -fwd, left, -left];
    let g = t.origin();
    let g = Vector3::new(g[0], g[1], g[2]);
    let mut samples = Vec::with_capacity(FOOT_SAMPLES);
    for foot in feet {
        let local = foot - g;
        for d in &dirs {
            samples.push(cast_from(t, &local, d, PROBE_RANGE).clamp(0.0, PROBE_RANGE) as f32);
        }
    }
    FootProximity { samples }
}

/// Cube map followed by foot probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivilegedVision {
    pub cube: CubeMap,
    pub foot: FootProximity,
}

impl PrivilegedVision {
    pub fn to_vec(&self) -> Vec<f32> {
        let mut v = self.cube.flatten();
        v.extend_from_slice(&self.foot.samples);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    None,
    Patterned,
    Blind,
}

impl std::str::FromStr for NoiseMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NoiseMode::None),
            "patterned" => Ok(NoiseMode::Patterned),
            "blind" => Ok(NoiseMode::Blind),
            other => Err(Error::Invalid(format!("unknown noise mode `{other}`"))),
        }
    }
}

pub const NOISE_STD: f64 = 0.02;
pub const SALT_FRACTION: f64 = 0.01;
pub const OCCLUSION_MIN: f64 = 0.10;
pub const OCCLUSION_MAX: f64 = 0.60;

/// Texel rectangle `[col0, col1) x [row0, row1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub col0: usize,
    pub col1: usize,
    pub row0: usize,
    pub row1: usize,
}

impl Rect {
    pub fn contains(&self, col: usize, row: usize) -> bool {
        col >= self.col0 && col < self.col1 && row >= self.row0 && row < self.row1
    }
}

/// Draws 1 to 3 rectangles whose union covers between 10% and 60% of the
/// image, by rejection.
pub fn occluders(width: usize, height: usize, rng: &mut impl Rng) -> Vec<Rect> {
    let total = (width * height) as f64;
    loop {
        let n = rng.gen_range(1..=3);
        let rects: Vec<Rect> = (0..n)
            .map(|_| {
                let w = rng.gen_range(1..=width);
                let h = rng.gen_range(1..=height);
                let col0 = rng.gen_range(0..=width - w);
                let row0 = rng.gen_range(0..=height - h);
                Rect {
                    col0,
                    col1: col0 + w,
                    row0,
                    row1: row0 + h,
                }
            })
            .collect();
        let covered = (0..height)
            .flat_map(|r| (0..width).map(move |c| (c, r)))
            .filter(|&(c, r)| rects.iter().any(|q| q.contains(c, r)))
            .count() as f64;
        let frac = covered / total;
        if (OCCLUSION_MIN..=OCCLUSION_MAX).contains(&frac) {
            return rects;
        }
    }
}

pub fn corrupt(d: &DepthImage, mode: NoiseMode, seed: u64) -> DepthImage {
    let mut out = d.clone();
    match mode {
        NoiseMode::None => {}
        NoiseMode::Blind => out.data.fill(d.min_range),
        NoiseMode::Patterned => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, NOISE_STD).expect("finite std");
            for v in out.data.iter_mut() {
                let n: f64 = noise.sample(&mut rng);
                *v = (*v as f64 + n) as f32;
                if rng.gen_bool(SALT_FRACTION) {
                    *v = d.max_range;
                }
                *v = v.clamp(d.min_range, d.max_range);
            }
            for r in occluders(d.width, d.height, &mut rng) {
                for row in r.row0..r.row1 {
                    for col in r.col0..r.col1 {
                        out.data[row * d.width + col] = d.min_range;
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolidAngleStats {
    pub min: f64,
    pub max: f64,
    pub ratio: f64,
    pub total: f64,
}

fn rect_solid_angle_antiderivative(x: f64, y: f64) -> f64 {
    (x * y / (1.0 + x * x + y * y).sqrt()).atan()
}

/// Exact solid angle of a texel of an `n x n` face on the plane at unit distance.
pub fn texel_solid_angle(n: usize, col: usize, row: usize) -> f64 {
    let step = 2.0 / n as f64;
    let (x0, y0) = (-1.0 + col as f64 * step, -1.0 + row as f64 * step);
    let (x1, y1) = (x0 + step, y0 + step);
    let f = rect_solid_angle_antiderivative;
    f(x1, y1) - f(x0, y1) - f(x1, y0) + f(x0, y0)
}

pub fn solid_angle_stats(res: usize) -> Result<SolidAngleStats> {
    if res < 2 {
        return Err(Error::Invalid(format!("face resolution {res} below 2")));
    }
    let mut min = f64::INFINITY;
    let mut max: f64 = 0.0;
    let mut total = 0.0;
    for row in 0..res {
        for col in 0..res {
            let w = texel_solid_angle(res, col, row);
            min = min.min(w);
            max = max.max(w);
            total += w;
        }
    }
    Ok(SolidAngleStats {
        min,
        max,
        ratio: max / min,
        total,
    })
}
