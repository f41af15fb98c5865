//! Procedural voxel terrains, occupancy queries and the difficulty curriculum.
//!
//! Every course shares one layout along +x: a flat start zone, the
//! family's obstacle starting at [`OBSTACLE_X`], and a goal zone beyond it.
//! Cell `(i, j, k)` covers `origin + [i, i+1) * cell_size` per axis. All
//! space below world `z = 0` is bedrock.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const TERRAIN_MAGIC: &[u8; 12] = b"STRDTERRAIN\0";
pub const TERRAIN_VERSION: u32 = 1;

/// Obstacles start at this world x.
pub const OBSTACLE_X: f64 = 4.0;

/// Axis-aligned planar rectangle `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Zone {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }
}

pub const START_ZONE: Zone = Zone {
    x0: 0.5,
    x1: 2.5,
    y0: 0.5,
    y1: 3.5,
};
pub const GOAL_ZONE: Zone = Zone {
    x0: 7.0,
    x1: 9.0,
    y0: 0.5,
    y1: 3.5,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Flat,
    HighStep,
    Gap,
    Stairs,
    Overhang,
    Discrete,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Flat,
        Family::HighStep,
        Family::Gap,
        Family::Stairs,
        Family::Overhang,
        Family::Discrete,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Flat => "flat",
            Family::HighStep => "high_step",
            Family::Gap => "gap",
            Family::Stairs => "stairs",
            Family::Overhang => "overhang",
            Family::Discrete => "discrete",
        }
    }

    /// Nominal obstacle magnitude in meters at difficulty `d`: platform
    /// height, gap length, stair riser, ceiling clearance or block height.
    pub fn magnitude(self, d: f64) -> f64 {
        match self {
            Family::Flat => 0.0,
            Family::HighStep => 0.1 + 0.6 * d,
            Family::Gap => 0.1 + 0.8 * d,
            Family::Stairs => 0.05 + 0.10 * d,
            Family::Overhang => 0.35 - 0.15 * d,
            Family::Discrete => 0.02 + 0.13 * d,
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown terrain family `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerrainSpec {
    pub family: Family,
    pub difficulty: f64,
    pub seed: u64,
}

impl TerrainSpec {
    pub fn new(family: Family, difficulty: f64, seed: u64) -> Self {
        Self {
            family,
            difficulty,
            seed,
        }
    }
}

/// Arena bound and grid resolution used by [`generate_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArenaConfig {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub cell_size: f64,
}

impl Default for ArenaConfig {
    fn default() -> Self {
        Self {
            length: 12.0,
            width: 4.0,
            height: 2.0,
            cell_size: 0.05,
        }
    }
}

// Gap runway thickness; the gap floor is bedrock.
pub const GAP_PLATFORM: f64 = 0.5;
pub const STAIR_TREAD: f64 = 0.3;
pub const STAIR_STEPS: usize = 5;
pub const OVERHANG_END_X: f64 = 5.0;
pub const OVERHANG_THICKNESS: f64 = 0.3;
pub const DISCRETE_END_X: f64 = 7.0;
pub const DISCRETE_BLOCK: f64 = 0.4;

/// Clearance kept free above start and goal zones.
pub const NOMINAL_CLEARANCE: f64 = 0.45;

/// Occupancy grid. Immutable once generated.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelTerrain {
    nx: usize,
    ny: usize,
    nz: usize,
    cell_size: f32,
    origin: [f32; 3],
    bits: Vec<u8>,
    // Exclusive upper k bound of occupied cells, for ray clipping.
    top_k: usize,
    spec: Option<TerrainSpec>,
    magnitude: f64,
}

impl VoxelTerrain {
    pub fn empty(extents: [usize; 3], cell_size: f32, origin: [f32; 3]) -> Result<Self> {
        let [nx, ny, nz] = extents;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::Invalid(format!(
                "terrain extents must be positive, got {extents:?}"
            )));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::Invalid(format!(
                "cell size must be positive, got {cell_size}"
            )));
        }
        let cells = nx
            .checked_mul(ny)
            .and_then(|v| v.checked_mul(nz))
            .ok_or_else(|| Error::Invalid("terrain extents overflow".into()))?;
        Ok(Self {
            nx,
            ny,
            nz,
            cell_size,
            origin,
            bits: vec![0; cells.div_ceil(8)],
            top_k: 0,
            spec: None,
            magnitude: 0.0,
        })
    }

    /// Same cells placed at a new world origin.
    pub fn with_origin(mut self, origin: [f32; 3]) -> Self {
        self.origin = origin;
        self
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size as f64
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin.map(|v| v as f64)
    }

    /// Generator input, when the terrain came from [`generate`].
    pub fn spec(&self) -> Option<&TerrainSpec> {
        self.spec.as_ref()
    }

    /// Realised obstacle magnitude after quantisation to the grid.
    pub fn magnitude(&self) -> f64 {
        self.magnitude
    }

    /// Exclusive upper bound on occupied layers.
    pub fn top_layer(&self) -> usize {
        self.top_k
    }

    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nx * (j + self.ny * k)
    }

    pub fn cell(&self, i: usize, j: usize, k: usize) -> bool {
        let idx = self.index(i, j, k);
        self.bits[idx / 8] >> (idx % 8) & 1 == 1
    }

    /// Occupancy of a possibly out-of-range cell; outside the grid is free.
    pub fn cell_signed(&self, i: i64, j: i64, k: i64) -> bool {
        if i < 0
            || j < 0
            || k < 0
            || i >= self.nx as i64
            || j >= self.ny as i64
            || k >= self.nz as i64
        {
            return false;
        }
        self.cell(i as usize, j as usize, k as usize)
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, occupied: bool) {
        let idx = self.index(i, j, k);
        if occupied {
            self.bits[idx / 8] |= 1 << (idx % 8);
            self.top_k = self.top_k.max(k + 1);
        } else {
            self.bits[idx / 8] &= !(1 << (idx % 8));
            if k + 1 == self.top_k {
                self.recompute_top();
            }
        }
    }

    fn recompute_top(&mut self) {
        self.top_k = (0..self.nz)
            .rev()
            .find(|&k| (0..self.ny).any(|j| (0..self.nx).any(|i| self.cell(i, j, k))))
            .map_or(0, |k| k + 1);
    }

    /// Cell containing a world point, as signed indices.
    pub fn locate(&self, p: [f64; 3]) -> [i64; 3] {
        let o = self.origin();
        let cs = self.cell_size();
        [0, 1, 2].map(|a| ((p[a] - o[a]) / cs).floor() as i64)
    }

    pub fn occupied(&self, p: [f64; 3]) -> bool {
        if p[2] < 0.0 {
            return true;
        }
        let [i, j, k] = self.locate(p);
        self.cell_signed(i, j, k)
    }

    fn column(&self, x: f64, y: f64) -> Result<(usize, usize)> {
        let [i, j, _] = self.locate([x, y, 0.0]);
        if i < 0 || j < 0 || i >= self.nx as i64 || j >= self.ny as i64 {
            return Err(Error::Invalid(format!(
                "planar point ({x}, {y}) lies outside the terrain"
            )));
        }
        Ok((i as usize, j as usize))
    }

    /// Top of the highest occupied cell of the column at `(x, y)`, or `0`
    /// (the bedrock surface) for an empty column.
    pub fn surface_height(&self, x: f64, y: f64) -> Result<f64> {
        let (i, j) = self.column(x, y)?;
        let top = (0..self.top_k.min(self.nz))
            .rev()
            .find(|&k| self.cell(i, j, k));
        Ok(match top {
            Some(k) => self.origin[2] as f64 + (k + 1) as f64 * self.cell_size(),
            None => 0.0,
        })
    }

    /// Top of the occupied run containing `p`, if `p` is inside solid
    /// space. Bedrock counts as a run topped at `z = 0` unless cells
    /// continue it upward.
    pub fn solid_top(&self, p: [f64; 3]) -> Option<f64> {
        let [i, j, k] = self.locate(p);
        let cs = self.cell_size();
        let oz = self.origin[2] as f64;
        if p[2] < 0.0 {
            // Continue through cells stacked on the bedrock surface.
            let k0 = ((0.0 - oz) / cs).floor() as i64;
            if self.cell_signed(i, j, k0) && k0 as f64 * cs + oz <= 0.0 {
                let mut kk = k0;
                while self.cell_signed(i, j, kk + 1) {
                    kk += 1;
                }
                return Some(oz + (kk + 1) as f64 * cs);
            }
            return Some(0.0);
        }
        if !self.cell_signed(i, j, k) {
            return None;
        }
        let mut kk = k;
        while self.cell_signed(i, j, kk + 1) {
            kk += 1;
        }
        Some(oz + (kk + 1) as f64 * cs)
    }

    /// Top of the highest occupied cell of the column at `p` lying at or
    /// below `p.z`; `0` when only bedrock supports it. Points outside the
    /// planar extents see bare bedrock.
    pub fn ground_below(&self, p: [f64; 3]) -> f64 {
        let [i, j, k] = self.locate(p);
        if i < 0 || j < 0 || i >= self.nx as i64 || j >= self.ny as i64 || k < 0 {
            return 0.0;
        }
        let cs = self.cell_size();
        let oz = self.origin[2] as f64;
        let k_hi = (k as usize).min(self.top_k.saturating_sub(1));
        for kk in (0..=k_hi).rev() {
            if self.cell(i as usize, j as usize, kk) {
                let top = oz + (kk + 1) as f64 * cs;
                if top <= p[2] + 1e-12 || kk as i64 == k {
                    return top;
                }
            }
        }
        0.0
    }

    /// Fills every cell whose center lies inside the world box.
    pub fn fill_box(&mut self, lo: [f64; 3], hi: [f64; 3]) {
        let o = self.origin();
        let cs = self.cell_size();
        let n = [self.nx, self.ny, self.nz];
        let range = |a: usize| {
            let first = ((lo[a] - o[a]) / cs - 0.5).ceil().max(0.0) as usize;
            let last = ((hi[a] - o[a]) / cs - 0.5).floor();
            let last = if last < 0.0 {
                0
            } else {
                (last as usize + 1).min(n[a])
            };
            first..last
        };
        for k in range(2) {
            for j in range(1) {
                for i in range(0) {
                    self.set(i, j, k, true);
                }
            }
        }
    }

    pub fn count_occupied(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TERRAIN_MAGIC)?;
        w.write_all(&TERRAIN_VERSION.to_le_bytes())?;
        for n in [self.nx, self.ny, self.nz] {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        w.write_all(&self.cell_size.to_le_bytes())?;
        for v in self.origin {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.bits)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(44 + self.bits.len());
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[..12] != TERRAIN_MAGIC {
            return Err(Error::Format("not a terrain file".into()));
        }
        let version = u32::from_le_bytes(header[12..16].try_into().unwrap());
        if version != TERRAIN_VERSION {
            return Err(Error::Format(format!(
                "unsupported terrain version {version}"
            )));
        }
        let mut fixed = [0u8; 28];
        r.read_exact(&mut fixed)?;
        let word = |i: usize| <[u8; 4]>::try_from(&fixed[4 * i..4 * i + 4]).unwrap();
        let dims = [0, 1, 2].map(|i| u32::from_le_bytes(word(i)) as usize);
        let cell_size = f32::from_le_bytes(word(3));
        let origin = [4, 5, 6].map(|i| f32::from_le_bytes(word(i)));
        let mut t = Self::empty(dims, cell_size, origin)?;
        r.read_exact(&mut t.bits)?;
        let cells = dims[0] * dims[1] * dims[2];
        if cells % 8 != 0 {
            let last = t.bits.len() - 1;
            t.bits[last] &= (1u8 << (cells % 8)) - 1;
        }
        t.recompute_top();
        Ok(t)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        Self::read_from(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

pub fn generate(spec: &TerrainSpec) -> Result<VoxelTerrain> {
    generate_with(spec, &ArenaConfig::default())
}

pub fn generate_with(spec: &TerrainSpec, arena: &ArenaConfig) -> Result<VoxelTerrain> {
    let d = spec.difficulty;
    if !(0.0..=1.0).contains(&d) {
        return Err(Error::Invalid(format!("difficulty {d} outside [0, 1]")));
    }
    // Quantise with the stored single-precision size so magnitudes match the grid.
    let cs = arena.cell_size as f32 as f64;
    let dims = [arena.length, arena.width, arena.height].map(|v| (v / cs).round() as usize);
    if arena.length < GOAL_ZONE.x1 + 0.5 || arena.width < GOAL_ZONE.y1 + 0.5 {
        return Err(Error::Invalid(format!(
            "arena {}x{} m cannot hold the start and goal zones",
            arena.length, arena.width
        )));
    }
    let mut t = VoxelTerrain::empty(dims, cs as f32, [0.0; 3])?;
    let quant = |v: f64| (v / cs).round() * cs;
    let (len, wid) = (arena.length, arena.width);
    let top_needed;
    let magnitude;
    match spec.family {
        Family::Flat => {
            magnitude = 0.0;
            top_needed = 0.0;
        }
        Family::HighStep => {
            let h = quant(spec.family.magnitude(d));
            t.fill_box([OBSTACLE_X, 0.0, 0.0], [len, wid, h]);
            magnitude = h;
            top_needed = h;
        }
        Family::Gap => {
            let g = quant(spec.family.magnitude(d));
            t.fill_box([0.0, 0.0, 0.0], [OBSTACLE_X, wid, GAP_PLATFORM]);
            t.fill_box([OBSTACLE_X + g, 0.0, 0.0], [len, wid, GAP_PLATFORM]);
            magnitude = g;
            top_needed = GAP_PLATFORM;
        }
        Family::Stairs => {
            let s = quant(spec.family.magnitude(d));
            for step in 1..=STAIR_STEPS {
                let x0 = OBSTACLE_X + (step - 1) as f64 * STAIR_TREAD;
                t.fill_box([x0, 0.0, 0.0], [len, wid, step as f64 * s]);
            }
            magnitude = s;
            top_needed = STAIR_STEPS as f64 * s;
        }
        Family::Overhang => {
            let c = quant(spec.family.magnitude(d));
            t.fill_box(
                [OBSTACLE_X, 0.0, c],
                [OVERHANG_END_X, wid, c + OVERHANG_THICKNESS],
            );
            magnitude = c;
            top_needed = c + OVERHANG_THICKNESS;
        }
        Family::Discrete => {
            let hmax = spec.family.magnitude(d);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let blocks_x = ((DISCRETE_END_X - OBSTACLE_X) / DISCRETE_BLOCK).round() as usize;
            let blocks_y = (wid / DISCRETE_BLOCK).round() as usize;
            let mut tallest: f64 = 0.0;
            for bj in 0..blocks_y {
                for bi in 0..blocks_x {
                    let h = quant(rng.gen_range(0.0..=hmax));
                    if h <= 0.0 {
                        continue;
                    }
                    let x0 = OBSTACLE_X + bi as f64 * DISCRETE_BLOCK;
                    let y0 = bj as f64 * DISCRETE_BLOCK;
                    t.fill_box([x0, y0, 0.0], [x0 + DISCRETE_BLOCK, y0 + DISCRETE_BLOCK, h]);
                    tallest = tallest.max(h);
                }
            }
            magnitude = quant(hmax);
            top_needed = tallest;
        }
    }
    if top_needed + NOMINAL_CLEARANCE > arena.height {
        return Err(Error::Invalid(format!(
            "{:?} obstacle needs {:.2} m of headroom but the arena is {:.2} m tall",
            spec.family,
            top_needed + NOMINAL_CLEARANCE,
            arena.height
        )));
    }
    t.spec = Some(*spec);
    t.magnitude = magnitude;
    Ok(t)
}

/// Trailing-window success-rate curriculum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curriculum {
    pub level: usize,
    pub max_level: usize,
    pub window: usize,
    pub promote_at: f64,
    pub demote_below: f64,
    history: VecDeque<bool>,
}

impl Curriculum {
    pub fn new(max_level: usize) -> Self {
        Self {
            level: 0,
            max_level,
            window: 50,
            promote_at: 0.8,
            demote_below: 0.4,
            history: VecDeque::new(),
        }
    }

    pub fn difficulty(&self) -> f64 {
        if self.max_level == 0 {
            0.0
        } else {
            self.level as f64 / self.max_level as f64
        }
    }

    pub fn success_rate(&self) -> Option<f64> {
        if self.history.is_empty() {
            return None;
        }
        Some(self.history.iter().filter(|&&s| s).count() as f64 / self.history.len() as f64)
    }

    /// Records one episode outcome. The level moves only once the window is
    /// full, by at most one, and the window restarts after every move.
    pub fn update(&mut self, episode_success: bool) -> &mut Self {
        self.history.push_back(episode_success);
        if self.history.len() > self.window {
            self.history.pop_front();
        }
        if self.history.len() == self.window {
            let rate = self.success_rate().unwrap_or(0.0);
            let before = self.level;
            if rate >= self.promote_at && self.level < self.max_level {
                self.level += 1;
            } else if rate < self.demote_below && self.level > 0 {
                self.level -= 1;
            }
            if self.level != before {
                self.history.clear();
            }
        }
        self
    }
}
