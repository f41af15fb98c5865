#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strider::terrain::{generate, Family, TerrainSpec, VoxelTerrain};

/// Fixed-step ray marcher. Each step segment (shorter than a cell) is
/// tested exactly against the handful of cells its bounding box touches,
/// so the result carries no step-size error.
pub fn march(t: &VoxelTerrain, origin: [f64; 3], dir: [f64; 3], max_range: f64) -> f64 {
    let g = t.origin();
    let o = [origin[0] - g[0], origin[1] - g[1], origin[2] - g[2]];
    let cs = t.cell_size();
    let [nx, ny, nz] = t.extents();
    let occupied = |i: i64, j: i64, k: i64| {
        i >= 0
            && j >= 0
            && k >= 0
            && i < nx as i64
            && j < ny as i64
            && k < nz as i64
            && t.cell(i as usize, j as usize, k as usize)
    };
    if origin[2] < 0.0 {
        return 0.0;
    }
    let start = o.map(|v| (v / cs).floor() as i64);
    if occupied(start[0], start[1], start[2]) {
        return 0.0;
    }
    let mut limit = max_range;
    if dir[2] < 0.0 {
        limit = limit.min(-origin[2] / dir[2]);
    }
    let step = cs / 50.0;
    let mut t0 = 0.0;
    while t0 < limit {
        let t1 = (t0 + step).min(limit);
        let a = [0, 1, 2].map(|k| o[k] + dir[k] * t0);
        let b = [0, 1, 2].map(|k| o[k] + dir[k] * t1);
        let lo = [0, 1, 2].map(|k| (a[k].min(b[k]) / cs).floor() as i64);
        let hi = [0, 1, 2].map(|k| (a[k].max(b[k]) / cs).floor() as i64);
        let mut best: Option<f64> = None;
        for i in lo[0]..=hi[0] {
            for j in lo[1]..=hi[1] {
                for k in lo[2]..=hi[2] {
                    if !occupied(i, j, k) {
                        continue;
                    }
                    if let Some(te) = slab_entry(o, dir, [i, j, k], cs) {
                        if te <= t1 && te >= t0 - 1e-12 {
                            best = Some(best.map_or(te, |x: f64| x.min(te)));
                        }
                    }
                }
            }
        }
        if let Some(te) = best {
            return te.max(0.0);
        }
        t0 = t1;
    }
    limit
}

fn slab_entry(o: [f64; 3], d: [f64; 3], cell: [i64; 3], cs: f64) -> Option<f64> {
    let mut enter = f64::NEG_INFINITY;
    let mut exit = f64::INFINITY;
    for a in 0..3 {
        let lo = cell[a] as f64 * cs;
        let hi = (cell[a] + 1) as f64 * cs;
        if d[a] == 0.0 {
            if o[a] < lo || o[a] >= hi {
                return None;
            }
            continue;
        }
        let (mut p, mut q) = ((lo - o[a]) / d[a], (hi - o[a]) / d[a]);
        if p > q {
            std::mem::swap(&mut p, &mut q);
        }
        enter = enter.max(p);
        exit = exit.min(q);
    }
    (enter <= exit && exit >= 0.0).then_some(enter)
}

/// Twenty terrains covering every family over a spread of difficulties.
pub fn scene_suite() -> Vec<VoxelTerrain> {
    (0..20)
        .map(|i| {
            let family = Family::ALL[i % Family::ALL.len()];
            let d = (i as f64 * 0.37).fract();
            generate(&TerrainSpec::new(family, d, 100 + i as u64)).unwrap()
        })
        .collect()
}

pub fn random_ray(rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3]) {
    let origin = [
        rng.gen_range(0.0..12.0),
        rng.gen_range(0.0..4.0),
        rng.gen_range(0.0..1.2),
    ];
    let mut d = [0.0f64; 3];
    loop {
        for v in d.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            d.iter_mut().for_each(|v| *v /= n);
            return (origin, d);
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
