//! Point-cloud scenes with known rasters.

use rand::Rng;
use rgbh::ndsm::{GridSpec, RasterGrid, NODATA};
use rgbh::pointcloud::{Point, PointCloud};

use super::{in_cell, rng};

pub const GROUND: u32 = 0;
pub const BUILDING: u32 = 2;
pub const TREE: u32 = 5;

pub fn pt(x: f64, y: f64, z: f64, class: u32) -> Point {
    Point { x, y, z, class }
}

/// 20 m × 20 m of flat terrain at z = 2 with a 10 m box on `[6, 12)²`
/// and a patch of trees of random height on `[14, 18)²`. Four returns per
/// 0.5 m cell, jittered inside the cell. No ground is seen under the box.
pub fn scene() -> (PointCloud, GridSpec) {
    let spec = GridSpec::new(0.0, 0.0, 0.5, 40, 40).unwrap();
    let mut r = rng(11);
    let mut points = Vec::new();
    for row in 0..40 {
        for col in 0..40 {
            let (cx, cy) = spec.center(row, col);
            for _ in 0..4 {
                let x = cx + r.random_range(-0.2..0.2);
                let y = cy + r.random_range(-0.2..0.2);
                if on_box(cx, cy) {
                    points.push(pt(x, y, 12.0, BUILDING));
                } else if on_trees(cx, cy) && r.random_bool(0.5) {
                    points.push(pt(x, y, 2.0 + r.random_range(3.0..8.0), TREE));
                } else {
                    points.push(pt(x, y, 2.0, GROUND));
                }
            }
        }
    }
    (PointCloud::new(points).unwrap(), spec)
}

pub fn on_box(x: f64, y: f64) -> bool {
    (6.0..12.0).contains(&x) && (6.0..12.0).contains(&y)
}

pub fn on_trees(x: f64, y: f64) -> bool {
    (14.0..18.0).contains(&x) && (14.0..18.0).contains(&y)
}

/// First cell where the nDSM of [`scene`] is wrong, if any.
pub fn scene_ndsm_violation(ndsm: &RasterGrid) -> Option<String> {
    let spec = ndsm.spec;
    let (mut boxed, mut open) = (0, 0);
    for row in 0..spec.rows {
        for col in 0..spec.cols {
            let (x, y) = spec.center(row, col);
            let v = ndsm.get(row, col);
            if v < 0.0 {
                return Some(format!("negative nDSM {v} at ({row},{col})"));
            }
            if on_box(x, y) {
                if v != 10.0 {
                    return Some(format!("box cell ({row},{col}) is {v}"));
                }
                boxed += 1;
            } else if !on_trees(x, y) {
                if v != 0.0 {
                    return Some(format!("open cell ({row},{col}) is {v}"));
                }
                open += 1;
            }
        }
    }
    (boxed != 144 || open != 1600 - 144 - 64).then(|| format!("{boxed} box and {open} open cells"))
}

/// 1000 points on `[0, 10)²` over a 0.5 m grid whose edges are exact in
/// binary, with a mix of ground and other classes.
pub fn random_cloud(seed: u64) -> PointCloud {
    let mut r = rng(seed);
    let points = (0..1000)
        .map(|_| {
            let class = if r.random_bool(0.4) { GROUND } else { r.random_range(1..6) };
            pt(r.random_range(0.0..10.0), r.random_range(0.0..10.0), r.random_range(-5.0..30.0), class)
        })
        .collect();
    PointCloud::new(points).unwrap()
}

pub fn oracle_grid(pc: &PointCloud, spec: &GridSpec, keep: impl Fn(&Point) -> bool, better: impl Fn(f64, f64) -> bool) -> Vec<f64> {
    let mut out = Vec::new();
    for row in 0..spec.rows {
        for col in 0..spec.cols {
            let mut best: Option<f64> = None;
            for p in pc.points.iter().filter(|p| keep(p) && in_cell(p, spec.x0, spec.y0, spec.cell, row, col)) {
                if best.is_none_or(|b| better(p.z, b)) {
                    best = Some(p.z);
                }
            }
            out.push(best.unwrap_or(NODATA));
        }
    }
    out
}


/// Most frequent class per cell, lowest class on ties, 255 where empty.
pub fn oracle_labels(pc: &PointCloud, spec: &GridSpec) -> Vec<u8> {
    let mut out = Vec::new();
    for row in 0..spec.rows {
        for col in 0..spec.cols {
            let mut counts = [0usize; 6];
            for p in pc.points.iter().filter(|p| in_cell(p, spec.x0, spec.y0, spec.cell, row, col)) {
                counts[p.class as usize] += 1;
            }
            let top = *counts.iter().max().unwrap();
            out.push(if top == 0 { 255 } else { counts.iter().position(|&n| n == top).unwrap() as u8 });
        }
    }
    out
}
