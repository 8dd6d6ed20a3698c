//! Point cloud to raster pipeline: noise filtering, DSM/DTM rasterization,
//! nDSM subtraction, label rasterization and tiling.
//!
//! Cell `(r, c)` covers `[x0 + c·cell, x0 + (c+1)·cell) × [y0 + r·cell, y0 + (r+1)·cell)`.

use std::path::Path;

use rstar::RTree;
use rgbh_tensor::{fbt, Tensor};
use serde::{Deserialize, Serialize};

use crate::datagen::CLASS_NAMES;
use crate::error::{Error, Result};
use crate::pointcloud::{Point, PointCloud};
use crate::segnet::IGNORE_INDEX;

pub const DEFAULT_CELL_SIZE: f64 = 0.33;
pub const NODATA: f64 = -9999.0;
pub const GROUND_CLASS: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x0: f64,
    pub y0: f64,
    pub cell: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn new(x0: f64, y0: f64, cell: f64, rows: usize, cols: usize) -> Result<Self> {
        if !(cell > 0.0 && cell.is_finite()) || rows == 0 || cols == 0 || !x0.is_finite() || !y0.is_finite() {
            return Err(Error::InvalidArgument(format!("bad grid: cell {cell}, {rows}×{cols}")));
        }
        Ok(Self { x0, y0, cell, rows, cols })
    }

    /// Smallest grid with origin at the cloud's minimum corner covering every point.
    pub fn covering(pc: &PointCloud, cell: f64) -> Result<Self> {
        let b = pc.bounds().ok_or(Error::EmptyCloud)?;
        let cols = ((b.max_x - b.min_x) / cell).floor() as usize + 1;
        let rows = ((b.max_y - b.min_y) / cell).floor() as usize + 1;
        Self::new(b.min_x, b.min_y, cell, rows, cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.x0) / self.cell).floor();
        let r = ((y - self.y0) / self.cell).floor();
        (c >= 0.0 && r >= 0.0 && (c as usize) < self.cols && (r as usize) < self.rows).then_some((r as usize, c as usize))
    }

    pub fn center(&self, r: usize, c: usize) -> (f64, f64) {
        (self.x0 + (c as f64 + 0.5) * self.cell, self.y0 + (r as f64 + 0.5) * self.cell)
    }
}

/// Floating raster with a nodata marker.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    pub nodata: f64,
}

impl RasterGrid {
    pub fn filled(spec: GridSpec, value: f64) -> Self {
        Self {
            spec,
            values: vec![value; spec.len()],
            nodata: NODATA,
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.spec.cols + c]
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v == self.nodata
    }

    pub fn has_nodata(&self) -> bool {
        self.values.iter().any(|&v| self.is_nodata(v))
    }

    /// Writes the values as a `rows×cols` FBT1 tensor plus a JSON sidecar.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let t = Tensor::<f64>::new(&[self.spec.rows, self.spec.cols], self.values.clone())?;
        fbt::write_file(path, &t)?;
        write_sidecar(path, &self.spec, self.nodata)
    }
}

/// Integer class raster; empty cells hold the ignore index.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    pub spec: GridSpec,
    pub labels: Vec<u8>,
}

impl LabelGrid {
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.labels[r * self.spec.cols + c]
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let vals: Vec<f64> = self.labels.iter().map(|&l| l as f64).collect();
        let t = Tensor::<f32>::from_f64(&[self.spec.rows, self.spec.cols], &vals)?;
        fbt::write_file(path, &t)?;
        write_sidecar(path, &self.spec, IGNORE_INDEX as f64)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    origin: (f64, f64),
    cell_size: f64,
    rows: usize,
    cols: usize,
    nodata: f64,
    palette: Vec<(u8, String)>,
}

fn write_sidecar(path: &Path, spec: &GridSpec, nodata: f64) -> Result<()> {
    let side = Sidecar {
        origin: (spec.x0, spec.y0),
        cell_size: spec.cell,
        rows: spec.rows,
        cols: spec.cols,
        nodata,
        palette: CLASS_NAMES.iter().enumerate().map(|(i, n)| (i as u8, n.to_string())).collect(),
    };
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    std::fs::write(&p, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(&p, e))
}

/// Statistical outlier removal: drops points whose mean distance to their
/// `k` nearest neighbours exceeds `mean + sigma·std` of that statistic over
/// the cloud. Order is preserved.
pub fn filter_noise(pc: &PointCloud, k: usize, sigma: f64) -> Result<PointCloud> {
    if pc.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let n = pc.len();
    let k = k.min(n - 1);
    if k == 0 || sigma.is_infinite() {
        return Ok(pc.clone());
    }
    let mean_dist = knn_mean_distances(&pc.points, k);
    let mu = mean_dist.iter().sum::<f64>() / n as f64;
    let var = mean_dist.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / n as f64;
    // the slack absorbs rounding when all distances are equal
    let limit = mu + sigma * var.sqrt() + 1e-9 * mu.max(1.0);
    let points = pc.points.iter().zip(&mean_dist).filter(|(_, &d)| d <= limit).map(|(p, _)| *p).collect();
    PointCloud::new(points)
}

/// Mean Euclidean distance from each point to its `k` nearest other points.
pub fn knn_mean_distances(points: &[Point], k: usize) -> Vec<f64> {
    let coords: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
    let tree = RTree::bulk_load(coords.clone());
    coords
        .iter()
        .map(|q| {
            // the query point itself comes back first, at distance zero
            let total: f64 = tree
                .nearest_neighbor_iter_with_distance_2(q)
                .skip(1)
                .take(k)
                .map(|(_, d2)| d2.sqrt())
                .sum();
            total / k as f64
        })
        .collect()
}

/// Per-cell aggregate of `z` over the points passing `keep`; empty cells are nodata.
fn bin_z(pc: &PointCloud, spec: &GridSpec, keep: impl Fn(&Point) -> bool, pick: impl Fn(f64, f64) -> f64) -> Result<RasterGrid> {
    let mut grid = RasterGrid::filled(*spec, NODATA);
    let mut hit = false;
    for p in pc.points.iter().filter(|p| keep(p)) {
        if let Some((r, c)) = spec.cell_of(p.x, p.y) {
            let v = &mut grid.values[r * spec.cols + c];
            *v = if *v == NODATA { p.z } else { pick(*v, p.z) };
            hit = true;
        }
    }
    if !hit {
        return Err(Error::NoOverlapWithGrid);
    }
    Ok(grid)
}

/// Per-cell maximum over all points, before infill.
pub fn dsm_raw(pc: &PointCloud, spec: &GridSpec) -> Result<RasterGrid> {
    if pc.is_empty() {
        return Err(Error::EmptyCloud);
    }
    bin_z(pc, spec, |_| true, f64::max)
}

/// Per-cell minimum over ground points, before infill.
pub fn dtm_raw(pc: &PointCloud, spec: &GridSpec, ground_class: u32) -> Result<RasterGrid> {
    if !pc.points.iter().any(|p| p.class == ground_class) {
        return Err(Error::NoGroundPoints);
    }
    bin_z(pc, spec, |p| p.class == ground_class, f64::min)
}

/// DSM with empty cells taken from the nearest filled cell.
pub fn rasterize_dsm(pc: &PointCloud, spec: &GridSpec) -> Result<RasterGrid> {
    Ok(fill_nearest(&dsm_raw(pc, spec)?))
}

/// DTM with empty cells interpolated from the 4 nearest filled cells.
pub fn rasterize_dtm(pc: &PointCloud, spec: &GridSpec, ground_class: u32) -> Result<RasterGrid> {
    Ok(fill_idw(&dtm_raw(pc, spec, ground_class)?, 4, 2.0))
}

/// Filled cells nearest to `(r, c)` by centre distance, sorted by
/// `(dist², row, col)`; at least `want` of them when that many exist.
fn nearest_filled(grid: &RasterGrid, r: usize, c: usize, want: usize) -> Vec<(usize, usize, usize)> {
    let (rows, cols) = (grid.spec.rows as isize, grid.spec.cols as isize);
    let (r, c) = (r as isize, c as isize);
    let max_ring = rows.max(cols);
    let mut found: Vec<(usize, usize, usize)> = Vec::new();
    for ring in 0..=max_ring {
        for dr in -ring..=ring {
            for dc in -ring..=ring {
                if dr.abs() != ring && dc.abs() != ring {
                    continue;
                }
                let (rr, cc) = (r + dr, c + dc);
                if rr < 0 || cc < 0 || rr >= rows || cc >= cols {
                    continue;
                }
                if !grid.is_nodata(grid.get(rr as usize, cc as usize)) {
                    found.push(((dr * dr + dc * dc) as usize, rr as usize, cc as usize));
                }
            }
        }
        // cells on later rings are at least (ring+1)² away
        if found.len() >= want {
            found.sort_unstable();
            let bound = ((ring + 1) * (ring + 1)) as usize;
            if found[want - 1].0 < bound {
                return found;
            }
        }
    }
    found.sort_unstable();
    found
}

pub fn fill_nearest(grid: &RasterGrid) -> RasterGrid {
    let mut out = grid.clone();
    for r in 0..grid.spec.rows {
        for c in 0..grid.spec.cols {
            if grid.is_nodata(grid.get(r, c)) {
                if let Some(&(_, rr, cc)) = nearest_filled(grid, r, c, 1).first() {
                    out.values[r * grid.spec.cols + c] = grid.get(rr, cc);
                }
            }
        }
    }
    out
}

/// Inverse-distance weighting (`1/d^power`, distances in cells) from the
/// `k` nearest filled cells.
pub fn fill_idw(grid: &RasterGrid, k: usize, power: f64) -> RasterGrid {
    let mut out = grid.clone();
    for r in 0..grid.spec.rows {
        for c in 0..grid.spec.cols {
            if !grid.is_nodata(grid.get(r, c)) {
                continue;
            }
            let near = nearest_filled(grid, r, c, k);
            if near.is_empty() {
                continue;
            }
            let (mut num, mut den) = (0.0, 0.0);
            for &(d2, rr, cc) in near.iter().take(k) {
                let w = 1.0 / (d2 as f64).powf(power / 2.0);
                num += w * grid.get(rr, cc);
                den += w;
            }
            out.values[r * grid.spec.cols + c] = num / den;
        }
    }
    out
}

/// `max(dsm − dtm, 0)`; nodata in either input gives nodata.
pub fn derive_ndsm(dsm: &RasterGrid, dtm: &RasterGrid) -> Result<RasterGrid> {
    if dsm.spec != dtm.spec {
        return Err(Error::GridSpecMismatch);
    }
    let values = dsm
        .values
        .iter()
        .zip(&dtm.values)
        .map(|(&s, &t)| if dsm.is_nodata(s) || dtm.is_nodata(t) { NODATA } else { (s - t).max(0.0) })
        .collect();
    Ok(RasterGrid {
        spec: dsm.spec,
        values,
        nodata: NODATA,
    })
}

/// Majority class per cell; ties go to the smaller id.
pub fn rasterize_labels(pc: &PointCloud, spec: &GridSpec) -> Result<LabelGrid> {
    if pc.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut counts = vec![[0u32; IGNORE_INDEX as usize]; spec.len()];
    let mut hit = false;
    for p in &pc.points {
        if p.class >= IGNORE_INDEX as u32 {
            return Err(Error::LabelOutOfRange {
                label: p.class.min(255) as u8,
                classes: IGNORE_INDEX as usize,
            });
        }
        if let Some((r, c)) = spec.cell_of(p.x, p.y) {
            counts[r * spec.cols + c][p.class as usize] += 1;
            hit = true;
        }
    }
    if !hit {
        return Err(Error::NoOverlapWithGrid);
    }
    let labels = counts
        .iter()
        .map(|cell| {
            let mut best = IGNORE_INDEX;
            let mut best_n = 0;
            for (class, &n) in cell.iter().enumerate() {
                if n > best_n {
                    best_n = n;
                    best = class as u8;
                }
            }
            best
        })
        .collect();
    Ok(LabelGrid { spec: *spec, labels })
}

/// Co-registered rasters to cut into tiles.
#[derive(Debug, Clone)]
pub struct AlignedRasters {
    pub height: RasterGrid,
    pub labels: LabelGrid,
    /// Optional three colour planes.
    pub rgb: Option<[RasterGrid; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub row: usize,
    pub col: usize,
    pub size: usize,
    pub height: Vec<f64>,
    pub labels: Vec<u8>,
    /// Channel-major `3×size×size` when colour was supplied.
    pub rgb: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileSet {
    pub tiles: Vec<Tile>,
    /// Windows considered before tiles with nodata were dropped.
    pub candidates: usize,
}

/// Row-major `tile×tile` windows every `stride` cells; windows with nodata
/// in the height or colour rasters are dropped.
pub fn crop_tiles(src: &AlignedRasters, tile: usize, stride: usize) -> Result<TileSet> {
    let spec = src.height.spec;
    if src.labels.spec != spec || src.rgb.as_ref().is_some_and(|c| c.iter().any(|g| g.spec != spec)) {
        return Err(Error::GridSpecMismatch);
    }
    if tile == 0 || stride == 0 || tile > spec.rows || tile > spec.cols {
        return Err(Error::InvalidArgument(format!("tile {tile} / stride {stride} for a {}×{} grid", spec.rows, spec.cols)));
    }
    let nr = (spec.rows - tile) / stride + 1;
    let nc = (spec.cols - tile) / stride + 1;
    let window = |g: &RasterGrid, r0: usize, c0: usize| -> Vec<f64> {
        (0..tile).flat_map(|i| (0..tile).map(move |j| (i, j))).map(|(i, j)| g.get(r0 + i, c0 + j)).collect()
    };
    let mut tiles = Vec::new();
    for tr in 0..nr {
        for tc in 0..nc {
            let (r0, c0) = (tr * stride, tc * stride);
            let height = window(&src.height, r0, c0);
            if height.iter().any(|&v| src.height.is_nodata(v)) {
                continue;
            }
            let rgb = match &src.rgb {
                Some(planes) => {
                    let mut all = Vec::with_capacity(3 * tile * tile);
                    let mut bad = false;
                    for g in planes {
                        let w = window(g, r0, c0);
                        bad |= w.iter().any(|&v| g.is_nodata(v));
                        all.extend(w);
                    }
                    if bad {
                        continue;
                    }
                    Some(all)
                }
                None => None,
            };
            let labels = (0..tile).flat_map(|i| (0..tile).map(move |j| (i, j))).map(|(i, j)| src.labels.get(r0 + i, c0 + j)).collect();
            tiles.push(Tile {
                row: r0,
                col: c0,
                size: tile,
                height,
                labels,
                rgb,
            });
        }
    }
    Ok(TileSet {
        tiles,
        candidates: nr * nc,
    })
}

/// Settings of the full point cloud to tiles pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub cell_size: f64,
    pub noise_k: usize,
    pub noise_sigma: f64,
    pub ground_class: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            cell_size: DEFAULT_CELL_SIZE,
            noise_k: 8,
            noise_sigma: 2.0,
            ground_class: GROUND_CLASS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub filtered: PointCloud,
    pub dsm: RasterGrid,
    pub dtm: RasterGrid,
    pub ndsm: RasterGrid,
    pub labels: LabelGrid,
}

/// Filter, rasterize and subtract over a grid covering the filtered cloud.
pub fn run_pipeline(pc: &PointCloud, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let filtered = filter_noise(pc, cfg.noise_k, cfg.noise_sigma)?;
    let spec = GridSpec::covering(&filtered, cfg.cell_size)?;
    let dsm = rasterize_dsm(&filtered, &spec)?;
    let dtm = rasterize_dtm(&filtered, &spec, cfg.ground_class)?;
    let ndsm = derive_ndsm(&dsm, &dtm)?;
    let labels = rasterize_labels(&filtered, &spec)?;
    Ok(PipelineOutput {
        filtered,
        dsm,
        dtm,
        ndsm,
        labels,
    })
}
