use std::path::Path;

use super::grid::{BevGridSpec, Point2};
use super::map::{dist, MapClass, MapElement, VectorMap};
use super::pnm;
use crate::error::{Error, Result};

/// Row-major binary grid; every entry is 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        BinaryMask {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = u8::from(f(r, c));
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.cols + col] != 0
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.cols + col] = u8::from(on);
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Values as `f64` in {0, 1}, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// 8-bit binary PGM, 0 = background, 255 = foreground.
    pub fn to_pgm(&self) -> Vec<u8> {
        let gray: Vec<u8> = self
            .data
            .iter()
            .map(|&v| if v != 0 { 255 } else { 0 })
            .collect();
        pnm::encode_pgm(self.rows, self.cols, &gray)
    }

    /// Any nonzero pixel counts as foreground.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let (rows, cols, gray) = pnm::decode_pgm(bytes)?;
        Ok(BinaryMask {
            rows,
            cols,
            data: gray.into_iter().map(|v| u8::from(v != 0)).collect(),
        })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm(&bytes)
    }
}

/// Surface masks supervised by the road-surface head: drivable area and
/// pedestrian crossings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BevMaskSet {
    pub drivable: BinaryMask,
    pub ped_crossing: BinaryMask,
}

impl BevMaskSet {
    pub const NUM_CLASSES: usize = 2;

    pub fn channels(&self) -> [&BinaryMask; 2] {
        [&self.drivable, &self.ped_crossing]
    }
}

/// One line mask per map class, indexed by [`MapClass::index`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineMasks {
    pub masks: [BinaryMask; 3],
}

impl LineMasks {
    pub fn get(&self, class: MapClass) -> &BinaryMask {
        &self.masks[class.index()]
    }
}

/// Even-odd ray casting; points exactly on an edge may fall either way.
pub fn point_in_polygon(p: Point2, polygon: &[Point2]) -> bool {
    let mut inside = false;
    let n = polygon.len();
    if n < 3 {
        return false;
    }
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (polygon[i], polygon[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn distance_to_segment(p: Point2, a: Point2, b: Point2) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return dist(p, a);
    }
    let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
    dist(p, [a[0] + t * dx, a[1] + t * dy])
}

pub fn distance_to_polyline(p: Point2, points: &[Point2], closed: bool) -> f64 {
    let mut best = points
        .windows(2)
        .map(|w| distance_to_segment(p, w[0], w[1]))
        .fold(f64::INFINITY, f64::min);
    if closed && points.len() > 2 {
        best = best.min(distance_to_segment(p, points[points.len() - 1], points[0]));
    }
    best
}

/// Cell index range `[lo, hi)` whose centers may fall inside the metric box.
fn cell_window(grid: &BevGridSpec, lo: Point2, hi: Point2) -> Option<(usize, usize, usize, usize)> {
    let res = grid.resolution;
    let row_lo = ((grid.x_range[1] - hi[0]) / res - 0.5).floor().max(0.0);
    let row_hi = ((grid.x_range[1] - lo[0]) / res - 0.5).ceil() + 1.0;
    let col_lo = ((grid.y_range[1] - hi[1]) / res - 0.5).floor().max(0.0);
    let col_hi = ((grid.y_range[1] - lo[1]) / res - 0.5).ceil() + 1.0;
    let row_hi = row_hi.min(grid.rows as f64);
    let col_hi = col_hi.min(grid.cols as f64);
    (row_lo < row_hi && col_lo < col_hi).then_some((
        row_lo as usize,
        row_hi as usize,
        col_lo as usize,
        col_hi as usize,
    ))
}

fn bounds(points: &[Point2], pad: f64) -> (Point2, Point2) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    ([lo[0] - pad, lo[1] - pad], [hi[0] + pad, hi[1] + pad])
}

fn fill_polygon(mask: &mut BinaryMask, grid: &BevGridSpec, polygon: &[Point2]) {
    let (lo, hi) = bounds(polygon, 0.0);
    if let Some((r0, r1, c0, c1)) = cell_window(grid, lo, hi) {
        for r in r0..r1 {
            for c in c0..c1 {
                if point_in_polygon(grid.cell_center_unchecked(r, c), polygon) {
                    mask.set(r, c, true);
                }
            }
        }
    }
}

fn stamp_line(mask: &mut BinaryMask, grid: &BevGridSpec, e: &MapElement, half_width: f64) {
    let (lo, hi) = bounds(e.points(), half_width);
    if let Some((r0, r1, c0, c1)) = cell_window(grid, lo, hi) {
        for r in r0..r1 {
            for c in c0..c1 {
                let p = grid.cell_center_unchecked(r, c);
                if distance_to_polyline(p, e.points(), e.closed()) <= half_width {
                    mask.set(r, c, true);
                }
            }
        }
    }
}

/// Polygons enclosing the drivable area.
///
/// Closed boundaries are polygons on their own. Open boundaries are paired in
/// map order; each pair is joined end-to-end (the second one traversed in
/// whichever direction keeps the connecting edges short) into one polygon.
pub fn drivable_polygons(map: &VectorMap) -> Result<Vec<Vec<Point2>>> {
    let mut polygons = Vec::new();
    let mut open = Vec::new();
    for e in map.of_class(MapClass::Boundary) {
        if e.closed() {
            polygons.push(e.points().to_vec());
        } else {
            open.push(e);
        }
    }
    if open.len() % 2 != 0 {
        return Err(Error::OpenDrivableBoundary);
    }
    for pair in open.chunks_exact(2) {
        let (a, b) = (pair[0].points(), pair[1].points());
        let a_end = a[a.len() - 1];
        let mut ring = a.to_vec();
        if dist(a_end, b[0]) <= dist(a_end, b[b.len() - 1]) {
            ring.extend_from_slice(b);
        } else {
            ring.extend(b.iter().rev());
        }
        polygons.push(ring);
    }
    Ok(polygons)
}

/// Rasterizes a vector map onto the BEV grid.
///
/// Returns the surface masks (drivable area filled from boundary polygons,
/// crossings filled from closed crossing polygons) and one line mask per class
/// (cells whose center lies within `line_thickness / 2` of an element).
/// Membership is always decided at the cell center.
pub fn rasterize_map(
    map: &VectorMap,
    grid: &BevGridSpec,
    line_thickness: f64,
) -> Result<(BevMaskSet, LineMasks)> {
    if !(line_thickness > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "line thickness must be positive, got {line_thickness}"
        )));
    }
    let (rows, cols) = (grid.rows, grid.cols);
    let mut drivable_parts = Vec::new();
    for polygon in drivable_polygons(map)? {
        let mut part = BinaryMask::zeros(rows, cols);
        fill_polygon(&mut part, grid, &polygon);
        drivable_parts.push(part);
    }
    let mut drivable = BinaryMask::zeros(rows, cols);
    for part in &drivable_parts {
        for (d, s) in drivable.data.iter_mut().zip(&part.data) {
            *d |= s;
        }
    }

    let mut ped = BinaryMask::zeros(rows, cols);
    for e in map.of_class(MapClass::PedCrossing).filter(|e| e.closed()) {
        fill_polygon(&mut ped, grid, e.points());
    }

    let mut lines = [
        BinaryMask::zeros(rows, cols),
        BinaryMask::zeros(rows, cols),
        BinaryMask::zeros(rows, cols),
    ];
    for e in &map.elements {
        stamp_line(&mut lines[e.class().index()], grid, e, line_thickness / 2.0);
    }

    Ok((
        BevMaskSet {
            drivable,
            ped_crossing: ped,
        },
        LineMasks { masks: lines },
    ))
}
