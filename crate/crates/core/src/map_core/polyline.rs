use super::grid::Point2;
use super::map::{dist, MapElement};
use crate::error::{Error, Result};

/// Total length, including the closing edge when `closed`.
pub fn arc_length(points: &[Point2], closed: bool) -> f64 {
    let open: f64 = points.windows(2).map(|w| dist(w[0], w[1])).sum();
    match (closed, points.first(), points.last()) {
        (true, Some(&first), Some(&last)) if points.len() > 2 => open + dist(last, first),
        _ => open,
    }
}

/// Resamples to exactly `n` points at equal arc-length spacing.
///
/// Open polylines keep both endpoints. Closed polylines are walked around the
/// loop starting at the first vertex, with spacing `length / n`, so the first
/// point is preserved and not repeated at the end.
pub fn resample_polyline(points: &[Point2], closed: bool, n: usize) -> Result<Vec<Point2>> {
    if n < 2 {
        return Err(Error::InvalidPolyline(format!(
            "cannot resample to {n} points"
        )));
    }
    if points.len() < 2 {
        return Err(Error::InvalidPolyline(format!(
            "need at least 2 points, got {}",
            points.len()
        )));
    }
    let mut chain = points.to_vec();
    if closed && points.len() > 2 {
        chain.push(points[0]);
    }
    let total = arc_length(&chain, false);
    if !(total > 1e-12) {
        return Err(Error::DegeneratePolyline);
    }
    let step = if closed && points.len() > 2 {
        total / n as f64
    } else {
        total / (n - 1) as f64
    };

    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    let mut seg_start = 0.0;
    let mut seg_len = dist(chain[0], chain[1]);
    for k in 0..n {
        let target = step * k as f64;
        while target > seg_start + seg_len && seg + 2 < chain.len() {
            seg_start += seg_len;
            seg += 1;
            seg_len = dist(chain[seg], chain[seg + 1]);
        }
        let t = if seg_len > 0.0 {
            ((target - seg_start) / seg_len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (a, b) = (chain[seg], chain[seg + 1]);
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    if !(closed && points.len() > 2) {
        out[n - 1] = *chain.last().unwrap();
    }
    Ok(out)
}

/// Resamples an element to `n` points.
pub fn resample_element(e: &MapElement, n: usize) -> Result<Vec<Point2>> {
    resample_polyline(e.points(), e.closed(), n)
}

/// Symmetric Chamfer distance between two point sets: the mean nearest-point
/// distance from `a` to `b`, averaged with the reverse direction.
pub fn chamfer_points(a: &[Point2], b: &[Point2]) -> f64 {
    let directed = |from: &[Point2], to: &[Point2]| -> f64 {
        let sum: f64 = from
            .iter()
            .map(|&p| to.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .sum();
        sum / from.len() as f64
    };
    0.5 * (directed(a, b) + directed(b, a))
}

/// Chamfer distance after resampling both elements to `n_interp` points.
pub fn chamfer_distance(a: &MapElement, b: &MapElement, n_interp: usize) -> Result<f64> {
    let pa = resample_element(a, n_interp)?;
    let pb = resample_element(b, n_interp)?;
    Ok(chamfer_points(&pa, &pb))
}
