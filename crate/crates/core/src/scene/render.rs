use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generate::SceneSpec;
use super::{RgbImage, SceneSample};
use crate::error::{Error, Result};
use crate::map_core::{
    arc_length, rasterize_map, resample_polyline, BevGridSpec, BinaryMask, CameraParams, MapClass,
    MapElement, Point2, VectorMap,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Points per divider/boundary polyline in the stored ground-truth map.
    pub gt_points: usize,
    /// Width of the BEV line masks, meters.
    pub line_thickness: f64,
    /// Radius of the disk stamped at each projected sample, pixels.
    pub stamp_radius_px: f64,
    /// Spacing of the polyline samples projected into the cameras, meters.
    pub sample_spacing: f64,
    /// Half-amplitude of the uniform background noise, in [0, 1] intensity.
    pub noise_amplitude: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            gt_points: 20,
            line_thickness: 1.0,
            stamp_radius_px: 1.0,
            sample_spacing: 0.2,
            noise_amplitude: 0.08,
        }
    }
}

pub fn class_color(class: MapClass) -> [u8; 3] {
    match class {
        MapClass::Divider => [240, 220, 30],
        MapClass::PedCrossing => [30, 100, 250],
        MapClass::Boundary => [250, 40, 40],
    }
}

/// Raw (unclipped) world polylines of a scene, boundaries first.
fn world_elements(spec: &SceneSpec, grid: &BevGridSpec) -> Vec<(MapClass, Vec<Point2>, bool)> {
    let reach = 2.0 * grid.x_extent().max(grid.y_extent());
    let step = 0.5;
    let count = (2.0 * reach / step) as usize;
    let line = |lateral: f64| -> Vec<Point2> {
        (0..=count)
            .map(|i| {
                spec.centerline
                    .offset_point(-reach + step * i as f64, lateral)
            })
            .collect()
    };
    let mut out = vec![
        (MapClass::Boundary, line(spec.road_half_width), false),
        (MapClass::Boundary, line(-spec.road_half_width), false),
    ];
    for d in spec.divider_offsets() {
        out.push((MapClass::Divider, line(d), false));
    }
    let hw = spec.road_half_width;
    for slot in &spec.crossing_slots {
        let (s0, s1) = (slot.s - slot.depth / 2.0, slot.s + slot.depth / 2.0);
        let c = &spec.centerline;
        out.push((
            MapClass::PedCrossing,
            vec![
                c.offset_point(s0, -hw),
                c.offset_point(s1, -hw),
                c.offset_point(s1, hw),
                c.offset_point(s0, hw),
            ],
            true,
        ));
    }
    out
}

/// Liang–Barsky clip of segment `a→b` to the grid box; returns parameters.
fn clip_segment(a: Point2, b: Point2, grid: &BevGridSpec) -> Option<(f64, f64)> {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    let checks = [
        (-dx, a[0] - grid.x_range[0]),
        (dx, grid.x_range[1] - a[0]),
        (-dy, a[1] - grid.y_range[0]),
        (dy, grid.y_range[1] - a[1]),
    ];
    for (p, q) in checks {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Longest connected piece of an open polyline inside the grid box.
pub fn clip_to_grid(points: &[Point2], grid: &BevGridSpec) -> Option<Vec<Point2>> {
    let lerp = |a: Point2, b: Point2, t: f64| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
    let mut pieces: Vec<Vec<Point2>> = Vec::new();
    let mut current: Vec<Point2> = Vec::new();
    for w in points.windows(2) {
        match clip_segment(w[0], w[1], grid) {
            Some((t0, t1)) => {
                let start = lerp(w[0], w[1], t0);
                let end = lerp(w[0], w[1], t1);
                if current.is_empty() || t0 > 0.0 {
                    if !current.is_empty() {
                        pieces.push(std::mem::take(&mut current));
                    }
                    current.push(start);
                }
                push_distinct(&mut current, end);
                if t1 < 1.0 {
                    pieces.push(std::mem::take(&mut current));
                }
            }
            None => {
                if !current.is_empty() {
                    pieces.push(std::mem::take(&mut current));
                }
            }
        }
    }
    if !current.is_empty() {
        pieces.push(current);
    }
    pieces
        .into_iter()
        .filter(|p| p.len() >= 2)
        .max_by(|a, b| arc_length(a, false).total_cmp(&arc_length(b, false)))
}

fn push_distinct(points: &mut Vec<Point2>, p: Point2) {
    if let Some(last) = points.last() {
        if (last[0] - p[0]).hypot(last[1] - p[1]) <= 1e-6 {
            return;
        }
    }
    points.push(p);
}

/// Ground-truth vector map: lines clipped to the grid and resampled to
/// `gt_points`; crossings keep their four corners.
pub fn ground_truth_map(
    spec: &SceneSpec,
    grid: &BevGridSpec,
    cfg: &RenderConfig,
) -> Result<VectorMap> {
    let mut elements = Vec::new();
    for (class, points, closed) in world_elements(spec, grid) {
        if closed {
            if points.iter().all(|&p| grid.contains(p)) {
                elements.push(MapElement::new(class, points, true)?);
            }
            continue;
        }
        let Some(clipped) = clip_to_grid(&points, grid) else {
            continue;
        };
        if arc_length(&clipped, false) < 1.0 {
            continue;
        }
        let resampled = resample_polyline(&clipped, false, cfg.gt_points)?;
        elements.push(MapElement::new(class, resampled, false)?);
    }
    Ok(VectorMap::new(elements))
}

/// Points along an element every `spacing` meters (closing edge included for
/// closed elements).
pub fn pv_sample_points(element: &MapElement, spacing: f64) -> Vec<Point2> {
    let pts = element.points();
    let mut chain = pts.to_vec();
    if element.closed() && pts.len() > 2 {
        chain.push(pts[0]);
    }
    let mut out = Vec::new();
    for w in chain.windows(2) {
        let len = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
        let steps = (len / spacing).ceil().max(1.0) as usize;
        for i in 0..steps {
            let t = i as f64 / steps as f64;
            out.push([
                w[0][0] + t * (w[1][0] - w[0][0]),
                w[0][1] + t * (w[1][1] - w[0][1]),
            ]);
        }
    }
    out.push(*chain.last().unwrap());
    out
}

fn stamp(
    mask: &mut BinaryMask,
    image: &mut RgbImage,
    pixel: [f64; 2],
    radius: f64,
    color: [u8; 3],
) {
    let (h, w) = (mask.rows() as i64, mask.cols() as i64);
    let (u, v) = (pixel[0], pixel[1]);
    let reach = radius.ceil() as i64 + 1;
    let (cu, cv) = (u.floor() as i64, v.floor() as i64);
    for row in (cv - reach)..=(cv + reach) {
        for col in (cu - reach)..=(cu + reach) {
            if row < 0 || col < 0 || row >= h || col >= w {
                continue;
            }
            let (pu, pv) = (col as f64 + 0.5, row as f64 + 0.5);
            let hit = (row == cv && col == cu) || (pu - u).hypot(pv - v) <= radius;
            if hit {
                mask.set(row as usize, col as usize, true);
                image.set(row as usize, col as usize, color);
            }
        }
    }
}

fn background(seed: u64, cam: usize, height: usize, width: usize, amplitude: f64) -> RgbImage {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (cam as u64 + 1));
    let mut img = RgbImage::new(height, width);
    let horizon = height / 3;
    for row in 0..height {
        let base: f64 = if row < horizon { 0.55 } else { 0.35 };
        for col in 0..width {
            let n: f64 = rng.random_range(-amplitude..=amplitude);
            let v = ((base + n).clamp(0.0, 1.0) * 255.0).round() as u8;
            img.set(row, col, [v, v, v.saturating_add(8)]);
        }
    }
    img
}

/// Renders camera images and all ground-truth targets for one scene.
pub fn render_sample(
    spec: &SceneSpec,
    grid: &BevGridSpec,
    cfg: &RenderConfig,
) -> Result<SceneSample> {
    for cam in &spec.rig {
        cam.validate()?;
    }
    let gt_map = ground_truth_map(spec, grid, cfg)?;
    if gt_map.is_empty() {
        return Err(Error::InfeasibleScene(
            "no map element inside the BEV range".into(),
        ));
    }
    let (gt_bev_masks, gt_line_masks) = rasterize_map(&gt_map, grid, cfg.line_thickness)?;

    let mut images = Vec::with_capacity(spec.rig.len());
    let mut pv_masks = Vec::with_capacity(spec.rig.len());
    let mut any_visible = false;
    let draw_order = [MapClass::Boundary, MapClass::Divider, MapClass::PedCrossing];
    for (j, cam) in spec.rig.iter().enumerate() {
        let mut image = background(spec.seed, j, cam.height(), cam.width(), cfg.noise_amplitude);
        let mut mask = BinaryMask::zeros(cam.height(), cam.width());
        for class in draw_order {
            for e in gt_map.of_class(class) {
                for p in pv_sample_points(e, cfg.sample_spacing) {
                    let proj = cam.project([p[0], p[1], 0.0]);
                    if proj.valid {
                        any_visible = true;
                        stamp(
                            &mut mask,
                            &mut image,
                            proj.pixel,
                            cfg.stamp_radius_px,
                            class_color(class),
                        );
                    }
                }
            }
        }
        images.push(image);
        pv_masks.push(mask);
    }
    if !any_visible {
        return Err(Error::BlindRig);
    }
    Ok(SceneSample {
        images,
        rig: spec.rig.clone(),
        gt_map,
        gt_bev_masks,
        gt_line_masks,
        gt_pv_masks: pv_masks,
    })
}

/// Convenience for tests and tools: all cameras of `rig` see a scene?
pub fn visible_in_any(rig: &[CameraParams], p: Point2) -> bool {
    rig.iter().any(|c| c.project([p[0], p[1], 0.0]).valid)
}
