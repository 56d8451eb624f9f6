use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map_core::{BevGridSpec, CameraParams, Point2};

/// Sampling ranges for procedural road scenes. Ranges are inclusive `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub grid: BevGridSpec,
    /// Centerline curvature, 1/m.
    pub curvature: [f64; 2],
    /// Centerline heading at the ego position, radians.
    pub heading: [f64; 2],
    /// Lateral offset of the centerline at the ego position, meters.
    pub lateral_offset: [f64; 2],
    pub lane_width: [f64; 2],
    pub num_lanes: [usize; 2],
    pub num_crossings: [usize; 2],
    /// Longitudinal depth of a crossing, meters.
    pub crossing_depth: [f64; 2],
    /// Minimum lateral clearance between the road edge and the BEV border.
    pub margin: f64,
    pub rig: RigConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            grid: BevGridSpec::desk(),
            curvature: [-0.01, 0.01],
            heading: [-0.08, 0.08],
            lateral_offset: [-2.0, 2.0],
            lane_width: [3.0, 3.8],
            num_lanes: [1, 3],
            num_crossings: [0, 2],
            crossing_depth: [3.0, 4.0],
            margin: 1.0,
            rig: RigConfig::default(),
        }
    }
}

/// Camera rig layout; every camera shares mount point, pitch and optics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    pub yaws_deg: Vec<f64>,
    pub image_height: usize,
    pub image_width: usize,
    pub hfov_deg: f64,
    pub pitch_down_deg: f64,
    /// Mount point in the ego frame, meters (ground at z = 0).
    pub position: [f64; 3],
}

impl Default for RigConfig {
    /// Two front cameras (front-left, front-right) 60° off the heading.
    fn default() -> Self {
        RigConfig {
            yaws_deg: vec![60.0, -60.0],
            image_height: 64,
            image_width: 128,
            hfov_deg: 110.0,
            pitch_down_deg: 15.0,
            position: [0.5, 0.0, 1.6],
        }
    }
}

impl RigConfig {
    /// Six cameras spaced around the vehicle.
    pub fn surround() -> Self {
        RigConfig {
            yaws_deg: vec![0.0, 55.0, -55.0, 110.0, -110.0, 180.0],
            hfov_deg: 70.0,
            ..RigConfig::default()
        }
    }

    pub fn cameras(&self) -> Vec<CameraParams> {
        self.yaws_deg
            .iter()
            .map(|&yaw| {
                CameraParams::looking(
                    self.position,
                    yaw.to_radians(),
                    self.pitch_down_deg.to_radians(),
                    self.hfov_deg.to_radians(),
                    (self.image_height, self.image_width),
                )
            })
            .collect()
    }
}

/// Circular-arc centerline (a straight line when `curvature == 0`), passing
/// through `(0, offset)` at arc length 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Centerline {
    pub offset: f64,
    pub heading: f64,
    pub curvature: f64,
}

impl Centerline {
    pub fn point(&self, s: f64) -> Point2 {
        let (th, k) = (self.heading, self.curvature);
        if k.abs() < 1e-12 {
            [s * th.cos(), self.offset + s * th.sin()]
        } else {
            [
                ((th + k * s).sin() - th.sin()) / k,
                self.offset + (th.cos() - (th + k * s).cos()) / k,
            ]
        }
    }

    /// Unit left normal at arc length `s`.
    pub fn normal(&self, s: f64) -> Point2 {
        let a = self.heading + self.curvature * s;
        [-a.sin(), a.cos()]
    }

    /// Point at arc length `s`, displaced `lateral` meters to the left.
    pub fn offset_point(&self, s: f64, lateral: f64) -> Point2 {
        let p = self.point(s);
        let n = self.normal(s);
        [p[0] + lateral * n[0], p[1] + lateral * n[1]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossingSlot {
    /// Arc length of the crossing center along the centerline.
    pub s: f64,
    pub depth: f64,
}

/// Sampled world layout of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub centerline: Centerline,
    pub road_half_width: f64,
    pub num_lanes: usize,
    pub crossing_slots: Vec<CrossingSlot>,
    pub rig: Vec<CameraParams>,
}

impl SceneSpec {
    /// Lateral offsets of the lane dividers, right to left.
    pub fn divider_offsets(&self) -> Vec<f64> {
        let lane = 2.0 * self.road_half_width / self.num_lanes as f64;
        (1..self.num_lanes)
            .map(|i| -self.road_half_width + lane * i as f64)
            .collect()
    }
}

const MAX_ATTEMPTS: usize = 1000;

fn check_range<T: PartialOrd + std::fmt::Debug>(name: &str, r: [T; 2]) -> Result<()> {
    if r[0] > r[1] {
        return Err(Error::InvalidConfig(format!("{name} range {r:?} is empty")));
    }
    Ok(())
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        check_range("curvature", self.curvature)?;
        check_range("heading", self.heading)?;
        check_range("lateral_offset", self.lateral_offset)?;
        check_range("lane_width", self.lane_width)?;
        check_range("num_lanes", self.num_lanes)?;
        check_range("num_crossings", self.num_crossings)?;
        check_range("crossing_depth", self.crossing_depth)?;
        if self.num_lanes[0] == 0 {
            return Err(Error::InvalidConfig("num_lanes must be at least 1".into()));
        }
        if self.lane_width[0] <= 0.0 || self.crossing_depth[0] <= 0.0 {
            return Err(Error::InvalidConfig(
                "lane width and crossing depth must be positive".into(),
            ));
        }
        if self.rig.yaws_deg.is_empty() {
            return Err(Error::InvalidConfig("rig has no cameras".into()));
        }
        let half_span = self.grid.y_extent() / 2.0 - self.margin;
        let widest = self.lane_width[0] * self.num_lanes[0] as f64 / 2.0;
        if widest >= half_span {
            return Err(Error::InfeasibleScene(format!(
                "narrowest road half-width {widest:.2} m does not fit the {half_span:.2} m lateral half-range"
            )));
        }
        Ok(())
    }

    fn sample_range(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
        if r[0] == r[1] {
            r[0]
        } else {
            rng.random_range(r[0]..=r[1])
        }
    }

    fn sample_count(rng: &mut ChaCha8Rng, r: [usize; 2]) -> usize {
        rng.random_range(r[0]..=r[1])
    }

    /// True when both road edges stay inside the lateral range (minus margin)
    /// over the full longitudinal range.
    fn road_fits(&self, line: &Centerline, half_width: f64) -> bool {
        let g = &self.grid;
        let y_lo = g.y_range[0] + self.margin;
        let y_hi = g.y_range[1] - self.margin;
        let reach = g.x_extent();
        let steps = 400;
        for i in 0..=steps {
            let s = -reach + 2.0 * reach * i as f64 / steps as f64;
            for lateral in [-half_width, half_width] {
                let p = line.offset_point(s, lateral);
                if p[0] < g.x_range[0] || p[0] > g.x_range[1] {
                    continue;
                }
                if p[1] < y_lo || p[1] > y_hi {
                    return false;
                }
            }
        }
        true
    }
}

/// Samples a scene layout; a pure function of `(seed, cfg)`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = &cfg.grid;
    for _ in 0..MAX_ATTEMPTS {
        let num_lanes = SceneConfig::sample_count(&mut rng, cfg.num_lanes);
        let lane_width = SceneConfig::sample_range(&mut rng, cfg.lane_width);
        let centerline = Centerline {
            offset: SceneConfig::sample_range(&mut rng, cfg.lateral_offset),
            heading: SceneConfig::sample_range(&mut rng, cfg.heading),
            curvature: SceneConfig::sample_range(&mut rng, cfg.curvature),
        };
        let half_width = lane_width * num_lanes as f64 / 2.0;
        if !cfg.road_fits(&centerline, half_width) {
            continue;
        }

        let wanted = SceneConfig::sample_count(&mut rng, cfg.num_crossings);
        let mut slots: Vec<CrossingSlot> = Vec::new();
        let edge_clearance = 4.0;
        let s_lo = g.x_range[0] + edge_clearance;
        let s_hi = g.x_range[1] - edge_clearance;
        let mut tries = 0;
        while slots.len() < wanted && tries < 200 {
            tries += 1;
            let depth = SceneConfig::sample_range(&mut rng, cfg.crossing_depth);
            let s = rng.random_range(s_lo..=s_hi);
            let clear = slots
                .iter()
                .all(|o| (o.s - s).abs() > 0.5 * (o.depth + depth) + 2.0);
            let inside = [-1.0, 1.0].iter().all(|&side| {
                [-0.5, 0.5].iter().all(|&t| {
                    let p = centerline.offset_point(s + t * depth, side * half_width);
                    g.contains(p)
                })
            });
            if clear && inside {
                slots.push(CrossingSlot { s, depth });
            }
        }
        if slots.len() < cfg.num_crossings[0] {
            continue;
        }
        slots.sort_by(|a, b| a.s.total_cmp(&b.s));
        return Ok(SceneSpec {
            seed,
            centerline,
            road_half_width: half_width,
            num_lanes,
            crossing_slots: slots,
            rig: cfg.rig.cameras(),
        });
    }
    Err(Error::InfeasibleScene(format!(
        "no feasible layout after {MAX_ATTEMPTS} draws (seed {seed})"
    )))
}
