//! Geometry and data model: BEV grid conventions, vector maps, polylines,
//! rasterization, pinhole projection and image codecs.

pub mod camera;
pub mod grid;
pub mod map;
pub mod pnm;
pub mod polyline;
pub mod raster;

pub use camera::{project_to_camera, CameraParams, Point3, Projection};
pub use grid::{BevGridSpec, Point2};
pub use map::{MapClass, MapElement, ScoredMap, VectorMap};
pub use polyline::{
    arc_length, chamfer_distance, chamfer_points, resample_element, resample_polyline,
};
pub use raster::{point_in_polygon, rasterize_map, BevMaskSet, BinaryMask, LineMasks};
