use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::grid::{BevGridSpec, Point2};
use crate::error::{Error, Result};

const MIN_VERTEX_SPACING: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapClass {
    Divider,
    PedCrossing,
    Boundary,
}

impl MapClass {
    pub const ALL: [MapClass; 3] = [MapClass::Divider, MapClass::PedCrossing, MapClass::Boundary];

    pub fn index(self) -> usize {
        match self {
            MapClass::Divider => 0,
            MapClass::PedCrossing => 1,
            MapClass::Boundary => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<MapClass> {
        MapClass::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MapClass::Divider => "divider",
            MapClass::PedCrossing => "ped_crossing",
            MapClass::Boundary => "boundary",
        }
    }
}

impl fmt::Display for MapClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MapClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MapClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown map class {s:?}")))
    }
}

/// One class-labelled polyline of the vector map.
#[derive(Clone, Debug, PartialEq)]
pub struct MapElement {
    class: MapClass,
    points: Vec<Point2>,
    closed: bool,
}

impl MapElement {
    /// Validates point count, finiteness and vertex spacing.
    pub fn new(class: MapClass, points: Vec<Point2>, closed: bool) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidPolyline(format!(
                "{class} needs at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPolyline(format!(
                "{class} has non-finite points"
            )));
        }
        for (i, w) in points.windows(2).enumerate() {
            if dist(w[0], w[1]) <= MIN_VERTEX_SPACING {
                return Err(Error::InvalidPolyline(format!(
                    "{class}: duplicate consecutive points at index {i}"
                )));
            }
        }
        Ok(MapElement {
            class,
            points,
            closed,
        })
    }

    pub fn class(&self) -> MapClass {
        self.class
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn closed(&self) -> bool {
        self.closed
    }

    /// Errors if any point lies farther than `margin` outside the grid's range.
    pub fn check_within(&self, grid: &BevGridSpec, margin: f64) -> Result<()> {
        for p in &self.points {
            let inside = p[0] >= grid.x_range[0] - margin
                && p[0] <= grid.x_range[1] + margin
                && p[1] >= grid.y_range[0] - margin
                && p[1] <= grid.y_range[1] + margin;
            if !inside {
                return Err(Error::OutOfRange(format!(
                    "{} point ({:.3}, {:.3}) beyond BEV range + {margin} m",
                    self.class, p[0], p[1]
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn dist(a: Point2, b: Point2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VectorMap {
    pub elements: Vec<MapElement>,
}

impl VectorMap {
    pub fn new(elements: Vec<MapElement>) -> Self {
        VectorMap { elements }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn of_class(&self, class: MapClass) -> impl Iterator<Item = &MapElement> {
        self.elements.iter().filter(move |e| e.class == class)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = MapDocument {
            elements: self
                .elements
                .iter()
                .map(|e| ElementRecord::from_element(e, None))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MapDocument = serde_json::from_str(text)?;
        let elements = doc
            .elements
            .into_iter()
            .map(|r| r.into_element().map(|(e, _)| e))
            .collect::<Result<_>>()?;
        Ok(VectorMap { elements })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Predicted elements with confidences, sorted by descending confidence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredMap {
    elements: Vec<(MapElement, f64)>,
}

impl ScoredMap {
    /// Sorts by confidence, highest first; equal scores keep input order.
    pub fn new(mut elements: Vec<(MapElement, f64)>) -> Result<Self> {
        if let Some((_, s)) = elements.iter().find(|(_, s)| !s.is_finite()) {
            return Err(Error::Format(format!("non-finite confidence {s}")));
        }
        elements.sort_by(|a, b| b.1.total_cmp(&a.1));
        Ok(ScoredMap { elements })
    }

    pub fn elements(&self) -> &[(MapElement, f64)] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Every element of `map` with confidence 1.
    pub fn from_map(map: &VectorMap) -> Self {
        ScoredMap {
            elements: map.elements.iter().cloned().map(|e| (e, 1.0)).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = MapDocument {
            elements: self
                .elements
                .iter()
                .map(|(e, s)| ElementRecord::from_element(e, Some(*s)))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Parses the map schema; every element must carry a `score`.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MapDocument = serde_json::from_str(text)?;
        let elements = doc
            .elements
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let (e, s) = r.into_element()?;
                let s = s.ok_or_else(|| Error::Format(format!("element {i} has no score")))?;
                Ok((e, s))
            })
            .collect::<Result<_>>()?;
        ScoredMap::new(elements)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
struct MapDocument {
    elements: Vec<ElementRecord>,
}

#[derive(Serialize, Deserialize)]
struct ElementRecord {
    class: MapClass,
    closed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    points: Vec<Point2>,
}

impl ElementRecord {
    fn from_element(e: &MapElement, score: Option<f64>) -> Self {
        ElementRecord {
            class: e.class,
            closed: e.closed,
            score,
            points: e.points.clone(),
        }
    }

    fn into_element(self) -> Result<(MapElement, Option<f64>)> {
        Ok((
            MapElement::new(self.class, self.points, self.closed)?,
            self.score,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn element_validation() {
        assert!(MapElement::new(MapClass::Divider, vec![[0.0, 0.0]], false).is_err());
        assert!(MapElement::new(MapClass::Divider, vec![[0.0, 0.0], [0.0, 0.0]], false).is_err());
        assert!(
            MapElement::new(MapClass::Divider, vec![[0.0, 0.0], [f64::NAN, 0.0]], false).is_err()
        );
        assert!(MapElement::new(MapClass::Divider, vec![[0.0, 0.0], [1.0, 0.0]], false).is_ok());
    }

    #[test]
    fn margin_check() {
        let grid = BevGridSpec::desk();
        let e = MapElement::new(MapClass::Boundary, vec![[0.0, 0.0], [31.0, 0.0]], false).unwrap();
        assert!(e.check_within(&grid, 0.5).is_err());
        assert!(e.check_within(&grid, 1.5).is_ok());
    }

    #[test]
    fn json_schema() {
        let map = VectorMap::new(vec![MapElement::new(
            MapClass::PedCrossing,
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]],
            true,
        )
        .unwrap()]);
        let text = map.to_json().unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["elements"][0]["class"], "ped_crossing");
        assert_eq!(value["elements"][0]["closed"], true);
        assert!(value["elements"][0].get("score").is_none());
        assert_eq!(VectorMap::from_json(&text).unwrap(), map);
    }

    #[test]
    fn scored_maps_sort_and_require_scores() {
        let e =
            |x: f64| MapElement::new(MapClass::Divider, vec![[x, 0.0], [x, 1.0]], false).unwrap();
        let m = ScoredMap::new(vec![(e(0.0), 0.2), (e(1.0), 0.9), (e(2.0), 0.5)]).unwrap();
        let scores: Vec<f64> = m.elements().iter().map(|(_, s)| *s).collect();
        assert_eq!(scores, vec![0.9, 0.5, 0.2]);
        let back = ScoredMap::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let unscored = VectorMap::new(vec![e(0.0)]).to_json().unwrap();
        assert!(ScoredMap::from_json(&unscored).is_err());
        assert!(ScoredMap::new(vec![(e(0.0), f64::NAN)]).is_err());
    }

    #[test]
    fn unknown_class_rejected() {
        let text = r#"{"elements":[{"class":"centerline","closed":false,"points":[[0,0],[1,0]]}]}"#;
        assert!(VectorMap::from_json(text).is_err());
    }
}
