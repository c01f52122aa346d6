//! Box arithmetic, affine pixel/geographic transforms and polygon membership.
//!
//! Coordinates are continuous: pixel `i` covers `[i, i + 1)`, so a box spanning
//! pixels 0..=9 is `[0, 0, 10, 10]`.

use std::path::Path;

use serde_json::Value;
use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid box [{x_min}, {y_min}, {x_max}, {y_max}]: need finite coordinates with min < max")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("geotransform is not invertible (determinant {0})")]
    SingularTransform(f64),
    #[error("polygon needs at least 3 distinct vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon has a non-finite vertex at index {0}")]
    NonFiniteVertex(usize),
    #[error("polygon edges {0} and {1} intersect")]
    SelfIntersecting(usize, usize),
    #[error("polygon has zero area")]
    ZeroArea,
    #[error("AOI file: {0}")]
    AoiFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Point<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned box with `x_min < x_max` and `y_min < y_max`.
///
/// Fields are private so a degenerate box cannot be built; use [`PixelBox::new`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelBox<T = f64> {
    x_min: T,
    y_min: T,
    x_max: T,
    y_max: T,
}

impl<T: Scalar> PixelBox<T> {
    pub fn new(x_min: T, y_min: T, x_max: T, y_max: T) -> Result<Self, GeometryError> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::InvalidBox {
                x_min: x_min.as_f64(),
                y_min: y_min.as_f64(),
                x_max: x_max.as_f64(),
                y_max: y_max.as_f64(),
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Square of side `size` centered on `(cx, cy)`.
    pub fn centered(cx: T, cy: T, size: T) -> Result<Self, GeometryError> {
        let half = size / T::of(2.0);
        Self::new(cx - half, cy - half, cx + half, cy + half)
    }

    pub fn x_min(&self) -> T {
        self.x_min
    }
    pub fn y_min(&self) -> T {
        self.y_min
    }
    pub fn x_max(&self) -> T {
        self.x_max
    }
    pub fn y_max(&self) -> T {
        self.y_max
    }

    pub fn width(&self) -> T {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> T {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point<T> {
        let two = T::of(2.0);
        Point::new((self.x_min + self.x_max) / two, (self.y_min + self.y_max) / two)
    }

    pub fn coords(&self) -> [T; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn translate(&self, dx: T, dy: T) -> Result<Self, GeometryError> {
        Self::new(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }

    pub fn intersection_area(&self, other: &Self) -> T {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w > T::zero() && h > T::zero() {
            w * h
        } else {
            T::zero()
        }
    }

    /// True when the boxes share positive area.
    pub fn overlaps(&self, other: &Self) -> bool {
        self.intersection_area(other) > T::zero()
    }

    /// Intersection with the rectangle `[x0, x1] x [y0, y1]`; `None` when nothing of positive area remains.
    pub fn clip(&self, x0: T, y0: T, x1: T, y1: T) -> Option<Self> {
        Self::new(
            self.x_min.max(x0),
            self.y_min.max(y0),
            self.x_max.min(x1),
            self.y_max.min(y1),
        )
        .ok()
    }

    pub fn contains_box(&self, other: &Self) -> bool {
        self.x_min <= other.x_min && self.y_min <= other.y_min && other.x_max <= self.x_max && other.y_max <= self.y_max
    }

    pub fn cast<U: Scalar>(&self) -> PixelBox<U> {
        PixelBox {
            x_min: U::of(self.x_min.as_f64()),
            y_min: U::of(self.y_min.as_f64()),
            x_max: U::of(self.x_max.as_f64()),
            y_max: U::of(self.y_max.as_f64()),
        }
    }

    /// Lexicographic order on `(x_min, y_min, x_max, y_max)`.
    pub fn cmp_coords(&self, other: &Self) -> std::cmp::Ordering {
        self.coords()
            .iter()
            .zip(other.coords().iter())
            .map(|(a, b)| a.total_cmp_s(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou<T: Scalar>(a: &PixelBox<T>, b: &PixelBox<T>) -> T {
    let inter = a.intersection_area(b);
    if inter <= T::zero() {
        return T::zero();
    }
    let union = a.area() + b.area() - inter;
    (inter / union).min(T::one())
}

/// Affine pixel-to-geographic transform in GDAL coefficient order:
/// `x = c[0] + col * c[1] + row * c[2]`, `y = c[3] + col * c[4] + row * c[5]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoTransform<T = f64> {
    coeffs: [T; 6],
    inverse: [T; 6],
}

impl<T: Scalar> GeoTransform<T> {
    pub fn new(coeffs: [T; 6]) -> Result<Self, GeometryError> {
        let [x0, a, b, y0, d, e] = coeffs;
        let det = a * e - b * d;
        if !det.is_finite() || det == T::zero() || coeffs.iter().any(|c| !c.is_finite()) {
            return Err(GeometryError::SingularTransform(det.as_f64()));
        }
        // inverse of the 2x2 linear part; slots 0 and 3 hold the inverse translation
        let ia = e / det;
        let ib = -b / det;
        let id = -d / det;
        let ie = a / det;
        let inverse = [-(ia * x0 + ib * y0), ia, ib, -(id * x0 + ie * y0), id, ie];
        Ok(Self { coeffs, inverse })
    }

    pub fn identity() -> Self {
        Self::new([T::zero(), T::one(), T::zero(), T::zero(), T::zero(), T::one()]).expect("identity is invertible")
    }

    /// North-up transform with the given origin and per-pixel scale.
    pub fn north_up(origin_x: T, origin_y: T, scale_x: T, scale_y: T) -> Result<Self, GeometryError> {
        Self::new([origin_x, scale_x, T::zero(), origin_y, T::zero(), scale_y])
    }

    pub fn coeffs(&self) -> [T; 6] {
        self.coeffs
    }

    pub fn pixel_to_geo(&self, col: T, row: T) -> Point<T> {
        let c = &self.coeffs;
        Point::new(c[0] + col * c[1] + row * c[2], c[3] + col * c[4] + row * c[5])
    }

    pub fn geo_to_pixel(&self, x: T, y: T) -> Point<T> {
        // subtract the origin first; large map coordinates would otherwise cancel badly
        let (dx, dy) = (x - self.coeffs[0], y - self.coeffs[3]);
        let c = &self.inverse;
        Point::new(dx * c[1] + dy * c[2], dx * c[4] + dy * c[5])
    }
}

/// Closed polygon in pixel coordinates; the closing edge is implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct AoiPolygon<T = f64> {
    name: String,
    vertices: Vec<Point<T>>,
}

fn orient<T: Scalar>(a: Point<T>, b: Point<T>, c: Point<T>) -> T {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn on_segment<T: Scalar>(a: Point<T>, b: Point<T>, p: Point<T>) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

fn segments_intersect<T: Scalar>(p1: Point<T>, p2: Point<T>, q1: Point<T>, q2: Point<T>) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    let zero = T::zero();
    if ((d1 > zero && d2 < zero) || (d1 < zero && d2 > zero)) && ((d3 > zero && d4 < zero) || (d3 < zero && d4 > zero))
    {
        return true;
    }
    (d1 == zero && on_segment(q1, q2, p1))
        || (d2 == zero && on_segment(q1, q2, p2))
        || (d3 == zero && on_segment(p1, p2, q1))
        || (d4 == zero && on_segment(p1, p2, q2))
}

impl<T: Scalar> AoiPolygon<T> {
    pub fn new(name: impl Into<String>, mut vertices: Vec<Point<T>>) -> Result<Self, GeometryError> {
        if let Some(i) = vertices.iter().position(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(GeometryError::NonFiniteVertex(i));
        }
        if vertices.len() > 1 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        vertices.dedup();
        let n = vertices.len();
        if n < 3 {
            return Err(GeometryError::TooFewVertices(n));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    continue;
                }
                let (a1, a2) = (vertices[i], vertices[(i + 1) % n]);
                let (b1, b2) = (vertices[j], vertices[(j + 1) % n]);
                if segments_intersect(a1, a2, b1, b2) {
                    return Err(GeometryError::SelfIntersecting(i, j));
                }
            }
        }
        let poly = Self {
            name: name.into(),
            vertices,
        };
        if poly.signed_area() == T::zero() {
            return Err(GeometryError::ZeroArea);
        }
        Ok(poly)
    }

    /// Rectangle covering a whole `width x height` image.
    pub fn full_frame(name: impl Into<String>, width: usize, height: usize) -> Self {
        let (w, h) = (T::of_usize(width), T::of_usize(height));
        let z = T::zero();
        Self::new(
            name,
            vec![Point::new(z, z), Point::new(w, z), Point::new(w, h), Point::new(z, h)],
        )
        .expect("non-empty frame is a valid polygon")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn vertices(&self) -> &[Point<T>] {
        &self.vertices
    }

    pub fn signed_area(&self) -> T {
        let n = self.vertices.len();
        let mut acc = T::zero();
        for i in 0..n {
            let (a, b) = (self.vertices[i], self.vertices[(i + 1) % n]);
            acc = acc + (a.x * b.y - b.x * a.y);
        }
        acc / T::of(2.0)
    }

    pub fn contains(&self, p: Point<T>) -> bool {
        point_in_polygon(p, self)
    }
}

/// Even-odd ray crossing test. Points on an edge or vertex are inside.
pub fn point_in_polygon<T: Scalar>(p: Point<T>, poly: &AoiPolygon<T>) -> bool {
    let v = &poly.vertices;
    let n = v.len();
    for i in 0..n {
        let (a, b) = (v[i], v[(i + 1) % n]);
        if orient(a, b, p) == T::zero() && on_segment(a, b, p) {
            return true;
        }
    }
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (v[i], v[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Which frame an AOI's coordinates are expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AoiFrame {
    Pixel,
    Geo,
}

/// One polygon from an AOI file, with the metadata that decides which scenes it applies to.
#[derive(Debug, Clone, PartialEq)]
pub struct AoiFeature {
    pub name: String,
    /// `None` applies the polygon to every scene.
    pub location_id: Option<String>,
    pub frame: AoiFrame,
    pub ring: Vec<Point<f64>>,
}

impl AoiFeature {
    /// Polygon in the pixel frame of a scene. Geo-framed rings need the scene's transform.
    pub fn to_pixel_polygon(&self, geo: Option<&GeoTransform<f64>>) -> Result<AoiPolygon<f64>, GeometryError> {
        match self.frame {
            AoiFrame::Pixel => AoiPolygon::new(self.name.clone(), self.ring.clone()),
            AoiFrame::Geo => {
                let t = geo.ok_or_else(|| {
                    GeometryError::AoiFile(format!(
                        "AOI '{}' is in geographic coordinates but the scene has no geotransform",
                        self.name
                    ))
                })?;
                let ring = self.ring.iter().map(|p| t.geo_to_pixel(p.x, p.y)).collect();
                AoiPolygon::new(self.name.clone(), ring)
            }
        }
    }
}

fn parse_ring(value: &Value, what: &str) -> Result<Vec<Point<f64>>, GeometryError> {
    let rings = value
        .as_array()
        .ok_or_else(|| GeometryError::AoiFile(format!("{what}: coordinates must be an array of rings")))?;
    if rings.is_empty() {
        return Err(GeometryError::AoiFile(format!("{what}: polygon has no rings")));
    }
    if rings.len() > 1 {
        return Err(GeometryError::AoiFile(format!(
            "{what}: polygons with holes are not supported"
        )));
    }
    let ring = rings[0]
        .as_array()
        .ok_or_else(|| GeometryError::AoiFile(format!("{what}: ring must be an array")))?;
    ring.iter()
        .enumerate()
        .map(|(i, pos)| {
            let xy = pos
                .as_array()
                .filter(|a| a.len() >= 2)
                .ok_or_else(|| GeometryError::AoiFile(format!("{what}: position {i} is not [x, y]")))?;
            match (xy[0].as_f64(), xy[1].as_f64()) {
                (Some(x), Some(y)) => Ok(Point::new(x, y)),
                _ => Err(GeometryError::AoiFile(format!(
                    "{what}: position {i} has non-numeric coordinates"
                ))),
            }
        })
        .collect()
}

fn parse_feature(value: &Value, index: usize) -> Result<AoiFeature, GeometryError> {
    let (geometry, props) = match value.get("type").and_then(Value::as_str) {
        Some("Feature") => (
            value
                .get("geometry")
                .ok_or_else(|| GeometryError::AoiFile(format!("feature {index}: missing geometry")))?,
            value.get("properties"),
        ),
        Some("Polygon") => (value, None),
        other => {
            return Err(GeometryError::AoiFile(format!(
                "feature {index}: unsupported type {other:?}"
            )))
        }
    };
    let gtype = geometry.get("type").and_then(Value::as_str);
    if gtype != Some("Polygon") {
        return Err(GeometryError::AoiFile(format!(
            "feature {index}: geometry must be a Polygon, got {gtype:?}"
        )));
    }
    let prop = |key: &str| props.and_then(|p| p.get(key)).and_then(Value::as_str);
    let name = prop("name").map(str::to_owned).unwrap_or_else(|| format!("aoi{index}"));
    let frame = match prop("frame") {
        None | Some("pixel") => AoiFrame::Pixel,
        Some("geo") => AoiFrame::Geo,
        Some(other) => {
            return Err(GeometryError::AoiFile(format!(
                "feature {index}: unknown frame '{other}' (expected pixel or geo)"
            )))
        }
    };
    let what = format!("feature {index} ('{name}')");
    let ring = parse_ring(
        geometry
            .get("coordinates")
            .ok_or_else(|| GeometryError::AoiFile(format!("{what}: missing coordinates")))?,
        &what,
    )?;
    // validate shape now so errors point at the file, not a later scene
    AoiPolygon::new(name.clone(), ring.clone()).map_err(|e| GeometryError::AoiFile(format!("{what}: {e}")))?;
    Ok(AoiFeature {
        name,
        location_id: prop("location_id").map(str::to_owned),
        frame,
        ring,
    })
}

/// Parse a GeoJSON Polygon, Feature or FeatureCollection into AOI features.
///
/// Only the exterior ring is used; polygons with holes are rejected.
/// Feature properties: `name`, `location_id` and `frame` (`pixel` or `geo`).
pub fn parse_aoi_geojson(text: &str) -> Result<Vec<AoiFeature>, GeometryError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| GeometryError::AoiFile(format!("invalid JSON: {e}")))?;
    match doc.get("type").and_then(Value::as_str) {
        Some("FeatureCollection") => doc
            .get("features")
            .and_then(Value::as_array)
            .ok_or_else(|| GeometryError::AoiFile("FeatureCollection without features".into()))?
            .iter()
            .enumerate()
            .map(|(i, f)| parse_feature(f, i))
            .collect(),
        _ => Ok(vec![parse_feature(&doc, 0)?]),
    }
}

pub fn read_aoi_file(path: &Path) -> Result<Vec<AoiFeature>, GeometryError> {
    let text = std::fs::read_to_string(path).map_err(|e| GeometryError::AoiFile(format!("{}: {e}", path.display())))?;
    parse_aoi_geojson(&text)
}
