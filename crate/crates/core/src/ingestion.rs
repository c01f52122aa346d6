//! Scene manifests, the location registry, COWC-style point annotations and
//! the seeded train/test split.
//!
//! Manifest CSV header: `scene_id,location_id,capture_date,gsd_m,width,height,image_path`,
//! optionally followed by `grayscale` (`true`/`false`) and `geotransform`
//! (six space-separated GDAL-order coefficients). Registry CSV header:
//! `location_id,name,area_km2`. Lines starting with `#` are comments.

use std::collections::{BTreeMap, HashSet};
use std::io::Read;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{GeoTransform, PixelBox};

pub const MANIFEST_COLUMNS: [&str; 7] = [
    "scene_id",
    "location_id",
    "capture_date",
    "gsd_m",
    "width",
    "height",
    "image_path",
];
pub const REGISTRY_COLUMNS: [&str; 3] = ["location_id", "name", "area_km2"];
pub const DEFAULT_BOX_SIZE_PX: f64 = 32.0;

#[derive(Debug, Error)]
pub enum IngestionError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column '{0}' in header")]
    MissingColumn(String),
    #[error("row {row}, field {field}: {message}")]
    Field { row: usize, field: String, message: String },
    #[error("row {row}: duplicate {what} '{id}'")]
    Duplicate { row: usize, what: &'static str, id: String },
    #[error("row {row}: unknown location_id '{id}'")]
    UnknownLocation { row: usize, id: String },
    #[error("line {line}: {message}")]
    Annotation { line: usize, message: String },
    #[error("box size must be at least 2 px, got {0}")]
    BoxSize(f64),
    #[error("points outside scene bounds at indices {0:?}")]
    PointsOutOfBounds(Vec<usize>),
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    Fraction(f64),
}

fn io_err(path: &Path, source: std::io::Error) -> IngestionError {
    IngestionError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Location {
    pub location_id: String,
    pub name: String,
    pub area_km2: f64,
}

/// Locations keyed (and iterated) by `location_id`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocationRegistry {
    locations: BTreeMap<String, Location>,
}

impl LocationRegistry {
    pub fn get(&self, id: &str) -> Option<&Location> {
        self.locations.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.locations.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Location> {
        self.locations.values()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub location_id: String,
    pub capture_date: NaiveDate,
    pub gsd_m: f64,
    pub width: usize,
    pub height: usize,
    pub image_path: String,
    pub grayscale: bool,
    pub geo: Option<GeoTransform<f64>>,
}

impl Scene {
    pub fn year(&self) -> i32 {
        self.capture_date.year()
    }
}

/// Ground-truth boxes for one scene, one per annotated car center.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub scene_id: String,
    pub boxes: Vec<PixelBox<f64>>,
    pub source_box_size_px: f64,
}

/// Strict `YYYY-MM-DD`.
pub fn parse_iso_date(text: &str) -> Result<NaiveDate, String> {
    let bytes = text.as_bytes();
    let shape_ok = bytes.len() == 10
        && bytes[4] == b'-'
        && bytes[7] == b'-'
        && bytes
            .iter()
            .enumerate()
            .all(|(i, c)| i == 4 || i == 7 || c.is_ascii_digit());
    if !shape_ok {
        return Err(format!("'{text}' is not an ISO-8601 date (YYYY-MM-DD)"));
    }
    NaiveDate::parse_from_str(text, "%Y-%m-%d").map_err(|e| format!("'{text}': {e}"))
}

struct Columns {
    index: Vec<Option<usize>>,
}

impl Columns {
    fn locate(headers: &csv::StringRecord, names: &[&str], required: usize) -> Result<Self, IngestionError> {
        let index: Vec<Option<usize>> = names
            .iter()
            .map(|n| headers.iter().position(|h| h.trim() == *n))
            .collect();
        if let Some(i) = index[..required].iter().position(Option::is_none) {
            return Err(IngestionError::MissingColumn(names[i].to_owned()));
        }
        Ok(Self { index })
    }

    fn get<'r>(&self, rec: &'r csv::StringRecord, col: usize) -> Option<&'r str> {
        self.index[col].and_then(|i| rec.get(i)).map(str::trim)
    }
}

fn field_err(row: usize, field: &str, message: impl Into<String>) -> IngestionError {
    IngestionError::Field {
        row,
        field: field.to_owned(),
        message: message.into(),
    }
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader)
}

fn required<'r>(
    cols: &Columns,
    rec: &'r csv::StringRecord,
    col: usize,
    name: &str,
    row: usize,
) -> Result<&'r str, IngestionError> {
    match cols.get(rec, col) {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(field_err(row, name, "missing value")),
    }
}

pub fn parse_locations<R: Read>(reader: R) -> Result<LocationRegistry, IngestionError> {
    let mut rdr = csv_reader(reader);
    let cols = Columns::locate(rdr.headers()?, &REGISTRY_COLUMNS, 3)?;
    let mut registry = LocationRegistry::default();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let location_id = required(&cols, &rec, 0, "location_id", row)?.to_owned();
        let name = required(&cols, &rec, 1, "name", row)?.to_owned();
        let area_text = required(&cols, &rec, 2, "area_km2", row)?;
        let area_km2: f64 = area_text
            .parse()
            .map_err(|_| field_err(row, "area_km2", format!("'{area_text}' is not a number")))?;
        if !area_km2.is_finite() || area_km2 <= 0.0 {
            return Err(field_err(
                row,
                "area_km2",
                format!("area must be positive, got {area_text}"),
            ));
        }
        if registry.contains(&location_id) {
            return Err(IngestionError::Duplicate {
                row,
                what: "location_id",
                id: location_id,
            });
        }
        registry.locations.insert(
            location_id.clone(),
            Location {
                location_id,
                name,
                area_km2,
            },
        );
    }
    Ok(registry)
}

pub fn read_locations(path: &Path) -> Result<LocationRegistry, IngestionError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    parse_locations(file)
}

fn parse_bool(text: &str) -> Option<bool> {
    match text.to_ascii_lowercase().as_str() {
        "" | "false" | "0" | "no" => Some(false),
        "true" | "1" | "yes" => Some(true),
        _ => None,
    }
}

/// Parse a scene manifest. When a registry is given, rows naming a location
/// absent from it are rejected.
pub fn parse_manifest<R: Read>(reader: R, registry: Option<&LocationRegistry>) -> Result<Vec<Scene>, IngestionError> {
    let mut rdr = csv_reader(reader);
    let mut names = MANIFEST_COLUMNS.to_vec();
    names.extend(["grayscale", "geotransform"]);
    let cols = Columns::locate(rdr.headers()?, &names, MANIFEST_COLUMNS.len())?;
    let mut seen = HashSet::new();
    let mut scenes = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let scene_id = required(&cols, &rec, 0, "scene_id", row)?.to_owned();
        let location_id = required(&cols, &rec, 1, "location_id", row)?.to_owned();
        let capture_date = parse_iso_date(required(&cols, &rec, 2, "capture_date", row)?)
            .map_err(|m| field_err(row, "capture_date", m))?;
        let gsd_text = required(&cols, &rec, 3, "gsd_m", row)?;
        let gsd_m: f64 = gsd_text
            .parse()
            .ok()
            .filter(|g: &f64| *g > 0.0 && g.is_finite())
            .ok_or_else(|| field_err(row, "gsd_m", format!("'{gsd_text}' is not a positive number")))?;
        let dim = |col: usize, name: &str| -> Result<usize, IngestionError> {
            let t = required(&cols, &rec, col, name, row)?;
            t.parse::<usize>()
                .ok()
                .filter(|v| *v >= 1)
                .ok_or_else(|| field_err(row, name, format!("'{t}' is not a positive integer")))
        };
        let width = dim(4, "width")?;
        let height = dim(5, "height")?;
        let image_path = required(&cols, &rec, 6, "image_path", row)?.to_owned();
        let grayscale = match cols.get(&rec, 7) {
            None => false,
            Some(t) => parse_bool(t).ok_or_else(|| field_err(row, "grayscale", format!("'{t}' is not a boolean")))?,
        };
        let geo = match cols.get(&rec, 8) {
            None | Some("") => None,
            Some(t) => {
                let coeffs: Vec<f64> = t
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<Result<_, _>>()
                    .map_err(|_| field_err(row, "geotransform", format!("'{t}' has a non-numeric coefficient")))?;
                let arr: [f64; 6] = coeffs
                    .try_into()
                    .map_err(|_| field_err(row, "geotransform", "expected 6 coefficients"))?;
                Some(GeoTransform::new(arr).map_err(|e| field_err(row, "geotransform", e.to_string()))?)
            }
        };
        if let Some(reg) = registry {
            if !reg.contains(&location_id) {
                return Err(IngestionError::UnknownLocation { row, id: location_id });
            }
        }
        if !seen.insert(scene_id.clone()) {
            return Err(IngestionError::Duplicate {
                row,
                what: "scene_id",
                id: scene_id,
            });
        }
        scenes.push(Scene {
            scene_id,
            location_id,
            capture_date,
            gsd_m,
            width,
            height,
            image_path,
            grayscale,
            geo,
        });
    }
    Ok(scenes)
}

pub fn read_manifest(path: &Path, registry: Option<&LocationRegistry>) -> Result<Vec<Scene>, IngestionError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    parse_manifest(file, registry)
}

/// Serialize scenes back to manifest CSV. Optional columns are written only when some scene uses them.
pub fn write_manifest(scenes: &[Scene]) -> Result<String, IngestionError> {
    let with_gray = scenes.iter().any(|s| s.grayscale);
    let with_geo = scenes.iter().any(|s| s.geo.is_some());
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut header: Vec<&str> = MANIFEST_COLUMNS.to_vec();
    if with_gray {
        header.push("grayscale");
    }
    if with_geo {
        header.push("geotransform");
    }
    wtr.write_record(&header)?;
    for s in scenes {
        let mut rec = vec![
            s.scene_id.clone(),
            s.location_id.clone(),
            s.capture_date.format("%Y-%m-%d").to_string(),
            s.gsd_m.to_string(),
            s.width.to_string(),
            s.height.to_string(),
            s.image_path.clone(),
        ];
        if with_gray {
            rec.push(s.grayscale.to_string());
        }
        if with_geo {
            rec.push(
                s.geo
                    .map(|g| g.coeffs().iter().map(f64::to_string).collect::<Vec<_>>().join(" "))
                    .unwrap_or_default(),
            );
        }
        wtr.write_record(&rec)?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| IngestionError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("manifest fields are UTF-8"))
}

/// Split off grayscale scenes, which the counting pipeline does not use.
pub fn exclude_grayscale(scenes: Vec<Scene>) -> (Vec<Scene>, Vec<Scene>) {
    scenes.into_iter().partition(|s| !s.grayscale)
}

/// Parse COWC-style center annotations: one `x y` pair per line
/// (whitespace or comma separated); blank lines and `#` comments are skipped.
pub fn parse_cowc_points(text: &str) -> Result<Vec<(f64, f64)>, IngestionError> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|p| !p.is_empty())
            .collect();
        let bad = || IngestionError::Annotation {
            line: i + 1,
            message: format!("expected 'x y', got '{line}'"),
        };
        if parts.len() != 2 {
            return Err(bad());
        }
        let x: f64 = parts[0].parse().map_err(|_| bad())?;
        let y: f64 = parts[1].parse().map_err(|_| bad())?;
        if !x.is_finite() || !y.is_finite() {
            return Err(bad());
        }
        points.push((x, y));
    }
    Ok(points)
}

/// Turn car centers into square boxes of side `box_size_px`, clipped to the scene.
pub fn cowc_points_to_boxes(
    scene_id: &str,
    points: &[(f64, f64)],
    box_size_px: f64,
    width: usize,
    height: usize,
) -> Result<AnnotationSet, IngestionError> {
    if !box_size_px.is_finite() || box_size_px < 2.0 {
        return Err(IngestionError::BoxSize(box_size_px));
    }
    let (w, h) = (width as f64, height as f64);
    let outside: Vec<usize> = points
        .iter()
        .enumerate()
        .filter(|(_, (x, y))| !(0.0..=w).contains(x) || !(0.0..=h).contains(y))
        .map(|(i, _)| i)
        .collect();
    if !outside.is_empty() {
        return Err(IngestionError::PointsOutOfBounds(outside));
    }
    let boxes = points
        .iter()
        .map(|&(x, y)| {
            PixelBox::centered(x, y, box_size_px)
                .ok()
                .and_then(|b| b.clip(0.0, 0.0, w, h))
                .expect("in-bounds center keeps positive area after clipping")
        })
        .collect();
    Ok(AnnotationSet {
        scene_id: scene_id.to_owned(),
        boxes,
        source_box_size_px: box_size_px,
    })
}

pub fn read_cowc_annotations(path: &Path, scene: &Scene, box_size_px: f64) -> Result<AnnotationSet, IngestionError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let points = parse_cowc_points(&text)?;
    cowc_points_to_boxes(&scene.scene_id, &points, box_size_px, scene.width, scene.height)
}

fn split_key(seed: u64, scene_id: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(scene_id.as_bytes());
    hasher.finalize().into()
}

/// Seeded train/test split. Scenes are ranked by a hash of `(seed, scene_id)`
/// and the first `round(n * train_fraction)` go to training, so the result
/// does not depend on manifest order. Each part keeps input order.
pub fn split_scenes(
    scenes: &[Scene],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<Scene>, Vec<Scene>), IngestionError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(IngestionError::Fraction(train_fraction));
    }
    let n_train = (scenes.len() as f64 * train_fraction).round() as usize;
    let mut ranked: Vec<(usize, [u8; 32])> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| (i, split_key(seed, &s.scene_id)))
        .collect();
    ranked.sort_by(|a, b| {
        a.1.cmp(&b.1)
            .then_with(|| scenes[a.0].scene_id.cmp(&scenes[b.0].scene_id))
    });
    let mut is_train = vec![false; scenes.len()];
    for (i, _) in ranked.iter().take(n_train) {
        is_train[*i] = true;
    }
    let (train, test): (Vec<_>, Vec<_>) = scenes.iter().cloned().zip(is_train).partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|(s, _)| s).collect(),
        test.into_iter().map(|(s, _)| s).collect(),
    ))
}
