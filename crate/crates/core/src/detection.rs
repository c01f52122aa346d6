//! Detector contract and the built-in detectors.
//!
//! Three detectors ship with the crate: a luminance blob baseline, a
//! ground-truth oracle used to test the pipeline, and an adapter that reads
//! scene-global detections produced elsewhere (see [`read_detections`]).
//!
//! Interchange format: one flat JSON object per line,
//! `{"scene_id": s, "x_min": f, "y_min": f, "x_max": f, "y_max": f, "score": f, "class": "car"}`,
//! scene-global pixel coordinates written with 2 decimals, UTF-8, LF endings.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use image::{GenericImageView, Rgb};
use serde::Deserialize;
use thiserror::Error;

use crate::geometry::{GeometryError, PixelBox};
use crate::ingestion::AnnotationSet;
use crate::tiler::{localize_box, Tile};
use crate::Scalar;

pub const DEFAULT_CLASS: &str = "car";

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("score {0} outside [0, 1]")]
    Score(f64),
    #[error("tile-local detection without a tile index")]
    MissingTileIndex,
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("tile {0:?}: detector needs image pixels")]
    MissingImage((usize, usize)),
    #[error("invalid detector config: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Frame {
    TileLocal,
    SceneGlobal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection<T = f64> {
    bbox: PixelBox<T>,
    score: T,
    pub class_label: String,
    pub frame: Frame,
    /// Tile that produced the detection; required for tile-local detections.
    pub tile_index: Option<(usize, usize)>,
}

impl<T: Scalar> Detection<T> {
    pub fn new(
        bbox: PixelBox<T>,
        score: T,
        frame: Frame,
        tile_index: Option<(usize, usize)>,
    ) -> Result<Self, DetectError> {
        if !(score >= T::zero() && score <= T::one()) {
            return Err(DetectError::Score(score.as_f64()));
        }
        if frame == Frame::TileLocal && tile_index.is_none() {
            return Err(DetectError::MissingTileIndex);
        }
        Ok(Self {
            bbox,
            score,
            class_label: DEFAULT_CLASS.to_owned(),
            frame,
            tile_index,
        })
    }

    pub fn scene_global(bbox: PixelBox<T>, score: T) -> Result<Self, DetectError> {
        Self::new(bbox, score, Frame::SceneGlobal, None)
    }

    pub fn tile_local(bbox: PixelBox<T>, score: T, tile_index: (usize, usize)) -> Result<Self, DetectError> {
        Self::new(bbox, score, Frame::TileLocal, Some(tile_index))
    }

    pub fn bbox(&self) -> &PixelBox<T> {
        &self.bbox
    }

    pub fn score(&self) -> T {
        self.score
    }

    /// Same detection with a different box and frame; score and class carry over.
    pub fn with_box(&self, bbox: PixelBox<T>, frame: Frame) -> Self {
        Self {
            bbox,
            frame,
            ..self.clone()
        }
    }
}

/// Anything that turns one tile into tile-local detections.
///
/// Implementations hold no mutable state across calls, so a single detector
/// can serve many tiles concurrently.
pub trait Detector: Send + Sync {
    /// `pixels` is the tile's RGB content when the caller has an image loaded.
    fn detect(&self, tile: &Tile, pixels: Option<&dyn TilePixels>) -> Result<Vec<Detection<f64>>, DetectError>;
}

/// Object-safe view of an RGB tile.
pub trait TilePixels: Sync {
    fn dimensions(&self) -> (u32, u32);
    fn rgb(&self, x: u32, y: u32) -> [u8; 3];
}

impl<V: GenericImageView<Pixel = Rgb<u8>> + Sync> TilePixels for V {
    fn dimensions(&self) -> (u32, u32) {
        GenericImageView::dimensions(self)
    }

    fn rgb(&self, x: u32, y: u32) -> [u8; 3] {
        self.get_pixel(x, y).0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    /// Pixels with mean channel value above this count as foreground.
    pub threshold: f64,
    pub min_area_px: usize,
    pub max_area_px: usize,
    /// Components whose fill ratio (area / box area) is below this are dropped.
    pub min_fill: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            threshold: 128.0,
            min_area_px: 64,
            max_area_px: 4096,
            min_fill: 0.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        if !(0.0..=255.0).contains(&self.threshold) {
            return Err(DetectError::Config(format!(
                "threshold {} outside [0, 255]",
                self.threshold
            )));
        }
        if self.min_area_px >= self.max_area_px {
            return Err(DetectError::Config(format!(
                "min_area_px {} must be below max_area_px {}",
                self.min_area_px, self.max_area_px
            )));
        }
        if !(0.0..=1.0).contains(&self.min_fill) {
            return Err(DetectError::Config(format!(
                "min_fill {} outside [0, 1]",
                self.min_fill
            )));
        }
        Ok(())
    }
}

/// Threshold on luminance `(R + G + B) / 3`, label 4-connected components and
/// keep those with area in `[min_area_px, max_area_px]`. Score is the fill ratio.
///
/// Returned boxes are in the frame of `pixels`, in raster order of each
/// component's first pixel.
pub fn blob_detect<T: Scalar>(pixels: &dyn TilePixels, config: &DetectorConfig) -> Vec<(PixelBox<T>, T)> {
    let (w, h) = pixels.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut fg = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let [r, g, b] = pixels.rgb(x as u32, y as u32);
            let lum = (r as f64 + g as f64 + b as f64) / 3.0;
            fg[y * w + x] = lum > config.threshold;
        }
    }
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !fg[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut area = 0usize;
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            let mut visit = |j: usize| {
                if fg[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if area < config.min_area_px || area > config.max_area_px {
            continue;
        }
        let box_area = (x1 - x0 + 1) * (y1 - y0 + 1);
        let fill = area as f64 / box_area as f64;
        if fill < config.min_fill {
            continue;
        }
        let bbox = PixelBox::new(
            T::of_usize(x0),
            T::of_usize(y0),
            T::of_usize(x1 + 1),
            T::of_usize(y1 + 1),
        )
        .expect("component box has at least one pixel");
        out.push((bbox, T::of(fill)));
    }
    out
}

/// Luminance blob baseline.
#[derive(Debug, Clone, Default)]
pub struct BlobDetector {
    pub config: DetectorConfig,
}

impl Detector for BlobDetector {
    fn detect(&self, tile: &Tile, pixels: Option<&dyn TilePixels>) -> Result<Vec<Detection<f64>>, DetectError> {
        let pixels = pixels.ok_or(DetectError::MissingImage(tile.index))?;
        blob_detect::<f64>(pixels, &self.config)
            .into_iter()
            .map(|(b, s)| Detection::tile_local(b, s, tile.index))
            .collect()
    }
}

/// Every ground-truth box touching a tile, localized and clipped to it, with score 1.
pub fn oracle_detect<T: Scalar>(tile: &Tile, truth: &AnnotationSet) -> Vec<Detection<T>> {
    let window = tile.window::<f64>();
    truth
        .boxes
        .iter()
        .filter(|b| b.overlaps(&window))
        .filter_map(|b| localize_box(tile, &b.cast::<T>()).ok())
        .map(|b| Detection::tile_local(b, T::one(), tile.index).expect("score 1 is valid"))
        .collect()
}

#[derive(Debug, Clone)]
pub struct OracleDetector {
    pub truth: AnnotationSet,
}

impl Detector for OracleDetector {
    fn detect(&self, tile: &Tile, _pixels: Option<&dyn TilePixels>) -> Result<Vec<Detection<f64>>, DetectError> {
        Ok(oracle_detect(tile, &self.truth))
    }
}

/// A scene-global detection tagged with the scene it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDetection {
    pub scene_id: String,
    pub detection: Detection<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    scene_id: String,
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    score: f64,
    #[serde(rename = "class", default = "default_class")]
    class_label: String,
}

fn default_class() -> String {
    DEFAULT_CLASS.to_owned()
}

/// Parse interchange records in file order. Blank lines are ignored.
pub fn parse_detections<R: Read>(reader: R) -> Result<Vec<SceneDetection>, DetectError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| DetectError::Line {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| DetectError::Line { line: line_no, message };
        let rec: Record = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if !(0.0..=1.0).contains(&rec.score) {
            return Err(bad(format!("score {} outside [0, 1]", rec.score)));
        }
        let bbox = PixelBox::new(rec.x_min, rec.y_min, rec.x_max, rec.y_max).map_err(|e| bad(e.to_string()))?;
        let mut detection = Detection::scene_global(bbox, rec.score).map_err(|e| bad(e.to_string()))?;
        detection.class_label = rec.class_label;
        out.push(SceneDetection {
            scene_id: rec.scene_id,
            detection,
        });
    }
    Ok(out)
}

pub fn read_detections(path: &Path) -> Result<Vec<SceneDetection>, DetectError> {
    let file = std::fs::File::open(path).map_err(|e| DetectError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_detections(file)
}

/// Canonical single-line encoding of one record, without the trailing newline.
pub fn format_detection<T: Scalar>(scene_id: &str, d: &Detection<T>) -> String {
    let c = d.bbox().coords().map(Scalar::as_f64);
    format!(
        "{{\"scene_id\": {}, \"x_min\": {:.2}, \"y_min\": {:.2}, \"x_max\": {:.2}, \"y_max\": {:.2}, \"score\": {}, \"class\": {}}}",
        serde_json::Value::from(scene_id),
        c[0],
        c[1],
        c[2],
        c[3],
        serde_json::Value::from(d.score().as_f64()),
        serde_json::Value::from(d.class_label.as_str()),
    )
}

pub fn write_detections<'a, T: Scalar>(records: impl IntoIterator<Item = (&'a str, &'a Detection<T>)>) -> String {
    let mut out = String::new();
    for (scene_id, d) in records {
        let _ = writeln!(out, "{}", format_detection(scene_id, d));
    }
    out
}
