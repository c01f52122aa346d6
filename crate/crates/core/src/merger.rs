//! Combining per-tile detections into one scene-global set.
//!
//! Tile overlap makes every car near a seam show up more than once: whole in
//! one tile and cut off in the neighbour. Merging removes those repeats in
//! two passes. First, detections pressed against a tile edge that lies inside
//! the scene are dropped, because with enough overlap the same car appears
//! whole in a neighbouring tile. Second, greedy non-maximum suppression
//! removes the remaining exact or near-exact repeats.
//!
//! The first pass is needed because IoU cannot tell a thin sliver of a car
//! from a different car: a fragment showing a fraction `f` of a box has IoU `f`
//! with the whole box, which falls under any useful threshold as `f -> 0`.
//!
//! Every car is whole, and clear of interior edges by more than `margin`, in
//! some tile as long as its sides are shorter than `overlap - 2 * margin`.

use std::cmp::Ordering;
use std::collections::HashMap;

use thiserror::Error;

use crate::detection::{Detection, Frame};
use crate::geometry::iou;
use crate::tiler::{globalize_box, Tile, TileError};
use crate::Scalar;

pub const DEFAULT_NMS_IOU: f64 = 0.3;
pub const DEFAULT_SEAM_MARGIN_PX: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum MergeError {
    #[error("detection references unknown tile {0:?}")]
    UnknownTile((usize, usize)),
    #[error("detection is not tile-local")]
    NotTileLocal,
    #[error("IoU threshold must lie in (0, 1], got {0}")]
    Threshold(f64),
    #[error(transparent)]
    Tile(#[from] TileError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeConfig {
    pub nms_iou: f64,
    /// Drop detections within this distance of an interior tile edge; `None` disables the pass.
    pub seam_margin_px: Option<f64>,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            nms_iou: DEFAULT_NMS_IOU,
            seam_margin_px: Some(DEFAULT_SEAM_MARGIN_PX),
        }
    }
}

fn tile_positions(tiles: &[Tile]) -> HashMap<(usize, usize), usize> {
    tiles.iter().enumerate().map(|(i, t)| (t.index, i)).collect()
}

fn tile_of<'t, T>(
    d: &Detection<T>,
    tiles: &'t [Tile],
    pos: &HashMap<(usize, usize), usize>,
) -> Result<(usize, &'t Tile), MergeError> {
    if d.frame != Frame::TileLocal {
        return Err(MergeError::NotTileLocal);
    }
    let idx = d.tile_index.ok_or(MergeError::NotTileLocal)?;
    let p = *pos.get(&idx).ok_or(MergeError::UnknownTile(idx))?;
    Ok((p, &tiles[p]))
}

/// Translate tile-local detections into the scene frame.
///
/// Output is ordered by tile (row-major, as in `tiles`) and then by input order
/// within a tile, whatever order the tiles were processed in.
pub fn globalize_all<T: Scalar>(detections: &[Detection<T>], tiles: &[Tile]) -> Result<Vec<Detection<T>>, MergeError> {
    let pos = tile_positions(tiles);
    let mut keyed = Vec::with_capacity(detections.len());
    for d in detections {
        let (p, tile) = tile_of(d, tiles, &pos)?;
        let global = globalize_box(tile, d.bbox())?;
        keyed.push((p, d.with_box(global, Frame::SceneGlobal)));
    }
    // stable: keeps within-tile order
    keyed.sort_by_key(|(p, _)| *p);
    Ok(keyed.into_iter().map(|(_, d)| d).collect())
}

/// Is a tile-local box within `margin` of one of the tile's interior edges?
pub fn touches_seam<T: Scalar>(d: &Detection<T>, tile: &Tile, margin: T) -> bool {
    let [left, top, right, bottom] = tile.interior_edges();
    let b = d.bbox();
    let (w, h) = (T::of_usize(tile.width), T::of_usize(tile.height));
    (left && b.x_min() <= margin)
        || (top && b.y_min() <= margin)
        || (right && b.x_max() >= w - margin)
        || (bottom && b.y_max() >= h - margin)
}

/// Drop tile-local detections cut off by (or pressed against) an interior tile edge.
pub fn discard_seam_truncated<T: Scalar>(
    detections: Vec<Detection<T>>,
    tiles: &[Tile],
    margin: T,
) -> Result<Vec<Detection<T>>, MergeError> {
    let pos = tile_positions(tiles);
    let mut keep = Vec::with_capacity(detections.len());
    for d in detections {
        let (_, tile) = tile_of(&d, tiles, &pos)?;
        if !touches_seam(&d, tile, margin) {
            keep.push(d);
        }
    }
    Ok(keep)
}

/// Processing order for suppression and matching: score descending, then
/// `(x_min, y_min, x_max, y_max)` ascending.
pub fn rank_cmp<T: Scalar>(a: &Detection<T>, b: &Detection<T>) -> Ordering {
    b.score()
        .total_cmp_s(&a.score())
        .then_with(|| a.bbox().cmp_coords(b.bbox()))
}

/// Uniform grid over accepted boxes so each candidate is only compared with
/// nearby boxes. Boxes spanning too many cells go to a list checked every time.
struct AcceptedIndex {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
    large: Vec<usize>,
}

const MAX_CELLS_PER_BOX: i64 = 64;

impl AcceptedIndex {
    fn new<T: Scalar>(detections: &[Detection<T>]) -> Self {
        let n = detections.len().max(1) as f64;
        let mean_side = detections
            .iter()
            .map(|d| d.bbox().width().max(d.bbox().height()).as_f64())
            .sum::<f64>()
            / n;
        let cell = if mean_side.is_finite() && mean_side > 0.0 {
            mean_side
        } else {
            1.0
        };
        Self {
            cell,
            cells: HashMap::new(),
            large: Vec::new(),
        }
    }

    fn span<T: Scalar>(&self, d: &Detection<T>) -> (i64, i64, i64, i64) {
        let [x0, y0, x1, y1] = d.bbox().coords().map(|v| (v.as_f64() / self.cell).floor() as i64);
        (x0, y0, x1, y1)
    }

    fn insert<T: Scalar>(&mut self, i: usize, d: &Detection<T>) {
        let (x0, y0, x1, y1) = self.span(d);
        if (x1 - x0 + 1).saturating_mul(y1 - y0 + 1) > MAX_CELLS_PER_BOX {
            self.large.push(i);
            return;
        }
        for cy in y0..=y1 {
            for cx in x0..=x1 {
                self.cells.entry((cx, cy)).or_default().push(i);
            }
        }
    }

    fn any_overlap<T: Scalar>(&self, d: &Detection<T>, all: &[Detection<T>], threshold: T) -> bool {
        let hit = |&j: &usize| iou(d.bbox(), all[j].bbox()) >= threshold;
        if self.large.iter().any(hit) {
            return true;
        }
        let (x0, y0, x1, y1) = self.span(d);
        if (x1 - x0 + 1).saturating_mul(y1 - y0 + 1) > MAX_CELLS_PER_BOX {
            // a huge candidate: scanning every indexed box is cheaper than every cell
            return self.cells.values().flatten().any(hit);
        }
        (y0..=y1).any(|cy| (x0..=x1).any(|cx| self.cells.get(&(cx, cy)).is_some_and(|v| v.iter().any(hit))))
    }
}

/// Greedy non-maximum suppression.
///
/// Boxes are visited in [`rank_cmp`] order; a box is kept iff its IoU with
/// every box kept so far is below `iou_threshold`. Output is in keep order, so
/// it does not depend on the order of the input.
pub fn dedupe<T: Scalar>(detections: &[Detection<T>], iou_threshold: T) -> Result<Vec<Detection<T>>, MergeError> {
    if !(iou_threshold > T::zero() && iou_threshold <= T::one()) {
        return Err(MergeError::Threshold(iou_threshold.as_f64()));
    }
    let mut order: Vec<&Detection<T>> = detections.iter().collect();
    order.sort_by(|a, b| rank_cmp(a, b));
    let mut kept: Vec<Detection<T>> = Vec::new();
    let mut index = AcceptedIndex::new(detections);
    for d in order {
        if !index.any_overlap(d, &kept, iou_threshold) {
            index.insert(kept.len(), d);
            kept.push(d.clone());
        }
    }
    Ok(kept)
}

/// Full merge for one scene: optional seam filter, globalize, then suppression.
pub fn merge_scene<T: Scalar>(
    per_tile: Vec<Detection<T>>,
    tiles: &[Tile],
    config: &MergeConfig,
) -> Result<Vec<Detection<T>>, MergeError> {
    let filtered = match config.seam_margin_px {
        Some(m) => discard_seam_truncated(per_tile, tiles, T::of(m))?,
        None => per_tile,
    };
    let global = globalize_all(&filtered, tiles)?;
    dedupe(&global, T::of(config.nms_iou))
}
