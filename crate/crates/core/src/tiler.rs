//! Sliding-window tiling with overlap. The last tile on each axis is shifted
//! back to end at the scene edge instead of being padded.

use thiserror::Error;

use crate::geometry::{GeometryError, PixelBox};
use crate::Scalar;

pub const DEFAULT_TILE_SIZE: usize = 256;
pub const DEFAULT_TILE_STRIDE: usize = 192;

#[derive(Debug, Error, PartialEq)]
pub enum TileError {
    #[error("stride must satisfy 1 <= stride <= tile size (tile {tile}, stride {stride})")]
    InvalidGrid { tile: usize, stride: usize },
    #[error("box does not intersect tile {0:?}")]
    NoIntersection((usize, usize)),
    #[error("local box exceeds the window of tile {0:?}")]
    OutsideWindow((usize, usize)),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TileGrid {
    tile_size_px: usize,
    stride_px: usize,
}

impl Default for TileGrid {
    fn default() -> Self {
        Self {
            tile_size_px: DEFAULT_TILE_SIZE,
            stride_px: DEFAULT_TILE_STRIDE,
        }
    }
}

impl TileGrid {
    pub fn new(tile_size_px: usize, stride_px: usize) -> Result<Self, TileError> {
        if stride_px == 0 || stride_px > tile_size_px {
            return Err(TileError::InvalidGrid {
                tile: tile_size_px,
                stride: stride_px,
            });
        }
        Ok(Self {
            tile_size_px,
            stride_px,
        })
    }

    pub fn tile_size(&self) -> usize {
        self.tile_size_px
    }

    pub fn stride(&self) -> usize {
        self.stride_px
    }

    pub fn overlap(&self) -> usize {
        self.tile_size_px - self.stride_px
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tile {
    /// `(row, col)` in the tile grid.
    pub index: (usize, usize),
    /// Top-left corner `(x0, y0)` in the scene frame.
    pub origin: (usize, usize),
    pub width: usize,
    pub height: usize,
    /// Scene dimensions, kept so callers can tell scene borders from seams.
    pub scene_size: (usize, usize),
}

impl Tile {
    /// The tile window as a box in the scene frame.
    pub fn window<T: Scalar>(&self) -> PixelBox<T> {
        let (x0, y0) = self.origin;
        PixelBox::new(
            T::of_usize(x0),
            T::of_usize(y0),
            T::of_usize(x0 + self.width),
            T::of_usize(y0 + self.height),
        )
        .expect("tiles have positive size")
    }

    /// Which window edges lie inside the scene (left, top, right, bottom).
    /// Objects cut by these edges continue in a neighbouring tile.
    pub fn interior_edges(&self) -> [bool; 4] {
        let (x0, y0) = self.origin;
        let (w, h) = self.scene_size;
        [x0 > 0, y0 > 0, x0 + self.width < w, y0 + self.height < h]
    }
}

/// Tile origins along one axis of length `len`.
pub fn axis_origins(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut origins = vec![0];
    let mut o = 0;
    while o + tile < len {
        o += stride;
        if o + tile > len {
            o = len - tile;
        }
        origins.push(o);
    }
    origins
}

/// Row-major tile plan covering every pixel of a `width x height` scene.
pub fn plan_tiles(width: usize, height: usize, grid: &TileGrid) -> Vec<Tile> {
    let xs = axis_origins(width, grid.tile_size_px, grid.stride_px);
    let ys = axis_origins(height, grid.tile_size_px, grid.stride_px);
    let tw = grid.tile_size_px.min(width);
    let th = grid.tile_size_px.min(height);
    ys.iter()
        .enumerate()
        .flat_map(|(r, &y0)| {
            xs.iter().enumerate().map(move |(c, &x0)| Tile {
                index: (r, c),
                origin: (x0, y0),
                width: tw,
                height: th,
                scene_size: (width, height),
            })
        })
        .collect()
}

/// Move a scene-frame box into the tile frame, clipped to the window.
pub fn localize_box<T: Scalar>(tile: &Tile, global: &PixelBox<T>) -> Result<PixelBox<T>, TileError> {
    let (x0, y0) = (T::of_usize(tile.origin.0), T::of_usize(tile.origin.1));
    global
        .translate(-x0, -y0)?
        .clip(T::zero(), T::zero(), T::of_usize(tile.width), T::of_usize(tile.height))
        .ok_or(TileError::NoIntersection(tile.index))
}

/// Move a tile-frame box back into the scene frame.
pub fn globalize_box<T: Scalar>(tile: &Tile, local: &PixelBox<T>) -> Result<PixelBox<T>, TileError> {
    let window = PixelBox::new(T::zero(), T::zero(), T::of_usize(tile.width), T::of_usize(tile.height))?;
    if !window.contains_box(local) {
        return Err(TileError::OutsideWindow(tile.index));
    }
    Ok(local.translate(T::of_usize(tile.origin.0), T::of_usize(tile.origin.1))?)
}
