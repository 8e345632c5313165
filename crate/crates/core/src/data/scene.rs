//! Scene descriptions and their deterministic rasterisation.

use serde::{Deserialize, Serialize};

use crate::data::font::{glyph_bitmap, shape_bitmap, Bitmap, GLYPH_SIZE};
use crate::data::vocab::COLOR_INTENSITY;
use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 24;
/// Side of one grid cell; each cell holds at most one sprite.
pub const CELL: usize = 6;
pub const GRID: usize = IMAGE_SIZE / CELL;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectKind {
    /// Indices into `SHAPES` and `COLORS`.
    Shape { shape: u8, color: u8 },
    Glyph(char),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ObjectKind,
    /// Top-left pixel column.
    pub x: usize,
    /// Top-left pixel row.
    pub y: usize,
}

impl SceneObject {
    /// Object drawn in grid cell `cell`, numbered row-major.
    pub fn in_cell(kind: ObjectKind, cell: usize) -> Self {
        Self {
            kind,
            x: (cell % GRID) * CELL,
            y: (cell / GRID) * CELL,
        }
    }

    pub fn row(&self) -> usize {
        self.y / CELL
    }

    pub fn col(&self) -> usize {
        self.x / CELL
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

/// Square grayscale raster with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub size: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn blank(size: usize) -> Self {
        Self {
            size,
            pixels: vec![0.0; size * size],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.size + x]
    }
}

fn sprite(kind: ObjectKind) -> Result<(Bitmap, f64)> {
    match kind {
        ObjectKind::Shape { shape, color } => {
            if shape as usize >= 4 || color as usize >= 4 {
                return Err(Error::invalid("render_image", format!("unknown sprite {kind:?}")));
            }
            Ok((shape_bitmap(shape as usize), COLOR_INTENSITY[color as usize]))
        }
        ObjectKind::Glyph(c) => glyph_bitmap(c)
            .map(|b| (b, 1.0))
            .ok_or_else(|| Error::invalid("render_image", format!("no bitmap for glyph {c:?}"))),
    }
}

/// Draws objects in scene order; lit pixels of later objects overwrite earlier ones.
pub fn render_image(scene: &Scene, size: usize) -> Result<Image> {
    let mut img = Image::blank(size);
    for obj in &scene.objects {
        if obj.x + GLYPH_SIZE > size || obj.y + GLYPH_SIZE > size {
            return Err(Error::invalid(
                "render_image",
                format!("object at ({}, {}) does not fit a {size}x{size} image", obj.x, obj.y),
            ));
        }
        let (bitmap, intensity) = sprite(obj.kind)?;
        for (dy, row) in bitmap.iter().enumerate() {
            for (dx, &lit) in row.iter().enumerate() {
                if lit {
                    img.pixels[(obj.y + dy) * size + obj.x + dx] = intensity;
                }
            }
        }
    }
    Ok(img)
}
