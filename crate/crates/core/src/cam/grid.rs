//! Models × methods grid of overlays with a manifest that pins each tile.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{explain, overlay, CamConfig, CamMethod, DifferentiableModel};
use crate::error::{Error, Result};
use crate::imaging;
use crate::render::{self, Colormap};
use crate::seed::sha256_hex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    pub model: String,
    pub method: CamMethod,
    pub image: String,
    pub class: Option<usize>,
    pub layer: Option<String>,
    /// SHA-256 of the tile's PNG encoding.
    pub tile_sha256: Option<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridManifest {
    pub alpha: f64,
    pub colormap: Colormap,
    pub config: CamConfig,
    pub tile_size: u32,
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<GridCell>,
}

fn error_tile(size: u32) -> RgbImage {
    let mut t = RgbImage::from_pixel(size, size, Rgb([90, 90, 90]));
    let s = i64::from(size) - 1;
    render::draw_line(&mut t, (0, 0), (s, s), Rgb([220, 40, 40]));
    render::draw_line(&mut t, (0, s), (s, 0), Rgb([220, 40, 40]));
    t
}

/// Overlay for one (model, method, image) at tile size, plus the explained
/// class and layer.
pub fn render_cell(
    model: &dyn DifferentiableModel,
    method: CamMethod,
    image: &RgbImage,
    class: Option<usize>,
    manifest: &GridManifest,
) -> Result<(RgbImage, usize, String)> {
    let hm = explain(model, image, method, class, None, &manifest.config)?;
    let ov = overlay(&hm.values, image, manifest.alpha, manifest.colormap)?;
    let tile = imaging::resize(&ov, manifest.tile_size, manifest.tile_size);
    Ok((tile, hm.class, hm.layer))
}

/// Rows are models; columns are methods, repeated per image. A failing cell
/// becomes a crossed grey tile and the rest of the grid still renders.
pub fn explain_grid(
    models: &[&dyn DifferentiableModel],
    methods: &[CamMethod],
    images: &[(String, RgbImage)],
    alpha: f64,
    colormap: Colormap,
    config: &CamConfig,
    tile_size: u32,
) -> Result<(RgbImage, GridManifest, Vec<RgbImage>)> {
    if models.is_empty() || methods.is_empty() || images.is_empty() {
        return Err(Error::invalid("explain_grid needs at least one model, method and image"));
    }
    let mut manifest = GridManifest {
        alpha,
        colormap,
        config: config.clone(),
        tile_size,
        rows: models.len(),
        cols: methods.len() * images.len(),
        cells: Vec::new(),
    };
    let mut tiles = Vec::new();
    for (row, model) in models.iter().enumerate() {
        for (ii, (image_id, image)) in images.iter().enumerate() {
            for (mi, &method) in methods.iter().enumerate() {
                let col = ii * methods.len() + mi;
                let mut cell = GridCell {
                    row,
                    col,
                    model: model.name(),
                    method,
                    image: image_id.clone(),
                    class: None,
                    layer: None,
                    tile_sha256: None,
                    error: None,
                };
                let tile = match render_cell(*model, method, image, None, &manifest) {
                    Ok((tile, class, layer)) => {
                        cell.class = Some(class);
                        cell.layer = Some(layer);
                        cell.tile_sha256 = Some(sha256_hex(&imaging::encode_png(&tile)?));
                        tile
                    }
                    Err(e) => {
                        log::warn!("explain cell ({row}, {col}) failed: {e}");
                        cell.error = Some(e.to_string());
                        error_tile(tile_size)
                    }
                };
                manifest.cells.push(cell);
                tiles.push(tile);
            }
        }
    }
    // Tiles were produced image-major within each row; order them by column.
    let mut ordered = vec![RgbImage::new(1, 1); tiles.len()];
    for (t, c) in tiles.into_iter().zip(&manifest.cells) {
        ordered[c.row * manifest.cols + c.col] = t;
    }
    manifest.cells.sort_by_key(|c| (c.row, c.col));
    let grid = render::tile_grid(&ordered, manifest.cols, 4);
    Ok((grid, manifest, ordered))
}
