//! Comparison image grids: one row per sample, columns
//! input | pass 1 | ... | pass n | reference, with caption strips rendered
//! from a small built-in 5x7 pixel font. Layout and encoding are
//! deterministic, so identical inputs produce identical files.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::data_pipeline::image_ops::{denormalize, ImageTensor};
use crate::error::{Error, Result};

const CAPTION_H: u32 = 11;
const MARGIN: u32 = 2;

/// One grid row: the degraded input, each pass's output, and optionally a
/// clean reference.
pub struct GridRow {
    pub original: ImageTensor,
    pub passes: Vec<ImageTensor>,
    pub reference: Option<ImageTensor>,
}

/// Render rows into a PNG at `out_path`. Every image must share one size and
/// every row one column structure.
pub fn render_comparison_grid(rows: &[GridRow], out_path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Invalid("grid needs at least one row".into()));
    }
    let dim = rows[0].original.dim();
    let n_passes = rows[0].passes.len();
    let has_reference = rows[0].reference.is_some();
    for (i, row) in rows.iter().enumerate() {
        if row.passes.len() != n_passes || row.reference.is_some() != has_reference {
            return Err(Error::Invalid(format!(
                "grid row {i} has a different column structure"
            )));
        }
        let mut all = vec![&row.original];
        all.extend(row.passes.iter());
        if let Some(r) = &row.reference {
            all.push(r);
        }
        if all.iter().any(|t| t.dim() != dim) {
            return Err(Error::Shape(format!("grid row {i} mixes image sizes")));
        }
    }

    let (_, h, w) = dim;
    let (h, w) = (h as u32, w as u32);
    let cols = 1 + n_passes + usize::from(has_reference);
    let total_w = MARGIN + cols as u32 * (w + MARGIN);
    let total_h = CAPTION_H + MARGIN + rows.len() as u32 * (h + MARGIN);
    let mut canvas = RgbImage::from_pixel(total_w, total_h, Rgb([16, 16, 16]));

    let mut captions = vec!["INPUT".to_string()];
    for k in 1..=n_passes {
        captions.push(format!("PASS {k}"));
    }
    if has_reference {
        captions.push("REFERENCE".into());
    }
    for (c, text) in captions.iter().enumerate() {
        let x0 = MARGIN + c as u32 * (w + MARGIN);
        draw_text(&mut canvas, text, x0 + 1, 2);
    }

    for (r, row) in rows.iter().enumerate() {
        let y0 = CAPTION_H + MARGIN + r as u32 * (h + MARGIN);
        let mut images = vec![&row.original];
        images.extend(row.passes.iter());
        if let Some(reference) = &row.reference {
            images.push(reference);
        }
        for (c, tensor) in images.into_iter().enumerate() {
            let x0 = MARGIN + c as u32 * (w + MARGIN);
            let rgb = denormalize(tensor);
            for (px, py, pixel) in rgb.enumerate_pixels() {
                canvas.put_pixel(x0 + px, y0 + py, *pixel);
            }
        }
    }

    canvas.save(out_path).map_err(|e| Error::Image {
        path: out_path.to_path_buf(),
        source: e,
    })
}

/// 5x7 glyphs for the caption alphabet; each byte is one row, low 5 bits.
fn glyph(ch: char) -> Option<[u8; 7]> {
    let g = match ch {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x06, 0x08, 0x10, 0x1F],
        '3' => [0x0E, 0x11, 0x01, 0x06, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x0E, 0x10, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x01, 0x0E],
        _ => return None,
    };
    Some(g)
}

fn draw_text(canvas: &mut RgbImage, text: &str, x: u32, y: u32) {
    let mut cursor = x;
    for ch in text.chars() {
        if let Some(rows) = glyph(ch) {
            for (dy, bits) in rows.iter().enumerate() {
                for dx in 0..5u32 {
                    if bits & (1 << (4 - dx)) != 0 {
                        let (px, py) = (cursor + dx, y + dy as u32);
                        if px < canvas.width() && py < canvas.height() {
                            canvas.put_pixel(px, py, Rgb([230, 230, 230]));
                        }
                    }
                }
            }
        }
        cursor += 6;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use tempfile::tempdir;

    fn img(v: f32) -> ImageTensor {
        Array3::from_elem((3, 16, 16), v)
    }

    #[test]
    fn grid_layout_matches_column_arithmetic() {
        let dir = tempdir().unwrap();
        let rows = vec![GridRow {
            original: img(-0.5),
            passes: vec![img(0.0), img(0.2), img(0.4)],
            reference: Some(img(0.9)),
        }];
        let path = dir.path().join("grid.png");
        render_comparison_grid(&rows, &path).unwrap();
        let out = image::open(&path).unwrap();
        // 5 columns of 16px plus margins.
        assert_eq!(out.width(), MARGIN + 5 * (16 + MARGIN));
        assert_eq!(out.height(), CAPTION_H + MARGIN + (16 + MARGIN));
    }

    #[test]
    fn degenerate_grid_holds_input_and_reference_only() {
        let dir = tempdir().unwrap();
        let rows = vec![GridRow {
            original: img(0.1),
            passes: vec![],
            reference: None,
        }];
        let path = dir.path().join("grid.png");
        render_comparison_grid(&rows, &path).unwrap();
        let out = image::open(&path).unwrap();
        assert_eq!(out.width(), MARGIN + (16 + MARGIN));
    }

    #[test]
    fn rendering_is_byte_deterministic() {
        let dir = tempdir().unwrap();
        let rows = || {
            vec![
                GridRow {
                    original: img(-0.2),
                    passes: vec![img(0.3)],
                    reference: Some(img(0.8)),
                },
                GridRow {
                    original: img(-0.4),
                    passes: vec![img(0.1)],
                    reference: Some(img(0.7)),
                },
            ]
        };
        let p1 = dir.path().join("a.png");
        let p2 = dir.path().join("b.png");
        render_comparison_grid(&rows(), &p1).unwrap();
        render_comparison_grid(&rows(), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let rows = vec![GridRow {
            original: img(0.0),
            passes: vec![Array3::from_elem((3, 8, 8), 0.0)],
            reference: None,
        }];
        assert!(render_comparison_grid(&rows, &dir.path().join("g.png")).is_err());
    }
}
