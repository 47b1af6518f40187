//! Attention heatmaps on the patch grid: a text table and an 8-bit P5 graymap.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum HeatmapError {
    #[error("two patches share grid coordinate ({0}, {1})")]
    Collision(i32, i32),
    #[error("{coords} coordinates but {weights} attention weights")]
    Length { coords: usize, weights: usize },
    #[error("empty bag")]
    Empty,
    #[error("grid of {width}x{height} cells is too large")]
    TooLarge { width: u64, height: u64 },
}

const MAX_CELLS: u64 = 1 << 26;

/// Attention weights placed on a dense grid spanning the bag's coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// Smallest `(x, y)` over the bag, mapped to pixel (0, 0).
    pub origin: (i32, i32),
    pub width: usize,
    pub height: usize,
    /// Row-major; `None` where no patch exists.
    pub cells: Vec<Option<f64>>,
}

impl Heatmap {
    pub fn new(coords: &[(i32, i32)], weights: &[f64]) -> Result<Self, HeatmapError> {
        if coords.len() != weights.len() {
            return Err(HeatmapError::Length {
                coords: coords.len(),
                weights: weights.len(),
            });
        }
        if coords.is_empty() {
            return Err(HeatmapError::Empty);
        }
        let min_x = coords.iter().map(|c| c.0).min().unwrap_or(0);
        let min_y = coords.iter().map(|c| c.1).min().unwrap_or(0);
        let max_x = coords.iter().map(|c| c.0).max().unwrap_or(0);
        let max_y = coords.iter().map(|c| c.1).max().unwrap_or(0);
        let width = (i64::from(max_x) - i64::from(min_x) + 1) as u64;
        let height = (i64::from(max_y) - i64::from(min_y) + 1) as u64;
        if width.saturating_mul(height) > MAX_CELLS {
            return Err(HeatmapError::TooLarge { width, height });
        }
        let (width, height) = (width as usize, height as usize);
        let mut cells = vec![None; width * height];
        for (&(x, y), &w) in coords.iter().zip(weights) {
            let col = (i64::from(x) - i64::from(min_x)) as usize;
            let row = (i64::from(y) - i64::from(min_y)) as usize;
            let cell = &mut cells[row * width + col];
            if cell.is_some() {
                return Err(HeatmapError::Collision(x, y));
            }
            *cell = Some(w);
        }
        Ok(Self {
            origin: (min_x, min_y),
            width,
            height,
            cells,
        })
    }

    /// Binary PGM: `round(w * 255)` per patch, 0 for empty cells.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.cells.iter().map(|c| c.map_or(0, intensity)));
        out
    }
}

pub fn intensity(weight: f64) -> u8 {
    (weight.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `x\ty\tweight` lines sorted by descending weight (ties by coordinate).
pub fn attention_table(pairs: &[((i32, i32), f64)]) -> String {
    let mut rows = pairs.to_vec();
    rows.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out = String::from("x\ty\tweight\n");
    for ((x, y), w) in rows {
        out.push_str(&format!("{x}\t{y}\t{w:.6}\n"));
    }
    out
}

/// Parses a P5 graymap produced by [`Heatmap::to_pgm`] into `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return None;
    }
    let width: usize = fields[1].parse().ok()?;
    let height: usize = fields[2].parse().ok()?;
    let data = bytes.get(pos + 1..)?.to_vec();
    (data.len() == width * height).then_some((width, height, data))
}

/// Pixel lookup keyed by original coordinates, for consistency checks.
pub fn pixel_at(map: &Heatmap, pixels: &[u8]) -> HashMap<(i32, i32), u8> {
    let mut out = HashMap::new();
    for row in 0..map.height {
        for col in 0..map.width {
            if map.cells[row * map.width + col].is_some() {
                out.insert(
                    (map.origin.0 + col as i32, map.origin.1 + row as i32),
                    pixels[row * map.width + col],
                );
            }
        }
    }
    out
}
