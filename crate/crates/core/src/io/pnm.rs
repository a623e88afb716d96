//! Binary PGM (P5) and PPM (P6) image grids.

use std::path::Path;

use super::IoError;
use crate::trainer::Image;

/// Black border around and between tiles, in pixels.
pub const GUTTER: usize = 2;

/// Maps model range `[−1, 1]` affinely onto `[0, 255]`, clamping outside it.
/// Non-finite values become 0.
pub fn to_byte(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Raster of the tiles laid out row-major on a `rows × cols` grid.
/// Returns `(bytes, width, height, channels)`.
pub fn grid_raster(samples: &[Image], rows: usize, cols: usize) -> Result<(Vec<u8>, usize, usize, usize), IoError> {
    if samples.len() > rows * cols {
        return Err(IoError::Format(format!(
            "{} samples do not fit a {rows}×{cols} grid",
            samples.len()
        )));
    }
    let first = samples
        .first()
        .ok_or_else(|| IoError::Format("no samples to draw".into()))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    if c != 1 && c != 3 {
        return Err(IoError::Format(format!(
            "{c}-channel images cannot be written as PGM/PPM"
        )));
    }
    if samples.iter().any(|s| (s.height, s.width, s.channels) != (h, w, c)) {
        return Err(IoError::Format("grid tiles differ in size".into()));
    }
    let width = cols * w + (cols + 1) * GUTTER;
    let height = rows * h + (rows + 1) * GUTTER;
    let mut raster = vec![0u8; width * height * c];
    for (i, s) in samples.iter().enumerate() {
        let (r0, c0) = (GUTTER + (i / cols) * (h + GUTTER), GUTTER + (i % cols) * (w + GUTTER));
        for y in 0..h {
            for x in 0..w {
                let dst = ((r0 + y) * width + c0 + x) * c;
                for (k, &v) in s.pixel(y, x).iter().enumerate() {
                    raster[dst + k] = to_byte(v);
                }
            }
        }
    }
    Ok((raster, width, height, c))
}

pub fn encode_pnm(raster: &[u8], width: usize, height: usize, channels: usize) -> Vec<u8> {
    let magic = if channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(raster);
    out
}

pub fn emit_image_grid(samples: &[Image], rows: usize, cols: usize, path: impl AsRef<Path>) -> Result<(), IoError> {
    let (raster, w, h, c) = grid_raster(samples, rows, cols)?;
    std::fs::write(path, encode_pnm(&raster, w, h, c))?;
    Ok(())
}

/// Decodes a binary PGM/PPM with maxval 255 into an image in `[−1, 1]`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image, IoError> {
    let bad = |m: &str| IoError::Format(format!("PGM/PPM: {m}"));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    pos += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(&format!("unsupported magic {other}"))),
    };
    let dims: Vec<usize> = fields[1..]
        .iter()
        .map(|f| f.parse().map_err(|_| bad("malformed header number")))
        .collect::<Result<_, _>>()?;
    if dims[2] != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let (w, h) = (dims[0], dims[1]);
    let n = w * h * channels;
    let raster = bytes.get(pos..pos + n).ok_or_else(|| bad("raster is truncated"))?;
    Image::new(h, w, channels, raster.iter().map(|&b| from_byte(b)).collect())
        .map_err(|e| IoError::Format(e.to_string()))
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Image, IoError> {
    decode_pnm(&std::fs::read(path)?)
}

/// Cuts a grid written by [`emit_image_grid`] back into `tile_h × tile_w` tiles.
pub fn split_grid(grid: &Image, tile_h: usize, tile_w: usize) -> Result<Vec<Image>, IoError> {
    let cols = grid.width.saturating_sub(GUTTER) / (tile_w + GUTTER);
    let rows = grid.height.saturating_sub(GUTTER) / (tile_h + GUTTER);
    if cols * (tile_w + GUTTER) + GUTTER != grid.width || rows * (tile_h + GUTTER) + GUTTER != grid.height {
        return Err(IoError::Format(format!(
            "a {}×{} grid does not hold {tile_h}×{tile_w} tiles",
            grid.height, grid.width
        )));
    }
    let c = grid.channels;
    let mut tiles = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for q in 0..cols {
            let (r0, c0) = (GUTTER + r * (tile_h + GUTTER), GUTTER + q * (tile_w + GUTTER));
            let mut data = Vec::with_capacity(tile_h * tile_w * c);
            for y in 0..tile_h {
                for x in 0..tile_w {
                    data.extend_from_slice(grid.pixel(r0 + y, c0 + x));
                }
            }
            tiles.push(Image::new(tile_h, tile_w, c, data).map_err(|e| IoError::Format(e.to_string()))?);
        }
    }
    Ok(tiles)
}
