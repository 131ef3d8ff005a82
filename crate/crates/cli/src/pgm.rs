//! Binary portable graymap (P5) output and pixmap (P6) input, plus the
//! channel tiling used by feature-map export.

use qnet::tensor::{Element, Tensor};
use qnet::{Error, Result};

/// Gray level of a channel whose values are all equal.
pub const CONSTANT_CHANNEL_GRAY: u8 = 128;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn to_p5(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn parse_p5(bytes: &[u8]) -> Result<Self> {
        let (magic, header, rest) = parse_header(bytes)?;
        if magic != "P5" {
            return Err(Error::Format { offset: 0, message: format!("expected P5, found {magic}") });
        }
        let [width, height, maxval] = header;
        if maxval != 255 {
            return Err(Error::Format { offset: 0, message: format!("maxval {maxval}, expected 255") });
        }
        if rest.len() != width * height {
            return Err(Error::Format {
                offset: bytes.len() - rest.len(),
                message: format!("{} pixel bytes for a {width}x{height} image", rest.len()),
            });
        }
        Ok(GrayImage { width, height, pixels: rest.to_vec() })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

/// Netpbm header: magic, then width, height and maxval separated by
/// whitespace and `#` comments, then exactly one whitespace byte.
fn parse_header(bytes: &[u8]) -> Result<(String, [usize; 3], &[u8])> {
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
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
            return Err(Error::Format { offset: pos, message: "truncated netpbm header".into() });
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if pos >= bytes.len() {
        return Err(Error::Format { offset: pos, message: "netpbm header without pixel data".into() });
    }
    let num = |i: usize| -> Result<usize> {
        tokens[i].parse().map_err(|_| Error::Format { offset: 0, message: format!("bad netpbm field `{}`", tokens[i]) })
    };
    Ok((tokens[0].clone(), [num(1)?, num(2)?, num(3)?], &bytes[pos + 1..]))
}

/// Reads a 32x32 binary pixmap (P6, maxval 255) into `[3, 32, 32]` values in [0, 1].
pub fn parse_p6(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (magic, [w, h, maxval], rest) = parse_header(bytes)?;
    if magic != "P6" || maxval != 255 {
        return Err(Error::Format {
            offset: 0,
            message: format!("expected P6 with maxval 255, found {magic} {maxval}"),
        });
    }
    if (w, h) != (32, 32) || rest.len() != 3 * w * h {
        return Err(Error::Format { offset: 0, message: format!("expected a 32x32 pixmap, found {w}x{h}") });
    }
    let mut data = vec![0f32; 3 * w * h];
    for (i, px) in rest.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}

/// Grid geometry for `channels` tiles: `ceil(sqrt(C))` columns.
pub fn grid_shape(channels: usize) -> (usize, usize) {
    let mut cols = 1;
    while cols * cols < channels {
        cols += 1;
    }
    (channels.div_ceil(cols), cols)
}

/// Tiles the channels of one `[C, H, W]` map in index order, each min-max
/// scaled to 0..=255 on its own, with 1-pixel black separators between
/// tiles. Cells past the last channel stay black.
pub fn tile_channels<T: Element>(map: &Tensor<T>) -> Result<GrayImage> {
    let &[c, h, w] = map.dims() else {
        return Err(Error::InvalidArgument(format!("feature map must be [C, H, W], got {}", map.shape())));
    };
    let (rows, cols) = grid_shape(c);
    let width = cols * w + cols.saturating_sub(1);
    let height = rows * h + rows.saturating_sub(1);
    let mut pixels = vec![0u8; width * height];
    for (ch, plane) in map.data().chunks_exact(h * w).enumerate() {
        let (lo, hi) = plane.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let v = v.as_f64();
            (lo.min(v), hi.max(v))
        });
        let (ty, tx) = (ch / cols, ch % cols);
        let (y0, x0) = (ty * (h + 1), tx * (w + 1));
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x].as_f64();
                let g = if hi > lo { (255.0 * (v - lo) / (hi - lo)).round() as u8 } else { CONSTANT_CHANNEL_GRAY };
                pixels[(y0 + y) * width + x0 + x] = g;
            }
        }
    }
    Ok(GrayImage { width, height, pixels })
}
