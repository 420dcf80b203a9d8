//! Grayscale images: silhouette frames, crops, and PGM export.

use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Row-major grayscale image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// Tight bounding box `(x, y, w, h)` of nonzero pixels, if any.
    pub fn nonzero_bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut x0, mut y0) = (usize::MAX, usize::MAX);
        let (mut x1, mut y1) = (0usize, 0usize);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) != 0.0 {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        any.then(|| (x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> GrayImage {
        let mut out = GrayImage::new(w, h);
        for dy in 0..h {
            for dx in 0..w {
                out.set(dx, dy, self.get(x + dx, y + dy));
            }
        }
        out
    }

    /// Scales to `size x size` with nearest-neighbor sampling, preserving
    /// aspect ratio; the short axis is centered on a zero background.
    pub fn resize_square(&self, size: usize) -> GrayImage {
        let mut out = GrayImage::new(size, size);
        if self.width == 0 || self.height == 0 {
            return out;
        }
        let scale = (size as f64 / self.width as f64).min(size as f64 / self.height as f64);
        let tw = ((self.width as f64 * scale).round() as usize).clamp(1, size);
        let th = ((self.height as f64 * scale).round() as usize).clamp(1, size);
        let off_x = (size - tw) / 2;
        let off_y = (size - th) / 2;
        for y in 0..th {
            let sy = ((y as f64 + 0.5) * self.height as f64 / th as f64) as usize;
            let sy = sy.min(self.height - 1);
            for x in 0..tw {
                let sx = ((x as f64 + 0.5) * self.width as f64 / tw as f64) as usize;
                let sx = sx.min(self.width - 1);
                out.set(off_x + x, off_y + y, self.get(sx, sy));
            }
        }
        out
    }

    /// Binary PGM (P5, maxval 255).
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<GrayImage> {
        let mut r = BufReader::new(File::open(path)?);
        let mut header = String::new();
        for _ in 0..3 {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::format("PGM header truncated"));
            }
            header.push_str(&line);
        }
        let mut fields = header.split_whitespace();
        if fields.next() != Some("P5") {
            return Err(Error::format("not a binary PGM (P5) file"));
        }
        let parse = |f: Option<&str>| -> Result<usize> {
            f.and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format("bad PGM header field"))
        };
        let width = parse(fields.next())?;
        let height = parse(fields.next())?;
        let maxval = parse(fields.next())?;
        if maxval != 255 {
            return Err(Error::format(format!("unsupported PGM maxval {maxval}")));
        }
        let mut bytes = vec![0u8; width * height];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::format("PGM pixel data truncated"))?;
        Ok(GrayImage {
            width,
            height,
            pixels: bytes.into_iter().map(|b| b as f64 / 255.0).collect(),
        })
    }
}
