//! In-memory RGB image as a (3, H, W) f64 array in [0, 1].

use std::path::Path;

use ndarray::Array3;

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub data: Array3<f64>,
}

impl Image {
    pub fn new(data: Array3<f64>) -> Self {
        assert_eq!(data.shape()[0], 3, "images are RGB (3,H,W)");
        Self { data }
    }

    pub fn zeros(size: (usize, usize)) -> Self {
        Self {
            data: Array3::zeros((3, size.0, size.1)),
        }
    }

    /// (H, W)
    pub fn size(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }

    pub fn open(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = Array3::zeros((3, h, w));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
            }
        }
        Ok(Self { data })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.size();
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    (self.data[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (self.data[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (self.data[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                ];
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        buf.save(path)?;
        Ok(())
    }

    /// Bilinear resize; returns a clone when the size already matches.
    pub fn resized(&self, size: (usize, usize)) -> Image {
        let (h, w) = self.size();
        let (nh, nw) = size;
        if (h, w) == (nh, nw) {
            return self.clone();
        }
        let mut out = Array3::zeros((3, nh, nw));
        let sy = h as f64 / nh as f64;
        let sx = w as f64 / nw as f64;
        for y in 0..nh {
            // align sample points with pixel centers
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for x in 0..nw {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                for c in 0..3 {
                    let v00 = self.data[[c, y0, x0]];
                    let v01 = self.data[[c, y0, x1]];
                    let v10 = self.data[[c, y1, x0]];
                    let v11 = self.data[[c, y1, x1]];
                    out[[c, y, x]] = v00 * (1.0 - wy) * (1.0 - wx)
                        + v01 * (1.0 - wy) * wx
                        + v10 * wy * (1.0 - wx)
                        + v11 * wy * wx;
                }
            }
        }
        Image { data: out }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_roundtrip_size() {
        let img = Image::zeros((8, 4));
        assert_eq!(img.resized((8, 4)), img);
        assert_eq!(img.resized((16, 8)).size(), (16, 8));
    }
}
