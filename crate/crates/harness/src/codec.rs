//! Toy latent codec: `f × f` average pooling into `[−1, 1]` and bilinear
//! upsampling back to 8-bit RGB.

use midm_core::grid::{LatentGrid, RgbImage};
use midm_core::midm::LatentCodec;
use midm_core::{MidmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyCodec {
    pub factor: usize,
    pub channels: usize,
}

impl Default for ToyCodec {
    fn default() -> Self {
        Self { factor: 4, channels: 3 }
    }
}

impl ToyCodec {
    pub fn new(factor: usize) -> Self {
        Self { factor, ..Self::default() }
    }

    pub fn check_dims(&self, width: usize, height: usize) -> Result<()> {
        if self.factor == 0 || !width.is_multiple_of(self.factor) || !height.is_multiple_of(self.factor) {
            return Err(MidmError::InvalidArgument(format!(
                "image {width}x{height} is not divisible by codec factor {}",
                self.factor
            )));
        }
        Ok(())
    }

    pub fn latent_dims(&self, width: usize, height: usize) -> (usize, usize) {
        (height / self.factor, width / self.factor)
    }
}

fn to_unit(v: u8) -> f64 {
    v as f64 / 255.0 * 2.0 - 1.0
}

fn to_byte(v: f64) -> u8 {
    ((v + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8
}

impl LatentCodec for ToyCodec {
    fn encode(&self, img: &RgbImage) -> Result<LatentGrid> {
        self.check_dims(img.width(), img.height())?;
        let f = self.factor;
        let (h, w) = self.latent_dims(img.width(), img.height());
        let area = (f * f) as f64;
        LatentGrid::from_fn(self.channels, h, w, |c, y, x| {
            let mut s = 0.0;
            for py in y * f..(y + 1) * f {
                for px in x * f..(x + 1) * f {
                    s += to_unit(img.pixel(py, px)[c]);
                }
            }
            s / area
        })
    }

    fn decode(&self, z: &LatentGrid) -> Result<RgbImage> {
        if z.channels() != 3 {
            return Err(MidmError::InvalidArgument(format!("decode needs 3 channels, got {}", z.channels())));
        }
        let f = self.factor as f64;
        let (h, w) = z.spatial();
        let (ih, iw) = (h * self.factor, w * self.factor);
        let mut out = vec![0u8; ih * iw * 3];
        // Pixel centres map to latent coordinates (p + 0.5) / f − 0.5, clamped at the borders.
        let coord = |p: usize, n: usize| {
            let t = ((p as f64 + 0.5) / f - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = t.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            (lo, hi, t - lo as f64)
        };
        for py in 0..ih {
            let (y0, y1, ty) = coord(py, h);
            for px in 0..iw {
                let (x0, x1, tx) = coord(px, w);
                for c in 0..3 {
                    let top = z.get(c, y0, x0) * (1.0 - tx) + z.get(c, y0, x1) * tx;
                    let bottom = z.get(c, y1, x0) * (1.0 - tx) + z.get(c, y1, x1) * tx;
                    out[(py * iw + px) * 3 + c] = to_byte(top * (1.0 - ty) + bottom * ty);
                }
            }
        }
        RgbImage::new(iw, ih, out)
    }
}
