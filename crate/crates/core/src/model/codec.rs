//! Invertible space-to-depth latent codec standing in for a VAE.

use super::image::RgbImage;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Packs each `p×p` pixel block into channels: latent channel
/// `c·p² + dy·p + dx` at `(y, x)` holds image channel `c` at
/// `(y·p + dy, x·p + dx)`, scaled from `[0, 255]` to `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentCodec {
    pub patch: usize,
    pub image_size: usize,
}

impl Default for LatentCodec {
    fn default() -> Self {
        Self {
            patch: 2,
            image_size: 32,
        }
    }
}

impl LatentCodec {
    pub fn latent_shape(&self) -> [usize; 3] {
        let s = self.image_size / self.patch;
        [3 * self.patch * self.patch, s, s]
    }

    pub fn encode<T: Real>(&self, img: &RgbImage) -> Result<Tensor<T>> {
        if img.width != self.image_size || img.height != self.image_size {
            return Err(Error::dim(
                "codec.encode",
                &[img.height, img.width],
                &[self.image_size, self.image_size],
            ));
        }
        let p = self.patch;
        let [lc, s, _] = self.latent_shape();
        let mut data = vec![T::zero(); lc * s * s];
        for c in 0..3 {
            for dy in 0..p {
                for dx in 0..p {
                    let ch = c * p * p + dy * p + dx;
                    for y in 0..s {
                        for x in 0..s {
                            let px = img.get(x * p + dx, y * p + dy)[c];
                            data[(ch * s + y) * s + x] = T::of(px as f64 / 127.5 - 1.0);
                        }
                    }
                }
            }
        }
        Tensor::new(vec![lc, s, s], data)
    }

    /// Inverse of [`LatentCodec::encode`]; values are clamped to `[0, 255]`.
    pub fn decode<T: Real>(&self, z: &Tensor<T>) -> Result<RgbImage> {
        let want = self.latent_shape();
        if z.shape() != want {
            return Err(Error::dim("codec.decode", z.shape(), &want));
        }
        let p = self.patch;
        let s = want[1];
        let mut img = RgbImage::filled(self.image_size, self.image_size, [0; 3]);
        for c in 0..3 {
            for dy in 0..p {
                for dx in 0..p {
                    let ch = c * p * p + dy * p + dx;
                    for y in 0..s {
                        for x in 0..s {
                            let v = z.data()[(ch * s + y) * s + x].as_f64();
                            let px = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
                            let (ix, iy) = (x * p + dx, y * p + dy);
                            let mut rgb = img.get(ix, iy);
                            rgb[c] = px;
                            img.set(ix, iy, rgb);
                        }
                    }
                }
            }
        }
        Ok(img)
    }
}
