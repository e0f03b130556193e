use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LatentGrid};

/// Maps pixel grids to latent grids and back.
pub trait LatentCodec {
    /// Spatial downscale factor between image and latent.
    fn factor(&self) -> usize;

    fn latent_channels(&self) -> usize;

    fn encode(&self, image: &ImageGrid) -> Result<LatentGrid>;

    /// Output pixels are clamped to [0, 1].
    fn decode(&self, latent: &LatentGrid) -> Result<ImageGrid>;
}

/// Linear toy codec: average pooling over `factor × factor` blocks on the
/// way in, nearest upsampling on the way out. Factor 1 is the identity.
#[derive(Debug, Clone)]
pub struct ToyCodec {
    factor: usize,
    channels: usize,
}

impl ToyCodec {
    pub fn new(factor: usize, channels: usize) -> Self {
        assert!(factor >= 1 && channels >= 1);
        Self { factor, channels }
    }

    pub fn identity() -> Self {
        Self::new(1, 3)
    }
}

impl LatentCodec for ToyCodec {
    fn factor(&self) -> usize {
        self.factor
    }

    fn latent_channels(&self) -> usize {
        self.channels
    }

    fn encode(&self, image: &ImageGrid) -> Result<LatentGrid> {
        let (h, w, c) = image.dims();
        let f = self.factor;
        if h % f != 0 || w % f != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{h}x{w} image is not divisible by codec factor {f}"
            )));
        }
        if c != self.channels {
            return Err(Error::DimensionMismatch(format!(
                "codec expects {} channels, image has {c}",
                self.channels
            )));
        }
        if f == 1 {
            return LatentGrid::from_array(image.array().clone());
        }
        let src = image.array();
        let norm = (f * f) as f64;
        Ok(LatentGrid::from_fn(h / f, w / f, c, |(y, x, k)| {
            let mut sum = 0.0;
            for dy in 0..f {
                for dx in 0..f {
                    sum += src[[y * f + dy, x * f + dx, k]];
                }
            }
            sum / norm
        }))
    }

    fn decode(&self, latent: &LatentGrid) -> Result<ImageGrid> {
        let (h, w, c) = latent.dims();
        if c != self.channels {
            return Err(Error::DimensionMismatch(format!(
                "codec expects {}-channel latents, got {c}",
                self.channels
            )));
        }
        let f = self.factor;
        let src = latent.array();
        Ok(ImageGrid::from_fn(h * f, w * f, c, |(y, x, k)| src[[y / f, x / f, k]]).clamped())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageGrid {
        ImageGrid::from_fn(h, w, 3, |(y, x, c)| ((y * w + x) * 3 + c) as f64 / (h * w * 3) as f64)
    }

    #[test]
    fn identity_codec_is_exact() {
        let codec = ToyCodec::identity();
        let img = ramp(64, 64);
        let z = codec.encode(&img).unwrap();
        assert_eq!(z.array(), img.array());
        assert_eq!(codec.decode(&z).unwrap(), img);
    }

    #[test]
    fn factor_eight_shapes() {
        let codec = ToyCodec::new(8, 3);
        let z = codec.encode(&ramp(64, 64)).unwrap();
        assert_eq!(z.dims(), (8, 8, 3));
        assert_eq!(codec.decode(&z).unwrap().dims(), (64, 64, 3));
        let zeros = codec.encode(&ImageGrid::zeros(64, 64, 3)).unwrap();
        assert!(zeros.array().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn factor_eight_round_trip_of_blockwise_constant_image() {
        let codec = ToyCodec::new(8, 3);
        let img = ImageGrid::from_fn(16, 24, 3, |(y, x, c)| ((y / 8) * 3 + x / 8 + c) as f64 / 10.0);
        let back = codec.decode(&codec.encode(&img).unwrap()).unwrap();
        assert!(back.max_abs_diff(&img) <= 1e-6);
    }

    #[test]
    fn indivisible_dims_rejected() {
        assert!(matches!(
            ToyCodec::new(8, 3).encode(&ramp(60, 64)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn decode_clamps() {
        let z = LatentGrid::from_fn(2, 2, 3, |(y, _, _)| if y == 0 { -3.0 } else { 7.0 });
        let img = ToyCodec::identity().decode(&z).unwrap();
        assert!(img.array().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
