use rand::Rng;

use crate::image::Image;

const MIN_AREA: f64 = 0.6;
const MAX_AREA: f64 = 1.0;

/// One draw of the training augmentation: an optional horizontal flip and a
/// square crop covering `scale` of the image area, at offset `(x0, y0)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub scale: f64,
    pub x0: f64,
    pub y0: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        scale: 1.0,
        x0: 0.0,
        y0: 0.0,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Self {
        let flip = rng.random_bool(0.5);
        let scale = rng.random_range(MIN_AREA..=MAX_AREA);
        let side = scale.sqrt();
        let (ch, cw) = (side * height as f64, side * width as f64);
        let x0 = rng.random_range(0.0..=(width as f64 - cw).max(0.0));
        let y0 = rng.random_range(0.0..=(height as f64 - ch).max(0.0));
        Self {
            flip,
            scale,
            x0,
            y0,
        }
    }

    /// Crops, resizes back to the input size with bilinear interpolation, then
    /// flips if requested.
    pub fn apply(&self, image: &Image) -> Image {
        let (c, h, w) = image.dims();
        let side = self.scale.sqrt();
        let (ch, cw) = (side * h as f64, side * w as f64);
        let mut out = Image::filled(c, h, w, 0.0);
        for y in 0..h {
            let sy = self.y0 + (y as f64 + 0.5) * ch / h as f64 - 0.5;
            for x in 0..w {
                let sx = self.x0 + (x as f64 + 0.5) * cw / w as f64 - 0.5;
                let dst_x = if self.flip { w - 1 - x } else { x };
                for k in 0..c {
                    out.set(k, y, dst_x, bilinear(image, k, sy, sx));
                }
            }
        }
        out
    }
}

fn bilinear(image: &Image, c: usize, y: f64, x: f64) -> f32 {
    let (_, h, w) = image.dims();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    if fy == 0.0 && fx == 0.0 {
        return image.get(c, y0, x0);
    }
    let p = |yy, xx| image.get(c, yy, xx) as f64;
    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
    let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

/// Random resized crop (area fraction in `[0.6, 1.0]`) plus a horizontal flip
/// with probability 0.5.
pub fn augment<R: Rng + ?Sized>(image: &Image, rng: &mut R) -> Image {
    AugmentParams::sample(rng, image.height(), image.width()).apply(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(3, 16, 16, (0..768).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn identity_params_are_a_no_op() {
        let img = noise(1);
        assert_eq!(AugmentParams::IDENTITY.apply(&img), img);
    }

    #[test]
    fn double_flip_is_identity() {
        let img = noise(2);
        let flip = AugmentParams {
            flip: true,
            ..AugmentParams::IDENTITY
        };
        let once = flip.apply(&img);
        assert_ne!(once, img);
        assert_eq!(once.get(0, 3, 0), img.get(0, 3, 15));
        assert_eq!(flip.apply(&once), img);
    }

    #[test]
    fn dims_are_preserved_and_values_bounded() {
        let img = noise(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let p = AugmentParams::sample(&mut rng, 16, 16);
            assert!((0.6..=1.0).contains(&p.scale));
            let out = p.apply(&img);
            assert_eq!(out.dims(), img.dims());
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn crop_of_constant_image_is_constant() {
        let img = Image::filled(1, 8, 8, 0.25);
        let p = AugmentParams {
            flip: false,
            scale: 0.64,
            x0: 1.3,
            y0: 0.7,
        };
        assert!(p.apply(&img).data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }
}
