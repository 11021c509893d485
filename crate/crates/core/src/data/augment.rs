use crate::rng::Rng;

/// Sampling ranges for random affine augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineConfig {
    pub max_rotation_deg: f64,
    /// Maximum shift as a fraction of the image side.
    pub max_translate: f64,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for AffineConfig {
    fn default() -> Self {
        AffineConfig {
            max_rotation_deg: 10.0,
            max_translate: 0.1,
            min_scale: 0.9,
            max_scale: 1.1,
        }
    }
}

/// One concrete transform: rotate and scale about the image center, then
/// shift by `(dy, dx)` pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub rotation_rad: f64,
    pub scale: f64,
    pub dy: f64,
    pub dx: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotation_rad: 0.0,
        scale: 1.0,
        dy: 0.0,
        dx: 0.0,
    };
}

/// Applies `params` to an `h x w x c` image by inverse mapping with
/// bilinear interpolation; samples outside the source read as zero.
pub fn affine_transform(image: &[f64], h: usize, w: usize, c: usize, params: AffineParams) -> Vec<f64> {
    assert_eq!(image.len(), h * w * c, "image length must be h*w*c");
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = params.rotation_rad.sin_cos();
    let pixel = |y: isize, x: isize, ch: usize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            image[(y as usize * w + x as usize) * c + ch]
        }
    };
    let mut out = vec![0.0; image.len()];
    for oy in 0..h {
        for ox in 0..w {
            // Undo the shift, then the scale, then the rotation.
            let ry = (oy as f64 - cy - params.dy) / params.scale;
            let rx = (ox as f64 - cx - params.dx) / params.scale;
            let sy = cos * ry - sin * rx + cy;
            let sx = sin * ry + cos * rx + cx;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            for ch in 0..c {
                let v = (1.0 - fy) * ((1.0 - fx) * pixel(y0, x0, ch) + fx * pixel(y0, x0 + 1, ch))
                    + fy * ((1.0 - fx) * pixel(y0 + 1, x0, ch) + fx * pixel(y0 + 1, x0 + 1, ch));
                out[(oy * w + ox) * c + ch] = v;
            }
        }
    }
    out
}

/// Draws transform parameters uniformly from `config` and applies them.
pub fn affine_augment(image: &[f64], h: usize, w: usize, c: usize, rng: &mut Rng, config: &AffineConfig) -> Vec<f64> {
    let rot = config.max_rotation_deg.to_radians();
    let params = AffineParams {
        rotation_rad: rng.uniform_range(-rot, rot),
        scale: rng.uniform_range(config.min_scale, config.max_scale),
        dy: rng.uniform_range(-config.max_translate, config.max_translate) * h as f64,
        dx: rng.uniform_range(-config.max_translate, config.max_translate) * w as f64,
    };
    affine_transform(image, h, w, c, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth_image(h: usize, w: usize) -> Vec<f64> {
        (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                0.5 + 0.5 * (y / 3.0).sin() * (x / 4.0).cos()
            })
            .collect()
    }

    #[test]
    fn identity_is_exact() {
        let img = smooth_image(9, 7);
        let out = affine_transform(&img, 9, 7, 1, AffineParams::IDENTITY);
        for (a, b) in img.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_moves_hot_pixel() {
        let (h, w) = (8, 8);
        let mut img = vec![0.0; h * w * 2];
        img[(3 * w + 2) * 2 + 1] = 1.0;
        let out = affine_transform(
            &img,
            h,
            w,
            2,
            AffineParams {
                dy: 2.0,
                ..AffineParams::IDENTITY
            },
        );
        let hot: Vec<usize> = (0..out.len()).filter(|&i| out[i].abs() > 1e-12).collect();
        assert_eq!(hot, vec![(5 * w + 2) * 2 + 1]);
        assert!((out[hot[0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_round_trip_away_from_borders() {
        let (h, w) = (32, 32);
        let img = smooth_image(h, w);
        let theta = 10f64.to_radians();
        let turn = |img: &[f64], r: f64| {
            affine_transform(
                img,
                h,
                w,
                1,
                AffineParams {
                    rotation_rad: r,
                    ..AffineParams::IDENTITY
                },
            )
        };
        let back = turn(&turn(&img, theta), -theta);
        let mut worst: f64 = 0.0;
        for y in 6..h - 6 {
            for x in 6..w - 6 {
                worst = worst.max((back[y * w + x] - img[y * w + x]).abs());
            }
        }
        assert!(worst < 0.05, "max diff {worst}");
    }

    #[test]
    fn augment_keeps_shape_and_is_seeded() {
        let img = smooth_image(10, 10);
        let cfg = AffineConfig::default();
        let a = affine_augment(&img, 10, 10, 1, &mut Rng::new(4), &cfg);
        let b = affine_augment(&img, 10, 10, 1, &mut Rng::new(4), &cfg);
        assert_eq!(a.len(), img.len());
        assert_eq!(a, b);
    }
}
