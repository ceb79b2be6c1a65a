use super::AugmentConfig;
use crate::lifting::bilinear_taps;
use crate::tensor::Tensor;
use rand::Rng;

/// Similarity transform about the image center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub rotation_deg: f64,
    /// `(dx, dy)` in pixels.
    pub translation: [f64; 2],
    pub scale: f64,
}

impl AffineParams {
    pub const IDENTITY: Self = Self {
        rotation_deg: 0.0,
        translation: [0.0, 0.0],
        scale: 1.0,
    };

    pub fn sample<R: Rng>(rng: &mut R, cfg: &AugmentConfig, size: (usize, usize)) -> Self {
        let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..m) } else { 0.0 };
        let rotation_deg = sym(cfg.max_rotation_deg);
        let dx = sym(cfg.max_translation) * size.1 as f64;
        let dy = sym(cfg.max_translation) * size.0 as f64;
        let [lo, hi] = cfg.scale_range;
        let scale = if hi > lo { rng.random_range(lo..hi) } else { lo };
        Self {
            rotation_deg,
            translation: [dx, dy],
            scale,
        }
    }
}

/// Warp every channel of `image` (`[C, H, W]`) by `params`, bilinear with
/// zero fill outside the source.
pub fn apply_affine(image: &Tensor, params: &AffineParams) -> Tensor {
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = params.rotation_deg.to_radians().sin_cos();
    let inv_s = 1.0 / params.scale;
    let mut out = Tensor::zeros([c, h, w]);
    for row in 0..h {
        for col in 0..w {
            let x = col as f64 - cx - params.translation[0];
            let y = row as f64 - cy - params.translation[1];
            let sx = inv_s * (cos * x + sin * y) + cx;
            let sy = inv_s * (-sin * x + cos * y) + cy;
            let taps = bilinear_taps(sx, sy, h, w);
            for ch in 0..c {
                let plane = image.slab(ch);
                out.data_mut()[(ch * h + row) * w + col] = taps.iter().map(|&(i, wt)| wt * plane[i]).sum();
            }
        }
    }
    out
}

pub fn affine_augment<R: Rng>(image: &Tensor, rng: &mut R, cfg: &AugmentConfig) -> Tensor {
    let params = AffineParams::sample(rng, cfg, (image.dim(1), image.dim(2)));
    apply_affine(image, &params)
}
