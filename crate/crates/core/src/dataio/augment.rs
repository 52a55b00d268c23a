//! Random similarity-transform augmentation of (image, label) slice pairs.

use rand::Rng;

/// One similarity transform about the image center. Applied as
/// p_out = scale * R(rotation) * (p_in - c) + c + (tx, ty).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    /// radians
    pub rotation: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        scale: 1.0,
        rotation: 0.0,
        tx: 0.0,
        ty: 0.0,
    };
}

/// Draw transform parameters: scale U(0.8, 1.2), rotation U(0, 2*pi),
/// translation U(-1/8, +1/8) of the extent per axis. Draw order is fixed
/// (scale, rotation, tx, ty) so a seeded stream reproduces exactly.
pub fn draw_params<R: Rng>(rng: &mut R, width: usize, height: usize) -> AugmentParams {
    let scale = rng.random_range(0.8..1.2);
    let rotation = rng.random_range(0.0..std::f64::consts::TAU);
    let tx = rng.random_range(-(width as f64) / 8.0..width as f64 / 8.0);
    let ty = rng.random_range(-(height as f64) / 8.0..height as f64 / 8.0);
    AugmentParams {
        scale,
        rotation,
        tx,
        ty,
    }
}

/// Apply one similarity transform; bilinear for intensities, nearest for
/// labels, zero/background outside the source domain.
pub fn augment_with(
    image: &[f32],
    labels: &[u8],
    width: usize,
    height: usize,
    p: &AugmentParams,
) -> (Vec<f32>, Vec<u8>) {
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let (sin, cos) = p.rotation.sin_cos();
    let mut out_img = vec![0.0f32; width * height];
    let mut out_lab = vec![0u8; width * height];
    for oy in 0..height {
        for ox in 0..width {
            // invert the forward map to find the source coordinate
            let dx = (ox as f64 - cx - p.tx) / p.scale;
            let dy = (oy as f64 - cy - p.ty) / p.scale;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;

            let o = oy * width + ox;
            // bilinear with zero outside
            if sx >= 0.0 && sy >= 0.0 && sx <= (width - 1) as f64 && sy <= (height - 1) as f64 {
                let x0 = sx.floor() as usize;
                let y0 = sy.floor() as usize;
                let x1 = (x0 + 1).min(width - 1);
                let y1 = (y0 + 1).min(height - 1);
                let fx = sx - x0 as f64;
                let fy = sy - y0 as f64;
                let v = image[y0 * width + x0] as f64 * (1.0 - fy) * (1.0 - fx)
                    + image[y0 * width + x1] as f64 * (1.0 - fy) * fx
                    + image[y1 * width + x0] as f64 * fy * (1.0 - fx)
                    + image[y1 * width + x1] as f64 * fy * fx;
                out_img[o] = v as f32;
                let nx = sx.round() as usize;
                let ny = sy.round() as usize;
                out_lab[o] = labels[ny * width + nx];
            }
        }
    }
    (out_img, out_lab)
}

/// Draw parameters from `rng` and apply them.
pub fn augment<R: Rng>(
    image: &[f32],
    labels: &[u8],
    width: usize,
    height: usize,
    rng: &mut R,
) -> (Vec<f32>, Vec<u8>) {
    let p = draw_params(rng, width, height);
    augment_with(image, labels, width, height, &p)
}
