use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{CorrField, ImageTensor, Mask, Planes, TextureMap, SENTINEL};
use crate::warpcore::bilinear_sample;

use super::identity::IdentitySpec;

/// One orthographic render of an identity.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: ImageTensor,
    /// UV coordinate of the visible surface point behind every pixel of
    /// this view; [`SENTINEL`] on background pixels.
    pub corr_field: CorrField,
    pub facial_mask: Mask,
}

/// Flat background level for a sample, in `[0.2, 0.8]`.
pub fn background_gray(spec: &IdentitySpec, yaw_deg: f64) -> f32 {
    let mut h = spec.texture_seed ^ (yaw_deg.to_bits().rotate_left(17));
    h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
    (0.2 + 0.6 * unit) as f32
}

/// Pixel centre in frame coordinates `[-1, 1]`, exactly antisymmetric
/// about the image midline.
fn frame_coord(k: usize, n: usize) -> f64 {
    (2.0 * k as f64 - (n - 1) as f64) / (n - 1) as f64
}

/// Renders the ellipsoid head turned by `yaw_deg` about the vertical axis.
///
/// The camera looks down the `-z` axis; for every pixel inside the
/// silhouette the front-most intersection is kept (the larger root of the
/// ray/ellipsoid quadratic), which is the z-buffer result for a convex
/// surface. Its azimuth/height give the cylindrical UV coordinate and the
/// pixel colour is the texture sampled there.
pub fn render_view(
    spec: &IdentitySpec,
    texture: &TextureMap,
    yaw_deg: f64,
    image_size: usize,
    background: f32,
) -> Result<View> {
    if !(-90.0..=90.0).contains(&yaw_deg) {
        return Err(Error::precondition(format!("yaw {yaw_deg} outside [-90, 90]")));
    }
    if image_size < 2 {
        return Err(Error::precondition("image size must be >= 2"));
    }
    if texture.channels() != 3 {
        return Err(Error::shape(format!(
            "ground-truth texture needs 3 channels, got {}",
            texture.channels()
        )));
    }
    let n = image_size;
    let [a, b, c] = spec.shape_params;
    let psi = yaw_deg.to_radians();
    let (sin, cos) = psi.sin_cos();
    let half_width = (a * a * cos * cos + c * c * sin * sin).sqrt();

    let quad_a = sin * sin / (a * a) + cos * cos / (c * c);
    let tex64 = texture.to_f64();

    let mut image = Planes::filled(3, n, n, background);
    let mut field = CorrField::new(n, n, vec![SENTINEL; n * n], vec![SENTINEL; n * n])?;
    let mut mask = vec![false; n * n];

    for i in 0..n {
        let y = frame_coord(i, n);
        for j in 0..n {
            let x = frame_coord(j, n);
            if (x / half_width).powi(2) + (y / b).powi(2) >= 1.0 {
                continue;
            }
            let quad_b = 2.0 * x * sin * cos * (1.0 / (c * c) - 1.0 / (a * a));
            let quad_c = x * x * (cos * cos / (a * a) + sin * sin / (c * c)) + y * y / (b * b) - 1.0;
            let disc = (quad_b * quad_b - 4.0 * quad_a * quad_c).max(0.0);
            let z = (-quad_b + disc.sqrt()) / (2.0 * quad_a);

            let xh = x * cos - z * sin;
            let zh = x * sin + z * cos;
            let theta = (xh / a).atan2(zh / c);
            let u = ((theta + PI) / (2.0 * PI)).clamp(0.0, 1.0) as f32;
            let v = ((y / b + 1.0) / 2.0).clamp(0.0, 1.0) as f32;

            field.set_uv(i, j, u, v);
            mask[i * n + j] = true;
            let rgb = bilinear_sample(&tex64, u as f64, v as f64);
            for (ch, val) in rgb.into_iter().enumerate() {
                image.set(ch, i, j, val as f32);
            }
        }
    }

    Ok(View {
        image,
        corr_field: field,
        facial_mask: Mask::new(n, n, mask)?,
    })
}
