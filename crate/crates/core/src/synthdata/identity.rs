use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Planes, TextureMap};

/// Band pattern direction in UV space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StripeAxis {
    /// Bands stacked along `v` (horizontal lines on the face).
    Rows,
    /// Bands in `|u - 0.5|`, mirrored about the facial midline.
    Columns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stripe {
    pub axis: StripeAxis,
    /// Cycles across the unit UV interval.
    pub frequency: f64,
    pub phase: f64,
    pub amplitude: [f64; 3],
}

/// Gaussian colour patch. Every blob is drawn together with its mirror
/// image about `u = 0.5`, which keeps textures bilaterally symmetric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 2],
    pub radius: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    pub base_color: [f64; 3],
    pub stripes: Vec<Stripe>,
    pub blobs: Vec<Blob>,
}

impl TextureParams {
    pub fn flat(base_color: [f64; 3]) -> Self {
        Self {
            base_color,
            stripes: Vec::new(),
            blobs: Vec::new(),
        }
    }

    /// Colour at a continuous UV coordinate, clamped to `[0,1]`.
    pub fn color_at(&self, u: f64, v: f64) -> [f64; 3] {
        let mut rgb = self.base_color;
        for s in &self.stripes {
            let coord = match s.axis {
                StripeAxis::Rows => v,
                StripeAxis::Columns => 2.0 * (u - 0.5).abs(),
            };
            let wave = (std::f64::consts::TAU * s.frequency * coord + s.phase).sin();
            for (c, a) in rgb.iter_mut().zip(s.amplitude) {
                *c += a * wave;
            }
        }
        for b in &self.blobs {
            let two_r2 = 2.0 * b.radius * b.radius;
            let dv = v - b.center[1];
            let d_left = (u - b.center[0]).powi(2) + dv * dv;
            let d_right = (u - (1.0 - b.center[0])).powi(2) + dv * dv;
            let w = ((-d_left / two_r2).exp() + (-d_right / two_r2).exp()).min(1.0);
            for (c, target) in rgb.iter_mut().zip(b.color) {
                *c += w * (target - *c);
            }
        }
        rgb.map(|c| c.clamp(0.0, 1.0))
    }
}

/// Stand-in for a morphable-model identity: an ellipsoid head plus a
/// procedural UV texture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub id: u32,
    /// Half-width, half-height and half-depth of the head, relative to the
    /// half-frame. Depth never exceeds width, so the silhouette shrinks as
    /// the head turns.
    pub shape_params: [f64; 3],
    pub texture_seed: u64,
    pub texture_params: TextureParams,
}

pub fn make_identity(seed: i64) -> Result<IdentitySpec> {
    if seed < 0 {
        return Err(Error::precondition(format!("identity seed must be >= 0, got {seed}")));
    }
    let texture_seed = seed as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(texture_seed);

    let width = rng.gen_range(0.75..0.95);
    let height = rng.gen_range(0.75..0.95);
    let depth = 0.6 + (width - 0.7) * rng.gen_range(0.0..1.0);

    let r = rng.gen_range(0.45..0.85);
    let g = r * rng.gen_range(0.6..0.85);
    let b = g * rng.gen_range(0.6..0.9);

    let stripes = (0..rng.gen_range(1..=2))
        .map(|_| {
            let axis = if rng.gen_bool(0.5) {
                StripeAxis::Rows
            } else {
                StripeAxis::Columns
            };
            let amp = rng.gen_range(0.04..0.15);
            let tint: [f64; 3] = [rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0)];
            Stripe {
                axis,
                frequency: rng.gen_range(1.0..4.0),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                amplitude: tint.map(|t| t * amp),
            }
        })
        .collect();

    let blobs = (0..rng.gen_range(3..=5))
        .map(|_| Blob {
            center: [rng.gen_range(0.3..0.5), rng.gen_range(0.2..0.8)],
            radius: rng.gen_range(0.04..0.1),
            color: [rng.gen(), rng.gen(), rng.gen()],
        })
        .collect();

    Ok(IdentitySpec {
        id: 0,
        shape_params: [width, height, depth],
        texture_seed,
        texture_params: TextureParams {
            base_color: [r, g, b],
            stripes,
            blobs,
        },
    })
}

/// Ground-truth `3×M×M` texture: the procedural colour evaluated at every
/// texel's UV coordinate.
pub fn render_ground_truth_texture(spec: &IdentitySpec, texture_size: usize) -> Result<TextureMap> {
    if texture_size < 16 {
        return Err(Error::precondition(format!(
            "texture size must be >= 16, got {texture_size}"
        )));
    }
    let m = texture_size;
    let denom = (m - 1) as f64;
    let mut t = Planes::zeros(3, m, m);
    for i in 0..m {
        for j in 0..m {
            let rgb = spec.texture_params.color_at(j as f64 / denom, i as f64 / denom);
            for (c, &val) in rgb.iter().enumerate() {
                t.set(c, i, j, val as f32);
            }
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        assert_eq!(make_identity(0).unwrap(), make_identity(0).unwrap());
        let a = serde_json::to_vec(&make_identity(7).unwrap()).unwrap();
        let b = serde_json::to_vec(&make_identity(7).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn negative_seed_rejected() {
        assert!(matches!(make_identity(-1), Err(Error::Precondition(_))));
    }

    #[test]
    fn shape_params_in_range() {
        for seed in 0..200 {
            let s = make_identity(seed).unwrap().shape_params;
            assert!(s.iter().all(|&x| (0.6..=1.0).contains(&x)), "{s:?}");
            assert!(s[2] < s[0]);
        }
    }

    #[test]
    fn different_seeds_give_different_textures() {
        let a = render_ground_truth_texture(&make_identity(0).unwrap(), 64).unwrap();
        let b = render_ground_truth_texture(&make_identity(1).unwrap(), 64).unwrap();
        let d = a.mean_abs_diff(&b).unwrap();
        assert!(d > 0.01, "{d}");
    }

    #[test]
    fn flat_params_give_constant_texture() {
        let mut spec = make_identity(3).unwrap();
        spec.texture_params = TextureParams::flat([0.25, 0.5, 0.75]);
        let t = render_ground_truth_texture(&spec, 16).unwrap();
        for (c, want) in [0.25f32, 0.5, 0.75].iter().enumerate() {
            assert!(t.plane(c).iter().all(|x| x == want));
        }
    }

    #[test]
    fn texture_is_stable_and_bounded() {
        let spec = make_identity(0).unwrap();
        let a = render_ground_truth_texture(&spec, 64).unwrap();
        let b = render_ground_truth_texture(&spec, 64).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn texture_is_mirror_symmetric() {
        let t = render_ground_truth_texture(&make_identity(5).unwrap(), 33).unwrap();
        for c in 0..3 {
            for i in 0..33 {
                for j in 0..33 {
                    assert!((t.get(c, i, j) - t.get(c, i, 32 - j)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn resolution_consistency_against_average_pool() {
        let spec = make_identity(0).unwrap();
        let fine = render_ground_truth_texture(&spec, 128).unwrap();
        let coarse = render_ground_truth_texture(&spec, 64).unwrap();
        let mut pooled = Planes::zeros(3, 64, 64);
        for c in 0..3 {
            for i in 0..64 {
                for j in 0..64 {
                    let s = fine.get(c, 2 * i, 2 * j)
                        + fine.get(c, 2 * i + 1, 2 * j)
                        + fine.get(c, 2 * i, 2 * j + 1)
                        + fine.get(c, 2 * i + 1, 2 * j + 1);
                    pooled.set(c, i, j, s / 4.0);
                }
            }
        }
        let d = pooled.mean_abs_diff(&coarse).unwrap();
        assert!(d < 0.05, "{d}");
    }
}
