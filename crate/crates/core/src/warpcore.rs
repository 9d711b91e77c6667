//! Texture warping: every output pixel samples the texture map at the UV
//! coordinate the correspondence field assigns to it.
//!
//! Sampling is bilinear with border clamping. `(0,0)` addresses texel
//! `(0,0)` and `(1,1)` addresses texel `(M-1,M-1)`, `u` runs along columns
//! and `v` along rows.

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{CorrField, Planes, TextureMap};

/// Where a continuous UV coordinate lands on the texel grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint<T> {
    pub row: usize,
    pub col: usize,
    /// Fractional offsets inside the cell, both in `[0,1]`.
    pub fx: T,
    pub fy: T,
    /// `d(x)/du` and `d(y)/dv`; zero where clamping is active.
    pub dx_du: T,
    pub dy_dv: T,
}

impl<T: Float> Footprint<T> {
    /// Weights of the texels `(row,col)`, `(row,col+1)`, `(row+1,col)`,
    /// `(row+1,col+1)`.
    pub fn weights(&self) -> [T; 4] {
        let one = T::one();
        [
            (one - self.fx) * (one - self.fy),
            self.fx * (one - self.fy),
            (one - self.fx) * self.fy,
            self.fx * self.fy,
        ]
    }
}

fn axis<T: Float>(coord: T, size: usize) -> (usize, T, T) {
    if size == 1 {
        return (0, T::zero(), T::zero());
    }
    let scale = T::from(size - 1).unwrap();
    let inside = coord >= T::zero() && coord <= T::one();
    let x = coord.max(T::zero()).min(T::one()) * scale;
    let base = x.floor().to_usize().unwrap_or(0).min(size - 2);
    let frac = x - T::from(base).unwrap();
    let d = if inside { scale } else { T::zero() };
    (base, frac, d)
}

pub fn footprint<T: Float>(u: T, v: T, width: usize, height: usize) -> Footprint<T> {
    let (col, fx, dx_du) = axis(u, width);
    let (row, fy, dy_dv) = axis(v, height);
    Footprint {
        row,
        col,
        fx,
        fy,
        dx_du,
        dy_dv,
    }
}

#[inline]
fn neighbours<T: Float>(t: &TextureMap<T>, c: usize, fp: &Footprint<T>) -> [T; 4] {
    let r1 = (fp.row + 1).min(t.height() - 1);
    let c1 = (fp.col + 1).min(t.width() - 1);
    [
        t.get(c, fp.row, fp.col),
        t.get(c, fp.row, c1),
        t.get(c, r1, fp.col),
        t.get(c, r1, c1),
    ]
}

#[inline]
fn lerp_sample<T: Float>(q: [T; 4], fp: &Footprint<T>) -> T {
    let top = q[0] + fp.fx * (q[1] - q[0]);
    let bottom = q[2] + fp.fx * (q[3] - q[2]);
    top + fp.fy * (bottom - top)
}

fn check_texture<T: Float>(t: &TextureMap<T>) -> Result<()> {
    if t.channels() == 0 || t.height() == 0 || t.width() == 0 {
        return Err(Error::shape(format!("empty texture {:?}", t.shape())));
    }
    if !t.is_square() {
        return Err(Error::shape(format!("texture must be square, got {:?}", t.shape())));
    }
    Ok(())
}

/// Bilinear sample of every channel of `t` at `(u, v)`.
pub fn bilinear_sample<T: Float + Default>(t: &TextureMap<T>, u: T, v: T) -> Vec<T> {
    let fp = footprint(u, v, t.width(), t.height());
    (0..t.channels())
        .map(|c| lerp_sample(neighbours(t, c, &fp), &fp))
        .collect()
}

/// Renders the `C_t×N×N` image whose pixel `(i,j)` is `t` sampled at the
/// field's `(u_ij, v_ij)`.
pub fn warp_texture<T: Float + Default>(f: &CorrField<T>, t: &TextureMap<T>) -> Result<Planes<T>> {
    check_texture(t)?;
    let (h, w) = (f.height(), f.width());
    let mut out = Planes::zeros(t.channels(), h, w);
    for i in 0..h {
        for j in 0..w {
            let fp = footprint(f.u(i, j), f.v(i, j), t.width(), t.height());
            for c in 0..t.channels() {
                out.set(c, i, j, lerp_sample(neighbours(t, c, &fp), &fp));
            }
        }
    }
    Ok(out)
}

/// Gradients of `sum(grad_out * warp_texture(f, t))` with respect to the
/// field and the texture.
pub fn warp_backward<T: Float + Default>(
    f: &CorrField<T>,
    t: &TextureMap<T>,
    grad_out: &Planes<T>,
) -> Result<(CorrField<T>, TextureMap<T>)> {
    check_texture(t)?;
    let (h, w) = (f.height(), f.width());
    if grad_out.shape() != (t.channels(), h, w) {
        return Err(Error::shape(format!(
            "upstream gradient {:?}, expected {:?}",
            grad_out.shape(),
            (t.channels(), h, w)
        )));
    }
    let mut grad_f = CorrField::from_planes(Planes::zeros(2, h, w))?;
    let mut grad_t = Planes::zeros(t.channels(), t.height(), t.width());
    let r_max = t.height() - 1;
    let c_max = t.width() - 1;
    for i in 0..h {
        for j in 0..w {
            let fp = footprint(f.u(i, j), f.v(i, j), t.width(), t.height());
            let wts = fp.weights();
            let r1 = (fp.row + 1).min(r_max);
            let c1 = (fp.col + 1).min(c_max);
            let cells = [(fp.row, fp.col), (fp.row, c1), (r1, fp.col), (r1, c1)];
            let (mut gu, mut gv) = (T::zero(), T::zero());
            for c in 0..t.channels() {
                let g = grad_out.get(c, i, j);
                if g == T::zero() {
                    continue;
                }
                let q = neighbours(t, c, &fp);
                let d_fx = (T::one() - fp.fy) * (q[1] - q[0]) + fp.fy * (q[3] - q[2]);
                let top = q[0] + fp.fx * (q[1] - q[0]);
                let bottom = q[2] + fp.fx * (q[3] - q[2]);
                let d_fy = bottom - top;
                gu = gu + g * d_fx * fp.dx_du;
                gv = gv + g * d_fy * fp.dy_dv;
                for (&(r, cc), &wt) in cells.iter().zip(&wts) {
                    let k = grad_t.index(c, r, cc);
                    grad_t.data_mut()[k] = grad_t.data()[k] + g * wt;
                }
            }
            grad_f.set_uv(i, j, gu, gv);
        }
    }
    Ok((grad_f, grad_t))
}

/// Compares the analytic gradient of the sum of the warped image against
/// central finite differences on a deterministic subset of field and
/// texture entries. Returns the largest relative error seen.
///
/// Field entries whose `±eps` perturbation would cross a texel line are
/// skipped: the sampler is only piecewise smooth there.
pub fn warp_gradient_check(f: &CorrField<f64>, t: &TextureMap<f64>, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::precondition(format!("eps must be positive, got {eps}")));
    }
    check_texture(t)?;
    let m = t.width();
    let lo = 2.0 / (m as f64 - 1.0);
    let hi = 1.0 - lo;
    if f.planes().data().iter().any(|&x| !(lo..=hi).contains(&x)) {
        return Err(Error::precondition(format!(
            "field coordinates must lie in [{lo}, {hi}]"
        )));
    }
    let ones = Planes::filled(t.channels(), f.height(), f.width(), 1.0);
    let (grad_f, grad_t) = warp_backward(f, t, &ones)?;
    let probe = |f: &CorrField<f64>, t: &TextureMap<f64>| -> Result<f64> {
        Ok(warp_texture(f, t)?.data().iter().sum())
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = 0.0f64;
    let samples = 24;
    let field_len = f.planes().data().len();
    let scale = m as f64 - 1.0;
    let mut checked = 0;
    let mut attempts = 0;
    while checked < samples && attempts < samples * 50 {
        attempts += 1;
        let k = rng.gen_range(0..field_len);
        let x = f.planes().data()[k];
        if ((x - eps) * scale).floor() != ((x + eps) * scale).floor() {
            continue;
        }
        let mut plus = f.planes().clone();
        plus.data_mut()[k] = x + eps;
        let mut minus = f.planes().clone();
        minus.data_mut()[k] = x - eps;
        let fd = (probe(&CorrField::from_planes(plus)?, t)? - probe(&CorrField::from_planes(minus)?, t)?)
            / (2.0 * eps);
        worst = worst.max(rel(grad_f.planes().data()[k], fd));
        checked += 1;
    }
    let tex_len = t.data().len();
    for _ in 0..samples {
        let k = rng.gen_range(0..tex_len);
        let x = t.data()[k];
        let mut plus = t.clone();
        plus.data_mut()[k] = x + eps;
        let mut minus = t.clone();
        minus.data_mut()[k] = x - eps;
        let fd = (probe(f, &plus)? - probe(f, &minus)?) / (2.0 * eps);
        worst = worst.max(rel(grad_t.data()[k], fd));
    }
    Ok(worst)
}

/// Field mapping pixel `(i,j)` to `(j/(N-1), i/(N-1))`.
pub fn identity_field<T: Float + Default>(size: usize) -> CorrField<T> {
    let denom = T::from(size.saturating_sub(1).max(1)).unwrap();
    let mut u = Vec::with_capacity(size * size);
    let mut v = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            u.push(T::from(j).unwrap() / denom);
            v.push(T::from(i).unwrap() / denom);
        }
    }
    CorrField::new(size, size, u, v).expect("lengths match by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    fn random_texture(c: usize, m: usize, seed: u64) -> TextureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Planes::from_vec(c, m, m, (0..c * m * m).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn random_field(n: usize, lo: f64, hi: f64, seed: u64) -> CorrField<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = (0..n * n).map(|_| rng.gen_range(lo..hi)).collect();
        let v = (0..n * n).map(|_| rng.gen_range(lo..hi)).collect();
        CorrField::new(n, n, u, v).unwrap()
    }

    #[test]
    fn node_sample_is_texel() {
        let t = random_texture(3, 3, 1);
        let s = bilinear_sample(&t, 0.5, 1.0);
        for c in 0..3 {
            assert_eq!(s[c], t.get(c, 2, 1));
        }
        let s = bilinear_sample(&t, 0.0, 0.0);
        assert_eq!(s[1], t.get(1, 0, 0));
    }

    #[test]
    fn constant_texture_is_constant() {
        let t = Planes::filled(4, 7, 7, 0.37f64);
        for &(u, v) in &[(0.0, 0.0), (0.123, 0.987), (0.5, 0.5), (-3.0, 7.0), (0.999, 0.001)] {
            assert!(bilinear_sample(&t, u, v).iter().all(|&x| x == 0.37));
        }
    }

    #[test]
    fn hand_evaluated_two_by_two() {
        // rows [0,1] / [0,1]: the value equals the column coordinate
        let t = Planes::from_vec(2, 2, 2, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(bilinear_sample(&t, 0.5, 0.0), vec![0.5, 0.5]);
        assert_eq!(bilinear_sample(&t, 0.25, 0.7), vec![0.25, 0.25]);
    }

    #[test]
    fn identity_warp_reproduces_texture() {
        let t = random_texture(3, 16, 2);
        let out = warp_texture(&identity_field(16), &t).unwrap();
        let err = out.mean_abs_diff(&t).unwrap();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn sentinel_field_reads_origin_texel() {
        let t = random_texture(3, 8, 3);
        let n = 5;
        let f = CorrField::new(n, n, vec![-1.0; n * n], vec![-1.0; n * n]).unwrap();
        let out = warp_texture(&f, &t).unwrap();
        for c in 0..3 {
            assert!(out.plane(c).iter().all(|&x| x == t.get(c, 0, 0)));
        }
    }

    #[test]
    fn rejects_non_square_texture() {
        let t = Planes::<f64>::zeros(3, 4, 5);
        assert!(matches!(
            warp_texture(&identity_field(4), &t),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn gradient_check_passes_in_f64() {
        for seed in 0..4 {
            let t = random_texture(3, 16, seed);
            let f = random_field(12, 2.0 / 15.0, 1.0 - 2.0 / 15.0, seed + 100);
            let err = warp_gradient_check(&f, &t, 1e-4).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn gradient_check_rejects_bad_eps_and_boundary_fields() {
        let t = random_texture(3, 16, 0);
        let f = random_field(4, 0.2, 0.8, 0);
        assert!(warp_gradient_check(&f, &t, 0.0).is_err());
        assert!(warp_gradient_check(&f, &t, -1e-3).is_err());
        let edge = random_field(4, 0.0, 1.0, 0);
        assert!(warp_gradient_check(&edge, &t, 1e-4).is_err());
    }

    #[test]
    fn constant_texture_has_zero_field_gradient() {
        let t = Planes::filled(3, 8, 8, 0.6f64);
        let f = random_field(6, 0.0, 1.0, 9);
        let (gf, _) = warp_backward(&f, &t, &Planes::filled(3, 6, 6, 1.0)).unwrap();
        assert!(gf.planes().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn texture_gradient_counts_pixels() {
        let n = 9;
        let t = random_texture(3, 8, 4);
        let f = random_field(n, -0.2, 1.2, 5);
        let (_, gt) = warp_backward(&f, &t, &Planes::filled(3, n, n, 1.0)).unwrap();
        for c in 0..3 {
            let s: f64 = gt.plane(c).iter().sum();
            assert!((s - (n * n) as f64).abs() < 1e-8, "{s}");
        }
    }

    #[test]
    fn changing_a_texel_only_touches_its_support() {
        let t = random_texture(1, 8, 6);
        let f = random_field(10, 0.0, 1.0, 7);
        let before = warp_texture(&f, &t).unwrap();
        let mut t2 = t.clone();
        let (r, c) = (3, 4);
        t2.set(0, r, c, 5.0);
        let after = warp_texture(&f, &t2).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let (x, y) = (f.u(i, j) * 7.0, f.v(i, j) * 7.0);
                let near = (x - c as f64).abs() < 1.0 && (y - r as f64).abs() < 1.0;
                if !near {
                    assert_eq!(before.get(0, i, j), after.get(0, i, j));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn weights_partition_unity(u in -0.5f64..1.5, v in -0.5f64..1.5, m in 2usize..40) {
            let s: f64 = footprint(u, v, m, m).weights().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn warp_is_linear_in_texture(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..1000) {
            let t1 = random_texture(2, 6, seed);
            let t2 = random_texture(2, 6, seed + 1);
            let f = random_field(5, -0.1, 1.1, seed + 2);
            let mixed = Planes::from_vec(
                2, 6, 6,
                t1.data().iter().zip(t2.data()).map(|(x, y)| a * x + b * y).collect(),
            ).unwrap();
            let lhs = warp_texture(&f, &mixed).unwrap();
            let w1 = warp_texture(&f, &t1).unwrap();
            let w2 = warp_texture(&f, &t2).unwrap();
            for k in 0..lhs.data().len() {
                let rhs = a * w1.data()[k] + b * w2.data()[k];
                prop_assert!((lhs.data()[k] - rhs).abs() < 1e-6);
            }
        }
    }
}
