//! Plain CPU containers for images, texture maps and correspondence fields.
//!
//! These are the exchange types between the data generator, the warping
//! operator and the learned models. All are channel-major (`C×H×W`,
//! row-major inside a channel).

use candle_core::{DType, Device, Tensor};
use num_traits::Float;

use crate::error::{Error, Result};

/// Value stored outside the facial mask in a correspondence field.
pub const SENTINEL: f32 = -1.0;

/// A `C×H×W` stack of planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// RGB image with values in `[0,1]`.
pub type ImageTensor = Planes<f32>;

/// UV-space texture. Three channels for ground truth, more for learned maps.
pub type TextureMap<T = f32> = Planes<T>;

impl<T: Copy + Default> Planes<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, T::default())
    }
}

impl<T: Copy> Planes<T> {
    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{} values cannot fill {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.height + i) * self.width + j
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> T {
        self.data[self.index(c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, value: T) {
        let k = self.index(c, i, j);
        self.data[k] = value;
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Planes<U> {
        Planes {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

impl Planes<f32> {
    pub fn to_f64(&self) -> Planes<f64> {
        self.map(f64::from)
    }

    /// `1×C×H×W` tensor of the requested dtype.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, self.channels, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Reads item `index` of a `B×C×H×W` tensor.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        let data = t.get(index)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::from_vec(c, h, w, data)
    }

    /// Stacks same-shaped planes into a `B×C×H×W` tensor.
    pub fn stack(items: &[&Self], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::precondition("cannot stack an empty list"))?;
        let shape = first.shape();
        let mut data = Vec::with_capacity(items.len() * first.data.len());
        for p in items {
            if p.shape() != shape {
                return Err(Error::shape(format!("{:?} vs {:?}", p.shape(), shape)));
            }
            data.extend_from_slice(&p.data);
        }
        let t = Tensor::from_vec(data, (items.len(), shape.0, shape.1, shape.2), device)?;
        Ok(t.to_dtype(dtype)?)
    }
}

impl<T: Float> Planes<T> {
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn mean_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        let n = T::from(self.data.len()).unwrap();
        let s = self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b).abs());
        Ok(s / n)
    }
}

/// Dense 2D↔UV binding: `u` and `v` planes of normalized texture coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrField<T = f32>(Planes<T>);

impl<T: Copy> CorrField<T> {
    pub fn new(height: usize, width: usize, u: Vec<T>, v: Vec<T>) -> Result<Self> {
        if u.len() != height * width || v.len() != height * width {
            return Err(Error::shape(format!(
                "u/v lengths {}/{} for a {height}x{width} field",
                u.len(),
                v.len()
            )));
        }
        let mut data = u;
        data.extend(v);
        Ok(Self(Planes::from_vec(2, height, width, data)?))
    }

    pub fn from_planes(p: Planes<T>) -> Result<Self> {
        if p.channels() != 2 {
            return Err(Error::shape(format!("field needs 2 channels, got {}", p.channels())));
        }
        Ok(Self(p))
    }

    pub fn planes(&self) -> &Planes<T> {
        &self.0
    }

    pub fn into_planes(self) -> Planes<T> {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    #[inline]
    pub fn u(&self, i: usize, j: usize) -> T {
        self.0.get(0, i, j)
    }

    #[inline]
    pub fn v(&self, i: usize, j: usize) -> T {
        self.0.get(1, i, j)
    }

    pub fn set_uv(&mut self, i: usize, j: usize, u: T, v: T) {
        self.0.set(0, i, j, u);
        self.0.set(1, i, j, v);
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> CorrField<U> {
        CorrField(self.0.map(f))
    }
}

impl CorrField<f32> {
    pub fn to_f64(&self) -> CorrField<f64> {
        self.map(f64::from)
    }
}

/// Boolean facial region (the coordinate set the warp is defined on).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!("{} mask values for {height}x{width}", data.len())));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.width + j]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// True when every set pixel is reachable from every other through
    /// 4-neighbour steps.
    pub fn is_four_connected(&self) -> bool {
        let Some(start) = self.data.iter().position(|&b| b) else {
            return false;
        };
        let mut seen = vec![false; self.data.len()];
        let mut stack = vec![start];
        seen[start] = true;
        let mut count = 0;
        while let Some(k) = stack.pop() {
            count += 1;
            let (i, j) = (k / self.width, k % self.width);
            let mut visit = |ni: usize, nj: usize| {
                let nk = ni * self.width + nj;
                if self.data[nk] && !seen[nk] {
                    seen[nk] = true;
                    stack.push(nk);
                }
            };
            if i > 0 {
                visit(i - 1, j);
            }
            if i + 1 < self.height {
                visit(i + 1, j);
            }
            if j > 0 {
                visit(i, j - 1);
            }
            if j + 1 < self.width {
                visit(i, j + 1);
            }
        }
        count == self.area()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planes_reject_wrong_length() {
        assert!(Planes::<f32>::from_vec(3, 4, 4, vec![0.0; 47]).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let p = Planes::from_vec(2, 2, 3, (0..12).map(|x| x as f32).collect()).unwrap();
        let t = Planes::stack(&[&p, &p], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 2, 2, 3]);
        assert_eq!(Planes::from_tensor(&t, 1).unwrap(), p);
    }

    #[test]
    fn connectivity() {
        let m = Mask::new(3, 3, vec![true, false, true, false, false, false, false, false, false])
            .unwrap();
        assert!(!m.is_four_connected());
        let m = Mask::new(2, 2, vec![true, true, false, true]).unwrap();
        assert!(m.is_four_connected());
        let empty = Mask::new(2, 2, vec![false; 4]).unwrap();
        assert!(!empty.is_four_connected());
    }
}
