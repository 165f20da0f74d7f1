//! Dense 3D grids indexed `[x, y, z]` with `z` varying fastest.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

/// Binary segmentation volume.
pub type Mask = Grid3<bool>;

/// Per-voxel foreground probability.
pub type ProbMap = Grid3<f32>;

impl<T: Clone> Grid3<T> {
    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Grid3 {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::invalid(format!(
                "grid {:?} needs {} values, got {}",
                dims,
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Grid3 { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    data.push(f(x, y, z));
                }
            }
        }
        Grid3 { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let z = i % self.dims[2];
        let r = i / self.dims[2];
        [r / self.dims[1], r % self.dims[1], z]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> &T {
        &self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// Sub-block starting at `origin` with extent `size`.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if origin[a] + size[a] > self.dims[a] {
                return Err(Error::invalid(format!(
                    "crop {:?}+{:?} exceeds grid {:?}",
                    origin, size, self.dims
                )));
            }
        }
        Ok(Self::from_fn(size, |x, y, z| {
            self.get(origin[0] + x, origin[1] + y, origin[2] + z).clone()
        }))
    }

    /// Reverse the order along `axis`.
    pub fn flip(&mut self, axis: usize) {
        let d = self.dims;
        let src = self.data.clone();
        for x in 0..d[0] {
            for y in 0..d[1] {
                for z in 0..d[2] {
                    let mut c = [x, y, z];
                    c[axis] = d[axis] - 1 - c[axis];
                    let i = self.index(x, y, z);
                    self.data[i] = src[self.index(c[0], c[1], c[2])].clone();
                }
            }
        }
    }

    pub fn map<U: Clone>(&self, f: impl Fn(&T) -> U) -> Grid3<U> {
        Grid3 {
            dims: self.dims,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn same_dims<U>(&self, other: &Grid3<U>) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape("grid", &self.dims, &other.dims));
        }
        Ok(())
    }
}

impl Grid3<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and_count(&self, other: &Mask) -> usize {
        self.data.iter().zip(&other.data).filter(|(&a, &b)| a && b).count()
    }

    /// Arithmetic mean of the foreground coordinates, scaled by `spacing`.
    pub fn center_of_mass(&self, spacing: [f64; 3]) -> Option<[f64; 3]> {
        let mut acc = [0.0; 3];
        let mut n = 0usize;
        for (i, _) in self.data.iter().enumerate().filter(|(_, &b)| b) {
            let c = self.coords(i);
            for a in 0..3 {
                acc[a] += c[a] as f64 * spacing[a];
            }
            n += 1;
        }
        (n > 0).then(|| acc.map(|v| v / n as f64))
    }
}

impl Grid3<f32> {
    pub fn threshold(&self, t: f32) -> Mask {
        self.map(|&v| v > t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_and_coords_agree() {
        let g = Grid3::filled([2, 3, 4], 0u8);
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            assert_eq!(g.index(x, y, z), i);
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let g = Grid3::from_fn([3, 2, 4], |x, y, z| x * 100 + y * 10 + z);
        for axis in 0..3 {
            let mut h = g.clone();
            h.flip(axis);
            assert_ne!(h, g);
            h.flip(axis);
            assert_eq!(h, g);
        }
    }
}
