//! Regular voxel grids and scalar volumes defined on them.
//!
//! Voxels are stored with x varying fastest, then y, then z. The physical
//! position of voxel `(i, j, k)` is `origin + (i, j, k) * spacing` in mm.
//! A 2-D image is a grid with `dims[2] == 1`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Real;

pub type Point3<T> = [T; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    pub dims: [usize; 3],
    pub spacing: [T; 3],
    pub origin: [T; 3],
}

impl<T: Real> Grid<T> {
    pub fn new(dims: [usize; 3], spacing: [T; 3], origin: [T; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(invalid("dims", "every dimension must be at least 1"));
        }
        if spacing.iter().any(|&s| !(s > T::zero()) || !s.is_finite()) {
            return Err(invalid("spacing", "spacing must be finite and > 0"));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::NonFinite("grid origin"));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Isotropic grid centred on `center`.
    pub fn centered(dims: [usize; 3], spacing: T, center: [T; 3]) -> Result<Self> {
        let mut origin = [T::zero(); 3];
        for a in 0..3 {
            let extent = T::lit((dims[a].max(1) - 1) as f64) * spacing;
            origin[a] = center[a] - extent * T::half();
        }
        Self::new(dims, [spacing; 3], origin)
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, n: usize) -> [usize; 3] {
        let i = n % self.dims[0];
        let j = (n / self.dims[0]) % self.dims[1];
        let k = n / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    #[inline]
    pub fn position(&self, n: usize) -> Point3<T> {
        let c = self.coords(n);
        [
            self.origin[0] + T::lit(c[0] as f64) * self.spacing[0],
            self.origin[1] + T::lit(c[1] as f64) * self.spacing[1],
            self.origin[2] + T::lit(c[2] as f64) * self.spacing[2],
        ]
    }

    /// Physical positions of every voxel, in storage order.
    pub fn positions(&self) -> Vec<Point3<T>> {
        (0..self.len()).map(|n| self.position(n)).collect()
    }

    pub fn voxel_volume(&self) -> T {
        let active = |a: usize| {
            if self.dims[a] > 1 {
                self.spacing[a]
            } else {
                T::one()
            }
        };
        active(0) * active(1) * active(2)
    }

    pub fn same_as(&self, other: &Self) -> bool {
        self.dims == other.dims && self.spacing == other.spacing && self.origin == other.origin
    }

    pub fn cast<U: Real>(&self) -> Grid<U> {
        let c = |v: [T; 3]| [U::lit(v[0].as_f64()), U::lit(v[1].as_f64()), U::lit(v[2].as_f64())];
        Grid {
            dims: self.dims,
            spacing: c(self.spacing),
            origin: c(self.origin),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    pub grid: Grid<T>,
    pub data: Vec<T>,
}

impl<T: Real> Volume<T> {
    pub fn new(grid: Grid<T>, data: Vec<T>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "grid has {} voxels, data has {}",
                grid.len(),
                data.len()
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn filled(grid: Grid<T>, value: T) -> Self {
        let n = grid.len();
        Self {
            grid,
            data: vec![value; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.grid.linear_index(i, j, k)]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            grid: self.grid.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume {
            grid: self.grid.cast(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Binary segmentation on a grid; every value is exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask<T> {
    pub grid: Grid<T>,
    pub data: Vec<bool>,
}

impl<T: Real> BinaryMask<T> {
    pub fn new(grid: Grid<T>, data: Vec<bool>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "grid has {} voxels, mask has {}",
                grid.len(),
                data.len()
            )));
        }
        Ok(Self { grid, data })
    }

    /// Voxelwise `value >= threshold`.
    pub fn threshold(volume: &Volume<T>, threshold: T) -> Self {
        Self {
            grid: volume.grid.clone(),
            data: volume.data.iter().map(|&v| v >= threshold).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn to_volume(&self) -> Volume<T> {
        Volume {
            grid: self.grid.clone(),
            data: self
                .data
                .iter()
                .map(|&b| if b { T::one() } else { T::zero() })
                .collect(),
        }
    }

    /// Interprets a volume holding exactly 0/1 values as a mask.
    pub fn from_volume(volume: &Volume<T>) -> Result<Self> {
        let mut data = Vec::with_capacity(volume.len());
        for &v in &volume.data {
            if v == T::zero() {
                data.push(false);
            } else if v == T::one() {
                data.push(true);
            } else {
                return Err(invalid("mask", format!("value {v} is neither 0 nor 1")));
            }
        }
        Ok(Self {
            grid: volume.grid.clone(),
            data,
        })
    }

    /// Physical volume (area for 2-D grids) of the foreground.
    pub fn measure(&self) -> T {
        T::lit(self.count() as f64) * self.grid.voxel_volume()
    }
}
