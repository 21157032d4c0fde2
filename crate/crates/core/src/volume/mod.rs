//! Dense 3D scalar volumes with physical voxel size, intensity normalization,
//! isotropic resampling and the raw+sidecar file format.
//!
//! Data are stored C-order with `z` slowest. Voxel `(i, j, k)` has its center at
//! `((i + 0.5) * sz, (j + 0.5) * sy, (k + 0.5) * sx)` micrometers.

mod io;
pub mod tiling;

use rayon::prelude::*;

use crate::error::{Error, Result};

pub use io::{read_sidecar, VolumeHeader};
pub use tiling::{plan_tiling, reconstruct_coordinates, Patch, PatchGrid, TilingConfig, TilingStrategy, VoxelBox};

#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D<T = f32> {
    shape: [usize; 3],
    voxel_size: [f64; 3],
    data: Vec<T>,
}

fn check_grid(shape: [usize; 3], voxel_size: [f64; 3]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::InvalidConfig(format!("volume shape {shape:?} has an empty axis")));
    }
    if voxel_size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidConfig(format!("voxel size {voxel_size:?} must be positive")));
    }
    Ok(())
}

impl<T: Copy> Volume3D<T> {
    pub fn from_vec(shape: [usize; 3], voxel_size: [f64; 3], data: Vec<T>) -> Result<Self> {
        check_grid(shape, voxel_size)?;
        let n = shape[0] * shape[1] * shape[2];
        if data.len() != n {
            return Err(Error::Format(format!("volume data has {} values, shape {shape:?} needs {n}", data.len())));
        }
        Ok(Volume3D { shape, voxel_size, data })
    }

    pub fn filled(shape: [usize; 3], voxel_size: [f64; 3], value: T) -> Result<Self> {
        check_grid(shape, voxel_size)?;
        Ok(Volume3D { shape, voxel_size, data: vec![value; shape[0] * shape[1] * shape[2]] })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn unravel(&self, i: usize) -> [usize; 3] {
        let x = i % self.shape[2];
        let r = i / self.shape[2];
        [r / self.shape[1], r % self.shape[1], x]
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: T) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }

    pub fn voxel_center(&self, idx: [usize; 3]) -> [f64; 3] {
        voxel_center(idx.map(|i| i as i64), self.voxel_size)
    }

    /// Voxel containing a micrometer position, or `None` outside the volume.
    pub fn voxel_of(&self, pos: &[f64; 3]) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = (pos[a] / self.voxel_size[a]).floor();
            if !(f >= 0.0 && (f as usize) < self.shape[a]) {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }

    /// Volume of one voxel in cubic micrometers.
    pub fn voxel_volume(&self) -> f64 {
        self.voxel_size.iter().product()
    }

    pub fn extent_um(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.shape[a] as f64 * self.voxel_size[a])
    }

    pub fn same_grid<U>(&self, other: &Volume3D<U>) -> bool {
        self.shape == other.shape && self.voxel_size == other.voxel_size
    }

    pub fn map<U: Copy + Send, F: Fn(T) -> U + Sync>(&self, f: F) -> Volume3D<U>
    where
        T: Sync,
    {
        Volume3D { shape: self.shape, voxel_size: self.voxel_size, data: self.data.par_iter().map(|&v| f(v)).collect() }
    }

    /// Copies a box given in this volume's voxel coordinates; the box may
    /// extend past the borders, where `fill` is used.
    pub fn crop(&self, b: &VoxelBox, fill: T) -> Volume3D<T> {
        let [bz, by, bx] = b.size;
        let mut data = vec![fill; bz * by * bx];
        for z in 0..bz {
            let gz = b.lo[0] + z as i64;
            if gz < 0 || gz >= self.shape[0] as i64 {
                continue;
            }
            for y in 0..by {
                let gy = b.lo[1] + y as i64;
                if gy < 0 || gy >= self.shape[1] as i64 {
                    continue;
                }
                let row = (z * by + y) * bx;
                for x in 0..bx {
                    let gx = b.lo[2] + x as i64;
                    if gx < 0 || gx >= self.shape[2] as i64 {
                        continue;
                    }
                    data[row + x] = self.get(gz as usize, gy as usize, gx as usize);
                }
            }
        }
        Volume3D { shape: b.size, voxel_size: self.voxel_size, data }
    }
}

/// Center of a (possibly out-of-volume) voxel. The integer index is converted
/// before scaling so that sub-windows reproduce the global coordinates bit for bit.
#[inline]
pub fn voxel_center(idx: [i64; 3], voxel_size: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|a| (idx[a] as f64 + 0.5) * voxel_size[a])
}

impl<T: Copy + Into<f64>> Volume3D<T> {
    /// Trilinear interpolation at a micrometer position with edge clamping.
    pub fn sample_trilinear(&self, pos: &[f64; 3]) -> f64 {
        let mut i0 = [0usize; 3];
        let mut i1 = [0usize; 3];
        let mut w = [0f64; 3];
        for a in 0..3 {
            let n = self.shape[a];
            let f = (pos[a] / self.voxel_size[a] - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = (f.floor() as usize).min(n - 1);
            i0[a] = lo;
            i1[a] = (lo + 1).min(n - 1);
            w[a] = f - lo as f64;
        }
        let v = |z: usize, y: usize, x: usize| -> f64 { self.get(z, y, x).into() };
        let mut acc = 0.0;
        for (dz, wz) in [(i0[0], 1.0 - w[0]), (i1[0], w[0])] {
            if wz == 0.0 {
                continue;
            }
            for (dy, wy) in [(i0[1], 1.0 - w[1]), (i1[1], w[1])] {
                if wy == 0.0 {
                    continue;
                }
                for (dx, wx) in [(i0[2], 1.0 - w[2]), (i1[2], w[2])] {
                    if wx == 0.0 {
                        continue;
                    }
                    acc += wz * wy * wx * v(dz, dy, dx);
                }
            }
        }
        acc
    }
}

impl Volume3D<f32> {
    pub fn zeros(shape: [usize; 3], voxel_size: [f64; 3]) -> Result<Self> {
        Self::filled(shape, voxel_size, 0.0)
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

/// Mean and population standard deviation, accumulated in f64.
pub fn moments(data: &[f32]) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = data.par_iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data
        .par_iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

/// Subtracts the mean and divides by the standard deviation.
pub fn normalize_gaussian(v: &Volume3D) -> Result<Volume3D> {
    let (mean, sd) = moments(v.data());
    if !(sd > 0.0) {
        return Err(Error::ConstantVolume);
    }
    Ok(v.map(|x| ((x as f64 - mean) / sd) as f32))
}

/// Resamples onto an isotropic grid of `target` micrometers per voxel.
///
/// New shape per axis is `round(n * s / target)` (at least 1). Output voxel
/// centers are mapped to input coordinates in micrometers and interpolated
/// trilinearly, clamping at the edges.
pub fn resample_isotropic(v: &Volume3D, target: f64) -> Result<Volume3D> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::InvalidConfig(format!("target voxel size {target} must be > 0")));
    }
    let vs = v.voxel_size();
    let shape = v.shape();
    let new_shape = [0, 1, 2].map(|a| ((shape[a] as f64 * vs[a] / target).round() as usize).max(1));
    if new_shape == shape && vs == [target; 3] {
        return Ok(v.clone());
    }
    let plane = new_shape[1] * new_shape[2];
    let mut data = vec![0f32; new_shape[0] * plane];
    data.par_chunks_mut(plane).enumerate().for_each(|(z, slab)| {
        for y in 0..new_shape[1] {
            for x in 0..new_shape[2] {
                let pos = voxel_center([z as i64, y as i64, x as i64], [target; 3]);
                slab[y * new_shape[2] + x] = v.sample_trilinear(&pos) as f32;
            }
        }
    });
    Volume3D::from_vec(new_shape, [target; 3], data)
}
