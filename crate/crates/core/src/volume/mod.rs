//! Voxel containers, the VVOL container format and intensity-domain augmentation.

mod augment;
mod vvol;

pub use augment::{add_noise, apply_window, savgol_center_weights, sg_smooth_z, IntensityWindow};
pub use vvol::{decode_vvol, encode_vvol, load_vvol, save_vvol, VolumeData, VVOL_HEADER_LEN};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Voxel counts along x, y and z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub const fn cube(n: usize) -> Self {
        Self::new(n, n, n)
    }

    /// Total voxel count, or `None` on overflow.
    pub fn checked_len(&self) -> Option<usize> {
        self.nx.checked_mul(self.ny)?.checked_mul(self.nz)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index with x varying fastest.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.nx;
        let y = (i / self.nx) % self.ny;
        let z = i / (self.nx * self.ny);
        [x, y, z]
    }

    #[inline]
    pub fn contains(&self, p: [i64; 3]) -> bool {
        p[0] >= 0
            && p[1] >= 0
            && p[2] >= 0
            && (p[0] as usize) < self.nx
            && (p[1] as usize) < self.ny
            && (p[2] as usize) < self.nz
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn max_extent(&self) -> usize {
        self.nx.max(self.ny).max(self.nz)
    }

    fn validate(&self, expected_len: usize) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::format("dims", format!("zero dimension in {self:?}")));
        }
        match self.checked_len() {
            Some(n) if n == expected_len => Ok(()),
            Some(n) => Err(Error::format(
                "data",
                format!("expected {n} voxels for {self:?}, got {expected_len}"),
            )),
            None => Err(Error::format("dims", "voxel count overflows")),
        }
    }
}

/// Read access shared by intensity and label grids.
pub trait VoxelGrid {
    fn dims(&self) -> Dims;
    fn voxels(&self) -> &[u8];

    #[inline]
    fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.voxels()[self.dims().index(x, y, z)]
    }
}

/// 8-bit intensity volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Volume {
    dims: Dims,
    data: Vec<u8>,
}

/// 8-bit label volume; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims,
    data: Vec<u8>,
}

macro_rules! grid_impl {
    ($ty:ident) => {
        impl $ty {
            pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
                dims.validate(data.len())?;
                Ok(Self { dims, data })
            }

            pub fn filled(dims: Dims, value: u8) -> Result<Self> {
                let len = dims
                    .checked_len()
                    .ok_or_else(|| Error::format("dims", "voxel count overflows"))?;
                Self::new(dims, vec![value; len])
            }

            pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> u8) -> Result<Self> {
                let len = dims
                    .checked_len()
                    .ok_or_else(|| Error::format("dims", "voxel count overflows"))?;
                let data = (0..len)
                    .map(|i| {
                        let [x, y, z] = dims.coords(i);
                        f(x, y, z)
                    })
                    .collect();
                Self::new(dims, data)
            }

            pub fn dims(&self) -> Dims {
                self.dims
            }

            pub fn data(&self) -> &[u8] {
                &self.data
            }

            pub fn data_mut(&mut self) -> &mut [u8] {
                &mut self.data
            }

            pub fn into_data(self) -> Vec<u8> {
                self.data
            }

            #[inline]
            pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
                self.data[self.dims.index(x, y, z)]
            }

            #[inline]
            pub fn set(&mut self, x: usize, y: usize, z: usize, value: u8) {
                let i = self.dims.index(x, y, z);
                self.data[i] = value;
            }
        }

        impl VoxelGrid for $ty {
            fn dims(&self) -> Dims {
                self.dims
            }

            fn voxels(&self) -> &[u8] {
                &self.data
            }
        }
    };
}

grid_impl!(Volume);
grid_impl!(LabelVolume);

impl LabelVolume {
    /// Largest label id present.
    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// True when the ids present are exactly `{0, 1, ..., max_label}`.
    pub fn is_contiguous(&self) -> bool {
        let mut seen = [false; 256];
        for &l in &self.data {
            seen[l as usize] = true;
        }
        let max = self.max_label() as usize;
        seen[..=max].iter().all(|&s| s)
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }
}
