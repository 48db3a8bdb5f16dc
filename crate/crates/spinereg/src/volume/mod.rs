//! Labeled voxel volumes with world-space geometry.
//!
//! A [`LabelVolume`] is a dense 3D grid of integer vertebra labels plus the
//! affine geometry (spacing, origin, direction) that places voxel indices in
//! world millimeters. Voxel centers sit at integer continuous indices, and
//! the first axis varies fastest in memory.

mod io;

pub use io::{read_volume, write_volume};

use nalgebra::{Matrix3, Point3, Vector3};

use crate::error::{Error, Result};
use crate::registration::RigidTransform;

/// Maximum deviation of `direction^T * direction` from the identity.
pub const DIRECTION_ORTHO_TOL: f64 = 1e-6;

/// Voxel-to-world mapping of a 3D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGeometry {
    /// Grid size in voxels per axis.
    pub dims: [usize; 3],
    /// Voxel size in mm along each voxel axis.
    pub spacing: Vector3<f64>,
    /// World position (mm) of voxel index (0, 0, 0).
    pub origin: Point3<f64>,
    /// Columns are the world directions of the voxel axes; orthonormal.
    pub direction: Matrix3<f64>,
}

impl VolumeGeometry {
    pub fn new(
        dims: [usize; 3],
        spacing: Vector3<f64>,
        origin: Point3<f64>,
        direction: Matrix3<f64>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Precondition(format!(
                "volume dims must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Precondition(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        let gram = direction.transpose() * direction;
        let deviation = (gram - Matrix3::identity()).abs().max();
        if !(deviation <= DIRECTION_ORTHO_TOL) {
            return Err(Error::Precondition(format!(
                "direction matrix is not orthonormal (max deviation {deviation:.3e})"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            direction,
        })
    }

    /// Axis-aligned identity-direction geometry.
    pub fn axis_aligned(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        Self::new(
            dims,
            Vector3::from(spacing),
            Point3::from(origin),
            Matrix3::identity(),
        )
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Map a continuous voxel index to world mm:
    /// `origin + direction * (spacing .* ijk)`.
    pub fn voxel_to_world(&self, ijk: [f64; 3]) -> Point3<f64> {
        let scaled = Vector3::new(
            self.spacing.x * ijk[0],
            self.spacing.y * ijk[1],
            self.spacing.z * ijk[2],
        );
        self.origin + self.direction * scaled
    }

    /// Inverse of [`voxel_to_world`](Self::voxel_to_world); exact because the
    /// direction matrix is orthonormal.
    pub fn world_to_voxel(&self, p: &Point3<f64>) -> [f64; 3] {
        let local = self.direction.transpose() * (p - self.origin);
        [
            local.x / self.spacing.x,
            local.y / self.spacing.y,
            local.z / self.spacing.z,
        ]
    }

    /// Flat index of an in-bounds voxel; first axis fastest.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Componentwise geometry comparison with tolerance scaled by magnitude,
    /// so that f32-backed file formats round-trip.
    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        if self.dims != other.dims {
            return false;
        }
        let close = |a: f64, b: f64| (a - b).abs() <= tol * a.abs().max(1.0);
        self.spacing
            .iter()
            .zip(other.spacing.iter())
            .all(|(a, b)| close(*a, *b))
            && self
                .origin
                .iter()
                .zip(other.origin.iter())
                .all(|(a, b)| close(*a, *b))
            && self
                .direction
                .iter()
                .zip(other.direction.iter())
                .all(|(a, b)| close(*a, *b))
    }
}

/// Dense grid of unsigned integer vertebra labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub geometry: VolumeGeometry,
    /// Length equals the product of `geometry.dims`; first axis fastest.
    pub voxels: Vec<u16>,
}

impl LabelVolume {
    pub fn new(geometry: VolumeGeometry, voxels: Vec<u16>) -> Result<Self> {
        if voxels.len() != geometry.num_voxels() {
            return Err(Error::Precondition(format!(
                "voxel array length {} does not match dims {:?}",
                voxels.len(),
                geometry.dims
            )));
        }
        Ok(Self { geometry, voxels })
    }

    pub fn zeros(geometry: VolumeGeometry) -> Self {
        let n = geometry.num_voxels();
        Self {
            geometry,
            voxels: vec![0; n],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u16 {
        self.voxels[self.geometry.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: u16) {
        let idx = self.geometry.index(i, j, k);
        self.voxels[idx] = value;
    }

    /// Sorted list of distinct nonzero labels present in the volume.
    pub fn labels_present(&self) -> Vec<u16> {
        let mut seen = vec![false; 1 << 16];
        for &v in &self.voxels {
            seen[v as usize] = true;
        }
        (1..=u16::MAX).filter(|&l| seen[l as usize]).collect()
    }
}

/// Per-vertebra boolean mask on the same grid layout as [`LabelVolume`].
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub geometry: VolumeGeometry,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(geometry: VolumeGeometry, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != geometry.num_voxels() {
            return Err(Error::Precondition(format!(
                "bit array length {} does not match dims {:?}",
                bits.len(),
                geometry.dims
            )));
        }
        Ok(Self { geometry, bits })
    }

    pub fn zeros(geometry: VolumeGeometry) -> Self {
        let n = geometry.num_voxels();
        Self {
            geometry,
            bits: vec![false; n],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.bits[self.geometry.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: bool) {
        let idx = self.geometry.index(i, j, k);
        self.bits[idx] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Inclusive voxel-index bounding box of set bits, or `None` when empty.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        let [nx, ny, nz] = self.geometry.dims;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    if self.bits[self.geometry.index(i, j, k)] {
                        any = true;
                        let idx = [i, j, k];
                        for a in 0..3 {
                            lo[a] = lo[a].min(idx[a]);
                            hi[a] = hi[a].max(idx[a]);
                        }
                    }
                }
            }
        }
        any.then_some((lo, hi))
    }
}

/// Mask of voxels equal to `label`. An absent label yields an all-false mask.
pub fn extract_label(vol: &LabelVolume, label: u16) -> BinaryMask {
    BinaryMask {
        geometry: vol.geometry.clone(),
        bits: vol.voxels.iter().map(|&v| v == label).collect(),
    }
}

/// Resample `mask` onto `target` through a rigid transform that maps mask
/// space into target space.
///
/// The output voxel at index `v` is true iff the nearest-neighbor sample of
/// `mask` at `transform⁻¹(voxel_to_world(target, v))` is true; samples that
/// fall outside the mask extent are false.
pub fn resample_mask(
    mask: &BinaryMask,
    target: &VolumeGeometry,
    transform: &RigidTransform,
) -> BinaryMask {
    let inv = transform.invert();
    let [nx, ny, nz] = target.dims;
    let [mx, my, mz] = mask.geometry.dims;
    let mut bits = vec![false; target.num_voxels()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let world = target.voxel_to_world([i as f64, j as f64, k as f64]);
                let src = inv.apply(&world);
                let ijk = mask.geometry.world_to_voxel(&src);
                let si = ijk[0].round();
                let sj = ijk[1].round();
                let sk = ijk[2].round();
                if si >= 0.0
                    && sj >= 0.0
                    && sk >= 0.0
                    && (si as usize) < mx
                    && (sj as usize) < my
                    && (sk as usize) < mz
                {
                    bits[target.index(i, j, k)] =
                        mask.get(si as usize, sj as usize, sk as usize);
                }
            }
        }
    }
    BinaryMask {
        geometry: target.clone(),
        bits,
    }
}
