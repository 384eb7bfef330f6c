//! Volumetric grids shared by every stage of the pipeline.
//!
//! Voxel data is stored x-fastest: the linear index of `(x, y, z)` is
//! `x + nx * (y + ny * z)`. Physical coordinates are `origin + index * spacing`
//! in millimetres; there is no direction matrix.

mod io;
mod morphology;
mod phantom;
mod resample;

use std::collections::BTreeMap;

pub use io::{read_volume, write_volume, Dtype, Header};
pub(crate) use morphology::gaussian_smooth_voxels;
pub use morphology::{
    dilate, dilate_mm, distance_transform_sq, erode, erode_mm, gaussian_smooth_mm,
};
pub use phantom::{make_phantom, Blob, PhantomSpec, ScarArc, Shell};
pub use resample::{resample, resample_labels, resample_with_fill};

use crate::{Error, Result};

/// Well-known label ids used by phantoms, atlases and the pipeline.
pub mod labels {
    pub const BACKGROUND: u16 = 0;
    pub const LA: u16 = 1;
    pub const PV: u16 = 2;
    pub const LV: u16 = 3;
    pub const RV: u16 = 4;
    pub const RA: u16 = 5;
    pub const AO: u16 = 6;
    pub const PA: u16 = 7;
    pub const WALL: u16 = 8;
    pub const SCAR: u16 = 9;

    pub fn name(id: u16) -> Option<&'static str> {
        Some(match id {
            BACKGROUND => "background",
            LA => "LA",
            PV => "PV",
            LV => "LV",
            RV => "RV",
            RA => "RA",
            AO => "AO",
            PA => "PA",
            WALL => "wall",
            SCAR => "scar",
            _ => return None,
        })
    }

    /// Table with every well-known label.
    pub fn standard_table() -> std::collections::BTreeMap<u16, String> {
        (0..=SCAR)
            .map(|id| (id, name(id).unwrap().to_string()))
            .collect()
    }
}

/// Grid shape and placement in physical space.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Geometry(format!(
                "dims must be positive, got {dims:?}"
            )));
        }
        if dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .is_none()
        {
            return Err(Error::Geometry("voxel count overflows".into()));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Geometry(format!(
                "spacing must be finite and positive, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Geometry(format!(
                "origin must be finite, got {origin:?}"
            )));
        }
        Ok(Geometry {
            dims,
            spacing,
            origin,
        })
    }

    /// Unit-spaced grid at the origin.
    pub fn unit(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Index of a signed coordinate triple, or `None` if it is off the grid.
    #[inline]
    pub fn checked_index(&self, x: isize, y: isize, z: isize) -> Option<usize> {
        if x < 0 || y < 0 || z < 0 {
            return None;
        }
        let (x, y, z) = (x as usize, y as usize, z as usize);
        if x >= self.dims[0] || y >= self.dims[1] || z >= self.dims[2] {
            return None;
        }
        Some(self.index(x, y, z))
    }

    #[inline]
    pub fn physical(&self, c: [usize; 3]) -> [f64; 3] {
        [
            self.origin[0] + c[0] as f64 * self.spacing[0],
            self.origin[1] + c[1] as f64 * self.spacing[1],
            self.origin[2] + c[2] as f64 * self.spacing[2],
        ]
    }

    #[inline]
    pub fn physical_of_index(&self, idx: usize) -> [f64; 3] {
        self.physical(self.coords(idx))
    }

    /// Continuous voxel index of a physical point.
    #[inline]
    pub fn continuous_index(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Physical centre of the grid.
    pub fn center(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = self.origin[a] + 0.5 * (self.dims[a] - 1) as f64 * self.spacing[a];
        }
        c
    }

    pub(crate) fn check_same(&self, other: &Geometry) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GeometryMismatch)
        }
    }
}

/// Real-valued intensity volume.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    geometry: Geometry,
    data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(geometry: Geometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::Geometry(format!(
                "data length {} does not match {} voxels",
                data.len(),
                geometry.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite intensity at voxel {i}"
            )));
        }
        Ok(ScalarVolume { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: f64) -> Self {
        let n = geometry.len();
        ScalarVolume {
            geometry,
            data: vec![value; n],
        }
    }

    pub fn from_fn(geometry: Geometry, f: impl Fn([usize; 3]) -> f64) -> Result<Self> {
        let data = (0..geometry.len()).map(|i| f(geometry.coords(i))).collect();
        Self::new(geometry, data)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.geometry.index(x, y, z)]
    }

    /// Applies `f` voxelwise; fails if the result is not finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<ScalarVolume> {
        ScalarVolume::new(
            self.geometry.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// `(min, max)` over all voxels.
    pub fn range(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// One z-slice as a row-major (x-fastest) image.
    pub fn slice(&self, z: usize) -> &[f64] {
        let n = self.geometry.slice_len();
        &self.data[z * n..(z + 1) * n]
    }
}

/// Integer-labelled volume with a name for every label in use.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    geometry: Geometry,
    data: Vec<u16>,
    label_table: BTreeMap<u16, String>,
}

impl LabelVolume {
    pub fn new(
        geometry: Geometry,
        data: Vec<u16>,
        label_table: BTreeMap<u16, String>,
    ) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::Geometry(format!(
                "data length {} does not match {} voxels",
                data.len(),
                geometry.len()
            )));
        }
        for (id, name) in &label_table {
            validate_label_name(*id, name)?;
        }
        let mut seen = vec![false; usize::from(u16::MAX) + 1];
        for &l in &data {
            if !seen[l as usize] {
                seen[l as usize] = true;
                if !label_table.contains_key(&l) {
                    return Err(Error::UnknownLabel(l));
                }
            }
        }
        Ok(LabelVolume {
            geometry,
            data,
            label_table,
        })
    }

    /// Labels checked against the standard table, extended with any extra ids.
    pub fn with_standard_table(geometry: Geometry, data: Vec<u16>) -> Result<Self> {
        let mut table = labels::standard_table();
        for &l in &data {
            table.entry(l).or_insert_with(|| format!("label{l}"));
        }
        Self::new(geometry, data, table)
    }

    pub fn from_mask(mask: &Mask, label: u16, name: &str) -> Result<Self> {
        let mut table = BTreeMap::new();
        table.insert(labels::BACKGROUND, "background".to_string());
        table.insert(label, name.to_string());
        let data = mask
            .data
            .iter()
            .map(|&b| if b { label } else { 0 })
            .collect();
        Self::new(mask.geometry.clone(), data, table)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn label_table(&self) -> &BTreeMap<u16, String> {
        &self.label_table
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.data[self.geometry.index(x, y, z)]
    }

    /// Mask of voxels carrying any of `ids`.
    pub fn mask_of(&self, ids: &[u16]) -> Mask {
        Mask {
            geometry: self.geometry.clone(),
            data: self.data.iter().map(|l| ids.contains(l)).collect(),
        }
    }

    /// Label ids that actually occur, ascending.
    pub fn present_labels(&self) -> Vec<u16> {
        let mut seen = vec![false; usize::from(u16::MAX) + 1];
        for &l in &self.data {
            seen[l as usize] = true;
        }
        (0..=u16::MAX).filter(|&l| seen[l as usize]).collect()
    }

    pub fn slice(&self, z: usize) -> &[u16] {
        let n = self.geometry.slice_len();
        &self.data[z * n..(z + 1) * n]
    }
}

pub(crate) fn validate_label_name(id: u16, name: &str) -> Result<()> {
    if name.is_empty() || name.trim() != name || name.contains(['\n', '\r']) {
        return Err(Error::InvalidParameter(format!(
            "label {id} has an unusable name {name:?}"
        )));
    }
    Ok(())
}

/// Binary voxel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    geometry: Geometry,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(geometry: Geometry, data: Vec<bool>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::Geometry(format!(
                "mask length {} does not match {} voxels",
                data.len(),
                geometry.len()
            )));
        }
        Ok(Mask { geometry, data })
    }

    pub fn empty(geometry: Geometry) -> Self {
        let n = geometry.len();
        Mask {
            geometry,
            data: vec![false; n],
        }
    }

    pub fn from_fn(geometry: Geometry, f: impl Fn([usize; 3]) -> bool) -> Self {
        let data = (0..geometry.len()).map(|i| f(geometry.coords(i))).collect();
        Mask { geometry, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.geometry.index(x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn not(&self) -> Mask {
        Mask {
            geometry: self.geometry.clone(),
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    fn zip(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Result<Mask> {
        self.geometry.check_same(&other.geometry)?;
        Ok(Mask {
            geometry: self.geometry.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| a || b)
    }

    /// Voxels in `self` but not in `other`.
    pub fn minus(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| a && !b)
    }

    pub fn is_subset_of(&self, other: &Mask) -> Result<bool> {
        self.geometry.check_same(&other.geometry)?;
        Ok(self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b))
    }

    /// Indices of set voxels, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

/// Either kind of volume, as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Scalar(ScalarVolume),
    Labels(LabelVolume),
}

impl Volume {
    pub fn geometry(&self) -> &Geometry {
        match self {
            Volume::Scalar(v) => v.geometry(),
            Volume::Labels(v) => v.geometry(),
        }
    }

    pub fn into_scalar(self) -> Result<ScalarVolume> {
        match self {
            Volume::Scalar(v) => Ok(v),
            Volume::Labels(_) => Err(Error::InvalidParameter(
                "expected an intensity volume, found a label volume".into(),
            )),
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            Volume::Labels(v) => Ok(v),
            Volume::Scalar(_) => Err(Error::InvalidParameter(
                "expected a label volume, found an intensity volume".into(),
            )),
        }
    }
}

impl From<ScalarVolume> for Volume {
    fn from(v: ScalarVolume) -> Self {
        Volume::Scalar(v)
    }
}

impl From<LabelVolume> for Volume {
    fn from(v: LabelVolume) -> Self {
        Volume::Labels(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip() {
        let g = Geometry::unit([3, 4, 5]).unwrap();
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            assert_eq!(g.index(x, y, z), i);
        }
    }

    #[test]
    fn geometry_rejects_bad_spacing() {
        assert!(Geometry::new([2, 2, 2], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Geometry::new([2, 0, 2], [1.0; 3], [0.0; 3]).is_err());
    }

    #[test]
    fn scalar_rejects_non_finite() {
        let g = Geometry::unit([2, 1, 1]).unwrap();
        assert!(ScalarVolume::new(g, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn label_volume_requires_table_entries() {
        let g = Geometry::unit([2, 1, 1]).unwrap();
        let mut table = BTreeMap::new();
        table.insert(0, "background".to_string());
        let err = LabelVolume::new(g, vec![0, 3], table).unwrap_err();
        assert!(matches!(err, Error::UnknownLabel(3)));
    }
}
