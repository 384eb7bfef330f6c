use rayon::prelude::*;

use super::{Geometry, LabelVolume, ScalarVolume};
use crate::transform::SpatialTransform;
use crate::Result;

/// Slack (in voxels) for points that land on the grid boundary up to rounding.
const EDGE_EPS: f64 = 1e-9;

/// Per-axis trilinear lookup: lower node, upper node and fraction.
#[inline]
fn axis_lerp(c: f64, n: usize) -> Option<(usize, usize, f64)> {
    if n == 1 {
        return (c.abs() <= EDGE_EPS).then_some((0, 0, 0.0));
    }
    let hi = (n - 1) as f64;
    if c < -EDGE_EPS || c > hi + EDGE_EPS {
        return None;
    }
    let c = c.clamp(0.0, hi);
    let i0 = (c.floor() as usize).min(n - 2);
    Some((i0, i0 + 1, c - i0 as f64))
}

/// Trilinear interpolation at a continuous index; `None` outside the grid.
#[inline]
pub(crate) fn trilinear(data: &[f64], g: &Geometry, c: [f64; 3]) -> Option<f64> {
    let (x0, x1, fx) = axis_lerp(c[0], g.dims[0])?;
    let (y0, y1, fy) = axis_lerp(c[1], g.dims[1])?;
    let (z0, z1, fz) = axis_lerp(c[2], g.dims[2])?;
    let v = |x, y, z| data[g.index(x, y, z)];
    let c00 = v(x0, y0, z0) * (1.0 - fx) + v(x1, y0, z0) * fx;
    let c10 = v(x0, y1, z0) * (1.0 - fx) + v(x1, y1, z0) * fx;
    let c01 = v(x0, y0, z1) * (1.0 - fx) + v(x1, y0, z1) * fx;
    let c11 = v(x0, y1, z1) * (1.0 - fx) + v(x1, y1, z1) * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    Some(c0 * (1.0 - fz) + c1 * fz)
}

/// Nearest voxel of a continuous index; ties at exactly half a voxel round
/// away from the index origin.
#[inline]
pub(crate) fn nearest(g: &Geometry, c: [f64; 3]) -> Option<usize> {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let r = c[a].round();
        if r < 0.0 || r > (g.dims[a] - 1) as f64 {
            return None;
        }
        idx[a] = r as usize;
    }
    Some(g.index(idx[0], idx[1], idx[2]))
}

/// Samples `vol` at `transform(p)` for every voxel `p` of `target`, with
/// trilinear interpolation and 0 outside the source grid.
pub fn resample(
    vol: &ScalarVolume,
    transform: &impl SpatialTransform,
    target: &Geometry,
) -> Result<ScalarVolume> {
    resample_with_fill(vol, transform, target, 0.0)
}

pub fn resample_with_fill(
    vol: &ScalarVolume,
    transform: &impl SpatialTransform,
    target: &Geometry,
    fill: f64,
) -> Result<ScalarVolume> {
    transform.validate()?;
    let src = vol.geometry();
    let plane = target.slice_len();
    let mut out = vec![fill; target.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(z, slab)| {
        for (i, o) in slab.iter_mut().enumerate() {
            let p = target.physical_of_index(i + z * plane);
            let c = src.continuous_index(transform.map_point(p));
            if let Some(v) = trilinear(vol.data(), src, c) {
                *o = v;
            }
        }
    });
    ScalarVolume::new(target.clone(), out)
}

/// Nearest-neighbour version of [`resample`] for labels; background outside.
pub fn resample_labels(
    vol: &LabelVolume,
    transform: &impl SpatialTransform,
    target: &Geometry,
) -> Result<LabelVolume> {
    transform.validate()?;
    let src = vol.geometry();
    let plane = target.slice_len();
    let mut out = vec![0u16; target.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(z, slab)| {
        for (i, o) in slab.iter_mut().enumerate() {
            let p = target.physical_of_index(i + z * plane);
            let c = src.continuous_index(transform.map_point(p));
            if let Some(j) = nearest(src, c) {
                *o = vol.data()[j];
            }
        }
    });
    let mut table = vol.label_table().clone();
    table.entry(0).or_insert_with(|| "background".to_string());
    LabelVolume::new(target.clone(), out, table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::{AffineTransform, TransformChain};

    #[test]
    fn identity_is_exact() {
        let g = Geometry::new([5, 4, 3], [1.0, 2.0, 0.5], [1.0, -2.0, 3.0]).unwrap();
        let v = ScalarVolume::from_fn(g.clone(), |[x, y, z]| (x * 31 + y * 7 + z) as f64 * 0.37)
            .unwrap();
        let r = resample(&v, &TransformChain::identity(), &g).unwrap();
        for (a, b) in r.data().iter().zip(v.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn one_voxel_shift_fills_zero() {
        let g = Geometry::new([4, 3, 2], [2.0, 1.0, 1.0], [0.0; 3]).unwrap();
        let v = ScalarVolume::from_fn(g.clone(), |[x, y, z]| 1.0 + (x + 4 * y + 12 * z) as f64)
            .unwrap();
        let t = AffineTransform::translation([2.0, 0.0, 0.0]);
        let r = resample(&v, &t, &g).unwrap();
        for z in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    let expect = if x + 1 < 4 { v.get(x + 1, y, z) } else { 0.0 };
                    assert_eq!(r.get(x, y, z), expect);
                }
            }
        }
    }

    #[test]
    fn degenerate_transform_is_an_error() {
        let g = Geometry::unit([2, 2, 2]).unwrap();
        let v = ScalarVolume::filled(g.clone(), 1.0);
        let bad = AffineTransform {
            linear: [[0.0; 3]; 3],
            translation: [0.0; 3],
        };
        assert!(resample(&v, &bad, &g).is_err());
    }
}
