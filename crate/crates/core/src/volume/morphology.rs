//! Euclidean distance transform and distance-threshold morphology in mm.

use rayon::prelude::*;

use super::{Geometry, LabelVolume, Mask, ScalarVolume};
use crate::{Error, Result};

/// Squared distance to the closest previously-marked sample along one line,
/// for samples `spacing` apart. `f` holds squared distances (INF = unmarked).
///
/// Lower envelope of parabolas (Felzenszwalb & Huttenlocher), generalised
/// to non-unit sample spacing.
fn edt_1d(f: &[f64], spacing: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let s2 = spacing * spacing;
    let key = |q: usize| f[q] + s2 * (q * q) as f64;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = (key(q) - key(p)) / (2.0 * s2 * (q - p) as f64);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = spacing * (q as f64 - p as f64);
        *o = d * d + f[p];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest set voxel
/// of `mask`; `INFINITY` when the mask is empty.
pub fn distance_transform_sq(mask: &Mask) -> Vec<f64> {
    let g = mask.geometry();
    let [nx, ny, nz] = g.dims;
    let mut d: Vec<f64> = mask
        .data()
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();

    // x lines are contiguous.
    d.par_chunks_mut(nx).for_each_init(
        || (vec![0.0; nx], Vec::new(), Vec::new()),
        |(buf, v, z), line| {
            edt_1d(line, g.spacing[0], buf, v, z);
            line.copy_from_slice(buf);
        },
    );
    // y lines, one z-slice per task.
    d.par_chunks_mut(nx * ny).for_each_init(
        || (vec![0.0; ny], vec![0.0; ny], Vec::new(), Vec::new()),
        |(line, out, v, z), slab| {
            for x in 0..nx {
                for y in 0..ny {
                    line[y] = slab[x + nx * y];
                }
                edt_1d(line, g.spacing[1], out, v, z);
                for y in 0..ny {
                    slab[x + nx * y] = out[y];
                }
            }
        },
    );
    // z lines.
    if nz > 1 {
        let plane = nx * ny;
        let cols: Vec<Vec<f64>> = (0..plane)
            .into_par_iter()
            .map_init(
                || (vec![0.0; nz], Vec::new(), Vec::new()),
                |(out, v, z), i| {
                    let line: Vec<f64> = (0..nz).map(|k| d[i + plane * k]).collect();
                    edt_1d(&line, g.spacing[2], out, v, z);
                    out.clone()
                },
            )
            .collect();
        for (i, col) in cols.into_iter().enumerate() {
            for (k, val) in col.into_iter().enumerate() {
                d[i + plane * k] = val;
            }
        }
    }
    d
}

#[inline]
fn within(d2: f64, radius: f64) -> bool {
    let r2 = radius * radius;
    d2 <= r2 + 1e-9 * r2.max(1.0)
}

fn check_radius(radius: f64) -> Result<()> {
    if !(radius.is_finite() && radius >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "morphology radius must be finite and >= 0, got {radius}"
        )));
    }
    Ok(())
}

/// Voxels within `radius` mm of the mask.
pub fn dilate(mask: &Mask, radius: f64) -> Result<Mask> {
    check_radius(radius)?;
    let d = distance_transform_sq(mask);
    Mask::new(
        mask.geometry().clone(),
        d.into_iter().map(|d2| within(d2, radius)).collect(),
    )
}

/// Mask voxels farther than `radius` mm from every in-grid background voxel.
/// Voxels beyond the grid edge do not count as background.
pub fn erode(mask: &Mask, radius: f64) -> Result<Mask> {
    check_radius(radius)?;
    let d = distance_transform_sq(&mask.not());
    Mask::new(
        mask.geometry().clone(),
        d.into_iter()
            .zip(mask.data())
            .map(|(d2, &m)| m && !within(d2, radius))
            .collect(),
    )
}

fn label_mask(vol: &LabelVolume, label: u16) -> Result<(Mask, String)> {
    let name = vol
        .label_table()
        .get(&label)
        .ok_or(Error::UnknownLabel(label))?
        .clone();
    Ok((vol.mask_of(&[label]), name))
}

/// Binary volume of `label` grown by `radius` mm.
pub fn dilate_mm(vol: &LabelVolume, label: u16, radius: f64) -> Result<LabelVolume> {
    let (m, name) = label_mask(vol, label)?;
    LabelVolume::from_mask(&dilate(&m, radius)?, label, &name)
}

/// Binary volume of `label` shrunk by `radius` mm.
pub fn erode_mm(vol: &LabelVolume, label: u16, radius: f64) -> Result<LabelVolume> {
    let (m, name) = label_mask(vol, label)?;
    LabelVolume::from_mask(&erode(&m, radius)?, label, &name)
}

/// Normalised sampled Gaussian with radius `ceil(4σ)`.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Half-sample symmetric reflection of `i` into `0..n`.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian blur with per-axis sigma in voxels, reflective edges.
pub(crate) fn gaussian_smooth_voxels(
    data: &[f64],
    geometry: &Geometry,
    sigma: [f64; 3],
) -> Vec<f64> {
    let dims = geometry.dims;
    let mut cur = data.to_vec();
    for axis in 0..3 {
        if sigma[axis] <= 0.0 || dims[axis] == 1 {
            continue;
        }
        let kernel = gaussian_kernel(sigma[axis]);
        let r = (kernel.len() / 2) as isize;
        let n = dims[axis];
        let stride = match axis {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        let src = cur.clone();
        cur.par_iter_mut().enumerate().for_each(|(idx, out)| {
            let c = geometry.coords(idx)[axis] as isize;
            let base = idx - (c as usize) * stride;
            let mut acc = 0.0;
            for (j, w) in kernel.iter().enumerate() {
                let k = reflect(c + j as isize - r, n);
                acc += w * src[base + k * stride];
            }
            *out = acc;
        });
    }
    cur
}

/// Gaussian blur with `sigma_mm` in physical units on every axis.
pub fn gaussian_smooth_mm(vol: &ScalarVolume, sigma_mm: f64) -> Result<ScalarVolume> {
    if !(sigma_mm.is_finite() && sigma_mm >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "bad blur sigma {sigma_mm}"
        )));
    }
    let g = vol.geometry();
    let sigma = [
        sigma_mm / g.spacing[0],
        sigma_mm / g.spacing[1],
        sigma_mm / g.spacing[2],
    ];
    ScalarVolume::new(g.clone(), gaussian_smooth_voxels(vol.data(), g, sigma))
}
