//! Per-slice SLIC superpixels: local k-means in a joint intensity-space
//! distance, followed by a connectivity pass.
//!
//! Distance between a pixel and a cluster centre:
//! `D = sqrt(d_c² + (d_s / S)² m²)` with `d_c` the intensity difference and
//! `d_s` the in-plane pixel distance. Each centre only competes for pixels in
//! the `2S × 2S` window around it.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::volume::{Geometry, LabelVolume, Mask, ScalarVolume};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SlicParams {
    /// Grid interval in pixels.
    pub s: usize,
    /// Compactness.
    pub m: f64,
    pub iterations: usize,
    /// Connected pieces smaller than this fraction of `S²` are merged into a
    /// neighbour.
    pub min_region_fraction: f64,
    /// Move each seed to the lowest-gradient pixel of its 3×3 neighbourhood.
    pub perturb_seeds: bool,
}

impl Default for SlicParams {
    fn default() -> Self {
        SlicParams {
            s: 4,
            m: 4.0,
            iterations: 10,
            min_region_fraction: 0.25,
            perturb_seeds: true,
        }
    }
}

impl SlicParams {
    pub fn validate(&self) -> Result<()> {
        if self.s < 2 {
            return Err(Error::InvalidParameter(
                "SLIC grid interval must be >= 2".into(),
            ));
        }
        if !(self.m > 0.0 && self.m.is_finite()) {
            return Err(Error::InvalidParameter(
                "SLIC compactness must be > 0".into(),
            ));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidParameter(
                "SLIC needs at least one iteration".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.min_region_fraction) {
            return Err(Error::InvalidParameter(
                "min region fraction must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// A cluster centre: position in pixels and mean intensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Center {
    pub x: f64,
    pub y: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Centroid {
    pub x: f64,
    pub y: f64,
    pub intensity: f64,
    pub count: usize,
}

/// `D = sqrt(d_c² + (d_s/S)² m²)` for a pixel at `(x, y)` with value `v`.
#[inline]
pub fn slic_distance(pixel: Center, center: Center, s: usize, m: f64) -> f64 {
    slic_distance_sq(pixel, center, s, m).sqrt()
}

#[inline]
fn slic_distance_sq(p: Center, c: Center, s: usize, m: f64) -> f64 {
    let dc = p.intensity - c.intensity;
    let (dx, dy) = (p.x - c.x, p.y - c.y);
    let ds2 = dx * dx + dy * dy;
    dc * dc + ds2 / (s * s) as f64 * m * m
}

/// A 2D scalar image, row-major with x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Slice {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height || width == 0 || height == 0 {
            return Err(Error::Dimension {
                expected: width * height,
                found: data.len(),
            });
        }
        Ok(Slice {
            width,
            height,
            data,
        })
    }

    pub fn of_volume(vol: &ScalarVolume, z: usize) -> Self {
        let g = vol.geometry();
        Slice {
            width: g.dims[0],
            height: g.dims[1],
            data: vol.slice(z).to_vec(),
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[x + self.width * y]
    }

    fn pixel(&self, i: usize) -> Center {
        Center {
            x: (i % self.width) as f64,
            y: (i / self.width) as f64,
            intensity: self.data[i],
        }
    }
}

/// Per-pixel cluster ids (contiguous from 0) and their centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub centroids: Vec<Centroid>,
}

impl SuperpixelMap {
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    /// Pixel indices of every cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.len()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }

    #[inline]
    pub fn label_at(&self, x: usize, y: usize) -> u32 {
        self.labels[x + self.width * y]
    }
}

/// Initial seeds on a regular grid of interval ≈ S, one per cell, at cell
/// centres.
pub fn grid_seeds(slice: &Slice, s: usize) -> Vec<Center> {
    let nx = ((slice.width as f64 / s as f64).round() as usize).max(1);
    let ny = ((slice.height as f64 / s as f64).round() as usize).max(1);
    let (sx, sy) = (
        slice.width as f64 / nx as f64,
        slice.height as f64 / ny as f64,
    );
    let mut seeds = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = (i as f64 + 0.5) * sx - 0.5;
            let y = (j as f64 + 0.5) * sy - 0.5;
            let px = (x.round() as usize).min(slice.width - 1);
            let py = (y.round() as usize).min(slice.height - 1);
            seeds.push(Center {
                x,
                y,
                intensity: slice.at(px, py),
            });
        }
    }
    seeds
}

fn gradient_sq(slice: &Slice, x: usize, y: usize) -> f64 {
    let xm = x.saturating_sub(1);
    let xp = (x + 1).min(slice.width - 1);
    let ym = y.saturating_sub(1);
    let yp = (y + 1).min(slice.height - 1);
    let gx = slice.at(xp, y) - slice.at(xm, y);
    let gy = slice.at(x, yp) - slice.at(x, ym);
    gx * gx + gy * gy
}

/// Moves each seed to the lowest-gradient pixel of the 3×3 block around it;
/// the seed stays put unless a strictly lower gradient is found.
fn perturb(slice: &Slice, seeds: &mut [Center]) {
    for c in seeds {
        let (cx, cy) = (c.x.round() as isize, c.y.round() as isize);
        let mut best = (gradient_sq(slice, cx as usize, cy as usize), None);
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let (x, y) = (cx + dx, cy + dy);
                if x < 0 || y < 0 || x >= slice.width as isize || y >= slice.height as isize {
                    continue;
                }
                let g = gradient_sq(slice, x as usize, y as usize);
                if g < best.0 {
                    best = (g, Some((x as usize, y as usize)));
                }
            }
        }
        if let Some((x, y)) = best.1 {
            *c = Center {
                x: x as f64,
                y: y as f64,
                intensity: slice.at(x, y),
            };
        }
    }
}

/// Pixel range `[lo, hi]` within `s` of `c` along one axis, clipped.
#[inline]
fn window(c: f64, s: usize, n: usize) -> Option<(usize, usize)> {
    let lo = (c - s as f64).ceil().max(0.0);
    let hi = (c + s as f64).floor().min(n as f64 - 1.0);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

/// One assignment sweep: each centre, in index order, claims the pixels of
/// its window that it is strictly closer to than the best claim so far.
///
/// With `keep_incumbent` the best claim starts at the pixel's current centre
/// wherever that centre now is, so a pixel only moves for a strictly closer
/// windowed centre and the clustering energy cannot rise. Without it (first
/// sweep) every pixel takes its closest windowed centre; pixels that no
/// window reaches keep their label.
pub fn assign(
    slice: &Slice,
    centers: &[Center],
    s: usize,
    m: f64,
    labels: &mut [u32],
    keep_incumbent: bool,
) {
    let mut best: Vec<f64> = if keep_incumbent {
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| slic_distance_sq(slice.pixel(i), centers[l as usize], s, m))
            .collect()
    } else {
        vec![f64::INFINITY; labels.len()]
    };
    for (k, c) in centers.iter().enumerate() {
        let (Some((x0, x1)), Some((y0, y1))) =
            (window(c.x, s, slice.width), window(c.y, s, slice.height))
        else {
            continue;
        };
        for y in y0..=y1 {
            for x in x0..=x1 {
                let i = x + slice.width * y;
                let d = slic_distance_sq(slice.pixel(i), *c, s, m);
                if d < best[i] {
                    best[i] = d;
                    labels[i] = k as u32;
                }
            }
        }
    }
}

/// Moves every centre to the mean position and intensity of its pixels.
/// Centres without pixels stay where they are.
pub fn update_centers(slice: &Slice, labels: &[u32], centers: &mut [Center]) {
    let mut acc = vec![[0.0f64; 4]; centers.len()];
    for (i, &l) in labels.iter().enumerate() {
        let p = slice.pixel(i);
        let a = &mut acc[l as usize];
        a[0] += p.x;
        a[1] += p.y;
        a[2] += p.intensity;
        a[3] += 1.0;
    }
    for (c, a) in centers.iter_mut().zip(acc) {
        if a[3] > 0.0 {
            *c = Center {
                x: a[0] / a[3],
                y: a[1] / a[3],
                intensity: a[2] / a[3],
            };
        }
    }
}

/// `Σ D²` of every pixel to its cluster centre.
pub fn energy(slice: &Slice, labels: &[u32], centers: &[Center], s: usize, m: f64) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| slic_distance_sq(slice.pixel(i), centers[l as usize], s, m))
        .sum()
}

/// Clustering before the connectivity pass, with the energy after every
/// iteration.
#[derive(Debug, Clone)]
pub struct SlicTrace {
    pub labels: Vec<u32>,
    pub centers: Vec<Center>,
    pub energies: Vec<f64>,
}

fn check_slice(slice: &Slice, p: &SlicParams) -> Result<()> {
    p.validate()?;
    if slice.width < p.s || slice.height < p.s {
        return Err(Error::InvalidParameter(format!(
            "{}x{} slice is smaller than one {}-pixel grid cell",
            slice.width, slice.height, p.s
        )));
    }
    if slice.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite pixel".into()));
    }
    Ok(())
}

/// Local k-means without the connectivity pass.
pub fn slic_kmeans(slice: &Slice, p: &SlicParams) -> Result<SlicTrace> {
    check_slice(slice, p)?;
    let mut centers = grid_seeds(slice, p.s);
    if p.perturb_seeds {
        perturb(slice, &mut centers);
    }
    // Seed windows overlap, so the first sweep reaches every pixel.
    let mut labels = vec![0u32; slice.data.len()];
    assign(slice, &centers, p.s, p.m, &mut labels, false);
    let mut energies = Vec::with_capacity(p.iterations);
    for it in 0..p.iterations {
        if it > 0 {
            assign(slice, &centers, p.s, p.m, &mut labels, true);
        }
        update_centers(slice, &labels, &mut centers);
        energies.push(energy(slice, &labels, &centers, p.s, p.m));
    }
    Ok(SlicTrace {
        labels,
        centers,
        energies,
    })
}

/// 4-connected components of a label map, numbered in scan order.
fn components(width: usize, labels: &[u32]) -> (Vec<usize>, usize) {
    let n = labels.len();
    let height = n / width;
    let mut comp = vec![usize::MAX; n];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = count;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % width, i / width);
            let mut visit = |j: usize| {
                if comp[j] == usize::MAX && labels[j] == labels[i] {
                    comp[j] = count;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < width {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - width);
            }
            if y + 1 < height {
                visit(i + width);
            }
        }
        count += 1;
    }
    (comp, count)
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Splits clusters into 4-connected pieces and merges pieces smaller than
/// `min_size` into the largest adjacent piece (ties to the earliest). Ids
/// are renumbered contiguously in scan order.
pub fn enforce_connectivity(width: usize, labels: &[u32], min_size: usize) -> Vec<u32> {
    let (comp, count) = components(width, labels);
    let n = labels.len();
    let mut size = vec![0usize; count];
    for &c in &comp {
        size[c] += 1;
    }
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); count];
    for i in 0..n {
        let (x, c) = (i % width, comp[i]);
        if x + 1 < width && comp[i + 1] != c {
            adj[c].insert(comp[i + 1]);
            adj[comp[i + 1]].insert(c);
        }
        if i + width < n && comp[i + width] != c {
            adj[c].insert(comp[i + width]);
            adj[comp[i + width]].insert(c);
        }
    }
    let mut parent: Vec<usize> = (0..count).collect();
    for c in 0..count {
        let r = find(&mut parent, c);
        if size[r] >= min_size {
            continue;
        }
        let neighbours: BTreeSet<usize> = adj[r]
            .iter()
            .map(|&a| find(&mut parent, a))
            .filter(|&a| a != r)
            .collect();
        let Some(&target) = neighbours
            .iter()
            .max_by(|&&a, &&b| size[a].cmp(&size[b]).then(b.cmp(&a)))
        else {
            continue;
        };
        parent[r] = target;
        size[target] += size[r];
        let moved = std::mem::take(&mut adj[r]);
        adj[target].extend(moved);
    }
    let mut id = vec![u32::MAX; count];
    let mut next = 0u32;
    comp.iter()
        .map(|&c| {
            let r = find(&mut parent, c);
            if id[r] == u32::MAX {
                id[r] = next;
                next += 1;
            }
            id[r]
        })
        .collect()
}

fn centroids(slice: &Slice, labels: &[u32]) -> Vec<Centroid> {
    let k = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut acc = vec![[0.0f64; 3]; k];
    let mut count = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        let p = slice.pixel(i);
        acc[l as usize][0] += p.x;
        acc[l as usize][1] += p.y;
        acc[l as usize][2] += p.intensity;
        count[l as usize] += 1;
    }
    acc.iter()
        .zip(count)
        .map(|(a, c)| Centroid {
            x: a[0] / c as f64,
            y: a[1] / c as f64,
            intensity: a[2] / c as f64,
            count: c,
        })
        .collect()
}

/// SLIC superpixels of one slice.
pub fn slic_segment(slice: &Slice, p: &SlicParams) -> Result<SuperpixelMap> {
    let trace = slic_kmeans(slice, p)?;
    let min_size = ((p.min_region_fraction * (p.s * p.s) as f64).round() as usize).max(1);
    let labels = enforce_connectivity(slice.width, &trace.labels, min_size);
    Ok(SuperpixelMap {
        width: slice.width,
        height: slice.height,
        centroids: centroids(slice, &labels),
        labels,
    })
}

/// SLIC on every z-slice independently.
pub fn slic_volume(vol: &ScalarVolume, p: &SlicParams) -> Result<Vec<SuperpixelMap>> {
    p.validate()?;
    (0..vol.geometry().dims[2])
        .into_par_iter()
        .map(|z| slic_segment(&Slice::of_volume(vol, z), p))
        .collect()
}

/// Stacks per-slice maps into one label volume; ids are offset per slice so
/// they stay unique and start at 1.
pub fn superpixel_label_volume(geometry: &Geometry, maps: &[SuperpixelMap]) -> Result<LabelVolume> {
    if maps.len() != geometry.dims[2] {
        return Err(Error::Dimension {
            expected: geometry.dims[2],
            found: maps.len(),
        });
    }
    let total: usize = maps.iter().map(|m| m.len()).sum();
    if total >= u16::MAX as usize {
        return Err(Error::InvalidParameter(format!(
            "{total} superpixels do not fit 16-bit label ids"
        )));
    }
    let mut data = Vec::with_capacity(geometry.len());
    let mut offset = 1u32;
    for m in maps {
        if m.width != geometry.dims[0] || m.height != geometry.dims[1] {
            return Err(Error::GeometryMismatch);
        }
        data.extend(m.labels.iter().map(|&l| (l + offset) as u16));
        offset += m.len() as u32;
    }
    let table = (0..offset as u16)
        .map(|i| {
            (
                i,
                if i == 0 {
                    "background".to_string()
                } else {
                    format!("sp{i}")
                },
            )
        })
        .collect();
    LabelVolume::new(geometry.clone(), data, table)
}

/// Inverse of [`superpixel_label_volume`]: per-slice maps with ids renumbered
/// from 0 in order of first appearance. Centroid intensities come from
/// `volume` when given, else 0.
pub fn maps_from_label_volume(
    sp: &LabelVolume,
    volume: Option<&ScalarVolume>,
) -> Result<Vec<SuperpixelMap>> {
    let g = sp.geometry();
    if let Some(v) = volume {
        g.check_same(v.geometry())?;
    }
    let (w, h) = (g.dims[0], g.dims[1]);
    (0..g.dims[2])
        .map(|z| {
            let mut ids = std::collections::HashMap::new();
            let labels: Vec<u32> = sp
                .slice(z)
                .iter()
                .map(|l| {
                    let next = ids.len() as u32;
                    *ids.entry(*l).or_insert(next)
                })
                .collect();
            let img = volume.map(|v| v.slice(z));
            let mut centroids = vec![
                Centroid {
                    x: 0.0,
                    y: 0.0,
                    intensity: 0.0,
                    count: 0
                };
                ids.len()
            ];
            for (i, &l) in labels.iter().enumerate() {
                let c = &mut centroids[l as usize];
                c.x += (i % w) as f64;
                c.y += (i / w) as f64;
                c.intensity += img.map_or(0.0, |s| s[i]);
                c.count += 1;
            }
            for c in &mut centroids {
                let n = c.count as f64;
                c.x /= n;
                c.y /= n;
                c.intensity /= n;
            }
            Ok(SuperpixelMap {
                width: w,
                height: h,
                labels,
                centroids,
            })
        })
        .collect()
}

/// Dice between `truth` and the union of superpixels whose overlap with it
/// is at least `ratio` of their own area.
pub fn adherence_dice(map: &SuperpixelMap, truth: &[bool], ratio: f64) -> Result<f64> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "overlap ratio {ratio} not in (0, 1]"
        )));
    }
    if truth.len() != map.labels.len() {
        return Err(Error::Dimension {
            expected: map.labels.len(),
            found: truth.len(),
        });
    }
    let n_truth = truth.iter().filter(|&&t| t).count();
    if n_truth == 0 {
        return Err(Error::Empty(
            "adherence needs a non-empty truth region".into(),
        ));
    }
    let mut inside = vec![0usize; map.len()];
    for (&l, &t) in map.labels.iter().zip(truth) {
        if t {
            inside[l as usize] += 1;
        }
    }
    let keep: Vec<bool> = inside
        .iter()
        .zip(&map.centroids)
        .map(|(&i, c)| i as f64 >= ratio * c.count as f64)
        .collect();
    let (mut both, mut sel) = (0usize, 0usize);
    for (&l, &t) in map.labels.iter().zip(truth) {
        if keep[l as usize] {
            sel += 1;
            both += t as usize;
        }
    }
    Ok(2.0 * both as f64 / (sel + n_truth) as f64)
}

/// Adherence of a slice's superpixels to `truth` for each compactness.
pub fn adherence_sweep(
    slice: &Slice,
    truth: &[bool],
    base: &SlicParams,
    ms: &[f64],
    ratio: f64,
) -> Result<Vec<(f64, f64)>> {
    ms.iter()
        .map(|&m| {
            let p = SlicParams { m, ..base.clone() };
            Ok((m, adherence_dice(&slic_segment(slice, &p)?, truth, ratio)?))
        })
        .collect()
}

/// The in-plane mask of slice `z`.
pub fn mask_slice(mask: &Mask, z: usize) -> Vec<bool> {
    let n = mask.geometry().slice_len();
    mask.data()[z * n..(z + 1) * n].to_vec()
}
