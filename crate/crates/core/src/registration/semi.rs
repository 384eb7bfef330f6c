//! Spatially encoded mutual information.
//!
//! The target is divided into `n_bands` overlapping Gaussian bands along the
//! longest axis of its foreground bounding box; each band has its own joint
//! histogram, and the similarity is the sum of the per-band mutual
//! informations. Band weights depend only on the position along that axis,
//! so per-position histograms are accumulated once and blended per band.

use rayon::prelude::*;

use super::interp::BsplineImage;
use super::parzen::{BinWeights, ParzenBinning, SLOTS};
use crate::volume::{Geometry, ScalarVolume};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SemiConfig {
    pub n_bands: usize,
    pub bins: usize,
    /// Parzen kernel width in bins; the cubic B-spline window at 1.0.
    pub parzen_width: f64,
}

impl Default for SemiConfig {
    fn default() -> Self {
        SemiConfig {
            n_bands: 8,
            bins: 32,
            parzen_width: 1.0,
        }
    }
}

impl SemiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_bands == 0 {
            return Err(Error::InvalidParameter("n_bands must be >= 1".into()));
        }
        if self.bins < 2 {
            return Err(Error::InvalidParameter("bins must be >= 2".into()));
        }
        // Checks the width against the bin count.
        ParzenBinning::new(0.0, 1.0, self.bins, self.parzen_width).map(|_| ())
    }
}

/// Gaussian band weights along one physical axis.
#[derive(Debug, Clone, PartialEq)]
pub struct BandLayout {
    pub axis: usize,
    pub centers: Vec<f64>,
    pub sigma: f64,
}

impl BandLayout {
    /// Bands over the bounding box of voxels brighter than
    /// `min + 0.1·(max − min)`, along its longest physical extent.
    pub fn from_target(target: &ScalarVolume, n_bands: usize) -> Result<Self> {
        if n_bands == 0 {
            return Err(Error::InvalidParameter("n_bands must be >= 1".into()));
        }
        let g = target.geometry();
        let (lo, hi) = target.range();
        let thresh = lo + 0.1 * (hi - lo);
        let mut bmin = [usize::MAX; 3];
        let mut bmax = [0usize; 3];
        for (i, &v) in target.data().iter().enumerate() {
            if v > thresh {
                let c = g.coords(i);
                for a in 0..3 {
                    bmin[a] = bmin[a].min(c[a]);
                    bmax[a] = bmax[a].max(c[a]);
                }
            }
        }
        if bmin[0] == usize::MAX {
            bmin = [0; 3];
            bmax = [g.dims[0] - 1, g.dims[1] - 1, g.dims[2] - 1];
        }
        let extent: Vec<f64> = (0..3)
            .map(|a| (bmax[a] - bmin[a]) as f64 * g.spacing[a])
            .collect();
        // Longest axis; earlier axis wins ties.
        let mut axis = 0;
        for a in 1..3 {
            if extent[a] > extent[axis] {
                axis = a;
            }
        }
        let start = g.origin[axis] + bmin[axis] as f64 * g.spacing[axis];
        let step = extent[axis] / n_bands as f64;
        let centers = (0..n_bands)
            .map(|s| start + (s as f64 + 0.5) * step)
            .collect();
        Ok(BandLayout {
            axis,
            centers,
            sigma: step.max(g.spacing[axis]),
        })
    }

    pub fn n_bands(&self) -> usize {
        self.centers.len()
    }

    /// Band weights at physical coordinate `u` along the band axis; they sum
    /// to one.
    pub fn weights_at(&self, u: f64, out: &mut [f64]) {
        if self.centers.len() == 1 {
            out[0] = 1.0;
            return;
        }
        let e = |c: f64| -((u - c) * (u - c)) / (2.0 * self.sigma * self.sigma);
        let top = self
            .centers
            .iter()
            .map(|&c| e(c))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &c) in out.iter_mut().zip(&self.centers) {
            *o = (e(c) - top).exp();
            total += *o;
        }
        out.iter_mut().for_each(|o| *o /= total);
    }
}

/// Joint histogram of one band; rows index target bins, columns atlas bins.
#[derive(Debug, Clone, PartialEq)]
pub struct JointHistogram {
    pub bins: usize,
    pub counts: Vec<f64>,
}

impl JointHistogram {
    pub fn get(&self, target_bin: usize, atlas_bin: usize) -> f64 {
        self.counts[target_bin * self.bins + atlas_bin]
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Mutual information (nats) of the normalised histogram; 0 when empty.
    pub fn mutual_information(&self) -> f64 {
        mutual_information(&self.counts, self.bins, self.total()).0
    }
}

/// MI of a `bins × bins` histogram with mass `total`, and the derivative
/// table `ln p(k,l) − ln p_atlas(l)` (0 where `p(k,l) = 0`).
fn mutual_information(h: &[f64], bins: usize, total: f64) -> (f64, Vec<f64>) {
    let mut deriv = vec![0.0; bins * bins];
    if total <= 0.0 {
        return (0.0, deriv);
    }
    let mut pt = vec![0.0; bins];
    let mut pa = vec![0.0; bins];
    for k in 0..bins {
        for l in 0..bins {
            let p = h[k * bins + l] / total;
            pt[k] += p;
            pa[l] += p;
        }
    }
    let mut mi = 0.0;
    for k in 0..bins {
        for l in 0..bins {
            let p = h[k * bins + l] / total;
            if p > 0.0 {
                mi += p * (p / (pt[k] * pa[l])).ln();
                deriv[k * bins + l] = p.ln() - pa[l].ln();
            }
        }
    }
    (mi, deriv)
}

/// Target-side state of the objective: binned target, band tables and the
/// atlas binning. Independent of the atlas values being scored.
#[derive(Debug, Clone)]
pub(crate) struct SemiCore {
    geometry: Geometry,
    bins: usize,
    n_bands: usize,
    axis: usize,
    target_bins: Vec<BinWeights>,
    /// `dims[axis] × n_bands` band weights.
    band_w: Vec<f64>,
    band_mass: Vec<f64>,
    atlas_binning: ParzenBinning,
}

/// Per-band histograms of one evaluation.
pub(crate) struct Histograms {
    /// `n_bands × bins × bins`.
    pub bands: Vec<f64>,
    /// Per-position histograms, `dims[axis] × bins × bins`.
    positions: Vec<f64>,
}

impl SemiCore {
    pub(crate) fn new(
        target: &ScalarVolume,
        target_binning: &ParzenBinning,
        layout: &BandLayout,
        atlas_binning: ParzenBinning,
    ) -> Self {
        let g = target.geometry().clone();
        let nb = layout.n_bands();
        let axis = layout.axis;
        let n_t = g.dims[axis];
        let mut band_w = vec![0.0; n_t * nb];
        for t in 0..n_t {
            let u = g.origin[axis] + t as f64 * g.spacing[axis];
            layout.weights_at(u, &mut band_w[t * nb..(t + 1) * nb]);
        }
        let per_t = g.len() / n_t;
        let band_mass = (0..nb)
            .map(|s| (0..n_t).map(|t| band_w[t * nb + s]).sum::<f64>() * per_t as f64)
            .collect();
        let target_bins = target
            .data()
            .iter()
            .map(|&v| target_binning.weights(v))
            .collect();
        SemiCore {
            geometry: g,
            bins: target_binning.bins,
            n_bands: nb,
            axis,
            target_bins,
            band_w,
            band_mass,
            atlas_binning,
        }
    }

    pub(crate) fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    /// Voxel indices at position `t` along the band axis.
    fn voxels_at(&self, t: usize) -> Box<dyn Iterator<Item = usize> + '_> {
        let [nx, ny, nz] = self.geometry.dims;
        match self.axis {
            0 => Box::new((0..ny * nz).map(move |r| t + nx * r)),
            1 => Box::new((0..nz).flat_map(move |z| (0..nx).map(move |x| x + nx * (t + ny * z)))),
            _ => Box::new((t * nx * ny)..((t + 1) * nx * ny)),
        }
    }

    pub(crate) fn histograms(&self, atlas: &[BinWeights]) -> Histograms {
        let b = self.bins;
        let n_t = self.geometry.dims[self.axis];
        let mut positions = vec![0.0; n_t * b * b];
        positions
            .par_chunks_mut(b * b)
            .enumerate()
            .for_each(|(t, h)| {
                for i in self.voxels_at(t) {
                    let tw = &self.target_bins[i];
                    let aw = &atlas[i];
                    for (k, wk) in tw.iter(b) {
                        let row = &mut h[k * b..(k + 1) * b];
                        for (l, wl) in aw.iter(b) {
                            row[l] += wk * wl;
                        }
                    }
                }
            });
        let nb = self.n_bands;
        let mut bands = vec![0.0; nb * b * b];
        bands.par_chunks_mut(b * b).enumerate().for_each(|(s, hs)| {
            for t in 0..n_t {
                let w = self.band_w[t * nb + s];
                if w == 0.0 {
                    continue;
                }
                for (o, &p) in hs.iter_mut().zip(&positions[t * b * b..(t + 1) * b * b]) {
                    *o += w * p;
                }
            }
        });
        Histograms { bands, positions }
    }

    pub(crate) fn band_histogram(&self, hist: &Histograms, band: usize) -> JointHistogram {
        let b2 = self.bins * self.bins;
        JointHistogram {
            bins: self.bins,
            counts: hist.bands[band * b2..(band + 1) * b2].to_vec(),
        }
    }

    /// Score and, optionally, the derivative of the score with respect to
    /// each voxel's atlas intensity.
    pub(crate) fn score(&self, atlas: &[BinWeights], want_grad: bool) -> (f64, Option<Vec<f64>>) {
        let hist = self.histograms(atlas);
        let b = self.bins;
        let b2 = b * b;
        let nb = self.n_bands;
        let mut score = 0.0;
        let mut tables = Vec::with_capacity(nb);
        for s in 0..nb {
            let mass = self.band_mass[s];
            let (mi, d) = if mass > 1e-12 {
                mutual_information(&hist.bands[s * b2..(s + 1) * b2], b, mass)
            } else {
                (0.0, vec![0.0; b2])
            };
            score += mi;
            tables.push(d);
        }
        drop(hist.positions);
        if !want_grad {
            return (score, None);
        }
        // Blend the per-band derivative tables for each axis position.
        let n_t = self.geometry.dims[self.axis];
        let mut m = vec![0.0; n_t * b2];
        m.par_chunks_mut(b2).enumerate().for_each(|(t, mt)| {
            for s in 0..nb {
                let mass = self.band_mass[s];
                if mass <= 1e-12 {
                    continue;
                }
                let f = self.band_w[t * nb + s] / mass;
                if f == 0.0 {
                    continue;
                }
                for (o, &d) in mt.iter_mut().zip(&tables[s]) {
                    *o += f * d;
                }
            }
        });
        let mut dv = vec![0.0; self.geometry.len()];
        let dims = self.geometry.dims;
        let axis = self.axis;
        dv.par_iter_mut().enumerate().for_each(|(i, out)| {
            let t = match axis {
                0 => i % dims[0],
                1 => (i / dims[0]) % dims[1],
                _ => i / (dims[0] * dims[1]),
            };
            let mt = &m[t * b2..(t + 1) * b2];
            let tw = &self.target_bins[i];
            let aw = &atlas[i];
            let mut acc = 0.0;
            for (k, wk) in tw.iter(b) {
                let row = &mt[k * b..(k + 1) * b];
                let mut inner = 0.0;
                for j in 0..SLOTS {
                    let l = aw.first + j as isize;
                    if aw.dw[j] != 0.0 && l >= 0 && (l as usize) < b {
                        inner += aw.dw[j] * row[l as usize];
                    }
                }
                acc += wk * inner;
            }
            *out = acc;
        });
        (score, Some(dv))
    }

    pub(crate) fn atlas_weights(&self, values: &[f64]) -> Vec<BinWeights> {
        values
            .par_iter()
            .map(|&v| self.atlas_binning.weights(v))
            .collect()
    }
}

fn core_for(target: &ScalarVolume, warped: &ScalarVolume, cfg: &SemiConfig) -> Result<SemiCore> {
    cfg.validate()?;
    target.geometry().check_same(warped.geometry())?;
    let tb = ParzenBinning::for_values(target.data(), cfg.bins, cfg.parzen_width)?;
    let ab = ParzenBinning::for_values(warped.data(), cfg.bins, cfg.parzen_width)?;
    let layout = BandLayout::from_target(target, cfg.n_bands)?;
    Ok(SemiCore::new(target, &tb, &layout, ab))
}

/// Parzen joint histogram of band `band`; both volumes are binned over their
/// own intensity range.
pub fn spatial_joint_histogram(
    target: &ScalarVolume,
    warped_atlas: &ScalarVolume,
    band: usize,
    cfg: &SemiConfig,
) -> Result<JointHistogram> {
    if band >= cfg.n_bands {
        return Err(Error::InvalidParameter(format!(
            "band {band} out of range for {} bands",
            cfg.n_bands
        )));
    }
    let core = core_for(target, warped_atlas, cfg)?;
    let aw = core.atlas_weights(warped_atlas.data());
    Ok(core.band_histogram(&core.histograms(&aw), band))
}

/// Sum over bands of the mutual information between target and atlas.
pub fn semi_score(
    target: &ScalarVolume,
    warped_atlas: &ScalarVolume,
    cfg: &SemiConfig,
) -> Result<f64> {
    let core = core_for(target, warped_atlas, cfg)?;
    let aw = core.atlas_weights(warped_atlas.data());
    Ok(core.score(&aw, false).0)
}

/// The registration objective: SEMI between a fixed target and an atlas
/// sampled (cubic B-spline) at one mapped point per target voxel.
#[derive(Debug, Clone)]
pub struct SemiObjective {
    core: SemiCore,
    atlas: BsplineImage,
}

/// Score and its derivative with respect to every mapped point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub score: f64,
    pub forces: Option<Vec<[f64; 3]>>,
}

impl SemiObjective {
    /// Atlas intensities are binned over the atlas range widened by 20% on
    /// each side, which absorbs spline overshoot at edges.
    pub fn new(target: &ScalarVolume, atlas: &ScalarVolume, cfg: &SemiConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = BandLayout::from_target(target, cfg.n_bands)?;
        let tb = ParzenBinning::for_values(target.data(), cfg.bins, cfg.parzen_width)?;
        Self::with_binning(target, atlas, cfg, &layout, &tb, atlas.range())
    }

    pub(crate) fn with_binning(
        target: &ScalarVolume,
        atlas: &ScalarVolume,
        cfg: &SemiConfig,
        layout: &BandLayout,
        target_binning: &ParzenBinning,
        atlas_range: (f64, f64),
    ) -> Result<Self> {
        let (lo, hi) = atlas_range;
        let margin = 0.2 * (hi - lo);
        let ab = ParzenBinning::new(lo - margin, hi + margin, cfg.bins, cfg.parzen_width)?;
        Ok(SemiObjective {
            core: SemiCore::new(target, target_binning, layout, ab),
            atlas: BsplineImage::new(atlas),
        })
    }

    pub fn target_geometry(&self) -> &Geometry {
        self.core.geometry()
    }

    /// Evaluates the objective for atlas points `points[i]` paired with
    /// target voxel `i`.
    pub fn evaluate(&self, points: &[[f64; 3]], want_forces: bool) -> Result<Evaluation> {
        if points.len() != self.core.geometry().len() {
            return Err(Error::Dimension {
                expected: self.core.geometry().len(),
                found: points.len(),
            });
        }
        let samples: Vec<(f64, [f64; 3])> = points
            .par_iter()
            .map(|&p| {
                if want_forces {
                    self.atlas.sample_grad(p)
                } else {
                    (self.atlas.sample(p), [0.0; 3])
                }
            })
            .collect();
        let values: Vec<f64> = samples.iter().map(|s| s.0).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged("non-finite atlas sample".into()));
        }
        let aw = self.core.atlas_weights(&values);
        let (score, dv) = self.core.score(&aw, want_forces);
        if !score.is_finite() {
            return Err(Error::Diverged(format!("objective evaluated to {score}")));
        }
        let forces = dv.map(|dv| {
            dv.iter()
                .zip(&samples)
                .map(|(&d, (_, g))| [d * g[0], d * g[1], d * g[2]])
                .collect()
        });
        Ok(Evaluation { score, forces })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_weights_partition_unity() {
        let g = Geometry::new([10, 20, 6], [1.0, 1.0, 2.0], [0.0; 3]).unwrap();
        let v = ScalarVolume::from_fn(g, |[x, y, _]| (x * y) as f64).unwrap();
        let layout = BandLayout::from_target(&v, 8).unwrap();
        assert_eq!(layout.axis, 1);
        let mut w = vec![0.0; 8];
        for i in -50..80 {
            layout.weights_at(i as f64 * 0.5, &mut w);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|x| *x >= 0.0));
        }
    }

    #[test]
    fn mi_of_independent_table_is_zero() {
        let h = vec![1.0, 2.0, 3.0, 6.0];
        let (mi, _) = mutual_information(&h, 2, 12.0);
        assert!(mi.abs() < 1e-12);
    }

    #[test]
    fn band_mass_sums_to_voxel_count() {
        let g = Geometry::unit([6, 5, 7]).unwrap();
        let a =
            ScalarVolume::from_fn(g.clone(), |[x, y, z]| ((x + 2 * y + 3 * z) % 5) as f64).unwrap();
        let b = ScalarVolume::from_fn(g, |[x, y, z]| ((3 * x + y + z) % 7) as f64).unwrap();
        let cfg = SemiConfig::default();
        let total: f64 = (0..8)
            .map(|s| spatial_joint_histogram(&a, &b, s, &cfg).unwrap().total())
            .sum();
        assert!((total - 210.0).abs() < 1e-6);
    }
}
