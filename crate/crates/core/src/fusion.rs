//! Label fusion of warped atlases: majority vote (MV), locally weighted
//! voting (LWV), single-scale patch fusion (PF) and multi-scale patch fusion
//! (MSP).
//!
//! Patch similarity is the conditional probability `p(i_x | j_x)` of the
//! target intensity at `x` given the atlas intensity there, estimated from
//! the Parzen joint histogram of the two patches around `x`. With target and
//! atlas bin-weight vectors `u(y)`, `v(y)` this reads
//!
//! ```text
//! S(x) = Σ_y ⟨u(x), u(y)⟩ ⟨v(x), v(y)⟩ / Σ_y ⟨v(x), v(y)⟩
//! ```
//!
//! which is what [`fuse`] evaluates. [`PatchHistogram`] builds the histogram
//! explicitly and serves as the reference.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::metrics::overlap_metrics;
use crate::registration::{BinWeights, ParzenBinning};
use crate::volume::{gaussian_smooth_voxels, Geometry, LabelVolume, ScalarVolume};
use crate::{Error, Result};

/// An atlas already resampled onto the target grid.
#[derive(Debug, Clone)]
pub struct WarpedAtlas {
    pub intensity: ScalarVolume,
    pub labels: LabelVolume,
    pub id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Mv,
    Lwv,
    Pf,
    Msp,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Mv, Strategy::Lwv, Strategy::Pf, Strategy::Msp];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Mv => "mv",
            Strategy::Lwv => "lwv",
            Strategy::Pf => "pf",
            Strategy::Msp => "msp",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mv" => Ok(Strategy::Mv),
            "lwv" => Ok(Strategy::Lwv),
            "pf" => Ok(Strategy::Pf),
            "msp" => Ok(Strategy::Msp),
            _ => Err(Error::InvalidParameter(format!(
                "unknown fusion strategy {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub strategy: Strategy,
    /// Patch half-width in voxels (2 → 5³ patch).
    pub patch_radius: usize,
    /// Gaussian scale-space sigmas in voxels (0 = raw image). PF uses 0 only.
    pub scales: Vec<f64>,
    /// Atlas weight is similarity raised to this power.
    pub sharpness: f64,
    pub bins: usize,
    /// Parzen kernel width in bins.
    pub parzen_width: f64,
    /// Allowed output labels; atlases carrying other labels are rejected.
    pub labels: Option<Vec<u16>>,
    /// LWV intensity bandwidth; `None` = 10% of the target range.
    pub lwv_bandwidth: Option<f64>,
    /// Evaluate scales with sigma ≥ 2 on a 2× decimated grid.
    pub multires: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            strategy: Strategy::Msp,
            patch_radius: 2,
            scales: vec![0.0, 1.0, 2.0],
            sharpness: 2.0,
            bins: 8,
            parzen_width: 1.0,
            labels: None,
            lwv_bandwidth: None,
            multires: false,
        }
    }
}

impl FusionConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        FusionConfig {
            strategy,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::InvalidParameter(
                "fusion needs at least one scale".into(),
            ));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidParameter(
                "scale sigmas must be finite and >= 0".into(),
            ));
        }
        if !(self.sharpness.is_finite() && self.sharpness >= 0.0) {
            return Err(Error::InvalidParameter(
                "sharpness must be finite and >= 0".into(),
            ));
        }
        if let Some(h) = self.lwv_bandwidth {
            if !(h.is_finite() && h > 0.0) {
                return Err(Error::InvalidParameter("LWV bandwidth must be > 0".into()));
            }
        }
        // Checks bins and width together.
        ParzenBinning::new(0.0, 1.0, self.bins, self.parzen_width)?;
        Ok(())
    }

    /// Scale sigmas actually used by the strategy.
    fn active_scales(&self) -> Vec<f64> {
        match self.strategy {
            Strategy::Pf => vec![0.0],
            _ => self.scales.clone(),
        }
    }
}

/// Gaussian scale-space image, `sigma` in voxels on every axis.
pub fn scale_space(vol: &ScalarVolume, sigma: f64) -> Result<ScalarVolume> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!("bad scale sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(vol.clone());
    }
    let data = gaussian_smooth_voxels(vol.data(), vol.geometry(), [sigma; 3]);
    ScalarVolume::new(vol.geometry().clone(), data)
}

/// Compact bin weights (no derivatives).
#[derive(Debug, Clone, Copy)]
struct Kernel {
    first: i32,
    w: [f64; 6],
}

impl From<BinWeights> for Kernel {
    fn from(b: BinWeights) -> Self {
        Kernel {
            first: b.first as i32,
            w: b.w,
        }
    }
}

#[inline]
fn overlap(a: &Kernel, b: &Kernel) -> f64 {
    let d = b.first - a.first;
    if d.abs() >= 6 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..6 {
        let j = i as i32 - d;
        if (0..6).contains(&j) {
            s += a.w[i] * b.w[j as usize];
        }
    }
    s
}

fn kernels(values: &[f64], binning: &ParzenBinning) -> Vec<Kernel> {
    values
        .par_iter()
        .map(|&v| binning.weights(v).into())
        .collect()
}

/// Voxel index ranges `[lo, hi)` of the patch around `c`, clipped to the grid.
#[inline]
fn patch_bounds(dims: [usize; 3], c: [usize; 3], r: usize) -> [(usize, usize); 3] {
    [0, 1, 2].map(|a| (c[a].saturating_sub(r), (c[a] + r + 1).min(dims[a])))
}

/// Closed-form `p(i_x | j_x)` over a clipped patch.
fn similarity_closed(dims: [usize; 3], t: &[Kernel], a: &[Kernel], c: [usize; 3], r: usize) -> f64 {
    let xi = c[0] + dims[0] * (c[1] + dims[1] * c[2]);
    let (tx, ax) = (&t[xi], &a[xi]);
    let b = patch_bounds(dims, c, r);
    let (mut num, mut den) = (0.0, 0.0);
    for z in b[2].0..b[2].1 {
        for y in b[1].0..b[1].1 {
            let row = dims[0] * (y + dims[1] * z);
            for x in b[0].0..b[0].1 {
                let bv = overlap(ax, &a[row + x]);
                if bv != 0.0 {
                    num += overlap(tx, &t[row + x]) * bv;
                    den += bv;
                }
            }
        }
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Parzen joint histogram of a patch pair, normalised to unit mass.
#[derive(Debug, Clone)]
pub struct PatchHistogram {
    bins: usize,
    mass: Vec<f64>,
    samples: usize,
}

impl PatchHistogram {
    pub fn new(bins: usize) -> Self {
        PatchHistogram {
            bins,
            mass: vec![0.0; bins * bins],
            samples: 0,
        }
    }

    /// Adds one sample pair, spreading only over the touched bins.
    pub fn add(&mut self, target: &BinWeights, atlas: &BinWeights) {
        for (k, wt) in target.iter(self.bins) {
            for (l, wa) in atlas.iter(self.bins) {
                self.mass[k * self.bins + l] += wt * wa;
            }
        }
        self.samples += 1;
    }

    /// Accumulates the clipped patch around `centre`.
    pub fn accumulate(
        target: &ScalarVolume,
        atlas: &ScalarVolume,
        centre: [usize; 3],
        radius: usize,
        tb: &ParzenBinning,
        ab: &ParzenBinning,
    ) -> Self {
        let g = target.geometry();
        let mut h = PatchHistogram::new(tb.bins);
        let b = patch_bounds(g.dims, centre, radius);
        for z in b[2].0..b[2].1 {
            for y in b[1].0..b[1].1 {
                for x in b[0].0..b[0].1 {
                    let i = g.index(x, y, z);
                    h.add(&tb.weights(target.data()[i]), &ab.weights(atlas.data()[i]));
                }
            }
        }
        h
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Normalised joint probability of bin pair `(k, l)`.
    pub fn p(&self, k: usize, l: usize) -> f64 {
        self.mass[k * self.bins + l] / self.samples as f64
    }

    /// `p(i | j)` at the Parzen-smoothed intensity pair; 0 when `p(j) = 0`.
    pub fn conditional(&self, i: &BinWeights, j: &BinWeights) -> f64 {
        let (mut joint, mut marg) = (0.0, 0.0);
        for (l, wa) in j.iter(self.bins) {
            let mut col = 0.0;
            for k in 0..self.bins {
                col += self.p(k, l);
            }
            marg += wa * col;
            for (k, wt) in i.iter(self.bins) {
                joint += wt * wa * self.p(k, l);
            }
        }
        if marg > 0.0 {
            joint / marg
        } else {
            0.0
        }
    }
}

/// Binning settings for [`local_similarity`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityBins {
    pub bins: usize,
    pub parzen_width: f64,
}

impl Default for SimilarityBins {
    fn default() -> Self {
        SimilarityBins {
            bins: 8,
            parzen_width: 1.0,
        }
    }
}

fn binning_pair(
    target: &ScalarVolume,
    atlas: &ScalarVolume,
    bins: usize,
    width: f64,
) -> Result<(ParzenBinning, ParzenBinning)> {
    Ok((
        ParzenBinning::for_values(target.data(), bins, width)?,
        ParzenBinning::for_values(atlas.data(), bins, width)?,
    ))
}

/// `p(i_x | j_x)` from the Parzen joint histogram of the patches around `x`
/// (clipped at the grid edge). Intensities are binned over each image's
/// full range.
pub fn local_similarity(
    target_s: &ScalarVolume,
    atlas_s: &ScalarVolume,
    x: [usize; 3],
    radius: usize,
    bins: SimilarityBins,
) -> Result<f64> {
    target_s.geometry().check_same(atlas_s.geometry())?;
    let g = target_s.geometry();
    if (0..3).any(|a| x[a] >= g.dims[a]) {
        return Err(Error::InvalidParameter(format!(
            "voxel {x:?} outside the grid"
        )));
    }
    let (tb, ab) = binning_pair(target_s, atlas_s, bins.bins, bins.parzen_width)?;
    let h = PatchHistogram::accumulate(target_s, atlas_s, x, radius, &tb, &ab);
    let i = g.index(x[0], x[1], x[2]);
    Ok(h.conditional(
        &tb.weights(target_s.data()[i]),
        &ab.weights(atlas_s.data()[i]),
    ))
}

/// Sum of [`local_similarity`] over the configured scales.
pub fn msp_similarity(
    target: &ScalarVolume,
    atlas: &ScalarVolume,
    x: [usize; 3],
    cfg: &FusionConfig,
) -> Result<f64> {
    cfg.validate()?;
    let bins = SimilarityBins {
        bins: cfg.bins,
        parzen_width: cfg.parzen_width,
    };
    let mut s = 0.0;
    for &sigma in &cfg.scales {
        let (t, a) = (scale_space(target, sigma)?, scale_space(atlas, sigma)?);
        s += local_similarity(&t, &a, x, cfg.patch_radius, bins)?;
    }
    Ok(s)
}

/// Weighted vote: label with the largest weight mass, ties to the lowest
/// label id. Masses are summed in a canonical order so the result does not
/// depend on the order of the voters.
pub fn vote(labels: &[u16], weights: &[f64]) -> u16 {
    let mut pairs: Vec<(u16, f64)> = labels
        .iter()
        .copied()
        .zip(weights.iter().copied())
        .collect();
    pairs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut best = (pairs[0].0, f64::NEG_INFINITY);
    let mut i = 0;
    while i < pairs.len() {
        let l = pairs[i].0;
        let mut mass = 0.0;
        while i < pairs.len() && pairs[i].0 == l {
            mass += pairs[i].1;
            i += 1;
        }
        if mass > best.1 {
            best = (l, mass);
        }
    }
    best.0
}

/// Atlas weight for a similarity value.
#[inline]
fn weight_of(s: f64, sharpness: f64) -> f64 {
    if sharpness == 0.0 {
        1.0
    } else {
        s.max(0.0).powf(sharpness)
    }
}

fn check_inputs(target: &ScalarVolume, atlases: &[WarpedAtlas], cfg: &FusionConfig) -> Result<()> {
    cfg.validate()?;
    if atlases.is_empty() {
        return Err(Error::Empty("label fusion needs at least one atlas".into()));
    }
    for a in atlases {
        target.geometry().check_same(a.intensity.geometry())?;
        target.geometry().check_same(a.labels.geometry())?;
        if let Some(allowed) = &cfg.labels {
            if let Some(&bad) = a
                .labels
                .present_labels()
                .iter()
                .find(|l| !allowed.contains(l))
            {
                return Err(Error::UnknownLabel(bad));
            }
        }
    }
    Ok(())
}

fn merged_table(atlases: &[WarpedAtlas]) -> BTreeMap<u16, String> {
    let mut t = BTreeMap::new();
    for a in atlases {
        for (id, name) in a.labels.label_table() {
            t.entry(*id).or_insert_with(|| name.clone());
        }
    }
    t
}

/// Decimates by 2 on every axis with more than one voxel.
fn decimate(vol: &ScalarVolume) -> Result<ScalarVolume> {
    let g = vol.geometry();
    let f = g.dims.map(|d| if d > 1 { 2 } else { 1 });
    let dims = [0, 1, 2].map(|a| g.dims[a].div_ceil(f[a]));
    let spacing = [0, 1, 2].map(|a| g.spacing[a] * f[a] as f64);
    let cg = Geometry::new(dims, spacing, g.origin)?;
    ScalarVolume::from_fn(cg, |c| vol.get(c[0] * f[0], c[1] * f[1], c[2] * f[2]))
}

/// Per-atlas similarity at each listed voxel, summed over scales.
fn patch_similarities(
    target: &ScalarVolume,
    atlas: &ScalarVolume,
    voxels: &[usize],
    cfg: &FusionConfig,
) -> Result<Vec<f64>> {
    let g = target.geometry();
    let mut total = vec![0.0; voxels.len()];
    for sigma in cfg.active_scales() {
        let (mut t, mut a) = (scale_space(target, sigma)?, scale_space(atlas, sigma)?);
        let coarse = cfg.multires && sigma >= 2.0;
        if coarse {
            t = decimate(&t)?;
            a = decimate(&a)?;
        }
        let (tb, ab) = binning_pair(&t, &a, cfg.bins, cfg.parzen_width)?;
        let tk = kernels(t.data(), &tb);
        let ak = kernels(a.data(), &ab);
        let dims = t.geometry().dims;
        total.par_iter_mut().zip(voxels).for_each(|(acc, &i)| {
            let mut c = g.coords(i);
            if coarse {
                c = [0, 1, 2].map(|k| (c[k] * dims[k] / g.dims[k]).min(dims[k] - 1));
            }
            *acc += similarity_closed(dims, &tk, &ak, c, cfg.patch_radius);
        });
    }
    Ok(total)
}

/// `exp(-MSD / 2h²)` between the raw intensity patches.
fn lwv_similarities(
    target: &ScalarVolume,
    atlas: &ScalarVolume,
    voxels: &[usize],
    radius: usize,
    h: f64,
) -> Vec<f64> {
    let g = target.geometry();
    let (t, a) = (target.data(), atlas.data());
    voxels
        .par_iter()
        .map(|&i| {
            let b = patch_bounds(g.dims, g.coords(i), radius);
            let (mut ssd, mut n) = (0.0, 0usize);
            for z in b[2].0..b[2].1 {
                for y in b[1].0..b[1].1 {
                    for x in b[0].0..b[0].1 {
                        let j = g.index(x, y, z);
                        ssd += (t[j] - a[j]) * (t[j] - a[j]);
                        n += 1;
                    }
                }
            }
            (-(ssd / n as f64) / (2.0 * h * h)).exp()
        })
        .collect()
}

/// Default LWV bandwidth: a tenth of the target intensity range.
fn lwv_bandwidth(target: &ScalarVolume, cfg: &FusionConfig) -> f64 {
    cfg.lwv_bandwidth.unwrap_or_else(|| {
        let (lo, hi) = target.range();
        let h = 0.1 * (hi - lo);
        if h > 0.0 {
            h
        } else {
            1.0
        }
    })
}

/// Per-atlas similarity of each listed voxel under the configured strategy.
/// MV yields all ones.
pub fn atlas_similarities(
    target: &ScalarVolume,
    atlases: &[WarpedAtlas],
    voxels: &[usize],
    cfg: &FusionConfig,
) -> Result<Vec<Vec<f64>>> {
    check_inputs(target, atlases, cfg)?;
    let h = lwv_bandwidth(target, cfg);
    atlases
        .iter()
        .map(|a| match cfg.strategy {
            Strategy::Mv => Ok(vec![1.0; voxels.len()]),
            Strategy::Lwv => Ok(lwv_similarities(
                target,
                &a.intensity,
                voxels,
                cfg.patch_radius,
                h,
            )),
            Strategy::Pf | Strategy::Msp => patch_similarities(target, &a.intensity, voxels, cfg),
        })
        .collect()
}

/// Fuses the atlases' labels onto the target grid.
///
/// Voxels where every atlas agrees take that label directly; elsewhere each
/// atlas votes with weight `S^sharpness`. If every weight is zero the voxel
/// falls back to an unweighted vote.
pub fn fuse(
    target: &ScalarVolume,
    atlases: &[WarpedAtlas],
    cfg: &FusionConfig,
) -> Result<LabelVolume> {
    check_inputs(target, atlases, cfg)?;
    let g = target.geometry();
    let first = atlases[0].labels.data();
    let mut out = first.to_vec();
    let contested: Vec<usize> = (0..g.len())
        .into_par_iter()
        .filter(|&i| atlases[1..].iter().any(|a| a.labels.data()[i] != first[i]))
        .collect();
    if !contested.is_empty() {
        let sims = atlas_similarities(target, atlases, &contested, cfg)?;
        let fused: Vec<u16> = contested
            .par_iter()
            .enumerate()
            .map(|(j, &i)| {
                let labels: Vec<u16> = atlases.iter().map(|a| a.labels.data()[i]).collect();
                let mut w: Vec<f64> = sims
                    .iter()
                    .map(|s| weight_of(s[j], cfg.sharpness))
                    .collect();
                if w.iter().all(|&v| v == 0.0) {
                    w.iter_mut().for_each(|v| *v = 1.0);
                }
                vote(&labels, &w)
            })
            .collect();
        for (&i, l) in contested.iter().zip(fused) {
            out[i] = l;
        }
    }
    LabelVolume::new(g.clone(), out, merged_table(atlases))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiceRow {
    pub strategy: Strategy,
    pub label: u16,
    pub dice: f64,
}

/// Dice of each strategy's fused result against `truth`, per foreground
/// label of `truth`.
pub fn compare_strategies(
    target: &ScalarVolume,
    truth: &LabelVolume,
    atlases: &[WarpedAtlas],
    strategies: &[Strategy],
    base: &FusionConfig,
) -> Result<Vec<DiceRow>> {
    target.geometry().check_same(truth.geometry())?;
    let labels: Vec<u16> = truth
        .present_labels()
        .into_iter()
        .filter(|&l| l != 0)
        .collect();
    let mut rows = Vec::new();
    for &strategy in strategies {
        let cfg = FusionConfig {
            strategy,
            ..base.clone()
        };
        let fused = fuse(target, atlases, &cfg)?;
        for &label in &labels {
            let r = overlap_metrics(&fused.mask_of(&[label]), &truth.mask_of(&[label]))?;
            rows.push(DiceRow {
                strategy,
                label,
                dice: r.dice,
            });
        }
    }
    Ok(rows)
}

pub fn dice_table_csv(rows: &[DiceRow]) -> String {
    let mut s = String::from("strategy,label,dice\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.strategy, r.label, r.dice));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_matches_dense_dot() {
        let b = ParzenBinning::new(0.0, 10.0, 16, 1.0).unwrap();
        for (u, v) in [(1.0, 1.3), (2.0, 7.0), (5.0, 5.4), (0.0, 10.0)] {
            let (wu, wv) = (b.weights(u), b.weights(v));
            let mut du = [0.0; 16];
            let mut dv = [0.0; 16];
            wu.iter(16).for_each(|(k, w)| du[k] = w);
            wv.iter(16).for_each(|(k, w)| dv[k] = w);
            let dense: f64 = du.iter().zip(&dv).map(|(a, b)| a * b).sum();
            assert!((overlap(&wu.into(), &wv.into()) - dense).abs() < 1e-15);
        }
    }

    #[test]
    fn vote_breaks_ties_low() {
        assert_eq!(vote(&[1, 1, 0], &[1.0, 1.0, 1.0]), 1);
        assert_eq!(vote(&[3, 2], &[0.5, 0.5]), 2);
        assert_eq!(vote(&[5, 2, 5], &[0.2, 0.5, 0.3]), 2);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert!("jlf".parse::<Strategy>().is_err());
    }
}
