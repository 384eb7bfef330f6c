//! Segmentation evaluation: overlap ratios, voxel-surface distances,
//! fibrosis extent and Bland-Altman agreement.
//!
//! Surfaces are voxel centres with at least one 6-neighbour outside the
//! mask (off-grid neighbours count as outside), in physical millimetres.

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use rayon::prelude::*;
use serde::Serialize;

use crate::volume::Mask;
use crate::{Error, Result};

/// Conventions applied where a metric is 0/0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricFlag {
    /// Both masks empty: Dice, Jaccard set to 1.
    BothEmpty,
    /// Automatic mask empty: precision set to 1.
    PrecisionUndefined,
    /// Automatic mask covers the grid: NPV set to 1.
    NpvUndefined,
    /// One mask empty: surface distances not computed.
    NoSurface,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn of(auto: &Mask, manual: &Mask) -> Result<Confusion> {
        auto.geometry().check_same(manual.geometry())?;
        let mut c = Confusion::default();
        for (&a, &m) in auto.data().iter().zip(manual.data()) {
            match (a, m) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub dice: f64,
    pub jaccard: f64,
    pub precision: f64,
    pub npv: f64,
    /// mm; `None` when either mask is empty.
    pub hausdorff: Option<f64>,
    pub asd: Option<f64>,
    pub counts: Confusion,
    pub flags: Vec<MetricFlag>,
}

fn ratio(num: usize, den: usize, flag: MetricFlag, flags: &mut Vec<MetricFlag>) -> f64 {
    if den == 0 {
        flags.push(flag);
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Dice, Jaccard, precision and NPV. Distances are left unset.
pub fn overlap_metrics(auto: &Mask, manual: &Mask) -> Result<MetricReport> {
    let c = Confusion::of(auto, manual)?;
    let mut flags = Vec::new();
    let n_auto = c.tp + c.fp;
    let n_manual = c.tp + c.fn_;
    let (dice, jaccard) = if n_auto + n_manual == 0 {
        flags.push(MetricFlag::BothEmpty);
        (1.0, 1.0)
    } else {
        let d = 2.0 * c.tp as f64 / (n_auto + n_manual) as f64;
        let j = c.tp as f64 / (c.tp + c.fp + c.fn_) as f64;
        (d, j)
    };
    let precision = ratio(c.tp, n_auto, MetricFlag::PrecisionUndefined, &mut flags);
    // NPV = (T - |M ∪ A|) / (T - |A|)
    let npv = ratio(
        c.tn,
        c.total() - n_auto,
        MetricFlag::NpvUndefined,
        &mut flags,
    );
    Ok(MetricReport {
        dice,
        jaccard,
        precision,
        npv,
        hausdorff: None,
        asd: None,
        counts: c,
        flags,
    })
}

/// All six metrics. Distances are `None` (and flagged) when a mask is empty.
pub fn evaluate(auto: &Mask, manual: &Mask) -> Result<MetricReport> {
    let mut r = overlap_metrics(auto, manual)?;
    if auto.is_empty() || manual.is_empty() {
        r.flags.push(MetricFlag::NoSurface);
        return Ok(r);
    }
    let sa = surface_points(auto)?;
    let sm = surface_points(manual)?;
    let d_am = directed_distances(&sa, &sm);
    let d_ma = directed_distances(&sm, &sa);
    r.hausdorff = Some(max_of(&d_am).max(max_of(&d_ma)));
    r.asd = Some((mean_of(&d_am) + mean_of(&d_ma)) / 2.0);
    Ok(r)
}

/// Centres (mm) of mask voxels with a 6-neighbour outside the mask, in
/// ascending voxel order.
pub fn surface_points(mask: &Mask) -> Result<Vec<[f64; 3]>> {
    if mask.is_empty() {
        return Err(Error::Empty("surface of an empty mask".into()));
    }
    let g = mask.geometry();
    let data = mask.data();
    let inside = |x: isize, y: isize, z: isize| g.checked_index(x, y, z).is_some_and(|i| data[i]);
    Ok(mask
        .indices()
        .into_iter()
        .filter(|&i| {
            let [x, y, z] = g.coords(i).map(|c| c as isize);
            !(inside(x - 1, y, z)
                && inside(x + 1, y, z)
                && inside(x, y - 1, z)
                && inside(x, y + 1, z)
                && inside(x, y, z - 1)
                && inside(x, y, z + 1))
        })
        .map(|i| g.physical_of_index(i))
        .collect())
}

#[inline]
fn dist_sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// For every point of `from`, the distance to the closest point of `to`.
///
/// The tree only proposes candidates; distances are recomputed here so the
/// result does not depend on the tree's arithmetic.
fn directed_distances(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    let tree: ImmutableKdTree<f64, 3> =
        ImmutableKdTree::new_from_slice(to).expect("non-empty point set");
    from.par_iter()
        .map(|p| {
            let hit = tree
                .query(p)
                .nearest_one::<SquaredEuclidean<f64>>()
                .execute();
            let d2 = dist_sq(p, &to[hit.item as usize]);
            // Equidistant candidates can round differently; take the exact
            // minimum over everything the tree considers tied.
            let reach = d2 * (1.0 + 1e-9) + 1e-12;
            let best = tree
                .query(p)
                .within::<SquaredEuclidean<f64>>(reach)
                .unsorted()
                .execute()
                .into_iter()
                .map(|n| dist_sq(p, &to[n.item as usize]))
                .fold(d2, f64::min);
            best.sqrt()
        })
        .collect()
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_sets(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty(
            "surface distance needs two non-empty point sets".into(),
        ));
    }
    if a.iter().chain(b).flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite surface point".into()));
    }
    Ok(())
}

/// Symmetric Hausdorff distance between two point sets.
pub fn hausdorff(auto: &[[f64; 3]], manual: &[[f64; 3]]) -> Result<f64> {
    check_sets(auto, manual)?;
    Ok(max_of(&directed_distances(auto, manual)).max(max_of(&directed_distances(manual, auto))))
}

/// Mean of the two directed mean closest-point distances.
pub fn asd(auto: &[[f64; 3]], manual: &[[f64; 3]]) -> Result<f64> {
    check_sets(auto, manual)?;
    Ok(
        (mean_of(&directed_distances(auto, manual)) + mean_of(&directed_distances(manual, auto)))
            / 2.0,
    )
}

/// Fibrosis extent: scar volume inside the wall as a percentage of wall
/// volume.
pub fn fep(scar: &Mask, wall: &Mask) -> Result<f64> {
    scar.geometry().check_same(wall.geometry())?;
    let n_wall = wall.count();
    if n_wall == 0 {
        return Err(Error::Empty(
            "fibrosis extent needs a non-empty wall".into(),
        ));
    }
    let n_scar = scar
        .data()
        .iter()
        .zip(wall.data())
        .filter(|(&s, &w)| s && w)
        .count();
    let vv = scar.geometry().voxel_volume();
    Ok(100.0 * (n_scar as f64 * vv) / (n_wall as f64 * vv))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlandAltman {
    pub bias: f64,
    /// Sample standard deviation of the differences.
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    /// Per case `(mean, difference)`.
    pub points: Vec<(f64, f64)>,
}

impl BlandAltman {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mean,diff\n");
        for (m, d) in &self.points {
            s.push_str(&format!("{m},{d}\n"));
        }
        s
    }
}

pub fn bland_altman(pairs: &[(f64, f64)]) -> Result<BlandAltman> {
    if pairs.len() < 2 {
        return Err(Error::Empty("Bland-Altman needs at least two pairs".into()));
    }
    if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(Error::InvalidParameter(
            "non-finite Bland-Altman value".into(),
        ));
    }
    let n = pairs.len() as f64;
    let points: Vec<(f64, f64)> = pairs.iter().map(|&(a, b)| ((a + b) / 2.0, a - b)).collect();
    let bias = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sd = (points.iter().map(|p| (p.1 - bias).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(BlandAltman {
        bias,
        sd,
        lower: bias - 1.96 * sd,
        upper: bias + 1.96 * sd,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn mask(dims: [usize; 3], on: &[[usize; 3]]) -> Mask {
        let g = Geometry::unit(dims).unwrap();
        let mut m = Mask::empty(g.clone());
        for c in on {
            m.data_mut()[g.index(c[0], c[1], c[2])] = true;
        }
        m
    }

    #[test]
    fn subset_overlap() {
        let all: Vec<[usize; 3]> = (0..8).map(|i| [i % 4, i / 4, 0]).collect();
        let manual = mask([4, 4, 1], &all);
        let auto = mask([4, 4, 1], &all[..4]);
        let r = overlap_metrics(&auto, &manual).unwrap();
        assert!((r.dice - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.jaccard - 0.5).abs() < 1e-15);
        assert_eq!(r.precision, 1.0);
        assert!(r.flags.is_empty());
    }

    #[test]
    fn both_empty_is_flagged() {
        let e = mask([3, 3, 3], &[]);
        let r = overlap_metrics(&e, &e).unwrap();
        assert_eq!((r.dice, r.jaccard), (1.0, 1.0));
        assert!(r.flags.contains(&MetricFlag::BothEmpty));
        assert!(r.flags.contains(&MetricFlag::PrecisionUndefined));
    }

    #[test]
    fn point_set_arithmetic() {
        assert_eq!(hausdorff(&[[0.0; 3]], &[[3.0, 4.0, 0.0]]).unwrap(), 5.0);
        assert_eq!(asd(&[[0.0; 3], [2.0, 0.0, 0.0]], &[[0.0; 3]]).unwrap(), 0.5);
        assert!(hausdorff(&[], &[[0.0; 3]]).is_err());
    }

    #[test]
    fn cube_surface() {
        let cube: Vec<[usize; 3]> = (0..27)
            .map(|i| [1 + i % 3, 1 + (i / 3) % 3, 1 + i / 9])
            .collect();
        let m = mask([5, 5, 5], &cube);
        assert_eq!(surface_points(&m).unwrap().len(), 26);
        let one = mask([5, 5, 5], &[[2, 3, 4]]);
        assert_eq!(surface_points(&one).unwrap(), vec![[2.0, 3.0, 4.0]]);
    }

    #[test]
    fn bland_altman_arithmetic() {
        let b = bland_altman(&[(1.0, 0.0), (0.0, 1.0)]).unwrap();
        assert_eq!(b.bias, 0.0);
        assert!((b.sd - 2f64.sqrt()).abs() < 1e-15);
        assert!((b.upper - 1.96 * 2f64.sqrt()).abs() < 1e-15);
        assert!(bland_altman(&[(1.0, 1.0)]).is_err());
    }
}
