//! Superpixel intensity statistics and mRMR feature selection.
//!
//! Each superpixel that overlaps the atrial wall is described by 16
//! first-order statistics of its (blood-pool normalised) intensities. The
//! mutual-information quotient (MIQ) variant of mRMR then ranks them:
//! relevance is MI with the enhanced/non-enhanced class, redundancy the mean
//! MI with the features already chosen.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::superpixel::{mask_slice, SuperpixelMap};
use crate::volume::{Mask, ScalarVolume};
use crate::{Error, Result};

pub const FEATURE_NAMES: [&str; 16] = [
    "min", "max", "mean", "median", "std", "variance", "range", "iqr", "p10", "p25", "p75", "p90",
    "skewness", "kurtosis", "energy", "entropy",
];

pub const N_FEATURES: usize = FEATURE_NAMES.len();

/// Bins used to discretise a feature for mutual information.
pub const MI_BINS: usize = 8;

/// Histogram bins for the per-superpixel entropy feature.
const ENTROPY_BINS: usize = 16;

/// Default minimum wall overlap for a superpixel to be described.
pub const WALL_OVERLAP: f64 = 0.2;

pub fn feature_index(name: &str) -> Option<usize> {
    FEATURE_NAMES.iter().position(|&n| n == name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub slice: usize,
    pub sp_id: u32,
    pub count: usize,
    pub values: [f64; N_FEATURES],
    /// Fewer than two pixels: spread statistics were set to zero.
    pub degenerate: bool,
}

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        feature_index(name).map(|i| self.values[i])
    }
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// The 16 statistics of a non-empty set of intensities.
pub fn intensity_features(values: &[f64]) -> Result<([f64; N_FEATURES], bool)> {
    if values.is_empty() {
        return Err(Error::Empty("no pixels to describe".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite intensity".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in &s {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    let degenerate = s.len() < 2;
    let var = if degenerate { 0.0 } else { m2 };
    let (skew, kurt) = if var > 0.0 {
        (m3 / var.powf(1.5), m4 / (var * var))
    } else {
        (0.0, 0.0)
    };
    let (min, max) = (s[0], s[s.len() - 1]);
    let entropy = if max > min {
        let mut hist = [0usize; ENTROPY_BINS];
        let w = (max - min) / ENTROPY_BINS as f64;
        for &v in &s {
            hist[(((v - min) / w) as usize).min(ENTROPY_BINS - 1)] += 1;
        }
        -hist
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                p * p.ln()
            })
            .sum::<f64>()
    } else {
        0.0
    };
    let (p25, p75) = (percentile(&s, 0.25), percentile(&s, 0.75));
    Ok((
        [
            min,
            max,
            mean,
            percentile(&s, 0.5),
            var.sqrt(),
            var,
            max - min,
            p75 - p25,
            percentile(&s, 0.1),
            p25,
            p75,
            percentile(&s, 0.9),
            skew,
            kurt,
            s.iter().map(|v| v * v).sum::<f64>() / n,
            entropy,
        ],
        degenerate,
    ))
}

/// Features of every superpixel at least `ratio` of which is wall.
pub fn extract_features(
    volume: &ScalarVolume,
    maps: &[SuperpixelMap],
    wall: &Mask,
    ratio: f64,
) -> Result<Vec<FeatureVector>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "overlap ratio {ratio} not in (0, 1]"
        )));
    }
    let g = volume.geometry();
    if wall.geometry() != g {
        return Err(Error::GeometryMismatch);
    }
    if maps.len() != g.dims[2] {
        return Err(Error::Dimension {
            expected: g.dims[2],
            found: maps.len(),
        });
    }
    let per_slice: Vec<Result<Vec<FeatureVector>>> = maps
        .par_iter()
        .enumerate()
        .map(|(z, map)| {
            if map.width != g.dims[0] || map.height != g.dims[1] {
                return Err(Error::GeometryMismatch);
            }
            let img = volume.slice(z);
            let w = mask_slice(wall, z);
            let mut out = Vec::new();
            for (id, pix) in map.members().into_iter().enumerate() {
                if pix.is_empty() {
                    continue;
                }
                let inside = pix.iter().filter(|&&i| w[i]).count();
                if (inside as f64) < ratio * pix.len() as f64 {
                    continue;
                }
                let vals: Vec<f64> = pix.iter().map(|&i| img[i]).collect();
                let (values, degenerate) = intensity_features(&vals)?;
                out.push(FeatureVector {
                    slice: z,
                    sp_id: id as u32,
                    count: pix.len(),
                    values,
                    degenerate,
                });
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for s in per_slice {
        all.extend(s?);
    }
    Ok(all)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub patient: String,
    pub slice: usize,
    pub sp_id: u32,
    pub enhanced: bool,
    pub x: Vec<f64>,
}

/// Feature rows with class and patient id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub names: Vec<String>,
    pub rows: Vec<Sample>,
}

impl LabeledDataset {
    pub fn new(names: Vec<String>) -> Self {
        LabeledDataset {
            names,
            rows: Vec::new(),
        }
    }

    pub fn with_standard_names() -> Self {
        Self::new(FEATURE_NAMES.iter().map(|s| s.to_string()).collect())
    }

    pub fn push(&mut self, s: Sample) -> Result<()> {
        if s.x.len() != self.names.len() {
            return Err(Error::Dimension {
                expected: self.names.len(),
                found: s.x.len(),
            });
        }
        if s.patient.is_empty() {
            return Err(Error::InvalidParameter("row without patient id".into()));
        }
        if s.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite feature".into()));
        }
        self.rows.push(s);
        Ok(())
    }

    /// Appends a patient's feature vectors, class taken from `enhanced`.
    pub fn extend_patient(
        &mut self,
        patient: &str,
        features: &[FeatureVector],
        enhanced: impl Fn(&FeatureVector) -> bool,
    ) -> Result<()> {
        for f in features {
            self.push(Sample {
                patient: patient.to_string(),
                slice: f.slice,
                sp_id: f.sp_id,
                enhanced: enhanced(f),
                x: f.values.to_vec(),
            })?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.x[j]).collect()
    }

    pub fn classes(&self) -> Vec<bool> {
        self.rows.iter().map(|r| r.enhanced).collect()
    }

    pub fn n_enhanced(&self) -> usize {
        self.rows.iter().filter(|r| r.enhanced).count()
    }

    pub fn has_both_classes(&self) -> bool {
        let k = self.n_enhanced();
        k > 0 && k < self.len()
    }

    /// Sorted distinct patient ids.
    pub fn patients(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| r.patient.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            names: self.names.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Keeps only the named columns, in the given order.
    pub fn select(&self, names: &[&str]) -> Result<LabeledDataset> {
        let cols = names
            .iter()
            .map(|n| {
                self.names
                    .iter()
                    .position(|m| m == n)
                    .ok_or_else(|| Error::InvalidParameter(format!("unknown feature {n:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledDataset {
            names: names.iter().map(|s| s.to_string()).collect(),
            rows: self
                .rows
                .iter()
                .map(|r| Sample {
                    x: cols.iter().map(|&j| r.x[j]).collect(),
                    ..r.clone()
                })
                .collect(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["patient", "slice", "sp_id", "class"];
        header.extend(self.names.iter().map(String::as_str));
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![
                r.patient.clone(),
                r.slice.to_string(),
                r.sp_id.to_string(),
                if r.enhanced {
                    "enhanced"
                } else {
                    "non_enhanced"
                }
                .to_string(),
            ];
            rec.extend(r.x.iter().map(|v| v.to_string()));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    pub fn from_csv(text: &str) -> Result<LabeledDataset> {
        let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let header = r
            .headers()
            .map_err(|e| Error::parse(1, e.to_string()))?
            .clone();
        let fixed = ["patient", "slice", "sp_id", "class"];
        if header.len() < 5 || header.iter().take(4).ne(fixed) {
            return Err(Error::parse(
                1,
                "header must start with patient,slice,sp_id,class and name at least one feature",
            ));
        }
        let names: Vec<String> = header.iter().skip(4).map(str::to_string).collect();
        let mut ds = LabeledDataset::new(names);
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::parse(line, e.to_string()))?;
            if rec.len() != header.len() {
                return Err(Error::parse(line, "wrong number of fields"));
            }
            let enhanced = match &rec[3] {
                "enhanced" | "1" => true,
                "non_enhanced" | "0" => false,
                other => return Err(Error::parse(line, format!("bad class {other:?}"))),
            };
            let x = rec
                .iter()
                .skip(4)
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(line, e.to_string()))?;
            let sample = Sample {
                patient: rec[0].to_string(),
                slice: rec[1]
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(line, "bad slice"))?,
                sp_id: rec[2]
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(line, "bad sp_id"))?,
                enhanced,
                x,
            };
            ds.push(sample)
                .map_err(|e| Error::parse(line, e.to_string()))?;
        }
        Ok(ds)
    }
}

/// Equal-frequency bin index per sample. Equal values share the bin of
/// their first sorted occurrence, so a constant column is a single bin.
pub fn discretize(values: &[f64], bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut out = vec![0; n];
    let mut run_bin = 0;
    for (rank, &i) in order.iter().enumerate() {
        if rank == 0 || values[i] != values[order[rank - 1]] {
            run_bin = rank * bins / n;
        }
        out[i] = run_bin;
    }
    out
}

/// Plug-in mutual information (nats) between two discrete variables.
pub fn discrete_mi(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut pa: BTreeMap<usize, usize> = BTreeMap::new();
    let mut pb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *pa.entry(x).or_default() += 1;
        *pb.entry(y).or_default() += 1;
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            pxy * (pxy * n * n / (pa[&x] as f64 * pb[&y] as f64)).ln()
        })
        .sum();
    mi.max(0.0)
}

/// MI between a feature column and the binary class.
pub fn mutual_information(feature: &[f64], class: &[bool], bins: usize) -> Result<f64> {
    if feature.len() != class.len() {
        return Err(Error::Dimension {
            expected: class.len(),
            found: feature.len(),
        });
    }
    if feature.len() < 2 {
        return Err(Error::Empty("mutual information needs two samples".into()));
    }
    if bins < 2 {
        return Err(Error::InvalidParameter("need at least 2 bins".into()));
    }
    let c: Vec<usize> = class.iter().map(|&b| b as usize).collect();
    Ok(discrete_mi(&discretize(feature, bins), &c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrmrPick {
    pub index: usize,
    pub name: String,
    pub relevance: f64,
    /// Relevance for the first pick, the MIQ quotient afterwards.
    pub score: f64,
}

/// Greedy MIQ selection of `k` features. Ties go to the lexically smaller
/// feature name; a candidate whose discretisation duplicates a chosen one
/// scores zero.
pub fn mrmr_select(ds: &LabeledDataset, k: usize) -> Result<Vec<MrmrPick>> {
    let d = ds.dim();
    if k == 0 || k > d {
        return Err(Error::InvalidParameter(format!(
            "k = {k} must be in 1..={d}"
        )));
    }
    if !ds.has_both_classes() {
        return Err(Error::Degenerate(
            "feature selection needs both classes".into(),
        ));
    }
    let class: Vec<usize> = ds.classes().iter().map(|&b| b as usize).collect();
    let disc: Vec<Vec<usize>> = (0..d).map(|j| discretize(&ds.column(j), MI_BINS)).collect();
    let rel: Vec<f64> = disc.iter().map(|c| discrete_mi(c, &class)).collect();
    let mut redundancy = vec![0.0; d];
    let mut picks: Vec<MrmrPick> = Vec::with_capacity(k);
    let mut chosen = vec![false; d];
    for step in 0..k {
        let score = |j: usize| -> f64 {
            if step == 0 {
                return rel[j];
            }
            if picks.iter().any(|p| disc[p.index] == disc[j]) {
                return 0.0;
            }
            rel[j] / (redundancy[j] / step as f64).max(1e-12)
        };
        let best = (0..d)
            .filter(|&j| !chosen[j])
            .map(|j| (j, score(j)))
            .reduce(|a, b| {
                if b.1 > a.1 || (b.1 == a.1 && ds.names[b.0] < ds.names[a.0]) {
                    b
                } else {
                    a
                }
            })
            .expect("k <= d leaves a candidate");
        chosen[best.0] = true;
        for j in 0..d {
            if !chosen[j] {
                redundancy[j] += discrete_mi(&disc[j], &disc[best.0]);
            }
        }
        picks.push(MrmrPick {
            index: best.0,
            name: ds.names[best.0].clone(),
            relevance: rel[best.0],
            score: best.1,
        });
    }
    Ok(picks)
}
