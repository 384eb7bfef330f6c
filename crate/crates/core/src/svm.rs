//! Soft-margin RBF SVM trained by SMO, with grid search and the validation
//! protocols used to score superpixel classification.
//!
//! The solver follows the usual decomposition scheme: each step picks a
//! maximal-violating `i` and, among the other violators, the `j` giving the
//! largest second-order decrease of the dual objective, then solves the
//! two-variable subproblem analytically. It stops once the KKT gap
//! `max_{I_up} -y G - min_{I_low} -y G` drops below `tol`.
//!
//! Features are z-scored with statistics frozen at training time; support
//! vectors are stored standardised.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::LabeledDataset;
use crate::{Error, Result};

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    /// Box constraint.
    pub rho: f64,
    /// RBF kernel scale.
    pub gamma: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Kernel row cache budget.
    pub cache_mb: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            rho: 2f64.powf(8.5),
            gamma: 2f64.powf(2.5),
            tol: 1e-3,
            max_iter: 100_000,
            cache_mb: 200,
        }
    }
}

impl SvmParams {
    pub fn new(rho: f64, gamma: f64) -> Self {
        SvmParams {
            rho,
            gamma,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "box constraint {} must be positive",
                self.rho
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kernel scale {} must be positive",
                self.gamma
            )));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidParameter(
                "tolerance and iteration cap must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn rbf(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub gamma: f64,
    pub rho: f64,
    pub b: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Standardised support vectors.
    pub support: Vec<Vec<f64>>,
    /// `α_i y_i` per support vector.
    pub coef: Vec<f64>,
    /// Training-row index of each support vector; empty for loaded models.
    #[serde(default)]
    pub support_index: Vec<usize>,
    pub iterations: usize,
    /// False when the iteration cap was hit; the model is the last iterate.
    pub converged: bool,
}

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn standardize(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                found: x.len(),
            });
        }
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect())
    }

    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        let z = self.standardize(x)?;
        Ok(self
            .support
            .iter()
            .zip(&self.coef)
            .map(|(sv, c)| c * rbf(self.gamma, sv, &z))
            .sum::<f64>()
            + self.b)
    }

    /// Class (true = enhanced) and decision value.
    pub fn predict(&self, x: &[f64]) -> Result<(bool, f64)> {
        let d = self.decision(x)?;
        Ok((d > 0.0, d))
    }

    pub fn decision_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        rows.par_iter().map(|x| self.decision(x)).collect()
    }

    /// Dual objective `Σα - ½ Σ α_i α_j y_i y_j K_ij` at this model.
    pub fn dual_objective(&self) -> f64 {
        let mut quad = 0.0;
        for (a, ca) in self.support.iter().zip(&self.coef) {
            for (b, cb) in self.support.iter().zip(&self.coef) {
                quad += ca * cb * rbf(self.gamma, a, b);
            }
        }
        self.coef.iter().map(|c| c.abs()).sum::<f64>() - 0.5 * quad
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut s = String::from("scarline-svm 1\n");
        let _ = writeln!(s, "gamma {}", self.gamma);
        let _ = writeln!(s, "rho {}", self.rho);
        let _ = writeln!(s, "b {}", self.b);
        let _ = writeln!(s, "mean {}", join(&self.mean));
        let _ = writeln!(s, "scale {}", join(&self.scale));
        let _ = writeln!(s, "iterations {}", self.iterations);
        let _ = writeln!(s, "converged {}", self.converged);
        let _ = writeln!(s, "sv {}", self.support.len());
        for (sv, c) in self.support.iter().zip(&self.coef) {
            let _ = writeln!(s, "{} {}", c, join(sv));
        }
        s
    }

    pub fn parse(text: &str) -> Result<SvmModel> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let mut next = |key: &str| -> Result<(usize, String)> {
            let (n, l) = lines
                .next()
                .ok_or_else(|| Error::parse(0, format!("missing {key:?} line")))?;
            match l.split_once(' ') {
                Some((k, v)) if k == key => Ok((n, v.trim().to_string())),
                _ if l == key => Ok((n, String::new())),
                _ => Err(Error::parse(n, format!("expected {key:?}"))),
            }
        };
        let nums = |n: usize, v: &str| -> Result<Vec<f64>> {
            v.split_whitespace()
                .map(|t| match t.parse::<f64>() {
                    Ok(x) if x.is_finite() => Ok(x),
                    _ => Err(Error::parse(n, format!("bad number {t:?}"))),
                })
                .collect()
        };
        let one = |n: usize, v: &str| -> Result<f64> {
            match nums(n, v)?.as_slice() {
                [x] => Ok(*x),
                _ => Err(Error::parse(n, "expected one number")),
            }
        };
        let (n, v) = next("scarline-svm")?;
        if v != "1" {
            return Err(Error::parse(n, format!("unsupported model version {v:?}")));
        }
        let (n, v) = next("gamma")?;
        let gamma = one(n, &v)?;
        let (n, v) = next("rho")?;
        let rho = one(n, &v)?;
        let (n, v) = next("b")?;
        let b = one(n, &v)?;
        let (n, v) = next("mean")?;
        let mean = nums(n, &v)?;
        let (n, v) = next("scale")?;
        let scale = nums(n, &v)?;
        if mean.is_empty() || scale.len() != mean.len() || scale.iter().any(|s| *s <= 0.0) {
            return Err(Error::parse(n, "scale must be positive and match mean"));
        }
        let (n, v) = next("iterations")?;
        let iterations = v
            .parse()
            .map_err(|_| Error::parse(n, "bad iteration count"))?;
        let (n, v) = next("converged")?;
        let converged = v
            .parse()
            .map_err(|_| Error::parse(n, "bad converged flag"))?;
        let (n, v) = next("sv")?;
        let count: usize = v
            .parse()
            .map_err(|_| Error::parse(n, "bad support vector count"))?;
        let mut support = Vec::new();
        let mut coef = Vec::new();
        for (n, l) in lines.by_ref() {
            let row = nums(n, l)?;
            if row.len() != mean.len() + 1 {
                return Err(Error::parse(n, "support vector has the wrong dimension"));
            }
            coef.push(row[0]);
            support.push(row[1..].to_vec());
            if support.len() > count {
                return Err(Error::parse(n, "more support vectors than declared"));
            }
        }
        if support.len() != count {
            return Err(Error::parse(n, "fewer support vectors than declared"));
        }
        let m = SvmModel {
            gamma,
            rho,
            b,
            mean,
            scale,
            support,
            coef,
            support_index: Vec::new(),
            iterations,
            converged,
        };
        SvmParams::new(rho, gamma)
            .validate()
            .map_err(|e| Error::parse(0, e.to_string()))?;
        Ok(m)
    }
}

/// Per-feature mean and population std; zero spread maps to 1.
pub fn standardization(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in scale.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in scale.iter_mut() {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    (mean, scale)
}

struct KernelRows<'a> {
    x: &'a [Vec<f64>],
    gamma: f64,
    rows: Vec<Option<Rc<[f64]>>>,
    order: VecDeque<usize>,
    cap: usize,
}

impl<'a> KernelRows<'a> {
    fn new(x: &'a [Vec<f64>], gamma: f64, cache_mb: usize) -> Self {
        let per_row = x.len() * std::mem::size_of::<f64>();
        KernelRows {
            x,
            gamma,
            rows: vec![None; x.len()],
            order: VecDeque::new(),
            cap: (cache_mb * (1 << 20) / per_row.max(1)).max(2),
        }
    }

    fn row(&mut self, i: usize) -> Rc<[f64]> {
        if let Some(r) = &self.rows[i] {
            return r.clone();
        }
        if self.order.len() >= self.cap {
            let old = self.order.pop_front().expect("non-empty cache");
            self.rows[old] = None;
        }
        let xi = &self.x[i];
        let r: Rc<[f64]> = self.x.iter().map(|xj| rbf(self.gamma, xi, xj)).collect();
        self.rows[i] = Some(r.clone());
        self.order.push_back(i);
        r
    }
}

struct Solution {
    alpha: Vec<f64>,
    b: f64,
    iterations: usize,
    converged: bool,
}

fn smo(x: &[Vec<f64>], y: &[f64], p: &SvmParams) -> Solution {
    let n = x.len();
    let c = p.rho;
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut k = KernelRows::new(x, p.gamma, p.cache_mb);
    // RBF diagonal is 1.
    let up = |a: f64, yt: f64| if yt > 0.0 { a < c } else { a > 0.0 };
    let low = |a: f64, yt: f64| if yt > 0.0 { a > 0.0 } else { a < c };
    let mut iterations = 0;
    let mut converged = false;
    while iterations < p.max_iter {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            if up(alpha[t], y[t]) && -y[t] * grad[t] >= gmax {
                gmax = -y[t] * grad[t];
                i = t;
            }
        }
        if i == usize::MAX {
            converged = true;
            break;
        }
        let ki = k.row(i);
        let mut gmin = f64::INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if !low(alpha[t], y[t]) {
                continue;
            }
            let v = -y[t] * grad[t];
            gmin = gmin.min(v);
            let diff = gmax - v;
            if diff > 0.0 {
                let quad = (2.0 - 2.0 * ki[t]).max(TAU);
                let obj = -diff * diff / quad;
                if obj <= best {
                    best = obj;
                    j = t;
                }
            }
        }
        if gmax - gmin < p.tol || j == usize::MAX {
            converged = true;
            break;
        }
        iterations += 1;
        let kj = k.row(j);
        let (oi, oj) = (alpha[i], alpha[j]);
        let quad = (2.0 - 2.0 * ki[j]).max(TAU);
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - oi, alpha[j] - oj);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * ki[t] * di + y[j] * kj[t] * dj);
        }
    }

    // Offset from free vectors, else the midpoint of the feasible interval.
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        let at_upper = alpha[t] >= c;
        let at_lower = alpha[t] <= 0.0;
        if at_upper {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if at_lower {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let r = if n_free > 0 {
        sum_free / n_free as f64
    } else {
        (ub + lb) / 2.0
    };
    Solution {
        alpha,
        b: -r,
        iterations,
        converged,
    }
}

/// Trains on raw rows; `y` true marks the enhanced class.
pub fn train_xy(rows: &[Vec<f64>], y: &[bool], p: &SvmParams) -> Result<SvmModel> {
    p.validate()?;
    if rows.is_empty() || rows.len() != y.len() {
        return Err(Error::Dimension {
            expected: y.len(),
            found: rows.len(),
        });
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension {
            expected: d,
            found: rows.iter().map(|r| r.len()).find(|&l| l != d).unwrap_or(0),
        });
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite feature".into()));
    }
    let pos = y.iter().filter(|&&v| v).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::Degenerate("training needs both classes".into()));
    }
    let (mean, scale) = standardization(rows);
    let z: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            r.iter()
                .zip(&mean)
                .zip(&scale)
                .map(|((v, m), s)| (v - m) / s)
                .collect()
        })
        .collect();
    let ys: Vec<f64> = y.iter().map(|&v| if v { 1.0 } else { -1.0 }).collect();
    let sol = smo(&z, &ys, p);
    let mut support = Vec::new();
    let mut coef = Vec::new();
    let mut support_index = Vec::new();
    for (i, &a) in sol.alpha.iter().enumerate() {
        if a > 0.0 {
            support.push(z[i].clone());
            coef.push(a * ys[i]);
            support_index.push(i);
        }
    }
    Ok(SvmModel {
        gamma: p.gamma,
        rho: p.rho,
        b: sol.b,
        mean,
        scale,
        support,
        coef,
        support_index,
        iterations: sol.iterations,
        converged: sol.converged,
    })
}

pub fn train(ds: &LabeledDataset, p: &SvmParams) -> Result<SvmModel> {
    let rows: Vec<Vec<f64>> = ds.rows.iter().map(|r| r.x.clone()).collect();
    train_xy(&rows, &ds.classes(), p)
}

/// A model that always answers one class (used for single-class folds).
fn constant_model(dim: usize, enhanced: bool, p: &SvmParams) -> SvmModel {
    SvmModel {
        gamma: p.gamma,
        rho: p.rho,
        b: if enhanced { 1.0 } else { -1.0 },
        mean: vec![0.0; dim],
        scale: vec![1.0; dim],
        support: Vec::new(),
        coef: Vec::new(),
        support_index: Vec::new(),
        iterations: 0,
        converged: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve over every distinct threshold and its trapezoidal area.
pub fn roc_auc(scores: &[f64], truth: &[bool]) -> Result<(Vec<RocPoint>, f64)> {
    if scores.len() != truth.len() {
        return Err(Error::Dimension {
            expected: truth.len(),
            found: scores.len(),
        });
    }
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate("ROC needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Degenerate("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        let (tp0, fp0) = (tp, fp);
        while k < order.len() && scores[order[k]] == s {
            if truth[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        auc += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
        pts.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok((pts, auc / (pos * neg) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub n: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    /// NaN when there are no positives.
    pub sensitivity: f64,
    /// NaN when there are no negatives.
    pub specificity: f64,
    pub ber: f64,
    /// `None` unless both classes are present.
    pub auc: Option<f64>,
    pub roc: Vec<RocPoint>,
    pub decisions: Vec<f64>,
}

impl ClassificationReport {
    pub fn from_decisions(decisions: Vec<f64>, truth: &[bool]) -> Result<Self> {
        if decisions.len() != truth.len() || truth.is_empty() {
            return Err(Error::Dimension {
                expected: truth.len(),
                found: decisions.len(),
            });
        }
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (&d, &t) in decisions.iter().zip(truth) {
            match (d > 0.0, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        let ratio = |a: usize, b: usize| {
            if a + b == 0 {
                f64::NAN
            } else {
                a as f64 / (a + b) as f64
            }
        };
        let sensitivity = ratio(tp, fn_);
        let specificity = ratio(tn, fp);
        let (roc, auc) = match roc_auc(&decisions, truth) {
            Ok((r, a)) => (r, Some(a)),
            Err(_) => (Vec::new(), None),
        };
        Ok(ClassificationReport {
            n: truth.len(),
            tp,
            fp,
            tn,
            fn_,
            accuracy: (tp + tn) as f64 / truth.len() as f64,
            sensitivity,
            specificity,
            ber: 1.0 - (sensitivity + specificity) / 2.0,
            auc,
            roc,
            decisions,
        })
    }

    pub fn roc_csv(&self) -> String {
        let mut s = String::from("fpr,tpr\n");
        for p in &self.roc {
            let _ = writeln!(s, "{},{}", p.fpr, p.tpr);
        }
        s
    }
}

/// Folds of row indices, stratified by class and shuffled by `seed`.
pub fn stratified_folds(y: &[bool], k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut slot = 0;
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            folds[slot % k].push(i);
            slot += 1;
        }
    }
    for f in folds.iter_mut() {
        f.sort_unstable();
    }
    folds
}

fn complement(n: usize, fold: &[usize]) -> Vec<usize> {
    let mut inside = vec![false; n];
    for &i in fold {
        inside[i] = true;
    }
    (0..n).filter(|&i| !inside[i]).collect()
}

/// Mean k-fold accuracy of one parameter setting.
pub fn cv_accuracy(
    rows: &[Vec<f64>],
    y: &[bool],
    p: &SvmParams,
    k: usize,
    seed: u64,
) -> Result<f64> {
    if k < 2 || k > y.len() {
        return Err(Error::InvalidParameter(format!(
            "{k} folds for {} rows",
            y.len()
        )));
    }
    let folds = stratified_folds(y, k, seed);
    let mut total = 0.0;
    for fold in &folds {
        let train: Vec<usize> = complement(y.len(), fold);
        let tx: Vec<Vec<f64>> = train.iter().map(|&i| rows[i].clone()).collect();
        let ty: Vec<bool> = train.iter().map(|&i| y[i]).collect();
        let model = match train_xy(&tx, &ty, p) {
            Ok(m) => m,
            Err(Error::Degenerate(_)) => constant_model(rows[0].len(), ty[0], p),
            Err(e) => return Err(e),
        };
        let correct = fold
            .iter()
            .filter(|&&i| {
                model
                    .decision(&rows[i])
                    .map(|d| (d > 0.0) == y[i])
                    .unwrap_or(false)
            })
            .count();
        total += correct as f64 / fold.len().max(1) as f64;
    }
    Ok(total / k as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FineGrid {
    /// No second stage.
    None,
    /// Fixed values.
    Preset { rho: Vec<f64>, gamma: Vec<f64> },
    /// `points` per axis spaced `log2_step` apart around the coarse optimum.
    Centered { log2_step: f64, points: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchSpec {
    pub coarse_rho: Vec<f64>,
    pub coarse_gamma: Vec<f64>,
    pub fine: FineGrid,
    pub folds: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
}

fn pow2(exps: impl Iterator<Item = f64>) -> Vec<f64> {
    exps.map(|e| 2f64.powf(e)).collect()
}

impl GridSearchSpec {
    /// 2^-10..2^10 in steps of 2^2 on both axes, 5 inner folds.
    pub fn coarse_only() -> Self {
        let axis = pow2((-5..=5).map(|e| 2.0 * e as f64));
        GridSearchSpec {
            coarse_rho: axis.clone(),
            coarse_gamma: axis,
            fine: FineGrid::None,
            folds: 5,
            seed: 0,
            tol: 1e-3,
            max_iter: 100_000,
        }
    }

    /// Coarse grid, then ρ ∈ {2^8, 2^8.5, 2^9}, γ ∈ {2^2, 2^2.5, 2^3}.
    pub fn paper() -> Self {
        GridSearchSpec {
            fine: FineGrid::Preset {
                rho: pow2([8.0, 8.5, 9.0].into_iter()),
                gamma: pow2([2.0, 2.5, 3.0].into_iter()),
            },
            ..Self::coarse_only()
        }
    }

    /// Coarse grid, then a 3×3 half-step grid around the coarse optimum.
    pub fn centered() -> Self {
        GridSearchSpec {
            fine: FineGrid::Centered {
                log2_step: 0.5,
                points: 3,
            },
            ..Self::coarse_only()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: &[f64]| !v.is_empty() && v.iter().all(|x| *x > 0.0 && x.is_finite());
        if !ok(&self.coarse_rho) || !ok(&self.coarse_gamma) {
            return Err(Error::InvalidParameter(
                "coarse grid axes must be non-empty and positive".into(),
            ));
        }
        match &self.fine {
            FineGrid::Preset { rho, gamma } if !ok(rho) || !ok(gamma) => {
                return Err(Error::InvalidParameter(
                    "fine grid axes must be non-empty and positive".into(),
                ))
            }
            FineGrid::Centered { log2_step, points } if !(*log2_step > 0.0) || *points == 0 => {
                return Err(Error::InvalidParameter(
                    "fine grid needs a positive step and points".into(),
                ))
            }
            _ => {}
        }
        if self.folds < 2 {
            return Err(Error::InvalidParameter(
                "inner CV needs at least 2 folds".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridStage {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub stage: GridStage,
    pub rho: f64,
    pub gamma: f64,
    pub score: f64,
    /// Training failed; scored 0.
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub rho: f64,
    pub gamma: f64,
    pub score: f64,
    pub surface: Vec<GridCell>,
}

impl GridSearchResult {
    pub fn surface_csv(&self) -> String {
        let mut s = String::from("stage,log2_rho,log2_gamma,score,failed\n");
        for c in &self.surface {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                if c.stage == GridStage::Coarse {
                    "coarse"
                } else {
                    "fine"
                },
                c.rho.log2(),
                c.gamma.log2(),
                c.score,
                c.failed
            );
        }
        s
    }
}

fn best_cell(cells: &[GridCell]) -> &GridCell {
    cells
        .iter()
        .reduce(|a, b| {
            let better = b.score > a.score
                || (b.score == a.score && (b.rho < a.rho || (b.rho == a.rho && b.gamma < a.gamma)));
            if better {
                b
            } else {
                a
            }
        })
        .expect("non-empty grid")
}

fn score_cells(
    rows: &[Vec<f64>],
    y: &[bool],
    spec: &GridSearchSpec,
    stage: GridStage,
    rhos: &[f64],
    gammas: &[f64],
) -> Vec<GridCell> {
    let pairs: Vec<(f64, f64)> = rhos
        .iter()
        .flat_map(|&r| gammas.iter().map(move |&g| (r, g)))
        .collect();
    pairs
        .par_iter()
        .map(|&(rho, gamma)| {
            let p = SvmParams {
                rho,
                gamma,
                tol: spec.tol,
                max_iter: spec.max_iter,
                ..Default::default()
            };
            let (score, failed) = match cv_accuracy(rows, y, &p, spec.folds, spec.seed) {
                Ok(s) => (s, false),
                Err(_) => (0.0, true),
            };
            GridCell {
                stage,
                rho,
                gamma,
                score,
                failed,
            }
        })
        .collect()
}

/// Two-stage grid search maximising inner-CV accuracy. Ties go to the
/// smaller ρ, then the smaller γ.
pub fn grid_search(ds: &LabeledDataset, spec: &GridSearchSpec) -> Result<GridSearchResult> {
    spec.validate()?;
    if !ds.has_both_classes() {
        return Err(Error::Degenerate("grid search needs both classes".into()));
    }
    let rows: Vec<Vec<f64>> = ds.rows.iter().map(|r| r.x.clone()).collect();
    let y = ds.classes();
    let mut surface = score_cells(
        &rows,
        &y,
        spec,
        GridStage::Coarse,
        &spec.coarse_rho,
        &spec.coarse_gamma,
    );
    let coarse = best_cell(&surface).clone();
    let fine = match &spec.fine {
        FineGrid::None => None,
        FineGrid::Preset { rho, gamma } => Some((rho.clone(), gamma.clone())),
        FineGrid::Centered { log2_step, points } => {
            let axis = |centre: f64| {
                let half = (*points as f64 - 1.0) / 2.0;
                pow2((0..*points).map(|k| centre.log2() + (k as f64 - half) * log2_step))
            };
            Some((axis(coarse.rho), axis(coarse.gamma)))
        }
    };
    if let Some((r, g)) = fine {
        surface.extend(score_cells(&rows, &y, spec, GridStage::Fine, &r, &g));
    }
    let best = best_cell(&surface).clone();
    Ok(GridSearchResult {
        rho: best.rho,
        gamma: best.gamma,
        score: best.score,
        surface,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Protocol {
    /// Leave one patient out.
    LooPatient,
    /// Patients dealt into `k` folds.
    KFold(usize),
    /// Train on one patient set, test on another.
    Split {
        train: Vec<String>,
        test: Vec<String>,
    },
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    /// `loo`, `kfold:<k>` or `split:<a,b>|<c,d>`.
    fn from_str(s: &str) -> Result<Self> {
        let ids = |l: &str| -> Vec<String> {
            l.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect()
        };
        let s = s.trim();
        match s.split_once(':') {
            None if s == "loo" => Ok(Protocol::LooPatient),
            Some(("kfold", k)) => k
                .trim()
                .parse()
                .map(Protocol::KFold)
                .map_err(|_| Error::InvalidParameter(format!("bad fold count {k:?}"))),
            Some(("split", sets)) => {
                let (train, test) = sets.split_once('|').ok_or_else(|| {
                    Error::InvalidParameter("split needs train|test patient lists".into())
                })?;
                Ok(Protocol::Split {
                    train: ids(train),
                    test: ids(test),
                })
            }
            _ => Err(Error::InvalidParameter(
                "protocol must be loo, kfold:<k> or split:<a,b>|<c,d>".into(),
            )),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Protocol::LooPatient => write!(f, "loo"),
            Protocol::KFold(k) => write!(f, "kfold:{k}"),
            Protocol::Split { train, test } => {
                write!(f, "split:{}|{}", train.join(","), test.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationResult {
    pub report: ClassificationReport,
    pub trainings: usize,
    /// Folds whose training portion held a single class.
    pub single_class_folds: usize,
    /// Evaluated dataset rows, aligned with `report.decisions`.
    pub rows: Vec<usize>,
}

/// Patient groups for each fold of `protocol`: (train rows, test rows).
pub fn protocol_folds(
    ds: &LabeledDataset,
    protocol: &Protocol,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let patients = ds.patients();
    let rows_of = |ids: &[String]| -> Vec<usize> {
        (0..ds.len())
            .filter(|&i| ids.contains(&ds.rows[i].patient))
            .collect()
    };
    let groups: Vec<Vec<String>> = match protocol {
        Protocol::LooPatient => {
            if patients.len() < 2 {
                return Err(Error::InvalidParameter(
                    "leave-one-out needs two patients".into(),
                ));
            }
            patients.iter().map(|p| vec![p.clone()]).collect()
        }
        Protocol::KFold(k) => {
            if *k < 2 || *k > patients.len() {
                return Err(Error::InvalidParameter(format!(
                    "{k} folds for {} patients",
                    patients.len()
                )));
            }
            let mut order = patients.clone();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut g = vec![Vec::new(); *k];
            for (i, p) in order.into_iter().enumerate() {
                g[i % k].push(p);
            }
            g
        }
        Protocol::Split { train, test } => {
            if train.is_empty() || test.is_empty() || train.iter().any(|p| test.contains(p)) {
                return Err(Error::InvalidParameter(
                    "split needs disjoint non-empty patient sets".into(),
                ));
            }
            for p in train.iter().chain(test) {
                if !patients.contains(p) {
                    return Err(Error::InvalidParameter(format!("unknown patient {p:?}")));
                }
            }
            return Ok(vec![(rows_of(train), rows_of(test))]);
        }
    };
    Ok(groups
        .iter()
        .map(|test| {
            let train: Vec<String> = patients
                .iter()
                .filter(|p| !test.contains(p))
                .cloned()
                .collect();
            (rows_of(&train), rows_of(test))
        })
        .collect())
}

/// Runs `protocol` with fixed parameters and pools every test prediction.
pub fn validate(
    ds: &LabeledDataset,
    protocol: &Protocol,
    p: &SvmParams,
    seed: u64,
) -> Result<ValidationResult> {
    p.validate()?;
    if ds.is_empty() {
        return Err(Error::Empty("validation needs rows".into()));
    }
    let folds = protocol_folds(ds, protocol, seed)?;
    let rows: Vec<Vec<f64>> = ds.rows.iter().map(|r| r.x.clone()).collect();
    let y = ds.classes();
    let outcomes: Vec<Result<(Vec<(usize, f64)>, bool)>> = folds
        .par_iter()
        .map(|(train, test)| {
            if train.is_empty() {
                return Err(Error::Empty("fold without training rows".into()));
            }
            let tx: Vec<Vec<f64>> = train.iter().map(|&i| rows[i].clone()).collect();
            let ty: Vec<bool> = train.iter().map(|&i| y[i]).collect();
            let single = ty.iter().all(|&v| v == ty[0]);
            let model = if single {
                constant_model(ds.dim(), ty[0], p)
            } else {
                train_xy(&tx, &ty, p)?
            };
            let out = test
                .iter()
                .map(|&i| Ok((i, model.decision(&rows[i])?)))
                .collect::<Result<Vec<_>>>()?;
            Ok((out, single))
        })
        .collect();
    let mut pairs = Vec::new();
    let mut single_class_folds = 0;
    for o in outcomes {
        let (out, single) = o?;
        single_class_folds += single as usize;
        pairs.extend(out);
    }
    pairs.sort_by_key(|&(i, _)| i);
    let truth: Vec<bool> = pairs.iter().map(|&(i, _)| y[i]).collect();
    let report =
        ClassificationReport::from_decisions(pairs.iter().map(|&(_, d)| d).collect(), &truth)?;
    Ok(ValidationResult {
        report,
        trainings: folds.len(),
        single_class_folds,
        rows: pairs.into_iter().map(|(i, _)| i).collect(),
    })
}
