//! End-to-end scar segmentation.
//!
//! Per patient: anatomy (given, or registered and fused from atlases) →
//! wall band and blood pool → blood-pool normalisation → per-slice SLIC →
//! features of wall superpixels → ground truth from annotator clicks. Across
//! a cohort the labelled superpixels train and validate the SVM, and the
//! predicted scar is the union of superpixels classified as enhanced.

mod cohort;
mod config;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cohort::{
    synthetic_atlases, synthetic_case, synthetic_clicks, synthetic_cohort, CaseParams,
    SyntheticCase, CONSTRUCTED_FEP,
};
pub use config::{Baseline, GridChoice, PipelineConfig};
pub use report::{BaselineReport, CohortReport, PatientReport, Summary};

use crate::features::{
    extract_features, mrmr_select, FeatureVector, LabeledDataset, MrmrPick, Sample,
};
use crate::fusion::{fuse, FusionConfig, WarpedAtlas};
use crate::metrics::{bland_altman, fep, overlap_metrics, BlandAltman, MetricReport};
use crate::registration::{register_hierarchical, warp_atlas, RegistrationConfig, StageLog};
use crate::superpixel::{mask_slice, slic_volume, superpixel_label_volume, SuperpixelMap};
use crate::svm::{
    grid_search, train, validate, GridSearchResult, Protocol, SvmModel, SvmParams, ValidationResult,
};
use crate::volume::{dilate, erode, labels, write_volume, LabelVolume, Mask, ScalarVolume};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct WallMasks {
    /// LA ∪ PV.
    pub region: Mask,
    pub wall: Mask,
    pub pool: Mask,
}

/// Wall band around the LA+PV surface and the eroded blood pool.
pub fn extract_wall(anatomy: &LabelVolume, cfg: &PipelineConfig) -> Result<WallMasks> {
    let region = anatomy.mask_of(&[labels::LA, labels::PV]);
    if !anatomy.data().contains(&labels::LA) {
        return Err(Error::Degenerate("anatomy has no LA label".into()));
    }
    let pool = erode(&region, cfg.erosion_mm)?;
    if pool.is_empty() {
        return Err(Error::Empty(format!(
            "blood pool is empty: a {} mm erosion removes the whole LA",
            cfg.erosion_mm
        )));
    }
    let mut wall = dilate(&region, cfg.dilation_mm)?.minus(&region)?;
    if cfg.inward_margin_mm > 0.0 {
        wall = wall.or(&region.minus(&erode(&region, cfg.inward_margin_mm)?)?)?;
    }
    let wall = wall.minus(&pool)?;
    Ok(WallMasks { region, wall, pool })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub mean: f64,
    /// Population standard deviation.
    pub sd: f64,
    pub count: usize,
}

pub fn pool_stats(volume: &ScalarVolume, pool: &Mask) -> Result<PoolStats> {
    volume.geometry().check_same(pool.geometry())?;
    let vals: Vec<f64> = pool
        .indices()
        .into_iter()
        .map(|i| volume.data()[i])
        .collect();
    if vals.is_empty() {
        return Err(Error::Empty("blood pool is empty".into()));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let sd = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if !(sd > 0.0) {
        return Err(Error::Degenerate("blood pool has zero variance".into()));
    }
    Ok(PoolStats {
        mean,
        sd,
        count: vals.len(),
    })
}

/// `(v - μ_bp) / σ_bp` voxelwise.
pub fn normalize_blood_pool(
    volume: &ScalarVolume,
    pool: &Mask,
) -> Result<(ScalarVolume, PoolStats)> {
    let s = pool_stats(volume, pool)?;
    Ok((volume.map(|v| (v - s.mean) / s.sd)?, s))
}

/// Wall voxels whose normalised intensity exceeds `thr`.
pub fn baseline_threshold(normalized: &ScalarVolume, wall: &Mask, thr: f64) -> Result<Mask> {
    normalized.geometry().check_same(wall.geometry())?;
    if thr.is_nan() {
        return Err(Error::InvalidParameter("threshold is NaN".into()));
    }
    Mask::new(
        wall.geometry().clone(),
        normalized
            .data()
            .iter()
            .zip(wall.data())
            .map(|(&v, &w)| w && v > thr)
            .collect(),
    )
}

/// Wall voxels above `μ_bp + k·σ_bp`, evaluated on the normalised scale so
/// it agrees voxel for voxel with [`baseline_threshold`] at `thr = k`.
pub fn baseline_sd(volume: &ScalarVolume, wall: &Mask, pool: &Mask, k: f64) -> Result<Mask> {
    let (norm, _) = normalize_blood_pool(volume, pool)?;
    baseline_threshold(&norm, wall, k)
}

/// One annotator click on slice `slice` at pixel `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SliceClick {
    pub slice: usize,
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickRecord {
    pub patient: String,
    pub annotator: String,
    pub session: String,
    pub click: SliceClick,
}

/// Parses `patient,annotator,session,slice,x,y` rows (header required).
pub fn parse_clicks(text: &str) -> Result<Vec<ClickRecord>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::parse(1, e.to_string()))?;
    if header
        .iter()
        .ne(["patient", "annotator", "session", "slice", "x", "y"])
    {
        return Err(Error::parse(
            1,
            "header must be patient,annotator,session,slice,x,y",
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(line, e.to_string()))?;
        if rec.len() != 6 {
            return Err(Error::parse(line, "expected 6 fields"));
        }
        let idx = |k: usize| -> Result<usize> {
            rec[k]
                .parse()
                .map_err(|_| Error::parse(line, format!("bad coordinate {:?}", &rec[k])))
        };
        if rec[0].is_empty() {
            return Err(Error::parse(line, "empty patient id"));
        }
        out.push(ClickRecord {
            patient: rec[0].to_string(),
            annotator: rec[1].to_string(),
            session: rec[2].to_string(),
            click: SliceClick {
                slice: idx(3)?,
                x: idx(4)?,
                y: idx(5)?,
            },
        });
    }
    Ok(out)
}

pub fn clicks_to_csv(records: &[ClickRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["patient", "annotator", "session", "slice", "x", "y"])
        .expect("in-memory write");
    for r in records {
        w.write_record([
            r.patient.clone(),
            r.annotator.clone(),
            r.session.clone(),
            r.click.slice.to_string(),
            r.click.x.to_string(),
            r.click.y.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

/// Clicks per (patient, annotator, session).
pub fn group_clicks(
    records: &[ClickRecord],
) -> BTreeMap<(String, String, String), Vec<SliceClick>> {
    let mut out: BTreeMap<_, Vec<SliceClick>> = BTreeMap::new();
    for r in records {
        out.entry((r.patient.clone(), r.annotator.clone(), r.session.clone()))
            .or_default()
            .push(r.click);
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtLog {
    pub clicks: usize,
    /// Distinct superpixels clicked.
    pub superpixels: usize,
    /// Extra clicks landing in an already-clicked superpixel.
    pub duplicates: usize,
    /// Clicked superpixels below the wall overlap ratio.
    pub dropped: usize,
}

fn check_maps(maps: &[SuperpixelMap], mask: &Mask) -> Result<()> {
    let d = mask.geometry().dims;
    if maps.len() != d[2] {
        return Err(Error::Dimension {
            expected: d[2],
            found: maps.len(),
        });
    }
    if maps.iter().any(|m| m.width != d[0] || m.height != d[1]) {
        return Err(Error::GeometryMismatch);
    }
    Ok(())
}

/// Per-superpixel count of pixels inside `mask`, slice by slice.
fn overlap_counts(maps: &[SuperpixelMap], mask: &Mask) -> Vec<Vec<usize>> {
    maps.iter()
        .enumerate()
        .map(|(z, m)| {
            let s = mask_slice(mask, z);
            let mut c = vec![0usize; m.len()];
            for (&l, &inside) in m.labels.iter().zip(&s) {
                c[l as usize] += inside as usize;
            }
            c
        })
        .collect()
}

fn union_of(maps: &[SuperpixelMap], like: &Mask, chosen: &BTreeSet<(usize, u32)>) -> Result<Mask> {
    let n = like.geometry().slice_len();
    let mut data = vec![false; like.geometry().len()];
    for (z, m) in maps.iter().enumerate() {
        for (i, &l) in m.labels.iter().enumerate() {
            data[z * n + i] = chosen.contains(&(z, l));
        }
    }
    Mask::new(like.geometry().clone(), data)
}

/// Union of clicked superpixels that are at least `ratio` wall. Several
/// clicks in one superpixel count once.
pub fn assemble_ground_truth(
    clicks: &[SliceClick],
    maps: &[SuperpixelMap],
    wall: &Mask,
    ratio: f64,
) -> Result<(Mask, GtLog)> {
    check_maps(maps, wall)?;
    let d = wall.geometry().dims;
    let inside = overlap_counts(maps, wall);
    let mut seen = BTreeSet::new();
    let mut chosen = BTreeSet::new();
    let mut log = GtLog {
        clicks: clicks.len(),
        ..Default::default()
    };
    for c in clicks {
        if c.slice >= d[2] || c.x >= d[0] || c.y >= d[1] {
            return Err(Error::InvalidParameter(format!(
                "click ({}, {}) on slice {} is outside the {}×{}×{} volume",
                c.x, c.y, c.slice, d[0], d[1], d[2]
            )));
        }
        let sp = maps[c.slice].label_at(c.x, c.y);
        if !seen.insert((c.slice, sp)) {
            log.duplicates += 1;
            continue;
        }
        let size = maps[c.slice].centroids[sp as usize].count;
        if (inside[c.slice][sp as usize] as f64) < ratio * size as f64 {
            log.dropped += 1;
            continue;
        }
        chosen.insert((c.slice, sp));
    }
    log.superpixels = seen.len();
    Ok((union_of(maps, wall, &chosen)?, log))
}

/// Class of each wall superpixel: enhanced when most of it lies in `gt`.
/// Returns `(slice, superpixel, enhanced)` for every superpixel at least
/// `ratio` wall, in slice then id order.
pub fn label_training_set(
    maps: &[SuperpixelMap],
    wall: &Mask,
    gt: &Mask,
    ratio: f64,
) -> Result<Vec<(usize, u32, bool)>> {
    check_maps(maps, wall)?;
    wall.geometry().check_same(gt.geometry())?;
    let w = overlap_counts(maps, wall);
    let g = overlap_counts(maps, gt);
    let mut out = Vec::new();
    for (z, m) in maps.iter().enumerate() {
        for (id, c) in m.centroids.iter().enumerate() {
            if c.count > 0 && w[z][id] as f64 >= ratio * c.count as f64 {
                out.push((z, id as u32, 2 * g[z][id] > c.count));
            }
        }
    }
    Ok(out)
}

/// Where a patient's LA+PV anatomy comes from.
#[derive(Debug, Clone)]
pub enum AnatomySource {
    Given(LabelVolume),
    /// Atlases `(id, image, labels)` registered to `target` and fused.
    /// `target` is an anatomical scan in the LGE frame; the LGE image itself
    /// is used when it is `None`.
    Atlases {
        target: Option<ScalarVolume>,
        atlases: Vec<(String, ScalarVolume, LabelVolume)>,
    },
}

#[derive(Debug, Clone)]
pub struct PatientInput {
    pub id: String,
    pub lge: ScalarVolume,
    pub anatomy: AnatomySource,
    pub clicks: Vec<SliceClick>,
    /// Independent scar truth (phantoms), evaluated alongside the clicks.
    pub reference_scar: Option<Mask>,
}

/// Every intermediate product of the per-patient stages.
#[derive(Debug, Clone)]
pub struct PreparedPatient {
    pub id: String,
    pub anatomy: LabelVolume,
    pub registration: Vec<Vec<StageLog>>,
    pub wall: Mask,
    pub pool: Mask,
    pub pool_stats: PoolStats,
    pub normalized: ScalarVolume,
    pub superpixels: Vec<SuperpixelMap>,
    pub features: Vec<FeatureVector>,
    /// Class of each feature row.
    pub enhanced: Vec<bool>,
    pub gt: Mask,
    pub gt_log: GtLog,
    pub reference_scar: Option<Mask>,
}

/// Multi-atlas anatomy: each atlas registered to `target`, warped, fused.
pub fn atlas_anatomy(
    target: &ScalarVolume,
    atlases: &[(String, ScalarVolume, LabelVolume)],
    cfg: &PipelineConfig,
) -> Result<(LabelVolume, Vec<Vec<StageLog>>)> {
    if atlases.is_empty() {
        return Err(Error::Empty("no atlases".into()));
    }
    let reg = RegistrationConfig {
        stages: cfg.registration,
        ..Default::default()
    };
    let mut warped = Vec::with_capacity(atlases.len());
    let mut logs = Vec::with_capacity(atlases.len());
    for (id, img, lab) in atlases {
        let r = register_hierarchical(target, (img, lab), &reg)
            .map_err(|e| e.in_stage("registration"))?;
        let (wi, wl) = warp_atlas((img, lab), &r.chain, target.geometry())
            .map_err(|e| e.in_stage("registration"))?;
        warped.push(WarpedAtlas {
            intensity: wi,
            labels: wl,
            id: id.clone(),
        });
        logs.push(r.log);
    }
    let fcfg = FusionConfig::with_strategy(cfg.fusion);
    let fused = fuse(target, &warped, &fcfg).map_err(|e| e.in_stage("label fusion"))?;
    Ok((fused, logs))
}

/// Runs every per-patient stage.
pub fn prepare_patient(input: &PatientInput, cfg: &PipelineConfig) -> Result<PreparedPatient> {
    cfg.validate()?;
    let (anatomy, registration) = match &input.anatomy {
        AnatomySource::Given(a) => {
            input
                .lge
                .geometry()
                .check_same(a.geometry())
                .map_err(|e| e.in_stage("anatomy"))?;
            (a.clone(), Vec::new())
        }
        AnatomySource::Atlases { target, atlases } => {
            let target = target.as_ref().unwrap_or(&input.lge);
            input
                .lge
                .geometry()
                .check_same(target.geometry())
                .map_err(|e| e.in_stage("anatomy"))?;
            atlas_anatomy(target, atlases, cfg)?
        }
    };
    let masks = extract_wall(&anatomy, cfg).map_err(|e| e.in_stage("wall extraction"))?;
    let (normalized, pool_stats) =
        normalize_blood_pool(&input.lge, &masks.pool).map_err(|e| e.in_stage("normalisation"))?;
    let superpixels = slic_volume(&normalized, &cfg.slic).map_err(|e| e.in_stage("superpixels"))?;
    let features = extract_features(&normalized, &superpixels, &masks.wall, cfg.overlap_ratio)
        .map_err(|e| e.in_stage("features"))?;
    let (gt, gt_log) =
        assemble_ground_truth(&input.clicks, &superpixels, &masks.wall, cfg.overlap_ratio)
            .map_err(|e| e.in_stage("ground truth"))?;
    let classes = label_training_set(&superpixels, &masks.wall, &gt, cfg.overlap_ratio)
        .map_err(|e| e.in_stage("ground truth"))?;
    debug_assert_eq!(classes.len(), features.len());
    let enhanced = classes.iter().map(|c| c.2).collect();
    if let Some(r) = &input.reference_scar {
        r.geometry()
            .check_same(input.lge.geometry())
            .map_err(|e| e.in_stage("anatomy"))?;
    }
    Ok(PreparedPatient {
        id: input.id.clone(),
        anatomy,
        registration,
        wall: masks.wall,
        pool: masks.pool,
        pool_stats,
        normalized,
        superpixels,
        features,
        enhanced,
        gt,
        gt_log,
        reference_scar: input.reference_scar.clone(),
    })
}

impl PreparedPatient {
    /// Feature rows restricted to `names`.
    pub fn rows(&self, names: &[String]) -> Result<Vec<Vec<f64>>> {
        let idx = names
            .iter()
            .map(|n| {
                crate::features::feature_index(n)
                    .ok_or_else(|| Error::InvalidParameter(format!("unknown feature {n:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self
            .features
            .iter()
            .map(|f| idx.iter().map(|&j| f.values[j]).collect())
            .collect())
    }

    /// Union of the superpixels whose decision value is positive.
    pub fn scar_from_decisions(&self, decisions: &[f64]) -> Result<Mask> {
        if decisions.len() != self.features.len() {
            return Err(Error::Dimension {
                expected: self.features.len(),
                found: decisions.len(),
            });
        }
        let chosen: BTreeSet<(usize, u32)> = self
            .features
            .iter()
            .zip(decisions)
            .filter(|(_, &d)| d > 0.0)
            .map(|(f, _)| (f.slice, f.sp_id))
            .collect();
        union_of(&self.superpixels, &self.wall, &chosen)
    }

    /// Writes volumes and tables for audit into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mask = |m: &Mask, name: &str| -> Result<()> {
            write_volume(
                &LabelVolume::from_mask(m, 1, name)?.into(),
                dir.join(format!("{name}.hdr")),
            )
        };
        write_volume(&self.anatomy.clone().into(), dir.join("anatomy.hdr"))?;
        write_volume(&self.normalized.clone().into(), dir.join("normalized.hdr"))?;
        mask(&self.wall, "wall")?;
        mask(&self.pool, "pool")?;
        mask(&self.gt, "ground_truth")?;
        let sp = superpixel_label_volume(self.normalized.geometry(), &self.superpixels)?;
        write_volume(&sp.into(), dir.join("superpixels.hdr"))?;
        let mut ds = LabeledDataset::with_standard_names();
        ds.extend_patient(&self.id, &self.features, |_| false)?;
        for (r, &e) in ds.rows.iter_mut().zip(&self.enhanced) {
            r.enhanced = e;
        }
        let path = dir.join("features.csv");
        std::fs::write(&path, ds.to_csv()).map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// [`prepare_patient`] for every input, patients in parallel. Errors name
/// the patient.
pub fn prepare_cohort(
    inputs: &[PatientInput],
    cfg: &PipelineConfig,
) -> Result<Vec<PreparedPatient>> {
    inputs
        .par_iter()
        .map(|i| {
            prepare_patient(i, cfg).map_err(|e| Error::Patient {
                id: i.id.clone(),
                source: Box::new(e),
            })
        })
        .collect()
}

/// All 16 features of every prepared patient with their classes.
pub fn cohort_dataset(patients: &[PreparedPatient]) -> Result<LabeledDataset> {
    let mut ds = LabeledDataset::with_standard_names();
    for p in patients {
        for (f, &e) in p.features.iter().zip(&p.enhanced) {
            ds.push(Sample {
                patient: p.id.clone(),
                slice: f.slice,
                sp_id: f.sp_id,
                enhanced: e,
                x: f.values.to_vec(),
            })?;
        }
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineResult {
    pub name: String,
    pub metrics: MetricReport,
    pub reference_metrics: Option<MetricReport>,
    pub fep: f64,
    #[serde(skip)]
    pub mask: Mask,
}

#[derive(Debug, Clone)]
pub struct PatientResult {
    pub id: String,
    /// Whole superpixels classified enhanced.
    pub scar: Mask,
    /// Scar ∩ wall against ground truth ∩ wall.
    pub metrics: MetricReport,
    pub reference_metrics: Option<MetricReport>,
    pub fep_auto: f64,
    pub fep_gt: f64,
    pub fep_reference: Option<f64>,
    pub baselines: Vec<BaselineResult>,
}

fn evaluate_in_wall(auto: &Mask, truth: &Mask, wall: &Mask) -> Result<MetricReport> {
    overlap_metrics(&auto.and(wall)?, &truth.and(wall)?)
}

/// Scores a patient's predicted scar and the configured baselines.
pub fn evaluate_patient(
    p: &PreparedPatient,
    scar: Mask,
    cfg: &PipelineConfig,
) -> Result<PatientResult> {
    let metrics = evaluate_in_wall(&scar, &p.gt, &p.wall)?;
    let reference_metrics = match &p.reference_scar {
        Some(r) => Some(evaluate_in_wall(&scar, r, &p.wall)?),
        None => None,
    };
    let baselines = cfg
        .baselines
        .iter()
        .map(|b| {
            let m = match *b {
                Baseline::Sd(k) => baseline_threshold(&p.normalized, &p.wall, k)?,
                Baseline::Threshold(t) => baseline_threshold(&p.normalized, &p.wall, t)?,
            };
            Ok(BaselineResult {
                name: b.to_string(),
                metrics: evaluate_in_wall(&m, &p.gt, &p.wall)?,
                reference_metrics: match &p.reference_scar {
                    Some(r) => Some(evaluate_in_wall(&m, r, &p.wall)?),
                    None => None,
                },
                fep: fep(&m, &p.wall)?,
                mask: m,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatientResult {
        id: p.id.clone(),
        fep_auto: fep(&scar, &p.wall)?,
        fep_gt: fep(&p.gt, &p.wall)?,
        fep_reference: match &p.reference_scar {
            Some(r) => Some(fep(r, &p.wall)?),
            None => None,
        },
        scar,
        metrics,
        reference_metrics,
        baselines,
    })
}

/// One patient through every stage with an already trained model.
pub fn run_pipeline(
    input: &PatientInput,
    model: &SvmModel,
    cfg: &PipelineConfig,
) -> Result<(PreparedPatient, PatientResult)> {
    let p = prepare_patient(input, cfg)?;
    let rows = p
        .rows(&cfg.features)
        .map_err(|e| e.in_stage("classification"))?;
    let d = model
        .decision_batch(&rows)
        .map_err(|e| e.in_stage("classification"))?;
    let scar = p
        .scar_from_decisions(&d)
        .map_err(|e| e.in_stage("classification"))?;
    let r = evaluate_patient(&p, scar, cfg).map_err(|e| e.in_stage("evaluation"))?;
    Ok((p, r))
}

#[derive(Debug, Clone)]
pub struct CohortOutcome {
    pub patients: Vec<PatientResult>,
    /// mRMR ranking of all 16 features on the whole cohort (top 3).
    pub selection: Option<Vec<MrmrPick>>,
    pub grid: Option<GridSearchResult>,
    pub params: SvmParams,
    pub validation: ValidationResult,
    /// Trained on every training patient of the protocol.
    pub model: SvmModel,
    pub bland_altman: Option<BlandAltman>,
}

/// Trains, validates and scores a prepared cohort under `cfg.protocol`.
pub fn run_cohort(patients: &[PreparedPatient], cfg: &PipelineConfig) -> Result<CohortOutcome> {
    cfg.validate()?;
    let full = cohort_dataset(patients)?;
    let selection = if full.has_both_classes() {
        Some(mrmr_select(&full, 3).map_err(|e| e.in_stage("feature selection"))?)
    } else {
        None
    };
    let names: Vec<&str> = cfg.features.iter().map(String::as_str).collect();
    let ds = full.select(&names)?;
    let training = match &cfg.protocol {
        Protocol::Split { train, .. } => {
            let idx: Vec<usize> = (0..ds.len())
                .filter(|&i| train.contains(&ds.rows[i].patient))
                .collect();
            ds.subset(&idx)
        }
        _ => ds.clone(),
    };
    let (grid, params) = match cfg.grid.spec(cfg.seed) {
        Some(spec) => {
            let g = grid_search(&training, &spec).map_err(|e| e.in_stage("grid search"))?;
            let p = SvmParams {
                rho: g.rho,
                gamma: g.gamma,
                ..cfg.svm.clone()
            };
            (Some(g), p)
        }
        None => (None, cfg.svm.clone()),
    };
    let validation =
        validate(&ds, &cfg.protocol, &params, cfg.seed).map_err(|e| e.in_stage("validation"))?;
    let model = train(&training, &params).map_err(|e| e.in_stage("training"))?;

    let mut per_patient: BTreeMap<&str, Vec<(usize, f64)>> = BTreeMap::new();
    let mut offset = BTreeMap::new();
    let mut start = 0;
    for p in patients {
        offset.insert(p.id.as_str(), start);
        start += p.features.len();
    }
    for (&row, &d) in validation.rows.iter().zip(&validation.report.decisions) {
        per_patient
            .entry(ds.rows[row].patient.as_str())
            .or_default()
            .push((row, d));
    }
    let mut results = Vec::new();
    for p in patients {
        let Some(rows) = per_patient.get(p.id.as_str()) else {
            continue;
        };
        let mut d = vec![0.0; p.features.len()];
        let base = offset[p.id.as_str()];
        for &(row, v) in rows {
            d[row - base] = v;
        }
        let scar = p.scar_from_decisions(&d)?;
        results.push(evaluate_patient(p, scar, cfg).map_err(|e| e.in_stage("evaluation"))?);
    }
    let pairs: Vec<(f64, f64)> = results.iter().map(|r| (r.fep_auto, r.fep_gt)).collect();
    let bland_altman = if pairs.len() >= 2 {
        bland_altman(&pairs).ok()
    } else {
        None
    };
    Ok(CohortOutcome {
        patients: results,
        selection,
        grid,
        params,
        validation,
        model,
        bland_altman,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObserverRow {
    pub patient: String,
    pub a: String,
    pub b: String,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObserverTable {
    pub rows: Vec<ObserverRow>,
    pub mean_dice: f64,
}

/// Pairwise Dice between every two delineations of the same patient.
/// `runs` holds (patient, annotator/session tag, mask).
pub fn observer_variance(runs: &[(String, String, Mask)]) -> Result<ObserverTable> {
    let mut by_patient: BTreeMap<&str, Vec<(&str, &Mask)>> = BTreeMap::new();
    for (p, tag, m) in runs {
        by_patient.entry(p).or_default().push((tag, m));
    }
    let mut rows = Vec::new();
    for (p, sessions) in by_patient {
        for i in 0..sessions.len() {
            for j in i + 1..sessions.len() {
                rows.push(ObserverRow {
                    patient: p.to_string(),
                    a: sessions[i].0.to_string(),
                    b: sessions[j].0.to_string(),
                    dice: overlap_metrics(sessions[i].1, sessions[j].1)?.dice,
                });
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Empty(
            "observer variance needs two sessions of one patient".into(),
        ));
    }
    let mean_dice = rows.iter().map(|r| r.dice).sum::<f64>() / rows.len() as f64;
    Ok(ObserverTable { rows, mean_dice })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    #[test]
    fn sd_baseline_is_threshold_on_normalised() {
        let g = Geometry::unit([6, 1, 1]).unwrap();
        let v = ScalarVolume::new(g.clone(), vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]).unwrap();
        let pool = Mask::new(g.clone(), vec![true, true, true, false, false, false]).unwrap();
        let wall = Mask::new(g, vec![false, false, false, true, true, true]).unwrap();
        let sd = baseline_sd(&v, &wall, &pool, 2.0).unwrap();
        let (n, s) = normalize_blood_pool(&v, &pool).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(sd, baseline_threshold(&n, &wall, 2.0).unwrap());
        assert_eq!(sd.count(), 3);
    }
}
