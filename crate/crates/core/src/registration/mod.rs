//! Hierarchical atlas-to-target registration maximising spatially encoded
//! mutual information: global affine, per-substructure local affines, then
//! a B-spline free-form deformation.
//!
//! Every transform maps target physical points into the atlas. Each stage is
//! optimised coarse-to-fine on an image pyramid and returns its starting
//! point whenever the full-resolution score would otherwise drop.

mod interp;
mod optimize;
mod parzen;
mod semi;

use rayon::prelude::*;

pub use interp::BsplineImage;
pub use optimize::{Ascent, OptimizerSettings};
pub use parzen::{bspline3_cdf, BinWeights, ParzenBinning};
pub use semi::{
    semi_score, spatial_joint_histogram, BandLayout, Evaluation, JointHistogram, SemiConfig,
    SemiObjective,
};

use crate::transform::{
    AffineTransform, FfdTransform, LocalAffine, SpatialTransform, TransformChain,
};
use crate::volume::{gaussian_smooth_voxels, labels, Geometry, LabelVolume, ScalarVolume};
use crate::{Error, Result};

/// Which stages [`register_hierarchical`] runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub global: bool,
    pub local: bool,
    pub ffd: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Stages {
            global: true,
            local: true,
            ffd: true,
        }
    }
}

impl Stages {
    /// Parses a comma-separated list such as `global,local,ffd`.
    pub fn parse(s: &str) -> Result<Stages> {
        let mut out = Stages {
            global: false,
            local: false,
            ffd: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "global" => out.global = true,
                "local" => out.local = true,
                "ffd" => out.ffd = true,
                other => return Err(Error::InvalidParameter(format!("unknown stage {other:?}"))),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationConfig {
    pub semi: SemiConfig,
    pub optimizer: OptimizerSettings,
    pub stages: Stages,
    /// Starting global affine (stands in for scanner-header alignment).
    pub init: AffineTransform,
    /// Gaussian falloff (mm) of local affines outside their regions.
    pub blend_radius: f64,
    /// Control point spacing of the deformable stage (mm).
    pub ffd_spacing: f64,
    /// Substructures smaller than this get no local affine.
    pub min_region_voxels: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            semi: SemiConfig::default(),
            optimizer: OptimizerSettings::default(),
            stages: Stages::default(),
            init: AffineTransform::identity(),
            blend_radius: 5.0,
            ffd_spacing: 16.0,
            min_region_voxels: 27,
        }
    }
}

/// Result of one stage: the transform plus the full-resolution scores at its
/// start and end (`final_score >= initial_score`). A stage whose gain is
/// within the optimizer tolerance returns its starting point.
#[derive(Debug, Clone)]
pub struct StageOutcome<T> {
    pub transform: T,
    pub initial_score: f64,
    pub final_score: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageLog {
    pub stage: &'static str,
    pub initial_score: f64,
    pub final_score: f64,
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub chain: TransformChain,
    pub log: Vec<StageLog>,
}

struct Level {
    objective: SemiObjective,
}

/// Objectives from full resolution (index 0) to coarsest, all sharing the
/// band layout and intensity binning of the full-resolution pair.
pub struct Pyramid {
    levels: Vec<Level>,
}

/// Smooth (σ = 1 voxel) and keep every other voxel along axes with at
/// least 16 voxels. `None` if no axis is long enough.
fn downsample(v: &ScalarVolume) -> Result<Option<ScalarVolume>> {
    let g = v.geometry();
    let halve: Vec<bool> = g.dims.iter().map(|&n| n >= 16).collect();
    if !halve.iter().any(|&h| h) {
        return Ok(None);
    }
    let sigma = [0, 1, 2].map(|a| if halve[a] { 1.0 } else { 0.0 });
    let smooth = gaussian_smooth_voxels(v.data(), g, sigma);
    let f = [0, 1, 2].map(|a| if halve[a] { 2 } else { 1 });
    let dims = [0, 1, 2].map(|a| g.dims[a].div_ceil(f[a]));
    let spacing = [0, 1, 2].map(|a| g.spacing[a] * f[a] as f64);
    let ng = Geometry::new(dims, spacing, g.origin)?;
    let data = (0..ng.len())
        .map(|i| {
            let [x, y, z] = ng.coords(i);
            smooth[g.index(x * f[0], y * f[1], z * f[2])]
        })
        .collect();
    Ok(Some(ScalarVolume::new(ng, data)?))
}

impl Pyramid {
    pub fn new(
        target: &ScalarVolume,
        atlas: &ScalarVolume,
        cfg: &SemiConfig,
        levels: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if levels == 0 {
            return Err(Error::InvalidParameter(
                "pyramid needs at least one level".into(),
            ));
        }
        let layout = BandLayout::from_target(target, cfg.n_bands)?;
        let tb = ParzenBinning::for_values(target.data(), cfg.bins, cfg.parzen_width)?;
        let arange = atlas.range();
        let mut t = target.clone();
        let mut a = atlas.clone();
        let mut out = Vec::with_capacity(levels);
        for l in 0..levels {
            if l > 0 {
                match downsample(&t)? {
                    Some(nt) => t = nt,
                    None => break,
                }
                if let Some(na) = downsample(&a)? {
                    a = na;
                }
            }
            out.push(Level {
                objective: SemiObjective::with_binning(&t, &a, cfg, &layout, &tb, arange)?,
            });
        }
        Ok(Pyramid { levels: out })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Full-resolution objective.
    pub fn objective(&self) -> &SemiObjective {
        &self.levels[0].objective
    }
}

/// A parameterised family of transforms around a fixed starting point
/// (all-zero parameters).
trait StageModel: Sync {
    type Cache: Sync;
    fn n_params(&self) -> usize;
    fn cache(&self, geometry: &Geometry) -> Self::Cache;
    fn points(&self, cache: &Self::Cache, theta: &[f64]) -> Vec<[f64; 3]>;
    fn gradient(&self, cache: &Self::Cache, theta: &[f64], forces: &[[f64; 3]]) -> Vec<f64>;
}

/// Voxels per partial sum in gradient reductions; fixed so results do not
/// depend on the thread count.
const REDUCE_CHUNK: usize = 4096;

fn reduce_chunks(n: usize, n_params: usize, f: impl Fn(usize, &mut [f64]) + Sync) -> Vec<f64> {
    let partials: Vec<Vec<f64>> = (0..n.div_ceil(REDUCE_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; n_params];
            for i in c * REDUCE_CHUNK..((c + 1) * REDUCE_CHUNK).min(n) {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; n_params];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

fn voxel_positions(g: &Geometry) -> Vec<[f64; 3]> {
    (0..g.len())
        .into_par_iter()
        .map(|i| g.physical_of_index(i))
        .collect()
}

fn run_stage<M: StageModel>(
    model: &M,
    pyramid: &Pyramid,
    opt: &OptimizerSettings,
) -> Result<StageOutcome<Vec<f64>>> {
    opt.validate()?;
    let zeros = vec![0.0; model.n_params()];
    let mut theta = zeros.clone();
    let mut evaluations = 0;
    let mut final_score = f64::NEG_INFINITY;
    let mut initial_score = f64::NEG_INFINITY;
    for (l, level) in pyramid.levels.iter().enumerate().rev() {
        let cache = model.cache(level.objective.target_geometry());
        let f = |th: &[f64], grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
            let e = level.objective.evaluate(&model.points(&cache, th), grad)?;
            let g = e.forces.map(|forces| model.gradient(&cache, th, &forces));
            Ok((e.score, g))
        };
        let scale = (1u64 << l) as f64;
        let r = optimize::ascend(
            &f,
            theta,
            opt.initial_step * scale,
            opt.min_step * scale,
            opt.max_iterations,
            opt.tolerance,
        )?;
        theta = r.params;
        evaluations += r.evaluations;
        if l == 0 {
            final_score = r.score;
            initial_score = f(&zeros, false)?.0;
            evaluations += 1;
        }
    }
    if !optimize::improves(final_score, initial_score, opt.tolerance) {
        theta = zeros;
        final_score = initial_score;
    }
    Ok(StageOutcome {
        transform: theta,
        initial_score,
        final_score,
        evaluations,
    })
}

/// RMS distance of the grid's voxels from its centre: the lever arm that
/// turns linear-part parameters into millimetres.
fn lever_arm(g: &Geometry) -> f64 {
    let s: f64 = (0..3)
        .map(|a| {
            let e = (g.dims[a] as f64) * g.spacing[a];
            e * e / 12.0
        })
        .sum();
    s.sqrt().max(1.0)
}

/// Parameters `[Θ (3×3 row-major), τ]` give
/// `x ↦ init(x) + (Θ/R)(x − c) + τ`.
struct AffineModel {
    init: AffineTransform,
    center: [f64; 3],
    radius: f64,
}

impl AffineModel {
    fn transform(&self, theta: &[f64]) -> AffineTransform {
        let mut linear = self.init.linear;
        let mut translation = self.init.translation;
        for i in 0..3 {
            translation[i] += theta[9 + i];
            for j in 0..3 {
                let m = theta[3 * i + j] / self.radius;
                linear[i][j] += m;
                translation[i] -= m * self.center[j];
            }
        }
        AffineTransform {
            linear,
            translation,
        }
    }
}

impl StageModel for AffineModel {
    type Cache = Vec<[f64; 3]>;

    fn n_params(&self) -> usize {
        12
    }

    fn cache(&self, geometry: &Geometry) -> Vec<[f64; 3]> {
        voxel_positions(geometry)
    }

    fn points(&self, xs: &Vec<[f64; 3]>, theta: &[f64]) -> Vec<[f64; 3]> {
        let t = self.transform(theta);
        xs.par_iter().map(|&x| t.apply(x)).collect()
    }

    fn gradient(&self, xs: &Vec<[f64; 3]>, _: &[f64], forces: &[[f64; 3]]) -> Vec<f64> {
        reduce_chunks(xs.len(), 12, |v, acc| {
            let f = forces[v];
            let x = xs[v];
            for i in 0..3 {
                acc[9 + i] += f[i];
                for j in 0..3 {
                    acc[3 * i + j] += f[i] * (x[j] - self.center[j]) / self.radius;
                }
            }
        })
    }
}

/// A substructure region in atlas space.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub label: u16,
    pub center: [f64; 3],
    pub radius: f64,
}

/// One region per substructure label (excluding background, wall and scar)
/// with at least `min_voxels` voxels: centroid and the radius of the sphere
/// with the same RMS spread.
pub fn label_regions(atlas_labels: &LabelVolume, min_voxels: usize) -> Vec<Region> {
    let g = atlas_labels.geometry();
    let mut out = Vec::new();
    for label in atlas_labels.present_labels() {
        if label == labels::BACKGROUND || label == labels::WALL || label == labels::SCAR {
            continue;
        }
        let pts: Vec<[f64; 3]> = atlas_labels
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| g.physical_of_index(i))
            .collect();
        if pts.len() < min_voxels.max(1) {
            continue;
        }
        let n = pts.len() as f64;
        let mut c = [0.0; 3];
        for p in &pts {
            for a in 0..3 {
                c[a] += p[a] / n;
            }
        }
        let ms: f64 = pts
            .iter()
            .map(|p| (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n;
        out.push(Region {
            label,
            center: c,
            radius: (ms * 5.0 / 3.0).sqrt(),
        });
    }
    out
}

/// Twelve parameters per region: local affine
/// `g ↦ g + (Θ_l/R_l)(g − c_l) + τ_l`, blended on top of the global affine.
struct LocalModel {
    global: AffineTransform,
    regions: Vec<Region>,
    blend_radius: f64,
}

struct LocalCache {
    xs: Vec<[f64; 3]>,
    gs: Vec<[f64; 3]>,
    /// `len × regions` blending factors.
    betas: Vec<f64>,
}

impl LocalModel {
    fn lever(r: &Region) -> f64 {
        r.radius.max(1.0)
    }

    fn chain(&self, theta: &[f64]) -> TransformChain {
        let locals = self
            .regions
            .iter()
            .enumerate()
            .map(|(l, r)| {
                let p = &theta[12 * l..12 * (l + 1)];
                let lever = Self::lever(r);
                let mut linear = AffineTransform::identity().linear;
                for i in 0..3 {
                    for j in 0..3 {
                        linear[i][j] += p[3 * i + j] / lever;
                    }
                }
                LocalAffine {
                    label: r.label,
                    center: r.center,
                    radius: r.radius,
                    transform: AffineTransform::about_center(
                        linear,
                        r.center,
                        [p[9], p[10], p[11]],
                    ),
                }
            })
            .collect();
        TransformChain {
            global: self.global.clone(),
            locals,
            blend_radius: self.blend_radius,
            ffd: None,
        }
    }
}

impl StageModel for LocalModel {
    type Cache = LocalCache;

    fn n_params(&self) -> usize {
        12 * self.regions.len()
    }

    fn cache(&self, geometry: &Geometry) -> LocalCache {
        let xs = voxel_positions(geometry);
        let gs: Vec<[f64; 3]> = xs.par_iter().map(|&x| self.global.apply(x)).collect();
        let probe = self.chain(&vec![0.0; self.n_params()]);
        let nr = self.regions.len();
        let betas = gs
            .par_iter()
            .flat_map_iter(|&g| {
                let mut b = Vec::with_capacity(nr);
                probe.blend_factors(g, &mut b);
                b
            })
            .collect();
        LocalCache { xs, gs, betas }
    }

    fn points(&self, cache: &LocalCache, theta: &[f64]) -> Vec<[f64; 3]> {
        let chain = self.chain(theta);
        cache.xs.par_iter().map(|&x| chain.map_affine(x)).collect()
    }

    fn gradient(&self, cache: &LocalCache, _: &[f64], forces: &[[f64; 3]]) -> Vec<f64> {
        let nr = self.regions.len();
        reduce_chunks(cache.xs.len(), 12 * nr, |v, acc| {
            let f = forces[v];
            let g = cache.gs[v];
            for (l, r) in self.regions.iter().enumerate() {
                let beta = cache.betas[v * nr + l];
                if beta == 0.0 {
                    continue;
                }
                let lever = Self::lever(r);
                let a = &mut acc[12 * l..12 * (l + 1)];
                for i in 0..3 {
                    let bf = beta * f[i];
                    a[9 + i] += bf;
                    for j in 0..3 {
                        a[3 * i + j] += bf * (g[j] - r.center[j]) / lever;
                    }
                }
            }
        })
    }
}

/// Control displacements of an FFD added to a fixed affine chain.
struct FfdModel {
    base: TransformChain,
    grid: FfdTransform,
}

struct FfdCache {
    xs: Vec<[f64; 3]>,
    base: Vec<[f64; 3]>,
}

impl FfdModel {
    fn ffd(&self, theta: &[f64]) -> FfdTransform {
        let mut f = self.grid.clone();
        for (d, p) in f.displacements.iter_mut().zip(theta.chunks_exact(3)) {
            *d = [p[0], p[1], p[2]];
        }
        f
    }
}

impl StageModel for FfdModel {
    type Cache = FfdCache;

    fn n_params(&self) -> usize {
        3 * self.grid.len()
    }

    fn cache(&self, geometry: &Geometry) -> FfdCache {
        let xs = voxel_positions(geometry);
        let base = xs.par_iter().map(|&x| self.base.map_affine(x)).collect();
        FfdCache { xs, base }
    }

    fn points(&self, cache: &FfdCache, theta: &[f64]) -> Vec<[f64; 3]> {
        let ffd = self.ffd(theta);
        cache
            .xs
            .par_iter()
            .zip(&cache.base)
            .map(|(&x, &q)| {
                let u = ffd.displacement(x);
                [q[0] + u[0], q[1] + u[1], q[2] + u[2]]
            })
            .collect()
    }

    fn gradient(&self, cache: &FfdCache, _: &[f64], forces: &[[f64; 3]]) -> Vec<f64> {
        reduce_chunks(cache.xs.len(), self.n_params(), |v, acc| {
            let f = forces[v];
            self.grid.for_each_support(cache.xs[v], |c, w| {
                acc[3 * c] += w * f[0];
                acc[3 * c + 1] += w * f[1];
                acc[3 * c + 2] += w * f[2];
            });
        })
    }
}

fn check_inputs(target: &ScalarVolume, atlas: &ScalarVolume) -> Result<()> {
    if target
        .data()
        .iter()
        .chain(atlas.data())
        .any(|v| !v.is_finite())
    {
        return Err(Error::InvalidParameter("volumes must be finite".into()));
    }
    Ok(())
}

fn affine_stage(
    pyramid: &Pyramid,
    init: &AffineTransform,
    opt: &OptimizerSettings,
) -> Result<StageOutcome<AffineTransform>> {
    init.validate()?;
    let g = pyramid.objective().target_geometry();
    let model = AffineModel {
        init: init.clone(),
        center: g.center(),
        radius: lever_arm(g),
    };
    let out = run_stage(&model, pyramid, opt)?;
    let t = model.transform(&out.transform);
    t.validate()?;
    Ok(StageOutcome {
        transform: t,
        initial_score: out.initial_score,
        final_score: out.final_score,
        evaluations: out.evaluations,
    })
}

fn local_stage(
    pyramid: &Pyramid,
    global: &AffineTransform,
    regions: Vec<Region>,
    blend_radius: f64,
    opt: &OptimizerSettings,
) -> Result<StageOutcome<TransformChain>> {
    if !(blend_radius.is_finite() && blend_radius > 0.0) {
        return Err(Error::InvalidParameter(
            "blend radius must be positive".into(),
        ));
    }
    let model = LocalModel {
        global: global.clone(),
        regions,
        blend_radius,
    };
    let out = run_stage(&model, pyramid, opt)?;
    let chain = model.chain(&out.transform);
    chain.validate()?;
    Ok(StageOutcome {
        transform: chain,
        initial_score: out.initial_score,
        final_score: out.final_score,
        evaluations: out.evaluations,
    })
}

fn ffd_stage(
    pyramid: &Pyramid,
    base: &TransformChain,
    grid_spacing: f64,
    opt: &OptimizerSettings,
) -> Result<StageOutcome<FfdTransform>> {
    let g = pyramid.objective().target_geometry();
    let min_spacing = 2.0 * g.spacing.iter().cloned().fold(0.0, f64::max);
    if !(grid_spacing >= min_spacing) {
        return Err(Error::InvalidParameter(format!(
            "control spacing {grid_spacing} mm is below two voxels ({min_spacing} mm)"
        )));
    }
    base.validate()?;
    let mut base = base.clone();
    base.ffd = None;
    let model = FfdModel {
        base,
        grid: FfdTransform::covering(g, grid_spacing)?,
    };
    let out = run_stage(&model, pyramid, opt)?;
    Ok(StageOutcome {
        transform: model.ffd(&out.transform),
        initial_score: out.initial_score,
        final_score: out.final_score,
        evaluations: out.evaluations,
    })
}

/// Global affine registration from `init`.
pub fn register_affine(
    target: &ScalarVolume,
    atlas: &ScalarVolume,
    init: &AffineTransform,
    cfg: &SemiConfig,
    opt: &OptimizerSettings,
) -> Result<StageOutcome<AffineTransform>> {
    check_inputs(target, atlas)?;
    let pyramid = Pyramid::new(target, atlas, cfg, opt.levels)?;
    affine_stage(&pyramid, init, opt)
}

/// Local affine refinement of each atlas substructure on top of `global`.
pub fn register_local(
    target: &ScalarVolume,
    atlas: (&ScalarVolume, &LabelVolume),
    global: &AffineTransform,
    cfg: &RegistrationConfig,
) -> Result<StageOutcome<TransformChain>> {
    check_inputs(target, atlas.0)?;
    atlas.0.geometry().check_same(atlas.1.geometry())?;
    let pyramid = Pyramid::new(target, atlas.0, &cfg.semi, cfg.optimizer.levels)?;
    let regions = label_regions(atlas.1, cfg.min_region_voxels);
    local_stage(&pyramid, global, regions, cfg.blend_radius, &cfg.optimizer)
}

/// Deformable refinement on top of the affine part of `init`; any FFD
/// already in `init` is replaced.
pub fn register_ffd(
    target: &ScalarVolume,
    atlas: &ScalarVolume,
    init: &TransformChain,
    cfg: &SemiConfig,
    grid_spacing: f64,
    opt: &OptimizerSettings,
) -> Result<StageOutcome<FfdTransform>> {
    check_inputs(target, atlas)?;
    let pyramid = Pyramid::new(target, atlas, cfg, opt.levels)?;
    ffd_stage(&pyramid, init, grid_spacing, opt)
}

/// Global affine, local affines and FFD in sequence. Disabled stages keep
/// their identity. The log holds the full-resolution score of every stage
/// that ran; it never decreases.
pub fn register_hierarchical(
    target: &ScalarVolume,
    atlas: (&ScalarVolume, &LabelVolume),
    cfg: &RegistrationConfig,
) -> Result<Registration> {
    check_inputs(target, atlas.0)?;
    atlas.0.geometry().check_same(atlas.1.geometry())?;
    let pyramid = Pyramid::new(target, atlas.0, &cfg.semi, cfg.optimizer.levels)?;
    let mut log = Vec::new();
    let mut chain = TransformChain::from_affine(cfg.init.clone());
    chain.blend_radius = cfg.blend_radius;

    if cfg.stages.global {
        let s = affine_stage(&pyramid, &cfg.init, &cfg.optimizer)
            .map_err(|e| e.in_stage("global affine"))?;
        log.push(StageLog {
            stage: "global",
            initial_score: s.initial_score,
            final_score: s.final_score,
        });
        chain.global = s.transform;
    }
    if cfg.stages.local {
        let regions = label_regions(atlas.1, cfg.min_region_voxels);
        let s = local_stage(
            &pyramid,
            &chain.global,
            regions,
            cfg.blend_radius,
            &cfg.optimizer,
        )
        .map_err(|e| e.in_stage("local affine"))?;
        log.push(StageLog {
            stage: "local",
            initial_score: s.initial_score,
            final_score: s.final_score,
        });
        chain = s.transform;
    }
    if cfg.stages.ffd {
        let s = ffd_stage(&pyramid, &chain, cfg.ffd_spacing, &cfg.optimizer)
            .map_err(|e| e.in_stage("deformable"))?;
        log.push(StageLog {
            stage: "ffd",
            initial_score: s.initial_score,
            final_score: s.final_score,
        });
        chain.ffd = Some(s.transform);
    }
    Ok(Registration { chain, log })
}

/// Warps an atlas image and its labels into target space.
pub fn warp_atlas(
    atlas: (&ScalarVolume, &LabelVolume),
    chain: &TransformChain,
    target: &Geometry,
) -> Result<(ScalarVolume, LabelVolume)> {
    Ok((
        crate::volume::resample(atlas.0, chain, target)?,
        crate::volume::resample_labels(atlas.1, chain, target)?,
    ))
}

/// Analytic gradient of the full-resolution objective with respect to the
/// control displacements of `ffd` added to `base`, with the score. Exposed
/// so the derivative can be checked against finite differences.
pub fn ffd_gradient(
    objective: &SemiObjective,
    base: &TransformChain,
    ffd: &FfdTransform,
) -> Result<(f64, Vec<f64>)> {
    let mut base = base.clone();
    base.ffd = None;
    let model = FfdModel {
        base,
        grid: ffd.clone(),
    };
    let theta: Vec<f64> = ffd.displacements.iter().flatten().copied().collect();
    let cache = model.cache(objective.target_geometry());
    let e = objective.evaluate(&model.points(&cache, &theta), true)?;
    let forces = e.forces.expect("forces requested");
    Ok((e.score, model.gradient(&cache, &theta, &forces)))
}

/// Analytic gradient with respect to the twelve entries of an affine
/// (row-major linear part, then translation), with the score.
pub fn affine_gradient(objective: &SemiObjective, t: &AffineTransform) -> Result<(f64, Vec<f64>)> {
    let xs = voxel_positions(objective.target_geometry());
    let pts: Vec<[f64; 3]> = xs.par_iter().map(|&x| t.apply(x)).collect();
    let e = objective.evaluate(&pts, true)?;
    let forces = e.forces.expect("forces requested");
    let g = reduce_chunks(xs.len(), 12, |v, acc| {
        let f = forces[v];
        for i in 0..3 {
            acc[9 + i] += f[i];
            for j in 0..3 {
                acc[3 * i + j] += f[i] * xs[v][j];
            }
        }
    });
    Ok((e.score, g))
}

/// Score of the full-resolution objective for an arbitrary transform.
pub fn objective_score(objective: &SemiObjective, t: &impl SpatialTransform) -> Result<f64> {
    let xs = voxel_positions(objective.target_geometry());
    let pts: Vec<[f64; 3]> = xs.par_iter().map(|&x| t.map_point(x)).collect();
    Ok(objective.evaluate(&pts, false)?.score)
}
