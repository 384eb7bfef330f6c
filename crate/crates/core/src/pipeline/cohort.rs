//! Synthetic LGE cohort: LA shell with a quarter-wedge scar and nulled
//! healthy wall, three other chambers, textured background, a smooth coil
//! bias field and Rician noise.
//! Atlases come from the same generator; the clicker plays the annotator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    extract_wall, normalize_blood_pool, AnatomySource, PatientInput, PipelineConfig, SliceClick,
};
use crate::superpixel::{mask_slice, slic_volume};
use crate::volume::{
    labels, make_phantom, Blob, LabelVolume, Mask, PhantomSpec, ScalarVolume, ScarArc, Shell,
};
use crate::{Error, Result};

/// FEP of the wedge scar: a quarter turn of the wall.
pub const CONSTRUCTED_FEP: f64 = 25.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CaseParams {
    pub seed: u64,
    /// Noise standard deviation as a fraction of the scar contrast.
    pub noise_frac: f64,
    /// Patchy enhancement: the scar boost is scaled by `1 − patchiness·u`
    /// with `u` a smooth random field in [0, 1].
    pub patchiness: f64,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl CaseParams {
    pub fn new(seed: u64, noise_frac: f64) -> Self {
        CaseParams {
            seed,
            noise_frac,
            patchiness: 0.0,
            dims: [64, 64, 20],
            spacing: [1.0, 1.0, 2.0],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub id: String,
    pub lge: ScalarVolume,
    /// Anatomical scan of the same patient in the same frame: bright blood,
    /// no enhancement. Atlases are registered to this.
    pub roadmap: ScalarVolume,
    /// Exact labels including WALL and SCAR.
    pub truth: LabelVolume,
    /// Chamber labels only (what an atlas or a segmentation supplies).
    pub anatomy: LabelVolume,
    pub scar: Mask,
    /// Scar minus healthy-wall intensity.
    pub contrast: f64,
    pub spec: PhantomSpec,
}

fn spec_for(p: &CaseParams, rng: &mut ChaCha8Rng) -> (PhantomSpec, f64) {
    let [nx, ny, nz] = p.dims;
    let ext = [
        nx as f64 * p.spacing[0],
        ny as f64 * p.spacing[1],
        nz as f64 * p.spacing[2],
    ];
    // Integer in-plane centre and a wedge starting on an axis keep the four
    // quadrants of the wall congruent, so the wedge is exactly a quarter.
    // The heart shifts and scales as a whole; each chamber then varies a
    // little on its own.
    let scale = rng.random_range(0.9..1.1);
    let cx = (0.4 * ext[0]).round() + rng.random_range(-3..=3) as f64 * p.spacing[0];
    let cy = (0.47 * ext[1]).round() + rng.random_range(-3..=3) as f64 * p.spacing[1];
    let cz = (ext[2] / 2.0 / p.spacing[2]).round() * p.spacing[2]
        + rng.random_range(-1..=1) as f64 * p.spacing[2];
    let radius = 10.0 * scale * rng.random_range(0.97..1.03);
    let contrast = 260.0 + rng.random_range(-20.0..20.0);
    let start = 90.0 * rng.random_range(0..4) as f64;
    let mut chamber = |label: u16, offset: [f64; 2], radius: f64, pool: f64| Shell {
        label,
        center: [
            cx + scale * offset[0] + rng.random_range(-0.5..0.5),
            cy + scale * offset[1] + rng.random_range(-0.5..0.5),
            cz,
        ],
        radius: radius * scale * rng.random_range(0.97..1.03),
        wall_thickness: 2.0,
        pool_intensity: pool,
        wall_intensity: 40.0,
    };
    let others = [
        chamber(labels::AO, [26.0, -18.0], 5.5, 260.0),
        chamber(labels::LV, [-12.0, 25.0], 6.0, 220.0),
        chamber(labels::RA, [27.0, 14.0], 7.0, 230.0),
    ];
    let mut blobs = Vec::new();
    for _ in 0..30 {
        let center = [
            rng.random_range(0.0..ext[0]),
            rng.random_range(0.0..ext[1]),
            rng.random_range(0.0..ext[2]),
        ];
        let sigma = rng.random_range(3.0..6.0);
        let amplitude = rng.random_range(-12.0..12.0);
        blobs.push(Blob {
            center,
            sigma,
            amplitude,
        });
    }
    let spec = PhantomSpec {
        dims: p.dims,
        spacing: p.spacing,
        origin: [0.0; 3],
        background: 70.0,
        shells: [Shell {
            label: labels::LA,
            center: [cx, cy, cz],
            radius,
            wall_thickness: 3.0,
            pool_intensity: 240.0,
            wall_intensity: 40.0,
        }]
        .into_iter()
        .chain(others)
        .collect(),
        scar_arcs: vec![ScarArc {
            shell: 0,
            start_deg: start,
            extent_deg: 90.0,
            boost: contrast,
        }],
        blobs,
        blur_sigma_mm: 0.5,
        noise_sigma: 0.0,
        seed: p.seed,
    };
    (spec, contrast)
}

impl SyntheticCase {
    /// Pipeline input with the true anatomy, or with `atlases` registered to
    /// the anatomical scan.
    pub fn input(
        &self,
        clicks: Vec<SliceClick>,
        atlases: Option<Vec<(String, ScalarVolume, LabelVolume)>>,
    ) -> PatientInput {
        PatientInput {
            id: self.id.clone(),
            lge: self.lge.clone(),
            anatomy: match atlases {
                None => AnatomySource::Given(self.anatomy.clone()),
                Some(atlases) => AnatomySource::Atlases {
                    target: Some(self.roadmap.clone()),
                    atlases,
                },
            },
            clicks,
            reference_scar: Some(self.scar.clone()),
        }
    }
}

/// Coil bias field, then complex Gaussian noise taken to magnitude (Rician),
/// as in a reconstructed MR image.
fn acquire(img: &ScalarVolume, noise_sigma: f64, rng: &mut ChaCha8Rng) -> Result<ScalarVolume> {
    let g = img.geometry();
    let c = g.center();
    let half = [c[0].max(1.0), c[1].max(1.0)];
    let normal =
        Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let q = g.physical_of_index(i);
            let bias = 1.0 + 0.06 * (q[0] - c[0]) / half[0] + 0.04 * (q[1] - c[1]) / half[1];
            let s = v * bias;
            let m = if noise_sigma > 0.0 {
                (s + normal.sample(rng)).hypot(normal.sample(rng))
            } else {
                s
            };
            m as f32 as f64
        })
        .collect();
    ScalarVolume::new(g.clone(), data)
}

/// Sum of random Gaussian bumps rescaled to [0, 1].
fn smooth_field(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let ext: Vec<f64> = (0..3)
        .map(|a| spec.dims[a] as f64 * spec.spacing[a])
        .collect();
    let blobs = (0..60)
        .map(|_| Blob {
            center: [0, 1, 2].map(|a| rng.random_range(0.0..ext[a])),
            sigma: rng.random_range(2.0..4.0),
            amplitude: rng.random_range(-1.0..1.0),
        })
        .collect();
    let (f, _) = make_phantom(&PhantomSpec {
        background: 0.0,
        shells: Vec::new(),
        scar_arcs: Vec::new(),
        blobs,
        blur_sigma_mm: 0.0,
        noise_sigma: 0.0,
        ..spec.clone()
    })?;
    let (lo, hi) = f.range();
    Ok(f.data()
        .iter()
        .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
        .collect())
}

/// One synthetic patient.
pub fn synthetic_case(id: &str, p: &CaseParams) -> Result<SyntheticCase> {
    if !(p.noise_frac >= 0.0 && p.noise_frac.is_finite()) {
        return Err(Error::InvalidParameter(
            "noise fraction must be >= 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let (spec, contrast) = spec_for(p, &mut rng);
    if !(0.0..1.0).contains(&p.patchiness) {
        return Err(Error::InvalidParameter(
            "patchiness must be in [0, 1)".into(),
        ));
    }
    let (scarred, truth) = make_phantom(&spec)?;
    // Same anatomy and body texture, bright blood, no enhancement.
    let (healthy, _) = make_phantom(&PhantomSpec {
        scar_arcs: Vec::new(),
        ..spec.clone()
    })?;
    let img = if p.patchiness > 0.0 {
        let u = smooth_field(
            &spec,
            &mut ChaCha8Rng::seed_from_u64(p.seed ^ 0x9e37_79b9_7f4a_7c15),
        )?;
        let data = scarred
            .data()
            .iter()
            .zip(healthy.data())
            .zip(u)
            .map(|((&s, &h), u)| h + (s - h) * (1.0 - p.patchiness * u))
            .collect();
        ScalarVolume::new(scarred.geometry().clone(), data)?
    } else {
        scarred
    };
    let lge = acquire(&img, p.noise_frac * contrast, &mut rng)?;
    let roadmap = acquire(&healthy, p.noise_frac * contrast, &mut rng)?;
    let anatomy = LabelVolume::with_standard_table(
        lge.geometry().clone(),
        truth
            .data()
            .iter()
            .map(|&l| {
                if l == labels::WALL || l == labels::SCAR {
                    labels::BACKGROUND
                } else {
                    l
                }
            })
            .collect(),
    )?;
    Ok(SyntheticCase {
        id: id.to_string(),
        scar: truth.mask_of(&[labels::SCAR]),
        lge,
        roadmap,
        truth,
        anatomy,
        contrast,
        spec,
    })
}

/// `n` noiseless atlases `(id, anatomical image, chamber labels)`.
pub fn synthetic_atlases(
    n: usize,
    seed: u64,
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Result<Vec<(String, ScalarVolume, LabelVolume)>> {
    (0..n)
        .map(|k| {
            let p = CaseParams {
                seed: seed.wrapping_mul(7919).wrapping_add(1000 + k as u64),
                noise_frac: 0.0,
                patchiness: 0.0,
                dims,
                spacing,
            };
            let c = synthetic_case(&format!("atlas{k}"), &p)?;
            Ok((c.id, c.roadmap, c.anatomy))
        })
        .collect()
}

/// Annotator stand-in. Superpixels are computed as the pipeline would on
/// the true anatomy; every superpixel whose wall part is mostly scar gets
/// one click on the scar pixel nearest its centroid, moved by up to
/// `jitter` pixels in a random direction (clamped to the slice).
pub fn synthetic_clicks(
    case: &SyntheticCase,
    cfg: &PipelineConfig,
    jitter: f64,
    seed: u64,
) -> Result<Vec<SliceClick>> {
    let masks = extract_wall(&case.anatomy, cfg)?;
    let (norm, _) = normalize_blood_pool(&case.lge, &masks.pool)?;
    let maps = slic_volume(&norm, &cfg.slic)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (z, m) in maps.iter().enumerate() {
        let scar = mask_slice(&case.scar, z);
        let wall = mask_slice(&masks.wall, z);
        for (id, members) in m.members().iter().enumerate() {
            let in_wall = members.iter().filter(|&&i| wall[i]).count();
            let scar_px: Vec<usize> = members
                .iter()
                .copied()
                .filter(|&i| scar[i] && wall[i])
                .collect();
            if in_wall == 0 || 2 * scar_px.len() <= in_wall {
                continue;
            }
            let c = m.centroids[id];
            let &best = scar_px
                .iter()
                .min_by(|&&a, &&b| {
                    let d = |i: usize| {
                        let (x, y) = ((i % m.width) as f64, (i / m.width) as f64);
                        (x - c.x).powi(2) + (y - c.y).powi(2)
                    };
                    d(a).total_cmp(&d(b)).then(a.cmp(&b))
                })
                .expect("non-empty");
            let (mut x, mut y) = ((best % m.width) as f64, (best / m.width) as f64);
            if jitter > 0.0 {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                let r = rng.random_range(0.0..=jitter);
                x += r * a.cos();
                y += r * a.sin();
            }
            out.push(SliceClick {
                slice: z,
                x: (x.round().max(0.0) as usize).min(m.width - 1),
                y: (y.round().max(0.0) as usize).min(m.height - 1),
            });
        }
    }
    Ok(out)
}

/// `n` synthetic patients (ids `p00`, `p01`, …) with ideal clicks. With
/// `atlases > 0` each patient's anatomy comes from that many synthetic
/// atlases registered to its anatomical scan; otherwise the true anatomy is
/// given.
pub fn synthetic_cohort(
    n: usize,
    noise_frac: f64,
    atlases: usize,
    seed: u64,
    cfg: &PipelineConfig,
) -> Result<Vec<(SyntheticCase, PatientInput)>> {
    let base = CaseParams::new(0, noise_frac);
    let atlas_set = if atlases > 0 {
        Some(synthetic_atlases(atlases, seed, base.dims, base.spacing)?)
    } else {
        None
    };
    (0..n)
        .map(|i| {
            let p = CaseParams {
                seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                ..base.clone()
            };
            let case = synthetic_case(&format!("p{i:02}"), &p)?;
            let clicks = synthetic_clicks(&case, cfg, 0.0, p.seed)?;
            let input = case.input(clicks, atlas_set.clone());
            Ok((case, input))
        })
        .collect()
}
