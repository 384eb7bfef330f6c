//! Synthetic "heart" phantoms: spherical chambers with a wall shell, scar
//! wedges on the wall, smooth background texture, optional blur and noise.
//!
//! The label volume is exact: chamber voxels carry the shell's label, wall
//! voxels [`labels::WALL`] and scar voxels [`labels::SCAR`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::morphology::gaussian_smooth_voxels;
use super::{labels, Geometry, LabelVolume, ScalarVolume};
use crate::{Error, Result};

/// Spherical chamber of radius `radius` surrounded by a wall shell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shell {
    pub label: u16,
    pub center: [f64; 3],
    pub radius: f64,
    pub wall_thickness: f64,
    pub pool_intensity: f64,
    pub wall_intensity: f64,
}

impl Shell {
    fn outer(&self) -> f64 {
        self.radius + self.wall_thickness
    }
}

/// Wedge of a shell's wall between two azimuths (degrees, about z through the
/// shell centre), spanning every slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScarArc {
    pub shell: usize,
    pub start_deg: f64,
    pub extent_deg: f64,
    pub boost: f64,
}

/// Additive smooth Gaussian bump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 3],
    pub sigma: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    #[serde(default)]
    pub origin: [f64; 3],
    pub background: f64,
    pub shells: Vec<Shell>,
    #[serde(default)]
    pub scar_arcs: Vec<ScarArc>,
    #[serde(default)]
    pub blobs: Vec<Blob>,
    /// Point-spread blur applied before noise (mm).
    #[serde(default)]
    pub blur_sigma_mm: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

fn finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{what} must be finite")))
    }
}

impl PhantomSpec {
    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.spacing, self.origin)
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.geometry()?;
        if g.len() > 1 << 28 {
            return Err(Error::InvalidParameter("phantom too large".into()));
        }
        finite(self.background, "background")?;
        for (i, s) in self.shells.iter().enumerate() {
            if !(s.radius > 0.0 && s.radius.is_finite())
                || !(s.wall_thickness > 0.0 && s.wall_thickness.is_finite())
            {
                return Err(Error::InvalidParameter(format!(
                    "shell {i}: radius and wall thickness must be positive"
                )));
            }
            for c in s.center {
                finite(c, "shell centre")?;
            }
            finite(s.pool_intensity, "pool intensity")?;
            finite(s.wall_intensity, "wall intensity")?;
            if s.label == labels::BACKGROUND || s.label == labels::WALL || s.label == labels::SCAR {
                return Err(Error::InvalidParameter(format!(
                    "shell {i}: label {} is reserved",
                    s.label
                )));
            }
        }
        for i in 0..self.shells.len() {
            for j in i + 1..self.shells.len() {
                let (a, b) = (&self.shells[i], &self.shells[j]);
                let d = dist(a.center, b.center);
                if d < a.outer() + b.outer() {
                    return Err(Error::InvalidParameter(format!(
                        "shells {i} and {j} overlap"
                    )));
                }
            }
        }
        for (i, arc) in self.scar_arcs.iter().enumerate() {
            if arc.shell >= self.shells.len() {
                return Err(Error::InvalidParameter(format!(
                    "scar arc {i} refers to missing shell {}",
                    arc.shell
                )));
            }
            if !(arc.extent_deg > 0.0 && arc.extent_deg <= 360.0) {
                return Err(Error::InvalidParameter(format!(
                    "scar arc {i}: extent must be in (0, 360]"
                )));
            }
            finite(arc.start_deg, "arc start")?;
            finite(arc.boost, "arc boost")?;
        }
        for b in &self.blobs {
            if !(b.sigma > 0.0 && b.sigma.is_finite()) {
                return Err(Error::InvalidParameter(
                    "blob sigma must be positive".into(),
                ));
            }
            finite(b.amplitude, "blob amplitude")?;
            for c in b.center {
                finite(c, "blob centre")?;
            }
        }
        if !(self.blur_sigma_mm >= 0.0 && self.blur_sigma_mm.is_finite()) {
            return Err(Error::InvalidParameter("blur sigma must be >= 0".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidParameter("noise sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<PhantomSpec> {
        let spec: PhantomSpec =
            serde_json::from_str(text).map_err(|e| Error::parse(e.line(), e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("phantom spec serialises")
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Azimuth of `(dx, dy)` as a fraction of a full turn in `[0, 1)`.
fn turn_fraction(dx: f64, dy: f64) -> f64 {
    let f = dy.atan2(dx) / std::f64::consts::TAU;
    if f < 0.0 {
        f + 1.0
    } else {
        f
    }
}

fn in_arc(arc: &ScarArc, frac: f64) -> bool {
    if arc.extent_deg >= 360.0 {
        return true;
    }
    let start = (arc.start_deg / 360.0).rem_euclid(1.0);
    let end = start + arc.extent_deg / 360.0;
    if end <= 1.0 {
        frac >= start && frac < end
    } else {
        frac >= start || frac < end - 1.0
    }
}

/// Builds the intensity phantom and its exact label volume.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(ScalarVolume, LabelVolume)> {
    spec.validate()?;
    let g = spec.geometry()?;
    let n = g.len();
    let mut intensity = vec![0.0; n];
    let mut label = vec![labels::BACKGROUND; n];

    for idx in 0..n {
        let p = g.physical_of_index(idx);
        let mut v = spec.background;
        for b in &spec.blobs {
            let d2 = (p[0] - b.center[0]).powi(2)
                + (p[1] - b.center[1]).powi(2)
                + (p[2] - b.center[2]).powi(2);
            v += b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
        }
        for (si, s) in spec.shells.iter().enumerate() {
            let r = dist(p, s.center);
            if r <= s.radius {
                v = s.pool_intensity;
                label[idx] = s.label;
            } else if r <= s.outer() {
                v = s.wall_intensity;
                label[idx] = labels::WALL;
                let frac = turn_fraction(p[0] - s.center[0], p[1] - s.center[1]);
                for arc in spec.scar_arcs.iter().filter(|a| a.shell == si) {
                    if in_arc(arc, frac) {
                        v = s.wall_intensity + arc.boost;
                        label[idx] = labels::SCAR;
                        break;
                    }
                }
            }
        }
        intensity[idx] = v;
    }

    if spec.blur_sigma_mm > 0.0 {
        let sigma = [
            spec.blur_sigma_mm / g.spacing[0],
            spec.blur_sigma_mm / g.spacing[1],
            spec.blur_sigma_mm / g.spacing[2],
        ];
        intensity = gaussian_smooth_voxels(&intensity, &g, sigma);
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        for v in intensity.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    // Stored intensities are f32-exact so volumes survive a write/read cycle.
    for v in intensity.iter_mut() {
        *v = *v as f32 as f64;
    }

    let mut table = labels::standard_table();
    for s in &spec.shells {
        table
            .entry(s.label)
            .or_insert_with(|| format!("label{}", s.label));
    }
    Ok((
        ScalarVolume::new(g.clone(), intensity)?,
        LabelVolume::new(g, label, table)?,
    ))
}
