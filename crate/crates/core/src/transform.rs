//! Spatial transforms mapping target-space points (mm) into atlas space.
//!
//! A [`TransformChain`] composes a global affine, optional per-substructure
//! local affines blended by distance to each substructure, and an optional
//! cubic B-spline free-form deformation whose displacement is added on top.

use std::fmt::Write as _;

use crate::volume::Geometry;
use crate::{Error, Result};

/// Anything that maps a physical target point to a physical source point.
pub trait SpatialTransform: Sync {
    fn map_point(&self, p: [f64; 3]) -> [f64; 3];

    /// Checks that the transform can be evaluated (e.g. invertible affines).
    fn validate(&self) -> Result<()> {
        Ok(())
    }
}

const MIN_ABS_DET: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransform {
    pub linear: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

pub(crate) fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

#[inline]
pub(crate) fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

impl AffineTransform {
    pub fn new(linear: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let t = AffineTransform {
            linear,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn identity() -> Self {
        AffineTransform {
            linear: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        AffineTransform {
            translation: t,
            ..Self::identity()
        }
    }

    /// Rotation by `degrees` about the z axis through `center`.
    pub fn rotation_z(degrees: f64, center: [f64; 3]) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        let linear = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        Self::about_center(linear, center, [0.0; 3])
    }

    /// `p ↦ linear·(p − center) + center + shift`.
    pub fn about_center(linear: [[f64; 3]; 3], center: [f64; 3], shift: [f64; 3]) -> Self {
        let lc = mat_vec(&linear, center);
        AffineTransform {
            linear,
            translation: [
                center[0] + shift[0] - lc[0],
                center[1] + shift[1] - lc[1],
                center[2] + shift[2] - lc[2],
            ],
        }
    }

    pub fn determinant(&self) -> f64 {
        det3(&self.linear)
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = mat_vec(&self.linear, p);
        [
            q[0] + self.translation[0],
            q[1] + self.translation[1],
            q[2] + self.translation[2],
        ]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        let mut linear = [[0.0; 3]; 3];
        for (i, row) in linear.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.linear[i][k] * other.linear[k][j]).sum();
            }
        }
        AffineTransform {
            linear,
            translation: self.apply(other.translation),
        }
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let m = &self.linear;
        let det = det3(m);
        if det.abs() <= MIN_ABS_DET || !det.is_finite() {
            return Err(Error::DegenerateTransform(format!("determinant {det}")));
        }
        let inv = [
            [
                (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det,
                (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det,
                (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det,
            ],
            [
                (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det,
                (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det,
                (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det,
            ],
            [
                (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det,
                (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det,
                (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det,
            ],
        ];
        let t = mat_vec(&inv, self.translation);
        Ok(AffineTransform {
            linear: inv,
            translation: [-t[0], -t[1], -t[2]],
        })
    }

    /// The 12 numbers of `[linear | translation]`, row-major.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for i in 0..3 {
            out[4 * i..4 * i + 3].copy_from_slice(&self.linear[i]);
            out[4 * i + 3] = self.translation[i];
        }
        out
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return Err(Error::InvalidParameter(format!(
                "affine needs 12 numbers, got {}",
                v.len()
            )));
        }
        let mut linear = [[0.0; 3]; 3];
        let mut translation = [0.0; 3];
        for i in 0..3 {
            linear[i].copy_from_slice(&v[4 * i..4 * i + 3]);
            translation[i] = v[4 * i + 3];
        }
        Self::new(linear, translation)
    }
}

impl SpatialTransform for AffineTransform {
    fn map_point(&self, p: [f64; 3]) -> [f64; 3] {
        self.apply(p)
    }

    fn validate(&self) -> Result<()> {
        if self.to_row_major().iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateTransform("non-finite affine entry".into()));
        }
        let det = self.determinant();
        if det.abs() <= MIN_ABS_DET {
            return Err(Error::DegenerateTransform(format!(
                "affine determinant {det} is not invertible"
            )));
        }
        Ok(())
    }
}

/// Uniform cubic B-spline basis `β³`.
#[inline]
pub fn bspline3(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + 0.5 * a * a * a
    } else if a < 2.0 {
        let t = 2.0 - a;
        t * t * t / 6.0
    } else {
        0.0
    }
}

/// Derivative of [`bspline3`].
#[inline]
pub fn bspline3_deriv(x: f64) -> f64 {
    let a = x.abs();
    let s = x.signum();
    if a < 1.0 {
        s * (-2.0 * a + 1.5 * a * a)
    } else if a < 2.0 {
        let t = 2.0 - a;
        -s * 0.5 * t * t
    } else {
        0.0
    }
}

/// The four non-zero cubic B-spline weights around continuous coordinate `t`:
/// nodes `base..base+4` with `base = floor(t) - 1`.
#[inline]
pub fn bspline3_weights(t: f64) -> (isize, [f64; 4]) {
    let base = t.floor() as isize - 1;
    let f = t - t.floor();
    let w = [
        (1.0 - f).powi(3) / 6.0,
        (3.0 * f * f * f - 6.0 * f * f + 4.0) / 6.0,
        (-3.0 * f * f * f + 3.0 * f * f + 3.0 * f + 1.0) / 6.0,
        f * f * f / 6.0,
    ];
    (base, w)
}

/// Weights and their derivatives with respect to `t`.
#[inline]
pub fn bspline3_weights_deriv(t: f64) -> (isize, [f64; 4], [f64; 4]) {
    let (base, w) = bspline3_weights(t);
    let f = t - t.floor();
    let d = [
        -0.5 * (1.0 - f) * (1.0 - f),
        1.5 * f * f - 2.0 * f,
        -1.5 * f * f + f + 0.5,
        0.5 * f * f,
    ];
    (base, w, d)
}

/// Cubic B-spline displacement field on a regular control grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FfdTransform {
    pub grid_dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    /// One displacement (mm) per control point, x-fastest.
    pub displacements: Vec<[f64; 3]>,
}

/// Largest control grid accepted from files.
const MAX_CONTROL_POINTS: usize = 1 << 24;

impl FfdTransform {
    pub fn new(
        grid_dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        displacements: Vec<[f64; 3]>,
    ) -> Result<Self> {
        let t = FfdTransform {
            grid_dims,
            spacing,
            origin,
            displacements,
        };
        t.validate()?;
        Ok(t)
    }

    /// Zero-displacement grid with `control_spacing` mm covering `geometry`
    /// plus one control point of margin before and two after on every axis.
    pub fn covering(geometry: &Geometry, control_spacing: f64) -> Result<Self> {
        if !(control_spacing.is_finite() && control_spacing > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "control spacing must be positive, got {control_spacing}"
            )));
        }
        let mut dims = [0; 3];
        let mut origin = [0.0; 3];
        for a in 0..3 {
            let extent = (geometry.dims[a] - 1) as f64 * geometry.spacing[a];
            let intervals = (extent / control_spacing - 1e-9).ceil().max(0.0) as usize;
            dims[a] = intervals + 3;
            origin[a] = geometry.origin[a] - control_spacing;
        }
        let n = dims[0] * dims[1] * dims[2];
        Self::new(dims, [control_spacing; 3], origin, vec![[0.0; 3]; n])
    }

    pub fn len(&self) -> usize {
        self.displacements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.displacements.is_empty()
    }

    #[inline]
    pub fn control_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.grid_dims[0] * (j + self.grid_dims[1] * k)
    }

    /// Physical position of control point `(i, j, k)`.
    pub fn control_position(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    /// Control-grid support of point `p`: per axis the first node and weights.
    #[inline]
    pub(crate) fn support(&self, p: [f64; 3]) -> [(isize, [f64; 4]); 3] {
        let mut out = [(0, [0.0; 4]); 3];
        for a in 0..3 {
            out[a] = bspline3_weights((p[a] - self.origin[a]) / self.spacing[a]);
        }
        out
    }

    /// Visits each control point supporting `p` with its tensor weight.
    #[inline]
    pub(crate) fn for_each_support(&self, p: [f64; 3], mut f: impl FnMut(usize, f64)) {
        let s = self.support(p);
        let [gx, gy, gz] = self.grid_dims;
        for (c, wz) in s[2].1.iter().enumerate() {
            let k = s[2].0 + c as isize;
            if k < 0 || k as usize >= gz {
                continue;
            }
            for (b, wy) in s[1].1.iter().enumerate() {
                let j = s[1].0 + b as isize;
                if j < 0 || j as usize >= gy {
                    continue;
                }
                let wyz = wy * wz;
                for (a, wx) in s[0].1.iter().enumerate() {
                    let i = s[0].0 + a as isize;
                    if i < 0 || i as usize >= gx {
                        continue;
                    }
                    f(
                        self.control_index(i as usize, j as usize, k as usize),
                        wx * wyz,
                    );
                }
            }
        }
    }

    /// Displacement at `p`.
    #[inline]
    pub fn displacement(&self, p: [f64; 3]) -> [f64; 3] {
        let mut u = [0.0; 3];
        self.for_each_support(p, |idx, w| {
            let d = self.displacements[idx];
            u[0] += w * d[0];
            u[1] += w * d[1];
            u[2] += w * d[2];
        });
        u
    }

    /// Largest control displacement magnitude.
    pub fn max_displacement(&self) -> f64 {
        self.displacements
            .iter()
            .map(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt())
            .fold(0.0, f64::max)
    }
}

impl SpatialTransform for FfdTransform {
    fn map_point(&self, p: [f64; 3]) -> [f64; 3] {
        let u = self.displacement(p);
        [p[0] + u[0], p[1] + u[1], p[2] + u[2]]
    }

    fn validate(&self) -> Result<()> {
        let n = self
            .grid_dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && n <= MAX_CONTROL_POINTS)
            .ok_or_else(|| {
                Error::InvalidParameter(format!("bad control grid {:?}", self.grid_dims))
            })?;
        if n != self.displacements.len() {
            return Err(Error::InvalidParameter(format!(
                "control grid has {n} points but {} displacements",
                self.displacements.len()
            )));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidParameter(
                "control spacing must be positive".into(),
            ));
        }
        if self.origin.iter().any(|o| !o.is_finite())
            || self.displacements.iter().flatten().any(|d| !d.is_finite())
        {
            return Err(Error::InvalidParameter("non-finite FFD parameter".into()));
        }
        Ok(())
    }
}

/// Affine refinement for one substructure, active near its region.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalAffine {
    pub label: u16,
    /// Region centre in atlas space (mm).
    pub center: [f64; 3],
    /// Region radius (mm); points inside get full weight.
    pub radius: f64,
    pub transform: AffineTransform,
}

impl LocalAffine {
    /// Gaussian falloff of distance to the region sphere.
    #[inline]
    pub fn weight(&self, q: [f64; 3], blend_radius: f64) -> f64 {
        let d = ((q[0] - self.center[0]).powi(2)
            + (q[1] - self.center[1]).powi(2)
            + (q[2] - self.center[2]).powi(2))
        .sqrt();
        let outside = (d - self.radius).max(0.0);
        (-(outside * outside) / (2.0 * blend_radius * blend_radius)).exp()
    }
}

/// Global affine, then blended local affines, plus FFD displacement.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformChain {
    pub global: AffineTransform,
    pub locals: Vec<LocalAffine>,
    pub blend_radius: f64,
    pub ffd: Option<FfdTransform>,
}

impl Default for TransformChain {
    fn default() -> Self {
        Self::identity()
    }
}

impl TransformChain {
    pub fn identity() -> Self {
        Self::from_affine(AffineTransform::identity())
    }

    pub fn from_affine(global: AffineTransform) -> Self {
        TransformChain {
            global,
            locals: Vec::new(),
            blend_radius: 5.0,
            ffd: None,
        }
    }

    /// Normalised blending factors `w_l / max(1, Σ w)` at atlas point `g`.
    #[inline]
    pub(crate) fn blend_factors(&self, g: [f64; 3], out: &mut Vec<f64>) {
        out.clear();
        let mut total = 0.0;
        for l in &self.locals {
            let w = l.weight(g, self.blend_radius);
            total += w;
            out.push(w);
        }
        let norm = total.max(1.0);
        out.iter_mut().for_each(|w| *w /= norm);
    }

    /// Affine part (global plus blended locals) without the FFD.
    #[inline]
    pub fn map_affine(&self, p: [f64; 3]) -> [f64; 3] {
        let g = self.global.apply(p);
        if self.locals.is_empty() {
            return g;
        }
        let mut q = g;
        let mut total = 0.0;
        let mut acc = [0.0; 3];
        for l in &self.locals {
            let w = l.weight(g, self.blend_radius);
            total += w;
            let lq = l.transform.apply(g);
            for a in 0..3 {
                acc[a] += w * (lq[a] - g[a]);
            }
        }
        let norm = total.max(1.0);
        for a in 0..3 {
            q[a] += acc[a] / norm;
        }
        q
    }
}

impl SpatialTransform for TransformChain {
    fn map_point(&self, p: [f64; 3]) -> [f64; 3] {
        let mut q = self.map_affine(p);
        if let Some(ffd) = &self.ffd {
            let u = ffd.displacement(p);
            for a in 0..3 {
                q[a] += u[a];
            }
        }
        q
    }

    fn validate(&self) -> Result<()> {
        self.global.validate()?;
        if !(self.blend_radius.is_finite() && self.blend_radius > 0.0) {
            return Err(Error::InvalidParameter(
                "blend radius must be positive".into(),
            ));
        }
        for l in &self.locals {
            l.transform.validate()?;
            if !(l.radius.is_finite() && l.radius >= 0.0) || l.center.iter().any(|c| !c.is_finite())
            {
                return Err(Error::InvalidParameter(format!(
                    "bad region for local affine {}",
                    l.label
                )));
            }
        }
        if let Some(f) = &self.ffd {
            f.validate()?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Text format
//
//   global: <12 numbers, [A | t] row-major>
//   blend_radius: <mm>
//   local: <label> <cx> <cy> <cz> <radius> <12 numbers>
//   ffd_grid: <gx> <gy> <gz>
//   ffd_spacing: <sx> <sy> <sz>
//   ffd_origin: <ox> <oy> <oz>
//   d: <dx> <dy> <dz>            (one line per control point, x-fastest)

fn numbers(line: usize, s: &str) -> Result<Vec<f64>> {
    s.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(line, format!("bad number {t:?}")))
        })
        .collect()
}

fn exact<const N: usize>(line: usize, v: Vec<f64>) -> Result<[f64; N]> {
    <[f64; N]>::try_from(v)
        .map_err(|v| Error::parse(line, format!("expected {N} numbers, got {}", v.len())))
}

impl TransformChain {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# scarline transform chain\n");
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(s, "global: {}", join(&self.global.to_row_major()));
        let _ = writeln!(s, "blend_radius: {}", self.blend_radius);
        for l in &self.locals {
            let _ = writeln!(
                s,
                "local: {} {} {} {} {} {}",
                l.label,
                l.center[0],
                l.center[1],
                l.center[2],
                l.radius,
                join(&l.transform.to_row_major())
            );
        }
        if let Some(f) = &self.ffd {
            let g = f.grid_dims;
            let _ = writeln!(s, "ffd_grid: {} {} {}", g[0], g[1], g[2]);
            let _ = writeln!(s, "ffd_spacing: {}", join(&f.spacing));
            let _ = writeln!(s, "ffd_origin: {}", join(&f.origin));
            for d in &f.displacements {
                let _ = writeln!(s, "d: {}", join(d));
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<TransformChain> {
        let mut global = None;
        let mut blend_radius = None;
        let mut locals = Vec::new();
        let mut grid: Option<[usize; 3]> = None;
        let mut spacing = None;
        let mut origin = None;
        let mut disp: Vec<[f64; 3]> = Vec::new();

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (key, value) = t
                .split_once(':')
                .ok_or_else(|| Error::parse(line, "expected key: value"))?;
            let value = value.trim();
            match key.trim() {
                "global" => {
                    if global.is_some() {
                        return Err(Error::parse(line, "duplicate global"));
                    }
                    global = Some(
                        AffineTransform::from_row_major(&numbers(line, value)?)
                            .map_err(|e| Error::parse(line, e.to_string()))?,
                    );
                }
                "blend_radius" => {
                    let [r] = exact::<1>(line, numbers(line, value)?)?;
                    blend_radius = Some(r);
                }
                "local" => {
                    let mut parts = value.splitn(2, char::is_whitespace);
                    let label: u16 = parts
                        .next()
                        .and_then(|l| l.parse().ok())
                        .ok_or_else(|| Error::parse(line, "bad local label"))?;
                    let v = numbers(line, parts.next().unwrap_or(""))?;
                    if v.len() != 16 {
                        return Err(Error::parse(
                            line,
                            "local needs label, centre, radius and 12 numbers",
                        ));
                    }
                    let transform = AffineTransform::from_row_major(&v[4..])
                        .map_err(|e| Error::parse(line, e.to_string()))?;
                    locals.push(LocalAffine {
                        label,
                        center: [v[0], v[1], v[2]],
                        radius: v[3],
                        transform,
                    });
                }
                "ffd_grid" => {
                    let g: Vec<usize> = value
                        .split_whitespace()
                        .map(|x| x.parse().map_err(|_| Error::parse(line, "bad grid size")))
                        .collect::<Result<_>>()?;
                    let g = <[usize; 3]>::try_from(g)
                        .map_err(|_| Error::parse(line, "ffd_grid needs 3 sizes"))?;
                    let n = g
                        .iter()
                        .try_fold(1usize, |a, &d| a.checked_mul(d))
                        .filter(|&n| n > 0 && n <= MAX_CONTROL_POINTS)
                        .ok_or_else(|| Error::parse(line, "control grid too large or empty"))?;
                    grid = Some(g);
                    disp.reserve(n.min(1 << 16));
                }
                "ffd_spacing" => spacing = Some(exact::<3>(line, numbers(line, value)?)?),
                "ffd_origin" => origin = Some(exact::<3>(line, numbers(line, value)?)?),
                "d" => {
                    if grid.is_none() {
                        return Err(Error::parse(line, "displacement before ffd_grid"));
                    }
                    disp.push(exact::<3>(line, numbers(line, value)?)?);
                }
                other => return Err(Error::parse(line, format!("unknown key {other:?}"))),
            }
        }

        let ffd = match (grid, spacing, origin) {
            (None, None, None) if disp.is_empty() => None,
            (Some(g), Some(s), Some(o)) => {
                Some(FfdTransform::new(g, s, o, disp).map_err(|e| Error::parse(0, e.to_string()))?)
            }
            _ => return Err(Error::parse(0, "incomplete FFD block")),
        };
        let chain = TransformChain {
            global: global.ok_or_else(|| Error::parse(0, "missing global affine"))?,
            locals,
            blend_radius: blend_radius.unwrap_or(5.0),
            ffd,
        };
        chain
            .validate()
            .map_err(|e| Error::parse(0, e.to_string()))?;
        Ok(chain)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bspline_weights_partition_unity() {
        for &t in &[0.0, 0.3, 1.7, -2.25, 5.999] {
            let (base, w) = bspline3_weights(t);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            for (i, wi) in w.iter().enumerate() {
                let node = (base + i as isize) as f64;
                assert!((bspline3(t - node) - wi).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn bspline_weight_derivatives() {
        let h = 1e-6;
        for &t in &[0.1, 0.5, 2.9] {
            let (_, _, d) = bspline3_weights_deriv(t);
            let (_, wp) = bspline3_weights(t + h);
            let (_, wm) = bspline3_weights(t - h);
            for i in 0..4 {
                assert!(((wp[i] - wm[i]) / (2.0 * h) - d[i]).abs() < 1e-8);
            }
            assert!(
                (bspline3_deriv(0.3) - (bspline3(0.3 + h) - bspline3(0.3 - h)) / (2.0 * h)).abs()
                    < 1e-8
            );
        }
    }

    #[test]
    fn affine_inverse_and_compose() {
        let a = AffineTransform::about_center(
            [[1.1, 0.2, 0.0], [-0.1, 0.9, 0.05], [0.0, 0.1, 1.2]],
            [3.0, 4.0, 5.0],
            [1.0, -2.0, 0.5],
        );
        let id = a.compose(&a.inverse().unwrap());
        let p = [1.5, -2.0, 7.0];
        let q = id.apply(p);
        for k in 0..3 {
            assert!((q[k] - p[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_affine_rejected() {
        let r = AffineTransform::new(
            [[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0; 3],
        );
        assert!(matches!(r, Err(Error::DegenerateTransform(_))));
    }

    #[test]
    fn chain_without_parts_is_global() {
        let g = AffineTransform::rotation_z(7.0, [1.0, 2.0, 3.0]);
        let chain = TransformChain::from_affine(g.clone());
        let p = [4.0, -1.0, 2.0];
        assert_eq!(chain.map_point(p), g.apply(p));
    }

    #[test]
    fn chain_text_roundtrip() {
        let geom = Geometry::unit([8, 8, 8]).unwrap();
        let mut ffd = FfdTransform::covering(&geom, 4.0).unwrap();
        for (i, d) in ffd.displacements.iter_mut().enumerate() {
            *d = [0.1 * i as f64, -0.3, 1.0 / 3.0];
        }
        let chain = TransformChain {
            global: AffineTransform::rotation_z(3.0, [4.0, 4.0, 4.0]),
            locals: vec![LocalAffine {
                label: 1,
                center: [4.0, 4.0, 4.0],
                radius: 2.5,
                transform: AffineTransform::translation([0.5, 0.0, -0.25]),
            }],
            blend_radius: 3.0,
            ffd: Some(ffd),
        };
        let back = TransformChain::parse(&chain.to_text()).unwrap();
        assert_eq!(back, chain);
    }

    #[test]
    fn parse_rejects_garbage() {
        for t in [
            "",
            "global: 1 2 3",
            "global: 1 0 0 0 0 1 0 0 0 0 1 0\nffd_grid: 2 2 2\n",
            "d: 1 2 3",
        ] {
            assert!(TransformChain::parse(t).is_err(), "{t:?}");
        }
    }

    #[test]
    fn local_affine_inside_region_is_exact() {
        let local = AffineTransform::translation([1.0, 0.0, 0.0]);
        let chain = TransformChain {
            global: AffineTransform::identity(),
            locals: vec![LocalAffine {
                label: 1,
                center: [0.0; 3],
                radius: 5.0,
                transform: local,
            }],
            blend_radius: 2.0,
            ffd: None,
        };
        assert_eq!(chain.map_point([1.0, 1.0, 1.0]), [2.0, 1.0, 1.0]);
        let far = chain.map_point([100.0, 0.0, 0.0]);
        assert!((far[0] - 100.0).abs() < 1e-12);
    }
}
