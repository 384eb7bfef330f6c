//! Pipeline configuration as a `key: value` text file.
//!
//! ```text
//! # defaults
//! dilation_mm: 3
//! erosion_mm: 5
//! overlap_ratio: 0.2
//! features: min, mean, std
//! svm_rho: 2^8.5
//! svm_gamma: 2^2.5
//! grid: off
//! baselines: sd:2, sd:4, sd:6
//! protocol: loo
//! ```
//!
//! Numbers may be written as powers of two (`2^8.5`). Unknown keys are
//! rejected so that typos do not silently fall back to defaults.

use std::fmt;
use std::str::FromStr;

use crate::features::feature_index;
use crate::fusion::Strategy;
use crate::registration::Stages;
use crate::superpixel::SlicParams;
use crate::svm::{GridSearchSpec, Protocol, SvmParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Baseline {
    /// Wall voxels above `μ_bp + k·σ_bp`.
    Sd(f64),
    /// Wall voxels whose normalised intensity exceeds the threshold.
    Threshold(f64),
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Baseline::Sd(k) => write!(f, "sd:{k}"),
            Baseline::Threshold(t) => write!(f, "thr:{t}"),
        }
    }
}

impl FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("bad baseline {s:?}; use sd:<k> or thr:<t>"));
        let (kind, v) = s.trim().split_once(':').ok_or_else(bad)?;
        let v: f64 = number(v).map_err(|_| bad())?;
        match kind.trim() {
            "sd" => Ok(Baseline::Sd(v)),
            "thr" => Ok(Baseline::Threshold(v)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridChoice {
    Off,
    Coarse,
    Paper,
    Centered,
}

impl GridChoice {
    pub fn spec(self, seed: u64) -> Option<GridSearchSpec> {
        let spec = match self {
            GridChoice::Off => return None,
            GridChoice::Coarse => GridSearchSpec::coarse_only(),
            GridChoice::Paper => GridSearchSpec::paper(),
            GridChoice::Centered => GridSearchSpec::centered(),
        };
        Some(GridSearchSpec { seed, ..spec })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Outward wall band from the LA+PV surface (mm).
    pub dilation_mm: f64,
    /// Blood pool = LA+PV eroded by this much (mm).
    pub erosion_mm: f64,
    /// Optional inward extension of the wall band (mm).
    pub inward_margin_mm: f64,
    /// Minimum wall overlap of a superpixel.
    pub overlap_ratio: f64,
    pub slic: SlicParams,
    pub features: Vec<String>,
    pub svm: SvmParams,
    pub grid: GridChoice,
    pub baselines: Vec<Baseline>,
    pub fusion: Strategy,
    pub registration: Stages,
    pub protocol: Protocol,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dilation_mm: 3.0,
            erosion_mm: 5.0,
            inward_margin_mm: 0.0,
            overlap_ratio: 0.2,
            slic: SlicParams::default(),
            features: vec!["min".into(), "mean".into(), "std".into()],
            svm: SvmParams::default(),
            grid: GridChoice::Off,
            baselines: vec![Baseline::Sd(2.0), Baseline::Sd(4.0), Baseline::Sd(6.0)],
            fusion: Strategy::Msp,
            registration: Stages::default(),
            protocol: Protocol::LooPatient,
            seed: 0,
        }
    }
}

/// A number, or `2^e`.
fn number(s: &str) -> std::result::Result<f64, ()> {
    let s = s.trim();
    let v = match s.strip_prefix("2^") {
        Some(e) => 2f64.powf(e.trim().parse::<f64>().map_err(|_| ())?),
        None => s.parse::<f64>().map_err(|_| ())?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(())
    }
}

fn list(v: &str) -> Vec<&str> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{what} must be positive")))
            }
        };
        pos(self.dilation_mm, "dilation_mm")?;
        pos(self.erosion_mm, "erosion_mm")?;
        if !(self.inward_margin_mm >= 0.0 && self.inward_margin_mm.is_finite()) {
            return Err(Error::InvalidParameter(
                "inward_margin_mm must be >= 0".into(),
            ));
        }
        if !(self.overlap_ratio > 0.0 && self.overlap_ratio <= 1.0) {
            return Err(Error::InvalidParameter(
                "overlap_ratio must be in (0, 1]".into(),
            ));
        }
        self.slic.validate()?;
        self.svm.validate()?;
        if self.features.is_empty() {
            return Err(Error::InvalidParameter("no features selected".into()));
        }
        for (i, f) in self.features.iter().enumerate() {
            if feature_index(f).is_none() {
                return Err(Error::InvalidParameter(format!("unknown feature {f:?}")));
            }
            if self.features[..i].contains(f) {
                return Err(Error::InvalidParameter(format!(
                    "feature {f:?} listed twice"
                )));
            }
        }
        if let Protocol::KFold(k) = self.protocol {
            if k < 2 {
                return Err(Error::InvalidParameter("kfold needs k >= 2".into()));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let (key, value) = l
                .split_once(':')
                .ok_or_else(|| Error::parse(line, "expected `key: value`"))?;
            let (key, value) = (key.trim(), value.trim());
            let num =
                || number(value).map_err(|_| Error::parse(line, format!("bad number for {key}")));
            let count = || -> Result<usize> {
                value
                    .parse()
                    .map_err(|_| Error::parse(line, format!("bad integer for {key}")))
            };
            match key {
                "dilation_mm" => cfg.dilation_mm = num()?,
                "erosion_mm" => cfg.erosion_mm = num()?,
                "inward_margin_mm" => cfg.inward_margin_mm = num()?,
                "overlap_ratio" => cfg.overlap_ratio = num()?,
                "slic_s" => cfg.slic.s = count()?,
                "slic_m" => cfg.slic.m = num()?,
                "slic_iterations" => cfg.slic.iterations = count()?,
                "slic_min_region_fraction" => cfg.slic.min_region_fraction = num()?,
                "slic_perturb_seeds" => {
                    cfg.slic.perturb_seeds = value.parse().map_err(|_| {
                        Error::parse(line, "slic_perturb_seeds must be true or false")
                    })?
                }
                "features" => cfg.features = list(value).into_iter().map(String::from).collect(),
                "svm_rho" => cfg.svm.rho = num()?,
                "svm_gamma" => cfg.svm.gamma = num()?,
                "svm_tol" => cfg.svm.tol = num()?,
                "svm_max_iter" => cfg.svm.max_iter = count()?,
                "grid" => {
                    cfg.grid = match value {
                        "off" => GridChoice::Off,
                        "coarse" => GridChoice::Coarse,
                        "paper" => GridChoice::Paper,
                        "centered" => GridChoice::Centered,
                        _ => {
                            return Err(Error::parse(
                                line,
                                "grid must be off, coarse, paper or centered",
                            ))
                        }
                    }
                }
                "baselines" => {
                    cfg.baselines = list(value)
                        .into_iter()
                        .map(|b| {
                            b.parse()
                                .map_err(|e: Error| Error::parse(line, e.to_string()))
                        })
                        .collect::<Result<_>>()?
                }
                "fusion" => {
                    cfg.fusion = value
                        .parse()
                        .map_err(|e: Error| Error::parse(line, e.to_string()))?
                }
                "registration" => {
                    cfg.registration = if value == "none" {
                        Stages {
                            global: false,
                            local: false,
                            ffd: false,
                        }
                    } else {
                        Stages::parse(value).map_err(|e| Error::parse(line, e.to_string()))?
                    }
                }
                "protocol" => {
                    cfg.protocol = value
                        .parse()
                        .map_err(|e: Error| Error::parse(line, e.to_string()))?
                }
                "seed" => cfg.seed = value.parse().map_err(|_| Error::parse(line, "bad seed"))?,
                _ => return Err(Error::parse(line, format!("unknown key {key:?}"))),
            }
        }
        cfg.validate().map_err(|e| Error::parse(0, e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let stages = {
            let r = &self.registration;
            let on: Vec<&str> = [(r.global, "global"), (r.local, "local"), (r.ffd, "ffd")]
                .iter()
                .filter(|s| s.0)
                .map(|s| s.1)
                .collect();
            if on.is_empty() {
                "none".to_string()
            } else {
                on.join(",")
            }
        };
        let grid = match self.grid {
            GridChoice::Off => "off",
            GridChoice::Coarse => "coarse",
            GridChoice::Paper => "paper",
            GridChoice::Centered => "centered",
        };
        let baselines: Vec<String> = self.baselines.iter().map(|b| b.to_string()).collect();
        format!(
            "dilation_mm: {}\nerosion_mm: {}\ninward_margin_mm: {}\noverlap_ratio: {}\n\
             slic_s: {}\nslic_m: {}\nslic_iterations: {}\nslic_min_region_fraction: {}\nslic_perturb_seeds: {}\n\
             features: {}\nsvm_rho: {}\nsvm_gamma: {}\nsvm_tol: {}\nsvm_max_iter: {}\ngrid: {}\n\
             baselines: {}\nfusion: {}\nregistration: {}\nprotocol: {}\nseed: {}\n",
            self.dilation_mm,
            self.erosion_mm,
            self.inward_margin_mm,
            self.overlap_ratio,
            self.slic.s,
            self.slic.m,
            self.slic.iterations,
            self.slic.min_region_fraction,
            self.slic.perturb_seeds,
            self.features.join(","),
            self.svm.rho,
            self.svm.gamma,
            self.svm.tol,
            self.svm.max_iter,
            grid,
            baselines.join(","),
            self.fusion,
            stages,
            self.protocol,
            self.seed
        )
    }
}
