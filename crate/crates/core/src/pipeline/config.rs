//! Flat `key = value` pipeline configuration.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::bspline::{Domain, Loss, SplineGrid};
use crate::error::{Error, Result};
use crate::lifting::CakeParams;
use crate::matching::{build_window, InvarianceRange, Window};
use crate::regression::{GcvPreset, NewtonControls, TemplateType, TrainOptions};
use crate::regularizers::DiffusionWeights;

/// Every setting of a pipeline run. Defaults follow the retinal setup:
/// 51-pixel cake wavelets with 12 orientations, 251² patches on a 51×51×12
/// knot grid, 5 folds.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Target resolution in μm/pixel, used for records that carry their own
    /// resolution.
    pub working_resolution: Option<f64>,
    /// Rescale factor for records without a resolution.
    pub scale: f64,
    pub crop_zero_borders: bool,
    /// Radius of the local normalization window, in working pixels.
    pub normalize_radius: f64,
    pub window_order: usize,
    pub erf_gain: f64,

    pub wavelet_size: usize,
    /// Orientations on `[0, π)`; scores are duplicated to `2·n_theta` layers.
    pub n_theta: usize,
    pub cake: CakeParams,

    pub patch_x: usize,
    pub patch_y: usize,
    pub grid_k: usize,
    pub grid_l: usize,
    pub grid_m: usize,
    pub spline_order: usize,

    pub templates: Vec<TemplateType>,
    pub losses: Vec<Loss>,
    pub domains: Vec<Domain>,
    /// Summed-potential detectors, e.g. `A_r2+C_log_se2`.
    pub combinations: Vec<String>,
    pub diffusion: DiffusionWeights,
    pub gcv: GcvPreset,
    pub newton: NewtonControls,

    pub rotations: usize,
    pub scales: Vec<f64>,

    pub folds: usize,
    pub seed: u64,
    /// Success threshold on the detection distance, in object radii.
    pub radius_multiple: f64,
    /// Success threshold on the normalized error of two-target records.
    pub normalized_error: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            working_resolution: Some(40.0),
            scale: 1.0,
            crop_zero_borders: false,
            normalize_radius: 50.0,
            window_order: 8,
            erf_gain: 8.0,
            wavelet_size: 51,
            n_theta: 12,
            cake: CakeParams::default(),
            patch_x: 251,
            patch_y: 251,
            grid_k: 51,
            grid_l: 51,
            grid_m: 12,
            spline_order: 3,
            templates: TemplateType::ALL.to_vec(),
            losses: vec![Loss::Linear, Loss::Logistic],
            domains: vec![Domain::R2, Domain::Se2],
            combinations: Vec::new(),
            diffusion: DiffusionWeights::default(),
            gcv: GcvPreset::Identity,
            newton: NewtonControls::default(),
            rotations: 1,
            scales: vec![1.0],
            folds: 5,
            seed: 0,
            radius_multiple: 1.0,
            normalized_error: 0.1,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| Error::Config(format!("{key}: cannot parse '{v}': {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{v}'"))),
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", no + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "working_resolution" => {
                self.working_resolution = match v.to_ascii_lowercase().as_str() {
                    "none" | "" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "scale" => self.scale = parse(key, v)?,
            "crop_zero_borders" => self.crop_zero_borders = parse_bool(key, v)?,
            "normalize_radius" => self.normalize_radius = parse(key, v)?,
            "window_order" => self.window_order = parse(key, v)?,
            "erf_gain" => self.erf_gain = parse(key, v)?,
            "wavelet_size" => self.wavelet_size = parse(key, v)?,
            "n_theta" => self.n_theta = parse(key, v)?,
            "cake_angular_order" => self.cake.angular_order = parse(key, v)?,
            "cake_taper_start" => self.cake.taper_start = parse(key, v)?,
            "patch_x" => self.patch_x = parse(key, v)?,
            "patch_y" => self.patch_y = parse(key, v)?,
            "patch" => {
                let n = parse(key, v)?;
                self.patch_x = n;
                self.patch_y = n;
            }
            "grid_k" => self.grid_k = parse(key, v)?,
            "grid_l" => self.grid_l = parse(key, v)?,
            "grid_m" => self.grid_m = parse(key, v)?,
            "spline_order" => self.spline_order = parse(key, v)?,
            "templates" => self.templates = parse_list(key, v)?,
            "losses" => self.losses = parse_list(key, v)?,
            "domains" => self.domains = parse_list(key, v)?,
            "combinations" => {
                self.combinations = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
            }
            "d_xi" => self.diffusion.d_xi = parse(key, v)?,
            "d_eta" => self.diffusion.d_eta = parse(key, v)?,
            "d_theta" => self.diffusion.d_theta = parse(key, v)?,
            "gcv" => self.gcv = parse(key, v)?,
            "newton_max_iter" => self.newton.max_iter = parse(key, v)?,
            "newton_tol" => self.newton.tol = parse(key, v)?,
            "newton_eps" => self.newton.eps = parse(key, v)?,
            "rotations" => self.rotations = parse(key, v)?,
            "scales" => self.scales = parse_list(key, v)?,
            "folds" => self.folds = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "radius_multiple" => self.radius_multiple = parse(key, v)?,
            "normalized_error" => self.normalized_error = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if !(self.scale > 0.0) {
            return bad(format!("scale must be positive, got {}", self.scale));
        }
        if self.working_resolution.is_some_and(|r| !(r > 0.0)) {
            return bad("working_resolution must be positive".into());
        }
        if !(self.normalize_radius > 0.0) {
            return bad("normalize_radius must be positive".into());
        }
        if self.n_theta == 0 || self.wavelet_size == 0 {
            return bad("wavelet_size and n_theta must be positive".into());
        }
        if self.patch_x == 0 || self.patch_y == 0 {
            return bad("patch size must be positive".into());
        }
        if self.templates.is_empty() || self.domains.is_empty() {
            return bad("at least one template type and one domain are required".into());
        }
        if self.losses.contains(&Loss::Average) {
            return bad("'average' is template type A, not a loss".into());
        }
        if self.templates.iter().any(|t| *t != TemplateType::A) && self.losses.is_empty() {
            return bad("regression templates need at least one loss".into());
        }
        if self.rotations == 0 {
            return bad("rotations must be at least 1".into());
        }
        DiffusionWeights::new(self.diffusion.d_xi, self.diffusion.d_eta, self.diffusion.d_theta)
            .map_err(|e| Error::Config(e.to_string()))?;
        self.r2_grid().map_err(|e| Error::Config(e.to_string()))?;
        self.se2_grid().map_err(|e| Error::Config(e.to_string()))?;
        self.invariance().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn r2_grid(&self) -> Result<SplineGrid> {
        SplineGrid::r2(self.patch_x, self.patch_y, self.grid_k, self.grid_l, self.spline_order)
    }

    /// The orientation axis holds the `2·n_theta` duplicated score layers.
    pub fn se2_grid(&self) -> Result<SplineGrid> {
        SplineGrid::se2(
            self.patch_x,
            self.patch_y,
            2 * self.n_theta,
            self.grid_k,
            self.grid_l,
            self.grid_m,
            self.spline_order,
        )
    }

    pub fn grid(&self, domain: Domain) -> Result<SplineGrid> {
        match domain {
            Domain::R2 => self.r2_grid(),
            Domain::Se2 => self.se2_grid(),
        }
    }

    pub fn normalize_window(&self) -> Result<Window> {
        build_window(self.normalize_radius, self.window_order)
    }

    pub fn invariance(&self) -> Result<InvarianceRange> {
        let rot = InvarianceRange::rotations(self.rotations);
        InvarianceRange::new(self.scales.clone(), rot.rotations)
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            newton: self.newton,
            gcv: self.gcv,
            window_order: self.window_order,
        }
    }

    pub fn needs_lifting(&self) -> bool {
        self.domains.contains(&Domain::Se2)
    }

    /// Canonical text form; parsing it gives back the same configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv(
            "working_resolution",
            self.working_resolution.map_or("none".into(), |r| r.to_string()),
        );
        kv("scale", self.scale.to_string());
        kv("crop_zero_borders", self.crop_zero_borders.to_string());
        kv("normalize_radius", self.normalize_radius.to_string());
        kv("window_order", self.window_order.to_string());
        kv("erf_gain", self.erf_gain.to_string());
        kv("wavelet_size", self.wavelet_size.to_string());
        kv("n_theta", self.n_theta.to_string());
        kv("cake_angular_order", self.cake.angular_order.to_string());
        kv("cake_taper_start", self.cake.taper_start.to_string());
        kv("patch_x", self.patch_x.to_string());
        kv("patch_y", self.patch_y.to_string());
        kv("grid_k", self.grid_k.to_string());
        kv("grid_l", self.grid_l.to_string());
        kv("grid_m", self.grid_m.to_string());
        kv("spline_order", self.spline_order.to_string());
        kv("templates", join(&self.templates));
        kv("losses", join(&self.losses));
        kv("domains", join(&self.domains));
        kv("combinations", self.combinations.join(","));
        kv("d_xi", self.diffusion.d_xi.to_string());
        kv("d_eta", self.diffusion.d_eta.to_string());
        kv("d_theta", self.diffusion.d_theta.to_string());
        kv("gcv", self.gcv.to_string());
        kv("newton_max_iter", self.newton.max_iter.to_string());
        kv("newton_tol", self.newton.tol.to_string());
        kv("newton_eps", self.newton.eps.to_string());
        kv("rotations", self.rotations.to_string());
        kv("scales", join(&self.scales));
        kv("folds", self.folds.to_string());
        kv("seed", self.seed.to_string());
        kv("radius_multiple", self.radius_multiple.to_string());
        kv("normalized_error", self.normalized_error.to_string());
        s
    }
}
