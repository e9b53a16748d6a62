//! Disparity level sets and disparity/depth conversion.

use std::fmt;
use std::path::Path;

use gradcore::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Result};

/// How levels are spread between `d_min` and `d_max`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    /// Geometric progression: constant ratio between neighbours.
    #[serde(alias = "exp")]
    Exponential,
    /// Constant step in disparity.
    Linear,
    /// Constant step in depth, i.e. in inverse disparity. Kept for curve
    /// comparisons.
    LinearDepth,
}

impl QuantMode {
    pub fn as_str(self) -> &'static str {
        match self {
            QuantMode::Exponential => "exp",
            QuantMode::Linear => "linear",
            QuantMode::LinearDepth => "linear-depth",
        }
    }
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for QuantMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "exp" | "exponential" => Ok(QuantMode::Exponential),
            "linear" | "lin" => Ok(QuantMode::Linear),
            "linear-depth" => Ok(QuantMode::LinearDepth),
            other => Err(format!(
                "unknown quantization mode `{other}` (exp, linear, linear-depth)"
            )),
        }
    }
}

/// Serializable recipe for a [`DisparityLevels`] set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelConfig {
    pub count: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub mode: QuantMode,
}

impl LevelConfig {
    pub fn build(&self) -> Result<DisparityLevels> {
        make_levels(self.count, self.d_min, self.d_max, self.mode)
    }

    /// Disparities scale with image width; use when resizing the input.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            d_min: self.d_min * factor,
            d_max: self.d_max * factor,
            ..self.clone()
        }
    }
}

/// Ordered disparity levels `d_0 < d_1 < … < d_N`, `L = N + 1` of them.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityLevels {
    values: Vec<f64>,
    d_min: f64,
    d_max: f64,
    mode: QuantMode,
}

pub fn make_levels(
    count: usize,
    d_min: f64,
    d_max: f64,
    mode: QuantMode,
) -> Result<DisparityLevels> {
    if count < 2 {
        return Err(invalid(
            "make_levels",
            format!("need at least 2 levels, got {count}"),
        ));
    }
    if !(d_min.is_finite() && d_max.is_finite() && d_min > 0.0 && d_min < d_max) {
        return Err(invalid(
            "make_levels",
            format!("need 0 < d_min < d_max, got d_min={d_min}, d_max={d_max}"),
        ));
    }
    let n_top = (count - 1) as f64;
    let mut values: Vec<f64> = (0..count)
        .map(|n| {
            let t = n as f64 / n_top;
            match mode {
                QuantMode::Exponential => d_max * ((d_max / d_min).ln() * (t - 1.0)).exp(),
                QuantMode::Linear => d_min + n as f64 * (d_max - d_min) / n_top,
                QuantMode::LinearDepth => 1.0 / (1.0 / d_min - t * (1.0 / d_min - 1.0 / d_max)),
            }
        })
        .collect();
    // the closed forms can miss the endpoints by an ulp
    values[0] = d_min;
    values[count - 1] = d_max;
    Ok(DisparityLevels {
        values,
        d_min,
        d_max,
        mode,
    })
}

impl DisparityLevels {
    /// Arbitrary non-decreasing values, e.g. all zeros for identity warps.
    /// Such sets bypass the range checks of [`make_levels`].
    pub fn custom(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid(
                "DisparityLevels::custom",
                "levels must be finite and >= 0",
            ));
        }
        if values.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid(
                "DisparityLevels::custom",
                "levels must be non-decreasing",
            ));
        }
        let d_min = values[0];
        let d_max = values[values.len() - 1];
        Ok(Self {
            values,
            d_min,
            d_max,
            mode: QuantMode::Linear,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, n: usize) -> f64 {
        self.values[n]
    }

    pub fn d_min(&self) -> f64 {
        self.d_min
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    /// Lower bound applied to predictions before converting to depth.
    pub fn disparity_floor(&self) -> f64 {
        self.d_min / 2.0
    }

    pub fn as_real<F: Real>(&self) -> Vec<F> {
        self.values.iter().map(|&v| F::from_f64_lossy(v)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    /// Baseline times focal length, in depth units times pixels.
    pub baseline_times_focal: f64,
    pub depth_cap: f64,
}

impl CameraModel {
    pub fn new(baseline_times_focal: f64, depth_cap: f64) -> Result<Self> {
        if !(baseline_times_focal > 0.0 && baseline_times_focal.is_finite()) {
            return Err(invalid(
                "CameraModel",
                "baseline_times_focal must be positive",
            ));
        }
        if !(depth_cap > 0.0) {
            return Err(invalid("CameraModel", "depth_cap must be positive"));
        }
        Ok(Self {
            baseline_times_focal,
            depth_cap,
        })
    }

    pub fn depth_of(&self, disparity: f64, floor: f64) -> f64 {
        (self.baseline_times_focal / disparity.max(floor)).min(self.depth_cap)
    }
}

/// `depth = bf / max(d, floor)`, capped at `cam.depth_cap`.
pub fn disparity_to_depth<F: Real>(
    disparity: &Tensor<F>,
    cam: &CameraModel,
    floor: f64,
) -> Tensor<F> {
    let floor = floor.max(f64::MIN_POSITIVE);
    disparity.map(|d| F::from_f64_lossy(cam.depth_of(d.to_f64_lossy(), floor)))
}

/// Inverse of [`disparity_to_depth`] for depths inside `(0, cap]`.
pub fn depth_to_disparity<F: Real>(depth: &Tensor<F>, cam: &CameraModel) -> Tensor<F> {
    depth.map(|z| F::from_f64_lossy(cam.baseline_times_focal / z.to_f64_lossy()))
}

/// Write one CSV row per level of every variant: `mode,L,n,disparity,depth`.
pub fn emit_discretization_curves(
    variants: &[DisparityLevels],
    cam: &CameraModel,
    out: &Path,
) -> Result<()> {
    if variants.is_empty() {
        return Err(invalid("emit_discretization_curves", "no level sets given"));
    }
    let file = std::fs::File::create(out).map_err(io_err(out))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["mode", "L", "n", "disparity", "depth"])?;
    for levels in variants {
        for (n, &d) in levels.values().iter().enumerate() {
            let depth = cam.baseline_times_focal / d;
            w.write_record([
                levels.mode().as_str().to_string(),
                levels.len().to_string(),
                n.to_string(),
                format!("{d:.17e}"),
                format!("{depth:.17e}"),
            ])?;
        }
    }
    w.flush().map_err(io_err(out))?;
    Ok(())
}
