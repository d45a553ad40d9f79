//! Scenario files: TOML (or JSON by extension) mapped onto [`Scenario`], validated before any solve.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use curlhom::measure::FlatComponent;
use curlhom::resolvent::{FGenerator, ThetaGrid};
use curlhom::spectral::CoefficientField;
use curlhom::{Offset, PeriodicMeasure, C64};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub measure: MeasureSpec,
    pub coefficient: CoefficientSpec,
    /// Fourier cutoff `L`.
    pub cutoff: usize,
    #[serde(default)]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_theta_grid")]
    pub theta_grid: ThetaGrid,
    #[serde(default)]
    pub generator: GeneratorSpec,
    #[serde(default)]
    pub poincare: PoincareSpec,
    #[serde(default)]
    pub wholespace: WholeSpaceSpec,
    /// 0 picks the number of available cores.
    #[serde(default)]
    pub workers: usize,
}

fn default_theta_grid() -> ThetaGrid {
    ThetaGrid::Fixed { resolution: 3 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureSpec {
    Lebesgue,
    GridPlanes,
    Plane { axis: usize, offset: Offset },
    Line { axis: usize },
    Custom { lebesgue_weight: f64, flats: Vec<FlatSpec> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlatSpec {
    pub free_axes: Vec<usize>,
    #[serde(default)]
    pub offsets: Vec<AxisOffset>,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisOffset {
    pub axis: usize,
    pub offset: Offset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientSpec {
    Identity,
    Constant { matrix: [[f64; 3]; 3] },
    ScalarCosine { amplitude: f64, axis: usize },
    ScalarSeries { mean: f64, modes: Vec<SeriesMode> },
    Laminate { axis: usize, a0: f64, a1: f64 },
    /// A fully specified field, as serialised by the core library.
    Field { field: CoefficientField },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesMode {
    pub k: [i64; 3],
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_bandwidth")]
    pub bandwidth: usize,
}

fn default_bandwidth() -> usize {
    2
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec { seed: 0, bandwidth: default_bandwidth() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoincareSpec {
    pub resolution: usize,
}

impl Default for PoincareSpec {
    fn default() -> Self {
        PoincareSpec { resolution: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WholeSpaceSpec {
    #[serde(default = "default_source")]
    pub source: SourceSpec,
    /// Compare against one θ-resolution higher to estimate the quadrature error.
    #[serde(default = "yes")]
    pub richardson: bool,
}

fn yes() -> bool {
    true
}

fn default_source() -> SourceSpec {
    SourceSpec::Envelope { theta_max: 2.0, resolution: 3 }
}

impl Default for WholeSpaceSpec {
    fn default() -> Self {
        WholeSpaceSpec { source: default_source(), richardson: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    Envelope { theta_max: f64, resolution: usize },
    /// Random cell profiles on `{−N..N}³`, transformed on a dual grid of `dual_resolution` per axis.
    Lattice { n_range: usize, profile_cutoff: usize, dual_resolution: usize },
}

impl Scenario {
    /// Parses TOML, or JSON when the path ends in `.json`; errors carry line/column positions.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let json = path.extension().is_some_and(|e| e == "json");
        Self::parse(&text, json).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str, json: bool) -> Result<Self> {
        let s: Scenario = if json {
            serde_json::from_str(text).map_err(|e| anyhow!("{e}"))?
        } else {
            toml::from_str(text).map_err(|e| anyhow!("{e}"))?
        };
        Ok(s)
    }

    /// Structural checks plus construction of the measure and coefficient.
    pub fn validate(&self) -> Result<(PeriodicMeasure, CoefficientField)> {
        if self.schema_version != SCHEMA_VERSION {
            bail!("schema_version: expected {SCHEMA_VERSION}, found {}", self.schema_version);
        }
        if self.cutoff < 1 {
            bail!("cutoff: must be at least 1");
        }
        for (i, &e) in self.epsilons.iter().enumerate() {
            if !(e > 0.0 && e <= 1.0) {
                bail!("epsilons[{i}]: {e} is outside (0, 1]");
            }
        }
        match &self.theta_grid {
            ThetaGrid::Fixed { resolution } | ThetaGrid::Scaled { resolution } if *resolution < 2 => {
                bail!("theta_grid.resolution: {resolution} must be at least 2")
            }
            ThetaGrid::Explicit { points } if points.is_empty() => bail!("theta_grid.points: empty"),
            _ => {}
        }
        if self.poincare.resolution < 2 {
            bail!("poincare.resolution: {} must be at least 2", self.poincare.resolution);
        }
        match self.wholespace.source {
            SourceSpec::Envelope { theta_max, resolution } => {
                if !(theta_max > 0.0 && theta_max.is_finite()) {
                    bail!("wholespace.source.theta_max: {theta_max} must be positive");
                }
                if resolution < 1 {
                    bail!("wholespace.source.resolution: must be at least 1");
                }
            }
            SourceSpec::Lattice { n_range, dual_resolution, .. } => {
                if dual_resolution < 2 * n_range + 1 {
                    bail!("wholespace.source.dual_resolution: {dual_resolution} < 2·n_range + 1 aliases the lattice");
                }
            }
        }
        let mu = self.measure.build().context("measure")?;
        let a = self.coefficient.build().context("coefficient")?;
        a.spot_check_ellipticity(&mu).map_err(|e| anyhow!("coefficient: {e}"))?;
        Ok((mu, a))
    }

    pub fn generator(&self) -> FGenerator {
        FGenerator { seed: self.generator.seed, bandwidth: self.generator.bandwidth }
    }

    /// SHA-256 of the canonical JSON image.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scenario serialises");
        hex::encode(Sha256::digest(&bytes))
    }
}

impl MeasureSpec {
    pub fn build(&self) -> Result<PeriodicMeasure> {
        let axis_ok = |a: usize| if a < 3 { Ok(()) } else { Err(anyhow!("axis {a} must be 0, 1 or 2")) };
        Ok(match self {
            MeasureSpec::Lebesgue => PeriodicMeasure::lebesgue(),
            MeasureSpec::GridPlanes => PeriodicMeasure::grid_planes(),
            MeasureSpec::Plane { axis, offset } => {
                axis_ok(*axis)?;
                PeriodicMeasure::plane(*axis, *offset)?
            }
            MeasureSpec::Line { axis } => {
                axis_ok(*axis)?;
                PeriodicMeasure::line(*axis)
            }
            MeasureSpec::Custom { lebesgue_weight, flats } => {
                let mut built = Vec::with_capacity(flats.len());
                for (i, f) in flats.iter().enumerate() {
                    let offs: Vec<(usize, Offset)> = f.offsets.iter().map(|o| (o.axis, o.offset)).collect();
                    built.push(FlatComponent::new(&f.free_axes, &offs, f.weight).with_context(|| format!("flats[{i}]"))?);
                }
                PeriodicMeasure::new(*lebesgue_weight, built)?
            }
        })
    }
}

impl CoefficientSpec {
    pub fn build(&self) -> Result<CoefficientField> {
        let a = match self {
            CoefficientSpec::Identity => CoefficientField::identity(),
            CoefficientSpec::Constant { matrix } => CoefficientField::constant(*matrix),
            CoefficientSpec::ScalarCosine { amplitude, axis } if *axis < 3 => {
                CoefficientField::scalar_cosine(*amplitude, *axis)
            }
            CoefficientSpec::ScalarSeries { mean, modes } => {
                let m: Vec<([i64; 3], C64)> = modes.iter().map(|m| (m.k, C64::new(m.re, m.im))).collect();
                CoefficientField::scalar_series(*mean, &m)
            }
            CoefficientSpec::Laminate { axis, a0, a1 } if *axis < 3 => CoefficientField::laminate(*axis, *a0, *a1),
            CoefficientSpec::Field { field } => field.clone(),
            _ => bail!("axis must be 0, 1 or 2"),
        };
        a.validate()?;
        Ok(a)
    }
}
