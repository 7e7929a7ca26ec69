//! Raster data model: gridded features, sparse labels, and the geometry
//! operations that build them from point/line/polygon sources.

mod labels;
mod raster;
mod split;
mod upscale;

pub use labels::map_sensors_to_labels;
pub use raster::{rasterize_features, Aggregator};
pub use split::{split_locations, Splits};
pub use upscale::upscale_cubic;

use crate::autodiff::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("aggregator {aggregator:?} cannot be applied to {kind:?} primitives")]
    InvalidAggregator {
        aggregator: Aggregator,
        kind: PrimitiveKind,
    },
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("empty label set")]
    EmptyLabelSet,
    #[error("invalid grid data: {0}")]
    Invalid(String),
}

/// Geometry of a regular grid of square cells in planar meters.
///
/// Cell `(r, c)` covers the half-open square
/// `[origin.0 + c·s, origin.0 + (c+1)·s) × [origin.1 + r·s, origin.1 + (r+1)·s)`
/// with `s = cell_size`; rows advance northward. The half-open convention
/// makes the cells disjoint and the cover exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// South-west corner (easting, northing) in meters.
    pub origin: (f64, f64),
    /// Cell edge length in meters.
    pub cell_size: f64,
    /// Number of rows.
    pub height: usize,
    /// Number of columns.
    pub width: usize,
}

impl GridSpec {
    pub fn new(origin: (f64, f64), cell_size: f64, height: usize, width: usize) -> Result<Self, GridError> {
        if height < 1 || width < 1 {
            return Err(GridError::Invalid(format!(
                "grid must be at least 1x1, got {height}x{width}"
            )));
        }
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(GridError::Invalid(format!("cell_size must be positive, got {cell_size}")));
        }
        Ok(GridSpec {
            origin,
            cell_size,
            height,
            width,
        })
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Cell containing a point, or `None` outside the grid extent.
    pub fn cell_of(&self, easting: f64, northing: f64) -> Option<(usize, usize)> {
        let c = (easting - self.origin.0) / self.cell_size;
        let r = (northing - self.origin.1) / self.cell_size;
        if c < 0.0 || r < 0.0 {
            return None;
        }
        let (r, c) = (r.floor() as usize, c.floor() as usize);
        if r >= self.height || c >= self.width {
            return None;
        }
        Some((r, c))
    }

    pub fn cell_center(&self, r: usize, c: usize) -> (f64, f64) {
        (
            self.origin.0 + (c as f64 + 0.5) * self.cell_size,
            self.origin.1 + (r as f64 + 0.5) * self.cell_size,
        )
    }

    /// Easting/northing bounds of the full grid extent.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        (
            self.origin.0,
            self.origin.1,
            self.origin.0 + self.width as f64 * self.cell_size,
            self.origin.1 + self.height as f64 * self.cell_size,
        )
    }
}

/// Per-cell feature vectors: time-varying channels plus static channels.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub spec: GridSpec,
    pub time_steps: usize,
    /// `[time, H, W, P_d]`
    pub dynamic: Tensor,
    /// `[H, W, P_s]`
    pub static_features: Tensor,
    /// Length `P_d + P_s`: dynamic names first, then static.
    pub feature_names: Vec<String>,
}

impl FeatureGrid {
    pub fn new(
        spec: GridSpec,
        time_steps: usize,
        dynamic: Tensor,
        static_features: Tensor,
        feature_names: Vec<String>,
    ) -> Result<Self, GridError> {
        let (h, w) = (spec.height, spec.width);
        let p_d = if dynamic.shape().len() == 4 { dynamic.shape()[3] } else { 0 };
        if dynamic.shape() != [time_steps, h, w, p_d] {
            return Err(GridError::Invalid(format!(
                "dynamic features shape {:?} does not match [{time_steps}, {h}, {w}, P_d]",
                dynamic.shape()
            )));
        }
        let p_s = if static_features.shape().len() == 3 {
            static_features.shape()[2]
        } else {
            0
        };
        if static_features.shape() != [h, w, p_s] {
            return Err(GridError::Invalid(format!(
                "static features shape {:?} does not match [{h}, {w}, P_s]",
                static_features.shape()
            )));
        }
        if p_d + p_s == 0 {
            return Err(GridError::Invalid("at least one feature channel required".into()));
        }
        if feature_names.len() != p_d + p_s {
            return Err(GridError::Invalid(format!(
                "{} feature names for {} channels",
                feature_names.len(),
                p_d + p_s
            )));
        }
        let mut sorted = feature_names.clone();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(GridError::Invalid("feature names must be unique".into()));
        }
        Ok(FeatureGrid {
            spec,
            time_steps,
            dynamic,
            static_features,
            feature_names,
        })
    }

    pub fn dynamic_channels(&self) -> usize {
        self.dynamic.shape()[3]
    }

    pub fn static_channels(&self) -> usize {
        self.static_features.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.dynamic_channels() + self.static_channels()
    }

    /// Combined `[H·W, P]` feature matrix for one time step (dynamic then static).
    pub fn frame(&self, t: usize) -> Tensor {
        let (h, w) = (self.spec.height, self.spec.width);
        let (p_d, p_s) = (self.dynamic_channels(), self.static_channels());
        let p = p_d + p_s;
        let mut out = vec![0.0; h * w * p];
        let dyn_frame = &self.dynamic.data()[t * h * w * p_d..(t + 1) * h * w * p_d];
        let sta = self.static_features.data();
        for cell in 0..h * w {
            out[cell * p..cell * p + p_d].copy_from_slice(&dyn_frame[cell * p_d..(cell + 1) * p_d]);
            out[cell * p + p_d..(cell + 1) * p].copy_from_slice(&sta[cell * p_s..(cell + 1) * p_s]);
        }
        Tensor::from_vec_unchecked(&[h * w, p], out)
    }
}

/// Observed values on the grid: `values[t,r,c]` is meaningful only where
/// `mask` is true.
#[derive(Debug, Clone)]
pub struct LabelGrid {
    /// `[time, H, W]`
    pub values: Tensor,
    /// Row-major `[time, H, W]`, true where a sensor observation exists.
    pub mask: Vec<bool>,
}

impl LabelGrid {
    pub fn new(values: Tensor, mask: Vec<bool>) -> Result<Self, GridError> {
        if values.len() != mask.len() || values.shape().len() != 3 {
            return Err(GridError::Invalid(format!(
                "label values {:?} and mask length {} mismatch",
                values.shape(),
                mask.len()
            )));
        }
        Ok(LabelGrid { values, mask })
    }

    pub fn time_steps(&self) -> usize {
        self.values.shape()[0]
    }

    /// Cells labeled at any time step, in row-major order.
    pub fn labeled_cells(&self) -> Vec<(usize, usize)> {
        let (t, h, w) = (
            self.values.shape()[0],
            self.values.shape()[1],
            self.values.shape()[2],
        );
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if (0..t).any(|ti| self.mask[(ti * h + r) * w + c]) {
                    out.push((r, c));
                }
            }
        }
        out
    }

    pub fn value_at(&self, t: usize, r: usize, c: usize) -> Option<f64> {
        let (h, w) = (self.values.shape()[1], self.values.shape()[2]);
        let idx = (t * h + r) * w + c;
        self.mask[idx].then(|| self.values.data()[idx])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Point,
    Polyline,
    Polygon,
}

/// A geographic source feature in planar meters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeoPrimitive {
    pub kind: PrimitiveKind,
    pub coords: Vec<(f64, f64)>,
    pub attribute: f64,
}

impl GeoPrimitive {
    pub fn validate(&self) -> Result<(), GridError> {
        let ok = match self.kind {
            PrimitiveKind::Point => self.coords.len() == 1,
            PrimitiveKind::Polyline => self.coords.len() >= 2,
            PrimitiveKind::Polygon => {
                self.coords.len() >= 4 && self.coords.first() == self.coords.last()
            }
        };
        if !ok {
            return Err(GridError::Invalid(format!(
                "{:?} with {} coordinates (polygons must repeat the first vertex to close)",
                self.kind,
                self.coords.len()
            )));
        }
        if self
            .coords
            .iter()
            .any(|(x, y)| !x.is_finite() || !y.is_finite())
        {
            return Err(GridError::Invalid("non-finite coordinate".into()));
        }
        Ok(())
    }
}

/// One timestamped sensor observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorReading {
    pub sensor_id: String,
    pub easting: f64,
    pub northing: f64,
    pub time_index: usize,
    pub value: f64,
}
