//! Rasterization of geographic primitives onto the grid.

use super::{GeoPrimitive, GridError, GridSpec, PrimitiveKind};
use crate::autodiff::Tensor;
use serde::{Deserialize, Serialize};

/// How primitive geometry is aggregated into a cell value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    /// Total clipped polyline length per cell (polylines only).
    SumLength,
    /// Total overlap area per cell (polygons only).
    SumArea,
    /// Number of points per cell (points only).
    Count,
    /// Mean point attribute per cell, 0 where empty (points only).
    MeanAttribute,
}

impl Aggregator {
    fn accepts(self, kind: PrimitiveKind) -> bool {
        matches!(
            (self, kind),
            (Aggregator::SumLength, PrimitiveKind::Polyline)
                | (Aggregator::SumArea, PrimitiveKind::Polygon)
                | (Aggregator::Count, PrimitiveKind::Point)
                | (Aggregator::MeanAttribute, PrimitiveKind::Point)
        )
    }
}

/// Aggregates primitives into a `[H, W]` field; cells touched by nothing are 0.
///
/// Geometry lying exactly on a shared cell boundary contributes to both
/// adjacent cells (a measure-zero case for length/area aggregates).
pub fn rasterize_features(
    primitives: &[GeoPrimitive],
    spec: &GridSpec,
    aggregator: Aggregator,
) -> Result<Tensor, GridError> {
    let (h, w) = (spec.height, spec.width);
    let mut field = vec![0.0; h * w];
    let mut counts = vec![0u64; h * w];
    for p in primitives {
        p.validate()?;
        if !aggregator.accepts(p.kind) {
            return Err(GridError::InvalidAggregator {
                aggregator,
                kind: p.kind,
            });
        }
        match aggregator {
            Aggregator::SumLength => {
                for seg in p.coords.windows(2) {
                    add_segment_lengths(seg[0], seg[1], spec, &mut field);
                }
            }
            Aggregator::SumArea => add_polygon_areas(&p.coords, spec, &mut field),
            Aggregator::Count => {
                if let Some((r, c)) = spec.cell_of(p.coords[0].0, p.coords[0].1) {
                    field[r * w + c] += 1.0;
                }
            }
            Aggregator::MeanAttribute => {
                if let Some((r, c)) = spec.cell_of(p.coords[0].0, p.coords[0].1) {
                    field[r * w + c] += p.attribute;
                    counts[r * w + c] += 1;
                }
            }
        }
    }
    if aggregator == Aggregator::MeanAttribute {
        for (v, &n) in field.iter_mut().zip(&counts) {
            if n > 0 {
                *v /= n as f64;
            }
        }
    }
    Tensor::from_vec(&[h, w], field).map_err(|e| GridError::Invalid(e.to_string()))
}

/// Length of the segment portion inside an axis-aligned rectangle
/// (Liang–Barsky parametric clip).
fn clipped_length(
    a: (f64, f64),
    b: (f64, f64),
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len = (dx * dx + dy * dy).sqrt();
    if len == 0.0 {
        return 0.0;
    }
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    for (p, q) in [
        (-dx, a.0 - xmin),
        (dx, xmax - a.0),
        (-dy, a.1 - ymin),
        (dy, ymax - a.1),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return 0.0; // parallel and outside
            }
        } else {
            let t = q / p;
            if p < 0.0 {
                t0 = t0.max(t);
            } else {
                t1 = t1.min(t);
            }
        }
    }
    if t1 > t0 {
        (t1 - t0) * len
    } else {
        0.0
    }
}

fn add_segment_lengths(a: (f64, f64), b: (f64, f64), spec: &GridSpec, field: &mut [f64]) {
    let s = spec.cell_size;
    let (ox, oy) = spec.origin;
    let to_col = |x: f64| ((x - ox) / s).floor() as isize;
    let to_row = |y: f64| ((y - oy) / s).floor() as isize;
    let c0 = to_col(a.0.min(b.0)).max(0);
    let c1 = to_col(a.0.max(b.0)).min(spec.width as isize - 1);
    let r0 = to_row(a.1.min(b.1)).max(0);
    let r1 = to_row(a.1.max(b.1)).min(spec.height as isize - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            let xmin = ox + c as f64 * s;
            let ymin = oy + r as f64 * s;
            let l = clipped_length(a, b, xmin, ymin, xmin + s, ymin + s);
            if l > 0.0 {
                field[r as usize * spec.width + c as usize] += l;
            }
        }
    }
}

/// Area of `polygon ∩ rect` via Sutherland–Hodgman clipping and the shoelace
/// formula. The polygon is closed (last vertex repeats the first).
fn clipped_area(polygon: &[(f64, f64)], xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> f64 {
    // Drop the closing vertex; clipping works on the open ring.
    let mut ring: Vec<(f64, f64)> = polygon[..polygon.len() - 1].to_vec();
    // inside tests for the four half-planes
    let clips: [Box<dyn Fn((f64, f64)) -> f64>; 4] = [
        Box::new(move |p: (f64, f64)| p.0 - xmin),
        Box::new(move |p: (f64, f64)| xmax - p.0),
        Box::new(move |p: (f64, f64)| p.1 - ymin),
        Box::new(move |p: (f64, f64)| ymax - p.1),
    ];
    for dist in &clips {
        if ring.is_empty() {
            return 0.0;
        }
        let mut out = Vec::with_capacity(ring.len() + 4);
        for i in 0..ring.len() {
            let cur = ring[i];
            let prev = ring[(i + ring.len() - 1) % ring.len()];
            let (dc, dp) = (dist(cur), dist(prev));
            if dc >= 0.0 {
                if dp < 0.0 {
                    out.push(intersect(prev, cur, dp, dc));
                }
                out.push(cur);
            } else if dp >= 0.0 {
                out.push(intersect(prev, cur, dp, dc));
            }
        }
        ring = out;
    }
    shoelace(&ring).abs()
}

fn intersect(a: (f64, f64), b: (f64, f64), da: f64, db: f64) -> (f64, f64) {
    let t = da / (da - db);
    (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
}

fn shoelace(ring: &[(f64, f64)]) -> f64 {
    if ring.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..ring.len() {
        let (x0, y0) = ring[i];
        let (x1, y1) = ring[(i + 1) % ring.len()];
        acc += x0 * y1 - x1 * y0;
    }
    acc / 2.0
}

fn add_polygon_areas(polygon: &[(f64, f64)], spec: &GridSpec, field: &mut [f64]) {
    let s = spec.cell_size;
    let (ox, oy) = spec.origin;
    let xs = polygon.iter().map(|p| p.0);
    let ys = polygon.iter().map(|p| p.1);
    let (bx0, bx1) = (xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
    let (by0, by1) = (ys.clone().fold(f64::INFINITY, f64::min), ys.fold(f64::NEG_INFINITY, f64::max));
    let c0 = (((bx0 - ox) / s).floor() as isize).max(0);
    let c1 = (((bx1 - ox) / s).floor() as isize).min(spec.width as isize - 1);
    let r0 = (((by0 - oy) / s).floor() as isize).max(0);
    let r1 = (((by1 - oy) / s).floor() as isize).min(spec.height as isize - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            let xmin = ox + c as f64 * s;
            let ymin = oy + r as f64 * s;
            let area = clipped_area(polygon, xmin, ymin, xmin + s, ymin + s);
            if area > 0.0 {
                field[r as usize * spec.width + c as usize] += area;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(h: usize, w: usize, s: f64) -> GridSpec {
        GridSpec::new((0.0, 0.0), s, h, w).unwrap()
    }

    fn polyline(coords: Vec<(f64, f64)>) -> GeoPrimitive {
        GeoPrimitive {
            kind: PrimitiveKind::Polyline,
            coords,
            attribute: 0.0,
        }
    }

    /// Independent oracle: walk the segment in tiny steps and charge each
    /// step's length to the cell containing its midpoint.
    fn sampled_lengths(a: (f64, f64), b: (f64, f64), spec: &GridSpec, steps: usize) -> Vec<f64> {
        let mut field = vec![0.0; spec.cells()];
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let dl = len / steps as f64;
        for i in 0..steps {
            let t = (i as f64 + 0.5) / steps as f64;
            let x = a.0 + t * (b.0 - a.0);
            let y = a.1 + t * (b.1 - a.1);
            if let Some((r, c)) = spec.cell_of(x, y) {
                field[r * spec.width + c] += dl;
            }
        }
        field
    }

    #[test]
    fn horizontal_polyline_splits_evenly_between_two_cells() {
        let spec = spec(1, 2, 10.0);
        let prim = polyline(vec![(0.0, 5.0), (20.0, 5.0)]);
        let field = rasterize_features(&[prim], &spec, Aggregator::SumLength).unwrap();
        assert!((field.data()[0] - 10.0).abs() < 1e-12);
        assert!((field.data()[1] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn zero_primitives_count_gives_all_zero_field() {
        let spec = spec(3, 3, 1.0);
        let field = rasterize_features(&[], &spec, Aggregator::Count).unwrap();
        assert!(field.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn diagonal_segment_matches_sampling_oracle() {
        let spec = spec(3, 3, 1.0);
        let (a, b) = ((0.2, 0.3), (2.7, 2.4));
        let prim = polyline(vec![a, b]);
        let field = rasterize_features(&[prim], &spec, Aggregator::SumLength).unwrap();
        let oracle = sampled_lengths(a, b, &spec, 2_000_000);
        for (got, want) in field.iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn sum_length_conserves_total_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = spec(4, 5, 2.0);
        for _ in 0..50 {
            // interior segments so nothing is clipped away by the extent
            let a: (f64, f64) = (rng.gen_range(0.1..9.9), rng.gen_range(0.1..7.9));
            let b: (f64, f64) = (rng.gen_range(0.1..9.9), rng.gen_range(0.1..7.9));
            let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
            let field = rasterize_features(&[polyline(vec![a, b])], &spec, Aggregator::SumLength).unwrap();
            let total: f64 = field.iter().sum();
            assert!((total - len).abs() <= 1e-6 * len.max(1.0), "{total} vs {len}");
        }
    }

    #[test]
    fn polygon_area_is_conserved_and_split_by_cells() {
        let spec = spec(2, 2, 1.0);
        // unit square centered on the 4-cell corner: a quarter in each cell
        let poly = GeoPrimitive {
            kind: PrimitiveKind::Polygon,
            coords: vec![(0.5, 0.5), (1.5, 0.5), (1.5, 1.5), (0.5, 1.5), (0.5, 0.5)],
            attribute: 0.0,
        };
        let field = rasterize_features(&[poly], &spec, Aggregator::SumArea).unwrap();
        for v in field.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn incompatible_aggregator_is_rejected() {
        let spec = spec(2, 2, 1.0);
        let prim = polyline(vec![(0.0, 0.0), (1.0, 1.0)]);
        let err = rasterize_features(&[prim], &spec, Aggregator::SumArea).unwrap_err();
        assert!(matches!(err, GridError::InvalidAggregator { .. }));
    }

    #[test]
    fn mean_attribute_averages_points_per_cell() {
        let spec = spec(1, 1, 10.0);
        let mk = |x: f64, y: f64, a: f64| GeoPrimitive {
            kind: PrimitiveKind::Point,
            coords: vec![(x, y)],
            attribute: a,
        };
        let field = rasterize_features(
            &[mk(1.0, 1.0, 2.0), mk(2.0, 2.0, 4.0)],
            &spec,
            Aggregator::MeanAttribute,
        )
        .unwrap();
        assert_eq!(field.data()[0], 3.0);
    }
}
