//! Mapping sensor readings to labeled grid cells.

use super::{GridError, GridSpec, LabelGrid, SensorReading};
use crate::autodiff::Tensor;

/// Builds a [`LabelGrid`] by averaging co-located readings per cell and time
/// step. Readings outside the grid extent or with an out-of-range time index
/// are returned in the rejected list rather than treated as fatal.
pub fn map_sensors_to_labels(
    readings: &[SensorReading],
    spec: &GridSpec,
    time_steps: usize,
) -> Result<(LabelGrid, Vec<SensorReading>), GridError> {
    let (h, w) = (spec.height, spec.width);
    let n = time_steps * h * w;
    let mut sums = vec![0.0; n];
    let mut counts = vec![0u64; n];
    let mut rejected = Vec::new();
    for reading in readings {
        if !reading.value.is_finite() {
            return Err(GridError::Invalid(format!(
                "non-finite reading from sensor {}",
                reading.sensor_id
            )));
        }
        let cell = spec.cell_of(reading.easting, reading.northing);
        match cell {
            Some((r, c)) if reading.time_index < time_steps => {
                let idx = (reading.time_index * h + r) * w + c;
                sums[idx] += reading.value;
                counts[idx] += 1;
            }
            _ => rejected.push(reading.clone()),
        }
    }
    let mut mask = vec![false; n];
    for (i, &c) in counts.iter().enumerate() {
        if c > 0 {
            sums[i] /= c as f64;
            mask[i] = true;
        }
    }
    let values = Tensor::from_vec(&[time_steps, h, w], sums).map_err(|e| GridError::Invalid(e.to_string()))?;
    Ok((LabelGrid::new(values, mask)?, rejected))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reading(x: f64, y: f64, t: usize, v: f64) -> SensorReading {
        SensorReading {
            sensor_id: format!("s{x}_{y}_{t}"),
            easting: x,
            northing: y,
            time_index: t,
            value: v,
        }
    }

    fn spec() -> GridSpec {
        GridSpec::new((0.0, 0.0), 1.0, 6, 6).unwrap()
    }

    #[test]
    fn single_reading_labels_exactly_one_cell() {
        let (labels, rejected) =
            map_sensors_to_labels(&[reading(4.5, 3.5, 0, 12.5)], &spec(), 2).unwrap();
        assert!(rejected.is_empty());
        assert_eq!(labels.value_at(0, 3, 4), Some(12.5));
        assert_eq!(labels.mask.iter().filter(|m| **m).count(), 1);
    }

    #[test]
    fn colocated_readings_average() {
        let rs = [reading(1.2, 1.3, 0, 10.0), reading(1.7, 1.6, 0, 14.0)];
        let (labels, _) = map_sensors_to_labels(&rs, &spec(), 1).unwrap();
        assert_eq!(labels.value_at(0, 1, 1), Some(12.0));
    }

    #[test]
    fn reading_left_of_origin_is_rejected() {
        let rs = [reading(-0.1, 2.0, 0, 5.0)];
        let (labels, rejected) = map_sensors_to_labels(&rs, &spec(), 1).unwrap();
        assert_eq!(rejected.len(), 1);
        assert!(labels.mask.iter().all(|m| !*m));
    }

    #[test]
    fn out_of_range_time_index_is_rejected() {
        let rs = [reading(1.0, 1.0, 3, 5.0)];
        let (_, rejected) = map_sensors_to_labels(&rs, &spec(), 3).unwrap();
        assert_eq!(rejected.len(), 1);
    }

    #[test]
    fn count_weighted_cell_mean_equals_mean_of_accepted_readings() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let spec = spec();
        let readings: Vec<SensorReading> = (0..200)
            .map(|i| SensorReading {
                sensor_id: format!("s{i}"),
                easting: rng.gen_range(0.0..6.0),
                northing: rng.gen_range(0.0..6.0),
                time_index: rng.gen_range(0..3),
                value: rng.gen_range(-10.0..10.0),
            })
            .collect();
        let (labels, rejected) = map_sensors_to_labels(&readings, &spec, 3).unwrap();
        assert!(rejected.is_empty());
        // reconstruct per-cell counts to weight the cell means
        let mut counts = vec![0u64; 3 * 36];
        for r in &readings {
            let (row, col) = spec.cell_of(r.easting, r.northing).unwrap();
            counts[(r.time_index * 6 + row) * 6 + col] += 1;
        }
        let weighted: f64 = labels
            .values
            .data()
            .iter()
            .zip(&counts)
            .map(|(v, &c)| v * c as f64)
            .sum();
        let raw_mean: f64 = readings.iter().map(|r| r.value).sum::<f64>() / readings.len() as f64;
        assert!((weighted / readings.len() as f64 - raw_mean).abs() < 1e-12);
    }
}
