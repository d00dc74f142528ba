//! Kernel-weighted k-nearest-neighbour regression.
//!
//! Features are standardized with the training statistics, neighbours are
//! ranked by Euclidean distance (ties broken by row index) and combined with
//! the hyperbolic weight `1 / (d + epsilon)`. An optional calendar window
//! restricts candidates to rows whose month and hour are circularly close to
//! the query's.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{circular_distance, PlantKind, SampleMatrix};

const MAX_MONTH_DISTANCE: u32 = 6;
const MAX_HOUR_DISTANCE: u32 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalendarWindow {
    /// Maximum circular month distance.
    pub months: u32,
    /// Maximum circular hour distance.
    pub hours: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnParams {
    pub k: usize,
    pub epsilon: f64,
    pub window: Option<CalendarWindow>,
}

impl KnnParams {
    /// PV uses a ±1 month, ±1 hour window; wind uses none.
    pub fn default_for(kind: PlantKind) -> Self {
        KnnParams {
            k: 10,
            epsilon: 1e-6,
            window: match kind {
                PlantKind::Pv => Some(CalendarWindow {
                    months: 1,
                    hours: 1,
                }),
                PlantKind::Wd => None,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("knn.k must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("knn.epsilon must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnPrediction {
    pub value: f64,
    /// The calendar window had to be widened to find `k` candidates.
    pub widened: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    params: KnnParams,
    feature_names: Vec<String>,
    means: Vec<f64>,
    stds: Vec<f64>,
    /// Standardized features, row-major.
    features: Vec<f64>,
    targets: Vec<f64>,
    months: Vec<u8>,
    hours: Vec<u8>,
}

/// Memorizes the standardized training rows. Zero-variance columns get a
/// standard deviation of 1, which leaves them inert for distances.
pub fn fit_knn(data: &SampleMatrix, params: KnnParams) -> Result<KnnModel> {
    params.validate()?;
    let n = data.len();
    if n < params.k {
        return Err(Error::InsufficientData(format!(
            "k-NN needs at least k = {} rows, got {n}",
            params.k
        )));
    }
    let w = data.width();
    let mut means = vec![0.0; w];
    let mut stds = vec![0.0; w];
    for j in 0..w {
        let mut sum = 0.0;
        for i in 0..n {
            sum += data.row(i)[j];
        }
        let mean = sum / n as f64;
        let mut ss = 0.0;
        for i in 0..n {
            let d = data.row(i)[j] - mean;
            ss += d * d;
        }
        let std = (ss / n as f64).sqrt();
        means[j] = mean;
        stds[j] = if std > 0.0 {
            std
        } else {
            log::warn!(
                "k-NN feature {:?} has zero variance",
                data.feature_names()[j]
            );
            1.0
        };
    }
    let mut features = Vec::with_capacity(n * w);
    for i in 0..n {
        for (j, v) in data.row(i).iter().enumerate() {
            features.push((v - means[j]) / stds[j]);
        }
    }
    Ok(KnnModel {
        params,
        feature_names: data.feature_names().to_vec(),
        means,
        stds,
        features,
        targets: data.targets().to_vec(),
        months: data.timestamps().iter().map(|t| t.month() as u8).collect(),
        hours: data.timestamps().iter().map(|t| t.hour() as u8).collect(),
    })
}

impl KnnModel {
    pub fn params(&self) -> &KnnParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn width(&self) -> usize {
        self.means.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    /// Same model with a different neighbour count or window; the stored
    /// rows are reused.
    pub fn with_params(&self, params: KnnParams) -> Result<KnnModel> {
        params.validate()?;
        if self.len() < params.k {
            return Err(Error::InsufficientData(format!(
                "k-NN needs at least k = {} rows, got {}",
                params.k,
                self.len()
            )));
        }
        Ok(KnnModel {
            params,
            ..self.clone()
        })
    }

    pub fn predict(&self, x: &[f64], month: u32, hour: u32) -> Result<f64> {
        self.predict_detailed(x, month, hour).map(|p| p.value)
    }

    pub fn save_json<W: std::io::Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, self)?;
        Ok(())
    }

    pub fn load_json<R: std::io::Read>(input: R) -> Result<KnnModel> {
        let model: KnnModel = serde_json::from_reader(input)?;
        model.params.validate()?;
        let (n, w) = (model.targets.len(), model.feature_names.len());
        let consistent = n >= model.params.k
            && w > 0
            && model.means.len() == w
            && model.stds.len() == w
            && model.features.len() == n * w
            && model.months.len() == n
            && model.hours.len() == n;
        if !consistent {
            return Err(Error::Format(
                "corrupt k-NN model: inconsistent lengths".into(),
            ));
        }
        Ok(model)
    }

    pub fn predict_detailed(&self, x: &[f64], month: u32, hour: u32) -> Result<KnnPrediction> {
        if self.is_empty() {
            return Err(Error::InsufficientData("k-NN model has no rows".into()));
        }
        if x.len() != self.width() {
            return Err(Error::InvalidArgument(format!(
                "query width {} does not match model width {}",
                x.len(),
                self.width()
            )));
        }
        if !(1..=12).contains(&month) || hour > 23 {
            return Err(Error::InvalidArgument(format!(
                "month {month} / hour {hour} out of range"
            )));
        }
        let k = self.params.k;
        let query: Vec<f64> = x
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();

        let (candidates, widened) = self.candidates(month, hour);
        let w = self.width();
        let mut scored: Vec<(f64, usize)> = candidates
            .into_iter()
            .map(|i| {
                let row = &self.features[i * w..(i + 1) * w];
                let d2: f64 = row.iter().zip(&query).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2.sqrt(), i)
            })
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);

        let value = kernel_average(
            scored.iter().map(|(d, i)| (*d, self.targets[*i])),
            self.params.epsilon,
        );
        Ok(KnnPrediction {
            value: value.max(0.0),
            widened,
        })
    }

    /// Row indices inside the calendar window, widening it one step at a time
    /// (month, then hour, alternating) until at least `k` rows qualify.
    fn candidates(&self, month: u32, hour: u32) -> (Vec<usize>, bool) {
        let Some(window) = self.params.window else {
            return ((0..self.len()).collect(), false);
        };
        let (mut dm, mut dh) = (window.months, window.hours);
        let mut widen_month_next = true;
        let mut widened = false;
        loop {
            let rows: Vec<usize> = (0..self.len())
                .filter(|&i| {
                    calendar_distance(self.months[i] as u32 - 1, month - 1, 12) <= dm
                        && calendar_distance(self.hours[i] as u32, hour, 24) <= dh
                })
                .collect();
            let saturated = dm >= MAX_MONTH_DISTANCE && dh >= MAX_HOUR_DISTANCE;
            if rows.len() >= self.params.k || saturated {
                return (rows, widened);
            }
            widened = true;
            let can_month = dm < MAX_MONTH_DISTANCE;
            let can_hour = dh < MAX_HOUR_DISTANCE;
            if (widen_month_next && can_month) || !can_hour {
                dm += 1;
            } else {
                dh += 1;
            }
            widen_month_next = !widen_month_next;
        }
    }
}

/// Hyperbolic-kernel average of `(distance, target)` pairs.
fn kernel_average(neighbours: impl IntoIterator<Item = (f64, f64)>, epsilon: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (d, y) in neighbours {
        let weight = 1.0 / (d + epsilon);
        num += weight * y;
        den += weight;
    }
    num / den
}

fn calendar_distance(a: u32, b: u32, modulus: u32) -> u32 {
    circular_distance(a as i64, b as i64, modulus as i64).expect("modulus >= 2") as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{HourlyTimestamp, ZoneId};
    use proptest::prelude::*;

    fn matrix(rows: &[(Vec<f64>, f64)], hour0: i64) -> SampleMatrix {
        let w = rows[0].0.len();
        SampleMatrix::new(
            ZoneId::Nord,
            PlantKind::Wd,
            (0..w).map(|j| format!("f{j}")).collect(),
            (0..rows.len())
                .map(|i| HourlyTimestamp::from_hours(hour0 + i as i64))
                .collect(),
            rows.iter().flat_map(|r| r.0.clone()).collect(),
            rows.iter().map(|r| r.1).collect(),
        )
        .unwrap()
    }

    fn params(k: usize) -> KnnParams {
        KnnParams {
            k,
            epsilon: 1e-6,
            window: None,
        }
    }

    #[test]
    fn identical_rows_predict_common_target() {
        let rows: Vec<_> = (0..100).map(|_| (vec![3.0, 4.0], 7.5)).collect();
        let m = fit_knn(&matrix(&rows, 0), params(5)).unwrap();
        assert_eq!(m.len(), 100);
        assert!((m.predict(&[3.0, 4.0], 1, 0).unwrap() - 7.5).abs() < 1e-12);
    }

    #[test]
    fn too_few_rows() {
        let rows: Vec<_> = (0..3).map(|i| (vec![i as f64], 1.0)).collect();
        assert!(matches!(
            fit_knn(&matrix(&rows, 0), params(5)),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn standardization_statistics() {
        let rows = vec![(vec![8.0, -1.0], 0.0), (vec![12.0, 1.0], 0.0)];
        let m = fit_knn(&matrix(&rows, 0), params(1)).unwrap();
        assert_eq!(m.means(), &[10.0, 0.0]);
        for j in 0..2 {
            let col_mean: f64 = (0..2).map(|i| m.features[i * 2 + j]).sum::<f64>() / 2.0;
            assert!(col_mean.abs() < 1e-15);
        }
    }

    #[test]
    fn exact_match_with_k1() {
        let rows = vec![(vec![0.0], 1.0), (vec![1.0], 2.0), (vec![5.0], 3.0)];
        let m = fit_knn(&matrix(&rows, 0), params(1)).unwrap();
        assert_eq!(m.predict(&[1.0], 1, 0).unwrap(), 2.0);
    }

    #[test]
    fn hyperbolic_weights_hand_example() {
        let v = kernel_average([(1.0, 10.0), (3.0, 20.0)], 1e-12);
        assert!((v - 12.5).abs() < 1e-9);
    }

    #[test]
    fn windowed_candidates_are_a_subset() {
        let start = HourlyTimestamp::from_ymdh(2016, 11, 20, 0)
            .unwrap()
            .hours_since_epoch();
        let rows: Vec<_> = (0..2000).map(|i| (vec![(i % 7) as f64], 1.0)).collect();
        let data = matrix(&rows, start);
        let windowed = fit_knn(
            &data,
            KnnParams {
                k: 1,
                epsilon: 1e-6,
                window: Some(CalendarWindow {
                    months: 0,
                    hours: 2,
                }),
            },
        )
        .unwrap();
        let open = windowed.with_params(params(1)).unwrap();
        let (all, _) = open.candidates(12, 3);
        let (some, widened) = windowed.candidates(12, 3);
        assert!(!widened);
        assert_eq!(all.len(), 2000);
        assert!(some.len() < all.len());
        assert!(some.iter().all(|i| all.contains(i)));
    }

    #[test]
    fn constant_neighbour_targets() {
        let rows: Vec<_> = (0..20)
            .map(|i| (vec![i as f64, (i * i) as f64], 4.0))
            .collect();
        let m = fit_knn(&matrix(&rows, 0), params(6)).unwrap();
        assert!((m.predict(&[3.3, -2.0], 5, 5).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn calendar_window_and_widening() {
        // One row per hour over ~2 days in January.
        let start = HourlyTimestamp::from_ymdh(2017, 1, 1, 0)
            .unwrap()
            .hours_since_epoch();
        let rows: Vec<_> = (0..48).map(|i| (vec![i as f64], (i % 24) as f64)).collect();
        let data = matrix(&rows, start);
        let p = KnnParams {
            k: 2,
            epsilon: 1e-6,
            window: Some(CalendarWindow {
                months: 0,
                hours: 0,
            }),
        };
        let m = fit_knn(&data, p).unwrap();
        let r = m.predict_detailed(&[0.0], 1, 5).unwrap();
        assert!(!r.widened);
        assert_eq!(r.value, 5.0);
        let p3 = KnnParams { k: 3, ..p };
        let r = fit_knn(&data, p3)
            .unwrap()
            .predict_detailed(&[0.0], 1, 5)
            .unwrap();
        assert!(r.widened);
        // Month queries with no training data widen until rows appear.
        let r = m.predict_detailed(&[0.0], 7, 5).unwrap();
        assert!(r.widened);
    }

    #[test]
    fn width_mismatch_rejected() {
        let rows = vec![(vec![0.0, 1.0], 1.0)];
        let m = fit_knn(&matrix(&rows, 0), params(1)).unwrap();
        assert!(m.predict(&[0.0], 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn prediction_within_neighbour_range_and_affine_invariant(
            raw in prop::collection::vec((-50.0f64..50.0, 0.0f64..100.0, 0.0f64..500.0), 5..80),
            q in (-50.0f64..50.0, 0.0f64..100.0),
            scale in 0.1f64..10.0,
            shift in -100.0f64..100.0,
        ) {
            let rows: Vec<_> = raw.iter().map(|(a, b, y)| (vec![*a, *b], *y)).collect();
            let m = fit_knn(&matrix(&rows, 0), params(4)).unwrap();
            let p = m.predict(&[q.0, q.1], 1, 0).unwrap();
            let lo = raw.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
            let hi = raw.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(p >= lo - 1e-9 && p <= hi + 1e-9);

            let moved: Vec<_> = raw.iter().map(|(a, b, y)| (vec![a * scale + shift, *b], *y)).collect();
            let m2 = fit_knn(&matrix(&moved, 0), params(4)).unwrap();
            let p2 = m2.predict(&[q.0 * scale + shift, q.1], 1, 0).unwrap();
            prop_assert!((p - p2).abs() <= 1e-9 * p.abs().max(1.0));
        }
    }
}
