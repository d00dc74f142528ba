//! Quantile regression forest.
//!
//! A random forest of CART regression trees whose leaves keep the indices of
//! the training samples that reached them. For a query `x`, each tree gives
//! every sample in `x`'s leaf the weight `1 / leaf size`; averaging over trees
//! yields a weighted empirical conditional distribution of the target, and the
//! `alpha`-quantile is the smallest training target whose cumulative weight
//! reaches `alpha`.
//!
//! Trees are grown from a ChaCha8 stream keyed by `(seed, tree index)`, so a
//! fit is reproducible across runs, platforms and thread counts.
//!
//! # Persistence
//!
//! [`QrfModel::save_json`] writes a JSON document
//! `{"format_version": 1, "params": …, "feature_names": […], "width": w,
//! "targets": […], "trees": [{"nodes": […]}]}` where each node is either
//! `{"Split": {"feature", "threshold", "left", "right"}}` or
//! `{"Leaf": {"samples": [[index, multiplicity], …], "size"}}`. Floats are
//! written in shortest round-trip form, so loading is lossless.

mod tree;

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::SampleMatrix;

pub use tree::{Node, QrfTree};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QrfParams {
    pub n_trees: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means `ceil(width / 3)`.
    pub mtry: Option<usize>,
    /// `None` grows until the other stopping rules apply.
    pub max_depth: Option<usize>,
    pub seed: u64,
    /// Quantile level used for point forecasts.
    pub quantile: f64,
}

impl Default for QrfParams {
    fn default() -> Self {
        QrfParams {
            n_trees: 200,
            min_leaf: 5,
            mtry: None,
            max_depth: None,
            seed: 42,
            quantile: 0.5,
        }
    }
}

impl QrfParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees < 1 {
            return Err(Error::Config("qrf.n_trees must be >= 1".into()));
        }
        if self.min_leaf < 1 {
            return Err(Error::Config("qrf.min_leaf must be >= 1".into()));
        }
        if self.mtry == Some(0) {
            return Err(Error::Config("qrf.mtry must be >= 1".into()));
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(Error::Config("qrf.quantile must be in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn mtry_for(&self, width: usize) -> usize {
        self.mtry.unwrap_or_else(|| width.div_ceil(3)).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QrfModel {
    format_version: u32,
    params: QrfParams,
    feature_names: Vec<String>,
    width: usize,
    targets: Vec<f64>,
    trees: Vec<QrfTree>,
    #[serde(skip)]
    index: ForestIndex,
}

/// Lookup tables derived from the trees; rebuilt after loading.
#[derive(Debug, Clone, Default, PartialEq)]
struct ForestIndex {
    /// Distinct training targets, ascending.
    distinct_targets: Vec<f64>,
    /// `leaf_cdfs[tree][node]`: the leaf's targets ascending, each paired
    /// with the cumulative multiplicity up to and including it. Empty for
    /// split nodes.
    leaf_cdfs: Vec<Vec<Vec<(f64, u32)>>>,
}

impl ForestIndex {
    fn build(trees: &[QrfTree], targets: &[f64]) -> ForestIndex {
        let mut distinct_targets = targets.to_vec();
        distinct_targets.sort_by(f64::total_cmp);
        distinct_targets.dedup();
        let leaf_cdfs = trees
            .iter()
            .map(|t| {
                t.nodes()
                    .iter()
                    .map(|node| match node {
                        Node::Leaf { samples, .. } => {
                            let mut entries: Vec<(f64, u32)> = samples
                                .iter()
                                .map(|&(i, c)| (targets[i as usize], c))
                                .collect();
                            entries.sort_by(|a, b| a.0.total_cmp(&b.0));
                            let mut cum = 0;
                            for e in entries.iter_mut() {
                                cum += e.1;
                                e.1 = cum;
                            }
                            entries
                        }
                        Node::Split { .. } => Vec::new(),
                    })
                    .collect()
            })
            .collect();
        ForestIndex {
            distinct_targets,
            leaf_cdfs,
        }
    }
}

pub fn fit_qrf(data: &SampleMatrix, params: QrfParams) -> Result<QrfModel> {
    fit_qrf_with(data, params, true)
}

/// As [`fit_qrf`], choosing whether trees are grown on the rayon pool.
pub fn fit_qrf_with(data: &SampleMatrix, params: QrfParams, parallel: bool) -> Result<QrfModel> {
    params.validate()?;
    let width = data.width();
    let mtry = params.mtry_for(width);
    if mtry > width {
        return Err(Error::Config(format!(
            "qrf.mtry = {mtry} exceeds feature width {width}"
        )));
    }
    if data.len() < params.min_leaf {
        return Err(Error::InsufficientData(format!(
            "forest needs at least min_leaf = {} rows, got {}",
            params.min_leaf,
            data.len()
        )));
    }
    if data.len() > u32::MAX as usize {
        return Err(Error::InvalidArgument("too many training rows".into()));
    }
    let view = tree::TrainingView {
        features: data.features(),
        targets: data.targets(),
        width,
    };
    let grow_params = tree::GrowParams {
        min_leaf: params.min_leaf,
        mtry,
        max_depth: params.max_depth,
    };
    let grow_one = |t: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(t as u64);
        tree::grow(&view, &grow_params, &mut rng)
    };
    let trees: Vec<QrfTree> = if parallel {
        (0..params.n_trees).into_par_iter().map(grow_one).collect()
    } else {
        (0..params.n_trees).map(grow_one).collect()
    };
    Ok(QrfModel {
        format_version: FORMAT_VERSION,
        params,
        feature_names: data.feature_names().to_vec(),
        width,
        index: ForestIndex::build(&trees, data.targets()),
        targets: data.targets().to_vec(),
        trees,
    })
}

impl QrfModel {
    pub fn params(&self) -> &QrfParams {
        &self.params
    }

    pub fn trees(&self) -> &[QrfTree] {
        &self.trees
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Same forest with a different point-forecast quantile.
    pub fn with_quantile(&self, quantile: f64) -> Result<QrfModel> {
        let params = QrfParams {
            quantile,
            ..self.params
        };
        params.validate()?;
        Ok(QrfModel {
            params,
            ..self.clone()
        })
    }

    fn check_width(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.width {
            return Err(Error::InvalidArgument(format!(
                "query width {} does not match forest width {}",
                x.len(),
                self.width
            )));
        }
        Ok(())
    }

    /// Weights of the training samples sharing a leaf with `x`, as
    /// `(index, weight)` sorted by index; absent samples weigh 0. Sample `i`
    /// weighs `(sum over trees of multiplicity / leaf size) / n_trees`, the
    /// sum running over trees in order.
    pub fn sparse_weights(&self, x: &[f64]) -> Result<Vec<(usize, f64)>> {
        self.check_width(x)?;
        let mut contributions: Vec<(u32, f64)> = Vec::new();
        for t in &self.trees {
            let (samples, size) = t.leaf(x);
            let size = size as f64;
            contributions.extend(samples.iter().map(|&(i, c)| (i, c as f64 / size)));
        }
        // Stable: contributions of one sample stay in tree order.
        contributions.sort_by_key(|c| c.0);
        let n_trees = self.trees.len() as f64;
        let mut weights: Vec<(usize, f64)> = Vec::new();
        for (i, c) in contributions {
            match weights.last_mut() {
                Some((last, w)) if *last == i as usize => *w += c,
                _ => weights.push((i as usize, c)),
            }
        }
        for (_, w) in weights.iter_mut() {
            *w /= n_trees;
        }
        Ok(weights)
    }

    /// Dense weight vector over all training samples; sums to 1.
    pub fn weights(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut dense = vec![0.0; self.targets.len()];
        for (i, w) in self.sparse_weights(x)? {
            dense[i] = w;
        }
        Ok(dense)
    }

    /// Conditional `alpha`-quantile: the smallest training target `y` with
    /// `F(y) >= alpha`, where
    ///
    /// `F(y) = (sum over trees t of n_t(y) / size_t) / n_trees`
    ///
    /// and `n_t(y)` counts the draws in `x`'s leaf of tree `t` with target
    /// `<= y`. This is the weighted empirical CDF of the sample weights; the
    /// sum runs over trees in order.
    pub fn quantile(&self, x: &[f64], alpha: f64) -> Result<f64> {
        Ok(self.quantiles(x, &[alpha])?[0])
    }

    /// Several quantiles from one pass down the trees.
    pub fn quantiles(&self, x: &[f64], alphas: &[f64]) -> Result<Vec<f64>> {
        self.check_width(x)?;
        if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "quantile level must lie in (0, 1), got {a}"
            )));
        }
        let leaves: Vec<(&[(f64, u32)], f64)> = self
            .trees
            .iter()
            .zip(&self.index.leaf_cdfs)
            .map(|(t, cdfs)| {
                let leaf = t.leaf_index(x);
                let size = match &t.nodes()[leaf] {
                    Node::Leaf { size, .. } => *size,
                    Node::Split { .. } => unreachable!("leaf_index returns a leaf"),
                };
                (cdfs[leaf].as_slice(), size as f64)
            })
            .collect();
        let n_trees = self.trees.len() as f64;
        let cdf = |y: f64| -> f64 {
            let mut sum = 0.0;
            for (entries, size) in &leaves {
                let k = entries.partition_point(|e| e.0 <= y);
                if k > 0 {
                    sum += entries[k - 1].1 as f64 / size;
                }
            }
            sum / n_trees
        };
        let ys = &self.index.distinct_targets;
        Ok(alphas
            .iter()
            .map(|&alpha| {
                // F reaches exactly 1 at the largest target, so the search
                // always lands on a target.
                let k = ys.partition_point(|y| cdf(*y) < alpha).min(ys.len() - 1);
                ys[k]
            })
            .collect())
    }

    /// Point forecast at the configured quantile level.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.quantile(x, self.params.quantile)
    }

    /// Weighted conditional mean (the plain random-forest estimate).
    pub fn mean(&self, x: &[f64]) -> Result<f64> {
        Ok(self
            .sparse_weights(x)?
            .into_iter()
            .map(|(i, w)| w * self.targets[i])
            .sum())
    }

    pub fn save_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, self)?;
        Ok(())
    }

    pub fn load_json<R: Read>(input: R) -> Result<QrfModel> {
        let mut model: QrfModel = serde_json::from_reader(input)?;
        if model.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported forest format version {} (expected {FORMAT_VERSION})",
                model.format_version
            )));
        }
        model.validate_structure()?;
        model.index = ForestIndex::build(&model.trees, &model.targets);
        Ok(model)
    }

    /// Checks that a deserialized forest is internally consistent.
    fn validate_structure(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Format(format!("corrupt forest: {m}")));
        if self.trees.is_empty() || self.trees.len() != self.params.n_trees {
            return bad(format!(
                "{} trees for n_trees = {}",
                self.trees.len(),
                self.params.n_trees
            ));
        }
        if self.feature_names.len() != self.width || self.targets.is_empty() {
            return bad("feature names or targets do not match the forest".into());
        }
        for (t, tree) in self.trees.iter().enumerate() {
            let n = tree.nodes().len();
            for (i, node) in tree.nodes().iter().enumerate() {
                let ok = match node {
                    Node::Split {
                        feature,
                        left,
                        right,
                        threshold,
                    } => {
                        *feature < self.width
                            && *left > i
                            && *right > i
                            && *left < n
                            && *right < n
                            && threshold.is_finite()
                    }
                    Node::Leaf { samples, size } => {
                        !samples.is_empty()
                            && samples
                                .iter()
                                .all(|(s, _)| (*s as usize) < self.targets.len())
                            && samples.iter().map(|s| s.1).sum::<u32>() == *size
                    }
                };
                if !ok {
                    return bad(format!("tree {t} node {i}"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{HourlyTimestamp, PlantKind, ZoneId};
    use proptest::prelude::*;
    use rand::Rng;

    fn matrix(x: &[Vec<f64>], y: &[f64]) -> SampleMatrix {
        let w = x[0].len();
        SampleMatrix::new(
            ZoneId::Sud,
            PlantKind::Wd,
            (0..w).map(|j| format!("f{j}")).collect(),
            (0..y.len())
                .map(|i| HourlyTimestamp::from_hours(i as i64))
                .collect(),
            x.iter().flatten().copied().collect(),
            y.to_vec(),
        )
        .unwrap()
    }

    fn random_data(seed: u64, n: usize, w: usize) -> SampleMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..w).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let y: Vec<f64> = x
            .iter()
            .map(|r| (r[0] * 3.0).round() + rng.random_range(0.0..1.0f64).round())
            .collect();
        matrix(&x, &y)
    }

    fn small(n_trees: usize, min_leaf: usize) -> QrfParams {
        QrfParams {
            n_trees,
            min_leaf,
            ..QrfParams::default()
        }
    }

    #[test]
    fn constant_targets_give_single_leaf_trees() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, -(i as f64)]).collect();
        let m = fit_qrf(&matrix(&x, &[7.0; 30]), small(10, 2)).unwrap();
        assert!(m.trees().iter().all(|t| t.nodes().len() == 1));
        for a in [0.01, 0.5, 0.99] {
            assert_eq!(m.quantile(&[3.0, 1.0], a).unwrap(), 7.0);
        }
    }

    #[test]
    fn repeated_fits_are_identical() {
        let d = random_data(1, 120, 3);
        let a = fit_qrf(&d, small(15, 3)).unwrap();
        let b = fit_qrf(&d, small(15, 3)).unwrap();
        assert_eq!(a, b);
        let serial = fit_qrf_with(&d, small(15, 3), false).unwrap();
        assert_eq!(a, serial);
        let other_seed = fit_qrf(
            &d,
            QrfParams {
                seed: 7,
                ..small(15, 3)
            },
        )
        .unwrap();
        assert_ne!(a, other_seed);
    }

    #[test]
    fn one_tree_one_leaf_holds_whole_bootstrap() {
        let d = random_data(2, 40, 2);
        let m = fit_qrf(&d, small(1, 40)).unwrap();
        let tree = &m.trees()[0];
        assert_eq!(tree.nodes().len(), 1);
        match &tree.nodes()[0] {
            Node::Leaf { samples, size } => {
                assert_eq!(*size, 40);
                assert_eq!(samples.iter().map(|s| s.1).sum::<u32>(), 40);
            }
            Node::Split { .. } => panic!("expected leaf"),
        }
    }

    #[test]
    fn insufficient_rows_and_bad_params() {
        let d = random_data(3, 4, 2);
        assert!(matches!(
            fit_qrf(&d, small(5, 5)),
            Err(Error::InsufficientData(_))
        ));
        let d = random_data(3, 50, 2);
        assert!(fit_qrf(
            &d,
            QrfParams {
                mtry: Some(3),
                ..small(2, 2)
            }
        )
        .is_err());
        let m = fit_qrf(&d, small(2, 2)).unwrap();
        assert!(m.quantile(&[0.0, 0.0], 0.0).is_err());
        assert!(m.quantile(&[0.0, 0.0], 1.0).is_err());
        assert!(m.quantile(&[0.0], 0.5).is_err());
    }

    #[test]
    fn tree_invariants_hold() {
        let d = random_data(4, 150, 3);
        let min_leaf = 4;
        let m = fit_qrf(&d, small(8, min_leaf)).unwrap();
        for t in m.trees() {
            let mut total = 0;
            for node in t.nodes() {
                if let Node::Leaf { samples, size } = node {
                    assert!(*size as usize >= min_leaf);
                    assert_eq!(samples.iter().map(|s| s.1).sum::<u32>(), *size);
                    assert!(samples.windows(2).all(|w| w[0].0 < w[1].0));
                    total += *size as usize;
                }
            }
            // Every bootstrap draw lands in exactly one leaf.
            assert_eq!(total, d.len());
        }
    }

    #[test]
    fn weights_two_tree_hand_example() {
        // Averaging per-tree leaf weights {1: 1/2, 2: 1/2} and {2: 1/2, 3: 1/2}.
        let trees = vec![
            QrfTree::from_nodes(vec![Node::Leaf {
                samples: vec![(1, 1), (2, 1)],
                size: 2,
            }]),
            QrfTree::from_nodes(vec![Node::Leaf {
                samples: vec![(2, 1), (3, 1)],
                size: 2,
            }]),
        ];
        let m = QrfModel::from_parts(
            small(2, 1),
            vec!["f".into()],
            vec![0.0, 1.0, 2.0, 3.0],
            trees,
        );
        assert_eq!(m.weights(&[0.0]).unwrap(), vec![0.0, 0.25, 0.5, 0.25]);
    }

    #[test]
    fn uniform_leaf_quantiles() {
        let trees = vec![QrfTree::from_nodes(vec![Node::Leaf {
            samples: vec![(0, 1), (1, 1), (2, 1), (3, 1)],
            size: 4,
        }])];
        let m = QrfModel::from_parts(
            small(1, 1),
            vec!["f".into()],
            vec![4.0, 2.0, 3.0, 1.0],
            trees,
        );
        assert_eq!(m.weights(&[0.0]).unwrap(), vec![0.25; 4]);
        assert_eq!(m.quantile(&[0.0], 0.5).unwrap(), 2.0);
        assert_eq!(m.quantile(&[0.0], 0.25).unwrap(), 1.0);
        assert_eq!(m.quantile(&[0.0], 0.26).unwrap(), 2.0);
        assert_eq!(m.quantile(&[0.0], 0.99).unwrap(), 4.0);
    }

    #[test]
    fn weights_sum_to_one() {
        let d = random_data(5, 100, 2);
        let m = fit_qrf(&d, small(12, 3)).unwrap();
        for x in [[0.0, 0.0], [4.0, -4.0], [-10.0, 10.0]] {
            let s: f64 = m.weights(&x).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let d = random_data(6, 80, 2);
        let m = fit_qrf(&d, small(5, 3)).unwrap();
        let mut buf = Vec::new();
        m.save_json(&mut buf).unwrap();
        let back = QrfModel::load_json(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let bumped = String::from_utf8(buf).unwrap().replacen(
            "\"format_version\":1",
            "\"format_version\":9",
            1,
        );
        assert!(matches!(
            QrfModel::load_json(bumped.as_bytes()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn median_tracks_a_monotone_response() {
        // y = x on a dense grid: the conditional median must increase with x.
        let x: Vec<Vec<f64>> = (0..400).map(|i| vec![i as f64 / 4.0]).collect();
        let y: Vec<f64> = x.iter().map(|r| r[0]).collect();
        let m = fit_qrf(&matrix(&x, &y), small(30, 5)).unwrap();
        let grid: Vec<f64> = (0..10).map(|i| 5.0 + i as f64 * 9.0 + 0.37).collect();
        let med: Vec<f64> = grid
            .iter()
            .map(|g| m.quantile(&[*g], 0.5).unwrap())
            .collect();
        assert!(med.windows(2).all(|w| w[0] < w[1]), "{med:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn quantile_is_monotone_and_a_training_target(seed in 0u64..1000, qx in -6.0f64..6.0, qy in -6.0f64..6.0) {
            let d = random_data(seed, 60, 2);
            let m = fit_qrf(&d, small(6, 2)).unwrap();
            let alphas: Vec<f64> = (1..20).map(|i| i as f64 * 0.05).collect();
            let q = m.quantiles(&[qx, qy], &alphas).unwrap();
            prop_assert!(q.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(q.iter().all(|v| d.targets().contains(v)));
        }
    }
}

#[cfg(test)]
impl QrfModel {
    pub(crate) fn from_parts(
        params: QrfParams,
        feature_names: Vec<String>,
        targets: Vec<f64>,
        trees: Vec<QrfTree>,
    ) -> Self {
        QrfModel {
            format_version: FORMAT_VERSION,
            params,
            width: feature_names.len(),
            feature_names,
            index: ForestIndex::build(&trees, &targets),
            targets,
            trees,
        }
    }
}
