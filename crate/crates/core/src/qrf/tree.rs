//! CART regression tree that keeps the bootstrap sample indices of each leaf.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Tree node. Children are indices into [`QrfTree::nodes`]; samples with
/// `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        /// `(training index, multiplicity in the bootstrap)`, sorted by index.
        samples: Vec<(u32, u32)>,
        /// Number of bootstrap draws in the leaf (sum of multiplicities).
        size: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QrfTree {
    nodes: Vec<Node>,
}

impl QrfTree {
    #[cfg(test)]
    pub(crate) fn from_nodes(nodes: Vec<Node>) -> Self {
        QrfTree { nodes }
    }

    /// Root is `nodes()[0]`.
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Index of the leaf node reached by `x`.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
                Node::Leaf { .. } => return i,
            }
        }
    }

    pub fn leaf(&self, x: &[f64]) -> (&[(u32, u32)], u32) {
        match &self.nodes[self.leaf_index(x)] {
            Node::Leaf { samples, size } => (samples, *size),
            Node::Split { .. } => unreachable!("leaf_index returns a leaf"),
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

pub(crate) struct GrowParams {
    pub min_leaf: usize,
    pub mtry: usize,
    pub max_depth: Option<usize>,
}

/// Row-major training data borrowed for growing.
pub(crate) struct TrainingView<'a> {
    pub features: &'a [f64],
    pub targets: &'a [f64],
    pub width: usize,
}

impl TrainingView<'_> {
    fn value(&self, row: u32, feature: usize) -> f64 {
        self.features[row as usize * self.width + feature]
    }
}

struct Frame {
    node: usize,
    lo: usize,
    hi: usize,
    depth: usize,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    /// Number of samples going left.
    n_left: usize,
    score: f64,
}

/// Grows one tree on a bootstrap drawn from `rng`.
///
/// For every feature the bootstrap draws are kept sorted by value; a node is
/// a contiguous range in each of these orders, and splitting a node stably
/// partitions each range, so every level costs O(width · n).
pub(crate) fn grow<R: Rng>(data: &TrainingView<'_>, params: &GrowParams, rng: &mut R) -> QrfTree {
    let n = data.targets.len();
    let width = data.width;
    let bootstrap: Vec<u32> = (0..n)
        .map(|_| rng.random_range(0..n as u64) as u32)
        .collect();

    // sorted[f] holds draw positions (into `bootstrap`) ordered by feature f.
    let mut sorted: Vec<Vec<u32>> = (0..width)
        .map(|f| {
            let mut order: Vec<u32> = (0..n as u32).collect();
            order.sort_by(|&a, &b| {
                data.value(bootstrap[a as usize], f)
                    .total_cmp(&data.value(bootstrap[b as usize], f))
                    .then(a.cmp(&b))
            });
            order
        })
        .collect();
    let mut goes_left = vec![false; n];
    let mut scratch: Vec<u32> = Vec::with_capacity(n);
    let mut feature_pool: Vec<usize> = (0..width).collect();

    let mut nodes = vec![Node::Leaf {
        samples: Vec::new(),
        size: 0,
    }];
    let mut stack = vec![Frame {
        node: 0,
        lo: 0,
        hi: n,
        depth: 0,
    }];

    while let Some(frame) = stack.pop() {
        let range = frame.lo..frame.hi;
        let size = range.len();
        let target = |pos: u32| data.targets[bootstrap[pos as usize] as usize];

        let first_y = target(sorted[0][frame.lo]);
        let pure = sorted[0][range.clone()]
            .iter()
            .all(|&p| target(p) == first_y);
        let depth_capped = params.max_depth.is_some_and(|d| frame.depth >= d);
        let split = if size < 2 * params.min_leaf || pure || depth_capped {
            None
        } else {
            // Partial Fisher–Yates draw of `mtry` candidate features.
            for i in 0..params.mtry {
                let j = i + rng.random_range(0..(width - i) as u64) as usize;
                feature_pool.swap(i, j);
            }
            best_split(
                data,
                &bootstrap,
                &sorted,
                &feature_pool[..params.mtry],
                frame.lo,
                frame.hi,
                params.min_leaf,
            )
        };

        let Some(split) = split else {
            let mut idx: Vec<u32> = sorted[0][range]
                .iter()
                .map(|&p| bootstrap[p as usize])
                .collect();
            idx.sort_unstable();
            let mut samples: Vec<(u32, u32)> = Vec::new();
            for i in idx {
                match samples.last_mut() {
                    Some((last, count)) if *last == i => *count += 1,
                    _ => samples.push((i, 1)),
                }
            }
            nodes[frame.node] = Node::Leaf {
                samples,
                size: size as u32,
            };
            continue;
        };

        let mid = frame.lo + split.n_left;
        for (k, &p) in sorted[split.feature][frame.lo..frame.hi].iter().enumerate() {
            goes_left[p as usize] = k < split.n_left;
        }
        for order in sorted.iter_mut() {
            let slice = &mut order[frame.lo..frame.hi];
            scratch.clear();
            let mut w = 0;
            for i in 0..slice.len() {
                let p = slice[i];
                if goes_left[p as usize] {
                    slice[w] = p;
                    w += 1;
                } else {
                    scratch.push(p);
                }
            }
            slice[w..].copy_from_slice(&scratch);
        }

        let left = nodes.len();
        let right = left + 1;
        nodes.push(Node::Leaf {
            samples: Vec::new(),
            size: 0,
        });
        nodes.push(Node::Leaf {
            samples: Vec::new(),
            size: 0,
        });
        nodes[frame.node] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        // Right pushed first so the left subtree is grown first.
        stack.push(Frame {
            node: right,
            lo: mid,
            hi: frame.hi,
            depth: frame.depth + 1,
        });
        stack.push(Frame {
            node: left,
            lo: frame.lo,
            hi: mid,
            depth: frame.depth + 1,
        });
    }
    QrfTree { nodes }
}

/// Variance-reduction split over midpoints between consecutive distinct
/// values, restricted to children of at least `min_leaf` draws. Maximizing
/// `S_L²/n_L + S_R²/n_R` minimizes the summed child squared deviations.
fn best_split(
    data: &TrainingView<'_>,
    bootstrap: &[u32],
    sorted: &[Vec<u32>],
    features: &[usize],
    lo: usize,
    hi: usize,
    min_leaf: usize,
) -> Option<BestSplit> {
    let size = hi - lo;
    let total: f64 = sorted[0][lo..hi]
        .iter()
        .map(|&p| data.targets[bootstrap[p as usize] as usize])
        .sum();
    let mut best: Option<BestSplit> = None;
    for &f in features {
        let order = &sorted[f][lo..hi];
        let mut left_sum = 0.0;
        for k in 0..size - 1 {
            let row = bootstrap[order[k] as usize];
            left_sum += data.targets[row as usize];
            let n_left = k + 1;
            let n_right = size - n_left;
            if n_left < min_leaf {
                continue;
            }
            if n_right < min_leaf {
                break;
            }
            let v = data.value(row, f);
            let next = data.value(bootstrap[order[k + 1] as usize], f);
            if !(v < next) {
                continue;
            }
            let right_sum = total - left_sum;
            let score =
                left_sum * left_sum / n_left as f64 + right_sum * right_sum / n_right as f64;
            if best.as_ref().is_none_or(|b| score > b.score) {
                let mut threshold = v + (next - v) / 2.0;
                if !(threshold < next) {
                    threshold = v;
                }
                best = Some(BestSplit {
                    feature: f,
                    threshold,
                    n_left,
                    score,
                });
            }
        }
    }
    best
}
