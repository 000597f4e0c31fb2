//! Downstream classifier heads over binary feature matrices.
//!
//! The default head is a small gradient-boosted tree ensemble with logistic
//! loss. Features are binary, so every split is "feature k is 0 / is 1".

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    GradientBoostedTrees,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// Row fraction drawn (without replacement) per tree.
    pub subsample: f64,
    pub l2: f64,
    pub min_child_hessian: f64,
    /// Weight each class to half the total loss, so the fitted score is
    /// thresholded for balanced accuracy rather than plain accuracy.
    pub balanced_classes: bool,
    pub seed: u64,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            kind: HeadKind::GradientBoostedTrees,
            n_trees: 200,
            max_depth: 3,
            learning_rate: 0.1,
            subsample: 0.8,
            l2: 1.0,
            min_child_hessian: 1e-3,
            balanced_classes: true,
            seed: 0,
        }
    }
}

/// One regression tree over binary features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        zero: Box<Node>,
        one: Box<Node>,
    },
}

impl Node {
    fn eval(&self, row: &[u8]) -> f64 {
        match self {
            Node::Leaf(v) => *v,
            Node::Split { feature, zero, one } => {
                if row[*feature] == 0 {
                    zero.eval(row)
                } else {
                    one.eval(row)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrainedHead {
    Trees { base: f64, trees: Vec<Node> },
    Logistic { bias: f64, weights: Vec<f64> },
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl TrainedHead {
    pub fn score(&self, row: &[u8]) -> f64 {
        match self {
            TrainedHead::Trees { base, trees } => base + trees.iter().map(|t| t.eval(row)).sum::<f64>(),
            TrainedHead::Logistic { bias, weights } => {
                bias + weights
                    .iter()
                    .zip(row)
                    .map(|(w, &x)| w * x as f64)
                    .sum::<f64>()
            }
        }
    }

    pub fn predict_proba(&self, matrix: &FeatureMatrix) -> Vec<f64> {
        matrix.rows().iter().map(|r| sigmoid(self.score(r))).collect()
    }

    /// Class 1 when the positive-class probability is at least 0.5.
    pub fn predict(&self, matrix: &FeatureMatrix) -> Vec<u8> {
        matrix
            .rows()
            .iter()
            .map(|r| (self.score(r) >= 0.0) as u8)
            .collect()
    }
}

struct TreeBuilder<'a> {
    rows: &'a [Vec<u8>],
    grad: &'a [f64],
    hess: &'a [f64],
    spec: &'a HeadSpec,
}

impl TreeBuilder<'_> {
    fn leaf(&self, idx: &[usize]) -> Node {
        let g: f64 = idx.iter().map(|&i| self.grad[i]).sum();
        let h: f64 = idx.iter().map(|&i| self.hess[i]).sum();
        Node::Leaf(-self.spec.learning_rate * g / (h + self.spec.l2))
    }

    fn build(&self, idx: &[usize], depth: usize) -> Node {
        let k = self.rows.first().map_or(0, Vec::len);
        if depth == self.spec.max_depth || k == 0 || idx.len() < 2 {
            return self.leaf(idx);
        }
        let g: f64 = idx.iter().map(|&i| self.grad[i]).sum();
        let h: f64 = idx.iter().map(|&i| self.hess[i]).sum();
        let lambda = self.spec.l2;
        let parent = g * g / (h + lambda);
        let mut best: Option<(usize, f64)> = None;
        for feature in 0..k {
            let (mut g1, mut h1) = (0.0, 0.0);
            for &i in idx {
                if self.rows[i][feature] != 0 {
                    g1 += self.grad[i];
                    h1 += self.hess[i];
                }
            }
            let (g0, h0) = (g - g1, h - h1);
            if h1 < self.spec.min_child_hessian || h0 < self.spec.min_child_hessian {
                continue;
            }
            let gain = g1 * g1 / (h1 + lambda) + g0 * g0 / (h0 + lambda) - parent;
            // strict comparison keeps the lowest-index feature on ties
            if gain > 1e-12 && best.is_none_or(|(_, b)| gain > b) {
                best = Some((feature, gain));
            }
        }
        match best {
            None => self.leaf(idx),
            Some((feature, _)) => {
                let (one, zero): (Vec<usize>, Vec<usize>) =
                    idx.iter().partition(|&&i| self.rows[i][feature] != 0);
                Node::Split {
                    feature,
                    zero: Box::new(self.build(&zero, depth + 1)),
                    one: Box::new(self.build(&one, depth + 1)),
                }
            }
        }
    }
}

fn sample_weights(labels: &[u8], balanced: bool) -> Vec<f64> {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let neg = n - pos;
    labels
        .iter()
        .map(|&y| match (balanced, y) {
            (false, _) => 1.0,
            (true, 1) => n / (2.0 * pos),
            (true, _) => n / (2.0 * neg),
        })
        .collect()
}

fn train_trees(rows: &[Vec<u8>], labels: &[u8], spec: &HeadSpec) -> TrainedHead {
    let n = labels.len();
    let weights = sample_weights(labels, spec.balanced_classes);
    let pos: f64 = labels.iter().zip(&weights).filter(|(&y, _)| y == 1).map(|(_, w)| w).sum();
    let total: f64 = weights.iter().sum();
    let base = if (2.0 * pos - total).abs() < 1e-9 {
        0.0
    } else {
        let rate = ((pos + 0.5) / (total + 1.0)).clamp(1e-6, 1.0 - 1e-6);
        (rate / (1.0 - rate)).ln()
    };
    let mut scores = vec![base; n];
    let mut trees = Vec::with_capacity(spec.n_trees);
    let sample_size = ((spec.subsample.clamp(0.0, 1.0) * n as f64).round() as usize).clamp(1, n.max(1));
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    for t in 0..spec.n_trees {
        for i in 0..n {
            let p = sigmoid(scores[i]);
            grad[i] = weights[i] * (p - labels[i] as f64);
            hess[i] = weights[i] * (p * (1.0 - p)).max(1e-12);
        }
        let idx: Vec<usize> = if sample_size >= n {
            (0..n).collect()
        } else {
            let mut r = rng::stream(spec.seed, "head-subsample", t as u64);
            let mut picks = index::sample(&mut r, n, sample_size).into_vec();
            picks.sort_unstable();
            picks
        };
        let tree = TreeBuilder {
            rows,
            grad: &grad,
            hess: &hess,
            spec,
        }
        .build(&idx, 0);
        for (i, s) in scores.iter_mut().enumerate() {
            *s += tree.eval(&rows[i]);
        }
        trees.push(tree);
    }
    TrainedHead::Trees { base, trees }
}

fn train_logistic(rows: &[Vec<u8>], labels: &[u8], spec: &HeadSpec) -> TrainedHead {
    let n = labels.len() as f64;
    let k = rows.first().map_or(0, Vec::len);
    let sample_w = sample_weights(labels, spec.balanced_classes);
    let mut weights = vec![0.0; k];
    let mut bias = 0.0;
    let step = 0.5;
    let l2 = spec.l2 / n;
    for _ in 0..1000 {
        let mut gw = vec![0.0; k];
        let mut gb = 0.0;
        for ((row, &y), sw) in rows.iter().zip(labels).zip(&sample_w) {
            let z = bias + weights.iter().zip(row).map(|(w, &x)| w * x as f64).sum::<f64>();
            let err = sw * (sigmoid(z) - y as f64);
            gb += err;
            for (g, &x) in gw.iter_mut().zip(row) {
                *g += err * x as f64;
            }
        }
        bias -= step * gb / n;
        for (w, g) in weights.iter_mut().zip(gw) {
            *w -= step * (g / n + l2 * *w);
        }
    }
    TrainedHead::Logistic { bias, weights }
}

/// Fit a head. With no columns every row gets the same prediction.
pub fn train_head(matrix: &FeatureMatrix, labels: &[u8], spec: &HeadSpec) -> Result<TrainedHead> {
    if matrix.n_rows() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: matrix.n_rows(),
            actual: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("cannot train on zero rows".into()));
    }
    let rows = matrix.rows();
    Ok(match spec.kind {
        HeadKind::GradientBoostedTrees => train_trees(&rows, labels, spec),
        HeadKind::Logistic => train_logistic(&rows, labels, spec),
    })
}

/// Mean of true-positive and true-negative rates.
pub fn balanced_accuracy(pred: &[u8], truth: &[u8]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    let (mut tp, mut tn, mut pos, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in pred.iter().zip(truth) {
        if y == 1 {
            pos += 1;
            tp += (p == 1) as usize;
        } else {
            neg += 1;
            tn += (p == 0) as usize;
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument(
            "balanced accuracy needs both classes in the truth vector".into(),
        ));
    }
    Ok((tp as f64 / pos as f64 + tn as f64 / neg as f64) / 2.0)
}

/// Train on one matrix and report balanced accuracy on another.
pub fn fit_and_score(
    train: &FeatureMatrix,
    y_train: &[u8],
    eval: &FeatureMatrix,
    y_eval: &[u8],
    spec: &HeadSpec,
) -> Result<f64> {
    let head = train_head(train, y_train, spec)?;
    balanced_accuracy(&head.predict(eval), y_eval)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(cols: Vec<Vec<u8>>) -> FeatureMatrix {
        let n = cols.first().map_or(0, Vec::len);
        let mut m = FeatureMatrix::empty((0..n).map(|i| format!("r{i}")).collect());
        for (k, c) in cols.into_iter().enumerate() {
            m.push_column(format!("f{k}"), c).unwrap();
        }
        m
    }

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(balanced_accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[1, 1, 1, 1], &[1, 1, 0, 0]).unwrap(), 0.5);
        assert_eq!(balanced_accuracy(&[1, 0, 0, 0], &[1, 1, 0, 0]).unwrap(), 0.75);
        assert!(balanced_accuracy(&[1, 1], &[1, 1]).is_err());
        assert!(balanced_accuracy(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn separating_column_gives_perfect_ba() {
        let y: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let m = matrix(vec![y.clone()]);
        for kind in [HeadKind::GradientBoostedTrees, HeadKind::Logistic] {
            let spec = HeadSpec { kind, ..HeadSpec::default() };
            assert_eq!(fit_and_score(&m, &y, &m, &y, &spec).unwrap(), 1.0);
        }
    }

    #[test]
    fn empty_basis_is_constant_predictor() {
        let y: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
        let m = FeatureMatrix::empty((0..20).map(|i| format!("r{i}")).collect());
        assert_eq!(fit_and_score(&m, &y, &m, &y, &HeadSpec::default()).unwrap(), 0.5);
        let skewed: Vec<u8> = (0..20).map(|i| (i < 15) as u8).collect();
        let head = train_head(&m, &skewed, &HeadSpec::default()).unwrap();
        assert!(head.predict(&m).iter().all(|&p| p == 1));
    }

    #[test]
    fn partial_cue_helps_under_class_imbalance() {
        // cue fires on half the positives; 70% of rows are positive
        let y: Vec<u8> = (0..100).map(|i| (i < 70) as u8).collect();
        let cue: Vec<u8> = (0..100).map(|i| (i < 35) as u8).collect();
        let m = matrix(vec![cue]);
        assert_eq!(fit_and_score(&m, &y, &m, &y, &HeadSpec::default()).unwrap(), 0.75);
        let unweighted = HeadSpec {
            balanced_classes: false,
            ..HeadSpec::default()
        };
        assert_eq!(fit_and_score(&m, &y, &m, &y, &unweighted).unwrap(), 0.5);
    }

    #[test]
    fn training_is_deterministic() {
        let a: Vec<u8> = (0..60).map(|i| (i % 3 == 0) as u8).collect();
        let b: Vec<u8> = (0..60).map(|i| (i % 5 < 2) as u8).collect();
        let y: Vec<u8> = a.iter().zip(&b).map(|(x, z)| x | z).collect();
        let m = matrix(vec![a, b]);
        let spec = HeadSpec { seed: 4, ..HeadSpec::default() };
        let h1 = train_head(&m, &y, &spec).unwrap();
        let h2 = train_head(&m, &y, &spec).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(h1.predict(&m), y);
    }

    #[test]
    fn duplicate_column_changes_nothing() {
        let a: Vec<u8> = (0..50).map(|i| (i % 3 == 0) as u8).collect();
        let noise: Vec<u8> = (0..50).map(|i| (i % 7 == 1) as u8).collect();
        let y: Vec<u8> = (0..50).map(|i| ((i % 3 == 0) || i % 11 == 0) as u8).collect();
        let base = matrix(vec![a.clone(), noise]);
        let dup = base.with_column("dup", a).unwrap();
        let spec = HeadSpec::default();
        let p1 = train_head(&base, &y, &spec).unwrap().predict(&base);
        let p2 = train_head(&dup, &y, &spec).unwrap().predict(&dup);
        assert_eq!(p1, p2);
    }

    #[test]
    fn alignment_violation() {
        let m = matrix(vec![vec![1, 0, 1]]);
        assert!(train_head(&m, &[1, 0], &HeadSpec::default()).is_err());
    }
}
