//! Depth-limited CART classifier (Gini impurity, axis-aligned splits).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf {
        prob: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub max_depth: usize,
    pub min_samples_split: usize,
    root: Node,
}

impl DecisionTree {
    /// An unfitted tree that answers 0.5 everywhere.
    pub fn unfitted(max_depth: usize) -> Self {
        DecisionTree { max_depth, min_samples_split: 2, root: Node::Leaf { prob: 0.5 } }
    }

    pub fn fit(&mut self, xs: &[&[f64]], ys: &[Label]) -> Result<()> {
        if xs.len() != ys.len() {
            return Err(Error::Shape { expected: xs.len(), got: ys.len() });
        }
        if xs.is_empty() {
            self.root = Node::Leaf { prob: 0.5 };
            return Ok(());
        }
        let idx: Vec<usize> = (0..xs.len()).collect();
        self.root = self.grow(xs, ys, idx, 0);
        Ok(())
    }

    pub fn predict_prob(&self, x: &[f64]) -> f64 {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { prob } => return *prob,
                Node::Split { feature, threshold, left, right } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(n: &Node) -> usize {
            match n {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(left).max(walk(right)),
            }
        }
        walk(&self.root)
    }

    fn grow(&self, xs: &[&[f64]], ys: &[Label], idx: Vec<usize>, depth: usize) -> Node {
        let n = idx.len();
        let pos = idx.iter().filter(|&&i| ys[i] == 1).count();
        let prob = pos as f64 / n as f64;
        if depth >= self.max_depth || n < self.min_samples_split || pos == 0 || pos == n {
            return Node::Leaf { prob };
        }
        let Some((feature, threshold)) = best_split(xs, ys, &idx) else {
            return Node::Leaf { prob };
        };
        let (left, right): (Vec<usize>, Vec<usize>) =
            idx.into_iter().partition(|&i| xs[i][feature] <= threshold);
        Node::Split {
            feature,
            threshold,
            left: Box::new(self.grow(xs, ys, left, depth + 1)),
            right: Box::new(self.grow(xs, ys, right, depth + 1)),
        }
    }
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

/// Split minimizing weighted Gini impurity; `None` when no split improves on
/// the parent.
fn best_split(xs: &[&[f64]], ys: &[Label], idx: &[usize]) -> Option<(usize, f64)> {
    let n = idx.len();
    let total_pos = idx.iter().filter(|&&i| ys[i] == 1).count();
    let parent = gini(total_pos, n);
    let mut best: Option<(f64, usize, f64)> = None;
    let dim = xs[idx[0]].len();
    let mut order = idx.to_vec();
    for f in 0..dim {
        order.sort_by(|&a, &b| xs[a][f].total_cmp(&xs[b][f]));
        let mut left_pos = 0;
        for k in 0..n - 1 {
            if ys[order[k]] == 1 {
                left_pos += 1;
            }
            let (a, b) = (xs[order[k]][f], xs[order[k + 1]][f]);
            if a == b {
                continue;
            }
            let left_n = k + 1;
            let right_n = n - left_n;
            let impurity = (left_n as f64 * gini(left_pos, left_n)
                + right_n as f64 * gini(total_pos - left_pos, right_n))
                / n as f64;
            if best.is_none_or(|(bi, _, _)| impurity < bi) {
                best = Some((impurity, f, 0.5 * (a + b)));
            }
        }
    }
    best.filter(|(impurity, _, _)| *impurity < parent - 1e-12).map(|(_, f, t)| (f, t))
}
