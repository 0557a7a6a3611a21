//! Latent-action tree: recursively splits evaluated samples into a better
//! and a worse region and selects a leaf region by UCB.

use thiserror::Error;

/// A sample as seen by the tree: normalized encoding features and objective.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeSample {
    pub x: Vec<f64>,
    pub y: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("split centroids coincide or one side is empty")]
    DegenerateSplit,
}

/// Nearest-centroid rule over encoding features; ties go left.
#[derive(Clone, Debug, PartialEq)]
pub struct NearestCentroid {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

impl NearestCentroid {
    pub fn routes_left(&self, x: &[f64]) -> bool {
        sq_dist(x, &self.left) <= sq_dist(x, &self.right)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchTreeNode {
    /// Indices into the sample array the tree was built over.
    pub samples: Vec<usize>,
    pub classifier: Option<NearestCentroid>,
    /// `[left, right]`; left is the higher-mean region.
    pub children: Vec<SearchTreeNode>,
    pub visit_count: usize,
    pub mean_objective: f64,
}

impl SearchTreeNode {
    pub fn leaf(samples: Vec<usize>, data: &[TreeSample]) -> Self {
        let mean = if samples.is_empty() {
            0.0
        } else {
            samples.iter().map(|&i| data[i].y).sum::<f64>() / samples.len() as f64
        };
        Self {
            visit_count: samples.len(),
            mean_objective: mean,
            samples,
            classifier: None,
            children: Vec::new(),
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.children.iter().map(|c| 1 + c.depth()).max().unwrap_or(0)
    }

    pub fn leaf_count(&self) -> usize {
        if self.is_leaf() {
            1
        } else {
            self.children.iter().map(SearchTreeNode::leaf_count).sum()
        }
    }

    /// Checks routing and visit-count invariants over the whole subtree.
    pub fn is_consistent(&self, data: &[TreeSample]) -> bool {
        if self.visit_count != self.samples.len() {
            return false;
        }
        match (&self.classifier, self.children.as_slice()) {
            (None, []) => true,
            (Some(c), [left, right]) => {
                let (l, r): (Vec<usize>, Vec<usize>) =
                    self.samples.iter().partition(|&&i| c.routes_left(&data[i].x));
                l == left.samples
                    && r == right.samples
                    && left.visit_count + right.visit_count == self.visit_count
                    && left.is_consistent(data)
                    && right.is_consistent(data)
            }
            _ => false,
        }
    }
}

/// Splits a leaf in two when it holds at least `min_samples` samples.
///
/// Samples are clustered by 2-means on `[x, lambda * y_normalized]`; the split
/// rule is the nearest centroid on `x` alone, so children hold exactly the
/// samples the rule routes to them. The higher-mean side becomes the left
/// child. Returns `Ok(None)` below the threshold.
pub fn split_node(
    node: &SearchTreeNode,
    data: &[TreeSample],
    min_samples: usize,
    lambda: f64,
) -> Result<Option<(NearestCentroid, SearchTreeNode, SearchTreeNode)>, TreeError> {
    if !node.is_leaf() || node.samples.len() < min_samples.max(2) {
        return Ok(None);
    }
    let (y_lo, y_hi) = node
        .samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| (lo.min(data[i].y), hi.max(data[i].y)));
    let span = if y_hi > y_lo { y_hi - y_lo } else { 1.0 };
    let features: Vec<Vec<f64>> = node
        .samples
        .iter()
        .map(|&i| {
            let mut f = data[i].x.clone();
            f.push(lambda * (data[i].y - y_lo) / span);
            f
        })
        .collect();

    let centroids = two_means(&features, &node.samples.iter().map(|&i| data[i].y).collect::<Vec<_>>());
    let dim = data[node.samples[0]].x.len();
    let a = centroids[0][..dim].to_vec();
    let b = centroids[1][..dim].to_vec();
    if sq_dist(&a, &b) <= 1e-24 {
        return Err(TreeError::DegenerateSplit);
    }

    let rule = NearestCentroid { left: a, right: b };
    let (side_a, side_b): (Vec<usize>, Vec<usize>) =
        node.samples.iter().partition(|&&i| rule.routes_left(&data[i].x));
    if side_a.is_empty() || side_b.is_empty() {
        return Err(TreeError::DegenerateSplit);
    }
    let node_a = SearchTreeNode::leaf(side_a, data);
    let node_b = SearchTreeNode::leaf(side_b, data);
    if node_b.mean_objective > node_a.mean_objective {
        // Swapping the centroids swaps the routing; ties at equal distance
        // would now go to the other side, so re-partition.
        let rule = NearestCentroid {
            left: rule.right,
            right: rule.left,
        };
        let (l, r): (Vec<usize>, Vec<usize>) = node.samples.iter().partition(|&&i| rule.routes_left(&data[i].x));
        if l.is_empty() || r.is_empty() {
            return Err(TreeError::DegenerateSplit);
        }
        let (left, right) = (SearchTreeNode::leaf(l, data), SearchTreeNode::leaf(r, data));
        return Ok(Some((rule, left, right)));
    }
    Ok(Some((rule, node_a, node_b)))
}

/// Lloyd's 2-means seeded with the best and worst sample.
fn two_means(features: &[Vec<f64>], y: &[f64]) -> [Vec<f64>; 2] {
    let best = (0..y.len()).fold(0, |b, i| if y[i] > y[b] { i } else { b });
    let worst = (0..y.len()).fold(0, |w, i| if y[i] < y[w] { i } else { w });
    let mut centroids = [features[best].clone(), features[worst].clone()];
    let mut assign = vec![usize::MAX; features.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, f) in features.iter().enumerate() {
            let c = usize::from(sq_dist(f, &centroids[1]) < sq_dist(f, &centroids[0]));
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = features.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(f, _)| f).collect();
            if members.is_empty() {
                continue;
            }
            for (d, v) in centroid.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    centroids
}

/// Builds the tree over `data` by splitting leaves until no leaf can split.
pub fn build_tree(data: &[TreeSample], min_samples: usize, lambda: f64, max_depth: usize) -> SearchTreeNode {
    let mut root = SearchTreeNode::leaf((0..data.len()).collect(), data);
    grow(&mut root, data, min_samples, lambda, max_depth);
    root
}

fn grow(node: &mut SearchTreeNode, data: &[TreeSample], min_samples: usize, lambda: f64, depth_left: usize) {
    if depth_left == 0 {
        return;
    }
    if let Ok(Some((rule, mut left, mut right))) = split_node(node, data, min_samples, lambda) {
        grow(&mut left, data, min_samples, lambda, depth_left - 1);
        grow(&mut right, data, min_samples, lambda, depth_left - 1);
        node.classifier = Some(rule);
        node.children = vec![left, right];
    }
}

/// One step of a root-to-leaf path: the rule and the side taken.
#[derive(Clone, Debug, PartialEq)]
pub struct PathStep {
    pub classifier: NearestCentroid,
    pub went_left: bool,
}

impl PathStep {
    pub fn admits(&self, x: &[f64]) -> bool {
        self.classifier.routes_left(x) == self.went_left
    }
}

pub fn ucb(child: &SearchTreeNode, parent_visits: usize, cp: f64) -> f64 {
    let n = child.visit_count.max(1) as f64;
    child.mean_objective + cp * (2.0 * (parent_visits.max(1) as f64).ln() / n).sqrt()
}

/// Descends from `root` by maximal UCB; ties prefer the higher mean, then the
/// left child. Returns the leaf and the constraints of its region.
pub fn mcts_select(root: &SearchTreeNode, cp: f64) -> (&SearchTreeNode, Vec<PathStep>) {
    let mut node = root;
    let mut path = Vec::new();
    while let (Some(rule), [left, right]) = (&node.classifier, node.children.as_slice()) {
        let ul = ucb(left, node.visit_count, cp);
        let ur = ucb(right, node.visit_count, cp);
        let go_left = match ul.partial_cmp(&ur) {
            Some(std::cmp::Ordering::Greater) => true,
            Some(std::cmp::Ordering::Less) => false,
            _ => left.mean_objective >= right.mean_objective,
        };
        path.push(PathStep {
            classifier: rule.clone(),
            went_left: go_left,
        });
        node = if go_left { left } else { right };
    }
    (node, path)
}
