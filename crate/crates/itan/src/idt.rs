//! Incremental decision tree over the sample space.
//!
//! The tree starts as a single root covering all of space.  Every node keeps
//! (a) a running sufficient-statistics accumulator for the samples routed to
//! it and (b) a sequential 2-means sketch of those samples.  On a fixed
//! round schedule (`t = ⌈β^k⌉`) the node whose 2-means centroids are widest
//! apart — discounted by depth — is split along the perpendicular bisector
//! of its centroids, producing two children that partition the parent's
//! region.  Nodes are never removed and may split again later, so a badly
//! placed early hyperplane is repaired by a later, better-informed one.
//!
//! Regions only gate which nodes *train* on a sample; density evaluation of
//! the per-node Gaussians over the whole space is the caller's business (see
//! the mixture and pipeline modules).

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exp_family::{
    fit_moment_match, sufficient_stats, GaussianMember, SufficientStatsAccumulator,
};

/// Centroid separations at or below this are treated as coincident and do
/// not produce a split.
pub const COINCIDENT_TOL: f64 = 1e-12;

/// Which side of a hyperplane a region keeps.
///
/// `Left` is the closed nonnegative side (it contains the left 2-means
/// centroid and the boundary itself), `Right` the open negative side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

/// An oriented hyperplane `⟨x, normal⟩ = offset` with unit normal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyperplane {
    normal: DVector<f64>,
    offset: f64,
}

impl Hyperplane {
    pub fn new(normal: DVector<f64>, offset: f64) -> Self {
        Hyperplane { normal, offset }
    }

    pub fn normal(&self) -> &DVector<f64> {
        &self.normal
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// Signed evaluation `⟨x, normal⟩ - offset`.
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.normal.dot(x) - self.offset
    }

    /// Whether `x` lies on the given side; the boundary belongs to `Left`.
    pub fn contains(&self, x: &DVector<f64>, side: Side) -> bool {
        match side {
            Side::Left => self.value(x) >= 0.0,
            Side::Right => self.value(x) < 0.0,
        }
    }
}

/// Sequential 2-means sketch: running sums and counts for two clusters.
///
/// Counts start at 1 with zero sums, so both centroids begin at the origin;
/// each sample is absorbed by the nearer centroid (ties go left).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoMeansState {
    sum_left: DVector<f64>,
    sum_right: DVector<f64>,
    count_left: u64,
    count_right: u64,
}

impl TwoMeansState {
    pub fn new(dim: usize) -> Self {
        TwoMeansState {
            sum_left: DVector::zeros(dim),
            sum_right: DVector::zeros(dim),
            count_left: 1,
            count_right: 1,
        }
    }

    pub fn centroid_left(&self) -> DVector<f64> {
        &self.sum_left / self.count_left as f64
    }

    pub fn centroid_right(&self) -> DVector<f64> {
        &self.sum_right / self.count_right as f64
    }

    /// Distance between the two current centroids.
    pub fn centroid_distance(&self) -> f64 {
        (self.centroid_left() - self.centroid_right()).norm()
    }

    /// Assign `x` to the nearer centroid and fold it into that cluster.
    pub fn update(&mut self, x: &DVector<f64>) -> Side {
        let dl = (self.centroid_left() - x).norm_squared();
        let dr = (self.centroid_right() - x).norm_squared();
        if dl <= dr {
            self.sum_left += x;
            self.count_left += 1;
            Side::Left
        } else {
            self.sum_right += x;
            self.count_right += 1;
            Side::Right
        }
    }
}

/// Tree-level identifier: depth and a 1-based creation order within that depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeId {
    pub level: u32,
    pub order: u32,
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.level, self.order)
    }
}

/// One node of the incremental tree.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: NodeId,
    /// Conjunction of half-space constraints defining the node's region;
    /// the root has none.
    pub constraints: Vec<(Hyperplane, Side)>,
    pub stats: SufficientStatsAccumulator,
    pub two_means: TwoMeansState,
    /// Mixture weight α̃ of this node.
    pub weight: f64,
    pub children: Vec<NodeId>,
}

impl TreeNode {
    pub fn level(&self) -> u32 {
        self.id.level
    }

    /// Whether `x` satisfies every constraint of this node's region.
    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.constraints.iter().all(|(h, s)| h.contains(x, *s))
    }
}

/// Growth parameters of the tree.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeConfig {
    /// Split-schedule base β > 1; splits happen at rounds `⌈β^k⌉`.
    pub beta: f64,
    /// Fraction ξ ∈ (0, 1) of a split node's weight it keeps; the children
    /// share the remainder equally.
    pub xi: f64,
    /// Whether a node's sequential 2-means restarts after it splits.  When
    /// false (the default), the statistics keep running, so a node with a
    /// wide, stable centroid spread tends to be re-selected; when true,
    /// a freshly split node drops out of contention until its centroids
    /// re-separate, which lets deeper nodes win the selection and the tree
    /// refine hierarchically.
    #[serde(default)]
    pub reset_two_means_on_split: bool,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            beta: 2.0,
            xi: 0.8,
            reset_two_means_on_split: false,
        }
    }
}

impl TreeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta <= 1.0 || !self.beta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "beta must be finite and > 1, got {}",
                self.beta
            )));
        }
        if !(self.xi > 0.0 && self.xi < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "xi must lie in (0, 1), got {}",
                self.xi
            )));
        }
        Ok(())
    }
}

/// Whether `t` is on the split schedule, i.e. `t = ⌈β^k⌉` for some `k ≥ 1`.
pub fn is_split_round(beta: f64, t: u64) -> bool {
    if t < 2 {
        return false;
    }
    let k_max = (((t + 1) as f64).ln() / beta.ln()).ceil() as i32 + 2;
    for k in 1..=k_max.max(1) {
        let p = beta.powi(k);
        if !p.is_finite() {
            return false;
        }
        let c = p.ceil() as u64;
        if c == t {
            return true;
        }
        if c > t {
            return false;
        }
    }
    false
}

/// The incremental decision tree.
///
/// Nodes live in a flat vector in creation order; index 0 is the root.
/// Mixture weights are stored on the nodes and always sum to the root's
/// initial weight of 1, because a split conserves weight exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tree {
    config: TreeConfig,
    dim: usize,
    nodes: Vec<TreeNode>,
    /// Number of nodes created so far at each level, for id assignment.
    level_counts: Vec<u32>,
    #[serde(skip)]
    members: Vec<Option<GaussianMember>>,
}

impl Tree {
    pub fn new(dim: usize, config: TreeConfig) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(Error::InvalidParameter("dim must be positive".into()));
        }
        let root = TreeNode {
            id: NodeId { level: 0, order: 1 },
            constraints: Vec::new(),
            stats: SufficientStatsAccumulator::new(dim),
            two_means: TwoMeansState::new(dim),
            weight: 1.0,
            children: Vec::new(),
        };
        Ok(Tree {
            config,
            dim,
            nodes: vec![root],
            level_counts: vec![1],
            members: vec![None],
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &TreeConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, idx: usize) -> &TreeNode {
        &self.nodes[idx]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    fn check_sample(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{:?}", x.as_slice())));
        }
        Ok(())
    }

    /// Indices (in creation order) of every node whose region contains `x`.
    /// The root is always included.
    pub fn route(&self, x: &DVector<f64>) -> Result<Vec<usize>> {
        self.check_sample(x)?;
        Ok((0..self.nodes.len())
            .filter(|&i| self.nodes[i].contains(x))
            .collect())
    }

    /// Feed one sample: every containing node absorbs its statistics and
    /// updates its 2-means sketch.  The tree is untouched if `x` is invalid.
    pub fn observe(&mut self, x: &DVector<f64>) -> Result<()> {
        let stats = {
            self.check_sample(x)?;
            sufficient_stats(x)?
        };
        for i in 0..self.nodes.len() {
            if self.nodes[i].contains(x) {
                self.nodes[i]
                    .stats
                    .accumulate(&stats)
                    .expect("stats validated");
                self.nodes[i].two_means.update(x);
                self.members[i] = None;
            }
        }
        Ok(())
    }

    /// Depth-discounted split score `‖centroid_L - centroid_R‖ / 2^level`.
    pub fn split_score(&self, idx: usize) -> f64 {
        let node = &self.nodes[idx];
        node.two_means.centroid_distance() / (1u64 << node.level().min(62)) as f64
    }

    /// Index of the node with the highest split score; ties prefer the
    /// shallower node, then the earlier-created one.
    pub fn select_split_node(&self) -> usize {
        let mut best = 0;
        let mut best_score = self.split_score(0);
        for i in 1..self.nodes.len() {
            let s = self.split_score(i);
            let better = s > best_score
                || (s == best_score
                    && (self.nodes[i].id.level, self.nodes[i].id.order)
                        < (self.nodes[best].id.level, self.nodes[best].id.order));
            if better {
                best = i;
                best_score = s;
            }
        }
        best
    }

    /// Split `idx` along the perpendicular bisector of its 2-means
    /// centroids.  Returns the indices of the two new children, or `None`
    /// if the centroids coincide and no usable hyperplane exists.
    pub fn split(&mut self, idx: usize) -> Option<(usize, usize)> {
        let (plane, parent_id, parent_constraints, parent_weight) = {
            let node = &self.nodes[idx];
            let l = node.two_means.centroid_left();
            let r = node.two_means.centroid_right();
            let diff = &l - &r;
            let dist = diff.norm();
            if dist <= COINCIDENT_TOL {
                return None;
            }
            let normal = diff / dist;
            let offset = normal.dot(&((&l + &r) * 0.5));
            (
                Hyperplane::new(normal, offset),
                node.id,
                node.constraints.clone(),
                node.weight,
            )
        };

        let child_level = parent_id.level + 1;
        while self.level_counts.len() <= child_level as usize {
            self.level_counts.push(0);
        }
        let child_weight = (1.0 - self.config.xi) * parent_weight / 2.0;
        let mut child_indices = (0, 0);
        for (slot, side) in [Side::Left, Side::Right].into_iter().enumerate() {
            self.level_counts[child_level as usize] += 1;
            let id = NodeId {
                level: child_level,
                order: self.level_counts[child_level as usize],
            };
            let mut constraints = parent_constraints.clone();
            constraints.push((plane.clone(), side));
            self.nodes.push(TreeNode {
                id,
                constraints,
                stats: SufficientStatsAccumulator::new(self.dim),
                two_means: TwoMeansState::new(self.dim),
                weight: child_weight,
                children: Vec::new(),
            });
            self.members.push(None);
            let child_idx = self.nodes.len() - 1;
            if slot == 0 {
                child_indices.0 = child_idx;
            } else {
                child_indices.1 = child_idx;
            }
            self.nodes[idx].children.push(id);
        }
        self.nodes[idx].weight = self.config.xi * parent_weight;
        if self.config.reset_two_means_on_split {
            self.nodes[idx].two_means = TwoMeansState::new(self.dim);
        }
        Some(child_indices)
    }

    /// Run the growth step for round `t`: on schedule rounds, split the
    /// best-scoring node whose centroids are separated, trying next-best
    /// candidates if the leader's centroids coincide.  Returns the split
    /// parent and its new children when a split happened.
    pub fn maybe_grow(&mut self, t: u64) -> Option<(usize, (usize, usize))> {
        if !is_split_round(self.config.beta, t) {
            return None;
        }
        let mut order: Vec<usize> = (0..self.nodes.len()).collect();
        order.sort_by(|&a, &b| {
            self.split_score(b)
                .partial_cmp(&self.split_score(a))
                .unwrap()
                .then_with(|| {
                    (self.nodes[a].id.level, self.nodes[a].id.order)
                        .cmp(&(self.nodes[b].id.level, self.nodes[b].id.order))
                })
        });
        for idx in order {
            if self.nodes[idx].two_means.centroid_distance() > COINCIDENT_TOL {
                let children = self.split(idx).expect("separated centroids split");
                return Some((idx, children));
            }
        }
        None
    }

    /// Current mixture weights in node order.
    pub fn weights(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.weight).collect()
    }

    /// Replace the mixture weights (e.g. after an exponentiated-gradient
    /// step computed outside the tree).
    pub fn assign_weights(&mut self, weights: &[f64]) -> Result<()> {
        if weights.len() != self.nodes.len() {
            return Err(Error::DimensionMismatch {
                expected: self.nodes.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter(
                "weights must be finite and nonnegative".into(),
            ));
        }
        for (node, w) in self.nodes.iter_mut().zip(weights) {
            node.weight = *w;
        }
        Ok(())
    }

    /// Fitted Gaussian of node `idx`, cached until the node next observes.
    pub fn member(&mut self, idx: usize) -> &GaussianMember {
        if self.members[idx].is_none() {
            self.members[idx] = Some(fit_moment_match(&self.nodes[idx].stats));
        }
        self.members[idx].as_ref().unwrap()
    }

    /// Log-densities of every node's fitted Gaussian at `x`, in node order.
    pub fn log_densities(&mut self, x: &DVector<f64>) -> Result<Vec<f64>> {
        self.check_sample(x)?;
        (0..self.nodes.len())
            .map(|i| self.member(i).log_density(x))
            .collect()
    }

    /// Serialize the full tree state (structure, statistics, sketches,
    /// weights) as pretty JSON.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Rebuild a tree from [`Tree::to_json`] output; fitted members are
    /// reconstructed lazily, so a restored tree replays identically.
    pub fn from_json(s: &str) -> Result<Self> {
        let mut tree: Tree = serde_json::from_str(s)?;
        tree.config.validate()?;
        tree.members = vec![None; tree.nodes.len()];
        for node in &tree.nodes {
            if node.stats.sample_dim() != tree.dim {
                return Err(Error::DimensionMismatch {
                    expected: tree.dim,
                    got: node.stats.sample_dim(),
                });
            }
            if node.constraints.len() != node.level() as usize {
                return Err(Error::InvalidParameter(format!(
                    "node {} has {} constraints at level {}",
                    node.id,
                    node.constraints.len(),
                    node.level()
                )));
            }
            for id in &node.children {
                if !tree.nodes.iter().any(|n| n.id == *id) {
                    return Err(Error::InvalidParameter(format!(
                        "node {} references missing child {}",
                        node.id, id
                    )));
                }
            }
        }
        Ok(tree)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn vec2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    /// Pin a node's 2-means sketch to exact centroids.
    fn set_centroids(tree: &mut Tree, idx: usize, l: DVector<f64>, r: DVector<f64>) {
        tree.nodes[idx].two_means = TwoMeansState {
            sum_left: l,
            sum_right: r,
            count_left: 1,
            count_right: 1,
        };
    }

    #[test]
    fn config_validation() {
        assert!(Tree::new(2, TreeConfig { beta: 1.0, ..TreeConfig::default() }).is_err());
        assert!(Tree::new(2, TreeConfig { xi: 0.0, ..TreeConfig::default() }).is_err());
        assert!(Tree::new(2, TreeConfig { xi: 1.0, ..TreeConfig::default() }).is_err());
        assert!(Tree::new(0, TreeConfig::default()).is_err());
        assert!(Tree::new(2, TreeConfig::default()).is_ok());
    }

    #[test]
    fn split_schedule_for_integer_beta() {
        let on: Vec<u64> = (1..=20).filter(|&t| is_split_round(2.0, t)).collect();
        assert_eq!(on, vec![2, 4, 8, 16]);
    }

    #[test]
    fn split_schedule_uses_ceiling_for_fractional_beta() {
        // 1.5^k = 1.5, 2.25, 3.375, 5.06, 7.59, 11.39 → ceil 2, 3, 4, 6, 8, 12.
        let on: Vec<u64> = (1..=12).filter(|&t| is_split_round(1.5, t)).collect();
        assert_eq!(on, vec![2, 3, 4, 6, 8, 12]);
    }

    #[test]
    fn two_means_ties_go_left() {
        let mut tm = TwoMeansState::new(2);
        // Both centroids start at the origin, so the first sample ties.
        assert_eq!(tm.update(&vec2(1.0, 0.0)), Side::Left);
        assert_eq!(tm.count_left, 2);
        assert_eq!(tm.count_right, 1);
        assert_relative_eq!(tm.centroid_left()[0], 0.5);
    }

    #[test]
    fn two_means_separates_two_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tm = TwoMeansState::new(2);
        let mut pts = Vec::new();
        for i in 0..200 {
            let c = if i % 2 == 0 { vec2(-2.0, 0.0) } else { vec2(2.0, 0.0) };
            let x = c + vec2(
                0.3 * rng.sample::<f64, _>(StandardNormal),
                0.3 * rng.sample::<f64, _>(StandardNormal),
            );
            tm.update(&x);
            pts.push(x);
        }

        // Offline 2-means (Lloyd) on the same points as the oracle.
        let mut c0 = pts[0].clone();
        let mut c1 = pts[1].clone();
        for _ in 0..50 {
            let (mut s0, mut s1) = (vec2(0.0, 0.0), vec2(0.0, 0.0));
            let (mut n0, mut n1) = (0.0f64, 0.0f64);
            for p in &pts {
                if (p - &c0).norm_squared() <= (p - &c1).norm_squared() {
                    s0 += p;
                    n0 += 1.0;
                } else {
                    s1 += p;
                    n1 += 1.0;
                }
            }
            c0 = s0 / n0.max(1.0);
            c1 = s1 / n1.max(1.0);
        }
        let oracle = (c0 - c1).norm();
        assert!(tm.centroid_distance() >= 0.5 * oracle);
    }

    #[test]
    fn split_builds_perpendicular_bisector() {
        let mut tree = Tree::new(2, TreeConfig::default()).unwrap();
        set_centroids(&mut tree, 0, vec2(0.0, 0.0), vec2(2.0, 0.0));
        let (left, right) = tree.split(0).unwrap();

        let (plane, side) = &tree.node(left).constraints[0];
        assert_eq!(*side, Side::Left);
        assert_relative_eq!(plane.normal()[0], -1.0);
        assert_abs_diff_eq!(plane.normal()[1], 0.0);
        assert_relative_eq!(plane.offset(), -1.0);

        // Left region is x₁ ≤ 1, boundary included.
        assert!(tree.node(left).contains(&vec2(0.5, 7.0)));
        assert!(tree.node(left).contains(&vec2(1.0, -3.0)));
        assert!(!tree.node(left).contains(&vec2(1.5, 0.0)));
        assert!(tree.node(right).contains(&vec2(1.5, 0.0)));
        assert!(!tree.node(right).contains(&vec2(1.0, 0.0)));
    }

    #[test]
    fn split_redistributes_weight_and_conserves_total() {
        let mut tree = Tree::new(2, TreeConfig::default()).unwrap();
        set_centroids(&mut tree, 0, vec2(0.0, 0.0), vec2(2.0, 0.0));
        let (l, r) = tree.split(0).unwrap();
        assert_relative_eq!(tree.node(0).weight, 0.8, epsilon = 1e-15);
        assert_relative_eq!(tree.node(l).weight, 0.1, epsilon = 1e-15);
        assert_relative_eq!(tree.node(r).weight, 0.1, epsilon = 1e-15);
        let total: f64 = tree.weights().iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn reset_flag_clears_the_parents_two_means_after_a_split() {
        let persist = TreeConfig::default();
        let reset = TreeConfig {
            reset_two_means_on_split: true,
            ..TreeConfig::default()
        };
        for (config, expected_distance) in [(persist, 2.0), (reset, 0.0)] {
            let mut tree = Tree::new(2, config).unwrap();
            set_centroids(&mut tree, 0, vec2(0.0, 0.0), vec2(2.0, 0.0));
            tree.split(0).unwrap();
            assert_abs_diff_eq!(
                tree.node(0).two_means.centroid_distance(),
                expected_distance,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn split_assigns_level_order_ids() {
        let mut tree = Tree::new(2, TreeConfig::default()).unwrap();
        set_centroids(&mut tree, 0, vec2(0.0, 0.0), vec2(2.0, 0.0));
        let (a, b) = tree.split(0).unwrap();
        assert_eq!(tree.node(a).id, NodeId { level: 1, order: 1 });
        assert_eq!(tree.node(b).id, NodeId { level: 1, order: 2 });

        // The root may split again; the new pair continues the level-1 order.
        set_centroids(&mut tree, 0, vec2(0.0, -1.0), vec2(0.0, 1.0));
        let (c, d) = tree.split(0).unwrap();
        assert_eq!(tree.node(c).id, NodeId { level: 1, order: 3 });
        assert_eq!(tree.node(d).id, NodeId { level: 1, order: 4 });
        assert_eq!(tree.node(0).children.len(), 4);
        // Second split keeps ξ of what the root still had.
        assert_relative_eq!(tree.node(0).weight, 0.64, epsilon = 1e-15);
    }

    #[test]
    fn coincident_centroids_do_not_split() {
        let mut tree = Tree::new(2, TreeConfig::default()).unwrap();
        assert!(tree.split(0).is_none());
        assert_eq!(tree.len(), 1);
    }

    #[test]
    fn maybe_grow_falls_back_to_next_best_candidate() {
        let mut tree = Tree::new(2, TreeConfig::default()).unwrap();
        set_centroids(&mut tree, 0, vec2(0.0, 0.0), vec2(4.0, 0.0));
        tree.split(0).unwrap();
        // Root's sketch now coincides; child 1 has separated centroids.
        set_centroids(&mut tree, 0, vec2(1.0, 1.0), vec2(1.0, 1.0));
        set_centroids(&mut tree, 1, vec2(-1.0, 0.0), vec2(1.0, 0.0));
        let (parent, _) = tree.maybe_grow(4).unwrap();
        assert_eq!(parent, 1);
    }

    #[test]
    fn maybe_grow_skips_off_schedule_rounds() {
        let mut tree = Tree::new(2, TreeConfig::default()).unwrap();
        set_centroids(&mut tree, 0, vec2(0.0, 0.0), vec2(4.0, 0.0));
        assert!(tree.maybe_grow(3).is_none());
        assert_eq!(tree.len(), 1);
        assert!(tree.maybe_grow(4).is_some());
        assert_eq!(tree.len(), 3);
    }

    #[test]
    fn selection_discounts_depth_and_breaks_ties_shallow_first() {
        let mut tree = Tree::new(2, TreeConfig::default()).unwrap();
        set_centroids(&mut tree, 0, vec2(0.0, 0.0), vec2(4.0, 0.0));
        tree.split(0).unwrap();

        // Root distance 4.0 at level 0 → 4.0; child distance 3.0 at level 1
        // → 1.5, so the root wins.
        set_centroids(&mut tree, 0, vec2(0.0, 0.0), vec2(4.0, 0.0));
        set_centroids(&mut tree, 1, vec2(0.0, 0.0), vec2(0.0, 3.0));
        assert_eq!(tree.select_split_node(), 0);

        // Equal scores: 2.0 at level 0 vs 4.0 at level 1 → shallower wins.
        set_centroids(&mut tree, 0, vec2(0.0, 0.0), vec2(2.0, 0.0));
        set_centroids(&mut tree, 1, vec2(0.0, 0.0), vec2(4.0, 0.0));
        set_centroids(&mut tree, 2, vec2(0.0, 0.0), vec2(0.0, 0.0));
        assert_eq!(tree.select_split_node(), 0);

        // Equal scores at equal level → earlier order wins.
        set_centroids(&mut tree, 0, vec2(0.0, 0.0), vec2(0.0, 0.0));
        set_centroids(&mut tree, 1, vec2(0.0, 0.0), vec2(4.0, 0.0));
        set_centroids(&mut tree, 2, vec2(4.0, 0.0), vec2(0.0, 0.0));
        assert_eq!(tree.select_split_node(), 1);
    }

    #[test]
    fn route_includes_root_and_respects_boundaries() {
        let mut tree = Tree::new(2, TreeConfig::default()).unwrap();
        set_centroids(&mut tree, 0, vec2(0.0, 0.0), vec2(2.0, 0.0));
        let (l, r) = tree.split(0).unwrap();

        let hit = tree.route(&vec2(0.2, 5.0)).unwrap();
        assert_eq!(hit, vec![0, l]);
        let hit = tree.route(&vec2(1.0, 0.0)).unwrap();
        assert_eq!(hit, vec![0, l], "boundary point routes left");
        let hit = tree.route(&vec2(3.0, 0.0)).unwrap();
        assert_eq!(hit, vec![0, r]);
    }

    #[test]
    fn route_rejects_bad_samples() {
        let tree = Tree::new(2, TreeConfig::default()).unwrap();
        assert!(tree.route(&DVector::from_vec(vec![1.0])).is_err());
        assert!(tree.route(&vec2(f64::NAN, 0.0)).is_err());
    }

    #[test]
    fn observe_updates_exactly_the_containing_nodes() {
        let mut tree = Tree::new(2, TreeConfig::default()).unwrap();
        set_centroids(&mut tree, 0, vec2(0.0, 0.0), vec2(2.0, 0.0));
        let (l, r) = tree.split(0).unwrap();

        tree.observe(&vec2(0.5, 0.5)).unwrap();
        assert_eq!(tree.node(0).stats.count(), 1);
        assert_eq!(tree.node(l).stats.count(), 1);
        assert_eq!(tree.node(r).stats.count(), 0);

        tree.observe(&vec2(1.5, 0.5)).unwrap();
        assert_eq!(tree.node(0).stats.count(), 2);
        assert_eq!(tree.node(l).stats.count(), 1);
        assert_eq!(tree.node(r).stats.count(), 1);
    }

    #[test]
    fn observe_rejects_invalid_input_without_mutation() {
        let mut tree = Tree::new(2, TreeConfig::default()).unwrap();
        tree.observe(&vec2(1.0, 1.0)).unwrap();
        assert!(tree.observe(&vec2(f64::NAN, 0.0)).is_err());
        assert_eq!(tree.node(0).stats.count(), 1);
    }

    /// Grow a tree on a seeded stream and return it with the points fed.
    fn grown_tree(rounds: u64, seed: u64) -> (Tree, Vec<DVector<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tree = Tree::new(2, TreeConfig::default()).unwrap();
        let mut pts = Vec::new();
        for t in 1..=rounds {
            let c = match rng.random_range(0..3) {
                0 => vec2(-1.0, 1.0),
                1 => vec2(1.0, -1.0),
                _ => vec2(2.0, 2.0),
            };
            let x = c + vec2(
                0.4 * rng.sample::<f64, _>(StandardNormal),
                0.4 * rng.sample::<f64, _>(StandardNormal),
            );
            tree.observe(&x).unwrap();
            tree.maybe_grow(t);
            pts.push(x);
        }
        (tree, pts)
    }

    #[test]
    fn node_count_follows_split_schedule() {
        for (rounds, expected) in [(1, 1), (3, 3), (7, 5), (16, 9), (100, 13)] {
            let (tree, _) = grown_tree(rounds, 17);
            // 1 + 2·⌊log₂ t⌋ nodes once every schedule round splits.
            assert_eq!(tree.len(), expected, "after {rounds} rounds");
        }
    }

    #[test]
    fn levels_match_constraint_depth() {
        let (tree, _) = grown_tree(200, 5);
        for node in tree.nodes() {
            assert_eq!(node.constraints.len(), node.level() as usize);
        }
    }

    #[test]
    fn children_partition_parent_region() {
        let (tree, _) = grown_tree(200, 29);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..2000 {
            let x = vec2(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
            for idx in 0..tree.len() {
                let node = tree.node(idx);
                // Children arrive in pairs, one pair per split of this node.
                for pair in node.children.chunks(2) {
                    let inside: Vec<bool> = pair
                        .iter()
                        .map(|id| {
                            let c = tree
                                .nodes()
                                .iter()
                                .find(|n| n.id == *id)
                                .unwrap();
                            c.contains(&x)
                        })
                        .collect();
                    if node.contains(&x) {
                        assert_eq!(
                            inside.iter().filter(|b| **b).count(),
                            1,
                            "exactly one child of a split holds the point"
                        );
                    } else {
                        assert!(inside.iter().all(|b| !b));
                    }
                }
            }
        }
    }

    #[test]
    fn routed_sets_are_closed_under_ancestors() {
        let (tree, _) = grown_tree(300, 41);
        // Map child id → parent index.
        let mut parent_of = vec![None; tree.len()];
        for (i, node) in tree.nodes().iter().enumerate() {
            for id in &node.children {
                let j = tree.nodes().iter().position(|n| n.id == *id).unwrap();
                parent_of[j] = Some(i);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x = vec2(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
            let hit = tree.route(&x).unwrap();
            for &idx in &hit {
                if let Some(p) = parent_of[idx] {
                    assert!(hit.contains(&p), "parent of a routed node is routed");
                }
            }
            assert!(hit.contains(&0));
        }
    }

    #[test]
    fn weights_survive_growth_with_unit_total() {
        let (tree, _) = grown_tree(500, 61);
        let total: f64 = tree.weights().iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        assert!(tree.weights().iter().all(|w| *w > 0.0));
    }

    #[test]
    fn member_cache_matches_fresh_fit() {
        let (mut tree, pts) = grown_tree(64, 13);
        let x = vec2(0.3, 0.4);
        let cached = tree.member(0).log_density(&x).unwrap();
        let mut acc = SufficientStatsAccumulator::new(2);
        for p in &pts {
            acc.accumulate_sample(p).unwrap();
        }
        let fresh = fit_moment_match(&acc).log_density(&x).unwrap();
        assert_relative_eq!(cached, fresh, epsilon = 1e-12);
    }

    #[test]
    fn snapshot_roundtrip_preserves_behavior() {
        let (mut tree, _) = grown_tree(150, 83);
        let json = tree.to_json().unwrap();
        let mut restored = Tree::from_json(&json).unwrap();

        assert_eq!(restored.len(), tree.len());
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..50 {
            let x = vec2(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            assert_eq!(restored.route(&x).unwrap(), tree.route(&x).unwrap());
            let a = tree.log_densities(&x).unwrap();
            let b = restored.log_densities(&x).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert_eq!(u.to_bits(), v.to_bits(), "bit-identical replay");
            }
        }
        assert_eq!(restored.weights(), tree.weights());
    }

    #[test]
    fn snapshot_rejects_corrupted_structure() {
        let (tree, _) = grown_tree(20, 3);
        let json = tree.to_json().unwrap();
        let mut value: serde_json::Value = serde_json::from_str(&json).unwrap();
        // A level that disagrees with the constraint depth must be refused.
        value["nodes"][1]["id"]["level"] = serde_json::json!(3);
        let broken = serde_json::to_string(&value).unwrap();
        assert!(Tree::from_json(&broken).is_err());
    }
}
