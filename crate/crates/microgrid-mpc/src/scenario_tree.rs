//! Forecast scenario trees: stage structure, probabilities and
//! disturbance realizations for one MPC solve.
//!
//! Trees are immutable after construction. Node ids are assigned
//! breadth-first so that the nodes of a stage form a contiguous id range
//! and stage slicing is O(1).

use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

const PROB_TOL: f64 = 1e-9;

/// Disturbance realization at a node: available renewable power and load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    /// Available renewable infeed per renewable unit, pu, >= 0.
    pub w_r: Vec<f64>,
    /// Load per load, pu, <= 0 (loads consume power).
    pub w_d: Vec<f64>,
}

impl Disturbance {
    pub fn dim(&self) -> usize {
        self.w_r.len() + self.w_d.len()
    }

    /// Concatenated (w_r, w_d) vector.
    pub fn stacked(&self) -> Vec<f64> {
        let mut v = self.w_r.clone();
        v.extend_from_slice(&self.w_d);
        v
    }

    pub fn from_stacked(v: &[f64], n_r: usize) -> Self {
        Disturbance {
            w_r: v[..n_r].to_vec(),
            w_d: v[n_r..].to_vec(),
        }
    }
}

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("branching must have at least one entry and all entries >= 1")]
    BadBranching,
    #[error("no error paths supplied")]
    NoPaths,
    #[error("path {0} has length {1}, horizon requires {2}")]
    PathTooShort(usize, usize, usize),
    #[error("path weights sum to {0}, expected 1")]
    BadWeights(f64),
    #[error("path {0} error dimension {1} does not match nominal dimension {2}")]
    DimMismatch(usize, usize, usize),
    #[error("nominal forecast has {0} stages, horizon requires {1}")]
    NominalTooShort(usize, usize),
    #[error("invalid tree: {0}")]
    Invalid(String),
}

/// One sampled disturbance-error sequence with its weight.
#[derive(Debug, Clone)]
pub struct WeightedPath {
    pub weight: f64,
    /// errors[j] is the stacked error vector for stage j+1.
    pub errors: Vec<Vec<f64>>,
}

/// Scenario tree over a prediction horizon of `horizon` stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioTree {
    horizon: usize,
    stage_of: Vec<usize>,
    ancestor_of: Vec<Option<usize>>,
    children_of: Vec<Vec<usize>>,
    probability: Vec<f64>,
    disturbance: Vec<Option<Disturbance>>,
    /// First node id of each stage, plus the total count as sentinel.
    stage_offsets: Vec<usize>,
}

impl ScenarioTree {
    /// Build a tree from explicit node data (stage, ancestor, probability,
    /// disturbance). Children lists and stage offsets are derived. Node ids
    /// must already be breadth-first (stages non-decreasing).
    pub fn from_nodes(
        horizon: usize,
        nodes: Vec<(usize, Option<usize>, f64, Option<Disturbance>)>,
    ) -> Result<Self, TreeError> {
        let n = nodes.len();
        if n == 0 {
            return Err(TreeError::Invalid("empty tree".into()));
        }
        let mut stage_of = Vec::with_capacity(n);
        let mut ancestor_of = Vec::with_capacity(n);
        let mut probability = Vec::with_capacity(n);
        let mut disturbance = Vec::with_capacity(n);
        let mut children_of = vec![Vec::new(); n];
        for (id, (stage, anc, prob, dist)) in nodes.into_iter().enumerate() {
            if let Some(a) = anc {
                if a >= id {
                    return Err(TreeError::Invalid(format!(
                        "node {id}: ancestor {a} not smaller than node id"
                    )));
                }
                children_of[a].push(id);
            }
            stage_of.push(stage);
            ancestor_of.push(anc);
            probability.push(prob);
            disturbance.push(dist);
        }
        let mut stage_offsets = vec![0usize];
        for i in 1..n {
            if stage_of[i] < stage_of[i - 1] {
                return Err(TreeError::Invalid(format!(
                    "node {i}: stages not breadth-first ordered"
                )));
            }
            if stage_of[i] > stage_of[i - 1] {
                if stage_of[i] != stage_of[i - 1] + 1 {
                    return Err(TreeError::Invalid(format!("stage {} empty", stage_of[i - 1] + 1)));
                }
                stage_offsets.push(i);
            }
        }
        stage_offsets.push(n);
        if stage_offsets.len() != horizon + 2 {
            return Err(TreeError::Invalid(format!(
                "tree has {} stages, horizon is {}",
                stage_offsets.len() - 1,
                horizon
            )));
        }
        Ok(ScenarioTree {
            horizon,
            stage_of,
            ancestor_of,
            children_of,
            probability,
            disturbance,
            stage_offsets,
        })
    }

    /// Cluster weighted error paths into a tree with the requested per-stage
    /// branch counts around the nominal forecast.
    ///
    /// Within each parent node, paths are split by 1-D k-means on the sum of
    /// the stage error components, with centers initialized at evenly spaced
    /// quantiles (at most 50 iterations, ties to the lower cluster index).
    /// The node disturbance is the nominal forecast plus the
    /// probability-weighted mean error of the member paths; the node
    /// probability is the summed weight of its members.
    pub fn build_tree(
        error_paths: &[WeightedPath],
        branching: &[usize],
        nominal_forecast: &[Disturbance],
    ) -> Result<Self, TreeError> {
        if branching.is_empty() || branching.iter().any(|&b| b == 0) {
            return Err(TreeError::BadBranching);
        }
        if error_paths.is_empty() {
            return Err(TreeError::NoPaths);
        }
        let horizon = branching.len();
        if nominal_forecast.len() < horizon {
            return Err(TreeError::NominalTooShort(nominal_forecast.len(), horizon));
        }
        let n_r = nominal_forecast[0].w_r.len();
        let dim = nominal_forecast[0].dim();
        let mut wsum = 0.0;
        for (idx, p) in error_paths.iter().enumerate() {
            if p.errors.len() < horizon {
                return Err(TreeError::PathTooShort(idx, p.errors.len(), horizon));
            }
            for e in &p.errors[..horizon] {
                if e.len() != dim {
                    return Err(TreeError::DimMismatch(idx, e.len(), dim));
                }
            }
            wsum += p.weight;
        }
        if (wsum - 1.0).abs() > 1e-6 {
            return Err(TreeError::BadWeights(wsum));
        }

        // nodes[id] = (stage, ancestor, prob, dist); member path sets kept
        // per frontier node while stages are grown.
        let mut nodes: Vec<(usize, Option<usize>, f64, Option<Disturbance>)> =
            vec![(0, None, 1.0, None)];
        let mut frontier: Vec<(usize, Vec<usize>)> =
            vec![(0, (0..error_paths.len()).collect())];

        for j in 1..=horizon {
            let k_stage = branching[j - 1];
            let mut next_frontier = Vec::new();
            for (parent_id, members) in &frontier {
                let values: Vec<f64> = members
                    .iter()
                    .map(|&p| error_paths[p].errors[j - 1].iter().sum::<f64>())
                    .collect();
                let clusters = kmeans_1d(&values, k_stage);
                for cluster in clusters {
                    let ids: Vec<usize> = cluster.iter().map(|&c| members[c]).collect();
                    let prob: f64 = ids.iter().map(|&p| error_paths[p].weight).sum();
                    let mut rep = vec![0.0; dim];
                    for &p in &ids {
                        let w = error_paths[p].weight / prob;
                        for (r, e) in rep.iter_mut().zip(&error_paths[p].errors[j - 1]) {
                            *r += w * e;
                        }
                    }
                    let nominal = nominal_forecast[j - 1].stacked();
                    let stacked: Vec<f64> =
                        nominal.iter().zip(&rep).map(|(n, e)| n + e).collect();
                    let id = nodes.len();
                    nodes.push((
                        j,
                        Some(*parent_id),
                        prob,
                        Some(Disturbance::from_stacked(&stacked, n_r)),
                    ));
                    next_frontier.push((id, ids));
                }
            }
            frontier = next_frontier;
        }
        Self::from_nodes(horizon, nodes)
    }

    pub fn node_count(&self) -> usize {
        self.probability.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn stage_of(&self, node: usize) -> usize {
        self.stage_of[node]
    }

    pub fn ancestor_of(&self, node: usize) -> Option<usize> {
        self.ancestor_of[node]
    }

    pub fn children_of(&self, node: usize) -> &[usize] {
        &self.children_of[node]
    }

    pub fn probability(&self, node: usize) -> f64 {
        self.probability[node]
    }

    /// Disturbance at a non-root node. Panics on the root, whose
    /// disturbance is undefined.
    pub fn disturbance(&self, node: usize) -> &Disturbance {
        self.disturbance[node]
            .as_ref()
            .expect("disturbance read at root node")
    }

    /// Contiguous id range of the nodes at stage `j`.
    pub fn nodes_at_stage(&self, j: usize) -> Range<usize> {
        self.stage_offsets[j]..self.stage_offsets[j + 1]
    }

    pub fn stage_node_count(&self, j: usize) -> usize {
        self.nodes_at_stage(j).len()
    }

    /// Probability vector pi_j over the nodes of stage `j`.
    pub fn stage_probability_vector(&self, j: usize) -> Result<Vec<f64>, TreeError> {
        if j > self.horizon {
            return Err(TreeError::Invalid(format!(
                "stage {j} out of range [0, {}]",
                self.horizon
            )));
        }
        Ok(self.nodes_at_stage(j).map(|i| self.probability[i]).collect())
    }

    /// Clamp every node's available renewable infeed into `[r_min, r_max]`
    /// per unit and its load to nonpositive values.
    pub fn clamp_disturbances(&mut self, r_min: &[f64], r_max: &[f64]) {
        for d in self.disturbance.iter_mut().flatten() {
            for (l, (lo, hi)) in d.w_r.iter_mut().zip(r_min.iter().zip(r_max)) {
                *l = l.clamp(*lo, *hi);
            }
            for l in d.w_d.iter_mut() {
                *l = l.min(0.0);
            }
        }
    }

    /// Check every structural invariant; returns one message per violation.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        let n = self.node_count();
        if self.stage_of[0] != 0 {
            v.push(format!("node 0 has stage {}, expected 0", self.stage_of[0]));
        }
        if self.nodes_at_stage(0).len() != 1 {
            v.push(format!(
                "stage 0 has {} nodes, expected 1",
                self.nodes_at_stage(0).len()
            ));
        }
        for i in 0..n {
            let p = self.probability[i];
            if !(p > 0.0 && p <= 1.0 + PROB_TOL) {
                v.push(format!("node {i} probability {p} outside (0, 1]"));
            }
            match self.ancestor_of[i] {
                None => {
                    if i != 0 {
                        v.push(format!("node {i} has no ancestor but is not the root"));
                    }
                }
                Some(a) => {
                    if self.stage_of[i] != self.stage_of[a] + 1 {
                        v.push(format!(
                            "node {i} stage {} is not ancestor stage {} + 1",
                            self.stage_of[i], self.stage_of[a]
                        ));
                    }
                    if !self.children_of[a].contains(&i) {
                        v.push(format!("node {i} missing from children of {a}"));
                    }
                }
            }
            for &c in &self.children_of[i] {
                if self.ancestor_of[c] != Some(i) {
                    v.push(format!("child {c} of node {i} has inconsistent ancestor"));
                }
            }
            if self.stage_of[i] > 0 && self.disturbance[i].is_none() {
                v.push(format!("node {i} at stage {} has no disturbance", self.stage_of[i]));
            }
            if !self.children_of[i].is_empty() {
                let csum: f64 = self.children_of[i].iter().map(|&c| self.probability[c]).sum();
                if (csum - self.probability[i]).abs() > PROB_TOL {
                    v.push(format!(
                        "node {i} probability {} != children sum {csum}",
                        self.probability[i]
                    ));
                }
            } else if self.stage_of[i] != self.horizon {
                v.push(format!(
                    "node {i} is a leaf at stage {} != horizon {}",
                    self.stage_of[i], self.horizon
                ));
            }
        }
        for j in 0..=self.horizon {
            let sum: f64 = self.nodes_at_stage(j).map(|i| self.probability[i]).sum();
            if (sum - 1.0).abs() > PROB_TOL {
                v.push(format!("stage {j} probability sum {sum}"));
            }
        }
        v
    }

    /// Export as the documented JSON tree document.
    pub fn to_json(&self) -> String {
        let doc = TreeDocument::from(self);
        serde_json::to_string_pretty(&doc).expect("tree serialization")
    }

    pub fn from_json(text: &str) -> Result<Self, TreeError> {
        let doc: TreeDocument = serde_json::from_str(text)
            .map_err(|e| TreeError::Invalid(format!("json: {e}")))?;
        doc.into_tree()
    }
}

/// Wire format: `{nodes: [{id, stage, ancestor, prob, w_r, w_d}], horizon}`.
#[derive(Serialize, Deserialize)]
struct TreeDocument {
    nodes: Vec<TreeDocumentNode>,
    horizon: usize,
}

#[derive(Serialize, Deserialize)]
struct TreeDocumentNode {
    id: usize,
    stage: usize,
    ancestor: Option<usize>,
    prob: f64,
    w_r: Vec<f64>,
    w_d: Vec<f64>,
}

impl From<&ScenarioTree> for TreeDocument {
    fn from(tree: &ScenarioTree) -> Self {
        let nodes = (0..tree.node_count())
            .map(|i| {
                let (w_r, w_d) = match &tree.disturbance[i] {
                    Some(d) => (d.w_r.clone(), d.w_d.clone()),
                    None => (Vec::new(), Vec::new()),
                };
                TreeDocumentNode {
                    id: i,
                    stage: tree.stage_of[i],
                    ancestor: tree.ancestor_of[i],
                    prob: tree.probability[i],
                    w_r,
                    w_d,
                }
            })
            .collect();
        TreeDocument {
            nodes,
            horizon: tree.horizon,
        }
    }
}

impl TreeDocument {
    fn into_tree(self) -> Result<ScenarioTree, TreeError> {
        let mut nodes = self.nodes;
        nodes.sort_by_key(|n| n.id);
        let data = nodes
            .into_iter()
            .map(|n| {
                let dist = if n.ancestor.is_none() {
                    None
                } else {
                    Some(Disturbance { w_r: n.w_r, w_d: n.w_d })
                };
                (n.stage, n.ancestor, n.prob, dist)
            })
            .collect();
        ScenarioTree::from_nodes(self.horizon, data)
    }
}

/// 1-D k-means over `values`, centers initialized at evenly spaced
/// quantiles, at most 50 iterations. Returns the member index lists of the
/// nonempty clusters ordered by center value. The effective cluster count
/// is capped by the number of distinct values.
fn kmeans_1d(values: &[f64], k: usize) -> Vec<Vec<usize>> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup_by(|a, b| a == b);
    let k = k.min(sorted.len()).max(1);
    if k == 1 {
        return vec![(0..values.len()).collect()];
    }
    let mut centers: Vec<f64> = (0..k)
        .map(|i| {
            let q = (i as f64 + 0.5) / k as f64;
            sorted[((q * sorted.len() as f64) as usize).min(sorted.len() - 1)]
        })
        .collect();
    let mut assign = vec![0usize; values.len()];
    for _ in 0..50 {
        let mut changed = false;
        for (p, &x) in values.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, &ctr) in centers.iter().enumerate() {
                let d = (x - ctr).abs();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assign[p] != best {
                assign[p] = best;
                changed = true;
            }
        }
        for c in 0..k {
            let members: Vec<f64> = values
                .iter()
                .enumerate()
                .filter(|(p, _)| assign[*p] == c)
                .map(|(_, &x)| x)
                .collect();
            if !members.is_empty() {
                centers[c] = members.iter().sum::<f64>() / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (p, &c) in assign.iter().enumerate() {
        clusters[c].push(p);
    }
    clusters.retain(|c| !c.is_empty());
    clusters
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn dist(w_r: f64, w_d: f64) -> Disturbance {
        Disturbance { w_r: vec![w_r], w_d: vec![w_d] }
    }

    /// Tree of the paper's introductory figure: stages {0}, {1,2}, {3,4,5}
    /// with child(1) = {3,4} and child(2) = {5}.
    fn fig1_tree() -> ScenarioTree {
        ScenarioTree::from_nodes(
            2,
            vec![
                (0, None, 1.0, None),
                (1, Some(0), 0.6, Some(dist(1.0, -1.0))),
                (1, Some(0), 0.4, Some(dist(0.5, -1.2))),
                (2, Some(1), 0.3, Some(dist(1.1, -0.9))),
                (2, Some(1), 0.3, Some(dist(0.9, -1.1))),
                (2, Some(2), 0.4, Some(dist(0.4, -1.3))),
            ],
        )
        .unwrap()
    }

    #[test]
    fn fig1_tree_is_valid() {
        let tree = fig1_tree();
        assert!(tree.validate().is_empty());
        assert_eq!(tree.children_of(1), &[3, 4]);
        assert_eq!(tree.children_of(2), &[5]);
        assert_eq!(tree.ancestor_of(5), Some(2));
    }

    #[test]
    fn single_node_tree_is_valid() {
        let tree = ScenarioTree::from_nodes(0, vec![(0, None, 1.0, None)]).unwrap();
        assert!(tree.validate().is_empty());
        assert_eq!(tree.node_count(), 1);
    }

    #[test]
    fn broken_probability_sum_is_reported() {
        let tree = ScenarioTree::from_nodes(
            1,
            vec![
                (0, None, 1.0, None),
                (1, Some(0), 0.5, Some(dist(1.0, -1.0))),
                (1, Some(0), 0.4, Some(dist(0.5, -1.2))),
            ],
        )
        .unwrap();
        let violations = tree.validate();
        assert!(violations.iter().any(|v| v.contains("stage 1 probability sum 0.9")));
    }

    #[test]
    fn stage_probability_vectors() {
        let tree = fig1_tree();
        assert_eq!(tree.stage_probability_vector(0).unwrap(), vec![1.0]);
        let p2 = tree.stage_probability_vector(2).unwrap();
        assert_eq!(p2.len(), 3);
        assert!((p2.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(tree.stage_probability_vector(3).is_err());
    }

    #[test]
    fn uniform_binary_tree_stage_two() {
        let mut nodes = vec![(0, None, 1.0, None)];
        for _ in 0..2 {
            nodes.push((1, Some(0), 0.5, Some(dist(1.0, -1.0))));
        }
        for p in 1..=2usize {
            for _ in 0..2 {
                nodes.push((2, Some(p), 0.25, Some(dist(1.0, -1.0))));
            }
        }
        let tree = ScenarioTree::from_nodes(2, nodes).unwrap();
        assert!(tree.validate().is_empty());
        assert_eq!(
            tree.stage_probability_vector(2).unwrap(),
            vec![0.25, 0.25, 0.25, 0.25]
        );
    }

    fn sample_paths(rng: &mut ChaCha8Rng, count: usize, len: usize, dim: usize) -> Vec<WeightedPath> {
        (0..count)
            .map(|_| WeightedPath {
                weight: 1.0 / count as f64,
                errors: (0..len)
                    .map(|_| {
                        (0..dim)
                            .map(|_| {
                                let u1: f64 = rng.gen_range(1e-12..1.0);
                                let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                                (-2.0 * u1.ln()).sqrt() * u2.cos() * 0.2
                            })
                            .collect()
                    })
                    .collect(),
            })
            .collect()
    }

    fn nominal(len: usize) -> Vec<Disturbance> {
        (0..len).map(|_| dist(1.0, -1.0)).collect()
    }

    #[test]
    fn build_tree_stage_sizes_follow_branching() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let paths = sample_paths(&mut rng, 100, 4, 2);
        let tree = ScenarioTree::build_tree(&paths, &[2, 2, 1, 1], &nominal(4)).unwrap();
        let sizes: Vec<usize> = (0..=4).map(|j| tree.stage_node_count(j)).collect();
        assert_eq!(sizes, vec![1, 2, 4, 4, 4]);
        assert!(tree.validate().is_empty());
    }

    #[test]
    fn single_path_gives_chain_tree() {
        let paths = vec![WeightedPath {
            weight: 1.0,
            errors: vec![vec![0.1, -0.1]; 3],
        }];
        let tree = ScenarioTree::build_tree(&paths, &[1, 1, 1], &nominal(3)).unwrap();
        assert_eq!(tree.node_count(), 4);
        for i in 0..4 {
            assert!((tree.probability(i) - 1.0).abs() < 1e-12);
        }
        assert!(tree.validate().is_empty());
    }

    #[test]
    fn gaussian_paths_split_near_even() {
        // 1000 symmetric paths, branching [2, 2]: each stage-1 cluster
        // should take roughly half the mass.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let paths = sample_paths(&mut rng, 1000, 2, 2);
        let tree = ScenarioTree::build_tree(&paths, &[2, 2], &nominal(2)).unwrap();
        for p in tree.stage_probability_vector(1).unwrap() {
            assert!(p > 0.35 && p < 0.65, "stage-1 probability {p} outside 0.35..0.65");
        }
    }

    #[test]
    fn build_tree_rejects_infeasible_input() {
        let paths = vec![WeightedPath { weight: 1.0, errors: vec![vec![0.0, 0.0]] }];
        assert!(ScenarioTree::build_tree(&paths, &[2, 2], &nominal(2)).is_err());
        assert!(ScenarioTree::build_tree(&paths, &[0], &nominal(1)).is_err());
        let bad = vec![WeightedPath { weight: 0.7, errors: vec![vec![0.0, 0.0]] }];
        assert!(matches!(
            ScenarioTree::build_tree(&bad, &[1], &nominal(1)),
            Err(TreeError::BadWeights(_))
        ));
    }

    #[test]
    fn build_tree_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let paths = sample_paths(&mut rng, 50, 3, 2);
        let a = ScenarioTree::build_tree(&paths, &[2, 2, 1], &nominal(3)).unwrap();
        let b = ScenarioTree::build_tree(&paths, &[2, 2, 1], &nominal(3)).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn json_round_trip() {
        let tree = fig1_tree();
        let restored = ScenarioTree::from_json(&tree.to_json()).unwrap();
        assert!(restored.validate().is_empty());
        assert_eq!(restored.node_count(), tree.node_count());
        assert_eq!(restored.disturbance(3), tree.disturbance(3));
    }
}
