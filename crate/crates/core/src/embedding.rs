//! Shared attribute vectors and the factored scoring head. An item never owns
//! a vector of its own: its representation is the tuple of per-axis value
//! vectors selected by its cell, and its score under a context vector is the
//! product of per-axis probabilities.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DirError, Result};
use crate::PROB_FLOOR;

/// Dense row-major table of `rows` vectors of width `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorTable {
    dim: usize,
    data: Vec<f64>,
}

impl VectorTable {
    pub fn zeros(rows: usize, dim: usize) -> VectorTable {
        VectorTable {
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn random<R: Rng>(rows: usize, dim: usize, bound: f64, rng: &mut R) -> VectorTable {
        let data = (0..rows * dim).map(|_| rng.gen_range(-bound..bound)).collect();
        VectorTable { dim, data }
    }

    pub fn from_data(dim: usize, data: Vec<f64>) -> Result<VectorTable> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(DirError::Invalid(format!(
                "table of {} values cannot have width {dim}",
                data.len()
            )));
        }
        Ok(VectorTable { dim, data })
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, r: u32) -> &[f64] {
        let start = r as usize * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn row_mut(&mut self, r: u32) -> &mut [f64] {
        let start = r as usize * self.dim;
        &mut self.data[start..start + self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Standard initialization half-width for a table of width `dim`.
pub fn init_bound(dim: usize) -> f64 {
    0.1 / (dim as f64).sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub(crate) fn axpy(dst: &mut [f64], coeff: f64, src: &[f64]) {
    for i in 0..dst.len() {
        dst[i] += coeff * src[i];
    }
}

/// Prefix structure of '/'-joined category paths. Node order is the sorted
/// order of distinct prefixes, which doubles as the stable node id space.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryTree {
    pub node_labels: Vec<String>,
    /// Per axis value, the node ids on its root-to-leaf path.
    pub paths: Vec<Vec<u32>>,
}

fn prefixes(path: &str) -> Vec<String> {
    let segs: Vec<&str> = path.split('/').collect();
    (1..=segs.len()).map(|k| segs[..k].join("/")).collect()
}

impl CategoryTree {
    pub fn build(values: &[String]) -> CategoryTree {
        let mut labels: BTreeSet<String> = BTreeSet::new();
        for v in values {
            for p in prefixes(v) {
                labels.insert(p);
            }
        }
        let node_labels: Vec<String> = labels.into_iter().collect();
        let index: HashMap<&str, u32> = node_labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i as u32))
            .collect();
        let paths = values
            .iter()
            .map(|v| prefixes(v).iter().map(|p| index[p.as_str()]).collect())
            .collect();
        CategoryTree { node_labels, paths }
    }

    pub fn node_count(&self) -> usize {
        self.node_labels.len()
    }
}

/// How category values are embedded: one free vector per leaf, or a sum of
/// node vectors down the leaf's path so related categories share mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CategoryMode {
    Hierarchical,
    Flat,
}

impl CategoryMode {
    pub fn parse(s: &str) -> Option<CategoryMode> {
        match s {
            "hierarchical" => Some(CategoryMode::Hierarchical),
            "flat" => Some(CategoryMode::Flat),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreNormalization {
    Softmax,
    Sigmoid,
}

impl ScoreNormalization {
    pub fn parse(s: &str) -> Option<ScoreNormalization> {
        match s {
            "softmax" => Some(ScoreNormalization::Softmax),
            "sigmoid" => Some(ScoreNormalization::Sigmoid),
            _ => None,
        }
    }
}

/// One axis's value vectors. Tree axes keep the free parameters in `nodes`
/// and cache the composed per-value vectors in `leaves`.
#[derive(Debug, Clone, PartialEq)]
pub enum AxisEmbedding {
    Flat(VectorTable),
    Tree {
        tree: CategoryTree,
        nodes: VectorTable,
        leaves: VectorTable,
    },
}

impl AxisEmbedding {
    pub fn value_count(&self) -> usize {
        match self {
            AxisEmbedding::Flat(t) => t.rows(),
            AxisEmbedding::Tree { leaves, .. } => leaves.rows(),
        }
    }

    pub fn value_vector(&self, v: u32) -> &[f64] {
        match self {
            AxisEmbedding::Flat(t) => t.row(v),
            AxisEmbedding::Tree { leaves, .. } => leaves.row(v),
        }
    }

    /// Free parameters only; the leaf cache is derived, not counted.
    pub fn parameter_count(&self) -> usize {
        match self {
            AxisEmbedding::Flat(t) => t.rows() * t.dim(),
            AxisEmbedding::Tree { nodes, .. } => nodes.rows() * nodes.dim(),
        }
    }

    pub(crate) fn refresh_cache(&mut self) {
        if let AxisEmbedding::Tree { tree, nodes, leaves } = self {
            for (v, path) in tree.paths.iter().enumerate() {
                let row = leaves.row_mut(v as u32);
                row.fill(0.0);
                for &n in path {
                    axpy(row, 1.0, nodes.row(n));
                }
            }
        }
    }
}

/// All trainable vectors of the factored head: per-axis value tables and,
/// for models with a static user context, the user table.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub(crate) dim: usize,
    pub(crate) axes: Vec<AxisEmbedding>,
    pub(crate) users: Option<VectorTable>,
    pub(crate) normalization: ScoreNormalization,
}

impl EmbeddingStore {
    /// Randomly initializes every table. Draw order is fixed (axes in order,
    /// then users) so a seed pins the whole store.
    pub fn init<R: Rng>(
        space: &crate::allocation::AttributeSpace,
        dim: usize,
        user_rows: Option<usize>,
        category_mode: CategoryMode,
        normalization: ScoreNormalization,
        rng: &mut R,
    ) -> EmbeddingStore {
        let bound = init_bound(dim);
        let mut axes = Vec::with_capacity(space.axis_count());
        for (i, ex) in space.explicit_axes().iter().enumerate() {
            let hier = ex.kind == crate::allocation::ExplicitAxisKind::Category
                && category_mode == CategoryMode::Hierarchical;
            if hier {
                let tree = CategoryTree::build(&ex.values);
                let nodes = VectorTable::random(tree.node_count(), dim, bound, rng);
                let leaves = VectorTable::zeros(ex.values.len(), dim);
                let mut axis = AxisEmbedding::Tree { tree, nodes, leaves };
                axis.refresh_cache();
                axes.push(axis);
            } else {
                axes.push(AxisEmbedding::Flat(VectorTable::random(
                    space.axis_size(i),
                    dim,
                    bound,
                    rng,
                )));
            }
        }
        for m in 0..space.implicit_count() {
            let size = space.axis_size(space.explicit_count() + m);
            axes.push(AxisEmbedding::Flat(VectorTable::random(size, dim, bound, rng)));
        }
        let users = user_rows.map(|rows| VectorTable::random(rows, dim, bound, rng));
        EmbeddingStore {
            dim,
            axes,
            users,
            normalization,
        }
    }

    pub(crate) fn from_parts(
        dim: usize,
        axes: Vec<AxisEmbedding>,
        users: Option<VectorTable>,
        normalization: ScoreNormalization,
    ) -> EmbeddingStore {
        EmbeddingStore {
            dim,
            axes,
            users,
            normalization,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn axes(&self) -> &[AxisEmbedding] {
        &self.axes
    }

    pub fn axis(&self, axis: usize) -> &AxisEmbedding {
        &self.axes[axis]
    }

    pub fn normalization(&self) -> ScoreNormalization {
        self.normalization
    }

    pub fn users(&self) -> Option<&VectorTable> {
        self.users.as_ref()
    }

    pub fn user_vector(&self, user: u32) -> Result<&[f64]> {
        self.users
            .as_ref()
            .map(|t| t.row(user))
            .ok_or_else(|| DirError::Invalid("store has no user table".into()))
    }

    pub fn parameter_count(&self) -> usize {
        let axes: usize = self.axes.iter().map(|a| a.parameter_count()).sum();
        axes + self.users.as_ref().map_or(0, |t| t.rows() * t.dim())
    }

    /// Concatenation of the per-axis value vectors selected by `coords`; this
    /// is the item's full representation (used as sequence input).
    pub fn item_representation(&self, coords: &[u32]) -> Vec<f64> {
        let mut rep = Vec::with_capacity(self.axes.len() * self.dim);
        for (axis, &v) in coords.iter().enumerate() {
            rep.extend_from_slice(self.axes[axis].value_vector(v));
        }
        rep
    }
}

/// Per-axis probabilities of every value under one context vector.
#[derive(Debug, Clone)]
pub struct AxisScore {
    pub probs: Vec<f64>,
    /// Log probabilities, floored at ln(1e-12).
    pub log_probs: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scores one axis: softmax over value logits, or independent sigmoids when
/// the normalization is the non-distributional variant.
pub fn axis_scores(store: &EmbeddingStore, axis: usize, ctx: &[f64]) -> AxisScore {
    let emb = &store.axes[axis];
    let n = emb.value_count();
    let mut logits = Vec::with_capacity(n);
    for v in 0..n as u32 {
        logits.push(dot(ctx, emb.value_vector(v)));
    }
    let floor_ln = PROB_FLOOR.ln();
    match store.normalization {
        ScoreNormalization::Softmax => {
            let zmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &z in &logits {
                sum += (z - zmax).exp();
            }
            let lse = zmax + sum.ln();
            let probs: Vec<f64> = logits.iter().map(|&z| (z - lse).exp()).collect();
            let log_probs = logits.iter().map(|&z| (z - lse).max(floor_ln)).collect();
            AxisScore { probs, log_probs }
        }
        ScoreNormalization::Sigmoid => {
            let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
            let log_probs = logits.iter().map(|&z| (-softplus(-z)).max(floor_ln)).collect();
            AxisScore { probs, log_probs }
        }
    }
}

pub fn scores_for_context(store: &EmbeddingStore, ctx: &[f64]) -> Vec<AxisScore> {
    (0..store.axes.len())
        .map(|axis| axis_scores(store, axis, ctx))
        .collect()
}

/// Item score under precomputed axis scores: the product over axes.
pub fn item_score(scores: &[AxisScore], coords: &[u32]) -> f64 {
    coords
        .iter()
        .enumerate()
        .map(|(axis, &v)| scores[axis].probs[v as usize])
        .product()
}

/// Sparse gradient accumulator keyed by table row. Deterministic iteration
/// order keeps update application reproducible.
#[derive(Debug, Default, Clone)]
pub struct GradientBuffer {
    pub users: BTreeMap<u32, Vec<f64>>,
    /// Keyed by (axis, value); flat axes only.
    pub axis_values: BTreeMap<(u32, u32), Vec<f64>>,
    /// Keyed by (axis, node); tree axes only.
    pub tree_nodes: BTreeMap<(u32, u32), Vec<f64>>,
}

impl GradientBuffer {
    pub fn clear(&mut self) {
        self.users.clear();
        self.axis_values.clear();
        self.tree_nodes.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty() && self.axis_values.is_empty() && self.tree_nodes.is_empty()
    }

    pub fn add_user(&mut self, user: u32, dim: usize) -> &mut Vec<f64> {
        self.users.entry(user).or_insert_with(|| vec![0.0; dim])
    }

    fn add_value(&mut self, axis: u32, value: u32, dim: usize) -> &mut Vec<f64> {
        self.axis_values
            .entry((axis, value))
            .or_insert_with(|| vec![0.0; dim])
    }

    fn add_node(&mut self, axis: u32, node: u32, dim: usize) -> &mut Vec<f64> {
        self.tree_nodes
            .entry((axis, node))
            .or_insert_with(|| vec![0.0; dim])
    }
}

/// Adds a full gradient vector for one axis value to its free parameters:
/// the row itself for flat axes, every node on the leaf's path for tree axes.
pub(crate) fn scatter_value_vec(
    emb: &AxisEmbedding,
    axis: usize,
    value: u32,
    vec: &[f64],
    grads: &mut GradientBuffer,
) {
    let dim = vec.len();
    match emb {
        AxisEmbedding::Flat(_) => {
            axpy(grads.add_value(axis as u32, value, dim), 1.0, vec);
        }
        AxisEmbedding::Tree { tree, .. } => {
            for &n in &tree.paths[value as usize] {
                axpy(grads.add_node(axis as u32, n, dim), 1.0, vec);
            }
        }
    }
}

/// Routes one value vector's gradient to its free parameters: the row itself
/// for flat axes, every node on the leaf's path for tree axes.
fn scatter_value_grad(
    emb: &AxisEmbedding,
    axis: usize,
    value: u32,
    coeff: f64,
    ctx: &[f64],
    grads: &mut GradientBuffer,
) {
    let dim = ctx.len();
    match emb {
        AxisEmbedding::Flat(_) => {
            axpy(grads.add_value(axis as u32, value, dim), coeff, ctx);
        }
        AxisEmbedding::Tree { tree, .. } => {
            for &n in &tree.paths[value as usize] {
                axpy(grads.add_node(axis as u32, n, dim), coeff, ctx);
            }
        }
    }
}

/// Negative log likelihood of one event's coordinates plus exact gradients.
/// Softmax couples every value of an axis (coefficient p_v - [v == target]);
/// sigmoid touches only the target value. `d_ctx` receives the gradient with
/// respect to the context so callers can keep propagating (user vector or
/// recurrent state). The reported loss term of an axis is floored at
/// -ln(1e-12); its gradients are not clamped.
pub fn event_loss_and_grads(
    store: &EmbeddingStore,
    coords: &[u32],
    ctx: &[f64],
    d_ctx: &mut [f64],
    grads: &mut GradientBuffer,
) -> f64 {
    let mut loss = 0.0;
    for (axis, &target) in coords.iter().enumerate() {
        let score = axis_scores(store, axis, ctx);
        // The floor makes the reported loss finite; gradients stay the exact
        // cross-entropy ones (they never divide by the probability, so a
        // saturated target keeps its full recovery signal instead of turning
        // into an absorbing zero-gradient region).
        loss -= score.log_probs[target as usize];
        let emb = &store.axes[axis];
        match store.normalization {
            ScoreNormalization::Softmax => {
                for v in 0..emb.value_count() as u32 {
                    let coeff = score.probs[v as usize] - if v == target { 1.0 } else { 0.0 };
                    scatter_value_grad(emb, axis, v, coeff, ctx, grads);
                    axpy(d_ctx, coeff, emb.value_vector(v));
                }
            }
            ScoreNormalization::Sigmoid => {
                let coeff = score.probs[target as usize] - 1.0;
                scatter_value_grad(emb, axis, target, coeff, ctx, grads);
                axpy(d_ctx, coeff, emb.value_vector(target));
            }
        }
    }
    loss
}

/// Forward-only event loss.
pub fn event_loss(store: &EmbeddingStore, coords: &[u32], ctx: &[f64]) -> f64 {
    coords
        .iter()
        .enumerate()
        .map(|(axis, &v)| -axis_scores(store, axis, ctx).log_probs[v as usize])
        .sum()
}

/// Applies one plain SGD step from a gradient buffer. Touched rows also get
/// `weight_decay` pulled toward zero. Rejects non-finite gradients or
/// parameters rather than poisoning the tables.
pub fn sgd_step(
    store: &mut EmbeddingStore,
    grads: &GradientBuffer,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    fn update(row: &mut [f64], g: &[f64], lr: f64, wd: f64, what: &str) -> Result<()> {
        for i in 0..row.len() {
            let step = g[i] + wd * row[i];
            if !step.is_finite() {
                return Err(DirError::NonFinite(what.to_string()));
            }
            row[i] -= lr * step;
            if !row[i].is_finite() {
                return Err(DirError::NonFinite(what.to_string()));
            }
        }
        Ok(())
    }

    for (&user, g) in &grads.users {
        let table = store
            .users
            .as_mut()
            .ok_or_else(|| DirError::Invalid("user gradient without user table".into()))?;
        update(table.row_mut(user), g, lr, weight_decay, "user vector")?;
    }
    for (&(axis, value), g) in &grads.axis_values {
        match &mut store.axes[axis as usize] {
            AxisEmbedding::Flat(t) => update(t.row_mut(value), g, lr, weight_decay, "axis vector")?,
            AxisEmbedding::Tree { .. } => {
                return Err(DirError::Invalid("flat gradient on tree axis".into()))
            }
        }
    }
    let mut touched_trees = BTreeSet::new();
    for (&(axis, node), g) in &grads.tree_nodes {
        match &mut store.axes[axis as usize] {
            AxisEmbedding::Tree { nodes, .. } => {
                update(nodes.row_mut(node), g, lr, weight_decay, "category node")?;
                touched_trees.insert(axis);
            }
            AxisEmbedding::Flat(_) => {
                return Err(DirError::Invalid("tree gradient on flat axis".into()))
            }
        }
    }
    for axis in touched_trees {
        store.axes[axis as usize].refresh_cache();
    }
    Ok(())
}

/// Step size at a given epoch: the initial rate halved once per period.
pub fn learning_rate(initial: f64, epoch: usize, halving_epochs: usize) -> f64 {
    initial * 0.5f64.powi((epoch / halving_epochs.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_store(norm: ScoreNormalization) -> EmbeddingStore {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 4;
        let flat = AxisEmbedding::Flat(VectorTable::random(3, d, 0.3, &mut rng));
        let values: Vec<String> = vec!["a".into(), "a/b".into(), "c".into()];
        let tree = CategoryTree::build(&values);
        let nodes = VectorTable::random(tree.node_count(), d, 0.3, &mut rng);
        let mut tree_axis = AxisEmbedding::Tree {
            tree,
            nodes,
            leaves: VectorTable::zeros(values.len(), d),
        };
        tree_axis.refresh_cache();
        let users = VectorTable::random(2, d, 0.3, &mut rng);
        EmbeddingStore::from_parts(d, vec![tree_axis, flat], Some(users), norm)
    }

    fn batch_loss(store: &EmbeddingStore, events: &[(u32, Vec<u32>)]) -> f64 {
        events
            .iter()
            .map(|(u, coords)| event_loss(store, coords, store.user_vector(*u).unwrap()))
            .sum()
    }

    fn batch_grads(store: &EmbeddingStore, events: &[(u32, Vec<u32>)]) -> (f64, GradientBuffer) {
        let mut grads = GradientBuffer::default();
        let mut loss = 0.0;
        for (u, coords) in events {
            let ctx = store.user_vector(*u).unwrap().to_vec();
            let mut d_ctx = vec![0.0; ctx.len()];
            loss += event_loss_and_grads(store, coords, &ctx, &mut d_ctx, &mut grads);
            axpy(grads.add_user(*u, ctx.len()), 1.0, &d_ctx);
        }
        (loss, grads)
    }

    enum Slot {
        User(u32, usize),
        Flat(usize, u32, usize),
        Node(usize, u32, usize),
    }

    fn nudge(store: &mut EmbeddingStore, slot: &Slot, delta: f64) {
        match *slot {
            Slot::User(u, i) => store.users.as_mut().unwrap().row_mut(u)[i] += delta,
            Slot::Flat(axis, v, i) => match &mut store.axes[axis] {
                AxisEmbedding::Flat(t) => t.row_mut(v)[i] += delta,
                _ => panic!("axis {axis} is not flat"),
            },
            Slot::Node(axis, n, i) => match &mut store.axes[axis] {
                AxisEmbedding::Tree { nodes, .. } => {
                    nodes.row_mut(n)[i] += delta;
                }
                _ => panic!("axis {axis} is not a tree"),
            },
        }
        if let Slot::Node(axis, _, _) = slot {
            store.axes[*axis].refresh_cache();
        }
    }

    fn fd_grad(store: &EmbeddingStore, events: &[(u32, Vec<u32>)], slot: &Slot) -> f64 {
        let h = 1e-5;
        let mut plus = store.clone();
        nudge(&mut plus, slot, h);
        let mut minus = store.clone();
        nudge(&mut minus, slot, -h);
        (batch_loss(&plus, events) - batch_loss(&minus, events)) / (2.0 * h)
    }

    fn assert_close(analytic: f64, numeric: f64) {
        let scale = analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(
            (analytic - numeric).abs() / scale < 1e-4,
            "analytic {analytic} vs numeric {numeric}"
        );
    }

    fn check_all_grads(norm: ScoreNormalization) {
        let store = tiny_store(norm);
        let events = vec![(0u32, vec![1u32, 2u32]), (1, vec![0, 0]), (0, vec![2, 1])];
        let (_, grads) = batch_grads(&store, &events);
        assert!(!grads.users.is_empty());
        for (&u, g) in &grads.users {
            for i in 0..store.dim() {
                assert_close(g[i], fd_grad(&store, &events, &Slot::User(u, i)));
            }
        }
        for (&(axis, v), g) in &grads.axis_values {
            for i in 0..store.dim() {
                assert_close(g[i], fd_grad(&store, &events, &Slot::Flat(axis as usize, v, i)));
            }
        }
        for (&(axis, n), g) in &grads.tree_nodes {
            for i in 0..store.dim() {
                assert_close(g[i], fd_grad(&store, &events, &Slot::Node(axis as usize, n, i)));
            }
        }
        // untouched slots must have zero derivative too
        match norm {
            ScoreNormalization::Softmax => assert!(!grads.tree_nodes.is_empty()),
            ScoreNormalization::Sigmoid => {}
        }
    }

    #[test]
    fn gradients_match_finite_differences_softmax() {
        check_all_grads(ScoreNormalization::Softmax);
    }

    #[test]
    fn gradients_match_finite_differences_sigmoid() {
        check_all_grads(ScoreNormalization::Sigmoid);
    }

    fn one_axis_store(vectors: Vec<Vec<f64>>, norm: ScoreNormalization) -> EmbeddingStore {
        let dim = vectors[0].len();
        let data: Vec<f64> = vectors.into_iter().flatten().collect();
        let table = VectorTable::from_data(dim, data).unwrap();
        EmbeddingStore::from_parts(dim, vec![AxisEmbedding::Flat(table)], None, norm)
    }

    #[test]
    fn softmax_probabilities_from_known_logits() {
        // logit gap ln 3 puts 3/4 of the mass on the first value
        let store = one_axis_store(
            vec![vec![3.0f64.ln()], vec![0.0]],
            ScoreNormalization::Softmax,
        );
        let score = axis_scores(&store, 0, &[1.0]);
        assert!((score.probs[0] - 0.75).abs() < 1e-12);
        assert!((score.probs[1] - 0.25).abs() < 1e-12);
        assert!((score.log_probs[0] - 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn equal_logits_are_uniform_and_item_scores_multiply() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 3;
        let v = VectorTable::random(1, d, 0.5, &mut rng).row(0).to_vec();
        let two_equal = VectorTable::from_data(d, [v.clone(), v].concat()).unwrap();
        let store = EmbeddingStore::from_parts(
            d,
            vec![
                AxisEmbedding::Flat(two_equal.clone()),
                AxisEmbedding::Flat(two_equal),
            ],
            None,
            ScoreNormalization::Softmax,
        );
        let ctx = vec![0.4, -0.2, 0.9];
        let scores = scores_for_context(&store, &ctx);
        assert!((scores[0].probs[0] - 0.5).abs() < 1e-12);
        assert!((item_score(&scores, &[0, 1]) - 0.25).abs() < 1e-12);
        assert!((event_loss(&store, &[0, 1], &ctx) - 2.0 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_axis_sums_to_one() {
        let store = tiny_store(ScoreNormalization::Softmax);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let ctx: Vec<f64> = (0..store.dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
            for score in scores_for_context(&store, &ctx) {
                let sum: f64 = score.probs.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
            }
        }
    }

    #[test]
    fn sigmoid_axis_does_not_sum_to_one() {
        let store = one_axis_store(vec![vec![1.0], vec![1.0]], ScoreNormalization::Sigmoid);
        let score = axis_scores(&store, 0, &[1.0]);
        let sum: f64 = score.probs.iter().sum();
        assert!((sum - 1.0).abs() > 1e-3);
        assert!((score.probs[0] - sigmoid(1.0)).abs() < 1e-12);
    }

    #[test]
    fn floored_target_keeps_a_recovery_gradient() {
        // the loss value is clamped for finiteness, but the gradient must
        // still pull a fully saturated wrong prediction back out
        let store = one_axis_store(vec![vec![100.0], vec![0.0]], ScoreNormalization::Softmax);
        let ctx = vec![1.0];
        let score = axis_scores(&store, 0, &ctx);
        assert_eq!(score.log_probs[1], PROB_FLOOR.ln());
        let mut grads = GradientBuffer::default();
        let mut d_ctx = vec![0.0];
        let loss = event_loss_and_grads(&store, &[1], &ctx, &mut d_ctx, &mut grads);
        assert!((loss + PROB_FLOOR.ln()).abs() < 1e-12);
        // target value 1 has p close to 0: its vector is pushed toward ctx
        let g1 = grads.axis_values[&(0, 1)].clone();
        assert!((g1[0] + 1.0).abs() < 1e-9, "target coeff is p - 1: {g1:?}");
        let g0 = grads.axis_values[&(0, 0)].clone();
        assert!((g0[0] - 1.0).abs() < 1e-9, "winner coeff is p: {g0:?}");
    }

    #[test]
    fn scoring_is_invariant_under_rotation() {
        // probabilities only see dot products, so any orthogonal map of all
        // vectors and the context leaves them unchanged
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for b in &basis {
                let c = dot(&v, b);
                axpy(&mut v, -c, b);
            }
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= norm);
                basis.push(v);
            }
        }
        let rotate = |x: &[f64]| -> Vec<f64> { basis.iter().map(|b| dot(b, x)).collect() };

        let store = tiny_store(ScoreNormalization::Softmax);
        let mut rotated = store.clone();
        for axis in &mut rotated.axes {
            match axis {
                AxisEmbedding::Flat(t) => {
                    for r in 0..t.rows() as u32 {
                        let new = rotate(t.row(r));
                        t.row_mut(r).copy_from_slice(&new);
                    }
                }
                AxisEmbedding::Tree { nodes, .. } => {
                    for r in 0..nodes.rows() as u32 {
                        let new = rotate(nodes.row(r));
                        nodes.row_mut(r).copy_from_slice(&new);
                    }
                }
            }
            axis.refresh_cache();
        }
        let ctx = vec![0.3, -0.8, 0.1, 0.5];
        let before = scores_for_context(&store, &ctx);
        let after = scores_for_context(&rotated, &rotate(&ctx));
        for (b, a) in before.iter().zip(after.iter()) {
            for (pb, pa) in b.probs.iter().zip(a.probs.iter()) {
                assert!((pb - pa).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tree_leaf_is_the_sum_of_its_path_nodes() {
        let values: Vec<String> = vec!["a/b".into(), "a/c".into()];
        let tree = CategoryTree::build(&values);
        assert_eq!(tree.node_labels, vec!["a", "a/b", "a/c"]);
        let mut nodes = VectorTable::zeros(3, 2);
        nodes.row_mut(0).copy_from_slice(&[1.0, 0.0]); // "a"
        nodes.row_mut(1).copy_from_slice(&[0.0, 2.0]); // "a/b"
        nodes.row_mut(2).copy_from_slice(&[0.0, 5.0]); // "a/c"
        let mut axis = AxisEmbedding::Tree {
            tree,
            nodes,
            leaves: VectorTable::zeros(2, 2),
        };
        axis.refresh_cache();
        assert_eq!(axis.value_vector(0), &[1.0, 2.0]);
        assert_eq!(axis.value_vector(1), &[1.0, 5.0]);
        // the root is shared: shifting it moves both leaves together
        if let AxisEmbedding::Tree { nodes, .. } = &mut axis {
            nodes.row_mut(0)[0] = 3.0;
        }
        axis.refresh_cache();
        assert_eq!(axis.value_vector(0)[0], 3.0);
        assert_eq!(axis.value_vector(1)[0], 3.0);
    }

    #[test]
    fn tree_parameter_count_counts_nodes_not_leaves() {
        let values: Vec<String> = vec!["a/b".into(), "a/c".into()];
        let tree = CategoryTree::build(&values);
        let nodes = VectorTable::zeros(tree.node_count(), 4);
        let axis = AxisEmbedding::Tree {
            tree,
            nodes,
            leaves: VectorTable::zeros(2, 4),
        };
        assert_eq!(axis.parameter_count(), 3 * 4);
        let flat = AxisEmbedding::Flat(VectorTable::zeros(2, 4));
        assert_eq!(flat.parameter_count(), 2 * 4);
    }

    #[test]
    fn sgd_reduces_batch_loss() {
        let mut store = tiny_store(ScoreNormalization::Softmax);
        let events = vec![(0u32, vec![1u32, 2u32]), (1, vec![0, 0])];
        let start = batch_loss(&store, &events);
        for _ in 0..50 {
            let (_, grads) = batch_grads(&store, &events);
            sgd_step(&mut store, &grads, 0.5, 0.0).unwrap();
        }
        let end = batch_loss(&store, &events);
        assert!(end < start - 0.1, "loss {start} -> {end}");
    }

    #[test]
    fn weight_decay_shrinks_untrained_directions() {
        let mut store = one_axis_store(vec![vec![2.0, 2.0]], ScoreNormalization::Softmax);
        let mut grads = GradientBuffer::default();
        grads.add_value(0, 0, 2)[0] = 0.0;
        sgd_step(&mut store, &grads, 0.1, 0.5).unwrap();
        if let AxisEmbedding::Flat(t) = &store.axes[0] {
            assert!((t.row(0)[0] - 1.9).abs() < 1e-12);
            assert!((t.row(0)[1] - 1.9).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut store = tiny_store(ScoreNormalization::Softmax);
        let mut grads = GradientBuffer::default();
        grads.add_user(0, 4)[2] = f64::NAN;
        let err = sgd_step(&mut store, &grads, 0.1, 0.0).unwrap_err();
        assert!(matches!(err, DirError::NonFinite(_)));
    }

    #[test]
    fn learning_rate_halves_every_period() {
        assert_eq!(learning_rate(1.0, 0, 10), 1.0);
        assert_eq!(learning_rate(1.0, 9, 10), 1.0);
        assert_eq!(learning_rate(1.0, 10, 10), 0.5);
        assert_eq!(learning_rate(1.0, 19, 10), 0.5);
        assert_eq!(learning_rate(1.0, 20, 10), 0.25);
        assert_eq!(learning_rate(2.0, 35, 10), 2.0 * 0.125);
    }

    #[test]
    fn init_is_seed_deterministic() {
        use crate::allocation::{AttributeSpace, ExplicitAxisKind};
        use crate::catalog::{Catalog, CatalogItem, IngestOptions, RawInteraction};
        let items = vec![
            CatalogItem {
                id: "q0".into(),
                category_path: vec!["a".into(), "b".into()],
                price: Some(2.0),
            },
            CatalogItem {
                id: "q1".into(),
                category_path: vec!["a".into(), "c".into()],
                price: Some(9.0),
            },
        ];
        let raw: Vec<RawInteraction> = (0..5)
            .map(|t| RawInteraction {
                user: "u".into(),
                item: if t % 2 == 0 { "q0" } else { "q1" }.into(),
                timestamp: t,
            })
            .collect();
        let c = Catalog::from_parts(items, raw, &IngestOptions::default()).unwrap();
        let space = AttributeSpace::build(&c, &[ExplicitAxisKind::Category], 1, 1.0).unwrap();
        let build = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            EmbeddingStore::init(
                &space,
                8,
                Some(c.user_count()),
                CategoryMode::Hierarchical,
                ScoreNormalization::Softmax,
                &mut rng,
            )
        };
        assert_eq!(build(3), build(3));
        assert_ne!(build(3), build(4));
        assert!(matches!(build(3).axes[0], AxisEmbedding::Tree { .. }));
    }
}
