//! Model heads over the shared attribute tables. Two factored heads score
//! items through per-axis probabilities (static user vector, or an LSTM state
//! over the purchase sequence); three pairwise-trained baselines keep an
//! entangled per-item vector for comparison.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::{Allocation, AttributeSpace};
use crate::catalog::Catalog;
use crate::embedding::{
    axis_scores, axpy, dot, event_loss, event_loss_and_grads, init_bound, item_score,
    scatter_value_vec, scores_for_context, sgd_step, AxisScore, CategoryMode, EmbeddingStore,
    GradientBuffer, ScoreNormalization, VectorTable,
};
use crate::error::{DirError, Result};
use crate::evaluation::EvalPhase;
use crate::lstm::{CellGrads, CellKind, RnnCell};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    DirMf,
    DirRnn,
    BprMf,
    AugmentedMf,
    AugmentedRnn,
}

impl ModelKind {
    pub fn parse(s: &str) -> Option<ModelKind> {
        match s {
            "dir-mf" => Some(ModelKind::DirMf),
            "dir-rnn" => Some(ModelKind::DirRnn),
            "bpr-mf" => Some(ModelKind::BprMf),
            "augmented-mf" => Some(ModelKind::AugmentedMf),
            "augmented-rnn" => Some(ModelKind::AugmentedRnn),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::DirMf => "dir-mf",
            ModelKind::DirRnn => "dir-rnn",
            ModelKind::BprMf => "bpr-mf",
            ModelKind::AugmentedMf => "augmented-mf",
            ModelKind::AugmentedRnn => "augmented-rnn",
        }
    }

    /// Factored heads place items on the attribute tensor; baselines don't.
    pub fn uses_allocation(self) -> bool {
        matches!(self, ModelKind::DirMf | ModelKind::DirRnn)
    }

    pub fn is_sequential(self) -> bool {
        matches!(self, ModelKind::DirRnn | ModelKind::AugmentedRnn)
    }

    pub fn default_dim(self) -> usize {
        if self.is_sequential() {
            90
        } else {
            50
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    DirMf,
    DirRnn {
        cell: RnnCell,
    },
    BprMf {
        users: VectorTable,
        items: VectorTable,
    },
    AugMf {
        users: VectorTable,
        items: VectorTable,
    },
    AugRnn {
        items: VectorTable,
        cell: RnnCell,
    },
}

/// Per-epoch hyperparameters, resolved by the trainer from its config.
#[derive(Debug, Clone, Copy)]
pub struct EpochParams {
    pub lr: f64,
    /// Pull-to-zero on factored-head tables (off by default).
    pub weight_decay: f64,
    /// L2 strength inside pairwise baseline updates.
    pub bpr_l2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub store: EmbeddingStore,
    pub head: Head,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Model {
    /// Initializes every table from one RNG in a fixed draw order (attribute
    /// axes, user table, head tables, recurrent cell), so a seed pins the
    /// whole model.
    pub fn init<R: Rng>(
        kind: ModelKind,
        catalog: &Catalog,
        space: &AttributeSpace,
        dim: usize,
        category_mode: CategoryMode,
        normalization: ScoreNormalization,
        cell_kind: CellKind,
        rng: &mut R,
    ) -> Model {
        let users = catalog.user_count();
        let items = catalog.item_count();
        let bound = init_bound(dim);
        match kind {
            ModelKind::DirMf => {
                let store = EmbeddingStore::init(
                    space,
                    dim,
                    Some(users),
                    category_mode,
                    normalization,
                    rng,
                );
                Model {
                    kind,
                    store,
                    head: Head::DirMf,
                }
            }
            ModelKind::DirRnn => {
                let store =
                    EmbeddingStore::init(space, dim, None, category_mode, normalization, rng);
                let input_dim = space.axis_count() * dim;
                let cell = RnnCell::init(cell_kind, input_dim, dim, rng);
                Model {
                    kind,
                    store,
                    head: Head::DirRnn { cell },
                }
            }
            ModelKind::BprMf => {
                let store = EmbeddingStore::from_parts(dim, Vec::new(), None, normalization);
                Model {
                    kind,
                    store,
                    head: Head::BprMf {
                        users: VectorTable::random(users, dim, bound, rng),
                        items: VectorTable::random(items, dim, bound, rng),
                    },
                }
            }
            ModelKind::AugmentedMf => {
                let store = EmbeddingStore::init(
                    &explicit_only(space),
                    dim,
                    None,
                    category_mode,
                    normalization,
                    rng,
                );
                let wide = (1 + space.explicit_count()) * dim;
                Model {
                    kind,
                    store,
                    head: Head::AugMf {
                        users: VectorTable::random(users, wide, init_bound(wide), rng),
                        items: VectorTable::random(items, dim, bound, rng),
                    },
                }
            }
            ModelKind::AugmentedRnn => {
                let store = EmbeddingStore::init(
                    &explicit_only(space),
                    dim,
                    None,
                    category_mode,
                    normalization,
                    rng,
                );
                let wide = (1 + space.explicit_count()) * dim;
                let items = VectorTable::random(items, dim, bound, rng);
                let cell = RnnCell::init(cell_kind, wide, wide, rng);
                Model {
                    kind,
                    store,
                    head: Head::AugRnn { items, cell },
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.store.dim()
    }

    /// Static context vector of the matrix-factorization head.
    pub fn mf_context(&self, user: u32) -> Result<&[f64]> {
        match self.head {
            Head::DirMf => self.store.user_vector(user),
            _ => Err(DirError::Invalid(
                "model has no static user context".into(),
            )),
        }
    }

    /// Exact count of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let store = self.store.parameter_count();
        match &self.head {
            Head::DirMf => store,
            Head::DirRnn { cell } => store + cell.parameter_count(),
            Head::BprMf { users, items } | Head::AugMf { users, items } => {
                store + users.rows() * users.dim() + items.rows() * items.dim()
            }
            Head::AugRnn { items, cell } => {
                store + items.rows() * items.dim() + cell.parameter_count()
            }
        }
    }

    /// One pass over the training split. Returns the summed training loss
    /// (negative log likelihood for factored heads, pairwise loss for the
    /// baselines), measured before each update.
    pub fn train_epoch<R: Rng>(
        &mut self,
        catalog: &Catalog,
        space: &AttributeSpace,
        alloc: Option<&Allocation>,
        params: EpochParams,
        rng: &mut R,
    ) -> Result<f64> {
        match self.kind {
            ModelKind::DirMf => {
                let alloc = require_alloc(alloc)?;
                let mut pairs = catalog.train_pairs();
                pairs.shuffle(rng);
                let mut loss = 0.0;
                let mut grads = GradientBuffer::default();
                for (u, q) in pairs {
                    let coords = alloc.coords(q)?.to_vec();
                    let ctx = self.store.user_vector(u)?.to_vec();
                    let mut d_ctx = vec![0.0; ctx.len()];
                    grads.clear();
                    loss +=
                        event_loss_and_grads(&self.store, &coords, &ctx, &mut d_ctx, &mut grads);
                    axpy(grads.add_user(u, ctx.len()), 1.0, &d_ctx);
                    sgd_step(&mut self.store, &grads, params.lr, params.weight_decay)?;
                }
                Ok(loss)
            }
            ModelKind::DirRnn => {
                let mut users: Vec<u32> = (0..catalog.user_count() as u32).collect();
                users.shuffle(rng);
                let alloc = require_alloc(alloc)?;
                let mut loss = 0.0;
                for u in users {
                    let seq = train_items(catalog, u);
                    if seq.len() < 2 {
                        log::debug!("user {u}: train sequence too short, skipped");
                        continue;
                    }
                    let coords: Vec<Vec<u32>> = seq
                        .iter()
                        .map(|&q| alloc.coords(q).map(|c| c.to_vec()))
                        .collect::<Result<_>>()?;
                    let (seq_loss, grads, cell_grads) = {
                        let cell = self.rnn_cell()?;
                        dir_rnn_loss_and_grads(&self.store, cell, &coords)
                    };
                    loss += seq_loss;
                    sgd_step(&mut self.store, &grads, params.lr, params.weight_decay)?;
                    self.rnn_cell_mut()?
                        .apply_sgd(&cell_grads, params.lr, params.weight_decay)?;
                }
                Ok(loss)
            }
            ModelKind::BprMf => {
                let mut pairs = catalog.train_pairs();
                pairs.shuffle(rng);
                let mut loss = 0.0;
                for (u, p) in pairs {
                    let Some(n) = sample_negative(catalog, u, rng) else {
                        continue;
                    };
                    let Head::BprMf { users, items } = &mut self.head else {
                        unreachable!()
                    };
                    loss += bpr_mf_step(users, items, u, p, n, params.lr, params.bpr_l2);
                }
                Ok(loss)
            }
            ModelKind::AugmentedMf => {
                let mut pairs = catalog.train_pairs();
                pairs.shuffle(rng);
                let mut loss = 0.0;
                for (u, p) in pairs {
                    let Some(n) = sample_negative(catalog, u, rng) else {
                        continue;
                    };
                    loss += self.aug_mf_step(space, u, p, n, params)?;
                }
                Ok(loss)
            }
            ModelKind::AugmentedRnn => {
                let mut users: Vec<u32> = (0..catalog.user_count() as u32).collect();
                users.shuffle(rng);
                let mut loss = 0.0;
                for u in users {
                    let seq = train_items(catalog, u);
                    if seq.len() < 2 {
                        continue;
                    }
                    loss += self.aug_rnn_sequence_step(catalog, space, u, &seq, params, rng)?;
                }
                Ok(loss)
            }
        }
    }

    /// Forward-only training objective of the factored heads; used to record
    /// the loss around reallocations.
    pub fn train_loss(
        &self,
        catalog: &Catalog,
        alloc: Option<&Allocation>,
    ) -> Result<f64> {
        let alloc = require_alloc(alloc)?;
        match &self.head {
            Head::DirMf => {
                let mut loss = 0.0;
                for (u, q) in catalog.train_pairs() {
                    let ctx = self.store.user_vector(u)?;
                    loss += event_loss(&self.store, alloc.coords(q)?, ctx);
                }
                Ok(loss)
            }
            Head::DirRnn { cell } => {
                let mut loss = 0.0;
                for u in 0..catalog.user_count() as u32 {
                    let seq = train_items(catalog, u);
                    if seq.len() < 2 {
                        continue;
                    }
                    let coords: Vec<Vec<u32>> = seq
                        .iter()
                        .map(|&q| alloc.coords(q).map(|c| c.to_vec()))
                        .collect::<Result<_>>()?;
                    loss += dir_rnn_loss(&self.store, cell, &coords);
                }
                Ok(loss)
            }
            _ => Err(DirError::Invalid(
                "training objective is factored-head only".into(),
            )),
        }
    }

    /// Scores every catalog item for one user. The phase decides how much of
    /// the user's sequence feeds a recurrent context: the training split when
    /// scoring validation, training plus the validation item when scoring test.
    pub fn score_items(
        &self,
        catalog: &Catalog,
        space: &AttributeSpace,
        alloc: Option<&Allocation>,
        user: u32,
        phase: EvalPhase,
    ) -> Result<Vec<f64>> {
        let n = catalog.item_count();
        match &self.head {
            Head::DirMf => {
                let alloc = require_alloc(alloc)?;
                let ctx = self.store.user_vector(user)?;
                let scores = scores_for_context(&self.store, ctx);
                (0..n as u32)
                    .map(|q| alloc.coords(q).map(|c| item_score(&scores, c)))
                    .collect()
            }
            Head::DirRnn { cell } => {
                let alloc = require_alloc(alloc)?;
                let ctx = self.rnn_context(catalog, alloc, cell, user, phase)?;
                let scores = scores_for_context(&self.store, &ctx);
                (0..n as u32)
                    .map(|q| alloc.coords(q).map(|c| item_score(&scores, c)))
                    .collect()
            }
            Head::BprMf { users, items } => {
                let u = users.row(user);
                Ok((0..n as u32).map(|q| dot(u, items.row(q))).collect())
            }
            Head::AugMf { users, items } => {
                Ok(self.augmented_scores(space, items, users.row(user)))
            }
            Head::AugRnn { items, cell } => {
                let ctx = self.aug_rnn_context(catalog, space, items, cell, user, phase)?;
                Ok(self.augmented_scores(space, items, &ctx))
            }
        }
    }

    /// Per-axis preference distributions for one user, from the same context
    /// `score_items` would use. Factored heads only; this is what attribute
    /// level ranking lists are built from.
    pub fn user_axis_scores(
        &self,
        catalog: &Catalog,
        alloc: Option<&Allocation>,
        user: u32,
        phase: EvalPhase,
    ) -> Result<Vec<AxisScore>> {
        match &self.head {
            Head::DirMf => {
                let ctx = self.store.user_vector(user)?;
                Ok(scores_for_context(&self.store, ctx))
            }
            Head::DirRnn { cell } => {
                let alloc = require_alloc(alloc)?;
                let ctx = self.rnn_context(catalog, alloc, cell, user, phase)?;
                Ok(scores_for_context(&self.store, &ctx))
            }
            _ => Err(DirError::Invalid(
                "per-axis scores exist only for factored models".into(),
            )),
        }
    }

    /// Dot products of a wide context against [item vector; explicit
    /// attribute vectors], computed with per-axis value dots hoisted out.
    fn augmented_scores(
        &self,
        space: &AttributeSpace,
        items: &VectorTable,
        wide_ctx: &[f64],
    ) -> Vec<f64> {
        let d = self.store.dim();
        let axis_dots: Vec<Vec<f64>> = self
            .store
            .axes()
            .iter()
            .enumerate()
            .map(|(k, emb)| {
                let slice = &wide_ctx[(1 + k) * d..(2 + k) * d];
                (0..emb.value_count() as u32)
                    .map(|v| dot(slice, emb.value_vector(v)))
                    .collect()
            })
            .collect();
        let head = &wide_ctx[0..d];
        (0..items.rows() as u32)
            .map(|q| {
                let mut s = dot(head, items.row(q));
                for (k, dots) in axis_dots.iter().enumerate() {
                    let v = space.explicit_axes()[k].item_values[q as usize];
                    s += dots[v as usize];
                }
                s
            })
            .collect()
    }

    /// Per-item log-probability rows for one implicit axis, summed over the
    /// item's training events. Items with no training signal give None so the
    /// reallocation keeps them in place.
    pub fn implicit_weight_rows(
        &self,
        catalog: &Catalog,
        space: &AttributeSpace,
        alloc: &Allocation,
        axis: usize,
    ) -> Result<Vec<Option<Vec<f64>>>> {
        if axis < space.explicit_count() || axis >= space.axis_count() {
            return Err(DirError::Invalid(format!(
                "axis {axis} is not an implicit axis"
            )));
        }
        let size = space.axis_size(axis);
        let n = catalog.item_count();
        let mut rows: Vec<Option<Vec<f64>>> = vec![None; n];
        match &self.head {
            Head::DirMf => {
                for u in 0..catalog.user_count() as u32 {
                    let ctx = self.store.user_vector(u)?;
                    let score = axis_scores(&self.store, axis, ctx);
                    for &q in catalog.train_sequence(u).iter().map(|e| &e.item) {
                        let row = rows[q as usize].get_or_insert_with(|| vec![0.0; size]);
                        for (w, &lp) in row.iter_mut().zip(score.log_probs.iter()) {
                            *w += lp;
                        }
                    }
                }
                Ok(rows)
            }
            Head::DirRnn { cell } => {
                for u in 0..catalog.user_count() as u32 {
                    let seq = train_items(catalog, u);
                    if seq.len() < 2 {
                        continue;
                    }
                    let (mut h, mut c) = cell.zero_state();
                    for t in 1..seq.len() {
                        let rep = self
                            .store
                            .item_representation(alloc.coords(seq[t - 1])?);
                        let (h2, c2, _) = cell.step(&rep, &h, &c);
                        h = h2;
                        c = c2;
                        let score = axis_scores(&self.store, axis, &h);
                        let q = seq[t] as usize;
                        let row = rows[q].get_or_insert_with(|| vec![0.0; size]);
                        for (w, &lp) in row.iter_mut().zip(score.log_probs.iter()) {
                            *w += lp;
                        }
                    }
                }
                Ok(rows)
            }
            _ => Err(DirError::Invalid(
                "reallocation weights are factored-head only".into(),
            )),
        }
    }

    fn rnn_cell(&self) -> Result<&RnnCell> {
        match &self.head {
            Head::DirRnn { cell } => Ok(cell),
            _ => Err(DirError::Invalid("model has no recurrent cell".into())),
        }
    }

    fn rnn_cell_mut(&mut self) -> Result<&mut RnnCell> {
        match &mut self.head {
            Head::DirRnn { cell } => Ok(cell),
            _ => Err(DirError::Invalid("model has no recurrent cell".into())),
        }
    }

    /// Recurrent context for scoring: the state after consuming the phase's
    /// visible prefix of the user's sequence.
    fn rnn_context(
        &self,
        catalog: &Catalog,
        alloc: &Allocation,
        cell: &RnnCell,
        user: u32,
        phase: EvalPhase,
    ) -> Result<Vec<f64>> {
        let (mut h, mut c) = cell.zero_state();
        for q in visible_items(catalog, user, phase) {
            let rep = self.store.item_representation(alloc.coords(q)?);
            let (h2, c2, _) = cell.step(&rep, &h, &c);
            h = h2;
            c = c2;
        }
        Ok(h)
    }

    fn aug_rnn_context(
        &self,
        catalog: &Catalog,
        space: &AttributeSpace,
        items: &VectorTable,
        cell: &RnnCell,
        user: u32,
        phase: EvalPhase,
    ) -> Result<Vec<f64>> {
        let (mut h, mut c) = cell.zero_state();
        for q in visible_items(catalog, user, phase) {
            let rep = self.augmented_representation(space, items, q);
            let (h2, c2, _) = cell.step(&rep, &h, &c);
            h = h2;
            c = c2;
        }
        Ok(h)
    }

    /// [item vector; explicit attribute vectors] in fixed axis order.
    fn augmented_representation(
        &self,
        space: &AttributeSpace,
        items: &VectorTable,
        item: u32,
    ) -> Vec<f64> {
        let mut rep = Vec::with_capacity((1 + self.store.axes().len()) * self.store.dim());
        rep.extend_from_slice(items.row(item));
        for (k, emb) in self.store.axes().iter().enumerate() {
            let v = space.explicit_axes()[k].item_values[item as usize];
            rep.extend_from_slice(emb.value_vector(v));
        }
        rep
    }

    fn aug_mf_step(
        &mut self,
        space: &AttributeSpace,
        u: u32,
        p: u32,
        n: u32,
        params: EpochParams,
    ) -> Result<f64> {
        let d = self.store.dim();
        let (rep_p, rep_n, diff, wide) = {
            let Head::AugMf { users, items } = &self.head else {
                unreachable!()
            };
            let rep_p = self.augmented_representation(space, items, p);
            let rep_n = self.augmented_representation(space, items, n);
            let wide = users.row(u).to_vec();
            let diff = dot(&wide, &rep_p) - dot(&wide, &rep_n);
            (rep_p, rep_n, diff, wide)
        };
        let s = sigmoid(-diff);
        let loss = softplus(-diff);
        let lambda = params.bpr_l2;

        let mut grads = GradientBuffer::default();
        for (k, emb) in self.store.axes().iter().enumerate() {
            let slice = &wide[(1 + k) * d..(2 + k) * d];
            let vp = space.explicit_axes()[k].item_values[p as usize];
            let vn = space.explicit_axes()[k].item_values[n as usize];
            let mut g: Vec<f64> = slice.iter().map(|&x| -s * x).collect();
            scatter_value_vec(emb, k, vp, &g, &mut grads);
            g.iter_mut().for_each(|x| *x = -*x);
            scatter_value_vec(emb, k, vn, &g, &mut grads);
        }
        sgd_step(&mut self.store, &grads, params.lr, lambda)?;

        let Head::AugMf { users, items } = &mut self.head else {
            unreachable!()
        };
        let urow = users.row_mut(u);
        for i in 0..urow.len() {
            urow[i] += params.lr * (s * (rep_p[i] - rep_n[i]) - lambda * urow[i]);
        }
        let prow = items.row_mut(p);
        for i in 0..d {
            prow[i] += params.lr * (s * wide[i] - lambda * prow[i]);
        }
        let nrow = items.row_mut(n);
        for i in 0..d {
            nrow[i] += params.lr * (-s * wide[i] - lambda * nrow[i]);
        }
        Ok(loss)
    }

    /// Pairwise training over one sequence with backpropagation through time:
    /// each step's state ranks the next purchase above a sampled negative.
    fn aug_rnn_sequence_step<R: Rng>(
        &mut self,
        catalog: &Catalog,
        space: &AttributeSpace,
        user: u32,
        seq: &[u32],
        params: EpochParams,
        rng: &mut R,
    ) -> Result<f64> {
        let d = self.store.dim();
        let lambda = params.bpr_l2;
        let l = seq.len();

        struct Pred {
            pos: u32,
            neg: u32,
            s: f64,
        }

        let (loss, preds, states, caches, reps) = {
            let Head::AugRnn { items, cell } = &self.head else {
                unreachable!()
            };
            let reps: Vec<Vec<f64>> = seq[..l - 1]
                .iter()
                .map(|&q| self.augmented_representation(space, items, q))
                .collect();
            let (mut h, mut c) = cell.zero_state();
            let mut states = vec![(h.clone(), c.clone())];
            let mut caches = Vec::new();
            for rep in &reps {
                let (h2, c2, cache) = cell.step(rep, &h, &c);
                h = h2;
                c = c2;
                states.push((h.clone(), c.clone()));
                caches.push(cache);
            }
            let mut loss = 0.0;
            let mut preds: Vec<Option<Pred>> = Vec::with_capacity(l - 1);
            for t in 1..l {
                let Some(neg) = sample_negative(catalog, user, rng) else {
                    preds.push(None);
                    continue;
                };
                let pos = seq[t];
                let rep_p = self.augmented_representation(space, items, pos);
                let rep_n = self.augmented_representation(space, items, neg);
                let ctx = &states[t].0;
                let diff = dot(ctx, &rep_p) - dot(ctx, &rep_n);
                loss += softplus(-diff);
                preds.push(Some(Pred {
                    pos,
                    neg,
                    s: sigmoid(-diff),
                }));
            }
            (loss, preds, states, caches, reps)
        };

        // Descent gradients: item rows densely keyed, attribute values
        // through the shared buffer, cell parameters densely.
        let mut item_grads: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        let mut store_grads = GradientBuffer::default();
        let scatter_rep = |this: &Model,
                               item: u32,
                               g: &[f64],
                               item_grads: &mut BTreeMap<u32, Vec<f64>>,
                               store_grads: &mut GradientBuffer| {
            axpy(
                item_grads.entry(item).or_insert_with(|| vec![0.0; d]),
                1.0,
                &g[0..d],
            );
            for (k, emb) in this.store.axes().iter().enumerate() {
                let v = space.explicit_axes()[k].item_values[item as usize];
                scatter_value_vec(emb, k, v, &g[(1 + k) * d..(2 + k) * d], store_grads);
            }
        };

        let wide = (1 + self.store.axes().len()) * d;
        let mut dh_acc = vec![vec![0.0; wide]; l];
        {
            let Head::AugRnn { items, .. } = &self.head else {
                unreachable!()
            };
            for (t, pred) in preds.iter().enumerate().map(|(i, p)| (i + 1, p)) {
                let Some(pred) = pred else { continue };
                let rep_p = self.augmented_representation(space, items, pred.pos);
                let rep_n = self.augmented_representation(space, items, pred.neg);
                let ctx = &states[t].0;
                for i in 0..wide {
                    dh_acc[t][i] += -pred.s * (rep_p[i] - rep_n[i]);
                }
                let gp: Vec<f64> = ctx.iter().map(|&x| -pred.s * x).collect();
                scatter_rep(self, pred.pos, &gp, &mut item_grads, &mut store_grads);
                let gn: Vec<f64> = ctx.iter().map(|&x| pred.s * x).collect();
                scatter_rep(self, pred.neg, &gn, &mut item_grads, &mut store_grads);
            }
        }

        let cell_grads = {
            let Head::AugRnn { cell, .. } = &self.head else {
                unreachable!()
            };
            let mut cell_grads = CellGrads::zeros(cell);
            let mut dh_next = vec![0.0; wide];
            let mut dc_next = vec![0.0; wide];
            for k in (0..l - 1).rev() {
                let mut dh = dh_acc[k + 1].clone();
                axpy(&mut dh, 1.0, &dh_next);
                let (h_prev, c_prev) = &states[k];
                let (dx, dh_prev, dc_prev) =
                    cell.backward(&caches[k], &reps[k], h_prev, c_prev, &dh, &dc_next, &mut cell_grads);
                scatter_rep(self, seq[k], &dx, &mut item_grads, &mut store_grads);
                dh_next = dh_prev;
                dc_next = dc_prev;
            }
            cell_grads
        };

        sgd_step(&mut self.store, &store_grads, params.lr, lambda)?;
        let Head::AugRnn { items, cell } = &mut self.head else {
            unreachable!()
        };
        for (q, g) in item_grads {
            let row = items.row_mut(q);
            for i in 0..d {
                row[i] -= params.lr * (g[i] + lambda * row[i]);
                if !row[i].is_finite() {
                    return Err(DirError::NonFinite("item vector".into()));
                }
            }
        }
        cell.apply_sgd(&cell_grads, params.lr, lambda)?;
        Ok(loss)
    }
}

fn explicit_only(space: &AttributeSpace) -> AttributeSpace {
    space.with_implicit_sizes(Vec::new())
}

fn require_alloc(alloc: Option<&Allocation>) -> Result<&Allocation> {
    alloc.ok_or_else(|| DirError::Invalid("factored head needs an allocation".into()))
}

fn train_items(catalog: &Catalog, user: u32) -> Vec<u32> {
    catalog.train_sequence(user).iter().map(|e| e.item).collect()
}

/// Items whose events a scoring context may legally consume.
fn visible_items(catalog: &Catalog, user: u32, phase: EvalPhase) -> Vec<u32> {
    let mut items = train_items(catalog, user);
    if phase == EvalPhase::Test {
        items.push(catalog.validation_event(user).item);
    }
    items
}

/// Uniform negative draw outside the user's purchase set; None when the user
/// has purchased the entire catalog.
fn sample_negative<R: Rng>(catalog: &Catalog, user: u32, rng: &mut R) -> Option<u32> {
    let n = catalog.item_count() as u32;
    let purchased = catalog.purchased(user);
    if purchased.len() >= n as usize {
        return None;
    }
    loop {
        let q = rng.gen_range(0..n);
        if !purchased.contains(&q) {
            return Some(q);
        }
    }
}

/// One pairwise update on raw dot-product scores. Returns the pair loss
/// before the update.
pub fn bpr_mf_step(
    users: &mut VectorTable,
    items: &mut VectorTable,
    u: u32,
    p: u32,
    n: u32,
    lr: f64,
    lambda: f64,
) -> f64 {
    let diff = dot(users.row(u), items.row(p)) - dot(users.row(u), items.row(n));
    let s = sigmoid(-diff);
    let uvec = users.row(u).to_vec();
    let pvec = items.row(p).to_vec();
    let nvec = items.row(n).to_vec();
    let urow = users.row_mut(u);
    for i in 0..urow.len() {
        urow[i] += lr * (s * (pvec[i] - nvec[i]) - lambda * urow[i]);
    }
    let prow = items.row_mut(p);
    for i in 0..prow.len() {
        prow[i] += lr * (s * uvec[i] - lambda * prow[i]);
    }
    let nrow = items.row_mut(n);
    for i in 0..nrow.len() {
        nrow[i] += lr * (-s * uvec[i] - lambda * nrow[i]);
    }
    softplus(-diff)
}

/// Forward pass of the factored sequence head over one coordinate sequence:
/// the state built from purchases before step t predicts the purchase at t,
/// so the first item is context only and a length-L sequence yields L-1
/// prediction terms.
fn dir_rnn_loss(store: &EmbeddingStore, cell: &RnnCell, coords: &[Vec<u32>]) -> f64 {
    let (mut h, mut c) = cell.zero_state();
    let mut loss = 0.0;
    for t in 1..coords.len() {
        let rep = store.item_representation(&coords[t - 1]);
        let (h2, c2, _) = cell.step(&rep, &h, &c);
        h = h2;
        c = c2;
        loss += event_loss(store, &coords[t], &h);
    }
    loss
}

/// Loss plus exact gradients for one sequence, backpropagated through time.
/// Attribute vectors receive gradient along both routes: as prediction
/// targets at each step and as recurrent inputs.
fn dir_rnn_loss_and_grads(
    store: &EmbeddingStore,
    cell: &RnnCell,
    coords: &[Vec<u32>],
) -> (f64, GradientBuffer, CellGrads) {
    let l = coords.len();
    let reps: Vec<Vec<f64>> = coords[..l - 1]
        .iter()
        .map(|c| store.item_representation(c))
        .collect();
    let (mut h, mut c) = cell.zero_state();
    let mut states = vec![(h.clone(), c.clone())];
    let mut caches = Vec::new();
    for rep in &reps {
        let (h2, c2, cache) = cell.step(rep, &h, &c);
        h = h2;
        c = c2;
        states.push((h.clone(), c.clone()));
        caches.push(cache);
    }

    let mut grads = GradientBuffer::default();
    let mut loss = 0.0;
    let hidden = cell.hidden();
    let mut dh_acc = vec![vec![0.0; hidden]; l];
    for t in 1..l {
        let ctx = states[t].0.clone();
        loss += event_loss_and_grads(store, &coords[t], &ctx, &mut dh_acc[t], &mut grads);
    }

    let mut cell_grads = CellGrads::zeros(cell);
    let mut dh_next = vec![0.0; hidden];
    let mut dc_next = vec![0.0; hidden];
    let d = store.dim();
    for k in (0..l - 1).rev() {
        let mut dh = dh_acc[k + 1].clone();
        axpy(&mut dh, 1.0, &dh_next);
        let (h_prev, c_prev) = &states[k];
        let (dx, dh_prev, dc_prev) =
            cell.backward(&caches[k], &reps[k], h_prev, c_prev, &dh, &dc_next, &mut cell_grads);
        for (axis, &v) in coords[k].iter().enumerate() {
            scatter_value_vec(
                &store.axes()[axis],
                axis,
                v,
                &dx[axis * d..(axis + 1) * d],
                &mut grads,
            );
        }
        dh_next = dh_prev;
        dc_next = dc_prev;
    }
    (loss, grads, cell_grads)
}
