//! Synthetic catalog generator with a planted two-sided taste.
//!
//! Items are organized into category groups; within a group, each item gets a
//! planted slot (its within-group index). Every user draws a style uniformly
//! over slots plus a small set of favorite groups, and buys with weight
//! `exp(beta)` per matched side: favorite group, matching slot, or
//! `exp(2 beta)` for both. Group affinity is visible to every model through
//! the category attribute; slot affinity is recoverable only by allocating
//! items to implicit values, and an allocation that recovers the planted
//! slots (up to a global relabeling of implicit values) is the success
//! signal for the alternating trainer.
//!
//! An optional rare-item mechanism serves cold-start experiments: a fraction
//! of each group is downweighted hard enough that those items stay below the
//! cold-start threshold in training, and a configurable share of users has
//! their final (test) event redirected to a rare item.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

use crate::allocation::{Allocation, AttributeSpace};
use crate::assignment::solve_max_weight;
use crate::catalog::{Catalog, CatalogItem, IngestOptions, RawInteraction, MAX_PURCHASES, MIN_PURCHASES};
use crate::error::{DirError, Result};

/// Relative purchase weight of a rare item. Small enough that rare items stay
/// under the cold-start threshold at the scales the generator is used at.
pub const RARE_WEIGHT: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub num_users: usize,
    /// Items per category group; one group per entry.
    pub group_sizes: Vec<usize>,
    /// Events drawn per user (with replacement, distinct timestamps).
    pub interactions_per_user: usize,
    /// Preference sharpness, applied once per matched taste side (favorite
    /// group, style slot). 0 means uniform purchases, no planted signal.
    pub beta: f64,
    /// Fraction of each group marked rare (rounded up per group).
    pub rare_fraction: f64,
    /// Probability that a user's last event is redirected to a rare item
    /// drawn with the user's own style weights, so the cold held-out item
    /// stays consistent with their taste.
    pub cold_test_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_users: 200,
            group_sizes: vec![10; 10],
            interactions_per_user: 20,
            beta: 3.0,
            rare_fraction: 0.0,
            cold_test_prob: 0.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.num_users == 0 {
            errs.push("num_users must be positive".to_string());
        }
        if self.group_sizes.is_empty() || self.group_sizes.iter().any(|&s| s == 0) {
            errs.push("group_sizes must be non-empty and positive".to_string());
        }
        if !(MIN_PURCHASES..=MAX_PURCHASES).contains(&self.interactions_per_user) {
            errs.push(format!(
                "interactions_per_user must lie in [{MIN_PURCHASES}, {MAX_PURCHASES}] so users survive activity filtering"
            ));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            errs.push("beta must be finite and non-negative".to_string());
        }
        if !(0.0..1.0).contains(&self.rare_fraction) {
            errs.push("rare_fraction must lie in [0, 1)".to_string());
        }
        if !(0.0..=1.0).contains(&self.cold_test_prob) {
            errs.push("cold_test_prob must lie in [0, 1]".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(DirError::Config(errs))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub catalog: Catalog,
    /// Planted implicit slot per catalog item index.
    pub planted: Vec<u32>,
    /// Style per catalog user index.
    pub styles: Vec<u32>,
    /// Favorite category groups per catalog user index.
    pub favorites: Vec<Vec<u32>>,
    /// Item indices that were generated as rare.
    pub rare_items: Vec<u32>,
}

pub fn make_synthetic_catalog(spec: &SyntheticSpec) -> Result<Synthetic> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut records = Vec::new();
    let mut slot_of: HashMap<String, u32> = HashMap::new();
    let mut rare_ids = Vec::new();
    let mut item_weights = Vec::new();
    let mut item_slots = Vec::new();
    let mut item_groups = Vec::new();
    let mut rare_indices = Vec::new();
    for (g, &size) in spec.group_sizes.iter().enumerate() {
        let n_rare = (spec.rare_fraction * size as f64).ceil() as usize;
        let rare_picks: Vec<usize> = if n_rare > 0 {
            rand::seq::index::sample(&mut rng, size, n_rare.min(size)).into_vec()
        } else {
            Vec::new()
        };
        for k in 0..size {
            let id = format!("g{g}_i{k}");
            slot_of.insert(id.clone(), k as u32);
            item_slots.push(k as u32);
            item_groups.push(g as u32);
            let rare = rare_picks.contains(&k);
            if rare {
                rare_ids.push(id.clone());
                rare_indices.push(records.len());
            }
            item_weights.push(if rare { RARE_WEIGHT } else { 1.0 });
            records.push(CatalogItem {
                id,
                category_path: vec![format!("g{g}")],
                price: None,
            });
        }
    }

    let num_styles = *spec.group_sizes.iter().max().expect("non-empty") as u32;
    let num_groups = spec.group_sizes.len();
    let favorites_per_user = ((num_groups + 2) / 3).max(1);
    let boost = spec.beta.exp();

    let mut raw = Vec::with_capacity(spec.num_users * spec.interactions_per_user);
    let mut style_of: HashMap<String, u32> = HashMap::new();
    let mut favorites_of: HashMap<String, Vec<u32>> = HashMap::new();
    for u in 0..spec.num_users {
        let user = format!("u{u}");
        let style = rng.gen_range(0..num_styles);
        let favorites: Vec<u32> =
            rand::seq::index::sample(&mut rng, num_groups, favorites_per_user)
                .into_iter()
                .map(|g| g as u32)
                .collect();
        style_of.insert(user.clone(), style);
        favorites_of.insert(user.clone(), favorites.clone());
        let taste = |idx: usize| -> f64 {
            let mut w = 1.0;
            if item_slots[idx] == style {
                w *= boost;
            }
            if favorites.contains(&item_groups[idx]) {
                w *= boost;
            }
            w
        };
        // Rarity overrides taste: a rare item is hard to buy even for users
        // whose taste matches it, otherwise it would not stay cold.
        let weights: Vec<f64> = (0..records.len())
            .map(|idx| {
                if item_weights[idx] < 1.0 {
                    item_weights[idx]
                } else {
                    taste(idx)
                }
            })
            .collect();
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| DirError::Invalid(format!("degenerate purchase weights: {e}")))?;
        let mut picks: Vec<usize> = (0..spec.interactions_per_user)
            .map(|_| dist.sample(&mut rng))
            .collect();
        if spec.cold_test_prob > 0.0 && !rare_indices.is_empty() {
            let z: f64 = rng.gen();
            if z < spec.cold_test_prob {
                // The redirected event models a shopper finally trying an
                // obscure item that still matches their taste, so the draw
                // over rare items keeps the taste weights (rarity excluded).
                // A uniform draw would leave the held-out cold item with no
                // attribute signal, and no model could rank it above chance.
                let redirect_weights: Vec<f64> =
                    rare_indices.iter().map(|&idx| taste(idx)).collect();
                let redirect = WeightedIndex::new(&redirect_weights).map_err(|e| {
                    DirError::Invalid(format!("degenerate redirect weights: {e}"))
                })?;
                let idx = rare_indices[redirect.sample(&mut rng)];
                *picks.last_mut().expect("non-empty") = idx;
            }
        }
        for (t, idx) in picks.into_iter().enumerate() {
            raw.push(RawInteraction {
                user: user.clone(),
                item: records[idx].id.clone(),
                timestamp: t as i64,
            });
        }
    }

    let options = IngestOptions {
        sample_users: None,
        seed: spec.seed,
    };
    let catalog = Catalog::from_parts(records, raw, &options)?;

    // Interning may reorder users and drops unpurchased items; map the planted
    // labels onto the final catalog indices.
    let planted = catalog
        .items()
        .iter()
        .map(|item| slot_of[&item.id])
        .collect();
    let styles = (0..catalog.user_count() as u32)
        .map(|u| style_of[catalog.user_id(u)])
        .collect();
    let favorites = (0..catalog.user_count() as u32)
        .map(|u| favorites_of[catalog.user_id(u)].clone())
        .collect();
    let rare_items = rare_ids
        .iter()
        .filter_map(|id| {
            catalog
                .items()
                .iter()
                .position(|item| &item.id == id)
                .map(|q| q as u32)
        })
        .collect();
    Ok(Synthetic {
        catalog,
        planted,
        styles,
        favorites,
        rare_items,
    })
}

/// Fraction of items whose allocated first-implicit value matches the planted
/// slot, maximized over a single global relabeling of implicit values. The
/// relabeling is found exactly by a max-weight assignment over the
/// slot-by-value confusion counts, so label-permuted recoveries score 1.0.
pub fn planted_agreement(
    planted: &[u32],
    alloc: &Allocation,
    space: &AttributeSpace,
) -> Result<f64> {
    if planted.len() != alloc.item_count() {
        return Err(DirError::Invalid(format!(
            "planted labels cover {} items, allocation has {}",
            planted.len(),
            alloc.item_count()
        )));
    }
    if space.implicit_count() == 0 {
        return Err(DirError::Invalid(
            "agreement needs at least one implicit axis".into(),
        ));
    }
    let axis = space.explicit_count();
    let values = space.axis_size(axis);
    let slots = planted.iter().max().map_or(0, |&s| s as usize + 1);
    if slots > values {
        return Err(DirError::Invalid(format!(
            "{slots} planted slots exceed {values} implicit values"
        )));
    }
    let mut confusion = vec![vec![0.0; values]; slots];
    for (q, &slot) in planted.iter().enumerate() {
        let v = alloc.coords(q as u32)?[axis] as usize;
        confusion[slot as usize][v] += 1.0;
    }
    let matching = solve_max_weight(&confusion)?;
    Ok(matching.total_weight / planted.len() as f64)
}
