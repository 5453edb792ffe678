//! Leave-one-out ranking evaluation. Each user's held-out item is ranked
//! against every catalog item the user never purchased; AUC credits wins and
//! half-credits ties, averaged per user and then across users.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{Allocation, AttributeSpace};
use crate::catalog::{label_cold_start, Catalog};
use crate::embedding::AxisScore;
use crate::error::{DirError, Result};
use crate::models::Model;

/// Fractions of cold-start test cases swept by the stratified evaluation.
pub const COLD_SWEEP_FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalPhase {
    Validation,
    Test,
}

impl EvalPhase {
    pub fn parse(s: &str) -> Option<EvalPhase> {
        match s {
            "validation" => Some(EvalPhase::Validation),
            "test" => Some(EvalPhase::Test),
            _ => None,
        }
    }

    pub fn positive(self, catalog: &Catalog, user: u32) -> u32 {
        match self {
            EvalPhase::Validation => catalog.validation_event(user).item,
            EvalPhase::Test => catalog.test_event(user).item,
        }
    }
}

/// AUC of one positive against a negative set, ties credited one half.
pub fn user_auc(scores: &[f64], positive: u32, negatives: &[u32]) -> Option<f64> {
    if negatives.is_empty() {
        return None;
    }
    let sp = scores[positive as usize];
    let mut credit = 0.0;
    for &n in negatives {
        let sn = scores[n as usize];
        if sp > sn {
            credit += 1.0;
        } else if sp == sn {
            credit += 0.5;
        }
    }
    Some(credit / negatives.len() as f64)
}

fn mix_seed(seed: u64, user: u32) -> u64 {
    seed ^ (user as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Per-user AUC values, in input order. A user yields None (skipped) when the
/// filter rejects their held-out item or no negatives survive. `negative_cap`
/// of 0 ranks against every eligible negative; otherwise each user gets a
/// seeded subsample of that size.
pub fn per_user_auc(
    catalog: &Catalog,
    users: &[u32],
    scorer: &(dyn Fn(u32) -> Result<Vec<f64>> + Sync),
    phase: EvalPhase,
    item_filter: Option<&(dyn Fn(u32) -> bool + Sync)>,
    negative_cap: usize,
    seed: u64,
) -> Result<Vec<(u32, Option<f64>)>> {
    let n = catalog.item_count() as u32;
    users
        .par_iter()
        .map(|&u| {
            let positive = phase.positive(catalog, u);
            if let Some(filter) = item_filter {
                if !filter(positive) {
                    return Ok((u, None));
                }
            }
            let purchased = catalog.purchased(u);
            let mut negatives: Vec<u32> = (0..n)
                .filter(|q| !purchased.contains(q))
                .filter(|&q| item_filter.map_or(true, |f| f(q)))
                .collect();
            if negatives.is_empty() {
                log::warn!("user {u}: no negatives to rank against, skipped");
                return Ok((u, None));
            }
            if negative_cap > 0 && negatives.len() > negative_cap {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u));
                let picks =
                    rand::seq::index::sample(&mut rng, negatives.len(), negative_cap);
                negatives = picks.iter().map(|i| negatives[i]).collect();
            }
            let scores = scorer(u)?;
            Ok((u, user_auc(&scores, positive, &negatives)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct AucSummary {
    pub auc: Option<f64>,
    pub evaluated: usize,
    pub skipped: usize,
}

fn summarize(values: impl Iterator<Item = Option<f64>>) -> AucSummary {
    let mut sum = 0.0;
    let mut evaluated = 0;
    let mut skipped = 0;
    for v in values {
        match v {
            Some(a) => {
                sum += a;
                evaluated += 1;
            }
            None => skipped += 1,
        }
    }
    AucSummary {
        auc: if evaluated > 0 {
            Some(sum / evaluated as f64)
        } else {
            None
        },
        evaluated,
        skipped,
    }
}

/// Mean per-user AUC over the whole catalog.
pub fn average_auc(
    catalog: &Catalog,
    scorer: &(dyn Fn(u32) -> Result<Vec<f64>> + Sync),
    phase: EvalPhase,
    item_filter: Option<&(dyn Fn(u32) -> bool + Sync)>,
    negative_cap: usize,
    seed: u64,
) -> Result<AucSummary> {
    let users: Vec<u32> = (0..catalog.user_count() as u32).collect();
    let per_user = per_user_auc(catalog, &users, scorer, phase, item_filter, negative_cap, seed)?;
    Ok(summarize(per_user.into_iter().map(|(_, a)| a)))
}

/// Validation-phase AUC of a model; the trainer's plateau signal.
pub fn validation_auc(
    model: &Model,
    catalog: &Catalog,
    space: &AttributeSpace,
    alloc: Option<&Allocation>,
    negative_cap: usize,
    seed: u64,
) -> Result<AucSummary> {
    let scorer =
        |u: u32| model.score_items(catalog, space, alloc, u, EvalPhase::Validation);
    average_auc(catalog, &scorer, EvalPhase::Validation, None, negative_cap, seed)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub auc: f64,
    pub users: usize,
}

/// Cold-fraction sweep over precomputed per-user AUC values. Every subset
/// keeps all cold cases and pads with a seeded prefix of warm users sized so
/// cold/(cold+warm) hits the requested fraction; prefixes make the subsets
/// nested. Unreachable fractions are omitted rather than approximated, and a
/// catalog with no cold cases degenerates to the single all-warm point.
pub fn cold_start_sweep(
    entries: &[(f64, bool)],
    fractions: &[f64],
    seed: u64,
) -> Vec<SweepPoint> {
    let cold: Vec<f64> = entries.iter().filter(|e| e.1).map(|e| e.0).collect();
    let mut warm: Vec<f64> = entries.iter().filter(|e| !e.1).map(|e| e.0).collect();
    if cold.is_empty() {
        if warm.is_empty() {
            return Vec::new();
        }
        let auc = warm.iter().sum::<f64>() / warm.len() as f64;
        return vec![SweepPoint {
            fraction: 0.0,
            auc,
            users: warm.len(),
        }];
    }
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    warm.shuffle(&mut rng);
    let cold_sum: f64 = cold.iter().sum();
    let mut points = Vec::new();
    for &f in fractions {
        if !(0.0..=1.0).contains(&f) || f <= 0.0 {
            continue;
        }
        let warm_needed = (cold.len() as f64 * (1.0 - f) / f).round() as usize;
        if warm_needed > warm.len() {
            continue;
        }
        let subset_sum: f64 = cold_sum + warm[..warm_needed].iter().sum::<f64>();
        let users = cold.len() + warm_needed;
        points.push(SweepPoint {
            fraction: f,
            auc: subset_sum / users as f64,
            users,
        });
    }
    points
}

/// Top-K lists over one user's candidates: ranked by summed explicit-axis
/// log-probability, by summed implicit-axis log-probability, and by their
/// total (the product score). Ties break toward the lower item id.
#[derive(Debug, Clone, Serialize)]
pub struct RankedLists {
    pub explicit: Vec<(u32, f64)>,
    pub implicit: Vec<(u32, f64)>,
    pub product: Vec<(u32, f64)>,
    /// Set when fewer than K candidates were available.
    pub truncated: bool,
}

pub fn attribute_level_ranking(
    scores: &[AxisScore],
    space: &AttributeSpace,
    alloc: &Allocation,
    candidates: &[u32],
    k: usize,
) -> Result<RankedLists> {
    let split = space.explicit_count();
    let mut explicit = Vec::with_capacity(candidates.len());
    let mut implicit = Vec::with_capacity(candidates.len());
    let mut product = Vec::with_capacity(candidates.len());
    for &q in candidates {
        let coords = alloc.coords(q)?;
        let mut e = 0.0;
        let mut m = 0.0;
        for (axis, &v) in coords.iter().enumerate() {
            let lp = scores[axis].log_probs[v as usize];
            if axis < split {
                e += lp;
            } else {
                m += lp;
            }
        }
        explicit.push((q, e));
        implicit.push((q, m));
        product.push((q, e + m));
    }
    let top = |mut list: Vec<(u32, f64)>| {
        list.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        list.truncate(k);
        list
    };
    Ok(RankedLists {
        truncated: k > candidates.len(),
        explicit: top(explicit),
        implicit: top(implicit),
        product: top(product),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub model: String,
    pub phase: EvalPhase,
    pub overall_auc: Option<f64>,
    pub warm_auc: Option<f64>,
    pub warm_users: usize,
    pub cold_auc: Option<f64>,
    pub cold_users: usize,
    pub skipped_users: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc_by_cold_fraction: Option<Vec<SweepPoint>>,
    pub parameter_count: usize,
    /// Wall time of the scoring loop alone (model loading excluded).
    pub inference_seconds: f64,
    /// Each user's scores are computed once and reused across the overall,
    /// warm/cold, and sweep aggregates.
    pub score_cache: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalSettings {
    pub phase: EvalPhase,
    pub sweep: bool,
    pub negative_cap: usize,
    pub seed: u64,
}

/// Full evaluation of a trained model: per-user AUC (scored once per user),
/// split into warm and cold by the held-out item's training frequency, plus
/// the optional cold-fraction sweep over the same per-user values.
pub fn evaluate_model(
    model: &Model,
    catalog: &Catalog,
    space: &AttributeSpace,
    alloc: Option<&Allocation>,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let users: Vec<u32> = (0..catalog.user_count() as u32).collect();
    let scorer = |u: u32| model.score_items(catalog, space, alloc, u, settings.phase);
    let started = Instant::now();
    let per_user = per_user_auc(
        catalog,
        &users,
        &scorer,
        settings.phase,
        None,
        settings.negative_cap,
        settings.seed,
    )?;
    let inference_seconds = started.elapsed().as_secs_f64();

    let labels = label_cold_start(catalog);
    let mut warm = Vec::new();
    let mut cold = Vec::new();
    let mut skipped = 0;
    let mut entries = Vec::new();
    for &(u, auc) in &per_user {
        let Some(auc) = auc else {
            skipped += 1;
            continue;
        };
        let is_cold = labels[settings.phase.positive(catalog, u) as usize].is_cold;
        entries.push((auc, is_cold));
        if is_cold {
            cold.push(auc);
        } else {
            warm.push(auc);
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let overall: Vec<f64> = entries.iter().map(|e| e.0).collect();
    let sweep = if settings.sweep {
        Some(cold_start_sweep(&entries, &COLD_SWEEP_FRACTIONS, settings.seed))
    } else {
        None
    };
    Ok(EvalReport {
        model: model.kind.to_string(),
        phase: settings.phase,
        overall_auc: mean(&overall),
        warm_auc: mean(&warm),
        warm_users: warm.len(),
        cold_auc: mean(&cold),
        cold_users: cold.len(),
        skipped_users: skipped,
        auc_by_cold_fraction: sweep,
        parameter_count: model.parameter_count(),
        inference_seconds,
        score_cache: true,
    })
}

/// Guard for reports: every AUC-like quantity must sit in [0, 1].
pub fn check_report_ranges(report: &EvalReport) -> Result<()> {
    let mut all = vec![report.overall_auc, report.warm_auc, report.cold_auc];
    if let Some(sweep) = &report.auc_by_cold_fraction {
        all.extend(sweep.iter().map(|p| Some(p.auc)));
    }
    for v in all.into_iter().flatten() {
        if !(0.0..=1.0).contains(&v) {
            return Err(DirError::Invalid(format!("AUC {v} outside [0, 1]")));
        }
    }
    Ok(())
}
