//! Alternating training loop: gradient E-steps until the validation AUC
//! plateaus, then a matching-based R-step, repeated until a full round stops
//! improving or the reallocation budget runs out.
//!
//! The learning-rate schedule is global: it keys on the total epoch counter
//! and keeps decaying across reallocations rather than resetting. Baseline
//! models take a single E-step and never reallocate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::allocation::{random_allocation, reallocate, Allocation, AttributeSpace, ExplicitAxisKind};
use crate::catalog::Catalog;
use crate::embedding::{learning_rate, CategoryMode, ScoreNormalization};
use crate::error::{DirError, Result};
use crate::evaluation::validation_auc;
use crate::lstm::CellKind;
use crate::models::{EpochParams, Model, ModelKind};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    /// Vector width; `None` picks the model's default.
    pub dim: Option<usize>,
    pub learning_rate: f64,
    /// Epochs per halving of the learning rate.
    pub lr_halving_epochs: usize,
    /// Consecutive non-improving epochs tolerated before the E-step ends.
    pub patience: usize,
    /// Validation AUC must rise by more than this to count as improvement.
    pub min_delta: f64,
    pub max_reallocations: usize,
    /// Hard cap on total epochs across all rounds.
    pub max_epochs: usize,
    pub implicit_multiplier: f64,
    pub implicit_axes: usize,
    pub explicit_axes: Vec<ExplicitAxisKind>,
    pub seed: u64,
    pub category_embedding: CategoryMode,
    pub score_normalization: ScoreNormalization,
    pub weight_decay: f64,
    pub bpr_l2: f64,
    pub cell: CellKind,
    /// Negatives sampled per user during evaluation; 0 means all of them.
    pub eval_negative_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::DirMf,
            dim: None,
            learning_rate: 1.0,
            lr_halving_epochs: 10,
            patience: 3,
            min_delta: 1e-4,
            max_reallocations: 5,
            max_epochs: 200,
            implicit_multiplier: 1.0,
            implicit_axes: 1,
            explicit_axes: vec![ExplicitAxisKind::Category],
            seed: 42,
            category_embedding: CategoryMode::Hierarchical,
            score_normalization: ScoreNormalization::Softmax,
            weight_decay: 0.0,
            bpr_l2: 0.01,
            cell: CellKind::Lstm,
            eval_negative_cap: 0,
        }
    }
}

impl TrainConfig {
    pub fn resolved_dim(&self) -> usize {
        self.dim.unwrap_or_else(|| self.model.default_dim())
    }

    /// Checks every field and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if let Some(d) = self.dim {
            if d == 0 {
                errs.push("dim must be positive".to_string());
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            errs.push(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.lr_halving_epochs == 0 {
            errs.push("lr_halving_epochs must be positive".to_string());
        }
        if self.patience == 0 {
            errs.push("patience must be positive".to_string());
        }
        if !(self.min_delta.is_finite() && self.min_delta >= 0.0) {
            errs.push(format!("min_delta {} must be non-negative", self.min_delta));
        }
        if self.max_epochs == 0 {
            errs.push("max_epochs must be positive".to_string());
        }
        if !(self.implicit_multiplier.is_finite() && self.implicit_multiplier >= 1.0) {
            errs.push(format!(
                "implicit_multiplier {} must be at least 1",
                self.implicit_multiplier
            ));
        }
        if self.model.uses_allocation() && !(1..=2).contains(&self.implicit_axes) {
            errs.push(format!(
                "implicit_axes {} must be 1 or 2",
                self.implicit_axes
            ));
        }
        for (i, kind) in self.explicit_axes.iter().enumerate() {
            if self.explicit_axes[..i].contains(kind) {
                errs.push(format!("explicit axis `{}` listed twice", kind.name()));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            errs.push(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(self.bpr_l2.is_finite() && self.bpr_l2 >= 0.0) {
            errs.push(format!("bpr_l2 {} must be non-negative", self.bpr_l2));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(DirError::Config(errs))
        }
    }
}

/// Attribute layout a config implies for a catalog. Baselines carry no
/// implicit axes; their stores only ever see the explicit ones.
pub fn build_space(catalog: &Catalog, config: &TrainConfig) -> Result<AttributeSpace> {
    let implicit = if config.model.uses_allocation() {
        config.implicit_axes
    } else {
        0
    };
    AttributeSpace::build(
        catalog,
        &config.explicit_axes,
        implicit,
        config.implicit_multiplier,
    )
}

/// One telemetry line per epoch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Reallocation rounds completed when this epoch ran.
    pub round: usize,
    pub train_loss: f64,
    pub valid_auc: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// One record per R-step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ReallocRecord {
    /// 1-based round number of this R-step.
    pub round: usize,
    pub moved: usize,
    pub weight_before: f64,
    pub weight_after: f64,
    pub j_before: f64,
    pub j_after: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedState {
    pub model: Model,
    pub allocation: Option<Allocation>,
    pub valid_auc: f64,
    pub epoch: usize,
    pub round: usize,
    /// Master RNG position when this state was captured.
    pub rng_word_pos: u128,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: TrainedState,
    pub last: TrainedState,
    pub space: AttributeSpace,
    pub telemetry: Vec<EpochRecord>,
    pub reallocations: Vec<ReallocRecord>,
}

pub fn learn_dir(catalog: &Catalog, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let space = build_space(catalog, config)?;

    let mut alloc = if config.model.uses_allocation() {
        let alloc_seed: u64 = rng.gen();
        Some(random_allocation(catalog, &space, alloc_seed)?)
    } else {
        None
    };
    let mut model = Model::init(
        config.model,
        catalog,
        &space,
        config.resolved_dim(),
        config.category_embedding,
        config.score_normalization,
        config.cell,
        &mut rng,
    );

    let mut telemetry: Vec<EpochRecord> = Vec::new();
    let mut reallocations: Vec<ReallocRecord> = Vec::new();
    let mut best: Option<TrainedState> = None;
    let mut best_auc = f64::NEG_INFINITY;
    let mut epoch = 0usize;
    let mut round = 0usize;
    let mut last_auc = f64::NAN;

    loop {
        let round_start_best = best_auc;

        // E-step: SGD epochs until the validation AUC stalls.
        let mut stall = 0usize;
        while epoch < config.max_epochs {
            let lr = learning_rate(config.learning_rate, epoch, config.lr_halving_epochs);
            let params = EpochParams {
                lr,
                weight_decay: config.weight_decay,
                bpr_l2: config.bpr_l2,
            };
            let start = Instant::now();
            let train_loss = model
                .train_epoch(catalog, &space, alloc.as_ref(), params, &mut rng)
                .map_err(|e| {
                    DirError::Invalid(format!(
                        "training aborted at epoch {epoch}, round {round}: {e}"
                    ))
                })?;
            let summary = validation_auc(
                &model,
                catalog,
                &space,
                alloc.as_ref(),
                config.eval_negative_cap,
                config.seed,
            )?;
            let valid_auc = summary.auc.ok_or_else(|| {
                DirError::Invalid("validation produced no evaluable users".into())
            })?;
            telemetry.push(EpochRecord {
                epoch,
                round,
                train_loss,
                valid_auc,
                lr,
                wall_ms: start.elapsed().as_millis() as u64,
            });
            last_auc = valid_auc;
            if valid_auc > best_auc + config.min_delta {
                best_auc = valid_auc;
                best = Some(TrainedState {
                    model: model.clone(),
                    allocation: alloc.clone(),
                    valid_auc,
                    epoch,
                    round,
                    rng_word_pos: rng.get_word_pos(),
                });
                stall = 0;
            } else {
                stall += 1;
                if stall >= config.patience {
                    epoch += 1;
                    break;
                }
            }
            epoch += 1;
        }

        if epoch >= config.max_epochs {
            log::info!("stopping: epoch budget {} exhausted", config.max_epochs);
            break;
        }
        if best_auc <= round_start_best + config.min_delta {
            log::info!("stopping: round {round} did not improve validation AUC");
            break;
        }
        if !config.model.uses_allocation() {
            break;
        }
        if round >= config.max_reallocations {
            log::info!("stopping: reallocation budget {} exhausted", config.max_reallocations);
            break;
        }

        // R-step: reallocate each implicit axis in turn. Weight rows are
        // recomputed per axis because recurrent contexts shift with the
        // allocation.
        let j_before = model.train_loss(catalog, alloc.as_ref())?;
        let mut moved = 0usize;
        let mut weight_before = 0.0;
        let mut weight_after = 0.0;
        for axis in space.explicit_count()..space.axis_count() {
            let current = alloc.as_ref().expect("allocation present for factored models");
            let rows = model.implicit_weight_rows(catalog, &space, current, axis)?;
            let (next, stats) = reallocate(current, &rows, &space, axis)?;
            moved += stats.moved;
            weight_before += stats.weight_before;
            weight_after += stats.weight_after;
            alloc = Some(next);
        }
        let j_after = model.train_loss(catalog, alloc.as_ref())?;
        if config.model == ModelKind::DirMf && j_after > j_before + 1e-6 {
            return Err(DirError::Invalid(format!(
                "reallocation raised the training loss from {j_before} to {j_after}"
            )));
        }
        round += 1;
        reallocations.push(ReallocRecord {
            round,
            moved,
            weight_before,
            weight_after,
            j_before,
            j_after,
        });
        log::info!(
            "round {round}: moved {moved} items, matching weight {weight_before:.4} -> {weight_after:.4}"
        );
    }

    let best = best.ok_or_else(|| DirError::Invalid("no epoch completed".into()))?;
    let last = TrainedState {
        model,
        allocation: alloc,
        valid_auc: last_auc,
        epoch: epoch.saturating_sub(1),
        round,
        rng_word_pos: rng.get_word_pos(),
    };
    Ok(TrainOutcome {
        best,
        last,
        space,
        telemetry,
        reallocations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::learning_rate;
    use crate::synthetic::{make_synthetic_catalog, SyntheticSpec};

    fn planted_catalog() -> Catalog {
        make_synthetic_catalog(&SyntheticSpec {
            num_users: 50,
            group_sizes: vec![5, 5, 5],
            interactions_per_user: 12,
            beta: 4.0,
            ..SyntheticSpec::default()
        })
        .unwrap()
        .catalog
    }

    fn fast_config(model: ModelKind) -> TrainConfig {
        TrainConfig {
            model,
            dim: Some(6),
            learning_rate: 0.1,
            max_epochs: 12,
            max_reallocations: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn validation_collects_every_error() {
        let config = TrainConfig {
            learning_rate: -1.0,
            patience: 0,
            implicit_multiplier: 0.5,
            explicit_axes: vec![ExplicitAxisKind::Category, ExplicitAxisKind::Category],
            ..TrainConfig::default()
        };
        let err = config.validate().unwrap_err();
        let msg = err.to_string();
        for needle in ["learning_rate", "patience", "implicit_multiplier", "listed twice"] {
            assert!(msg.contains(needle), "missing {needle} in {msg}");
        }
    }

    #[test]
    fn default_config_is_valid() {
        TrainConfig::default().validate().unwrap();
        assert_eq!(TrainConfig::default().resolved_dim(), 50);
        assert_eq!(fast_config(ModelKind::DirRnn).resolved_dim(), 6);
    }

    #[test]
    fn identical_seeds_reproduce_the_run() {
        let catalog = planted_catalog();
        let config = fast_config(ModelKind::DirMf);
        let a = learn_dir(&catalog, &config).unwrap();
        let b = learn_dir(&catalog, &config).unwrap();
        assert_eq!(a.telemetry.len(), b.telemetry.len());
        for (x, y) in a.telemetry.iter().zip(b.telemetry.iter()) {
            assert_eq!(
                (x.epoch, x.round, x.train_loss, x.valid_auc, x.lr),
                (y.epoch, y.round, y.train_loss, y.valid_auc, y.lr)
            );
        }
        assert_eq!(a.best.model, b.best.model);
        assert_eq!(a.last.model, b.last.model);
        assert_eq!(a.best.allocation, b.best.allocation);
        assert_eq!(a.reallocations, b.reallocations);
    }

    #[test]
    fn baseline_takes_one_round_and_never_reallocates() {
        let catalog = planted_catalog();
        let config = TrainConfig {
            max_epochs: 5,
            ..fast_config(ModelKind::BprMf)
        };
        let out = learn_dir(&catalog, &config).unwrap();
        assert!(!out.telemetry.is_empty());
        assert!(out.reallocations.is_empty());
        assert!(out.best.allocation.is_none());
        assert!(out.telemetry.iter().all(|r| r.round == 0));
    }

    #[test]
    fn telemetry_follows_the_global_lr_schedule() {
        let catalog = planted_catalog();
        let out = learn_dir(&catalog, &fast_config(ModelKind::DirMf)).unwrap();
        for (i, rec) in out.telemetry.iter().enumerate() {
            assert_eq!(rec.epoch, i, "epochs are the global counter");
            assert_eq!(rec.lr, learning_rate(0.1, rec.epoch, 10));
        }
        // Rounds only ever step up, and each R-step bumps them by one.
        for pair in out.telemetry.windows(2) {
            assert!(pair[1].round == pair[0].round || pair[1].round == pair[0].round + 1);
        }
        let max_round = out.telemetry.iter().map(|r| r.round).max().unwrap();
        assert_eq!(max_round, out.reallocations.len());
    }

    #[test]
    fn best_tracks_the_peak_validation_auc() {
        let catalog = planted_catalog();
        let config = fast_config(ModelKind::DirMf);
        let out = learn_dir(&catalog, &config).unwrap();
        let peak = out
            .telemetry
            .iter()
            .map(|r| r.valid_auc)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(out.best.valid_auc <= peak);
        assert!(out.best.valid_auc >= peak - config.min_delta - 1e-12);
        let recorded = out
            .telemetry
            .iter()
            .find(|r| r.epoch == out.best.epoch)
            .unwrap();
        assert_eq!(recorded.valid_auc, out.best.valid_auc);
    }

    #[test]
    fn zero_reallocation_budget_means_pure_sgd() {
        let catalog = planted_catalog();
        let config = TrainConfig {
            max_reallocations: 0,
            ..fast_config(ModelKind::DirMf)
        };
        let out = learn_dir(&catalog, &config).unwrap();
        assert!(out.reallocations.is_empty());
        assert!(out.telemetry.iter().all(|r| r.round == 0));
        assert!(out.best.allocation.is_some());
    }

    #[test]
    fn reallocation_never_raises_the_factored_mf_loss() {
        let catalog = planted_catalog();
        let config = TrainConfig {
            max_epochs: 20,
            max_reallocations: 3,
            ..fast_config(ModelKind::DirMf)
        };
        let out = learn_dir(&catalog, &config).unwrap();
        assert!(!out.reallocations.is_empty(), "expected at least one R-step");
        for rec in &out.reallocations {
            assert!(
                rec.weight_after >= rec.weight_before - 1e-9,
                "matching weight fell: {rec:?}"
            );
            assert!(rec.j_after <= rec.j_before + 1e-6, "loss rose: {rec:?}");
        }
    }

    #[test]
    fn training_lifts_validation_auc_on_planted_data() {
        let catalog = planted_catalog();
        let config = TrainConfig {
            max_epochs: 25,
            ..fast_config(ModelKind::DirMf)
        };
        let out = learn_dir(&catalog, &config).unwrap();
        let first = out.telemetry.first().unwrap().valid_auc;
        assert!(
            out.best.valid_auc > first.max(0.55),
            "best {} vs first {first}",
            out.best.valid_auc
        );
    }

    #[test]
    fn invalid_config_is_rejected_up_front() {
        let catalog = planted_catalog();
        let config = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            learn_dir(&catalog, &config),
            Err(DirError::Config(_))
        ));
    }
}

