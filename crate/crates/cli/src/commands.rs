//! The five workflows behind the subcommands. Each one reads its inputs,
//! writes artifacts under the chosen output directory, and prints a JSON
//! summary to stdout. Input files are never modified.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use dirrec_core::allocation::{reallocate, Allocation, AttributeSpace};
use dirrec_core::catalog::{ingest, Catalog, IngestOptions};
use dirrec_core::checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint};
use dirrec_core::error::{DirError, Result};
use dirrec_core::evaluation::{
    attribute_level_ranking, check_report_ranges, evaluate_model, EvalPhase, EvalSettings,
};
use dirrec_core::models::{Head, Model, ModelKind};
use dirrec_core::trainer::{learn_dir, TrainedState};

use crate::config::FileConfig;

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| DirError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn usage(msg: impl Into<String>) -> DirError {
    DirError::Config(vec![msg.into()])
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable value")
}

/// Quotes a CSV field only when it needs it.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn cmd_ingest(
    interactions: &Path,
    items: &Path,
    sample_users: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let options = IngestOptions {
        sample_users,
        seed: seed.unwrap_or(0),
    };
    let catalog = ingest(interactions, items, &options)?;
    let summary = catalog.summary();

    let catalog_path = out.join("catalog.dircat");
    catalog.save(&catalog_path)?;
    write_text(&out.join("catalog_summary.json"), &to_json(&summary))?;

    log::info!("catalog written to {}", catalog_path.display());
    println!("{}", to_json(&summary));
    Ok(())
}

pub fn cmd_train(
    file_config: FileConfig,
    catalog_flag: Option<PathBuf>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let mut config = file_config.train;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    // Surface every semantic violation before touching the catalog, so a bad
    // config is reported in full even when the catalog key is missing too.
    config.validate()?;
    let catalog_path = catalog_flag
        .or(file_config.catalog)
        .ok_or_else(|| usage("train needs a catalog: pass --catalog PATH or set `catalog = PATH` in the config"))?;
    let catalog = Catalog::load(&catalog_path)?;

    let outcome = learn_dir(&catalog, &config)?;

    let best_path = out.join("checkpoint_best.dirckpt");
    let final_path = out.join("checkpoint_final.dirckpt");
    save_checkpoint(&best_path, &outcome.best, &outcome.space, &config, &catalog)?;
    save_checkpoint(&final_path, &outcome.last, &outcome.space, &config, &catalog)?;

    let mut telemetry = String::new();
    for record in &outcome.telemetry {
        telemetry.push_str(&serde_json::to_string(record).expect("epoch record"));
        telemetry.push('\n');
    }
    write_text(&out.join("telemetry.jsonl"), &telemetry)?;

    let mut rounds = String::new();
    for record in &outcome.reallocations {
        rounds.push_str(&serde_json::to_string(record).expect("realloc record"));
        rounds.push('\n');
    }
    write_text(&out.join("reallocations.jsonl"), &rounds)?;

    println!(
        "{}",
        to_json(&serde_json::json!({
            "model": config.model.as_str(),
            "epochs_run": outcome.telemetry.len(),
            "reallocations": outcome.reallocations.len(),
            "best": {
                "valid_auc": outcome.best.valid_auc,
                "epoch": outcome.best.epoch,
                "round": outcome.best.round,
            },
            "artifacts": {
                "checkpoint_best": best_path,
                "checkpoint_final": final_path,
                "telemetry": out.join("telemetry.jsonl"),
                "reallocations": out.join("reallocations.jsonl"),
            },
        }))
    );
    Ok(())
}

/// Loads a checkpoint and the catalog it was trained on, verifying the pair.
fn load_pair(checkpoint: &Path, catalog: &Path) -> Result<(LoadedCheckpoint, Catalog)> {
    let loaded = load_checkpoint(checkpoint)?;
    let catalog = Catalog::load(catalog)?;
    loaded.verify_catalog(&catalog)?;
    Ok((loaded, catalog))
}

fn parse_phase(phase: &str) -> Result<EvalPhase> {
    EvalPhase::parse(phase)
        .ok_or_else(|| usage(format!("--phase: expected test | validation, got `{phase}`")))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_evaluate(
    checkpoint: &Path,
    catalog_path: &Path,
    phase: &str,
    warm: bool,
    cold: bool,
    sweep: bool,
    negative_cap: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let phase = parse_phase(phase)?;
    let (loaded, catalog) = load_pair(checkpoint, catalog_path)?;
    let settings = EvalSettings {
        phase,
        sweep,
        negative_cap: negative_cap.unwrap_or(loaded.header.config.eval_negative_cap),
        seed: seed.unwrap_or(loaded.header.config.seed),
    };
    let report = evaluate_model(
        &loaded.model,
        &catalog,
        loaded.space(),
        loaded.allocation.as_ref(),
        &settings,
    )?;
    check_report_ranges(&report)?;

    let mut json = serde_json::to_value(&report).expect("report");
    if report.cold_users == 0 {
        json["cold_note"] = serde_json::Value::String(format!(
            "no cold items among the {phase:?} positives; cold_auc is undefined, not 0"
        ));
    }
    write_text(&out.join("eval_report.json"), &to_json(&json))?;

    if sweep {
        let mut csv = String::from("fraction,auc\n");
        for point in report.auc_by_cold_fraction.as_deref().unwrap_or(&[]) {
            csv.push_str(&format!("{},{}\n", point.fraction, point.auc));
        }
        write_text(&out.join("cold_sweep.csv"), &csv)?;
    }

    // --warm / --cold narrow what lands on stdout; the report file always
    // holds everything.
    if warm || cold {
        let mut selection = serde_json::Map::new();
        if warm {
            selection.insert("warm_auc".into(), json["warm_auc"].clone());
            selection.insert("warm_users".into(), json["warm_users"].clone());
        }
        if cold {
            selection.insert("cold_auc".into(), json["cold_auc"].clone());
            selection.insert("cold_users".into(), json["cold_users"].clone());
            if let Some(note) = json.get("cold_note") {
                selection.insert("cold_note".into(), note.clone());
            }
        }
        println!("{}", to_json(&selection));
    } else {
        println!("{}", to_json(&json));
    }
    Ok(())
}

pub fn cmd_reallocate(checkpoint: &Path, catalog_path: &Path, out: &Path) -> Result<()> {
    let (loaded, catalog) = load_pair(checkpoint, catalog_path)?;
    let model = loaded.model;
    let space = loaded.header.space.clone();
    let config = loaded.header.config.clone();
    let mut alloc = loaded.allocation.ok_or_else(|| {
        DirError::Invalid(format!(
            "`{}` checkpoints carry no allocation to recompute",
            config.model.as_str()
        ))
    })?;

    let loss_before = model.train_loss(&catalog, Some(&alloc))?;
    let mut moved = 0usize;
    let mut weight_before = 0.0;
    let mut weight_after = 0.0;
    for axis in space.explicit_count()..space.axis_count() {
        let rows = model.implicit_weight_rows(&catalog, &space, &alloc, axis)?;
        let (next, stats) = reallocate(&alloc, &rows, &space, axis)?;
        moved += stats.moved;
        weight_before += stats.weight_before;
        weight_after += stats.weight_after;
        alloc = next;
    }
    let loss_after = model.train_loss(&catalog, Some(&alloc))?;
    if config.model == ModelKind::DirMf && loss_after > loss_before + 1e-6 {
        return Err(DirError::Invalid(format!(
            "reallocation raised the training loss from {loss_before} to {loss_after}"
        )));
    }

    let state = TrainedState {
        model,
        allocation: Some(alloc),
        valid_auc: loaded.header.best_valid_auc,
        epoch: loaded.header.epoch as usize,
        round: loaded.header.round as usize + 1,
        rng_word_pos: loaded.header.rng_word_pos.parse().map_err(|_| {
            DirError::CorruptCheckpoint(format!(
                "rng position `{}` is not an integer",
                loaded.header.rng_word_pos
            ))
        })?,
    };
    let path = out.join("checkpoint_realloc.dirckpt");
    save_checkpoint(&path, &state, &space, &config, &catalog)?;

    println!(
        "{}",
        to_json(&serde_json::json!({
            "moved": moved,
            "weight_before": weight_before,
            "weight_after": weight_after,
            "loss_before": loss_before,
            "loss_after": loss_after,
            "checkpoint": path,
        }))
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ExportTarget {
    Embeddings,
    Allocation,
    Rankings,
}

pub fn cmd_export(
    checkpoint: &Path,
    catalog_path: &Path,
    what: ExportTarget,
    users: Option<String>,
    top_k: usize,
    phase: &str,
    out: &Path,
) -> Result<()> {
    let (loaded, catalog) = load_pair(checkpoint, catalog_path)?;
    match what {
        ExportTarget::Embeddings => {
            let path = out.join("embeddings.csv");
            write_text(&path, &embeddings_csv(&loaded.model, loaded.space(), &catalog))?;
            println!("{}", to_json(&serde_json::json!({ "embeddings": path })));
        }
        ExportTarget::Allocation => {
            let alloc = loaded.allocation.as_ref().ok_or_else(|| {
                DirError::Invalid("this checkpoint has no allocation to export".into())
            })?;
            let path = out.join("allocation.csv");
            write_text(&path, &allocation_csv(alloc, loaded.space(), &catalog)?)?;
            println!("{}", to_json(&serde_json::json!({ "allocation": path })));
        }
        ExportTarget::Rankings => {
            let users = users
                .ok_or_else(|| usage("rankings export needs --users with comma-separated user ids"))?;
            if top_k == 0 {
                return Err(usage("--top-k must be positive"));
            }
            let phase = parse_phase(phase)?;
            let path = out.join("rankings.csv");
            let csv = rankings_csv(&loaded, &catalog, &users, top_k, phase)?;
            write_text(&path, &csv)?;
            println!("{}", to_json(&serde_json::json!({ "rankings": path })));
        }
    }
    Ok(())
}

/// One row per attribute value (and per user/item vector where the model has
/// them): `axis,attribute_id,v_0,…,v_{d-1}`. Augmented user contexts are
/// wider than the shared dimension and are not part of this export.
fn embeddings_csv(model: &Model, space: &AttributeSpace, catalog: &Catalog) -> String {
    let d = model.store.dim();
    let mut csv = String::from("axis,attribute_id");
    for i in 0..d {
        csv.push_str(&format!(",v_{i}"));
    }
    csv.push('\n');
    let mut row = |axis: &str, id: &str, vector: &[f64]| {
        csv.push_str(&csv_field(axis));
        csv.push(',');
        csv.push_str(&csv_field(id));
        for x in vector {
            csv.push_str(&format!(",{x}"));
        }
        csv.push('\n');
    };

    for (axis, emb) in model.store.axes().iter().enumerate() {
        let name = space.axis_name(axis);
        for v in 0..emb.value_count() as u32 {
            row(&name, &space.axis_value_label(axis, v), emb.value_vector(v));
        }
    }
    if let Some(users) = model.store.users() {
        for u in 0..users.rows() as u32 {
            row("user", catalog.user_id(u), users.row(u));
        }
    }
    match &model.head {
        Head::BprMf { users, items } => {
            for u in 0..users.rows() as u32 {
                row("user", catalog.user_id(u), users.row(u));
            }
            for q in 0..items.rows() as u32 {
                row("item", &catalog.item(q).id, items.row(q));
            }
        }
        Head::AugMf { items, .. } | Head::AugRnn { items, .. } => {
            for q in 0..items.rows() as u32 {
                row("item", &catalog.item(q).id, items.row(q));
            }
        }
        Head::DirMf | Head::DirRnn { .. } => {}
    }
    csv
}

/// One row per item: its cell coordinates, one column per axis.
fn allocation_csv(alloc: &Allocation, space: &AttributeSpace, catalog: &Catalog) -> Result<String> {
    let mut csv = String::from("item_id");
    for axis in 0..space.axis_count() {
        csv.push_str(&format!(",{}", space.axis_name(axis)));
    }
    csv.push('\n');
    for q in 0..alloc.item_count() as u32 {
        csv.push_str(&csv_field(&catalog.item(q).id));
        for &v in alloc.coords(q)? {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    Ok(csv)
}

/// Top-K lists per requested user: ranked by the explicit axes alone, the
/// implicit axes alone, and the full product score, over items outside the
/// user's training history.
fn rankings_csv(
    loaded: &LoadedCheckpoint,
    catalog: &Catalog,
    users: &str,
    top_k: usize,
    phase: EvalPhase,
) -> Result<String> {
    let space = loaded.space();
    let alloc = loaded.allocation.as_ref().ok_or_else(|| {
        DirError::Invalid("rankings need a factored checkpoint with an allocation".into())
    })?;
    let mut csv = String::from("user_id,list,rank,item_id,axis_breakdown\n");
    for id in users.split(',') {
        let id = id.trim();
        let user = catalog
            .find_user(id)
            .map_err(|_| usage(format!("--users: unknown user id `{id}`")))?;
        let seen: HashSet<u32> = catalog.train_sequence(user).iter().map(|e| e.item).collect();
        let candidates: Vec<u32> =
            (0..catalog.item_count() as u32).filter(|q| !seen.contains(q)).collect();
        let scores = loaded.model.user_axis_scores(catalog, Some(alloc), user, phase)?;
        let lists = attribute_level_ranking(&scores, space, alloc, &candidates, top_k)?;
        for (label, list) in [
            ("explicit", &lists.explicit),
            ("implicit", &lists.implicit),
            ("product", &lists.product),
        ] {
            for (i, &(q, _)) in list.iter().enumerate() {
                let breakdown: Vec<String> = alloc
                    .coords(q)?
                    .iter()
                    .enumerate()
                    .map(|(axis, &v)| {
                        format!("{}={:.6}", space.axis_name(axis), scores[axis].probs[v as usize])
                    })
                    .collect();
                csv.push_str(&format!(
                    "{},{label},{},{},{}\n",
                    csv_field(id),
                    i + 1,
                    csv_field(&catalog.item(q).id),
                    csv_field(&breakdown.join("|")),
                ));
            }
        }
    }
    Ok(csv)
}
