//! Single-file checkpoint format.
//!
//! Layout: 8 magic bytes, a little-endian u64 header length, a JSON header,
//! then one binary blob per table in header order. Each blob is a u64 scalar
//! count followed by that many little-endian f64 values. Everything needed to
//! rebuild the model is either in the header (config, attribute space, cells)
//! or derivable from it, so the table directory is fully checkable before any
//! float is read; any disagreement is a corruption error, never a guess.

use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::allocation::{Allocation, AttributeSpace, ExplicitAxisKind};
use crate::catalog::Catalog;
use crate::embedding::{AxisEmbedding, CategoryMode, CategoryTree, EmbeddingStore, VectorTable};
use crate::error::{DirError, Result};
use crate::lstm::RnnCell;
use crate::models::{Head, Model, ModelKind};
use crate::trainer::{TrainConfig, TrainedState};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"DIRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Upper bound on the JSON header, to reject garbage length prefixes before
/// allocating.
const MAX_HEADER_BYTES: u64 = 256 << 20;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
struct TableInfo {
    name: String,
    rows: u64,
    cols: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: TrainConfig,
    pub space: AttributeSpace,
    /// Tensor cell per item; empty for models without an allocation.
    pub cells: Vec<Vec<u32>>,
    pub catalog_fingerprint: u64,
    pub users: u64,
    pub items: u64,
    pub best_valid_auc: f64,
    pub epoch: u64,
    pub round: u64,
    /// Master RNG position when the state was captured; the seed lives in the
    /// config.
    pub rng_word_pos: String,
    tables: Vec<TableInfo>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DirError + '_ {
    move |source| DirError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn corrupt(msg: impl Into<String>) -> DirError {
    DirError::CorruptCheckpoint(msg.into())
}

/// Tables a model of this shape serializes, in file order.
fn table_plan(config: &TrainConfig, space: &AttributeSpace, users: u64, items: u64) -> Vec<TableInfo> {
    let d = config.resolved_dim() as u64;
    let kind = config.model;
    let mut plan = Vec::new();
    let push = |plan: &mut Vec<TableInfo>, name: String, rows: u64, cols: u64| {
        plan.push(TableInfo { name, rows, cols });
    };

    // The store's axis tables. Baseline BPR has no store; augmented models
    // embed only the explicit axes.
    let explicit = match kind {
        ModelKind::BprMf => &space.explicit_axes()[..0],
        _ => space.explicit_axes(),
    };
    for (i, ex) in explicit.iter().enumerate() {
        let hier = ex.kind == ExplicitAxisKind::Category
            && config.category_embedding == CategoryMode::Hierarchical;
        if hier {
            let nodes = CategoryTree::build(&ex.values).node_count() as u64;
            push(&mut plan, format!("axis/{i}/nodes"), nodes, d);
        } else {
            push(&mut plan, format!("axis/{i}"), ex.values.len() as u64, d);
        }
    }
    if kind.uses_allocation() {
        for m in 0..space.implicit_count() {
            let axis = space.explicit_count() + m;
            push(&mut plan, format!("axis/{axis}"), space.axis_size(axis) as u64, d);
        }
    }
    if kind == ModelKind::DirMf {
        push(&mut plan, "users".to_string(), users, d);
    }

    let wide = (1 + space.explicit_count()) as u64 * d;
    let gates = config.cell.gates() as u64;
    let rnn = |plan: &mut Vec<TableInfo>, input: u64, hidden: u64| {
        push(plan, "rnn/w_in".to_string(), gates * hidden, input);
        push(plan, "rnn/w_rec".to_string(), gates * hidden, hidden);
        push(plan, "rnn/bias".to_string(), 1, gates * hidden);
    };
    match kind {
        ModelKind::DirMf => {}
        ModelKind::DirRnn => rnn(&mut plan, space.axis_count() as u64 * d, d),
        ModelKind::BprMf => {
            push(&mut plan, "bpr/users".to_string(), users, d);
            push(&mut plan, "bpr/items".to_string(), items, d);
        }
        ModelKind::AugmentedMf => {
            push(&mut plan, "aug/users".to_string(), users, wide);
            push(&mut plan, "aug/items".to_string(), items, d);
        }
        ModelKind::AugmentedRnn => {
            push(&mut plan, "aug/items".to_string(), items, d);
            rnn(&mut plan, wide, wide);
        }
    }
    plan
}

/// The model's tables in the same order as `table_plan`.
fn collect_tables(model: &Model) -> Vec<(usize, usize, &[f64])> {
    let mut out = Vec::new();
    for axis in model.store.axes() {
        match axis {
            AxisEmbedding::Flat(t) => out.push((t.rows(), t.dim(), t.data())),
            AxisEmbedding::Tree { nodes, .. } => out.push((nodes.rows(), nodes.dim(), nodes.data())),
        }
    }
    if let Some(u) = model.store.users() {
        out.push((u.rows(), u.dim(), u.data()));
    }
    match &model.head {
        Head::DirMf => {}
        Head::DirRnn { cell } => out.extend(cell_tables(cell)),
        Head::BprMf { users, items } => {
            out.push((users.rows(), users.dim(), users.data()));
            out.push((items.rows(), items.dim(), items.data()));
        }
        Head::AugMf { users, items } => {
            out.push((users.rows(), users.dim(), users.data()));
            out.push((items.rows(), items.dim(), items.data()));
        }
        Head::AugRnn { items, cell } => {
            out.push((items.rows(), items.dim(), items.data()));
            out.extend(cell_tables(cell));
        }
    }
    out
}

fn cell_tables(cell: &RnnCell) -> [(usize, usize, &[f64]); 3] {
    let (w_in, w_rec, bias) = cell.tables();
    [
        (w_in.rows(), w_in.dim(), w_in.data()),
        (w_rec.rows(), w_rec.dim(), w_rec.data()),
        (1, bias.len(), bias),
    ]
}

pub fn save_checkpoint(
    path: &Path,
    state: &TrainedState,
    space: &AttributeSpace,
    config: &TrainConfig,
    catalog: &Catalog,
) -> Result<()> {
    let io = io_err(path);
    let users = catalog.user_count() as u64;
    let items = catalog.item_count() as u64;
    let plan = table_plan(config, space, users, items);
    let tables = collect_tables(&state.model);
    debug_assert_eq!(plan.len(), tables.len());
    for (info, &(rows, cols, _)) in plan.iter().zip(tables.iter()) {
        debug_assert_eq!(
            (info.rows, info.cols),
            (rows as u64, cols as u64),
            "table {} shape drifted from its plan",
            info.name
        );
    }

    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        space: space.clone(),
        cells: state
            .allocation
            .as_ref()
            .map(|a| a.cells().to_vec())
            .unwrap_or_default(),
        catalog_fingerprint: catalog.fingerprint(),
        users,
        items,
        best_valid_auc: state.valid_auc,
        epoch: state.epoch as u64,
        round: state.round as u64,
        rng_word_pos: state.rng_word_pos.to_string(),
        tables: plan,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| DirError::Invalid(format!("unserializable header: {e}")))?;

    let file = File::create(path).map_err(&io)?;
    let mut w = BufWriter::new(file);
    w.write_all(&CHECKPOINT_MAGIC).map_err(&io)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes()).map_err(&io)?;
    w.write_all(&header_json).map_err(&io)?;
    for (rows, cols, data) in tables {
        debug_assert_eq!(rows * cols, data.len());
        w.write_all(&(data.len() as u64).to_le_bytes()).map_err(&io)?;
        for &x in data {
            w.write_all(&x.to_le_bytes()).map_err(&io)?;
        }
    }
    w.flush().map_err(&io)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub header: CheckpointHeader,
    pub model: Model,
    pub allocation: Option<Allocation>,
}

impl LoadedCheckpoint {
    pub fn space(&self) -> &AttributeSpace {
        &self.header.space
    }

    /// The checkpoint only makes sense against the catalog it was trained on.
    pub fn verify_catalog(&self, catalog: &Catalog) -> Result<()> {
        let found = catalog.fingerprint();
        if found != self.header.catalog_fingerprint {
            return Err(DirError::CatalogMismatch {
                expected: self.header.catalog_fingerprint,
                found,
            });
        }
        Ok(())
    }
}

fn read_exact_or_corrupt<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            corrupt(format!("file ends inside {what}"))
        } else {
            corrupt(format!("{what}: {e}"))
        }
    })
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact_or_corrupt(r, &mut buf, what)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    read_exact_or_corrupt(&mut r, &mut magic, "magic bytes")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic bytes, not a checkpoint file"));
    }
    let header_len = read_u64(&mut r, "header length")?;
    if header_len > MAX_HEADER_BYTES {
        return Err(corrupt(format!("header length {header_len} is implausible")));
    }
    let mut header_bytes = vec![0u8; header_len as usize];
    read_exact_or_corrupt(&mut r, &mut header_bytes, "header")?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(DirError::CheckpointVersion {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    header.config.validate()?;

    let plan = table_plan(&header.config, &header.space, header.users, header.items);
    if plan != header.tables {
        return Err(corrupt(
            "table directory does not match the configured model shape",
        ));
    }

    let mut tables = Vec::with_capacity(plan.len());
    for info in &plan {
        let count = read_u64(&mut r, &format!("table {} count", info.name))?;
        if count != info.rows * info.cols {
            return Err(corrupt(format!(
                "table {} holds {count} scalars, expected {}",
                info.name,
                info.rows * info.cols
            )));
        }
        let mut data = Vec::with_capacity(count as usize);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            read_exact_or_corrupt(&mut r, &mut buf, &format!("table {}", info.name))?;
            let x = f64::from_le_bytes(buf);
            if !x.is_finite() {
                return Err(corrupt(format!("non-finite value in table {}", info.name)));
            }
            data.push(x);
        }
        tables.push(data);
    }
    let mut trailer = [0u8; 1];
    match r.read(&mut trailer) {
        Ok(0) => {}
        Ok(_) => return Err(corrupt("trailing bytes after the last table")),
        Err(e) => return Err(corrupt(format!("trailer check: {e}"))),
    }

    let model = rebuild_model(&header, &plan, tables)?;
    let allocation = if header.cells.is_empty() {
        if header.config.model.uses_allocation() {
            return Err(corrupt("factored model checkpoint carries no allocation"));
        }
        None
    } else {
        Some(Allocation::from_cells(header.cells.clone(), &header.space)?)
    };
    Ok(LoadedCheckpoint {
        header,
        model,
        allocation,
    })
}

fn rebuild_model(
    header: &CheckpointHeader,
    plan: &[TableInfo],
    tables: Vec<Vec<f64>>,
) -> Result<Model> {
    let config = &header.config;
    let space = &header.space;
    let d = config.resolved_dim();
    let kind = config.model;
    let mut queue: std::collections::VecDeque<(TableInfo, Vec<f64>)> =
        plan.iter().cloned().zip(tables).collect();
    fn next(
        queue: &mut std::collections::VecDeque<(TableInfo, Vec<f64>)>,
        prefix: &str,
    ) -> Result<(TableInfo, Vec<f64>)> {
        match queue.pop_front() {
            Some((info, data)) if info.name.starts_with(prefix) => Ok((info, data)),
            _ => Err(corrupt(format!("table {prefix} missing"))),
        }
    }

    let explicit = match kind {
        ModelKind::BprMf => &space.explicit_axes()[..0],
        _ => space.explicit_axes(),
    };
    let mut axes = Vec::new();
    for (i, ex) in explicit.iter().enumerate() {
        let hier = ex.kind == ExplicitAxisKind::Category
            && config.category_embedding == CategoryMode::Hierarchical;
        let (info, data) = next(&mut queue, &format!("axis/{i}"))?;
        if hier {
            let tree = CategoryTree::build(&ex.values);
            if tree.node_count() as u64 != info.rows {
                return Err(corrupt(format!("axis {i} node count mismatch")));
            }
            let mut axis = AxisEmbedding::Tree {
                tree,
                nodes: VectorTable::from_data(d, data)?,
                leaves: VectorTable::zeros(ex.values.len(), d),
            };
            axis.refresh_cache();
            axes.push(axis);
        } else {
            axes.push(AxisEmbedding::Flat(VectorTable::from_data(d, data)?));
        }
    }
    if kind.uses_allocation() {
        for m in 0..space.implicit_count() {
            let axis = space.explicit_count() + m;
            let (_, data) = next(&mut queue, &format!("axis/{axis}"))?;
            axes.push(AxisEmbedding::Flat(VectorTable::from_data(d, data)?));
        }
    }
    let users = if kind == ModelKind::DirMf {
        let (_, data) = next(&mut queue, "users")?;
        Some(VectorTable::from_data(d, data)?)
    } else {
        None
    };
    let store = EmbeddingStore::from_parts(d, axes, users, config.score_normalization);

    fn read_cell(
        queue: &mut std::collections::VecDeque<(TableInfo, Vec<f64>)>,
        config: &TrainConfig,
        input: usize,
        hidden: usize,
    ) -> Result<RnnCell> {
        let (_, w_in) = next(queue, "rnn/w_in")?;
        let (_, w_rec) = next(queue, "rnn/w_rec")?;
        let (_, bias) = next(queue, "rnn/bias")?;
        RnnCell::from_tables(
            config.cell,
            VectorTable::from_data(input, w_in)?,
            VectorTable::from_data(hidden, w_rec)?,
            bias,
        )
    }
    let wide = (1 + space.explicit_count()) * d;
    let head = match kind {
        ModelKind::DirMf => Head::DirMf,
        ModelKind::DirRnn => Head::DirRnn {
            cell: read_cell(&mut queue, config, space.axis_count() * d, d)?,
        },
        ModelKind::BprMf => {
            let (_, u) = next(&mut queue, "bpr/users")?;
            let (_, q) = next(&mut queue, "bpr/items")?;
            Head::BprMf {
                users: VectorTable::from_data(d, u)?,
                items: VectorTable::from_data(d, q)?,
            }
        }
        ModelKind::AugmentedMf => {
            let (_, u) = next(&mut queue, "aug/users")?;
            let (_, q) = next(&mut queue, "aug/items")?;
            Head::AugMf {
                users: VectorTable::from_data(wide, u)?,
                items: VectorTable::from_data(d, q)?,
            }
        }
        ModelKind::AugmentedRnn => {
            let (_, q) = next(&mut queue, "aug/items")?;
            Head::AugRnn {
                items: VectorTable::from_data(d, q)?,
                cell: read_cell(&mut queue, config, wide, wide)?,
            }
        }
    };
    if !queue.is_empty() {
        return Err(corrupt("unconsumed tables after rebuild"));
    }
    Ok(Model { kind, store, head })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::validation_auc;
    use crate::synthetic::{make_synthetic_catalog, SyntheticSpec};
    use crate::trainer::{build_space, learn_dir};
    use std::fs;

    fn catalog() -> Catalog {
        make_synthetic_catalog(&SyntheticSpec {
            num_users: 25,
            group_sizes: vec![4, 4],
            interactions_per_user: 8,
            beta: 3.0,
            ..SyntheticSpec::default()
        })
        .unwrap()
        .catalog
    }

    fn quick_config(model: ModelKind) -> TrainConfig {
        TrainConfig {
            model,
            dim: Some(4),
            max_epochs: 3,
            max_reallocations: 1,
            patience: 2,
            ..TrainConfig::default()
        }
    }

    fn round_trip(model: ModelKind) {
        let catalog = catalog();
        let config = quick_config(model);
        let out = learn_dir(&catalog, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.dirckpt");
        save_checkpoint(&path, &out.best, &out.space, &config, &catalog).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.model, out.best.model, "{model:?} params round trip");
        assert_eq!(loaded.allocation, out.best.allocation);
        assert_eq!(loaded.header.config, config);
        assert_eq!(loaded.header.best_valid_auc, out.best.valid_auc);
        loaded.verify_catalog(&catalog).unwrap();

        // Bit-exact model implies bit-exact evaluation.
        let before = validation_auc(
            &out.best.model,
            &catalog,
            &out.space,
            out.best.allocation.as_ref(),
            0,
            config.seed,
        )
        .unwrap();
        let after = validation_auc(
            &loaded.model,
            &catalog,
            loaded.space(),
            loaded.allocation.as_ref(),
            0,
            config.seed,
        )
        .unwrap();
        assert_eq!(before.auc, after.auc);
    }

    #[test]
    fn every_model_kind_round_trips() {
        for kind in [
            ModelKind::DirMf,
            ModelKind::DirRnn,
            ModelKind::BprMf,
            ModelKind::AugmentedMf,
            ModelKind::AugmentedRnn,
        ] {
            round_trip(kind);
        }
    }

    #[test]
    fn flat_category_mode_round_trips() {
        let catalog = catalog();
        let config = TrainConfig {
            category_embedding: CategoryMode::Flat,
            ..quick_config(ModelKind::DirMf)
        };
        let out = learn_dir(&catalog, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flat.dirckpt");
        save_checkpoint(&path, &out.best, &out.space, &config, &catalog).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.model, out.best.model);
    }

    #[test]
    fn double_save_is_byte_identical() {
        let catalog = catalog();
        let config = quick_config(ModelKind::DirMf);
        let out = learn_dir(&catalog, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.dirckpt");
        let b = dir.path().join("b.dirckpt");
        save_checkpoint(&a, &out.best, &out.space, &config, &catalog).unwrap();
        save_checkpoint(&b, &out.best, &out.space, &config, &catalog).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn scalar_count_matches_parameter_count() {
        let catalog = catalog();
        for kind in [
            ModelKind::DirMf,
            ModelKind::DirRnn,
            ModelKind::BprMf,
            ModelKind::AugmentedMf,
            ModelKind::AugmentedRnn,
        ] {
            let config = quick_config(kind);
            let out = learn_dir(&catalog, &config).unwrap();
            let plan = table_plan(
                &config,
                &out.space,
                catalog.user_count() as u64,
                catalog.item_count() as u64,
            );
            let scalars: u64 = plan.iter().map(|t| t.rows * t.cols).sum();
            assert_eq!(
                scalars,
                out.best.model.parameter_count() as u64,
                "{kind:?} serialized scalars"
            );
        }
    }

    #[test]
    fn version_bump_is_rejected() {
        let catalog = catalog();
        let config = quick_config(ModelKind::DirMf);
        let out = learn_dir(&catalog, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.dirckpt");
        save_checkpoint(&path, &out.best, &out.space, &config, &catalog).unwrap();

        // Patch the version field inside the JSON header.
        let bytes = fs::read(&path).unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        header["version"] = serde_json::json!(2);
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut patched = Vec::new();
        patched.extend_from_slice(&bytes[..8]);
        patched.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        patched.extend_from_slice(&new_header);
        patched.extend_from_slice(&bytes[16 + len..]);
        fs::write(&path, patched).unwrap();

        match load_checkpoint(&path) {
            Err(DirError::CheckpointVersion { found, expected }) => {
                assert_eq!((found, expected), (2, 1));
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn corruption_is_detected() {
        let catalog = catalog();
        let config = quick_config(ModelKind::DirMf);
        let out = learn_dir(&catalog, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.dirckpt");
        save_checkpoint(&path, &out.best, &out.space, &config, &catalog).unwrap();
        let bytes = fs::read(&path).unwrap();

        let bad_magic = dir.path().join("magic.dirckpt");
        let mut m = bytes.clone();
        m[0] ^= 0xff;
        fs::write(&bad_magic, m).unwrap();
        assert!(matches!(
            load_checkpoint(&bad_magic),
            Err(DirError::CorruptCheckpoint(_))
        ));

        let truncated = dir.path().join("trunc.dirckpt");
        fs::write(&truncated, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_checkpoint(&truncated),
            Err(DirError::CorruptCheckpoint(_))
        ));

        let extended = dir.path().join("extra.dirckpt");
        let mut e = bytes.clone();
        e.extend_from_slice(&[0u8; 4]);
        fs::write(&extended, e).unwrap();
        assert!(matches!(
            load_checkpoint(&extended),
            Err(DirError::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn foreign_catalog_is_rejected() {
        let catalog = catalog();
        let config = quick_config(ModelKind::DirMf);
        let out = learn_dir(&catalog, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.dirckpt");
        save_checkpoint(&path, &out.best, &out.space, &config, &catalog).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let other = make_synthetic_catalog(&SyntheticSpec {
            num_users: 25,
            group_sizes: vec![4, 4],
            interactions_per_user: 8,
            seed: 99,
            ..SyntheticSpec::default()
        })
        .unwrap()
        .catalog;
        assert!(matches!(
            loaded.verify_catalog(&other),
            Err(DirError::CatalogMismatch { .. })
        ));
    }

    #[test]
    fn baseline_checkpoints_carry_no_cells() {
        let catalog = catalog();
        let config = quick_config(ModelKind::BprMf);
        let out = learn_dir(&catalog, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.dirckpt");
        save_checkpoint(&path, &out.best, &out.space, &config, &catalog).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.header.cells.is_empty());
        assert!(loaded.allocation.is_none());
        let _ = build_space(&catalog, &config).unwrap();
    }
}
