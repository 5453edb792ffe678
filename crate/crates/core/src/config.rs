//! Flat `key = value` configuration files.
//!
//! One assignment per line, `#` starts a full-line comment, lists are
//! comma-separated and may be wrapped in square brackets. Every problem in a
//! file is reported in a single error rather than one at a time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::allocation::ExplicitAxisKind;
use crate::embedding::{CategoryMode, ScoreNormalization};
use crate::error::{DirError, Result};
use crate::lstm::CellKind;
use crate::models::ModelKind;
use crate::trainer::TrainConfig;

/// A parsed config file: the training parameters plus file-level extras.
#[derive(Debug, Clone, PartialEq)]
pub struct FileConfig {
    pub train: TrainConfig,
    /// Path of the ingested catalog artifact, if the file names one.
    pub catalog: Option<PathBuf>,
}

pub fn load_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| DirError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<FileConfig> {
    let mut errs = Vec::new();
    let mut pairs: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            errs.push(format!("line {}: expected `key = value`, got `{line}`", i + 1));
            continue;
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            errs.push(format!("line {}: empty key", i + 1));
            continue;
        }
        if let Some((first, _)) = pairs.get(key) {
            errs.push(format!(
                "line {}: key `{key}` already set on line {first}",
                i + 1
            ));
            continue;
        }
        pairs.insert(key, (i + 1, value));
    }

    let mut config = TrainConfig::default();
    let mut catalog = None;
    for (key, (line, value)) in &pairs {
        let mut fail = |msg: String| errs.push(format!("line {line}: {msg}"));
        match *key {
            "catalog" => catalog = Some(PathBuf::from(value)),
            "model" => match ModelKind::parse(value) {
                Some(kind) => config.model = kind,
                None => fail(format!(
                    "unknown model `{value}` (expected dir-mf, dir-rnn, bpr-mf, augmented-mf or augmented-rnn)"
                )),
            },
            "dim" => parse_num(value, "dim", &mut fail).map_or((), |v| config.dim = Some(v)),
            "learning_rate" => set_num(value, "learning_rate", &mut config.learning_rate, &mut fail),
            "lr_halving_epochs" => set_num(value, "lr_halving_epochs", &mut config.lr_halving_epochs, &mut fail),
            "patience" => set_num(value, "patience", &mut config.patience, &mut fail),
            "min_delta" => set_num(value, "min_delta", &mut config.min_delta, &mut fail),
            "max_reallocations" => set_num(value, "max_reallocations", &mut config.max_reallocations, &mut fail),
            "max_epochs" => set_num(value, "max_epochs", &mut config.max_epochs, &mut fail),
            "implicit_multiplier" => set_num(value, "implicit_multiplier", &mut config.implicit_multiplier, &mut fail),
            "implicit_axes" => set_num(value, "implicit_axes", &mut config.implicit_axes, &mut fail),
            "seed" => set_num(value, "seed", &mut config.seed, &mut fail),
            "weight_decay" => set_num(value, "weight_decay", &mut config.weight_decay, &mut fail),
            "bpr_l2" => set_num(value, "bpr_l2", &mut config.bpr_l2, &mut fail),
            "eval_negative_cap" => set_num(value, "eval_negative_cap", &mut config.eval_negative_cap, &mut fail),
            "explicit_axes" => match parse_axis_list(value) {
                Ok(axes) => config.explicit_axes = axes,
                Err(msg) => fail(msg),
            },
            "category_embedding" => match CategoryMode::parse(value) {
                Some(mode) => config.category_embedding = mode,
                None => fail(format!(
                    "unknown category_embedding `{value}` (expected hierarchical or flat)"
                )),
            },
            "score_normalization" => match ScoreNormalization::parse(value) {
                Some(norm) => config.score_normalization = norm,
                None => fail(format!(
                    "unknown score_normalization `{value}` (expected softmax or sigmoid)"
                )),
            },
            "cell" => match CellKind::parse(value) {
                Some(cell) => config.cell = cell,
                None => fail(format!("unknown cell `{value}` (expected lstm or vanilla)")),
            },
            other => fail(format!("unknown key `{other}`")),
        }
    }

    if let Err(DirError::Config(more)) = config.validate() {
        errs.extend(more);
    }
    if errs.is_empty() {
        Ok(FileConfig {
            train: config,
            catalog,
        })
    } else {
        Err(DirError::Config(errs))
    }
}

fn parse_num<T: std::str::FromStr>(
    value: &str,
    key: &str,
    fail: &mut impl FnMut(String),
) -> Option<T> {
    match value.parse::<T>() {
        Ok(v) => Some(v),
        Err(_) => {
            fail(format!(
                "{key}: `{value}` is not a valid {}",
                std::any::type_name::<T>()
            ));
            None
        }
    }
}

fn set_num<T: std::str::FromStr>(
    value: &str,
    key: &str,
    slot: &mut T,
    fail: &mut impl FnMut(String),
) {
    if let Some(v) = parse_num(value, key, fail) {
        *slot = v;
    }
}

fn parse_axis_list(value: &str) -> std::result::Result<Vec<ExplicitAxisKind>, String> {
    let inner = value
        .strip_prefix('[')
        .and_then(|v| v.strip_suffix(']'))
        .unwrap_or(value)
        .trim();
    if inner.is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|part| match part.trim() {
            "category" => Ok(ExplicitAxisKind::Category),
            "price" => Ok(ExplicitAxisKind::Price),
            other => Err(format!(
                "unknown explicit axis `{other}` (expected category or price)"
            )),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_defaults() {
        let parsed = parse_config("").unwrap();
        assert_eq!(parsed.train, TrainConfig::default());
        assert_eq!(parsed.catalog, None);
    }

    #[test]
    fn every_key_parses() {
        let text = "\
# training setup
catalog = out/catalog.json
model = dir-rnn
dim = 32
learning_rate = 0.5
lr_halving_epochs = 8
patience = 4
min_delta = 0.001

max_reallocations = 3
max_epochs = 50
implicit_multiplier = 1.8
implicit_axes = 2
explicit_axes = [category, price]
seed = 9
category_embedding = flat
score_normalization = sigmoid
weight_decay = 0.01
bpr_l2 = 0.02
cell = vanilla
eval_negative_cap = 200
";
        let parsed = parse_config(text).unwrap();
        assert_eq!(parsed.catalog, Some(PathBuf::from("out/catalog.json")));
        let t = parsed.train;
        assert_eq!(t.model, ModelKind::DirRnn);
        assert_eq!(t.dim, Some(32));
        assert_eq!(t.learning_rate, 0.5);
        assert_eq!(t.lr_halving_epochs, 8);
        assert_eq!(t.patience, 4);
        assert_eq!(t.min_delta, 0.001);
        assert_eq!(t.max_reallocations, 3);
        assert_eq!(t.max_epochs, 50);
        assert_eq!(t.implicit_multiplier, 1.8);
        assert_eq!(t.implicit_axes, 2);
        assert_eq!(
            t.explicit_axes,
            vec![ExplicitAxisKind::Category, ExplicitAxisKind::Price]
        );
        assert_eq!(t.seed, 9);
        assert_eq!(t.category_embedding, CategoryMode::Flat);
        assert_eq!(t.score_normalization, ScoreNormalization::Sigmoid);
        assert_eq!(t.weight_decay, 0.01);
        assert_eq!(t.bpr_l2, 0.02);
        assert_eq!(t.cell, CellKind::Vanilla);
        assert_eq!(t.eval_negative_cap, 200);
    }

    #[test]
    fn axis_lists_accept_both_spellings() {
        assert_eq!(parse_config("explicit_axes = []").unwrap().train.explicit_axes, vec![]);
        assert_eq!(parse_config("explicit_axes =").unwrap().train.explicit_axes, vec![]);
        assert_eq!(
            parse_config("explicit_axes = category,price").unwrap().train.explicit_axes,
            vec![ExplicitAxisKind::Category, ExplicitAxisKind::Price]
        );
        assert_eq!(
            parse_config("explicit_axes = [price]").unwrap().train.explicit_axes,
            vec![ExplicitAxisKind::Price]
        );
    }

    #[test]
    fn all_problems_are_reported_together() {
        let text = "\
model = svd++
learning_rate = fast
just a stray line
mystery_key = 1
";
        let err = parse_config(text).unwrap_err();
        let DirError::Config(errs) = err else {
            panic!("expected a config error")
        };
        assert_eq!(errs.len(), 4, "{errs:?}");
        assert!(errs[0].contains("stray line"), "{errs:?}");
        assert!(errs.iter().any(|e| e.contains("svd++")));
        assert!(errs.iter().any(|e| e.contains("learning_rate")));
        assert!(errs.iter().any(|e| e.contains("mystery_key")));
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let err = parse_config("seed = 1\nseed = 2\n").unwrap_err();
        assert!(err.to_string().contains("already set on line 1"));
    }

    #[test]
    fn semantic_validation_is_folded_in() {
        let err = parse_config("learning_rate = -3\n").unwrap_err();
        assert!(err.to_string().contains("must be positive"));
    }

    #[test]
    fn line_numbers_point_at_the_offender() {
        let err = parse_config("\n\nmodel = nope\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = load_config(Path::new("/nonexistent/rec.conf")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/rec.conf"));
    }
}
