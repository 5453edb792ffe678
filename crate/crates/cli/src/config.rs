//! Flat `key = value` config files. One assignment per line, `#` starts a
//! comment, lists are comma-separated. Every malformed line is reported, not
//! just the first.

use std::path::{Path, PathBuf};

use dirrec_core::allocation::ExplicitAxisKind;
use dirrec_core::embedding::{CategoryMode, ScoreNormalization};
use dirrec_core::error::{DirError, Result};
use dirrec_core::lstm::CellKind;
use dirrec_core::models::ModelKind;
use dirrec_core::trainer::TrainConfig;

/// A parsed config file: training hyperparameters plus the file-level keys
/// that point at artifacts rather than tuning the run.
#[derive(Debug, Clone)]
pub struct FileConfig {
    pub train: TrainConfig,
    /// Serialized catalog to train on (`catalog = PATH`).
    pub catalog: Option<PathBuf>,
}

pub fn load_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| DirError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text, &path.display().to_string())
}

fn parse_config(text: &str, origin: &str) -> Result<FileConfig> {
    let mut train = TrainConfig::default();
    let mut catalog = None;
    let mut errs = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = lineno + 1;
        let Some((key, value)) = line.split_once('=') else {
            errs.push(format!("{origin}:{lineno}: expected `key = value`, got `{line}`"));
            continue;
        };
        let key = key.trim();
        let value = value.trim();
        let mut bad = |what: &str| {
            errs.push(format!("{origin}:{lineno}: {key}: {what} (got `{value}`)"));
        };
        match key {
            "catalog" => catalog = Some(PathBuf::from(value)),
            "model" => match ModelKind::parse(value) {
                Some(m) => train.model = m,
                None => bad("expected dir-mf | dir-rnn | bpr-mf | augmented-mf | augmented-rnn"),
            },
            "dim" => match value.parse() {
                Ok(d) => train.dim = Some(d),
                Err(_) => bad("expected a positive integer"),
            },
            "learning_rate" => parse_f64(value, &mut train.learning_rate, &mut bad),
            "lr_halving_epochs" => parse_usize(value, &mut train.lr_halving_epochs, &mut bad),
            "patience" => parse_usize(value, &mut train.patience, &mut bad),
            "min_delta" => parse_f64(value, &mut train.min_delta, &mut bad),
            "max_reallocations" => parse_usize(value, &mut train.max_reallocations, &mut bad),
            "max_epochs" => parse_usize(value, &mut train.max_epochs, &mut bad),
            "implicit_multiplier" => parse_f64(value, &mut train.implicit_multiplier, &mut bad),
            "implicit_axes" => parse_usize(value, &mut train.implicit_axes, &mut bad),
            "explicit_axes" => match parse_axes(value) {
                Ok(axes) => train.explicit_axes = axes,
                Err(tok) => {
                    errs.push(format!(
                        "{origin}:{lineno}: explicit_axes: unknown axis `{tok}` \
                         (expected category, price, or an empty list)"
                    ));
                }
            },
            "seed" => match value.parse() {
                Ok(s) => train.seed = s,
                Err(_) => bad("expected an unsigned integer"),
            },
            "category_embedding" => match CategoryMode::parse(value) {
                Some(m) => train.category_embedding = m,
                None => bad("expected flat | hierarchical"),
            },
            "score_normalization" => match ScoreNormalization::parse(value) {
                Some(n) => train.score_normalization = n,
                None => bad("expected softmax | sigmoid"),
            },
            "weight_decay" => parse_f64(value, &mut train.weight_decay, &mut bad),
            "bpr_l2" => parse_f64(value, &mut train.bpr_l2, &mut bad),
            "cell" => match CellKind::parse(value) {
                Some(c) => train.cell = c,
                None => bad("expected lstm | vanilla"),
            },
            "eval_negative_cap" => parse_usize(value, &mut train.eval_negative_cap, &mut bad),
            _ => errs.push(format!("{origin}:{lineno}: unknown key `{key}`")),
        }
    }

    if errs.is_empty() {
        Ok(FileConfig { train, catalog })
    } else {
        Err(DirError::Config(errs))
    }
}

fn parse_f64(value: &str, slot: &mut f64, bad: &mut impl FnMut(&str)) {
    match value.parse() {
        Ok(v) => *slot = v,
        Err(_) => bad("expected a number"),
    }
}

fn parse_usize(value: &str, slot: &mut usize, bad: &mut impl FnMut(&str)) {
    match value.parse() {
        Ok(v) => *slot = v,
        Err(_) => bad("expected an unsigned integer"),
    }
}

/// `category, price` → both axes; an empty value means no explicit axes.
fn parse_axes(value: &str) -> std::result::Result<Vec<ExplicitAxisKind>, String> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|tok| match tok.trim() {
            "category" => Ok(ExplicitAxisKind::Category),
            "price" => Ok(ExplicitAxisKind::Price),
            other => Err(other.to_string()),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_config_round_trips_every_key() {
        let text = "\
# exercise every key once
catalog = data/catalog.dircat
model = dir-rnn
dim = 24
learning_rate = 0.5
lr_halving_epochs = 8
patience = 4
min_delta = 0.001
max_reallocations = 6
max_epochs = 80
implicit_multiplier = 1.5
implicit_axes = 2
explicit_axes = category, price
seed = 9
category_embedding = flat
score_normalization = sigmoid
weight_decay = 0.01
bpr_l2 = 0.02
cell = vanilla
eval_negative_cap = 50
";
        let cfg = parse_config(text, "test.conf").expect("parse");
        assert_eq!(cfg.catalog.as_deref(), Some(Path::new("data/catalog.dircat")));
        let t = &cfg.train;
        assert_eq!(t.model, ModelKind::DirRnn);
        assert_eq!(t.dim, Some(24));
        assert_eq!(t.learning_rate, 0.5);
        assert_eq!(t.lr_halving_epochs, 8);
        assert_eq!(t.patience, 4);
        assert_eq!(t.min_delta, 0.001);
        assert_eq!(t.max_reallocations, 6);
        assert_eq!(t.max_epochs, 80);
        assert_eq!(t.implicit_multiplier, 1.5);
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
        assert_eq!(t.eval_negative_cap, 50);
        t.validate().expect("valid");
    }

    #[test]
    fn empty_axis_list_means_no_explicit_axes() {
        let cfg = parse_config("explicit_axes =\nimplicit_axes = 2\n", "t").expect("parse");
        assert!(cfg.train.explicit_axes.is_empty());
        assert_eq!(cfg.train.implicit_axes, 2);
    }

    #[test]
    fn omitted_keys_keep_defaults() {
        let cfg = parse_config("model = bpr-mf\n", "t").expect("parse");
        let defaults = TrainConfig::default();
        assert_eq!(cfg.train.dim, defaults.dim);
        assert_eq!(cfg.train.learning_rate, defaults.learning_rate);
        assert!(cfg.catalog.is_none());
    }

    #[test]
    fn every_bad_line_is_reported() {
        let text = "model = frobnicator\ndim = minus-two\nmystery_key = 3\nno equals sign\n";
        let err = parse_config(text, "bad.conf").expect_err("must fail");
        let DirError::Config(errs) = err else {
            panic!("expected a config error, got {err}");
        };
        assert_eq!(errs.len(), 4, "{errs:?}");
        assert!(errs[0].contains("bad.conf:1"));
        assert!(errs[1].contains("dim"));
        assert!(errs[2].contains("unknown key"));
        assert!(errs[3].contains("key = value"));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = parse_config("\n# model = dir-rnn\n  \nseed = 3\n", "t").expect("parse");
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.train.model, ModelKind::DirMf);
    }
}
