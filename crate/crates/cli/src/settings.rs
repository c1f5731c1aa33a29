//! Run settings: built-in defaults, then a flat `key=value` file, then flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use haa::data::DataConfig;
use haa::eval::{Subset, DEFAULT_MAX_RANK};
use haa::model::Variant;
use haa::train::TrainConfig;
use haa::verify::DEFAULT_POINTS;

/// Invalid settings are a usage problem, reported with exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub variant: Variant,
    pub subset: Subset,
    pub epochs_scale: f64,
    pub max_rank: usize,
    pub points: usize,
    pub dataset: DataConfig,
    pub train: TrainConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            seed: 7,
            data: None,
            out: None,
            checkpoint: None,
            variant: Variant::Haa,
            subset: Subset::All,
            epochs_scale: 1.0,
            max_rank: DEFAULT_MAX_RANK,
            points: DEFAULT_POINTS,
            dataset: DataConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, UsageError> {
    value
        .trim()
        .parse()
        .map_err(|_| UsageError(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, UsageError> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl Settings {
    /// Sets one key. Image size keys apply to both the dataset and the model.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), UsageError> {
        let (d, t) = (&mut self.dataset, &mut self.train);
        match key {
            "seed" => self.seed = parse(key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "variant" => self.variant = value.parse().map_err(|e: haa::Error| UsageError(e.to_string()))?,
            "subset" => self.subset = value.parse().map_err(|e: haa::Error| UsageError(e.to_string()))?,
            "epochs_scale" => self.epochs_scale = parse(key, value)?,
            "max_rank" => self.max_rank = parse(key, value)?,
            "points" => self.points = parse(key, value)?,
            "num_ids" => d.num_ids = parse(key, value)?,
            "num_black" => d.num_black = parse(key, value)?,
            "samples_per_id" => d.samples_per_id = parse(key, value)?,
            "cameras" => d.cameras = parse(key, value)?,
            "train_fraction" => d.train_fraction = parse(key, value)?,
            "queries_per_id" => d.queries_per_id = parse(key, value)?,
            "min_separation" => d.min_separation = parse(key, value)?,
            "height" => {
                d.height = parse(key, value)?;
                t.model.input_h = d.height;
            }
            "width" => {
                d.width = parse(key, value)?;
                t.model.input_w = d.width;
            }
            "widths" => t.model.widths = parse_list(key, value)?,
            "strides" => t.model.strides = parse_list(key, value)?,
            "hll_widths" => t.model.hll_widths = parse_list(key, value)?,
            "embed_dim" => t.model.embed_dim = parse(key, value)?,
            "reduction" => t.model.reduction = parse(key, value)?,
            "share_backbone" => t.model.share_backbone = parse(key, value)?,
            "stage_epochs" => {
                let v = parse_list(key, value)?;
                t.stage_epochs = v
                    .try_into()
                    .map_err(|_| UsageError(format!("`{key}` needs three comma-separated values")))?;
            }
            "p" => t.p = parse(key, value)?,
            "k" => t.k = parse(key, value)?,
            "batches_per_epoch" => t.batches_per_epoch = parse(key, value)?,
            "base_lr" => t.base_lr = parse(key, value)?,
            "weight_decay" => t.adam.weight_decay = parse(key, value)?,
            "alpha" => t.weights.alpha = parse(key, value)?,
            "beta" => t.weights.beta = parse(key, value)?,
            "margin" => t.weights.margin = parse(key, value)?,
            "black_weight" => t.weights.black_weight = parse(key, value)?,
            "iou_floor" => t.iou_floor = parse(key, value)?,
            "augment" => t.augment = parse(key, value)?,
            _ => return Err(UsageError(format!("unknown setting `{key}`"))),
        }
        Ok(())
    }

    /// Reads `key=value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
            .map_err(|e| UsageError(format!("{}: {e}", path.display())))
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), UsageError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| UsageError(format!("line {}: expected key=value", n + 1)))?;
            self.apply(k.trim(), v.trim())
                .map_err(|e| UsageError(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Training config with the epoch scale applied.
    pub fn train_config(&self) -> Result<TrainConfig, UsageError> {
        let cfg = self
            .train
            .clone()
            .with_epochs_scale(self.epochs_scale)
            .map_err(|e| UsageError(e.to_string()))?;
        cfg.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(cfg)
    }

    /// Every setting as `key=value` lines, in a form [`Settings::apply_text`]
    /// reads back. The output directory is left out so that identical runs
    /// into different directories produce identical records.
    pub fn to_text(&self) -> String {
        let (d, t) = (&self.dataset, &self.train);
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("seed", self.seed.to_string());
        if let Some(p) = path(&self.data) {
            put("data", p);
        }
        if let Some(p) = path(&self.checkpoint) {
            put("checkpoint", p);
        }
        put("variant", self.variant.to_string());
        put("subset", self.subset.to_string());
        put("epochs_scale", self.epochs_scale.to_string());
        put("max_rank", self.max_rank.to_string());
        put("points", self.points.to_string());
        put("num_ids", d.num_ids.to_string());
        put("num_black", d.num_black.to_string());
        put("samples_per_id", d.samples_per_id.to_string());
        put("cameras", d.cameras.to_string());
        put("train_fraction", d.train_fraction.to_string());
        put("queries_per_id", d.queries_per_id.to_string());
        put("min_separation", d.min_separation.to_string());
        put("height", d.height.to_string());
        put("width", d.width.to_string());
        put("widths", join(&t.model.widths));
        put("strides", join(&t.model.strides));
        put("hll_widths", join(&t.model.hll_widths));
        put("embed_dim", t.model.embed_dim.to_string());
        put("reduction", t.model.reduction.to_string());
        put("share_backbone", t.model.share_backbone.to_string());
        put("stage_epochs", join(&t.stage_epochs));
        put("p", t.p.to_string());
        put("k", t.k.to_string());
        put("batches_per_epoch", t.batches_per_epoch.to_string());
        put("base_lr", t.base_lr.to_string());
        put("weight_decay", t.adam.weight_decay.to_string());
        put("alpha", t.weights.alpha.to_string());
        put("beta", t.weights.beta.to_string());
        put("margin", t.weights.margin.to_string());
        put("black_weight", t.weights.black_weight.to_string());
        put("iou_floor", t.iou_floor.to_string());
        put("augment", t.augment.to_string());
        out
    }
}
