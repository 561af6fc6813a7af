//! Flat `key = value` configuration shared by every stage of the pipeline.
//!
//! One key per line, `#` starts a comment, lists are comma separated. Unknown
//! keys are rejected so typos surface at load time.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub template_size: usize,
    pub search_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub head_hidden: usize,

    /// Encoder layers (1-based) after which an STMT module runs.
    pub insert_layers: Vec<usize>,
    /// Subset of `insert_layers` where search tokens fuse with dynamic tokens.
    pub tf_layers: Vec<usize>,
    pub enable_modality_enhancement: bool,
    pub enable_dynamic_tokens: bool,
    /// Use the template cross-attention weights for dynamic tokens as well.
    pub tie_ca_params: bool,
    /// Start every STMT block with zero output and second-MLP projections, so
    /// the inserted modules begin as identities on the encoder stream.
    pub stmt_zero_init: bool,

    pub elimination: bool,
    pub keep_rate: f64,

    pub update_interval: usize,
    pub score_threshold: f64,
    pub roi_sampling: usize,

    pub template_factor: f64,
    pub search_factor: f64,
    pub pixel_mean: f64,
    pub pixel_std: f64,

    /// Learning rate of the STMT modules; the backbone and head are scaled from it.
    pub lr: f64,
    pub backbone_lr_factor: f64,
    pub head_lr_factor: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    /// Fraction of `steps` after which the learning rate is multiplied by `lr_decay`.
    pub lr_decay_at: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub jitter_shift: f64,
    pub jitter_scale: f64,
    /// Centre shift and log-scale jitter of the template crop in the temporal
    /// (T) pair, so simulated dynamic tokens see the box errors of inference.
    pub dynamic_jitter_shift: f64,
    pub dynamic_jitter_scale: f64,
    /// Region cropped for dynamic tokens: `0` takes the predicted box itself,
    /// a positive value a square of that many `sqrt(w h)` around its centre,
    /// the same window a template crop of that factor would cover.
    pub dynamic_context: f64,
    pub loss_cls_weight: f64,
    pub loss_offset_weight: f64,
    pub loss_size_weight: f64,
    /// Width of the Gaussian score target, in search-grid cells.
    pub target_sigma: f64,
    /// Let gradients flow into the simulated dynamic tokens.
    pub end_to_end_dynamic: bool,

    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            template_size: 128,
            search_size: 256,
            patch_size: 16,
            embed_dim: 64,
            depth: 12,
            heads: 4,
            mlp_ratio: 4.0,
            head_hidden: 64,
            insert_layers: vec![4, 7, 10],
            tf_layers: vec![10],
            enable_modality_enhancement: true,
            enable_dynamic_tokens: true,
            tie_ca_params: false,
            stmt_zero_init: true,
            elimination: false,
            keep_rate: 0.7,
            update_interval: 25,
            score_threshold: 0.65,
            roi_sampling: 2,
            template_factor: 2.0,
            search_factor: 4.0,
            pixel_mean: 0.5,
            pixel_std: 0.5,
            lr: 1e-4,
            backbone_lr_factor: 1e-2,
            head_lr_factor: 1e-1,
            weight_decay: 1e-4,
            lr_decay: 0.1,
            lr_decay_at: 1.0 / 3.0,
            steps: 300,
            batch_size: 4,
            checkpoint_every: 100,
            jitter_shift: 1.0,
            jitter_scale: 0.15,
            dynamic_jitter_shift: 0.0,
            dynamic_jitter_scale: 0.0,
            dynamic_context: 0.0,
            loss_cls_weight: 1.0,
            loss_offset_weight: 1.0,
            loss_size_weight: 1.0,
            target_sigma: 0.75,
            end_to_end_dynamic: false,
            seed: 0,
        }
    }
}

/// Token grid `(rows, cols)`.
pub type Grid = (usize, usize);

impl Config {
    /// Small model used by fast tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            template_size: 16,
            search_size: 32,
            patch_size: 8,
            embed_dim: 8,
            depth: 3,
            heads: 2,
            mlp_ratio: 2.0,
            head_hidden: 8,
            insert_layers: vec![1, 2],
            tf_layers: vec![2],
            ..Self::default()
        }
    }

    pub fn template_grid(&self) -> Grid {
        let g = self.template_size / self.patch_size;
        (g, g)
    }

    pub fn search_grid(&self) -> Grid {
        let g = self.search_size / self.patch_size;
        (g, g)
    }

    pub fn n_template(&self) -> usize {
        let (r, c) = self.template_grid();
        r * c
    }

    pub fn n_search(&self) -> usize {
        let (r, c) = self.search_grid();
        r * c
    }

    /// Zero-based index of the encoder layer after which the 1-based `layer` runs.
    pub fn layer_index(layer: usize) -> usize {
        layer - 1
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 {
            return Err(Error::config("patch_size must be positive"));
        }
        for (name, s) in [("template_size", self.template_size), ("search_size", self.search_size)] {
            if s == 0 || s % p != 0 {
                return Err(Error::config(format!("{name} = {s} is not a positive multiple of patch_size {p}")));
            }
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(Error::config("depth must be positive"));
        }
        crate::tensor::MlpParams::hidden_dim(self.embed_dim, self.mlp_ratio)?;
        if self.head_hidden == 0 {
            return Err(Error::config("head_hidden must be positive"));
        }
        let mut seen = Vec::new();
        for &l in &self.insert_layers {
            if l == 0 || l > self.depth {
                return Err(Error::config(format!("insert layer {l} outside 1..={}", self.depth)));
            }
            if seen.contains(&l) {
                return Err(Error::config(format!("insert layer {l} listed twice")));
            }
            seen.push(l);
        }
        for l in &self.tf_layers {
            if !self.insert_layers.contains(l) {
                return Err(Error::config(format!("tf layer {l} is not an insert layer")));
            }
        }
        if !(self.keep_rate > 0.0 && self.keep_rate <= 1.0) {
            return Err(Error::config(format!("keep_rate {} outside (0, 1]", self.keep_rate)));
        }
        if self.update_interval == 0 {
            return Err(Error::config("update_interval must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::config("score_threshold outside [0, 1]"));
        }
        if self.roi_sampling == 0 {
            return Err(Error::config("roi_sampling must be >= 1"));
        }
        if self.template_factor < 1.0 || self.search_factor < 1.0 {
            return Err(Error::config("crop factors must be >= 1"));
        }
        if self.pixel_std <= 0.0 {
            return Err(Error::config("pixel_std must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.lr < 0.0 || self.backbone_lr_factor < 0.0 || self.head_lr_factor < 0.0 {
            return Err(Error::config("learning rates must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_at) {
            return Err(Error::config("lr_decay_at outside [0, 1]"));
        }
        if [self.jitter_shift, self.jitter_scale, self.dynamic_jitter_shift, self.dynamic_jitter_scale]
            .iter()
            .any(|j| !(*j >= 0.0))
        {
            return Err(Error::config("jitter amounts must be non-negative"));
        }
        if !(self.dynamic_context == 0.0 || self.dynamic_context >= 1.0) {
            return Err(Error::config("dynamic_context must be 0 (the box itself) or at least 1"));
        }
        if self.target_sigma <= 0.0 {
            return Err(Error::config("target_sigma must be positive"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("template_size", self.template_size.to_string());
        kv("search_size", self.search_size.to_string());
        kv("patch_size", self.patch_size.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("depth", self.depth.to_string());
        kv("heads", self.heads.to_string());
        kv("mlp_ratio", self.mlp_ratio.to_string());
        kv("head_hidden", self.head_hidden.to_string());
        kv("insert_layers", list(&self.insert_layers));
        kv("tf_layers", list(&self.tf_layers));
        kv("enable_modality_enhancement", self.enable_modality_enhancement.to_string());
        kv("enable_dynamic_tokens", self.enable_dynamic_tokens.to_string());
        kv("tie_ca_params", self.tie_ca_params.to_string());
        kv("stmt_zero_init", self.stmt_zero_init.to_string());
        kv("elimination", self.elimination.to_string());
        kv("keep_rate", self.keep_rate.to_string());
        kv("update_interval", self.update_interval.to_string());
        kv("score_threshold", self.score_threshold.to_string());
        kv("roi_sampling", self.roi_sampling.to_string());
        kv("template_factor", self.template_factor.to_string());
        kv("search_factor", self.search_factor.to_string());
        kv("pixel_mean", self.pixel_mean.to_string());
        kv("pixel_std", self.pixel_std.to_string());
        kv("lr", self.lr.to_string());
        kv("backbone_lr_factor", self.backbone_lr_factor.to_string());
        kv("head_lr_factor", self.head_lr_factor.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("lr_decay", self.lr_decay.to_string());
        kv("lr_decay_at", self.lr_decay_at.to_string());
        kv("steps", self.steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("jitter_shift", self.jitter_shift.to_string());
        kv("jitter_scale", self.jitter_scale.to_string());
        kv("dynamic_jitter_shift", self.dynamic_jitter_shift.to_string());
        kv("dynamic_jitter_scale", self.dynamic_jitter_scale.to_string());
        kv("dynamic_context", self.dynamic_context.to_string());
        kv("loss_cls_weight", self.loss_cls_weight.to_string());
        kv("loss_offset_weight", self.loss_offset_weight.to_string());
        kv("loss_size_weight", self.loss_size_weight.to_string());
        kv("target_sigma", self.target_sigma.to_string());
        kv("end_to_end_dynamic", self.end_to_end_dynamic.to_string());
        kv("seed", self.seed.to_string());
        s
    }

    /// Parses config text on top of the defaults, then validates.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line, key, value) in kv_lines(text)? {
            cfg.set(key, value).map_err(|detail| Error::Line { line, detail })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::tensor::checkpoint::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        fn list(key: &str, v: &str) -> std::result::Result<Vec<usize>, String> {
            if v.trim().is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|x| num(key, x.trim())).collect()
        }
        match key {
            "template_size" => self.template_size = num(key, value)?,
            "search_size" => self.search_size = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "mlp_ratio" => self.mlp_ratio = num(key, value)?,
            "head_hidden" => self.head_hidden = num(key, value)?,
            "insert_layers" => self.insert_layers = list(key, value)?,
            "tf_layers" => self.tf_layers = list(key, value)?,
            "enable_modality_enhancement" => self.enable_modality_enhancement = num(key, value)?,
            "enable_dynamic_tokens" => self.enable_dynamic_tokens = num(key, value)?,
            "tie_ca_params" => self.tie_ca_params = num(key, value)?,
            "stmt_zero_init" => self.stmt_zero_init = num(key, value)?,
            "elimination" => self.elimination = num(key, value)?,
            "keep_rate" => self.keep_rate = num(key, value)?,
            "update_interval" => self.update_interval = num(key, value)?,
            "score_threshold" => self.score_threshold = num(key, value)?,
            "roi_sampling" => self.roi_sampling = num(key, value)?,
            "template_factor" => self.template_factor = num(key, value)?,
            "search_factor" => self.search_factor = num(key, value)?,
            "pixel_mean" => self.pixel_mean = num(key, value)?,
            "pixel_std" => self.pixel_std = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "backbone_lr_factor" => self.backbone_lr_factor = num(key, value)?,
            "head_lr_factor" => self.head_lr_factor = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "lr_decay" => self.lr_decay = num(key, value)?,
            "lr_decay_at" => self.lr_decay_at = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "jitter_shift" => self.jitter_shift = num(key, value)?,
            "jitter_scale" => self.jitter_scale = num(key, value)?,
            "dynamic_jitter_shift" => self.dynamic_jitter_shift = num(key, value)?,
            "dynamic_jitter_scale" => self.dynamic_jitter_scale = num(key, value)?,
            "dynamic_context" => self.dynamic_context = num(key, value)?,
            "loss_cls_weight" => self.loss_cls_weight = num(key, value)?,
            "loss_offset_weight" => self.loss_offset_weight = num(key, value)?,
            "loss_size_weight" => self.loss_size_weight = num(key, value)?,
            "target_sigma" => self.target_sigma = num(key, value)?,
            "end_to_end_dynamic" => self.end_to_end_dynamic = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }
}

/// Splits flat config text into `(line number, key, value)` triples.
pub fn kv_lines(text: &str) -> Result<Vec<(usize, &str, &str)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Line {
            line: i + 1,
            detail: format!("expected `key = value`, got {line:?}"),
        })?;
        out.push((i + 1, k.trim(), v.trim()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_validate_and_match_token_counts() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.n_template(), 64);
        assert_eq!(cfg.n_search(), 256);
        assert_eq!(cfg.insert_layers, vec![4, 7, 10]);
        assert_eq!(cfg.tf_layers, vec![10]);
        Config::tiny().validate().unwrap();
    }

    #[test]
    fn rejects_tf_layer_outside_insert_layers() {
        let cfg = Config {
            tf_layers: vec![5],
            ..Config::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_indivisible_sizes_and_unknown_keys() {
        assert!(Config::from_text("search_size = 250").is_err());
        assert!(matches!(
            Config::from_text("no_such_key = 1"),
            Err(Error::Line { line: 1, .. })
        ));
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = Config::from_text("# header\n\ndepth = 6 # shallower\ninsert_layers = 2, 4\ntf_layers = 4\n").unwrap();
        assert_eq!(cfg.depth, 6);
        assert_eq!(cfg.insert_layers, vec![2, 4]);
    }

    proptest! {
        #[test]
        fn text_round_trip(lr in 1e-8f64..1.0, thr in 0.0f64..1.0, seed in any::<u64>(), depth in 10usize..16) {
            let cfg = Config { lr, score_threshold: thr, seed, depth, ..Config::default() };
            let back = Config::from_text(&cfg.to_text()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
