//! Desk-scale ablation: the full model against the same network trained and
//! evaluated without dynamic tokens, on synthetic sequences whose appearance
//! drifts away from the first-frame template.

use std::time::Instant;

use crate::config::Config;
use crate::error::Result;
use crate::evaluation::{evaluate, mean_scores, SequenceReport};
use crate::io::synth::{render_dataset, SynthSpec};
use crate::io::Sequence;
use crate::model::StmtModel;
use crate::tracker::track_frames;
use crate::training::train;

/// Model configuration for the ablation: 12 layers of width 64 with STMT
/// after layers 4, 7 and 10 and temporal fusion after layer 10, on 32/64 px
/// crops with 8 px patches.
///
/// Everything is trained from scratch, so the backbone and head learn at the
/// full rate instead of the reduced fine-tuning factors.
pub fn desk_config() -> Config {
    Config {
        template_size: 32,
        search_size: 64,
        patch_size: 8,
        embed_dim: 64,
        depth: 12,
        heads: 4,
        mlp_ratio: 4.0,
        head_hidden: 64,
        insert_layers: vec![4, 7, 10],
        tf_layers: vec![10],
        update_interval: 5,
        score_threshold: 0.5,
        lr: 5e-4,
        backbone_lr_factor: 1.0,
        head_lr_factor: 1.0,
        weight_decay: 1e-4,
        steps: 600,
        batch_size: 4,
        checkpoint_every: 0,
        ..Config::default()
    }
}

/// Sequences with a steady appearance drift in both modalities.
pub fn desk_spec() -> SynthSpec {
    SynthSpec {
        length: 40,
        width: 96,
        height: 96,
        target_min: 10.0,
        target_max: 18.0,
        walk_std: 0.5,
        drift: 0.8,
        scale_walk: 0.01,
        hue_drift: 4.0,
        shape_drift: 0.06,
        tir_drift: -1.5,
        illumination: 0.35,
        illumination_period: 30.0,
        distractors: 2,
        occlusions: 1,
        occlusion_length: 4,
        occlusion_cover: 0.4,
        noise: 5.0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationPlan {
    pub model: Config,
    pub spec: SynthSpec,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub seeds: Vec<u64>,
    pub data_seed: u64,
}

impl Default for AblationPlan {
    fn default() -> Self {
        Self {
            model: desk_config(),
            spec: desk_spec(),
            train_sequences: 200,
            test_sequences: 50,
            seeds: vec![0, 1, 2],
            data_seed: 2024,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantScore {
    pub seed: u64,
    pub dynamic_tokens: bool,
    pub pr20: f64,
    pub npr: f64,
    pub sr: f64,
    pub final_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub runs: Vec<VariantScore>,
}

impl AblationResult {
    fn mean_sr(&self, dynamic: bool) -> f64 {
        let sel: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.dynamic_tokens == dynamic)
            .map(|r| r.sr)
            .collect();
        sel.iter().sum::<f64>() / sel.len().max(1) as f64
    }

    pub fn mean_sr_full(&self) -> f64 {
        self.mean_sr(true)
    }

    pub fn mean_sr_ablated(&self) -> f64 {
        self.mean_sr(false)
    }
}

/// Tracks every sequence from its first ground-truth box and scores it.
pub fn evaluate_model(model: &StmtModel, cfg: &Config, data: &[Sequence]) -> Result<Vec<SequenceReport>> {
    data.iter()
        .map(|seq| {
            let boxes = track_frames(model, cfg, &seq.groundtruth[0], seq.frames.iter().cloned().map(Ok))?;
            Ok(SequenceReport {
                name: seq.name.clone(),
                n_frames: seq.len(),
                result: evaluate(&boxes, &seq.groundtruth)?,
            })
        })
        .collect()
}

/// Trains one variant from `seed` and scores it on `test`.
pub fn run_variant(base: &Config, seed: u64, dynamic_tokens: bool, train_data: &[Sequence], test: &[Sequence]) -> Result<VariantScore> {
    let start = Instant::now();
    let cfg = Config {
        seed,
        enable_dynamic_tokens: dynamic_tokens,
        ..base.clone()
    };
    let mut model = StmtModel::new(&cfg)?;
    let log = train(&mut model, &cfg, train_data, None, &mut |_| {})?;
    let tail = &log[log.len().saturating_sub(20)..];
    let final_loss = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64;
    let rows = evaluate_model(&model, &cfg, test)?;
    let (pr20, npr, sr) = mean_scores(&rows);
    Ok(VariantScore {
        seed,
        dynamic_tokens,
        pr20,
        npr,
        sr,
        final_loss,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs both variants for every seed. `on_run` sees each finished run.
pub fn run_ablation(plan: &AblationPlan, on_run: &mut dyn FnMut(&VariantScore)) -> Result<AblationResult> {
    let train_data = render_dataset(&plan.spec, plan.data_seed, plan.train_sequences)?;
    let test = render_dataset(&plan.spec, plan.data_seed.wrapping_add(1), plan.test_sequences)?;
    let mut runs = Vec::new();
    for &seed in &plan.seeds {
        for dynamic in [true, false] {
            let r = run_variant(&plan.model, seed, dynamic, &train_data, &test)?;
            on_run(&r);
            runs.push(r);
        }
    }
    Ok(AblationResult { runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_is_valid_and_train_test_disjoint() {
        desk_config().validate().unwrap();
        desk_spec().validate().unwrap();
        let plan = AblationPlan {
            train_sequences: 2,
            test_sequences: 2,
            ..AblationPlan::default()
        };
        let a = render_dataset(&plan.spec, plan.data_seed, 2).unwrap();
        let b = render_dataset(&plan.spec, plan.data_seed + 1, 2).unwrap();
        assert!(a.iter().all(|s| b.iter().all(|t| s.frames != t.frames)));
    }
}
