//! Flat run configuration shared by every subcommand.
//!
//! Resolution order, later wins: preset defaults, config file, `IMAFORMER_SEED`
//! (seed only, and only when the file does not set one), command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use imaformer::episode::{SyntheticSpec, DESK_SPLITS};
use imaformer::eval::EvalSpec;
use imaformer::mutual_attention::Variant;
use imaformer::train::{FineTunePolicy, TrainConfig};
use imaformer::vit::{FinalAttention, MechanismConfig, ModelConfig, ScoreForm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Micro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Seeds data generation, initialisation and training episodes.
    pub seed: u64,
    /// Seeds the evaluation episode stream.
    pub eval_seed: u64,
    pub threads: usize,

    // model
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub temperature: f64,
    pub final_attention: FinalAttention,
    pub residual: bool,
    pub score: ScoreForm,

    // meta-training
    pub variant: Variant,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub trainable_last_blocks: usize,
    pub train_cls_token: bool,
    pub train_pos_embed: bool,
    pub train_patch_proj: bool,
    pub augment_support: bool,
    pub augment_query: bool,
    pub val_episodes: usize,
    pub val_query: usize,

    // evaluation
    pub eval_way: usize,
    pub eval_shot: usize,
    pub eval_query: usize,
    pub eval_tasks: usize,

    // synthetic data
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub images_per_class: usize,
    pub signature_patches: usize,
    pub signature_noise: f64,
    pub background_noise: f64,
    pub distractor_patches: usize,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let model = match preset {
            Preset::Desk => ModelConfig::desk(),
            Preset::Micro => ModelConfig::micro(),
        };
        let train = TrainConfig::desk(model.depth);
        let data = SyntheticSpec::default();
        let desk = Self {
            preset,
            seed: 0,
            eval_seed: 0,
            threads: 1,
            image_size: model.image_size,
            channels: model.channels,
            patch_size: model.patch_size,
            depth: model.depth,
            dim: model.dim,
            heads: model.heads,
            mlp_ratio: model.mlp_ratio,
            temperature: model.temperature,
            final_attention: model.mechanism.final_attention,
            residual: model.mechanism.residual,
            score: model.mechanism.score,
            variant: train.variant,
            epochs: train.epochs,
            episodes_per_epoch: train.episodes_per_epoch,
            way: train.way,
            shot: train.shot,
            query: train.query,
            lr_init: train.lr_init,
            lr_min: train.lr_min,
            weight_decay: train.weight_decay,
            beta1: train.beta1,
            beta2: train.beta2,
            eps: train.eps,
            trainable_last_blocks: train.policy.trainable_last_blocks,
            train_cls_token: train.policy.train_cls_token,
            train_pos_embed: train.policy.train_pos_embed,
            train_patch_proj: train.policy.train_patch_proj,
            augment_support: train.augment_support,
            augment_query: train.augment_query,
            val_episodes: train.val_episodes,
            val_query: train.val_query,
            eval_way: 5,
            eval_shot: 1,
            eval_query: 10,
            eval_tasks: 1000,
            train_classes: DESK_SPLITS[0],
            val_classes: DESK_SPLITS[1],
            test_classes: DESK_SPLITS[2],
            images_per_class: data.images_per_class,
            signature_patches: data.signature_patches,
            signature_noise: data.signature_noise,
            background_noise: data.background_noise,
            distractor_patches: data.distractor_patches,
        };
        match preset {
            Preset::Desk => desk,
            Preset::Micro => Self {
                epochs: 2,
                episodes_per_epoch: 10,
                way: 2,
                query: 2,
                val_episodes: 5,
                val_query: 2,
                eval_way: 2,
                eval_query: 2,
                eval_tasks: 20,
                train_classes: 6,
                val_classes: 3,
                test_classes: 3,
                images_per_class: 8,
                signature_patches: 1,
                distractor_patches: 1,
                ..desk
            },
        }
    }

    /// Preset defaults overlaid with the keys present in `file`.
    pub fn from_json(file: &Map<String, Value>, preset: Option<Preset>) -> Result<Self, String> {
        let preset = match (preset, file.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => serde_json::from_value(v.clone()).map_err(|e| format!("preset: {e}"))?,
            (None, None) => Preset::Desk,
        };
        let Value::Object(mut base) = serde_json::to_value(Self::preset(preset)).unwrap() else {
            unreachable!()
        };
        for (k, v) in file {
            if !base.contains_key(k) {
                return Err(format!("unknown config key `{k}`"));
            }
            base.insert(k.clone(), v.clone());
        }
        base.insert("preset".into(), serde_json::to_value(preset).unwrap());
        serde_json::from_value(Value::Object(base)).map_err(|e| e.to_string())
    }

    pub fn load(
        path: Option<&Path>,
        preset: Option<Preset>,
    ) -> Result<(Self, bool), crate::CliError> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| crate::CliError::io(p, e))?;
                match serde_json::from_str(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => {
                        return Err(crate::CliError::Config(format!(
                            "{}: expected a JSON object",
                            p.display()
                        )))
                    }
                    Err(e) => {
                        return Err(crate::CliError::Config(format!("{}: {e}", p.display())))
                    }
                }
            }
            None => Map::new(),
        };
        let has_seed = file.contains_key("seed");
        let cfg = Self::from_json(&file, preset).map_err(crate::CliError::Config)?;
        Ok((cfg, has_seed))
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            channels: self.channels,
            patch_size: self.patch_size,
            depth: self.depth,
            dim: self.dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            temperature: self.temperature,
            mechanism: MechanismConfig {
                final_attention: self.final_attention,
                residual: self.residual,
                score: self.score,
            },
        }
    }

    /// Copies architecture fields from a loaded checkpoint so the echoed
    /// configuration describes the model actually used.
    pub fn adopt_model(&mut self, m: &ModelConfig) {
        self.image_size = m.image_size;
        self.channels = m.channels;
        self.patch_size = m.patch_size;
        self.depth = m.depth;
        self.dim = m.dim;
        self.heads = m.heads;
        self.mlp_ratio = m.mlp_ratio;
    }

    pub fn policy(&self) -> FineTunePolicy {
        FineTunePolicy {
            trainable_last_blocks: self.trainable_last_blocks,
            train_cls_token: self.train_cls_token,
            train_pos_embed: self.train_pos_embed,
            train_patch_proj: self.train_patch_proj,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            episodes_per_epoch: self.episodes_per_epoch,
            way: self.way,
            shot: self.shot,
            query: self.query,
            lr_init: self.lr_init,
            lr_min: self.lr_min,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            seed: self.seed,
            policy: self.policy(),
            variant: self.variant,
            augment_support: self.augment_support,
            augment_query: self.augment_query,
            val_episodes: self.val_episodes,
            val_query: self.val_query,
            threads: self.threads,
        }
    }

    pub fn eval(&self) -> EvalSpec {
        EvalSpec {
            way: self.eval_way,
            shot: self.eval_shot,
            query: self.eval_query,
            tasks: self.eval_tasks,
            seed: self.eval_seed,
            variant: self.variant,
        }
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.train_classes,
            images_per_class: self.images_per_class,
            channels: self.channels,
            image_size: self.image_size,
            patch_size: self.patch_size,
            signature_patches: self.signature_patches,
            signature_noise: self.signature_noise,
            background_noise: self.background_noise,
            distractor_patches: self.distractor_patches,
            seed: self.seed,
            class_offset: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model().validate().map_err(|e| e.to_string())?;
        self.train().validate().map_err(|e| e.to_string())?;
        if self.eval_tasks == 0 || self.eval_way < 2 || self.eval_shot == 0 || self.eval_query == 0 {
            return Err("need eval_tasks ≥ 1, eval_way ≥ 2, eval_shot ≥ 1, eval_query ≥ 1".into());
        }
        self.synthetic().validate().map_err(|e| e.to_string())?;
        Ok(())
    }
}
