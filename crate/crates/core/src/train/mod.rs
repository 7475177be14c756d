//! Episodic meta-training.

mod optim;

pub use optim::{adamw_step, cosine_lr, AdamW, OptState};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episode::{derive_seed, sample_episode, AugmentParams, Dataset, Episode};
use crate::error::{Error, Result};
use crate::eval::{evaluate_episodes, EvalSpec};
use crate::image::Image;
use crate::mutual_attention::{classify, predict, score_episode, EpisodeImages, Variant};
use crate::tensor::{Gradients, Tape, Var};
use crate::vit::{
    block_param_index, param_names, BlockParam, ModelConfig, ModelParams, ParamVars, CLS_TOKEN,
    PATCH_BIAS, PATCH_WEIGHT, POS_EMBED,
};

/// Which parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineTunePolicy {
    /// Trailing transformer blocks that are trained (the final block first).
    pub trainable_last_blocks: usize,
    pub train_cls_token: bool,
    pub train_pos_embed: bool,
    pub train_patch_proj: bool,
}

impl FineTunePolicy {
    /// Everything trainable; the right choice when starting from random weights.
    pub fn full(depth: usize) -> Self {
        Self {
            trainable_last_blocks: depth,
            train_cls_token: true,
            train_pos_embed: true,
            train_patch_proj: true,
        }
    }

    /// Last `blocks` blocks, optionally with the CLS token.
    pub fn last(blocks: usize, cls: bool) -> Self {
        Self {
            trainable_last_blocks: blocks,
            train_cls_token: cls,
            train_pos_embed: false,
            train_patch_proj: false,
        }
    }

    pub fn frozen() -> Self {
        Self::last(0, false)
    }

    /// Short label such as `last 2 layers+CLS`.
    pub fn label(&self, depth: usize) -> String {
        let mut s = match self.trainable_last_blocks {
            0 => "no layer".to_string(),
            k if k == depth => format!("{k} layers"),
            1 => "last 1 layer".to_string(),
            k => format!("last {k} layers"),
        };
        if self.train_cls_token {
            s.push_str("+CLS");
        }
        if self.train_pos_embed {
            s.push_str("+pos");
        }
        if self.train_patch_proj {
            s.push_str("+patch");
        }
        s
    }
}

/// Per-tensor trainable flags in canonical parameter order.
pub fn trainable_mask(config: &ModelConfig, policy: &FineTunePolicy) -> Result<Vec<bool>> {
    if policy.trainable_last_blocks > config.depth {
        return Err(Error::Config(format!(
            "policy trains the last {} blocks of a depth-{} model",
            policy.trainable_last_blocks, config.depth
        )));
    }
    let mut mask = vec![false; param_names(config).len()];
    mask[PATCH_WEIGHT] = policy.train_patch_proj;
    mask[PATCH_BIAS] = policy.train_patch_proj;
    mask[CLS_TOKEN] = policy.train_cls_token;
    mask[POS_EMBED] = policy.train_pos_embed;
    for b in config.depth - policy.trainable_last_blocks..config.depth {
        for p in BlockParam::ALL {
            mask[block_param_index(b, p)] = true;
        }
    }
    Ok(mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
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
    pub seed: u64,
    pub policy: FineTunePolicy,
    pub variant: Variant,
    /// Augment support images during training.
    pub augment_support: bool,
    /// Augment query images during training.
    pub augment_query: bool,
    /// Fixed validation episodes evaluated after every epoch.
    pub val_episodes: usize,
    pub val_query: usize,
    pub threads: usize,
}

impl TrainConfig {
    /// Desk-scale defaults for a randomly initialised model of `depth` blocks.
    pub fn desk(depth: usize) -> Self {
        Self {
            epochs: 30,
            episodes_per_epoch: 100,
            way: 5,
            shot: 1,
            query: 5,
            lr_init: 2e-4,
            lr_min: 1e-6,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            policy: FineTunePolicy::full(depth),
            variant: Variant::Imaformer,
            // Flips and crops would move the position-coded synthetic signatures.
            augment_support: false,
            augment_query: false,
            val_episodes: 100,
            val_query: 5,
            threads: 1,
        }
    }

    /// Schedule used for fine-tuning a pre-trained ViT-Small.
    pub fn paper() -> Self {
        Self {
            epochs: 100,
            episodes_per_epoch: 600,
            query: 10,
            lr_init: 1e-5,
            lr_min: 1e-6,
            policy: FineTunePolicy::last(6, false),
            augment_support: true,
            augment_query: true,
            val_episodes: 200,
            val_query: 10,
            ..Self::desk(12)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.lr_init >= self.lr_min && self.lr_min > 0.0) {
            return err(format!(
                "need lr_init ≥ lr_min > 0, got {} and {}",
                self.lr_init, self.lr_min
            ));
        }
        if self.epochs * self.episodes_per_epoch == 0 {
            return err("epochs × episodes_per_epoch must be at least 1".into());
        }
        if self.way < 2 || self.shot == 0 || self.query == 0 {
            return err(format!(
                "need way ≥ 2, shot ≥ 1, query ≥ 1 (got {}, {}, {})",
                self.way, self.shot, self.query
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return err("AdamW betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.threads == 0 {
            return err("threads must be at least 1".into());
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.episodes_per_epoch
    }

    pub fn adamw(&self, lr: f64) -> AdamW {
        AdamW {
            lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// One JSON-lines record of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: ModelParams,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Loss and accuracy of one forward pass over an episode.
pub struct EpisodeLoss {
    pub loss: Var,
    pub correct: usize,
    pub total: usize,
}

/// Builds the episode's mean cross-entropy on `tape`.
pub fn episode_loss(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    images: &EpisodeImages<'_>,
    labels: &[usize],
    variant: Variant,
) -> Result<EpisodeLoss> {
    let rows = score_episode(tape, images, pv, config, variant)?;
    let mut losses = Vec::with_capacity(rows.len());
    let mut correct = 0;
    for (row, &label) in rows.iter().zip(labels) {
        if predict(tape.value(row.scores).data()) == label {
            correct += 1;
        }
        let probs = classify(tape, row.scores, config.temperature)?;
        losses.push(tape.cross_entropy(probs, label)?);
    }
    let sum = tape.add_n(&losses)?;
    Ok(EpisodeLoss {
        loss: tape.scale(sum, 1.0 / labels.len() as f64),
        correct,
        total: labels.len(),
    })
}

/// Result of one optimisation step.
#[derive(Clone, Copy, Debug)]
pub struct StepResult {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

/// Per-parameter gradients of the episode loss, for parameters flagged in `mask`.
pub fn loss_and_grads(
    params: &ModelParams,
    mask: &[bool],
    images: &EpisodeImages<'_>,
    labels: &[usize],
    variant: Variant,
) -> Result<(StepResult, Vec<Option<crate::tensor::Tensor>>)> {
    let mut tape = Tape::new();
    let pv = ParamVars::record(&mut tape, params, Some(mask));
    let out = episode_loss(&mut tape, &pv, params.config(), images, labels, variant)?;
    let loss = tape.value(out.loss).data()[0];
    let result = StepResult {
        loss,
        correct: out.correct,
        total: out.total,
    };
    if !mask.iter().any(|&m| m) {
        return Ok((result, vec![None; mask.len()]));
    }
    let mut grads: Gradients = tape.backward(out.loss)?;
    let per_param = pv.vars().iter().map(|&v| grads.take(v)).collect();
    Ok((result, per_param))
}

/// Applies the configured augmentation to an episode's images.
fn augmented(
    ds: &Dataset,
    episode: &Episode,
    cfg: &TrainConfig,
) -> (Vec<Vec<Image>>, Vec<Image>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(episode.seed, 1));
    let (_, h, w) = ds.image_dims();
    let mut maybe = |img: &Image, on: bool| {
        if on {
            AugmentParams::sample(&mut rng, h, w).apply(img)
        } else {
            img.clone()
        }
    };
    let support = episode
        .support_by_class(ds)
        .into_iter()
        .map(|imgs| imgs.into_iter().map(|i| maybe(i, cfg.augment_support)).collect())
        .collect();
    let queries = episode
        .query_images(ds)
        .into_iter()
        .map(|i| maybe(i, cfg.augment_query))
        .collect();
    (support, queries)
}

/// One optimisation step on one episode.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut OptState,
    mask: &[bool],
    ds: &Dataset,
    episode: &Episode,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepResult> {
    let (support, queries) = augmented(ds, episode, cfg);
    let images = EpisodeImages {
        support: support.iter().map(|c| c.iter().collect()).collect(),
        queries: queries.iter().collect(),
    };
    let labels = episode.query_labels();
    let (result, grads) = loss_and_grads(params, mask, &images, &labels, cfg.variant)?;
    if !result.loss.is_finite() {
        return Err(Error::Diverged { seed: episode.seed });
    }
    adamw_step(params, &grads, opt, &cfg.adamw(lr))?;
    Ok(result)
}

/// Meta-trains `init` on episodes from `train_ds`, selecting the epoch with
/// the best accuracy on a fixed set of validation episodes from `val_ds`.
pub fn meta_train(
    init: &ModelParams,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mask = trainable_mask(init.config(), &cfg.policy)?;
    let mut params = init.clone();
    let mut opt = OptState::new(&params, &mask);
    let total = cfg.total_steps();
    let val_spec = EvalSpec {
        way: cfg.way,
        shot: cfg.shot,
        query: cfg.val_query,
        tasks: cfg.val_episodes,
        seed: derive_seed(cfg.seed, u64::MAX),
        variant: cfg.variant,
    };
    let mut best = (f64::NEG_INFINITY, 0, params.clone());
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let (mut correct, mut seen) = (0, 0);
        let mut lr = cfg.lr_init;
        for _ in 0..cfg.episodes_per_epoch {
            lr = cosine_lr(step, total, cfg.lr_init, cfg.lr_min);
            let seed = derive_seed(cfg.seed, step as u64);
            let episode = sample_episode(train_ds, cfg.way, cfg.shot, cfg.query, seed)?;
            let r = train_step(&mut params, &mut opt, &mask, train_ds, &episode, cfg, lr)?;
            loss_sum += r.loss;
            correct += r.correct;
            seen += r.total;
            step += 1;
        }
        let val_acc = if cfg.val_episodes > 0 {
            let accs = evaluate_episodes(&params, val_ds, &val_spec, cfg.threads)?;
            accs.iter().sum::<f64>() / accs.len() as f64
        } else {
            correct as f64 / seen as f64
        };
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / cfg.episodes_per_epoch as f64,
            train_acc: correct as f64 / seen as f64,
            val_acc,
            lr,
        };
        on_epoch(&entry);
        if val_acc > best.0 {
            best = (val_acc, epoch, params.clone());
        }
        log.push(entry);
    }
    Ok(TrainOutcome {
        best: best.2,
        best_epoch: best.1,
        log,
    })
}
