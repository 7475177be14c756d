//! Few-shot evaluation, ablation grids and embedding export.

mod pca;

pub use pca::{pca_project, Pca};

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episode::{derive_seed, sample_episode, Dataset, Episode};
use crate::error::{Error, Result};
use crate::mutual_attention::{predict, score_episode, EpisodeImages, Variant};
use crate::tensor::Tape;
use crate::train::{meta_train, FineTunePolicy, TrainConfig};
use crate::vit::{
    FinalAttention, ModelParams, ParamVars, ScoreForm,
};

/// Episode stream to evaluate on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub tasks: usize,
    pub seed: u64,
    pub variant: Variant,
}

impl EvalSpec {
    pub fn episode(&self, ds: &Dataset, index: usize) -> Result<Episode> {
        sample_episode(
            ds,
            self.way,
            self.shot,
            self.query,
            derive_seed(self.seed, index as u64),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub tasks: usize,
    pub seed: u64,
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub temperature: f64,
    pub final_attention: FinalAttention,
    pub residual: bool,
    pub score: ScoreForm,
    pub accuracies: Vec<f64>,
}

/// Mean and `1.96·s/√T` with the sample standard deviation `s`.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Predicted labels for every query of `episode`, in query order.
pub fn episode_predictions(
    params: &ModelParams,
    ds: &Dataset,
    episode: &Episode,
    variant: Variant,
) -> Result<Vec<usize>> {
    let support = episode.support_by_class(ds);
    let images = EpisodeImages {
        support,
        queries: episode.query_images(ds),
    };
    let mut tape = Tape::new();
    let pv = ParamVars::record(&mut tape, params, None);
    let rows = score_episode(&mut tape, &images, &pv, params.config(), variant)?;
    Ok(rows
        .iter()
        .map(|r| predict(tape.value(r.scores).data()))
        .collect())
}

pub fn episode_accuracy(
    params: &ModelParams,
    ds: &Dataset,
    episode: &Episode,
    variant: Variant,
) -> Result<f64> {
    let preds = episode_predictions(params, ds, episode, variant)?;
    let labels = episode.query_labels();
    let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Per-episode accuracies in episode order. The result does not depend on
/// `threads`.
pub fn evaluate_episodes(
    params: &ModelParams,
    ds: &Dataset,
    spec: &EvalSpec,
    threads: usize,
) -> Result<Vec<f64>> {
    let episodes = (0..spec.tasks)
        .map(|t| spec.episode(ds, t))
        .collect::<Result<Vec<_>>>()?;
    let run = |e: &Episode| episode_accuracy(params, ds, e, spec.variant);
    if threads <= 1 {
        return episodes.iter().map(run).collect();
    }
    with_threads(threads, || episodes.par_iter().map(run).collect())?
}

pub fn evaluate(
    params: &ModelParams,
    ds: &Dataset,
    spec: &EvalSpec,
    threads: usize,
) -> Result<EvalReport> {
    if spec.tasks == 0 {
        return Err(Error::InvalidArgument {
            op: "evaluate",
            reason: "need at least one task".into(),
        });
    }
    let accuracies = evaluate_episodes(params, ds, spec, threads)?;
    let (mean_accuracy, ci95) = mean_ci95(&accuracies);
    let cfg = params.config();
    Ok(EvalReport {
        variant: spec.variant,
        way: spec.way,
        shot: spec.shot,
        query: spec.query,
        tasks: spec.tasks,
        seed: spec.seed,
        mean_accuracy,
        ci95,
        temperature: cfg.temperature,
        final_attention: cfg.mechanism.final_attention,
        residual: cfg.mechanism.residual,
        score: cfg.mechanism.score,
        accuracies,
    })
}

/// One cell of an ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub policy: FineTunePolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub layers: usize,
    pub cls: bool,
    pub accuracy: f64,
    pub ci95: f64,
    pub tasks: usize,
}

/// Every combination of `variants × policies`, variant-major.
pub fn ablation_grid(variants: &[Variant], policies: &[FineTunePolicy]) -> Vec<AblationCell> {
    variants
        .iter()
        .flat_map(|&variant| policies.iter().map(move |&policy| AblationCell { variant, policy }))
        .collect()
}

/// Meta-trains `init` once per cell and evaluates the selected checkpoint.
/// All cells share the training seed and the evaluation episode stream.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    init: &ModelParams,
    train_ds: &Dataset,
    val_ds: &Dataset,
    test_ds: &Dataset,
    base: &TrainConfig,
    eval: &EvalSpec,
    cells: &[AblationCell],
    mut progress: impl FnMut(&AblationCell, &AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let cfg = TrainConfig {
            variant: cell.variant,
            policy: cell.policy,
            ..base.clone()
        };
        let outcome = meta_train(init, train_ds, val_ds, &cfg, |_| {})?;
        let spec = EvalSpec {
            variant: cell.variant,
            ..*eval
        };
        let report = evaluate(&outcome.best, test_ds, &spec, base.threads)?;
        let row = AblationRow {
            variant: cell.variant,
            layers: cell.policy.trainable_last_blocks,
            cls: cell.policy.train_cls_token,
            accuracy: report.mean_accuracy,
            ci95: report.ci95,
            tasks: report.tasks,
        };
        progress(cell, &row);
        rows.push(row);
    }
    Ok(rows)
}

pub const ABLATION_HEADER: &str = "variant,layers,cls,accuracy,ci95,tasks";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{}",
            r.variant.as_str(),
            r.layers,
            r.cls,
            r.accuracy,
            r.ci95,
            r.tasks
        );
    }
    out
}

/// Final-layer CLS embeddings for every query of an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryEmbeddings {
    pub labels: Vec<usize>,
    /// Final CLS of each query's own, unswapped sequence.
    pub before: Vec<Vec<f64>>,
    /// Mean over classes of the query CLS obtained after swapping in each
    /// class prototype's patch tokens.
    pub after: Vec<Vec<f64>>,
}

pub fn query_embeddings(
    params: &ModelParams,
    ds: &Dataset,
    episode: &Episode,
) -> Result<QueryEmbeddings> {
    let images = EpisodeImages {
        support: episode.support_by_class(ds),
        queries: episode.query_images(ds),
    };
    let mut tape = Tape::new();
    let pv = ParamVars::record(&mut tape, params, None);
    let cfg = params.config();
    let vanilla = score_episode(&mut tape, &images, &pv, cfg, Variant::Vanilla)?;
    let mutual = score_episode(&mut tape, &images, &pv, cfg, Variant::Imaformer)?;
    let before = vanilla
        .iter()
        .map(|r| tape.value(r.query_cls[0]).data().to_vec())
        .collect();
    let after = mutual
        .iter()
        .map(|r| {
            let mut mean = vec![0.0; cfg.dim];
            for &v in &r.query_cls {
                for (m, x) in mean.iter_mut().zip(tape.value(v).data()) {
                    *m += x / r.query_cls.len() as f64;
                }
            }
            mean
        })
        .collect();
    Ok(QueryEmbeddings {
        labels: episode.query_labels(),
        before,
        after,
    })
}

/// Metadata written next to an embedding CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub episode_seed: u64,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub dataset_classes: Vec<u64>,
    pub explained_variance_before: [f64; 2],
    pub explained_variance_after: [f64; 2],
    pub provenance: serde_json::Value,
}

/// Writes `variant,class,pca_x,pca_y` rows for both embedding sets to
/// `csv_path`, and a JSON sidecar at `csv_path` with extension `.json`.
pub fn export_embeddings(
    params: &ModelParams,
    ds: &Dataset,
    episode: &Episode,
    csv_path: &Path,
    provenance: serde_json::Value,
) -> Result<EmbeddingSidecar> {
    let emb = query_embeddings(params, ds, episode)?;
    let before = pca_project(&emb.before, 2)?;
    let after = pca_project(&emb.after, 2)?;
    let mut csv = String::from("variant,class,pca_x,pca_y\n");
    for (name, proj) in [("before", &before), ("after", &after)] {
        for (coords, label) in proj.coords.iter().zip(&emb.labels) {
            let _ = writeln!(csv, "{name},{label},{:.9},{:.9}", coords[0], coords[1]);
        }
    }
    std::fs::write(csv_path, csv)?;
    let classes = episode.support.iter().step_by(episode.shot).map(|it| ds.meta().class_ids[it.dataset_class]).collect();
    let sidecar = EmbeddingSidecar {
        episode_seed: episode.seed,
        way: episode.way,
        shot: episode.shot,
        query: episode.queries_per_class,
        dataset_classes: classes,
        explained_variance_before: [before.explained[0], before.explained[1]],
        explained_variance_after: [after.explained[0], after.explained[1]],
        provenance,
    };
    std::fs::write(
        csv_path.with_extension("json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(sidecar)
}
