use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use imaformer::episode::{
    check_disjoint, generate_synthetic, load_dataset, sample_episode, save_dataset, Dataset, Split,
    SyntheticSpec,
};
use imaformer::eval::{ablate, ablation_csv, ablation_grid, evaluate, export_embeddings};
use imaformer::mutual_attention::Variant;
use imaformer::train::{meta_train, FineTunePolicy};
use imaformer::vit::{decode_checkpoint, encode_checkpoint, ModelParams};

mod config;

use config::{Preset, RunConfig};

const BUILD_ID: &str = env!("IMAFORMER_BUILD_ID");

/// Exit codes, one per failure class.
mod exit {
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const CONFIG: u8 = 4;
    pub const FORMAT: u8 = 5;
    pub const DATA: u8 = 6;
    pub const NUMERIC: u8 = 7;
    pub const INTERNAL: u8 = 1;
}

#[derive(Debug)]
pub enum CliError {
    Io(String),
    Config(String),
    Format(String),
    Data(String),
    Numeric(String),
    Internal(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => exit::IO,
            CliError::Config(_) => exit::CONFIG,
            CliError::Format(_) => exit::FORMAT,
            CliError::Data(_) => exit::DATA,
            CliError::Numeric(_) => exit::NUMERIC,
            CliError::Internal(_) => exit::INTERNAL,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Io(m)
            | CliError::Config(m)
            | CliError::Format(m)
            | CliError::Data(m)
            | CliError::Numeric(m)
            | CliError::Internal(m) => m,
        }
    }
}

impl From<imaformer::Error> for CliError {
    fn from(e: imaformer::Error) -> Self {
        use imaformer::Error as E;
        let m = e.to_string();
        match e {
            E::Io(_) => CliError::Io(m),
            E::Format { .. } | E::Json(_) => CliError::Format(m),
            E::Config(_) | E::InvalidArgument { .. } => CliError::Config(m),
            E::InsufficientData { .. } => CliError::Data(m),
            E::NonFiniteGradient { .. } | E::Diverged { .. } => CliError::Numeric(m),
            _ => CliError::Internal(m),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "imaformer",
    version = BUILD_ID,
    about = "Few-shot classification with intra-task mutual attention on a small Vision Transformer",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one split of the synthetic benchmark as an FSDS file.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Which class range to generate.
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Episodic meta-training; writes the best-on-validation checkpoint.
    MetaTrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        /// Training dataset.
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset; defaults to the training dataset.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Start from this checkpoint instead of a fresh initialisation.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value = "model.imac")]
        out: PathBuf,
        /// JSON-lines training log; defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on seeded episodes and write an EvalReport.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every cell of a variant × fine-tuning grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        val_data: PathBuf,
        #[arg(long)]
        test_data: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        /// Comma-separated variants.
        #[arg(long, default_value = "vanilla,imaformer", value_delimiter = ',')]
        variants: Vec<Variant>,
        /// Comma-separated trainable trailing block counts.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        /// Comma-separated CLS-token settings.
        #[arg(long, default_value = "false,true", value_delimiter = ',')]
        cls: Vec<bool>,
        #[arg(long, default_value = "ablation.csv")]
        out: PathBuf,
    },
    /// Dump before/after query embeddings of one episode with 2-D PCA coordinates.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        episode_seed: u64,
        #[arg(long, default_value = "embeddings.csv")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to use for keys absent from the config file.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Master seed. Falls back to IMAFORMER_SEED, then the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for evaluation.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    episodes_per_epoch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    trainable_last_blocks: Option<usize>,
    #[arg(long)]
    train_cls_token: Option<bool>,
}

#[derive(Args, Clone, Default)]
struct EvalFlags {
    #[arg(long = "eval-variant")]
    eval_variant: Option<Variant>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    way: Option<usize>,
    #[arg(long)]
    shot: Option<usize>,
    #[arg(long)]
    query: Option<usize>,
    #[arg(long)]
    eval_seed: Option<u64>,
}

fn resolve(common: &Common) -> CliResult<RunConfig> {
    let (mut cfg, file_has_seed) = RunConfig::load(common.config.as_deref(), common.preset)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    } else if let Ok(s) = std::env::var("IMAFORMER_SEED") {
        if !file_has_seed {
            cfg.seed = s
                .parse()
                .map_err(|_| CliError::Config(format!("IMAFORMER_SEED={s:?} is not a u64")))?;
        }
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn apply_train(cfg: &mut RunConfig, f: &TrainFlags) {
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = f.$flag { cfg.$field = v; })*
        };
    }
    set!(variant => variant, epochs => epochs, episodes_per_epoch => episodes_per_epoch,
         lr => lr_init, temperature => temperature,
         trainable_last_blocks => trainable_last_blocks, train_cls_token => train_cls_token);
}

fn apply_eval(cfg: &mut RunConfig, f: &EvalFlags) {
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = f.$flag { cfg.$field = v; })*
        };
    }
    set!(eval_variant => variant, tasks => eval_tasks, way => eval_way, shot => eval_shot,
         query => eval_query, eval_seed => eval_seed);
}

fn validated(cfg: RunConfig) -> CliResult<RunConfig> {
    cfg.validate().map_err(CliError::Config)?;
    Ok(cfg)
}

/// Provenance block echoed into every artifact.
fn provenance(command: &str, cfg: &RunConfig) -> Value {
    json!({ "build": BUILD_ID, "command": command, "config": cfg })
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serialisable");
    s.push('\n');
    s
}

fn load_data(path: &Path) -> CliResult<Dataset> {
    if !path.exists() {
        return Err(CliError::Io(format!("{}: no such file", path.display())));
    }
    load_dataset(path).map_err(|e| match CliError::from(e) {
        CliError::Format(m) => CliError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn load_model(path: &Path) -> CliResult<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_checkpoint(&bytes)
        .map(|(p, _)| p)
        .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

/// Model parameters for training: a checkpoint, or a fresh initialisation
/// from the run configuration.
fn initial_params(cfg: &mut RunConfig, init: Option<&Path>) -> CliResult<ModelParams> {
    match init {
        Some(p) => {
            let mut params = load_model(p)?;
            cfg.adopt_model(params.config());
            let m = cfg.model();
            params.set_mechanism(m.mechanism, m.temperature);
            Ok(params)
        }
        None => Ok(ModelParams::init(&cfg.model(), cfg.seed)?),
    }
}

fn check_image_dims(ds: &Dataset, params: &ModelParams, path: &Path) -> CliResult<()> {
    let m = params.config();
    let dims = ds.image_dims();
    if dims != (m.channels, m.image_size, m.image_size) {
        return Err(CliError::Config(format!(
            "{}: images are {}×{}×{}, model expects {}×{}×{}",
            path.display(),
            dims.0,
            dims.1,
            dims.2,
            m.channels,
            m.image_size,
            m.image_size
        )));
    }
    Ok(())
}

/// Overlapping class ids across splits are a data error, not a bad argument.
fn disjoint(datasets: &[&Dataset]) -> CliResult<()> {
    check_disjoint(datasets).map_err(|e| CliError::Data(e.to_string()))
}

fn gen_data(common: &Common, split: SplitArg, out: &Path) -> CliResult<()> {
    let cfg = validated(resolve(common)?)?;
    let base = cfg.synthetic();
    let (split, classes, offset) = match split {
        SplitArg::Train => (Split::Train, cfg.train_classes, 0),
        SplitArg::Val => (Split::Val, cfg.val_classes, cfg.train_classes),
        SplitArg::Test => (Split::Test, cfg.test_classes, cfg.train_classes + cfg.val_classes),
    };
    let spec = SyntheticSpec {
        classes,
        class_offset: offset as u64,
        ..base
    };
    let mut ds = generate_synthetic(&spec, split)?;
    ds.set_provenance(provenance("gen-data", &cfg));
    save_dataset(&ds, out).map_err(|e| match e {
        imaformer::Error::Io(io) => CliError::io(out, io),
        other => other.into(),
    })?;
    eprintln!(
        "wrote {} ({} split, {} classes × {} images)",
        out.display(),
        split.as_str(),
        ds.num_classes(),
        spec.images_per_class
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn meta_train_cmd(
    common: &Common,
    flags: &TrainFlags,
    data: &Path,
    val: Option<&Path>,
    init: Option<&Path>,
    out: &Path,
    log: Option<&Path>,
) -> CliResult<()> {
    let mut cfg = resolve(common)?;
    apply_train(&mut cfg, flags);
    let init_params = initial_params(&mut cfg, init)?;
    let cfg = validated(cfg)?;
    let train_ds = load_data(data)?;
    check_image_dims(&train_ds, &init_params, data)?;
    let val_ds = match val {
        Some(p) => {
            let v = load_data(p)?;
            check_image_dims(&v, &init_params, p)?;
            disjoint(&[&train_ds, &v])?;
            Some(v)
        }
        None => None,
    };
    let prov = provenance("meta-train", &cfg);
    let log_path = log
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.jsonl", out.display())));
    let mut lines = vec![serde_json::to_string(&json!({ "provenance": prov })).unwrap()];
    let outcome = meta_train(
        &init_params,
        &train_ds,
        val_ds.as_ref().unwrap_or(&train_ds),
        &cfg.train(),
        |e| {
            eprintln!(
                "epoch {:>3}  loss {:.4}  train {:.3}  val {:.3}  lr {:.2e}",
                e.epoch, e.mean_loss, e.train_acc, e.val_acc, e.lr
            );
            lines.push(serde_json::to_string(e).unwrap());
        },
    )?;
    write_file(out, encode_checkpoint(&outcome.best, Some(&prov))?)?;
    let mut text = lines.join("\n");
    text.push('\n');
    write_file(&log_path, text)?;
    eprintln!(
        "wrote {} (best epoch {}) and {}",
        out.display(),
        outcome.best_epoch,
        log_path.display()
    );
    Ok(())
}

fn evaluate_cmd(
    common: &Common,
    flags: &EvalFlags,
    checkpoint: &Path,
    data: &Path,
    out: Option<&Path>,
) -> CliResult<()> {
    let mut cfg = resolve(common)?;
    apply_eval(&mut cfg, flags);
    let mut params = load_model(checkpoint)?;
    cfg.adopt_model(params.config());
    cfg.temperature = params.config().temperature;
    let cfg = validated(cfg)?;
    let m = cfg.model();
    params.set_mechanism(m.mechanism, m.temperature);
    let ds = load_data(data)?;
    check_image_dims(&ds, &params, data)?;
    let report = evaluate(&params, &ds, &cfg.eval(), cfg.threads)?;
    eprintln!(
        "{}: {:.2}% ± {:.2} over {} tasks ({}-way {}-shot, {} queries per class)",
        report.variant.as_str(),
        100.0 * report.mean_accuracy,
        100.0 * report.ci95,
        report.tasks,
        report.way,
        report.shot,
        report.query
    );
    let doc = to_json(&json!({ "provenance": provenance("evaluate", &cfg), "report": report }));
    match out {
        Some(p) => write_file(p, doc),
        None => {
            print!("{doc}");
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn ablate_cmd(
    common: &Common,
    tflags: &TrainFlags,
    eflags: &EvalFlags,
    paths: [&Path; 3],
    init: Option<&Path>,
    variants: &[Variant],
    layers: Option<&[usize]>,
    cls: &[bool],
    out: &Path,
) -> CliResult<()> {
    let mut cfg = resolve(common)?;
    apply_train(&mut cfg, tflags);
    apply_eval(&mut cfg, eflags);
    let init_params = initial_params(&mut cfg, init)?;
    let cfg = validated(cfg)?;
    let [tr, va, te] = paths;
    let (train_ds, val_ds, test_ds) = (load_data(tr)?, load_data(va)?, load_data(te)?);
    for (ds, p) in [(&train_ds, tr), (&val_ds, va), (&test_ds, te)] {
        check_image_dims(ds, &init_params, p)?;
    }
    disjoint(&[&train_ds, &val_ds, &test_ds])?;
    let depth = cfg.depth;
    let layers: Vec<usize> = layers.map_or_else(|| (1..=depth).collect(), <[usize]>::to_vec);
    if let Some(&bad) = layers.iter().find(|&&k| k == 0 || k > depth) {
        return Err(CliError::Config(format!(
            "--layers entry {bad} outside 1..={depth}"
        )));
    }
    let policies: Vec<FineTunePolicy> = layers
        .iter()
        .flat_map(|&k| cls.iter().map(move |&c| FineTunePolicy::last(k, c)))
        .collect();
    let cells = ablation_grid(variants, &policies);
    let rows = ablate(
        &init_params,
        &train_ds,
        &val_ds,
        &test_ds,
        &cfg.train(),
        &cfg.eval(),
        &cells,
        |cell, row| {
            eprintln!(
                "{:<9} {:<20} {:.2}% ± {:.2}",
                cell.variant.as_str(),
                cell.policy.label(depth),
                100.0 * row.accuracy,
                100.0 * row.ci95
            )
        },
    )?;
    write_file(out, ablation_csv(&rows))?;
    let sidecar = out.with_extension("json");
    write_file(
        &sidecar,
        to_json(&json!({ "provenance": provenance("ablate", &cfg), "rows": rows })),
    )?;
    eprintln!("wrote {} and {}", out.display(), sidecar.display());
    Ok(())
}

fn export_cmd(
    common: &Common,
    flags: &EvalFlags,
    checkpoint: &Path,
    data: &Path,
    episode_seed: u64,
    out: &Path,
) -> CliResult<()> {
    let mut cfg = resolve(common)?;
    apply_eval(&mut cfg, flags);
    let mut params = load_model(checkpoint)?;
    cfg.adopt_model(params.config());
    cfg.temperature = params.config().temperature;
    let cfg = validated(cfg)?;
    let m = cfg.model();
    params.set_mechanism(m.mechanism, m.temperature);
    let ds = load_data(data)?;
    check_image_dims(&ds, &params, data)?;
    let episode = sample_episode(&ds, cfg.eval_way, cfg.eval_shot, cfg.eval_query, episode_seed)?;
    let sidecar = export_embeddings(
        &params,
        &ds,
        &episode,
        out,
        provenance("export-embeddings", &cfg),
    )
    .map_err(|e| match e {
        imaformer::Error::Io(io) => CliError::io(out, io),
        other => other.into(),
    })?;
    eprintln!(
        "wrote {} and {} (explained variance before {:.3e}/{:.3e}, after {:.3e}/{:.3e})",
        out.display(),
        out.with_extension("json").display(),
        sidecar.explained_variance_before[0],
        sidecar.explained_variance_before[1],
        sidecar.explained_variance_after[0],
        sidecar.explained_variance_after[1]
    );
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenData { common, split, out } => gen_data(common, *split, out),
        Command::MetaTrain {
            common,
            train,
            data,
            val,
            init,
            out,
            log,
        } => meta_train_cmd(
            common,
            train,
            data,
            val.as_deref(),
            init.as_deref(),
            out,
            log.as_deref(),
        ),
        Command::Evaluate {
            common,
            eval,
            checkpoint,
            data,
            out,
        } => evaluate_cmd(common, eval, checkpoint, data, out.as_deref()),
        Command::Ablate {
            common,
            train,
            eval,
            train_data,
            val_data,
            test_data,
            init,
            variants,
            layers,
            cls,
            out,
        } => ablate_cmd(
            common,
            train,
            eval,
            [train_data, val_data, test_data],
            init.as_deref(),
            variants,
            layers.as_deref(),
            cls,
            out,
        ),
        Command::ExportEmbeddings {
            common,
            eval,
            checkpoint,
            data,
            episode_seed,
            out,
        } => export_cmd(common, eval, checkpoint, data, *episode_seed, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
