//! `esdmr`: train, evaluate and run the segmentation network.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration or checkpoint
//! error, 3 data error, 4 training divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use esdmr::checkpoint;
use esdmr::data::{
    convert_channels, hold_out_validation, load_image, load_sample, make_split, mask_image, render_overlay,
    resize_bilinear, DatasetManifest, SegSample, SplitConvention,
};
use esdmr::gradcheck;
use esdmr::metrics::{binarize, write_csv};
use esdmr::model::SIZE_MULTIPLE;
use esdmr::train::{evaluate, train, EpochRecord, StopReason, TrainConfig};
use esdmr::{Error, Model, ModelConfig, Tensor};

const CONFIG_FILE: &str = "config.json";
const CHECKPOINT_FILE: &str = "model.esdm";
const LOG_FILE: &str = "train_log.tsv";

#[derive(Parser, Debug)]
#[command(name = "esdmr", version, about = "Lightweight encoder-decoder for binary medical image segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a manifest and write the best checkpoint, a TSV log and the effective config.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest; prints per-image CSV plus a mean row.
    Eval(EvalArgs),
    /// Write binary masks (and overlays when references are given).
    Predict(PredictArgs),
    /// Run the finite-difference gradient suite at 64-bit precision.
    Gradcheck(GradcheckArgs),
    /// Print parameter and layer counts for a configuration.
    Info(InfoArgs),
}

/// Model configuration overrides; applied on top of `--config` or defaults.
#[derive(Args, Debug, Default, Clone)]
struct ModelFlags {
    /// JSON file with `model` (and optionally `train`) sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input_channels: Option<usize>,
    #[arg(long)]
    stem_width: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    stage_widths: Option<Vec<usize>>,
    #[arg(long)]
    repeat: Option<usize>,
    #[arg(long)]
    expansion: Option<usize>,
    #[arg(long, action = ArgAction::Set)]
    use_dmr: Option<bool>,
    #[arg(long)]
    num_classes: Option<usize>,
    /// `H,W`
    #[arg(long, value_delimiter = ',')]
    input_size: Option<Vec<usize>>,
    /// Seeds both initialization and shuffling.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default, Clone)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Defaults to 3, lowered to `max_epochs - 1` when that is smaller.
    #[arg(long)]
    patience: Option<usize>,
    /// `beta1,beta2`
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
    #[arg(long)]
    adam_eps: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Dataset {
    Manifest,
    Drive,
    Chase,
    Isic2016,
    Isic2017,
    Cvc,
    Mc,
    Monuseg,
    MonusegPatches,
}

impl From<Dataset> for SplitConvention {
    fn from(d: Dataset) -> Self {
        match d {
            Dataset::Manifest => SplitConvention::Manifest,
            Dataset::Drive => SplitConvention::Drive,
            Dataset::Chase => SplitConvention::Chase,
            Dataset::Isic2016 => SplitConvention::Isic2016,
            Dataset::Isic2017 => SplitConvention::Isic2017,
            Dataset::Cvc => SplitConvention::CvcClinicDb,
            Dataset::Mc => SplitConvention::Mc,
            Dataset::Monuseg => SplitConvention::MoNuSeg,
            Dataset::MonusegPatches => SplitConvention::MoNuSegPatches,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TSV manifest: `image<TAB>mask[<TAB>train|val|test]`.
    #[arg(long)]
    manifest: PathBuf,
    /// Split convention applied to the manifest.
    #[arg(long, value_enum, default_value = "manifest")]
    dataset: Dataset,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "manifest")]
    dataset: Dataset,
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
    /// Directory for `metrics.csv` and the effective config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "predictions")]
    out: PathBuf,
    /// Reference masks, paired with the images in order.
    #[arg(long = "reference")]
    references: Vec<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: usize,
}

#[derive(Args, Debug)]
struct InfoArgs {
    /// Also verify that this checkpoint loads under the configuration.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
}

/// Contents of `config.json`.
#[derive(Serialize, Deserialize, Debug, Clone)]
#[serde(deny_unknown_fields)]
struct EffectiveConfig {
    model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainConfig>,
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. } | Error::Checkpoint(_) | Error::InvalidArgument(_) => 2,
            Error::Data { .. } | Error::Image(_) => 3,
            Error::Diverged { .. } | Error::NonFiniteGradient { .. } => 4,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn config_error(field: &'static str, reason: impl Into<String>) -> Failure {
    Failure { code: 2, message: format!("invalid config field `{field}`: {}", reason.into()) }
}

type CliResult<T = ()> = Result<T, Failure>;

fn read_config(path: &Path) -> CliResult<EffectiveConfig> {
    let text = fs::read_to_string(path).map_err(|e| config_error("config", format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_error("config", format!("{}: {e}", path.display())))
}

fn expect_len<T>(field: &'static str, v: &[T], n: usize) -> CliResult {
    if v.len() == n {
        Ok(())
    } else {
        Err(config_error(field, format!("expected {n} comma-separated values, got {}", v.len())))
    }
}

fn resolve(flags: &ModelFlags) -> CliResult<(ModelConfig, Option<TrainConfig>)> {
    let (mut m, t) = match &flags.config {
        Some(p) => {
            let c = read_config(p)?;
            (c.model, c.train)
        }
        None => (ModelConfig::default(), None),
    };
    if let Some(v) = flags.input_channels {
        m.input_channels = v;
    }
    if let Some(v) = flags.stem_width {
        m.stem_width = v;
    }
    if let Some(v) = &flags.stage_widths {
        expect_len("stage_widths", v, 4)?;
        m.stage_widths = [v[0], v[1], v[2], v[3]];
    }
    if let Some(v) = flags.repeat {
        m.repeat = v;
    }
    if let Some(v) = flags.expansion {
        m.expansion = v;
    }
    if let Some(v) = flags.use_dmr {
        m.use_dmr = v;
    }
    if let Some(v) = flags.num_classes {
        m.num_classes = v;
    }
    if let Some(v) = &flags.input_size {
        expect_len("input_size", v, 2)?;
        m.input_size = (v[0], v[1]);
    }
    if let Some(v) = flags.seed {
        m.seed = v;
    }
    m.validate()?;
    Ok((m, t))
}

fn resolve_train(base: Option<TrainConfig>, f: &TrainFlags, seed: u64) -> CliResult<TrainConfig> {
    let explicit_patience = f.patience.is_some() || base.is_some();
    let mut t = base.unwrap_or_default();
    t.seed = seed;
    if let Some(v) = f.lr {
        t.lr = v;
    }
    if let Some(v) = f.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = f.max_epochs {
        t.max_epochs = v;
    }
    if let Some(v) = f.clip_norm {
        t.clip_norm = v;
    }
    if let Some(v) = f.patience {
        t.patience = v;
    }
    if let Some(v) = &f.betas {
        expect_len("betas", v, 2)?;
        t.betas = (v[0], v[1]);
    }
    if let Some(v) = f.adam_eps {
        t.adam_eps = v;
    }
    if !explicit_patience && t.patience >= t.max_epochs && t.max_epochs > 1 {
        t.patience = t.max_epochs - 1;
    }
    t.validate()?;
    Ok(t)
}

fn write_config(dir: &Path, model: &ModelConfig, train: Option<&TrainConfig>) -> CliResult {
    let c = EffectiveConfig { model: model.clone(), train: train.cloned() };
    let text = serde_json::to_string_pretty(&c).expect("config serializes");
    fs::write(dir.join(CONFIG_FILE), text + "\n").map_err(Error::from)?;
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Failure { code: 1, message: format!("{}: {e}", dir.display()) })
}

fn load_model(path: &Path, cfg: &ModelConfig) -> CliResult<Model<f32>> {
    if !path.is_file() {
        return Err(config_error("checkpoint", format!("{} does not exist", path.display())));
    }
    Ok(checkpoint::load(path, cfg)?)
}

fn load_entries(manifest: &DatasetManifest, idx: &[usize], channels: usize) -> CliResult<Vec<SegSample>> {
    idx.iter().map(|&i| Ok(manifest.load_entry(i)?.with_channels(channels)?)).collect()
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let (model_cfg, base_train) = resolve(&a.model)?;
    let train_cfg = resolve_train(base_train, &a.train, model_cfg.seed)?;
    let mut manifest = DatasetManifest::load(&a.manifest)?;
    manifest.resize_to = Some(model_cfg.input_size);
    let convention = SplitConvention::from(a.dataset);
    let mut splits = make_split(&manifest, convention, train_cfg.seed)?;
    if convention.holds_out_validation() {
        splits = hold_out_validation(&manifest, &splits, 0.1);
    }
    if splits.train.is_empty() {
        return Err(Failure { code: 3, message: format!("{}: no training entries", a.manifest.display()) });
    }
    let (ntr, nva, nte) = splits.sizes();
    info!("split sizes: train {ntr}, val {nva}, test {nte}");
    let train_set = load_entries(&manifest, &splits.train, model_cfg.input_channels)?;
    let val_set = load_entries(&manifest, &splits.val, model_cfg.input_channels)?;

    create_dir(&a.out)?;
    write_config(&a.out, &model_cfg, Some(&train_cfg))?;
    let mut model = Model::<f32>::build(&model_cfg)?;
    let outcome = train(&mut model, &train_set, &val_set, &train_cfg)?;

    let mut log = String::from(EpochRecord::TSV_HEADER);
    log.push('\n');
    for r in &outcome.history {
        log.push_str(&r.tsv());
        log.push('\n');
    }
    fs::write(a.out.join(LOG_FILE), log).map_err(Error::from)?;
    let ckpt = a.out.join(CHECKPOINT_FILE);
    checkpoint::save(&outcome.best, &ckpt)?;
    println!("checkpoint\t{}", ckpt.display());
    println!("epochs\t{}", outcome.history.len());
    println!("best_epoch\t{}", outcome.best_epoch);
    println!("stop\t{}", outcome.stop);
    if let StopReason::Diverged { reason, .. } = outcome.stop {
        return Err(Failure { code: 4, message: format!("training diverged: {reason}; wrote last finite model") });
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let (model_cfg, _) = resolve(&a.model)?;
    let model = load_model(&a.checkpoint, &model_cfg)?;
    let mut manifest = DatasetManifest::load(&a.manifest)?;
    manifest.resize_to = Some(model_cfg.input_size);
    let idx: Vec<usize> = match a.split {
        SplitArg::All => (0..manifest.entries.len()).collect(),
        s => {
            let splits = make_split(&manifest, a.dataset.into(), model_cfg.seed)?;
            match s {
                SplitArg::Train => splits.train,
                SplitArg::Val => splits.val,
                _ => splits.test,
            }
        }
    };
    let samples = load_entries(&manifest, &idx, model_cfg.input_channels)?;
    let (reports, _) = evaluate(&model, &samples)?;
    let rows: Vec<(String, _)> = samples.iter().map(|s| stem(&s.source_path)).zip(reports).collect();
    let mut csv = Vec::new();
    write_csv(&mut csv, &rows)?;
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_config(dir, &model_cfg, None)?;
        fs::write(dir.join("metrics.csv"), &csv).map_err(Error::from)?;
    }
    print!("{}", String::from_utf8(csv).expect("CSV is UTF-8"));
    Ok(())
}

/// Foreground probabilities at the image's own extents: the forward pass
/// runs at the next multiple of the size granularity and is resized back.
fn predict_foreground(model: &Model<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>, Error> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let up = |v: usize| v.div_ceil(SIZE_MULTIPLE).max(1) * SIZE_MULTIPLE;
    let x = resize_bilinear(image, up(h), up(w))?;
    let c = x.shape()[0];
    let x = x.reshape(vec![1, c, up(h), up(w)])?;
    let probs = model.predict(&x)?;
    let fg = probs.narrow_channels(1, 1)?.reshape(vec![1, up(h), up(w)])?;
    resize_bilinear(&fg, h, w)
}

fn predict_one(model: &Model<f32>, image_path: &Path, reference: Option<&Path>, out: &Path) -> Result<Vec<PathBuf>, Error> {
    let channels = model.config().input_channels;
    let (image, mask) = match reference {
        Some(r) => {
            let s = load_sample(image_path, r, None)?;
            (s.image, Some(s.mask))
        }
        None => (load_image(image_path)?, None),
    };
    let image = convert_channels(&image, channels)?;
    let pred = binarize(&predict_foreground(model, &image)?, 0.5);
    let name = stem(image_path);
    let mask_path = out.join(format!("{name}_mask.png"));
    mask_image(&pred)?.save(&mask_path)?;
    let mut written = vec![mask_path];
    if let Some(m) = mask {
        let overlay_path = out.join(format!("{name}_overlay.png"));
        render_overlay(&pred, &m)?.save(&overlay_path)?;
        written.push(overlay_path);
    }
    Ok(written)
}

fn cmd_predict(a: PredictArgs) -> CliResult {
    let (model_cfg, _) = resolve(&a.model)?;
    if !a.references.is_empty() && a.references.len() != a.images.len() {
        return Err(config_error(
            "reference",
            format!("{} references for {} images", a.references.len(), a.images.len()),
        ));
    }
    let model = load_model(&a.checkpoint, &model_cfg)?;
    create_dir(&a.out)?;
    write_config(&a.out, &model_cfg, None)?;
    let mut ok = 0;
    for (i, img) in a.images.iter().enumerate() {
        match predict_one(&model, img, a.references.get(i).map(PathBuf::as_path), &a.out) {
            Ok(paths) => {
                ok += 1;
                for p in paths {
                    println!("{}", p.display());
                }
            }
            Err(e) => warn!("skipping {}: {e}", img.display()),
        }
    }
    if ok == 0 {
        return Err(Failure { code: 3, message: "no image could be processed".into() });
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult {
    let results = gradcheck::run_suite(a.seeds.max(1))?;
    println!("op\tmax_rel_err\ttolerance\tstatus");
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{}\t{:.3e}\t{:.0e}\t{status}", r.name, r.max_rel_err, r.tolerance);
        if !r.passed() {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure { code: 1, message: format!("gradient check failed for: {}", failed.join(", ")) })
    }
}

fn cmd_info(a: InfoArgs) -> CliResult {
    let (cfg, _) = resolve(&a.model)?;
    let model = match &a.checkpoint {
        Some(p) => load_model(p, &cfg)?,
        None => Model::<f32>::build(&cfg)?,
    };
    println!("param_count\t{}", model.param_count());
    println!("dmr_param_count\t{}", model.dmr_param_count());
    println!("layer_count\t{}", model.layer_count()?);
    for (kind, n) in model.layer_histogram()? {
        println!("layers.{kind}\t{n}");
    }
    for (module, n) in model.param_breakdown() {
        println!("params.{module}\t{n}");
    }
    if let Some(p) = &a.checkpoint {
        println!("checkpoint\t{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Info(a) => cmd_info(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
