use std::path::{Path, PathBuf};

use anyhow::Context;
use factr_autodiff::Real;
use factr_core::data::{load_csv_dataset, synth_retail_generate, PreparedData, SeriesDataset, MIN_SYNTH_DAYS};
use factr_core::eval::{
    audit_params, evaluate, export_interpretability, forecast_dump, per_channel_errors, scaling_benchmark, BenchShape,
    ChannelError, ForecastReport, ScalingComponent, Space,
};
use factr_core::model::{Checkpoint, Factr, ModelConfig, Variant};
use factr_core::train::{
    pretrain_masked, reconstruction_config, train, transfer_train, TrainLog, TransferMode, PRETRAIN_EPOCHS,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{parse_config, validate, LoadedConfig, Precision, RunConfig};
use crate::output::{claim, Manifest, RunDir};
use crate::Invalid;

pub const SEED_ENV: &str = "FACTR_SEED";

/// Command-line values that replace configuration fields.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub horizon: Option<usize>,
    pub rho: Option<f64>,
    pub variant: Option<Variant>,
    pub mask_ratio: Option<f64>,
}

/// Flag, then configuration, then the environment, then zero.
pub fn resolve_seed(flag: Option<u64>, loaded: Option<&LoadedConfig>) -> anyhow::Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(l) = loaded {
        if let Some(s) = l.config.seed {
            return Ok(s);
        }
        if l.sets("train.seed") {
            return Ok(l.config.train.seed);
        }
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer")).into()),
        Err(_) => Ok(0),
    }
}

/// A validated run: configuration, seed and prepared data.
struct Run {
    loaded: LoadedConfig,
    seed: u64,
    data: PreparedData,
    dataset_path: PathBuf,
}

impl Run {
    fn resolved(&self) -> RunConfig {
        let mut c = self.loaded.config.clone();
        c.seed = Some(self.seed);
        if let Some(d) = &mut c.dataset {
            d.path = self.dataset_path.clone();
        }
        c
    }

    fn manifest(&self, command: &str) -> anyhow::Result<Manifest> {
        let mut m = Manifest::new(command, self.seed, &self.resolved())?.input("dataset", &self.dataset_path)?;
        if let Some(src) = &self.loaded.source {
            m = m.input("config", src)?;
        }
        Ok(m)
    }

    fn dataset_name(&self) -> String {
        self.dataset_path
            .file_stem()
            .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<LoadedConfig> {
    match path {
        Some(p) => parse_config(p),
        None => Ok(LoadedConfig::defaults()),
    }
}

fn apply(loaded: &mut LoadedConfig, o: &Overrides, seed: u64) {
    let c = &mut loaded.config;
    if let Some(h) = o.horizon {
        c.model.horizon = h;
    }
    if let Some(r) = o.rho {
        c.train.rho = r;
    }
    if let Some(v) = o.variant {
        c.model.variant = v;
    }
    if let Some(m) = o.mask_ratio {
        c.train.mask_ratio = m;
    }
    c.seed = Some(seed);
    c.train.seed = seed;
}

fn read_dataset(loaded: &LoadedConfig) -> anyhow::Result<(SeriesDataset, PathBuf)> {
    let path = loaded
        .dataset_path()
        .ok_or_else(|| Invalid("configuration has no 'dataset.path'".into()))?;
    if !path.is_file() {
        return Err(Invalid(format!("dataset {} not found", path.display())).into());
    }
    let frequency = loaded.config.dataset.as_ref().and_then(|d| d.frequency);
    let raw = load_csv_dataset(&path, frequency)?;
    let path = std::path::absolute(&path).unwrap_or(path);
    Ok((raw, path))
}

/// Fits the model's channel count to the data unless the file fixed it.
fn fit_channels(loaded: &mut LoadedConfig, channels: usize) -> anyhow::Result<()> {
    if !loaded.sets("model.channels") {
        loaded.config.model.channels = channels;
    } else if loaded.config.model.channels != channels {
        return Err(Invalid(format!(
            "at 'model.channels': configured {} but the dataset has {channels} channels",
            loaded.config.model.channels
        ))
        .into());
    }
    Ok(())
}

/// Parses, overrides, validates and loads everything a run needs.
fn prepare_run(config: Option<&Path>, o: &Overrides, adjust: impl FnOnce(&mut LoadedConfig)) -> anyhow::Result<Run> {
    let mut loaded = load_config(config)?;
    let seed = resolve_seed(o.seed, Some(&loaded))?;
    apply(&mut loaded, o, seed);
    adjust(&mut loaded);
    validate(&loaded.config)?;
    let (raw, dataset_path) = read_dataset(&loaded)?;
    fit_channels(&mut loaded, raw.channels())?;
    validate(&loaded.config)?;
    let data = PreparedData::new(&raw, &loaded.config.split)?;
    Ok(Run {
        loaded,
        seed,
        data,
        dataset_path,
    })
}

fn out_dir(flag: Option<&Path>, fallback: impl FnOnce() -> PathBuf) -> PathBuf {
    flag.map_or_else(fallback, Path::to_path_buf)
}

fn init_model<F: Real>(config: ModelConfig, seed: u64) -> anyhow::Result<Factr<F>> {
    Ok(Factr::new(config, &mut ChaCha8Rng::seed_from_u64(seed))?)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    dataset: &'a str,
    windows: usize,
    space: Space,
    mse: f64,
    mae: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_val: Option<f64>,
    report: &'a ForecastReport,
    ranking: Vec<ChannelError>,
}

fn write_report(
    run_dir: &mut RunDir,
    dataset: &str,
    report: &ForecastReport,
    space: Space,
    best: Option<(usize, f64)>,
) -> anyhow::Result<()> {
    run_dir.write_json(
        "report.json",
        &ReportFile {
            dataset,
            windows: report.windows,
            space,
            mse: report.mse,
            mae: report.mae,
            best_epoch: best.map(|b| b.0),
            best_val: best.map(|b| b.1),
            report,
            ranking: per_channel_errors(report),
        },
    )?;
    println!("test mse {:.6} mae {:.6} over {} windows", report.mse, report.mae, report.windows);
    Ok(())
}

fn save_checkpoint<F: Real>(run_dir: &mut RunDir, name: &str, ckpt: &Checkpoint<F>) -> anyhow::Result<()> {
    run_dir.write(name, ckpt.to_bytes()?)?;
    Ok(())
}

fn write_log(run_dir: &mut RunDir, name: &str, log: &TrainLog) -> anyhow::Result<()> {
    run_dir.write(name, log.to_tsv())?;
    Ok(())
}

pub struct TrainArgs<'a> {
    pub config: &'a Path,
    pub out: Option<&'a Path>,
    pub overrides: Overrides,
    pub force: bool,
}

pub fn train_cmd(args: TrainArgs<'_>) -> anyhow::Result<()> {
    let run = prepare_run(Some(args.config), &args.overrides, |_| {})?;
    let out = out_dir(args.out, || run.loaded.base.join(&run.loaded.config.out));
    let mut dir = RunDir::create(&out, args.force)?;
    match run.loaded.config.precision {
        Precision::F32 => train_typed::<f32>(&run, &mut dir)?,
        Precision::F64 => train_typed::<f64>(&run, &mut dir)?,
    }
    dir.write_json("run_config.json", &run.resolved())?;
    dir.finish(run.manifest("train")?)?;
    Ok(())
}

fn train_typed<F: Real>(run: &Run, dir: &mut RunDir) -> anyhow::Result<()> {
    let cfg = &run.loaded.config;
    let model = init_model::<F>(cfg.model.clone(), run.seed)?;
    eprintln!(
        "training {} on {} ({} channels, horizon {}, seed {})",
        cfg.model.variant,
        run.dataset_name(),
        cfg.model.channels,
        cfg.model.horizon,
        run.seed
    );
    let outcome = train(model, &run.data, &cfg.train)?;
    eprintln!(
        "{} epochs, best epoch {} val {:.6}",
        outcome.log.epochs.len(),
        outcome.best_epoch,
        outcome.best_val
    );
    save_checkpoint(dir, "best.ckpt", &Checkpoint::from_model(&outcome.model))?;
    write_log(dir, "train_log.tsv", &outcome.log)?;
    let report = evaluate(&outcome.model, &run.data, cfg.train.eval_batch, Space::Standardized)?;
    write_report(
        dir,
        &run.dataset_name(),
        &report,
        Space::Standardized,
        Some((outcome.best_epoch, outcome.best_val)),
    )
}

pub struct PretrainArgs<'a> {
    pub config: &'a Path,
    pub out: Option<&'a Path>,
    pub overrides: Overrides,
    pub force: bool,
}

pub fn pretrain_cmd(args: PretrainArgs<'_>) -> anyhow::Result<()> {
    let run = prepare_run(Some(args.config), &args.overrides, |l| {
        l.config.model = reconstruction_config(&l.config.model);
        if !l.sets("train.max_epochs") {
            l.config.train.max_epochs = PRETRAIN_EPOCHS;
        }
    })?;
    let out = out_dir(args.out, || run.loaded.base.join(&run.loaded.config.out));
    let mut dir = RunDir::create(&out, args.force)?;
    match run.loaded.config.precision {
        Precision::F32 => pretrain_typed::<f32>(&run, &mut dir)?,
        Precision::F64 => pretrain_typed::<f64>(&run, &mut dir)?,
    }
    dir.write_json("run_config.json", &run.resolved())?;
    dir.finish(run.manifest("pretrain")?)?;
    Ok(())
}

fn pretrain_typed<F: Real>(run: &Run, dir: &mut RunDir) -> anyhow::Result<()> {
    let cfg = &run.loaded.config;
    let model = init_model::<F>(cfg.model.clone(), run.seed)?;
    eprintln!(
        "pretraining on {} with {:.0}% of patches masked for {} epochs",
        run.dataset_name(),
        cfg.train.mask_ratio * 100.0,
        cfg.train.max_epochs
    );
    let pre = pretrain_masked(model, &run.data, &cfg.train)?;
    save_checkpoint(dir, "encoder.ckpt", &pre.encoder)?;
    save_checkpoint(dir, "model.ckpt", &Checkpoint::from_model(&pre.outcome.model))?;
    write_log(dir, "pretrain_log.tsv", &pre.outcome.log)?;
    let epochs = &pre.outcome.log.epochs;
    if let (Some(first), Some(last)) = (epochs.first(), epochs.last()) {
        println!(
            "reconstruction loss {:.6} -> {:.6} ({:.1}% lower)",
            first.train_loss,
            last.train_loss,
            100.0 * (1.0 - last.train_loss / first.train_loss)
        );
    }
    Ok(())
}

pub struct TransferArgs<'a> {
    pub config: &'a Path,
    pub checkpoint: &'a Path,
    pub out: Option<&'a Path>,
    pub overrides: Overrides,
    pub force: bool,
    pub mode: TransferMode,
}

pub fn transfer_cmd(args: TransferArgs<'_>) -> anyhow::Result<()> {
    if !args.checkpoint.is_file() {
        return Err(Invalid(format!("checkpoint {} not found", args.checkpoint.display())).into());
    }
    let run = prepare_run(Some(args.config), &args.overrides, |_| {})?;
    let out = out_dir(args.out, || run.loaded.base.join(&run.loaded.config.out));
    let mut dir = RunDir::create(&out, args.force)?;
    let config = match run.loaded.config.precision {
        Precision::F32 => transfer_typed::<f32>(&run, &args, &mut dir)?,
        Precision::F64 => transfer_typed::<f64>(&run, &args, &mut dir)?,
    };
    let mut resolved = run.resolved();
    resolved.model = config;
    dir.write_json("run_config.json", &resolved)?;
    let command = match args.mode {
        TransferMode::Probe => "probe",
        TransferMode::Finetune => "finetune",
    };
    dir.finish(run.manifest(command)?.input("encoder", args.checkpoint)?)?;
    Ok(())
}

fn transfer_typed<F: Real>(run: &Run, args: &TransferArgs<'_>, dir: &mut RunDir) -> anyhow::Result<ModelConfig> {
    let cfg = &run.loaded.config;
    let encoder = Checkpoint::<F>::load(args.checkpoint)?;
    eprintln!(
        "{:?} transfer to {} at horizon {}",
        args.mode,
        run.dataset_name(),
        cfg.model.horizon
    );
    let outcome = transfer_train(&encoder, &run.data, cfg.model.horizon, args.mode, &cfg.train)?;
    save_checkpoint(dir, "best.ckpt", &Checkpoint::from_model(&outcome.model))?;
    write_log(dir, "train_log.tsv", &outcome.log)?;
    let report = evaluate(&outcome.model, &run.data, cfg.train.eval_batch, Space::Standardized)?;
    write_report(
        dir,
        &run.dataset_name(),
        &report,
        Space::Standardized,
        Some((outcome.best_epoch, outcome.best_val)),
    )?;
    Ok(outcome.model.config().clone())
}

/// A checkpoint together with the run configuration that locates its data.
struct Trained {
    run: Run,
    checkpoint: PathBuf,
}

fn load_trained(checkpoint: &Path, config: Option<&Path>, seed: Option<u64>) -> anyhow::Result<Trained> {
    if !checkpoint.is_file() {
        return Err(Invalid(format!("checkpoint {} not found", checkpoint.display())).into());
    }
    let config = match config {
        Some(c) => c.to_path_buf(),
        None => {
            let beside = checkpoint.with_file_name("run_config.json");
            if !beside.is_file() {
                return Err(Invalid(format!(
                    "no --config given and no run_config.json next to {}",
                    checkpoint.display()
                ))
                .into());
            }
            beside
        }
    };
    let overrides = Overrides {
        seed,
        ..Overrides::default()
    };
    // The checkpoint carries the architecture; the configuration only
    // supplies data, split and evaluation settings.
    let architecture = Checkpoint::<f32>::load(checkpoint)?.config;
    let run = prepare_run(Some(&config), &overrides, |l| l.config.model = architecture)?;
    Ok(Trained {
        run,
        checkpoint: checkpoint.to_path_buf(),
    })
}

fn load_model<F: Real>(t: &Trained) -> anyhow::Result<Factr<F>> {
    let ckpt = Checkpoint::<F>::load(&t.checkpoint)?;
    let channels = t.run.data.channels();
    if ckpt.config.channels != channels {
        return Err(Invalid(format!(
            "checkpoint expects {} channels but the dataset has {channels}",
            ckpt.config.channels
        ))
        .into());
    }
    Ok(ckpt.into_model()?)
}

fn default_beside(checkpoint: &Path, name: &str) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(name)
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub config: Option<&'a Path>,
    pub out: Option<&'a Path>,
    pub raw: bool,
    pub force: bool,
}

pub fn eval_cmd(args: EvalArgs<'_>) -> anyhow::Result<()> {
    let trained = load_trained(args.checkpoint, args.config, None)?;
    let out = out_dir(args.out, || default_beside(args.checkpoint, "eval"));
    let mut dir = RunDir::create(&out, args.force)?;
    let space = if args.raw { Space::Raw } else { Space::Standardized };
    let batch = trained.run.loaded.config.train.eval_batch;
    let report = match trained.run.loaded.config.precision {
        Precision::F32 => evaluate(&load_model::<f32>(&trained)?, &trained.run.data, batch, space)?,
        Precision::F64 => evaluate(&load_model::<f64>(&trained)?, &trained.run.data, batch, space)?,
    };
    write_report(&mut dir, &trained.run.dataset_name(), &report, space, None)?;
    dir.finish(trained.run.manifest("eval")?.input("checkpoint", args.checkpoint)?)?;
    Ok(())
}

pub struct InspectArgs<'a> {
    pub checkpoint: &'a Path,
    pub config: Option<&'a Path>,
    pub out: Option<&'a Path>,
    pub window: usize,
    pub force: bool,
}

pub fn inspect_cmd(args: InspectArgs<'_>) -> anyhow::Result<()> {
    let trained = load_trained(args.checkpoint, args.config, None)?;
    let out = out_dir(args.out, || default_beside(args.checkpoint, "inspect"));
    let mut dir = RunDir::create(&out, args.force)?;
    let data = &trained.run.data;
    let export = match trained.run.loaded.config.precision {
        Precision::F32 => export_interpretability(&load_model::<f32>(&trained)?, data, args.window, &out)?,
        Precision::F64 => export_interpretability(&load_model::<f64>(&trained)?, data, args.window, &out)?,
    };
    dir.record_paths(&export.files);
    println!(
        "window {} (rows {}..): {} files in {}",
        export.window,
        export.start,
        export.files.len(),
        out.display()
    );
    dir.finish(trained.run.manifest("inspect")?.input("checkpoint", args.checkpoint)?)?;
    Ok(())
}

pub struct DumpArgs<'a> {
    pub checkpoint: &'a Path,
    pub config: Option<&'a Path>,
    pub out: Option<&'a Path>,
    pub windows: &'a [usize],
    pub force: bool,
}

pub fn dump_cmd(args: DumpArgs<'_>) -> anyhow::Result<()> {
    let trained = load_trained(args.checkpoint, args.config, None)?;
    let out = out_dir(args.out, || default_beside(args.checkpoint, "dump"));
    let mut dir = RunDir::create(&out, args.force)?;
    let (data, name) = (&trained.run.data, trained.run.dataset_name());
    let files = match trained.run.loaded.config.precision {
        Precision::F32 => forecast_dump(&load_model::<f32>(&trained)?, data, &name, args.windows, &out)?,
        Precision::F64 => forecast_dump(&load_model::<f64>(&trained)?, data, &name, args.windows, &out)?,
    };
    dir.record_paths(&files);
    println!("{} files in {}", files.len(), out.display());
    dir.finish(trained.run.manifest("dump")?.input("checkpoint", args.checkpoint)?)?;
    Ok(())
}

pub struct SynthArgs<'a> {
    pub days: usize,
    pub seed: Option<u64>,
    pub out: &'a Path,
    pub force: bool,
}

#[derive(Serialize)]
struct SynthEcho {
    days: usize,
    seed: u64,
}

/// Writes the retail series to `out` and its manifest beside it.
pub fn synth_cmd(args: SynthArgs<'_>) -> anyhow::Result<()> {
    let seed = resolve_seed(args.seed, None)?;
    if args.days < MIN_SYNTH_DAYS {
        return Err(Invalid(format!("--days must be at least {MIN_SYNTH_DAYS}, got {}", args.days)).into());
    }
    let name = args
        .out
        .file_name()
        .ok_or_else(|| Invalid(format!("--out {} is not a file path", args.out.display())))?
        .to_string_lossy()
        .into_owned();
    let manifest_path = args.out.with_file_name(format!("{name}.manifest.json"));
    claim(args.out, args.force)?;
    claim(&manifest_path, args.force)?;
    let data = synth_retail_generate(args.days, seed)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    data.write_csv(args.out)?;
    let mut manifest = Manifest::new("synth", seed, &SynthEcho { days: args.days, seed })?;
    manifest.outputs = vec![name];
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&manifest_path, text).with_context(|| format!("writing {}", manifest_path.display()))?;
    println!("{} days x {} channels -> {}", data.rows(), data.channels(), args.out.display());
    Ok(())
}

pub struct ParamsArgs<'a> {
    pub config: Option<&'a Path>,
    pub checkpoint: Option<&'a Path>,
    pub out: Option<&'a Path>,
    pub overrides: Overrides,
    pub force: bool,
}

/// Prints the parameter audit; writes it with a manifest when `--out` is
/// given.
pub fn params_cmd(args: ParamsArgs<'_>) -> anyhow::Result<()> {
    let (ckpt, seed, echo, inputs) = match (args.checkpoint, args.config) {
        (Some(_), Some(_)) => return Err(Invalid("give either --config or --checkpoint, not both".into()).into()),
        (Some(path), None) => {
            if !path.is_file() {
                return Err(Invalid(format!("checkpoint {} not found", path.display())).into());
            }
            let ckpt = Checkpoint::<f64>::load(path)?;
            let echo = serde_json::to_value(&ckpt.config)?;
            (ckpt, 0, echo, vec![("checkpoint", path.to_path_buf())])
        }
        (None, config) => {
            let mut loaded = load_config(config)?;
            let seed = resolve_seed(args.overrides.seed, Some(&loaded))?;
            apply(&mut loaded, &args.overrides, seed);
            validate(&loaded.config)?;
            let mut inputs = Vec::new();
            if loaded.config.dataset.is_some() && !loaded.sets("model.channels") {
                let (raw, path) = read_dataset(&loaded)?;
                fit_channels(&mut loaded, raw.channels())?;
                inputs.push(("dataset", path));
            }
            if let Some(src) = &loaded.source {
                inputs.push(("config", src.clone()));
            }
            let model = init_model::<f64>(loaded.config.model.clone(), seed)?;
            let echo = serde_json::to_value(&loaded.config.model)?;
            (Checkpoint::from_model(&model), seed, echo, inputs)
        }
    };
    let audit = audit_params(&ckpt)?;
    let text = audit.to_text();
    print!("{text}");
    if let Some(out) = args.out {
        let mut dir = RunDir::create(out, args.force)?;
        dir.write("params.txt", &text)?;
        dir.write_json("params.json", &audit)?;
        let mut manifest = Manifest::new("params", seed, &echo)?;
        for (role, path) in inputs {
            manifest = manifest.input(role, &path)?;
        }
        dir.finish(manifest)?;
    }
    Ok(())
}

pub struct BenchArgs<'a> {
    pub components: &'a [ScalingComponent],
    pub sizes: Option<&'a [usize]>,
    pub repetitions: usize,
    pub out: Option<&'a Path>,
    pub force: bool,
}

pub fn default_sizes(component: ScalingComponent) -> Vec<usize> {
    match component {
        ScalingComponent::Fm => vec![64, 128, 256, 512],
        ScalingComponent::Temporal => vec![16, 32, 64, 128],
    }
}

#[derive(Serialize)]
struct BenchEcho {
    shape: BenchShape,
    sizes: Vec<(ScalingComponent, Vec<usize>)>,
}

pub fn bench_cmd(args: BenchArgs<'_>) -> anyhow::Result<()> {
    if args.repetitions == 0 {
        return Err(Invalid("--repetitions must be positive".into()).into());
    }
    if args.sizes.is_some_and(|s| s.len() < 2 || s.contains(&0)) {
        return Err(Invalid("--sizes needs at least two positive sizes".into()).into());
    }
    let mut dir = args.out.map(|o| RunDir::create(o, args.force)).transpose()?;
    let shape = BenchShape {
        repetitions: args.repetitions,
        ..BenchShape::default()
    };
    let mut sizes = Vec::new();
    for &component in args.components {
        let s = args.sizes.map_or_else(|| default_sizes(component), <[usize]>::to_vec);
        let table = scaling_benchmark(component, &s, &shape)?;
        let tsv = table.to_tsv();
        println!("# {component:?}\n{tsv}");
        if let Some(d) = &mut dir {
            d.write(&format!("bench_{}.tsv", format!("{component:?}").to_lowercase()), &tsv)?;
        }
        sizes.push((component, s));
    }
    if let Some(d) = dir {
        d.finish(Manifest::new("bench", 0, &BenchEcho { shape, sizes })?)?;
    }
    Ok(())
}
