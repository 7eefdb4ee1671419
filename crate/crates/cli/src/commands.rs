//! One function per subcommand.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use transmotion::data::{write_canonical, CanonicalHeader, Dataset, Fps, FrameSettings, Modality};
use transmotion::masking::MaskMode;
use transmotion::metrics::{evaluate, ConstantVelocity, CorruptionSpec, Predictor};
use transmotion::model::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use transmotion::navsim::{
    benchmark, crossing_suite, write_episode_csv, ConstantVelocityPredictor, ModelPredictor, Scenario, TrajectoryPredictor,
};
use transmotion::training::{few_shot, finetuner, pretrainer, resume, save_loss_csv, write_few_shot_csv, Trainer};

use crate::config::{invalid, PredictorKind, RunConfig};
use crate::convert::convert_file;

pub const TOOL_VERSION: &str = concat!("transmotion ", env!("CARGO_PKG_VERSION"));
pub const OUT_ENV: &str = "TRANSMOTION_OUT";

/// Flags shared by every subcommand.
#[derive(clap::Args, Clone, Debug, Default)]
pub struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (a file for `synth` and `convert`). Defaults to
    /// `$TRANSMOTION_OUT/<subcommand>`, else `runs/<subcommand>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Frame rate of the run's horizons.
    #[arg(long)]
    pub fps: Option<f64>,
    /// Observation horizon, seconds.
    #[arg(long)]
    pub obs: Option<f64>,
    /// Prediction horizon, seconds.
    #[arg(long)]
    pub pred: Option<f64>,
}

/// Training overrides.
#[derive(clap::Args, Clone, Debug, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Input modalities, e.g. `T,3dP`.
    #[arg(long)]
    pub modalities: Option<String>,
    /// Masking strategy: dynamic, fixed, modality_meta or none.
    #[arg(long, value_parser = parse_mask_mode)]
    pub mask: Option<MaskMode>,
}

fn parse_mask_mode(s: &str) -> Result<MaskMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown mask mode `{s}` (dynamic, fixed, modality_meta, none)"))
}

pub struct Run {
    pub task: &'static str,
    pub cfg: RunConfig,
    pub out: Option<PathBuf>,
}

impl Run {
    pub fn new(task: &'static str, common: &Common) -> Result<Self> {
        let mut cfg = RunConfig::load(common.config.as_deref())?;
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        if common.fps.is_some() || common.obs.is_some() || common.pred.is_some() {
            let s = cfg.settings;
            cfg.settings = FrameSettings::new(
                common.obs.unwrap_or(s.obs_seconds),
                common.pred.unwrap_or(s.pred_seconds),
                common.fps.unwrap_or(s.fps.get()),
            )
            .map_err(|e| invalid(format!("settings: {e}")))?;
        }
        let out = common.out.clone().or_else(|| cfg.paths.out.clone());
        Ok(Self { task, cfg, out })
    }

    pub fn train_flags(&mut self, f: &TrainFlags) -> Result<()> {
        let t = &mut self.cfg.train;
        if let Some(v) = f.epochs {
            t.epochs = v;
        }
        if let Some(v) = f.lr {
            t.base_lr = v;
        }
        if let Some(v) = f.batch_size {
            t.batch_size = v;
        }
        if let Some(s) = &f.modalities {
            let m = Modality::parse_list(s).map_err(|e| invalid(format!("--modalities: {e}")))?;
            t.modalities = m.clone();
            t.model.input_modalities = m;
        }
        if let Some(m) = f.mask {
            t.mask.mode = m;
        }
        Ok(())
    }

    /// Resolves and validates; call after every override is applied.
    pub fn finish_config(&mut self) -> Result<()> {
        self.cfg.resolve();
        self.cfg.paths.out = Some(self.out_dir());
        self.cfg.validate()
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            root.join(self.task)
        })
    }

    /// Creates the output directory and records the resolved config there.
    pub fn prepare_dir(&self) -> Result<PathBuf> {
        let dir = self.out_dir();
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        self.provenance(&dir, "config.json")?;
        Ok(dir)
    }

    fn provenance(&self, dir: &Path, name: &str) -> Result<()> {
        write_json(&dir.join(name), &self.cfg)?;
        fs::write(dir.join("VERSION"), format!("{TOOL_VERSION}\n"))?;
        Ok(())
    }

    /// For single-file outputs: `<file>.config.json` and `VERSION` beside it.
    pub fn prepare_file(&self) -> Result<PathBuf> {
        let file = self.out.clone().ok_or_else(|| invalid("--out: an output file is required"))?;
        let dir = file.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir)?;
        let name = format!("{}.config.json", file.file_name().unwrap_or_default().to_string_lossy());
        self.provenance(dir, &name)?;
        Ok(file)
    }
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_datasets(paths: &[PathBuf], what: &str) -> Result<Vec<Dataset>> {
    if paths.is_empty() {
        return Err(invalid(format!("{what}: no data files given")));
    }
    paths
        .iter()
        .map(|p| Dataset::load(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn pick<T: Clone>(flag: &[T], cfg: &[T]) -> Vec<T> {
    if flag.is_empty() {
        cfg.to_vec()
    } else {
        flag.to_vec()
    }
}

fn checkpoint(flag: &Option<PathBuf>, run: &Run) -> Option<PathBuf> {
    flag.clone().or_else(|| run.cfg.paths.checkpoint.clone())
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

pub fn convert(mut run: Run, input: &[PathBuf], dataset: &str, split: &str, fps: Option<f64>) -> Result<()> {
    let inputs = pick(input, &run.cfg.paths.data);
    if inputs.is_empty() {
        return Err(invalid("--input: no input files given"));
    }
    run.cfg.paths.data = inputs.clone();
    run.finish_config()?;
    let fps = fps.map(Fps::new).transpose().map_err(|e| invalid(format!("--to-fps: {e}")))?;
    let mut scenes = Vec::new();
    for p in &inputs {
        scenes.extend(convert_file(p, fps)?);
    }
    let out = run.prepare_file()?;
    write_canonical(&out, &CanonicalHeader::new(dataset, split), &scenes)?;
    eprintln!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

pub fn synth(mut run: Run, scenes: usize, dataset: &str, split: &str) -> Result<()> {
    run.finish_config()?;
    let out = run.prepare_file()?;
    let records = transmotion::data::synth_generate(run.cfg.seed, scenes, &run.cfg.synth)?;
    write_canonical(&out, &CanonicalHeader::new(dataset, split), &records)?;
    eprintln!("wrote {} scenes to {}", records.len(), out.display());
    Ok(())
}

fn train_and_save(mut trainer: Trainer, dir: &Path) -> Result<()> {
    let total = trainer.config.epochs;
    while trainer.epochs_done() < total {
        let row = trainer.run_epoch()?;
        eprintln!("epoch {:>4}/{total}  lr {:.2e}  loss {:.5}", row.epoch + 1, row.lr, row.total);
    }
    let outcome = trainer.finish();
    save_checkpoint(dir.join("model.ckpt"), &outcome.checkpoint)?;
    save_loss_csv(dir.join("loss.csv"), &outcome.log)?;
    eprintln!("wrote {}", dir.display());
    Ok(())
}

pub fn pretrain(mut run: Run, flags: &TrainFlags, data: &[PathBuf], resume_from: &Option<PathBuf>) -> Result<()> {
    run.train_flags(flags)?;
    run.cfg.paths.data = pick(data, &run.cfg.paths.data);
    run.finish_config()?;
    let datasets = load_datasets(&run.cfg.paths.data, "--data")?;
    let dir = run.prepare_dir()?;
    match resume_from {
        Some(p) => {
            let outcome = resume(load_ckpt(p)?, &datasets, &run.cfg.train)?;
            save_checkpoint(dir.join("model.ckpt"), &outcome.checkpoint)?;
            save_loss_csv(dir.join("loss.csv"), &outcome.log)?;
            Ok(())
        }
        None => train_and_save(pretrainer(&datasets, &run.cfg.train)?, &dir),
    }
}

pub fn finetune(mut run: Run, flags: &TrainFlags, ckpt: &Option<PathBuf>, data: &[PathBuf]) -> Result<()> {
    run.train_flags(flags)?;
    run.cfg.paths.data = pick(data, &run.cfg.paths.data);
    run.cfg.paths.checkpoint = checkpoint(ckpt, &run);
    let path = run.cfg.paths.checkpoint.clone().ok_or_else(|| invalid("--checkpoint: required"))?;
    let base = load_ckpt(&path)?;
    run.cfg.train.model = base.model.config.clone();
    run.finish_config()?;
    let datasets = load_datasets(&run.cfg.paths.data, "--data")?;
    let dir = run.prepare_dir()?;
    train_and_save(finetuner(base, &datasets, &run.cfg.train)?, &dir)
}

pub fn fewshot(
    mut run: Run,
    flags: &TrainFlags,
    ckpt: &Option<PathBuf>,
    data: &Option<PathBuf>,
    eval_data: &Option<PathBuf>,
    grid: &Option<String>,
) -> Result<()> {
    run.train_flags(flags)?;
    if let Some(d) = data {
        run.cfg.paths.data = vec![d.clone()];
    }
    if eval_data.is_some() {
        run.cfg.paths.eval_data = eval_data.clone();
    }
    if let Some(g) = grid {
        run.cfg.fewshot.grid = g
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|e| invalid(format!("--grid: {e}")))?;
    }
    run.cfg.paths.checkpoint = checkpoint(ckpt, &run);
    let base = run.cfg.paths.checkpoint.as_deref().map(load_ckpt).transpose()?;
    if let Some(b) = &base {
        run.cfg.train.model = b.model.config.clone();
    }
    run.finish_config()?;
    let train = load_datasets(&run.cfg.paths.data, "--data")?.remove(0);
    let eval_path = run.cfg.paths.eval_data.clone().ok_or_else(|| invalid("--eval-data: required"))?;
    let eval = Dataset::load(&eval_path)?;
    let dir = run.prepare_dir()?;
    let mut rows = Vec::new();
    if let Some(b) = &base {
        rows.extend(few_shot(Some(b), &train, &eval, &run.cfg.train, &run.cfg.fewshot.grid)?);
    }
    rows.extend(few_shot(None, &train, &eval, &run.cfg.train, &run.cfg.fewshot.grid)?);
    write_few_shot_csv(create(&dir.join("fewshot.csv"))?, &rows)?;
    for r in &rows {
        println!("{:<10} n={:<5} ADE {:.4}  FDE {:.4}", r.variant, r.n, r.ade, r.fde);
    }
    Ok(())
}

fn parse_subsets(s: &str) -> Result<Vec<Vec<Modality>>> {
    s.split(';')
        .map(|part| Modality::parse_list(part).map_err(|e| invalid(format!("--modalities: {e}"))))
        .collect()
}

pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub predictor: Option<PredictorKind>,
    pub data: Option<PathBuf>,
    pub modalities: Option<String>,
    pub corrupt: Vec<String>,
    pub mpjpe_ms: Option<String>,
}

pub fn eval(mut run: Run, a: &EvalArgs) -> Result<()> {
    if let Some(d) = &a.data {
        run.cfg.paths.eval_data = Some(d.clone());
    }
    if let Some(m) = &a.modalities {
        run.cfg.eval.subsets = Some(parse_subsets(m)?);
    }
    if !a.corrupt.is_empty() {
        run.cfg.eval.corruptions = a
            .corrupt
            .iter()
            .map(|c| CorruptionSpec::parse(c).map_err(|e| invalid(format!("--corrupt: {e}"))))
            .collect::<Result<_>>()?;
    }
    if let Some(ms) = &a.mpjpe_ms {
        run.cfg.eval.mpjpe_ms = ms
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|e| invalid(format!("--mpjpe-ms: {e}")))?;
    }
    run.cfg.paths.checkpoint = checkpoint(&a.checkpoint, &run);
    let kind = a.predictor.unwrap_or(if run.cfg.paths.checkpoint.is_some() {
        PredictorKind::Model
    } else {
        PredictorKind::ConstantVelocity
    });
    run.finish_config()?;
    let data_path = run.cfg.paths.eval_data.clone().ok_or_else(|| invalid("--data: required"))?;
    let dataset = Dataset::load(&data_path)?;
    let ckpt = match kind {
        PredictorKind::Model => {
            let p = run.cfg.paths.checkpoint.as_deref().ok_or_else(|| invalid("--checkpoint: required for the model predictor"))?;
            Some(load_ckpt(p)?)
        }
        PredictorKind::ConstantVelocity => None,
    };
    let dir = run.prepare_dir()?;
    let report = match &ckpt {
        Some(c) => evaluate(&c.model as &dyn Predictor, &dataset, Some(&c.meta), &run.cfg.eval)?,
        None => evaluate(&ConstantVelocity, &dataset, None, &run.cfg.eval)?,
    };
    report.write_csv(create(&dir.join("eval.csv"))?)?;
    write_json(&dir.join("eval.json"), &report)?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn ablate_mask(mut run: Run, flags: &TrainFlags, data: &[PathBuf], eval_data: &Option<PathBuf>) -> Result<()> {
    run.train_flags(flags)?;
    run.cfg.paths.data = pick(data, &run.cfg.paths.data);
    if eval_data.is_some() {
        run.cfg.paths.eval_data = eval_data.clone();
    }
    run.finish_config()?;
    let train = load_datasets(&run.cfg.paths.data, "--data")?;
    let test_path = run.cfg.paths.eval_data.clone().ok_or_else(|| invalid("--eval-data: required"))?;
    let test = Dataset::load(&test_path)?;
    let dir = run.prepare_dir()?;
    let rows = transmotion::metrics::ablate_masking(&train, &test, &run.cfg.train, &run.cfg.ablation.masks, &run.cfg.eval)?;
    write_json(&dir.join("ablation.json"), &rows)?;
    for r in &rows {
        println!("## mask {:?}", r.mask.mode);
        print!("{}", r.report.to_table());
    }
    Ok(())
}

pub fn navsim(
    mut run: Run,
    ckpt: &Option<PathBuf>,
    predictor: Option<PredictorKind>,
    episodes: Option<usize>,
    scenario: &Option<PathBuf>,
) -> Result<()> {
    if let Some(k) = predictor {
        run.cfg.navsim.predictor = k;
    }
    if let Some(n) = episodes {
        run.cfg.navsim.episodes = n;
    }
    run.cfg.paths.checkpoint = checkpoint(ckpt, &run);
    run.finish_config()?;
    let model = match run.cfg.navsim.predictor {
        PredictorKind::Model => {
            let p = run.cfg.paths.checkpoint.as_deref().ok_or_else(|| invalid("--checkpoint: required for the model predictor"))?;
            Some(load_ckpt(p)?.model)
        }
        PredictorKind::ConstantVelocity => None,
    };
    let scenarios = match scenario {
        Some(p) => vec![(run.cfg.seed, Scenario::load(p)?)],
        None => crossing_suite(run.cfg.seed, run.cfg.navsim.episodes),
    };
    let dir = run.prepare_dir()?;
    let cv = ConstantVelocityPredictor {
        fps: run.cfg.settings.fps.get(),
        horizon: run.cfg.navsim.cv_horizon,
    };
    let mp;
    let pred: &dyn TrajectoryPredictor = match &model {
        Some(m) => {
            mp = ModelPredictor {
                model: m,
                settings: run.cfg.settings,
            };
            &mp
        }
        None => &cv,
    };
    let outcome = benchmark(&scenarios, pred, &run.cfg.navsim.episode)?;
    write_episode_csv(create(&dir.join("episodes.csv"))?, &outcome.rows)?;
    write_json(&dir.join("summary.json"), &outcome.summary)?;
    for s in [&outcome.summary.baseline, &outcome.summary.predictive] {
        println!(
            "{:<10} episodes {:>4}  collision rate {:>6.2}%  mean completion {}  timeouts {}",
            s.navigator,
            s.episodes,
            100.0 * s.collision_rate,
            s.mean_completion_time.map_or("-".into(), |t| format!("{t:.2} s")),
            s.timeouts
        );
    }
    Ok(())
}
