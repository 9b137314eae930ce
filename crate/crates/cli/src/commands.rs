//! Subcommand implementations. Every command writes its outputs under the
//! run directory and logs the resolved configuration first.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pixar_core::corpus::{self, Dataset};
use pixar_core::evalharness::{self, ClsTask, GenReport, GenTask, LayerSelection};
use pixar_core::inference::{self, Vocabulary};
use pixar_core::model::{Checkpoint, Discriminator, ModelConfig, RngState, Transformer};
use pixar_core::textrender::{unpatchify, AttackTable, GlyphAtlas};
use pixar_core::training::{self, BatchSource, MetricsWriter, Stage2State};
use pixar_core::Error;
use pixar_tensor::lr_at;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, RunConfig};

pub const STAGE1_CHECKPOINT: &str = "stage1.ckpt";
pub const STAGE2_CHECKPOINT: &str = "stage2.ckpt";
pub const STAGE1_METRICS: &str = "stage1_metrics.csv";
pub const STAGE2_METRICS: &str = "stage2_metrics.csv";

/// A failed command: exit code plus a one-line diagnostic.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    kind: String,
    msg: String,
}

impl Failure {
    fn data(msg: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: "data".into(),
            msg: msg.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        self.code
    }

    /// `error kind=<kind> code=<code> msg="<message>"`, on one line.
    pub fn diagnostic(&self) -> String {
        let msg = self.msg.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
        format!("error kind={} code={} msg=\"{msg}\"", self.kind, self.code)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self {
            code: 1,
            kind: "config".into(),
            msg: e.0,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: if e.is_numeric() { 3 } else { 2 },
            kind: e.kind().into(),
            msg: e.to_string(),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 2,
        kind: "io".into(),
        msg: format!("{}: {e}", path.display()),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn prepare(cfg: &RunConfig, command: &str, out_dir: Option<&Path>) -> Result<()> {
    log::info!("{command}: resolved config\n{}", cfg.resolved());
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    Ok(())
}

/// Write to a sibling temp file and rename, so an interrupted save never
/// leaves a truncated checkpoint behind.
fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    ck.save(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn load_model(path: &Path) -> Result<Transformer<f32>> {
    let ck = Checkpoint::load(path)?;
    Ok(Transformer::from_params(ck.config, ck.params)?)
}

fn load_dataset(path: &Path, config: &ModelConfig) -> Result<Dataset> {
    let ds = Dataset::load(path)?;
    if ds.geometry != config.geometry {
        return Err(Failure::data(format!("{}: dataset geometry differs from the model's", path.display())));
    }
    if ds.is_empty() {
        return Err(Failure::data(format!("{}: dataset has no samples", path.display())));
    }
    Ok(ds)
}

fn vocabulary(path: Option<&Path>) -> Result<Vocabulary> {
    Ok(match path {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::builtin(),
    })
}

fn meta_f64(meta: &BTreeMap<String, String>, key: &str) -> Result<f64> {
    meta.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Failure::data(format!("checkpoint is missing `{key}`")))
}

pub fn segment(cfg: &RunConfig, inputs: &[PathBuf], output: &Path) -> Result<()> {
    prepare(cfg, "segment", None)?;
    let seg = cfg.segmenter()?;
    let mut out = String::new();
    for path in inputs {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        for sample in corpus::segment_text(&text, &seg) {
            out.push_str(&sample);
            out.push('\n');
        }
    }
    write_file(output, &out)?;
    log::info!("wrote {} samples to {}", out.lines().count(), output.display());
    Ok(())
}

pub fn build_dataset(cfg: &RunConfig, inputs: &[PathBuf], output: &Path) -> Result<()> {
    prepare(cfg, "build-dataset", None)?;
    let model = cfg.model()?;
    let (ds, stats) = corpus::build_dataset(inputs, &GlyphAtlas::builtin(), &model.geometry, model.window, &cfg.segmenter()?, output)?;
    log::info!(
        "wrote {} samples (mean {:.1} patches, {} characters dropped) to {}",
        stats.samples,
        ds.mean_len(),
        stats.dropped_chars,
        output.display()
    );
    Ok(())
}

pub fn pretrain1(cfg: &RunConfig, dataset: &Path, stop_after: Option<u64>, out_dir: &Path) -> Result<()> {
    prepare(cfg, "pretrain1", Some(out_dir))?;
    let config = cfg.model()?;
    let schedule = cfg.schedule()?;
    let seed: u64 = cfg.get("seed")?;
    let accum: usize = cfg.get("train.accumulation")?;
    let every: u64 = cfg.get::<u64>("train.checkpoint_every")?.max(1);
    let log_every: u64 = cfg.get::<u64>("train.log_every")?.max(1);
    let ds = load_dataset(dataset, &config)?;
    let source = BatchSource {
        dataset: &ds,
        batch_size: cfg.get("train.batch_size")?,
        window: config.window,
        seed,
    };

    let ck_path = out_dir.join(STAGE1_CHECKPOINT);
    let metrics_path = out_dir.join(STAGE1_METRICS);
    let (mut model, mut opt, start, mut metrics) = if ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        if ck.config != config {
            return Err(Failure::data(format!("{}: model config differs from the run config", ck_path.display())));
        }
        let opt = ck
            .optimizer
            .ok_or_else(|| Failure::data(format!("{}: no optimizer state to resume from", ck_path.display())))?;
        log::info!("resuming stage 1 from step {}", ck.step);
        let metrics = MetricsWriter::resume(&metrics_path, ck.step)?;
        (Transformer::from_params(ck.config, ck.params)?, opt, ck.step, metrics)
    } else {
        let model = Transformer::<f32>::new(config.clone(), seed)?;
        let opt = cfg.optimizer(&model.params, schedule.lr_max)?;
        (model, opt, 0, MetricsWriter::open(&metrics_path)?)
    };

    let checkpoint = |model: &Transformer<f32>, opt: &pixar_tensor::OptimizerState<f32>, step: u64| -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("lr".to_string(), lr_at(step, &schedule).to_string());
        meta.insert("total_steps".to_string(), schedule.total_steps.to_string());
        let ck = Checkpoint {
            config: model.config.clone(),
            stage: 1,
            step,
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(seed)),
            meta,
            params: model.params.clone(),
            optimizer: Some(opt.clone()),
            disc_params: None,
            disc_optimizer: None,
        };
        save_checkpoint(&ck, &ck_path)
    };

    let last = stop_after.map_or(schedule.total_steps, |s| s.min(schedule.total_steps));
    for step in start + 1..=last {
        let batches = source.step_batches(step, accum)?;
        let m = training::stage1_step(&mut model, &mut opt, &schedule, &batches, step)?;
        metrics.stage1(&m)?;
        if step % log_every == 0 || step == schedule.total_steps {
            log::info!("step {step}: loss {:.5} lr {:.3e} grad_norm {:.3}", m.loss, m.lr, m.grad_norm);
        }
        if step % every == 0 || step == last {
            checkpoint(&model, &opt, step)?;
        }
    }
    if start >= schedule.total_steps {
        log::info!("stage 1 already complete at step {start}");
    }
    Ok(())
}

pub fn pretrain2(cfg: &RunConfig, stage1: &Path, dataset: &Path, stop_after: Option<u64>, out_dir: &Path) -> Result<()> {
    prepare(cfg, "pretrain2", Some(out_dir))?;
    let seed: u64 = cfg.get("seed")?;
    let accum: usize = cfg.get("train.accumulation")?;
    let every: u64 = cfg.get::<u64>("stage2.checkpoint_every")?.max(1);
    let log_every: u64 = cfg.get::<u64>("train.log_every")?.max(1);

    let base = Checkpoint::load(stage1)?;
    if base.stage != 1 {
        return Err(Failure::data(format!("{}: expected a stage-1 checkpoint, found stage {}", stage1.display(), base.stage)));
    }
    let final_lr = match base.meta.get("lr").and_then(|v| v.parse().ok()) {
        Some(lr) => lr,
        None => lr_at(base.step, &cfg.schedule()?),
    };
    let s2 = cfg.stage2(final_lr)?;
    let ds = load_dataset(dataset, &base.config)?;
    let source = BatchSource {
        dataset: &ds,
        batch_size: cfg.get("stage2.batch_size")?,
        window: base.config.window,
        seed,
    };

    let ck_path = out_dir.join(STAGE2_CHECKPOINT);
    let metrics_path = out_dir.join(STAGE2_METRICS);
    let (mut gen, mut gen_opt, mut disc, mut disc_opt, mut state, mut rng, start, mut metrics) = if ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        if ck.config != base.config {
            return Err(Failure::data(format!("{}: model config differs from the stage-1 checkpoint", ck_path.display())));
        }
        let missing = || Failure::data(format!("{}: incomplete stage-2 state", ck_path.display()));
        let state = Stage2State {
            lambda_auto: meta_f64(&ck.meta, "lambda_auto")?,
            prev_scale_rec: meta_f64(&ck.meta, "prev_scale_rec")?,
            prev_scale_pcaa: meta_f64(&ck.meta, "prev_scale_pcaa")?,
            g1_snapshot: Vec::new(),
        };
        log::info!("resuming stage 2 from step {}", ck.step);
        let metrics = MetricsWriter::resume(&metrics_path, ck.step)?;
        (
            Transformer::from_params(ck.config.clone(), ck.params)?,
            ck.optimizer.ok_or_else(missing)?,
            Discriminator::from_params(ck.config, ck.disc_params.ok_or_else(missing)?)?,
            ck.disc_optimizer.ok_or_else(missing)?,
            state,
            ck.rng.restore(),
            ck.step,
            metrics,
        )
    } else {
        let gen = Transformer::from_params(base.config, base.params)?;
        let disc = Discriminator::from_generator(&gen)?;
        let gen_opt = cfg.optimizer(&gen.params, s2.learning_rate)?;
        let disc_opt = cfg.optimizer(&disc.params, s2.learning_rate)?;
        (
            gen,
            gen_opt,
            disc,
            disc_opt,
            Stage2State::default(),
            ChaCha8Rng::seed_from_u64(seed),
            0,
            MetricsWriter::open(&metrics_path)?,
        )
    };

    let last = stop_after.map_or(s2.steps, |s| s.min(s2.steps));
    for step in start + 1..=last {
        let batches = source.step_batches(step, accum)?;
        let m = training::stage2_step(&mut gen, &mut gen_opt, &mut disc, &mut disc_opt, &batches, &s2, &mut state, &mut rng, step)?;
        metrics.stage2(&m)?;
        if step % log_every == 0 || step == s2.steps {
            log::info!(
                "step {step}: rec {:.5} pcaa {:.5} lambda_auto {:.4} disc_acc {:.3}",
                m.loss_rec,
                m.loss_pcaa,
                m.lambda_auto,
                m.disc_acc
            );
        }
        if step % every == 0 || step == last {
            let mut meta = BTreeMap::new();
            meta.insert("lambda_auto".to_string(), state.lambda_auto.to_string());
            meta.insert("prev_scale_rec".to_string(), state.prev_scale_rec.to_string());
            meta.insert("prev_scale_pcaa".to_string(), state.prev_scale_pcaa.to_string());
            meta.insert("lr".to_string(), s2.learning_rate.to_string());
            meta.insert("stage1_step".to_string(), base.step.to_string());
            let ck = Checkpoint {
                config: gen.config.clone(),
                stage: 2,
                step,
                rng: RngState::capture(&rng),
                meta,
                params: gen.params.clone(),
                optimizer: Some(gen_opt.clone()),
                disc_params: Some(disc.params.clone()),
                disc_optimizer: Some(disc_opt.clone()),
            };
            save_checkpoint(&ck, &ck_path)?;
        }
    }
    if start >= s2.steps {
        log::info!("stage 2 already complete at step {start}");
    }
    Ok(())
}

pub fn generate(cfg: &RunConfig, checkpoint: &Path, prompt: &str, steps: usize, out_dir: &Path) -> Result<()> {
    prepare(cfg, "generate", Some(out_dir))?;
    let model = load_model(checkpoint)?;
    let out = inference::generate(&model, prompt, steps, &GlyphAtlas::builtin())?;
    let mut all = out.prompt_patches.clone();
    all.extend(&out.generated_patches);
    let pbm = out_dir.join("generation.pbm");
    inference::write_pbm(&pbm, &unpatchify(&all, &model.config.geometry))?;
    let mut txt = format!("{}\n", out.recognized_text);
    for (word, d) in &out.per_word_distances {
        let _ = writeln!(txt, "{word}\t{d}");
    }
    write_file(&out_dir.join("generation.txt"), &txt)?;
    println!("{}", out.recognized_text);
    Ok(())
}

fn report_csv(r: &GenReport) -> String {
    format!(
        "accuracy,readability,evaluated,skipped\n{},{},{},{}\n",
        r.accuracy, r.readability, r.evaluated, r.skipped
    )
}

pub fn eval_gen(cfg: &RunConfig, checkpoint: &Path, task: &Path, vocab: Option<&Path>, out_dir: &Path) -> Result<()> {
    prepare(cfg, "eval-gen", Some(out_dir))?;
    let model = load_model(checkpoint)?;
    let task = GenTask::load(task, cfg.get("eval.shots")?)?;
    let report = evalharness::eval_gen(&model, &task, &GlyphAtlas::builtin(), &vocabulary(vocab)?)?;
    write_file(&out_dir.join("eval_gen.csv"), &report_csv(&report))?;
    let preds: String = report.predictions.iter().map(|p| format!("{p}\n")).collect();
    write_file(&out_dir.join("eval_gen_predictions.txt"), &preds)?;
    println!(
        "accuracy={} readability={} evaluated={} skipped={}",
        report.accuracy, report.readability, report.evaluated, report.skipped
    );
    Ok(())
}

pub fn eval_cls(cfg: &RunConfig, checkpoint: &Path, train: &Path, val: &Path, regression: bool, out_dir: &Path) -> Result<()> {
    prepare(cfg, "eval-cls", Some(out_dir))?;
    let mut model = load_model(checkpoint)?;
    let atlas = GlyphAtlas::builtin();
    let train = ClsTask::load(train, regression)?;
    let val = ClsTask::load(val, regression)?;
    let n_classes = match (train.n_classes, val.n_classes) {
        (Some(a), Some(b)) => Some(a.max(b)),
        _ => None,
    };
    let geometry = model.config.geometry;
    let train = evalharness::render_cls_task(&train, &atlas, &geometry)?;
    let val = evalharness::render_cls_task(&val, &atlas, &geometry)?;
    let (_, report) = evalharness::finetune_classifier(&mut model, n_classes, &train, &val, &cfg.classifier()?)?;
    let mut csv = String::from("epoch,train_loss,val_score\n");
    for (i, (loss, score)) in report.history.iter().enumerate() {
        let _ = writeln!(csv, "{},{loss},{score}", i + 1);
    }
    write_file(&out_dir.join("eval_cls.csv"), &csv)?;
    println!(
        "val_score={} best_epoch={} epochs_run={}",
        report.val_score, report.best_epoch, report.epochs_run
    );
    Ok(())
}

pub fn attack(
    cfg: &RunConfig,
    checkpoint: &Path,
    task: &Path,
    ratios: &[f64],
    table: Option<&Path>,
    vocab: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    prepare(cfg, "attack", Some(out_dir))?;
    let model = load_model(checkpoint)?;
    let task = GenTask::load(task, cfg.get("eval.shots")?)?;
    let table = match table {
        Some(p) => AttackTable::parse(&fs::read_to_string(p).map_err(|e| io_err(p, e))?)?,
        None => AttackTable::builtin(),
    };
    let rows = evalharness::attack_sweep(
        &model,
        &task,
        &table,
        ratios,
        cfg.get("attack.seed")?,
        &GlyphAtlas::builtin(),
        &vocabulary(vocab)?,
    )?;
    let csv = evalharness::attack_csv(&rows);
    write_file(&out_dir.join("attack.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn attn(cfg: &RunConfig, checkpoint: &Path, prompt: &str, layers: &str, out_dir: &Path) -> Result<()> {
    prepare(cfg, "attn", Some(out_dir))?;
    let layers: LayerSelection = layers.parse().map_err(|e: Error| Failure::from(ConfigError(e.to_string())))?;
    let model = load_model(checkpoint)?;
    let out = evalharness::attention_heatmap(&model, prompt, &GlyphAtlas::builtin(), layers, out_dir)?;
    println!("{}", out.prompt_path.display());
    for (_, path) in &out.heatmaps {
        println!("{}", path.display());
    }
    Ok(())
}
