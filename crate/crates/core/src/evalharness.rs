//! Task-level evaluation: last-word prediction, few-shot prompting,
//! classification finetuning through the EOS hidden state, letter attacks
//! and attention heatmaps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pixar_tensor::{adamw_step, Graph, OptimizerState, ParamStore, Real};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::inference::{generate_from, readability, first_word_match, write_pbm, write_pgm, Vocabulary};
use crate::model::Transformer;
use crate::textrender::{apply_visual_attack, eos_patch, is_eos, render_prompt, render_text, unpatchify, AttackTable, GlyphAtlas, PatchGeometry, PatchSequence};

/// Separator between a question and its answer in few-shot prompts.
pub const QA_DELIMITER: &str = "|";
/// Separator between few-shot examples: two space widths.
pub const SHOT_SEPARATOR: &str = "  ";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenItem {
    pub context: String,
    pub target: String,
}

/// Generation task: `context<TAB>target` lines. `shots = 0` is last-word
/// prediction; otherwise each query is preceded by `shots` solved examples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenTask {
    pub items: Vec<GenItem>,
    pub shots: usize,
}

impl GenTask {
    pub fn parse(text: &str, shots: usize) -> Result<Self> {
        let mut items = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (context, target) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse("task file", n + 1, "expected context<TAB>target"))?;
            let target = target.trim();
            if target.is_empty() || target.contains(char::is_whitespace) {
                return Err(Error::parse("task file", n + 1, "target must be a single word"));
            }
            items.push(GenItem {
                context: context.replace('\n', " "),
                target: target.to_string(),
            });
        }
        if items.is_empty() {
            return Err(Error::InvalidInput("task file has no items".into()));
        }
        Ok(Self { items, shots })
    }

    pub fn load(path: &Path, shots: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, shots)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenReport {
    pub accuracy: f64,
    pub readability: f64,
    pub evaluated: usize,
    pub skipped: usize,
    /// Recognized continuation per evaluated item, in item order.
    pub predictions: Vec<String>,
}

/// Generation steps that cover the longest target plus two patches.
pub fn steps_for_targets(task: &GenTask, atlas: &GlyphAtlas, geometry: &PatchGeometry) -> Result<usize> {
    let mut longest = 0;
    for item in &task.items {
        longest = longest.max(render_text(&item.target, atlas, geometry)?.len());
    }
    Ok((longest + 2).div_ceil(geometry.patches_per_step))
}

fn score<F: Real>(model: &Transformer<F>, prompts: Vec<Option<PatchSequence>>, task: &GenTask, atlas: &GlyphAtlas, vocab: &Vocabulary) -> Result<GenReport> {
    let steps = steps_for_targets(task, atlas, &model.config.geometry)?;
    let mut correct = 0;
    let mut skipped = 0;
    let mut predictions = Vec::new();
    for (prompt, item) in prompts.into_iter().zip(&task.items) {
        let Some(prompt) = prompt else {
            skipped += 1;
            continue;
        };
        let needed = prompt.len() + steps * model.config.geometry.patches_per_step;
        if needed > model.config.window {
            skipped += 1;
            continue;
        }
        let out = generate_from(model, prompt, steps, atlas)?;
        if first_word_match(&out.recognized_text, &item.target) {
            correct += 1;
        }
        predictions.push(out.recognized_text);
    }
    if predictions.is_empty() {
        return Err(Error::InvalidInput(format!("no task item fits the window ({skipped} skipped)")));
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} items that do not fit the window");
    }
    Ok(GenReport {
        accuracy: correct as f64 / predictions.len() as f64,
        readability: readability(&predictions, vocab)?,
        evaluated: predictions.len(),
        skipped,
        predictions,
    })
}

/// Last-word prediction: each context is the prompt, the first generated
/// word is compared with the target. Items that overflow are skipped.
pub fn eval_lastword<F: Real>(model: &Transformer<F>, task: &GenTask, atlas: &GlyphAtlas, vocab: &Vocabulary) -> Result<GenReport> {
    let geo = &model.config.geometry;
    let prompts = task
        .items
        .iter()
        .map(|item| match render_prompt(&item.context, atlas, geo) {
            Ok(p) => Ok(Some(p)),
            Err(Error::WindowOverflow { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    score(model, prompts, task, atlas, vocab)
}

/// Prompt text for a few-shot query.
pub fn fewshot_prompt(shots: &[&GenItem], query: &str) -> String {
    let mut s = String::new();
    for shot in shots {
        s.push_str(&shot.context);
        s.push_str(QA_DELIMITER);
        s.push_str(&shot.target);
        s.push_str(SHOT_SEPARATOR);
    }
    s.push_str(query);
    s.push_str(QA_DELIMITER);
    s
}

/// Solved examples for item `i`: the `shots` items preceding it, wrapping
/// around, never the item itself.
pub fn shots_for(task: &GenTask, i: usize) -> Vec<&GenItem> {
    let n = task.items.len();
    let k = task.shots.min(n - 1);
    (1..=k).rev().map(|back| &task.items[(i + n - back) % n]).collect()
}

/// Few-shot QA. An item whose prompt does not fit is an error.
pub fn eval_fewshot<F: Real>(model: &Transformer<F>, task: &GenTask, atlas: &GlyphAtlas, vocab: &Vocabulary) -> Result<GenReport> {
    let geo = &model.config.geometry;
    let steps = steps_for_targets(task, atlas, geo)?;
    let mut prompts = Vec::new();
    for (i, item) in task.items.iter().enumerate() {
        let text = fewshot_prompt(&shots_for(task, i), &item.context);
        let prompt = render_prompt(&text, atlas, geo)?;
        let needed = prompt.len() + steps * geo.patches_per_step;
        if needed > model.config.window {
            return Err(Error::WindowOverflow {
                needed,
                window: model.config.window,
            });
        }
        prompts.push(Some(prompt));
    }
    score(model, prompts, task, atlas, vocab)
}

/// Last-word or few-shot evaluation depending on `task.shots`.
pub fn eval_gen<F: Real>(model: &Transformer<F>, task: &GenTask, atlas: &GlyphAtlas, vocab: &Vocabulary) -> Result<GenReport> {
    if task.shots == 0 {
        eval_lastword(model, task, atlas, vocab)
    } else {
        eval_fewshot(model, task, atlas, vocab)
    }
}

/// Evaluate `task` once per attack ratio. Contexts are attacked with a seed
/// derived from `seed` and the item index, so every ratio sees the same
/// random stream; targets are left intact.
pub fn attack_sweep<F: Real>(
    model: &Transformer<F>,
    task: &GenTask,
    table: &AttackTable,
    ratios: &[f64],
    seed: u64,
    atlas: &GlyphAtlas,
    vocab: &Vocabulary,
) -> Result<Vec<(f64, GenReport)>> {
    if ratios.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidInput("attack ratios must be sorted ascending".into()));
    }
    table.check_atlas(atlas)?;
    let mut rows = Vec::new();
    for &ratio in ratios {
        let mut attacked = task.clone();
        for (i, item) in attacked.items.iter_mut().enumerate() {
            item.context = apply_visual_attack(&item.context, table, ratio, seed.wrapping_add(i as u64))?;
        }
        rows.push((ratio, eval_gen(model, &attacked, atlas, vocab)?));
    }
    Ok(rows)
}

pub fn attack_csv(rows: &[(f64, GenReport)]) -> String {
    let mut s = String::from("ratio,accuracy,readability,evaluated,skipped\n");
    for (ratio, r) in rows {
        let _ = writeln!(s, "{ratio},{},{},{},{}", r.accuracy, r.readability, r.evaluated, r.skipped);
    }
    s
}

// ---- classification -------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ClsItem {
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: f64,
}

/// Classification or regression task: `text_a<TAB>text_b<TAB>label` lines
/// with `text_b` possibly empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsTask {
    pub items: Vec<ClsItem>,
    /// `None` for regression.
    pub n_classes: Option<usize>,
}

impl ClsTask {
    pub fn parse(text: &str, regression: bool) -> Result<Self> {
        let mut items = Vec::new();
        let mut max_label = 0usize;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [a, b, label] = fields[..] else {
                return Err(Error::parse("classification file", n + 1, "expected text_a<TAB>text_b<TAB>label"));
            };
            let label = if regression {
                label
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse("classification file", n + 1, e.to_string()))?
            } else {
                let l = label
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| Error::parse("classification file", n + 1, e.to_string()))?;
                max_label = max_label.max(l);
                l as f64
            };
            items.push(ClsItem {
                text_a: a.to_string(),
                text_b: (!b.trim().is_empty()).then(|| b.to_string()),
                label,
            });
        }
        if items.is_empty() {
            return Err(Error::InvalidInput("classification file has no items".into()));
        }
        Ok(Self {
            items,
            n_classes: (!regression).then_some((max_label + 1).max(2)),
        })
    }

    pub fn load(path: &Path, regression: bool) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, regression)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClsExample {
    pub patches: PatchSequence,
    pub label: f64,
}

/// Render `a EOS` or `a EOS b EOS`.
pub fn render_cls_item(item: &ClsItem, atlas: &GlyphAtlas, geometry: &PatchGeometry) -> Result<PatchSequence> {
    let eos = eos_patch(geometry);
    let mut seq = render_text(&item.text_a, atlas, geometry)?;
    seq.push(&eos);
    if let Some(b) = &item.text_b {
        seq.extend(&render_text(b, atlas, geometry)?);
        seq.push(&eos);
    }
    Ok(seq)
}

pub fn render_cls_task(task: &ClsTask, atlas: &GlyphAtlas, geometry: &PatchGeometry) -> Result<Vec<ClsExample>> {
    task.items
        .iter()
        .map(|item| {
            Ok(ClsExample {
                patches: render_cls_item(item, atlas, geometry)?,
                label: item.label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClsConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Train only the head and leave the backbone untouched.
    pub freeze_backbone: bool,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for ClsConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            learning_rate: 3e-4,
            freeze_backbone: false,
            patience: 5,
            seed: 0,
        }
    }
}

/// Linear head over the EOS hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsHead<F> {
    pub params: ParamStore<F>,
    pub outputs: usize,
}

impl<F: Real> ClsHead<F> {
    pub fn new(hidden_dim: usize, outputs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let w = (0..hidden_dim * outputs).map(|_| F::lit(normal.sample(&mut rng))).collect();
        let mut params = ParamStore::new();
        params.insert("cls_head.weight", &[hidden_dim, outputs], w).expect("fresh store");
        params
            .insert("cls_head.bias", &[outputs], vec![F::zero(); outputs])
            .expect("fresh store");
        Self { params, outputs }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClsReport {
    /// Best validation score: accuracy, or negative mean squared error for
    /// regression.
    pub val_score: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub history: Vec<(f64, f64)>,
}

fn eos_row(ex: &ClsExample) -> Result<usize> {
    let n = ex.patches.len();
    if n == 0 || !is_eos(ex.patches.patch(n - 1)) {
        return Err(Error::InvalidInput("classification input does not end with an EOS patch".into()));
    }
    Ok(n - 1)
}

/// Forward a padded batch; returns the graph, the head output node and the
/// head leaf nodes.
fn cls_forward<F: Real>(
    model: &Transformer<F>,
    head: &ClsHead<F>,
    examples: &[&ClsExample],
    trainable: bool,
) -> Result<(Graph<F>, pixar_tensor::NodeId, [pixar_tensor::NodeId; 2])> {
    let p = model.config.patch_len();
    let seq = examples.iter().map(|e| e.patches.len()).max().unwrap_or(0);
    if seq > model.config.window {
        return Err(Error::WindowOverflow {
            needed: seq,
            window: model.config.window,
        });
    }
    let mut input = vec![F::zero(); examples.len() * seq * p];
    let mut rows = Vec::with_capacity(examples.len());
    for (b, ex) in examples.iter().enumerate() {
        for (dst, &v) in input[b * seq * p..].iter_mut().zip(&ex.patches.patches) {
            *dst = F::lit(f64::from(v));
        }
        rows.push(b * seq + eos_row(ex)?);
    }
    let mut g = Graph::new();
    let x = g.input(input, &[examples.len() * seq, p]);
    let nodes = model.graph_forward(&mut g, x, examples.len(), seq, trainable);
    let h = g.gather_rows(nodes.backbone.hidden, &rows);
    let w = head.params.get(head.params.id("cls_head.weight")?);
    let b = head.params.get(head.params.id("cls_head.bias")?);
    let w = g.variable(w.data.clone(), &w.shape.clone());
    let b = g.variable(b.data.clone(), &b.shape.clone());
    let out = g.matmul(h, w);
    let out = g.add_row(out, b);
    Ok((g, out, [w, b]))
}

/// Head outputs per example, `[n, outputs]` row-major.
pub fn cls_outputs<F: Real>(model: &Transformer<F>, head: &ClsHead<F>, examples: &[ClsExample]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for chunk in examples.chunks(16) {
        let refs: Vec<&ClsExample> = chunk.iter().collect();
        let (g, node, _) = cls_forward(model, head, &refs, false)?;
        out.extend(g.value(node).iter().map(|v| v.as_f64()));
    }
    Ok(out)
}

/// Accuracy (classification) or negative mean squared error (regression).
pub fn cls_score<F: Real>(model: &Transformer<F>, head: &ClsHead<F>, examples: &[ClsExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    let out = cls_outputs(model, head, examples)?;
    let k = head.outputs;
    if k == 1 {
        let mse = out.iter().zip(examples).map(|(o, e)| (o - e.label).powi(2)).sum::<f64>() / examples.len() as f64;
        return Ok(-mse);
    }
    let correct = out
        .chunks(k)
        .zip(examples)
        .filter(|(row, e)| {
            let arg = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            arg as f64 == e.label
        })
        .count();
    Ok(correct as f64 / examples.len() as f64)
}

/// Train a linear head on the EOS hidden state (and, unless frozen, the
/// backbone) with early stopping on the validation score. On return the
/// model and head hold the best-scoring parameters.
pub fn finetune_classifier<F: Real>(
    model: &mut Transformer<F>,
    n_classes: Option<usize>,
    train: &[ClsExample],
    val: &[ClsExample],
    cfg: &ClsConfig,
) -> Result<(ClsHead<F>, ClsReport)> {
    if train.is_empty() || cfg.batch_size == 0 {
        return Err(Error::InvalidInput("classifier needs training examples and a positive batch size".into()));
    }
    for ex in train.iter().chain(val) {
        eos_row(ex)?;
        if let Some(k) = n_classes {
            if ex.label < 0.0 || ex.label >= k as f64 || ex.label.fract() != 0.0 {
                return Err(Error::InvalidInput(format!("label {} outside 0..{k}", ex.label)));
            }
        }
    }
    let outputs = n_classes.unwrap_or(1);
    let mut head = ClsHead::<F>::new(model.config.hidden_dim, outputs, cfg.seed);
    let mut head_opt = OptimizerState::new(&head.params, cfg.learning_rate);
    let mut body_opt = OptimizerState::new(&model.params, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best = (cls_score(model, &head, val)?, 0, head.clone(), (!cfg.freeze_backbone).then(|| model.params.clone()));
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&ClsExample> = chunk.iter().map(|&i| &train[i]).collect();
            let (mut g, out, leaves) = cls_forward(model, &head, &refs, !cfg.freeze_backbone)?;
            let loss = match n_classes {
                Some(_) => {
                    let labels: Vec<usize> = refs.iter().map(|e| e.label as usize).collect();
                    g.softmax_cross_entropy(out, &labels)
                }
                None => {
                    let targets = refs.iter().map(|e| F::lit(e.label)).collect();
                    g.masked_mse(out, targets, vec![F::one(); refs.len()])
                }
            };
            let value = g.scalar(loss).as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("classifier loss at epoch {epoch}")));
            }
            loss_sum += value;
            batches += 1;
            g.backward(loss)?;
            for (leaf, p) in leaves.iter().zip(head.params.iter_mut()) {
                p.grad.copy_from_slice(g.grad(*leaf).expect("head leaves require grad"));
            }
            adamw_step(&mut head.params, &mut head_opt)?;
            if !cfg.freeze_backbone {
                model.params.zero_grads();
                g.take_param_grads(&mut model.params);
                adamw_step(&mut model.params, &mut body_opt)?;
            }
        }
        let val_score = cls_score(model, &head, val)?;
        history.push((loss_sum / batches as f64, val_score));
        log::info!("classifier epoch {epoch}: loss {:.4} val {val_score:.4}", loss_sum / batches as f64);
        epochs_run = epoch;
        if val_score > best.0 {
            best = (val_score, epoch, head.clone(), (!cfg.freeze_backbone).then(|| model.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (val_score, best_epoch, best_head, best_body) = best;
    if let Some(params) = best_body {
        model.params = params;
    }
    Ok((
        best_head,
        ClsReport {
            val_score,
            best_epoch,
            epochs_run,
            history,
        },
    ))
}

// ---- attention heatmaps ---------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSelection {
    /// One file per layer.
    All,
    Last,
    /// Average over all layers.
    Mean,
    Index(usize),
}

impl FromStr for LayerSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "last" => Ok(Self::Last),
            "mean" => Ok(Self::Mean),
            _ => s
                .parse()
                .map(Self::Index)
                .map_err(|_| Error::InvalidInput(format!("layer selection '{s}': use all, last, mean or an index"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub label: String,
    /// Head-averaged attention of the last prompt position over every
    /// prompt patch; sums to 1.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapOutput {
    pub prompt_path: PathBuf,
    pub heatmaps: Vec<(Heatmap, PathBuf)>,
    pub strip_width: usize,
}

/// Attention rows of the position that emits the first generated patches.
pub fn attention_rows<F: Real>(model: &Transformer<F>, prompt: &PatchSequence, layers: LayerSelection) -> Result<Vec<Heatmap>> {
    let (_, trace) = model.forward(prompt, true)?;
    let trace = trace.expect("trace requested");
    let n = model.config.n_layers;
    let last = prompt.len() - 1;
    let row = |l: usize| trace.head_mean_row(l, last);
    Ok(match layers {
        LayerSelection::All => (0..n)
            .map(|l| Heatmap {
                label: format!("layer{l}"),
                weights: row(l),
            })
            .collect(),
        LayerSelection::Last => vec![Heatmap {
            label: format!("layer{}", n - 1),
            weights: row(n - 1),
        }],
        LayerSelection::Index(l) if l < n => vec![Heatmap {
            label: format!("layer{l}"),
            weights: row(l),
        }],
        LayerSelection::Index(l) => {
            return Err(Error::InvalidInput(format!("layer {l} out of range 0..{n}")));
        }
        LayerSelection::Mean => {
            let mut acc = vec![0.0; prompt.len()];
            for l in 0..n {
                acc.iter_mut().zip(row(l)).for_each(|(a, r)| *a += r);
            }
            acc.iter_mut().for_each(|a| *a /= n as f64);
            vec![Heatmap {
                label: "mean".into(),
                weights: acc,
            }]
        }
    })
}

/// Grayscale strip: every column of patch `j` carries `weights[j]`, scaled
/// so the largest weight maps to 255.
pub fn heatmap_pixels(weights: &[f64], geometry: &PatchGeometry) -> Vec<u8> {
    let w = geometry.width;
    let max = weights.iter().copied().fold(0.0, f64::max);
    let width = weights.len() * w;
    let row: Vec<u8> = (0..width)
        .map(|x| if max > 0.0 { (weights[x / w] / max * 255.0).round() as u8 } else { 0 })
        .collect();
    row.repeat(geometry.height)
}

/// Write the rendered prompt (PBM) and one heatmap PGM per selected layer
/// into `out_dir`.
pub fn attention_heatmap<F: Real>(model: &Transformer<F>, prompt_text: &str, atlas: &GlyphAtlas, layers: LayerSelection, out_dir: &Path) -> Result<HeatmapOutput> {
    let geo = &model.config.geometry;
    let prompt = render_prompt(prompt_text, atlas, geo)?;
    let maps = attention_rows(model, &prompt, layers)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let prompt_path = out_dir.join("prompt.pbm");
    write_pbm(&prompt_path, &unpatchify(&prompt, geo))?;
    let strip_width = prompt.len() * geo.width;
    let mut heatmaps = Vec::new();
    for map in maps {
        let path = out_dir.join(format!("attn_{}.pgm", map.label));
        write_pgm(&path, strip_width, geo.height, &heatmap_pixels(&map.weights, geo))?;
        heatmaps.push((map, path));
    }
    Ok(HeatmapOutput {
        prompt_path,
        heatmaps,
        strip_width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_shot_prompt_golden() {
        let task = GenTask::parse(
            "Mary went to the kitchen. Where is Mary?\tkitchen\nJohn went to the garden. Where is John?\tgarden\n",
            1,
        )
        .unwrap();
        let shots = shots_for(&task, 1);
        assert_eq!(
            fewshot_prompt(&shots, &task.items[1].context),
            "Mary went to the kitchen. Where is Mary?|kitchen  John went to the garden. Where is John?|"
        );
    }

    #[test]
    fn shots_wrap_and_exclude_self() {
        let task = GenTask::parse("a\tx\nb\ty\nc\tz\n", 4).unwrap();
        let ctx: Vec<&str> = shots_for(&task, 0).iter().map(|s| s.context.as_str()).collect();
        assert_eq!(ctx, ["b", "c"]);
    }

    #[test]
    fn parses_tasks() {
        assert!(GenTask::parse("no tab here", 0).is_err());
        assert!(GenTask::parse("ctx\ttwo words", 0).is_err());
        let cls = ClsTask::parse("good film\t\t1\nbad\tworse\t0\n", false).unwrap();
        assert_eq!(cls.n_classes, Some(2));
        assert_eq!(cls.items[0].text_b, None);
        assert_eq!(cls.items[1].text_b.as_deref(), Some("worse"));
        assert!(ClsTask::parse("a\tb\tx\n", false).is_err());
        assert_eq!(ClsTask::parse("a\t\t0.5\n", true).unwrap().n_classes, None);
    }

    #[test]
    fn pair_items_get_eos_separator() {
        let atlas = GlyphAtlas::builtin();
        let geo = PatchGeometry::default();
        let item = ClsItem {
            text_a: "hi".into(),
            text_b: Some("yo".into()),
            label: 0.0,
        };
        let seq = render_cls_item(&item, &atlas, &geo).unwrap();
        let a = render_text("hi", &atlas, &geo).unwrap().len();
        assert!(is_eos(seq.patch(a)));
        assert!(is_eos(seq.patch(seq.len() - 1)));
    }

    #[test]
    fn heatmap_scaling() {
        let geo = PatchGeometry::default();
        let px = heatmap_pixels(&[0.25, 0.5, 0.25], &geo);
        assert_eq!(px.len(), 3 * 8 * 8);
        assert_eq!(&px[..24], &[[128u8; 8], [255; 8], [128; 8]].concat()[..]);
    }

    #[test]
    fn layer_selection_parses() {
        assert_eq!("all".parse::<LayerSelection>().unwrap(), LayerSelection::All);
        assert_eq!("3".parse::<LayerSelection>().unwrap(), LayerSelection::Index(3));
        assert!("first".parse::<LayerSelection>().is_err());
    }
}
