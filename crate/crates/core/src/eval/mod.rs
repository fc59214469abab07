//! Metrics and evaluation drivers.
//!
//! Grounding is scored by IoU@0.5 on greedily decoded boxes. Short answers
//! are scored by ranking a closed candidate set by teacher-forced
//! log-likelihood; captions by exact match of the greedy decode, or by
//! reciprocal rank among captions of other scenes. Candidate ties always go
//! to the lowest candidate index.

pub mod experiment;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::bbox::{parse_bbox, BBox};
use crate::data::scene::{
    InstructionSample, SceneConfig, SyntheticScene, COLORS, COUNT_WORDS, SHAPES,
};
use crate::data::templates::{
    choose_template, render_template, HintStyle, Subtype, TemplatePolicy,
};
use crate::data::tokenizer::{Tokenizer, BOS};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, Visual};
use crate::params::ParamStore;
use crate::tensor::Rng;
use crate::train::{staged_instruction, with_visual, SceneCache, VisualSource};

/// Intersection over union; 0 for disjoint or degenerate pairs.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub const IOU_THRESHOLD: f64 = 0.5;
/// Decode budget for a box string: the longest is 21 characters.
const REC_MAX_NEW: usize = 24;

/// Whether `prediction` parses to a box overlapping `gt` by at least 0.5.
/// Unparseable text is simply wrong.
pub fn rec_correct(prediction: &str, gt: &BBox) -> bool {
    parse_bbox(prediction).is_ok_and(|b| iou(&b, gt) >= IOU_THRESHOLD)
}

pub fn rec_accuracy(predictions: &[String], gts: &[BBox]) -> Result<f64> {
    if predictions.len() != gts.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} boxes",
            predictions.len(),
            gts.len()
        )));
    }
    if gts.is_empty() {
        return Err(Error::contract("accuracy over zero samples"));
    }
    let hits = predictions
        .iter()
        .zip(gts)
        .filter(|(p, g)| rec_correct(p, g))
        .count();
    Ok(hits as f64 / gts.len() as f64)
}

/// Mean reciprocal rank of 1-based positions.
pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::contract("MRR of an empty rank list"));
    }
    if ranks.contains(&0) {
        return Err(Error::contract("ranks are 1-based"));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Case-folded, whitespace-collapsed text without a trailing full stop.
pub fn normalize_answer(s: &str) -> String {
    let s = s.trim().trim_end_matches('.').to_lowercase();
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTask {
    /// Box decoding, IoU@0.5 accuracy.
    Rec,
    /// Short-answer candidate ranking, top-1 accuracy.
    Vqa,
    /// Greedy caption, exact-match accuracy.
    Caption,
    /// Caption ranking against other scenes' captions, MRR.
    CaptionRank,
}

impl EvalTask {
    pub const ALL: [EvalTask; 4] = [
        EvalTask::Rec,
        EvalTask::Vqa,
        EvalTask::Caption,
        EvalTask::CaptionRank,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalTask::Rec => "rec",
            EvalTask::Vqa => "vqa",
            EvalTask::Caption => "caption",
            EvalTask::CaptionRank => "caption_rank",
        }
    }

    pub fn subtype(self) -> Subtype {
        match self {
            EvalTask::Rec => Subtype::Rec,
            EvalTask::Vqa => Subtype::Vqa,
            EvalTask::Caption | EvalTask::CaptionRank => Subtype::Caption,
        }
    }

    pub fn metric(self) -> &'static str {
        match self {
            EvalTask::Rec => "iou@0.5_accuracy",
            EvalTask::Vqa => "top1_accuracy",
            EvalTask::Caption => "exact_match",
            EvalTask::CaptionRank => "mrr",
        }
    }
}

impl fmt::Display for EvalTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalTask::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown eval task {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scene_seed: u64,
    pub prediction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    /// IoU for boxes, log-likelihood of the pick for ranked answers, 1 or 0
    /// for exact match.
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: EvalTask,
    pub n_samples: usize,
    pub metric: String,
    pub value: f64,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    /// The aggregate metric recomputed from the per-sample records.
    pub fn recompute(&self) -> Result<f64> {
        aggregate(self.task, &self.records)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::contract(e.to_string()))
    }
}

fn aggregate(task: EvalTask, records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::contract("no records to aggregate"));
    }
    match task {
        EvalTask::CaptionRank => {
            let ranks = records
                .iter()
                .map(|r| {
                    r.rank
                        .ok_or_else(|| Error::contract("ranked record without a rank"))
                })
                .collect::<Result<Vec<_>>>()?;
            mrr(&ranks)
        }
        _ => Ok(records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Seeds template draws and distractor choice.
    pub seed: u64,
    /// Put the sample's tags in front of the instruction, in this style.
    pub tags: Option<HintStyle>,
    /// Evaluate at most this many samples, in file order.
    pub limit: Option<usize>,
    pub scene: SceneConfig,
    pub distractors: usize,
    /// Feed scene symbols instead of images, as during bootstrap.
    #[serde(default = "image_source")]
    pub source: VisualSource,
    /// How grounding instructions are re-rendered; a seeded random training
    /// template per sample by default.
    #[serde(default = "random_policy")]
    pub rec_templates: TemplatePolicy,
}

fn random_policy() -> TemplatePolicy {
    TemplatePolicy::Random
}

fn image_source() -> VisualSource {
    VisualSource::Image
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            seed: 0,
            tags: None,
            limit: None,
            scene: SceneConfig::default(),
            distractors: 4,
            source: VisualSource::Image,
            rec_templates: TemplatePolicy::Random,
        }
    }
}

fn single_slot(k: &str, v: String) -> BTreeMap<String, String> {
    [(k.to_string(), v)].into_iter().collect()
}

fn prompt_ids(tok: &Tokenizer, instruction: &str) -> Result<Vec<usize>> {
    let mut p = vec![BOS];
    p.extend(tok.encode(instruction)?);
    Ok(p)
}

fn with_optional_tags(
    s: &InstructionSample,
    instruction: String,
    tags: Option<HintStyle>,
) -> String {
    let carrier = InstructionSample {
        instruction,
        ..s.clone()
    };
    match tags {
        Some(style) => staged_instruction(&carrier, true, style),
        None => carrier.instruction,
    }
}

/// Candidate answers for a question, by its answer type.
pub fn answer_candidates(question: &str, scene: &SceneConfig) -> Vec<String> {
    if question.starts_with("How many") {
        COUNT_WORDS[..scene.max_objects]
            .iter()
            .map(|s| s.to_string())
            .collect()
    } else if question.starts_with("What color") {
        COLORS.iter().map(|s| s.to_string()).collect()
    } else {
        SHAPES.iter().map(|s| s.to_string()).collect()
    }
}

/// Evaluates `task` on the matching samples of `samples`.
pub fn run_eval(
    task: EvalTask,
    samples: &[InstructionSample],
    store: &ParamStore,
    cfg: &ModelConfig,
    opts: &EvalOptions,
    cache: &mut SceneCache,
) -> Result<EvalReport> {
    let subtype = task.subtype();
    let mut chosen: Vec<&InstructionSample> =
        samples.iter().filter(|s| s.subtype == subtype).collect();
    if chosen.is_empty() {
        return Err(Error::Dataset(format!(
            "no {subtype} samples to evaluate {task} on"
        )));
    }
    if let Some(n) = opts.limit {
        chosen.truncate(n);
    }
    let all_captions: Vec<&str> = chosen.iter().map(|s| s.target.as_str()).collect();
    cache.sync(store, cfg, &opts.scene);
    let tok = Tokenizer::new();
    let mut rng = Rng::new(opts.seed);
    let mut records = Vec::with_capacity(chosen.len());
    for s in chosen {
        let cached = cache.get(store, cfg, s.scene_seed)?;
        let record = with_visual(cfg, &cached, opts.source, |visual| {
            eval_one(
                task,
                s,
                &cached.scene,
                visual,
                store,
                cfg,
                opts,
                &tok,
                &mut rng,
                &all_captions,
            )
        })?;
        records.push(record);
    }
    let value = aggregate(task, &records)?;
    Ok(EvalReport {
        task,
        n_samples: records.len(),
        metric: task.metric().to_string(),
        value,
        records,
    })
}

#[allow(clippy::too_many_arguments)]
fn eval_one(
    task: EvalTask,
    s: &InstructionSample,
    scene: &SyntheticScene,
    visual: Visual,
    store: &ParamStore,
    cfg: &ModelConfig,
    opts: &EvalOptions,
    tok: &Tokenizer,
    rng: &mut Rng,
    all_captions: &[&str],
) -> Result<EvalRecord> {
    let subtype = task.subtype();
    let record = match task {
        EvalTask::Rec => {
            let gt = s
                .bbox
                .ok_or_else(|| Error::Dataset("REC sample without a box".into()))?;
            let obj = scene
                .objects
                .iter()
                .find(|o| o.bbox(scene.config.grid) == gt)
                .ok_or_else(|| {
                    Error::Dataset(format!(
                        "scene {} has no object at the REC box",
                        s.scene_seed
                    ))
                })?;
            let ti = choose_template(Subtype::Rec, opts.rec_templates, rng)?;
            let instr = render_template(Subtype::Rec, ti, &single_slot("expr", obj.describe()))?;
            let prompt = prompt_ids(tok, &with_optional_tags(s, instr, opts.tags))?;
            let out = model::greedy_decode(store, cfg, visual, s.task, &prompt, REC_MAX_NEW)?;
            let text = tok.decode(&out)?;
            let parsed = parse_bbox(&text).ok();
            let score = parsed.map_or(0.0, |b| iou(&b, &gt));
            EvalRecord {
                scene_seed: s.scene_seed,
                correct: rec_correct(&text, &gt),
                prediction: text,
                bbox: parsed,
                score,
                rank: None,
            }
        }
        EvalTask::Vqa => {
            let (question, _) = scene
                .qa_pairs()
                .into_iter()
                .find(|(q, a)| s.instruction.contains(q.as_str()) && *a == s.target)
                .ok_or_else(|| {
                    Error::Dataset(format!(
                        "cannot recover the question of {:?}",
                        s.instruction
                    ))
                })?;
            let ti = subtype
                .eval_template()
                .expect("VQA has an evaluation template");
            let instr = render_template(subtype, ti, &single_slot("Question", question.clone()))?;
            let prompt = prompt_ids(tok, &with_optional_tags(s, instr, opts.tags))?;
            let cands = answer_candidates(&question, &opts.scene);
            let ids = cands
                .iter()
                .map(|c| tok.encode(c))
                .collect::<Result<Vec<_>>>()?;
            let scores = model::score_candidates(store, cfg, visual, s.task, &prompt, &ids)?;
            let best = (0..scores.len())
                .find(|&i| model::rank_of(&scores, i) == 1)
                .unwrap_or(0);
            let correct_idx = cands.iter().position(|c| *c == normalize_answer(&s.target));
            EvalRecord {
                scene_seed: s.scene_seed,
                prediction: cands[best].clone(),
                bbox: None,
                score: scores[best],
                rank: correct_idx.map(|i| model::rank_of(&scores, i)),
                correct: normalize_answer(&cands[best]) == normalize_answer(&s.target),
            }
        }
        EvalTask::Caption => {
            let ti = subtype
                .eval_template()
                .expect("captions have an evaluation template");
            let instr = render_template(subtype, ti, &BTreeMap::new())?;
            let prompt = prompt_ids(tok, &with_optional_tags(s, instr, opts.tags))?;
            let out = model::greedy_decode(store, cfg, visual, s.task, &prompt, 96)?;
            let text = tok.decode(&out)?;
            let correct = normalize_answer(&text) == normalize_answer(&s.target);
            EvalRecord {
                scene_seed: s.scene_seed,
                prediction: text,
                bbox: None,
                score: if correct { 1.0 } else { 0.0 },
                rank: None,
                correct,
            }
        }
        EvalTask::CaptionRank => {
            let mut cands = vec![s.target.clone()];
            let others: Vec<&str> = {
                let mut o: Vec<&str> = all_captions
                    .iter()
                    .copied()
                    .filter(|c| *c != s.target)
                    .collect();
                o.sort_unstable();
                o.dedup();
                o
            };
            let mut pool = others;
            rng.shuffle(&mut pool);
            cands.extend(pool.into_iter().take(opts.distractors).map(String::from));
            let mut order: Vec<usize> = (0..cands.len()).collect();
            rng.shuffle(&mut order);
            let cands: Vec<String> = order.iter().map(|&i| cands[i].clone()).collect();
            let correct_idx = order
                .iter()
                .position(|&i| i == 0)
                .expect("truth is a candidate");
            let ti = subtype
                .eval_template()
                .expect("captions have an evaluation template");
            let instr = render_template(subtype, ti, &BTreeMap::new())?;
            let prompt = prompt_ids(tok, &with_optional_tags(s, instr, opts.tags))?;
            let ids = cands
                .iter()
                .map(|c| tok.encode(c))
                .collect::<Result<Vec<_>>>()?;
            let scores = model::score_candidates(store, cfg, visual, s.task, &prompt, &ids)?;
            let rank = model::rank_of(&scores, correct_idx);
            let best = (0..scores.len())
                .find(|&i| model::rank_of(&scores, i) == 1)
                .unwrap_or(0);
            EvalRecord {
                scene_seed: s.scene_seed,
                prediction: cands[best].clone(),
                bbox: None,
                score: scores[best],
                rank: Some(rank),
                correct: rank == 1,
            }
        }
    };
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = b(0.0, 0.0, 0.5, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        let c = b(0.25, 0.25, 0.75, 0.75);
        assert!((iou(&a, &c) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou(&a, &b(0.6, 0.6, 0.9, 0.9)), 0.0);
        assert_eq!(iou(&a, &b(0.5, 0.0, 1.0, 0.5)), 0.0);
    }

    #[test]
    fn mrr_definition() {
        assert_eq!(mrr(&[1, 1, 1]).unwrap(), 1.0);
        assert!((mrr(&[1, 2, 4]).unwrap() - 1.75 / 3.0).abs() < 1e-15);
        assert!(mrr(&[]).is_err());
        assert!(mrr(&[0]).is_err());
    }

    #[test]
    fn rec_accuracy_policy() {
        let gts = vec![b(0.0, 0.0, 0.5, 0.5), b(0.5, 0.5, 1.0, 1.0)];
        let perfect: Vec<String> = gts.iter().map(crate::data::serialize_bbox).collect();
        assert_eq!(rec_accuracy(&perfect, &gts).unwrap(), 1.0);
        let junk = vec!["no box".to_string(), "[0.1,0.2".to_string()];
        assert_eq!(rec_accuracy(&junk, &gts).unwrap(), 0.0);
        assert!(rec_accuracy(&junk[..1], &gts).is_err());
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_answer("  Red  Square. "), "red square");
        assert_eq!(normalize_answer("two"), "two");
    }

    #[test]
    fn candidates_by_question_type() {
        let sc = SceneConfig::default();
        assert_eq!(
            answer_candidates("How many objects are there?", &sc),
            vec!["one", "two", "three"]
        );
        assert_eq!(answer_candidates("What color is the circle?", &sc).len(), 4);
        assert_eq!(
            answer_candidates("What shape is the red object?", &sc).len(),
            3
        );
    }
}
