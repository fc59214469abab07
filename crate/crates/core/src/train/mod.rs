//! Stage-wise training: per-stage trainable sets, seeded mini-batch streams,
//! the AdamW loop with resumable state, and checkpoint I/O.

pub mod checkpoint;
pub mod optim;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::scene::{gen_scene, InstructionSample, SceneConfig, SyntheticScene};
use crate::data::templates::{with_tags, HintStyle};
use crate::data::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::moa::TaskType;
use crate::model::{self, EncodedImage, ModelConfig, TokenizedSample, Visual};
use crate::params::{Ctx, Group, ParamStore};
use crate::tensor::Rng;

pub use checkpoint::{Checkpoint, ResumeInfo};
pub use optim::{adamw_step, lr_at, AdamState, AdamWConfig, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Teaches the language model to read scene symbols; the "pretrained"
    /// starting point every later stage keeps frozen.
    Bootstrap,
    S1,
    S2,
    S3,
    /// All instruction-tuning groups at once, on the mixed stream.
    Single,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Bootstrap,
        Stage::S1,
        Stage::S2,
        Stage::S3,
        Stage::Single,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Bootstrap => "bootstrap",
            Stage::S1 => "s1",
            Stage::S2 => "s2",
            Stage::S3 => "s3",
            Stage::Single => "single",
        }
    }

    /// Stage that must already be in the parameters' provenance.
    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::S2 => Some(Stage::S1),
            Stage::S3 => Some(Stage::S2),
            _ => None,
        }
    }

    /// Task types the stage's stream draws from.
    pub fn tasks(self) -> &'static [TaskType] {
        match self {
            Stage::S1 => &[TaskType::ImageLevel],
            Stage::S2 => &[TaskType::RegionLevel],
            _ => &TaskType::ALL,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

pub fn trainable_set(stage: Stage) -> BTreeSet<Group> {
    use Group::*;
    let groups: &[Group] = match stage {
        Stage::Bootstrap => &[LmBase, Embeddings],
        Stage::S1 => &[Bridge, AdapterImg],
        Stage::S2 => &[Aggregator, MlpProj, AdapterReg],
        Stage::S3 => &[AdapterImg, AdapterReg, Gates, SoftPrompt],
        Stage::Single => &[
            Bridge, AdapterImg, Aggregator, MlpProj, AdapterReg, Gates, SoftPrompt,
        ],
    };
    groups.iter().copied().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub adamw: AdamWConfig,
    /// Groups trained at a constant learning rate instead of the schedule.
    #[serde(default)]
    pub group_lr: BTreeMap<Group, f64>,
    /// Samples of (image-level, region-level) per alternation cycle in mixed
    /// streams.
    pub mix: (usize, usize),
    /// Probability that a sample's tags are put in front of its instruction.
    pub tag_rate: f64,
    pub hint_style: HintStyle,
    /// Also train the query bridge in s3.
    #[serde(default)]
    pub s3_train_bridge: bool,
    /// Weight of the next-token loss on instruction text, for using the
    /// bootstrap as plain language-model pretraining. Off by default.
    #[serde(default)]
    pub prompt_loss_weight: f64,
}

impl StageConfig {
    /// Small CPU-sized defaults for `stage`.
    pub fn desk(stage: Stage) -> Self {
        let (steps, lr_init) = match stage {
            Stage::Bootstrap => (4000, 1e-2),
            // Same shape as the published schedule: a gentle final stage after
            // a fast region stage. Stage 1 is fast too because the bridge starts
            // from scratch here.
            Stage::S1 => (250, 3e-3),
            Stage::S2 => (500, 3e-3),
            Stage::S3 => (250, 3e-4),
            Stage::Single => (1000, 3e-3),
        };
        let mut group_lr = BTreeMap::new();
        if stage == Stage::S2 {
            group_lr.insert(Group::Aggregator, lr_init / 10.0);
        }
        StageConfig {
            stage,
            schedule: Schedule {
                steps,
                warmup_steps: 30,
                lr_init,
                lr_min: lr_init / 100.0,
            },
            batch_size: 16,
            adamw: AdamWConfig::default(),
            group_lr,
            // grounding is by far the slowest skill for the language model
            mix: if stage == Stage::Bootstrap {
                (1, 3)
            } else {
                (1, 1)
            },
            tag_rate: match stage {
                Stage::S3 | Stage::Single => 1.0,
                _ => 0.0,
            },
            hint_style: match stage {
                Stage::Bootstrap => HintStyle::Plain,
                _ => HintStyle::Soft,
            },
            s3_train_bridge: false,
            prompt_loss_weight: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.mix.0 + self.mix.1 == 0 {
            return Err(Error::Config("mix ratio must not be (0, 0)".into()));
        }
        if !(0.0..=1.0).contains(&self.tag_rate) {
            return Err(Error::Config(format!(
                "tag_rate {} outside [0, 1]",
                self.tag_rate
            )));
        }
        if !(self.prompt_loss_weight >= 0.0) {
            return Err(Error::Config(format!(
                "prompt_loss_weight {} is invalid",
                self.prompt_loss_weight
            )));
        }
        if let Some((g, lr)) = self.group_lr.iter().find(|(_, lr)| !(**lr >= 0.0)) {
            return Err(Error::Config(format!(
                "learning rate {lr} for {g} is invalid"
            )));
        }
        Ok(())
    }

    pub fn trainable(&self) -> BTreeSet<Group> {
        let mut set = trainable_set(self.stage);
        if self.stage == Stage::S3 && self.s3_train_bridge {
            set.insert(Group::Bridge);
        }
        set
    }

    /// Task of the `n`-th sample drawn by this stage.
    fn task_of(&self, n: usize) -> TaskType {
        match self.stage.tasks() {
            [only] => *only,
            _ => {
                let (a, b) = self.mix;
                if n % (a + b) < a {
                    TaskType::ImageLevel
                } else {
                    TaskType::RegionLevel
                }
            }
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub stage: Stage,
    pub task: TaskType,
    pub loss: f64,
    pub lr: f64,
}

pub fn metrics_jsonl(records: &[MetricRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::contract(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(metrics_jsonl(records)?.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Hex SHA-256 of one parameter group.
pub fn group_hash(store: &ParamStore, group: Group) -> String {
    let mut h = Sha256::new();
    for (name, t) in store.snapshot(group) {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

/// A scene together with its frozen encoder states.
#[derive(Debug)]
pub struct CachedScene {
    pub scene: SyntheticScene,
    pub encoded: EncodedImage,
}

/// Encoder outputs per scene seed. Dropped whenever the encoder weights or
/// the scene geometry change.
#[derive(Debug, Default)]
pub struct SceneCache {
    key: Option<(String, SceneConfig, usize)>,
    scenes: HashMap<u64, Rc<CachedScene>>,
}

impl SceneCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Must be called before lookups whenever the store may have changed.
    pub fn sync(&mut self, store: &ParamStore, cfg: &ModelConfig, scene: &SceneConfig) {
        let key = (group_hash(store, Group::VisionEncoder), *scene, cfg.d_model);
        if self.key.as_ref() != Some(&key) {
            self.scenes.clear();
            self.key = Some(key);
        }
    }

    pub fn get(
        &mut self,
        store: &ParamStore,
        cfg: &ModelConfig,
        seed: u64,
    ) -> Result<Rc<CachedScene>> {
        let scene_cfg = match &self.key {
            Some((_, s, _)) => *s,
            None => return Err(Error::contract("scene cache used before sync")),
        };
        if let Some(c) = self.scenes.get(&seed) {
            return Ok(Rc::clone(c));
        }
        let scene = gen_scene(seed, &scene_cfg)?;
        let encoded = model::encode_scene(store, cfg, &scene)?;
        let c = Rc::new(CachedScene { scene, encoded });
        self.scenes.insert(seed, Rc::clone(&c));
        Ok(c)
    }
}

/// Where the visual slots come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualSource {
    Image,
    Symbols,
}

impl VisualSource {
    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Bootstrap => VisualSource::Symbols,
            _ => VisualSource::Image,
        }
    }
}

impl CachedScene {
    pub fn object_symbols(&self, cfg: &ModelConfig) -> Vec<usize> {
        self.scene.object_symbols(cfg.n_queries)
    }

    pub fn patch_symbols(&self) -> Vec<usize> {
        self.scene.patch_symbols()
    }
}

/// Runs `f` with the visual input `source` selects for `cached`.
pub fn with_visual<R>(
    cfg: &ModelConfig,
    cached: &CachedScene,
    source: VisualSource,
    f: impl FnOnce(Visual) -> Result<R>,
) -> Result<R> {
    match source {
        VisualSource::Image => f(Visual::Image(&cached.encoded)),
        VisualSource::Symbols => {
            let objects = cached.object_symbols(cfg);
            let patches = cached.patch_symbols();
            f(Visual::Symbols {
                objects: &objects,
                patches: &patches,
            })
        }
    }
}

/// Loss of one tokenized sample on its scene.
pub fn sample_loss(
    ctx: &mut Ctx,
    cfg: &ModelConfig,
    cached: &CachedScene,
    source: VisualSource,
    sample: &TokenizedSample,
) -> Result<crate::autograd::Var> {
    with_visual(cfg, cached, source, |v| {
        model::forward_loss(ctx, cfg, v, sample)
    })
}

/// The instruction a stage feeds the model for `s`, tags included when
/// `use_tags` is set and the sample carries any.
pub fn staged_instruction(s: &InstructionSample, use_tags: bool, style: HintStyle) -> String {
    match (&s.tags, use_tags) {
        (Some(tags), true) => with_tags(tags, style, &s.instruction),
        _ => s.instruction.clone(),
    }
}

/// Everything a stage reads besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct StageRun<'a> {
    pub cfg: &'a StageConfig,
    pub model: &'a ModelConfig,
    pub samples: &'a [InstructionSample],
    pub scene: SceneConfig,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub records: Vec<MetricRecord>,
    /// Set when the run stopped before the last step.
    pub resume: Option<(ResumeInfo, AdamState)>,
}

fn pools<'a>(
    stage: Stage,
    samples: &'a [InstructionSample],
) -> Result<BTreeMap<TaskType, Vec<&'a InstructionSample>>> {
    let mut pools: BTreeMap<TaskType, Vec<&InstructionSample>> = BTreeMap::new();
    for s in samples {
        if s.subtype.task() != s.task {
            return Err(Error::Dataset(format!(
                "sample of subtype {} is labelled {}",
                s.subtype, s.task
            )));
        }
        if stage.tasks().contains(&s.task) {
            pools.entry(s.task).or_default().push(s);
        }
    }
    // Bootstrap is plain pretraining and takes whatever the stream holds.
    let required: &[TaskType] = if stage == Stage::Bootstrap && !pools.is_empty() {
        &[]
    } else {
        stage.tasks()
    };
    for t in required {
        if pools.get(t).is_none_or(|p| p.is_empty()) {
            return Err(Error::Dataset(format!(
                "stage {stage} needs {t} samples, the stream has none"
            )));
        }
    }
    if pools.is_empty() {
        return Err(Error::Dataset(format!("stage {stage} got an empty stream")));
    }
    Ok(pools)
}

/// Runs (or resumes) one stage on `store`. Batches are drawn with
/// replacement from `rng`; the step loop stops early after `until` steps
/// in total, returning the state needed to resume. On completion the stage
/// is appended to the store's provenance.
pub fn run_stage(
    run: &StageRun,
    store: &mut ParamStore,
    rng: &mut Rng,
    cache: &mut SceneCache,
    resume: Option<(ResumeInfo, AdamState)>,
    until: Option<usize>,
) -> Result<StageOutcome> {
    let cfg = run.cfg;
    cfg.validate()?;
    run.model.validate()?;
    let stage = cfg.stage;
    if let Some(pre) = stage.prerequisite() {
        if !store.provenance.iter().any(|p| p == pre.name()) {
            return Err(Error::MissingPrerequisite {
                stage: stage.to_string(),
                missing: pre.to_string(),
            });
        }
    }
    let pools = pools(stage, run.samples)?;
    let (start, mut adam) = match resume {
        Some((info, st)) => {
            if info.stage != stage.name() {
                return Err(Error::Config(format!(
                    "cannot resume a {} run as {stage}",
                    info.stage
                )));
            }
            (info.next_step, st)
        }
        None => (0, AdamState::default()),
    };
    let end = until.map_or(cfg.schedule.steps, |u| u.min(cfg.schedule.steps));
    store.set_trainable_groups(&cfg.trainable());
    cache.sync(store, run.model, &run.scene);
    let tok = Tokenizer::new();
    let source = VisualSource::for_stage(stage);
    let mut records = Vec::new();

    for step in start..end {
        let lr = lr_at(step, &cfg.schedule);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for i in 0..cfg.batch_size {
            let task = cfg.task_of(step * cfg.batch_size + i);
            let pool = pools
                .get(&task)
                .or_else(|| pools.values().next())
                .expect("pools are non-empty");
            let s = pool[rng.below(pool.len())];
            let use_tags = cfg.tag_rate > 0.0 && rng.bernoulli(cfg.tag_rate);
            let instr = staged_instruction(s, use_tags, cfg.hint_style);
            let ts = TokenizedSample::new(&tok, &instr, &s.target, s.task)?;
            batch.push((cache.get(store, run.model, s.scene_seed)?, ts));
        }

        let (grads, per_task) = {
            let mut ctx = Ctx::new(store);
            let mut losses = Vec::with_capacity(batch.len());
            let mut per_task: BTreeMap<TaskType, (f64, usize)> = BTreeMap::new();
            for (cached, ts) in &batch {
                let (l, target) = with_visual(run.model, cached, source, |v| {
                    model::lm_objective(&mut ctx, run.model, v, ts, cfg.prompt_loss_weight)
                })?;
                let e = per_task.entry(ts.task).or_default();
                e.0 += ctx.tape.value(target).item();
                e.1 += 1;
                losses.push(l);
            }
            let all = ctx.tape.concat(&losses, 0)?;
            let total = ctx.tape.sum(all);
            let mean = ctx.tape.scale(total, 1.0 / losses.len() as f64);
            ctx.tape.backward(mean)?;
            (ctx.grads(), per_task)
        };
        for (task, (sum, n)) in per_task {
            let loss = sum / n as f64;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    param: format!("{task} loss"),
                });
            }
            records.push(MetricRecord {
                step,
                stage,
                task,
                loss,
                lr,
            });
        }
        adamw_step(
            store,
            &grads,
            &mut adam,
            &cfg.adamw,
            |g| cfg.group_lr.get(&g).copied().unwrap_or(lr),
            step,
        )?;
        if step % 50 == 0 || step + 1 == cfg.schedule.steps {
            log::info!(
                "{stage} step {step}/{}: {}",
                cfg.schedule.steps,
                records
                    .iter()
                    .rev()
                    .take_while(|r| r.step == step)
                    .map(|r| format!("{}={:.4}", r.task, r.loss))
                    .collect::<Vec<_>>()
                    .join(" ")
            );
        }
    }

    if end < cfg.schedule.steps {
        let info = ResumeInfo {
            stage: stage.name().to_string(),
            next_step: end,
            adam_t: adam.t,
            moments: adam.m.keys().cloned().collect(),
        };
        return Ok(StageOutcome {
            records,
            resume: Some((info, adam)),
        });
    }
    store.provenance.push(stage.name().to_string());
    Ok(StageOutcome {
        records,
        resume: None,
    })
}

/// Mean loss per task over `samples`, without tags, in inference mode.
pub fn mean_losses(
    store: &ParamStore,
    cfg: &ModelConfig,
    scene: &SceneConfig,
    samples: &[InstructionSample],
    source: VisualSource,
    cache: &mut SceneCache,
) -> Result<BTreeMap<TaskType, f64>> {
    cache.sync(store, cfg, scene);
    let tok = Tokenizer::new();
    let mut acc: BTreeMap<TaskType, (f64, usize)> = BTreeMap::new();
    for s in samples {
        let cached = cache.get(store, cfg, s.scene_seed)?;
        let ts = TokenizedSample::from_sample(&tok, s)?;
        let mut ctx = Ctx::inference(store);
        let l = sample_loss(&mut ctx, cfg, &cached, source, &ts)?;
        let e = acc.entry(s.task).or_default();
        e.0 += ctx.tape.value(l).item();
        e.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(t, (s, n))| (t, s / n as f64))
        .collect())
}

/// A checkpoint of `store` and `rng` for `model`.
pub fn snapshot(
    store: &ParamStore,
    rng: &Rng,
    model: &ModelConfig,
    resume: Option<(ResumeInfo, AdamState)>,
) -> Result<Checkpoint> {
    Ok(Checkpoint {
        params: store.clone(),
        rng: rng.clone(),
        model: serde_json::to_value(model).map_err(|e| Error::contract(e.to_string()))?,
        resume,
    })
}

/// The model configuration stored in a checkpoint.
pub fn model_config_of(ck: &Checkpoint) -> Result<ModelConfig> {
    serde_json::from_value(ck.model.clone())
        .map_err(|e| Error::CorruptHeader(format!("model configuration: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trainable_sets() {
        assert!(!trainable_set(Stage::S1).contains(&Group::Aggregator));
        assert!(trainable_set(Stage::S3).contains(&Group::Gates));
        for st in Stage::ALL {
            let set = trainable_set(st);
            assert_eq!(set.contains(&Group::LmBase), st == Stage::Bootstrap, "{st}");
            assert!(!set.contains(&Group::VisionEncoder));
        }
        let union: BTreeSet<Group> = [Stage::S1, Stage::S2, Stage::S3]
            .into_iter()
            .flat_map(trainable_set)
            .collect();
        assert_eq!(trainable_set(Stage::Single), union);
    }

    #[test]
    fn s3_bridge_override() {
        let mut c = StageConfig::desk(Stage::S3);
        assert!(!c.trainable().contains(&Group::Bridge));
        c.s3_train_bridge = true;
        assert!(c.trainable().contains(&Group::Bridge));
    }

    #[test]
    fn alternation() {
        let mut c = StageConfig::desk(Stage::S3);
        let seq: Vec<usize> = (0..6).map(|n| c.task_of(n).index()).collect();
        assert_eq!(seq, vec![0, 1, 0, 1, 0, 1]);
        c.mix = (2, 1);
        let seq: Vec<usize> = (0..6).map(|n| c.task_of(n).index()).collect();
        assert_eq!(seq, vec![0, 0, 1, 0, 0, 1]);
        assert_eq!(
            StageConfig::desk(Stage::S2).task_of(0),
            TaskType::RegionLevel
        );
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("s4".parse::<Stage>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = StageConfig::desk(Stage::S1);
        c.validate().unwrap();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = StageConfig::desk(Stage::S1);
        c.schedule.warmup_steps = c.schedule.steps;
        assert!(c.validate().is_err());
    }
}
