//! End-to-end comparisons on the synthetic suite: stage-wise against
//! single-stage training at a matched budget, and soft against plain tag
//! hints.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::dataset::{generate, DataConfig, Dataset};
use crate::data::scene::SceneConfig;
use crate::data::templates::{HintStyle, Subtype};
use crate::error::{Error, Result};
use crate::eval::{run_eval, EvalOptions, EvalTask};
use crate::model::{self, AdapterMode, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Rng;
use crate::train::{
    metrics_jsonl, run_stage, MetricRecord, SceneCache, Stage, StageConfig, StageRun,
};

const ARM_RNG_SALT: u64 = 0xa4_0000_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub bootstrap: StageConfig,
    pub s1: StageConfig,
    pub s2: StageConfig,
    pub s3: StageConfig,
    pub single: StageConfig,
    pub eval: EvalOptions,
    /// Also run the stage-wise arm with every adapter summed in place of
    /// the router.
    pub no_router_arm: bool,
}

impl ExperimentConfig {
    /// The CPU-sized configuration used by the smoke checks.
    pub fn desk() -> Self {
        // One image-level and one region-level subtype is all the comparison
        // reads, and single-patch objects keep grounding learnable at this size.
        let data = DataConfig {
            train_scenes: 5000,
            eval_scenes: 100,
            scene: SceneConfig {
                max_extent: 1,
                ..SceneConfig::default()
            },
            subtypes: vec![Subtype::Vqa, Subtype::Rec],
            ..DataConfig::default()
        };
        let eval = EvalOptions {
            limit: Some(100),
            scene: data.scene,
            ..EvalOptions::default()
        };
        let mut s = ExperimentConfig {
            seed: 0,
            data,
            model: ModelConfig::default(),
            bootstrap: StageConfig::desk(Stage::Bootstrap),
            s1: StageConfig::desk(Stage::S1),
            s2: StageConfig::desk(Stage::S2),
            s3: StageConfig::desk(Stage::S3),
            single: StageConfig::desk(Stage::Single),
            eval,
            no_router_arm: false,
        };
        s.single.schedule.steps = s.stagewise_steps();
        s
    }

    pub fn stagewise_steps(&self) -> usize {
        self.s1.schedule.steps + self.s2.schedule.steps + self.s3.schedule.steps
    }

    /// Both arms must see the same number of samples.
    pub fn check_budget(&self) -> Result<()> {
        let stagewise: usize = [&self.s1, &self.s2, &self.s3]
            .iter()
            .map(|c| c.schedule.steps * c.batch_size)
            .sum();
        let single = self.single.schedule.steps * self.single.batch_size;
        if stagewise != single {
            return Err(Error::Config(format!(
                "budget mismatch: stage-wise arm sees {stagewise} samples, single-stage arm {single}"
            )));
        }
        for (c, want) in [
            (&self.bootstrap, Stage::Bootstrap),
            (&self.s1, Stage::S1),
            (&self.s2, Stage::S2),
            (&self.s3, Stage::S3),
            (&self.single, Stage::Single),
        ] {
            if c.stage != want {
                return Err(Error::Config(format!(
                    "{want} slot holds a {} configuration",
                    c.stage
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub adapter_mode: AdapterMode,
    pub stages: Vec<Stage>,
    /// Top-1 short-answer accuracy on held-out scenes.
    pub image_accuracy: f64,
    /// IoU@0.5 grounding accuracy on held-out scenes.
    pub rec_accuracy: f64,
    pub params_hash: String,
    pub metrics_hash: String,
    pub final_losses: Vec<MetricRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub dataset_hash: String,
    pub single_stage: ArmResult,
    pub stagewise: ArmResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stagewise_no_router: Option<ArmResult>,
    /// Stage-wise minus single-stage grounding accuracy.
    pub rec_margin: f64,
    /// Stage-wise minus single-stage image-level accuracy.
    pub image_gap: f64,
}

/// The dataset and the bootstrapped parameters every arm starts from.
struct Base {
    data: Dataset,
    dataset_hash: String,
    store: ParamStore,
}

fn dataset_of(cfg: &ExperimentConfig) -> Result<(Dataset, String)> {
    let data = generate(&cfg.data)?;
    let mut h = Sha256::new();
    h.update(crate::data::hash_samples(&data.train)?);
    h.update(crate::data::hash_samples(&data.eval)?);
    Ok((data, format!("{:x}", h.finalize())))
}

/// Fresh parameters for `cfg.model` taken through the bootstrap stage on
/// the experiment's training split. Tags are not used by bootstrap, so the
/// result serves any tag noise rate.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<(ParamStore, Vec<MetricRecord>)> {
    let (data, _) = dataset_of(cfg)?;
    let mut cache = SceneCache::new();
    let mut store = model::init(&cfg.model, cfg.seed)?;
    let mut rng = Rng::new(cfg.seed);
    let records = run_or_skip(
        &cfg.bootstrap,
        &cfg.model,
        &cfg.data,
        &data,
        &mut store,
        &mut rng,
        &mut cache,
    )?;
    Ok((store, records))
}

fn with_base(cfg: &ExperimentConfig, pretrained: Option<&ParamStore>) -> Result<Base> {
    let store = match pretrained {
        Some(s) => {
            if !s.provenance.iter().any(|p| p == Stage::Bootstrap.name()) {
                return Err(Error::MissingPrerequisite {
                    stage: "experiment".into(),
                    missing: Stage::Bootstrap.to_string(),
                });
            }
            s.clone()
        }
        None => pretrain(cfg)?.0,
    };
    let (data, dataset_hash) = dataset_of(cfg)?;
    Ok(Base {
        data,
        dataset_hash,
        store,
    })
}

fn run_or_skip(
    stage: &StageConfig,
    model: &ModelConfig,
    data_cfg: &DataConfig,
    data: &Dataset,
    store: &mut ParamStore,
    rng: &mut Rng,
    cache: &mut SceneCache,
) -> Result<Vec<MetricRecord>> {
    if stage.schedule.steps == 0 {
        store.provenance.push(stage.stage.name().to_string());
        return Ok(Vec::new());
    }
    let run = StageRun {
        cfg: stage,
        model,
        samples: &data.train,
        scene: data_cfg.scene,
    };
    Ok(run_stage(&run, store, rng, cache, None, None)?.records)
}

fn hint_of(stage: &StageConfig) -> Option<HintStyle> {
    (stage.tag_rate > 0.0).then_some(stage.hint_style)
}

fn run_arm(
    name: &str,
    cfg: &ExperimentConfig,
    base: &Base,
    stages: &[&StageConfig],
    mode: AdapterMode,
    cache: &mut SceneCache,
) -> Result<ArmResult> {
    let model_cfg = ModelConfig {
        adapter_mode: mode,
        ..cfg.model.clone()
    };
    let mut store = base.store.clone();
    let mut rng = Rng::new(cfg.seed ^ ARM_RNG_SALT);
    let mut records = Vec::new();
    for st in stages {
        records.extend(run_or_skip(
            st, &model_cfg, &cfg.data, &base.data, &mut store, &mut rng, cache,
        )?);
    }
    let last = stages
        .last()
        .ok_or_else(|| Error::Config("an arm needs at least one stage".into()))?;
    let opts = EvalOptions {
        tags: hint_of(last),
        ..cfg.eval.clone()
    };
    let image = run_eval(
        EvalTask::Vqa,
        &base.data.eval,
        &store,
        &model_cfg,
        &opts,
        cache,
    )?;
    let rec = run_eval(
        EvalTask::Rec,
        &base.data.eval,
        &store,
        &model_cfg,
        &opts,
        cache,
    )?;
    log::info!("arm {name}: image {:.3} rec {:.3}", image.value, rec.value);
    let last_step = records.last().map(|r| (r.stage, r.step));
    let final_losses = records
        .iter()
        .filter(|r| Some((r.stage, r.step)) == last_step)
        .cloned()
        .collect();
    Ok(ArmResult {
        name: name.to_string(),
        adapter_mode: mode,
        stages: stages.iter().map(|s| s.stage).collect(),
        image_accuracy: image.value,
        rec_accuracy: rec.value,
        params_hash: store.content_hash(),
        metrics_hash: crate::data::dataset::hash_jsonl(&metrics_jsonl(&records)?),
        final_losses,
    })
}

/// Trains the single-stage arm (all groups at once, adapters summed, no
/// router) and the stage-wise arm (router) from one bootstrapped init at a
/// matched sample budget, and compares them on held-out scenes. With
/// `pretrained`, bootstrap is skipped and those parameters are the init.
pub fn conflict_experiment(
    cfg: &ExperimentConfig,
    pretrained: Option<&ParamStore>,
) -> Result<ConflictReport> {
    cfg.check_budget()?;
    let base = with_base(cfg, pretrained)?;
    let mut cache = SceneCache::new();
    let single = run_arm(
        "single_stage",
        cfg,
        &base,
        &[&cfg.single],
        AdapterMode::Sum,
        &mut cache,
    )?;
    let stagewise = run_arm(
        "stagewise",
        cfg,
        &base,
        &[&cfg.s1, &cfg.s2, &cfg.s3],
        AdapterMode::Router,
        &mut cache,
    )?;
    let no_router = if cfg.no_router_arm {
        Some(run_arm(
            "stagewise_no_router",
            cfg,
            &base,
            &[&cfg.s1, &cfg.s2, &cfg.s3],
            AdapterMode::Sum,
            &mut cache,
        )?)
    } else {
        None
    };
    Ok(ConflictReport {
        dataset_hash: base.dataset_hash.clone(),
        rec_margin: stagewise.rec_accuracy - single.rec_accuracy,
        image_gap: stagewise.image_accuracy - single.image_accuracy,
        single_stage: single,
        stagewise,
        stagewise_no_router: no_router,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftPromptReport {
    pub noise_rate: f64,
    pub soft: ArmResult,
    pub plain: ArmResult,
    /// Soft minus plain image-level accuracy.
    pub image_gap: f64,
}

/// Runs s1 and s2 once, then s3 twice from the same parameters: with the
/// soft-prompt placeholder before the tags, and with a plain word there.
pub fn soft_prompt_experiment(
    cfg: &ExperimentConfig,
    pretrained: Option<&ParamStore>,
) -> Result<SoftPromptReport> {
    let mut base = with_base(cfg, pretrained)?;
    let mut cache = SceneCache::new();
    let mut rng = Rng::new(cfg.seed ^ ARM_RNG_SALT);
    for st in [&cfg.s1, &cfg.s2] {
        run_or_skip(
            st,
            &cfg.model,
            &cfg.data,
            &base.data,
            &mut base.store,
            &mut rng,
            &mut cache,
        )?;
    }
    let soft_cfg = StageConfig {
        hint_style: HintStyle::Soft,
        tag_rate: 1.0,
        ..cfg.s3.clone()
    };
    let plain_cfg = StageConfig {
        hint_style: HintStyle::Plain,
        ..soft_cfg.clone()
    };
    let soft = run_arm(
        "soft",
        cfg,
        &base,
        &[&soft_cfg],
        cfg.model.adapter_mode,
        &mut cache,
    )?;
    let plain = run_arm(
        "plain",
        cfg,
        &base,
        &[&plain_cfg],
        cfg.model.adapter_mode,
        &mut cache,
    )?;
    Ok(SoftPromptReport {
        noise_rate: cfg.data.noise_rate,
        image_gap: soft.image_accuracy - plain.image_accuracy,
        soft,
        plain,
    })
}
