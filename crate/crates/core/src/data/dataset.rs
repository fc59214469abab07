//! Seeded dataset generation and the line-delimited JSON dataset file.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::scene::{
    build_samples, gen_scene, tag_provider, InstructionSample, SceneConfig, GENERATOR_VERSION,
};
use crate::data::templates::{Subtype, TemplatePolicy};
use crate::error::{Error, Result};
use crate::moa::TaskType;
use crate::tensor::Rng;

const EVAL_SALT: u64 = 0xe7a1_0000_0000_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub scene: SceneConfig,
    /// Probability that the tag stub corrupts each tag.
    pub noise_rate: f64,
    pub template_policy: TemplatePolicy,
    pub subtypes: Vec<Subtype>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            train_scenes: 2000,
            eval_scenes: 200,
            scene: SceneConfig::default(),
            noise_rate: 0.0,
            template_policy: TemplatePolicy::Random,
            subtypes: Subtype::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<InstructionSample>,
    pub eval: Vec<InstructionSample>,
}

fn gen_split(seed: u64, n: usize, cfg: &DataConfig) -> Result<Vec<InstructionSample>> {
    let mut seeds = Rng::new(seed);
    let mut out = Vec::with_capacity(n * cfg.subtypes.len());
    for _ in 0..n {
        let scene_seed = seeds.next_u64();
        let scene = gen_scene(scene_seed, &cfg.scene)?;
        let mut rng = Rng::new(scene_seed ^ 0x5a5a_5a5a);
        let mut samples = build_samples(&scene, &cfg.subtypes, cfg.template_policy, &mut rng)?;
        // Tags describe the whole image, so only image-level samples carry them.
        for s in samples
            .iter_mut()
            .filter(|s| s.task == TaskType::ImageLevel)
        {
            s.tags = Some(tag_provider(&scene, cfg.noise_rate, &mut rng)?);
        }
        out.extend(samples);
    }
    Ok(out)
}

/// Train and held-out splits over disjoint scene-seed streams. A pure
/// function of `cfg`.
pub fn generate(cfg: &DataConfig) -> Result<Dataset> {
    cfg.scene.validate()?;
    if cfg.subtypes.is_empty() {
        return Err(Error::Config("no subtypes requested".into()));
    }
    Ok(Dataset {
        train: gen_split(cfg.seed, cfg.train_scenes, cfg)?,
        eval: gen_split(cfg.seed ^ EVAL_SALT, cfg.eval_scenes, cfg)?,
    })
}

/// The file body: one JSON object per line with fields in the order
/// instruction, target, task, subtype, bbox, tags, scene_seed.
pub fn to_jsonl(samples: &[InstructionSample]) -> Result<String> {
    let mut s = String::new();
    for sample in samples {
        s.push_str(&serde_json::to_string(sample).map_err(|e| Error::Dataset(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

pub fn hash_jsonl(body: &str) -> String {
    format!("{:x}", Sha256::digest(body.as_bytes()))
}

pub fn hash_samples(samples: &[InstructionSample]) -> Result<String> {
    Ok(hash_jsonl(&to_jsonl(samples)?))
}

/// Writes `samples` and returns the content hash of what was written.
pub fn write_jsonl(path: &Path, samples: &[InstructionSample]) -> Result<String> {
    let body = to_jsonl(samples)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    Ok(hash_jsonl(&body))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<InstructionSample>> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    body.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let s: InstructionSample = serde_json::from_str(l)
                .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if s.target.is_empty() {
                return Err(Error::Dataset(format!(
                    "{}:{}: empty target",
                    path.display(),
                    i + 1
                )));
            }
            if s.task != s.subtype.task() {
                return Err(Error::Dataset(format!(
                    "{}:{}: subtype {} is not a {} task",
                    path.display(),
                    i + 1,
                    s.subtype,
                    s.task
                )));
            }
            Ok(s)
        })
        .collect()
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const META_FILE: &str = "meta.json";

/// What `meta.json` records next to the two sample files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator_version: u32,
    pub config: DataConfig,
    pub train_hash: String,
    pub eval_hash: String,
    pub train_samples: usize,
    pub eval_samples: usize,
}

/// Writes both splits and `meta.json` into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, cfg: &DataConfig, data: &Dataset) -> Result<DatasetMeta> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = DatasetMeta {
        generator_version: GENERATOR_VERSION,
        config: cfg.clone(),
        train_hash: write_jsonl(&dir.join(TRAIN_FILE), &data.train)?,
        eval_hash: write_jsonl(&dir.join(EVAL_FILE), &data.eval)?,
        train_samples: data.train.len(),
        eval_samples: data.eval.len(),
    };
    let path = dir.join(META_FILE);
    let body = serde_json::to_string_pretty(&meta).map_err(|e| Error::Dataset(e.to_string()))?;
    fs::write(&path, body + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(meta)
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join(META_FILE);
    let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&body)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    if meta.generator_version != GENERATOR_VERSION {
        return Err(Error::Dataset(format!(
            "dataset was made by generator version {}, this build is {}",
            meta.generator_version, GENERATOR_VERSION
        )));
    }
    Ok(meta)
}
