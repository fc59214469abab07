//! Deterministic synthetic scenes: coloured shapes on a coarse grid, their
//! pseudo-image patch features, tags and instruction samples.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::bbox::{serialize_bbox, BBox};
use crate::data::templates::{choose_template, render_template, Subtype, TemplatePolicy};
use crate::error::{Error, Result};
use crate::moa::TaskType;
use crate::tensor::{Rng, Tensor};

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 3] = ["square", "circle", "triangle"];
pub const COUNT_WORDS: [&str; 9] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

/// Bumped whenever generation changes in a way that alters outputs.
pub const GENERATOR_VERSION: u32 = 1;

const FEATURE_CODE_SEED: u64 = 0x5eed_c0de;
const FEATURE_NOISE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Patches per side; boxes snap to multiples of 1/grid.
    pub grid: usize,
    pub max_objects: usize,
    /// Largest object side, in patches.
    pub max_extent: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            grid: 4,
            max_objects: 3,
            max_extent: 2,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.max_objects == 0 || self.max_extent == 0 {
            return Err(Error::Config(
                "scene grid, max_objects and max_extent must be >= 1".into(),
            ));
        }
        if self.max_extent > self.grid {
            return Err(Error::Config("max_extent exceeds grid".into()));
        }
        if self.max_objects > COUNT_WORDS.len() {
            return Err(Error::Config(format!(
                "at most {} objects per scene",
                COUNT_WORDS.len()
            )));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.grid * self.grid
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneObject {
    pub color: usize,
    pub shape: usize,
    /// Half-open patch ranges: columns `c0..c1`, rows `r0..r1`.
    pub c0: usize,
    pub r0: usize,
    pub c1: usize,
    pub r1: usize,
}

impl SceneObject {
    pub fn describe(&self) -> String {
        format!("a {} {}", COLORS[self.color], SHAPES[self.shape])
    }

    pub fn tag(&self) -> String {
        format!("{} {}", COLORS[self.color], SHAPES[self.shape])
    }

    /// 1-based index into the colour/shape product; 0 is reserved for empty.
    pub fn symbol(&self) -> usize {
        1 + self.color * SHAPES.len() + self.shape
    }

    pub fn bbox(&self, grid: usize) -> BBox {
        let g = grid as f64;
        BBox {
            x_min: self.c0 as f64 / g,
            y_min: self.r0 as f64 / g,
            x_max: self.c1 as f64 / g,
            y_max: self.r1 as f64 / g,
        }
    }

    fn covers(&self, c: usize, r: usize) -> bool {
        (self.c0..self.c1).contains(&c) && (self.r0..self.r1).contains(&r)
    }
}

/// Number of distinct object symbols, excluding the empty symbol.
pub const N_SYMBOLS: usize = COLORS.len() * SHAPES.len();

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub config: SceneConfig,
    /// Non-overlapping objects in raster order of their top-left patch.
    pub objects: Vec<SceneObject>,
}

pub fn gen_scene(seed: u64, config: &SceneConfig) -> Result<SyntheticScene> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let g = config.grid;
    let n = 1 + rng.below(config.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    for _ in 0..n {
        for _attempt in 0..32 {
            let w = 1 + rng.below(config.max_extent);
            let h = 1 + rng.below(config.max_extent);
            let c0 = rng.below(g - w + 1);
            let r0 = rng.below(g - h + 1);
            let cand = SceneObject {
                color: rng.below(COLORS.len()),
                shape: rng.below(SHAPES.len()),
                c0,
                r0,
                c1: c0 + w,
                r1: r0 + h,
            };
            let clash = objects
                .iter()
                .any(|o| cand.c0 < o.c1 && o.c0 < cand.c1 && cand.r0 < o.r1 && o.r0 < cand.r1);
            if !clash {
                objects.push(cand);
                break;
            }
        }
    }
    objects.sort_by_key(|o| (o.r0, o.c0));
    Ok(SyntheticScene {
        seed,
        config: *config,
        objects,
    })
}

impl SyntheticScene {
    /// Patch features `[1, grid*grid, d]`: a fixed colour code plus a fixed
    /// shape code on every patch an object covers, plus seeded noise.
    pub fn patch_features(&self, d: usize) -> Result<Tensor> {
        let mut code_rng = Rng::new(FEATURE_CODE_SEED);
        let colors = Tensor::randn(&[COLORS.len(), d], &mut code_rng, 1.0)?;
        let shapes = Tensor::randn(&[SHAPES.len(), d], &mut code_rng, 1.0)?;
        let g = self.config.grid;
        let mut out = Tensor::randn(
            &[1, g * g, d],
            &mut Rng::new(self.seed ^ 0x9e37_79b9),
            FEATURE_NOISE,
        )?;
        let data = out.data_mut();
        for r in 0..g {
            for c in 0..g {
                if let Some(o) = self.objects.iter().find(|o| o.covers(c, r)) {
                    let row = &mut data[(r * g + c) * d..(r * g + c + 1) * d];
                    let cc = &colors.data()[o.color * d..(o.color + 1) * d];
                    let sc = &shapes.data()[o.shape * d..(o.shape + 1) * d];
                    for i in 0..d {
                        row[i] += cc[i] + sc[i];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Symbol per patch in raster order, 0 where no object lies.
    pub fn patch_symbols(&self) -> Vec<usize> {
        let g = self.config.grid;
        (0..g * g)
            .map(|p| {
                self.objects
                    .iter()
                    .find(|o| o.covers(p % g, p / g))
                    .map_or(0, |o| o.symbol())
            })
            .collect()
    }

    /// Object symbols in raster order, padded with 0 or cut to `n`.
    pub fn object_symbols(&self, n: usize) -> Vec<usize> {
        let mut s: Vec<usize> = self.objects.iter().map(|o| o.symbol()).take(n).collect();
        s.resize(n, 0);
        s
    }

    /// Ground-truth tags, one per distinct object kind, in raster order.
    pub fn true_tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = Vec::new();
        for o in &self.objects {
            let t = o.tag();
            if !tags.contains(&t) {
                tags.push(t);
            }
        }
        tags
    }

    fn is_unique(&self, o: &SceneObject) -> bool {
        self.objects
            .iter()
            .filter(|p| p.color == o.color && p.shape == o.shape)
            .count()
            == 1
    }

    pub fn caption(&self) -> String {
        self.objects
            .iter()
            .map(|o| o.describe())
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Every answerable (question, answer) pair about this scene.
    pub fn qa_pairs(&self) -> Vec<(String, String)> {
        let mut qa = vec![(
            "How many objects are there?".to_string(),
            COUNT_WORDS[self.objects.len() - 1].to_string(),
        )];
        for (si, shape) in SHAPES.iter().enumerate() {
            let hits: Vec<&SceneObject> = self.objects.iter().filter(|o| o.shape == si).collect();
            if hits.len() == 1 {
                qa.push((
                    format!("What color is the {shape}?"),
                    COLORS[hits[0].color].to_string(),
                ));
            }
        }
        for (ci, color) in COLORS.iter().enumerate() {
            let hits: Vec<&SceneObject> = self.objects.iter().filter(|o| o.color == ci).collect();
            if hits.len() == 1 {
                qa.push((
                    format!("What shape is the {color} object?"),
                    SHAPES[hits[0].shape].to_string(),
                ));
            }
        }
        qa
    }
}

/// Every tag the stub can emit.
pub fn tag_vocabulary() -> Vec<String> {
    COLORS
        .iter()
        .flat_map(|c| SHAPES.iter().map(move |s| format!("{c} {s}")))
        .collect()
}

/// Stand-in for an image tagger: each true tag is independently replaced,
/// with probability `noise_rate`, by a distractor that is not a true tag.
pub fn tag_provider(scene: &SyntheticScene, noise_rate: f64, rng: &mut Rng) -> Result<Vec<String>> {
    if !(0.0..=1.0).contains(&noise_rate) {
        return Err(Error::Config(format!(
            "noise_rate {noise_rate} outside [0, 1]"
        )));
    }
    let truth = scene.true_tags();
    let distractors: Vec<String> = tag_vocabulary()
        .into_iter()
        .filter(|t| !truth.contains(t))
        .collect();
    Ok(truth
        .into_iter()
        .map(|t| {
            if rng.bernoulli(noise_rate) {
                distractors[rng.below(distractors.len())].clone()
            } else {
                t
            }
        })
        .collect())
}

/// One instruction/target pair plus what is needed to rebuild its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub instruction: String,
    pub target: String,
    pub task: TaskType,
    pub subtype: Subtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
    pub scene_seed: u64,
}

fn one_slot(k: &str, v: String) -> BTreeMap<String, String> {
    [(k.to_string(), v)].into_iter().collect()
}

/// At most one sample per requested subtype. A REC sample is skipped when no
/// object in the scene has an unambiguous description.
pub fn build_samples(
    scene: &SyntheticScene,
    subtypes: &[Subtype],
    policy: TemplatePolicy,
    rng: &mut Rng,
) -> Result<Vec<InstructionSample>> {
    if subtypes.is_empty() {
        return Err(Error::Config("no subtypes requested".into()));
    }
    let g = scene.config.grid;
    let mut out = Vec::with_capacity(subtypes.len());
    for &st in subtypes {
        let ti = choose_template(st, policy, rng)?;
        let (slots, target, bbox) = match st {
            Subtype::Caption => (BTreeMap::new(), scene.caption(), None),
            Subtype::Vqa => {
                let qa = scene.qa_pairs();
                let (q, a) = qa[rng.below(qa.len())].clone();
                (one_slot("Question", q), a, None)
            }
            Subtype::Vqg => {
                let qa = scene.qa_pairs();
                let (q, a) = qa[rng.below(qa.len())].clone();
                (one_slot("Answer", a), q, None)
            }
            Subtype::Rec => {
                let unique: Vec<&SceneObject> = scene
                    .objects
                    .iter()
                    .filter(|o| scene.is_unique(o))
                    .collect();
                if unique.is_empty() {
                    log::debug!("scene {}: no unambiguous referent, REC skipped", scene.seed);
                    continue;
                }
                let o = unique[rng.below(unique.len())];
                let b = o.bbox(g);
                (one_slot("expr", o.describe()), serialize_bbox(&b), Some(b))
            }
            Subtype::Reg => {
                let o = &scene.objects[rng.below(scene.objects.len())];
                let b = o.bbox(g);
                (one_slot("BBox", serialize_bbox(&b)), o.describe(), Some(b))
            }
        };
        out.push(InstructionSample {
            instruction: render_template(st, ti, &slots)?,
            target,
            task: st.task(),
            subtype: st,
            bbox,
            tags: None,
            scene_seed: scene.seed,
        });
    }
    Ok(out)
}
