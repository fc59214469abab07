//! Instruction data: bbox text codec, templates, tokenizer, synthetic
//! scenes and dataset files.

pub mod bbox;
pub mod dataset;
pub mod scene;
pub mod templates;
pub mod tokenizer;

pub use bbox::{parse_bbox, serialize_bbox, BBox};
pub use dataset::{
    generate, hash_samples, read_jsonl, read_meta, write_dataset, write_jsonl, DataConfig, Dataset,
    DatasetMeta,
};
pub use scene::{
    build_samples, gen_scene, tag_provider, InstructionSample, SceneConfig, SyntheticScene,
};
pub use templates::{render_tag_instruction, render_template, HintStyle, Subtype, TemplatePolicy};
pub use tokenizer::{Tokenizer, BOS, EOS, HINT, PAD};
