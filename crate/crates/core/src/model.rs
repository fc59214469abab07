//! The toy multimodal model: a frozen vision encoder feeding two visual
//! branches (a learned-query bridge for holistic tokens and the multi-level
//! aggregator plus a GeLU MLP for fine-grained tokens), concatenated in front
//! of the text embeddings of a frozen causal LM whose FFN layers carry
//! task-routed adapters.
//!
//! Image-level tasks see `[bridge, text]`; region-level tasks see
//! `[bridge, aggregator, text]`.

use serde::{Deserialize, Serialize};

use crate::aggregator::{self, AggregatorConfig};
use crate::autograd::Var;
use crate::data::scene::{SyntheticScene, N_SYMBOLS};
use crate::data::tokenizer::{Tokenizer, BOS, EOS, HINT, PAD};
use crate::data::InstructionSample;
use crate::error::{Error, Result};
use crate::moa::{self, AdapterConfig, TaskType};
use crate::nn::{self, Activation, AttentionConfig, BlockConfig, BlockWiring, FfnConfig};
use crate::params::{Ctx, Group, ParamStore};
use crate::tensor::{Rng, Tensor};

/// How the adapters next to each LM FFN are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    /// Per-task gate vectors over all adapters.
    Router,
    /// Only the adapter owned by the task, added directly.
    TaskOwn,
    /// Every adapter added with unit weight, whatever the task.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub l_vis: usize,
    pub l_lm: usize,
    pub n_queries: usize,
    /// Patches per image side; the encoder sees `grid * grid` tokens.
    pub grid: usize,
    pub vocab: usize,
    pub rank: usize,
    pub n_adapters: usize,
    pub max_len: usize,
    pub shared_gates: bool,
    pub adapter_mode: AdapterMode,
    pub va_wiring: BlockWiring,
    pub va_input_proj: bool,
    /// Soft-prompt vectors per HINT marker; 0 disables the soft prompt.
    pub soft_prompt_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            l_vis: 6,
            l_lm: 3,
            n_queries: 4,
            grid: 4,
            vocab: Tokenizer::new().vocab_size(),
            rank: 8,
            n_adapters: 2,
            max_len: 320,
            shared_gates: false,
            adapter_mode: AdapterMode::Router,
            va_wiring: BlockWiring::Residual,
            va_input_proj: false,
            soft_prompt_len: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            causal: true,
        }
        .validate()?;
        aggregator::select_taps(self.l_vis)?;
        if self.n_adapters != TaskType::ALL.len() {
            return Err(Error::Config(format!(
                "one adapter per task type is required ({}), got {}",
                TaskType::ALL.len(),
                self.n_adapters
            )));
        }
        if self.vocab <= HINT {
            return Err(Error::Config(
                "vocabulary must include the reserved ids".into(),
            ));
        }
        if self.n_queries == 0 || self.grid == 0 || self.l_lm == 0 || self.rank == 0 {
            return Err(Error::Config(
                "n_queries, grid, l_lm and rank must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.grid * self.grid
    }

    /// Visual tokens placed before the text for `task`.
    pub fn visual_len(&self, task: TaskType) -> usize {
        match task {
            TaskType::ImageLevel => self.n_queries,
            TaskType::RegionLevel => self.n_queries + self.n_patches(),
        }
    }

    fn block(&self, cross: bool) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            cross,
            wiring: BlockWiring::Residual,
        }
    }

    fn lm_attn(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            causal: true,
        }
    }

    fn ffn(&self, activation: Activation) -> FfnConfig {
        FfnConfig {
            d_model: self.d_model,
            d_hidden: self.d_ff,
            activation,
        }
    }

    fn aggregator(&self) -> AggregatorConfig {
        AggregatorConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            wiring: self.va_wiring,
            input_proj: self.va_input_proj,
        }
    }

    pub fn gates_name(&self, layer: usize) -> String {
        if self.shared_gates {
            "moa.gates".to_string()
        } else {
            format!("moa.l{layer}.gates")
        }
    }

    pub fn adapter_prefix(layer: usize, k: usize) -> String {
        format!("moa.l{layer}.a{k}")
    }
}

pub const SOFT_PROMPT: &str = "soft_prompt";
const TOK_EMB: &str = "embed.tok";
const POS_EMB: &str = "embed.pos";
/// Scene-symbol embeddings standing in for visual tokens during bootstrap.
const SYMBOL_EMB: &str = "embed.symbols";

/// Fresh parameters for `cfg`; a pure function of `(cfg, seed)`. Everything
/// starts frozen.
pub fn init(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let mut s = ParamStore::new();
    let d = cfg.d_model;

    s.randn(TOK_EMB, &[cfg.vocab, d], 1.0, Group::Embeddings, &mut rng)?;
    s.randn(POS_EMB, &[cfg.max_len, d], 1.0, Group::Embeddings, &mut rng)?;
    s.randn(
        SYMBOL_EMB,
        &[N_SYMBOLS + 1, d],
        1.0,
        Group::Embeddings,
        &mut rng,
    )?;

    s.randn(
        "vis.pos",
        &[cfg.n_patches(), d],
        1.0,
        Group::VisionEncoder,
        &mut rng,
    )?;
    for l in 0..cfg.l_vis {
        nn::init_bert_block(
            &mut s,
            &format!("vis.l{l}"),
            &cfg.block(false),
            Group::VisionEncoder,
            &mut rng,
        )?;
    }

    s.randn(
        "bridge.queries",
        &[cfg.n_queries, d],
        1.0,
        Group::Bridge,
        &mut rng,
    )?;
    nn::init_bert_block(
        &mut s,
        "bridge.block",
        &cfg.block(true),
        Group::Bridge,
        &mut rng,
    )?;

    aggregator::init_aggregator(&mut s, "va", &cfg.aggregator(), &mut rng)?;
    nn::init_ffn(
        &mut s,
        "proj",
        &cfg.ffn(Activation::Gelu),
        Group::MlpProj,
        &mut rng,
    )?;

    for l in 0..cfg.l_lm {
        let p = format!("lm.l{l}");
        nn::init_layernorm(&mut s, &format!("{p}.ln1"), d, Group::LmBase)?;
        nn::init_attention(
            &mut s,
            &format!("{p}.attn"),
            &cfg.lm_attn(),
            Group::LmBase,
            &mut rng,
        )?;
        nn::init_layernorm(&mut s, &format!("{p}.ln2"), d, Group::LmBase)?;
        nn::init_ffn(
            &mut s,
            &format!("{p}.ffn"),
            &cfg.ffn(Activation::Gelu),
            Group::LmBase,
            &mut rng,
        )?;
    }
    nn::init_layernorm(&mut s, "lm.ln_f", d, Group::LmBase)?;
    nn::init_linear(&mut s, "lm.head", d, cfg.vocab, Group::LmBase, &mut rng)?;

    let acfg = AdapterConfig {
        d_model: d,
        rank: cfg.rank,
    };
    for l in 0..cfg.l_lm {
        for task in TaskType::ALL {
            let prefix = ModelConfig::adapter_prefix(l, task.index());
            moa::init_adapter(&mut s, &prefix, &acfg, task.adapter_group(), &mut rng)?;
        }
    }
    let gate_layers = if cfg.shared_gates { 1 } else { cfg.l_lm };
    for l in 0..gate_layers {
        s.insert(
            cfg.gates_name(l),
            moa::init_gates(cfg.n_adapters, d)?,
            Group::Gates,
        )?;
    }
    if cfg.soft_prompt_len > 0 {
        s.randn(
            SOFT_PROMPT,
            &[cfg.soft_prompt_len, d],
            1.0,
            Group::SoftPrompt,
            &mut rng,
        )?;
    }
    Ok(s)
}

/// Every hidden state of the vision encoder over `features[1, N, D]`,
/// shallowest first.
pub fn encode_image(ctx: &mut Ctx, cfg: &ModelConfig, features: Var) -> Result<Vec<Var>> {
    let pos = ctx.param("vis.pos")?;
    let mut h = ctx.tape.add(features, pos)?;
    let block = cfg.block(false);
    let mut out = Vec::with_capacity(cfg.l_vis);
    for l in 0..cfg.l_vis {
        h = nn::bert_block(ctx, &format!("vis.l{l}"), h, None, &block)?;
        out.push(h);
    }
    Ok(out)
}

/// Encoder hidden states of one scene, computed once and reused as
/// constants; the encoder is frozen in every stage.
#[derive(Debug, Clone)]
pub struct EncodedImage {
    pub hidden: Vec<Tensor>,
}

pub fn encode_scene(
    store: &ParamStore,
    cfg: &ModelConfig,
    scene: &SyntheticScene,
) -> Result<EncodedImage> {
    if scene.config.grid != cfg.grid {
        return Err(Error::Config(format!(
            "scene grid {} does not match model grid {}",
            scene.config.grid, cfg.grid
        )));
    }
    let mut ctx = Ctx::inference(store);
    let f = ctx.tape.constant(scene.patch_features(cfg.d_model)?);
    let hs = encode_image(&mut ctx, cfg, f)?;
    Ok(EncodedImage {
        hidden: hs.into_iter().map(|v| ctx.tape.value(v).clone()).collect(),
    })
}

/// Learned queries cross-attending to the top encoder state.
pub fn bridge_forward(ctx: &mut Ctx, cfg: &ModelConfig, top_hidden: Var) -> Result<Var> {
    let q = ctx.param("bridge.queries")?;
    let q = ctx.tape.reshape(q, &[1, cfg.n_queries, cfg.d_model])?;
    nn::bert_block(ctx, "bridge.block", q, Some(top_hidden), &cfg.block(true))
}

/// Two-layer GeLU MLP applied to aggregated tokens.
pub fn project_va(ctx: &mut Ctx, cfg: &ModelConfig, v_bar: Var) -> Result<Var> {
    nn::ffn(ctx, "proj", v_bar, &cfg.ffn(Activation::Gelu))
}

/// What fills the visual slots in front of the text.
#[derive(Debug, Clone, Copy)]
pub enum Visual<'a> {
    Image(&'a EncodedImage),
    /// Symbol ids instead of visual tokens (bootstrap): one per bridge slot
    /// and one per patch, 0 meaning empty.
    Symbols {
        objects: &'a [usize],
        patches: &'a [usize],
    },
}

/// Visual tokens `[1, visual_len(task), D]`.
pub fn visual_tokens(
    ctx: &mut Ctx,
    cfg: &ModelConfig,
    visual: Visual,
    task: TaskType,
) -> Result<Var> {
    let (bridge, va) = match visual {
        Visual::Image(enc) => {
            if enc.hidden.len() != cfg.l_vis {
                return Err(Error::shape(format!(
                    "{} encoder states for a {}-layer encoder",
                    enc.hidden.len(),
                    cfg.l_vis
                )));
            }
            let top = ctx.tape.constant(enc.hidden[cfg.l_vis - 1].clone());
            let bridge = bridge_forward(ctx, cfg, top)?;
            let va = match task {
                TaskType::ImageLevel => None,
                TaskType::RegionLevel => {
                    let t = aggregator::select_taps(cfg.l_vis)?;
                    let [vi, vj, vk] =
                        [t.i, t.j, t.k].map(|i| ctx.tape.constant(enc.hidden[i].clone()));
                    let v_bar = aggregator::aggregate(ctx, "va", vi, vj, vk, &cfg.aggregator())?;
                    Some(project_va(ctx, cfg, v_bar)?)
                }
            };
            (bridge, va)
        }
        Visual::Symbols { objects, patches } => {
            if objects.len() != cfg.n_queries || patches.len() != cfg.n_patches() {
                return Err(Error::shape(format!(
                    "{} object and {} patch symbols for {} queries and {} patches",
                    objects.len(),
                    patches.len(),
                    cfg.n_queries,
                    cfg.n_patches()
                )));
            }
            let table = ctx.param(SYMBOL_EMB)?;
            let b = ctx.tape.embed(table, objects)?;
            let bridge = ctx.tape.reshape(b, &[1, cfg.n_queries, cfg.d_model])?;
            let va = match task {
                TaskType::ImageLevel => None,
                TaskType::RegionLevel => {
                    let p = ctx.tape.embed(table, patches)?;
                    Some(ctx.tape.reshape(p, &[1, cfg.n_patches(), cfg.d_model])?)
                }
            };
            (bridge, va)
        }
    };
    match va {
        Some(va) => ctx.tape.concat(&[bridge, va], 1),
        None => Ok(bridge),
    }
}

/// `[bridge, va?, text]` embeddings `[1, S, D]` before positions are added.
/// Runs of HINT ids take the soft-prompt rows in order (cycling when a run
/// is longer than the prompt).
pub fn assemble_inputs(
    ctx: &mut Ctx,
    cfg: &ModelConfig,
    bridge_tokens: Var,
    va_tokens: Option<Var>,
    text_ids: &[usize],
) -> Result<Var> {
    let mut parts = vec![bridge_tokens];
    parts.extend(va_tokens);
    if !text_ids.is_empty() {
        let tok = ctx.param(TOK_EMB)?;
        let n_hint = text_ids.iter().filter(|&&i| i == HINT).count();
        let emb = if n_hint == 0 {
            ctx.tape.embed(tok, text_ids)?
        } else {
            if !ctx.has_param(SOFT_PROMPT) {
                return Err(Error::contract(
                    "text contains a HINT token but the model has no soft prompt",
                ));
            }
            let soft = ctx.param(SOFT_PROMPT)?;
            let p = ctx.tape.shape(soft)[0];
            let table = ctx.tape.concat(&[tok, soft], 0)?;
            let mut run = 0;
            let ids: Vec<usize> = text_ids
                .iter()
                .map(|&i| {
                    if i == HINT {
                        run += 1;
                        cfg.vocab + (run - 1) % p
                    } else {
                        run = 0;
                        i
                    }
                })
                .collect();
            ctx.tape.embed(table, &ids)?
        };
        parts.push(ctx.tape.reshape(emb, &[1, text_ids.len(), cfg.d_model])?);
    }
    ctx.tape.concat(&parts, 1)
}

/// Final hidden states `[1, S, D]` of the causal LM over `inputs`.
pub fn lm_forward(ctx: &mut Ctx, cfg: &ModelConfig, inputs: Var, task: TaskType) -> Result<Var> {
    let s = ctx.tape.shape(inputs).to_vec();
    if s.len() != 3 || s[0] != 1 || s[2] != cfg.d_model {
        return Err(Error::shape(format!("lm input {s:?}")));
    }
    let len = s[1];
    if len > cfg.max_len {
        return Err(Error::shape(format!(
            "sequence of {len} exceeds max_len {}",
            cfg.max_len
        )));
    }
    let pos_table = ctx.param(POS_EMB)?;
    let positions: Vec<usize> = (0..len).collect();
    let pos = ctx.tape.embed(pos_table, &positions)?;
    let mut h = ctx.tape.add(inputs, pos)?;
    let attn = cfg.lm_attn();
    let ffn_cfg = cfg.ffn(Activation::Gelu);
    for l in 0..cfg.l_lm {
        let p = format!("lm.l{l}");
        let n = nn::layernorm(ctx, &format!("{p}.ln1"), h)?;
        let a = nn::attention(ctx, &format!("{p}.attn"), n, None, &attn)?;
        h = ctx.tape.add(h, a)?;
        let x = nn::layernorm(ctx, &format!("{p}.ln2"), h)?;
        let f = nn::ffn(ctx, &format!("{p}.ffn"), x, &ffn_cfg)?;
        let o = match cfg.adapter_mode {
            AdapterMode::Router => {
                let mut outs = Vec::with_capacity(cfg.n_adapters);
                for k in 0..cfg.n_adapters {
                    outs.push(moa::adapter_forward(
                        ctx,
                        &ModelConfig::adapter_prefix(l, k),
                        x,
                    )?);
                }
                let g = ctx.param(&cfg.gates_name(l))?;
                moa::router_forward(&mut ctx.tape, f, &outs, g, task)?
            }
            AdapterMode::TaskOwn => {
                let a =
                    moa::adapter_forward(ctx, &ModelConfig::adapter_prefix(l, task.index()), x)?;
                moa::adapter_residual(&mut ctx.tape, f, a)?
            }
            AdapterMode::Sum => {
                let mut o = f;
                for k in 0..cfg.n_adapters {
                    let a = moa::adapter_forward(ctx, &ModelConfig::adapter_prefix(l, k), x)?;
                    o = moa::adapter_residual(&mut ctx.tape, o, a)?;
                }
                o
            }
        };
        h = ctx.tape.add(h, o)?;
    }
    nn::layernorm(ctx, "lm.ln_f", h)
}

/// Logits `[rows.len(), V]` at the given sequence positions.
pub fn logits_at(ctx: &mut Ctx, cfg: &ModelConfig, hidden: Var, rows: &[usize]) -> Result<Var> {
    let len = ctx.tape.shape(hidden)[1];
    let flat = ctx.tape.reshape(hidden, &[len, cfg.d_model])?;
    let picked = ctx.tape.embed(flat, rows)?;
    nn::linear(ctx, "lm.head", picked)
}

/// A tokenized sample: `BOS + instruction` as the prompt, `target + EOS`
/// as the continuation to score.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSample {
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
    pub task: TaskType,
}

impl TokenizedSample {
    pub fn new(tok: &Tokenizer, instruction: &str, target: &str, task: TaskType) -> Result<Self> {
        if target.is_empty() {
            return Err(Error::UndefinedLoss);
        }
        let mut prompt = vec![BOS];
        prompt.extend(tok.encode(instruction)?);
        let mut t = tok.encode(target)?;
        t.push(EOS);
        Ok(TokenizedSample {
            prompt,
            target: t,
            task,
        })
    }

    pub fn from_sample(tok: &Tokenizer, s: &InstructionSample) -> Result<Self> {
        Self::new(tok, &s.instruction, &s.target, s.task)
    }

    pub fn text(&self) -> Vec<usize> {
        let mut v = self.prompt.clone();
        v.extend(&self.target);
        v
    }

    /// Next-token label for every text position; PAD where nothing is
    /// predicted (prompt positions before the last, and the final token).
    pub fn labels(&self) -> Vec<usize> {
        let n = self.prompt.len() + self.target.len();
        let mut labels = vec![PAD; n];
        for (j, &t) in self.target.iter().enumerate() {
            labels[self.prompt.len() + j - 1] = t;
        }
        labels
    }
}

/// Mean next-token cross-entropy over text positions whose label is not
/// PAD. `labels` is aligned with `text`.
pub fn sequence_loss(
    ctx: &mut Ctx,
    cfg: &ModelConfig,
    visual: Visual,
    task: TaskType,
    text: &[usize],
    labels: &[usize],
) -> Result<Var> {
    if labels.len() != text.len() {
        return Err(Error::shape(format!(
            "{} labels for {} tokens",
            labels.len(),
            text.len()
        )));
    }
    let rows: Vec<usize> = (0..text.len()).filter(|&i| labels[i] != PAD).collect();
    if rows.is_empty() {
        return Err(Error::UndefinedLoss);
    }
    let targets: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
    let off = cfg.visual_len(task);
    let vis = visual_tokens(ctx, cfg, visual, task)?;
    let inputs = assemble_inputs(ctx, cfg, vis, None, text)?;
    let h = lm_forward(ctx, cfg, inputs, task)?;
    let shifted: Vec<usize> = rows.iter().map(|&i| off + i).collect();
    let logits = logits_at(ctx, cfg, h, &shifted)?;
    ctx.tape.cross_entropy(logits, &targets, PAD)
}

/// Mean cross-entropy of `sample.target` given its prompt and visual input.
pub fn forward_loss(
    ctx: &mut Ctx,
    cfg: &ModelConfig,
    visual: Visual,
    sample: &TokenizedSample,
) -> Result<Var> {
    sequence_loss(
        ctx,
        cfg,
        visual,
        sample.task,
        &sample.text(),
        &sample.labels(),
    )
}

/// Training objective with an optional language-modelling term on the
/// prompt: `target_loss + prompt_weight * prompt_loss`, where the prompt
/// loss is the mean next-token cross-entropy over the instruction itself.
/// Returns the objective and the target loss.
pub fn lm_objective(
    ctx: &mut Ctx,
    cfg: &ModelConfig,
    visual: Visual,
    sample: &TokenizedSample,
    prompt_weight: f64,
) -> Result<(Var, Var)> {
    if prompt_weight == 0.0 || sample.prompt.len() < 2 {
        let l = forward_loss(ctx, cfg, visual, sample)?;
        return Ok((l, l));
    }
    let text = sample.text();
    let target_labels = sample.labels();
    let rows: Vec<usize> = (0..text.len() - 1).collect();
    let off = cfg.visual_len(sample.task);
    let vis = visual_tokens(ctx, cfg, visual, sample.task)?;
    let inputs = assemble_inputs(ctx, cfg, vis, None, &text)?;
    let h = lm_forward(ctx, cfg, inputs, sample.task)?;
    let shifted: Vec<usize> = rows.iter().map(|&i| off + i).collect();
    let logits = logits_at(ctx, cfg, h, &shifted)?;
    let t: Vec<usize> = rows.iter().map(|&i| target_labels[i]).collect();
    let p: Vec<usize> = rows
        .iter()
        .map(|&i| {
            if i + 1 < sample.prompt.len() {
                text[i + 1]
            } else {
                PAD
            }
        })
        .collect();
    let target_loss = ctx.tape.cross_entropy(logits, &t, PAD)?;
    let prompt_loss = ctx.tape.cross_entropy(logits, &p, PAD)?;
    let weighted = ctx.tape.scale(prompt_loss, prompt_weight);
    Ok((ctx.tape.add(target_loss, weighted)?, target_loss))
}

/// Log-probabilities `[V]` of the token after `text`.
fn next_log_probs(
    store: &ParamStore,
    cfg: &ModelConfig,
    visual: Visual,
    task: TaskType,
    text: &[usize],
) -> Result<Vec<f64>> {
    let mut ctx = Ctx::inference(store);
    let vis = visual_tokens(&mut ctx, cfg, visual, task)?;
    let inputs = assemble_inputs(&mut ctx, cfg, vis, None, text)?;
    let h = lm_forward(&mut ctx, cfg, inputs, task)?;
    let last = cfg.visual_len(task) + text.len() - 1;
    let logits = logits_at(&mut ctx, cfg, h, &[last])?;
    Ok(log_softmax(ctx.tape.value(logits).data()))
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// First index of the maximum; ties go to the lowest id.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prompt`, stopping after EOS or `max_new` tokens.
/// The returned ids include the EOS when one was produced.
pub fn greedy_decode(
    store: &ParamStore,
    cfg: &ModelConfig,
    visual: Visual,
    task: TaskType,
    prompt: &[usize],
    max_new: usize,
) -> Result<Vec<usize>> {
    if max_new == 0 {
        return Err(Error::contract("max_new must be >= 1"));
    }
    if prompt.is_empty() {
        return Err(Error::contract("decoding needs a non-empty prompt"));
    }
    let mut text = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && cfg.visual_len(task) + text.len() < cfg.max_len {
        let lp = next_log_probs(store, cfg, visual, task, &text)?;
        let next = argmax(&lp);
        out.push(next);
        if next == EOS {
            break;
        }
        text.push(next);
    }
    Ok(out)
}

/// Teacher-forced log-likelihood of each candidate followed by EOS.
pub fn score_candidates(
    store: &ParamStore,
    cfg: &ModelConfig,
    visual: Visual,
    task: TaskType,
    prompt: &[usize],
    candidates: &[Vec<usize>],
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::contract("no candidates to score"));
    }
    let mut ctx = Ctx::inference(store);
    let vis = visual_tokens(&mut ctx, cfg, visual, task)?;
    let vis_value = ctx.tape.value(vis).clone();
    let off = cfg.visual_len(task);
    let mut scores = Vec::with_capacity(candidates.len());
    for cand in candidates {
        if cand.is_empty() {
            return Err(Error::contract("empty candidate"));
        }
        let mut c = Ctx::inference(store);
        let vis = c.tape.constant(vis_value.clone());
        let mut text = prompt.to_vec();
        text.extend(cand);
        text.push(EOS);
        let inputs = assemble_inputs(&mut c, cfg, vis, None, &text)?;
        let h = lm_forward(&mut c, cfg, inputs, task)?;
        let rows: Vec<usize> = (0..=cand.len())
            .map(|j| off + prompt.len() - 1 + j)
            .collect();
        let lv = logits_at(&mut c, cfg, h, &rows)?;
        let logits = c.tape.value(lv);
        let v = cfg.vocab;
        let mut total = 0.0;
        for (j, &t) in cand.iter().chain(std::iter::once(&EOS)).enumerate() {
            total += log_softmax(&logits.data()[j * v..(j + 1) * v])[t];
        }
        scores.push(total);
    }
    Ok(scores)
}

/// 1-based rank of candidate `correct` under descending scores, ties going
/// to the lower candidate index.
pub fn rank_of(scores: &[f64], correct: usize) -> usize {
    let s = scores[correct];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &x)| x > s || (x == s && i < correct))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use crate::data::scene::{gen_scene, SceneConfig};
    use crate::params::on_tape;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            l_vis: 6,
            l_lm: 2,
            n_queries: 2,
            grid: 2,
            rank: 2,
            max_len: 128,
            ..ModelConfig::default()
        }
    }

    fn scene(cfg: &ModelConfig) -> SyntheticScene {
        gen_scene(
            4,
            &SceneConfig {
                grid: cfg.grid,
                max_objects: 2,
                max_extent: 1,
            },
        )
        .unwrap()
    }

    /// Nonzero adapter up-projections so adapters and gates matter.
    fn perturbed(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut s = init(cfg, seed).unwrap();
        let mut rng = Rng::new(seed + 100);
        for l in 0..cfg.l_lm {
            for k in 0..2 {
                let n = format!("{}.up", ModelConfig::adapter_prefix(l, k));
                *s.get_mut(&n).unwrap() =
                    Tensor::randn(&[cfg.rank, cfg.d_model], &mut rng, 0.5).unwrap();
            }
        }
        s
    }

    fn sample(task: TaskType) -> TokenizedSample {
        TokenizedSample::new(&Tokenizer::new(), "Where?", "[0.5", task).unwrap()
    }

    #[test]
    fn encoder_is_deterministic_and_layered() {
        let cfg = tiny();
        let s = init(&cfg, 1).unwrap();
        let sc = scene(&cfg);
        let a = encode_scene(&s, &cfg, &sc).unwrap();
        let b = encode_scene(&s, &cfg, &sc).unwrap();
        assert_eq!(a.hidden.len(), 6);
        assert!(a.hidden.iter().zip(&b.hidden).all(|(x, y)| x.bit_eq(y)));
    }

    #[test]
    fn bridge_shape_and_zero_branch_oracle() {
        let cfg = tiny();
        let mut s = init(&cfg, 2).unwrap();
        let d = cfg.d_model;
        for n in ["bridge.block.self_attn.o.w", "bridge.block.cross_attn.v.w"] {
            *s.get_mut(n).unwrap() = Tensor::zeros(&[d, d]).unwrap();
        }
        *s.get_mut("bridge.block.ffn.fc2.w").unwrap() = Tensor::zeros(&[cfg.d_ff, d]).unwrap();
        let mut ctx = Ctx::inference(&s);
        let top = ctx
            .tape
            .constant(Tensor::zeros(&[1, cfg.n_patches(), d]).unwrap());
        let out = bridge_forward(&mut ctx, &cfg, top).unwrap();
        assert_eq!(ctx.tape.shape(out), &[1, cfg.n_queries, d]);
        let q = s.get("bridge.queries").unwrap();
        for r in 0..cfg.n_queries {
            let x = &q.data()[r * d..(r + 1) * d];
            let m = x.iter().sum::<f64>() / d as f64;
            let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / d as f64;
            for (c, a) in x.iter().enumerate() {
                let want = (a - m) / (v + nn::LN_EPS).sqrt();
                assert!((want - ctx.tape.value(out).data()[r * d + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn project_va_matches_hand_chain() {
        let cfg = tiny();
        let s = init(&cfg, 3).unwrap();
        let x = Tensor::randn(&[1, 3, cfg.d_model], &mut Rng::new(5), 1.0).unwrap();
        let mut ctx = Ctx::inference(&s);
        let xv = ctx.tape.constant(x.clone());
        let y = project_va(&mut ctx, &cfg, xv).unwrap();
        let (w1, b1) = (s.get("proj.fc1.w").unwrap(), s.get("proj.fc1.b").unwrap());
        let (w2, b2) = (s.get("proj.fc2.w").unwrap(), s.get("proj.fc2.b").unwrap());
        let (d, hdim) = (cfg.d_model, cfg.d_ff);
        let gelu = |v: f64| {
            0.5 * v
                * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
        };
        for r in 0..3 {
            let xr = &x.data()[r * d..(r + 1) * d];
            let h: Vec<f64> = (0..hdim)
                .map(|j| {
                    gelu(
                        b1.data()[j] + (0..d).map(|i| xr[i] * w1.data()[i * hdim + j]).sum::<f64>(),
                    )
                })
                .collect();
            for c in 0..d {
                let o = b2.data()[c] + (0..hdim).map(|j| h[j] * w2.data()[j * d + c]).sum::<f64>();
                assert!((o - ctx.tape.value(y).data()[r * d + c]).abs() < 1e-12);
            }
        }
        let r = grad_check(
            |tape, xv| {
                on_tape(&s, tape, |ctx| {
                    let y = project_va(ctx, &cfg, xv)?;
                    let sq = ctx.tape.mul(y, y)?;
                    Ok(ctx.tape.sum(sq))
                })
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn hint_substitution() {
        let cfg = tiny();
        let s = init(&cfg, 4).unwrap();
        let tok = Tokenizer::new();
        let mut ctx = Ctx::inference(&s);
        let b = ctx
            .tape
            .constant(Tensor::zeros(&[1, cfg.n_queries, cfg.d_model]).unwrap());
        let ids = tok.encode("a <hint> b <hint>").unwrap();
        let out = assemble_inputs(&mut ctx, &cfg, b, None, &ids).unwrap();
        let sp = s.get(SOFT_PROMPT).unwrap().data().to_vec();
        let d = cfg.d_model;
        let o = ctx.tape.value(out).data();
        for p in [2, 6] {
            let at = (cfg.n_queries + p) * d;
            assert_eq!(&o[at..at + d], &sp[..]);
        }
        let plain = tok.encode("a b").unwrap();
        let out = assemble_inputs(&mut ctx, &cfg, b, None, &plain).unwrap();
        let tokv = s.get(TOK_EMB).unwrap().data();
        let at = (cfg.n_queries + 1) * d;
        assert_eq!(
            &ctx.tape.value(out).data()[at..at + d],
            &tokv[plain[1] * d..(plain[1] + 1) * d]
        );

        let no_sp = ModelConfig {
            soft_prompt_len: 0,
            ..tiny()
        };
        let s2 = init(&no_sp, 4).unwrap();
        let mut ctx = Ctx::inference(&s2);
        let b = ctx.tape.constant(Tensor::zeros(&[1, 2, 8]).unwrap());
        assert!(matches!(
            assemble_inputs(&mut ctx, &no_sp, b, None, &ids),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let cfg = tiny();
        let s = init(&cfg, 5).unwrap();
        let sc = scene(&cfg);
        let enc = encode_scene(&s, &cfg, &sc).unwrap();
        let tok = Tokenizer::new();
        let smp = TokenizedSample::new(
            &tok,
            "Please provide a short depiction of the picture.",
            &sc.caption(),
            TaskType::ImageLevel,
        )
        .unwrap();
        let mut ctx = Ctx::inference(&s);
        let l = forward_loss(&mut ctx, &cfg, Visual::Image(&enc), &smp).unwrap();
        let v = ctx.tape.value(l).item();
        let ln_v = (cfg.vocab as f64).ln();
        assert!((v - ln_v).abs() < 1.0, "loss {v} vs ln V {ln_v}");
    }

    #[test]
    fn empty_target_is_undefined() {
        assert!(matches!(
            TokenizedSample::new(&Tokenizer::new(), "x", "", TaskType::ImageLevel),
            Err(Error::UndefinedLoss)
        ));
    }

    #[test]
    fn gates_grad_check_and_frozen_base() {
        let cfg = tiny();
        let mut s = perturbed(&cfg, 6);
        s.set_trainable_groups(
            &[
                Group::Gates,
                Group::Bridge,
                Group::Aggregator,
                Group::MlpProj,
            ]
            .into_iter()
            .collect(),
        );
        let sc = scene(&cfg);
        let enc = encode_scene(&s, &cfg, &sc).unwrap();
        let smp = sample(TaskType::RegionLevel);
        let name = cfg.gates_name(1);
        let r = grad_check(
            |tape, g| {
                on_tape(&s, tape, |ctx| {
                    ctx.bind(&name, g);
                    forward_loss(ctx, &cfg, Visual::Image(&enc), &smp)
                })
            },
            s.get(&name).unwrap(),
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");

        let mut ctx = Ctx::new(&s);
        let l = forward_loss(&mut ctx, &cfg, Visual::Image(&enc), &smp).unwrap();
        ctx.tape.backward(l).unwrap();
        for n in ctx.names_with_grad() {
            let g = s.param(&n).unwrap().group;
            assert!(
                g != Group::LmBase && g != Group::VisionEncoder && g != Group::Embeddings,
                "{n}"
            );
        }
        assert!(ctx.grads().contains_key("bridge.queries"));
        assert!(ctx.grads().contains_key("va.block1.cross_attn.k.w"));
    }

    #[test]
    fn encoder_receives_no_gradients() {
        let cfg = tiny();
        let mut s = init(&cfg, 7).unwrap();
        s.set_trainable_groups(&[Group::Aggregator].into_iter().collect());
        let sc = scene(&cfg);
        let mut ctx = Ctx::new(&s);
        let f = ctx.tape.constant(sc.patch_features(cfg.d_model).unwrap());
        let hs = encode_image(&mut ctx, &cfg, f).unwrap();
        let t = aggregator::select_taps(cfg.l_vis).unwrap();
        let o = aggregator::aggregate(&mut ctx, "va", hs[t.i], hs[t.j], hs[t.k], &cfg.aggregator())
            .unwrap();
        let l = ctx.tape.sum(o);
        ctx.tape.backward(l).unwrap();
        let with_grad = ctx.names_with_grad();
        assert!(with_grad.iter().all(|n| n.starts_with("va.")));
        assert!(!with_grad.is_empty());
    }

    #[test]
    fn init_gates_reduce_to_task_adapter() {
        let cfg = tiny();
        let s = perturbed(&cfg, 8);
        let sc = scene(&cfg);
        let enc = encode_scene(&s, &cfg, &sc).unwrap();
        let own = ModelConfig {
            adapter_mode: AdapterMode::TaskOwn,
            ..cfg.clone()
        };
        for task in TaskType::ALL {
            let smp = sample(task);
            let mut a = Ctx::inference(&s);
            let la = forward_loss(&mut a, &cfg, Visual::Image(&enc), &smp).unwrap();
            let mut b = Ctx::inference(&s);
            let lb = forward_loss(&mut b, &own, Visual::Image(&enc), &smp).unwrap();
            assert_eq!(
                a.tape.value(la).item().to_bits(),
                b.tape.value(lb).item().to_bits(),
                "{task}"
            );
        }
    }

    #[test]
    fn soft_prompt_is_local_to_hint_sequences() {
        let cfg = tiny();
        let s = perturbed(&cfg, 9);
        let mut s2 = s.clone();
        s2.get_mut(SOFT_PROMPT).unwrap().data_mut()[0] += 1.0;
        let sc = scene(&cfg);
        let enc = encode_scene(&s, &cfg, &sc).unwrap();
        let tok = Tokenizer::new();
        let plain = TokenizedSample::new(&tok, "tags: red", "one", TaskType::ImageLevel).unwrap();
        let hinted =
            TokenizedSample::new(&tok, "<hint>: red", "one", TaskType::ImageLevel).unwrap();
        let loss = |store: &ParamStore, smp: &TokenizedSample| {
            let mut c = Ctx::inference(store);
            let l = forward_loss(&mut c, &cfg, Visual::Image(&enc), smp).unwrap();
            c.tape.value(l).item()
        };
        assert_eq!(loss(&s, &plain).to_bits(), loss(&s2, &plain).to_bits());
        assert_ne!(loss(&s, &hinted), loss(&s2, &hinted));
    }

    #[test]
    fn scores_match_loss() {
        let cfg = tiny();
        let s = perturbed(&cfg, 10);
        let sc = scene(&cfg);
        let enc = encode_scene(&s, &cfg, &sc).unwrap();
        let tok = Tokenizer::new();
        let prompt = TokenizedSample::new(
            &tok,
            "Question: What? Short answer:",
            "red",
            TaskType::ImageLevel,
        )
        .unwrap();
        let cands: Vec<Vec<usize>> = ["red", "blue", "red"]
            .iter()
            .map(|c| tok.encode(c).unwrap())
            .collect();
        let sc_ = score_candidates(
            &s,
            &cfg,
            Visual::Image(&enc),
            TaskType::ImageLevel,
            &prompt.prompt,
            &cands,
        )
        .unwrap();
        assert_eq!(sc_[0].to_bits(), sc_[2].to_bits());
        let mut ctx = Ctx::inference(&s);
        let l = forward_loss(&mut ctx, &cfg, Visual::Image(&enc), &prompt).unwrap();
        let expect = -ctx.tape.value(l).item() * prompt.target.len() as f64;
        assert!((sc_[0] - expect).abs() < 1e-9, "{} vs {expect}", sc_[0]);
        assert!(score_candidates(
            &s,
            &cfg,
            Visual::Image(&enc),
            TaskType::ImageLevel,
            &prompt.prompt,
            &[vec![]]
        )
        .is_err());
        assert_eq!(rank_of(&[0.5], 0), 1);
        assert_eq!(rank_of(&[-1.0, -1.0, -2.0], 1), 2);
        assert_eq!(rank_of(&[-1.0, -1.0, -2.0], 0), 1);
    }

    #[test]
    fn greedy_stops_on_rigged_eos_and_is_deterministic() {
        let cfg = tiny();
        let mut s = init(&cfg, 11).unwrap();
        let mut b = Tensor::zeros(&[cfg.vocab]).unwrap();
        b.data_mut()[EOS] = 1e6;
        *s.get_mut("lm.head.b").unwrap() = b;
        let sc = scene(&cfg);
        let enc = encode_scene(&s, &cfg, &sc).unwrap();
        let out = greedy_decode(
            &s,
            &cfg,
            Visual::Image(&enc),
            TaskType::RegionLevel,
            &[BOS],
            5,
        )
        .unwrap();
        assert_eq!(out, vec![EOS]);
        let s = perturbed(&cfg, 12);
        let a = greedy_decode(
            &s,
            &cfg,
            Visual::Image(&enc),
            TaskType::ImageLevel,
            &[BOS],
            6,
        )
        .unwrap();
        let b = greedy_decode(
            &s,
            &cfg,
            Visual::Image(&enc),
            TaskType::ImageLevel,
            &[BOS],
            6,
        )
        .unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty() && a.len() <= 6);
    }

    #[test]
    fn labels_cover_only_the_target() {
        let smp = sample(TaskType::ImageLevel);
        let labels = smp.labels();
        let np = smp.prompt.len();
        assert!(labels[..np - 1].iter().all(|&l| l == PAD));
        assert_eq!(&labels[np - 1..np - 1 + smp.target.len()], &smp.target[..]);
        assert_eq!(*labels.last().unwrap(), PAD);
    }
}
