use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use lion_core::data::dataset::{EVAL_FILE, TRAIN_FILE};
use lion_core::data::{
    generate, read_jsonl, read_meta, render_template, write_dataset, DataConfig, HintStyle,
    SceneConfig, Subtype, TemplatePolicy,
};
use lion_core::eval::experiment::{conflict_experiment, soft_prompt_experiment, ExperimentConfig};
use lion_core::eval::{run_eval, EvalOptions, EvalTask};
use lion_core::model::{self, AdapterMode, ModelConfig};
use lion_core::params::ParamStore;
use lion_core::train::checkpoint::{self, read_header};
use lion_core::train::{
    model_config_of, run_stage, snapshot, write_metrics, SceneCache, Stage, StageConfig, StageRun,
};
use lion_core::Rng;

#[derive(Parser, Debug)]
#[command(
    name = "lion",
    version,
    about = "Staged mixture-of-adapters training on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train/eval instruction files.
    GenData(GenDataArgs),
    /// Initialise a model and teach its language model to read scene symbols.
    Bootstrap(BootstrapArgs),
    /// Run one instruction-tuning stage on a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out split.
    Eval(EvalArgs),
    /// Print one rendered instruction template.
    RenderTemplate(RenderArgs),
    /// Summarise a checkpoint file.
    InspectCheckpoint(InspectArgs),
    /// Stage-wise versus single-stage training at a matched budget.
    Conflict(ExperimentArgs),
    /// Soft-prompt versus plain tag hints under noisy tags.
    SoftPrompt(ExperimentArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    train_scenes: usize,
    #[arg(long, default_value_t = 200)]
    eval_scenes: usize,
    /// Probability that the tag stub corrupts each tag.
    #[arg(long, default_value_t = 0.0)]
    noise_rate: f64,
    /// Always use this template index instead of drawing one per sample.
    #[arg(long)]
    template_index: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    subtypes: Option<Vec<String>>,
}

#[derive(Args, Debug, Clone)]
struct ScheduleArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
}

impl ScheduleArgs {
    fn apply(&self, c: &mut StageConfig) {
        if let Some(v) = self.steps {
            c.schedule.steps = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.schedule.lr_init = v;
            c.schedule.lr_min = c.schedule.lr_min.min(v);
        }
        if let Some(v) = self.lr_min {
            c.schedule.lr_min = v;
        }
        if let Some(v) = self.warmup_steps {
            c.schedule.warmup_steps = v;
        }
    }
}

#[derive(Args, Debug)]
struct BootstrapArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    #[arg(long, default_value_t = 64)]
    d_ff: usize,
    #[arg(long, default_value_t = 6)]
    vision_layers: usize,
    #[arg(long, default_value_t = 3)]
    lm_layers: usize,
    #[arg(long, default_value_t = 4)]
    queries: usize,
    #[arg(long, default_value_t = 8)]
    rank: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Router)]
    adapter_mode: ModeArg,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ModeArg {
    Router,
    TaskOwn,
    Sum,
}

impl From<ModeArg> for AdapterMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Router => AdapterMode::Router,
            ModeArg::TaskOwn => AdapterMode::TaskOwn,
            ModeArg::Sum => AdapterMode::Sum,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum HintArg {
    Soft,
    Plain,
}

impl From<HintArg> for HintStyle {
    fn from(h: HintArg) -> Self {
        match h {
            HintArg::Soft => HintStyle::Soft,
            HintArg::Plain => HintStyle::Plain,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// s1, s2, s3 or single.
    #[arg(long)]
    stage: String,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to start from; an interrupted run of the same stage resumes.
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Stop after this many steps of the stage and save a resumable checkpoint.
    #[arg(long)]
    until: Option<usize>,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long, value_enum)]
    hint_style: Option<HintArg>,
    #[arg(long)]
    tag_rate: Option<f64>,
    /// Train the query bridge in s3 as well.
    #[arg(long)]
    train_bridge: bool,
    /// Override the adapter combination stored in the checkpoint.
    #[arg(long, value_enum)]
    adapter_mode: Option<ModeArg>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// rec, vqa, caption or caption_rank.
    #[arg(long)]
    task: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    limit: Option<usize>,
    /// Put each sample's tags in front of the instruction.
    #[arg(long, value_enum)]
    tags: Option<HintArg>,
    /// Evaluate on the training split instead of the held-out one.
    #[arg(long)]
    train_split: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    subtype: String,
    #[arg(long)]
    index: usize,
    #[arg(long)]
    expr: Option<String>,
    #[arg(long)]
    question: Option<String>,
    #[arg(long)]
    answer: Option<String>,
    #[arg(long)]
    bbox: Option<String>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    path: PathBuf,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON experiment configuration; the desk defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_router_arm: bool,
    #[arg(long)]
    noise_rate: Option<f64>,
    /// Bootstrapped checkpoint to start every arm from instead of running
    /// bootstrap first.
    #[arg(long)]
    init: Option<PathBuf>,
}

fn echo(command: &str, seed: Option<u64>, config: serde_json::Value) {
    let line = json!({ "command": command, "seed": seed, "config": config });
    eprintln!("resolved: {line}");
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn metrics_path(explicit: &Option<PathBuf>, out: &Path) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.metrics.jsonl", out.display())))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let subtypes = match &a.subtypes {
        Some(v) => v
            .iter()
            .map(|s| s.parse::<Subtype>())
            .collect::<Result<Vec<_>, _>>()?,
        None => Subtype::ALL.to_vec(),
    };
    let cfg = DataConfig {
        seed: a.seed,
        train_scenes: a.train_scenes,
        eval_scenes: a.eval_scenes,
        scene: SceneConfig::default(),
        noise_rate: a.noise_rate,
        template_policy: a
            .template_index
            .map_or(TemplatePolicy::Random, TemplatePolicy::Fixed),
        subtypes,
    };
    echo("gen-data", Some(a.seed), serde_json::to_value(&cfg)?);
    let data = generate(&cfg)?;
    let meta = write_dataset(&a.out, &cfg, &data)?;
    println!(
        "train {} samples sha256 {}",
        meta.train_samples, meta.train_hash
    );
    println!(
        "eval {} samples sha256 {}",
        meta.eval_samples, meta.eval_hash
    );
    Ok(())
}

fn bootstrap(a: &BootstrapArgs) -> Result<()> {
    let meta = read_meta(&a.data)?;
    let train = read_jsonl(&a.data.join(TRAIN_FILE))?;
    let mcfg = ModelConfig {
        d_model: a.d_model,
        n_heads: a.n_heads,
        d_ff: a.d_ff,
        l_vis: a.vision_layers,
        l_lm: a.lm_layers,
        n_queries: a.queries,
        grid: meta.config.scene.grid,
        rank: a.rank,
        adapter_mode: a.adapter_mode.into(),
        ..ModelConfig::default()
    };
    let mut cfg = StageConfig::desk(Stage::Bootstrap);
    a.schedule.apply(&mut cfg);
    echo(
        "bootstrap",
        Some(a.seed),
        json!({ "model": mcfg, "stage": cfg, "data": meta.config }),
    );
    let mut store = model::init(&mcfg, a.seed)?;
    let mut rng = Rng::new(a.seed);
    let run = StageRun {
        cfg: &cfg,
        model: &mcfg,
        samples: &train,
        scene: meta.config.scene,
    };
    let out = run_stage(
        &run,
        &mut store,
        &mut rng,
        &mut SceneCache::new(),
        None,
        None,
    )?;
    checkpoint::save(&a.out, &snapshot(&store, &rng, &mcfg, None)?)?;
    write_metrics(&metrics_path(&a.metrics, &a.out), &out.records)?;
    println!(
        "saved {} (params sha256 {})",
        a.out.display(),
        store.content_hash()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let stage: Stage = a.stage.parse()?;
    if stage == Stage::Bootstrap {
        bail!("use the bootstrap subcommand for the bootstrap stage");
    }
    let meta = read_meta(&a.data)?;
    let train = read_jsonl(&a.data.join(TRAIN_FILE))?;
    let ck = checkpoint::load(&a.init)?;
    let mut mcfg = model_config_of(&ck)?;
    if let Some(m) = a.adapter_mode {
        mcfg.adapter_mode = m.into();
    }
    let mut cfg = StageConfig::desk(stage);
    a.schedule.apply(&mut cfg);
    if let Some(h) = a.hint_style {
        cfg.hint_style = h.into();
    }
    if let Some(r) = a.tag_rate {
        cfg.tag_rate = r;
    }
    cfg.s3_train_bridge = a.train_bridge;
    let resume = ck.resume.filter(|(info, _)| info.stage == stage.name());
    echo(
        "train",
        None,
        json!({ "model": mcfg, "stage": cfg, "resume_from_step": resume.as_ref().map(|r| r.0.next_step) }),
    );
    let mut store = ck.params;
    let mut rng = ck.rng;
    let run = StageRun {
        cfg: &cfg,
        model: &mcfg,
        samples: &train,
        scene: meta.config.scene,
    };
    let out = run_stage(
        &run,
        &mut store,
        &mut rng,
        &mut SceneCache::new(),
        resume,
        a.until,
    )?;
    let stopped_at = out.resume.as_ref().map(|r| r.0.next_step);
    checkpoint::save(&a.out, &snapshot(&store, &rng, &mcfg, out.resume)?)?;
    write_metrics(&metrics_path(&a.metrics, &a.out), &out.records)?;
    match stopped_at {
        Some(s) => println!(
            "stopped before step {s}; saved resumable {}",
            a.out.display()
        ),
        None => println!(
            "saved {} (params sha256 {})",
            a.out.display(),
            store.content_hash()
        ),
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let task: EvalTask = a.task.parse()?;
    let meta = read_meta(&a.data)?;
    let file = if a.train_split { TRAIN_FILE } else { EVAL_FILE };
    let samples = read_jsonl(&a.data.join(file))?;
    let ck = checkpoint::load(&a.checkpoint)?;
    let mcfg = model_config_of(&ck)?;
    let opts = EvalOptions {
        seed: a.seed,
        tags: a.tags.map(Into::into),
        limit: a.limit,
        scene: meta.config.scene,
        ..EvalOptions::default()
    };
    echo(
        "eval",
        Some(a.seed),
        json!({ "task": task, "options": opts, "model": mcfg }),
    );
    let report = run_eval(
        task,
        &samples,
        &ck.params,
        &mcfg,
        &opts,
        &mut SceneCache::new(),
    )?;
    if let Some(out) = &a.out {
        write_text(out, &(report.to_json()? + "\n"))?;
    }
    println!(
        "{} {} = {:.4} over {} samples",
        task, report.metric, report.value, report.n_samples
    );
    Ok(())
}

fn render(a: &RenderArgs) -> Result<()> {
    let subtype: Subtype = a.subtype.parse()?;
    let mut slots = std::collections::BTreeMap::new();
    for (k, v) in [
        ("expr", &a.expr),
        ("Question", &a.question),
        ("Answer", &a.answer),
        ("BBox", &a.bbox),
    ] {
        if let Some(v) = v {
            slots.insert(k.to_string(), v.clone());
        }
    }
    println!("{}", render_template(subtype, a.index, &slots)?);
    Ok(())
}

fn inspect(a: &InspectArgs) -> Result<()> {
    let bytes = std::fs::read(&a.path).with_context(|| format!("reading {}", a.path.display()))?;
    let (header, _) = read_header(&bytes)?;
    let ck = checkpoint::from_bytes(&bytes)?;
    let mut groups = std::collections::BTreeMap::<String, (usize, usize, bool)>::new();
    for t in &header.tensors {
        let e = groups.entry(t.group.to_string()).or_default();
        e.0 += 1;
        e.1 += t.shape.iter().product::<usize>();
        e.2 |= t.trainable;
    }
    println!("format version {}", header.version);
    println!("provenance [{}]", header.provenance.join(", "));
    println!("rng state {:#018x}", header.rng_state);
    println!("params sha256 {}", ck.params.content_hash());
    for (g, (n, numel, trainable)) in groups {
        println!(
            "  {g:<15} {n:>4} tensors {numel:>8} values{}",
            if trainable { "  trainable" } else { "" }
        );
    }
    if let Some(r) = &header.resume {
        println!("resumable {} run at step {}", r.stage, r.next_step);
    }
    Ok(())
}

fn experiment_config(a: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let body =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&body).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ExperimentConfig::desk(),
    };
    cfg.seed = a.seed;
    cfg.data.seed = a.seed;
    cfg.no_router_arm |= a.no_router_arm;
    if let Some(n) = a.noise_rate {
        cfg.data.noise_rate = n;
    }
    Ok(cfg)
}

fn pretrained(a: &ExperimentArgs, cfg: &ExperimentConfig) -> Result<Option<ParamStore>> {
    let Some(path) = &a.init else { return Ok(None) };
    let ck = checkpoint::load(path)?;
    let model = ModelConfig {
        adapter_mode: cfg.model.adapter_mode,
        ..model_config_of(&ck)?
    };
    if model != cfg.model {
        bail!(
            "{} was trained with a different model configuration",
            path.display()
        );
    }
    Ok(Some(ck.params))
}

fn conflict(a: &ExperimentArgs) -> Result<()> {
    let cfg = experiment_config(a)?;
    echo("conflict", Some(cfg.seed), serde_json::to_value(&cfg)?);
    let init = pretrained(a, &cfg)?;
    let r = conflict_experiment(&cfg, init.as_ref())?;
    if let Some(out) = &a.out {
        write_text(out, &(serde_json::to_string_pretty(&r)? + "\n"))?;
    }
    for arm in [
        Some(&r.single_stage),
        Some(&r.stagewise),
        r.stagewise_no_router.as_ref(),
    ]
    .into_iter()
    .flatten()
    {
        println!(
            "{:<20} image {:.4}  rec {:.4}",
            arm.name, arm.image_accuracy, arm.rec_accuracy
        );
    }
    println!(
        "rec margin {:+.4}  image gap {:+.4}",
        r.rec_margin, r.image_gap
    );
    Ok(())
}

fn soft_prompt(a: &ExperimentArgs) -> Result<()> {
    let mut cfg = experiment_config(a)?;
    if a.noise_rate.is_none() && a.config.is_none() {
        cfg.data.noise_rate = 0.5;
    }
    echo("soft-prompt", Some(cfg.seed), serde_json::to_value(&cfg)?);
    let init = pretrained(a, &cfg)?;
    let r = soft_prompt_experiment(&cfg, init.as_ref())?;
    if let Some(out) = &a.out {
        write_text(out, &(serde_json::to_string_pretty(&r)? + "\n"))?;
    }
    println!(
        "noise {:.2}: soft {:.4}  plain {:.4}  gap {:+.4}",
        r.noise_rate, r.soft.image_accuracy, r.plain.image_accuracy, r.image_gap
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Bootstrap(a) => bootstrap(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::RenderTemplate(a) => render(a),
        Command::InspectCheckpoint(a) => inspect(a),
        Command::Conflict(a) => conflict(a),
        Command::SoftPrompt(a) => soft_prompt(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
