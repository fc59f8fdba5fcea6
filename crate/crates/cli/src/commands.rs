use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use anyhow::{anyhow, Context};
use huse_core::data::{load_bundle, synth_generate, write_bundle, DataBundle};
use huse_core::evaluator::{classification_report, embed_corpus, MatchRule, RetrievalReport};
use huse_core::gradcheck::{run_gradcheck, Component, GradcheckConfig, GradcheckDims};
use huse_core::trainer::{init_model, select_fusion_weight, TrainEvent, TrainHistory, Trainer};
use huse_core::{
    ClassEmbeddings, Exec, HuseError, HuseModel, LossMode, Modality, SemanticGraph, Split,
    SyntheticSpec, TrainConfig,
};

use crate::{
    BuildGraphArgs, Cli, Command, EvalArgs, ExportArgs, Failure, GenDataArgs, GradcheckArgs,
    TrainArgs, EXIT_GRADCHECK, EXIT_IO, EXIT_USAGE,
};

type CmdResult = std::result::Result<(), Failure>;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.tsv";
pub const CONFIG_SNAPSHOT_FILE: &str = "config.json";
pub const RETRIEVAL_REPORT_FILE: &str = "retrieval.tsv";
pub const CLASSIFICATION_REPORT_FILE: &str = "classification.tsv";

pub fn run(cli: Cli) -> CmdResult {
    let exec = if cli.threads > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| {
                Failure::new(
                    EXIT_USAGE,
                    anyhow!("cannot start {} threads: {e}", cli.threads),
                )
            })?;
        Exec::Parallel
    } else {
        Exec::Sequential
    };
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::BuildGraph(a) => build_graph(a),
        Command::Train(a) => train(a, exec),
        Command::Eval(a) => eval(a, exec),
        Command::ExportEmbeddings(a) => export(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_USAGE, anyhow!("{msg}"))
}

fn read_json(path: &Path) -> std::result::Result<serde_json::Value, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::new(EXIT_IO, anyhow!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Flag, then file, then `HUSE_SEED`, then 0.
fn resolve_seed(flag: Option<u64>, file: Option<u64>, env: Option<u64>) -> u64 {
    flag.or(file).or(env).unwrap_or(0)
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::new(EXIT_IO, anyhow!("cannot create {}: {e}", dir.display())))
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let value = read_json(&a.spec)?;
    let file_seed = value.get("seed").and_then(serde_json::Value::as_u64);
    let mut spec: SyntheticSpec =
        serde_json::from_value(value).map_err(|e| usage(format!("{}: {e}", a.spec.display())))?;
    spec.seed = resolve_seed(a.seed, file_seed, a.env_seed);
    let data = synth_generate(&spec).context("invalid synthetic spec")?;
    create_dir(&a.out)?;
    let manifest = write_bundle(
        &a.out,
        &data.dataset,
        &data.class_embeddings,
        &data.taxonomy,
        Some(format!("synthetic (seed {})", spec.seed)),
    )?;
    println!(
        "wrote {} instances to {}",
        data.dataset.len(),
        manifest.display()
    );
    Ok(())
}

fn build_graph(a: BuildGraphArgs) -> CmdResult {
    let ce_path = match (&a.class_embeddings, &a.manifest) {
        (Some(p), _) => p.clone(),
        (None, Some(m)) => huse_core::Manifest::load(m)?.class_embeddings,
        (None, None) => return Err(usage("pass --class-embeddings or --manifest")),
    };
    let ce = ClassEmbeddings::load(&ce_path)?;
    let graph = SemanticGraph::build(&ce)?;
    graph.save(&a.out)?;
    println!(
        "wrote {}x{} graph to {}",
        ce.num_classes(),
        ce.num_classes(),
        a.out.display()
    );
    Ok(())
}

fn load_graph(
    path: Option<&Path>,
    bundle: &DataBundle,
) -> std::result::Result<SemanticGraph, Failure> {
    let graph = match path {
        Some(p) => SemanticGraph::load(p)?,
        None => SemanticGraph::build(&bundle.class_embeddings)?,
    };
    if graph.num_classes() != bundle.dataset.num_classes() {
        return Err(usage(format!(
            "graph has {} classes but the dataset has {}",
            graph.num_classes(),
            bundle.dataset.num_classes()
        )));
    }
    Ok(graph)
}

fn effective_config(a: &TrainArgs) -> std::result::Result<TrainConfig, Failure> {
    let (mut cfg, file_seed) = match &a.config {
        Some(p) => {
            let value = read_json(p)?;
            let seed = value.get("seed").and_then(serde_json::Value::as_u64);
            let cfg: TrainConfig = serde_json::from_value(value)
                .map_err(|e| usage(format!("{}: {e}", p.display())))?;
            (cfg, seed)
        }
        None => (TrainConfig::default(), None),
    };
    cfg.seed = resolve_seed(a.seed, file_seed, a.env_seed);
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.steps {
        cfg.total_steps = v;
    }
    if let Some(m) = &a.mode {
        cfg.loss_mode = serde_json::from_value(serde_json::Value::String(m.clone()))
            .map_err(|_| usage(format!("unknown loss mode {m:?} (expected huse or huse_p)")))?;
    }
    if let Some(v) = a.alpha {
        cfg.weights.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.weights.beta = v;
    }
    if let Some(v) = a.gamma {
        cfg.weights.gamma = v;
    }
    if let Some(v) = a.zeta {
        cfg.weights.zeta_margin = v;
    }
    if let Some(v) = a.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    cfg.validate().context("invalid training config")?;
    Ok(cfg)
}

fn append_line(path: &Path, line: &str) -> huse_core::Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| io_error(path, e))?;
    writeln!(f, "{line}").map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> HuseError {
    HuseError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn train(a: TrainArgs, exec: Exec) -> CmdResult {
    let cfg = effective_config(&a)?;
    let bundle = load_bundle(&a.manifest)?;
    let graph = load_graph(a.graph.as_deref(), &bundle)?;
    let d = cfg.model.embedding_dim().unwrap_or(0);
    if cfg.loss_mode == LossMode::HuseP && bundle.class_embeddings.dim() != d {
        return Err(usage(format!(
            "huse_p mode needs class-embedding width {} to equal embedding dim {d}",
            bundle.class_embeddings.dim()
        )));
    }
    create_dir(&a.out)?;
    cfg.save(&a.out.join(CONFIG_SNAPSHOT_FILE))?;
    let history_path = a.out.join(HISTORY_FILE);
    fs::write(&history_path, format!("{}\n", TrainHistory::HEADER))
        .map_err(|e| io_error(&history_path, e))?;
    let ckpt_dir = a.out.join("checkpoints");

    let model = init_model(&cfg, &bundle.dataset)?;
    let mut trainer = Trainer::new(&bundle.dataset, &graph, &bundle.class_embeddings, &cfg);
    trainer.exec = exec;
    let mode = cfg.loss_mode;
    let (model, history) = trainer.run(model, |event| match event {
        TrainEvent::Logged(r) => {
            eprintln!(
                "step {:>7}  loss {:.5}  val {}",
                r.step,
                r.loss.total,
                r.val_metric
                    .map_or_else(|| "-".into(), |v| format!("{v:.4}"))
            );
            append_line(&history_path, &TrainHistory::format_record(r, mode))
        }
        TrainEvent::Checkpoint { step, model } => {
            fs::create_dir_all(&ckpt_dir).map_err(|e| io_error(&ckpt_dir, e))?;
            model.save_checkpoint(&ckpt_dir.join(format!("step_{step:08}.ckpt")))
        }
    })?;
    let ckpt = a.out.join(CHECKPOINT_FILE);
    model.save_checkpoint(&ckpt)?;
    println!(
        "trained {} steps ({} logged rows); checkpoint {}",
        cfg.total_steps,
        history.records.len(),
        ckpt.display()
    );
    Ok(())
}

fn parse_split(s: &str) -> std::result::Result<Split, Failure> {
    s.parse().map_err(|e: HuseError| usage(e))
}

/// Loads a checkpoint and checks it against the dataset's shapes.
fn load_model(path: &Path, bundle: &DataBundle) -> std::result::Result<HuseModel, Failure> {
    if !path.is_file() {
        return Err(usage(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    let model = HuseModel::load_checkpoint(path)?;
    let ds = &bundle.dataset;
    for (m, have) in [
        (Modality::Image, ds.image().cols()),
        (Modality::Text, ds.text().cols()),
    ] {
        let want = model.tower(m).config().input_dim;
        if want != have {
            return Err(usage(format!(
                "checkpoint {m} tower expects {want} features but the dataset has {have}"
            )));
        }
    }
    if model.num_classes() != ds.num_classes() {
        return Err(usage(format!(
            "checkpoint has {} classes but the dataset has {}",
            model.num_classes(),
            ds.num_classes()
        )));
    }
    Ok(model)
}

fn eval(a: EvalArgs, exec: Exec) -> CmdResult {
    let split = parse_split(&a.split)?;
    let bundle = load_bundle(&a.manifest)?;
    let model = load_model(&a.checkpoint, &bundle)?;
    let ds = &bundle.dataset;
    let img = embed_corpus(&model, ds, split, Modality::Image)?;
    let txt = embed_corpus(&model, ds, split, Modality::Text)?;
    let rule = if a.paired_instance {
        MatchRule::PairedInstance
    } else {
        MatchRule::SameClass
    };
    let retrieval = RetrievalReport::compute(&img, &txt, &bundle.taxonomy, rule, exec)?;
    let weight = match a.fusion_weight {
        Some(w) => w,
        None if !ds.indices(Split::Val).is_empty() => select_fusion_weight(&model, ds, Split::Val)?,
        None => {
            eprintln!("no validation split; using fusion weight 0.5");
            0.5
        }
    };
    let cls = classification_report(&model, ds, split, weight)?;
    create_dir(&a.out)?;
    retrieval.save(&a.out.join(RETRIEVAL_REPORT_FILE))?;
    cls.save(&a.out.join(CLASSIFICATION_REPORT_FILE))?;
    print!("{}", retrieval.to_tsv());
    println!("fusion weight {weight}");
    print!("{}", cls.to_tsv());
    Ok(())
}

fn export(a: ExportArgs) -> CmdResult {
    let split = parse_split(&a.split)?;
    let modality: Modality = a.modality.parse().map_err(|e: HuseError| usage(e))?;
    let bundle = load_bundle(&a.manifest)?;
    let model = load_model(&a.checkpoint, &bundle)?;
    let corpus = embed_corpus(&model, &bundle.dataset, split, modality)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    corpus.save(&a.out, split)?;
    println!(
        "wrote {} {modality} embeddings to {}",
        corpus.len(),
        a.out.display()
    );
    Ok(())
}

fn parse_dims(spec: &str) -> std::result::Result<GradcheckDims, Failure> {
    let mut dims = GradcheckDims::default();
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| usage(format!("bad dims entry {part:?} (expected key=value)")))?;
        let v: usize = value
            .parse()
            .map_err(|_| usage(format!("bad value for {key}: {value:?}")))?;
        match key {
            "n" => dims.n = v,
            "d" => dims.d = v,
            "k" => dims.k = v,
            "image_input" => dims.image_input = v,
            "text_input" => dims.text_input = v,
            "hidden" => dims.hidden = v,
            other => return Err(usage(format!("unknown dims key {other:?}"))),
        }
    }
    dims.validate()?;
    Ok(dims)
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let dims = match &a.dims {
        Some(s) => parse_dims(s)?,
        None => GradcheckDims::default(),
    };
    let corrupt = a
        .corrupt
        .as_deref()
        .map(str::parse::<Component>)
        .transpose()
        .map_err(usage)?;
    let cfg = GradcheckConfig {
        dims,
        seed: resolve_seed(a.seed, None, a.env_seed),
        ..GradcheckConfig::default()
    };
    let results = run_gradcheck(&cfg, corrupt)?;
    println!("component\tmax_rel_error\tstatus");
    for r in &results {
        println!(
            "{}\t{:.3e}\t{}",
            r.component,
            r.max_relative_error,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.component.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_GRADCHECK,
            anyhow!(
                "gradient check failed for {} (threshold {:e})",
                failed.join(", "),
                cfg.threshold
            ),
        ))
    }
}
