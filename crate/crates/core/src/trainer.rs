//! RMSProp-with-momentum training loop over the combined objective.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{BatchStream, Split, TripleDataset};
use crate::error::{HuseError, Result};
use crate::evaluator::{class_probabilities, classification_report, fused_accuracy};
use crate::losses::{total_loss, LossBreakdown, LossMode, LossWeights, Objective, SigmaRule};
use crate::model::{HuseModel, Modality, ModelGrads, TowerConfig};
use crate::numerics::{Matrix, RngState};
use crate::semgraph::{ClassEmbeddings, SemanticGraph};
use crate::tsv;
use crate::Exec;

/// Random streams derived from the run seed.
const STREAM_INIT: u64 = 1;
const STREAM_BATCHES: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

/// Tower shapes; input widths come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths of the image tower; the last entry is the embedding size.
    pub image_layers: Vec<usize>,
    /// Hidden widths of the text tower; must end in the same embedding size.
    pub text_layers: Vec<usize>,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_layers: vec![512, 512, 512, 512, 512, 64],
            text_layers: vec![512, 512, 64],
            dropout_rate: 0.15,
        }
    }
}

impl ModelConfig {
    pub fn embedding_dim(&self) -> Option<usize> {
        self.image_layers.last().copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub rms_decay: f64,
    pub rms_epsilon: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub weights: LossWeights,
    pub sigma_rule: SigmaRule,
    /// Validation cadence in steps; 0 disables validation rows.
    pub eval_every: usize,
    /// Checkpoint cadence in steps; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.6192e-5,
            momentum: 0.9,
            rms_decay: 0.9,
            rms_epsilon: 1e-10,
            batch_size: 1024,
            total_steps: 250_000,
            seed: 0,
            loss_mode: LossMode::Huse,
            weights: LossWeights::default(),
            sigma_rule: SigmaRule::Conjunction,
            eval_every: 1000,
            checkpoint_every: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(HuseError::invalid(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(HuseError::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.rms_decay > 0.0 && self.rms_decay < 1.0) {
            return Err(HuseError::invalid(format!(
                "rms_decay must lie in (0, 1), got {}",
                self.rms_decay
            )));
        }
        if !(self.rms_epsilon > 0.0 && self.rms_epsilon.is_finite()) {
            return Err(HuseError::invalid(format!(
                "rms_epsilon must be > 0, got {}",
                self.rms_epsilon
            )));
        }
        if self.batch_size == 0 {
            return Err(HuseError::invalid("batch_size must be >= 1"));
        }
        if self.total_steps == 0 {
            return Err(HuseError::invalid("total_steps must be >= 1"));
        }
        self.weights.validate()?;
        let m = &self.model;
        if m.image_layers.is_empty() || m.text_layers.is_empty() {
            return Err(HuseError::invalid("each tower needs at least one layer"));
        }
        if m.image_layers.last() != m.text_layers.last() {
            return Err(HuseError::invalid(format!(
                "tower output widths differ: image {} vs text {}",
                m.image_layers.last().unwrap(),
                m.text_layers.last().unwrap()
            )));
        }
        if !(0.0..1.0).contains(&m.dropout_rate) {
            return Err(HuseError::invalid(format!(
                "dropout_rate must lie in [0, 1), got {}",
                m.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn rmsprop(&self) -> RmsProp {
        RmsProp {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            decay: self.rms_decay,
            epsilon: self.rms_epsilon,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HuseError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HuseError::parse(path, e.line(), e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        tsv::write_file(path, &(text + "\n"))
    }
}

/// Optimizer hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay: f64,
    pub epsilon: f64,
}

/// One RMSProp update applied elementwise:
/// `acc ← ρ·acc + (1−ρ)·g²`, `buf ← μ·buf + g/√(acc+ε)`, `θ ← θ − lr·buf`.
pub fn rmsprop_step(
    params: &mut [f64],
    grads: &[f64],
    acc: &mut [f64],
    buf: &mut [f64],
    hp: &RmsProp,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || acc.len() != n || buf.len() != n {
        return Err(HuseError::invalid(format!(
            "rmsprop_step: {n} params but {} grads, {} accumulators, {} buffers",
            grads.len(),
            acc.len(),
            buf.len()
        )));
    }
    for i in 0..n {
        let g = grads[i];
        acc[i] = hp.decay * acc[i] + (1.0 - hp.decay) * g * g;
        buf[i] = hp.momentum * buf[i] + g / (acc[i] + hp.epsilon).sqrt();
        params[i] -= hp.learning_rate * buf[i];
    }
    Ok(())
}

/// Per-tensor accumulators mirroring [`HuseModel::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub accumulators: Vec<Vec<f64>>,
    pub buffers: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn new(model: &HuseModel) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .tensors()
            .iter()
            .map(|(_, _, v)| vec![0.0; v.len()])
            .collect();
        Self {
            accumulators: zeros.clone(),
            buffers: zeros,
            step: 0,
        }
    }

    pub fn apply(&mut self, model: &mut HuseModel, grads: &ModelGrads, hp: &RmsProp) -> Result<()> {
        let g = grads.tensors();
        let mut params = model.tensors_mut();
        if g.len() != params.len() || params.len() != self.accumulators.len() {
            return Err(HuseError::invalid(
                "gradient tensors do not match the model",
            ));
        }
        for (i, p) in params.iter_mut().enumerate() {
            rmsprop_step(p, g[i], &mut self.accumulators[i], &mut self.buffers[i], hp)?;
        }
        self.step += 1;
        Ok(())
    }
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRecord {
    pub step: usize,
    /// Loss on the batch processed at this step, before its update.
    pub loss: LossBreakdown,
    pub wall_seconds: f64,
    /// Mean of image and text validation accuracy, when a validation split exists.
    pub val_metric: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    pub const HEADER: &'static str = "step\ttotal\tcls\tgraph\tgap\tval_metric";

    pub fn push(&mut self, record: HistoryRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(HuseError::invalid(format!(
                    "history step {} does not follow {}",
                    record.step, last.step
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    /// One TSV line for a record, without trailing newline. In projection
    /// mode the graph column carries the projection term.
    pub fn format_record(r: &HistoryRecord, mode: LossMode) -> String {
        let reg = match mode {
            LossMode::Huse => r.loss.graph,
            LossMode::HuseP => r.loss.projection,
        };
        let val = r
            .val_metric
            .map_or_else(|| "-".to_string(), |v| v.to_string());
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.step, r.loss.total, r.loss.classification, reg, r.loss.gap, val
        )
    }

    pub fn to_tsv(&self, mode: LossMode) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.records {
            writeln!(out, "{}", Self::format_record(r, mode)).unwrap();
        }
        out
    }
}

/// Progress notifications emitted by [`Trainer::run`].
pub enum TrainEvent<'a> {
    /// A validation row was appended to the history.
    Logged(&'a HistoryRecord),
    /// `checkpoint_every` steps have elapsed.
    Checkpoint { step: usize, model: &'a HuseModel },
}

/// Initializes a model whose input widths match `ds`.
pub fn init_model(cfg: &TrainConfig, ds: &TripleDataset) -> Result<HuseModel> {
    cfg.validate()?;
    let m = &cfg.model;
    let mut rng = RngState::new(cfg.seed).derive(STREAM_INIT);
    HuseModel::init(
        TowerConfig::new(ds.image().cols(), m.image_layers.clone(), m.dropout_rate),
        TowerConfig::new(ds.text().cols(), m.text_layers.clone(), m.dropout_rate),
        ds.num_classes(),
        &mut rng,
    )
}

/// Everything a training run reads.
pub struct Trainer<'a> {
    pub dataset: &'a TripleDataset,
    pub graph: &'a SemanticGraph,
    pub class_embeddings: &'a ClassEmbeddings,
    pub config: &'a TrainConfig,
    pub exec: Exec,
}

impl<'a> Trainer<'a> {
    pub fn new(
        dataset: &'a TripleDataset,
        graph: &'a SemanticGraph,
        class_embeddings: &'a ClassEmbeddings,
        config: &'a TrainConfig,
    ) -> Self {
        Self {
            dataset,
            graph,
            class_embeddings,
            config,
            exec: Exec::Sequential,
        }
    }

    pub fn objective(&self) -> Objective<'a> {
        Objective {
            mode: self.config.loss_mode,
            weights: self.config.weights,
            sigma_rule: self.config.sigma_rule,
            graph: self.graph,
            class_embeddings: Some(self.class_embeddings),
        }
    }

    fn check(&self, model: &HuseModel) -> Result<()> {
        self.config.validate()?;
        let k = self.dataset.num_classes();
        if self.graph.num_classes() != k || model.num_classes() != k {
            return Err(HuseError::invalid(format!(
                "class counts differ: dataset {k}, graph {}, model {}",
                self.graph.num_classes(),
                model.num_classes()
            )));
        }
        if self.class_embeddings.num_classes() != k {
            return Err(HuseError::invalid(format!(
                "class counts differ: dataset {k}, class embeddings {}",
                self.class_embeddings.num_classes()
            )));
        }
        if self.config.loss_mode == LossMode::HuseP
            && self.class_embeddings.dim() != model.embedding_dim()
        {
            return Err(HuseError::invalid(format!(
                "projection mode needs class-embedding width {} to equal embedding dim {}",
                self.class_embeddings.dim(),
                model.embedding_dim()
            )));
        }
        for (m, tower) in [
            (Modality::Image, &model.image),
            (Modality::Text, &model.text),
        ] {
            let want = tower.config().input_dim;
            let have = self.dataset.features(m).cols();
            if want != have {
                return Err(HuseError::invalid(format!(
                    "{m} tower expects {want} inputs but features have {have}"
                )));
            }
        }
        Ok(())
    }

    /// Runs `total_steps` updates, calling `observer` on every logged row and
    /// checkpoint.
    pub fn run<F>(&self, mut model: HuseModel, mut observer: F) -> Result<(HuseModel, TrainHistory)>
    where
        F: FnMut(TrainEvent<'_>) -> Result<()>,
    {
        self.check(&model)?;
        let cfg = self.config;
        let ds = self.dataset;
        let base = RngState::new(cfg.seed);
        let mut batches = BatchStream::new(
            ds,
            Split::Train,
            cfg.batch_size,
            base.derive(STREAM_BATCHES),
        )?;
        let mut dropout = base.derive(STREAM_DROPOUT);
        let mut opt = OptimState::new(&model);
        let hp = cfg.rmsprop();
        let obj = self.objective();
        let has_val = !ds.indices(Split::Val).is_empty();
        let mut history = TrainHistory::default();
        let start = Instant::now();

        for step in 1..=cfg.total_steps {
            let idx = batches.next_batch().to_vec();
            let labels: Vec<usize> = idx.iter().map(|&i| ds.labels()[i]).collect();
            let xi = ds.image().select_rows(&idx);
            let xt = ds.text().select_rows(&idx);
            let (ei, ci) = model.image.forward_train(&xi, &mut dropout)?;
            let (et, ct) = model.text.forward_train(&xt, &mut dropout)?;
            // diverged weights show up as non-finite or collapsed (zero) embeddings
            if !(on_sphere(&ei) && on_sphere(&et)) {
                return Err(HuseError::NonFinite { step });
            }
            let (loss, g) = total_loss(&obj, &model.classifier, &ei, &et, &labels, self.exec)?;
            if !loss.total.is_finite() {
                return Err(HuseError::NonFinite { step });
            }
            let (gi, _) = model.image.backward(&ci, &g.image)?;
            let (gt, _) = model.text.backward(&ct, &g.text)?;
            let grads = ModelGrads {
                image: gi,
                text: gt,
                classifier: g.classifier,
            };
            opt.apply(&mut model, &grads, &hp)?;
            if !model
                .tensors()
                .iter()
                .all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
            {
                return Err(HuseError::NonFinite { step });
            }

            if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                let val_metric = if has_val {
                    let r = classification_report(&model, ds, Split::Val, 0.5)?;
                    Some(0.5 * (r.image + r.text))
                } else {
                    None
                };
                history.push(HistoryRecord {
                    step,
                    loss,
                    wall_seconds: start.elapsed().as_secs_f64(),
                    val_metric,
                })?;
                observer(TrainEvent::Logged(history.records.last().unwrap()))?;
            }
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                observer(TrainEvent::Checkpoint {
                    step,
                    model: &model,
                })?;
            }
        }
        Ok((model, history))
    }
}

fn on_sphere(m: &Matrix) -> bool {
    m.row_iter()
        .all(|r| (crate::numerics::norm(r) - 1.0).abs() <= crate::losses::UNIT_NORM_TOLERANCE)
}

/// Initializes a model from `cfg` and trains it sequentially.
pub fn train(
    ds: &TripleDataset,
    graph: &SemanticGraph,
    class_embeddings: &ClassEmbeddings,
    cfg: &TrainConfig,
) -> Result<(HuseModel, TrainHistory)> {
    let model = init_model(cfg, ds)?;
    Trainer::new(ds, graph, class_embeddings, cfg).run(model, |_| Ok(()))
}

/// The combined objective over a whole split in inference mode.
pub fn evaluate_loss(
    model: &HuseModel,
    ds: &TripleDataset,
    split: Split,
    obj: &Objective<'_>,
    exec: Exec,
) -> Result<LossBreakdown> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(HuseError::invalid(format!("split {split} is empty")));
    }
    let labels: Vec<usize> = idx.iter().map(|&i| ds.labels()[i]).collect();
    let ei = model.image.forward_infer(&ds.image().select_rows(&idx))?;
    let et = model.text.forward_infer(&ds.text().select_rows(&idx))?;
    Ok(total_loss(obj, &model.classifier, &ei, &et, &labels, exec)?.0)
}

/// Grid of candidate fusion weights `0, 0.05, …, 1`.
pub fn fusion_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Picks the grid weight with the best fused accuracy; ties go to the
/// smaller weight.
pub fn select_fusion_weight_from_probs(
    p_img: &Matrix,
    p_txt: &Matrix,
    labels: &[usize],
) -> Result<f64> {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for w in fusion_grid() {
        let acc = fused_accuracy(p_img, p_txt, labels, w)?;
        if acc > best.0 {
            best = (acc, w);
        }
    }
    Ok(best.1)
}

/// Fusion weight chosen on `split` (normally validation).
pub fn select_fusion_weight(model: &HuseModel, ds: &TripleDataset, split: Split) -> Result<f64> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(HuseError::invalid(format!(
            "split {split} is empty; cannot select a fusion weight"
        )));
    }
    let p_img = class_probabilities(model, ds, split, Modality::Image)?;
    let p_txt = class_probabilities(model, ds, split, Modality::Text)?;
    let labels: Vec<usize> = idx.iter().map(|&i| ds.labels()[i]).collect();
    select_fusion_weight_from_probs(&p_img, &p_txt, &labels)
}
