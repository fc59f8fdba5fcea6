//! Retrieval (recall@K), hierarchical precision@K and classification
//! accuracy over embedded corpora.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{read_feature_file, FeatureRow, Split, TripleDataset};
use crate::error::{HuseError, Result};
use crate::model::{HuseModel, Modality};
use crate::numerics::{argmax, cosine_distance_unchecked, norm, softmax_rows, Matrix};
use crate::semgraph::Taxonomy;
use crate::tsv;
use crate::Exec;

/// Maximum deviation from unit norm accepted for corpus rows.
pub const CORPUS_NORM_TOLERANCE: f64 = 1e-6;

/// Recall cut-offs reported per task.
pub const RECALL_KS: [usize; 3] = [1, 5, 10];
/// Hierarchical-precision cut-offs reported per task.
pub const HP_KS: [usize; 3] = [2, 5, 10];

/// Unit-norm embeddings of one modality with their labels and ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedCorpus {
    embeddings: Matrix,
    labels: Vec<usize>,
    ids: Vec<String>,
    modality: Modality,
}

impl EmbeddedCorpus {
    pub fn new(
        embeddings: Matrix,
        labels: Vec<usize>,
        ids: Vec<String>,
        modality: Modality,
    ) -> Result<Self> {
        if labels.len() != embeddings.rows() || ids.len() != embeddings.rows() {
            return Err(HuseError::invalid(format!(
                "corpus has {} rows but {} labels and {} ids",
                embeddings.rows(),
                labels.len(),
                ids.len()
            )));
        }
        if embeddings.rows() == 0 {
            return Err(HuseError::invalid("corpus is empty"));
        }
        if let Some(i) = embeddings
            .row_iter()
            .position(|r| (norm(r) - 1.0).abs() > CORPUS_NORM_TOLERANCE)
        {
            return Err(HuseError::invalid(format!(
                "corpus row {i} ({}) is not unit norm",
                ids[i]
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(HuseError::invalid(format!(
                "duplicate instance id {dup:?} in corpus"
            )));
        }
        Ok(Self {
            embeddings,
            labels,
            ids,
            modality,
        })
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature-file rows tagged with `split`.
    pub fn to_feature_rows(&self, split: Split) -> Vec<FeatureRow> {
        (0..self.len())
            .map(|i| FeatureRow {
                instance_id: self.ids[i].clone(),
                label: self.labels[i],
                split,
                values: self.embeddings.row(i).to_vec(),
            })
            .collect()
    }

    pub fn save(&self, path: &Path, split: Split) -> Result<()> {
        crate::data::write_feature_file(path, &self.to_feature_rows(split))
    }

    /// Reads an exported corpus back from feature-file format.
    pub fn load(path: &Path, modality: Modality) -> Result<Self> {
        let rows = read_feature_file(path)?;
        if rows.is_empty() {
            return Err(HuseError::invalid(format!(
                "{} has no rows",
                path.display()
            )));
        }
        let embeddings =
            Matrix::from_rows(&rows.iter().map(|r| r.values.clone()).collect::<Vec<_>>())?;
        Self::new(
            embeddings,
            rows.iter().map(|r| r.label).collect(),
            rows.into_iter().map(|r| r.instance_id).collect(),
            modality,
        )
    }
}

/// Inference-mode embeddings of one split and modality.
pub fn embed_corpus(
    model: &HuseModel,
    ds: &TripleDataset,
    split: Split,
    modality: Modality,
) -> Result<EmbeddedCorpus> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(HuseError::invalid(format!("split {split} is empty")));
    }
    let x = ds.features(modality).select_rows(&idx);
    let emb = model.tower(modality).forward_infer(&x)?;
    EmbeddedCorpus::new(
        emb,
        idx.iter().map(|&i| ds.labels()[i]).collect(),
        idx.iter().map(|&i| ds.ids()[i].clone()).collect(),
        modality,
    )
}

/// What counts as a correct retrieval.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    /// Any candidate of the query's class.
    #[default]
    SameClass,
    /// Only the candidate with the query's instance id.
    PairedInstance,
}

struct Ranker<'a> {
    queries: &'a EmbeddedCorpus,
    candidates: &'a EmbeddedCorpus,
    cand_norms: Vec<f64>,
    exclude_self: bool,
}

impl<'a> Ranker<'a> {
    fn new(queries: &'a EmbeddedCorpus, candidates: &'a EmbeddedCorpus) -> Result<Self> {
        if queries.embeddings.cols() != candidates.embeddings.cols() {
            return Err(HuseError::Shape {
                op: "retrieval",
                left: queries.embeddings.shape(),
                right: candidates.embeddings.shape(),
            });
        }
        Ok(Self {
            queries,
            candidates,
            cand_norms: candidates.embeddings.row_iter().map(norm).collect(),
            exclude_self: queries.modality == candidates.modality,
        })
    }

    /// Candidates available to every query after self-exclusion.
    fn pool_size(&self) -> usize {
        self.candidates.len() - usize::from(self.exclude_self)
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(HuseError::invalid("k must be >= 1"));
        }
        if k > self.pool_size() {
            return Err(HuseError::invalid(format!(
                "k = {k} exceeds the {} available candidates",
                self.pool_size()
            )));
        }
        Ok(())
    }

    /// Indices of the `k` nearest candidates, ascending by cosine distance
    /// with ties broken by instance id.
    fn top_k(&self, q: usize, k: usize) -> Vec<usize> {
        let qrow = self.queries.embeddings.row(q);
        let qnorm = norm(qrow);
        let qid = &self.queries.ids[q];
        let mut scored: Vec<(f64, usize)> = (0..self.candidates.len())
            .filter(|&c| !(self.exclude_self && &self.candidates.ids[c] == qid))
            .map(|c| {
                let d = cosine_distance_unchecked(
                    qrow,
                    self.candidates.embeddings.row(c),
                    qnorm,
                    self.cand_norms[c],
                );
                (d, c)
            })
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            a.0.total_cmp(&b.0)
                .then_with(|| self.candidates.ids[a.1].cmp(&self.candidates.ids[b.1]))
        };
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        scored.into_iter().map(|(_, c)| c).collect()
    }

    fn is_match(&self, q: usize, c: usize, rule: MatchRule) -> bool {
        match rule {
            MatchRule::SameClass => self.queries.labels[q] == self.candidates.labels[c],
            MatchRule::PairedInstance => self.queries.ids[q] == self.candidates.ids[c],
        }
    }
}

fn per_query<F>(n: usize, exec: Exec, f: F) -> Vec<f64>
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    match exec {
        Exec::Sequential => (0..n).map(f).collect(),
        Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn recall_from_ranking(
    r: &Ranker<'_>,
    q: usize,
    ranked: &[usize],
    k: usize,
    rule: MatchRule,
) -> f64 {
    if ranked[..k].iter().any(|&c| r.is_match(q, c, rule)) {
        1.0
    } else {
        0.0
    }
}

fn hp_from_ranking(
    r: &Ranker<'_>,
    q: usize,
    ranked: &[usize],
    k: usize,
    taxonomy: &Taxonomy,
) -> Result<f64> {
    let set = taxonomy.class_set(r.queries.labels[q], k)?;
    let hits = ranked[..k]
        .iter()
        .filter(|&&c| set.contains(&r.candidates.labels[c]))
        .count();
    Ok(hits as f64 / k as f64)
}

/// Fraction of queries with at least one match among the `k` nearest
/// candidates (same-class matches).
pub fn recall_at_k(queries: &EmbeddedCorpus, candidates: &EmbeddedCorpus, k: usize) -> Result<f64> {
    recall_at_k_with(
        queries,
        candidates,
        k,
        MatchRule::SameClass,
        Exec::Sequential,
    )
}

pub fn recall_at_k_with(
    queries: &EmbeddedCorpus,
    candidates: &EmbeddedCorpus,
    k: usize,
    rule: MatchRule,
    exec: Exec,
) -> Result<f64> {
    let r = Ranker::new(queries, candidates)?;
    r.check_k(k)?;
    let hits = per_query(queries.len(), exec, |q| {
        recall_from_ranking(&r, q, &r.top_k(q, k), k, rule)
    });
    Ok(mean(&hits))
}

fn check_hp_k(k: usize, taxonomy: &Taxonomy) -> Result<()> {
    if k > taxonomy.num_classes() {
        return Err(HuseError::invalid(format!(
            "k = {k} exceeds the {} classes of the taxonomy",
            taxonomy.num_classes()
        )));
    }
    Ok(())
}

/// Mean over queries of the fraction of the top-`k` candidates whose class
/// lies in the query class's `k`-element hierarchy class set.
pub fn hp_at_k(
    queries: &EmbeddedCorpus,
    candidates: &EmbeddedCorpus,
    k: usize,
    taxonomy: &Taxonomy,
) -> Result<f64> {
    hp_at_k_with(queries, candidates, k, taxonomy, Exec::Sequential)
}

pub fn hp_at_k_with(
    queries: &EmbeddedCorpus,
    candidates: &EmbeddedCorpus,
    k: usize,
    taxonomy: &Taxonomy,
    exec: Exec,
) -> Result<f64> {
    let r = Ranker::new(queries, candidates)?;
    r.check_k(k)?;
    check_hp_k(k, taxonomy)?;
    let vals = per_query(queries.len(), exec, |q| {
        hp_from_ranking(&r, q, &r.top_k(q, k), k, taxonomy).expect("k validated")
    });
    Ok(mean(&vals))
}

/// The four retrieval directions, in report order.
pub const TASKS: [(&str, Modality, Modality); 4] = [
    ("img2img", Modality::Image, Modality::Image),
    ("img2txt", Modality::Image, Modality::Text),
    ("txt2img", Modality::Text, Modality::Image),
    ("txt2txt", Modality::Text, Modality::Text),
];

/// Metrics of one retrieval direction. `None` marks a cut-off that does not
/// apply (more neighbours than candidates, or more than `K` classes).
#[derive(Clone, Debug, PartialEq)]
pub struct TaskMetrics {
    pub task: String,
    pub recall: [Option<f64>; 3],
    pub hp: [Option<f64>; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub tasks: Vec<TaskMetrics>,
}

impl RetrievalReport {
    /// Runs all four directions; each query is ranked once at the largest
    /// applicable cut-off and every metric is read off that ranking.
    pub fn compute(
        image: &EmbeddedCorpus,
        text: &EmbeddedCorpus,
        taxonomy: &Taxonomy,
        rule: MatchRule,
        exec: Exec,
    ) -> Result<Self> {
        let mut tasks = Vec::with_capacity(TASKS.len());
        for (name, qm, cm) in TASKS {
            let pick = |m: Modality| if m == Modality::Image { image } else { text };
            let r = Ranker::new(pick(qm), pick(cm))?;
            let pool = r.pool_size();
            let recall_ks: Vec<Option<usize>> = RECALL_KS
                .iter()
                .map(|&k| (k <= pool).then_some(k))
                .collect();
            let hp_ks: Vec<Option<usize>> = HP_KS
                .iter()
                .map(|&k| (k <= pool && k <= taxonomy.num_classes()).then_some(k))
                .collect();
            let kmax = recall_ks
                .iter()
                .chain(&hp_ks)
                .flatten()
                .copied()
                .max()
                .unwrap_or(0);
            let n = r.queries.len();
            let rows: Vec<Vec<f64>> = match exec {
                Exec::Sequential => (0..n)
                    .map(|q| query_metrics(&r, q, kmax, &recall_ks, &hp_ks, taxonomy, rule))
                    .collect(),
                Exec::Parallel => (0..n)
                    .into_par_iter()
                    .map(|q| query_metrics(&r, q, kmax, &recall_ks, &hp_ks, taxonomy, rule))
                    .collect(),
            };
            let col = |j: usize| mean(&rows.iter().map(|v| v[j]).collect::<Vec<_>>());
            let mut j = 0;
            let mut next = |k: &Option<usize>| {
                let v = k.map(|_| col(j));
                j += 1;
                v
            };
            let recall = [
                next(&recall_ks[0]),
                next(&recall_ks[1]),
                next(&recall_ks[2]),
            ];
            let hp = [next(&hp_ks[0]), next(&hp_ks[1]), next(&hp_ks[2])];
            tasks.push(TaskMetrics {
                task: name.to_string(),
                recall,
                hp,
            });
        }
        Ok(Self { tasks })
    }

    pub fn task(&self, name: &str) -> Option<&TaskMetrics> {
        self.tasks.iter().find(|t| t.task == name)
    }

    /// Mean of a metric across the tasks that report it.
    pub fn mean_hp(&self, k: usize) -> Option<f64> {
        let j = HP_KS.iter().position(|&x| x == k)?;
        let vals: Vec<f64> = self.tasks.iter().filter_map(|t| t.hp[j]).collect();
        (!vals.is_empty()).then(|| mean(&vals))
    }

    pub fn recall(&self, task: &str, k: usize) -> Option<f64> {
        let j = RECALL_KS.iter().position(|&x| x == k)?;
        self.task(task)?.recall[j]
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("task");
        for k in RECALL_KS {
            write!(out, "\tR@{k}").unwrap();
        }
        for k in HP_KS {
            write!(out, "\tHP@{k}").unwrap();
        }
        out.push('\n');
        for t in &self.tasks {
            out.push_str(&t.task);
            for v in t.recall.iter().chain(&t.hp) {
                match v {
                    Some(x) => write!(out, "\t{x:.3}").unwrap(),
                    None => out.push_str("\t-"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        tsv::write_file(path, &self.to_tsv())
    }

    /// Parses a table written by [`RetrievalReport::save`]; values carry
    /// the three decimals that were written.
    pub fn load(path: &Path) -> Result<Self> {
        let lines = tsv::read_lines(path)?;
        let Some((_, header)) = lines.first() else {
            return Err(HuseError::parse(path, 1, "empty report"));
        };
        let expected = Self { tasks: Vec::new() }.to_tsv();
        if header.as_str() != expected.trim_end() {
            return Err(HuseError::parse(
                path,
                1,
                format!("unexpected header {header:?}"),
            ));
        }
        let mut tasks = Vec::new();
        for (line, text) in &lines[1..] {
            let f: Vec<&str> = text.split('\t').collect();
            if f.len() != 1 + RECALL_KS.len() + HP_KS.len() {
                return Err(HuseError::parse(
                    path,
                    *line,
                    format!("expected 7 fields, found {}", f.len()),
                ));
            }
            let mut vals = [None; 6];
            for (v, s) in vals.iter_mut().zip(&f[1..]) {
                if *s != "-" {
                    *v =
                        Some(s.parse::<f64>().map_err(|_| {
                            HuseError::parse(path, *line, format!("bad value {s:?}"))
                        })?);
                }
            }
            tasks.push(TaskMetrics {
                task: f[0].to_string(),
                recall: [vals[0], vals[1], vals[2]],
                hp: [vals[3], vals[4], vals[5]],
            });
        }
        Ok(Self { tasks })
    }
}

fn query_metrics(
    r: &Ranker<'_>,
    q: usize,
    kmax: usize,
    recall_ks: &[Option<usize>],
    hp_ks: &[Option<usize>],
    taxonomy: &Taxonomy,
    rule: MatchRule,
) -> Vec<f64> {
    let ranked = r.top_k(q, kmax);
    let mut out = Vec::with_capacity(recall_ks.len() + hp_ks.len());
    for k in recall_ks {
        out.push(k.map_or(0.0, |k| recall_from_ranking(r, q, &ranked, k, rule)));
    }
    for k in hp_ks {
        out.push(k.map_or(0.0, |k| {
            hp_from_ranking(r, q, &ranked, k, taxonomy).expect("k validated")
        }));
    }
    out
}

/// Per-modality and fused accuracy on one split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub image: f64,
    pub text: f64,
    pub fused: f64,
    pub fusion_weight: f64,
}

impl ClassificationReport {
    pub fn to_tsv(&self) -> String {
        format!(
            "image\ttext\tfused\n{:.3}\t{:.3}\t{:.3}\n",
            self.image, self.text, self.fused
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        tsv::write_file(path, &self.to_tsv())
    }
}

/// Softmax class probabilities of one modality on a split.
pub fn class_probabilities(
    model: &HuseModel,
    ds: &TripleDataset,
    split: Split,
    modality: Modality,
) -> Result<Matrix> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(HuseError::invalid(format!("split {split} is empty")));
    }
    let emb = model
        .tower(modality)
        .forward_infer(&ds.features(modality).select_rows(&idx))?;
    Ok(softmax_rows(&model.classifier.logits(&emb)?))
}

fn check_weight(w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(HuseError::invalid(format!(
            "fusion weight must lie in [0, 1], got {w}"
        )));
    }
    Ok(())
}

/// Accuracy of `argmax(w·p_img + (1−w)·p_txt)`; ties go to the lowest class.
pub fn fused_accuracy(p_img: &Matrix, p_txt: &Matrix, labels: &[usize], w: f64) -> Result<f64> {
    check_weight(w)?;
    if p_img.shape() != p_txt.shape() || p_img.rows() != labels.len() {
        return Err(HuseError::Shape {
            op: "fused_accuracy",
            left: p_img.shape(),
            right: p_txt.shape(),
        });
    }
    if labels.is_empty() {
        return Err(HuseError::invalid("no examples to classify"));
    }
    let mut fused = vec![0.0; p_img.cols()];
    let mut correct = 0usize;
    for (r, &y) in labels.iter().enumerate() {
        for ((f, a), b) in fused.iter_mut().zip(p_img.row(r)).zip(p_txt.row(r)) {
            *f = w * a + (1.0 - w) * b;
        }
        correct += usize::from(argmax(&fused) == y);
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Image, text and fused accuracy with the given fusion weight.
pub fn classification_report(
    model: &HuseModel,
    ds: &TripleDataset,
    split: Split,
    fusion_weight: f64,
) -> Result<ClassificationReport> {
    check_weight(fusion_weight)?;
    let p_img = class_probabilities(model, ds, split, Modality::Image)?;
    let p_txt = class_probabilities(model, ds, split, Modality::Text)?;
    let labels: Vec<usize> = ds.indices(split).iter().map(|&i| ds.labels()[i]).collect();
    Ok(ClassificationReport {
        image: fused_accuracy(&p_img, &p_txt, &labels, 1.0)?,
        text: fused_accuracy(&p_img, &p_txt, &labels, 0.0)?,
        fused: fused_accuracy(&p_img, &p_txt, &labels, fusion_weight)?,
        fusion_weight,
    })
}
