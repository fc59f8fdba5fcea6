//! Finite-difference verification of every analytic gradient.
//!
//! Each component compares its backward pass against central differences
//! on a small random problem and reports the largest norm-based relative
//! error across the tensors it owns.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HuseError, Result};
use crate::losses::{
    classification_loss, gap_loss, graph_loss, projection_loss, total_loss, LossMode, LossWeights,
    Objective, SigmaRule,
};
use crate::model::{HuseModel, SharedClassifier, Tower, TowerConfig};
use crate::numerics::{finite_diff_grad, l2_normalize_rows, relative_error, Matrix, RngState};
use crate::semgraph::{ClassEmbeddings, SemanticGraph};
use crate::Exec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    Classification,
    Graph,
    Gap,
    Projection,
    ImageTower,
    TextTower,
    FullModel,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Classification,
        Component::Graph,
        Component::Gap,
        Component::Projection,
        Component::ImageTower,
        Component::TextTower,
        Component::FullModel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Classification => "classification",
            Component::Graph => "graph",
            Component::Gap => "gap",
            Component::Projection => "projection",
            Component::ImageTower => "image_tower",
            Component::TextTower => "text_tower",
            Component::FullModel => "full_model",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = HuseError;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| HuseError::invalid(format!("unknown gradcheck component {s:?}")))
    }
}

/// Problem sizes for the check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckDims {
    /// Aligned pairs per batch.
    pub n: usize,
    /// Embedding dimension.
    pub d: usize,
    /// Number of classes.
    pub k: usize,
    pub image_input: usize,
    pub text_input: usize,
    pub hidden: usize,
}

impl Default for GradcheckDims {
    fn default() -> Self {
        Self {
            n: 6,
            d: 8,
            k: 5,
            image_input: 7,
            text_input: 5,
            hidden: 10,
        }
    }
}

impl GradcheckDims {
    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.n) {
            return Err(HuseError::invalid(format!(
                "gradcheck needs 1 <= N <= 16, got {}",
                self.n
            )));
        }
        if !(2..=32).contains(&self.d) {
            return Err(HuseError::invalid(format!(
                "gradcheck needs 2 <= D <= 32, got {}",
                self.d
            )));
        }
        if !(2..=64).contains(&self.k) {
            return Err(HuseError::invalid(format!(
                "gradcheck needs 2 <= K <= 64, got {}",
                self.k
            )));
        }
        if self.image_input == 0 || self.text_input == 0 || self.hidden == 0 {
            return Err(HuseError::invalid(
                "gradcheck input and hidden widths must be >= 1",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub dims: GradcheckDims,
    pub step: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            dims: GradcheckDims::default(),
            step: 1e-5,
            threshold: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComponentResult {
    pub component: Component,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// Runs every component. `corrupt` perturbs one component's analytic
/// gradient to exercise the failure path.
pub fn run_gradcheck(
    cfg: &GradcheckConfig,
    corrupt: Option<Component>,
) -> Result<Vec<ComponentResult>> {
    cfg.dims.validate()?;
    if !(cfg.step > 0.0 && cfg.threshold > 0.0) {
        return Err(HuseError::invalid(
            "gradcheck step and threshold must be positive",
        ));
    }
    let fx = Fixture::new(cfg)?;
    Component::ALL
        .into_iter()
        .map(|c| {
            let err = fx.check(c, corrupt == Some(c))?;
            Ok(ComponentResult {
                component: c,
                max_relative_error: err,
                passed: err < cfg.threshold,
            })
        })
        .collect()
}

struct Fixture {
    h: f64,
    labels: Vec<usize>,
    img: Matrix,
    txt: Matrix,
    classifier: SharedClassifier,
    class_embeddings: ClassEmbeddings,
    graph: SemanticGraph,
    zeta: f64,
    model_zeta: f64,
    model: HuseModel,
    x_img: Matrix,
    x_txt: Matrix,
    probe: Matrix,
}

fn unit_rows(rng: &mut RngState, rows: usize, cols: usize) -> Result<Matrix> {
    Ok(l2_normalize_rows(&rng.standard_normal(rows, cols), 1e-12)?.0)
}

/// Margin in the middle of the widest gap between pairwise distances in
/// the upper half of their range. No pair sits on the gate during
/// differencing and most pairs stay active.
fn margin_away_from_pairs(emb: &Matrix) -> f64 {
    let mut ds: Vec<f64> = Vec::new();
    for i in 0..emb.rows() {
        for j in (i + 1)..emb.rows() {
            ds.push(crate::numerics::cosine_distance(emb.row(i), emb.row(j)).unwrap_or(0.0));
        }
    }
    ds.sort_by(f64::total_cmp);
    let median = ds.get(ds.len() / 2).copied().unwrap_or(1.0);
    ds.push(2.0);
    let mut best = (0.0, 1.0);
    for w in ds.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        if mid > median && mid < 2.0 && w[1] - w[0] > best.0 {
            best = (w[1] - w[0], mid);
        }
    }
    best.1
}

fn corrupt_in_place(m: &mut Matrix, on: bool) {
    if on {
        m.scale(1.5);
    }
}

fn vec_matrix(v: &[f64]) -> Matrix {
    Matrix::new(1, v.len(), v.to_vec()).expect("finite")
}

impl Fixture {
    fn new(cfg: &GradcheckConfig) -> Result<Self> {
        let d = cfg.dims;
        let mut rng = RngState::new(cfg.seed);
        let labels: Vec<usize> = (0..d.n)
            .map(|i| (i + (rng.uniform() * d.k as f64) as usize) % d.k)
            .collect();
        let img = unit_rows(&mut rng, d.n, d.d)?;
        let txt = unit_rows(&mut rng, d.n, d.d)?;
        let mut w = rng.standard_normal(d.d, d.k);
        w.scale(0.5);
        let b: Vec<f64> = (0..d.k).map(|_| 0.1 * rng.normal()).collect();
        let classifier = SharedClassifier::new(w, b)?;
        let names = (0..d.k).map(|i| format!("c{i}")).collect();
        let class_embeddings = ClassEmbeddings::new(names, rng.standard_normal(d.k, d.d))?;
        let graph = SemanticGraph::build(&class_embeddings)?;
        let zeta = margin_away_from_pairs(&img.vstack(&txt)?);
        let model = HuseModel::init(
            TowerConfig::new(d.image_input, vec![d.hidden, d.d], 0.0),
            TowerConfig::new(d.text_input, vec![d.hidden, d.d], 0.0),
            d.k,
            &mut rng,
        )?;
        let x_img = rng.standard_normal(d.n, d.image_input);
        let x_txt = rng.standard_normal(d.n, d.text_input);
        let probe = rng.standard_normal(d.n, d.d);
        let model_zeta = margin_away_from_pairs(
            &model
                .image
                .forward_infer(&x_img)?
                .vstack(&model.text.forward_infer(&x_txt)?)?,
        );
        Ok(Self {
            h: cfg.step,
            labels,
            img,
            txt,
            classifier,
            class_embeddings,
            graph,
            zeta,
            model_zeta,
            model,
            x_img,
            x_txt,
            probe,
        })
    }

    fn check(&self, c: Component, corrupt: bool) -> Result<f64> {
        match c {
            Component::Classification => self.classification(corrupt),
            Component::Graph => self.graph(corrupt),
            Component::Gap => self.gap(corrupt),
            Component::Projection => self.projection(corrupt),
            Component::ImageTower => self.tower(&self.model.image, &self.x_img, corrupt),
            Component::TextTower => self.tower(&self.model.text, &self.x_txt, corrupt),
            Component::FullModel => self.full_model(corrupt),
        }
    }

    fn classification(&self, corrupt: bool) -> Result<f64> {
        let loss = |clf: &SharedClassifier, e: &Matrix| -> f64 {
            classification_loss(&clf.logits(e).unwrap(), &self.labels)
                .unwrap()
                .0
        };
        let logits = self.classifier.logits(&self.img)?;
        let (_, g_logits) = classification_loss(&logits, &self.labels)?;
        let (cg, mut g_emb) = self.classifier.backward(&self.img, &g_logits)?;
        corrupt_in_place(&mut g_emb, corrupt);

        let n_emb = finite_diff_grad(|e| loss(&self.classifier, e), &self.img, self.h);
        let n_w = finite_diff_grad(
            |w| {
                let mut c = self.classifier.clone();
                c.weight = w.clone();
                loss(&c, &self.img)
            },
            &self.classifier.weight,
            self.h,
        );
        let n_b = finite_diff_grad(
            |b| {
                let mut c = self.classifier.clone();
                c.bias = b.as_slice().to_vec();
                loss(&c, &self.img)
            },
            &vec_matrix(&self.classifier.bias),
            self.h,
        );
        Ok(relative_error(g_emb.as_slice(), n_emb.as_slice())
            .max(relative_error(cg.weight.as_slice(), n_w.as_slice()))
            .max(relative_error(&cg.bias, n_b.as_slice())))
    }

    fn graph(&self, corrupt: bool) -> Result<f64> {
        let pooled = self.img.vstack(&self.txt)?;
        let labels: Vec<usize> = self.labels.iter().chain(&self.labels).copied().collect();
        let mut worst: f64 = 0.0;
        for rule in [SigmaRule::Conjunction, SigmaRule::Disjunction] {
            let f = |e: &Matrix| {
                graph_loss(e, &labels, &self.graph, self.zeta, rule, Exec::Sequential)
                    .unwrap()
                    .0
            };
            let (_, mut g) = graph_loss(
                &pooled,
                &labels,
                &self.graph,
                self.zeta,
                rule,
                Exec::Sequential,
            )?;
            corrupt_in_place(&mut g, corrupt);
            let n = finite_diff_grad(f, &pooled, self.h);
            worst = worst.max(relative_error(g.as_slice(), n.as_slice()));
        }
        Ok(worst)
    }

    fn pair_check<F>(&self, f: F, gi: &Matrix, gt: &Matrix) -> f64
    where
        F: Fn(&Matrix, &Matrix) -> f64,
    {
        let ni = finite_diff_grad(|m| f(m, &self.txt), &self.img, self.h);
        let nt = finite_diff_grad(|m| f(&self.img, m), &self.txt, self.h);
        relative_error(gi.as_slice(), ni.as_slice())
            .max(relative_error(gt.as_slice(), nt.as_slice()))
    }

    fn gap(&self, corrupt: bool) -> Result<f64> {
        let (_, mut gi, gt) = gap_loss(&self.img, &self.txt)?;
        corrupt_in_place(&mut gi, corrupt);
        Ok(self.pair_check(|a, b| gap_loss(a, b).unwrap().0, &gi, &gt))
    }

    fn projection(&self, corrupt: bool) -> Result<f64> {
        let ce = &self.class_embeddings;
        let (_, mut gi, gt) = projection_loss(&self.img, &self.txt, &self.labels, ce)?;
        corrupt_in_place(&mut gi, corrupt);
        Ok(self.pair_check(
            |a, b| projection_loss(a, b, &self.labels, ce).unwrap().0,
            &gi,
            &gt,
        ))
    }

    /// Checks a tower under the scalar probe `Σ probe ⊙ tower(x)`.
    fn tower(&self, tower: &Tower, x: &Matrix, corrupt: bool) -> Result<f64> {
        let probe_loss = |t: &Tower, x: &Matrix| -> f64 {
            let e = t.forward_infer(x).unwrap();
            e.as_slice()
                .iter()
                .zip(self.probe.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut rng = RngState::new(0);
        let (_, cache) = tower.forward_train(x, &mut rng)?;
        let (grads, mut g_in) = tower.backward(&cache, &self.probe)?;
        corrupt_in_place(&mut g_in, corrupt);
        let mut worst = relative_error(
            g_in.as_slice(),
            finite_diff_grad(|m| probe_loss(tower, m), x, self.h).as_slice(),
        );
        for (i, lg) in grads.layers.iter().enumerate() {
            let nw = finite_diff_grad(
                |w| {
                    let mut t = tower.clone();
                    t.layers_mut()[i].weight = w.clone();
                    probe_loss(&t, x)
                },
                &tower.layers()[i].weight,
                self.h,
            );
            let nb = finite_diff_grad(
                |b| {
                    let mut t = tower.clone();
                    t.layers_mut()[i].bias = b.as_slice().to_vec();
                    probe_loss(&t, x)
                },
                &vec_matrix(&tower.layers()[i].bias),
                self.h,
            );
            worst = worst
                .max(relative_error(lg.weight.as_slice(), nw.as_slice()))
                .max(relative_error(&lg.bias, nb.as_slice()));
        }
        Ok(worst)
    }

    /// Every parameter of the two towers and the shared layer under the
    /// combined objective, in both loss modes.
    fn full_model(&self, corrupt: bool) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for mode in [LossMode::Huse, LossMode::HuseP] {
            let obj = Objective {
                mode,
                weights: LossWeights {
                    alpha: 1.0,
                    beta: 0.7,
                    gamma: 0.5,
                    zeta_margin: self.model_zeta,
                },
                sigma_rule: SigmaRule::Conjunction,
                graph: &self.graph,
                class_embeddings: Some(&self.class_embeddings),
            };
            let value = |m: &HuseModel| -> f64 {
                let ei = m.image.forward_infer(&self.x_img).unwrap();
                let et = m.text.forward_infer(&self.x_txt).unwrap();
                total_loss(
                    &obj,
                    &m.classifier,
                    &ei,
                    &et,
                    &self.labels,
                    Exec::Sequential,
                )
                .unwrap()
                .0
                .total
            };
            let mut rng = RngState::new(0);
            let (ei, ci) = self.model.image.forward_train(&self.x_img, &mut rng)?;
            let (et, ct) = self.model.text.forward_train(&self.x_txt, &mut rng)?;
            let (_, g) = total_loss(
                &obj,
                &self.model.classifier,
                &ei,
                &et,
                &self.labels,
                Exec::Sequential,
            )?;
            let (gi, _) = self.model.image.backward(&ci, &g.image)?;
            let (gt, _) = self.model.text.backward(&ct, &g.text)?;
            let grads = crate::model::ModelGrads {
                image: gi,
                text: gt,
                classifier: g.classifier,
            };
            let analytic: Vec<Vec<f64>> =
                grads.tensors().into_iter().map(<[f64]>::to_vec).collect();
            for (t, a) in analytic.iter().enumerate() {
                let current = vec_matrix(self.model.tensors()[t].2);
                let numeric = finite_diff_grad(
                    |p| {
                        let mut m = self.model.clone();
                        m.tensors_mut()[t].copy_from_slice(p.as_slice());
                        value(&m)
                    },
                    &current,
                    self.h,
                );
                let mut a = a.clone();
                if corrupt && t == 0 {
                    a.iter_mut().for_each(|v| *v *= 1.5);
                }
                worst = worst.max(relative_error(&a, numeric.as_slice()));
            }
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let res = run_gradcheck(&GradcheckConfig::default(), None).unwrap();
        assert_eq!(res.len(), Component::ALL.len());
        for r in &res {
            assert!(
                r.passed,
                "{} failed with {}",
                r.component, r.max_relative_error
            );
        }
    }

    #[test]
    fn corruption_is_detected_and_isolated() {
        for c in [Component::Graph, Component::FullModel] {
            let res = run_gradcheck(&GradcheckConfig::default(), Some(c)).unwrap();
            for r in res {
                assert_eq!(
                    r.passed,
                    r.component != c,
                    "{}: {}",
                    r.component,
                    r.max_relative_error
                );
            }
        }
    }

    #[test]
    fn several_seeds_and_dims() {
        for seed in 1..4 {
            let cfg = GradcheckConfig {
                dims: GradcheckDims {
                    n: 4 + seed as usize,
                    d: 3 + 2 * seed as usize,
                    k: 2 + seed as usize,
                    ..GradcheckDims::default()
                },
                seed,
                ..GradcheckConfig::default()
            };
            for r in run_gradcheck(&cfg, None).unwrap() {
                assert!(
                    r.passed,
                    "seed {seed}: {} {}",
                    r.component, r.max_relative_error
                );
            }
        }
    }

    #[test]
    fn rejects_large_dims_and_parses_names() {
        let cfg = GradcheckConfig {
            dims: GradcheckDims {
                n: 17,
                ..GradcheckDims::default()
            },
            ..GradcheckConfig::default()
        };
        assert!(run_gradcheck(&cfg, None).is_err());
        assert_eq!("graph".parse::<Component>().unwrap(), Component::Graph);
        assert!("nope".parse::<Component>().is_err());
    }
}
