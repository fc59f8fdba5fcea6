//! Training objectives and their analytic gradients.
//!
//! * classification: softmax cross entropy through the shared layer
//! * graph: squared mismatch between embedding distances and semantic-graph
//!   weights, gated by the margin `ζ`
//! * gap: mean cosine distance between paired image/text embeddings
//! * projection: distance of each embedding to its class-name vector (the
//!   projection ablation, used in place of the graph term)

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HuseError, Result};
use crate::model::{ClassifierGrads, SharedClassifier};
use crate::numerics::{
    accumulate_cosine_distance_grad, cosine_distance_unchecked, norm, softmax_rows, Matrix,
};
use crate::semgraph::{ClassEmbeddings, SemanticGraph};
use crate::Exec;

/// Tolerance on row norms accepted by the distance-based losses.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// classification + graph + gap
    #[default]
    Huse,
    /// classification + projection + gap
    HuseP,
}

/// Which pairs the graph loss penalizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaRule {
    /// `A_ij < ζ` and `d < ζ`
    #[default]
    Conjunction,
    /// `A_ij < ζ` or `d < ζ`
    Disjunction,
}

impl SigmaRule {
    #[inline]
    fn gate(self, weight: f64, dist: f64, zeta: f64) -> bool {
        match self {
            SigmaRule::Conjunction => weight < zeta && dist < zeta,
            SigmaRule::Disjunction => weight < zeta || dist < zeta,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub zeta_margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            zeta_margin: 0.8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(HuseError::invalid(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0 {
            return Err(HuseError::invalid(
                "at least one of alpha, beta, gamma must be positive",
            ));
        }
        if !(self.zeta_margin > 0.0 && self.zeta_margin <= 2.0) {
            return Err(HuseError::invalid(format!(
                "zeta margin must lie in (0, 2], got {}",
                self.zeta_margin
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub classification: f64,
    pub graph: f64,
    pub gap: f64,
    pub projection: f64,
}

impl LossBreakdown {
    /// Weighted sum of the parts. In projection mode the projection term
    /// takes the graph term's place and weight.
    pub fn combine(
        mode: LossMode,
        w: &LossWeights,
        classification: f64,
        graph: f64,
        gap: f64,
        projection: f64,
    ) -> Self {
        let regularizer = match mode {
            LossMode::Huse => graph,
            LossMode::HuseP => projection,
        };
        Self {
            total: w.alpha * classification + w.beta * regularizer + w.gamma * gap,
            classification,
            graph,
            gap,
            projection,
        }
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize, op: &str) -> Result<()> {
    if labels.len() != rows {
        return Err(HuseError::invalid(format!(
            "{op}: {} labels for {rows} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(HuseError::invalid(format!(
            "{op}: label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

fn unit_row_norms(m: &Matrix, op: &str) -> Result<Vec<f64>> {
    let norms: Vec<f64> = m.row_iter().map(norm).collect();
    if let Some(i) = norms
        .iter()
        .position(|n| (n - 1.0).abs() > UNIT_NORM_TOLERANCE)
    {
        return Err(HuseError::invalid(format!(
            "{op}: row {i} has norm {} (expected unit rows)",
            norms[i]
        )));
    }
    Ok(norms)
}

/// Mean softmax cross entropy; the gradient is `(softmax - onehot) / N`.
pub fn classification_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    check_labels(labels, logits.rows(), logits.cols(), "classification_loss")?;
    let n = logits.rows();
    if n == 0 {
        return Err(HuseError::invalid("classification_loss: empty batch"));
    }
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        // log-sum-exp form keeps saturated rows exact
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        grad[(i, y)] -= 1.0;
    }
    grad.scale(1.0 / n as f64);
    Ok((loss / n as f64, grad))
}

/// Margin-gated graph regularizer over all ordered pairs `(m, n)`,
/// self-pairs included:
///
/// `(1/N²) Σ_m Σ_n σ_mn (d(e_m, e_n) - A[y_m][y_n])²`
///
/// The gate `σ` is treated as constant when differentiating.
pub fn graph_loss(
    embeddings: &Matrix,
    labels: &[usize],
    graph: &SemanticGraph,
    zeta: f64,
    rule: SigmaRule,
    exec: Exec,
) -> Result<(f64, Matrix)> {
    check_labels(labels, embeddings.rows(), graph.num_classes(), "graph_loss")?;
    let norms = unit_row_norms(embeddings, "graph_loss")?;
    let n = embeddings.rows();
    if n == 0 {
        return Ok((0.0, Matrix::zeros(0, embeddings.cols())));
    }
    let inv_n2 = 1.0 / (n * n) as f64;
    let dim = embeddings.cols();

    let row_term = |m: usize| -> (f64, Vec<f64>) {
        let em = embeddings.row(m);
        let ym = labels[m];
        let mut loss = 0.0;
        let mut grad = vec![0.0; dim];
        for k in 0..n {
            let ek = embeddings.row(k);
            let a = graph.weight(ym, labels[k]);
            let d = cosine_distance_unchecked(em, ek, norms[m], norms[k]);
            if !rule.gate(a, d, zeta) {
                continue;
            }
            let r = d - a;
            loss += r * r;
            // (m, k) and (k, m) both depend on e_m with equal partials
            accumulate_cosine_distance_grad(
                em,
                ek,
                norms[m],
                norms[k],
                4.0 * r * inv_n2,
                &mut grad,
            );
        }
        (loss, grad)
    };

    let rows: Vec<(f64, Vec<f64>)> = match exec {
        Exec::Sequential => (0..n).map(row_term).collect(),
        Exec::Parallel => (0..n).into_par_iter().map(row_term).collect(),
    };

    let mut total = 0.0;
    let mut grad = Matrix::zeros(n, dim);
    for (m, (l, g)) in rows.into_iter().enumerate() {
        total += l;
        grad.row_mut(m).copy_from_slice(&g);
    }
    Ok((total * inv_n2, grad))
}

/// `(1/N) Σ_n d(img_n, txt_n)` with gradients for both sides.
pub fn gap_loss(img: &Matrix, txt: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    if img.shape() != txt.shape() {
        return Err(HuseError::Shape {
            op: "gap_loss",
            left: img.shape(),
            right: txt.shape(),
        });
    }
    let ni = unit_row_norms(img, "gap_loss")?;
    let nt = unit_row_norms(txt, "gap_loss")?;
    let n = img.rows();
    if n == 0 {
        return Err(HuseError::invalid("gap_loss: empty batch"));
    }
    let scale = 1.0 / n as f64;
    let mut gi = Matrix::zeros(n, img.cols());
    let mut gt = Matrix::zeros(n, img.cols());
    let mut loss = 0.0;
    for r in 0..n {
        let (a, b) = (img.row(r), txt.row(r));
        loss += cosine_distance_unchecked(a, b, ni[r], nt[r]);
        accumulate_cosine_distance_grad(a, b, ni[r], nt[r], scale, gi.row_mut(r));
        accumulate_cosine_distance_grad(b, a, nt[r], ni[r], scale, gt.row_mut(r));
    }
    Ok((loss * scale, gi, gt))
}

/// `(1/N) Σ_n [d(img_n, ψ_{y_n}) + d(txt_n, ψ_{y_n})]`.
pub fn projection_loss(
    img: &Matrix,
    txt: &Matrix,
    labels: &[usize],
    classes: &ClassEmbeddings,
) -> Result<(f64, Matrix, Matrix)> {
    if img.shape() != txt.shape() {
        return Err(HuseError::Shape {
            op: "projection_loss",
            left: img.shape(),
            right: txt.shape(),
        });
    }
    if classes.dim() != img.cols() {
        return Err(HuseError::invalid(format!(
            "projection loss needs class embedding width {} to equal embedding dim {}",
            classes.dim(),
            img.cols()
        )));
    }
    check_labels(labels, img.rows(), classes.num_classes(), "projection_loss")?;
    let ni = unit_row_norms(img, "projection_loss")?;
    let nt = unit_row_norms(txt, "projection_loss")?;
    let n = img.rows();
    if n == 0 {
        return Err(HuseError::invalid("projection_loss: empty batch"));
    }
    let class_norms: Vec<f64> = classes.vectors().row_iter().map(norm).collect();
    let scale = 1.0 / n as f64;
    let mut gi = Matrix::zeros(n, img.cols());
    let mut gt = Matrix::zeros(n, img.cols());
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let psi = classes.vectors().row(y);
        let np = class_norms[y];
        loss += cosine_distance_unchecked(img.row(r), psi, ni[r], np);
        loss += cosine_distance_unchecked(txt.row(r), psi, nt[r], np);
        accumulate_cosine_distance_grad(img.row(r), psi, ni[r], np, scale, gi.row_mut(r));
        accumulate_cosine_distance_grad(txt.row(r), psi, nt[r], np, scale, gt.row_mut(r));
    }
    Ok((loss * scale, gi, gt))
}

/// Everything the combined objective needs besides the batch.
#[derive(Clone, Copy, Debug)]
pub struct Objective<'a> {
    pub mode: LossMode,
    pub weights: LossWeights,
    pub sigma_rule: SigmaRule,
    pub graph: &'a SemanticGraph,
    /// Required in projection mode.
    pub class_embeddings: Option<&'a ClassEmbeddings>,
}

/// Gradients of the combined loss.
#[derive(Clone, Debug)]
pub struct LossGrads {
    pub image: Matrix,
    pub text: Matrix,
    pub classifier: ClassifierGrads,
}

/// The weighted objective for one aligned batch.
///
/// Classification runs over the pooled `2N` embeddings (image rows then
/// text rows, both with the batch labels), so each modality contributes an
/// equal share. The graph term also runs over the pooled rows; the gap term
/// pairs row `n` of each modality.
pub fn total_loss(
    obj: &Objective<'_>,
    classifier: &SharedClassifier,
    img: &Matrix,
    txt: &Matrix,
    labels: &[usize],
    exec: Exec,
) -> Result<(LossBreakdown, LossGrads)> {
    obj.weights.validate()?;
    if img.shape() != txt.shape() {
        return Err(HuseError::Shape {
            op: "total_loss",
            left: img.shape(),
            right: txt.shape(),
        });
    }
    let n = img.rows();
    let w = obj.weights;
    let pooled = img.vstack(txt)?;
    let pooled_labels: Vec<usize> = labels.iter().chain(labels).copied().collect();

    let logits = classifier.logits(&pooled)?;
    let (cls, g_logits) = classification_loss(&logits, &pooled_labels)?;
    let (mut cls_grads, g_cls) = classifier.backward(&pooled, &g_logits)?;
    cls_grads.weight.scale(w.alpha);
    cls_grads.bias.iter_mut().for_each(|b| *b *= w.alpha);

    let mut g_pooled = g_cls;
    g_pooled.scale(w.alpha);

    let (mut graph, mut projection) = (0.0, 0.0);
    let mut extra_img = None;
    match obj.mode {
        LossMode::Huse => {
            let (l, g) = graph_loss(
                &pooled,
                &pooled_labels,
                obj.graph,
                w.zeta_margin,
                obj.sigma_rule,
                exec,
            )?;
            graph = l;
            g_pooled.add_scaled(&g, w.beta)?;
        }
        LossMode::HuseP => {
            let ce = obj
                .class_embeddings
                .ok_or_else(|| HuseError::invalid("projection mode requires class embeddings"))?;
            let (l, gi, gt) = projection_loss(img, txt, labels, ce)?;
            projection = l;
            extra_img = Some((gi, gt));
        }
    }

    let (gap, gap_i, gap_t) = gap_loss(img, txt)?;
    let (mut gi, mut gt) = g_pooled.split_rows(n);
    gi.add_scaled(&gap_i, w.gamma)?;
    gt.add_scaled(&gap_t, w.gamma)?;
    if let Some((pi, pt)) = extra_img {
        gi.add_scaled(&pi, w.beta)?;
        gt.add_scaled(&pt, w.beta)?;
    }

    Ok((
        LossBreakdown::combine(obj.mode, &w, cls, graph, gap, projection),
        LossGrads {
            image: gi,
            text: gt,
            classifier: cls_grads,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, l2_normalize_rows, relative_error, RngState};
    use proptest::prelude::*;

    fn unit_rows(rng: &mut RngState, rows: usize, cols: usize) -> Matrix {
        l2_normalize_rows(&rng.standard_normal(rows, cols), 1e-12)
            .unwrap()
            .0
    }

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    fn random_graph(rng: &mut RngState, k: usize, dim: usize) -> (ClassEmbeddings, SemanticGraph) {
        let ce = ClassEmbeddings::new(names(k), rng.standard_normal(k, dim)).unwrap();
        let g = SemanticGraph::build(&ce).unwrap();
        (ce, g)
    }

    /// Loss evaluated at a perturbed point may leave the unit sphere slightly;
    /// re-running through the public functions keeps the same code path.
    fn graph_value(
        e: &Matrix,
        labels: &[usize],
        g: &SemanticGraph,
        zeta: f64,
        rule: SigmaRule,
    ) -> f64 {
        graph_loss(e, labels, g, zeta, rule, Exec::Sequential)
            .unwrap()
            .0
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        for k in [2, 5, 101] {
            let (l, _) = classification_loss(&Matrix::zeros(3, k), &[0, 1, 1]).unwrap();
            assert!((l - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_correct_logits() {
        let z = Matrix::from_rows(&[vec![1000.0, 0.0, 0.0], vec![0.0, 0.0, 1000.0]]).unwrap();
        let (l, _) = classification_loss(&z, &[0, 2]).unwrap();
        assert!(l < 1e-6);
    }

    #[test]
    fn classification_gradient_matches_oracle() {
        let mut rng = RngState::new(3);
        let z = rng.standard_normal(4, 3);
        let labels = [0, 2, 1, 2];
        let (_, g) = classification_loss(&z, &labels).unwrap();
        let numeric = finite_diff_grad(|m| classification_loss(m, &labels).unwrap().0, &z, 1e-5);
        assert!(relative_error(g.as_slice(), numeric.as_slice()) < 1e-6);
        assert!(classification_loss(&z, &[0, 3, 1, 2]).is_err());
    }

    #[test]
    fn graph_loss_zero_at_exact_fit() {
        // two classes at distance 1 in the graph, embeddings placed on
        // orthogonal axes so every pairwise distance equals its A entry
        let ce = ClassEmbeddings::new(
            names(2),
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        )
        .unwrap();
        let g = SemanticGraph::build(&ce).unwrap();
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let (l, _) = graph_loss(
            &e,
            &[0, 1, 0],
            &g,
            2.0,
            SigmaRule::Conjunction,
            Exec::Sequential,
        )
        .unwrap();
        assert!(l.abs() < 1e-15);
    }

    #[test]
    fn graph_loss_single_example() {
        let mut rng = RngState::new(1);
        let (_, g) = random_graph(&mut rng, 3, 4);
        let e = unit_rows(&mut rng, 1, 4);
        let (l, _) =
            graph_loss(&e, &[2], &g, 0.8, SigmaRule::Conjunction, Exec::Sequential).unwrap();
        assert!(l.abs() < 1e-15);
    }

    #[test]
    fn graph_loss_hand_case() {
        // same class, orthogonal embeddings: d = 1, A = 0, two off-diagonal
        // ordered pairs, N² = 4 → 0.5
        let ce = ClassEmbeddings::new(
            names(2),
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        )
        .unwrap();
        let g = SemanticGraph::build(&ce).unwrap();
        let e = Matrix::from_rows(&[vec![0.6, 0.8], vec![-0.8, 0.6]]).unwrap();
        let labels = [0, 0];
        let (l, grad) = graph_loss(
            &e,
            &labels,
            &g,
            2.0,
            SigmaRule::Conjunction,
            Exec::Sequential,
        )
        .unwrap();
        assert!((l - 0.5).abs() < 1e-15);
        let numeric = finite_diff_grad(
            |m| graph_value(m, &labels, &g, 2.0, SigmaRule::Conjunction),
            &e,
            1e-5,
        );
        assert!(relative_error(grad.as_slice(), numeric.as_slice()) < 1e-5);
    }

    #[test]
    fn graph_gate_rules() {
        let ce = ClassEmbeddings::new(
            names(2),
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        )
        .unwrap();
        let g = SemanticGraph::build(&ce).unwrap();
        // same class (A = 0) but d = 1 ≥ ζ = 0.8: conjunction skips, disjunction counts
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let conj = graph_value(&e, &[0, 0], &g, 0.8, SigmaRule::Conjunction);
        let disj = graph_value(&e, &[0, 0], &g, 0.8, SigmaRule::Disjunction);
        assert_eq!(conj, 0.0);
        assert!((disj - 0.5).abs() < 1e-15);
    }

    #[test]
    fn graph_loss_rejects_bad_input() {
        let mut rng = RngState::new(2);
        let (_, g) = random_graph(&mut rng, 3, 4);
        let e = unit_rows(&mut rng, 2, 4);
        assert!(graph_loss(
            &e,
            &[0, 3],
            &g,
            0.8,
            SigmaRule::Conjunction,
            Exec::Sequential
        )
        .is_err());
        let mut scaled = e.clone();
        scaled.scale(1.5);
        assert!(graph_loss(
            &scaled,
            &[0, 1],
            &g,
            0.8,
            SigmaRule::Conjunction,
            Exec::Sequential
        )
        .is_err());
    }

    #[test]
    fn graph_parallel_matches_sequential_bitwise() {
        let mut rng = RngState::new(7);
        let (_, g) = random_graph(&mut rng, 4, 6);
        let e = unit_rows(&mut rng, 30, 6);
        let labels: Vec<usize> = (0..30).map(|i| i % 4).collect();
        let (a, ga) = graph_loss(
            &e,
            &labels,
            &g,
            1.2,
            SigmaRule::Conjunction,
            Exec::Sequential,
        )
        .unwrap();
        let (b, gb) =
            graph_loss(&e, &labels, &g, 1.2, SigmaRule::Conjunction, Exec::Parallel).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(ga, gb);
    }

    #[test]
    fn gap_loss_fixed_points_and_gradient() {
        let mut rng = RngState::new(4);
        let e = unit_rows(&mut rng, 5, 3);
        assert!(gap_loss(&e, &e).unwrap().0.abs() < 1e-15);
        let mut neg = e.clone();
        neg.scale(-1.0);
        assert!((gap_loss(&e, &neg).unwrap().0 - 2.0).abs() < 1e-15);

        let t = unit_rows(&mut rng, 5, 3);
        let (_, gi, gt) = gap_loss(&e, &t).unwrap();
        let ni = finite_diff_grad(|m| gap_loss(m, &t).unwrap().0, &e, 1e-5);
        let nt = finite_diff_grad(|m| gap_loss(&e, m).unwrap().0, &t, 1e-5);
        assert!(relative_error(gi.as_slice(), ni.as_slice()) < 1e-5);
        assert!(relative_error(gt.as_slice(), nt.as_slice()) < 1e-5);
        assert!(gap_loss(&e, &unit_rows(&mut rng, 4, 3)).is_err());
    }

    #[test]
    fn projection_loss_cases() {
        let mut rng = RngState::new(5);
        let (ce, _) = random_graph(&mut rng, 3, 4);
        let labels = [2, 0, 1, 0];
        let onto = l2_normalize_rows(&ce.vectors().select_rows(&labels), 1e-12)
            .unwrap()
            .0;
        assert!(projection_loss(&onto, &onto, &labels, &ce).unwrap().0.abs() < 1e-12);
        let mut anti = onto.clone();
        anti.scale(-1.0);
        assert!((projection_loss(&onto, &anti, &labels, &ce).unwrap().0 - 2.0).abs() < 1e-12);

        let img = unit_rows(&mut rng, 4, 4);
        let txt = unit_rows(&mut rng, 4, 4);
        let (_, gi, gt) = projection_loss(&img, &txt, &labels, &ce).unwrap();
        let ni = finite_diff_grad(
            |m| projection_loss(m, &txt, &labels, &ce).unwrap().0,
            &img,
            1e-5,
        );
        let nt = finite_diff_grad(
            |m| projection_loss(&img, m, &labels, &ce).unwrap().0,
            &txt,
            1e-5,
        );
        assert!(relative_error(gi.as_slice(), ni.as_slice()) < 1e-5);
        assert!(relative_error(gt.as_slice(), nt.as_slice()) < 1e-5);

        let wrong = unit_rows(&mut rng, 4, 5);
        let err = projection_loss(&wrong, &wrong, &labels, &ce)
            .unwrap_err()
            .to_string();
        assert!(err.contains('4') && err.contains('5'), "{err}");
    }

    #[test]
    fn combination_arithmetic() {
        let w = LossWeights::default();
        let b = LossBreakdown::combine(LossMode::Huse, &w, 0.3, 0.2, 0.1, 0.0);
        assert!((b.total - 0.6).abs() < 1e-15);
        let only_cls = LossWeights {
            beta: 0.0,
            gamma: 0.0,
            ..w
        };
        let b = LossBreakdown::combine(LossMode::Huse, &only_cls, 0.3, 0.2, 0.1, 0.0);
        assert_eq!(b.total, 0.3);
        let p = LossBreakdown::combine(LossMode::HuseP, &w, 0.3, 0.0, 0.1, 0.4);
        assert!((p.total - 0.8).abs() < 1e-15);
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            ..w
        };
        assert!(zero.validate().is_err());
    }

    fn total_fixture(
        seed: u64,
    ) -> (
        ClassEmbeddings,
        SemanticGraph,
        SharedClassifier,
        Matrix,
        Matrix,
        Vec<usize>,
    ) {
        let mut rng = RngState::new(seed);
        let (ce, g) = random_graph(&mut rng, 3, 4);
        let cls = SharedClassifier::new(rng.standard_normal(4, 3), vec![0.1, 0.0, -0.1]).unwrap();
        let img = unit_rows(&mut rng, 4, 4);
        let txt = unit_rows(&mut rng, 4, 4);
        (ce, g, cls, img, txt, vec![0, 1, 2, 1])
    }

    #[test]
    fn combined_gradient_matches_weighted_oracle() {
        let (ce, g, cls, img, txt, labels) = total_fixture(10);
        for mode in [LossMode::Huse, LossMode::HuseP] {
            let obj = Objective {
                mode,
                weights: LossWeights {
                    alpha: 0.7,
                    beta: 1.3,
                    gamma: 0.4,
                    zeta_margin: 2.0,
                },
                sigma_rule: SigmaRule::Conjunction,
                graph: &g,
                class_embeddings: Some(&ce),
            };
            let (b, grads) = total_loss(&obj, &cls, &img, &txt, &labels, Exec::Sequential).unwrap();
            let expected = LossBreakdown::combine(
                mode,
                &obj.weights,
                b.classification,
                b.graph,
                b.gap,
                b.projection,
            );
            assert_eq!(b.total, expected.total);
            let f = |i: &Matrix, t: &Matrix, c: &SharedClassifier| {
                total_loss(&obj, c, i, t, &labels, Exec::Sequential)
                    .unwrap()
                    .0
                    .total
            };
            let ni = finite_diff_grad(|m| f(m, &txt, &cls), &img, 1e-5);
            let nt = finite_diff_grad(|m| f(&img, m, &cls), &txt, 1e-5);
            let nw = finite_diff_grad(
                |m| {
                    f(
                        &img,
                        &txt,
                        &SharedClassifier::new(m.clone(), cls.bias.clone()).unwrap(),
                    )
                },
                &cls.weight,
                1e-5,
            );
            assert!(relative_error(grads.image.as_slice(), ni.as_slice()) < 1e-4);
            assert!(relative_error(grads.text.as_slice(), nt.as_slice()) < 1e-4);
            assert!(relative_error(grads.classifier.weight.as_slice(), nw.as_slice()) < 1e-4);
        }
    }

    #[test]
    fn scaling_weights_scales_total_and_gradients() {
        let (ce, g, cls, img, txt, labels) = total_fixture(11);
        let base = LossWeights {
            alpha: 0.5,
            beta: 0.25,
            gamma: 1.0,
            zeta_margin: 0.8,
        };
        let run = |w: LossWeights| {
            let obj = Objective {
                mode: LossMode::Huse,
                weights: w,
                sigma_rule: SigmaRule::Conjunction,
                graph: &g,
                class_embeddings: Some(&ce),
            };
            total_loss(&obj, &cls, &img, &txt, &labels, Exec::Sequential).unwrap()
        };
        let (b1, g1) = run(base);
        let (b3, g3) = run(LossWeights {
            alpha: 1.5,
            beta: 0.75,
            gamma: 3.0,
            ..base
        });
        assert!((b3.total - 3.0 * b1.total).abs() < 1e-12);
        for (a, b) in g1.image.as_slice().iter().zip(g3.image.as_slice()) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
        for (a, b) in g1
            .classifier
            .weight
            .as_slice()
            .iter()
            .zip(g3.classifier.weight.as_slice())
        {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn losses_are_non_negative(seed in 0u64..500) {
            let (ce, g, cls, img, txt, labels) = total_fixture(seed);
            let obj = Objective { mode: LossMode::Huse, weights: LossWeights::default(), sigma_rule: SigmaRule::Conjunction, graph: &g, class_embeddings: Some(&ce) };
            let (b, _) = total_loss(&obj, &cls, &img, &txt, &labels, Exec::Sequential).unwrap();
            prop_assert!(b.classification >= 0.0 && b.graph >= 0.0 && b.gap >= 0.0 && b.total >= 0.0);
        }

        #[test]
        fn graph_loss_is_permutation_invariant(seed in 0u64..500) {
            let mut rng = RngState::new(seed);
            let (_, g) = random_graph(&mut rng, 3, 5);
            let e = unit_rows(&mut rng, 7, 5);
            let labels: Vec<usize> = (0..7).map(|i| (i * 7 + seed as usize) % 3).collect();
            let perm = rng.shuffle_indices(7);
            let pe = e.select_rows(&perm);
            let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let a = graph_value(&e, &labels, &g, 1.0, SigmaRule::Conjunction);
            let b = graph_value(&pe, &pl, &g, 1.0, SigmaRule::Conjunction);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn graph_gradient_matches_oracle(seed in 0u64..200) {
            let mut rng = RngState::new(seed);
            let (_, g) = random_graph(&mut rng, 3, 5);
            let e = unit_rows(&mut rng, 6, 5);
            let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
            // keep every pair clear of the gate threshold
            let zeta = 2.0;
            let (_, grad) = graph_loss(&e, &labels, &g, zeta, SigmaRule::Conjunction, Exec::Sequential).unwrap();
            let numeric = finite_diff_grad(|m| graph_value(m, &labels, &g, zeta, SigmaRule::Conjunction), &e, 1e-5);
            prop_assert!(relative_error(grad.as_slice(), numeric.as_slice()) < 1e-4);
        }
    }
}
