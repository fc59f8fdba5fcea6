//! Class-name embeddings, the semantic graph built from them, and the
//! evaluation taxonomy.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{HuseError, Result};
use crate::numerics::{cosine_distance, norm, Matrix};
use crate::tsv;

/// One embedding per class name; row order defines the class index.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddings {
    names: Vec<String>,
    vectors: Matrix,
}

impl ClassEmbeddings {
    pub fn new(names: Vec<String>, vectors: Matrix) -> Result<Self> {
        if names.len() < 2 {
            return Err(HuseError::invalid(format!(
                "need at least 2 classes, got {}",
                names.len()
            )));
        }
        if names.len() != vectors.rows() {
            return Err(HuseError::invalid(format!(
                "{} class names but {} embedding rows",
                names.len(),
                vectors.rows()
            )));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if name.is_empty() || name.contains(['\t', '\n', '\r']) {
                return Err(HuseError::invalid(format!("invalid class name {name:?}")));
            }
            if !seen.insert(name.as_str()) {
                return Err(HuseError::invalid(format!("duplicate class name {name:?}")));
            }
        }
        for (i, name) in names.iter().enumerate() {
            if norm(vectors.row(i)) == 0.0 {
                return Err(HuseError::invalid(format!(
                    "class {name:?} has a zero-norm embedding"
                )));
            }
        }
        Ok(Self { names, vectors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut names = Vec::new();
        let mut rows = Vec::new();
        let mut seen = HashMap::new();
        for (line, text) in tsv::read_lines(path)? {
            let (name, values) = text
                .split_once('\t')
                .ok_or_else(|| HuseError::parse(path, line, "expected name<TAB>values"))?;
            if let Some(first) = seen.insert(name.to_string(), line) {
                return Err(HuseError::parse(
                    path,
                    line,
                    format!("duplicate class name {name:?} (first defined on line {first})"),
                ));
            }
            let v = tsv::parse_floats(values, path, line)?;
            if let Some(prev) = rows.first().map(Vec::len) {
                if v.len() != prev {
                    return Err(HuseError::parse(
                        path,
                        line,
                        format!("expected {prev} values, found {}", v.len()),
                    ));
                }
            }
            names.push(name.to_string());
            rows.push(v);
        }
        let vectors = Matrix::from_rows(&rows)?;
        Self::new(names, vectors).map_err(|e| HuseError::parse(path, 0, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, name) in self.names.iter().enumerate() {
            writeln!(out, "{name}\t{}", tsv::format_floats(self.vectors.row(i))).unwrap();
        }
        tsv::write_file(path, &out)
    }
}

/// Complete graph over classes weighted by class-name cosine distance.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticGraph {
    adjacency: Matrix,
}

impl SemanticGraph {
    /// `A[i][j] = d(ψ(v_i), ψ(v_j))` with an exact zero diagonal.
    pub fn build(ce: &ClassEmbeddings) -> Result<Self> {
        let k = ce.num_classes();
        let mut a = Matrix::zeros(k, k);
        for i in 0..k {
            for j in (i + 1)..k {
                let d = cosine_distance(ce.vectors.row(i), ce.vectors.row(j)).map_err(|_| {
                    HuseError::invalid(format!(
                        "zero-norm embedding for class {:?} or {:?}",
                        ce.names[i], ce.names[j]
                    ))
                })?;
                a[(i, j)] = d;
                a[(j, i)] = d;
            }
        }
        Ok(Self { adjacency: a })
    }

    /// Wraps an existing adjacency after checking symmetry, the zero diagonal,
    /// and the `[0, 2]` range.
    pub fn from_adjacency(a: Matrix) -> Result<Self> {
        let (r, c) = a.shape();
        if r != c || r < 2 {
            return Err(HuseError::invalid(format!(
                "adjacency must be KxK with K>=2, got {r}x{c}"
            )));
        }
        for i in 0..r {
            if a[(i, i)] != 0.0 {
                return Err(HuseError::invalid(format!(
                    "non-zero diagonal at class {i}"
                )));
            }
            for j in 0..r {
                let v = a[(i, j)];
                if !(0.0..=2.0).contains(&v) {
                    return Err(HuseError::invalid(format!(
                        "weight {v} at ({i}, {j}) outside [0, 2]"
                    )));
                }
                if v != a[(j, i)] {
                    return Err(HuseError::invalid(format!(
                        "asymmetric weights at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { adjacency: a })
    }

    pub fn adjacency(&self) -> &Matrix {
        &self.adjacency
    }

    pub fn num_classes(&self) -> usize {
        self.adjacency.rows()
    }

    #[inline]
    pub fn weight(&self, a: usize, b: usize) -> f64 {
        self.adjacency[(a, b)]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut rows = Vec::new();
        for (line, text) in tsv::read_lines(path)? {
            rows.push((line, tsv::parse_floats(&text, path, line)?));
        }
        let k = rows.len();
        if let Some((line, row)) = rows.iter().find(|(_, r)| r.len() != k) {
            return Err(HuseError::parse(
                path,
                *line,
                format!("expected {k} values, found {}", row.len()),
            ));
        }
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|(_, r)| r).collect();
        Self::from_adjacency(Matrix::from_rows(&rows)?)
            .map_err(|e| HuseError::parse(path, 0, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for row in self.adjacency.row_iter() {
            out.push_str(&tsv::format_floats(row));
            out.push('\n');
        }
        tsv::write_file(path, &out)
    }
}

/// Rooted tree whose leaves are exactly the classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Taxonomy {
    node_ids: Vec<String>,
    parent: Vec<Option<usize>>,
    root: usize,
    class_leaf: Vec<usize>,
    /// Leaf-to-leaf path lengths, K×K row-major.
    distances: Vec<usize>,
}

impl Taxonomy {
    /// Builds from `(node_id, parent_id)` pairs; `None` marks the root.
    pub fn from_edges(edges: &[(String, Option<String>)], class_names: &[String]) -> Result<Self> {
        let numbered: Vec<_> = edges
            .iter()
            .enumerate()
            .map(|(i, (n, p))| (i + 1, n.clone(), p.clone()))
            .collect();
        Self::validate(&numbered, class_names, Path::new("<taxonomy>"))
    }

    fn validate(
        edges: &[(usize, String, Option<String>)],
        class_names: &[String],
        path: &Path,
    ) -> Result<Self> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        for (i, (line, id, _)) in edges.iter().enumerate() {
            if index.insert(id.as_str(), i).is_some() {
                return Err(HuseError::parse(
                    path,
                    *line,
                    format!("duplicate node {id:?}"),
                ));
            }
        }
        let mut parent = Vec::with_capacity(edges.len());
        let mut root: Option<usize> = None;
        for (line, id, p) in edges {
            match p {
                None => {
                    if let Some(r) = root {
                        return Err(HuseError::parse(
                            path,
                            *line,
                            format!("second root {id:?} (root {:?} already defined)", edges[r].1),
                        ));
                    }
                    root = Some(parent.len());
                    parent.push(None);
                }
                Some(p) => {
                    let pi = *index.get(p.as_str()).ok_or_else(|| {
                        HuseError::parse(path, *line, format!("unknown parent {p:?}"))
                    })?;
                    parent.push(Some(pi));
                }
            }
        }
        let root = root.ok_or_else(|| HuseError::parse(path, 0, "taxonomy has no root"))?;

        let n = edges.len();
        let mut depth = vec![usize::MAX; n];
        for start in 0..n {
            let mut steps = 0;
            let mut cur = start;
            while let Some(p) = parent[cur] {
                cur = p;
                steps += 1;
                if steps > n {
                    return Err(HuseError::parse(
                        path,
                        edges[start].0,
                        format!("cycle through node {:?}", edges[start].1),
                    ));
                }
            }
            depth[start] = steps;
        }

        let mut has_child = vec![false; n];
        for p in parent.iter().flatten() {
            has_child[*p] = true;
        }
        let mut class_leaf = Vec::with_capacity(class_names.len());
        for name in class_names {
            let node = *index.get(name.as_str()).ok_or_else(|| {
                HuseError::parse(path, 0, format!("class {name:?} missing from taxonomy"))
            })?;
            if has_child[node] {
                return Err(HuseError::parse(
                    path,
                    edges[node].0,
                    format!("class {name:?} is an internal node"),
                ));
            }
            class_leaf.push(node);
        }
        let class_set: HashSet<&str> = class_names.iter().map(String::as_str).collect();
        for (i, (line, id, _)) in edges.iter().enumerate() {
            if !has_child[i] && !class_set.contains(id.as_str()) && n > 1 {
                return Err(HuseError::parse(
                    path,
                    *line,
                    format!("leaf {id:?} is not a class"),
                ));
            }
        }

        let k = class_leaf.len();
        let mut distances = vec![0; k * k];
        for a in 0..k {
            for b in 0..k {
                distances[a * k + b] = path_length(&parent, &depth, class_leaf[a], class_leaf[b]);
            }
        }

        Ok(Self {
            node_ids: edges.iter().map(|(_, id, _)| id.clone()).collect(),
            parent,
            root,
            class_leaf,
            distances,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_leaf.len()
    }

    pub fn root_id(&self) -> &str {
        &self.node_ids[self.root]
    }

    /// Number of edges on the path between two class leaves.
    pub fn tree_distance(&self, a: usize, b: usize) -> Result<usize> {
        let k = self.num_classes();
        if a >= k || b >= k {
            return Err(HuseError::invalid(format!(
                "class index out of range: ({a}, {b}) with {k} classes"
            )));
        }
        Ok(self.distances[a * k + b])
    }

    /// The `k` classes nearest to `c` in the tree, ties by class index.
    /// `c` itself is always first.
    pub fn class_set(&self, c: usize, k: usize) -> Result<Vec<usize>> {
        let n = self.num_classes();
        if c >= n {
            return Err(HuseError::invalid(format!("unknown class {c}")));
        }
        if k == 0 || k > n {
            return Err(HuseError::invalid(format!(
                "class set size {k} outside 1..={n}"
            )));
        }
        let row = &self.distances[c * n..(c + 1) * n];
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&j| (row[j], j));
        order.truncate(k);
        Ok(order)
    }

    /// Reads a `node_id<TAB>parent_id` edge list; the root uses parent `-`.
    pub fn load(path: &Path, class_names: &[String]) -> Result<Self> {
        let mut edges = Vec::new();
        for (line, text) in tsv::read_lines(path)? {
            let (id, parent) = text
                .split_once('\t')
                .ok_or_else(|| HuseError::parse(path, line, "expected node_id<TAB>parent_id"))?;
            let parent = match parent.trim() {
                "-" => None,
                p => Some(p.to_string()),
            };
            edges.push((line, id.to_string(), parent));
        }
        Self::validate(&edges, class_names, &PathBuf::from(path))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (id, p) in self.node_ids.iter().zip(&self.parent) {
            let p = p.map_or("-", |p| self.node_ids[p].as_str());
            writeln!(out, "{id}\t{p}").unwrap();
        }
        tsv::write_file(path, &out)
    }
}

fn path_length(parent: &[Option<usize>], depth: &[usize], mut a: usize, mut b: usize) -> usize {
    let mut steps = 0;
    while depth[a] > depth[b] {
        a = parent[a].unwrap();
        steps += 1;
    }
    while depth[b] > depth[a] {
        b = parent[b].unwrap();
        steps += 1;
    }
    while a != b {
        a = parent[a].unwrap();
        b = parent[b].unwrap();
        steps += 2;
    }
    steps
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    /// Balanced binary tree over 8 leaves c0..c7.
    pub(crate) fn binary_tree() -> Taxonomy {
        let mut edges = vec![("root".to_string(), None)];
        for i in 0..2 {
            edges.push((format!("h{i}"), Some("root".to_string())));
        }
        for i in 0..4 {
            edges.push((format!("q{i}"), Some(format!("h{}", i / 2))));
        }
        for i in 0..8 {
            edges.push((format!("c{i}"), Some(format!("q{}", i / 2))));
        }
        Taxonomy::from_edges(&edges, &names(8)).unwrap()
    }

    #[test]
    fn identical_and_orthogonal_classes() {
        let v = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![-2.0, 1.0]]).unwrap();
        let g = SemanticGraph::build(&ClassEmbeddings::new(names(3), v).unwrap()).unwrap();
        assert!(g.weight(0, 1).abs() < 1e-15);
        assert!((g.weight(0, 2) - 1.0).abs() < 1e-15);
        assert_eq!(g.weight(1, 1), 0.0);
    }

    #[test]
    fn graph_matches_pairwise_oracle() {
        let mut rng = RngState::new(4);
        let v = rng.standard_normal(4, 6);
        let g = SemanticGraph::build(&ClassEmbeddings::new(names(4), v.clone()).unwrap()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let (a, b) = (v.row(i), v.row(j));
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                let expected = if i == j { 0.0 } else { 1.0 - dot / (na * nb) };
                assert!((g.weight(i, j) - expected).abs() < 1e-12);
            }
        }
        assert!(SemanticGraph::from_adjacency(g.adjacency().clone()).is_ok());
    }

    #[test]
    fn zero_class_vector_is_rejected_by_name() {
        let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let err = ClassEmbeddings::new(names(2), v).unwrap_err().to_string();
        assert!(err.contains("c1"), "{err}");
    }

    #[test]
    fn tree_distances_on_binary_tree() {
        let t = binary_tree();
        assert_eq!(t.tree_distance(3, 3).unwrap(), 0);
        assert_eq!(t.tree_distance(0, 1).unwrap(), 2);
        assert_eq!(t.tree_distance(0, 2).unwrap(), 4);
        assert_eq!(t.tree_distance(1, 6).unwrap(), 6);
        assert!(t.tree_distance(0, 8).is_err());
    }

    #[test]
    fn tree_distance_is_a_metric() {
        let t = binary_tree();
        let k = t.num_classes();
        for a in 0..k {
            for b in 0..k {
                let dab = t.tree_distance(a, b).unwrap();
                assert_eq!(dab, t.tree_distance(b, a).unwrap());
                assert_eq!(dab == 0, a == b);
                for c in 0..k {
                    assert!(t.tree_distance(a, c).unwrap() <= dab + t.tree_distance(b, c).unwrap());
                }
            }
        }
    }

    #[test]
    fn class_sets() {
        let t = binary_tree();
        assert_eq!(t.class_set(5, 1).unwrap(), vec![5]);
        assert_eq!(t.class_set(5, 2).unwrap(), vec![5, 4]);
        assert_eq!(t.class_set(5, 4).unwrap(), vec![5, 4, 6, 7]);
        let mut all = t.class_set(5, 8).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
        assert!(t.class_set(5, 0).is_err());
        assert!(t.class_set(5, 9).is_err());
        for c in 0..8 {
            for k in 1..8 {
                let small = t.class_set(c, k).unwrap();
                let big = t.class_set(c, k + 1).unwrap();
                assert_eq!(&big[..k], &small[..]);
            }
        }
    }

    #[test]
    fn taxonomy_round_trip_and_two_roots() {
        let dir = tempfile::tempdir().unwrap();
        let t = binary_tree();
        let p = dir.path().join("tax.tsv");
        t.save(&p).unwrap();
        assert_eq!(Taxonomy::load(&p, &names(8)).unwrap(), t);

        let bad = dir.path().join("bad.tsv");
        std::fs::write(&bad, "r1\t-\nr2\t-\nc0\tr1\nc1\tr2\n").unwrap();
        let err = Taxonomy::load(&bad, &names(2)).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("second root"), "{err}");
    }

    #[test]
    fn taxonomy_rejects_cycles_and_missing_classes() {
        let e = |a: &str, b: Option<&str>| (a.to_string(), b.map(str::to_string));
        let cyclic = vec![
            e("r", None),
            e("a", Some("b")),
            e("b", Some("a")),
            e("c0", Some("r")),
            e("c1", Some("a")),
        ];
        assert!(Taxonomy::from_edges(&cyclic, &names(2)).is_err());
        let missing = vec![e("r", None), e("c0", Some("r"))];
        assert!(Taxonomy::from_edges(&missing, &names(2)).is_err());
    }

    #[test]
    fn embeddings_and_graph_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RngState::new(17);
        let ce = ClassEmbeddings::new(names(5), rng.standard_normal(5, 3)).unwrap();
        let p = dir.path().join("ce.tsv");
        ce.save(&p).unwrap();
        assert_eq!(ClassEmbeddings::load(&p).unwrap(), ce);

        let g = SemanticGraph::build(&ce).unwrap();
        let gp = dir.path().join("g.tsv");
        g.save(&gp).unwrap();
        let back = SemanticGraph::load(&gp).unwrap();
        let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.adjacency()), bits(g.adjacency()));
    }

    #[test]
    fn duplicate_class_name_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ce.tsv");
        std::fs::write(&p, "apple\t1,0\npear\t0,1\napple\t1,1\n").unwrap();
        let err = ClassEmbeddings::load(&p).unwrap_err().to_string();
        assert!(err.contains("apple") && err.contains(":3:"), "{err}");
    }

    #[test]
    fn malformed_float_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ce.tsv");
        std::fs::write(&p, "a\t1,0\nb\t0,x\n").unwrap();
        let err = ClassEmbeddings::load(&p).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }
}
