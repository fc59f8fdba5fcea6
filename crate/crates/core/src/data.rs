//! Aligned image/text/label triples: file ingestion, the synthetic
//! hierarchical generator, and batching.

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HuseError, Result};
use crate::model::Modality;
use crate::numerics::{Matrix, RngState};
use crate::semgraph::{ClassEmbeddings, Taxonomy};
use crate::tsv;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = HuseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(HuseError::invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// One row of a feature file.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub instance_id: String,
    pub label: usize,
    pub split: Split,
    pub values: Vec<f64>,
}

/// Reads `instance_id<TAB>label<TAB>split<TAB>v1,v2,...` rows.
pub fn read_feature_file(path: &Path) -> Result<Vec<FeatureRow>> {
    let mut rows: Vec<FeatureRow> = Vec::new();
    for (line, text) in tsv::read_lines(path)? {
        let fields: Vec<&str> = text.split('\t').collect();
        if fields.len() != 4 {
            return Err(HuseError::parse(
                path,
                line,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let label = fields[1]
            .parse()
            .map_err(|_| HuseError::parse(path, line, format!("bad label {:?}", fields[1])))?;
        let split = fields[2]
            .parse()
            .map_err(|e: HuseError| HuseError::parse(path, line, e.to_string()))?;
        let values = tsv::parse_floats(fields[3], path, line)?;
        if let Some(first) = rows.first() {
            if first.values.len() != values.len() {
                return Err(HuseError::parse(
                    path,
                    line,
                    format!(
                        "expected {} values, found {}",
                        first.values.len(),
                        values.len()
                    ),
                ));
            }
        }
        rows.push(FeatureRow {
            instance_id: fields[0].to_string(),
            label,
            split,
            values,
        });
    }
    Ok(rows)
}

pub fn write_feature_file(path: &Path, rows: &[FeatureRow]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.instance_id,
            r.label,
            r.split,
            tsv::format_floats(&r.values)
        )
        .unwrap();
    }
    tsv::write_file(path, &out)
}

/// Aligned `(image features, text features, label)` records.
#[derive(Clone, Debug, PartialEq)]
pub struct TripleDataset {
    image: Matrix,
    text: Matrix,
    labels: Vec<usize>,
    splits: Vec<Split>,
    ids: Vec<String>,
    num_classes: usize,
}

impl TripleDataset {
    pub fn new(
        image: Matrix,
        text: Matrix,
        labels: Vec<usize>,
        splits: Vec<Split>,
        ids: Vec<String>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = image.rows();
        if text.rows() != n || labels.len() != n || splits.len() != n || ids.len() != n {
            return Err(HuseError::invalid(format!(
                "row counts differ: image {n}, text {}, labels {}, splits {}, ids {}",
                text.rows(),
                labels.len(),
                splits.len(),
                ids.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(HuseError::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            image,
            text,
            labels,
            splits,
            ids,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image(&self) -> &Matrix {
        &self.image
    }

    pub fn text(&self) -> &Matrix {
        &self.text
    }

    pub fn features(&self, modality: Modality) -> &Matrix {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Row indices belonging to `split`, in file order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    /// Feature rows of one modality, suitable for [`write_feature_file`].
    pub fn feature_rows(&self, modality: Modality) -> Vec<FeatureRow> {
        let m = self.features(modality);
        (0..self.len())
            .map(|i| FeatureRow {
                instance_id: self.ids[i].clone(),
                label: self.labels[i],
                split: self.splits[i],
                values: m.row(i).to_vec(),
            })
            .collect()
    }

    /// Joins two feature files on `instance_id`; image-file order wins.
    pub fn from_feature_files(
        image_path: &Path,
        text_path: &Path,
        num_classes: usize,
    ) -> Result<Self> {
        let img = read_feature_file(image_path)?;
        let txt = read_feature_file(text_path)?;
        if img.len() != txt.len() {
            return Err(HuseError::invalid(format!(
                "row count mismatch: {} image rows vs {} text rows",
                img.len(),
                txt.len()
            )));
        }
        if img.is_empty() {
            return Err(HuseError::invalid(format!(
                "{} has no rows",
                image_path.display()
            )));
        }
        let mut by_id: HashMap<&str, usize> = HashMap::with_capacity(txt.len());
        for (i, r) in txt.iter().enumerate() {
            if by_id.insert(&r.instance_id, i).is_some() {
                return Err(HuseError::invalid(format!(
                    "duplicate instance {:?} in {}",
                    r.instance_id,
                    text_path.display()
                )));
            }
        }
        let mut order = Vec::with_capacity(img.len());
        let mut seen = HashMap::with_capacity(img.len());
        for r in &img {
            if seen.insert(r.instance_id.as_str(), ()).is_some() {
                return Err(HuseError::invalid(format!(
                    "duplicate instance {:?} in {}",
                    r.instance_id,
                    image_path.display()
                )));
            }
            let j = *by_id.get(r.instance_id.as_str()).ok_or_else(|| {
                HuseError::invalid(format!("instance {:?} has no text row", r.instance_id))
            })?;
            let t = &txt[j];
            if t.label != r.label || t.split != r.split {
                return Err(HuseError::invalid(format!(
                    "instance {:?}: image and text disagree on label/split",
                    r.instance_id
                )));
            }
            order.push(j);
        }
        let image = Matrix::from_rows(&img.iter().map(|r| r.values.clone()).collect::<Vec<_>>())?;
        let text = Matrix::from_rows(
            &order
                .iter()
                .map(|&j| txt[j].values.clone())
                .collect::<Vec<_>>(),
        )?;
        Self::new(
            image,
            text,
            img.iter().map(|r| r.label).collect(),
            img.iter().map(|r| r.split).collect(),
            img.iter().map(|r| r.instance_id.clone()).collect(),
            num_classes,
        )
    }
}

/// JSON manifest tying the input files together. Relative paths resolve
/// against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub image_features: PathBuf,
    pub text_features: PathBuf,
    pub class_embeddings: PathBuf,
    pub taxonomy: PathBuf,
    pub num_classes: usize,
    /// Free-form note on where the features came from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

/// Everything a manifest points at, loaded and cross-validated.
#[derive(Clone, Debug)]
pub struct DataBundle {
    pub dataset: TripleDataset,
    pub class_embeddings: ClassEmbeddings,
    pub taxonomy: Taxonomy,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HuseError::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text)
            .map_err(|e| HuseError::parse(path, e.line(), e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut m.image_features,
            &mut m.text_features,
            &mut m.class_embeddings,
            &mut m.taxonomy,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        tsv::write_file(path, &(text + "\n"))
    }
}

/// Loads only the triples referenced by a manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<TripleDataset> {
    let m = Manifest::load(manifest_path)?;
    TripleDataset::from_feature_files(&m.image_features, &m.text_features, m.num_classes)
}

/// Loads and cross-checks every file referenced by a manifest.
pub fn load_bundle(manifest_path: &Path) -> Result<DataBundle> {
    let m = Manifest::load(manifest_path)?;
    let dataset =
        TripleDataset::from_feature_files(&m.image_features, &m.text_features, m.num_classes)?;
    let class_embeddings = ClassEmbeddings::load(&m.class_embeddings)?;
    if class_embeddings.num_classes() != m.num_classes {
        return Err(HuseError::invalid(format!(
            "manifest declares {} classes but {} has {}",
            m.num_classes,
            m.class_embeddings.display(),
            class_embeddings.num_classes()
        )));
    }
    let taxonomy = Taxonomy::load(&m.taxonomy, class_embeddings.names())?;
    Ok(DataBundle {
        dataset,
        class_embeddings,
        taxonomy,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    #[serde(default)]
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Parameters of the synthetic hierarchical generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Children per node at each level; the product is the class count.
    pub branching: Vec<usize>,
    /// Optional declared class count, checked against `branching`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    pub examples_per_class: SplitCounts,
    pub d_img: usize,
    pub d_txt: usize,
    pub class_embed_dim: usize,
    pub within_class_noise: f64,
    pub modality_offset_noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn num_leaves(&self) -> usize {
        self.branching.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.branching.is_empty() || self.branching.contains(&0) {
            return Err(HuseError::invalid(format!(
                "branching factors must be non-empty and >= 1, got {:?}",
                self.branching
            )));
        }
        let k = self.num_leaves();
        if k < 2 {
            return Err(HuseError::invalid("tree must have at least 2 leaves"));
        }
        if let Some(declared) = self.num_classes {
            if declared != k {
                return Err(HuseError::invalid(format!(
                    "branching {:?} yields {k} classes but num_classes is {declared}",
                    self.branching
                )));
            }
        }
        if self.d_img == 0 || self.d_txt == 0 || self.class_embed_dim == 0 {
            return Err(HuseError::invalid(
                "feature and class embedding dims must be >= 1",
            ));
        }
        for (name, v) in [
            ("within_class_noise", self.within_class_noise),
            ("modality_offset_noise", self.modality_offset_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(HuseError::invalid(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.examples_per_class.train == 0 {
            return Err(HuseError::invalid(
                "need at least one training example per class",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub dataset: TripleDataset,
    pub class_embeddings: ClassEmbeddings,
    pub taxonomy: Taxonomy,
}

/// Generates a dataset whose classes are leaves of a balanced tree.
///
/// The root prototype is the origin; each child prototype is its parent
/// plus a Gaussian step whose scale halves with every level. Leaf
/// prototypes double as class-name embeddings. Every instance draws a
/// latent `leaf + within_class_noise · N(0, I)` that fixed random linear
/// maps send to image and text feature space, each with its own additive
/// `modality_offset_noise · N(0, I)`.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = RngState::new(spec.seed);
    let e = spec.class_embed_dim;

    let mut edges: Vec<(String, Option<String>)> = vec![("root".into(), None)];
    let mut level: Vec<(String, Vec<f64>)> = vec![("root".into(), vec![0.0; e])];
    let depth = spec.branching.len();
    let mut step = 1.0;
    for (l, &b) in spec.branching.iter().enumerate() {
        let mut next = Vec::with_capacity(level.len() * b);
        for (parent_id, proto) in &level {
            for _ in 0..b {
                let idx = next.len();
                let id = if l + 1 == depth {
                    format!("c{idx}")
                } else {
                    format!("n{}_{idx}", l + 1)
                };
                let child: Vec<f64> = proto.iter().map(|p| p + step * rng.normal()).collect();
                edges.push((id.clone(), Some(parent_id.clone())));
                next.push((id, child));
            }
        }
        level = next;
        step *= 0.5;
    }

    let names: Vec<String> = level.iter().map(|(id, _)| id.clone()).collect();
    let protos = Matrix::from_rows(&level.iter().map(|(_, p)| p.clone()).collect::<Vec<_>>())?;
    let class_embeddings = ClassEmbeddings::new(names.clone(), protos.clone())?;
    let taxonomy = Taxonomy::from_edges(&edges, &names)?;

    let mix = |rng: &mut RngState, out: usize| {
        let mut m = rng.standard_normal(e, out);
        m.scale(1.0 / (e as f64).sqrt());
        m
    };
    let mix_img = mix(&mut rng, spec.d_img);
    let mix_txt = mix(&mut rng, spec.d_txt);

    let k = names.len();
    let total: usize = Split::ALL
        .iter()
        .map(|&s| spec.examples_per_class.get(s))
        .sum::<usize>()
        * k;
    let mut latents = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let mut splits = Vec::with_capacity(total);
    for split in Split::ALL {
        for c in 0..k {
            for _ in 0..spec.examples_per_class.get(split) {
                let latent: Vec<f64> = protos
                    .row(c)
                    .iter()
                    .map(|p| p + spec.within_class_noise * rng.normal())
                    .collect();
                latents.push(latent);
                labels.push(c);
                splits.push(split);
            }
        }
    }
    let latents = Matrix::from_rows(&latents)?;
    let mut image = latents.matmul(&mix_img)?;
    let mut text = latents.matmul(&mix_txt)?;
    for m in [&mut image, &mut text] {
        for v in m.as_mut_slice() {
            *v += spec.modality_offset_noise * rng.normal();
        }
    }
    let ids = (0..total).map(|i| format!("i{i:06}")).collect();
    let dataset = TripleDataset::new(image, text, labels, splits, ids, k)?;
    Ok(SyntheticData {
        dataset,
        class_embeddings,
        taxonomy,
    })
}

pub const IMAGE_FEATURES_FILE: &str = "image_features.tsv";
pub const TEXT_FEATURES_FILE: &str = "text_features.tsv";
pub const CLASS_EMBEDDINGS_FILE: &str = "class_embeddings.tsv";
pub const TAXONOMY_FILE: &str = "taxonomy.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes the two feature files, class embeddings, taxonomy and a manifest
/// into `dir`. Returns the manifest path.
pub fn write_bundle(
    dir: &Path,
    dataset: &TripleDataset,
    class_embeddings: &ClassEmbeddings,
    taxonomy: &Taxonomy,
    provenance: Option<String>,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| HuseError::io(dir, e))?;
    write_feature_file(
        &dir.join(IMAGE_FEATURES_FILE),
        &dataset.feature_rows(Modality::Image),
    )?;
    write_feature_file(
        &dir.join(TEXT_FEATURES_FILE),
        &dataset.feature_rows(Modality::Text),
    )?;
    class_embeddings.save(&dir.join(CLASS_EMBEDDINGS_FILE))?;
    taxonomy.save(&dir.join(TAXONOMY_FILE))?;
    let manifest = Manifest {
        image_features: IMAGE_FEATURES_FILE.into(),
        text_features: TEXT_FEATURES_FILE.into(),
        class_embeddings: CLASS_EMBEDDINGS_FILE.into(),
        taxonomy: TAXONOMY_FILE.into(),
        num_classes: dataset.num_classes(),
        provenance,
    };
    let path = dir.join(MANIFEST_FILE);
    manifest.save(&path)?;
    Ok(path)
}

fn split_pool(ds: &TripleDataset, split: Split, batch_size: usize) -> Result<Vec<usize>> {
    if batch_size == 0 {
        return Err(HuseError::invalid("batch size must be >= 1"));
    }
    let pool = ds.indices(split);
    if pool.is_empty() {
        return Err(HuseError::invalid(format!("split {split} is empty")));
    }
    Ok(pool)
}

/// One shuffled pass over a split; the last batch may be short.
pub fn batch_iter(
    ds: &TripleDataset,
    split: Split,
    batch_size: usize,
    rng: &mut RngState,
) -> Result<impl Iterator<Item = Vec<usize>>> {
    let pool = split_pool(ds, split, batch_size)?;
    let order = rng.shuffle_indices(pool.len());
    let shuffled: Vec<usize> = order.into_iter().map(|i| pool[i]).collect();
    Ok(shuffled
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect::<Vec<_>>()
        .into_iter())
}

/// Endless sequence of epochs, each reshuffled; consumed by the trainer.
#[derive(Clone, Debug)]
pub struct BatchStream {
    pool: Vec<usize>,
    batch_size: usize,
    rng: RngState,
    epoch: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    pub fn new(ds: &TripleDataset, split: Split, batch_size: usize, rng: RngState) -> Result<Self> {
        let pool = split_pool(ds, split, batch_size)?;
        Ok(Self {
            pool,
            batch_size,
            rng,
            epoch: Vec::new(),
            pos: 0,
        })
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos >= self.epoch.len() {
            let order = self.rng.shuffle_indices(self.pool.len());
            self.epoch = order.into_iter().map(|i| self.pool[i]).collect();
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.epoch.len());
        let batch = &self.epoch[self.pos..end];
        self.pos = end;
        batch
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine_distance;

    pub(crate) fn small_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            branching: vec![2, 4],
            num_classes: Some(8),
            examples_per_class: SplitCounts {
                train: 5,
                val: 2,
                test: 3,
            },
            d_img: 12,
            d_txt: 9,
            class_embed_dim: 6,
            within_class_noise: 0.1,
            modality_offset_noise: 0.1,
            seed,
        }
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn synthetic_shapes_and_determinism() {
        let a = synth_generate(&small_spec(1)).unwrap();
        assert_eq!(a.dataset.len(), 8 * 10);
        assert_eq!(a.dataset.num_classes(), 8);
        assert_eq!(a.dataset.image().cols(), 12);
        assert_eq!(a.dataset.text().cols(), 9);
        assert_eq!(a.dataset.indices(Split::Val).len(), 16);
        let b = synth_generate(&small_spec(1)).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.class_embeddings, b.class_embeddings);
        assert_eq!(a.taxonomy, b.taxonomy);
    }

    #[test]
    fn zero_noise_collapses_each_class() {
        let mut spec = small_spec(2);
        spec.within_class_noise = 0.0;
        spec.modality_offset_noise = 0.0;
        let d = synth_generate(&spec).unwrap().dataset;
        for m in [d.image(), d.text()] {
            for i in 0..d.len() {
                let first = d.labels().iter().position(|&y| y == d.labels()[i]).unwrap();
                assert_eq!(m.row(i), m.row(first));
            }
        }
    }

    #[test]
    fn within_class_closer_than_across() {
        let d = synth_generate(&small_spec(3)).unwrap().dataset;
        let (mut within, mut across) = (Vec::new(), Vec::new());
        for i in 0..d.len() {
            for j in (i + 1)..d.len() {
                let dist: f64 = d
                    .image()
                    .row(i)
                    .iter()
                    .zip(d.image().row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if d.labels()[i] == d.labels()[j] {
                    within.push(dist);
                } else {
                    across.push(dist);
                }
            }
        }
        assert!(mean(&within) < mean(&across));
    }

    #[test]
    fn class_geometry_follows_the_tree() {
        // siblings (tree distance 2) vs cousins (4), averaged over 20 seeds
        let (mut near, mut far) = (Vec::new(), Vec::new());
        for seed in 0..20 {
            let s = synth_generate(&small_spec(seed)).unwrap();
            let v = s.class_embeddings.vectors();
            for a in 0..8 {
                for b in 0..8 {
                    if a == b {
                        continue;
                    }
                    let d = cosine_distance(v.row(a), v.row(b)).unwrap();
                    match s.taxonomy.tree_distance(a, b).unwrap() {
                        2 => near.push(d),
                        4 => far.push(d),
                        other => panic!("unexpected tree distance {other}"),
                    }
                }
            }
        }
        assert!(
            mean(&near) < mean(&far),
            "{} vs {}",
            mean(&near),
            mean(&far)
        );
    }

    #[test]
    fn invalid_specs() {
        let mut s = small_spec(0);
        s.num_classes = Some(6);
        assert!(synth_generate(&s).unwrap_err().to_string().contains('6'));
        let mut s = small_spec(0);
        s.within_class_noise = -1.0;
        assert!(s.validate().is_err());
        let mut s = small_spec(0);
        s.branching = vec![];
        assert!(s.validate().is_err());
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive() {
        let d = synth_generate(&small_spec(4)).unwrap().dataset;
        let mut all: Vec<usize> = Split::ALL.iter().flat_map(|&s| d.indices(s)).collect();
        all.sort_unstable();
        assert_eq!(all, (0..d.len()).collect::<Vec<_>>());
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = synth_generate(&small_spec(5)).unwrap();
        let manifest = write_bundle(
            dir.path(),
            &s.dataset,
            &s.class_embeddings,
            &s.taxonomy,
            None,
        )
        .unwrap();
        let b = load_bundle(&manifest).unwrap();
        assert_eq!(b.dataset, s.dataset);
        assert_eq!(b.class_embeddings, s.class_embeddings);
        assert_eq!(b.taxonomy, s.taxonomy);
        assert_eq!(load_dataset(&manifest).unwrap().len(), 80);
    }

    #[test]
    fn ten_row_files_and_mismatched_counts() {
        let dir = tempfile::tempdir().unwrap();
        let rows = |n: usize| -> Vec<FeatureRow> {
            (0..n)
                .map(|i| FeatureRow {
                    instance_id: format!("x{i}"),
                    label: i % 2,
                    split: Split::Train,
                    values: vec![i as f64, 1.0],
                })
                .collect()
        };
        let img = dir.path().join("img.tsv");
        let txt = dir.path().join("txt.tsv");
        write_feature_file(&img, &rows(10)).unwrap();
        let mut shuffled = rows(10);
        shuffled.reverse();
        write_feature_file(&txt, &shuffled).unwrap();
        let d = TripleDataset::from_feature_files(&img, &txt, 2).unwrap();
        assert_eq!(d.len(), 10);
        assert_eq!(d.image(), d.text());

        write_feature_file(&txt, &rows(9)).unwrap();
        let err = TripleDataset::from_feature_files(&img, &txt, 2)
            .unwrap_err()
            .to_string();
        assert!(err.contains("10") && err.contains('9'), "{err}");

        write_feature_file(&txt, &rows(10)).unwrap();
        assert!(TripleDataset::from_feature_files(&img, &txt, 1).is_err());

        fs::write(&txt, "x0\t0\ttrain\t1.0,zz\n").unwrap();
        assert!(read_feature_file(&txt)
            .unwrap_err()
            .to_string()
            .contains(":1:"));
    }

    #[test]
    fn epoch_batches() {
        let mut spec = small_spec(6);
        spec.examples_per_class = SplitCounts {
            train: 1,
            val: 0,
            test: 1,
        };
        spec.branching = vec![10];
        spec.num_classes = None;
        let d = synth_generate(&spec).unwrap().dataset;
        let batches: Vec<_> = batch_iter(&d, Split::Train, 4, &mut RngState::new(1))
            .unwrap()
            .collect();
        assert_eq!(
            batches.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![4, 4, 2]
        );
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, d.indices(Split::Train));
        let again: Vec<_> = batch_iter(&d, Split::Train, 4, &mut RngState::new(1))
            .unwrap()
            .collect();
        assert_eq!(batches, again);
        assert!(batch_iter(&d, Split::Val, 4, &mut RngState::new(1)).is_err());
        assert!(batch_iter(&d, Split::Train, 0, &mut RngState::new(1)).is_err());

        let mut stream = BatchStream::new(&d, Split::Train, 4, RngState::new(1)).unwrap();
        let sizes: Vec<usize> = (0..6).map(|_| stream.next_batch().len()).collect();
        assert_eq!(sizes, vec![4, 4, 2, 4, 4, 2]);
    }
}
