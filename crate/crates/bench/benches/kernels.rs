use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use huse_core::data::{synth_generate, SplitCounts};
use huse_core::evaluator::{hp_at_k, recall_at_k, EmbeddedCorpus};
use huse_core::losses::graph_loss;
use huse_core::numerics::l2_normalize_rows;
use huse_core::trainer::{init_model, ModelConfig, Trainer};
use huse_core::{
    Exec, Modality, RngState, SemanticGraph, SigmaRule, SyntheticSpec, Taxonomy, TrainConfig,
};

fn spec(train: usize) -> SyntheticSpec {
    SyntheticSpec {
        branching: vec![2, 4],
        num_classes: Some(8),
        examples_per_class: SplitCounts {
            train,
            val: 0,
            test: 0,
        },
        d_img: 32,
        d_txt: 24,
        class_embed_dim: 16,
        within_class_noise: 0.5,
        modality_offset_noise: 0.3,
        seed: 0,
    }
}

fn bench_graph_loss(c: &mut Criterion) {
    let data = synth_generate(&spec(1)).unwrap();
    let graph = SemanticGraph::build(&data.class_embeddings).unwrap();
    let mut rng = RngState::new(1);
    let mut group = c.benchmark_group("graph_loss");
    for n in [128usize, 512] {
        let emb = l2_normalize_rows(&rng.standard_normal(n, 64), 1e-12)
            .unwrap()
            .0;
        let labels: Vec<usize> = (0..n).map(|i| i % 8).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                graph_loss(
                    black_box(&emb),
                    &labels,
                    &graph,
                    0.8,
                    SigmaRule::Conjunction,
                    Exec::Sequential,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn bench_train_steps(c: &mut Criterion) {
    let data = synth_generate(&spec(64)).unwrap();
    let graph = SemanticGraph::build(&data.class_embeddings).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 64,
        total_steps: 10,
        eval_every: 0,
        model: ModelConfig {
            image_layers: vec![64, 16],
            text_layers: vec![64, 16],
            dropout_rate: 0.1,
        },
        ..TrainConfig::default()
    };
    let trainer = Trainer::new(&data.dataset, &graph, &data.class_embeddings, &cfg);
    let model = init_model(&cfg, &data.dataset).unwrap();
    c.bench_function("train_10_steps_batch_64", |b| {
        b.iter(|| trainer.run(model.clone(), |_| Ok(())).unwrap())
    });
}

fn taxonomy() -> Taxonomy {
    let mut edges = vec![("root".to_string(), None)];
    let mut names = Vec::new();
    for g in 0..2 {
        edges.push((format!("g{g}"), Some("root".to_string())));
        for l in 0..4 {
            let name = format!("c{}", g * 4 + l);
            edges.push((name.clone(), Some(format!("g{g}"))));
            names.push(name);
        }
    }
    Taxonomy::from_edges(&edges, &names).unwrap()
}

fn bench_retrieval(c: &mut Criterion) {
    let mut rng = RngState::new(2);
    let n = 400;
    let make = |rng: &mut RngState, m: Modality, prefix: &str| {
        let emb = l2_normalize_rows(&rng.standard_normal(n, 64), 1e-12)
            .unwrap()
            .0;
        let labels = (0..n).map(|i| i % 8).collect();
        let ids = (0..n).map(|i| format!("{prefix}{i:05}")).collect();
        EmbeddedCorpus::new(emb, labels, ids, m).unwrap()
    };
    let img = make(&mut rng, Modality::Image, "i");
    let txt = make(&mut rng, Modality::Text, "t");
    let tax = taxonomy();
    c.bench_function("recall_at_10_400x400", |b| {
        b.iter(|| recall_at_k(black_box(&img), &txt, 10).unwrap())
    });
    c.bench_function("hp_at_5_400x400", |b| {
        b.iter(|| hp_at_k(black_box(&img), &txt, 5, &tax).unwrap())
    });
}

criterion_group!(
    benches,
    bench_graph_loss,
    bench_train_steps,
    bench_retrieval
);
criterion_main!(benches);
