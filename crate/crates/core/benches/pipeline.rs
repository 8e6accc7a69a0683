use std::sync::Arc;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use logicqa::backend::{ImageData, MockBackend};
use logicqa::demo::{self, DEMO_QUESTIONS};
use logicqa::inference::{assess, infer_image};
use logicqa::session::{QuerySettings, Session};
use logicqa::synthesis::{MainQuestion, Provenance};
use logicqa::{Answer, Executor, QuestionSet, SubAnswer};

fn demo_set() -> QuestionSet {
    QuestionSet {
        class_name: "breakfast box".into(),
        subclass: None,
        provenance: Provenance {
            reference_ids: vec![],
            seed: 0,
            backend_id: "bench".into(),
        },
        main_questions: DEMO_QUESTIONS
            .iter()
            .enumerate()
            .map(|(i, (q, subs))| MainQuestion {
                index: i + 1,
                text: q.to_string(),
                sub_questions: subs.iter().map(|s| s.to_string()).collect(),
                filter_accuracy: None,
                padded: false,
            })
            .collect(),
        filter: None,
    }
}

fn executors() -> Vec<(&'static str, Executor)> {
    vec![
        ("sequential", Executor::sequential()),
        ("parallel-8", Executor::new(8).expect("pool starts")),
    ]
}

/// 25 Sub-Q requests per image against a mock that sleeps like a remote
/// model would.
fn image_inference(c: &mut Criterion) {
    let backend = Arc::new(
        MockBackend::new("bench", demo::demo_fixtures())
            .expect("fixtures valid")
            .with_latency(Duration::from_micros(200)),
    );
    let set = demo_set();
    let images: Vec<(String, ImageData)> = (0..4)
        .map(|k| {
            let id = demo::anomaly_id(k);
            let data = ImageData::from_bytes(id.clone().into_bytes(), "image/png");
            (id, data)
        })
        .collect();
    let mut group = c.benchmark_group("infer_images");
    group.sample_size(10);
    for (name, executor) in executors() {
        let session = Session::new(backend.clone(), QuerySettings::hosted("bench"), executor);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                for (id, image) in &images {
                    infer_image(&session, &set, "breakfast box", id, image).expect("fixture hit");
                }
            })
        });
    }
    group.finish();
}

/// Vote and score 2,000 images from pre-collected answers.
fn batch_scoring(c: &mut Criterion) {
    let set = demo_set();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let batches: Vec<Vec<SubAnswer>> = (0..2000)
        .map(|_| {
            (1..=5)
                .flat_map(|i| (1..=5).map(move |j| (i, j)))
                .map(|(i, j)| {
                    let a = if rng.gen_bool(0.8) { Answer::Yes } else { Answer::No };
                    SubAnswer::new(i, j, a, rng.gen_range(-3.0..=0.0))
                })
                .collect()
        })
        .collect();
    let mut group = c.benchmark_group("batch_scoring");
    for (name, executor) in executors() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| executor.map(&batches, |answers| assess("img", &set.main_questions, answers).expect("valid")))
        });
    }
    group.finish();
}

criterion_group!(benches, image_inference, batch_scoring);
criterion_main!(benches);
