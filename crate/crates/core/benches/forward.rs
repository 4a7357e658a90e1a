// SPDX-License-Identifier: MIT OR Apache-2.0

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lenslab_core::fixtures::{build_overthinking_model, gen_unnatural_dataset, FixtureSpec};
use lenslab_core::interventions::InterventionSpec;
use lenslab_core::lens::layer_batches;
use lenslab_core::model::forward;
use lenslab_core::parallel::with_workers;
use lenslab_core::prompting::{
    sample_balanced_prompts, LabelingScheme, PromptTemplate, SchemeKind,
};

fn bench(c: &mut Criterion) {
    let spec = FixtureSpec::default();
    let bundle = build_overthinking_model(&spec).unwrap();
    let ds = gen_unnatural_dataset(&spec).unwrap();
    let prompts = sample_balanced_prompts(
        &bundle,
        &ds,
        64,
        8,
        &LabelingScheme::new(SchemeKind::Permuted),
        &PromptTemplate::default(),
        1,
    )
    .unwrap();
    let none = InterventionSpec::none();

    c.bench_function("forward/single_prompt", |b| {
        b.iter(|| forward(&bundle, &prompts[0].rendered, &none).unwrap())
    });

    let mut group = c.benchmark_group("layer_batches/64_prompts");
    group.sample_size(20);
    for (name, workers) in [("sequential", Some(1)), ("parallel", None)] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &workers, |b, &w| {
            b.iter(|| with_workers(w, || layer_batches(&bundle, &prompts, &none).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
