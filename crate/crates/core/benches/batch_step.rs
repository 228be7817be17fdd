use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use clsd_core::corpus::{generate, GenConfig};
use clsd_core::model::{backward, forward, Backbone, Component, Heads, ModelParams, ModelSpec, Upstream};
use clsd_core::objective::{loss_clsd, TeacherScore};
use clsd_core::Exec;

fn batch_step(c: &mut Criterion) {
    let data = generate(&GenConfig {
        records: 4096,
        test_records: 16,
        ..GenConfig::default()
    })
    .unwrap();
    let batch: Vec<_> = data.train.records.iter().take(1024).collect();
    let labels: Vec<f64> = batch.iter().map(|r| r.label_f64()).collect();

    let mut group = c.benchmark_group("batch_step");
    for backbone in [Backbone::Fm, Backbone::DeepFm] {
        let mut params = ModelParams::init(ModelSpec::new(backbone, &data.train.schema), 1).unwrap();
        params.enable_adgate(2);
        for exec in [Exec::Sequential, Exec::Parallel] {
            let id = BenchmarkId::new(format!("{backbone}"), format!("{exec:?}"));
            group.bench_with_input(id, &exec, |b, &exec| {
                b.iter(|| {
                    let trace = forward(&params, &batch, Heads::ALL, exec).unwrap();
                    let teacher = TeacherScore::from_logits(trace.backbone_logits());
                    let loss =
                        loss_clsd(trace.backbone_logits(), trace.adgate_logits(), &labels, &teacher, 1.0).unwrap();
                    let up = Upstream {
                        backbone: &loss.d_logit,
                        adgate: loss.d_adgate.as_deref(),
                        aux: None,
                    };
                    backward(&params, &trace, up, Component::Both, exec).unwrap()
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, batch_step);
criterion_main!(benches);
