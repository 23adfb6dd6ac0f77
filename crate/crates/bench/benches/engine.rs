use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use fxsim_bench::{outages, steady};

fn engine(c: &mut Criterion) {
    let mut g = c.benchmark_group("run");
    g.sample_size(10);
    for preset in ["monolith", "microservice"] {
        for (label, s) in [("steady", steady(preset)), ("outages", outages(preset))] {
            let events = fxsim_core::run(&s).unwrap().report.events;
            g.throughput(Throughput::Elements(events));
            g.bench_function(format!("{preset}/{label}"), |b| b.iter(|| fxsim_core::run(&s).unwrap()));
        }
    }
    g.finish();
}

fn trace_export(c: &mut Criterion) {
    let out = fxsim_core::run(&steady("microservice")).unwrap();
    c.bench_function("trace/export_text", |b| b.iter(|| out.trace.export_text().len()));
}

criterion_group!(benches, engine, trace_export);
criterion_main!(benches);
