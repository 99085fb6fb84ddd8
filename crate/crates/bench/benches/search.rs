use criterion::{criterion_group, criterion_main, Criterion};
use heteroplan_bench::{four_type_fixture, three_type_fixture};
use heteroplan_core::instances::random_instance;
use heteroplan_core::oracle::{brute_force_oracle, OracleLimits};
use heteroplan_core::search::{search_plan, two_stage_search, DEFAULT_GROUP_SIZE};

fn search(c: &mut Criterion) {
    let mut g = c.benchmark_group("search");
    g.sample_size(10);

    let (cluster, profile, workload) = three_type_fixture();
    g.bench_function("three_types_768", |b| {
        b.iter(|| search_plan(&cluster, &profile, &workload).unwrap())
    });

    let (cluster, profile, workload) = four_type_fixture();
    g.bench_function("two_stage_1024", |b| {
        b.iter(|| two_stage_search(&cluster, &profile, &workload, DEFAULT_GROUP_SIZE, 1).unwrap())
    });

    let inst = random_instance(7);
    g.bench_function("oracle_random_7", |b| {
        b.iter(|| {
            brute_force_oracle(&inst.cluster, &inst.profile, &inst.workload, &OracleLimits::default())
                .ok()
        })
    });
    g.finish();
}

criterion_group!(benches, search);
criterion_main!(benches);
