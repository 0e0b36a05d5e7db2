use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use disslab::analysis::{SurrogateSettings, ValueSurrogate};
use disslab::par::Execution;
use disslab::problems::{make_fish, make_lq, FishParams};
use disslab::sop::solve_sop_default;

fn surrogate_build(c: &mut Criterion) {
    let mut group = c.benchmark_group("value_surrogate");
    group.sample_size(10);
    let cases = [("lq", make_lq(1.0, 1.0, 1.0, 1.0).unwrap()), ("fish", make_fish(FishParams::default()).unwrap())];
    for (name, bench) in &cases {
        let steady = solve_sop_default(&bench.problem, 0, Execution::Sequential).unwrap();
        for exec in [Execution::Sequential, Execution::Parallel] {
            group.bench_with_input(BenchmarkId::new(format!("{exec:?}"), name), &exec, |b, exec| {
                b.iter(|| ValueSurrogate::build(&bench.problem, &steady, 21, SurrogateSettings::default(), *exec).unwrap())
            });
        }
    }
    group.finish();
}

fn multistart_sop(c: &mut Criterion) {
    let mut group = c.benchmark_group("steady_state");
    let fish = make_fish(FishParams::default()).unwrap();
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_function(format!("{exec:?}"), |b| b.iter(|| solve_sop_default(&fish.problem, 0, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, surrogate_build, multistart_sop);
criterion_main!(benches);
