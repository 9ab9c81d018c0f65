use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use oreal_core::bonmath;
use oreal_core::envsim::{question_bank, EnvSpec, Question};
use oreal_core::policy::{self, PolicyTable};
use oreal_core::trainer::{self, Ablation, TrainConfig, TrainState};
use oreal_core::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn monte_carlo(c: &mut Criterion) {
    let env = EnvSpec::tree_path(3, 3, 3);
    let q = Question::tree_path(0, 1, 3);
    let pi = policy::randomized_policy(&env, &q, 1.0, 5).unwrap();
    let mut group = c.benchmark_group("bon_monte_carlo_20k");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| bonmath::monte_carlo_bon(&pi, &env, &q, 8, 20_000, 1, black_box(exec)).unwrap())
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let env = EnvSpec::sum_mod(5, 3, vec![3, 4, 5]);
    let bank = question_bank(&env, 64, 7).unwrap();
    let config = TrainConfig {
        iterations: 20,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train_20_iterations");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                let mut state = TrainState::new(PolicyTable::for_env(&env));
                trainer::train(
                    &mut state,
                    &env,
                    &bank,
                    &bank,
                    &config,
                    Ablation::FULL,
                    black_box(exec),
                )
                .unwrap();
                state.iteration
            })
        });
    }
    group.finish();
}

criterion_group!(benches, monte_carlo, training);
criterion_main!(benches);
