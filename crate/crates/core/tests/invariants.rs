use approx::assert_relative_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use collabarm_core::arbiter::{run_episode, Actor, Agent, ArbiterConfig, Schedule};
use collabarm_core::bci::{cca_correlation, reference_set, STIMULUS_SET};
use collabarm_core::env::{Action, Env, TaskId, FAILURE_THRESHOLD};
use collabarm_core::eval::{read_log, records_from_log, write_log, BenchmarkSuite};
use collabarm_core::expert::ScriptedController;
use collabarm_core::learnloop::{self, bootstrap_agent, collect_demos, demo_stats, CollabLearnConfig, CollectConfig};
use collabarm_core::obs::{HeadKind, NormStats, ObsMode};
use collabarm_core::policy::{Architecture, PolicyParams};
use collabarm_core::train::{Checkpoint, TrainConfig};

fn random_agent(seed: u64, history: usize) -> Agent {
    let arch = Architecture::new(ObsMode::StateVector, history, vec![6], HeadKind::Continuous, 256);
    Agent {
        params: PolicyParams::init(arch, &mut ChaCha8Rng::seed_from_u64(seed)),
        stats: NormStats { min: [-1.0; 3], max: [1.0; 3], mean: [0.0; 3], std: [0.5; 3] },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn actor_pattern_follows_schedule_and_survives_the_log(
        n in 1u32..=32,
        task in 0usize..10,
        seed in 0u64..1_000_000,
        history in 1usize..=3,
    ) {
        let env = Env::default();
        let agent = random_agent(seed, history);
        let cfg = ArbiterConfig { history, ..ArbiterConfig::new(Schedule::Interleave(n)) };
        let rec = run_episode(&env, Some(&agent), &ScriptedController::default(), TaskId::ALL[task], seed, &cfg).unwrap();
        prop_assert!(rec.schedule_consistent());
        prop_assert!(rec.total_steps() <= FAILURE_THRESHOLD);
        for s in &rec.steps {
            prop_assert_eq!(s.actor == Actor::Expert, s.step % (n + 1) == 0);
        }

        let mut buf = Vec::new();
        write_log(&mut buf, "prop", std::slice::from_ref(&rec)).unwrap();
        let back = records_from_log(&read_log(buf.as_slice()).unwrap()).unwrap();
        prop_assert_eq!(back.len(), 1);
        let b = &back[0];
        prop_assert_eq!((b.task, b.seed, b.schedule, b.success), (rec.task, rec.seed, rec.schedule, rec.success));
        prop_assert_eq!((b.expert_steps, b.ticks), (rec.expert_steps, rec.ticks));
        for (x, y) in b.steps.iter().zip(&rec.steps) {
            prop_assert_eq!((x.step, x.actor, x.action, x.success), (y.step, y.actor, y.action, y.success));
        }
    }

    #[test]
    fn canonical_correlation_is_bounded_and_mixing_invariant(
        seed in any::<u64>(),
        channels in 1usize..=8,
        stim in 0usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::<f64>::from_fn(256, channels, |_, _| rng.random_range(-1.0..1.0));
        let r = reference_set(STIMULUS_SET[stim], 256, 128.0);
        let rho = cca_correlation(&x, &r).unwrap();
        prop_assert!((0.0..=1.0).contains(&rho), "{rho}");
        let m = DMatrix::<f64>::from_fn(channels, channels, |i, j| if i == j { 2.0 } else { rng.random_range(-0.5..0.5) / channels as f64 });
        assert_relative_eq!(cca_correlation(&(&x * m), &r).unwrap(), rho, epsilon = 1e-9);
    }

    #[test]
    fn checkpoints_round_trip_and_reject_truncation(
        seed in any::<u64>(),
        hidden in proptest::collection::vec(1usize..10, 0..3),
        discrete in any::<bool>(),
        history in 1usize..=3,
        cut in 0.0f64..1.0,
    ) {
        let head = if discrete { HeadKind::Discrete } else { HeadKind::Continuous };
        let arch = Architecture::new(ObsMode::StateVector, history, hidden, head, 16);
        let params = PolicyParams::init(arch, &mut ChaCha8Rng::seed_from_u64(seed));
        let stats = NormStats { min: [-1.0, -0.5, -1.0], max: [1.0, 0.5, 1.0], mean: [0.1, 0.0, -0.2], std: [0.3, 0.2, 0.9] };
        let ckpt = Checkpoint::new(params, stats, Default::default());
        let bytes = ckpt.to_bytes();
        prop_assert_eq!(&Checkpoint::from_bytes(&bytes).unwrap(), &ckpt);
        let n = (cut * bytes.len() as f64) as usize;
        prop_assert!(Checkpoint::from_bytes(&bytes[..n]).is_err());
    }
}

/// Keeps the arm still so every episode runs to the step cap.
struct Still;

impl collabarm_core::expert::Expert for Still {
    fn kind(&self) -> collabarm_core::expert::ExpertKind {
        collabarm_core::expert::ExpertKind::Scripted
    }

    fn act(
        &self,
        _: &Env,
        s: &collabarm_core::env::WorldState,
        _: &collabarm_core::expert::ExpertContext,
    ) -> Result<Action, collabarm_core::expert::ExpertError> {
        Ok(Action { dx: 0.0, dy: 0.0, grip: if s.gripper_closed { 1.0 } else { -1.0 } })
    }
}

#[test]
fn expert_fraction_does_not_grow_with_n() {
    let env = Env::default();
    let arch = Architecture::new(ObsMode::StateVector, 1, vec![4], HeadKind::Continuous, 256);
    let agent = Agent {
        params: PolicyParams::zeros(arch),
        stats: NormStats { min: [-1.0; 3], max: [1.0; 3], mean: [0.0, 0.0, -1.0], std: [1.0; 3] },
    };
    let mut last = f64::INFINITY;
    for n in [1, 2, 3, 4, 8, 16, 32] {
        let cfg = ArbiterConfig::new(Schedule::Interleave(n));
        let f = (0..6u64)
            .map(|seed| {
                run_episode(&env, Some(&agent), &Still, TaskId::ALL[seed as usize], seed, &cfg).unwrap().expert_fraction()
            })
            .sum::<f64>()
            / 6.0;
        assert!(f <= last, "N={n}: {f} > {last}");
        last = f;
    }
}

#[test]
fn each_round_adds_exactly_one_buffer_of_expert_samples() {
    let env = Env::default();
    let tasks = [TaskId::Reach, TaskId::Push, TaskId::PickPlace];
    let (demos, _) = collect_demos(&env, &ScriptedController::default(), &tasks, 4, 500, ObsMode::StateVector, 1).unwrap();
    let stats = demo_stats(&demos).unwrap();
    let arch = Architecture::new(ObsMode::StateVector, 1, vec![16], HeadKind::Continuous, 256);
    let train = TrainConfig { steps: 40, ..TrainConfig::default() };
    let (agent, _) = bootstrap_agent(&demos, stats, arch, &train).unwrap();
    let capacity = 150;
    let cfg = CollabLearnConfig {
        rounds: 3,
        collect: CollectConfig { capacity, tasks: tasks.to_vec(), ..CollectConfig::default() },
        train,
        eval: BenchmarkSuite::new(tasks.to_vec(), 2),
        bootstrap_share: 0.5,
    };
    let out = learnloop::run(&env, &agent, &demos, &ScriptedController::default(), &cfg).unwrap();
    for (i, m) in out.metrics.iter().enumerate() {
        assert_eq!(m.buffer_samples, capacity);
        assert_eq!(m.dataset_samples, capacity * (i + 1));
    }
    assert_eq!(out.dataset.len(), 3 * capacity);
    assert!(out.dataset.samples.iter().all(|s| s.actor == Actor::Expert));
}
