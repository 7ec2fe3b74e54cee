use hydra_core::allreduce::{total_exchanges, Collective, CollectiveConfig, FixedInput, FixedRounds, JobState};
use hydra_core::sim::{LatencyModel, SimTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REPLICAS: usize = 3;
const LEN: usize = 13;

type IntJob = Collective<FixedInput<i64>, FixedRounds>;

fn inputs(ranks: usize, seed: u64) -> Vec<Vec<i64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..ranks).map(|_| (0..LEN).map(|_| rng.random_range(-1_000_000..1_000_000)).collect()).collect()
}

fn direct_sum(vs: &[Vec<i64>], ranks: &[usize]) -> Vec<i64> {
    (0..LEN).map(|i| ranks.iter().map(|r| vs[*r][i]).sum()).collect()
}

fn job(vs: &[Vec<i64>], steps: u64, seed: u64) -> IntJob {
    let n = 1 + vs.len() * REPLICAS;
    let latency = LatencyModel::planar(n, 5.0, 40.0, 0.1, seed);
    let cfg = CollectiveConfig::for_latency(latency.max_base());
    let tasks = vs.iter().map(|v| FixedInput::new(v.clone())).collect();
    Collective::build(cfg, tasks, REPLICAS, FixedRounds::new(steps), LEN, latency, seed)
}

fn finish(job: &mut IntJob) {
    let deadline = job.sim.now().after(60_000);
    assert!(job.run_until_done(deadline).unwrap(), "job did not finish: {:?}", job.coordinator().state());
    assert_eq!(job.coordinator().state(), &JobState::Finished);
    // followers learn the final commit on the next heartbeat
    job.sim.run_for(1_000).unwrap();
}

/// Every online replica of every included rank holds `expect` for each step.
fn assert_results(job: &IntJob, ranks: &[usize], steps: usize, expect: &[i64]) {
    for r in ranks {
        for n in job.members(*r) {
            if !job.sim.is_online(n) {
                continue;
            }
            let results = &job.replica(n).task().results;
            assert_eq!(results.len(), steps, "rank {r} replica {n}");
            for got in results {
                assert_eq!(got, expect, "rank {r} replica {n}");
            }
        }
    }
}

#[test]
fn no_faults_exact_with_minimal_exchanges() {
    for p in [2usize, 4, 8] {
        let vs = inputs(p, p as u64);
        let mut j = job(&vs, 1, 10 + p as u64);
        finish(&mut j);
        let all: Vec<usize> = (0..p).collect();
        assert_results(&j, &all, 1, &direct_sum(&vs, &all));
        assert_eq!(j.coordinator().attempt(), 1);
        // one record per completed exchange per rank leader
        assert_eq!(j.sim.metrics().count("exchange_step"), p * total_exchanges(p));
        assert_eq!(total_exchanges(p), 2 * p.trailing_zeros() as usize);
    }
}

#[test]
fn follower_loss_is_transparent() {
    for p in [2usize, 4, 8] {
        let vs = inputs(p, 20 + p as u64);
        let mut j = job(&vs, 2, 30 + p as u64);
        let l = total_exchanges(p) / 2;
        assert!(j.run_until_exchange(0, l, SimTime(20_000)).unwrap());
        for r in 0..p {
            let leader = j.leader(r).unwrap();
            let follower = j.members(r).into_iter().find(|n| *n != leader).unwrap();
            j.sim.crash(follower);
        }
        finish(&mut j);
        let all: Vec<usize> = (0..p).collect();
        assert_results(&j, &all, 2, &direct_sum(&vs, &all));
        assert!(j.coordinator().lost().is_empty());
    }
}

#[test]
fn leader_failover_in_each_phase() {
    for p in [2usize, 4, 8] {
        let vs = inputs(p, 40 + p as u64);
        let mut j = job(&vs, 1, 50 + p as u64);
        let l = total_exchanges(p) / 2;
        // first exchange of the scatter, then first of the gather
        for (k, rank) in [(0, 0), (l, p - 1)] {
            assert!(j.run_until_exchange(0, k, SimTime(30_000)).unwrap(), "p={p} k={k}");
            let leader = j.leader(rank).unwrap();
            j.sim.crash(leader);
        }
        finish(&mut j);
        let all: Vec<usize> = (0..p).collect();
        assert_results(&j, &all, 1, &direct_sum(&vs, &all));
        assert!(j.coordinator().lost().is_empty(), "p={p} lost {:?}", j.coordinator().lost());
        assert_eq!(j.coordinator().attempt(), 1);
        assert!(j.sim.metrics().count("rank_leader_changed") >= p + 2);
    }
}

#[test]
fn dead_rank_is_excluded_and_deferred() {
    let p = 4;
    let vs = inputs(p, 60);
    let mut j = job(&vs, 2, 61);
    assert!(j.run_until_exchange(0, 1, SimTime(20_000)).unwrap());
    for n in j.members(2) {
        j.sim.crash(n);
    }
    finish(&mut j);
    let kept = [0, 1, 3];
    assert_results(&j, &kept, 2, &direct_sum(&vs, &kept));
    let c = j.coordinator();
    assert_eq!(c.lost().iter().copied().collect::<Vec<_>>(), vec![2]);
    assert_eq!(c.planner.lost, vec![(0, 2)]);
    assert_eq!(c.planner.committed, vec![(0, kept.to_vec()), (1, kept.to_vec())]);
    // three ranks pad to four slots
    assert_eq!(c.layout().len(), 4);
}

#[test]
fn odd_rank_counts_pad_with_zero_slots() {
    for p in [1usize, 3, 5] {
        let vs = inputs(p, 70 + p as u64);
        let mut j = job(&vs, 1, 80 + p as u64);
        finish(&mut j);
        let all: Vec<usize> = (0..p).collect();
        assert_results(&j, &all, 1, &direct_sum(&vs, &all));
        assert_eq!(j.coordinator().layout().len(), p.next_power_of_two());
    }
}

#[test]
fn float_reduction_is_schedule_ordered() {
    let p = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let vs: Vec<Vec<f64>> = (0..p).map(|_| (0..LEN).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let run = |seed: u64| {
        let latency = LatencyModel::planar(1 + p * REPLICAS, 5.0, 40.0, 0.3, seed);
        let cfg = CollectiveConfig::for_latency(latency.max_base());
        let tasks = vs.iter().map(|v| FixedInput::new(v.clone())).collect();
        let mut j = Collective::build(cfg, tasks, REPLICAS, FixedRounds::new(1), LEN, latency, seed);
        assert!(j.run_until_done(SimTime(60_000)).unwrap());
        j.rank_task(0).unwrap().results[0].clone()
    };
    let a = run(1);
    // different timings, same reduction order
    for seed in 2..5 {
        let b = run(seed);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let direct: Vec<f64> = (0..LEN).map(|i| vs.iter().map(|v| v[i]).sum()).collect();
    for (x, y) in a.iter().zip(&direct) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn repeated_failovers_stay_exact() {
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = [2usize, 4, 8][seed as usize % 3];
        let vs = inputs(p, 100 + seed);
        let mut j = job(&vs, 2, 200 + seed);
        let steps = total_exchanges(p);
        for _ in 0..3 {
            let k = rng.random_range(0..steps);
            let step = rng.random_range(0..2u64);
            if !j.run_until_exchange(step, k, j.sim.now().after(20_000)).unwrap() {
                continue;
            }
            let rank = rng.random_range(0..p);
            if let Some(leader) = j.leader(rank) {
                j.sim.crash(leader);
                j.sim.run_for(rng.random_range(0..400)).unwrap();
                j.sim.restart(leader).unwrap();
            }
        }
        finish(&mut j);
        let all: Vec<usize> = (0..p).collect();
        assert!(j.coordinator().lost().is_empty(), "seed {seed}");
        assert_results(&j, &all, 2, &direct_sum(&vs, &all));
    }
}
