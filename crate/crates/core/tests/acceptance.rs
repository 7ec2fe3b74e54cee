//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Runs as a plain binary so the verdict lines are always printed.

use hydra_core::allreduce::{total_exchanges, Collective, CollectiveConfig, FixedInput, FixedRounds, JobState};
use hydra_core::coin::vcu;
use hydra_core::dht::{xor_distance, Contact, PeerId, RoutingTable};
use hydra_core::harness::{run_scenario, Scenario};
use hydra_core::network::{NetParams, Network, NetworkConfig};
use hydra_core::placement::{EnvSnapshot, Policy, Reinforce, ReinforceConfig};
use hydra_core::raft::cluster::chaos_run;
use hydra_core::registry::{dataset_hash, OpReport};
use hydra_core::sim::{LatencyModel, NodeId, SimTime};
use hydra_core::training::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- DHT

fn dht_scaling() -> Outcome {
    const PEERS: usize = 1024;
    const LOOKUPS: usize = 200;
    let started = Instant::now();
    let mut net = Network::build(NetworkConfig::uniform(2, PEERS, 10, 7)).map_err(|e| e.to_string())?;
    ensure(net.run_until_registered(SimTime(120_000)).map_err(|e| e.to_string())?, || "peers did not register".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let peers = net.peer_nodes().to_vec();
    let mut rounds = Vec::new();
    let mut found = 0;
    for _ in 0..LOOKUPS {
        let from = peers[rng.random_range(0..peers.len())];
        let to = peers[rng.random_range(0..peers.len())];
        let target = net.peer(to).peer_id().ok_or("unregistered target")?;
        let op = net.find_node(from, target).ok_or("lookup origin offline")?;
        let deadline = SimTime(net.now().0 + 30_000);
        match net.wait_report(from, op, deadline).map_err(|e| e.to_string())? {
            Some(OpReport::Located { found: hit, rounds: n, .. }) => {
                if from == to || hit.is_some_and(|c| c.address == to) {
                    found += 1;
                }
                rounds.push(n);
            }
            other => return Err(format!("lookup ended with {other:?}")),
        }
    }
    let elapsed = started.elapsed();
    let mean = rounds.iter().sum::<u32>() as f64 / rounds.len() as f64;
    let max = rounds.iter().copied().max().unwrap_or(0);
    let detail = format!("{found}/{LOOKUPS} found, mean rounds {mean:.2}, max {max}, {:.1}s", elapsed.as_secs_f64());
    ensure(found == LOOKUPS && mean <= 10.0 && max <= 13 && elapsed < Duration::from_secs(30), || detail.clone())?;
    Ok(detail)
}

/// Position of the first differing bit, scanning bytes from the top.
fn first_differing_bit(a: &PeerId, b: &PeerId) -> Option<usize> {
    a.0.iter().zip(&b.0).enumerate().find(|(_, (x, y))| x != y).map(|(i, (x, y))| i * 8 + (x ^ y).leading_zeros() as usize)
}

fn dht_bucket_law() -> Outcome {
    const OPS: usize = 100_000;
    const K: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let owner = PeerId::random(&mut rng);
    let mut table = RoutingTable::with_capacity(owner, K);
    // Mirror of the expected contents, bucket by bucket in order.
    let mut shadow: BTreeMap<usize, Vec<PeerId>> = BTreeMap::new();
    let mut known: Vec<PeerId> = Vec::new();
    let (mut evictions, mut removals) = (0, 0);
    for op in 0..OPS {
        if !known.is_empty() && rng.random_bool(0.3) {
            let victim = known.swap_remove(rng.random_range(0..known.len()));
            let b = first_differing_bit(&owner, &victim).expect("never the owner");
            let present = shadow.get(&b).is_some_and(|v| v.contains(&victim));
            let removed = table.remove(victim);
            ensure(removed.is_some() == present, || format!("op {op}: remove disagreed with the model"))?;
            shadow.entry(b).or_default().retain(|p| *p != victim);
            removals += 1;
            continue;
        }
        // spread ids over every bucket, not just the top few
        let depth = rng.random_range(0..256);
        let mut id = owner;
        id.0[depth / 8] ^= 0x80 >> (depth % 8);
        for bit in depth + 1..256 {
            if rng.random_bool(0.5) {
                id.0[bit / 8] ^= 0x80 >> (bit % 8);
            }
        }
        let alive = |c: &Contact| !(c.peer_id.0[31] as usize + op).is_multiple_of(3);
        let contact = Contact { peer_id: id, address: NodeId(op as u32) };
        table.insert_with_probe(contact, alive).map_err(|e| e.to_string())?;
        let bucket = shadow.entry(depth).or_default();
        if !bucket.contains(&id) {
            if bucket.len() < K {
                bucket.push(id);
            } else if let Some(pos) = bucket.iter().position(|p| (p.0[31] as usize + op).is_multiple_of(3)) {
                bucket.remove(pos);
                bucket.push(id);
                evictions += 1;
            }
        }
        known.push(id);
    }
    let mut seen = BTreeSet::new();
    for (b, expect) in &shadow {
        let got: Vec<PeerId> = table.bucket(*b).iter().map(|c| c.peer_id).collect();
        ensure(&got == expect, || format!("bucket {b} differs from the model"))?;
    }
    for c in table.contacts() {
        let b = first_differing_bit(&owner, &c.peer_id).ok_or("owner stored in its own table")?;
        ensure(table.bucket(b).contains(c), || format!("{} stored outside bucket {b}", c.peer_id))?;
        ensure(seen.insert(c.peer_id), || format!("{} stored twice", c.peer_id))?;
    }
    ensure((0..256).all(|b| table.bucket(b).len() <= K), || "bucket over capacity".into())?;
    table.audit()?;
    Ok(format!("{OPS} ops ({removals} removals, {evictions} evictions), {} entries audited", seen.len()))
}

// ---------------------------------------------------------------- Raft

fn raft_safety() -> Outcome {
    const RUNS: u64 = 1000;
    let (mut violated, mut recovered, mut elections) = (0, 0, 0);
    let mut worst = 0;
    let mut first_violation = None;
    for seed in 0..RUNS {
        let r = chaos_run(seed, 5, 10_000).map_err(|e| e.to_string())?;
        elections += r.elections;
        if !r.violations.is_empty() {
            violated += 1;
            first_violation.get_or_insert_with(|| format!("seed {seed}: {:?}", r.violations));
        }
        if let Some(ms) = r.recovery_ms {
            recovered += 1;
            worst = worst.max(ms);
        }
    }
    let detail = format!(
        "{violated} runs with violations, leader back in {recovered}/{RUNS} runs (worst {worst} ms), {elections} elections"
    );
    if let Some(v) = first_violation {
        return Err(format!("{detail}; {v}"));
    }
    ensure(recovered * 100 >= RUNS * 99, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- All-reduce

type IntJob = Collective<FixedInput<i64>, FixedRounds>;

fn int_job(vs: &[Vec<i64>], seed: u64) -> IntJob {
    let n = 1 + vs.len() * 3;
    let latency = LatencyModel::planar(n, 5.0, 40.0, 0.1, seed);
    let cfg = CollectiveConfig::for_latency(latency.max_base());
    let tasks = vs.iter().map(|v| FixedInput::new(v.clone())).collect();
    Collective::build(cfg, tasks, 3, FixedRounds::new(1), vs[0].len(), latency, seed)
}

fn finish_int_job(job: &mut IntJob) -> Result<(), String> {
    let deadline = job.sim.now().after(60_000);
    ensure(job.run_until_done(deadline).map_err(|e| e.to_string())?, || "job did not finish".into())?;
    ensure(job.coordinator().state() == &JobState::Finished, || format!("{:?}", job.coordinator().state()))?;
    job.sim.run_for(1_000).map_err(|e| e.to_string())?;
    Ok(())
}

fn check_sums(job: &IntJob, vs: &[Vec<i64>], case: &str) -> Result<(), String> {
    let expect: Vec<i64> = (0..vs[0].len()).map(|i| vs.iter().map(|v| v[i]).sum()).collect();
    for r in 0..vs.len() {
        for n in job.members(r).into_iter().filter(|n| job.sim.is_online(*n)) {
            let got = &job.replica(n).task().results;
            ensure(got.len() == 1 && got[0] == expect, || format!("{case}: rank {r} replica {n} disagrees"))?;
        }
    }
    Ok(())
}

fn allreduce_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for p in [2usize, 4, 8] {
        let vs: Vec<Vec<i64>> = (0..p).map(|_| (0..17).map(|_| rng.random_range(-1i64 << 40..1 << 40)).collect()).collect();
        let phase = total_exchanges(p) / 2;

        let mut clean = int_job(&vs, 100 + p as u64);
        finish_int_job(&mut clean)?;
        check_sums(&clean, &vs, &format!("p={p} no faults"))?;
        let mut per_leader: BTreeMap<Option<u32>, usize> = BTreeMap::new();
        for r in clean.sim.metrics().named("exchange_step") {
            *per_leader.entry(r.node).or_default() += 1;
        }
        let log2 = p.trailing_zeros() as usize;
        ensure(per_leader.len() == p && per_leader.values().all(|c| *c == 2 * log2), || {
            format!("p={p}: exchanges per rank {per_leader:?}, expected {}", 2 * log2)
        })?;

        let mut followers = int_job(&vs, 200 + p as u64);
        ensure(followers.run_until_exchange(0, phase, SimTime(30_000)).map_err(|e| e.to_string())?, || "no exchange".into())?;
        for r in 0..p {
            let leader = followers.leader(r).ok_or("rank without leader")?;
            let victim = followers.members(r).into_iter().find(|n| *n != leader).ok_or("no follower")?;
            followers.sim.crash(victim);
        }
        finish_int_job(&mut followers)?;
        check_sums(&followers, &vs, &format!("p={p} follower kills"))?;

        let mut leaders = int_job(&vs, 300 + p as u64);
        for (k, rank) in [(0, 0), (phase, p - 1)] {
            ensure(leaders.run_until_exchange(0, k, SimTime(30_000)).map_err(|e| e.to_string())?, || "no exchange".into())?;
            let leader = leaders.leader(rank).ok_or("rank without leader")?;
            leaders.sim.crash(leader);
        }
        finish_int_job(&mut leaders)?;
        check_sums(&leaders, &vs, &format!("p={p} leader kills"))?;
        ensure(leaders.coordinator().lost().is_empty(), || format!("p={p}: a rank was dropped"))?;
    }
    Ok("P=2,4,8 bit-equal to the direct sum in all three cases; 2*log2(P) exchanges per rank".into())
}

// ---------------------------------------------------------------- Training

fn toy_job(ranks: usize, cfg: TrainConfig, steps: u64, seed: u64) -> (TrainingCollective, Mlp, Arc<Dataset>, Params) {
    let model = Mlp::new(vec![4, 8, 3]);
    let data = Arc::new(Dataset::synthetic(&model, 64, 0.05, 7));
    let init = model.init(11);
    let ledger = ChunkLedger::with_batch(data.len(), ranks, 16, steps, seed);
    let latency = LatencyModel::planar(1 + ranks * 3, 5.0, 30.0, 0.1, seed);
    let speeds: Vec<f64> = (0..ranks).map(|r| 0.5 + r as f64 * 0.25).collect();
    let c = training_collective(&model, data.clone(), &cfg, &init, ledger, &speeds, 3, latency, seed);
    (c, model, data, init)
}

fn rank_loss_deferral() -> Outcome {
    let cfg = TrainConfig { lr: 0.05, ..TrainConfig::default() };
    let (mut c, _, data, _) = toy_job(4, cfg, 40, 2);
    ensure(c.run_until_exchange(5, 1, SimTime(120_000)).map_err(|e| e.to_string())?, || "step 5 never ran".into())?;
    for n in c.members(2) {
        c.sim.crash(n);
    }
    ensure(c.run_until_done(SimTime(600_000)).map_err(|e| e.to_string())?, || "job did not finish".into())?;
    let ledger = &c.coordinator().planner;
    ensure(ledger.lost.len() == 1 && ledger.lost[0].0 == 5 && ledger.lost[0].1 == 2, || format!("lost {:?}", ledger.lost))?;
    let step5: Vec<usize> = ledger.trained.iter().filter(|t| t.step == 5).map(|t| t.rank).collect();
    ensure(!step5.is_empty() && !step5.contains(&2), || format!("step 5 committed by {step5:?}"))?;
    // every finished epoch covers each sample exactly once
    let mut epochs: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for t in &ledger.trained {
        epochs.entry(t.chunk.epoch).or_default().extend(&t.chunk.indices);
    }
    let last = *epochs.keys().next_back().ok_or("nothing trained")?;
    for (e, mut samples) in epochs {
        samples.sort_unstable();
        let unique = samples.windows(2).all(|w| w[0] != w[1]);
        ensure(unique, || format!("epoch {e} trained a sample twice"))?;
        ensure(e == last || samples == (0..data.len()).collect::<Vec<_>>(), || format!("epoch {e} is incomplete"))?;
    }
    ledger.audit()?;
    Ok(format!("step 5 finished over ranks {step5:?}; {} epochs audited", last + 1))
}

/// Plain tanh MLP forward/backward and mean-gradient SGD.
fn oracle_sgd(widths: &[usize], init: &Params, data: &Dataset, batches: &[Vec<usize>], lr: f64) -> Vec<Vec<f64>> {
    let mut w = init.layers.clone();
    for batch in batches {
        let mut grad: Vec<Vec<f64>> = w.iter().map(|l| vec![0.0; l.len()]).collect();
        for &i in batch {
            let mut acts = vec![data.inputs[i].clone()];
            for (l, d) in widths.windows(2).enumerate() {
                let a = &acts[l];
                let z: Vec<f64> =
                    (0..d[1]).map(|o| (0..d[0]).map(|k| w[l][o * d[0] + k] * a[k]).sum::<f64>() + w[l][d[0] * d[1] + o]).collect();
                let last = l == widths.len() - 2;
                acts.push(if last { z } else { z.iter().map(|v| v.tanh()).collect() });
            }
            let out = acts.last().expect("output");
            let mut delta: Vec<f64> = out.iter().zip(&data.targets[i]).map(|(y, t)| y - t).collect();
            for l in (0..widths.len() - 1).rev() {
                let (inp, outw) = (widths[l], widths[l + 1]);
                for o in 0..outw {
                    for k in 0..inp {
                        grad[l][o * inp + k] += delta[o] * acts[l][k];
                    }
                    grad[l][inp * outw + o] += delta[o];
                }
                if l > 0 {
                    delta = (0..inp)
                        .map(|k| {
                            let back: f64 = (0..outw).map(|o| w[l][o * inp + k] * delta[o]).sum();
                            back * (1.0 - acts[l][k] * acts[l][k])
                        })
                        .collect();
                }
            }
        }
        for (wl, gl) in w.iter_mut().zip(&grad) {
            for (wi, gi) in wl.iter_mut().zip(gl) {
                *wi -= lr * gi / batch.len() as f64;
            }
        }
    }
    w
}

fn sync_sgd_equivalence() -> Outcome {
    let lr = 0.05;
    let cfg = TrainConfig { lr, ..TrainConfig::default() };
    let (mut c, model, data, init) = toy_job(4, cfg, 100, 1);
    ensure(c.run_until_done(SimTime(600_000)).map_err(|e| e.to_string())?, || "job did not finish".into())?;
    c.sim.run_for(1_000).map_err(|e| e.to_string())?;
    let batches = committed_batches(&c.coordinator().planner);
    ensure(batches.len() == 100, || format!("{} steps committed", batches.len()))?;
    let oracle = oracle_sgd(&model.widths, &init, &data, &batches, lr);
    let mut worst: f64 = 0.0;
    for r in 0..4 {
        for n in c.members(r) {
            let w = &c.replica(n).task().opt.weights;
            let gap = w.layers.iter().flatten().zip(oracle.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(gap);
        }
    }
    ensure(worst <= 1e-9, || format!("max |dw| {worst:e}"))?;
    Ok(format!("100 steps, 12 replicas, max |dw| {worst:.2e} against an independent replay"))
}

fn lars_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (mut worst_form, mut worst_scale): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let len = rng.random_range(1..300);
        let w: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
        let g: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
        let trust = rng.random_range(1e-4..0.9);
        let decay = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..0.1) };
        let expect = trust * norm(&w) / (norm(&g) + decay * norm(&w));
        let got = lars_local_lr(&w, &g, trust, decay);
        worst_form = worst_form.max((got - expect).abs() / expect.max(1.0));
        // scaling weights and gradients together leaves the rate unchanged
        let k = rng.random_range(1e-3..1e3);
        let ws: Vec<f64> = w.iter().map(|x| x * k).collect();
        let gs: Vec<f64> = g.iter().map(|x| x * k).collect();
        let base = lars_local_lr(&w, &g, trust, 0.0);
        let scaled = lars_local_lr(&ws, &gs, trust, 0.0);
        worst_scale = worst_scale.max((scaled - base).abs() / base.max(1.0));
    }
    let detail = format!("closed form within {worst_form:.1e}, scale invariance within {worst_scale:.1e}");
    ensure(worst_form <= 1e-12 && worst_scale <= 1e-12, || detail.clone())?;
    Ok(detail)
}

/// Round to the nearest binary16 value, ties to even, from first principles.
fn oracle_half(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let e = x.abs().log2().floor().max(-14.0) as i32;
    let ulp = 2f64.powi(e - 10);
    let q = x / ulp;
    let mut r = q.round();
    if (q - q.trunc()).abs() == 0.5 && r % 2.0 != 0.0 {
        r -= q.signum();
    }
    let v = r * ulp;
    if v.abs() > 65504.0 {
        f64::INFINITY.copysign(x)
    } else {
        v
    }
}

fn mixed_precision() -> Outcome {
    let tiny = 2f64.powi(-30);
    ensure(round_half(tiny) == 0.0 && oracle_half(tiny) == 0.0, || "2^-30 did not underflow".into())?;
    let scaled = tiny * 2f64.powi(20);
    ensure(round_half(scaled) == scaled && oracle_half(scaled) == scaled, || "2^-10 is not representable".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20_000 {
        let x = rng.random_range(-1.0..1.0) * 2f64.powi(rng.random_range(-26..17));
        ensure(round_half(x) == oracle_half(x), || format!("binary16 rounding of {x:e}"))?;
    }
    // one training step: the gradient vanishes unscaled and survives with scaling
    let model = Mlp::new(vec![1, 1]);
    let data = Dataset { inputs: vec![vec![1.0]], targets: vec![vec![-tiny]] };
    let params = Params { layers: vec![vec![0.0, 0.0]] };
    let step = |scale: f64| {
        let cfg = TrainConfig { lr: 1.0, precision: Precision::Half, loss_scale: scale, ..TrainConfig::default() };
        train_single(&model, &data, &cfg, &params, &[vec![0]]).weights.layers[0][0]
    };
    ensure(step(1.0) == 0.0, || format!("unscaled step moved the weight to {:e}", step(1.0)))?;
    ensure(step(2f64.powi(20)) == -tiny, || format!("scaled step gave {:e}", step(2f64.powi(20))))?;
    // in f64 scaling and unscaling are neutral
    let model = Mlp::new(vec![4, 8, 3]);
    let data = Dataset::synthetic(&model, 64, 0.05, 7);
    let init = model.init(11);
    let batches: Vec<Vec<usize>> = (0..20).map(|s| (0..16).map(|i| (s * 16 + i) % 64).collect()).collect();
    let plain = TrainConfig { lr: 0.05, ..TrainConfig::default() };
    let scaled_cfg = TrainConfig { loss_scale: 2f64.powi(12), ..plain };
    let a = train_single(&model, &data, &plain, &init, &batches);
    let b = train_single(&model, &data, &scaled_cfg, &init, &batches);
    let gap = a.weights.max_abs_diff(&b.weights);
    ensure(gap <= 1e-12, || format!("scaled f64 run differs by {gap:e}"))?;
    Ok(format!("underflow and recovery as predicted; 20000 roundings match; f64 scale gap {gap:.1e}"))
}

fn compression_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..1000 {
        let len = rng.random_range(1..500);
        let k = rng.random_range(1..=len);
        let grad: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-6..4))).collect();
        let residual: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (sparse, rest) = topk_compress(&grad, k, &residual);
        ensure(sparse.indices.len() == k, || format!("case {case}: kept {} of k={k}", sparse.indices.len()))?;
        let dense = decompress(&sparse);
        for i in 0..len {
            let acc = grad[i] + residual[i];
            ensure((dense[i] + rest[i]).to_bits() == acc.to_bits(), || format!("case {case}: index {i} not reconstructed"))?;
        }
    }
    Ok("1000 random (vector, k) pairs reconstructed bit-exactly".into())
}

fn vcu_anchor() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for t in [1.0, 50.0, 100.0, 1234.5].into_iter().chain((0..1000).map(|_| rng.random_range(0.0..1e6))) {
        ensure(vcu(t, t, 1.0) == 0.5, || format!("vcu({t}, {t}, 1) = {}", vcu(t, t, 1.0)))?;
    }
    Ok("vcu(t, t, 1) == 0.5 exactly for 1004 values of t".into())
}

// ---------------------------------------------------------------- Placement

fn reinforce() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let snap = EnvSnapshot::new(
        vec![vec![0.0, 4.0, 9.0], vec![4.0, 0.0, 6.0], vec![9.0, 6.0, 0.0]],
        vec![1.5, 3.0, 2.0],
        vec![8, 8, 8],
    )
    .map_err(|e| e.to_string())?;
    let mut policy = Policy::new(3, 3);
    for t in policy.theta.iter_mut() {
        *t += rng.random_range(-0.3..0.3);
    }
    let f = snap.features(12);
    let (q, c) = ([0.2, 0.5, 0.3], 7.0);
    let (_, grad) = policy.grad_log_prob(&f, &q, c).map_err(|e| e.to_string())?;
    let h = 1e-6;
    let mut worst_fd: f64 = 0.0;
    for i in 0..policy.theta.len() {
        let (mut up, mut down) = (policy.clone(), policy.clone());
        up.theta[i] += h;
        down.theta[i] -= h;
        let numeric = (up.log_prob(&f, &q, c).unwrap() - down.log_prob(&f, &q, c).unwrap()) / (2.0 * h);
        worst_fd = worst_fd.max((numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-4));
    }
    ensure(worst_fd < 1e-4, || format!("finite-difference relative error {worst_fd:e}"))?;

    // subtracting a constant baseline leaves the estimator's mean unchanged
    let mut agent = Reinforce::new(policy, ReinforceConfig::default(), 6);
    let samples = 40_000;
    let baseline = -40.0;
    let out = agent.policy.theta.len() - 1;
    let diffs: Vec<f64> = (0..samples)
        .map(|_| {
            let a = agent.sample(&snap, 12).unwrap();
            let reward = -snap.episode_latency(&a.allocation);
            a.grad[out] * (reward - baseline) - a.grad[out] * reward
        })
        .collect();
    let mean = diffs.iter().sum::<f64>() / samples as f64;
    let se = (diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (samples - 1) as f64 / samples as f64).sqrt();
    ensure(mean.abs() <= 4.0 * se, || format!("baseline shifts the mean by {mean:e} (se {se:e})"))?;

    let env = EnvSnapshot::new(vec![vec![0.0, 2.0], vec![2.0, 0.0]], vec![1.0, 3.0], vec![32, 32]).map_err(|e| e.to_string())?;
    let (_, optimum) = env.brute_force_optimum(32).map_err(|e| e.to_string())?;
    let mut hits = 0;
    for seed in 0..20 {
        let cfg = ReinforceConfig { anneal_episodes: 2000, ..ReinforceConfig::default() };
        let mut r = Reinforce::new(Policy::new(2, seed), cfg, seed);
        let records = r.train(&env, 32, 2000).map_err(|e| e.to_string())?;
        let tail = &records[records.len() - 100..];
        let mean = tail.iter().map(|e| e.latency).sum::<f64>() / tail.len() as f64;
        hits += usize::from(mean <= 1.1 * optimum);
    }
    let elapsed = started.elapsed();
    let detail = format!(
        "fd error {worst_fd:.1e}, baseline gap {:.1} se, {hits}/20 within 10% of optimum {optimum}, {:.1}s",
        mean.abs() / se,
        elapsed.as_secs_f64()
    );
    ensure(hits >= 18 && elapsed < Duration::from_secs(120), || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- Multi-tracker

fn settle(cfg: NetworkConfig) -> Result<Network, String> {
    let mut net = Network::build(cfg).map_err(|e| e.to_string())?;
    ensure(net.run_until_registered(SimTime(60_000)).map_err(|e| e.to_string())?, || "peers did not register".into())?;
    net.run_for(60_000).map_err(|e| e.to_string())?;
    Ok(net)
}

fn wait_until(net: &mut Network, ms: u64, mut cond: impl FnMut(&Network) -> bool) -> bool {
    let deadline = net.now().0 + ms;
    while net.now().0 < deadline {
        if cond(net) {
            return true;
        }
        net.run_for(50).expect("simulation step");
    }
    cond(net)
}

/// Online, eligible peers by distance to `hash`, from a full scan.
fn closest_by_scan(net: &Network, hash: PeerId, exclude: &[NodeId]) -> Vec<NodeId> {
    let mut all: Vec<(PeerId, NodeId)> = net
        .peer_nodes()
        .iter()
        .filter(|p| net.sim.is_online(**p) && !exclude.contains(p) && !net.peer(**p).profile().coordinator)
        .filter_map(|p| net.peer(*p).peer_id().map(|id| (xor_distance(id, hash), *p)))
        .collect();
    all.sort();
    all.into_iter().map(|(_, p)| p).collect()
}

fn op_result(net: &mut Network, node: NodeId, op: Option<u64>) -> Result<OpReport, String> {
    let op = op.ok_or("origin offline")?;
    let deadline = SimTime(net.now().0 + 60_000);
    net.wait_report(node, op, deadline).map_err(|e| e.to_string())?.ok_or_else(|| "operation did not finish".into())
}

fn tracker_recovery() -> Outcome {
    // replica kill: the group refills with the closest eligible peer
    let mut net = settle(NetworkConfig::uniform(2, 50, 10, 20))?;
    let peers = net.peer_nodes().to_vec();
    let h = dataset_hash("refill");
    let created = net.create_dataset(peers[0], "refill");
    op_result(&mut net, peers[0], created)?;
    ensure(wait_until(&mut net, 10_000, |n| n.replicas(h).len() == 3), || "group never reached 3".into())?;
    let leader = net.tracker_leader(h).ok_or("no leader")?;
    let victim = *net.replicas(h).iter().find(|m| **m != leader).ok_or("no follower")?;
    net.sim.crash(victim);
    let mut expected = closest_by_scan(&net, h, &[])[..3].to_vec();
    expected.sort();
    let restored = wait_until(&mut net, 20_000, |n| {
        let mut m = n.replicas(h);
        m.sort();
        m == expected
    });
    ensure(restored, || format!("members {:?}, brute force says {expected:?}", net.replicas(h)))?;

    // total loss: the creator's snapshot reboots the group on the closest peer
    let mut cfg = NetworkConfig::uniform(2, 40, 10, 51);
    let mut params = NetParams::for_latency(vec![NodeId(0), NodeId(1)], cfg.latency.max_base());
    params.snapshot_every = 3;
    params.creator_poll_ms = 2_000;
    cfg.params = Some(params);
    let mut net = settle(cfg)?;
    let peers = net.peer_nodes().to_vec();
    let (creator, h) = (peers[0], dataset_hash("phoenix"));
    let created = net.create_dataset(creator, "phoenix");
    op_result(&mut net, creator, created)?;
    ensure(wait_until(&mut net, 10_000, |n| n.replicas(h).len() == 3), || "group never reached 3".into())?;
    let group = net.replicas(h);
    let outsiders: Vec<NodeId> = peers.iter().copied().filter(|p| !group.contains(p) && *p != creator).take(2).collect();
    for (i, p) in outsiders.iter().enumerate() {
        let op = net.contribute(*p, "phoenix", vec![(format!("part-{i}"), 5000)]);
        op_result(&mut net, *p, op)?;
    }
    net.run_for(500).map_err(|e| e.to_string())?;
    let snapshot = net.peer(creator).watch(&h).and_then(|w| w.snapshot.clone()).ok_or("creator holds no snapshot")?;
    for m in net.replicas(h) {
        net.sim.crash(m);
    }
    let rebooted = wait_until(&mut net, 30_000, |n| {
        n.peer(creator).reports().iter().any(|(_, r)| matches!(r, OpReport::Rebooted { .. }))
    });
    ensure(rebooted, || "dataset was not rebooted".into())?;
    let leader = net.tracker_leader(h).ok_or("no leader after reboot")?;
    let closest = closest_by_scan(&net, h, &group)[0];
    ensure(leader == closest, || format!("rebooted on {leader}, closest live peer is {closest}"))?;
    let meta = net.peer(leader).tracker(&h).and_then(|r| r.meta()).ok_or("leader holds no metadata")?.clone();
    ensure(meta.holder_set().is_superset(&snapshot.meta.holder_set()), || "holder set shrank".into())?;
    Ok(format!("replica replaced by brute-force closest; reboot on {leader} keeps {} holders", meta.holder_set().len()))
}

// ---------------------------------------------------------------- Determinism

fn end_to_end_determinism() -> Outcome {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/flagship.toml");
    let scenario = Scenario::load(&path).map_err(|e| e.to_string())?;
    let first = run_scenario(&scenario).map_err(|e| e.to_string())?;
    let second = run_scenario(&scenario).map_err(|e| e.to_string())?;
    ensure(first.passed(), || {
        first.assertions.iter().filter(|a| !a.passed).map(|a| format!("{}: {}", a.check, a.detail)).collect::<Vec<_>>().join("; ")
    })?;
    let (a, b) = (first.metrics_jsonl(), second.metrics_jsonl());
    ensure(a.as_bytes() == b.as_bytes(), || "metric streams differ".into())?;
    Ok(format!("{} records, {} bytes, identical", first.metrics.len(), a.len()))
}

fn main() {
    let criteria: [Criterion; 13] = [
        ("DHT scaling", dht_scaling),
        ("DHT bucket law", dht_bucket_law),
        ("Raft safety under chaos", raft_safety),
        ("all-reduce exactness", allreduce_exactness),
        ("rank-loss deferral", rank_loss_deferral),
        ("sync SGD equivalence", sync_sgd_equivalence),
        ("LARS correctness", lars_correctness),
        ("mixed precision", mixed_precision),
        ("compression identity", compression_identity),
        ("VCU anchor", vcu_anchor),
        ("REINFORCE", reinforce),
        ("multi-tracker recovery", tracker_recovery),
        ("end-to-end determinism", end_to_end_determinism),
    ];
    let filter: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let number = i + 1;
        if filter.is_some_and(|f| f != number) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {number:>2} PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {number:>2} FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
