use hydra_core::coin::RewardKind;
use hydra_core::dht::{xor_distance, PeerId};
use hydra_core::network::{Network, NetworkConfig, PeerProfile};
use hydra_core::registry::{dataset_hash, DownloadReport, OpReport, CHUNK_SIZE};
use hydra_core::sim::{NodeId, SimTime};

/// Time for periodic self-lookups to settle routing tables after joining.
const SETTLE_MS: u64 = 60_000;

fn settled(cfg: NetworkConfig) -> Network {
    let mut net = Network::build(cfg).unwrap();
    assert!(net.run_until_registered(SimTime(60_000)).unwrap());
    net.run_for(SETTLE_MS).unwrap();
    net
}

fn network(peers: usize, seed: u64) -> Network {
    settled(NetworkConfig::uniform(2, peers, 10, seed))
}

fn wait(net: &mut Network, node: NodeId, op: u64) -> OpReport {
    let deadline = SimTime(net.now().0 + 60_000);
    net.wait_report(node, op, deadline).unwrap().expect("operation finished")
}

/// Online, eligible peers sorted by distance to `hash`, by exhaustive scan.
fn closest_by_scan(net: &Network, hash: PeerId, exclude: &[NodeId]) -> Vec<NodeId> {
    let mut all: Vec<(PeerId, NodeId)> = net
        .peer_nodes()
        .iter()
        .filter(|p| net.sim.is_online(**p) && !exclude.contains(p))
        .filter(|p| !net.peer(**p).profile().coordinator)
        .filter_map(|p| net.peer(*p).peer_id().map(|id| (xor_distance(id, hash), *p)))
        .collect();
    all.sort();
    all.into_iter().map(|(_, p)| p).collect()
}

fn run_until(net: &mut Network, ms: u64, mut cond: impl FnMut(&Network) -> bool) -> bool {
    let deadline = net.now().0 + ms;
    while net.now().0 < deadline {
        if cond(net) {
            return true;
        }
        net.run_for(50).unwrap();
    }
    cond(net)
}

fn created(net: &mut Network, creator: NodeId, title: &str) -> NodeId {
    let op = net.create_dataset(creator, title).unwrap();
    match wait(net, creator, op) {
        OpReport::Created { leader, .. } => leader,
        other => panic!("create failed: {other:?}"),
    }
}

fn download(net: &mut Network, node: NodeId, title: &str) -> DownloadReport {
    let op = net.download(node, title).unwrap();
    match wait(net, node, op) {
        OpReport::Downloaded(r) => r,
        other => panic!("download failed: {other:?}"),
    }
}

#[test]
fn induction_issues_unique_ids_and_replicates_registry() {
    let net = network(100, 1);
    let ids: std::collections::BTreeSet<PeerId> =
        net.peer_nodes().iter().map(|p| net.peer(*p).peer_id().unwrap()).collect();
    assert_eq!(ids.len(), 100);
    assert!(net.server(0).state.same_registry(&net.server(1).state));
    let last = *net.peer_nodes().last().unwrap();
    assert!(net.peer(last).dht().unwrap().table().len() >= 3);
}

#[test]
fn tracker_is_closest_peer_and_titles_are_unique() {
    for seed in 0..4 {
        let mut net = network(50, 10 + seed);
        let creator = net.peer_nodes()[7];
        let title = format!("dataset-{seed}");
        let leader = created(&mut net, creator, &title);
        let expected = closest_by_scan(&net, dataset_hash(&title), &[])[0];
        assert_eq!(leader, expected, "seed {seed}");
        let other = net.peer_nodes()[20];
        let op = net.create_dataset(other, &title).unwrap();
        match wait(&mut net, other, op) {
            OpReport::Failed { reason, .. } => assert_eq!(reason, "dataset exists"),
            r => panic!("duplicate create succeeded: {r:?}"),
        }
    }
}

#[test]
fn contribution_survives_leader_crash_exactly_once() {
    let mut net = network(40, 3);
    let peers = net.peer_nodes().to_vec();
    let h = dataset_hash("crashy");
    created(&mut net, peers[0], "crashy");
    assert!(run_until(&mut net, 10_000, |n| n.replicas(h).len() == 3));
    let leader = net.tracker_leader(h).unwrap();
    let files = vec![("img-0".to_string(), 3 * CHUNK_SIZE), ("img-1".to_string(), 17)];
    let contributor = *peers.iter().find(|p| !net.replicas(h).contains(p) && **p != peers[0]).unwrap();
    let op = net.contribute(contributor, "crashy", files).unwrap();
    // Crash the leader while the request is in flight.
    net.run_for(3).unwrap();
    net.sim.crash(leader);
    let report = wait(&mut net, contributor, op);
    assert!(matches!(report, OpReport::Contributed { .. }), "{report:?}");
    let new_leader = net.tracker_leader(h).unwrap();
    assert_ne!(new_leader, leader);
    let meta = net.peer(new_leader).tracker(&h).unwrap().meta().unwrap().clone();
    assert_eq!(meta.files.len(), 2);
    assert_eq!(meta.contributors.len(), 1);
    assert_eq!(meta.version, 2);
    assert!(meta.files.iter().all(|f| f.holders.len() == 1));
}

#[test]
fn download_switches_holder_after_crash_and_pays_seeders() {
    let mut net = network(40, 4);
    let peers = net.peer_nodes().to_vec();
    created(&mut net, peers[0], "pics");
    let size = 40 * CHUNK_SIZE;
    for holder in [peers[1], peers[2]] {
        let op = net.contribute(holder, "pics", vec![("big".into(), size)]).unwrap();
        assert!(matches!(wait(&mut net, holder, op), OpReport::Contributed { .. }));
    }
    let op = net.download(peers[3], "pics").unwrap();
    // Let some chunks arrive, then drop the first holder.
    let h = dataset_hash("pics");
    assert!(run_until(&mut net, 5_000, |n| n.peer(peers[3]).view(&h).is_some()));
    net.run_for(40).unwrap();
    net.sim.crash(peers[1]);
    let r = match wait(&mut net, peers[3], op) {
        OpReport::Downloaded(r) => r,
        other => panic!("{other:?}"),
    };
    assert_eq!(r.complete, vec!["big".to_string()]);
    assert!(!r.reduced);
    assert_eq!(r.bytes, size);
    let second = net.peer(peers[2]).peer_id().unwrap();
    assert!(r.per_holder[&second] > 0);
    net.run_for(5_000).unwrap();
    let leader = net.tracker_leader(h).unwrap();
    let meta = net.peer(leader).tracker(&h).unwrap().meta().unwrap();
    let me = net.peer(peers[3]).peer_id().unwrap();
    assert!(meta.downloaders.iter().any(|c| c.peer_id == me));
    assert!(meta.file("big").unwrap().holds(me));
    // Seeding pays bytes delivered at the seeding rate, exactly.
    let ledger = net.ledger();
    let paid = ledger.total(RewardKind::Seeding);
    let rate = ledger.rate_amount(RewardKind::Seeding, hydra_core::coin::Basis::Bytes(size)).unwrap();
    assert_eq!(paid, rate);
}

#[test]
fn download_with_all_holders_offline_is_reduced() {
    let mut net = network(30, 5);
    let peers = net.peer_nodes().to_vec();
    created(&mut net, peers[0], "gone");
    let op = net.contribute(peers[1], "gone", vec![("x".into(), 1000)]).unwrap();
    wait(&mut net, peers[1], op);
    net.sim.crash(peers[1]);
    let r = download(&mut net, peers[2], "gone");
    assert!(r.reduced);
    assert_eq!(r.unavailable, vec!["x".to_string()]);
    assert_eq!(r.bytes, 0);
}

#[test]
fn crashed_replica_is_replaced_by_closest_eligible_peer() {
    for seed in 0..3 {
        let mut net = network(50, 20 + seed);
        let peers = net.peer_nodes().to_vec();
        let title = format!("rep-{seed}");
        let h = dataset_hash(&title);
        created(&mut net, peers[0], &title);
        assert!(run_until(&mut net, 10_000, |n| n.replicas(h).len() == 3));
        let members = net.replicas(h);
        assert_eq!(members, closest_by_scan(&net, h, &[])[..3].to_vec(), "initial group, seed {seed}");
        let leader = net.tracker_leader(h).unwrap();
        let victim = *members.iter().find(|m| **m != leader).unwrap();
        net.sim.crash(victim);
        let expected: Vec<NodeId> = closest_by_scan(&net, h, &[])[..3].to_vec();
        assert!(
            run_until(&mut net, 20_000, |n| {
                let mut m = n.replicas(h);
                m.sort();
                let mut e = expected.clone();
                e.sort();
                m == e
            }),
            "seed {seed}: members {:?}, expected {:?}",
            net.replicas(h),
            expected
        );
    }
}

#[test]
fn leader_crash_restores_group_and_updates_bootstrap() {
    let mut net = network(50, 31);
    let peers = net.peer_nodes().to_vec();
    let h = dataset_hash("twice");
    created(&mut net, peers[0], "twice");
    assert!(run_until(&mut net, 10_000, |n| n.replicas(h).len() == 3));
    for _ in 0..2 {
        let leader = net.tracker_leader(h).unwrap();
        net.sim.crash(leader);
        assert!(run_until(&mut net, 20_000, |n| n.tracker_leader(h).is_some_and(|l| l != leader)
            && n.replicas(h).len() == 3
            && !n.replicas(h).contains(&leader)));
        net.run_for(1_000).unwrap();
        let now_leader = net.tracker_leader(h).unwrap();
        for b in 0..2 {
            let rec = net.server(b).state.record(h).unwrap();
            assert_eq!(rec.leader, now_leader);
        }
    }
}

#[test]
fn coordinators_never_host_trackers() {
    let mut cfg = NetworkConfig::uniform(2, 30, 10, 41);
    for p in cfg.peers.iter_mut() {
        p.coordinator = true;
    }
    cfg.peers[0] = PeerProfile::default();
    cfg.peers[29] = PeerProfile { join_at_ms: 290, ..PeerProfile::default() };
    let mut net = settled(cfg);
    let peers = net.peer_nodes().to_vec();
    let h = dataset_hash("coord");
    let leader = created(&mut net, peers[0], "coord");
    assert!(leader == peers[0] || leader == peers[29]);
    net.run_for(10_000).unwrap();
    let mut hosts = net.hosts(h);
    hosts.sort();
    assert_eq!(hosts, vec![peers[0], peers[29]]);
    let r = net.peer(net.tracker_leader(h).unwrap()).tracker(&h).unwrap();
    assert!(r.degraded());
}

#[test]
fn total_loss_reboots_from_snapshot_and_merges_views() {
    let mut cfg = NetworkConfig::uniform(2, 40, 10, 51);
    let mut params = hydra_core::network::NetParams::for_latency(vec![NodeId(0), NodeId(1)], cfg.latency.max_base());
    params.snapshot_every = 3;
    params.creator_poll_ms = 2_000;
    cfg.params = Some(params);
    let mut net = settled(cfg);
    let peers = net.peer_nodes().to_vec();
    let h = dataset_hash("phoenix");
    let creator = peers[0];
    created(&mut net, creator, "phoenix");
    assert!(run_until(&mut net, 10_000, |n| n.replicas(h).len() == 3));
    let group = net.replicas(h);
    let mut outsiders = peers.iter().copied().filter(|p| !group.contains(p) && *p != creator);
    let (a, b, c) = (outsiders.next().unwrap(), outsiders.next().unwrap(), outsiders.next().unwrap());
    // Versions 2 and 3; the push at version 3 is the snapshot.
    for (p, f) in [(a, "f-a"), (b, "f-b")] {
        let op = net.contribute(p, "phoenix", vec![(f.into(), 5000)]).unwrap();
        wait(&mut net, p, op);
    }
    net.run_for(500).unwrap();
    let snap = net.peer(creator).watch(&h).unwrap().snapshot.clone().unwrap();
    assert_eq!(snap.meta.version, 3);
    // Versions 4 and 5 exist only on the old group and in c's view.
    download(&mut net, c, "phoenix");
    net.run_for(2_000).unwrap();
    let carried = net.peer(c).view(&h).unwrap().clone();
    assert!(carried.version > snap.meta.version);
    let live = net.peer(net.tracker_leader(h).unwrap()).tracker(&h).unwrap().meta().unwrap().clone();
    assert!(live.version > snap.meta.version);
    for m in net.replicas(h) {
        net.sim.crash(m);
    }
    assert!(run_until(&mut net, 30_000, |n| n
        .peer(creator)
        .reports()
        .iter()
        .any(|(_, r)| matches!(r, OpReport::Rebooted { .. }))));
    let leader = net.tracker_leader(h).unwrap();
    assert!(!group.contains(&leader));
    assert_eq!(leader, closest_by_scan(&net, h, &group)[0]);
    // c downloads again, carrying its newer view.
    download(&mut net, c, "phoenix");
    net.run_for(3_000).unwrap();
    let leader = net.tracker_leader(h).unwrap();
    let merged = net.peer(leader).tracker(&h).unwrap().meta().unwrap().clone();
    assert!(merged.holder_set().is_superset(&snap.meta.holder_set()));
    assert!(merged.holder_set().is_superset(&live.holder_set()));
    // Merge rule: one past the newest version seen.
    assert!(merged.version > carried.version);
}

#[test]
fn losing_creator_and_group_loses_dataset() {
    let mut cfg = NetworkConfig::uniform(2, 30, 10, 61);
    let mut params = hydra_core::network::NetParams::for_latency(vec![NodeId(0), NodeId(1)], cfg.latency.max_base());
    params.audit_ms = 1_000;
    params.lost_grace_ms = 3_000;
    cfg.params = Some(params);
    let mut net = settled(cfg);
    let peers = net.peer_nodes().to_vec();
    let h = dataset_hash("doomed");
    created(&mut net, peers[0], "doomed");
    assert!(run_until(&mut net, 10_000, |n| n.replicas(h).len() == 3));
    net.sim.crash(peers[0]);
    for m in net.replicas(h) {
        net.sim.crash(m);
    }
    assert!(run_until(&mut net, 20_000, |n| n.sim.metrics().count("dataset_lost") > 0));
    assert!(net.server(0).state.record(h).unwrap().lost);
    assert!(run_until(&mut net, 5_000, |n| n.server(1).state.record(h).unwrap().lost));
}
