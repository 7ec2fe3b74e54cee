//! Recursive halving/doubling schedule, independent of transport.
//!
//! Exchange `k` of a `p`-slot collective is scatter step `k` for
//! `k < log2(p)` and gather step `k - log2(p)` afterwards. Partners are
//! `slot ^ B`, with `B = p/2` halving through the scatter and `B = 1`
//! doubling through the gather. In a scatter step the lower slot of each
//! pair keeps the bottom half of its current range and sends the top half.

use std::ops::Range;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    ScatterReduce,
    AllGather,
}

/// log2 of a power of two.
pub fn steps_per_phase(p: usize) -> usize {
    assert!(p.is_power_of_two(), "slot count {p} is not a power of two");
    p.trailing_zeros() as usize
}

/// Exchanges in a full collective.
pub fn total_exchanges(p: usize) -> usize {
    2 * steps_per_phase(p)
}

/// Phase and within-phase step of exchange `k`.
pub fn exchange_phase(p: usize, k: usize) -> (Phase, usize) {
    let l = steps_per_phase(p);
    if k < l {
        (Phase::ScatterReduce, k)
    } else {
        (Phase::AllGather, k - l)
    }
}

/// Partner distance `B` at a phase step.
pub fn distance(p: usize, phase: Phase, step: usize) -> usize {
    match phase {
        Phase::ScatterReduce => p >> (step + 1),
        Phase::AllGather => 1 << step,
    }
}

/// Partner of `slot`; an involution for every step.
pub fn partner(slot: usize, p: usize, phase: Phase, step: usize) -> usize {
    slot ^ distance(p, phase, step)
}

/// What a slot sends and where the reply lands at exchange `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExchangePlan {
    pub partner: usize,
    pub phase: Phase,
    pub send: Range<usize>,
    pub receive: Range<usize>,
}

/// Range of a `len`-element vector (`len` divisible by `p`) that `slot`
/// holds authoritatively before exchange `k`.
pub fn owned_before(slot: usize, p: usize, len: usize, k: usize) -> Range<usize> {
    let l = steps_per_phase(p);
    let mut range = 0..len;
    for s in 0..k.min(l) {
        let b = distance(p, Phase::ScatterReduce, s);
        let mid = range.start + (range.end - range.start) / 2;
        range = if slot & b == 0 { range.start..mid } else { mid..range.end };
    }
    for s in 0..k.saturating_sub(l) {
        let width = range.end - range.start;
        let b = distance(p, Phase::AllGather, s);
        range = if slot & b == 0 { range.start..range.end + width } else { range.start - width..range.end };
    }
    range
}

pub fn plan(slot: usize, p: usize, len: usize, k: usize) -> ExchangePlan {
    let (phase, step) = exchange_phase(p, k);
    let partner = partner(slot, p, phase, step);
    let owned = owned_before(slot, p, len, k);
    match phase {
        Phase::ScatterReduce => {
            let mid = owned.start + (owned.end - owned.start) / 2;
            let (keep, send) =
                if slot < partner { (owned.start..mid, mid..owned.end) } else { (mid..owned.end, owned.start..mid) };
            ExchangePlan { partner, phase, send, receive: keep }
        }
        Phase::AllGather => {
            let receive = owned_before(partner, p, len, k);
            ExchangePlan { partner, phase, send: owned, receive }
        }
    }
}

/// Smallest multiple of `p` that holds `len` elements.
pub fn padded_len(len: usize, p: usize) -> usize {
    len.div_ceil(p) * p
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairs(p: usize, phase: Phase, step: usize) -> Vec<(usize, usize)> {
        (0..p).map(|i| (i, partner(i, p, phase, step))).filter(|(a, b)| a < b).collect()
    }

    #[test]
    fn four_slot_pairs() {
        assert_eq!(pairs(4, Phase::ScatterReduce, 0), vec![(0, 2), (1, 3)]);
        assert_eq!(pairs(4, Phase::ScatterReduce, 1), vec![(0, 1), (2, 3)]);
        assert_eq!(pairs(4, Phase::AllGather, 0), vec![(0, 1), (2, 3)]);
        assert_eq!(pairs(4, Phase::AllGather, 1), vec![(0, 2), (1, 3)]);
        assert_eq!(total_exchanges(8), 6);
        assert_eq!(total_exchanges(1), 0);
    }

    #[test]
    fn two_slot_split() {
        let lo = plan(0, 2, 2, 0);
        assert_eq!((lo.send, lo.receive), (1..2, 0..1));
        let hi = plan(1, 2, 2, 0);
        assert_eq!((hi.send, hi.receive), (0..1, 1..2));
    }

    /// Runs the schedule on plain vectors, lockstep.
    fn simulate(inputs: &[Vec<i64>]) -> Vec<Vec<i64>> {
        let p = inputs.len();
        let len = inputs[0].len();
        let mut state = inputs.to_vec();
        for k in 0..total_exchanges(p) {
            let plans: Vec<ExchangePlan> = (0..p).map(|s| plan(s, p, len, k)).collect();
            let sent: Vec<Vec<i64>> = (0..p).map(|s| state[s][plans[s].send.clone()].to_vec()).collect();
            for s in 0..p {
                let seg = &sent[plans[s].partner];
                let recv = plans[s].receive.clone();
                assert_eq!(seg.len(), recv.len());
                for (i, v) in recv.zip(seg) {
                    state[s][i] = match plans[s].phase {
                        Phase::ScatterReduce => state[s][i] + v,
                        Phase::AllGather => *v,
                    };
                }
            }
        }
        state
    }

    proptest! {
        #[test]
        fn pairing_is_an_involution(log_p in 0usize..6, k in 0usize..12) {
            let p = 1 << log_p;
            prop_assume!(k < total_exchanges(p));
            let (phase, step) = exchange_phase(p, k);
            for i in 0..p {
                prop_assert_eq!(partner(partner(i, p, phase, step), p, phase, step), i);
                prop_assert_ne!(partner(i, p, phase, step), i);
            }
        }

        #[test]
        fn schedule_computes_the_sum(log_p in 0usize..5, blocks in 1usize..4, seed in any::<u64>()) {
            let p = 1 << log_p;
            let len = p * blocks;
            let mut x = seed;
            let inputs: Vec<Vec<i64>> = (0..p)
                .map(|_| (0..len).map(|_| { x = x.wrapping_mul(6364136223846793005).wrapping_add(1); (x >> 40) as i64 - 8_000_000 }).collect())
                .collect();
            let sum: Vec<i64> = (0..len).map(|i| inputs.iter().map(|v| v[i]).sum()).collect();
            for out in simulate(&inputs) {
                prop_assert_eq!(&out, &sum);
            }
        }

        #[test]
        fn scatter_leaves_disjoint_segments(log_p in 1usize..6) {
            let p = 1 << log_p;
            let len = 3 * p;
            let l = steps_per_phase(p);
            let mut covered = vec![0; len];
            for s in 0..p {
                let r = owned_before(s, p, len, l);
                prop_assert_eq!(r.end - r.start, 3);
                for i in r { covered[i] += 1; }
                prop_assert_eq!(owned_before(s, p, len, 2 * l), 0..len);
            }
            prop_assert!(covered.iter().all(|c| *c == 1));
        }
    }
}
