use std::collections::BTreeSet;

use edgeflow::dist::{enumerate_schemes, ClusterDescriptor, Dimension, SyncMethod};
use edgeflow::graph::{Attrs, AxisLabel, HardwareDescriptor, OpKind, OperatorNode, TensorShape};
use edgeflow::layout::{apply_layout, build_layout, derive_access_pattern, restore_layout};
use edgeflow::mempool::{round_size, MemoryPool, SMALL_THRESHOLD};
use edgeflow::partition::partition_grid;
use edgeflow::tensor::Tensor;
use proptest::prelude::*;

fn consumer(choice: usize, c: usize) -> OperatorNode {
    let conv = |r: usize, stride: usize, pad: usize| {
        OperatorNode::new("consumer", OpKind::Conv)
            .with_attrs(Attrs { stride, pad, groups: 1, ..Attrs::default() })
            .with_param("weight", TensorShape::new(&[(AxisLabel::K, 2), (AxisLabel::C, c), (AxisLabel::R, r), (AxisLabel::S, r)]))
    };
    let pool = |kind, k, s| OperatorNode::new("consumer", kind).with_attrs(Attrs::pool(k, s));
    match choice {
        0 => conv(1, 1, 0),
        1 => conv(1, 2, 0),
        2 => conv(3, 1, 1),
        3 => conv(3, 2, 1),
        4 => conv(5, 1, 2),
        5 => pool(OpKind::Avgpool, 2, 2),
        6 => pool(OpKind::Maxpool, 3, 3),
        _ => pool(OpKind::Maxpool, 3, 2),
    }
}

fn factorial(n: usize) -> usize {
    (1..=n).product()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn layout_is_a_lossless_injective_placement(
        c in 1usize..6, h in 1usize..14, w in 1usize..14, choice in 0usize..8, seed in any::<u64>()
    ) {
        let shape = TensorShape::chw(c, h, w);
        let cons = consumer(choice, c);
        let Ok(pattern) = derive_access_pattern(&cons, &shape) else { return Ok(()) };
        let layout = build_layout(&OperatorNode::new("producer", OpKind::Relu), &shape, &pattern).unwrap();
        let placed = layout.placement();
        let homes: Vec<usize> = placed.home.iter().map(|o| o.unwrap()).collect();
        prop_assert_eq!(homes.iter().collect::<BTreeSet<_>>().len(), shape.elements());
        prop_assert!(homes.iter().all(|&o| o < placed.len));
        prop_assert_eq!(layout.buffer_bytes, placed.len as u64 * shape.dtype.width());

        let t = Tensor::random(shape.clone(), seed);
        let buf = apply_layout(&t, &layout);
        prop_assert_eq!(restore_layout(&buf, &layout).data, t.data.clone());
        for (v, &off) in pattern.visits().iter().zip(&placed.trace) {
            prop_assert_eq!(buf[off], t.data[t.index(v.c, v.h, v.w)]);
        }
    }

    #[test]
    fn dropping_unread_elements_keeps_every_read(
        c in 1usize..5, h in 1usize..12, w in 1usize..12, choice in 0usize..8, seed in any::<u64>()
    ) {
        let shape = TensorShape::chw(c, h, w);
        let cons = consumer(choice, c);
        let Ok(pattern) = derive_access_pattern(&cons, &shape) else { return Ok(()) };
        let full = build_layout(&OperatorNode::new("producer", OpKind::Relu), &shape, &pattern).unwrap();
        let lean = full.clone().without_unread();
        prop_assert!(lean.buffer_bytes <= full.buffer_bytes);
        let t = Tensor::random(shape.clone(), seed);
        let buf = apply_layout(&t, &lean);
        prop_assert_eq!(buf.len() as u64 * shape.dtype.width(), lean.buffer_bytes);
        let back = restore_layout(&buf, &lean);
        let read: BTreeSet<(usize, usize, usize)> = pattern.visits().iter().map(|v| (v.c, v.h, v.w)).collect();
        for (ci, hi, wi) in read {
            prop_assert_eq!(back.data[t.index(ci, hi, wi)], t.data[t.index(ci, hi, wi)]);
        }
    }

    #[test]
    fn partition_covers_each_output_once(
        k in 1usize..40, h in 1usize..40, w in 1usize..40, p in 1usize..17, seed in any::<u64>()
    ) {
        let scheme = partition_grid(&consumer(2, 3), (k, h, w), p, seed);
        prop_assert_eq!(scheme.units(), p);
        let mut seen = vec![0u8; k * h * w];
        for unit in &scheme.per_unit {
            for item in &unit.work {
                for a in item.k.0..item.k.1 {
                    for b in item.h.0..item.h.1 {
                        for d in item.w.0..item.w.1 {
                            seen[(a * h + b) * w + d] += 1;
                        }
                    }
                }
            }
        }
        prop_assert!(seen.iter().all(|&n| n == 1));
        let units: Vec<usize> = scheme.remainder_assignments.iter().map(|&(_, u)| u).collect();
        for chunk in units.chunks(p) {
            prop_assert_eq!(chunk.iter().collect::<BTreeSet<_>>().len(), chunk.len());
        }
    }

    #[test]
    fn pool_never_overlaps_and_conserves_bytes(
        ops in prop::collection::vec((any::<bool>(), 1u64..300_000, any::<prop::sample::Index>()), 1..300)
    ) {
        let mut pool = MemoryPool::empty(4 * 1024 * 1024);
        let mut live = Vec::new();
        for (alloc, size, pick) in ops {
            if alloc || live.is_empty() {
                if let Ok(id) = if size <= SMALL_THRESHOLD && size % 3 == 0 {
                    pool.batch_allocate(&[size, size / 3 + 1]).map(|(id, _)| id)
                } else {
                    pool.allocate(size)
                } {
                    prop_assert!(!live.contains(&id));
                    live.push(id);
                }
            } else {
                let id = live.swap_remove(pick.index(live.len()));
                prop_assert!(pool.release(id).is_ok());
                prop_assert!(pool.release(id).is_err());
            }
            let mut ranges: Vec<(u64, u64)> = pool.chunks().iter().map(|c| (c.offset, c.offset + c.size)).collect();
            ranges.sort();
            prop_assert!(ranges.windows(2).all(|r| r[0].1 <= r[1].0));
            prop_assert_eq!(pool.reserved_bytes(), pool.live_bytes() + pool.free_bytes());
            prop_assert_eq!(pool.chunks().iter().map(|c| c.size).sum::<u64>(), pool.reserved_bytes());
            prop_assert!(pool.reserved_bytes() <= pool.capacity);
        }
    }

    #[test]
    fn rounding_covers_the_request_and_is_monotone(a in 1u64..10_000_000, b in 1u64..10_000_000) {
        prop_assert!(round_size(a) >= a);
        prop_assert!(round_size(a) < 2 * a.max(4096));
        if a <= b {
            prop_assert!(round_size(a) <= round_size(b));
        }
    }

    #[test]
    fn orderings_are_all_distinct_permutations(mask in 1u8..32) {
        let all = [Dimension::OutC, Dimension::InH, Dimension::InW, Dimension::M, Dimension::N];
        let dset: Vec<Dimension> = all.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, d)| *d).collect();
        let schemes = enumerate_schemes(&dset);
        prop_assert_eq!(schemes.len(), factorial(dset.len()));
        prop_assert_eq!(schemes.iter().collect::<BTreeSet<_>>().len(), schemes.len());
        let want: BTreeSet<_> = dset.iter().collect();
        for s in &schemes {
            prop_assert_eq!(s.iter().collect::<BTreeSet<_>>(), want.clone());
        }
    }

    #[test]
    fn ring_sync_is_cheaper_than_parameter_server(n in 2usize..=16, bytes in 1024u64..100_000_000, bw in 1.0f64..128.0) {
        let ring = ClusterDescriptor::new(n, HardwareDescriptor::default(), bw, SyncMethod::RingAllReduce);
        let ps = ring.with_sync(SyncMethod::ParameterServer);
        prop_assert!(ring.sync_cycles(bytes) < ps.sync_cycles(bytes));
    }
}
