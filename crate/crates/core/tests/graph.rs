use std::collections::HashSet;

use eeg_tgat::dsp::Segment;
use eeg_tgat::graph::*;
use eeg_tgat::Error;
use proptest::prelude::*;

fn segment(c: usize, w: usize, seed: f64, label: usize) -> Segment {
    Segment {
        samples: (0..c).map(|i| (0..w).map(|t| (seed + i as f64 * 0.37 + t as f64 * 0.011).sin()).collect()).collect(),
        label,
        trial_id: seed as u64,
        subject_id: 1,
        segment_index: 0,
    }
}

#[test]
fn eight_channels_give_sixty_four_edges() {
    let g = build_graph(&segment(8, 16, 1.0, 0));
    assert_eq!(g.edges.len(), 64);
    let set: HashSet<_> = g.edges.iter().copied().collect();
    assert_eq!(set.len(), 64);
    for &(i, j) in &g.edges {
        assert!(set.contains(&(j, i)));
    }
    for v in 0..8 {
        assert_eq!(g.edges.iter().filter(|e| e.0 == v).count(), 8);
        assert_eq!(g.edges.iter().filter(|e| e.1 == v).count(), 8);
    }
}

#[test]
fn single_channel_has_one_self_loop() {
    let g = build_graph(&segment(1, 4, 0.0, 1));
    assert_eq!(g.edges, vec![(0, 0)]);
}

#[test]
fn features_are_copied() {
    let s = segment(3, 5, 2.0, 1);
    let g = build_graph(&s);
    assert_eq!(g.node_features, s.samples);
    assert_eq!((g.label, g.trial_id, g.subject_id), (1, 2, 1));
}

#[test]
fn two_graphs_offset_by_eight() {
    let a = build_graph(&segment(8, 16, 1.0, 0));
    let b = build_graph(&segment(8, 16, 2.0, 1));
    let batch = batch_graphs(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(batch.n_nodes(), 16);
    assert_eq!(batch.edges.len(), 128);
    assert_eq!(batch.offsets, vec![0, 8]);
    let expected: Vec<_> = b.edges.iter().map(|&(s, d)| (s + 8, d + 8)).collect();
    assert_eq!(&batch.edges[64..], expected.as_slice());
    assert_eq!(batch.labels, vec![0, 1]);
    assert!(batch.membership.windows(2).all(|w| w[0] <= w[1]));
    for &(s, d) in &batch.edges {
        assert_eq!(batch.membership[s], batch.membership[d]);
    }
}

#[test]
fn batch_of_one_is_identity() {
    let a = build_graph(&segment(4, 8, 3.0, 0));
    let batch = batch_graphs(std::slice::from_ref(&a)).unwrap();
    assert_eq!(batch.offsets, vec![0]);
    assert_eq!(batch.edges, a.edges);
}

#[test]
fn heterogeneous_channel_counts_rejected() {
    let a = build_graph(&segment(4, 8, 3.0, 0));
    let b = build_graph(&segment(5, 8, 3.0, 0));
    assert!(matches!(batch_graphs(&[a, b]), Err(Error::Shape(_))));
}

proptest! {
    #[test]
    fn batch_round_trip(c in 1usize..6, w in 1usize..10, n in 1usize..5) {
        let gs: Vec<_> = (0..n).map(|i| build_graph(&segment(c, w, i as f64, i % 2))).collect();
        let batch = batch_graphs(&gs).unwrap();
        prop_assert_eq!(unbatch(&batch), gs);
    }
}
