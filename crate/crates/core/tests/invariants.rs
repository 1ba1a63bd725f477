use proptest::prelude::*;

use crossat::config::RunConfig;
use crossat::datamodel::{Dataset, FeatureRecord, Modality, WordTable};
use crossat::eval::{average_precision, average_precision_at, precision_at_k};
use crossat::network::TernaryCode;
use crossat::retrieval::{hamming_distance, top_k, Hit, PackedTrits};
use crossat::semantics::build_semantic_graph;

fn trits(len: usize) -> impl Strategy<Value = Vec<i8>> {
    prop::collection::vec(-1i8..=1, len)
}

fn code_triple() -> impl Strategy<Value = (Vec<i8>, Vec<i8>, Vec<i8>)> {
    (1usize..200).prop_flat_map(|d| (trits(d), trits(d), trits(d)))
}

fn code(t: &[i8]) -> TernaryCode {
    TernaryCode::new(t.to_vec()).unwrap()
}

fn word_table(points: &[Vec<f64>]) -> WordTable {
    WordTable::new(points.iter().enumerate().map(|(i, p)| (format!("w{i}"), p.clone())).collect()).unwrap()
}

fn points() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..9, 1usize..6).prop_flat_map(|(c, d)| prop::collection::vec(prop::collection::vec(-5.0..5.0f64, d), c))
}

proptest! {
    #[test]
    fn hamming_is_a_metric((a, b, c) in code_triple()) {
        let (a, b, c) = (code(&a), code(&b), code(&c));
        let h = |x: &TernaryCode, y: &TernaryCode| hamming_distance(x, y).unwrap();
        prop_assert_eq!(h(&a, &a), 0);
        prop_assert_eq!(h(&a, &b) == 0, a == b);
        prop_assert_eq!(h(&a, &b), h(&b, &a));
        prop_assert!(h(&a, &c) <= h(&a, &b) + h(&b, &c));
    }

    #[test]
    fn packed_distance_counts_unequal_trits((a, b, _) in code_triple()) {
        let naive = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        prop_assert_eq!(PackedTrits::pack(&a).distance(&PackedTrits::pack(&b)).unwrap(), naive);
    }

    #[test]
    fn average_precision_bounds(rel in prop::collection::vec(any::<bool>(), 1..80), extra in 0usize..4) {
        let hits = rel.iter().filter(|&&r| r).count();
        prop_assume!(hits + extra > 0);
        let ap = average_precision(&rel, hits + extra).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
        let mut sorted = rel.clone();
        sorted.sort_by(|a, b| b.cmp(a));
        let best = average_precision(&sorted, hits + extra).unwrap();
        prop_assert!(ap <= best + 1e-15);
        if extra == 0 {
            prop_assert!((best - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cutoff_beyond_length_matches_full_ranking(rel in prop::collection::vec(any::<bool>(), 1..60)) {
        let hits = rel.iter().filter(|&&r| r).count();
        prop_assume!(hits > 0);
        let full = average_precision(&rel, hits).unwrap();
        let cut = average_precision_at(&rel, hits, Some(rel.len())).unwrap();
        prop_assert_eq!(full, cut);
    }

    #[test]
    fn precision_at_k_counts_prefix(rel in prop::collection::vec(any::<bool>(), 0..60), k in 1usize..80) {
        let p = precision_at_k(&rel, k);
        let want = rel.iter().take(k).filter(|&&r| r).count() as f64 / k as f64;
        prop_assert_eq!(p, want);
    }

    #[test]
    fn top_k_is_a_sorted_prefix(dists in prop::collection::vec(0u8..20, 0..50), k in 0usize..60) {
        let hits: Vec<Hit> = dists
            .iter()
            .enumerate()
            .map(|(i, &d)| Hit { id: format!("h{i:03}"), label: "c".into(), distance: d as f64 })
            .collect();
        let mut sorted = hits.clone();
        sorted.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.id.cmp(&b.id)));
        sorted.truncate(k);
        prop_assert_eq!(top_k(hits, k), sorted);
    }

    #[test]
    fn spanning_tree_is_scale_invariant(pts in points(), scale in 0.1..20.0f64) {
        let g = build_semantic_graph(&word_table(&pts)).unwrap();
        let scaled: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|v| v * scale).collect()).collect();
        let gs = build_semantic_graph(&word_table(&scaled)).unwrap();
        prop_assert_eq!(g.edges().len(), pts.len() - 1);
        prop_assert!((gs.total_weight() - scale * g.total_weight()).abs() <= 1e-9 * (1.0 + gs.total_weight()));
        let adj = g.adjacency();
        for i in 0..pts.len() {
            prop_assert_eq!(adj.get(i, i), 0.0);
            let degree: f64 = (0..pts.len()).map(|j| adj.get(i, j)).sum();
            prop_assert!(degree >= 1.0);
            for j in 0..pts.len() {
                prop_assert_eq!(adj.get(i, j), adj.get(j, i));
            }
        }
    }

    #[test]
    fn normalized_adjacency_is_symmetric(pts in points()) {
        let a = build_semantic_graph(&word_table(&pts)).unwrap().normalized_adjacency();
        let n = pts.len();
        for i in 0..n {
            prop_assert!(a.get(i, i) > 0.0);
            for j in 0..n {
                prop_assert!((a.get(i, j) - a.get(j, i)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn feature_text_round_trips(
        rows in prop::collection::vec((any::<bool>(), 0usize..4, prop::collection::vec(-1e6..1e6f64, 3)), 1..20)
    ) {
        let records: Vec<FeatureRecord> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (sketch, c, feature))| FeatureRecord {
                id: format!("r{i}"),
                modality: if sketch { Modality::Sketch } else { Modality::Image },
                label: format!("c{c}"),
                feature,
            })
            .collect();
        let ds = Dataset::new(3, records).unwrap();
        let text = ds.to_feature_text();
        let back = Dataset::parse_feature_text(&text).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(back.to_feature_text(), text);
    }

    #[test]
    fn config_text_round_trips(epochs in 0usize..500, lr in 1e-6..1.0f64, k in 1usize..500, l3 in 0.0..5.0f64) {
        let mut cfg = RunConfig::default();
        cfg.set("epochs", &epochs.to_string()).unwrap();
        cfg.set("learning_rate", &lr.to_string()).unwrap();
        cfg.set("k", &k.to_string()).unwrap();
        cfg.set("lambda3", &l3.to_string()).unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(back.to_text(), cfg.to_text());
    }
}
