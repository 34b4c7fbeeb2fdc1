use std::collections::BTreeSet;

use obsmatch::corpus::{load_dictionary, subset_by_scale, write_dictionary, DictEntry, Dictionary};
use obsmatch::embed::{import_embeddings, mock_embed, EmbeddingStore};
use obsmatch::recog::{triplet_loss, FeatureVec, TripletBatch};
use proptest::prelude::*;

fn entry_strategy() -> impl Strategy<Value = DictEntry> {
    (
        "[a-z]{1,3}",
        prop::sample::select(vec!["水", "木", "日", "人", "口"]),
        "[一二三人口日月木水火]{1,6}",
        "[一二三人口日月木水火]{1,6}",
        "[一二三人口日月木水火]{1,6}",
    )
        .prop_map(|(label, radical, r, p, j)| DictEntry {
            entry_id: String::new(),
            label,
            radical: radical.to_string(),
            radical_analysis: r,
            pictographic_analysis: p,
            joint_analysis: j,
            image_refs: None,
            sources: None,
        })
}

fn dict_strategy() -> impl Strategy<Value = Dictionary> {
    prop::collection::vec(entry_strategy(), 1..40).prop_map(|mut es| {
        for (i, e) in es.iter_mut().enumerate() {
            e.entry_id = format!("d{i:03}");
        }
        Dictionary::from_entries(es)
    })
}

fn vec_strategy(dim: usize) -> impl Strategy<Value = FeatureVec> {
    prop::collection::vec(-2.0f64..2.0, dim).prop_map(FeatureVec)
}

fn batch_strategy() -> impl Strategy<Value = TripletBatch> {
    (1usize..6).prop_flat_map(|n| {
        (
            prop::collection::vec(vec_strategy(4), n),
            prop::collection::vec(vec_strategy(4), n),
            prop::collection::vec(vec_strategy(4), n),
            0.01f64..1.0,
        )
            .prop_map(|(a, p, n, alpha)| {
                let mut b = TripletBatch::new(a, p, n);
                b.margin_alpha = alpha;
                b
            })
    })
}

fn rotate(v: &FeatureVec, theta: f64) -> FeatureVec {
    let (s, c) = theta.sin_cos();
    let mut out = v.0.clone();
    for pair in out.chunks_exact_mut(2) {
        let (x, y) = (pair[0], pair[1]);
        pair[0] = c * x - s * y;
        pair[1] = s * x + c * y;
    }
    FeatureVec(out)
}

proptest! {
    #[test]
    fn dictionary_round_trips(dict in dict_strategy()) {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("d.jsonl");
        write_dictionary(&dict, &path).unwrap();
        let back = load_dictionary(&path).unwrap();
        prop_assert_eq!(back.entries(), dict.entries());
    }

    #[test]
    fn radical_buckets_partition_entries(dict in dict_strategy()) {
        let mut seen = vec![0usize; dict.len()];
        for (radical, ords) in dict.radical_index() {
            for &o in ords {
                prop_assert_eq!(&dict.entry(o).radical, radical);
                seen[o] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn scale_subset_is_idempotent(dict in dict_strategy(), keep in prop::collection::btree_set("[a-z]{1,3}", 1..10)) {
        let mut allowed: BTreeSet<String> = keep;
        allowed.insert(dict.entry(0).label.clone());
        let once = subset_by_scale(&dict, &allowed).unwrap();
        let twice = subset_by_scale(&once, &allowed).unwrap();
        prop_assert_eq!(once.entries(), twice.entries());
        prop_assert!(once.entries().iter().all(|e| allowed.contains(&e.label)));
        let expected = dict.entries().iter().filter(|e| allowed.contains(&e.label)).count();
        prop_assert_eq!(once.len(), expected);
    }

    #[test]
    fn triplet_loss_is_rotation_invariant(b in batch_strategy(), theta in 0.0f64..std::f64::consts::TAU) {
        let base = triplet_loss(&b).unwrap().loss;
        let mut r = b.clone();
        for v in r.anchors.iter_mut().chain(r.positives.iter_mut()).chain(r.negatives.iter_mut()) {
            *v = rotate(v, theta);
        }
        prop_assert!((triplet_loss(&r).unwrap().loss - base).abs() < 1e-9);
    }

    #[test]
    fn triplet_loss_grows_with_margin(b in batch_strategy(), extra in 0.0f64..1.0) {
        let base = triplet_loss(&b).unwrap().loss;
        let mut wider = b.clone();
        wider.margin_alpha += extra;
        let l = triplet_loss(&wider).unwrap().loss;
        prop_assert!(l >= base);
        prop_assert!(l <= base + extra + 1e-12);
    }

    #[test]
    fn mock_rows_are_unit_and_stable(text in "[一二三人口日月木水火 a-z]{1,16}", seed in 0u64..1000) {
        prop_assume!(!text.trim().is_empty());
        let a = mock_embed(&text, 8, seed).unwrap();
        let b = mock_embed(&text, 8, seed).unwrap();
        prop_assert_eq!(&a, &b);
        for i in 0..a.len() {
            prop_assert!((a.sq_norm(i).sqrt() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn store_export_is_bit_exact() {
    let texts = ["水流", "木 林", "日\n旦", "人从众"];
    let store = EmbeddingStore::build_mock(texts.iter().copied(), 12, 4).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("s.emb.jsonl");
    store.write(&path).unwrap();
    let back = import_embeddings(&path).unwrap();
    assert_eq!(back.provider_tag(), store.provider_tag());
    for t in texts {
        assert_eq!(back.get_text(t).unwrap(), store.get_text(t).unwrap());
    }
}
