use proptest::prelude::*;
use zsattr_core::data::RleMask;
use zsattr_core::hierarchy::{map_by_similarity, mapping_accuracy};
use zsattr_core::losses::{asymmetric_loss, scr_loss, LossConfig};
use zsattr_core::metrics::average_precision;
use zsattr_core::numerics::{sigmoid, softmax_rows, ParamStore, Tape, Tensor};
use zsattr_core::zrse::{enhance_topk, top_k};

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn label() -> impl Strategy<Value = i8> {
    prop_oneof![Just(1i8), Just(0i8), Just(-1i8)]
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in matrix(3, 5, -50.0, 50.0), shift in -100.0f64..100.0) {
        let s = softmax_rows(&x).unwrap();
        for i in 0..3 {
            let sum: f64 = s.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            prop_assert!(s.row(i).iter().all(|&v| v >= 0.0));
        }
        let shifted = softmax_rows(&x.map(|v| v + shift)).unwrap();
        for (a, b) in s.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_symmetric(x in -700.0f64..700.0) {
        prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn matmul_matches_triple_loop(a in matrix(3, 4, -5.0, 5.0), b in matrix(4, 2, -5.0, 5.0)) {
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.get2(i, k) * b.get2(k, j);
                }
                prop_assert!((c.get2(i, j) - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn backward_twice_doubles_gradients(p in prop::collection::vec(-3.0f64..3.0, 1..6)) {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::vector(p.clone())).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&store, id).unwrap();
        let g = tape.gelu(v).unwrap();
        let sq = tape.mul(g, v).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let once = store.get(id).grad.clone();
        tape.backward(loss, &mut store).unwrap();
        for (a, b) in store.get(id).grad.data().iter().zip(once.data()) {
            prop_assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn ap_is_bounded_and_monotone_invariant(
        scores in prop::collection::vec(-3.0f64..3.0, 1..12),
        labels in prop::collection::vec(label(), 12),
    ) {
        let labels = &labels[..scores.len()];
        let ap = average_precision(&scores, labels).unwrap();
        let exp: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 1.0).collect();
        prop_assert_eq!(ap, average_precision(&exp, labels).unwrap());
        if let Some(v) = ap {
            prop_assert!((0.0..=1.0).contains(&v));
        } else {
            prop_assert!(!labels.contains(&1));
        }
    }

    #[test]
    fn ap_ignores_instance_order_without_ties(
        raw in prop::collection::btree_set(-1000i32..1000, 2..10),
        labels in prop::collection::vec(label(), 10),
        rot in 0usize..10,
    ) {
        let scores: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        let labels = &labels[..scores.len()];
        let k = rot % scores.len();
        let mut s2 = scores.clone();
        let mut l2 = labels.to_vec();
        s2.rotate_left(k);
        l2.rotate_left(k);
        prop_assert_eq!(average_precision(&scores, labels).unwrap(), average_precision(&s2, &l2).unwrap());
    }

    #[test]
    fn unknown_entries_carry_no_loss(
        logits in prop::collection::vec(-8.0f64..8.0, 1..10),
        labels in prop::collection::vec(label(), 10),
        bump in -5.0f64..5.0,
    ) {
        let labels = &labels[..logits.len()];
        let cfg = LossConfig::default();
        let base = asymmetric_loss(&logits, labels, &cfg).unwrap();
        prop_assert!(base >= 0.0);
        for i in 0..logits.len() {
            if labels[i] == -1 {
                let mut moved = logits.clone();
                moved[i] += bump;
                prop_assert_eq!(asymmetric_loss(&moved, labels, &cfg).unwrap(), base);
            }
        }
    }

    #[test]
    fn scr_is_nonnegative(q in matrix(3, 4, -2.0, 2.0), t in matrix(3, 5, -2.0, 2.0), h in matrix(5, 4, -2.0, 2.0)) {
        let l = scr_loss(&q, &t, &h, &[0, 1, 2]).unwrap();
        prop_assert!(l >= 0.0);
        let exact = q.matmul_t(&h).unwrap();
        prop_assert_eq!(scr_loss(&q, &exact, &h, &[0, 1, 2]).unwrap(), 0.0);
    }

    #[test]
    fn mapping_ignores_positive_scaling(
        attrs in matrix(6, 4, -1.0, 1.0),
        cents in matrix(3, 4, -1.0, 1.0),
        scales in prop::collection::vec(0.01f64..100.0, 6),
    ) {
        prop_assume!((0..6).all(|i| attrs.row(i).iter().any(|v| v.abs() > 1e-3)));
        prop_assume!((0..3).all(|i| cents.row(i).iter().any(|v| v.abs() > 1e-3)));
        let base = map_by_similarity(&attrs, &cents).unwrap();
        let mut scaled = attrs.clone();
        for (i, s) in scales.iter().enumerate() {
            scaled.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        let moved = map_by_similarity(&scaled, &cents).unwrap();
        // cosine ties can flip under rounding; only compare clear winners
        let sims = |t: &Tensor, i: usize| -> Vec<f64> {
            let n: f64 = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            (0..3).map(|j| {
                let c = cents.row(j);
                let m: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                t.row(i).iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / (n * m)
            }).collect()
        };
        for i in 0..6 {
            let mut s = sims(&attrs, i);
            s.sort_by(|a, b| b.total_cmp(a));
            if s[0] - s[1] > 1e-9 {
                prop_assert_eq!(base[i], moved[i]);
            }
        }
        prop_assert_eq!(mapping_accuracy(&base, &base, &Default::default()).unwrap(), 1.0);
    }

    #[test]
    fn enhancement_moves_only_selected_scores(
        c in prop::collection::vec(-5.0f64..5.0, 1..12),
        r in prop::collection::vec(-3.0f64..3.0, 12),
        k in 0usize..14,
    ) {
        let r = &r[..c.len()];
        let p = enhance_topk(&c, r, k).unwrap();
        let sel = top_k(r, k, None);
        prop_assert_eq!(sel.len(), k.min(c.len()));
        for i in 0..c.len() {
            let plain = sigmoid(c[i]);
            if sel.contains(&i) {
                if r[i] > 0.0 { prop_assert!(p[i] >= plain); }
                if r[i] < 0.0 { prop_assert!(p[i] <= plain); }
            } else {
                prop_assert_eq!(p[i].to_bits(), plain.to_bits());
            }
        }
        if k >= c.len() {
            for i in 0..c.len() {
                prop_assert_eq!(p[i], sigmoid(c[i] + r[i]));
            }
        }
    }

    #[test]
    fn rle_round_trips(bits in prop::collection::vec(any::<bool>(), 1..64), w in 1usize..8) {
        let h = bits.len() / w;
        prop_assume!(h > 0);
        let bits = &bits[..h * w];
        let m = RleMask::encode(bits, h, w);
        prop_assert_eq!(m.decode().unwrap(), bits.to_vec());
        prop_assert_eq!(m.counts.iter().sum::<usize>(), h * w);
    }
}
