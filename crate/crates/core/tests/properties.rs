use std::collections::HashSet;
use std::sync::Arc;

use fedpi_core::data::{
    is_exact_partition, partition_iid, partition_label_pairs, BatchStream, Dataset,
};
use fedpi_core::fedavg::GlobalModelMsg;
use fedpi_core::fedavg::{aggregate, LocalUpdateMsg, UpdateTiming};
use fedpi_core::models::{evaluate_batched, Model, ModelKind, ModelSpec};
use fedpi_core::nn::{self, ParameterSet};
use fedpi_core::transport::codec::{self, Control, WireMessage};
use fedpi_core::transport::TrafficMeter;
use fedpi_core::Tensor;
use proptest::prelude::*;

fn shape() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..5)
}

/// Unique names, arbitrary bit patterns (NaNs included).
fn param_set() -> impl Strategy<Value = ParameterSet> {
    prop::collection::vec(("[a-z][a-z0-9._]{0,12}", shape()), 1..6).prop_flat_map(|specs| {
        let mut seen = HashSet::new();
        let specs: Vec<_> = specs
            .into_iter()
            .filter(|(n, _)| seen.insert(n.clone()))
            .collect();
        let values: Vec<_> = specs
            .iter()
            .map(|(_, s)| {
                prop::collection::vec(
                    any::<u32>().prop_map(f32::from_bits),
                    s.iter().product::<usize>(),
                )
            })
            .collect();
        (Just(specs), values).prop_map(|(specs, values)| {
            ParameterSet::from_tensors(
                specs
                    .into_iter()
                    .zip(values)
                    .map(|((n, s), v)| (n, Tensor::new(s, v).unwrap())),
            )
            .unwrap()
        })
    })
}

fn message() -> impl Strategy<Value = WireMessage> {
    prop_oneof![
        (any::<u32>(), param_set())
            .prop_map(|(round, weights)| WireMessage::Global(GlobalModelMsg { round, weights })),
        (any::<u32>(), param_set(), any::<u32>(), any::<[u32; 3]>()).prop_map(
            |(round, weights, n, t)| {
                WireMessage::Update(LocalUpdateMsg {
                    round,
                    weights,
                    sample_count: n,
                    timing: UpdateTiming {
                        compute_ms: t[0],
                        recv_ms: t[1],
                        send_ms: t[2],
                    },
                })
            }
        ),
        (0u32..1 << 24).prop_map(|id| WireMessage::Control(Control::Register(id))),
        (0u32..1 << 24).prop_map(|run| WireMessage::Control(Control::Begin(run))),
    ]
}

fn dataset(labels: Vec<u8>) -> Arc<Dataset> {
    let n = labels.len();
    let images = Tensor::from_fn(vec![n, 1, 2, 2], |i| (i % 7) as f32 / 7.0);
    Arc::new(Dataset::new(images, labels).unwrap())
}

fn update(weights: ParameterSet, n: u32) -> LocalUpdateMsg {
    LocalUpdateMsg {
        round: 1,
        weights,
        sample_count: n,
        timing: UpdateTiming::default(),
    }
}

proptest! {
    #[test]
    fn codec_round_trip(msg in message()) {
        let bytes = codec::encode(&msg).unwrap();
        prop_assert_eq!(bytes.len(), codec::encoded_len(&msg));
        let back = codec::decode(&bytes).unwrap();
        prop_assert!(back.bit_eq(&msg), "{} vs {}", back, msg);
    }

    #[test]
    fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = codec::decode(&bytes);
    }

    #[test]
    fn truncation_is_a_format_error(msg in message(), cut in any::<prop::sample::Index>()) {
        let bytes = codec::encode(&msg).unwrap();
        let at = cut.index(bytes.len());
        let err = codec::decode(&bytes[..at]).unwrap_err();
        let is_format = matches!(err, fedpi_core::Error::Format { .. });
        prop_assert!(is_format, "{}", err);
    }

    #[test]
    fn iid_is_exact(n in 1usize..300, k in 1usize..8, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let ds = dataset(vec![0; n]);
        let shards = partition_iid(&ds, k, seed).unwrap();
        prop_assert!(is_exact_partition(&shards, n));
        let sizes: Vec<usize> = shards.iter().map(|s| s.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn label_pairs_are_exact_and_pure(labels in prop::collection::vec(0u8..6, 1..200), seed in any::<u64>()) {
        let pairs = [(0, 1), (2, 3), (4, 5)];
        let present: HashSet<u8> = labels.iter().copied().collect();
        let ds = dataset(labels.clone());
        match partition_label_pairs(&ds, &pairs, seed) {
            Ok(shards) => {
                prop_assert!(is_exact_partition(&shards, labels.len()));
                for (s, &(a, b)) in shards.iter().zip(&pairs) {
                    prop_assert!(s.labels().all(|l| l == a || l == b));
                }
            }
            // A pair with no samples leaves an empty shard.
            Err(_) => prop_assert!(pairs.iter().any(|&(a, b)| !present.contains(&a) && !present.contains(&b))),
        }
    }

    #[test]
    fn batch_stream_epochs(n in 1usize..60, b in 1usize..10, seed in any::<u64>()) {
        prop_assume!(b <= n);
        let ds = dataset(vec![0; n]);
        let shard = partition_iid(&ds, 1, 0).unwrap().remove(0);
        let mut s1 = BatchStream::new(&shard, b, seed).unwrap();
        let mut s2 = BatchStream::new(&shard, b, seed).unwrap();
        let per_epoch = n / b;
        for _ in 0..3 {
            let mut seen = HashSet::new();
            for _ in 0..per_epoch {
                let idx = s1.next_indices();
                prop_assert_eq!(&idx, &s2.next_indices());
                prop_assert_eq!(idx.len(), b);
                for i in idx {
                    prop_assert!(seen.insert(i), "index repeated within an epoch");
                }
            }
        }
    }

    #[test]
    fn aggregate_matches_f64_oracle(
        values in prop::collection::vec(prop::collection::vec(-100.0f32..100.0, 7), 1..6),
        counts in prop::collection::vec(1u32..1000, 6),
    ) {
        let updates: Vec<_> = values
            .iter()
            .zip(&counts)
            .map(|(v, &n)| update(ParameterSet::from_tensors([("w", Tensor::new(vec![7], v.clone()).unwrap())]).unwrap(), n))
            .collect();
        let got = aggregate(&updates).unwrap();
        let total: f64 = updates.iter().map(|u| f64::from(u.sample_count)).sum();
        for j in 0..7 {
            let want: f64 = values.iter().zip(&counts).map(|(v, &n)| f64::from(v[j]) * f64::from(n)).sum::<f64>() / total;
            let g = f64::from(got[0].value.data()[j]);
            prop_assert!((g - want).abs() <= 1e-6 * want.abs().max(1e-3), "{} vs {}", g, want);
        }
    }

    #[test]
    fn identical_updates_are_bit_exact(v in prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 1..20), k in 1usize..6, n in 1u32..500) {
        let w = ParameterSet::from_tensors([("w", Tensor::new(vec![v.len()], v).unwrap())]).unwrap();
        let updates: Vec<_> = (0..k).map(|_| update(w.clone(), n)).collect();
        prop_assert!(aggregate(&updates).unwrap().bit_eq(&w));
        prop_assert!(aggregate(&updates[..1]).unwrap().bit_eq(&w));
    }

    #[test]
    fn maxpool_routes_every_gradient_once(x in prop::collection::vec(-1.0f32..1.0, 2 * 4 * 6), g in prop::collection::vec(-1.0f32..1.0, 2 * 2 * 3)) {
        let x = Tensor::new(vec![1, 2, 4, 6], x).unwrap();
        let gy = Tensor::new(vec![1, 2, 2, 3], g).unwrap();
        let (_, argmax) = nn::maxpool2_forward(&x).unwrap();
        let gx = nn::maxpool2_backward(&gy, &argmax, x.shape()).unwrap();
        prop_assert_eq!(gx.data().iter().filter(|v| **v != 0.0).count(), gy.data().iter().filter(|v| **v != 0.0).count());
        let (a, b): (f64, f64) = (gx.data().iter().map(|&v| f64::from(v)).sum(), gy.data().iter().map(|&v| f64::from(v)).sum());
        prop_assert!((a - b).abs() < 1e-5);
    }

    #[test]
    fn softmax_rows_are_distributions(logits in prop::collection::vec(-50.0f32..50.0, 12)) {
        let out = nn::softmax_cross_entropy(&Tensor::new(vec![3, 4], logits).unwrap(), &[0, 1, 3]).unwrap();
        for row in out.probs.data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().map(|&p| f64::from(p)).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn meter_deltas_sum_to_totals(events in prop::collection::vec((0usize..3, any::<bool>(), 0usize..5000), 0..40), cuts in prop::collection::vec(any::<bool>(), 40)) {
        let mut m = TrafficMeter::new(3);
        let mut summed = [0u64; 3];
        for (i, &(w, sent, n)) in events.iter().enumerate() {
            if sent { m.record_sent(w, n) } else { m.record_received(w, n) }
            if cuts[i] {
                for (s, d) in summed.iter_mut().zip(m.close_round()) { *s += d; }
            }
        }
        for (s, d) in summed.iter_mut().zip(m.close_round()) { *s += d; }
        for (w, &total) in summed.iter().enumerate() {
            prop_assert_eq!(total, m.cumulative(w));
            prop_assert_eq!(total, m.sent(w) + m.received(w));
        }
    }
}

#[test]
fn evaluation_ignores_batch_size_and_order() {
    let model: Model = Model::build(ModelSpec::reduced(ModelKind::Mlp), 5);
    let n = 37;
    let images = Tensor::from_fn(vec![n, 6], |i| ((i * 7919) % 101) as f32 / 101.0);
    let labels: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
    let ds = Dataset::new(images.clone(), labels.clone()).unwrap();
    let base = evaluate_batched(&model, &ds, 256).unwrap();
    for b in [1, 5, 36, 37] {
        assert_eq!(evaluate_batched(&model, &ds, b).unwrap(), base);
    }
    let rev: Vec<usize> = (0..n).rev().collect();
    let shuffled = Dataset::new(
        images.gather_rows(&rev).unwrap(),
        rev.iter().map(|&i| labels[i]).collect(),
    )
    .unwrap();
    assert_eq!(evaluate_batched(&model, &shuffled, 8).unwrap(), base);
}
