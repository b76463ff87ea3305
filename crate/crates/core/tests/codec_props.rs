use ams::codec::*;
use ams::optimizer::CoordinateMask;
use ams::workload::ParamVector;
use half::f16;
use proptest::prelude::*;

fn delta_strategy() -> impl Strategy<Value = ModelDelta> {
    (1usize..2000, any::<u32>(), any::<u64>()).prop_flat_map(|(total, phase, _)| {
        (proptest::collection::btree_set(0..total, 0..=total.min(300)), Just(phase), Just(total))
            .prop_flat_map(|(idx, phase, total)| {
                let n = idx.len();
                (Just(idx), Just(phase), Just(total), proptest::collection::vec(any::<u16>(), n))
            })
            .prop_map(|(idx, phase, total, bits)| ModelDelta {
                phase,
                mask: CoordinateMask::from_indices(total, idx.into_iter().collect()),
                values: bits
                    .into_iter()
                    .map(|b| {
                        let v = f16::from_bits(b);
                        if v.is_nan() { f16::from_f32(0.5) } else { v }
                    })
                    .collect(),
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn delta_round_trip(d in delta_strategy()) {
        let bytes = encode_delta(&d);
        prop_assert_eq!(decode_delta(&bytes).unwrap(), d);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

    #[test]
    fn uplink_round_trip_rounds_to_binary16(
        client in any::<u32>(),
        samples in proptest::collection::vec(
            (0.0f64..1e4, proptest::collection::vec(-100.0f64..100.0, 32)), 1..12),
    ) {
        let batch = UplinkBatch {
            client_id: client,
            samples: samples.iter().map(|(t, f)| UplinkSample::from_features(*t, f)).collect(),
        };
        let decoded = decode_uplink(&encode_uplink(&batch).unwrap()).unwrap();
        prop_assert_eq!(decoded.client_id, client);
        for ((t, f), s) in samples.iter().zip(&decoded.samples) {
            prop_assert_eq!(s.timestamp, *t as f32);
            let expect: Vec<f64> = f.iter().map(|x| f16::from_f64(*x).to_f64()).collect();
            prop_assert_eq!(s.features_f64(), expect);
        }
    }

    #[test]
    fn truncated_delta_never_decodes(d in delta_strategy(), cut in 0usize..64) {
        let bytes = encode_delta(&d);
        let keep = bytes.len().saturating_sub(cut + 1);
        prop_assert!(decode_delta(&bytes[..keep]).is_err());
    }

    #[test]
    fn apply_touches_only_masked(d in delta_strategy()) {
        let total = d.total_params();
        let mut p = ParamVector((0..total).map(|i| i as f64 + 0.25).collect());
        apply_delta(&mut p, &d).unwrap();
        for i in 0..total {
            match d.mask.indices().binary_search(&i) {
                Ok(k) => prop_assert_eq!(p.0[i], d.values[k].to_f64()),
                Err(_) => prop_assert_eq!(p.0[i], i as f64 + 0.25),
            }
        }
    }
}

fn fixture(name: &str) -> Vec<u8> {
    std::fs::read(std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)).unwrap()
}

#[test]
fn golden_fixtures_are_stable() {
    assert_eq!(encode_delta(&golden_delta()), fixture("golden_delta.bin"));
    assert_eq!(encode_uplink(&golden_uplink()).unwrap(), fixture("golden_uplink.bin"));
    assert_eq!(decode_delta(&fixture("golden_delta.bin")).unwrap(), golden_delta());
    assert_eq!(decode_uplink(&fixture("golden_uplink.bin")).unwrap(), golden_uplink());
}
