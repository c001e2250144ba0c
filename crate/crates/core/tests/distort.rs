use attractor_mem::distort::{DistortionSpec, Fill, MaskSpec};
use attractor_mem::patterns::{hamming, Domain, PatternBatch};
use attractor_mem::util::sub_rng;
use proptest::prelude::*;
use rand::Rng;

fn spec_strategy(dim: usize) -> impl Strategy<Value = (DistortionSpec, Domain)> {
    prop_oneof![
        (0..=dim).prop_map(|c| (DistortionSpec::flip(c), Domain::Bipolar)),
        (0..=dim).prop_map(|c| (DistortionSpec::randomize(c), Domain::Bipolar)),
        (0.0f64..=1.0).prop_map(|r| (DistortionSpec::salt_pepper(r), Domain::Bipolar)),
        (0.0f64..=1.0).prop_map(|r| (DistortionSpec::salt_pepper(r), Domain::UnitBox)),
        (1usize..=4, 1usize..=4).prop_map(move |(h, w)| (DistortionSpec::block(h, w, 4, dim / 4, Domain::UnitBox), Domain::UnitBox)),
        (1usize..=4, 1usize..=4).prop_map(move |(h, w)| (DistortionSpec::block(h, w, 4, dim / 4, Domain::Bipolar), Domain::Bipolar)),
    ]
}

proptest! {
    #[test]
    fn unmasked_coordinates_are_untouched((spec, domain) in spec_strategy(16), seed in any::<u64>()) {
        let mut rng = sub_rng(seed, 0, 0);
        let x: Vec<f64> = match domain {
            Domain::Bipolar => PatternBatch::random_bipolar(1, 16, &mut rng).row(0).to_vec(),
            Domain::UnitBox => (0..16).map(|_| rng.gen_range(0.0..1.0)).collect(),
        };
        let (q, mask) = spec.distort(&x, domain, &mut rng).unwrap();
        prop_assert_eq!(q.len(), 16);
        for i in 0..16 {
            if !mask[i] {
                prop_assert_eq!(q[i].to_bits(), x[i].to_bits());
            }
            match domain {
                Domain::Bipolar => prop_assert!(q[i] == 1.0 || q[i] == -1.0),
                Domain::UnitBox => prop_assert!((0.0..=1.0).contains(&q[i])),
            }
        }
        if let MaskSpec::BitFlipCount { count } = spec.mask {
            prop_assert_eq!(mask.iter().filter(|&&m| m).count(), count);
            if spec.fill == Fill::Flip {
                prop_assert_eq!(hamming(&x, &q), count);
            }
        }
        if let MaskSpec::Block { h, w, .. } = spec.mask {
            prop_assert_eq!(mask.iter().filter(|&&m| m).count(), h * w);
        }
    }

    #[test]
    fn same_stream_same_query((spec, domain) in spec_strategy(16), seed in any::<u64>()) {
        let x = vec![if domain == Domain::Bipolar { 1.0 } else { 0.5 }; 16];
        let a = spec.distort(&x, domain, &mut sub_rng(seed, 1, 2)).unwrap();
        let b = spec.distort(&x, domain, &mut sub_rng(seed, 1, 2)).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn fills_that_do_not_fit_the_domain_are_rejected() {
    let mut rng = sub_rng(0, 0, 0);
    assert!(DistortionSpec::flip(1).distort(&[0.5, 0.5], Domain::UnitBox, &mut rng).is_err());
    let s = DistortionSpec { mask: MaskSpec::SaltPepper { rate: 0.5 }, fill: Fill::RandomUniform };
    assert!(s.distort(&[1.0, -1.0], Domain::Bipolar, &mut rng).is_err());
    assert!(DistortionSpec::salt_pepper(1.5).validate(4, Domain::Bipolar).is_err());
    assert!(DistortionSpec::block(3, 3, 2, 2, Domain::Bipolar).validate(4, Domain::Bipolar).is_err());
}

#[test]
fn spec_round_trips_through_json() {
    for s in [DistortionSpec::flip(3), DistortionSpec::randomize(64), DistortionSpec::salt_pepper(0.2)] {
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<DistortionSpec>(&text).unwrap(), s);
    }
}
