use attractor_mem::energy::{build, EnergyArch, EnergyModel, ParameterSet};
use attractor_mem::reader::{read, ReadSchedule, Reader};
use attractor_mem::tape::Precision;
use attractor_mem::util::sub_rng;
use proptest::prelude::*;
use rand::Rng;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Straight-line projected Nesterov loop using only `∇ₓE`.
fn reference(
    model: &EnergyModel,
    p: &ParameterSet,
    q: &[f64],
    s: &ReadSchedule,
    clamp: Option<&[bool]>,
) -> Vec<Vec<f64>> {
    let d = q.len();
    let fixed = |i: usize| clamp.is_some_and(|c| c[i]);
    let proj = |z: &mut [f64]| {
        for i in 0..d {
            z[i] = if fixed(i) { q[i] } else { z[i].clamp(0.0, 1.0) };
        }
    };
    let mut gamma = s.gamma_init;
    let mut psi = 1.0;
    let mut x = q.to_vec();
    proj(&mut x);
    let mut v = vec![0.0; d];
    let mut out = vec![x.clone()];
    for k in 0..s.steps {
        if k > 0 {
            gamma *= sigmoid(s.decay_logits[k - 1]);
        }
        psi *= sigmoid(s.momentum_logits[k]);
        let mut y: Vec<f64> = (0..d).map(|i| x[i] + psi * v[i]).collect();
        if k > 0 {
            proj(&mut y);
        }
        let g = model.grad_x(&y, p, Precision::F64).unwrap();
        for i in 0..d {
            v[i] = if fixed(i) { 0.0 } else { psi * v[i] - gamma * g[i] };
            x[i] += v[i];
        }
        proj(&mut x);
        out.push(x.clone());
    }
    out
}

fn random_schedule(rng: &mut impl Rng, steps: usize) -> ReadSchedule {
    let mut s = ReadSchedule::new(steps);
    s.gamma_init = rng.gen_range(0.05..3.0);
    s.decay_logits.iter_mut().for_each(|l| *l = rng.gen_range(-2.0..4.0));
    s.momentum_logits.iter_mut().for_each(|l| *l = rng.gen_range(-2.0..4.0));
    s
}

#[test]
fn matches_reference_loop_step_for_step() {
    let arch = EnergyArch::GatedRnn { dim: 10, hidden: 12, hops: 3, dynamic: 4 };
    for seed in 0..20u64 {
        let (p, m) = build(&arch, seed).unwrap();
        let mut rng = sub_rng(seed, 7, 0);
        let s = random_schedule(&mut rng, 5);
        let q: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mask: Vec<bool> = (0..10).map(|_| rng.gen_bool(0.3)).collect();
        for clamp in [None, Some(mask.as_slice())] {
            let got = read(&m, &q, &p, &s, clamp, Precision::F64).unwrap();
            let want = reference(&m, &p, &q, &s, clamp);
            assert_eq!(got.trajectory.len(), want.len());
            for (k, (a, b)) in got.trajectory.iter().zip(&want).enumerate() {
                for (u, w) in a.iter().zip(b) {
                    assert!((u - w).abs() < 1e-12, "seed {seed} iterate {k}: {u} vs {w}");
                }
            }
            for (x, e) in got.trajectory.iter().zip(&got.energies) {
                assert!((m.energy(x, &p, Precision::F64).unwrap() - e).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn plain_descent_on_convex_energy_never_rises() {
    let (mut p, m) = build(&EnergyArch::Quadratic { dim: 8 }, 0).unwrap();
    for seed in 0..50u64 {
        let mut rng = sub_rng(seed, 8, 0);
        let c: Vec<f64> = (0..8).map(|_| rng.gen_range(-0.5..1.5)).collect();
        p.set_data("center", c).unwrap();
        let mut s = ReadSchedule::new(10);
        s.gamma_init = rng.gen_range(0.01..0.5);
        s.decay_logits = vec![60.0; 9];
        s.momentum_logits = vec![-60.0; 10];
        let q: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
        let r = read(&m, &q, &p, &s, None, Precision::F64).unwrap();
        for w in r.energies.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "{:?}", r.energies);
        }
    }
}

#[test]
fn f32_reads_track_f64_reads() {
    let arch = EnergyArch::GatedRnn { dim: 8, hidden: 16, hops: 2, dynamic: 4 };
    let (p, m) = build(&arch, 4).unwrap();
    let reader = Reader::new(&m, &p, 5, false).unwrap();
    let s = ReadSchedule::new(5);
    let q = vec![0.25; 8];
    let a = reader.read(&q, &p, &s, None, Precision::F64).unwrap();
    let b = reader.read(&q, &p, &s, None, Precision::F32).unwrap();
    for (u, v) in a.final_pattern().iter().zip(b.final_pattern()) {
        assert!((u - v).abs() < 1e-4);
    }
}

fn arch_for(kind: u8, dim: usize) -> EnergyArch {
    match kind {
        0 => EnergyArch::Quadratic { dim },
        1 => EnergyArch::Linear { dim },
        _ => EnergyArch::GatedRnn { dim, hidden: 6, hops: 2, dynamic: 2 },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn iterates_stay_in_box_and_clamps_hold(
        seed in any::<u64>(),
        kind in 0u8..3,
        dim in 1usize..7,
        steps in 1usize..6,
        gamma in 1e-3f64..20.0,
        logits in prop::collection::vec(-8.0f64..8.0, 11),
    ) {
        let (p, m) = build(&arch_for(kind, dim), seed).unwrap();
        let mut rng = sub_rng(seed, 9, 0);
        let mut s = ReadSchedule::new(steps);
        s.gamma_init = gamma;
        s.decay_logits.copy_from_slice(&logits[..steps - 1]);
        s.momentum_logits.copy_from_slice(&logits[5..5 + steps]);
        let q: Vec<f64> = (0..dim).map(|_| if rng.gen_bool(0.3) { rng.gen_range(0..2) as f64 } else { rng.gen_range(0.0..1.0) }).collect();
        let mask: Vec<bool> = (0..dim).map(|_| rng.gen_bool(0.4)).collect();
        let r = read(&m, &q, &p, &s, Some(&mask), Precision::F64).unwrap();
        prop_assert_eq!(r.trajectory.len(), steps + 1);
        for x in &r.trajectory {
            for i in 0..dim {
                prop_assert!((0.0..=1.0).contains(&x[i]));
                if mask[i] {
                    prop_assert_eq!(x[i].to_bits(), q[i].to_bits());
                }
            }
        }
        let (gammas, psis) = s.materialize().unwrap();
        for w in gammas.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        prop_assert!(gammas.iter().all(|&g| g > 0.0 && g <= gamma));
        prop_assert!(psis.iter().all(|&p| p > 0.0 && p < 1.0));
    }
}
