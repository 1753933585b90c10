mod support;

use proptest::prelude::*;
use rand::Rng;
use reverb::dynamics::{MountainCarParams, Plant, StateVector};
use reverb::MountainCar64;
use support::rng;

/// The continuous mountain car as published for the reference environment.
fn reference_step(position: f64, velocity: f64, action: f64) -> (f64, f64) {
    let force = action.clamp(-1.0, 1.0);
    let mut velocity = velocity + force * 0.0015 - 0.0025 * (3.0 * position).cos();
    velocity = velocity.clamp(-0.07, 0.07);
    let mut position = position + velocity;
    position = position.clamp(-1.2, 0.6);
    if position == -1.2 && velocity < 0.0 {
        velocity = 0.0;
    }
    (position, velocity)
}

#[test]
fn noiseless_trajectory_matches_reference_for_200_steps() {
    let car = MountainCar64::new(MountainCarParams::default().noiseless()).unwrap();
    let mut r = rng(3);
    for start in [-0.6, -0.5, -0.43] {
        let mut s = StateVector::from_slice(&[start, 0.0]);
        let (mut x, mut v) = (start, 0.0);
        for t in 0..200 {
            // bang-bang pumping with some random excursions, including out-of-range controls
            let a = if t % 17 == 0 { r.random_range(-3.0..3.0) } else if v >= 0.0 { 1.0 } else { -1.0 };
            s = car.step(&s, &[a], &mut r).unwrap();
            (x, v) = reference_step(x, v, a);
            assert!((s.get(0) - x).abs() <= 1e-15 && (s.get(1) - v).abs() <= 1e-15, "diverged at step {t}");
        }
    }
}

#[test]
fn jacobian_matches_finite_differences_at_interior_states() {
    let car = MountainCar64::new(MountainCarParams::default()).unwrap();
    let mut r = rng(8);
    let mut checked = 0;
    while checked < 100 {
        let x = r.random_range(-1.1..0.5);
        let v = r.random_range(-0.06..0.06);
        let a = r.random_range(-1.0..1.0);
        let s = StateVector::from_slice(&[x, v]);
        let next = car.transition(&s, &[a]).unwrap();
        let margin = 1e-4;
        let interior = (next.get(1).abs() < 0.07 - margin)
            && next.get(0) > -1.2 + margin
            && next.get(0) < 0.6 - margin;
        if !interior {
            continue;
        }
        let jac = car.jacobian(&s, &[a]).unwrap();
        let h = 1e-6;
        for j in 0..2 {
            let mut up = [x, v];
            let mut dn = [x, v];
            up[j] += h;
            dn[j] -= h;
            let fu = car.transition(&StateVector::from_slice(&up), &[a]).unwrap();
            let fd = car.transition(&StateVector::from_slice(&dn), &[a]).unwrap();
            for i in 0..2 {
                let numeric = (fu.get(i) - fd.get(i)) / (2.0 * h);
                let err = (jac[(i, j)] - numeric).abs() / numeric.abs().max(1e-3);
                assert!(err <= 1e-5, "∂f{i}/∂s{j} at ({x}, {v}): {} vs {numeric}", jac[(i, j)]);
            }
        }
        checked += 1;
    }
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let car = MountainCar64::new(MountainCarParams::default()).unwrap();
    let run = |seed| {
        let mut r = rng(seed);
        let mut s = car.initial_state(&mut r);
        let mut out = Vec::new();
        for t in 0..300 {
            s = car.step(&s, &[((t as f64) * 0.1).sin()], &mut r).unwrap();
            out.push(s.to_f64_vec());
        }
        out
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

proptest! {
    #[test]
    fn states_stay_within_bounds(
        seed in any::<u64>(),
        controls in prop::collection::vec(-1.0f64..=1.0, 1..400),
        noise_scale in 0.0f64..100.0,
    ) {
        let params = MountainCarParams {
            process_noise_std: (1e-4 * noise_scale, 1e-5 * noise_scale),
            ..Default::default()
        };
        let car = MountainCar64::new(params).unwrap();
        let mut r = rng(seed);
        let mut s = car.initial_state(&mut r);
        prop_assert!((-0.6..=-0.4).contains(&s.get(0)) && s.get(1) == 0.0);
        for a in controls {
            s = car.step(&s, &[a], &mut r).unwrap();
            prop_assert!((-1.2..=0.6).contains(&s.get(0)));
            prop_assert!((-0.07..=0.07).contains(&s.get(1)));
        }
    }
}
