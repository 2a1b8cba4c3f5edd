use bal_core::forward_model::{
    activation_frames, apply_lead_field, build_lead_field, ApParams, ExcitabilityField, GridGeometry, SimState, Simulator, StimulusProtocol,
};
use ndarray::Array2;
use proptest::prelude::*;

fn lattice(n: usize) -> (GridGeometry, Simulator) {
    let g = GridGeometry::new(n, n, 1.0).unwrap();
    let p = ApParams { t_end: 40.0, ..ApParams::default() };
    (g, Simulator::new(g, p).unwrap())
}

/// `None` means never activated and orders after every frame index.
fn later_or_equal(a: Option<usize>, b: Option<usize>) -> bool {
    match (a, b) {
        (None, _) => true,
        (Some(_), None) => false,
        (Some(x), Some(y)) => x >= y,
    }
}

#[test]
fn rest_state_is_exactly_invariant() {
    let (g, sim) = lattice(16);
    for value in [0.0, 0.15, 0.3, 0.5] {
        let theta = ExcitabilityField::uniform(g.n_nodes(), value).unwrap();
        let frames = sim.simulate_from(&theta, &StimulusProtocol::none(), SimState::rest(g.n_nodes())).unwrap();
        assert!(frames.iter().all(|&u| u == 0.0), "theta = {value}");
    }
}

#[test]
fn activation_is_monotone_along_rays_from_the_stimulus() {
    let g = GridGeometry::new(24, 24, 1.0).unwrap();
    let sim = Simulator::new(g, ApParams::default()).unwrap();
    let theta = ExcitabilityField::uniform(g.n_nodes(), 0.15).unwrap();
    let stim = StimulusProtocol::centered(&g);
    let act = activation_frames(&sim.simulate(&theta, &stim).unwrap(), 0.5);
    let (cx, cy) = g.coords(stim.site);
    let rays: [(isize, isize); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1)];
    for (dx, dy) in rays {
        let mut prev = act[stim.site];
        let (mut x, mut y) = (cx as isize, cy as isize);
        loop {
            x += dx;
            y += dy;
            if x < 0 || y < 0 || x >= g.nx as isize || y >= g.ny as isize {
                break;
            }
            let a = act[g.index(x as usize, y as usize)];
            if (x - cx as isize).abs().max((y - cy as isize).abs()) <= 4 {
                assert!(a.is_some(), "healthy tissue at ({x}, {y}) never activated");
            }
            assert!(later_or_equal(a, prev), "ray ({dx}, {dy}) at ({x}, {y}): {a:?} before {prev:?}");
            prev = a;
        }
    }
}

#[test]
fn raising_excitability_delays_or_blocks_a_region() {
    let (g, sim) = lattice(20);
    let stim = StimulusProtocol::centered(&g);
    let healthy = ExcitabilityField::uniform(g.n_nodes(), 0.15).unwrap();
    let base = activation_frames(&sim.simulate(&healthy, &stim).unwrap(), 0.5);
    let region: Vec<usize> = (0..g.n_nodes()).filter(|&i| g.coords(i).0 >= 14).collect();
    let mut theta = healthy.theta.clone();
    for &i in &region {
        theta[i] = 0.45;
    }
    let lesioned = activation_frames(&sim.simulate(&ExcitabilityField::new(theta).unwrap(), &stim).unwrap(), 0.5);
    for &i in &region {
        assert!(later_or_equal(lesioned[i], base[i]), "node {i}: {:?} vs {:?}", lesioned[i], base[i]);
    }
    assert!(region.iter().any(|&i| lesioned[i] != base[i]));
}

#[test]
fn simulation_is_deterministic() {
    let (g, sim) = lattice(12);
    let theta = ExcitabilityField::new((0..g.n_nodes()).map(|i| 0.15 + 0.3 * ((i % 7) as f64 / 7.0)).collect()).unwrap();
    let stim = StimulusProtocol::centered(&g);
    assert_eq!(sim.simulate(&theta, &stim).unwrap(), sim.simulate(&theta, &stim).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn potential_stays_in_physical_range(
        values in prop::collection::vec(0.0f64..=0.5, 100),
        site in 0usize..100,
        radius in 0usize..3,
    ) {
        let (_, sim) = lattice(10);
        let theta = ExcitabilityField::new(values).unwrap();
        let stim = StimulusProtocol { site, radius, value: 1.0, t_on: 0.0 };
        let frames = sim.simulate(&theta, &stim).unwrap();
        prop_assert!(frames.iter().all(|&u| (-0.2..=1.2).contains(&u)));
    }

    #[test]
    fn lead_field_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let g = GridGeometry::new(8, 8, 1.0).unwrap();
        let lead = build_lead_field(&g, 12, seed).unwrap();
        let u1 = Array2::from_shape_fn((5, 64), |(t, i)| ((t * 64 + i) as f64 * 0.37).sin());
        let u2 = Array2::from_shape_fn((5, 64), |(t, i)| ((t + 3 * i) as f64 * 0.11).cos());
        let lhs = apply_lead_field(&lead, &(&u1 * a + &u2 * b)).unwrap();
        let y1 = apply_lead_field(&lead, &u1).unwrap();
        let y2 = apply_lead_field(&lead, &u2).unwrap();
        let rhs = &y1.y * a + &y2.y * b;
        let err = (&lhs.y - &rhs).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(err <= 1e-12, "max deviation {err}");
    }
}
