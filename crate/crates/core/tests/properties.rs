//! Property tests: randomly constructed states stay valid under the
//! operations that claim to preserve validity, and the statistics helpers
//! obey their symmetries.

use nalgebra::DVector;
use proptest::prelude::*;

use wqt_core::dynamics::{branch_weights, evolve_density};
use wqt_core::hilbert::{make_density, max_abs, partial_trace_spin, PureState};
use wqt_core::model::{
    build_lattice_model, energy_shell, macro_decomposition, uniform_state, Boundary, LatticeModel, Macrovariable,
    ModelSpec, ParticleSpec, PotentialSpec,
};
use wqt_core::stats::{ks_two_sample, tv_distance};
use wqt_core::C64;

fn ring8() -> LatticeModel {
    build_lattice_model(&ModelSpec {
        particles: vec![ParticleSpec { mass: 1.0 }],
        sites: 8,
        spacing: 1.0,
        boundary: Boundary::Periodic,
        spin: 1,
        potential: PotentialSpec::default(),
        dimension_cap: 4096,
    })
    .unwrap()
}

fn spin_chain() -> LatticeModel {
    build_lattice_model(&ModelSpec {
        particles: vec![ParticleSpec { mass: 1.0 }],
        sites: 4,
        spacing: 1.0,
        boundary: Boundary::Periodic,
        spin: 2,
        potential: PotentialSpec::default(),
        dimension_cap: 4096,
    })
    .unwrap()
}

fn two_particle_box() -> LatticeModel {
    build_lattice_model(&ModelSpec {
        particles: vec![ParticleSpec { mass: 1.0 }, ParticleSpec { mass: 1.3 }],
        sites: 4,
        spacing: 1.0,
        boundary: Boundary::HardWall,
        spin: 1,
        potential: PotentialSpec::default(),
        dimension_cap: 4096,
    })
    .unwrap()
}

fn pure_state(dim: usize) -> impl Strategy<Value = PureState> {
    proptest::collection::vec((-1.0..1.0f64, -1.0..1.0f64), dim).prop_filter_map(
        "norm too small",
        move |amp| {
            let v = DVector::from_fn(dim, |i, _| C64::new(amp[i].0, amp[i].1));
            (v.norm() > 1e-3).then(|| PureState::normalized(v).unwrap())
        },
    )
}

fn mixture(dim: usize) -> impl Strategy<Value = wqt_core::hilbert::DensityMatrix> {
    (1usize..=4)
        .prop_flat_map(move |k| {
            (
                proptest::collection::vec(pure_state(dim), k),
                proptest::collection::vec(0.05..1.0f64, k),
            )
        })
        .prop_map(|(states, raw)| {
            let total: f64 = raw.iter().sum();
            let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
            make_density(&weights, &states).unwrap()
        })
}

fn probability_vector(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.01..1.0f64, len).prop_map(|raw| {
        let total: f64 = raw.iter().sum();
        raw.iter().map(|w| w / total).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mixtures_are_valid_states_with_bounded_purity(w in mixture(8)) {
        prop_assert!((w.trace() - 1.0).abs() < 1e-10);
        prop_assert!(w.purity() <= 1.0 + 1e-10);
        prop_assert!(w.purity() >= 1.0 / 8.0 - 1e-10);
    }

    #[test]
    fn evolution_preserves_trace_and_purity(w in mixture(8), t in -10.0..10.0f64) {
        let model = ring8();
        let wt = evolve_density(&w, &model, t).unwrap();
        prop_assert!((wt.trace() - 1.0).abs() < 1e-9);
        prop_assert!((wt.purity() - w.purity()).abs() < 1e-8);
    }

    #[test]
    fn spin_partial_trace_yields_a_valid_spatial_state(w in mixture(8)) {
        let model = spin_chain();
        let spatial = partial_trace_spin(&w, &model).unwrap();
        prop_assert_eq!(spatial.dim(), 4);
        prop_assert!((spatial.trace() - 1.0).abs() < 1e-9);
        prop_assert!(spatial.purity() <= 1.0 + 1e-9);
    }

    #[test]
    fn macro_weights_are_a_probability_vector_at_all_times(w in mixture(16), t in 0.0..20.0f64) {
        let model = two_particle_box();
        let decomp = macro_decomposition(&model, &Macrovariable::LeftCount).unwrap();
        let wt = evolve_density(&w, &model, t).unwrap();
        let p = branch_weights(&wt, &decomp).unwrap();
        prop_assert_eq!(p.len(), 3);
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        for &v in &p {
            prop_assert!((-1e-12..=1.0 + 1e-9).contains(&v));
        }
    }

    #[test]
    fn tv_distance_is_a_symmetric_bounded_metric(p in probability_vector(8), q in probability_vector(8)) {
        let d = tv_distance(&p, &q).unwrap();
        let d_rev = tv_distance(&q, &p).unwrap();
        prop_assert!((d - d_rev).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
        prop_assert!(tv_distance(&p, &p).unwrap() < 1e-15);
    }

    #[test]
    fn ks_statistic_is_symmetric(
        a in proptest::collection::vec(-5.0..5.0f64, 10..50),
        b in proptest::collection::vec(-5.0..5.0f64, 10..50),
    ) {
        let ab = ks_two_sample(&a, &b, 0.01).unwrap();
        let ba = ks_two_sample(&b, &a, 0.01).unwrap();
        prop_assert!((ab.statistic - ba.statistic).abs() < 1e-12);
        prop_assert_eq!(ab.pass, ba.pass);
    }

    #[test]
    fn energy_shells_are_invariant_projectors(e in -0.5..2.5f64, width in 0.1..1.5f64) {
        let model = ring8();
        let shell = match energy_shell(&model, e, width) {
            Ok(s) => s,
            // Empty shells are legal outcomes for a random window.
            Err(wqt_core::Error::EmptyShell { .. }) => return Ok(()),
            Err(other) => return Err(TestCaseError::Fail(format!("{other}").into())),
        };
        let p = shell.projector().entries();
        prop_assert!(max_abs(&(p * p - p)) < 1e-10);
        let h = model.hamiltonian().entries();
        prop_assert!(max_abs(&(h * p - p * h)) < 1e-8);
        // The uniform state on the shell is stationary.
        let w = uniform_state(&shell).unwrap();
        let wt = evolve_density(&w, &model, 3.7).unwrap();
        prop_assert!(max_abs(&(wt.entries() - w.entries())) < 1e-8);
    }
}
