use std::sync::{Arc, OnceLock};

use fracks_core::energy::{energy_report, vhls_ratio};
use fracks_core::riesz::build_kernel;
use fracks_core::solver::{step, Reconstruction, SolverConfig, SolverState, StepOutcome};
use fracks_core::{DensityField, ModelParams, RadialGrid, RieszKernel};
use proptest::prelude::*;

const N: usize = 48;

fn kernel() -> &'static RieszKernel {
    static K: OnceLock<RieszKernel> = OnceLock::new();
    K.get_or_init(|| {
        let g = Arc::new(RadialGrid::uniform(3, N, 1.0).unwrap());
        build_kernel(g, 1.25, 0.0).unwrap()
    })
}

fn field(values: Vec<f64>) -> DensityField {
    DensityField::new(kernel().grid().clone(), values).unwrap()
}

fn nonzero_values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.0..50.0f64], N)
        .prop_filter("needs some mass", |v| v.iter().any(|&x| x > 1e-3))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rearrangement_is_equimeasurable(values in nonzero_values()) {
        let u = field(values);
        let star = u.rearrange();
        prop_assert!(star.is_non_increasing());
        prop_assert!(close(star.mass(), u.mass(), 1e-12));
        for p in [7.0 / 6.0, 2.0] {
            prop_assert!(close(star.lp_norm(p).unwrap(), u.lp_norm(p).unwrap(), 1e-12));
        }
        prop_assert_eq!(star.linf_norm(), u.linf_norm());
    }

    #[test]
    fn on_grid_rearrangement_keeps_mass_and_max(values in nonzero_values()) {
        let u = field(values);
        let star = u.rearrange_on_grid();
        prop_assert!(star.is_non_increasing());
        prop_assert!(close(star.mass(), u.mass(), 1e-12));
        prop_assert!(star.linf_norm() <= u.linf_norm());
        prop_assert!(star.lp_norm(2.0).unwrap() <= u.lp_norm(2.0).unwrap() * (1.0 + 1e-12));
    }

    #[test]
    fn one_step_conserves_mass_and_positivity(
        values in nonzero_values(),
        recon in prop_oneof![
            Just(Reconstruction::FirstOrder),
            Just(Reconstruction::Muscl),
            Just(Reconstruction::Primitive),
        ],
    ) {
        let p = ModelParams::new(3, 1.25, 0.0).unwrap();
        let u = field(values);
        let cfg = SolverConfig { reconstruction: recon, ..SolverConfig::default() };
        match step(&SolverState::new(u.clone()), kernel(), &p, &cfg).unwrap() {
            StepOutcome::Advanced { state, clipped_mass } => {
                prop_assert_eq!(clipped_mass, 0.0);
                prop_assert!(state.u.values().iter().all(|&x| x >= 0.0));
                prop_assert!(close(state.u.mass(), u.mass(), 1e-13));
            }
            StepOutcome::Stalled { .. } => prop_assert!(false, "stalled on a fresh field"),
        }
    }

    #[test]
    fn report_parts_are_consistent(values in nonzero_values(), a in 0.1..10.0f64) {
        let p = ModelParams::new(3, 1.25, 0.0).unwrap();
        let u = field(values);
        let r = energy_report(&u, kernel(), &p, Reconstruction::Primitive).unwrap();
        prop_assert_eq!(r.f, r.s - r.w);
        prop_assert!(r.d >= 0.0);
        let ua = u.scaled_by(a).unwrap();
        let ra = energy_report(&ua, kernel(), &p, Reconstruction::Primitive).unwrap();
        prop_assert!(close(ra.w, a * a * r.w, 1e-12));
        prop_assert!(close(ra.s, a.powf(p.m()) * r.s, 1e-12));
    }

    #[test]
    fn vhls_ratio_is_bounded(values in nonzero_values()) {
        let p = ModelParams::new(3, 1.25, 0.0).unwrap();
        let j = vhls_ratio(&field(values), kernel(), &p).unwrap();
        prop_assert!(j > 0.0 && j <= 1.02 * p.constants().c_hls);
    }

    #[test]
    fn scaling_transforms_mass(values in nonzero_values(), lambda in 0.1..10.0f64, mu in 0.25..4.0f64) {
        let u = field(values);
        let v = u.scale(lambda, mu).unwrap();
        prop_assert!(close(v.mass(), lambda * mu.powi(-3) * u.mass(), 1e-12));
    }
}
