//! Randomized end-to-end properties of render + loss + gradients.

use proptest::prelude::*;

use usrender::autodiff::{gradcheck, GradcheckOptions};
use usrender::labelmap::LabelMap;
use usrender::renderer::{render, render_with, ExecMode, FanGeometry, RenderConfig};
use usrender::tasks::{Polarity, Problem, TaskSpec};
use usrender::tissue::{flatten, project_constraints, ParamVector, ParameterTable, TissueParams};

fn table_strategy(k: usize) -> impl Strategy<Value = ParameterTable> {
    prop::collection::vec(
        (0.05f64..2.0, 0.5f64..5.0, 0.1f64..0.9, 0.1f64..0.9, 0.05f64..0.4),
        k,
    )
    .prop_map(|v| {
        ParameterTable::new(
            v.into_iter()
                .map(|(alpha, impedance, mu0, mu1, sigma0)| TissueParams {
                    alpha,
                    impedance,
                    mu0,
                    mu1,
                    sigma0,
                })
                .collect(),
        )
    })
}

fn map_strategy(k: usize) -> impl Strategy<Value = LabelMap> {
    prop::collection::vec(0..k as u8, 8 * 8).prop_map(move |labels| LabelMap::new(8, 8, labels, k).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn clamped_render_is_bounded(map in map_strategy(3), table in table_strategy(3), seed in any::<u64>()) {
        let cfg = RenderConfig { seed, ..RenderConfig::default() };
        let out = render(&map, &table, &cfg).unwrap();
        prop_assert!(out.bmode.min() >= 0.0 && out.bmode.max() <= 1.0);
        prop_assert!(out.transmission_map.min() >= 0.0 && out.transmission_map.max() <= 1.0);
        prop_assert!(out.attenuation_map.max() <= 1.0);
    }

    #[test]
    fn dice_gradients_match_finite_differences(
        map in map_strategy(3),
        table in table_strategy(3),
        tau in 0.1f64..0.6,
    ) {
        prop_assume!(map.labels().contains(&1));
        // unclamped, so the objective is smooth almost everywhere
        let cfg = RenderConfig { clamp_output: false, beta: 5.0, ..RenderConfig::default() };
        let task = TaskSpec::SoftDice { target_label: 1, polarity: Polarity::Bright, gate_gamma: 4.0, gate_tau: tau };
        let problem = Problem::new(&map, &cfg, task, 3).unwrap();
        let theta = flatten(&table);
        let report = gradcheck(&problem, theta.as_slice(), GradcheckOptions { tol: 1e-3, ..Default::default() }).unwrap();
        prop_assert!(report.passed, "{}", report.to_text());
    }

    #[test]
    fn parallel_matches_sequential_with_fan(map in map_strategy(4), table in table_strategy(4)) {
        let cfg = RenderConfig { fan: Some(FanGeometry::default_for(8, 8)), ..RenderConfig::default() };
        let a = render_with(&map, &table, &cfg, ExecMode::Sequential).unwrap().bmode;
        let b = render_with(&map, &table, &cfg, ExecMode::Parallel).unwrap().bmode;
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn projection_lands_in_feasible_set(v in prop::collection::vec(-10.0f64..10.0, 15)) {
        let p = project_constraints(&ParamVector(v));
        let t = usrender::tissue::unflatten(&p, 3).unwrap();
        prop_assert!(t.is_feasible());
    }
}
