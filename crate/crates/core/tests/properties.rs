mod common;

use nalgebra::DVector;
use proptest::prelude::*;

use latentprod::classo::{
    classify, firm_estimates, fit_with, match_labels, post_lasso, pooled_estimate,
    CLassoConfig, Classification, WeightingScheme,
};
use latentprod::empirical::{mean_squared_residual, tfp_levels, FitRecord};
use latentprod::panel::{Observation, Vars};
use latentprod::selection::{ic_from_msr, select_j, PenaltySpec};
use latentprod::simulate::{draw_panel, sim_spec, true_theta};
use latentprod::{CsvSchema, PanelData};

fn vars_strategy() -> impl Strategy<Value = Vars> {
    (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(y, k, l, m)| Vars {
        y,
        k,
        l,
        m,
        s: m - y,
    })
}

fn panel_strategy() -> impl Strategy<Value = PanelData> {
    let firm = (-3i64..3, prop::collection::vec(vars_strategy(), 3..8));
    prop::collection::vec(firm, 1..6).prop_map(|firms| {
        let mut obs = Vec::new();
        for (i, (start, vars)) in firms.into_iter().enumerate() {
            // rows deliberately emitted in reverse period order
            for (t, v) in vars.into_iter().enumerate().rev() {
                obs.push(Observation {
                    firm_id: format!("f{i}"),
                    period: start + t as i64,
                    vars: v,
                    extra: vec![i as f64],
                });
            }
        }
        PanelData::from_observations(obs, vec!["code".into()], false, true).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lags_pair_each_period_with_its_predecessor(panel in panel_strategy()) {
        let lags = panel.build_lags();
        prop_assert_eq!(lags.len(), panel.num_firms());
        for (f, rows) in panel.firms().iter().zip(&lags) {
            prop_assert_eq!(rows.len(), f.len() - 1);
            prop_assert_eq!(rows.len(), f.usable_periods());
            for (t, row) in rows.iter().enumerate() {
                prop_assert_eq!(row.period, f.first_period + t as i64 + 1);
                prop_assert_eq!(row.cur, f.vars[t + 1]);
                prop_assert_eq!(row.lag, f.vars[t]);
            }
        }
        prop_assert_eq!(panel.num_usable(), panel.num_observations() - panel.num_firms());
    }

    #[test]
    fn csv_round_trip(panel in panel_strategy()) {
        let mut buf = Vec::new();
        panel.write_csv(&mut buf).unwrap();
        let schema = CsvSchema::default().with_extra(&["code"]);
        let back = PanelData::read_csv(buf.as_slice(), &schema).unwrap();
        prop_assert_eq!(back, panel);
    }

    #[test]
    fn criterion_increases_in_fit_and_in_groups(
        msr in 1e-6..10.0f64,
        factor in 1.0001..5.0f64,
        groups in 1usize..8,
        n in 10.0..1000.0f64,
        t in 3.0..60.0f64,
        r in 0.05..2.0f64,
        use_p2 in any::<bool>(),
    ) {
        let pen = if use_p2 { PenaltySpec::p2(r) } else { PenaltySpec::p1(r) };
        let base = ic_from_msr(msr, groups, n, t, 5, &pen).value;
        prop_assert!(ic_from_msr(msr * factor, groups, n, t, 5, &pen).value > base);
        prop_assert!(ic_from_msr(msr, groups + 1, n, t, 5, &pen).value > base);
    }

    #[test]
    fn classification_is_permutation_equivariant(
        pi in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 3), 1..30),
        centers in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 3), 2..6),
        seed in any::<u64>(),
    ) {
        let pi: Vec<DVector<f64>> = pi.into_iter().map(DVector::from_vec).collect();
        let theta: Vec<DVector<f64>> = centers.into_iter().map(DVector::from_vec).collect();
        let j = theta.len();
        // a seeded shuffle: perm[new] = old
        let mut perm: Vec<usize> = (0..j).collect();
        let mut s = seed;
        for k in (1..j).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(k, (s >> 33) as usize % (k + 1));
        }
        let permuted: Vec<DVector<f64>> = perm.iter().map(|&o| theta[o].clone()).collect();
        let a = classify(&pi, &theta, None).unwrap();
        let b = classify(&pi, &permuted, None).unwrap();
        prop_assert_eq!(&a.distance, &b.distance);
        for (x, y) in a.assignment.iter().zip(&b.assignment) {
            let (x, y) = (x.unwrap(), y.unwrap());
            prop_assert_eq!(perm[y], x);
        }
    }
}

#[test]
fn single_group_post_lasso_is_pooled_gmm() {
    let sim = draw_panel(&common::small(24, 10, 5)).unwrap();
    let spec = sim_spec();
    let init = firm_estimates(&sim.panel, &spec, WeightingScheme::Identity).unwrap();
    let cls = Classification::from_labels(&vec![0; 24], 1).unwrap();
    let est = post_lasso(&sim.panel, &cls, &spec, WeightingScheme::Identity, &init).unwrap();
    let pooled = pooled_estimate(&sim.panel.build_lags(), &spec).unwrap();
    let gap = common::max_abs_diff(est.get(0).unwrap().theta.as_slice(), pooled.as_slice());
    assert!(gap < 1e-7, "gap {gap}");
}

#[test]
fn one_group_fit_reports_the_pooled_estimate() {
    let sim = draw_panel(&common::homogeneous(20, 8, 9)).unwrap();
    let spec = sim_spec();
    let init = firm_estimates(&sim.panel, &spec, WeightingScheme::Identity).unwrap();
    let res = fit_with(&sim.panel, &CLassoConfig::with_groups(1), &spec, &init).unwrap();
    assert!(res.classification.assignment.iter().all(|a| *a == Some(0)));
    let gap = common::max_abs_diff(res.estimates.get(0).unwrap().theta.as_slice(), init.pooled.as_slice());
    assert!(gap < 1e-7, "gap {gap}");
}

#[test]
fn fits_do_not_depend_on_the_thread_count() {
    let sim = draw_panel(&common::small(18, 8, 2)).unwrap();
    let spec = sim_spec();
    let cfg = CLassoConfig::with_groups(2);
    let run = || {
        let init = firm_estimates(&sim.panel, &spec, WeightingScheme::Identity).unwrap();
        let r = fit_with(&sim.panel, &cfg, &spec, &init).unwrap();
        (r.classification, r.outer_trace, r.estimates.msr())
    };
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
    let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(run);
    assert_eq!(one, three);
}

fn truth_record(sim: &latentprod::simulate::SimulatedPanel) -> FitRecord {
    let cfg = &sim.config;
    FitRecord {
        spec: sim_spec(),
        lambda: None,
        groups: cfg.groups.len(),
        firms: sim.panel.firms().iter().map(|f| f.id.clone()).collect(),
        assignment: sim.groups.iter().map(|&g| Some(g)).collect(),
        theta: cfg.groups.iter().map(|g| Some(true_theta(g).as_slice().to_vec())).collect(),
        std_errors: vec![None; cfg.groups.len()],
    }
}

#[test]
fn noiseless_panel_at_truth_has_zero_residuals_and_exact_tfp() {
    let sim = draw_panel(&common::noiseless(12, 6, 4)).unwrap();
    let record = truth_record(&sim);
    let (msr, count) = mean_squared_residual(&sim.panel, &record).unwrap();
    assert_eq!(count, 12 * 6);
    assert!(msr < 1e-26, "msr {msr}");
    let rows = tfp_levels(&sim.panel, &record).unwrap();
    assert_eq!(rows.len(), 12 * 7);
    for row in &rows {
        let i: usize = row.firm.parse::<usize>().unwrap() - 1;
        let omega = sim.latent[i].omega[row.period as usize];
        assert!(row.tfp > 0.0);
        assert!((row.tfp / omega.exp() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn true_partition_fits_better_than_a_scrambled_one() {
    let sim = draw_panel(&common::small(30, 12, 8)).unwrap();
    let spec = sim_spec();
    let init = firm_estimates(&sim.panel, &spec, WeightingScheme::Identity).unwrap();
    let truth = Classification::from_labels(&sim.groups, 3).unwrap();
    let scrambled: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let scrambled = Classification::from_labels(&scrambled, 3).unwrap();
    let a = post_lasso(&sim.panel, &truth, &spec, WeightingScheme::Identity, &init).unwrap();
    let b = post_lasso(&sim.panel, &scrambled, &spec, WeightingScheme::Identity, &init).unwrap();
    assert!(a.msr() < b.msr(), "{} vs {}", a.msr(), b.msr());
}

#[test]
fn homogeneous_panel_selects_one_group() {
    let sim = draw_panel(&common::homogeneous(60, 15, 21)).unwrap();
    let pens = [PenaltySpec::p1(1.0), PenaltySpec::p2(0.25)];
    let res = select_j(
        &sim.panel,
        15f64.powf(-0.25),
        &[1, 2, 3],
        &pens,
        &sim_spec(),
        &CLassoConfig::default(),
        None,
    )
    .unwrap();
    for s in &res.selected {
        assert_eq!(s.as_ref().unwrap().groups, 1);
    }
}

#[test]
fn estimated_groups_recover_a_well_separated_design() {
    let sim = draw_panel(&common::small(45, 30, 6)).unwrap();
    let spec = sim_spec();
    let init = firm_estimates(&sim.panel, &spec, WeightingScheme::Identity).unwrap();
    let res = fit_with(&sim.panel, &CLassoConfig::with_groups(3), &spec, &init).unwrap();
    let m = match_labels(&res.classification, &sim.groups, 3).unwrap();
    assert!(m.accuracy >= 0.95, "accuracy {}", m.accuracy);
    // the outer criterion never increases between accepted iterations
    for w in res.outer_trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-10 * (1.0 + w[0].abs()));
    }
}
