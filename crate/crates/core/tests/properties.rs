use proptest::prelude::*;
use statrs::function::gamma::ln_gamma;
use walkplan::analysis::{self, LlrSettings, SpeedSeries, SpeedUnit};
use walkplan::planner::{self, PlanSpec, SolverSettings, Strategy as Plan};
use walkplan::terrain::{self, TerrainProfile};
use walkplan::walker::{self, ModelParams, Units};

fn series(values: Vec<f64>) -> SpeedSeries {
    let idx = (0..values.len() as i64).collect();
    SpeedSeries::new("x", "T", idx, values, SpeedUnit::Dimensionless).unwrap()
}

fn gentle_terrain() -> impl Strategy<Value = TerrainProfile> {
    (
        prop::collection::vec(-1i32..=1, 1..6),
        0usize..3,
        0usize..3,
        any::<bool>(),
    )
        .prop_map(|(steps, before, after, sustain)| {
            // Integrate step changes of at most one multiple.
            let mut h = 0;
            let multiples = steps
                .into_iter()
                .map(|d| {
                    h += d;
                    h
                })
                .collect();
            let mut t = TerrainProfile::new("gen", multiples).with_padding(before, after);
            t.sustain = sustain;
            t
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn periodic_gait_is_a_fixed_point(alpha in 0.2f64..0.6, u in 0.01f64..0.08) {
        let Ok(p) = ModelParams::new(alpha, u, 0.79) else {
            prop_assert!((2.0 * u).sqrt() <= alpha * alpha.tan());
            return Ok(());
        };
        let v = p.pre_transition_speed();
        let out = walker::advance(alpha, v, u, 0.0, 0.0).unwrap();
        prop_assert!((out.next_pre_transition - v).abs() < 1e-12 * v.max(1.0));
        prop_assert!((out.step_time - p.step_time).abs() < 1e-12);
        prop_assert!((out.midstance_speed - p.midstance_speed).abs() < 1e-12);
    }

    #[test]
    fn passive_steps_decay_by_cos_two_alpha(alpha in 0.2f64..0.6, v in 3.0f64..10.0) {
        let out = walker::advance(alpha, v, 0.0, 0.0, 0.0).unwrap();
        prop_assert!((out.next_pre_transition / v - (2.0 * alpha).cos()).abs() < 1e-12);
    }

    #[test]
    fn unit_conversions_round_trip(leg in 0.5f64..1.5, g in 1.0f64..25.0, x in -10.0f64..10.0) {
        let units = Units { leg_length: leg, gravity: g };
        prop_assert!((units.speed_from_si(units.speed_to_si(x)) - x).abs() < 1e-12);
        prop_assert!((units.time_from_si(units.time_to_si(x)) - x).abs() < 1e-12);
        prop_assert!((units.work_from_si(units.work_to_si(x)) - x).abs() < 1e-9);
        prop_assert!((units.length_from_si(units.length_to_si(x)) - x).abs() < 1e-12);
    }

    #[test]
    fn terrain_file_round_trip(t in gentle_terrain(), unit in prop::sample::select(vec![0.05, 0.075, 0.1])) {
        let t = t.with_unit_height(unit);
        let back: TerrainProfile = t.to_file_string().parse().unwrap();
        prop_assert_eq!(back.padded_multiples(), t.padded_multiples());
        prop_assert_eq!(back.unit_height, t.unit_height);
        prop_assert_eq!(back.to_file_string(), t.to_file_string());
    }

    #[test]
    fn reversing_twice_is_identity(t in gentle_terrain()) {
        let twice = t.reversed().reversed();
        prop_assert_eq!(twice.padded_multiples(), t.padded_multiples());
        prop_assert_eq!(&twice.name, &t.name);
        prop_assert_eq!(t.reversed().step_count(), t.step_count());
    }

    #[test]
    fn disturbances_sum_to_net_elevation(t in gentle_terrain(), s in 0.5f64..1.0) {
        let deltas = t.disturbances(s).unwrap();
        prop_assert_eq!(deltas.len(), t.step_count());
        let rise: f64 = deltas.iter().map(|d| s * d.sin()).sum();
        prop_assert!((rise - t.net_elevation()).abs() < 1e-12);
    }

    #[test]
    fn rollout_time_gain_bookkeeping(
        t in gentle_terrain(),
        scale in prop::collection::vec(0.9f64..1.3, 12),
    ) {
        let p = ModelParams::nominal();
        let pushoffs: Vec<f64> = (0..t.step_count()).map(|i| p.pushoff * scale[i % scale.len()]).collect();
        let Ok(traj) = walker::rollout(&p, &t, &pushoffs) else { return Ok(()); };
        let mut elapsed = 0.0;
        for (k, s) in traj.steps.iter().enumerate() {
            prop_assert!((s.start_time - elapsed).abs() < 1e-12);
            elapsed += s.step_time;
            prop_assert!(((k + 1) as f64 * p.step_time - elapsed - s.time_gain).abs() < 1e-9);
        }
        prop_assert!((traj.total_time - elapsed).abs() < 1e-9);
        prop_assert!((traj.total_work - pushoffs.iter().sum::<f64>()).abs() < 1e-12);
        // The allocation-free path agrees with the full rollout.
        let deltas = t.disturbances_with_exit(p.step_length).unwrap();
        let (v, time) = walker::simulate(p.alpha, p.pre_transition_speed(), &deltas, &pushoffs).unwrap();
        prop_assert!((v - traj.final_speed).abs() < 1e-12);
        prop_assert!((time - traj.total_time).abs() < 1e-9);
    }

    #[test]
    fn rho_is_affine_invariant(
        a in prop::collection::vec(-1.0f64..1.0, 4..30),
        slope in 0.1f64..10.0,
        offset in -5.0f64..5.0,
        seed in any::<u64>(),
    ) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x * 0.3 + ((i as u64 ^ seed) % 7) as f64 * 0.1).collect();
        let Ok(base) = analysis::pearson_slices(&a, &b) else { return Ok(()); };
        let moved: Vec<f64> = a.iter().map(|x| slope * x + offset).collect();
        let flipped: Vec<f64> = a.iter().map(|x| -slope * x + offset).collect();
        let r = analysis::pearson_slices(&moved, &b).unwrap();
        prop_assert!((r.rho - base.rho).abs() < 1e-9);
        prop_assert!((analysis::pearson_slices(&flipped, &b).unwrap().rho + base.rho).abs() < 1e-9);
        prop_assert!(base.rho.abs() <= 1.0 + 1e-12);
        if let Some((lo, hi)) = base.confidence_interval(0.95) {
            prop_assert!(lo <= base.rho && base.rho <= hi);
        }
    }

    #[test]
    fn fit_scale_recovers_affine_maps(
        model in prop::collection::vec(-1.0f64..1.0, 3..20),
        slope in 0.1f64..5.0,
        intercept in -2.0f64..2.0,
    ) {
        // Data are an affine image of the model; the fit maps them back.
        let data: Vec<f64> = model.iter().map(|m| (m - intercept) / slope).collect();
        let Ok(fit) = analysis::fit_scale_slices(&model, &data) else { return Ok(()); };
        prop_assert!((fit.slope - slope).abs() < 1e-6 * slope.max(1.0));
        prop_assert!((fit.intercept - intercept).abs() < 1e-6);
    }

    #[test]
    fn constant_models_carry_no_information(
        values in prop::collection::vec(prop::collection::vec(0.3f64..0.6, 6), 2..5),
        level in 0.3f64..0.6,
        seed in any::<u64>(),
    ) {
        let subjects: Vec<SpeedSeries> = values.into_iter().map(series).collect();
        let model = series(vec![level; 6]);
        let settings = LlrSettings { n_shuffles: 20, seed, ..LlrSettings::default() };
        let s = analysis::loglik_ratio(&model, &subjects, &settings).unwrap();
        prop_assert!(s.llr_values.iter().all(|x| x.abs() < 1e-9));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn planned_trajectories_meet_constraints(t in gentle_terrain()) {
        let p = ModelParams::nominal();
        let r = planner::plan(&p, &t, &PlanSpec::new(Plan::MinEnergy)).unwrap();
        prop_assert!(r.converged);
        prop_assert!(r.residuals.max_abs() < 1e-6);
        let nominal = planner::plan(&p, &t, &PlanSpec::new(Plan::Tight)).unwrap();
        prop_assert!(r.trajectory.total_work <= nominal.trajectory.total_work + 1e-7);
        let horizon = planner::plan(&p, &t, &PlanSpec::new(Plan::horizon(t.step_count()))).unwrap();
        prop_assert!((horizon.trajectory.total_work - r.trajectory.total_work).abs() < 1e-6);
    }
}

/// Log density of a location-scale t distribution, written out directly.
fn t_ln_pdf(x: f64, loc: f64, scale: f64, dof: f64) -> f64 {
    let z = (x - loc) / scale;
    ln_gamma((dof + 1.0) / 2.0)
        - ln_gamma(dof / 2.0)
        - 0.5 * (dof * std::f64::consts::PI).ln()
        - scale.ln()
        - (dof + 1.0) / 2.0 * (1.0 + z * z / dof).ln()
}

#[test]
fn three_step_llr_matches_exhaustive_oracle() {
    let model = series(vec![0.40, 0.47, 0.43]);
    let rows = [
        [0.41, 0.46, 0.44],
        [0.39, 0.49, 0.42],
        [0.42, 0.45, 0.45],
        [0.40, 0.48, 0.41],
    ];
    let subjects: Vec<SpeedSeries> = rows.iter().map(|r| series(r.to_vec())).collect();
    let k = rows.len() as f64;
    let dof = k - 1.0;
    let scales: Vec<f64> = (0..3)
        .map(|i| {
            let m = rows.iter().map(|r| r[i]).sum::<f64>() / k;
            (rows.iter().map(|r| (r[i] - m).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
        })
        .collect();
    let loglik = |loc: &[f64]| -> f64 {
        (0..3)
            .map(|i| {
                rows.iter()
                    .map(|r| t_ln_pdf(r[i], loc[i], scales[i], dof))
                    .sum::<f64>()
            })
            .sum()
    };
    let perms = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let base = loglik(&model.speeds);
    let settings = LlrSettings::default();
    let mut expected_mean = 0.0;
    for perm in perms {
        let shuffled: Vec<f64> = perm.iter().map(|&i| model.speeds[i]).collect();
        let expected = base - loglik(&shuffled);
        let got =
            analysis::loglik_ratio_for_permutation(&model, &subjects, &perm, &settings).unwrap();
        assert!(
            (got - expected).abs() < 1e-10,
            "{perm:?}: {got} vs {expected}"
        );
        expected_mean += expected / 6.0;
    }
    // Many seeded shuffles average to the exhaustive mean.
    let s = analysis::loglik_ratio(
        &model,
        &subjects,
        &LlrSettings {
            n_shuffles: 6000,
            ..settings
        },
    )
    .unwrap();
    assert!((s.loglik_model - base).abs() < 1e-10);
    let sem = s.llr_sd / (s.llr_values.len() as f64).sqrt();
    assert!((s.llr_mean - expected_mean).abs() < 4.0 * sem + 1e-12);
}

fn planned_model(name: &str) -> SpeedSeries {
    let p = ModelParams::nominal();
    let t = terrain::Catalog::builtin().get(name).unwrap();
    let r = planner::plan(&p, &t, &PlanSpec::new(Plan::MinEnergy)).unwrap();
    SpeedSeries::from_trajectory("model", name, &r.trajectory)
}

fn noisy_subjects(model: &SpeedSeries, noise: f64, count: usize, seed: u64) -> Vec<SpeedSeries> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StudentT};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let t = StudentT::new(4.0).unwrap();
    (0..count)
        .map(|k| {
            let mut s = model.clone();
            s.label = format!("s{k}");
            for v in &mut s.speeds {
                *v += noise * t.sample(&mut rng);
            }
            s
        })
        .collect()
}

#[test]
fn synthetic_subjects_sharpen_as_noise_shrinks() {
    let model = planned_model("C1");
    let units = ModelParams::nominal().units();
    let settings = LlrSettings {
        n_shuffles: 300,
        seed: 9,
        ..LlrSettings::default()
    };
    let mut previous = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (k, noise) in [0.03, 0.01, 0.003, 0.001].into_iter().enumerate() {
        let subjects = noisy_subjects(&model, noise, 10, k as u64);
        let r = analysis::compare(&model, &subjects, &units, &settings).unwrap();
        assert!(
            r.pearson_rho > previous.0,
            "rho {} at noise {noise}",
            r.pearson_rho
        );
        assert!(
            r.llr.bits_per_step > previous.1,
            "bits {} at noise {noise}",
            r.llr.bits_per_step
        );
        previous = (r.pearson_rho, r.llr.bits_per_step);
    }
    assert!(previous.0 > 0.999);
    assert!(previous.1 > 2.0);
}

#[test]
fn shuffled_subjects_are_uncorrelated() {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let model = planned_model("C1");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
    // Across many independent shuffles the rejection rate at 5% stays near 5%.
    let trials = 200;
    let mut rejected = 0;
    for t in 0..trials {
        let mut subjects = noisy_subjects(&model, 0.001, 6, 1000 + t);
        for s in &mut subjects {
            s.speeds.shuffle(&mut rng);
        }
        let mean = analysis::mean_series("mean", &subjects).unwrap();
        if analysis::pearson(&model, &mean).unwrap().p_value < 0.05 {
            rejected += 1;
        }
    }
    // Binomial(200, 0.05): mean 10, sd about 3.1.
    assert!(rejected <= 22, "{rejected} of {trials} rejected");
}

#[test]
fn llr_mean_is_seed_invariant_within_sampling_error() {
    let model = planned_model("UD");
    let subjects = noisy_subjects(&model, 0.01, 6, 3);
    let run = |seed| {
        analysis::loglik_ratio(
            &model,
            &subjects,
            &LlrSettings {
                n_shuffles: 2000,
                seed,
                ..LlrSettings::default()
            },
        )
        .unwrap()
    };
    let a = run(1);
    let b = run(2);
    let n = a.llr_values.len() as f64;
    let tol = 3.0 * (a.llr_sd.powi(2) + b.llr_sd.powi(2)).sqrt() / n.sqrt();
    assert!(
        (a.llr_mean - b.llr_mean).abs() < tol,
        "{} vs {} (tol {tol})",
        a.llr_mean,
        b.llr_mean
    );
    assert_eq!(run(1).llr_values, a.llr_values);
}

#[test]
fn solver_settings_reach_the_planner() {
    let p = ModelParams::nominal();
    let t = terrain::pyramid();
    let loose = SolverSettings {
        max_iterations: 1,
        ..SolverSettings::default()
    };
    let r = planner::plan(
        &p,
        &t,
        &PlanSpec {
            strategy: Plan::MinEnergy,
            solver: loose,
        },
    )
    .unwrap();
    assert!(!r.converged);
    assert!(!r.issues.is_empty());
}
