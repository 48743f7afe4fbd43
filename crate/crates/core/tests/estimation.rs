use mziln::composition::CompositionSample;
use mziln::regression::{
    assemble_system, build_design_row_block, fit_mle_lowdim, fit_ols, CovarianceStructure,
    MleOptions, WorkingCovariance,
};
use mziln::simulation::{generate_lowdim, run_highdim_scenario, ScenarioConfig, ScenarioMode};

fn lowdim(n: usize, n_taxa: usize, rho: f64, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        n_subjects: n,
        n_taxa,
        outcome_rho: rho,
        seed,
        folds: 2,
        ..ScenarioConfig::table1()
    }
}

/// Root mean square error of identity-working OLS over replicates.
fn ols_error(n: usize, reps: u64) -> (f64, f64) {
    let config = lowdim(n, 6, 0.3, 7);
    let mut sq = 0.0;
    let mut bias = [0.0; 10];
    for r in 0..reps {
        let data = generate_lowdim(&config, r).unwrap();
        let sys = assemble_system(&data.samples, &data.covariates, &WorkingCovariance::Identity).unwrap();
        let beta = fit_ols(&sys).unwrap();
        for (i, (b, t)) in beta.as_slice().iter().zip(data.truth.beta.as_slice()).enumerate() {
            sq += (b - t).powi(2);
            bias[i] += (b - t) / reps as f64;
        }
    }
    let rmse = (sq / (reps as f64 * 10.0)).sqrt();
    (rmse, bias.iter().fold(0.0, |m: f64, b| m.max(b.abs())))
}

#[test]
fn identity_working_covariance_is_consistent() {
    let (rmse_small, _) = ols_error(250, 30);
    let (rmse_large, bias_large) = ols_error(1000, 30);
    // Error should fall roughly as 1/sqrt(N): halving, with slack.
    assert!(rmse_large < 0.7 * rmse_small, "{rmse_large} vs {rmse_small}");
    assert!(bias_large < 4.0 * rmse_large / 30f64.sqrt(), "bias {bias_large}");
}

#[test]
fn exchangeable_fit_recovers_identity_truth() {
    let reps = 50;
    let (mut sds, mut rhos) = (Vec::new(), Vec::new());
    for r in 0..reps {
        let data = generate_lowdim(&lowdim(300, 5, 0.0, 11), r).unwrap();
        let fit = fit_mle_lowdim(&data.samples, &data.covariates, CovarianceStructure::Exchangeable, MleOptions::default()).unwrap();
        let WorkingCovariance::Exchangeable { sd, rho } = fit.covariance else { panic!() };
        sds.push(sd);
        rhos.push(rho);
    }
    let summary = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        (m, s / n.sqrt())
    };
    let (sd_mean, sd_se) = summary(&sds);
    let (rho_mean, rho_se) = summary(&rhos);
    // The MLE of a scale is biased by O(1/N); allow that on top of Monte Carlo error.
    assert!((sd_mean - 1.0).abs() < 3.0 * sd_se + 0.01, "sd {sd_mean} ± {sd_se}");
    assert!(rho_mean.abs() < 3.0 * rho_se + 0.01, "rho {rho_mean} ± {rho_se}");
}

#[test]
fn noiseless_data_is_recovered_exactly() {
    let config = lowdim(200, 8, 0.3, 3);
    let data = generate_lowdim(&config, 0).unwrap();
    // Replace the noisy samples by their noiseless counterparts on the same
    // presence patterns.
    let samples: Vec<CompositionSample> = data
        .samples
        .iter()
        .zip(&data.covariates)
        .map(|(s, c)| {
            let mu = build_design_row_block(c, 7).mul(&data.truth.beta);
            let weights: Vec<f64> = s
                .presence()
                .iter()
                .enumerate()
                .map(|(k, z)| if *z { if k < 7 { mu[k].exp() } else { 1.0 } } else { 0.0 })
                .collect();
            CompositionSample::normalized(weights).unwrap()
        })
        .collect();
    let sys = assemble_system(&samples, &data.covariates, &WorkingCovariance::Identity).unwrap();
    let beta = fit_ols(&sys).unwrap();
    for (b, t) in beta.as_slice().iter().zip(data.truth.beta.as_slice()) {
        assert!((b - t).abs() < 1e-6);
    }
}

#[test]
fn noiseless_highdim_recall_is_near_one() {
    let config = ScenarioConfig {
        snr: f64::INFINITY,
        n_replicates: 4,
        ..ScenarioConfig::desk_highdim()
    };
    let report = run_highdim_scenario(&config).unwrap();
    assert_eq!(report.n_failed, 0);
    assert!(report.mziln.recall_mean >= 0.95, "{:?}", report.mziln);
}

#[test]
fn recall_is_stable_across_reference_taxa() {
    let base = ScenarioConfig {
        n_replicates: 10,
        seed: 5,
        ..ScenarioConfig::desk_highdim()
    };
    assert_eq!(base.mode, ScenarioMode::HighDim);
    let recall = |r: Option<usize>| {
        run_highdim_scenario(&ScenarioConfig { reference_taxon: r, ..base.clone() })
            .unwrap()
            .mziln
            .recall_mean
    };
    // Two arbitrary non-default reference taxa.
    let (a, b) = (recall(Some(17)), recall(Some(33)));
    assert!((a - b).abs() <= 0.15, "{a} vs {b}");
}
