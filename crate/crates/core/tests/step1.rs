use nalgebra::DMatrix;
use wpv_core::data::{stacked_moments, Centering, PanelDataset};
use wpv_core::measurement::FitOptions;
use wpv_core::scores::{center, weight_matrix, CenteringInputs, Step1};
use wpv_core::sim::{generate, SimConfig};
use wpv_core::spd::SpdMatrix;

// Population ML fit of the AR(1)-plus-trait model to each variable's
// covariance under the cross-lagged generator (K = 4, trait correlation 0.3),
// computed with an independent BFGS minimiser. The AR(1) model omits the
// cross-lagged paths, so φ̂² converges here rather than to φ².
const PSEUDO_TRUE_PHI2: [(f64, [f64; 3]); 3] = [
    (10.0 / 9.0, [3.7831, 4.3099, 3.5857]),
    (30.0 / 7.0, [7.0161, 7.5604, 6.8295]),
    (10.0, [12.813, 13.3833, 12.6461]),
];

// Population covariance of the trait predictions (Y–A, Y–L, A–L).
const PSEUDO_TRUE_TRAIT_COV: [(f64, [f64; 3]); 3] = [
    (10.0 / 9.0, [2.727, 2.242, 2.53]),
    (30.0 / 7.0, [4.124, 3.58, 3.916]),
    (10.0, [6.232, 5.63, 6.018]),
];

fn panel(n: usize, phi2: f64, seed: u64) -> PanelDataset {
    generate(&SimConfig {
        n_persons: n,
        k_times: 4,
        phi2,
        seed,
        ..SimConfig::default()
    })
    .unwrap()
    .observed
}

#[test]
fn trait_variance_converges_to_pseudo_true_value() {
    for (j, (phi2, want)) in PSEUDO_TRUE_PHI2.iter().enumerate() {
        let data = panel(200_000, *phi2, 60 + j as u64);
        let s1 = Step1::fit(&data, &FitOptions::default()).unwrap();
        for v in 0..3 {
            let got = s1.fits[v].params.phi2;
            assert!((got / want[v] - 1.0).abs() < 0.03, "φ²={phi2} variable {v}: {got} vs {}", want[v]);
        }
        let (_, cov) = PSEUDO_TRUE_TRAIT_COV[j];
        let phi = &s1.trait_cov.phi;
        for (k, (a, b)) in [(0, 1), (0, 2), (1, 2)].into_iter().enumerate() {
            assert!((phi[(a, b)] / cov[k] - 1.0).abs() < 0.03, "φ²={phi2} ({a},{b}): {}", phi[(a, b)]);
        }
    }
}

#[test]
fn proposed_scores_preserve_the_within_covariance() {
    let mut checked = 0;
    for (seed, phi2) in [(70, 10.0), (71, 30.0 / 7.0), (72, 10.0 / 9.0)] {
        let data = panel(1000, phi2, seed);
        let s1 = match Step1::fit(&data, &FitOptions::default()) {
            Ok(s) => s,
            Err(_) => continue,
        };
        let w = &s1.weights.w;
        let psi = s1.psi.psi.matrix();
        let scale = psi.norm();
        assert!((w.transpose() * &s1.sample_cov * w - psi).norm() < 1e-6 * scale);

        let inputs = CenteringInputs {
            step1: Some(&s1),
            true_traits: None,
        };
        let scores = center(&data, Centering::Proposed, inputs).unwrap();
        let as_panel = PanelDataset::new(data.variables().to_vec(), scores.blocks().to_vec()).unwrap();
        let (_, cov) = stacked_moments(&as_panel, &[0, 1, 2]).unwrap();
        assert!((cov - psi).norm() < 1e-6 * scale);
        checked += 1;
    }
    assert!(checked >= 2);
}

#[test]
fn zero_trait_covariance_gives_identity_weights() {
    let data = panel(500, 10.0, 73);
    let (_, s) = stacked_moments(&data, &[0, 1, 2]).unwrap();
    let sigma = SpdMatrix::new(s).unwrap();
    let w = weight_matrix(&sigma, &sigma).unwrap();
    let eye = DMatrix::<f64>::identity(15, 15);
    assert!((w.w - eye).amax() < 1e-10);
}
