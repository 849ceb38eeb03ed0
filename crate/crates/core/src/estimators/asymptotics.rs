use crate::elliptic::GroundState;
use crate::error::{Error, Result};
use crate::numerics::{Mat2, SymMat2};
use crate::steady_state::{feasibility_margin, feasible, grad_r, ModelConstants, NaturalParams};

/// Designs with `det(K)` at or below this are reported as singular.
pub const K_SINGULAR_DET: f64 = 1e-12;

/// Sum of gradient outer products `Σ_j ∇R(x_j) ∇R(x_j)ᵀ`.
pub fn cross_product(n: &NaturalParams, gs: &GroundState, positions: &[f64]) -> SymMat2 {
    positions.iter().map(|&x| SymMat2::outer(grad_r(n, gs, x))).fold(SymMat2::ZERO, |acc, m| acc.add(&m))
}

/// Sample mean of gradient outer products. Logs a warning for degenerate
/// designs (`det <= K_SINGULAR_DET`).
pub fn k_matrix(n: &NaturalParams, gs: &GroundState, positions: &[f64]) -> SymMat2 {
    if positions.is_empty() {
        return SymMat2::ZERO;
    }
    let k = cross_product(n, gs, positions).scale(1.0 / positions.len() as f64);
    if k.det() <= K_SINGULAR_DET {
        log::warn!("K matrix is singular (det = {:.3e}); design is degenerate", k.det());
    }
    k
}

/// Jacobian of `(μ, λ) -> (k_nf, k_pf)` laid out as
/// `[[∂k_nf/∂μ, ∂k_pf/∂μ], [∂k_nf/∂λ, ∂k_pf/∂λ]]`, so the model-parameter
/// covariance is `Aᵀ C A` for a natural-parameter covariance `C`.
pub fn delta_matrix_a(n: &NaturalParams, c: &ModelConstants, l1: f64) -> Result<Mat2> {
    if !feasible(n, c, l1) {
        return Err(Error::Infeasible { mu: n.mu, lambda: n.lambda, margin: feasibility_margin(n, c, l1) });
    }
    let (mu, lambda, a, d) = (n.mu, n.lambda, c.alpha, c.diffusion);
    let r = l1 / c.r_tot;
    let gap2 = (mu - lambda * r).powi(2);
    let dknf_dmu = 2.0 * d * mu;
    let dkpf_dmu = (2.0 * d * mu.powi(3) - 3.0 * d * mu * mu * lambda * r) / (lambda.powf(a - 1.0) * gap2);
    let dkpf_dlambda = (-d * mu.powi(4) * (a - 1.0) + d * mu.powi(3) * a * lambda * r) / (lambda.powf(a) * gap2);
    Ok(Mat2([[dknf_dmu, dkpf_dmu], [0.0, dkpf_dlambda]]))
}

/// `Aᵀ C A`.
pub fn model_covariance(a: &Mat2, cov_natural: &SymMat2) -> SymMat2 {
    a.congruence(cov_natural)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elliptic::solve_ground_state;
    use crate::steady_state::natural_to_model;
    use std::sync::OnceLock;

    fn gs() -> &'static GroundState {
        static GS: OnceLock<GroundState> = OnceLock::new();
        GS.get_or_init(|| solve_ground_state(1.2, 30.0, 0.01).unwrap())
    }

    fn design_51() -> Vec<f64> {
        (0..=300).map(|i| -15.0 + 0.1 * i as f64).collect()
    }

    fn fd_jacobian(n: &NaturalParams, c: &ModelConstants, l1: f64) -> [[f64; 2]; 2] {
        let mut out = [[0.0; 2]; 2];
        for (i, h) in [(0usize, 1e-6 * n.mu), (1usize, 1e-6 * n.lambda)] {
            let mut up = n.as_array();
            let mut dn = n.as_array();
            up[i] += h;
            dn[i] -= h;
            let pu = natural_to_model(&NaturalParams::from_array(up), c, l1).unwrap();
            let pd = natural_to_model(&NaturalParams::from_array(dn), c, l1).unwrap();
            out[i][0] = (pu.k_nf - pd.k_nf) / (2.0 * h);
            out[i][1] = (pu.k_pf - pd.k_pf) / (2.0 * h);
        }
        out
    }

    #[test]
    fn k_matrix_brute_force_and_asymptotic_sds() {
        let n = NaturalParams::new(1.0, 34.1883);
        let xs = design_51();
        let k = k_matrix(&n, gs(), &xs);
        // brute-force summation of the explicit entries
        let (mut s11, mut s12, mut s22) = (0.0, 0.0, 0.0);
        for &x in &xs {
            let a = n.lambda * x * gs().eval_deriv(x);
            let b = gs().eval(x);
            s11 += a * a;
            s12 += a * b;
            s22 += b * b;
        }
        let m = xs.len() as f64;
        assert!((k.a11 - s11 / m).abs() < 1e-12 * k.a11.abs().max(1.0));
        assert!((k.a12 - s12 / m).abs() < 1e-12 * k.a12.abs().max(1.0));
        assert!((k.a22 - s22 / m).abs() < 1e-12);
        assert!(k.a12.abs() > 0.0);
        let kinv = k.inverse().unwrap();
        let sd_mu = 4.0 * (kinv.a11 / m).sqrt();
        let sd_l = 4.0 * (kinv.a22 / m).sqrt();
        assert!((sd_mu / 0.0140 - 1.0).abs() < 0.05, "{sd_mu}");
        assert!((sd_l / 0.4071 - 1.0).abs() < 0.05, "{sd_l}");
    }

    #[test]
    fn k_matrix_degenerate_design() {
        let n = NaturalParams::new(1.0, 34.1883);
        let k = k_matrix(&n, gs(), &[2.0, 2.0, 2.0]);
        assert!(k.det().abs() <= K_SINGULAR_DET * k.trace().max(1.0).powi(2));
    }

    #[test]
    fn delta_matrix_examples() {
        let c = ModelConstants::simulation();
        let l1 = gs().l1_norm();
        let n = NaturalParams::new(1.0, 34.1883);
        let a = delta_matrix_a(&n, &c, l1).unwrap();
        assert!((a.0[0][0] - 0.2).abs() < 1e-15);
        assert_eq!(a.0[1][0], 0.0);
        let fd = fd_jacobian(&n, &c, l1);
        for i in 0..2 {
            for j in 0..2 {
                let denom = fd[i][j].abs().max(1e-12);
                assert!((a.0[i][j] - fd[i][j]).abs() / denom < 1e-4 || (a.0[i][j] - fd[i][j]).abs() < 1e-12, "{i}{j}");
            }
        }
        assert!(delta_matrix_a(&NaturalParams::new(1.0, 61.0), &c, l1).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]
            #[test]
            fn delta_matrix_matches_finite_differences(mu in 0.3..3.0f64, frac in 0.02..0.95f64, alpha in 1.1..2.5f64) {
                let c = ModelConstants { alpha, diffusion: 0.1, r_tot: 797.0, l0: 15.0 };
                let l1 = 13.09;
                let n = NaturalParams::new(mu, frac * mu * c.r_tot / l1);
                let a = delta_matrix_a(&n, &c, l1).unwrap();
                let fd = fd_jacobian(&n, &c, l1);
                for (i, j) in [(0, 0), (0, 1), (1, 1)] {
                    let rel = (a.0[i][j] - fd[i][j]).abs() / fd[i][j].abs();
                    prop_assert!(rel < 1e-4, "entry {}{}: {} vs {}", i, j, a.0[i][j], fd[i][j]);
                }
            }

            #[test]
            fn k_positive_definite_on_random_designs(xs in proptest::collection::vec(-12.0..12.0f64, 2..40), mu in 0.5..2.0f64, lambda in 1.0..40.0f64) {
                let mut distinct = xs.clone();
                distinct.sort_by(f64::total_cmp);
                distinct.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
                let nonzero = distinct.iter().filter(|x| x.abs() > 1e-3).count();
                prop_assume!(distinct.len() >= 2 && nonzero >= 1);
                let k = k_matrix(&NaturalParams::new(mu, lambda), gs(), &xs);
                prop_assert!(k.det() > 0.0 && k.trace() > 0.0);
            }
        }
    }
}
