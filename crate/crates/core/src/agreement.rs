//! Cohen's kappa, the kappa screen, and the symmetric annotation-noise model.
//!
//! Under symmetric equal noise with conditionally independent raters, a
//! cross-rater kappa of at least `kappa_star` caps the per-rater error rate at
//! `(1 - sqrt(kappa_star)) / 2`, whatever the feature's prevalence. The
//! simulator also models correlated ("co-flip") errors to show how shared
//! blind spots inflate observed agreement.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Agreement between two raters on one binary feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub n: usize,
    pub p_o: f64,
    pub p_e: f64,
    /// `None` when chance agreement is 1 (both raters constant and equal).
    pub kappa: Option<f64>,
    pub degenerate: bool,
}

impl AgreementReport {
    /// Kappa treating the degenerate case as zero information.
    pub fn kappa_or_zero(&self) -> f64 {
        self.kappa.unwrap_or(0.0)
    }
}

fn rate(v: &[u8]) -> f64 {
    v.iter().filter(|&&x| x != 0).count() as f64 / v.len() as f64
}

pub fn cohen_kappa(a: &[u8], b: &[u8]) -> Result<AgreementReport> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("kappa of empty vectors".into()));
    }
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let n = a.len();
    let agree = a
        .iter()
        .zip(b)
        .filter(|(x, y)| (**x != 0) == (**y != 0))
        .count();
    let p_o = agree as f64 / n as f64;
    let (qa, qb) = (rate(a), rate(b));
    let p_e = qa * qb + (1.0 - qa) * (1.0 - qb);
    // p_e == 1 only when both raters are constant at the same value; the
    // rates are exact multiples of 1/n so the comparison is exact.
    let degenerate = (qa == 0.0 && qb == 0.0) || (qa == 1.0 && qb == 1.0);
    let kappa = if degenerate {
        None
    } else {
        Some((p_o - p_e) / (1.0 - p_e))
    };
    Ok(AgreementReport {
        n,
        p_o,
        p_e,
        kappa,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum ScreenVerdict {
    Pass { kappa: f64 },
    FailKappa { kappa: f64 },
    FailDegenerate,
}

impl ScreenVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, ScreenVerdict::Pass { .. })
    }
}

/// Apply the clarity screen to one report. Degenerate agreement never passes.
pub fn screen_report(report: &AgreementReport, kappa_star: f64) -> ScreenVerdict {
    match report.kappa {
        None => ScreenVerdict::FailDegenerate,
        Some(k) if k >= kappa_star => ScreenVerdict::Pass { kappa: k },
        Some(k) => ScreenVerdict::FailKappa { kappa: k },
    }
}

pub fn screen_candidate(labeler: &[u8], examiner: &[u8], kappa_star: f64) -> Result<ScreenVerdict> {
    Ok(screen_report(&cohen_kappa(labeler, examiner)?, kappa_star))
}

/// Noise cap and excess-risk multiplier implied by a kappa threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseBoundReport {
    pub kappa_star: f64,
    pub eta_bar: f64,
    pub inflation: f64,
    pub note: String,
}

pub fn eta_bound(kappa_star: f64) -> Result<NoiseBoundReport> {
    if !(kappa_star > 0.0 && kappa_star <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "kappa_star must lie in (0, 1], got {kappa_star}"
        )));
    }
    let root = kappa_star.sqrt();
    Ok(NoiseBoundReport {
        kappa_star,
        eta_bar: (1.0 - root) / 2.0,
        inflation: 1.0 / root,
        note: "multiplies the O(sqrt((d + log(1/delta)) / N)) estimation term, \
               which is symbolic and not evaluated"
            .into(),
    })
}

fn check_eta_pi(eta: f64, pi: f64) -> Result<()> {
    if !(0.0..0.5).contains(&eta) {
        return Err(Error::InvalidArgument(format!(
            "eta must lie in [0, 0.5), got {eta}"
        )));
    }
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "pi must lie in (0, 1), got {pi}"
        )));
    }
    Ok(())
}

/// Population kappa between two raters with symmetric error rate `eta`
/// on a latent feature of prevalence `pi`, errors independent given the latent.
///
/// With `p_o = 1 - 2 eta (1 - eta)` and marginal `q = pi + eta (1 - 2 pi)`,
/// `1 - p_e = 2 q (1 - q)` and `q (1 - q) = pi (1 - pi) + eta (1 - eta) (1 - 2 pi)^2`,
/// which reduces to `(1 - 2 eta)^2 pi (1 - pi) / q (1 - q)`.
pub fn expected_kappa(eta: f64, pi: f64) -> Result<f64> {
    check_eta_pi(eta, pi)?;
    let spread = pi * (1.0 - pi);
    let noise = eta * (1.0 - eta) * (1.0 - 2.0 * pi).powi(2);
    Ok((1.0 - 2.0 * eta).powi(2) * spread / (spread + noise))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModelParams {
    pub eta: f64,
    pub pi: f64,
    pub zeta: f64,
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedAnnotations {
    pub latent: Vec<u8>,
    pub rater_a: Vec<u8>,
    pub rater_b: Vec<u8>,
}

/// Draw a latent feature and two noisy raters.
///
/// With probability `zeta` an instance is co-flipped by both raters; otherwise
/// each rater flips independently at `(eta - zeta) / (1 - zeta)`, so each
/// rater's marginal error rate is exactly `eta`.
pub fn simulate_annotators(params: &NoiseModelParams) -> Result<SimulatedAnnotations> {
    let NoiseModelParams {
        eta,
        pi,
        zeta,
        n,
        seed,
    } = *params;
    check_eta_pi(eta, pi)?;
    if !(0.0..=1.0).contains(&zeta) {
        return Err(Error::InvalidArgument(format!(
            "zeta must lie in [0, 1], got {zeta}"
        )));
    }
    if zeta > eta {
        return Err(Error::InvalidArgument(format!(
            "zeta {zeta} exceeds eta {eta}: marginal error rate infeasible"
        )));
    }
    let solo = if zeta < 1.0 {
        (eta - zeta) / (1.0 - zeta)
    } else {
        0.0
    };
    let mut rng = rng::stream(seed, "annotators", 0);
    let mut out = SimulatedAnnotations {
        latent: Vec::with_capacity(n),
        rater_a: Vec::with_capacity(n),
        rater_b: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let latent = rng.gen::<f64>() < pi;
        let (flip_a, flip_b) = if rng.gen::<f64>() < zeta {
            (true, true)
        } else {
            (rng.gen::<f64>() < solo, rng.gen::<f64>() < solo)
        };
        out.latent.push(latent as u8);
        out.rater_a.push((latent ^ flip_a) as u8);
        out.rater_b.push((latent ^ flip_b) as u8);
    }
    Ok(out)
}

/// One cell of a simulation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationCell {
    pub eta: f64,
    pub pi: f64,
    pub zeta: f64,
    pub n: usize,
    /// `None` for infeasible cells (zeta > eta) or degenerate draws.
    pub empirical_kappa: Option<f64>,
    pub expected_kappa: Option<f64>,
    pub infeasible: bool,
}

/// Evaluate the Cartesian grid; infeasible cells are marked, not fatal.
pub fn simulate_grid(
    etas: &[f64],
    pis: &[f64],
    zetas: &[f64],
    ns: &[usize],
    seed: u64,
) -> Result<Vec<SimulationCell>> {
    let mut cells = Vec::new();
    let mut index = 0u64;
    for &eta in etas {
        for &pi in pis {
            check_eta_pi(eta, pi)?;
            for &zeta in zetas {
                for &n in ns {
                    let cell_seed = rng::derive_seed(seed, "grid", index);
                    index += 1;
                    let expected = if zeta == 0.0 {
                        Some(expected_kappa(eta, pi)?)
                    } else {
                        None
                    };
                    if zeta > eta {
                        cells.push(SimulationCell {
                            eta,
                            pi,
                            zeta,
                            n,
                            empirical_kappa: None,
                            expected_kappa: expected,
                            infeasible: true,
                        });
                        continue;
                    }
                    let sim = simulate_annotators(&NoiseModelParams {
                        eta,
                        pi,
                        zeta,
                        n,
                        seed: cell_seed,
                    })?;
                    let report = cohen_kappa(&sim.rater_a, &sim.rater_b)?;
                    cells.push(SimulationCell {
                        eta,
                        pi,
                        zeta,
                        n,
                        empirical_kappa: report.kappa,
                        expected_kappa: expected,
                        infeasible: false,
                    });
                }
            }
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_two_by_two() {
        let r = cohen_kappa(&[1, 1, 0, 0], &[1, 0, 0, 0]).unwrap();
        assert_eq!(r.p_o, 0.75);
        assert_eq!(r.p_e, 0.5);
        assert_eq!(r.kappa, Some(0.5));
        assert!(!r.degenerate);
    }

    #[test]
    fn perfect_and_degenerate() {
        assert_eq!(cohen_kappa(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap().kappa, Some(1.0));
        let d = cohen_kappa(&[1, 1, 1, 1], &[1, 1, 1, 1]).unwrap();
        assert!(d.degenerate);
        assert_eq!(d.p_e, 1.0);
        assert_eq!(d.kappa, None);
        // opposite constants are not degenerate: p_e = 0
        let o = cohen_kappa(&[1, 1], &[0, 0]).unwrap();
        assert!(!o.degenerate);
        assert_eq!(o.kappa, Some(0.0));
    }

    #[test]
    fn kappa_errors() {
        assert!(cohen_kappa(&[], &[]).is_err());
        assert!(matches!(
            cohen_kappa(&[1, 0], &[1]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn screen_verdicts() {
        assert!(screen_candidate(&[1, 0, 1, 0], &[1, 0, 1, 0], 0.7).unwrap().passed());
        assert_eq!(
            screen_candidate(&[1, 1, 0, 0], &[1, 0, 0, 0], 0.7).unwrap(),
            ScreenVerdict::FailKappa { kappa: 0.5 }
        );
        assert_eq!(
            screen_candidate(&[1, 1, 1], &[1, 1, 1], 0.7).unwrap(),
            ScreenVerdict::FailDegenerate
        );
    }

    #[test]
    fn eta_bound_values() {
        let b = eta_bound(0.70).unwrap();
        assert!((b.eta_bar - 0.081670).abs() < 1e-6);
        assert!((b.inflation - 1.195229).abs() < 1e-6);
        let one = eta_bound(1.0).unwrap();
        assert_eq!(one.eta_bar, 0.0);
        assert_eq!(one.inflation, 1.0);
        let q = eta_bound(0.25).unwrap();
        assert!((q.eta_bar - 0.25).abs() < 1e-15);
        assert!((q.inflation - 2.0).abs() < 1e-15);
        assert!(eta_bound(0.0).is_err());
        assert!(eta_bound(1.5).is_err());
    }

    #[test]
    fn expected_kappa_points() {
        assert_eq!(expected_kappa(0.0, 0.3).unwrap(), 1.0);
        assert!((expected_kappa(0.1, 0.5).unwrap() - 0.64).abs() < 1e-12);
        assert!(expected_kappa(0.1, 0.2).unwrap() < 0.64);
        assert!(expected_kappa(0.5, 0.5).is_err());
        assert!(expected_kappa(0.1, 1.0).is_err());
    }

    #[test]
    fn expected_kappa_matches_direct_population_computation() {
        // independent route: build the 2x2 joint distribution cell by cell
        for &eta in &[0.0, 0.03, 0.1, 0.27, 0.45] {
            for &pi in &[0.05, 0.2, 0.5, 0.8] {
                let mut joint = [[0.0f64; 2]; 2];
                for (latent, p_latent) in [(0usize, 1.0 - pi), (1, pi)] {
                    for fa in 0..2usize {
                        for fb in 0..2usize {
                            let pa = if fa == 1 { eta } else { 1.0 - eta };
                            let pb = if fb == 1 { eta } else { 1.0 - eta };
                            joint[latent ^ fa][latent ^ fb] += p_latent * pa * pb;
                        }
                    }
                }
                let p_o = joint[0][0] + joint[1][1];
                let qa = joint[1][0] + joint[1][1];
                let qb = joint[0][1] + joint[1][1];
                let p_e = qa * qb + (1.0 - qa) * (1.0 - qb);
                let direct = (p_o - p_e) / (1.0 - p_e);
                assert!((direct - expected_kappa(eta, pi).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn simulator_noise_free_and_infeasible() {
        let s = simulate_annotators(&NoiseModelParams {
            eta: 0.0,
            pi: 0.4,
            zeta: 0.0,
            n: 500,
            seed: 3,
        })
        .unwrap();
        assert_eq!(s.rater_a, s.latent);
        assert_eq!(s.rater_b, s.latent);
        assert!(simulate_annotators(&NoiseModelParams {
            eta: 0.1,
            pi: 0.5,
            zeta: 0.2,
            n: 10,
            seed: 0
        })
        .is_err());
    }

    #[test]
    fn simulator_marginal_error_rate_is_eta() {
        let s = simulate_annotators(&NoiseModelParams {
            eta: 0.15,
            pi: 0.5,
            zeta: 0.05,
            n: 40_000,
            seed: 11,
        })
        .unwrap();
        for rater in [&s.rater_a, &s.rater_b] {
            let err = rater.iter().zip(&s.latent).filter(|(a, b)| a != b).count() as f64
                / s.latent.len() as f64;
            assert!((err - 0.15).abs() < 0.01, "error rate {err}");
        }
    }

    #[test]
    fn full_co_error_makes_raters_identical() {
        let p = NoiseModelParams {
            eta: 0.1,
            pi: 0.5,
            zeta: 0.1,
            n: 20_000,
            seed: 5,
        };
        let s = simulate_annotators(&p).unwrap();
        assert_eq!(cohen_kappa(&s.rater_a, &s.rater_b).unwrap().kappa, Some(1.0));
        let vs_latent = cohen_kappa(&s.rater_a, &s.latent).unwrap().kappa.unwrap();
        // rater-vs-latent agreement at error 0.1 and pi 0.5 is 1 - 2 eta = 0.8
        assert!((vs_latent - 0.8).abs() < 0.02, "{vs_latent}");
    }

    #[test]
    fn grid_marks_infeasible_cells() {
        let cells = simulate_grid(&[0.1], &[0.5], &[0.0, 0.2], &[1000], 1).unwrap();
        assert_eq!(cells.len(), 2);
        assert!(!cells[0].infeasible);
        assert!(cells[1].infeasible);
        assert_eq!(cells[1].empirical_kappa, None);
    }

    fn binary_pair() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
        (1usize..60).prop_flat_map(|n| {
            (
                proptest::collection::vec(0u8..2, n),
                proptest::collection::vec(0u8..2, n),
            )
        })
    }

    proptest! {
        #[test]
        fn kappa_symmetric_and_swap_invariant((a, b) in binary_pair()) {
            let ab = cohen_kappa(&a, &b).unwrap();
            let ba = cohen_kappa(&b, &a).unwrap();
            prop_assert_eq!(ab.kappa, ba.kappa);
            let na: Vec<u8> = a.iter().map(|x| 1 - x).collect();
            let nb: Vec<u8> = b.iter().map(|x| 1 - x).collect();
            let swapped = cohen_kappa(&na, &nb).unwrap();
            match (ab.kappa, swapped.kappa) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                (None, None) => {}
                other => prop_assert!(false, "{:?}", other),
            }
            if let Some(k) = ab.kappa {
                prop_assert!(k <= 1.0 + 1e-12);
                prop_assert_eq!(k == 1.0, a == b);
            }
        }

        #[test]
        fn expected_kappa_bounded_by_balanced_case(eta in 0.0f64..0.499, pi in 0.001f64..0.999) {
            let k = expected_kappa(eta, pi).unwrap();
            let cap = (1.0 - 2.0 * eta).powi(2);
            prop_assert!(k <= cap + 1e-12);
            prop_assert!((expected_kappa(eta, 0.5).unwrap() - cap).abs() < 1e-12);
        }

        #[test]
        fn eta_bound_algebra(k in 1e-6f64..=1.0) {
            let b = eta_bound(k).unwrap();
            prop_assert!((1.0 / (1.0 - 2.0 * b.eta_bar) - k.powf(-0.5)).abs() < 1e-12 * b.inflation.max(1.0));
        }
    }
}
