//! Exact computations on a finite weight space.
//!
//! With `K` weight states the posterior, the marginal conditional gain
//! `G(H|X) = Σ_k p(ω_k|X,Y) Π_j G(h_j|x_j,ω_k)`, the loss-calibrated lower
//! bound and `KL(q ‖ p̃_H)` are finite sums, so the identity
//! `KL(q ‖ p̃_H) = log G(H|X) − L(q, H)` can be checked to rounding error.
//! Everything is accumulated in log space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decision::UtilityMatrix;
use crate::error::{Error, Result};
use crate::nn::{ProbVector, RngState, Stream};

/// Prior over `K` weight states, per-(input, state) class probabilities and
/// a labelled dataset over a finite input set.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    prior: Vec<f64>,
    /// `likelihood[x][k]` is `p(y | x, ω_k)`.
    likelihood: Vec<Vec<ProbVector>>,
    data: Vec<(usize, usize)>,
}

/// Strictly positive distribution over the weight states.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteQ(Vec<f64>);

fn check_distribution(v: &[f64], what: &str, strict: bool) -> Result<()> {
    if v.is_empty() {
        return Err(Error::InvalidConfig(format!("{what} is empty")));
    }
    let bad = v
        .iter()
        .any(|&p| !p.is_finite() || p < 0.0 || (strict && p == 0.0));
    let total: f64 = v.iter().sum();
    if bad || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "{what} must be a {}probability vector summing to 1: {v:?}",
            if strict { "strictly positive " } else { "" }
        )));
    }
    Ok(())
}

impl DiscreteQ {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        check_distribution(&q, "q", true)?;
        Ok(DiscreteQ(q))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl DiscreteModel {
    pub fn new(
        prior: Vec<f64>,
        likelihood: Vec<Vec<ProbVector>>,
        data: Vec<(usize, usize)>,
    ) -> Result<Self> {
        check_distribution(&prior, "prior", false)?;
        let k = prior.len();
        let c = likelihood
            .first()
            .and_then(|rows| rows.first())
            .map(ProbVector::len)
            .ok_or_else(|| Error::InvalidConfig("likelihood table is empty".into()))?;
        for (x, rows) in likelihood.iter().enumerate() {
            if rows.len() != k || rows.iter().any(|p| p.len() != c) {
                return Err(Error::Shape(format!(
                    "likelihood for input {x} must hold {k} vectors over {c} classes"
                )));
            }
        }
        for &(x, y) in &data {
            if x >= likelihood.len() || y >= c {
                return Err(Error::Index {
                    index: if x >= likelihood.len() { x } else { y },
                    len: if x >= likelihood.len() {
                        likelihood.len()
                    } else {
                        c
                    },
                });
            }
        }
        Ok(DiscreteModel {
            prior,
            likelihood,
            data,
        })
    }

    /// Random model with `states` weight states, `inputs` distinct inputs,
    /// `classes` classes and `data_size` labelled examples.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        states: usize,
        inputs: usize,
        classes: usize,
        data_size: usize,
    ) -> Self {
        let prior = random_simplex(rng, states);
        let likelihood = (0..inputs)
            .map(|_| {
                (0..states)
                    .map(|_| {
                        ProbVector::new(random_simplex(rng, classes)).expect("positive simplex")
                    })
                    .collect()
            })
            .collect();
        let data = (0..data_size)
            .map(|_| (rng.random_range(0..inputs), rng.random_range(0..classes)))
            .collect();
        DiscreteModel::new(prior, likelihood, data).expect("consistent by construction")
    }

    pub fn states(&self) -> usize {
        self.prior.len()
    }

    pub fn classes(&self) -> usize {
        self.likelihood[0][0].len()
    }

    pub fn inputs(&self) -> usize {
        self.likelihood.len()
    }

    pub fn likelihood(&self, x: usize, k: usize) -> &ProbVector {
        &self.likelihood[x][k]
    }

    pub fn log_posterior(&self) -> Result<Vec<f64>> {
        if self.data.is_empty() {
            return Err(Error::InvalidConfig("dataset is empty".into()));
        }
        let joint: Vec<f64> = (0..self.states())
            .map(|k| {
                self.prior[k].ln()
                    + self
                        .data
                        .iter()
                        .map(|&(x, y)| self.likelihood[x][k].as_slice()[y].ln())
                        .sum::<f64>()
            })
            .collect();
        let evidence = log_sum_exp(&joint);
        if !evidence.is_finite() {
            return Err(Error::Degenerate(
                "the data has zero marginal likelihood".into(),
            ));
        }
        Ok(joint.iter().map(|j| j - evidence).collect())
    }

    /// `Σ_j log G(h_j | x_j, ω_k)` for every state `k`.
    fn log_gain_per_state(
        &self,
        utility: &UtilityMatrix,
        h: &[usize],
        xs: &[usize],
    ) -> Result<Vec<f64>> {
        if h.len() != xs.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} inputs",
                h.len(),
                xs.len()
            )));
        }
        if utility.classes() != self.classes() {
            return Err(Error::Shape(
                "utility and model disagree on class count".into(),
            ));
        }
        for (&hj, &xj) in h.iter().zip(xs) {
            if hj >= self.classes() {
                return Err(Error::Index {
                    index: hj,
                    len: self.classes(),
                });
            }
            if xj >= self.inputs() {
                return Err(Error::Index {
                    index: xj,
                    len: self.inputs(),
                });
            }
        }
        Ok((0..self.states())
            .map(|k| {
                h.iter()
                    .zip(xs)
                    .map(|(&hj, &xj)| {
                        let p = self.likelihood[xj][k].as_slice();
                        (0..self.classes())
                            .map(|c| utility.get(hj, c) * p[c])
                            .sum::<f64>()
                            .ln()
                    })
                    .sum()
            })
            .collect())
    }
}

fn random_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// `p(ω_k | X, Y)`.
pub fn exact_posterior(model: &DiscreteModel) -> Result<Vec<f64>> {
    Ok(model.log_posterior()?.iter().map(|l| l.exp()).collect())
}

/// `log G(H|X)`.
pub fn log_marginal_gain(
    model: &DiscreteModel,
    utility: &UtilityMatrix,
    h: &[usize],
    xs: &[usize],
) -> Result<f64> {
    let post = model.log_posterior()?;
    let gains = model.log_gain_per_state(utility, h, xs)?;
    let terms: Vec<f64> = post.iter().zip(&gains).map(|(p, g)| p + g).collect();
    Ok(log_sum_exp(&terms))
}

/// `G(H|X) = Σ_k p(ω_k|X,Y) Π_j G(h_j|x_j,ω_k)`.
pub fn exact_marginal_gain(
    model: &DiscreteModel,
    utility: &UtilityMatrix,
    h: &[usize],
    xs: &[usize],
) -> Result<f64> {
    Ok(log_marginal_gain(model, utility, h, xs)?.exp())
}

/// Posterior reweighted by `Π_j G(h_j|x_j,ω)` and renormalized.
pub fn tilted_posterior(
    model: &DiscreteModel,
    utility: &UtilityMatrix,
    h: &[usize],
    xs: &[usize],
) -> Result<Vec<f64>> {
    let post = model.log_posterior()?;
    let gains = model.log_gain_per_state(utility, h, xs)?;
    let terms: Vec<f64> = post.iter().zip(&gains).map(|(p, g)| p + g).collect();
    let norm = log_sum_exp(&terms);
    Ok(terms.iter().map(|t| (t - norm).exp()).collect())
}

fn check_q(model: &DiscreteModel, q: &DiscreteQ) -> Result<()> {
    if q.0.len() != model.states() {
        return Err(Error::Shape(format!(
            "q has {} states, model has {}",
            q.0.len(),
            model.states()
        )));
    }
    Ok(())
}

/// `L(q, H) = Σ_k q_k log(p(ω_k|X,Y) Π_j G(h_j|x_j,ω_k) / q_k)`.
pub fn lower_bound(
    model: &DiscreteModel,
    q: &DiscreteQ,
    utility: &UtilityMatrix,
    h: &[usize],
    xs: &[usize],
) -> Result<f64> {
    check_q(model, q)?;
    let post = model.log_posterior()?;
    let gains = model.log_gain_per_state(utility, h, xs)?;
    let mut total = 0.0;
    for k in 0..model.states() {
        let term = post[k] + gains[k] - q.0[k].ln();
        if !term.is_finite() {
            return Err(Error::Degenerate(format!(
                "state {k} has positive q but zero posterior-times-gain"
            )));
        }
        total += q.0[k] * term;
    }
    Ok(total)
}

/// `KL(q ‖ p̃_H)`.
pub fn kl_q_tilde(
    model: &DiscreteModel,
    q: &DiscreteQ,
    utility: &UtilityMatrix,
    h: &[usize],
    xs: &[usize],
) -> Result<f64> {
    check_q(model, q)?;
    let post = model.log_posterior()?;
    let gains = model.log_gain_per_state(utility, h, xs)?;
    let terms: Vec<f64> = post.iter().zip(&gains).map(|(p, g)| p + g).collect();
    let norm = log_sum_exp(&terms);
    let mut kl = 0.0;
    for k in 0..model.states() {
        let log_tilde = terms[k] - norm;
        if !log_tilde.is_finite() {
            return Err(Error::Degenerate(format!(
                "tilted posterior vanishes at state {k}"
            )));
        }
        kl += q.0[k] * (q.0[k].ln() - log_tilde);
    }
    Ok(kl)
}

/// `|KL(q ‖ p̃_H) − (log G(H|X) − L(q, H))|`.
pub fn verify_identity(
    model: &DiscreteModel,
    q: &DiscreteQ,
    utility: &UtilityMatrix,
    h: &[usize],
    xs: &[usize],
) -> Result<f64> {
    let kl = kl_q_tilde(model, q, utility, h, xs)?;
    let log_gain = log_marginal_gain(model, utility, h, xs)?;
    let bound = lower_bound(model, q, utility, h, xs)?;
    Ok((kl - (log_gain - bound)).abs())
}

/// The assignment `H` maximizing `G(H|X)`, by enumerating all `C^J`
/// candidates (first maximum in lexicographic order).
pub fn best_assignment(
    model: &DiscreteModel,
    utility: &UtilityMatrix,
    xs: &[usize],
) -> Result<Vec<usize>> {
    let c = model.classes();
    let j = xs.len();
    let total = c
        .checked_pow(j as u32)
        .filter(|&n| n <= 1 << 20)
        .ok_or_else(|| {
            Error::InvalidConfig(format!("{c}^{j} assignments is too many to enumerate"))
        })?;
    let mut best = (f64::NEG_INFINITY, vec![0; j]);
    for code in 0..total {
        let mut h = vec![0; j];
        let mut rest = code;
        for slot in h.iter_mut().rev() {
            *slot = rest % c;
            rest /= c;
        }
        let v = log_marginal_gain(model, utility, &h, xs)?;
        if v > best.0 {
            best = (v, h);
        }
    }
    Ok(best.1)
}

/// One randomly drawn identity-check instance.
#[derive(Debug, Clone)]
pub struct OracleCase {
    pub model: DiscreteModel,
    pub q: DiscreteQ,
    pub utility: UtilityMatrix,
    pub h: Vec<usize>,
    pub xs: Vec<usize>,
}

/// Random instance with `K ≤ 5`, `J ≤ 4`, `C ≤ 4`.
pub fn random_case<R: Rng + ?Sized>(rng: &mut R) -> OracleCase {
    let k = rng.random_range(1..=5);
    let c = rng.random_range(2..=4);
    let inputs = rng.random_range(1..=4);
    let j = rng.random_range(1..=4);
    let data_size = rng.random_range(1..=6);
    let model = DiscreteModel::random(rng, k, inputs, c, data_size);
    let q = DiscreteQ::new(random_simplex(rng, k)).expect("positive simplex");
    let rows: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..c).map(|_| rng.random_range(0.0..2.0)).collect())
        .collect();
    let utility = UtilityMatrix::from_rows(&rows)
        .or_else(|_| UtilityMatrix::constant(c, 1.0))
        .expect("valid utility");
    let h = (0..j).map(|_| rng.random_range(0..c)).collect();
    let xs = (0..j).map(|_| rng.random_range(0..inputs)).collect();
    OracleCase {
        model,
        q,
        utility,
        h,
        xs,
    }
}

/// Summary of the identity and Jensen checks over random instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlCheckReport {
    pub instances: usize,
    /// Largest `|KL − (log G − L)|`.
    pub max_identity_residual: f64,
    /// Largest `L − log G` (must not be positive beyond rounding).
    pub max_jensen_excess: f64,
    /// Largest `|log G − L(p̃_H)|` (the bound is tight at the tilted posterior).
    pub max_tight_gap: f64,
}

pub fn kl_check(instances: usize, seed: u64) -> Result<KlCheckReport> {
    let mut rng = RngState::new(seed).rng(Stream::Oracle);
    let mut report = KlCheckReport {
        instances,
        max_identity_residual: 0.0,
        max_jensen_excess: f64::NEG_INFINITY,
        max_tight_gap: 0.0,
    };
    for _ in 0..instances {
        let case = random_case(&mut rng);
        let (m, u, h, xs) = (&case.model, &case.utility, &case.h, &case.xs);
        let residual = verify_identity(m, &case.q, u, h, xs)?;
        let log_gain = log_marginal_gain(m, u, h, xs)?;
        let bound = lower_bound(m, &case.q, u, h, xs)?;
        let tilted = DiscreteQ::new(tilted_posterior(m, u, h, xs)?)
            .map_err(|e| Error::Degenerate(format!("tilted posterior is not usable as q: {e}")))?;
        let tight = (log_gain - lower_bound(m, &tilted, u, h, xs)?).abs();
        report.max_identity_residual = report.max_identity_residual.max(residual);
        report.max_jensen_excess = report.max_jensen_excess.max(bound - log_gain);
        report.max_tight_gap = report.max_tight_gap.max(tight);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn pv(p: &[f64]) -> ProbVector {
        ProbVector::new(p.to_vec()).unwrap()
    }

    /// Direct probability-space sums, sharing nothing with the log-space
    /// implementation.
    mod brute {
        use super::*;

        pub fn posterior(m: &DiscreteModel, prior: &[f64], data: &[(usize, usize)]) -> Vec<f64> {
            let joint: Vec<f64> = (0..m.states())
                .map(|k| {
                    prior[k]
                        * data
                            .iter()
                            .map(|&(x, y)| m.likelihood(x, k).as_slice()[y])
                            .product::<f64>()
                })
                .collect();
            let z: f64 = joint.iter().sum();
            joint.iter().map(|j| j / z).collect()
        }

        pub fn gain(m: &DiscreteModel, u: &UtilityMatrix, h: usize, x: usize, k: usize) -> f64 {
            let mut g = 0.0;
            for c in 0..m.classes() {
                g += u.get(h, c) * m.likelihood(x, k).as_slice()[c];
            }
            g
        }

        pub fn marginal_gain(
            m: &DiscreteModel,
            post: &[f64],
            u: &UtilityMatrix,
            h: &[usize],
            xs: &[usize],
        ) -> f64 {
            let mut total = 0.0;
            for k in 0..m.states() {
                let mut prod = 1.0;
                for j in 0..h.len() {
                    prod *= gain(m, u, h[j], xs[j], k);
                }
                total += post[k] * prod;
            }
            total
        }
    }

    fn toy() -> (DiscreteModel, Vec<f64>, Vec<(usize, usize)>) {
        let prior = vec![0.5, 0.3, 0.2];
        let likelihood = vec![
            vec![pv(&[0.7, 0.3]), pv(&[0.4, 0.6]), pv(&[0.1, 0.9])],
            vec![pv(&[0.2, 0.8]), pv(&[0.5, 0.5]), pv(&[0.9, 0.1])],
        ];
        let data = vec![(0, 0), (1, 1), (0, 0)];
        let m = DiscreteModel::new(prior.clone(), likelihood, data.clone()).unwrap();
        (m, prior, data)
    }

    #[test]
    fn single_state_posterior_is_one() {
        let m = DiscreteModel::new(vec![1.0], vec![vec![pv(&[0.3, 0.7])]], vec![(0, 1)]).unwrap();
        assert_eq!(exact_posterior(&m).unwrap(), vec![1.0]);
    }

    #[test]
    fn uninformative_likelihood_keeps_uniform_prior() {
        let lik = vec![vec![pv(&[0.3, 0.7]); 4]];
        let m = DiscreteModel::new(vec![0.25; 4], lik, vec![(0, 1), (0, 0)]).unwrap();
        for p in exact_posterior(&m).unwrap() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn posterior_matches_brute_force() {
        let (m, prior, data) = toy();
        let expected = brute::posterior(&m, &prior, &data);
        for (a, b) in exact_posterior(&m).unwrap().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
        let mut r = rng(5);
        for _ in 0..20 {
            let m = DiscreteModel::random(&mut r, 3, 3, 3, 5);
            let expected = brute::posterior(&m, &m.prior, &m.data);
            for (a, b) in exact_posterior(&m).unwrap().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_data_is_rejected() {
        let m = DiscreteModel::new(vec![1.0], vec![vec![pv(&[0.5, 0.5])]], vec![]).unwrap();
        assert!(exact_posterior(&m).is_err());
    }

    #[test]
    fn zero_posterior_mass_is_degenerate() {
        let prior = vec![0.0, 1.0];
        let m = DiscreteModel::new(prior, vec![vec![pv(&[0.5, 0.5]); 2]], vec![(0, 0)]).unwrap();
        let q = DiscreteQ::new(vec![0.5, 0.5]).unwrap();
        let u = UtilityMatrix::identity(2);
        assert!(matches!(
            lower_bound(&m, &q, &u, &[0], &[0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn marginal_gain_reductions() {
        let m = DiscreteModel::new(vec![1.0], vec![vec![pv(&[0.7, 0.3])]], vec![(0, 0)]).unwrap();
        let u = UtilityMatrix::from_rows(&[vec![1.0, 0.0], vec![0.3, 1.0]]).unwrap();
        let g = exact_marginal_gain(&m, &u, &[1], &[0]).unwrap();
        let direct = crate::decision::gain_given_probs(1, &pv(&[0.7, 0.3]), &u).unwrap();
        assert!((g - direct).abs() < 1e-15);

        let (m, _, _) = toy();
        let k = UtilityMatrix::constant(2, 1.5).unwrap();
        let g = exact_marginal_gain(&m, &k, &[0, 1, 1], &[0, 1, 0]).unwrap();
        assert!((g - 1.5f64.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn marginal_gain_matches_double_sum() {
        let mut r = rng(9);
        for _ in 0..20 {
            let m = DiscreteModel::random(&mut r, 3, 2, 3, 4);
            let u = UtilityMatrix::from_rows(&[
                vec![1.0, 0.2, 0.0],
                vec![0.5, 1.0, 0.4],
                vec![0.1, 0.3, 2.0],
            ])
            .unwrap();
            let post = brute::posterior(&m, &m.prior, &m.data);
            for h in [[0, 1], [2, 2], [1, 0]] {
                let xs = [0, 1];
                let expected = brute::marginal_gain(&m, &post, &u, &h, &xs);
                let got = exact_marginal_gain(&m, &u, &h, &xs).unwrap();
                assert!((got - expected).abs() < 1e-13 * expected.max(1.0));
            }
        }
    }

    #[test]
    fn bound_is_tight_at_tilted_posterior() {
        let (m, _, _) = toy();
        let u = UtilityMatrix::from_rows(&[vec![1.0, 0.3], vec![0.2, 1.0]]).unwrap();
        let (h, xs) = ([0, 1], [0, 1]);
        let tilted = DiscreteQ::new(tilted_posterior(&m, &u, &h, &xs).unwrap()).unwrap();
        let gap = log_marginal_gain(&m, &u, &h, &xs).unwrap()
            - lower_bound(&m, &tilted, &u, &h, &xs).unwrap();
        assert!(gap.abs() < 1e-12);
        assert!(kl_q_tilde(&m, &tilted, &u, &h, &xs).unwrap().abs() < 1e-12);
    }

    #[test]
    fn single_state_bound_is_log_gain() {
        let m = DiscreteModel::new(vec![1.0], vec![vec![pv(&[0.6, 0.4])]], vec![(0, 0)]).unwrap();
        let u = UtilityMatrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        let q = DiscreteQ::new(vec![1.0]).unwrap();
        let l = lower_bound(&m, &q, &u, &[0], &[0]).unwrap();
        assert!((l - (0.6 + 0.5 * 0.4f64).ln()).abs() < 1e-15);
        assert_eq!(verify_identity(&m, &q, &u, &[0], &[0]).unwrap(), 0.0);
    }

    #[test]
    fn kl_closed_form() {
        // Two states with equal tilted mass: uniform prior, ω-independent gain.
        let lik = vec![vec![pv(&[0.5, 0.5]); 2]];
        let m = DiscreteModel::new(vec![0.5, 0.5], lik, vec![(0, 0)]).unwrap();
        let u = UtilityMatrix::identity(2);
        let q = DiscreteQ::new(vec![0.9, 0.1]).unwrap();
        let kl = kl_q_tilde(&m, &q, &u, &[0], &[0]).unwrap();
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((kl - expected).abs() < 1e-15);
        assert!((kl - 0.368_064).abs() < 1e-6);
    }

    #[test]
    fn identity_and_jensen_on_random_instances() {
        let mut r = rng(2024);
        for _ in 0..100 {
            let case = random_case(&mut r);
            let (m, q, u, h, xs) = (&case.model, &case.q, &case.utility, &case.h, &case.xs);
            assert!(verify_identity(m, q, u, h, xs).unwrap() < 1e-10);
            assert!(
                lower_bound(m, q, u, h, xs).unwrap()
                    <= log_marginal_gain(m, u, h, xs).unwrap() + 1e-12
            );
        }
    }

    #[test]
    fn constant_utility_tilted_posterior_is_posterior() {
        let mut r = rng(77);
        for _ in 0..20 {
            let case = random_case(&mut r);
            let c = case.model.classes();
            let k = UtilityMatrix::constant(c, 0.8).unwrap();
            let post = exact_posterior(&case.model).unwrap();
            let tilted = tilted_posterior(&case.model, &k, &case.h, &case.xs).unwrap();
            for (a, b) in post.iter().zip(&tilted) {
                assert!((a - b).abs() < 1e-12);
            }
            // The identity becomes the usual ELBO identity shifted by J log k.
            let q = &case.q;
            let bound = lower_bound(&case.model, q, &k, &case.h, &case.xs).unwrap();
            let j = case.h.len() as f64;
            let elbo_like: f64 = q
                .as_slice()
                .iter()
                .zip(&post)
                .map(|(qk, pk)| qk * (pk.ln() - qk.ln()))
                .sum::<f64>()
                + j * 0.8f64.ln();
            assert!((bound - elbo_like).abs() < 1e-12);
        }
    }

    #[test]
    fn single_state_best_assignment_factorizes() {
        let mut r = rng(31);
        for _ in 0..20 {
            let m = DiscreteModel::random(&mut r, 1, 3, 3, 2);
            let u = UtilityMatrix::from_rows(&[
                vec![1.0, 0.1, 0.0],
                vec![0.6, 1.0, 0.5],
                vec![0.2, 0.7, 1.5],
            ])
            .unwrap();
            let xs = [0, 2, 1];
            let joint = best_assignment(&m, &u, &xs).unwrap();
            let per_example: Vec<usize> = xs
                .iter()
                .map(|&x| {
                    crate::decision::optimal_for_probs(m.likelihood(x, 0), &u)
                        .unwrap()
                        .class
                })
                .collect();
            assert_eq!(joint, per_example);
        }
    }

    #[test]
    fn kl_check_report_is_within_tolerance() {
        let report = kl_check(100, 1).unwrap();
        assert!(report.max_identity_residual < 1e-10);
        assert!(report.max_jensen_excess <= 1e-12);
        assert!(report.max_tight_gap < 1e-10);
    }

    #[test]
    fn shape_errors() {
        let (m, _, _) = toy();
        let u = UtilityMatrix::identity(2);
        assert!(matches!(
            log_marginal_gain(&m, &u, &[0], &[0, 1]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            log_marginal_gain(&m, &u, &[0], &[7]),
            Err(Error::Index { .. })
        ));
        let q = DiscreteQ::new(vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            lower_bound(&m, &q, &u, &[0], &[0]),
            Err(Error::Shape(_))
        ));
        assert!(DiscreteQ::new(vec![1.0, 0.0]).is_err());
    }
}
