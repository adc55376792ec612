//! Routing by agreement between child-capsule votes and parent capsules.
//!
//! Both algorithms share one loop. Starting from zero logits `b`, every
//! iteration computes couplings `k = softmax(b)` over the parent axis, the
//! parent pre-activations `s_j = sum_i k_ij v_{j|i}`, the squashed parents,
//! and then updates the logits:
//!
//! * dynamic Euclidean routing (ER): `b_ij -= ||v_{j|i} - squash(s_j)||^2`
//! * dynamic routing (DR): `b_ij += <v_{j|i}, squash(s_j)>`
//!
//! ER logits only ever decrease, so dissimilar votes can be pushed towards
//! `-inf` instead of being capped by the dot product's range.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RoutingKind {
    /// Dynamic Euclidean routing (squared-distance agreement).
    Euclidean,
    /// Dynamic routing (dot-product agreement).
    Dynamic,
}

impl fmt::Display for RoutingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoutingKind::Euclidean => "er",
            RoutingKind::Dynamic => "dr",
        })
    }
}

impl FromStr for RoutingKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "er" | "euclidean" => Ok(RoutingKind::Euclidean),
            "dr" | "dynamic" => Ok(RoutingKind::Dynamic),
            other => Err(Error::Config(format!("unknown routing kind `{other}`"))),
        }
    }
}

/// Agreement measure used by dynamic routing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DrAgreement {
    /// Raw dot product.
    #[default]
    Dot,
    /// Dot product of the normalised vectors.
    Cosine,
}

/// How gradients flow through the coupling coefficients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CouplingGrad {
    /// Differentiate through every routing iteration.
    #[default]
    Unrolled,
    /// Treat couplings as constants; only the weighted vote sums carry
    /// gradient to the votes.
    StopGradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoutingSpec {
    pub kind: RoutingKind,
    pub iterations: usize,
    pub agreement: DrAgreement,
    pub coupling_grad: CouplingGrad,
}

impl RoutingSpec {
    pub fn new(kind: RoutingKind, iterations: usize) -> Self {
        RoutingSpec {
            kind,
            iterations,
            agreement: DrAgreement::Dot,
            coupling_grad: CouplingGrad::Unrolled,
        }
    }

    pub fn euclidean(iterations: usize) -> Self {
        Self::new(RoutingKind::Euclidean, iterations)
    }

    pub fn dynamic(iterations: usize) -> Self {
        Self::new(RoutingKind::Dynamic, iterations)
    }

    fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Config("routing needs at least one iteration".into()));
        }
        Ok(())
    }
}

/// Tape handles produced by [`route`].
#[derive(Clone, Copy, Debug)]
pub struct RoutedVars {
    /// Squashed parents, `[..., cp, d]`.
    pub parents: Var,
    /// Logits after the final update, `[..., ci, cp]`.
    pub logits: Var,
    /// Couplings used in the final iteration, `[..., ci, cp]`.
    pub couplings: Var,
}

/// Routes votes `[..., ci, cp, d]` on the tape. Leading axes are independent
/// routing problems (batch samples, PointCapB entities).
pub fn route(tape: &mut Tape, votes: Var, spec: &RoutingSpec) -> Result<RoutedVars> {
    spec.validate()?;
    let shape = tape.shape(votes).to_vec();
    if shape.len() < 3 {
        return Err(Error::dim("route", format!("votes must be [..., ci, cp, d], got {shape:?}")));
    }
    let r = shape.len();
    let (ci, cp, d) = (shape[r - 3], shape[r - 2], shape[r - 1]);
    let lead = &shape[..r - 3];
    let groups: usize = lead.iter().product();

    let v = tape.reshape(votes, [groups, ci, cp, d])?;
    let mut logits = tape.constant(Tensor::zeros([groups, ci, cp]));
    let mut couplings = logits;
    let mut parents = None;
    for _ in 0..spec.iterations {
        couplings = tape.softmax_rows(logits)?;
        let k = match spec.coupling_grad {
            CouplingGrad::Unrolled => couplings,
            CouplingGrad::StopGradient => tape.detach(couplings),
        };
        let s = tape.weighted_vote_sum(k, v)?;
        let s_hat = tape.squash(s)?;
        logits = match spec.kind {
            RoutingKind::Euclidean => {
                let dist = tape.vote_distance_sq(v, s_hat)?;
                tape.sub(logits, dist)?
            }
            RoutingKind::Dynamic => {
                let agree = match spec.agreement {
                    DrAgreement::Dot => tape.vote_dot(v, s_hat)?,
                    DrAgreement::Cosine => tape.vote_cosine(v, s_hat)?,
                };
                tape.add(logits, agree)?
            }
        };
        parents = Some(s_hat);
    }
    let parents = parents.expect("at least one iteration");

    let mut parent_shape = lead.to_vec();
    parent_shape.extend([cp, d]);
    let mut logit_shape = lead.to_vec();
    logit_shape.extend([ci, cp]);
    Ok(RoutedVars {
        parents: tape.reshape(parents, parent_shape)?,
        logits: tape.reshape(logits, logit_shape.clone())?,
        couplings: tape.reshape(couplings, logit_shape)?,
    })
}

/// Votes from child to parent capsules, `[..., ci, cp, d]`.
#[derive(Clone, Debug)]
pub struct VoteTensor(Tensor);

impl VoteTensor {
    pub fn new(votes: Tensor) -> Result<Self> {
        if votes.rank() < 3 {
            return Err(Error::dim(
                "votes",
                format!("expected [..., ci, cp, d], got {:?}", votes.shape()),
            ));
        }
        if !votes.is_finite() {
            return Err(Error::Input("votes contain non-finite values".into()));
        }
        Ok(VoteTensor(votes))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// `(children, parents, dim)`
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        let r = s.len();
        (s[r - 3], s[r - 2], s[r - 1])
    }
}

impl TryFrom<Tensor> for VoteTensor {
    type Error = Error;
    fn try_from(t: Tensor) -> Result<Self> {
        VoteTensor::new(t)
    }
}

/// Plain-value outcome of routing.
#[derive(Clone, Debug)]
pub struct RoutingResult {
    pub parents: Tensor,
    pub logits: Tensor,
    pub couplings: Tensor,
}

pub fn route_with(votes: &VoteTensor, spec: &RoutingSpec) -> Result<RoutingResult> {
    let mut tape = Tape::new();
    let v = tape.constant(votes.0.clone());
    let out = route(&mut tape, v, spec)?;
    Ok(RoutingResult {
        parents: tape.value(out.parents).clone(),
        logits: tape.value(out.logits).clone(),
        couplings: tape.value(out.couplings).clone(),
    })
}

pub fn route_euclidean(votes: &VoteTensor, iterations: usize) -> Result<RoutingResult> {
    route_with(votes, &RoutingSpec::euclidean(iterations))
}

pub fn route_dynamic(votes: &VoteTensor, iterations: usize) -> Result<RoutingResult> {
    route_with(votes, &RoutingSpec::dynamic(iterations))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IncrementRange {
    pub min: f64,
    pub max: f64,
}

/// Logit increments of a single routing step under both update rules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DissimilarityProbe {
    pub dr: IncrementRange,
    pub er: IncrementRange,
}

/// Runs one routing iteration from zero logits and reports the range of
/// per-pair logit increments under DR (`<v, s>`) and ER (`-||v - s||^2`).
pub fn dissimilarity_range_probe(votes: &VoteTensor) -> Result<DissimilarityProbe> {
    let mut tape = Tape::new();
    let v = tape.constant(votes.0.clone());
    let one_step = route(&mut tape, v, &RoutingSpec::euclidean(1))?;
    let (ci, cp, d) = votes.dims();
    let groups = votes.0.numel() / (ci * cp * d);
    let v = tape.reshape(v, [groups, ci, cp, d])?;
    let parents = tape.reshape(one_step.parents, [groups, cp, d])?;
    let dr = tape.vote_dot(v, parents)?;
    let dist = tape.vote_distance_sq(v, parents)?;
    let er = tape.scale(dist, -1.0)?;
    let range = |t: &Tensor| IncrementRange {
        min: t.data().iter().copied().fold(f64::INFINITY, f64::min),
        max: t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    Ok(DissimilarityProbe {
        dr: range(tape.value(dr)),
        er: range(tape.value(er)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_votes(seed: u64, shape: &[usize], scale: f64) -> VoteTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VoteTensor::new(Tensor::uniform(shape.to_vec(), -scale, scale, &mut rng)).unwrap()
    }

    fn squash_vec(s: &[f64]) -> Vec<f64> {
        let n2: f64 = s.iter().map(|v| v * v).sum();
        if n2 == 0.0 {
            return vec![0.0; s.len()];
        }
        s.iter().map(|v| v * n2.sqrt() / (1.0 + n2)).collect()
    }

    #[test]
    fn zero_iterations_rejected() {
        let votes = random_votes(0, &[3, 2, 4], 1.0);
        assert!(matches!(route_euclidean(&votes, 0), Err(Error::Config(_))));
        assert!(matches!(route_dynamic(&votes, 0), Err(Error::Config(_))));
    }

    #[test]
    fn single_iteration_uses_uniform_couplings() {
        let votes = random_votes(1, &[3, 2, 4], 1.0);
        let out = route_euclidean(&votes, 1).unwrap();
        assert!(out.couplings.data().iter().all(|&k| (k - 0.5).abs() < 1e-15));
        let v = votes.tensor();
        for j in 0..2 {
            let s: Vec<f64> = (0..4)
                .map(|t| (0..3).map(|i| 0.5 * v.at(&[i, j, t])).sum())
                .collect();
            let expect = squash_vec(&s);
            for t in 0..4 {
                assert!((out.parents.at(&[j, t]) - expect[t]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_iteration_dr_matches_er() {
        let votes = random_votes(2, &[5, 3, 4], 1.5);
        let er = route_euclidean(&votes, 1).unwrap();
        let dr = route_dynamic(&votes, 1).unwrap();
        assert_eq!(er.parents, dr.parents);
        assert_eq!(er.couplings, dr.couplings);
    }

    #[test]
    fn single_child_single_parent_is_squashed_vote() {
        let votes = random_votes(3, &[1, 1, 5], 2.0);
        let out = route_euclidean(&votes, 3).unwrap();
        assert_eq!(out.couplings.data(), &[1.0]);
        let expect = squash_vec(votes.tensor().data());
        for (a, b) in out.parents.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_child_rows_stay_normalised() {
        let votes = random_votes(4, &[1, 4, 3], 2.0);
        for iters in 1..=4 {
            let out = route_euclidean(&votes, iters).unwrap();
            let total: f64 = out.couplings.data().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_vote_has_zero_dr_increment() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new([1, 1, 1, 2], vec![0.0, 3.0]).unwrap());
        let s = tape.constant(Tensor::new([1, 1, 2], vec![0.7, 0.0]).unwrap());
        let inc = tape.vote_dot(v, s).unwrap();
        assert_eq!(tape.value(inc).data(), &[0.0]);
    }

    #[test]
    fn er_logits_never_increase() {
        let votes = random_votes(5, &[6, 3, 4], 2.0);
        let mut prev = Tensor::zeros([6, 3]);
        for iters in 1..=5 {
            let out = route_euclidean(&votes, iters).unwrap();
            for (a, b) in out.logits.data().iter().zip(prev.data()) {
                assert!(a <= b);
            }
            prev = out.logits;
        }
    }

    #[test]
    fn leading_axes_route_independently() {
        let votes = random_votes(6, &[2, 3, 4, 2, 5], 1.0);
        let batched = route_euclidean(&votes, 3).unwrap();
        assert_eq!(batched.parents.shape(), &[2, 3, 2, 5]);
        assert_eq!(batched.logits.shape(), &[2, 3, 4, 2]);
        let per = 4 * 2 * 5;
        for g in 0..6 {
            let slice = votes.tensor().data()[g * per..(g + 1) * per].to_vec();
            let single = VoteTensor::new(Tensor::new([4, 2, 5], slice).unwrap()).unwrap();
            let out = route_euclidean(&single, 3).unwrap();
            assert_eq!(out.parents.data(), &batched.parents.data()[g * 10..(g + 1) * 10]);
        }
    }

    #[test]
    fn probe_reports_ranges() {
        let votes = random_votes(7, &[10, 4, 3], 1.0);
        let probe = dissimilarity_range_probe(&votes).unwrap();
        assert!(probe.er.max <= 0.0);
        assert!(probe.dr.min <= probe.dr.max);
    }

    #[test]
    fn kind_round_trips_through_text() {
        for kind in [RoutingKind::Euclidean, RoutingKind::Dynamic] {
            assert_eq!(kind.to_string().parse::<RoutingKind>().unwrap(), kind);
        }
        assert!("em".parse::<RoutingKind>().is_err());
    }
}
