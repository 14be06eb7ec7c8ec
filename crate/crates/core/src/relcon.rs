//! Candidate sampling and the relative contrastive loss.
//!
//! Every candidate takes a turn as the positive; its negatives are exactly
//! the candidates strictly farther from the anchor under the frozen motif
//! distance, and the per-positive NT-Xent terms are summed.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::signal::PpgWindow;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    pub similarity: Similarity,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 0.1, similarity: Similarity::Cosine }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    WithinSubjectSameHour,
    BetweenSubjectBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Candidate {
    /// Index into the window pool the set was sampled from.
    pub window: usize,
    pub source: CandidateSource,
}

/// An anchor with its candidates; `distances` is aligned with `candidates`
/// once [`CandidateSet::score`] has run.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub anchor: usize,
    pub candidates: Vec<Candidate>,
    pub distances: Vec<f64>,
}

impl CandidateSet {
    /// Fills `distances` with `dist(anchor, candidate)`.
    pub fn score(&mut self, mut dist: impl FnMut(usize, usize) -> Result<f64>) -> Result<()> {
        self.distances = self
            .candidates
            .iter()
            .map(|c| dist(self.anchor, c.window))
            .collect::<Result<Vec<_>>>()?;
        if self.distances.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(invalid("candidate distances must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn windows(&self) -> impl Iterator<Item = usize> + '_ {
        self.candidates.iter().map(|c| c.window)
    }
}

/// Lookup of windows by subject and clock hour over a window pool.
#[derive(Clone, Debug, Default)]
pub struct SubjectIndex {
    subject_of: Vec<String>,
    by_subject_hour: HashMap<(String, i64), Vec<usize>>,
}

impl SubjectIndex {
    pub fn new(pool: &[PpgWindow]) -> Self {
        let mut by_subject_hour: HashMap<(String, i64), Vec<usize>> = HashMap::new();
        for (i, w) in pool.iter().enumerate() {
            by_subject_hour.entry((w.subject_id.clone(), w.hour())).or_default().push(i);
        }
        Self { subject_of: pool.iter().map(|w| w.subject_id.clone()).collect(), by_subject_hour }
    }

    pub fn subject(&self, i: usize) -> &str {
        &self.subject_of[i]
    }

    pub fn len(&self) -> usize {
        self.subject_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subject_of.is_empty()
    }

    /// Other windows of the same subject within the same clock hour.
    pub fn same_hour_siblings(&self, i: usize, hour: i64) -> Vec<usize> {
        self.by_subject_hour
            .get(&(self.subject_of[i].clone(), hour))
            .map(|v| v.iter().copied().filter(|&j| j != i).collect())
            .unwrap_or_default()
    }
}

/// Draws one same-hour within-subject candidate uniformly and takes every
/// other-subject window of `batch` as a between-subject candidate.
///
/// Returns `Ok(None)` when the anchor has no same-hour sibling (the caller
/// skips that anchor) and [`Error::DegenerateBatch`] when the batch holds no
/// other subject.
pub fn sample_candidates<R: Rng>(
    anchor: usize,
    pool: &[PpgWindow],
    batch: &[usize],
    index: &SubjectIndex,
    rng: &mut R,
) -> Result<Option<CandidateSet>> {
    let subject = index.subject(anchor);
    let between: Vec<usize> = batch.iter().copied().filter(|&j| index.subject(j) != subject).collect();
    if between.is_empty() {
        return Err(Error::DegenerateBatch(format!("batch holds no subject other than `{subject}`")));
    }
    let siblings = index.same_hour_siblings(anchor, pool[anchor].hour());
    if siblings.is_empty() {
        return Ok(None);
    }
    let within = siblings[rng.random_range(0..siblings.len())];
    let mut candidates = vec![Candidate { window: within, source: CandidateSource::WithinSubjectSameHour }];
    candidates.extend(between.into_iter().map(|window| Candidate { window, source: CandidateSource::BetweenSubjectBatch }));
    Ok(Some(CandidateSet { anchor, candidates, distances: Vec::new() }))
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// NT-Xent with log-sum-exp stabilisation:
/// `-log(exp(p/τ) / (Σ exp(n/τ) + exp(p/τ)))`.
pub fn ntxent(sim_pos: f64, sims_neg: &[f64], tau: f64) -> f64 {
    let pos = sim_pos / tau;
    let lse = log_sum_exp(sims_neg.iter().map(|s| s / tau).chain(std::iter::once(pos)));
    lse - pos
}

/// NT-Xent plus its derivatives with respect to `sim_pos` and each `sims_neg`.
pub fn ntxent_grad(sim_pos: f64, sims_neg: &[f64], tau: f64) -> (f64, f64, Vec<f64>) {
    let loss = ntxent(sim_pos, sims_neg, tau);
    let pos = sim_pos / tau;
    let lse = loss + pos;
    let d_neg = sims_neg.iter().map(|s| (s / tau - lse).exp() / tau).collect();
    let d_pos = ((pos - lse).exp() - 1.0) / tau;
    (loss, d_pos, d_neg)
}

/// Candidates strictly farther from the anchor than candidate `i_pos`.
pub fn build_negatives(i_pos: usize, distances: &[f64]) -> Vec<usize> {
    let dp = distances[i_pos];
    (0..distances.len()).filter(|&j| distances[j] > dp).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn similarity(kind: Similarity, a: &[f64], b: &[f64]) -> f64 {
    match kind {
        Similarity::Dot => dot(a, b),
        Similarity::Cosine => dot(a, b) / (norm(a) * norm(b)),
    }
}

/// Adds `coef · d sim(a,b)/da` to `da` and `coef · d sim(a,b)/db` to `db`.
fn similarity_backward(kind: Similarity, a: &[f64], b: &[f64], coef: f64, da: &mut [f64], db: &mut [f64]) {
    match kind {
        Similarity::Dot => {
            for i in 0..a.len() {
                da[i] += coef * b[i];
                db[i] += coef * a[i];
            }
        }
        Similarity::Cosine => {
            let (na, nb) = (norm(a), norm(b));
            let s = dot(a, b) / (na * nb);
            for i in 0..a.len() {
                da[i] += coef * (b[i] / (na * nb) - s * a[i] / (na * na));
                db[i] += coef * (a[i] / (na * nb) - s * b[i] / (nb * nb));
            }
        }
    }
}

fn check_inputs(anchor: &[f64], cands: &[Vec<f64>], distances: &[f64]) -> Result<()> {
    if cands.is_empty() {
        return Err(invalid("relative contrastive loss needs at least one candidate"));
    }
    if cands.len() != distances.len() {
        return Err(invalid("distances must align with candidates"));
    }
    if cands.iter().any(|c| c.len() != anchor.len()) {
        return Err(invalid("candidate embedding dimension differs from the anchor"));
    }
    Ok(())
}

/// Relative contrastive loss of one anchor: each candidate in turn is the
/// positive against the candidates strictly farther away.
pub fn relcon_loss(anchor: &[f64], cands: &[Vec<f64>], distances: &[f64], cfg: &LossConfig) -> Result<f64> {
    Ok(relcon_loss_grad(anchor, cands, distances, cfg)?.0)
}

/// Loss plus gradients with respect to the anchor and each candidate embedding.
pub fn relcon_loss_grad(
    anchor: &[f64],
    cands: &[Vec<f64>],
    distances: &[f64],
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
    check_inputs(anchor, cands, distances)?;
    cfg.validate()?;
    let sims: Vec<f64> = cands.iter().map(|c| similarity(cfg.similarity, anchor, c)).collect();
    let mut dsim = vec![0.0; cands.len()];
    let mut total = 0.0;
    for i in 0..cands.len() {
        let negs = build_negatives(i, distances);
        if negs.is_empty() {
            continue;
        }
        let neg_sims: Vec<f64> = negs.iter().map(|&j| sims[j]).collect();
        let (l, dp, dn) = ntxent_grad(sims[i], &neg_sims, cfg.temperature);
        total += l;
        dsim[i] += dp;
        for (&j, d) in negs.iter().zip(dn) {
            dsim[j] += d;
        }
    }
    let mut da = vec![0.0; anchor.len()];
    let mut dc = vec![vec![0.0; anchor.len()]; cands.len()];
    for (j, c) in cands.iter().enumerate() {
        if dsim[j] != 0.0 {
            similarity_backward(cfg.similarity, anchor, c, dsim[j], &mut da, &mut dc[j]);
        }
    }
    Ok((total, da, dc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn window(subject: &str, start: f64) -> PpgWindow {
        PpgWindow::new(vec![0.0; 4], 50.0, subject, start).unwrap()
    }

    #[test]
    fn ntxent_closed_forms() {
        assert!((ntxent(0.4, &[0.4], 0.37) - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(ntxent(0.9, &[], 0.1), 0.0);
        assert!((ntxent(1.0, &[0.0], 1.0) - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn negatives_use_strict_inequality() {
        assert_eq!(build_negatives(0, &[0.5, 0.3, 0.7, 0.9]), vec![2, 3]);
        assert!(build_negatives(3, &[0.5, 0.3, 0.7, 0.9]).is_empty());
        assert_eq!(build_negatives(0, &[0.5, 0.5, 0.6]), vec![2]);
    }

    #[test]
    fn two_candidate_expansion() {
        let cfg = LossConfig::default();
        let a = vec![1.0, 0.0, 0.5];
        let c = vec![vec![0.8, 0.1, 0.4], vec![-0.2, 1.0, 0.0]];
        let l = relcon_loss(&a, &c, &[0.2, 0.9], &cfg).unwrap();
        let s: Vec<f64> = c.iter().map(|v| similarity(cfg.similarity, &a, v)).collect();
        let expect = ntxent(s[0], &[s[1]], cfg.temperature) + ntxent(s[1], &[], cfg.temperature);
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn equidistant_candidates_give_zero() {
        let c = vec![vec![1.0, 2.0], vec![0.3, -1.0], vec![5.0, 0.0]];
        assert_eq!(relcon_loss(&[1.0, 1.0], &c, &[0.4; 3], &LossConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn sampling_counts_and_skip() {
        // 64 distinct subjects, each with a same-hour sibling outside the batch
        let mut pool = Vec::new();
        for s in 0..64 {
            pool.push(window(&format!("s{s}"), 0.0));
            pool.push(window(&format!("s{s}"), 240.0));
        }
        pool.push(window("lonely", 7200.0));
        let index = SubjectIndex::new(&pool);
        let batch: Vec<usize> = (0..64).map(|s| 2 * s).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let set = sample_candidates(0, &pool, &batch, &index, &mut rng).unwrap().unwrap();
        assert_eq!(set.candidates.len(), 64);
        assert_eq!(set.candidates[0], Candidate { window: 1, source: CandidateSource::WithinSubjectSameHour });
        assert!(set.candidates[1..].iter().all(|c| c.source == CandidateSource::BetweenSubjectBatch));

        let lonely = pool.len() - 1;
        let batch2 = vec![lonely, 0, 2];
        assert!(sample_candidates(lonely, &pool, &batch2, &index, &mut rng).unwrap().is_none());
        assert!(matches!(sample_candidates(0, &pool, &[0, 1], &index, &mut rng), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn sampling_is_seeded() {
        let pool: Vec<PpgWindow> = (0..6).map(|i| window("a", i as f64 * 240.0)).chain([window("b", 0.0)]).collect();
        let index = SubjectIndex::new(&pool);
        let pick = |seed| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            sample_candidates(0, &pool, &[0, 6], &index, &mut rng).unwrap().unwrap().candidates[0]
        };
        assert_eq!(pick(9), pick(9));
    }

    proptest! {
        #[test]
        fn loss_depends_only_on_distance_ranking(
            seed in any::<u64>(), n in 1usize..8, dim in 2usize..6,
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..3.0)).collect();
            let d2: Vec<f64> = d.iter().map(|x| x * x).collect();
            let cfg = LossConfig::default();
            let l1 = relcon_loss(&a, &c, &d, &cfg).unwrap();
            let l2 = relcon_loss(&a, &c, &d2, &cfg).unwrap();
            prop_assert!((l1 - l2).abs() < 1e-9);
            prop_assert!(l1 >= 0.0);

            // permuting candidates leaves the loss unchanged
            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            let cp: Vec<Vec<f64>> = perm.iter().map(|&i| c[i].clone()).collect();
            let dp: Vec<f64> = perm.iter().map(|&i| d[i]).collect();
            prop_assert!((relcon_loss(&a, &cp, &dp, &cfg).unwrap() - l1).abs() < 1e-9);
        }
    }
}
