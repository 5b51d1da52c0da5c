//! Greedy, nucleus, beam and diverse beam decoding over a step function.
//!
//! A step function maps a batch of token prefixes (without the start marker)
//! to one next-token probability vector per prefix. Returned sequences never
//! include the end marker.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Greedy,
    Nucleus,
    Beam,
    DiverseBeam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingConfig {
    pub strategy: Strategy,
    /// Nucleus mass.
    pub p: f64,
    /// Candidates per input.
    pub k: usize,
    pub beam: usize,
    pub groups: usize,
    pub diversity: f64,
    pub max_len: usize,
    /// Exponent of the length normalization applied when ranking beams; 0 ranks raw log-probability sums.
    pub length_penalty: f64,
    pub seed: u64,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Nucleus,
            p: 0.95,
            k: 10,
            beam: 10,
            groups: 1,
            diversity: 0.0,
            max_len: 14,
            length_penalty: 0.0,
            seed: 0,
        }
    }
}

impl DecodingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Domain(format!("nucleus mass must be in (0, 1], got {}", self.p)));
        }
        if self.k == 0 || self.beam == 0 || self.groups == 0 {
            return Err(Error::Config("k, beam and groups must be positive".into()));
        }
        if self.beam % self.groups != 0 {
            return Err(Error::Config(format!(
                "{} beams cannot be split into {} groups",
                self.beam, self.groups
            )));
        }
        if self.diversity < 0.0 {
            return Err(Error::Config("diversity penalty must be non-negative".into()));
        }
        Ok(())
    }
}

/// A decoded sequence with its total log-probability and ranking score.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Log-probability plus any diversity penalties.
    pub score: f64,
}

fn check_dist(dist: &[f64]) -> Result<()> {
    let total: f64 = dist.iter().sum();
    if dist.is_empty() || (total - 1.0).abs() > 1e-6 || dist.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::Contract(format!("not a distribution (sum {total})")));
    }
    Ok(())
}

/// Token ids ordered by descending probability, ties by ascending id.
fn sorted_ids(dist: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..dist.len()).collect();
    ids.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    ids
}

/// Smallest probability-sorted prefix with mass at least `p`.
pub fn nucleus_set(dist: &[f64], p: f64) -> Result<Vec<usize>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Domain(format!("nucleus mass must be in (0, 1], got {p}")));
    }
    check_dist(dist)?;
    let mut set = Vec::new();
    let mut mass = 0.0;
    for id in sorted_ids(dist) {
        if dist[id] <= 0.0 {
            break;
        }
        set.push(id);
        mass += dist[id];
        if mass >= p {
            break;
        }
    }
    Ok(set)
}

/// Sample from the renormalized nucleus of `dist`.
pub fn nucleus_step<R: Rng>(dist: &[f64], p: f64, rng: &mut R) -> Result<usize> {
    let set = nucleus_set(dist, p)?;
    let mass: f64 = set.iter().map(|&i| dist[i]).sum();
    let mut r = rng.random::<f64>() * mass;
    for &i in &set {
        r -= dist[i];
        if r < 0.0 {
            return Ok(i);
        }
    }
    Ok(*set.last().expect("nucleus is never empty"))
}

fn argmax(dist: &[f64]) -> usize {
    sorted_ids(dist)[0]
}

/// `K` independent nucleus samples, decoded in lockstep so each step makes
/// one batched call.
pub fn sample_sequences<F, R>(mut step: F, k: usize, p: f64, max_len: usize, eos: usize, rng: &mut R) -> Result<Vec<Vec<usize>>>
where
    F: FnMut(&[Vec<usize>]) -> Vec<Vec<f64>>,
    R: Rng,
{
    let mut seqs: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut alive: Vec<usize> = (0..k).collect();
    for _ in 0..max_len {
        if alive.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = alive.iter().map(|&i| seqs[i].clone()).collect();
        let dists = step(&prefixes);
        let mut next = Vec::with_capacity(alive.len());
        for (&i, d) in alive.iter().zip(&dists) {
            let tok = nucleus_step(d, p, rng)?;
            if tok != eos {
                seqs[i].push(tok);
                next.push(i);
            }
        }
        alive = next;
    }
    Ok(seqs)
}

/// One nucleus-sampled sequence.
pub fn sample_sequence<F, R>(mut step: F, config: &DecodingConfig, eos: usize, rng: &mut R) -> Result<Vec<usize>>
where
    F: FnMut(&[usize]) -> Vec<f64>,
    R: Rng,
{
    config.validate()?;
    let batched = |ps: &[Vec<usize>]| ps.iter().map(|p| step(p)).collect::<Vec<_>>();
    Ok(sample_sequences(batched, 1, config.p, config.max_len, eos, rng)?.remove(0))
}

/// Argmax at every step.
pub fn greedy<F>(mut step: F, max_len: usize, eos: usize) -> Result<Vec<usize>>
where
    F: FnMut(&[usize]) -> Vec<f64>,
{
    let mut seq = Vec::new();
    for _ in 0..max_len {
        let d = step(&seq);
        check_dist(&d)?;
        let tok = argmax(&d);
        if tok == eos {
            break;
        }
        seq.push(tok);
    }
    Ok(seq)
}

#[derive(Clone, Debug)]
struct Beam {
    tokens: Vec<usize>,
    log_prob: f64,
    score: f64,
    /// Ended with the end marker (not merely truncated).
    ended: bool,
}

impl Beam {
    fn rank(&self, length_penalty: f64) -> f64 {
        if length_penalty == 0.0 {
            self.score
        } else {
            let len = self.tokens.len() + usize::from(self.ended);
            self.score / (len.max(1) as f64).powf(length_penalty)
        }
    }

    fn hypothesis(self) -> Hypothesis {
        Hypothesis {
            tokens: self.tokens,
            log_prob: self.log_prob,
            score: self.score,
        }
    }
}

fn by_rank(a: &Beam, b: &Beam, lp: f64) -> Ordering {
    b.rank(lp)
        .total_cmp(&a.rank(lp))
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| b.ended.cmp(&a.ended))
}

/// One beam group: `width` alive prefixes plus the `width` best finished
/// hypotheses seen so far.
#[derive(Clone, Debug)]
struct Group {
    alive: Vec<Beam>,
    finished: Vec<Beam>,
}

impl Group {
    /// Expand every alive beam with penalized scores. Every finished
    /// candidate enters the finished pool; the best `width` unfinished ones
    /// stay alive. Returns the tokens chosen by the surviving alive beams.
    #[allow(clippy::too_many_arguments)]
    fn advance(&mut self, dists: &[Vec<f64>], penalty: &[f64], width: usize, max_len: usize, eos: usize, lp: f64) -> Vec<usize> {
        let mut alive = Vec::new();
        for (b, d) in self.alive.iter().zip(dists) {
            for (tok, &p) in d.iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                let lpv = p.ln();
                let mut tokens = b.tokens.clone();
                if tok != eos {
                    tokens.push(tok);
                }
                let beam = Beam {
                    tokens,
                    log_prob: b.log_prob + lpv,
                    score: b.score + lpv - penalty.get(tok).copied().unwrap_or(0.0),
                    ended: tok == eos,
                };
                if beam.ended || beam.tokens.len() >= max_len {
                    self.finished.push(beam);
                } else {
                    alive.push(beam);
                }
            }
        }
        self.finished.sort_by(|a, b| by_rank(a, b, lp));
        self.finished.truncate(width);
        alive.sort_by(|a, b| by_rank(a, b, lp));
        alive.truncate(width);
        let chosen = alive.iter().map(|b| *b.tokens.last().expect("alive beams are non-empty")).collect();
        self.alive = alive;
        chosen
    }

    /// No alive beam can still beat the worst kept finished hypothesis;
    /// valid only when scores never increase along a path.
    fn settled(&self, width: usize) -> bool {
        if self.alive.is_empty() {
            return true;
        }
        if self.finished.len() < width {
            return false;
        }
        let worst = self.finished.last().expect("non-empty").score;
        self.alive.iter().all(|b| b.score <= worst)
    }
}

/// Diverse beam search with Hamming diversity. Beams are split into
/// `groups` groups decoded in order; at each step group `g` subtracts
/// `diversity × (times each token was chosen by groups < g at this step)`
/// from its candidates' scores. Results are grouped in order, best first
/// within a group.
pub fn diverse_beam_search<F>(
    mut step: F,
    beam: usize,
    groups: usize,
    diversity: f64,
    max_len: usize,
    eos: usize,
    length_penalty: f64,
) -> Result<Vec<Hypothesis>>
where
    F: FnMut(&[Vec<usize>]) -> Vec<Vec<f64>>,
{
    if beam == 0 || groups == 0 || beam % groups != 0 {
        return Err(Error::Config(format!("{beam} beams cannot be split into {groups} groups")));
    }
    if diversity < 0.0 {
        return Err(Error::Config("diversity penalty must be non-negative".into()));
    }
    if max_len == 0 {
        return Ok(vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0, score: 0.0 }]);
    }
    let width = beam / groups;
    let root = Beam {
        tokens: Vec::new(),
        log_prob: 0.0,
        score: 0.0,
        ended: false,
    };
    let mut state: Vec<Group> = vec![
        Group {
            alive: vec![root],
            finished: Vec::new(),
        };
        groups
    ];
    for _ in 0..max_len {
        if state.iter().all(|g| g.alive.is_empty() || (length_penalty == 0.0 && g.settled(width))) {
            break;
        }
        let mut counts: Vec<f64> = Vec::new();
        for group in state.iter_mut() {
            if group.alive.is_empty() {
                continue;
            }
            let prefixes: Vec<Vec<usize>> = group.alive.iter().map(|b| b.tokens.clone()).collect();
            let dists = step(&prefixes);
            for d in &dists {
                check_dist(d)?;
            }
            let penalty: Vec<f64> = counts.iter().map(|c| diversity * c).collect();
            for tok in group.advance(&dists, &penalty, width, max_len, eos, length_penalty) {
                if counts.len() <= tok {
                    counts.resize(tok + 1, 0.0);
                }
                counts[tok] += 1.0;
            }
        }
    }
    Ok(state
        .into_iter()
        .flat_map(|g| g.finished.into_iter().map(Beam::hypothesis))
        .collect())
}

/// Beam search ranked by total log-probability. A width of one is greedy
/// decoding.
pub fn beam_search<F>(mut step: F, beam: usize, max_len: usize, eos: usize) -> Result<Vec<Hypothesis>>
where
    F: FnMut(&[Vec<usize>]) -> Vec<Vec<f64>>,
{
    if beam == 1 {
        let mut log_prob = 0.0;
        let tokens = greedy(
            |p| {
                let d = step(&[p.to_vec()]).remove(0);
                let t = argmax(&d);
                log_prob += d[t].ln();
                d
            },
            max_len,
            eos,
        )?;
        return Ok(vec![Hypothesis { tokens, log_prob, score: log_prob }]);
    }
    diverse_beam_search(step, beam, 1, 0.0, max_len, eos, 0.0)
}

/// Decode `config.k` candidates with the configured strategy.
pub fn decode<F, R>(mut step: F, config: &DecodingConfig, eos: usize, rng: &mut R) -> Result<Vec<Vec<usize>>>
where
    F: FnMut(&[Vec<usize>]) -> Vec<Vec<f64>>,
    R: Rng,
{
    config.validate()?;
    Ok(match config.strategy {
        Strategy::Greedy => {
            let one = greedy(|p| step(&[p.to_vec()]).remove(0), config.max_len, eos)?;
            vec![one]
        }
        Strategy::Nucleus => sample_sequences(step, config.k, config.p, config.max_len, eos, rng)?,
        Strategy::Beam => {
            let hyps = if config.length_penalty == 0.0 {
                beam_search(step, config.beam, config.max_len, eos)?
            } else {
                diverse_beam_search(step, config.beam, 1, 0.0, config.max_len, eos, config.length_penalty)?
            };
            hyps.into_iter().take(config.k).map(|h| h.tokens).collect()
        }
        Strategy::DiverseBeam => {
            let hyps = diverse_beam_search(
                step,
                config.beam,
                config.groups,
                config.diversity,
                config.max_len,
                eos,
                config.length_penalty,
            )?;
            hyps.into_iter().take(config.k).map(|h| h.tokens).collect()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert_eq, prop_assume, proptest};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const EOS: usize = 2;

    fn per_prefix<F: FnMut(&[usize]) -> Vec<f64>>(mut f: F) -> impl FnMut(&[Vec<usize>]) -> Vec<Vec<f64>> {
        move |ps: &[Vec<usize>]| ps.iter().map(|p| f(p)).collect()
    }

    /// Bigram table over {a, b, eos}; row 3 is the start state.
    const TABLE: [[f64; 3]; 4] = [
        [0.2, 0.5, 0.3],
        [0.6, 0.1, 0.3],
        [0.0, 0.0, 1.0],
        [0.5, 0.4, 0.1],
    ];

    fn bigram(prefix: &[usize]) -> Vec<f64> {
        TABLE[prefix.last().copied().unwrap_or(3)].to_vec()
    }

    /// All complete outcomes up to `max_len` with exact probabilities.
    fn enumerate<F: Fn(&[usize]) -> Vec<f64>>(f: &F, vocab: usize, max_len: usize) -> Vec<(Vec<usize>, f64)> {
        let mut out = Vec::new();
        let mut stack = vec![(Vec::new(), 1.0)];
        while let Some((prefix, p)) = stack.pop() {
            let d = f(&prefix);
            for tok in 0..vocab {
                if d[tok] == 0.0 {
                    continue;
                }
                let q = p * d[tok];
                if tok == EOS {
                    out.push((prefix.clone(), q));
                } else {
                    let mut next = prefix.clone();
                    next.push(tok);
                    if next.len() == max_len {
                        out.push((next, q));
                    } else {
                        stack.push((next, q));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn nucleus_examples() {
        assert_eq!(nucleus_set(&[0.5, 0.3, 0.2], 0.7).unwrap(), vec![0, 1]);
        assert_eq!(nucleus_set(&[0.5, 0.3, 0.2], 1.0).unwrap(), vec![0, 1, 2]);
        assert_eq!(nucleus_set(&[0.2, 0.3, 0.5], 0.5).unwrap(), vec![2]);
        // ties go to the lower id
        assert_eq!(nucleus_set(&[0.25, 0.25, 0.5], 0.6).unwrap(), vec![2, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(nucleus_step(&[1.0], 0.0, &mut rng), Err(Error::Domain(_))));
        assert!(matches!(nucleus_step(&[1.0], 1.5, &mut rng), Err(Error::Domain(_))));
        assert!(matches!(nucleus_step(&[0.5, 0.4], 0.9, &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn nucleus_monte_carlo_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[nucleus_step(&[0.5, 0.3, 0.2], 0.7, &mut rng).unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip([0.625, 0.375, 0.0]) {
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    proptest! {
        #[test]
        fn nucleus_is_smallest_sorted_prefix(raw in proptest::collection::vec(0u32..20, 1..8), p in 0.01f64..=1.0) {
            let total: u32 = raw.iter().sum();
            prop_assume!(total > 0);
            let dist: Vec<f64> = raw.iter().map(|&r| r as f64 / total as f64).collect();
            let set = nucleus_set(&dist, p).unwrap();
            // oracle: scan prefix lengths of the (prob desc, id asc) order
            let mut order: Vec<usize> = (0..dist.len()).filter(|&i| dist[i] > 0.0).collect();
            order.sort_by(|&a, &b| dist[b].partial_cmp(&dist[a]).unwrap().then(a.cmp(&b)));
            let mut expect = order.clone();
            for len in 1..=order.len() {
                let mass: f64 = order[..len].iter().map(|&i| dist[i]).sum();
                if mass >= p {
                    expect = order[..len].to_vec();
                    break;
                }
            }
            prop_assert_eq!(set, expect);
        }
    }

    #[test]
    fn always_eos_gives_empty_body_and_seeds_reproduce() {
        let cfg = DecodingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq = sample_sequence(|_| vec![0.0, 0.0, 1.0], &cfg, EOS, &mut rng).unwrap();
        assert!(seq.is_empty());
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_sequences(per_prefix(bigram), 20, 0.9, 6, EOS, &mut rng).unwrap()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn sequence_distribution_matches_enumeration() {
        let outcomes = enumerate(&bigram, 3, 3);
        let total: f64 = outcomes.iter().map(|o| o.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let seqs = sample_sequences(per_prefix(bigram), n, 1.0, 3, EOS, &mut rng).unwrap();
        for (seq, p) in &outcomes {
            let c = seqs.iter().filter(|s| *s == seq).count() as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((c - p).abs() <= 3.0 * sigma + 1e-12, "{seq:?}: {c} vs {p}");
        }
        // the k = n sequences draw independently
        let seq1 = seqs.iter().filter(|s| s.is_empty()).count() as f64 / n as f64;
        assert!((seq1 - 0.1).abs() < 0.01);
    }

    #[test]
    fn tiny_nucleus_is_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = greedy(bigram, 5, EOS).unwrap();
        for _ in 0..20 {
            let s = sample_sequences(per_prefix(bigram), 1, 1e-9, 5, EOS, &mut rng).unwrap();
            assert_eq!(s[0], g);
        }
        assert_eq!(g, vec![0, 1, 0, 1, 0]);
    }

    #[test]
    fn beam_of_one_is_greedy() {
        let hyps = beam_search(per_prefix(bigram), 1, 5, EOS).unwrap();
        assert_eq!(hyps[0].tokens, greedy(bigram, 5, EOS).unwrap());
    }

    fn random_positional(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> Vec<Vec<f64>> {
        (0..max_len)
            .map(|_| {
                let raw: Vec<f64> = (0..vocab).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|r| r / s).collect()
            })
            .collect()
    }

    #[test]
    fn beam_matches_exhaustive_top_b() {
        // position-dependent, prefix-independent step functions
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for (vocab, max_len, b) in [(3, 3, 2), (4, 4, 2), (4, 4, 3), (4, 4, 4), (3, 4, 3)] {
            for _ in 0..50 {
                let table = random_positional(&mut rng, vocab, max_len);
                let f = |p: &[usize]| table[p.len()].clone();
                let mut exact = enumerate(&f, vocab, max_len);
                exact.sort_by(|a, b| b.1.total_cmp(&a.1));
                let got = beam_search(per_prefix(f), b, max_len, EOS).unwrap();
                assert_eq!(got.len(), b);
                for (h, (seq, p)) in got.iter().zip(&exact) {
                    assert_eq!(&h.tokens, seq);
                    assert!((h.log_prob - p.ln()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn diverse_without_penalty_is_beam() {
        let a = diverse_beam_search(per_prefix(bigram), 3, 1, 0.0, 5, EOS, 0.0).unwrap();
        let b = beam_search(per_prefix(bigram), 3, 5, EOS).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn penalty_pushes_groups_apart() {
        // peaked first step: token 0 at 0.6, token 1 at 0.4
        let step = |p: &[usize]| if p.is_empty() { vec![0.6, 0.4, 0.0] } else { vec![0.0, 0.0, 1.0] };
        let same = diverse_beam_search(per_prefix(step), 2, 2, 0.0, 3, EOS, 0.0).unwrap();
        assert_eq!(same[0].tokens, same[1].tokens);
        // penalty 1 exceeds the log gap ln(0.6/0.4)
        let apart = diverse_beam_search(per_prefix(step), 2, 2, 1.0, 3, EOS, 0.0).unwrap();
        assert_eq!(apart[0].tokens, vec![0]);
        assert_eq!(apart[1].tokens, vec![1]);
        assert!((apart[1].score - apart[1].log_prob).abs() < 1e-12);
    }

    #[test]
    fn penalty_reduces_colliding_scores() {
        let step = |p: &[usize]| if p.is_empty() { vec![0.9, 0.1, 0.0] } else { vec![0.0, 0.0, 1.0] };
        let h = diverse_beam_search(per_prefix(step), 3, 3, 0.7, 3, EOS, 0.0).unwrap();
        // the log gap ln 9 exceeds 2 × 0.7, so every group keeps token 0 and
        // pays 0.7 per earlier group
        for (g, hyp) in h.iter().enumerate() {
            assert_eq!(hyp.tokens, vec![0]);
            assert!((hyp.score - (0.9f64.ln() - 0.7 * g as f64)).abs() < 1e-12);
            assert!((hyp.log_prob - 0.9f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        let ok = DecodingConfig::default();
        ok.validate().unwrap();
        let bad = DecodingConfig { beam: 20, groups: 3, ..ok.clone() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let paper = DecodingConfig {
            strategy: Strategy::DiverseBeam,
            beam: 20,
            groups: 20,
            diversity: 0.7,
            ..ok
        };
        paper.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = decode(per_prefix(bigram), &DecodingConfig { k: 3, ..paper }, EOS, &mut rng).unwrap();
        assert_eq!(out.len(), 3);
    }
}
