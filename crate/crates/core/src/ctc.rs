//! Connectionist temporal classification: loss and gradient by the
//! forward–backward recursions in log space, greedy decoding, and an
//! exhaustive path-enumeration oracle.
//!
//! Index 0 is the blank everywhere.

use std::fmt;

use crate::error::{config_err, Error, Result};
use crate::kernels::log_softmax_rows;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BLANK: usize = 0;

/// Output alphabet: blank plus one printable symbol per class index `1..V`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlphabetSpec {
    symbols: Vec<char>,
}

impl AlphabetSpec {
    pub fn new(symbols: impl IntoIterator<Item = char>) -> Result<Self> {
        let symbols: Vec<char> = symbols.into_iter().collect();
        if symbols.is_empty() {
            return Err(config_err("alphabet needs at least one non-blank symbol"));
        }
        Ok(AlphabetSpec { symbols })
    }

    /// Blank plus the ten decimal digits (`V = 11`).
    pub fn digits() -> Self {
        AlphabetSpec {
            symbols: ('0'..='9').collect(),
        }
    }

    /// Number of classes including the blank.
    pub fn size(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn render(&self, labels: &LabelSeq) -> String {
        labels
            .as_slice()
            .iter()
            .map(|&l| self.symbols.get(l - 1).copied().unwrap_or('?'))
            .collect()
    }

    pub fn parse(&self, text: &str) -> Result<LabelSeq> {
        let labels = text
            .chars()
            .map(|ch| {
                self.symbols
                    .iter()
                    .position(|&s| s == ch)
                    .map(|p| p + 1)
                    .ok_or_else(|| Error::Parse(format!("symbol {ch:?} is not in the alphabet")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabelSeq(labels))
    }
}

/// Target label sequence; every entry lies in `1..V`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct LabelSeq(Vec<usize>);

impl LabelSeq {
    pub fn new(labels: Vec<usize>, vocab: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l >= vocab) {
            return Err(config_err(format!(
                "label {bad} is not a symbol of a {vocab}-class alphabet"
            )));
        }
        Ok(LabelSeq(labels))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `(−, l₁, −, l₂, …, −)`, of length `2·len + 1`.
    pub fn extended(&self) -> Vec<usize> {
        let mut ext = Vec::with_capacity(2 * self.0.len() + 1);
        ext.push(BLANK);
        for &l in &self.0 {
            ext.push(l);
            ext.push(BLANK);
        }
        ext
    }

    /// Fewest frames that can emit this sequence: one per label plus one
    /// separating blank per adjacent repeat.
    pub fn min_frames(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

impl fmt::Display for LabelSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Negative log-likelihood of `target` and its gradient with respect to the
/// pre-soft-max logits, from row-major `T×V` log-probabilities.
///
/// Each frame's gradient row is `softmax − occupancy` and sums to zero.
pub fn ctc_loss_grad_raw(log_probs: &[f64], frames: usize, vocab: usize, target: &LabelSeq) -> Result<(f64, Vec<f64>)> {
    if log_probs.len() != frames * vocab {
        return Err(config_err(format!(
            "ctc: {} log-probabilities for {frames}×{vocab}",
            log_probs.len()
        )));
    }
    if let Some(&bad) = target.as_slice().iter().find(|&&l| l == BLANK || l >= vocab) {
        return Err(config_err(format!("ctc: label {bad} outside 1..{vocab}")));
    }
    let required = target.min_frames();
    if frames < required || frames == 0 {
        return Err(Error::InfeasibleTarget {
            label_len: target.len(),
            required: required.max(1),
            frames,
        });
    }
    let ext = target.extended();
    let s_len = ext.len();
    let lp = |t: usize, s: usize| log_probs[t * vocab + ext[s]];
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, s) };
        }
    }

    let mut beta = vec![ninf; frames * s_len];
    let last = frames - 1;
    beta[last * s_len + s_len - 1] = lp(last, s_len - 1);
    if s_len > 1 {
        beta[last * s_len + s_len - 2] = lp(last, s_len - 2);
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && ext[s] != BLANK && ext[s] != ext[s + 2] {
                b = log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + lp(t, s) };
        }
    }

    let mut log_p = alpha[last * s_len + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last * s_len + s_len - 2]);
    }
    if !log_p.is_finite() {
        return Err(Error::NonFinite("ctc_loss"));
    }

    let mut grad = vec![0.0; frames * vocab];
    let mut occ = vec![ninf; vocab];
    for t in 0..frames {
        occ.fill(ninf);
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab > ninf {
                occ[ext[s]] = log_add(occ[ext[s]], ab - lp(t, s));
            }
        }
        for k in 0..vocab {
            let y = log_probs[t * vocab + k].exp();
            let o = if occ[k] == ninf { 0.0 } else { (occ[k] - log_p).exp() };
            grad[t * vocab + k] = y - o;
        }
    }
    Ok((-log_p, grad))
}

pub struct CtcOutput<T> {
    pub neg_log_likelihood: f64,
    /// Gradient with respect to the logits, `T×V`.
    pub grad: Tensor<T>,
}

/// [`ctc_loss_grad_raw`] on a `T×V` tensor of log-soft-max outputs.
pub fn ctc_loss_grad<T: Scalar>(log_probs: &Tensor<T>, target: &LabelSeq) -> Result<CtcOutput<T>> {
    let (frames, vocab) = log_probs.dims2()?;
    let lp: Vec<f64> = log_probs.data().iter().map(|v| v.as_f64()).collect();
    let (nll, grad) = ctc_loss_grad_raw(&lp, frames, vocab, target)?;
    Ok(CtcOutput {
        neg_log_likelihood: nll,
        grad: Tensor::new(vec![frames, vocab], grad.into_iter().map(T::of).collect())?,
    })
}

/// Merges adjacent repeats, then drops blanks.
pub fn collapse_path(path: &[usize]) -> LabelSeq {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    LabelSeq(out)
}

/// Per-frame argmax (lowest index wins ties), then [`collapse_path`].
pub fn greedy_decode<T: Scalar>(log_probs: &Tensor<T>) -> Result<LabelSeq> {
    let vocab = *log_probs.shape().last().expect("non-empty shape");
    Ok(greedy_decode_raw(log_probs.data(), vocab))
}

pub fn greedy_decode_raw<T: Scalar>(scores: &[T], vocab: usize) -> LabelSeq {
    let path: Vec<usize> = scores
        .chunks(vocab)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse_path(&path)
}

/// Largest path count [`brute_force_probability`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

/// Sums the probability of every length-`T` path that collapses to `target`.
/// `probs` is `T×V` (probabilities, not logs).
pub fn brute_force_probability(probs: &Tensor<f64>, target: &LabelSeq) -> Result<f64> {
    let (frames, vocab) = probs.dims2()?;
    let paths = (vocab as u128).checked_pow(frames as u32).unwrap_or(u128::MAX);
    if paths > BRUTE_FORCE_LIMIT {
        return Err(Error::InstanceTooLarge(paths));
    }
    let p = probs.data();
    let mut path = vec![0usize; frames];
    let mut total = 0.0;
    loop {
        if collapse_path(&path) == *target {
            total += path.iter().enumerate().map(|(t, &k)| p[t * vocab + k]).product::<f64>();
        }
        // odometer increment
        let mut t = frames;
        loop {
            if t == 0 {
                return Ok(total);
            }
            t -= 1;
            path[t] += 1;
            if path[t] < vocab {
                break;
            }
            path[t] = 0;
        }
    }
}

/// Forward-backward against exhaustive enumeration on random small instances.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    /// Feasible instances compared.
    pub cases: usize,
    /// Infeasible draws; each must have zero brute-force probability.
    pub infeasible: usize,
    pub max_abs_diff: f64,
    /// `(expected, computed)` likelihoods of the two uniform worked examples.
    pub worked: [(f64, f64); 2],
}

impl OracleReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_abs_diff <= tol && self.worked.iter().all(|(e, g)| (e - g).abs() <= 1e-12)
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "cases {}  infeasible {}  max |p - brute| {:.3e}  worked {:.12} (0.75) {:.12} (5/27)",
            self.cases, self.infeasible, self.max_abs_diff, self.worked[0].1, self.worked[1].1
        )
    }
}

fn uniform_likelihood(frames: usize, vocab: usize, labels: &[usize]) -> Result<f64> {
    let lp = vec![-(vocab as f64).ln(); frames * vocab];
    let (nll, _) = ctc_loss_grad_raw(&lp, frames, vocab, &LabelSeq(labels.to_vec()))?;
    Ok((-nll).exp())
}

/// Draws instances with `T ≤ 5`, `V ≤ 4` and label length `≤ 3` until
/// `cases` feasible ones have been compared.
pub fn oracle_suite(cases: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = Rng::new(seed);
    let mut report = OracleReport {
        cases: 0,
        infeasible: 0,
        max_abs_diff: 0.0,
        worked: [
            (0.75, uniform_likelihood(2, 2, &[1])?),
            (5.0 / 27.0, uniform_likelihood(3, 3, &[1, 2])?),
        ],
    };
    while report.cases < cases {
        let frames = rng.range_inclusive(1, 5);
        let vocab = rng.range_inclusive(2, 4);
        let len = rng.range_inclusive(0, 3);
        let target = LabelSeq((0..len).map(|_| rng.range_inclusive(1, vocab - 1)).collect());
        let logits: Vec<f64> = (0..frames * vocab).map(|_| 2.0 * rng.normal()).collect();
        let lp = log_softmax_rows(&logits, vocab);
        let probs = Tensor::new(vec![frames, vocab], lp.iter().map(|v| v.exp()).collect())?;
        let brute = brute_force_probability(&probs, &target)?;
        match ctc_loss_grad_raw(&lp, frames, vocab, &target) {
            Ok((nll, _)) => {
                report.max_abs_diff = report.max_abs_diff.max(((-nll).exp() - brute).abs());
                report.cases += 1;
            }
            Err(Error::InfeasibleTarget { .. }) if brute == 0.0 => report.infeasible += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn uniform(frames: usize, vocab: usize) -> Vec<f64> {
        vec![-(vocab as f64).ln(); frames * vocab]
    }

    fn seq(v: &[usize]) -> LabelSeq {
        LabelSeq(v.to_vec())
    }

    #[test]
    fn two_frames_single_label() {
        let (nll, _) = ctc_loss_grad_raw(&uniform(2, 2), 2, 2, &seq(&[1])).unwrap();
        assert!((nll - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((nll - 0.287682).abs() < 1e-6);
    }

    #[test]
    fn three_frames_two_labels() {
        let (nll, _) = ctc_loss_grad_raw(&uniform(3, 3), 3, 3, &seq(&[1, 2])).unwrap();
        assert!((nll - (-(5.0f64 / 27.0).ln())).abs() < 1e-12);
        assert!((nll - 1.686399).abs() < 1e-6);
    }

    #[test]
    fn single_frame_single_label() {
        let lp = [0.2f64.ln(), 0.7f64.ln(), 0.1f64.ln()];
        let (nll, _) = ctc_loss_grad_raw(&lp, 1, 3, &seq(&[1])).unwrap();
        assert!((nll + 0.7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_target_is_an_error() {
        let err = ctc_loss_grad_raw(&uniform(2, 3), 2, 3, &seq(&[1, 1])).unwrap_err();
        assert!(matches!(
            err,
            Error::InfeasibleTarget {
                required: 3,
                frames: 2,
                ..
            }
        ));
        let probs = Tensor::new(vec![2, 3], vec![1.0 / 3.0; 6]).unwrap();
        assert_eq!(brute_force_probability(&probs, &seq(&[1, 1])).unwrap(), 0.0);
    }

    #[test]
    fn collapse_examples() {
        assert_eq!(collapse_path(&[1, 1, 0, 2, 2]), seq(&[1, 2]));
        assert_eq!(collapse_path(&[0, 0, 0]), seq(&[]));
        assert_eq!(collapse_path(&[1, 0, 1]), seq(&[1, 1]));
    }

    #[test]
    fn greedy_examples() {
        let frames = |path: &[usize]| {
            let mut s = vec![0.0f64; path.len() * 3];
            for (t, &k) in path.iter().enumerate() {
                s[t * 3 + k] = 1.0;
            }
            s
        };
        assert_eq!(greedy_decode_raw(&frames(&[1, 1, 0, 2]), 3), seq(&[1, 2]));
        assert_eq!(greedy_decode_raw(&frames(&[0, 0]), 3), seq(&[]));
        // ties resolve toward the lowest index (blank)
        assert_eq!(greedy_decode_raw(&[0.5f64, 0.5, 0.0], 3), seq(&[]));
    }

    #[test]
    fn greedy_need_not_be_most_probable_labelling() {
        // Two frames over {−, a}: p(a) = 0.4 each frame. Greedy picks "" (0.36)
        // although "a" has probability 1 − 0.36 = 0.64.
        let lp = [0.6f64.ln(), 0.4f64.ln(), 0.6f64.ln(), 0.4f64.ln()];
        assert_eq!(greedy_decode_raw(&lp, 2), seq(&[]));
        let probs = Tensor::new(vec![2, 2], vec![0.6, 0.4, 0.6, 0.4]).unwrap();
        assert!((brute_force_probability(&probs, &seq(&[1])).unwrap() - 0.64).abs() < 1e-12);
    }

    #[test]
    fn brute_force_worked_example() {
        let probs = Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap();
        assert_eq!(brute_force_probability(&probs, &seq(&[1])).unwrap(), 0.75);
    }

    #[test]
    fn brute_force_refuses_large_instances() {
        let probs = Tensor::new(vec![11, 4], vec![0.25; 44]).unwrap();
        assert!(matches!(
            brute_force_probability(&probs, &seq(&[1])),
            Err(Error::InstanceTooLarge(_))
        ));
    }

    #[test]
    fn tiny_probabilities_stay_finite() {
        let v = 4;
        let frames = 6;
        let mut p = vec![1e-30f64; frames * v];
        for t in 0..frames {
            p[t * v] = 1.0 - 3e-30;
        }
        let lp: Vec<f64> = p.iter().map(|x| x.ln()).collect();
        let (nll, g) = ctc_loss_grad_raw(&lp, frames, v, &seq(&[1, 2, 3])).unwrap();
        assert!(nll.is_finite() && nll > 0.0);
        assert!(g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn alphabet_round_trip() {
        let a = AlphabetSpec::digits();
        assert_eq!(a.size(), 11);
        let l = a.parse("307").unwrap();
        assert_eq!(l.as_slice(), &[4, 1, 8]);
        assert_eq!(a.render(&l), "307");
        assert!(LabelSeq::new(vec![0], 11).is_err());
        assert_eq!(l.extended().len(), 7);
    }

    fn random_instance(rng: &mut Rng) -> (usize, usize, Vec<f64>, LabelSeq) {
        let frames = rng.range_inclusive(1, 5);
        let vocab = rng.range_inclusive(2, 4);
        let len = rng.range_inclusive(0, 3);
        let labels = (0..len).map(|_| rng.range_inclusive(1, vocab - 1)).collect();
        let logits: Vec<f64> = (0..frames * vocab).map(|_| 2.0 * rng.normal()).collect();
        (frames, vocab, log_softmax_rows(&logits, vocab), LabelSeq(labels))
    }

    #[test]
    fn oracle_agrees() {
        let r = oracle_suite(60, 3).unwrap();
        assert_eq!(r.cases, 60);
        assert!(r.passed(1e-10), "{r}");
    }

    proptest! {
        #[test]
        fn gradient_rows_sum_to_zero(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let (frames, vocab, lp, target) = random_instance(&mut rng);
            prop_assume!(target.min_frames() <= frames);
            let (_, g) = ctc_loss_grad_raw(&lp, frames, vocab, &target).unwrap();
            for row in g.chunks(vocab) {
                prop_assert!(row.iter().sum::<f64>().abs() < 1e-10);
            }
        }

        #[test]
        fn appending_a_frame_keeps_feasibility(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let (frames, vocab, mut lp, target) = random_instance(&mut rng);
            prop_assume!(target.min_frames() <= frames);
            let extra: Vec<f64> = (0..vocab).map(|_| rng.normal()).collect();
            lp.extend(log_softmax_rows(&extra, vocab));
            prop_assert!(ctc_loss_grad_raw(&lp, frames + 1, vocab, &target).is_ok());
        }
    }
}
