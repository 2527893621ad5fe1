//! Linear-chain CRF in log space.
//!
//! A label sequence `y` over `N` positions scores
//! `start[y_0] + sum_i emit[i][y_i] + sum_{i>0} trans[y_{i-1}][y_i] + end[y_{N-1}]`.
//! Disallowed transitions carry `-inf` and therefore zero probability.

use crate::autograd::Backward;
use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct CrfParams {
    /// `|Y| x |Y|`, row = previous label, column = next label.
    pub transitions: Matrix,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl CrfParams {
    pub fn zeros(num_labels: usize) -> Self {
        Self {
            transitions: Matrix::zeros(num_labels, num_labels),
            start: vec![0.0; num_labels],
            end: vec![0.0; num_labels],
        }
    }

    pub fn num_labels(&self) -> usize {
        self.start.len()
    }

    /// Adds `-inf` wherever `allowed` is false.
    pub fn masked(&self, mask: &TransitionMask) -> CrfParams {
        let mut out = self.clone();
        let n = self.num_labels();
        for a in 0..n {
            for b in 0..n {
                if !mask.transition[a * n + b] {
                    out.transitions.set(a, b, f64::NEG_INFINITY);
                }
            }
        }
        for (s, &ok) in out.start.iter_mut().zip(&mask.start) {
            if !ok {
                *s = f64::NEG_INFINITY;
            }
        }
        out
    }

    fn check(&self, emissions: &Matrix) -> Result<()> {
        let y = self.num_labels();
        if emissions.rows() == 0 {
            return Err(Error::input("CRF needs at least one position"));
        }
        if emissions.cols() != y || self.transitions.shape() != (y, y) || self.end.len() != y {
            return Err(Error::input(format!(
                "emission width {} inconsistent with {} labels",
                emissions.cols(),
                y
            )));
        }
        Ok(())
    }
}

/// Allowed transitions and start labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMask {
    pub transition: Vec<bool>,
    pub start: Vec<bool>,
}

pub fn sequence_score(emissions: &Matrix, params: &CrfParams, labels: &[usize]) -> Result<f64> {
    params.check(emissions)?;
    let y = params.num_labels();
    if labels.len() != emissions.rows() {
        return Err(Error::input(format!(
            "{} labels for {} positions",
            labels.len(),
            emissions.rows()
        )));
    }
    if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= y) {
        return Err(Error::input(format!("label index {l} at position {i} outside 0..{y}")));
    }
    let mut s = params.start[labels[0]] + emissions.get(0, labels[0]);
    for i in 1..labels.len() {
        s += params.transitions.get(labels[i - 1], labels[i]) + emissions.get(i, labels[i]);
    }
    Ok(s + params.end[labels[labels.len() - 1]])
}

/// Forward variables `alpha[i][y]`: log-sum of scores of all prefixes ending in `y` at `i`.
fn forward_table(emissions: &Matrix, params: &CrfParams) -> Matrix {
    let (n, y) = emissions.shape();
    let mut alpha = Matrix::zeros(n, y);
    for l in 0..y {
        alpha.set(0, l, params.start[l] + emissions.get(0, l));
    }
    let mut buf = vec![0.0; y];
    for i in 1..n {
        for l in 0..y {
            for (p, b) in buf.iter_mut().enumerate() {
                *b = alpha.get(i - 1, p) + params.transitions.get(p, l);
            }
            alpha.set(i, l, log_sum_exp(&buf) + emissions.get(i, l));
        }
    }
    alpha
}

/// Backward variables `beta[i][y]`: log-sum of scores of all suffixes after `y` at `i`.
fn backward_table(emissions: &Matrix, params: &CrfParams) -> Matrix {
    let (n, y) = emissions.shape();
    let mut beta = Matrix::zeros(n, y);
    for l in 0..y {
        beta.set(n - 1, l, params.end[l]);
    }
    let mut buf = vec![0.0; y];
    for i in (0..n - 1).rev() {
        for l in 0..y {
            for (nx, b) in buf.iter_mut().enumerate() {
                *b = params.transitions.get(l, nx) + emissions.get(i + 1, nx) + beta.get(i + 1, nx);
            }
            beta.set(i, l, log_sum_exp(&buf));
        }
    }
    beta
}

pub fn log_partition(emissions: &Matrix, params: &CrfParams) -> Result<f64> {
    params.check(emissions)?;
    let alpha = forward_table(emissions, params);
    let n = emissions.rows();
    let last: Vec<f64> = (0..params.num_labels())
        .map(|l| alpha.get(n - 1, l) + params.end[l])
        .collect();
    Ok(log_sum_exp(&last))
}

/// `log p(gold | emissions)`; always `<= 0`.
pub fn crf_log_prob(emissions: &Matrix, params: &CrfParams, gold: &[usize]) -> Result<f64> {
    let score = sequence_score(emissions, params, gold)?;
    Ok(score - log_partition(emissions, params)?)
}

/// Highest-scoring label sequence. At every step ties go to the lower label index.
pub fn viterbi_decode(emissions: &Matrix, params: &CrfParams) -> Result<Vec<usize>> {
    params.check(emissions)?;
    let (n, y) = emissions.shape();
    let mut score: Vec<f64> = (0..y).map(|l| params.start[l] + emissions.get(0, l)).collect();
    let mut back = vec![vec![0usize; y]; n];
    for (i, back_i) in back.iter_mut().enumerate().skip(1) {
        let mut next = vec![f64::NEG_INFINITY; y];
        for l in 0..y {
            let mut best = 0;
            let mut best_v = score[0] + params.transitions.get(0, l);
            for p in 1..y {
                let v = score[p] + params.transitions.get(p, l);
                if v > best_v {
                    best_v = v;
                    best = p;
                }
            }
            next[l] = best_v + emissions.get(i, l);
            back_i[l] = best;
        }
        score = next;
    }
    let mut last = 0;
    let mut last_v = score[0] + params.end[0];
    for l in 1..y {
        let v = score[l] + params.end[l];
        if v > last_v {
            last_v = v;
            last = l;
        }
    }
    let mut path = vec![0; n];
    path[n - 1] = last;
    for i in (1..n).rev() {
        path[i - 1] = back[i][path[i]];
    }
    Ok(path)
}

/// Gradients of `-log p(gold)` with respect to emissions, transitions, start
/// and end scores: expected feature counts minus gold counts.
pub struct CrfGradients {
    pub emissions: Matrix,
    pub transitions: Matrix,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

pub fn crf_nll_gradients(emissions: &Matrix, params: &CrfParams, gold: &[usize]) -> Result<CrfGradients> {
    sequence_score(emissions, params, gold)?;
    let (n, y) = emissions.shape();
    let alpha = forward_table(emissions, params);
    let beta = backward_table(emissions, params);
    let last: Vec<f64> = (0..y).map(|l| alpha.get(n - 1, l) + params.end[l]).collect();
    let log_z = log_sum_exp(&last);

    let mut d_emit = Matrix::zeros(n, y);
    for i in 0..n {
        for l in 0..y {
            let m = (alpha.get(i, l) + beta.get(i, l) - log_z).exp();
            d_emit.set(i, l, m);
        }
    }
    let mut d_trans = Matrix::zeros(y, y);
    for i in 1..n {
        for a in 0..y {
            for b in 0..y {
                let t = params.transitions.get(a, b);
                if t == f64::NEG_INFINITY {
                    continue;
                }
                let lp = alpha.get(i - 1, a) + t + emissions.get(i, b) + beta.get(i, b) - log_z;
                d_trans.set(a, b, d_trans.get(a, b) + lp.exp());
            }
        }
    }
    let mut d_start: Vec<f64> = (0..y).map(|l| d_emit.get(0, l)).collect();
    let mut d_end: Vec<f64> = (0..y).map(|l| d_emit.get(n - 1, l)).collect();

    for (i, &g) in gold.iter().enumerate() {
        d_emit.set(i, g, d_emit.get(i, g) - 1.0);
        if i > 0 {
            let p = gold[i - 1];
            d_trans.set(p, g, d_trans.get(p, g) - 1.0);
        }
    }
    d_start[gold[0]] -= 1.0;
    d_end[gold[n - 1]] -= 1.0;
    Ok(CrfGradients {
        emissions: d_emit,
        transitions: d_trans,
        start: d_start,
        end: d_end,
    })
}

/// Tape rule for `-log p(gold)` with inputs `[emissions, transitions, start, end]`.
pub(crate) struct CrfNllRule {
    pub gold: Vec<usize>,
    pub mask: Option<TransitionMask>,
}

impl CrfNllRule {
    pub fn params_from(&self, inputs: &[&Matrix]) -> CrfParams {
        let raw = CrfParams {
            transitions: inputs[1].clone(),
            start: inputs[2].data().to_vec(),
            end: inputs[3].data().to_vec(),
        };
        match &self.mask {
            Some(m) => raw.masked(m),
            None => raw,
        }
    }
}

impl Backward for CrfNllRule {
    fn backward(&self, inputs: &[&Matrix], _: &Matrix, grad: &Matrix) -> Vec<Matrix> {
        let params = self.params_from(inputs);
        let g = grad.get(0, 0);
        let grads =
            crf_nll_gradients(inputs[0], &params, &self.gold).expect("CRF inputs were validated in the forward pass");
        vec![
            grads.emissions.scaled(g),
            grads.transitions.scaled(g),
            Matrix::row_vector(grads.start).scaled(g),
            Matrix::row_vector(grads.end).scaled(g),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Every label sequence of length `n` over `y` labels.
    fn all_sequences(n: usize, y: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..n {
            out = out
                .into_iter()
                .flat_map(|s| {
                    (0..y).map(move |l| {
                        let mut t = s.clone();
                        t.push(l);
                        t
                    })
                })
                .collect();
        }
        out
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, y: usize) -> (Matrix, CrfParams) {
        let mut r = |k| (0..k).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
        let emissions = Matrix::from_vec(n, y, r(n * y));
        let params = CrfParams {
            transitions: Matrix::from_vec(y, y, r(y * y)),
            start: r(y),
            end: r(y),
        };
        (emissions, params)
    }

    #[test]
    fn uniform_chain_log_prob() {
        let params = CrfParams::zeros(3);
        let em = Matrix::zeros(2, 3);
        for seq in all_sequences(2, 3) {
            let lp = crf_log_prob(&em, &params, &seq).unwrap();
            assert!((lp + 9f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_position_is_log_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (em, params) = random_instance(&mut rng, 1, 4);
        let scores: Vec<f64> = (0..4).map(|l| em.get(0, l) + params.start[l] + params.end[l]).collect();
        let lse = log_sum_exp(&scores);
        for l in 0..4 {
            let lp = crf_log_prob(&em, &params, &[l]).unwrap();
            assert!((lp - (scores[l] - lse)).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_enumeration_and_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (em, params) = random_instance(&mut rng, 4, 5);
        let seqs = all_sequences(4, 5);
        assert_eq!(seqs.len(), 625);
        let scores: Vec<f64> = seqs.iter().map(|s| sequence_score(&em, &params, s).unwrap()).collect();
        let brute = log_sum_exp(&scores);
        let z = log_partition(&em, &params).unwrap();
        assert!((brute - z).abs() <= 1e-6 * brute.abs().max(1.0));
        let total: f64 = seqs.iter().map(|s| crf_log_prob(&em, &params, s).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);

        let best = viterbi_decode(&em, &params).unwrap();
        let best_score = sequence_score(&em, &params, &best).unwrap();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best_score, max);
    }

    #[test]
    fn viterbi_tie_break_and_decoupled_chain() {
        let params = CrfParams::zeros(3);
        assert_eq!(viterbi_decode(&Matrix::zeros(4, 3), &params).unwrap(), vec![0, 0, 0, 0]);
        let em = Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]]);
        assert_eq!(viterbi_decode(&em, &params).unwrap(), vec![1, 2, 0]);
    }

    #[test]
    fn label_out_of_range_is_input_error() {
        let params = CrfParams::zeros(3);
        assert!(matches!(
            crf_log_prob(&Matrix::zeros(2, 3), &params, &[0, 3]),
            Err(Error::Input(_))
        ));
        assert!(crf_log_prob(&Matrix::zeros(0, 3), &params, &[]).is_err());
    }

    #[test]
    fn masked_transitions_have_zero_probability() {
        let mut mask = TransitionMask {
            transition: vec![true; 9],
            start: vec![true; 3],
        };
        mask.transition[2] = false; // 0 -> 2
        mask.start[1] = false;
        let params = CrfParams::zeros(3).masked(&mask);
        let em = Matrix::zeros(2, 3);
        assert_eq!(crf_log_prob(&em, &params, &[0, 2]).unwrap(), f64::NEG_INFINITY);
        assert_eq!(crf_log_prob(&em, &params, &[1, 0]).unwrap(), f64::NEG_INFINITY);
        // 9 sequences minus 3 starting at 1 minus (0,2)
        assert!((crf_log_prob(&em, &params, &[0, 0]).unwrap() + 5f64.ln()).abs() < 1e-12);
        let grads = crf_nll_gradients(&em, &params, &[0, 0]).unwrap();
        assert!(grads.transitions.is_finite());
        assert_eq!(grads.transitions.get(0, 2), 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (em, params) = random_instance(&mut rng, 4, 3);
        let gold = [2, 0, 1, 1];
        let nll = |em: &Matrix, p: &CrfParams| -crf_log_prob(em, p, &gold).unwrap();
        let g = crf_nll_gradients(&em, &params, &gold).unwrap();
        let h = 1e-5;
        for i in 0..em.len() {
            let mut a = em.clone();
            let mut b = em.clone();
            a.data_mut()[i] += h;
            b.data_mut()[i] -= h;
            let fd = (nll(&a, &params) - nll(&b, &params)) / (2.0 * h);
            assert!((fd - g.emissions.data()[i]).abs() < 1e-7);
        }
        for i in 0..9 {
            let mut a = params.clone();
            let mut b = params.clone();
            a.transitions.data_mut()[i] += h;
            b.transitions.data_mut()[i] -= h;
            let fd = (nll(&em, &a) - nll(&em, &b)) / (2.0 * h);
            assert!((fd - g.transitions.data()[i]).abs() < 1e-7);
        }
        for i in 0..3 {
            let mut a = params.clone();
            let mut b = params.clone();
            a.start[i] += h;
            b.start[i] -= h;
            assert!(((nll(&em, &a) - nll(&em, &b)) / (2.0 * h) - g.start[i]).abs() < 1e-7);
            let mut a = params.clone();
            let mut b = params.clone();
            a.end[i] += h;
            b.end[i] -= h;
            assert!(((nll(&em, &a) - nll(&em, &b)) / (2.0 * h) - g.end[i]).abs() < 1e-7);
        }
    }
}
