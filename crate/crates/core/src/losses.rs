//! CTC and token cross-entropy losses.
//!
//! CTC runs the alpha/beta recursions entirely in log space; the blank label
//! is index [`BLANK`] everywhere in the crate.

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::{log_add, log_sum_exp, Tensor};

pub const BLANK: usize = 0;

/// A label sequence for CTC. Never contains the blank and is never empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CtcTarget {
    tokens: Vec<usize>,
}

impl CtcTarget {
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("CTC target"));
        }
        if tokens.contains(&BLANK) {
            return Err(Error::Invalid("CTC target contains the blank label".into()));
        }
        Ok(CtcTarget { tokens })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Fewest frames able to emit this target: one per label plus a
    /// separating blank between each pair of equal neighbours.
    pub fn min_frames(&self) -> usize {
        let repeats = self.tokens.windows(2).filter(|w| w[0] == w[1]).count();
        self.tokens.len() + repeats
    }
}

/// Removes repeated labels, then blanks.
pub fn ctc_collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Loss `-ln p(target | log_probs)` and its gradient with respect to
/// `log_probs`.
pub(crate) fn ctc_forward_backward(log_probs: &Tensor, target: &CtcTarget) -> Result<(f64, Tensor)> {
    if !log_probs.is_matrix() {
        return Err(Error::shape("ctc_loss", log_probs.shape(), &[]));
    }
    let (frames, vocab) = (log_probs.rows(), log_probs.cols());
    if let Some(&bad) = target.tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            bound: vocab,
        });
    }
    let required = target.min_frames();
    if frames < required {
        return Err(Error::InfeasibleCtc { frames, required });
    }

    let mut ext = Vec::with_capacity(2 * target.tokens.len() + 1);
    ext.push(BLANK);
    for &t in &target.tokens {
        ext.push(t);
        ext.push(BLANK);
    }
    let states = ext.len();
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let lp = |t: usize, s: usize| log_probs.get(t, ext[s]);
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![vec![ninf; states]; frames];
    alpha[0][0] = lp(0, 0);
    alpha[0][1] = lp(0, 1);
    for t in 1..frames {
        for s in 0..states {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if can_skip(s) {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            if acc > ninf {
                alpha[t][s] = acc + lp(t, s);
            }
        }
    }
    let log_p = log_add(alpha[frames - 1][states - 1], alpha[frames - 1][states - 2]);
    if !log_p.is_finite() {
        return Err(Error::InfeasibleCtc { frames, required });
    }

    // beta[t][s]: log probability of finishing from state s at frame t,
    // counting emissions after t only.
    let mut beta = vec![vec![ninf; states]; frames];
    beta[frames - 1][states - 1] = 0.0;
    beta[frames - 1][states - 2] = 0.0;
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let mut acc = beta[t + 1][s] + lp(t + 1, s);
            if s + 1 < states {
                acc = log_add(acc, beta[t + 1][s + 1] + lp(t + 1, s + 1));
            }
            if s + 2 < states && can_skip(s + 2) {
                acc = log_add(acc, beta[t + 1][s + 2] + lp(t + 1, s + 2));
            }
            beta[t][s] = acc;
        }
    }

    let mut grad = Tensor::zeros(&[frames, vocab]);
    for t in 0..frames {
        for s in 0..states {
            let occ = alpha[t][s] + beta[t][s] - log_p;
            if occ > ninf {
                let k = ext[s];
                let cur = grad.get(t, k);
                grad.set(t, k, cur - occ.exp());
            }
        }
    }
    Ok((-log_p, grad))
}

/// Negative log of the total probability of all alignments of `target`.
pub fn ctc_loss(log_probs: &Tensor, target: &CtcTarget) -> Result<f64> {
    ctc_forward_backward(log_probs, target).map(|(loss, _)| loss)
}

/// Mean token negative log-likelihood with a stable log-softmax.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let loss = tape.cross_entropy(x, targets)?;
    Ok(tape.value(loss).item())
}

/// Row-wise log-sum-exp, the normalizer used by both losses.
pub fn row_log_sum_exp(x: &Tensor) -> Vec<f64> {
    (0..x.rows()).map(|r| log_sum_exp(x.row(r))).collect()
}
