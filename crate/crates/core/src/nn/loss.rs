use crate::error::{Error, Result};
use crate::scalar::{dot, norm, Scalar};

pub fn cosine_sim<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("cosine of lengths {} and {}", x.len(), y.len())));
    }
    let (nx, ny) = (norm(x), norm(y));
    if nx == T::zero() || ny == T::zero() {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(x, y) / (nx * ny)).max(-T::one()).min(T::one()))
}

/// Similarity and its gradients with respect to both arguments.
pub fn cosine_backward<T: Scalar>(x: &[T], y: &[T]) -> Result<(T, Vec<T>, Vec<T>)> {
    let (nx, ny) = (norm(x), norm(y));
    if nx == T::zero() || ny == T::zero() {
        return Err(Error::ZeroNorm);
    }
    let s = dot(x, y) / (nx * ny);
    let inv = T::one() / (nx * ny);
    let (sx, sy) = (s / (nx * nx), s / (ny * ny));
    let dx = x.iter().zip(y).map(|(&a, &b)| b * inv - sx * a).collect();
    let dy = x.iter().zip(y).map(|(&a, &b)| a * inv - sy * b).collect();
    Ok((s, dx, dy))
}

/// Log-probabilities of a softmax; entries listed in `masked` get probability zero.
pub fn log_softmax<T: Scalar>(logits: &[T], masked: Option<usize>) -> Vec<T> {
    let live = |i: usize| Some(i) != masked;
    let m = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| live(*i))
        .map(|(_, &v)| v)
        .fold(T::neg_infinity(), T::max);
    let sum: T = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| live(*i))
        .map(|(_, &v)| (v - m).exp())
        .sum();
    let lse = m + sum.ln();
    logits
        .iter()
        .enumerate()
        .map(|(i, &v)| if live(i) { v - lse } else { T::neg_infinity() })
        .collect()
}

/// Cross-entropy of `target` under softmax(logits); returns `(loss, dL/dlogits)`.
pub fn softmax_xent<T: Scalar>(logits: &[T], target: usize, masked: Option<usize>) -> (T, Vec<T>) {
    let lp = log_softmax(logits, masked);
    let loss = -lp[target];
    let mut d: Vec<T> = lp.iter().map(|&l| l.exp()).collect();
    d[target] -= T::one();
    (loss, d)
}

/// `P(d_i | q) = exp(sim(q, d_i)) / sum_j exp(sim(q, d_j))` and `-log P(truth)`.
pub fn softmax_relevance<T: Scalar, V: AsRef<[T]>>(q: &[T], candidates: &[V], truth: usize) -> Result<(Vec<T>, T)> {
    if truth >= candidates.len() {
        return Err(Error::Invalid(format!("truth index {truth} of {}", candidates.len())));
    }
    let sims = candidates
        .iter()
        .map(|c| cosine_sim(q, c.as_ref()))
        .collect::<Result<Vec<T>>>()?;
    let lp = log_softmax(&sims, None);
    let probs = lp.iter().map(|&l| l.exp()).collect();
    Ok((probs, -lp[truth]))
}

#[derive(Clone, Debug)]
pub struct RelevanceGrad<T> {
    pub loss: T,
    pub dq: Vec<T>,
    pub dcandidates: Vec<Vec<T>>,
}

pub fn softmax_relevance_backward<T: Scalar, V: AsRef<[T]>>(q: &[T], candidates: &[V], truth: usize) -> Result<RelevanceGrad<T>> {
    if truth >= candidates.len() {
        return Err(Error::Invalid(format!("truth index {truth} of {}", candidates.len())));
    }
    let parts = candidates
        .iter()
        .map(|c| cosine_backward(q, c.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let sims: Vec<T> = parts.iter().map(|p| p.0).collect();
    let (loss, dsims) = softmax_xent(&sims, truth, None);
    let mut dq = vec![T::zero(); q.len()];
    let mut dcandidates = Vec::with_capacity(parts.len());
    for ((_, gq, gc), &ds) in parts.into_iter().zip(&dsims) {
        for (a, b) in dq.iter_mut().zip(&gq) {
            *a += ds * *b;
        }
        dcandidates.push(gc.into_iter().map(|g| g * ds).collect());
    }
    Ok(RelevanceGrad { loss, dq, dcandidates })
}

/// True when any vector has zero norm, which makes the relevance loss undefined.
pub fn any_zero_norm<T: Scalar, V: AsRef<[T]>>(vs: &[V]) -> bool {
    vs.iter().any(|v| norm(v.as_ref()) == T::zero())
}

/// In-batch version of the relevance loss. Member `b` scores query `qs[b]`
/// against its own candidate `cs[b]` (the truth) and the candidates of the
/// members listed in `negatives[b]`. Returns the summed loss and gradients
/// with respect to every query and candidate. A member whose query or
/// candidates include a zero vector (possible under dropout) is skipped.
pub fn batch_relevance_backward<T: Scalar>(
    qs: &[Vec<T>],
    cs: &[Vec<T>],
    negatives: &[Vec<usize>],
) -> Result<(T, Vec<Vec<T>>, Vec<Vec<T>>)> {
    let mut dqs: Vec<Vec<T>> = qs.iter().map(|q| vec![T::zero(); q.len()]).collect();
    let mut dcs: Vec<Vec<T>> = cs.iter().map(|c| vec![T::zero(); c.len()]).collect();
    let mut total = T::zero();
    for (b, negs) in negatives.iter().enumerate() {
        let members: Vec<usize> = std::iter::once(b).chain(negs.iter().copied()).collect();
        let cands: Vec<&[T]> = members.iter().map(|&m| cs[m].as_slice()).collect();
        if any_zero_norm(&cands) || any_zero_norm(&[&qs[b]]) {
            continue;
        }
        let g = softmax_relevance_backward(&qs[b], &cands, 0)?;
        total += g.loss;
        for (a, d) in dqs[b].iter_mut().zip(&g.dq) {
            *a += *d;
        }
        for (&m, dc) in members.iter().zip(&g.dcandidates) {
            for (a, d) in dcs[m].iter_mut().zip(dc) {
                *a += *d;
            }
        }
    }
    Ok((total, dqs, dcs))
}

#[cfg(test)]
mod tests {
    use super::*;
    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let expected = 32.0 / (14f64.sqrt() * 77f64.sqrt());
        assert!(close(cosine_sim(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap(), expected, 1e-15));
        assert!(close(expected, 0.974_631_846, 1e-9));
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn relevance_symmetric_case() {
        let q = [1.0, 2.0, 3.0];
        let cands = vec![vec![0.5, 0.1, 0.2]; 5];
        let (p, loss) = softmax_relevance(&q, &cands, 2).unwrap();
        assert!(p.iter().all(|&x| close(x, 0.2, 1e-15)));
        assert!(close(loss, 5f64.ln(), 1e-12));
    }

    #[test]
    fn relevance_closed_form_two_candidates() {
        let q = [2.0, 0.0];
        let cands = [[3.0, 0.0], [0.0, 1.0]];
        let (p, loss) = softmax_relevance(&q, &cands, 0).unwrap();
        let e = std::f64::consts::E;
        assert!(close(p[0], e / (e + 1.0), 1e-12));
        assert!(close(loss, -(e / (e + 1.0)).ln(), 1e-12));
    }

    #[test]
    fn log_softmax_mask() {
        let lp = log_softmax(&[1.0f64, 5.0, 2.0], Some(1));
        assert_eq!(lp[1], f64::NEG_INFINITY);
        let s: f64 = lp.iter().map(|l| l.exp()).sum();
        assert!(close(s, 1.0, 1e-12));
    }
}
