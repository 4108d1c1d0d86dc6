use rand::seq::index::sample;

use super::Params;
use crate::rng;
use crate::scalar::Scalar;

/// `|a - n| / max(|a|, |n|)`, with a floor on the denominator so that two
/// vanishing gradients compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-7);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` gradients against central differences
/// `(L(p + eps) - L(p - eps)) / 2 eps` on up to `max_coords` sampled
/// coordinates and returns the largest relative error.
pub fn grad_check<T, M, F>(model: &M, analytic: &M, loss: F, eps: f64, max_coords: usize, seed: u64) -> f64
where
    T: Scalar,
    M: Params<T> + Clone,
    F: Fn(&M) -> T,
{
    compare(model, analytic, max_coords, seed, |probe, s, k| Some(central(probe, &loss, s, k, eps))).max_error
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradReport {
    pub max_error: f64,
    pub checked: usize,
    /// Coordinates with no smooth piece around them, left out of `max_error`.
    pub nondifferentiable: usize,
}

/// Like [`grad_check`], but each numeric derivative is Ridders'
/// extrapolation of central differences, started from a step inside the
/// smooth piece around the current parameters.
///
/// A single step cannot serve every coordinate of a rectifier network in
/// double precision. Gradients near 1e-8 need a step near 1e-2 to rise
/// above roundoff, while a coordinate next to a kink needs a step small
/// enough not to cross it. `pattern` identifies the smooth piece (which
/// side of its kink every rectifier sits on, plus anything else the loss
/// branches on; empty for smooth models). The starting step is halved from
/// `eps` until the pattern at `p - h` and `p + h` matches the one at `p`.
/// If that never happens above 1e-12 the loss has no derivative there and
/// the coordinate is counted as nondifferentiable. A tableau whose own
/// error estimate stays above 1e-5 of its value is rerun from up to three
/// smaller starts. The analytic gradient plays no part in choosing the
/// estimate.
pub fn grad_check_extrapolated<T, M, F, P>(
    model: &M,
    analytic: &M,
    loss: F,
    pattern: P,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> GradReport
where
    T: Scalar,
    M: Params<T> + Clone,
    F: Fn(&M) -> T,
    P: Fn(&M) -> Vec<bool>,
{
    let here = pattern(model);
    let noise = T::epsilon().as_f64() * loss(model).as_f64().abs();
    compare(model, analytic, max_coords, seed, |probe, s, k| {
        let orig = probe.params()[s][k];
        let at = |probe: &mut M, h: f64| {
            probe.params_mut()[s][k] = orig + T::of(h);
            let p = pattern(probe);
            probe.params_mut()[s][k] = orig;
            p
        };
        let mut h = eps;
        while at(probe, h) != here || at(probe, -h) != here {
            h /= 2.0;
            if h < 1e-12 {
                return None;
            }
        }
        // Curvature can live on a scale far below the kink distance, as
        // when a cosine sees a nearly zero vector. An unconverged tableau
        // is rerun from smaller steps.
        let mut best = ridders(|h| central(probe, &loss, s, k, h), h, noise);
        for _ in 0..3 {
            if best.1 <= 1e-5 * best.0.abs() {
                break;
            }
            h /= 10.0;
            let next = ridders(|h| central(probe, &loss, s, k, h), h, noise);
            if next.1 < best.1 {
                best = next;
            }
        }
        Some(best.0)
    })
}

/// Ridders' method: a Richardson tableau of `diff(h)` over steps `h0`,
/// `h0 / 1.4`, ..., stopped once higher orders stop helping. Returns the
/// best estimate and its error estimate. `noise` is the absolute rounding
/// error of one loss evaluation; no error estimate is allowed below the
/// `noise / h` that it implies for a difference at step `h`.
pub fn ridders(mut diff: impl FnMut(f64) -> f64, h0: f64, noise: f64) -> (f64, f64) {
    const SHRINK: f64 = 1.4;
    const COLUMNS: usize = 10;
    const SAFE: f64 = 2.0;
    let s2 = SHRINK * SHRINK;
    let mut prev = vec![diff(h0)];
    let (mut best, mut err) = (prev[0], f64::INFINITY);
    let mut h = h0;
    for _ in 1..COLUMNS {
        h /= SHRINK;
        let mut row = vec![diff(h)];
        let mut fac = s2;
        for j in 1..=prev.len() {
            let v = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= s2;
            let e = (v - row[j - 1]).abs().max((v - prev[j - 1]).abs()).max(noise / h);
            if e <= err {
                err = e;
                best = v;
            }
            row.push(v);
        }
        let diverging = (row[row.len() - 1] - prev[prev.len() - 1]).abs() >= SAFE * err;
        prev = row;
        if diverging {
            break;
        }
    }
    (best, err)
}

fn central<T, M, F>(probe: &mut M, loss: &F, s: usize, k: usize, h: f64) -> f64
where
    T: Scalar,
    M: Params<T>,
    F: Fn(&M) -> T,
{
    let orig = probe.params()[s][k];
    probe.params_mut()[s][k] = orig + T::of(h);
    let up = loss(probe).as_f64();
    probe.params_mut()[s][k] = orig - T::of(h);
    let down = loss(probe).as_f64();
    probe.params_mut()[s][k] = orig;
    (up - down) / (2.0 * h)
}

fn compare<T, M>(
    model: &M,
    analytic: &M,
    max_coords: usize,
    seed: u64,
    mut numeric: impl FnMut(&mut M, usize, usize) -> Option<f64>,
) -> GradReport
where
    T: Scalar,
    M: Params<T> + Clone,
{
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let picks: Vec<usize> = if total <= max_coords {
        (0..total).collect()
    } else {
        let mut r = rng::stream(seed, "gradcheck");
        let mut v = sample(&mut r, total, max_coords).into_vec();
        v.sort_unstable();
        v
    };
    let locate = |mut flat: usize| {
        for (s, &n) in sizes.iter().enumerate() {
            if flat < n {
                return (s, flat);
            }
            flat -= n;
        }
        unreachable!("coordinate beyond parameter count")
    };
    let grads = analytic.params();
    let mut probe = model.clone();
    let mut report = GradReport { max_error: 0.0, checked: 0, nondifferentiable: 0 };
    for flat in picks {
        let (s, k) = locate(flat);
        match numeric(&mut probe, s, k) {
            Some(n) => {
                report.checked += 1;
                report.max_error = report.max_error.max(relative_error(grads[s][k].as_f64(), n));
            }
            None => report.nondifferentiable += 1,
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Dense, Stack};

    #[test]
    fn ridders_recovers_a_smooth_derivative() {
        let f = |x: f64| (x.sin()).exp();
        let x = 0.7;
        let (d, err) = ridders(|h| (f(x + h) - f(x - h)) / (2.0 * h), 0.1, 0.0);
        let exact = x.cos() * f(x);
        assert!((d - exact).abs() < 1e-11, "{d} vs {exact}");
        assert!(err < 1e-9);
    }

    fn leaky_case() -> (Stack<f64>, Vec<Vec<f64>>) {
        let mut r = rng::stream(9, "gradcheck-test");
        let act = Activation::LEAKY_DEFAULT;
        let net = Stack::new(vec![Dense::new(5, 4, act, &mut r), Dense::new(4, 3, act, &mut r)]);
        let xs = vec![vec![1.0, 0.0, 2.0, 1.0, 0.0], vec![0.0, 1.0, 1.0, 0.0, 2.0]];
        (net, xs)
    }

    fn sum_of_squares(net: &Stack<f64>, xs: &[Vec<f64>]) -> f64 {
        xs.iter().flat_map(|x| net.infer(x).unwrap()).map(|v| v * v).sum()
    }

    fn exact_grads(net: &Stack<f64>, xs: &[Vec<f64>]) -> Stack<f64> {
        let mut g = net.zeros_like();
        for x in xs {
            let c = net.forward(x, None).unwrap();
            let dout: Vec<f64> = c.output.iter().map(|v| 2.0 * v).collect();
            net.backward(&c, &dout, &mut g).unwrap();
        }
        g
    }

    #[test]
    fn extrapolated_check_accepts_exact_and_flags_doubled_gradients() {
        let (net, xs) = leaky_case();
        let g = exact_grads(&net, &xs);
        let pattern = |n: &Stack<f64>| xs.iter().flat_map(|x| n.kink_pattern(x).unwrap()).collect();
        let loss = |n: &Stack<f64>| sum_of_squares(n, &xs);
        let ok = grad_check_extrapolated(&net, &g, loss, pattern, 1e-2, usize::MAX, 0);
        assert!(ok.max_error < 1e-6, "{ok:?}");
        assert_eq!(ok.checked, 5 * 4 + 4 + 4 * 3 + 3);

        let mut bad = g.clone();
        for p in bad.params_mut() {
            p.iter_mut().for_each(|v| *v *= 2.0);
        }
        let rep = grad_check_extrapolated(&net, &bad, loss, pattern, 1e-2, usize::MAX, 0);
        assert!(rep.max_error > 0.4, "{rep:?}");
    }

    #[test]
    fn a_unit_sitting_on_its_kink_has_no_derivative() {
        let net = Stack::new(vec![Dense::from_parts(1, 1, vec![1.0], vec![-2.0], Activation::Relu).unwrap()]);
        let xs = vec![vec![2.0]];
        let g = net.zeros_like();
        let rep = grad_check_extrapolated(
            &net,
            &g,
            |n: &Stack<f64>| sum_of_squares(n, &xs) + n.infer(&xs[0]).unwrap()[0],
            |n: &Stack<f64>| n.kink_pattern(&xs[0]).unwrap(),
            1e-2,
            usize::MAX,
            0,
        );
        assert_eq!((rep.checked, rep.nondifferentiable), (0, 2));
    }
}
