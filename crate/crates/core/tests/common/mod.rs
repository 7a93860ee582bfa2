//! Shared helpers for integration tests.

#![allow(dead_code)]

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resprune_core::tensor::Tensor;

/// Step size for central differences. With f64 arithmetic the truncation
/// error at this h sits well below the comparison tolerance.
pub const FD_H: f64 = 1e-3;
/// Relative tolerance for analytic-vs-numeric agreement.
pub const FD_TOL: f64 = 1e-5;

/// Checks `backward` against central differences of the loss itself.
///
/// `f` must rebuild its graph from the given leaves on every call: the check
/// re-evaluates the loss with one element nudged by ±`FD_H` at a time, so a
/// closure that caches tensors across calls would silently test nothing.
/// Relative error uses `max(1e-3, |analytic|, |numeric|)` as denominator so
/// near-zero gradients are compared absolutely.
pub fn check_grads(
    name: &str,
    inputs: &[(Vec<usize>, Vec<f64>)],
    f: &dyn Fn(&[Tensor<f64>]) -> Tensor<f64>,
) {
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(shape, data)| Tensor::var(data.clone(), shape).expect("leaf construction"))
        .collect();
    let loss = f(&leaves);
    assert_eq!(loss.numel(), 1, "{name}: loss must be scalar");
    let grads = loss.backward().expect("backward pass");

    for (i, (_, data)) in inputs.iter().enumerate() {
        let analytic = grads
            .get(&leaves[i])
            .unwrap_or_else(|| panic!("{name}: input {i} missing from gradient store"));
        for e in 0..data.len() {
            let eval_at = |v: f64| -> f64 {
                let probes: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, (s, d))| {
                        let mut d = d.clone();
                        if j == i {
                            d[e] = v;
                        }
                        Tensor::var(d, s).expect("probe construction")
                    })
                    .collect();
                f(&probes).data()[0]
            };
            let numeric = (eval_at(data[e] + FD_H) - eval_at(data[e] - FD_H)) / (2.0 * FD_H);
            let a = analytic[e];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            let rel = (a - numeric).abs() / denom;
            assert!(
                rel < FD_TOL,
                "{name}: input {i} element {e}: analytic {a:.9e} vs numeric {numeric:.9e} \
                 (rel {rel:.3e})"
            );
        }
    }
}

/// Deterministic values in `(lo, hi)` that stay at least `0.05` away from
/// zero, so a ±`FD_H` nudge never crosses relu's kink.
pub fn fd_values(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    assert!(lo < hi);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new(lo, hi);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v = dist.sample(&mut rng);
        if v.abs() >= 0.05 {
            out.push(v);
        }
    }
    out
}
