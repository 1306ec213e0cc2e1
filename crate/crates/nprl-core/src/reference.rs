//! Independent reference implementations used to verify the fast paths.
//!
//! Nothing here shares code with `ops` or `graph`: the convolution is six
//! nested loops, the matmul three, and the gradient checker only ever calls
//! the public forward/backward API. The `verify` command in the companion
//! crate runs these at runtime, so they live in the library rather than in
//! test modules.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::elem::Elem;
use crate::graph::{Graph, VarId};
use crate::rng;
use crate::tensor::Tensor;

/// Plain three-loop matrix multiply: A[m x k] * B[k x n].
pub fn naive_matmul<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = E::ZERO;
            for p in 0..k {
                s = s + a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Direct six-loop valid 3x3 convolution.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d<E: Elem>(
    x: &[E],
    w: &[E],
    bias: &[E],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    stride: usize,
) -> Vec<E> {
    let oh = (h - 3) / stride + 1;
    let ow = (wd - 3) / stride + 1;
    let mut out = vec![E::ZERO; n * cout * oh * ow];
    for img in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let xv = x[((img * cin + ci) * h + oy * stride + ky) * wd + ox * stride + kx];
                                let wv = w[((co * cin + ci) * 3 + ky) * 3 + kx];
                                acc = acc + xv * wv;
                            }
                        }
                    }
                    out[((img * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// One mismatch found by the gradient checker.
#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<GradMismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    pub fn describe(&self) -> String {
        match &self.worst {
            Some(w) => format!(
                "{} entries checked, max rel err {:.3e} (tensor {} index {}: analytic {:.6e} vs numeric {:.6e})",
                self.checked, self.max_rel_err, w.tensor, w.index, w.analytic, w.numeric
            ),
            None => format!("{} entries checked, max rel err {:.3e}", self.checked, self.max_rel_err),
        }
    }
}

/// Central finite-difference check of reverse-mode gradients in 64-bit mode.
///
/// `build` constructs a fresh graph from the given parameter tensors and
/// returns `(graph, loss id, parameter ids)`. At most `max_per_tensor`
/// entries per tensor are probed (all of them when the tensor is small);
/// probe indices are drawn from `sample_seed`.
pub fn check_gradients<F>(
    params: &[Tensor<f64>],
    build: F,
    eps: f64,
    max_per_tensor: usize,
    sample_seed: u64,
) -> GradCheckReport
where
    F: Fn(&[Tensor<f64>]) -> (Graph<f64>, VarId, Vec<VarId>),
{
    let (mut graph, loss, ids) = build(params);
    assert_eq!(ids.len(), params.len(), "build must return one id per parameter");
    graph.backward(loss).expect("backward failed during gradient check");
    let analytic: Vec<Vec<f64>> =
        ids.iter().map(|&id| graph.grad(id).expect("parameter has no gradient").to_vec()).collect();

    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    let mut sampler = rng::derive(sample_seed, "gradcheck-indices");

    for (t, p) in params.iter().enumerate() {
        let numel = p.numel();
        let indices: Vec<usize> = if numel <= max_per_tensor {
            (0..numel).collect()
        } else {
            (0..max_per_tensor).map(|_| sampler.gen_range(0..numel)).collect()
        };
        for idx in indices {
            let orig = p.data()[idx];
            let mut probe = params.to_vec();
            probe[t].data_mut()[idx] = orig + eps;
            let (g_plus, l_plus, _) = build(&probe);
            let f_plus = g_plus.value(l_plus).item();
            probe[t].data_mut()[idx] = orig - eps;
            let (g_minus, l_minus, _) = build(&probe);
            let f_minus = g_minus.value(l_minus).item();
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[t][idx];
            // both effectively zero: agreement by absolute criterion
            let rel = if a.abs() < 1e-7 && numeric.abs() < 1e-7 {
                0.0
            } else {
                (a - numeric).abs() / a.abs().max(numeric.abs())
            };
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some(GradMismatch { tensor: t, index: idx, analytic: a, numeric, rel_err: rel });
            }
        }
    }
    report
}

/// Exact Q* for a small deterministic MDP, by value iteration.
///
/// `transitions[s][a] = (next_state, reward)`. Iterates until the sup-norm
/// update falls below `tol`.
pub fn value_iteration(transitions: &[Vec<(usize, f64)>], gamma: f64, tol: f64) -> Vec<Vec<f64>> {
    let ns = transitions.len();
    let na = transitions[0].len();
    let mut q = vec![vec![0.0; na]; ns];
    loop {
        let mut delta: f64 = 0.0;
        let mut next = q.clone();
        for s in 0..ns {
            for a in 0..na {
                let (s2, r) = transitions[s][a];
                let v2 = q[s2].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let nv = r + gamma * v2;
                delta = delta.max((nv - q[s][a]).abs());
                next[s][a] = nv;
            }
        }
        q = next;
        if delta < tol {
            return q;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_iteration_solves_known_mdp() {
        // s0: a0 -> (s0, +1), a1 -> (s1, 0); s1: a0 -> (s1, 0), a1 -> (s0, +2)
        let t = vec![vec![(0, 1.0), (1, 0.0)], vec![(1, 0.0), (0, 2.0)]];
        let q = value_iteration(&t, 0.9, 1e-10);
        assert!((q[0][0] - 10.0).abs() < 1e-6);
        assert!((q[0][1] - 9.9).abs() < 1e-6);
        assert!((q[1][0] - 9.9).abs() < 1e-6);
        assert!((q[1][1] - 11.0).abs() < 1e-6);
    }
}
