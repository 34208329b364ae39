//! Learnable dynamic-range layer.
//!
//! A normalized intensity volume is split into `N` branches, one per
//! intensity window. The windows tile `[0, 1]` between ordered cut points
//! `0 = c_0 < c_1 < … < c_{N-1} < c_N = 1`. Each branch keeps the voxel
//! intensity weighted by a soft window mask
//!
//! ```text
//! w_k(x) = L_k(x) − U_k(x),  L_k = σ((x − c_{k-1}) / τ),  U_k = σ((x − c_k) / τ)
//! ```
//!
//! with the outer edges pinned (`L_1 ≡ 1`, `U_N ≡ 0`). Adjacent branches
//! share the same sigmoid at their common cut, so the masks telescope to
//! exactly one at every voxel and the branches sum back to the input.
//!
//! The cuts are never stored directly. They are derived from an
//! unconstrained vector `θ` through normalized softplus increments
//! (`d_i = softplus(θ_i) + 1e-4`, `c_k = Σ_{i≤k} d_i / Σ_i d_i`), so any
//! optimizer step keeps them strictly ordered inside `(0, 1)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Scalar};

pub const DEFAULT_TAU: f64 = 0.05;
const MIN_INCREMENT: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CutMode {
    Learnable,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CutInit {
    /// Equal-width windows.
    Constant,
    /// `θ ~ U(-1, 1)` from the run seed.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CutVector<T> {
    pub theta: Vec<T>,
    pub tau: T,
    pub mode: CutMode,
    pub init: CutInit,
}

impl<T: Scalar> CutVector<T> {
    pub fn new(n_branches: usize, init: CutInit, mode: CutMode, seed: u64) -> Result<Self> {
        if n_branches == 0 {
            return Err(Error::Config("n_branches must be >= 1".into()));
        }
        let theta = match init {
            CutInit::Constant => vec![T::zero(); n_branches],
            CutInit::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n_branches).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect()
            }
        };
        Ok(Self {
            theta,
            tau: T::lit(DEFAULT_TAU),
            mode,
            init,
        })
    }

    pub fn from_theta(theta: Vec<T>, tau: T) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::Config("theta must not be empty".into()));
        }
        if !(tau > T::zero()) {
            return Err(Error::Config("tau must be > 0".into()));
        }
        Ok(Self {
            theta,
            tau,
            mode: CutMode::Learnable,
            init: CutInit::Constant,
        })
    }

    pub fn n_branches(&self) -> usize {
        self.theta.len()
    }

    pub fn cuts(&self) -> Vec<T> {
        cuts_from_theta(&self.theta)
    }
}

/// Interior cut points `c_1 … c_{N-1}` for raw parameters `theta`.
pub fn cuts_from_theta<T: Scalar>(theta: &[T]) -> Vec<T> {
    let d: Vec<T> = theta.iter().map(|&t| softplus(t) + T::lit(MIN_INCREMENT)).collect();
    let total: T = d.iter().copied().sum();
    let mut acc = T::zero();
    d.iter()
        .take(theta.len().saturating_sub(1))
        .map(|&di| {
            acc += di;
            acc / total
        })
        .collect()
}

/// Vector-Jacobian product of [`cuts_from_theta`]: maps `∂L/∂c_k` to `∂L/∂θ_i`.
pub fn cuts_vjp<T: Scalar>(theta: &[T], grad_cuts: &[T]) -> Vec<T> {
    let d: Vec<T> = theta.iter().map(|&t| softplus(t) + T::lit(MIN_INCREMENT)).collect();
    let total: T = d.iter().copied().sum();
    let cuts = cuts_from_theta(theta);
    // ∂c_k/∂d_i = ([i <= k] - c_k) / S
    let weighted: T = grad_cuts.iter().zip(&cuts).map(|(&g, &c)| g * c).sum();
    let mut suffix = T::zero();
    let mut out = vec![T::zero(); theta.len()];
    for i in (0..theta.len()).rev() {
        if i < grad_cuts.len() {
            suffix += grad_cuts[i];
        }
        out[i] = (suffix - weighted) / total * sigmoid(theta[i]);
    }
    out
}

/// Soft window weight of intensity `x` for the window `[c_lo, c_hi]`.
/// A pinned edge replaces its sigmoid by the constant it tends to.
pub fn window_mask<T: Scalar>(x: T, c_lo: T, c_hi: T, tau: T, edge_lo: bool, edge_hi: bool) -> T {
    let lower = if edge_lo { T::one() } else { sigmoid((x - c_lo) / tau) };
    let upper = if edge_hi { T::zero() } else { sigmoid((x - c_hi) / tau) };
    lower - upper
}

/// Forward results of the window layer, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BranchSet<T> {
    pub cuts: Vec<T>,
    pub tau: T,
    pub include_original: bool,
    /// One mask per windowed branch (not for the original pass-through).
    pub masks: Vec<Vec<T>>,
    /// Windowed branches, then the original input if requested.
    pub branches: Vec<Vec<T>>,
}

impl<T: Scalar> BranchSet<T> {
    pub fn n_windows(&self) -> usize {
        self.masks.len()
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }
}

/// Boundary cut values for branch `k` (`None` for the pinned outer edges).
fn bounds<T: Scalar>(cuts: &[T], k: usize) -> (Option<T>, Option<T>) {
    let lo = (k > 0).then(|| cuts[k - 1]);
    let hi = (k < cuts.len()).then(|| cuts[k]);
    (lo, hi)
}

pub fn branch_forward<T: Scalar>(v: &[T], cv: &CutVector<T>, include_original: bool) -> BranchSet<T> {
    let cuts = cv.cuts();
    let n = cv.n_branches();
    let tau = cv.tau;
    let mut masks = Vec::with_capacity(n);
    let mut branches = Vec::with_capacity(n + include_original as usize);
    for k in 0..n {
        let (lo, hi) = bounds(&cuts, k);
        let mask: Vec<T> = v
            .iter()
            .map(|&x| {
                window_mask(
                    x,
                    lo.unwrap_or(T::zero()),
                    hi.unwrap_or(T::one()),
                    tau,
                    lo.is_none(),
                    hi.is_none(),
                )
            })
            .collect();
        branches.push(v.iter().zip(&mask).map(|(&x, &m)| x * m).collect());
        masks.push(mask);
    }
    if include_original {
        branches.push(v.to_vec());
    }
    BranchSet {
        cuts,
        tau,
        include_original,
        masks,
        branches,
    }
}

/// Gradients of the window layer. `upstream[k]` is `∂L/∂branch_k`, one per
/// entry of `set.branches`. Returns `(∂L/∂v, ∂L/∂θ)`.
pub fn branch_backward<T: Scalar>(v: &[T], theta: &[T], set: &BranchSet<T>, upstream: &[&[T]]) -> (Vec<T>, Vec<T>) {
    assert_eq!(upstream.len(), set.branches.len(), "one upstream gradient per branch");
    let tau = set.tau;
    let inv_tau = T::one() / tau;
    let n = set.n_windows();
    let mut gv = vec![T::zero(); v.len()];
    let mut gcuts = vec![T::zero(); n.saturating_sub(1)];

    for k in 0..n {
        let g = upstream[k];
        let mask = &set.masks[k];
        let (lo, hi) = bounds(&set.cuts, k);
        for i in 0..v.len() {
            let x = v[i];
            // σ'(u)/τ terms of the lower and upper sigmoid
            let dl = lo.map(|c| {
                let s = sigmoid((x - c) * inv_tau);
                s * (T::one() - s) * inv_tau
            });
            let du = hi.map(|c| {
                let s = sigmoid((x - c) * inv_tau);
                s * (T::one() - s) * inv_tau
            });
            let dmask_dx = dl.unwrap_or(T::zero()) - du.unwrap_or(T::zero());
            gv[i] += g[i] * (mask[i] + x * dmask_dx);
            // ∂w/∂c_lo = −σ'/τ, ∂w/∂c_hi = +σ'/τ
            if let Some(d) = dl {
                gcuts[k - 1] -= g[i] * x * d;
            }
            if let Some(d) = du {
                gcuts[k] += g[i] * x * d;
            }
        }
    }
    if set.include_original {
        for (a, &g) in gv.iter_mut().zip(upstream[n]) {
            *a += g;
        }
    }
    (gv, cuts_vjp(theta, &gcuts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_init_gives_equal_windows() {
        let cv = CutVector::<f64>::new(3, CutInit::Constant, CutMode::Learnable, 0).unwrap();
        let c = cv.cuts();
        assert!((c[0] - 1.0 / 3.0).abs() < 1e-12 && (c[1] - 2.0 / 3.0).abs() < 1e-12);
        let c = CutVector::<f64>::new(2, CutInit::Constant, CutMode::Fixed, 0).unwrap().cuts();
        assert!((c[0] - 0.5).abs() < 1e-12);
        assert!(CutVector::<f64>::new(1, CutInit::Constant, CutMode::Fixed, 0).unwrap().cuts().is_empty());
        assert!(CutVector::<f64>::new(0, CutInit::Constant, CutMode::Fixed, 0).is_err());
    }

    #[test]
    fn softplus_increment_arithmetic() {
        let theta = [0.0f64, (std::f64::consts::E - 1.0).ln()];
        let c = cuts_from_theta(&theta);
        let d0 = 2f64.ln() + 1e-4;
        let d1 = 1.0 + 1e-4;
        assert!((c[0] - d0 / (d0 + d1)).abs() < 1e-12);
        assert!((c[0] - 0.4094).abs() < 1e-4);
    }

    #[test]
    fn random_init_is_seeded() {
        let a = CutVector::<f64>::new(5, CutInit::Random, CutMode::Learnable, 42).unwrap();
        let b = CutVector::<f64>::new(5, CutInit::Random, CutMode::Learnable, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.theta.iter().all(|t| (-1.0..1.0).contains(t)));
        let c = a.cuts();
        assert!(c.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn mask_closed_forms() {
        let tau = 0.05;
        // midway between cuts 0.5 apart (10 tau): 1 - 2 sigmoid(-5)
        let w = window_mask(0.5f64, 0.25, 0.75, tau, false, false);
        let expected = 1.0 - 2.0 / (1.0 + 5f64.exp());
        assert!((w - expected).abs() < 1e-12 && w >= 0.986);
        assert_eq!(window_mask(0.37f64, 0.0, 1.0, tau, true, true), 1.0);
        let l = window_mask(0.3f64, 0.3, 10.0, tau, false, true);
        assert!((l - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_branch_is_identity() {
        let v: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        let cv = CutVector::new(1, CutInit::Constant, CutMode::Fixed, 0).unwrap();
        let set = branch_forward(&v, &cv, false);
        assert_eq!(set.branches, vec![v]);
    }

    #[test]
    fn zero_input_masks() {
        let cv = CutVector::<f64>::new(3, CutInit::Constant, CutMode::Learnable, 0).unwrap();
        let set = branch_forward(&[0.0], &cv, true);
        let c1 = 1.0 / 3.0;
        let expected = 1.0 - 1.0 / (1.0 + (c1 / 0.05f64).exp());
        assert!((set.masks[0][0] - expected).abs() < 1e-12);
        assert!(set.masks[1][0] < 1e-2 && set.masks[2][0] < 1e-5);
        assert_eq!(set.len(), 4);
        assert!(set.branches.iter().all(|b| b[0] == 0.0));
    }

    #[test]
    fn flat_sigmoid_limit_has_vanishing_cut_gradient() {
        let mut cv = CutVector::<f64>::new(3, CutInit::Constant, CutMode::Learnable, 0).unwrap();
        cv.tau = 1e6;
        let v: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let set = branch_forward(&v, &cv, false);
        let ups: Vec<Vec<f64>> = set.branches.iter().map(|b| b.iter().map(|x| 2.0 * x).collect()).collect();
        let refs: Vec<&[f64]> = ups.iter().map(|u| u.as_slice()).collect();
        let (_, gt) = branch_backward(&v, &cv.theta, &set, &refs);
        assert!(gt.iter().all(|g| g.abs() < 1e-6), "{gt:?}");
    }

    #[test]
    fn original_branch_passes_gradient_through() {
        let cv = CutVector::<f64>::new(2, CutInit::Constant, CutMode::Learnable, 0).unwrap();
        let v = vec![0.2, 0.9];
        let set = branch_forward(&v, &cv, true);
        let zero = vec![0.0; 2];
        let ones = vec![1.0; 2];
        let (gv, gt) = branch_backward(&v, &cv.theta, &set, &[&zero, &zero, &ones]);
        assert_eq!(gv, ones);
        assert!(gt.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cuts_vjp_matches_finite_differences() {
        let theta = [0.3f64, -0.7, 1.2, 0.1];
        let g = [0.5, -1.5, 2.0];
        let analytic = cuts_vjp(&theta, &g);
        let h = 1e-6;
        for i in 0..theta.len() {
            let mut p = theta;
            p[i] += h;
            let mut m = theta;
            m[i] -= h;
            let f = |t: &[f64]| cuts_from_theta(t).iter().zip(&g).map(|(c, g)| c * g).sum::<f64>();
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-8, "{i}: {fd} vs {}", analytic[i]);
        }
    }
}
