//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Largest step `h` of the five-point central difference.
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so that two tiny
    /// gradients agreeing in absolute terms are not reported as a mismatch.
    pub floor: f64,
    /// Check at most this many coordinates per tensor; `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// `(tensor name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates whose perturbation switched a piecewise branch.
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64, floor: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((name.to_string(), index));
        }
    }
}

fn coords(len: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_coords {
        Some(k) if k < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut picked = sample(&mut rng, len, k).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..len).collect(),
    }
}

struct Eval {
    value: f64,
    pattern: u64,
}

/// Fourth-order central difference from evaluations at `x + off`, or `None`
/// when some evaluation took a different piecewise branch than `pattern`.
fn stencil(at: &mut impl FnMut(f64) -> Result<Eval>, h: f64, pattern: u64) -> Result<Option<f64>> {
    let mut v = [0.0; 4];
    let mut same = true;
    for (slot, off) in v.iter_mut().zip([h, -h, 2.0 * h, -2.0 * h]) {
        let e = at(off)?;
        same &= e.pattern == pattern;
        *slot = e.value;
    }
    Ok(same.then(|| (8.0 * (v[0] - v[1]) - (v[2] - v[3])) / (12.0 * h)))
}

/// Stencil estimates at `h`, `h/10` and `h/100`; of the adjacent pair that
/// agrees best, the smaller-step estimate is returned.
fn numeric_derivative(mut at: impl FnMut(f64) -> Result<Eval>, h: f64, pattern: u64) -> Result<Option<f64>> {
    let mut est = Vec::with_capacity(3);
    for k in 0..3 {
        est.push(stencil(&mut at, h / 10f64.powi(k), pattern)?);
    }
    let valid: Vec<f64> = est.into_iter().flatten().collect();
    Ok(valid
        .windows(2)
        .min_by(|a, b| (a[0] - a[1]).abs().total_cmp(&(b[0] - b[1]).abs()))
        .map(|w| w[1])
        .or(valid.last().copied()))
}

/// Check the gradient of a scalar function of one tensor.
///
/// `f` receives a fresh tape and the leaf holding θ and returns the scalar output.
pub fn grad_check<F>(f: F, theta: &Tensor, opts: &GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<Eval> {
        let mut tape = Tape::new();
        let x = tape.leaf(t.clone(), true);
        let y = f(&mut tape, x)?;
        Ok(Eval {
            value: tape.scalar(y),
            pattern: tape.activation_pattern(),
        })
    };

    theta.ensure_finite("grad_check")?;
    let mut tape = Tape::new();
    let x = tape.leaf(theta.clone(), true);
    let y = f(&mut tape, x)?;
    let base = Eval {
        value: tape.scalar(y),
        pattern: tape.activation_pattern(),
    };
    let analytic = tape
        .backward(y)?
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(theta.shape()));
    let again = eval(theta)?;
    if again.value.to_bits() != base.value.to_bits() {
        return Err(Error::NonDeterministic(base.value, again.value));
    }

    let mut report = GradReport {
        tolerance: opts.tolerance,
        ..Default::default()
    };
    let mut probe = theta.clone();
    for i in coords(theta.len(), opts, 0) {
        let orig = probe.data()[i];
        let numeric = numeric_derivative(
            |off| {
                probe.data_mut()[i] = orig + off;
                eval(&probe)
            },
            opts.step,
            base.pattern,
        );
        probe.data_mut()[i] = orig;
        match numeric? {
            Some(n) => report.record("theta", i, analytic.data()[i], n, opts.floor),
            None => report.skipped += 1,
        }
    }
    Ok(report)
}

/// Check gradients of a scalar loss with respect to every parameter in `store`.
///
/// `f` must build the loss from the store's current values; the checker
/// perturbs values in place and restores them before returning.
pub fn grad_check_params<F>(store: &mut ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<Eval> {
        let mut tape = Tape::new();
        let y = f(&mut tape, store)?;
        Ok(Eval {
            value: tape.scalar(y),
            pattern: tape.activation_pattern(),
        })
    };

    let mut tape = Tape::new();
    let y = f(&mut tape, store)?;
    let base = Eval {
        value: tape.scalar(y),
        pattern: tape.activation_pattern(),
    };
    let mut analytic: Vec<Tensor> = store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    for (id, g) in tape.backward(y)?.param_grads() {
        let slot = store.ids().position(|i| i == id).expect("param id from this store");
        analytic[slot].add_assign(g);
    }
    drop(tape);
    let again = eval(store)?;
    if again.value.to_bits() != base.value.to_bits() {
        return Err(Error::NonDeterministic(base.value, again.value));
    }

    let mut report = GradReport {
        tolerance: opts.tolerance,
        ..Default::default()
    };
    let ids: Vec<_> = store.ids().collect();
    for (slot, id) in ids.into_iter().enumerate() {
        let name = store.param(id).name.clone();
        for i in coords(store.param(id).value.len(), opts, slot as u64 + 1) {
            let orig = store.param(id).value.data()[i];
            let numeric = numeric_derivative(
                |off| {
                    store.param_mut(id).value.data_mut()[i] = orig + off;
                    eval(store)
                },
                opts.step,
                base.pattern,
            );
            store.param_mut(id).value.data_mut()[i] = orig;
            match numeric? {
                Some(n) => report.record(&name, i, analytic[slot].data()[i], n, opts.floor),
                None => report.skipped += 1,
            }
        }
    }
    Ok(report)
}
