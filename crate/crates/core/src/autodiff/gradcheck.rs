//! Finite-difference verification of analytic gradients.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which elements of each input are perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    All,
    /// At most `per_tensor` randomly chosen elements of every input.
    Sample {
        per_tensor: usize,
        seed: u64,
    },
}

/// Analytic vs. central-difference comparison for one element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradEntry {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradEntry>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }

    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Relative error with a unit floor on the denominator, so that gradients
/// near zero are judged by absolute error.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let v = g.value(y);
    if v.len() != 1 {
        return Err(Error::Contract(alloc::format!(
            "gradient_check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Checks the gradient of scalar `f` with respect to every tensor in `inputs`.
pub fn gradient_check_many<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    selection: Selection,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let y0 = evaluate(&f, inputs)?;
    let y1 = evaluate(&f, inputs)?;
    if y0.to_bits() != y1.to_bits() {
        return Err(Error::NonDeterministic((y0 - y1).abs()));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    g.backward(y)?;

    let mut rng = ChaCha8Rng::seed_from_u64(match selection {
        Selection::Sample { seed, .. } => seed,
        Selection::All => 0,
    });
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut entries = Vec::new();
    for (ii, &var) in vars.iter().enumerate() {
        let analytic = g.grad(var).unwrap_or_else(|| Tensor::zeros(inputs[ii].shape()));
        let n = inputs[ii].len();
        let indices: Vec<usize> = match selection {
            Selection::All => (0..n).collect(),
            Selection::Sample { per_tensor, .. } => {
                let mut v = sample(&mut rng, n, per_tensor.min(n)).into_vec();
                v.sort_unstable();
                v
            }
        };
        for idx in indices {
            let orig = work[ii].data()[idx];
            work[ii].data_mut()[idx] = orig + eps;
            let plus = evaluate(&f, &work)?;
            work[ii].data_mut()[idx] = orig - eps;
            let minus = evaluate(&f, &work)?;
            work[ii].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[idx];
            entries.push(GradEntry {
                input: ii,
                index: idx,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { entries, max_rel_error, tol })
}

/// Single-input form of [`gradient_check_many`] over every element.
pub fn gradient_check<F>(f: F, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    gradient_check_many(|g: &mut Graph<f64>, v: &[Var]| f(g, v[0]), core::slice::from_ref(x), eps, tol, Selection::All)
}
