//! Central-difference verification of analytic gradients (64-bit only).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Model, ModelInput, Target};
use super::params::{ParamGroup, ParamStore};
use super::tape::{Tape, Var};
use super::NnError;

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub group: ParamGroup,
    pub frozen: bool,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Norm of the gradient the optimizer would see; zero for frozen tensors.
    pub applied_grad_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.tensors.extend(other.tensors);
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Checks every parameter tensor of `model` on one example. Up to
/// `per_tensor` coordinates per tensor are probed: half drawn from the
/// coordinates with a nonzero analytic gradient, the rest uniformly.
pub fn gradient_check(
    model: &mut Model<f64>,
    input: &ModelInput,
    target: &Target,
    epsilon: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport, NnError> {
    let mut store = std::mem::take(&mut model.store);
    let result = check_store(&mut store, epsilon, per_tensor, seed, |tape| {
        model.loss(tape, input, target)
    });
    model.store = store;
    result
}

/// Generic form over any scalar loss built on a tape of `store`.
pub fn check_store<F>(
    store: &mut ParamStore<f64>,
    epsilon: f64,
    per_tensor: usize,
    seed: u64,
    loss: F,
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var, NnError>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64, NnError> {
        let mut t = Tape::new(s);
        let l = loss(&mut t)?;
        Ok(t.value(l).data()[0])
    };
    let analytic = {
        let mut t = Tape::tracking_frozen(store);
        let l = loss(&mut t)?;
        t.backward(l)?
    };
    let applied = {
        let mut t = Tape::new(store);
        let l = loss(&mut t)?;
        t.backward(l)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    let mut tensors = Vec::with_capacity(ids.len());
    let mut worst = 0.0f64;
    for id in ids {
        let n = store.value(id).len();
        let zero = vec![0.0; n];
        let grad = analytic.get(id).map(|g| g.data().to_vec()).unwrap_or(zero);
        let mut nonzero: Vec<usize> = (0..n).filter(|&i| grad[i] != 0.0).collect();
        nonzero.shuffle(&mut rng);
        let mut coords: Vec<usize> = nonzero.into_iter().take(per_tensor.div_ceil(2)).collect();
        let mut rest: Vec<usize> = (0..n).filter(|i| !coords.contains(i)).collect();
        rest.shuffle(&mut rng);
        coords.extend(rest.into_iter().take(per_tensor.saturating_sub(coords.len())));
        coords.sort_unstable();

        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for &i in &coords {
            let x0 = store.value(id).data()[i];
            let mut at = |dx: f64| -> Result<f64, NnError> {
                store.value_mut(id).data_mut()[i] = x0 + dx;
                eval(store)
            };
            // five-point central stencil, truncation error O(epsilon^4)
            let (f2p, f1p, f1m, f2m) = (at(2.0 * epsilon), at(epsilon), at(-epsilon), at(-2.0 * epsilon));
            store.value_mut(id).data_mut()[i] = x0;
            let numeric = (-f2p? + 8.0 * f1p? - 8.0 * f1m? + f2m?) / (12.0 * epsilon);
            max_rel = max_rel.max(relative_error(grad[i], numeric));
            max_abs = max_abs.max((grad[i] - numeric).abs());
        }
        worst = worst.max(max_rel);
        let p = store.get(id);
        tensors.push(TensorCheck {
            name: p.name.clone(),
            group: p.group,
            frozen: p.frozen,
            coordinates: coords.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            applied_grad_norm: applied.get(id).map_or(0.0, |g| g.sum_squares().sqrt()),
        });
    }
    Ok(GradCheckReport {
        epsilon,
        tensors,
        max_rel_error: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamGroup;
    use crate::nn::tensor::Tensor;

    #[test]
    fn linear_head_is_exact() {
        let mut s = ParamStore::new();
        let h = s.insert(
            "h",
            ParamGroup::Backbone,
            Tensor::from_vec(&[1, 3], vec![0.3, -0.1, 0.7]).unwrap(),
        );
        let w = s.insert(
            "w",
            ParamGroup::ClassHead,
            Tensor::from_vec(&[2, 3], vec![0.2, 0.1, -0.4, 0.5, 0.3, 0.0]).unwrap(),
        );
        // Linear in each tensor separately, so only rounding remains.
        let report = check_store(&mut s, 1e-6, 8, 0, |t| {
            let (h, w) = (t.param(h), t.param(w));
            let y = t.matmul_nt(h, w)?;
            let y = t.scale(y, 0.5);
            let one = t.constant(Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap());
            let z = t.matmul_nt(y, one)?;
            Ok(z)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{}", report.max_rel_error);
    }
}
