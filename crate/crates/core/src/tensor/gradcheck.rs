//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Which parameter coordinates to perturb.
#[derive(Clone, Copy, Debug)]
pub enum CoordSelection {
    All,
    /// A seeded uniform sample of this many coordinates across all parameters.
    Sample { count: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<T: Scalar, F>(store: &ParamStore<T>, f: &F) -> Result<(Graph<T>, Var)>
where
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = f(&mut g, store).map_err(|e| Error::Evaluation(e.to_string()))?;
    let v = g.value(root);
    if v.len() != 1 {
        return Err(Error::Evaluation(format!("loss has shape {:?}", v.shape())));
    }
    if !v.data()[0].is_finite() {
        return Err(Error::Evaluation("non-finite loss".into()));
    }
    Ok((g, root))
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h` on the parameters `ids`.
///
/// `plant_scale` multiplies the analytic gradient before comparison, which is
/// how a deliberately wrong gradient is planted.
pub fn grad_check<T: Scalar, F>(
    store: &mut ParamStore<T>,
    ids: &[ParamId],
    h: T,
    selection: CoordSelection,
    plant_scale: Option<T>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    if h <= T::zero() {
        return Err(Error::Evaluation("step h must be positive".into()));
    }
    let (graph, root) = eval(store, &f)?;
    let grads = graph.backward(root)?;
    let bound: std::collections::HashMap<ParamId, Var> = graph.bound_params().collect();

    let mut coords: Vec<(ParamId, usize)> = ids
        .iter()
        .flat_map(|&id| (0..store.tensor(id).len()).map(move |i| (id, i)))
        .collect();
    if let CoordSelection::Sample { count, seed } = selection {
        if count < coords.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = sample(&mut rng, coords.len(), count).into_vec();
            picked.sort_unstable();
            coords = picked.into_iter().map(|i| coords[i]).collect();
        }
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (id, i) in coords {
        let analytic = bound
            .get(&id)
            .and_then(|&v| grads.get(v))
            .map_or(T::zero(), |g| g.data()[i]);
        let analytic = analytic * plant_scale.unwrap_or_else(T::one);
        let orig = store.tensor(id).data()[i];
        // Divide by the step actually representable around `orig`.
        let (hi, lo) = (orig + h, orig - h);
        store.tensor_mut(id).data_mut()[i] = hi;
        let plus = eval(store, &f).map(|(g, r)| g.value(r).data()[0]);
        store.tensor_mut(id).data_mut()[i] = lo;
        let minus = eval(store, &f).map(|(g, r)| g.value(r).data()[0]);
        store.tensor_mut(id).data_mut()[i] = orig;
        let numeric = (plus? - minus?) / (hi - lo);
        let err = relative_error(analytic.to_f64_lossy(), numeric.to_f64_lossy());
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((store.name(id).to_string(), i));
        }
    }
    Ok(report)
}
