//! Central-difference gradient checking.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Step used by the central differences.
pub const STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(input index, element index)` of the worst entry.
    pub worst: (usize, usize),
}

impl GradReport {
    fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            checked: 0,
            worst: (0, 0),
        }
    }

    fn update(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if rel > self.max_rel_error {
            self.max_rel_error = rel;
            self.worst = (input, elem);
        }
    }

    pub fn merge(&mut self, other: &GradReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
    }
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Usage(format!(
            "gradcheck needs a scalar, got {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// Compares tape gradients of `f` with respect to every entry of `inputs`
/// against central differences.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = values
            .iter()
            .map(|t| g.leaf(t.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;

    let mut report = GradReport::empty();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for (e, &grad) in analytic.iter().enumerate() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + STEP;
            let up = eval(&work)?;
            work[i].data_mut()[e] = orig - STEP;
            let down = eval(&work)?;
            work[i].data_mut()[e] = orig;
            report.update(i, e, grad, (up - down) / (2.0 * STEP));
        }
    }
    Ok(report)
}

/// Same as [`check_gradients`] but over every tensor of a parameter store,
/// with the loss built from parameters via [`Graph::param`].
pub fn check_param_gradients<F>(store: &ParamStore, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        scalar_of(&g, out)
    };
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let mut analytic: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
    for (id, gr) in grads.params() {
        analytic[id.index()].copy_from_slice(gr);
    }

    let mut report = GradReport::empty();
    let mut work = store.clone();
    for id in store.ids() {
        for (e, &grad) in analytic[id.index()].iter().enumerate() {
            let orig = work.get(id).data()[e];
            work.get_mut(id).data_mut()[e] = orig + STEP;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[e] = orig - STEP;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[e] = orig;
            report.update(id.index(), e, grad, (up - down) / (2.0 * STEP));
        }
    }
    Ok(report)
}
