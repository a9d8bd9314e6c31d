//! Central finite-difference gradient checking in f64.

use std::collections::HashMap;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic and numeric gradients for one leaf.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub leaf: usize,
    /// ‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂).
    pub rel_error: f64,
    pub checked: usize,
}

/// Builds the graph from fresh leaves, back-propagates, then perturbs every
/// element of each leaf by ±`h` and compares.
///
/// `build` receives one `Var` per leaf (in order) and must return a scalar.
/// Elements of leaf `i` are probed only where `probe(i, j)` returns true,
/// which lets large tensors be sampled.
pub fn check_gradients<F, P>(
    leaves: &[Tensor<f64>],
    h: f64,
    build: F,
    probe: P,
) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    P: Fn(usize, usize) -> bool,
{
    let eval = |ls: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars = ls
            .iter()
            .map(|t| g.input(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let vars = leaves
        .iter()
        .map(|t| g.input(t.clone().with_grad()))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;

    let mut out = Vec::with_capacity(leaves.len());
    for (i, leaf) in leaves.iter().enumerate() {
        let zeros = vec![0.0; leaf.numel()];
        let analytic = g.grad(vars[i]).unwrap_or(&zeros);
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nn = 0.0;
        let mut checked = 0;
        let mut work = leaves.to_vec();
        for j in 0..leaf.numel() {
            if !probe(i, j) {
                continue;
            }
            let orig = leaf.data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            diff += (analytic[j] - numeric).powi(2);
            na += analytic[j].powi(2);
            nn += numeric.powi(2);
            checked += 1;
        }
        let denom = na.sqrt().max(nn.sqrt());
        let rel_error = if denom == 0.0 {
            0.0
        } else {
            diff.sqrt() / denom
        };
        out.push(GradCheck {
            leaf: i,
            rel_error,
            checked,
        });
    }
    Ok(out)
}

/// Finite-difference check of selected parameter elements of a whole model.
///
/// `loss` builds the scalar objective on the given graph from the store.
/// Returns ‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂) over all
/// probed `(name, index)` pairs.
pub fn check_param_gradients<F>(
    store: &mut ParamStore<f64>,
    probes: &[(String, usize)],
    h: f64,
    loss: F,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &mut ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    g.backward(l)?;
    let vars: HashMap<&str, Var> = g.param_vars().collect();
    let mut analytic = Vec::with_capacity(probes.len());
    for (name, j) in probes {
        let a = vars
            .get(name.as_str())
            .and_then(|&v| g.grad(v))
            .map_or(0.0, |gr| gr[*j]);
        analytic.push(a);
    }

    let eval = |store: &mut ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let l = loss(&mut g, store)?;
        Ok(g.value(l).item())
    };
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for ((name, j), a) in probes.iter().zip(analytic) {
        let orig = store.tensor(name)?.data()[*j];
        store.tensor_mut(name)?.data_mut()[*j] = orig + h;
        let up = eval(store)?;
        store.tensor_mut(name)?.data_mut()[*j] = orig - h;
        let down = eval(store)?;
        store.tensor_mut(name)?.data_mut()[*j] = orig;
        let numeric = (up - down) / (2.0 * h);
        diff += (a - numeric).powi(2);
        na += a * a;
        nn += numeric * numeric;
    }
    let denom = na.sqrt().max(nn.sqrt());
    Ok(if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    })
}
