use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per input tensor, in input order.
    pub per_tensor: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of `program` against central differences.
///
/// Up to `samples` coordinates per tensor are drawn at random (all of them if
/// the tensor is smaller). The relative error of a coordinate is
/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(
    program: F,
    point: &[(String, Tensor)],
    step: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::invalid("grad_check step must be positive"));
    }
    let mut graph = Graph::new();
    let vars: Vec<Var> = point.iter().map(|(_, t)| graph.param(t.clone())).collect();
    let loss = program(&mut graph, &vars)?;
    if !graph.value(loss).is_finite() {
        return Err(Error::NonFinite("grad_check loss at the base point".into()));
    }
    let grads = graph.backward(loss)?;

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let l = program(&mut g, &vars)?;
        Ok(g.value(l).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors: Vec<Tensor> = point.iter().map(|(_, t)| t.clone()).collect();
    let mut per_tensor = Vec::with_capacity(point.len());
    let mut coordinates = 0;
    for (ti, (name, base)) in point.iter().enumerate() {
        let analytic = grads.get_or_zeros(&graph, vars[ti]);
        if !analytic.is_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of {name}")));
        }
        let picks: Vec<usize> = if base.len() <= samples {
            (0..base.len()).collect()
        } else {
            let mut v = index::sample(&mut rng, base.len(), samples).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst = 0.0f64;
        for &j in &picks {
            let orig = base.data()[j];
            tensors[ti].data_mut()[j] = orig + step;
            let plus = eval(&tensors).map_err(|e| tag(e, name))?;
            tensors[ti].data_mut()[j] = orig - step;
            let minus = eval(&tensors).map_err(|e| tag(e, name))?;
            tensors[ti].data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("perturbed loss for {name}[{j}]")));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        coordinates += picks.len();
        per_tensor.push((name.clone(), worst));
    }
    let max_rel_error = per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport { per_tensor, max_rel_error, coordinates })
}

fn tag(e: Error, name: &str) -> Error {
    match e {
        Error::NonFinite(op) => Error::NonFinite(format!("{op} while perturbing {name}")),
        other => other,
    }
}
