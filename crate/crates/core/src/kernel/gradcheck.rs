//! Central-difference gradient checking.

use super::graph::{Graph, Var};
use super::tensor::{ShapeError, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Absolute differences below this always pass.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.mismatches.is_empty()
    }
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every element of every input. `f` receives the inputs as trainable leaves
/// and must return a one-element loss.
pub fn check_gradients<E>(
    inputs: &[Tensor],
    config: &GradCheckConfig,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var, E>,
) -> Result<GradCheckReport, E>
where
    E: From<ShapeError>,
{
    let eval = |values: &[Tensor]| -> Result<(Graph, Vec<Var>, Var), E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = f(&mut g, &vars)?;
        Ok((g, vars, loss))
    };
    let (graph, vars, loss) = eval(inputs)?;
    let grads = graph.backward(loss)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (input, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[input].numel()];
        let analytic = grads.data(*var).map_or(zeros.clone(), <[f64]>::to_vec);
        for index in 0..inputs[input].numel() {
            let original = work[input].data()[index];
            work[input].data_mut()[index] = original + config.step;
            let (g, _, l) = eval(&work)?;
            let plus = g.value(l).item();
            work[input].data_mut()[index] = original - config.step;
            let (g, _, l) = eval(&work)?;
            let minus = g.value(l).item();
            work[input].data_mut()[index] = original;

            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic[index];
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let rel = if scale > 0.0 { diff / scale } else { 0.0 };
            report.checked += 1;
            if diff > config.abs_floor {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel > config.rel_tol {
                    report.mismatches.push(GradMismatch {
                        input,
                        index,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
    }
    Ok(report)
}
