use super::{Graph, Result, Tensor, Var};

/// Gradients smaller than this are compared on an absolute scale; central
/// differences at step 1e-6 carry roughly 1e-10 of round-off noise.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// (input, element) where the worst error occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error < tol
    }
}

/// Compares the backward rules reachable from `f` with central finite
/// differences of step `step`, element by element over every input.
pub fn check_gradients<Fun>(inputs: &[Tensor<f64>], step: f64, f: Fun) -> Result<GradCheckReport>
where
    Fun: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let loss = f(&graph, &vars)?;
    let grads = graph.backward(loss)?;

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vs: Vec<Var> = probe.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&g, &vs)?;
        Ok(g.value(l).item())
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("every input requires grad");
        for e in 0..inputs[i].numel() {
            let x = inputs[i].data()[e];
            probe[i].data_mut()[e] = x + step;
            let up = eval(&probe)?;
            probe[i].data_mut()[e] = x - step;
            let down = eval(&probe)?;
            probe[i].data_mut()[e] = x;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[e];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.checked == 1 {
                report.max_relative_error = err;
                report.worst = (i, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
