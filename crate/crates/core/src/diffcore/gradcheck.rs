use std::collections::BTreeMap;

use super::{DiffError, Graph, Tensor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Floor on the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

/// Outcome of comparing analytic gradients with finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Maximum relative error per parameter name.
    pub max_rel_error: BTreeMap<String, f64>,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst() <= self.rel_tol
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_error.values().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn scalar_output(graph: &Graph) -> Result<f64, DiffError> {
    let out = graph.output_value()?;
    if out.numel() != 1 {
        return Err(DiffError::NotScalar(out.shape().to_vec()));
    }
    Ok(out.item())
}

/// Checks every parameter gradient of a scalar-output graph against central
/// differences with step [`FD_STEP`].
pub fn grad_check(
    graph: &Graph,
    feeds: &[(&str, &Tensor)],
    rel_tol: f64,
) -> Result<GradCheckReport, DiffError> {
    let mut base = graph.clone();
    base.forward(feeds)?;
    scalar_output(&base)?;
    let grads = base.backward(&Tensor::scalar(1.0))?;

    let mut probe = graph.clone();
    let names: Vec<String> = graph.param_names().map(str::to_string).collect();
    let mut report = BTreeMap::new();
    for name in names {
        let original = graph.param_value(&name).expect("listed param").clone();
        let analytic = grads
            .params
            .get(&name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(original.shape()));
        let mut worst: f64 = 0.0;
        for idx in 0..original.numel() {
            let mut bumped = original.clone();
            bumped.data_mut()[idx] += FD_STEP;
            probe.set_param_value(&name, bumped)?;
            probe.forward(feeds)?;
            let plus = scalar_output(&probe)?;

            let mut bumped = original.clone();
            bumped.data_mut()[idx] -= FD_STEP;
            probe.set_param_value(&name, bumped)?;
            probe.forward(feeds)?;
            let minus = scalar_output(&probe)?;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[idx], numeric));
        }
        probe.set_param_value(&name, original)?;
        report.insert(name, worst);
    }
    Ok(GradCheckReport { max_rel_error: report, rel_tol })
}
