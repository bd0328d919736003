use super::{DiffError, Graph, NodeId, Tensor};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// Largest relative error seen in each parameter tensor.
    pub max_rel_error: Vec<f64>,
    /// `(parameter, element)` of the worst element overall.
    pub worst: Option<(usize, usize)>,
    /// Elements left out of each tensor because their stencil came too close
    /// to a relu kink.
    pub skipped: Vec<usize>,
    pub epsilon: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradReport {
    pub fn overall_max(&self) -> f64 {
        self.max_rel_error.iter().cloned().fold(0.0, f64::max)
    }

    pub fn total_skipped(&self) -> usize {
        self.skipped.iter().sum()
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares a supplied analytic gradient with central differences of `value_fn`.
///
/// `value_fn` must be deterministic: any noise it uses is fixed by the caller.
/// The relative error of each element discounts the finite-difference
/// resolution, [`ROUNDOFF_ULPS`] ulps of the loss divided by the stencil width.
pub fn compare_gradients<F>(
    value_fn: F,
    params: &[Tensor],
    analytic: &[Tensor],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradReport, DiffError>
where
    F: Fn(&[Tensor]) -> Result<f64, DiffError>,
{
    compare_inner(|ps| Ok((value_fn(ps)?, None)), None, params, analytic, epsilon, tolerance)
}

/// Loss evaluations are trusted to this many ulps; differences between the
/// analytic and numeric gradient below the matching resolution are not errors.
pub const ROUNDOFF_ULPS: f64 = 4.0;

type Probe = (f64, Option<Vec<f64>>);

/// A stencil is usable when every relu input keeps its sign and stays at
/// least this many step widths away from zero. Closer than that, the loss is
/// either non-smooth inside the stencil or curved too sharply (a floored
/// scale feeding a log) for central differences to resolve.
pub const KINK_MARGIN: f64 = 8.0;

fn stencil_is_smooth(base: &[f64], up: &[f64], down: &[f64]) -> bool {
    base.len() == up.len()
        && base.len() == down.len()
        && base.iter().zip(up).zip(down).all(|((&b, &u), &d)| {
            let step = (u - b).abs().max((d - b).abs());
            step == 0.0 || ((b > 0.0) == (u > 0.0) && (b > 0.0) == (d > 0.0) && b.abs() >= KINK_MARGIN * step)
        })
}

fn compare_inner<F>(
    probe_fn: F,
    base_pattern: Option<&[f64]>,
    params: &[Tensor],
    analytic: &[Tensor],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradReport, DiffError>
where
    F: Fn(&[Tensor]) -> Result<Probe, DiffError>,
{
    let mut probe: Vec<Tensor> = params.to_vec();
    let mut max_rel_error = Vec::with_capacity(params.len());
    let mut skipped = Vec::with_capacity(params.len());
    let mut worst = None;
    let mut worst_err = -1.0;
    for (p, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[p].shape() {
            return Err(DiffError::ShapeMismatch(format!(
                "gradient {:?} for parameter {:?}",
                grad.shape(),
                params[p].shape()
            )));
        }
        let mut max_err: f64 = 0.0;
        let mut n_skipped = 0;
        for i in 0..params[p].numel() {
            let x = params[p].data()[i];
            probe[p].data_mut()[i] = x + epsilon;
            let (up, up_pattern) = probe_fn(&probe)?;
            probe[p].data_mut()[i] = x - epsilon;
            let (down, down_pattern) = probe_fn(&probe)?;
            probe[p].data_mut()[i] = x;
            if let Some(base) = base_pattern {
                let smooth = match (&up_pattern, &down_pattern) {
                    (Some(u), Some(d)) => stencil_is_smooth(base, u, d),
                    _ => false,
                };
                if !smooth {
                    n_skipped += 1;
                    continue;
                }
            }
            let numeric = (up - down) / (2.0 * epsilon);
            // a few ulps of the loss values, seen through the stencil
            let resolution = ROUNDOFF_ULPS * f64::EPSILON * (up.abs() + down.abs()) / (2.0 * epsilon);
            let a = grad.data()[i];
            let err = ((a - numeric).abs() - resolution).max(0.0) / a.abs().max(numeric.abs()).max(1e-8);
            max_err = max_err.max(err);
            if err > worst_err {
                worst_err = err;
                worst = Some((p, i));
            }
        }
        max_rel_error.push(max_err);
        skipped.push(n_skipped);
    }
    let pass = max_rel_error.iter().all(|&e| e <= tolerance);
    Ok(GradReport {
        max_rel_error,
        worst,
        skipped,
        epsilon,
        tolerance,
        pass,
    })
}

/// Checks [`Graph::backward`] on `loss_fn` against finite differences.
///
/// `loss_fn` receives a fresh graph and one parameter node per entry of
/// `params`, and returns the scalar loss node. Central differences are only
/// meaningful where the loss is smooth, so an element whose `x +- epsilon`
/// stencil gets within [`KINK_MARGIN`] steps of any relu kink is skipped and
/// counted in [`GradReport::skipped`] instead of compared.
pub fn check_gradients<F>(
    loss_fn: F,
    params: &[Tensor],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradReport, DiffError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, DiffError>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = loss_fn(&mut g, &ids)?;
    let base_pattern = g.relu_inputs();
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| grads.get(id)).collect();
    let probe_fn = |ps: &[Tensor]| -> Result<Probe, DiffError> {
        let mut g = Graph::new();
        // tracked so the relu edges are recorded for the pattern
        let ids: Vec<NodeId> = ps.iter().map(|t| g.param(t.clone())).collect();
        let loss = loss_fn(&mut g, &ids)?;
        Ok((g.value(loss).item()?, Some(g.relu_inputs())))
    };
    compare_inner(probe_fn, Some(&base_pattern), params, &analytic, epsilon, tolerance)
}
