use crate::numcore::{Graph, ParamId, ParamStore, Var};

/// Denominator floor for relative error, so entries where both gradients
/// vanish do not dominate the report.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares tape gradients of the scalar built by `build` against central
/// finite differences, perturbing every parameter entry by
/// `eps_scale * max(1, |theta|)`.
pub fn grad_check<F>(params: &mut ParamStore, build: F, eps_scale: f64) -> GradCheckReport
where
    F: Fn(&mut Graph) -> Var,
{
    grad_check_subset(params, build, eps_scale, None)
}

/// As [`grad_check`], restricted to the listed parameters when `only` is set.
pub fn grad_check_subset<F>(
    params: &mut ParamStore,
    build: F,
    eps_scale: f64,
    only: Option<&[ParamId]>,
) -> GradCheckReport
where
    F: Fn(&mut Graph) -> Var,
{
    let analytic = {
        let mut g = Graph::new(params);
        let out = build(&mut g);
        g.backward(out)
    };
    let eval = |store: &ParamStore| {
        let mut g = Graph::new(store);
        let out = build(&mut g);
        g.scalar(out)
    };

    let ids: Vec<ParamId> = match only {
        Some(list) => list.to_vec(),
        None => params.ids().collect(),
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for id in ids {
        for k in 0..params.get(id).len() {
            let theta = params.get(id).data()[k];
            let h = eps_scale * theta.abs().max(1.0);
            params.get_mut(id).data_mut()[k] = theta + h;
            let plus = eval(params);
            params.get_mut(id).data_mut()[k] = theta - h;
            let minus = eval(params);
            params.get_mut(id).data_mut()[k] = theta;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), k));
            }
        }
    }
    report
}
