use std::collections::BTreeMap;

use super::{NumericsError, ParameterStore, Tape, Tensor, Var};

/// Denominator floor for the relative error, so entries whose true gradient
/// is ~0 are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    /// Flat index of the worst entry.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Evaluates `loss` on a fresh tape and returns its value.
pub fn evaluate<F, E>(loss: &F, params: &ParameterStore) -> Result<f64, E>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let out = loss(&mut tape, params)?;
    Ok(tape.value(out).item())
}

/// Analytic gradients of `loss` for every parameter in `params`.
pub fn analytic_gradients<F, E>(loss: &F, params: &ParameterStore) -> Result<BTreeMap<String, Tensor>, E>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let mut tape = Tape::new();
    let out = loss(&mut tape, params)?;
    let grads = tape.backward(out)?;
    let mut store = params.clone();
    grads.write_into(&mut store);
    Ok(store.grads().map(|(n, g)| (n.to_string(), g.clone())).collect())
}

/// Compares analytic gradients with central finite differences.
pub fn finite_difference_check<F, E>(
    loss: F,
    params: &ParameterStore,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let analytic = analytic_gradients(&loss, params)?;
    compare_with_finite_differences(&analytic, loss, params, step, tolerance)
}

/// Checks externally supplied gradients against central finite differences.
pub fn compare_with_finite_differences<F, E>(
    analytic: &BTreeMap<String, Tensor>,
    loss: F,
    params: &ParameterStore,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut report = Vec::with_capacity(names.len());
    let mut max_rel: f64 = 0.0;
    for name in names {
        let grad = analytic.get(&name).ok_or_else(|| NumericsError::UnknownParameter(name.clone()))?;
        let len = params.get(&name).map(Tensor::len).unwrap_or(0);
        let mut worst = ParamCheck { name: name.clone(), index: 0, analytic: 0.0, numeric: 0.0, rel_error: 0.0 };
        for i in 0..len {
            let original = params.get(&name).expect("listed").data()[i];
            set_entry(&mut work, &name, i, original + step);
            let plus = evaluate(&loss, &work)?;
            set_entry(&mut work, &name, i, original - step);
            let minus = evaluate(&loss, &work)?;
            set_entry(&mut work, &name, i, original);
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[i];
            let rel = relative_error(a, numeric);
            if rel >= worst.rel_error {
                worst = ParamCheck { name: name.clone(), index: i, analytic: a, numeric, rel_error: rel };
            }
        }
        max_rel = max_rel.max(worst.rel_error);
        report.push(worst);
    }
    Ok(GradCheckReport { params: report, max_rel_error: max_rel, tolerance, passed: max_rel < tolerance })
}

fn set_entry(store: &mut ParameterStore, name: &str, i: usize, value: f64) {
    if let Some(t) = store.get_mut(name) {
        t.data_mut()[i] = value;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::matrix(1, 3, vec![0.5, -1.25, 2.0]).unwrap()).unwrap();
        s.insert("dead", Tensor::matrix(1, 1, vec![-2.0]).unwrap()).unwrap();
        s
    }

    // Σ 3 w² + relu(dead)
    fn quadratic(t: &mut Tape, s: &ParameterStore) -> Result<Var, NumericsError> {
        let w = t.param(s, "w")?;
        let d = t.param(s, "dead")?;
        let sq = t.mul(w, w)?;
        let sq = t.scale(sq, 3.0)?;
        let ones = t.leaf(Tensor::filled(3, 1, 1.0))?;
        let total = t.matmul(sq, ones)?;
        let dead = t.relu(d)?;
        t.add(total, dead)
    }

    #[test]
    fn quadratic_passes_tightly() {
        let report = finite_difference_check(quadratic, &quadratic_store(), 1e-3, 1e-6).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel_error < 1e-6);
    }

    #[test]
    fn dead_relu_parameter_is_zero_both_ways() {
        let report = finite_difference_check(quadratic, &quadratic_store(), 1e-3, 1e-6).unwrap();
        let dead = report.params.iter().find(|p| p.name == "dead").unwrap();
        assert_eq!(dead.analytic, 0.0);
        assert_eq!(dead.numeric, 0.0);
        assert!(report.passed);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let store = quadratic_store();
        let mut analytic = analytic_gradients(&quadratic, &store).unwrap();
        for g in analytic.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= 1.1);
        }
        let report = compare_with_finite_differences(&analytic, quadratic, &store, 1e-3, 1e-3).unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_error > 0.05);
    }
}
