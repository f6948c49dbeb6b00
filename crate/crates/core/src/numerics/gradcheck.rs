//! Central finite-difference verification of reverse-mode gradients.

use std::collections::BTreeMap;

use super::{NumericsError, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-8;

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub group: String,
    pub max_rel_error: f64,
    /// Flat index of the worst element, with its analytic and numeric values.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub params: Vec<ParamCheck>,
    /// First non-finite value met, e.g. `"numeric bottom.l0.wq[3]"`.
    pub non_finite: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.non_finite.is_none()
            && self
                .params
                .iter()
                .all(|p| p.max_rel_error <= self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn per_group(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            let e = out.entry(p.group.clone()).or_insert(0.0_f64);
            *e = e.max(p.max_rel_error);
        }
        out
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| p.max_rel_error > self.tolerance)
            .collect()
    }
}

/// Compares `analytic` gradients (one tensor per parameter, in store order)
/// against fourth-order central differences of `value` with the given step.
pub fn compare_with_finite_differences<E>(
    store: &mut ParamStore,
    analytic: &[Tensor],
    mut value: impl FnMut(&ParamStore) -> Result<f64, E>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, E> {
    let mut report = GradCheckReport {
        tolerance,
        step,
        params: Vec::with_capacity(store.len()),
        non_finite: None,
    };
    let ids: Vec<_> = store.ids().collect();
    for (id, grad) in ids.into_iter().zip(analytic) {
        let (name, group) = {
            let p = store.get(id);
            (p.name.clone(), p.group.clone())
        };
        let mut check = ParamCheck {
            name: name.clone(),
            group,
            max_rel_error: 0.0,
            worst: None,
        };
        for i in 0..grad.len() {
            let orig = store.value(id).data()[i];
            let mut at = |x: f64| {
                store.value_mut(id).data_mut()[i] = x;
                value(store)
            };
            let (p1, m1) = (at(orig + step)?, at(orig - step)?);
            let (p2, m2) = (at(orig + 2.0 * step)?, at(orig - 2.0 * step)?);
            store.value_mut(id).data_mut()[i] = orig;
            // Fourth-order central stencil.
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            let a = grad.data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                if report.non_finite.is_none() {
                    let which = if a.is_finite() { "numeric" } else { "analytic" };
                    report.non_finite = Some(format!("{which} {name}[{i}]"));
                }
                continue;
            }
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || check.worst.is_none() {
                check.max_rel_error = check.max_rel_error.max(err);
                check.worst = Some((i, a, numeric));
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

/// Checks the tape gradients of the scalar built by `f` against central
/// finite differences for every parameter in the store.
///
/// `f` must be deterministic for fixed parameter values.
pub fn finite_difference_check<E, F>(
    store: &mut ParamStore,
    mut f: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, E>
where
    E: From<NumericsError>,
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var, E>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Tensor> = store.params().iter().map(|p| p.grad.clone()).collect();
    store.zero_grad();
    compare_with_finite_differences(
        store,
        &analytic,
        |s| {
            let mut t = Tape::new();
            let l = f(s, &mut t)?;
            Ok(t.value(l).item())
        },
        step,
        tolerance,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(vals: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new(0);
        s.add("p", "x", Tensor::row_vector(vals)).unwrap();
        s
    }

    #[test]
    fn squared_norm_passes_tightly() {
        let mut s = store_with(vec![0.3, -1.2, 2.5, 0.01]);
        let id = s.lookup("p.x").unwrap();
        let report = finite_difference_check::<NumericsError, _>(
            &mut s,
            |st, t| {
                let p = t.param(st, id);
                let sq = t.mul(p, p)?;
                Ok(t.sum(sq))
            },
            DEFAULT_STEP,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn wrong_adjoint_is_caught() {
        let mut s = store_with(vec![0.3, -1.2, 2.5]);
        // d/dx Σx² is 2x; claim x instead.
        let wrong = vec![Tensor::row_vector(vec![0.3, -1.2, 2.5])];
        let report = compare_with_finite_differences::<NumericsError>(
            &mut s,
            &wrong,
            |st| Ok(st.params()[0].value.sum_squares()),
            DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_error() > 0.4);
    }

    #[test]
    fn non_finite_values_fail_with_location() {
        let mut s = store_with(vec![0.0]);
        let report = compare_with_finite_differences::<NumericsError>(
            &mut s,
            &[Tensor::row_vector(vec![f64::NAN])],
            |st| Ok(st.params()[0].value.data()[0]),
            DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.non_finite.as_deref(), Some("analytic p.x[0]"));
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
