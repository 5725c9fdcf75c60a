//! Central-difference verification of reverse-mode gradients.

use std::fmt;

use super::tape::{NodeId, ParamId, ParamStore, Tape};
use super::{DiffError, Tensor};

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Finite-difference stencil.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(θ+h) - f(θ-h)) / 2h`.
    #[default]
    Central,
    /// `(f(θ-2h) - 8f(θ-h) + 8f(θ+h) - f(θ+2h)) / 12h`, fourth-order
    /// truncation error for entries whose gradient is tiny next to the
    /// higher derivatives.
    CentralFourthOrder,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub stencil: Stencil,
    pub tolerance: f64,
    /// Number of worst entries kept in the report.
    pub keep_worst: usize,
    /// Restrict the check to these parameters (all when `None`).
    pub params: Option<Vec<ParamId>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            stencil: Stencil::Central,
            tolerance: 1e-4,
            keep_worst: 5,
            params: None,
        }
    }
}

impl GradCheckOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntryCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// A relu changed linear region within the difference stencil.
    pub nondifferentiable: bool,
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    pub worst: Vec<EntryCheck>,
    pub nondifferentiable: Vec<EntryCheck>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn entries_checked(&self) -> usize {
        self.params.iter().map(|p| p.entries).sum()
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} entries, max rel err {:.3e} (tol {:.1e}) -> {}",
            self.entries_checked(),
            self.max_rel_error(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        for e in &self.worst {
            writeln!(
                f,
                "  {}[{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                e.param, e.index, e.analytic, e.numeric, e.rel_error
            )?;
        }
        for e in &self.nondifferentiable {
            writeln!(f, "  {}[{}]: nondifferentiable point", e.param, e.index)?;
        }
        Ok(())
    }
}

fn scalar_output(tape: &Tape, out: NodeId) -> Result<f64, DiffError> {
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(DiffError::NotScalar(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences (see [`Stencil`]), entry by entry.
///
/// Entries whose stencil crosses a relu kink are reported separately and do
/// not count toward pass/fail. Parameter values are restored afterwards and
/// gradients are left holding the analytic result.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    build: F,
    opts: &GradCheckOptions,
) -> Result<GradReport, DiffError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId, DiffError>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let out = build(&mut tape, store)?;
    scalar_output(&tape, out)?;
    tape.backward(out, &Tensor::scalar(1.0), store)?;
    let base_sig = tape.kink_signature();

    let eval = |store: &ParamStore| -> Result<(f64, Vec<i8>), DiffError> {
        let mut t = Tape::new();
        let o = build(&mut t, store)?;
        Ok((scalar_output(&t, o)?, t.kink_signature()))
    };

    let ids: Vec<ParamId> = match &opts.params {
        Some(ids) => ids.clone(),
        None => store.ids().collect(),
    };
    let h = opts.step;
    let mut params = Vec::new();
    let mut all = Vec::new();
    let mut nondiff = Vec::new();
    for id in ids {
        let name = store.get(id).name.clone();
        let n = store.value(id).len();
        let mut max_rel: f64 = 0.0;
        let mut skipped = 0;
        for i in 0..n {
            let orig = store.value(id).data()[i];
            // Symmetric pairs are differenced before weighting, so an entry
            // that leaves f unchanged gives exactly zero.
            let pairs: &[(f64, f64)] = match opts.stencil {
                Stencil::Central => &[(1.0, 0.5)],
                Stencil::CentralFourthOrder => &[(1.0, 8.0 / 12.0), (2.0, -1.0 / 12.0)],
            };
            let mut numeric = 0.0;
            let mut kinked = false;
            for &(k, c) in pairs {
                let mut at = |offset: f64| {
                    store.get_mut(id).value.data_mut()[i] = orig + offset;
                    let r = eval(store);
                    store.get_mut(id).value.data_mut()[i] = orig;
                    r
                };
                let (up, sig_up) = at(k * h)?;
                let (down, sig_down) = at(-k * h)?;
                numeric += c * (up - down);
                kinked |= sig_up != base_sig || sig_down != base_sig;
            }
            let numeric = numeric / h;
            let analytic = store.grad(id).data()[i];
            let rel = relative_error(analytic, numeric);
            let entry = EntryCheck {
                param: name.clone(),
                index: i,
                analytic,
                numeric,
                rel_error: rel,
                nondifferentiable: kinked,
            };
            if kinked {
                skipped += 1;
                nondiff.push(entry);
            } else {
                max_rel = max_rel.max(rel);
                all.push(entry);
            }
        }
        params.push(ParamCheck {
            name,
            entries: n - skipped,
            max_rel_error: max_rel,
            skipped,
        });
    }
    all.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    all.truncate(opts.keep_worst);
    Ok(GradReport {
        tolerance: opts.tolerance,
        params,
        worst: all,
        nondifferentiable: nondiff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_layer_passes() {
        let mut store = ParamStore::new();
        let w = store.register(
            "w",
            Tensor::from_rows(&[vec![0.3, -0.5], vec![0.8, 0.1], vec![-0.4, 0.2]]),
        );
        let b = store.register("b", Tensor::from_rows(&[vec![0.05, -0.1]]));
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.3, 0.3, -1.0]]);
        let report = check_gradients(
            &mut store,
            |tape, s| {
                let xn = tape.constant(x.clone());
                let (wn, bn) = (tape.param(s, w), tape.param(s, b));
                let h = tape.affine(xn, wn, bn)?;
                let y = tape.sigmoid(h)?;
                tape.sum(y)
            },
            &GradCheckOptions::with_tolerance(1e-4),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.entries_checked(), 8);
    }

    #[test]
    fn relu_kink_is_flagged_not_failed() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::from_rows(&[vec![0.0, 1.5, -2.0]]));
        let report = check_gradients(
            &mut store,
            |tape, s| {
                let xn = tape.param(s, x);
                let r = tape.relu(xn)?;
                tape.sum(r)
            },
            &GradCheckOptions::with_tolerance(1e-4),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.nondifferentiable.len(), 1);
        assert_eq!(report.nondifferentiable[0].index, 0);
        assert!(report.to_string().contains("nondifferentiable point"));
    }

    #[test]
    fn wrong_gradient_fails() {
        // x * const(x): the tape only sees half of d(x^2)/dx.
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::from_rows(&[vec![0.7, -0.3]]));
        let report = check_gradients(
            &mut store,
            |tape, s| {
                let xn = tape.param(s, x);
                let frozen = tape.constant(s.value(x).clone());
                let p = tape.mul(xn, frozen)?;
                tape.sum(p)
            },
            &GradCheckOptions::with_tolerance(1e-4),
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_error() > 0.3);
    }

    #[test]
    fn restores_parameter_values() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::from_rows(&[vec![0.1, 0.2]]));
        let before = store.value(x).clone();
        check_gradients(
            &mut store,
            |tape, s| {
                let xn = tape.param(s, x);
                let e = tape.exp(xn)?;
                tape.sum(e)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(*store.value(x), before);
    }

    #[test]
    fn unused_entries_difference_to_exact_zero() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::from_rows(&[vec![0.37, 1.9, -2.3]]));
        let opts = GradCheckOptions {
            step: 1e-3,
            stencil: Stencil::CentralFourthOrder,
            ..GradCheckOptions::with_tolerance(1e-6)
        };
        let report = check_gradients(
            &mut store,
            |tape, s| {
                let xn = tape.param(s, x);
                let first = tape.slice_cols(xn, 0, 1)?;
                let e = tape.exp(first)?;
                let e = tape.scale(e, 1e3)?;
                tape.sum(e)
            },
            &opts,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
        let unused: Vec<f64> = report.worst.iter().filter(|e| e.index > 0).map(|e| e.numeric).collect();
        assert_eq!(unused, vec![0.0, 0.0]);
    }
}
