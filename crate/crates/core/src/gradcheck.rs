//! Central finite-difference gradient verification.
//!
//! Used by the test suites to falsify every analytic backward rule: the
//! numeric derivative of a scalar loss is taken through the same forward
//! code the tape runs, and compared element-wise against the recorded
//! gradient. Run it on `f64` graphs; at h=1e-3 the difference quotient is
//! far above rounding noise there.

use crate::element::Element;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub h: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Retry failing probes with shrunken central differences and finally
    /// with second-order one-sided differences. When the +-h interval
    /// straddles a kink (ReLU flip, maxpool argmax switch) the plain central
    /// difference is not a derivative estimate; shrinking clears kinks
    /// farther out, and the one-sided stencils estimate the derivative from
    /// the kink-free side for the rest. A genuinely wrong backward rule
    /// fails every estimator.
    pub kink_fallback: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-3,
            rel_tol: 1e-3,
            abs_tol: 1e-6,
            kink_fallback: false,
        }
    }
}

#[derive(Debug)]
pub struct GradMismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

impl std::fmt::Display for GradMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "gradient mismatch at element {}: analytic {:.6e}, finite-difference {:.6e}, error {:.3e}",
            self.index, self.analytic, self.numeric, self.error
        )
    }
}

impl GradCheck {
    /// Compare the analytic gradient of `loss` w.r.t. `x0` against central
    /// differences, probing `indices` (or every element when empty).
    ///
    /// Passes when |a - n| <= abs_tol + rel_tol * max(|a|, |n|).
    pub fn verify<F, L>(
        &self,
        x0: &[F],
        analytic: &[F],
        indices: &[usize],
        mut loss: L,
    ) -> Result<(), GradMismatch>
    where
        F: Element,
        L: FnMut(&[F]) -> F,
    {
        let all: Vec<usize>;
        let probe: &[usize] = if indices.is_empty() {
            all = (0..x0.len()).collect();
            &all
        } else {
            indices
        };
        let mut x = x0.to_vec();
        for &i in probe {
            let a = analytic[i].to_f64();
            let mut outcome = self.judge(i, a, central(&mut x, i, self.h, &mut loss));
            if self.kink_fallback {
                for shrink in [8.0, 64.0] {
                    if outcome.is_ok() {
                        break;
                    }
                    outcome = self.judge(i, a, central(&mut x, i, self.h / shrink, &mut loss));
                }
                for side in [1.0, -1.0] {
                    if outcome.is_ok() {
                        break;
                    }
                    outcome =
                        self.judge(i, a, one_sided(&mut x, i, side * self.h / 64.0, &mut loss));
                }
            }
            outcome?;
        }
        Ok(())
    }

    fn judge(&self, index: usize, analytic: f64, numeric: f64) -> Result<(), GradMismatch> {
        let err = (analytic - numeric).abs();
        if err > self.abs_tol + self.rel_tol * analytic.abs().max(numeric.abs()) {
            return Err(GradMismatch {
                index,
                analytic,
                numeric,
                error: err,
            });
        }
        Ok(())
    }
}

fn central<F, L>(x: &mut [F], i: usize, h: f64, loss: &mut L) -> f64
where
    F: Element,
    L: FnMut(&[F]) -> F,
{
    let h = F::from_f64(h);
    let orig = x[i];
    x[i] = orig + h;
    let up = loss(x).to_f64();
    x[i] = orig - h;
    let down = loss(x).to_f64();
    x[i] = orig;
    // Use the realized step width: (orig+h)-(orig-h) absorbs the rounding
    // of the perturbed endpoints.
    let span = ((orig + h) - (orig - h)).to_f64();
    (up - down) / span
}

/// Second-order one-sided stencil: (-3f(x) + 4f(x+h) - f(x+2h)) / (2h).
/// Negative `h` probes the other side.
fn one_sided<F, L>(x: &mut [F], i: usize, h: f64, loss: &mut L) -> f64
where
    F: Element,
    L: FnMut(&[F]) -> F,
{
    let h = F::from_f64(h);
    let orig = x[i];
    let f0 = loss(x).to_f64();
    x[i] = orig + h;
    let f1 = loss(x).to_f64();
    x[i] = orig + h + h;
    let f2 = loss(x).to_f64();
    x[i] = orig;
    let span = ((orig + h) - orig).to_f64();
    (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * span)
}

/// Deterministic probe subset: `count` indices spread over `len` elements.
pub fn probe_indices(len: usize, count: usize, salt: u64) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count)
        .map(|i| {
            let mix = (salt ^ 0x9e37_79b9_7f4a_7c15)
                .wrapping_mul(6364136223846793005)
                .wrapping_add(i as u64 * 1442695040888963407);
            (mix % len as u64) as usize
        })
        .collect()
}
