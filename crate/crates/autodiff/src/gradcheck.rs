//! Finite-difference verification of analytic gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates sampled per parameter; every coordinate when the
    /// parameter is smaller than this.
    pub coords_per_param: usize,
    pub seed: u64,
    /// Use the fourth-order stencil over `x ± h, x ± 2h`. Allows a larger
    /// step, which keeps round-off low when gradients are tiny.
    pub five_point: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_param: 8,
            seed: 0,
            five_point: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checks: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    /// Largest relative error per parameter name, in first-seen order.
    pub fn per_param(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for c in &self.checks {
            match out.iter_mut().find(|(n, _)| *n == c.param) {
                Some((_, e)) => *e = e.max(c.rel_err),
                None => out.push((c.param.clone(), c.rel_err)),
            }
        }
        out
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_coords(len: usize, count: usize, state: &mut u64) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let mut picked = Vec::with_capacity(count);
    while picked.len() < count {
        let i = (splitmix(state) % len as u64) as usize;
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked.sort_unstable();
    picked
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(p + h) - f(p - h)) / 2h` on sampled coordinates of each parameter.
///
/// `f` receives a fresh graph and one leaf per entry of `params` (in order)
/// and must return a single-element loss.
pub fn grad_check<F>(
    params: &[(String, Tensor<f64>)],
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut eval = |values: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = values.iter().map(|v| g.leaf(v.clone(), grad)).collect();
        let loss = f(&mut g, &leaves)?;
        let value = g.value(loss).item();
        if !grad {
            return Ok((value, Vec::new()));
        }
        let mut grads = g.backward(loss)?;
        let out = leaves
            .iter()
            .map(|&l| grads.take(l).expect("leaf requires grad"))
            .collect();
        Ok((value, out))
    };

    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let (base, analytic) = eval(&values, true)?;
    if !base.is_finite() {
        return Err(TensorError::NonFinite {
            param: "<unperturbed>".into(),
        });
    }

    let mut state = opts.seed;
    let mut report = GradCheckReport::default();
    for (p, (name, _)) in params.iter().enumerate() {
        for idx in sample_coords(values[p].numel(), opts.coords_per_param, &mut state) {
            let orig = values[p].data()[idx];
            let mut at = |offset: f64| -> Result<f64> {
                values[p].data_mut()[idx] = orig + offset;
                let (v, _) = eval(&values, false)?;
                if !v.is_finite() {
                    return Err(TensorError::NonFinite { param: name.clone() });
                }
                Ok(v)
            };
            let h = opts.step;
            let numeric = if opts.five_point {
                (at(-2.0 * h)? - 8.0 * at(-h)? + 8.0 * at(h)? - at(2.0 * h)?) / (12.0 * h)
            } else {
                (at(h)? - at(-h)?) / (2.0 * h)
            };
            values[p].data_mut()[idx] = orig;
            let a = analytic[p].data()[idx];
            report.checks.push(CoordCheck {
                param: name.clone(),
                index: idx,
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric),
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let p = Tensor::from_f64(&[1], &[3.0]).unwrap();
        let report = grad_check(
            &[("p".into(), p)],
            |g, v| g.mul(v[0], v[0]).map(|sq| g.sum(sq)),
            &GradCheckOptions::default(),
        )
        .unwrap();
        let c = &report.checks[0];
        assert_eq!(c.analytic, 6.0);
        assert!((c.numeric - 6.0).abs() < 1e-9);
        assert!(report.max_rel_err() < 1e-8);
    }

    #[test]
    fn five_point_stencil_is_exact_on_a_cubic() {
        // Central differences of x^3 at x=2 with h=0.1: 12.01 for the
        // three-point rule, exactly 12 for the five-point one.
        let cube = |g: &mut Graph<f64>, v: &[Var]| {
            let sq = g.mul(v[0], v[0])?;
            let c = g.mul(sq, v[0])?;
            Ok(g.sum(c))
        };
        let p = vec![("p".to_string(), Tensor::from_f64(&[1], &[2.0]).unwrap())];
        let mut opts = GradCheckOptions {
            step: 0.1,
            ..GradCheckOptions::default()
        };
        let three = grad_check(&p, cube, &opts).unwrap();
        assert!((three.checks[0].numeric - 12.01).abs() < 1e-9);
        opts.five_point = true;
        let five = grad_check(&p, cube, &opts).unwrap();
        assert!((five.checks[0].numeric - 12.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_objective_names_the_parameter() {
        let p = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let err = grad_check(
            &[("bias".into(), p)],
            |g, v| {
                let l = g.log(v[0]);
                Ok(g.sum(l))
            },
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn sampling_covers_small_tensors_entirely() {
        let mut s = 1;
        assert_eq!(sample_coords(3, 8, &mut s), vec![0, 1, 2]);
        let picked = sample_coords(100, 5, &mut s);
        assert_eq!(picked.len(), 5);
        assert!(picked.windows(2).all(|w| w[0] < w[1]));
    }
}
