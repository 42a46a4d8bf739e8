//! Central-finite-difference verification of analytic gradients.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-parameter comparison of analytic vs. numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "gradcheck {:<24} max_rel_err={:.3e}  {}",
                e.name,
                e.max_rel_error,
                if e.passed { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "gradcheck overall: {} (tol {:.1e}, h {:.1e})",
            if self.passed() { "ok" } else { "FAIL" },
            self.tolerance,
            self.step
        )
    }
}

/// Compare analytic gradients of a scalar-valued function against central
/// finite differences `(f(x+h) - f(x-h)) / 2h`, parameter by parameter.
///
/// `build` must be deterministic: it receives a fresh tape plus one leaf
/// per parameter (in order) and returns the scalar loss var.
pub fn gradient_check<F: Scalar>(
    params: &[(String, Tensor<F>)],
    h: f64,
    tolerance: f64,
    mut build: impl FnMut(&mut Tape<F>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    // analytic pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|(_, t)| tape.param(t.clone()))
        .collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<F>> = vars
        .iter()
        .zip(params)
        .map(|(&v, (_, t))| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let mut eval = |mutated: &[Tensor<F>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = mutated.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item().to_f64())
    };

    let mut entries = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor<F>> = params.iter().map(|(_, t)| t.clone()).collect();
    for (pi, (name, _)) in params.iter().enumerate() {
        let mut max_rel = 0.0f64;
        for ei in 0..work[pi].numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + F::from_f64(h);
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - F::from_f64(h);
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let exact = analytic[pi].data()[ei].to_f64();
            let denom = exact.abs().max(numeric.abs()).max(1e-6);
            let rel = (exact - numeric).abs() / denom;
            max_rel = max_rel.max(rel);
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            max_rel_error: max_rel,
            passed: max_rel <= tolerance,
        });
    }
    Ok(GradCheckReport {
        entries,
        tolerance,
        step: h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_exact() {
        // finite differences are exact for linear maps up to roundoff
        let c = Tensor::<f64>::new(vec![3], vec![2.0, -1.5, 0.25]).unwrap();
        let params = vec![("w".to_string(), Tensor::new(vec![3], vec![0.5, 1.0, -2.0]).unwrap())];
        let report = gradient_check(&params, 1e-5, 1e-10, |tape, vars| {
            let cv = tape.constant(c.clone());
            let prod = tape.mul(vars[0], cv)?;
            tape.sum(prod)
        })
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn conv_sigmoid_composite_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[1, 2, 5, 5], 0.0, 1.0, &mut rng);
        let params = vec![
            (
                "w".to_string(),
                Tensor::<f64>::randn(&[3, 2, 3, 3], 0.0, 0.5, &mut rng),
            ),
            ("b".to_string(), Tensor::<f64>::randn(&[3], 0.0, 0.5, &mut rng)),
        ];
        let report = gradient_check(&params, 1e-5, 1e-4, |tape, vars| {
            let xv = tape.constant(x.clone());
            let c = tape.conv2d(xv, vars[0], vars[1], 1, 1)?;
            let s = tape.sigmoid(c)?;
            tape.mean(s)
        })
        .unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.max_rel_error() <= 1e-4);
    }

    #[test]
    fn corrupted_backward_is_flagged() {
        // mutation test: a deliberately wrong "analytic" gradient (scaled
        // loss in forward only) must trip the checker
        let params = vec![(
            "w".to_string(),
            Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap(),
        )];
        let mut flip = false;
        let report = gradient_check(&params, 1e-5, 1e-4, move |tape, vars| {
            // first call (analytic pass) sees f(x) = sum(x); finite
            // difference passes see f(x) = sum(1.5 x): gradients disagree
            let scale = if flip { 1.5 } else { 1.0 };
            flip = true;
            let s = tape.affine(vars[0], scale, 0.0)?;
            tape.sum(s)
        })
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn all_primitives_pass_gradcheck() {
        // every differentiable primitive on randomized small shapes
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::<f64>::randn(&[2, 3], 0.0, 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[3], 0.3, 1.0, &mut rng).map(|v| v + 2.0); // keep away from 0 for div
        let params = vec![("a".to_string(), a), ("b".to_string(), b)];
        let cases: Vec<(
            &str,
            Box<dyn FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>>,
        )> = vec![
            (
                "add",
                Box::new(|t, v| {
                    let y = t.add(v[0], v[1])?;
                    t.sum(y)
                }),
            ),
            (
                "sub",
                Box::new(|t, v| {
                    let y = t.sub(v[0], v[1])?;
                    t.mean(y)
                }),
            ),
            (
                "mul",
                Box::new(|t, v| {
                    let y = t.mul(v[0], v[1])?;
                    t.sum(y)
                }),
            ),
            (
                "div",
                Box::new(|t, v| {
                    let y = t.div(v[0], v[1])?;
                    t.sum(y)
                }),
            ),
            (
                "sigmoid",
                Box::new(|t, v| {
                    let y = t.sigmoid(v[0])?;
                    t.sum(y)
                }),
            ),
            (
                "exp",
                Box::new(|t, v| {
                    let y = t.exp(v[0])?;
                    t.mean(y)
                }),
            ),
            (
                "silu",
                Box::new(|t, v| {
                    let y = t.silu(v[0])?;
                    t.sum(y)
                }),
            ),
            (
                "leaky_relu",
                Box::new(|t, v| {
                    let y = t.leaky_relu(v[0], 0.1)?;
                    t.sum(y)
                }),
            ),
            (
                "matmul",
                Box::new(|t, v| {
                    let b2 = t.reshape(v[1], &[3, 1])?;
                    let y = t.matmul(v[0], b2)?;
                    t.sum(y)
                }),
            ),
            (
                "transpose",
                Box::new(|t, v| {
                    let y = t.transpose2d(v[0])?;
                    let s = t.sigmoid(y)?;
                    t.sum(s)
                }),
            ),
            (
                "concat",
                Box::new(|t, v| {
                    let a2 = t.reshape(v[0], &[6])?;
                    let y = t.concat(a2, v[1], 0)?;
                    let s = t.silu(y)?;
                    t.sum(s)
                }),
            ),
            (
                "select",
                Box::new(|t, v| {
                    let y = t.select(v[0], vec![0, 3, 5])?;
                    let e = t.exp(y)?;
                    t.sum(e)
                }),
            ),
            (
                "scatter",
                Box::new(|t, v| {
                    let y = t.scatter_flat(v[1], vec![1, 4, 2], 6, 0.5)?;
                    let s = t.sigmoid(y)?;
                    t.sum(s)
                }),
            ),
            (
                "mse",
                Box::new(|t, v| {
                    let tgt = t.constant(Tensor::full(&[2, 3], 0.3));
                    t.mse_loss(v[0], tgt)
                }),
            ),
            (
                "bce",
                Box::new(|t, v| {
                    let tgt = t.constant(Tensor::full(&[2, 3], 1.0));
                    t.bce_loss(v[0], tgt)
                }),
            ),
            (
                "upsample_pool_conv",
                Box::new(|t, v| {
                    let img = t.reshape(v[0], &[1, 1, 2, 3])?;
                    let up = t.upsample2x(img)?;
                    let w = t.constant(Tensor::full(&[1, 1, 3, 3], 0.2));
                    let bias = t.constant(Tensor::zeros(&[1]));
                    let c = t.conv2d(up, w, bias, 1, 1)?;
                    let p = t.global_avg_pool(c)?;
                    t.sum(p)
                }),
            ),
        ];
        for (name, mut build) in cases {
            let report = gradient_check(&params, 1e-5, 1e-4, &mut build).unwrap();
            assert!(report.passed(), "{name}: {report}");
        }
    }
}
