//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, or 0 when both vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares the autodiff gradient of the scalar `f(inputs)` with central
/// differences at the given `(input, element)` probes. With `probes = None`
/// every element of every input is probed.
pub fn gradient_error<F>(
    f: &F,
    inputs: &[Tensor],
    probes: Option<&[(usize, usize)]>,
    h: f64,
) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let all: Vec<(usize, usize)>;
    let probes = match probes {
        Some(p) => p,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
                .collect();
            &all
        }
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(&t.clone().requiring_grad()))
        .collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<f64> = probes
        .iter()
        .map(|&(i, e)| g.grad(vars[i]).map_or(0.0, |gr| gr[e]))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(probes.len());
    for &(i, e) in probes {
        let orig = work[i].values()[e];
        work[i].values_mut()[e] = orig + h;
        let plus = eval(&work)?;
        work[i].values_mut()[e] = orig - h;
        let minus = eval(&work)?;
        work[i].values_mut()[e] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }
    Ok(relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn detects_exact_gradient_of_cube() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let err = gradient_error(
            &|g: &mut Graph, v: &[Var]| {
                let c = g.powf(v[0], 3.0);
                Ok(g.sum(c))
            },
            &[x],
            None,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }
}
