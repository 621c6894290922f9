//! Central-difference gradient checking for test code.
//!
//! Tensors are immutable, so the checker does not perturb leaves in place:
//! the caller supplies raw leaf values and a closure that rebuilds the loss
//! from freshly constructed leaf tensors. The closure must be deterministic
//! in its inputs; anything stochastic (masks, sampling) has to be fixed
//! before the check.

use crate::error::Result;
use crate::tensor::Tensor;

/// Worst observed disagreement between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// (leaf index, element index, analytic, numeric) for the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Relative error with a floor that keeps tiny gradients from exploding the
/// ratio: |a - n| / max(1, |a|, |n|).
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs())
}

/// Compares the analytic gradient of `build` against central differences with
/// step `h` at every element of every leaf.
pub fn check_gradients<F>(leaves: &[(Vec<f64>, Vec<usize>)], h: f64, build: F) -> Result<FdReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let params: Vec<Tensor> = leaves
        .iter()
        .map(|(data, shape)| Tensor::param(data.clone(), shape))
        .collect::<Result<_>>()?;
    let loss = build(&params)?;
    loss.backward()?;
    // A leaf absent from the tape has gradient zero; the numeric side then
    // has to agree that perturbing it leaves the loss unchanged.
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let eval_at = |leaf_idx: usize, elem: usize, delta: f64| -> Result<f64> {
        let shifted: Vec<Tensor> = leaves
            .iter()
            .enumerate()
            .map(|(li, (data, shape))| {
                let mut d = data.clone();
                if li == leaf_idx {
                    d[elem] += delta;
                }
                Tensor::param(d, shape)
            })
            .collect::<Result<_>>()?;
        Ok(build(&shifted)?.item()?)
    };

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
    };
    for (li, (data, _)) in leaves.iter().enumerate() {
        for elem in 0..data.len() {
            let plus = eval_at(li, elem, h)?;
            let minus = eval_at(li, elem, -h)?;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[li][elem];
            let e = rel_err(a, numeric);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((li, elem, a, numeric));
            }
        }
    }
    Ok(report)
}
