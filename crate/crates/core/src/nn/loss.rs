use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_FLOOR, 1]` before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

const ROW_SUM_TOL: f64 = 1e-6;

fn check_distributions(t: &Tensor, what: &str) -> Result<()> {
    let (rows, _) = t.dims2()?;
    for i in 0..rows {
        let row = t.row(i);
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&v| v < 0.0) {
            return Err(Error::Contract(format!(
                "{what} row {i} is not a probability vector (sum {total})"
            )));
        }
    }
    Ok(())
}

fn clamped_log(p: Var<'_>) -> Result<Var<'_>> {
    p.clamp(PROB_FLOOR, 1.0)?.log()
}

/// Batch-mean `KL(p‖q) = Σᵢ pᵢ log(pᵢ/qᵢ)` over the rows of `[B×K]` inputs.
///
/// Detach `p` to use it as a fixed target.
pub fn kl_divergence<'t>(p: Var<'t>, q: Var<'t>) -> Result<Var<'t>> {
    {
        let (pv, qv) = (p.value(), q.value());
        pv.expect_same_shape(&qv, "kl_divergence")?;
        check_distributions(&pv, "p")?;
        check_distributions(&qv, "q")?;
    }
    let batch = p.value().rows() as f64;
    let log_ratio = clamped_log(p)?.sub(clamped_log(q)?)?;
    p.mul(log_ratio)?.sum()?.scale(1.0 / batch)
}

/// Batch-mean cross-entropy `−log qᵧ` against one-hot targets `h`.
pub fn cross_entropy<'t>(h: &Tensor, q: Var<'t>) -> Result<Var<'t>> {
    {
        let qv = q.value();
        h.expect_same_shape(&qv, "cross_entropy")?;
        check_distributions(&qv, "q")?;
    }
    let (rows, _) = h.dims2()?;
    for i in 0..rows {
        let row = h.row(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::Contract(format!("target row {i} is not one-hot")));
        }
    }
    let target = q.tape().constant(h.clone());
    target
        .mul(clamped_log(q)?)?
        .sum()?
        .scale(-1.0 / rows as f64)
}

/// `[N×K]` one-hot encoding of class labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Contract(format!("label {bad} out of range for {classes} classes")));
    }
    let mut t = Tensor::zeros(&[labels.len(), classes])?;
    for (i, &y) in labels.iter().enumerate() {
        t.row_mut(i)[y] = 1.0;
    }
    Ok(t)
}
