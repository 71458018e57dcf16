//! Training objectives expressed on logits: the set loss over a selected
//! subsequence, and the winner-takes-all objective of the multi-head
//! baseline.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::mask::{soft_dice_loss, soft_dice_loss_grad, BinaryMask, ProbMask};
use crate::matching::{loss_with_assignment, set_loss, Assignment};
use crate::model::LogitsMask;

#[derive(Debug, Clone)]
pub struct SequenceLoss {
    pub loss: f64,
    pub assignment: Assignment,
    /// d loss / d logits for every generated mask; zero for masks that were
    /// not selected.
    pub grad_logits: Vec<Array2<f64>>,
}

fn probs(logits: &LogitsMask) -> Result<ProbMask> {
    ProbMask::from_logits(&logits.0)
}

/// Set loss between the masks at `selected` and the labels. When
/// `assignment` is given it is used as-is instead of being re-matched.
pub fn sequence_set_loss(
    logits: &[LogitsMask],
    selected: &[usize],
    labels: &[BinaryMask],
    assignment: Option<&Assignment>,
) -> Result<SequenceLoss> {
    if selected.iter().any(|&i| i >= logits.len()) {
        return Err(Error::invalid("selected index outside the generated sequence"));
    }
    let preds = selected
        .iter()
        .map(|&i| probs(&logits[i]))
        .collect::<Result<Vec<_>>>()?;
    let assignment = match assignment {
        Some(a) => a.clone(),
        None => set_loss(&preds, labels)?.1,
    };
    let (loss, grads_p) = loss_with_assignment(&preds, labels, &assignment)?;
    let mut grad_logits: Vec<Array2<f64>> = logits.iter().map(|z| Array2::zeros(z.0.dim())).collect();
    for ((&i, gp), p) in selected.iter().zip(grads_p).zip(&preds) {
        // d sigma / d z = sigma (1 - sigma)
        grad_logits[i] += &(gp * &p.grid().mapv(|s| s * (1.0 - s)));
    }
    Ok(SequenceLoss {
        loss,
        assignment,
        grad_logits,
    })
}

/// Winner-takes-all loss: for each label, the best head's soft dice loss,
/// averaged over labels.
pub fn mcl_loss(preds: &[ProbMask], labels: &[BinaryMask]) -> Result<f64> {
    Ok(mcl_winners(preds, labels)?.0)
}

/// `(loss, winning head per label)`; ties go to the lowest head index.
fn mcl_winners(preds: &[ProbMask], labels: &[BinaryMask]) -> Result<(f64, Vec<usize>)> {
    if preds.is_empty() || labels.is_empty() {
        return Err(Error::invalid("multi-head loss needs predictions and labels"));
    }
    let mut total = 0.0;
    let mut winners = Vec::with_capacity(labels.len());
    for y in labels {
        let mut best = (f64::INFINITY, 0usize);
        for (m, p) in preds.iter().enumerate() {
            let l = soft_dice_loss(p, y)?;
            if l < best.0 {
                best = (l, m);
            }
        }
        total += best.0;
        winners.push(best.1);
    }
    Ok((total / labels.len() as f64, winners))
}

/// Winner-takes-all loss and its gradient with respect to each head's logits.
pub fn mcl_loss_grad(logits: &[LogitsMask], labels: &[BinaryMask]) -> Result<(f64, Vec<Array2<f64>>)> {
    let preds = logits.iter().map(probs).collect::<Result<Vec<_>>>()?;
    let (loss, winners) = mcl_winners(&preds, labels)?;
    let k = labels.len() as f64;
    let mut grads: Vec<Array2<f64>> = logits.iter().map(|z| Array2::zeros(z.0.dim())).collect();
    for (y, &m) in labels.iter().zip(&winners) {
        let (_, gp) = soft_dice_loss_grad(&preds[m], y)?;
        let ds = preds[m].grid().mapv(|s| s * (1.0 - s));
        grads[m] += &(gp * ds / k);
    }
    Ok((loss, grads))
}
