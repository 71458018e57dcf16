//! Set-based optimisation: pairwise cost matrices, minimum-cost bipartite
//! assignment and the permutation-minimising set loss.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::mask::{soft_dice_loss, soft_dice_loss_grad, BinaryMask, ProbMask};

/// Largest size accepted by [`brute_force_assignment`].
pub const BRUTE_FORCE_MAX: usize = 8;

/// Square matrix of finite, non-negative costs. Rows are predictions,
/// columns are labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    entries: Array2<f64>,
}

impl CostMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        let (r, c) = entries.dim();
        if r != c {
            return Err(Error::invalid(format!("cost matrix must be square, got {r}x{c}")));
        }
        if r == 0 {
            return Err(Error::invalid("cost matrix must be at least 1x1"));
        }
        if entries.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("cost entries must be finite and non-negative"));
        }
        Ok(Self { entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("cost matrix must be square"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let entries =
            Array2::from_shape_vec((n, n), flat).map_err(|e| Error::invalid(e.to_string()))?;
        Self::new(entries)
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    /// Sum of the assigned entries, accumulated in row order.
    pub fn total(&self, assignment: &Assignment) -> f64 {
        assignment
            .mapping
            .iter()
            .enumerate()
            .map(|(m, &k)| self.entries[[m, k]])
            .sum()
    }
}

/// Bijection from prediction index to label index.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Assignment {
    mapping: Vec<usize>,
}

impl Assignment {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; mapping.len()];
        for &k in &mapping {
            if k >= mapping.len() || seen[k] {
                return Err(Error::invalid(format!("{mapping:?} is not a permutation")));
            }
            seen[k] = true;
        }
        Ok(Self { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mapping: (0..n).collect(),
        }
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    /// Label assigned to prediction `m`.
    pub fn label_for(&self, m: usize) -> usize {
        self.mapping[m]
    }
}

/// `entries[m][k] = soft_dice_loss(preds[m], labels[k])`.
pub fn build_cost_matrix(preds: &[ProbMask], labels: &[BinaryMask]) -> Result<CostMatrix> {
    check_sets(preds, labels)?;
    let k = preds.len();
    let mut entries = Array2::zeros((k, k));
    for (m, p) in preds.iter().enumerate() {
        for (j, y) in labels.iter().enumerate() {
            entries[[m, j]] = soft_dice_loss(p, y)?;
        }
    }
    CostMatrix::new(entries)
}

fn check_sets(preds: &[ProbMask], labels: &[BinaryMask]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::invalid("set loss needs at least one prediction"));
    }
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let shape = labels[0].shape();
    if preds.iter().any(|p| p.shape() != shape) || labels.iter().any(|y| y.shape() != shape) {
        return Err(Error::invalid("all masks in a set loss must share one shape"));
    }
    Ok(())
}

/// Minimum-cost assignment via the O(K^3) shortest augmenting path form of
/// the Hungarian algorithm. Rows are inserted in index order and the
/// lowest column wins among equal reduced costs.
pub fn hungarian(cost: &CostMatrix) -> (Assignment, f64) {
    let n = cost.size();
    let c = &cost.entries;
    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = c[[i0 - 1, j - 1]] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut mapping = vec![0usize; n];
    for j in 1..=n {
        mapping[row_of[j] - 1] = j - 1;
    }
    let assignment = Assignment { mapping };
    let total = cost.total(&assignment);
    (assignment, total)
}

/// Exhaustive minimum over all K! permutations, visited in lexicographic
/// order; the first strict minimum is kept.
pub fn brute_force_assignment(cost: &CostMatrix) -> Result<(Assignment, f64)> {
    let n = cost.size();
    if n > BRUTE_FORCE_MAX {
        return Err(Error::SizeLimit(format!(
            "brute-force assignment limited to K <= {BRUTE_FORCE_MAX}, got {n}"
        )));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        let total: f64 = perm
            .iter()
            .enumerate()
            .map(|(m, &k)| cost.entries[[m, k]])
            .sum();
        if best.as_ref().is_none_or(|(_, b)| total < *b) {
            best = Some((perm.clone(), total));
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let (mapping, total) = best.expect("at least one permutation");
    Ok((Assignment { mapping }, total))
}

fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Hungarian-matched sum of pairwise soft dice losses.
pub fn set_loss(preds: &[ProbMask], labels: &[BinaryMask]) -> Result<(f64, Assignment)> {
    let cost = build_cost_matrix(preds, labels)?;
    let (assignment, total) = hungarian(&cost);
    Ok((total, assignment))
}

/// Output of [`set_loss_grad`].
#[derive(Debug, Clone)]
pub struct SetLossGrad {
    pub loss: f64,
    pub assignment: Assignment,
    /// d loss / d p for every prediction, with the assignment held fixed.
    pub grads: Vec<Array2<f64>>,
}

/// Set loss plus its gradient with respect to each prediction. The matching
/// is treated as a constant, so gradient only flows through assigned pairs.
pub fn set_loss_grad(preds: &[ProbMask], labels: &[BinaryMask]) -> Result<SetLossGrad> {
    let (_, assignment) = set_loss(preds, labels)?;
    let (loss, grads) = loss_with_assignment(preds, labels, &assignment)?;
    Ok(SetLossGrad {
        loss,
        assignment,
        grads,
    })
}

/// Sum of pairwise losses under a given assignment, and its gradients.
pub fn loss_with_assignment(
    preds: &[ProbMask],
    labels: &[BinaryMask],
    assignment: &Assignment,
) -> Result<(f64, Vec<Array2<f64>>)> {
    check_sets(preds, labels)?;
    if assignment.len() != preds.len() {
        return Err(Error::invalid("assignment size differs from the prediction set"));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (m, p) in preds.iter().enumerate() {
        let (l, g) = soft_dice_loss_grad(p, &labels[assignment.label_for(m)])?;
        loss += l;
        grads.push(g);
    }
    Ok((loss, grads))
}
