use super::sisdr::{si_sdr, si_sdr_with_grad};
use crate::error::{Error, Result};

/// Largest speaker count searched exhaustively.
const MAX_SOURCES: usize = 4;

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn extend(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                extend(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    extend(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

/// Best assignment of estimates to targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PermutationResult {
    /// `perm[i]` is the target matched to estimate `i`.
    pub perm: Vec<usize>,
    /// SI-SDR (dB) of each estimate against its matched target.
    pub per_pair_si_sdr: Vec<f64>,
    pub mean_si_sdr: f64,
}

fn check_sets<T: AsRef<[f64]>, E: AsRef<[f64]>>(targets: &[T], estimates: &[E]) -> Result<usize> {
    let s = targets.len();
    if s == 0 || s != estimates.len() {
        return Err(Error::InvalidInput(format!(
            "{} targets but {} estimates",
            targets.len(),
            estimates.len()
        )));
    }
    if s > MAX_SOURCES {
        return Err(Error::InvalidInput(format!(
            "exhaustive permutation search supports at most {MAX_SOURCES} sources, got {s}"
        )));
    }
    Ok(s)
}

/// Negative of the best mean SI-SDR over all assignments, compared on whole
/// utterances. Ties keep the lexicographically first permutation.
pub fn pit_loss<T: AsRef<[f64]>, E: AsRef<[f64]>>(targets: &[T], estimates: &[E]) -> Result<(f64, PermutationResult)> {
    let s = check_sets(targets, estimates)?;
    // pair[i][j] = SI-SDR of estimate i against target j.
    let pair: Vec<Vec<f64>> = estimates
        .iter()
        .map(|e| targets.iter().map(|t| si_sdr(t.as_ref(), e.as_ref())).collect())
        .collect::<Result<_>>()?;
    let mut best: Option<PermutationResult> = None;
    for perm in permutations(s) {
        let per_pair: Vec<f64> = perm.iter().enumerate().map(|(i, &j)| pair[i][j]).collect();
        let mean = per_pair.iter().sum::<f64>() / s as f64;
        if best.as_ref().map_or(true, |b| mean > b.mean_si_sdr) {
            best = Some(PermutationResult {
                perm,
                per_pair_si_sdr: per_pair,
                mean_si_sdr: mean,
            });
        }
    }
    let best = best.expect("at least one permutation");
    Ok((-best.mean_si_sdr, best))
}

/// [`pit_loss`] plus the gradient of the loss with respect to each estimate.
pub fn pit_loss_with_grad<T: AsRef<[f64]>, E: AsRef<[f64]>>(
    targets: &[T],
    estimates: &[E],
) -> Result<(f64, PermutationResult, Vec<Vec<f64>>)> {
    let (loss, result) = pit_loss(targets, estimates)?;
    let s = targets.len() as f64;
    let grads = result
        .perm
        .iter()
        .zip(estimates)
        .map(|(&j, e)| {
            let (_, g) = si_sdr_with_grad(targets[j].as_ref(), e.as_ref())?;
            Ok(g.into_iter().map(|v| -v / s).collect())
        })
        .collect::<Result<_>>()?;
    Ok((loss, result, grads))
}

/// Per-stage PIT losses averaged over stages, optionally plus a weighted
/// identity loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub per_stage_neg_si_sdr: Vec<f64>,
    pub per_stage: Vec<PermutationResult>,
    pub id_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn si_sdr_part(&self) -> f64 {
        self.per_stage_neg_si_sdr.iter().sum::<f64>() / self.per_stage_neg_si_sdr.len() as f64
    }

    /// Permutation chosen by the final stage.
    pub fn final_perm(&self) -> &[usize] {
        &self.per_stage.last().expect("at least one stage").perm
    }

    /// Sets the identity term and recomputes the total.
    pub fn with_id_loss(mut self, id_loss: f64, id_weight: f64) -> Self {
        self.id_loss = id_loss;
        self.total = self.si_sdr_part() + id_weight * id_loss;
        self
    }
}

/// Gradients of the averaged stage loss: `[stage][estimate][sample]`.
pub type StageGradients = Vec<Vec<Vec<f64>>>;

/// Mean over stages of independent PIT losses; each stage picks its own
/// permutation.
pub fn multi_stage_loss<T: AsRef<[f64]>, E: AsRef<[f64]>>(stages: &[Vec<E>], targets: &[T]) -> Result<LossBreakdown> {
    if stages.is_empty() {
        return Err(Error::InvalidInput("no stage outputs".into()));
    }
    let mut losses = Vec::with_capacity(stages.len());
    let mut results = Vec::with_capacity(stages.len());
    for est in stages {
        let (loss, r) = pit_loss(targets, est)?;
        losses.push(loss);
        results.push(r);
    }
    let total = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok(LossBreakdown {
        per_stage_neg_si_sdr: losses,
        per_stage: results,
        id_loss: 0.0,
        total,
    })
}

/// [`multi_stage_loss`] plus gradients with respect to every stage estimate.
pub fn multi_stage_loss_with_grad<T: AsRef<[f64]>, E: AsRef<[f64]>>(
    stages: &[Vec<E>],
    targets: &[T],
) -> Result<(LossBreakdown, StageGradients)> {
    let breakdown = multi_stage_loss(stages, targets)?;
    let n = stages.len() as f64;
    let grads = stages
        .iter()
        .map(|est| {
            let (_, _, g) = pit_loss_with_grad(targets, est)?;
            Ok(g.into_iter()
                .map(|v| v.into_iter().map(|x| x / n).collect())
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok((breakdown, grads))
}

fn check_embeddings(sep: &[Vec<f64>], refs: &[Vec<f64>], perm: &[usize]) -> Result<()> {
    if sep.is_empty() || sep.len() != refs.len() || perm.len() != sep.len() {
        return Err(Error::InvalidInput(format!(
            "{} separated embeddings, {} references, permutation of {}",
            sep.len(),
            refs.len(),
            perm.len()
        )));
    }
    let mut seen = vec![false; perm.len()];
    for &j in perm {
        if j >= perm.len() || std::mem::replace(&mut seen[j], true) {
            return Err(Error::InvalidInput(format!("{perm:?} is not a permutation")));
        }
    }
    let dim = sep[0].len();
    if dim == 0 || sep.iter().chain(refs).any(|e| e.len() != dim) {
        return Err(Error::InvalidInput("embedding dimensions differ".into()));
    }
    Ok(())
}

/// Mean over speakers of the mean squared difference between the embedding
/// of estimate `i` and that of target `perm[i]`.
pub fn id_loss(sep: &[Vec<f64>], refs: &[Vec<f64>], perm: &[usize]) -> Result<f64> {
    check_embeddings(sep, refs, perm)?;
    let per: f64 = sep
        .iter()
        .zip(perm)
        .map(|(e, &j)| {
            let r = &refs[j];
            e.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / e.len() as f64
        })
        .sum();
    Ok(per / sep.len() as f64)
}

/// [`id_loss`] and its gradient with respect to the separated embeddings.
pub fn id_loss_with_grad(sep: &[Vec<f64>], refs: &[Vec<f64>], perm: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    let loss = id_loss(sep, refs, perm)?;
    let scale = 2.0 / (sep.len() * sep[0].len()) as f64;
    let grads = sep
        .iter()
        .zip(perm)
        .map(|(e, &j)| e.iter().zip(&refs[j]).map(|(a, b)| scale * (a - b)).collect())
        .collect();
    Ok((loss, grads))
}
