//! Learnable token selection: GCN scores, row-drop perturbation,
//! straight-through Gumbel top-k and physical row removal.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::model::{ModelError, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenPruneConfig {
    pub keep_ratio: f64,
    /// Fraction of score rows zeroed per training forward.
    pub score_drop: f64,
    /// Transformer blocks after which tokens are pruned.
    pub stages: Vec<usize>,
}

impl Default for TokenPruneConfig {
    fn default() -> Self {
        Self {
            keep_ratio: 0.5,
            score_drop: 0.1,
            stages: vec![0],
        }
    }
}

impl TokenPruneConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(format!("keep_ratio {} outside (0, 1]", self.keep_ratio));
        }
        if !(0.0..1.0).contains(&self.score_drop) {
            return Err(format!("score_drop {} outside [0, 1)", self.score_drop));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenMask {
    pub layer: usize,
    pub mask: Vec<bool>,
    pub keep_count: usize,
    /// Keep probabilities (train) or keep-minus-drop logits (eval).
    pub soft_scores: Vec<f64>,
}

impl TokenMask {
    pub fn kept(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }
}

pub enum Selection<'a> {
    /// Gumbel-perturbed logits (one draw per score entry) at temperature `tau`.
    Train { gumbel: &'a Tensor, tau: f64 },
    Eval,
}

/// `k = max(1, round_half_up(keep_ratio · n_valid))`.
pub fn keep_count(keep_ratio: f64, n_valid: usize) -> usize {
    let x = keep_ratio * n_valid as f64;
    ((x + 0.5 + 1e-9).floor() as usize).clamp(1, n_valid.max(1))
}

/// Linear GCN scores `Â·H·W_s`; column 0 is the keep logit, column 1 the drop logit.
pub fn score_tokens(tape: &mut Tape, a_hat: &Tensor, h: Var, scorer: Var) -> Result<Var> {
    let a = tape.constant(a_hat.clone());
    let hw = tape.matmul(h, scorer)?;
    Ok(tape.matmul(a, hw)?)
}

/// Zeroes `⌈p_s · n_valid⌉` randomly chosen valid score rows.
pub fn perturb_scores(tape: &mut Tape, scores: Var, p_s: f64, validity: &[bool], rng: &mut impl Rng) -> Result<Var> {
    let valid: Vec<usize> = (0..validity.len()).filter(|&i| validity[i]).collect();
    let drop = crate::prune::ceil_count(p_s * valid.len() as f64).min(valid.len());
    if drop == 0 {
        return Ok(scores);
    }
    let mut keep = vec![1.0; validity.len()];
    for pick in sample(rng, valid.len(), drop) {
        keep[valid[pick]] = 0.0;
    }
    let keep = tape.constant(Tensor::vector(keep));
    Ok(tape.scale_rows(scores, keep)?)
}

/// Standard Gumbel draws shaped `rows × cols`.
pub fn sample_gumbel(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let g = Gumbel::new(0.0, 1.0).expect("unit scale");
    let data = (0..rows * cols).map(|_| g.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("gumbel shape")
}

fn top_k(keys: &[f64], validity: &[bool], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..keys.len()).filter(|&i| validity[i]).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    let mut mask = vec![false; keys.len()];
    for &i in order.iter().take(k) {
        mask[i] = true;
    }
    mask
}

/// Picks `k` valid tokens. In training the hard top-k of Gumbel-perturbed
/// log-odds is returned together with a straight-through keep vector whose
/// forward value is the hard mask and whose gradient flows into the soft
/// keep probability `softmax((S + G)/τ)[:, 0]`.
pub fn select_topk(
    tape: &mut Tape,
    scores: Var,
    keep_ratio: f64,
    selection: Selection<'_>,
    validity: &[bool],
    layer: usize,
) -> Result<(TokenMask, Option<Var>)> {
    let n_valid = validity.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(ModelError::EmptyGraph);
    }
    let k = keep_count(keep_ratio, n_valid);
    match selection {
        Selection::Eval => {
            let s = tape.value(scores);
            let logits: Vec<f64> = (0..s.rows()).map(|i| s.get(i, 0) - s.get(i, 1)).collect();
            let mask = top_k(&logits, validity, k);
            Ok((
                TokenMask {
                    layer,
                    mask,
                    keep_count: k,
                    soft_scores: logits,
                },
                None,
            ))
        }
        Selection::Train { gumbel, tau } => {
            let g = tape.constant(gumbel.clone());
            let noisy = tape.add(scores, g)?;
            let nv = tape.value(noisy);
            let logits: Vec<f64> = (0..nv.rows()).map(|i| nv.get(i, 0) - nv.get(i, 1)).collect();
            let mask = top_k(&logits, validity, k);
            let scaled = tape.scale(noisy, 1.0 / tau);
            let probs = tape.softmax_rows(scaled, None)?;
            let pick = tape.constant(Tensor::matrix(2, 1, vec![1.0, 0.0])?);
            let soft = tape.matmul(probs, pick)?;
            let hard = Tensor::matrix(mask.len(), 1, mask.iter().map(|&m| f64::from(u8::from(m))).collect())?;
            let st = tape.straight_through(hard, soft)?;
            let soft_scores = tape.value(soft).data().to_vec();
            Ok((
                TokenMask {
                    layer,
                    mask,
                    keep_count: k,
                    soft_scores,
                },
                Some(st),
            ))
        }
    }
}

/// Gathers the kept rows (in ascending order), after scaling by the
/// straight-through keep vector when training. Returns the new rows and the
/// index map into the input rows.
pub fn apply_token_mask(tape: &mut Tape, h: Var, mask: &TokenMask, st: Option<Var>) -> Result<(Var, Vec<usize>)> {
    let h = match st {
        Some(s) => tape.scale_rows(h, s)?,
        None => h,
    };
    let kept = mask.kept();
    let out = tape.gather_rows(h, &kept)?;
    Ok((out, kept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scores_var(tape: &mut Tape, rows: &[[f64; 2]]) -> Var {
        let t = Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        tape.param(&t)
    }

    #[test]
    fn keep_count_rounds_half_up() {
        assert_eq!(keep_count(0.5, 15), 8);
        assert_eq!(keep_count(0.5, 14), 7);
        assert_eq!(keep_count(0.01, 10), 1);
        assert_eq!(keep_count(1.0, 9), 9);
    }

    #[test]
    fn eval_topk_by_sort_order() {
        let mut tape = Tape::new();
        let s = scores_var(&mut tape, &[[5.0, 0.0], [1.0, 0.0], [0.0, 0.0], [3.0, 0.0]]);
        let (m, st) = select_topk(&mut tape, s, 0.5, Selection::Eval, &[true; 4], 0).unwrap();
        assert_eq!(m.mask, vec![true, false, false, true]);
        assert!(st.is_none());
    }

    #[test]
    fn ties_go_to_lower_index_and_padding_is_skipped() {
        let mut tape = Tape::new();
        let s = scores_var(&mut tape, &[[0.0, 0.0], [0.0, 0.0], [9.0, 0.0], [0.0, 0.0]]);
        let (m, _) = select_topk(&mut tape, s, 0.7, Selection::Eval, &[true, true, false, true], 0).unwrap();
        assert_eq!(m.mask, vec![true, true, false, false]);
        assert_eq!(m.keep_count, 2);
    }

    #[test]
    fn full_keep_is_all_valid() {
        let mut tape = Tape::new();
        let s = scores_var(&mut tape, &[[1.0, 2.0], [3.0, 0.0], [0.0, 0.0]]);
        let (m, _) = select_topk(&mut tape, s, 1.0, Selection::Eval, &[true, true, false], 0).unwrap();
        assert_eq!(m.mask, vec![true, true, false]);
    }

    #[test]
    fn no_valid_nodes_is_an_error() {
        let mut tape = Tape::new();
        let s = scores_var(&mut tape, &[[1.0, 2.0]]);
        assert!(select_topk(&mut tape, s, 0.5, Selection::Eval, &[false], 0).is_err());
    }

    #[test]
    fn cold_train_mask_equals_eval_mask_of_noisy_logits() {
        let rows = [[0.3, -0.2], [1.0, 0.4], [-0.5, 0.1], [0.2, 0.2], [0.9, -1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = sample_gumbel(&mut rng, 5, 2);
        let mut tape = Tape::new();
        let s = scores_var(&mut tape, &rows);
        let (train, _) = select_topk(&mut tape, s, 0.4, Selection::Train { gumbel: &g, tau: 1e-6 }, &[true; 5], 0).unwrap();
        let noisy: Vec<[f64; 2]> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| [r[0] + g.get(i, 0), r[1] + g.get(i, 1)])
            .collect();
        let mut tape2 = Tape::new();
        let s2 = scores_var(&mut tape2, &noisy);
        let (eval, _) = select_topk(&mut tape2, s2, 0.4, Selection::Eval, &[true; 5], 0).unwrap();
        assert_eq!(train.mask, eval.mask);
        assert_eq!(train.mask.iter().filter(|&&m| m).count(), 2);
    }

    #[test]
    fn perturbation_zeroes_exact_row_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<[f64; 2]> = (0..10).map(|i| [i as f64 + 1.0, 1.0]).collect();
        let mut tape = Tape::new();
        let s = scores_var(&mut tape, &rows);
        let zeroed = |tape: &Tape, v: Var| (0..10).filter(|&i| tape.value(v).row(i) == [0.0, 0.0]).count();
        let p = perturb_scores(&mut tape, s, 0.25, &[true; 10], &mut rng).unwrap();
        assert_eq!(zeroed(&tape, p), 3);
        let p = perturb_scores(&mut tape, s, 0.0, &[true; 10], &mut rng).unwrap();
        assert_eq!(p, s);
        let p = perturb_scores(&mut tape, s, 0.85, &[true; 10], &mut rng).unwrap();
        assert_eq!(zeroed(&tape, p), 9);
    }

    #[test]
    fn gather_keeps_index_map() {
        let mut tape = Tape::new();
        let h = tape.param(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let mask = TokenMask {
            layer: 0,
            mask: vec![true, false, true],
            keep_count: 2,
            soft_scores: vec![0.0; 3],
        };
        let (out, map) = apply_token_mask(&mut tape, h, &mask, None).unwrap();
        assert_eq!(map, vec![0, 2]);
        assert_eq!(tape.value(out).to_rows(), vec![vec![1.0, 2.0], vec![5.0, 6.0]]);
    }

    #[test]
    fn straight_through_reaches_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = sample_gumbel(&mut rng, 3, 2);
        let mut tape = Tape::new();
        let s = scores_var(&mut tape, &[[0.5, 0.1], [0.2, 0.3], [0.9, -0.4]]);
        let h = tape.constant(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap());
        let (m, st) = select_topk(&mut tape, s, 0.67, Selection::Train { gumbel: &g, tau: 1.0 }, &[true; 3], 0).unwrap();
        let (kept, _) = apply_token_mask(&mut tape, h, &m, st).unwrap();
        let loss = tape.sum(kept);
        tape.backward(loss).unwrap();
        let grad = tape.grad(s).unwrap();
        assert!(grad.iter().any(|g| g.abs() > 1e-6));
    }
}
