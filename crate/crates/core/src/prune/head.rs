//! Attention-head importance, pruning and regrowth.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{ceil_count, check_sparsity, PruneError, PruneState, Result};
use crate::graph::PaddedGraph;
use crate::model::{forward_graph, graph_loss, ActiveMasks, ForwardOptions, ModelParams};
use crate::tensor::Tape;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadMask {
    bits: Vec<Vec<bool>>,
}

impl HeadMask {
    pub fn all_active(layers: usize, heads: usize) -> Self {
        Self {
            bits: vec![vec![true; heads]; layers],
        }
    }

    pub fn from_bits(bits: Vec<Vec<bool>>) -> Self {
        Self { bits }
    }

    pub fn bits(&self) -> &[Vec<bool>] {
        &self.bits
    }

    pub fn layers(&self) -> usize {
        self.bits.len()
    }

    pub fn is_active(&self, layer: usize, head: usize) -> bool {
        self.bits[layer][head]
    }

    pub fn set(&mut self, layer: usize, head: usize, active: bool) {
        self.bits[layer][head] = active;
    }

    pub fn total(&self) -> usize {
        self.bits.iter().map(Vec::len).sum()
    }

    pub fn active_count(&self) -> usize {
        self.bits.iter().flatten().filter(|&&b| b).count()
    }

    pub fn inactive_count(&self) -> usize {
        self.total() - self.active_count()
    }

    pub fn layer_active_count(&self, layer: usize) -> usize {
        self.bits[layer].iter().filter(|&&b| b).count()
    }

    fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .flat_map(|(l, row)| (0..row.len()).map(move |h| (l, h)))
    }
}

/// `score[l][h]` is the sensitivity `S_H`; `grad[l][h]` the regrowth
/// criterion `‖∂L/∂Z‖₁` measured with masks lifted.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadScoreBoard {
    pub score: Vec<Vec<f64>>,
    pub grad: Vec<Vec<f64>>,
}

impl HeadScoreBoard {
    pub fn zeros(layers: usize, heads: usize) -> Self {
        Self {
            score: vec![vec![0.0; heads]; layers],
            grad: vec![vec![0.0; heads]; layers],
        }
    }

    pub fn write_csv(&self, mask: &HeadMask, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "layer,head,score,grad,active")?;
        for (l, h) in mask.positions() {
            writeln!(
                out,
                "{l},{h},{:.12e},{:.12e},{}",
                self.score[l][h],
                self.grad[l][h],
                u8::from(mask.is_active(l, h))
            )?;
        }
        Ok(())
    }
}

/// Mean over `graphs` of `|Σ Z ⊙ ∂L/∂Z|` per head, evaluated under the
/// current masks. With `with_regrow`, a second pass with head masks lifted
/// fills the mean `‖∂L/∂Z‖₁`.
pub fn head_importance(
    params: &ModelParams,
    state: &PruneState,
    graphs: &[PaddedGraph],
    with_regrow: bool,
) -> Result<HeadScoreBoard> {
    if graphs.is_empty() {
        return Err(PruneError::NoGraphs);
    }
    let config = &params.config;
    let mut board = HeadScoreBoard::zeros(config.num_transformer_layers, config.num_heads);
    let masks = ActiveMasks::from_state(state);
    for g in graphs {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, state.weights.as_ref());
        let mut opts = ForwardOptions::eval();
        let trace = forward_graph(&mut tape, &vars, params, g, &masks, &mut opts)?;
        let loss = graph_loss(&mut tape, &trace, g.label)?;
        tape.backward(loss)?;
        for (l, row) in trace.head_outputs.iter().enumerate() {
            for (h, z) in row.iter().enumerate() {
                let Some(z) = *z else { continue };
                let Some(grad) = tape.grad(z) else { continue };
                let inner: f64 = tape.value(z).data().iter().zip(grad).map(|(a, b)| a * b).sum();
                board.score[l][h] += inner.abs();
            }
        }
        if with_regrow {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape, state.weights.as_ref());
            let mut opts = ForwardOptions::eval();
            opts.lift_head_mask = true;
            let trace = forward_graph(&mut tape, &vars, params, g, &masks, &mut opts)?;
            let loss = graph_loss(&mut tape, &trace, g.label)?;
            tape.backward(loss)?;
            for (l, row) in trace.head_outputs.iter().enumerate() {
                for (h, z) in row.iter().enumerate() {
                    if let Some(grad) = z.and_then(|z| tape.grad(z)) {
                        board.grad[l][h] += grad.iter().map(|v| v.abs()).sum::<f64>();
                    }
                }
            }
        }
    }
    let count = graphs.len() as f64;
    for row in board.score.iter_mut().chain(board.grad.iter_mut()) {
        row.iter_mut().for_each(|v| *v /= count);
    }
    Ok(board)
}

/// Globally deactivates the lowest-scoring active heads until
/// `⌈s·L·N_h⌉` are inactive, keeping at least one active head per layer.
/// Ties go to the lower `(layer, head)`.
pub fn prune_heads(board: &HeadScoreBoard, target_sparsity: f64, mask: &HeadMask) -> Result<HeadMask> {
    check_sparsity(target_sparsity)?;
    let total = mask.total();
    let wanted = ceil_count(target_sparsity * total as f64);
    let allowed = total - mask.layers();
    if wanted > allowed {
        return Err(PruneError::TooManyHeads { wanted, allowed });
    }
    let mut out = mask.clone();
    let mut candidates: Vec<(usize, usize)> = mask.positions().filter(|&(l, h)| mask.is_active(l, h)).collect();
    candidates.sort_by(|&(la, ha), &(lb, hb)| {
        board.score[la][ha]
            .total_cmp(&board.score[lb][hb])
            .then((la, ha).cmp(&(lb, hb)))
    });
    for (l, h) in candidates {
        if out.inactive_count() >= wanted {
            break;
        }
        if out.layer_active_count(l) > 1 {
            out.set(l, h, false);
        }
    }
    Ok(out)
}

/// Reactivates the `r` inactive heads with the largest gradient criterion and
/// deactivates as many of the lowest-scoring remaining active heads, so the
/// inactive count is unchanged.
pub fn regrow_heads(board: &HeadScoreBoard, r: usize, mask: &HeadMask) -> Result<HeadMask> {
    let available = mask.inactive_count();
    if r > available {
        return Err(PruneError::Regrow { wanted: r, available });
    }
    if r == 0 {
        return Ok(mask.clone());
    }
    let mut inactive: Vec<(usize, usize)> = mask.positions().filter(|&(l, h)| !mask.is_active(l, h)).collect();
    inactive.sort_by(|&(la, ha), &(lb, hb)| {
        board.grad[lb][hb]
            .total_cmp(&board.grad[la][ha])
            .then((la, ha).cmp(&(lb, hb)))
    });
    let regrown: Vec<(usize, usize)> = inactive.into_iter().take(r).collect();
    let mut out = mask.clone();
    for &(l, h) in &regrown {
        out.set(l, h, true);
    }
    let mut active: Vec<(usize, usize)> = out
        .positions()
        .filter(|&(l, h)| out.is_active(l, h) && !regrown.contains(&(l, h)))
        .collect();
    active.sort_by(|&(la, ha), &(lb, hb)| {
        board.score[la][ha]
            .total_cmp(&board.score[lb][hb])
            .then((la, ha).cmp(&(lb, hb)))
    });
    let mut removed = 0;
    for (l, h) in active {
        if removed == r {
            break;
        }
        if out.layer_active_count(l) > 1 {
            out.set(l, h, false);
            removed += 1;
        }
    }
    // The floor can block a full swap; undo surplus regrowth from the back.
    for &(l, h) in regrown.iter().rev() {
        if removed == r {
            break;
        }
        out.set(l, h, false);
        removed += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn board(scores: Vec<Vec<f64>>) -> HeadScoreBoard {
        let grad = scores.iter().map(|r| vec![0.0; r.len()]).collect();
        HeadScoreBoard { score: scores, grad }
    }

    #[test]
    fn zero_target_keeps_mask() {
        let m = HeadMask::all_active(4, 4);
        let b = board(vec![vec![1.0; 4]; 4]);
        assert_eq!(prune_heads(&b, 0.0, &m).unwrap(), m);
    }

    #[test]
    fn quarter_of_sixteen_is_four() {
        let m = HeadMask::all_active(4, 4);
        let scores = (0..4).map(|l| (0..4).map(|h| (l * 4 + h) as f64).collect()).collect();
        let out = prune_heads(&board(scores), 0.25, &m).unwrap();
        assert_eq!(out.inactive_count(), 4);
        // The four smallest scores all live in layer 0, but the floor keeps one.
        assert_eq!(out.layer_active_count(0), 1);
        assert!(!out.is_active(1, 0));
    }

    #[test]
    fn everything_is_an_error() {
        let m = HeadMask::all_active(2, 2);
        let b = board(vec![vec![1.0; 2]; 2]);
        assert!(matches!(prune_heads(&b, 0.9, &m), Err(PruneError::TooManyHeads { .. })));
    }

    #[test]
    fn single_inactive_head_regrows() {
        let mut m = HeadMask::all_active(2, 2);
        m.set(1, 1, false);
        let mut b = board(vec![vec![5.0, 1.0], vec![3.0, 0.0]]);
        b.grad[1][1] = 1e-12;
        let out = regrow_heads(&b, 1, &m).unwrap();
        assert!(out.is_active(1, 1));
        assert!(!out.is_active(0, 1));
        assert_eq!(out.inactive_count(), 1);
        assert_eq!(regrow_heads(&b, 0, &m).unwrap(), m);
    }

    #[test]
    fn csv_has_one_row_per_head() {
        let m = HeadMask::all_active(2, 3);
        let mut buf = Vec::new();
        HeadScoreBoard::zeros(2, 3).write_csv(&m, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 7);
    }

    proptest! {
        #[test]
        fn prune_matches_sort_oracle(scores in prop::collection::vec(0.0f64..1.0, 16), s in 0.0f64..0.7) {
            let rows: Vec<Vec<f64>> = scores.chunks(4).map(<[f64]>::to_vec).collect();
            let m = HeadMask::all_active(4, 4);
            let out = prune_heads(&board(rows.clone()), s, &m).unwrap();
            let wanted = ceil_count(s * 16.0);
            prop_assert_eq!(out.inactive_count(), wanted);
            for l in 0..4 {
                prop_assert!(out.layer_active_count(l) >= 1);
            }
            // Without floor interference the inactive set is the argmin set.
            let mut order: Vec<usize> = (0..16).collect();
            order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
            let oracle: Vec<usize> = order[..wanted].to_vec();
            let floor_hit = (0..4).any(|l| oracle.iter().filter(|&&i| i / 4 == l).count() == 4);
            if !floor_hit {
                for i in 0..16 {
                    prop_assert_eq!(!out.is_active(i / 4, i % 4), oracle.contains(&i));
                }
            }
        }

        #[test]
        fn regrow_conserves_sparsity(scores in prop::collection::vec(0.0f64..1.0, 12), grads in prop::collection::vec(0.0f64..1.0, 12), s in 0.1f64..0.6, r in 0usize..4) {
            let rows: Vec<Vec<f64>> = scores.chunks(4).map(<[f64]>::to_vec).collect();
            let grows: Vec<Vec<f64>> = grads.chunks(4).map(<[f64]>::to_vec).collect();
            let b = HeadScoreBoard { score: rows, grad: grows };
            let m = prune_heads(&b, s, &HeadMask::all_active(3, 4)).unwrap();
            let r = r.min(m.inactive_count());
            let out = regrow_heads(&b, r, &m).unwrap();
            prop_assert_eq!(out.inactive_count(), m.inactive_count());
            for l in 0..3 {
                prop_assert!(out.layer_active_count(l) >= 1);
            }
        }
    }
}
