//! Gradual magnitude pruning of weight matrices with gradient regrowth.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{ceil_count, check_sparsity, PruneError, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub p_initial: f64,
    pub p_final: f64,
    pub t0: f64,
    pub steps: usize,
    pub interval: f64,
    pub regrow_fraction: f64,
    /// Regrowth stops from this epoch on.
    pub regrow_until: f64,
}

impl PruneSchedule {
    /// Defaults for a run of `epochs`: start at 10%, ramp over 60%, regrow 10%
    /// of masked entries until the last 20%.
    pub fn for_epochs(p_final: f64, epochs: usize) -> Self {
        let e = epochs as f64;
        let span = ((0.6 * e).round() as usize).max(1);
        let interval = (span as f64 / 6.0).round().max(1.0) as usize;
        Self {
            p_initial: 0.0,
            p_final,
            t0: (0.1 * e).round(),
            steps: (span / interval).max(1),
            interval: interval as f64,
            regrow_fraction: 0.1,
            regrow_until: (0.8 * e).floor(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.p_initial && self.p_initial <= self.p_final && self.p_final < 1.0) {
            return Err(PruneError::Invalid(format!(
                "need 0 <= p_initial <= p_final < 1, got {} and {}",
                self.p_initial, self.p_final
            )));
        }
        if self.steps == 0 || !(self.interval >= 1.0) {
            return Err(PruneError::Invalid("need at least one step and interval >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.regrow_fraction) {
            return Err(PruneError::Invalid("regrow fraction outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn end(&self) -> f64 {
        self.t0 + self.steps as f64 * self.interval
    }

    /// Epochs at which the mask is updated.
    pub fn is_update_epoch(&self, epoch: usize) -> bool {
        let t = epoch as f64;
        if t < self.t0 || t > self.end() + 1e-9 {
            return false;
        }
        let k = (t - self.t0) / self.interval;
        (k - k.round()).abs() < 1e-9
    }
}

/// Cubic ramp `p_f + (p_i − p_f)(1 − (t − t0)/(mΔt))³`, clamped outside the
/// window.
pub fn schedule_sparsity(t: f64, s: &PruneSchedule) -> f64 {
    let span = s.steps as f64 * s.interval;
    if t <= s.t0 {
        return s.p_initial;
    }
    if t >= s.t0 + span {
        return s.p_final;
    }
    let frac = 1.0 - (t - s.t0) / span;
    s.p_final + (s.p_initial - s.p_final) * frac * frac * frac
}

/// Number of entries a tensor of `len` entries loses at sparsity `p`.
pub fn prune_count(p: f64, len: usize) -> usize {
    ceil_count(p * len as f64).min(len)
}

fn smallest(w: &[f64], mask: &[bool], count: usize, eligible: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..w.len()).filter(|&i| eligible(i)).collect();
    order.sort_by(|&a, &b| {
        mask[a]
            .cmp(&mask[b])
            .then(w[a].abs().total_cmp(&w[b].abs()))
            .then(a.cmp(&b))
    });
    order.truncate(count);
    order
}

/// Masks the `⌈p·|W|⌉` smallest-magnitude entries. Already-masked entries
/// rank first so a rising schedule never revives them; ties go to the lower
/// flat index.
pub fn magnitude_prune(w: &[f64], mask: &[bool], p: f64) -> Result<Vec<bool>> {
    check_sparsity(p)?;
    let count = prune_count(p, w.len());
    let mut out = vec![true; w.len()];
    for i in smallest(w, mask, count, |_| true) {
        out[i] = false;
    }
    Ok(out)
}

/// Reactivates the `⌊r·#masked⌋` masked entries with the largest
/// accumulated gradient magnitude (capped at `|W| − ⌈p·|W|⌉`), then re-prunes
/// among the other entries so exactly `⌈p·|W|⌉` stay masked.
pub fn regrow_weights(w: &[f64], grads: &[f64], mask: &[bool], r: f64, p: f64) -> Result<Vec<bool>> {
    check_sparsity(p)?;
    let masked: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
    let count = prune_count(p, w.len());
    // Regrown entries stay live, so at most `|W| - count` can come back.
    let regrow = (((r * masked.len() as f64) + 1e-9).floor() as usize).min(w.len() - count);
    if regrow == 0 {
        return magnitude_prune(w, mask, p);
    }
    let mut by_grad = masked;
    by_grad.sort_by(|&a, &b| grads[b].abs().total_cmp(&grads[a].abs()).then(a.cmp(&b)));
    let mut regrown = vec![false; w.len()];
    for &i in by_grad.iter().take(regrow) {
        regrown[i] = true;
    }
    let mut out = vec![true; w.len()];
    for i in smallest(w, mask, count, |i| !regrown[i]) {
        out[i] = false;
    }
    Ok(out)
}

/// One mask per prunable weight tensor, keyed by parameter id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMasks {
    masks: BTreeMap<usize, Vec<bool>>,
}

impl WeightMasks {
    /// All-ones masks over every prunable tensor.
    pub fn dense(params: &ModelParams) -> Self {
        let layout = &params.layout;
        let masks = (0..layout.len())
            .filter(|&id| layout.kind(id).weight_prunable())
            .map(|id| (id, vec![true; layout.size(id)]))
            .collect();
        Self { masks }
    }

    pub fn from_map(masks: BTreeMap<usize, Vec<bool>>) -> Self {
        Self { masks }
    }

    pub fn mask(&self, id: usize) -> Option<&[bool]> {
        self.masks.get(&id).map(Vec::as_slice)
    }

    pub fn set(&mut self, id: usize, mask: Vec<bool>) {
        self.masks.insert(id, mask);
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.masks.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[bool])> {
        self.masks.iter().map(|(&id, m)| (id, m.as_slice()))
    }

    pub fn sparsity(&self, id: usize) -> Option<f64> {
        self.mask(id)
            .map(|m| m.iter().filter(|&&b| !b).count() as f64 / m.len().max(1) as f64)
    }

    pub fn global_sparsity(&self) -> f64 {
        let (off, total) = self.masks.values().fold((0, 0), |(o, t), m| {
            (o + m.iter().filter(|&&b| !b).count(), t + m.len())
        });
        off as f64 / total.max(1) as f64
    }

    /// Magnitude-prunes every tensor to sparsity `p`.
    pub fn prune_to(&mut self, params: &ModelParams, p: f64) -> Result<()> {
        for (id, mask) in self.masks.iter_mut() {
            *mask = magnitude_prune(params.tensor(*id).data(), mask, p)?;
        }
        Ok(())
    }

    /// Prune-and-grow on every tensor at sparsity `p`; `grads` holds the
    /// accumulated gradient per parameter id.
    pub fn regrow_to(&mut self, params: &ModelParams, grads: &BTreeMap<usize, Vec<f64>>, r: f64, p: f64) -> Result<()> {
        for (id, mask) in self.masks.iter_mut() {
            let w = params.tensor(*id).data();
            *mask = match grads.get(id) {
                Some(g) => regrow_weights(w, g, mask, r, p)?,
                None => magnitude_prune(w, mask, p)?,
            };
        }
        Ok(())
    }

    pub fn write_csv_header(&self, params: &ModelParams, out: &mut impl Write) -> std::io::Result<()> {
        write!(out, "epoch,scheduled")?;
        for id in self.ids() {
            write!(out, ",{}", params.layout.name(id))?;
        }
        writeln!(out, ",global")
    }

    pub fn write_csv_row(&self, epoch: usize, scheduled: f64, out: &mut impl Write) -> std::io::Result<()> {
        write!(out, "{epoch},{scheduled:.6}")?;
        for id in self.ids() {
            write!(out, ",{:.6}", self.sparsity(id).unwrap_or(0.0))?;
        }
        writeln!(out, ",{:.6}", self.global_sparsity())
    }
}
