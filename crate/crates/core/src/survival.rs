//! Slide-level backbone, the joint objective's loss terms, and survival
//! metrics (C-index, Kaplan-Meier, log-rank).

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::autodiff::{Tape, Tensor, Var};
use crate::cohort::{SurvivalLabel, Topology};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamStore};

/// Graph feature learner, gated pooling aggregator and linear risk head.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub input: Linear,
    pub layers: Vec<(Linear, Linear)>,
    pub gate_tanh: Linear,
    pub gate_sigmoid: Linear,
    pub gate_score: Linear,
    pub risk: Linear,
    pub hidden: usize,
}

pub struct BackboneOutput {
    /// Slide embedding `[1, hidden]`.
    pub embedding: Var,
    /// Log-risk `[1, 1]`.
    pub risk: Var,
    /// Per-node pooling gate `[m, 1]`.
    pub gates: Var,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let input = Linear::new(store, "backbone.input", in_dim, hidden, false, rng);
        let layers = (0..2)
            .map(|l| {
                (
                    Linear::new(
                        store,
                        &format!("backbone.mp{l}.self"),
                        hidden,
                        hidden,
                        false,
                        rng,
                    ),
                    Linear::new(
                        store,
                        &format!("backbone.mp{l}.nbr"),
                        hidden,
                        hidden,
                        false,
                        rng,
                    ),
                )
            })
            .collect();
        let attn = hidden.max(2) / 2;
        Self {
            input,
            layers,
            gate_tanh: Linear::new(store, "backbone.gate.tanh", hidden, attn, false, rng),
            gate_sigmoid: Linear::new(store, "backbone.gate.sigmoid", hidden, attn, false, rng),
            gate_score: Linear::new(store, "backbone.gate.score", attn, 1, true, rng),
            risk: Linear::new(store, "backbone.risk", hidden, 1, true, rng),
            hidden,
        }
    }

    /// `x` is `[m, d]`; message passing follows `topo`.
    pub fn forward(&self, b: &Bound<'_>, x: Var, topo: &Topology) -> Result<BackboneOutput> {
        let t = b.tape;
        let mut h = self.input.forward(b, x)?;
        for (w_self, w_nbr) in &self.layers {
            let agg = t.segment_mean(h, topo.neighbors.clone())?;
            let upd = t.add(w_self.forward(b, h)?, w_nbr.forward(b, agg)?)?;
            h = t.add(h, t.gelu(upd))?;
        }
        let a = t.tanh(self.gate_tanh.forward(b, h)?);
        let g = t.sigmoid(self.gate_sigmoid.forward(b, h)?);
        let score = self.gate_score.forward(b, t.mul(a, g)?)?;
        let gates = t.sigmoid(score);
        let weighted = t.mul(h, gates)?;
        let m = t.shape(weighted)[0];
        let embedding = t.scale(t.sum_cols(weighted), 1.0 / m as f64);
        let risk = self.risk.forward(b, embedding)?;
        Ok(BackboneOutput {
            embedding,
            risk,
            gates,
        })
    }
}

/// Weights of the auxiliary loss terms and the contrastive temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_mse: f64,
    pub lambda_ct: f64,
    pub lambda_ratio: f64,
    pub nu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mse: 0.1,
            lambda_ct: 0.1,
            lambda_ratio: 0.1,
            nu: 0.5,
        }
    }
}

/// Negative Cox partial log-likelihood of `risks` (`[n, 1]`), summed over
/// uncensored samples with risk sets `{j : t_j ≥ t_i}` inside the batch.
pub fn cox_loss(tape: &Tape, risks: Var, labels: &[SurvivalLabel]) -> Result<Var> {
    let shape = tape.shape(risks);
    if shape != [labels.len(), 1] || labels.is_empty() {
        return Err(Error::Shape {
            op: "cox_loss",
            left: shape,
            right: [labels.len(), 1],
        });
    }
    if !tape.with_value(risks, Tensor::is_finite) {
        return Err(Error::NonFinite("cox_loss risks".into()));
    }
    let events: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].event).collect();
    if events.is_empty() {
        log::warn!("cox loss: batch has no uncensored samples, loss is 0");
        return Ok(tape.scale(tape.sum(risks), 0.0));
    }
    let sets: Vec<Vec<usize>> = events
        .iter()
        .map(|&i| {
            (0..labels.len())
                .filter(|&j| labels[j].time >= labels[i].time)
                .collect()
        })
        .collect();
    let lse = tape.log_sum_exp_sets(risks, Arc::new(sets))?;
    let own = tape.gather_rows(risks, Arc::new(events))?;
    Ok(tape.sum(tape.sub(lse, own)?))
}

/// Numeric Cox loss.
pub fn cox_loss_value(risks: &[f64], labels: &[SurvivalLabel]) -> Result<f64> {
    let tape = Tape::new();
    let r = tape.constant(Tensor::column_vector(risks.to_vec()));
    let l = cox_loss(&tape, r, labels)?;
    Ok(tape.item(l))
}

/// Mean over slides of the mean squared difference between node
/// probabilities on the disentangled and the raw graph.
pub fn mse_disentangle_loss(tape: &Tape, probs: &[Var], probs_raw: &[Var]) -> Result<Var> {
    if probs.len() != probs_raw.len() || probs.is_empty() {
        return Err(Error::invalid(format!(
            "mse loss needs matching non-empty slide lists, got {} and {}",
            probs.len(),
            probs_raw.len()
        )));
    }
    let mut per_slide = Vec::with_capacity(probs.len());
    for (&p, &q) in probs.iter().zip(probs_raw) {
        if tape.shape(p) != tape.shape(q) {
            return Err(Error::Shape {
                op: "mse_disentangle_loss",
                left: tape.shape(p),
                right: tape.shape(q),
            });
        }
        per_slide.push(tape.mean(tape.square(tape.sub(p, q)?)));
    }
    Ok(tape.mean(tape.concat_rows(&per_slide)?))
}

/// Contrastive term on slide embeddings `[n, h]`. Returns the loss and the
/// number of similarity pairs that involved a zero-norm embedding.
pub fn contrastive_loss(
    tape: &Tape,
    z_full: Var,
    z_causal: Var,
    z_comp: Var,
    nu: f64,
) -> Result<(Var, usize)> {
    if !(nu > 0.0) {
        return Err(Error::config(format!(
            "contrastive temperature must be positive, got {nu}"
        )));
    }
    let zero_norm = |v: Var| {
        tape.with_value(v, |t| {
            (0..t.rows())
                .filter(|&r| t.row(r).iter().all(|&x| x == 0.0))
                .count()
        })
    };
    let degenerate = zero_norm(z_causal) + zero_norm(z_comp) + 2 * zero_norm(z_full);
    let u = tape.scale(tape.cosine_rows(z_full, z_causal)?, 1.0 / nu);
    let v = tape.scale(tape.cosine_rows(z_full, z_comp)?, 1.0 / nu);
    let n = tape.shape(u)[0];
    let stacked = tape.concat_rows(&[u, v])?;
    let sets = Arc::new((0..n).map(|i| vec![i, n + i]).collect());
    let lse = tape.log_sum_exp_sets(stacked, sets)?;
    Ok((tape.mean(tape.sub(lse, u)?), degenerate))
}

/// `(mean over slides of Σ mask / m)²`; masks are column vectors.
pub fn ratio_loss(tape: &Tape, masks: &[Var]) -> Result<Var> {
    if masks.is_empty() {
        return Err(Error::invalid("ratio loss needs at least one mask"));
    }
    let ratios: Vec<Var> = masks.iter().map(|&m| tape.mean(m)).collect();
    Ok(tape.square(tape.mean(tape.concat_rows(&ratios)?)))
}

/// The five objective terms, in the order they enter the total.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cox_causal: Var,
    pub cox_full: Var,
    pub mse: Var,
    pub contrastive: Var,
    pub ratio: Var,
}

/// `cox_causal + cox_full + λ1·mse + λ2·contrastive + λ3·ratio`.
pub fn total_loss(tape: &Tape, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    let mut acc = tape.add(terms.cox_causal, terms.cox_full)?;
    acc = tape.add(acc, tape.scale(terms.mse, w.lambda_mse))?;
    acc = tape.add(acc, tape.scale(terms.contrastive, w.lambda_ct))?;
    tape.add(acc, tape.scale(terms.ratio, w.lambda_ratio))
}

/// Harrell's concordance. `None` when no pair is comparable.
pub fn c_index(risks: &[f64], labels: &[SurvivalLabel]) -> Option<f64> {
    assert_eq!(risks.len(), labels.len(), "one risk per label");
    let mut concordant = 0.0;
    let mut comparable = 0usize;
    for i in 0..labels.len() {
        if !labels[i].event {
            continue;
        }
        for j in 0..labels.len() {
            if i == j {
                continue;
            }
            let (ti, tj) = (labels[i].time, labels[j].time);
            // i is the shorter survivor: earlier event, or a tie where only i had the event
            if ti < tj || (ti == tj && !labels[j].event) {
                comparable += 1;
                if risks[i] > risks[j] {
                    concordant += 1.0;
                } else if risks[i] == risks[j] {
                    concordant += 0.5;
                }
            }
        }
    }
    (comparable > 0).then(|| concordant / comparable as f64)
}

/// Product-limit survival estimate of one group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub group: usize,
    /// Distinct event times, ascending.
    pub times: Vec<f64>,
    /// Survival just after each time in `times`.
    pub survival: Vec<f64>,
}

impl KmCurve {
    /// Survival at time `t` (right-continuous step function).
    pub fn at(&self, t: f64) -> f64 {
        match self.times.iter().rposition(|&x| x <= t) {
            Some(k) => self.survival[k],
            None => 1.0,
        }
    }
}

/// One curve per distinct group id, ordered by group id.
pub fn km_curve(labels: &[SurvivalLabel], groups: &[usize]) -> Result<Vec<KmCurve>> {
    if labels.len() != groups.len() {
        return Err(Error::invalid("km_curve: one group id per label"));
    }
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut curves = Vec::with_capacity(ids.len());
    for g in ids {
        let mut members: Vec<SurvivalLabel> = labels
            .iter()
            .zip(groups)
            .filter(|(_, &gg)| gg == g)
            .map(|(l, _)| *l)
            .collect();
        members.sort_by(|a, b| a.time.total_cmp(&b.time));
        let mut at_risk = members.len() as f64;
        let mut s = 1.0;
        let (mut times, mut survival) = (Vec::new(), Vec::new());
        let mut k = 0;
        while k < members.len() {
            let t = members[k].time;
            let (mut deaths, mut leaving) = (0.0, 0.0);
            while k < members.len() && members[k].time == t {
                deaths += members[k].event as u8 as f64;
                leaving += 1.0;
                k += 1;
            }
            if deaths > 0.0 {
                s *= 1.0 - deaths / at_risk;
                times.push(t);
                survival.push(s);
            }
            at_risk -= leaving;
        }
        curves.push(KmCurve {
            group: g,
            times,
            survival,
        });
    }
    Ok(curves)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-group log-rank test; `in_first[i]` selects the group of subject `i`.
pub fn log_rank_test(labels: &[SurvivalLabel], in_first: &[bool]) -> Result<LogRank> {
    if labels.len() != in_first.len() {
        return Err(Error::invalid("log_rank_test: one group flag per label"));
    }
    let n1 = in_first.iter().filter(|&&b| b).count();
    if n1 == 0 || n1 == labels.len() {
        return Err(Error::invalid(
            "log_rank_test: both groups must be non-empty",
        ));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| labels[a].time.total_cmp(&labels[b].time));
    let (mut at1, mut at) = (n1 as f64, labels.len() as f64);
    let (mut obs_minus_exp, mut var) = (0.0, 0.0);
    let mut k = 0;
    while k < order.len() {
        let t = labels[order[k]].time;
        let (mut d, mut d1, mut leave, mut leave1) = (0.0, 0.0, 0.0, 0.0);
        while k < order.len() && labels[order[k]].time == t {
            let i = order[k];
            if labels[i].event {
                d += 1.0;
                if in_first[i] {
                    d1 += 1.0;
                }
            }
            leave += 1.0;
            if in_first[i] {
                leave1 += 1.0;
            }
            k += 1;
        }
        if d > 0.0 {
            obs_minus_exp += d1 - d * at1 / at;
            if at > 1.0 {
                var += d * (at1 / at) * (1.0 - at1 / at) * (at - d) / (at - 1.0);
            }
        }
        at -= leave;
        at1 -= leave1;
    }
    if var <= 0.0 {
        return Ok(LogRank {
            statistic: 0.0,
            p_value: 1.0,
        });
    }
    let statistic = obs_minus_exp * obs_minus_exp / var;
    let chi = ChiSquared::new(1.0).expect("one degree of freedom");
    Ok(LogRank {
        statistic,
        p_value: chi.sf(statistic),
    })
}

/// Area under the ROC curve of `scores` against binary `labels`, with tied
/// scores counted as half. `None` when either class is absent.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // midranks over tie groups
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < order.len() {
        let mut end = k;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[k]] {
            end += 1;
        }
        let mid = (k + end) as f64 / 2.0 + 1.0;
        for &i in &order[k..=end] {
            if labels[i] {
                rank_sum += mid;
            }
        }
        k = end + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// `true` marks the high-risk group: risk strictly above the training median.
pub fn stratify_by_median(train_risks: &[f64], test_risks: &[f64]) -> Result<Vec<bool>> {
    let m = median(train_risks).ok_or_else(|| Error::invalid("training risks are empty"))?;
    Ok(stratify_by_threshold(m, test_risks))
}

pub fn stratify_by_threshold(threshold: f64, risks: &[f64]) -> Vec<bool> {
    risks.iter().map(|&r| r > threshold).collect()
}
