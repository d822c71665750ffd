//! Per-node inclusion probabilities and Bernoulli subgraph sampling with a
//! straight-through mask.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::cohort::Topology;
use crate::error::{Error, Result};
use crate::gt::{GraphContext, GraphTransformer};
use crate::nn::{Bound, Linear, ParamStore};

/// Per-node log-likelihood terms are clamped to this floor.
pub const LOG_LIKELIHOOD_FLOOR: f64 = -1e6;

/// Default reduced width: a quarter of the input, at least 8.
pub fn default_reduced_dim(in_dim: usize) -> usize {
    (in_dim / 4).max(8)
}

#[derive(Clone, Debug)]
pub struct Sampler {
    pub reduce: Linear,
    pub transformer: GraphTransformer,
}

impl Sampler {
    pub fn new(
        store: &mut ParamStore,
        in_dim: usize,
        reduced_dim: usize,
        heads: usize,
        max_hop: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if reduced_dim == 0 {
            return Err(Error::config("reduced dimension must be positive"));
        }
        Ok(Self {
            reduce: Linear::new(store, "sampler.reduce", in_dim, reduced_dim, true, rng),
            transformer: GraphTransformer::new(
                store,
                "sampler.gt",
                reduced_dim,
                heads,
                max_hop,
                rng,
            )?,
        })
    }

    pub fn reduced_dim(&self) -> usize {
        self.reduce.out_dim
    }

    /// Inclusion probabilities `[m, 1]` for node features `x` (`[m, d]`).
    pub fn node_probabilities(&self, b: &Bound<'_>, x: Var, ctx: &GraphContext) -> Result<Var> {
        let reduced = self.reduce.forward(b, x)?;
        let logits = self.transformer.forward(b, reduced, ctx)?;
        Ok(b.tape.sigmoid(logits))
    }
}

/// A causal / complement split of one graph.
pub struct SubgraphSample {
    pub probs: Var,
    /// Hard draw through the straight-through mask, or `probs` itself.
    pub mask: Var,
    pub causal_features: Var,
    pub complement_features: Var,
    pub causal_topology: Topology,
    pub complement_topology: Topology,
    /// The Bernoulli draw in training mode.
    pub selected: Option<Vec<bool>>,
}

impl SubgraphSample {
    pub fn is_empty_selection(&self) -> bool {
        matches!(&self.selected, Some(s) if s.iter().all(|&b| !b))
    }
}

/// Independent Bernoulli draw per node.
pub fn draw_mask(probs: &[f64], rng: &mut impl Rng) -> Vec<bool> {
    probs.iter().map(|&p| rng.random::<f64>() < p).collect()
}

fn probs_column(tape: &Tape, probs: Var) -> Vec<f64> {
    tape.with_value(probs, |t| t.data().to_vec())
}

/// Training-mode split from a fresh Bernoulli draw.
pub fn sample_train(
    tape: &Tape,
    x: Var,
    probs: Var,
    topo: &Topology,
    rng: &mut impl Rng,
) -> Result<SubgraphSample> {
    let draw = draw_mask(&probs_column(tape, probs), rng);
    sample_with_draw(tape, x, probs, topo, draw)
}

/// Training-mode split for a given draw: features are multiplied by the
/// straight-through mask and edges are kept only between selected nodes
/// (the complement symmetrically).
pub fn sample_with_draw(
    tape: &Tape,
    x: Var,
    probs: Var,
    topo: &Topology,
    draw: Vec<bool>,
) -> Result<SubgraphSample> {
    let mask = tape.ste_mask(probs, &draw)?;
    split_with_mask(tape, x, probs, mask, topo, draw)
}

/// Split with a caller-built mask variable whose value equals `draw`.
pub fn split_with_mask(
    tape: &Tape,
    x: Var,
    probs: Var,
    mask: Var,
    topo: &Topology,
    draw: Vec<bool>,
) -> Result<SubgraphSample> {
    let (causal_features, complement_features) = split_features(tape, x, mask)?;
    let unselected: Vec<bool> = draw.iter().map(|&b| !b).collect();
    Ok(SubgraphSample {
        probs,
        mask,
        causal_features,
        complement_features,
        causal_topology: topo.restricted(&draw),
        complement_topology: topo.restricted(&unselected),
        selected: Some(draw),
    })
}

/// Evaluation-mode split: probabilities act as a soft mask, all edges kept.
pub fn mask_eval(tape: &Tape, x: Var, probs: Var, topo: &Topology) -> Result<SubgraphSample> {
    let (causal_features, complement_features) = split_features(tape, x, probs)?;
    Ok(SubgraphSample {
        probs,
        mask: probs,
        causal_features,
        complement_features,
        causal_topology: topo.clone(),
        complement_topology: topo.clone(),
        selected: None,
    })
}

fn split_features(tape: &Tape, x: Var, mask: Var) -> Result<(Var, Var)> {
    if tape.shape(mask) != [tape.shape(x)[0], 1] {
        return Err(Error::Shape {
            op: "subgraph_mask",
            left: tape.shape(x),
            right: tape.shape(mask),
        });
    }
    let keep = tape.add_scalar(tape.neg(mask), 1.0);
    Ok((tape.mul(x, mask)?, tape.mul(x, keep)?))
}

/// `Σ_j o_j ln p_j + (1 − o_j) ln(1 − p_j)`, each term floored.
pub fn log_likelihood(probs: &[f64], mask: &[bool]) -> Result<f64> {
    if probs.len() != mask.len() {
        return Err(Error::invalid(format!(
            "likelihood: {} probabilities for {} mask entries",
            probs.len(),
            mask.len()
        )));
    }
    Ok(probs
        .iter()
        .zip(mask)
        .map(|(&p, &o)| {
            let q = if o { p } else { 1.0 - p };
            q.ln().max(LOG_LIKELIHOOD_FLOOR)
        })
        .sum())
}

/// Probability of drawing exactly `mask` under independent inclusion.
pub fn likelihood(probs: &[f64], mask: &[bool]) -> Result<f64> {
    Ok(log_likelihood(probs, mask)?.exp())
}
