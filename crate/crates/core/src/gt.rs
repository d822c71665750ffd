//! Graph transformer: neighbourhood attention with edge bias and random-walk
//! structural encoding, residual layer norm, feed-forward block, and K-hop
//! pooled readout.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Tensor, Var};
use crate::cohort::Topology;
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamId, ParamStore};

const LEAKY_SLOPE: f64 = 0.2;
const LN_EPS: f64 = 1e-5;
const LOG_FLOOR: f64 = 1e-12;

/// Random-walk structural encoding of one graph.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding {
    /// Averaged walk probabilities, `m × m`.
    pub walk: Tensor,
    /// `row_softmax(log(walk) / sqrt(width))`, `m × m`.
    pub encoding: Tensor,
    pub steps: usize,
}

impl PositionalEncoding {
    /// Encoding values at the edges of `topo`, as a column vector.
    pub fn at_edges(&self, topo: &Topology) -> Tensor {
        Tensor::column_vector(
            topo.edges
                .iter()
                .map(|&(i, j)| self.encoding.get(i, j))
                .collect(),
        )
    }
}

/// Degree-normalised transition matrix; an isolated node walks to itself.
pub fn transition_matrix(topo: &Topology) -> Tensor {
    let m = topo.n;
    let mut t = Tensor::zeros(m, m);
    for i in 0..m {
        let nbrs = &topo.neighbors[i];
        if nbrs.is_empty() {
            t.set(i, i, 1.0);
        } else {
            let w = 1.0 / nbrs.len() as f64;
            for &j in nbrs {
                t.set(i, j, t.get(i, j) + w);
            }
        }
    }
    t
}

pub fn random_walk_encoding(
    topo: &Topology,
    steps: usize,
    width: usize,
) -> Result<PositionalEncoding> {
    if steps == 0 {
        return Err(Error::config("random walk steps must be at least 1"));
    }
    if width == 0 {
        return Err(Error::config("encoding width must be positive"));
    }
    let step = transition_matrix(topo);
    let mut power = step.clone();
    let mut walk = step.clone();
    for _ in 1..steps {
        power = power.matmul(&step)?;
        walk.add_assign(&power);
    }
    let walk = walk.map(|x| x / steps as f64);
    let scale = 1.0 / (width as f64).sqrt();
    let mut encoding = walk.map(|p| p.max(LOG_FLOOR).ln() * scale);
    for r in 0..encoding.rows() {
        let row = encoding.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            s += *x;
        }
        row.iter_mut().for_each(|x| *x /= s);
    }
    Ok(PositionalEncoding {
        walk,
        encoding,
        steps,
    })
}

/// `hops[k][i]` lists the nodes at exact hop distance `k` from `i`.
pub fn hop_sets(topo: &Topology, max_hop: usize) -> Vec<Arc<Vec<Vec<usize>>>> {
    let m = topo.n;
    let mut hops = vec![vec![Vec::new(); m]; max_hop + 1];
    let mut dist = vec![usize::MAX; m];
    let mut queue = VecDeque::new();
    for src in 0..m {
        dist.fill(usize::MAX);
        dist[src] = 0;
        queue.clear();
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            hops[dist[u]][src].push(u);
            if dist[u] == max_hop {
                continue;
            }
            for &v in &topo.neighbors[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for level in hops.iter_mut() {
            level[src].sort_unstable();
        }
    }
    hops.into_iter().map(Arc::new).collect()
}

/// Structural data a transformer pass needs, precomputed per graph.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub topology: Topology,
    /// Random-walk encoding at each edge, `[|E|, 1]`.
    pub edge_encoding: Tensor,
    pub hops: Vec<Arc<Vec<Vec<usize>>>>,
}

impl GraphContext {
    pub fn new(topology: Topology, rw_steps: usize, width: usize, max_hop: usize) -> Result<Self> {
        let pe = random_walk_encoding(&topology, rw_steps, width)?;
        Ok(Self {
            edge_encoding: pe.at_edges(&topology),
            hops: hop_sets(&topology, max_hop),
            topology,
        })
    }
}

/// Parameters of one transformer layer. Per-head projections are stored
/// side by side in a `width × width` matrix and sliced per head.
#[derive(Clone, Debug)]
pub struct GtLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    /// Edge attribute `[2·width] → one bias per head`.
    pub edge_map: Linear,
    pub norm1: (ParamId, ParamId),
    pub norm2: (ParamId, ParamId),
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub heads: usize,
    pub width: usize,
}

fn layer_norm(b: &Bound<'_>, x: Var, (gain, bias): (ParamId, ParamId)) -> Result<Var> {
    let t = b.tape;
    let n = t.layer_norm_rows(x, LN_EPS);
    t.add(t.mul(n, b.var(gain))?, b.var(bias))
}

/// Intermediate values of a layer pass, for inspection in tests.
pub struct GtLayerTrace {
    pub output: Var,
    /// Per-head neighbourhood attention `[|E|, 1]`.
    pub attention: Vec<Var>,
}

impl GtLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "{heads} heads do not divide width {width}"
            )));
        }
        let mut norm = |which: &str| {
            (
                store.add(format!("{name}.{which}.gain"), Tensor::full(1, width, 1.0)),
                store.add(format!("{name}.{which}.bias"), Tensor::zeros(1, width)),
            )
        };
        let norm1 = norm("norm1");
        let norm2 = norm("norm2");
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), width, width, false, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, false, rng),
            value: Linear::new(store, &format!("{name}.value"), width, width, false, rng),
            output: Linear::new(store, &format!("{name}.output"), width, width, false, rng),
            edge_map: Linear::new(
                store,
                &format!("{name}.edge_map"),
                2 * width,
                heads,
                true,
                rng,
            ),
            norm1,
            norm2,
            ffn_in: Linear::new(
                store,
                &format!("{name}.ffn_in"),
                width,
                4 * width,
                true,
                rng,
            ),
            ffn_out: Linear::new(
                store,
                &format!("{name}.ffn_out"),
                4 * width,
                width,
                true,
                rng,
            ),
            heads,
            width,
        })
    }

    /// `h` is `[m, width]`, `edge_attrs` is `[|E|, 2·width]`.
    pub fn forward(
        &self,
        b: &Bound<'_>,
        h: Var,
        edge_attrs: Var,
        ctx: &GraphContext,
    ) -> Result<GtLayerTrace> {
        let t = b.tape;
        let topo = &ctx.topology;
        let dh = self.width / self.heads;
        let q = self.query.forward(b, h)?;
        let k = self.key.forward(b, h)?;
        let v = self.value.forward(b, h)?;
        let m = t.shape(h)[0];
        let mut head_out = Vec::with_capacity(self.heads);
        let mut attention = Vec::with_capacity(self.heads);
        if topo.n_edges() == 0 {
            let zero = t.constant(Tensor::zeros(m, self.width));
            return self.finish(b, h, zero, attention);
        }
        let edge_bias = self.edge_map.forward(b, edge_attrs)?;
        let enc = t.constant(ctx.edge_encoding.clone());
        for head in 0..self.heads {
            let qh = t.slice_cols(q, head * dh, dh)?;
            let kh = t.slice_cols(k, head * dh, dh)?;
            let vh = t.slice_cols(v, head * dh, dh)?;
            let qe = t.gather_rows(qh, topo.src.clone())?;
            let ke = t.gather_rows(kh, topo.dst.clone())?;
            let ve = t.gather_rows(vh, topo.dst.clone())?;
            let dot = t.scale(t.sum_rows(t.mul(qe, ke)?), 1.0 / (dh as f64).sqrt());
            let score = t.leaky_relu(t.add(dot, t.slice_cols(edge_bias, head, 1)?)?, LEAKY_SLOPE);
            let alpha = t.segment_softmax(score, topo.src.clone())?;
            let renorm = t.segment_softmax(alpha, topo.src.clone())?;
            let weight = t.add(renorm, t.mul(enc, alpha)?)?;
            let msg = t.mul(ve, weight)?;
            head_out.push(t.scatter_add_rows(msg, topo.src.clone(), m)?);
            attention.push(alpha);
        }
        let z = t.concat_cols(&head_out)?;
        let z = self.output.forward(b, z)?;
        self.finish(b, h, z, attention)
    }

    fn finish(
        &self,
        b: &Bound<'_>,
        h: Var,
        attn_out: Var,
        attention: Vec<Var>,
    ) -> Result<GtLayerTrace> {
        let t = b.tape;
        let h_bar = layer_norm(b, t.add(h, attn_out)?, self.norm1)?;
        let ff = self
            .ffn_out
            .forward(b, t.gelu(self.ffn_in.forward(b, h_bar)?))?;
        let output = layer_norm(b, t.add(h_bar, ff)?, self.norm2)?;
        Ok(GtLayerTrace { output, attention })
    }
}

/// Learnable hop-decay coefficients `γ_0..γ_K`.
#[derive(Clone, Debug)]
pub struct HopPooling {
    pub gamma: ParamId,
    pub max_hop: usize,
}

impl HopPooling {
    pub fn new(store: &mut ParamStore, name: &str, max_hop: usize) -> Self {
        let init = (0..=max_hop).map(|k| 0.5f64.powi(k as i32)).collect();
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::row_vector(init)),
            max_hop,
        }
    }

    /// `Σ_k γ_k · mean of h over nodes at exact hop distance k`.
    pub fn forward(&self, b: &Bound<'_>, h: Var, hops: &[Arc<Vec<Vec<usize>>>]) -> Result<Var> {
        let t = b.tape;
        if hops.len() < self.max_hop + 1 {
            return Err(Error::InvalidAxis {
                op: "khop_pool",
                detail: format!("{} hop levels for K = {}", hops.len(), self.max_hop),
            });
        }
        let gamma = b.var(self.gamma);
        let mut acc: Option<Var> = None;
        for (k, level) in hops.iter().take(self.max_hop + 1).enumerate() {
            let mean = t.segment_mean(h, level.clone())?;
            let term = t.mul(mean, t.slice_cols(gamma, k, 1)?)?;
            acc = Some(match acc {
                Some(a) => t.add(a, term)?,
                None => term,
            });
        }
        Ok(acc.expect("at least hop 0"))
    }
}

/// Two transformer layers, hop pooling, and a scalar head per node.
#[derive(Clone, Debug)]
pub struct GraphTransformer {
    pub layers: Vec<GtLayer>,
    pub pooling: HopPooling,
    pub head: Linear,
    pub width: usize,
}

impl GraphTransformer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        max_hop: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = (0..2)
            .map(|l| GtLayer::new(store, &format!("{name}.layer{l}"), width, heads, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            pooling: HopPooling::new(store, &format!("{name}.pool"), max_hop),
            head: Linear::new(store, &format!("{name}.head"), width, 1, true, rng),
            width,
        })
    }

    /// Per-node logits `[m, 1]`. Edge attributes are the concatenated
    /// endpoint rows of `h`, shared by both layers.
    pub fn forward(&self, b: &Bound<'_>, h: Var, ctx: &GraphContext) -> Result<Var> {
        let t = b.tape;
        let topo = &ctx.topology;
        let edge_attrs = if topo.n_edges() == 0 {
            t.constant(Tensor::zeros(0, 2 * self.width))
        } else {
            t.concat_cols(&[
                t.gather_rows(h, topo.src.clone())?,
                t.gather_rows(h, topo.dst.clone())?,
            ])?
        };
        let mut x = h;
        for layer in &self.layers {
            x = layer.forward(b, x, edge_attrs, ctx)?.output;
        }
        let pooled = self.pooling.forward(b, x, &ctx.hops)?;
        self.head.forward(b, pooled)
    }
}
