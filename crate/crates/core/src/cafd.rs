//! Cross-scale feature disentangling: cluster slide thumbnails into
//! preparation-style groups, estimate each group's mean feature shift, and
//! subtract the assignment-weighted shift from every patch feature.

use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Adam, Bound, Linear, ParamStore};

/// Clusters whose total assignment mass falls below this are degenerate.
pub const DEGENERATE_MASS: f64 = 1e-12;
const CENTER_EPS: f64 = 1e-12;

/// Hyperparameters of clustering and bias estimation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CafdSettings {
    pub k_max: usize,
    pub gumbel_temperature: f64,
    pub kmeans_sharpness: f64,
    pub kmeans_iters: usize,
    pub threshold: f64,
    /// Patches sampled per slide when estimating slide means.
    pub sample_count: usize,
    /// Weight of the weight-entropy penalty when fitting cluster logits.
    pub entropy_weight: f64,
    pub fit_steps: usize,
    pub fit_lr: f64,
}

impl Default for CafdSettings {
    fn default() -> Self {
        Self {
            k_max: 6,
            gumbel_temperature: 3.0,
            kmeans_sharpness: 10.0,
            kmeans_iters: 10,
            threshold: 0.1,
            sample_count: 64,
            entropy_weight: 0.5,
            fit_steps: 100,
            fit_lr: 0.1,
        }
    }
}

/// Thumbnail projection, cluster logits and the current centers.
#[derive(Clone, Debug)]
pub struct ClusterModel {
    pub proj: Linear,
    /// Unconstrained logits; the positive cluster scores are their exponentials.
    pub cluster_logits: Vec<f64>,
    /// `k_effective × d_t`.
    pub centers: Tensor,
    pub gumbel_temperature: f64,
    pub kmeans_sharpness: f64,
    pub k_max: usize,
    pub k_effective: usize,
    pub threshold: f64,
    /// Adam moments of the logit fit, carried across refreshes.
    fit_state: Option<(u64, Tensor, Tensor)>,
    /// Mixture components from the previous refresh; they seed the next one
    /// so each logit keeps referring to the same region of embedding space.
    components: Option<Tensor>,
}

impl ClusterModel {
    pub fn new(
        store: &mut ParamStore,
        thumb_dim: usize,
        embed_dim: usize,
        settings: &CafdSettings,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if settings.k_max == 0 {
            return Err(Error::config("k_max must be at least 1"));
        }
        if !(settings.gumbel_temperature > 0.0) || !(settings.kmeans_sharpness > 0.0) {
            return Err(Error::config("cluster temperatures must be positive"));
        }
        Ok(Self {
            proj: Linear::new(store, "cafd.proj", thumb_dim, embed_dim, true, rng),
            cluster_logits: vec![0.0; settings.k_max],
            centers: Tensor::zeros(1, embed_dim),
            gumbel_temperature: settings.gumbel_temperature,
            kmeans_sharpness: settings.kmeans_sharpness,
            k_max: settings.k_max,
            k_effective: 1,
            threshold: settings.threshold,
            fit_state: None,
            components: None,
        })
    }

    pub fn fit_state(&self) -> Option<&(u64, Tensor, Tensor)> {
        self.fit_state.as_ref()
    }

    pub fn set_fit_state(&mut self, state: Option<(u64, Tensor, Tensor)>) {
        self.fit_state = state;
    }

    pub fn components(&self) -> Option<&Tensor> {
        self.components.as_ref()
    }

    pub fn set_components(&mut self, components: Option<Tensor>) {
        self.components = components;
    }
}

/// Thumbnail embeddings `[n, d_t]` from thumbnails `[n, d_f]`.
pub fn project_thumbnail(b: &Bound<'_>, proj: &Linear, f: Var) -> Result<Var> {
    let shape = b.tape.shape(f);
    if shape[1] != proj.in_dim {
        return Err(Error::Shape {
            op: "project_thumbnail",
            left: shape,
            right: [proj.in_dim, proj.out_dim],
        });
    }
    proj.forward(b, f)
}

/// Standard Gumbel draws.
pub fn gumbel_noise(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..k)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// `softmax((logits + noise) / temperature)`.
pub fn gumbel_softmax(logits: &[f64], noise: &[f64], temperature: f64) -> Vec<f64> {
    let x: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(l, g)| (l + g) / temperature)
        .collect();
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Gumbel-softmax weights and the number above `threshold` (at least 1).
pub fn effective_cluster_count(
    logits: &[f64],
    temperature: f64,
    threshold: f64,
    rng: &mut impl Rng,
) -> (Vec<f64>, usize) {
    let noise = gumbel_noise(logits.len(), rng);
    let w = gumbel_softmax(logits, &noise, temperature);
    let k = w.iter().filter(|&&x| x > threshold).count().max(1);
    (w, k)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// K-means++ seeding: first center uniform, then proportional to squared
/// distance from the nearest chosen center.
pub fn kmeans_pp_seed(points: &Tensor, k: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let n = points.rows();
    if k == 0 || n < k {
        return Err(Error::invalid(format!(
            "cannot seed {k} centers from {n} points"
        )));
    }
    let mut chosen = vec![rng.random_range(0..n)];
    let mut best: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in best.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            // every point coincides with a center: take the first unchosen one
            (0..n).find(|i| !chosen.contains(i)).expect("n >= k")
        };
        chosen.push(next);
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    Ok(points.select_rows(&chosen))
}

/// Squared Euclidean distances `[n, k]` between rows of `t` and `c`.
pub fn squared_distances(tape: &Tape, t: Var, c: Var) -> Result<Var> {
    let tn = tape.sum_rows(tape.square(t));
    let cn = tape.transpose(tape.sum_rows(tape.square(c)));
    let cross = tape.matmul(t, tape.transpose(c))?;
    tape.add(tape.sub(tn, tape.scale(cross, 2.0))?, cn)
}

/// `softmax(−sharpness · ‖t − c‖²)` over centers.
pub fn assign(tape: &Tape, t: Var, centers: Var, sharpness: f64) -> Result<Var> {
    let d = squared_distances(tape, t, centers)?;
    Ok(tape.softmax_rows(tape.scale(d, -sharpness)))
}

/// Soft K-means result on the tape.
pub struct SoftKMeans {
    /// `[n, k]`, rows sum to one.
    pub assignments: Var,
    /// `[k, d_t]` centers after the last update.
    pub centers: Var,
}

/// `iters` rounds of (assign, weighted-mean update) from `init`, followed by a
/// final assignment to the updated centers. Differentiable in `t_all`.
pub fn soft_kmeans(
    tape: &Tape,
    t_all: Var,
    init: &Tensor,
    sharpness: f64,
    iters: usize,
) -> Result<SoftKMeans> {
    let n = tape.shape(t_all)[0];
    let k = init.rows();
    if k == 0 || n < k {
        return Err(Error::invalid(format!(
            "soft k-means: {n} points for {k} clusters"
        )));
    }
    if iters == 0 {
        return Err(Error::config("soft k-means needs at least one iteration"));
    }
    let mut centers = tape.constant(init.clone());
    for _ in 0..iters {
        let p = assign(tape, t_all, centers, sharpness)?;
        let num = tape.matmul(tape.transpose(p), t_all)?;
        let mass = tape.add_scalar(tape.transpose(tape.sum_cols(p)), CENTER_EPS);
        centers = tape.div(num, mass)?;
    }
    Ok(SoftKMeans {
        assignments: assign(tape, t_all, centers, sharpness)?,
        centers,
    })
}

/// Per-slide mean over at most `n` patches drawn without replacement.
pub fn sample_slide_means(slides: &[Tensor], n: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let d = slides
        .first()
        .map(Tensor::cols)
        .ok_or_else(|| Error::invalid("no slides"))?;
    if n == 0 {
        return Err(Error::config("sample count must be positive"));
    }
    let mut out = Tensor::zeros(slides.len(), d);
    for (i, s) in slides.iter().enumerate() {
        let m = s.rows();
        if m == 0 {
            return Err(Error::invalid(format!("slide {i} has no patches")));
        }
        let rows: Vec<usize> = if n >= m {
            (0..m).collect()
        } else {
            let mut v = index::sample(rng, m, n).into_vec();
            v.sort_unstable();
            v
        };
        let w = 1.0 / rows.len() as f64;
        let dst = out.row_mut(i);
        for &r in &rows {
            for (o, x) in dst.iter_mut().zip(s.row(r)) {
                *o += x;
            }
        }
        dst.iter_mut().for_each(|o| *o *= w);
    }
    Ok(out)
}

/// Group means, global mean and their differences.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasModel {
    /// `k × d`, row k is `cluster_means[k] − global_mean` (zero if degenerate).
    pub cluster_bias: Tensor,
    /// `1 × d`.
    pub global_mean: Tensor,
    /// `k × d`.
    pub cluster_means: Tensor,
    pub sample_count: usize,
    pub degenerate: Vec<bool>,
}

/// Tape values of a bias estimate.
pub struct BiasVars {
    pub bias: Var,
    pub cluster_means: Var,
    pub global_mean: Var,
    pub degenerate: Vec<bool>,
}

/// Assignment-weighted group means of the slide means `[n, d]` with
/// assignments `p` `[n, k]`, minus the unweighted global mean.
pub fn estimate_bias_vars(tape: &Tape, p: Var, slide_means: Var) -> Result<BiasVars> {
    let n = tape.shape(p)[0];
    if tape.shape(slide_means)[0] != n {
        return Err(Error::Shape {
            op: "estimate_bias",
            left: tape.shape(p),
            right: tape.shape(slide_means),
        });
    }
    let mass_row = tape.sum_cols(p);
    let degenerate: Vec<bool> = tape.with_value(mass_row, |t| {
        t.data().iter().map(|&m| m < DEGENERATE_MASS).collect()
    });
    let flag = Tensor::column_vector(degenerate.iter().map(|&d| d as u8 as f64).collect());
    let keep = Tensor::column_vector(degenerate.iter().map(|&d| (!d) as u8 as f64).collect());
    let global_mean = tape.scale(tape.sum_cols(slide_means), 1.0 / n as f64);
    let num = tape.matmul(tape.transpose(p), slide_means)?;
    let mass = tape.add(tape.transpose(mass_row), tape.constant(flag.clone()))?;
    let mut cluster_means = tape.div(num, mass)?;
    if degenerate.iter().any(|&d| d) {
        let keep_v = tape.constant(keep.clone());
        let fill = tape.mul(tape.constant(flag), global_mean)?;
        cluster_means = tape.add(tape.mul(cluster_means, keep_v)?, fill)?;
    }
    let bias = tape.sub(cluster_means, global_mean)?;
    Ok(BiasVars {
        bias,
        cluster_means,
        global_mean,
        degenerate,
    })
}

pub fn estimate_bias(p: &Tensor, slide_means: &Tensor, sample_count: usize) -> Result<BiasModel> {
    let tape = Tape::new();
    let vars = estimate_bias_vars(
        &tape,
        tape.constant(p.clone()),
        tape.constant(slide_means.clone()),
    )?;
    Ok(BiasModel {
        cluster_bias: tape.value(vars.bias),
        global_mean: tape.value(vars.global_mean),
        cluster_means: tape.value(vars.cluster_means),
        sample_count,
        degenerate: vars.degenerate,
    })
}

/// `v_j − Σ_k p_k · bias_k` for every patch row `v_j`.
pub fn disentangle(tape: &Tape, v: Var, p: Var, bias: Var) -> Result<Var> {
    let shift = tape.matmul(p, bias)?;
    let [m, d] = tape.shape(v);
    if tape.shape(shift) != [1, d] {
        return Err(Error::Shape {
            op: "disentangle",
            left: [m, d],
            right: tape.shape(shift),
        });
    }
    tape.sub(v, shift)
}

/// Outcome of a per-epoch cluster refresh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterRefresh {
    pub weights: Vec<f64>,
    pub k_effective: usize,
    /// Final value of the logit-fit objective.
    pub objective: f64,
}

/// Re-estimate the number of clusters from detached thumbnail embeddings.
///
/// Mixture components are placed by soft K-means from a K-means++ seeding
/// with `k_max` centers. The cluster logits are then fitted through the
/// Gumbel-softmax weights to the mixture likelihood of the embeddings plus an
/// entropy penalty, so that redundant components lose their weight. One
/// fresh draw then fixes the effective count, and that many centers are
/// seeded for the epoch.
pub fn refresh_clusters(
    model: &mut ClusterModel,
    embeddings: &Tensor,
    settings: &CafdSettings,
    rng: &mut impl Rng,
) -> Result<ClusterRefresh> {
    let n = embeddings.rows();
    let k = model.k_max.min(n);
    let mut objective = f64::NAN;
    let mut components = None;
    if k > 1 {
        let seeds = match model.components.take() {
            Some(c) if c.rows() == k && c.cols() == embeddings.cols() => c,
            _ => kmeans_pp_seed(embeddings, k, rng)?,
        };
        let comps = {
            let tape = Tape::new();
            let t = tape.constant(embeddings.clone());
            let km = soft_kmeans(
                &tape,
                t,
                &seeds,
                model.kmeans_sharpness,
                settings.kmeans_iters,
            )?;
            tape.value(km.centers)
        };
        let sq = {
            let tape = Tape::new();
            let d = squared_distances(
                &tape,
                tape.constant(embeddings.clone()),
                tape.constant(comps.clone()),
            )?;
            tape.value(d).map(|x| x.max(0.0))
        };
        // isotropic Gaussian components whose variance is the mean spread
        // of points around their nearest component
        let nearest: f64 = (0..n)
            .map(|i| sq.row(i).iter().cloned().fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / n as f64;
        let variance = (nearest / embeddings.cols() as f64).max(1e-12);
        let dist = sq.map(|x| -x / (2.0 * variance));
        let row_max = Tensor::column_vector(
            (0..n)
                .map(|i| {
                    dist.row(i)
                        .iter()
                        .cloned()
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect(),
        );

        let mut store = ParamStore::new();
        let id = store.add(
            "logits",
            Tensor::row_vector(model.cluster_logits[..k].to_vec()),
        );
        let mut opt = Adam::new(&store, settings.fit_lr, 0.9, 0.999, 1e-8);
        if let Some((step, m, v)) = model.fit_state.take() {
            if m.cols() == k {
                opt.restore(step, vec![m], vec![v])?;
            }
        }
        let all_k = Arc::new(vec![(0..k).collect::<Vec<_>>()]);
        for _ in 0..settings.fit_steps {
            let tape = Tape::new();
            let b = store.bind(&tape);
            let noise = tape.constant(Tensor::row_vector(gumbel_noise(k, rng)));
            let x = tape.scale(tape.add(b.var(id), noise)?, 1.0 / model.gumbel_temperature);
            let x_col = tape.transpose(x);
            let log_w =
                tape.transpose(tape.sub(x_col, tape.log_sum_exp_sets(x_col, all_k.clone())?)?);
            let w = tape.exp(log_w);
            // mixture log-likelihood per point, shifted by a constant row max
            let a = tape.add(tape.constant(dist.clone()), log_w)?;
            let shifted = tape.sub(a, tape.constant(row_max.clone()))?;
            let ll = tape.log(tape.sum_rows(tape.exp(shifted)));
            let nll = tape.neg(tape.mean(ll));
            let entropy = tape.neg(tape.sum(tape.mul(w, log_w)?));
            let obj = tape.add(nll, tape.scale(entropy, settings.entropy_weight))?;
            objective = tape.item(obj);
            if !objective.is_finite() {
                return Err(Error::NonFinite("cluster logit fit".into()));
            }
            let g = tape.backward(obj)?;
            store.accumulate(&b, &g);
            opt.step(&mut store);
            store.zero_grad();
        }
        model.cluster_logits[..k].copy_from_slice(store.get(id).data());
        let (m, v) = opt.moments();
        model.fit_state = Some((opt.steps(), m[0].clone(), v[0].clone()));
        components = Some(comps);
    }
    let (weights, count) = effective_cluster_count(
        &model.cluster_logits[..k.max(1)],
        model.gumbel_temperature,
        model.threshold,
        rng,
    );
    let k_eff = count.min(n).max(1);
    model.k_effective = k_eff;
    model.centers = match &components {
        // the surviving components, strongest first
        Some(comps) => {
            let mut order: Vec<usize> = (0..weights.len()).collect();
            order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
            let rows: Vec<Vec<f64>> = order[..k_eff]
                .iter()
                .map(|&j| comps.row(j).to_vec())
                .collect();
            Tensor::from_rows(&rows)?
        }
        None => kmeans_pp_seed(embeddings, k_eff, rng)?,
    };
    model.components = components;
    Ok(ClusterRefresh {
        weights,
        k_effective: k_eff,
        objective,
    })
}
