//! Finite-difference audit of every differentiable component.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, Tape, Tensor, Var};
use crate::cafd;
use crate::cohort::{
    build_knn_graph, generate_synthetic_cohort, Cohort, CohortConfig, SurvivalLabel, Topology,
};
use crate::error::{Error, Result};
use crate::gt::{GraphContext, GraphTransformer};
use crate::nn::{Bound, ParamStore};
use crate::rng::{substream, tags};
use crate::sampler::{self, Sampler};
use crate::survival::{self, Backbone};
use crate::trainer::{
    batch_loss, prepare, CafdBatchInput, MaskSource, Model, Phase, PreparedSlide, TrainConfig,
};

/// Largest accepted relative error.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Tiny,
    Small,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Scale::Tiny),
            "small" => Ok(Scale::Small),
            other => Err(Error::config(format!(
                "unknown scale {other:?} (expected tiny or small)"
            ))),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Tiny => "tiny",
            Scale::Small => "small",
        })
    }
}

/// Outcome of one module's check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleCheck {
    pub module: String,
    pub max_rel_error: f64,
    /// Number of perturbed coordinates.
    pub coordinates: usize,
    /// Worst error per input tensor, named.
    pub per_input: Vec<(String, f64)>,
}

impl ModuleCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRADIENT_TOLERANCE
    }
}

struct Dims {
    slides: usize,
    patches: (usize, usize),
    feature_dim: usize,
    thumbnail_dim: usize,
    hidden: usize,
    reduced: usize,
    embed: usize,
}

fn dims(scale: Scale) -> Dims {
    match scale {
        Scale::Tiny => Dims {
            slides: 4,
            patches: (8, 12),
            feature_dim: 6,
            thumbnail_dim: 4,
            hidden: 4,
            reduced: 4,
            embed: 3,
        },
        Scale::Small => Dims {
            slides: 6,
            patches: (12, 20),
            feature_dim: 8,
            thumbnail_dim: 6,
            hidden: 8,
            reduced: 6,
            embed: 4,
        },
    }
}

/// The cohort and training config used by the audit at a given scale.
pub fn audit_setup(scale: Scale, seed: u64) -> Result<(Cohort, TrainConfig)> {
    let d = dims(scale);
    let cohort = generate_synthetic_cohort(
        &CohortConfig {
            n_slides: d.slides,
            patches_min: d.patches.0,
            patches_max: d.patches.1,
            feature_dim: d.feature_dim,
            thumbnail_dim: d.thumbnail_dim,
            n_institutions: 2,
            event_rate: 0.9,
            ..Default::default()
        },
        seed,
    )?;
    let config = TrainConfig {
        epochs: 1,
        warm_up_epochs: 0,
        batch_size: d.slides,
        hidden_dim: d.hidden,
        reduced_dim: Some(d.reduced),
        thumbnail_embed_dim: d.embed,
        knn_k: 4,
        k_max: 2,
        kmeans_iters: 3,
        kmeans_sharpness: 1.0,
        seed,
        ..Default::default()
    };
    Ok((cohort, config))
}

fn named(names: &[String], per_input: &[f64]) -> Vec<(String, f64)> {
    names
        .iter()
        .cloned()
        .zip(per_input.iter().cloned())
        .collect()
}

fn check(
    module: &str,
    names: Vec<String>,
    point: Vec<Tensor>,
    f: impl FnMut(&Tape, &[Var]) -> Result<Var>,
) -> Result<ModuleCheck> {
    let coordinates = point.iter().map(Tensor::len).sum();
    let r = grad_check(f, &point, FD_STEP)?;
    Ok(ModuleCheck {
        module: module.to_string(),
        max_rel_error: r.max_rel_error,
        coordinates,
        per_input: named(&names, &r.per_input),
    })
}

fn random_tensor(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .expect("consistent shape")
}

/// Parameters followed by extra inputs, with names.
fn with_inputs(store: &ParamStore, extra: Vec<(&str, Tensor)>) -> (Vec<String>, Vec<Tensor>) {
    let mut names = store.names().to_vec();
    let mut point = store.values().to_vec();
    for (n, t) in extra {
        names.push(n.to_string());
        point.push(t);
    }
    (names, point)
}

/// A composite of the primitive tape operations.
pub fn check_primitives(seed: u64) -> Result<ModuleCheck> {
    let mut rng = substream(seed, &[tags::INIT, 100]);
    let a = random_tensor(4, 3, &mut rng);
    let b = random_tensor(3, 5, &mut rng);
    let c = random_tensor(4, 5, &mut rng);
    let groups = Arc::new(vec![vec![0, 1], vec![2], vec![1, 2, 3]]);
    let seg = Arc::new(vec![0, 0, 1, 1]);
    let idx = Arc::new(vec![3, 0, 0, 2]);
    check(
        "autodiff",
        vec!["a".into(), "b".into(), "c".into()],
        vec![a, b, c],
        |t, v| {
            let ab = t.matmul(v[0], v[1])?;
            let s = t.softmax_rows(ab);
            let ln = t.layer_norm_rows(t.add(ab, v[2])?, 1e-5);
            let mixed = t.add(t.mul(s, t.tanh(ln))?, t.gelu(t.sub(v[2], s)?))?;
            let pos = t.add_scalar(t.square(mixed), 1.0);
            let q = t.div(
                t.sqrt(pos),
                t.add_scalar(t.exp(t.neg(t.sigmoid(mixed))), 0.5),
            )?;
            let lr = t.leaky_relu(t.scale(q, -0.7), 0.2);
            let seg_mean = t.segment_mean(lr, groups.clone())?;
            let col = t.slice_cols(lr, 1, 1)?;
            let soft = t.segment_softmax(col, seg.clone())?;
            let gathered = t.gather_rows(lr, idx.clone())?;
            let scattered = t.scatter_add_rows(gathered, idx.clone(), 4)?;
            let cos = t.cosine_rows(scattered, t.add_scalar(v[2], 0.3))?;
            let lse = t.log_sum_exp_sets(t.concat_rows(&[cos, soft])?, groups.clone())?;
            let tr = t.transpose(t.concat_cols(&[seg_mean, t.sum_rows(seg_mean)])?);
            let total = t.add(t.sum(t.log(t.add_scalar(t.square(tr), 1.0))), t.mean(lse))?;
            t.add(total, t.sum(t.sum_cols(t.mul(q, v[2])?)))
        },
    )
}

fn first_slide_context(
    cohort: &Cohort,
    config: &TrainConfig,
    width: usize,
) -> Result<(Tensor, GraphContext)> {
    let s = &cohort.slides[0];
    let topo = Topology::new(
        s.n_patches(),
        build_knn_graph(&s.patch_coords, config.knn_k)?,
    );
    Ok((
        s.features(cohort.feature_dim),
        GraphContext::new(topo, config.rw_steps, width, config.hop_count)?,
    ))
}

/// Graph transformer node logits against fixed weights.
pub fn check_graph_transformer(cohort: &Cohort, config: &TrainConfig) -> Result<ModuleCheck> {
    let width = config.reduced_width(cohort.feature_dim);
    let (x, ctx) = first_slide_context(cohort, config, width)?;
    let mut rng = substream(config.seed, &[tags::INIT, 101]);
    let mut store = ParamStore::new();
    let gt = GraphTransformer::new(
        &mut store,
        "gt",
        width,
        config.gt_heads,
        config.hop_count,
        &mut rng,
    )?;
    let h = random_tensor(x.rows(), width, &mut rng);
    let w = random_tensor(x.rows(), 1, &mut rng);
    let n_params = store.len();
    let (names, point) = with_inputs(&store, vec![("node_features", h)]);
    check("graph-transformer", names, point, |t, v| {
        let b = Bound::from_vars(t, v[..n_params].to_vec());
        let logits = gt.forward(&b, v[n_params], &ctx)?;
        Ok(t.sum(t.mul(logits, t.constant(w.clone()))?))
    })
}

/// Fixed draws whose mask is `draw + (p − p₀)`, with `p₀` the probabilities
/// at the first evaluation. The value equals the draw at the base point and
/// moves with `p` under perturbation, so central differences see exactly the
/// straight-through derivative.
pub struct AnchoredMasks {
    pub draws: Vec<Vec<bool>>,
    anchors: Vec<Option<Tensor>>,
}

impl AnchoredMasks {
    pub fn new(draws: Vec<Vec<bool>>) -> Self {
        let anchors = vec![None; draws.len()];
        Self { draws, anchors }
    }

    fn build(&mut self, tape: &Tape, row: usize, probs: Var) -> Result<Var> {
        let draw = &self.draws[row];
        let anchor = self.anchors[row].get_or_insert_with(|| tape.value(probs));
        if anchor.len() != draw.len() {
            return Err(Error::invalid("anchored mask length differs from the draw"));
        }
        let offset: Vec<f64> = draw
            .iter()
            .zip(anchor.data())
            .map(|(&d, &a)| if d { 1.0 - a } else { -a })
            .collect();
        tape.add(tape.constant(Tensor::column_vector(offset)), probs)
    }
}

impl MaskSource for AnchoredMasks {
    fn mask(&mut self, tape: &Tape, row: usize, probs: Var) -> Result<(Var, Vec<bool>)> {
        Ok((self.build(tape, row, probs)?, self.draws[row].clone()))
    }
}

/// Node probabilities, straight-through split and the mask-dependent terms.
pub fn check_sampler(cohort: &Cohort, config: &TrainConfig) -> Result<ModuleCheck> {
    let width = config.reduced_width(cohort.feature_dim);
    let (x, ctx) = first_slide_context(cohort, config, width)?;
    let mut rng = substream(config.seed, &[tags::INIT, 102]);
    let mut store = ParamStore::new();
    let sampler = Sampler::new(
        &mut store,
        cohort.feature_dim,
        width,
        config.gt_heads,
        config.hop_count,
        &mut rng,
    )?;
    let draw: Vec<bool> = (0..x.rows()).map(|j| j % 3 != 0).collect();
    let w_c = random_tensor(x.rows(), x.cols(), &mut rng);
    let w_s = random_tensor(x.rows(), x.cols(), &mut rng);
    let n_params = store.len();
    let topo = ctx.topology.clone();
    let mut masks = AnchoredMasks::new(vec![draw.clone()]);
    let (names, point) = with_inputs(&store, vec![("node_features", x)]);
    check("sampler", names, point, |t, v| {
        let b = Bound::from_vars(t, v[..n_params].to_vec());
        let probs = sampler.node_probabilities(&b, v[n_params], &ctx)?;
        let mask = masks.build(t, 0, probs)?;
        let split = sampler::split_with_mask(t, v[n_params], probs, mask, &topo, draw.clone())?;
        let soft = sampler::mask_eval(t, v[n_params], probs, &topo)?;
        let c = t.sum(t.mul(split.causal_features, t.constant(w_c.clone()))?);
        let s = t.sum(t.mul(split.complement_features, t.constant(w_s.clone()))?);
        let e = t.sum(t.mul(soft.causal_features, t.constant(w_s.clone()))?);
        let ratio = survival::ratio_loss(t, &[split.mask])?;
        t.add(t.add(t.add(c, s)?, e)?, ratio)
    })
}

/// Thumbnail projection, soft K-means, bias estimate and disentangling.
pub fn check_cafd(cohort: &Cohort, config: &TrainConfig) -> Result<ModuleCheck> {
    let mut rng = substream(config.seed, &[tags::INIT, 103]);
    let mut store = ParamStore::new();
    let proj = crate::nn::Linear::new(
        &mut store,
        "cafd.proj",
        cohort.thumbnail_dim,
        config.thumbnail_embed_dim,
        true,
        &mut rng,
    );
    let thumbs = Tensor::from_rows(
        &cohort
            .slides
            .iter()
            .map(|s| s.thumbnail().into_data())
            .collect::<Vec<_>>(),
    )?;
    let feats: Vec<Tensor> = cohort
        .slides
        .iter()
        .map(|s| s.features(cohort.feature_dim))
        .collect();
    let means = cafd::sample_slide_means(&feats, config.bias_sample_count, &mut rng)?;
    let init = {
        let tape = Tape::new();
        let b = store.bind_frozen(&tape);
        let e = cafd::project_thumbnail(&b, &proj, tape.constant(thumbs.clone()))?;
        cafd::kmeans_pp_seed(&tape.value(e), config.k_max.min(cohort.len()), &mut rng)?
    };
    let v0 = feats[0].clone();
    let w = random_tensor(v0.rows(), v0.cols(), &mut rng);
    let n_params = store.len();
    let sharpness = config.kmeans_sharpness;
    let iters = config.kmeans_iters;
    let (names, point) = with_inputs(&store, vec![("thumbnails", thumbs), ("node_features", v0)]);
    check("cafd", names, point, |t, v| {
        let b = Bound::from_vars(t, v[..n_params].to_vec());
        let emb = cafd::project_thumbnail(&b, &proj, v[n_params])?;
        let km = cafd::soft_kmeans(t, emb, &init, sharpness, iters)?;
        let bv = cafd::estimate_bias_vars(t, km.assignments, t.constant(means.clone()))?;
        let p0 = t.gather_rows(km.assignments, Arc::new(vec![0]))?;
        let out = cafd::disentangle(t, v[n_params + 1], p0, bv.bias)?;
        t.add(
            t.sum(t.mul(out, t.constant(w.clone()))?),
            t.sum(t.square(km.centers)),
        )
    })
}

/// Backbone risks with the Cox and contrastive terms over the whole cohort.
pub fn check_survival(cohort: &Cohort, config: &TrainConfig) -> Result<ModuleCheck> {
    let mut rng = substream(config.seed, &[tags::INIT, 104]);
    let mut store = ParamStore::new();
    let backbone = Backbone::new(&mut store, cohort.feature_dim, config.hidden_dim, &mut rng);
    let graphs: Vec<(Tensor, Topology)> = cohort
        .slides
        .iter()
        .map(|s| {
            Ok((
                s.features(cohort.feature_dim),
                Topology::new(
                    s.n_patches(),
                    build_knn_graph(&s.patch_coords, config.knn_k)?,
                ),
            ))
        })
        .collect::<Result<_>>()?;
    let labels: Vec<SurvivalLabel> = cohort.labels();
    let n_params = store.len();
    let nu = config.nu;
    let (names, point) = with_inputs(&store, vec![]);
    check("survival", names, point, |t, v| {
        let b = Bound::from_vars(t, v[..n_params].to_vec());
        let mut risks = Vec::new();
        let (mut zf, mut zc, mut zs) = (Vec::new(), Vec::new(), Vec::new());
        for (x, topo) in &graphs {
            let x = t.constant(x.clone());
            let full = backbone.forward(&b, x, topo)?;
            let half = t.scale(x, 0.5);
            let c = backbone.forward(&b, half, topo)?;
            let s = backbone.forward(&b, t.neg(half), topo)?;
            risks.push(full.risk);
            zf.push(full.embedding);
            zc.push(c.embedding);
            zs.push(s.embedding);
        }
        let cox = survival::cox_loss(t, t.concat_rows(&risks)?, &labels)?;
        let (ct, _) = survival::contrastive_loss(
            t,
            t.concat_rows(&zf)?,
            t.concat_rows(&zc)?,
            t.concat_rows(&zs)?,
            nu,
        )?;
        t.add(cox, ct)
    })
}

struct TotalLossSetup {
    model: Model,
    slides: Vec<PreparedSlide>,
    thumbs: Tensor,
    means: Tensor,
    centers: Tensor,
    draws: Vec<Vec<bool>>,
}

impl TotalLossSetup {
    fn new(cohort: &Cohort, config: &TrainConfig) -> Result<Self> {
        let model = Model::new(config, cohort.feature_dim, cohort.thumbnail_dim)?;
        let slides = prepare(cohort, config)?;
        let thumbs = Tensor::from_rows(
            &slides
                .iter()
                .map(|s| s.thumbnail.data().to_vec())
                .collect::<Vec<_>>(),
        )?;
        let feats: Vec<Tensor> = slides.iter().map(|s| s.features.clone()).collect();
        let mut rng = substream(config.seed, &[tags::BIAS_SAMPLE, 0]);
        let means = cafd::sample_slide_means(&feats, config.bias_sample_count, &mut rng)?;
        let centers = {
            let tape = Tape::new();
            let b = model.store.bind_frozen(&tape);
            let e =
                cafd::project_thumbnail(&b, &model.cluster.proj, tape.constant(thumbs.clone()))?;
            let mut rng = substream(config.seed, &[tags::CLUSTER, 0]);
            cafd::kmeans_pp_seed(&tape.value(e), config.k_max.min(slides.len()), &mut rng)?
        };
        let draws = slides
            .iter()
            .map(|s| {
                (0..s.features.rows())
                    .map(|j| j % 2 == 0 || j % 5 == 1)
                    .collect()
            })
            .collect();
        Ok(Self {
            model,
            slides,
            thumbs,
            means,
            centers,
            draws,
        })
    }

    fn loss(&self, b: &Bound<'_>, config: &TrainConfig, masks: &mut AnchoredMasks) -> Result<Var> {
        let rows: Vec<usize> = (0..self.slides.len()).collect();
        let phase = Phase {
            warm_up: false,
            cafd: true,
            sampler: true,
        };
        let input = CafdBatchInput {
            thumbnails: &self.thumbs,
            slide_means: &self.means,
            centers: &self.centers,
        };
        let (loss, _) = batch_loss(
            b,
            &self.model,
            config,
            phase,
            &self.slides,
            &rows,
            Some(&input),
            masks,
        )?;
        Ok(loss)
    }
}

/// The full training objective of one batch, every parameter group live.
pub fn check_total_loss(cohort: &Cohort, config: &TrainConfig) -> Result<ModuleCheck> {
    let setup = TotalLossSetup::new(cohort, config)?;
    let mut masks = AnchoredMasks::new(setup.draws.clone());
    let (names, point) = with_inputs(&setup.model.store, vec![]);
    check("total-loss", names, point, |t, v| {
        let b = Bound::from_vars(t, v.to_vec());
        setup.loss(&b, config, &mut masks)
    })
}

/// Largest absolute gradient of the full objective per parameter tensor.
pub fn total_loss_gradient_magnitudes(
    cohort: &Cohort,
    config: &TrainConfig,
) -> Result<Vec<(String, f64)>> {
    let setup = TotalLossSetup::new(cohort, config)?;
    let mut masks = AnchoredMasks::new(setup.draws.clone());
    let tape = Tape::new();
    let b = setup.model.store.bind(&tape);
    let loss = setup.loss(&b, config, &mut masks)?;
    let grads = tape.backward(loss)?;
    Ok(setup
        .model
        .store
        .names()
        .iter()
        .zip(b.vars())
        .map(|(n, &v)| {
            let g = grads.get(v).map_or(0.0, |g| {
                g.data().iter().fold(0.0, |m, x| f64::max(m, x.abs()))
            });
            (n.clone(), g)
        })
        .collect())
}

/// Run every module check at the given scale.
pub fn gradient_audit(scale: Scale, seed: u64) -> Result<Vec<ModuleCheck>> {
    let (cohort, config) = audit_setup(scale, seed)?;
    Ok(vec![
        check_primitives(seed)?,
        check_graph_transformer(&cohort, &config)?,
        check_sampler(&cohort, &config)?,
        check_cafd(&cohort, &config)?,
        check_survival(&cohort, &config)?,
        check_total_loss(&cohort, &config)?,
    ])
}
