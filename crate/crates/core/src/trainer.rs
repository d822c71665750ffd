//! Joint training loop: feature disentangling, subgraph sampling and the
//! backbone wired together, with warm-up, per-epoch cluster refresh, model
//! selection, evaluation and cross-validation.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::cafd::{self, BiasModel, CafdSettings, ClusterModel};
use crate::checkpoint::{Checkpoint, FrozenStats};
use crate::cohort::{build_knn_graph, Cohort, SurvivalLabel, Topology};
use crate::error::{Error, Result};
use crate::gt::GraphContext;
use crate::nn::{Adam, Bound, ParamStore};
use crate::rng::{substream, tags};
use crate::sampler::{self, default_reduced_dim, Sampler};
use crate::survival::{self, Backbone, LogRank, LossTerms, LossWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Every training hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warm_up_epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda_mse: f64,
    pub lambda_ct: f64,
    pub lambda_ratio: f64,
    /// Contrastive temperature.
    pub nu: f64,
    pub k_max: usize,
    pub gumbel_temperature: f64,
    pub kmeans_sharpness: f64,
    pub kmeans_iters: usize,
    pub cluster_threshold: f64,
    pub cluster_entropy_weight: f64,
    pub cluster_fit_steps: usize,
    pub cluster_fit_lr: f64,
    pub bias_sample_count: usize,
    pub thumbnail_embed_dim: usize,
    pub knn_k: usize,
    pub hidden_dim: usize,
    /// Sampler width; `None` means a quarter of the feature width, at least 8.
    pub reduced_dim: Option<usize>,
    pub gt_heads: usize,
    pub rw_steps: usize,
    pub hop_count: usize,
    pub use_cafd: bool,
    pub use_sampler: bool,
    pub seed: u64,
    pub folds: usize,
    pub validation_fraction: f64,
    /// Institution excluded from all folds and evaluated separately.
    pub held_out_institution: Option<usize>,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let c = CafdSettings::default();
        Self {
            epochs: 100,
            batch_size: 16,
            warm_up_epochs: 2,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda_mse: 0.1,
            lambda_ct: 0.1,
            lambda_ratio: 0.1,
            nu: 0.5,
            k_max: c.k_max,
            gumbel_temperature: c.gumbel_temperature,
            kmeans_sharpness: c.kmeans_sharpness,
            kmeans_iters: c.kmeans_iters,
            cluster_threshold: c.threshold,
            cluster_entropy_weight: c.entropy_weight,
            cluster_fit_steps: c.fit_steps,
            cluster_fit_lr: c.fit_lr,
            bias_sample_count: c.sample_count,
            thumbnail_embed_dim: 8,
            knn_k: 8,
            hidden_dim: 16,
            reduced_dim: None,
            gt_heads: 2,
            rw_steps: 3,
            hop_count: 2,
            use_cafd: true,
            use_sampler: true,
            seed: 0,
            folds: 5,
            validation_fraction: 0.2,
            held_out_institution: None,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.warm_up_epochs > self.epochs {
            return fail(format!(
                "warm_up_epochs ({}) exceeds epochs ({})",
                self.warm_up_epochs, self.epochs
            ));
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2".into());
        }
        if !(self.learning_rate >= 0.0) {
            return fail("learning_rate must be non-negative".into());
        }
        if [self.lambda_mse, self.lambda_ct, self.lambda_ratio]
            .iter()
            .any(|l| !(*l >= 0.0))
        {
            return fail("loss weights must be non-negative".into());
        }
        if !(self.nu > 0.0) {
            return fail("nu must be positive".into());
        }
        if self.k_max == 0 || self.kmeans_iters == 0 || self.bias_sample_count == 0 {
            return fail("k_max, kmeans_iters and bias_sample_count must be positive".into());
        }
        if !(self.gumbel_temperature > 0.0) || !(self.kmeans_sharpness > 0.0) {
            return fail("temperatures must be positive".into());
        }
        if self.knn_k == 0 || self.hidden_dim == 0 || self.thumbnail_embed_dim == 0 {
            return fail("knn_k, hidden_dim and thumbnail_embed_dim must be positive".into());
        }
        if self.rw_steps == 0 || self.gt_heads == 0 {
            return fail("rw_steps and gt_heads must be positive".into());
        }
        if self.folds < 2 {
            return fail("folds must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return fail("validation_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn cafd_settings(&self) -> CafdSettings {
        CafdSettings {
            k_max: self.k_max,
            gumbel_temperature: self.gumbel_temperature,
            kmeans_sharpness: self.kmeans_sharpness,
            kmeans_iters: self.kmeans_iters,
            threshold: self.cluster_threshold,
            sample_count: self.bias_sample_count,
            entropy_weight: self.cluster_entropy_weight,
            fit_steps: self.cluster_fit_steps,
            fit_lr: self.cluster_fit_lr,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_mse: self.lambda_mse,
            lambda_ct: self.lambda_ct,
            lambda_ratio: self.lambda_ratio,
            nu: self.nu,
        }
    }

    pub fn reduced_width(&self, feature_dim: usize) -> usize {
        self.reduced_dim
            .unwrap_or_else(|| default_reduced_dim(feature_dim))
    }
}

/// All learnable state: parameters plus the architecture that indexes them.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub cluster: ClusterModel,
    pub sampler: Sampler,
    pub backbone: Backbone,
    pub feature_dim: usize,
    pub thumbnail_dim: usize,
}

impl Model {
    pub fn new(config: &TrainConfig, feature_dim: usize, thumbnail_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(config.seed, &[tags::INIT]);
        let mut store = ParamStore::new();
        let cluster = ClusterModel::new(
            &mut store,
            thumbnail_dim,
            config.thumbnail_embed_dim,
            &config.cafd_settings(),
            &mut rng,
        )?;
        let sampler = Sampler::new(
            &mut store,
            feature_dim,
            config.reduced_width(feature_dim),
            config.gt_heads,
            config.hop_count,
            &mut rng,
        )?;
        let backbone = Backbone::new(&mut store, feature_dim, config.hidden_dim, &mut rng);
        if config.precision == Precision::F32 {
            store.round_to_f32();
        }
        Ok(Self {
            store,
            cluster,
            sampler,
            backbone,
            feature_dim,
            thumbnail_dim,
        })
    }

    /// Rebuild the architecture from the stored config and load parameters.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Model::new(&ckpt.config, ckpt.feature_dim, ckpt.thumbnail_dim)?;
        if model.store.names() != ckpt.params.names() {
            return Err(Error::invalid(
                "checkpoint parameters do not match the configured architecture",
            ));
        }
        for (id, value) in model
            .store
            .ids()
            .collect::<Vec<_>>()
            .into_iter()
            .zip(ckpt.params.values())
        {
            model.store.set(id, value.clone())?;
        }
        model.cluster.cluster_logits = ckpt.cluster_logits.clone();
        model.cluster.k_effective = ckpt.k_effective;
        if let Some(f) = &ckpt.frozen {
            model.cluster.centers = f.centers.clone();
        }
        Ok(model)
    }
}

/// A slide with its graph structure precomputed.
#[derive(Clone, Debug)]
pub struct PreparedSlide {
    pub id: String,
    pub features: Tensor,
    pub thumbnail: Tensor,
    pub label: SurvivalLabel,
    pub ctx: GraphContext,
    pub institution: Option<usize>,
    pub causal_mask: Option<Vec<bool>>,
}

pub fn prepare(cohort: &Cohort, config: &TrainConfig) -> Result<Vec<PreparedSlide>> {
    let width = config.reduced_width(cohort.feature_dim);
    cohort
        .slides
        .iter()
        .map(|s| {
            let edges = build_knn_graph(&s.patch_coords, config.knn_k)?;
            let topo = Topology::new(s.n_patches(), edges);
            Ok(PreparedSlide {
                id: s.id.clone(),
                features: s.features(cohort.feature_dim),
                thumbnail: s.thumbnail(),
                label: s.label,
                ctx: GraphContext::new(topo, config.rw_steps, width, config.hop_count)?,
                institution: s.planted_institution,
                causal_mask: s.planted_causal_mask.clone(),
            })
        })
        .collect()
}

fn stack_thumbnails(slides: &[PreparedSlide]) -> Tensor {
    let d_f = slides[0].thumbnail.cols();
    let data = slides
        .iter()
        .flat_map(|s| s.thumbnail.data().to_vec())
        .collect();
    Tensor::new(slides.len(), d_f, data).expect("uniform thumbnails")
}

/// Which parts of the pipeline are live.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub warm_up: bool,
    pub cafd: bool,
    pub sampler: bool,
}

impl Phase {
    pub fn for_epoch(config: &TrainConfig, epoch: usize) -> Self {
        let warm_up = epoch < config.warm_up_epochs;
        Self {
            warm_up,
            cafd: config.use_cafd && !warm_up,
            sampler: config.use_sampler && !warm_up,
        }
    }
}

/// Epoch-level inputs of the disentangling step inside a batch.
pub struct CafdBatchInput<'a> {
    /// Thumbnails of the whole training split, `[N, d_f]`.
    pub thumbnails: &'a Tensor,
    /// Subsampled slide means of the training split, `[N, d]`.
    pub slide_means: &'a Tensor,
    /// Centers seeded at the start of the epoch.
    pub centers: &'a Tensor,
}

/// Scalar summaries of one batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub loss: f64,
    pub cox_causal: f64,
    pub cox_full: f64,
    pub mse: f64,
    pub contrastive: f64,
    pub ratio: f64,
    pub empty_selections: usize,
    pub zero_norm_pairs: usize,
    pub degenerate_clusters: usize,
    pub selected_fraction: f64,
}

/// Source of the hard node masks used during training.
pub trait MaskSource {
    /// Draw for the slide at training row `row`; returns the mask variable
    /// (value equal to the draw) and the draw itself.
    fn mask(&mut self, tape: &Tape, row: usize, probs: Var) -> Result<(Var, Vec<bool>)>;
}

/// Bernoulli draws on per-slide substreams with a straight-through mask.
pub struct BernoulliMasks {
    pub seed: u64,
    pub epoch: usize,
}

impl MaskSource for BernoulliMasks {
    fn mask(&mut self, tape: &Tape, row: usize, probs: Var) -> Result<(Var, Vec<bool>)> {
        let p = tape.with_value(probs, |v| v.data().to_vec());
        let mut rng = substream(self.seed, &[tags::SAMPLE, self.epoch as u64, row as u64]);
        let draw = sampler::draw_mask(&p, &mut rng);
        Ok((tape.ste_mask(probs, &draw)?, draw))
    }
}

/// Build the batch objective on the tape.
///
/// `rows` are the batch members' row indices into the training split (and
/// into `cafd.thumbnails`).
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    b: &Bound<'_>,
    model: &Model,
    config: &TrainConfig,
    phase: Phase,
    slides: &[PreparedSlide],
    rows: &[usize],
    cafd_input: Option<&CafdBatchInput<'_>>,
    mask_source: &mut dyn MaskSource,
) -> Result<(Var, BatchStats)> {
    let t = b.tape;
    let labels: Vec<SurvivalLabel> = rows.iter().map(|&r| slides[r].label).collect();
    let mut stats = BatchStats::default();

    if phase.warm_up {
        let mut risks = Vec::with_capacity(rows.len());
        for &r in rows {
            let s = &slides[r];
            let x = t.constant(s.features.clone());
            risks.push(model.backbone.forward(b, x, &s.ctx.topology)?.risk);
        }
        let cox = survival::cox_loss(t, t.concat_rows(&risks)?, &labels)?;
        stats.cox_full = t.item(cox);
        stats.loss = stats.cox_full;
        return Ok((cox, stats));
    }

    let bias = match (phase.cafd, cafd_input) {
        (true, Some(inp)) => {
            let thumbs = t.constant(inp.thumbnails.clone());
            let emb = cafd::project_thumbnail(b, &model.cluster.proj, thumbs)?;
            let km = cafd::soft_kmeans(
                t,
                emb,
                inp.centers,
                config.kmeans_sharpness,
                config.kmeans_iters,
            )?;
            let bv =
                cafd::estimate_bias_vars(t, km.assignments, t.constant(inp.slide_means.clone()))?;
            stats.degenerate_clusters = bv.degenerate.iter().filter(|&&d| d).count();
            Some((km.assignments, bv.bias))
        }
        (true, None) => {
            return Err(Error::invalid(
                "disentangling is active but no cluster state was given",
            ))
        }
        _ => None,
    };

    let mut risk_full = Vec::with_capacity(rows.len());
    let mut risk_causal = Vec::with_capacity(rows.len());
    let (mut z_full, mut z_causal, mut z_comp) = (Vec::new(), Vec::new(), Vec::new());
    let (mut probs_g, mut probs_raw, mut masks) = (Vec::new(), Vec::new(), Vec::new());
    let mut selected = 0.0;
    for &r in rows {
        let s = &slides[r];
        let topo = &s.ctx.topology;
        let raw = t.constant(s.features.clone());
        let x = match bias {
            Some((assign, bias)) => {
                let p = t.gather_rows(assign, Arc::new(vec![r]))?;
                cafd::disentangle(t, raw, p, bias)?
            }
            None => raw,
        };
        let full = model.backbone.forward(b, x, topo)?;
        risk_full.push(full.risk);
        if phase.sampler {
            let probs = model.sampler.node_probabilities(b, x, &s.ctx)?;
            if phase.cafd && config.lambda_mse > 0.0 {
                probs_g.push(probs);
                probs_raw.push(model.sampler.node_probabilities(b, raw, &s.ctx)?);
            }
            let (mask, chosen) = mask_source.mask(t, r, probs)?;
            let n_sel = chosen.iter().filter(|&&c| c).count();
            selected += n_sel as f64 / chosen.len() as f64;
            let split = sampler::split_with_mask(t, x, probs, mask, topo, chosen)?;
            if split.is_empty_selection() {
                stats.empty_selections += 1;
            }
            let causal =
                model
                    .backbone
                    .forward(b, split.causal_features, &split.causal_topology)?;
            let comp =
                model
                    .backbone
                    .forward(b, split.complement_features, &split.complement_topology)?;
            risk_causal.push(causal.risk);
            z_full.push(full.embedding);
            z_causal.push(causal.embedding);
            z_comp.push(comp.embedding);
            masks.push(split.mask);
        } else {
            risk_causal.push(full.risk);
            selected += 1.0;
        }
    }
    stats.selected_fraction = selected / rows.len() as f64;

    let zero = || t.scalar_constant(0.0);
    let cox_causal = survival::cox_loss(t, t.concat_rows(&risk_causal)?, &labels)?;
    let cox_full = survival::cox_loss(t, t.concat_rows(&risk_full)?, &labels)?;
    let mse = if probs_g.is_empty() {
        zero()
    } else {
        survival::mse_disentangle_loss(t, &probs_g, &probs_raw)?
    };
    let (contrastive, ratio) = if phase.sampler {
        let (ct, flagged) = survival::contrastive_loss(
            t,
            t.concat_rows(&z_full)?,
            t.concat_rows(&z_causal)?,
            t.concat_rows(&z_comp)?,
            config.nu,
        )?;
        stats.zero_norm_pairs = flagged;
        (ct, survival::ratio_loss(t, &masks)?)
    } else {
        (zero(), zero())
    };
    let terms = LossTerms {
        cox_causal,
        cox_full,
        mse,
        contrastive,
        ratio,
    };
    let loss = survival::total_loss(t, &terms, &config.loss_weights())?;
    stats.cox_causal = t.item(cox_causal);
    stats.cox_full = t.item(cox_full);
    stats.mse = t.item(mse);
    stats.contrastive = t.item(contrastive);
    stats.ratio = t.item(ratio);
    stats.loss = t.item(loss);
    Ok((loss, stats))
}

/// One line of the metric history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub cox_causal: f64,
    pub cox_full: f64,
    pub mse: f64,
    pub contrastive: f64,
    pub ratio: f64,
    pub val_c_index: Option<f64>,
    pub k_effective: Option<usize>,
    pub cluster_weights: Option<Vec<f64>>,
    /// Nearest center per training slide after the refresh.
    #[serde(default)]
    pub cluster_assignments: Option<Vec<usize>>,
    pub empty_selections: usize,
    pub zero_norm_pairs: usize,
    pub degenerate_clusters: usize,
    pub selected_fraction: f64,
}

/// Per-slide predictions and summary metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ids: Vec<String>,
    pub labels: Vec<SurvivalLabel>,
    /// Prediction from the causal subgraph, the inference target.
    pub risks: Vec<f64>,
    /// Prediction from the whole (disentangled) graph.
    pub risks_full: Vec<f64>,
    pub node_probs: Vec<Vec<f64>>,
    pub c_index: Option<f64>,
    pub high_risk: Option<Vec<bool>>,
    pub log_rank: Option<LogRank>,
}

/// Slide-level outputs of the evaluation path.
pub struct SlideEval {
    pub risk: f64,
    pub risk_full: f64,
    pub probs: Vec<f64>,
    /// Node features after disentangling.
    pub features: Tensor,
}

/// Soft-mask forward of one slide with frozen statistics.
pub fn evaluate_slide(
    model: &Model,
    frozen: Option<&FrozenStats>,
    phase: Phase,
    sharpness: f64,
    slide: &PreparedSlide,
) -> Result<SlideEval> {
    let tape = Tape::new();
    let b = model.store.bind_frozen(&tape);
    let raw = tape.constant(slide.features.clone());
    let x = match (phase.cafd, frozen) {
        (true, Some(f)) => {
            let emb = cafd::project_thumbnail(
                &b,
                &model.cluster.proj,
                tape.constant(slide.thumbnail.clone()),
            )?;
            let p = cafd::assign(&tape, emb, tape.constant(f.centers.clone()), sharpness)?;
            cafd::disentangle(&tape, raw, p, tape.constant(f.bias.cluster_bias.clone()))?
        }
        (true, None) => {
            return Err(Error::invalid(
                "disentangling is active but no frozen statistics exist",
            ))
        }
        _ => raw,
    };
    let topo = &slide.ctx.topology;
    let full = model.backbone.forward(&b, x, topo)?;
    let (risk, probs) = if phase.sampler {
        let probs = model.sampler.node_probabilities(&b, x, &slide.ctx)?;
        let split = sampler::mask_eval(&tape, x, probs, topo)?;
        let causal = model
            .backbone
            .forward(&b, split.causal_features, &split.causal_topology)?;
        (tape.item(causal.risk), tape.value(probs).into_data())
    } else {
        (tape.item(full.risk), vec![1.0; slide.features.rows()])
    };
    Ok(SlideEval {
        risk,
        risk_full: tape.item(full.risk),
        probs,
        features: tape.value(x),
    })
}

fn evaluate_prepared(
    model: &Model,
    frozen: Option<&FrozenStats>,
    phase: Phase,
    sharpness: f64,
    slides: &[PreparedSlide],
    median: Option<f64>,
) -> Result<EvalResult> {
    let mut out = EvalResult {
        ids: Vec::with_capacity(slides.len()),
        labels: Vec::with_capacity(slides.len()),
        risks: Vec::with_capacity(slides.len()),
        risks_full: Vec::with_capacity(slides.len()),
        node_probs: Vec::with_capacity(slides.len()),
        c_index: None,
        high_risk: None,
        log_rank: None,
    };
    for s in slides {
        let e = evaluate_slide(model, frozen, phase, sharpness, s)?;
        if !e.risk.is_finite() {
            return Err(Error::NonFinite(format!("risk of slide {}", s.id)));
        }
        out.ids.push(s.id.clone());
        out.labels.push(s.label);
        out.risks.push(e.risk);
        out.risks_full.push(e.risk_full);
        out.node_probs.push(e.probs);
    }
    out.c_index = survival::c_index(&out.risks, &out.labels);
    if let Some(m) = median {
        let high = survival::stratify_by_threshold(m, &out.risks);
        let n_high = high.iter().filter(|&&h| h).count();
        if n_high > 0 && n_high < high.len() {
            out.log_rank = Some(survival::log_rank_test(&out.labels, &high)?);
        }
        out.high_risk = Some(high);
    }
    Ok(out)
}

/// Evaluate a checkpoint on a cohort with the soft-mask path.
pub fn evaluate(ckpt: &Checkpoint, cohort: &Cohort) -> Result<EvalResult> {
    if cohort.feature_dim != ckpt.feature_dim || cohort.thumbnail_dim != ckpt.thumbnail_dim {
        return Err(Error::invalid(format!(
            "checkpoint expects feature/thumbnail dims {}/{}, cohort has {}/{}",
            ckpt.feature_dim, ckpt.thumbnail_dim, cohort.feature_dim, cohort.thumbnail_dim
        )));
    }
    let model = Model::from_checkpoint(ckpt)?;
    let slides = prepare(cohort, &ckpt.config)?;
    evaluate_prepared(
        &model,
        ckpt.frozen.as_ref(),
        ckpt.phase(),
        ckpt.config.kmeans_sharpness,
        &slides,
        ckpt.train_median_risk,
    )
}

/// Node features after disentangling, per slide, using a checkpoint's frozen statistics.
pub fn disentangled_features(ckpt: &Checkpoint, cohort: &Cohort) -> Result<Vec<Tensor>> {
    let model = Model::from_checkpoint(ckpt)?;
    let slides = prepare(cohort, &ckpt.config)?;
    slides
        .iter()
        .map(|s| {
            evaluate_slide(
                &model,
                ckpt.frozen.as_ref(),
                ckpt.phase(),
                ckpt.config.kmeans_sharpness,
                s,
            )
            .map(|e| e.features)
        })
        .collect()
}

fn nearest_center(points: &Tensor, centers: &Tensor) -> Vec<usize> {
    (0..points.rows())
        .map(|i| {
            let p = points.row(i);
            (0..centers.rows())
                .map(|k| {
                    let d: f64 = p
                        .iter()
                        .zip(centers.row(k))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (k, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map_or(0, |(k, _)| k)
        })
        .collect()
}

/// Nearest frozen center per slide, or `None` when the checkpoint has no
/// frozen statistics.
pub fn cluster_assignments(ckpt: &Checkpoint, cohort: &Cohort) -> Result<Option<Vec<usize>>> {
    let Some(frozen) = &ckpt.frozen else {
        return Ok(None);
    };
    if cohort.is_empty() {
        return Ok(Some(Vec::new()));
    }
    if cohort.thumbnail_dim != ckpt.thumbnail_dim {
        return Err(Error::invalid(format!(
            "checkpoint expects thumbnail dim {}, cohort has {}",
            ckpt.thumbnail_dim, cohort.thumbnail_dim
        )));
    }
    let model = Model::from_checkpoint(ckpt)?;
    let rows: Vec<Vec<f64>> = cohort
        .slides
        .iter()
        .map(|s| s.thumbnail().into_data())
        .collect();
    let emb = embed_thumbnails(&model, &Tensor::from_rows(&rows)?)?;
    Ok(Some(nearest_center(&emb, &frozen.centers)))
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Selected by validation C-index.
    pub checkpoint: Checkpoint,
    /// State after the final epoch.
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Evaluation of the training split with the selected checkpoint.
    pub train_eval: EvalResult,
}

fn round_tensor(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
}

fn frozen_stats(
    model: &Model,
    config: &TrainConfig,
    thumbnails: &Tensor,
    slide_means: &Tensor,
) -> Result<FrozenStats> {
    let tape = Tape::new();
    let b = model.store.bind_frozen(&tape);
    let emb = cafd::project_thumbnail(&b, &model.cluster.proj, tape.constant(thumbnails.clone()))?;
    let km = cafd::soft_kmeans(
        &tape,
        emb,
        &model.cluster.centers,
        config.kmeans_sharpness,
        config.kmeans_iters,
    )?;
    let mut centers = tape.value(km.centers);
    let p = tape.value(km.assignments);
    let mut bias: BiasModel = cafd::estimate_bias(&p, slide_means, config.bias_sample_count)?;
    if config.precision == Precision::F32 {
        round_tensor(&mut centers);
        round_tensor(&mut bias.cluster_means);
        round_tensor(&mut bias.global_mean);
        // rebuild the bias from the rounded means so it matches what a checkpoint stores
        bias.cluster_bias = bias.cluster_means.clone();
        for r in 0..bias.cluster_bias.rows() {
            if bias.degenerate[r] {
                bias.cluster_bias.row_mut(r).fill(0.0);
                continue;
            }
            let g = bias.global_mean.row(0).to_vec();
            for (x, gm) in bias.cluster_bias.row_mut(r).iter_mut().zip(g) {
                *x -= gm;
            }
        }
        round_tensor(&mut bias.cluster_bias);
    }
    Ok(FrozenStats { centers, bias })
}

/// Shuffled batches; a trailing singleton joins the previous batch.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, &[tags::SHUFFLE, epoch as u64]));
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

fn embed_thumbnails(model: &Model, thumbnails: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let b = model.store.bind_frozen(&tape);
    let emb = cafd::project_thumbnail(&b, &model.cluster.proj, tape.constant(thumbnails.clone()))?;
    Ok(tape.value(emb))
}

/// Train on `train`, selecting the checkpoint with the best validation
/// C-index among epochs after warm-up.
pub fn train(train: &Cohort, val: Option<&Cohort>, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if train.len() < 2 {
        return Err(Error::invalid("training split needs at least two slides"));
    }
    if let Some(v) = val {
        let train_ids: std::collections::HashSet<&str> =
            train.slides.iter().map(|s| s.id.as_str()).collect();
        if let Some(s) = v.slides.iter().find(|s| train_ids.contains(s.id.as_str())) {
            return Err(Error::invalid(format!(
                "slide {} is in both training and validation splits",
                s.id
            )));
        }
        if v.feature_dim != train.feature_dim || v.thumbnail_dim != train.thumbnail_dim {
            return Err(Error::invalid("validation dims differ from training dims"));
        }
    }
    let slides = prepare(train, config)?;
    let val_slides = val.map(|v| prepare(v, config)).transpose()?;
    let thumbnails = stack_thumbnails(&slides);
    let features: Vec<Tensor> = slides.iter().map(|s| s.features.clone()).collect();
    let mut model = Model::new(config, train.feature_dim, train.thumbnail_dim)?;
    let mut opt = Adam::new(
        &model.store,
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    );
    let settings = config.cafd_settings();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut last: Option<Checkpoint> = None;

    for epoch in 0..config.epochs {
        let phase = Phase::for_epoch(config, epoch);
        let mut refresh = None;
        let mut assignments = None;
        let mut slide_means = None;
        if config.use_cafd {
            let emb = embed_thumbnails(&model, &thumbnails)?;
            let mut rng = substream(config.seed, &[tags::CLUSTER, epoch as u64]);
            let r = cafd::refresh_clusters(&mut model.cluster, &emb, &settings, &mut rng)?;
            if config.precision == Precision::F32 {
                model
                    .cluster
                    .cluster_logits
                    .iter_mut()
                    .for_each(|x| *x = *x as f32 as f64);
                round_tensor(&mut model.cluster.centers);
            }
            refresh = Some(r);
            assignments = Some(nearest_center(&emb, &model.cluster.centers));
            let mut rng = substream(config.seed, &[tags::BIAS_SAMPLE, epoch as u64]);
            slide_means = Some(cafd::sample_slide_means(
                &features,
                config.bias_sample_count,
                &mut rng,
            )?);
        }

        let mut sums = BatchStats::default();
        let batches = batch_order(slides.len(), config.batch_size, config.seed, epoch);
        for (bi, rows) in batches.iter().enumerate() {
            let tape = Tape::new();
            let b = model.store.bind(&tape);
            let centers = model.cluster.centers.clone();
            let input = slide_means.as_ref().map(|m| CafdBatchInput {
                thumbnails: &thumbnails,
                slide_means: m,
                centers: &centers,
            });
            let mut masks = BernoulliMasks {
                seed: config.seed,
                epoch,
            };
            let (loss, stats) = batch_loss(
                &b,
                &model,
                config,
                phase,
                &slides,
                rows,
                input.as_ref(),
                &mut masks,
            )?;
            if !stats.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {epoch}, batch {bi}"
                )));
            }
            let grads = tape.backward(loss)?;
            model.store.accumulate(&b, &grads);
            opt.step(&mut model.store);
            model.store.zero_grad();
            if config.precision == Precision::F32 {
                model.store.round_to_f32();
            }
            sums.loss += stats.loss;
            sums.cox_causal += stats.cox_causal;
            sums.cox_full += stats.cox_full;
            sums.mse += stats.mse;
            sums.contrastive += stats.contrastive;
            sums.ratio += stats.ratio;
            sums.empty_selections += stats.empty_selections;
            sums.zero_norm_pairs += stats.zero_norm_pairs;
            sums.degenerate_clusters += stats.degenerate_clusters;
            sums.selected_fraction += stats.selected_fraction;
        }
        if sums.empty_selections > 0 {
            log::warn!(
                "epoch {epoch}: {} empty causal selections",
                sums.empty_selections
            );
        }

        let frozen = match &slide_means {
            Some(m) if phase.cafd => Some(frozen_stats(&model, config, &thumbnails, m)?),
            _ => None,
        };
        let val_eval = match &val_slides {
            Some(vs) if !vs.is_empty() => Some(evaluate_prepared(
                &model,
                frozen.as_ref(),
                phase,
                config.kmeans_sharpness,
                vs,
                None,
            )?),
            _ => None,
        };
        let nb = batches.len() as f64;
        let record = EpochRecord {
            epoch,
            phase,
            loss: sums.loss / nb,
            cox_causal: sums.cox_causal / nb,
            cox_full: sums.cox_full / nb,
            mse: sums.mse / nb,
            contrastive: sums.contrastive / nb,
            ratio: sums.ratio / nb,
            val_c_index: val_eval.as_ref().and_then(|e| e.c_index),
            k_effective: refresh.as_ref().map(|r| r.k_effective),
            cluster_weights: refresh.map(|r| r.weights),
            cluster_assignments: assignments,
            empty_selections: sums.empty_selections,
            zero_norm_pairs: sums.zero_norm_pairs,
            degenerate_clusters: sums.degenerate_clusters,
            selected_fraction: sums.selected_fraction / nb,
        };
        log::info!(
            "epoch {epoch} loss {:.4} val_c_index {:?} k_eff {:?}",
            record.loss,
            record.val_c_index,
            record.k_effective
        );
        let ckpt = Checkpoint::capture(&model, config, epoch, phase, frozen);
        if !phase.warm_up {
            if let Some(c) = record.val_c_index {
                if best.as_ref().is_none_or(|(bc, _, _)| c > *bc) {
                    best = Some((c, epoch, ckpt.clone()));
                }
            }
        }
        history.push(record);
        last = Some(ckpt);
    }

    let last = last.ok_or_else(|| Error::config("epochs must be at least 1"))?;
    let (best_epoch, mut checkpoint) = match best {
        Some((_, e, c)) => (e, c),
        None => (last.epoch, last.clone()),
    };
    let best_model = Model::from_checkpoint(&checkpoint)?;
    let mut train_eval = evaluate_prepared(
        &best_model,
        checkpoint.frozen.as_ref(),
        checkpoint.phase(),
        config.kmeans_sharpness,
        &slides,
        None,
    )?;
    let median = survival::median(&train_eval.risks);
    checkpoint.train_median_risk = median;
    if let Some(m) = median {
        let high = survival::stratify_by_threshold(m, &train_eval.risks);
        let n_high = high.iter().filter(|&&h| h).count();
        if n_high > 0 && n_high < high.len() {
            train_eval.log_rank = Some(survival::log_rank_test(&train_eval.labels, &high)?);
        }
        train_eval.high_risk = Some(high);
    }
    Ok(TrainOutcome {
        checkpoint,
        last,
        history,
        best_epoch,
        train_eval,
    })
}

/// Seeded partition of `0..n` into `folds` groups.
pub fn assign_folds(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || folds > n {
        return Err(Error::config(format!(
            "cannot split {n} slides into {folds} folds"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, &[tags::FOLDS]));
    let mut out = vec![Vec::new(); folds];
    for (pos, i) in idx.into_iter().enumerate() {
        out[pos % folds].push(i);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

/// Split indices into training and validation parts.
pub fn split_validation(
    indices: &[usize],
    fraction: f64,
    seed: u64,
    tag: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut idx = indices.to_vec();
    idx.shuffle(&mut substream(seed, &[tags::SPLIT, tag]));
    let n_val = ((indices.len() as f64) * fraction).round() as usize;
    let n_val = n_val.min(indices.len().saturating_sub(2));
    let mut val = idx.split_off(indices.len() - n_val);
    idx.sort_unstable();
    val.sort_unstable();
    (idx, val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub best_epoch: usize,
    pub test_c_index: Option<f64>,
    pub test_log_rank: Option<LogRank>,
    pub ood_ids: Vec<String>,
    pub ood_c_index: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub folds: Vec<FoldResult>,
    pub mean_c_index: Option<f64>,
    pub std_c_index: Option<f64>,
    pub mean_ood_c_index: Option<f64>,
    pub std_ood_c_index: Option<f64>,
}

/// Mean and population standard deviation of the defined values.
pub fn mean_std(values: impl IntoIterator<Item = Option<f64>>) -> (Option<f64>, Option<f64>) {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return (None, None);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
    (Some(mean), Some(var.sqrt()))
}

/// Everything produced by one fold.
pub struct FoldRun {
    pub result: FoldResult,
    pub outcome: TrainOutcome,
    pub test_eval: EvalResult,
    pub ood_eval: Option<EvalResult>,
}

/// K-fold cross-validation. Each fold trains on the remaining folds (minus an
/// inner validation part for model selection) and tests on the fold itself.
/// With `held_out_institution` set, that institution's slides are excluded
/// from every fold and evaluated by each fold's model. Up to `jobs` folds run
/// concurrently; results do not depend on `jobs`.
pub fn cross_validate(
    cohort: &Cohort,
    config: &TrainConfig,
    jobs: usize,
) -> Result<(CvSummary, Vec<FoldRun>)> {
    config.validate()?;
    let (pool, ood): (Vec<usize>, Vec<usize>) = match config.held_out_institution {
        Some(inst) => {
            if !cohort
                .slides
                .iter()
                .any(|s| s.planted_institution == Some(inst))
            {
                return Err(Error::invalid(format!(
                    "institution {inst} does not occur in the cohort"
                )));
            }
            (0..cohort.len()).partition(|&i| cohort.slides[i].planted_institution != Some(inst))
        }
        None => ((0..cohort.len()).collect(), Vec::new()),
    };
    let fold_sets = assign_folds(pool.len(), config.folds, config.seed)?;
    let ood_cohort = if ood.is_empty() {
        None
    } else {
        Some(cohort.subset(&ood)?)
    };
    let ids = |idx: &[usize]| {
        idx.iter()
            .map(|&i| cohort.slides[i].id.clone())
            .collect::<Vec<_>>()
    };

    let run_fold = |f: usize| -> Result<FoldRun> {
        let test: Vec<usize> = fold_sets[f].iter().map(|&p| pool[p]).collect();
        let rest: Vec<usize> = (0..config.folds)
            .filter(|&g| g != f)
            .flat_map(|g| fold_sets[g].iter().map(|&p| pool[p]))
            .collect();
        let (tr, va) = split_validation(&rest, config.validation_fraction, config.seed, f as u64);
        let train_c = cohort.subset(&tr)?;
        let val_c = if va.is_empty() {
            None
        } else {
            Some(cohort.subset(&va)?)
        };
        let test_c = cohort.subset(&test)?;
        let outcome = train(&train_c, val_c.as_ref(), config)?;
        let test_eval = evaluate(&outcome.checkpoint, &test_c)?;
        let ood_eval = ood_cohort
            .as_ref()
            .map(|c| evaluate(&outcome.checkpoint, c))
            .transpose()?;
        Ok(FoldRun {
            result: FoldResult {
                fold: f,
                train_ids: ids(&tr),
                val_ids: ids(&va),
                test_ids: ids(&test),
                best_epoch: outcome.best_epoch,
                test_c_index: test_eval.c_index,
                test_log_rank: test_eval.log_rank,
                ood_ids: ids(&ood),
                ood_c_index: ood_eval.as_ref().and_then(|e| e.c_index),
            },
            outcome,
            test_eval,
            ood_eval,
        })
    };

    let jobs = jobs.clamp(1, config.folds);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<FoldRun>>>> =
        Mutex::new((0..config.folds).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let f = next.fetch_add(1, Ordering::SeqCst);
                if f >= config.folds {
                    break;
                }
                let r = run_fold(f);
                results.lock().expect("fold results lock")[f] = Some(r);
            });
        }
    });
    let runs = results
        .into_inner()
        .expect("fold results lock")
        .into_iter()
        .map(|r| r.expect("every fold ran"))
        .collect::<Result<Vec<_>>>()?;
    let (mean_c_index, std_c_index) = mean_std(runs.iter().map(|r| r.result.test_c_index));
    let (mean_ood_c_index, std_ood_c_index) = if ood.is_empty() {
        (None, None)
    } else {
        mean_std(runs.iter().map(|r| r.result.ood_c_index))
    };
    Ok((
        CvSummary {
            folds: runs.iter().map(|r| r.result.clone()).collect(),
            mean_c_index,
            std_c_index,
            mean_ood_c_index,
            std_ood_c_index,
        },
        runs,
    ))
}
