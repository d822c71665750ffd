//! Slides, patch graphs, synthetic cohorts with planted ground truth, and the
//! on-disk cohort format.
//!
//! # Cohort directory layout
//!
//! ```text
//! <dir>/manifest.json      dims, slide ids, labels, planted truth, config snapshot
//! <dir>/slide_00000.bin    one binary file per slide
//! <dir>/labels.csv         id,time,event,institution (export only, never read)
//! ```
//!
//! Each slide file is a flat little-endian sequence:
//!
//! | section    | type  | count      |
//! |------------|-------|------------|
//! | thumbnail  | `f32` | `d_f`      |
//! | patches    | `f32` | `m × d`, row-major |
//! | coords     | `i32` | `2m` as `x0, y0, x1, y1, …` |
//!
//! `m` comes from the manifest entry's `n_patches`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{substream, tags};

pub const MANIFEST_FORMAT: &str = "cmil-cohort";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalLabel {
    pub time: f64,
    /// `true` when the event was observed, `false` when censored.
    pub event: bool,
}

impl SurvivalLabel {
    pub fn new(time: f64, event: bool) -> Result<Self> {
        if !(time > 0.0) || !time.is_finite() {
            return Err(Error::invalid(format!(
                "survival time must be positive, got {time}"
            )));
        }
        Ok(Self { time, event })
    }
}

/// One bag: a slide's thumbnail embedding, patch embeddings and outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideRecord {
    pub id: String,
    pub thumbnail_feature: Vec<f32>,
    /// `m × d`, row-major.
    pub patch_features: Vec<f32>,
    pub patch_coords: Vec<(i32, i32)>,
    pub label: SurvivalLabel,
    pub planted_institution: Option<usize>,
    pub planted_causal_mask: Option<Vec<bool>>,
    /// Log-hazard used by the generator, when synthetic.
    pub planted_risk: Option<f64>,
}

impl SlideRecord {
    pub fn n_patches(&self) -> usize {
        self.patch_coords.len()
    }

    pub fn features(&self, d: usize) -> Tensor {
        Tensor::new(
            self.n_patches(),
            d,
            self.patch_features.iter().map(|&x| x as f64).collect(),
        )
        .expect("validated slide")
    }

    pub fn thumbnail(&self) -> Tensor {
        Tensor::row_vector(self.thumbnail_feature.iter().map(|&x| x as f64).collect())
    }

    pub fn validate(&self, d: usize, d_f: usize) -> Result<()> {
        let m = self.patch_coords.len();
        if m == 0 {
            return Err(Error::invalid(format!("slide {}: no patches", self.id)));
        }
        if self.patch_features.len() != m * d {
            return Err(Error::invalid(format!(
                "slide {}: {} feature values for {m} patches of dim {d}",
                self.id,
                self.patch_features.len()
            )));
        }
        if self.thumbnail_feature.len() != d_f {
            return Err(Error::invalid(format!(
                "slide {}: thumbnail dim {} != {d_f}",
                self.id,
                self.thumbnail_feature.len()
            )));
        }
        if !self
            .patch_features
            .iter()
            .chain(&self.thumbnail_feature)
            .all(|x| x.is_finite())
        {
            return Err(Error::invalid(format!(
                "slide {}: non-finite feature",
                self.id
            )));
        }
        if let Some(mask) = &self.planted_causal_mask {
            if mask.len() != m {
                return Err(Error::invalid(format!(
                    "slide {}: causal mask length {} != {m}",
                    self.id,
                    mask.len()
                )));
            }
        }
        SurvivalLabel::new(self.label.time, self.label.event)?;
        Ok(())
    }
}

/// A set of slides sharing feature dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub slides: Vec<SlideRecord>,
    pub feature_dim: usize,
    pub thumbnail_dim: usize,
    pub generation_config: Option<CohortConfig>,
    pub generation_seed: Option<u64>,
}

impl Cohort {
    pub fn new(slides: Vec<SlideRecord>, feature_dim: usize, thumbnail_dim: usize) -> Result<Self> {
        if slides.is_empty() {
            return Err(Error::invalid("cohort must contain at least one slide"));
        }
        for s in &slides {
            s.validate(feature_dim, thumbnail_dim)?;
        }
        Ok(Self {
            slides,
            feature_dim,
            thumbnail_dim,
            generation_config: None,
            generation_seed: None,
        })
    }

    pub fn len(&self) -> usize {
        self.slides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slides.is_empty()
    }

    pub fn labels(&self) -> Vec<SurvivalLabel> {
        self.slides.iter().map(|s| s.label).collect()
    }

    /// Copy restricted to the given slide indices, in order.
    pub fn subset(&self, idx: &[usize]) -> Result<Cohort> {
        let slides = idx.iter().map(|&i| self.slides[i].clone()).collect();
        let mut c = Cohort::new(slides, self.feature_dim, self.thumbnail_dim)?;
        c.generation_config = self.generation_config.clone();
        c.generation_seed = self.generation_seed;
        Ok(c)
    }
}

/// Node features with an undirected edge list stored in both directions and
/// edge attributes that are always the concatenated endpoint features.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    node_features: Tensor,
    edges: Vec<(usize, usize)>,
    edge_attrs: Tensor,
}

impl Graph {
    pub fn new(node_features: Tensor, edges: Vec<(usize, usize)>) -> Result<Self> {
        let m = node_features.rows();
        let set: BTreeSet<(usize, usize)> = edges.iter().copied().collect();
        for &(a, b) in &edges {
            if a >= m || b >= m {
                return Err(Error::invalid(format!(
                    "edge ({a}, {b}) out of range for {m} nodes"
                )));
            }
            if a == b {
                return Err(Error::invalid(format!("self-loop on node {a}")));
            }
            if !set.contains(&(b, a)) {
                return Err(Error::invalid(format!("edge ({a}, {b}) has no reverse")));
            }
        }
        let edge_attrs = Self::build_attrs(&node_features, &edges);
        Ok(Self {
            node_features,
            edges,
            edge_attrs,
        })
    }

    fn build_attrs(x: &Tensor, edges: &[(usize, usize)]) -> Tensor {
        let d = x.cols();
        let mut data = Vec::with_capacity(edges.len() * 2 * d);
        for &(a, b) in edges {
            data.extend_from_slice(x.row(a));
            data.extend_from_slice(x.row(b));
        }
        Tensor::new(edges.len(), 2 * d, data).expect("sized")
    }

    pub fn n_nodes(&self) -> usize {
        self.node_features.rows()
    }

    pub fn node_features(&self) -> &Tensor {
        &self.node_features
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_attrs(&self) -> &Tensor {
        &self.edge_attrs
    }

    /// Replace node features; edge attributes are rebuilt.
    pub fn set_node_features(&mut self, x: Tensor) -> Result<()> {
        if x.rows() != self.node_features.rows() {
            return Err(Error::Shape {
                op: "set_node_features",
                left: self.node_features.shape(),
                right: x.shape(),
            });
        }
        self.edge_attrs = Self::build_attrs(&x, &self.edges);
        self.node_features = x;
        Ok(())
    }

    pub fn topology(&self) -> Topology {
        Topology::new(self.n_nodes(), self.edges.clone())
    }
}

/// Edge structure of a graph in the index forms the tape operations need.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    pub src: Arc<Vec<usize>>,
    pub dst: Arc<Vec<usize>>,
    pub neighbors: Arc<Vec<Vec<usize>>>,
}

impl Topology {
    pub fn new(n: usize, edges: Vec<(usize, usize)>) -> Self {
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in &edges {
            neighbors[a].push(b);
        }
        Self {
            n,
            src: Arc::new(edges.iter().map(|e| e.0).collect()),
            dst: Arc::new(edges.iter().map(|e| e.1).collect()),
            neighbors: Arc::new(neighbors),
            edges,
        }
    }

    /// Keep only edges whose endpoints are both retained.
    pub fn restricted(&self, keep: &[bool]) -> Topology {
        let edges = self
            .edges
            .iter()
            .copied()
            .filter(|&(a, b)| keep[a] && keep[b])
            .collect();
        Topology::new(self.n, edges)
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }
}

/// Symmetrised k-nearest-neighbour edges over patch coordinates. Distance
/// ties go to the lower node index. With `m ≤ k` the graph is complete.
pub fn build_knn_graph(coords: &[(i32, i32)], k: usize) -> Result<Vec<(usize, usize)>> {
    let m = coords.len();
    if m == 0 {
        return Err(Error::invalid("knn graph needs at least one coordinate"));
    }
    if k == 0 {
        return Err(Error::invalid("knn k must be positive"));
    }
    let mut set = BTreeSet::new();
    let mut cand: Vec<(i64, usize)> = Vec::with_capacity(m);
    for i in 0..m {
        cand.clear();
        let (xi, yi) = coords[i];
        for (j, &(xj, yj)) in coords.iter().enumerate() {
            if j != i {
                let (dx, dy) = ((xi - xj) as i64, (yi - yj) as i64);
                cand.push((dx * dx + dy * dy, j));
            }
        }
        let take = k.min(cand.len());
        if take < cand.len() {
            cand.select_nth_unstable(take);
        }
        for &(_, j) in &cand[..take] {
            set.insert((i, j));
            set.insert((j, i));
        }
    }
    Ok(set.into_iter().collect())
}

/// Settings of the synthetic cohort generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub n_slides: usize,
    pub patches_min: usize,
    pub patches_max: usize,
    pub feature_dim: usize,
    pub thumbnail_dim: usize,
    pub n_institutions: usize,
    /// Norm of each institution's additive bias vector.
    pub confounder_strength: f64,
    /// Scale of the per-slide continuous trivial shift (staining intensity).
    pub stain_strength: f64,
    /// Number of discrete stain levels, evenly spaced in [-1, 1]; 0 draws a
    /// continuous standard-normal stain instead.
    pub stain_levels: usize,
    /// Log-hazard per unit of the per-slide stain variable.
    pub stain_hazard: f64,
    /// Spread of per-institution log-hazard offsets.
    pub institution_hazard: f64,
    /// Institution whose stain-outcome coupling differs (an external site).
    pub shifted_institution: Option<usize>,
    pub shifted_stain_hazard: f64,
    pub causal_fraction: f64,
    /// Log-hazard per unit of the causal nodes' mean projection.
    pub causal_coef: f64,
    /// Standard deviation of the slide-level causal variable.
    pub causal_signal: f64,
    /// Offset of causal patches along a marker direction.
    pub marker_strength: f64,
    /// Standard deviation of a per-slide outcome-independent shift along the
    /// causal direction, applied to non-causal patches only.
    pub nuisance_signal: f64,
    pub feature_noise: f64,
    pub thumbnail_noise: f64,
    pub baseline_hazard: f64,
    /// Target fraction of observed events.
    pub event_rate: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_slides: 200,
            patches_min: 40,
            patches_max: 80,
            feature_dim: 16,
            thumbnail_dim: 16,
            n_institutions: 3,
            confounder_strength: 2.0,
            stain_strength: 0.0,
            stain_levels: 0,
            stain_hazard: 0.0,
            institution_hazard: 0.0,
            shifted_institution: None,
            shifted_stain_hazard: 0.0,
            causal_fraction: 0.25,
            causal_coef: 1.0,
            causal_signal: 1.0,
            marker_strength: 2.0,
            nuisance_signal: 0.0,
            feature_noise: 1.0,
            thumbnail_noise: 0.1,
            baseline_hazard: 0.1,
            event_rate: 0.7,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.causal_fraction > 0.0 && self.causal_fraction <= 1.0) {
            return Err(Error::config(format!(
                "causal_fraction must lie in (0, 1], got {}",
                self.causal_fraction
            )));
        }
        if self.n_institutions < 1 {
            return Err(Error::config("n_institutions must be at least 1"));
        }
        if self.n_slides == 0 {
            return Err(Error::config("n_slides must be positive"));
        }
        if self.patches_min == 0 || self.patches_min > self.patches_max {
            return Err(Error::config("need 1 <= patches_min <= patches_max"));
        }
        if self.feature_dim < 3 || self.thumbnail_dim == 0 {
            return Err(Error::config(
                "feature_dim must be >= 3 and thumbnail_dim >= 1",
            ));
        }
        if !(self.event_rate > 0.0 && self.event_rate <= 1.0) {
            return Err(Error::config("event_rate must lie in (0, 1]"));
        }
        if !(self.baseline_hazard > 0.0) {
            return Err(Error::config("baseline_hazard must be positive"));
        }
        if self.stain_levels == 1 {
            return Err(Error::config(
                "stain_levels must be 0 (continuous) or at least 2",
            ));
        }
        if let Some(k) = self.shifted_institution {
            if k >= self.n_institutions {
                return Err(Error::config(format!(
                    "shifted_institution {k} out of range"
                )));
            }
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Random unit vector orthogonal to every vector in `basis` (assumed orthonormal).
fn orthogonal_unit(rng: &mut ChaCha8Rng, d: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    loop {
        let mut v = normal_vec(rng, d);
        for b in basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        if dot(&v, &v) > 1e-6 {
            normalize(&mut v);
            return v;
        }
    }
}

/// The `count` nodes closest to `center` (ties by index): a contiguous blob.
fn contiguous_region(coords: &[(i32, i32)], center: usize, count: usize) -> Vec<bool> {
    let (cx, cy) = coords[center];
    let mut order: Vec<(i64, usize)> = coords
        .iter()
        .enumerate()
        .map(|(j, &(x, y))| {
            let (dx, dy) = ((x - cx) as i64, (y - cy) as i64);
            (dx * dx + dy * dy, j)
        })
        .collect();
    order.sort_unstable();
    let mut mask = vec![false; coords.len()];
    for &(_, j) in order.iter().take(count) {
        mask[j] = true;
    }
    mask
}

/// Censoring rate `c` such that the mean of `h_i / (h_i + c)` hits `event_rate`.
fn calibrate_censoring(hazards: &[f64], event_rate: f64) -> f64 {
    if event_rate >= 1.0 {
        return 0.0;
    }
    let frac = |c: f64| hazards.iter().map(|h| h / (h + c)).sum::<f64>() / hazards.len() as f64;
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while frac(hi) > event_rate {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) > event_rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Generate a cohort with planted institution bias, per-slide staining shift,
/// and a spatially contiguous causal region that drives the hazard.
pub fn generate_synthetic_cohort(config: &CohortConfig, seed: u64) -> Result<Cohort> {
    config.validate()?;
    let d = config.feature_dim;
    let d_f = config.thumbnail_dim;
    let mut rng = substream(seed, &[tags::GENERATE]);

    let causal_dir = orthogonal_unit(&mut rng, d, &[]);
    let marker_dir = orthogonal_unit(&mut rng, d, std::slice::from_ref(&causal_dir));
    let protected = vec![causal_dir.clone(), marker_dir.clone()];
    let stain_dir = orthogonal_unit(&mut rng, d, &protected);
    let inst_bias: Vec<Vec<f64>> = (0..config.n_institutions)
        .map(|_| {
            let mut v = orthogonal_unit(&mut rng, d, &protected);
            v.iter_mut().for_each(|x| *x *= config.confounder_strength);
            v
        })
        .collect();
    let inst_offset: Vec<f64> = (0..config.n_institutions)
        .map(|_| config.institution_hazard * rng.sample::<f64, _>(StandardNormal))
        .collect();
    // thumbnail projection, entries N(0, 1/d_f) so norms are preserved on average
    let proj_scale = 1.0 / (d_f as f64).sqrt();
    let thumb_proj: Vec<Vec<f64>> = (0..d_f)
        .map(|_| {
            normal_vec(&mut rng, d)
                .into_iter()
                .map(|x| x * proj_scale)
                .collect()
        })
        .collect();

    struct Draft {
        thumb: Vec<f32>,
        feats: Vec<f32>,
        coords: Vec<(i32, i32)>,
        inst: usize,
        mask: Vec<bool>,
        log_hazard: f64,
    }
    let mut drafts = Vec::with_capacity(config.n_slides);
    for i in 0..config.n_slides {
        let inst = i % config.n_institutions;
        let m = rng.random_range(config.patches_min..=config.patches_max);
        let width = (m as f64).sqrt().ceil() as usize;
        let coords: Vec<(i32, i32)> = (0..m)
            .map(|j| ((j % width) as i32, (j / width) as i32))
            .collect();
        let n_causal = ((config.causal_fraction * m as f64).round() as usize).clamp(1, m);
        let center = rng.random_range(0..m);
        let mask = contiguous_region(&coords, center, n_causal);

        let stain: f64 = match config.stain_levels {
            0 => rng.sample(StandardNormal),
            levels => {
                let level = rng.random_range(0..levels);
                -1.0 + 2.0 * level as f64 / (levels - 1) as f64
            }
        };
        let z = config.causal_signal * rng.sample::<f64, _>(StandardNormal);
        let nuisance = config.nuisance_signal * rng.sample::<f64, _>(StandardNormal);
        let shift: Vec<f64> = (0..d)
            .map(|k| inst_bias[inst][k] + config.stain_strength * stain * stain_dir[k])
            .collect();

        let mut feats = Vec::with_capacity(m * d);
        let mut causal_proj = 0.0;
        for &causal in &mask {
            let noise = normal_vec(&mut rng, d);
            let mut content: Vec<f64> = noise.iter().map(|x| config.feature_noise * x).collect();
            if causal {
                for k in 0..d {
                    content[k] += config.marker_strength * marker_dir[k] + z * causal_dir[k];
                }
                causal_proj += dot(&content, &causal_dir);
            } else {
                for k in 0..d {
                    content[k] += nuisance * causal_dir[k];
                }
            }
            feats.extend(content.iter().zip(&shift).map(|(c, s)| (c + s) as f32));
        }
        causal_proj /= n_causal as f64;

        let thumb_noise = normal_vec(&mut rng, d_f);
        let thumb: Vec<f32> = (0..d_f)
            .map(|r| (dot(&thumb_proj[r], &shift) + config.thumbnail_noise * thumb_noise[r]) as f32)
            .collect();

        let stain_coef = if config.shifted_institution == Some(inst) {
            config.shifted_stain_hazard
        } else {
            config.stain_hazard
        };
        let log_hazard = config.causal_coef * causal_proj + stain_coef * stain + inst_offset[inst];
        drafts.push(Draft {
            thumb,
            feats,
            coords,
            inst,
            mask,
            log_hazard,
        });
    }

    let hazards: Vec<f64> = drafts
        .iter()
        .map(|dr| config.baseline_hazard * dr.log_hazard.exp())
        .collect();
    let censor_rate = calibrate_censoring(&hazards, config.event_rate);
    let mut slides = Vec::with_capacity(drafts.len());
    for (i, (dr, &h)) in drafts.into_iter().zip(&hazards).enumerate() {
        let t_event = Exp::new(h)
            .map_err(|e| Error::invalid(e.to_string()))?
            .sample(&mut rng);
        let t_censor = if censor_rate > 0.0 {
            Exp::new(censor_rate)
                .map_err(|e| Error::invalid(e.to_string()))?
                .sample(&mut rng)
        } else {
            f64::INFINITY
        };
        let event = t_event <= t_censor;
        let time = t_event.min(t_censor).max(f64::MIN_POSITIVE);
        slides.push(SlideRecord {
            id: format!("slide_{i:05}"),
            thumbnail_feature: dr.thumb,
            patch_features: dr.feats,
            patch_coords: dr.coords,
            label: SurvivalLabel { time, event },
            planted_institution: Some(dr.inst),
            planted_causal_mask: Some(dr.mask),
            planted_risk: Some(dr.log_hazard),
        });
    }
    let mut cohort = Cohort::new(slides, d, d_f)?;
    cohort.generation_config = Some(config.clone());
    cohort.generation_seed = Some(seed);
    Ok(cohort)
}

#[derive(Serialize, Deserialize)]
struct ManifestSlide {
    id: String,
    file: String,
    n_patches: usize,
    time: f64,
    event: bool,
    #[serde(default)]
    planted_institution: Option<usize>,
    #[serde(default)]
    planted_causal_mask: Option<Vec<u8>>,
    #[serde(default)]
    planted_risk: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    feature_dim: usize,
    thumbnail_dim: usize,
    #[serde(default)]
    generation_config: Option<CohortConfig>,
    #[serde(default)]
    generation_seed: Option<u64>,
    slides: Vec<ManifestSlide>,
}

pub fn save_cohort(cohort: &Cohort, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(cohort.len());
    for (i, s) in cohort.slides.iter().enumerate() {
        let file = format!("slide_{i:05}.bin");
        let mut bytes = Vec::with_capacity(
            4 * (s.thumbnail_feature.len() + s.patch_features.len() + 2 * s.n_patches()),
        );
        for x in s.thumbnail_feature.iter().chain(&s.patch_features) {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        for &(x, y) in &s.patch_coords {
            bytes.extend_from_slice(&x.to_le_bytes());
            bytes.extend_from_slice(&y.to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestSlide {
            id: s.id.clone(),
            file,
            n_patches: s.n_patches(),
            time: s.label.time,
            event: s.label.event,
            planted_institution: s.planted_institution,
            planted_causal_mask: s
                .planted_causal_mask
                .as_ref()
                .map(|m| m.iter().map(|&b| b as u8).collect()),
            planted_risk: s.planted_risk,
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        feature_dim: cohort.feature_dim,
        thumbnail_dim: cohort.thumbnail_dim,
        generation_config: cohort.generation_config.clone(),
        generation_seed: cohort.generation_seed,
        slides: entries,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    export_labels_csv(cohort, dir.join("labels.csv"))
}

pub fn load_cohort(dir: impl AsRef<Path>) -> Result<Cohort> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        message: e.to_string(),
    })?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(Error::Parse {
            context: path.display().to_string(),
            message: format!(
                "unsupported format {} v{}",
                manifest.format, manifest.version
            ),
        });
    }
    if manifest.slides.is_empty() {
        return Err(Error::invalid("cohort must contain at least one slide"));
    }
    let (d, d_f) = (manifest.feature_dim, manifest.thumbnail_dim);
    let mut slides = Vec::with_capacity(manifest.slides.len());
    for entry in manifest.slides {
        let fpath = dir.join(&entry.file);
        let bytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
        let m = entry.n_patches;
        let expected = 4 * (d_f + m * d + 2 * m);
        if bytes.len() != expected {
            let have_floats = bytes.len().min(4 * (d_f + m * d)) / 4;
            let what = if have_floats == d_f + m * d {
                "patch coordinates missing or truncated"
            } else {
                "feature block truncated"
            };
            return Err(Error::Parse {
                context: format!("slide {}", entry.id),
                message: format!(
                    "{what}: file has {} bytes, expected {expected}",
                    bytes.len()
                ),
            });
        }
        let f32_at = |k: usize| f32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap());
        let i32_at = |k: usize| i32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap());
        let thumbnail_feature = (0..d_f).map(f32_at).collect();
        let patch_features = (d_f..d_f + m * d).map(f32_at).collect();
        let base = d_f + m * d;
        let patch_coords = (0..m)
            .map(|j| (i32_at(base + 2 * j), i32_at(base + 2 * j + 1)))
            .collect();
        let rec = SlideRecord {
            id: entry.id.clone(),
            thumbnail_feature,
            patch_features,
            patch_coords,
            label: SurvivalLabel {
                time: entry.time,
                event: entry.event,
            },
            planted_institution: entry.planted_institution,
            planted_causal_mask: entry
                .planted_causal_mask
                .map(|v| v.into_iter().map(|b| b != 0).collect()),
            planted_risk: entry.planted_risk,
        };
        rec.validate(d, d_f).map_err(|e| Error::Parse {
            context: format!("slide {}", entry.id),
            message: e.to_string(),
        })?;
        slides.push(rec);
    }
    let mut cohort = Cohort::new(slides, d, d_f)?;
    cohort.generation_config = manifest.generation_config;
    cohort.generation_seed = manifest.generation_seed;
    Ok(cohort)
}

pub fn export_labels_csv(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("id,time,event,institution\n");
    for s in &cohort.slides {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.id,
            s.label.time,
            s.label.event as u8,
            s.planted_institution
                .map(|k| k.to_string())
                .unwrap_or_default()
        ));
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_knn(coords: &[(i32, i32)], k: usize) -> BTreeSet<(usize, usize)> {
        let mut set = BTreeSet::new();
        for i in 0..coords.len() {
            let mut all: Vec<(i64, usize)> = (0..coords.len())
                .filter(|&j| j != i)
                .map(|j| {
                    let dx = (coords[i].0 - coords[j].0) as i64;
                    let dy = (coords[i].1 - coords[j].1) as i64;
                    (dx * dx + dy * dy, j)
                })
                .collect();
            all.sort();
            for &(_, j) in all.iter().take(k) {
                set.insert((i, j));
                set.insert((j, i));
            }
        }
        set
    }

    #[test]
    fn knn_two_nodes() {
        assert_eq!(
            build_knn_graph(&[(0, 0), (5, 5)], 1).unwrap(),
            vec![(0, 1), (1, 0)]
        );
    }

    #[test]
    fn knn_collinear_tie_goes_to_lower_index() {
        let e = build_knn_graph(&[(0, 0), (1, 0), (2, 0)], 1).unwrap();
        assert_eq!(e, vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
        // node 1 itself chose node 0; the edge to 2 comes only from node 2's choice
        let e = build_knn_graph(&[(0, 0), (1, 0), (2, 0), (50, 0)], 1).unwrap();
        assert!(e.contains(&(1, 0)));
    }

    #[test]
    fn knn_grid_interior_axis_neighbors() {
        let coords: Vec<(i32, i32)> = (0..25).map(|j| (j % 5, j / 5)).collect();
        let e = build_knn_graph(&coords, 4).unwrap();
        let center = 12;
        let out: BTreeSet<usize> = e.iter().filter(|p| p.0 == center).map(|p| p.1).collect();
        assert_eq!(out, [7, 11, 13, 17].into_iter().collect());
        assert_eq!(
            e.into_iter().collect::<BTreeSet<_>>(),
            brute_knn(&coords, 4)
        );
    }

    #[test]
    fn knn_small_graph_is_complete_and_empty_is_error() {
        let e = build_knn_graph(&[(0, 0), (3, 1), (9, 9)], 8).unwrap();
        assert_eq!(e.len(), 6);
        assert!(build_knn_graph(&[], 3).is_err());
        assert_eq!(build_knn_graph(&[(1, 1)], 3).unwrap(), vec![]);
    }

    #[test]
    fn knn_duplicate_coordinates_allowed() {
        let e = build_knn_graph(&[(0, 0), (0, 0), (0, 0)], 1).unwrap();
        assert!(e.contains(&(1, 0)) && e.contains(&(2, 0)));
    }

    #[test]
    fn graph_validation_and_attrs() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert!(Graph::new(x.clone(), vec![(0, 1)]).is_err());
        assert!(Graph::new(x.clone(), vec![(0, 0)]).is_err());
        assert!(Graph::new(x.clone(), vec![(0, 2), (2, 0)]).is_err());
        let mut g = Graph::new(x, vec![(0, 1), (1, 0)]).unwrap();
        assert_eq!(g.edge_attrs().row(0), &[1.0, 2.0, 3.0, 4.0]);
        g.set_node_features(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap())
            .unwrap();
        assert_eq!(g.edge_attrs().row(1), &[7.0, 8.0, 5.0, 6.0]);
    }

    #[test]
    fn generator_validates_config() {
        let mut c = CohortConfig {
            causal_fraction: 0.0,
            ..Default::default()
        };
        assert!(generate_synthetic_cohort(&c, 1).is_err());
        c.causal_fraction = 1.2;
        assert!(generate_synthetic_cohort(&c, 1).is_err());
        c.causal_fraction = 0.5;
        c.n_institutions = 0;
        assert!(generate_synthetic_cohort(&c, 1).is_err());
    }

    #[test]
    fn generator_full_causal_fraction() {
        let c = CohortConfig {
            n_slides: 5,
            causal_fraction: 1.0,
            ..Default::default()
        };
        let cohort = generate_synthetic_cohort(&c, 2).unwrap();
        for s in &cohort.slides {
            assert!(s.planted_causal_mask.as_ref().unwrap().iter().all(|&b| b));
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let c = CohortConfig {
            n_slides: 10,
            ..Default::default()
        };
        assert_eq!(
            generate_synthetic_cohort(&c, 9).unwrap(),
            generate_synthetic_cohort(&c, 9).unwrap()
        );
        assert_ne!(
            generate_synthetic_cohort(&c, 9).unwrap(),
            generate_synthetic_cohort(&c, 10).unwrap()
        );
    }

    #[test]
    fn empty_cohort_rejected() {
        let err = Cohort::new(vec![], 4, 4).unwrap_err();
        assert!(err
            .to_string()
            .contains("cohort must contain at least one slide"));
    }

    #[test]
    fn censoring_calibration_hits_target() {
        let h = vec![0.1, 0.5, 1.0, 2.0];
        let c = calibrate_censoring(&h, 0.6);
        let f = h.iter().map(|x| x / (x + c)).sum::<f64>() / 4.0;
        assert!((f - 0.6).abs() < 1e-9);
        assert_eq!(calibrate_censoring(&h, 1.0), 0.0);
    }
}
