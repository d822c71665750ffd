//! Acceptance suite: one line per criterion.
//!
//! Exits non-zero on failures only when `CMIL_ACCEPTANCE_STRICT=1`, so the
//! regular test run reports the outcome without aborting the workspace run.

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use cmil::audit::{
    audit_setup, check_total_loss, total_loss_gradient_magnitudes, Scale, GRADIENT_TOLERANCE,
};
use cmil::autodiff::{Tape, Tensor};
use cmil::checkpoint::Checkpoint;
use cmil::cohort::{
    build_knn_graph, generate_synthetic_cohort, load_cohort, save_cohort, Cohort, CohortConfig,
    Topology,
};
use cmil::report::{NodeProbSlide, NodeProbsExport};
use cmil::rng::substream;
use cmil::sampler::{draw_mask, likelihood, mask_eval, sample_with_draw};
use cmil::survival::{c_index, cox_loss_value, log_rank_test};
use cmil::trainer::{disentangled_features, evaluate, train, EvalResult, TrainConfig};
use rand::Rng;

mod common;

use common::{c_index_pairs, cox_enumerated, random_labels};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn list(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.3}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let (cohort, config) = audit_setup(Scale::Tiny, 3).unwrap();
    let max_nodes = cohort.slides.iter().map(|s| s.n_patches()).max().unwrap();
    let check = check_total_loss(&cohort, &config).unwrap();
    let silent: Vec<String> = total_loss_gradient_magnitudes(&cohort, &config)
        .unwrap()
        .into_iter()
        .filter(|(_, g)| *g == 0.0)
        .map(|(n, _)| n)
        .collect();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        cohort.len() == 4 && max_nodes <= 12 && check.passed() && silent.is_empty() && secs < 60.0,
        format!(
            "max relative error {:.2e} over {} coordinates (limit {GRADIENT_TOLERANCE:e}), tensors without gradient: {:?}, {secs:.1} s",
            check.max_rel_error, check.coordinates, silent
        ),
    )
}

fn mask_likelihood_normalization() -> Verdict {
    let mut r = substream(100, &[2]);
    let mut worst: f64 = 0.0;
    for m in 1..=12 {
        for _ in 0..50 {
            let probs: Vec<f64> = (0..m).map(|_| r.random::<f64>()).collect();
            let total: f64 = (0u32..1 << m)
                .map(|bits| {
                    let mask: Vec<bool> = (0..m).map(|j| bits >> j & 1 == 1).collect();
                    likelihood(&probs, &mask).unwrap()
                })
                .sum();
            worst = worst.max((total - 1.0).abs());
        }
    }
    verdict(
        worst <= 1e-12,
        format!("largest deviation from 1: {worst:.2e}"),
    )
}

fn cox_oracle() -> Verdict {
    let mut r = substream(100, &[3]);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.random_range(2..=32);
        let labels = random_labels(&mut r, n, 10);
        let risks: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        worst = worst.max(
            (cox_loss_value(&risks, &labels).unwrap() - cox_enumerated(&risks, &labels)).abs(),
        );
    }
    verdict(
        worst <= 1e-10,
        format!("largest difference over 1000 batches: {worst:.2e}"),
    )
}

fn c_index_oracle() -> Verdict {
    let mut r = substream(100, &[4]);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = r.random_range(1..=50);
        let labels = random_labels(&mut r, n, 8);
        let risks: Vec<f64> = (0..n).map(|_| r.random_range(0..6) as f64).collect();
        if c_index(&risks, &labels) != c_index_pairs(&risks, &labels) {
            mismatches += 1;
        }
    }
    verdict(
        mismatches == 0,
        format!("{mismatches} of 1000 cohorts differ"),
    )
}

fn ste_expectation() -> Verdict {
    let mut r = substream(100, &[5]);
    let (m, d) = (30, 4);
    let x = Tensor::new(
        m,
        d,
        (0..m * d).map(|_| r.random_range(-2.0..2.0)).collect(),
    )
    .unwrap();
    let probs = Tensor::column_vector((0..m).map(|_| r.random_range(0.05..0.95)).collect());
    let coords: Vec<(i32, i32)> = (0..m as i32).map(|j| (j % 6, j / 6)).collect();
    let topo = Topology::new(m, build_knn_graph(&coords, 4).unwrap());
    let embed = |tape: &Tape, v| {
        tape.value(tape.scale(tape.sum_cols(v), 1.0 / m as f64))
            .into_data()
    };
    let soft = {
        let tape = Tape::new();
        let s = mask_eval(
            &tape,
            tape.constant(x.clone()),
            tape.constant(probs.clone()),
            &topo,
        )
        .unwrap();
        embed(&tape, s.causal_features)
    };
    let draws = 20_000;
    let (mut sum, mut sum_sq) = (vec![0.0; d], vec![0.0; d]);
    for _ in 0..draws {
        let tape = Tape::new();
        let draw = draw_mask(probs.data(), &mut r);
        let p = tape.param(probs.clone());
        let s = sample_with_draw(&tape, tape.constant(x.clone()), p, &topo, draw).unwrap();
        for (k, v) in embed(&tape, s.causal_features).into_iter().enumerate() {
            sum[k] += v;
            sum_sq[k] += v * v;
        }
    }
    let z: Vec<f64> = (0..d)
        .map(|k| {
            let mean = sum[k] / draws as f64;
            let se = ((sum_sq[k] / draws as f64 - mean * mean) / draws as f64).sqrt();
            (mean - soft[k]).abs() / se
        })
        .collect();
    let worst = z.iter().cloned().fold(0.0, f64::max);
    verdict(
        worst <= 3.0,
        format!("largest deviation {worst:.2} standard errors"),
    )
}

fn institution_gap(features: &[Tensor], cohort: &Cohort) -> f64 {
    let d = cohort.feature_dim;
    let mut sums = [vec![0.0; d], vec![0.0; d]];
    let mut counts = [0.0; 2];
    for (f, s) in features.iter().zip(&cohort.slides) {
        let k = s.planted_institution.unwrap();
        for (a, b) in sums[k].iter_mut().zip(f.mean_rows().data()) {
            *a += b;
        }
        counts[k] += 1.0;
    }
    (0..d)
        .map(|j| (sums[0][j] / counts[0] - sums[1][j] / counts[1]).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn confounder_removal() -> Verdict {
    let mut ratios = Vec::new();
    for seed in SEEDS {
        let cohort = generate_synthetic_cohort(
            &CohortConfig {
                n_slides: 400,
                n_institutions: 2,
                confounder_strength: 2.0,
                ..CohortConfig::default()
            },
            seed,
        )
        .unwrap();
        let idx: Vec<usize> = (0..cohort.len()).collect();
        let (tr, va) = (
            cohort.subset(&idx[..320]).unwrap(),
            cohort.subset(&idx[320..]).unwrap(),
        );
        let config = TrainConfig {
            epochs: 6,
            learning_rate: 1e-3,
            seed,
            ..TrainConfig::default()
        };
        let outcome = train(&tr, Some(&va), &config).unwrap();
        let raw: Vec<Tensor> = cohort
            .slides
            .iter()
            .map(|s| s.features(cohort.feature_dim))
            .collect();
        let after = disentangled_features(&outcome.checkpoint, &cohort).unwrap();
        ratios.push(institution_gap(&after, &cohort) / institution_gap(&raw, &cohort));
    }
    let med = median(&ratios);
    verdict(
        med <= 0.10,
        format!("median gap ratio {med:.3} (per seed: {})", list(&ratios)),
    )
}

fn adaptive_k() -> Verdict {
    let mut ks = Vec::new();
    for seed in SEEDS {
        let cohort = generate_synthetic_cohort(&CohortConfig::default(), seed).unwrap();
        let config = TrainConfig {
            k_max: 6,
            seed,
            ..TrainConfig::default()
        };
        let config = TrainConfig {
            epochs: config.warm_up_epochs + 1,
            ..config
        };
        let outcome = train(&cohort, None, &config).unwrap();
        ks.push(outcome.history[config.warm_up_epochs].k_effective.unwrap());
    }
    let hits = ks.iter().filter(|&&k| k == 3).count();
    verdict(
        hits >= 4,
        format!("K effective per seed {ks:?}, {hits}/5 equal 3"),
    )
}

/// Planted cohort shared by the recovery, ablation and log-rank criteria:
/// 160 train, 40 validation, 250 held-out slides of 60 nodes.
struct PlantedRun {
    node_auroc: f64,
    full: EvalResult,
    no_contrastive: EvalResult,
    train_secs: f64,
}

fn planted_runs() -> Vec<PlantedRun> {
    SEEDS
        .iter()
        .map(|&seed| {
            let cohort = generate_synthetic_cohort(
                &CohortConfig {
                    n_slides: 450,
                    patches_min: 60,
                    patches_max: 60,
                    causal_fraction: 0.25,
                    marker_strength: 3.0,
                    nuisance_signal: 1.0,
                    ..CohortConfig::default()
                },
                seed,
            )
            .unwrap();
            let idx: Vec<usize> = (0..cohort.len()).collect();
            let tr = cohort.subset(&idx[..160]).unwrap();
            let va = cohort.subset(&idx[160..200]).unwrap();
            let te = cohort.subset(&idx[200..]).unwrap();
            let full_cfg = TrainConfig {
                epochs: 20,
                learning_rate: 1e-3,
                lambda_ct: 1.0,
                seed,
                ..TrainConfig::default()
            };
            let start = Instant::now();
            let full = train(&tr, Some(&va), &full_cfg).unwrap();
            let train_secs = start.elapsed().as_secs_f64();
            let ablated = train(
                &tr,
                Some(&va),
                &TrainConfig {
                    lambda_ct: 0.0,
                    ..full_cfg
                },
            )
            .unwrap();
            let full_eval = evaluate(&full.checkpoint, &te).unwrap();
            // node recovery is scored on the first 50 held-out slides
            let slides = te.slides[..50]
                .iter()
                .zip(&full_eval.node_probs)
                .map(|(s, p)| NodeProbSlide {
                    id: s.id.clone(),
                    coords: s.patch_coords.clone(),
                    probs: p.clone(),
                    causal_mask: s.planted_causal_mask.clone(),
                })
                .collect();
            PlantedRun {
                node_auroc: NodeProbsExport { slides }.causal_auroc().unwrap(),
                no_contrastive: evaluate(&ablated.checkpoint, &te).unwrap(),
                full: full_eval,
                train_secs,
            }
        })
        .collect()
}

fn subgraph_recovery(runs: &[PlantedRun]) -> Verdict {
    let aurocs: Vec<f64> = runs.iter().map(|r| r.node_auroc).collect();
    let slowest = runs.iter().map(|r| r.train_secs).fold(0.0, f64::max);
    let med = median(&aurocs);
    verdict(
        med >= 0.80 && slowest <= 600.0,
        format!(
            "median node AUROC {med:.3} (per seed: {}), slowest training {slowest:.0} s",
            list(&aurocs)
        ),
    )
}

fn generalization_direction() -> Verdict {
    let mut gaps = Vec::new();
    let mut pairs = Vec::new();
    for seed in SEEDS {
        let cohort = generate_synthetic_cohort(
            &CohortConfig {
                n_slides: 360,
                patches_min: 60,
                patches_max: 60,
                n_institutions: 3,
                confounder_strength: 0.5,
                stain_strength: 2.0,
                stain_levels: 2,
                stain_hazard: 1.0,
                shifted_institution: Some(2),
                shifted_stain_hazard: -1.0,
                marker_strength: 3.0,
                nuisance_signal: 1.0,
                ..CohortConfig::default()
            },
            seed,
        )
        .unwrap();
        let (pool, ood): (Vec<usize>, Vec<usize>) =
            (0..cohort.len()).partition(|&i| cohort.slides[i].planted_institution != Some(2));
        let n_val = pool.len() / 5;
        let tr = cohort.subset(&pool[n_val..]).unwrap();
        let va = cohort.subset(&pool[..n_val]).unwrap();
        let te = cohort.subset(&ood).unwrap();
        let full = TrainConfig {
            epochs: 20,
            learning_rate: 1e-3,
            lambda_ct: 1.0,
            seed,
            ..TrainConfig::default()
        };
        let baseline = TrainConfig {
            use_cafd: false,
            use_sampler: false,
            lambda_mse: 0.0,
            lambda_ct: 0.0,
            lambda_ratio: 0.0,
            ..full.clone()
        };
        let score = |cfg: &TrainConfig| {
            let out = train(&tr, Some(&va), cfg).unwrap();
            evaluate(&out.checkpoint, &te).unwrap().c_index.unwrap()
        };
        let (f, b) = (score(&full), score(&baseline));
        gaps.push(f - b);
        pairs.push(format!("{f:.3}/{b:.3}"));
    }
    let med = median(&gaps);
    verdict(
        med >= 0.02,
        format!(
            "median held-out C-index gain {med:.3} (full/baseline: {})",
            pairs.join(" ")
        ),
    )
}

fn ablation_direction(runs: &[PlantedRun]) -> Verdict {
    let pairs: Vec<(f64, f64)> = runs
        .iter()
        .map(|r| (r.full.c_index.unwrap(), r.no_contrastive.c_index.unwrap()))
        .collect();
    let wins = pairs.iter().filter(|(f, a)| a < f).count();
    let shown: Vec<String> = pairs
        .iter()
        .map(|(f, a)| format!("{f:.3}/{a:.3}"))
        .collect();
    verdict(
        wins >= 4,
        format!(
            "contrastive term removed lowers C-index in {wins}/5 seeds (full/ablated: {})",
            shown.join(" ")
        ),
    )
}

fn log_rank_sanity(runs: &[PlantedRun]) -> Verdict {
    let ps: Vec<f64> = runs
        .iter()
        .map(|r| r.full.log_rank.map_or(1.0, |lr| lr.p_value))
        .collect();
    let hits = ps.iter().filter(|&&p| p < 0.05).count();
    let labels = random_labels(&mut substream(100, &[11]), 20, 6);
    let doubled = [labels.clone(), labels].concat();
    let groups: Vec<bool> = (0..40).map(|i| i < 20).collect();
    let same = log_rank_test(&doubled, &groups).unwrap();
    let identical_ok = same.statistic == 0.0 && same.p_value == 1.0;
    verdict(
        hits >= 4 && identical_ok,
        format!(
            "p < 0.05 in {hits}/5 seeds (p: {}), identical groups give statistic {} and p {}",
            ps.iter()
                .map(|p| format!("{p:.1e}"))
                .collect::<Vec<_>>()
                .join(" "),
            same.statistic,
            same.p_value
        ),
    )
}

fn determinism_and_roundtrips() -> Verdict {
    let cohort = generate_synthetic_cohort(
        &CohortConfig {
            n_slides: 40,
            patches_min: 20,
            patches_max: 30,
            ..CohortConfig::default()
        },
        12,
    )
    .unwrap();
    let config = TrainConfig {
        epochs: 4,
        seed: 12,
        ..TrainConfig::default()
    };
    let a = train(&cohort, None, &config).unwrap();
    let b = train(&cohort, None, &config).unwrap();
    let same_history = a.history == b.history;

    let dir = tempfile::tempdir().unwrap();
    save_cohort(&cohort, dir.path().join("cohort")).unwrap();
    let cohort_ok = load_cohort(dir.path().join("cohort")).unwrap() == cohort;
    let path = dir.path().join("ckpt.bin");
    a.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let ckpt_ok = back == a.checkpoint
        && evaluate(&back, &cohort).unwrap() == evaluate(&a.checkpoint, &cohort).unwrap();
    verdict(
        same_history && cohort_ok && ckpt_ok,
        format!("identical histories {same_history}, cohort round-trip {cohort_ok}, checkpoint round-trip {ckpt_ok}"),
    )
}

fn run(number: usize, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    println!(
        "criterion {number:>2} {name:<36} {} | {} [{:.1} s]",
        if v.passed { "PASS" } else { "FAIL" },
        v.detail,
        start.elapsed().as_secs_f64()
    );
    v.passed
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error"))
        .try_init();
    let mut passed = Vec::new();
    passed.push(run(1, "gradient correctness", gradient_correctness));
    passed.push(run(
        2,
        "mask likelihood normalization",
        mask_likelihood_normalization,
    ));
    passed.push(run(3, "cox oracle equivalence", cox_oracle));
    passed.push(run(4, "c-index oracle equivalence", c_index_oracle));
    passed.push(run(5, "straight-through expectation", ste_expectation));
    passed.push(run(6, "confounder removal", confounder_removal));
    passed.push(run(7, "adaptive cluster count", adaptive_k));
    let start = Instant::now();
    let runs = panic::catch_unwind(planted_runs).ok();
    eprintln!(
        "planted-cohort training took {:.0} s",
        start.elapsed().as_secs_f64()
    );
    let planted = |f: fn(&[PlantedRun]) -> Verdict| {
        let runs = runs.as_deref();
        move || match runs {
            Some(r) => f(r),
            None => verdict(false, "planted-cohort training panicked"),
        }
    };
    passed.push(run(
        8,
        "causal subgraph recovery",
        planted(subgraph_recovery),
    ));
    passed.push(run(
        9,
        "held-out institution generalization",
        generalization_direction,
    ));
    passed.push(run(
        10,
        "contrastive ablation direction",
        planted(ablation_direction),
    ));
    passed.push(run(11, "log-rank sanity", planted(log_rank_sanity)));
    passed.push(run(
        12,
        "determinism and round-trips",
        determinism_and_roundtrips,
    ));
    let n_pass = passed.iter().filter(|&&p| p).count();
    println!("acceptance: {n_pass}/{} criteria passed", passed.len());
    if n_pass < passed.len() && std::env::var("CMIL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
