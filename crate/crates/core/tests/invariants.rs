//! Property tests over randomly generated inputs.

use cmil::autodiff::{grad_check, Tape, Tensor};
use cmil::cafd::{assign, disentangle, estimate_bias};
use cmil::cohort::{build_knn_graph, Graph, SurvivalLabel, Topology};
use cmil::gt::{GraphContext, GraphTransformer, GtLayer};
use cmil::nn::ParamStore;
use cmil::rng::substream;
use cmil::sampler::{mask_eval, sample_with_draw, Sampler};
use cmil::survival::{
    c_index, contrastive_loss, cox_loss_value, km_curve, total_loss, LossTerms, LossWeights,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn tensor(rows: usize, cols: usize, seed: u64, scale: f64) -> Tensor {
    let mut r = substream(seed, &[rows as u64, cols as u64]);
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| scale * r.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn grid_topology(m: usize, k: usize) -> Topology {
    let w = (m as f64).sqrt().ceil() as i32;
    let coords: Vec<(i32, i32)> = (0..m as i32).map(|j| (j % w, j / w)).collect();
    Topology::new(m, build_knn_graph(&coords, k).unwrap())
}

/// Relabel node `i` as `perm[i]`.
fn permute(x: &Tensor, topo: &Topology, perm: &[usize]) -> (Tensor, Topology) {
    let mut rows = vec![Vec::new(); x.rows()];
    for (i, &p) in perm.iter().enumerate() {
        rows[p] = x.row(i).to_vec();
    }
    let edges = topo
        .edges
        .iter()
        .map(|&(a, b)| (perm[a], perm[b]))
        .collect();
    (
        Tensor::from_rows(&rows).unwrap(),
        Topology::new(topo.n, edges),
    )
}

fn labels_strategy(max: usize) -> impl Strategy<Value = Vec<SurvivalLabel>> {
    prop::collection::vec((1u32..8, any::<bool>()), 2..max).prop_map(|v| {
        v.into_iter()
            .map(|(t, event)| SurvivalLabel {
                time: t as f64,
                event,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn knn_is_symmetric_loop_free_and_matches_degree(
        coords in prop::collection::vec((-15i32..15, -15i32..15), 1..200),
        k in 1usize..12,
    ) {
        let edges = build_knn_graph(&coords, k).unwrap();
        let m = coords.len();
        let set: std::collections::BTreeSet<_> = edges.iter().copied().collect();
        let mut out_degree = vec![0; m];
        for &(a, b) in &edges {
            prop_assert!(a != b);
            prop_assert!(set.contains(&(b, a)));
            out_degree[a] += 1;
        }
        prop_assert!(out_degree.iter().all(|&d| d >= k.min(m - 1)));
    }

    #[test]
    fn edge_attrs_follow_node_updates(m in 2usize..20, d in 1usize..5, seed in 0u64..1000) {
        let topo = grid_topology(m, 3);
        let mut g = Graph::new(tensor(m, d, seed, 1.0), topo.edges.clone()).unwrap();
        let x = tensor(m, d, seed + 1, 2.0);
        g.set_node_features(x.clone()).unwrap();
        for (e, &(a, b)) in g.edges().iter().enumerate() {
            let row = g.edge_attrs().row(e);
            prop_assert_eq!(&row[..d], x.row(a));
            prop_assert_eq!(&row[d..], x.row(b));
        }
    }

    #[test]
    fn ste_forward_is_the_sample_and_backward_the_identity(
        probs in prop::collection::vec(0.0f64..1.0, 1..30),
        seed in 0u64..1000,
    ) {
        let mut r = substream(seed, &[]);
        let sample: Vec<bool> = probs.iter().map(|_| r.random_bool(0.5)).collect();
        let w: Vec<f64> = probs.iter().map(|_| r.random_range(-2.0..2.0)).collect();
        let tape = Tape::new();
        let p = tape.param(Tensor::column_vector(probs.clone()));
        let mask = tape.ste_mask(p, &sample).unwrap();
        let expect: Vec<f64> = sample.iter().map(|&s| s as u8 as f64).collect();
        let value = tape.value(mask);
        prop_assert_eq!(value.data(), &expect[..]);
        let loss = tape.sum(tape.mul(mask, tape.constant(Tensor::column_vector(w.clone()))).unwrap());
        let g = tape.backward(loss).unwrap();
        prop_assert_eq!(g.get(p).unwrap().data(), &w[..]);
    }

    #[test]
    fn backward_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x0 = tensor(4, 3, seed, 1.0);
        let grad = |which: u8| {
            let tape = Tape::new();
            let x = tape.param(x0.clone());
            let f = tape.sum(tape.tanh(tape.matmul(x, tape.transpose(x)).unwrap()));
            let g = tape.mean(tape.square(tape.sigmoid(x)));
            let root = match which {
                0 => f,
                1 => g,
                _ => tape.add(tape.scale(f, a), tape.scale(g, b)).unwrap(),
            };
            tape.backward(root).unwrap().get(x).unwrap().clone()
        };
        let (gf, gg, gc) = (grad(0), grad(1), grad(2));
        for i in 0..gc.len() {
            let lin = a * gf.data()[i] + b * gg.data()[i];
            prop_assert!((gc.data()[i] - lin).abs() <= 1e-12 * (1.0 + lin.abs()));
        }
    }

    #[test]
    fn assignments_are_distributions(n in 1usize..20, k in 1usize..6, sharpness in 0.1f64..20.0, seed in 0u64..1000) {
        let tape = Tape::new();
        let p = assign(&tape, tape.constant(tensor(n, 3, seed, 3.0)), tape.constant(tensor(k, 3, seed + 7, 3.0)), sharpness).unwrap();
        let p = tape.value(p);
        for i in 0..n {
            let row = p.row(i);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn bias_identities_hold(n in 3usize..30, k in 1usize..5, seed in 0u64..1000) {
        let tape = Tape::new();
        let p = tape.value(assign(&tape, tape.constant(tensor(n, 2, seed, 2.0)), tape.constant(tensor(k, 2, seed + 3, 2.0)), 1.0).unwrap());
        let means = tensor(n, 4, seed + 5, 1.5);
        let bias = estimate_bias(&p, &means, 64).unwrap();
        for c in 0..k {
            for j in 0..4 {
                prop_assert_eq!(bias.cluster_bias.get(c, j), bias.cluster_means.get(c, j) - bias.global_mean.get(0, j));
            }
        }
        if bias.degenerate.iter().all(|&d| !d) {
            for j in 0..4 {
                let weighted: f64 = (0..k)
                    .map(|c| (0..n).map(|i| p.get(i, c)).sum::<f64>() / n as f64 * bias.cluster_means.get(c, j))
                    .sum();
                prop_assert!((weighted - bias.global_mean.get(0, j)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn single_cluster_disentangling_is_identity(m in 1usize..20, n in 2usize..10, seed in 0u64..1000) {
        let tape = Tape::new();
        let means = tensor(n, 3, seed, 2.0);
        let onehot = Tensor::full(n, 1, 1.0);
        let bias = estimate_bias(&onehot, &means, 64).unwrap();
        let v = tensor(m, 3, seed + 1, 2.0);
        let out = disentangle(&tape, tape.constant(v.clone()), tape.constant(Tensor::full(1, 1, 1.0)), tape.constant(bias.cluster_bias)).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(v.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn training_split_partitions_nodes(m in 1usize..25, seed in 0u64..1000) {
        let mut r = substream(seed, &[1]);
        let draw: Vec<bool> = (0..m).map(|_| r.random_bool(0.5)).collect();
        let x = tensor(m, 3, seed, 1.0);
        let topo = grid_topology(m, 3);
        let tape = Tape::new();
        let probs = tape.param(Tensor::column_vector((0..m).map(|_| r.random::<f64>()).collect()));
        let s = sample_with_draw(&tape, tape.constant(x.clone()), probs, &topo, draw.clone()).unwrap();
        let (c, o) = (tape.value(s.causal_features), tape.value(s.complement_features));
        for j in 0..m {
            let (in_c, in_o) = (c.row(j).iter().any(|&v| v != 0.0), o.row(j).iter().any(|&v| v != 0.0));
            prop_assert!(!(in_c && in_o));
            let expect: &[f64] = if draw[j] { c.row(j) } else { o.row(j) };
            prop_assert_eq!(expect, x.row(j));
        }
        for &(a, b) in &s.causal_topology.edges {
            prop_assert!(draw[a] && draw[b]);
        }
        for &(a, b) in &s.complement_topology.edges {
            prop_assert!(!draw[a] && !draw[b]);
        }
    }

    #[test]
    fn graph_transformer_is_permutation_equivariant(m in 2usize..16, seed in 0u64..1000) {
        let width = 4;
        let mut rng = substream(seed, &[2]);
        let mut store = ParamStore::new();
        let gt = GraphTransformer::new(&mut store, "gt", width, 2, 2, &mut rng).unwrap();
        let x = tensor(m, width, seed, 1.0);
        let topo = grid_topology(m, 3);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let (px, ptopo) = permute(&x, &topo, &perm);
        let run = |x: &Tensor, topo: &Topology| {
            let ctx = GraphContext::new(topo.clone(), 3, width, 2).unwrap();
            let tape = Tape::new();
            let b = store.bind_frozen(&tape);
            let out = gt.forward(&b, tape.constant(x.clone()), &ctx).unwrap();
            tape.value(out)
        };
        let (base, moved) = (run(&x, &topo), run(&px, &ptopo));
        for i in 0..m {
            prop_assert!((base.get(i, 0) - moved.get(perm[i], 0)).abs() <= 1e-9);
        }
    }

    #[test]
    fn node_probabilities_are_permutation_equivariant(m in 2usize..16, seed in 0u64..1000) {
        let mut rng = substream(seed, &[3]);
        let mut store = ParamStore::new();
        let sampler = Sampler::new(&mut store, 6, 4, 2, 2, &mut rng).unwrap();
        let x = tensor(m, 6, seed, 1.0);
        let topo = grid_topology(m, 3);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let (px, ptopo) = permute(&x, &topo, &perm);
        let run = |x: &Tensor, topo: &Topology| {
            let ctx = GraphContext::new(topo.clone(), 3, 4, 2).unwrap();
            let tape = Tape::new();
            let b = store.bind_frozen(&tape);
            tape.value(sampler.node_probabilities(&b, tape.constant(x.clone()), &ctx).unwrap())
        };
        let (base, moved) = (run(&x, &topo), run(&px, &ptopo));
        for i in 0..m {
            let p = base.get(i, 0);
            prop_assert!(p > 0.0 && p < 1.0);
            prop_assert!((p - moved.get(perm[i], 0)).abs() <= 1e-9);
        }
    }

    #[test]
    fn attention_is_a_distribution_per_neighbourhood(m in 2usize..16, seed in 0u64..1000, scale in prop::sample::select(vec![1.0, 1e3])) {
        let width = 4;
        let mut rng = substream(seed, &[4]);
        let mut store = ParamStore::new();
        let layer = GtLayer::new(&mut store, "l", width, 2, &mut rng).unwrap();
        let topo = grid_topology(m, 3);
        let ctx = GraphContext::new(topo.clone(), 3, width, 2).unwrap();
        let tape = Tape::new();
        let b = store.bind_frozen(&tape);
        let h = tape.constant(tensor(m, width, seed, scale));
        let attrs = tape.concat_cols(&[
            tape.gather_rows(h, topo.src.clone()).unwrap(),
            tape.gather_rows(h, topo.dst.clone()).unwrap(),
        ]).unwrap();
        let trace = layer.forward(&b, h, attrs, &ctx).unwrap();
        prop_assert!(tape.value(trace.output).is_finite());
        for a in trace.attention {
            let a = tape.value(a);
            let mut sums = vec![0.0; m];
            for (e, &(src, _)) in topo.edges.iter().enumerate() {
                prop_assert!(a.get(e, 0) >= 0.0);
                sums[src] += a.get(e, 0);
            }
            for (i, s) in sums.iter().enumerate() {
                if !topo.neighbors[i].is_empty() {
                    prop_assert!((s - 1.0).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn c_index_ignores_increasing_transforms(labels in labels_strategy(40), seed in 0u64..1000) {
        let mut r = substream(seed, &[5]);
        let risks: Vec<f64> = labels.iter().map(|_| r.random_range(-2.0..2.0)).collect();
        let moved: Vec<f64> = risks.iter().map(|x| (3.0 * x).exp() + x.powi(3)).collect();
        let c = c_index(&risks, &labels);
        prop_assert_eq!(c, c_index(&moved, &labels));
        if let Some(c) = c {
            prop_assert!((0.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn cox_loss_ignores_shared_shift(labels in labels_strategy(32), shift in -20.0f64..20.0, seed in 0u64..1000) {
        let mut r = substream(seed, &[6]);
        let risks: Vec<f64> = labels.iter().map(|_| r.random_range(-3.0..3.0)).collect();
        let shifted: Vec<f64> = risks.iter().map(|x| x + shift).collect();
        let (a, b) = (cox_loss_value(&risks, &labels).unwrap(), cox_loss_value(&shifted, &labels).unwrap());
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn km_curves_are_non_increasing_from_one(labels in labels_strategy(40), seed in 0u64..1000) {
        let mut r = substream(seed, &[7]);
        let groups: Vec<usize> = labels.iter().map(|_| r.random_range(0..3)).collect();
        for c in km_curve(&labels, &groups).unwrap() {
            let mut prev = 1.0;
            for &s in &c.survival {
                prop_assert!((0.0..=1.0).contains(&s) && s <= prev);
                prev = s;
            }
            prop_assert!(c.times.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn total_loss_is_linear_in_each_weight(terms in prop::array::uniform5(-5.0f64..5.0), w in prop::array::uniform3(0.0f64..2.0)) {
        let eval = |w: [f64; 3]| {
            let tape = Tape::new();
            let v: Vec<_> = terms.iter().map(|&x| tape.constant(Tensor::scalar(x))).collect();
            let t = LossTerms { cox_causal: v[0], cox_full: v[1], mse: v[2], contrastive: v[3], ratio: v[4] };
            let weights = LossWeights { lambda_mse: w[0], lambda_ct: w[1], lambda_ratio: w[2], nu: 0.5 };
            tape.item(total_loss(&tape, &t, &weights).unwrap())
        };
        let base = eval(w);
        for i in 0..3 {
            let mut doubled = w;
            doubled[i] *= 2.0;
            // doubling λ_i adds λ_i · term_i
            let expect = base + w[i] * terms[2 + i];
            prop_assert!((eval(doubled) - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn contrastive_loss_falls_with_causal_and_rises_with_complement_similarity(seed in 0u64..1000) {
        let full = tensor(3, 4, seed, 1.0);
        let causal = tensor(3, 4, seed + 1, 1.0);
        let comp = tensor(3, 4, seed + 2, 1.0);
        let eval = |causal: &Tensor, comp: &Tensor| {
            let tape = Tape::new();
            let (l, _) = contrastive_loss(&tape, tape.constant(full.clone()), tape.constant(causal.clone()), tape.constant(comp.clone()), 0.5).unwrap();
            tape.item(l)
        };
        let toward = |from: &Tensor| {
            let mut t = from.clone();
            for (x, f) in t.data_mut().iter_mut().zip(full.data()) {
                *x = 0.9 * *x + 0.1 * f;
            }
            t
        };
        let base = eval(&causal, &comp);
        prop_assert!(eval(&toward(&causal), &comp) < base);
        prop_assert!(eval(&causal, &toward(&comp)) > base);
    }
}

#[test]
fn fixed_draw_gradient_matches_finite_differences_through_the_identity_path() {
    // with the draw recorded, the loss is a smooth function of the
    // probabilities once the hard mask is written as draw + (p - p0)
    let m = 8;
    let x = tensor(m, 3, 11, 1.0);
    let topo = grid_topology(m, 3);
    let p0 = Tensor::column_vector((0..m).map(|j| 0.1 + 0.1 * j as f64).collect());
    let draw: Vec<bool> = (0..m).map(|j| j % 3 != 0).collect();
    let w = tensor(3, 1, 12, 1.0);
    let check = grad_check(
        |tape, inputs| {
            let p = inputs[0];
            let offset = Tensor::column_vector(
                draw.iter()
                    .zip(p0.data())
                    .map(|(&d, &q)| d as u8 as f64 - q)
                    .collect(),
            );
            let mask = tape.add(p, tape.constant(offset))?;
            let xs = tape.constant(x.clone());
            let causal = tape.mul(xs, mask)?;
            Ok(tape.sum(tape.tanh(tape.matmul(causal, tape.constant(w.clone()))?)))
        },
        std::slice::from_ref(&p0),
        1e-6,
    )
    .unwrap();
    assert!(check.max_rel_error <= 1e-4);

    // the straight-through path gives the same analytic gradient
    let tape = Tape::new();
    let p = tape.param(p0.clone());
    let s = sample_with_draw(&tape, tape.constant(x.clone()), p, &topo, draw.clone()).unwrap();
    let loss = tape.sum(
        tape.tanh(
            tape.matmul(s.causal_features, tape.constant(w.clone()))
                .unwrap(),
        ),
    );
    let ste = tape.backward(loss).unwrap().get(p).unwrap().clone();
    let tape2 = Tape::new();
    let hard = Tensor::column_vector(draw.iter().map(|&d| d as u8 as f64).collect());
    let q = tape2.param(hard);
    let s2 = mask_eval(&tape2, tape2.constant(x), q, &topo).unwrap();
    let loss2 = tape2.sum(tape2.tanh(tape2.matmul(s2.causal_features, tape2.constant(w)).unwrap()));
    let soft = tape2.backward(loss2).unwrap().get(q).unwrap().clone();
    for (a, b) in ste.data().iter().zip(soft.data()) {
        assert!((a - b).abs() <= 1e-12);
    }
}
