//! Reference computations shared by the test targets.

#![allow(dead_code)]

use cmil::cohort::SurvivalLabel;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, distinct_times: u32) -> Vec<SurvivalLabel> {
    (0..n)
        .map(|_| SurvivalLabel {
            time: rng.random_range(1..=distinct_times) as f64,
            event: rng.random_bool(0.6),
        })
        .collect()
}

/// Negative log partial likelihood by explicit risk-set enumeration.
pub fn cox_enumerated(risks: &[f64], labels: &[SurvivalLabel]) -> f64 {
    let mut total = 0.0;
    for i in 0..labels.len() {
        if !labels[i].event {
            continue;
        }
        let mut denom = 0.0;
        for j in 0..labels.len() {
            if labels[j].time >= labels[i].time {
                denom += risks[j].exp();
            }
        }
        total += denom.ln() - risks[i];
    }
    total
}

/// Unordered-pair formulation of Harrell's concordance.
pub fn c_index_pairs(risks: &[f64], labels: &[SurvivalLabel]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let (a, b) = (labels[i], labels[j]);
            let shorter = if a.time < b.time {
                a.event.then_some((i, j))
            } else if b.time < a.time {
                b.event.then_some((j, i))
            } else if a.event != b.event {
                Some(if a.event { (i, j) } else { (j, i) })
            } else {
                None
            };
            if let Some((s, l)) = shorter {
                den += 1.0;
                if risks[s] > risks[l] {
                    num += 1.0;
                } else if risks[s] == risks[l] {
                    num += 0.5;
                }
            }
        }
    }
    (den > 0.0).then(|| num / den)
}
