use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::Embedder;
use crate::error::{dim_err, Error, Result};
use crate::gallery::GalleryStore;
use crate::numkernel::Matrix;
use crate::synthdata::LabeledSet;

/// A query's identity and the identities of the ranked gallery, best first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankEvalCase {
    pub query_identity: u32,
    pub ranked: Vec<u32>,
}

impl RankEvalCase {
    fn relevant(&self) -> impl Iterator<Item = bool> + '_ {
        self.ranked.iter().map(move |&g| g == self.query_identity)
    }
}

pub fn average_precision(case: &RankEvalCase) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, rel) in case.relevant().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::Evaluation(format!(
            "identity {} has no relevant gallery entry",
            case.query_identity
        )));
    }
    Ok(sum / hits as f64)
}

/// Whether the top-ranked entry is relevant.
pub fn rank1(case: &RankEvalCase) -> bool {
    case.ranked.first() == Some(&case.query_identity)
}

/// Average forgetting from per-dataset histories.
///
/// `history[d]` holds dataset `d`'s metric at every evaluation stage from the
/// one it was introduced in up to the final stage `T = history.len()`.
pub fn average_forgetting(history: &[Vec<f64>]) -> Result<f64> {
    let t = history.len();
    if t < 2 {
        return Err(Error::Evaluation("average forgetting needs at least 2 stages".into()));
    }
    let mut total = 0.0;
    for (d, h) in history.iter().enumerate() {
        if h.len() != t - d {
            return Err(dim_err(
                "average_forgetting",
                format!("dataset {} has {} entries, expected {}", d + 1, h.len(), t - d),
            ));
        }
        if d + 1 == t {
            continue;
        }
        let (last, earlier) = h.split_last().expect("non-empty");
        let peak = earlier.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        total += peak - last;
    }
    Ok(total / (t - 1) as f64)
}

/// Per-query result; `None` when the query's identity is absent from the gallery.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryOutcome {
    pub ap: f64,
    pub r1: bool,
}

/// Ranks every query row against the full store.
pub fn evaluate_features(features: &Matrix, identities: &[u32], store: &GalleryStore) -> Result<Vec<Option<QueryOutcome>>> {
    if features.rows() != identities.len() {
        return Err(dim_err(
            "evaluate_features",
            format!("{} rows, {} identities", features.rows(), identities.len()),
        ));
    }
    (0..features.rows())
        .into_par_iter()
        .map(|i| {
            let ranked = store.rank_query(features.row(i))?;
            let case = RankEvalCase {
                query_identity: identities[i],
                ranked: ranked.iter().map(|e| e.identity).collect(),
            };
            Ok(average_precision(&case).ok().map(|ap| QueryOutcome { ap, r1: rank1(&case) }))
        })
        .collect()
}

/// Query set of one dataset (the stage it was introduced in).
#[derive(Debug, Clone, Copy)]
pub struct QuerySet<'a> {
    pub dataset: u32,
    pub data: &'a LabeledSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub dataset: u32,
    pub map: f64,
    pub r1: f64,
    pub evaluated: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEval {
    pub stage: u32,
    pub datasets: Vec<DatasetMetrics>,
}

/// Embeds each query set with `model` and scores it against the whole store.
pub fn evaluate_stage(model: &Embedder, store: &GalleryStore, queries: &[QuerySet<'_>], stage: u32) -> Result<StageEval> {
    if store.current_version() != stage {
        return Err(Error::StaleStore {
            store: store.current_version(),
            requested: stage,
        });
    }
    let mut datasets = Vec::with_capacity(queries.len());
    for qs in queries {
        if qs.data.is_empty() {
            return Err(Error::Evaluation(format!("dataset {} has no queries", qs.dataset)));
        }
        let z = model.forward(&qs.data.x)?;
        let outcomes = evaluate_features(&z, &qs.data.y, store)?;
        let scored: Vec<QueryOutcome> = outcomes.iter().flatten().copied().collect();
        let excluded = outcomes.len() - scored.len();
        if scored.is_empty() {
            return Err(Error::Evaluation(format!(
                "dataset {}: all {} queries lack gallery matches",
                qs.dataset, excluded
            )));
        }
        let n = scored.len() as f64;
        datasets.push(DatasetMetrics {
            dataset: qs.dataset,
            map: scored.iter().map(|o| o.ap).sum::<f64>() / n,
            r1: scored.iter().filter(|o| o.r1).count() as f64 / n,
            evaluated: scored.len(),
            excluded,
        });
    }
    Ok(StageEval { stage, datasets })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub dataset: u32,
    pub stage: u32,
    pub map: f64,
    pub r1: f64,
    pub excluded: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonEntry {
    pub stage: u32,
    pub raw: f64,
    pub used: f64,
}

/// Every metric of one run, indexed by dataset and evaluation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub seed: u64,
    pub cells: Vec<MetricCell>,
    pub af_map: Option<f64>,
    pub af_r1: Option<f64>,
    pub epsilon: Vec<EpsilonEntry>,
    pub runtime_secs: f64,
}

impl MetricsReport {
    pub fn new(mode: impl Into<String>, seed: u64) -> Self {
        Self {
            mode: mode.into(),
            seed,
            cells: Vec::new(),
            af_map: None,
            af_r1: None,
            epsilon: Vec::new(),
            runtime_secs: 0.0,
        }
    }

    pub fn push_stage(&mut self, eval: &StageEval) {
        self.cells.extend(eval.datasets.iter().map(|d| MetricCell {
            dataset: d.dataset,
            stage: eval.stage,
            map: d.map,
            r1: d.r1,
            excluded: d.excluded,
        }));
    }

    pub fn final_stage(&self) -> Option<u32> {
        self.cells.iter().map(|c| c.stage).max()
    }

    /// Per-dataset series in the shape [`average_forgetting`] expects.
    pub fn history(&self, metric: impl Fn(&MetricCell) -> f64) -> Vec<Vec<f64>> {
        let Some(last) = self.final_stage() else {
            return Vec::new();
        };
        (1..=last)
            .map(|d| {
                let mut cells: Vec<&MetricCell> = self.cells.iter().filter(|c| c.dataset == d).collect();
                cells.sort_by_key(|c| c.stage);
                cells.into_iter().map(&metric).collect()
            })
            .collect()
    }

    /// Recomputes AF for both metrics; left empty for single-stage runs.
    pub fn finalize_forgetting(&mut self) {
        self.af_map = average_forgetting(&self.history(|c| c.map)).ok();
        self.af_r1 = average_forgetting(&self.history(|c| c.r1)).ok();
    }

    /// Mean over datasets of the metric at the final stage.
    pub fn final_mean(&self, metric: impl Fn(&MetricCell) -> f64) -> Option<f64> {
        let last = self.final_stage()?;
        let vals: Vec<f64> = self.cells.iter().filter(|c| c.stage == last).map(metric).collect();
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,seed,dataset,stage,metric,value\n");
        for c in &self.cells {
            for (name, v) in [("map", c.map), ("r1", c.r1)] {
                out.push_str(&format!("{},{},{},{},{},{}\n", self.mode, self.seed, c.dataset, c.stage, name, v));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Rng;

    fn case(pattern: &[bool]) -> RankEvalCase {
        RankEvalCase {
            query_identity: 1,
            ranked: pattern.iter().map(|&r| if r { 1 } else { 0 }).collect(),
        }
    }

    /// Precision-at-k summed over relevant positions, recounting from scratch each time.
    fn ap_oracle(pattern: &[bool]) -> f64 {
        let r = pattern.iter().filter(|&&b| b).count();
        let mut s = 0.0;
        for k in 1..=pattern.len() {
            if pattern[k - 1] {
                let hits = pattern[..k].iter().filter(|&&b| b).count();
                s += hits as f64 / k as f64;
            }
        }
        s / r as f64
    }

    #[test]
    fn ap_examples() {
        let v = average_precision(&case(&[true, false, true])).unwrap();
        assert!((v - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&case(&[true, true, false, false])).unwrap(), 1.0);
        assert!(average_precision(&case(&[false, false])).is_err());
    }

    #[test]
    fn single_relevant_gives_reciprocal_rank() {
        for n in 1..=6 {
            for r in 1..=n {
                let mut p = vec![false; n];
                p[r - 1] = true;
                assert!((average_precision(&case(&p)).unwrap() - 1.0 / r as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn exhaustive_patterns_match_oracle() {
        for n in 1..=6usize {
            for mask in 1u32..(1 << n) {
                let p: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                let c = case(&p);
                assert!((average_precision(&c).unwrap() - ap_oracle(&p)).abs() <= 1e-12);
                assert_eq!(rank1(&c), p[0]);
            }
        }
    }

    #[test]
    fn forgetting_examples() {
        assert_eq!(average_forgetting(&[vec![0.8, 0.8, 0.8], vec![0.5, 0.5], vec![0.4]]).unwrap(), 0.0);
        let v = average_forgetting(&[vec![0.8, 0.6], vec![0.7]]).unwrap();
        assert!((v - 0.2).abs() < 1e-12);
        assert!(average_forgetting(&[vec![0.5]]).is_err());
        assert!(average_forgetting(&[vec![0.5], vec![0.5]]).is_err());
    }

    #[test]
    fn forgetting_matches_grid_oracle() {
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let t = 2 + rng.below(6);
            // full table perf[d][s], only s >= d is meaningful
            let perf: Vec<Vec<f64>> = (0..t).map(|_| (0..t).map(|_| rng.uniform()).collect()).collect();
            let history: Vec<Vec<f64>> = (0..t).map(|d| perf[d][d..].to_vec()).collect();
            let mut want = 0.0;
            for d in 0..t - 1 {
                let mut best = f64::MIN;
                for s in d..t - 1 {
                    if perf[d][s] > best {
                        best = perf[d][s];
                    }
                }
                want += best - perf[d][t - 1];
            }
            want /= (t - 1) as f64;
            assert!((average_forgetting(&history).unwrap() - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn report_history_and_csv() {
        let mut r = MetricsReport::new("rfl", 7);
        for stage in 1..=2 {
            let datasets = (1..=stage)
                .map(|d| DatasetMetrics {
                    dataset: d,
                    map: 0.9 - 0.1 * (stage - d) as f64,
                    r1: 1.0,
                    evaluated: 4,
                    excluded: 0,
                })
                .collect();
            r.push_stage(&StageEval { stage, datasets });
        }
        r.finalize_forgetting();
        assert!((r.af_map.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(r.af_r1, Some(0.0));
        assert!((r.final_mean(|c| c.map).unwrap() - 0.85).abs() < 1e-12);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 3 * 2);
        assert!(csv.contains("rfl,7,1,2,map,0.8"));
    }
}
