//! Head diagnostics: retrieval scores, progressive sparsification,
//! routing heatmaps and task-representation similarity.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::AttnMode;
use crate::autograd::Graph;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Routing};
use crate::model::{forward, Backbone, FixedModes, ForwardOptions};
use crate::router::RouterParams;
use crate::routing::{ControlMode, RouterController};
use crate::tasks::TaskBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    pub score: f64,
    /// 0 is the strongest retrieval head.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScoreTable {
    pub layers: usize,
    pub heads: usize,
    /// Row-major over `(layer, head)`.
    pub scores: Vec<HeadScore>,
}

impl HeadScoreTable {
    /// Builds ranks from raw scores; ties keep the lower index first.
    pub fn from_scores(layers: usize, heads: usize, raw: &[f64]) -> Result<Self> {
        if raw.len() != layers * heads {
            return Err(Error::shape("head_scores", &[raw.len()], &[layers, heads]));
        }
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]).then(a.cmp(&b)));
        let mut rank = vec![0; raw.len()];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r;
        }
        let scores = raw
            .iter()
            .enumerate()
            .map(|(i, &score)| HeadScore {
                layer: i / heads,
                head: i % heads,
                score,
                rank: rank[i],
            })
            .collect();
        Ok(Self { layers, heads, scores })
    }

    /// Flat head indices from strongest to weakest.
    pub fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by_key(|&i| self.scores[i].rank);
        idx
    }
}

/// Attention mass the final query puts on the needle positions, averaged
/// over the probe batch, for every head under full attention.
pub fn retrieval_score(backbone: &Backbone, cfg: &RunConfig, probe: &TaskBatch) -> Result<HeadScoreTable> {
    let m = &cfg.model;
    if probe.samples.is_empty() {
        return Err(Error::InvalidArgument("empty probe batch".into()));
    }
    let pattern = cfg.pattern.pattern();
    let opts = ForwardOptions {
        sa_pattern: &pattern,
        keep_attention: true,
    };
    let mut totals = vec![0.0; m.layers * m.heads];
    for sample in &probe.samples {
        if sample.needle.is_empty() {
            return Err(Error::InvalidArgument("probe sample has an empty needle set".into()));
        }
        let mut g = Graph::new();
        let vars = backbone.register(&mut g, false);
        let mut ctl = FixedModes::uniform(m.layers, m.heads, AttnMode::Full);
        let fwd = forward(&mut g, m, &vars, &sample.tokens, &mut ctl, &opts)?;
        let last = sample.tokens.len() - 1;
        for (l, layer) in fwd.attn.iter().enumerate() {
            for (h, &probs) in layer.iter().enumerate() {
                let row = g.value(probs).row(last);
                totals[l * m.heads + h] += sample.needle.iter().map(|&j| row[j]).sum::<f64>();
            }
        }
    }
    let n = probe.samples.len() as f64;
    let raw: Vec<f64> = totals.iter().map(|t| t / n).collect();
    HeadScoreTable::from_scores(m.layers, m.heads, &raw)
}

/// Head modes keeping the `floor((1 - omega) * L * H)` top-ranked heads on FA.
pub fn sparsify_modes(table: &HeadScoreTable, omega: f64) -> Result<Vec<Vec<AttnMode>>> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::InvalidArgument(format!("omega {omega} outside [0, 1]")));
    }
    let total = table.layers * table.heads;
    let keep = (((1.0 - omega) * total as f64) + 1e-9).floor() as usize;
    let mut grid = vec![vec![AttnMode::Sparse; table.heads]; table.layers];
    for &i in table.ranked().iter().take(keep) {
        grid[i / table.heads][i % table.heads] = AttnMode::Full;
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsifyPoint {
    pub omega_msr: f64,
    pub task_id: String,
    pub accuracy: f64,
    /// Accuracy relative to the same task at `omega_msr = 0`.
    pub relative: f64,
}

/// Converts heads to SA weakest-first along `msr_grid` and evaluates every task.
pub fn progressive_sparsify(
    backbone: &Backbone,
    cfg: &RunConfig,
    table: &HeadScoreTable,
    msr_grid: &[f64],
    batches: &[TaskBatch],
) -> Result<Vec<SparsifyPoint>> {
    let full = sparsify_modes(table, 0.0)?;
    let base = batches
        .iter()
        .map(|b| Ok(evaluate(backbone, cfg, b, &Routing::Fixed(&full))?.accuracy))
        .collect::<Result<Vec<f64>>>()?;
    let mut out = Vec::with_capacity(msr_grid.len() * batches.len());
    for &omega in msr_grid {
        let grid = sparsify_modes(table, omega)?;
        for (b, &base) in batches.iter().zip(&base) {
            let accuracy = evaluate(backbone, cfg, b, &Routing::Fixed(&grid))?.accuracy;
            out.push(SparsifyPoint {
                omega_msr: omega,
                task_id: b.task_id.clone(),
                accuracy,
                relative: if base > 0.0 { accuracy / base } else { 0.0 },
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Consistency {
    AlwaysFull,
    AlwaysSparse,
    Mixed,
}

pub const ALWAYS_FULL: f64 = 0.9;
pub const ALWAYS_SPARSE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHeatmap {
    pub task_id: String,
    /// `[layer][head]` fraction of samples routed to FA.
    pub frequency: Vec<Vec<f64>>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub tasks: Vec<TaskHeatmap>,
    pub consistency: Vec<Vec<Consistency>>,
}

pub fn fa_frequency(decisions: &[Vec<Vec<AttnMode>>], layers: usize, heads: usize) -> Vec<Vec<f64>> {
    let mut f = vec![vec![0.0; heads]; layers];
    for d in decisions {
        for (l, row) in d.iter().enumerate() {
            for (h, m) in row.iter().enumerate() {
                if !m.is_sparse() {
                    f[l][h] += 1.0;
                }
            }
        }
    }
    let n = decisions.len().max(1) as f64;
    f.iter_mut().flatten().for_each(|v| *v /= n);
    f
}

pub fn consistency(maps: &[TaskHeatmap], layers: usize, heads: usize) -> Vec<Vec<Consistency>> {
    (0..layers)
        .map(|l| {
            (0..heads)
                .map(|h| {
                    let fs = || maps.iter().map(|t| t.frequency[l][h]);
                    if maps.is_empty() {
                        Consistency::Mixed
                    } else if fs().all(|f| f >= ALWAYS_FULL) {
                        Consistency::AlwaysFull
                    } else if fs().all(|f| f <= ALWAYS_SPARSE) {
                        Consistency::AlwaysSparse
                    } else {
                        Consistency::Mixed
                    }
                })
                .collect()
        })
        .collect()
}

/// Per-task FA frequency of every head under inference routing.
pub fn head_activation_heatmap(
    backbone: &Backbone,
    router: &RouterParams,
    cfg: &RunConfig,
    batches: &[TaskBatch],
) -> Result<Heatmap> {
    let m = &cfg.model;
    let tasks = batches
        .iter()
        .map(|b| {
            let r = evaluate(backbone, cfg, b, &Routing::Router(router))?;
            Ok(TaskHeatmap {
                task_id: b.task_id.clone(),
                frequency: fa_frequency(&r.decisions, m.layers, m.heads),
                samples: r.decisions.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let consistency = consistency(&tasks, m.layers, m.heads);
    Ok(Heatmap { tasks, consistency })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    /// Activations taken as already zero-centred.
    None,
    /// Subtract the mean of the union before the scale is computed.
    UnionMean,
}

pub const SIMILARITY_EPS: f64 = 1e-8;

/// Cosine of the rescaled centroids of two representation sets.
pub fn pair_similarity(xu: &[Vec<f64>], xv: &[Vec<f64>], centering: Centering) -> Result<f64> {
    if xu.len() < 2 || xv.len() < 2 {
        return Err(Error::InvalidArgument("need at least two samples per task".into()));
    }
    let dim = xu[0].len();
    if xu.iter().chain(xv).any(|x| x.len() != dim) {
        return Err(Error::InvalidArgument("representations differ in width".into()));
    }
    let n = (xu.len() + xv.len()) as f64;
    let mut mean = vec![0.0; dim];
    if centering == Centering::UnionMean {
        for x in xu.iter().chain(xv) {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
    }
    let mut sigma = vec![0.0; dim];
    for x in xu.iter().chain(xv) {
        for ((s, v), m) in sigma.iter_mut().zip(x).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    sigma.iter_mut().for_each(|s| *s = (*s + SIMILARITY_EPS).sqrt());
    let centroid = |xs: &[Vec<f64>]| {
        let mut c = vec![0.0; dim];
        for x in xs {
            for ((c, v), s) in c.iter_mut().zip(x).zip(&sigma) {
                *c += v / s / xs.len() as f64;
            }
        }
        c
    };
    let (cu, cv) = (centroid(xu), centroid(xv));
    let dot: f64 = cu.iter().zip(&cv).map(|(a, b)| a * b).sum();
    let nu = cu.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = cv.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub tasks: Vec<String>,
    pub layer: usize,
    /// `pre_task_mlp` or `post_task_mlp`.
    pub stage: String,
    pub centering: Centering,
    pub matrix: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn mean_off_diagonal_abs(&self) -> f64 {
        let n = self.matrix.len();
        if n < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for (i, row) in self.matrix.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if i != j {
                    total += v.abs();
                }
            }
        }
        total / (n * (n - 1)) as f64
    }
}

/// Pairwise matrix over tasks; `reps[k]` holds task `k`'s sample vectors.
pub fn task_similarity(
    tasks: &[String],
    reps: &[Vec<Vec<f64>>],
    layer: usize,
    stage: &str,
    centering: Centering,
) -> Result<SimilarityMatrix> {
    if tasks.len() < 2 || tasks.len() != reps.len() {
        return Err(Error::InvalidArgument("need at least two tasks with representations".into()));
    }
    let n = tasks.len();
    let mut matrix = vec![vec![1.0; n]; n];
    for u in 0..n {
        for v in u + 1..n {
            let s = pair_similarity(&reps[u], &reps[v], centering)?;
            matrix[u][v] = s;
            matrix[v][u] = s;
        }
    }
    Ok(SimilarityMatrix {
        tasks: tasks.to_vec(),
        layer,
        stage: stage.to_string(),
        centering,
        matrix,
    })
}

/// Flattened pooled keys and task-MLP outputs, `[layer][sample]`, under
/// inference routing.
pub struct RouterReps {
    pub pre: Vec<Vec<Vec<f64>>>,
    pub post: Vec<Vec<Vec<f64>>>,
}

pub fn router_representations(
    backbone: &Backbone,
    router: &RouterParams,
    cfg: &RunConfig,
    batch: &TaskBatch,
) -> Result<RouterReps> {
    let m = &cfg.model;
    let pattern = cfg.pattern.pattern();
    let opts = ForwardOptions {
        sa_pattern: &pattern,
        keep_attention: false,
    };
    let mut pre = vec![Vec::new(); m.layers];
    let mut post = vec![Vec::new(); m.layers];
    for sample in &batch.samples {
        let mut g = Graph::new();
        let bvars = backbone.register(&mut g, false);
        let rvars: Vec<_> = router.layers.iter().map(|r| r.register(&mut g, false)).collect();
        let mut ctl = RouterController::new(&rvars, m.heads, cfg.router.n_edge, ControlMode::Inference);
        forward(&mut g, m, &bvars, &sample.tokens, &mut ctl, &opts)?;
        for l in 0..m.layers {
            pre[l].push(g.value(ctl.pooled[l]).data().to_vec());
            post[l].push(g.value(ctl.features[l]).data().to_vec());
        }
    }
    Ok(RouterReps { pre, post })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub before: SimilarityMatrix,
    pub after: SimilarityMatrix,
}

/// Similarity before and after the task MLP of `layer`.
pub fn similarity_report(
    backbone: &Backbone,
    router: &RouterParams,
    cfg: &RunConfig,
    batches: &[TaskBatch],
    layer: usize,
    centering: Centering,
) -> Result<SimilarityReport> {
    if layer >= cfg.model.layers {
        return Err(Error::Index {
            op: "similarity_report",
            index: layer,
            size: cfg.model.layers,
        });
    }
    let tasks: Vec<String> = batches.iter().map(|b| b.task_id.clone()).collect();
    let mut pre = Vec::new();
    let mut post = Vec::new();
    for b in batches {
        let mut r = router_representations(backbone, router, cfg, b)?;
        pre.push(std::mem::take(&mut r.pre[layer]));
        post.push(std::mem::take(&mut r.post[layer]));
    }
    Ok(SimilarityReport {
        before: task_similarity(&tasks, &pre, layer, "pre_task_mlp", centering)?,
        after: task_similarity(&tasks, &post, layer, "post_task_mlp", centering)?,
    })
}

pub fn write_heatmap_csv(w: &mut dyn Write, heatmap: &Heatmap) -> Result<()> {
    writeln!(w, "layer,head,task,frequency")?;
    for t in &heatmap.tasks {
        for (l, row) in t.frequency.iter().enumerate() {
            for (h, f) in row.iter().enumerate() {
                writeln!(w, "{l},{h},{},{f}", t.task_id)?;
            }
        }
    }
    Ok(())
}

pub fn write_sparsify_csv(w: &mut dyn Write, points: &[SparsifyPoint]) -> Result<()> {
    writeln!(w, "omega_msr,task,accuracy")?;
    for p in points {
        writeln!(w, "{},{},{}", p.omega_msr, p.task_id, p.accuracy)?;
    }
    Ok(())
}

pub fn write_scores_csv(w: &mut dyn Write, table: &HeadScoreTable) -> Result<()> {
    writeln!(w, "layer,head,score,rank")?;
    for s in &table.scores {
        writeln!(w, "{},{},{},{}", s.layer, s.head, s.score, s.rank)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_is_a_permutation() {
        let t = HeadScoreTable::from_scores(2, 2, &[0.1, 0.7, 0.7, 0.0]).unwrap();
        let ranks: Vec<usize> = t.scores.iter().map(|s| s.rank).collect();
        assert_eq!(ranks, vec![2, 0, 1, 3]);
        assert_eq!(t.ranked(), vec![1, 2, 0, 3]);
    }

    #[test]
    fn sparsify_keeps_top_heads() {
        let t = HeadScoreTable::from_scores(1, 4, &[0.4, 0.1, 0.3, 0.2]).unwrap();
        let g = sparsify_modes(&t, 0.5).unwrap();
        use AttnMode::*;
        assert_eq!(g, vec![vec![Full, Sparse, Full, Sparse]]);
        assert!(sparsify_modes(&t, 0.0).unwrap()[0].iter().all(|m| !m.is_sparse()));
        assert!(sparsify_modes(&t, 1.0).unwrap()[0].iter().all(|m| m.is_sparse()));
        assert_eq!(sparsify_modes(&t, 0.625).unwrap()[0].iter().filter(|m| !m.is_sparse()).count(), 1);
    }

    #[test]
    fn identical_sets_are_similar() {
        let x = vec![vec![1.0, 2.0, -1.0], vec![0.5, 0.1, 3.0]];
        for c in [Centering::None, Centering::UnionMean] {
            assert!((pair_similarity(&x, &x, c).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_centroids() {
        let u = vec![vec![1.0, 0.0], vec![2.0, 0.0]];
        let v = vec![vec![0.0, 1.0], vec![0.0, 3.0]];
        assert!(pair_similarity(&u, &v, Centering::None).unwrap().abs() < 1e-12);
    }

    #[test]
    fn zero_feature_is_regularized() {
        let u = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let v = vec![vec![1.0, 0.0], vec![2.0, 0.0]];
        let s = pair_similarity(&u, &v, Centering::UnionMean).unwrap();
        assert!(s.is_finite());
    }

    #[test]
    fn too_few_samples_rejected() {
        let u = vec![vec![1.0]];
        assert!(pair_similarity(&u, &u, Centering::None).is_err());
    }

    #[test]
    fn matrix_is_symmetric_with_unit_diagonal() {
        let reps = vec![
            vec![vec![1.0, 0.2], vec![0.8, 0.1]],
            vec![vec![-0.3, 1.0], vec![0.1, 0.9]],
            vec![vec![0.5, 0.5], vec![0.4, 0.6]],
        ];
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let m = task_similarity(&names, &reps, 0, "pre_task_mlp", Centering::None).unwrap();
        for i in 0..3 {
            assert_eq!(m.matrix[i][i], 1.0);
            for j in 0..3 {
                assert_eq!(m.matrix[i][j], m.matrix[j][i]);
                assert!((-1.0..=1.0).contains(&m.matrix[i][j]));
            }
        }
    }

    #[test]
    fn heatmap_bands() {
        let maps = vec![
            TaskHeatmap {
                task_id: "a".into(),
                frequency: vec![vec![1.0, 0.0, 0.5]],
                samples: 10,
            },
            TaskHeatmap {
                task_id: "b".into(),
                frequency: vec![vec![0.95, 0.05, 1.0]],
                samples: 10,
            },
        ];
        assert_eq!(
            consistency(&maps, 1, 3),
            vec![vec![Consistency::AlwaysFull, Consistency::AlwaysSparse, Consistency::Mixed]]
        );
        let mut buf = Vec::new();
        write_heatmap_csv(&mut buf, &Heatmap { tasks: maps, consistency: vec![] }).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("layer,head,task,frequency\n0,0,a,1\n"));
    }
}
