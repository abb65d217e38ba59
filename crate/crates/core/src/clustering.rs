//! K-means partitioning of training instances, the per-cluster train/dev
//! split, and anchor generation for the initial catalog.

use std::collections::BTreeMap;
use std::io::Write;
use std::process::{Command, Stdio};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{pool_anchor_select, Evaluator};
use crate::catalog::{ContextStrategy, Demo, InstanceRecord, Origin, StrategyBody};
use crate::error::{Error, Result};
use crate::linalg::squared_euclidean;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansOutput {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Within-cluster sum of squares after each centroid update.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest_centroid(centroids: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_euclidean(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

pub fn within_cluster_ss(points: &[&[f64]], centroids: &[Vec<f64>], labels: &[usize]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| squared_euclidean(p, &centroids[l]))
        .sum()
}

fn kmeans_pp_init(points: &[&[f64]], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_euclidean(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && *w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_euclidean(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn means(points: &[&[f64]], labels: &[usize], previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let k = previous.len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(p.iter()) {
            *s += x;
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(previous)
        .map(|((s, c), prev)| {
            if c == 0 {
                prev.clone()
            } else {
                s.into_iter().map(|x| x / c as f64).collect()
            }
        })
        .collect()
}

/// Gives every empty cluster the point farthest from its current centroid,
/// taken from a cluster that keeps at least one member.
fn repair_empty(points: &[&[f64]], centroids: &[Vec<f64>], labels: &mut [usize]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far = None::<(usize, f64)>;
        for (i, p) in points.iter().enumerate() {
            if counts[labels[i]] < 2 {
                continue;
            }
            let d = squared_euclidean(p, &centroids[labels[i]]);
            if far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        match far {
            Some((i, _)) => labels[i] = empty,
            None => return,
        }
    }
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(points: &[&[f64]], k: usize, seed: u64, max_iters: usize) -> Result<KMeansOutput> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    if max_iters == 0 {
        return Err(Error::InvalidConfig(
            "k-means max_iters must be at least 1".into(),
        ));
    }
    let dim = points[0].len();
    if let Some(bad) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            what: "k-means point",
            expected: dim,
            actual: bad.len(),
        });
    }

    let mut rng = seed::rng(seed);
    let mut centroids = kmeans_pp_init(points, k, &mut rng);
    let mut labels: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..max_iters {
        let mut next: Vec<usize> = points
            .iter()
            .map(|p| nearest_centroid(&centroids, p))
            .collect();
        repair_empty(points, &centroids, &mut next);
        if next == labels {
            converged = true;
            break;
        }
        labels = next;
        centroids = means(points, &labels, &centroids);
        trace.push(within_cluster_ss(points, &centroids, &labels));
        iterations += 1;
    }

    Ok(KMeansOutput {
        centroids,
        labels,
        objective_trace: trace,
        iterations,
        converged,
    })
}

/// Cluster structure over identified instances, plus the anchor chosen for
/// each cluster (index-aligned with `centroids`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub labels: BTreeMap<String, usize>,
    #[serde(default)]
    pub anchors: Vec<String>,
}

impl ClusterAssignment {
    pub fn from_kmeans(ids: &[String], out: &KMeansOutput) -> Self {
        Self {
            k: out.centroids.len(),
            centroids: out.centroids.clone(),
            labels: ids
                .iter()
                .cloned()
                .zip(out.labels.iter().copied())
                .collect(),
            anchors: Vec::new(),
        }
    }

    pub fn nearest(&self, x: &[f64]) -> usize {
        nearest_centroid(&self.centroids, x)
    }

    /// Stored label if the instance was clustered, else nearest centroid.
    pub fn cluster_of(&self, id: &str, x: &[f64]) -> usize {
        self.labels
            .get(id)
            .copied()
            .unwrap_or_else(|| self.nearest(x))
    }

    pub fn members(&self) -> Vec<Vec<String>> {
        let mut out = vec![Vec::new(); self.k];
        for (id, &l) in &self.labels {
            out[l].push(id.clone());
        }
        out
    }
}

/// Seeded shuffle, then the first `⌈n/2⌉` members go to train.
pub fn split_cluster(members: &[String], seed: u64) -> (Vec<String>, Vec<String>) {
    let mut shuffled = members.to_vec();
    shuffled.shuffle(&mut seed::rng(seed));
    let dev = shuffled.split_off(members.len().div_ceil(2));
    (shuffled, dev)
}

/// Warm-up optimizer producing one anchor per cluster.
pub enum AnchorGenerator {
    /// Best pool strategy by mean reward on the cluster's train half.
    PoolSelect { pool: Vec<ContextStrategy> },
    /// External program: reads `{"cluster", "instances": [...]}` on stdin and
    /// prints a strategy body `{"instruction", "demos", "reasoning_format",
    /// "output_constraints"}` on stdout.
    ExternalTool { command: Vec<String> },
}

#[derive(Deserialize)]
struct ToolBody {
    instruction: String,
    #[serde(default)]
    demos: Vec<Demo>,
    #[serde(default)]
    reasoning_format: String,
    #[serde(default)]
    output_constraints: String,
}

fn run_tool(
    command: &[String],
    cluster: usize,
    members: &[&InstanceRecord],
) -> Result<StrategyBody> {
    let (prog, args) = command
        .split_first()
        .ok_or_else(|| Error::InvalidConfig("external anchor tool command is empty".into()))?;
    let input = serde_json::json!({ "cluster": cluster, "instances": members });
    let tool_err = |m: String| Error::InvalidConfig(format!("anchor tool `{prog}`: {m}"));
    let mut child = Command::new(prog)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| tool_err(e.to_string()))?;
    child
        .stdin
        .take()
        .expect("piped stdin")
        .write_all(input.to_string().as_bytes())
        .map_err(|e| tool_err(e.to_string()))?;
    let out = child
        .wait_with_output()
        .map_err(|e| tool_err(e.to_string()))?;
    if !out.status.success() {
        return Err(tool_err(format!("exited with {}", out.status)));
    }
    let body: ToolBody =
        serde_json::from_slice(&out.stdout).map_err(|e| tool_err(e.to_string()))?;
    Ok(StrategyBody {
        instruction: body.instruction,
        demos: body.demos,
        reasoning_format: body.reasoning_format,
        output_constraints: body.output_constraints,
    })
}

pub fn anchor_id(cluster: usize) -> String {
    format!("anchor-{cluster:02}")
}

/// One anchor per cluster, built from each cluster's train half.
pub fn generate_anchors(
    train_members: &[Vec<&InstanceRecord>],
    generator: &AnchorGenerator,
    evaluator: &dyn Evaluator,
) -> Result<Vec<ContextStrategy>> {
    let mut anchors = Vec::with_capacity(train_members.len());
    for (k, members) in train_members.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Empty("cluster train half"));
        }
        let anchor = match generator {
            AnchorGenerator::PoolSelect { pool } => {
                let best = pool_anchor_select(members, pool, evaluator)?;
                pool[best].as_anchor(anchor_id(k))
            }
            AnchorGenerator::ExternalTool { command } => ContextStrategy::from_body(
                anchor_id(k),
                run_tool(command, k, members)?,
                Origin::Anchor,
                0,
            )?,
        };
        anchors.push(anchor);
    }
    Ok(anchors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::testing::{instance, strategy, TableEvaluator};
    use crate::catalog::Split;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::HashMap;

    fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(|p| p.as_slice()).collect()
    }

    #[test]
    fn separable_pair() {
        let pts = vec![vec![0.0, 0.0], vec![10.0, 10.0]];
        let out = kmeans(&refs(&pts), 2, 1, 10).unwrap();
        let mut labels = out.labels.clone();
        labels.sort();
        assert_eq!(labels, vec![0, 1]);
        for (p, &l) in pts.iter().zip(&out.labels) {
            assert_eq!(&out.centroids[l], p);
        }
    }

    #[test]
    fn identical_points() {
        let pts = vec![vec![1.5, -2.0]; 5];
        let out = kmeans(&refs(&pts), 1, 3, 10).unwrap();
        assert_eq!(out.centroids, vec![vec![1.5, -2.0]]);
        let out2 = kmeans(&refs(&pts), 3, 3, 10).unwrap();
        assert!(out2.converged);
    }

    #[test]
    fn bad_k() {
        let pts = vec![vec![0.0]; 3];
        assert!(matches!(
            kmeans(&refs(&pts), 4, 0, 5),
            Err(Error::InvalidK { .. })
        ));
        assert!(matches!(
            kmeans(&refs(&pts), 0, 0, 5),
            Err(Error::InvalidK { .. })
        ));
    }

    /// Best within-cluster sum of squares over all labelings into at most k
    /// groups (every labeling of n points, k^n of them).
    fn brute_force_wcss(pts: &[Vec<f64>], k: usize) -> f64 {
        let n = pts.len();
        let mut labels = vec![0usize; n];
        let mut best = f64::INFINITY;
        loop {
            let mut cost = 0.0;
            for c in 0..k {
                let members: Vec<&Vec<f64>> = pts
                    .iter()
                    .zip(&labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(p, _)| p)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let dim = members[0].len();
                let mean: Vec<f64> = (0..dim)
                    .map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64)
                    .collect();
                cost += members
                    .iter()
                    .map(|p| squared_euclidean(p, &mean))
                    .sum::<f64>();
            }
            best = best.min(cost);
            let mut i = 0;
            loop {
                if i == n {
                    return best;
                }
                labels[i] += 1;
                if labels[i] < k {
                    break;
                }
                labels[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn twelve_points_match_exhaustive_optimum() {
        let mut rng = seed::rng(11);
        let centres = [(0.0, 0.0), (6.0, 0.0), (3.0, 5.0)];
        let pts: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let (cx, cy) = centres[i % 3];
                vec![
                    cx + rng.random_range(-1.0..1.0),
                    cy + rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let optimum = brute_force_wcss(&pts, 3);
        let out = kmeans(&refs(&pts), 3, 5, 100).unwrap();
        let got = within_cluster_ss(&refs(&pts), &out.centroids, &out.labels);
        assert!(got >= optimum - 1e-9);
        assert!(
            (got - optimum).abs() < 1e-9,
            "k-means {got} vs optimum {optimum}"
        );
    }

    #[test]
    fn split_sizes_and_determinism() {
        let four: Vec<String> = (0..4).map(|i| format!("m{i}")).collect();
        let (t, d) = split_cluster(&four, 1);
        assert_eq!((t.len(), d.len()), (2, 2));
        let five: Vec<String> = (0..5).map(|i| format!("m{i}")).collect();
        let (t, d) = split_cluster(&five, 1);
        assert_eq!((t.len(), d.len()), (3, 2));
        assert_eq!(split_cluster(&five, 9), split_cluster(&five, 9));
        let mut all: Vec<_> = t.iter().chain(d.iter()).cloned().collect();
        all.sort();
        assert_eq!(all, five);
    }

    #[test]
    fn planted_cluster_anchor() {
        let members = [instance("a", Split::Train), instance("b", Split::Train)];
        let others = [instance("c", Split::Train)];
        let pool = vec![strategy("c1", "one"), strategy("c2", "two")];
        let mut t = HashMap::new();
        for id in ["a", "b"] {
            t.insert((id.to_string(), "c2".to_string()), 1.0);
            t.insert((id.to_string(), "c1".to_string()), 0.0);
        }
        t.insert(("c".to_string(), "c1".to_string()), 1.0);
        let ev = TableEvaluator(t);
        let clusters = vec![members.iter().collect::<Vec<_>>(), others.iter().collect()];
        let anchors = generate_anchors(
            &clusters,
            &AnchorGenerator::PoolSelect { pool: pool.clone() },
            &ev,
        )
        .unwrap();
        assert_eq!(anchors.len(), 2);
        assert_eq!(anchors[0].instruction, "two");
        assert_eq!(anchors[1].instruction, "one");
        assert!(anchors
            .iter()
            .all(|a| a.origin == Origin::Anchor && a.round == 0));
        assert_ne!(anchors[0].id, anchors[1].id);

        let single = generate_anchors(
            &clusters,
            &AnchorGenerator::PoolSelect {
                pool: pool[..1].to_vec(),
            },
            &ev,
        )
        .unwrap();
        assert!(single.iter().all(|a| a.instruction == "one"));
    }

    #[test]
    fn external_tool_anchor() {
        let members = [instance("a", Split::Train)];
        let cmd = vec![
            "sh".to_string(),
            "-c".to_string(),
            r#"cat > /dev/null; echo '{"instruction":"from tool","demos":[{"input":"q","output":"a"}]}'"#.to_string(),
        ];
        let ev = TableEvaluator(HashMap::new());
        let anchors = generate_anchors(
            &[members.iter().collect()],
            &AnchorGenerator::ExternalTool { command: cmd },
            &ev,
        )
        .unwrap();
        assert_eq!(anchors[0].instruction, "from tool");
        assert_eq!(anchors[0].demos.len(), 1);
    }

    fn random_dataset(seed_value: u64) -> (Vec<Vec<f64>>, usize) {
        let mut rng = seed::rng(seed_value);
        let n = rng.random_range(8..40);
        let k = rng.random_range(1..=5.min(n));
        let pts = (0..n)
            .map(|_| vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
            .collect();
        (pts, k)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn converged_invariants(seed_value in 0u64..10_000) {
            let (pts, k) = random_dataset(seed_value);
            let out = kmeans(&refs(&pts), k, seed_value, 500).unwrap();
            prop_assert!(out.converged);
            for w in out.objective_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
            let mut counts = vec![0usize; k];
            for (p, &l) in pts.iter().zip(&out.labels) {
                counts[l] += 1;
                prop_assert_eq!(nearest_centroid(&out.centroids, p), l);
            }
            for (c, &n) in counts.iter().enumerate() {
                prop_assert!(n > 0);
                let members: Vec<_> = pts.iter().zip(&out.labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
                for d in 0..2 {
                    let mean = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
                    prop_assert!((mean - out.centroids[c][d]).abs() < 1e-9);
                }
            }
            prop_assert_eq!(kmeans(&refs(&pts), k, seed_value, 500).unwrap(), out);
        }
    }
}
