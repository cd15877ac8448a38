//! Deterministic synthetic graphs.
//!
//! The generator is linear preferential attachment with initial
//! attractiveness: node `t` attaches `m` edges to distinct earlier nodes,
//! each picked with probability proportional to `deg + A`. The resulting
//! degree tail decays as `k^-(3 + A/m)`, so `A = (exponent - 3) * m`.
//! Attractiveness must stay above `-m`; exponents at or below 2 are clamped
//! to the steepest tail the model can express.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{CsrGraph, DatasetSplit, NodeFeatures};
use crate::error::{Error, Result};

/// Parameters for [`synth_powerlaw`]. `edges_per_node` defaults to 2, which
/// gives mean degree close to 4 like the small citation graphs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLawSpec {
    pub nodes: usize,
    pub exponent: f64,
    pub edges_per_node: usize,
    pub seed: u64,
}

impl PowerLawSpec {
    pub fn new(nodes: usize, exponent: f64, seed: u64) -> Self {
        PowerLawSpec {
            nodes,
            exponent,
            edges_per_node: 2,
            seed,
        }
    }
}

/// Fenwick tree over non-negative weights for O(log n) sampling.
struct WeightTree {
    tree: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightTree {
    fn new(n: usize) -> Self {
        WeightTree {
            tree: vec![0.0; n + 1],
            weights: vec![0.0; n],
        }
    }

    fn add(&mut self, i: usize, delta: f64) {
        self.weights[i] += delta;
        let mut k = i + 1;
        while k < self.tree.len() {
            self.tree[k] += delta;
            k += k & k.wrapping_neg();
        }
    }

    fn set(&mut self, i: usize, w: f64) {
        let d = w - self.weights[i];
        self.add(i, d);
    }

    fn total(&self) -> f64 {
        let mut k = self.tree.len() - 1;
        let mut s = 0.0;
        while k > 0 {
            s += self.tree[k];
            k &= k - 1;
        }
        s
    }

    /// Smallest index whose prefix sum exceeds `target`.
    fn find(&self, mut target: f64) -> usize {
        let n = self.tree.len() - 1;
        let mut pos = 0;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= target {
                target -= self.tree[next];
                pos = next;
            }
            step >>= 1;
        }
        pos.min(n - 1)
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Option<usize> {
        let total = self.total();
        if total <= 0.0 {
            return None;
        }
        let i = self.find(rng.random::<f64>() * total);
        // Guard against landing on a zero-weight slot through rounding.
        if self.weights[i] > 0.0 {
            Some(i)
        } else {
            self.weights.iter().rposition(|&w| w > 0.0)
        }
    }
}

const MIN_ATTACH_WEIGHT: f64 = 1e-3;

fn attractiveness(exponent: f64, m: usize) -> f64 {
    let m = m as f64;
    ((exponent - 3.0) * m).max(-m + MIN_ATTACH_WEIGHT)
}

fn validate(nodes: usize, exponent: f64, m: usize) -> Result<()> {
    if nodes < 2 {
        return Err(Error::InvalidParam(format!("need at least 2 nodes, got {nodes}")));
    }
    if !(exponent > 1.0) || !exponent.is_finite() {
        return Err(Error::InvalidParam(format!("exponent must exceed 1, got {exponent}")));
    }
    if m == 0 {
        return Err(Error::InvalidParam("edges_per_node must be positive".into()));
    }
    Ok(())
}

/// Preferential-attachment graph with self-loops. Deterministic in the seed.
pub fn synth_powerlaw(spec: PowerLawSpec) -> Result<CsrGraph> {
    let PowerLawSpec {
        nodes,
        exponent,
        edges_per_node: m,
        seed,
    } = spec;
    validate(nodes, exponent, m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = attractiveness(exponent, m);
    let mut tree = WeightTree::new(nodes);
    let mut degree = vec![0usize; nodes];
    let mut edges = Vec::with_capacity(nodes * m);
    let weight = |d: usize| (d as f64 + a).max(MIN_ATTACH_WEIGHT);

    tree.set(0, weight(0));
    for t in 1..nodes {
        let want = m.min(t);
        let mut picked = Vec::with_capacity(want);
        while picked.len() < want {
            let j = tree.sample(&mut rng).expect("earlier nodes carry weight");
            picked.push(j);
            tree.set(j, 0.0);
        }
        for &j in &picked {
            degree[j] += 1;
            tree.set(j, weight(degree[j]));
            edges.push((j, t));
        }
        degree[t] = want;
        tree.set(t, weight(want));
    }
    CsrGraph::from_edges(nodes, &edges, true)
}

/// Labels by multi-source BFS from `classes` random seed nodes; each node
/// takes the label of the seed that reaches it first. Unreached nodes get
/// the label of a random seed.
pub fn planted_communities(g: &CsrGraph, classes: usize, seed: u64) -> Result<Vec<usize>> {
    let n = g.num_nodes();
    if classes == 0 || classes > n {
        return Err(Error::InvalidParam(format!("cannot plant {classes} communities in {n} nodes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut label = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for (c, &s) in order[..classes].iter().enumerate() {
        label[s] = c;
        queue.push_back(s);
    }
    while let Some(u) = queue.pop_front() {
        for &v in g.neighbors(u) {
            if label[v] == usize::MAX {
                label[v] = label[u];
                queue.push_back(v);
            }
        }
    }
    for l in label.iter_mut().filter(|l| **l == usize::MAX) {
        *l = rng.random_range(0..classes);
    }
    Ok(label)
}

/// Graph, features and split bundled together.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub graph: CsrGraph,
    pub features: NodeFeatures,
    pub split: DatasetSplit,
}

impl SynthDataset {
    /// Power-law graph with BFS communities and Gaussian class prototypes.
    /// Every node is labelled; `train_frac` of them are in the train split,
    /// the rest are split evenly between val and test.
    pub fn planted(
        spec: PowerLawSpec,
        classes: usize,
        dim: usize,
        noise: f64,
        train_frac: f64,
    ) -> Result<Self> {
        let graph = synth_powerlaw(spec)?;
        let labels = planted_communities(&graph, classes, spec.seed ^ 0x5eed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xfea7);
        let proto = Normal::new(0.0, 1.0).expect("unit normal");
        let prototypes: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..dim).map(|_| proto.sample(&mut rng)).collect())
            .collect();
        let jitter = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::InvalidParam(e.to_string()))?;
        let n = graph.num_nodes();
        let mut x = Array2::zeros((n, dim));
        for i in 0..n {
            for k in 0..dim {
                x[[i, k]] = prototypes[labels[i]][k] + jitter.sample(&mut rng);
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let n_train = ((n as f64) * train_frac).round() as usize;
        let n_val = (n - n_train) / 2;
        let split = DatasetSplit::new(
            labels.into_iter().map(Some).collect(),
            &order[..n_train],
            &order[n_train..n_train + n_val],
            &order[n_train + n_val..],
        )?;
        Ok(SynthDataset {
            graph,
            features: NodeFeatures::new(x)?,
            split,
        })
    }
}

/// Shape of a bag-of-words citation benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CitationSpec {
    pub nodes: usize,
    pub classes: usize,
    pub vocab: usize,
    /// Mean number of active words per node.
    pub words_per_node: usize,
    /// Probability that an active word comes from the node's class topic.
    pub topic_frac: f64,
    /// Probability that an attachment stays within the node's class.
    pub homophily: f64,
    pub exponent: f64,
    pub edges_per_node: usize,
    pub train_per_class: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl CitationSpec {
    /// 2708 nodes, 7 classes, 1433 binary features, 140/500/1000 split.
    pub fn cora_like(seed: u64) -> Self {
        CitationSpec {
            nodes: 2708,
            classes: 7,
            vocab: 1433,
            words_per_node: 18,
            topic_frac: 0.14,
            homophily: 0.82,
            exponent: 2.5,
            edges_per_node: 2,
            train_per_class: 20,
            val: 500,
            test: 1000,
            seed,
        }
    }
}

/// Homophilous preferential-attachment graph with sparse binary features.
///
/// Class sizes are skewed (weight `1 / (1 + 0.4 c)`). Each attachment is
/// drawn preferentially among same-class nodes with probability
/// `homophily`, otherwise among all earlier nodes.
pub fn synth_citation(spec: CitationSpec) -> Result<SynthDataset> {
    let CitationSpec {
        nodes: n,
        classes,
        vocab,
        words_per_node,
        topic_frac,
        homophily,
        exponent,
        edges_per_node: m,
        train_per_class,
        val,
        test,
        seed,
    } = spec;
    validate(n, exponent, m)?;
    if classes == 0 || vocab < classes || words_per_node == 0 {
        return Err(Error::InvalidParam("bad citation spec sizes".into()));
    }
    if train_per_class * classes + val + test > n {
        return Err(Error::InvalidParam("split larger than graph".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let class_w: Vec<f64> = (0..classes).map(|c| 1.0 / (1.0 + 0.4 * c as f64)).collect();
    let total_w: f64 = class_w.iter().sum();
    let labels: Vec<usize> = (0..n)
        .map(|_| {
            let mut u = rng.random::<f64>() * total_w;
            for (c, w) in class_w.iter().enumerate() {
                if u < *w {
                    return c;
                }
                u -= w;
            }
            classes - 1
        })
        .collect();

    let a = attractiveness(exponent, m);
    let weight = |d: usize| (d as f64 + a).max(MIN_ATTACH_WEIGHT);
    let mut all = WeightTree::new(n);
    let mut per_class: Vec<WeightTree> = (0..classes).map(|_| WeightTree::new(n)).collect();
    let mut degree = vec![0usize; n];
    let mut edges = Vec::with_capacity(n * m);
    all.set(0, weight(0));
    per_class[labels[0]].set(0, weight(0));
    for t in 1..n {
        let want = m.min(t);
        let mut picked: Vec<usize> = Vec::with_capacity(want);
        let mut attempts = 0;
        while picked.len() < want {
            attempts += 1;
            let same = rng.random::<f64>() < homophily && attempts < 64;
            let j = if same {
                per_class[labels[t]].sample(&mut rng)
            } else {
                None
            };
            let j = match j {
                Some(j) => j,
                None => all.sample(&mut rng).expect("earlier nodes carry weight"),
            };
            if picked.contains(&j) {
                continue;
            }
            picked.push(j);
        }
        for &j in &picked {
            degree[j] += 1;
            all.set(j, weight(degree[j]));
            per_class[labels[j]].set(j, weight(degree[j]));
            edges.push((j, t));
        }
        degree[t] = want;
        all.set(t, weight(want));
        per_class[labels[t]].set(t, weight(want));
    }
    let graph = CsrGraph::from_edges(n, &edges, true)?;

    // Topic vocabularies: a disjoint slice of the vocabulary per class.
    let mut words: Vec<usize> = (0..vocab).collect();
    words.shuffle(&mut rng);
    let per_topic = vocab / classes;
    let topics: Vec<&[usize]> = (0..classes)
        .map(|c| &words[c * per_topic..(c + 1) * per_topic])
        .collect();
    let mut x = Array2::<f64>::zeros((n, vocab));
    let lo = words_per_node / 2;
    let hi = words_per_node + words_per_node / 2;
    for i in 0..n {
        let k = rng.random_range(lo..=hi).max(1);
        for _ in 0..k {
            let w = if rng.random::<f64>() < topic_frac {
                topics[labels[i]][rng.random_range(0..per_topic)]
            } else {
                rng.random_range(0..vocab)
            };
            x[[i, w]] = 1.0;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut train = Vec::new();
    let mut taken = vec![0usize; classes];
    let mut rest = Vec::new();
    for &i in &order {
        if taken[labels[i]] < train_per_class {
            taken[labels[i]] += 1;
            train.push(i);
        } else {
            rest.push(i);
        }
    }
    let split = DatasetSplit::new(
        labels.into_iter().map(Some).collect(),
        &train,
        &rest[..val],
        &rest[val..val + test],
    )?;
    Ok(SynthDataset {
        graph,
        features: NodeFeatures::new(x)?,
        split,
    })
}
