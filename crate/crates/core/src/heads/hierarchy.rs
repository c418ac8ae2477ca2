//! Two-level label hierarchies: a partition of a task's vocabulary into
//! named clusters, and the concatenated cluster/label indicator encoding.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub name: String,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyFile {
    #[serde(rename = "cluster")]
    pub clusters: Vec<Cluster>,
}

impl HierarchyFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })
    }
}

/// Clusters resolved against a vocabulary. Encoded vectors are laid out as
/// `[cluster block (C) ; cluster 0 labels ; cluster 1 labels ; ...]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelHierarchy {
    pub names: Vec<String>,
    /// Vocabulary ids per cluster, in declared order.
    pub members: Vec<Vec<usize>>,
    /// For every vocabulary id: (cluster, position within cluster).
    location: Vec<(usize, usize)>,
}

impl LabelHierarchy {
    pub fn resolve(clusters: &[Cluster], vocabulary: &[String]) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::validation("hierarchy needs at least one cluster"));
        }
        let mut location = vec![None; vocabulary.len()];
        let mut members = Vec::with_capacity(clusters.len());
        let mut names = HashSet::new();
        for (c, cluster) in clusters.iter().enumerate() {
            if !names.insert(&cluster.name) {
                return Err(Error::validation(format!("duplicate cluster `{}`", cluster.name)));
            }
            if cluster.labels.is_empty() {
                return Err(Error::validation(format!("cluster `{}` is empty", cluster.name)));
            }
            let mut ids = Vec::with_capacity(cluster.labels.len());
            for (pos, label) in cluster.labels.iter().enumerate() {
                let id = vocabulary
                    .iter()
                    .position(|v| v == label)
                    .ok_or_else(|| Error::validation(format!("cluster `{}`: unknown label `{label}`", cluster.name)))?;
                if location[id].is_some() {
                    return Err(Error::validation(format!("label `{label}` appears in two clusters")));
                }
                location[id] = Some((c, pos));
                ids.push(id);
            }
            members.push(ids);
        }
        let location = location
            .into_iter()
            .enumerate()
            .map(|(id, l)| l.ok_or_else(|| Error::validation(format!("label `{}` is in no cluster", vocabulary[id]))))
            .collect::<Result<Vec<_>>>()?;
        Ok(LabelHierarchy {
            names: clusters.iter().map(|c| c.name.clone()).collect(),
            members,
            location,
        })
    }

    pub fn cluster_count(&self) -> usize {
        self.members.len()
    }

    /// `C + Σ N_c`.
    pub fn width(&self) -> usize {
        self.cluster_count() + self.location.len()
    }

    pub fn locate(&self, y: usize) -> Result<(usize, usize)> {
        self.location
            .get(y)
            .copied()
            .ok_or_else(|| Error::validation(format!("label id {y} is in no cluster")))
    }

    /// Offset of cluster `c`'s label block inside an encoded vector.
    pub fn block_offset(&self, c: usize) -> usize {
        self.cluster_count() + self.members[..c].iter().map(Vec::len).sum::<usize>()
    }

    pub fn block(&self, c: usize) -> std::ops::Range<usize> {
        let start = self.block_offset(c);
        start..start + self.members[c].len()
    }
}

/// Cluster one-hot followed by every cluster's label block, with the owning
/// cluster's block one-hot on `y` and the other blocks zero.
pub fn build_hierarchical_labels(y: usize, hierarchy: &LabelHierarchy) -> Result<Vec<f64>> {
    let (c, pos) = hierarchy.locate(y)?;
    let mut v = vec![0.0; hierarchy.width()];
    v[c] = 1.0;
    v[hierarchy.block_offset(c) + pos] = 1.0;
    Ok(v)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Picks the best cluster from the cluster block, then the best label inside
/// that cluster's block. `scores` is any encoded-layout vector (logits or
/// probabilities; the rule only compares within blocks).
pub fn hierarchical_decide(scores: &[f64], hierarchy: &LabelHierarchy) -> Result<usize> {
    if scores.len() != hierarchy.width() {
        return Err(Error::Shape(format!(
            "hierarchical scores have width {}, expected {}",
            scores.len(),
            hierarchy.width()
        )));
    }
    let c = argmax(&scores[..hierarchy.cluster_count()]);
    let pos = argmax(&scores[hierarchy.block(c)]);
    Ok(hierarchy.members[c][pos])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("L{i}")).collect()
    }

    fn two_by_two() -> LabelHierarchy {
        let clusters = vec![
            Cluster {
                name: "a".into(),
                labels: vec!["L0".into(), "L1".into()],
            },
            Cluster {
                name: "b".into(),
                labels: vec!["L2".into(), "L3".into()],
            },
        ];
        LabelHierarchy::resolve(&clusters, &vocab(4)).unwrap()
    }

    #[test]
    fn encoding_example() {
        // third label (id 2) is the first member of the second cluster
        let v = build_hierarchical_labels(2, &two_by_two()).unwrap();
        assert_eq!(v, vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn single_cluster_encoding() {
        let h = LabelHierarchy::resolve(
            &[Cluster {
                name: "all".into(),
                labels: vocab(3),
            }],
            &vocab(3),
        )
        .unwrap();
        assert_eq!(build_hierarchical_labels(1, &h).unwrap(), vec![1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn encoding_is_injective_with_two_bits() {
        let h = two_by_two();
        let all: Vec<Vec<f64>> = (0..4).map(|y| build_hierarchical_labels(y, &h).unwrap()).collect();
        for (i, a) in all.iter().enumerate() {
            assert_eq!(a.iter().sum::<f64>(), 2.0);
            for b in &all[i + 1..] {
                assert_ne!(a, b);
            }
        }
        assert!(build_hierarchical_labels(4, &h).is_err());
    }

    #[test]
    fn partition_is_enforced() {
        let overlap = vec![
            Cluster {
                name: "a".into(),
                labels: vec!["L0".into(), "L1".into()],
            },
            Cluster {
                name: "b".into(),
                labels: vec!["L1".into(), "L2".into()],
            },
        ];
        assert!(LabelHierarchy::resolve(&overlap, &vocab(3)).is_err());
        let missing = vec![Cluster {
            name: "a".into(),
            labels: vec!["L0".into()],
        }];
        assert!(LabelHierarchy::resolve(&missing, &vocab(2)).is_err());
    }

    #[test]
    fn decision_follows_owning_block() {
        let h = two_by_two();
        // cluster b wins, inside it L3 has all mass; cluster a's block is ignored
        let scores = [0.2, 0.8, 0.0, 0.99, 0.0, 1.0];
        assert_eq!(hierarchical_decide(&scores, &h).unwrap(), 3);
    }
}
