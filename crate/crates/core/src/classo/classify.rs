use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Firm-to-group assignment. Groups are 0-based; `None` marks a firm left
/// unclassified by the thresholded rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub groups: usize,
    pub assignment: Vec<Option<usize>>,
    /// Distance to the assigned (nearest) center.
    pub distance: Vec<f64>,
}

impl Classification {
    /// Assignment from known labels, e.g. the true partition or industry codes.
    pub fn from_labels(labels: &[usize], groups: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= groups) {
            return Err(Error::Shape(format!(
                "label {bad} out of range for {groups} groups"
            )));
        }
        Ok(Self {
            groups,
            assignment: labels.iter().map(|&l| Some(l)).collect(),
            distance: vec![0.0; labels.len()],
        })
    }

    pub fn num_firms(&self) -> usize {
        self.assignment.len()
    }

    pub fn members(&self, group: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, a)| **a == Some(group))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.groups];
        for g in self.assignment.iter().flatten() {
            sizes[*g] += 1;
        }
        sizes
    }

    pub fn num_unclassified(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_none()).count()
    }
}

/// Nearest-center rule on an `N x J` distance matrix. Ties go to the lowest
/// group index; with a threshold, firms farther than it from every center
/// stay unclassified.
pub fn classify_distances(dist: &DMatrix<f64>, threshold: Option<f64>) -> Classification {
    let (n, j) = dist.shape();
    let mut assignment = Vec::with_capacity(n);
    let mut distance = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = 0;
        for g in 1..j {
            if dist[(i, g)] < dist[(i, best)] {
                best = g;
            }
        }
        let d = dist[(i, best)];
        distance.push(d);
        assignment.push(match threshold {
            Some(eps) if !(d <= eps) => None,
            _ => Some(best),
        });
    }
    Classification {
        groups: j,
        assignment,
        distance,
    }
}

/// Assigns each firm estimate to the nearest group center.
pub fn classify(
    pi_hat: &[DVector<f64>],
    theta_hat: &[DVector<f64>],
    threshold: Option<f64>,
) -> Result<Classification> {
    if theta_hat.is_empty() {
        return Err(Error::Shape("no group centers".into()));
    }
    let p = theta_hat[0].len();
    if pi_hat.iter().chain(theta_hat).any(|v| v.len() != p) {
        return Err(Error::Shape("firm and group parameters differ in length".into()));
    }
    let dist = DMatrix::from_fn(pi_hat.len(), theta_hat.len(), |i, j| {
        (&pi_hat[i] - &theta_hat[j]).norm()
    });
    Ok(classify_distances(&dist, threshold))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatch {
    /// `permutation[estimated] = true` label.
    pub permutation: Vec<usize>,
    /// Share of all firms whose permuted label equals the truth.
    pub accuracy: f64,
}

/// Best agreement between estimated and true labels over all relabelings.
pub fn match_labels(est: &Classification, truth: &[usize], true_groups: usize) -> Result<LabelMatch> {
    if est.groups != true_groups {
        return Err(Error::Shape(format!(
            "{} estimated groups vs {} true groups",
            est.groups, true_groups
        )));
    }
    if est.num_firms() != truth.len() {
        return Err(Error::Shape("classification and truth cover different firms".into()));
    }
    if true_groups > 8 {
        return Err(Error::Config(
            "label matching is exhaustive and limited to 8 groups".into(),
        ));
    }
    let j = true_groups;
    let mut counts = vec![vec![0usize; j]; j];
    for (a, &t) in est.assignment.iter().zip(truth) {
        if t >= j {
            return Err(Error::Shape(format!("true label {t} out of range")));
        }
        if let Some(e) = a {
            counts[*e][t] += 1;
        }
    }
    let mut perm: Vec<usize> = (0..j).collect();
    let mut best = (0usize, perm.clone());
    permute(&mut perm, 0, &mut |p| {
        let agree: usize = p.iter().enumerate().map(|(e, &t)| counts[e][t]).sum();
        if agree > best.0 {
            best = (agree, p.to_vec());
        }
    });
    Ok(LabelMatch {
        permutation: best.1,
        accuracy: best.0 as f64 / truth.len() as f64,
    })
}

/// Visits permutations in lexicographic order of the swap recursion; the
/// identity comes first, so ties keep the identity.
fn permute(p: &mut Vec<usize>, k: usize, visit: &mut dyn FnMut(&[usize])) {
    if k == p.len() {
        visit(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, visit);
        p.swap(k, i);
    }
}
