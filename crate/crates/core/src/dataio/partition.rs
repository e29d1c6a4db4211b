//! Label-wise Dirichlet (non-IID) client partitioning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};

/// Disjoint per-client index lists into one dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub client_indices: Vec<Vec<usize>>,
}

impl Partition {
    pub fn clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn total(&self) -> usize {
        self.client_indices.iter().map(Vec::len).sum()
    }

    /// Removes `indices` from every shard, keeping order.
    pub fn without(&self, indices: &[usize]) -> Partition {
        let drop: std::collections::HashSet<usize> = indices.iter().copied().collect();
        Partition {
            client_indices: self
                .client_indices
                .iter()
                .map(|c| c.iter().copied().filter(|i| !drop.contains(i)).collect())
                .collect(),
        }
    }
}

/// Splits each label's samples across `k` clients with proportions drawn from
/// `Dirichlet(alpha, ..., alpha)`. Counts are floors of `p * n`, and the
/// remainder goes to the largest fractional parts (ties to the lower client).
pub fn dirichlet_partition(dataset: &LabeledDataset, k: usize, alpha: f64, seed: u64) -> Result<Partition> {
    if k == 0 {
        return Err(Error::InvalidArgument("partition needs at least one client".into()));
    }
    if k > dataset.len() {
        return Err(Error::InvalidArgument(format!("{k} clients for {} samples", dataset.len())));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("Dirichlet concentration must be positive, got {alpha}")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clients = vec![Vec::new(); k];
    for label in 0..dataset.num_classes {
        let mut members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == label).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let mut p: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = p.iter().sum();
        if total > 0.0 {
            p.iter_mut().for_each(|v| *v /= total);
        } else {
            // every draw underflowed: tiny alpha, so give the label to one client
            let lucky = rand::Rng::random_range(&mut rng, 0..k);
            p.iter_mut().enumerate().for_each(|(i, v)| *v = if i == lucky { 1.0 } else { 0.0 });
        }
        let n = members.len();
        let exact: Vec<f64> = p.iter().map(|v| v * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        let assigned: usize = counts.iter().sum();
        for &c in order.iter().take(n - assigned) {
            counts[c] += 1;
        }
        let mut rest = members.as_slice();
        for (client, &cnt) in counts.iter().enumerate() {
            let (take, tail) = rest.split_at(cnt);
            clients[client].extend_from_slice(take);
            rest = tail;
        }
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    Ok(Partition { client_indices: clients })
}
