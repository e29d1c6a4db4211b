//! FedAvg training, unlearning, and capture of the pre/post-unlearning gradients.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{LabeledDataset, Partition};
use crate::error::{Error, Result};
use crate::gradients::{label_tensor, param_grad};
use crate::layout::FlatGradient;
use crate::models::{read_flat, write_flat, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub local_lr: f64,
    /// Minibatch size; a shard smaller than this trains in one batch per epoch.
    pub batch_size: usize,
    pub seed: u64,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("clients, local_epochs and batch_size must be positive".into()));
        }
        if !(self.local_lr > 0.0 && self.local_lr.is_finite()) {
            return Err(Error::Config(format!("local_lr must be positive, got {}", self.local_lr)));
        }
        Ok(())
    }
}

/// Independent stream for one (round, client) pair.
fn client_rng(seed: u64, round: usize, client: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((round as u64) << 32) | client as u64);
    rng
}

/// `epochs` passes of shuffled minibatch SGD over `indices`, in place.
pub fn local_sgd(
    model: &mut Model,
    data: &LabeledDataset,
    indices: &[usize],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut order = indices.to_vec();
    for _ in 0..epochs {
        order.shuffle(rng);
        for batch in order.chunks(batch_size) {
            let b = data.subset(batch)?;
            let g = param_grad(model, &b.images, &label_tensor(&b.labels))?;
            for (p, gi) in model.params.iter_mut().zip(&g.values) {
                *p -= lr * gi;
            }
        }
    }
    Ok(())
}

/// FedAvg: each round every non-empty client starts from the global model,
/// runs local SGD, and the server takes the uniform mean of the client
/// parameter vectors in client order.
pub fn train_federated(model0: &Model, data: &LabeledDataset, partition: &Partition, config: &FedConfig) -> Result<Model> {
    config.validate()?;
    if partition.clients() != config.clients {
        return Err(Error::Config(format!("partition has {} clients, config {}", partition.clients(), config.clients)));
    }
    let mut global = model0.clone();
    for round in 0..config.rounds {
        let mut sum = vec![0.0; global.dim()];
        let mut active = 0usize;
        for (client, shard) in partition.client_indices.iter().enumerate() {
            if shard.is_empty() {
                if round == 0 {
                    log::warn!("client {client} has an empty shard; skipped");
                }
                continue;
            }
            let mut local = global.clone();
            let mut rng = client_rng(config.seed, round, client);
            local_sgd(&mut local, data, shard, config.local_epochs, config.local_lr, config.batch_size, &mut rng)?;
            sum.iter_mut().zip(&local.params).for_each(|(s, p)| *s += p);
            active += 1;
        }
        if active == 0 {
            return Err(Error::InvalidArgument("every client shard is empty".into()));
        }
        global.params = sum.into_iter().map(|s| s / active as f64).collect();
    }
    Ok(global)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlearnMode {
    /// θu is θ* itself; both gradients are taken at one model.
    #[default]
    Simulated,
    /// θu is FedAvg retrained from scratch with D_f removed from every shard.
    Retrain,
}

/// The attacked set D = D_f ∪ D_r and which of its rows are forgotten.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlearnScenario {
    pub full_set: LabeledDataset,
    /// Positions in `full_set` that form D_f, in reconstruction order.
    pub forget: Vec<usize>,
    /// Where each `full_set` row sits in the federated training data;
    /// retrain mode removes `pool_indices[forget]` from the shards.
    pub pool_indices: Option<Vec<usize>>,
    pub mode: UnlearnMode,
}

impl UnlearnScenario {
    pub fn new(full_set: LabeledDataset, forget: Vec<usize>, pool_indices: Option<Vec<usize>>, mode: UnlearnMode) -> Result<Self> {
        let n = full_set.len();
        let mut seen = vec![false; n];
        for &i in &forget {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Config(format!("forget index {i} is out of range or repeated (|D| = {n})")));
            }
        }
        if let Some(p) = &pool_indices {
            if p.len() != n {
                return Err(Error::Config(format!("{} pool indices for {n} samples", p.len())));
            }
        }
        Ok(UnlearnScenario { full_set, forget, pool_indices, mode })
    }

    /// Positions of D_r in `full_set`, ascending.
    pub fn remain(&self) -> Vec<usize> {
        (0..self.full_set.len()).filter(|i| !self.forget.contains(i)).collect()
    }

    pub fn forgotten_set(&self) -> Result<LabeledDataset> {
        self.full_set.subset(&self.forget)
    }

    pub fn remaining_set(&self) -> Result<LabeledDataset> {
        self.full_set.subset(&self.remain())
    }
}

/// Post-unlearning model θu.
pub fn unlearn(
    model0: &Model,
    theta_star: &Model,
    scenario: &UnlearnScenario,
    data: &LabeledDataset,
    partition: &Partition,
    config: &FedConfig,
) -> Result<Model> {
    match scenario.mode {
        UnlearnMode::Simulated => Ok(theta_star.clone()),
        UnlearnMode::Retrain => {
            let pool = scenario
                .pool_indices
                .as_ref()
                .ok_or_else(|| Error::Config("retrain mode needs the pool index of every attacked sample".into()))?;
            let drop: Vec<usize> = scenario.forget.iter().map(|&i| pool[i]).collect();
            let reduced = partition.without(&drop);
            if reduced.total() == 0 {
                return Err(Error::InvalidArgument("retraining set is empty after removing D_f".into()));
            }
            train_federated(model0, data, &reduced, config)
        }
    }
}

/// The attacker's two observations.
#[derive(Clone, Debug, PartialEq)]
pub struct CapturedPair {
    pub theta_star: Model,
    pub theta_u: Model,
    /// Mean gradient of θ* over D.
    pub g_pre: FlatGradient,
    /// Mean gradient of θu over D_r.
    pub g_post: FlatGradient,
}

pub fn capture_pair(theta_star: &Model, theta_u: &Model, scenario: &UnlearnScenario) -> Result<CapturedPair> {
    if theta_star.spec != theta_u.spec {
        return Err(Error::LayoutMismatch("pre- and post-unlearning models differ in architecture".into()));
    }
    let d = &scenario.full_set;
    let dr = scenario.remaining_set()?;
    if dr.is_empty() {
        return Err(Error::InvalidArgument("D_r is empty: nothing for the post-unlearning gradient".into()));
    }
    Ok(CapturedPair {
        theta_star: theta_star.clone(),
        theta_u: theta_u.clone(),
        g_pre: param_grad(theta_star, &d.images, &label_tensor(&d.labels))?,
        g_post: param_grad(theta_u, &dr.images, &label_tensor(&dr.labels))?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub arch: String,
    pub dim: usize,
    pub mode: UnlearnMode,
    pub full_size: usize,
    pub forget: Vec<usize>,
    pub seeds: serde_json::Value,
    pub files: Vec<String>,
}

impl CapturedPair {
    const FILES: [&'static str; 4] = ["theta_star.bin", "theta_u.bin", "g_pre.bin", "g_post.bin"];

    /// Writes both models (flat binary + layout sidecar), both gradients
    /// (flat binary) and `pair.json`.
    pub fn save(&self, dir: &Path, scenario: &UnlearnScenario, seeds: serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.theta_star.save(&dir.join(Self::FILES[0]))?;
        self.theta_u.save(&dir.join(Self::FILES[1]))?;
        write_flat(&dir.join(Self::FILES[2]), &self.g_pre.values)?;
        write_flat(&dir.join(Self::FILES[3]), &self.g_post.values)?;
        let manifest = PairManifest {
            arch: self.theta_star.spec.describe(),
            dim: self.theta_star.dim(),
            mode: scenario.mode,
            full_size: scenario.full_set.len(),
            forget: scenario.forget.clone(),
            seeds,
            files: Self::FILES.iter().map(|s| s.to_string()).collect(),
        };
        let path = dir.join("pair.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let theta_star = Model::load(&dir.join(Self::FILES[0]))?;
        let theta_u = Model::load(&dir.join(Self::FILES[1]))?;
        let g_pre = FlatGradient::new(read_flat(&dir.join(Self::FILES[2]))?, theta_star.layout().clone())?;
        let g_post = FlatGradient::new(read_flat(&dir.join(Self::FILES[3]))?, theta_u.layout().clone())?;
        Ok(CapturedPair { theta_star, theta_u, g_pre, g_post })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{dirichlet_partition, synthetic};
    use crate::models::{build_model, Arch, ArchSpec};

    fn setup() -> (Model, LabeledDataset) {
        let data = synthetic::blobs(40, 2, [1, 4, 4], 0).unwrap();
        let model = build_model(&ArchSpec::new(Arch::Mlp, [1, 4, 4], 2).with_width(0.25), 1).unwrap();
        (model, data)
    }

    fn cfg(clients: usize, rounds: usize) -> FedConfig {
        FedConfig { clients, rounds, local_epochs: 1, local_lr: 0.5, batch_size: 8, seed: 3 }
    }

    #[test]
    fn zero_rounds_is_identity() {
        let (m, d) = setup();
        let p = dirichlet_partition(&d, 4, 1.0, 0).unwrap();
        assert_eq!(train_federated(&m, &d, &p, &cfg(4, 0)).unwrap(), m);
    }

    #[test]
    fn single_client_equals_centralized_sgd() {
        let (m, d) = setup();
        let p = Partition { client_indices: vec![(0..40).collect()] };
        let fed = train_federated(&m, &d, &p, &cfg(1, 1)).unwrap();
        let mut central = m.clone();
        local_sgd(&mut central, &d, &p.client_indices[0], 1, 0.5, 8, &mut client_rng(3, 0, 0)).unwrap();
        assert_eq!(fed.params, central.params);
    }

    #[test]
    fn simulated_unlearning_returns_theta_star() {
        let (m, d) = setup();
        let p = dirichlet_partition(&d, 4, 1.0, 0).unwrap();
        let star = train_federated(&m, &d, &p, &cfg(4, 2)).unwrap();
        let sc = UnlearnScenario::new(d.subset(&[0, 1, 2, 3]).unwrap(), vec![1], None, UnlearnMode::Simulated).unwrap();
        assert_eq!(unlearn(&m, &star, &sc, &d, &p, &cfg(4, 2)).unwrap().params, star.params);
        let pair = capture_pair(&star, &star, &sc).unwrap();
        assert_eq!(pair.g_pre.layout, *star.layout());
    }

    #[test]
    fn scenario_rejects_bad_forget_sets() {
        let (_, d) = setup();
        assert!(UnlearnScenario::new(d.subset(&[0, 1]).unwrap(), vec![2], None, UnlearnMode::Simulated).is_err());
        assert!(UnlearnScenario::new(d.subset(&[0, 1]).unwrap(), vec![1, 1], None, UnlearnMode::Simulated).is_err());
    }
}
