//! Triplet sampling and the SGD-with-momentum training loop.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::losses::{total_loss, RankingConfig, TripletIndex};
use crate::network::{Checkpoint, DualNetwork};
use crate::schema::{AttributeLabels, Domain};
use crate::tensor::Tensor;

/// A domain-tagged attributed image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Unique per image.
    pub id: String,
    /// Shared by all renderings of one item.
    pub item_id: String,
    pub domain: Domain,
    /// `[C, H, W]` with values in `[0, 1]`.
    pub image: Tensor,
    /// Training labels; `None` where the annotation is missing.
    pub labels: AttributeLabels,
    /// Ground-truth attributes of the item, used for evaluation.
    pub attributes: AttributeLabels,
}

/// Offline anchor, online positive of the same item, online negative of a
/// different item; all indices into a sample slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_triplets: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Write `epoch_<n>.ckpt` every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_triplets: 16,
            learning_rate: 0.001,
            momentum: 0.9,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_triplets == 0 {
            return Err(Error::config("batch_triplets", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// `(offline index, online index)` pairs of the same item, plus the online
/// pool, for a slice of samples. Offline samples without an online
/// counterpart are a validation error.
pub fn pair_samples(samples: &[Sample]) -> Result<(Vec<(usize, usize)>, Vec<usize>)> {
    let mut online: HashMap<&str, usize> = HashMap::new();
    let mut pool = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if s.domain == Domain::Online {
            if online.insert(&s.item_id, i).is_some() {
                return Err(Error::Validation(format!(
                    "item {} has more than one online image",
                    s.item_id
                )));
            }
            pool.push(i);
        }
    }
    let mut pairs = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if s.domain == Domain::Offline {
            let j = online.get(s.item_id.as_str()).ok_or_else(|| {
                Error::Validation(format!("offline image {} has no online counterpart", s.id))
            })?;
            pairs.push((i, *j));
        }
    }
    Ok((pairs, pool))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// One triplet per pair, negatives drawn uniformly from `online_pool` and
/// redrawn until their item differs from the anchor's. The stream depends on
/// `(seed, epoch)`.
pub fn sample_triplets(
    samples: &[Sample],
    pairs: &[(usize, usize)],
    online_pool: &[usize],
    epoch: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    let distinct: BTreeSet<&str> = online_pool
        .iter()
        .map(|&i| samples[i].item_id.as_str())
        .collect();
    if distinct.len() < 2 {
        return Err(Error::Sampling(format!(
            "online pool has {} distinct item ids; need at least 2",
            distinct.len()
        )));
    }
    let mut rng = epoch_rng(seed, epoch);
    let mut out = Vec::with_capacity(pairs.len());
    for &(anchor, positive) in pairs {
        let item = &samples[anchor].item_id;
        let negative = loop {
            let cand = online_pool[rng.random_range(0..online_pool.len())];
            if &samples[cand].item_id != item {
                break cand;
            }
        };
        out.push(Triplet {
            anchor,
            positive,
            negative,
        });
    }
    Ok(out)
}

/// `v <- momentum * v - lr * g; w <- w + v`. Missing gradients count as 0.
pub fn sgd_momentum_update(
    params: &mut [Tensor],
    velocities: &mut [Tensor],
    grads: &[Option<&Tensor>],
    learning_rate: f64,
    momentum: f64,
) {
    for ((w, v), g) in params.iter_mut().zip(velocities.iter_mut()).zip(grads) {
        match g {
            Some(g) => {
                for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vi = momentum * *vi - learning_rate * gi;
                    *wi += *vi;
                }
            }
            None => {
                for (wi, vi) in w.data_mut().iter_mut().zip(v.data_mut()) {
                    *vi *= momentum;
                    *wi += *vi;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub attr: f64,
    pub rank: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub attr: f64,
    pub rank: f64,
}

pub fn write_loss_csv(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut text = String::from("epoch,step,total,attr,rank\n");
    for r in log {
        text.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.step, r.total, r.attr, r.rank));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Network plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    network: DualNetwork,
    velocities: Vec<Vec<Tensor>>,
    pub config: TrainConfig,
    pub ranking: RankingConfig,
}

impl Trainer {
    pub fn new(network: DualNetwork, config: TrainConfig, ranking: RankingConfig) -> Result<Self> {
        config.validate()?;
        ranking.validate()?;
        let velocities = network
            .nets()
            .iter()
            .map(|(_, n)| n.params().iter().map(|p| Tensor::zeros(p.shape())).collect())
            .collect();
        Ok(Trainer {
            network,
            velocities,
            config,
            ranking,
        })
    }

    /// Resumes from a checkpoint, including momentum buffers when present.
    pub fn from_checkpoint(ck: Checkpoint, config: TrainConfig, ranking: RankingConfig) -> Result<Self> {
        let mut t = Trainer::new(ck.network, config, ranking)?;
        if let Some(v) = ck.velocities {
            t.velocities = v;
        }
        Ok(t)
    }

    pub fn network(&self) -> &DualNetwork {
        &self.network
    }

    pub fn into_network(self) -> DualNetwork {
        self.network
    }

    pub fn checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            network: self.network.clone(),
            velocities: Some(self.velocities.clone()),
            meta,
        }
    }

    /// Forward/backward over one batch of triplets and a momentum update of
    /// every sub-network. Returns the loss before the update.
    pub fn train_step(&mut self, samples: &[Sample], batch: &[Triplet]) -> Result<StepLoss> {
        if batch.is_empty() {
            return Err(Error::Contract("empty training batch".into()));
        }
        let mut routed_samples = Vec::with_capacity(batch.len() * 3);
        let mut labels = Vec::with_capacity(batch.len() * 3);
        let mut triplets = Vec::with_capacity(batch.len());
        for t in batch {
            let base = routed_samples.len();
            for idx in [t.anchor, t.positive, t.negative] {
                let s = &samples[idx];
                routed_samples.push((s.domain, &s.image));
                labels.push(s.labels.clone());
            }
            triplets.push(TripletIndex {
                anchor: base,
                positive: base + 1,
                negative: base + 2,
            });
        }
        let mut g = Graph::new();
        let bound = self.network.bind(&mut g);
        let routed = self.network.route_batch(&mut g, &bound, &routed_samples)?;
        let terms = total_loss(&mut g, &routed, &labels, &triplets, &self.ranking)?;
        let loss = StepLoss {
            total: g.value(terms.total).data()[0],
            attr: g.value(terms.attr).data()[0],
            rank: g.value(terms.rank).data()[0],
        };
        for (name, v) in [("attribute loss", loss.attr), ("ranking loss", loss.rank), ("total loss", loss.total)] {
            if !v.is_finite() {
                return Err(Error::Numeric { term: name.into() });
            }
        }
        let grads = g.backward(terms.total)?;
        let (lr, mom) = (self.config.learning_rate, self.config.momentum);
        let ids = [bound.shop, bound.street];
        for (k, (_, net)) in self.network.nets_mut().into_iter().enumerate() {
            let gs: Vec<Option<&Tensor>> = ids[k].iter().map(|&id| grads.get(id)).collect();
            sgd_momentum_update(net.params_mut(), &mut self.velocities[k], &gs, lr, mom);
        }
        Ok(loss)
    }

    /// Runs `epochs` passes over `samples`. Each epoch draws fresh negatives,
    /// shuffles the triplets and steps through them in batches.
    pub fn run_epochs(
        &mut self,
        samples: &[Sample],
        first_epoch: usize,
        epochs: usize,
        mut on_epoch: impl FnMut(usize, &Trainer) -> Result<()>,
    ) -> Result<Vec<LossRecord>> {
        let (pairs, pool) = pair_samples(samples)?;
        let mut log = Vec::new();
        for epoch in first_epoch..first_epoch + epochs {
            let mut triplets = sample_triplets(samples, &pairs, &pool, epoch, self.config.seed)?;
            let mut rng = epoch_rng(self.config.seed ^ 0x5eed_0f_7a1e, epoch);
            triplets.shuffle(&mut rng);
            for (step, batch) in triplets.chunks(self.config.batch_triplets).enumerate() {
                let l = self.train_step(samples, batch)?;
                log.push(LossRecord {
                    epoch,
                    step,
                    total: l.total,
                    attr: l.attr,
                    rank: l.rank,
                });
            }
            on_epoch(epoch, self)?;
        }
        Ok(log)
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: Vec<LossRecord>,
    pub network: DualNetwork,
}

/// Full training run writing `loss.csv`, periodic `epoch_<n>.ckpt` files and
/// the final `checkpoint.ckpt` under `out_dir`.
pub fn train(
    samples: &[Sample],
    network: DualNetwork,
    config: &TrainConfig,
    ranking: &RankingConfig,
    out_dir: &Path,
    meta: serde_json::Value,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(network, config.clone(), ranking.clone())?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let every = config.checkpoint_every;
    let log = trainer.run_epochs(samples, 0, config.epochs, |epoch, t| {
        if every > 0 && (epoch + 1) % every == 0 {
            let p = out_dir.join(format!("epoch_{}.ckpt", epoch + 1));
            t.checkpoint(serde_json::json!({ "epoch": epoch + 1, "run": meta })).save(&p)?;
        }
        Ok(())
    })?;
    write_loss_csv(&out_dir.join("loss.csv"), &log)?;
    let checkpoint = out_dir.join("checkpoint.ckpt");
    trainer
        .checkpoint(serde_json::json!({ "epoch": config.epochs, "run": meta }))
        .save(&checkpoint)?;
    Ok(TrainOutcome {
        checkpoint,
        log,
        network: trainer.into_network(),
    })
}
