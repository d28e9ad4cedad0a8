//! Dataset splitting, the training loop and checkpoints.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::fqt::Container;
use crate::nn::{Mode, NetConfig, ResSeUNet, Session};
use crate::tensor::{AdamConfig, AdamState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Thinning,
    Displacement,
}

impl TargetKind {
    pub fn channels(self) -> usize {
        match self {
            TargetKind::Thinning => 1,
            TargetKind::Displacement => 3,
        }
    }

    pub fn target(self, s: &Sample) -> &Tensor<f32> {
        match self {
            TargetKind::Thinning => &s.thinning,
            TargetKind::Displacement => &s.displacement,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Epochs without a new best test loss before stopping.
    // Required key; `null` disables the rule.
    #[serde(deserialize_with = "Option::deserialize")]
    pub patience: Option<usize>,
    pub test_frac: f64,
    pub seed: u64,
    /// Stop once the epoch's training loss drops below this.
    #[serde(deserialize_with = "Option::deserialize")]
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1500,
            batch_size: 20,
            adam: AdamConfig::default(),
            patience: Some(100),
            test_frac: 0.1,
            seed: 0,
            target_loss: None,
        }
    }
}

/// Seeded shuffle of `0..n` into (train, test) index lists; the test part has
/// `round(test_frac * n)` entries.
pub fn split(n: usize, test_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::EmptyRequest("splitting an empty dataset"));
    }
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_frac} outside (0, 1)"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (test_frac * n as f64).round() as usize;
    let train = idx.split_off(n_test);
    Ok((train, idx))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Stacks inputs and targets of a batch.
pub fn stack_batch(samples: &[&Sample], kind: TargetKind) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let inputs: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.input).collect();
    let targets: Vec<&Tensor<f32>> = samples.iter().map(|s| kind.target(s)).collect();
    Ok((Tensor::stack(&inputs)?, Tensor::stack(&targets)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub kind: TargetKind,
    pub net_config: NetConfig,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub steps: u64,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub stop_reason: String,
    pub wall_seconds: f64,
}

pub struct Trainer {
    pub net: ResSeUNet<f32>,
    pub adam: AdamState<f32>,
    pub kind: TargetKind,
    pub config: TrainConfig,
    /// Epochs completed so far.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    /// Fresh network initialised from `config.seed`.
    pub fn new(net_config: NetConfig, kind: TargetKind, config: TrainConfig) -> Result<Self> {
        let net = ResSeUNet::new(net_config, config.seed)?;
        Self::with_net(net, kind, config)
    }

    pub fn with_net(net: ResSeUNet<f32>, kind: TargetKind, config: TrainConfig) -> Result<Self> {
        if net.config().out_channels != kind.channels() {
            return Err(Error::Architecture(format!(
                "{:?} targets have {} channels, network outputs {}",
                kind,
                kind.channels(),
                net.config().out_channels
            )));
        }
        if config.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size 0".into()));
        }
        let adam = AdamState::new(
            config.adam,
            net.params()
                .entries()
                .iter()
                .filter(|e| e.kind == crate::nn::ParamKind::Trainable)
                .map(|e| &e.value),
        );
        Ok(Self {
            net,
            adam,
            kind,
            config,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// One optimizer step on a batch; returns the batch loss before the update.
    pub fn step(&mut self, batch: &[&Sample]) -> Result<f64> {
        let (x, y) = stack_batch(batch, self.kind)?;
        let (loss, grads, bn) = {
            let mut s = Session::new(self.net.params(), Mode::Train, true);
            let xv = s.graph.constant(x);
            let out = self.net.forward(&mut s, xv)?;
            let l = s.graph.mse_loss(out, &y)?;
            s.graph.backward(l)?;
            let loss = f64::from(s.graph.value(l).data()[0]);
            (loss, s.take_grads(), s.take_bn_updates())
        };
        if !loss.is_finite() {
            return Err(Error::InvalidArgument(format!("training loss became {loss}")));
        }
        let grad_refs: Vec<Option<&Tensor<f32>>> = grads.iter().map(Option::as_ref).collect();
        let momentum = self.net.config().bn_momentum;
        let params = self.net.params_mut();
        let mut trainable = params.trainable_mut();
        self.adam.update(&mut trainable, &grad_refs)?;
        params.apply_bn_updates(bn, momentum);
        Ok(loss)
    }

    /// A full pass over `train` in a shuffled order fixed by (seed, epoch).
    /// Returns the sample-weighted mean of the batch losses.
    pub fn train_epoch(&mut self, train: &[Sample]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::EmptyRequest("training on an empty set"));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut epoch_rng(self.config.seed, self.epoch));
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            total += self.step(&batch)? * chunk.len() as f64;
        }
        self.epoch += 1;
        Ok(total / train.len() as f64)
    }

    /// Eval-mode MSE over `samples`.
    pub fn evaluate_loss(&self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::EmptyRequest("evaluating on an empty set"));
        }
        let mut sse = 0.0;
        let mut count = 0usize;
        for chunk in samples.chunks(self.config.batch_size) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let (x, y) = stack_batch(&refs, self.kind)?;
            let p = self.net.predict(&x)?;
            sse += p
                .data()
                .iter()
                .zip(y.data())
                .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
                .sum::<f64>();
            count += y.len();
        }
        Ok(sse / count as f64)
    }

    /// Trains until the epoch cap, the patience limit or the target loss.
    /// The network is left holding the best weights seen; when `checkpoint_path`
    /// is given, that checkpoint is written there.
    pub fn run(&mut self, train: &[Sample], test: &[Sample], checkpoint_path: Option<&Path>) -> Result<TrainRun> {
        if train.is_empty() {
            return Err(Error::EmptyRequest("training on an empty set"));
        }
        let start = Instant::now();
        let first_epoch = self.history.len();
        let mut best: Option<(f64, usize, Container)> = None;
        let mut stop_reason = "epoch cap".to_string();
        while self.epoch < self.config.epochs {
            let t0 = Instant::now();
            let train_loss = self.train_epoch(train)?;
            let test_loss = if test.is_empty() {
                None
            } else {
                Some(self.evaluate_loss(test)?)
            };
            self.history.push(EpochRecord {
                epoch: self.epoch,
                train_loss,
                test_loss,
                seconds: t0.elapsed().as_secs_f64(),
            });
            let score = test_loss.unwrap_or(train_loss);
            if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
                best = Some((score, self.epoch, self.checkpoint()?));
            }
            if self.config.target_loss.is_some_and(|t| train_loss < t) {
                stop_reason = "target loss".into();
                break;
            }
            if let (Some(p), Some((_, be, _))) = (self.config.patience, &best) {
                if self.epoch - be >= p {
                    stop_reason = "patience".into();
                    break;
                }
            }
        }
        let (best_loss, best_epoch) = match best {
            Some((loss, epoch, ckpt)) => {
                let history = std::mem::take(&mut self.history);
                let restored = Self::from_checkpoint(ckpt)?;
                *self = Self {
                    history,
                    config: self.config,
                    epoch: self.epoch,
                    ..restored
                };
                if let Some(path) = checkpoint_path {
                    self.best_checkpoint_bytes(path, epoch)?;
                }
                (loss, epoch)
            }
            None => (f64::NAN, self.epoch),
        };
        Ok(TrainRun {
            kind: self.kind,
            net_config: self.net.config().clone(),
            config: self.config,
            epochs: self.history[first_epoch..].to_vec(),
            steps: self.adam.step,
            best_epoch,
            best_loss,
            stop_reason,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }

    fn best_checkpoint_bytes(&self, path: &Path, best_epoch: usize) -> Result<()> {
        let mut c = self.checkpoint()?;
        if let Some(j) = c.json.as_mut() {
            j["epoch"] = json!(best_epoch);
        }
        c.write(path)
    }

    /// Parameters, buffers, Adam moments and the run state in one container.
    pub fn checkpoint(&self) -> Result<Container> {
        let mut c = Container::new();
        for e in self.net.params().entries() {
            c.push(format!("param/{}", e.name), e.value.clone());
        }
        for (i, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            c.push(format!("adam/m/{i}"), m.clone());
            c.push(format!("adam/v/{i}"), v.clone());
        }
        c.json = Some(json!({
            "kind": self.kind,
            "net_config": self.net.config(),
            "train_config": self.config,
            "epoch": self.epoch,
            "adam_step": self.adam.step,
            "adam_slots": self.adam.m.len(),
            "history": self.history,
        }));
        Ok(c)
    }

    pub fn from_checkpoint(mut c: Container) -> Result<Self> {
        let meta = c
            .json
            .take()
            .ok_or_else(|| Error::Format("checkpoint has no JSON trailer".into()))?;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint JSON lacks `{k}`")))
        };
        let kind: TargetKind = serde_json::from_value(field("kind")?)?;
        let net_config: NetConfig = serde_json::from_value(field("net_config")?)?;
        let config: TrainConfig = serde_json::from_value(field("train_config")?)?;
        let epoch: usize = serde_json::from_value(field("epoch")?)?;
        let step: u64 = serde_json::from_value(field("adam_step")?)?;
        let history: Vec<EpochRecord> = serde_json::from_value(field("history")?)?;
        let mut net = ResSeUNet::new(net_config, 0)?;
        net.params_mut()
            .load_named(|name| c.take(&format!("param/{name}")).ok())?;
        let mut t = Self::with_net(net, kind, config)?;
        for i in 0..t.adam.m.len() {
            let m = c.take(&format!("adam/m/{i}"))?;
            let v = c.take(&format!("adam/v/{i}"))?;
            if m.dims() != t.adam.m[i].dims() || v.dims() != t.adam.v[i].dims() {
                return Err(Error::Shape(format!("adam slot {i} does not match the network")));
            }
            t.adam.m[i] = m;
            t.adam.v[i] = v;
        }
        t.adam.step = step;
        t.epoch = epoch;
        t.history = history;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Container::read(path)?)
    }
}

/// Network weights and kind from a checkpoint file, for inference.
pub fn load_network(path: impl AsRef<Path>) -> Result<(ResSeUNet<f32>, TargetKind)> {
    let t = Trainer::load(path)?;
    Ok((t.net, t.kind))
}
