//! The federated training loop.
//!
//! A run pretrains the global model on a source dataset, then for every
//! round samples the available clients, lets each one select its local
//! training subset and fine-tune, and averages the uploaded trainable
//! parameters weighted by the number of samples each client trained on.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientPartition, Dataset};
use crate::error::{FedError, Result};
use crate::nn::{cross_entropy_loss, softmax_rows, Layer, Model, Sgd};
use crate::seed::{derive_seed, rng_from, Stream};
use crate::selection::{select_all, select_by_entropy, select_random, SelectionResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Full-model training; random data selection when `p_ds < 1`.
    Fedavg,
    /// FedAvg with a proximal term; random data selection when `p_ds < 1`.
    Fedprox,
    /// Frozen feature extractor, random data selection.
    FedftRds,
    /// Frozen feature extractor, entropy-based data selection.
    FedftEds,
    /// Frozen feature extractor, all local data.
    FedftAll,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Fedavg,
        Strategy::Fedprox,
        Strategy::FedftRds,
        Strategy::FedftEds,
        Strategy::FedftAll,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Fedavg => "fedavg",
            Strategy::Fedprox => "fedprox",
            Strategy::FedftRds => "fedft_rds",
            Strategy::FedftEds => "fedft_eds",
            Strategy::FedftAll => "fedft_all",
        }
    }

    pub fn freezes_features(self) -> bool {
        matches!(
            self,
            Strategy::FedftRds | Strategy::FedftEds | Strategy::FedftAll
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| FedError::Config(format!("unknown strategy {s:?}")))
    }
}

/// How client training time is accounted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    /// Operation count divided by `device_flops`; reproducible bit for bit.
    Modeled,
    /// Wall-clock time of the client's selection and training.
    Measured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub strategy: Strategy,
    pub rounds: usize,
    pub local_epochs: usize,
    pub num_clients: usize,
    pub participation_fraction: f64,
    /// Selected share of each client's data. When absent, the selective
    /// fine-tuning strategies use 0.5 and the others train on everything.
    pub p_ds: Option<f64>,
    pub rho: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub prox_mu: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    /// Hidden layer widths of the MLP.
    pub hidden_widths: Vec<usize>,
    /// First trainable layer under the fedft strategies; defaults to the
    /// final dense layer.
    pub split_index: Option<usize>,
    /// Swap the pretrained classifier for a freshly initialised one before
    /// the first round, as when the target label set differs from the source.
    pub fresh_classifier: bool,
    pub master_seed: u64,
    pub clock: Clock,
    /// Nominal client throughput for [`Clock::Modeled`], in operations per second.
    pub device_flops: f64,
    /// Worker threads for client simulation; 0 uses every core.
    pub threads: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::FedftEds,
            rounds: 30,
            local_epochs: 5,
            num_clients: 20,
            participation_fraction: 1.0,
            p_ds: None,
            rho: 0.1,
            learning_rate: 0.1,
            momentum: 0.5,
            prox_mu: 0.01,
            batch_size: 32,
            pretrain_epochs: 10,
            hidden_widths: vec![64, 64],
            split_index: None,
            fresh_classifier: true,
            master_seed: 0,
            clock: Clock::Modeled,
            device_flops: 1.0e9,
            threads: 1,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(FedError::Config(msg));
        if self.local_epochs == 0 {
            return fail("local_epochs must be at least 1".into());
        }
        if self.num_clients == 0 {
            return fail("num_clients must be at least 1".into());
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return fail(format!(
                "participation_fraction must lie in (0, 1], got {}",
                self.participation_fraction
            ));
        }
        if (self.participation_fraction * self.num_clients as f64).round() < 1.0 {
            return fail("participation_fraction * num_clients rounds to zero clients".into());
        }
        if let Some(p) = self.p_ds {
            if !(p > 0.0 && p <= 1.0) {
                return fail(format!("p_ds must lie in (0, 1], got {p}"));
            }
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return fail(format!("rho must be positive, got {}", self.rho));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return fail(format!("prox_mu must be nonnegative, got {}", self.prox_mu));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.hidden_widths.contains(&0) {
            return fail("hidden widths must be positive".into());
        }
        if !(self.device_flops > 0.0 && self.device_flops.is_finite()) {
            return fail("device_flops must be positive".into());
        }
        Ok(())
    }

    /// Selection fraction actually used by the strategy.
    pub fn effective_p_ds(&self) -> f64 {
        match (self.strategy, self.p_ds) {
            (Strategy::FedftAll, _) => 1.0,
            (_, Some(p)) => p,
            (Strategy::FedftEds | Strategy::FedftRds, None) => 0.5,
            (Strategy::Fedavg | Strategy::Fedprox, None) => 1.0,
        }
    }

    /// Builds the freshly initialised model with the strategy's split.
    pub fn build_model(&self, input_width: usize, num_classes: usize) -> Result<Model> {
        let mut widths = vec![input_width];
        widths.extend_from_slice(&self.hidden_widths);
        widths.push(num_classes);
        let seed = derive_seed(self.master_seed, Stream::Init, &[]);
        let mut model = Model::mlp(&widths, 0, seed)?;
        let split = if self.strategy.freezes_features() {
            self.split_index.unwrap_or_else(|| model.classifier_split())
        } else {
            0
        };
        model
            .set_split_index(split)
            .map_err(|e| FedError::Config(e.to_string()))?;
        if model.theta_len() == 0 {
            return Err(FedError::Config(format!(
                "split index {split} leaves nothing to train"
            )));
        }
        Ok(model)
    }
}

/// Optimizer settings shared by pretraining and local updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl From<&FederationConfig> for TrainSettings {
    fn from(c: &FederationConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            momentum: c.momentum,
            batch_size: c.batch_size,
        }
    }
}

/// Runs `epochs` of mini-batch SGD over `indices`, reshuffling every epoch
/// with the seed `epoch_seed(epoch)`. When `prox` is set, `mu (theta - anchor)`
/// is added to every gradient. Returns the mean loss of each epoch.
fn train_epochs(
    model: &mut Model,
    data: &Dataset,
    indices: &[usize],
    epochs: usize,
    opt: &mut Sgd,
    batch_size: usize,
    prox: Option<(&[f64], f64)>,
    epoch_seed: impl Fn(usize) -> u64,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(epochs);
    let mut order = indices.to_vec();
    for epoch in 0..epochs {
        order.copy_from_slice(indices);
        order.shuffle(&mut rng_from(epoch_seed(epoch)));
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let (batch, labels) = data.batch(chunk);
            let (loss, mut grads) = model.loss_and_gradients(&batch, &labels)?;
            if let Some((anchor, mu)) = prox {
                for ((g, t), a) in grads.values.iter_mut().zip(model.theta()).zip(anchor) {
                    *g += mu * (t - a);
                }
            }
            opt.step_model(model, &grads)?;
            total += loss * chunk.len() as f64;
        }
        losses.push(total / indices.len() as f64);
    }
    Ok(losses)
}

/// Trains every layer on the source domain, ignoring the split. Returns the
/// trained model and the mean loss of each epoch.
pub fn pretrain(
    model: &Model,
    source: &Dataset,
    epochs: usize,
    settings: TrainSettings,
    seed: u64,
) -> Result<(Model, Vec<f64>)> {
    if source.is_empty() {
        return Err(FedError::Parameter("empty source dataset".into()));
    }
    if epochs == 0 {
        return Ok((model.clone(), Vec::new()));
    }
    let mut full = model.clone();
    full.set_split_index(0)?;
    let mut opt = Sgd::new(settings.learning_rate, settings.momentum, full.theta_len())?;
    let indices: Vec<usize> = (0..source.len()).collect();
    let losses = train_epochs(
        &mut full,
        source,
        &indices,
        epochs,
        &mut opt,
        settings.batch_size,
        None,
        |epoch| derive_seed(seed, Stream::Pretrain, &[epoch as u64]),
    )?;
    full.set_split_index(model.split_index())?;
    Ok((full, losses))
}

/// One client's contribution to a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub theta: Vec<f64>,
    pub selected_count: usize,
    /// Training time under the configured [`Clock`].
    pub train_time_seconds: f64,
    /// Wall-clock time, always measured.
    pub wall_seconds: f64,
}

/// Seed coordinates of a local update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateSeeds {
    pub master_seed: u64,
    pub round: usize,
    pub client_id: usize,
}

impl UpdateSeeds {
    fn epoch_seed(&self, epoch: usize) -> u64 {
        derive_seed(
            self.master_seed,
            Stream::Shuffle,
            &[self.round as u64, self.client_id as u64, epoch as u64],
        )
    }
}

/// Local fine-tuning of the trainable part of `global` on the selected
/// samples. Momentum starts from zero.
pub fn client_local_update(
    global: &Model,
    data: &Dataset,
    selected: &[usize],
    epochs: usize,
    settings: TrainSettings,
    seeds: UpdateSeeds,
) -> Result<(Model, Vec<f64>)> {
    local_update(global, data, selected, epochs, settings, seeds, 0.0)
}

/// [`client_local_update`] with the proximal gradient `mu (theta - theta_t)`.
pub fn fedprox_local_update(
    global: &Model,
    data: &Dataset,
    selected: &[usize],
    epochs: usize,
    settings: TrainSettings,
    seeds: UpdateSeeds,
    mu: f64,
) -> Result<(Model, Vec<f64>)> {
    if !(mu >= 0.0) {
        return Err(FedError::Parameter(format!(
            "mu must be nonnegative, got {mu}"
        )));
    }
    local_update(global, data, selected, epochs, settings, seeds, mu)
}

fn local_update(
    global: &Model,
    data: &Dataset,
    selected: &[usize],
    epochs: usize,
    settings: TrainSettings,
    seeds: UpdateSeeds,
    mu: f64,
) -> Result<(Model, Vec<f64>)> {
    if selected.is_empty() {
        return Err(FedError::Parameter("no selected samples".into()));
    }
    let mut model = global.clone();
    let mut opt = Sgd::new(settings.learning_rate, settings.momentum, model.theta_len())?;
    let anchor = global.theta();
    let prox = (mu > 0.0).then_some((anchor.as_slice(), mu));
    let losses = train_epochs(
        &mut model,
        data,
        selected,
        epochs,
        &mut opt,
        settings.batch_size,
        prox,
        |e| seeds.epoch_seed(e),
    )?;
    Ok((model, losses))
}

/// Weights `p_k = n_k / sum n` of the updates, in the order given.
pub fn aggregation_weights(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(FedError::Protocol("no client updates to aggregate".into()));
    }
    if let Some(u) = updates.iter().find(|u| u.selected_count == 0) {
        return Err(FedError::Protocol(format!(
            "client {} trained on zero samples",
            u.client_id
        )));
    }
    let total: usize = updates.iter().map(|u| u.selected_count).sum();
    Ok(updates
        .iter()
        .map(|u| u.selected_count as f64 / total as f64)
        .collect())
}

/// Sample-count weighted average of the uploaded parameters, summed in
/// ascending client order and clamped to the entrywise range of the inputs.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    let mut ordered: Vec<ClientUpdate> = updates.to_vec();
    ordered.sort_by_key(|u| u.client_id);
    let weights = aggregation_weights(&ordered)?;
    let len = ordered[0].theta.len();
    if let Some(u) = ordered.iter().find(|u| u.theta.len() != len) {
        return Err(FedError::Protocol(format!(
            "client {} uploaded {} parameters, expected {len}",
            u.client_id,
            u.theta.len()
        )));
    }
    let mut out = vec![0.0; len];
    let mut lo = vec![f64::INFINITY; len];
    let mut hi = vec![f64::NEG_INFINITY; len];
    for (u, w) in ordered.iter().zip(&weights) {
        for (i, &v) in u.theta.iter().enumerate() {
            out[i] += w * v;
            lo[i] = lo[i].min(v);
            hi[i] = hi[i].max(v);
        }
    }
    for ((o, l), h) in out.iter_mut().zip(&lo).zip(&hi) {
        *o = o.clamp(*l, *h);
    }
    Ok(out)
}

/// `max(1, round(f_n N))` distinct client ids, ascending.
pub fn sample_participants(
    num_clients: usize,
    fraction: f64,
    round_seed: u64,
) -> Result<Vec<usize>> {
    if num_clients == 0 {
        return Err(FedError::Parameter("no clients".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(FedError::Parameter(format!(
            "participation fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let k = ((fraction * num_clients as f64).round() as usize).clamp(1, num_clients);
    let mut ids = index::sample(&mut rng_from(round_seed), num_clients, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Test accuracy and mean cross-entropy of `model` on `data`.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(1024) {
        let (batch, labels) = data.batch(chunk);
        let probs = softmax_rows(&model.logits(&batch)?, 1.0)?;
        loss_sum += cross_entropy_loss(&probs, &labels)? * chunk.len() as f64;
        for (row, &y) in probs.iter_rows().zip(&labels) {
            let argmax = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &p)| if p > row[best] { j } else { best });
            if argmax == y {
                correct += 1;
            }
        }
    }
    Ok((
        correct as f64 / data.len() as f64,
        loss_sum / data.len() as f64,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub participating_clients: Vec<usize>,
    pub global_test_accuracy: f64,
    pub global_test_loss: f64,
    /// Summed client training time so far, under the configured clock.
    pub cumulative_client_train_time: f64,
    /// Summed measured client wall-clock time so far.
    pub cumulative_wall_time: f64,
    pub selected_counts: Vec<usize>,
    /// Parameters exchanged this round (download plus upload), in bytes.
    pub bytes_exchanged: u64,
}

impl RoundReport {
    pub fn total_selected(&self) -> usize {
        self.selected_counts.iter().sum()
    }
}

/// Everything produced by one round.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub report: RoundReport,
    pub updates: Vec<ClientUpdate>,
    pub selections: Vec<(usize, SelectionResult)>,
}

fn last_dense(layers: &[Layer]) -> Option<usize> {
    layers.iter().rposition(|l| matches!(l, Layer::Dense(_)))
}

/// Copies the final dense layer of `from` into `model`. The final dense layer
/// is always trainable, since a split past it is rejected.
fn replace_classifier(model: &mut Model, from: &Model) {
    let (_, source) = from.split_params();
    let fresh = source[last_dense(source).expect("classifier")].clone();
    let (_, theta) = model.split_params_mut();
    let i = last_dense(theta).expect("classifier");
    theta[i] = fresh;
}

/// Server state of a run, advanced one round at a time.
pub struct Federation<'a> {
    config: FederationConfig,
    train: &'a Dataset,
    test: &'a Dataset,
    partitions: &'a [ClientPartition],
    initial: Model,
    global: Model,
    round: usize,
    cumulative_time: f64,
    cumulative_wall: f64,
    pool: rayon::ThreadPool,
}

impl<'a> Federation<'a> {
    /// Validates the setup and pretrains the global model on `source`
    /// (skipped when `pretrain_epochs` is 0 or no source is given).
    pub fn new(
        config: FederationConfig,
        source: Option<&Dataset>,
        train: &'a Dataset,
        test: &'a Dataset,
        partitions: &'a [ClientPartition],
    ) -> Result<Self> {
        config.validate()?;
        if partitions.len() != config.num_clients {
            return Err(FedError::Config(format!(
                "{} partitions for {} clients",
                partitions.len(),
                config.num_clients
            )));
        }
        for (k, p) in partitions.iter().enumerate() {
            if p.client_id != k {
                return Err(FedError::Config(format!(
                    "partition {k} has client id {}",
                    p.client_id
                )));
            }
            if p.is_empty() {
                return Err(FedError::Config(format!("client {k} has no data")));
            }
            if p.sample_indices.iter().any(|&i| i >= train.len()) {
                return Err(FedError::Config(format!(
                    "client {k} indexes past the dataset"
                )));
            }
        }
        if test.feature_dim() != train.feature_dim() || test.num_classes() != train.num_classes() {
            return Err(FedError::Config(
                "train and test datasets disagree in shape".into(),
            ));
        }
        let model = config.build_model(train.feature_dim(), train.num_classes())?;
        let initial = match source {
            Some(src) if config.pretrain_epochs > 0 => {
                if src.feature_dim() != train.feature_dim()
                    || src.num_classes() != train.num_classes()
                {
                    return Err(FedError::Config(
                        "source and target datasets disagree in shape".into(),
                    ));
                }
                let seed = derive_seed(config.master_seed, Stream::Pretrain, &[]);
                let mut trained =
                    pretrain(&model, src, config.pretrain_epochs, (&config).into(), seed)?.0;
                if config.fresh_classifier {
                    replace_classifier(&mut trained, &model);
                }
                trained
            }
            _ => model,
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| FedError::Config(format!("thread pool: {e}")))?;
        Ok(Self {
            config,
            train,
            test,
            partitions,
            global: initial.clone(),
            initial,
            round: 0,
            cumulative_time: 0.0,
            cumulative_wall: 0.0,
            pool,
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    /// The global model after pretraining, before any round.
    pub fn initial_model(&self) -> &Model {
        &self.initial
    }

    pub fn global_model(&self) -> &Model {
        &self.global
    }

    pub fn rounds_completed(&self) -> usize {
        self.round
    }

    /// The global model with a client's uploaded parameters in place.
    pub fn client_model(&self, update: &ClientUpdate) -> Result<Model> {
        let mut m = self.global.clone();
        m.set_theta(&update.theta)?;
        Ok(m)
    }

    fn select(&self, round: usize, client: &ClientPartition) -> Result<SelectionResult> {
        let p_ds = self.config.effective_p_ds();
        let round_seed = derive_seed(self.config.master_seed, Stream::Selection, &[round as u64]);
        match self.config.strategy {
            // selecting everything needs no scores
            Strategy::FedftEds if p_ds < 1.0 => {
                select_by_entropy(&self.global, self.train, client, p_ds, self.config.rho)
            }
            Strategy::FedftAll | Strategy::FedftEds => Ok(select_all(client)),
            Strategy::Fedavg | Strategy::Fedprox | Strategy::FedftRds => {
                if p_ds < 1.0 {
                    select_random(client, p_ds, round_seed)
                } else {
                    Ok(select_all(client))
                }
            }
        }
    }

    fn client_round(
        &self,
        round: usize,
        client_id: usize,
    ) -> Result<(ClientUpdate, SelectionResult)> {
        let client = &self.partitions[client_id];
        let started = Instant::now();
        let selection = self.select(round, client)?;
        let seeds = UpdateSeeds {
            master_seed: self.config.master_seed,
            round,
            client_id,
        };
        let epochs = self.config.local_epochs;
        let settings = TrainSettings::from(&self.config);
        let selected = &selection.selected_indices;
        let (model, _) = match self.config.strategy {
            Strategy::Fedprox => fedprox_local_update(
                &self.global,
                self.train,
                selected,
                epochs,
                settings,
                seeds,
                self.config.prox_mu,
            )?,
            _ => client_local_update(&self.global, self.train, selected, epochs, settings, seeds)?,
        };
        let wall_seconds = started.elapsed().as_secs_f64();

        let scoring = if selection.scores.is_empty() {
            0
        } else {
            client.len() as u64
        };
        let per_sample = self.global.forward_flops() + self.global.backward_flops();
        let ops =
            scoring * self.global.forward_flops() + (epochs * selected.len()) as u64 * per_sample;
        let modeled_seconds = ops as f64 / self.config.device_flops;

        let update = ClientUpdate {
            client_id,
            theta: model.theta(),
            selected_count: selected.len(),
            train_time_seconds: match self.config.clock {
                Clock::Modeled => modeled_seconds,
                Clock::Measured => wall_seconds,
            },
            wall_seconds,
        };
        Ok((update, selection))
    }

    /// Runs the next round and installs the aggregated parameters.
    pub fn run_round(&mut self) -> Result<RoundOutcome> {
        let round = self.round + 1;
        let seed = derive_seed(
            self.config.master_seed,
            Stream::Participants,
            &[round as u64],
        );
        let participants = sample_participants(
            self.config.num_clients,
            self.config.participation_fraction,
            seed,
        )
        .map_err(|e| e.in_round(round))?;

        let this = &*self;
        let results: Vec<Result<(ClientUpdate, SelectionResult)>> = self.pool.install(|| {
            participants
                .par_iter()
                .map(|&k| {
                    this.client_round(round, k)
                        .map_err(|e| e.in_client(round, k))
                })
                .collect()
        });
        let mut updates = Vec::with_capacity(results.len());
        let mut selections = Vec::with_capacity(results.len());
        for r in results {
            let (u, s) = r?;
            selections.push((u.client_id, s));
            updates.push(u);
        }

        let theta = aggregate(&updates).map_err(|e| e.in_round(round))?;
        self.global
            .set_theta(&theta)
            .map_err(|e| e.in_round(round))?;
        let (accuracy, loss) = evaluate(&self.global, self.test).map_err(|e| e.in_round(round))?;

        for u in &updates {
            self.cumulative_time += u.train_time_seconds;
            self.cumulative_wall += u.wall_seconds;
        }
        self.round = round;
        let bytes = (participants.len() * 2 * self.global.theta_len() * 8) as u64;
        let report = RoundReport {
            round,
            selected_counts: updates.iter().map(|u| u.selected_count).collect(),
            participating_clients: participants,
            global_test_accuracy: accuracy,
            global_test_loss: loss,
            cumulative_client_train_time: self.cumulative_time,
            cumulative_wall_time: self.cumulative_wall,
            bytes_exchanged: bytes,
        };
        log::debug!(
            "round {round}: acc {:.4} loss {:.4} selected {}",
            accuracy,
            loss,
            report.total_selected()
        );
        Ok(RoundOutcome {
            report,
            updates,
            selections,
        })
    }
}

/// Result of a complete run.
#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub reports: Vec<RoundReport>,
    pub pretrained: Model,
    pub final_model: Model,
}

/// Pretrains, then runs `config.rounds` rounds.
pub fn run_federation(
    config: &FederationConfig,
    source: Option<&Dataset>,
    train: &Dataset,
    test: &Dataset,
    partitions: &[ClientPartition],
) -> Result<FederationOutcome> {
    let mut fed = Federation::new(config.clone(), source, train, test, partitions)?;
    let mut reports = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        reports.push(fed.run_round()?.report);
    }
    Ok(FederationOutcome {
        reports,
        pretrained: fed.initial.clone(),
        final_model: fed.global,
    })
}

/// Writes the per-round CSV:
/// `round,strategy,participants,test_acc,test_loss,cum_client_time_s,total_selected`.
pub fn write_reports_csv<W: std::io::Write>(
    mut out: W,
    strategy: Strategy,
    reports: &[RoundReport],
) -> std::io::Result<()> {
    writeln!(
        out,
        "round,strategy,participants,test_acc,test_loss,cum_client_time_s,total_selected"
    )?;
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.round,
            strategy,
            r.participating_clients.len(),
            r.global_test_accuracy,
            r.global_test_loss,
            r.cumulative_client_train_time,
            r.total_selected()
        )?;
    }
    Ok(())
}

/// Writes `round,client_id,sample_index,entropy,selected` rows. The entropy
/// column is empty when the strategy did not score samples.
pub fn write_selection_csv<W: std::io::Write>(
    mut out: W,
    rounds: &[(usize, Vec<(usize, SelectionResult)>)],
    partitions: &[ClientPartition],
) -> std::io::Result<()> {
    writeln!(out, "round,client_id,sample_index,entropy,selected")?;
    for (round, selections) in rounds {
        for (client_id, sel) in selections {
            let chosen: std::collections::HashSet<usize> =
                sel.selected_indices.iter().copied().collect();
            if sel.scores.is_empty() {
                for &i in &partitions[*client_id].sample_indices {
                    writeln!(
                        out,
                        "{round},{client_id},{i},,{}",
                        u8::from(chosen.contains(&i))
                    )?;
                }
            } else {
                for s in &sel.scores {
                    writeln!(
                        out,
                        "{round},{client_id},{},{},{}",
                        s.sample_index,
                        s.entropy,
                        u8::from(chosen.contains(&s.sample_index))
                    )?;
                }
            }
        }
    }
    Ok(())
}
