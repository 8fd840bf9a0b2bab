//! Dataset construction (negative sampling, train/test split) and the three
//! training procedures: standard supervised training of the main task,
//! alternate training of both tasks, and auxiliary pre-training followed by
//! main-task fine-tuning.

use std::fmt::Write as _;
use std::sync::Arc;

use log::warn;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{Ad, AdInstance, KeywordSet, Query, SfInstance, UserRepr};
use crate::error::{Error, Result};
use crate::network::{
    accumulate_gradients, forward, loss, ForwardTrace, Gradients, Model, ParamOptimizer, Target,
    Task,
};
use crate::numeric::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Auxiliary:main task selection proportion is `k:1`.
    pub k: f64,
    pub max_epochs_aux: usize,
    pub max_epochs_main: usize,
    pub sf_neg_ratio: usize,
    pub ad_neg_ratio: usize,
    pub split_ratio: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 256,
            learning_rate: 0.03,
            k: 4.0,
            max_epochs_aux: 6,
            max_epochs_main: 15,
            sf_neg_ratio: 2,
            ad_neg_ratio: 6,
            split_ratio: 0.9,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_owned()));
        if self.batch_size == 0 {
            return bad("training.batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("training.learning_rate must be finite and non-negative");
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return bad("training.k must be positive");
        }
        if self.sf_neg_ratio == 0 || self.ad_neg_ratio == 0 {
            return bad("negative sampling ratios must be at least 1");
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad("training.split_ratio must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn aux_probability(&self) -> f64 {
        self.k / (self.k + 1.0)
    }
}

/// SF candidates shown for one `(user, query)`, with click flags.
#[derive(Debug, Clone)]
pub struct SfImpression {
    pub user: Arc<UserRepr>,
    pub query: Arc<Query>,
    pub shown: Vec<KeywordSet>,
    pub clicked: Vec<bool>,
}

/// Ads shown in one search session, in display order.
#[derive(Debug, Clone)]
pub struct AdSession {
    pub user: Arc<UserRepr>,
    pub query: Arc<Query>,
    pub ads: Vec<Arc<Ad>>,
    pub clicked: Vec<bool>,
}

/// Positives are the clicked SFs; up to `ratio` negatives per positive are
/// drawn without replacement from the same impression's un-clicked SFs.
pub fn sample_negatives_sf(
    impressions: &[SfImpression],
    ratio: usize,
    rng: &mut impl Rng,
) -> Vec<SfInstance> {
    let mut out = Vec::new();
    let (mut short, mut missing) = (0usize, 0usize);
    for imp in impressions {
        let positives: Vec<&KeywordSet> = imp
            .shown
            .iter()
            .zip(&imp.clicked)
            .filter_map(|(s, &c)| c.then_some(s))
            .collect();
        if positives.is_empty() {
            continue;
        }
        let mut pool: Vec<&KeywordSet> = Vec::new();
        for (s, &c) in imp.shown.iter().zip(&imp.clicked) {
            if !c && !positives.contains(&s) && !pool.contains(&s) {
                pool.push(s);
            }
        }
        let wanted = ratio * positives.len();
        if pool.len() < wanted {
            short += 1;
            missing += wanted - pool.len();
            log::debug!(
                "user {}: only {} un-clicked SFs for {} negatives",
                imp.user.user_id,
                pool.len(),
                wanted
            );
        }
        for p in &positives {
            out.push(SfInstance {
                user: imp.user.clone(),
                query: imp.query.clone(),
                sf: (*p).clone(),
                label: true,
            });
        }
        for i in sample(rng, pool.len(), wanted.min(pool.len())) {
            out.push(SfInstance {
                user: imp.user.clone(),
                query: imp.query.clone(),
                sf: pool[i].clone(),
                label: false,
            });
        }
    }
    if short > 0 {
        warn!("{short} impressions had too few un-clicked SFs; {missing} negatives fewer than the 1:{ratio} ratio");
    }
    out
}

/// Positives are the clicked ads; negatives come only from un-clicked ads shown
/// before the last clicked ad of the session.
pub fn sample_negatives_ad(
    sessions: &[AdSession],
    ratio: usize,
    rng: &mut impl Rng,
) -> Vec<AdInstance> {
    let mut out = Vec::new();
    for s in sessions {
        let Some(last) = s.clicked.iter().rposition(|&c| c) else {
            continue;
        };
        let n_pos = s.clicked.iter().filter(|&&c| c).count();
        let eligible: Vec<usize> = (0..last).filter(|&i| !s.clicked[i]).collect();
        let wanted = ratio * n_pos;
        if eligible.len() < wanted {
            log::debug!(
                "session of user {}: {} eligible negatives for {} wanted",
                s.user.user_id,
                eligible.len(),
                wanted
            );
        }
        for (ad, _) in s.ads.iter().zip(&s.clicked).filter(|(_, &c)| c) {
            out.push(AdInstance {
                user: s.user.clone(),
                query: s.query.clone(),
                ad: ad.clone(),
                label: true,
            });
        }
        for i in sample(rng, eligible.len(), wanted.min(eligible.len())) {
            out.push(AdInstance {
                user: s.user.clone(),
                query: s.query.clone(),
                ad: s.ads[eligible[i]].clone(),
                label: false,
            });
        }
    }
    out
}

/// Random disjoint split with `round(ratio·n)` training instances.
pub fn split_train_test<T: Clone>(data: &[T], ratio: f64, rng: &mut impl Rng) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    let n_train = ((data.len() as f64) * ratio).round() as usize;
    let train = idx[..n_train].iter().map(|&i| data[i].clone()).collect();
    let test = idx[n_train..].iter().map(|&i| data[i].clone()).collect();
    (train, test)
}

/// A labeled instance for one of the two tasks.
pub trait TaskInstance {
    const TASK: Task;
    fn forward(&self, model: &Model) -> Result<ForwardTrace>;
    fn label(&self) -> bool;
    fn user_id(&self) -> u32;
}

impl TaskInstance for SfInstance {
    const TASK: Task = Task::Main;

    fn forward(&self, model: &Model) -> Result<ForwardTrace> {
        forward(model, Task::Main, &self.user, &self.query, Target::Phrase(&self.sf))
    }

    fn label(&self) -> bool {
        self.label
    }

    fn user_id(&self) -> u32 {
        self.user.user_id
    }
}

impl TaskInstance for AdInstance {
    const TASK: Task = Task::Aux;

    fn forward(&self, model: &Model) -> Result<ForwardTrace> {
        forward(
            model,
            Task::Aux,
            &self.user,
            &self.query,
            Target::Title(&self.ad.title_keywords),
        )
    }

    fn label(&self) -> bool {
        self.label
    }

    fn user_id(&self) -> u32 {
        self.user.user_id
    }
}

/// Predicted probabilities for a set of instances.
pub fn predict<T: TaskInstance>(model: &Model, data: &[T]) -> Result<Vec<f64>> {
    data.iter().map(|x| Ok(x.forward(model)?.probability)).collect()
}

/// Shuffled mini-batches over `0..len`, reshuffled whenever an epoch ends.
#[derive(Debug, Clone)]
pub struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    epochs_completed: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(len: usize, batch_size: usize, mut rng: ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        BatchStream {
            order,
            pos: 0,
            batch_size,
            epochs_completed: 0,
            rng,
        }
    }

    /// The next batch of indices and whether it completed an epoch.
    pub fn next_batch(&mut self) -> (Vec<usize>, bool) {
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        if self.pos >= self.order.len() {
            self.epochs_completed += 1;
            self.pos = 0;
            self.order.shuffle(&mut self.rng);
            (batch, true)
        } else {
            (batch, false)
        }
    }

    pub fn epochs_completed(&self) -> usize {
        self.epochs_completed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub task: Task,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochLoss>,
    pub main_batches: usize,
    pub aux_batches: usize,
    pub main_epochs: usize,
    pub aux_epochs: usize,
}

impl TrainHistory {
    /// `epoch,task,mean_loss` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,task,mean_loss\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{}", e.epoch, e.task.as_str(), e.mean_loss);
        }
        s
    }

    pub fn losses(&self, task: Task) -> Vec<f64> {
        self.epochs
            .iter()
            .filter(|e| e.task == task)
            .map(|e| e.mean_loss)
            .collect()
    }
}

/// Per-task state: batch order, reusable gradient buffers and the running
/// epoch loss (mean of batch means).
struct TaskRunner {
    stream: BatchStream,
    grads: Gradients,
    loss_sum: f64,
    loss_batches: usize,
}

impl TaskRunner {
    fn new(model: &Model, task: Task, len: usize, config: &TrainingConfig, stream_label: &str) -> Result<Self> {
        Ok(TaskRunner {
            stream: BatchStream::new(len, config.batch_size, substream(config.seed, stream_label)),
            grads: Gradients::zeros(model, task)?,
            loss_sum: 0.0,
            loss_batches: 0,
        })
    }

    /// One mini-batch update of Θ_task; returns the batch loss and, when the
    /// batch closed an epoch, that epoch's mean loss.
    fn step<T: TaskInstance>(
        &mut self,
        model: &mut Model,
        optimizer: &mut ParamOptimizer,
        data: &[T],
    ) -> Result<(f64, Option<f64>)> {
        let (batch, epoch_done) = self.stream.next_batch();
        self.grads.clear();
        let weight = 1.0 / batch.len() as f64;
        let mut probs = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for &i in &batch {
            let item = &data[i];
            let trace = item.forward(model)?;
            accumulate_gradients(model, &trace, item.label(), weight, &mut self.grads)?;
            probs.push(trace.probability);
            labels.push(item.label());
        }
        optimizer.apply(&mut model.params, &self.grads)?;
        let batch_loss = loss(&probs, &labels)?;
        self.loss_sum += batch_loss;
        self.loss_batches += 1;
        let epoch_loss = epoch_done.then(|| {
            let mean = self.loss_sum / self.loss_batches as f64;
            self.loss_sum = 0.0;
            self.loss_batches = 0;
            mean
        });
        Ok((batch_loss, epoch_loss))
    }
}

fn record(history: &mut TrainHistory, task: Task, epoch: usize, mean_loss: f64) {
    history.epochs.push(EpochLoss {
        epoch,
        task,
        mean_loss,
    });
}

/// Trains `T::TASK` alone for `epochs` epochs with a fresh optimizer.
fn train_single_task<T: TaskInstance>(
    model: &mut Model,
    data: &[T],
    epochs: usize,
    config: &TrainingConfig,
    stream_label: &str,
    history: &mut TrainHistory,
) -> Result<()> {
    let mut optimizer = ParamOptimizer::new(&model.params, config.learning_rate);
    let mut runner = TaskRunner::new(model, T::TASK, data.len(), config, stream_label)?;
    while runner.stream.epochs_completed() < epochs {
        let (_, epoch_loss) = runner.step(model, &mut optimizer, data)?;
        match T::TASK {
            Task::Main => history.main_batches += 1,
            Task::Aux => history.aux_batches += 1,
        }
        if let Some(l) = epoch_loss {
            record(history, T::TASK, runner.stream.epochs_completed(), l);
        }
    }
    match T::TASK {
        Task::Main => history.main_epochs = runner.stream.epochs_completed(),
        Task::Aux => history.aux_epochs = runner.stream.epochs_completed(),
    }
    Ok(())
}

/// Standard supervised training of the main task on SF data.
pub fn train_basic(model: &mut Model, sf_train: &[SfInstance], config: &TrainingConfig) -> Result<TrainHistory> {
    config.validate()?;
    if sf_train.is_empty() {
        return Err(Error::EmptyInput("SF training set"));
    }
    let mut history = TrainHistory::default();
    train_single_task(model, sf_train, config.max_epochs_main, config, "train.main.shuffle", &mut history)?;
    Ok(history)
}

/// What one alternate-training iteration did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub task: Task,
    pub batch_loss: f64,
    pub epoch_completed: bool,
}

/// Alternate training, one iteration per [`AlternateTrainer::step`].
///
/// Each iteration picks the auxiliary task with probability `k/(k+1)`, takes
/// the next mini-batch of that task's stream and updates only that task's
/// parameters. Training ends as soon as either task completes its epoch cap.
pub struct AlternateTrainer<'d> {
    sf: &'d [SfInstance],
    ad: &'d [AdInstance],
    config: TrainingConfig,
    optimizer: ParamOptimizer,
    main: TaskRunner,
    aux: TaskRunner,
    task_rng: ChaCha8Rng,
    history: TrainHistory,
}

impl<'d> AlternateTrainer<'d> {
    pub fn new(
        model: &Model,
        sf: &'d [SfInstance],
        ad: &'d [AdInstance],
        config: &TrainingConfig,
    ) -> Result<Self> {
        config.validate()?;
        model.check_task(Task::Aux)?;
        if sf.is_empty() {
            return Err(Error::EmptyInput("SF training set"));
        }
        if ad.is_empty() {
            return Err(Error::EmptyInput("AD training set"));
        }
        Ok(AlternateTrainer {
            sf,
            ad,
            config: config.clone(),
            optimizer: ParamOptimizer::new(&model.params, config.learning_rate),
            main: TaskRunner::new(model, Task::Main, sf.len(), config, "alternate.main.shuffle")?,
            aux: TaskRunner::new(model, Task::Aux, ad.len(), config, "alternate.aux.shuffle")?,
            task_rng: substream(config.seed, "alternate.task_choice"),
            history: TrainHistory::default(),
        })
    }

    pub fn finished(&self) -> bool {
        self.aux.stream.epochs_completed() >= self.config.max_epochs_aux
            || self.main.stream.epochs_completed() >= self.config.max_epochs_main
    }

    /// Runs one iteration, or returns `None` once a cap has been reached.
    pub fn step(&mut self, model: &mut Model) -> Result<Option<StepInfo>> {
        if self.finished() {
            return Ok(None);
        }
        let task = if self.task_rng.gen::<f64>() < self.config.aux_probability() {
            Task::Aux
        } else {
            Task::Main
        };
        let (batch_loss, epoch_loss) = match task {
            Task::Aux => {
                self.history.aux_batches += 1;
                self.aux.step(model, &mut self.optimizer, self.ad)?
            }
            Task::Main => {
                self.history.main_batches += 1;
                self.main.step(model, &mut self.optimizer, self.sf)?
            }
        };
        self.history.main_epochs = self.main.stream.epochs_completed();
        self.history.aux_epochs = self.aux.stream.epochs_completed();
        if let Some(l) = epoch_loss {
            let epoch = match task {
                Task::Aux => self.history.aux_epochs,
                Task::Main => self.history.main_epochs,
            };
            record(&mut self.history, task, epoch, l);
        }
        Ok(Some(StepInfo {
            task,
            batch_loss,
            epoch_completed: epoch_loss.is_some(),
        }))
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn into_history(self) -> TrainHistory {
        self.history
    }
}

/// Alternate training to completion.
pub fn train_alternate(
    model: &mut Model,
    sf_train: &[SfInstance],
    ad_train: &[AdInstance],
    config: &TrainingConfig,
) -> Result<TrainHistory> {
    let mut trainer = AlternateTrainer::new(model, sf_train, ad_train, config)?;
    while trainer.step(model)?.is_some() {}
    Ok(trainer.into_history())
}

/// Stream-label prefix for the re-initialized main-task model.
pub const PRETRAIN_SALT: &str = "pretrain.";

/// A fresh model whose shared tensors (embeddings, FC layers) are copied from
/// `trained`; the output layers and attention module are newly initialized.
pub fn transfer_shared(trained: &Model, seed: u64) -> Result<Model> {
    let mut fresh = Model::init_salted(
        trained.variant.clone(),
        trained.dims.clone(),
        trained.n_keywords(),
        seed,
        PRETRAIN_SALT,
    )?;
    fresh.params.keyword_embeddings = trained.params.keyword_embeddings.clone();
    fresh.params.feature_embeddings = trained.params.feature_embeddings.clone();
    fresh.params.fc1 = trained.params.fc1.clone();
    fresh.params.fc2 = trained.params.fc2.clone();
    Ok(fresh)
}

/// Pre-training: the auxiliary task for `max_epochs_aux` epochs, then the
/// shared tensors seed a fresh model trained on the main task for
/// `max_epochs_main` epochs. `model` is replaced by the fine-tuned model.
pub fn train_pretrain(
    model: &mut Model,
    sf_train: &[SfInstance],
    ad_train: &[AdInstance],
    config: &TrainingConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    model.check_task(Task::Aux)?;
    if sf_train.is_empty() {
        return Err(Error::EmptyInput("SF training set"));
    }
    if ad_train.is_empty() {
        return Err(Error::EmptyInput("AD training set"));
    }
    let mut history = TrainHistory::default();
    train_single_task(model, ad_train, config.max_epochs_aux, config, "pretrain.aux.shuffle", &mut history)?;
    let mut fine_tuned = transfer_shared(model, config.seed)?;
    train_single_task(
        &mut fine_tuned,
        sf_train,
        config.max_epochs_main,
        config,
        "pretrain.main.shuffle",
        &mut history,
    )?;
    *model = fine_tuned;
    Ok(history)
}
