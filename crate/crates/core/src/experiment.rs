//! Train/test preparation and strategy dispatch shared by the CLI commands and
//! the end-to-end tests.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data_model::{AdInstance, FeatureSchema, SfInstance};
use crate::error::{Error, Result};
use crate::evaluation::{auc, click_counts, AblationRow};
use crate::network::{Model, ModelDims, ModelVariant};
use crate::numeric::substream;
use crate::training::{
    predict, split_train_test, train_alternate, train_basic, train_pretrain, TrainHistory,
    TrainingConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Basic,
    Alternate,
    Pretrain,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Basic => "basic",
            Strategy::Alternate => "alternate",
            Strategy::Pretrain => "pretrain",
        }
    }

    /// Rejects strategy/variant pairs that cannot train.
    pub fn check_variant(self, variant: &ModelVariant) -> Result<()> {
        match (self, variant) {
            (Strategy::Basic, ModelVariant::MultiTask) => Err(Error::InvalidConfig(
                "strategy basic trains the main task only; use variant basic or augmented".into(),
            )),
            (Strategy::Alternate | Strategy::Pretrain, ModelVariant::Basic) => Err(Error::InvalidConfig(format!(
                "strategy {} needs the auxiliary head; use variant multitask or augmented",
                self.as_str()
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Strategy::Basic),
            "alternate" => Ok(Strategy::Alternate),
            "pretrain" => Ok(Strategy::Pretrain),
            other => Err(Error::InvalidConfig(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Split datasets ready for training and evaluation.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub sf_train: Vec<SfInstance>,
    pub sf_test: Vec<SfInstance>,
    pub ad_train: Vec<AdInstance>,
    pub ad_test: Vec<AdInstance>,
    pub n_keywords: usize,
}

impl ExperimentData {
    /// Splits both datasets with `config.split_ratio`; afterwards keeps only
    /// `main_fraction` of the SF training split (the test split is untouched).
    pub fn split(
        sf: &[SfInstance],
        ad: &[AdInstance],
        n_keywords: usize,
        config: &TrainingConfig,
        main_fraction: f64,
    ) -> Result<Self> {
        if !(main_fraction > 0.0 && main_fraction <= 1.0) {
            return Err(Error::InvalidConfig("main_fraction must lie in (0, 1]".into()));
        }
        if sf.is_empty() {
            return Err(Error::EmptyInput("SF dataset"));
        }
        let seed = config.seed;
        let (mut sf_train, sf_test) = split_train_test(sf, config.split_ratio, &mut substream(seed, "split.sf"));
        let (ad_train, ad_test) = split_train_test(ad, config.split_ratio, &mut substream(seed, "split.ad"));
        if main_fraction < 1.0 {
            sf_train.shuffle(&mut substream(seed, "subsample.sf"));
            let keep = ((sf_train.len() as f64) * main_fraction).round().max(1.0) as usize;
            sf_train.truncate(keep);
        }
        Ok(ExperimentData {
            sf_train,
            sf_test,
            ad_train,
            ad_test,
            n_keywords,
        })
    }

    pub fn main_click_counts(&self) -> BTreeMap<u32, usize> {
        click_counts(self.sf_train.iter().map(|x| (x.user.user_id, x.label)))
    }

    pub fn aux_click_counts(&self) -> BTreeMap<u32, usize> {
        click_counts(self.ad_train.iter().map(|x| (x.user.user_id, x.label)))
    }
}

/// Initializes `variant` with `config.seed` and trains it with `strategy`.
pub fn train_model(
    strategy: Strategy,
    variant: ModelVariant,
    dims: &ModelDims,
    data: &ExperimentData,
    config: &TrainingConfig,
) -> Result<(Model, TrainHistory)> {
    strategy.check_variant(&variant)?;
    let mut model = Model::init(variant, dims.clone(), data.n_keywords, config.seed)?;
    let history = match strategy {
        Strategy::Basic => train_basic(&mut model, &data.sf_train, config)?,
        Strategy::Alternate => train_alternate(&mut model, &data.sf_train, &data.ad_train, config)?,
        Strategy::Pretrain => train_pretrain(&mut model, &data.sf_train, &data.ad_train, config)?,
    };
    Ok((model, history))
}

/// Held-out main-task AUC.
pub fn sf_auc(model: &Model, test: &[SfInstance]) -> Result<f64> {
    let scores = predict(model, test)?;
    let labels: Vec<bool> = test.iter().map(|x| x.label).collect();
    auc(&scores, &labels)
}

/// Held-out auxiliary-task AUC.
pub fn ad_auc(model: &Model, test: &[AdInstance]) -> Result<f64> {
    let scores = predict(model, test)?;
    let labels: Vec<bool> = test.iter().map(|x| x.label).collect();
    auc(&scores, &labels)
}

/// Trains one alternate-trained augmented model per feature-group subset, all
/// from the same seed and data, and reports each AUC against the baseline that
/// uses no additional features (which equals the multi-task model). The
/// baseline row comes first.
pub fn ablation_run(
    schema: &FeatureSchema,
    subsets: &[Vec<String>],
    dims: &ModelDims,
    data: &ExperimentData,
    config: &TrainingConfig,
) -> Result<Vec<AblationRow>> {
    let restricted = subsets
        .iter()
        .map(|names| schema.restrict(names))
        .collect::<Result<Vec<_>>>()?;
    let run = |schema: FeatureSchema| -> Result<f64> {
        let (model, _) = train_model(Strategy::Alternate, ModelVariant::Augmented { schema }, dims, data, config)?;
        sf_auc(&model, &data.sf_test)
    };
    let baseline = run(FeatureSchema::empty())?;
    let mut rows = vec![AblationRow {
        groups: Vec::new(),
        auc: baseline,
        gain: 0.0,
    }];
    for (names, sub) in subsets.iter().zip(restricted) {
        let value = run(sub)?;
        rows.push(AblationRow {
            groups: names.clone(),
            auc: value,
            gain: value - baseline,
        });
    }
    Ok(rows)
}
