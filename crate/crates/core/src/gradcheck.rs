//! Analytic-versus-numeric gradient comparison on random toy models.
//!
//! Each configuration draws a small model (every dimension ≤ 4), a batch of at
//! most three instances, and compares [`backward`] with central differences of
//! the batch loss over every parameter coordinate. Configurations whose ReLU
//! pre-activations sit within `KINK_MARGIN` of zero are redrawn: the loss is not
//! differentiable there and a finite difference straddling the kink is
//! meaningless.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data_model::{
    encode_feature_groups, Entity, FeatureSchema, FeatureValue, FieldDef, FieldKind, GroupDef,
    KeywordSet, Query, RawFeatures, UserRepr,
};
use crate::error::Result;
use crate::network::{
    backward, forward, loss, Model, ModelDims, ModelVariant, Target, Task, PROBABILITY_CLAMP,
};
use crate::numeric::{finite_difference_gradient, relative_error, sigmoid, substream};

pub const GRADCHECK_EPS: f64 = 1e-4;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Basic,
    MultiTask,
    Augmented,
}

impl VariantKind {
    pub const ALL: [VariantKind; 3] = [VariantKind::Basic, VariantKind::MultiTask, VariantKind::Augmented];

    pub fn tasks(self) -> &'static [Task] {
        match self {
            VariantKind::Basic => &[Task::Main],
            _ => &[Task::Main, Task::Aux],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::Basic => "basic",
            VariantKind::MultiTask => "multitask",
            VariantKind::Augmented => "augmented",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub variant: VariantKind,
    pub task: Task,
    pub seed: u64,
    pub max_relative_error: f64,
    pub coordinates: usize,
}

enum ToyBatch {
    Main(Vec<(UserRepr, Query, KeywordSet, bool)>),
    Aux(Vec<(UserRepr, Query, Vec<u32>, bool)>),
}

fn toy_schema() -> FeatureSchema {
    let field = |name: &str, cardinality, kind| FieldDef {
        name: name.into(),
        cardinality,
        kind,
    };
    FeatureSchema::new(vec![
        GroupDef {
            name: "profile".into(),
            entity: Entity::User,
            fields: vec![
                field("gender", 2, FieldKind::Categorical),
                field("level", 2, FieldKind::Categorical),
            ],
        },
        GroupDef {
            name: "category".into(),
            entity: Entity::Query,
            fields: vec![field("category", 4, FieldKind::BagOfWords)],
        },
    ])
    .expect("static schema")
}

fn random_ids(rng: &mut ChaCha8Rng, n_keywords: u32, max_len: usize) -> Vec<u32> {
    let len = rng.gen_range(1..=max_len);
    (0..len).map(|_| rng.gen_range(0..n_keywords)).collect()
}

fn random_user(rng: &mut ChaCha8Rng, n_keywords: u32, schema: Option<&FeatureSchema>) -> UserRepr {
    let mut user = UserRepr {
        user_id: 0,
        long_term_keywords: random_ids(rng, n_keywords, 3),
        short_term_keywords: random_ids(rng, n_keywords, 2),
        feature_groups: Default::default(),
    };
    if let Some(schema) = schema {
        let mut raw = RawFeatures::new();
        let mut fields = BTreeMap::new();
        fields.insert("gender".to_string(), FeatureValue::One(rng.gen_range(0..2)));
        if rng.gen_bool(0.7) {
            fields.insert("level".to_string(), FeatureValue::One(rng.gen_range(0..2)));
        }
        raw.insert("profile".into(), fields);
        user.feature_groups = encode_feature_groups(&raw, schema).expect("toy features");
    }
    user
}

fn random_query(rng: &mut ChaCha8Rng, n_keywords: u32, schema: Option<&FeatureSchema>) -> Query {
    let mut q = Query {
        keywords: KeywordSet::new(random_ids(rng, n_keywords, 2)),
        feature_groups: Default::default(),
    };
    if let Some(schema) = schema {
        // sometimes leave the group empty to exercise the zero-vector pool
        if rng.gen_bool(0.8) {
            let cats: Vec<u32> = (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(0..4)).collect();
            let mut raw = RawFeatures::new();
            raw.insert(
                "category".into(),
                [("category".to_string(), FeatureValue::Many(cats))].into(),
            );
            q.feature_groups = encode_feature_groups(&raw, schema).expect("toy features");
        }
    }
    q
}

fn toy_model(variant: VariantKind, rng: &mut ChaCha8Rng, seed: u64) -> Result<(Model, u32)> {
    let n_keywords = rng.gen_range(3..=6);
    let dims = ModelDims {
        keyword_dim: rng.gen_range(2..=4),
        feature_dim: rng.gen_range(2..=4),
        hidden1: rng.gen_range(2..=4),
        hidden2: rng.gen_range(2..=4),
        uniform_scale: 1.5,
        embedding_std: 0.8,
    };
    let v = match variant {
        VariantKind::Basic => ModelVariant::Basic,
        VariantKind::MultiTask => ModelVariant::MultiTask,
        VariantKind::Augmented => ModelVariant::Augmented {
            schema: toy_schema(),
        },
    };
    let mut model = Model::init(v, dims, n_keywords as usize, seed)?;
    // non-zero biases so every bias coordinate carries gradient
    for t in [&mut model.params.fc1, &mut model.params.fc2, &mut model.params.head_main] {
        t.bias.0.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    }
    if let Some(h) = &mut model.params.head_aux {
        h.bias.0.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    }
    Ok((model, n_keywords))
}

fn toy_batch(task: Task, rng: &mut ChaCha8Rng, n_keywords: u32, schema: Option<&FeatureSchema>) -> ToyBatch {
    let n = rng.gen_range(1..=3);
    match task {
        Task::Main => ToyBatch::Main(
            (0..n)
                .map(|_| {
                    (
                        random_user(rng, n_keywords, schema),
                        random_query(rng, n_keywords, schema),
                        KeywordSet::new(random_ids(rng, n_keywords, 2)),
                        rng.gen_bool(0.5),
                    )
                })
                .collect(),
        ),
        Task::Aux => ToyBatch::Aux(
            (0..n)
                .map(|_| {
                    (
                        random_user(rng, n_keywords, schema),
                        random_query(rng, n_keywords, schema),
                        random_ids(rng, n_keywords, 4),
                        rng.gen_bool(0.5),
                    )
                })
                .collect(),
        ),
    }
}

fn batch_traces(model: &Model, batch: &ToyBatch) -> Result<(Vec<crate::network::ForwardTrace>, Vec<bool>)> {
    let mut traces = Vec::new();
    let mut labels = Vec::new();
    match batch {
        ToyBatch::Main(items) => {
            for (u, q, sf, y) in items {
                traces.push(forward(model, Task::Main, u, q, Target::Phrase(sf))?);
                labels.push(*y);
            }
        }
        ToyBatch::Aux(items) => {
            for (u, q, title, y) in items {
                traces.push(forward(model, Task::Aux, u, q, Target::Title(title))?);
                labels.push(*y);
            }
        }
    }
    Ok((traces, labels))
}

fn well_conditioned(traces: &[crate::network::ForwardTrace]) -> bool {
    traces.iter().all(|t| {
        let p = sigmoid(t.logit);
        t.pre1.iter().chain(&t.pre2).all(|v| v.abs() > KINK_MARGIN)
            && p > 10.0 * PROBABILITY_CLAMP
            && p < 1.0 - 10.0 * PROBABILITY_CLAMP
    })
}

/// Runs one random configuration for `(variant, task)` under `seed`.
pub fn check_configuration(variant: VariantKind, task: Task, seed: u64) -> Result<CheckOutcome> {
    let mut rng = substream(seed, &format!("gradcheck.{}.{}", variant.as_str(), task.as_str()));
    let schema = toy_schema();
    let schema_ref = (variant == VariantKind::Augmented).then_some(&schema);
    let (model, batch) = loop {
        let model_seed = rng.gen();
        let (model, n_keywords) = toy_model(variant, &mut rng, model_seed)?;
        let batch = toy_batch(task, &mut rng, n_keywords, schema_ref);
        let (traces, _) = batch_traces(&model, &batch)?;
        if well_conditioned(&traces) {
            break (model, batch);
        }
    };

    let (traces, labels) = batch_traces(&model, &batch)?;
    let analytic: Vec<f64> = backward(&model, task, &traces, &labels)?
        .to_dense(&model.params)
        .into_iter()
        .flatten()
        .collect();

    let base = model.params.flatten();
    let probe = Arc::new(model);
    let numeric = finite_difference_gradient(
        |values| {
            let mut m = (*probe).clone();
            m.params.assign_flat(values).expect("same layout");
            let (t, y) = batch_traces(&m, &batch).expect("toy forward");
            let probs: Vec<f64> = t.iter().map(|t| t.probability).collect();
            loss(&probs, &y).expect("toy loss")
        },
        &base,
        GRADCHECK_EPS,
    );
    let max_relative_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n, RELATIVE_ERROR_FLOOR))
        .fold(0.0, f64::max);
    Ok(CheckOutcome {
        variant,
        task,
        seed,
        max_relative_error,
        coordinates: base.len(),
    })
}

/// `configs` random configurations for every variant and task head.
pub fn run_all(configs: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for variant in VariantKind::ALL {
        for &task in variant.tasks() {
            for i in 0..configs {
                out.push(check_configuration(variant, task, seed.wrapping_add(i as u64))?);
            }
        }
    }
    Ok(out)
}
