//! The computational graph shared by the basic, multi-task and augmented
//! models.
//!
//! ```text
//! user keywords ─┐ avg pool        ┌─ e_u ─┐
//! query keywords ┤ avg pool        ├─ e_q ─┤
//! SF / SP phrase ┤ avg pool (main) ├─ e_t ─┼─ x ─ FC1 ─ ReLU ─ FC2 ─ ReLU ─┬─ head_main ─ σ
//! ad title       ┘ attention (aux) ┘       │                               └─ head_aux  ─ σ
//! feature groups ─ per-group avg pool ─────┘ (augmented only)
//! ```
//!
//! Gradients are derived by hand. Every tensor belongs to the auxiliary set Θ1,
//! the main set Θ2, or both: the embeddings and FC layers are shared, the
//! attention module and `head_aux` belong only to Θ1, `head_main` only to Θ2.

use serde::{Deserialize, Serialize};

use crate::data_model::{FeatureSchema, KeywordId, KeywordSet, Query, UserRepr};
use crate::error::{Error, Result};
use crate::numeric::{
    adagrad_update, dot, init_dense_layer, init_embedding_table, init_uniform_vector, sigmoid,
    substream, Dense, Tensor1, Tensor2, ADAGRAD_STABILIZER, EMBEDDING_INIT_STD,
    UNIFORM_INIT_SCALE,
};

/// Probabilities are clamped to `[δ, 1-δ]` before taking logs.
pub const PROBABILITY_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelVariant {
    Basic,
    MultiTask,
    Augmented { schema: FeatureSchema },
}

impl ModelVariant {
    pub fn has_auxiliary(&self) -> bool {
        !matches!(self, ModelVariant::Basic)
    }

    pub fn schema(&self) -> Option<&FeatureSchema> {
        match self {
            ModelVariant::Augmented { schema } => Some(schema),
            _ => None,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            ModelVariant::Basic => "basic",
            ModelVariant::MultiTask => "multitask",
            ModelVariant::Augmented { .. } => "augmented",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Main,
    Aux,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Main => "main",
            Task::Aux => "aux",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub keyword_dim: usize,
    pub feature_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub uniform_scale: f64,
    pub embedding_std: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            keyword_dim: 50,
            feature_dim: 24,
            hidden1: 256,
            hidden2: 256,
            uniform_scale: UNIFORM_INIT_SCALE,
            embedding_std: EMBEDDING_INIT_STD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub group: String,
    pub table: Tensor2,
}

/// `b_j = zᵀ tanh(W_u e_u + W_q e_q + W_a Em(d_j))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub user: Tensor2,
    pub query: Tensor2,
    pub title: Tensor2,
    pub context: Tensor1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub keyword_embeddings: Tensor2,
    /// One table per feature group, user groups then query groups.
    pub feature_embeddings: Vec<FeatureTable>,
    pub attention: Option<AttentionParams>,
    pub fc1: Dense,
    pub fc2: Dense,
    pub head_main: Dense,
    pub head_aux: Option<Dense>,
}

/// Borrowed view of one parameter tensor.
#[derive(Debug)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

fn dense_views<'a>(prefix: &str, d: &'a Dense, out: &mut Vec<NamedTensor<'a>>) {
    out.push(NamedTensor {
        name: format!("{prefix}.weights"),
        shape: vec![d.weights.rows(), d.weights.cols()],
        data: d.weights.as_slice(),
    });
    out.push(NamedTensor {
        name: format!("{prefix}.bias"),
        shape: vec![d.bias.len()],
        data: d.bias.as_slice(),
    });
}

fn matrix_view<'a>(name: String, t: &'a Tensor2) -> NamedTensor<'a> {
    NamedTensor {
        name,
        shape: vec![t.rows(), t.cols()],
        data: t.as_slice(),
    }
}

impl NetworkParams {
    /// All tensors in a fixed order: embeddings, attention, FC layers, heads.
    pub fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = vec![matrix_view("keyword_embeddings".into(), &self.keyword_embeddings)];
        for f in &self.feature_embeddings {
            out.push(matrix_view(format!("feature_embeddings.{}", f.group), &f.table));
        }
        if let Some(att) = &self.attention {
            out.push(matrix_view("attention.user".into(), &att.user));
            out.push(matrix_view("attention.query".into(), &att.query));
            out.push(matrix_view("attention.title".into(), &att.title));
            out.push(NamedTensor {
                name: "attention.context".into(),
                shape: vec![att.context.len()],
                data: att.context.as_slice(),
            });
        }
        dense_views("fc1", &self.fc1, &mut out);
        dense_views("fc2", &self.fc2, &mut out);
        dense_views("head_main", &self.head_main, &mut out);
        if let Some(h) = &self.head_aux {
            dense_views("head_aux", h, &mut out);
        }
        out
    }

    /// Mutable slices in the same order as [`NetworkParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.keyword_embeddings.as_mut_slice()];
        for f in &mut self.feature_embeddings {
            out.push(f.table.as_mut_slice());
        }
        if let Some(att) = &mut self.attention {
            out.push(att.user.as_mut_slice());
            out.push(att.query.as_mut_slice());
            out.push(att.title.as_mut_slice());
            out.push(att.context.as_mut_slice());
        }
        for d in [&mut self.fc1, &mut self.fc2, &mut self.head_main] {
            out.push(d.weights.as_mut_slice());
            out.push(d.bias.as_mut_slice());
        }
        if let Some(h) = &mut self.head_aux {
            out.push(h.weights.as_mut_slice());
            out.push(h.bias.as_mut_slice());
        }
        out
    }

    /// A structurally identical set of tensors filled with zeros.
    pub fn zeros_like(&self) -> NetworkParams {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        let total: usize = self.tensors().iter().map(|t| t.data.len()).sum();
        if total != values.len() {
            return Err(Error::ShapeMismatch {
                expected: total,
                actual: values.len(),
            });
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Whether the named tensor is updated by `task`.
pub fn tensor_in_task(name: &str, task: Task) -> bool {
    let aux_only = name.starts_with("attention.") || name.starts_with("head_aux.");
    let main_only = name.starts_with("head_main.");
    match task {
        Task::Main => !aux_only,
        Task::Aux => !main_only,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub variant: ModelVariant,
    pub dims: ModelDims,
    pub params: NetworkParams,
}

impl Model {
    pub fn init(variant: ModelVariant, dims: ModelDims, n_keywords: usize, seed: u64) -> Result<Model> {
        Model::init_salted(variant, dims, n_keywords, seed, "")
    }

    /// Like [`Model::init`], but every tensor stream label is prefixed with
    /// `salt`, giving an independent draw of the whole parameter set.
    pub fn init_salted(
        variant: ModelVariant,
        dims: ModelDims,
        n_keywords: usize,
        seed: u64,
        salt: &str,
    ) -> Result<Model> {
        if dims.keyword_dim == 0 || dims.hidden1 == 0 || dims.hidden2 == 0 {
            return Err(Error::ZeroDimension("model dims"));
        }
        let rng = |name: &str| substream(seed, &format!("{salt}{name}"));
        let d = dims.keyword_dim;
        let scale = dims.uniform_scale;

        let keyword_embeddings =
            init_embedding_table(n_keywords, d, dims.embedding_std, &mut rng("keyword_embeddings"))?;

        let mut feature_embeddings = Vec::new();
        if let Some(schema) = variant.schema() {
            schema.validate()?;
            if !schema.is_empty() && dims.feature_dim == 0 {
                return Err(Error::ZeroDimension("feature embeddings"));
            }
            for g in schema.concat_order() {
                let name = format!("feature_embeddings.{}", g.name);
                feature_embeddings.push(FeatureTable {
                    group: g.name.clone(),
                    table: init_embedding_table(
                        g.cardinality() as usize,
                        dims.feature_dim,
                        dims.embedding_std,
                        &mut rng(&name),
                    )?,
                });
            }
        }
        let input_dim = 3 * d + dims.feature_dim * feature_embeddings.len();

        let (attention, head_aux) = if variant.has_auxiliary() {
            let mat = |name: &str| -> Result<Tensor2> {
                Ok(init_dense_layer(d, d, scale, &mut rng(name))?.weights)
            };
            let att = AttentionParams {
                user: mat("attention.user")?,
                query: mat("attention.query")?,
                title: mat("attention.title")?,
                context: init_uniform_vector(d, d, scale, &mut rng("attention.context"))?,
            };
            let head = init_dense_layer(dims.hidden2, 1, scale, &mut rng("head_aux"))?;
            (Some(att), Some(head))
        } else {
            (None, None)
        };

        let params = NetworkParams {
            keyword_embeddings,
            feature_embeddings,
            attention,
            fc1: init_dense_layer(input_dim, dims.hidden1, scale, &mut rng("fc1"))?,
            fc2: init_dense_layer(dims.hidden1, dims.hidden2, scale, &mut rng("fc2"))?,
            head_main: init_dense_layer(dims.hidden2, 1, scale, &mut rng("head_main"))?,
            head_aux,
        };
        Ok(Model {
            variant,
            dims,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.params.fc1.in_dim()
    }

    pub fn n_keywords(&self) -> usize {
        self.params.keyword_embeddings.rows()
    }

    pub fn check_task(&self, task: Task) -> Result<()> {
        if task == Task::Aux && (self.params.attention.is_none() || self.params.head_aux.is_none()) {
            return Err(Error::MissingAuxiliaryHead);
        }
        Ok(())
    }

    fn head(&self, task: Task) -> Result<&Dense> {
        match task {
            Task::Main => Ok(&self.params.head_main),
            Task::Aux => self.params.head_aux.as_ref().ok_or(Error::MissingAuxiliaryHead),
        }
    }
}

/// Arithmetic mean of the rows indexed by `ids`.
pub fn embed_and_pool(ids: &[KeywordId], table: &Tensor2) -> Result<Vec<f64>> {
    if ids.is_empty() {
        return Err(Error::EmptyInput("pooled ids"));
    }
    let mut out = vec![0.0; table.cols()];
    pool_into(ids, table, &mut out)?;
    Ok(out)
}

/// Mean pooling that maps an empty id set to the zero vector.
fn pool_into(ids: &[u32], table: &Tensor2, out: &mut [f64]) -> Result<()> {
    out.fill(0.0);
    for &id in ids {
        if id as usize >= table.rows() {
            return Err(Error::IdOutOfRange {
                id,
                rows: table.rows(),
            });
        }
        for (o, v) in out.iter_mut().zip(table.row(id as usize)) {
            *o += v;
        }
    }
    if !ids.is_empty() {
        let n = ids.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
    }
    Ok(())
}

/// Softmax with max subtraction.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub title: Vec<KeywordId>,
    /// `tanh(...)` activations, one row per title word.
    pub activations: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Attention-pooled title embedding and the per-word weights.
pub fn attention_pool(
    title: &[KeywordId],
    e_u: &[f64],
    e_q: &[f64],
    attention: &AttentionParams,
    embeddings: &Tensor2,
) -> Result<(Vec<f64>, AttentionTrace)> {
    if title.is_empty() {
        return Err(Error::EmptyInput("ad title"));
    }
    let d = embeddings.cols();
    let mut base = attention.user.matvec(e_u);
    let pq = attention.query.matvec(e_q);
    for (b, q) in base.iter_mut().zip(&pq) {
        *b += q;
    }
    let mut activations = Vec::with_capacity(title.len());
    let mut scores = Vec::with_capacity(title.len());
    let mut s = vec![0.0; d];
    for &id in title {
        if id as usize >= embeddings.rows() {
            return Err(Error::IdOutOfRange {
                id,
                rows: embeddings.rows(),
            });
        }
        attention.title.matvec_into(embeddings.row(id as usize), &mut s);
        let g: Vec<f64> = s.iter().zip(&base).map(|(a, b)| (a + b).tanh()).collect();
        scores.push(dot(attention.context.as_slice(), &g));
        activations.push(g);
    }
    let weights = softmax(&scores);
    let mut pooled = vec![0.0; d];
    for (&id, &w) in title.iter().zip(&weights) {
        for (p, v) in pooled.iter_mut().zip(embeddings.row(id as usize)) {
            *p += w * v;
        }
    }
    Ok((
        pooled,
        AttentionTrace {
            title: title.to_vec(),
            activations,
            scores,
            weights,
        },
    ))
}

/// What fills the third channel of the concatenation.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    /// An SF/SP phrase, average pooled (main task).
    Phrase(&'a KeywordSet),
    /// An ad title, attention pooled (auxiliary task).
    Title(&'a [KeywordId]),
}

impl Target<'_> {
    fn task(&self) -> Task {
        match self {
            Target::Phrase(_) => Task::Main,
            Target::Title(_) => Task::Aux,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TargetTrace {
    Pooled(Vec<KeywordId>),
    Attention(AttentionTrace),
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub task: Task,
    pub user_bag: Vec<KeywordId>,
    pub query_ids: Vec<KeywordId>,
    pub e_u: Vec<f64>,
    pub e_q: Vec<f64>,
    pub e_t: Vec<f64>,
    pub target: TargetTrace,
    /// `(table index, active ids)` per pooled feature group.
    pub feature_ids: Vec<(usize, Vec<u32>)>,
    pub x: Vec<f64>,
    pub pre1: Vec<f64>,
    pub h1: Vec<f64>,
    pub pre2: Vec<f64>,
    pub h2: Vec<f64>,
    pub logit: f64,
    /// Sigmoid output clamped to `[δ, 1-δ]`.
    pub probability: f64,
}

/// Pooled user/query channels and feature groups, shared by every target
/// scored for one `(user, query)` pair.
#[derive(Debug, Clone)]
struct Context {
    user_bag: Vec<KeywordId>,
    query_ids: Vec<KeywordId>,
    e_u: Vec<f64>,
    e_q: Vec<f64>,
    feature_ids: Vec<(usize, Vec<u32>)>,
    feature_pools: Vec<Vec<f64>>,
}

fn build_context(model: &Model, user: &UserRepr, query: &Query) -> Result<Context> {
    let table = &model.params.keyword_embeddings;
    let user_bag = user.keyword_bag();
    if user_bag.is_empty() {
        return Err(Error::EmptyInput("user keywords"));
    }
    if query.keywords.is_empty() {
        return Err(Error::EmptyInput("query keywords"));
    }
    let e_u = embed_and_pool(user_bag.ids(), table)?;
    let e_q = embed_and_pool(query.keywords.ids(), table)?;

    let mut feature_ids = Vec::new();
    let mut feature_pools = Vec::new();
    if let Some(schema) = model.variant.schema() {
        for (i, (group, ft)) in schema
            .concat_order()
            .into_iter()
            .zip(&model.params.feature_embeddings)
            .enumerate()
        {
            debug_assert_eq!(group.name, ft.group);
            let source = match group.entity {
                crate::data_model::Entity::User => &user.feature_groups,
                crate::data_model::Entity::Query => &query.feature_groups,
            };
            let ids = source.active(&group.name).to_vec();
            if let Some(&bad) = ids.iter().find(|&&id| id as usize >= ft.table.rows()) {
                return Err(Error::SchemaMismatch(format!(
                    "group `{}` id {bad} exceeds cardinality {}",
                    group.name,
                    ft.table.rows()
                )));
            }
            let mut pooled = vec![0.0; ft.table.cols()];
            pool_into(&ids, &ft.table, &mut pooled)?;
            feature_ids.push((i, ids));
            feature_pools.push(pooled);
        }
    }
    Ok(Context {
        user_bag: user_bag.ids().to_vec(),
        query_ids: query.keywords.ids().to_vec(),
        e_u,
        e_q,
        feature_ids,
        feature_pools,
    })
}

/// `(b + W_u e_u) + W_q e_q` per FC1 unit, then one partial per feature group.
/// Forward and the page scorer both sum the FC1 input slices in the order
/// user, query, target, features, so their results agree bitwise.
struct Fc1Partials {
    base: Vec<f64>,
    features: Vec<Vec<f64>>,
}

fn fc1_partials(model: &Model, ctx: &Context) -> Fc1Partials {
    let fc1 = &model.params.fc1;
    let d = model.dims.keyword_dim;
    let fd = model.dims.feature_dim;
    let h1 = fc1.out_dim();
    let mut base = vec![0.0; h1];
    let mut features = vec![vec![0.0; h1]; ctx.feature_pools.len()];
    for r in 0..h1 {
        let row = fc1.weights.row(r);
        let mut a = fc1.bias.0[r];
        a += dot(&row[0..d], &ctx.e_u);
        a += dot(&row[d..2 * d], &ctx.e_q);
        base[r] = a;
        for (g, pool) in ctx.feature_pools.iter().enumerate() {
            let off = 3 * d + g * fd;
            features[g][r] = dot(&row[off..off + fd], pool);
        }
    }
    Fc1Partials { base, features }
}

struct MlpOut {
    pre1: Vec<f64>,
    h1: Vec<f64>,
    pre2: Vec<f64>,
    h2: Vec<f64>,
    logit: f64,
}

fn mlp_from_partials(model: &Model, head: &Dense, partials: &Fc1Partials, e_t: &[f64]) -> MlpOut {
    let fc1 = &model.params.fc1;
    let d = model.dims.keyword_dim;
    let mut pre1 = partials.base.clone();
    for (r, a) in pre1.iter_mut().enumerate() {
        *a += dot(&fc1.weights.row(r)[2 * d..3 * d], e_t);
        for f in &partials.features {
            *a += f[r];
        }
    }
    let h1: Vec<f64> = pre1.iter().map(|&v| v.max(0.0)).collect();
    let mut pre2 = vec![0.0; model.params.fc2.out_dim()];
    model.params.fc2.forward_into(&h1, &mut pre2);
    let h2: Vec<f64> = pre2.iter().map(|&v| v.max(0.0)).collect();
    let logit = dot(head.weights.row(0), &h2) + head.bias.0[0];
    MlpOut {
        pre1,
        h1,
        pre2,
        h2,
        logit,
    }
}

pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP)
}

/// One forward pass for `task`; the target kind must match the task.
pub fn forward(
    model: &Model,
    task: Task,
    user: &UserRepr,
    query: &Query,
    target: Target<'_>,
) -> Result<ForwardTrace> {
    if target.task() != task {
        return Err(Error::InvalidConfig(format!(
            "{} task given the wrong target kind",
            task.as_str()
        )));
    }
    model.check_task(task)?;
    let head = model.head(task)?;
    let ctx = build_context(model, user, query)?;
    let table = &model.params.keyword_embeddings;

    let (e_t, target_trace) = match target {
        Target::Phrase(ids) => (
            embed_and_pool(ids.ids(), table)?,
            TargetTrace::Pooled(ids.ids().to_vec()),
        ),
        Target::Title(title) => {
            let att = model.params.attention.as_ref().ok_or(Error::MissingAuxiliaryHead)?;
            let (pooled, trace) = attention_pool(title, &ctx.e_u, &ctx.e_q, att, table)?;
            (pooled, TargetTrace::Attention(trace))
        }
    };

    let partials = fc1_partials(model, &ctx);
    let out = mlp_from_partials(model, head, &partials, &e_t);

    let mut x = Vec::with_capacity(model.input_dim());
    x.extend_from_slice(&ctx.e_u);
    x.extend_from_slice(&ctx.e_q);
    x.extend_from_slice(&e_t);
    for p in &ctx.feature_pools {
        x.extend_from_slice(p);
    }

    Ok(ForwardTrace {
        task,
        user_bag: ctx.user_bag,
        query_ids: ctx.query_ids,
        e_u: ctx.e_u,
        e_q: ctx.e_q,
        e_t,
        target: target_trace,
        feature_ids: ctx.feature_ids,
        x,
        pre1: out.pre1,
        h1: out.h1,
        pre2: out.pre2,
        h2: out.h2,
        logit: out.logit,
        probability: clamp_probability(sigmoid(out.logit)),
    })
}

/// Mean binary cross-entropy over clamped probabilities.
pub fn loss(probabilities: &[f64], labels: &[bool]) -> Result<f64> {
    if probabilities.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: probabilities.len(),
            actual: labels.len(),
        });
    }
    if probabilities.is_empty() {
        return Err(Error::EmptyInput("loss batch"));
    }
    let total: f64 = probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = clamp_probability(p);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / probabilities.len() as f64)
}

/// Row gradients for an embedding table, with the set of touched rows.
#[derive(Debug, Clone)]
pub struct SparseRowGrad {
    data: Tensor2,
    touched: Vec<u32>,
    marked: Vec<bool>,
}

impl SparseRowGrad {
    pub fn new(rows: usize, cols: usize) -> Self {
        SparseRowGrad {
            data: Tensor2::zeros(rows, cols),
            touched: Vec::new(),
            marked: vec![false; rows],
        }
    }

    pub fn row_mut(&mut self, id: u32) -> &mut [f64] {
        if !self.marked[id as usize] {
            self.marked[id as usize] = true;
            self.touched.push(id);
        }
        self.data.row_mut(id as usize)
    }

    pub fn add_scaled(&mut self, id: u32, alpha: f64, v: &[f64]) {
        for (g, x) in self.row_mut(id).iter_mut().zip(v) {
            *g += alpha * x;
        }
    }

    pub fn touched(&self) -> &[u32] {
        &self.touched
    }

    pub fn row(&self, id: u32) -> &[f64] {
        self.data.row(id as usize)
    }

    pub fn clear(&mut self) {
        for &id in &self.touched {
            self.data.row_mut(id as usize).fill(0.0);
            self.marked[id as usize] = false;
        }
        self.touched.clear();
    }

    pub fn dense(&self) -> &Tensor2 {
        &self.data
    }
}

/// Gradients of one task's loss over Θ_task.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub task: Task,
    pub keyword_rows: SparseRowGrad,
    pub feature_rows: Vec<SparseRowGrad>,
    pub attention: Option<AttentionParams>,
    pub fc1: Dense,
    pub fc2: Dense,
    pub head: Dense,
}

impl Gradients {
    pub fn zeros(model: &Model, task: Task) -> Result<Gradients> {
        model.check_task(task)?;
        let p = &model.params;
        let zero_att = |a: &AttentionParams| AttentionParams {
            user: Tensor2::zeros(a.user.rows(), a.user.cols()),
            query: Tensor2::zeros(a.query.rows(), a.query.cols()),
            title: Tensor2::zeros(a.title.rows(), a.title.cols()),
            context: Tensor1::zeros(a.context.len()),
        };
        Ok(Gradients {
            task,
            keyword_rows: SparseRowGrad::new(p.keyword_embeddings.rows(), p.keyword_embeddings.cols()),
            feature_rows: p
                .feature_embeddings
                .iter()
                .map(|f| SparseRowGrad::new(f.table.rows(), f.table.cols()))
                .collect(),
            attention: match task {
                Task::Aux => p.attention.as_ref().map(zero_att),
                Task::Main => None,
            },
            fc1: Dense::zeros(p.fc1.in_dim(), p.fc1.out_dim()),
            fc2: Dense::zeros(p.fc2.in_dim(), p.fc2.out_dim()),
            head: Dense::zeros(model.dims.hidden2, 1),
        })
    }

    pub fn clear(&mut self) {
        self.keyword_rows.clear();
        for f in &mut self.feature_rows {
            f.clear();
        }
        if let Some(a) = &mut self.attention {
            a.user.as_mut_slice().fill(0.0);
            a.query.as_mut_slice().fill(0.0);
            a.title.as_mut_slice().fill(0.0);
            a.context.as_mut_slice().fill(0.0);
        }
        for d in [&mut self.fc1, &mut self.fc2, &mut self.head] {
            d.weights.as_mut_slice().fill(0.0);
            d.bias.as_mut_slice().fill(0.0);
        }
    }

    /// Dense gradients in [`NetworkParams::tensors`] order, zero outside Θ_task.
    pub fn to_dense(&self, params: &NetworkParams) -> Vec<Vec<f64>> {
        let mut out = vec![self.keyword_rows.dense().as_slice().to_vec()];
        for f in &self.feature_rows {
            out.push(f.dense().as_slice().to_vec());
        }
        if let Some(att) = &params.attention {
            match &self.attention {
                Some(g) => {
                    out.push(g.user.as_slice().to_vec());
                    out.push(g.query.as_slice().to_vec());
                    out.push(g.title.as_slice().to_vec());
                    out.push(g.context.as_slice().to_vec());
                }
                None => {
                    out.push(vec![0.0; att.user.as_slice().len()]);
                    out.push(vec![0.0; att.query.as_slice().len()]);
                    out.push(vec![0.0; att.title.as_slice().len()]);
                    out.push(vec![0.0; att.context.len()]);
                }
            }
        }
        for d in [&self.fc1, &self.fc2] {
            out.push(d.weights.as_slice().to_vec());
            out.push(d.bias.as_slice().to_vec());
        }
        let head_len = params.head_main.weights.as_slice().len();
        let (main, aux) = match self.task {
            Task::Main => (Some(&self.head), None),
            Task::Aux => (None, Some(&self.head)),
        };
        for (slot, grad) in [(Some(&params.head_main), main), (params.head_aux.as_ref(), aux)] {
            if slot.is_none() {
                continue;
            }
            match grad {
                Some(g) => {
                    out.push(g.weights.as_slice().to_vec());
                    out.push(g.bias.as_slice().to_vec());
                }
                None => {
                    out.push(vec![0.0; head_len]);
                    out.push(vec![0.0; 1]);
                }
            }
        }
        out
    }
}

/// d(clamped loss)/d(logit) for one instance, before batch averaging.
fn logit_gradient(trace: &ForwardTrace, label: bool) -> f64 {
    let p = sigmoid(trace.logit);
    if !(PROBABILITY_CLAMP..=1.0 - PROBABILITY_CLAMP).contains(&p) {
        return 0.0;
    }
    p - f64::from(u8::from(label))
}

/// Accumulates the gradient of `weight · loss(trace)` into `grads`.
pub fn accumulate_gradients(
    model: &Model,
    trace: &ForwardTrace,
    label: bool,
    weight: f64,
    grads: &mut Gradients,
) -> Result<()> {
    if trace.task != grads.task {
        return Err(Error::InvalidConfig("trace and gradient task differ".into()));
    }
    let dlogit = weight * logit_gradient(trace, label);
    if dlogit == 0.0 {
        return Ok(());
    }
    let p = &model.params;
    let head = model.head(trace.task)?;
    let d = model.dims.keyword_dim;
    let fd = model.dims.feature_dim;

    grads.head.weights.outer_acc(&[dlogit], &trace.h2);
    grads.head.bias.0[0] += dlogit;

    let da2: Vec<f64> = head
        .weights
        .row(0)
        .iter()
        .zip(&trace.pre2)
        .map(|(&w, &z)| if z > 0.0 { dlogit * w } else { 0.0 })
        .collect();
    grads.fc2.weights.outer_acc(&da2, &trace.h1);
    for (b, g) in grads.fc2.bias.0.iter_mut().zip(&da2) {
        *b += g;
    }
    let mut dh1 = vec![0.0; trace.h1.len()];
    p.fc2.weights.matvec_transposed_acc(&da2, &mut dh1);
    let da1: Vec<f64> = dh1
        .iter()
        .zip(&trace.pre1)
        .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
        .collect();
    grads.fc1.weights.outer_acc(&da1, &trace.x);
    for (b, g) in grads.fc1.bias.0.iter_mut().zip(&da1) {
        *b += g;
    }
    let mut dx = vec![0.0; trace.x.len()];
    p.fc1.weights.matvec_transposed_acc(&da1, &mut dx);

    let mut de_u = dx[0..d].to_vec();
    let mut de_q = dx[d..2 * d].to_vec();
    let de_t = &dx[2 * d..3 * d];

    match &trace.target {
        TargetTrace::Pooled(ids) => {
            let scale = 1.0 / ids.len() as f64;
            for &id in ids {
                grads.keyword_rows.add_scaled(id, scale, de_t);
            }
        }
        TargetTrace::Attention(at) => {
            let att = p.attention.as_ref().ok_or(Error::MissingAuxiliaryHead)?;
            let gatt = grads.attention.as_mut().ok_or(Error::MissingAuxiliaryHead)?;
            let table = &p.keyword_embeddings;
            let dalpha: Vec<f64> = at
                .title
                .iter()
                .map(|&id| dot(de_t, table.row(id as usize)))
                .collect();
            let mean: f64 = at.weights.iter().zip(&dalpha).map(|(a, g)| a * g).sum();
            let mut ds_sum = vec![0.0; d];
            let mut ds = vec![0.0; d];
            let mut de_row = vec![0.0; d];
            for (j, &id) in at.title.iter().enumerate() {
                let alpha = at.weights[j];
                let db = alpha * (dalpha[j] - mean);
                let g = &at.activations[j];
                for (c, gv) in gatt.context.0.iter_mut().zip(g) {
                    *c += db * gv;
                }
                for ((s, &z), &gv) in ds.iter_mut().zip(&att.context.0).zip(g) {
                    *s = db * z * (1.0 - gv * gv);
                }
                let e_j = table.row(id as usize);
                gatt.title.outer_acc(&ds, e_j);
                de_row.iter_mut().zip(de_t).for_each(|(r, &g)| *r = alpha * g);
                att.title.matvec_transposed_acc(&ds, &mut de_row);
                grads.keyword_rows.add_scaled(id, 1.0, &de_row);
                for (a, s) in ds_sum.iter_mut().zip(&ds) {
                    *a += s;
                }
            }
            gatt.user.outer_acc(&ds_sum, &trace.e_u);
            gatt.query.outer_acc(&ds_sum, &trace.e_q);
            att.user.matvec_transposed_acc(&ds_sum, &mut de_u);
            att.query.matvec_transposed_acc(&ds_sum, &mut de_q);
        }
    }

    let scale = 1.0 / trace.user_bag.len() as f64;
    for &id in &trace.user_bag {
        grads.keyword_rows.add_scaled(id, scale, &de_u);
    }
    let scale = 1.0 / trace.query_ids.len() as f64;
    for &id in &trace.query_ids {
        grads.keyword_rows.add_scaled(id, scale, &de_q);
    }
    for (slot, (table_idx, ids)) in trace.feature_ids.iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        let off = 3 * d + slot * fd;
        let dg = &dx[off..off + fd];
        let scale = 1.0 / ids.len() as f64;
        for &id in ids {
            grads.feature_rows[*table_idx].add_scaled(id, scale, dg);
        }
    }
    Ok(())
}

/// Gradients of the mean loss over a batch of traces.
pub fn backward(model: &Model, task: Task, traces: &[ForwardTrace], labels: &[bool]) -> Result<Gradients> {
    if traces.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: traces.len(),
            actual: labels.len(),
        });
    }
    if traces.is_empty() {
        return Err(Error::EmptyInput("backward batch"));
    }
    let mut grads = Gradients::zeros(model, task)?;
    let w = 1.0 / traces.len() as f64;
    for (t, &y) in traces.iter().zip(labels) {
        if t.task != task {
            return Err(Error::InvalidConfig("trace task does not match".into()));
        }
        accumulate_gradients(model, t, y, w, &mut grads)?;
    }
    Ok(grads)
}

/// AdaGrad over every network tensor; accumulators mirror the parameters.
#[derive(Debug, Clone)]
pub struct ParamOptimizer {
    pub accumulators: NetworkParams,
    pub learning_rate: f64,
    pub stabilizer: f64,
}

impl ParamOptimizer {
    pub fn new(params: &NetworkParams, learning_rate: f64) -> Self {
        ParamOptimizer {
            accumulators: params.zeros_like(),
            learning_rate,
            stabilizer: ADAGRAD_STABILIZER,
        }
    }

    /// Updates only the tensors of `grads.task`.
    pub fn apply(&mut self, params: &mut NetworkParams, grads: &Gradients) -> Result<()> {
        let (lr, eps) = (self.learning_rate, self.stabilizer);
        let acc = &mut self.accumulators;
        for &id in grads.keyword_rows.touched() {
            adagrad_update(
                params.keyword_embeddings.row_mut(id as usize),
                grads.keyword_rows.row(id),
                acc.keyword_embeddings.row_mut(id as usize),
                lr,
                eps,
            )?;
        }
        for ((pt, at), g) in params
            .feature_embeddings
            .iter_mut()
            .zip(acc.feature_embeddings.iter_mut())
            .zip(&grads.feature_rows)
        {
            for &id in g.touched() {
                adagrad_update(
                    pt.table.row_mut(id as usize),
                    g.row(id),
                    at.table.row_mut(id as usize),
                    lr,
                    eps,
                )?;
            }
        }
        if let Some(g) = &grads.attention {
            let pa = params.attention.as_mut().ok_or(Error::MissingAuxiliaryHead)?;
            let aa = acc.attention.as_mut().ok_or(Error::MissingAuxiliaryHead)?;
            adagrad_update(pa.user.as_mut_slice(), g.user.as_slice(), aa.user.as_mut_slice(), lr, eps)?;
            adagrad_update(pa.query.as_mut_slice(), g.query.as_slice(), aa.query.as_mut_slice(), lr, eps)?;
            adagrad_update(pa.title.as_mut_slice(), g.title.as_slice(), aa.title.as_mut_slice(), lr, eps)?;
            adagrad_update(
                pa.context.as_mut_slice(),
                g.context.as_slice(),
                aa.context.as_mut_slice(),
                lr,
                eps,
            )?;
        }
        let dense_step = |p: &mut Dense, a: &mut Dense, g: &Dense| -> Result<()> {
            adagrad_update(p.weights.as_mut_slice(), g.weights.as_slice(), a.weights.as_mut_slice(), lr, eps)?;
            adagrad_update(p.bias.as_mut_slice(), g.bias.as_slice(), a.bias.as_mut_slice(), lr, eps)
        };
        dense_step(&mut params.fc1, &mut acc.fc1, &grads.fc1)?;
        dense_step(&mut params.fc2, &mut acc.fc2, &grads.fc2)?;
        match grads.task {
            Task::Main => dense_step(&mut params.head_main, &mut acc.head_main, &grads.head)?,
            Task::Aux => {
                let p = params.head_aux.as_mut().ok_or(Error::MissingAuxiliaryHead)?;
                let a = acc.head_aux.as_mut().ok_or(Error::MissingAuxiliaryHead)?;
                dense_step(p, a, &grads.head)?;
            }
        }
        Ok(())
    }
}

/// Precomputed user/query state for scoring many phrases with the main head.
pub struct ScoringContext<'m> {
    model: &'m Model,
    partials: Fc1Partials,
}

impl<'m> ScoringContext<'m> {
    pub fn new(model: &'m Model, user: &UserRepr, query: &Query) -> Result<Self> {
        let ctx = build_context(model, user, query)?;
        Ok(ScoringContext {
            model,
            partials: fc1_partials(model, &ctx),
        })
    }

    /// Main-task probability that `phrase` attracts the context's user.
    pub fn score(&self, phrase: &KeywordSet) -> Result<f64> {
        let e_t = embed_and_pool(phrase.ids(), &self.model.params.keyword_embeddings)?;
        let out = mlp_from_partials(self.model, &self.model.params.head_main, &self.partials, &e_t);
        Ok(clamp_probability(sigmoid(out.logit)))
    }
}

/// One main-task probability per candidate phrase; the owning ad plays no part.
pub fn predict_sp_scores(
    model: &Model,
    user: &UserRepr,
    query: &Query,
    candidates: &[KeywordSet],
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("sp candidates"));
    }
    let ctx = ScoringContext::new(model, user, query)?;
    candidates.iter().map(|c| ctx.score(c)).collect()
}
