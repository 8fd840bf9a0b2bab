//! Planted-preference synthetic world.
//!
//! Categories, keywords and users live in a shared latent space. Keywords
//! cluster around their category's latent, users around a primary and a
//! secondary category. The probability that a selling-point phrase attracts a
//! user under a query is a logistic function of the inner product between
//! `user + query` and the phrase's mean keyword latent. SF clicks and ad clicks
//! are both drawn from that same probability, so the auxiliary task carries
//! real information about the main one.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::distributions::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_model::{
    build_user_repr, encode_feature_groups, Ad, AdInstance, AdRecord, Click, Entity, FeatureSchema,
    FeatureValue, FieldDef, FieldKind, GroupDef, KeywordId, KeywordSet, Query, RawFeatures,
    SfInstance, UserRecord, UserRepr, Vocabulary,
};
use crate::error::{Error, Result};
use crate::numeric::{dot, sigmoid, substream};
use crate::training::{sample_negatives_ad, sample_negatives_sf, AdSession, SfImpression, TrainingConfig};

const DAY: i64 = 24 * 3600;
/// Reference "now" for every generated click history.
pub const WORLD_NOW: i64 = 1_700_000_000;
const AGE_BUCKETS: u32 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_keywords: usize,
    pub n_categories: usize,
    pub n_ads: usize,
    pub latent_dim: usize,
    pub sf_per_impression: usize,
    pub session_length: usize,
    pub click_temperature: f64,
    pub click_bias: f64,
    /// Per-dimension Gaussian noise added to a keyword's category latent.
    pub keyword_noise: f64,
    /// Per-dimension Gaussian noise added to a user's latent.
    pub user_noise: f64,
    /// Probability that an observable user feature is replaced by a random value.
    pub feature_noise: f64,
    /// Log-scale spread of per-category SF and AD activity.
    pub activity_spread: f64,
    /// Log-scale spread of per-user activity around the category level.
    pub user_activity_spread: f64,
    pub phrases_per_category: usize,
    /// Fraction of each category's SP phrases that also appear as SFs.
    pub sf_fraction: f64,
    pub sps_per_ad: usize,
    pub title_filler: usize,
    /// Share of shown SFs drawn from the query's category.
    pub in_category_share: f64,
    /// Share of session ads drawn from the query's category.
    pub ad_in_category_share: f64,
    pub history_clicks_min: usize,
    pub history_clicks_max: usize,
    /// Sharpness of affinity-proportional history sampling.
    pub history_sharpness: f64,
    /// Ad click probability multiplier at position 0.
    pub ad_click_scale: f64,
    /// Per-position geometric damping of ad clicks.
    pub position_decay: f64,
    pub n_sf_impressions: usize,
    pub n_ad_sessions: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_users: 2000,
            n_keywords: 5000,
            n_categories: 50,
            n_ads: 2000,
            latent_dim: 8,
            sf_per_impression: 10,
            session_length: 20,
            click_temperature: 4.0,
            click_bias: -4.0,
            keyword_noise: 0.2,
            user_noise: 0.2,
            feature_noise: 0.1,
            activity_spread: 1.0,
            user_activity_spread: 0.5,
            phrases_per_category: 20,
            sf_fraction: 0.5,
            sps_per_ad: 5,
            title_filler: 3,
            in_category_share: 0.3,
            ad_in_category_share: 0.6,
            history_clicks_min: 20,
            history_clicks_max: 60,
            history_sharpness: 6.0,
            ad_click_scale: 1.0,
            position_decay: 0.97,
            n_sf_impressions: 8000,
            n_ad_sessions: 19000,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("world.{m}")));
        for (name, v) in [
            ("n_users", self.n_users),
            ("n_keywords", self.n_keywords),
            ("n_categories", self.n_categories),
            ("n_ads", self.n_ads),
            ("sf_per_impression", self.sf_per_impression),
            ("session_length", self.session_length),
            ("phrases_per_category", self.phrases_per_category),
            ("sps_per_ad", self.sps_per_ad),
            ("n_sf_impressions", self.n_sf_impressions),
            ("n_ad_sessions", self.n_ad_sessions),
        ] {
            if v == 0 {
                return bad(&format!("{name} must be positive"));
            }
        }
        if self.latent_dim < 2 {
            return bad("latent_dim must be at least 2");
        }
        if self.n_keywords < self.n_categories {
            return bad("n_keywords must be at least n_categories");
        }
        if self.sps_per_ad > self.phrases_per_category {
            return bad("sps_per_ad cannot exceed phrases_per_category");
        }
        if !(self.sf_fraction > 0.0 && self.sf_fraction < 1.0) {
            return bad("sf_fraction must lie in (0, 1)");
        }
        if self.phrases_per_category < 2 {
            return bad("phrases_per_category must be at least 2");
        }
        if self.history_clicks_min == 0 || self.history_clicks_min > self.history_clicks_max {
            return bad("history click range is empty");
        }
        for (name, p) in [
            ("feature_noise", self.feature_noise),
            ("in_category_share", self.in_category_share),
            ("ad_in_category_share", self.ad_in_category_share),
            ("ad_click_scale", self.ad_click_scale),
            ("position_decay", self.position_decay),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        let sf_per_cat = self.sf_phrases_per_category();
        if self.sf_per_impression > sf_per_cat * self.n_categories {
            return bad("sf_per_impression exceeds the SF inventory");
        }
        if self.session_length > self.n_ads {
            return bad("session_length exceeds n_ads");
        }
        Ok(())
    }

    /// Number of each category's phrases that form the SF inventory; always
    /// at least one and strictly fewer than all of them.
    pub fn sf_phrases_per_category(&self) -> usize {
        ((self.phrases_per_category as f64 * self.sf_fraction).round() as usize)
            .clamp(1, self.phrases_per_category - 1)
    }
}

/// Logistic attraction of a phrase given user and query latents.
pub fn attraction_probability(
    temperature: f64,
    bias: f64,
    user_latent: &[f64],
    query_latent: &[f64],
    phrase_latent: &[f64],
) -> f64 {
    let affinity: f64 = user_latent
        .iter()
        .zip(query_latent)
        .zip(phrase_latent)
        .map(|((u, q), s)| (u + q) * s)
        .sum();
    sigmoid(temperature * affinity + bias)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldUser {
    pub latent: Vec<f64>,
    pub primary_category: usize,
    pub secondary_category: usize,
    pub sf_activity: f64,
    pub ad_activity: f64,
    pub record: UserRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpPhrase {
    pub keywords: KeywordSet,
    pub category: usize,
    pub is_sf: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldAd {
    pub category: usize,
    pub record: AdRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub terms: Vec<String>,
    pub keyword_categories: Vec<usize>,
    pub category_latents: Vec<Vec<f64>>,
    pub keyword_latents: Vec<Vec<f64>>,
    pub users: Vec<WorldUser>,
    pub phrases: Vec<SpPhrase>,
    pub ads: Vec<WorldAd>,
    pub schema: FeatureSchema,
    #[serde(skip)]
    cache: Cache,
}

impl PartialEq for World {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.terms == other.terms
            && self.keyword_categories == other.keyword_categories
            && self.category_latents == other.category_latents
            && self.keyword_latents == other.keyword_latents
            && self.users == other.users
            && self.phrases == other.phrases
            && self.ads == other.ads
            && self.schema == other.schema
    }
}

/// Derived lookup structures, rebuilt after deserialization.
#[derive(Debug, Clone, Default)]
struct Cache {
    reprs: Vec<Arc<UserRepr>>,
    ads: Vec<Arc<Ad>>,
    keywords_by_category: Vec<Vec<KeywordId>>,
    sf_by_category: Vec<Vec<usize>>,
    sf_all: Vec<usize>,
    ads_by_category: Vec<Vec<usize>>,
    sf_user_weights: Option<WeightedIndex<f64>>,
    ad_user_weights: Option<WeightedIndex<f64>>,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Some(u) = normalized(&v) {
            return u;
        }
    }
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = dot(v, v).sqrt();
    (n > 1e-12).then(|| v.iter().map(|x| x / n).collect())
}

fn noisy_unit(rng: &mut ChaCha8Rng, center: &[f64], noise: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = center
            .iter()
            .map(|c| c + noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if let Some(u) = normalized(&v) {
            return u;
        }
    }
}

/// The feature schema of generated users and queries: a profile group, a
/// category-preference group and the query category.
pub fn world_schema(n_categories: usize) -> Result<FeatureSchema> {
    let n = n_categories as u32;
    FeatureSchema::new(vec![
        GroupDef {
            name: "profile".into(),
            entity: Entity::User,
            fields: vec![
                FieldDef {
                    name: "gender".into(),
                    cardinality: 2,
                    kind: FieldKind::Categorical,
                },
                FieldDef {
                    name: "age".into(),
                    cardinality: AGE_BUCKETS,
                    kind: FieldKind::Categorical,
                },
            ],
        },
        GroupDef {
            name: "preference".into(),
            entity: Entity::User,
            fields: vec![FieldDef {
                name: "categories".into(),
                cardinality: n,
                kind: FieldKind::BagOfWords,
            }],
        },
        GroupDef {
            name: "query_category".into(),
            entity: Entity::Query,
            fields: vec![FieldDef {
                name: "category".into(),
                cardinality: n,
                kind: FieldKind::Categorical,
            }],
        },
    ])
}

fn one_group(group: &str, field: &str, value: FeatureValue) -> RawFeatures {
    let mut raw = RawFeatures::new();
    raw.insert(group.into(), BTreeMap::from([(field.to_string(), value)]));
    raw
}

fn distinct_sample<T: Copy + PartialEq>(
    rng: &mut ChaCha8Rng,
    n: usize,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> T,
) -> Vec<T> {
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n && attempts < 100 * n {
        let x = draw(rng);
        if !out.contains(&x) {
            out.push(x);
        }
        attempts += 1;
    }
    out
}

/// Builds a world deterministically from `config` (its `seed` included).
pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let seed = config.seed;
    let dim = config.latent_dim;
    let n_cat = config.n_categories;

    let mut rng = substream(seed, "world.categories");
    let category_latents: Vec<Vec<f64>> = (0..n_cat).map(|_| unit_gaussian(&mut rng, dim)).collect();

    let mut rng = substream(seed, "world.keywords");
    let keyword_categories: Vec<usize> = (0..config.n_keywords).map(|k| k % n_cat).collect();
    let keyword_latents: Vec<Vec<f64>> = keyword_categories
        .iter()
        .map(|&c| noisy_unit(&mut rng, &category_latents[c], config.keyword_noise))
        .collect();
    let terms: Vec<String> = (0..config.n_keywords).map(|k| format!("w{k:05}")).collect();
    let mut keywords_by_category = vec![Vec::new(); n_cat];
    for (k, &c) in keyword_categories.iter().enumerate() {
        keywords_by_category[c].push(k as KeywordId);
    }

    let mut rng = substream(seed, "world.phrases");
    let sf_per_cat = config.sf_phrases_per_category();
    let mut phrases = Vec::new();
    for (c, kws) in keywords_by_category.iter().enumerate() {
        let mut seen: Vec<KeywordSet> = Vec::new();
        let mut attempts = 0;
        while seen.len() < config.phrases_per_category && attempts < 1000 {
            attempts += 1;
            let len = if kws.len() > 1 { rng.gen_range(1..=2) } else { 1 };
            let set = KeywordSet::new(kws.choose_multiple(&mut rng, len).copied().collect());
            if !seen.contains(&set) {
                seen.push(set);
            }
        }
        if seen.len() < config.phrases_per_category {
            return Err(Error::InvalidConfig(format!(
                "category {c} has too few keywords for {} phrases",
                config.phrases_per_category
            )));
        }
        for (i, keywords) in seen.into_iter().enumerate() {
            phrases.push(SpPhrase {
                keywords,
                category: c,
                is_sf: i < sf_per_cat,
            });
        }
    }

    let schema = world_schema(n_cat)?;

    let mut rng = substream(seed, "world.activity");
    let spread = LogNormal::new(0.0, config.activity_spread.max(0.0))
        .map_err(|e| Error::InvalidConfig(format!("world.activity_spread: {e}")))?;
    let user_spread = LogNormal::new(0.0, config.user_activity_spread.max(0.0))
        .map_err(|e| Error::InvalidConfig(format!("world.user_activity_spread: {e}")))?;
    let sf_category_activity: Vec<f64> = (0..n_cat).map(|_| spread.sample(&mut rng)).collect();
    let ad_category_activity: Vec<f64> = (0..n_cat).map(|_| spread.sample(&mut rng)).collect();

    let mut rng = substream(seed, "world.users");
    let mut users = Vec::with_capacity(config.n_users);
    for user_id in 0..config.n_users {
        let primary = rng.gen_range(0..n_cat);
        let secondary = if n_cat > 1 {
            (primary + rng.gen_range(1..n_cat)) % n_cat
        } else {
            primary
        };
        let center: Vec<f64> = category_latents[primary]
            .iter()
            .zip(&category_latents[secondary])
            .map(|(p, s)| p + 0.5 * s)
            .collect();
        let latent = noisy_unit(&mut rng, &center, config.user_noise);

        // history clicks sampled in proportion to exp(sharpness · affinity)
        let weights: Vec<f64> = keyword_latents
            .iter()
            .map(|k| (config.history_sharpness * dot(&latent, k)).exp())
            .collect();
        let pick = WeightedIndex::new(&weights).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let n_clicks = rng.gen_range(config.history_clicks_min..=config.history_clicks_max);
        let clicks: Vec<Click> = (0..n_clicks)
            .map(|_| Click {
                timestamp: WORLD_NOW - rng.gen_range(0..45 * DAY),
                keywords: vec![pick.sample(&mut rng) as KeywordId],
            })
            .collect();
        let history = build_user_repr(user_id as u32, &clicks, WORLD_NOW);

        let noisy = |rng: &mut ChaCha8Rng, truth: u32, card: u32| {
            if rng.gen_bool(config.feature_noise) {
                rng.gen_range(0..card)
            } else {
                truth
            }
        };
        let gender = noisy(&mut rng, u32::from(latent[0] > 0.0), 2);
        let age_truth = (((latent[1] + 1.0) / 2.0 * f64::from(AGE_BUCKETS)) as u32).min(AGE_BUCKETS - 1);
        let age = noisy(&mut rng, age_truth, AGE_BUCKETS);
        let mut prefs = vec![noisy(&mut rng, primary as u32, n_cat as u32)];
        if rng.gen_bool(0.8) {
            prefs.push(noisy(&mut rng, secondary as u32, n_cat as u32));
        }
        let mut raw = RawFeatures::new();
        raw.insert(
            "profile".into(),
            BTreeMap::from([
                ("gender".to_string(), FeatureValue::One(gender)),
                ("age".to_string(), FeatureValue::One(age)),
            ]),
        );
        raw.extend(one_group("preference", "categories", FeatureValue::Many(prefs)));
        let repr = UserRepr {
            feature_groups: encode_feature_groups(&raw, &schema)?,
            ..history
        };

        users.push(WorldUser {
            latent,
            primary_category: primary,
            secondary_category: secondary,
            sf_activity: sf_category_activity[primary] * user_spread.sample(&mut rng),
            ad_activity: ad_category_activity[primary] * user_spread.sample(&mut rng),
            record: UserRecord::from_repr(&repr, &schema)?,
        });
    }

    let mut rng = substream(seed, "world.ads");
    let mut by_cat: Vec<Vec<usize>> = vec![Vec::new(); n_cat];
    for (i, p) in phrases.iter().enumerate() {
        by_cat[p.category].push(i);
    }
    let mut ads = Vec::with_capacity(config.n_ads);
    for ad_id in 0..config.n_ads {
        let category = rng.gen_range(0..n_cat);
        let chosen: Vec<usize> = by_cat[category]
            .choose_multiple(&mut rng, config.sps_per_ad)
            .copied()
            .collect();
        let sps: Vec<KeywordSet> = chosen.iter().map(|&i| phrases[i].keywords.clone()).collect();
        let mut title: Vec<KeywordId> = Vec::new();
        for sp in &sps {
            for &k in sp.ids() {
                if !title.contains(&k) {
                    title.push(k);
                }
            }
        }
        for _ in 0..config.title_filler {
            let k = *keywords_by_category[category].choose(&mut rng).expect("non-empty category");
            if !title.contains(&k) {
                title.push(k);
            }
        }
        title.shuffle(&mut rng);
        ads.push(WorldAd {
            category,
            record: AdRecord::from_ad(&Ad {
                ad_id: ad_id as u32,
                title_keywords: title,
                sp_candidates: sps,
            }),
        });
    }

    let mut world = World {
        config: config.clone(),
        terms,
        keyword_categories,
        category_latents,
        keyword_latents,
        users,
        phrases,
        ads,
        schema,
        cache: Cache::default(),
    };
    world.rebuild_cache()?;
    Ok(world)
}

impl World {
    fn rebuild_cache(&mut self) -> Result<()> {
        let n_cat = self.config.n_categories;
        let mut c = Cache {
            reprs: self
                .users
                .iter()
                .map(|u| u.record.to_repr(&self.schema).map(Arc::new))
                .collect::<Result<_>>()?,
            ads: self
                .ads
                .iter()
                .map(|a| a.record.to_ad().map(Arc::new))
                .collect::<Result<_>>()?,
            keywords_by_category: vec![Vec::new(); n_cat],
            sf_by_category: vec![Vec::new(); n_cat],
            sf_all: Vec::new(),
            ads_by_category: vec![Vec::new(); n_cat],
            sf_user_weights: None,
            ad_user_weights: None,
        };
        for (k, &cat) in self.keyword_categories.iter().enumerate() {
            c.keywords_by_category[cat].push(k as KeywordId);
        }
        for (i, p) in self.phrases.iter().enumerate().filter(|(_, p)| p.is_sf) {
            c.sf_by_category[p.category].push(i);
            c.sf_all.push(i);
        }
        for (i, a) in self.ads.iter().enumerate() {
            c.ads_by_category[a.category].push(i);
        }
        let weights = |f: fn(&WorldUser) -> f64| {
            WeightedIndex::new(self.users.iter().map(f)).map_err(|e| Error::InvalidConfig(e.to_string()))
        };
        c.sf_user_weights = Some(weights(|u| u.sf_activity)?);
        c.ad_user_weights = Some(weights(|u| u.ad_activity)?);
        self.cache = c;
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_terms(self.terms.clone())
    }

    pub fn user(&self, user_id: u32) -> Result<&Arc<UserRepr>> {
        self.cache
            .reprs
            .get(user_id as usize)
            .ok_or_else(|| Error::ForeignEntity(format!("user {user_id}")))
    }

    pub fn ads(&self) -> &[Arc<Ad>] {
        &self.cache.ads
    }

    pub fn ad(&self, ad_id: u32) -> Result<&Arc<Ad>> {
        self.cache
            .ads
            .get(ad_id as usize)
            .ok_or_else(|| Error::ForeignEntity(format!("ad {ad_id}")))
    }

    /// Mean of the keyword latents (not re-normalized).
    pub fn mean_latent(&self, ids: &[KeywordId]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("keyword list"));
        }
        let mut acc = vec![0.0; self.config.latent_dim];
        for &k in ids {
            let lat = self
                .keyword_latents
                .get(k as usize)
                .ok_or_else(|| Error::ForeignEntity(format!("keyword {k}")))?;
            acc.iter_mut().zip(lat).for_each(|(a, l)| *a += l);
        }
        let n = ids.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }

    /// Query latent: the normalized mean of its keyword latents.
    pub fn query_latent(&self, query: &Query) -> Result<Vec<f64>> {
        let mean = self.mean_latent(query.keywords.ids())?;
        Ok(normalized(&mean).unwrap_or(mean))
    }

    /// Ground-truth probability that `sp` attracts `user` under `query`.
    pub fn oracle_attraction(&self, user_id: u32, query: &Query, sp: &KeywordSet) -> Result<f64> {
        let user = self
            .users
            .get(user_id as usize)
            .ok_or_else(|| Error::ForeignEntity(format!("user {user_id}")))?;
        let q = self.query_latent(query)?;
        let s = self.mean_latent(sp.ids())?;
        Ok(attraction_probability(
            self.config.click_temperature,
            self.config.click_bias,
            &user.latent,
            &q,
            &s,
        ))
    }

    /// Click probability of an ad at `position` given the SPs it displays.
    pub fn ad_click_probability(
        &self,
        user_id: u32,
        query: &Query,
        displayed: &[KeywordSet],
        position: usize,
    ) -> Result<f64> {
        let mut best: f64 = 0.0;
        for sp in displayed {
            best = best.max(self.oracle_attraction(user_id, query, sp)?);
        }
        Ok(best * self.position_factor(position))
    }

    pub fn position_factor(&self, position: usize) -> f64 {
        self.config.ad_click_scale * self.config.position_decay.powi(position as i32)
    }

    /// A query from the user's interests: primary category half of the time,
    /// secondary 30%, otherwise uniform.
    pub fn sample_query(&self, user_id: u32, rng: &mut impl Rng) -> Result<(Arc<Query>, usize)> {
        let user = self
            .users
            .get(user_id as usize)
            .ok_or_else(|| Error::ForeignEntity(format!("user {user_id}")))?;
        let r: f64 = rng.gen();
        let category = if r < 0.5 {
            user.primary_category
        } else if r < 0.8 {
            user.secondary_category
        } else {
            rng.gen_range(0..self.config.n_categories)
        };
        let pool = &self.cache.keywords_by_category[category];
        let len = if pool.len() > 1 { rng.gen_range(1..=2) } else { 1 };
        let keywords = KeywordSet::new(pool.choose_multiple(rng, len).copied().collect());
        let raw = one_group("query_category", "category", FeatureValue::One(category as u32));
        let query = Query {
            keywords,
            feature_groups: encode_feature_groups(&raw, &self.schema)?,
        };
        Ok((Arc::new(query), category))
    }

    fn sample_user(&self, rng: &mut impl Rng, sf: bool) -> u32 {
        let weights = if sf {
            &self.cache.sf_user_weights
        } else {
            &self.cache.ad_user_weights
        };
        weights.as_ref().expect("cache built").sample(rng) as u32
    }

    /// `n` SF impressions with Bernoulli clicks from the oracle.
    pub fn generate_sf_impressions(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<SfImpression>> {
        let share = self.config.in_category_share;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let user_id = self.sample_user(rng, true);
            let (query, category) = self.sample_query(user_id, rng)?;
            let local = &self.cache.sf_by_category[category];
            let all = &self.cache.sf_all;
            let chosen = distinct_sample(rng, self.config.sf_per_impression, |r| {
                if r.gen_bool(share) {
                    *local.choose(r).expect("non-empty SF inventory")
                } else {
                    *all.choose(r).expect("non-empty SF inventory")
                }
            });
            let shown: Vec<KeywordSet> = chosen.iter().map(|&i| self.phrases[i].keywords.clone()).collect();
            let mut clicked = Vec::with_capacity(shown.len());
            for sf in &shown {
                let p = self.oracle_attraction(user_id, &query, sf)?;
                clicked.push(rng.gen_bool(p));
            }
            out.push(SfImpression {
                user: self.cache.reprs[user_id as usize].clone(),
                query,
                shown,
                clicked,
            });
        }
        Ok(out)
    }

    /// `n` ordered ad sessions; each ad's click probability is the oracle of
    /// its best SP damped by position.
    pub fn generate_ad_sessions(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<AdSession>> {
        let share = self.config.ad_in_category_share;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let user_id = self.sample_user(rng, false);
            let (query, category) = self.sample_query(user_id, rng)?;
            let local = &self.cache.ads_by_category[category];
            let n_ads = self.ads.len();
            let chosen = distinct_sample(rng, self.config.session_length, |r| {
                if !local.is_empty() && r.gen_bool(share) {
                    *local.choose(r).expect("checked non-empty")
                } else {
                    r.gen_range(0..n_ads)
                }
            });
            let ads: Vec<Arc<Ad>> = chosen.iter().map(|&i| self.cache.ads[i].clone()).collect();
            let mut clicked = Vec::with_capacity(ads.len());
            for (pos, ad) in ads.iter().enumerate() {
                let p = self.ad_click_probability(user_id, &query, &ad.sp_candidates, pos)?;
                clicked.push(rng.gen_bool(p));
            }
            out.push(AdSession {
                user: self.cache.reprs[user_id as usize].clone(),
                query,
                ads,
                clicked,
            });
        }
        Ok(out)
    }

    /// A search result page: a uniform user, a query from their interests and
    /// `n_ads` distinct ads.
    pub fn sample_page(&self, n_ads: usize, rng: &mut impl Rng) -> Result<(Arc<UserRepr>, Arc<Query>, Vec<Arc<Ad>>)> {
        let all = self.ads();
        if n_ads > all.len() {
            return Err(Error::InvalidConfig(format!(
                "page of {n_ads} ads requested from a world with {} ads",
                all.len()
            )));
        }
        let user_id = rng.gen_range(0..self.users.len() as u32);
        let user = self.user(user_id)?.clone();
        let (query, _) = self.sample_query(user_id, rng)?;
        let ads = rand::seq::index::sample(rng, all.len(), n_ads)
            .into_iter()
            .map(|i| all[i].clone())
            .collect();
        Ok((user, query, ads))
    }

    /// Oracle probabilities for SF instances.
    pub fn oracle_sf_scores(&self, data: &[SfInstance]) -> Result<Vec<f64>> {
        data.iter()
            .map(|x| self.oracle_attraction(x.user.user_id, &x.query, &x.sf))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<World> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut world: World = serde_json::from_reader(std::io::BufReader::new(f))?;
        world.config.validate()?;
        world.rebuild_cache()?;
        Ok(world)
    }
}

/// Labeled SF and AD instance sets sampled from a world.
#[derive(Debug, Clone)]
pub struct WorldDatasets {
    pub sf: Vec<SfInstance>,
    pub ad: Vec<AdInstance>,
}

/// Generates the configured impressions and sessions and applies negative
/// sampling with the training ratios.
pub fn generate_datasets(world: &World, training: &TrainingConfig) -> Result<WorldDatasets> {
    let seed = world.config.seed;
    let impressions = world.generate_sf_impressions(world.config.n_sf_impressions, &mut substream(seed, "data.sf"))?;
    let sessions = world.generate_ad_sessions(world.config.n_ad_sessions, &mut substream(seed, "data.ad"))?;
    Ok(WorldDatasets {
        sf: sample_negatives_sf(&impressions, training.sf_neg_ratio, &mut substream(seed, "data.sf.negatives")),
        ad: sample_negatives_ad(&sessions, training.ad_neg_ratio, &mut substream(seed, "data.ad.negatives")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            n_users: 100,
            n_keywords: 400,
            n_categories: 10,
            n_ads: 200,
            n_sf_impressions: 100,
            n_ad_sessions: 100,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let a = generate_world(&small()).unwrap();
        let b = generate_world(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_world(&WorldConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
        let unit = |v: &Vec<f64>| (dot(v, v).sqrt() - 1.0).abs() <= 1e-9;
        assert!(a.keyword_latents.iter().all(unit));
        assert!(a.category_latents.iter().all(unit));
        assert!(a.users.iter().all(|u| unit(&u.latent)));
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            WorldConfig { n_users: 0, ..small() },
            WorldConfig { latent_dim: 1, ..small() },
            WorldConfig { n_keywords: 5, ..small() },
            WorldConfig { sps_per_ad: 30, ..small() },
        ] {
            assert!(generate_world(&cfg).is_err());
        }
    }

    #[test]
    fn keywords_cluster_by_category() {
        let w = generate_world(&small()).unwrap();
        let mut rng = substream(0, "mc");
        let (mut same, mut cross) = (0.0, 0.0);
        let n = 5000;
        for _ in 0..n {
            let a = rng.gen_range(0..w.keyword_latents.len());
            let b = rng.gen_range(0..w.keyword_latents.len());
            let c = w.keyword_categories[a];
            let pool = &w.cache.keywords_by_category[c];
            let s = *pool.choose(&mut rng).unwrap() as usize;
            same += dot(&w.keyword_latents[a], &w.keyword_latents[s]);
            cross += dot(&w.keyword_latents[a], &w.keyword_latents[b]);
        }
        assert!(same / n as f64 > cross / n as f64 + 0.3);
    }

    #[test]
    fn attraction_closed_forms() {
        assert_eq!(attraction_probability(0.0, 0.7, &[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]), sigmoid(0.7));
        assert_eq!(attraction_probability(4.0, 0.0, &[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]), 0.5);
        // (u+q)·s = (0.6+0.8, 0.8+0.6)·(0.5, 0.5) = 1.4
        let p = attraction_probability(2.0, -1.0, &[0.6, 0.8], &[0.8, 0.6], &[0.5, 0.5]);
        assert!((p - 1.0 / (1.0 + (-1.8f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn foreign_entities_rejected() {
        let w = generate_world(&small()).unwrap();
        let q = Query {
            keywords: KeywordSet::new(vec![1]),
            feature_groups: Default::default(),
        };
        let sp = KeywordSet::new(vec![2]);
        assert!(w.oracle_attraction(0, &q, &sp).is_ok());
        assert!(matches!(w.oracle_attraction(10_000, &q, &sp), Err(Error::ForeignEntity(_))));
        assert!(w.oracle_attraction(0, &q, &KeywordSet::new(vec![99_999])).is_err());
    }

    #[test]
    fn sf_inventory_is_strict_subset() {
        let w = generate_world(&small()).unwrap();
        let sf = w.phrases.iter().filter(|p| p.is_sf).count();
        assert!(sf > 0 && sf < w.phrases.len());
        let imps = w.generate_sf_impressions(50, &mut substream(0, "x")).unwrap();
        for imp in &imps {
            assert_eq!(imp.shown.len(), w.config.sf_per_impression);
            for s in &imp.shown {
                assert!(w.phrases.iter().any(|p| p.is_sf && &p.keywords == s));
            }
        }
    }

    #[test]
    fn sf_click_rate_matches_oracle_mean() {
        let w = generate_world(&small()).unwrap();
        let imps = w.generate_sf_impressions(10_000, &mut substream(3, "sf")).unwrap();
        let (mut clicks, mut mean, mut n) = (0.0, 0.0, 0.0);
        for imp in &imps {
            for (s, &c) in imp.shown.iter().zip(&imp.clicked) {
                mean += w.oracle_attraction(imp.user.user_id, &imp.query, s).unwrap();
                clicks += f64::from(u8::from(c));
                n += 1.0;
            }
        }
        assert!(n >= 100_000.0);
        assert!((clicks / n - mean / n).abs() <= 0.02);
    }

    #[test]
    fn high_temperature_clicks_follow_sign() {
        let w = generate_world(&WorldConfig {
            click_temperature: 50.0,
            click_bias: 0.0,
            ..small()
        })
        .unwrap();
        let imps = w.generate_sf_impressions(1000, &mut substream(0, "sf")).unwrap();
        let (mut agree, mut n) = (0, 0);
        for imp in &imps {
            let u = &w.users[imp.user.user_id as usize].latent;
            let q = w.query_latent(&imp.query).unwrap();
            for (s, &c) in imp.shown.iter().zip(&imp.clicked) {
                let sl = w.mean_latent(s.ids()).unwrap();
                let a: f64 = u.iter().zip(&q).zip(&sl).map(|((u, q), s)| (u + q) * s).sum();
                agree += usize::from((a > 0.0) == c);
                n += 1;
            }
        }
        assert!(agree as f64 / n as f64 >= 0.97, "{agree}/{n}");
    }

    #[test]
    fn session_click_rate_without_damping() {
        let w = generate_world(&WorldConfig {
            sps_per_ad: 1,
            ad_click_scale: 1.0,
            position_decay: 1.0,
            ..small()
        })
        .unwrap();
        let sessions = w.generate_ad_sessions(5000, &mut substream(1, "ad")).unwrap();
        let (mut clicks, mut mean, mut n) = (0.0, 0.0, 0.0);
        for s in &sessions {
            for (ad, &c) in s.ads.iter().zip(&s.clicked) {
                mean += w.oracle_attraction(s.user.user_id, &s.query, &ad.sp_candidates[0]).unwrap();
                clicks += f64::from(u8::from(c));
                n += 1.0;
            }
            // sessions keep distinct ads in display order
            let ids: Vec<u32> = s.ads.iter().map(|a| a.ad_id).collect();
            let mut dedup = ids.clone();
            dedup.sort();
            dedup.dedup();
            assert_eq!(dedup.len(), ids.len());
        }
        assert!((clicks / n - mean / n).abs() <= 0.02);
    }

    #[test]
    fn unattractive_ads_rarely_clicked() {
        let w = generate_world(&WorldConfig {
            click_bias: -20.0,
            ..small()
        })
        .unwrap();
        let sessions = w.generate_ad_sessions(500, &mut substream(1, "ad")).unwrap();
        let n: usize = sessions.iter().map(|s| s.ads.len()).sum();
        let clicks: usize = sessions.iter().map(|s| s.clicked.iter().filter(|&&c| c).count()).sum();
        assert!(n >= 10_000);
        assert!(clicks as f64 / n as f64 <= 0.01);
    }

    #[test]
    fn json_round_trip() {
        let w = generate_world(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("world.json");
        w.save(&path).unwrap();
        let back = World::load(&path).unwrap();
        assert_eq!(w, back);
        let q = w.sample_query(3, &mut substream(0, "q")).unwrap().0;
        let sp = &w.phrases[0].keywords;
        assert_eq!(
            w.oracle_attraction(3, &q, sp).unwrap(),
            back.oracle_attraction(3, &q, sp).unwrap()
        );
    }

    #[test]
    fn user_features_follow_schema() {
        let w = generate_world(&small()).unwrap();
        for u in 0..10 {
            let repr = w.user(u).unwrap();
            assert_eq!(repr.feature_groups.active("profile").len(), 2);
            assert!(!repr.feature_groups.active("preference").is_empty());
            assert!(repr.long_term_keywords.len() <= 10);
        }
    }
}
