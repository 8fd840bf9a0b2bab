//! Vocabulary, multi-hot and multi-group multi-hot encodings, user
//! representation, and the JSON-Lines record formats for SF and AD data.
//!
//! Only numeric ids appear in instance records; keyword strings live in the
//! vocabulary file.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type KeywordId = u32;
pub type Timestamp = i64;

pub const MAX_INTEREST_KEYWORDS: usize = 10;
pub const LONG_TERM_WINDOW_SECS: Timestamp = 30 * 24 * 3600;
pub const SHORT_TERM_WINDOW_SECS: Timestamp = 7 * 24 * 3600;

/// Bijective keyword ↔ id map; ids are dense and follow first appearance.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    terms: Vec<String>,
    index: HashMap<String, KeywordId>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.terms == other.terms
    }
}

impl Vocabulary {
    pub fn build<I, L, S>(keyword_lists: I) -> Result<Self>
    where
        I: IntoIterator<Item = L>,
        L: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocabulary::default();
        for list in keyword_lists {
            for term in list {
                vocab.insert(term.as_ref());
            }
        }
        if vocab.terms.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(vocab)
    }

    pub fn from_terms(terms: Vec<String>) -> Result<Self> {
        let len = terms.len();
        let vocab = Vocabulary::build([terms])?;
        if vocab.len() != len {
            return Err(Error::InvalidConfig("duplicate vocabulary terms".into()));
        }
        Ok(vocab)
    }

    fn insert(&mut self, term: &str) -> KeywordId {
        if let Some(&id) = self.index.get(term) {
            return id;
        }
        let id = self.terms.len() as KeywordId;
        self.terms.push(term.to_owned());
        self.index.insert(term.to_owned(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn lookup(&self, term: &str) -> Option<KeywordId> {
        self.index.get(term).copied()
    }

    pub fn term(&self, id: KeywordId) -> Option<&str> {
        self.terms.get(id as usize).map(String::as_str)
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    /// SHA-256 over the ordered term list, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for term in &self.terms {
            hasher.update((term.len() as u64).to_le_bytes());
            hasher.update(term.as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let records = self.terms.iter().enumerate().map(|(id, term)| VocabRecord {
            id: id as KeywordId,
            term: term.clone(),
        });
        write_jsonl(path, records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<VocabRecord> = read_jsonl(path)?;
        let mut terms = Vec::with_capacity(records.len());
        for (line, rec) in records.into_iter().enumerate() {
            if rec.id as usize != line {
                return Err(Error::Parse {
                    path: path.to_owned(),
                    line: line + 1,
                    message: format!("expected id {line}, found {}", rec.id),
                });
            }
            terms.push(rec.term);
        }
        Vocabulary::from_terms(terms)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabRecord {
    id: KeywordId,
    term: String,
}

/// A sorted, duplicate-free set of keyword ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeywordSet(Vec<KeywordId>);

impl KeywordSet {
    pub fn new(mut ids: Vec<KeywordId>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        KeywordSet(ids)
    }

    pub fn ids(&self) -> &[KeywordId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn union(&self, other: &KeywordSet) -> KeywordSet {
        KeywordSet::new(self.0.iter().chain(&other.0).copied().collect())
    }
}

impl FromIterator<KeywordId> for KeywordSet {
    fn from_iter<T: IntoIterator<Item = KeywordId>>(iter: T) -> Self {
        KeywordSet::new(iter.into_iter().collect())
    }
}

/// Maps keyword strings to their id set; out-of-vocabulary terms are dropped.
pub fn encode_multi_hot<S: AsRef<str>>(keywords: &[S], vocab: &Vocabulary) -> Result<KeywordSet> {
    let set: KeywordSet = keywords
        .iter()
        .filter_map(|k| vocab.lookup(k.as_ref()))
        .collect();
    if set.is_empty() {
        return Err(Error::NoEncodableKeywords);
    }
    Ok(set)
}

/// One product click: when it happened and the clicked title's keywords.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Click {
    pub timestamp: Timestamp,
    pub keywords: Vec<KeywordId>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UserRepr {
    pub user_id: u32,
    pub long_term_keywords: Vec<KeywordId>,
    pub short_term_keywords: Vec<KeywordId>,
    pub feature_groups: FeatureGroups,
}

impl UserRepr {
    /// Long- and short-term keywords merged into the single pooled channel.
    pub fn keyword_bag(&self) -> KeywordSet {
        self.long_term_keywords
            .iter()
            .chain(&self.short_term_keywords)
            .copied()
            .collect()
    }
}

/// Long-term (one month) and short-term (one week) top-10 keywords.
pub fn build_user_repr(user_id: u32, click_history: &[Click], now: Timestamp) -> UserRepr {
    UserRepr {
        user_id,
        long_term_keywords: top_keywords(click_history, now, LONG_TERM_WINDOW_SECS),
        short_term_keywords: top_keywords(click_history, now, SHORT_TERM_WINDOW_SECS),
        feature_groups: FeatureGroups::default(),
    }
}

fn top_keywords(history: &[Click], now: Timestamp, window: Timestamp) -> Vec<KeywordId> {
    let mut in_window: Vec<&Click> = history
        .iter()
        .filter(|c| c.timestamp <= now && now - c.timestamp <= window)
        .collect();
    in_window.sort_by_key(|c| c.timestamp);

    // keyword -> (count, first occurrence rank)
    let mut stats: HashMap<KeywordId, (usize, usize)> = HashMap::new();
    let mut order = 0;
    for click in in_window {
        for &k in &click.keywords {
            let entry = stats.entry(k).or_insert((0, order));
            entry.0 += 1;
            order += 1;
        }
    }
    let mut ranked: Vec<(KeywordId, usize, usize)> =
        stats.into_iter().map(|(k, (n, first))| (k, n, first)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)).then(a.0.cmp(&b.0)));
    ranked
        .into_iter()
        .take(MAX_INTEREST_KEYWORDS)
        .map(|(k, _, _)| k)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Categorical,
    BagOfWords,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldDef {
    pub name: String,
    pub cardinality: u32,
    pub kind: FieldKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Entity {
    User,
    Query,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupDef {
    pub name: String,
    pub entity: Entity,
    pub fields: Vec<FieldDef>,
}

impl GroupDef {
    pub fn cardinality(&self) -> u32 {
        self.fields.iter().map(|f| f.cardinality).sum()
    }

    /// Local offset of a field within the group's concatenated index space.
    fn field_offset(&self, name: &str) -> Option<(u32, &FieldDef)> {
        let mut offset = 0;
        for f in &self.fields {
            if f.name == name {
                return Some((offset, f));
            }
            offset += f.cardinality;
        }
        None
    }
}

/// Declaration of the additional feature groups, in concatenation order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub groups: Vec<GroupDef>,
}

impl FeatureSchema {
    pub fn new(groups: Vec<GroupDef>) -> Result<Self> {
        let schema = FeatureSchema { groups };
        schema.validate()?;
        Ok(schema)
    }

    pub fn empty() -> Self {
        FeatureSchema::default()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for g in &self.groups {
            if !names.insert(g.name.as_str()) {
                return Err(Error::InvalidSchema(format!("duplicate name `{}`", g.name)));
            }
            if g.fields.is_empty() {
                return Err(Error::InvalidSchema(format!("group `{}` has no fields", g.name)));
            }
        }
        let mut fields = HashSet::new();
        for f in self.groups.iter().flat_map(|g| &g.fields) {
            if f.cardinality == 0 {
                return Err(Error::InvalidSchema(format!(
                    "field `{}` has zero cardinality",
                    f.name
                )));
            }
            if !fields.insert(f.name.as_str()) {
                return Err(Error::InvalidSchema(format!("duplicate name `{}`", f.name)));
            }
        }
        Ok(())
    }

    pub fn group(&self, name: &str) -> Option<&GroupDef> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Groups of one entity, in schema order.
    pub fn groups_of(&self, entity: Entity) -> impl Iterator<Item = &GroupDef> {
        self.groups.iter().filter(move |g| g.entity == entity)
    }

    /// User groups then query groups, each in schema order.
    pub fn concat_order(&self) -> Vec<&GroupDef> {
        self.groups_of(Entity::User)
            .chain(self.groups_of(Entity::Query))
            .collect()
    }

    /// The sub-schema containing only the named groups (schema order kept).
    pub fn restrict<S: AsRef<str>>(&self, names: &[S]) -> Result<FeatureSchema> {
        for n in names {
            if self.group(n.as_ref()).is_none() {
                return Err(Error::UnknownFeature(n.as_ref().to_owned()));
            }
        }
        Ok(FeatureSchema {
            groups: self
                .groups
                .iter()
                .filter(|g| names.iter().any(|n| n.as_ref() == g.name))
                .cloned()
                .collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: FeatureSchema = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// A categorical value or a bag of values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    One(u32),
    Many(Vec<u32>),
}

/// `{group: {field: value(s)}}` as stored on disk.
pub type RawFeatures = BTreeMap<String, BTreeMap<String, FeatureValue>>;

/// Per-group active ids, local to each group's concatenated index space.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FeatureGroups(BTreeMap<String, Vec<u32>>);

impl FeatureGroups {
    /// Active ids of a group; absent groups are empty.
    pub fn active(&self, group: &str) -> &[u32] {
        self.0.get(group).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_empty(&self) -> bool {
        self.0.values().all(Vec::is_empty)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[u32])> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

pub fn encode_feature_groups(features: &RawFeatures, schema: &FeatureSchema) -> Result<FeatureGroups> {
    let mut out = BTreeMap::new();
    for (group_name, fields) in features {
        let group = schema
            .group(group_name)
            .ok_or_else(|| Error::UnknownFeature(group_name.clone()))?;
        let mut active = Vec::new();
        for (field_name, value) in fields {
            let (offset, def) = group
                .field_offset(field_name)
                .ok_or_else(|| Error::UnknownFeature(format!("{group_name}.{field_name}")))?;
            let values: &[u32] = match (value, def.kind) {
                (FeatureValue::One(v), _) => std::slice::from_ref(v),
                (FeatureValue::Many(vs), FieldKind::BagOfWords) => vs,
                (FeatureValue::Many(vs), FieldKind::Categorical) if vs.len() <= 1 => vs,
                (FeatureValue::Many(_), FieldKind::Categorical) => {
                    return Err(Error::ExpectedSingleValue(field_name.clone()))
                }
            };
            for &v in values {
                if v >= def.cardinality {
                    return Err(Error::FeatureOutOfRange {
                        field: field_name.clone(),
                        value: v,
                        cardinality: def.cardinality,
                    });
                }
                active.push(offset + v);
            }
        }
        active.sort_unstable();
        active.dedup();
        out.insert(group_name.clone(), active);
    }
    Ok(FeatureGroups(out))
}

/// Inverse of [`encode_feature_groups`] up to value ordering.
pub fn decode_feature_groups(groups: &FeatureGroups, schema: &FeatureSchema) -> Result<RawFeatures> {
    let mut out = RawFeatures::new();
    for (group_name, active) in groups.iter() {
        let group = schema
            .group(group_name)
            .ok_or_else(|| Error::UnknownFeature(group_name.to_owned()))?;
        let mut fields: BTreeMap<String, FeatureValue> = BTreeMap::new();
        for &id in active {
            let mut offset = 0;
            let mut found = false;
            for f in &group.fields {
                if id < offset + f.cardinality {
                    let v = id - offset;
                    match f.kind {
                        FieldKind::Categorical => {
                            fields.insert(f.name.clone(), FeatureValue::One(v));
                        }
                        FieldKind::BagOfWords => {
                            let entry = fields
                                .entry(f.name.clone())
                                .or_insert_with(|| FeatureValue::Many(Vec::new()));
                            if let FeatureValue::Many(vs) = entry {
                                vs.push(v);
                            }
                        }
                    }
                    found = true;
                    break;
                }
                offset += f.cardinality;
            }
            if !found {
                return Err(Error::SchemaMismatch(format!(
                    "id {id} outside group `{group_name}`"
                )));
            }
        }
        out.insert(group_name.to_owned(), fields);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Query {
    pub keywords: KeywordSet,
    /// Query-side groups (the query category).
    pub feature_groups: FeatureGroups,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ad {
    pub ad_id: u32,
    pub title_keywords: Vec<KeywordId>,
    pub sp_candidates: Vec<KeywordSet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfInstance {
    pub user: Arc<UserRepr>,
    pub query: Arc<Query>,
    pub sf: KeywordSet,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdInstance {
    pub user: Arc<UserRepr>,
    pub query: Arc<Query>,
    pub ad: Arc<Ad>,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserRecord {
    pub id: u32,
    pub long: Vec<KeywordId>,
    pub short: Vec<KeywordId>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub features: RawFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub keywords: Vec<KeywordId>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub features: RawFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdRecord {
    pub ad_id: u32,
    pub title: Vec<KeywordId>,
    pub sps: Vec<Vec<KeywordId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SfRecord {
    pub user: UserRecord,
    pub query: QueryRecord,
    pub sf: Vec<KeywordId>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdInstanceRecord {
    pub user: UserRecord,
    pub query: QueryRecord,
    pub ad: AdRecord,
    pub label: u8,
}

fn parse_label(label: u8) -> Result<bool> {
    match label {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(Error::InvalidConfig(format!("label {other} is not binary"))),
    }
}

impl UserRecord {
    pub fn to_repr(&self, schema: &FeatureSchema) -> Result<UserRepr> {
        if self.long.len() > MAX_INTEREST_KEYWORDS || self.short.len() > MAX_INTEREST_KEYWORDS {
            return Err(Error::InvalidConfig(format!(
                "user {} has more than {MAX_INTEREST_KEYWORDS} interest keywords",
                self.id
            )));
        }
        Ok(UserRepr {
            user_id: self.id,
            long_term_keywords: self.long.clone(),
            short_term_keywords: self.short.clone(),
            feature_groups: encode_feature_groups(&self.features, schema)?,
        })
    }

    pub fn from_repr(user: &UserRepr, schema: &FeatureSchema) -> Result<Self> {
        Ok(UserRecord {
            id: user.user_id,
            long: user.long_term_keywords.clone(),
            short: user.short_term_keywords.clone(),
            features: decode_feature_groups(&user.feature_groups, schema)?,
        })
    }
}

impl QueryRecord {
    pub fn to_query(&self, schema: &FeatureSchema) -> Result<Query> {
        let keywords = KeywordSet::new(self.keywords.clone());
        if keywords.is_empty() {
            return Err(Error::EmptyInput("query keywords"));
        }
        Ok(Query {
            keywords,
            feature_groups: encode_feature_groups(&self.features, schema)?,
        })
    }

    pub fn from_query(query: &Query, schema: &FeatureSchema) -> Result<Self> {
        Ok(QueryRecord {
            keywords: query.keywords.ids().to_vec(),
            features: decode_feature_groups(&query.feature_groups, schema)?,
        })
    }
}

impl AdRecord {
    pub fn to_ad(&self) -> Result<Ad> {
        if self.title.is_empty() {
            return Err(Error::EmptyInput("ad title"));
        }
        if self.sps.is_empty() || self.sps.iter().any(Vec::is_empty) {
            return Err(Error::EmptyInput("ad selling points"));
        }
        Ok(Ad {
            ad_id: self.ad_id,
            title_keywords: self.title.clone(),
            sp_candidates: self.sps.iter().map(|s| KeywordSet::new(s.clone())).collect(),
        })
    }

    pub fn from_ad(ad: &Ad) -> Self {
        AdRecord {
            ad_id: ad.ad_id,
            title: ad.title_keywords.clone(),
            sps: ad.sp_candidates.iter().map(|s| s.ids().to_vec()).collect(),
        }
    }
}

impl SfInstance {
    pub fn from_record(rec: &SfRecord, schema: &FeatureSchema) -> Result<Self> {
        let sf = KeywordSet::new(rec.sf.clone());
        if sf.is_empty() {
            return Err(Error::EmptyInput("sf keywords"));
        }
        Ok(SfInstance {
            user: Arc::new(rec.user.to_repr(schema)?),
            query: Arc::new(rec.query.to_query(schema)?),
            sf,
            label: parse_label(rec.label)?,
        })
    }

    pub fn to_record(&self, schema: &FeatureSchema) -> Result<SfRecord> {
        Ok(SfRecord {
            user: UserRecord::from_repr(&self.user, schema)?,
            query: QueryRecord::from_query(&self.query, schema)?,
            sf: self.sf.ids().to_vec(),
            label: u8::from(self.label),
        })
    }
}

impl AdInstance {
    pub fn from_record(rec: &AdInstanceRecord, schema: &FeatureSchema) -> Result<Self> {
        Ok(AdInstance {
            user: Arc::new(rec.user.to_repr(schema)?),
            query: Arc::new(rec.query.to_query(schema)?),
            ad: Arc::new(rec.ad.to_ad()?),
            label: parse_label(rec.label)?,
        })
    }

    pub fn to_record(&self, schema: &FeatureSchema) -> Result<AdInstanceRecord> {
        Ok(AdInstanceRecord {
            user: UserRecord::from_repr(&self.user, schema)?,
            query: QueryRecord::from_query(&self.query, schema)?,
            ad: AdRecord::from_ad(&self.ad),
            label: u8::from(self.label),
        })
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_sf_instances(path: &Path, schema: &FeatureSchema) -> Result<Vec<SfInstance>> {
    let records: Vec<SfRecord> = read_jsonl(path)?;
    records
        .iter()
        .map(|r| SfInstance::from_record(r, schema))
        .collect()
}

pub fn load_ad_instances(path: &Path, schema: &FeatureSchema) -> Result<Vec<AdInstance>> {
    let records: Vec<AdInstanceRecord> = read_jsonl(path)?;
    records
        .iter()
        .map(|r| AdInstance::from_record(r, schema))
        .collect()
}
