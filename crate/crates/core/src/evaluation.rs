//! Offline metrics and the simulated A/B test.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{Ad, KeywordSet, Query, SfInstance, UserRepr};
use crate::error::{Error, Result};
use crate::network::{predict_sp_scores, Model};
use crate::world::World;

/// Area under the ROC curve with ties credited one half.
///
/// Uses doubled midranks so the whole computation stays in integers until the
/// final division.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidConfig("AUC scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share the midrank (i+1+j)/2
        let doubled_midrank = (i + 1 + j) as u128;
        let positives = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        doubled_rank_sum += doubled_midrank * positives;
        i = j;
    }
    let doubled_u = doubled_rank_sum - n_pos * (n_pos + 1);
    Ok(doubled_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Click/miss counts of two arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub clicks_a: u64,
    pub misses_a: u64,
    pub clicks_b: u64,
    pub misses_b: u64,
}

impl ContingencyTable {
    pub fn new(clicks_a: u64, misses_a: u64, clicks_b: u64, misses_b: u64) -> Self {
        ContingencyTable {
            clicks_a,
            misses_a,
            clicks_b,
            misses_b,
        }
    }

    pub fn total(&self) -> u64 {
        self.clicks_a + self.misses_a + self.clicks_b + self.misses_b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    #[default]
    TwoSided,
    /// Arm A has the higher click odds.
    Greater,
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisherOutcome {
    pub p_value: f64,
    /// Set when a margin is zero and the test is uninformative.
    pub degenerate: bool,
}

/// Relative slack when comparing point probabilities with the observed one.
pub const FISHER_TIE_SLACK: f64 = 1e-12;

/// Fisher's exact test via enumeration of the hypergeometric distribution of
/// `clicks_a` given all margins.
pub fn fisher_exact(table: &ContingencyTable, alternative: Alternative) -> FisherOutcome {
    let row_a = table.clicks_a + table.misses_a;
    let row_b = table.clicks_b + table.misses_b;
    let col_clicks = table.clicks_a + table.clicks_b;
    let col_misses = table.misses_a + table.misses_b;
    if row_a == 0 || row_b == 0 || col_clicks == 0 || col_misses == 0 {
        return FisherOutcome {
            p_value: 1.0,
            degenerate: true,
        };
    }
    let lo = col_clicks.saturating_sub(row_b);
    let hi = row_a.min(col_clicks);
    // log point weights relative to x = lo via the ratio recurrence
    // P(x+1)/P(x) = (row_a-x)(col_clicks-x) / ((x+1)(row_b-col_clicks+x+1))
    let mut log_w = Vec::with_capacity((hi - lo + 1) as usize);
    let mut w = 0.0;
    log_w.push(w);
    for x in lo..hi {
        let num = ((row_a - x) as f64).ln() + ((col_clicks - x) as f64).ln();
        let den = ((x + 1) as f64).ln() + ((row_b + x + 1 - col_clicks) as f64).ln();
        w += num - den;
        log_w.push(w);
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let obs = (table.clicks_a - lo) as usize;
    let tail: f64 = match alternative {
        Alternative::TwoSided => {
            let bound = log_w[obs] + FISHER_TIE_SLACK.ln_1p();
            log_w
                .iter()
                .zip(&weights)
                .filter(|(l, _)| **l <= bound)
                .map(|(_, w)| w)
                .sum()
        }
        Alternative::Greater => weights[obs..].iter().sum(),
        Alternative::Less => weights[..=obs].iter().sum(),
    };
    FisherOutcome {
        p_value: (tail / total).min(1.0),
        degenerate: false,
    }
}

/// Two-sided Fisher p-value.
pub fn fisher_exact_p(table: &ContingencyTable) -> f64 {
    fisher_exact(table, Alternative::TwoSided).p_value
}

/// Positive-label counts per user.
pub fn click_counts<'a>(pairs: impl IntoIterator<Item = (u32, bool)> + 'a) -> BTreeMap<u32, usize> {
    let mut out = BTreeMap::new();
    for (user, label) in pairs {
        let e = out.entry(user).or_insert(0);
        if label {
            *e += 1;
        }
    }
    out
}

fn median(values: &[usize]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m] as f64
    } else {
        (v[m - 1] + v[m]) as f64 / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UserGroup {
    pub main_rich: bool,
    pub aux_rich: bool,
}

impl UserGroup {
    pub const ALL: [UserGroup; 4] = [
        UserGroup {
            main_rich: false,
            aux_rich: false,
        },
        UserGroup {
            main_rich: false,
            aux_rich: true,
        },
        UserGroup {
            main_rich: true,
            aux_rich: false,
        },
        UserGroup {
            main_rich: true,
            aux_rich: true,
        },
    ];

    pub fn label(&self, main_median: f64, aux_median: f64) -> String {
        let side = |rich: bool, m: f64| if rich { format!(">{m}") } else { format!("<={m}") };
        format!(
            "main{} aux{}",
            side(self.main_rich, main_median),
            side(self.aux_rich, aux_median)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRow {
    pub group: UserGroup,
    pub label: String,
    pub instances: usize,
    /// One AUC per model; `None` when the group's labels are single-class.
    pub aucs: Vec<Option<f64>>,
    /// Relative gain of the last model over the first.
    pub gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupTable {
    pub models: Vec<String>,
    pub main_median: f64,
    pub aux_median: f64,
    pub rows: Vec<GroupRow>,
}

/// Per-group AUC of several models, grouping test users by whether their
/// training click counts exceed the per-task medians. Users absent from a
/// count map have zero clicks in that task.
pub fn group_analysis(
    test: &[SfInstance],
    scores_by_model: &[(String, Vec<f64>)],
    main_clicks: &BTreeMap<u32, usize>,
    aux_clicks: &BTreeMap<u32, usize>,
) -> Result<GroupTable> {
    for (_, s) in scores_by_model {
        if s.len() != test.len() {
            return Err(Error::ShapeMismatch {
                expected: test.len(),
                actual: s.len(),
            });
        }
    }
    let main_median = median(&main_clicks.values().copied().collect::<Vec<_>>());
    let aux_median = median(&aux_clicks.values().copied().collect::<Vec<_>>());
    let group_of = |user: u32| UserGroup {
        main_rich: *main_clicks.get(&user).unwrap_or(&0) as f64 > main_median,
        aux_rich: *aux_clicks.get(&user).unwrap_or(&0) as f64 > aux_median,
    };
    let mut members: BTreeMap<UserGroup, Vec<usize>> = BTreeMap::new();
    for (i, x) in test.iter().enumerate() {
        members.entry(group_of(x.user.user_id)).or_default().push(i);
    }
    let rows = UserGroup::ALL
        .iter()
        .map(|&group| {
            let idx = members.get(&group).map(Vec::as_slice).unwrap_or(&[]);
            let labels: Vec<bool> = idx.iter().map(|&i| test[i].label).collect();
            let aucs: Vec<Option<f64>> = scores_by_model
                .iter()
                .map(|(_, s)| {
                    let sub: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
                    auc(&sub, &labels).ok()
                })
                .collect();
            let gain = match (aucs.first(), aucs.last()) {
                (Some(Some(base)), Some(Some(last))) if aucs.len() > 1 => Some((last - base) / base),
                _ => None,
            };
            GroupRow {
                group,
                label: group.label(main_median, aux_median),
                instances: idx.len(),
                aucs,
                gain,
            }
        })
        .collect();
    Ok(GroupTable {
        models: scores_by_model.iter().map(|(n, _)| n.clone()).collect(),
        main_median,
        aux_median,
        rows,
    })
}

fn fmt_opt(v: Option<f64>, pct: bool) -> String {
    match v {
        Some(x) if pct => format!("{:+.2}%", 100.0 * x),
        Some(x) => format!("{x:.4}"),
        None => "n/a".into(),
    }
}

impl GroupTable {
    /// The group with the largest defined gain.
    pub fn best_gain_group(&self) -> Option<UserGroup> {
        self.rows
            .iter()
            .filter_map(|r| r.gain.map(|g| (r.group, g)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(g, _)| g)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "median main clicks = {}, median aux clicks = {}\n",
            self.main_median, self.aux_median
        );
        let _ = write!(s, "{:<24}{:>10}", "group", "instances");
        for m in &self.models {
            let _ = write!(s, "{m:>14}");
        }
        s.push_str(&format!("{:>10}\n", "gain"));
        for r in &self.rows {
            let _ = write!(s, "{:<24}{:>10}", r.label, r.instances);
            for a in &r.aucs {
                let _ = write!(s, "{:>14}", fmt_opt(*a, false));
            }
            let _ = writeln!(s, "{:>10}", fmt_opt(r.gain, true));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,instances");
        for m in &self.models {
            let _ = write!(s, ",auc_{m}");
        }
        s.push_str(",gain\n");
        for r in &self.rows {
            let _ = write!(s, "{},{}", r.label, r.instances);
            for a in &r.aucs {
                let _ = write!(s, ",{}", a.map(|x| x.to_string()).unwrap_or_else(|| "n/a".into()));
            }
            let _ = writeln!(s, ",{}", r.gain.map(|x| x.to_string()).unwrap_or_else(|| "n/a".into()));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub groups: Vec<String>,
    pub auc: f64,
    /// Absolute AUC difference to the no-feature baseline.
    pub gain: f64,
}

impl AblationRow {
    pub fn label(&self) -> String {
        if self.groups.is_empty() {
            "baseline".into()
        } else {
            self.groups.join("+")
        }
    }
}

/// Formats ablation results one row per subset, baseline first.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<40}{:>10}{:>10}\n", "features", "auc", "gain");
    for r in rows {
        let _ = writeln!(s, "{:<40}{:>10.4}{:>+10.4}", r.label(), r.auc, r.gain);
    }
    s
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("features,auc,gain\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.label(), r.auc, r.gain);
    }
    s
}

/// Chooses which SPs an ad displays.
pub trait Policy {
    fn name(&self) -> String;
    fn choose(&mut self, user: &UserRepr, query: &Query, ad: &Ad) -> Result<Vec<KeywordSet>>;
}

/// `k` distinct SPs uniformly at random.
pub struct RandomPolicy {
    pub k: usize,
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(k: usize, rng: ChaCha8Rng) -> Self {
        RandomPolicy { k, rng }
    }
}

impl Policy for RandomPolicy {
    fn name(&self) -> String {
        format!("random-{}", self.k)
    }

    fn choose(&mut self, _: &UserRepr, _: &Query, ad: &Ad) -> Result<Vec<KeywordSet>> {
        Ok(ad
            .sp_candidates
            .choose_multiple(&mut self.rng, self.k)
            .cloned()
            .collect())
    }
}

fn top_k_by(scores: &[f64], candidates: &[KeywordSet], k: usize) -> Vec<KeywordSet> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.into_iter().take(k).map(|i| candidates[i].clone()).collect()
}

/// The `k` SPs with the highest ground-truth attraction.
pub struct OraclePolicy<'w> {
    pub world: &'w World,
    pub k: usize,
}

impl Policy for OraclePolicy<'_> {
    fn name(&self) -> String {
        format!("oracle-top-{}", self.k)
    }

    fn choose(&mut self, user: &UserRepr, query: &Query, ad: &Ad) -> Result<Vec<KeywordSet>> {
        let scores = ad
            .sp_candidates
            .iter()
            .map(|sp| self.world.oracle_attraction(user.user_id, query, sp))
            .collect::<Result<Vec<_>>>()?;
        Ok(top_k_by(&scores, &ad.sp_candidates, self.k))
    }
}

/// The `k` SPs the model scores highest.
pub struct ModelPolicy<'m> {
    pub model: &'m Model,
    pub k: usize,
}

impl Policy for ModelPolicy<'_> {
    fn name(&self) -> String {
        format!("model-top-{}", self.k)
    }

    fn choose(&mut self, user: &UserRepr, query: &Query, ad: &Ad) -> Result<Vec<KeywordSet>> {
        let scores = predict_sp_scores(self.model, user, query, &ad.sp_candidates)?;
        Ok(top_k_by(&scores, &ad.sp_candidates, self.k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AbOutcome {
    pub control: String,
    pub treatment: String,
    pub impressions_control: u64,
    pub impressions_treatment: u64,
    pub ctr_control: f64,
    pub ctr_treatment: f64,
    pub relative_change: f64,
    pub p_value: f64,
    pub table: ContingencyTable,
}

impl AbOutcome {
    pub fn to_text(&self) -> String {
        let t = &self.table;
        format!(
            "arm        policy            clicks     misses        ctr\n\
             control    {:<16}{:>8}{:>11}{:>11.5}\n\
             treatment  {:<16}{:>8}{:>11}{:>11.5}\n\
             relative CTR change {:+.3}%  fisher p = {:.3e}\n",
            self.control,
            t.clicks_a,
            t.misses_a,
            self.ctr_control,
            self.treatment,
            t.clicks_b,
            t.misses_b,
            self.ctr_treatment,
            100.0 * self.relative_change,
            self.p_value
        )
    }

    pub fn to_csv(&self) -> String {
        let t = &self.table;
        format!(
            "control,treatment,clicks_control,misses_control,clicks_treatment,misses_treatment,ctr_control,ctr_treatment,relative_change,p_value\n\
             {},{},{},{},{},{},{},{},{},{}\n",
            self.control,
            self.treatment,
            t.clicks_a,
            t.misses_a,
            t.clicks_b,
            t.misses_b,
            self.ctr_control,
            self.ctr_treatment,
            self.relative_change,
            self.p_value
        )
    }
}

/// Below this many impressions the simulated test is considered underpowered.
pub const AB_MIN_IMPRESSIONS: usize = 1000;

/// Simulates an A/B test of two SP-display policies.
///
/// Impressions alternate between control (even index) and treatment (odd).
/// Each consecutive pair shares its context (user, query, ad, position) and
/// its click uniform, so the arms differ only through the policies; swapping
/// the policies mirrors the outcome exactly.
pub fn ab_simulate(
    control: &mut dyn Policy,
    treatment: &mut dyn Policy,
    world: &World,
    n_impressions: usize,
    rng: &mut ChaCha8Rng,
) -> Result<AbOutcome> {
    if n_impressions < AB_MIN_IMPRESSIONS {
        warn!("A/B simulation with {n_impressions} impressions is underpowered");
    }
    let mut table = ContingencyTable::new(0, 0, 0, 0);
    let n_ads = world.ads().len();
    let positions = world.config.session_length;
    let mut i = 0;
    while i < n_impressions {
        let user_id = rng.gen_range(0..world.users.len() as u32);
        let user: Arc<UserRepr> = world.user(user_id)?.clone();
        let (query, _) = world.sample_query(user_id, rng)?;
        let ad = world.ads()[rng.gen_range(0..n_ads)].clone();
        let position = rng.gen_range(0..positions);
        let u: f64 = rng.gen();

        let shown = control.choose(&user, &query, &ad)?;
        let click = u < world.ad_click_probability(user_id, &query, &shown, position)?;
        if click {
            table.clicks_a += 1;
        } else {
            table.misses_a += 1;
        }
        i += 1;
        if i == n_impressions {
            break;
        }
        let shown = treatment.choose(&user, &query, &ad)?;
        let click = u < world.ad_click_probability(user_id, &query, &shown, position)?;
        if click {
            table.clicks_b += 1;
        } else {
            table.misses_b += 1;
        }
        i += 1;
    }
    let n_c = table.clicks_a + table.misses_a;
    let n_t = table.clicks_b + table.misses_b;
    let ctr = |c: u64, n: u64| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    let ctr_control = ctr(table.clicks_a, n_c);
    let ctr_treatment = ctr(table.clicks_b, n_t);
    let relative_change = if ctr_control > 0.0 {
        (ctr_treatment - ctr_control) / ctr_control
    } else {
        0.0
    };
    Ok(AbOutcome {
        control: control.name(),
        treatment: treatment.name(),
        impressions_control: n_c,
        impressions_treatment: n_t,
        ctr_control,
        ctr_treatment,
        relative_change,
        p_value: fisher_exact_p(&table),
        table,
    })
}
