//! Scoring a page of ads, picking the top SPs per ad and rendering the
//! refined title under a display budget.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use unicode_segmentation::UnicodeSegmentation;

use crate::data_model::{Ad, AdRecord, KeywordId, KeywordSet, Query, QueryRecord, UserRecord, UserRepr, Vocabulary};
use crate::error::{Error, Result};
use crate::network::{Model, ScoringContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExhibitionConfig {
    pub k: usize,
    pub budget: usize,
    pub emphasis: bool,
    pub open_marker: String,
    pub close_marker: String,
    /// Appended when the title is cut; `None` cuts silently.
    pub ellipsis: Option<String>,
}

impl Default for ExhibitionConfig {
    fn default() -> Self {
        ExhibitionConfig {
            k: 2,
            budget: 28,
            emphasis: true,
            open_marker: "【".into(),
            close_marker: "】".into(),
            ellipsis: None,
        }
    }
}

impl ExhibitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("exhibition.k must be at least 1".into()));
        }
        if self.budget == 0 {
            return Err(Error::InvalidConfig("exhibition.budget must be at least 1".into()));
        }
        if self.emphasis && (self.open_marker.is_empty() || self.close_marker.is_empty()) {
            return Err(Error::InvalidConfig("emphasis markers must be non-empty".into()));
        }
        Ok(())
    }
}

/// Display length: one per grapheme cluster.
pub fn display_len(s: &str) -> usize {
    s.graphemes(true).count()
}

fn grapheme_prefix(s: &str, n: usize) -> &str {
    match s.grapheme_indices(true).nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Indices of the `k` highest scores in descending order; ties keep input order.
pub fn select_top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput("sp candidates"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.truncate(k);
    Ok(idx)
}

/// The SP blocks that fit, in order, and their combined display length.
fn fit_sps<'a>(sps: &'a [String], config: &ExhibitionConfig) -> (Vec<&'a str>, usize) {
    let marker_len = if config.emphasis {
        display_len(&config.open_marker) + display_len(&config.close_marker)
    } else {
        0
    };
    let mut used = 0;
    let mut kept = Vec::new();
    for sp in sps {
        let sep = usize::from(!config.emphasis && !kept.is_empty());
        let need = sep + marker_len + display_len(sp);
        if used + need > config.budget {
            break;
        }
        used += need;
        kept.push(sp.as_str());
    }
    (kept, used)
}

/// SP blocks first, then as much of the title as the budget allows.
///
/// With emphasis each SP is wrapped in the markers and blocks abut; without,
/// SPs and title are separated by single spaces. Trailing SPs that do not fit
/// are dropped.
pub fn refine_title(title: &str, sps: &[String], config: &ExhibitionConfig) -> Result<String> {
    config.validate()?;
    if sps.is_empty() {
        return Err(Error::EmptyInput("selling points"));
    }
    let (kept, used) = fit_sps(sps, config);
    if kept.is_empty() {
        return Err(Error::BudgetTooSmall);
    }
    let mut out = String::new();
    for (i, sp) in kept.iter().enumerate() {
        if config.emphasis {
            out.push_str(&config.open_marker);
            out.push_str(sp);
            out.push_str(&config.close_marker);
        } else {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(sp);
        }
    }
    let sep = usize::from(!config.emphasis);
    let remaining = config.budget - used;
    if remaining <= sep || title.is_empty() {
        return Ok(out);
    }
    let room = remaining - sep;
    let title_len = display_len(title);
    let body = if title_len <= room {
        title.to_string()
    } else {
        match &config.ellipsis {
            Some(e) if display_len(e) < room => {
                format!("{}{e}", grapheme_prefix(title, room - display_len(e)))
            }
            _ => grapheme_prefix(title, room).to_string(),
        }
    };
    if sep == 1 {
        out.push(' ');
    }
    out.push_str(&body);
    Ok(out)
}

fn render(ids: &[KeywordId], vocab: &Vocabulary, sep: &str) -> Result<String> {
    let terms = ids
        .iter()
        .map(|&id| {
            vocab.term(id).ok_or(Error::IdOutOfRange {
                id,
                rows: vocab.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(terms.join(sep))
}

/// Keywords of a phrase joined by hyphens.
pub fn render_phrase(phrase: &KeywordSet, vocab: &Vocabulary) -> Result<String> {
    render(phrase.ids(), vocab, "-")
}

/// Title keywords joined by spaces.
pub fn render_title(title: &[KeywordId], vocab: &Vocabulary) -> Result<String> {
    render(title, vocab, " ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedResult {
    pub ad_id: u32,
    pub chosen_sps: Vec<String>,
    pub display: String,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PageResult {
    pub results: Vec<RefinedResult>,
    pub elapsed: Duration,
    /// Distinct phrases scored on this page.
    pub unique_phrases: usize,
}

/// Scores every ad's SP candidates for one user and query, then renders each
/// refined title. User and query representations are computed once per page
/// and identical phrases across ads are scored once.
pub fn score_page(
    model: &Model,
    user: &UserRepr,
    query: &Query,
    ads: &[Ad],
    vocab: &Vocabulary,
    config: &ExhibitionConfig,
) -> Result<PageResult> {
    let start = Instant::now();
    if ads.is_empty() {
        return Ok(PageResult {
            results: Vec::new(),
            elapsed: start.elapsed(),
            unique_phrases: 0,
        });
    }
    config.validate()?;
    let ctx = ScoringContext::new(model, user, query)?;
    let mut cache: HashMap<&KeywordSet, f64> = HashMap::new();
    let mut results = Vec::with_capacity(ads.len());
    for ad in ads {
        let mut scores = Vec::with_capacity(ad.sp_candidates.len());
        for sp in &ad.sp_candidates {
            let s = match cache.get(sp) {
                Some(&s) => s,
                None => {
                    let s = ctx.score(sp)?;
                    cache.insert(sp, s);
                    s
                }
            };
            scores.push(s);
        }
        let chosen = select_top_k(&scores, config.k)?;
        let rendered = chosen
            .iter()
            .map(|&i| render_phrase(&ad.sp_candidates[i], vocab))
            .collect::<Result<Vec<_>>>()?;
        let title = render_title(&ad.title_keywords, vocab)?;
        let display = refine_title(&title, &rendered, config)?;
        // report only the SPs that survived the budget
        let shown = rendered.len().min(count_shown(&rendered, config));
        results.push(RefinedResult {
            ad_id: ad.ad_id,
            chosen_sps: rendered[..shown].to_vec(),
            display,
            scores: chosen[..shown].iter().map(|&i| scores[i]).collect(),
        });
    }
    Ok(PageResult {
        results,
        elapsed: start.elapsed(),
        unique_phrases: cache.len(),
    })
}

fn count_shown(sps: &[String], config: &ExhibitionConfig) -> usize {
    fit_sps(sps, config).0.len()
}

/// One page request in the `refine` input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageRecord {
    pub user: UserRecord,
    pub query: QueryRecord,
    pub ads: Vec<AdRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencySummary {
    pub pages: usize,
    pub ads_per_page: usize,
    pub candidates_per_ad: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub mean_ms: f64,
    pub ads_per_second: f64,
}

/// Nearest-rank percentile of already sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl LatencySummary {
    pub fn from_latencies(latencies: &[Duration], ads_per_page: usize, candidates_per_ad: usize) -> Self {
        let mut ms: Vec<f64> = latencies.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let total: f64 = ms.iter().sum();
        let mean = if ms.is_empty() { 0.0 } else { total / ms.len() as f64 };
        LatencySummary {
            pages: ms.len(),
            ads_per_page,
            candidates_per_ad,
            p50_ms: percentile(&ms, 0.50),
            p95_ms: percentile(&ms, 0.95),
            p99_ms: percentile(&ms, 0.99),
            mean_ms: mean,
            ads_per_second: if total > 0.0 {
                (ms.len() * ads_per_page) as f64 / (total / 1e3)
            } else {
                0.0
            },
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("pages,ads_per_page,candidates_per_ad,p50_ms,p95_ms,p99_ms,mean_ms,ads_per_second\n");
        let _ = writeln!(
            s,
            "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.1}",
            self.pages,
            self.ads_per_page,
            self.candidates_per_ad,
            self.p50_ms,
            self.p95_ms,
            self.p99_ms,
            self.mean_ms,
            self.ads_per_second
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{predict_sp_scores, ModelDims, ModelVariant};
    use proptest::prelude::*;

    fn sp(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    fn cfg(budget: usize, emphasis: bool) -> ExhibitionConfig {
        ExhibitionConfig {
            budget,
            emphasis,
            ..ExhibitionConfig::default()
        }
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(select_top_k(&[0.2, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
        assert_eq!(select_top_k(&[0.5, 0.5], 1).unwrap(), vec![0]);
        assert_eq!(select_top_k(&[0.3], 2).unwrap(), vec![0]);
        assert!(select_top_k(&[0.3], 0).is_err());
    }

    #[test]
    fn refine_examples() {
        let sps = sp(&["AB", "CD"]);
        assert_eq!(refine_title("EFGHIJKL", &sps, &cfg(10, true)).unwrap(), "【AB】【CD】EF");
        assert_eq!(refine_title("EFGHIJKL", &sps, &cfg(10, false)).unwrap(), "AB CD EFGH");
        assert_eq!(refine_title("EFGHIJKL", &sps, &cfg(7, true)).unwrap(), "【AB】EFG");
        assert!(matches!(
            refine_title("EFG", &sp(&["ABCDEFGH"]), &cfg(5, true)),
            Err(Error::BudgetTooSmall)
        ));
    }

    #[test]
    fn refine_edge_cases() {
        // exactly consumed by SPs: no separator, no title
        assert_eq!(refine_title("XYZ", &sp(&["AB"]), &cfg(2, false)).unwrap(), "AB");
        assert_eq!(refine_title("XYZ", &sp(&["AB"]), &cfg(3, false)).unwrap(), "AB");
        assert_eq!(refine_title("XYZ", &sp(&["AB"]), &cfg(4, false)).unwrap(), "AB X");
        assert_eq!(refine_title("XYZ", &sp(&["AB"]), &cfg(4, true)).unwrap(), "【AB】");
        // a title that fits exactly gets no ellipsis
        let with_ellipsis = ExhibitionConfig {
            ellipsis: Some("…".into()),
            ..cfg(9, true)
        };
        assert_eq!(refine_title("EFGHI", &sp(&["AB"]), &with_ellipsis).unwrap(), "【AB】EFGHI");
        assert_eq!(refine_title("EFGHIJ", &sp(&["AB"]), &with_ellipsis).unwrap(), "【AB】EFGH…");
        assert!(refine_title("T", &[], &cfg(9, true)).is_err());
    }

    fn tiny_model() -> Model {
        let dims = ModelDims {
            keyword_dim: 4,
            feature_dim: 2,
            hidden1: 6,
            hidden2: 5,
            ..ModelDims::default()
        };
        let mut m = Model::init(ModelVariant::Basic, dims, 10, 3).unwrap();
        // spread the tiny default initialization so scores differ
        m.params.keyword_embeddings.as_mut_slice().iter_mut().enumerate().for_each(|(i, v)| *v = ((i * 37 % 11) as f64 - 5.0) / 5.0);
        m
    }

    fn page() -> (UserRepr, Query, Vec<Ad>, Vocabulary) {
        let vocab = Vocabulary::from_terms((0..10).map(|i| format!("t{i}")).collect()).unwrap();
        let user = UserRepr {
            user_id: 1,
            long_term_keywords: vec![0, 1],
            ..UserRepr::default()
        };
        let query = Query {
            keywords: KeywordSet::new(vec![2]),
            feature_groups: Default::default(),
        };
        let shared = KeywordSet::new(vec![3, 4]);
        let ads = vec![
            Ad {
                ad_id: 7,
                title_keywords: vec![5, 6, 7],
                sp_candidates: vec![shared.clone(), KeywordSet::new(vec![8]), KeywordSet::new(vec![9])],
            },
            Ad {
                ad_id: 8,
                title_keywords: vec![6],
                sp_candidates: vec![KeywordSet::new(vec![1]), shared],
            },
        ];
        (user, query, ads, vocab)
    }

    #[test]
    fn page_scores_match_direct_scoring() {
        let m = tiny_model();
        let (user, query, ads, vocab) = page();
        let config = ExhibitionConfig {
            budget: 40,
            ..ExhibitionConfig::default()
        };
        let r = score_page(&m, &user, &query, &ads, &vocab, &config).unwrap();
        assert_eq!(r.unique_phrases, 4);
        for (ad, res) in ads.iter().zip(&r.results) {
            let direct = predict_sp_scores(&m, &user, &query, &ad.sp_candidates).unwrap();
            let top = select_top_k(&direct, 2).unwrap();
            let expected: Vec<f64> = top.iter().map(|&i| direct[i]).collect();
            assert_eq!(res.scores, expected);
            assert!(res.display.starts_with('【'));
        }
        let again = score_page(&m, &user, &query, &ads, &vocab, &config).unwrap();
        assert_eq!(r.results, again.results);
        let mut reversed = ads.clone();
        reversed.reverse();
        let rev = score_page(&m, &user, &query, &reversed, &vocab, &config).unwrap();
        assert_eq!(rev.results[0], r.results[1]);
        assert!(score_page(&m, &user, &query, &[], &vocab, &config).unwrap().results.is_empty());
    }

    #[test]
    fn rendering() {
        let (_, _, ads, vocab) = page();
        assert_eq!(render_phrase(&ads[0].sp_candidates[0], &vocab).unwrap(), "t3-t4");
        assert_eq!(render_title(&ads[0].title_keywords, &vocab).unwrap(), "t5 t6 t7");
        assert!(render_title(&[42], &vocab).is_err());
    }

    #[test]
    fn percentiles() {
        let lat: Vec<Duration> = (1..=100).map(Duration::from_millis).collect();
        let s = LatencySummary::from_latencies(&lat, 200, 5);
        assert_eq!((s.p50_ms, s.p95_ms, s.p99_ms), (50.0, 95.0, 99.0));
        assert!(s.to_csv().starts_with("pages,ads_per_page"));
    }

    proptest! {
        #[test]
        fn top_k_scores_non_increasing(scores in prop::collection::vec(0.0f64..1.0, 1..30), k in 1usize..6) {
            let idx = select_top_k(&scores, k).unwrap();
            prop_assert_eq!(idx.len(), k.min(scores.len()));
            for w in idx.windows(2) {
                prop_assert!(scores[w[0]] >= scores[w[1]]);
            }
        }
    }
}
