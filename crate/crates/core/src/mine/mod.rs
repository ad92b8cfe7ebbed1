//! Triplet mining from search clickthrough logs, and majority-vote cleanup of
//! annotated triplets.
//!
//! For each query, annotations of the clicked items are scored by the clicks
//! of the items that carry them. The best-scoring annotations that share no
//! stemmed word with the query become positives; each positive is paired with
//! a negative drawn from a phrase pool that shares no stemmed word with either.

mod porter;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::Triplet;
use crate::text::normalize;

pub use porter::stem;

pub const DEFAULT_TOP_K: usize = 20;
pub const MAX_NEGATIVE_REJECTIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClickRecord {
    pub query: String,
    pub item_id: String,
    pub clicks: u64,
}

/// item_id → annotation phrases.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnnotationTable {
    items: HashMap<String, Vec<String>>,
}

impl AnnotationTable {
    pub fn insert(&mut self, item_id: impl Into<String>, annotation: impl Into<String>) -> Result<()> {
        let annotation = annotation.into();
        if annotation.trim().is_empty() {
            return Err(Error::Data("empty annotation".into()));
        }
        let list = self.items.entry(item_id.into()).or_default();
        if !list.contains(&annotation) {
            list.push(annotation);
        }
        Ok(())
    }

    pub fn get(&self, item_id: &str) -> &[String] {
        self.items.get(item_id).map_or(&[], Vec::as_slice)
    }
}

fn open(path: &Path) -> Result<(BufReader<File>, String)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok((BufReader::new(f), path.display().to_string()))
}

fn non_blank_lines(reader: impl BufRead, name: &str) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(name, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

/// `query<TAB>item_id<TAB>clicks` lines.
pub fn parse_click_log(reader: impl BufRead, name: &str) -> Result<Vec<ClickRecord>> {
    non_blank_lines(reader, name)?
        .into_iter()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::parse(name, n, "expected query<TAB>item_id<TAB>clicks"));
            }
            let clicks = f[2]
                .trim()
                .parse()
                .map_err(|_| Error::parse(name, n, format!("bad click count {:?}", f[2])))?;
            Ok(ClickRecord {
                query: f[0].to_owned(),
                item_id: f[1].to_owned(),
                clicks,
            })
        })
        .collect()
}

/// `item_id<TAB>annotation` lines; an item may repeat.
pub fn parse_annotations(reader: impl BufRead, name: &str) -> Result<AnnotationTable> {
    let mut table = AnnotationTable::default();
    for (n, line) in non_blank_lines(reader, name)? {
        let (item, ann) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(name, n, "expected item_id<TAB>annotation"))?;
        table
            .insert(item, ann)
            .map_err(|_| Error::parse(name, n, "empty annotation"))?;
    }
    Ok(table)
}

/// One phrase per line.
pub fn parse_pool(reader: impl BufRead, name: &str) -> Result<Vec<String>> {
    Ok(non_blank_lines(reader, name)?
        .into_iter()
        .map(|(_, l)| l.trim().to_owned())
        .collect())
}

pub fn read_click_log(path: &Path) -> Result<Vec<ClickRecord>> {
    let (r, n) = open(path)?;
    parse_click_log(r, &n)
}

pub fn read_annotations(path: &Path) -> Result<AnnotationTable> {
    let (r, n) = open(path)?;
    parse_annotations(r, &n)
}

pub fn read_pool(path: &Path) -> Result<Vec<String>> {
    let (r, n) = open(path)?;
    parse_pool(r, &n)
}

/// Stems of the normalized words of a phrase.
pub fn stemmed_words(phrase: &str) -> HashSet<String> {
    normalize(phrase).iter().map(|w| stem(w)).collect()
}

fn overlaps(a: &HashSet<String>, b: &HashSet<String>) -> bool {
    a.iter().any(|w| b.contains(w))
}

/// Annotations of the query's clicked items, scored by the total clicks of
/// the items carrying them. Descending score, ties lexicographic.
pub fn score_annotations(
    query: &str,
    clicks: &[ClickRecord],
    annotations: &AnnotationTable,
) -> Vec<(String, u64)> {
    let mut per_item: BTreeMap<&str, u64> = BTreeMap::new();
    for r in clicks.iter().filter(|r| r.query == query) {
        *per_item.entry(r.item_id.as_str()).or_default() += r.clicks;
    }
    let mut scores: HashMap<&str, u64> = HashMap::new();
    for (item, c) in per_item {
        for a in annotations.get(item) {
            *scores.entry(a.as_str()).or_default() += c;
        }
    }
    let mut ranked: Vec<(String, u64)> = scores.into_iter().map(|(a, s)| (a.to_owned(), s)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

/// Drops candidates sharing a stemmed word with the query.
pub fn filter_overlap(query: &str, candidates: &[String]) -> Vec<String> {
    let q = stemmed_words(query);
    candidates
        .iter()
        .filter(|c| !overlaps(&q, &stemmed_words(c)))
        .cloned()
        .collect()
}

/// Uniform draws from `pool` until one shares no stemmed word with either
/// phrase of the pair.
pub fn sample_negative<R: Rng + ?Sized>(
    pair: (&str, &str),
    pool: &[String],
    rng: &mut R,
) -> Result<String> {
    if pool.is_empty() {
        return Err(Error::Mining("negative pool is empty".into()));
    }
    let base = stemmed_words(pair.0);
    let pos = stemmed_words(pair.1);
    for _ in 0..MAX_NEGATIVE_REJECTIONS {
        let cand = &pool[rng.random_range(0..pool.len())];
        let stems = stemmed_words(cand);
        if !stems.is_empty() && !overlaps(&stems, &base) && !overlaps(&stems, &pos) {
            return Ok(cand.clone());
        }
    }
    Err(Error::Mining(format!(
        "no acceptable negative for ({:?}, {:?}) after {MAX_NEGATIVE_REJECTIONS} draws",
        pair.0, pair.1
    )))
}

/// Per-query generator seeded from `(seed, query)`.
pub fn query_rng(seed: u64, query: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(query.as_bytes());
    let d = h.finalize();
    ChaCha8Rng::from_seed(d.into())
}

/// Mines triplets for every query in the log, ordered by query then rank.
pub fn mine(
    clicks: &[ClickRecord],
    annotations: &AnnotationTable,
    pool: &[String],
    top_k: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    let queries: Vec<&str> = clicks
        .iter()
        .map(|r| r.query.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let per_query: Vec<Vec<Triplet>> = queries
        .par_iter()
        .map(|&q| mine_query(q, clicks, annotations, pool, top_k, seed))
        .collect::<Result<_>>()?;
    Ok(per_query.into_iter().flatten().collect())
}

fn mine_query(
    query: &str,
    clicks: &[ClickRecord],
    annotations: &AnnotationTable,
    pool: &[String],
    top_k: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    let top: Vec<String> = score_annotations(query, clicks, annotations)
        .into_iter()
        .take(top_k)
        .map(|(a, _)| a)
        .collect();
    let mut rng = query_rng(seed, query);
    filter_overlap(query, &top)
        .into_iter()
        .map(|p| {
            let neg = sample_negative((query, &p), pool, &mut rng)?;
            Ok(Triplet::new(query, p, neg))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Vote {
    /// Agrees with the original positive/negative assignment.
    Agree,
    Disagree,
    BothRelated,
    BothUnrelated,
}

impl FromStr for Vote {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "A" => Ok(Vote::Agree),
            "D" => Ok(Vote::Disagree),
            "R" => Ok(Vote::BothRelated),
            "U" => Ok(Vote::BothUnrelated),
            other => Err(format!("unknown vote {other:?} (expected A, D, R or U)")),
        }
    }
}

impl fmt::Display for Vote {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Vote::Agree => "A",
            Vote::Disagree => "D",
            Vote::BothRelated => "R",
            Vote::BothUnrelated => "U",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteRecord {
    pub triplet: Triplet,
    pub votes: Vec<Vote>,
}

/// `base<TAB>positive<TAB>negative<TAB>v1,v2,…` lines.
pub fn parse_votes(reader: impl BufRead, name: &str) -> Result<Vec<VoteRecord>> {
    non_blank_lines(reader, name)?
        .into_iter()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 || f[..3].iter().any(|p| p.trim().is_empty()) {
                return Err(Error::parse(
                    name,
                    n,
                    "expected base<TAB>positive<TAB>negative<TAB>votes",
                ));
            }
            let votes = f[3]
                .split(',')
                .filter(|v| !v.trim().is_empty())
                .map(Vote::from_str)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|m| Error::parse(name, n, m))?;
            Ok(VoteRecord {
                triplet: Triplet::new(f[0], f[1], f[2]),
                votes,
            })
        })
        .collect()
}

pub fn read_votes(path: &Path) -> Result<Vec<VoteRecord>> {
    let (r, n) = open(path)?;
    parse_votes(r, &n)
}

pub const MIN_VOTES: usize = 3;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VoteSummary {
    pub accepted: Vec<Triplet>,
    /// Records with a valid vote count that failed the majority rule.
    pub rejected: usize,
    /// Records dropped for having fewer than [`MIN_VOTES`] votes.
    pub insufficient: usize,
}

/// Keeps a triplet when strictly more than half of all its votes agree with
/// the original labelling. "Both related" and "both unrelated" count towards
/// the total.
pub fn aggregate_votes(records: &[VoteRecord]) -> VoteSummary {
    let mut s = VoteSummary::default();
    for (i, r) in records.iter().enumerate() {
        if r.votes.len() < MIN_VOTES {
            warn!(
                "record {}: {} votes, at least {MIN_VOTES} required; dropped",
                i + 1,
                r.votes.len()
            );
            s.insufficient += 1;
            continue;
        }
        let agree = r.votes.iter().filter(|&&v| v == Vote::Agree).count();
        if 2 * agree > r.votes.len() {
            s.accepted.push(r.triplet.clone());
        } else {
            s.rejected += 1;
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn table(rows: &[(&str, &str)]) -> AnnotationTable {
        let mut t = AnnotationTable::default();
        for (i, a) in rows {
            t.insert(*i, *a).unwrap();
        }
        t
    }

    fn click(q: &str, item: &str, c: u64) -> ClickRecord {
        ClickRecord {
            query: q.into(),
            item_id: item.into(),
            clicks: c,
        }
    }

    #[test]
    fn scores_sum_clicks() {
        let ann = table(&[("i1", "hair tutorial"), ("i2", "hair tutorial"), ("i3", "ponytail")]);
        let clicks = vec![click("q", "i1", 5), click("q", "i2", 3), click("q", "i3", 0)];
        let r = score_annotations("q", &clicks, &ann);
        assert_eq!(r, vec![("hair tutorial".into(), 8), ("ponytail".into(), 0)]);
    }

    /// Nested-loop aggregation over the raw records.
    fn brute_force(query: &str, clicks: &[ClickRecord], ann: &AnnotationTable) -> Vec<(String, u64)> {
        let mut names: Vec<String> = Vec::new();
        for r in clicks.iter().filter(|r| r.query == query) {
            for a in ann.get(&r.item_id) {
                if !names.contains(a) {
                    names.push(a.clone());
                }
            }
        }
        let mut out: Vec<(String, u64)> = names
            .into_iter()
            .map(|a| {
                let mut total = 0;
                for r in clicks {
                    if r.query == query && ann.get(&r.item_id).contains(&a) {
                        total += r.clicks;
                    }
                }
                (a, total)
            })
            .collect();
        out.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
        out
    }

    #[test]
    fn three_query_fixture_matches_brute_force() {
        let ann = table(&[
            ("i1", "prom hair"),
            ("i1", "updo"),
            ("i2", "updo"),
            ("i2", "braids"),
            ("i3", "chocolate cake"),
            ("i4", "birthday cake"),
            ("i4", "frosting"),
            ("i5", "frosting"),
            ("i6", "salad"),
        ]);
        let clicks = vec![
            click("hair styles", "i1", 7),
            click("hair styles", "i2", 4),
            click("hair styles", "i1", 1),
            click("cake ideas", "i3", 2),
            click("cake ideas", "i4", 9),
            click("cake ideas", "i5", 3),
            click("summer lunch", "i6", 5),
            click("summer lunch", "i5", 0),
        ];
        for q in ["hair styles", "cake ideas", "summer lunch"] {
            assert_eq!(score_annotations(q, &clicks, &ann), brute_force(q, &clicks, &ann), "{q}");
        }
        // Hand-aggregated: updo 8+4, prom hair 8, braids 4.
        assert_eq!(
            score_annotations("hair styles", &clicks, &ann),
            vec![("updo".into(), 12), ("prom hair".into(), 8), ("braids".into(), 4)]
        );
        assert_eq!(
            score_annotations("cake ideas", &clicks, &ann),
            vec![("frosting".into(), 12), ("birthday cake".into(), 9), ("chocolate cake".into(), 2)]
        );
    }

    #[test]
    fn overlap_filter() {
        let c = s(&["hair tutorial", "ponytail", "Hair Styles, tips"]);
        assert_eq!(filter_overlap("hair styles", &c), s(&["ponytail"]));
        assert!(filter_overlap("summer lunch", &s(&["lunches today"])).is_empty());
        assert_eq!(filter_overlap("cake", &s(&["cakes", "pie"])), s(&["pie"]));
    }

    #[test]
    fn negative_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = sample_negative(("hair style", "ponytail"), &s(&["pink nail"]), &mut rng).unwrap();
        assert_eq!(got, "pink nail");
        let err = sample_negative(("hair style", "ponytail"), &s(&["hair colors"]), &mut rng);
        assert!(matches!(err, Err(Error::Mining(m)) if m.contains("hair style")));
        assert!(sample_negative(("a", "b"), &[], &mut rng).is_err());
    }

    #[test]
    fn negative_draws_are_uniform_over_acceptable() {
        let pool = s(&["pink nail", "hair dye", "garden", "ponytails", "wood desk"]);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts: HashMap<String, u64> = HashMap::new();
        let n = 10_000u64;
        for _ in 0..n {
            *counts
                .entry(sample_negative(("hair style", "ponytail"), &pool, &mut rng).unwrap())
                .or_default() += 1;
        }
        assert_eq!(counts.len(), 3);
        let p = 1.0 / 3.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (k, c) in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{k}: {c}");
        }
    }

    #[test]
    fn mining_is_deterministic_and_respects_top_k() {
        let ann = table(&[("i1", "ponytail"), ("i2", "braids"), ("i3", "cupcake")]);
        let clicks = vec![click("hair styles", "i1", 3), click("hair styles", "i2", 2), click("cake", "i3", 1)];
        let pool = s(&["pink nail", "wood desk", "garden"]);
        let a = mine(&clicks, &ann, &pool, 5, 7).unwrap();
        let b = mine(&clicks, &ann, &pool, 5, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].base, "cake");
        assert!(mine(&clicks, &ann, &pool, 0, 7).unwrap().is_empty());
    }

    /// Two queries; with top_k = 2, traced by hand:
    /// "hair styles": ponytail 9, updo 9, hair tutorial 6, braids 2 → ponytail, updo.
    /// "cake ideas": frosting 10, sprinkles 10, birthday cake 4, cupcakes 4 → frosting, sprinkles.
    /// With top_k = 3 "hair tutorial" and "birthday cake" enter and are filtered.
    fn two_query_fixture() -> (Vec<ClickRecord>, AnnotationTable, Vec<String>) {
        let ann = table(&[
            ("i1", "updo"),
            ("i1", "ponytail"),
            ("i2", "hair tutorial"),
            ("i3", "braids"),
            ("i4", "frosting"),
            ("i4", "sprinkles"),
            ("i5", "cupcakes"),
            ("i6", "birthday cake"),
        ]);
        let clicks = vec![
            click("hair styles", "i1", 9),
            click("hair styles", "i2", 6),
            click("hair styles", "i3", 2),
            click("cake ideas", "i4", 10),
            click("cake ideas", "i5", 4),
            click("cake ideas", "i6", 4),
        ];
        (clicks, ann, s(&["pink nail"]))
    }

    #[test]
    fn two_query_trace() {
        let (clicks, ann, pool) = two_query_fixture();
        let got = mine(&clicks, &ann, &pool, 2, 1).unwrap();
        let want = vec![
            Triplet::new("cake ideas", "frosting", "pink nail"),
            Triplet::new("cake ideas", "sprinkles", "pink nail"),
            Triplet::new("hair styles", "ponytail", "pink nail"),
            Triplet::new("hair styles", "updo", "pink nail"),
        ];
        assert_eq!(got, want);
        assert_eq!(mine(&clicks, &ann, &pool, 3, 1).unwrap(), want);
    }

    proptest::proptest! {
        #[test]
        fn mined_triplets_never_overlap(seed in proptest::prelude::any::<u64>()) {
            let (clicks, ann, _) = two_query_fixture();
            let pool = s(&["pink nail", "hair colors", "cake stand", "garden", "wood desk", "updo"]);
            let out = mine(&clicks, &ann, &pool, 20, seed).unwrap();
            for t in &out {
                let (b, p, n) = (stemmed_words(&t.base), stemmed_words(&t.positive), stemmed_words(&t.negative));
                proptest::prop_assert!(!overlaps(&b, &p) && !overlaps(&b, &n) && !overlaps(&p, &n), "{t}");
            }
            proptest::prop_assert_eq!(out, mine(&clicks, &ann, &pool, 20, seed).unwrap());
        }
    }

    #[test]
    fn vote_rule() {
        let t = Triplet::new("a", "b", "c");
        let rec = |v: &str| VoteRecord {
            triplet: t.clone(),
            votes: v.split(',').map(|x| x.parse().unwrap()).collect(),
        };
        let s = aggregate_votes(&[rec("A,A,A,D,R"), rec("A,A,D,U"), rec("A,A,D"), rec("A,A")]);
        assert_eq!(s.accepted.len(), 2);
        assert_eq!(s.rejected, 1);
        assert_eq!(s.insufficient, 1);
    }

    #[test]
    fn vote_file_parsing() {
        let recs = parse_votes("a\tb\tc\tA,D,R,U\n".as_bytes(), "v").unwrap();
        assert_eq!(recs[0].votes, vec![Vote::Agree, Vote::Disagree, Vote::BothRelated, Vote::BothUnrelated]);
        assert!(matches!(parse_votes("a\tb\tc\tA,X\n".as_bytes(), "v"), Err(Error::Parse { line: 1, .. })));
        assert!(parse_votes("a\tb\tA\n".as_bytes(), "v").is_err());
    }

    #[test]
    fn click_log_parsing() {
        let r = parse_click_log("q\ti\t3\n\nq\tj\t0\n".as_bytes(), "c").unwrap();
        assert_eq!(r.len(), 2);
        assert!(matches!(parse_click_log("q\ti\tx\n".as_bytes(), "c"), Err(Error::Parse { line: 1, .. })));
        assert!(parse_annotations("i1 no tab\n".as_bytes(), "a").is_err());
    }
}
