//! Query/product purchase logs: ingestion, the rich/impoverished query split,
//! co-purchase self-join and train/validation/test splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::util;

pub const DEFAULT_MIN_PURCHASE: u64 = 2;
pub const DEFAULT_RICH_THRESHOLD: u64 = 20;
pub const VALIDATION_FRACTION: f64 = 0.1;

const LOG_KIND: &str = "behavior-log";
const QUERIES_KIND: &str = "corpus-queries";
const EVENTS_KIND: &str = "corpus-events";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QueryId(pub u32);

impl QueryId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for QueryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::str::FromStr for QueryId {
    type Err = std::num::ParseIntError;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        s.parse().map(QueryId)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ProductId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrafficTier {
    Rich,
    Impoverished,
}

impl TrafficTier {
    fn as_str(self) -> &'static str {
        match self {
            TrafficTier::Rich => "rich",
            TrafficTier::Impoverished => "impoverished",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryRecord {
    pub id: QueryId,
    pub raw_text: String,
    /// Filled by the normalizer; empty until then.
    pub normalized_text: String,
    pub total_purchases: u64,
    pub traffic_tier: TrafficTier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PurchaseEvent {
    pub query: QueryId,
    pub product: ProductId,
    pub purchase_count: u64,
}

/// One undirected record per unordered pair, `query_a < query_b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct CoPurchaseRecord {
    pub query_a: QueryId,
    pub query_b: QueryId,
    pub shared_products: u32,
}

/// Anything with two query endpoints can be split into train/validation/test.
pub trait PairEndpoints {
    fn endpoints(&self) -> (QueryId, QueryId);
}

impl PairEndpoints for CoPurchaseRecord {
    fn endpoints(&self) -> (QueryId, QueryId) {
        (self.query_a, self.query_b)
    }
}

impl PairEndpoints for (QueryId, QueryId) {
    fn endpoints(&self) -> (QueryId, QueryId) {
        *self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
    pub test_query_ids: BTreeSet<QueryId>,
}

/// An ingested log. Query ids are assigned by sorted query text, so the
/// corpus does not depend on the order of log rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    queries: Vec<QueryRecord>,
    products: Vec<String>,
    /// Aggregated counts per query before the `min_purchase` filter.
    raw_behavior: Vec<BTreeMap<ProductId, u64>>,
    min_purchase: u64,
    rich_threshold: u64,
}

/// One parsed behavior-log row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogRow {
    pub query: String,
    pub product: String,
    pub purchases: u64,
}

pub fn parse_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = util::version_header(LOG_KIND);
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || (line_no == 1 && line.trim_end() == header) {
            continue;
        }
        let fields = util::split_fields(path, line_no, line, 3)?;
        let query = fields[0].trim();
        if query.is_empty() {
            return Err(Error::parse(path, line_no, "empty query"));
        }
        let purchases: u64 = util::parse_field(path, line_no, fields[2], "purchase count")?;
        let product = fields[1].trim();
        if product.is_empty() && purchases > 0 {
            return Err(Error::parse(path, line_no, "empty product with non-zero purchases"));
        }
        rows.push(LogRow {
            query: query.to_string(),
            product: product.to_string(),
            purchases,
        });
    }
    Ok(rows)
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    util::write_lines(
        path,
        &util::version_header(LOG_KIND),
        rows.iter()
            .map(|r| format!("{}\t{}\t{}", r.query, r.product, r.purchases)),
    )
}

/// Parse and aggregate a behavior log. Rows with zero purchases register the
/// query without an event.
pub fn ingest_log(path: &Path, min_purchase: u64) -> Result<Corpus> {
    let rows = parse_log(path)?;
    Corpus::from_rows(&rows, min_purchase, DEFAULT_RICH_THRESHOLD)
}

impl Corpus {
    pub fn from_rows(rows: &[LogRow], min_purchase: u64, rich_threshold: u64) -> Result<Corpus> {
        if rich_threshold == 0 {
            return Err(Error::InvalidArgument("rich_threshold must be positive".into()));
        }
        let query_texts: BTreeSet<&str> = rows.iter().map(|r| r.query.as_str()).collect();
        let product_names: BTreeSet<&str> = rows
            .iter()
            .filter(|r| r.purchases > 0)
            .map(|r| r.product.as_str())
            .collect();
        let query_index: HashMap<&str, QueryId> = query_texts
            .iter()
            .enumerate()
            .map(|(i, q)| (*q, QueryId(i as u32)))
            .collect();
        let product_index: HashMap<&str, ProductId> = product_names
            .iter()
            .enumerate()
            .map(|(i, p)| (*p, ProductId(i as u32)))
            .collect();

        let mut raw_behavior = vec![BTreeMap::new(); query_texts.len()];
        for row in rows.iter().filter(|r| r.purchases > 0) {
            let q = query_index[row.query.as_str()];
            let p = product_index[row.product.as_str()];
            *raw_behavior[q.index()].entry(p).or_insert(0) += row.purchases;
        }
        let queries = query_texts
            .iter()
            .enumerate()
            .map(|(i, text)| QueryRecord {
                id: QueryId(i as u32),
                raw_text: text.to_string(),
                normalized_text: String::new(),
                total_purchases: 0,
                traffic_tier: TrafficTier::Impoverished,
            })
            .collect();
        let mut corpus = Corpus {
            queries,
            products: product_names.iter().map(|p| p.to_string()).collect(),
            raw_behavior,
            min_purchase,
            rich_threshold,
        };
        corpus.refresh_totals();
        Ok(corpus)
    }

    fn refresh_totals(&mut self) {
        for (record, behavior) in self.queries.iter_mut().zip(&self.raw_behavior) {
            record.total_purchases = behavior
                .values()
                .filter(|&&n| n >= self.min_purchase)
                .sum();
            record.traffic_tier = if record.total_purchases >= self.rich_threshold {
                TrafficTier::Rich
            } else {
                TrafficTier::Impoverished
            };
        }
    }

    /// Re-assign traffic tiers with a new boundary.
    pub fn with_rich_threshold(mut self, rich_threshold: u64) -> Result<Corpus> {
        if rich_threshold == 0 {
            return Err(Error::InvalidArgument("rich_threshold must be positive".into()));
        }
        self.rich_threshold = rich_threshold;
        self.refresh_totals();
        Ok(self)
    }

    pub fn queries(&self) -> &[QueryRecord] {
        &self.queries
    }

    pub fn query(&self, id: QueryId) -> &QueryRecord {
        &self.queries[id.index()]
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn products(&self) -> &[String] {
        &self.products
    }

    pub fn product_name(&self, id: ProductId) -> &str {
        &self.products[id.0 as usize]
    }

    pub fn min_purchase(&self) -> u64 {
        self.min_purchase
    }

    pub fn rich_threshold(&self) -> u64 {
        self.rich_threshold
    }

    pub fn find(&self, raw_text: &str) -> Option<QueryId> {
        self.queries
            .binary_search_by(|q| q.raw_text.as_str().cmp(raw_text))
            .ok()
            .map(|i| QueryId(i as u32))
    }

    /// Aggregated counts before the purchase filter.
    pub fn raw_behavior(&self, id: QueryId) -> &BTreeMap<ProductId, u64> {
        &self.raw_behavior[id.index()]
    }

    /// Counts that survive the `min_purchase` filter.
    pub fn behavior(&self, id: QueryId) -> BTreeMap<ProductId, u64> {
        self.raw_behavior[id.index()]
            .iter()
            .filter(|(_, &n)| n >= self.min_purchase)
            .map(|(&p, &n)| (p, n))
            .collect()
    }

    pub fn events(&self) -> Vec<PurchaseEvent> {
        self.queries
            .iter()
            .flat_map(|q| {
                self.behavior(q.id)
                    .into_iter()
                    .map(move |(product, purchase_count)| PurchaseEvent {
                        query: q.id,
                        product,
                        purchase_count,
                    })
            })
            .collect()
    }

    pub fn set_normalized_text(&mut self, id: QueryId, text: String) {
        self.queries[id.index()].normalized_text = text;
    }

    pub fn save(&self, queries_path: &Path, events_path: &Path) -> Result<()> {
        util::write_lines(
            queries_path,
            &util::version_header(QUERIES_KIND),
            self.queries.iter().map(|q| {
                format!(
                    "{}\t{}\t{}\t{}\t{}",
                    q.id,
                    q.raw_text,
                    q.normalized_text,
                    q.total_purchases,
                    q.traffic_tier.as_str()
                )
            }),
        )?;
        let params = format!(
            "params\tmin_purchase={}\trich_threshold={}",
            self.min_purchase, self.rich_threshold
        );
        let events = self.raw_behavior.iter().enumerate().flat_map(|(q, b)| {
            b.iter()
                .map(move |(p, n)| format!("{q}\t{}\t{n}", self.products[p.0 as usize]))
        });
        util::write_lines(
            events_path,
            &util::version_header(EVENTS_KIND),
            std::iter::once(params).chain(events),
        )
    }

    pub fn load(queries_path: &Path, events_path: &Path) -> Result<Corpus> {
        let query_lines = util::read_versioned(queries_path, QUERIES_KIND)?;
        let mut queries = Vec::with_capacity(query_lines.len());
        for (line_no, line) in &query_lines {
            let f = util::split_fields(queries_path, *line_no, line, 5)?;
            let id: QueryId = util::parse_field(queries_path, *line_no, f[0], "query id")?;
            if id.index() != queries.len() {
                return Err(Error::parse(queries_path, *line_no, "query ids must be dense and ordered"));
            }
            queries.push(QueryRecord {
                id,
                raw_text: f[1].to_string(),
                normalized_text: f[2].to_string(),
                total_purchases: 0,
                traffic_tier: TrafficTier::Impoverished,
            });
        }

        let event_lines = util::read_versioned(events_path, EVENTS_KIND)?;
        let mut iter = event_lines.iter();
        let (min_purchase, rich_threshold) = match iter.next() {
            Some((line_no, line)) => parse_params(events_path, *line_no, line)?,
            None => return Err(Error::parse(events_path, 2, "missing params line")),
        };
        let mut rows = Vec::new();
        for (line_no, line) in iter {
            let f = util::split_fields(events_path, *line_no, line, 3)?;
            let q: QueryId = util::parse_field(events_path, *line_no, f[0], "query id")?;
            let n: u64 = util::parse_field(events_path, *line_no, f[2], "purchase count")?;
            let record = queries
                .get(q.index())
                .ok_or_else(|| Error::parse(events_path, *line_no, "unknown query id"))?;
            rows.push(LogRow {
                query: record.raw_text.clone(),
                product: f[1].to_string(),
                purchases: n,
            });
        }
        rows.extend(queries.iter().map(|q| LogRow {
            query: q.raw_text.clone(),
            product: String::new(),
            purchases: 0,
        }));
        let mut corpus = Corpus::from_rows(&rows, min_purchase, rich_threshold)?;
        if corpus.queries.len() != queries.len() {
            return Err(Error::parse(queries_path, 2, "duplicate query text"));
        }
        for (rec, loaded) in corpus.queries.iter_mut().zip(&queries) {
            if rec.raw_text != loaded.raw_text {
                return Err(Error::parse(queries_path, 2, "queries are not sorted by text"));
            }
            rec.normalized_text = loaded.normalized_text.clone();
        }
        Ok(corpus)
    }
}

fn parse_params(path: &Path, line_no: usize, line: &str) -> Result<(u64, u64)> {
    let f = util::split_fields(path, line_no, line, 3)?;
    let value = |field: &str, key: &str| -> Result<u64> {
        field
            .strip_prefix(key)
            .and_then(|v| v.strip_prefix('='))
            .ok_or_else(|| Error::parse(path, line_no, format!("expected {key}=<n>")))
            .and_then(|v| util::parse_field(path, line_no, v, key))
    };
    if f[0] != "params" {
        return Err(Error::parse(path, line_no, "expected params line"));
    }
    Ok((value(f[1], "min_purchase")?, value(f[2], "rich_threshold")?))
}

/// Partition queries into behavior-rich and behavior-impoverished sets.
pub fn split_rich_impoverished(
    corpus: &Corpus,
    rich_threshold: u64,
) -> Result<(BTreeSet<QueryId>, BTreeSet<QueryId>)> {
    if rich_threshold == 0 {
        return Err(Error::InvalidArgument(
            "rich_threshold = 0 would make every query behavior-rich".into(),
        ));
    }
    Ok(corpus
        .queries
        .iter()
        .map(|q| q.id)
        .partition(|id| corpus.query(*id).total_purchases >= rich_threshold))
}

/// Self-join of entity supports on product. Returns `(a, b, shared)` with
/// `a < b`, sorted. Each product contributes all pairs of entities that
/// bought it, so cost is the sum of squared per-product degrees.
pub fn self_join(supports: &[Vec<ProductId>]) -> Vec<(usize, usize, u32)> {
    let mut by_product: BTreeMap<ProductId, Vec<usize>> = BTreeMap::new();
    for (entity, products) in supports.iter().enumerate() {
        for p in products {
            by_product.entry(*p).or_default().push(entity);
        }
    }
    let mut counts: HashMap<(usize, usize), u32> = HashMap::new();
    for holders in by_product.values() {
        for (i, &a) in holders.iter().enumerate() {
            for &b in &holders[i + 1..] {
                let key = if a < b { (a, b) } else { (b, a) };
                *counts.entry(key).or_insert(0) += 1;
            }
        }
    }
    let mut out: Vec<(usize, usize, u32)> = counts.into_iter().map(|((a, b), n)| (a, b, n)).collect();
    out.sort_unstable();
    out
}

/// Co-purchase records between queries over the filtered behavior.
pub fn build_copurchase_pairs(corpus: &Corpus) -> Vec<CoPurchaseRecord> {
    let supports: Vec<Vec<ProductId>> = corpus
        .queries
        .iter()
        .map(|q| corpus.behavior(q.id).into_keys().collect())
        .collect();
    self_join(&supports)
        .into_iter()
        .map(|(a, b, n)| CoPurchaseRecord {
            query_a: QueryId(a as u32),
            query_b: QueryId(b as u32),
            shared_products: n,
        })
        .collect()
}

/// Hold out every pair touching `n_test_queries` sampled queries, then split
/// the remainder 90/10 into train and validation.
pub fn make_split<T: PairEndpoints + Clone>(
    pairs: &[T],
    n_test_queries: usize,
    seed: u64,
) -> Result<DatasetSplit<T>> {
    let distinct: BTreeSet<QueryId> = pairs
        .iter()
        .flat_map(|p| {
            let (a, b) = p.endpoints();
            [a, b]
        })
        .collect();
    if n_test_queries >= distinct.len() {
        return Err(Error::InvalidArgument(format!(
            "n_test_queries = {n_test_queries} must be below the {} distinct queries in the pairs",
            distinct.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates: Vec<QueryId> = distinct.into_iter().collect();
    candidates.shuffle(&mut rng);
    let test_query_ids: BTreeSet<QueryId> = candidates.into_iter().take(n_test_queries).collect();
    Ok(split_with_test_queries(pairs, test_query_ids, seed))
}

/// Split with a fixed set of test queries, so several pair sets can share
/// one held-out test population.
pub fn split_with_test_queries<T: PairEndpoints + Clone>(
    pairs: &[T],
    test_query_ids: BTreeSet<QueryId>,
    seed: u64,
) -> DatasetSplit<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0011);
    let (test_idx, rest_idx): (Vec<usize>, Vec<usize>) = (0..pairs.len()).partition(|&i| {
        let (a, b) = pairs[i].endpoints();
        test_query_ids.contains(&a) || test_query_ids.contains(&b)
    });
    let mut shuffled = rest_idx;
    shuffled.shuffle(&mut rng);
    let n_val = (shuffled.len() as f64 * VALIDATION_FRACTION).round() as usize;
    let mut val_idx = shuffled[..n_val].to_vec();
    let mut train_idx = shuffled[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| pairs[i].clone()).collect::<Vec<T>>();
    DatasetSplit {
        train: pick(&train_idx),
        validation: pick(&val_idx),
        test: pick(&test_idx),
        test_query_ids,
    }
}
