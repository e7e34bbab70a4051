//! Calibrated CTR/CVR rewards, preference deltas, score fusion and the
//! list-wise preference loss.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Base reward weight per behavior level 1..=6.
pub const BASE_WEIGHTS: [f64; 6] = [2.0, 1.5, 1.0, 0.5, 0.2, 0.0];
pub const DEFAULT_EPSILON: f64 = 1e-3;
const SMOOTHING: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionRecord {
    pub query_id: String,
    pub item_id: String,
    pub level: u8,
    pub cnt_pos: u64,
    pub cnt_clk: u64,
    pub cnt_order: u64,
}

impl InteractionRecord {
    pub fn new(
        query_id: impl Into<String>,
        item_id: impl Into<String>,
        level: u8,
        cnt_pos: u64,
        cnt_clk: u64,
        cnt_order: u64,
    ) -> Result<Self> {
        if !(1..=6).contains(&level) {
            return Err(Error::InvalidArgument(format!("behavior level {level} outside 1..=6")));
        }
        Ok(Self {
            query_id: query_id.into(),
            item_id: item_id.into(),
            level,
            cnt_pos,
            cnt_clk,
            cnt_order,
        })
    }
}

/// Smoothed (ctr, cvr) from exposure, click and order counts.
pub fn calibrated_rates(rec: &InteractionRecord) -> (f64, f64) {
    let pos = (rec.cnt_pos as f64 + SMOOTHING).ln();
    let clk = (rec.cnt_clk as f64 + SMOOTHING).ln();
    let ord = (rec.cnt_order as f64 + SMOOTHING).ln();
    let total = pos + clk + ord;
    (clk / total, ord / clk)
}

/// Level weight times the harmonic mean of the calibrated rates.
pub fn reward_score(rec: &InteractionRecord, base_weights: &[f64; 6]) -> f64 {
    let (ctr, cvr) = calibrated_rates(rec);
    2.0 * base_weights[rec.level as usize - 1] * ctr * cvr / (ctr + cvr)
}

/// 1 / max(r_pos − r_neg, epsilon).
pub fn preference_delta(r_pos: f64, r_neg: f64, epsilon: f64) -> Result<f64> {
    if !(r_pos.is_finite() && r_neg.is_finite()) {
        return Err(Error::NonFinite("preference rewards"));
    }
    if r_pos < r_neg {
        return Err(Error::PairOrdering { pos: r_pos, neg: r_neg });
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(1.0 / (r_pos - r_neg).max(epsilon))
}

pub fn rscore(ctr: f64, cvr: f64, ctcvr: f64, s_rel: f64, lambdas: &[f64; 4]) -> f64 {
    lambdas[0] * ctr + lambdas[1] * cvr + lambdas[2] * ctcvr + 10.0 * lambdas[3] * s_rel
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoConfig {
    pub beta: f64,
    pub alpha: f64,
    pub delta_margin: f64,
}

impl DpoConfig {
    pub fn new(beta: f64, alpha: f64, delta_margin: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
        }
        if !(alpha >= 0.0 && alpha.is_finite() && delta_margin >= 0.0 && delta_margin.is_finite()) {
            return Err(Error::InvalidArgument("alpha and delta must be non-negative".into()));
        }
        Ok(Self {
            beta,
            alpha,
            delta_margin,
        })
    }
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            alpha: 0.05,
            delta_margin: 0.1,
        }
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// −[log σ(log Σ_l exp(rw_l · max(0, r̂_w − r̂_l − δ))) + α · log π(w)] with
/// implicit rewards r̂ = β (policy − reference).
pub fn listwise_dpo_loss(
    policy_logp_w: f64,
    ref_logp_w: f64,
    policy_logp_l: &[f64],
    ref_logp_l: &[f64],
    deltas: &[f64],
    cfg: &DpoConfig,
) -> Result<f64> {
    if policy_logp_l.is_empty() {
        return Err(Error::Empty("loser list"));
    }
    if policy_logp_l.len() != ref_logp_l.len() || policy_logp_l.len() != deltas.len() {
        return Err(Error::InvalidArgument(format!(
            "loser lists disagree in length: {} policy, {} reference, {} deltas",
            policy_logp_l.len(),
            ref_logp_l.len(),
            deltas.len()
        )));
    }
    let all_finite = [policy_logp_w, ref_logp_w]
        .iter()
        .chain(policy_logp_l)
        .chain(ref_logp_l)
        .chain(deltas)
        .all(|x| x.is_finite());
    if !all_finite {
        return Err(Error::NonFinite("preference loss inputs"));
    }
    let r_w = cfg.beta * (policy_logp_w - ref_logp_w);
    let terms: Vec<f64> = policy_logp_l
        .iter()
        .zip(ref_logp_l)
        .zip(deltas)
        .map(|((&p, &r), &rw)| rw * (r_w - cfg.beta * (p - r) - cfg.delta_margin).max(0.0))
        .collect();
    let loss = -(log_sigmoid(log_sum_exp(&terms)) + cfg.alpha * policy_logp_w);
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite("preference loss"))
    }
}

/// One winner against several losers for a shared context.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceList {
    pub context: String,
    pub winner: String,
    pub losers: Vec<String>,
    pub delta_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RerankRecord {
    pub query_id: String,
    pub item_id: String,
    pub before: u32,
    pub after: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildCounters {
    pub rerank_lists: usize,
    pub behavior_lists: usize,
    /// Candidate lists dropped because no loser survived.
    pub skipped_no_loser: usize,
    /// Losers dropped because they out-scored the winner.
    pub ordering_violations: usize,
}

type RewardTable<'a> = HashMap<(&'a str, &'a str), f64>;

fn finish_list(
    context: &str,
    winner: &str,
    candidates: impl IntoIterator<Item = String>,
    rewards: &RewardTable<'_>,
    counters: &mut BuildCounters,
) -> Option<PreferenceList> {
    let r_w = rewards.get(&(context, winner)).copied().unwrap_or(0.0);
    let mut losers = Vec::new();
    let mut deltas = Vec::new();
    for loser in candidates {
        let r_l = rewards.get(&(context, loser.as_str())).copied().unwrap_or(0.0);
        match preference_delta(r_w, r_l, DEFAULT_EPSILON) {
            Ok(d) => {
                losers.push(loser);
                deltas.push(d);
            }
            Err(_) => counters.ordering_violations += 1,
        }
    }
    if losers.is_empty() {
        counters.skipped_no_loser += 1;
        return None;
    }
    Some(PreferenceList {
        context: context.to_string(),
        winner: winner.to_string(),
        losers,
        delta_weights: deltas,
    })
}

/// Rerank-driven lists first (winner: best-placed promoted or clicked item of a
/// query whose ranking changed; losers: the items placed below it that were
/// neither), then behavior-level lists (each level 1–3 item against the
/// query's level 4–6 items). Output is ordered by query id.
pub fn build_preference_lists(
    interactions: &[InteractionRecord],
    reranks: &[RerankRecord],
) -> (Vec<PreferenceList>, BuildCounters) {
    let mut counters = BuildCounters::default();
    let mut rewards: RewardTable<'_> = HashMap::new();
    let mut clicked: BTreeSet<(&str, &str)> = BTreeSet::new();
    let mut by_query: BTreeMap<&str, Vec<&InteractionRecord>> = BTreeMap::new();
    for rec in interactions {
        rewards.insert((&rec.query_id, &rec.item_id), reward_score(rec, &BASE_WEIGHTS));
        if rec.cnt_clk > 0 {
            clicked.insert((&rec.query_id, &rec.item_id));
        }
        by_query.entry(&rec.query_id).or_default().push(rec);
    }
    let mut out = Vec::new();

    let mut rerank_by_query: BTreeMap<&str, Vec<&RerankRecord>> = BTreeMap::new();
    for r in reranks {
        rerank_by_query.entry(&r.query_id).or_default().push(r);
    }
    for (query, mut rows) in rerank_by_query {
        if rows.iter().all(|r| r.before == r.after) {
            continue;
        }
        rows.sort_by(|a, b| a.after.cmp(&b.after).then_with(|| a.item_id.cmp(&b.item_id)));
        let is_positive = |r: &RerankRecord| r.after < r.before || clicked.contains(&(query, r.item_id.as_str()));
        let Some(w) = rows.iter().position(|r| is_positive(r)) else {
            continue;
        };
        let winner = &rows[w];
        let candidates = rows[w + 1..]
            .iter()
            .filter(|r| r.after > winner.after && !is_positive(r))
            .map(|r| r.item_id.clone());
        if let Some(list) = finish_list(query, &winner.item_id, candidates, &rewards, &mut counters) {
            counters.rerank_lists += 1;
            out.push(list);
        }
    }

    for (query, mut recs) in by_query {
        recs.sort_by(|a, b| a.level.cmp(&b.level).then_with(|| a.item_id.cmp(&b.item_id)));
        let negatives: Vec<&str> = recs.iter().filter(|r| r.level >= 4).map(|r| r.item_id.as_str()).collect();
        for winner in recs.iter().filter(|r| r.level <= 3) {
            let candidates = negatives.iter().map(|s| s.to_string());
            if let Some(list) = finish_list(query, &winner.item_id, candidates, &rewards, &mut counters) {
                counters.behavior_lists += 1;
                out.push(list);
            }
        }
    }
    (out, counters)
}

fn split_tsv<'a>(path: &Path, idx: usize, line: &'a str, n: usize, layout: &str) -> Result<Vec<&'a str>> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != n {
        return Err(Error::parse(path, idx + 1, format!("expected `{layout}`")));
    }
    Ok(f)
}

fn num<T: std::str::FromStr>(path: &Path, idx: usize, s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::parse(path, idx + 1, format!("bad number `{s}`")))
}

fn data_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if !line.is_empty() {
            out.push((idx, line));
        }
    }
    Ok(out)
}

/// Reads `query<TAB>item<TAB>level<TAB>cnt_pos<TAB>cnt_clk<TAB>cnt_order`.
pub fn read_interactions(path: impl AsRef<Path>) -> Result<Vec<InteractionRecord>> {
    let path = path.as_ref();
    data_lines(path)?
        .into_iter()
        .map(|(idx, line)| {
            let f = split_tsv(path, idx, &line, 6, "query<TAB>item<TAB>level<TAB>cnt_pos<TAB>cnt_clk<TAB>cnt_order")?;
            InteractionRecord::new(
                f[0],
                f[1],
                num(path, idx, f[2])?,
                num(path, idx, f[3])?,
                num(path, idx, f[4])?,
                num(path, idx, f[5])?,
            )
            .map_err(|e| Error::parse(path, idx + 1, e.to_string()))
        })
        .collect()
}

/// Reads `query<TAB>item<TAB>before<TAB>after`.
pub fn read_reranks(path: impl AsRef<Path>) -> Result<Vec<RerankRecord>> {
    let path = path.as_ref();
    data_lines(path)?
        .into_iter()
        .map(|(idx, line)| {
            let f = split_tsv(path, idx, &line, 4, "query<TAB>item<TAB>before<TAB>after")?;
            Ok(RerankRecord {
                query_id: f[0].to_string(),
                item_id: f[1].to_string(),
                before: num(path, idx, f[2])?,
                after: num(path, idx, f[3])?,
            })
        })
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Writes `context<TAB>winner<TAB>l1,l2,...<TAB>d1,d2,...`.
pub fn write_lists<W: Write>(mut w: W, lists: &[PreferenceList]) -> Result<()> {
    for l in lists {
        writeln!(w, "{}\t{}\t{}\t{}", l.context, l.winner, join(&l.losers), join(&l.delta_weights))?;
    }
    Ok(())
}

pub fn read_lists(path: impl AsRef<Path>) -> Result<Vec<PreferenceList>> {
    let path = path.as_ref();
    data_lines(path)?
        .into_iter()
        .map(|(idx, line)| {
            let f = split_tsv(path, idx, &line, 4, "context<TAB>winner<TAB>losers<TAB>deltas")?;
            let losers: Vec<String> = f[2].split(',').map(str::to_string).collect();
            let deltas = f[3].split(',').map(|d| num(path, idx, d)).collect::<Result<Vec<f64>>>()?;
            if losers.len() != deltas.len() {
                return Err(Error::parse(path, idx + 1, "losers and deltas differ in length"));
            }
            Ok(PreferenceList {
                context: f[0].to_string(),
                winner: f[1].to_string(),
                losers,
                delta_weights: deltas,
            })
        })
        .collect()
}

/// (context, item) → (policy log-prob, reference log-prob).
pub type LogProbs = HashMap<(String, String), (f64, f64)>;

/// Reads `context<TAB>item<TAB>policy<TAB>reference`.
pub fn read_logprobs(path: impl AsRef<Path>) -> Result<LogProbs> {
    let path = path.as_ref();
    let mut out = HashMap::new();
    for (idx, line) in data_lines(path)? {
        let f = split_tsv(path, idx, &line, 4, "context<TAB>item<TAB>policy<TAB>reference")?;
        out.insert((f[0].to_string(), f[1].to_string()), (num(path, idx, f[2])?, num(path, idx, f[3])?));
    }
    Ok(out)
}

/// Loss of one list with log-probabilities looked up per (context, item).
pub fn list_loss(list: &PreferenceList, logprobs: &LogProbs, cfg: &DpoConfig) -> Result<f64> {
    let get = |item: &str| {
        logprobs
            .get(&(list.context.clone(), item.to_string()))
            .copied()
            .ok_or_else(|| Error::Missing {
                what: "log-probabilities",
                id: format!("{}/{item}", list.context),
            })
    };
    let (pw, rw) = get(&list.winner)?;
    let (pl, rl): (Vec<f64>, Vec<f64>) = list.losers.iter().map(|l| get(l)).collect::<Result<Vec<_>>>()?.into_iter().unzip();
    listwise_dpo_loss(pw, rw, &pl, &rl, &list.delta_weights, cfg)
}
