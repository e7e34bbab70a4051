//! SID trie, beam search over SID digits, a co-occurrence scorer and reward
//! reranking of generated candidates.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curriculum::TaskRecord;
use crate::error::{Error, Result};
use crate::identity::parse_digit_token;
use crate::quantizer::Sid;
use crate::reward::rscore;

pub const DEFAULT_BEAM: usize = 512;

#[derive(Debug, Clone, Default)]
struct Node {
    children: BTreeMap<u32, usize>,
    items: Vec<String>,
}

/// Prefix tree over catalog SIDs; leaves carry the ids of items holding that SID.
#[derive(Debug, Clone)]
pub struct SidTrie {
    nodes: Vec<Node>,
    depth: Option<usize>,
    rq_len: usize,
    items: usize,
}

impl SidTrie {
    pub fn build<'a>(entries: impl IntoIterator<Item = (&'a String, &'a Sid)>) -> Result<Self> {
        let mut trie = SidTrie {
            nodes: vec![Node::default()],
            depth: None,
            rq_len: 0,
            items: 0,
        };
        for (id, sid) in entries {
            match trie.depth {
                None => {
                    trie.depth = Some(sid.len());
                    trie.rq_len = sid.rq_len();
                }
                Some(d) if d != sid.len() => {
                    return Err(Error::InvalidArgument(format!(
                        "SID for {id} has {} digits, trie holds {d}-digit SIDs",
                        sid.len()
                    )));
                }
                Some(_) => {}
            }
            let mut node = 0;
            for &digit in sid.digits() {
                node = match trie.nodes[node].children.get(&digit) {
                    Some(&n) => n,
                    None => {
                        trie.nodes.push(Node::default());
                        let n = trie.nodes.len() - 1;
                        trie.nodes[node].children.insert(digit, n);
                        n
                    }
                };
            }
            trie.nodes[node].items.push(id.clone());
            trie.items += 1;
        }
        Ok(trie)
    }

    pub fn depth(&self) -> usize {
        self.depth.unwrap_or(0)
    }

    pub fn rq_len(&self) -> usize {
        self.rq_len
    }

    pub fn is_empty(&self) -> bool {
        self.items == 0
    }

    pub fn item_count(&self) -> usize {
        self.items
    }

    fn walk(&self, digits: &[u32]) -> Option<usize> {
        digits
            .iter()
            .try_fold(0usize, |node, d| self.nodes[node].children.get(d).copied())
    }

    /// Allowed next digits after `prefix`, ascending.
    pub fn children(&self, prefix: &[u32]) -> Vec<u32> {
        self.walk(prefix)
            .map(|n| self.nodes[n].children.keys().copied().collect())
            .unwrap_or_default()
    }

    /// Item ids at a complete SID, empty if the SID is not in the trie.
    pub fn items(&self, digits: &[u32]) -> &[String] {
        match self.walk(digits) {
            Some(n) if digits.len() == self.depth() => &self.nodes[n].items,
            _ => &[],
        }
    }

    pub fn contains(&self, digits: &[u32]) -> bool {
        !self.items(digits).is_empty()
    }

    /// Every complete SID in lexicographic digit order.
    pub fn paths(&self) -> Vec<Vec<u32>> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((node, path)) = stack.pop() {
            if path.len() == self.depth() && !self.nodes[node].items.is_empty() {
                out.push(path.clone());
            }
            for (&d, &child) in self.nodes[node].children.iter().rev() {
                let mut p = path.clone();
                p.push(d);
                stack.push((child, p));
            }
        }
        out
    }
}

/// Log-score of appending `digit` to `prefix` given the prompt tokens.
pub trait Scorer: Sync {
    fn score(&self, context: &[String], prefix: &[u32], digit: u32) -> f64;
}

impl<F> Scorer for F
where
    F: Fn(&[String], &[u32], u32) -> f64 + Sync,
{
    fn score(&self, context: &[String], prefix: &[u32], digit: u32) -> f64 {
        self(context, prefix, digit)
    }
}

/// Scores every digit equally.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformScorer;

impl Scorer for UniformScorer {
    fn score(&self, _: &[String], _: &[u32], _: u32) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Decoding<'a> {
    /// Expand only continuations present in the trie.
    Constrained(&'a SidTrie),
    /// Expand every digit below `bounds`; terminals are checked against the trie if given.
    Unconstrained {
        bounds: &'a [u32],
        trie: Option<&'a SidTrie>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub digits: Vec<u32>,
    pub score: f64,
    /// Whether the SID exists in the catalog (always true when constrained).
    pub valid: bool,
    pub items: Vec<String>,
}

/// Higher score first, then lexicographically smaller digits.
pub fn rank_order(a: (&[u32], f64), b: (&[u32], f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Beam search over SID digits with summed log-scores.
pub fn beam_search(context: &[String], scorer: &dyn Scorer, beam: usize, decoding: Decoding<'_>) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::InvalidArgument("beam must be at least 1".into()));
    }
    let depth = match decoding {
        Decoding::Constrained(trie) => {
            if trie.is_empty() {
                return Ok(Vec::new());
            }
            trie.depth()
        }
        Decoding::Unconstrained { bounds, .. } => bounds.len(),
    };
    let mut hyps: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    for pos in 0..depth {
        let mut next: Vec<(Vec<u32>, f64)> = hyps
            .par_iter()
            .flat_map_iter(|(prefix, score)| {
                let digits: Vec<u32> = match decoding {
                    Decoding::Constrained(trie) => trie.children(prefix),
                    Decoding::Unconstrained { bounds, .. } => (0..bounds[pos]).collect(),
                };
                digits.into_iter().map(move |d| {
                    let mut p = prefix.clone();
                    p.push(d);
                    let s = score + scorer.score(context, prefix, d);
                    (p, s)
                })
            })
            .collect();
        next.sort_by(|a, b| rank_order((&a.0, a.1), (&b.0, b.1)));
        next.truncate(beam);
        hyps = next;
    }
    Ok(hyps
        .into_iter()
        .map(|(digits, score)| {
            let trie = match decoding {
                Decoding::Constrained(t) => Some(t),
                Decoding::Unconstrained { trie, .. } => trie,
            };
            let items = trie.map(|t| t.items(&digits).to_vec()).unwrap_or_default();
            let valid = match decoding {
                Decoding::Constrained(_) => true,
                Decoding::Unconstrained { trie: Some(_), .. } => !items.is_empty(),
                Decoding::Unconstrained { trie: None, .. } => false,
            };
            Hypothesis {
                digits,
                score,
                valid,
                items,
            }
        })
        .collect())
}

/// Smoothed digit frequencies conditioned on the query SID's first digit and
/// the previous target digit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceScorer {
    pub bounds: Vec<u32>,
    pub rq_len: usize,
    /// Per position: `"{q1}:{prev}"` → digit → count, `-` marking an absent value.
    pub counts: Vec<BTreeMap<String, BTreeMap<u32, u64>>>,
    pub totals: Vec<BTreeMap<String, u64>>,
    pub records: usize,
}

fn cond_key(q1: Option<u32>, prev: Option<u32>) -> String {
    let f = |x: Option<u32>| x.map_or_else(|| "-".to_string(), |v| v.to_string());
    format!("{}:{}", f(q1), f(prev))
}

/// First digit of the query SID in a prompt, if present.
pub fn query_first_digit<S: AsRef<str>>(context: &[S]) -> Option<u32> {
    context
        .iter()
        .find_map(|t| match parse_digit_token(t.as_ref()) {
            Some(('q', 1, code)) => Some(code),
            _ => None,
        })
}

impl CooccurrenceScorer {
    pub fn new(bounds: Vec<u32>, rq_len: usize) -> Self {
        let n = bounds.len();
        Self {
            bounds,
            rq_len,
            counts: vec![BTreeMap::new(); n],
            totals: vec![BTreeMap::new(); n],
            records: 0,
        }
    }

    pub fn observe(&mut self, context: &[String], target: &Sid) -> Result<()> {
        target.check_bounds(&self.bounds)?;
        let q1 = query_first_digit(context);
        let mut prev = None;
        for (k, &d) in target.digits().iter().enumerate() {
            let key = cond_key(q1, prev);
            *self.counts[k].entry(key.clone()).or_default().entry(d).or_default() += 1;
            *self.totals[k].entry(key).or_default() += 1;
            prev = Some(d);
        }
        self.records += 1;
        Ok(())
    }

    /// Fits on records whose target is a single SID; others are ignored.
    pub fn fit(records: &[TaskRecord], bounds: Vec<u32>, rq_len: usize) -> Result<Self> {
        let mut s = Self::new(bounds, rq_len);
        for r in records {
            if let Ok(sid) = r.target_sid(rq_len) {
                if sid.len() == s.bounds.len() {
                    s.observe(&r.input_tokens, &sid)?;
                }
            }
        }
        Ok(s)
    }

    pub fn log_prob(&self, q1: Option<u32>, prefix: &[u32], digit: u32) -> f64 {
        let k = prefix.len();
        if k >= self.bounds.len() {
            return f64::NEG_INFINITY;
        }
        let key = cond_key(q1, prefix.last().copied());
        let c = self.counts[k].get(&key).and_then(|m| m.get(&digit)).copied().unwrap_or(0);
        let t = self.totals[k].get(&key).copied().unwrap_or(0);
        ((c + 1) as f64).ln() - ((t + self.bounds[k] as u64) as f64).ln()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if s.counts.len() != s.bounds.len() || s.totals.len() != s.bounds.len() {
            return Err(Error::Format("scorer tables disagree with its bounds".into()));
        }
        Ok(s)
    }
}

impl Scorer for CooccurrenceScorer {
    fn score(&self, context: &[String], prefix: &[u32], digit: u32) -> f64 {
        self.log_prob(query_first_digit(context), prefix, digit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentScores {
    pub ctr: f64,
    pub cvr: f64,
    pub ctcvr: f64,
    pub s_rel: f64,
}

/// Stable sort of `candidates` by fused reward score, highest first.
pub fn rerank_with_rscore(
    candidates: &[String],
    scores: &HashMap<String, ComponentScores>,
    lambdas: &[f64; 4],
) -> Result<Vec<(String, f64)>> {
    let mut out = candidates
        .iter()
        .map(|c| {
            let s = scores.get(c).ok_or_else(|| Error::Missing {
                what: "component scores",
                id: c.clone(),
            })?;
            Ok((c.clone(), rscore(s.ctr, s.cvr, s.ctcvr, s.s_rel, lambdas)))
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(out)
}
