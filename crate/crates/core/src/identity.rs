//! Behavior-sequence user IDs, long-sequence centroid aggregates and prompt
//! assembly.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::embedding::{Catalog, Embedding};
use crate::error::{Error, Result};
use crate::quantizer::{RqOpqCodebook, Sid};

/// Sequences longer than this keep only their most recent items before weighting.
pub const MAX_WEIGHTED_LEN: usize = 50;

pub const BOS: &str = "[BOS]";
pub const SEP: &str = "[SEP]";
pub const EOS: &str = "[EOS]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SeqKind {
    ShortClick,
    LongClick,
    LongOrder,
    LongRsu,
}

impl SeqKind {
    pub fn max_len(self) -> usize {
        match self {
            SeqKind::ShortClick => 50,
            _ => 1000,
        }
    }
}

/// Items ordered oldest first; the last item is the most recent.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorSequence {
    pub kind: SeqKind,
    pub items: Vec<Sid>,
}

impl BehaviorSequence {
    pub fn new(kind: SeqKind, items: Vec<Sid>) -> Self {
        Self { kind, items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Position weights exp(√i) / Σ exp(√j) for i = 1..=m.
pub fn position_weights(m: usize) -> Vec<f64> {
    if m == 0 {
        return Vec::new();
    }
    let top = (m as f64).sqrt();
    let raw: Vec<f64> = (1..=m).map(|i| ((i as f64).sqrt() - top).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Elementwise ceiling of the position-weighted digit average, clamped to `bounds`.
pub fn weighted_sid(items: &[Sid], bounds: &[u32]) -> Result<Sid> {
    let first = items.first().ok_or(Error::Empty("behavior sequence"))?;
    if first.len() != bounds.len() {
        return Err(Error::InvalidArgument(format!(
            "SID has {} digits, layout expects {}",
            first.len(),
            bounds.len()
        )));
    }
    let tail = &items[items.len().saturating_sub(MAX_WEIGHTED_LEN)..];
    let weights = position_weights(tail.len());
    let mut acc = vec![0.0f64; bounds.len()];
    for (sid, w) in tail.iter().zip(&weights) {
        sid.check_bounds(bounds)?;
        if sid.rq_len() != first.rq_len() {
            return Err(Error::InvalidArgument("mixed SID layouts in sequence".into()));
        }
        for (a, &d) in acc.iter_mut().zip(sid.digits()) {
            *a += w * d as f64;
        }
    }
    let digits = acc
        .iter()
        .zip(bounds)
        .map(|(&x, &b)| {
            // a convex combination of equal integers must stay that integer
            let r = x.round();
            let x = if (x - r).abs() < 1e-9 { r } else { x };
            (x.ceil().max(0.0) as u32).min(b - 1)
        })
        .collect();
    Sid::from_digits(digits, first.rq_len())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSid {
    pub short_part: Sid,
    pub long_part: Sid,
}

impl UserSid {
    pub fn digits(&self) -> Vec<u32> {
        let mut d = self.short_part.digits().to_vec();
        d.extend_from_slice(self.long_part.digits());
        d
    }
}

impl fmt::Display for UserSid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}", self.short_part, self.long_part)
    }
}

/// Builds the user id from the short and long sequences. An empty sequence
/// falls back to `default` (the query's cold-start list) when given.
pub fn build_user_sid(
    short: &BehaviorSequence,
    long: &BehaviorSequence,
    bounds: &[u32],
    default: Option<&BehaviorSequence>,
) -> Result<UserSid> {
    let pick = |s: &BehaviorSequence| -> Result<Sid> {
        let items = if s.is_empty() {
            match default {
                Some(d) if !d.is_empty() => &d.items,
                _ => return Err(Error::Empty("behavior sequence without cold-start default")),
            }
        } else {
            &s.items
        };
        weighted_sid(items, bounds)
    };
    Ok(UserSid {
        short_part: pick(short)?,
        long_part: pick(long)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClickStat {
    pub item_id: String,
    pub pv: u64,
    pub sid: Sid,
}

/// Query → clicked items. The query `*` holds the global fallback list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClickStats {
    pub by_query: BTreeMap<String, Vec<ClickStat>>,
}

pub const FALLBACK_QUERY: &str = "*";

impl ClickStats {
    pub fn insert(&mut self, query: impl Into<String>, stat: ClickStat) {
        self.by_query.entry(query.into()).or_default().push(stat);
    }

    /// Reads `query<TAB>item<TAB>pv<TAB>c1,c2,...` lines.
    pub fn read(path: impl AsRef<Path>, rq_len: usize) -> Result<Self> {
        let path = path.as_ref();
        let mut stats = Self::default();
        for (idx, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::parse(path, idx + 1, "expected `query<TAB>item<TAB>pv<TAB>sid`"));
            }
            let pv = f[2]
                .parse()
                .map_err(|_| Error::parse(path, idx + 1, format!("bad page views `{}`", f[2])))?;
            let sid = Sid::parse(f[3], rq_len).map_err(|e| Error::parse(path, idx + 1, e.to_string()))?;
            stats.insert(
                f[0],
                ClickStat {
                    item_id: f[1].to_string(),
                    pv,
                    sid,
                },
            );
        }
        Ok(stats)
    }
}

/// Most-viewed clicked items for `query` (or the global fallback), page views
/// descending with ties by item id, capped at [`MAX_WEIGHTED_LEN`].
pub fn default_sequence(query: &str, stats: &ClickStats) -> Result<BehaviorSequence> {
    let list = stats
        .by_query
        .get(query)
        .filter(|l| !l.is_empty())
        .or_else(|| stats.by_query.get(FALLBACK_QUERY).filter(|l| !l.is_empty()))
        .ok_or_else(|| Error::Missing {
            what: "click stats or fallback",
            id: query.to_string(),
        })?;
    let mut ranked: Vec<&ClickStat> = list.iter().collect();
    ranked.sort_by(|a, b| b.pv.cmp(&a.pv).then_with(|| a.item_id.cmp(&b.item_id)));
    ranked.truncate(MAX_WEIGHTED_LEN);
    Ok(BehaviorSequence::new(
        SeqKind::ShortClick,
        ranked.into_iter().map(|s| s.sid.clone()).collect(),
    ))
}

/// Per-level centroid sums for the click, order and RSU long sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct LongSeqAggregate {
    pub click: Vec<Vec<f64>>,
    pub order: Vec<Vec<f64>>,
    pub rsu: Vec<Vec<f64>>,
}

fn level_sums(seq: &BehaviorSequence, codebook: &RqOpqCodebook) -> Result<Vec<Vec<f64>>> {
    let mut sums = vec![vec![0.0; codebook.dim()]; codebook.rq_len()];
    for sid in &seq.items {
        for (sum, c) in sums.iter_mut().zip(codebook.lookup_centroids(sid)?) {
            for (s, v) in sum.iter_mut().zip(c) {
                *s += v;
            }
        }
    }
    Ok(sums)
}

pub fn aggregate_long(
    click: &BehaviorSequence,
    order: &BehaviorSequence,
    rsu: &BehaviorSequence,
    codebook: &RqOpqCodebook,
) -> Result<LongSeqAggregate> {
    Ok(LongSeqAggregate {
        click: level_sums(click, codebook)?,
        order: level_sums(order, codebook)?,
        rsu: level_sums(rsu, codebook)?,
    })
}

impl LongSeqAggregate {
    /// Nine vectors with ids `click.L1` … `rsu.L3`.
    pub fn to_catalog(&self) -> Result<Catalog> {
        let dim = self.click.first().map_or(0, Vec::len);
        let mut cat = Catalog::new(dim)?;
        for (name, levels) in [("click", &self.click), ("order", &self.order), ("rsu", &self.rsu)] {
            for (l, v) in levels.iter().enumerate() {
                let vector = v.iter().map(|&x| x as f32).collect();
                cat.push(Embedding::new(format!("{name}.L{}", l + 1), vector)?)?;
            }
        }
        Ok(cat)
    }
}

/// Prompt segments. Empty segments are omitted when assembling.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PromptParts {
    pub user: Option<UserSid>,
    pub query_text: Vec<String>,
    pub query_sid: Option<Sid>,
    pub recent_queries: Vec<Sid>,
    pub short_clicks: Vec<Sid>,
    /// Reference to a long-sequence aggregate kept outside the token stream.
    pub long_ref: Option<String>,
}

impl PromptParts {
    pub fn with_text(mut self, text: &str) -> Self {
        self.query_text = text.split_whitespace().map(str::to_string).collect();
        self
    }
}

fn push_sid(out: &mut Vec<String>, tag: char, sid: &Sid) {
    for (l, c) in sid.digits().iter().enumerate() {
        out.push(format!("<{tag}{}_{c}>", l + 1));
    }
}

fn escape_word(w: &str) -> String {
    if w.starts_with(['<', '[', '\\']) {
        format!("\\{w}")
    } else {
        w.to_string()
    }
}

/// Serializes the prompt as `[BOS] user [SEP] text [SEP] query-SID [SEP]
/// recent-query SIDs [SEP] short-click SIDs [SEP] long-ref [EOS]`, with
/// empty segments dropped so separators never repeat.
pub fn assemble_prompt(parts: &PromptParts) -> Vec<String> {
    let mut segments: Vec<Vec<String>> = Vec::new();
    if let Some(user) = &parts.user {
        segments.push(
            user.digits()
                .iter()
                .enumerate()
                .map(|(p, c)| format!("<u{}_{c}>", p + 1))
                .collect(),
        );
    }
    segments.push(parts.query_text.iter().map(|w| escape_word(w)).collect());
    let mut q = Vec::new();
    if let Some(sid) = &parts.query_sid {
        push_sid(&mut q, 'q', sid);
    }
    segments.push(q);
    let mut r = Vec::new();
    for sid in &parts.recent_queries {
        push_sid(&mut r, 'r', sid);
    }
    segments.push(r);
    let mut s = Vec::new();
    for sid in &parts.short_clicks {
        push_sid(&mut s, 'i', sid);
    }
    segments.push(s);
    if let Some(long) = &parts.long_ref {
        segments.push(vec![format!("<long:{long}>")]);
    }

    let mut out = vec![BOS.to_string()];
    for seg in segments.into_iter().filter(|s| !s.is_empty()) {
        if out.len() > 1 {
            out.push(SEP.to_string());
        }
        out.extend(seg);
    }
    out.push(EOS.to_string());
    out
}

pub fn prompt_string(parts: &PromptParts) -> String {
    assemble_prompt(parts).join(" ")
}

/// Splits `<{tag}{pos}_{code}>` into (tag, pos, code).
pub fn parse_digit_token(tok: &str) -> Option<(char, usize, u32)> {
    let body = tok.strip_prefix('<')?.strip_suffix('>')?;
    let mut chars = body.chars();
    let tag = chars.next()?;
    let (pos, code) = chars.as_str().split_once('_')?;
    Some((tag, pos.parse().ok()?, code.parse().ok()?))
}

fn group_sids(digits: &[(usize, u32)], sid_len: usize, rq_len: usize) -> Result<Vec<Sid>> {
    if sid_len == 0 || digits.len() % sid_len != 0 {
        return Err(Error::Format(format!(
            "{} SID digits do not split into {sid_len}-digit SIDs",
            digits.len()
        )));
    }
    digits
        .chunks(sid_len)
        .map(|chunk| {
            for (l, &(pos, _)) in chunk.iter().enumerate() {
                if pos != l + 1 {
                    return Err(Error::Format(format!("SID digit at position {pos}, expected {}", l + 1)));
                }
            }
            Sid::from_digits(chunk.iter().map(|&(_, c)| c).collect(), rq_len)
        })
        .collect()
}

/// Inverse of [`assemble_prompt`] for SIDs of `sid_len` digits with `rq_len` RQ digits.
pub fn parse_prompt<S: AsRef<str>>(tokens: &[S], sid_len: usize, rq_len: usize) -> Result<PromptParts> {
    let toks: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    if toks.first() != Some(&BOS) || toks.last() != Some(&EOS) || toks.len() < 2 {
        return Err(Error::Format("prompt must start with [BOS] and end with [EOS]".into()));
    }
    let mut parts = PromptParts::default();
    let inner = &toks[1..toks.len() - 1];
    if inner.is_empty() {
        return Ok(parts);
    }
    let mut user = Vec::new();
    let mut q = Vec::new();
    let mut r = Vec::new();
    let mut s = Vec::new();
    for seg in inner.split(|t| *t == SEP) {
        if seg.is_empty() {
            return Err(Error::Format("empty prompt segment".into()));
        }
        for &tok in seg {
            if let Some(word) = tok.strip_prefix('\\') {
                parts.query_text.push(word.to_string());
            } else if let Some(long) = tok.strip_prefix("<long:").and_then(|t| t.strip_suffix('>')) {
                parts.long_ref = Some(long.to_string());
            } else if let Some((tag, pos, code)) = parse_digit_token(tok) {
                match tag {
                    'u' => user.push((pos, code)),
                    'q' => q.push((pos, code)),
                    'r' => r.push((pos, code)),
                    'i' => s.push((pos, code)),
                    _ => return Err(Error::Format(format!("unknown token `{tok}`"))),
                }
            } else if tok.starts_with(['<', '[']) {
                return Err(Error::Format(format!("unknown token `{tok}`")));
            } else {
                parts.query_text.push(tok.to_string());
            }
        }
    }
    if !user.is_empty() {
        if user.len() != 2 * sid_len || user.iter().enumerate().any(|(i, &(p, _))| p != i + 1) {
            return Err(Error::Format("malformed user id segment".into()));
        }
        let d: Vec<u32> = user.iter().map(|&(_, c)| c).collect();
        parts.user = Some(UserSid {
            short_part: Sid::from_digits(d[..sid_len].to_vec(), rq_len)?,
            long_part: Sid::from_digits(d[sid_len..].to_vec(), rq_len)?,
        });
    }
    let mut qs = group_sids(&q, sid_len, rq_len).or_else(|e| if q.is_empty() { Ok(vec![]) } else { Err(e) })?;
    if qs.len() > 1 {
        return Err(Error::Format("more than one query SID".into()));
    }
    parts.query_sid = qs.pop();
    if !r.is_empty() {
        parts.recent_queries = group_sids(&r, sid_len, rq_len)?;
    }
    if !s.is_empty() {
        parts.short_clicks = group_sids(&s, sid_len, rq_len)?;
    }
    Ok(parts)
}
