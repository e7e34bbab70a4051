//! Three-stage fine-tuning datasets and sliding-window augmentation of the
//! short behavior sequence.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::identity::{self, BehaviorSequence, ClickStats, PromptParts, SeqKind};
use crate::quantizer::Sid;
use crate::sidmetrics::SidCatalog;

pub const DEFAULT_MAX_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskTag {
    TextToSid,
    SidToText,
    TextToCategory,
    SidToCategory,
    QueryToItem,
    ItemToQuery,
    QuerySidToItemSid,
    ItemSidToQuerySid,
    Personalization,
}

impl TaskTag {
    pub const ALL: [TaskTag; 9] = [
        TaskTag::TextToSid,
        TaskTag::SidToText,
        TaskTag::TextToCategory,
        TaskTag::SidToCategory,
        TaskTag::QueryToItem,
        TaskTag::ItemToQuery,
        TaskTag::QuerySidToItemSid,
        TaskTag::ItemSidToQuerySid,
        TaskTag::Personalization,
    ];

    pub fn stage(self) -> u8 {
        match self {
            TaskTag::TextToSid | TaskTag::SidToText | TaskTag::TextToCategory | TaskTag::SidToCategory => 1,
            TaskTag::QueryToItem | TaskTag::ItemToQuery | TaskTag::QuerySidToItemSid | TaskTag::ItemSidToQuerySid => 2,
            TaskTag::Personalization => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskTag::TextToSid => "T1a",
            TaskTag::SidToText => "T1b",
            TaskTag::TextToCategory => "T1c",
            TaskTag::SidToCategory => "T1d",
            TaskTag::QueryToItem => "T2a",
            TaskTag::ItemToQuery => "T2b",
            TaskTag::QuerySidToItemSid => "T2c",
            TaskTag::ItemSidToQuerySid => "T2d",
            TaskTag::Personalization => "T3",
        }
    }

    pub fn token(self) -> String {
        format!("<{}>", self.name())
    }
}

impl fmt::Display for TaskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskTag::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task tag `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskRecord {
    pub stage: u8,
    pub task: TaskTag,
    pub input_tokens: Vec<String>,
    pub target_tokens: Vec<String>,
}

impl TaskRecord {
    fn new(task: TaskTag, body: Vec<String>, target_tokens: Vec<String>) -> Option<Self> {
        if body.is_empty() || target_tokens.is_empty() {
            return None;
        }
        let mut input_tokens = vec![task.token()];
        input_tokens.extend(body);
        Some(Self {
            stage: task.stage(),
            task,
            input_tokens,
            target_tokens,
        })
    }

    /// Target SID of a SID-valued record.
    pub fn target_sid(&self, rq_len: usize) -> Result<Sid> {
        match self.target_tokens.as_slice() {
            [one] => Sid::parse(one, rq_len),
            _ => Err(Error::Format("target is not a single SID".into())),
        }
    }
}

fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

fn sid_token(sid: &Sid) -> Vec<String> {
    vec![sid.to_string()]
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageCounters {
    pub records: usize,
    pub missing_sid: usize,
    pub missing_category: usize,
    pub missing_text: usize,
    pub skipped: usize,
}

/// Text↔SID in both directions, text→category and SID→category for every
/// entity in `texts` order.
pub fn build_stage1(
    texts: &[(String, String)],
    sids: &SidCatalog,
    categories: &BTreeMap<String, String>,
) -> (Vec<TaskRecord>, StageCounters) {
    let mut out = Vec::new();
    let mut c = StageCounters::default();
    for (id, text) in texts {
        let sid = sids.get(id);
        let cat = categories.get(id);
        if sid.is_none() {
            c.missing_sid += 1;
        }
        if cat.is_none() {
            c.missing_category += 1;
        }
        if let Some(sid) = sid {
            out.extend(TaskRecord::new(TaskTag::TextToSid, words(text), sid_token(sid)));
            out.extend(TaskRecord::new(TaskTag::SidToText, sid_token(sid), words(text)));
        }
        if let Some(cat) = cat {
            out.extend(TaskRecord::new(TaskTag::TextToCategory, words(text), vec![cat.clone()]));
            if let Some(sid) = sid {
                out.extend(TaskRecord::new(TaskTag::SidToCategory, sid_token(sid), vec![cat.clone()]));
            }
        }
    }
    c.records = out.len();
    (out, c)
}

/// Query↔item text and query-SID↔item-SID for each clicked pair. Pairs with an
/// unknown side are skipped.
pub fn build_stage2(
    pairs: &[(String, String)],
    texts: &BTreeMap<String, String>,
    sids: &SidCatalog,
) -> (Vec<TaskRecord>, StageCounters) {
    let mut out = Vec::new();
    let mut c = StageCounters::default();
    for (q, i) in pairs {
        let (Some(qt), Some(it)) = (texts.get(q), texts.get(i)) else {
            c.missing_text += 1;
            c.skipped += 1;
            continue;
        };
        let (Some(qs), Some(is)) = (sids.get(q), sids.get(i)) else {
            c.missing_sid += 1;
            c.skipped += 1;
            continue;
        };
        let recs = [
            TaskRecord::new(TaskTag::QueryToItem, words(qt), words(it)),
            TaskRecord::new(TaskTag::ItemToQuery, words(it), words(qt)),
            TaskRecord::new(TaskTag::QuerySidToItemSid, sid_token(qs), sid_token(is)),
            TaskRecord::new(TaskTag::ItemSidToQuerySid, sid_token(is), sid_token(qs)),
        ];
        if recs.iter().any(Option::is_none) {
            c.skipped += 1;
            continue;
        }
        out.extend(recs.into_iter().flatten());
    }
    c.records = out.len();
    (out, c)
}

/// (window, target) for each position: the up-to-`max_window` items right
/// before it, oldest first.
pub fn sliding_window<T: Clone>(seq: &[T], max_window: usize) -> Result<Vec<(Vec<T>, T)>> {
    if max_window == 0 {
        return Err(Error::InvalidArgument("max window must be at least 1".into()));
    }
    Ok(seq
        .iter()
        .enumerate()
        .map(|(t, item)| (seq[t.saturating_sub(max_window)..t].to_vec(), item.clone()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub user: String,
    pub query_id: String,
    pub query_text: String,
    pub recent_queries: Vec<String>,
    /// Oldest first.
    pub short_clicks: Vec<String>,
    pub long_clicks: Vec<String>,
    pub clicked: String,
}

pub struct Stage3Options<'a> {
    pub max_window: usize,
    /// Per-digit vocabulary sizes for the user id.
    pub bounds: &'a [u32],
    pub click_stats: Option<&'a ClickStats>,
}

fn resolve(ids: &[String], sids: &SidCatalog) -> Option<Vec<Sid>> {
    ids.iter().map(|id| sids.get(id).cloned()).collect()
}

/// Personalization records: one per sliding-window position over the short
/// sequence, or a single record targeting the clicked item when the short
/// sequence is empty. The user id of each record only sees the clicks before
/// its target; an empty prefix falls back to the long sequence, then to the
/// query's cold-start list.
pub fn build_stage3(
    sessions: &[Session],
    sids: &SidCatalog,
    opts: &Stage3Options<'_>,
) -> Result<(Vec<TaskRecord>, StageCounters)> {
    let mut out = Vec::new();
    let mut c = StageCounters::default();
    for s in sessions {
        let (Some(short), Some(long), Some(recent), Some(clicked)) = (
            resolve(&s.short_clicks, sids),
            resolve(&s.long_clicks, sids),
            resolve(&s.recent_queries, sids),
            sids.get(&s.clicked),
        ) else {
            c.missing_sid += 1;
            c.skipped += 1;
            continue;
        };
        let long = BehaviorSequence::new(SeqKind::LongClick, long);
        let fallback = match opts.click_stats {
            Some(stats) => identity::default_sequence(&s.query_id, stats).ok(),
            None => None,
        };
        let default = if long.is_empty() { fallback.as_ref() } else { Some(&long) };
        let samples = if short.is_empty() {
            vec![(Vec::new(), clicked.clone())]
        } else {
            sliding_window(&short, opts.max_window)?
        };
        for (t, (window, target)) in samples.into_iter().enumerate() {
            let prefix = BehaviorSequence::new(SeqKind::ShortClick, short[..t.min(short.len())].to_vec());
            let user = match identity::build_user_sid(&prefix, &long, opts.bounds, default) {
                Ok(u) => u,
                Err(Error::Empty(_)) => {
                    c.skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let parts = PromptParts {
                user: Some(user),
                query_text: Vec::new(),
                query_sid: sids.get(&s.query_id).cloned(),
                recent_queries: recent.clone(),
                short_clicks: window,
                long_ref: Some(s.user.clone()),
            }
            .with_text(&s.query_text);
            let body = identity::assemble_prompt(&parts);
            out.extend(TaskRecord::new(TaskTag::Personalization, body, sid_token(&target)));
        }
    }
    c.records = out.len();
    Ok((out, c))
}

/// Seeded shuffle, used within a single stage only.
pub fn shuffle_records(records: &mut [TaskRecord], seed: u64) {
    records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
}

/// Writes `stage<TAB>task<TAB>input tokens<TAB>target tokens`, tokens space-joined.
pub fn write_records<W: Write>(mut w: W, records: &[TaskRecord]) -> Result<()> {
    for r in records {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            r.stage,
            r.task,
            r.input_tokens.join(" "),
            r.target_tokens.join(" ")
        )?;
    }
    Ok(())
}

fn lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if !line.is_empty() {
            out.push((idx + 1, line));
        }
    }
    Ok(out)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<TaskRecord>> {
    let path = path.as_ref();
    lines(path)?
        .into_iter()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::parse(path, n, "expected `stage<TAB>task<TAB>input<TAB>target`"));
            }
            let task: TaskTag = f[1].parse().map_err(|e: Error| Error::parse(path, n, e.to_string()))?;
            if f[0] != task.stage().to_string() {
                return Err(Error::parse(path, n, format!("task {task} does not belong to stage {}", f[0])));
            }
            Ok(TaskRecord {
                stage: task.stage(),
                task,
                input_tokens: words(f[2]),
                target_tokens: words(f[3]),
            })
        })
        .collect()
}

/// Reads two-column `key<TAB>value` files (texts, categories, pairs).
pub fn read_two_columns(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    lines(path)?
        .into_iter()
        .map(|(n, line)| {
            line.split_once('\t')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| Error::parse(path, n, "expected two tab-separated columns"))
        })
        .collect()
}

fn id_list(field: &str) -> Vec<String> {
    field.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect()
}

/// Reads `user<TAB>query_id<TAB>query_text<TAB>recent_q_ids<TAB>short_ids<TAB>long_ids<TAB>clicked`.
pub fn read_sessions(path: impl AsRef<Path>) -> Result<Vec<Session>> {
    let path = path.as_ref();
    lines(path)?
        .into_iter()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(Error::parse(path, n, "expected 7 tab-separated session fields"));
            }
            Ok(Session {
                user: f[0].to_string(),
                query_id: f[1].to_string(),
                query_text: f[2].to_string(),
                recent_queries: id_list(f[3]),
                short_clicks: id_list(f[4]),
                long_clicks: id_list(f[5]),
                clicked: f[6].to_string(),
            })
        })
        .collect()
}

pub fn write_sessions<W: Write>(mut w: W, sessions: &[Session]) -> Result<()> {
    for s in sessions {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.user,
            s.query_id,
            s.query_text,
            s.recent_queries.join(","),
            s.short_clicks.join(","),
            s.long_clicks.join(","),
            s.clicked
        )?;
    }
    Ok(())
}
