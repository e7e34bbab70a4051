//! Codebook utilization (CUR) and independent coding rate (ICR) over encoded
//! catalogs, plus the drift report for a frozen codebook under catalog growth.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::embedding::Catalog;
use crate::error::{Error, Result};
use crate::quantizer::{RqOpqCodebook, Sid};

/// Item id → SID, with the RQ level sizes the SIDs were produced under.
#[derive(Debug, Clone, PartialEq)]
pub struct SidCatalog {
    entries: BTreeMap<String, Sid>,
    level_sizes: Vec<usize>,
}

impl SidCatalog {
    pub fn new(level_sizes: Vec<usize>) -> Self {
        Self {
            entries: BTreeMap::new(),
            level_sizes,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Sid)>, level_sizes: Vec<usize>) -> Result<Self> {
        let mut cat = Self::new(level_sizes);
        for (id, sid) in pairs {
            cat.insert(id, sid)?;
        }
        Ok(cat)
    }

    pub fn insert(&mut self, id: String, sid: Sid) -> Result<()> {
        if sid.rq_len() != self.level_sizes.len() {
            return Err(Error::InvalidArgument(format!(
                "SID for {id} has {} RQ digits, catalog has {} levels",
                sid.rq_len(),
                self.level_sizes.len()
            )));
        }
        if let Some(first) = self.entries.values().next() {
            if first.len() != sid.len() {
                return Err(Error::InvalidArgument(format!(
                    "SID for {id} has {} digits, catalog SIDs have {}",
                    sid.len(),
                    first.len()
                )));
            }
        }
        for (position, (&code, &bound)) in sid.rq_codes().iter().zip(&self.level_sizes).enumerate() {
            if code as usize >= bound {
                return Err(Error::CodeOutOfRange {
                    position,
                    code,
                    bound: bound as u32,
                });
            }
        }
        if self.entries.insert(id.clone(), sid).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate id {id}")));
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Sid> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn level_sizes(&self) -> &[usize] {
        &self.level_sizes
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Sid)> {
        self.entries.iter()
    }

    pub fn sids(&self) -> impl Iterator<Item = &Sid> {
        self.entries.values()
    }

    pub fn read(path: impl AsRef<Path>, level_sizes: Vec<usize>) -> Result<Self> {
        let rq_len = level_sizes.len();
        let pairs = read_sid_file(path, rq_len)?;
        Self::from_pairs(pairs, level_sizes)
    }
}

/// Reads `id<TAB>c1,c2,...` lines, keeping file order.
pub fn read_sid_file(path: impl AsRef<Path>, rq_len: usize) -> Result<Vec<(String, Sid)>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (id, codes) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, idx + 1, "expected `id<TAB>c1,c2,...`"))?;
        let sid = Sid::parse(codes, rq_len).map_err(|e| Error::parse(path, idx + 1, e.to_string()))?;
        out.push((id.to_string(), sid));
    }
    Ok(out)
}

pub fn write_sid_file<'a, W: Write>(mut w: W, sids: impl IntoIterator<Item = (&'a String, &'a Sid)>) -> Result<()> {
    for (id, sid) in sids {
        writeln!(w, "{id}\t{sid}")?;
    }
    Ok(())
}

/// Distinct RQ prefixes of length `prefix_len` over the number of possible ones.
pub fn cur(catalog: &SidCatalog, prefix_len: usize) -> Result<f64> {
    let levels = catalog.level_sizes();
    if prefix_len == 0 || prefix_len > levels.len() {
        return Err(Error::InvalidArgument(format!(
            "prefix length {prefix_len} outside 1..={}",
            levels.len()
        )));
    }
    let distinct = distinct_prefixes(catalog, prefix_len);
    let capacity: f64 = levels[..prefix_len].iter().map(|&w| w as f64).product();
    Ok(distinct as f64 / capacity)
}

pub fn distinct_prefixes(catalog: &SidCatalog, prefix_len: usize) -> usize {
    catalog
        .sids()
        .map(|s| &s.digits()[..prefix_len])
        .collect::<HashSet<_>>()
        .len()
}

fn key(sid: &Sid, use_opq: bool) -> &[u32] {
    if use_opq {
        sid.digits()
    } else {
        sid.rq_codes()
    }
}

/// Fraction of items whose SID (RQ digits only unless `use_opq`) no other item holds.
pub fn icr(catalog: &SidCatalog, use_opq: bool) -> f64 {
    icr_of(catalog.sids(), use_opq)
}

fn icr_of<'a>(sids: impl Iterator<Item = &'a Sid>, use_opq: bool) -> f64 {
    let mut counts: HashMap<&[u32], usize> = HashMap::new();
    let mut n = 0usize;
    for s in sids {
        *counts.entry(key(s, use_opq)).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    counts.values().filter(|&&c| c == 1).count() as f64 / n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftStep {
    pub batch: usize,
    pub added: usize,
    pub total_items: usize,
    /// Cumulative ICR over the full SID.
    pub icr: f64,
    /// Cumulative ICR over RQ digits only.
    pub icr_rq: f64,
    /// Fraction of this batch's items whose SID was already held before the batch arrived.
    pub occupied_ratio: f64,
    pub cur_total: f64,
}

/// Encodes each arriving batch with the frozen codebook and reports the
/// cumulative coding-rate indicators after appending it.
pub fn drift_report(codebook: &RqOpqCodebook, baseline: &SidCatalog, batches: &[Catalog]) -> Result<Vec<DriftStep>> {
    if batches.is_empty() {
        return Err(Error::Empty("drift batches"));
    }
    let mut sids: Vec<Sid> = baseline.sids().cloned().collect();
    let mut occupied: HashSet<Vec<u32>> = sids.iter().map(|s| s.digits().to_vec()).collect();
    let mut prefixes: HashSet<Vec<u32>> = sids.iter().map(|s| s.rq_codes().to_vec()).collect();
    let capacity: f64 = codebook.rq.level_sizes.iter().map(|&w| w as f64).product();
    let mut report = Vec::with_capacity(batches.len());
    for (b, batch) in batches.iter().enumerate() {
        if batch.is_empty() {
            return Err(Error::Empty("drift batch"));
        }
        let encoded = codebook.encode_catalog(batch)?;
        let hits = encoded.iter().filter(|(_, s)| occupied.contains(s.digits())).count();
        for (_, s) in encoded {
            occupied.insert(s.digits().to_vec());
            prefixes.insert(s.rq_codes().to_vec());
            sids.push(s);
        }
        report.push(DriftStep {
            batch: b,
            added: batch.len(),
            total_items: sids.len(),
            icr: icr_of(sids.iter(), true),
            icr_rq: icr_of(sids.iter(), false),
            occupied_ratio: hits as f64 / batch.len() as f64,
            cur_total: prefixes.len() as f64 / capacity,
        });
    }
    Ok(report)
}
