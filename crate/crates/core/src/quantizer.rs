//! Hierarchical residual k-means (RQ) codebooks with an OPQ stage on the final
//! residual, and the encoder that turns embeddings into semantic IDs.
//!
//! Level `l` of the RQ stack is fit on the residuals left by nearest-centroid
//! encoding through levels `0..l`; the last level can optionally be fit with
//! balanced k-means. Whatever remains after the last RQ level is rotated by a
//! learned orthonormal matrix and product-quantized.
//!
//! All parameters are rounded to `f32` when a fit completes, so a codebook
//! written to disk and read back encodes bit-identically.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{Catalog, Embedding};
use crate::error::{Error, Result};
use crate::kmeans::{self, nearest};

/// Semantic ID: RQ digits followed by OPQ digits.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sid {
    codes: Vec<u32>,
    rq_len: usize,
}

impl Sid {
    pub fn new(rq: Vec<u32>, opq: Vec<u32>) -> Self {
        let rq_len = rq.len();
        let mut codes = rq;
        codes.extend(opq);
        Self { codes, rq_len }
    }

    /// Builds a SID from a flat digit list whose first `rq_len` digits are RQ codes.
    pub fn from_digits(codes: Vec<u32>, rq_len: usize) -> Result<Self> {
        if rq_len > codes.len() {
            return Err(Error::InvalidArgument(format!(
                "rq length {rq_len} exceeds SID length {}",
                codes.len()
            )));
        }
        Ok(Self { codes, rq_len })
    }

    /// Parses `c1,c2,...`.
    pub fn parse(s: &str, rq_len: usize) -> Result<Self> {
        let codes = s
            .split(',')
            .map(|c| {
                c.trim()
                    .parse::<u32>()
                    .map_err(|_| Error::InvalidArgument(format!("bad SID digit `{c}` in `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_digits(codes, rq_len)
    }

    pub fn digits(&self) -> &[u32] {
        &self.codes
    }

    pub fn rq_codes(&self) -> &[u32] {
        &self.codes[..self.rq_len]
    }

    pub fn opq_codes(&self) -> &[u32] {
        &self.codes[self.rq_len..]
    }

    pub fn rq_len(&self) -> usize {
        self.rq_len
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Checks every digit against per-position bounds.
    pub fn check_bounds(&self, bounds: &[u32]) -> Result<()> {
        if bounds.len() != self.codes.len() {
            return Err(Error::InvalidArgument(format!(
                "SID has {} digits, layout expects {}",
                self.codes.len(),
                bounds.len()
            )));
        }
        for (position, (&code, &bound)) in self.codes.iter().zip(bounds).enumerate() {
            if code >= bound {
                return Err(Error::CodeOutOfRange { position, code, bound });
            }
        }
        Ok(())
    }
}

impl fmt::Display for Sid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.codes.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub level_sizes: Vec<usize>,
    pub balanced_last: bool,
    pub opq_subspaces: usize,
    pub opq_codes: usize,
    pub lloyd_iters: usize,
    pub opq_outer_iters: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            level_sizes: vec![4096, 1024, 512],
            balanced_last: true,
            opq_subspaces: 2,
            opq_codes: 256,
            lloyd_iters: 25,
            opq_outer_iters: 10,
        }
    }
}

impl FitConfig {
    pub fn sid_bounds(&self) -> Vec<u32> {
        self.level_sizes
            .iter()
            .map(|&w| w as u32)
            .chain(std::iter::repeat_n(self.opq_codes as u32, self.opq_subspaces))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    /// Mean L2 norm of the input, then of the residual after each RQ level.
    pub mean_residual_norms: Vec<f64>,
    /// Mean squared L2 norm, same layout as `mean_residual_norms`.
    pub mean_sq_residual_norms: Vec<f64>,
    /// Mean squared OPQ reconstruction error: plain PQ first, then one entry per outer iteration.
    pub opq_error_history: Vec<f64>,
    pub empty_cluster_repairs: Vec<usize>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildMetadata {
    pub format_version: u32,
    pub dim: usize,
    pub items: usize,
    pub seed: u64,
    pub rng: String,
    pub config: FitConfig,
    pub stats: FitStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RqCodebook {
    pub dim: usize,
    pub level_sizes: Vec<usize>,
    /// Level `l` is a row-major `level_sizes[l] × dim` table.
    pub levels: Vec<Vec<f64>>,
    pub balanced_last: bool,
}

impl RqCodebook {
    pub fn centroid(&self, level: usize, code: usize) -> &[f64] {
        &self.levels[level][code * self.dim..(code + 1) * self.dim]
    }

    /// Greedy nearest-centroid descent; returns codes and the final residual.
    pub fn encode_residual(&self, vector: &[f64]) -> (Vec<u32>, Vec<f64>) {
        let mut residual = vector.to_vec();
        let mut codes = Vec::with_capacity(self.levels.len());
        for table in &self.levels {
            let (c, _) = nearest(&residual, table, self.dim);
            for (r, v) in residual.iter_mut().zip(&table[c * self.dim..(c + 1) * self.dim]) {
                *r -= v;
            }
            codes.push(c as u32);
        }
        (codes, residual)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpqCodebook {
    pub dim: usize,
    /// Row-major `dim × dim`; rotated = rotation · residual.
    pub rotation: Vec<f64>,
    pub subspaces: usize,
    pub codes_per_subspace: usize,
    /// Subspace `s` is a row-major `codes_per_subspace × (dim / subspaces)` table.
    pub tables: Vec<Vec<f64>>,
}

impl OpqCodebook {
    pub fn sub_dim(&self) -> usize {
        self.dim / self.subspaces
    }

    pub fn rotate(&self, v: &[f64]) -> Vec<f64> {
        rotate(&self.rotation, v, self.dim)
    }

    pub fn encode(&self, residual: &[f64]) -> Vec<u32> {
        let y = self.rotate(residual);
        let sd = self.sub_dim();
        y.chunks_exact(sd)
            .zip(&self.tables)
            .map(|(part, table)| nearest(part, table, sd).0 as u32)
            .collect()
    }

    /// Reconstruction of a residual from its codes, in the unrotated space.
    pub fn decode(&self, codes: &[u32]) -> Vec<f64> {
        let sd = self.sub_dim();
        let mut y = Vec::with_capacity(self.dim);
        for (s, &c) in codes.iter().enumerate() {
            y.extend_from_slice(&self.tables[s][c as usize * sd..(c as usize + 1) * sd]);
        }
        // rotation is orthonormal: inverse = transpose
        let d = self.dim;
        (0..d)
            .map(|j| (0..d).map(|i| self.rotation[i * d + j] * y[i]).sum())
            .collect()
    }

    /// Max |RᵀR − I| entry.
    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.rotation, self.dim)
    }
}

/// A frozen RQ-OPQ codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct RqOpqCodebook {
    pub rq: RqCodebook,
    pub opq: OpqCodebook,
    pub meta: BuildMetadata,
}

fn rotate(rotation: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    rotation
        .chunks_exact(d)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn orthonormality_error(r: &[f64], d: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..d {
        for j in 0..d {
            let dot: f64 = (0..d).map(|k| r[k * d + i] * r[k * d + j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

fn round_f32(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

fn mean_norms(rows: &[f64], dim: usize) -> (f64, f64) {
    let n = (rows.len() / dim).max(1) as f64;
    let (mut s, mut s2) = (0.0, 0.0);
    for r in rows.chunks_exact(dim) {
        let sq: f64 = r.iter().map(|v| v * v).sum();
        s += sq.sqrt();
        s2 += sq;
    }
    (s / n, s2 / n)
}

fn subtract_nearest(rows: &mut [f64], dim: usize, table: &[f64]) {
    rows.par_chunks_exact_mut(dim).for_each(|r| {
        let (c, _) = nearest(r, table, dim);
        for (x, v) in r.iter_mut().zip(&table[c * dim..(c + 1) * dim]) {
            *x -= v;
        }
    });
}

/// Fits the RQ stack on row-major `points`. Returns the codebook, the final
/// residuals and fit statistics.
pub fn rq_fit(
    points: &[f64],
    dim: usize,
    level_sizes: &[usize],
    balanced_last: bool,
    iters: usize,
    seed: u64,
) -> Result<(RqCodebook, Vec<f64>, FitStats)> {
    if points.is_empty() {
        return Err(Error::Empty("RQ catalog"));
    }
    if level_sizes.is_empty() || level_sizes.contains(&0) {
        return Err(Error::InvalidArgument("level sizes must be nonempty and positive".into()));
    }
    let n = points.len() / dim;
    let mut stats = FitStats::default();
    let mut residual = points.to_vec();
    let (m, m2) = mean_norms(&residual, dim);
    stats.mean_residual_norms.push(m);
    stats.mean_sq_residual_norms.push(m2);
    let mut levels = Vec::with_capacity(level_sizes.len());

    for (l, &k) in level_sizes.iter().enumerate() {
        if k > n {
            stats.warnings.push(format!(
                "level {} size {k} exceeds catalog size {n}; empty clusters repaired",
                l + 1
            ));
        }
        let level_seed = seed.wrapping_add(l as u64);
        let fit = if balanced_last && l + 1 == level_sizes.len() {
            kmeans::balanced_kmeans_fit(&residual, dim, k, iters, level_seed)?
        } else {
            kmeans::kmeans_fit(&residual, dim, k, iters, level_seed)?
        };
        stats.empty_cluster_repairs.push(fit.repairs);
        let mut table = fit.centroids;
        round_f32(&mut table);
        subtract_nearest(&mut residual, dim, &table);
        let (m, m2) = mean_norms(&residual, dim);
        stats.mean_residual_norms.push(m);
        stats.mean_sq_residual_norms.push(m2);
        levels.push(table);
    }

    Ok((
        RqCodebook {
            dim,
            level_sizes: level_sizes.to_vec(),
            levels,
            balanced_last,
        },
        residual,
        stats,
    ))
}

fn pq_error(rotated: &[f64], dim: usize, sub_dim: usize, tables: &[Vec<f64>]) -> f64 {
    let n = rotated.len() / dim;
    let total: f64 = rotated
        .par_chunks_exact(dim)
        .map(|y| {
            y.chunks_exact(sub_dim)
                .zip(tables)
                .map(|(part, t)| nearest(part, t, sub_dim).1)
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    total / n as f64
}

fn column(rows: &[f64], dim: usize, s: usize, sub_dim: usize) -> Vec<f64> {
    rows.chunks_exact(dim)
        .flat_map(|r| r[s * sub_dim..(s + 1) * sub_dim].iter().copied())
        .collect()
}

/// Fits an OPQ codebook on row-major residuals by alternating optimization.
///
/// The first pass is plain PQ under the identity rotation. Each outer
/// iteration then solves the orthogonal Procrustes problem for the rotation
/// with codes fixed, and re-runs Lloyd per subspace warm-started from the
/// previous tables. Both half-steps can only lower the quantization error.
pub fn opq_fit(
    residuals: &[f64],
    dim: usize,
    subspaces: usize,
    codes_per_subspace: usize,
    outer_iters: usize,
    lloyd_iters: usize,
    seed: u64,
) -> Result<(OpqCodebook, Vec<f64>)> {
    if residuals.is_empty() {
        return Err(Error::Empty("OPQ residual set"));
    }
    if subspaces == 0 || dim % subspaces != 0 {
        return Err(Error::InvalidArgument(format!(
            "dimension {dim} is not divisible by {subspaces} subspaces"
        )));
    }
    if codes_per_subspace == 0 {
        return Err(Error::InvalidArgument("codes per subspace must be >= 1".into()));
    }
    let sub_dim = dim / subspaces;
    let n = residuals.len() / dim;

    let mut rotation = vec![0.0; dim * dim];
    for i in 0..dim {
        rotation[i * dim + i] = 1.0;
    }
    let mut tables: Vec<Vec<f64>> = (0..subspaces)
        .map(|s| {
            let col = column(residuals, dim, s, sub_dim);
            kmeans::kmeans_fit(&col, sub_dim, codes_per_subspace, lloyd_iters, seed.wrapping_add(s as u64))
                .map(|f| f.centroids)
        })
        .collect::<Result<_>>()?;
    let mut history = vec![pq_error(residuals, dim, sub_dim, &tables)];

    for _ in 0..outer_iters {
        let rotated: Vec<f64> = residuals
            .par_chunks_exact(dim)
            .flat_map_iter(|r| rotate(&rotation, r, dim))
            .collect();
        // reconstruction of the rotated residuals under current codes
        let recon: Vec<f64> = rotated
            .par_chunks_exact(dim)
            .flat_map_iter(|y| {
                y.chunks_exact(sub_dim)
                    .zip(&tables)
                    .flat_map(|(part, t)| {
                        let c = nearest(part, t, sub_dim).0;
                        t[c * sub_dim..(c + 1) * sub_dim].to_vec()
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        // M = Σ recon_i · residual_iᵀ ; R = U Vᵀ from M = U Σ Vᵀ
        let x = DMatrix::from_row_slice(n, dim, residuals);
        let y = DMatrix::from_row_slice(n, dim, &recon);
        let m = y.transpose() * x;
        let svd = m.svd(true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => return Err(Error::InvalidArgument("SVD failed during OPQ rotation update".into())),
        };
        let r = u * v_t;
        for i in 0..dim {
            for j in 0..dim {
                rotation[i * dim + j] = r[(i, j)];
            }
        }

        let rotated: Vec<f64> = residuals
            .par_chunks_exact(dim)
            .flat_map_iter(|r| rotate(&rotation, r, dim))
            .collect();
        tables = (0..subspaces)
            .map(|s| {
                let col = column(&rotated, dim, s, sub_dim);
                kmeans::lloyd_from(&col, sub_dim, tables[s].clone(), lloyd_iters.max(1)).map(|f| f.centroids)
            })
            .collect::<Result<_>>()?;
        history.push(pq_error(&rotated, dim, sub_dim, &tables));
    }

    round_f32(&mut rotation);
    for t in &mut tables {
        round_f32(t);
    }
    Ok((
        OpqCodebook {
            dim,
            rotation,
            subspaces,
            codes_per_subspace,
            tables,
        },
        history,
    ))
}

const MAGIC: &[u8; 8] = b"SIDFCB\0\0";
const FORMAT_VERSION: u32 = 1;
const RNG_NAME: &str = "ChaCha8 (rand_chacha), level l seeded with seed + l";

impl RqOpqCodebook {
    pub fn fit(catalog: &Catalog, config: &FitConfig, seed: u64) -> Result<Self> {
        if catalog.is_empty() {
            return Err(Error::Empty("catalog"));
        }
        let dim = catalog.dim();
        let points = catalog.to_rows();
        let (rq, residual, mut stats) = rq_fit(
            &points,
            dim,
            &config.level_sizes,
            config.balanced_last,
            config.lloyd_iters,
            seed,
        )?;
        if config.opq_codes > catalog.len() {
            stats.warnings.push(format!(
                "OPQ codes per subspace {} exceed catalog size {}; empty clusters repaired",
                config.opq_codes,
                catalog.len()
            ));
        }
        let opq_seed = seed.wrapping_add(config.level_sizes.len() as u64);
        let (opq, history) = opq_fit(
            &residual,
            dim,
            config.opq_subspaces,
            config.opq_codes,
            config.opq_outer_iters,
            config.lloyd_iters,
            opq_seed,
        )?;
        stats.opq_error_history = history;
        Ok(Self {
            rq,
            opq,
            meta: BuildMetadata {
                format_version: FORMAT_VERSION,
                dim,
                items: catalog.len(),
                seed,
                rng: RNG_NAME.to_string(),
                config: config.clone(),
                stats,
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.rq.dim
    }

    pub fn rq_len(&self) -> usize {
        self.rq.levels.len()
    }

    /// Per-digit vocabulary sizes: RQ level sizes then OPQ codes per subspace.
    pub fn sid_bounds(&self) -> Vec<u32> {
        self.rq
            .level_sizes
            .iter()
            .map(|&w| w as u32)
            .chain(std::iter::repeat_n(self.opq.codes_per_subspace as u32, self.opq.subspaces))
            .collect()
    }

    pub fn encode_vector(&self, vector: &[f32]) -> Result<Sid> {
        if vector.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: vector.len(),
            });
        }
        let v: Vec<f64> = vector.iter().map(|&x| x as f64).collect();
        let (rq, residual) = self.rq.encode_residual(&v);
        let opq = self.opq.encode(&residual);
        Ok(Sid::new(rq, opq))
    }

    pub fn encode(&self, embedding: &Embedding) -> Result<Sid> {
        self.encode_vector(&embedding.vector)
    }

    /// Encodes every catalog entry, preserving order.
    pub fn encode_catalog(&self, catalog: &Catalog) -> Result<Vec<(String, Sid)>> {
        if catalog.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: catalog.dim(),
            });
        }
        catalog
            .entries()
            .par_iter()
            .map(|e| Ok((e.id.clone(), self.encode(e)?)))
            .collect()
    }

    /// RQ centroid per level for `sid` (OPQ digits are not looked up).
    pub fn lookup_centroids(&self, sid: &Sid) -> Result<Vec<Vec<f64>>> {
        let rq = sid.rq_codes();
        if rq.len() != self.rq_len() {
            return Err(Error::InvalidArgument(format!(
                "SID has {} RQ digits, codebook has {} levels",
                rq.len(),
                self.rq_len()
            )));
        }
        rq.iter()
            .enumerate()
            .map(|(l, &c)| {
                let bound = self.rq.level_sizes[l] as u32;
                if c >= bound {
                    return Err(Error::CodeOutOfRange {
                        position: l,
                        code: c,
                        bound,
                    });
                }
                Ok(self.rq.centroid(l, c as usize).to_vec())
            })
            .collect()
    }

    /// Full reconstruction: RQ centroid chain plus decoded OPQ residual.
    pub fn reconstruct(&self, sid: &Sid) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        for c in self.lookup_centroids(sid)? {
            for (o, v) in out.iter_mut().zip(c) {
                *o += v;
            }
        }
        for (o, v) in out.iter_mut().zip(self.opq.decode(sid.opq_codes())) {
            *o += v;
        }
        Ok(out)
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".json");
        PathBuf::from(p)
    }

    /// Writes the binary codebook and its `<path>.json` metadata sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path)?);
        self.write_binary(&mut w)?;
        w.flush()?;
        let json = serde_json::to_string_pretty(&self.meta)?;
        std::fs::write(Self::sidecar_path(path), json + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = BufReader::new(File::open(path)?);
        let (rq, opq) = Self::read_binary(&mut r)?;
        let sidecar = Self::sidecar_path(path);
        let meta: BuildMetadata = serde_json::from_str(&std::fs::read_to_string(&sidecar)?)?;
        if meta.dim != rq.dim || meta.config.level_sizes != rq.level_sizes {
            return Err(Error::Format(format!(
                "sidecar {} does not match codebook",
                sidecar.display()
            )));
        }
        Ok(Self { rq, opq, meta })
    }

    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u32::<LittleEndian>(self.dim() as u32)?;
        w.write_u32::<LittleEndian>(self.rq.level_sizes.len() as u32)?;
        for &s in &self.rq.level_sizes {
            w.write_u32::<LittleEndian>(s as u32)?;
        }
        w.write_u8(self.rq.balanced_last as u8)?;
        w.write_u32::<LittleEndian>(self.opq.subspaces as u32)?;
        w.write_u32::<LittleEndian>(self.opq.codes_per_subspace as u32)?;
        let values = self
            .rq
            .levels
            .iter()
            .flatten()
            .chain(&self.opq.rotation)
            .chain(self.opq.tables.iter().flatten());
        for &v in values {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<(RqCodebook, OpqCodebook)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let n_levels = r.read_u32::<LittleEndian>()? as usize;
        if dim == 0 || n_levels == 0 {
            return Err(Error::Format("zero dimension or level count".into()));
        }
        let level_sizes = (0..n_levels)
            .map(|_| r.read_u32::<LittleEndian>().map(|v| v as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let balanced_last = r.read_u8()? != 0;
        let subspaces = r.read_u32::<LittleEndian>()? as usize;
        let codes_per_subspace = r.read_u32::<LittleEndian>()? as usize;
        if subspaces == 0 || dim % subspaces != 0 {
            return Err(Error::Format("subspace count does not divide dimension".into()));
        }
        let mut read_table = |len: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0f32; len];
            r.read_f32_into::<LittleEndian>(&mut buf)?;
            Ok(buf.into_iter().map(|v| v as f64).collect())
        };
        let levels = level_sizes
            .iter()
            .map(|&s| read_table(s * dim))
            .collect::<Result<Vec<_>>>()?;
        let rotation = read_table(dim * dim)?;
        let tables = (0..subspaces)
            .map(|_| read_table(codes_per_subspace * (dim / subspaces)))
            .collect::<Result<Vec<_>>>()?;
        Ok((
            RqCodebook {
                dim,
                level_sizes,
                levels,
                balanced_last,
            },
            OpqCodebook {
                dim,
                rotation,
                subspaces,
                codes_per_subspace,
                tables,
            },
        ))
    }
}
