use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sidforge::curriculum::{self, Stage3Options, TaskRecord};
use sidforge::embedding::{self, Catalog};
use sidforge::evalharness::{self, SyntheticSpec};
use sidforge::generator::{beam_search, CooccurrenceScorer, Decoding, SidTrie};
use sidforge::identity::{self, BehaviorSequence, ClickStats, SeqKind};
use sidforge::quantizer::{FitConfig, RqOpqCodebook, Sid};
use sidforge::reward::{self, DpoConfig};
use sidforge::sidmetrics::{self, SidCatalog};
use sidforge::{Error, Result};

#[derive(Parser)]
#[command(name = "sidforge", version, about = "Semantic-ID tokenization, reward signals and constrained generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Averages each catalog entry with the mean of its keyword embeddings.
    Enhance {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        keywords: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keeps pairs whose cosine is strictly above the threshold.
    FilterPairs {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = embedding::DEFAULT_PAIR_THRESHOLD)]
        threshold: f64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Fits the RQ-OPQ codebook.
    FitCodebook {
        #[arg(long)]
        catalog: PathBuf,
        /// Comma-separated RQ level sizes.
        #[arg(long, value_delimiter = ',', default_value = "4096,1024,512")]
        levels: Vec<usize>,
        #[arg(long)]
        balanced_last: bool,
        /// Subspaces x codes per subspace.
        #[arg(long, default_value = "2x256")]
        opq: String,
        #[arg(long, default_value_t = 25)]
        lloyd_iters: usize,
        #[arg(long, default_value_t = 10)]
        opq_iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encodes one or more catalogs into `id<TAB>c1,...` lines.
    Encode {
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        catalog: Vec<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// CUR per prefix length and ICR of a SID file.
    Metrics {
        #[arg(long)]
        sids: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        levels: Vec<usize>,
        /// Also report ICR over the full SID.
        #[arg(long)]
        with_opq: bool,
        #[command(flatten)]
        out: OutArg,
    },
    /// Coding-rate drift as embedding batches arrive at a frozen codebook.
    Drift {
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        /// Directory of `.emb` batches, applied in file-name order.
        #[arg(long)]
        batches: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// User id from short and long behavior sequences.
    EncodeUser {
        #[arg(long)]
        codebook: PathBuf,
        /// SID file of the short click sequence, oldest first.
        #[arg(long)]
        short: PathBuf,
        /// SID file of the long click sequence, oldest first.
        #[arg(long)]
        long: PathBuf,
        #[arg(long)]
        order: Option<PathBuf>,
        #[arg(long)]
        rsu: Option<PathBuf>,
        /// Click stats `query<TAB>item<TAB>pv<TAB>sid` used when a sequence is empty.
        #[arg(long)]
        defaults: Option<PathBuf>,
        #[arg(long, default_value = identity::FALLBACK_QUERY)]
        query: String,
        /// Writes the long-sequence aggregate as an embedding catalog.
        #[arg(long)]
        aggregate_out: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Builds listwise preference lists from interaction logs.
    BuildPairs {
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long)]
        reranks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Listwise preference loss per list and the mean.
    DpoEval {
        #[arg(long)]
        lists: PathBuf,
        #[arg(long)]
        logprobs: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Training records for one curriculum stage.
    Curriculum(CurriculumArgs),
    /// Fits the co-occurrence scorer on stage records.
    FitScorer {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Beam generation of SIDs for one prompt.
    Generate {
        #[arg(long)]
        trie_from: PathBuf,
        #[arg(long)]
        scorer: PathBuf,
        /// Whitespace-separated prompt tokens.
        #[arg(long, allow_hyphen_values = true)]
        context: String,
        #[arg(long, default_value_t = 32)]
        beam: usize,
        #[arg(long)]
        unconstrained: bool,
        #[command(flatten)]
        out: OutArg,
    },
    /// HR@K and MRR@K of generated candidates.
    Evaluate {
        #[arg(long)]
        codebook: PathBuf,
        /// Item catalog whose SIDs form the retrieval corpus.
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        scorer: PathBuf,
        #[arg(long)]
        cases: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,50,350")]
        k: Vec<usize>,
        #[arg(long, default_value_t = generator_default_beam())]
        beam: usize,
        #[arg(long)]
        unconstrained: bool,
        #[command(flatten)]
        out: OutArg,
    },
    /// Writes a synthetic corpus.
    Synth {
        /// JSON overrides of the synthetic parameters; defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn generator_default_beam() -> usize {
    sidforge::generator::DEFAULT_BEAM
}

#[derive(Args)]
struct OutArg {
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl OutArg {
    fn open(&self) -> Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(p) => Box::new(BufWriter::new(File::create(p)?)),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        })
    }
}

#[derive(Args)]
struct CurriculumArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    stage: u8,
    #[arg(long)]
    codebook: PathBuf,
    /// SID file covering items and queries.
    #[arg(long)]
    sids: PathBuf,
    /// `id<TAB>text` (stages 1 and 2).
    #[arg(long)]
    texts: Option<PathBuf>,
    /// `id<TAB>category` (stage 1).
    #[arg(long)]
    categories: Option<PathBuf>,
    /// `query<TAB>item` clicked pairs (stage 2).
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Session file (stage 3).
    #[arg(long)]
    sessions: Option<PathBuf>,
    #[arg(long, default_value_t = curriculum::DEFAULT_MAX_WINDOW)]
    max_window: usize,
    /// Click stats for cold-start user ids (stage 3).
    #[arg(long)]
    click_stats: Option<PathBuf>,
    /// Sessions held out from training and written as evaluation cases (stage 3).
    #[arg(long, default_value_t = 0)]
    holdout: usize,
    #[arg(long, default_value_t = 0)]
    holdout_seed: u64,
    #[arg(long)]
    cases_out: Option<PathBuf>,
    /// Shuffles records within the stage.
    #[arg(long)]
    shuffle_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::InvalidArgument(format!("--{flag} is required for this stage")))
}

fn parse_opq(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidArgument(format!("--opq expects MxK, got `{s}`"));
    let (m, k) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((m.trim().parse().map_err(|_| bad())?, k.trim().parse().map_err(|_| bad())?))
}

fn load_sids(path: &Path, codebook: &RqOpqCodebook) -> Result<SidCatalog> {
    SidCatalog::read(path, codebook.rq.level_sizes.clone())
}

fn sequence(path: &Path, rq_len: usize, kind: SeqKind) -> Result<BehaviorSequence> {
    let items = sidmetrics::read_sid_file(path, rq_len)?;
    Ok(BehaviorSequence::new(kind, items.into_iter().map(|(_, s)| s).collect()))
}

fn run_curriculum(a: &CurriculumArgs) -> Result<()> {
    let codebook = RqOpqCodebook::load(&a.codebook)?;
    let sids = load_sids(&a.sids, &codebook)?;
    let (mut records, counters): (Vec<TaskRecord>, _) = match a.stage {
        1 => {
            let texts = curriculum::read_two_columns(need(&a.texts, "texts")?)?;
            let cats: BTreeMap<String, String> =
                curriculum::read_two_columns(need(&a.categories, "categories")?)?.into_iter().collect();
            curriculum::build_stage1(&texts, &sids, &cats)
        }
        2 => {
            let texts: BTreeMap<String, String> =
                curriculum::read_two_columns(need(&a.texts, "texts")?)?.into_iter().collect();
            let pairs = curriculum::read_two_columns(need(&a.pairs, "pairs")?)?;
            curriculum::build_stage2(&pairs, &texts, &sids)
        }
        _ => {
            let sessions = curriculum::read_sessions(need(&a.sessions, "sessions")?)?;
            let stats = a
                .click_stats
                .as_ref()
                .map(|p| ClickStats::read(p, codebook.rq_len()))
                .transpose()?;
            let bounds = codebook.sid_bounds();
            let opts = Stage3Options {
                max_window: a.max_window,
                bounds: &bounds,
                click_stats: stats.as_ref(),
            };
            let held: std::collections::HashSet<usize> =
                evalharness::sample_indices(sessions.len(), a.holdout, a.holdout_seed).into_iter().collect();
            let (test, train): (Vec<_>, Vec<_>) = sessions
                .into_iter()
                .enumerate()
                .partition(|(i, _)| held.contains(i));
            let train: Vec<_> = train.into_iter().map(|(_, s)| s).collect();
            let test: Vec<_> = test.into_iter().map(|(_, s)| s).collect();
            if let Some(path) = &a.cases_out {
                let cases = evalharness::session_queries(&test, &sids, &opts)?;
                let mut w = BufWriter::new(File::create(path)?);
                evalharness::write_queries(&mut w, &cases)?;
                w.flush()?;
            } else if a.holdout > 0 {
                return Err(Error::InvalidArgument("--holdout needs --cases-out".into()));
            }
            curriculum::build_stage3(&train, &sids, &opts)?
        }
    };
    if let Some(seed) = a.shuffle_seed {
        curriculum::shuffle_records(&mut records, seed);
    }
    let mut w = BufWriter::new(File::create(&a.out)?);
    curriculum::write_records(&mut w, &records)?;
    w.flush()?;
    eprintln!("{counters:?}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Enhance { catalog, keywords, out } => {
            let cat = Catalog::read(catalog)?;
            let kw = embedding::group_keywords(&Catalog::read(keywords)?);
            embedding::enhance_catalog(&cat, &kw)?.write(out)?;
        }
        Command::FilterPairs { pairs, threshold, out } => {
            let kept = embedding::cosine_filter(&embedding::read_pairs(pairs)?, threshold);
            let mut w = out.open()?;
            embedding::write_pairs(&mut w, &kept)?;
            w.flush()?;
        }
        Command::FitCodebook {
            catalog,
            levels,
            balanced_last,
            opq,
            lloyd_iters,
            opq_iters,
            seed,
            out,
        } => {
            let (opq_subspaces, opq_codes) = parse_opq(&opq)?;
            let cfg = FitConfig {
                level_sizes: levels,
                balanced_last,
                opq_subspaces,
                opq_codes,
                lloyd_iters,
                opq_outer_iters: opq_iters,
            };
            RqOpqCodebook::fit(&Catalog::read(catalog)?, &cfg, seed)?.save(out)?;
        }
        Command::Encode { codebook, catalog, out } => {
            let cb = RqOpqCodebook::load(codebook)?;
            let mut all: Vec<(String, Sid)> = Vec::new();
            for path in catalog {
                all.extend(cb.encode_catalog(&Catalog::read(path)?)?);
            }
            let mut w = out.open()?;
            sidmetrics::write_sid_file(&mut w, all.iter().map(|(id, s)| (id, s)))?;
            w.flush()?;
        }
        Command::Metrics {
            sids,
            levels,
            with_opq,
            out,
        } => {
            let cat = SidCatalog::read(sids, levels)?;
            let mut w = out.open()?;
            writeln!(w, "metric\tvalue")?;
            writeln!(w, "items\t{}", cat.len())?;
            for l in 1..=cat.level_sizes().len() {
                writeln!(w, "cur_L{l}\t{:.6}", sidmetrics::cur(&cat, l)?)?;
            }
            writeln!(w, "icr_rq\t{:.6}", sidmetrics::icr(&cat, false))?;
            if with_opq {
                writeln!(w, "icr_full\t{:.6}", sidmetrics::icr(&cat, true))?;
            }
            w.flush()?;
        }
        Command::Drift {
            codebook,
            baseline,
            batches,
            out,
        } => {
            let cb = RqOpqCodebook::load(codebook)?;
            let base = load_sids(&baseline, &cb)?;
            let mut files: Vec<PathBuf> = fs::read_dir(&batches)?
                .map(|e| e.map(|e| e.path()))
                .collect::<io::Result<_>>()?;
            files.retain(|p| p.extension().is_some_and(|e| e == "emb"));
            files.sort();
            let cats = files.iter().map(Catalog::read).collect::<Result<Vec<_>>>()?;
            let report = sidmetrics::drift_report(&cb, &base, &cats)?;
            let mut w = out.open()?;
            writeln!(w, "batch\tfile\tadded\ttotal_items\ticr\ticr_rq\toccupied_ratio\tcur_total")?;
            for (step, file) in report.iter().zip(&files) {
                let name = file.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
                writeln!(
                    w,
                    "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                    step.batch, name, step.added, step.total_items, step.icr, step.icr_rq, step.occupied_ratio, step.cur_total
                )?;
            }
            w.flush()?;
        }
        Command::EncodeUser {
            codebook,
            short,
            long,
            order,
            rsu,
            defaults,
            query,
            aggregate_out,
            out,
        } => {
            let cb = RqOpqCodebook::load(codebook)?;
            let rq_len = cb.rq_len();
            let short = sequence(&short, rq_len, SeqKind::ShortClick)?;
            let long = sequence(&long, rq_len, SeqKind::LongClick)?;
            let default = match defaults {
                Some(p) => Some(identity::default_sequence(&query, &ClickStats::read(p, rq_len)?)?),
                None => None,
            };
            let user = identity::build_user_sid(&short, &long, &cb.sid_bounds(), default.as_ref())?;
            if let Some(path) = aggregate_out {
                let opt_seq = |p: Option<PathBuf>, kind| match p {
                    Some(p) => sequence(&p, rq_len, kind),
                    None => Ok(BehaviorSequence::new(kind, Vec::new())),
                };
                let agg = identity::aggregate_long(
                    &long,
                    &opt_seq(order, SeqKind::LongOrder)?,
                    &opt_seq(rsu, SeqKind::LongRsu)?,
                    &cb,
                )?;
                agg.to_catalog()?.write(path)?;
            }
            let mut w = out.open()?;
            writeln!(w, "{}\t{}", user.short_part, user.long_part)?;
            w.flush()?;
        }
        Command::BuildPairs {
            interactions,
            reranks,
            out,
        } => {
            let inter = reward::read_interactions(interactions)?;
            let reranks = reranks.map(reward::read_reranks).transpose()?.unwrap_or_default();
            let (lists, counters) = reward::build_preference_lists(&inter, &reranks);
            let mut w = BufWriter::new(File::create(out)?);
            reward::write_lists(&mut w, &lists)?;
            w.flush()?;
            eprintln!("{counters:?}");
        }
        Command::DpoEval {
            lists,
            logprobs,
            beta,
            alpha,
            delta,
            out,
        } => {
            let cfg = DpoConfig::new(beta, alpha, delta)?;
            let lists = reward::read_lists(lists)?;
            let lp = reward::read_logprobs(logprobs)?;
            let mut w = out.open()?;
            writeln!(w, "context\twinner\tloss")?;
            let mut total = 0.0;
            for l in &lists {
                let loss = reward::list_loss(l, &lp, &cfg)?;
                total += loss;
                writeln!(w, "{}\t{}\t{loss:.12}", l.context, l.winner)?;
            }
            let mean = if lists.is_empty() { 0.0 } else { total / lists.len() as f64 };
            writeln!(w, "mean\t-\t{mean:.12}")?;
            w.flush()?;
        }
        Command::Curriculum(args) => run_curriculum(&args)?,
        Command::FitScorer { records, codebook, out } => {
            let cb = RqOpqCodebook::load(codebook)?;
            let recs = curriculum::read_records(records)?;
            CooccurrenceScorer::fit(&recs, cb.sid_bounds(), cb.rq_len())?.save(out)?;
        }
        Command::Generate {
            trie_from,
            scorer,
            context,
            beam,
            unconstrained,
            out,
        } => {
            let scorer = CooccurrenceScorer::load(scorer)?;
            let sids = sidmetrics::read_sid_file(trie_from, scorer.rq_len)?;
            let trie = SidTrie::build(sids.iter().map(|(id, s)| (id, s)))?;
            let context: Vec<String> = context.split_whitespace().map(str::to_string).collect();
            let decoding = if unconstrained {
                Decoding::Unconstrained {
                    bounds: &scorer.bounds,
                    trie: Some(&trie),
                }
            } else {
                Decoding::Constrained(&trie)
            };
            let hyps = beam_search(&context, &scorer, beam, decoding)?;
            let mut w = out.open()?;
            for (rank, h) in hyps.iter().enumerate() {
                let digits: Vec<String> = h.digits.iter().map(u32::to_string).collect();
                let items = if h.valid { h.items.join(",") } else { "-".to_string() };
                writeln!(w, "{}\t{}\t{:.12}\t{}", rank + 1, digits.join(","), h.score, items)?;
            }
            w.flush()?;
        }
        Command::Evaluate {
            codebook,
            catalog,
            scorer,
            cases,
            k,
            beam,
            unconstrained,
            out,
        } => {
            let cb = RqOpqCodebook::load(codebook)?;
            let sids = SidCatalog::from_pairs(cb.encode_catalog(&Catalog::read(catalog)?)?, cb.rq.level_sizes.clone())?;
            let scorer = CooccurrenceScorer::load(scorer)?;
            let queries = evalharness::read_queries(cases)?;
            let report = evalharness::run_eval(&sids, &scorer, &queries, &k, beam, !unconstrained)?;
            let mut w = out.open()?;
            report.write_tsv(&mut w)?;
            w.flush()?;
        }
        Command::Synth { spec, out } => {
            let spec: SyntheticSpec = match spec {
                Some(p) => serde_json::from_reader(io::BufReader::new(File::open(p)?))?,
                None => SyntheticSpec::default(),
            };
            evalharness::write_synthetic(out, &spec)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
