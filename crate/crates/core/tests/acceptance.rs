//! Acceptance checks, one PASS/FAIL line each. Exits nonzero on any failure.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sidforge::curriculum::{build_stage3, Session, Stage3Options};
use sidforge::embedding::{enhance_catalog, group_keywords, Catalog, Embedding};
use sidforge::evalharness::{run_eval, sample_indices, session_queries, synth_catalog, synth_sessions, SyntheticSpec};
use sidforge::generator::{beam_search, rank_order, CooccurrenceScorer, Decoding, SidTrie, UniformScorer};
use sidforge::kmeans::balanced_kmeans_fit;
use sidforge::quantizer::{FitConfig, RqOpqCodebook, Sid};
use sidforge::reward::{calibrated_rates, listwise_dpo_loss, preference_delta, reward_score, DpoConfig, InteractionRecord, BASE_WEIGHTS};
use sidforge::sidmetrics::{cur, drift_report, icr, SidCatalog};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn sid_catalog(cb: &RqOpqCodebook, cat: &Catalog) -> SidCatalog {
    SidCatalog::from_pairs(cb.encode_catalog(cat).unwrap(), cb.rq.level_sizes.clone()).unwrap()
}

fn random_catalog(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Catalog {
    let entries = (0..n)
        .map(|i| Embedding::new(format!("x{i}"), (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap())
        .collect();
    Catalog::from_entries(dim, entries).unwrap()
}

fn sse_of(points: &[f64], dim: usize, assign: &[usize], k: usize) -> f64 {
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (i, &c) in assign.iter().enumerate() {
        counts[c] += 1;
        for d in 0..dim {
            sums[c * dim + d] += points[i * dim + d];
        }
    }
    assign
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            (0..dim)
                .map(|d| {
                    let m = sums[c * dim + d] / counts[c] as f64;
                    (points[i * dim + d] - m).powi(2)
                })
                .sum::<f64>()
        })
        .sum()
}

/// Best SSE over every 2-way split whose sizes differ by at most one.
fn exhaustive_balanced_two(points: &[f64], dim: usize) -> f64 {
    let n = points.len() / dim;
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        let ones = mask.count_ones() as usize;
        if ones != n / 2 && ones != n.div_ceil(2) {
            continue;
        }
        let assign: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
        best = best.min(sse_of(points, dim, &assign, 2));
    }
    best
}

fn c1_balanced_kmeans() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut size_violations = 0;
    let mut sse_violations = 0;
    let mut worst = 1.0f64;
    let mut small = 0;
    for t in 0..1000u64 {
        let exhaustive = t % 2 == 0;
        let (n, k, dim) = if exhaustive {
            (rng.random_range(2..=12), 2, rng.random_range(1..=4))
        } else {
            let k = rng.random_range(1..=16);
            (rng.random_range(k..=200), k, rng.random_range(1..=8))
        };
        let points: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fit = balanced_kmeans_fit(&points, dim, k, 10, t).unwrap();
        let sizes = fit.cluster_sizes();
        if sizes.iter().max().unwrap() - sizes.iter().min().unwrap() > 1 {
            size_violations += 1;
        }
        if exhaustive {
            small += 1;
            let opt = exhaustive_balanced_two(&points, dim);
            let got = sse_of(&points, dim, &fit.assignments, 2);
            let ratio = if opt > 0.0 { got / opt } else if got == 0.0 { 1.0 } else { f64::INFINITY };
            worst = worst.max(ratio);
            if got > 1.05 * opt + 1e-12 {
                sse_violations += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        size_violations == 0 && sse_violations == 0 && secs < 60.0,
        format!(
            "size violations {size_violations}/1000, SSE > 1.05x optimum {sse_violations}/{small} (worst ratio {worst:.4}), {secs:.1}s"
        ),
    )
}

fn c2_residual_monotonicity() -> Outcome {
    let mut violations = 0;
    let mut runs = 0;
    for seed in 0..10u64 {
        let spec = SyntheticSpec {
            clusters: 10,
            items_per_cluster: 30,
            seed,
            ..SyntheticSpec::default()
        };
        let cat = synth_catalog(&spec).unwrap();
        let kw = group_keywords(&cat.keywords);
        for catalog in [cat.items.clone(), enhance_catalog(&cat.items, &kw).unwrap()] {
            for balanced_last in [false, true] {
                let cfg = FitConfig {
                    level_sizes: vec![16, 8, 8],
                    balanced_last,
                    opq_subspaces: 2,
                    opq_codes: 8,
                    lloyd_iters: 15,
                    opq_outer_iters: 2,
                };
                let cb = RqOpqCodebook::fit(&catalog, &cfg, seed).unwrap();
                let norms = &cb.meta.stats.mean_residual_norms;
                runs += 1;
                if norms.windows(2).any(|w| w[1] > w[0] + 1e-9) {
                    violations += 1;
                }
            }
        }
    }
    // repeated centroid set: 4 distinct points, each 5 times
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base: Vec<Vec<f32>> = (0..4).map(|_| (0..6).map(|_| rng.random_range(-3.0f32..3.0)).collect()).collect();
    let entries = (0..20).map(|i| Embedding::new(format!("r{i}"), base[i % 4].clone()).unwrap()).collect();
    let repeated = Catalog::from_entries(6, entries).unwrap();
    let cfg = FitConfig {
        level_sizes: vec![4, 2, 2],
        balanced_last: false,
        opq_subspaces: 2,
        opq_codes: 2,
        lloyd_iters: 10,
        opq_outer_iters: 2,
    };
    let cb = RqOpqCodebook::fit(&repeated, &cfg, 0).unwrap();
    let zero_tail = cb.meta.stats.mean_residual_norms[1..].iter().all(|&r| r <= 1e-9);
    outcome(
        violations == 0 && zero_tail,
        format!(
            "non-increasing on {}/{runs} fits, repeated-centroid residuals {:?}",
            runs - violations,
            cb.meta.stats.mean_residual_norms[1..].iter().map(|r| format!("{r:.1e}")).collect::<Vec<_>>()
        ),
    )
}

fn c3_icr_inequality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    for t in 0..100u64 {
        let n = rng.random_range(20..120);
        let cat = random_catalog(&mut rng, n, 8);
        let cfg = FitConfig {
            level_sizes: vec![rng.random_range(2..6), rng.random_range(2..4), rng.random_range(1..4)],
            balanced_last: rng.random_bool(0.5),
            opq_subspaces: 2,
            opq_codes: 4,
            lloyd_iters: 8,
            opq_outer_iters: 2,
        };
        let s = sid_catalog(&RqOpqCodebook::fit(&cat, &cfg, t).unwrap(), &cat);
        if icr(&s, true) < icr(&s, false) {
            violations += 1;
        }
    }
    // four tight pairs, one RQ code per pair, residuals split by OPQ
    let mut entries = Vec::new();
    for c in 0..4 {
        for j in 0..2 {
            let mut v = vec![0.0f32; 4];
            v[c] = 10.0;
            v[(c + 1) % 4] = if j == 0 { 0.5 } else { -0.5 };
            entries.push(Embedding::new(format!("p{c}_{j}"), v).unwrap());
        }
    }
    let collide = Catalog::from_entries(4, entries).unwrap();
    let cfg = FitConfig {
        level_sizes: vec![4, 1, 1],
        balanced_last: false,
        opq_subspaces: 2,
        opq_codes: 2,
        lloyd_iters: 10,
        opq_outer_iters: 3,
    };
    let s = sid_catalog(&RqOpqCodebook::fit(&collide, &cfg, 0).unwrap(), &collide);
    let (rq, full) = (icr(&s, false), icr(&s, true));
    outcome(
        violations == 0 && full > rq,
        format!("violations {violations}/100, collision catalog ICR rq {rq:.3} -> full {full:.3}"),
    )
}

fn rates(cat: &Catalog, cfg: &FitConfig, seed: u64) -> (f64, f64, f64) {
    let s = sid_catalog(&RqOpqCodebook::fit(cat, cfg, seed).unwrap(), cat);
    (cur(&s, 2).unwrap(), cur(&s, 3).unwrap(), icr(&s, false))
}

fn keyword_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        clusters: 20,
        items_per_cluster: 50,
        dim: 16,
        noise: 0.2,
        noise_spread: 30.0,
        attribute_groups: 8,
        attribute_scale: 0.5,
        keyword_noise: 0.5,
        seed,
        ..SyntheticSpec::default()
    }
}

fn small_cfg(levels: Vec<usize>, balanced_last: bool) -> FitConfig {
    FitConfig {
        level_sizes: levels,
        balanced_last,
        opq_subspaces: 2,
        opq_codes: 16,
        lloyd_iters: 20,
        opq_outer_iters: 3,
    }
}

fn c4_keyword_enhancement() -> Outcome {
    let mut wins = 0;
    let mut cells = Vec::new();
    for seed in 0..10u64 {
        let cat = synth_catalog(&keyword_spec(seed)).unwrap();
        let enhanced = enhance_catalog(&cat.items, &group_keywords(&cat.keywords)).unwrap();
        let cfg = small_cfg(vec![32, 16, 8], false);
        let base = rates(&cat.items, &cfg, seed);
        let enh = rates(&enhanced, &cfg, seed);
        if enh.0 >= base.0 && enh.2 >= base.2 {
            wins += 1;
        }
        cells.push(format!("{:.2}/{:.2}", enh.0 - base.0, enh.2 - base.2));
    }
    outcome(
        wins >= 8,
        format!("{wins}/10 seeds, (dCUR_L2/dICR) {}", cells.join(" ")),
    )
}

fn c5_level3_balancing() -> Outcome {
    let mut wins = 0;
    let mut cells = Vec::new();
    for seed in 0..10u64 {
        let spec = SyntheticSpec {
            clusters: 40,
            items_per_cluster: 100,
            ..keyword_spec(seed)
        };
        let cat = synth_catalog(&spec).unwrap();
        let plain = rates(&cat.items, &small_cfg(vec![16, 16, 16], false), seed);
        let bal = rates(&cat.items, &small_cfg(vec![16, 16, 16], true), seed);
        if bal.1 >= plain.1 && bal.2 >= plain.2 {
            wins += 1;
        }
        cells.push(format!("{:.3}/{:.3}", bal.1 - plain.1, bal.2 - plain.2));
    }
    outcome(
        wins >= 8,
        format!("{wins}/10 seeds, (dCUR_total/dICR) {}", cells.join(" ")),
    )
}

fn c6_reward_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let level = rng.random_range(1..=6u8);
        let pos = if rng.random_bool(0.1) { 0 } else { rng.random_range(0..1_000_000u64) };
        let clk = if rng.random_bool(0.1) { 0 } else { rng.random_range(0..100_000u64) };
        let ord = if rng.random_bool(0.2) { 0 } else { rng.random_range(0..10_000u64) };
        let rec = InteractionRecord::new("q", "i", level, pos, clk, ord).unwrap();
        // base-10 logs and the product form of the total
        let (p, c, o) = (pos as f64 + 10.0, clk as f64 + 10.0, ord as f64 + 10.0);
        let ctr = c.log10() / (p * c * o).log10();
        let cvr = o.log10() / c.log10();
        let r = 2.0 * BASE_WEIGHTS[level as usize - 1] * (ctr * cvr) / (ctr + cvr);
        let (gctr, gcvr) = calibrated_rates(&rec);
        let gr = reward_score(&rec, &BASE_WEIGHTS);
        let other = if r > 0.0 { rng.random_range(0.0..r) } else { 0.0 };
        let delta = 1.0 / (r - other).max(1e-3);
        let gd = preference_delta(r, other, 1e-3).unwrap();
        for (a, b) in [(ctr, gctr), (cvr, gcvr), (r, gr), (delta, gd)] {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    let zero = InteractionRecord::new("q", "i", 3, 0, 0, 0).unwrap();
    let z = reward_score(&zero, &BASE_WEIGHTS);
    outcome(
        worst <= 1e-12 && z == 0.5,
        format!("max deviation {worst:.2e} over 10000 records, zero-count reward {z}"),
    )
}

fn c7_dpo_loss() -> Outcome {
    let cfg = DpoConfig::new(0.1, 0.0, 0.1).unwrap();
    let closed = listwise_dpo_loss(-2.0, -2.0, &[-3.0], &[-3.0], &[1.0], &cfg).unwrap();
    let closed_ok = (closed - std::f64::consts::LN_2).abs() <= 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-5;
    let mut violations = 0;
    let mut checked = 0;
    while checked < 100 {
        let beta = rng.random_range(0.05..2.0);
        let alpha = if checked % 4 == 0 { 0.0 } else { rng.random_range(0.01..1.0) };
        let delta = rng.random_range(0.0..0.5);
        let cfg = DpoConfig::new(beta, alpha, delta).unwrap();
        let m = rng.random_range(1..6);
        let pl: Vec<f64> = (0..m).map(|_| rng.random_range(-8.0..-0.5)).collect();
        let rl: Vec<f64> = (0..m).map(|_| rng.random_range(-8.0..-0.5)).collect();
        let d: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..5.0)).collect();
        let pw = rng.random_range(-8.0..-0.5);
        let rw = rng.random_range(-8.0..-0.5);
        // skip configurations sitting on a hinge kink
        let margins: Vec<f64> = (0..m).map(|l| beta * (pw - rw) - beta * (pl[l] - rl[l]) - delta).collect();
        if margins.iter().any(|x| x.abs() < 1e-3) {
            continue;
        }
        checked += 1;
        let f = |x: f64| listwise_dpo_loss(x, rw, &pl, &rl, &d, &cfg).unwrap();
        let fd = (f(pw + h) - f(pw - h)) / (2.0 * h);
        let active = margins.iter().any(|&x| x > 0.0);
        let ok = if alpha > 0.0 || active { fd < 0.0 } else { fd.abs() < 1e-9 };
        if !ok {
            violations += 1;
        }
    }
    outcome(
        closed_ok && violations == 0,
        format!("closed form {closed:.15} (ln2 {:.15}), sign violations {violations}/100", std::f64::consts::LN_2),
    )
}

fn c8_beam_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut failures = 0;
    for t in 0..200u64 {
        let n = rng.random_range(1..=64);
        let bounds = [rng.random_range(1..5u32), rng.random_range(1..4), rng.random_range(1..4), 3, 3];
        let entries: Vec<(String, Sid)> = (0..n)
            .map(|i| {
                let d: Vec<u32> = bounds.iter().map(|&b| rng.random_range(0..b)).collect();
                (format!("it{i}"), Sid::from_digits(d, 3).unwrap())
            })
            .collect();
        let trie = SidTrie::build(entries.iter().map(|(a, b)| (a, b))).unwrap();
        let table: HashMap<(Vec<u32>, u32), f64> = trie
            .paths()
            .iter()
            .flat_map(|p| (0..p.len()).map(move |l| (p[..l].to_vec(), p[l])))
            .map(|key| (key, rng.random_range(-5.0..0.0)))
            .collect();
        let scorer = |_: &[String], prefix: &[u32], digit: u32| table[&(prefix.to_vec(), digit)];
        let mut oracle: Vec<(Vec<u32>, f64)> = trie
            .paths()
            .into_iter()
            .map(|p| {
                let s = (0..p.len()).fold(0.0, |acc, l| acc + table[&(p[..l].to_vec(), p[l])]);
                (p, s)
            })
            .collect();
        oracle.sort_by(|a, b| rank_order((&a.0, a.1), (&b.0, b.1)));
        let got = beam_search(&[format!("ctx{t}")], &scorer, n, Decoding::Constrained(&trie)).unwrap();
        let same = got.len() == oracle.len()
            && got
                .iter()
                .zip(&oracle)
                .all(|(h, (p, s))| &h.digits == p && (h.score - s).abs() <= 1e-12);
        if !same {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("{failures}/200 catalogs differ from exhaustive enumeration"))
}

/// Expected HR@k of a uniformly random ranking of `n` items with `t` relevant.
fn random_hit_rate(n: usize, t: usize, k: usize) -> f64 {
    let miss: f64 = (0..k.min(n)).map(|i| (n - t - i) as f64 / (n - i) as f64).product();
    1.0 - miss.max(0.0)
}

fn c9_end_to_end_lift() -> Outcome {
    let start = Instant::now();
    let spec = SyntheticSpec {
        clusters: 50,
        items_per_cluster: 100,
        sessions: 20_000,
        ..SyntheticSpec::default()
    };
    let cat = synth_catalog(&spec).unwrap();
    let logs = synth_sessions(&spec).unwrap();
    let cfg = small_cfg(vec![64, 16, 16], true);
    let cb = RqOpqCodebook::fit(&cat.items, &cfg, 1).unwrap();
    let items = sid_catalog(&cb, &cat.items);
    let mut pairs = cb.encode_catalog(&cat.items).unwrap();
    pairs.extend(cb.encode_catalog(&cat.queries).unwrap());
    let all = SidCatalog::from_pairs(pairs, cfg.level_sizes.clone()).unwrap();
    let bounds = cb.sid_bounds();
    let held: HashSet<usize> = sample_indices(logs.sessions.len(), 1000, 9).into_iter().collect();
    let (test, train): (Vec<(usize, Session)>, Vec<(usize, Session)>) =
        logs.sessions.into_iter().enumerate().partition(|(i, _)| held.contains(i));
    let train: Vec<Session> = train.into_iter().map(|x| x.1).collect();
    let test: Vec<Session> = test.into_iter().map(|x| x.1).collect();
    let opts = Stage3Options {
        max_window: 5,
        bounds: &bounds,
        click_stats: None,
    };
    let (records, _) = build_stage3(&train, &all, &opts).unwrap();
    let scorer = CooccurrenceScorer::fit(&records, bounds.clone(), cb.rq_len()).unwrap();
    let queries = session_queries(&test, &all, &opts).unwrap();
    let co = run_eval(&items, &scorer, &queries, &[10], 64, true).unwrap().rows[0].hitrate;
    let uniform = run_eval(&items, &UniformScorer, &queries, &[10], 64, true).unwrap().rows[0].hitrate;
    let random = queries
        .iter()
        .map(|q| random_hit_rate(items.len(), q.truth.len(), 10))
        .sum::<f64>()
        / queries.len() as f64;
    let baseline = uniform.max(random);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        co >= 5.0 * baseline && secs < 300.0,
        format!(
            "HR@10 co-occurrence {co:.4} vs uniform {uniform:.4} (random-ranking expectation {random:.4}), {} cases, {secs:.1}s",
            queries.len()
        ),
    )
}

fn c10_drift() -> Outcome {
    let mut wins = 0;
    let mut cells = Vec::new();
    for seed in 0..10u64 {
        let spec = SyntheticSpec {
            items_per_cluster: 60,
            ..keyword_spec(seed)
        };
        let full = synth_catalog(&spec).unwrap();
        let mut base = Catalog::new(spec.dim).unwrap();
        let mut fresh = Catalog::new(spec.dim).unwrap();
        for (i, e) in full.items.iter().enumerate() {
            let target = if i % 60 < 50 { &mut base } else { &mut fresh };
            target.push(e.clone()).unwrap();
        }
        // new clusters drawn with an unrelated seed
        let far = synth_catalog(&SyntheticSpec {
            items_per_cluster: 10,
            seed: seed + 1000,
            ..spec.clone()
        })
        .unwrap();
        let ood = Catalog::from_entries(
            spec.dim,
            far.items
                .iter()
                .map(|e| Embedding::new(format!("ood-{}", e.id), e.vector.clone()).unwrap())
                .collect(),
        )
        .unwrap();
        let cb = RqOpqCodebook::fit(&base, &small_cfg(vec![32, 16, 8], true), seed).unwrap();
        let baseline = sid_catalog(&cb, &base);
        let before = icr(&baseline, true);
        let d_in = (drift_report(&cb, &baseline, &[fresh]).unwrap()[0].icr - before).abs();
        let d_ood = (drift_report(&cb, &baseline, &[ood]).unwrap()[0].icr - before).abs();
        if d_in < d_ood {
            wins += 1;
        }
        cells.push(format!("{d_in:.3}/{d_ood:.3}"));
    }
    outcome(wins >= 8, format!("{wins}/10 seeds, |dICR| in/ood {}", cells.join(" ")))
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sidforge"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    fs::write(dir.join(format!("{}.stdout", args[0])), &out.stdout).map_err(|e| e.to_string())?;
    Ok(())
}

fn cli_pipeline(dir: &Path) -> Result<(), String> {
    fs::write(
        dir.join("spec.json"),
        r#"{"clusters":6,"items_per_cluster":20,"users":40,"sessions":400,"seed":11}"#,
    )
    .map_err(|e| e.to_string())?;
    fs::write(dir.join("pairs_in.tsv"), "q1\ti1\tq2i\t0.71\nq1\ti2\tq2i\t0.6\ni1\ti2\ti2i\t0.95\n").map_err(|e| e.to_string())?;
    fs::write(dir.join("stats.tsv"), "*\ti0000_0000\t9\t0,0,0,0,0\n").map_err(|e| e.to_string())?;
    let steps: &[&[&str]] = &[
        &["synth", "--spec", "spec.json", "--out", "d"],
        &["filter-pairs", "--pairs", "pairs_in.tsv", "--out", "pairs_kept.tsv"],
        &["enhance", "--catalog", "d/items.emb", "--keywords", "d/keywords.emb", "--out", "enh.emb"],
        &[
            "fit-codebook", "--catalog", "enh.emb", "--levels", "8,4,4", "--balanced-last", "--opq", "2x8", "--seed", "5",
            "--lloyd-iters", "10", "--opq-iters", "3", "--out", "cb.bin",
        ],
        &["encode", "--codebook", "cb.bin", "--catalog", "enh.emb", "--out", "items.sids"],
        &["encode", "--codebook", "cb.bin", "--catalog", "enh.emb", "d/queries.emb", "--out", "all.sids"],
        &["metrics", "--sids", "items.sids", "--levels", "8,4,4", "--with-opq", "--out", "metrics.tsv"],
        &["drift", "--codebook", "cb.bin", "--baseline", "items.sids", "--batches", "d", "--out", "drift.tsv"],
        &["encode-user", "--codebook", "cb.bin", "--short", "items.sids", "--long", "all.sids", "--defaults", "stats.tsv",
            "--aggregate-out", "agg.emb", "--out", "user.tsv"],
        &["build-pairs", "--interactions", "d/interactions.tsv", "--out", "lists.tsv"],
        &["curriculum", "--stage", "1", "--codebook", "cb.bin", "--sids", "all.sids", "--texts", "d/texts.tsv",
            "--categories", "d/categories.tsv", "--shuffle-seed", "3", "--out", "s1.tsv"],
        &["curriculum", "--stage", "2", "--codebook", "cb.bin", "--sids", "all.sids", "--texts", "d/texts.tsv",
            "--pairs", "d/pairs.tsv", "--out", "s2.tsv"],
        &["curriculum", "--stage", "3", "--codebook", "cb.bin", "--sids", "all.sids", "--sessions", "d/sessions.tsv",
            "--holdout", "40", "--holdout-seed", "2", "--cases-out", "cases.tsv", "--out", "s3.tsv"],
        &["fit-scorer", "--records", "s3.tsv", "--codebook", "cb.bin", "--out", "scorer.json"],
        &["evaluate", "--codebook", "cb.bin", "--catalog", "enh.emb", "--scorer", "scorer.json", "--cases", "cases.tsv",
            "--k", "1,10,50", "--beam", "32", "--out", "eval.tsv"],
        &["evaluate", "--codebook", "cb.bin", "--catalog", "enh.emb", "--scorer", "scorer.json", "--cases", "cases.tsv",
            "--k", "10", "--beam", "16", "--unconstrained", "--out", "eval_free.tsv"],
    ];
    for step in steps {
        run_cli(dir, step)?;
    }
    // log-probabilities for every (context, item) in the lists
    let lists = fs::read_to_string(dir.join("lists.tsv")).map_err(|e| e.to_string())?;
    let mut lp = String::new();
    let mut seen = HashSet::new();
    for line in lists.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        for item in std::iter::once(f[1]).chain(f[2].split(',')) {
            if seen.insert((f[0].to_string(), item.to_string())) {
                let h = item.bytes().map(|b| b as f64).sum::<f64>();
                lp.push_str(&format!("{}\t{item}\t{}\t{}\n", f[0], -(h % 7.0) - 1.0, -(h % 5.0) - 1.0));
            }
        }
    }
    fs::write(dir.join("logprobs.tsv"), lp).map_err(|e| e.to_string())?;
    run_cli(dir, &["dpo-eval", "--lists", "lists.tsv", "--logprobs", "logprobs.tsv", "--out", "dpo.tsv"])?;
    let context = fs::read_to_string(dir.join("cases.tsv")).map_err(|e| e.to_string())?;
    let first = context.lines().next().and_then(|l| l.split('\t').next()).unwrap_or("").to_string();
    run_cli(dir, &["generate", "--trie-from", "items.sids", "--scorer", "scorer.json", "--context", &first, "--beam", "8", "--out", "gen.tsv"])?;
    run_cli(dir, &["generate", "--trie-from", "items.sids", "--scorer", "scorer.json", "--context", &first, "--beam", "8", "--unconstrained", "--out", "gen_free.tsv"])?;
    Ok(())
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c11_cli_determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    if let Err(e) = cli_pipeline(a.path()).and_then(|_| cli_pipeline(b.path())) {
        return outcome(false, format!("pipeline failed: {e}"));
    }
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    let differing: Vec<&str> = sa
        .iter()
        .zip(&sb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    outcome(
        sa.len() == sb.len() && differing.is_empty(),
        format!("{} files compared, differing: {differing:?}", sa.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("C1 balanced k-means sizes and SSE", c1_balanced_kmeans),
        ("C2 RQ residual monotonicity", c2_residual_monotonicity),
        ("C3 ICR with OPQ >= ICR without", c3_icr_inequality),
        ("C4 keyword enhancement direction", c4_keyword_enhancement),
        ("C5 level-3 balancing direction", c5_level3_balancing),
        ("C6 reward math oracle", c6_reward_oracle),
        ("C7 listwise preference loss", c7_dpo_loss),
        ("C8 constrained beam exactness", c8_beam_exactness),
        ("C9 end-to-end lift", c9_end_to_end_lift),
        ("C10 drift direction", c10_drift),
        ("C11 CLI determinism", c11_cli_determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
