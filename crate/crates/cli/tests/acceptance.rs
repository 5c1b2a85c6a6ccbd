//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use chainrag::chain::{Backends, Operation, RetrievalChain, RunTrace};
use chainrag::decoding::{
    decode, decode_best_of_n, decode_greedy, tree_search_rounds_per_depth, DecodeConfig, Strategy,
};
use chainrag::eval::{exact_match, f1, fit_log_linear, pareto_frontier, recall_at_k, ScorePoint};
use chainrag::lm::{LanguageModel, ScriptRule};
use chainrag::retrieval::{
    rrf_merge, tokenize, Bm25Index, Document, RankedEntry, RankedList, Retriever,
};
use chainrag::sampler::{
    sample_chains, select_best_chain, QAInstance, SamplerConfig, ScoreCache, Termination,
};
use chainrag::scenarios::{self, MultiHop, Scenario, FINAL_MARK};
use chainrag::ExecMode;
use chainrag_cli::config::{parse_decode_label, EvalConfig, RunConfig};
use chainrag_cli::fixtures::ScenarioFiles;
use chainrag_cli::run::METADATA_FILE;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($msg)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn greedy(s: &Scenario, l: usize) -> Result<chainrag::decoding::DecodeOutcome, String> {
    let (lm, index) = (s.backend(), s.index().map_err(err)?);
    let b = Backends::new(&lm, &index);
    decode_greedy(&s.instance().query, &s.task(), &DecodeConfig::greedy(l), &b).map_err(err)
}

fn informative(c: &RetrievalChain) -> bool {
    c.steps()
        .iter()
        .any(|s| s.sub_query.starts_with("Who is the mentor of"))
}

// 1
fn scenario_reproduction() -> Outcome {
    let s = scenarios::mjallby();
    let six = greedy(&s, 6)?;
    let queries: Vec<&str> = six
        .chain
        .steps()
        .iter()
        .map(|st| st.sub_query.as_str())
        .collect();
    check!(
        queries == scenarios::MJALLBY_SUB_QUERIES,
        "sub-queries {queries:?}"
    );
    check!(
        six.chain.final_answer() == Some("4"),
        "L=6 answer {:?}",
        six.chain.final_answer()
    );
    let zero = greedy(&s, 0)?;
    let naive = zero.chain.final_answer().unwrap_or_default();
    check!(naive != "4", "L=0 answered correctly");
    Ok(format!(
        "L=6 -> \"4\" after {:?}; L=0 -> {naive:?}",
        queries.last().unwrap()
    ))
}

// 2
fn greedy_is_best_of_one() -> Outcome {
    for id in 0..50u32 {
        let s = scenarios::random_multi_hop(2024, id).build();
        let (lm, index) = (s.backend(), s.index().map_err(err)?);
        let b = Backends::new(&lm, &index);
        let l = 1 + id as usize % 6;
        let mut g = DecodeConfig::greedy(l);
        g.stop_bias = Some(0.0);
        let n = DecodeConfig {
            strategy: Strategy::BestOfN,
            n_chains: 1,
            subquery_temperature: 0.0,
            ..g.clone()
        };
        let a = decode_greedy(&s.instance().query, &s.task(), &g, &b).map_err(err)?;
        let c = decode_best_of_n(&s.instance().query, &s.task(), &n, &b, ExecMode::Parallel)
            .map_err(err)?;
        check!(a.chain == c.chain, "scenario {id}: chains differ");
        check!(
            a.chain.final_answer() == c.chain.final_answer(),
            "scenario {id}: answers differ"
        );
        check!(
            a.trace.events() == c.trace.events(),
            "scenario {id}: traces differ"
        );
        check!(
            a.trace.totals() == c.trace.totals(),
            "scenario {id}: totals differ"
        );
    }
    Ok("50/50 identical chains, answers and traces".into())
}

// 3
fn penalty_selection() -> Outcome {
    let s = MultiHop::new(3, 2).with_distractors(3.0).build();
    let (lm, index) = (s.backend(), s.index().map_err(err)?);
    let b = Backends::new(&lm, &index);
    let (mut qualifying, mut tried) = (0, 0u64);
    while qualifying < 50 {
        check!(
            tried < 5000,
            "only {qualifying} qualifying seeds in {tried}"
        );
        let config = DecodeConfig {
            seed: tried,
            ..DecodeConfig::best_of_n(2, 4)
        };
        tried += 1;
        let out = decode_best_of_n(
            &s.instance().query,
            &s.task(),
            &config,
            &b,
            ExecMode::Parallel,
        )
        .map_err(err)?;
        if out.all_candidates.iter().filter(|c| informative(c)).count() != 1 {
            continue;
        }
        qualifying += 1;
        check!(
            informative(&out.chain),
            "seed {}: sentinel-prone chain selected",
            tried - 1
        );
        let best = out.chain.penalty.ok_or("winner has no penalty")?;
        for c in &out.all_candidates {
            check!(
                best <= c.penalty.ok_or("candidate without penalty")?,
                "seed {}: winner not minimal",
                tried - 1
            );
        }
    }
    Ok(format!(
        "50/50 seeds select the informative chain ({tried} seeds drawn)"
    ))
}

// 4
fn tree_search_accounting() -> Outcome {
    let config = DecodeConfig::tree_search(3);
    let rounds = tree_search_rounds_per_depth(&config);
    for id in 0..10u32 {
        let s = MultiHop::new(400 + id, 1 + id as usize % 4)
            .tagged()
            .build();
        let (lm, index) = (s.backend(), s.index().map_err(err)?);
        let b = Backends::new(&lm, &index);
        let out = decode(
            &s.instance().query,
            &s.task(),
            &config,
            &b,
            ExecMode::Parallel,
        )
        .map_err(err)?;
        for depth in 0..config.max_length {
            for op in [Operation::SubQuery, Operation::SubAnswer] {
                let n = out.trace.count_at_depth(op, depth);
                check!(
                    n == rounds,
                    "scenario {id} depth {depth} {op:?}: {n} rounds, expected {rounds}"
                );
            }
        }
    }
    Ok(format!("{rounds} rounds per depth in all 10 scenarios"))
}

// 5
fn sampler_termination() -> Outcome {
    let run = |s: &Scenario, qa: &QAInstance, config: &SamplerConfig| -> Result<Vec<_>, String> {
        let (lm, index) = (s.backend(), s.index().map_err(err)?);
        let b = Backends::new(&lm, &index);
        let final_docs = index.search(&qa.query, config.final_k).map_err(err)?;
        let docs = index.resolve(&final_docs).map_err(err)?;
        sample_chains(
            qa,
            &s.task(),
            &docs,
            config,
            &b,
            &ScoreCache::new(),
            &mut RunTrace::new(),
        )
        .map_err(err)
    };

    let one_hop = MultiHop::new(51, 1).build();
    for seed in 0..10 {
        let chains = run(
            &one_hop,
            one_hop.instance(),
            &SamplerConfig {
                seed,
                ..SamplerConfig::default()
            },
        )?;
        check!(
            chains.len() == 1
                && chains[0].chain.len() == 1
                && chains[0].termination == Termination::AnswerMatch,
            "seed {seed}: answer match did not stop at step 1"
        );
    }

    let spec = MultiHop::new(52, 4);
    let mut likely = spec.build();
    likely.rules.insert(
        0,
        ScriptRule::on(FINAL_MARK)
            .requiring(spec.entity(0))
            .requiring("Intermediate answer 2: ")
            .for_continuation(spec.answer())
            .logprob(-0.03),
    );
    for seed in 0..10 {
        let chains = run(
            &likely,
            likely.instance(),
            &SamplerConfig {
                seed,
                ..SamplerConfig::default()
            },
        )?;
        let last = chains.last().ok_or("no chains")?;
        check!(
            last.termination == Termination::Likelihood && last.chain.len() == 2,
            "seed {seed}: likelihood rule ended at {} steps ({:?})",
            last.chain.len(),
            last.termination
        );
    }

    let long = MultiHop::new(53, 6).build();
    let mut unreachable = long.instance().clone();
    unreachable.answers = vec!["nobody".into()];
    let mut counts = [0usize; 5];
    let mut draws = 0;
    let mut seed = 0;
    while draws < 1000 {
        let config = SamplerConfig {
            seed,
            ..SamplerConfig::default()
        };
        for (i, c) in run(&long, &unreachable, &config)?.iter().enumerate() {
            let cap = config.draw_max_length(i);
            check!(
                c.chain.max_length() == cap,
                "seed {seed} chain {i}: cap mismatch"
            );
            check!(
                c.chain.len() <= cap,
                "seed {seed} chain {i}: {} steps > cap {cap}",
                c.chain.len()
            );
            counts[cap - 1] += 1;
            draws += 1;
        }
        seed += 1;
    }
    let expected = draws as f64 / 5.0;
    let stat: f64 = counts
        .iter()
        .map(|&o| (o as f64 - expected).powi(2) / expected)
        .sum();
    let p = 1.0 - ChiSquared::new(4.0).map_err(err)?.cdf(stat);
    check!(
        p > 0.01,
        "length caps not uniform: counts {counts:?}, p = {p:.4}"
    );
    Ok(format!(
        "match@1, likelihood@2, {draws} draws within cap, counts {counts:?} chi2 p = {p:.3}"
    ))
}

// 6
fn selection_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for id in 0..100u32 {
        let s = MultiHop::new(600 + id, rng.gen_range(1..=4))
            .with_distractors(1.0)
            .build();
        let (lm, index) = (s.backend(), s.index().map_err(err)?);
        let b = Backends::new(&lm, &index);
        let qa = s.instance();
        let config = DecodeConfig {
            seed: rng.gen(),
            ..DecodeConfig::best_of_n(rng.gen_range(1..=4), rng.gen_range(2..=5))
        };
        let candidates = decode_best_of_n(&qa.query, &s.task(), &config, &b, ExecMode::Sequential)
            .map_err(err)?
            .all_candidates;
        let final_docs = index.search(&qa.query, 20).map_err(err)?;
        let docs = index.resolve(&final_docs).map_err(err)?;
        let brute: Vec<(f64, usize)> = candidates
            .iter()
            .map(|c| {
                let prompt =
                    b.templates
                        .render_final_prompt(&c.query, &c.history(), &docs, &c.task);
                lm.score_continuation(&prompt, &qa.answers[0])
                    .map(|r| (r.sum_logprob, c.len()))
            })
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let mut want = 0;
        for (i, &(score, len)) in brute.iter().enumerate() {
            let (bs, bl) = brute[want];
            if score > bs || (score == bs && len < bl) {
                want = i;
            }
        }
        let got = select_best_chain(
            &candidates,
            qa,
            &final_docs,
            &b,
            &ScoreCache::new(),
            &mut RunTrace::new(),
        )
        .map_err(err)?;
        check!(
            got.chain.steps() == candidates[want].steps(),
            "instance {id}: selected a different chain"
        );
        check!(
            got.answer_logprob == brute[want].0,
            "instance {id}: score mismatch"
        );
    }
    Ok("100/100 instances agree with direct gateway scoring".into())
}

// 7
fn stop_bias_monotonicity() -> Outcome {
    let biases = [-4.0, -2.0, 0.0, 2.0, 4.0];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut averages = [0.0; 5];
    let n = 20;
    for id in 0..n {
        let s = MultiHop::new(700 + id, 6)
            .with_stop_logits(rng.gen_range(-8.0..-3.0), rng.gen_range(0.3..1.5))
            .build();
        let (lm, index) = (s.backend(), s.index().map_err(err)?);
        let b = Backends::new(&lm, &index);
        let mut lengths = Vec::new();
        for &bias in &biases {
            let config = DecodeConfig {
                stop_bias: Some(bias),
                ..DecodeConfig::greedy(6)
            };
            lengths.push(
                decode(
                    &s.instance().query,
                    &s.task(),
                    &config,
                    &b,
                    ExecMode::Sequential,
                )
                .map_err(err)?
                .chain
                .len(),
            );
        }
        check!(
            lengths.windows(2).all(|w| w[0] >= w[1]),
            "scenario {id}: lengths {lengths:?} increase with bias"
        );
        for (avg, &l) in averages.iter_mut().zip(&lengths) {
            *avg += l as f64 / n as f64;
        }
    }
    check!(
        averages.windows(2).all(|w| w[0] >= w[1]),
        "average lengths {averages:?}"
    );
    check!(
        averages[0] > averages[4],
        "bias has no effect: {averages:?}"
    );
    Ok(format!(
        "average length {:?} over biases {biases:?}",
        averages.map(|a| (a * 100.0).round() / 100.0)
    ))
}

// 8
fn metric_oracle() -> Outcome {
    const T: f64 = 2.0 / 3.0;
    let table: [(&str, &[&str], u8, f64); 20] = [
        ("4 months", &["4"], 0, T),
        ("Paris", &["paris"], 1, 1.0),
        ("The Eiffel Tower", &["eiffel tower"], 1, 1.0),
        ("a cat", &["the cat"], 1, 1.0),
        ("cat!", &["cat"], 1, 1.0),
        ("  New   York ", &["new york"], 1, 1.0),
        ("new york city", &["new york"], 0, 0.8),
        ("york", &["new york"], 0, T),
        ("london", &["paris"], 0, 0.0),
        ("", &["paris"], 0, 0.0),
        ("", &[""], 1, 1.0),
        ("4 months", &["4", "four months"], 0, T),
        ("four months", &["4", "four months"], 1, 1.0),
        ("barack obama", &["obama"], 0, T),
        ("obama obama", &["obama"], 0, T),
        ("U.S.", &["us"], 1, 1.0),
        ("1,000", &["1000"], 1, 1.0),
        ("x y z w", &["x y"], 0, T),
        ("red blue", &["blue green"], 0, 0.5),
        ("anything", &[], 0, 0.0),
    ];
    for (pred, golds, em, want) in table {
        check!(exact_match(pred, golds) == em, "EM({pred:?}, {golds:?})");
        let got = f1(pred, golds);
        check!(
            (got - want).abs() <= 1e-9,
            "F1({pred:?}, {golds:?}) = {got}, expected {want}"
        );
    }

    let family = scenarios::multi_hop_family(800, 200, |i| 1 + i % 4);
    let index = family.index().map_err(err)?;
    let mut totals = [0u32; 3];
    for qa in &family.instances {
        let lists = vec![
            index.search(&qa.query, 100).map_err(err)?,
            index
                .search(
                    &qa.query.replace("the mentor of the mentor", "the mentor"),
                    100,
                )
                .map_err(err)?,
        ];
        let fused = rrf_merge(&lists, 60, 100).map_err(err)?;
        let r: Vec<u8> = (1..=100)
            .map(|k| recall_at_k(&fused, &qa.answers, &index, k))
            .collect();
        check!(
            r.windows(2).all(|w| w[0] <= w[1]),
            "{:?}: recall not monotone",
            qa.query
        );
        for (t, k) in totals.iter_mut().zip([10, 20, 100]) {
            *t += u32::from(r[k - 1]);
        }
    }
    check!(
        totals[0] <= totals[1] && totals[1] <= totals[2],
        "aggregate recall {totals:?}"
    );
    Ok(format!(
        "20/20 golden cases; R@10/20/100 = {totals:?} of 200, zero violations"
    ))
}

const WORDS: [&str; 12] = [
    "alpha", "beta", "gamma", "delta", "river", "stone", "music", "north", "crown", "field",
    "lamp", "ore",
];

fn brute_bm25(docs: &[Document], query: &str, k: usize) -> Vec<(String, f64)> {
    let (k1, b) = (0.9, 0.4);
    let toks: Vec<Vec<String>> = docs.iter().map(|d| tokenize(&d.text)).collect();
    let avg = toks.iter().map(Vec::len).sum::<usize>() as f64 / docs.len() as f64;
    let n = docs.len() as f64;
    let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
    let mut out = Vec::new();
    for (d, t) in docs.iter().zip(&toks) {
        let mut score = 0.0;
        let mut hit = false;
        for term in &terms {
            let tf = t.iter().filter(|x| *x == term).count() as f64;
            if tf > 0.0 {
                hit = true;
                let df = toks.iter().filter(|ts| ts.contains(term)).count() as f64;
                let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * t.len() as f64 / avg));
            }
        }
        if hit {
            out.push((d.doc_id.clone(), score));
        }
    }
    out.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    out.truncate(k);
    out
}

fn brute_rrf(lists: &[RankedList], k: u32, depth: usize) -> Vec<(String, f64)> {
    let ids: BTreeSet<&str> = lists.iter().flat_map(|l| l.doc_ids().take(depth)).collect();
    let mut out: Vec<(String, f64)> = ids
        .into_iter()
        .map(|id| {
            let s = lists
                .iter()
                .filter_map(|l| l.doc_ids().take(depth).position(|d| d == id))
                .map(|p| 1.0 / (f64::from(k) + p as f64 + 1.0))
                .sum();
            (id.to_string(), s)
        })
        .collect();
    out.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    out
}

fn same_ranking(got: &RankedList, want: &[(String, f64)]) -> bool {
    got.len() == want.len()
        && got
            .entries()
            .iter()
            .zip(want)
            .all(|(e, (id, s))| &e.doc_id == id && (e.score - s).abs() <= 1e-9 * s.abs().max(1.0))
}

// 9
fn retrieval_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for c in 0..100 {
        let n = rng.gen_range(1..=50);
        let docs: Vec<Document> = (0..n)
            .map(|i| {
                let len = rng.gen_range(1..=12);
                let text: Vec<&str> = (0..len).map(|_| *WORDS.choose(&mut rng).unwrap()).collect();
                Document::new(format!("d{i:02}"), format!("T{i}"), text.join(" "))
            })
            .collect();
        let index = Bm25Index::build(docs.clone()).map_err(err)?;
        for _ in 0..5 {
            let q: Vec<&str> = (0..rng.gen_range(1..=3))
                .map(|_| *WORDS.choose(&mut rng).unwrap())
                .collect();
            let k = rng.gen_range(1..=n);
            let got = index.search(&q.join(" "), k).map_err(err)?;
            check!(
                same_ranking(&got, &brute_bm25(&docs, &q.join(" "), k)),
                "corpus {c}: BM25 top-{k} for {q:?}"
            );
        }
        let lists: Vec<RankedList> = (0..rng.gen_range(1..=4))
            .map(|_| {
                let mut ids: Vec<usize> = (0..n).collect();
                ids.shuffle(&mut rng);
                let len = rng.gen_range(1..=n);
                RankedList::new(
                    ids[..len]
                        .iter()
                        .enumerate()
                        .map(|(r, id)| RankedEntry {
                            doc_id: format!("d{id:02}"),
                            score: (len - r) as f64,
                        })
                        .collect(),
                )
            })
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let depth = rng.gen_range(1..=n);
        let fused = rrf_merge(&lists, 60, depth).map_err(err)?;
        check!(
            same_ranking(&fused, &brute_rrf(&lists, 60, depth)),
            "corpus {c}: RRF depth {depth}"
        );
    }
    Ok("100/100 corpora: BM25 top-k and RRF match brute force".into())
}

fn curve_points(a: f64, b: f64, c: f64) -> Vec<(f64, f64)> {
    [40.0, 90.0, 200.0, 450.0, 900.0, 1800.0, 3500.0, 7000.0]
        .iter()
        .map(|&x| (x, a * (x + b).ln() + c))
        .collect()
}

fn score_points(xy: &[(f64, f64)]) -> Vec<ScorePoint> {
    xy.iter()
        .enumerate()
        .map(|(i, &(x, y))| ScorePoint::new(format!("p{i}"), x, y))
        .collect()
}

// 10
fn fit_recovery() -> Outcome {
    let fit = fit_log_linear(&score_points(&curve_points(5.0, 100.0, 10.0))).map_err(err)?;
    let rel = |got: f64, want: f64| (got - want).abs() / want.abs();
    check!(
        rel(fit.a, 5.0) <= 1e-3 && rel(fit.b, 100.0) <= 1e-3 && rel(fit.c, 10.0) <= 1e-3,
        "noiseless fit {fit:?}"
    );
    check!(fit.residual < 1e-9, "noiseless residual {}", fit.residual);
    let noise = Normal::new(0.0, 0.5).map_err(err)?;
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noisy: Vec<(f64, f64)> = curve_points(5.0, 100.0, 10.0)
            .into_iter()
            .map(|(x, y)| (x, y + rng.sample(noise)))
            .collect();
        let f = fit_log_linear(&score_points(&noisy)).map_err(err)?;
        worst = worst.max(rel(f.a, 5.0));
    }
    check!(
        worst <= 0.2,
        "noisy fits: worst relative error in a is {worst:.3}"
    );
    Ok(format!(
        "exact (a, b, c) = ({:.6}, {:.4}, {:.5}), residual {:.1e}; noisy worst |da|/a = {worst:.3}",
        fit.a, fit.b, fit.c, fit.residual
    ))
}

// 11
fn token_budget_scaling() -> Outcome {
    let family = Scenario::combine(
        (0..8).map(|i| MultiHop::new(1100 + i, 1 + i as usize % 4).tagged().build()),
    );
    let (lm, index) = (family.backend(), family.index().map_err(err)?);
    let b = Backends::new(&lm, &index);
    let run = |config: &DecodeConfig| -> Result<(f64, f64), String> {
        let (mut tokens, mut em) = (0.0, 0.0);
        for qa in &family.instances {
            let out =
                decode(&qa.query, &family.task(), config, &b, ExecMode::Parallel).map_err(err)?;
            tokens += out.trace.totals().total_tokens() as f64;
            em += 100.0
                * f64::from(exact_match(
                    out.chain.final_answer().unwrap_or_default(),
                    &qa.answers,
                ));
        }
        let n = family.instances.len() as f64;
        Ok((tokens / n, em / n))
    };
    let mut points = Vec::new();
    let mut by_l = Vec::new();
    for l in [1, 2, 4, 6, 10] {
        let (t, m) = run(&DecodeConfig::greedy(l))?;
        by_l.push(t);
        points.push(ScorePoint::new(format!("greedy_L{l}"), t, m));
    }
    let mut by_n = Vec::new();
    for n in [1, 4, 8] {
        let (t, m) = run(&DecodeConfig::best_of_n(4, n))?;
        by_n.push(t);
        points.push(ScorePoint::new(format!("best_of_n_L4_N{n}"), t, m));
    }
    check!(
        by_l.windows(2).all(|w| w[0] < w[1]),
        "tokens not increasing in L: {by_l:?}"
    );
    check!(
        by_n.windows(2).all(|w| w[0] < w[1]),
        "tokens not increasing in N: {by_n:?}"
    );
    let frontier = pareto_frontier(&points);
    check!(!frontier.is_empty(), "empty Pareto set");
    let dominated = |p: &ScorePoint| {
        points.iter().any(|q| {
            q.avg_tokens <= p.avg_tokens
                && q.metric_value >= p.metric_value
                && (q.avg_tokens < p.avg_tokens || q.metric_value > p.metric_value)
        })
    };
    let want: BTreeSet<&str> = points
        .iter()
        .filter(|p| !dominated(p))
        .map(|p| p.label.as_str())
        .collect();
    let got: BTreeSet<&str> = frontier.iter().map(|p| p.label.as_str()).collect();
    check!(got == want, "frontier {got:?}, brute force {want:?}");
    Ok(format!(
        "tokens by L {:?}, by N {:?}; frontier {got:?}",
        by_l.map_round(),
        by_n.map_round()
    ))
}

trait RoundAll {
    fn map_round(&self) -> Vec<f64>;
}

impl RoundAll for Vec<f64> {
    fn map_round(&self) -> Vec<f64> {
        self.iter().map(|x| x.round()).collect()
    }
}

fn pipeline(root: &Path, workers: usize) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let family = Scenario::combine((0..6).map(|i| {
        MultiHop::new(1200 + i, 1 + i as usize % 3)
            .with_distractors(1.0)
            .build()
    }));
    let files = ScenarioFiles::write(&root.join("data"), &family).map_err(err)?;
    let out = root.join("out");
    std::fs::create_dir_all(&out).map_err(err)?;
    let index_path = out.join("index.json");
    chainrag_cli::index::cmd_index(&files.corpus, &index_path, workers).map_err(err)?;
    let mut config = RunConfig {
        index_path: Some(index_path),
        seed: 12,
        workers,
        ..files.run_config(&out)
    };
    config.sampler.max_chains = 4;
    config.sweep = ["greedy_L2", "best_of_n_L2_N4", "tree_search_L2"]
        .iter()
        .map(|l| parse_decode_label(l, &config.decode))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    chainrag_cli::sample::cmd_sample(&config).map_err(err)?;
    chainrag_cli::decode::cmd_decode(&config).map_err(err)?;
    let eval = EvalConfig {
        n_resamples: 500,
        ci_level: 0.95,
    };
    chainrag_cli::eval::cmd_eval(std::slice::from_ref(&out), &out, &eval, 12).map_err(err)?;
    let mut contents = BTreeMap::new();
    for entry in std::fs::read_dir(&out).map_err(err)? {
        let path = entry.map_err(err)?.path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if name != METADATA_FILE {
            contents.insert(name, std::fs::read(&path).map_err(err)?);
        }
    }
    Ok(contents)
}

// 12
fn determinism() -> Outcome {
    let a_dir = tempfile::tempdir().map_err(err)?;
    let b_dir = tempfile::tempdir().map_err(err)?;
    let a = pipeline(a_dir.path(), 1)?;
    let b = pipeline(b_dir.path(), 4)?;
    check!(
        a.keys().eq(b.keys()),
        "file sets differ: {:?} vs {:?}",
        a.keys(),
        b.keys()
    );
    for (name, bytes) in &a {
        check!(bytes == &b[name], "{name} differs between runs");
    }
    check!(
        a.keys().any(|k| k.starts_with("results_")) && a.contains_key("curve.csv"),
        "missing outputs"
    );
    Ok(format!(
        "{} files byte-identical (sequential vs 4 workers)",
        a.len()
    ))
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            id: 1,
            name: "scenario reproduction",
            limit: Some(Duration::from_secs(5)),
            run: scenario_reproduction,
        },
        Criterion {
            id: 2,
            name: "greedy equals best-of-1",
            limit: Some(Duration::from_secs(30)),
            run: greedy_is_best_of_one,
        },
        Criterion {
            id: 3,
            name: "penalty selection",
            limit: None,
            run: penalty_selection,
        },
        Criterion {
            id: 4,
            name: "tree search accounting",
            limit: None,
            run: tree_search_accounting,
        },
        Criterion {
            id: 5,
            name: "sampler termination",
            limit: None,
            run: sampler_termination,
        },
        Criterion {
            id: 6,
            name: "chain selection oracle",
            limit: None,
            run: selection_oracle,
        },
        Criterion {
            id: 7,
            name: "stop-bias monotonicity",
            limit: None,
            run: stop_bias_monotonicity,
        },
        Criterion {
            id: 8,
            name: "metric oracle",
            limit: None,
            run: metric_oracle,
        },
        Criterion {
            id: 9,
            name: "RRF and BM25 oracles",
            limit: None,
            run: retrieval_oracles,
        },
        Criterion {
            id: 10,
            name: "log-linear fit recovery",
            limit: None,
            run: fit_recovery,
        },
        Criterion {
            id: 11,
            name: "token-budget scaling",
            limit: None,
            run: token_budget_scaling,
        },
        Criterion {
            id: 12,
            name: "pipeline determinism",
            limit: None,
            run: determinism,
        },
    ];
    let only: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for c in criteria
        .iter()
        .filter(|c| only.is_empty() || only.contains(&c.id))
    {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .map_or("panicked".into(), |m| format!("panicked: {m}")))
        });
        let elapsed = start.elapsed();
        let result = match (result, c.limit) {
            (Ok(_), Some(limit)) if elapsed > limit => {
                Err(format!("took {elapsed:.2?}, limit {limit:?}"))
            }
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("PASS [{:>2}] {}: {detail} ({elapsed:.2?})", c.id, c.name),
            Err(reason) => {
                failed += 1;
                println!("FAIL [{:>2}] {}: {reason} ({elapsed:.2?})", c.id, c.name);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
