//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use hiercache::bank::{BoundaryPolicy, CacheTree, ChunkId, KnowledgeBank, MemoryStore, NodeId, PromptLayout, Step, MANIFEST_FILE, ROOT, SLICES_DIR};
use hiercache::config::Config;
use hiercache::engine::{Engine, QA_FILE};
use hiercache::model::{
    decode_macs, projection_macs, CostModel, InferenceDescriptor, QkvPrefix, ToyModelConfig, ToyTransformer, END_TOKEN,
};
use hiercache::qa::QaBank;
use hiercache::scheduler::TickAction;
use hiercache::text::{Embedder, HashEmbedder, Tokenizer, TokenizerVocab};
use hiercache::trace::{parse_trace, EventRecord};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets")
}

fn corpus() -> String {
    std::fs::read_to_string(assets().join("corpus/notes.txt")).expect("corpus")
}

fn scenario_engine(conf: &str, tweak: impl FnOnce(&mut Config)) -> Engine {
    let mut cfg = Config::load(&assets().join("scenarios").join(conf)).expect("scenario config");
    tweak(&mut cfg);
    let mut e = Engine::new(cfg).expect("engine");
    e.ingest(&[corpus()], 0).expect("ingest");
    e
}

fn replay(e: &mut Engine, trace: &str) -> Vec<EventRecord> {
    let text = std::fs::read_to_string(assets().join("scenarios").join(trace)).expect("trace");
    e.replay(&parse_trace(&text).expect("parse trace")).expect("replay")
}

fn total_flops(recs: &[EventRecord]) -> f64 {
    recs.iter().map(|r| r.cost.total_flops()).sum()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// 1 ---------------------------------------------------------------------------

fn boundary_vocab() -> TokenizerVocab {
    TokenizerVocab::from_pieces(["ab", "bc", "ca", "a b", "c a", "b c", "ab ", "\na", "c\n", "abc", "a?", " ab"])
}

fn words(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> String {
    let n = rng.gen_range(lo..=hi);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..=3);
            (0..len).map(|_| *[b'a', b'b', b'c'].choose(rng).unwrap() as char).collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn same_bits(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn cached_prefill_equivalence() -> Check {
    let tok = Tokenizer::new(boundary_vocab());
    let (a, b) = ("c", " a");
    let mut joined = tok.tokenize(a).tokens;
    joined.extend(tok.tokenize(b).tokens);
    ensure(joined != tok.tokenize("c a").tokens, || "test vocabulary has no boundary witness".into())?;

    let embedder = HashEmbedder::default();
    let (mut prompts, mut splits, mut discards, mut divergent) = (0, 0, 0, 0);
    for case in 0..240u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let cfg = ToyModelConfig {
            layers: rng.gen_range(1..=4),
            heads: rng.gen_range(1..=4),
            head_dim: *[2usize, 4, 8, 16].choose(&mut rng).unwrap(),
            vocab_size: tok.vocab().len(),
            seed: case,
        };
        let model = ToyTransformer::new(cfg).map_err(|e| e.to_string())?;
        let boundary = BoundaryPolicy {
            k_boundary: rng.gen_range(0..=4),
            at_system_node: true,
        };
        let system = words(&mut rng, 2, 4);
        let mut bank = KnowledgeBank::new(cfg.dims(), &system, u64::MAX, boundary, Box::new(MemoryStore::new()));
        let pool: Vec<ChunkId> = (0..4)
            .map(|_| {
                let text = words(&mut rng, 2, 5);
                bank.chunks.insert(&text, &tok, &embedder).0
            })
            .collect();

        let mut target: Vec<ChunkId> = pool.clone();
        target.shuffle(&mut rng);
        target.truncate(rng.gen_range(1..=3));
        let keep = rng.gen_range(0..=target.len());
        let mut donor: Vec<ChunkId> = target[..keep].to_vec();
        for c in &pool {
            if !donor.contains(c) && donor.len() < 3 && rng.gen_bool(0.5) {
                donor.push(c.clone());
            }
        }
        let layout = |bank: &KnowledgeBank, path: &[ChunkId], query: &str| {
            let chunks: Vec<_> = path.iter().map(|id| bank.chunks.get(id).unwrap()).collect();
            PromptLayout::assemble(&system, &chunks, query)
        };
        let d_layout = layout(&bank, &donor, &format!("{}?", words(&mut rng, 1, 3)));
        let t_layout = layout(&bank, &target, &format!("{}?", words(&mut rng, 1, 3)));
        let d_tokens = tok.tokenize(&d_layout.text);
        let t_tokens = tok.tokenize(&t_layout.text);
        ensure(t_tokens.len() <= 128 && d_tokens.len() <= 128, || format!("case {case}: prompt over 128 tokens"))?;

        let donor_out = model.prefill(&d_tokens.tokens, None).map_err(|e| e.to_string())?;
        bank.slice_and_insert(&d_layout, &d_tokens, &donor_out.suffix, 1)
            .map_err(|e| e.to_string())?;

        let full = model.prefill(&t_tokens.tokens, None).map_err(|e| e.to_string())?;
        let full_dec = model.decode(&full.state, 6, END_TOKEN, None).map_err(|e| e.to_string())?;

        let m = bank.match_prompt(&t_layout, &t_tokens, 2, true).map_err(|e| e.to_string())?;
        if m.discarded > 0 {
            discards += 1;
            let last = bank.tree().node(*m.chain.last().unwrap()).unwrap();
            let ranges = t_layout.token_ranges(&t_tokens);
            if t_tokens.tokens[ranges[m.chain.len() - 1].clone()] != last.tokens[..] {
                divergent += 1;
            }
        }
        let reuse = (m.l_pre() > 0).then_some(&m.prefix);
        let cached = model.prefill(&t_tokens.tokens, reuse).map_err(|e| e.to_string())?;
        let cached_dec = model.decode(&cached.state, 6, END_TOKEN, None).map_err(|e| e.to_string())?;
        ensure(same_bits(&cached.state.final_hidden, &full.state.final_hidden), || {
            format!("case {case}: hidden state differs after bank match")
        })?;
        ensure(cached_dec.tokens == full_dec.tokens, || format!("case {case}: decode differs after bank match"))?;
        ensure(
            tok.detokenize(&cached_dec.tokens) == tok.detokenize(&full_dec.tokens),
            || format!("case {case}: text differs"),
        )?;
        prompts += 1;

        let ranges = t_layout.token_ranges(&t_tokens);
        for r in &ranges[..ranges.len() - 1] {
            let prefix = QkvPrefix::new(full.suffix.slice(0..r.end));
            let out = model.prefill(&t_tokens.tokens, Some(&prefix)).map_err(|e| e.to_string())?;
            let dec = model.decode(&out.state, 6, END_TOKEN, None).map_err(|e| e.to_string())?;
            ensure(
                same_bits(&out.state.final_hidden, &full.state.final_hidden) && dec.tokens == full_dec.tokens,
                || format!("case {case}: split at token {} differs", r.end),
            )?;
            splits += 1;
        }
    }
    ensure(divergent > 0, || "no case exercised a boundary-divergent discard".into())?;
    Ok(format!(
        "{prompts} prompts, {splits} boundary splits, {discards} discards ({divergent} with divergent boundary tokens)"
    ))
}

// 2 ---------------------------------------------------------------------------

fn answer_invariance() -> Check {
    let runs = [
        ("threshold_raise.conf", "threshold_raise.trace"),
        ("threshold_drop.conf", "threshold_drop.trace"),
        ("limit_relax.conf", "limit_relax.trace"),
        ("threshold_raise.conf", "sweep.trace"),
    ];
    let mut compared = 0;
    for (conf, trace) in runs {
        let cached = replay(&mut scenario_engine(conf, |_| {}), trace);
        let plain = replay(&mut scenario_engine(conf, |c| c.caching = false), trace);
        for (a, b) in cached.iter().zip(&plain) {
            if a.path.is_none() || a.path.as_deref() == Some("qa_hit") {
                continue;
            }
            ensure(a.answer == b.answer, || {
                format!("{trace} seq {}: {:?} vs cache-free {:?}", a.seq, a.answer, b.answer)
            })?;
            compared += 1;
        }
    }
    ensure(compared > 0, || "no answers compared".into())?;
    Ok(format!("{compared} model-served answers identical across 4 traces"))
}

// 3 ---------------------------------------------------------------------------

fn tree_insert(t: &mut CacheTree, path: &[ChunkId], now: u64) -> Vec<NodeId> {
    let mut out: Vec<NodeId> = Vec::new();
    for step in t.plan_insert(path).steps {
        let id = match step {
            Step::Existing { node, write } => {
                if write {
                    t.set_slice(node, format!("n{node}"), 1, (0, 1), vec![1], String::new());
                }
                node
            }
            Step::New { chunk } => {
                let id = t.add_child(*out.last().unwrap_or(&ROOT), chunk, now);
                t.set_slice(id, format!("n{id}"), 1, (0, 1), vec![1], String::new());
                id
            }
        };
        out.push(id);
    }
    out
}

fn random_path(rng: &mut ChaCha8Rng, alphabet: &[ChunkId]) -> Vec<ChunkId> {
    let mut p = alphabet.to_vec();
    p.shuffle(rng);
    p.truncate(rng.gen_range(1..=4));
    p
}

fn lcp(a: &[ChunkId], b: &[ChunkId]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

fn tree_laws() -> Check {
    let alphabet: Vec<ChunkId> = (0..4).map(|i| ChunkId::new(format!("c{i}"))).collect();
    let mut queries = 0;
    for case in 0..1500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let mut t = CacheTree::new(u64::MAX);
        let paths: Vec<Vec<ChunkId>> = (0..rng.gen_range(2..=6)).map(|_| random_path(&mut rng, &alphabet)).collect();
        for (i, p) in paths.iter().enumerate() {
            let ids = tree_insert(&mut t, p, i as u64);
            ensure(t.match_chain(p, |_, _, _| true) == ids, || format!("case {case}: inserted path not matchable"))?;
        }
        for _ in 0..5 {
            let q = random_path(&mut rng, &alphabet);
            let chain = t.match_chain(&q, |_, _, _| true);
            let brute = t.nodes().map(|n| lcp(&q, &t.path_of(n.id))).max().unwrap_or(0);
            ensure(chain.len() - 1 == brute, || {
                format!("case {case}: match depth {} vs brute force {brute}", chain.len() - 1)
            })?;
            ensure(chain[0] == ROOT && t.path_of(*chain.last().unwrap()) == q[..brute], || {
                format!("case {case}: matched chain spells the wrong path")
            })?;
            queries += 1;
        }

        let (p, q) = (&paths[0], &paths[1]);
        let mut fresh = CacheTree::new(u64::MAX);
        let ip = tree_insert(&mut fresh, p, 0);
        let iq = tree_insert(&mut fresh, q, 1);
        let shared = ip.iter().zip(&iq).skip(1).take_while(|(x, y)| x == y).count();
        let l = lcp(p, q);
        let expect = if l == q.len() { l } else { l.saturating_sub(1) };
        ensure(shared == expect, || {
            format!("case {case}: {p:?} then {q:?} share {shared} nodes, rule says {expect}")
        })?;
    }
    Ok(format!("1500 random trees, {queries} brute-force prefix queries, 1500 merge checks"))
}

// 4 ---------------------------------------------------------------------------

fn budget_error(e: &hiercache::Error) -> bool {
    matches!(e, hiercache::Error::ItemExceedsBudget { .. } | hiercache::Error::NothingEvictable { .. })
}

fn ledger_safety() -> Check {
    let tok = Tokenizer::new(TokenizerVocab::from_pieces(["ab", "bc", "ca"]));
    let embedder = HashEmbedder::new(16, 3);
    let cfg = ToyModelConfig {
        layers: 1,
        heads: 1,
        head_dim: 2,
        vocab_size: tok.vocab().len(),
        seed: 1,
    };
    let model = ToyTransformer::new(cfg).map_err(|e| e.to_string())?;
    let (mut evictions, mut qa_evictions, mut ops) = (0, 0, 0);
    for case in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let mut bank = KnowledgeBank::new(
            cfg.dims(),
            "sys",
            rng.gen_range(200..1500),
            BoundaryPolicy::default(),
            Box::new(MemoryStore::new()),
        );
        let pool: Vec<ChunkId> = (0..5)
            .map(|i| bank.chunks.insert(&format!("chunk {i} {}", "abc".repeat(i + 1)), &tok, &embedder).0)
            .collect();
        let mut qa = QaBank::new(rng.gen_range(1..=6) * 100, 100);
        let mut seen: Vec<Vec<ChunkId>> = Vec::new();
        for step in 0..12u64 {
            let now = step + 1;
            let before: BTreeMap<NodeId, u64> = bank
                .tree()
                .nodes()
                .filter(|n| n.is_present())
                .map(|n| (n.id, n.retrieval_count))
                .collect();
            let mut pinned = BTreeSet::new();
            match rng.gen_range(0..5) {
                0 | 1 => {
                    let path = if !seen.is_empty() && rng.gen_bool(0.3) {
                        seen.choose(&mut rng).unwrap().clone()
                    } else {
                        random_path(&mut rng, &pool)
                    };
                    let chunks: Vec<_> = path.iter().map(|id| bank.chunks.get(id).unwrap()).collect();
                    let layout = PromptLayout::assemble("sys", &chunks, "q?");
                    let tokens = tok.tokenize(&layout.text);
                    for s in bank.tree().plan_insert(&path).steps {
                        if let Step::Existing { node, .. } = s {
                            pinned.insert(node);
                        }
                    }
                    let out = model.prefill(&tokens.tokens, None).map_err(|e| e.to_string())?;
                    match bank.slice_and_insert(&layout, &tokens, &out.suffix, now) {
                        Ok(_) => seen.push(path),
                        Err(e) if budget_error(&e) => {
                            let after: BTreeSet<NodeId> =
                                bank.tree().nodes().filter(|n| n.is_present()).map(|n| n.id).collect();
                            ensure(after == before.keys().copied().collect(), || {
                                format!("case {case}: failed insert changed the bank")
                            })?;
                        }
                        Err(e) => return Err(e.to_string()),
                    }
                }
                2 => {
                    if let Some(path) = seen.choose(&mut rng).cloned() {
                        let chunks: Vec<_> = path.iter().map(|id| bank.chunks.get(id).unwrap()).collect();
                        let layout = PromptLayout::assemble("sys", &chunks, "q?");
                        let tokens = tok.tokenize(&layout.text);
                        bank.match_prompt(&layout, &tokens, now, true).map_err(|e| e.to_string())?;
                    }
                }
                3 => {
                    let limit = rng.gen_range(100..1500);
                    bank.set_limit(limit).map_err(|e| e.to_string())?;
                }
                _ => {
                    let q = format!("question {}", rng.gen_range(0..10));
                    let prior: BTreeMap<u64, u64> = qa.entries().map(|e| (e.id, e.use_count)).collect();
                    if rng.gen_bool(0.5) && !prior.is_empty() {
                        let probe = qa.entries().nth(rng.gen_range(0..prior.len())).unwrap().query.clone();
                        qa.match_query(&embedder.embed(&probe), 0.0, now).map_err(|e| e.to_string())?;
                    } else {
                        qa.insert(&q, embedder.embed(&q), Some("a".into()), now).map_err(|e| e.to_string())?;
                        let after: BTreeSet<u64> = qa.entries().map(|e| e.id).collect();
                        let victims: Vec<u64> = prior.keys().filter(|id| !after.contains(id)).copied().collect();
                        for v in &victims {
                            let floor = prior
                                .iter()
                                .filter(|(id, _)| after.contains(id))
                                .map(|(_, c)| *c)
                                .min()
                                .unwrap_or(u64::MAX);
                            ensure(prior[v] <= floor, || format!("case {case}: QA victim {v} is not least used"))?;
                        }
                        qa_evictions += victims.len();
                    }
                    ensure(qa.used_bytes() <= qa.limit_bytes(), || format!("case {case}: QA bank over budget"))?;
                }
            }
            ops += 1;

            let ledger = bank.ledger();
            ensure(ledger.used_bytes <= ledger.limit_bytes, || format!("case {case}: slices over budget"))?;
            let shadow: u64 = bank
                .tree()
                .nodes()
                .filter(|n| n.is_present())
                .map(|n| bank.slice_bytes(n.id).map_or(u64::MAX / 4, |b| b.len() as u64))
                .sum();
            ensure(shadow == ledger.used_bytes, || {
                format!("case {case}: shadow ledger {shadow} vs {}", ledger.used_bytes)
            })?;
            let after: BTreeSet<NodeId> = bank.tree().nodes().filter(|n| n.is_present()).map(|n| n.id).collect();
            let victims: Vec<NodeId> = before.keys().filter(|id| !after.contains(id)).copied().collect();
            let floor = before
                .iter()
                .filter(|(id, _)| after.contains(id) && !pinned.contains(id))
                .map(|(_, c)| *c)
                .min()
                .unwrap_or(u64::MAX);
            for v in &victims {
                ensure(!pinned.contains(v), || format!("case {case}: evicted a node the insert reuses"))?;
                ensure(before[v] <= floor, || {
                    format!("case {case}: victim {v} has count {} above survivor minimum {floor}", before[v])
                })?;
            }
            evictions += victims.len();
        }
    }
    ensure(evictions > 0 && qa_evictions > 0, || "no evictions exercised".into())?;
    Ok(format!(
        "1000 sequences, {ops} operations, {evictions} slice and {qa_evictions} QA evictions checked"
    ))
}

// 5 ---------------------------------------------------------------------------

fn switch_seq(recs: &[EventRecord], field: &str) -> u64 {
    recs.iter()
        .find(|r| r.field.as_deref() == Some(field))
        .map(|r| r.seq)
        .expect("trace changes the field")
}

fn scheduler_raise() -> Check {
    let mut with = scenario_engine("threshold_raise.conf", |_| {});
    let mut without = scenario_engine("threshold_raise.conf", |c| c.scheduler = false);
    let rw = replay(&mut with, "threshold_raise.trace");
    let rn = replay(&mut without, "threshold_raise.trace");
    let switch = switch_seq(&rn, "tau_query");
    let (fw, fn_) = (total_flops(&rw), total_flops(&rn));
    let skipped: f64 = rn
        .iter()
        .filter(|r| r.seq > switch)
        .filter_map(|r| r.tick.as_ref())
        .flat_map(|t| t.items_of(TickAction::Populate))
        .map(|i| i.cost.decode_flops)
        .sum();
    ensure(skipped > 0.0, || "no predicted query was populated after the switch".into())?;
    let after_switch_decodes: f64 = rw
        .iter()
        .filter(|r| r.seq > switch)
        .filter_map(|r| r.tick.as_ref())
        .flat_map(|t| t.items_of(TickAction::Populate))
        .map(|i| i.cost.decode_flops)
        .sum();
    ensure(after_switch_decodes == 0.0, || "prefill-only population decoded".into())?;
    ensure(fw < fn_, || format!("with scheduler {fw:e} not below {fn_:e}"))?;
    let rel = ((fn_ - fw) - skipped).abs() / skipped;
    ensure(rel <= 1e-6, || format!("saving {:e} vs skipped decode {skipped:e} (rel {rel:e})", fn_ - fw))?;
    Ok(format!(
        "{fw:.6e} < {fn_:.6e} FLOPs; saving equals skipped decode {skipped:.6e} (rel err {rel:.1e})"
    ))
}

fn scheduler_drop() -> Check {
    let mut with = scenario_engine("threshold_drop.conf", |_| {});
    let mut always = scenario_engine("threshold_drop.conf", |c| c.scheduler = false);
    let rw = replay(&mut with, "threshold_drop.trace");
    replay(&mut always, "threshold_drop.trace");
    let converted = rw
        .iter()
        .filter_map(|r| r.tick.as_ref())
        .map(|t| t.items_of(TickAction::QkvToQa).count())
        .sum::<usize>();
    ensure(converted > 0, || "no answer-less entry was converted".into())?;
    ensure(with.qa().answerless().is_empty(), || "answer-less entries remain".into())?;
    let (a, b) = (with.qa().contents(), always.qa().contents());
    ensure(a == b, || {
        format!(
            "QA contents differ: {:?} vs {:?}",
            a.symmetric_difference(&b).collect::<Vec<_>>(),
            b.len()
        )
    })?;
    Ok(format!("{} QA entries equal the always-decode run after {converted} conversions", a.len()))
}

fn scheduler_relax() -> Check {
    let mut with = scenario_engine("limit_relax.conf", |_| {});
    let mut without = scenario_engine("limit_relax.conf", |c| c.scheduler = false);
    let rw = replay(&mut with, "limit_relax.trace");
    let rn = replay(&mut without, "limit_relax.trace");
    let relax = switch_seq(&rw, "qkv_limit_bytes");
    for r in rw.iter().chain(&rn) {
        ensure(r.qkv_used_bytes <= r.qkv_limit_bytes, || format!("seq {} over the slice budget", r.seq))?;
    }
    let restored: usize = rw
        .iter()
        .filter_map(|r| r.tick.as_ref())
        .flat_map(|t| t.items_of(TickAction::QaToQkv))
        .map(|i| i.nodes.len())
        .sum();
    let gains: Vec<(usize, usize)> = rw
        .iter()
        .zip(&rn)
        .filter(|(a, _)| a.seq > relax && a.path.is_some())
        .map(|(a, b)| (a.matched_count.unwrap_or(0), b.matched_count.unwrap_or(0)))
        .collect();
    ensure(gains.iter().any(|(a, b)| a > b), || format!("no later query matched deeper: {gains:?}"))?;
    Ok(format!("{restored} slices restored; later matched_count (with, without) = {gains:?}"))
}

// 6 ---------------------------------------------------------------------------

fn threshold_sweep() -> Check {
    let taus = [0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];
    let mut hits = Vec::new();
    for tau in taus {
        let mut e = scenario_engine("threshold_raise.conf", |c| c.tau_query = tau);
        replay(&mut e, "sweep.trace");
        hits.push(e.counters().qa_hits);
    }
    ensure(hits.windows(2).all(|w| w[1] <= w[0]), || format!("hits not non-increasing: {hits:?}"))?;
    ensure(hits.first() > hits.last(), || format!("sweep is flat: {hits:?}"))?;
    Ok(format!("QA hits over tau 0.60..0.95: {hits:?}"))
}

// 7 ---------------------------------------------------------------------------

fn cost_fidelity() -> Check {
    let cost = CostModel::default();
    let mut worst: f64 = 0.0;
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + case);
        let cfg = ToyModelConfig {
            layers: rng.gen_range(1..=4),
            heads: rng.gen_range(1..=4),
            head_dim: *[2usize, 4, 8, 16].choose(&mut rng).unwrap(),
            vocab_size: rng.gen_range(2..400),
            seed: case,
        };
        let dims = cfg.dims();
        let model = ToyTransformer::new(cfg).map_err(|e| e.to_string())?;
        let total = rng.gen_range(1..=128usize);
        let pre = rng.gen_range(0..=total);
        let tokens: Vec<u32> = (0..total).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
        let full = model.prefill(&tokens, None).map_err(|e| e.to_string())?;
        let prefix = QkvPrefix::new(full.suffix.slice(0..pre));
        let out = model.prefill(&tokens, Some(&prefix)).map_err(|e| e.to_string())?;
        let est = cost.estimate(
            &dims,
            &InferenceDescriptor {
                l_total: total,
                l_pre: pre,
                decode_tokens: 0,
                question_match: false,
                retrieval: false,
            },
        );
        let counted = 2.0 * out.macs as f64;
        let rel = (est.prefill_flops - counted).abs() / counted;
        worst = worst.max(rel);
        ensure(rel <= 0.01, || format!("case {case}: estimate {} vs counted {counted}", est.prefill_flops))?;

        let dec = model.decode(&out.state, 5, u32::MAX, None).map_err(|e| e.to_string())?;
        ensure(dec.macs == decode_macs(&dims, total, dec.tokens.len()), || format!("case {case}: decode count"))?;

        let base = projection_macs(&dims, total, 0) as u128;
        let saved = base - projection_macs(&dims, total, pre) as u128;
        ensure(saved * total as u128 == base * pre as u128, || {
            format!("case {case}: projection saving {saved}/{base} is not {pre}/{total}")
        })?;
    }
    Ok(format!("100 (L_total, L_pre) pairs, worst relative error {worst:.1e}; projection saving exact"))
}

// 8 ---------------------------------------------------------------------------

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

const WORDS: &[&str] = &[
    "budget", "offsite", "dentist", "launch", "flight", "churn", "landlord", "hiring", "book", "car", "doctor", "review",
    "monday", "friday", "lake", "water", "tires", "vitamin", "payment", "island",
];

fn sentence(rng: &mut ChaCha8Rng) -> String {
    (0..rng.gen_range(3..8)).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn refresh_correctness() -> Check {
    let tok = Tokenizer::new(TokenizerVocab::from_pieces(Vec::<&str>::new()));
    let embedder = HashEmbedder::default();
    let mut marked = 0;
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + case);
        let mut store = hiercache::bank::ChunkStore::new();
        for _ in 0..rng.gen_range(5..15) {
            store.insert(&sentence(&mut rng), &tok, &embedder);
        }
        let mut qa = QaBank::new(u64::MAX, 1);
        for _ in 0..rng.gen_range(3..9) {
            let q = sentence(&mut rng);
            let answer = rng.gen_bool(0.8).then(|| "a".to_string());
            qa.insert(&q, embedder.embed(&q), answer, 0).map_err(|e| e.to_string())?;
        }
        let mut fresh = BTreeSet::new();
        for _ in 0..rng.gen_range(1..4) {
            let (id, new) = store.insert(&sentence(&mut rng), &tok, &embedder);
            if new {
                fresh.insert(id);
            }
        }
        let k = rng.gen_range(1..5);
        let got: BTreeSet<u64> = qa.refresh(&fresh, &store, k).map_err(|e| e.to_string())?.into_iter().collect();

        let mut expect = BTreeSet::new();
        for e in qa.entries().filter(|e| e.answer.is_some()) {
            let mut ranked: Vec<(f64, &ChunkId)> = store
                .iter()
                .map(|c| (oracle_cos(e.embedding.values(), c.embedding.values()), &c.chunk_id))
                .collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
            if ranked.iter().take(k).any(|(_, id)| fresh.contains(*id)) {
                expect.insert(e.id);
            }
        }
        ensure(got == expect, || format!("case {case}: refresh {got:?} vs oracle {expect:?}"))?;
        marked += got.len();
    }
    Ok(format!("100 corpora agree with the brute-force ranking, {marked} entries marked stale"))
}

// 9 ---------------------------------------------------------------------------

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn persistence() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    let mut e = scenario_engine("threshold_raise.conf", |_| {});
    replay(&mut e, "threshold_raise.trace");
    e.save(&a).map_err(|e| e.to_string())?;
    let cfg = e.config().clone();
    let reopened = Engine::open(cfg.clone(), &a).map_err(|e| e.to_string())?;
    reopened.save(&b).map_err(|e| e.to_string())?;
    let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
    ensure(fa.contains_key(MANIFEST_FILE) && fa.contains_key(QA_FILE), || "bank files missing".into())?;
    ensure(fa == fb, || "save/load/save is not byte-stable".into())?;
    let slices = fa.keys().filter(|k| k.starts_with(SLICES_DIR)).count();

    std::fs::create_dir_all(c.join(SLICES_DIR)).map_err(|e| e.to_string())?;
    for (name, bytes) in &fa {
        std::fs::write(c.join(name), bytes).map_err(|e| e.to_string())?;
    }
    let victim = fa.keys().find(|k| k.starts_with(SLICES_DIR)).unwrap().clone();
    let mut bad = fa[&victim].clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0xFF;
    bad.truncate(bad.len() - 3);
    std::fs::write(c.join(&victim), bad).map_err(|e| e.to_string())?;
    let mut degraded = Engine::open(cfg, &c).map_err(|e| e.to_string())?;
    ensure(degraded.degraded().len() == 1, || format!("degraded nodes {:?}", degraded.degraded()))?;
    let id = degraded.degraded()[0];
    ensure(!degraded.bank().tree().node(id).unwrap().is_present(), || "corrupt node still present".into())?;
    degraded
        .handle_query("When is the dentist appointment?", 10_000)
        .map_err(|e| e.to_string())?;
    Ok(format!("{} files ({slices} slices) byte-stable; corrupt slice loaded as evicted", fa.len()))
}

fn main() {
    let criteria: Vec<(&str, &str, u64, fn() -> Check)> = vec![
        ("1", "cached-prefill equivalence", 60, cached_prefill_equivalence),
        ("2", "answer invariance", 60, answer_invariance),
        ("3", "tree laws", 30, tree_laws),
        ("4", "ledger safety and LFU minimality", 30, ledger_safety),
        ("5a", "scheduler: threshold raised", 30, scheduler_raise),
        ("5b", "scheduler: threshold dropped", 30, scheduler_drop),
        ("5c", "scheduler: limit relaxed", 30, scheduler_relax),
        ("6", "threshold monotonicity", 60, threshold_sweep),
        ("7", "cost-model fidelity", 30, cost_fidelity),
        ("8", "refresh correctness", 30, refresh_correctness),
        ("9", "persistence round-trip", 10, persistence),
    ];
    let mut failed = 0;
    for (id, name, limit, f) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let result = match result {
            Ok(d) if took > Duration::from_secs(limit) => Err(format!("{d}; took {took:.1?}, limit {limit}s")),
            r => r,
        };
        match result {
            Ok(detail) => println!("PASS [{id}] {name}: {detail} ({took:.2?})"),
            Err(why) => {
                failed += 1;
                println!("FAIL [{id}] {name}: {why} ({took:.2?})");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
