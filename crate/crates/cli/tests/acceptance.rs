//! Acceptance suite. Each test prints one `PASS`/`FAIL` line straight to
//! stderr (bypassing the test harness capture) and then asserts.
//!
//! Tests take a shared lock so wall-clock budgets are measured without
//! competing test threads.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::Value;
use tagmae::config::RunConfig;
use tagmae::embed::{embed_all_nodes, EmbeddingSource};
use tagmae::eval::{
    fewshot_report, linear_probe, sample_fewshot_tasks, Example, LabeledSplits, ProbeConfig, DEFAULT_NUM_TASKS,
    DEFAULT_SHOTS,
};
use tagmae::graph_store::{generate_synthetic_tag, synthetic_vocabulary, EdgeInput, TextAttributedGraph};
use tagmae::lm::Mode;
use tagmae::ppr::{forward_push, PprParams};
use tagmae::pretrain::{self, build_loss, gradient_check, latent_loss, micro_fixture, mlm_loss, LatentSource, TargetMode};
use tagmae::seeding::derive_rng;
use tagmae::tensor::Matrix;
use tagmae::text::{mask_tokens, MaskedSequence, TokenSequence, CLS, SEP};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, ok: bool, detail: &str) {
    let line = format!("{} criterion {id} ({name}): {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

// ---------------------------------------------------------------------------
// 1. gradient correctness

#[test]
fn criterion_1_gradient_correctness() {
    let _g = serial();
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut target_grad: f64 = 0.0;
    let mut details = Vec::new();
    for source in [LatentSource::LmCls, LatentSource::GnnCls] {
        let (state, batch, cfg) = micro_fixture(0, 0.1, source).unwrap();
        assert_eq!(state.config.d(), 8);
        assert_eq!(state.vocab.len(), 16);
        let r = gradient_check(&state, &batch, cfg.lambda, source, 1e-4).unwrap();
        worst = worst.max(r.max_rel_error);
        target_grad = target_grad.max(r.target_grad_max);
        details.push(format!("{source:?} {:.2e} ({})", r.max_rel_error, r.worst_group));
    }
    let elapsed = t0.elapsed();
    let ok = worst <= 1e-4 && target_grad == 0.0 && elapsed < Duration::from_secs(60);
    report(
        1,
        "gradient correctness",
        ok,
        &format!(
            "max rel error {}; target grad max {target_grad}; {:.1}s",
            details.join(", "),
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 2. PPR oracle equivalence

/// Connected graphs as adjacency bitmasks, one representative per
/// isomorphism class, built by attaching a new vertex to every smaller class.
fn connected_graphs(max_n: usize) -> Vec<Vec<Vec<u8>>> {
    let mut levels: Vec<Vec<Vec<u8>>> = vec![vec![vec![0u8]]];
    for n in 2..=max_n {
        let mut seen: HashMap<u64, Vec<u8>> = HashMap::new();
        for g in &levels[n - 2] {
            for mask in 1u16..(1 << (n - 1)) {
                let mut adj = g.clone();
                adj.push(mask as u8);
                for (w, row) in adj.iter_mut().enumerate().take(n - 1) {
                    if mask >> w & 1 == 1 {
                        *row |= 1 << (n - 1);
                    }
                }
                seen.entry(canonical_code(&adj)).or_insert(adj);
            }
        }
        let mut reps: Vec<(u64, Vec<u8>)> = seen.into_iter().collect();
        reps.sort_by_key(|(c, _)| *c);
        levels.push(reps.into_iter().map(|(_, a)| a).collect());
    }
    levels
}

/// Minimum upper-triangle code over all labelings that respect a stable
/// colour refinement, which is an isomorphism invariant.
fn canonical_code(adj: &[u8]) -> u64 {
    let n = adj.len();
    let nbrs = |v: usize| (0..n).filter(move |&w| adj[v] >> w & 1 == 1);
    let mut color: Vec<usize> = (0..n).map(|v| adj[v].count_ones() as usize).collect();
    let mut classes = 0;
    loop {
        let sigs: Vec<(usize, Vec<usize>)> = (0..n)
            .map(|v| {
                let mut c: Vec<usize> = nbrs(v).map(|w| color[w]).collect();
                c.sort_unstable();
                (color[v], c)
            })
            .collect();
        let mut uniq = sigs.clone();
        uniq.sort();
        uniq.dedup();
        color = sigs.iter().map(|s| uniq.binary_search(s).unwrap()).collect();
        if uniq.len() == classes {
            break;
        }
        classes = uniq.len();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&v| (color[v], v));
    let slot_color: Vec<usize> = order.iter().map(|&v| color[v]).collect();
    let mut best = u64::MAX;
    let mut perm = Vec::with_capacity(n);
    let mut used = vec![false; n];
    fn rec(
        adj: &[u8],
        color: &[usize],
        slot_color: &[usize],
        perm: &mut Vec<usize>,
        used: &mut [bool],
        best: &mut u64,
    ) {
        let n = adj.len();
        let p = perm.len();
        if p == n {
            let mut code = 0u64;
            for j in 1..n {
                for i in 0..j {
                    if adj[perm[i]] >> perm[j] & 1 == 1 {
                        code |= 1 << (j * (j - 1) / 2 + i);
                    }
                }
            }
            *best = (*best).min(code);
            return;
        }
        for v in 0..n {
            if !used[v] && color[v] == slot_color[p] {
                used[v] = true;
                perm.push(v);
                rec(adj, color, slot_color, perm, used, best);
                perm.pop();
                used[v] = false;
            }
        }
    }
    rec(adj, &color, &slot_color, &mut perm, &mut used, &mut best);
    best
}

fn graph_from_pairs(n: usize, pairs: &[(usize, usize)]) -> TextAttributedGraph {
    TextAttributedGraph::from_edges(
        vec![String::new(); n],
        pairs.iter().map(|&(src, dst)| EdgeInput { src, dst, text: None }).collect(),
        None,
        None,
    )
    .unwrap()
}

/// Dense power iteration; a dangling walker restarts at the anchor.
fn power_iteration(g: &TextAttributedGraph, s: usize, alpha: f64) -> Vec<f64> {
    let n = g.num_nodes();
    let mut pi = vec![0.0; n];
    pi[s] = 1.0;
    for _ in 0..100_000 {
        let mut next = vec![0.0; n];
        next[s] += alpha;
        for u in 0..n {
            let d = g.degree(u);
            if d == 0 {
                next[s] += (1.0 - alpha) * pi[u];
                continue;
            }
            for &w in g.neighbors_unchecked(u) {
                next[w] += (1.0 - alpha) * pi[u] / d as f64;
            }
        }
        let delta = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        pi = next;
        if delta < 1e-15 {
            break;
        }
    }
    pi
}

fn push_error(g: &TextAttributedGraph, anchor: usize, params: &PprParams) -> f64 {
    let push = forward_push(g, anchor, params).unwrap();
    let oracle = power_iteration(g, anchor, params.alpha);
    oracle
        .iter()
        .enumerate()
        .map(|(v, o)| (push.scores.get(v) - o).abs())
        .fold(0.0, f64::max)
}

#[test]
fn criterion_2_ppr_oracle_equivalence() {
    let _g = serial();
    let t0 = Instant::now();
    let params = PprParams {
        alpha: 0.15,
        epsilon: 1e-10,
        topk: 128,
    };
    let levels = connected_graphs(8);
    let counts: Vec<usize> = levels.iter().map(Vec::len).collect();
    let counts_ok = counts == [1, 1, 2, 6, 21, 112, 853, 11117];
    let mut worst_small: f64 = 0.0;
    let mut small_cases = 0;
    for level in &levels {
        for adj in level {
            let n = adj.len();
            let pairs: Vec<(usize, usize)> = (0..n)
                .flat_map(|u| (u + 1..n).filter(move |&v| adj[u] >> v & 1 == 1).map(move |v| (u, v)))
                .collect();
            let g = graph_from_pairs(n, &pairs);
            for anchor in 0..n {
                worst_small = worst_small.max(push_error(&g, anchor, &params));
                small_cases += 1;
            }
        }
    }

    let mut rng = derive_rng(2024, 0, 0);
    let mut worst_large: f64 = 0.0;
    for _ in 0..100 {
        let n = 1000;
        let mut pairs: Vec<(usize, usize)> = (1..n).map(|v| (rng.gen_range(0..v), v)).collect();
        let extra = rng.gen_range(500..4000);
        pairs.extend((0..extra).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))));
        let g = graph_from_pairs(n, &pairs);
        let anchor = rng.gen_range(0..n);
        worst_large = worst_large.max(push_error(&g, anchor, &params));
    }
    let elapsed = t0.elapsed();
    let ok = counts_ok && worst_small <= 1e-6 && worst_large <= 1e-6 && elapsed < Duration::from_secs(120);
    report(
        2,
        "PPR oracle equivalence",
        ok,
        &format!(
            "class counts {counts:?}; {small_cases} anchored small graphs max L-inf {worst_small:.2e}; \
             100 random 1000-node graphs max L-inf {worst_large:.2e}; {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 3. loss identities

#[test]
fn criterion_3_loss_identities() {
    let _g = serial();
    let mut ok = true;
    let mut notes = Vec::new();

    let mut rng = derive_rng(3, 0, 0);
    for vocab in [16usize, 512, 30522] {
        let orig = TokenSequence {
            ids: std::iter::once(CLS)
                .chain((0..10).map(|_| rng.gen_range(5..vocab)))
                .chain(std::iter::once(SEP))
                .collect(),
        };
        let masked = mask_tokens(&orig, 0.75, &mut rng);
        let masked = if masked.masked_count() == 0 {
            let mut m = MaskedSequence::unmasked(&orig);
            m.mask_flags[1] = true;
            m
        } else {
            masked
        };
        let logits = Matrix::filled(orig.ids.len(), vocab, 0.37);
        let l = mlm_loss(&[logits], &[masked], &[orig]).unwrap();
        let err = (l - (vocab as f64).ln()).abs();
        ok &= err <= 1e-9;
        notes.push(format!("uniform V={vocab} err {err:.1e}"));
    }

    let a = Matrix::from_rows(&[vec![1.0, 2.0, -0.5], vec![0.3, 0.0, 4.0]]);
    let orth = Matrix::from_rows(&[vec![2.0, -1.0, 0.0], vec![0.0, 7.0, 0.0]]);
    let cases = [
        ("identical", a.scale(3.5), 0.0),
        ("orthogonal", orth, 1.0),
        ("opposite", a.scale(-0.25), 2.0),
    ];
    for (name, b, expected) in cases {
        let l = latent_loss(&a, &b).unwrap().value;
        let err = (l - expected).abs();
        ok &= err <= 1e-9;
        notes.push(format!("{name} err {err:.1e}"));
    }

    let mut fused_err: f64 = 0.0;
    for lambda in [0.0, 0.1, 1.0] {
        let (state, batch, _) = micro_fixture(3, lambda, LatentSource::LmCls).unwrap();
        let lg = build_loss(
            &state,
            &batch,
            lambda,
            LatentSource::LmCls,
            &mut Mode::Eval,
            TargetMode::OnTape { trainable: false },
        )
        .unwrap();
        let (m, l, t) = (lg.scalar(lg.loss_mask), lg.scalar(lg.loss_latent), lg.scalar(lg.total));
        fused_err = fused_err.max((t - (m + lambda * l)).abs());
    }
    ok &= fused_err <= 1e-6;
    notes.push(format!("fused max err {fused_err:.1e}"));
    report(3, "loss identities", ok, &notes.join("; "));
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 4. masking statistics

#[test]
fn criterion_4_masking_statistics() {
    let _g = serial();
    let p = 0.75;
    let mut rng = derive_rng(4, 0, 0);
    let mut content = 0usize;
    let mut masked = 0usize;
    while content < 12_000 {
        let len = rng.gen_range(1..60);
        let seq = TokenSequence {
            ids: std::iter::once(CLS)
                .chain((0..len).map(|_| rng.gen_range(5..200)))
                .chain(std::iter::once(SEP))
                .collect(),
        };
        let m = mask_tokens(&seq, p, &mut rng);
        content += seq.content_len();
        masked += m.masked_count();
    }
    let n = content as f64;
    let sigma = (n * p * (1.0 - p)).sqrt();
    let z = (masked as f64 - n * p) / sigma;

    let seq = TokenSequence {
        ids: vec![CLS, 7, 8, 9, 10, 11, SEP],
    };
    let mut special_masked = 0;
    for trial in 0..1000 {
        let mut r = derive_rng(trial, 4, 1);
        let m = mask_tokens(&seq, 0.999, &mut r);
        let last = m.ids.len() - 1;
        if m.mask_flags[0] || m.mask_flags[last] || m.ids[0] != CLS || m.ids[last] != SEP {
            special_masked += 1;
        }
    }
    let ok = content >= 10_000 && z.abs() <= 3.0 && special_masked == 0;
    report(
        4,
        "masking statistics",
        ok,
        &format!(
            "{masked}/{content} masked (rate {:.4}, z = {z:.2}); special tokens masked in {special_masked}/1000 trials",
            masked as f64 / n
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 5. EMA contract

#[test]
fn criterion_5_ema_contract() {
    let _g = serial();
    let (mut base, _, _) = micro_fixture(5, 0.1, LatentSource::LmCls).unwrap();
    // Move the online GNN away from the target so each rule is observable.
    let mut rng = derive_rng(5, 0, 0);
    let names: Vec<String> = base.target_gnn.names().cloned().collect();
    for name in &names {
        for x in base.online.get_mut(name).unwrap().data_mut() {
            *x += rng.gen_range(-1.0..1.0);
        }
    }
    let check = |tau: f64| -> bool {
        let mut s = base.clone();
        s.ema_update(tau);
        names.iter().all(|n| {
            let t0 = base.target_gnn.expect(n).data();
            let x = base.online.expect(n).data();
            let t1 = s.target_gnn.expect(n).data();
            t0.iter().zip(x).zip(t1).all(|((&t, &x), &u)| rule(tau, t, x, u))
        })
    };
    fn rule(tau: f64, t: f64, x: f64, u: f64) -> bool {
        if tau == 0.0 {
            u.to_bits() == x.to_bits()
        } else if tau == 1.0 {
            u.to_bits() == t.to_bits()
        } else if tau == 0.5 {
            u.to_bits() == ((t + x) / 2.0).to_bits()
        } else {
            (u - (t + 0.004 * (x - t))).abs() <= 1e-15 * t.abs().max(x.abs()).max(1.0)
        }
    }
    let results: BTreeMap<String, bool> = [0.0, 0.5, 0.996, 1.0]
        .iter()
        .map(|&tau| (format!("{tau}"), check(tau)))
        .collect();
    // The LM half of the target is the online LM itself, so nothing to copy.
    let lm_excluded = base.target_gnn.names().all(|n| n.starts_with("gnn."));
    let ok = results.values().all(|&b| b) && lm_excluded;
    report(
        5,
        "EMA contract",
        ok,
        &format!("copy/midpoint/0.004-step/no-op per tau {results:?}; target holds GNN only: {lm_excluded}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 6. end-to-end learning signal

#[test]
fn criterion_6_end_to_end_learning_signal() {
    let _g = serial();
    let t0 = Instant::now();
    let words = synthetic_vocabulary(48);
    let g = generate_synthetic_tag(3, 50, 0.2, 0.01, &words, 7);
    assert_eq!(g.num_nodes(), 150);
    let mut cfg = RunConfig::desk();
    cfg.seed = 7;
    cfg.steps = Some(200);
    let (state, log) = pretrain::pretrain(&g, cfg.model(), &cfg.pretrain(), None).unwrap();
    assert_eq!(log.len(), 200);
    let mean = |r: &[pretrain::StepReport]| r.iter().map(|s| s.loss_mask).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&log[..20]), mean(&log[180..]));

    let emb = embed_all_nodes(&state, &g, &cfg.ppr(), EmbeddingSource::Gnn).unwrap();
    let splits = g.splits().unwrap();
    let examples = |ids: &[usize]| -> Vec<Example> {
        ids.iter()
            .map(|&v| Example {
                embedding: emb.row_of(v).unwrap().to_vec(),
                label: g.label(v).unwrap().to_string(),
            })
            .collect()
    };
    let data = LabeledSplits {
        train: examples(&splits.train),
        valid: examples(&splits.valid),
        test: examples(&splits.test),
    };
    let tasks = sample_fewshot_tasks(&data, 3, 3, 100, cfg.max_queries, cfg.seed).unwrap();
    let fs = fewshot_report(&tasks).unwrap();
    let elapsed = t0.elapsed();
    let ok = last < first && fs.mean >= 0.70 && elapsed < Duration::from_secs(600);
    report(
        6,
        "end-to-end learning signal",
        ok,
        &format!(
            "mask loss first-20 {first:.4} -> final-20 {last:.4}; 3-way 3-shot over 100 tasks {:.4} (chance 0.333); {:.1}s",
            fs.mean,
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 7. linear probe sanity

fn blobs(n: usize, dim: usize, seed: u64) -> Vec<Example> {
    let mut rng = derive_rng(seed, 7, 0);
    (0..n)
        .map(|i| {
            let class = i % 2;
            let centre = if class == 0 { -2.0 } else { 2.0 };
            Example {
                embedding: (0..dim).map(|_| centre + rng.gen_range(-1.0..1.0)).collect(),
                label: format!("c{class}"),
            }
        })
        .collect()
}

#[test]
fn criterion_7_linear_probe_sanity() {
    let _g = serial();
    let cfg = ProbeConfig::default();
    let defaults_ok = cfg.lr == 0.01 && cfg.epochs == 5000;
    let separable = LabeledSplits {
        train: blobs(200, 8, 1),
        valid: blobs(100, 8, 2),
        test: blobs(200, 8, 3),
    };
    let sep = linear_probe(&separable, &cfg).unwrap();

    let mut shuffled = LabeledSplits {
        train: blobs(1000, 8, 4),
        valid: blobs(500, 8, 5),
        test: blobs(2000, 8, 6),
    };
    let mut rng = derive_rng(7, 7, 1);
    for split in [&mut shuffled.train, &mut shuffled.valid, &mut shuffled.test] {
        let mut labels: Vec<String> = split.iter().map(|e| e.label.clone()).collect();
        labels.shuffle(&mut rng);
        for (e, l) in split.iter_mut().zip(labels) {
            e.label = l;
        }
    }
    let shuf = linear_probe(&shuffled, &cfg).unwrap();
    let ok = defaults_ok && sep.test_accuracy == 1.0 && (0.4..=0.6).contains(&shuf.test_accuracy);
    report(
        7,
        "linear probe sanity",
        ok,
        &format!(
            "separable {:.4} (stopped at epoch {}); shuffled {:.4}",
            sep.test_accuracy, sep.epochs_run, shuf.test_accuracy
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 8. protocol fidelity

fn run_cli(args: &[&str]) -> i32 {
    let mut full = vec!["tagmae"];
    full.extend_from_slice(args);
    tagmae_cli::run(full)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn criterion_8_protocol_fidelity() {
    let _g = serial();
    let mut notes = Vec::new();
    let mut ok = DEFAULT_NUM_TASKS == 500 && DEFAULT_SHOTS == 3;
    let paper = RunConfig::paper();
    ok &= paper.num_tasks == 500 && paper.shots == 3 && RunConfig::desk().num_tasks == 500;

    // Tag every example with its split so task membership is checkable.
    let tag = |split: f64, n: usize| -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                embedding: vec![split, i as f64],
                label: format!("c{}", i % 4),
            })
            .collect()
    };
    let data = LabeledSplits {
        train: tag(0.0, 40),
        valid: tag(1.0, 40),
        test: tag(2.0, 40),
    };
    let tasks = sample_fewshot_tasks(&data, 3, DEFAULT_SHOTS, DEFAULT_NUM_TASKS, 50, 8).unwrap();
    let splits_ok = tasks.len() == 500
        && tasks.iter().all(|t| {
            t.support.len() == 3 * DEFAULT_SHOTS
                && t.support.iter().all(|e| e.embedding[0] == 0.0)
                && !t.query.is_empty()
                && t.query.iter().all(|e| e.embedding[0] == 2.0)
        });
    ok &= splits_ok;
    notes.push(format!("500 tasks, 3-shot, support from train and queries from test: {splits_ok}"));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("synth");
    let code = run_cli(&["--profile", "paper", "gen-synth", "--out", out.to_str().unwrap()]);
    let manifest = read_json(&out.join("manifest.json"));
    let golden: Value = serde_json::from_str(include_str!("golden/paper_manifest.json")).unwrap();
    let golden_ok = code == 0 && manifest == golden;
    ok &= golden_ok;
    let c = &manifest["config"];
    let echoed = [
        ("mask_rate", 0.75),
        ("lr", 2e-5),
        ("weight_decay", 0.001),
        ("dropout", 0.2),
        ("gnn_layers", 3.0),
        ("topk", 128.0),
        ("ema_decay", 0.996),
        ("lambda", 0.1),
    ];
    let echo_ok = echoed.iter().all(|(k, v)| c[*k].as_f64() == Some(*v));
    ok &= echo_ok;
    notes.push(format!("paper manifest matches golden file: {golden_ok}; hyper-table echoed: {echo_ok}"));
    report(8, "protocol fidelity", ok, &notes.join("; "));
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 9. determinism

fn pipeline(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let data = root.join("data");
    let ckpt = root.join("ckpt");
    let tsv = root.join("emb.tsv");
    let rep = root.join("fewshot.json");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let common = ["--deterministic", "--seed", "11"];
    let cmds: Vec<Vec<String>> = vec![
        vec!["gen-synth".into(), "--out".into(), s(&data), "--nodes-per-class".into(), "20".into()],
        vec![
            "pretrain".into(),
            "--data".into(),
            s(&data),
            "--out".into(),
            s(&ckpt),
            "--steps".into(),
            "6".into(),
            "--checkpoint-every".into(),
            "3".into(),
        ],
        vec!["embed".into(), "--data".into(), s(&data), "--checkpoint".into(), s(&ckpt), "--out".into(), s(&tsv)],
        vec![
            "fewshot".into(),
            "--data".into(),
            s(&data),
            "--embeddings".into(),
            s(&tsv),
            "--out".into(),
            s(&rep),
            "--tasks".into(),
            "50".into(),
        ],
    ];
    for cmd in cmds {
        let mut args: Vec<&str> = common.to_vec();
        args.extend(cmd.iter().map(String::as_str));
        assert_eq!(run_cli(&args), 0, "{cmd:?}");
    }
    let mut files = BTreeMap::new();
    collect_files(root, root, &mut files);
    files
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(root, &p, out);
        } else {
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.insert(rel, fs::read(&p).unwrap());
        }
    }
}

#[test]
fn criterion_9_determinism() {
    let _g = serial();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = pipeline(a.path());
    let fb = pipeline(b.path());
    let required = ["ckpt/model.ckpt", "ckpt/manifest.json", "emb.tsv", "fewshot.json"];
    let present = required.iter().all(|r| fa.contains_key(*r));
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    let ok = present && fa.len() == fb.len() && differing.is_empty();
    report(
        9,
        "determinism",
        ok,
        &format!(
            "{} artifacts compared byte for byte (checkpoints, embeddings, report); differing: {differing:?}",
            fa.len()
        ),
    );
    assert!(ok);
}
