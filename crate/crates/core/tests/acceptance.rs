//! Acceptance gate: one test per release criterion, each printing a
//! `criterion N: PASS` line with the measured numbers. The expensive
//! 3-seed experiment is run once and shared by criteria 5, 6 and 8;
//! a global lock serializes the tests so the timing budgets are honest
//! on a single core.

use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use udaknn::corpus::{SentencePair, TokenId};
use udaknn::datastore::{
    brute_force_search, build_datastore, build_ivf, knn_search, load_datastore, save_datastore,
    Datastore, DatastoreCorpus, Neighbor, SourceMode,
};
use udaknn::decode::{interpolate, knn_distribution, KnnConfig};
use udaknn::model::{Model, ModelConfig};
use udaknn::pipeline::{
    knn_config, run_experiment, stage_adapters, stage_base, stage_data, stage_store,
    translate_corpus, ExperimentConfig, ExperimentReport, Method,
};
use udaknn::training::rep_match_loss_and_grads;

static GATE: Mutex<()> = Mutex::new(());

fn lock() -> std::sync::MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

// ---------------------------------------------------------------------------
// shared 3-seed experiment at the pinned corpus scale
// ---------------------------------------------------------------------------

const SEEDS: [u64; 3] = [13, 17, 23];

struct SharedRuns {
    #[allow(dead_code)]
    dir: tempfile::TempDir,
    runs: Vec<(u64, PathBuf, ExperimentReport)>,
    total: Duration,
    adapters_time: Duration,
}

fn experiment_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.experiment.seed = seed;
    // the comparison is pinned at 20k general / 5k in-domain / 500 test
    cfg.experiment.n_general = 20_000;
    cfg.experiment.n_indomain = 5_000;
    cfg.experiment.n_dev = 100;
    cfg.experiment.n_test = 500;
    cfg.experiment.baselines = ["basic", "copy", "uda", "parallel"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cfg.experiment.measure_similarity = true;
    cfg
}

fn shared() -> &'static SharedRuns {
    static RUNS: OnceLock<SharedRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let started = Instant::now();
        let mut adapters_time = Duration::ZERO;
        let mut runs = Vec::new();
        for seed in SEEDS {
            let cfg = experiment_config(seed);
            let out = dir.path().join(format!("seed{seed}"));
            let mut log = std::io::sink();
            // stage the prerequisites by hand so adapter training can be
            // timed on its own; run_experiment reuses the cached artifacts
            let data = stage_data(&cfg, &out, &mut log).expect("data");
            let base = stage_base(&cfg, &out, &data, &mut log).expect("base");
            let t = Instant::now();
            stage_adapters(&cfg, &out, &data, &base, &mut log).expect("adapters");
            adapters_time += t.elapsed();
            let report = run_experiment(&cfg, &out, &mut log).expect("experiment");
            runs.push((seed, out, report));
        }
        SharedRuns {
            dir,
            runs,
            total: started.elapsed(),
            adapters_time,
        }
    })
}

fn mean_test_bleu(runs: &[(u64, PathBuf, ExperimentReport)], method: Method) -> f64 {
    let scores: Vec<f64> = runs
        .iter()
        .map(|(_, _, r)| {
            r.results
                .iter()
                .find(|m| m.method == method)
                .unwrap_or_else(|| panic!("no result for {}", method.as_str()))
                .test_bleu
        })
        .collect();
    scores.iter().sum::<f64>() / scores.len() as f64
}

// ---------------------------------------------------------------------------
// criterion 1: retrieval distribution and interpolation exactness
// ---------------------------------------------------------------------------

/// Independent oracle: plain softmax over -d/T without the min-distance
/// shift used by the implementation.
fn oracle_knn_distribution(neighbors: &[Neighbor], t: f64, vocab: usize) -> Vec<f64> {
    let mut p = vec![0.0; vocab];
    let z: f64 = neighbors.iter().map(|n| (-n.distance / t).exp()).sum();
    for n in neighbors {
        p[n.value as usize] += (-n.distance / t).exp() / z;
    }
    p
}

#[test]
fn criterion_1_retrieval_distribution_exactness() {
    let _g = lock();
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(101);
    let vocab = 50;
    for case in 0..100 {
        let n = rng.gen_range(1..=32);
        let temperature = [0.5, 1.0, 4.0, 10.0][case % 4];
        let neighbors: Vec<Neighbor> = (0..n)
            .map(|i| Neighbor {
                entry_id: i,
                distance: rng.gen_range(0.0..10.0),
                value: rng.gen_range(4..vocab as TokenId),
            })
            .collect();
        let got = knn_distribution(&neighbors, temperature, vocab)
            .unwrap()
            .expect("nonempty neighbor set");
        let want = oracle_knn_distribution(&neighbors, temperature, vocab);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9, "case {case}: {a} vs {b}");
        }
        let sum: f64 = got.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "case {case}: sum {sum}");

        // interpolation endpoints and midpoint against hand arithmetic
        let p_nmt: Vec<f64> = {
            let raw: Vec<f64> = (0..vocab).map(|_| rng.gen_range(0.0..1.0)).collect();
            let z: f64 = raw.iter().sum();
            raw.iter().map(|x| x / z).collect()
        };
        assert_eq!(interpolate(&got, &p_nmt, 0.0), p_nmt);
        assert_eq!(interpolate(&got, &p_nmt, 1.0), got);
        let mid = interpolate(&got, &p_nmt, 0.5);
        for i in 0..vocab {
            assert_eq!(mid[i], 0.5 * got[i] + 0.5 * p_nmt[i]);
        }
    }
    // empty neighbor set carries no retrieval evidence
    assert!(knn_distribution(&[], 1.0, vocab).unwrap().is_none());
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    println!("criterion 1: PASS (100 cases, {elapsed:?})");
}

// ---------------------------------------------------------------------------
// criterion 2: IVF search vs brute force
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_ivf_exactness_and_recall() {
    let _g = lock();
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(202);
    let dim = 64;
    let mut ds = Datastore::new(dim);
    for _ in 0..10_000 {
        let key: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        ds.push(&key, rng.gen_range(4..200)).unwrap();
    }
    let index = build_ivf(&ds, 64, 5, 2024).unwrap();
    let queries: Vec<Vec<f32>> = (0..200)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
        .collect();

    // exactness at nprobe = nlist
    for q in &queries {
        let exact = brute_force_search(&ds, q, 16);
        let got = knn_search(&index, &ds, q, 16, 64).unwrap();
        assert_eq!(got.len(), exact.len());
        for (a, b) in got.iter().zip(&exact) {
            assert_eq!(a.entry_id, b.entry_id);
            assert_eq!(a.distance.to_bits(), b.distance.to_bits());
            assert_eq!(a.value, b.value);
        }
    }

    // recall@16 non-decreasing in nprobe
    let mut last = -1.0;
    let mut recalls = Vec::new();
    for nprobe in [1, 2, 4, 8, 16, 32, 64] {
        let mut hits = 0usize;
        for q in &queries {
            let exact: Vec<usize> = brute_force_search(&ds, q, 16)
                .iter()
                .map(|n| n.entry_id)
                .collect();
            let got = knn_search(&index, &ds, q, 16, nprobe).unwrap();
            hits += got.iter().filter(|n| exact.contains(&n.entry_id)).count();
        }
        let recall = hits as f64 / (16 * queries.len()) as f64;
        assert!(
            recall >= last,
            "recall dropped at nprobe {nprobe}: {recall} < {last}"
        );
        last = recall;
        recalls.push(recall);
    }
    assert!((last - 1.0).abs() < 1e-12, "full probe recall {last}");
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    println!("criterion 2: PASS (recall {recalls:?}, {elapsed:?})");
}

// ---------------------------------------------------------------------------
// criterion 3: adapter identity at init, analytic vs numeric gradients
// ---------------------------------------------------------------------------

fn toy_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 2,
        n_dec_layers: 2,
        d_ff: 32,
        adapter_hidden: 16,
        vocab_size: 30,
        max_len: 16,
        ..ModelConfig::desk_default(30)
    };
    Model::new(cfg, seed).unwrap()
}

fn toy_pairs(rng: &mut StdRng, n: usize, vocab: TokenId) -> Vec<SentencePair> {
    (0..n)
        .map(|_| {
            let len = rng.gen_range(2..=5);
            let src: Vec<TokenId> = (0..len).map(|_| rng.gen_range(4..vocab)).collect();
            let tgt: Vec<TokenId> = (0..len).map(|_| rng.gen_range(4..vocab)).collect();
            SentencePair::new(src, tgt).unwrap()
        })
        .collect()
}

#[test]
fn criterion_3_adapter_identity_and_gradients() {
    let _g = lock();
    let started = Instant::now();
    let model = toy_model(7);
    let mut rng = StdRng::seed_from_u64(303);

    // zero-initialized projection => adapters are a bitwise no-op
    let adapters = model.init_adapters(8);
    for _ in 0..10 {
        let x: Vec<TokenId> = (0..rng.gen_range(2..8)).map(|_| rng.gen_range(4..30)).collect();
        let plain = model.encode_plain(&x, None).unwrap();
        let with = model.encode_plain(&x, Some(&adapters)).unwrap();
        assert_eq!(plain.shape(), with.shape());
        for (a, b) in plain.iter().zip(with.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    // gradient check on a non-degenerate adapter configuration
    let mut adapters = model.init_adapters(8);
    let names: Vec<String> = adapters.iter().map(|(n, _, _)| n.to_string()).collect();
    for name in &names {
        let id = adapters.id(name);
        for v in adapters.get_mut(id).iter_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    let pairs = toy_pairs(&mut rng, 4, 30);
    let (_, grads) = rep_match_loss_and_grads(&pairs, &model, &adapters).unwrap();

    let h = 1e-5;
    let mut checked = 0usize;
    let mut max_rel: f64 = 0.0;
    for name in &names {
        let id = adapters.id(name);
        let n_elems = adapters.get(id).len();
        let analytic = grads.get(id).cloned();
        for _ in 0..8.min(n_elems) {
            let flat = rng.gen_range(0..n_elems);
            let (r, c) = (flat / adapters.get(id).ncols(), flat % adapters.get(id).ncols());
            let a = analytic.as_ref().map_or(0.0, |g| g[(r, c)]);
            let orig = adapters.get(id)[(r, c)];
            adapters.get_mut(id)[(r, c)] = orig + h;
            let (up, _) = rep_match_loss_and_grads(&pairs, &model, &adapters).unwrap();
            adapters.get_mut(id)[(r, c)] = orig - h;
            let (down, _) = rep_match_loss_and_grads(&pairs, &model, &adapters).unwrap();
            adapters.get_mut(id)[(r, c)] = orig;
            let fd = (up - down) / (2.0 * h);
            if a.abs() < 1e-8 && fd.abs() < 1e-6 {
                continue;
            }
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-3, "{name}[{r},{c}]: analytic {a} vs fd {fd} (rel {rel})");
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    assert!(checked >= 30, "only {checked} coordinates checked");
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    println!("criterion 3: PASS ({checked} coords, max rel err {max_rel:.2e}, {elapsed:?})");
}

// ---------------------------------------------------------------------------
// criterion 4: datastore cardinality and persistence
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_datastore_cardinality_and_persistence() {
    let _g = lock();
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(9);
    let mut rng = StdRng::seed_from_u64(404);

    for case in 0..50 {
        let n_pairs = rng.gen_range(1..=5);
        let pairs = toy_pairs(&mut rng, n_pairs, 30);
        let expected: usize = pairs.iter().map(|p| p.target.len() + 1).sum();
        let ds = build_datastore(
            &model,
            None,
            &DatastoreCorpus::Parallel(&pairs),
            SourceMode::Parallel,
            None,
        )
        .unwrap();
        assert_eq!(ds.len(), expected, "case {case}");

        let path = dir.path().join(format!("case{case}.udkd"));
        save_datastore(&ds, &path).unwrap();
        let loaded = load_datastore(&path).unwrap();
        assert_eq!(loaded.len(), ds.len());
        assert_eq!(loaded.dim(), ds.dim());
        for i in 0..ds.len() {
            assert_eq!(loaded.value(i), ds.value(i));
            for (a, b) in loaded.key(i).iter().zip(ds.key(i)) {
                assert_eq!(a.to_bits(), b.to_bits(), "case {case} entry {i}");
            }
        }
        // a second save of the loaded store is byte-identical
        let path2 = dir.path().join(format!("case{case}.again.udkd"));
        save_datastore(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    // the empty store round-trips too
    let empty = Datastore::new(16);
    let path = dir.path().join("empty.udkd");
    save_datastore(&empty, &path).unwrap();
    let loaded = load_datastore(&path).unwrap();
    assert_eq!(loaded.len(), 0);
    assert_eq!(loaded.dim(), 16);

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    println!("criterion 4: PASS (50 corpora + empty store, {elapsed:?})");
}

// ---------------------------------------------------------------------------
// criterion 5: adapters move copy-pass representations toward parallel ones
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_representation_similarity_gain() {
    let _g = lock();
    let runs = shared();
    for (seed, _, report) in &runs.runs {
        let find = |cand: &str| {
            report
                .similarity
                .iter()
                .find(|r| r.candidate == cand)
                .unwrap_or_else(|| panic!("seed {seed}: no similarity row for {cand}"))
        };
        let copy = find("copy");
        let adapted = find("copy+adapters");
        let gain = adapted.report.mean_cosine - copy.report.mean_cosine;
        assert!(
            gain >= 0.03,
            "seed {seed}: cosine gain {gain:.4} ({:.4} -> {:.4})",
            copy.report.mean_cosine,
            adapted.report.mean_cosine
        );
        assert!(
            adapted.report.mean_sq_euclidean < copy.report.mean_sq_euclidean,
            "seed {seed}: msd {:.2} -> {:.2}",
            copy.report.mean_sq_euclidean,
            adapted.report.mean_sq_euclidean
        );
    }
    assert!(
        runs.adapters_time < Duration::from_secs(20 * 60),
        "adapter training took {:?}",
        runs.adapters_time
    );
    let gains: Vec<String> = runs
        .runs
        .iter()
        .map(|(_, _, r)| {
            let cos = |c: &str| {
                r.similarity.iter().find(|x| x.candidate == c).unwrap().report.mean_cosine
            };
            format!("{:.3}", cos("copy+adapters") - cos("copy"))
        })
        .collect();
    println!(
        "criterion 5: PASS (cosine gains {gains:?}, adapter time {:?})",
        runs.adapters_time
    );
}

// ---------------------------------------------------------------------------
// criterion 6: method ordering at the pinned corpus scale
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_method_ordering() {
    let _g = lock();
    let runs = shared();
    let basic = mean_test_bleu(&runs.runs, Method::Basic);
    let copy = mean_test_bleu(&runs.runs, Method::Copy);
    let uda = mean_test_bleu(&runs.runs, Method::Uda);
    let parallel = mean_test_bleu(&runs.runs, Method::Parallel);
    assert!(
        parallel >= uda && uda > copy && copy >= basic,
        "ordering violated: parallel {parallel:.2}, uda {uda:.2}, copy {copy:.2}, basic {basic:.2}"
    );
    assert!(
        uda - basic >= 2.0,
        "uda {uda:.2} vs basic {basic:.2}: margin {:.2}",
        uda - basic
    );
    assert!(
        runs.total < Duration::from_secs(45 * 60),
        "3-seed suite took {:?}",
        runs.total
    );
    println!(
        "criterion 6: PASS (basic {basic:.2} <= copy {copy:.2} < uda {uda:.2} <= parallel {parallel:.2}, {:?})",
        runs.total
    );
}

// ---------------------------------------------------------------------------
// criterion 7: full fine-tuning forgets the general domain
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_finetune_forgetting_direction() {
    let _g = lock();
    let dir = tempfile::tempdir().unwrap();
    let mut directions = Vec::new();
    for seed in SEEDS {
        let mut cfg = experiment_config(seed);
        cfg.experiment.baselines = vec!["bt-ft".to_string()];
        cfg.experiment.n_general = 4_000;
        cfg.experiment.n_indomain = 1_000;
        cfg.experiment.n_dev = 80;
        cfg.experiment.n_test = 20;
        cfg.experiment.measure_similarity = false;
        cfg.train.base_steps = 200;
        cfg.train.finetune_steps = 120;
        let out = dir.path().join(format!("seed{seed}"));
        let report = run_experiment(&cfg, &out, &mut std::io::sink()).unwrap();
        let row = &report.forgetting[0];
        assert!(
            row.finetuned_indomain_loss < row.base_indomain_loss,
            "seed {seed}: in-domain loss {:.4} -> {:.4}",
            row.base_indomain_loss,
            row.finetuned_indomain_loss
        );
        assert!(
            row.finetuned_general_loss > row.base_general_loss,
            "seed {seed}: general loss {:.4} -> {:.4}",
            row.base_general_loss,
            row.finetuned_general_loss
        );
        directions.push(format!(
            "seed {seed}: in-domain {:.3}->{:.3}, general {:.3}->{:.3}",
            row.base_indomain_loss,
            row.finetuned_indomain_loss,
            row.base_general_loss,
            row.finetuned_general_loss
        ));
    }
    println!("criterion 7: PASS ({})", directions.join("; "));
}

// ---------------------------------------------------------------------------
// criterion 8: interpolation endpoints
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_lambda_endpoints() {
    let _g = lock();
    let runs = shared();

    // tuned lambda for the parallel datastore is strictly positive
    for (seed, _, report) in &runs.runs {
        let row = report
            .results
            .iter()
            .find(|r| r.method == Method::Parallel)
            .unwrap();
        assert!(row.lambda > 0.0, "seed {seed}: parallel lambda {}", row.lambda);
    }

    // lambda = 0 with a datastore attached reproduces plain decoding
    // token for token on the full test set (first seed)
    let (seed, out, _) = &runs.runs[0];
    let cfg = experiment_config(*seed);
    let mut log = std::io::sink();
    let data = stage_data(&cfg, out, &mut log).unwrap();
    let base = stage_base(&cfg, out, &data, &mut log).unwrap();
    let dom = data.domain("medical").unwrap();
    let sources: Vec<Vec<TokenId>> = dom.test.iter().map(|p| p.source.clone()).collect();
    let (ds, index) = stage_store(
        &cfg,
        out,
        dom,
        Method::Parallel,
        &base,
        None,
        None,
        &mut log,
    )
    .unwrap();
    let strategy = cfg.strategy();
    let plain = translate_corpus(&base, &sources, None, &KnnConfig::disabled(), strategy).unwrap();
    let knn = knn_config(&cfg, 0.0);
    let zero = translate_corpus(&base, &sources, Some((&ds, &index)), &knn, strategy).unwrap();
    assert_eq!(plain, zero, "lambda = 0 diverged from plain decoding");

    println!(
        "criterion 8: PASS (lambda=0 identical on {} sentences, parallel lambdas {:?})",
        sources.len(),
        runs.runs
            .iter()
            .map(|(_, _, r)| r.results.iter().find(|m| m.method == Method::Parallel).unwrap().lambda)
            .collect::<Vec<_>>()
    );
}

// ---------------------------------------------------------------------------
// criterion 9: bit-identical result tables under a fixed seed
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_run_determinism() {
    let _g = lock();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = experiment_config(41);
    cfg.experiment.n_general = 600;
    cfg.experiment.n_indomain = 300;
    cfg.experiment.n_dev = 24;
    cfg.experiment.n_test = 24;
    cfg.experiment.max_sentence_len = 8;
    cfg.train.base_steps = 30;
    cfg.train.adapter_steps = 15;
    cfg.train.warmup_steps = 10;
    cfg.train.batch_tokens = 500;
    cfg.knn.nlist = 16;
    cfg.knn.nprobe = 16;
    cfg.knn.kmeans_iters = 3;

    let mut tables = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        run_experiment(&cfg, &out, &mut std::io::sink()).unwrap();
        tables.push((
            std::fs::read(out.join("results.tsv")).unwrap(),
            std::fs::read(out.join("similarity.tsv")).unwrap(),
        ));
    }
    assert_eq!(tables[0].0, tables[1].0, "results.tsv differs between runs");
    assert_eq!(tables[0].1, tables[1].1, "similarity.tsv differs between runs");
    println!("criterion 9: PASS (result tables bit-identical across repeated runs)");
}
