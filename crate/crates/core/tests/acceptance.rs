//! One line per criterion. Exits non-zero on a failure only when
//! `ACCEPTANCE_STRICT` is set, so the workspace test run always reports the
//! whole table.

mod common;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use stylenas::arch::{parse_code, resolve_code, ArchCode, DecoderPlan, Encoder, NetworkGraph, NUM_SLOTS};
use stylenas::io::cli::{load_graph, median, time_forward};
use stylenas::metrics::{gram_loss, ssim, EvalReport, ObjectiveWeights};
use stylenas::nas::{
    random_search, search, train_oracle, DeskConfig, DeskEvaluator, Evaluator, Memoized, Observer, Outcome,
    SearchConfig, SearchResult, SearchSpace, Status, StepEvent,
};
use stylenas::train::{train_decoder, Corpus, TrainConfig};
use stylenas::transfer::{wct, TransferConfig};
use stylenas::Tensor;

const PHOTONAS: &str = "0101000000100000000000000001111";
/// Toy subspace: slots 5..=8 on, the eight free slots below varied.
const TOY_BASE: &str = "0000011110000000000000000000000";
const TOY_FREE: [usize; 8] = [4, 13, 14, 15, 16, 17, 18, 19];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn run(name: &str, limit: Option<Duration>, results: &mut Vec<bool>, f: impl FnOnce() -> Verdict) {
    let t = Instant::now();
    let mut v = f();
    let took = t.elapsed();
    if let Some(limit) = limit {
        if took > limit {
            v.pass = false;
            v.detail += &format!("; over the {}s limit", limit.as_secs());
        }
    }
    let tag = if v.pass { "PASS" } else { "FAIL" };
    println!("{tag} {name}: {} ({:.1}s)", v.detail, took.as_secs_f64());
    results.push(v.pass);
}

fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn wct_correctness() -> Verdict {
    let exact = TransferConfig {
        epsilon: 0.0,
        ..Default::default()
    };
    let (mut mean_err, mut cov_err, mut id_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut r = common::rng(2024);
    for k in 0..20 {
        let c = [2, 4, 8][k % 3];
        let (h, w) = if k % 2 == 0 { (5, 10) } else { (10, 20) };
        let content = common::correlated_features(c, h, w, &mut r);
        let style = common::correlated_features(c, w, h, &mut r);
        let out = wct(&content, &style, &exact).unwrap();
        let (mo, co) = common::moments(&out);
        let (ms, cs) = common::moments(&style);
        for (a, b) in mo.iter().zip(&ms) {
            mean_err = mean_err.max((a - b).abs());
        }
        let diff: Vec<f64> = co.iter().zip(&cs).map(|(a, b)| a - b).collect();
        cov_err = cov_err.max(frobenius(&diff) / frobenius(&cs));
        let same = wct(&content, &content, &exact).unwrap();
        id_err = id_err.max(same.max_abs_diff(&content) as f64);
    }
    verdict(
        mean_err < 1e-4 && cov_err < 1e-3 && id_err < 1e-3,
        format!("mean {mean_err:.2e}, cov {cov_err:.2e}, identity {id_err:.2e}"),
    )
}

fn gradient_suite() -> Verdict {
    let mut worst_op = (String::new(), 0.0f64);
    for seed in 0..3 {
        for (op, err) in common::op_gradient_suite(seed) {
            if err >= worst_op.1 {
                worst_op = (op.to_string(), err);
            }
        }
    }
    let mut worst_e2e = (String::new(), 0.0f64);
    for code in [ArchCode::ZEROS, ArchCode::ONES, parse_code(PHOTONAS).unwrap()] {
        for (layer, err) in common::end_to_end_gradient(code, 3) {
            if err >= worst_e2e.1 {
                worst_e2e = (format!("{code} {layer}"), err);
            }
        }
    }
    verdict(
        worst_op.1 < 1e-3 && worst_e2e.1 < 1e-2,
        format!(
            "worst op {} {:.2e}, worst end-to-end {} {:.2e}",
            worst_op.0, worst_op.1, worst_e2e.0, worst_e2e.1
        ),
    )
}

fn arch_decoding() -> Verdict {
    let mut r = common::rng(31);
    let mut failures = Vec::new();
    for _ in 0..1000 {
        let code = ArchCode::from_bits(r.gen_range(0..1u32 << NUM_SLOTS)).unwrap();
        if parse_code(&code.to_string()).unwrap() != code {
            failures.push(format!("round trip {code}"));
        }
    }
    let nas = parse_code(PHOTONAS).unwrap();
    if nas.popcount() != 7 || (nas.op_fraction() - 7.0 / 31.0).abs() > 1e-15 {
        failures.push("photonas popcount".into());
    }
    let content = common::random_image(64, 64, &mut r);
    let style = common::random_image(64, 64, &mut r);
    for code in [ArchCode::ZEROS, ArchCode::ONES] {
        let g = NetworkGraph::new(code, Arc::new(Encoder::seeded(4, 0).unwrap()), 0);
        match g.forward(&content, &style, &TransferConfig::default()) {
            Ok(out) if out.shape() == [3, 64, 64] && out.is_finite() => {}
            other => failures.push(format!("{code} forward: {:?}", other.map(|t| t.shape().to_vec()))),
        }
    }
    for _ in 0..100 {
        let a = ArchCode::from_bits(r.gen_range(0..1u32 << NUM_SLOTS)).unwrap();
        let b = ArchCode::from_bits(a.bits() | r.gen_range(0..1u32 << NUM_SLOTS)).unwrap();
        if !DecoderPlan::decode(a).op_names().is_subset(&DecoderPlan::decode(b).op_names()) {
            failures.push(format!("monotone {a} {b}"));
        }
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            "1000 round trips, photonas 7/31, zeros and ones run at 64x64, 100 monotone pairs".to_string()
        } else {
            failures.join("; ")
        },
    )
}

/// Checks population size, oldest eviction, parent-child adjacency and a
/// non-increasing running best on every step.
struct AgingCheck {
    population: usize,
    running: f64,
    violations: Vec<String>,
}

impl AgingCheck {
    fn new(population: usize) -> Self {
        Self {
            population,
            running: f64::INFINITY,
            violations: Vec::new(),
        }
    }

    fn step(&mut self, e: &StepEvent<'_>) {
        let n = e.state.history.len();
        let size = e.state.population.len();
        match e.evicted {
            None if size != n.min(self.population) => self.violations.push(format!("step {n}: size {size}")),
            Some(old) => {
                if size != self.population {
                    self.violations.push(format!("step {n}: size {size}"));
                }
                if e.gens_before_eviction.iter().any(|&g| g < old.gen) {
                    self.violations.push(format!("step {n}: evicted gen {} not oldest", old.gen));
                }
                let pool = e.parent_pool.as_deref().unwrap_or_default();
                if !pool.iter().any(|p| p.hamming(e.inserted.code) == 1) {
                    self.violations.push(format!("step {n}: child has no parent in the pool"));
                }
            }
            None => {}
        }
        let best = e.state.best().map_or(f64::INFINITY, |b| b.loss);
        if best > self.running {
            self.violations.push(format!("step {n}: running best rose"));
        }
        self.running = best;
    }
}

fn observed_search(cfg: &SearchConfig, space: &SearchSpace, eval: &dyn Evaluator) -> (SearchResult, Vec<String>) {
    let mut check = AgingCheck::new(cfg.population);
    let result = {
        let mut obs = |e: &StepEvent<'_>| check.step(e);
        let observer: &mut Observer<'_> = &mut obs;
        search(cfg, space, eval, Some(observer)).unwrap()
    };
    (result, check.violations)
}

fn search_correctness(eval: &dyn Evaluator, reports: &Mutex<Vec<EvalReport>>) -> Verdict {
    let space = SearchSpace::restricted(parse_code(TOY_BASE).unwrap(), &TOY_FREE).unwrap();
    let optimum = space
        .enumerate()
        .into_iter()
        .filter_map(|c| match eval.evaluate(c) {
            Outcome::Trained(r) => Some(r.overall),
            Outcome::Failed(_) => None,
        })
        .fold(f64::INFINITY, f64::min);
    let mut hits = 0;
    let mut violations = Vec::new();
    for seed in 0..20 {
        let mut cfg = SearchConfig::with_population(8, 64);
        cfg.seed = seed;
        let (result, v) = observed_search(&cfg, &space, eval);
        violations.extend(v.into_iter().map(|s| format!("seed {seed} {s}")));
        if result.best.loss <= optimum + 1e-6 {
            hits += 1;
        }
        reports.lock().unwrap().extend(result.history.iter().filter_map(|c| c.report));
    }
    let detail = format!(
        "optimum {optimum:.6} reached in {hits}/20 seeds, {} aging violations{}",
        violations.len(),
        violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default()
    );
    verdict(hits >= 18 && violations.is_empty(), detail)
}

fn search_vs_random(eval: &dyn Evaluator, reports: &Mutex<Vec<EvalReport>>, evolved: &mut Vec<SearchResult>) -> Verdict {
    let space = SearchSpace::full();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..10 {
        let mut cfg = SearchConfig::with_population(8, 40);
        cfg.seed = seed;
        let e = search(&cfg, &space, eval, None).unwrap();
        let r = random_search(&cfg, &space, eval).unwrap();
        if e.best.loss <= r.best.loss {
            wins += 1;
        }
        lines.push(format!("{:.4}/{:.4}", e.best.loss, r.best.loss));
        let mut rep = reports.lock().unwrap();
        rep.extend(e.history.iter().chain(&r.history).filter_map(|c| c.report));
        evolved.push(e);
    }
    verdict(wins >= 8, format!("evolved <= random in {wins}/10 seeds [{}]", lines.join(" ")))
}

fn pruning_benefit(desk: &DeskEvaluator, eval: &dyn Evaluator, evolved: &[SearchResult]) -> Verdict {
    let best = evolved
        .iter()
        .map(|r| &r.best)
        .min_by(|a, b| a.loss.total_cmp(&b.loss))
        .expect("at least one search");
    let ep = |c: ArchCode| match eval.evaluate(c) {
        Outcome::Trained(r) => r.recon_error + r.perceptual,
        Outcome::Failed(_) => f64::INFINITY,
    };
    let (best_ep, ones_ep) = (ep(best.code), ep(ArchCode::ONES));
    let (best_flops, ones_flops) = (desk.flops(best.code), desk.flops(ArchCode::ONES));

    let bench = |arch: &str| {
        let g = load_graph(resolve_code(arch).unwrap(), None, 8, 0).unwrap();
        let mut t = time_forward(&g, 128, 256, 5).unwrap();
        median(&mut t).as_secs_f64()
    };
    let (nas_t, net_t) = (bench("photonas"), bench("photonet"));
    let speedup = net_t / nas_t;
    verdict(
        best_flops < ones_flops && best_ep <= 1.1 * ones_ep && speedup >= 1.5,
        format!(
            "best {} flops {best_flops} vs {ones_flops}, E+P {best_ep:.4} vs {ones_ep:.4} (limit {:.4}), \
             photonas {:.1}ms photonet {:.1}ms speedup {speedup:.2}x",
            best.code,
            1.1 * ones_ep,
            nas_t * 1e3,
            net_t * 1e3
        ),
    )
}

fn metrics_sanity(reports: &[EvalReport], weights: &ObjectiveWeights) -> Verdict {
    let mut r = common::rng(77);
    let encoder = Encoder::seeded(4, 0).unwrap();
    let (mut self_err, mut gram_self, mut oracle_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..5 {
        let x = common::random_image(32, 48, &mut r);
        let y = common::random_image(32, 48, &mut r);
        self_err = self_err.max((ssim(&x, &x).unwrap() - 1.0).abs());
        gram_self = gram_self.max(gram_loss(&x, &x, &encoder).unwrap().abs());
        oracle_err = oracle_err.max((ssim(&x, &y).unwrap() - common::ssim_direct(&x, &y)).abs());
    }
    let recomposition = reports
        .iter()
        .map(|rep| rep.recomposition_error(weights))
        .fold(0.0f64, f64::max);
    verdict(
        self_err < 1e-12 && gram_self == 0.0 && oracle_err < 1e-6 && recomposition < 1e-9 && !reports.is_empty(),
        format!(
            "|ssim(x,x)-1| {self_err:.1e}, gram(x,x) {gram_self:.1e}, oracle {oracle_err:.1e}, \
             recomposition {recomposition:.1e} over {} reports",
            reports.len()
        ),
    )
}

fn tiny_desk() -> DeskConfig {
    let mut c = DeskConfig {
        base_width: 2,
        train_images: 3,
        val_pairs: 2,
        ..Default::default()
    };
    c.train.steps = 4;
    c.train.image_size = 16;
    c.oracle_train.steps = 8;
    c.oracle_train.image_size = 16;
    c
}

fn determinism() -> Verdict {
    let mut failures = Vec::new();

    let telemetry = || {
        let desk = tiny_desk();
        let oracle = Arc::new(train_oracle(&desk).unwrap());
        let eval = DeskEvaluator::new(&desk, oracle, ObjectiveWeights::default()).unwrap();
        let mut cfg = SearchConfig::with_population(4, 10);
        cfg.seed = 3;
        let result = search(&cfg, &SearchSpace::full(), &eval, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        result.write_telemetry(&path).unwrap();
        (result.history, std::fs::read(path).unwrap())
    };
    if telemetry() != telemetry() {
        failures.push("search");
    }

    let corpus = Corpus::procedural(4, 32, 5).unwrap();
    let trained = || {
        let cfg = TrainConfig {
            steps: 10,
            image_size: 32,
            seed: 9,
            ..Default::default()
        };
        let mut g = NetworkGraph::new(parse_code(PHOTONAS).unwrap(), Arc::new(Encoder::seeded(2, 1).unwrap()), 1);
        let trace = train_decoder(&mut g, &corpus, &cfg).unwrap();
        (g.named_tensors(), trace)
    };
    if trained() != trained() {
        failures.push("train-decoder");
    }

    let mut r = common::rng(6);
    let content = common::random_image(32, 48, &mut r);
    let style = common::random_image(48, 32, &mut r);
    let stylize = || -> BTreeMap<&str, Tensor> {
        ["photonet", "photonas", "stylenas-5opt", "stylenas-9opt"]
            .into_iter()
            .map(|arch| {
                let g = load_graph(resolve_code(arch).unwrap(), None, 4, 2).unwrap();
                (arch, g.forward(&content, &style, &TransferConfig::default()).unwrap())
            })
            .collect()
    };
    if stylize() != stylize() {
        failures.push("stylize");
    }

    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            "search telemetry, train-decoder weights and stylize outputs repeat bit for bit".to_string()
        } else {
            format!("differs: {}", failures.join(", "))
        },
    )
}

/// Mean op fraction of the first and last quarter of each evolved history.
fn op_fraction_trend(evolved: &[SearchResult]) -> String {
    let mean = |cs: &[stylenas::nas::Candidate]| {
        cs.iter().map(|c| c.code.op_fraction()).sum::<f64>() / cs.len().max(1) as f64
    };
    let (mut early, mut late) = (0.0, 0.0);
    for r in evolved {
        let q = r.history.len() / 4;
        early += mean(&r.history[..q]);
        late += mean(&r.history[r.history.len() - q..]);
    }
    let n = evolved.len().max(1) as f64;
    format!("op fraction {:.3} in the first quarter, {:.3} in the last", early / n, late / n)
}

fn main() {
    let mut results = Vec::new();
    run("wct correctness", Some(Duration::from_secs(5)), &mut results, wct_correctness);
    run("gradient suite", Some(Duration::from_secs(60)), &mut results, gradient_suite);
    run("architecture decoding", Some(Duration::from_secs(60)), &mut results, arch_decoding);

    let t = Instant::now();
    let desk_config = DeskConfig::default();
    let weights = ObjectiveWeights::default();
    let oracle = Arc::new(train_oracle(&desk_config).unwrap());
    let desk = DeskEvaluator::new(&desk_config, oracle, weights).unwrap();
    let eval = Memoized::new(desk);
    println!("INFO desk oracle trained in {:.1}s", t.elapsed().as_secs_f64());

    let reports = Mutex::new(Vec::new());
    run("search correctness", Some(Duration::from_secs(30 * 60)), &mut results, || {
        search_correctness(&eval, &reports)
    });
    let mut evolved = Vec::new();
    run("search vs random", None, &mut results, || search_vs_random(&eval, &reports, &mut evolved));
    run("pruning benefit", None, &mut results, || pruning_benefit(eval.inner(), &eval, &evolved));
    println!("INFO {}", op_fraction_trend(&evolved));
    let failed_candidates = evolved
        .iter()
        .flat_map(|r| &r.history)
        .filter(|c| c.status == Status::Failed)
        .count();
    println!("INFO {failed_candidates} failed candidates in the evolved histories");

    let reports = reports.into_inner().unwrap();
    run("metrics sanity", None, &mut results, || metrics_sanity(&reports, &weights));
    run("determinism", None, &mut results, determinism);

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria pass", results.len());
    if passed < results.len() && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
