//! Acceptance suite. Prints one line per criterion and exits non-zero when a
//! hard criterion fails. Criterion 8 is reported, never failed.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use jointformer::inference::{
    binary_mask, memory_bank_update, multi_scale_infer, segment_frame, segment_video, target_ids, BankEntry,
    InferenceConfig, MemoryBank,
};
use jointformer::joint_block::{block_forward, build_attention_pattern, build_layout_mask, MaskOptions, TokenLayout};
use jointformer::memory::init_state;
use jointformer::metrics::{boundary, boundary_f, region_j, tolerance_radius, BOUNDARY_TOL};
use jointformer::objective::{argmax_labels, soft_aggregate, BackgroundRule, EPS};
use jointformer::params::BlockWeights;
use jointformer::trainer::{full_model_gradcheck, gen_synthetic_video, toy_splits, train_loop, SynthConfig, TrainConfig, Trainer};
use jointformer::{Graph, Model, ModelConfig, PropagationMode, Tensor};
use jointformer_cli::ablate::{run_setting, Setting};
use jointformer_cli::{run, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use PropagationMode::{A, B, C, D};

/// Moving-shapes validation J&F of the seed-0 run, pinned after the static
/// oracle passed; runs must land within `MOVING_TOL` of it.
const MOVING_BAR: f64 = 0.80;
const MOVING_TOL: f64 = 0.03;
const STATIC_BAR: f64 = 0.95;
const ABLATION_BUDGET: usize = 250;

struct Outcome {
    pass: bool,
    soft: bool,
    detail: String,
}

fn hard(pass: bool, detail: String) -> Outcome {
    Outcome { pass, soft: false, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gradient_fidelity() -> Outcome {
    let t0 = Instant::now();
    let r = full_model_gradcheck(&ModelConfig::tiny(), 0, D).expect("gradcheck runs");
    let secs = t0.elapsed().as_secs_f64();
    let worst = r.worst().map(|w| w.0.clone()).unwrap_or_default();
    hard(
        r.max_rel_err < 1e-3 && secs < 120.0,
        format!("max rel err {:.3e} (worst {worst}) over {} scalars in {secs:.1}s", r.max_rel_err, r.scalars),
    )
}

/// Visibility from the propagation rules, one (query, key) pair at a time.
fn enumerate_visibility(has_memory: bool, ref_lens: &[usize], cur_len: usize, mode: PropagationMode) -> Vec<Vec<bool>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Span {
        Mem,
        Ref(usize),
        Cur,
    }
    let mut span = Vec::new();
    if has_memory {
        span.push(Span::Mem);
    }
    for (i, &n) in ref_lens.iter().enumerate() {
        span.extend(std::iter::repeat_n(Span::Ref(i), n));
    }
    span.extend(std::iter::repeat_n(Span::Cur, cur_len));
    let n = span.len();
    let mut m = vec![vec![false; n]; n];
    for q in 0..n {
        for k in 0..n {
            let is_ref = matches!(span[k], Span::Ref(_));
            m[q][k] = match span[q] {
                Span::Mem => span[k] == Span::Mem || is_ref,
                Span::Cur => is_ref || span[k] == Span::Cur,
                Span::Ref(i) => {
                    let own = span[k] == Span::Ref(i);
                    let other = is_ref && !own;
                    let cur = span[k] == Span::Cur;
                    own || (other && matches!(mode, A | B)) || (cur && matches!(mode, A | C))
                }
            };
        }
    }
    m
}

fn mask_structure() -> Outcome {
    let mut r = rng(2);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let mem = r.random_bool(0.5);
        let refs: Vec<usize> = (0..r.random_range(1..6)).map(|_| r.random_range(1..7)).collect();
        let cur = r.random_range(1..8);
        let layout = TokenLayout::new(mem, &refs, cur).expect("valid layout");
        for mode in PropagationMode::ALL {
            if build_layout_mask(&layout, mode) != enumerate_visibility(mem, &refs, cur, mode) {
                mismatches += 1;
            }
        }
    }
    hard(mismatches == 0, format!("{mismatches} mismatches over 1000 layouts x 4 modes"))
}

fn random_block(d: usize, seed: u64) -> BlockWeights {
    let mut r = rng(seed);
    let mut w = BlockWeights::init(d, 4, &mut r);
    w.visit_mut("", &mut |name, t| {
        let shift = if name.ends_with("_g") { 1.0 } else { 0.0 };
        t.data_mut().iter_mut().for_each(|x| *x = shift + 0.5 * r.random_range(-1.0..1.0));
    });
    w
}

/// Outputs of each of `depth` stacked blocks.
fn stack(x: &Tensor, layout: &TokenLayout, mode: PropagationMode, depth: usize) -> Vec<Tensor> {
    let pattern = build_attention_pattern(layout, mode, &MaskOptions::default()).expect("pattern");
    let mut g = Graph::new();
    let mut h = g.constant(x.clone());
    let mut outs = Vec::new();
    for i in 0..depth {
        let w = random_block(x.cols(), 500 + i as u64).map("", &mut |_, t| g.constant(t.clone()));
        h = block_forward(&mut g, h, &pattern, &w, 2, 1e-6).expect("block");
        outs.push(g.value(h).clone());
    }
    outs
}

fn isolation() -> Outcome {
    let depth = 4;
    let layout = TokenLayout::new(true, &[6, 6, 6], 6).expect("layout");
    let x = Tensor::randn([layout.total, 8], 1.0, &mut rng(3));
    let mut y = x.clone();
    let cur0 = layout.cur_span.0 * 8;
    y.data_mut()[cur0..].iter_mut().for_each(|v| *v += 0.3);
    let refs = layout.refs();
    let rows = |t: &Tensor| t.data()[refs.start * 8..refs.end * 8].to_vec();
    let mut failures = Vec::new();
    for mode in PropagationMode::ALL {
        let (ox, oy) = (stack(&x, &layout, mode, depth), stack(&y, &layout, mode, depth));
        let unchanged_all = ox.iter().zip(&oy).all(|(a, b)| rows(a) == rows(b));
        let isolated = matches!(mode, B | D);
        if isolated != unchanged_all {
            failures.push(format!("mode {mode}"));
        }
    }
    let one = TokenLayout::new(true, &[6], 6).expect("layout");
    let x1 = Tensor::randn([one.total, 8], 1.0, &mut rng(4));
    if stack(&x1, &one, A, depth) != stack(&x1, &one, C, depth) {
        failures.push("a != c with one reference".into());
    }
    if stack(&x1, &one, B, depth) != stack(&x1, &one, D, depth) {
        failures.push("b != d with one reference".into());
    }
    let detail = if failures.is_empty() {
        format!("b/d reference rows bitwise unchanged over {depth} blocks, a/c change; T=1 collapses a=c, b=d")
    } else {
        failures.join(", ")
    };
    hard(failures.is_empty(), detail)
}

fn normalization() -> Outcome {
    let mut r = rng(5);
    let n = 100_000;
    let mut worst_sum: f64 = 0.0;
    let mut worst_softmax: f64 = 0.0;
    for rule in [BackgroundRule::OneMinusProduct, BackgroundRule::Complement] {
        for k in 1..=3usize {
            let probs = Tensor::new([k, 1, n], (0..k * n).map(|_| r.random_range(0.0..1.0)).collect()).expect("probs");
            let d = soft_aggregate(&probs, rule).expect("aggregate");
            for p in 0..n {
                let sum: f64 = (0..=k).map(|c| d.data()[c * n + p]).sum();
                worst_sum = worst_sum.max((sum - 1.0).abs());
            }
            // softmax of the logs of the raw channels against x / sum(x)
            for p in (0..n).step_by(97) {
                let ms: Vec<f64> = (0..k).map(|i| probs.data()[i * n + p].clamp(EPS, 1.0 - EPS)).collect();
                let bg = match rule {
                    BackgroundRule::OneMinusProduct => 1.0 - ms.iter().product::<f64>(),
                    BackgroundRule::Complement => ms.iter().map(|m| 1.0 - m).product(),
                };
                let raw: Vec<f64> = std::iter::once(bg).chain(ms).collect();
                let logs: Vec<f64> = raw.iter().map(|v| v.ln()).collect();
                let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logs.iter().map(|l| (l - mx).exp()).sum();
                let total: f64 = raw.iter().sum();
                for c in 0..=k {
                    let softmax = (logs[c] - mx).exp() / z;
                    worst_softmax = worst_softmax.max((softmax - raw[c] / total).abs());
                    worst_softmax = worst_softmax.max((d.data()[c * n + p] - raw[c] / total).abs());
                }
            }
        }
    }
    hard(
        worst_sum <= 1e-9 && worst_softmax <= 1e-12,
        format!("max |sum-1| {worst_sum:.2e} on 1e5 px x 2 rules; max softmax-log vs division {worst_softmax:.2e}"),
    )
}

fn oracle_j(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// F by matching each boundary pixel to the other boundary within a disk.
fn oracle_f(pred: &[bool], gt: &[bool], size: (usize, usize)) -> f64 {
    let pts = |m: &[bool]| -> Vec<(i64, i64)> {
        let b = boundary(m, size);
        (0..b.len()).filter(|&i| b[i]).map(|i| ((i / size.1) as i64, (i % size.1) as i64)).collect()
    };
    let (pp, pg) = (pts(pred), pts(gt));
    match (pp.is_empty(), pg.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let r = tolerance_radius(size, BOUNDARY_TOL) as i64;
    let hit = |a: &[(i64, i64)], b: &[(i64, i64)]| {
        a.iter()
            .filter(|p| b.iter().any(|q| (p.0 - q.0).pow(2) + (p.1 - q.1).pow(2) <= r * r))
            .count() as f64
            / a.len() as f64
    };
    let (prec, rec) = (hit(&pp, &pg), hit(&pg, &pp));
    if prec + rec == 0.0 {
        0.0
    } else {
        2.0 * prec * rec / (prec + rec)
    }
}

fn square(size: (usize, usize), y0: usize, x0: usize, side: usize) -> Vec<bool> {
    (0..size.0 * size.1)
        .map(|i| (y0..y0 + side).contains(&(i / size.1)) && (x0..x0 + side).contains(&(i % size.1)))
        .collect()
}

fn metric_oracle() -> Outcome {
    let mut r = rng(6);
    let size = (16, 16);
    let mut mismatches = 0;
    for _ in 0..100 {
        let density = r.random_range(0.1..0.7);
        let a: Vec<bool> = (0..256).map(|_| r.random_bool(density)).collect();
        let b: Vec<bool> = (0..256).map(|_| r.random_bool(density)).collect();
        if region_j(&a, &b).expect("j") != oracle_j(&a, &b) {
            mismatches += 1;
        }
        if boundary_f(&a, &b, size, BOUNDARY_TOL).expect("f") != oracle_f(&a, &b, size) {
            mismatches += 1;
        }
    }
    let big = (64, 64);
    let shifted = boundary_f(&square(big, 20, 20, 10), &square(big, 20, 21, 10), big, BOUNDARY_TOL).expect("f");
    hard(
        mismatches == 0 && shifted == 1.0,
        format!("{mismatches} J/F mismatches on 100 random pairs; one-pixel shifted square F = {shifted}"),
    )
}

fn bank_policy() -> Outcome {
    let entry = |index: usize| BankEntry {
        index,
        frame: Tensor::zeros([3, 1, 1]),
        masks: vec![Tensor::zeros([1, 1, 1])],
    };
    let mut bank = MemoryBank::new(entry(0), 5, 3).expect("bank");
    let mut bound_ok = true;
    let mut at23 = Vec::new();
    for t in 1..200 {
        memory_bank_update(&mut bank, entry(t)).expect("update");
        bound_ok &= bank.slots() <= bank.capacity();
        if t == 22 {
            // the bank used to segment frame 23
            at23 = bank.indices();
        }
    }
    hard(
        bound_ok && at23 == [0, 10, 15, 20, 22],
        format!("size bound held over 200 frames: {bound_ok}; bank for frame 23: {at23:?}"),
    )
}

fn toy_run(seed: u64, static_scene: bool) -> f64 {
    let synth = SynthConfig {
        static_scene,
        ..SynthConfig::default()
    };
    let (train, val) = toy_splits(seed, &synth).expect("data");
    let cfg = TrainConfig {
        iterations: 4000,
        seed,
        val_every: 0,
        ..TrainConfig::toy()
    };
    let model = Model::init(ModelConfig::default(), seed).expect("model");
    let mut trainer = Trainer::new(model, cfg).expect("trainer");
    let report = train_loop(&mut trainer, &train, &val, |_| {}).expect("training");
    report.validation.last().expect("final validation").1
}

fn toy_end_to_end() -> Outcome {
    let t0 = Instant::now();
    let stat = toy_run(0, true);
    let moving = toy_run(0, false);
    let secs = t0.elapsed().as_secs_f64();
    hard(
        stat >= STATIC_BAR && moving >= MOVING_BAR - MOVING_TOL,
        format!(
            "static oracle J&F {stat:.4} (need {STATIC_BAR}); moving shapes seed 0 J&F {moving:.4} (bar {MOVING_BAR} +/- {MOVING_TOL}); {secs:.0}s"
        ),
    )
}

fn ablation_direction() -> Outcome {
    let cfg = RunConfig::default();
    let jf = |s: Setting| -> f64 {
        (0..3).map(|seed| run_setting(&cfg, s, seed, ABLATION_BUDGET).expect("ablation run").mean_jf).sum::<f64>() / 3.0
    };
    let d = jf(Setting::BASE);
    let a = jf(Setting { mode: A, ..Setting::BASE });
    let off = jf(Setting { memory: false, ..Setting::BASE });
    let mut flags = Vec::new();
    if d < a {
        flags.push("mode d below mode a");
    }
    if d < off {
        flags.push("memory on below memory off");
    }
    Outcome {
        pass: flags.is_empty(),
        soft: true,
        detail: format!(
            "{ABLATION_BUDGET} iterations, seeds 0-2: mode d {d:.4}, mode a {a:.4}, memory off {off:.4}{}",
            if flags.is_empty() { String::new() } else { format!("; reversed: {}", flags.join(", ")) }
        ),
    }
}

fn small_run_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::tiny();
    cfg.synth = SynthConfig {
        height: 16,
        width: 16,
        frames: 8,
        min_size: 3.0,
        max_size: 4.0,
        max_speed: 1.0,
        ..SynthConfig::default()
    };
    cfg.train.iterations = 20;
    cfg.train.val_every = 10;
    cfg.train_videos = 4;
    cfg.val_videos = 3;
    let path = dir.join("run.json");
    std::fs::write(&path, cfg.to_json()).expect("write config");
    path
}

fn files_under(root: &Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("read dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).expect("prefix").to_path_buf(), std::fs::read(&p).expect("read")));
            }
        }
    }
    out.sort();
    out
}

fn pipeline(root: &Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let cfg = small_run_config(root);
    let c = cfg.to_str().expect("utf-8 path");
    let p = |sub: &str| root.join(sub).to_str().expect("utf-8 path").to_string();
    let steps: Vec<Vec<String>> = vec![
        vec!["gen-data".into(), "--out".into(), p("data")],
        vec!["train".into(), "--data".into(), p("data"), "--out".into(), p("run")],
        vec!["infer".into(), "--checkpoint".into(), p("run/checkpoint.bin"), "--data".into(), p("data/val"), "--out".into(), p("pred")],
        vec!["eval".into(), "--data".into(), p("data/val"), "--pred".into(), p("pred"), "--out".into(), p("eval")],
    ];
    for s in steps {
        let args = ["jointformer", "--config", c].into_iter().map(String::from).chain(s.clone());
        let code = run(args, &mut std::io::sink());
        assert_eq!(code, 0, "{s:?}");
    }
    ["run", "pred", "eval"].iter().flat_map(|d| files_under(&root.join(d))).collect()
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().expect("tmp"), tempfile::tempdir().expect("tmp"));
    let (fa, fb) = (pipeline(a.path()), pipeline(b.path()));
    let has = |ext: &str| fa.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == ext)).count();
    let differing: Vec<String> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    hard(
        fa.len() == fb.len() && differing.is_empty() && has("bin") == 1 && has("pgm") > 0 && has("csv") >= 3,
        format!(
            "{} files ({} checkpoint, {} masks, {} csv) compared, {} differ",
            fa.len(),
            has("bin"),
            has("pgm"),
            has("csv"),
            differing.len()
        ),
    )
}

fn topk_and_scales() -> Outcome {
    let model = Model::init(ModelConfig::default(), 10).expect("model");
    let synth = SynthConfig {
        frames: 9,
        ..SynthConfig::default()
    };
    let video = gen_synthetic_video(11, &synth).expect("video");
    let first = video.labels[0].clone();
    let ids = target_ids(&first);
    let size = video.size();
    let n_tokens = model.cfg.tokens_per_frame();
    let plain = InferenceConfig::default();
    let masks: Vec<Tensor> = ids.iter().map(|&id| binary_mask(&first, id, size)).collect();
    let mut bank = MemoryBank::new(BankEntry { index: 0, frame: video.frames[0].clone(), masks }, 2, 2).expect("bank");
    let mut states = init_state(ids.len(), &model.params.mem_init).expect("state");
    let mut worst: f64 = 0.0;
    for t in 1..video.frames.len() {
        let n_z = bank.slots() * n_tokens;
        let filtered_cfg = InferenceConfig { topk: Some(n_z), ..plain.clone() };
        let a = segment_frame(&model, &bank, &states, &video.frames[t], &plain, false).expect("frame");
        let b = segment_frame(&model, &bank, &states, &video.frames[t], &filtered_cfg, false).expect("frame");
        for (pa, pb) in a.probs.iter().zip(&b.probs) {
            worst = worst.max(pa.max_abs_diff(pb));
        }
        let (h, w) = size;
        let stacked: Vec<f64> = a.probs.iter().flat_map(|p| p.data().iter().copied()).collect();
        let dist = soft_aggregate(&Tensor::new([ids.len(), h, w], stacked).expect("stack"), plain.background_rule).expect("agg");
        let labels = argmax_labels(&dist);
        let next = (1..=ids.len() as u8).map(|c| binary_mask(&labels, c, size)).collect();
        memory_bank_update(&mut bank, BankEntry { index: t, frame: video.frames[t].clone(), masks: next }).expect("update");
        states = a.states;
    }
    let single = InferenceConfig { scales: vec![1.0], mirror: false, ..plain.clone() };
    let bitwise = multi_scale_infer(&model, &video.frames, &first, &single).expect("multi-scale")
        == segment_video(&model, &video.frames, &first, &plain).expect("plain");
    hard(
        worst <= 1e-12 && bitwise,
        format!("top-K with K = N_z: max prob diff {worst:.2e}; scales [1.0] without mirror bitwise equal: {bitwise}"),
    )
}

fn main() {
    // `cargo test` passes harness flags; a name filter selects criteria by number
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "gradient fidelity", gradient_fidelity),
        (2, "mask structure", mask_structure),
        (3, "isolation invariants", isolation),
        (4, "normalization", normalization),
        (5, "metric oracle", metric_oracle),
        (6, "memory-bank policy", bank_policy),
        (7, "toy end-to-end", toy_end_to_end),
        (8, "ablation direction", ablation_direction),
        (9, "determinism", determinism),
        (10, "top-K no-op and single scale", topk_and_scales),
    ];
    let mut failed = 0;
    let mut out = std::io::stdout();
    for (n, name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| x == &n.to_string()) {
            continue;
        }
        let o = f();
        let status = match (o.pass, o.soft) {
            (true, _) => "PASS",
            (false, true) => "FLAG",
            (false, false) => {
                failed += 1;
                "FAIL"
            }
        };
        let _ = writeln!(out, "criterion {n:>2} {status} {name}: {}", o.detail);
        let _ = out.flush();
    }
    if failed > 0 {
        let _ = writeln!(out, "{failed} criteria failed");
        std::process::exit(1);
    }
}
