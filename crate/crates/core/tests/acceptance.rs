//! End-to-end acceptance suite. Prints one `PASS`/`FAIL` line per criterion
//! and exits non-zero if any hard criterion fails.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use slb_core::checkpoint::Checkpoint;
use slb_core::data::{Dataset, Split};
use slb_core::deploy::{binary_conv01, binary_conv_popcount, export, pack_sign_rows, ConvPath, InferenceModel, Padding};
use slb_core::kernels::{conv2d_forward, ConvGeometry};
use slb_core::model::{build, Network, WeightMode, WeightState};
use slb_core::quant::QuantGrid;
use slb_core::schedule::{ScheduleKind, TemperatureSchedule};
use slb_core::search::{normalization_checks, SearchableWeight};
use slb_core::{gradcheck, RunConfig, Tensor, Trainer};

const SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Default)]
struct Outcome {
    failed: Vec<usize>,
    flagged: Vec<usize>,
}

impl Outcome {
    fn report(&mut self, id: usize, ok: bool, hard: bool, title: &str, detail: String) {
        let tag = match (ok, hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FLAG",
        };
        println!("{tag} criterion {id}: {title}: {detail}");
        if !ok {
            if hard {
                self.failed.push(id);
            } else {
                self.flagged.push(id);
            }
        }
    }
}

fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn desk_config() -> RunConfig {
    let mut cfg = RunConfig::load(workspace_root().join("configs/mnist_slb_1w32a.cfg")).expect("desk config");
    if cfg.data_root.is_none() {
        cfg.data_root = Some(slb_core::data::data_root(workspace_root().join("data")));
    }
    // Only the final evaluation is needed here.
    cfg.train.eval_every = 0;
    cfg
}

fn load_split(cfg: &RunConfig, split: Split, subset: usize) -> Result<Dataset, String> {
    let ds = Dataset::load(&cfg.dataset_spec(split)).map_err(|e| {
        format!("MNIST not available under {} ({e}); run scripts/fetch_mnist.sh", cfg.data_root().display())
    })?;
    Ok(if subset > 0 { ds.truncated(subset) } else { ds })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pct(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|a| format!("{:.2}", a * 100.0)).collect();
    format!("[{}]", parts.join(", "))
}

// ---------------------------------------------------------------------------

fn gradient_exactness(out: &mut Outcome) {
    let start = Instant::now();
    let mut checks = Vec::new();
    let mut error = None;
    for r in [gradcheck::slb_search(0), gradcheck::sbn(0), gradcheck::mnist_network(0, 3, 6)] {
        match r {
            Ok(c) => checks.extend(c),
            Err(e) => error = Some(e.to_string()),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0f64, f64::max);
    let coords: usize = checks.iter().map(|c| c.coordinates).sum();
    let ok = error.is_none() && !checks.is_empty() && checks.iter().all(|c| c.max_rel_error < 1e-4) && secs < 60.0;
    let detail = match error {
        Some(e) => format!("error: {e}"),
        None => format!(
            "{} checks, {coords} coordinates, max rel error {worst:.2e} (< 1e-4), {secs:.1} s (< 60 s)",
            checks.len()
        ),
    };
    out.report(1, ok, true, "finite-difference gradients", detail);
}

// ---------------------------------------------------------------------------

/// Random logits with a unique argmax exceeding the runner-up by at least 0.1.
fn logits_with_margin(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let scale = rng.gen_range(0.1..5.0);
    let mut a: Vec<f64> = (0..m).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    let top = rng.gen_range(0..m);
    let others = (0..m).filter(|&i| i != top).map(|i| a[i]).fold(f64::NEG_INFINITY, f64::max);
    a[top] = others + rng.gen_range(0.1..3.0);
    a
}

fn gap_bound(out: &mut Outcome) {
    const N: usize = 10_000;
    // Absolute slack for rounding in softmax and the weighted sum.
    const ROUNDING: f64 = 4.0 * f64::EPSILON;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut violations = 0usize;
    let mut worst_ratio = 0.0f64;
    let mut max_gap_cold = 0.0f64;
    let mut error = None;
    for bits in 1..=4u32 {
        let grid = QuantGrid::uniform(bits).unwrap();
        let m = grid.len();
        let v = grid.values();
        let span = v[m - 1] - v[0];
        let vectors: Vec<Vec<f64>> = (0..N).map(|_| logits_with_margin(&mut rng, m)).collect();
        let mut data = vec![0.0; m * N];
        for (pos, a) in vectors.iter().enumerate() {
            for i in 0..m {
                data[i * N + pos] = a[i];
            }
        }
        let w = SearchableWeight::new(grid.clone(), Tensor::new(vec![m, N], data).unwrap()).unwrap();
        for tau in [1.0, 0.1, 0.01, 0.001] {
            let gap = match w.quantization_gap(tau) {
                Ok(g) => g,
                Err(e) => {
                    error = Some(e.to_string());
                    continue;
                }
            };
            for (a, g) in vectors.iter().zip(gap.data()) {
                let mut sorted = a.clone();
                sorted.sort_by(|x, y| y.total_cmp(x));
                let delta = sorted[0] - sorted[1];
                let bound = (m - 1) as f64 * span * (-delta / tau).exp();
                if g.abs() > bound + ROUNDING {
                    violations += 1;
                }
                if bound > 1e-12 {
                    worst_ratio = worst_ratio.max(g.abs() / bound);
                }
                if tau == 0.001 {
                    max_gap_cold = max_gap_cold.max(g.abs());
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = error.is_none() && violations == 0 && max_gap_cold < 1e-6 && secs < 10.0;
    let detail = match error {
        Some(e) => format!("error: {e}"),
        None => format!(
            "{N} vectors x m in {{2,4,8,16}} x 4 temperatures, {violations} bound violations, \
             max |gap|/bound {worst_ratio:.3} where bound > 1e-12, max |gap| at tau=0.001 {max_gap_cold:.1e} (< 1e-6), {secs:.2} s (< 10 s)"
        ),
    };
    out.report(2, ok, true, "quantization gap bound", detail);
}

// ---------------------------------------------------------------------------

fn normalization(out: &mut Outcome) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    let mut error = None;
    for _ in 0..1000 {
        let bits = rng.gen_range(1..=4u32);
        let grid = QuantGrid::uniform(bits).unwrap();
        let m = grid.len();
        let n = rng.gen_range(1..64);
        let scale = 10f64.powf(rng.gen_range(-2.0..2.0));
        let data: Vec<f64> = (0..m * n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let w = SearchableWeight::new(grid, Tensor::new(vec![m, n], data).unwrap()).unwrap();
        let tau = 10f64.powf(rng.gen_range(-3.0..3.0));
        match w.probabilities(tau) {
            Ok(p) => {
                for pos in 0..n {
                    let s: f64 = (0..m).map(|i| p.data()[i * n + pos]).sum();
                    worst = worst.max((s - 1.0).abs());
                }
            }
            Err(e) => error = Some(e.to_string()),
        }
    }
    let count = normalization_checks();
    let ok = error.is_none() && worst <= 1e-12 && count > 0;
    let detail = match error {
        Some(e) => format!("error: {e}"),
        None => format!(
            "max |sum P - 1| over 1000 random layers {worst:.1e} (<= 1e-12); \
             {count} probability tensors checked in this process, none rejected"
        ),
    };
    out.report(3, ok, true, "probability normalization", detail);
}

// ---------------------------------------------------------------------------

fn scheduler_exactness(out: &mut Outcome) {
    let (ts, te) = (0.01, 10.0);
    let mut problems = Vec::new();
    for kind in [ScheduleKind::Linear, ScheduleKind::Sin, ScheduleKind::Exp] {
        for iterations in [1u64, 2, 7, 100, 781, 10_000, 1_000_000] {
            let s = TemperatureSchedule::new(kind, ts, te, iterations).unwrap();
            let first = s.temperature_at(0).unwrap().t;
            let last = s.temperature_at(iterations).unwrap().t;
            if first != ts || last != te {
                problems.push(format!("{kind:?}/{iterations}: T(0)={first}, T(I)={last}"));
            }
        }
    }
    let want = ts * (te / ts).sqrt();
    let mut worst_mid = 0.0f64;
    for iterations in [2u64, 100, 782, 1_000_000] {
        let s = TemperatureSchedule::new(ScheduleKind::Exp, ts, te, iterations).unwrap();
        let mid = s.temperature_at(iterations / 2).unwrap().t;
        worst_mid = worst_mid.max((mid - want).abs() / want);
    }
    if worst_mid > 4.0 * f64::EPSILON {
        problems.push(format!("exp midpoint relative error {worst_mid:.1e}"));
    }
    let detail = if problems.is_empty() {
        format!("endpoints exact for linear/sin/exp; exp midpoint {want} within {worst_mid:.1e} relative")
    } else {
        problems.join("; ")
    };
    out.report(4, problems.is_empty(), true, "temperature schedules", detail);
}

// ---------------------------------------------------------------------------

/// Direct convolution over all taps; out-of-image taps contribute `pad`.
fn reference_conv(geo: &ConvGeometry, x: &[f64], w: &[f64], pad: Option<f64>) -> Vec<f64> {
    let (c, h, wd) = (geo.in_channels, geo.height, geo.width);
    let (kh, kw) = (geo.kernel_h, geo.kernel_w);
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let mut out = vec![0.0; geo.batch * geo.out_channels * oh * ow];
    for b in 0..geo.batch {
        for o in 0..geo.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                                let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                                let wv = w[((o * c + ci) * kh + ky) * kw + kx];
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += wv * x[((b * c + ci) * h + iy as usize) * wd + ix as usize];
                                } else if let Some(p) = pad {
                                    acc += wv * p;
                                }
                            }
                        }
                    }
                    out[((b * geo.out_channels + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn random_layer(rng: &mut ChaCha8Rng) -> ConvGeometry {
    loop {
        let b = rng.gen_range(1..=2);
        let c = rng.gen_range(1..=24);
        let h = rng.gen_range(1..=9);
        let w = rng.gen_range(1..=9);
        let m = rng.gen_range(1..=6);
        let k = [1, 2, 3, 5][rng.gen_range(0..4)];
        let stride = rng.gen_range(1..=2);
        let padding = rng.gen_range(0..=2);
        if let Ok(geo) = ConvGeometry::new(&[b, c, h, w], &[m, c, k, k], stride, padding) {
            return geo;
        }
    }
}

fn signs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

fn bit_kernel_layers() -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut mismatched = 0;
    let layers = 1000;
    for _ in 0..layers {
        let geo = random_layer(&mut rng);
        let n = geo.patch_len();
        let x = signs(&mut rng, geo.batch * geo.in_channels * geo.height * geo.width);
        let w = signs(&mut rng, geo.out_channels * n);
        let rows = pack_sign_rows(&w, n);

        let got = binary_conv_popcount(&geo, &x, &rows, Padding::Absent).unwrap();
        let want = reference_conv(&geo, &x, &w, None);
        let float = conv2d_forward(&geo, &x, &w);
        let same = got.iter().zip(&want).zip(&float).all(|((&g, &r), &f)| g as f64 == r && r == f);

        let a: Vec<f64> = x.iter().map(|&s| (s + 1.0) / 2.0).collect();
        let got01 = binary_conv01(&geo, &a, &rows).unwrap();
        let want01 = reference_conv(&geo, &a, &w, Some(0.0));
        let same01 = got01.iter().zip(&want01).all(|(&g, &r)| g as f64 == r);

        if !(same && same01 && got.len() == want.len() && got01.len() == want01.len()) {
            mismatched += 1;
        }
    }
    (layers, mismatched)
}

fn max_logit_difference(net: &mut Network, model: &InferenceModel, test: &Dataset, tau: f64) -> Result<f64, String> {
    let idx: Vec<usize> = (0..test.len()).collect();
    let mut worst = 0.0f64;
    for chunk in idx.chunks(500) {
        let (x, _) = test.batch(chunk, None);
        let a = net.predict(&x, WeightState::Discrete, tau).map_err(|e| e.to_string())?;
        let b = model.infer(&x).map_err(|e| e.to_string())?;
        let fb = model.infer_with(&x, ConvPath::Float).map_err(|e| e.to_string())?;
        for ((p, q), r) in a.data().iter().zip(b.data()).zip(fb.data()) {
            worst = worst.max((p - q).abs()).max((p - r).abs());
        }
    }
    Ok(worst)
}

fn exported_round_trip(net: &mut Network, test: &Dataset, tau: f64, dir: &std::path::Path, name: &str) -> Result<(f64, usize), String> {
    let path = dir.join(name);
    export(net, &path).map_err(|e| e.to_string())?;
    let model = InferenceModel::load(&path).map_err(|e| e.to_string())?;
    let diff = max_logit_difference(net, &model, test, tau)?;
    Ok((diff, model.popcount_layers()))
}

fn bit_kernel(out: &mut Outcome, desk: Option<(&mut Network, f64)>, cfg: &RunConfig) {
    let start = Instant::now();
    let (layers, mismatched) = bit_kernel_layers();
    let mut parts = vec![format!("{mismatched}/{layers} random layers differ from the reference")];
    let mut ok = mismatched == 0;

    let deployed = (|| -> Result<Vec<String>, String> {
        let test = load_split(cfg, Split::Test, 0)?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut notes = Vec::new();
        let mut worst = 0.0f64;
        if let Some((net, tau)) = desk {
            let (d, _) = exported_round_trip(net, &test, tau, dir.path(), "desk.slbm")?;
            notes.push(format!("1w32a max |dlogit| {d:.1e}"));
            worst = worst.max(d);
        } else {
            return Err("desk model unavailable".into());
        }
        let mut c = cfg.clone();
        c.q_a = 1;
        c.train_subset = 2000;
        c.train.epochs = 1;
        let train = load_split(&c, Split::Train, c.train_subset)?;
        let net = build(c.arch, c.q_w, c.q_a, WeightMode::Slb, 0).map_err(|e| e.to_string())?;
        let mut t = Trainer::new(net, c.train.clone(), train.len()).map_err(|e| e.to_string())?;
        t.train_epoch(&train).map_err(|e| e.to_string())?;
        let tau = t.current_temperature().map_err(|e| e.to_string())?.tau;
        let (d, pop) = exported_round_trip(&mut t.net, &test, tau, dir.path(), "binary.slbm")?;
        if pop == 0 {
            return Err("1w1a export has no popcount layers".into());
        }
        notes.push(format!("1w1a ({pop} popcount layers) max |dlogit| {d:.1e}"));
        worst = worst.max(d);
        if worst >= 1e-5 {
            return Err(format!("{} exceeds 1e-5", notes.join(", ")));
        }
        notes.push(format!("over {} test images (< 1e-5)", test.len()));
        Ok(notes)
    })();
    match deployed {
        Ok(notes) => parts.extend(notes),
        Err(e) => {
            ok = false;
            parts.push(e);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 300.0;
    parts.push(format!("{secs:.1} s (< 300 s)"));
    out.report(5, ok, true, "xnor-popcount kernel and exported model", parts.join("; "));
}

// ---------------------------------------------------------------------------

struct DeskRun {
    net: Network,
    tau: f64,
    continuous: f64,
    discrete: f64,
    with_continuous_stats: f64,
    frozen: f64,
}

fn desk_run(base: &RunConfig, mode: WeightMode, schedule: ScheduleKind, seed: u64, train: &Dataset, test: &Dataset) -> Result<DeskRun, String> {
    let mut cfg = base.clone();
    cfg.weight_mode = mode;
    cfg.train.schedule = schedule;
    cfg.train.seed = seed;
    match mode {
        WeightMode::Fp32 => {
            cfg.q_w = 32;
            cfg.train.optim.lr_logits = None;
        }
        WeightMode::Ste => cfg.train.optim.lr_logits = None,
        WeightMode::Slb => {}
    }
    cfg.validate().map_err(|e| e.to_string())?;
    let net = build(cfg.arch, cfg.q_w, cfg.q_a, cfg.weight_mode, seed).map_err(|e| e.to_string())?;
    let mut t = Trainer::new(net, cfg.train.clone(), train.len()).map_err(|e| e.to_string())?;
    t.run(train, test, |_| Ok(())).map_err(|e| e.to_string())?;
    let row = t.report.last().cloned().ok_or("no report row")?;
    let mut ablated = t.net.clone();
    ablated.copy_continuous_stats();
    let with_continuous_stats = if t.net.has_search() {
        slb_core::train::evaluate(&mut ablated, test, WeightState::Discrete, row.tau, cfg.train.eval_batch)
            .map_err(|e| e.to_string())?
    } else {
        row.discrete_acc
    };
    eprintln!(
        "  {mode:?} {schedule:?} seed {seed}: continuous {:.4} discrete {:.4} frozen {:.4}",
        row.continuous_acc, row.discrete_acc, row.fraction_frozen
    );
    Ok(DeskRun {
        net: t.net,
        tau: row.tau,
        continuous: row.continuous_acc,
        discrete: row.discrete_acc,
        with_continuous_stats,
        frozen: row.fraction_frozen,
    })
}

fn desk_runs(base: &RunConfig, mode: WeightMode, schedule: ScheduleKind) -> Result<Vec<DeskRun>, String> {
    let train = load_split(base, Split::Train, base.train_subset)?;
    let test = load_split(base, Split::Test, base.eval_subset)?;
    SEEDS.iter().map(|&s| desk_run(base, mode, schedule, s, &train, &test)).collect()
}

fn desk_training(out: &mut Outcome, cfg: &RunConfig) -> Option<Vec<DeskRun>> {
    let start = Instant::now();
    let runs = (|| {
        Ok::<_, String>((
            desk_runs(cfg, WeightMode::Fp32, ScheduleKind::Exp)?,
            desk_runs(cfg, WeightMode::Slb, ScheduleKind::Exp)?,
            desk_runs(cfg, WeightMode::Ste, ScheduleKind::Exp)?,
        ))
    })();
    let secs = start.elapsed().as_secs_f64();
    match runs {
        Ok((fp, slb, ste)) => {
            let acc = |r: &[DeskRun]| r.iter().map(|d| d.discrete).collect::<Vec<_>>();
            let (a_fp, a_slb, a_ste) = (acc(&fp), acc(&slb), acc(&ste));
            let (m_fp, m_slb, m_ste) = (mean(&a_fp), mean(&a_slb), mean(&a_ste));
            let ok = m_slb >= m_fp - 0.015 && m_slb >= m_ste && secs < 1800.0;
            out.report(
                6,
                ok,
                true,
                "desk-scale accuracy",
                format!(
                    "discrete accuracy % fp32 {} mean {:.2}, slb {} mean {:.2}, ste {} mean {:.2}; \
                     slb - fp32 = {:+.2} points (>= -1.5), slb - ste = {:+.2} points (>= 0); {:.0} s (< 1800 s)",
                    pct(&a_fp),
                    m_fp * 100.0,
                    pct(&a_slb),
                    m_slb * 100.0,
                    pct(&a_ste),
                    m_ste * 100.0,
                    (m_slb - m_fp) * 100.0,
                    (m_slb - m_ste) * 100.0,
                    secs
                ),
            );
            Some(slb)
        }
        Err(e) => {
            out.report(6, false, true, "desk-scale accuracy", e);
            None
        }
    }
}

fn sbn_ablation(out: &mut Outcome, slb: Option<&[DeskRun]>) {
    let Some(runs) = slb else {
        out.report(7, false, true, "state batch normalization", "desk-scale SLB runs unavailable".into());
        return;
    };
    let with: Vec<f64> = runs.iter().map(|r| r.discrete).collect();
    let without: Vec<f64> = runs.iter().map(|r| r.with_continuous_stats).collect();
    let gaps: Vec<f64> = runs.iter().map(|r| (r.continuous - r.discrete).abs() * 100.0).collect();
    let frozen: Vec<f64> = runs.iter().map(|r| r.frozen).collect();
    let never_improves = with.iter().zip(&without).all(|(w, wo)| wo <= w);
    let small_gap = gaps.iter().all(|&g| g < 0.2);
    out.report(
        7,
        never_improves && small_gap,
        true,
        "state batch normalization",
        format!(
            "discrete accuracy % with discrete stats {} vs continuous stats {}; \
             continuous/discrete gap points {:?} (< 0.2); frozen fraction {:?}",
            pct(&with),
            pct(&without),
            gaps.iter().map(|g| format!("{g:.2}")).collect::<Vec<_>>(),
            frozen.iter().map(|f| format!("{f:.4}")).collect::<Vec<_>>()
        ),
    );
}

fn schedule_ordering(out: &mut Outcome, cfg: &RunConfig, exp: Option<&[DeskRun]>) {
    let Some(exp) = exp else {
        out.report(8, false, false, "schedule ordering", "desk-scale SLB runs unavailable".into());
        return;
    };
    let runs = (|| {
        Ok::<_, String>((desk_runs(cfg, WeightMode::Slb, ScheduleKind::Linear)?, desk_runs(cfg, WeightMode::Slb, ScheduleKind::Sin)?))
    })();
    match runs {
        Ok((lin, sin)) => {
            let acc = |r: &[DeskRun]| r.iter().map(|d| d.discrete).collect::<Vec<_>>();
            let (a_exp, a_lin, a_sin) = (acc(exp), acc(&lin), acc(&sin));
            let (m_exp, m_lin, m_sin) = (mean(&a_exp), mean(&a_lin), mean(&a_sin));
            let ok = m_exp >= m_lin - 0.003 && m_exp >= m_sin - 0.003;
            out.report(
                8,
                ok,
                false,
                "schedule ordering",
                format!(
                    "discrete accuracy % exp {} mean {:.2}, linear {} mean {:.2}, sin {} mean {:.2}; \
                     exp - linear = {:+.2}, exp - sin = {:+.2} points (>= -0.3)",
                    pct(&a_exp),
                    m_exp * 100.0,
                    pct(&a_lin),
                    m_lin * 100.0,
                    pct(&a_sin),
                    m_sin * 100.0,
                    (m_exp - m_lin) * 100.0,
                    (m_exp - m_sin) * 100.0
                ),
            );
        }
        Err(e) => out.report(8, false, false, "schedule ordering", e),
    }
}

// ---------------------------------------------------------------------------

fn determinism(out: &mut Outcome, base: &RunConfig) {
    let result = (|| -> Result<String, String> {
        let mut cfg = base.clone();
        cfg.train_subset = 1000;
        cfg.eval_subset = 1000;
        cfg.train.epochs = 3;
        cfg.train.eval_every = 1;
        let train = load_split(&cfg, Split::Train, cfg.train_subset)?;
        let test = load_split(&cfg, Split::Test, cfg.eval_subset)?;
        let fresh = || -> Result<Trainer, String> {
            let net = build(cfg.arch, cfg.q_w, cfg.q_a, cfg.weight_mode, cfg.train.seed).map_err(|e| e.to_string())?;
            Trainer::new(net, cfg.train.clone(), train.len()).map_err(|e| e.to_string())
        };
        let mut snapshot = None;
        let mut a = fresh()?;
        a.run(&train, &test, |t| {
            if t.epoch == 1 {
                snapshot = Some(Checkpoint::capture(&cfg, t).to_bytes());
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
        let mut b = fresh()?;
        b.run(&train, &test, |_| Ok(())).map_err(|e| e.to_string())?;
        let (csv_a, csv_b) = (a.report.to_csv(), b.report.to_csv());
        if csv_a != csv_b {
            return Err("two identical runs produced different report CSVs".into());
        }
        let ck = Checkpoint::from_bytes(&snapshot.ok_or("no checkpoint at epoch 1")?).map_err(|e| e.to_string())?;
        let mut c = ck.trainer(train.len()).map_err(|e| e.to_string())?;
        c.run(&train, &test, |_| Ok(())).map_err(|e| e.to_string())?;
        if c.report.to_csv() != csv_a {
            return Err("resumed run report differs from the uninterrupted run".into());
        }
        if c != a {
            return Err("resumed run state differs from the uninterrupted run".into());
        }
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (pa, pc) = (dir.path().join("a.slbm"), dir.path().join("c.slbm"));
        export(&a.net, &pa).map_err(|e| e.to_string())?;
        export(&c.net, &pc).map_err(|e| e.to_string())?;
        if std::fs::read(&pa).ok() != std::fs::read(&pc).ok() {
            return Err("resumed run exports a different model file".into());
        }
        Ok(format!(
            "{} report rows byte-identical across two runs; resume from epoch 1 reproduces the report, \
             all trainer state and the exported model exactly",
            a.report.rows.len()
        ))
    })();
    match result {
        Ok(d) => out.report(9, true, true, "determinism and resume", d),
        Err(e) => out.report(9, false, true, "determinism and resume", e),
    }
}

fn main() -> ExitCode {
    // libtest passes flags such as `--nocapture`; none apply here.
    let mut out = Outcome::default();
    let cfg = desk_config();

    gradient_exactness(&mut out);
    gap_bound(&mut out);
    scheduler_exactness(&mut out);
    eprintln!("desk-scale training (fp32, slb, ste x 3 seeds)");
    let mut slb = desk_training(&mut out, &cfg);
    let desk = slb.as_mut().map(|r| {
        let tau = r[0].tau;
        (&mut r[0].net, tau)
    });
    bit_kernel(&mut out, desk, &cfg);
    sbn_ablation(&mut out, slb.as_deref());
    eprintln!("schedule comparison (linear, sin x 3 seeds)");
    schedule_ordering(&mut out, &cfg, slb.as_deref());
    determinism(&mut out, &cfg);
    normalization(&mut out);

    if out.flagged.is_empty() {
        println!("flagged for investigation: none");
    } else {
        println!("flagged for investigation: criteria {:?}", out.flagged);
    }
    if out.failed.is_empty() {
        println!("acceptance: all hard criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {:?}", out.failed);
        ExitCode::FAILURE
    }
}
