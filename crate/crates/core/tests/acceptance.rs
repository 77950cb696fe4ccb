//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a subset,
//! e.g. `cargo test -p odg-core --test acceptance -- 1 2 3`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use odg_core::backbone::PosteriorVector;
use odg_core::engine::experiment::{
    assemble_tables, mean_std, run, run_cell, sweep_cells, toy_train_config, GridTable, Method, SweepAxis,
    SyntheticTrack,
};
use odg_core::engine::gradcheck::{grad_check, GradCheckConfig, GradComponent};
use odg_core::engine::{checkpoint, h_score, train};
use odg_core::featstats::{restyle, FeatureMap, StatsConfig, StyleStats};
use odg_core::losses::{loss_ce, loss_disc, AugmentedLabel};
use odg_core::openmix::{aggregate_open, FeatAggNet};
use odg_core::params::ParamSet;
use odg_core::stylesynth::{band_hinge, style_margin_loss, synthesize_style, NoiseSpec, StyleBand, StyleSynthNet};
use odg_core::{Model, ModelConfig, Tensor};

const IDENTITY_TOL: f64 = 1e-12;
const MOMENT_TOL: f64 = 1e-5;
const FAST_BUDGET_SECS: f64 = 1.0;
const CE_TOL: f64 = 1e-9;
const DISC_EXAMPLE_TOL: f64 = 1e-15;
const BOUND_SLACK: f64 = 1e-12;
const FUZZ_CASES: usize = 10_000;
const HS_TOL: f64 = 0.01;
const GRAD_TOL: f64 = 1e-4;
const GRAD_MIN_PARAMS: usize = 50;
const GRAD_SAMPLES: usize = 80;
const GRAD_BUDGET_SECS: f64 = 120.0;
const ORDERING_SEEDS: [u64; 3] = [0, 1, 2];
const ORDERING_BUDGET_SECS: f64 = 15.0 * 60.0;
const ERM_GAP: f64 = 10.0;
const MIXSTYLE_SLACK: f64 = 1.0;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// Per-(instance, channel) mean and population std, computed directly.
fn oracle_stats(data: &[f64], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = Vec::with_capacity(n * c);
    let mut std = Vec::with_capacity(n * c);
    for plane in data.chunks(hw).take(n * c) {
        let m = plane.iter().sum::<f64>() / hw as f64;
        let v = plane.iter().map(|x| (x - m).powi(2)).sum::<f64>() / hw as f64;
        mean.push(m);
        std.push(v.sqrt());
    }
    (mean, std)
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_id: f64 = 0.0;
    let mut worst_mm: f64 = 0.0;
    for _ in 0..50 {
        let (n, c) = (rng.gen_range(1..4), rng.gen_range(1..9));
        let (h, w) = (rng.gen_range(2..9), rng.gen_range(2..9));
        let scale = [0.01, 1.0, 50.0][rng.gen_range(0..3)];
        let data: Vec<f64> = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let f = FeatureMap::from_vec([n, c, h, w], data.clone()).unwrap();
        let (m, s) = oracle_stats(&data, n, c, h * w);
        let own = StyleStats::new(n, c, m, s).unwrap();
        let out = restyle(&f, &own, &own, StatsConfig::unguarded()).unwrap();
        for (a, b) in out.data().iter().zip(&data) {
            worst_id = worst_id.max((a - b).abs());
        }
        let tm: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let ts: Vec<f64> = (0..n * c).map(|_| rng.gen_range(0.05..3.0)).collect();
        let target = StyleStats::new(n, c, tm.clone(), ts.clone()).unwrap();
        let out = restyle(&f, &own, &target, StatsConfig::unguarded()).unwrap();
        let (om, os) = oracle_stats(out.data(), n, c, h * w);
        for i in 0..n * c {
            worst_mm = worst_mm.max((om[i] - tm[i]).abs()).max((os[i] - ts[i]).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst_id <= IDENTITY_TOL && worst_mm <= MOMENT_TOL && secs < FAST_BUDGET_SECS,
        format!(
            "identity err {worst_id:.2e} (tol {IDENTITY_TOL:e}), moment err {worst_mm:.2e} (tol {MOMENT_TOL:e}), {secs:.3}s"
        ),
    )
}

fn stats1(mean: f64, std: f64) -> StyleStats {
    StyleStats::new(1, 1, vec![mean], vec![std]).unwrap()
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mu = StyleBand::new(1.5, 3.5).unwrap();
    let sigma = StyleBand::new(0.1, 2.0).unwrap();
    // new mean at distance d from s1; s2 placed so its term is in band.
    let case = |new_mu: f64, s2_mu: f64| {
        style_margin_loss(&stats1(new_mu, 1.0), &stats1(0.0, 0.0), &stats1(s2_mu, 0.0), mu, sigma).unwrap()
    };
    let got = [case(2.0, 0.0), case(1.0, -1.0), case(4.0, 2.0)];
    let hinge = [band_hinge(2.0, 1.5, 3.5), band_hinge(1.0, 1.5, 3.5), band_hinge(4.0, 1.5, 3.5)];
    let want = [0.0, 0.5, 0.5];
    let secs = start.elapsed().as_secs_f64();
    verdict(
        got == want && hinge == want && secs < FAST_BUDGET_SECS,
        format!("loss {got:?}, hinge {hinge:?}, expected {want:?}, {secs:.3}s"),
    )
}

fn random_posterior(rng: &mut ChaCha8Rng, k: usize) -> PosteriorVector {
    if rng.gen_bool(0.1) {
        let mut p = vec![0.0; k];
        p[rng.gen_range(0..k)] = 1.0;
        return PosteriorVector::new(p).unwrap();
    }
    let scale = [0.1, 1.0, 10.0, 100.0][rng.gen_range(0..4)];
    let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    PosteriorVector::new(e.iter().map(|v| v / s).collect()).unwrap()
}

fn criterion_3() -> Verdict {
    let uniform = PosteriorVector::new(vec![1.0 / 6.0; 6]).unwrap();
    let ce = loss_ce(&[uniform], &[AugmentedLabel::known(2, 5).unwrap()]).unwrap();
    let ce_err = (ce - 6f64.ln()).abs();

    let open = PosteriorVector::new(vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let closed = PosteriorVector::new(vec![0.6, 0.1, 0.1, 0.1, 0.0, 0.1]).unwrap();
    let example = loss_disc(&[open], &[closed]).unwrap().value();
    let ex_err = (example + 0.5).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut out_of_bounds = 0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..FUZZ_CASES {
        let k = rng.gen_range(2..=21);
        let n_open = rng.gen_range(0..6);
        let n_closed = rng.gen_range(0..6);
        let open: Vec<_> = (0..n_open).map(|_| random_posterior(&mut rng, k)).collect();
        let closed: Vec<_> = (0..n_closed).map(|_| random_posterior(&mut rng, k)).collect();
        let v = loss_disc(&open, &closed).unwrap().value();
        lo = lo.min(v);
        hi = hi.max(v);
        if !(v >= -1.0 - BOUND_SLACK && v <= (k as f64).ln() + BOUND_SLACK) {
            out_of_bounds += 1;
        }
    }
    verdict(
        ce_err <= CE_TOL && ex_err <= DISC_EXAMPLE_TOL && out_of_bounds == 0,
        format!(
            "CE {ce:.12} (ln 6 err {ce_err:.1e}), example {example}, fuzz {FUZZ_CASES} cases range [{lo:.4}, {hi:.4}], {out_of_bounds} out of bounds"
        ),
    )
}

fn criterion_4() -> Verdict {
    let hs = h_score(73.96, 83.91);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    for _ in 0..FUZZ_CASES {
        let a: f64 = rng.gen_range(0.0..=100.0);
        let b: f64 = rng.gen_range(0.0..=100.0);
        let h = h_score(a, b);
        let oracle = if a > 0.0 && b > 0.0 { 2.0 / (1.0 / a + 1.0 / b) } else { 0.0 };
        let ok = (h - oracle).abs() <= 1e-9 * oracle.max(1.0)
            && (h_score(a, a) - a).abs() <= 1e-12 * a.max(1.0)
            && h_score(a, 0.0) == 0.0
            && h_score(0.0, b) == 0.0
            && h == h_score(b, a)
            && h >= a.min(b) - 1e-12
            && h <= a.max(b) + 1e-12;
        if !ok {
            violations += 1;
        }
    }
    verdict(
        (hs - 78.62).abs() <= HS_TOL && violations == 0,
        format!("hs(73.96, 83.91) = {hs:.4} (target 78.62 ± {HS_TOL}), fuzz {FUZZ_CASES} cases, {violations} violations"),
    )
}

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let cfg = GradCheckConfig {
        samples: GRAD_SAMPLES,
        ..GradCheckConfig::default()
    };
    let groups = [
        GradComponent::Ssnet,
        GradComponent::Fanet,
        GradComponent::Head,
        GradComponent::Losses,
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for c in groups {
        match grad_check(c, cfg) {
            Ok(r) => {
                let checked = r.sampled - r.skipped_kinks;
                pass &= r.max_rel_error < GRAD_TOL && checked >= GRAD_MIN_PARAMS;
                parts.push(format!("{} {:.1e} over {checked}", c.name(), r.max_rel_error));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{}: {e}", c.name()));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        pass && secs < GRAD_BUDGET_SECS,
        format!("{} (tol {GRAD_TOL:e}, >= {GRAD_MIN_PARAMS} params), {secs:.1}s", parts.join(", ")),
    )
}

fn criterion_6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut alpha_bad, mut bracket_bad, mut sigma_bad) = (0, 0, 0);
    let (mut amin, mut amax) = (f64::INFINITY, f64::NEG_INFINITY);
    let per_net = 100;
    for net_i in 0..FUZZ_CASES / per_net {
        let mut ps = ParamSet::new();
        let mut init = ChaCha8Rng::seed_from_u64(net_i as u64);
        let d = rng.gen_range(2..17);
        let fab = FeatAggNet::new(&mut ps, "fab", d, 0.1, &mut init);
        for _ in 0..per_net {
            let n = rng.gen_range(1..5);
            let train_mode = n > 1 && rng.gen_bool(0.5);
            let scale = [0.1, 1.0, 3.0][rng.gen_range(0..3)];
            let mut draw = || Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0) * scale).collect());
            let (e1, e3) = (draw().unwrap(), draw().unwrap());
            let (open, alpha) = aggregate_open(&fab, &ps, &e1, &e3, train_mode).unwrap();
            for (j, &a) in alpha.data().iter().enumerate() {
                amin = amin.min(a);
                amax = amax.max(a);
                if !(a > 0.0 && a < 1.0) {
                    alpha_bad += 1;
                }
                let (x, y, o) = (e1.data()[j], e3.data()[j], open.data()[j]);
                if o < x.min(y) - BOUND_SLACK || o > x.max(y) + BOUND_SLACK {
                    bracket_bad += 1;
                }
            }
        }
        let c = rng.gen_range(1..17);
        let mut ps = ParamSet::new();
        let ssnet = StyleSynthNet::new(&mut ps, "ssnet", c, &mut init);
        for k in 0..per_net {
            let n = rng.gen_range(1..5);
            let mut stats = || {
                let m = (0..n * c).map(|_| rng.gen_range(-5.0..5.0)).collect();
                let s = (0..n * c).map(|_| rng.gen_range(0.0..5.0)).collect();
                StyleStats::new(n, c, m, s).unwrap()
            };
            let (s1, s2) = (stats(), stats());
            let noise = NoiseSpec::new(rng.gen_range(-1.0..1.0), rng.gen_range(0.0..3.0)).unwrap();
            let out = synthesize_style(&ssnet, &ps, &s1, &s2, noise, (net_i * per_net + k) as u64).unwrap();
            sigma_bad += out.std().iter().filter(|v| !(**v >= 0.0)).count();
        }
    }
    verdict(
        alpha_bad == 0 && bracket_bad == 0 && sigma_bad == 0,
        format!(
            "{FUZZ_CASES} mixing cases: alpha range [{amin:.3e}, {amax:.6}], {alpha_bad} outside (0,1), {bracket_bad} unbracketed; {FUZZ_CASES} synthesis forwards: {sigma_bad} negative sigma"
        ),
    )
}

/// Mean hs per method over `ORDERING_SEEDS` on the default synthetic track.
struct OrderingRuns {
    hs: Vec<(Method, Vec<f64>)>,
    secs: Vec<(Method, f64)>,
}

impl OrderingRuns {
    fn mean(&self, m: Method) -> f64 {
        let v = &self.hs.iter().find(|(k, _)| *k == m).expect("method was run").1;
        mean_std(v).0
    }

    fn secs(&self, methods: &[Method]) -> f64 {
        self.secs.iter().filter(|(m, _)| methods.contains(m)).map(|(_, s)| s).sum()
    }

    fn describe(&self, m: Method) -> String {
        let v = &self.hs.iter().find(|(k, _)| *k == m).expect("method was run").1;
        let (mean, sd) = mean_std(v);
        format!("{} {mean:.2}±{sd:.2}", m.name())
    }
}

fn ordering_runs(methods: &[Method]) -> odg_core::Result<OrderingRuns> {
    let track = SyntheticTrack::default();
    let data = track.prepare()?;
    let base = toy_train_config();
    let mut hs = Vec::new();
    let mut secs = Vec::new();
    for &m in methods {
        let start = Instant::now();
        let mut v = Vec::new();
        for seed in ORDERING_SEEDS {
            let model = ModelConfig::toy(data.num_known, track.spec.image_size, seed);
            let mut cfg = m.apply(&base);
            cfg.seed = seed;
            let t = Instant::now();
            let r = run(&data, &model, &cfg)?;
            let a = r.report.average;
            println!(
                "    {:<10} seed {seed}  acc_k {:6.2}  acc_u {:6.2}  hs {:6.2}  ({:.1}s)",
                m.name(),
                a.acc_k,
                a.acc_u,
                a.hs,
                t.elapsed().as_secs_f64()
            );
            v.push(a.hs);
        }
        hs.push((m, v));
        secs.push((m, start.elapsed().as_secs_f64()));
    }
    Ok(OrderingRuns { hs, secs })
}

fn criterion_7(runs: &OrderingRuns, known: usize) -> Verdict {
    let full = runs.mean(Method::Full);
    let no_disc = runs.mean(Method::NoDisc);
    let erm = runs.mean(Method::Erm);
    // Uniform guessing over the C+1 outputs scores 100/(C+1) on both accuracies.
    let chance = 100.0 / (known + 1) as f64;
    let floor = erm.max(chance);
    let secs = runs.secs(&[Method::Full, Method::NoDisc, Method::Erm]);
    verdict(
        full > no_disc && no_disc > floor && full >= erm + ERM_GAP && secs <= ORDERING_BUDGET_SECS,
        format!(
            "{}, {}, {}; floor max(erm, chance {chance:.2}) = {floor:.2}; gap to erm {:.2} (need {ERM_GAP}); {:.0}s of {ORDERING_BUDGET_SECS:.0}s",
            runs.describe(Method::Full),
            runs.describe(Method::NoDisc),
            runs.describe(Method::Erm),
            full - erm,
            secs
        ),
    )
}

fn criterion_8(runs: &OrderingRuns) -> Verdict {
    let ssb = runs.mean(Method::Full);
    let mix = runs.mean(Method::Mixstyle);
    verdict(
        ssb >= mix - MIXSTYLE_SLACK,
        format!(
            "ssb {:.2} vs {} (need ssb >= mixstyle - {MIXSTYLE_SLACK})",
            ssb,
            runs.describe(Method::Mixstyle)
        ),
    )
}

fn complete(t: &GridTable, rows: usize, cols: usize) -> bool {
    t.row_labels.len() == rows
        && t.col_labels.len() == cols
        && t.mean.iter().flatten().all(|v| v.is_some_and(f64::is_finite))
}

/// Sweep mechanics on a reduced schedule: every cell must train, evaluate and
/// land in its table.
fn criterion_9() -> odg_core::Result<Verdict> {
    let track = SyntheticTrack {
        n_per_class: 12,
        ..SyntheticTrack::default()
    };
    let model = ModelConfig::toy(track.known.len(), track.spec.image_size, 0);
    let mut train_cfg = toy_train_config();
    train_cfg.epochs = 4;
    train_cfg.pretrain_epochs = 1;
    train_cfg.batch_size = 24;
    let mut tables = Vec::new();
    for axis in [SweepAxis::MarginBands, SweepAxis::SplitDepth, SweepAxis::FabVsAdhoc] {
        let cells = sweep_cells(axis, &model, &train_cfg);
        let results = cells.iter().map(|c| run_cell(c, &track, 0)).collect::<odg_core::Result<Vec<_>>>()?;
        tables.push(assemble_tables(axis, &cells, &results));
    }
    let [margin, depth, fab] = [&tables[0], &tables[1], &tables[2]];
    let margin_ok = margin.len() == 2 && margin.iter().all(|t| complete(t, 5, 5));
    let depth_ok = depth.iter().all(|t| complete(t, 1, 3));
    let baselines = ["half-crop", "pixel-mean", "patch-replace"];
    let fab_ok = fab.iter().all(|t| complete(t, 1, 4))
        && baselines.iter().all(|b| fab[1].col_labels.iter().any(|c| c == b));
    let half = fab[1].get("synthetic", "half-crop");
    for t in margin.iter().chain(depth).chain(fab).filter(|t| t.title.ends_with(" hs")) {
        for line in t.to_text().lines() {
            println!("    {line}");
        }
    }
    Ok(verdict(
        margin_ok && depth_ok && fab_ok && half.is_some(),
        format!(
            "margin 5x5 acc+hs {margin_ok}, depth 3 columns {depth_ok}, fab vs 3 baselines {fab_ok}, half-crop hs {}",
            half.map_or("missing".into(), |h| format!("{h:.2}"))
        ),
    ))
}

fn criterion_10() -> odg_core::Result<Verdict> {
    let track = SyntheticTrack {
        n_per_class: 8,
        ..SyntheticTrack::default()
    };
    let data = track.prepare()?;
    let mut cfg = toy_train_config();
    cfg.epochs = 2;
    cfg.pretrain_epochs = 1;
    cfg.batch_size = 16;
    cfg.seed = 10;
    let dir = tempfile::tempdir()?;
    let train_once = |name: &str| -> odg_core::Result<(Vec<u8>, Model)> {
        let mut m = Model::new(ModelConfig::toy(data.num_known, track.spec.image_size, 10))?;
        train(&mut m, &data.source, &cfg, |_, _| Ok(()))?;
        let p = dir.path().join(name);
        checkpoint::save(&m, Some(&cfg), &p)?;
        Ok((std::fs::read(&p)?, m))
    };
    let (a, _) = train_once("a.ckpt")?;
    let (b, _) = train_once("b.ckpt")?;
    let init = Model::new(ModelConfig::toy(data.num_known, track.spec.image_size, 10))?;
    let untouched = init.params.entries().iter().zip(
        checkpoint::load(&dir.path().join("a.ckpt"))?.0.params.entries().to_vec(),
    )
    .all(|(x, y)| x.value == y.value);
    Ok(verdict(
        a == b && !untouched,
        format!("{} bytes each, identical {}, weights moved from init {}", a.len(), a == b, !untouched),
    ))
}

fn main() {
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .filter_map(|a| a.parse().ok())
        .collect();
    let want = |i: usize| only.is_empty() || only.contains(&i);
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut record = |i: usize, name: &'static str, v: Verdict| {
        println!("{} criterion {i:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((i, name, v));
    };
    let or_fail = |r: odg_core::Result<Verdict>| r.unwrap_or_else(|e| verdict(false, format!("error: {e}")));

    if want(1) {
        record(1, "restyle identity and moment matching", criterion_1());
    }
    if want(2) {
        record(2, "style margin hand cases", criterion_2());
    }
    if want(3) {
        record(3, "cross-entropy and discriminability loss", criterion_3());
    }
    if want(4) {
        record(4, "h-score", criterion_4());
    }
    if want(5) {
        record(5, "gradient checks", criterion_5());
    }
    if want(6) {
        record(6, "mixing and synthesis bounds", criterion_6());
    }
    if want(7) || want(8) {
        let mut methods = Vec::new();
        if want(7) {
            methods.extend([Method::Full, Method::NoDisc, Method::Erm]);
        }
        if want(8) {
            if !methods.contains(&Method::Full) {
                methods.push(Method::Full);
            }
            methods.push(Method::Mixstyle);
        }
        match ordering_runs(&methods) {
            Ok(runs) => {
                if want(7) {
                    record(7, "synthetic ordering", criterion_7(&runs, SyntheticTrack::default().known.len()));
                }
                if want(8) {
                    record(8, "style synthesis vs mixstyle", criterion_8(&runs));
                }
            }
            Err(e) => {
                for (i, name) in [(7, "synthetic ordering"), (8, "style synthesis vs mixstyle")] {
                    if want(i) {
                        record(i, name, verdict(false, format!("error: {e}")));
                    }
                }
            }
        }
    }
    if want(9) {
        record(9, "ablation grid mechanics", or_fail(criterion_9()));
    }
    if want(10) {
        record(10, "checkpoint determinism", or_fail(criterion_10()));
    }

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
