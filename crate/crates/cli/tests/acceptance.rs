//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Criteria that need a trained model share one 5000-step checkpoint.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use serde_json::json;

use emag_core::attention_guidance::{beta_from_halflife, select_layer, Branch, EmaState, GuidanceWindow, LayerRange};
use emag_core::guidance::combinators::*;
use emag_core::metrics::{frechet_gaussian, hopfield_energy, hopfield_update, prdc, HopfieldInstance, MetricReport};
use emag_core::model::checkpoint;
use emag_core::model::data::Dataset;
use emag_core::model::train::{train, TrainConfig};
use emag_core::rng::NoiseStream;
use emag_core::sampler::dump;
use emag_core::{
    run_sampler, GuidanceConfig, GuidanceMode, ModelConfig, NoiseSchedule, Prediction, SamplerTrajectory, Tensor,
    ToyModelParams,
};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Shared {
    model: ToyModelParams,
    checkpoint: PathBuf,
    _tmp: tempfile::TempDir,
}

fn shared() -> Shared {
    let dataset = Dataset::generate(1024, 0);
    let (model, report) = train(&dataset, ModelConfig::new(Prediction::Eps), &TrainConfig::new(5000), 0)
        .expect("training the shared model");
    let (first, last) = (report.curve[0].1, report.curve.last().unwrap().1);
    println!("# trained shared model: held-out loss {first:.4} -> {last:.4}");
    let tmp = tempfile::tempdir().unwrap();
    let checkpoint = tmp.path().join("checkpoint");
    checkpoint::save(&model, 0, json!({"steps": 5000}), &checkpoint).unwrap();
    Shared {
        model,
        checkpoint,
        _tmp: tmp,
    }
}

fn sample(m: &ToyModelParams, g: &GuidanceConfig, labels: &[Option<usize>], seed: u64) -> SamplerTrajectory {
    run_sampler(m, None, &NoiseSchedule::vp(50).unwrap(), g, labels, seed).expect("sampling")
}

fn ema_oracle() -> Outcome {
    let start = Instant::now();
    let beta = 0.988;
    let mut rng = NoiseStream::new(7, 0);
    let inputs: Vec<Tensor> = (0..100).map(|_| rng.normal_tensor([2, 3, 4])).collect();
    let mut state = EmaState::new(beta).unwrap();
    let mut worst = 0.0f64;
    for n in 0..inputs.len() {
        let incremental = state.update(0, Branch::Conditional, &inputs[n]).unwrap().clone();
        // E_n = beta^n A_0 + sum_{k=1..n} (1-beta) beta^(n-k) A_k
        let closed = Tensor::from_fn([2, 3, 4], |i| {
            let mut v = beta.powi(n as i32) * inputs[0].data()[i];
            for k in 1..=n {
                v += (1.0 - beta) * beta.powi((n - k) as i32) * inputs[k].data()[i];
            }
            v
        });
        worst = worst.max(incremental.max_abs_diff(&closed).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 1e-10 && secs < 1.0, format!("max abs err {worst:.2e}, {secs:.3}s"))
}

fn halflife_law() -> Outcome {
    let mut ratios = Vec::new();
    for h in [1usize, 10, 50] {
        let beta = beta_from_halflife(h as f64).unwrap();
        let mut state = EmaState::new(beta).unwrap();
        let target = Tensor::full([4], 2.0);
        state.update(0, Branch::Conditional, &Tensor::full([4], -3.0)).unwrap();
        let gap0 = 5.0;
        for _ in 0..h {
            state.update(0, Branch::Conditional, &target).unwrap();
        }
        let gap = (state.get(0, Branch::Conditional).unwrap().data()[0] - 2.0).abs();
        ratios.push(gap / gap0);
    }
    let ok = ratios.iter().all(|r| (r - 0.5).abs() <= 1e-9);
    check(ok, format!("ratios {ratios:?}"))
}

fn reductions(s: &Shared) -> Outcome {
    let labels: Vec<Option<usize>> = (0..4).map(|i| Some(i % 2)).collect();
    let cfg = GuidanceConfig::new(GuidanceMode::Cfg);
    let mut lambda0 = GuidanceConfig::new(GuidanceMode::Emag);
    lambda0.lambda = 0.0;
    let mut unit = GuidanceConfig::new(GuidanceMode::Emag);
    unit.w_e = Some(1.0);
    let mut empty = GuidanceConfig::new(GuidanceMode::Emag);
    empty.window = Some(GuidanceWindow {
        start: 21,
        end: 20,
        warmup: 0,
    });
    let mut failures = Vec::new();
    for seed in 0..4 {
        let base = sample(&s.model, &cfg, &labels, seed);
        for (name, g) in [("lambda=0", &lambda0), ("w_e=1", &unit), ("empty window", &empty)] {
            let t = sample(&s.model, g, &labels, seed);
            let same = t.samples.bit_eq(&base.samples)
                && t.steps.iter().zip(&base.steps).all(|(a, b)| a.combined.bit_eq(&b.combined));
            if !same {
                failures.push(format!("{name} seed {seed}"));
            }
        }
    }
    check(failures.is_empty(), format!("3 reductions x 4 seeds, mismatches: {failures:?}"))
}

fn layer_selection() -> Outcome {
    let mut rng = NoiseStream::new(11, 0);
    let mut ties = 0;
    for case in 0..1000 {
        let lo = rng.below(3);
        let hi = lo + rng.below(4);
        let range = LayerRange::new(lo, hi).unwrap();
        // Small integer values force frequent ties.
        let deltas: BTreeMap<usize, f64> = (0..8).map(|l| (l, rng.below(4) as f64 * 0.25)).collect();
        let mut best = lo;
        for l in lo..=hi {
            if deltas[&l] > deltas[&best] {
                best = l;
            }
        }
        let maxv = deltas[&best];
        if (lo..=hi).filter(|l| deltas[l] == maxv).count() > 1 {
            ties += 1;
        }
        let got = select_layer(&deltas, range).unwrap();
        if got != best {
            return Err(format!("case {case}: got {got}, brute force {best}"));
        }
    }
    check(ties > 0, format!("1000 maps agree, {ties} with ties"))
}

fn parse_cell(s: &str) -> Option<f64> {
    (!s.is_empty()).then(|| s.parse().expect("numeric cell"))
}

fn offline_conformance(s: &Shared) -> Outcome {
    let (w_cfg, w_e) = (3.0, 1.75);
    let mut g = GuidanceConfig::new(GuidanceMode::Emag);
    g.w_cfg = w_cfg;
    g.w_e = Some(w_e);
    let labels: Vec<Option<usize>> = (0..4).map(|i| Some(i % 2)).collect();
    let traj = sample(&s.model, &g, &labels, 5);
    let tmp = tempfile::tempdir().unwrap();
    dump::write_trajectory(&traj, tmp.path(), g.lambda, g.resolved_beta().unwrap()).unwrap();
    let index = dump::read_index(tmp.path()).unwrap();
    let (mut worst, mut rows, mut perturbed_rows) = (0.0f64, 0usize, 0usize);
    for step in &index.steps {
        let text = std::fs::read_to_string(tmp.path().join(&step.file)).unwrap();
        for line in text.lines().skip(1) {
            let c: Vec<&str> = line.split(',').collect();
            let (u, cond) = (parse_cell(c[3]).unwrap(), parse_cell(c[4]).unwrap());
            let logged = parse_cell(c[7]).unwrap();
            let guided_cond = match parse_cell(c[5]) {
                Some(p) => {
                    perturbed_rows += 1;
                    p + w_e * (cond - p)
                }
                None => cond,
            };
            let recomputed = u + w_cfg * (guided_cond - u);
            worst = worst.max((recomputed - logged).abs());
            rows += 1;
        }
    }
    check(
        worst <= 1e-12 && perturbed_rows > 0,
        format!("{rows} logged values, {perturbed_rows} perturbed, max err {worst:.2e}"),
    )
}

fn hopfield() -> Outcome {
    let mut rng = NoiseStream::new(13, 0);
    let mut worst_rise = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let d = 1 + rng.below(8);
        let n = 1 + rng.below(16);
        let beta = 0.1 + 4.0 * rng.uniform();
        let mut inst =
            HopfieldInstance::new(rng.normal_tensor([d, n]), rng.normal_tensor([d]).into_data(), beta).unwrap();
        for _ in 0..3 {
            let before = hopfield_energy(&inst);
            inst.state = hopfield_update(&inst);
            worst_rise = worst_rise.max(hopfield_energy(&inst) - before);
        }
    }
    let mut single_ok = true;
    let mut worst_zero = 0.0f64;
    for _ in 0..100 {
        let d = 1 + rng.below(8);
        let x = rng.normal_tensor([d]).into_data();
        let start = rng.normal_tensor([d]).into_data();
        let inst = HopfieldInstance::new(Tensor::new([d, 1], x.clone()).unwrap(), start, 1.5).unwrap();
        single_ok &= hopfield_update(&inst) == x;
        let at = HopfieldInstance::new(Tensor::new([d, 1], x.clone()).unwrap(), x, 1.5).unwrap();
        worst_zero = worst_zero.max(hopfield_energy(&at).abs());
    }
    check(
        worst_rise <= 1e-8 && single_ok && worst_zero <= 1e-10,
        format!("max energy rise {worst_rise:.2e}, N=1 exact retrieval {single_ok}, |E(x_1)| {worst_zero:.2e}"),
    )
}

/// Mean attention entropy of layers 1..=2 over the first and last quarters.
fn entropy_quarters(traj: &SamplerTrajectory) -> (f64, f64) {
    let per_step: Vec<f64> = traj.steps.iter().map(|s| (s.entropy[1] + s.entropy[2]) / 2.0).collect();
    let q = per_step.len() / 4;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (mean(&per_step[..q]), mean(&per_step[per_step.len() - q..]))
}

fn entropy_trend(s: &Shared) -> Outcome {
    let start = Instant::now();
    let g = GuidanceConfig::new(GuidanceMode::Cfg);
    let mut lower = 0;
    let mut gaps = Vec::new();
    for seed in 0..32u64 {
        let traj = sample(&s.model, &g, &[Some(seed as usize % 2)], 100 + seed);
        let (early, late) = entropy_quarters(&traj);
        gaps.push(early - late);
        if late < early {
            lower += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    check(
        lower >= 28 && secs < 300.0,
        format!("{lower}/32 trajectories sharpen, mean drop {mean_gap:.4} nats, {secs:.1}s"),
    )
}

fn hardness_knob(s: &Shared) -> Outcome {
    let lambdas = [0.0, 0.25, 0.5, 0.75, 1.0];
    let mut means = Vec::new();
    for &lambda in &lambdas {
        let mut g = GuidanceConfig::new(GuidanceMode::Emag);
        g.lambda = lambda;
        let (mut sum, mut count) = (0.0, 0usize);
        for seed in 0..32u64 {
            let traj = sample(&s.model, &g, &[Some(seed as usize % 2)], 200 + seed);
            for step in &traj.steps {
                if let (Some(c), Some(p)) = (&step.preds.eps_cond, &step.preds.eps_cond_perturbed) {
                    sum += c.zip_map(p, |a, b| (a - b).abs()).unwrap().mean();
                    count += 1;
                }
            }
        }
        means.push(sum / count.max(1) as f64);
    }
    let monotone = means.windows(2).all(|w| w[1] >= w[0]);
    let max = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ok = monotone && means[0] == 0.0 && means[4] == max && means[4] > 0.0;
    let shown: Vec<String> = means.iter().map(|m| format!("{m:.3e}")).collect();
    check(ok, format!("mean MAE over lambda grid [{}]", shown.join(", ")))
}

fn brute_radii(x: &[&[f64]], k: usize) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, a)| {
            let mut d: Vec<f64> = x
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| dist(a, b))
                .collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn metrics_oracles() -> Outcome {
    let mut rng = NoiseStream::new(17, 0);
    let a = rng.normal_tensor([40, 3]);
    let same = prdc(&a, &a, 5).unwrap();
    let fd_same = frechet_gaussian(&a, &a).unwrap();
    let identical = same.precision == 1.0 && same.recall == 1.0 && same.coverage == 1.0 && fd_same.abs() <= 1e-8;

    let mut brute_ok = true;
    for trial in 0..20 {
        let real = rng.normal_tensor([20, 2]);
        let fake = rng.normal_tensor([20, 2]).map(|v| v * 1.3 + 0.2 * trial as f64 / 20.0);
        let k = 3;
        let got = prdc(&real, &fake, k).unwrap();
        let r: Vec<&[f64]> = real.rows().collect();
        let f: Vec<&[f64]> = fake.rows().collect();
        let (rr, fr) = (brute_radii(&r, k), brute_radii(&f, k));
        let inside = |fj: &[f64]| r.iter().zip(&rr).filter(|(ri, rad)| dist(ri, fj) < **rad).count();
        let precision = f.iter().filter(|fj| inside(fj) > 0).count() as f64 / 20.0;
        let density = f.iter().map(|fj| inside(fj)).sum::<usize>() as f64 / (k * 20) as f64;
        let recall = r
            .iter()
            .filter(|ri| f.iter().zip(&fr).any(|(fj, rad)| dist(ri, fj) < *rad))
            .count() as f64
            / 20.0;
        let coverage = r
            .iter()
            .zip(&rr)
            .filter(|(ri, rad)| f.iter().any(|fj| dist(ri, fj) < **rad))
            .count() as f64
            / 20.0;
        brute_ok &= got.precision == precision
            && got.recall == recall
            && (got.density - density).abs() <= 1e-12
            && got.coverage == coverage;
    }

    let x = rng.normal_tensor([50, 1]).map(|v| 0.7 * v + 1.0);
    let y = rng.normal_tensor([60, 1]).map(|v| 1.9 * v - 0.5);
    let moments = |t: &Tensor| {
        let n = t.numel() as f64;
        let m = t.mean();
        let var = t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, var.sqrt())
    };
    let ((m1, s1), (m2, s2)) = (moments(&x), moments(&y));
    let closed = (m1 - m2).powi(2) + (s1 - s2).powi(2);
    let fd_err = (frechet_gaussian(&x, &y).unwrap() - closed).abs();
    check(
        identical && brute_ok && fd_err <= 1e-10,
        format!("identical sets {identical} (FD {fd_same:.1e}), brute PRDC agrees {brute_ok}, 1-D FD err {fd_err:.1e}"),
    )
}

fn guidance_algebra() -> Outcome {
    let mut rng = NoiseStream::new(19, 0);
    let a = rng.normal_tensor([3, 5]);
    let b = rng.normal_tensor([3, 5]);
    let c = rng.normal_tensor([3, 5]);
    let mut exact = vec![
        ("cfg w=0", cfg_combine(&a, &b, 0.0).unwrap().bit_eq(&a)),
        ("cfg w=1", cfg_combine(&a, &b, 1.0).unwrap().bit_eq(&b)),
        ("cfg equal", cfg_combine(&a, &a, 4.2).unwrap().bit_eq(&a)),
        ("autoguidance w=1", autoguidance_combine(&a, &b, 1.0).unwrap().bit_eq(&b)),
        ("autoguidance w=0", autoguidance_combine(&a, &b, 0.0).unwrap().bit_eq(&a)),
        ("pag w=0", pag_combine(&a, &b, 0.0).unwrap().bit_eq(&a)),
        ("pag equal", pag_combine(&a, &a, 3.0).unwrap().bit_eq(&a)),
        ("contrast equal", add_contrast(&c, &a, &a, 2.0).unwrap().bit_eq(&c)),
        ("emag uncond w_e=1", emag_unconditional(&a, &b, 1.0).unwrap().bit_eq(&a)),
    ];
    let preds = BranchPredictions {
        eps_uncond: Some(a.clone()),
        eps_cond: Some(b.clone()),
        eps_cond_perturbed: Some(c.clone()),
        eps_uncond_perturbed: None,
    };
    exact.push((
        "emag cond w_e=1",
        emag_conditional(&preds, 1.0, 3.0).unwrap().bit_eq(&cfg_combine(&a, &b, 3.0).unwrap()),
    ));
    exact.push(("s2 s=0", s2_combine(&a, &b, 0.0).unwrap().bit_eq(&a)));
    let broken: Vec<&str> = exact.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();

    let (mut orth, mut recon) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = 1 + rng.below(16);
        let v = rng.normal_tensor([n]).into_data();
        let r = rng.normal_tensor([n]).into_data();
        let (par, perp) = apg_decompose(&v, &r);
        let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let pn = perp.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
        orth = orth.max((perp.iter().zip(&r).map(|(p, q)| p * q).sum::<f64>() / (rn * pn)).abs());
        for i in 0..n {
            recon = recon.max((par[i] + perp[i] - v[i]).abs());
        }
    }
    check(
        broken.is_empty() && orth <= 1e-10 && recon <= 1e-10,
        format!(
            "{} exact reductions (failing {broken:?}), orthogonality {orth:.1e}, reconstruction {recon:.1e}",
            exact.len()
        ),
    )
}

fn cli_determinism(s: &Shared) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("sample.json");
    let body = json!({
        "seed": 9,
        "schedule": {"kind": "vp"},
        "guidance": {"mode": "emag"},
        "sampling": {"checkpoint": s.checkpoint.to_str().unwrap(), "samples": 8}
    });
    std::fs::write(&cfg, body.to_string()).unwrap();
    let run = |root: &Path| -> PathBuf {
        let o = Command::new(env!("CARGO_BIN_EXE_emag-lab"))
            .arg("sample")
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(root)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        PathBuf::from(String::from_utf8(o.stdout).unwrap().trim())
    };
    let (a, b) = (run(&tmp.path().join("a")), run(&tmp.path().join("b")));
    let mut same = Vec::new();
    for f in [dump::SAMPLES, dump::DIAGNOSTICS, dump::INDEX, dump::ENTROPY] {
        same.push(std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());
    }
    check(same.iter().all(|x| *x), format!("samples/diagnostics/index/entropy identical: {same:?}"))
}

fn smoke_quality(s: &Shared) -> Outcome {
    let labels: Vec<Option<usize>> = (0..256).map(|i| Some(i % 2)).collect();
    let reference = Dataset::generate(512, 1).images;
    let report = |g: &GuidanceConfig| {
        let traj = sample(&s.model, g, &labels, 42);
        let r = MetricReport::compute(&reference, &traj.samples, 5, Vec::new()).unwrap();
        (r, traj)
    };
    let (plain, _) = report(&GuidanceConfig::new(GuidanceMode::None));
    let (cfg, _) = report(&GuidanceConfig::new(GuidanceMode::Cfg));
    let mut emag_g = GuidanceConfig::new(GuidanceMode::Emag);
    emag_g.w_cfg = 3.0;
    emag_g.w_e = Some(1.75);
    let (emag, traj) = report(&emag_g);
    let finite = [emag.frechet, emag.precision, emag.recall, emag.density, emag.coverage]
        .iter()
        .all(|v| v.is_finite());
    let chosen: Vec<usize> = traj.decisions().filter(|d| d.replace).map(|d| d.selected).collect();
    let switches = chosen.windows(2).filter(|w| w[0] != w[1]).count();
    let frac = switches as f64 / chosen.len().saturating_sub(1).max(1) as f64;
    check(
        cfg.frechet < plain.frechet && finite && frac > 0.0,
        format!(
            "Frechet none {:.4} / cfg {:.4} / emag {:.4}, layer switches {switches}/{} replaced steps ({frac:.2})",
            plain.frechet,
            cfg.frechet,
            emag.frechet,
            chosen.len()
        ),
    )
}

fn main() {
    let start = Instant::now();
    let s = shared();
    let criteria: Vec<Criterion> = vec![
        ("01 ema closed form", Box::new(ema_oracle)),
        ("02 halflife law", Box::new(halflife_law)),
        ("03 end-to-end reductions", Box::new(|| reductions(&s))),
        ("04 layer selection", Box::new(layer_selection)),
        ("05 offline recomputation", Box::new(|| offline_conformance(&s))),
        ("06 hopfield energy", Box::new(hopfield)),
        ("07 entropy trend", Box::new(|| entropy_trend(&s))),
        ("08 hardness knob", Box::new(|| hardness_knob(&s))),
        ("09 prdc and frechet", Box::new(metrics_oracles)),
        ("10 guidance algebra", Box::new(guidance_algebra)),
        ("11 sample determinism", Box::new(|| cli_determinism(&s))),
        ("12 smoke quality", Box::new(|| smoke_quality(&s))),
    ];
    let mut failed = 0;
    for (name, f) in &criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d}");
            }
        }
    }
    println!(
        "{} passed, {failed} failed in {:.1}s",
        criteria.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
