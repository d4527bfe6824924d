//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 1 to 8 are contracts and any failure exits nonzero. Criteria
//! 9 to 12 measure trained models; their lines are reported as measured and
//! only gate the exit code with `ACCEPTANCE_STRICT=1`, or when the recipe
//! itself errors.
//!
//! Criteria 9 to 12 share one run of the desk-scale recipe (about half an
//! hour on one core). Set `ACCEPTANCE_TRAIN_SEQUENCES` to shrink it for a
//! quick look; the criteria still require 100.

mod common;

use std::time::Instant;

use adaptive_depth::data::{kitti_decode_depth, kitti_encode_depth};
use adaptive_depth::depth::{depth_histogram, mae, rmse};
use adaptive_depth::mask::{harden_topk, sample_loss, sample_loss_grad, soft_argmax, sparse_budget_select};
use adaptive_depth::nn::models::{CompletionTask, ReferenceCompletion};
use adaptive_depth::nn::tensor::Tensor;
use adaptive_depth::pipeline::recipe::{run_recipe, RecipeConfig, RecipeOutcome};
use adaptive_depth::pipeline::{
    mix_and_match_eval, run_end_to_end, stage2_train_sampler, stage3_joint_finetune, Branch, E2EConfig,
    E2EModels, PriorSource, Stage, Trace,
};
use adaptive_depth::priors::PriorMode;
use adaptive_depth::rng;
use adaptive_depth::{DepthMap, DepthSequence, ProbabilityMap, SampleMask, SamplingBudget, Temperature};
use common::*;
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn c1_soft_argmax_oracle() -> Outcome {
    let clock = Instant::now();
    let mut r = rng::seeded(1);
    let mut worst = 0f64;
    for beta in [0.5, 1.0, 4.0] {
        let skip: Vec<f32> = (0..1000).map(|_| r.random_range(-10.0..10.0)).collect();
        let sample: Vec<f32> = (0..1000).map(|_| r.random_range(-10.0..10.0)).collect();
        let p = ProbabilityMap::from_channels(1, 1000, &skip, &sample).map_err(|e| e.to_string())?;
        let m = soft_argmax(&p, Temperature::new(beta).unwrap()).map_err(|e| e.to_string())?;
        for i in 0..1000 {
            let (a, b) = (beta * skip[i] as f64, beta * sample[i] as f64);
            let hi = a.max(b);
            let oracle = (b - hi).exp() / ((a - hi).exp() + (b - hi).exp());
            worst = worst.max((m.values()[i] as f64 - oracle).abs());
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    check(
        worst < 1e-6 && secs < 1.0,
        format!("max deviation {worst:.2e} over 3000 pixels in {secs:.3}s"),
        format!("max deviation {worst:.2e}, {secs:.3}s"),
    )
}

fn c2_sample_loss_contract() -> Outcome {
    let k = 8;
    let b = SamplingBudget::new(k).unwrap();
    let mask = |total: f32| SampleMask::soft(4, 4, vec![total / 16.0; 16], k).unwrap();
    let values: Vec<f64> = [0.0, 4.0, 16.0].iter().map(|&t| sample_loss(&mask(t), b)).collect();
    let at_k = sample_loss(&mask(8.0), b);
    let off = sample_loss(&mask(8.5), b);
    check(
        values == [1.0, 0.5, 1.0] && at_k == 0.0 && off > 0.0,
        format!("|M| in {{0, k/2, 2k}} -> {values:?}; |M| = k -> {at_k}"),
        format!("got {values:?}, at k {at_k}, off budget {off}"),
    )
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn c3_gradient_checks() -> Outcome {
    let clock = Instant::now();
    let mut r = rng::seeded(3);
    // d sample_loss / dM
    let mut worst_sample = 0f64;
    for _ in 0..20 {
        let v: Vec<f32> = (0..H * W).map(|_| r.random_range(0.05..0.95)).collect();
        let m = SampleMask::soft(H, W, v.clone(), K).unwrap();
        let b = SamplingBudget::new(K).unwrap();
        let g = sample_loss_grad(&m, b);
        for _ in 0..10 {
            let i = r.random_range(0..H * W);
            let h = 0.01f32;
            let at = |d: f32| {
                let mut w = v.clone();
                w[i] += d;
                sample_loss(&SampleMask::soft(H, W, w, K).unwrap(), b)
            };
            let fd = (at(h) - at(-h)) / (2.0 * h as f64);
            worst_sample = worst_sample.max(relative(g[i], fd));
        }
    }
    // d (task o completion o apply_mask o soft_argmax) / d logits
    let data = corpus(2, 1, 33);
    let mut worst_chain = 0f64;
    for (n, seq) in data.iter().enumerate() {
        let frame = &seq.frames()[0];
        let completion: ReferenceCompletion<f64> =
            ReferenceCompletion::new(tiny_models().completion, 40 + n as u64).unwrap();
        let logits: Vec<f64> = (0..2 * H * W).map(|_| r.random_range(-2.0..2.0)).collect();
        let base = Tensor::from_vec([1, 2, H, W], logits).unwrap();
        let (_, grad) = logits_objective(&completion, frame, base.clone(), 0.0);
        for _ in 0..12 {
            let i = r.random_range(0..2 * H * W);
            let eps = 1e-5;
            let at = |d: f64| {
                let mut t = base.clone();
                t.data_mut()[i] += d;
                logits_objective(&completion, frame, t, 0.0).0
            };
            let fd = (at(eps) - at(-eps)) / (2.0 * eps);
            if grad.data()[i].abs().max(fd.abs()) > 1e-9 {
                worst_chain = worst_chain.max(relative(grad.data()[i], fd));
            }
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    check(
        worst_sample < 1e-3 && worst_chain < 1e-3 && secs < 60.0,
        format!("worst relative error {worst_sample:.1e} (sample loss), {worst_chain:.1e} (full chain) in {secs:.1}s"),
        format!("sample loss {worst_sample:.2e}, chain {worst_chain:.2e}, {secs:.1}s"),
    )
}

fn c4_budget_invariants() -> Outcome {
    let mut r = rng::seeded(4);
    for _ in 0..200 {
        let (h, w) = (r.random_range(1..9), r.random_range(1..9));
        let v: Vec<f32> = (0..h * w).map(|_| r.random::<f32>()).collect();
        let k = r.random_range(0..h * w + 5);
        let m = SampleMask::soft(h, w, v, k.max(1)).unwrap();
        if harden_topk(&m, k).count_ones() != k.min(h * w) {
            return Err(format!("harden_topk count wrong for {h}x{w}, k={k}"));
        }
    }
    // every validity pattern of a 3x3 grid against brute-force subset search
    let mut cases = 0;
    for pattern in 0u32..512 {
        let valid: Vec<bool> = (0..9).map(|i| pattern >> i & 1 == 1).collect();
        let depth = DepthMap::from_parts(3, 3, valid.iter().map(|&v| if v { 5.0 } else { 0.0 }).collect(), valid.clone())
            .unwrap();
        let soft: Vec<f32> = (0..9).map(|_| r.random::<f32>()).collect();
        let m = SampleMask::soft(3, 3, soft.clone(), 1).unwrap();
        for k in 0..=9 {
            let got = sparse_budget_select(&depth, &m, k).unwrap();
            let want_n = k.min(valid.iter().filter(|&&v| v).count());
            let mut best: Option<(f64, u32)> = None;
            for subset in 0u32..512 {
                if subset.count_ones() as usize != want_n || subset & !pattern != 0 {
                    continue;
                }
                let score: f64 = (0..9).filter(|i| subset >> i & 1 == 1).map(|i| soft[i] as f64).sum();
                if best.map_or(true, |(s, _)| score > s) {
                    best = Some((score, subset));
                }
            }
            let want = best.map(|b| b.1).unwrap_or(0);
            let got_bits = got.selected().iter().fold(0u32, |acc, &i| acc | 1 << i);
            if got_bits != want {
                return Err(format!("pattern {pattern:09b}, k={k}: got {got_bits:09b}, oracle {want:09b}"));
            }
            cases += 1;
        }
    }
    Ok(format!("harden_topk on 200 random masks; sparse_budget_select matches brute force on {cases} cases"))
}

fn c5_freeze_contract() -> Outcome {
    let data = corpus(2, 3, 55);
    let mut c = completion(1);
    let mut s = sampler(1, 2);
    let c0 = c.params().fingerprint();
    stage2_train_sampler(&train_config(Stage::TrainSampler), &data, &mut c, &mut s, &PriorSource::GroundTruth, None)
        .map_err(|e| e.to_string())?;
    let frozen_ok = c.params().fingerprint() == c0;
    let (c1, s1) = (c.params().fingerprint(), s.params().fingerprint());
    stage3_joint_finetune(
        &train_config(Stage::JointFinetune),
        &data,
        &mut s,
        &mut c,
        &PriorSource::GroundTruth,
        None,
        None,
    )
    .map_err(|e| e.to_string())?;
    let both = c.params().fingerprint() != c1 && s.params().fingerprint() != s1;
    check(
        frozen_ok && both,
        "stage 2 leaves the completion hash unchanged; joint fine-tune changes both".into(),
        format!("completion frozen in stage 2: {frozen_ok}; joint changed both: {both}"),
    )
}

fn c6_state_machine() -> Outcome {
    let seq = &corpus(1, 10, 66)[0];
    let (s, p, c) = (sampler(1, 1), prednet(4, 2), completion(3));
    let models = E2EModels {
        sampler: &s,
        prednet: Some(&p),
        completion: &c,
    };
    let cfg = E2EConfig {
        memory_size: 4,
        budget: SamplingBudget::new(K).unwrap(),
        prior_mode: PriorMode::PredNet,
        ..E2EConfig::default()
    };
    let trace = run_end_to_end(seq, models, &cfg).map_err(|e| e.to_string())?;
    let branches: Vec<Branch> = trace.records.iter().map(|r| r.branch).collect();
    let want: Vec<Branch> = (0..10).map(|t| if t < 4 { Branch::Random } else { Branch::PredNet }).collect();
    let short = DepthSequence::new("short", seq.frames()[..2].to_vec()).unwrap();
    let short_trace = run_end_to_end(&short, models, &cfg).map_err(|e| e.to_string())?;
    let all_random = short_trace.records.iter().all(|r| r.branch == Branch::Random);
    check(
        branches == want && all_random,
        "frames 0-3 random, 4-9 prednet; T=2 < S gives all random".into(),
        format!("branches {branches:?}, short all random: {all_random}"),
    )
}

fn c7_codec() -> Outcome {
    let clock = Instant::now();
    let mut r = rng::seeded(7);
    let mut worst = 0f64;
    for _ in 0..50 {
        let (h, w) = (r.random_range(1..40), r.random_range(1..40));
        let valid: Vec<bool> = (0..h * w).map(|_| r.random_bool(0.6)).collect();
        let values: Vec<f32> = valid.iter().map(|&v| if v { r.random_range(0.01..250.0) } else { 0.0 }).collect();
        let d = DepthMap::from_parts(h, w, values, valid).unwrap();
        let back = kitti_decode_depth(&kitti_encode_depth(&d).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        if back.valid() != d.valid() {
            return Err("validity changed in a round trip".into());
        }
        for (a, b) in d.values().iter().zip(back.values()) {
            worst = worst.max((a - b).abs() as f64);
        }
        // synthetic 16-bit PNG with random raw codes, including zeros
        let raw: Vec<f32> = (0..h * w).map(|_| r.random_range(0u16..=u16::MAX)).map(|c| c as f32 / 256.0).collect();
        let png = kitti_encode_depth(&DepthMap::sparse(h, w, raw).unwrap()).map_err(|e| e.to_string())?;
        let again = kitti_encode_depth(&kitti_decode_depth(&png).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        if again != png {
            return Err("encode(decode(x)) is not byte-identical".into());
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    check(
        worst <= 1.0 / 512.0 && secs < 5.0,
        format!("max value error {worst:.2e} m, PNG bytes reproduced, {secs:.2}s"),
        format!("max error {worst:.2e}, {secs:.2}s"),
    )
}

fn c8_metric_oracles() -> Outcome {
    let d = |v: &[f32]| DepthMap::dense(1, v.len(), v.to_vec()).unwrap();
    let (p, g) = (d(&[1.0, 2.0, 3.0]), d(&[1.0, 2.0, 5.0]));
    let r = rmse(&p, &g).unwrap();
    let a = mae(&p, &g).unwrap();
    let one = DepthMap::from_parts(1, 2, vec![5.0, 0.0], vec![true, false]).unwrap();
    let single_r = rmse(&d(&[3.0, 9.0]), &one).unwrap();
    let single_a = mae(&d(&[3.0, 9.0]), &one).unwrap();
    let h1 = depth_histogram(&[5.0, 5.0, 5.0], &[0.0, 10.0, 20.0]).unwrap();
    let h2 = depth_histogram(&[5.0, 15.0], &[0.0, 10.0, 20.0]).unwrap();
    let exact = r == (4.0f64 / 3.0).sqrt()
        && a == 2.0 / 3.0
        && single_r == 2.0
        && single_a == 2.0
        && h1 == [1.0, 0.0]
        && h2 == [0.5, 0.5];
    let mut rng = rng::seeded(8);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..30);
        let gt: Vec<f32> = (0..n).map(|_| rng.random_range(0.5..80.0)).collect();
        let pr: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..80.0)).collect();
        if rmse(&d(&pr), &d(&gt)).unwrap() < mae(&d(&pr), &d(&gt)).unwrap() - 1e-12 {
            violations += 1;
        }
    }
    check(
        exact && violations == 0,
        format!("rmse {r:.6}, mae {a:.6} (mean |residual|), histograms exact; rmse >= mae on 1000 draws"),
        format!("rmse {r}, mae {a}, singles {single_r}/{single_a}, hists {h1:?} {h2:?}, violations {violations}"),
    )
}

fn steady(trace: &Trace, from: usize) -> Result<f64, String> {
    trace.metrics(from).map(|m| m.rmse).map_err(|e| e.to_string())
}

fn c9_ordering(out: &RecipeOutcome, cfg: &RecipeConfig) -> Outcome {
    let s = cfg.memory_size;
    let get = |k: &str| out.traces.get(k).ok_or(format!("no {k} trace")).and_then(|t| steady(t, s));
    let (lb, pn, fx, rnd) = (get("lower_bound")?, get("prednet")?, get("fixed")?, get("agnostic")?);
    let gain = 1.0 - pn / rnd;
    let line = format!(
        "RMSE over frames >= {s}: lower-bound {lb:.3}, prednet {pn:.3}, fixed {fx:.3}, random {rnd:.3}; gain {:.1}%",
        100.0 * gain
    );
    let sized = cfg.train_sequences >= 100;
    check(
        lb < pn && pn <= fx && fx < rnd && gain >= 0.05 && sized,
        line.clone(),
        if sized { line } else { format!("{line} (only {} training sequences)", cfg.train_sequences) },
    )
}

fn c10_steady_state(out: &RecipeOutcome, cfg: &RecipeConfig) -> Outcome {
    let (pn, rnd) = (&out.traces["prednet"], &out.traces["agnostic"]);
    let from = 10;
    let (a, b) = (steady(pn, from)?, steady(rnd, from)?);
    let gain = 1.0 - a / b;
    let curve = pn.per_frame_rmse();
    let worst = curve
        .iter()
        .filter(|(t, _, _)| *t >= cfg.memory_size)
        .map(|&(_, v, _)| v)
        .fold(0.0, f64::max);
    let stable = worst <= 1.5 * a;
    let long = cfg.test_frames >= 30;
    check(
        gain >= 0.05 && stable && long,
        format!("frames >= 10: prednet {a:.3} vs random {b:.3} ({:.1}% lower); worst frame {worst:.3} <= 1.5 x {a:.3}", 100.0 * gain),
        format!("prednet {a:.3}, random {b:.3}, gain {:.1}%, worst frame {worst:.3}, stable {stable}", 100.0 * gain),
    )
}

fn c11_budget(out: &RecipeOutcome, cfg: &RecipeConfig) -> Outcome {
    let k = cfg.budget.k();
    let mut parts = Vec::new();
    let mut ok = true;
    for name in ["lower_bound", "prednet", "fixed"] {
        let t = &out.traces[name];
        let m = t.metrics(0).map_err(|e| e.to_string())?;
        let soft = m.mean_soft_count.ok_or(format!("{name}: no soft counts"))?;
        let exact = t.records.iter().filter(|r| r.soft_count.is_some()).all(|r| r.hard_count == k);
        let within = (soft - k as f64).abs() <= 0.1 * k as f64;
        ok &= within && exact;
        parts.push(format!("{name} soft {soft:.1}{}", if exact { "" } else { " (hard count off)" }));
    }
    let line = format!("k = {k}: {}; hardened counts exactly k", parts.join(", "));
    check(ok, line.clone(), line)
}

fn c12_mix_and_match(out: &RecipeOutcome, cfg: &RecipeConfig) -> Outcome {
    let matched = steady(&out.matched, 0)?;
    let mixed = steady(&out.mixed, 0)?;
    let before = (out.sampler_frozen.params().fingerprint(), out.completion_b.params().fingerprint());
    mix_and_match_eval(
        &out.test,
        &out.sampler_frozen,
        &out.completion_b,
        &PriorSource::GroundTruth,
        cfg.budget,
        cfg.temperature,
        cfg.scene.max_range,
    )
    .map_err(|e| e.to_string())?;
    let after = (out.sampler_frozen.params().fingerprint(), out.completion_b.params().fingerprint());
    let gap = (mixed - matched).abs() / matched;
    check(
        gap <= 0.15 && before == after,
        format!("matched {matched:.3}, mixed {mixed:.3} ({:.1}% apart); parameters unchanged", 100.0 * gap),
        format!("matched {matched:.3}, mixed {mixed:.3}, gap {:.1}%, unchanged {}", 100.0 * gap, before == after),
    )
}

fn main() {
    let names = [
        "SoftArgmax oracle equivalence",
        "sample loss contract",
        "gradient checks",
        "budget invariants",
        "freeze contract",
        "online loop state machine",
        "KITTI codec",
        "metric oracles",
        "desk-scale method ordering",
        "end-to-end steady state",
        "budget adherence after training",
        "mix and match",
    ];
    let mut results: Vec<Outcome> = vec![
        c1_soft_argmax_oracle(),
        c2_sample_loss_contract(),
        c3_gradient_checks(),
        c4_budget_invariants(),
        c5_freeze_contract(),
        c6_state_machine(),
        c7_codec(),
        c8_metric_oracles(),
    ];
    for (i, r) in results.iter().enumerate() {
        report(i, names[i], r);
    }

    let mut cfg = RecipeConfig::default();
    if let Some(n) = std::env::var("ACCEPTANCE_TRAIN_SEQUENCES").ok().and_then(|v| v.parse().ok()) {
        cfg.train_sequences = n;
    }
    eprintln!("running the desk-scale recipe ({} training sequences)...", cfg.train_sequences);
    let mut recipe_failed = false;
    match run_recipe(&cfg) {
        Ok(out) => {
            eprintln!("recipe finished in {:.0}s", out.seconds);
            for (i, f) in [c9_ordering, c10_steady_state, c11_budget, c12_mix_and_match].iter().enumerate() {
                let r = f(&out, &cfg);
                report(8 + i, names[8 + i], &r);
                results.push(r);
            }
        }
        Err(e) => {
            recipe_failed = true;
            for i in 8..12 {
                let r = Err(format!("recipe failed: {e}"));
                report(i, names[i], &r);
                results.push(r);
            }
        }
    }
    let failed = results.iter().filter(|r| r.is_err()).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let contract_failed = results[..8].iter().any(|r| r.is_err());
    if contract_failed || (strict && failed > 0) || recipe_failed {
        std::process::exit(1);
    }
}

fn report(i: usize, name: &str, r: &Outcome) {
    match r {
        Ok(msg) => println!("PASS {:>2} {name}: {msg}", i + 1),
        Err(msg) => println!("FAIL {:>2} {name}: {msg}", i + 1),
    }
}
