//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use protoerase::encoders::{encode_text, encode_text_grad, SoftPrompt};
use protoerase::erasure::{read_records, write_records, ErasureSession};
use protoerase::evalkit::{flagged_rate, nearest_images, EvalGrid};
use protoerase::guidance::{
    cfg_epsilon, combine_guidance, ddim_step, denoise_cond, denoise_uncond, guided_epsilon, make_schedule, sample,
    sample_unconditional, Condition, LatentState, SamplerKind,
};
use protoerase::protolab::{
    kmeans, load_bank, optimize_textual_prototype, save_bank, KMeansConfig, TextualConfig,
};
use protoerase::rng::{derive_seed, normal_matrix, normal_vector, rng_from};
use protoerase::semworld::{sample_concept_prompts, sample_neutral_prompts, Prompt};
use protoerase::{Error, GuidanceConfig, WorldConfig};
use rand::Rng as _;

use common::{top_token, world, Scenario};

type Check = std::result::Result<String, String>;

fn verdict(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct GapSeed {
    seed: u64,
    baseline: f64,
    k3: f64,
    k1: f64,
    align_base: f64,
    align_k3: f64,
}

/// Shared run behind the erasure-gap and utility criteria.
fn erasure_gap_run() -> (Vec<GapSeed>, Duration) {
    let start = Instant::now();
    let rows = (0..3u64)
        .map(|seed| {
            let sc = Scenario::new(WorldConfig::with_seed(seed), "hazard");
            let bank3 = sc.bank(3);
            let bank1 = sc.bank(1);
            let tau = sc.tau(&bank3).tau;
            let cfg = GuidanceConfig { tau, ..sc.guidance.clone() };
            let prompts = sample_concept_prompts(&sc.world, &sc.concept, 200, seed ^ 0xE7A1);
            let grid = EvalGrid::new(&prompts, 1, seed ^ 0x5EED);
            let det = &sc.detector.detector;
            let run = |bank, cfg: &GuidanceConfig| {
                let session = ErasureSession::new(&sc.world, bank, cfg.clone()).unwrap();
                flagged_rate(&session, &grid, det).unwrap()
            };
            let base = run(bank3.clone(), &cfg.without_erasure());
            let k3 = run(bank3, &cfg);
            let k1 = run(bank1, &cfg);
            GapSeed {
                seed,
                baseline: base.flagged_rate,
                k3: k3.flagged_rate,
                k1: k1.flagged_rate,
                align_base: base.context_alignment_mean,
                align_k3: k3.context_alignment_mean,
            }
        })
        .collect();
    (rows, start.elapsed())
}

fn criterion_1(rows: &[GapSeed], elapsed: Duration) -> Check {
    let mut ok = elapsed <= Duration::from_secs(60);
    let mut parts = Vec::new();
    for r in rows {
        ok &= r.baseline >= 0.90 && r.k3 <= 0.10 && r.k1 - r.k3 >= 0.20;
        parts.push(format!("seed {}: base {:.3} K=3 {:.3} K=1 {:.3}", r.seed, r.baseline, r.k3, r.k1));
    }
    verdict(ok, format!("{}; {:.1}s", parts.join(", "), elapsed.as_secs_f64()))
}

fn criterion_2(rows: &[GapSeed]) -> Check {
    let worst = rows.iter().map(|r| (r.align_k3 - r.align_base).abs()).fold(0.0, f64::max);
    let parts: Vec<String> = rows
        .iter()
        .map(|r| format!("seed {}: {:.4} -> {:.4}", r.seed, r.align_base, r.align_k3))
        .collect();
    verdict(worst <= 0.10, format!("{}; max |delta| {worst:.4}", parts.join(", ")))
}

fn criterion_3() -> Check {
    let sc = Scenario::new(WorldConfig::with_seed(0), "hazard");
    let bank = sc.bank(3);
    let cfg = GuidanceConfig {
        tau: sc.tau(&bank).tau,
        ..sc.guidance.clone()
    };
    let erase = ErasureSession::new(&sc.world, bank.clone(), cfg.clone()).unwrap();
    let plain = ErasureSession::new(&sc.world, bank, cfg.without_erasure()).unwrap();
    let schedule = cfg.schedule().unwrap();
    let mut identical = 0;
    let mut selected = 0;
    for (i, p) in sample_neutral_prompts(&sc.world, 100, 0xA11).iter().enumerate() {
        let seed = derive_seed(0x3, &[i as u64]);
        let a = erase.erase_and_generate(p, seed).unwrap();
        let b = plain.erase_and_generate(p, seed).unwrap();
        let cond = Condition::Hard(p.clone()).resolve(&sc.world).unwrap();
        let direct = sample(&sc.world, &cond, None, &cfg.without_erasure(), &schedule, seed).unwrap();
        selected += usize::from(a.selected.is_some());
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&a.image) == bits(&b.image) && bits(&a.image) == bits(direct.as_slice()) {
            identical += 1;
        }
    }
    verdict(
        identical == 100 && selected == 0,
        format!("{identical}/100 bitwise identical, {selected} selections"),
    )
}

fn criterion_4() -> Check {
    let mut worst = f64::INFINITY;
    let mut count = 0;
    let mut worst_step = f64::INFINITY;
    for seed in 0..3u64 {
        let sc = Scenario::new(WorldConfig::with_seed(seed), "hazard");
        let (protos, _) = sc.image_prototypes(3);
        let bank = sc.bank(3);
        for p in &bank.entries {
            worst = worst.min(p.achieved_cosine);
            count += 1;
        }
        let slow = TextualConfig {
            eta: 1e-3,
            ..TextualConfig::default()
        };
        for (k, p) in protos.iter().enumerate() {
            let (_, trace) = optimize_textual_prototype(&sc.world, p, &slow, "hazard", k, seed * 10 + k as u64).unwrap();
            worst_step = worst_step.min(trace.min_increment());
        }
    }
    verdict(
        worst >= 0.95 && worst_step >= -1e-9,
        format!("{count} prototypes, min achieved cosine {worst:.6}; eta=1e-3 min step {worst_step:.3e}"),
    )
}

fn criterion_5() -> Check {
    let mut rng = rng_from(0x6AD);
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for case in 0..100u64 {
        let w = world(case % 5);
        let len = rng.random_range(1..=4);
        let sp = SoftPrompt::new(normal_matrix(&mut rng, len, w.d())).unwrap();
        let cot = normal_vector(&mut rng, w.d());
        let grad = encode_text_grad(&w, &sp, &cot).unwrap();
        let f = |m: &DMatrix<f64>| encode_text(&w, &SoftPrompt::new(m.clone()).unwrap()).unwrap().0.dot(&cot);
        let mut fd = DMatrix::zeros(len, w.d());
        for i in 0..len {
            for j in 0..w.d() {
                let mut plus = sp.rows().clone();
                let mut minus = sp.rows().clone();
                plus[(i, j)] += h;
                minus[(i, j)] -= h;
                fd[(i, j)] = (f(&plus) - f(&minus)) / (2.0 * h);
            }
        }
        let rel = (&grad - &fd).norm() / grad.norm().max(fd.norm());
        worst = worst.max(rel);
    }
    verdict(worst <= 1e-5, format!("100 cases, max relative error {worst:.3e}"))
}

/// log N(z; mean, s2·I), written out independently of the library.
fn log_density(z: &DVector<f64>, mean: &DVector<f64>, s2: f64) -> f64 {
    let n = z.len() as f64;
    -0.5 * (z - mean).norm_squared() / s2 - 0.5 * n * (2.0 * std::f64::consts::PI * s2).ln()
}

fn criterion_6() -> Check {
    let mut rng = rng_from(0xDE0);
    let schedule = make_schedule(30, false).unwrap();
    let mut worst: f64 = 0.0;
    let h = 1e-4;
    for case in 0..50u64 {
        let w = world(case % 5);
        let t = rng.random_range(1..=30);
        let ab = schedule.alpha_bar(t);
        let z = normal_vector(&mut rng, w.image_dim());
        let conditional = case % 2 == 0;
        let (mean, var, eps) = if conditional {
            let prompts = sample_concept_prompts(&w, w.primary_concept(), 1, case);
            let cond = Condition::Hard(prompts[0].clone()).resolve(&w).unwrap();
            let state = LatentState { z: z.clone(), t };
            let sd = w.config.sigma_data;
            (cond.mean.clone(), sd * sd, denoise_cond(&w, &state, &cond, &schedule))
        } else {
            let su = w.config.sigma_uncond;
            let state = LatentState { z: z.clone(), t };
            (DVector::zeros(w.image_dim()), su * su, denoise_uncond(&w, &state, &schedule))
        };
        // marginal of z_t: N(√ᾱ μ, (ᾱ var + 1 − ᾱ) I); ε = −√(1−ᾱ) ∇ log p
        let m_t = &mean * ab.sqrt();
        let s2 = ab * var + 1.0 - ab;
        let score = DVector::from_fn(z.len(), |i, _| {
            let mut plus = z.clone();
            let mut minus = z.clone();
            plus[i] += h;
            minus[i] -= h;
            (log_density(&plus, &m_t, s2) - log_density(&minus, &m_t, s2)) / (2.0 * h)
        });
        let oracle = -score * (1.0 - ab).sqrt();
        worst = worst.max((&eps - &oracle).norm() / eps.norm().max(oracle.norm()));
    }
    verdict(worst <= 1e-6, format!("50 triples, max relative error {worst:.3e}"))
}

fn brute_force_inertia(points: &[DVector<f64>], k: usize) -> f64 {
    let n = points.len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut sums = vec![DVector::zeros(points[0].len()); k];
        let mut sizes = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l] += p;
            sizes[l] += 1;
        }
        if sizes.iter().all(|&s| s > 0) {
            let inertia: f64 = points
                .iter()
                .zip(&labels)
                .map(|(p, &l)| (p - &sums[l] / sizes[l] as f64).norm_squared())
                .sum();
            best = best.min(inertia);
        }
        // odometer over all k^n labelings
        let mut i = 0;
        while i < n {
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
        if i == n {
            return best;
        }
    }
}

fn criterion_7() -> Check {
    let mut rng = rng_from(0xC1);
    let mut worst: f64 = 0.0;
    for inst in 0..20u64 {
        let k = rng.random_range(1..=3);
        let n = rng.random_range(k.max(3)..=10);
        let dim = rng.random_range(1..=3);
        let points: Vec<DVector<f64>> = (0..n).map(|_| normal_vector(&mut rng, dim)).collect();
        let fit = kmeans(&points, k, &KMeansConfig::default(), inst).unwrap();
        worst = worst.max((fit.inertia - brute_force_inertia(&points, k)).abs());
    }
    verdict(worst <= 1e-9, format!("20 instances, max |inertia - optimum| {worst:.3e}"))
}

fn criterion_8() -> Check {
    let w = world(0);
    let schedule = make_schedule(30, true).unwrap();
    let n = 2000;
    let dim = w.image_dim();
    let mut sum = DVector::zeros(dim);
    let mut sq = DVector::zeros(dim);
    for s in 0..n {
        let x = sample_unconditional(&w, SamplerKind::Ancestral, &schedule, derive_seed(0x8, &[s])).unwrap();
        sum += &x;
        sq += x.component_mul(&x);
    }
    let su = w.config.sigma_uncond;
    let mean = &sum / n as f64;
    let var = (&sq - mean.component_mul(&mean) * n as f64) / (n as f64 - 1.0);
    let mean_tol = 3.0 * su / (n as f64).sqrt();
    let worst_mean = mean.amax();
    let worst_var = var.iter().map(|v| (v / (su * su) - 1.0).abs()).fold(0.0, f64::max);
    verdict(
        worst_mean <= mean_tol && worst_var <= 0.15,
        format!("max |mean| {worst_mean:.4} (tol {mean_tol:.4}), max relative variance error {worst_var:.4}"),
    )
}

fn criterion_9() -> Check {
    let sc = Scenario::new(WorldConfig::with_seed(0), "hazard");
    let w = &sc.world;
    let bank = sc.bank(3);
    let proto = protoerase::guidance::ResolvedCondition::from_summary(w, bank.entries[0].summary.clone()).unwrap();
    let prompts = sample_concept_prompts(w, &sc.concept, 10, 0x99);
    let mut sampler_ok = true;
    for (i, p) in prompts.iter().enumerate() {
        let cond = Condition::Hard(p.clone()).resolve(w).unwrap();
        for alpha in [7.5, 1.0] {
            let cfg = GuidanceConfig {
                alpha,
                beta: 0.0,
                ..GuidanceConfig::default()
            };
            let schedule = cfg.schedule().unwrap();
            let with_proto = sample(w, &cond, Some(&proto), &cfg, &schedule, i as u64).unwrap();
            // reference rollout using only the plain guided epsilon
            let mut rng = rng_from(i as u64);
            let mut state = LatentState {
                z: normal_vector(&mut rng, w.image_dim()),
                t: schedule.steps,
            };
            while state.t > 0 {
                let u = denoise_uncond(w, &state, &schedule);
                let c = denoise_cond(w, &state, &cond, &schedule);
                let eps = if alpha == 1.0 { c } else { cfg_epsilon(&u, &c, alpha) };
                state = ddim_step(&state, &eps, &schedule).unwrap();
            }
            sampler_ok &= with_proto == state.z;
        }
    }

    let mut rng = rng_from(0x9AF);
    let mut identity_ok = true;
    let mut worst_affine: f64 = 0.0;
    let schedule = make_schedule(30, false).unwrap();
    for case in 0..100u64 {
        let d = w.image_dim();
        let (u, c, p) = (normal_vector(&mut rng, d), normal_vector(&mut rng, d), normal_vector(&mut rng, d));
        let alpha = rng.random_range(0.0..15.0);
        let beta = rng.random_range(0.0..15.0);
        identity_ok &= combine_guidance(&u, &c, Some(&p), alpha, 0.0) == cfg_epsilon(&u, &c, alpha);
        identity_ok &= combine_guidance(&u, &c, Some(&p), 1.0, 0.0) == c;
        let direct = &u + (&c - &u) * alpha - (&p - &u) * beta;
        let got = combine_guidance(&u, &c, Some(&p), alpha, beta);
        worst_affine = worst_affine.max((&got - &direct).amax() / direct.amax().max(1.0));

        // the sampler-level combination is affine in (α, β) on live denoiser outputs
        let state = LatentState {
            z: normal_vector(&mut rng, d),
            t: 1 + (case as usize % 30),
        };
        let cond = Condition::Hard(prompts[case as usize % prompts.len()].clone()).resolve(w).unwrap();
        let at = |a: f64, b: f64| {
            let cfg = GuidanceConfig { alpha: a, beta: b, ..GuidanceConfig::default() };
            guided_epsilon(w, &state, &cond, Some(&proto), &cfg, &schedule)
        };
        let e00 = at(0.0, 0.0);
        let probe = &e00 + (at(1.0, 0.0) - &e00) * alpha + (at(0.0, 1.0) - &e00) * beta;
        let live = at(alpha, beta);
        worst_affine = worst_affine.max((&live - &probe).amax() / live.amax().max(1.0));
    }
    verdict(
        sampler_ok && identity_ok && worst_affine <= 1e-12,
        format!("sampler identities {sampler_ok}, epsilon identities {identity_ok}, affine probe max error {worst_affine:.2e}"),
    )
}

fn criterion_10() -> Check {
    let scenarios: Vec<Scenario> = (0..10u64)
        .map(|s| Scenario::new(WorldConfig::with_seed(s), "hazard"))
        .collect();
    let mut token_hits = 0;
    let mut total = 0;
    let mut cluster_modes = Vec::new();
    for sc in &scenarios {
        let (protos, _) = sc.image_prototypes(3);
        let modes = sc.cluster_modes(3);
        for (p, &m) in protos.iter().zip(&modes) {
            total += 1;
            token_hits += usize::from(top_token(&sc.world, &p.vec) == sc.concept.modes[m][0]);
        }
        cluster_modes.push((protos, modes));
    }

    let mut image_hits = 0;
    for trial in 0..50u64 {
        let idx = (trial % 10) as usize;
        let sc = &scenarios[idx];
        let (protos, modes) = &cluster_modes[idx];
        let target = (trial / 10 % 3) as usize;
        let Some(k) = modes.iter().position(|&m| m == target) else {
            continue;
        };
        // one image per mode, image j drawn from a prompt carrying mode j
        let prompts = sample_concept_prompts(&sc.world, &sc.concept, 3, derive_seed(0x1A, &[trial]));
        let schedule = sc.guidance.schedule().unwrap();
        let images: Vec<DVector<f64>> = prompts
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let cond = Condition::Hard(p.clone()).resolve(&sc.world).unwrap();
                let cfg = sc.guidance.without_erasure();
                sample(&sc.world, &cond, None, &cfg, &schedule, derive_seed(0x1B, &[trial, j as u64])).unwrap()
            })
            .collect();
        let ranked = nearest_images(&sc.world, &protos[k].vec, &images, 1).unwrap();
        image_hits += usize::from(ranked[0].0 == target);
    }
    let token_rate = token_hits as f64 / total as f64;
    let image_rate = image_hits as f64 / 50.0;
    verdict(
        token_rate >= 0.9 && image_rate >= 0.9,
        format!("nearest_tokens {token_hits}/{total}, nearest_images {image_hits}/50"),
    )
}

fn criterion_11() -> Check {
    let sc = Scenario::new(WorldConfig::with_seed(1), "hazard");
    let bank = sc.bank(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.json");
    save_bank(&bank, &path).unwrap();
    let bank_ok = load_bank(&path).unwrap() == bank;

    let session = ErasureSession::new(&sc.world, bank.clone(), GuidanceConfig::default()).unwrap();
    let prompts = sample_concept_prompts(&sc.world, &sc.concept, 5, 3);
    let mut grid: Vec<(Prompt, u64)> = prompts.into_iter().zip(10..).collect();
    grid.extend(sample_neutral_prompts(&sc.world, 3, 4).into_iter().zip(20..));
    let records = session.generate_grid(&grid).unwrap();
    let rpath = dir.path().join("records.jsonl");
    write_records(&records, &rpath).unwrap();
    let records_ok = read_records(&rpath).unwrap() == records;

    let file = bank.to_file();
    let tampers: Vec<Tamper> = vec![
        Box::new(|f| *f.entries[0].achieved_cosine.as_mut().unwrap() += 1e-7),
        Box::new(|f| f.entries[1].summary.as_mut().unwrap()[3] += 1e-3),
        Box::new(|f| f.entries[2].image_prototype[0] *= -1.0),
        Box::new(|f| {
            f.entries[0].summary.as_mut().unwrap().pop();
        }),
    ];
    let mut rejected = 0;
    for tamper in &tampers {
        let mut f = file.clone();
        tamper(&mut f);
        std::fs::write(&path, serde_json::to_string(&f).unwrap()).unwrap();
        rejected += usize::from(matches!(load_bank(&path), Err(Error::InvariantViolation { .. })));
    }
    // soft prompt edits are only detectable against the world's encoder
    let mut f = file.clone();
    f.entries[0].soft_prompt.as_mut().unwrap()[0][0] += 1e-3;
    std::fs::write(&path, serde_json::to_string(&f).unwrap()).unwrap();
    let soft_rejected = matches!(
        load_bank(&path).and_then(|b| b.validate_against(&sc.world)),
        Err(Error::InvariantViolation { .. })
    );
    verdict(
        bank_ok && records_ok && rejected == tampers.len() && soft_rejected,
        format!(
            "bank round trip {bank_ok}, records round trip {records_ok}, tampered rejected {}/{}",
            rejected + usize::from(soft_rejected),
            tampers.len() + 1
        ),
    )
}

fn criterion_12() -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in 0..3u64 {
        let hazard = Scenario::new(WorldConfig::two_concepts(seed), "hazard");
        let gore = Scenario::new(WorldConfig::two_concepts(seed), "gore");
        let merged = hazard.bank(3).merge(&gore.bank(2)).unwrap();
        let w = &hazard.world;
        let held: Vec<Prompt> = sample_concept_prompts(w, &hazard.concept, 100, seed ^ 0x7A0)
            .into_iter()
            .chain(sample_concept_prompts(w, &gore.concept, 100, seed ^ 0x7A2))
            .collect();
        let neutral = sample_neutral_prompts(w, 200, seed ^ 0x7A1);
        let tau = protoerase::erasure::calibrate_tau(w, &merged, &held, &neutral).unwrap().tau;
        let cfg = GuidanceConfig { tau, ..GuidanceConfig::default() };
        let session = ErasureSession::new(w, merged, cfg).unwrap();
        let mut line = format!("seed {seed}:");
        for sc in [&hazard, &gore] {
            let prompts = sample_concept_prompts(w, &sc.concept, 200, seed ^ 0xE7A1);
            let grid = EvalGrid::new(&prompts, 1, seed ^ 0x5EED);
            let records = session.generate_grid(&grid.items).unwrap();
            let report = protoerase::evalkit::rescore(w, &records, &sc.detector.detector).unwrap();
            let correct = records
                .iter()
                .filter(|r| r.selected.as_ref().is_some_and(|s| s.concept == sc.concept.name))
                .count() as f64
                / records.len() as f64;
            ok &= report.flagged_rate <= 0.10 && correct >= 0.95;
            line += &format!(" {} flagged {:.3} selection {:.3}", sc.concept.name, report.flagged_rate, correct);
        }
        parts.push(line);
    }
    verdict(ok, parts.join("; "))
}

type Tamper = Box<dyn Fn(&mut protoerase::protolab::bank::BankFile)>;
type CheckFn<'a> = Box<dyn Fn() -> Check + 'a>;

fn main() {
    let total = Instant::now();
    let gap = std::cell::OnceCell::new();
    let gap_run = || gap.get_or_init(erasure_gap_run);
    let criteria: Vec<(&str, CheckFn<'_>)> = vec![
        ("multi-mode erasure gap", Box::new(|| {
            let (rows, t) = gap_run();
            criterion_1(rows, *t)
        })),
        ("utility preservation", Box::new(|| criterion_2(&gap_run().0))),
        ("gate soundness", Box::new(criterion_3)),
        ("textual prototype optimization", Box::new(criterion_4)),
        ("text encoder gradient", Box::new(criterion_5)),
        ("analytic denoiser", Box::new(criterion_6)),
        ("clustering optimality", Box::new(criterion_7)),
        ("sampler statistics", Box::new(criterion_8)),
        ("guidance identities", Box::new(criterion_9)),
        ("interpretation fidelity", Box::new(criterion_10)),
        ("serialization", Box::new(criterion_11)),
        ("multi-concept aggregation", Box::new(criterion_12)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{secs:.2}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} [{secs:.2}s]", i + 1);
            }
        }
    }
    println!(
        "acceptance: {}/{} criteria passed in {:.1}s",
        criteria.len() - failed,
        criteria.len(),
        total.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
