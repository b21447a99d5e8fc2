use std::path::{Path, PathBuf};

use log::warn;
use protoerase::erasure::{calibrate_tau, read_records, write_records, ErasureSession, GenerationRecord, TauCalibration};
use protoerase::evalkit::{
    ablation_k, calibrate_detector, emit_report, flagged_rate, nearest_tokens, rescore, DetectorCalibration,
    DetectorConfig, EvalGrid, EvalReport, Report, ReportFormat,
};
use protoerase::pipeline::{collect_evidence, extract_image_prototypes, optimize_entry};
use protoerase::protolab::{build_bank, load_bank, save_bank, ImageBank, ImageBankEntry, PrototypeBank};
use protoerase::semworld::{sample_concept_prompts, sample_neutral_prompts, Prompt, Role};
use protoerase::{build_world, GuidanceConfig, World};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Resolved, WorldSource};
use crate::error::{CliError, CliResult, StageExt};

/// Detector fits and the selection threshold, written by `calibrate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub detectors: Vec<DetectorCalibration>,
    pub tau: TauCalibration,
}

impl CalibrationFile {
    fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(protoerase::Error::from)
            .stage("calibration")?;
        serde_json::from_str(&text)
            .map_err(|e| protoerase::Error::CorruptFile(format!("calibration: {e}")))
            .stage("calibration")
    }

    fn detector(&self, concept: &str) -> Option<&DetectorConfig> {
        self.detectors
            .iter()
            .map(|d| &d.detector)
            .find(|d| d.concept.name == concept)
    }
}

pub struct Ctx {
    pub resolved: Resolved,
}

impl Ctx {
    fn cfg(&self) -> &crate::config::RunConfig {
        &self.resolved.config
    }

    pub fn world(&self) -> CliResult<World> {
        let cfg = self.cfg();
        match self.resolved.world_source {
            WorldSource::File => World::load(&cfg.paths.world).stage("world"),
            WorldSource::Seed => build_world(cfg.world.clone()).stage("world"),
            WorldSource::Unspecified => Err(CliError::Usage(
                "no world given: pass --world <world.json> or --seed <n>".into(),
            )),
        }
    }

    fn concepts(&self, world: &World) -> Vec<String> {
        if self.cfg().concepts.is_empty() {
            world.concepts.iter().map(|c| c.name.clone()).collect()
        } else {
            self.cfg().concepts.clone()
        }
    }

    fn bank(&self, world: &World) -> CliResult<PrototypeBank> {
        let bank = load_bank(&self.cfg().paths.bank).stage("bank")?;
        bank.validate_against(world).stage("bank")?;
        Ok(bank)
    }

    fn formats(&self) -> CliResult<Vec<ReportFormat>> {
        self.cfg()
            .eval
            .formats
            .iter()
            .map(|f| f.parse().stage("report"))
            .collect()
    }

    fn write_reports(&self, report: Report<'_>, stem: &str) -> CliResult<Vec<PathBuf>> {
        let dir = &self.cfg().paths.reports;
        std::fs::create_dir_all(dir).map_err(protoerase::Error::from).stage("report")?;
        let mut written = Vec::new();
        for format in self.formats()? {
            let path = dir.join(format!("{stem}.{}", format.extension()));
            emit_report(report, &path, format).stage("report")?;
            written.push(path);
        }
        Ok(written)
    }

    /// Detector for `concept`: from the calibration file when given, else fitted now.
    fn detector(&self, world: &World, concept: &str, calibration: Option<&CalibrationFile>) -> CliResult<DetectorConfig> {
        if let Some(det) = calibration.and_then(|c| c.detector(concept)) {
            return Ok(det.clone());
        }
        let spec = world
            .concept(concept)
            .ok_or_else(|| CliError::Usage(format!("unknown concept {concept:?}")))?;
        let cfg = self.cfg();
        let fit = calibrate_detector(world, spec, cfg.eval.detector_samples, &cfg.guidance, cfg.eval.seed).stage("detector")?;
        Ok(fit.detector)
    }

    /// Guidance config with τ taken from the calibration file if one is given.
    fn guidance(&self, calibration: Option<&CalibrationFile>) -> GuidanceConfig {
        let mut g = self.cfg().guidance.clone();
        if let Some(c) = calibration {
            g.tau = c.tau.tau;
        }
        g
    }
}

pub fn extract(ctx: &Ctx) -> CliResult<()> {
    let world = ctx.world()?;
    let cfg = ctx.cfg();
    if ctx.resolved.world_source == WorldSource::Seed {
        world.save(&cfg.paths.world).stage("world")?;
        println!("world (seed {}) -> {}", world.config.seed, cfg.paths.world.display());
    }
    let mut entries = Vec::new();
    for name in ctx.concepts(&world) {
        let spec = world
            .concept(&name)
            .ok_or_else(|| CliError::Usage(format!("unknown concept {name:?}")))?;
        let evidence = collect_evidence(&world, spec, &cfg.pipeline, &cfg.guidance).stage("extract")?;
        let (protos, _) = extract_image_prototypes(&evidence, cfg.pipeline.k, &cfg.pipeline).stage("extract")?;
        println!(
            "{name}: {} differences ({} prompts, {} images per side), K = {}",
            evidence.diffs.len(),
            cfg.pipeline.prompts,
            cfg.pipeline.per_prompt,
            cfg.pipeline.k
        );
        for (k, p) in protos.into_iter().enumerate() {
            println!("  prototype {k}: cluster_size {} inertia {:.6}", p.cluster_size, p.inertia);
            entries.push(ImageBankEntry {
                concept: name.clone(),
                mode_index: k,
                prototype: p,
            });
        }
    }
    let bank = ImageBank {
        world_seed: world.config.seed,
        entries,
    };
    bank.save(&cfg.paths.bank).stage("extract")?;
    println!("image prototypes -> {}", cfg.paths.bank.display());
    Ok(())
}

pub fn optimize(ctx: &Ctx) -> CliResult<()> {
    let world = ctx.world()?;
    let cfg = ctx.cfg();
    let images = ImageBank::load(&cfg.paths.bank).stage("optimize")?;
    if images.world_seed != world.config.seed {
        return Err(CliError::Stage {
            stage: "optimize",
            source: protoerase::Error::InvariantViolation {
                field: "world_seed".into(),
                detail: format!("bank {} vs world {}", images.world_seed, world.config.seed),
            },
        });
    }
    if cfg.pipeline.textual.iters == 0 {
        warn!("--iters 0: soft prompts keep their random initialization");
        eprintln!("warning: U = 0, saving randomly initialized soft prompts");
    }
    let optimized: Vec<_> = images
        .entries
        .par_iter()
        .map(|e| {
            optimize_entry(&world, &e.concept, e.mode_index, &e.prototype, &cfg.pipeline)
                .map(|(tp, _)| tp)
                .map_err(|source| (e.concept.clone(), e.mode_index, source))
        })
        .collect();
    let mut groups: Vec<(String, Vec<_>)> = Vec::new();
    let mut failures = Vec::new();
    for result in optimized {
        match result {
            Ok(tp) => {
                println!(
                    "{} prototype {}: achieved_cosine {:.6} (best {:.6})",
                    tp.source_concept, tp.source_mode, tp.achieved_cosine, tp.best_cosine
                );
                match groups.iter_mut().find(|g| g.0 == tp.source_concept) {
                    Some(g) => g.1.push(tp),
                    None => groups.push((tp.source_concept.clone(), vec![tp])),
                }
            }
            Err((concept, mode, e)) => {
                eprintln!("{concept} prototype {mode}: optimization failed: {e}");
                failures.push(e);
            }
        }
    }
    if let Some(source) = failures.into_iter().next() {
        return Err(CliError::Stage { stage: "optimize", source });
    }
    let bank = build_bank(world.config.seed, groups).stage("optimize")?;
    save_bank(&bank, &cfg.paths.bank).stage("optimize")?;
    println!("textual prototypes -> {}", cfg.paths.bank.display());
    Ok(())
}

pub struct PromptSpec {
    pub explicit: Vec<Vec<usize>>,
    pub concept_prompts: usize,
    pub neutral_prompts: usize,
    pub prompt_seed: u64,
}

pub fn sample(ctx: &Ctx, spec: &PromptSpec, seeds: &[u64], no_erase: bool, calibration: Option<&Path>) -> CliResult<()> {
    let world = ctx.world()?;
    let cfg = ctx.cfg();
    let calibration = calibration.map(CalibrationFile::load).transpose()?;
    let mut prompts = spec
        .explicit
        .iter()
        .map(|ids| Prompt::from_ids(ids))
        .collect::<protoerase::Result<Vec<_>>>()
        .stage("sample")?;
    for p in &prompts {
        world.check_prompt(p).stage("sample")?;
    }
    for name in ctx.concepts(&world) {
        if let Some(c) = world.concept(&name) {
            prompts.extend(sample_concept_prompts(&world, c, spec.concept_prompts, spec.prompt_seed));
        }
    }
    prompts.extend(sample_neutral_prompts(&world, spec.neutral_prompts, spec.prompt_seed));
    if prompts.is_empty() {
        return Err(CliError::Usage("no prompts: use --prompt, --concept-prompts or --neutral-prompts".into()));
    }
    let mut guidance = ctx.guidance(calibration.as_ref());
    if no_erase {
        guidance = guidance.without_erasure();
    }
    let session = ErasureSession::new(&world, ctx.bank(&world)?, guidance).stage("sample")?;
    let grid: Vec<(Prompt, u64)> = prompts
        .iter()
        .flat_map(|p| seeds.iter().map(move |s| (p.clone(), *s)))
        .collect();
    let records = session.generate_grid(&grid).stage("sample")?;
    write_records(&records, &cfg.paths.records).stage("sample")?;
    let selected = records.iter().filter(|r| r.selected.is_some()).count();
    println!(
        "{} records ({} with a selected prototype, beta {}) -> {}",
        records.len(),
        selected,
        session.config().beta,
        cfg.paths.records.display()
    );
    Ok(())
}

fn print_report(label: &str, r: &EvalReport) {
    println!(
        "{label}: flagged_rate {:.4} context_alignment_mean {:.4} n {} selection_rate {:.4}",
        r.flagged_rate, r.context_alignment_mean, r.n_samples, r.selection_rate
    );
    for m in &r.per_mode {
        let mode = m.mode.map_or_else(|| "none".into(), |k| k.to_string());
        println!(
            "  mode {mode}: flagged_rate {:.4} context_alignment_mean {:.4} n {}",
            m.flagged_rate, m.context_alignment_mean, m.n_samples
        );
    }
}

pub fn eval(ctx: &Ctx, records: &[PathBuf], concept: Option<&str>, calibration: Option<&Path>) -> CliResult<()> {
    let world = ctx.world()?;
    let cfg = ctx.cfg();
    let calibration = calibration.map(CalibrationFile::load).transpose()?;
    let concepts = ctx.concepts(&world);
    let concept = concept
        .map(str::to_string)
        .or_else(|| concepts.first().cloned())
        .ok_or_else(|| CliError::Usage("no concept to evaluate".into()))?;
    let det = ctx.detector(&world, &concept, calibration.as_ref())?;

    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    if records.is_empty() {
        let spec = world
            .concept(&concept)
            .ok_or_else(|| CliError::Usage(format!("unknown concept {concept:?}")))?;
        let prompts = sample_concept_prompts(&world, spec, cfg.eval.prompts, cfg.eval.seed ^ 0xE7A1);
        let grid = EvalGrid::new(&prompts, cfg.eval.seeds_per_prompt, cfg.eval.seed ^ 0x5EED);
        let guidance = ctx.guidance(calibration.as_ref());
        let bank = ctx.bank(&world)?;
        for (label, g) in [("baseline", guidance.without_erasure()), ("erased", guidance)] {
            let session = ErasureSession::new(&world, bank.clone(), g).stage("eval")?;
            reports.push((label.into(), flagged_rate(&session, &grid, &det).stage("eval")?));
        }
    } else {
        for path in records {
            let recs: Vec<GenerationRecord> = read_records(path).stage("eval")?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("records").to_string();
            reports.push((stem, rescore(&world, &recs, &det).stage("eval")?));
        }
    }
    for (label, r) in &reports {
        print_report(label, r);
        for p in ctx.write_reports(Report::Eval(r), label)? {
            println!("  -> {}", p.display());
        }
    }
    if let [(a, ra), (b, rb)] = reports.as_slice() {
        println!("flagged_rate delta ({b} - {a}): {:+.4}", rb.flagged_rate - ra.flagged_rate);
    }
    Ok(())
}

pub fn ablate(ctx: &Ctx, concept: Option<&str>, calibration: Option<&Path>) -> CliResult<()> {
    let world = ctx.world()?;
    let cfg = ctx.cfg();
    let calibration = calibration.map(CalibrationFile::load).transpose()?;
    let concept = concept
        .map(str::to_string)
        .or_else(|| ctx.concepts(&world).first().cloned())
        .ok_or_else(|| CliError::Usage("no concept to ablate".into()))?;
    let det = ctx.detector(&world, &concept, calibration.as_ref())?;
    let prompts = sample_concept_prompts(&world, &det.concept, cfg.eval.prompts, cfg.eval.seed ^ 0xE7A1);
    let grid = EvalGrid::new(&prompts, cfg.eval.seeds_per_prompt, cfg.eval.seed ^ 0x5EED);
    let guidance = ctx.guidance(calibration.as_ref());
    let result = ablation_k(&world, &cfg.eval.ks, &cfg.pipeline, &guidance, &det, &grid).stage("ablate")?;
    println!("K,flagged_rate,context_alignment_mean");
    for r in &result.rows {
        println!("{},{:.4},{:.4}", r.k, r.flagged_rate, r.context_alignment_mean);
    }
    println!("grid sha256 {}", result.grid_hash);
    for p in ctx.write_reports(Report::Ablation(&result), "ablation")? {
        println!("  -> {}", p.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct InspectRow {
    concept: String,
    mode_index: usize,
    cluster_size: usize,
    achieved_cosine: f64,
    image_tokens: Vec<(usize, String, f64)>,
    textual_tokens: Vec<(usize, String, f64)>,
}

fn role_label(role: &Role) -> String {
    match role {
        Role::Mode { concept, mode } => format!("{concept}/mode{mode}"),
        Role::Replacement { concept, mode } => format!("{concept}/repl{mode}"),
        Role::Context => "context".into(),
    }
}

pub fn inspect(ctx: &Ctx, top: usize) -> CliResult<()> {
    let world = ctx.world()?;
    let bank = ctx.bank(&world)?;
    let label = |v| -> CliResult<Vec<(usize, String, f64)>> {
        Ok(nearest_tokens(&world, v, top)
            .stage("inspect")?
            .into_iter()
            .map(|(t, c)| (t.0, role_label(&world.vocab[t.0].role), c))
            .collect())
    };
    let mut rows = Vec::new();
    for p in &bank.entries {
        let row = InspectRow {
            concept: p.source_concept.clone(),
            mode_index: p.source_mode,
            cluster_size: p.image_prototype.cluster_size,
            achieved_cosine: p.achieved_cosine,
            image_tokens: label(&p.image_prototype.vec)?,
            textual_tokens: label(&p.summary.0)?,
        };
        println!(
            "{} prototype {} (cluster_size {}, achieved_cosine {:.4})",
            row.concept, row.mode_index, row.cluster_size, row.achieved_cosine
        );
        println!("  {:<6} {:<18} {:>9}   {:<6} {:<18} {:>9}", "image", "role", "cos", "text", "role", "cos");
        for (a, b) in row.image_tokens.iter().zip(&row.textual_tokens) {
            println!("  t{:<5} {:<18} {:>9.4}   t{:<5} {:<18} {:>9.4}", a.0, a.1, a.2, b.0, b.1, b.2);
        }
        rows.push(row);
    }
    let dir = &ctx.cfg().paths.reports;
    std::fs::create_dir_all(dir).map_err(protoerase::Error::from).stage("inspect")?;
    let path = dir.join("inspect.json");
    let text = serde_json::to_string_pretty(&rows).map_err(protoerase::Error::from).stage("inspect")?;
    std::fs::write(&path, text).map_err(protoerase::Error::from).stage("inspect")?;
    println!("  -> {}", path.display());
    Ok(())
}

pub fn calibrate(ctx: &Ctx) -> CliResult<()> {
    let world = ctx.world()?;
    let cfg = ctx.cfg();
    let bank = ctx.bank(&world)?;
    let mut detectors = Vec::new();
    let mut held = Vec::new();
    for name in ctx.concepts(&world) {
        let spec = world
            .concept(&name)
            .ok_or_else(|| CliError::Usage(format!("unknown concept {name:?}")))?;
        let fit = calibrate_detector(&world, spec, cfg.eval.detector_samples, &cfg.guidance, cfg.eval.seed).stage("detector")?;
        println!(
            "{name}: theta_det {:.6} (J {:.3}, holdout tpr {:.3} fpr {:.3})",
            fit.detector.theta_det, fit.youden_j, fit.holdout.tpr, fit.holdout.fpr
        );
        detectors.push(fit);
        held.extend(sample_concept_prompts(&world, spec, cfg.eval.tau_prompts, cfg.eval.seed ^ 0x7A0));
    }
    let neutral = sample_neutral_prompts(&world, cfg.eval.tau_prompts, cfg.eval.seed ^ 0x7A1);
    let tau = calibrate_tau(&world, &bank, &held, &neutral).stage("tau")?;
    println!(
        "tau {:.6} (coverage {:.3}, neutral max similarity {:.4})",
        tau.tau,
        tau.coverage,
        tau.neutral_max.unwrap_or(f64::NAN)
    );
    let file = CalibrationFile { detectors, tau };
    let text = serde_json::to_string_pretty(&file).map_err(protoerase::Error::from).stage("calibrate")?;
    std::fs::write(&cfg.paths.calibration, text)
        .map_err(protoerase::Error::from)
        .stage("calibrate")?;
    println!("calibration -> {}", cfg.paths.calibration.display());
    Ok(())
}
