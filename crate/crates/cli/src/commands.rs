use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use se2match_core::diffusion::{
    compare_kernels, simulate_pencil, solve_single_patch_with, KernelGrid, MassMatrix, PencilParams, ResolventKernel,
    SinglePatchOptions, SpikeStart,
};
use se2match_core::lifting::{orientation_score_transform, CakeWaveletBank};
use se2match_core::matching::{combine_potentials, detect};
use se2match_core::pipeline::detect::{
    template_potential, write_detections_csv, read_detections_csv, DetectionResult, Regularizers, TargetHit,
};
use se2match_core::pipeline::imageio::{load_gray, save_heatmap, Channel};
use se2match_core::pipeline::kfold::{criterion_for, prepare_all, run_kfold, train_all, write_outputs};
use se2match_core::pipeline::patches::{build_training_sets, Preparer};
use se2match_core::pipeline::preprocess::{r2_stage, rescale_stage};
use se2match_core::pipeline::synth::{write_dataset, SynthKind, SynthParams};
use se2match_core::pipeline::{evaluate, Criterion, DatasetManifest, ManifestRecord, PipelineConfig};
use se2match_core::regression::{optimize_params, GcvWeights};
use se2match_core::regularizers::DiffusionWeights;
use se2match_core::{Domain, Error, Loss, SplineGrid, SplineTemplate};

use crate::cli::{DomainArg, KernelArgs, LossArg, MassArg};

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub output: PathBuf,
    pub channel: Option<Channel>,
}

impl Ctx {
    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.output).with_context(|| format!("creating {}", self.output.display()))?;
        Ok(&self.output)
    }
}

fn domain(d: DomainArg) -> Domain {
    match d {
        DomainArg::R2 => Domain::R2,
        DomainArg::Se2 => Domain::Se2,
    }
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let m = DatasetManifest::load(path).with_context(|| format!("reading manifest {}", path.display()))?;
    m.validate()?;
    m.check_paths()?;
    Ok(m)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

/// A record for an image without ground truth.
fn bare_record(path: &Path) -> ManifestRecord {
    ManifestRecord {
        id: path.display().to_string(),
        path: path.to_path_buf(),
        x: 0.0,
        y: 0.0,
        radius: 1.0,
        second: None,
        roi: None,
        um_per_pixel: None,
    }
}

pub fn lift(ctx: &Ctx, image: &Path, raw: bool) -> Result<()> {
    let cfg = &ctx.cfg;
    let f = load_gray(image, ctx.channel)?;
    let f = if raw {
        f
    } else {
        let mut p = rescale_stage(&f.view(), None, cfg.scale, cfg.crop_zero_borders)?;
        r2_stage(&mut p, &cfg.normalize_window()?, cfg.erf_gain)?;
        p.image
    };
    let bank = CakeWaveletBank::new(cfg.wavelet_size, cfg.n_theta, cfg.cake)?;
    let score = orientation_score_transform(&f.view(), &bank)?;
    let path = ctx.out_dir()?.join(format!("{}.score", stem(image)));
    score.save(&path)?;
    let (nx, ny) = score.image_shape();
    println!("{}: {nx}x{ny}x{} score written to {}", image.display(), score.n_theta(), path.display());
    Ok(())
}

pub fn train(ctx: &Ctx, manifest: &Path) -> Result<()> {
    let m = load_manifest(manifest)?;
    let models = train_all(&m, &ctx.cfg, ctx.channel)?;
    let dir = ctx.out_dir()?;
    let mut index = csv::Writer::from_path(dir.join("templates.csv"))?;
    index.write_record(["target", "template", "kind", "loss", "domain", "lambda", "mu", "file"])?;
    let mut failures = 0;
    for model in &models {
        for nt in &model.templates {
            let file = if models.len() == 1 {
                format!("{}.tpl", nt.name)
            } else {
                format!("{}_target{}.tpl", nt.name, model.target)
            };
            nt.template().save(&dir.join(&file))?;
            let t = &nt.trained;
            index.write_record([
                model.target.to_string(),
                nt.name.clone(),
                t.kind.to_string(),
                t.template.loss.to_string(),
                t.template.domain().to_string(),
                format!("{:e}", t.lambda),
                format!("{:e}", t.mu),
                file.clone(),
            ])?;
            println!("target {}: {} (λ={:e}, μ={:e}) -> {file}", model.target, nt.name, t.lambda, t.mu);
        }
        for f in &model.failures {
            eprintln!("target {}: {} failed: {}", model.target, f.name, f.reason);
            failures += 1;
        }
    }
    index.flush()?;
    if models.iter().all(|m| m.templates.is_empty()) {
        bail!("no template could be trained ({failures} failures)");
    }
    Ok(())
}

pub fn gcv(ctx: &Ctx, manifest: &Path, loss: LossArg, dom: DomainArg) -> Result<()> {
    let mut cfg = ctx.cfg.clone();
    let d = domain(dom);
    cfg.domains = vec![d];
    let m = load_manifest(manifest)?;
    let mut images = prepare_all(&m, &cfg, ctx.channel)?;
    images.sort_by(|a, b| a.id.cmp(&b.id));
    let refs: Vec<_> = images.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data = build_training_sets(&refs, 0, &cfg, &mut rng)?;
    let ts = data.set(d).context("no training set")?;
    let regs = Regularizers::new(&cfg)?;
    let r = regs.get(d).context("no regularizer")?;
    let loss = match loss {
        LossArg::Lin => Loss::Linear,
        LossArg::Log => Loss::Logistic,
    };
    let omega = GcvWeights::from_preset(cfg.gcv, &ts.y);
    let sel = optimize_params(ts, r, loss, &omega, &cfg.newton)?;
    let path = ctx.out_dir()?.join("gcv.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["parameter", "weight", "gcv"])?;
    for curve in [&sel.lambda_curve, &sel.mu_curve] {
        for (g, v) in curve.grid.iter().zip(&curve.values) {
            w.write_record([curve.parameter.to_string(), format!("{g:e}"), format!("{v:.9e}")])?;
        }
    }
    w.flush()?;
    println!("{} samples, {} coefficients, {loss} loss on {d}", ts.len(), ts.num_coefficients());
    println!("lambda* = {:e}", sel.lambda_star);
    println!("mu*     = {:e}", sel.mu_star);
    println!("curves written to {}", path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn match_images(
    ctx: &Ctx,
    images: &[PathBuf],
    manifest: Option<&Path>,
    files: &[PathBuf],
    dom: Option<DomainArg>,
    combine: bool,
    no_heatmaps: bool,
) -> Result<()> {
    let mut templates = Vec::new();
    for f in files {
        let t = SplineTemplate::load(f).with_context(|| format!("reading template {}", f.display()))?;
        if let Some(d) = dom.map(domain) {
            if t.domain() != d {
                return Err(Error::DomainMismatch {
                    expected: d,
                    actual: t.domain(),
                })
                .with_context(|| format!("template {}", f.display()));
            }
        }
        templates.push((stem(f), t));
    }
    let mut records: Vec<ManifestRecord> = images.iter().map(|p| bare_record(p)).collect();
    if let Some(m) = manifest {
        records.extend(load_manifest(m)?.records);
    }
    if records.is_empty() {
        bail!("nothing to match: give images or --manifest");
    }
    let mut cfg = ctx.cfg.clone();
    cfg.domains = Vec::new();
    for (_, t) in &templates {
        if !cfg.domains.contains(&t.domain()) {
            cfg.domains.push(t.domain());
        }
    }
    let preparer = Preparer::new(&cfg)?;
    let range = cfg.invariance()?;
    let dir = ctx.out_dir()?;
    let mut dets = Vec::new();
    for rec in &records {
        let img = preparer.load(rec, &cfg, ctx.channel)?;
        let mut maps = Vec::new();
        for (name, t) in &templates {
            let p = template_potential(t, &img, &range).with_context(|| format!("matching template {name} on {}", rec.id))?;
            maps.push((name.clone(), p));
        }
        if combine && maps.len() > 1 {
            let parts: Vec<_> = maps.iter().map(|(_, p)| p.clone()).collect();
            let name = maps.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join("+");
            maps.push((name, combine_potentials(&parts)?));
        }
        for (name, p) in &maps {
            let d = detect(p, img.processed.roi.as_ref())?;
            let (x, y) = img.processed.geometry.to_original(d.x as f64, d.y as f64);
            println!("{} {name}: x = {x:.1}, y = {y:.1}, potential = {:.6e}", rec.id, d.value);
            dets.push(DetectionResult {
                image_id: rec.id.clone(),
                detector: name.clone(),
                targets: vec![Some(TargetHit { x, y, value: d.value })],
            });
            if !no_heatmaps {
                save_heatmap(&dir.join(format!("{}_{}.png", stem(&rec.path), name.replace('+', "_"))), &p.values)?;
            }
        }
    }
    write_detections_csv(fs::File::create(dir.join("detections.csv"))?, &dets)?;
    Ok(())
}

pub fn evaluate_cmd(ctx: &Ctx, manifest: &Path, detections: &Path, radius: Option<f64>, nerr: Option<f64>) -> Result<()> {
    let m = DatasetManifest::load(manifest).with_context(|| format!("reading manifest {}", manifest.display()))?;
    m.validate()?;
    let dets = read_detections_csv(fs::File::open(detections).with_context(|| format!("opening {}", detections.display()))?)?;
    let criterion = match (radius, nerr) {
        (Some(c), _) => Criterion::Radius(c),
        (None, Some(t)) => Criterion::NormalizedError(t),
        (None, None) => criterion_for(&m, &ctx.cfg),
    };
    let report = evaluate(&dets, &m, criterion, None)?;
    let dir = ctx.out_dir()?;
    let table = report.to_table();
    fs::write(dir.join("report.txt"), &table)?;
    report.write_csv(fs::File::create(dir.join("report.csv"))?)?;
    report.write_outcomes_csv(fs::File::create(dir.join("outcomes.csv"))?)?;
    print!("{table}");
    Ok(())
}

pub fn kfold(ctx: &Ctx, manifest: &Path) -> Result<()> {
    let m = load_manifest(manifest)?;
    let out = run_kfold(&m, &ctx.cfg, ctx.channel)?;
    write_outputs(ctx.out_dir()?, &out, &ctx.cfg)?;
    print!("{}", out.report.to_table());
    let failures = out.failures();
    if !failures.is_empty() {
        println!("\n{} template trainings failed (see failures.csv)", failures.len());
    }
    info!("outputs written to {}", ctx.output.display());
    Ok(())
}

fn kernel_setup(k: &KernelArgs) -> Result<(SplineGrid, DiffusionWeights)> {
    let grid = SplineGrid::se2(k.size, k.size, k.n_theta, k.size, k.size, k.n_theta, 3)?;
    Ok((grid, DiffusionWeights::new(k.d_xi, 0.0, k.d_theta)?))
}

fn save_kernel(ctx: &Ctx, k: &ResolventKernel, name: &str) -> Result<PathBuf> {
    let path = ctx.out_dir()?.join(name);
    k.save(&path)?;
    Ok(path)
}

fn describe(k: &ResolventKernel) -> String {
    let peak = k.values.iter().cloned().fold(0.0, f64::max);
    format!(
        "{}x{}x{} kernel, α = {}, peak {:.4e}, spatial second moment {:.3}",
        k.grid.n_x,
        k.grid.n_y,
        k.grid.n_theta,
        k.alpha,
        peak,
        k.spatial_second_moment()
    )
}

pub fn diffuse(ctx: &Ctx, k: &KernelArgs, mass: MassArg) -> Result<()> {
    let (grid, d) = kernel_setup(k)?;
    let opts = SinglePatchOptions {
        mass: match mass {
            MassArg::Gram => MassMatrix::Gram,
            MassArg::Identity => MassMatrix::Identity,
        },
        ..Default::default()
    };
    // λ/μ fixes the decay rate α = μ/λ.
    let kernel = solve_single_patch_with(&grid, 1.0 / k.alpha, 1.0, d, opts)?;
    let path = save_kernel(ctx, &kernel, k.name.as_deref().unwrap_or("diffuse.kernel"))?;
    println!("{}\nwritten to {}", describe(&kernel), path.display());
    Ok(())
}

pub fn pencil(ctx: &Ctx, k: &KernelArgs, samples: usize, point_start: bool) -> Result<()> {
    let (grid, d) = kernel_setup(k)?;
    let mut p = PencilParams::new(k.alpha, d, samples, KernelGrid::new(k.size, k.size, k.n_theta)?, ctx.cfg.seed)?;
    if !point_start {
        p.start = Some(SpikeStart::from_grid(&grid));
    }
    let kernel = simulate_pencil(&p)?;
    let path = save_kernel(ctx, &kernel, k.name.as_deref().unwrap_or("pencil.kernel"))?;
    println!("{samples} samples, {}\nwritten to {}", describe(&kernel), path.display());
    Ok(())
}

pub fn compare(ctx: &Ctx, a: &Path, b: &Path) -> Result<()> {
    let ka = ResolventKernel::load(a).with_context(|| format!("reading {}", a.display()))?;
    let kb = ResolventKernel::load(b).with_context(|| format!("reading {}", b.display()))?;
    let c = compare_kernels(&ka, &kb)?;
    let path = ctx.out_dir()?.join("profiles.csv");
    c.write_profiles_csv(&path, &ka.grid)?;
    println!("relative L2: {:.4}", c.relative_l2);
    println!("profiles written to {}", path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn synth(
    ctx: &Ctx,
    kind: &str,
    n: usize,
    size: Option<usize>,
    radius: Option<f64>,
    noise: Option<f64>,
    contrast: Option<f64>,
    distractors: Option<usize>,
    rotations: &[f64],
    no_occlusion: bool,
    fixed_polarity: bool,
    second_target: bool,
) -> Result<()> {
    let kind: SynthKind = kind.parse()?;
    let mut p = SynthParams::new(kind, n);
    if let Some(s) = size {
        p.size = (s, s);
    }
    p.radius = radius.unwrap_or(p.radius);
    p.noise = noise.unwrap_or(p.noise);
    p.contrast = contrast.unwrap_or(p.contrast);
    p.distractors = distractors.unwrap_or(p.distractors);
    p.rotations = rotations.to_vec();
    p.occlude &= !no_occlusion;
    p.random_polarity &= !fixed_polarity;
    p.second_target = second_target;
    p.seed = ctx.cfg.seed;
    let m = write_dataset(ctx.out_dir()?, &p)?;
    println!("{} {kind} images written to {}", m.len(), ctx.output.join("manifest.csv").display());
    Ok(())
}
