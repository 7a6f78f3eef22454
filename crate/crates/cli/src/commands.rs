use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::{Array3, Axis, Zip};
use serde::{Deserialize, Serialize};
use serde_json::json;

use semantix::archive::{read_record, sha256_hex, write_record};
use semantix::config::RunConfig;
use semantix::correspondence::{
    add_positional_encoding, make_positional_field, match_features, pca_visualize, RegionMask,
};
use semantix::denoiser::{toy_backend, AdapterRegistry, Condition, Denoiser, LatentShape, TapRequest, TapTable};
use semantix::inversion::{invert, noised_latent, reconstruct};
use semantix::metrics::{gram_loss, max_abs_diff, ssim, MetricReport, PatchDescriptor};
use semantix::sampler::{derive_seeds, run_transfer, Prompts};

use crate::io;

const TOOL: &str = concat!("semantix ", env!("CARGO_PKG_VERSION"));

/// Backend settings stored beside an inversion archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct BackendInfo {
    kind: String,
    seed: u64,
    downscale: usize,
    tap_table: TapTable,
}

impl BackendInfo {
    fn from_config(cfg: &RunConfig) -> Self {
        BackendInfo {
            kind: cfg.denoiser.kind.clone(),
            seed: cfg.denoiser.seed,
            downscale: cfg.denoiser.downscale,
            tap_table: cfg.denoiser.tap_table(),
        }
    }

    /// Latent grid for pixel inputs of the given size.
    fn latent_shape(&self, height: usize, width: usize) -> Result<LatentShape> {
        let ds = self.downscale;
        if !height.is_multiple_of(ds) || !width.is_multiple_of(ds) {
            bail!("input size {height}x{width} is not divisible by the downscale {ds}");
        }
        let shape = LatentShape::new(3, height / ds, width / ds);
        let stride = self.tap_table.blocks.iter().map(|b| b.stride).max().unwrap_or(1);
        if !shape.height.is_multiple_of(stride) || !shape.width.is_multiple_of(stride) || shape.height == 0 || shape.width == 0 {
            bail!(
                "latent grid {}x{} must be a positive multiple of the largest tap stride {stride}",
                shape.height,
                shape.width
            );
        }
        Ok(shape)
    }

    fn build(&self, shape: LatentShape) -> Result<Box<dyn Denoiser>> {
        if self.kind == "toy" {
            let b = toy_backend(self.seed, shape, self.tap_table.clone())?.with_downscale(self.downscale);
            Ok(Box::new(b))
        } else {
            Ok(AdapterRegistry::new().build(&self.kind, self.seed, shape)?)
        }
    }
}

fn input_size(cfg: &RunConfig) -> Option<(u32, u32)> {
    (!cfg.denoiser.is_toy()).then_some((cfg.denoiser.adapter_size, cfg.denoiser.adapter_size))
}

fn hash_files(files: &[PathBuf]) -> Result<String> {
    if files.len() == 1 {
        return Ok(sha256_hex(&fs::read(&files[0])?));
    }
    let mut all = Vec::new();
    for f in files {
        all.extend_from_slice(sha256_hex(&fs::read(f)?).as_bytes());
    }
    Ok(sha256_hex(&all))
}

fn relative(dir: &Path, files: &[PathBuf]) -> Result<Vec<serde_json::Value>> {
    files
        .iter()
        .map(|f| {
            let rel = f.strip_prefix(dir).unwrap_or(f).to_string_lossy().replace('\\', "/");
            Ok(json!({ "file": rel, "sha256": sha256_hex(&fs::read(f)?) }))
        })
        .collect()
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn transfer(mut cfg: RunConfig, context: Option<PathBuf>, reference: Option<PathBuf>) -> Result<()> {
    if context.is_some() {
        cfg.io.context = context;
    }
    if reference.is_some() {
        cfg.io.reference = reference;
    }
    let ctx_path = cfg.io.context.clone().context("no context input given (--context or io.context)")?;
    let ref_path = cfg.io.reference.clone().context("no reference input given (--reference or io.reference)")?;
    let ctx = io::load(&ctx_path, input_size(&cfg))?;
    let (_, _, h, w) = ctx.pixels.dim();
    let reference = io::load(&ref_path, Some(input_size(&cfg).unwrap_or((w as u32, h as u32))))?;

    let info = BackendInfo::from_config(&cfg);
    let backend = info.build(info.latent_shape(h, w)?)?;
    let schedule = cfg.build_schedule()?;
    let plan = cfg.build_plan(&schedule)?;
    let prompts = Prompts {
        context: Condition::new(cfg.prompts.context.clone()),
        reference: Condition::new(cfg.prompts.reference.clone()),
    };
    let seed = cfg.plan.inversion_seed;
    log::info!("transfer: {} steps from t = {} on {}", plan.len(), plan.t_start(), backend.name());
    let out = run_transfer(
        &ctx.pixels,
        &reference.pixels,
        &prompts,
        backend.as_ref(),
        &schedule,
        &cfg.guidance,
        &plan,
        seed,
    )?;

    let dir = cfg.io.output_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut outputs = io::save(&dir, "output", &out.output)?;
    outputs.extend(io::save(&dir, "context_recon", &out.context_recon)?);
    outputs.extend(io::save(&dir, "reference_recon", &out.reference_recon)?);
    let energy_log = if cfg.io.energy_log {
        let path = dir.join("energy.jsonl");
        let mut f = fs::File::create(&path)?;
        for entry in &out.log {
            writeln!(f, "{}", serde_json::to_string(entry)?)?;
        }
        outputs.push(path);
        Some("energy.jsonl")
    } else {
        None
    };
    let decoded_ctx = backend.decode(&backend.encode(&ctx.pixels)?)?;
    let recon_err = Zip::from(&out.context_recon)
        .and(&decoded_ctx)
        .fold(0.0f64, |m, a, b| m.max((a - b).abs()));
    let (seed_c, seed_r, seed_m) = derive_seeds(seed);
    let manifest = json!({
        "tool": TOOL,
        "command": "transfer",
        "backend": backend.name(),
        "config": cfg,
        "seeds": {
            "denoiser": cfg.denoiser.seed,
            "context-inversion": seed_c,
            "reference-inversion": seed_r,
            "masks": seed_m,
            "shuffle": cfg.guidance.shuffle_seed,
        },
        "shuffle-correspondence": cfg.guidance.shuffle_correspondence,
        "plan": plan.ascending(),
        "inputs": [
            { "role": "context", "path": ctx_path, "sha256": hash_files(&ctx.files)? },
            { "role": "reference", "path": ref_path, "sha256": hash_files(&reference.files)? },
        ],
        "outputs": relative(&dir, &outputs)?,
        "energy-log": energy_log,
        "context-recon-max-abs": recon_err,
        "degenerate-masks": out.degenerate_masks,
    });
    write_json(&dir.join("manifest.json"), &manifest)?;
    println!("{}", dir.join("manifest.json").display());
    Ok(())
}

pub fn invert_cmd(cfg: RunConfig, input: PathBuf, record_dir: PathBuf, prompt: Option<String>) -> Result<()> {
    let loaded = io::load(&input, input_size(&cfg))?;
    let (_, _, h, w) = loaded.pixels.dim();
    let info = BackendInfo::from_config(&cfg);
    let backend = info.build(info.latent_shape(h, w)?)?;
    let schedule = cfg.build_schedule()?;
    let plan = cfg.build_plan(&schedule)?;
    let cond = Condition::new(prompt.unwrap_or_else(|| cfg.prompts.context.clone()));
    let x0 = backend.encode(&loaded.pixels)?;
    let record = invert(&x0, backend.as_ref(), &cond, &schedule, &plan, cfg.guidance.omega, cfg.plan.inversion_seed)?;
    write_record(&record_dir, &record)?;
    let recon = reconstruct(&record, backend.as_ref(), &schedule, record.omega)?;
    let err = Zip::from(&recon).and(&x0).fold(0.0f64, |m, a, b| m.max((a - b).abs()));
    write_json(&record_dir.join("backend.json"), &serde_json::to_value(&info)?)?;
    write_json(
        &record_dir.join("run.json"),
        &json!({
            "tool": TOOL,
            "command": "invert",
            "config": cfg,
            "input": { "path": input, "sha256": hash_files(&loaded.files)? },
            "recon-max-abs": err,
        }),
    )?;
    println!("{}", json!({ "record": record_dir, "recon-max-abs": err }));
    Ok(())
}

pub fn reconstruct_cmd(cfg: RunConfig, record_dir: PathBuf, input: Option<PathBuf>) -> Result<()> {
    let record = read_record(&record_dir)?;
    let info: BackendInfo = match fs::read_to_string(record_dir.join("backend.json")) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(_) => BackendInfo::from_config(&cfg),
    };
    let (_, c, h, w) = record.shape();
    let backend = info.build(LatentShape::new(c, h, w))?;
    let schedule = cfg.build_schedule()?;
    let latent = reconstruct(&record, backend.as_ref(), &schedule, record.omega)?;
    let pixels = backend.decode(&latent)?;
    let dir = cfg.io.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let files = io::save(&dir, "reconstruction", &pixels)?;
    let mut report = json!({
        "tool": TOOL,
        "command": "reconstruct",
        "record": record_dir,
        "outputs": relative(&dir, &files)?,
    });
    if let Some(path) = input {
        let loaded = io::load(&path, Some((w as u32 * info.downscale as u32, h as u32 * info.downscale as u32)))?;
        let x0 = backend.encode(&loaded.pixels)?;
        let err = Zip::from(&latent).and(&x0).fold(0.0f64, |m, a, b| m.max((a - b).abs()));
        report["recon-max-abs"] = json!(err);
    }
    write_json(&dir.join("reconstruct.json"), &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn frame_name(stem: &str, frame: usize, frames: usize) -> String {
    if frames == 1 {
        format!("{stem}.png")
    } else {
        format!("{stem}_frame_{frame:04}.png")
    }
}

pub fn inspect(cfg: RunConfig, input: PathBuf, reference: Option<PathBuf>, t: usize) -> Result<()> {
    let schedule = cfg.build_schedule()?;
    if t == 0 || t > schedule.num_steps() {
        bail!("timestep {t} is outside 1..={}", schedule.num_steps());
    }
    let loaded = io::load(&input, input_size(&cfg))?;
    let (frames, _, h, w) = loaded.pixels.dim();
    let info = BackendInfo::from_config(&cfg);
    let backend = info.build(info.latent_shape(h, w)?)?;
    let taps = TapRequest::features(cfg.guidance.feature_blocks.iter().copied());
    let features_of = |pixels: &ndarray::Array4<f64>, prompt: &str, seed: u64| -> Result<_> {
        let x_t = noised_latent(&backend.encode(pixels)?, &schedule, t, seed)?;
        Ok(backend.predict(&x_t, t, &Condition::new(prompt), &taps, None)?.features)
    };
    let (seed_c, seed_r, _) = derive_seeds(cfg.plan.inversion_seed);
    let ctx = features_of(&loaded.pixels, &cfg.prompts.context, seed_c)?;
    let refs = match &reference {
        Some(p) => {
            let r = io::load(p, Some(input_size(&cfg).unwrap_or((w as u32, h as u32))))?;
            let r = if r.pixels.dim().0 == frames {
                r.pixels
            } else {
                let first = r.pixels.index_axis(Axis(0), 0).insert_axis(Axis(0)).to_owned();
                let views: Vec<_> = (0..frames).map(|_| first.view()).collect();
                ndarray::concatenate(Axis(0), &views)?
            };
            Some(features_of(&r, &cfg.prompts.reference, seed_r)?)
        }
        None => None,
    };
    let dir = cfg.io.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for (id, f) in &ctx {
        let views = pca_visualize(f)?;
        for (i, v) in views.iter().enumerate() {
            let path = dir.join(frame_name(&format!("pca_{id}"), i, frames));
            io::save_hwc(&path, &v.rgb)?;
            written.push(path);
        }
        if let Some(refs) = &refs {
            let fr = &refs[id];
            let ref_views = pca_visualize(fr)?;
            let pe = make_positional_field(f.channels(), f.rows(), f.cols(), cfg.guidance.pe_mode, Some(frames), cfg.guidance.lambda_pe)?;
            let masks = RegionMask::full(frames, (f.rows(), f.cols()), (fr.rows(), fr.cols()));
            let m = match_features(&add_positional_encoding(f, &pe)?, &add_positional_encoding(fr, &pe)?, &masks)?;
            for (i, rv) in ref_views.iter().enumerate() {
                let path = dir.join(frame_name(&format!("pca_reference_{id}"), i, frames));
                io::save_hwc(&path, &rv.rgb)?;
                written.push(path);
                let overlay = Array3::from_shape_fn((f.rows(), f.cols(), 3), |(r, c, k)| {
                    let j = m.assignment[[i, r * f.cols() + c]];
                    rv.rgb[[j / fr.cols(), j % fr.cols(), k]]
                });
                let path = dir.join(frame_name(&format!("correspondence_{id}"), i, frames));
                io::save_hwc(&path, &overlay)?;
                written.push(path);
            }
        }
    }
    let report = json!({ "tool": TOOL, "command": "inspect-features", "t": t, "outputs": relative(&dir, &written)? });
    write_json(&dir.join("inspect.json"), &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn pairs(a: &Path, b: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    for p in [a, b] {
        if !p.exists() {
            bail!("input {} does not exist", p.display());
        }
    }
    match (a.is_dir(), b.is_dir()) {
        (false, false) => {
            let name = a.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "pair".into());
            Ok(vec![(name, a.to_path_buf(), b.to_path_buf())])
        }
        (true, true) => {
            let mut names: Vec<_> = fs::read_dir(a)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "png"))
                .collect();
            names.sort();
            let out: Vec<_> = names
                .into_iter()
                .filter_map(|pa| {
                    let pb = b.join(pa.file_name()?);
                    pb.exists().then(|| (pa.file_stem().unwrap().to_string_lossy().into_owned(), pa, pb))
                })
                .collect();
            if out.is_empty() {
                bail!("no PNG file names are shared by {} and {}", a.display(), b.display());
            }
            Ok(out)
        }
        _ => bail!("metrics needs two files or two directories"),
    }
}

pub fn metrics(a: PathBuf, b: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let descriptor = PatchDescriptor::default();
    let mut csv = String::from("name,gram_loss,ssim,max_abs\n");
    if let Some(dir) = &out {
        fs::create_dir_all(dir)?;
    }
    for (name, pa, pb) in pairs(&a, &b)? {
        let ia = io::load(&pa, None)?.pixels;
        let ib = io::load(&pb, None)?.pixels;
        if ia.dim() != ib.dim() {
            bail!("{} and {} differ in size", pa.display(), pb.display());
        }
        let (va, vb) = (ia.index_axis(Axis(0), 0), ib.index_axis(Axis(0), 0));
        let report = MetricReport {
            gram_loss: gram_loss(va, vb, &descriptor)?,
            ssim: ssim(va, vb)?,
            recon_max_abs: Some(max_abs_diff(va, vb)?),
            notes: Vec::new(),
        };
        let line = json!({ "name": name, "report": report });
        println!("{}", serde_json::to_string(&line)?);
        csv.push_str(&format!(
            "{name},{},{},{}\n",
            report.gram_loss,
            report.ssim,
            report.recon_max_abs.unwrap_or(0.0)
        ));
        if let Some(dir) = &out {
            write_json(&dir.join(format!("{name}.json")), &serde_json::to_value(&report)?)?;
        }
    }
    if let Some(dir) = &out {
        fs::write(dir.join("summary.csv"), csv)?;
    }
    Ok(())
}
