//! One function per CLI verb. Each returns a JSON summary for stdout.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};

use pcguide::certify::{broken_library, run_battery, scale_sum_weight, CertifyConfig};
use pcguide::circuit::serialize;
use pcguide::datasets::{bars_circuit, generate, Generator, ToyDatasetSpec};
use pcguide::diffusion::{FactorizedDenoiser, NoiseSchedule};
use pcguide::format::image::{write_pgm, write_pgm_gray};
use pcguide::guidance::{make_mask, run_inpainting, Guide, InpaintTask, MaskKind, MixSchedule, Snapshot};
use pcguide::inference::{backward_flows, forward_soft_evidence, log_likelihood};
use pcguide::latent::{latent_guided_sample, semantic_fusion_evidence, FusionReference, PatchCodebook, SoftAssign};
use pcguide::learning::{build_pd_circuit, fit, Dataset, PdStructureConfig};
use pcguide::random::{bench_circuit, bench_edges_per_copy};
use pcguide::rng::{stream, substream};
use pcguide::{CategoricalTable, Circuit64, NodeKind, SoftEvidence};

use crate::config::{RunConfig, StructureSection};
use crate::error::CliError;

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    p.as_deref().ok_or_else(|| CliError::Config(format!("missing {key}")))
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(CliError::DatasetNotFound(path.to_path_buf()));
    }
    let format_err = |source| CliError::Format { path: path.to_path_buf(), source };
    if path.extension().is_some_and(|e| e == "csv") {
        let text = fs::read_to_string(path)?;
        Dataset::from_csv(&text, None).map_err(format_err)
    } else {
        Dataset::load(path).map_err(format_err)
    }
}

fn save_dataset(data: &Dataset, path: &Path) -> Result<(), CliError> {
    if path.extension().is_some_and(|e| e == "csv") {
        fs::write(path, data.to_csv())?;
        Ok(())
    } else {
        data.save(path).map_err(|source| CliError::Format { path: path.to_path_buf(), source })
    }
}

fn load_circuit(path: &Path) -> Result<Circuit64, CliError> {
    if !path.exists() {
        return Err(CliError::FileNotFound(path.to_path_buf()));
    }
    serialize::load(path).map_err(|source| CliError::Format { path: path.to_path_buf(), source })
}

fn load_codebook(path: &Path) -> Result<PatchCodebook, CliError> {
    if !path.exists() {
        return Err(CliError::FileNotFound(path.to_path_buf()));
    }
    PatchCodebook::load(path).map_err(|source| CliError::Format { path: path.to_path_buf(), source })
}

fn save_circuit(c: &Circuit64, path: &Path) -> Result<(), CliError> {
    serialize::save(c, path).map_err(|source| CliError::Format { path: path.to_path_buf(), source })
}

/// Explicit dims, or the square grid matching `num_vars`.
fn grid_dims(height: Option<usize>, width: Option<usize>, num_vars: usize) -> Result<(usize, usize), CliError> {
    let (h, w) = match (height, width) {
        (Some(h), Some(w)) => (h, w),
        (Some(h), None) if h > 0 => (h, num_vars / h),
        (None, Some(w)) if w > 0 => (num_vars / w, w),
        _ => {
            let side = (num_vars as f64).sqrt().round() as usize;
            (side, side)
        }
    };
    if h * w != num_vars {
        return Err(CliError::Config(format!("grid {h}x{w} does not match {num_vars} variables; set height and width")));
    }
    Ok((h, w))
}

fn parse_mask(name: &str) -> Result<MaskKind, CliError> {
    MaskKind::parse(name).ok_or_else(|| {
        let known: Vec<&str> = MaskKind::ALL.iter().map(|k| k.name()).collect();
        CliError::Config(format!("unknown mask {name:?}; expected one of {known:?}"))
    })
}

fn write_image(path: &Path, h: usize, w: usize, pixels: &[u16], num_cats: usize) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write_pgm(&mut buf, h, w, pixels, num_cats).map_err(|source| CliError::Format { path: path.to_path_buf(), source })?;
    fs::write(path, buf)?;
    Ok(())
}

fn write_expectation(path: &Path, h: usize, w: usize, table: &CategoricalTable<f64>) -> Result<(), CliError> {
    let top = (table.num_cats().max(2) - 1) as f64;
    let gray: Vec<f64> = (0..table.num_vars())
        .map(|v| table.row(v).iter().enumerate().map(|(k, p)| k as f64 * p).sum::<f64>() / top)
        .collect();
    let mut buf = Vec::new();
    write_pgm_gray(&mut buf, h, w, &gray).map_err(|source| CliError::Format { path: path.to_path_buf(), source })?;
    fs::write(path, buf)?;
    Ok(())
}

fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(v).expect("json values serialize") + "\n")?;
    Ok(())
}

pub fn gen_data(cfg: &RunConfig) -> Result<Value, CliError> {
    let g = &cfg.gen_data;
    let spec = ToyDatasetSpec {
        generator: Generator::parse(&g.generator)?,
        height: g.height,
        width: g.width,
        num_cats: g.num_cats,
        num_samples: g.num_samples,
        seed: cfg.seed,
        noise: g.noise,
    };
    let data = generate(&spec)?;
    let out = required(&g.out, "gen_data.out")?;
    save_dataset(&data, out)?;
    Ok(json!({ "command": "gen-data", "out": out, "spec": spec, "num_samples": data.num_samples() }))
}

fn pd_config(s: &StructureSection, data: &Dataset, seed: u64) -> Result<PdStructureConfig, CliError> {
    let (height, width) = grid_dims(s.height, s.width, data.num_vars())?;
    Ok(PdStructureConfig {
        height,
        width,
        num_cats: data.num_cats(),
        sums_per_region: s.sums_per_region,
        max_split_depth: s.max_split_depth,
        tie_leaf_params: s.tie_leaf_params,
        init_seed: substream(seed, "init"),
    })
}

pub fn train_pc(cfg: &RunConfig) -> Result<Value, CliError> {
    let t = &cfg.train_pc;
    let data = load_dataset(required(&t.dataset, "train_pc.dataset")?)?;
    let out = required(&t.out, "train_pc.out")?;
    let pd = pd_config(&t.structure, &data, cfg.seed)?;
    let (c0, _) = build_pd_circuit::<f64>(&pd)?;
    let (c, report) = fit(&c0, &data, &t.em.with_seed(substream(cfg.seed, "train")))?;
    save_circuit(&c, out)?;
    let summary = json!({
        "command": "train-pc",
        "out": out,
        "num_samples": data.num_samples(),
        "height": pd.height,
        "width": pd.width,
        "num_nodes": c.num_nodes(),
        "num_edges": c.num_edges(),
        "num_params": c.all_params().len(),
        "initial_avg_ll": report.initial_avg_ll,
        "final_avg_ll": report.avg_ll.last().copied().unwrap_or(report.initial_avg_ll),
        "avg_ll": report.avg_ll,
        "param_checksum": report.param_checksum,
    });
    if let Some(p) = &t.report {
        write_json(p, &summary)?;
    }
    Ok(summary)
}

pub fn train_codebook(cfg: &RunConfig) -> Result<Value, CliError> {
    let t = &cfg.train_codebook;
    let data = load_dataset(required(&t.dataset, "train_codebook.dataset")?)?;
    let out = required(&t.out, "train_codebook.out")?;
    let (h, w) = grid_dims(t.height, t.width, data.num_vars())?;
    let cb = PatchCodebook::train(&data, h, w, t.patch_height, t.patch_width, t.k, substream(cfg.seed, "codebook"))?;
    cb.save(out).map_err(|source| CliError::Format { path: out.to_path_buf(), source })?;

    let mut codes = Vec::with_capacity(data.num_samples() * cb.num_cells());
    let mut wrong = 0usize;
    for img in data.rows() {
        let z = cb.encode(img)?;
        wrong += cb.decode(&z)?.iter().zip(img).filter(|(a, b)| a != b).count();
        codes.extend(z);
    }
    let mut summary = json!({
        "command": "train-codebook",
        "out": out,
        "k": cb.k(),
        "grid": [cb.grid_dims().0, cb.grid_dims().1],
        "pixel_error_rate": wrong as f64 / (data.num_samples() * data.num_vars()).max(1) as f64,
    });
    if let Some(lout) = &t.latent_circuit_out {
        let latent = Dataset::new(cb.num_cells(), cb.k(), codes)?;
        let (gh, gw) = cb.grid_dims();
        let pd = PdStructureConfig {
            height: gh,
            width: gw,
            num_cats: cb.k(),
            sums_per_region: 4,
            max_split_depth: None,
            tie_leaf_params: false,
            init_seed: substream(cfg.seed, "latent-init"),
        };
        let (l0, _) = build_pd_circuit::<f64>(&pd)?;
        let (lc, report) = fit(&l0, &latent, &t.latent_em.with_seed(substream(cfg.seed, "latent-train")))?;
        save_circuit(&lc, lout)?;
        summary["latent_circuit"] = json!({
            "out": lout,
            "initial_avg_ll": report.initial_avg_ll,
            "final_avg_ll": report.avg_ll.last().copied().unwrap_or(report.initial_avg_ll),
        });
    }
    Ok(summary)
}

/// `log p(x_u | x_k)` under `c`; `None` when the known pixels have no support.
fn conditional_ll(c: &Circuit64, image: &[u16], task: &InpaintTask) -> Option<f64> {
    let mut ev = SoftEvidence::uniform(c.num_vars(), c.num_cats());
    for (v, k) in task.known_values().iter().enumerate() {
        if let Some(k) = k {
            ev.set_hard(v, *k);
        }
    }
    let marginal = forward_soft_evidence(c, &ev).ok()?.log_z;
    let ll = log_likelihood(c, image).ok()? - marginal;
    ll.is_finite().then_some(ll)
}

fn write_trace(dir: &Path, h: usize, w: usize, trace: &[Snapshot]) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let mut index = Vec::new();
    for s in trace {
        let mut entry = json!({ "t": s.t, "alpha": s.alpha });
        for (name, table) in [("dm", Some(&s.dm)), ("tpm", s.tpm.as_ref()), ("mixed", Some(&s.mixed))] {
            if let Some(table) = table {
                let file = format!("t{:04}_{name}.pgm", s.t);
                write_expectation(&dir.join(&file), h, w, table)?;
                entry[name] = json!(file);
            }
        }
        index.push(entry);
    }
    write_json(&dir.join("index.json"), &json!(index))
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn inpaint(cfg: &RunConfig) -> Result<Value, CliError> {
    let ic = &cfg.inpaint;
    let data = load_dataset(required(&ic.dataset, "inpaint.dataset")?)?;
    let train = match &ic.train_dataset {
        Some(p) => load_dataset(p)?,
        None => data.clone(),
    };
    let out_dir = required(&ic.out_dir, "inpaint.out_dir")?;
    let (h, w) = grid_dims(ic.height, ic.width, data.num_vars())?;
    let mask_kind = parse_mask(&ic.mask)?;
    let sched = NoiseSchedule::linear(ic.schedule.num_steps, ic.schedule.beta_start, ic.schedule.beta_end, data.num_cats())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mix = ic.mix.resolve(sched.num_steps())?;
    let denoiser = FactorizedDenoiser::train(&train, ic.smoothing);

    let pixel = ic.circuit.as_deref().map(load_circuit).transpose()?;
    let evaluator = match &ic.evaluator {
        Some(p) => Some(load_circuit(p)?),
        None => pixel.clone(),
    };
    let latent_parts = match &ic.latent {
        Some(l) => Some((
            load_circuit(required(&l.circuit, "inpaint.latent.circuit")?)?,
            load_codebook(required(&l.codebook, "inpaint.latent.codebook")?)?,
        )),
        None => None,
    };
    let guide = match (&latent_parts, &ic.latent, &pixel) {
        (Some((circuit, codebook)), Some(l), _) => Guide::Latent {
            circuit,
            codebook,
            assign: l.temperature.map_or(SoftAssign::Hard, SoftAssign::Temperature),
            evidence_samples: l.evidence_samples,
            decodes: l.decodes,
        },
        (_, _, Some(c)) => Guide::Pixel(c),
        _ => return Err(CliError::Config("inpaint needs circuit or a latent section".into())),
    };

    let samples_dir = out_dir.join("samples");
    fs::create_dir_all(&samples_dir)?;
    let unguided_mix = MixSchedule::unguided(sched.num_steps());
    let mut records = Vec::new();
    for i in 0..ic.num_samples {
        let idx = ic.first_index + i;
        if idx >= data.num_samples() {
            return Err(CliError::Config(format!("image {idx} requested but the dataset has {}", data.num_samples())));
        }
        let image = data.row(idx);
        let mask = make_mask(mask_kind, h, w, &mut stream(cfg.seed, &format!("mask/{i}")));
        let task = InpaintTask::from_image(image, &mask);
        let seed = substream(cfg.seed, &format!("sample/{i}"));
        let guided = run_inpainting(&guide, &denoiser, &task, &sched, &mix, seed, ic.trace_every)?;
        let unguided = run_inpainting(&Guide::None, &denoiser, &task, &sched, &unguided_mix, seed, None)?;

        let masked: Vec<u16> = image.iter().zip(&mask).map(|(&v, &m)| if m { 0 } else { v }).collect();
        write_image(&samples_dir.join(format!("{i:03}_original.pgm")), h, w, image, data.num_cats())?;
        write_image(&samples_dir.join(format!("{i:03}_masked.pgm")), h, w, &masked, data.num_cats())?;
        write_image(&samples_dir.join(format!("{i:03}_guided.pgm")), h, w, &guided.image, data.num_cats())?;
        write_image(&samples_dir.join(format!("{i:03}_unguided.pgm")), h, w, &unguided.image, data.num_cats())?;
        if ic.trace_every.is_some() {
            write_trace(&out_dir.join("trace").join(format!("{i:03}")), h, w, &guided.trace)?;
        }
        let score = |img: &[u16]| evaluator.as_ref().and_then(|c| conditional_ll(c, img, &task));
        records.push(json!({
            "index": i,
            "image_index": idx,
            "guided_ll": score(&guided.image),
            "unguided_ll": score(&unguided.image),
            "guided_match_rate": task.match_rate(&guided.image),
            "unguided_match_rate": task.match_rate(&unguided.image),
        }));
    }
    let field = |name: &str| mean(records.iter().filter_map(|r| r[name].as_f64()));
    let metrics = json!({
        "command": "inpaint",
        "mode": if ic.latent.is_some() { "latent" } else { "pixel" },
        "mask": mask_kind.name(),
        "num_samples": ic.num_samples,
        "mix": mix,
        "guided_steps": mix.guided_steps(),
        "mean_guided_ll": field("guided_ll"),
        "mean_unguided_ll": field("unguided_ll"),
        "guided_match_rate": field("guided_match_rate"),
        "samples": records,
    });
    write_json(&out_dir.join("metrics.json"), &metrics)?;
    Ok(json!({
        "command": "inpaint",
        "out_dir": out_dir,
        "mean_guided_ll": metrics["mean_guided_ll"],
        "mean_unguided_ll": metrics["mean_unguided_ll"],
        "guided_match_rate": metrics["guided_match_rate"],
    }))
}

pub fn fuse(cfg: &RunConfig) -> Result<Value, CliError> {
    let fc = &cfg.fuse;
    let cb = load_codebook(required(&fc.codebook, "fuse.codebook")?)?;
    let latent = load_circuit(required(&fc.latent_circuit, "fuse.latent_circuit")?)?;
    let data = load_dataset(required(&fc.dataset, "fuse.dataset")?)?;
    let out_dir = required(&fc.out_dir, "fuse.out_dir")?;
    let (h, w) = cb.image_dims();
    let mut refs = Vec::new();
    for (i, r) in fc.references.iter().enumerate() {
        if r.index >= data.num_samples() {
            return Err(CliError::Config(format!("reference index {} outside the dataset", r.index)));
        }
        let hidden = make_mask(parse_mask(&r.mask)?, h, w, &mut stream(cfg.seed, &format!("mask/ref{i}")));
        refs.push(FusionReference { image: data.row(r.index).to_vec(), visible: hidden.iter().map(|m| !m).collect() });
    }
    let fused = semantic_fusion_evidence(&cb, &refs, fc.lambda)?;
    let sample = latent_guided_sample(&latent, &cb, &fused.evidence, fc.num_samples.max(1), &mut stream(cfg.seed, "sample"))?;
    fs::create_dir_all(out_dir)?;
    for (i, r) in refs.iter().enumerate() {
        let shown: Vec<u16> = r.image.iter().zip(&r.visible).map(|(&v, &vis)| if vis { v } else { 0 }).collect();
        write_image(&out_dir.join(format!("reference_{i}.pgm")), h, w, &shown, cb.num_cats())?;
    }
    for (i, z) in sample.latent_samples.iter().enumerate() {
        write_image(&out_dir.join(format!("fused_{i:03}.pgm")), h, w, &cb.decode(z)?, cb.num_cats())?;
    }
    write_expectation(&out_dir.join("fused_mean.pgm"), h, w, &sample.pixels)?;
    let metrics = json!({
        "command": "fuse",
        "lambda": fc.lambda,
        "covered_cells": fused.covered.iter().filter(|&&c| c).count(),
        "num_cells": cb.num_cells(),
        "empty_coverage": fused.empty_coverage,
        "latent_samples": sample.latent_samples,
    });
    write_json(&out_dir.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

pub fn verify(cfg: &RunConfig) -> Result<Value, CliError> {
    let v = &cfg.verify;
    let cc = CertifyConfig {
        cases: v.cases,
        seed: cfg.seed,
        min_vars: v.min_vars,
        max_vars: v.max_vars,
        num_cats: v.num_cats,
        marginal_tol: v.tolerance,
        log_z_rel_tol: v.tolerance,
        flow_tol: v.tolerance,
    };
    if cc.min_vars < 1 || cc.min_vars > cc.max_vars || cc.num_cats < 2 {
        return Err(CliError::Config("verify needs 1 <= min_vars <= max_vars and num_cats >= 2".into()));
    }
    let tamper = |c: &Circuit64| {
        let node = c.topological_order().iter().copied().find(|&n| c.kind(n) == NodeKind::Sum).expect("random circuits have sums");
        scale_sum_weight(c, node, 1.5)
    };
    let report = run_battery(&cc, v.corrupt.then_some(&tamper as &dyn Fn(&Circuit64) -> Circuit64));
    let library: Vec<_> = broken_library().iter().map(|b| b.check()).collect();
    let library_pass = library.iter().filter(|o| o.rejected && o.localized).count();
    let summary = json!({
        "command": "verify",
        "seed": cfg.seed,
        "cases": report.cases,
        "pass": {
            "valid": report.valid_pass,
            "marginal_equivalence": report.marginal_pass,
            "log_z": report.log_z_pass,
            "flow_conservation": report.flow_pass,
            "broken_library": library_pass,
        },
        "broken_library_size": library.len(),
        "max_marginal_err": report.max_marginal_err,
        "max_log_z_rel_err": report.max_log_z_rel_err,
        "max_flow_err": report.max_flow_err,
        "failures": report.failures.iter().take(50).collect::<Vec<_>>(),
        "num_failures": report.failures.len(),
    });
    if report.all_passed() && library_pass == library.len() {
        Ok(summary)
    } else {
        println!("{}", serde_json::to_string_pretty(&summary).expect("json values serialize"));
        Err(CliError::PropertyFailed(format!(
            "{} certification failure(s), {}/{} broken circuits caught",
            report.failures.len(),
            library_pass,
            library.len()
        )))
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

pub fn bench(cfg: &RunConfig) -> Result<Value, CliError> {
    let b = &cfg.bench;
    let mut csv = String::from("section,edges,guided_fraction,guided_steps,total_secs,denoiser_secs,circuit_secs,mix_secs\n");
    let mut rng = stream(cfg.seed, "bench");
    let (nv, mix) = (16, 4);
    let mut points = Vec::new();
    for &edges in &b.edges {
        let c: Circuit64 = bench_circuit(nv, 2, mix, edges.div_ceil(bench_edges_per_copy(nv, mix)).max(1), &mut rng);
        let ev = SoftEvidence::uniform(nv, 2);
        let times: Vec<f64> = (0..b.reps.max(1))
            .map(|_| {
                let t = Instant::now();
                let fw = forward_soft_evidence(&c, &ev).expect("uniform evidence has support");
                std::hint::black_box(backward_flows(&c, &fw).expect("backward"));
                t.elapsed().as_secs_f64()
            })
            .collect();
        let t = median(times);
        points.push((c.num_edges() as f64, t));
        csv.push_str(&format!("pass,{},,,{t:.9},,{t:.9},\n", c.num_edges()));
    }

    let data = match &b.dataset {
        Some(p) => load_dataset(p)?,
        None => generate(&ToyDatasetSpec::new(Generator::Bars, b.height, b.width, 500, substream(cfg.seed, "data")))?,
    };
    let (h, w) = grid_dims(Some(b.height), Some(b.width), data.num_vars())?;
    let circuit = match &b.circuit {
        Some(p) => load_circuit(p)?,
        None => bars_circuit(h, w, data.num_cats(), 0.02),
    };
    let denoiser = FactorizedDenoiser::train(&data, 1.0);
    let steps = b.loop_steps.max(1);
    let sched = NoiseSchedule::linear(steps, 1e-4, 0.02 * 250.0 / steps as f64, data.num_cats())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let task = InpaintTask::from_image(data.row(0), &make_mask(MaskKind::Left, h, w, &mut stream(cfg.seed, "mask")));
    let mut overhead = Vec::new();
    for &f in &b.guided_fractions {
        let guided = (f.clamp(0.0, 1.0) * steps as f64).round() as usize;
        let mix = MixSchedule::new(0.8, 1.0, 2.0, steps - guided, steps);
        let out = run_inpainting(&Guide::Pixel(&circuit), &denoiser, &task, &sched, &mix, cfg.seed, None)?;
        let t = &out.timings;
        csv.push_str(&format!(
            "loop,{},{f},{},{:.9},{:.9},{:.9},{:.9}\n",
            circuit.num_edges(),
            t.guided_steps,
            t.total_secs,
            t.denoiser_secs,
            t.circuit_secs,
            t.mix_secs
        ));
        overhead.push(json!({ "guided_fraction": f, "guided_steps": t.guided_steps, "circuit_share": t.circuit_secs / t.total_secs.max(1e-12) }));
    }

    let n = points.len() as f64;
    let r2 = if points.len() >= 2 {
        let (mx, my) = (points.iter().map(|p| p.0).sum::<f64>() / n, points.iter().map(|p| p.1).sum::<f64>() / n);
        let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
        Some(sxy * sxy / (sxx * syy))
    } else {
        None
    };
    match &b.out {
        Some(p) => fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(json!({ "command": "bench", "linear_fit_r2": r2, "loop_overhead": overhead, "out": b.out }))
}
