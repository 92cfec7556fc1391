//! Run configuration: one TOML or JSON document with a section per command,
//! patched by `--set key=value` overrides before it is deserialized.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::Value;

use pcguide::certify::CertifyConfig;
use pcguide::diffusion::ScheduleConfig;
use pcguide::guidance::MixSchedule;
use pcguide::learning::EmConfig;

use crate::error::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub gen_data: GenDataConfig,
    pub train_pc: TrainPcConfig,
    pub train_codebook: TrainCodebookConfig,
    pub inpaint: InpaintConfig,
    pub fuse: FuseConfig,
    pub verify: VerifyConfig,
    pub bench: BenchConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataConfig {
    pub generator: String,
    pub height: usize,
    pub width: usize,
    pub num_cats: usize,
    pub num_samples: usize,
    pub noise: f64,
    pub out: Option<PathBuf>,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self { generator: "bars".into(), height: 8, width: 8, num_cats: 2, num_samples: 1000, noise: 0.02, out: None }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmSection {
    pub step_size: f64,
    pub batch_size: usize,
    pub pseudocount: f64,
    pub num_iterations: usize,
}

impl Default for EmSection {
    fn default() -> Self {
        let d = EmConfig::default();
        Self { step_size: d.step_size, batch_size: d.batch_size, pseudocount: d.pseudocount, num_iterations: d.num_iterations }
    }
}

impl EmSection {
    pub fn with_seed(&self, seed: u64) -> EmConfig {
        EmConfig {
            step_size: self.step_size,
            batch_size: self.batch_size,
            pseudocount: self.pseudocount,
            num_iterations: self.num_iterations,
            seed,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StructureSection {
    /// Grid dims; a square grid is inferred from the dataset when absent.
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub sums_per_region: usize,
    pub max_split_depth: Option<usize>,
    pub tie_leaf_params: bool,
}

impl Default for StructureSection {
    fn default() -> Self {
        Self { height: None, width: None, sums_per_region: 4, max_split_depth: None, tie_leaf_params: false }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPcConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub structure: StructureSection,
    pub em: EmSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCodebookConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub patch_height: usize,
    pub patch_width: usize,
    pub k: usize,
    /// Also fit a circuit over the codes of the training images and save it here.
    pub latent_circuit_out: Option<PathBuf>,
    pub latent_em: EmSection,
}

impl Default for TrainCodebookConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            out: None,
            height: None,
            width: None,
            patch_height: 2,
            patch_width: 2,
            k: 8,
            latent_circuit_out: None,
            latent_em: EmSection { num_iterations: 50, ..EmSection::default() },
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixSection {
    /// `celeba`, `imagenet` or `lsun`; explicit fields below override it.
    pub preset: Option<String>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub lambda: Option<f64>,
    pub t_cut: Option<usize>,
}

impl Default for MixSection {
    fn default() -> Self {
        Self { preset: Some("celeba".into()), a: None, b: None, lambda: None, t_cut: None }
    }
}

impl MixSection {
    pub fn resolve(&self, num_steps: usize) -> Result<MixSchedule, CliError> {
        let base = match &self.preset {
            Some(name) => MixSchedule::preset(name).ok_or_else(|| CliError::Config(format!("unknown mix preset {name:?}")))?,
            None => MixSchedule::celeba(),
        };
        let mut m = MixSchedule { num_steps, ..base };
        if num_steps != base.num_steps {
            // Keep the preset's guided fraction on a different step count.
            m.t_cut = base.t_cut * num_steps / base.num_steps;
        }
        m.a = self.a.unwrap_or(m.a);
        m.b = self.b.unwrap_or(m.b);
        m.lambda = self.lambda.unwrap_or(m.lambda);
        m.t_cut = self.t_cut.unwrap_or(m.t_cut);
        if !(0.0..=1.0).contains(&m.a) || !(0.0..=1.0).contains(&m.b) || m.a > m.b || m.lambda < 0.0 {
            return Err(CliError::Config(format!("mix needs 0 <= a <= b <= 1 and lambda >= 0, got {m:?}")));
        }
        Ok(m)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentSection {
    pub codebook: Option<PathBuf>,
    pub circuit: Option<PathBuf>,
    /// Soft-assignment temperature; hard assignment when absent.
    pub temperature: Option<f64>,
    pub evidence_samples: usize,
    pub decodes: usize,
}

impl Default for LatentSection {
    fn default() -> Self {
        Self {
            codebook: None,
            circuit: None,
            temperature: Some(0.5),
            evidence_samples: pcguide::latent::DEFAULT_EVIDENCE_SAMPLES,
            decodes: pcguide::latent::DEFAULT_DECODES,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InpaintConfig {
    /// Pixel-space guide circuit.
    pub circuit: Option<PathBuf>,
    /// Images to inpaint.
    pub dataset: Option<PathBuf>,
    /// Images the denoiser is fitted to; defaults to `dataset`.
    pub train_dataset: Option<PathBuf>,
    /// Circuit scoring the samples; defaults to `circuit`.
    pub evaluator: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub mask: String,
    pub num_samples: usize,
    pub first_index: usize,
    pub smoothing: f64,
    pub trace_every: Option<usize>,
    pub schedule: ScheduleConfig,
    pub mix: MixSection,
    /// Guide in latent space instead of pixel space.
    pub latent: Option<LatentSection>,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            circuit: None,
            dataset: None,
            train_dataset: None,
            evaluator: None,
            out_dir: None,
            height: None,
            width: None,
            mask: "left".into(),
            num_samples: 10,
            first_index: 0,
            smoothing: 1.0,
            trace_every: None,
            schedule: ScheduleConfig::default(),
            mix: MixSection::default(),
            latent: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSection {
    /// Row of the reference dataset.
    pub index: usize,
    /// Hidden region of the reference; its complement is used.
    pub mask: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FuseConfig {
    pub codebook: Option<PathBuf>,
    pub latent_circuit: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub references: Vec<ReferenceSection>,
    pub lambda: f64,
    pub num_samples: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for FuseConfig {
    fn default() -> Self {
        Self { codebook: None, latent_circuit: None, dataset: None, references: Vec::new(), lambda: 0.5, num_samples: 4, out_dir: None }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub cases: usize,
    pub min_vars: usize,
    pub max_vars: usize,
    pub num_cats: usize,
    pub tolerance: f64,
    /// Test hook: corrupt one sum weight per case on the fast path.
    pub corrupt: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        let d = CertifyConfig::default();
        Self { cases: d.cases, min_vars: d.min_vars, max_vars: d.max_vars, num_cats: d.num_cats, tolerance: d.marginal_tol, corrupt: false }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub edges: Vec<usize>,
    pub reps: usize,
    pub circuit: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub height: usize,
    pub width: usize,
    pub loop_steps: usize,
    pub guided_fractions: Vec<f64>,
    pub out: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            edges: vec![10_000, 20_000, 40_000, 80_000],
            reps: 5,
            circuit: None,
            dataset: None,
            height: 8,
            width: 8,
            loop_steps: 100,
            guided_fractions: vec![0.0, 0.1, 0.2, 0.5, 1.0],
            out: None,
        }
    }
}

fn parse_document(text: &str, path: &Path) -> Result<Value, CliError> {
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    } else {
        let v: toml::Value = toml::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::to_value(v).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Parses an override value as JSON when possible, otherwise as a bare string.
fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {assignment:?}")))?;
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::Usage(format!("empty key segment in {key:?}")));
        }
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        let map = node.as_object_mut().expect("just ensured an object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parse_override_value(raw));
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Loads the config file (if any), applies overrides and the seed flag, and
/// resolves relative paths against the config file's directory.
pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|_| CliError::FileNotFound(p.to_path_buf()))?;
            parse_document(&text, p)?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    if let Some(s) = seed {
        apply_override(&mut doc, &format!("seed={s}"))?;
    }
    let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(base) = path.and_then(Path::parent) {
        cfg.resolve_paths(base);
    }
    Ok(cfg)
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.gen_data.out);
        for p in [&mut self.train_pc.dataset, &mut self.train_pc.out, &mut self.train_pc.report] {
            resolve(base, p);
        }
        for p in [&mut self.train_codebook.dataset, &mut self.train_codebook.out, &mut self.train_codebook.latent_circuit_out] {
            resolve(base, p);
        }
        let ip = &mut self.inpaint;
        for p in [&mut ip.circuit, &mut ip.dataset, &mut ip.train_dataset, &mut ip.evaluator, &mut ip.out_dir] {
            resolve(base, p);
        }
        if let Some(l) = &mut ip.latent {
            resolve(base, &mut l.codebook);
            resolve(base, &mut l.circuit);
        }
        let f = &mut self.fuse;
        for p in [&mut f.codebook, &mut f.latent_circuit, &mut f.dataset, &mut f.out_dir] {
            resolve(base, p);
        }
        for p in [&mut self.bench.circuit, &mut self.bench.dataset, &mut self.bench.out] {
            resolve(base, p);
        }
    }
}
