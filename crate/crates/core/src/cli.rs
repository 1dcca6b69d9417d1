//! Run configuration, the on-disk run manifest, and the command-line verbs.
//!
//! Output layout under the output directory:
//!
//! ```text
//! manifest.json
//! data/dataset.csv, data/dataset.json
//! encoders.dpv1
//! seed<s>/labels/domain<d>.dpl1, seed<s>/labels/history_domain<d>.csv
//! seed<s>/target<t>/generator_pos.dpg1, generator_neg.dpg1, fixed_prompt.dpl1, history.csv
//! seed<s>/target<t>/eval_<mode>.csv
//! verify/theory.csv
//! sweep/*.csv, sweep/manifest.json
//! summary.md
//! ```

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{leave_one_out_split, load_dataset, DatasetSpec, DomainDataset};
use crate::diagnostics::seed_sweep;
use crate::encoders::{EncoderConfig, EncoderPair};
use crate::error::{Error, Result};
use crate::generators::{history_csv_bytes, GeneratorModel, Provenance, Stage2Config};
use crate::inference::{eval_csv_bytes, evaluate_lodo, EvalMode, Pipeline};
use crate::pipeline::{build_encoders, train_fixed_prompt, train_target, Stack};
use crate::promptlabels::{DomainPromptLabelPair, LabelTraining, PromptVector, Stage1Config};
use crate::theory::{
    analytic_checks, estimate_lipschitz, input_jacobian_report, linearization_residuals, theory_csv_bytes,
    FusedLogits, TheoryCheck,
};

pub const OUTPUT_ENV: &str = "DPSPG_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub encoder: EncoderConfig,
    pub vocab_seed: u64,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub alpha_fuse: f64,
    pub tau: f64,
    pub tau_bce: f64,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSpec::default(),
            encoder: EncoderConfig::default(),
            vocab_seed: 11,
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            alpha_fuse: 0.2,
            tau: 0.1,
            tau_bce: 0.1,
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("dpspg_out"),
        }
    }
}

fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::Validation {
        field: field.to_string(),
        reason: reason.into(),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| invalid("config", e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid("config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.encoder.validate()?;
        self.stage1_config(0).validate()?;
        self.stage2.validate()?;
        if !(self.alpha_fuse >= 0.0 && self.alpha_fuse.is_finite()) {
            return Err(invalid("alpha_fuse", "must be finite and nonnegative"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid("tau", "must be positive"));
        }
        if !(self.tau_bce > 0.0 && self.tau_bce.is_finite()) {
            return Err(invalid("tau_bce", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(invalid("output_dir", "must not be empty"));
        }
        if self.encoder.d_tok % self.stage2.heads != 0 {
            return Err(invalid("stage2.heads", "must divide encoder.d_tok"));
        }
        Ok(())
    }

    pub fn stage1_config(&self, seed: u64) -> Stage1Config {
        Stage1Config {
            tau: self.tau,
            tau_bce: self.tau_bce,
            seed,
            ..self.stage1.clone()
        }
    }

    pub fn stage2_config(&self, seed: u64) -> Stage2Config {
        Stage2Config {
            seed,
            ..self.stage2.clone()
        }
    }

    /// SHA-256 of the canonical JSON of every field that shapes a trained
    /// artifact. The output directory, the seed list and the fusion weight
    /// are left out.
    pub fn config_hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(m) = v.as_object_mut() {
            for k in ["output_dir", "seeds", "alpha_fuse"] {
                m.remove(k);
            }
        }
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&v)?)))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub stage: String,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// `manifest.json` at the root of the output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    /// Completed stages, e.g. `gen_data` or `train_generators/seed0/target1`.
    pub stages: BTreeMap<String, bool>,
    /// Artifact paths relative to the output directory.
    pub artifacts: BTreeMap<String, ArtifactRecord>,
}

impl RunManifest {
    pub fn path(out: &Path) -> PathBuf {
        out.join("manifest.json")
    }

    pub fn load(out: &Path) -> Result<Self> {
        let path = Self::path(out);
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::StageOrder { path: path.clone() },
            _ => Error::Io(e),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    /// Loads the manifest and checks it belongs to `hash`.
    pub fn load_matching(out: &Path, hash: &str) -> Result<Self> {
        let m = Self::load(out)?;
        if m.config_hash != hash {
            return Err(invalid(
                "config_hash",
                format!("outputs in {} belong to config {}, not {hash}", out.display(), m.config_hash),
            ));
        }
        Ok(m)
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        std::fs::create_dir_all(out)?;
        std::fs::write(Self::path(out), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn require(&self, out: &Path, stage: &str, artifact: &str) -> Result<()> {
        let path = out.join(artifact);
        if !self.stages.get(stage).copied().unwrap_or(false) || !path.exists() {
            return Err(Error::StageOrder { path });
        }
        Ok(())
    }

    pub fn mark(&mut self, stage: impl Into<String>) {
        self.stages.insert(stage.into(), true);
    }

    pub fn record(&mut self, out: &Path, rel: &str, stage: &str, provenance: Option<Provenance>) -> Result<()> {
        let bytes = std::fs::read(out.join(rel))?;
        self.artifacts.insert(
            rel.to_string(),
            ArtifactRecord {
                stage: stage.to_string(),
                sha256: hex::encode(Sha256::digest(&bytes)),
                provenance,
            },
        );
        Ok(())
    }
}

fn check_hash(found: &str, expected: &str, path: &Path) -> Result<()> {
    if found != expected {
        return Err(invalid(
            "config_hash",
            format!("{} was produced by config {found}, current config is {expected}", path.display()),
        ));
    }
    Ok(())
}

fn write_file(out: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    let path = out.join(rel);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn labels_path(seed: u64, domain: usize) -> String {
    format!("seed{seed}/labels/domain{domain}.dpl1")
}

pub fn target_dir(seed: u64, target: usize) -> String {
    format!("seed{seed}/target{target}")
}

const DATASET: &str = "data/dataset.csv";
const DATASET_SIDECAR: &str = "data/dataset.json";
const ENCODERS: &str = "encoders.dpv1";

/// Loaded handles for one run directory.
pub struct Workspace {
    pub config: RunConfig,
    pub out: PathBuf,
    pub hash: String,
    pub manifest: RunManifest,
}

impl Workspace {
    fn open(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let hash = config.config_hash()?;
        let out = config.output_dir.clone();
        let manifest = RunManifest::load_matching(&out, &hash)?;
        Ok(Workspace {
            config: config.clone(),
            out,
            hash,
            manifest,
        })
    }

    fn stack(&self) -> Result<Stack> {
        self.manifest.require(&self.out, "gen_data", DATASET)?;
        self.manifest.require(&self.out, "gen_data", ENCODERS)?;
        let dataset: DomainDataset = load_dataset(&self.out.join(DATASET))?;
        let (encoders, vocab, hash) = EncoderPair::load(&self.out.join(ENCODERS), &self.config.encoder)?;
        check_hash(&hash, &self.hash, &self.out.join(ENCODERS))?;
        Ok(Stack {
            dataset,
            encoders,
            vocab,
            alignment: None,
        })
    }

    fn labels(&self, seed: u64, num_domains: usize) -> Result<Vec<LabelTraining>> {
        let stage = format!("train_labels/seed{seed}");
        (0..num_domains)
            .map(|d| {
                let rel = labels_path(seed, d);
                self.manifest.require(&self.out, &stage, &rel)?;
                let (pair, hash) = DomainPromptLabelPair::load(&self.out.join(&rel))?;
                check_hash(&hash, &self.hash, &self.out.join(&rel))?;
                Ok(LabelTraining {
                    pair,
                    history: Vec::new(),
                })
            })
            .collect()
    }

    fn save(&self) -> Result<()> {
        self.manifest.save(&self.out)
    }
}

/// Generates the dataset and the aligned encoder pair. Starts a fresh
/// manifest for the configuration.
pub fn cmd_gen_data(config: &RunConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let hash = config.config_hash()?;
    let out = &config.output_dir;
    let ds = crate::datagen::generate_dataset(&config.dataset)?;
    ds.write(&out.join(DATASET))?;
    let (enc, vocab, _) = build_encoders(config, &ds)?;
    enc.save(&vocab, &hash, &out.join(ENCODERS))?;
    let mut m = RunManifest {
        config_hash: hash,
        ..RunManifest::default()
    };
    for rel in [DATASET, DATASET_SIDECAR, ENCODERS] {
        m.record(out, rel, "gen_data", None)?;
    }
    m.mark("gen_data");
    m.save(out)?;
    Ok([DATASET, DATASET_SIDECAR, ENCODERS].iter().map(|r| out.join(r)).collect())
}

fn label_history_csv(h: &LabelTraining) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "epoch",
        "positive_loss",
        "positive_train_accuracy",
        "positive_val_accuracy",
        "positive_val_ce",
        "negative_loss",
        "negative_val_bce",
        "negative_val_accuracy",
    ])?;
    for e in &h.history {
        w.write_record([
            e.epoch.to_string(),
            e.positive_loss.to_string(),
            e.positive_train_accuracy.to_string(),
            e.positive_val_accuracy.to_string(),
            e.positive_val_ce.to_string(),
            e.negative_loss.to_string(),
            e.negative_val_bce.to_string(),
            e.negative_val_accuracy.to_string(),
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// Stage one for every configured seed and every domain.
pub fn cmd_train_labels(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut ws = Workspace::open(config)?;
    let stack = ws.stack()?;
    let mut written = Vec::new();
    for &seed in &config.seeds {
        let stage = format!("train_labels/seed{seed}");
        for t in crate::pipeline::train_labels(config, &stack, seed)? {
            let rel = labels_path(seed, t.pair.domain);
            t.pair.save(&ws.hash, &ws.out.join(&rel))?;
            let hist = format!("seed{seed}/labels/history_domain{}.csv", t.pair.domain);
            write_file(&ws.out, &hist, &label_history_csv(&t)?)?;
            for r in [&rel, &hist] {
                ws.manifest.record(&ws.out, r, &stage, None)?;
                written.push(ws.out.join(r));
            }
        }
        ws.manifest.mark(stage);
    }
    ws.save()?;
    Ok(written)
}

fn targets_of(config: &RunConfig, target: Option<usize>) -> Result<Vec<usize>> {
    match target {
        Some(t) if t >= config.dataset.num_domains => Err(invalid(
            "target",
            format!("{t} is out of range for {} domains", config.dataset.num_domains),
        )),
        Some(t) => Ok(vec![t]),
        None => Ok((0..config.dataset.num_domains).collect()),
    }
}

/// Stage two (both generators) plus the pooled fixed prompt, per target.
pub fn cmd_train_generators(config: &RunConfig, target: Option<usize>) -> Result<Vec<PathBuf>> {
    let mut ws = Workspace::open(config)?;
    let stack = ws.stack()?;
    let mut written = Vec::new();
    for &seed in &config.seeds {
        let labels = ws.labels(seed, stack.dataset.spec.num_domains)?;
        for t in targets_of(config, target)? {
            let stage = format!("train_generators/seed{seed}/target{t}");
            let dir = target_dir(seed, t);
            let trained = train_target(config, &stack, &labels, t, seed, false, false)?;
            let neg = trained
                .negative
                .as_ref()
                .ok_or_else(|| Error::state("dual-path training produced no negative generator"))?;
            let pos_rel = format!("{dir}/generator_pos.dpg1");
            let neg_rel = format!("{dir}/generator_neg.dpg1");
            trained.positive.save(&trained.provenance, &ws.hash, &ws.out.join(&pos_rel))?;
            neg.save(&trained.provenance, &ws.hash, &ws.out.join(&neg_rel))?;
            let hist_rel = format!("{dir}/history.csv");
            write_file(&ws.out, &hist_rel, &history_csv_bytes(&trained.history)?)?;
            let (fixed, fixed_prov) = train_fixed_prompt(config, &stack, t, seed)?;
            let fixed_rel = format!("{dir}/fixed_prompt.dpl1");
            fixed_pair(t, &fixed).save(&ws.hash, &ws.out.join(&fixed_rel))?;
            for (rel, prov) in [
                (&pos_rel, Some(trained.provenance.clone())),
                (&neg_rel, Some(trained.provenance.clone())),
                (&hist_rel, None),
                (&fixed_rel, Some(fixed_prov)),
            ] {
                ws.manifest.record(&ws.out, rel, &stage, prov)?;
                written.push(ws.out.join(rel));
            }
            ws.manifest.mark(stage);
        }
    }
    ws.save()?;
    Ok(written)
}

/// The pooled prompt travels in a label checkpoint with a zero negative
/// prompt; its domain field names the target it was fitted to exclude.
fn fixed_pair(target: usize, prompt: &PromptVector) -> DomainPromptLabelPair {
    let zeros = crate::numkernel::Tensor::zeros(prompt.tokens().shape());
    DomainPromptLabelPair {
        domain: target,
        positive: prompt.clone(),
        negative: PromptVector::new(zeros).expect("zero prompt has a valid shape"),
        val_accuracy: 0.0,
        val_ce: 0.0,
        val_bce: 0.0,
        train_accuracy: 0.0,
        epoch_selected: 0,
        epoch_selected_negative: 0,
        oracle: false,
    }
}

struct TrainedTarget {
    positive: GeneratorModel,
    negative: GeneratorModel,
    provenance: Provenance,
    fixed: PromptVector,
    fixed_provenance: Provenance,
}

impl Workspace {
    fn trained_target(&self, seed: u64, target: usize) -> Result<TrainedTarget> {
        let stage = format!("train_generators/seed{seed}/target{target}");
        let dir = target_dir(seed, target);
        let load = |name: &str| -> Result<(GeneratorModel, Provenance)> {
            let rel = format!("{dir}/{name}");
            self.manifest.require(&self.out, &stage, &rel)?;
            let (g, prov, hash) = GeneratorModel::load(&self.out.join(&rel))?;
            check_hash(&hash, &self.hash, &self.out.join(&rel))?;
            Ok((g, prov))
        };
        let (positive, provenance) = load("generator_pos.dpg1")?;
        let (negative, _) = load("generator_neg.dpg1")?;
        let rel = format!("{dir}/fixed_prompt.dpl1");
        self.manifest.require(&self.out, &stage, &rel)?;
        let (fixed, hash) = DomainPromptLabelPair::load(&self.out.join(&rel))?;
        check_hash(&hash, &self.hash, &self.out.join(&rel))?;
        let fixed_provenance = self
            .manifest
            .artifacts
            .get(&rel)
            .and_then(|a| a.provenance.clone())
            .ok_or_else(|| Error::Contamination(format!("{rel} carries no provenance")))?;
        Ok(TrainedTarget {
            positive,
            negative,
            provenance,
            fixed: fixed.positive,
            fixed_provenance,
        })
    }
}

/// Evaluates the stored models of every configured seed on `target`.
pub fn cmd_eval(config: &RunConfig, target: usize, mode: EvalMode) -> Result<Vec<PathBuf>> {
    let mut ws = Workspace::open(config)?;
    targets_of(config, Some(target))?;
    let stack = ws.stack()?;
    let mut written = Vec::new();
    for &seed in &config.seeds {
        let m = ws.trained_target(seed, target)?;
        let p = Pipeline::new(&stack.encoders, &stack.vocab)
            .with_generators(&m.positive, Some(&m.negative), &m.provenance)
            .with_fixed_prompt(&m.fixed, &m.fixed_provenance);
        let report = evaluate_lodo(&stack.dataset, target, &p, mode, config.alpha_fuse, config.tau, seed)?;
        let rel = format!("{}/eval_{}.csv", target_dir(seed, target), mode.as_str());
        write_file(&ws.out, &rel, &eval_csv_bytes(&[report])?)?;
        ws.manifest.record(&ws.out, &rel, &format!("eval/seed{seed}/target{target}"), None)?;
        ws.manifest.mark(format!("eval/seed{seed}/target{target}/{}", mode.as_str()));
        written.push(ws.out.join(rel));
    }
    ws.save()?;
    Ok(written)
}

/// The multi-seed sweep over every target. Builds its own dataset and
/// encoders from the configuration, so it needs no earlier stage.
pub fn cmd_sweep(config: &RunConfig, jobs: usize) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let outcome = seed_sweep(config, &config.seeds, jobs)?;
    let paths = outcome.write(&config.output_dir.join("sweep"))?;
    for f in &outcome.failures {
        eprintln!("seed {} failed: {}", f.seed, f.error);
    }
    Ok(paths)
}

/// Closed-form checks, plus finite-difference checks on the stored
/// pipeline of the first seed and `target` when it has been trained.
pub fn cmd_verify(config: &RunConfig, target: usize) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let seed = config.seeds[0];
    let mut checks = analytic_checks(seed)?;
    if let Ok(ws) = Workspace::open(config) {
        if ws.manifest.stages.contains_key(&format!("train_generators/seed{seed}/target{target}")) {
            let stack = ws.stack()?;
            let m = ws.trained_target(seed, target)?;
            let p = Pipeline::new(&stack.encoders, &stack.vocab).with_generators(
                &m.positive,
                Some(&m.negative),
                &m.provenance,
            );
            checks.extend(pipeline_checks(&stack, &p, target, config.alpha_fuse, config.tau, seed)?);
        } else {
            eprintln!("no trained generators for seed {seed}, target {target}; pipeline checks skipped");
        }
    }
    let rel = "verify/theory.csv";
    write_file(&config.output_dir, rel, &theory_csv_bytes(&checks)?)?;
    Ok(vec![config.output_dir.join(rel)])
}

/// Linearization decay and the empirical Lipschitz bound on a trained pipeline.
pub fn pipeline_checks(
    stack: &Stack,
    pipeline: &Pipeline<'_>,
    target: usize,
    alpha: f64,
    tau: f64,
    seed: u64,
) -> Result<Vec<TheoryCheck>> {
    use rand::{Rng, SeedableRng};
    let ds = &stack.dataset;
    let split = leave_one_out_split(ds, target)?;
    let map = FusedLogits {
        pipeline: *pipeline,
        mode: EvalMode::Full,
        alpha,
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = (0..12).map(|_| split.target_indices[rng.random_range(0..split.target_indices.len())]).collect();
    let k = ds.num_classes();
    let probes: Vec<(Vec<f64>, usize, usize)> = picks
        .iter()
        .map(|&i| {
            let s = &ds.samples[i];
            (s.x.clone(), s.label, (s.label + 1 + rng.random_range(0..k - 1)) % k)
        })
        .collect();
    let eps = 1e-5;
    let l = estimate_lipschitz(&map, &probes, eps)?;
    let mut out = Vec::new();
    for (x, y, i) in &probes {
        let r = input_jacobian_report(&map, x, *y, *i, tau, l, eps)?;
        out.push(TheoryCheck::new(
            "input_jacobian_lipschitz",
            format!("y={y};i={i};delta={}", r.delta),
            r.fd_norm,
            r.lipschitz_bound.unwrap_or(f64::NAN),
            r.bound_satisfied,
        ));
    }
    let ratio = linearization_ratio(&map, &probes, tau, seed)?;
    out.push(TheoryCheck::new(
        "linearization_ratio",
        format!("trials={}", probes.len()),
        ratio,
        4.0,
        (3.5..=4.5).contains(&ratio),
    ));
    Ok(out)
}

/// Geometric mean over probes of `r(h) / r(h/2)` along random unit
/// directions, skipping probes whose residual sits at rounding level.
pub fn linearization_ratio(
    map: &dyn crate::theory::LogitMap,
    probes: &[(Vec<f64>, usize, usize)],
    tau: f64,
    seed: u64,
) -> Result<f64> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut logs = Vec::new();
    for (x, _, _) in probes {
        let mut d: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = crate::numkernel::l2_norm(&d);
        d.iter_mut().for_each(|v| *v /= n);
        let (r1, r2) = linearization_residuals(map, x, &d, 1e-2, tau)?;
        if r2 > 1e-11 {
            logs.push((r1 / r2).ln());
        }
    }
    if logs.is_empty() {
        return Err(Error::numeric("every linearization residual is at rounding level"));
    }
    Ok((logs.iter().sum::<f64>() / logs.len() as f64).exp())
}

/// Collects every evaluation CSV and the sweep aggregate into `summary.md`.
pub fn cmd_report(config: &RunConfig) -> Result<(PathBuf, String)> {
    let ws = Workspace::open(config)?;
    let mut text = format!("# Run summary\n\nconfig hash: `{}`\n\n", ws.hash);
    let mut rows = Vec::new();
    for rel in ws.manifest.artifacts.keys() {
        if rel.contains("/eval_") && rel.ends_with(".csv") {
            let mut r = csv::Reader::from_path(ws.out.join(rel))?;
            for rec in r.records() {
                let rec = rec?;
                rows.push(format!(
                    "| {} | {} | {} | {} | {} |",
                    &rec[4], &rec[0], &rec[1], &rec[2], &rec[5]
                ));
            }
        }
    }
    if rows.is_empty() {
        text.push_str("No evaluations recorded yet.\n");
    } else {
        text.push_str("| seed | target | mode | alpha | accuracy |\n|---|---|---|---|---|\n");
        text.push_str(&rows.join("\n"));
        text.push('\n');
    }
    let agg = ws.out.join("sweep/aggregate.csv");
    if agg.exists() {
        text.push_str("\n## Sweep\n\n| variant | mode | target | seeds | mean | std |\n|---|---|---|---|---|---|\n");
        let mut r = csv::Reader::from_path(&agg)?;
        for rec in r.records() {
            let rec = rec?;
            text.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                &rec[0], &rec[1], &rec[2], &rec[3], &rec[4], &rec[5]
            ));
        }
    }
    let path = ws.out.join("summary.md");
    std::fs::write(&path, &text)?;
    Ok((path, text))
}

// ---------------------------------------------------------------------------
// Argument parsing

#[derive(Parser, Debug)]
#[command(name = "dpspg", version, about = "Dual-path soft prompt generation on synthetic domains")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides DPSPG_OUT and the config file).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run a single training seed.
    #[arg(long, global = true, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated training seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    pub alpha_fuse: Option<f64>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    #[arg(long, global = true)]
    pub alpha_loss: Option<f64>,
    #[arg(long, global = true)]
    pub stage1_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub stage2_epochs: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the dataset and the aligned encoder pair.
    GenData,
    /// Fit positive and negative prompt labels for every domain.
    TrainLabels,
    /// Train both prompt generators and the pooled fixed prompt.
    TrainGenerators {
        /// Held-out domain; every domain when omitted.
        #[arg(long)]
        target: Option<usize>,
    },
    /// Evaluate stored models on a held-out domain.
    Eval {
        #[arg(long)]
        target: usize,
        #[arg(long, default_value = "full")]
        mode: EvalMode,
    },
    /// Multi-seed sweep with variability, stability and oracle diagnostics.
    Sweep {
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Numeric checks of the margin and gradient-norm claims.
    Verify {
        #[arg(long, default_value_t = 0)]
        target: usize,
    },
    /// Summarize every recorded evaluation.
    Report,
}

impl clap::ValueEnum for EvalMode {
    fn value_variants<'a>() -> &'a [Self] {
        &EvalMode::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.as_str()))
    }
}

/// Defaults, then the config file, then `DPSPG_OUT`, then flags.
pub fn resolve_config(args: &CommonArgs, env_out: Option<OsString>) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = env_out.filter(|o| !o.is_empty()) {
        cfg.output_dir = PathBuf::from(o);
    }
    if let Some(o) = &args.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(s) = &args.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(a) = args.alpha_fuse {
        cfg.alpha_fuse = a;
    }
    if let Some(t) = args.tau {
        cfg.tau = t;
    }
    if let Some(a) = args.alpha_loss {
        cfg.stage2.alpha_loss = a;
    }
    if let Some(e) = args.stage1_epochs {
        cfg.stage1.epochs = e;
    }
    if let Some(e) = args.stage2_epochs {
        cfg.stage2.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli, env_out: Option<OsString>) -> Result<Vec<PathBuf>> {
    let cfg = resolve_config(&cli.common, env_out)?;
    match &cli.command {
        Command::GenData => cmd_gen_data(&cfg),
        Command::TrainLabels => cmd_train_labels(&cfg),
        Command::TrainGenerators { target } => cmd_train_generators(&cfg, *target),
        Command::Eval { target, mode } => cmd_eval(&cfg, *target, *mode),
        Command::Sweep { jobs } => cmd_sweep(&cfg, *jobs),
        Command::Verify { target } => cmd_verify(&cfg, *target),
        Command::Report => {
            let (path, text) = cmd_report(&cfg)?;
            print!("{text}");
            Ok(vec![path])
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli, std::env::var_os(OUTPUT_ENV)) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
