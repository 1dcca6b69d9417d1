//! Prompt variability, training stability, oracle prompts, 2-D projections,
//! and the multi-seed sweep that produces all of them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::cli::RunConfig;
use crate::datagen::DomainDataset;
use crate::encoders::{ClassVocabulary, EncoderPair};
use crate::error::{Error, Result};
use crate::generators::TrainedGenerators;
use crate::inference::{eval_csv_bytes, evaluate_lodo, EvalMode, EvalReport, Pipeline};
use crate::numkernel::euclidean_distance;
use crate::pipeline::{
    build_stack, eval_noise_seed, train_fixed_prompt, train_labels, train_target, Stack, STABILITY_WINDOW,
};
use crate::promptlabels::{similarities, train_domain_labels, DomainPromptLabelPair, PromptVector, Stage1Config};

pub const VARIABILITY_DEFINITIONS: &str = "R_d: mean pairwise Euclidean distance between flattened \
generated prompts of domain d (pooled over seeds unless per-seed); D: mean pairwise Euclidean distance \
between per-domain prompt centroids; lambda: R_target / D";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DomainSpread {
    pub domain: usize,
    pub r: f64,
    pub n_prompts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariabilityReport {
    pub domains: Vec<DomainSpread>,
    pub d: f64,
    pub target: usize,
    pub lambda: f64,
}

fn mean_pairwise(points: &[&[f64]]) -> f64 {
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += euclidean_distance(points[i], points[j]);
        }
    }
    total / (n * (n - 1) / 2) as f64
}

/// Variability of flattened prompts grouped by domain, with `lambda` read
/// off for `target`.
pub fn variability_flat(sets: &BTreeMap<usize, Vec<Vec<f64>>>, target: usize) -> Result<VariabilityReport> {
    if sets.len() < 2 {
        return Err(Error::input("variability needs at least two domains"));
    }
    let dim = sets.values().flatten().next().map_or(0, |v| v.len());
    let mut domains = Vec::with_capacity(sets.len());
    let mut centroids = Vec::with_capacity(sets.len());
    for (&domain, prompts) in sets {
        if prompts.len() < 2 {
            return Err(Error::input(format!("domain {domain} has fewer than two prompts")));
        }
        if prompts.iter().any(|p| p.len() != dim) {
            return Err(Error::shape("prompts differ in size"));
        }
        let refs: Vec<&[f64]> = prompts.iter().map(|p| p.as_slice()).collect();
        domains.push(DomainSpread {
            domain,
            r: mean_pairwise(&refs),
            n_prompts: prompts.len(),
        });
        let mut c = vec![0.0; dim];
        for p in prompts {
            c.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        c.iter_mut().for_each(|a| *a /= prompts.len() as f64);
        centroids.push(c);
    }
    let refs: Vec<&[f64]> = centroids.iter().map(|c| c.as_slice()).collect();
    let d = mean_pairwise(&refs);
    let r_target = domains
        .iter()
        .find(|s| s.domain == target)
        .ok_or_else(|| Error::input(format!("no prompts for target domain {target}")))?
        .r;
    if !(d > 0.0) {
        return Err(Error::numeric("domain prompt centroids coincide"));
    }
    Ok(VariabilityReport {
        domains,
        d,
        target,
        lambda: r_target / d,
    })
}

pub fn variability(sets: &BTreeMap<usize, Vec<PromptVector>>, target: usize) -> Result<VariabilityReport> {
    let flat = sets
        .iter()
        .map(|(&d, ps)| (d, ps.iter().map(|p| p.flatten()).collect()))
        .collect();
    variability_flat(&flat, target)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityReport {
    pub accuracy_history: Vec<f64>,
    pub std_last_10: f64,
    pub final_accuracy: f64,
}

/// Population standard deviation of the last ten accuracies.
pub fn training_stability(history: &[f64]) -> Result<StabilityReport> {
    if history.len() < STABILITY_WINDOW {
        return Err(Error::input(format!(
            "stability needs {STABILITY_WINDOW} epochs, got {}",
            history.len()
        )));
    }
    let tail = &history[history.len() - STABILITY_WINDOW..];
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    let var = tail.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / tail.len() as f64;
    Ok(StabilityReport {
        accuracy_history: history.to_vec(),
        std_last_10: var.sqrt(),
        final_accuracy: history[history.len() - 1],
    })
}

/// Stage-1 labels fitted directly on `target`. Tagged as an oracle, so it can
/// be inspected but never used to train or evaluate generators.
pub fn oracle_prompt(
    ds: &DomainDataset,
    target: usize,
    enc: &EncoderPair,
    vocab: &ClassVocabulary,
    cfg: &Stage1Config,
) -> Result<DomainPromptLabelPair> {
    let mut pair = train_domain_labels(ds, target, enc, vocab, cfg)?.pair;
    pair.oracle = true;
    Ok(pair)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Projection {
    pub coords: Vec<(f64, f64)>,
    /// Variance along the two kept axes and in total.
    pub explained: (f64, f64),
    pub total_variance: f64,
    /// Fewer than two directions vary; the second coordinate is zero.
    pub rank_deficient: bool,
}

/// Projection onto the top two principal axes. Each axis is signed so that
/// its first nonzero loading is positive.
pub fn project_2d(points: &[Vec<f64>]) -> Result<Projection> {
    let n = points.len();
    if n < 3 {
        return Err(Error::input("projection needs at least three prompts"));
    }
    let p = points[0].len();
    if p == 0 || points.iter().any(|v| v.len() != p) {
        return Err(Error::shape("prompts differ in size"));
    }
    let mut mean = vec![0.0; p];
    for v in points {
        mean.iter_mut().zip(v).for_each(|(m, x)| *m += x / n as f64);
    }
    let centered = DMatrix::from_fn(n, p, |i, j| points[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total_variance: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let lam = |k: usize| order.get(k).map_or(0.0, |&i| eig.eigenvalues[i].max(0.0));
    let tol = 1e-12 * total_variance.max(f64::MIN_POSITIVE);
    let rank_deficient = lam(1) <= tol;
    let axis = |k: usize| -> Vec<f64> {
        let Some(&i) = order.get(k) else { return vec![0.0; p] };
        let col: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let sign = col.iter().find(|v| v.abs() > 1e-12).map_or(1.0, |v| v.signum());
        col.into_iter().map(|v| v * sign).collect()
    };
    let a1 = axis(0);
    let a2 = axis(1);
    let coords = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let x: f64 = row.iter().zip(&a1).map(|(u, v)| u * v).sum();
            let y: f64 = if rank_deficient { 0.0 } else { row.iter().zip(&a2).map(|(u, v)| u * v).sum() };
            (x, y)
        })
        .collect();
    Ok(Projection {
        coords,
        explained: (lam(0), if rank_deficient { 0.0 } else { lam(1) }),
        total_variance,
        rank_deficient,
    })
}

// ---------------------------------------------------------------------------
// Seed sweep

/// Generated positive prompts (and negative ones for the dual path) for
/// every sample, grouped by the sample's domain.
#[derive(Clone, Debug, Default)]
pub struct PromptCloud {
    pub positive: BTreeMap<usize, Vec<Vec<f64>>>,
    pub negative: BTreeMap<usize, Vec<Vec<f64>>>,
}

#[derive(Clone, Debug)]
pub struct TargetResult {
    pub target: usize,
    /// Dual-path models in the full, positive-only and fixed-prompt modes.
    pub dual: Vec<EvalReport>,
    /// Noisy single-path model.
    pub single: EvalReport,
    pub dual_stability: StabilityReport,
    pub single_stability: StabilityReport,
    pub dual_prompts: PromptCloud,
    pub single_prompts: PromptCloud,
    pub oracle: PromptVector,
    pub oracle_accuracy: f64,
    pub dual_oracle_distance: f64,
    pub single_oracle_distance: f64,
}

#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    /// Stage-one training accuracy of each domain's positive label.
    pub label_train_accuracy: Vec<f64>,
    pub targets: Vec<TargetResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariabilityRow {
    pub variant: String,
    pub target: usize,
    /// `None` for the pooled figure.
    pub seed: Option<u64>,
    pub r: f64,
    pub d: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub results: Vec<SeedResult>,
    pub failures: Vec<SeedFailure>,
    pub variability: Vec<VariabilityRow>,
}

fn generate_cloud(stack: &Stack, models: &TrainedGenerators, noise_seed: u64) -> Result<PromptCloud> {
    let ds = &stack.dataset;
    let all: Vec<usize> = (0..ds.samples.len()).collect();
    let e = stack.encoders.encode_images(&ds.inputs(&all)?)?;
    let p = Pipeline::new(&stack.encoders, &stack.vocab)
        .with_generators(&models.positive, models.negative.as_ref(), &models.provenance)
        .with_noise_seed(noise_seed);
    let (pos, neg) = p.prompts(&e)?;
    let width = models.positive.config.context_len * models.positive.config.d_tok;
    let mut cloud = PromptCloud::default();
    for (i, s) in ds.samples.iter().enumerate() {
        cloud
            .positive
            .entry(s.domain)
            .or_default()
            .push(pos.data()[i * width..(i + 1) * width].to_vec());
        if let Some(neg) = &neg {
            cloud
                .negative
                .entry(s.domain)
                .or_default()
                .push(neg.data()[i * width..(i + 1) * width].to_vec());
        }
    }
    Ok(cloud)
}

fn mean_distance_to(prompts: &[Vec<f64>], anchor: &[f64]) -> f64 {
    prompts.iter().map(|p| euclidean_distance(p, anchor)).sum::<f64>() / prompts.len() as f64
}

fn history_accuracy(models: &TrainedGenerators) -> Vec<f64> {
    models.history.iter().filter_map(|h| h.observed).collect()
}

fn run_target(cfg: &RunConfig, stack: &Stack, labels: &[crate::promptlabels::LabelTraining], target: usize, seed: u64) -> Result<TargetResult> {
    let ds = &stack.dataset;
    let dual = train_target(cfg, stack, labels, target, seed, false, true)?;
    let single = train_target(cfg, stack, labels, target, seed, true, true)?;
    let (fixed, fixed_prov) = train_fixed_prompt(cfg, stack, target, seed)?;
    let final_noise = eval_noise_seed(seed, target, 0);

    let p = Pipeline::new(&stack.encoders, &stack.vocab)
        .with_generators(&dual.positive, dual.negative.as_ref(), &dual.provenance)
        .with_fixed_prompt(&fixed, &fixed_prov);
    let dual_reports = EvalMode::ALL
        .iter()
        .map(|&m| evaluate_lodo(ds, target, &p, m, cfg.alpha_fuse, cfg.tau, seed))
        .collect::<Result<Vec<_>>>()?;
    let ps = Pipeline::new(&stack.encoders, &stack.vocab)
        .with_generators(&single.positive, None, &single.provenance)
        .with_noise_seed(final_noise);
    let single_report = evaluate_lodo(ds, target, &ps, EvalMode::PositiveOnly, cfg.alpha_fuse, cfg.tau, seed)?;

    let dual_prompts = generate_cloud(stack, &dual, final_noise)?;
    let single_prompts = generate_cloud(stack, &single, final_noise)?;

    let oracle = oracle_prompt(ds, target, &stack.encoders, &stack.vocab, &cfg.stage1_config(seed))?;
    let idx = ds.domain_indices(target);
    let e = stack.encoders.encode_images(&ds.inputs(&idx)?)?;
    let s = similarities(&stack.encoders, &stack.vocab, &oracle.positive, &stack.vocab.positive_template, &e)?;
    let oracle_accuracy = crate::promptlabels::accuracy_argmax(&s, &ds.labels(&idx));
    let anchor = oracle.positive.flatten();
    Ok(TargetResult {
        target,
        dual: dual_reports,
        single: single_report,
        dual_stability: training_stability(&history_accuracy(&dual))?,
        single_stability: training_stability(&history_accuracy(&single))?,
        dual_oracle_distance: mean_distance_to(&dual_prompts.positive[&target], &anchor),
        single_oracle_distance: mean_distance_to(&single_prompts.positive[&target], &anchor),
        dual_prompts,
        single_prompts,
        oracle: oracle.positive,
        oracle_accuracy,
    })
}

/// The whole pipeline for one training seed over every held-out target.
pub fn run_seed(cfg: &RunConfig, stack: &Stack, seed: u64) -> Result<SeedResult> {
    let labels = train_labels(cfg, stack, seed)?;
    let targets = (0..stack.dataset.spec.num_domains)
        .map(|t| run_target(cfg, stack, &labels, t, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedResult {
        seed,
        label_train_accuracy: labels.iter().map(|l| l.pair.train_accuracy).collect(),
        targets,
    })
}

fn pooled_variability(
    results: &[SeedResult],
    target: usize,
    pick: impl Fn(&TargetResult) -> &BTreeMap<usize, Vec<Vec<f64>>>,
) -> Result<VariabilityReport> {
    let mut sets: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for r in results {
        let t = &r.targets[target];
        for (&d, ps) in pick(t) {
            sets.entry(d).or_default().extend(ps.iter().cloned());
        }
    }
    variability_flat(&sets, target)
}

fn variability_rows(results: &[SeedResult], num_domains: usize) -> Result<Vec<VariabilityRow>> {
    type Pick = fn(&TargetResult) -> &BTreeMap<usize, Vec<Vec<f64>>>;
    let variants: [(&str, Pick); 3] = [
        ("dual_positive", |t| &t.dual_prompts.positive),
        ("dual_negative", |t| &t.dual_prompts.negative),
        ("single_positive", |t| &t.single_prompts.positive),
    ];
    let mut rows = Vec::new();
    for (name, pick) in variants {
        for target in 0..num_domains {
            let pooled = pooled_variability(results, target, pick)?;
            let r = pooled.domains.iter().find(|s| s.domain == target).map_or(0.0, |s| s.r);
            rows.push(VariabilityRow {
                variant: name.into(),
                target,
                seed: None,
                r,
                d: pooled.d,
                lambda: pooled.lambda,
            });
            for res in results {
                let one = variability_flat(pick(&res.targets[target]), target)?;
                let r = one.domains.iter().find(|s| s.domain == target).map_or(0.0, |s| s.r);
                rows.push(VariabilityRow {
                    variant: name.into(),
                    target,
                    seed: Some(res.seed),
                    r,
                    d: one.d,
                    lambda: one.lambda,
                });
            }
        }
    }
    Ok(rows)
}

/// Runs every seed (up to `jobs` at a time) on one fixed dataset and encoder
/// pair. A failing seed is recorded and skipped; the rest still aggregate.
pub fn seed_sweep(cfg: &RunConfig, seeds: &[u64], jobs: usize) -> Result<SweepOutcome> {
    if seeds.len() < 2 {
        return Err(Error::input("a sweep needs at least two seeds"));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(Error::input("sweep seeds must be distinct"));
    }
    let stack = build_stack(cfg)?;
    let jobs = jobs.clamp(1, seeds.len());
    let mut outcomes: Vec<(u64, Result<SeedResult>)> = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(jobs) {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&s| {
                    let stack = &stack;
                    (s, scope.spawn(move || run_seed(cfg, stack, s)))
                })
                .collect();
            for (s, h) in handles {
                let r = h
                    .join()
                    .unwrap_or_else(|_| Err(Error::numeric(format!("seed {s} panicked"))));
                outcomes.push((s, r));
            }
        });
    }
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in outcomes {
        match r {
            Ok(r) => results.push(r),
            Err(e) => failures.push(SeedFailure {
                seed,
                error: e.to_string(),
            }),
        }
    }
    let variability = if results.is_empty() {
        Vec::new()
    } else {
        variability_rows(&results, cfg.dataset.num_domains)?
    };
    Ok(SweepOutcome {
        config_hash: cfg.config_hash()?,
        seeds: seeds.to_vec(),
        results,
        failures,
        variability,
    })
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

impl SweepOutcome {
    fn eval_reports(&self, single: bool) -> Vec<EvalReport> {
        self.results
            .iter()
            .flat_map(|r| r.targets.iter())
            .flat_map(|t| if single { vec![t.single.clone()] } else { t.dual.clone() })
            .collect()
    }

    /// Mean accuracy over seeds and targets of a dual-path mode.
    pub fn mean_accuracy(&self, mode: EvalMode) -> f64 {
        let v: Vec<f64> = self
            .eval_reports(false)
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| r.accuracy)
            .collect();
        mean_std(&v).0
    }

    pub fn mean_single_path_accuracy(&self) -> f64 {
        let v: Vec<f64> = self.eval_reports(true).iter().map(|r| r.accuracy).collect();
        mean_std(&v).0
    }

    /// Pooled `lambda` averaged over targets.
    pub fn mean_lambda(&self, variant: &str) -> f64 {
        let v: Vec<f64> = self
            .variability
            .iter()
            .filter(|r| r.variant == variant && r.seed.is_none())
            .map(|r| r.lambda)
            .collect();
        mean_std(&v).0
    }

    /// Last-ten-epoch accuracy std averaged over seeds and targets.
    pub fn mean_stability(&self, single: bool) -> f64 {
        let v: Vec<f64> = self
            .results
            .iter()
            .flat_map(|r| r.targets.iter())
            .map(|t| if single { t.single_stability.std_last_10 } else { t.dual_stability.std_last_10 })
            .collect();
        mean_std(&v).0
    }

    /// Every output file name with its contents.
    pub fn files(&self) -> Result<Vec<(String, Vec<u8>)>> {
        let mut files = Vec::new();
        files.push(("eval.csv".to_string(), eval_csv_bytes(&self.eval_reports(false))?));
        files.push(("single_path_eval.csv".to_string(), eval_csv_bytes(&self.eval_reports(true))?));

        let mut groups: BTreeMap<(String, String, usize), Vec<f64>> = BTreeMap::new();
        for r in &self.results {
            for t in &r.targets {
                for e in &t.dual {
                    groups
                        .entry(("dual".into(), e.mode.as_str().into(), t.target))
                        .or_default()
                        .push(e.accuracy);
                }
                groups
                    .entry(("single_noisy".into(), "positive_only".into(), t.target))
                    .or_default()
                    .push(t.single.accuracy);
            }
        }
        let agg = groups.iter().map(|((variant, mode, target), v)| {
            let (m, s) = mean_std(v);
            vec![variant.clone(), mode.clone(), target.to_string(), v.len().to_string(), m.to_string(), s.to_string()]
        });
        files.push((
            "aggregate.csv".to_string(),
            csv_bytes(&["variant", "mode", "target", "n_seeds", "mean_accuracy", "std_accuracy"], agg)?,
        ));

        let var = self.variability.iter().map(|r| {
            vec![
                r.variant.clone(),
                r.target.to_string(),
                r.seed.map_or("pooled".to_string(), |s| s.to_string()),
                r.r.to_string(),
                r.d.to_string(),
                r.lambda.to_string(),
            ]
        });
        files.push(("variability.csv".to_string(), csv_bytes(&["variant", "target", "seed", "r", "d", "lambda"], var)?));

        let mut stab = Vec::new();
        let mut oracle = Vec::new();
        let mut labels = Vec::new();
        for r in &self.results {
            for (d, a) in r.label_train_accuracy.iter().enumerate() {
                labels.push(vec![r.seed.to_string(), d.to_string(), a.to_string()]);
            }
            for t in &r.targets {
                for (variant, s) in [("dual", &t.dual_stability), ("single_noisy", &t.single_stability)] {
                    let hist = s.accuracy_history.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(";");
                    stab.push(vec![
                        variant.to_string(),
                        t.target.to_string(),
                        r.seed.to_string(),
                        s.std_last_10.to_string(),
                        s.final_accuracy.to_string(),
                        hist,
                    ]);
                }
                oracle.push(vec![
                    t.target.to_string(),
                    r.seed.to_string(),
                    t.oracle_accuracy.to_string(),
                    t.dual[0].accuracy.to_string(),
                    t.dual_oracle_distance.to_string(),
                    t.single_oracle_distance.to_string(),
                ]);
            }
        }
        files.push((
            "stability.csv".to_string(),
            csv_bytes(&["variant", "target", "seed", "std_last_10", "final_accuracy", "history"], stab)?,
        ));
        files.push((
            "oracle.csv".to_string(),
            csv_bytes(
                &["target", "seed", "oracle_accuracy", "dual_accuracy", "dual_distance", "single_distance"],
                oracle,
            )?,
        ));
        files.push(("label_fit.csv".to_string(), csv_bytes(&["seed", "domain", "train_accuracy"], labels)?));
        for (name, rows) in self.projections()? {
            files.push((name, csv_bytes(&["domain", "seed", "x", "y"], rows)?));
        }
        Ok(files)
    }

    /// Per target, one principal-axis fit over the dual, single and oracle
    /// prompts of that target so all three files share axes.
    fn projections(&self) -> Result<Vec<(String, Vec<Vec<String>>)>> {
        let mut dual = Vec::new();
        let mut single = Vec::new();
        let mut oracle = Vec::new();
        let Some(first) = self.results.first() else {
            return Ok(Vec::new());
        };
        for ti in 0..first.targets.len() {
            let mut points = Vec::new();
            let mut tags = Vec::new();
            for r in &self.results {
                let t = &r.targets[ti];
                for p in &t.dual_prompts.positive[&t.target] {
                    points.push(p.clone());
                    tags.push((0, t.target, r.seed));
                }
                for p in &t.single_prompts.positive[&t.target] {
                    points.push(p.clone());
                    tags.push((1, t.target, r.seed));
                }
                points.push(t.oracle.flatten());
                tags.push((2, t.target, r.seed));
            }
            let proj = project_2d(&points)?;
            for ((kind, d, s), (x, y)) in tags.into_iter().zip(proj.coords) {
                let row = vec![d.to_string(), s.to_string(), x.to_string(), y.to_string()];
                [&mut dual, &mut single, &mut oracle][kind].push(row);
            }
        }
        Ok(vec![
            ("projection_dual.csv".into(), dual),
            ("projection_single.csv".into(), single),
            ("projection_oracle.csv".into(), oracle),
        ])
    }

    /// Writes every CSV plus `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        let mut digests = BTreeMap::new();
        for (name, bytes) in self.files()? {
            let path = dir.join(&name);
            std::fs::write(&path, &bytes)?;
            digests.insert(name, hex::encode(Sha256::digest(&bytes)));
            paths.push(path);
        }
        let manifest = serde_json::json!({
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "completed_seeds": self.results.iter().map(|r| r.seed).collect::<Vec<_>>(),
            "failures": self.failures,
            "version": env!("CARGO_PKG_VERSION"),
            "definitions": VARIABILITY_DEFINITIONS,
            "files": digests,
        });
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
        paths.push(path);
        Ok(paths)
    }
}
