//! Synthetic multi-domain classification data.
//!
//! Class `c` in domain `d` is drawn as `A_d (mu_c + eps) + b_d` with
//! `eps ~ N(0, sigma^2 I)`. `A_d` is a product of seeded Givens rotations and
//! `b_d` a seeded offset, so every domain keeps the class structure but moves
//! it somewhere else in input space.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub num_domains: usize,
    pub n_per_class_per_domain: usize,
    pub d_raw: usize,
    pub prototype_separation: f64,
    /// Largest angle (radians) of each Givens factor of a domain rotation.
    pub domain_rotation_angle: f64,
    pub domain_shift_scale: f64,
    pub noise_sigma: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 5,
            num_domains: 4,
            n_per_class_per_domain: 40,
            d_raw: 16,
            prototype_separation: 3.0,
            domain_rotation_angle: 0.6,
            domain_shift_scale: 1.0,
            noise_sigma: 0.3,
            val_fraction: 0.2,
            seed: 2024,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Error::Validation {
            field: format!("dataset.{field}"),
            reason: reason.to_string(),
        };
        if self.num_classes < 2 {
            return Err(bad("num_classes", "need at least 2 classes"));
        }
        if self.num_domains < 3 {
            return Err(bad("num_domains", "need at least 2 sources and 1 target"));
        }
        if self.d_raw < 2 {
            return Err(bad("d_raw", "must be at least 2"));
        }
        if !(self.prototype_separation > 0.0 && self.prototype_separation.is_finite()) {
            return Err(bad("prototype_separation", "must be positive"));
        }
        for (name, v) in [
            ("domain_rotation_angle", self.domain_rotation_angle),
            ("domain_shift_scale", self.domain_shift_scale),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(name, "must be finite and nonnegative"));
            }
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(bad("val_fraction", "must lie in (0, 1)"));
        }
        let n_val = self.val_per_class();
        if n_val == 0 || n_val >= self.n_per_class_per_domain {
            return Err(bad(
                "n_per_class_per_domain",
                "too few samples to hold out a validation split",
            ));
        }
        Ok(())
    }

    fn val_per_class(&self) -> usize {
        (self.n_per_class_per_domain as f64 * self.val_fraction).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
    pub domain: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDescriptor {
    /// `d_raw x d_raw` orthogonal matrix.
    pub rotation: Tensor,
    pub shift: Vec<f64>,
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub spec: DatasetSpec,
    /// Canonical class means `mu_c`, `K x d_raw`, before any domain transform.
    pub prototypes: Tensor,
    pub domains: Vec<DomainDescriptor>,
    pub samples: Vec<Sample>,
    pub splits: Vec<DomainSplit>,
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

fn givens_product<R: Rng>(d: usize, max_angle: f64, rng: &mut R) -> Tensor {
    let mut a = Tensor::identity(d);
    for _ in 0..d {
        let i = rng.random_range(0..d);
        let mut j = rng.random_range(0..d - 1);
        if j >= i {
            j += 1;
        }
        let theta = (rng.random::<f64>() * 2.0 - 1.0) * max_angle;
        if theta == 0.0 {
            continue;
        }
        let (s, c) = theta.sin_cos();
        let data = a.data_mut();
        for col in 0..d {
            let ai = data[i * d + col];
            let aj = data[j * d + col];
            data[i * d + col] = c * ai - s * aj;
            data[j * d + col] = s * ai + c * aj;
        }
    }
    a
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<DomainDataset> {
    spec.validate().map_err(|e| match e {
        Error::Validation { field, reason } if field == "dataset.num_domains" => {
            Error::param(format!("{field}: {reason}"))
        }
        other => other,
    })?;
    let (k, d) = (spec.num_classes, spec.d_raw);

    let mut rng = sub_rng(spec.seed, 0);
    let radius = spec.prototype_separation / std::f64::consts::SQRT_2;
    let mut protos = Vec::with_capacity(k * d);
    for _ in 0..k {
        let v: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
        let n = crate::numkernel::l2_norm(&v);
        protos.extend(v.iter().map(|x| x / n * radius));
    }
    let prototypes = Tensor::new(vec![k, d], protos)?;

    let mut domains = Vec::with_capacity(spec.num_domains);
    let mut samples = Vec::with_capacity(spec.num_domains * k * spec.n_per_class_per_domain);
    let mut splits = Vec::with_capacity(spec.num_domains);
    for dom in 0..spec.num_domains {
        let mut rng = sub_rng(spec.seed, 1 + dom as u64);
        let rotation = givens_product(d, spec.domain_rotation_angle, &mut rng);
        let shift_scale = spec.domain_shift_scale / (d as f64).sqrt();
        let shift: Vec<f64> = (0..d).map(|_| gaussian(&mut rng) * shift_scale).collect();

        let base = samples.len();
        let mut train = Vec::new();
        let mut val = Vec::new();
        let n_val = spec.val_per_class();
        for c in 0..k {
            let first = samples.len();
            for _ in 0..spec.n_per_class_per_domain {
                let z: Vec<f64> = (0..d)
                    .map(|j| prototypes.row(c)[j] + gaussian(&mut rng) * spec.noise_sigma)
                    .collect();
                let x: Vec<f64> = (0..d)
                    .map(|r| {
                        let row = rotation.row(r);
                        row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + shift[r]
                    })
                    .collect();
                samples.push(Sample { x, label: c, domain: dom });
            }
            let mut idx: Vec<usize> = (first..samples.len()).collect();
            idx.shuffle(&mut rng);
            val.extend_from_slice(&idx[..n_val]);
            train.extend_from_slice(&idx[n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        debug_assert!(train.iter().chain(&val).all(|&i| i >= base));
        domains.push(DomainDescriptor {
            rotation,
            shift,
            noise_sigma: spec.noise_sigma,
        });
        splits.push(DomainSplit { train, val });
    }
    Ok(DomainDataset {
        spec: spec.clone(),
        prototypes,
        domains,
        samples,
        splits,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LodoSplit {
    pub target: usize,
    pub sources: Vec<usize>,
    pub source_train: Vec<usize>,
    pub source_val: Vec<usize>,
    /// Every sample of the held-out domain.
    pub target_indices: Vec<usize>,
}

impl LodoSplit {
    pub fn source_indices(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.source_train.iter().chain(&self.source_val).copied().collect();
        all.sort_unstable();
        all
    }
}

pub fn leave_one_out_split(ds: &DomainDataset, target_domain: usize) -> Result<LodoSplit> {
    let s = ds.spec.num_domains;
    if target_domain >= s {
        return Err(Error::param(format!(
            "target domain {target_domain} out of range for {s} domains"
        )));
    }
    let sources: Vec<usize> = (0..s).filter(|&d| d != target_domain).collect();
    let mut source_train = Vec::new();
    let mut source_val = Vec::new();
    for &d in &sources {
        source_train.extend_from_slice(&ds.splits[d].train);
        source_val.extend_from_slice(&ds.splits[d].val);
    }
    Ok(LodoSplit {
        target: target_domain,
        sources,
        source_train,
        source_val,
        target_indices: ds.domain_indices(target_domain),
    })
}

impl DomainDataset {
    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn domain_indices(&self, domain: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.domain == domain)
            .map(|(i, _)| i)
            .collect()
    }

    /// Stacks the raw inputs of `idx` into an `n x d_raw` tensor.
    pub fn inputs(&self, idx: &[usize]) -> Result<Tensor> {
        if idx.is_empty() {
            return Err(Error::input("no samples selected"));
        }
        let d = self.spec.d_raw;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.samples[i].x);
        }
        Tensor::new(vec![idx.len(), d], data)
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.samples[i].label).collect()
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["domain".to_string(), "label".to_string()];
        header.extend((0..self.spec.d_raw).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for s in &self.samples {
            let mut rec = vec![s.domain.to_string(), s.label.to_string()];
            rec.extend(s.x.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }

    /// Writes the CSV and a sidecar `<stem>.json` holding the generation spec.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        if let Some(dir) = csv_path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(csv_path, self.to_csv_bytes()?)?;
        let json = serde_json::to_string_pretty(&self.spec)?;
        std::fs::write(sidecar_path(csv_path), json + "\n")?;
        Ok(())
    }
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Reads a dataset back. The sidecar spec regenerates the domain structure
/// and the CSV must agree with it sample for sample.
pub fn load_dataset(csv_path: &Path) -> Result<DomainDataset> {
    let side = sidecar_path(csv_path);
    let spec_text = std::fs::read_to_string(&side).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::StageOrder { path: side.clone() },
        _ => Error::Io(e),
    })?;
    let spec: DatasetSpec = serde_json::from_str(&spec_text)
        .map_err(|e| Error::format(&side, e.to_string()))?;
    let ds = generate_dataset(&spec)?;
    let file = std::fs::File::open(csv_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::StageOrder {
            path: csv_path.to_path_buf(),
        },
        _ => Error::Io(e),
    })?;
    let mut r = csv::Reader::from_reader(file);
    let mut n = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |j: usize| -> Result<f64> {
            rec.get(j)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::format(csv_path, format!("row {i}, column {j} is not a number")))
        };
        let s = ds
            .samples
            .get(i)
            .ok_or_else(|| Error::format(csv_path, "more rows than the spec generates"))?;
        if rec.len() != 2 + spec.d_raw {
            return Err(Error::format(csv_path, format!("row {i} has {} fields", rec.len())));
        }
        let same = parse(0)? as usize == s.domain
            && parse(1)? as usize == s.label
            && (0..spec.d_raw).all(|j| parse(2 + j).map(|v| v == s.x[j]).unwrap_or(false));
        if !same {
            return Err(Error::format(csv_path, format!("row {i} disagrees with the sidecar spec")));
        }
        n += 1;
    }
    if n != ds.samples.len() {
        return Err(Error::format(csv_path, "fewer rows than the spec generates"));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn givens_product_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = givens_product(6, 0.9, &mut rng);
        let ata = a.transpose().matmul(&a).unwrap();
        assert!(ata.max_abs_diff(&Tensor::identity(6)) < 1e-12);
    }

    #[test]
    fn small_spec_rejected() {
        let spec = DatasetSpec {
            num_domains: 2,
            ..DatasetSpec::default()
        };
        assert!(matches!(generate_dataset(&spec), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn csv_round_trip() {
        let spec = DatasetSpec {
            n_per_class_per_domain: 10,
            ..DatasetSpec::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        ds.write(&path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, ds);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("domain,label,x0,x1,"));
        std::fs::write(&path, text.replacen("0,0,", "0,1,", 1)).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format { .. })));
    }
}
