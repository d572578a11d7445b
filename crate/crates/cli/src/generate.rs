//! Dataset generation and loading.

use std::path::Path;

use anyhow::{bail, Context, Result};
use csg::data::{
    load_mnist, make_shifted_mnist, read_dataset, synth_csg_sample, write_dataset, Dataset, SyntheticCsgSpec,
};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetKind, ExperimentConfig, SyntheticConfig};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub role: Role,
    pub file: String,
    pub domain: String,
    pub count: usize,
    pub class_counts: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: DatasetKind,
    pub seed: u64,
    pub spec: serde_json::Value,
    pub files: Vec<ManifestFile>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {} (run `csg generate-data` first)", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn synthetic(&self) -> Result<SyntheticConfig> {
        Ok(serde_json::from_value(self.spec.clone())?)
    }
}

/// Named domains built from a configuration.
fn build(cfg: &ExperimentConfig) -> Result<(serde_json::Value, Vec<(Role, &'static str, Dataset)>)> {
    let g = &cfg.generate;
    match g.dataset {
        DatasetKind::ShiftedMnist => {
            let dir = cfg.mnist_dir();
            let (train_raw, test_raw) =
                load_mnist(&dir).with_context(|| format!("loading raw MNIST from {}", dir.display()))?;
            let sm = make_shifted_mnist(&train_raw, &test_raw, &g.shifted_mnist, g.seed)?;
            Ok((
                serde_json::to_value(&g.shifted_mnist)?,
                vec![
                    (Role::Train, "train", sm.train),
                    (Role::Test, "test-a", sm.test_a),
                    (Role::Test, "test-b", sm.test_b),
                ],
            ))
        }
        DatasetKind::Synthetic => {
            let s = &g.synthetic;
            let spec = synthetic_spec(s, g.seed)?;
            let train = synth_csg_sample(&spec, s.n, g.seed.wrapping_add(1), "synthetic-train")?;
            let test = synth_csg_sample(&spec.test_domain(), s.n_test, g.seed.wrapping_add(2), "synthetic-test")?;
            Ok((serde_json::to_value(s)?, vec![(Role::Train, "train", train), (Role::Test, "test", test)]))
        }
    }
}

pub fn synthetic_spec(s: &SyntheticConfig, seed: u64) -> Result<SyntheticCsgSpec> {
    Ok(SyntheticCsgSpec::correlated(s.d_s, s.d_v, s.rho, s.sigma_mu, seed)?)
}

/// Writes the dataset containers and a manifest into the data directory.
/// Regenerating over an existing manifest with the same seed and spec must
/// reproduce its digests.
pub fn cmd_generate_data(cfg: &ExperimentConfig) -> Result<Manifest> {
    let dir = cfg.data_dir();
    std::fs::create_dir_all(&dir)?;
    let (spec, sets) = build(cfg)?;
    let mut files = Vec::new();
    for (role, name, set) in &sets {
        let file = format!("{name}.csgd");
        let sha256 = write_dataset(&dir.join(&file), set)?;
        files.push(ManifestFile {
            role: *role,
            file,
            domain: set.domain.clone(),
            count: set.len(),
            class_counts: set.class_counts(),
            sha256,
        });
    }
    let manifest = Manifest {
        dataset: cfg.generate.dataset,
        seed: cfg.generate.seed,
        spec,
        files,
    };
    if let Ok(old) = Manifest::read(&dir) {
        if old.dataset == manifest.dataset && old.seed == manifest.seed && old.spec == manifest.spec {
            for (a, b) in old.files.iter().zip(&manifest.files) {
                if a.sha256 != b.sha256 {
                    bail!(
                        "digest mismatch regenerating {}: manifest has {}, got {}",
                        a.file,
                        a.sha256,
                        b.sha256
                    );
                }
            }
        }
    }
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Datasets listed in a manifest, digests verified.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub manifest: Manifest,
    pub train: Dataset,
    /// Test domains with their manifest names.
    pub tests: Vec<(String, Dataset)>,
}

impl LoadedData {
    pub fn test_index(&self, name: &str) -> Result<usize> {
        self.tests
            .iter()
            .position(|(n, d)| n == name || d.domain == name)
            .with_context(|| format!("no test domain `{name}`"))
    }
}

pub fn load_datasets(dir: &Path) -> Result<LoadedData> {
    let manifest = Manifest::read(dir)?;
    let mut train = None;
    let mut tests = Vec::new();
    for f in &manifest.files {
        let (set, digest) = read_dataset(&dir.join(&f.file))?;
        if digest != f.sha256 {
            bail!("digest mismatch for {}: manifest has {}, file has {digest}", f.file, f.sha256);
        }
        match f.role {
            Role::Train => train = Some(set),
            Role::Test => tests.push((f.file.trim_end_matches(".csgd").to_string(), set)),
        }
    }
    let train = train.with_context(|| format!("manifest in {} lists no training set", dir.display()))?;
    Ok(LoadedData { manifest, train, tests })
}
