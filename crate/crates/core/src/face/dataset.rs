//! Labeled synthetic datasets and their on-disk manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{render_face, Emotion, FaceImage, IdentityParams};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";

/// One manifest line: `file \t label code \t identity seed \t noise`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub file: String,
    pub label: Emotion,
    pub identity: IdentityParams,
    pub noise: f64,
    /// Seed the image was rendered with; not persisted in the manifest.
    pub render_seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

/// A rendered image with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: FaceImage,
    pub label: Emotion,
}

impl DatasetManifest {
    /// Plans `7 * n_per_class` renders. Image `j` of every class uses identity
    /// `j mod n_identities`; images are interleaved class by class.
    pub fn plan(n_per_class: usize, n_identities: usize, noise: f64, seed: u64) -> Result<Self> {
        if n_per_class == 0 {
            return Err(Error::InvalidArgument("n_per_class must be at least 1".into()));
        }
        if n_identities == 0 {
            return Err(Error::InvalidArgument("n_identities must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let identities: Vec<IdentityParams> = (0..n_identities)
            .map(|_| IdentityParams::from_seed(rng.random()))
            .collect();
        let mut records = Vec::with_capacity(n_per_class * Emotion::COUNT);
        for j in 0..n_per_class {
            for label in Emotion::ALL {
                let index = records.len();
                records.push(ManifestRecord {
                    file: format!("face_{index:05}_{label}.pgm"),
                    label,
                    identity: identities[j % n_identities],
                    noise,
                    render_seed: rng.random(),
                });
            }
        }
        Ok(Self { records })
    }

    pub fn render(&self, record: &ManifestRecord) -> Result<FaceImage> {
        render_face(record.label, &record.identity, record.noise, record.render_seed)
    }

    /// Renders every planned image in memory.
    pub fn render_all(&self) -> Result<Vec<LabeledImage>> {
        crate::par::map(&self.records, |r| {
            self.render(r).map(|image| LabeledImage { image, label: r.label })
        })
        .into_iter()
        .collect()
    }

    pub fn class_counts(&self) -> [usize; Emotion::COUNT] {
        let mut counts = [0; Emotion::COUNT];
        for r in &self.records {
            counts[r.label.code()] += 1;
        }
        counts
    }

    pub fn covers_all_classes(&self) -> bool {
        self.class_counts().iter().all(|&c| c > 0)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.file, r.label.code(), r.identity.seed, r.noise));
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |field: &'static str, why: &str| Error::Parse {
                field,
                reason: format!("manifest line {}: {why}", lineno + 1),
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad("manifest", "expected 4 tab-separated fields"));
            }
            let code: usize = cols[1].parse().map_err(|_| bad("label", "not an integer"))?;
            let label = Emotion::from_code(code).ok_or_else(|| bad("label", "code out of range"))?;
            let identity_seed: u64 = cols[2].parse().map_err(|_| bad("identity_seed", "not an integer"))?;
            let noise: f64 = cols[3].parse().map_err(|_| bad("noise", "not a number"))?;
            records.push(ManifestRecord {
                file: cols[0].to_string(),
                label,
                identity: IdentityParams::from_seed(identity_seed),
                noise,
                render_seed: 0,
            });
        }
        Ok(Self { records })
    }

    /// Reads `manifest.tsv` from `dir` and loads every referenced image.
    pub fn load(dir: &Path) -> Result<(Self, Vec<LabeledImage>)> {
        let manifest = Self::parse_tsv(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let images = manifest
            .records
            .iter()
            .map(|r| {
                let bytes = fs::read(dir.join(&r.file))?;
                Ok(LabeledImage {
                    image: FaceImage::from_pgm(&bytes)?,
                    label: r.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((manifest, images))
    }
}

/// Renders `7 * n_per_class` images into `dir` as PGM files plus `manifest.tsv`.
pub fn generate_dataset(
    dir: &Path,
    n_per_class: usize,
    n_identities: usize,
    noise: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::plan(n_per_class, n_identities, noise, seed)?;
    fs::create_dir_all(dir)?;
    let images = manifest.render_all()?;
    for (record, img) in manifest.records.iter().zip(&images) {
        fs::write(dir.join(&record.file), img.image.to_pgm())?;
    }
    let mut f = fs::File::create(dir.join(MANIFEST_FILE))?;
    f.write_all(manifest.to_tsv().as_bytes())?;
    Ok(manifest)
}

/// The standard pretraining set: 143 images per class (1001 total) over 20
/// identities at noise 0.05.
pub fn standard_training_plan() -> Result<DatasetManifest> {
    DatasetManifest::plan(143, 20, 0.05, 1)
}

/// Held-out counterpart of [`standard_training_plan`]: 30 per class over 10
/// identities never seen in training.
pub fn standard_heldout_plan() -> Result<DatasetManifest> {
    DatasetManifest::plan(30, 10, 0.05, 999)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
