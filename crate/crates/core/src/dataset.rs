//! Scenario construction, manifests, source-disjoint splits and batching.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::enhance::{gamma_correct, GammaParam};
use crate::error::{Error, Result};
use crate::imagecore::{
    central_crop, encode_pgm, histogram, load_pgm, synth_patch, tile_crops, Grayscale8, LEVELS,
};
use crate::jpegsim::jpeg_roundtrip;
use crate::nn::Tensor;
use crate::Label;

pub const MANIFEST_HEADER: &str = "source,path,label,gamma,quality,attack,split";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const DITHER_ATTACK: &str = "dither";
/// Blur scale of the synthetic source generator.
pub const DEFAULT_SMOOTHNESS: f64 = 4.0;

/// SplitMix64 mix of a master seed and a stream id.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scenario {
    Plain,
    PreJpeg,
    Anti,
    PreJpegAnti,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Plain => "plain",
            Scenario::PreJpeg => "prejpeg",
            Scenario::Anti => "anti",
            Scenario::PreJpegAnti => "prejpeg_anti",
        }
    }

    pub fn uses_jpeg(self) -> bool {
        matches!(self, Scenario::PreJpeg | Scenario::PreJpegAnti)
    }

    pub fn uses_attack(self) -> bool {
        matches!(self, Scenario::Anti | Scenario::PreJpegAnti)
    }

    fn from_flags(jpeg: bool, attack: bool) -> Self {
        match (jpeg, attack) {
            (false, false) => Scenario::Plain,
            (true, false) => Scenario::PreJpeg,
            (false, true) => Scenario::Anti,
            (true, true) => Scenario::PreJpegAnti,
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Scenario::Plain),
            "prejpeg" => Ok(Scenario::PreJpeg),
            "anti" => Ok(Scenario::Anti),
            "prejpeg_anti" => Ok(Scenario::PreJpegAnti),
            other => Err(Error::UnknownScenario(other.into())),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidManifest(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How patches are cut from a source image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    /// One central patch per source.
    Central,
    /// Every non-overlapping patch, raster order.
    Tiles,
}

impl FromStr for CropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "central" => Ok(CropMode::Central),
            "tiles" => Ok(CropMode::Tiles),
            other => Err(Error::InvalidConfig(format!("unknown crop mode {other:?}"))),
        }
    }
}

/// Input representation fed to a detector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Representation {
    /// Pixels scaled to `[0, 1]`, shape `[1, H, W]`.
    Pixel,
    /// Normalized 256-bin histogram, shape `[1, 1, 256]`.
    Histogram,
}

impl Representation {
    pub fn features(self, img: &Grayscale8) -> Vec<f32> {
        match self {
            Representation::Pixel => img.pixels().iter().map(|&p| p as f32 / 255.0).collect(),
            Representation::Histogram => histogram(img).normalized().to_vec(),
        }
    }

    pub fn shape(self, img: &Grayscale8) -> [usize; 3] {
        match self {
            Representation::Pixel => [1, img.height(), img.width()],
            Representation::Histogram => [1, 1, LEVELS],
        }
    }
}

impl FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(Representation::Pixel),
            "histogram" => Ok(Representation::Histogram),
            other => Err(Error::InvalidConfig(format!("unknown representation {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub source: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub label: Label,
    pub gamma: Option<f64>,
    pub quality: Option<u8>,
    pub attack: Option<String>,
    pub split: Option<Split>,
}

impl ManifestEntry {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidManifest(format!("{}: {msg}", self.path.display())));
        if self.source.is_empty() || self.source.contains([',', '\n', '\r']) {
            return bad(format!("bad source id {:?}", self.source));
        }
        let path = self.path.to_string_lossy();
        if path.is_empty() || path.contains([',', '\n', '\r']) {
            return bad("bad path".into());
        }
        match (self.label, self.gamma) {
            (Label::Original, Some(g)) => return bad(format!("original entry carries gamma {g}")),
            (Label::Enhanced, None) => return bad("enhanced entry without gamma".into()),
            (Label::Enhanced, Some(g)) => {
                if !(g > 0.0 && g.is_finite()) || (g - 1.0).abs() < 1e-12 {
                    return bad(format!("gamma {g} is not a contrast change"));
                }
            }
            (Label::Original, None) => {}
        }
        if let Some(q) = self.quality {
            if !(1..=100).contains(&q) {
                return bad(format!("quality {q} out of range"));
            }
        }
        match (&self.attack, self.label) {
            (Some(_), Label::Original) => return bad("original entry carries an attack".into()),
            (Some(a), _) if a.is_empty() || a.contains([',', '\n', '\r']) => {
                return bad(format!("bad attack id {a:?}"))
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

fn opt_field(s: &str) -> Option<&str> {
    (!s.is_empty()).then_some(s)
}

impl DatasetManifest {
    /// Checks every entry and the source-disjointness of splits.
    pub fn validate(&self) -> Result<()> {
        let mut owner: HashMap<&str, Option<Split>> = HashMap::new();
        for e in &self.entries {
            e.validate()?;
            if let Some(prev) = owner.insert(&e.source, e.split) {
                if prev != e.split {
                    return Err(Error::InvalidManifest(format!(
                        "source {} appears in more than one split",
                        e.source
                    )));
                }
            }
        }
        Ok(())
    }

    /// Scenario implied by the entries' quality and attack columns.
    pub fn scenario(&self) -> Scenario {
        let jpeg = self.entries.iter().any(|e| e.quality.is_some());
        let attack = self.entries.iter().any(|e| e.attack.is_some());
        Scenario::from_flags(jpeg, attack)
    }

    pub fn sources(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.source.as_str()))
            .map(|e| e.source.as_str())
            .collect()
    }

    /// Distinct gammas of the enhanced entries, ascending.
    pub fn gammas(&self) -> Vec<f64> {
        let mut g: Vec<f64> = self.entries.iter().filter_map(|e| e.gamma).collect();
        g.sort_by(f64::total_cmp);
        g.dedup();
        g
    }

    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Some(split)).collect()
    }

    /// Subset keeping only entries satisfying `keep`.
    pub fn filtered(&self, keep: impl Fn(&ManifestEntry) -> bool) -> Self {
        Self {
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.source,
                e.path.to_string_lossy(),
                e.label,
                e.gamma.map(|g| g.to_string()).unwrap_or_default(),
                e.quality.map(|q| q.to_string()).unwrap_or_default(),
                e.attack.as_deref().unwrap_or(""),
                e.split.map(|s| s.as_str()).unwrap_or(""),
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim_end) != Some(MANIFEST_HEADER) {
            return Err(Error::InvalidManifest(format!("header must be {MANIFEST_HEADER:?}")));
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.trim_end().split(',').collect();
            if f.len() != 7 {
                return Err(Error::InvalidManifest(format!(
                    "line {}: expected 7 fields, got {}",
                    i + 2,
                    f.len()
                )));
            }
            let num = |what: &str, s: &str| {
                Error::InvalidManifest(format!("line {}: bad {what} {s:?}", i + 2))
            };
            let entry = ManifestEntry {
                source: f[0].into(),
                path: PathBuf::from(f[1]),
                label: f[2].parse()?,
                gamma: opt_field(f[3])
                    .map(|s| s.parse::<f64>().map_err(|_| num("gamma", s)))
                    .transpose()?,
                quality: opt_field(f[4])
                    .map(|s| s.parse::<u8>().map_err(|_| num("quality", s)))
                    .transpose()?,
                attack: opt_field(f[5]).map(String::from),
                split: opt_field(f[6]).map(str::parse).transpose()?,
            };
            entries.push(entry);
        }
        let m = Self { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::IoFailure(e),
        })?;
        Self::from_csv(&text)
    }
}

/// Where source images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum SourceSpec {
    /// Every `*.pgm` file of a directory, sorted by name; the file stem is
    /// the source id.
    Directory(PathBuf),
    /// `count` images from [`synth_patch`], `size x size` pixels each.
    Synthetic { seed: u64, count: usize, size: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub gammas: Vec<f64>,
    pub qualities: Vec<u8>,
    pub patch_size: usize,
    pub crop_mode: CropMode,
    /// Train, val and test sizes, counted in source images.
    pub split_sizes: (usize, usize, usize),
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Plain,
            gammas: vec![0.6, 0.8, 1.2, 1.4],
            qualities: vec![50, 70],
            patch_size: 128,
            crop_mode: CropMode::Central,
            split_sizes: (8000, 2000, 10000),
            seed: 1,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gammas.is_empty() {
            return Err(Error::InvalidConfig("gamma set is empty".into()));
        }
        for &g in &self.gammas {
            GammaParam::new(g)?;
            if (g - 1.0).abs() < 1e-12 {
                return Err(Error::GammaIsOne);
            }
        }
        if self.scenario.uses_jpeg() && self.qualities.is_empty() {
            return Err(Error::InvalidConfig("quality set is empty".into()));
        }
        for &q in &self.qualities {
            if !(1..=100).contains(&q) {
                return Err(Error::QualityOutOfRange(q as i64));
            }
        }
        if self.patch_size == 0 {
            return Err(Error::InvalidConfig("patch size must be positive".into()));
        }
        if self.scenario.uses_jpeg() && !self.patch_size.is_multiple_of(8) {
            return Err(Error::DimensionNotMultipleOf8 {
                width: self.patch_size,
                height: self.patch_size,
            });
        }
        let (a, b, c) = self.split_sizes;
        if a == 0 || b == 0 || c == 0 {
            return Err(Error::InvalidConfig("split sizes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn sources_needed(&self) -> usize {
        self.split_sizes.0 + self.split_sizes.1 + self.split_sizes.2
    }

    /// `(gamma, quality)` pairings, one enhanced patch each.
    fn pairings(&self) -> Vec<(f64, Option<u8>)> {
        let mut out = Vec::new();
        if self.scenario.uses_jpeg() {
            for &q in &self.qualities {
                for &g in &self.gammas {
                    out.push((g, Some(q)));
                }
            }
        } else {
            for &g in &self.gammas {
                out.push((g, None));
            }
        }
        out
    }
}

/// Anti-forensic stand-in: each pixel moves by +1 or -1 (equally likely)
/// with probability 1/2, clamped to `[0, 255]`.
pub fn attack_dither(img: &Grayscale8, seed: u64) -> Grayscale8 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = img
        .pixels()
        .iter()
        .map(|&p| {
            let r: u8 = rng.random_range(0..4);
            match r {
                0 => p.saturating_add(1),
                1 => p.saturating_sub(1),
                _ => p,
            }
        })
        .collect();
    Grayscale8::new(img.width(), img.height(), data).expect("same shape")
}

fn content_path(bytes: &[u8]) -> PathBuf {
    let digest = Sha256::digest(bytes);
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    PathBuf::from("patches").join(&hex[..2]).join(format!("{}.pgm", &hex[2..32]))
}

struct Source {
    id: String,
    image: SourceImage,
}

enum SourceImage {
    File(PathBuf),
    Synthetic { seed: u64, size: usize },
}

impl Source {
    fn load(&self) -> Result<Grayscale8> {
        match &self.image {
            SourceImage::File(p) => load_pgm(p),
            &SourceImage::Synthetic { seed, size } => synth_patch(seed, size, size, DEFAULT_SMOOTHNESS),
        }
    }
}

fn list_sources(src: &SourceSpec, needed: usize) -> Result<Vec<Source>> {
    let sources: Vec<Source> = match src {
        SourceSpec::Directory(dir) => {
            let rd = fs::read_dir(dir).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingFile(dir.clone()),
                _ => Error::IoFailure(e),
            })?;
            let mut files = Vec::new();
            for ent in rd {
                let p = ent?.path();
                if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")) {
                    files.push(p);
                }
            }
            files.sort();
            files
                .into_iter()
                .map(|p| Source {
                    id: p
                        .file_stem()
                        .map(|s| s.to_string_lossy().replace([',', '\n', '\r'], "_"))
                        .unwrap_or_default(),
                    image: SourceImage::File(p),
                })
                .collect()
        }
        &SourceSpec::Synthetic { seed, count, size } => (0..count)
            .map(|i| Source {
                id: format!("syn{i:06}"),
                image: SourceImage::Synthetic {
                    seed: derive_seed(seed, i as u64),
                    size,
                },
            })
            .collect(),
    };
    if sources.len() < needed {
        return Err(Error::InsufficientSources {
            needed,
            available: sources.len(),
        });
    }
    Ok(sources.into_iter().take(needed).collect())
}

type Produced = (Vec<ManifestEntry>, Vec<(PathBuf, Vec<u8>)>);

fn process_source(cfg: &ScenarioConfig, idx: usize, src: &Source) -> Result<Produced> {
    let img = src.load()?;
    let p = cfg.patch_size;
    let patches = match cfg.crop_mode {
        CropMode::Central => vec![central_crop(&img, p, p)?],
        CropMode::Tiles => tile_crops(&img, p, p)?,
    };
    let mut entries = Vec::new();
    let mut files = Vec::new();
    let persist = |img: &Grayscale8, files: &mut Vec<(PathBuf, Vec<u8>)>| {
        let bytes = encode_pgm(img);
        let path = content_path(&bytes);
        files.push((path.clone(), bytes));
        path
    };
    for (t, patch) in patches.iter().enumerate() {
        for (k, &(g, q)) in cfg.pairings().iter().enumerate() {
            let base = match q {
                Some(q) => jpeg_roundtrip(patch, q as i64)?,
                None => patch.clone(),
            };
            let mut enh = gamma_correct(&base, GammaParam::new(g)?);
            let attack = if cfg.scenario.uses_attack() {
                let stream = ((idx as u64) << 24) ^ ((t as u64) << 12) ^ k as u64;
                enh = attack_dither(&enh, derive_seed(cfg.seed, stream));
                Some(DITHER_ATTACK.to_string())
            } else {
                None
            };
            let orig_path = persist(&base, &mut files);
            let enh_path = persist(&enh, &mut files);
            entries.push(ManifestEntry {
                source: src.id.clone(),
                path: orig_path,
                label: Label::Original,
                gamma: None,
                quality: q,
                attack: None,
                split: None,
            });
            entries.push(ManifestEntry {
                source: src.id.clone(),
                path: enh_path,
                label: Label::Enhanced,
                gamma: Some(g),
                quality: q,
                attack,
                split: None,
            });
        }
    }
    Ok((entries, files))
}

/// Builds a scenario under `out_dir`: processed patches go to a
/// content-addressed `patches/` tree, the split-tagged manifest to
/// `out_dir/manifest.csv`.
pub fn build_scenario(src: &SourceSpec, cfg: &ScenarioConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let sources = list_sources(src, cfg.sources_needed())?;
    let produced: Vec<Produced> = sources
        .par_iter()
        .enumerate()
        .map(|(i, s)| process_source(cfg, i, s))
        .collect::<Result<_>>()?;

    let mut written = BTreeSet::new();
    let mut entries = Vec::new();
    for (es, files) in produced {
        for (rel, bytes) in files {
            if written.insert(rel.clone()) {
                let path = out_dir.join(&rel);
                if let Some(dir) = path.parent() {
                    fs::create_dir_all(dir)?;
                }
                fs::write(path, bytes)?;
            }
        }
        entries.extend(es);
    }
    let manifest = split(&DatasetManifest { entries }, cfg.seed, cfg.split_sizes)?;
    fs::create_dir_all(out_dir)?;
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Assigns whole sources to train, val and test after a seeded shuffle.
/// Sources beyond `train + val + test` are dropped.
pub fn split(manifest: &DatasetManifest, seed: u64, sizes: (usize, usize, usize)) -> Result<DatasetManifest> {
    let mut sources: Vec<String> = manifest.sources().into_iter().map(String::from).collect();
    let needed = sizes.0 + sizes.1 + sizes.2;
    if needed > sources.len() {
        return Err(Error::SizesExceedData {
            needed,
            available: sources.len(),
        });
    }
    sources.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assign: HashMap<String, Split> = HashMap::new();
    for (i, s) in sources.into_iter().take(needed).enumerate() {
        let sp = if i < sizes.0 {
            Split::Train
        } else if i < sizes.0 + sizes.1 {
            Split::Val
        } else {
            Split::Test
        };
        assign.insert(s, sp);
    }
    let entries = manifest
        .entries
        .iter()
        .filter_map(|e| {
            assign.get(&e.source).map(|&sp| ManifestEntry {
                split: Some(sp),
                ..e.clone()
            })
        })
        .collect();
    Ok(DatasetManifest { entries })
}

/// Patches of one split loaded into memory as detector inputs.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub repr: Representation,
    pub shape: [usize; 3],
    pub features: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub gammas: Vec<Option<f64>>,
}

impl SplitData {
    /// Loads every entry of `split`; paths resolve against `root`.
    pub fn load(manifest: &DatasetManifest, root: &Path, split: Split, repr: Representation) -> Result<Self> {
        let entries = manifest.split_entries(split);
        if entries.is_empty() {
            return Err(Error::EmptySplit(split.to_string()));
        }
        Self::from_entries(&entries, root, repr)
    }

    pub fn from_entries(entries: &[&ManifestEntry], root: &Path, repr: Representation) -> Result<Self> {
        let mut cache: BTreeMap<&Path, (Vec<f32>, [usize; 3])> = BTreeMap::new();
        let mut data = Self {
            repr,
            shape: [0; 3],
            features: Vec::with_capacity(entries.len()),
            labels: Vec::with_capacity(entries.len()),
            gammas: Vec::with_capacity(entries.len()),
        };
        for e in entries {
            if !cache.contains_key(e.path.as_path()) {
                let img = load_pgm(&root.join(&e.path)).map_err(|err| match err {
                    Error::MissingFile(p) => Error::MissingImage(p),
                    other => other,
                })?;
                cache.insert(&e.path, (repr.features(&img), repr.shape(&img)));
            }
            let (f, shape) = &cache[e.path.as_path()];
            if data.features.is_empty() {
                data.shape = *shape;
            } else if *shape != data.shape {
                return Err(Error::ShapeMismatch(format!(
                    "{} is {:?}, expected {:?}",
                    e.path.display(),
                    shape,
                    data.shape
                )));
            }
            data.features.push(f.clone());
            data.labels.push(e.label.index());
            data.gammas.push(e.gamma);
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stacks the samples at `idx` into an `(N, C, H, W)` tensor.
    pub fn gather(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let item: usize = self.shape.iter().product();
        let mut data = Vec::with_capacity(idx.len() * item);
        for &i in idx {
            data.extend_from_slice(&self.features[i]);
        }
        let t = Tensor::new(vec![idx.len(), self.shape[0], self.shape[1], self.shape[2]], data)
            .expect("consistent shapes");
        (t, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Sample order of `epoch`, a deterministic function of `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch)));
        order
    }

    /// Mini-batches of one epoch; the last one may be short.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> impl Iterator<Item = (Tensor<f32>, Vec<usize>)> + '_ {
        let order = self.epoch_order(seed, epoch);
        let bs = batch_size.max(1);
        (0..order.len().div_ceil(bs)).map(move |b| {
            let idx = &order[b * bs..((b + 1) * bs).min(order.len())];
            self.gather(idx)
        })
    }
}

/// Shuffled mini-batches of `split` for one epoch.
pub fn batch_iter(
    manifest: &DatasetManifest,
    root: &Path,
    split: Split,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    repr: Representation,
) -> Result<Vec<(Tensor<f32>, Vec<usize>)>> {
    let data = SplitData::load(manifest, root, split, repr)?;
    Ok(data.batches(batch_size, seed, epoch).collect())
}
