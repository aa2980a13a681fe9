//! Corpus ingestion: manifests with deterministic splits, synthetic
//! paired-sample generation with full provenance, and clip sampling.
//!
//! A corpus root contains `images/*.png` (clean stills) and `clips/<name>/`
//! (frame directories with a `frame_rate.txt` sidecar). Loose `*.png`
//! files directly under the root are also accepted as images.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::degrade::{self, DegradationKind, DegradationLevel, DegradationParameters};
use crate::error::{Error, Result};
use crate::imaging::{ImageTensor, VideoSequence};
use crate::rng::{derive_seed, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ItemKind {
    Image,
    Clip,
}

impl ItemKind {
    fn name(&self) -> &'static str {
        match self {
            ItemKind::Image => "image",
            ItemKind::Clip => "clip",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(ItemKind::Image),
            "clip" => Ok(ItemKind::Clip),
            other => Err(Error::Corpus(format!("unknown item kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Corpus(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestItem {
    pub path: PathBuf,
    pub kind: ItemKind,
    pub split: Split,
    pub hash: String,
}

/// The corpus manifest: every item, its split and its content hash.
#[derive(Debug, Clone)]
pub struct CorpusManifest {
    pub items: Vec<ManifestItem>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn sha256_clip(dir: &Path) -> Result<String> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut h = Sha256::new();
    for p in paths {
        h.update(std::fs::read(&p)?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Largest-remainder apportionment of `n` items to the given ratios.
///
/// Remainders are computed as `r·n − floor·total` so integer ratios stay
/// exact and ties break deterministically toward the earlier split.
pub fn apportion(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let total = ratios.0 + ratios.1 + ratios.2;
    let scaled = [ratios.0 * n as f64, ratios.1 * n as f64, ratios.2 * n as f64];
    let mut counts: Vec<usize> = scaled.iter().map(|&s| (s / total).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let remainders: Vec<f64> = scaled
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| s - c as f64 * total)
        .collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        remainders[b]
            .partial_cmp(&remainders[a])
            .expect("finite remainders")
            .then(a.cmp(&b))
    });
    for k in 0..(n - assigned) {
        counts[order[k % 3]] += 1;
    }
    (counts[0], counts[1], counts[2])
}

impl CorpusManifest {
    /// Scan a corpus root and assign splits: deterministic shuffle by seed,
    /// then largest-remainder apportionment of the ratios.
    pub fn build(root: &Path, ratios: (f64, f64, f64), seed: u64) -> Result<Self> {
        let mut found: Vec<(PathBuf, ItemKind)> = Vec::new();
        let image_dir = root.join("images");
        let scan_images = |dir: &Path, found: &mut Vec<(PathBuf, ItemKind)>| -> Result<()> {
            if !dir.is_dir() {
                return Ok(());
            }
            let mut paths: Vec<_> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "png"))
                .collect();
            paths.sort();
            for p in paths {
                found.push((p, ItemKind::Image));
            }
            Ok(())
        };
        scan_images(&image_dir, &mut found)?;
        scan_images(root, &mut found)?;
        let clip_dir = root.join("clips");
        if clip_dir.is_dir() {
            let mut dirs: Vec<_> = std::fs::read_dir(&clip_dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            dirs.sort();
            for d in dirs {
                found.push((d, ItemKind::Clip));
            }
        }
        if found.is_empty() {
            return Err(Error::Corpus(format!("empty corpus at {root:?}")));
        }
        if found.len() < 10 {
            return Err(Error::Corpus(format!(
                "corpus at {root:?} has only {} items; at least 10 required",
                found.len()
            )));
        }
        let mut order: Vec<usize> = (0..found.len()).collect();
        let mut rng = rng_for(seed, "manifest-shuffle");
        order.shuffle(&mut rng);
        let (n_train, n_val, _) = apportion(found.len(), ratios);
        let mut items = Vec::with_capacity(found.len());
        for (rank, &idx) in order.iter().enumerate() {
            let split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            let (path, kind) = &found[idx];
            let hash = match kind {
                ItemKind::Image => sha256_file(path)?,
                ItemKind::Clip => sha256_clip(path)?,
            };
            items.push(ManifestItem { path: path.clone(), kind: *kind, split, hash });
        }
        items.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = CorpusManifest { items };
        manifest.check_disjoint()?;
        Ok(manifest)
    }

    /// No hash appears in two different splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen: HashMap<&str, Split> = HashMap::new();
        for item in &self.items {
            if let Some(prev) = seen.get(item.hash.as_str()) {
                if *prev != item.split {
                    return Err(Error::Corpus(format!(
                        "duplicate content {} appears in {} and {}",
                        item.hash,
                        prev.name(),
                        item.split.name()
                    )));
                }
            } else {
                seen.insert(&item.hash, item.split);
            }
        }
        Ok(())
    }

    pub fn split_items(&self, split: Split, kind: ItemKind) -> Vec<&ManifestItem> {
        self.items
            .iter()
            .filter(|i| i.split == split && i.kind == kind)
            .collect()
    }

    /// Line-oriented text serialization: `path<TAB>kind<TAB>split<TAB>hash`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut out = String::new();
        for i in &self.items {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                i.path.display(),
                i.kind.name(),
                i.split.name(),
                i.hash
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut items = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 4 {
                return Err(Error::Corpus(format!("manifest line {} malformed", ln + 1)));
            }
            items.push(ManifestItem {
                path: PathBuf::from(parts[0]),
                kind: ItemKind::parse(parts[1])?,
                split: Split::parse(parts[2])?,
                hash: parts[3].to_string(),
            });
        }
        Ok(CorpusManifest { items })
    }
}

/// A synthetic training pair with full provenance.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub x_h: ImageTensor,
    pub x_l: ImageTensor,
    pub params: DegradationParameters,
    pub level: DegradationLevel,
    /// Seed that realized the stochastic parts of the degradation.
    pub realize_seed: u64,
    pub source: PathBuf,
    pub crop_offset: (usize, usize),
}

impl PairedSample {
    /// Re-apply the recorded parameters to the recorded crop.
    pub fn reproduce(&self) -> Result<ImageTensor> {
        degrade::apply(&self.x_h, &self.params, self.realize_seed)
    }

    /// Provenance as a human-readable key-value block.
    pub fn provenance_kv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("source = {}\n", self.source.display()));
        out.push_str(&format!("crop_row = {}\n", self.crop_offset.0));
        out.push_str(&format!("crop_col = {}\n", self.crop_offset.1));
        out.push_str(&format!("level = {}\n", self.level.name()));
        out.push_str(&format!("realize_seed = {}\n", self.realize_seed));
        out.push_str(&self.params.to_kv_string());
        out
    }
}

/// Configuration for paired-sample generation.
#[derive(Debug, Clone)]
pub struct PairConfig {
    pub kinds: Vec<DegradationKind>,
    pub levels: Vec<DegradationLevel>,
    pub patch: usize,
    pub scale: u32,
    pub count: usize,
    pub seed: u64,
}

/// Stream of deterministic paired samples drawn from a manifest split.
pub struct PairStream<'a> {
    items: Vec<&'a ManifestItem>,
    cfg: PairConfig,
    next: usize,
    cache: HashMap<PathBuf, ImageTensor>,
}

/// Build the paired-sample stream for a split.
pub fn make_pairs<'a>(manifest: &'a CorpusManifest, split: Split, cfg: PairConfig) -> Result<PairStream<'a>> {
    let items = manifest.split_items(split, ItemKind::Image);
    if items.is_empty() && cfg.count > 0 {
        return Err(Error::Corpus(format!("no images in split {}", split.name())));
    }
    if cfg.kinds.is_empty() || cfg.levels.is_empty() {
        return Err(Error::Corpus("pair generation needs kinds and levels".into()));
    }
    Ok(PairStream { items, cfg, next: 0, cache: HashMap::new() })
}

impl<'a> PairStream<'a> {
    fn generate(&mut self, index: usize) -> Result<PairedSample> {
        let sample_seed = derive_seed(self.cfg.seed, &format!("pair/{index}"));
        let mut rng = rng_for(sample_seed, "choose");
        let item = self.items[rng.random_range(0..self.items.len())];
        let image = match self.cache.get(&item.path) {
            Some(img) => img.clone(),
            None => {
                let img = ImageTensor::read_png(&item.path)?;
                self.cache.insert(item.path.clone(), img.clone());
                img
            }
        };
        let p = self.cfg.patch;
        if image.height() < p || image.width() < p {
            return Err(Error::Corpus(format!(
                "{:?} is {}x{}, smaller than patch {p}",
                item.path,
                image.height(),
                image.width()
            )));
        }
        let max_i = image.height() - p;
        let max_j = image.width() - p;
        let i0 = if max_i == 0 { 0 } else { rng.random_range(0..=max_i) };
        let j0 = if max_j == 0 { 0 } else { rng.random_range(0..=max_j) };
        let x_h = ImageTensor::new(
            image.data().slice(ndarray::s![i0..i0 + p, j0..j0 + p, ..]).to_owned(),
        )?;
        let kind = self.cfg.kinds[rng.random_range(0..self.cfg.kinds.len())];
        let level = self.cfg.levels[rng.random_range(0..self.cfg.levels.len())];
        let params = degrade::sample_parameters(kind, level, p, p, self.cfg.scale, sample_seed);
        let realize_seed = derive_seed(sample_seed, "realize");
        let x_l = degrade::apply(&x_h, &params, realize_seed)?;
        Ok(PairedSample {
            x_h,
            x_l,
            params,
            level,
            realize_seed,
            source: item.path.clone(),
            crop_offset: (i0, j0),
        })
    }
}

impl<'a> Iterator for PairStream<'a> {
    type Item = Result<PairedSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.cfg.count {
            return None;
        }
        let index = self.next;
        self.next += 1;
        Some(self.generate(index))
    }
}

/// A contiguous `length`-frame window of one clip, deterministic in `seed`.
pub fn sample_clip(manifest: &CorpusManifest, split: Split, length: usize, seed: u64) -> Result<VideoSequence> {
    let clips = manifest.split_items(split, ItemKind::Clip);
    if clips.is_empty() {
        return Err(Error::Corpus(format!("no clips in split {}", split.name())));
    }
    let mut rng = rng_for(seed, "clip-choice");
    // gather those long enough, in manifest order
    let mut candidates = Vec::new();
    for item in clips {
        let video = VideoSequence::read_dir(&item.path)?;
        if video.len() >= length {
            candidates.push(video);
        }
    }
    if candidates.is_empty() {
        return Err(Error::Corpus(format!("no clip has at least {length} frames")));
    }
    let video = &candidates[rng.random_range(0..candidates.len())];
    let max_off = video.len() - length;
    let off = if max_off == 0 { 0 } else { rng.random_range(0..=max_off) };
    VideoSequence::new(video.frames()[off..off + length].to_vec(), video.frame_rate())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_root() -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
    }

    #[test]
    fn apportionment_closed_forms() {
        assert_eq!(apportion(240, (7.0, 2.0, 1.0)), (168, 48, 24));
        assert_eq!(apportion(10, (7.0, 2.0, 1.0)), (7, 2, 1));
        let (a, b, c) = apportion(11, (7.0, 2.0, 1.0));
        assert_eq!(a + b + c, 11);
    }

    #[test]
    fn manifest_build_is_deterministic_and_disjoint() {
        let root = fixture_root();
        let m1 = CorpusManifest::build(&root, (7.0, 2.0, 1.0), 3).unwrap();
        let m2 = CorpusManifest::build(&root, (7.0, 2.0, 1.0), 3).unwrap();
        assert_eq!(m1.items.len(), 18); // 16 images + 2 clips
        for (a, b) in m1.items.iter().zip(m2.items.iter()) {
            assert_eq!(a.path, b.path);
            assert_eq!(a.split, b.split);
            assert_eq!(a.hash, b.hash);
        }
        m1.check_disjoint().unwrap();
        // proportions by largest remainder: 18 items -> 13/3/2
        let counts: Vec<usize> = Split::ALL
            .iter()
            .map(|s| m1.items.iter().filter(|i| i.split == *s).count())
            .collect();
        assert_eq!(counts.iter().sum::<usize>(), 18);
        assert_eq!(counts, vec![13, 3, 2]);

        let different = CorpusManifest::build(&root, (7.0, 2.0, 1.0), 4).unwrap();
        let same_assignment = m1
            .items
            .iter()
            .zip(different.items.iter())
            .all(|(a, b)| a.split == b.split);
        assert!(!same_assignment, "different seeds should reshuffle");
    }

    #[test]
    fn manifest_roundtrips_through_text() {
        let root = fixture_root();
        let m = CorpusManifest::build(&root, (7.0, 2.0, 1.0), 3).unwrap();
        let dir = std::env::temp_dir().join(format!("lucid_manifest_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("manifest.tsv");
        m.save(&path).unwrap();
        let back = CorpusManifest::load(&path).unwrap();
        assert_eq!(back.items.len(), m.items.len());
        for (a, b) in m.items.iter().zip(back.items.iter()) {
            assert_eq!(a.hash, b.hash);
            assert_eq!(a.split, b.split);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn small_corpus_is_rejected() {
        let dir = std::env::temp_dir().join(format!("lucid_small_corpus_{}", std::process::id()));
        std::fs::remove_dir_all(&dir).ok();
        std::fs::create_dir_all(dir.join("images")).unwrap();
        crate::fixtures::synth_image(16, 16, 0)
            .write_png(&dir.join("images/only.png"))
            .unwrap();
        assert!(CorpusManifest::build(&dir, (7.0, 2.0, 1.0), 0).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn pair_stream_counts_and_reproduces() {
        let root = fixture_root();
        let m = CorpusManifest::build(&root, (7.0, 2.0, 1.0), 3).unwrap();
        let cfg = PairConfig {
            kinds: vec![DegradationKind::Noise, DegradationKind::MotionBlur],
            levels: vec![DegradationLevel::L2],
            patch: 64,
            scale: 2,
            count: 12,
            seed: 9,
        };
        let samples: Vec<PairedSample> = make_pairs(&m, Split::Train, cfg.clone())
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(samples.len(), 12);
        for s in &samples {
            assert_eq!(s.x_h.height(), 64);
            assert_eq!(s.x_l.height(), 32);
            // round-trip: re-applying recorded parameters reproduces x_l
            let again = s.reproduce().unwrap();
            assert_eq!(again.data(), s.x_l.data());
        }
        // zero count -> empty stream
        let empty: Vec<_> = make_pairs(&m, Split::Train, PairConfig { count: 0, ..cfg })
            .unwrap()
            .collect();
        assert!(empty.is_empty());
    }

    #[test]
    fn pair_stream_kind_distribution_is_near_uniform() {
        let root = fixture_root();
        let m = CorpusManifest::build(&root, (7.0, 2.0, 1.0), 3).unwrap();
        let kinds = vec![
            DegradationKind::Noise,
            DegradationKind::MotionBlur,
            DegradationKind::LowLight,
            DegradationKind::Smoke,
        ];
        let cfg = PairConfig {
            kinds: kinds.clone(),
            levels: vec![DegradationLevel::L1],
            patch: 32,
            scale: 1,
            count: 400,
            seed: 11,
        };
        let mut counts: HashMap<DegradationKind, usize> = HashMap::new();
        for s in make_pairs(&m, Split::Train, cfg).unwrap() {
            *counts.entry(s.unwrap().params.kind).or_default() += 1;
        }
        for k in &kinds {
            let c = counts[k];
            assert!((70..=130).contains(&c), "{k:?} drawn {c} times of 400");
        }
    }

    #[test]
    fn clip_sampling_contracts() {
        let root = fixture_root();
        let m = CorpusManifest::build(&root, (7.0, 2.0, 1.0), 3).unwrap();
        // find the split that holds at least one clip
        let split = Split::ALL
            .into_iter()
            .find(|s| !m.split_items(*s, ItemKind::Clip).is_empty())
            .unwrap();
        // full-length window is the whole clip, offset forced to 0
        let whole = sample_clip(&m, split, 24, 5).unwrap();
        assert_eq!(whole.len(), 24);
        let a = sample_clip(&m, split, 8, 5).unwrap();
        let b = sample_clip(&m, split, 8, 5).unwrap();
        assert_eq!(a.frames()[0].data(), b.frames()[0].data());
        assert!(sample_clip(&m, split, 500, 5).is_err());
    }
}
