//! Dataset discovery, splitting, batching with cache/prefetch, and augmentation.
//!
//! All randomness comes from xoshiro256** seeded through SplitMix64, with
//! explicit Fisher-Yates shuffles and multiply-shift bounded draws so orders
//! are reproducible independently of any particular `rand` version.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver};
use std::sync::{Arc, OnceLock};
use std::thread::JoinHandle;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::imageproc::Preprocess;
use crate::tensor::Tensor;

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Batches prepared ahead of the consumer.
pub const PREFETCH_DEPTH: usize = 2;

pub type Rng = Xoshiro256StarStar;

pub fn rng(seed: u64) -> Rng {
    Xoshiro256StarStar::seed_from_u64(seed)
}

/// Uniform integer in `0..n` by 128-bit multiply-shift.
pub fn uniform_below(rng: &mut Rng, n: usize) -> usize {
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(items: &mut [T], rng: &mut Rng) {
    for i in (1..items.len()).rev() {
        let j = uniform_below(rng, i + 1);
        items.swap(i, j);
    }
}

/// Mixes a base seed with a stream index (epoch, batch, ...).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDataset {
    pub items: Vec<(PathBuf, usize)>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|(_, l)| *l).collect()
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
        .unwrap_or(false)
}

/// Scans `root/<class>/<image>`; classes and files are sorted by byte order.
pub fn scan_dataset_dir(root: &Path) -> Result<LabeledDataset> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} does not exist or is not a directory",
            root.display()
        )));
    }
    let read_dir = |dir: &Path| -> Result<Vec<PathBuf>> {
        let mut entries = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
            .collect::<Result<Vec<_>>>()?;
        entries.sort();
        Ok(entries)
    };
    let mut class_dirs: Vec<(String, PathBuf)> = read_dir(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| Some((p.file_name()?.to_str()?.to_owned(), p)))
        .collect();
    class_dirs.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    let mut items = Vec::new();
    let mut class_names = Vec::with_capacity(class_dirs.len());
    for (index, (name, dir)) in class_dirs.into_iter().enumerate() {
        let mut files: Vec<PathBuf> = read_dir(&dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
        if files.is_empty() {
            return Err(Error::Dataset(format!("class directory {} has no images", dir.display())));
        }
        items.extend(files.into_iter().map(|f| (f, index)));
        class_names.push(name);
    }
    Ok(LabeledDataset { items, class_names })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_frac: f64, val_frac: f64, test_frac: f64, seed: u64) -> Result<Self> {
        let spec = SplitSpec {
            train_frac,
            val_frac,
            test_frac,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.val_frac, self.test_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::InvalidArgument(format!("split fractions {fracs:?} outside [0, 1]")));
        }
        if (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split fractions {fracs:?} do not sum to 1")));
        }
        Ok(())
    }

    /// 80% train, 10% validation, 10% test.
    pub fn standard(seed: u64) -> Self {
        SplitSpec {
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

/// Shuffles then cuts: `floor(val·n)` validation, `floor(test·n)` test, the
/// remainder train.
pub fn split_dataset(ds: &LabeledDataset, spec: &SplitSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    let n = ds.len();
    if n == 0 {
        return Err(Error::Empty("cannot split an empty dataset"));
    }
    let mut items = ds.items.clone();
    shuffle(&mut items, &mut rng(spec.seed));
    // The epsilon keeps e.g. 0.1 * 100 from landing just below 10.
    let count = |frac: f64| ((frac * n as f64) + 1e-9).floor() as usize;
    let n_val = count(spec.val_frac).min(n);
    let n_test = count(spec.test_frac).min(n - n_val);
    let n_train = n - n_val - n_test;
    let part = |range: std::ops::Range<usize>| LabeledDataset {
        items: items[range].to_vec(),
        class_names: ds.class_names.clone(),
    };
    Ok(DatasetSplit {
        train: part(0..n_train),
        val: part(n_train..n_train + n_val),
        test: part(n_train + n_val..n),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// B×H×W×3 in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    /// Dataset order (evaluation).
    Sequential,
    /// Fisher-Yates permutation under the given seed.
    Shuffled(u64),
}

struct LoaderInner {
    items: Vec<(PathBuf, usize)>,
    image_size: usize,
    preprocess: Preprocess,
    cache: Option<Vec<OnceLock<Arc<Tensor>>>>,
    reads: AtomicUsize,
    exec: Exec,
}

impl LoaderInner {
    fn load(&self, index: usize) -> Result<Arc<Tensor>> {
        if let Some(hit) = self.cache.as_ref().and_then(|c| c[index].get()) {
            return Ok(Arc::clone(hit));
        }
        let path = &self.items[index].0;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.reads.fetch_add(1, Ordering::Relaxed);
        let tensor = self
            .preprocess
            .image_to_tensor(&bytes, self.image_size, self.image_size)
            .map_err(|e| Error::DecodeFile {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        let tensor = Arc::new(tensor);
        if let Some(cache) = &self.cache {
            // Write-once; a concurrent writer would have produced the same tensor.
            let _ = cache[index].set(Arc::clone(&tensor));
        }
        Ok(tensor)
    }

    fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let tensors = self.exec.try_map(indices.len(), |i| self.load(indices[i]))?;
        let s = self.image_size;
        let mut data = Vec::with_capacity(indices.len() * s * s * 3);
        for t in &tensors {
            data.extend_from_slice(t.data());
        }
        Ok(Batch {
            images: Tensor::new(vec![indices.len(), s, s, 3], data)?,
            labels: indices.iter().map(|&i| self.items[i].1).collect(),
        })
    }
}

/// Decodes, resizes and rescales dataset images into batches, optionally
/// caching decoded tensors across epochs.
#[derive(Clone)]
pub struct BatchLoader {
    inner: Arc<LoaderInner>,
}

impl BatchLoader {
    pub fn new(ds: &LabeledDataset, image_size: usize, preprocess: Preprocess, cache: bool) -> Self {
        Self::with_exec(ds, image_size, preprocess, cache, Exec::default())
    }

    pub fn with_exec(
        ds: &LabeledDataset,
        image_size: usize,
        preprocess: Preprocess,
        cache: bool,
        exec: Exec,
    ) -> Self {
        BatchLoader {
            inner: Arc::new(LoaderInner {
                items: ds.items.clone(),
                image_size,
                preprocess,
                cache: cache.then(|| (0..ds.len()).map(|_| OnceLock::new()).collect()),
                reads: AtomicUsize::new(0),
                exec,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.items.is_empty()
    }

    /// Number of image files read from disk so far.
    pub fn file_reads(&self) -> usize {
        self.inner.reads.load(Ordering::Relaxed)
    }

    /// Item order for one pass.
    pub fn order(&self, order: Order) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if let Order::Shuffled(seed) = order {
            shuffle(&mut idx, &mut rng(seed));
        }
        idx
    }

    /// One pass over the data. Batches are prepared on a background thread,
    /// at most [`PREFETCH_DEPTH`] ahead, and yielded in order. The first
    /// error ends the pass.
    pub fn epoch(&self, batch_size: usize, order: Order) -> Result<BatchStream> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        let indices = self.order(order);
        let inner = Arc::clone(&self.inner);
        let (tx, rx) = mpsc::sync_channel(PREFETCH_DEPTH);
        let worker = std::thread::Builder::new()
            .name("batch-prefetch".into())
            .spawn(move || {
                for chunk in indices.chunks(batch_size) {
                    let batch = inner.batch(chunk);
                    let failed = batch.is_err();
                    if tx.send(batch).is_err() || failed {
                        break;
                    }
                }
            })
            .map_err(|e| Error::io("<prefetch thread>", e))?;
        Ok(BatchStream {
            rx,
            worker: Some(worker),
        })
    }

    /// Loads a pass synchronously on the calling thread.
    pub fn epoch_blocking(&self, batch_size: usize, order: Order) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        self.order(order)
            .chunks(batch_size)
            .map(|c| self.inner.batch(c))
            .collect()
    }
}

pub struct BatchStream {
    rx: Receiver<Result<Batch>>,
    worker: Option<JoinHandle<()>>,
}

impl Iterator for BatchStream {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.rx.recv() {
            Ok(b) => Some(b),
            Err(_) => {
                if let Some(w) = self.worker.take() {
                    let _ = w.join();
                }
                None
            }
        }
    }
}

/// Convenience wrapper: one shuffled pass with a fresh loader.
pub fn make_batches(
    ds: &LabeledDataset,
    batch_size: usize,
    epoch_seed: u64,
    image_size: usize,
    cache: bool,
) -> Result<BatchStream> {
    BatchLoader::new(ds, image_size, Preprocess::default(), cache)
        .epoch(batch_size, Order::Shuffled(epoch_seed))
}

/// Exact-pixel transforms drawn for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentOps {
    pub hflip: bool,
    pub vflip: bool,
    /// Clockwise quarter turns, 0..=3.
    pub quarter_turns: u8,
}

impl AugmentOps {
    pub fn draw(rng: &mut Rng) -> Self {
        AugmentOps {
            hflip: rng.next_u64() >> 63 == 1,
            vflip: rng.next_u64() >> 63 == 1,
            quarter_turns: uniform_below(rng, 4) as u8,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == AugmentOps::default()
    }
}

/// Applies flips then rotation to one H×W×C image.
pub fn augment_image(img: &Tensor, ops: AugmentOps) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected HxWxC image, got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if ops.quarter_turns % 2 == 1 && h != w {
        return Err(Error::Shape(format!("cannot rotate non-square {h}x{w} image by 90 degrees")));
    }
    let src = img.data();
    // For each output pixel, find the source pixel by undoing the ops.
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            // Undo the clockwise rotation (odd turns only occur on squares).
            let (mut sy, mut sx) = match ops.quarter_turns % 4 {
                0 => (y, x),
                1 => (w - 1 - x, y),
                2 => (h - 1 - y, w - 1 - x),
                _ => (x, h - 1 - y),
            };
            if ops.vflip {
                sy = h - 1 - sy;
            }
            if ops.hflip {
                sx = w - 1 - sx;
            }
            let at = (sy * w + sx) * c;
            out.extend_from_slice(&src[at..at + c]);
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Draws [`AugmentOps`] independently per image under `seed`.
pub fn augment_batch(b: &Batch, seed: u64) -> Result<Batch> {
    let s = b.images.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected BxHxWxC batch, got {s:?}")));
    }
    let per = s[1] * s[2] * s[3];
    let mut rng = rng(seed);
    let mut data = Vec::with_capacity(b.images.len());
    for chunk in b.images.data().chunks(per.max(1)).take(s[0]) {
        let ops = AugmentOps::draw(&mut rng);
        let img = Tensor::new(s[1..].to_vec(), chunk.to_vec())?;
        data.extend(augment_image(&img, ops)?.into_data());
    }
    Ok(Batch {
        images: Tensor::new(s.to_vec(), data)?,
        labels: b.labels.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageproc::{encode_png, RawImage};
    use proptest::prelude::*;
    use rand_core::RngCore;

    fn write_png(path: &Path, w: usize, rgb: [u8; 3]) {
        let px = (0..w * w).flat_map(|_| rgb).collect();
        fs::write(path, encode_png(&RawImage::new(w, w, 3, px).unwrap()).unwrap()).unwrap();
    }

    fn make_tree(root: &Path, classes: &[&str], per_class: usize) {
        for (ci, c) in classes.iter().enumerate() {
            fs::create_dir_all(root.join(c)).unwrap();
            for i in 0..per_class {
                write_png(&root.join(c).join(format!("img_{i:02}.png")), 4, [ci as u8 * 60, i as u8, 9]);
            }
        }
    }

    fn fake_dataset(n: usize) -> LabeledDataset {
        LabeledDataset {
            items: (0..n).map(|i| (PathBuf::from(format!("x/{i}.png")), i % 3)).collect(),
            class_names: vec!["a".into(), "b".into(), "c".into()],
        }
    }

    #[test]
    fn xoshiro_is_splitmix_seeded() {
        // SplitMix64(0) first output, used as the first state word.
        let mut sm = 0u64;
        sm = sm.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = sm;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        let s0 = z ^ (z >> 31);
        sm = sm.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = sm;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        let s1 = z ^ (z >> 31);
        // xoshiro256** output = rotl(s1 * 5, 7) * 9
        let want = s1.wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        assert_ne!(s0, 0);
        assert_eq!(rng(0).next_u64(), want);
    }

    #[test]
    fn scan_sorts_classes_and_files() {
        let dir = tempfile::tempdir().unwrap();
        make_tree(dir.path(), &["head_lice", "alopecia_areata"], 2);
        fs::write(dir.path().join("head_lice").join("notes.txt"), "x").unwrap();
        write_png(&dir.path().join("head_lice").join("UPPER.PNG"), 4, [1, 2, 3]);
        let ds = scan_dataset_dir(dir.path()).unwrap();
        assert_eq!(ds.class_names, vec!["alopecia_areata", "head_lice"]);
        assert_eq!(ds.len(), 5);
        let names: Vec<_> = ds.items.iter().map(|(p, _)| p.file_name().unwrap().to_str().unwrap()).collect();
        assert_eq!(names, ["img_00.png", "img_01.png", "UPPER.PNG", "img_00.png", "img_01.png"]);
        assert_eq!(ds.labels(), vec![0, 0, 1, 1, 1]);
    }

    #[test]
    fn scan_matches_filesystem_walk() {
        let dir = tempfile::tempdir().unwrap();
        make_tree(dir.path(), &["c", "a", "b"], 5);
        let ds = scan_dataset_dir(dir.path()).unwrap();
        assert_eq!(ds.len(), 15);
        for (path, label) in &ds.items {
            let parent = path.parent().unwrap().file_name().unwrap().to_str().unwrap();
            assert_eq!(ds.class_names[*label], parent);
        }
    }

    #[test]
    fn scan_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(scan_dataset_dir(dir.path()).is_err());
        assert!(scan_dataset_dir(&dir.path().join("missing")).is_err());
        fs::create_dir(dir.path().join("empty_class")).unwrap();
        assert!(scan_dataset_dir(dir.path()).is_err());
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let sizes = |n| {
            let s = split_dataset(&fake_dataset(n), &SplitSpec::standard(1)).unwrap();
            (s.train.len(), s.val.len(), s.test.len())
        };
        assert_eq!(sizes(100), (80, 10, 10));
        assert_eq!(sizes(10), (8, 1, 1));
        assert_eq!(sizes(3), (3, 0, 0));
        assert!(SplitSpec::new(0.5, 0.5, 0.5, 0).is_err());
        assert!(SplitSpec::new(1.2, -0.1, -0.1, 0).is_err());
    }

    #[test]
    fn split_is_seeded() {
        let ds = fake_dataset(100);
        let a = split_dataset(&ds, &SplitSpec::standard(7)).unwrap();
        let b = split_dataset(&ds, &SplitSpec::standard(7)).unwrap();
        let c = split_dataset(&ds, &SplitSpec::standard(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train.items, c.train.items);
        assert_eq!(a.test.class_names, ds.class_names);
    }

    #[test]
    fn batches_have_remainder_and_cache_avoids_reads() {
        let dir = tempfile::tempdir().unwrap();
        make_tree(dir.path(), &["a", "b"], 35);
        let ds = scan_dataset_dir(dir.path()).unwrap();
        let loader = BatchLoader::new(&ds, 8, Preprocess::default(), true);
        let sizes: Vec<usize> = loader
            .epoch(32, Order::Shuffled(1))
            .unwrap()
            .map(|b| b.unwrap().len())
            .collect();
        assert_eq!(sizes, vec![32, 32, 6]);
        assert_eq!(loader.file_reads(), 70);
        let second: Vec<Batch> = loader.epoch(32, Order::Shuffled(2)).unwrap().map(|b| b.unwrap()).collect();
        assert_eq!(loader.file_reads(), 70);
        for b in &second {
            assert_eq!(&b.images.shape()[1..], &[8, 8, 3]);
            assert!(b.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        let uncached = BatchLoader::new(&ds, 8, Preprocess::default(), false);
        uncached.epoch(32, Order::Sequential).unwrap().for_each(drop);
        uncached.epoch(32, Order::Sequential).unwrap().for_each(drop);
        assert_eq!(uncached.file_reads(), 140);
    }

    #[test]
    fn batches_are_deterministic_and_cover_each_item_once() {
        let dir = tempfile::tempdir().unwrap();
        make_tree(dir.path(), &["a", "b", "c"], 7);
        let ds = scan_dataset_dir(dir.path()).unwrap();
        let run = || -> Vec<Batch> {
            make_batches(&ds, 4, 99, 4, false).unwrap().map(|b| b.unwrap()).collect()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        let loader = BatchLoader::new(&ds, 4, Preprocess::default(), false);
        let mut order = loader.order(Order::Shuffled(99));
        let labels: Vec<usize> = a.iter().flat_map(|b| b.labels.clone()).collect();
        assert_eq!(labels, order.iter().map(|&i| ds.items[i].1).collect::<Vec<_>>());
        order.sort();
        assert_eq!(order, (0..21).collect::<Vec<_>>());
        assert_eq!(a, loader.epoch_blocking(4, Order::Shuffled(99)).unwrap());
    }

    #[test]
    fn undecodable_file_aborts_with_path() {
        let dir = tempfile::tempdir().unwrap();
        make_tree(dir.path(), &["a"], 2);
        let bad = dir.path().join("a").join("img_zz.png");
        fs::write(&bad, b"garbage").unwrap();
        let ds = scan_dataset_dir(dir.path()).unwrap();
        let results: Vec<_> = make_batches(&ds, 1, 0, 4, false).unwrap().collect();
        let err = results.into_iter().find_map(|r| r.err()).unwrap();
        match err {
            Error::DecodeFile { path, .. } => assert_eq!(path, bad),
            other => panic!("unexpected {other:?}"),
        }
        assert!(BatchLoader::new(&ds, 4, Preprocess::default(), false).epoch(0, Order::Sequential).is_err());
    }

    fn sample_batch(n: usize, side: usize, seed: u64) -> Batch {
        let mut r = rng(seed);
        let images = Tensor::from_fn(&[n, side, side, 3], |_| (r.next_u64() % 256) as f32 / 255.0);
        Batch {
            images,
            labels: (0..n).map(|i| i % 2).collect(),
        }
    }

    #[test]
    fn identity_draw_leaves_image_unchanged() {
        let b = sample_batch(1, 5, 3);
        let seed = (0..10_000u64)
            .find(|&s| AugmentOps::draw(&mut rng(s)).is_identity())
            .expect("an identity draw exists");
        assert_eq!(augment_batch(&b, seed).unwrap(), b);
    }

    #[test]
    fn flips_are_involutions_and_rotation_has_order_four() {
        let img = Tensor::from_fn(&[3, 3, 2], |i| (i[0] * 6 + i[1] * 2 + i[2]) as f32);
        let h = AugmentOps { hflip: true, ..Default::default() };
        assert_eq!(augment_image(&augment_image(&img, h).unwrap(), h).unwrap(), img);
        let turn = AugmentOps { quarter_turns: 1, ..Default::default() };
        let mut r = img.clone();
        for _ in 0..4 {
            r = augment_image(&r, turn).unwrap();
        }
        assert_eq!(r, img);
        // Clockwise: top-left moves to top-right.
        let rotated = augment_image(&img, turn).unwrap();
        assert_eq!(rotated.get(&[0, 2, 0]).unwrap(), img.get(&[0, 0, 0]).unwrap());
        let rect = Tensor::<f32>::zeros(&[2, 3, 1]);
        assert!(augment_image(&rect, turn).is_err());
        assert!(augment_image(&rect, AugmentOps { quarter_turns: 2, vflip: true, hflip: true }).is_ok());
    }

    proptest! {
        #[test]
        fn augmentation_preserves_labels_shape_and_pixel_multiset(seed in any::<u64>(), n in 1usize..5) {
            let b = sample_batch(n, 6, seed ^ 1);
            let out = augment_batch(&b, seed).unwrap();
            prop_assert_eq!(&out.labels, &b.labels);
            prop_assert_eq!(out.images.shape(), b.images.shape());
            let per = 6 * 6 * 3;
            for (x, y) in b.images.data().chunks(per).zip(out.images.data().chunks(per)) {
                let mut px: Vec<[u32; 3]> = x.chunks(3).map(|p| [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()]).collect();
                let mut py: Vec<[u32; 3]> = y.chunks(3).map(|p| [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()]).collect();
                px.sort();
                py.sort();
                prop_assert_eq!(px, py);
            }
        }

        #[test]
        fn split_parts_are_disjoint_and_exhaustive(n in 1usize..200, seed in any::<u64>()) {
            let ds = fake_dataset(n);
            let s = split_dataset(&ds, &SplitSpec::standard(seed)).unwrap();
            let mut all: Vec<PathBuf> = s.train.items.iter().chain(&s.val.items).chain(&s.test.items)
                .map(|(p, _)| p.clone()).collect();
            prop_assert_eq!(all.len(), n);
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), n);
        }
    }
}
