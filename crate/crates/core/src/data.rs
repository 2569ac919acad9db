//! Dataset ingestion, class splits, rotation augmentation and N-way K-shot
//! episode sampling.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset path not found: {0}")]
    MissingPath(PathBuf),
    #[error("no image classes found under {0}")]
    NoClasses(PathBuf),
    #[error("class directory {0} contains no images")]
    EmptyClass(PathBuf),
    #[error("failed to read image {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("split sizes need {required} classes but the dataset has {available}")]
    SplitTooLarge { required: usize, available: usize },
    #[error("at most one split size may be \"all\"")]
    MultipleAll,
    #[error("rotation augmentation requires square images, got {h}x{w}")]
    NonSquare { h: usize, w: usize },
    #[error("episode needs {needed} classes, dataset has {available}")]
    NotEnoughClasses { needed: usize, available: usize },
    #[error("class {class_id} has {available} samples, episode needs {needed}")]
    NotEnoughSamples {
        class_id: i64,
        needed: usize,
        available: usize,
    },
    #[error("synthetic dataset needs at least 2 classes, got {0}")]
    TooFewSyntheticClasses(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Size of one split: an explicit class count, a fraction of all classes, or
/// everything left over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitSize {
    Count(usize),
    Fraction(f64),
    #[serde(rename = "all")]
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: SplitSize,
    pub val: SplitSize,
    pub test: SplitSize,
}

impl SplitSpec {
    pub fn counts(train: usize, val: usize, test: usize) -> Self {
        SplitSpec {
            train: SplitSize::Count(train),
            val: SplitSize::Count(val),
            test: SplitSize::Count(test),
        }
    }

    fn resolve(&self, total: usize) -> Result<(usize, usize, usize), DataError> {
        let fixed = |s: SplitSize| -> Option<usize> {
            match s {
                SplitSize::Count(c) => Some(c),
                SplitSize::Fraction(f) => Some((f * total as f64).floor() as usize),
                SplitSize::All => None,
            }
        };
        let sizes = [self.train, self.val, self.test];
        let n_all = sizes.iter().filter(|s| matches!(s, SplitSize::All)).count();
        if n_all > 1 {
            return Err(DataError::MultipleAll);
        }
        let known: usize = sizes.iter().filter_map(|&s| fixed(s)).sum();
        if known > total {
            return Err(DataError::SplitTooLarge {
                required: known,
                available: total,
            });
        }
        let rest = total - known;
        let get = |s: SplitSize| fixed(s).unwrap_or(rest);
        Ok((get(self.train), get(self.val), get(self.test)))
    }
}

/// One class: a stable id and its samples as `[H,W,C]` tensors in [0,1].
#[derive(Debug, Clone)]
pub struct ClassRecord<E> {
    pub class_id: i64,
    pub samples: Vec<Tensor<E>>,
}

#[derive(Debug, Clone)]
pub struct ClassDataset<E> {
    pub split: Split,
    pub classes: Vec<ClassRecord<E>>,
}

impl<E: Scalar> ClassDataset<E> {
    pub fn new(split: Split, classes: Vec<ClassRecord<E>>) -> Self {
        ClassDataset { split, classes }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// `[H,W,C]` shape of the samples (datasets are homogeneous).
    pub fn sample_shape(&self) -> &[usize] {
        self.classes[0].samples[0].shape()
    }
}

#[derive(Debug, Clone)]
pub struct SplitDatasets<E> {
    pub train: ClassDataset<E>,
    pub val: ClassDataset<E>,
    pub test: ClassDataset<E>,
}

impl<E: Scalar> SplitDatasets<E> {
    pub fn get(&self, split: Split) -> &ClassDataset<E> {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// One N-way K-shot task. Support and query sets are disjoint; classes are
/// drawn without replacement.
#[derive(Debug, Clone)]
pub struct Episode<E> {
    pub n_way: usize,
    pub k_shot: usize,
    pub class_ids: Vec<i64>,
    /// Per-class support samples, `n_way` lists of `k_shot` tensors.
    pub support: Vec<Vec<Tensor<E>>>,
    /// Per-class query samples.
    pub query: Vec<Vec<Tensor<E>>>,
}

impl<E: Scalar> Episode<E> {
    pub fn n_queries(&self) -> usize {
        self.query.iter().map(|q| q.len()).sum()
    }
}

/// Options for image-folder loading.
#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Target height/width after resize.
    pub image_size: usize,
    /// 1 for grayscale, 3 for RGB.
    pub channels: usize,
    /// Seed for the class shuffle that precedes the split assignment.
    pub seed: u64,
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "png" || e == "pgm" || e == "ppm" || e == "pbm"
    )
}

fn collect_class_dirs(root: &Path) -> Result<Vec<PathBuf>, DataError> {
    // A class is any directory that directly contains image files; nested
    // layouts (e.g. alphabet/character/*.png) flatten to their leaf dirs.
    let mut stack = vec![root.to_path_buf()];
    let mut class_dirs = Vec::new();
    while let Some(dir) = stack.pop() {
        let mut has_images = false;
        let entries = std::fs::read_dir(&dir).map_err(|_| DataError::MissingPath(dir.clone()))?;
        let mut subdirs = Vec::new();
        for entry in entries.flatten() {
            let p = entry.path();
            if p.is_dir() {
                subdirs.push(p);
            } else if is_image_file(&p) {
                has_images = true;
            }
        }
        if has_images {
            class_dirs.push(dir.clone());
        } else if subdirs.is_empty() && dir != root {
            return Err(DataError::EmptyClass(dir));
        }
        stack.extend(subdirs);
    }
    class_dirs.sort();
    Ok(class_dirs)
}

fn load_image<E: Scalar>(path: &Path, opts: &LoadOptions) -> Result<Tensor<E>, DataError> {
    let img = image::open(path).map_err(|source| DataError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let size = opts.image_size as u32;
    let img = img.resize_exact(size, size, image::imageops::FilterType::Triangle);
    let h = opts.image_size;
    let inv = E::from_f64(1.0 / 255.0);
    let data: Vec<E> = if opts.channels == 1 {
        img.to_luma8().into_raw().into_iter().map(|p| E::from_f64(p as f64) * inv).collect()
    } else {
        img.to_rgb8().into_raw().into_iter().map(|p| E::from_f64(p as f64) * inv).collect()
    };
    Ok(Tensor::new(vec![h, h, opts.channels], data).expect("image shape"))
}

/// Load `root/<class dirs>/<images>`, split classes into train/val/test by a
/// seeded shuffle, and scale pixels to [0,1]. Class ids are assigned from the
/// sorted directory order before shuffling, so they are stable across runs.
pub fn load_image_folder<E: Scalar>(
    root: &Path,
    spec: &SplitSpec,
    opts: &LoadOptions,
) -> Result<SplitDatasets<E>, DataError> {
    if !root.is_dir() {
        return Err(DataError::MissingPath(root.to_path_buf()));
    }
    let class_dirs = collect_class_dirs(root)?;
    if class_dirs.is_empty() {
        return Err(DataError::NoClasses(root.to_path_buf()));
    }
    let (n_train, n_val, n_test) = spec.resolve(class_dirs.len())?;

    let mut order: Vec<usize> = (0..class_dirs.len()).collect();
    let mut rng = crate::rng::derive(opts.seed, &[crate::rng::stream::DATA_SPLIT]);
    shuffle(&mut order, &mut rng);

    let mut buckets: Vec<Vec<ClassRecord<E>>> = vec![Vec::new(), Vec::new(), Vec::new()];
    for (pos, &class_idx) in order.iter().enumerate() {
        let bucket = if pos < n_train {
            0
        } else if pos < n_train + n_val {
            1
        } else if pos < n_train + n_val + n_test {
            2
        } else {
            continue;
        };
        let dir = &class_dirs[class_idx];
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|_| DataError::MissingPath(dir.clone()))?
            .flatten()
            .map(|e| e.path())
            .filter(|p| is_image_file(p))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(DataError::EmptyClass(dir.clone()));
        }
        let samples = files
            .iter()
            .map(|f| load_image(f, opts))
            .collect::<Result<Vec<_>, _>>()?;
        buckets[bucket].push(ClassRecord {
            class_id: class_idx as i64,
            samples,
        });
    }
    for b in buckets.iter_mut() {
        b.sort_by_key(|c| c.class_id);
    }
    let mut it = buckets.into_iter();
    Ok(SplitDatasets {
        train: ClassDataset::new(Split::Train, it.next().unwrap()),
        val: ClassDataset::new(Split::Val, it.next().unwrap()),
        test: ClassDataset::new(Split::Test, it.next().unwrap()),
    })
}

fn shuffle<R: Rng>(order: &mut [usize], rng: &mut R) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

fn rotate90_cw<E: Scalar>(img: &Tensor<E>) -> Tensor<E> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Tensor::zeros(vec![w, h, c]);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                // (y, x) -> (x, h-1-y)
                out.data_mut()[(x * h + (h - 1 - y)) * c + ch] = img.data()[(y * w + x) * c + ch];
            }
        }
    }
    out
}

/// Expand every class into four: rotations by 0, 90, 180 and 270 degrees,
/// each with its own derived class id (`4*id + quarter_turns`).
pub fn augment_rotations<E: Scalar>(ds: &ClassDataset<E>) -> Result<ClassDataset<E>, DataError> {
    let mut classes = Vec::with_capacity(ds.classes.len() * 4);
    for class in &ds.classes {
        let shape = class.samples[0].shape();
        if shape[0] != shape[1] {
            return Err(DataError::NonSquare {
                h: shape[0],
                w: shape[1],
            });
        }
        let mut current: Vec<Tensor<E>> = class.samples.clone();
        for rot in 0..4 {
            if rot > 0 {
                current = current.iter().map(rotate90_cw).collect();
            }
            classes.push(ClassRecord {
                class_id: class.class_id * 4 + rot,
                samples: current.clone(),
            });
        }
    }
    Ok(ClassDataset::new(ds.split, classes))
}

/// Draw an N-way K-shot episode: classes uniformly without replacement, then
/// disjoint support/query samples uniformly without replacement.
pub fn sample_episode<E: Scalar, R: Rng>(
    ds: &ClassDataset<E>,
    n_way: usize,
    k_shot: usize,
    queries_per_class: usize,
    rng: &mut R,
) -> Result<Episode<E>, DataError> {
    if ds.n_classes() < n_way {
        return Err(DataError::NotEnoughClasses {
            needed: n_way,
            available: ds.n_classes(),
        });
    }
    let mut class_order: Vec<usize> = (0..ds.n_classes()).collect();
    partial_shuffle(&mut class_order, n_way, rng);

    let mut class_ids = Vec::with_capacity(n_way);
    let mut support = Vec::with_capacity(n_way);
    let mut query = Vec::with_capacity(n_way);
    let per_class = k_shot + queries_per_class;
    for &ci in class_order.iter().take(n_way) {
        let class = &ds.classes[ci];
        if class.samples.len() < per_class {
            return Err(DataError::NotEnoughSamples {
                class_id: class.class_id,
                needed: per_class,
                available: class.samples.len(),
            });
        }
        let mut idx: Vec<usize> = (0..class.samples.len()).collect();
        partial_shuffle(&mut idx, per_class, rng);
        class_ids.push(class.class_id);
        support.push(idx[..k_shot].iter().map(|&i| class.samples[i].clone()).collect());
        query.push(
            idx[k_shot..per_class]
                .iter()
                .map(|&i| class.samples[i].clone())
                .collect(),
        );
    }
    Ok(Episode {
        n_way,
        k_shot,
        class_ids,
        support,
        query,
    })
}

/// Fisher-Yates for the first `take` positions only.
fn partial_shuffle<R: Rng>(order: &mut [usize], take: usize, rng: &mut R) {
    let n = order.len();
    for i in 0..take.min(n.saturating_sub(1)) {
        let j = i + rng.random_range(0..n - i);
        order.swap(i, j);
    }
}

/// Synthetic desk-scale dataset: every class is an isotropic Gaussian blob in
/// pixel space, rendered as `[d_img, d_img, 1]` tensors clipped to [0,1].
/// `cluster_spread` is the per-pixel noise std around the class center.
pub fn synth_gaussian_clusters<E: Scalar, R: Rng>(
    n_classes: usize,
    d_img: usize,
    samples_per_class: usize,
    cluster_spread: f64,
    rng: &mut R,
) -> Result<ClassDataset<E>, DataError> {
    if n_classes < 2 {
        return Err(DataError::TooFewSyntheticClasses(n_classes));
    }
    let dim = d_img * d_img;
    let mut classes = Vec::with_capacity(n_classes);
    for class_id in 0..n_classes {
        let center: Vec<f64> = (0..dim).map(|_| 0.2 + 0.6 * rng.random::<f64>()).collect();
        let samples = (0..samples_per_class)
            .map(|_| {
                let data: Vec<E> = center
                    .iter()
                    .map(|&c| {
                        let v = c + cluster_spread * f64::std_normal(rng).as_f64();
                        E::from_f64(v.clamp(0.0, 1.0))
                    })
                    .collect();
                Tensor::new(vec![d_img, d_img, 1], data).expect("synth shape")
            })
            .collect();
        classes.push(ClassRecord {
            class_id: class_id as i64,
            samples,
        });
    }
    Ok(ClassDataset::new(Split::Train, classes))
}

/// Split a synthetic dataset's classes into contiguous train/val/test chunks.
pub fn split_synthetic<E: Scalar>(
    ds: ClassDataset<E>,
    n_train: usize,
    n_val: usize,
    n_test: usize,
) -> Result<SplitDatasets<E>, DataError> {
    if n_train + n_val + n_test > ds.n_classes() {
        return Err(DataError::SplitTooLarge {
            required: n_train + n_val + n_test,
            available: ds.n_classes(),
        });
    }
    let mut by_split: BTreeMap<usize, Vec<ClassRecord<E>>> = BTreeMap::new();
    for (i, class) in ds.classes.into_iter().enumerate() {
        let bucket = if i < n_train {
            0
        } else if i < n_train + n_val {
            1
        } else if i < n_train + n_val + n_test {
            2
        } else {
            continue;
        };
        by_split.entry(bucket).or_default().push(class);
    }
    Ok(SplitDatasets {
        train: ClassDataset::new(Split::Train, by_split.remove(&0).unwrap_or_default()),
        val: ClassDataset::new(Split::Val, by_split.remove(&1).unwrap_or_default()),
        test: ClassDataset::new(Split::Test, by_split.remove(&2).unwrap_or_default()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::fs;

    fn write_png(path: &Path, size: u32, value: u8) {
        let img = image::GrayImage::from_pixel(size, size, image::Luma([value]));
        img.save(path).unwrap();
    }

    fn build_image_tree(n_classes: usize, per_class: usize) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for c in 0..n_classes {
            let class_dir = dir.path().join(format!("class_{c:03}"));
            fs::create_dir(&class_dir).unwrap();
            for s in 0..per_class {
                write_png(
                    &class_dir.join(format!("img_{s}.png")),
                    8,
                    (c * 16 + s) as u8,
                );
            }
        }
        dir
    }

    fn opts(seed: u64) -> LoadOptions {
        LoadOptions {
            image_size: 8,
            channels: 1,
            seed,
        }
    }

    #[test]
    fn omniglot_style_split_counts_resolve_exactly() {
        let spec = SplitSpec::counts(1100, 100, 423);
        assert_eq!(spec.resolve(1623).unwrap(), (1100, 100, 423));
    }

    #[test]
    fn split_all_leaves_val_and_test_empty() {
        let dir = build_image_tree(6, 3);
        let spec = SplitSpec {
            train: SplitSize::All,
            val: SplitSize::Count(0),
            test: SplitSize::Count(0),
        };
        let ds: SplitDatasets<f32> = load_image_folder(dir.path(), &spec, &opts(1)).unwrap();
        assert_eq!(ds.train.n_classes(), 6);
        assert_eq!(ds.val.n_classes(), 0);
        assert_eq!(ds.test.n_classes(), 0);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let dir = build_image_tree(9, 2);
        let spec = SplitSpec::counts(5, 2, 2);
        let a: SplitDatasets<f32> = load_image_folder(dir.path(), &spec, &opts(7)).unwrap();
        let b: SplitDatasets<f32> = load_image_folder(dir.path(), &spec, &opts(7)).unwrap();
        let ids = |d: &ClassDataset<f32>| d.classes.iter().map(|c| c.class_id).collect::<Vec<_>>();
        assert_eq!(ids(&a.train), ids(&b.train));
        assert_eq!(ids(&a.val), ids(&b.val));
        assert_eq!(ids(&a.test), ids(&b.test));
        let mut all = ids(&a.train);
        all.extend(ids(&a.val));
        all.extend(ids(&a.test));
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 9, "no class may appear in two splits");
    }

    #[test]
    fn split_too_large_is_rejected() {
        let dir = build_image_tree(4, 2);
        let spec = SplitSpec::counts(3, 2, 1);
        let err = load_image_folder::<f32>(dir.path(), &spec, &opts(0)).unwrap_err();
        assert!(matches!(err, DataError::SplitTooLarge { .. }));
    }

    #[test]
    fn missing_path_is_rejected() {
        let spec = SplitSpec::counts(1, 0, 0);
        let err =
            load_image_folder::<f32>(Path::new("/nonexistent/xyz"), &spec, &opts(0)).unwrap_err();
        assert!(matches!(err, DataError::MissingPath(_)));
    }

    #[test]
    fn empty_class_directory_is_rejected() {
        let dir = build_image_tree(3, 2);
        fs::create_dir(dir.path().join("class_empty")).unwrap();
        let spec = SplitSpec::counts(3, 0, 0);
        let err = load_image_folder::<f32>(dir.path(), &spec, &opts(0)).unwrap_err();
        assert!(matches!(err, DataError::EmptyClass(_)));
    }

    #[test]
    fn nested_layouts_flatten_to_leaf_classes() {
        let dir = tempfile::tempdir().unwrap();
        for alpha in ["alpha_a", "alpha_b"] {
            for ch in 0..2 {
                let leaf = dir.path().join(alpha).join(format!("char{ch}"));
                fs::create_dir_all(&leaf).unwrap();
                write_png(&leaf.join("s.png"), 8, 100);
            }
        }
        let spec = SplitSpec::counts(4, 0, 0);
        let ds: SplitDatasets<f32> = load_image_folder(dir.path(), &spec, &opts(0)).unwrap();
        assert_eq!(ds.train.n_classes(), 4);
    }

    #[test]
    fn rotation_augmentation_quadruples_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ds: ClassDataset<f32> = synth_gaussian_clusters(10, 4, 3, 0.1, &mut rng).unwrap();
        let aug = augment_rotations(&ds).unwrap();
        assert_eq!(aug.n_classes(), 40);
    }

    #[test]
    fn zero_rotation_copy_is_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds: ClassDataset<f32> = synth_gaussian_clusters(3, 4, 2, 0.1, &mut rng).unwrap();
        let aug = augment_rotations(&ds).unwrap();
        // Rotated ids are 4*id + quarter_turns, so 4*id is the 0-degree copy.
        for class in &ds.classes {
            let copy = aug
                .classes
                .iter()
                .find(|c| c.class_id == class.class_id * 4)
                .unwrap();
            for (a, b) in class.samples.iter().zip(&copy.samples) {
                assert_eq!(a.data(), b.data());
            }
        }
    }

    #[test]
    fn four_quarter_turns_restore_the_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds: ClassDataset<f64> = synth_gaussian_clusters(2, 5, 1, 0.2, &mut rng).unwrap();
        let img = &ds.classes[0].samples[0];
        let mut rotated = img.clone();
        for _ in 0..4 {
            rotated = rotate90_cw(&rotated);
        }
        assert_eq!(rotated.data(), img.data());
    }

    #[test]
    fn rotation_rejects_non_square() {
        let img: Tensor<f32> = Tensor::zeros(vec![3, 4, 1]);
        let ds = ClassDataset::new(
            Split::Train,
            vec![ClassRecord {
                class_id: 0,
                samples: vec![img],
            }],
        );
        assert!(matches!(
            augment_rotations(&ds),
            Err(DataError::NonSquare { .. })
        ));
    }

    #[test]
    fn episode_shapes_are_n_times_k_and_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds: ClassDataset<f32> = synth_gaussian_clusters(8, 4, 20, 0.1, &mut rng).unwrap();
        let ep = sample_episode(&ds, 5, 1, 15, &mut rng).unwrap();
        assert_eq!(ep.support.iter().map(Vec::len).sum::<usize>(), 5);
        assert_eq!(ep.n_queries(), 75);
    }

    #[test]
    fn full_way_episode_uses_every_class_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds: ClassDataset<f32> = synth_gaussian_clusters(6, 4, 5, 0.1, &mut rng).unwrap();
        let ep = sample_episode(&ds, 6, 2, 2, &mut rng).unwrap();
        let mut ids = ep.class_ids.clone();
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn episode_errors_on_insufficient_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds: ClassDataset<f32> = synth_gaussian_clusters(4, 4, 3, 0.1, &mut rng).unwrap();
        assert!(matches!(
            sample_episode(&ds, 5, 1, 1, &mut rng),
            Err(DataError::NotEnoughClasses { .. })
        ));
        assert!(matches!(
            sample_episode(&ds, 3, 2, 2, &mut rng),
            Err(DataError::NotEnoughSamples { .. })
        ));
    }

    #[test]
    fn class_inclusion_frequency_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ds: ClassDataset<f32> = synth_gaussian_clusters(20, 2, 3, 0.1, &mut rng).unwrap();
        let mut counts = vec![0usize; 20];
        let episodes = 10_000;
        for _ in 0..episodes {
            let ep = sample_episode(&ds, 5, 1, 1, &mut rng).unwrap();
            for &id in &ep.class_ids {
                counts[id as usize] += 1;
            }
        }
        let expected = 5.0 * episodes as f64 / 20.0;
        for &c in &counts {
            assert!(
                (c as f64 - expected).abs() / expected < 0.03 + 3.0 / expected.sqrt(),
                "count {c} vs expected {expected}"
            );
        }
    }

    #[test]
    fn support_and_query_are_disjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ds: ClassDataset<f64> = synth_gaussian_clusters(6, 3, 10, 0.3, &mut rng).unwrap();
        for _ in 0..50 {
            let ep = sample_episode(&ds, 4, 2, 3, &mut rng).unwrap();
            for (s_list, q_list) in ep.support.iter().zip(&ep.query) {
                for s in s_list {
                    for q in q_list {
                        assert_ne!(s.data(), q.data(), "support/query overlap");
                    }
                }
            }
        }
    }

    fn nearest_mean_accuracy(ds: &ClassDataset<f64>, train_per_class: usize) -> f64 {
        let dim = ds.sample_shape().iter().product::<usize>();
        let means: Vec<Vec<f64>> = ds
            .classes
            .iter()
            .map(|c| {
                let mut m = vec![0.0; dim];
                for s in c.samples.iter().take(train_per_class) {
                    for (mi, &v) in m.iter_mut().zip(s.data()) {
                        *mi += v;
                    }
                }
                m.iter().map(|v| v / train_per_class as f64).collect()
            })
            .collect();
        let mut correct = 0;
        let mut total = 0;
        for (ci, c) in ds.classes.iter().enumerate() {
            for s in c.samples.iter().skip(train_per_class) {
                let best = means
                    .iter()
                    .enumerate()
                    .map(|(mi, m)| {
                        let d: f64 = m
                            .iter()
                            .zip(s.data())
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        (mi, d)
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap()
                    .0;
                correct += (best == ci) as usize;
                total += 1;
            }
        }
        correct as f64 / total as f64
    }

    #[test]
    fn vanishing_spread_makes_classes_perfectly_separable() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ds: ClassDataset<f64> = synth_gaussian_clusters(5, 4, 10, 1e-6, &mut rng).unwrap();
        assert_eq!(nearest_mean_accuracy(&ds, 5), 1.0);
    }

    #[test]
    fn identical_class_means_give_chance_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Two classes sharing one center: build by hand from one blob.
        let base: ClassDataset<f64> = synth_gaussian_clusters(2, 4, 400, 0.15, &mut rng).unwrap();
        let all: Vec<Tensor<f64>> = base.classes[0].samples.clone();
        let ds = ClassDataset::new(
            Split::Train,
            vec![
                ClassRecord { class_id: 0, samples: all[..200].to_vec() },
                ClassRecord { class_id: 1, samples: all[200..].to_vec() },
            ],
        );
        let acc = nearest_mean_accuracy(&ds, 100);
        assert!((acc - 0.5).abs() < 0.05, "accuracy {acc}");
    }

    #[test]
    fn synthetic_needs_two_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        assert!(matches!(
            synth_gaussian_clusters::<f32, _>(1, 4, 3, 0.1, &mut rng),
            Err(DataError::TooFewSyntheticClasses(1))
        ));
    }

    /// Least-squares linear probe on raw pixels, the reference-run oracle for
    /// the default synthetic configuration.
    fn linear_probe_accuracy(ds: &ClassDataset<f64>, train_per_class: usize) -> f64 {
        let dim = ds.sample_shape().iter().product::<usize>() + 1;
        let n_classes = ds.n_classes();
        // Normal equations (X^T X + reg I) W = X^T Y with one-hot targets.
        let mut xtx = vec![0.0; dim * dim];
        let mut xty = vec![0.0; dim * n_classes];
        for (ci, c) in ds.classes.iter().enumerate() {
            for s in c.samples.iter().take(train_per_class) {
                let mut x: Vec<f64> = s.data().iter().map(|v| v.as_f64()).collect();
                x.push(1.0);
                for i in 0..dim {
                    for j in 0..dim {
                        xtx[i * dim + j] += x[i] * x[j];
                    }
                    xty[i * n_classes + ci] += x[i];
                }
            }
        }
        for i in 0..dim {
            xtx[i * dim + i] += 1e-3;
        }
        // Gaussian elimination.
        let mut a = xtx;
        let mut b = xty;
        for col in 0..dim {
            let piv = (col..dim)
                .max_by(|&i, &j| a[i * dim + col].abs().total_cmp(&a[j * dim + col].abs()))
                .unwrap();
            for j in 0..dim {
                a.swap(col * dim + j, piv * dim + j);
            }
            for j in 0..n_classes {
                b.swap(col * n_classes + j, piv * n_classes + j);
            }
            let p = a[col * dim + col];
            for i in 0..dim {
                if i == col {
                    continue;
                }
                let f = a[i * dim + col] / p;
                for j in 0..dim {
                    a[i * dim + j] -= f * a[col * dim + j];
                }
                for j in 0..n_classes {
                    b[i * n_classes + j] -= f * b[col * n_classes + j];
                }
            }
        }
        let w: Vec<f64> = (0..dim * n_classes)
            .map(|idx| b[idx] / a[(idx / n_classes) * dim + (idx / n_classes)])
            .collect();
        let mut correct = 0;
        let mut total = 0;
        for (ci, c) in ds.classes.iter().enumerate() {
            for s in c.samples.iter().skip(train_per_class) {
                let mut x: Vec<f64> = s.data().iter().map(|v| v.as_f64()).collect();
                x.push(1.0);
                let best = (0..n_classes)
                    .map(|k| {
                        let score: f64 = (0..dim).map(|i| x[i] * w[i * n_classes + k]).sum();
                        (k, score)
                    })
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap()
                    .0;
                correct += (best == ci) as usize;
                total += 1;
            }
        }
        correct as f64 / total as f64
    }

    #[test]
    fn default_spread_linear_probe_matches_fixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let ds: ClassDataset<f64> = synth_gaussian_clusters(10, 8, 24, 0.3, &mut rng).unwrap();
        let acc = linear_probe_accuracy(&ds, 16);
        // Frozen from the oracle run of this exact seeded configuration.
        let fixture = 0.875;
        assert!(
            (acc - fixture).abs() < 0.01,
            "probe accuracy {acc} vs fixture {fixture}"
        );
    }
}
