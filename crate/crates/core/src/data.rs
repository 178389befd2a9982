//! Multi-task datasets: IDX parsing, the binary MNIST-MTL split and a
//! synthetic interference benchmark.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::routing::AccuracyTable;
use crate::tensor::{checkpoint, Tensor};

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

#[derive(Clone, Debug, PartialEq)]
pub struct MtlSample {
    pub x: Tensor,
    pub t: usize,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplit {
    pub train: Vec<MtlSample>,
    pub test: Vec<MtlSample>,
    /// Label count per task.
    pub classes: Vec<usize>,
}

impl TaskSplit {
    pub fn num_tasks(&self) -> usize {
        self.classes.len()
    }

    pub fn input_dim(&self) -> usize {
        self.train.first().map(|s| s.x.len()).unwrap_or(0)
    }

    pub fn max_classes(&self) -> usize {
        self.classes.iter().copied().max().unwrap_or(0)
    }

    pub fn train_for(&self, t: usize) -> impl Iterator<Item = &MtlSample> {
        self.train.iter().filter(move |s| s.t == t)
    }

    pub fn test_for(&self, t: usize) -> impl Iterator<Item = &MtlSample> {
        self.test.iter().filter(move |s| s.t == t)
    }

    /// Task-balanced epoch order over `train`: per-task index streams are
    /// shuffled with `(seed, epoch)` and interleaved round-robin. Every task
    /// contributes the size of the smallest task.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut per_task: Vec<Vec<usize>> = vec![Vec::new(); self.num_tasks()];
        for (i, s) in self.train.iter().enumerate() {
            per_task[s.t].push(i);
        }
        for stream in &mut per_task {
            stream.shuffle(&mut rng);
        }
        let m = per_task.iter().map(Vec::len).min().unwrap_or(0);
        (0..m)
            .flat_map(|j| per_task.iter().map(move |s| s[j]))
            .collect()
    }
}

/// Stable hash of a feature vector's raw bytes.
pub fn feature_hash(x: &Tensor) -> u64 {
    let mut h = DefaultHasher::new();
    for v in x.data() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Accuracy of predicting each task's most frequent training label on its
/// test samples.
pub fn majority_baseline(split: &TaskSplit) -> Result<AccuracyTable> {
    let n = split.num_tasks();
    let mut hits = vec![0; n];
    let mut counts = vec![0; n];
    for t in 0..n {
        let mut freq = vec![0usize; split.classes[t]];
        for s in split.train_for(t) {
            freq[s.y] += 1;
        }
        let majority = (0..freq.len())
            .max_by_key(|&c| (freq[c], std::cmp::Reverse(c)))
            .unwrap_or(0);
        for s in split.test_for(t) {
            counts[t] += 1;
            hits[t] += (s.y == majority) as usize;
        }
    }
    AccuracyTable::from_hits(&hits, &counts)
}

// ---------------------------------------------------------------------------
// IDX

#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    /// `[n, rows * cols]`, pixels scaled to `[0, 1]`.
    Images {
        images: Tensor,
        rows: usize,
        cols: usize,
    },
    Labels(Vec<u8>),
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Format {
            offset: offset as u64,
            reason: "truncated header".into(),
        })
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = be_u32(bytes, 0)?;
    let n = be_u32(bytes, 4)? as usize;
    match magic {
        IDX_LABELS_MAGIC => {
            let payload = &bytes[8..];
            if payload.len() < n {
                return Err(Error::Format {
                    offset: (8 + payload.len()) as u64,
                    reason: format!("label payload has {} of {n} bytes", payload.len()),
                });
            }
            Ok(IdxData::Labels(payload[..n].to_vec()))
        }
        IDX_IMAGES_MAGIC => {
            let rows = be_u32(bytes, 8)? as usize;
            let cols = be_u32(bytes, 12)? as usize;
            let need = n * rows * cols;
            let payload = &bytes[16..];
            if payload.len() < need {
                return Err(Error::Format {
                    offset: (16 + payload.len()) as u64,
                    reason: format!("image payload has {} of {need} bytes", payload.len()),
                });
            }
            if need == 0 {
                return Err(Error::Format {
                    offset: 4,
                    reason: "empty image file".into(),
                });
            }
            let data = payload[..need].iter().map(|&p| p as f64 / 255.0).collect();
            Ok(IdxData::Images {
                images: Tensor::new(vec![n, rows * cols], data)?,
                rows,
                cols,
            })
        }
        other => Err(Error::Format {
            offset: 0,
            reason: format!("unknown IDX magic {other:#010x}"),
        }),
    }
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxData> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_idx(&bytes)
}

pub fn write_idx_labels<W: Write>(mut w: W, labels: &[u8]) -> Result<()> {
    w.write_u32::<BigEndian>(IDX_LABELS_MAGIC)?;
    w.write_u32::<BigEndian>(labels.len() as u32)?;
    w.write_all(labels)?;
    Ok(())
}

pub fn write_idx_images<W: Write>(
    mut w: W,
    pixels: &[u8],
    n: usize,
    rows: usize,
    cols: usize,
) -> Result<()> {
    if pixels.len() != n * rows * cols {
        return Err(Error::dim(
            "write_idx_images",
            &[n, rows, cols],
            &[pixels.len()],
        ));
    }
    w.write_u32::<BigEndian>(IDX_IMAGES_MAGIC)?;
    for d in [n, rows, cols] {
        w.write_u32::<BigEndian>(d as u32)?;
    }
    w.write_all(pixels)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// MNIST-MTL

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MnistMtlConfig {
    /// Training instances drawn from each digit for every task.
    pub train_per_digit: usize,
    pub test_per_digit: usize,
}

impl Default for MnistMtlConfig {
    fn default() -> Self {
        MnistMtlConfig {
            train_per_digit: 1000,
            test_per_digit: 20,
        }
    }
}

fn images_and_labels(images: IdxData, labels: IdxData) -> Result<(Tensor, Vec<u8>)> {
    match (images, labels) {
        (IdxData::Images { images, .. }, IdxData::Labels(labels)) => {
            if images.shape()[0] != labels.len() {
                return Err(Error::Format {
                    offset: 4,
                    reason: format!("{} images but {} labels", images.shape()[0], labels.len()),
                });
            }
            Ok((images, labels))
        }
        _ => Err(Error::Format {
            offset: 0,
            reason: "expected an image file and a label file".into(),
        }),
    }
}

fn binary_tasks(
    images: &Tensor,
    labels: &[u8],
    per_digit: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MtlSample>> {
    let dim = images.shape()[1];
    let mut by_digit: Vec<Vec<usize>> = vec![Vec::new(); 10];
    for (i, &l) in labels.iter().enumerate() {
        if l > 9 {
            return Err(Error::Format {
                offset: 8 + i as u64,
                reason: format!("label {l} outside 0..=9"),
            });
        }
        by_digit[l as usize].push(i);
    }
    let mut out = Vec::with_capacity(10 * 10 * per_digit);
    for task in 0..10 {
        for (digit, pool) in by_digit.iter().enumerate() {
            if pool.len() < per_digit {
                return Err(Error::contract(format!(
                    "digit {digit} has {} instances, need {per_digit}",
                    pool.len()
                )));
            }
            // without replacement within a task, independently across tasks
            for &i in pool.choose_multiple(rng, per_digit) {
                out.push(MtlSample {
                    x: Tensor::vector(images.data()[i * dim..(i + 1) * dim].to_vec()),
                    t: task,
                    y: (digit == task) as usize,
                });
            }
        }
    }
    Ok(out)
}

/// Ten binary tasks, task `c` = "digit c vs rest": per task `train_per_digit`
/// positives and the same number from each of the nine other digits; the
/// test split is drawn the same way from the test files.
pub fn build_mnist_mtl(
    train: (IdxData, IdxData),
    test: (IdxData, IdxData),
    config: MnistMtlConfig,
    seed: u64,
) -> Result<TaskSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tr_x, tr_y) = images_and_labels(train.0, train.1)?;
    let (te_x, te_y) = images_and_labels(test.0, test.1)?;
    Ok(TaskSplit {
        train: binary_tasks(&tr_x, &tr_y, config.train_per_digit, &mut rng)?,
        test: binary_tasks(&te_x, &te_y, config.test_per_digit, &mut rng)?,
        classes: vec![2; 10],
    })
}

/// Reads the four standard MNIST file names from `dir`.
pub fn build_mnist_mtl_from_dir(
    dir: impl AsRef<Path>,
    config: MnistMtlConfig,
    seed: u64,
) -> Result<TaskSplit> {
    let dir = dir.as_ref();
    let load = |name: &str| load_idx(dir.join(name));
    build_mnist_mtl(
        (
            load("train-images-idx3-ubyte")?,
            load("train-labels-idx1-ubyte")?,
        ),
        (
            load("t10k-images-idx3-ubyte")?,
            load("t10k-labels-idx1-ubyte")?,
        ),
        config,
        seed,
    )
}

// ---------------------------------------------------------------------------
// Interference benchmark

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterferenceConfig {
    pub num_tasks: usize,
    pub dim: usize,
    pub samples_per_task: usize,
    pub test_per_task: usize,
    pub num_clusters: usize,
    /// Fraction of clusters on which odd tasks flip their partner's labels.
    pub conflict_fraction: f64,
    pub noise: f64,
    pub margin: f64,
}

impl Default for InterferenceConfig {
    fn default() -> Self {
        InterferenceConfig {
            num_tasks: 4,
            dim: 16,
            samples_per_task: 2000,
            test_per_task: 500,
            num_clusters: 16,
            conflict_fraction: 1.0,
            noise: 0.15,
            margin: 1.0,
        }
    }
}

/// Generator state for the interference benchmark.
///
/// Tasks come in pairs `(2p, 2p+1)` sharing a random direction `w_p`. Inputs
/// are drawn from clusters shared by all tasks. Task `2p` labels a cluster by
/// the side of `w_p` its center falls on; task `2p+1` flips that label on a
/// `conflict_fraction` share of clusters. With full conflict each task is
/// linearly separable while any classifier that ignores the task id is right
/// on at most half of each pair.
#[derive(Clone, Debug)]
pub struct InterferenceTasks {
    pub directions: Vec<Vec<f64>>,
    pub centers: Vec<Vec<f64>>,
    pub conflicting: Vec<bool>,
    config: InterferenceConfig,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl InterferenceTasks {
    pub fn new(config: InterferenceConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.num_tasks < 2 {
            return Err(Error::contract(
                "interference benchmark needs at least 2 tasks",
            ));
        }
        if !(0.0..=1.0).contains(&config.conflict_fraction) {
            return Err(Error::Config("conflict_fraction must be in [0, 1]".into()));
        }
        let d = config.dim;
        let normal = |rng: &mut dyn rand::RngCore| -> f64 { StandardNormal.sample(rng) };
        let pairs = config.num_tasks.div_ceil(2);
        let directions: Vec<Vec<f64>> = (0..pairs)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
                let n = dot(&v, &v).sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let scale = 3.0 * config.margin;
        let mut centers = Vec::with_capacity(config.num_clusters);
        let mut tries = 0;
        while centers.len() < config.num_clusters {
            tries += 1;
            if tries > 100_000 {
                return Err(Error::contract(
                    "could not place interference clusters with the requested margin",
                ));
            }
            let c: Vec<f64> = (0..d).map(|_| scale * normal(rng)).collect();
            if directions.iter().all(|w| dot(w, &c).abs() >= config.margin) {
                centers.push(c);
            }
        }
        let n_conflict = (config.conflict_fraction * config.num_clusters as f64).round() as usize;
        let mut order: Vec<usize> = (0..config.num_clusters).collect();
        order.shuffle(rng);
        let mut conflicting = vec![false; config.num_clusters];
        for &c in &order[..n_conflict] {
            conflicting[c] = true;
        }
        Ok(InterferenceTasks {
            directions,
            centers,
            conflicting,
            config,
        })
    }

    pub fn label(&self, task: usize, cluster: usize) -> usize {
        let base = dot(&self.directions[task / 2], &self.centers[cluster]) > 0.0;
        let flip = task % 2 == 1 && self.conflicting[cluster];
        (base ^ flip) as usize
    }

    fn draw(&self, task: usize, rng: &mut impl Rng) -> MtlSample {
        let c = rng.gen_range(0..self.centers.len());
        let center = &self.centers[c];
        loop {
            let x: Vec<f64> = center
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + self.config.noise * z
                })
                .collect();
            // keep every sample on its cluster's side of every direction
            let same_side = self
                .directions
                .iter()
                .all(|w| (dot(w, &x) > 0.0) == (dot(w, center) > 0.0));
            if same_side {
                return MtlSample {
                    x: Tensor::vector(x),
                    t: task,
                    y: self.label(task, c),
                };
            }
        }
    }

    pub fn sample_split(&self, rng: &mut impl Rng) -> TaskSplit {
        let cfg = &self.config;
        let mut train = Vec::with_capacity(cfg.num_tasks * cfg.samples_per_task);
        let mut test = Vec::with_capacity(cfg.num_tasks * cfg.test_per_task);
        for t in 0..cfg.num_tasks {
            train.extend((0..cfg.samples_per_task).map(|_| self.draw(t, rng)));
            test.extend((0..cfg.test_per_task).map(|_| self.draw(t, rng)));
        }
        TaskSplit {
            train,
            test,
            classes: vec![2; cfg.num_tasks],
        }
    }
}

pub fn build_interference_tasks(config: InterferenceConfig, seed: u64) -> Result<TaskSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks = InterferenceTasks::new(config, &mut rng)?;
    Ok(tasks.sample_split(&mut rng))
}

// ---------------------------------------------------------------------------
// Split export

fn samples_to_tensors(samples: &[MtlSample]) -> Result<[Tensor; 3]> {
    let d = samples
        .first()
        .map(|s| s.x.len())
        .ok_or_else(|| Error::contract("cannot export an empty split"))?;
    let mut xs = Vec::with_capacity(samples.len() * d);
    for s in samples {
        if s.x.len() != d {
            return Err(Error::dim("export split", &[d], &[s.x.len()]));
        }
        xs.extend_from_slice(s.x.data());
    }
    Ok([
        Tensor::new(vec![samples.len(), d], xs)?,
        Tensor::vector(samples.iter().map(|s| s.t as f64).collect()),
        Tensor::vector(samples.iter().map(|s| s.y as f64).collect()),
    ])
}

/// Records 0..=2 hold train features/tasks/labels, 3..=5 the test split and
/// 6 the per-task class counts.
pub fn write_split<W: Write>(w: W, split: &TaskSplit) -> Result<()> {
    let train = samples_to_tensors(&split.train)?;
    let test = samples_to_tensors(&split.test)?;
    let classes = Tensor::vector(split.classes.iter().map(|&c| c as f64).collect());
    let records = train
        .iter()
        .chain(test.iter())
        .chain(std::iter::once(&classes));
    checkpoint::write_records(w, records.enumerate().map(|(i, t)| (i as u64, t)))
}

pub fn read_split<R: Read>(r: R) -> Result<TaskSplit> {
    let recs = checkpoint::read_records(r)?;
    if recs.len() != 7 {
        return Err(Error::Format {
            offset: 8,
            reason: format!("split container needs 7 records, found {}", recs.len()),
        });
    }
    let rebuild = |x: &Tensor, t: &Tensor, y: &Tensor| -> Vec<MtlSample> {
        let d = x.shape()[1];
        (0..x.shape()[0])
            .map(|i| MtlSample {
                x: Tensor::vector(x.data()[i * d..(i + 1) * d].to_vec()),
                t: t.data()[i] as usize,
                y: y.data()[i] as usize,
            })
            .collect()
    };
    Ok(TaskSplit {
        train: rebuild(&recs[0].1, &recs[1].1, &recs[2].1),
        test: rebuild(&recs[3].1, &recs[4].1, &recs[5].1),
        classes: recs[6].1.data().iter().map(|&c| c as usize).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn synthetic_mnist(n_per_digit: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels = Vec::new();
        for d in 0..10u8 {
            labels.extend(std::iter::repeat_n(d, n_per_digit));
        }
        labels.shuffle(&mut rng);
        let pixels: Vec<u8> = (0..labels.len() * 4).map(|_| rng.gen()).collect();
        (pixels, labels)
    }

    fn idx_pair(pixels: &[u8], labels: &[u8]) -> (IdxData, IdxData) {
        let mut ib = Vec::new();
        write_idx_images(&mut ib, pixels, labels.len(), 2, 2).unwrap();
        let mut lb = Vec::new();
        write_idx_labels(&mut lb, labels).unwrap();
        (parse_idx(&ib).unwrap(), parse_idx(&lb).unwrap())
    }

    #[test]
    fn idx_image_header_gives_flat_rows() {
        let mut buf = Vec::new();
        write_idx_images(&mut buf, &vec![255u8; 3 * 28 * 28], 3, 28, 28).unwrap();
        assert_eq!(&buf[..4], &[0, 0, 8, 3]);
        match parse_idx(&buf).unwrap() {
            IdxData::Images { images, .. } => {
                assert_eq!(images.shape(), &[3, 784]);
                assert!(images.data().iter().all(|&p| p == 1.0));
            }
            _ => panic!("expected images"),
        }
    }

    #[test]
    fn idx_labels_and_round_trip() {
        let labels: Vec<u8> = (0..25).map(|i| (i % 10) as u8).collect();
        let mut buf = Vec::new();
        write_idx_labels(&mut buf, &labels).unwrap();
        assert_eq!(parse_idx(&buf).unwrap(), IdxData::Labels(labels));
    }

    #[test]
    fn idx_format_errors_carry_offsets() {
        let mut buf = Vec::new();
        write_idx_labels(&mut buf, &[1, 2, 3]).unwrap();
        buf[3] = 0x05;
        assert!(matches!(
            parse_idx(&buf),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut buf = Vec::new();
        write_idx_images(&mut buf, &[0; 8], 2, 2, 2).unwrap();
        match parse_idx(&buf[..20]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_idx(&[0, 0, 8]), Err(Error::Format { .. })));
    }

    #[test]
    fn mnist_mtl_shape_and_ratios() {
        let (px, lb) = synthetic_mnist(30, 1);
        let (tpx, tlb) = synthetic_mnist(5, 2);
        let cfg = MnistMtlConfig {
            train_per_digit: 20,
            test_per_digit: 2,
        };
        let split = build_mnist_mtl(idx_pair(&px, &lb), idx_pair(&tpx, &tlb), cfg, 9).unwrap();
        assert_eq!(split.train.len(), 10 * 200);
        assert_eq!(split.test.len(), 10 * 20);
        for t in 0..10 {
            let pos = split.train_for(t).filter(|s| s.y == 1).count();
            let neg = split.train_for(t).filter(|s| s.y == 0).count();
            assert_eq!((pos, neg), (20, 180));
            assert_eq!(split.test_for(t).count(), 20);
        }
        let base = majority_baseline(&split).unwrap();
        assert!((base.mean - 0.9).abs() < 1e-12);
        // deterministic
        let again = build_mnist_mtl(idx_pair(&px, &lb), idx_pair(&tpx, &tlb), cfg, 9).unwrap();
        assert_eq!(split, again);
        // too few instances
        let big = MnistMtlConfig {
            train_per_digit: 31,
            test_per_digit: 2,
        };
        assert!(build_mnist_mtl(idx_pair(&px, &lb), idx_pair(&tpx, &tlb), big, 9).is_err());
    }

    #[test]
    fn interference_fully_flipped_pairs() {
        let cfg = InterferenceConfig {
            samples_per_task: 200,
            test_per_task: 50,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tasks = InterferenceTasks::new(cfg, &mut rng).unwrap();
        for c in 0..cfg.num_clusters {
            assert_ne!(tasks.label(0, c), tasks.label(1, c));
            assert_ne!(tasks.label(2, c), tasks.label(3, c));
        }
        let split = tasks.sample_split(&mut rng);
        assert_eq!(split.train.len(), 800);
        assert_eq!(split.test.len(), 200);
    }

    #[test]
    fn interference_is_seed_deterministic() {
        let cfg = InterferenceConfig {
            samples_per_task: 50,
            test_per_task: 10,
            ..Default::default()
        };
        let a = build_interference_tasks(cfg, 3).unwrap();
        let b = build_interference_tasks(cfg, 3).unwrap();
        let c = build_interference_tasks(cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(build_interference_tasks(
            InterferenceConfig {
                num_tasks: 1,
                ..cfg
            },
            0
        )
        .is_err());
    }

    #[test]
    fn train_test_disjoint_by_hash() {
        let split = build_interference_tasks(
            InterferenceConfig {
                samples_per_task: 300,
                test_per_task: 100,
                ..Default::default()
            },
            8,
        )
        .unwrap();
        let train: HashSet<u64> = split.train.iter().map(|s| feature_hash(&s.x)).collect();
        assert!(split
            .test
            .iter()
            .all(|s| !train.contains(&feature_hash(&s.x))));
    }

    #[test]
    fn epoch_order_is_task_balanced() {
        let split = build_interference_tasks(
            InterferenceConfig {
                samples_per_task: 40,
                test_per_task: 5,
                ..Default::default()
            },
            2,
        )
        .unwrap();
        let order = split.epoch_order(11, 0);
        assert_eq!(order.len(), 160);
        for chunk in order.chunks(4) {
            let tasks: Vec<usize> = chunk.iter().map(|&i| split.train[i].t).collect();
            assert_eq!(tasks, vec![0, 1, 2, 3]);
        }
        assert_eq!(order, split.epoch_order(11, 0));
        assert_ne!(order, split.epoch_order(11, 1));
        let mut sorted = order.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 160);
    }

    #[test]
    fn split_container_round_trip() {
        let split = build_interference_tasks(
            InterferenceConfig {
                samples_per_task: 10,
                test_per_task: 3,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_split(&mut buf, &split).unwrap();
        assert_eq!(&buf[..4], b"RNTN");
        assert_eq!(read_split(buf.as_slice()).unwrap(), split);
    }
}
