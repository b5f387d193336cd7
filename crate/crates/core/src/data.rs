//! Datasets, augmentation and the mini-batch schedule.

use std::path::Path;
use std::sync::mpsc;
use std::thread;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_HW: usize = 32;
const SYNTH_HW: usize = 16;

/// Images `N x C x H x W` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        images.expect_rank("dataset images", 4)?;
        if images.shape()[0] != labels.len() {
            return Err(Error::dim("dataset labels", images.shape()[0], labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::config(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> Tensor {
        let l = self.image_len();
        Tensor::new(self.image_shape().to_vec(), self.images.data()[i * l..(i + 1) * l].to_vec())
            .expect("image slice matches its shape")
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// The first `k` examples of every class, in dataset order.
    pub fn subset_per_class(&self, k: usize) -> Dataset {
        let mut seen = vec![0usize; self.num_classes];
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = &mut seen[self.labels[i]];
                *c += 1;
                *c <= k
            })
            .collect();
        self.subset(&idx)
    }

    /// Assembles a batch, optionally augmenting every image.
    pub fn batch(&self, indices: &[usize], augment_rng: Option<&mut ChaCha8Rng>) -> (Tensor, Vec<usize>) {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let mut x = self.images.gather(indices);
        if let Some(rng) = augment_rng {
            let l = self.image_len();
            let shape = self.image_shape();
            for chunk in x.data_mut().chunks_mut(l) {
                let img = Tensor::new(shape.to_vec(), chunk.to_vec()).expect("image slice");
                chunk.copy_from_slice(augment(&img, rng).data());
            }
        }
        (x, labels)
    }

    /// Per-channel mean and standard deviation.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let (m, v) = crate::ops::channel_mean_var(&self.images).expect("rank-4 images");
        (m, v.into_iter().map(|v| v.sqrt().max(1e-12)).collect())
    }

    pub fn normalize_with(&mut self, mean: &[f64], std: &[f64]) {
        let [c, h, w] = self.image_shape();
        let p = h * w;
        for (k, chunk) in self.images.data_mut().chunks_mut(p).enumerate() {
            let ci = k % c;
            for v in chunk {
                *v = (*v - mean[ci]) / std[ci];
            }
        }
    }

    /// Normalizes by the dataset's own statistics and returns them.
    pub fn normalize(&mut self) -> (Vec<f64>, Vec<f64>) {
        let (m, s) = self.channel_stats();
        self.normalize_with(&m, &s);
        (m, s)
    }

    /// Class-stratified random halves.
    pub fn stratified_halves(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (c, mut idx) in by_class.into_iter().enumerate() {
            if idx.len() < 2 {
                return Err(Error::config(format!("class {c} has {} samples; a split needs 2", idx.len())));
            }
            idx.shuffle(&mut rng);
            let h = idx.len() / 2;
            a.extend_from_slice(&idx[..h]);
            b.extend_from_slice(&idx[h..]);
        }
        a.sort_unstable();
        b.sort_unstable();
        Ok((self.subset(&a), self.subset(&b)))
    }
}

/// Parses CIFAR-10 binary records into `[0, 1]` pixels and labels.
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("record {i} has label {}", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

/// Loads and concatenates CIFAR-10 binary batches without normalizing.
pub fn load_cifar10_raw<P: AsRef<Path>>(paths: &[P], subset_per_class: Option<usize>) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        let (px, lb) = parse_cifar10(&bytes, p)?;
        pixels.extend(px);
        labels.extend(lb);
    }
    if labels.is_empty() {
        return Err(Error::config("no CIFAR-10 files given"));
    }
    let images = Tensor::new(vec![labels.len(), 3, CIFAR_HW, CIFAR_HW], pixels)?;
    let ds = Dataset::new(images, labels, 10)?;
    Ok(match subset_per_class {
        Some(k) => ds.subset_per_class(k),
        None => ds,
    })
}

/// Loads CIFAR-10 binaries, normalized by their own channel statistics.
pub fn load_cifar10<P: AsRef<Path>>(paths: &[P], subset_per_class: Option<usize>) -> Result<Dataset> {
    let mut ds = load_cifar10_raw(paths, subset_per_class)?;
    ds.normalize();
    Ok(ds)
}

/// Class templates shared by the splits of one synthetic task.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    templates: Vec<Vec<f64>>,
    pub difficulty: f64,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn new(seed: u64, classes: usize, difficulty: f64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config("a synthetic task needs at least 2 classes"));
        }
        if !(difficulty >= 0.0 && difficulty.is_finite()) {
            return Err(Error::config("difficulty must be non-negative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = SYNTH_HW * SYNTH_HW;
        let templates = (0..classes)
            .map(|_| {
                // smooth random pattern: 4x4 Gaussian grid, bilinearly upsampled
                let mut t = Vec::with_capacity(3 * p);
                for _ in 0..3 {
                    let g: Vec<f64> = (0..25).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    for y in 0..SYNTH_HW {
                        for x in 0..SYNTH_HW {
                            let fy = y as f64 / (SYNTH_HW - 1) as f64 * 4.0;
                            let fx = x as f64 / (SYNTH_HW - 1) as f64 * 4.0;
                            let (y0, x0) = ((fy as usize).min(3), (fx as usize).min(3));
                            let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
                            let at = |a: usize, b: usize| g[a * 5 + b];
                            t.push(
                                at(y0, x0) * (1.0 - dy) * (1.0 - dx)
                                    + at(y0, x0 + 1) * (1.0 - dy) * dx
                                    + at(y0 + 1, x0) * dy * (1.0 - dx)
                                    + at(y0 + 1, x0 + 1) * dy * dx,
                            );
                        }
                    }
                }
                t
            })
            .collect();
        Ok(Self {
            templates,
            difficulty,
            seed,
        })
    }

    pub fn classes(&self) -> usize {
        self.templates.len()
    }

    /// `n` images with round-robin labels; `stream` picks an independent
    /// noise stream so train and test splits share templates only.
    pub fn sample(&self, n: usize, stream: u64) -> Result<Dataset> {
        let k = self.classes();
        if n < k {
            return Err(Error::config(format!("need at least {k} samples, got {n}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream + 1);
        let l = 3 * SYNTH_HW * SYNTH_HW;
        let mut data = Vec::with_capacity(n * l);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % k;
            labels.push(c);
            let amp = 1.0 + 0.2 * rng.sample::<f64, _>(StandardNormal);
            for &t in &self.templates[c] {
                let z: f64 = rng.sample(StandardNormal);
                data.push(amp * t + self.difficulty * z);
            }
        }
        Dataset::new(Tensor::new(vec![n, 3, SYNTH_HW, SYNTH_HW], data)?, labels, k)
    }
}

/// Class-conditional Gaussian images, `3 x 16 x 16`, deterministic per seed.
pub fn synthetic_dataset(seed: u64, n: usize, classes: usize, difficulty: f64) -> Result<Dataset> {
    SyntheticTask::new(seed, classes, difficulty)?.sample(n, 0)
}

/// Horizontal flip and a crop from the reflect-padded image.
pub fn augment_with(image: &Tensor, flip: bool, offset: (usize, usize)) -> Tensor {
    const PAD: isize = 4;
    let s = image.shape();
    let (c, h, w) = (s[0], s[1] as isize, s[2] as isize);
    let reflect = |i: isize, n: isize| -> usize {
        let r = if i < 0 {
            -i
        } else if i >= n {
            2 * (n - 1) - i
        } else {
            i
        };
        r.clamp(0, n - 1) as usize
    };
    let mut out = vec![0.0; image.len()];
    let d = image.data();
    for ci in 0..c {
        for y in 0..h {
            let sy = reflect(y + offset.0 as isize - PAD, h);
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = reflect(xx + offset.1 as isize - PAD, w);
                out[(ci * h as usize + y as usize) * w as usize + x as usize] =
                    d[(ci * h as usize + sy) * w as usize + sx];
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// Random flip (probability 0.5) and random crop after padding by 4.
pub fn augment<R: Rng + ?Sized>(image: &Tensor, rng: &mut R) -> Tensor {
    let flip = rng.gen_bool(0.5);
    let oy = rng.gen_range(0..=8);
    let ox = rng.gen_range(0..=8);
    augment_with(image, flip, (oy, ox))
}

/// Which scheduled mini-batches are processed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSchedule {
    pub scheduled: usize,
    pub kept: Vec<usize>,
    pub drop_prob: f64,
}

impl BatchSchedule {
    pub fn is_kept(&self, step: usize) -> bool {
        self.kept.binary_search(&step).is_ok()
    }

    pub fn kept_count(&self) -> usize {
        self.kept.len()
    }
}

/// Keeps each of `n_batches` independently with probability `1 - p`.
pub fn smd_schedule(n_batches: usize, p: f64, seed: u64) -> Result<BatchSchedule> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!("drop probability must be in [0, 1], got {p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask: Vec<bool> = (0..n_batches).map(|_| rng.gen::<f64>() < 1.0 - p).collect();
    Ok(BatchSchedule {
        scheduled: n_batches,
        kept: (0..n_batches).filter(|&i| mask[i]).collect(),
        drop_prob: p,
    })
}

/// Scheduled iterations that spend `ratio` of a baseline budget when each
/// batch is dropped with probability `p`.
pub fn scheduled_iterations(baseline: usize, ratio: f64, p: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::config(format!("energy ratio must be positive, got {ratio}")));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("drop probability must be in [0, 1), got {p}")));
    }
    Ok((ratio * baseline as f64 / (1.0 - p)).round() as usize)
}

/// Fresh uniform shuffle every epoch, cut into full batches.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    n: usize,
    batch: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 || batch > n {
            return Err(Error::config(format!("batch size {batch} invalid for {n} samples")));
        }
        Ok(Self {
            n,
            batch,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            pos: usize::MAX,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.batch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos == usize::MAX || self.pos + self.batch > self.n {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

/// How often each sample is processed over `epochs` shuffled epochs with
/// batch dropping at probability `p`.
pub fn visit_counts(n: usize, batch: usize, epochs: usize, p: f64, seed: u64) -> Result<Vec<u32>> {
    let mut sampler = EpochSampler::new(n, batch, seed)?;
    let steps = epochs * sampler.batches_per_epoch();
    let sched = smd_schedule(steps, p, seed.wrapping_add(0x5eed))?;
    let mut counts = vec![0u32; n];
    for s in 0..steps {
        let b = sampler.next_batch();
        if sched.is_kept(s) {
            for i in b {
                counts[i] += 1;
            }
        }
    }
    Ok(counts)
}

/// One assembled training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub step: usize,
    pub x: Tensor,
    pub labels: Vec<usize>,
}

/// Builds the kept batches of a schedule on a worker thread, handing them
/// over through a queue of depth 2. Batch content depends only on the seed.
pub struct Prefetcher {
    rx: mpsc::Receiver<Batch>,
    handle: Option<thread::JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn(
        data: std::sync::Arc<Dataset>,
        schedule: BatchSchedule,
        mut sampler: EpochSampler,
        augment_seed: Option<u64>,
    ) -> Self {
        let (tx, rx) = mpsc::sync_channel(2);
        let handle = thread::spawn(move || {
            for step in 0..schedule.scheduled {
                let idx = sampler.next_batch();
                if !schedule.is_kept(step) {
                    continue;
                }
                let mut rng = augment_seed.map(|s| {
                    let mut r = ChaCha8Rng::seed_from_u64(s);
                    r.set_stream(step as u64);
                    r
                });
                let (x, labels) = data.batch(&idx, rng.as_mut());
                if tx.send(Batch { step, x, labels }).is_err() {
                    return;
                }
            }
        });
        Self {
            rx,
            handle: Some(handle),
        }
    }
}

impl Iterator for Prefetcher {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        self.rx.recv().ok()
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // unblock the producer before joining
        let (_, rx) = mpsc::sync_channel(0);
        drop(std::mem::replace(&mut self.rx, rx));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_extremes_and_count() {
        assert_eq!(smd_schedule(100, 0.0, 1).unwrap().kept_count(), 100);
        assert_eq!(smd_schedule(100, 1.0, 1).unwrap().kept_count(), 0);
        let k = smd_schedule(10_000, 0.5, 7).unwrap().kept_count();
        assert!((4850..=5150).contains(&k), "{k}");
        assert!(smd_schedule(10, 1.5, 1).is_err());
    }

    #[test]
    fn scheduled_iterations_doubles_at_half_drop() {
        assert_eq!(scheduled_iterations(1000, 1.0, 0.5).unwrap(), 2000);
        assert_eq!(scheduled_iterations(1000, 0.67, 0.5).unwrap(), 1340);
    }

    #[test]
    fn augment_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::randn(&[3, 8, 8], 1.0, &mut rng);
        let twice = augment_with(&augment_with(&img, true, (4, 4)), true, (4, 4));
        assert_eq!(twice, img);
        assert_eq!(augment_with(&img, false, (4, 4)), img);
        let z = Tensor::zeros(&[3, 8, 8]);
        assert_eq!(augment_with(&z, false, (4, 4)), z);
        for _ in 0..20 {
            assert_eq!(augment(&img, &mut rng).shape(), img.shape());
        }
    }

    #[test]
    fn reflect_crop_shifts() {
        let img = Tensor::new(vec![1, 1, 6], (0..6).map(|v| v as f64).collect()).unwrap();
        let shifted = augment_with(&img, false, (4, 5));
        assert_eq!(shifted.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 4.0]);
        let shifted = augment_with(&img, false, (4, 2));
        assert_eq!(shifted.data(), &[2.0, 1.0, 0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = synthetic_dataset(3, 103, 10, 0.5).unwrap();
        let b = synthetic_dataset(3, 103, 10, 0.5).unwrap();
        assert_eq!(a, b);
        let mut counts = [0; 10];
        for &l in &a.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10 || c == 11));
        assert_eq!(a.image_shape(), [3, 16, 16]);
        assert!(synthetic_dataset(3, 5, 10, 0.5).is_err());
    }

    #[test]
    fn cifar_errors() {
        let p = Path::new("mem");
        assert!(matches!(parse_cifar10(&vec![0u8; 3072], p), Err(Error::Format { .. })));
        let mut rec = vec![0u8; 2 * CIFAR_RECORD];
        let (px, lb) = parse_cifar10(&rec, p).unwrap();
        assert_eq!((px.len(), lb.len()), (6144, 2));
        rec[0] = 200;
        match parse_cifar10(&rec, p) {
            Err(Error::Format { message, .. }) => assert!(message.contains("record 0"), "{message}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = EpochSampler::new(10, 5, 0).unwrap();
        let mut seen: Vec<usize> = s.next_batch();
        seen.extend(s.next_batch());
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn prefetcher_yields_kept_batches_in_order() {
        let ds = std::sync::Arc::new(synthetic_dataset(0, 40, 4, 0.1).unwrap());
        let sched = smd_schedule(20, 0.5, 1).unwrap();
        let steps: Vec<usize> = Prefetcher::spawn(ds.clone(), sched.clone(), EpochSampler::new(40, 8, 2).unwrap(), Some(5))
            .map(|b| b.step)
            .collect();
        assert_eq!(steps, sched.kept);
        let a: Vec<Tensor> = Prefetcher::spawn(ds.clone(), sched.clone(), EpochSampler::new(40, 8, 2).unwrap(), Some(5))
            .map(|b| b.x)
            .collect();
        let b: Vec<Tensor> = Prefetcher::spawn(ds, sched, EpochSampler::new(40, 8, 2).unwrap(), Some(5))
            .map(|b| b.x)
            .collect();
        assert_eq!(a, b);
    }
}
