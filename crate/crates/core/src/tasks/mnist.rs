use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::{Matrix, Rng};
use crate::tasks::{Targets, TaskBatch, TaskKind, TaskMeta};

pub const MNIST_PIXELS: usize = 784;
const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

/// Images scaled to `[0, 1]`, one per row, with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MnistSet {
    pub images: Matrix,
    pub labels: Vec<usize>,
}

impl MnistSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::IdxTruncated {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn check_magic(bytes: &[u8], want: u32, path: &Path) -> Result<()> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != want {
        return Err(Error::IdxFormat {
            path: path.to_path_buf(),
            reason: format!("magic number {magic}, expected {want}"),
        });
    }
    Ok(())
}

fn check_length(bytes: &[u8], expected: usize, path: &Path) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::IdxTruncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// Reads an IDX image file and its label file.
pub fn load_mnist(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<MnistSet> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img = read_file(ip)?;
    check_magic(&img, IMAGE_MAGIC, ip)?;
    let count = read_u32(&img, 4, ip)? as usize;
    let rows = read_u32(&img, 8, ip)? as usize;
    let cols = read_u32(&img, 12, ip)? as usize;
    if rows * cols != MNIST_PIXELS {
        return Err(Error::IdxFormat {
            path: ip.to_path_buf(),
            reason: format!("images are {rows}x{cols}, expected 28x28"),
        });
    }
    check_length(&img, 16 + count * MNIST_PIXELS, ip)?;

    let lab = read_file(lp)?;
    check_magic(&lab, LABEL_MAGIC, lp)?;
    let label_count = read_u32(&lab, 4, lp)? as usize;
    if label_count != count {
        return Err(Error::IdxCountMismatch {
            images: count,
            labels: label_count,
        });
    }
    check_length(&lab, 8 + count, lp)?;

    let pixels = img[16..16 + count * MNIST_PIXELS]
        .iter()
        .map(|&p| f64::from(p) / 255.0)
        .collect();
    let labels: Vec<usize> = lab[8..8 + count].iter().map(|&l| usize::from(l)).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::IdxFormat {
            path: lp.to_path_buf(),
            reason: format!("label {bad} outside 0-9"),
        });
    }
    Ok(MnistSet {
        images: Matrix::from_vec(count, MNIST_PIXELS, pixels)?,
        labels,
    })
}

/// Turns the images at `indices` into a 784-step, one-pixel-per-step batch
/// with additive `N(0, noise_var)` noise. The label is scored at the last
/// step.
pub fn pixel_batch(set: &MnistSet, indices: &[usize], rng: &mut Rng, noise_var: f64) -> Result<TaskBatch> {
    if !(noise_var >= 0.0) || !noise_var.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise variance {noise_var} must be non-negative"
        )));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= set.len()) {
        return Err(Error::InvalidArgument(format!("image index {i} out of {}", set.len())));
    }
    let sd = noise_var.sqrt();
    let batch = indices.len();
    let mut inputs = vec![Matrix::zeros(batch, 1); MNIST_PIXELS];
    for (r, &i) in indices.iter().enumerate() {
        for (t, &p) in set.images.row(i).iter().enumerate() {
            let noise = if sd > 0.0 { sd * rng.standard_normal() } else { 0.0 };
            inputs[t].set(r, 0, p + noise);
        }
    }
    let labels: Vec<usize> = indices.iter().map(|&i| set.labels[i]).collect();
    let mut classes = vec![vec![0; batch]; MNIST_PIXELS];
    classes[MNIST_PIXELS - 1] = labels;
    let mut loss_mask = vec![0.0; MNIST_PIXELS];
    loss_mask[MNIST_PIXELS - 1] = 1.0;
    let mut answer_mask = vec![false; MNIST_PIXELS];
    answer_mask[MNIST_PIXELS - 1] = true;
    Ok(TaskBatch {
        inputs,
        targets: Targets::Classes(classes),
        loss_mask,
        answer_mask,
        meta: TaskMeta {
            task: TaskKind::MnistPixel,
            t: MNIST_PIXELS,
            baseline: Some(10f64.ln()),
        },
    })
}

/// One pass over a set in index order, `batch` images at a time.
pub struct PixelStream<'a> {
    set: &'a MnistSet,
    rng: Rng,
    noise_var: f64,
    batch: usize,
    next: usize,
}

pub fn to_pixel_sequence(set: &MnistSet, rng: Rng, noise_var: f64, batch: usize) -> Result<PixelStream<'_>> {
    if !(noise_var >= 0.0) || !noise_var.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise variance {noise_var} must be non-negative"
        )));
    }
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be positive".into()));
    }
    Ok(PixelStream {
        set,
        rng,
        noise_var,
        batch,
        next: 0,
    })
}

impl Iterator for PixelStream<'_> {
    type Item = TaskBatch;

    fn next(&mut self) -> Option<TaskBatch> {
        if self.next >= self.set.len() {
            return None;
        }
        let end = (self.next + self.batch).min(self.set.len());
        let idx: Vec<usize> = (self.next..end).collect();
        self.next = end;
        Some(pixel_batch(self.set, &idx, &mut self.rng, self.noise_var).expect("indices and variance validated"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(pixels: &[[u8; MNIST_PIXELS]]) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [IMAGE_MAGIC, pixels.len() as u32, 28, 28] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        for p in pixels {
            out.extend_from_slice(p);
        }
        out
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    fn fixture() -> [[u8; MNIST_PIXELS]; 2] {
        let mut a = [0u8; MNIST_PIXELS];
        let mut b = [0u8; MNIST_PIXELS];
        for i in 0..MNIST_PIXELS {
            a[i] = (i % 256) as u8;
            b[i] = 255 - (i * 7 % 256) as u8;
        }
        [a, b]
    }

    fn write(dir: &tempfile::TempDir, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn round_trips_synthetic_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = fixture();
        let ip = write(&dir, "img", &idx_images(&imgs));
        let lp = write(&dir, "lab", &idx_labels(&[3, 9]));
        let set = load_mnist(&ip, &lp).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.labels, vec![3, 9]);
        for (r, img) in imgs.iter().enumerate() {
            for (c, &p) in img.iter().enumerate() {
                assert_eq!(set.images.get(r, c), f64::from(p) / 255.0);
            }
        }
    }

    #[test]
    fn errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = fixture();
        let good_i = idx_images(&imgs);
        let good_l = idx_labels(&[1, 2]);

        let mut bad = good_i.clone();
        bad[3] = 0x01;
        let ip = write(&dir, "badmagic", &bad);
        let lp = write(&dir, "lab", &good_l);
        assert!(matches!(load_mnist(&ip, &lp), Err(Error::IdxFormat { .. })));

        let ip = write(&dir, "short", &good_i[..good_i.len() - 5]);
        assert!(matches!(load_mnist(&ip, &lp), Err(Error::IdxTruncated { .. })));

        let ip = write(&dir, "img", &good_i);
        let lp3 = write(&dir, "lab3", &idx_labels(&[1, 2, 3]));
        assert!(matches!(
            load_mnist(&ip, &lp3),
            Err(Error::IdxCountMismatch { images: 2, labels: 3 })
        ));

        let missing = dir.path().join("nope");
        assert!(matches!(load_mnist(&missing, &lp), Err(Error::Io { .. })));
    }

    fn tiny_set() -> MnistSet {
        let imgs = fixture();
        let data = imgs
            .iter()
            .flat_map(|i| i.iter().map(|&p| f64::from(p) / 255.0))
            .collect();
        MnistSet {
            images: Matrix::from_vec(2, MNIST_PIXELS, data).unwrap(),
            labels: vec![4, 7],
        }
    }

    #[test]
    fn zero_noise_reproduces_pixels() {
        let set = tiny_set();
        let batches: Vec<TaskBatch> = to_pixel_sequence(&set, Rng::new(1), 0.0, 5).unwrap().collect();
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!(b.steps(), MNIST_PIXELS);
        for t in 0..MNIST_PIXELS {
            assert_eq!(b.inputs[t].shape(), (2, 1));
            assert_eq!(b.inputs[t].get(1, 0), set.images.get(1, t));
        }
        let Targets::Classes(c) = &b.targets else { panic!() };
        assert_eq!(c[MNIST_PIXELS - 1], vec![4, 7]);
        assert_eq!(b.loss_mask.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn added_noise_has_requested_variance() {
        let set = tiny_set();
        let mut rng = Rng::new(2);
        let idx = vec![0; 128];
        let b = pixel_batch(&set, &idx, &mut rng, 0.1).unwrap();
        let mut n = 0.0;
        let (mut s, mut s2) = (0.0, 0.0);
        for t in 0..MNIST_PIXELS {
            for r in 0..128 {
                let d = b.inputs[t].get(r, 0) - set.images.get(0, t);
                s += d;
                s2 += d * d;
                n += 1.0;
            }
        }
        assert!(n >= 1e5);
        let var = s2 / n - (s / n).powi(2);
        assert!((var - 0.1).abs() < 0.01, "{var}");
    }

    #[test]
    fn stream_covers_set_in_batches() {
        let set = tiny_set();
        let sizes: Vec<usize> = to_pixel_sequence(&set, Rng::new(3), 0.1, 1)
            .unwrap()
            .map(|b| b.batch_size())
            .collect();
        assert_eq!(sizes, vec![1, 1]);
        assert!(to_pixel_sequence(&set, Rng::new(3), -1.0, 1).is_err());
        assert!(pixel_batch(&set, &[2], &mut Rng::new(3), 0.0).is_err());
    }
}
