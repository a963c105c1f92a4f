use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::codec::{reflect_pad, to_network};
use crate::error::{Error, Result};
use crate::image_io::load_image;
use crate::seed;
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 1;
const CROP_STREAM: u64 = 2;

/// Training images held in memory as `(1, 3, H, W)` pixel tensors.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Vec<Tensor>,
}

impl Dataset {
    pub fn from_images(images: Vec<Tensor>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Dataset("no training images".into()));
        }
        if let Some(i) = images
            .iter()
            .position(|t| t.batch() != 1 || t.channels() != 3 || t.is_empty())
        {
            return Err(Error::Dataset(format!("image {i} is not a single RGB image")));
        }
        Ok(Dataset { images })
    }

    /// Loads every PNG/PPM in `dir` in file-name order, keeping at most
    /// `limit` images. Unreadable files are skipped with a warning.
    pub fn load_dir(dir: &Path, limit: Option<usize>) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        let mut images = Vec::new();
        for path in paths {
            if limit.is_some_and(|l| images.len() >= l) {
                break;
            }
            match load_image(&path) {
                Ok(img) => images.push(img),
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        if images.is_empty() {
            return Err(Error::Dataset(format!("no readable images in {}", dir.display())));
        }
        Ok(Dataset { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.images.len().div_ceil(batch_size.max(1))
    }

    /// Image order for `epoch`; a permutation fixed by `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.images.len()).collect();
        order.shuffle(&mut seed::rng(seed, &[SHUFFLE_STREAM, epoch]));
        order
    }

    /// Batch `index` of `epoch`: random `patch x patch` crops mapped to [-1, 1].
    /// Images smaller than the patch are reflect-padded first.
    pub fn batch(&self, seed: u64, epoch: u64, index: usize, batch_size: usize, patch: usize) -> Result<Tensor> {
        let order = self.epoch_order(seed, epoch);
        let start = index * batch_size;
        if start >= order.len() {
            return Err(Error::InvalidArgument(format!("batch {index} out of range")));
        }
        let mut crops = Vec::new();
        for (slot, &i) in order[start..(start + batch_size).min(order.len())].iter().enumerate() {
            let img = &self.images[i];
            let (h, w) = (img.height(), img.width());
            let src = if h < patch || w < patch {
                reflect_pad(img, patch.saturating_sub(h), patch.saturating_sub(w))
            } else {
                img.clone()
            };
            let mut rng = seed::rng(seed, &[CROP_STREAM, epoch, (start + slot) as u64]);
            let y0 = rng.random_range(0..=src.height() - patch);
            let x0 = rng.random_range(0..=src.width() - patch);
            crops.push(crop_at(&src, y0, x0, patch));
        }
        Ok(to_network(&Tensor::concat_batch(&crops)?))
    }
}

fn crop_at(t: &Tensor, y0: usize, x0: usize, size: usize) -> Tensor {
    let w = t.width();
    let mut out = Tensor::zeros([1, t.channels(), size, size]);
    for c in 0..t.channels() {
        let src = t.plane(0, c);
        let dst = out.plane_mut(0, c);
        for y in 0..size {
            dst[y * size..(y + 1) * size].copy_from_slice(&src[(y0 + y) * w + x0..(y0 + y) * w + x0 + size]);
        }
    }
    out
}
