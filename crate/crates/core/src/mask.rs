use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer label map; label 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::dims(
                "Mask::new",
                format!("{height}x{width} needs {} labels, got {}", height * width, data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn at(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, label: u8) {
        self.data[i * self.width + j] = label;
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    /// Number of distinct classes implied by the largest label.
    pub fn num_classes(&self) -> usize {
        self.data.iter().copied().max().map_or(1, |m| m as usize + 1)
    }

    /// 1 where the label equals `class`, else 0.
    pub fn binarize(&self, class: u8) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&l| u8::from(l == class)).collect(),
        }
    }

    /// Row-major flat indices carrying `label`.
    pub fn positions(&self, label: u8) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == label).then_some(i))
            .collect()
    }

    /// Nearest-neighbour resampling: output pixel `(i, j)` takes the label at the
    /// source pixel containing the centre of its footprint.
    pub fn downsample(&self, target: (usize, usize)) -> Result<Mask> {
        let (th, tw) = target;
        if th == 0 || tw == 0 {
            return Err(Error::ZeroTargetDim);
        }
        if th > self.height || tw > self.width {
            return Err(Error::dims(
                "downsample_mask",
                format!("target {target:?} exceeds source {:?}", self.dims()),
            ));
        }
        Ok(Mask::from_fn(th, tw, |i, j| {
            let si = ((2 * i + 1) * self.height) / (2 * th);
            let sj = ((2 * j + 1) * self.width) / (2 * tw);
            self.at(si, sj)
        }))
    }

    /// Nearest-neighbour source index for each pixel of an upsampled grid.
    pub(crate) fn upsample_index(src: (usize, usize), target: (usize, usize)) -> Vec<usize> {
        let mut idx = Vec::with_capacity(target.0 * target.1);
        for i in 0..target.0 {
            let si = (i * src.0) / target.0;
            for j in 0..target.1 {
                let sj = (j * src.1) / target.1;
                idx.push(si * src.1 + sj);
            }
        }
        idx
    }
}

/// Free-function form of [`Mask::downsample`].
pub fn downsample_mask(m: &Mask, target: (usize, usize)) -> Result<Mask> {
    m.downsample(target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_mask_collapses() {
        let m = Mask::new(2, 2, vec![1, 1, 1, 1]).unwrap();
        assert_eq!(m.downsample((1, 1)).unwrap().data(), &[1]);
    }

    #[test]
    fn top_left_quadrant() {
        let m = Mask::from_fn(4, 4, |i, j| u8::from(i < 2 && j < 2));
        assert_eq!(m.downsample((2, 2)).unwrap().data(), &[1, 0, 0, 0]);
    }

    #[test]
    fn zero_target_rejected() {
        let m = Mask::zeros(4, 4);
        assert!(matches!(m.downsample((0, 2)), Err(Error::ZeroTargetDim)));
    }

    #[test]
    fn upsample_index_is_block_replication() {
        let idx = Mask::upsample_index((2, 2), (4, 4));
        assert_eq!(idx, vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
    }

    proptest! {
        #[test]
        fn identity_at_equal_dims(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
            let m = Mask::from_fn(h, w, |i, j| ((seed >> ((i * w + j) % 60)) & 3) as u8);
            let d = m.downsample((h, w)).unwrap();
            prop_assert_eq!(&d, &m);
            prop_assert_eq!(d.downsample((h, w)).unwrap(), d);
        }
    }
}
