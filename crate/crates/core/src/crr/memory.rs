use std::collections::BTreeMap;

use crate::crr::SuperpixelCentroids;
use crate::error::{Error, Result};
use crate::rng::{Rng, RngState};
use crate::tensor::Tensor;

/// Per-class buffers of at most `ν` centroids.
///
/// Update rule: from `n` new centroids, `min(n, ν)` are chosen uniformly
/// without replacement; each is appended while the buffer has room and
/// otherwise overwrites a uniformly chosen slot.
#[derive(Clone, Debug)]
pub struct ClassMemory {
    capacity: usize,
    dim: usize,
    buffers: BTreeMap<usize, Vec<Vec<f64>>>,
    rng: Rng,
}

impl ClassMemory {
    pub fn new(capacity: usize, dim: usize, rng: Rng) -> Self {
        Self { capacity, dim, buffers: BTreeMap::new(), rng }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self, class: usize) -> usize {
        self.buffers.get(&class).map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.values().all(Vec::is_empty)
    }

    pub fn classes(&self) -> Vec<usize> {
        self.buffers.iter().filter(|(_, b)| !b.is_empty()).map(|(&c, _)| c).collect()
    }

    pub fn rng_state(&self) -> RngState {
        self.rng.state()
    }

    /// Stored centroids of `class` as columns of a `D_l×n` tensor.
    pub fn entries(&self, class: usize) -> Tensor {
        let buf = self.buffers.get(&class).map_or(&[][..], Vec::as_slice);
        let n = buf.len();
        Tensor::from_fn(&[self.dim, n], |i| buf[i % n][i / n])
    }

    pub fn update(&mut self, centroids: &SuperpixelCentroids) -> Result<()> {
        let c = &centroids.centroids;
        if c.rank() != 2 || c.rows() != self.dim {
            return Err(Error::dims("memory_update", format!("centroids {:?}, memory dim {}", c.dims(), self.dim)));
        }
        let n = c.cols();
        let picks = self.rng.choose_distinct(n, self.capacity.min(n));
        let buf = self.buffers.entry(centroids.class_id).or_default();
        for p in picks {
            let col: Vec<f64> = (0..self.dim).map(|r| c.at(r, p)).collect();
            if buf.len() < self.capacity {
                buf.push(col);
            } else {
                let slot = self.rng.below(self.capacity);
                buf[slot] = col;
            }
        }
        Ok(())
    }

    /// `ν` centroids of `class` as a `D_l×ν` tensor, cycling through the
    /// buffer when it holds fewer than `ν`.
    pub fn pick(&self, class: usize) -> Result<Tensor> {
        let buf = self.buffers.get(&class).filter(|b| !b.is_empty()).ok_or(Error::MissingMemoryClass(class))?;
        let nu = self.capacity;
        Ok(Tensor::from_fn(&[self.dim, nu], |i| buf[(i % nu) % buf.len()][i / nu]))
    }

    /// Rebuilds a memory from stored buffers (`class → D_l×n`) and a stream position.
    pub fn restore(capacity: usize, dim: usize, buffers: BTreeMap<usize, Tensor>, rng: RngState) -> Result<Self> {
        let mut out = Self::new(capacity, dim, Rng::from_state(rng));
        for (class, t) in buffers {
            if t.rank() != 2 || t.rows() != dim || t.cols() > capacity {
                return Err(Error::dims("ClassMemory::restore", format!("class {class}: {:?}", t.dims())));
            }
            let cols = (0..t.cols()).map(|j| (0..dim).map(|r| t.at(r, j)).collect()).collect();
            out.buffers.insert(class, cols);
        }
        Ok(out)
    }
}

/// Functional form of [`ClassMemory::update`].
pub fn memory_update(mut mem: ClassMemory, class_id: usize, centroids: &SuperpixelCentroids) -> Result<ClassMemory> {
    if centroids.class_id != class_id {
        return Err(Error::dims("memory_update", format!("centroids of class {} offered for class {class_id}", centroids.class_id)));
    }
    mem.update(centroids)?;
    Ok(mem)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cents(class_id: usize, cols: &[f64]) -> SuperpixelCentroids {
        SuperpixelCentroids { centroids: Tensor::matrix(1, cols.len(), cols.to_vec()).unwrap(), class_id }
    }

    #[test]
    fn under_capacity_keeps_everything() {
        let mem = memory_update(ClassMemory::new(5, 1, Rng::new(1)), 2, &cents(2, &[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(mem.len(2), 3);
        let mut got = mem.entries(2).into_data();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, vec![1.0, 2.0, 3.0]);
        assert_eq!(mem.len(0), 0);
    }

    #[test]
    fn capacity_one_holds_latest() {
        let mut mem = ClassMemory::new(1, 1, Rng::new(2));
        for k in 0..20 {
            mem.update(&cents(0, &[k as f64])).unwrap();
            assert_eq!(mem.entries(0).data(), &[k as f64]);
        }
    }

    #[test]
    fn class_mismatch_is_rejected() {
        assert!(memory_update(ClassMemory::new(2, 1, Rng::new(0)), 1, &cents(0, &[1.0])).is_err());
    }

    /// With a full buffer of ν and one newcomer, the newcomer is always kept
    /// and each old slot is evicted with probability 1/ν.
    #[test]
    fn replacement_frequencies() {
        let nu = 5;
        let mut evicted = vec![0usize; nu];
        let mut rng = Rng::new(3);
        let trials = 10_000;
        for _ in 0..trials {
            let mut mem = ClassMemory::new(nu, 1, Rng::new(rng.next_u64()));
            mem.update(&cents(0, &(0..nu).map(|x| x as f64).collect::<Vec<_>>())).unwrap();
            mem.update(&cents(0, &[99.0])).unwrap();
            let e = mem.entries(0).into_data();
            assert_eq!(e.len(), nu);
            assert!(e.contains(&99.0));
            for (k, slot) in evicted.iter_mut().enumerate() {
                if !e.contains(&(k as f64)) {
                    *slot += 1;
                }
            }
        }
        for &c in &evicted {
            let p = c as f64 / trials as f64;
            // binomial sd at p = 0.2 over 10^4 trials is 0.004
            assert!((p - 0.2).abs() < 0.02, "{evicted:?}");
        }
    }

    #[test]
    fn pick_cycles_and_reports_missing() {
        let mut mem = ClassMemory::new(5, 1, Rng::new(4));
        assert!(matches!(mem.pick(1), Err(Error::MissingMemoryClass(1))));
        mem.update(&cents(1, &[7.0, 8.0])).unwrap();
        let p = mem.pick(1).unwrap();
        assert_eq!(p.dims(), &[1, 5]);
        let e = mem.entries(1).into_data();
        assert_eq!(p.data(), &[e[0], e[1], e[0], e[1], e[0]]);
    }

    #[test]
    fn restore_roundtrip() {
        let mut mem = ClassMemory::new(3, 2, Rng::new(5));
        mem.update(&SuperpixelCentroids { centroids: Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(), class_id: 0 }).unwrap();
        let bufs = mem.classes().into_iter().map(|c| (c, mem.entries(c))).collect();
        let mut back = ClassMemory::restore(3, 2, bufs, mem.rng_state()).unwrap();
        assert_eq!(back.entries(0), mem.entries(0));
        let extra = SuperpixelCentroids { centroids: Tensor::matrix(2, 1, vec![9.0, 9.0]).unwrap(), class_id: 0 };
        mem.update(&extra).unwrap();
        back.update(&extra).unwrap();
        assert_eq!(back.entries(0), mem.entries(0));
    }
}
