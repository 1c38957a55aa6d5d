//! In-memory datasets and the synthetic generators used for desk-scale
//! experiments.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Closed input interval every example lives in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain {
    pub lo: f32,
    pub hi: f32,
}

impl Domain {
    pub const UNIT: Domain = Domain { lo: 0.0, hi: 1.0 };
    pub const BYTE: Domain = Domain { lo: 0.0, hi: 255.0 };

    pub fn width(&self) -> f32 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, ...example shape]`.
    pub inputs: Tensor,
    /// Class index per decision: `n` entries for classification, `n * H * W`
    /// for dense prediction.
    pub labels: Vec<usize>,
    /// Shape of one example's label map; empty for classification.
    pub label_shape: Vec<usize>,
    pub classes: usize,
    pub domain: Domain,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        inputs: Tensor,
        labels: Vec<usize>,
        label_shape: Vec<usize>,
        classes: usize,
        domain: Domain,
        split: Split,
    ) -> Result<Self> {
        let ds = Self {
            inputs,
            labels,
            label_shape,
            classes,
            domain,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.rank() < 2 {
            return Err(invalid("dataset inputs need a batch axis"));
        }
        let n = self.len();
        if self.labels.len() != n * self.decisions_per_example() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                left: vec![n, self.decisions_per_example()],
                right: vec![self.labels.len()],
            });
        }
        if self.labels.iter().any(|&y| y >= self.classes) {
            return Err(invalid("label outside the class set"));
        }
        if !(self.domain.lo < self.domain.hi) {
            return Err(invalid("domain needs lo < hi"));
        }
        if self
            .inputs
            .as_slice()
            .iter()
            .any(|&v| !(v >= self.domain.lo && v <= self.domain.hi))
        {
            return Err(invalid("input outside the declared domain"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.outer()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn decisions_per_example(&self) -> usize {
        self.label_shape.iter().product()
    }

    pub fn is_dense(&self) -> bool {
        !self.label_shape.is_empty()
    }

    pub fn labels_of(&self, i: usize) -> &[usize] {
        let p = self.decisions_per_example();
        &self.labels[i * p..(i + 1) * p]
    }

    /// The examples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let p = self.decisions_per_example();
        let mut labels = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            labels.extend_from_slice(&self.labels[i * p..(i + 1) * p]);
        }
        Dataset {
            inputs: self.inputs.gather_rows(idx),
            labels,
            label_shape: self.label_shape.clone(),
            classes: self.classes,
            domain: self.domain,
            split: self.split,
        }
    }

    /// First `n` examples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Deterministic shuffle then split into `(first, rest)` with `first_len`
    /// examples in the first part.
    pub fn split_at(&self, first_len: usize, rng: &mut RngStream) -> (Dataset, Dataset) {
        let perm = rng.permutation(self.len());
        let k = first_len.min(self.len());
        (self.subset(&perm[..k]), self.subset(&perm[k..]))
    }

    pub fn with_split(mut self, split: Split) -> Dataset {
        self.split = split;
        self
    }
}

/// `classes` unit-variance Gaussian clusters with centers at least
/// `separation` apart, affinely mapped into `[0, 1]^dim` with one common
/// scale so cluster geometry is preserved. Labels cycle through the classes,
/// so class counts differ by at most one.
pub fn gen_blobs(
    rng: &mut RngStream,
    n: usize,
    classes: usize,
    dim: usize,
    separation: f64,
) -> Result<Dataset> {
    if classes < 2 || n < classes || dim == 0 {
        return Err(invalid("need n >= classes >= 2 and dim >= 1"));
    }
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(invalid("separation must be positive"));
    }
    let centers = place_centers(rng, classes, dim, separation)?;

    let mut raw = vec![0f64; n * dim];
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..dim {
            raw[i * dim + j] = centers[y * dim + j] + rng.normal();
        }
    }
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = raw
        .iter()
        .map(|&v| {
            if span > 0.0 {
                (((v - lo) / span) as f32).clamp(0.0, 1.0)
            } else {
                0.5
            }
        })
        .collect();
    Dataset::new(
        Tensor::new(vec![n, dim], data)?,
        labels,
        Vec::new(),
        classes,
        Domain::UNIT,
        Split::Train,
    )
}

fn place_centers(rng: &mut RngStream, classes: usize, dim: usize, separation: f64) -> Result<Vec<f64>> {
    const ATTEMPTS: usize = 5000;
    // Random directions on a sphere whose radius starts where a random pair is
    // separated by about `separation`, growing slowly while placement fails.
    let mut radius = separation / core::f64::consts::SQRT_2;
    for attempt in 0..ATTEMPTS {
        if attempt > 0 && attempt % 50 == 0 {
            radius *= 1.02;
        }
        let mut centers = vec![0f64; classes * dim];
        for c in centers.chunks_mut(dim) {
            let mut norm = 0.0;
            while norm < 1e-12 {
                for v in c.iter_mut() {
                    *v = rng.normal();
                }
                norm = libm::sqrt(c.iter().map(|v| v * v).sum::<f64>());
            }
            for v in c.iter_mut() {
                *v *= radius / norm;
            }
        }
        let ok = (0..classes).all(|a| {
            (a + 1..classes).all(|b| {
                let d2: f64 = (0..dim)
                    .map(|j| {
                        let d = centers[a * dim + j] - centers[b * dim + j];
                        d * d
                    })
                    .sum();
                libm::sqrt(d2) >= separation
            })
        });
        if ok {
            return Ok(centers);
        }
    }
    Err(Error::Infeasible(format!(
        "could not place {classes} centers {separation} apart in {dim} dimensions"
    )))
}

/// Toy segmentation data plus the fixed target scene used by targeted
/// universal attacks.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSet {
    pub data: Dataset,
    /// `side * side` label map.
    pub target: Vec<usize>,
}

/// Grey value of pixels of class `k`; background is class 0.
pub fn class_intensity(k: usize, classes: usize) -> f32 {
    0.15 + 0.7 * k as f32 / (classes - 1) as f32
}

const PIXEL_NOISE: f32 = 0.05;

/// Single-channel `side x side` images of axis-aligned rectangles and discs
/// drawn in class-coded grey levels on a class-0 background, with their
/// per-pixel label maps. Each image holds between 1 and `max_shapes` shapes
/// (none when `max_shapes` is 0).
pub fn gen_shapes_seg(
    rng: &mut RngStream,
    n: usize,
    side: usize,
    classes: usize,
    max_shapes: usize,
) -> Result<SegmentationSet> {
    if side < 8 {
        return Err(invalid("side must be at least 8"));
    }
    if classes < 2 {
        return Err(invalid("need at least two classes"));
    }
    if n == 0 {
        return Err(Error::Empty("shapes dataset"));
    }
    let mut target_rng = rng.fork(0x7a26_e7);
    let target = draw_scene(&mut target_rng, side, classes, max_shapes.max(2), 2);

    let mut images = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n * side * side);
    for _ in 0..n {
        let count = if max_shapes == 0 { 0 } else { 1 + rng.below(max_shapes) };
        let map = draw_scene(rng, side, classes, count, count);
        for &k in &map {
            let noise = (rng.next_unit() as f32 * 2.0 - 1.0) * PIXEL_NOISE;
            images.push((class_intensity(k, classes) + noise).clamp(0.0, 1.0));
        }
        labels.extend(map);
    }
    let data = Dataset::new(
        Tensor::new(vec![n, side, side, 1], images)?,
        labels,
        vec![side, side],
        classes,
        Domain::UNIT,
        Split::Train,
    )?;
    Ok(SegmentationSet { data, target })
}

fn draw_scene(rng: &mut RngStream, side: usize, classes: usize, max: usize, min: usize) -> Vec<usize> {
    let mut map = vec![0usize; side * side];
    let count = if max <= min { max } else { min + rng.below(max - min + 1) };
    for _ in 0..count {
        let class = 1 + rng.below(classes - 1);
        if rng.below(2) == 0 {
            let w = side / 4 + rng.below(side / 4 + 1);
            let h = side / 4 + rng.below(side / 4 + 1);
            let x0 = rng.below(side - w + 1);
            let y0 = rng.below(side - h + 1);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    map[y * side + x] = class;
                }
            }
        } else {
            let r = (side / 8 + rng.below(side / 8 + 1)) as f64;
            let cx = rng.next_unit() * side as f64;
            let cy = rng.next_unit() * side as f64;
            for y in 0..side {
                for x in 0..side {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    if dx * dx + dy * dy <= r * r {
                        map[y * side + x] = class;
                    }
                }
            }
        }
    }
    map
}
