//! Voxel decoding from BEV features and the occupancy training loss.
//!
//! Voxels are flattened x-major: `index = (ix * ny + iy) * nz + iz`. Pillars
//! use the same order without the z axis.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{BackwardCtx, Init, Linear, Op, ParamStore, Scalar, Tape, Tensor, Var};

/// Placement of a voxel grid in the current ego frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeometry {
    pub dims: [usize; 3],
    /// Edge length per axis, meters.
    pub voxel_size: [f64; 3],
    /// Minimum corner, meters.
    pub origin: [f64; 3],
}

impl GridGeometry {
    pub fn cubic(dims: [usize; 3], voxel_size: f64, origin: [f64; 3]) -> Result<Self> {
        let g = GridGeometry { dims, voxel_size: [voxel_size; 3], origin };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) || !self.voxel_size.iter().all(|&v| v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("invalid grid {:?} with voxel size {:?}", self.dims, self.voxel_size)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.dims[1] + iy) * self.dims[2] + iz
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nz = self.dims[2];
        let iz = index % nz;
        let col = index / nz;
        [col / self.dims[1], col % self.dims[1], iz]
    }

    /// Upper corner, meters.
    pub fn max_corner(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + self.dims[a] as f64 * self.voxel_size[a])
    }

    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        let i = [ix, iy, iz];
        std::array::from_fn(|a| self.origin[a] + (i[a] as f64 + 0.5) * self.voxel_size[a])
    }

    /// Voxel containing `p` under half-open intervals, if inside.
    pub fn locate(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let t = ((p[a] - self.origin[a]) / self.voxel_size[a]).floor();
            if t < 0.0 || t >= self.dims[a] as f64 {
                return None;
            }
            out[a] = t as usize;
        }
        Some(out)
    }

    /// Same grid with `factor` times coarser z.
    pub fn coarsen_z(&self, factor: usize) -> Result<GridGeometry> {
        if factor == 0 || self.dims[2] % factor != 0 {
            return Err(Error::Config(format!("z extent {} not divisible by {factor}", self.dims[2])));
        }
        let mut g = *self;
        g.dims[2] /= factor;
        g.voxel_size[2] *= factor as f64;
        Ok(g)
    }
}

/// Voxel class labels, 0 = free.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub geometry: GridGeometry,
    pub classes: usize,
    pub labels: Vec<u8>,
}

impl OccupancyGrid {
    pub fn new(geometry: GridGeometry, classes: usize, labels: Vec<u8>) -> Result<Self> {
        geometry.validate()?;
        if labels.len() != geometry.len() {
            return Err(Error::Data(format!("{} labels for a grid of {} voxels", labels.len(), geometry.len())));
        }
        if classes < 2 || classes > 256 {
            return Err(Error::Config(format!("class count {classes} outside [2, 256]")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Data(format!("label {bad} >= class count {classes}")));
        }
        Ok(OccupancyGrid { geometry, classes, labels })
    }

    pub fn empty(geometry: GridGeometry, classes: usize) -> Result<Self> {
        Self::new(geometry, classes, vec![0; geometry.len()])
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> u8 {
        self.labels[self.geometry.index(ix, iy, iz)]
    }

    pub fn set(&mut self, ix: usize, iy: usize, iz: usize, label: u8) {
        let i = self.geometry.index(ix, iy, iz);
        self.labels[i] = label;
    }

    /// Per-voxel argmax of `[voxels, C]` (or `[.., C]`) logits; ties go to the lower class.
    pub fn from_logits<T: Scalar>(geometry: GridGeometry, logits: &Tensor<T>) -> Result<Self> {
        let c = logits.cols();
        if logits.numel() / c != geometry.len() {
            return Err(Error::dim("argmax", format!("{} logit rows for {} voxels", logits.numel() / c, geometry.len())));
        }
        let labels = logits
            .data()
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        Self::new(geometry, c, labels)
    }

    /// Majority vote over groups of `factor` consecutive z voxels. Ties
    /// prefer any occupied class over free, then the smaller class id.
    pub fn downsample_z(&self, factor: usize) -> Result<OccupancyGrid> {
        let geometry = self.geometry.coarsen_z(factor)?;
        let mut counts = vec![0usize; self.classes];
        let labels = self
            .labels
            .chunks(factor)
            .map(|group| {
                counts.iter_mut().for_each(|c| *c = 0);
                for &l in group {
                    counts[l as usize] += 1;
                }
                let mut best = 0usize;
                for k in 1..self.classes {
                    let better = counts[k] > counts[best] || (counts[k] == counts[best] && best == 0 && counts[k] > 0);
                    if better {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        OccupancyGrid::new(geometry, self.classes, labels)
    }

    pub fn accuracy(&self, other: &OccupancyGrid) -> Result<f64> {
        if self.geometry != other.geometry {
            return Err(Error::Config("accuracy needs grids with the same geometry".into()));
        }
        let same = self.labels.iter().zip(&other.labels).filter(|(a, b)| a == b).count();
        Ok(same as f64 / self.labels.len() as f64)
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&l| l != 0).count() as f64 / self.labels.len() as f64
    }
}

/// Per-class cross-entropy weights, mean 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
}

/// `w_c ∝ 1/ln(1.02 + freq_c)`, absent classes take the largest present
/// weight, renormalized to mean 1.
pub fn compute_class_weights(labels: &[u8], classes: usize) -> Result<ClassWeights> {
    if labels.is_empty() || classes == 0 {
        return Err(Error::Data("class weights need a non-empty grid".into()));
    }
    let mut counts = vec![0usize; classes];
    for &l in labels {
        let l = l as usize;
        if l >= classes {
            return Err(Error::Data(format!("label {l} >= class count {classes}")));
        }
        counts[l] += 1;
    }
    let n = labels.len() as f64;
    let raw: Vec<Option<f64>> =
        counts.iter().map(|&k| (k > 0).then(|| 1.0 / (1.02 + k as f64 / n).ln())).collect();
    let max = raw.iter().flatten().fold(0.0f64, |m, &w| m.max(w));
    let w: Vec<f64> = raw.iter().map(|r| r.unwrap_or(max)).collect();
    let mean = w.iter().sum::<f64>() / classes as f64;
    Ok(ClassWeights { weights: w.iter().map(|v| v / mean).collect() })
}

struct BalancedCe {
    labels: Vec<u8>,
    weights: Vec<f64>,
    probs: Vec<f64>,
    c: usize,
}

impl<T: Scalar> Op<T> for BalancedCe {
    fn name(&self) -> &'static str {
        "balanced_cross_entropy"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let n = self.labels.len() as f64;
        let g = ctx.grad[0].f64() / n;
        let mut dx = Vec::with_capacity(self.probs.len());
        for (i, row) in self.probs.chunks(self.c).enumerate() {
            let y = self.labels[i] as usize;
            let wy = self.weights[y] * g;
            dx.extend(row.iter().enumerate().map(|(k, &p)| T::of(wy * (p - if k == y { 1.0 } else { 0.0 }))));
        }
        vec![Some(dx)]
    }
}

fn check_labels(op: &'static str, rows: usize, c: usize, labels: &[u8]) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::dim(op, format!("{rows} rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Data(format!("label {bad} >= class count {c}")));
    }
    Ok(())
}

/// Sum of `[N, ..]` rows of a `[.., C]` tensor interpreted as N voxels.
fn rows_of<T: Scalar>(tape: &Tape<T>, x: Var) -> (usize, usize) {
    let c = tape.value(x).cols();
    (tape.value(x).numel() / c, c)
}

struct Lovasz {
    /// Per present class: (class, rank order of voxels, Jaccard-extension gradient by rank).
    per_class: Vec<(usize, Vec<usize>, Vec<f64>)>,
    labels: Vec<u8>,
    c: usize,
}

impl<T: Scalar> Op<T> for Lovasz {
    fn name(&self) -> &'static str {
        "lovasz_softmax"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let c = self.c;
        let mut dx = vec![T::zero(); ctx.inputs[0].numel()];
        if self.per_class.is_empty() {
            return vec![Some(dx)];
        }
        let g = ctx.grad[0].f64() / self.per_class.len() as f64;
        for (class, order, grad) in &self.per_class {
            for (&i, &gr) in order.iter().zip(grad) {
                // e = |fg - p|: slope -1 for the true class, +1 otherwise.
                let sign = if self.labels[i] as usize == *class { -1.0 } else { 1.0 };
                dx[i * c + class] += T::of(g * gr * sign);
            }
        }
        vec![Some(dx)]
    }
}

/// Discrete gradient of the Jaccard loss extension for a sorted
/// ground-truth indicator.
pub fn lovasz_grad(fg_sorted: &[bool]) -> Vec<f64> {
    let gts = fg_sorted.iter().filter(|&&f| f).count() as f64;
    let mut out = Vec::with_capacity(fg_sorted.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &f in fg_sorted {
        if f {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let jac = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        out.push(jac - prev);
        prev = jac;
    }
    out
}

/// Value, descending error order and per-rank gradient of one class term.
fn sorted_jaccard_term(errors: &[f64], fg: &[bool]) -> (f64, Vec<usize>, Vec<f64>) {
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
    let sorted_fg: Vec<bool> = order.iter().map(|&i| fg[i]).collect();
    let grad = lovasz_grad(&sorted_fg);
    let value = order.iter().zip(&grad).map(|(&i, g)| errors[i] * g).sum();
    (value, order, grad)
}

/// Lovász extension of the Jaccard loss for one class, evaluated at `errors`.
pub fn lovasz_extension(errors: &[f64], fg: &[bool]) -> f64 {
    sorted_jaccard_term(errors, fg).0
}

impl<T: Scalar> Tape<T> {
    /// Mean over voxels of `w_y · (-log softmax(logits)_y)`. `logits` has
    /// classes on its trailing axis.
    pub fn balanced_cross_entropy(&mut self, logits: Var, labels: &[u8], weights: &ClassWeights) -> Result<Var> {
        let (n, c) = rows_of(self, logits);
        check_labels("balanced_cross_entropy", n, c, labels)?;
        if weights.weights.len() != c {
            return Err(Error::dim("balanced_cross_entropy", format!("{} weights for {c} classes", weights.weights.len())));
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut total = 0.0;
        for (row, &y) in self.value(logits).data().chunks(c).zip(labels) {
            let row: Vec<f64> = row.iter().map(|v| v.f64()).collect();
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            total += weights.weights[y as usize] * (log_z - row[y as usize]);
            probs.extend(row.iter().map(|v| (v - log_z).exp()));
        }
        let value = Tensor::scalar(T::of(total / n as f64));
        let op = BalancedCe { labels: labels.to_vec(), weights: weights.weights.clone(), probs, c };
        self.push(Box::new(op), &[logits], value)
    }

    /// Lovász-Softmax on class probabilities (trailing axis), averaged over
    /// the classes present in `labels`. The sort order is a constant of the
    /// backward pass.
    pub fn lovasz_softmax(&mut self, probs: Var, labels: &[u8]) -> Result<Var> {
        let (n, c) = rows_of(self, probs);
        check_labels("lovasz_softmax", n, c, labels)?;
        let p = self.value(probs).data();
        let mut per_class = Vec::new();
        let mut total = 0.0;
        for class in 0..c {
            if !labels.iter().any(|&l| l as usize == class) {
                continue;
            }
            let errors: Vec<f64> = (0..n)
                .map(|i| {
                    let fg = if labels[i] as usize == class { 1.0 } else { 0.0 };
                    (fg - p[i * c + class].f64()).abs()
                })
                .collect();
            let fg: Vec<bool> = labels.iter().map(|&l| l as usize == class).collect();
            let (value, order, grad) = sorted_jaccard_term(&errors, &fg);
            total += value;
            per_class.push((class, order, grad));
        }
        let loss = if per_class.is_empty() { 0.0 } else { total / per_class.len() as f64 };
        let op = Lovasz { per_class, labels: labels.to_vec(), c };
        self.push(Box::new(op), &[probs], Tensor::scalar(T::of(loss)))
    }

    /// Averages logits over groups of `factor` consecutive z voxels.
    /// `logits` is `[nx, ny, nz, C]`.
    pub fn pool_logits_z(&mut self, logits: Var, factor: usize) -> Result<Var> {
        let (nx, ny, nz, c) = match *self.shape(logits) {
            [nx, ny, nz, c] if factor > 0 && nz % factor == 0 => (nx, ny, nz, c),
            ref s => return Err(Error::dim("pool_logits_z", format!("cannot pool {s:?} by {factor} along z"))),
        };
        if factor == 1 {
            return Ok(logits);
        }
        let grouped = self.reshape(logits, &[nx * ny * nz / factor, factor, c])?;
        let pooled = self.mean_axis(grouped, 1)?;
        self.reshape(pooled, &[nx, ny, nz / factor, c])
    }
}

/// Loss terms of one supervision scale.
#[derive(Clone, Copy, Debug)]
pub struct ScaleLoss {
    pub cross_entropy: Var,
    pub lovasz: Var,
}

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub scales: Vec<ScaleLoss>,
}

/// `Σ_scales (CE + Lovász)` with class weights computed from each scale's labels.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, logits: &[Var], gt: &[OccupancyGrid]) -> Result<LossBreakdown> {
    if logits.is_empty() || logits.len() != gt.len() {
        return Err(Error::Config(format!("{} logit scales for {} label scales", logits.len(), gt.len())));
    }
    let mut scales = Vec::with_capacity(logits.len());
    let mut total: Option<Var> = None;
    for (&lg, g) in logits.iter().zip(gt) {
        let weights = compute_class_weights(&g.labels, g.classes)?;
        let (n, c) = rows_of(tape, lg);
        let flat = tape.reshape(lg, &[n, c])?;
        let ce = tape.balanced_cross_entropy(flat, &g.labels, &weights)?;
        let probs = tape.softmax(flat, 1)?;
        let lov = tape.lovasz_softmax(probs, &g.labels)?;
        let s = tape.add(ce, lov)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
        scales.push(ScaleLoss { cross_entropy: ce, lovasz: lov });
    }
    Ok(LossBreakdown { total: total.expect("at least one scale"), scales })
}

/// Spatial layout shared by both heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    /// BEV pillar grid `(nx, ny)`.
    pub bev: (usize, usize),
    /// Integer BEV → voxel upsampling in x and y.
    pub upsample: usize,
    pub nz: usize,
    pub classes: usize,
    pub channels: usize,
}

impl HeadLayout {
    pub fn for_grid(bev: (usize, usize), voxels: [usize; 3], classes: usize, channels: usize) -> Result<Self> {
        let s = voxels[0] / bev.0.max(1);
        if bev.0 == 0 || bev.1 == 0 || s == 0 || voxels[0] != bev.0 * s || voxels[1] != bev.1 * s {
            return Err(Error::Config(format!(
                "BEV grid {}x{} does not divide voxel grid {}x{} by one integer factor",
                bev.0, bev.1, voxels[0], voxels[1]
            )));
        }
        Ok(HeadLayout { bev, upsample: s, nz: voxels[2], classes, channels })
    }

    pub fn pillars(&self) -> usize {
        self.bev.0 * self.bev.1
    }

    /// Voxels decoded from one pillar.
    pub fn per_pillar(&self) -> usize {
        self.upsample * self.upsample * self.nz
    }

    pub fn voxels(&self) -> usize {
        self.pillars() * self.per_pillar()
    }

    pub fn logits_shape(&self) -> [usize; 4] {
        [self.bev.0 * self.upsample, self.bev.1 * self.upsample, self.nz, self.classes]
    }

    /// Pillar of every voxel, in voxel order.
    pub fn pillar_of_voxel(&self) -> Vec<usize> {
        let (s, ny) = (self.upsample, self.bev.1);
        let (gx, gy) = (self.bev.0 * s, ny * s);
        let mut out = Vec::with_capacity(self.voxels());
        for x in 0..gx {
            for y in 0..gy {
                for _ in 0..self.nz {
                    out.push((x / s) * ny + y / s);
                }
            }
        }
        out
    }

    /// For each voxel, its row in pillar-major `(pillar, sub-cell, z)` order;
    /// `None` when the two orders coincide.
    pub fn voxel_rows(&self) -> Option<Vec<usize>> {
        let s = self.upsample;
        if s == 1 {
            return None;
        }
        let ny = self.bev.1;
        let (gx, gy) = (self.bev.0 * s, ny * s);
        let mut out = Vec::with_capacity(self.voxels());
        for x in 0..gx {
            for y in 0..gy {
                let p = (x / s) * ny + y / s;
                let sub = (x % s) * s + y % s;
                for z in 0..self.nz {
                    out.push((p * s * s + sub) * self.nz + z);
                }
            }
        }
        Some(out)
    }
}

/// `x + up(relu(conv3x3(relu(down(x)))))` on the BEV map.
#[derive(Clone, Debug, PartialEq)]
pub struct BevResBlock {
    pub down: Linear,
    pub conv: Linear,
    pub up: Linear,
}

impl BevResBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        bottleneck: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(BevResBlock {
            down: Linear::new(store, &format!("{name}.down"), channels, bottleneck, rng)?,
            conv: Linear::new(store, &format!("{name}.conv"), 9 * bottleneck, bottleneck, rng)?,
            up: Linear::new(store, &format!("{name}.up"), bottleneck, channels, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, bev: (usize, usize)) -> Result<Var> {
        let h = self.down.forward(tape, x)?;
        let h = tape.relu(h)?;
        let b = self.down.d_out;
        let h = tape.reshape(h, &[bev.0, bev.1, b])?;
        let patches = tape.im2col3(h)?;
        let h = self.conv.forward(tape, patches)?;
        let h = tape.relu(h)?;
        let h = self.up.forward(tape, h)?;
        tape.add(x, h)
    }
}

fn res_stack<T: Scalar>(tape: &mut Tape<T>, blocks: &[BevResBlock], x: Var, bev: (usize, usize)) -> Result<Var> {
    blocks.iter().try_fold(x, |h, b| b.forward(tape, h, bev))
}

/// Optional voxel → instance cross-attention before classification.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceConditioning {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl InstanceConditioning {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut R) -> Result<Self> {
        Ok(InstanceConditioning {
            query: Linear::new(store, &format!("{name}.query"), c, c, rng)?,
            key: Linear::with_init(store, &format!("{name}.key"), c, c, Init::fan_in(c), false, rng)?,
            value: Linear::new(store, &format!("{name}.value"), c, c, rng)?,
            out: Linear::new(store, &format!("{name}.out"), c, c, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, voxels: Var, inst: Var) -> Result<Var> {
        let c = tape.value(voxels).cols();
        let q = self.query.forward(tape, voxels)?;
        let k = self.key.forward(tape, inst)?;
        let v = self.value.forward(tape, inst)?;
        let s = tape.matmul_nt(q, k)?;
        let s = tape.scale(s, 1.0 / (c as f64).sqrt())?;
        let a = tape.softmax(s, 1)?;
        let h = tape.matmul(a, v)?;
        let h = self.out.forward(tape, h)?;
        tape.add(voxels, h)
    }
}

/// Voxel features as a per-pillar broadcast plus a learned height residual.
#[derive(Clone, Debug, PartialEq)]
pub struct HeightAwareHead {
    pub layout: HeadLayout,
    pub blocks: Vec<BevResBlock>,
    /// Pillar feature → `per_pillar * hidden` height code.
    pub expand: Linear,
    /// Height code → voxel residual (width `channels`).
    pub lift: Linear,
    pub classifier: Linear,
    pub conditioning: Option<InstanceConditioning>,
    pub hidden: usize,
}

/// Intermediate tensors of a head pass.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[nx, ny, nz, C]`.
    pub logits: Var,
    /// Pre-classifier voxel features `[voxels, c]` (height-aware head only).
    pub features: Option<Var>,
    /// Broadcast pillar features `[voxels, c]` (height-aware head only).
    pub broadcast: Option<Var>,
    /// Residual path output `[voxels, c]` (height-aware head only).
    pub residual: Option<Var>,
}

impl HeightAwareHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        layout: HeadLayout,
        res_blocks: usize,
        bottleneck: usize,
        hidden: usize,
        conditioning: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let c = layout.channels;
        let blocks = (0..res_blocks)
            .map(|i| BevResBlock::new(store, &format!("{name}.block{i}"), c, bottleneck, rng))
            .collect::<Result<_>>()?;
        let expand = Linear::new(store, &format!("{name}.expand"), c, layout.per_pillar() * hidden, rng)?;
        let lift = Linear::new(store, &format!("{name}.lift"), hidden, c, rng)?;
        let conditioning =
            if conditioning { Some(InstanceConditioning::new(store, &format!("{name}.cond"), c, rng)?) } else { None };
        let classifier = Linear::new(store, &format!("{name}.classifier"), c, layout.classes, rng)?;
        Ok(HeightAwareHead { layout, blocks, expand, lift, classifier, conditioning, hidden })
    }

    /// Height residual `[voxels, c]` in voxel order.
    pub fn residual<T: Scalar>(&self, tape: &mut Tape<T>, p: Var) -> Result<Var> {
        let l = self.layout;
        let f = res_stack(tape, &self.blocks, p, l.bev)?;
        let code = self.expand.forward(tape, f)?;
        let code = tape.reshape(code, &[l.voxels(), self.hidden])?;
        let code = tape.relu(code)?;
        let r = self.lift.forward(tape, code)?;
        match l.voxel_rows() {
            Some(rows) => tape.gather_rows(r, &rows),
            None => Ok(r),
        }
    }

    /// `p` is the `[pillars, c]` BEV feature map.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: Var, inst: Option<Var>) -> Result<HeadOutput> {
        let l = self.layout;
        if tape.shape(p) != [l.pillars(), l.channels] {
            return Err(Error::dim("height_aware_head", format!("expected {} x {} BEV features", l.pillars(), l.channels)));
        }
        let broadcast = tape.gather_rows(p, &l.pillar_of_voxel())?;
        let residual = self.residual(tape, p)?;
        let mut v = tape.add(broadcast, residual)?;
        let features = v;
        if let Some(cond) = &self.conditioning {
            let inst = inst.ok_or_else(|| Error::Config("instance conditioning needs instance features".into()))?;
            v = cond.forward(tape, v, inst)?;
        }
        let logits = self.classifier.forward(tape, v)?;
        let logits = tape.reshape(logits, &l.logits_shape())?;
        Ok(HeadOutput { logits, features: Some(features), broadcast: Some(broadcast), residual: Some(residual) })
    }
}

/// Baseline head reinterpreting channels as `(height, class)` slots.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelToHeightHead {
    pub layout: HeadLayout,
    pub blocks: Vec<BevResBlock>,
    pub hidden: Option<Linear>,
    pub proj: Linear,
}

impl ChannelToHeightHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        layout: HeadLayout,
        res_blocks: usize,
        bottleneck: usize,
        hidden: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let c = layout.channels;
        let blocks = (0..res_blocks)
            .map(|i| BevResBlock::new(store, &format!("{name}.block{i}"), c, bottleneck, rng))
            .collect::<Result<_>>()?;
        let hidden = hidden.map(|h| Linear::new(store, &format!("{name}.hidden"), c, h, rng)).transpose()?;
        let d_in = hidden.as_ref().map_or(c, |h| h.d_out);
        let proj = Linear::new(store, &format!("{name}.proj"), d_in, layout.per_pillar() * layout.classes, rng)?;
        Ok(ChannelToHeightHead { layout, blocks, hidden, proj })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: Var) -> Result<HeadOutput> {
        let l = self.layout;
        if tape.shape(p) != [l.pillars(), l.channels] {
            return Err(Error::dim("channel_to_height_head", format!("expected {} x {} BEV features", l.pillars(), l.channels)));
        }
        let mut h = res_stack(tape, &self.blocks, p, l.bev)?;
        if let Some(hidden) = &self.hidden {
            h = hidden.forward(tape, h)?;
            h = tape.relu(h)?;
        }
        let slots = self.proj.forward(tape, h)?;
        let mut logits = tape.reshape(slots, &[l.voxels(), l.classes])?;
        if let Some(rows) = l.voxel_rows() {
            logits = tape.gather_rows(logits, &rows)?;
        }
        let logits = tape.reshape(logits, &l.logits_shape())?;
        Ok(HeadOutput { logits, features: None, broadcast: None, residual: None })
    }
}

/// Parameter count of a [`HeightAwareHead`] built with these settings.
pub fn height_aware_param_count(layout: &HeadLayout, res_blocks: usize, bottleneck: usize, hidden: usize) -> usize {
    let c = layout.channels;
    let block = (c * bottleneck + bottleneck) + (9 * bottleneck * bottleneck + bottleneck) + (bottleneck * c + c);
    res_blocks * block
        + (c * layout.per_pillar() * hidden + layout.per_pillar() * hidden)
        + (hidden * c + c)
        + (c * layout.classes + layout.classes)
}

/// Parameter count of a [`ChannelToHeightHead`] built with these settings.
pub fn channel_to_height_param_count(layout: &HeadLayout, res_blocks: usize, bottleneck: usize, hidden: Option<usize>) -> usize {
    let c = layout.channels;
    let block = (c * bottleneck + bottleneck) + (9 * bottleneck * bottleneck + bottleneck) + (bottleneck * c + c);
    let out = layout.per_pillar() * layout.classes;
    res_blocks * block
        + match hidden {
            Some(h) => (c * h + h) + (h * out + out),
            None => c * out + out,
        }
}

/// Hidden width making the baseline's parameter count closest to `budget`.
pub fn matched_channel_to_height_hidden(layout: &HeadLayout, res_blocks: usize, bottleneck: usize, budget: usize) -> usize {
    let cost = |h: usize| channel_to_height_param_count(layout, res_blocks, bottleneck, Some(h));
    let per_unit = cost(2) - cost(1);
    let base = cost(1) - per_unit;
    let h = budget.saturating_sub(base) as f64 / per_unit as f64;
    let (lo, hi) = (h.floor().max(1.0) as usize, h.ceil().max(1.0) as usize);
    if cost(lo).abs_diff(budget) <= cost(hi).abs_diff(budget) {
        lo
    } else {
        hi
    }
}

#[cfg(test)]
mod tests;
