//! Ray-based occupancy evaluation: simulated LiDAR rays are cast into the
//! predicted and ground-truth grids, and a hit counts as correct when both
//! grids agree on the class and the depths are within a threshold.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::EgoPose;
use crate::occ_head::OccupancyGrid;

/// Depth thresholds averaged into the final score, meters.
pub const THRESHOLDS: [f64; 3] = [1.0, 2.0, 4.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryRay {
    pub origin: [f64; 3],
    /// Unit length.
    pub direction: [f64; 3],
    /// Index into the pose list that generated the ray (0 = evaluated frame).
    pub frame_index: usize,
}

impl QueryRay {
    /// Normalizes `direction`; zero or non-finite input is a ray error.
    pub fn new(origin: [f64; 3], direction: [f64; 3], frame_index: usize) -> Result<Self> {
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) || !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::Ray(format!("cannot cast from {origin:?} along {direction:?}")));
        }
        Ok(QueryRay { origin, direction: direction.map(|v| v / norm), frame_index })
    }

    pub fn at(&self, t: f64) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + t * self.direction[a])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    /// Entry distance of the hit voxel; infinite on a miss.
    pub depth: f64,
    pub class: Option<u8>,
    pub voxel: Option<[usize; 3]>,
}

impl RayHit {
    pub const MISS: RayHit = RayHit { depth: f64::INFINITY, class: None, voxel: None };

    pub fn is_hit(&self) -> bool {
        self.class.is_some()
    }
}

/// Spherical sampling pattern of one simulated sensor sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayPattern {
    pub channels: usize,
    pub azimuths: usize,
    /// Lowest and highest elevation, degrees.
    pub elevation_range: (f64, f64),
    /// Sensor origin above the ego origin, meters.
    pub sensor_height: f64,
}

impl Default for RayPattern {
    fn default() -> Self {
        RayPattern { channels: 32, azimuths: 360, elevation_range: (-30.0, 10.0), sensor_height: 1.5 }
    }
}

impl RayPattern {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.elevation_range;
        if self.channels == 0 || self.azimuths == 0 || !(lo <= hi) || lo < -90.0 || hi > 90.0 {
            return Err(Error::Config(format!("invalid ray pattern {self:?}")));
        }
        Ok(())
    }

    /// Elevations, degrees; evenly spaced over the range, endpoints included.
    pub fn elevations(&self) -> Vec<f64> {
        let (lo, hi) = self.elevation_range;
        if self.channels == 1 {
            return vec![lo];
        }
        (0..self.channels).map(|k| lo + (hi - lo) * k as f64 / (self.channels - 1) as f64).collect()
    }
}

/// Rays from every pose in `poses`, expressed in the frame of `poses[0]`.
/// Poses are ego→world.
pub fn generate_query_rays(poses: &[EgoPose], pattern: &RayPattern) -> Result<Vec<QueryRay>> {
    pattern.validate()?;
    let current = poses.first().ok_or_else(|| Error::Config("ray generation needs at least one pose".into()))?;
    let to_current = current.inverse();
    let elevations = pattern.elevations();
    let mut rays = Vec::with_capacity(poses.len() * pattern.channels * pattern.azimuths);
    for (f, pose) in poses.iter().enumerate() {
        let rel = to_current.compose(pose);
        let origin = rel.apply([0.0, 0.0, pattern.sensor_height]);
        for &el in &elevations {
            let (se, ce) = el.to_radians().sin_cos();
            for a in 0..pattern.azimuths {
                let az = std::f64::consts::TAU * a as f64 / pattern.azimuths as f64;
                let (sa, ca) = az.sin_cos();
                let dir = rel.apply_vector([ce * ca, ce * sa, se]);
                rays.push(QueryRay::new(origin, dir, f)?);
            }
        }
    }
    Ok(rays)
}

/// Crossings closer together than this (metres) count as one.
const GRAZE: f64 = 1e-9;

/// Walks the voxels pierced by `ray` in order of entry distance and returns
/// the first occupied one. Voxels are half-open boxes `[lo, hi)`.
pub fn cast_ray(grid: &OccupancyGrid, ray: &QueryRay) -> Result<RayHit> {
    let norm2: f64 = ray.direction.iter().map(|v| v * v).sum();
    if !(norm2 > 0.0) {
        return Err(Error::Ray("zero ray direction".into()));
    }
    let g = &grid.geometry;
    let hi = g.max_corner();
    let (mut t_in, mut t_out) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        let d = ray.direction[a];
        if d == 0.0 {
            if ray.origin[a] < g.origin[a] || ray.origin[a] >= hi[a] {
                return Ok(RayHit::MISS);
            }
            continue;
        }
        let (t0, t1) = ((g.origin[a] - ray.origin[a]) / d, (hi[a] - ray.origin[a]) / d);
        t_in = t_in.max(t0.min(t1));
        t_out = t_out.min(t0.max(t1));
    }
    if t_in >= t_out {
        return Ok(RayHit::MISS);
    }

    let entry = ray.at(t_in);
    let mut cell = [0i64; 3];
    let mut step = [0i64; 3];
    for a in 0..3 {
        let n = g.dims[a] as i64;
        // Clamping puts a point on the upper face into the last cell.
        cell[a] = (((entry[a] - g.origin[a]) / g.voxel_size[a]).floor() as i64).clamp(0, n - 1);
        step[a] = if ray.direction[a] > 0.0 {
            1
        } else if ray.direction[a] < 0.0 {
            -1
        } else {
            0
        };
    }
    // Distance at which the ray leaves cell `i` along axis `a`, computed
    // from the index each time rather than accumulated.
    let boundary = |a: usize, i: i64| -> f64 {
        let face = match step[a] {
            1 => i + 1,
            -1 => i,
            _ => return f64::INFINITY,
        };
        (g.origin[a] + face as f64 * g.voxel_size[a] - ray.origin[a]) / ray.direction[a]
    };
    let mut t_next: [f64; 3] = std::array::from_fn(|a| boundary(a, cell[a]));

    let mut t = t_in;
    loop {
        let [x, y, z] = cell.map(|v| v as usize);
        let label = grid.get(x, y, z);
        if label != 0 {
            let depth = if t > 0.0 { t } else { f64::MIN_POSITIVE };
            return Ok(RayHit { depth, class: Some(label), voxel: Some([x, y, z]) });
        }
        let t_min = t_next.iter().copied().fold(f64::INFINITY, f64::min);
        if !(t_min < t_out) {
            return Ok(RayHit::MISS);
        }
        // Axes crossing within GRAZE of each other are stepped together so
        // edge and corner crossings do not visit cells the ray only touches.
        for a in 0..3 {
            if t_next[a] - t_min <= GRAZE {
                cell[a] += step[a];
                if cell[a] < 0 || cell[a] >= g.dims[a] as i64 {
                    return Ok(RayHit::MISS);
                }
                t_next[a] = boundary(a, cell[a]);
            }
        }
        t = t_min;
    }
}

pub fn cast_rays(grid: &OccupancyGrid, rays: &[QueryRay]) -> Result<Vec<RayHit>> {
    rays.iter().map(|r| cast_ray(grid, r)).collect()
}

/// Counts and IoU per class at one depth threshold. Index 0 (free) is never
/// scored.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdScores {
    pub threshold: f64,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    /// `None` where `tp + fp + fn` is zero.
    pub iou: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

/// Applies the per-ray accounting rule to precomputed hits.
pub fn score_hits(pred: &[RayHit], gt: &[RayHit], classes: usize, threshold: f64) -> Result<ThresholdScores> {
    if pred.len() != gt.len() {
        return Err(Error::Config(format!("{} predicted hits for {} reference hits", pred.len(), gt.len())));
    }
    let (mut tp, mut fp, mut fn_) = (vec![0u64; classes], vec![0u64; classes], vec![0u64; classes]);
    for (p, g) in pred.iter().zip(gt) {
        match (p.class, g.class) {
            (Some(a), Some(b)) if a == b && (p.depth - g.depth).abs() < threshold => tp[a as usize] += 1,
            (pc, gc) => {
                if let Some(a) = pc {
                    fp[a as usize] += 1;
                }
                if let Some(b) = gc {
                    fn_[b as usize] += 1;
                }
            }
        }
    }
    Ok(ThresholdScores::from_counts(threshold, tp, fp, fn_))
}

impl ThresholdScores {
    pub fn from_counts(threshold: f64, tp: Vec<u64>, fp: Vec<u64>, fn_: Vec<u64>) -> Self {
        let iou: Vec<Option<f64>> = (0..tp.len())
            .map(|c| {
                let den = tp[c] + fp[c] + fn_[c];
                (c != 0 && den > 0).then(|| tp[c] as f64 / den as f64)
            })
            .collect();
        let scored: Vec<f64> = iou.iter().flatten().copied().collect();
        let mean = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
        ThresholdScores { threshold, tp, fp, fn_, iou, mean }
    }
}

fn check_pair(pred: &OccupancyGrid, gt: &OccupancyGrid) -> Result<()> {
    if pred.geometry != gt.geometry || pred.classes != gt.classes {
        return Err(Error::Config("prediction and ground truth grids differ in geometry or class count".into()));
    }
    Ok(())
}

pub fn evaluate_rayiou(pred: &OccupancyGrid, gt: &OccupancyGrid, rays: &[QueryRay], threshold: f64) -> Result<ThresholdScores> {
    check_pair(pred, gt)?;
    score_hits(&cast_rays(pred, rays)?, &cast_rays(gt, rays)?, gt.classes, threshold)
}

/// Scores at every threshold in [`THRESHOLDS`] from one pair of ray casts.
#[derive(Clone, Debug, PartialEq)]
pub struct RayIouReport {
    pub per_threshold: Vec<ThresholdScores>,
    /// Mean over thresholds; `None` when no ray hit an occupied voxel.
    pub rayiou: Option<f64>,
    pub rays: usize,
}

pub fn rayiou_report(pred: &OccupancyGrid, gt: &OccupancyGrid, rays: &[QueryRay]) -> Result<RayIouReport> {
    check_pair(pred, gt)?;
    let (ph, gh) = (cast_rays(pred, rays)?, cast_rays(gt, rays)?);
    let per_threshold =
        THRESHOLDS.iter().map(|&t| score_hits(&ph, &gh, gt.classes, t)).collect::<Result<Vec<_>>>()?;
    Ok(RayIouReport::from_scores(per_threshold, rays.len()))
}

/// Mean IoU over the 1, 2 and 4 m thresholds.
pub fn rayiou_mean(pred: &OccupancyGrid, gt: &OccupancyGrid, rays: &[QueryRay]) -> Result<f64> {
    rayiou_report(pred, gt, rays)?
        .rayiou
        .ok_or_else(|| Error::Data("no ray hit an occupied voxel in either grid".into()))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

impl RayIouReport {
    fn from_scores(per_threshold: Vec<ThresholdScores>, rays: usize) -> Self {
        let means: Option<Vec<f64>> = per_threshold.iter().map(|s| s.mean).collect();
        let rayiou = means.map(|m| m.iter().sum::<f64>() / m.len() as f64);
        RayIouReport { per_threshold, rayiou, rays }
    }

    /// Sums counts over several reports (e.g. one per scene) and rescores.
    pub fn pooled(reports: &[RayIouReport]) -> Result<RayIouReport> {
        let first = reports.first().ok_or_else(|| Error::Data("nothing to pool".into()))?;
        let mut per = first.per_threshold.clone();
        for r in &reports[1..] {
            if r.per_threshold.len() != per.len() || r.per_threshold.iter().zip(&per).any(|(a, b)| a.tp.len() != b.tp.len()) {
                return Err(Error::Config("pooled reports differ in thresholds or classes".into()));
            }
            for (acc, s) in per.iter_mut().zip(&r.per_threshold) {
                for c in 0..acc.tp.len() {
                    acc.tp[c] += s.tp[c];
                    acc.fp[c] += s.fp[c];
                    acc.fn_[c] += s.fn_[c];
                }
            }
        }
        let per = per.into_iter().map(|s| ThresholdScores::from_counts(s.threshold, s.tp, s.fp, s.fn_)).collect();
        Ok(RayIouReport::from_scores(per, reports.iter().map(|r| r.rays).sum()))
    }

    fn class_rows(&self) -> Vec<usize> {
        let classes = self.per_threshold.first().map_or(0, |s| s.iou.len());
        (1..classes).filter(|&c| self.per_threshold.iter().any(|s| s.iou[c].is_some())).collect()
    }

    fn class_name(names: &[String], c: usize) -> String {
        names.get(c).cloned().unwrap_or_else(|| format!("class{c}"))
    }

    /// `class,IoU@1m,IoU@2m,IoU@4m` rows, then the per-threshold means and
    /// the final score.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("class");
        for s in &self.per_threshold {
            let _ = write!(out, ",IoU@{}m", s.threshold);
        }
        out.push('\n');
        for c in self.class_rows() {
            out.push_str(&Self::class_name(names, c));
            for s in &self.per_threshold {
                let _ = write!(out, ",{}", cell(s.iou[c]));
            }
            out.push('\n');
        }
        out.push_str("mean");
        for s in &self.per_threshold {
            let _ = write!(out, ",{}", cell(s.mean));
        }
        out.push('\n');
        let _ = writeln!(out, "RayIoU,{}{}", cell(self.rayiou), ",".repeat(self.per_threshold.len() - 1));
        out
    }

    pub fn to_table(&self, names: &[String]) -> String {
        let mut out = format!("{:<12}", "class");
        for s in &self.per_threshold {
            let _ = write!(out, "{:>10}", format!("IoU@{}m", s.threshold));
        }
        out.push('\n');
        for c in self.class_rows() {
            let _ = write!(out, "{:<12}", Self::class_name(names, c));
            for s in &self.per_threshold {
                let _ = write!(out, "{:>10}", cell(s.iou[c]));
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<12}", "mean");
        for s in &self.per_threshold {
            let _ = write!(out, "{:>10}", cell(s.mean));
        }
        let _ = writeln!(out, "\n{:<12}{:>10}  ({} rays)", "RayIoU", cell(self.rayiou), self.rays);
        out
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::occ_head::GridGeometry;

    fn random_grid(rng: &mut ChaCha8Rng, fill: f64, classes: u8) -> OccupancyGrid {
        let g = GridGeometry::cubic([8, 8, 8], 0.5, [-2.0, -2.0, -2.0]).unwrap();
        let labels = (0..512).map(|_| if rng.random::<f64>() < fill { rng.random_range(1..classes) } else { 0 }).collect();
        OccupancyGrid::new(g, classes as usize, labels).unwrap()
    }

    /// First occupied voxel found by marching in steps of voxel/1000.
    fn march(grid: &OccupancyGrid, ray: &QueryRay) -> RayHit {
        let vs = grid.geometry.voxel_size[0];
        let step = vs / 1000.0;
        let far = 20.0;
        let mut k = 0u64;
        loop {
            let t = k as f64 * step;
            if t > far {
                return RayHit::MISS;
            }
            if let Some([x, y, z]) = grid.geometry.locate(ray.at(t)) {
                let l = grid.get(x, y, z);
                if l != 0 {
                    return RayHit { depth: t, class: Some(l), voxel: Some([x, y, z]) };
                }
            }
            k += 1;
        }
    }

    fn random_ray(rng: &mut ChaCha8Rng) -> QueryRay {
        let o = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let d = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        QueryRay::new(o, d, 0).unwrap()
    }

    #[test]
    fn ray_generation_examples() {
        let pattern = RayPattern { channels: 1, azimuths: 4, elevation_range: (0.0, 0.0), sensor_height: 0.0 };
        let rays = generate_query_rays(&[EgoPose::identity()], &pattern).unwrap();
        let expected = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]];
        for (r, e) in rays.iter().zip(expected) {
            assert_eq!(r.origin, [0.0; 3]);
            for a in 0..3 {
                assert!((r.direction[a] - e[a]).abs() < 1e-15);
            }
        }

        let pattern = RayPattern { channels: 3, azimuths: 5, ..RayPattern::default() };
        let poses = [EgoPose::from_translation(10.0, 0.0, 0.0), EgoPose::from_translation(8.0, 1.0, 0.0)];
        let rays = generate_query_rays(&poses, &pattern).unwrap();
        assert_eq!(rays.len(), 2 * 3 * 5);
        let past = &rays[15];
        assert_eq!(past.frame_index, 1);
        assert_eq!(past.origin, [-2.0, 1.0, 1.5]);
        assert_eq!(rays[0].origin, [0.0, 0.0, 1.5]);
        assert!(rays.iter().all(|r| (r.direction.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9));

        let rot = EgoPose::from_yaw_translation(std::f64::consts::FRAC_PI_2, [0.0; 3]);
        let pattern = RayPattern { channels: 1, azimuths: 4, elevation_range: (0.0, 0.0), sensor_height: 0.0 };
        let rays = generate_query_rays(&[EgoPose::identity(), rot], &pattern).unwrap();
        assert!((rays[4].direction[1] - 1.0).abs() < 1e-12);
        assert!(generate_query_rays(&[], &pattern).is_err());
    }

    #[test]
    fn cast_examples() {
        let g = GridGeometry::cubic([5, 1, 1], 1.0, [0.0, -0.5, -0.5]).unwrap();
        let empty = OccupancyGrid::empty(g, 3).unwrap();
        let ray = QueryRay::new([0.0; 3], [1.0, 0.0, 0.0], 0).unwrap();
        assert_eq!(cast_ray(&empty, &ray).unwrap(), RayHit::MISS);

        let mut grid = empty.clone();
        grid.set(2, 0, 0, 2);
        let hit = cast_ray(&grid, &ray).unwrap();
        assert_eq!(hit.depth, 2.0);
        assert_eq!(hit.class, Some(2));

        // From outside, entering through the far face.
        let back = QueryRay::new([7.0, 0.0, 0.0], [-1.0, 0.0, 0.0], 0).unwrap();
        let hit = cast_ray(&grid, &back).unwrap();
        assert_eq!((hit.depth, hit.voxel), (4.0, Some([2, 0, 0])));

        let inside = QueryRay::new([2.5, 0.0, 0.0], [0.0, 0.0, 1.0], 0).unwrap();
        let hit = cast_ray(&grid, &inside).unwrap();
        assert!(hit.depth > 0.0 && hit.depth < 1e-300);

        let bad = QueryRay { origin: [0.0; 3], direction: [0.0; 3], frame_index: 0 };
        assert!(matches!(cast_ray(&grid, &bad), Err(Error::Ray(_))));
        assert!(QueryRay::new([0.0; 3], [0.0; 3], 0).is_err());
    }

    #[test]
    fn cast_agrees_with_fine_marcher() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let grid = random_grid(&mut rng, 0.15, 4);
        let mut hits = 0;
        for _ in 0..200 {
            let ray = random_ray(&mut rng);
            let fast = cast_ray(&grid, &ray).unwrap();
            let slow = march(&grid, &ray);
            assert_eq!(fast.voxel, slow.voxel, "{ray:?}");
            if fast.is_hit() {
                hits += 1;
                assert!((fast.depth - slow.depth).abs() < 0.5 / 500.0, "{} vs {}", fast.depth, slow.depth);
            }
        }
        assert!(hits > 40, "{hits}");
    }

    #[test]
    fn scoring_rule_examples() {
        let hit = |d: f64, c: u8| RayHit { depth: d, class: Some(c), voxel: None };
        let a = score_hits(&[hit(3.5, 2)], &[hit(2.0, 2)], 3, 2.0).unwrap();
        assert_eq!((a.tp[2], a.fp[2], a.fn_[2]), (1, 0, 0));
        let b = score_hits(&[hit(3.5, 2)], &[hit(2.0, 2)], 3, 1.0).unwrap();
        assert_eq!((b.tp[2], b.fp[2], b.fn_[2]), (0, 1, 1));
        assert_eq!(b.iou[2], Some(0.0));
        let c = score_hits(&[hit(1.0, 1)], &[hit(1.0, 2)], 3, 1.0).unwrap();
        assert_eq!((c.fp[1], c.fn_[2]), (1, 1));
        let d = score_hits(&[RayHit::MISS], &[RayHit::MISS], 3, 1.0).unwrap();
        assert_eq!(d.mean, None);
    }

    #[test]
    fn metric_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_grid(&mut rng, 0.1, 4);
        let rays = generate_query_rays(
            &[EgoPose::identity(), EgoPose::from_translation(0.5, 0.2, 0.0)],
            &RayPattern { channels: 6, azimuths: 24, elevation_range: (-40.0, 40.0), sensor_height: 0.0 },
        )
        .unwrap();
        let same = rayiou_report(&gt, &gt, &rays).unwrap();
        assert_eq!(same.rayiou, Some(1.0));
        for s in &same.per_threshold {
            assert!(s.iou.iter().flatten().all(|&v| v == 1.0));
        }

        let free = OccupancyGrid::empty(gt.geometry, 4).unwrap();
        let zero = evaluate_rayiou(&free, &gt, &rays, 2.0).unwrap();
        assert!(zero.iou.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(rayiou_mean(&free, &gt, &rays).unwrap(), 0.0);

        let other = GridGeometry::cubic([8, 8, 8], 0.4, [-2.0; 3]).unwrap();
        let mismatched = OccupancyGrid::empty(other, 4).unwrap();
        assert!(matches!(evaluate_rayiou(&mismatched, &gt, &rays, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn tabulated_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let gt = random_grid(&mut rng, 0.12, 4);
        let pred = random_grid(&mut rng, 0.12, 4);
        let rays: Vec<QueryRay> = (0..150).map(|_| random_ray(&mut rng)).collect();
        // Tabulate per ray with the marcher, then count by hand.
        let table: Vec<(RayHit, RayHit)> = rays.iter().map(|r| (march(&pred, r), march(&gt, r))).collect();
        let mut means = Vec::new();
        for th in THRESHOLDS {
            let mut counts = [[0u64; 3]; 4];
            for (p, g) in &table {
                let agree = p.class.is_some() && p.class == g.class && (p.depth - g.depth).abs() < th;
                if agree {
                    counts[p.class.unwrap() as usize][0] += 1;
                    continue;
                }
                if let Some(c) = p.class {
                    counts[c as usize][1] += 1;
                }
                if let Some(c) = g.class {
                    counts[c as usize][2] += 1;
                }
            }
            let ious: Vec<f64> = counts[1..]
                .iter()
                .filter(|k| k.iter().sum::<u64>() > 0)
                .map(|k| k[0] as f64 / k.iter().sum::<u64>() as f64)
                .collect();
            means.push(ious.iter().sum::<f64>() / ious.len() as f64);
        }
        let oracle = means.iter().sum::<f64>() / 3.0;
        let fast = rayiou_mean(&pred, &gt, &rays).unwrap();
        assert!((fast - oracle).abs() < 1e-12, "{fast} vs {oracle}");
    }

    #[test]
    fn report_formats() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_grid(&mut rng, 0.1, 3);
        let pred = random_grid(&mut rng, 0.1, 3);
        let rays: Vec<QueryRay> = (0..100).map(|_| random_ray(&mut rng)).collect();
        let report = rayiou_report(&pred, &gt, &rays).unwrap();
        let names = vec!["free".to_string(), "ground".to_string(), "box".to_string()];
        let csv = report.to_csv(&names);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class,IoU@1m,IoU@2m,IoU@4m");
        assert!(lines[lines.len() - 1].starts_with("RayIoU,"));
        assert!(lines.iter().all(|l| l.split(',').count() == 4));
        assert!(report.to_table(&names).contains("RayIoU"));
    }

    #[test]
    fn pooling_sums_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = random_grid(&mut rng, 0.1, 3);
        let pred = random_grid(&mut rng, 0.1, 3);
        let rays: Vec<QueryRay> = (0..80).map(|_| random_ray(&mut rng)).collect();
        let (a, b) = rays.split_at(30);
        let whole = rayiou_report(&pred, &gt, &rays).unwrap();
        let parts = [rayiou_report(&pred, &gt, a).unwrap(), rayiou_report(&pred, &gt, b).unwrap()];
        assert_eq!(RayIouReport::pooled(&parts).unwrap(), whole);
        assert_eq!(RayIouReport::pooled(std::slice::from_ref(&whole)).unwrap(), whole);
        assert!(RayIouReport::pooled(&[]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn threshold_monotone_and_symmetric(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_grid(&mut rng, 0.1, 4);
            let pred = random_grid(&mut rng, 0.1, 4);
            let rays: Vec<QueryRay> = (0..60).map(|_| random_ray(&mut rng)).collect();
            let r = rayiou_report(&pred, &gt, &rays).unwrap();
            for c in 0..4 {
                for w in r.per_threshold.windows(2) {
                    if let (Some(a), Some(b)) = (w[0].iou[c], w[1].iou[c]) {
                        prop_assert!(a <= b);
                    }
                }
            }
            let swapped = rayiou_report(&gt, &pred, &rays).unwrap();
            for (a, b) in r.per_threshold.iter().zip(&swapped.per_threshold) {
                prop_assert_eq!(&a.iou, &b.iou);
            }
            prop_assert_eq!(r.clone(), rayiou_report(&pred, &gt, &rays).unwrap());
            if let Some(v) = r.rayiou {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
