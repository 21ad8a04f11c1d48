//! Reference implementations used by the test suites. Each one is written
//! from the defining rule, without calling into the code it checks.
#![allow(dead_code)]

/// Pruning keep-mask in integer arithmetic, `tau = tau_pct / 100`,
/// grouping every count together: keep iff `100 N >= max(tau_pct M, 100 n_min)`.
pub fn prune_keep(counts: &[u32], tau_pct: u32, n_min: u32) -> Vec<bool> {
    let m = counts.iter().copied().max().unwrap_or(0);
    let bar = (u64::from(tau_pct) * u64::from(m)).max(100 * u64::from(n_min));
    counts.iter().map(|&n| 100 * u64::from(n) >= bar).collect()
}

/// Planar point-to-segment distance by cases: behind `a`, beyond `b`, or
/// perpendicular to the supporting line.
pub fn seg_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let ab = (b.0 - a.0, b.1 - a.1);
    let ap = (p.0 - a.0, p.1 - a.1);
    let bp = (p.0 - b.0, p.1 - b.1);
    let norm = |v: (f64, f64)| (v.0 * v.0 + v.1 * v.1).sqrt();
    if ab.0 == 0.0 && ab.1 == 0.0 {
        return norm(ap);
    }
    if ap.0 * ab.0 + ap.1 * ab.1 <= 0.0 {
        return norm(ap);
    }
    if bp.0 * ab.0 + bp.1 * ab.1 >= 0.0 {
        return norm(bp);
    }
    (ab.0 * ap.1 - ab.1 * ap.0).abs() / norm(ab)
}

/// Linear social-cost falloff of a single interaction segment.
pub fn social_cost(p: (f64, f64), a: (f64, f64), b: (f64, f64), c_rel: f64, radius: f64) -> f64 {
    let d = seg_distance(p, a, b);
    if d >= radius {
        0.0
    } else {
        c_rel * (1.0 - d / radius)
    }
}

/// Exhaustive shortest-path costs by repeated relaxation (Bellman-Ford) on
/// an 8-connected grid. `cell_cost[i]` is `None` for blocked cells; entering
/// a free cell costs `step * resolution * (1 + cell_cost)`, and diagonal
/// moves need both orthogonal neighbors free.
pub fn grid_dp(
    width: usize,
    height: usize,
    resolution: f64,
    cell_cost: &[Option<f64>],
    start: (usize, usize),
) -> Vec<f64> {
    let idx = |x: usize, y: usize| y * width + x;
    let mut dist = vec![f64::INFINITY; width * height];
    dist[idx(start.0, start.1)] = 0.0;
    loop {
        let mut changed = false;
        for y in 0..height {
            for x in 0..width {
                let d = dist[idx(x, y)];
                if !d.is_finite() {
                    continue;
                }
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
                            continue;
                        }
                        let (nx, ny) = (nx as usize, ny as usize);
                        let Some(c) = cell_cost[idx(nx, ny)] else {
                            continue;
                        };
                        let diagonal = dx != 0 && dy != 0;
                        if diagonal
                            && (cell_cost[idx(nx, y)].is_none() || cell_cost[idx(x, ny)].is_none())
                        {
                            continue;
                        }
                        let step = if dx != 0 && dy != 0 { 2f64.sqrt() } else { 1.0 };
                        let nd = d + step * resolution * (1.0 + c);
                        if nd < dist[idx(nx, ny)] - 1e-12 {
                            dist[idx(nx, ny)] = nd;
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            return dist;
        }
    }
}

/// Axis-aligned box as `(min, max)`.
pub type Slab = ([f64; 3], [f64; 3]);

/// Ray parameter of the first intersection with a box, slab method.
pub fn ray_box(origin: [f64; 3], dir: [f64; 3], b: &Slab) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if dir[k].abs() < 1e-15 {
            if origin[k] < b.0[k] || origin[k] > b.1[k] {
                return None;
            }
            continue;
        }
        let a = (b.0[k] - origin[k]) / dir[k];
        let c = (b.1[k] - origin[k]) / dir[k];
        t0 = t0.max(a.min(c));
        t1 = t1.min(a.max(c));
    }
    if t1 < t0.max(0.0) {
        None
    } else {
        Some(t0.max(0.0))
    }
}

/// Pinhole view used by the occlusion oracle.
pub struct View {
    pub origin: [f64; 3],
    pub forward: [f64; 3],
    pub up: [f64; 3],
    pub h_fov: f64,
    pub v_fov: f64,
    pub near: f64,
    pub far: f64,
    pub width: usize,
    pub height: usize,
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Visible fraction of every box seen from `view`, by casting one ray per
/// pixel center. A pixel of box `k` is visible unless another box along the
/// same ray is nearer by more than `epsilon` (depth measured along the
/// view axis). Boxes never hit get `None`.
pub fn raycast_fractions(view: &View, boxes: &[Slab], epsilon: f64) -> Vec<Option<f64>> {
    let right = cross(view.forward, view.up);
    let fx = (view.width as f64 / 2.0) / (view.h_fov / 2.0).tan();
    let fy = (view.height as f64 / 2.0) / (view.v_fov / 2.0).tan();
    let (cx, cy) = (view.width as f64 / 2.0, view.height as f64 / 2.0);
    let mut total = vec![0usize; boxes.len()];
    let mut visible = vec![0usize; boxes.len()];
    for v in 0..view.height {
        for u in 0..view.width {
            let x = (u as f64 + 0.5 - cx) / fx;
            let y = -(v as f64 + 0.5 - cy) / fy;
            let mut dir = [0.0; 3];
            for k in 0..3 {
                dir[k] = view.forward[k] + right[k] * x + view.up[k] * y;
            }
            let depths: Vec<Option<f64>> = boxes
                .iter()
                .map(|b| {
                    let t = ray_box(view.origin, dir, b)?;
                    let z = t * dot(dir, view.forward);
                    (z >= view.near && z <= view.far).then_some(z)
                })
                .collect();
            for (k, dk) in depths.iter().enumerate() {
                let Some(dk) = dk else { continue };
                total[k] += 1;
                let nearest_other = depths
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != k)
                    .filter_map(|(_, d)| *d)
                    .fold(f64::INFINITY, f64::min);
                if *dk <= nearest_other + epsilon {
                    visible[k] += 1;
                }
            }
        }
    }
    total
        .iter()
        .zip(&visible)
        .map(|(&t, &v)| (t > 0).then(|| v as f64 / t as f64))
        .collect()
}

/// Precision, recall and F1 in percent from raw counts.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = 100.0 * tp as f64 / (tp + fp) as f64;
    let r = 100.0 * tp as f64 / (tp + fn_) as f64;
    (p, r, 2.0 * p * r / (p + r))
}

/// Largest matching size by trying every injective assignment.
pub fn brute_max_matching(candidates: &[Vec<usize>], right: usize) -> usize {
    fn go(i: usize, c: &[Vec<usize>], used: &mut Vec<bool>) -> usize {
        if i == c.len() {
            return 0;
        }
        let mut best = go(i + 1, c, used);
        for &r in &c[i] {
            if !used[r] {
                used[r] = true;
                best = best.max(1 + go(i + 1, c, used));
                used[r] = false;
            }
        }
        best
    }
    go(0, candidates, &mut vec![false; right])
}
