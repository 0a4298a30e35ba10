//! SLIC super-pixels.
//!
//! Pixels are clustered in the joint (CIELAB, x, y) space with distance
//! `D² = d_lab² + (m/S)²·d_xy²`, where `m` is the compactness and
//! `S = sqrt(H·W/N)` the nominal segment spacing. Each assignment pass keeps
//! the pixel's current center among its candidates, so the total objective
//! `Σ D²` never increases from one iteration to the next.

use std::collections::{BTreeSet, VecDeque};

use crate::tensorio::Rgb8Image;
use crate::{Error, Result};

pub const DEFAULT_COMPACTNESS: f32 = 10.0;
pub const DEFAULT_ITERATIONS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlicParams {
    pub n_segments: usize,
    pub compactness: f32,
    pub iterations: usize,
}

impl SlicParams {
    pub fn new(n_segments: usize) -> Self {
        SlicParams {
            n_segments,
            compactness: DEFAULT_COMPACTNESS,
            iterations: DEFAULT_ITERATIONS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuperpixelMap {
    pub width: usize,
    pub height: usize,
    /// Row-major labels in `[0, n_segments)`.
    pub labels: Vec<i32>,
    pub n_segments: usize,
    /// Mean `(x, y)` pixel coordinate of each segment.
    pub centroids: Vec<[f32; 2]>,
}

impl SuperpixelMap {
    pub fn label(&self, x: usize, y: usize) -> i32 {
        self.labels[y * self.width + x]
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.n_segments];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Builds a map from dense labels, relabeling nothing.
    pub fn from_labels(width: usize, height: usize, labels: Vec<i32>) -> Result<Self> {
        if labels.len() != width * height || labels.is_empty() {
            return Err(Error::Argument("label map size mismatch".into()));
        }
        if labels.iter().any(|&l| l < 0) {
            return Err(Error::Argument("negative label in superpixel map".into()));
        }
        let n = labels.iter().copied().max().unwrap() as usize + 1;
        let centroids = centroids_of(width, &labels, n);
        Ok(SuperpixelMap { width, height, labels, n_segments: n, centroids })
    }
}

fn centroids_of(width: usize, labels: &[i32], n: usize) -> Vec<[f32; 2]> {
    let mut acc = vec![[0.0f64; 3]; n];
    for (i, &l) in labels.iter().enumerate() {
        let a = &mut acc[l as usize];
        a[0] += (i % width) as f64;
        a[1] += (i / width) as f64;
        a[2] += 1.0;
    }
    acc.iter()
        .map(|a| {
            if a[2] > 0.0 {
                [(a[0] / a[2]) as f32, (a[1] / a[2]) as f32]
            } else {
                [f32::NAN, f32::NAN]
            }
        })
        .collect()
}

/// sRGB (D65) to CIELAB.
pub fn rgb_to_lab(rgb: [u8; 3]) -> [f32; 3] {
    fn linearize(c: u8) -> f64 {
        let c = c as f64 / 255.0;
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    }
    fn f(t: f64) -> f64 {
        const EPS: f64 = 216.0 / 24389.0;
        const KAPPA: f64 = 24389.0 / 27.0;
        if t > EPS {
            t.cbrt()
        } else {
            (KAPPA * t + 16.0) / 116.0
        }
    }
    let (r, g, b) = (linearize(rgb[0]), linearize(rgb[1]), linearize(rgb[2]));
    let x = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883;
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [
        (116.0 * fy - 16.0) as f32,
        (500.0 * (fx - fy)) as f32,
        (200.0 * (fy - fz)) as f32,
    ]
}

/// Seed grid `(columns, rows)` whose cell count is closest to `n`, then whose
/// cells are closest to square, then with more columns.
fn seed_grid(width: usize, height: usize, n: usize) -> (usize, usize) {
    let mut best = (1usize, 1usize);
    let mut best_key = (usize::MAX, f64::INFINITY, 0usize);
    for nx in 1..=n.min(width) {
        let ny = ((n as f64 / nx as f64).round() as usize).clamp(1, height);
        let count_err = (nx * ny).abs_diff(n);
        let aspect = ((width as f64 / nx as f64) / (height as f64 / ny as f64)).ln().abs();
        let key = (count_err, aspect, usize::MAX - nx);
        let better = key.0 < best_key.0
            || (key.0 == best_key.0 && key.1 < best_key.1 - 1e-12)
            || (key.0 == best_key.0 && (key.1 - best_key.1).abs() <= 1e-12 && key.2 < best_key.2);
        if better {
            best = (nx, ny);
            best_key = key;
        }
    }
    best
}

#[derive(Clone, Copy, Debug)]
struct Center {
    lab: [f32; 3],
    x: f32,
    y: f32,
}

/// Result of a SLIC run together with the objective after every iteration.
#[derive(Clone, Debug)]
pub struct SlicTrace {
    pub map: SuperpixelMap,
    /// `Σ D²` after each assignment+update iteration.
    pub objective: Vec<f64>,
    /// Number of seeds placed on the grid.
    pub seeds: usize,
}

pub fn slic(image: &Rgb8Image, params: &SlicParams) -> Result<SuperpixelMap> {
    Ok(slic_with_trace(image, params)?.map)
}

pub fn slic_with_trace(image: &Rgb8Image, params: &SlicParams) -> Result<SlicTrace> {
    let (w, h) = (image.width, image.height);
    let npix = w * h;
    let n = params.n_segments;
    if n == 0 || n > npix {
        return Err(Error::Argument(format!(
            "n_segments must be in [1, {npix}], got {n}"
        )));
    }
    if !(params.compactness > 0.0) {
        return Err(Error::Argument("compactness must be positive".into()));
    }
    let lab: Vec<[f32; 3]> = image.data.chunks_exact(3).map(|c| rgb_to_lab([c[0], c[1], c[2]])).collect();
    let spacing = (npix as f64 / n as f64).sqrt();
    let (nx, ny) = seed_grid(w, h, n);
    let cell_w = w as f64 / nx as f64;
    let cell_h = h as f64 / ny as f64;

    let grad = |x: usize, y: usize| -> f32 {
        let at = |xx: usize, yy: usize| lab[yy * w + xx];
        let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
        let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
        let d = |a: [f32; 3], b: [f32; 3]| -> f32 { (0..3).map(|k| (a[k] - b[k]).powi(2)).sum() };
        d(at(xr, y), at(xl, y)) + d(at(x, yd), at(x, yu))
    };

    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            // continuous cell center in pixel-center coordinates
            let fx = ((i as f64 + 0.5) * cell_w - 0.5) as f32;
            let fy = ((j as f64 + 0.5) * cell_h - 0.5) as f32;
            let cx = (fx.round().max(0.0) as usize).min(w - 1);
            let cy = (fy.round().max(0.0) as usize).min(h - 1);
            let (mut bx, mut by, mut bg) = (cx, cy, grad(cx, cy));
            let mut moved = false;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (xx, yy) = (cx as i64 + dx, cy as i64 + dy);
                    if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                        continue;
                    }
                    let g = grad(xx as usize, yy as usize);
                    if g < bg {
                        (bx, by, bg) = (xx as usize, yy as usize, g);
                        moved = true;
                    }
                }
            }
            let (x, y) = if moved { (bx as f32, by as f32) } else { (fx, fy) };
            centers.push(Center { lab: lab[by * w + bx], x, y });
        }
    }
    let seeds = centers.len();

    let spatial_w = (params.compactness as f64 / spacing).powi(2) as f32;
    let dist2 = |c: &Center, p: usize| -> f32 {
        let l = lab[p];
        let (px, py) = ((p % w) as f32, (p / w) as f32);
        let dl = (l[0] - c.lab[0]).powi(2) + (l[1] - c.lab[1]).powi(2) + (l[2] - c.lab[2]).powi(2);
        dl + spatial_w * ((px - c.x).powi(2) + (py - c.y).powi(2))
    };
    let radius = spacing.max(cell_w / 2.0 + 2.0).max(cell_h / 2.0 + 2.0).ceil() as i64;

    let mut labels = vec![-1i32; npix];
    let mut dist = vec![f32::INFINITY; npix];
    let mut objective = Vec::with_capacity(params.iterations);
    for _ in 0..params.iterations.max(1) {
        for p in 0..npix {
            dist[p] = match labels[p] {
                -1 => f32::INFINITY,
                l => dist2(&centers[l as usize], p),
            };
        }
        for (k, c) in centers.iter().enumerate() {
            let (x0, x1) = ((c.x as i64 - radius).max(0), (c.x as i64 + radius).min(w as i64 - 1));
            let (y0, y1) = ((c.y as i64 - radius).max(0), (c.y as i64 + radius).min(h as i64 - 1));
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = y as usize * w + x as usize;
                    let d = dist2(c, p);
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = k as i32;
                    }
                }
            }
        }
        // pixels outside every window fall back to a full search
        for p in 0..npix {
            if labels[p] < 0 {
                let (k, d) = centers
                    .iter()
                    .enumerate()
                    .map(|(k, c)| (k, dist2(c, p)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap();
                labels[p] = k as i32;
                dist[p] = d;
            }
        }
        let mut acc = vec![[0.0f64; 6]; centers.len()];
        for p in 0..npix {
            let a = &mut acc[labels[p] as usize];
            let l = lab[p];
            a[0] += l[0] as f64;
            a[1] += l[1] as f64;
            a[2] += l[2] as f64;
            a[3] += (p % w) as f64;
            a[4] += (p / w) as f64;
            a[5] += 1.0;
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a[5] > 0.0 {
                c.lab = [(a[0] / a[5]) as f32, (a[1] / a[5]) as f32, (a[2] / a[5]) as f32];
                c.x = (a[3] / a[5]) as f32;
                c.y = (a[4] / a[5]) as f32;
            }
        }
        let total: f64 = (0..npix).map(|p| dist2(&centers[labels[p] as usize], p) as f64).sum();
        objective.push(total);
    }

    let min_size = (npix as f64 / seeds as f64 / 4.0).floor() as usize;
    let map = enforce_connectivity_with(w, h, &labels, min_size)?;
    Ok(SlicTrace { map, objective, seeds })
}

/// Splits every label into 4-connected segments and merges segments smaller
/// than `(H·W/N)/4` into their largest neighbor, `N` being the number of
/// distinct input labels.
pub fn enforce_connectivity(width: usize, height: usize, labels: &[i32]) -> Result<SuperpixelMap> {
    if labels.len() != width * height || labels.is_empty() {
        return Err(Error::Argument("label map size mismatch".into()));
    }
    let distinct: BTreeSet<i32> = labels.iter().copied().collect();
    let min_size = (labels.len() as f64 / distinct.len() as f64 / 4.0).floor() as usize;
    enforce_connectivity_with(width, height, labels, min_size)
}

fn enforce_connectivity_with(
    width: usize,
    height: usize,
    labels: &[i32],
    min_size: usize,
) -> Result<SuperpixelMap> {
    let npix = width * height;
    // 1. connected components
    let mut comp = vec![usize::MAX; npix];
    let mut comp_label = Vec::new();
    let mut comp_first = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..npix {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = comp_label.len();
        comp_label.push(labels[start]);
        comp_first.push(start);
        comp[start] = id;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (x, y) = (p % width, p / width);
            for q in neighbors4(x, y, width, height) {
                if comp[q] == usize::MAX && labels[q] == labels[start] {
                    comp[q] = id;
                    queue.push_back(q);
                }
            }
        }
    }
    let ncomp = comp_label.len();
    let mut size = vec![0usize; ncomp];
    for &c in &comp {
        size[c] += 1;
    }
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); ncomp];
    for p in 0..npix {
        let (x, y) = (p % width, p / width);
        for q in neighbors4(x, y, width, height) {
            if comp[q] != comp[p] {
                adj[comp[p]].insert(comp[q]);
            }
        }
    }

    // 2. merge small components into their largest adjacent component
    let mut parent: Vec<usize> = (0..ncomp).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut order: Vec<usize> = (0..ncomp).collect();
    order.sort_by_key(|&c| (size[c], c));
    loop {
        let mut changed = false;
        for &c in &order {
            let r = find(&mut parent, c);
            if size[r] >= min_size {
                continue;
            }
            let mut best: Option<usize> = None;
            let neigh: Vec<usize> = adj[r].iter().copied().collect();
            for nb in neigh {
                let nr = find(&mut parent, nb);
                if nr == r {
                    continue;
                }
                best = match best {
                    Some(b) if size[b] > size[nr] || (size[b] == size[nr] && b < nr) => Some(b),
                    _ => Some(nr),
                };
            }
            if let Some(target) = best {
                parent[r] = target;
                size[target] += size[r];
                let moved = std::mem::take(&mut adj[r]);
                adj[target].extend(moved);
                comp_first[target] = comp_first[target].min(comp_first[r]);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    // 3. compact relabel ordered by (original label, first pixel)
    let mut roots: Vec<usize> = (0..ncomp).filter(|&c| find(&mut parent, c) == c).collect();
    roots.sort_by_key(|&r| (comp_label[r], comp_first[r]));
    let mut new_id = vec![0i32; ncomp];
    for (i, &r) in roots.iter().enumerate() {
        new_id[r] = i as i32;
    }
    let out: Vec<i32> = comp.iter().map(|&c| new_id[find(&mut parent, c)]).collect();
    let n = roots.len();
    let centroids = centroids_of(width, &out, n);
    Ok(SuperpixelMap { width, height, labels: out, n_segments: n, centroids })
}

fn neighbors4(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let mut v = [usize::MAX; 4];
    if x > 0 {
        v[0] = y * w + x - 1;
    }
    if x + 1 < w {
        v[1] = y * w + x + 1;
    }
    if y > 0 {
        v[2] = (y - 1) * w + x;
    }
    if y + 1 < h {
        v[3] = (y + 1) * w + x;
    }
    v.into_iter().filter(|&i| i != usize::MAX)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Flood-fill oracle: number of 4-connected components of one label.
    fn components_of(w: usize, h: usize, labels: &[i32], label: i32) -> usize {
        let mut seen = vec![false; labels.len()];
        let mut count = 0;
        for s in 0..labels.len() {
            if labels[s] != label || seen[s] {
                continue;
            }
            count += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(p) = stack.pop() {
                for q in neighbors4(p % w, p / w, w, h) {
                    if !seen[q] && labels[q] == label {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        count
    }

    fn assert_partition(map: &SuperpixelMap) {
        let hist = map.histogram();
        assert_eq!(hist.iter().sum::<usize>(), map.width * map.height);
        assert!(hist.iter().all(|&c| c > 0), "label gap: {hist:?}");
        for l in 0..map.n_segments as i32 {
            assert_eq!(components_of(map.width, map.height, &map.labels, l), 1, "label {l}");
        }
    }

    #[test]
    fn lab_reference_points() {
        let white = rgb_to_lab([255, 255, 255]);
        assert!((white[0] - 100.0).abs() < 1e-3 && white[1].abs() < 1e-2 && white[2].abs() < 1e-2);
        assert_eq!(rgb_to_lab([0, 0, 0]), [0.0, 0.0, 0.0]);
        let red = rgb_to_lab([255, 0, 0]);
        assert!((red[0] - 53.24).abs() < 0.05 && (red[1] - 80.09).abs() < 0.05 && (red[2] - 67.20).abs() < 0.05);
    }

    #[test]
    fn seed_grid_prefers_exact_counts() {
        assert_eq!(seed_grid(64, 64, 4), (2, 2));
        assert_eq!(seed_grid(64, 64, 2), (2, 1));
        assert_eq!(seed_grid(640, 480, 50), (10, 5));
        assert_eq!(seed_grid(10, 10, 1), (1, 1));
    }

    #[test]
    fn constant_image_four_cells() {
        let img = Rgb8Image::filled(64, 64, [90, 120, 30]);
        let map = slic(&img, &SlicParams::new(4)).unwrap();
        assert_eq!(map.n_segments, 4);
        assert_partition(&map);
        // oracle: spatial-only k-means on the grid converges to the four quadrants
        for y in 0..64 {
            for x in 0..64 {
                let q = (y / 32) * 2 + x / 32;
                assert_eq!(map.label(x, y), q as i32);
            }
        }
    }

    #[test]
    fn single_segment() {
        let img = Rgb8Image::filled(17, 9, [1, 2, 3]);
        let map = slic(&img, &SlicParams::new(1)).unwrap();
        assert_eq!(map.n_segments, 1);
        assert!(map.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn too_many_segments_is_argument_error() {
        let img = Rgb8Image::filled(4, 4, [0, 0, 0]);
        assert!(matches!(slic(&img, &SlicParams::new(17)), Err(Error::Argument(_))));
        assert!(matches!(slic(&img, &SlicParams::new(0)), Err(Error::Argument(_))));
    }

    #[test]
    fn objective_non_increasing_on_noise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data = (0..48 * 40 * 3).map(|_| rng.gen::<u8>()).collect();
        let img = Rgb8Image::new(48, 40, data).unwrap();
        let trace = slic_with_trace(&img, &SlicParams::new(12)).unwrap();
        for w in trace.objective.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-6), "{:?}", trace.objective);
        }
        assert_partition(&trace.map);
    }

    #[test]
    fn deterministic() {
        let mut img = Rgb8Image::filled(40, 30, [10, 10, 10]);
        for y in 0..30 {
            for x in 20..40 {
                img.put(x, y, [200, (x * 5) as u8, (y * 7) as u8]);
            }
        }
        let a = slic(&img, &SlicParams::new(9)).unwrap();
        let b = slic(&img, &SlicParams::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn connected_map_unchanged() {
        let labels: Vec<i32> = (0..8 * 6).map(|i| if i % 8 < 4 { 0 } else { 1 }).collect();
        let map = enforce_connectivity(8, 6, &labels).unwrap();
        assert_eq!(map.labels, labels);
        assert_eq!(map.n_segments, 2);
    }

    #[test]
    fn orphan_island_absorbed() {
        let mut labels = vec![0i32; 10 * 10];
        for x in 5..10 {
            for y in 0..10 {
                labels[y * 10 + x] = 1;
            }
        }
        // two-pixel island of label 1 inside label 0
        labels[2 * 10 + 1] = 1;
        labels[2 * 10 + 2] = 1;
        let map = enforce_connectivity(10, 10, &labels).unwrap();
        assert_eq!(map.n_segments, 2);
        assert_eq!(map.label(1, 2), 0);
        assert_eq!(map.label(2, 2), 0);
        assert_partition(&map);
    }

    #[test]
    fn checkerboard_becomes_connected() {
        let (w, h) = (8, 8);
        let labels: Vec<i32> = (0..w * h).map(|i| (((i % w) + (i / w)) % 2) as i32).collect();
        let map = enforce_connectivity(w, h, &labels).unwrap();
        assert_partition(&map);
        // oracle: count segments by flood fill over the output
        let total: usize = (0..map.n_segments as i32)
            .map(|l| components_of(w, h, &map.labels, l))
            .sum();
        assert_eq!(total, map.n_segments);
    }
}
