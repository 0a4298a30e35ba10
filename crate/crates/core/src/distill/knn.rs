//! Exact k-nearest-neighbour search on a uniform voxel grid.

/// The `k` nearest points of every point, itself included, sorted by
/// distance with ties broken by point index.
pub fn knn_indices(points: &[[f32; 3]], k: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    let k = k.min(n);
    if n == 0 || k == 0 {
        return vec![Vec::new(); n];
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a] as f64);
            hi[a] = hi[a].max(p[a] as f64);
        }
    }
    let extent: [f64; 3] = std::array::from_fn(|a| hi[a] - lo[a]);
    let max_extent = extent.iter().cloned().fold(0.0, f64::max);
    // cell edge sized for about k points per cell over the non-flat axes
    let active: Vec<f64> = extent.iter().copied().filter(|&e| e > max_extent * 1e-3).collect();
    let cell = if active.is_empty() {
        1.0
    } else {
        let measure: f64 = active.iter().product();
        (measure * k as f64 / n as f64).powf(1.0 / active.len() as f64).max(max_extent / 256.0)
    };
    let dims: [usize; 3] = std::array::from_fn(|a| ((extent[a] / cell).floor() as usize + 1).min(1 << 20));
    let key = |p: &[f32; 3]| -> [usize; 3] {
        std::array::from_fn(|a| (((p[a] as f64 - lo[a]) / cell).floor().max(0.0) as usize).min(dims[a] - 1))
    };
    let flat = |c: [usize; 3]| (c[2] * dims[1] + c[1]) * dims[0] + c[0];
    let n_cells = dims.iter().product::<usize>();
    let mut start = vec![0usize; n_cells + 1];
    let keys: Vec<usize> = points.iter().map(|p| flat(key(p))).collect();
    for &c in &keys {
        start[c + 1] += 1;
    }
    for i in 0..n_cells {
        start[i + 1] += start[i];
    }
    let mut fill = start.clone();
    let mut order = vec![0usize; n];
    for (i, &c) in keys.iter().enumerate() {
        order[fill[c]] = i;
        fill[c] += 1;
    }
    let max_ring = dims.iter().copied().max().unwrap();

    let mut out = Vec::with_capacity(n);
    let mut cand: Vec<(f64, usize)> = Vec::new();
    for q in points {
        let c = key(q);
        cand.clear();
        let mut r = 0usize;
        loop {
            let range = |a: usize| c[a].saturating_sub(r)..=(c[a] + r).min(dims[a] - 1);
            for z in range(2) {
                for y in range(1) {
                    for x in range(0) {
                        let ring = x.abs_diff(c[0]).max(y.abs_diff(c[1])).max(z.abs_diff(c[2]));
                        if ring != r {
                            continue;
                        }
                        let cell_id = flat([x, y, z]);
                        for &j in &order[start[cell_id]..start[cell_id + 1]] {
                            cand.push((dist2(q, &points[j]), j));
                        }
                    }
                }
            }
            let done = r >= max_ring;
            if cand.len() >= k || done {
                cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let covered = r as f64 * cell;
                if done || cand[k - 1].0 < covered * covered {
                    break;
                }
            }
            r += 1;
        }
        out.push(cand[..k].iter().map(|&(_, j)| j).collect());
    }
    out
}

fn dist2(a: &[f32; 3], b: &[f32; 3]) -> f64 {
    (0..3).map(|i| (a[i] as f64 - b[i] as f64).powi(2)).sum()
}

/// Quadratic reference used by tests.
pub fn knn_brute_force(points: &[[f32; 3]], k: usize) -> Vec<Vec<usize>> {
    let k = k.min(points.len());
    points
        .iter()
        .map(|q| {
            let mut d: Vec<(f64, usize)> = points.iter().enumerate().map(|(j, p)| (dist2(q, p), j)).collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d[..k].iter().map(|&(_, j)| j).collect()
        })
        .collect()
}
