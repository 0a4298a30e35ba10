//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Oracles are written here independently of the library code.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use featlift::distill::{
    cosine_distance, distill_loss, distill_loss_grad, finite_diff_check, train, PointBatch, PointNetObjective,
    PointNetParams, TrainSchedule, TrainingScene,
};
use featlift::features::FeatureMap;
use featlift::metrics::hiou;
use featlift::openvocab::PseudoLabelDomain;
use featlift::pipeline::{self, FeatureSource, PipelineConfig, Workspace};
use featlift::projection::{compute_visibility, fuse_multiview, TargetFeatures};
use featlift::regions::{generate_crops, stitch_and_fuse, CropSpec};
use featlift::superpixel::{slic, slic_with_trace, SlicParams, SuperpixelMap};
use featlift::synthetic::{planted_scene, PlantedSceneConfig};
use featlift::tensorio::{Frame, PointCloud, Rgb8Image};
use featlift::vit_local::{forward_tokens, local_attention, Activation, EncoderInput, ViTConfig, ViTWeights};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed <= Duration::from_secs(limit_s), || format!("took {elapsed:.1?}, limit {limit_s} s"))
}

fn toy_config(patch: usize, heads: usize, layers: usize, activation: Activation, ln_pre: bool) -> ViTConfig {
    ViTConfig {
        image_size: 32,
        patch_size: patch,
        width: 16,
        heads,
        layers,
        embed_dim: 8,
        mlp_dim: 32,
        ln_eps: 1e-5,
        activation,
        ln_pre,
    }
}

fn random_input(size: usize, rng: &mut ChaCha8Rng) -> EncoderInput {
    let mut input = EncoderInput::zeros(size);
    input.data.iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
    input
}

fn random_set(m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut set: Vec<usize> = (0..m).filter(|_| rng.gen_bool(0.3)).collect();
    if set.is_empty() {
        set.push(rng.gen_range(0..m));
    }
    set
}

fn non_interference() -> Outcome {
    let started = Instant::now();
    let configs = [
        toy_config(8, 2, 3, Activation::QuickGelu, true),
        toy_config(4, 4, 2, Activation::GeluTanh, false),
    ];
    let mut compared = 0usize;
    for (ci, cfg) in configs.into_iter().enumerate() {
        let m = cfg.num_patches();
        for seed in 0..3u64 {
            let w = ViTWeights::random(cfg.clone(), 100 * ci as u64 + seed).map_err(|e| e.to_string())?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = random_input(32, &mut rng);
            let (_, base) = forward_tokens(&input, &[], &w, true).map_err(|e| e.to_string())?;
            for n in [1usize, 5, 50] {
                let sets: Vec<Vec<usize>> = (0..n).map(|_| random_set(m, &mut rng)).collect();
                let (_, with) = forward_tokens(&input, &sets, &w, true).map_err(|e| e.to_string())?;
                ensure(with.len() == base.len(), || "layer count differs".into())?;
                for (layer, (a, b)) in base.iter().zip(&with).enumerate() {
                    let same = a.main.len() == b.main.len()
                        && a.main.iter().zip(&b.main).all(|(x, y)| x.to_bits() == y.to_bits());
                    ensure(same, || format!("config {ci} seed {seed} N={n}: layer {layer} differs"))?;
                    compared += 1;
                }
            }
        }
    }
    within(started.elapsed(), 10)?;
    Ok(format!("{compared} layer states bit-identical for N in {{1, 5, 50}} in {:.2?}", started.elapsed()))
}

/// Softmax attention of one query over the listed rows, in f64.
fn attention_oracle(q: &[f32], k: &[f32], v: &[f32], set: &[usize], heads: usize) -> Vec<f64> {
    let d = q.len();
    let dh = d / heads;
    let mut out = vec![0.0f64; d];
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        let scores: Vec<f64> = set
            .iter()
            .map(|&j| {
                let kj = &k[j * d..(j + 1) * d];
                r.clone().map(|c| q[c] as f64 * kj[c] as f64).sum::<f64>() / (dh as f64).sqrt()
            })
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = e.iter().sum();
        for (ej, &j) in e.iter().zip(set) {
            for c in r.clone() {
                out[c] += ej / z * v[j * d + c] as f64;
            }
        }
    }
    out
}

fn local_attention_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    let fixtures = 150;
    for f in 0..fixtures {
        let heads = [1usize, 2, 3, 4][f % 4];
        let d = heads * rng.gen_range(1..=8);
        let t = rng.gen_range(1..=60);
        let q: Vec<f32> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let k: Vec<f32> = (0..t * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let v: Vec<f32> = (0..t * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let set = random_set(t, &mut rng);
        let got = local_attention(&q, &k, &v, &set, heads).map_err(|e| e.to_string())?;
        let want = attention_oracle(&q, &k, &v, &set, heads);
        for (g, w) in got.output.iter().zip(&want) {
            worst = worst.max((*g as f64 - w).abs());
        }
    }
    ensure(worst <= 1e-5, || format!("max abs error {worst:.3e}"))?;
    Ok(format!("{fixtures} fixtures, max abs error {worst:.2e}"))
}

fn targets_from(rows: &[Vec<f32>], mask: &[bool]) -> TargetFeatures {
    let c = rows[0].len();
    let feats = rows.iter().zip(mask).flat_map(|(r, &m)| r.iter().map(move |&v| if m { v } else { 0.0 })).collect();
    TargetFeatures::from_parts(c, feats, mask.iter().map(|&m| m as u32).collect()).unwrap()
}

fn masked_mean_oracle(learned: &[f32], rows: &[Vec<f32>], mask: &[bool]) -> f64 {
    let c = rows[0].len();
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (i, row) in rows.iter().enumerate().filter(|(i, _)| mask[*i]) {
        n += 1;
        let f = &learned[i * c..(i + 1) * c];
        let dot: f64 = f.iter().zip(row).map(|(a, b)| *a as f64 * *b as f64).sum();
        let nf = f.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
        let nt = row.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
        if nf > 0.0 && nt > 0.0 {
            sum -= dot / (nf * nt);
        }
    }
    sum / n as f64
}

fn loss_suite() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    for _ in 0..500 {
        let c = rng.gen_range(1..16);
        let a: Vec<f64> = (0..c).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..c).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let d = cosine_distance(&a, &b).ok_or("unexpected zero norm")?;
        ensure((-1.0..=1.0).contains(&d), || format!("distance {d} outside [-1, 1]"))?;
        for alpha in [1e-3, 0.5, 7.0, 1e4] {
            let scaled: Vec<f64> = a.iter().map(|x| x * alpha).collect();
            let ds = cosine_distance(&scaled, &b).unwrap();
            ensure((ds - d).abs() <= 1e-12, || format!("scale {alpha}: {ds} vs {d}"))?;
        }
        let same = cosine_distance(&a, &a).unwrap();
        ensure((same + 1.0).abs() <= 1e-12, || format!("identity gives {same}"))?;
    }

    let mut worst = 0.0f64;
    for trial in 0..50 {
        let (n, c) = (rng.gen_range(2..60), rng.gen_range(1..12));
        let mut rows: Vec<Vec<f32>> = (0..n).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
        mask[0] = true;
        let mut learned: Vec<f32> = (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        if trial % 3 == 0 {
            learned[..c].fill(0.0);
            rows[n - 1].fill(0.0);
        }
        let t = targets_from(&rows, &mask);
        let got = distill_loss(&learned, &t).map_err(|e| e.to_string())?.loss as f64;
        worst = worst.max((got - masked_mean_oracle(&learned, &rows, &mask)).abs());
        let id = distill_loss(&t.features, &t).map_err(|e| e.to_string())?;
        let expected = -((t.num_valid() - id.degenerate) as f64) / t.num_valid() as f64;
        ensure((id.loss as f64 - expected).abs() <= 1e-6, || format!("identity loss {} vs {expected}", id.loss))?;
    }
    ensure(worst <= 1e-6, || format!("masked mean off by {worst:.2e}"))?;

    // loss gradient wrt learned features
    let rows: Vec<Vec<f32>> = (0..6).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let t = targets_from(&rows, &[true, true, false, true, true, true]);
    let f: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, g) = distill_loss_grad(&f, &t).map_err(|e| e.to_string())?;
    let mut loss_rel = 0.0f64;
    for i in 0..f.len() {
        let mut p = f.clone();
        p[i] += 1e-6;
        let up = distill_loss(&p, &t).unwrap().loss;
        p[i] -= 2e-6;
        let down = distill_loss(&p, &t).unwrap().loss;
        let num = (up - down) / 2e-6;
        if num.abs() > 1e-7 || g[i].abs() > 1e-7 {
            loss_rel = loss_rel.max((g[i] - num).abs() / num.abs().max(1e-8));
        }
    }
    ensure(loss_rel < 1e-4, || format!("loss gradient relative error {loss_rel:.2e}"))?;

    // every layer type of the point network
    let mut worst_fd = 0.0f64;
    let mut per_group: Vec<(String, f64)> = Vec::new();
    for seed in 0..5u64 {
        let n = 40;
        let positions: Vec<[f32; 3]> = (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..0.5)]).collect();
        let colors: Vec<[u8; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let cloud = PointCloud::new(positions, Some(colors)).unwrap();
        let batch = PointBatch::<f32>::from_cloud(&cloud, 6).map_err(|e| e.to_string())?;
        let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mask: Vec<bool> = (0..n).map(|i| i % 5 != 0).collect();
        let params = PointNetParams::init(12, 4, 6, seed);
        let mut obj = PointNetObjective::new(&params, &batch, targets_from(&rows, &mask));
        let report = finite_diff_check(&mut obj, 600, seed);
        ensure(report.groups.iter().all(|g| g.probes > 0), || "a parameter group was never probed".into())?;
        for g in &report.groups {
            match per_group.iter_mut().find(|(n, _)| *n == g.name) {
                Some(e) => e.1 = e.1.max(g.max_rel_error),
                None => per_group.push((g.name.clone(), g.max_rel_error)),
            }
        }
        worst_fd = worst_fd.max(report.max_rel_error);
    }
    let groups: Vec<String> = per_group.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    ensure(worst_fd < 1e-4, || format!("finite differences: {}", groups.join(", ")))?;

    within(started.elapsed(), 30)?;
    Ok(format!(
        "bounds, scale invariance, identity; masked mean within {worst:.1e}; grad rel err {:.1e} ({}) in {:.2?}",
        worst_fd.max(loss_rel),
        groups.join(", "),
        started.elapsed()
    ))
}

/// Pixel sample of one (point, view) pair, computed from first principles.
struct OraclePair {
    visible: bool,
    in_bounds: bool,
    feature_px: (usize, usize),
}

fn oracle_pair(p: [f32; 3], frame: &Frame, fmap: &FeatureMap, tau: f64) -> OraclePair {
    let m = frame.pose.0;
    let t = [m[0][3] as f64, m[1][3] as f64, m[2][3] as f64];
    let d = [p[0] as f64 - t[0], p[1] as f64 - t[1], p[2] as f64 - t[2]];
    // rigid pose: world to camera is Rᵀ(p − t)
    let c: [f64; 3] = std::array::from_fn(|j| (0..3).map(|i| m[i][j] as f64 * d[i]).sum());
    let hidden = OraclePair { visible: false, in_bounds: false, feature_px: (0, 0) };
    if c[2] <= 1e-6 {
        return hidden;
    }
    let k = &frame.intrinsics;
    let u = k.fx as f64 * c[0] / c[2] + k.cx as f64;
    let v = k.fy as f64 * c[1] / c[2] + k.cy as f64;
    let (x, y) = (u.round(), v.round());
    let (w, h) = (frame.depth.width as f64, frame.depth.height as f64);
    if x < 0.0 || y < 0.0 || x >= w || y >= h {
        return hidden;
    }
    let raw = frame.depth.raw(x as usize, y as usize);
    let visible = raw != 0 && (c[2] - raw as f64 / 1000.0).abs() <= tau;
    let fx = ((u + 0.5) * fmap.width as f64 / w - 0.5).round().clamp(0.0, fmap.width as f64 - 1.0) as usize;
    let fy = ((v + 0.5) * fmap.height as f64 / h - 0.5).round().clamp(0.0, fmap.height as f64 - 1.0) as usize;
    OraclePair { visible, in_bounds: true, feature_px: (fx, fy) }
}

fn random_map(w: usize, h: usize, c: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
    FeatureMap::new(w, h, c, (0..w * h * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn projection_oracle() -> Outcome {
    let scene = planted_scene(&PlantedSceneConfig::default()).map_err(|e| e.to_string())?;
    let points = &scene.cloud.positions;
    ensure(points.len() >= 1000, || format!("only {} points", points.len()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = 6;
    let maps: Vec<FeatureMap> = scene
        .frames
        .iter()
        .map(|f| random_map(f.depth.width / 2, f.depth.height / 2, c, &mut rng))
        .collect();
    let views: Vec<(&Frame, &FeatureMap)> = scene.frames.iter().zip(&maps).collect();
    let taus = [0.01f32, 0.05, 0.1, 0.5];
    let mut occluded = 0usize;
    let mut worst = 0.0f64;
    let mut prev: Option<(Vec<Vec<bool>>, TargetFeatures)> = None;
    for &tau in &taus {
        let got = fuse_multiview(points, &views, tau).map_err(|e| e.to_string())?;
        let mut vis = Vec::new();
        let mut sums = vec![0.0f64; points.len() * c];
        let mut counts = vec![0u32; points.len()];
        for (frame, fmap) in &views {
            let lib = compute_visibility(points, frame, tau).map_err(|e| e.to_string())?;
            let mut flags = Vec::with_capacity(points.len());
            for (i, &p) in points.iter().enumerate() {
                let o = oracle_pair(p, frame, fmap, tau as f64);
                ensure(lib[i].valid == o.visible, || format!("tau {tau} frame {} point {i}: visibility differs", frame.id))?;
                if o.in_bounds && !o.visible && tau == 0.1 {
                    occluded += 1;
                }
                if o.visible {
                    counts[i] += 1;
                    let f = fmap.at(o.feature_px.0, o.feature_px.1);
                    for k in 0..c {
                        sums[i * c + k] += f[k] as f64;
                    }
                }
                flags.push(o.visible);
            }
            vis.push(flags);
        }
        ensure(got.view_count == counts, || format!("tau {tau}: view counts differ from oracle"))?;
        for i in 0..points.len() {
            for k in 0..c {
                let want = if counts[i] > 0 { sums[i * c + k] / counts[i] as f64 } else { 0.0 };
                worst = worst.max((got.features[i * c + k] as f64 - want).abs());
            }
        }
        if let Some((pv, pt)) = &prev {
            let nested = pv.iter().zip(&vis).all(|(a, b)| a.iter().zip(b).all(|(&x, &y)| !x || y));
            ensure(nested, || format!("visible pairs at smaller tau are not kept at {tau}"))?;
            ensure(pt.view_count.iter().zip(&got.view_count).all(|(a, b)| a <= b), || "view counts shrink".into())?;
        }
        prev = Some((vis, got));
    }
    ensure(worst <= 1e-6, || format!("feature error {worst:.2e}"))?;
    ensure(occluded > 0, || "no occluded pairs in the rig".into())?;
    Ok(format!(
        "{} points, 3 views, {occluded} occluded pairs; visibility exact, features within {worst:.1e}; monotone over {taus:?}",
        points.len()
    ))
}

fn crop_schedule() -> Outcome {
    let crops = generate_crops(640, 480, &[1.0, 0.5, 0.25], 0.5).map_err(|e| e.to_string())?;
    let mut covered = vec![false; 640 * 480];
    for c in &crops {
        ensure(c.x0 + c.w <= 640 && c.y0 + c.h <= 480, || format!("{c:?} leaves the view"))?;
        for y in c.y0..c.y0 + c.h {
            covered[y * 640 + c.x0..y * 640 + c.x0 + c.w].fill(true);
        }
    }
    ensure(crops.len() == 59, || format!("{} crops", crops.len()))?;
    ensure(covered.iter().all(|&c| c), || "view not fully covered".into())?;
    let per_scale: Vec<usize> = (0..3).map(|s| crops.iter().filter(|c| c.scale_level == s).count()).collect();
    Ok(format!("59 crops ({per_scale:?} per scale) covering 640x480"))
}

fn fusion_identities() -> Outcome {
    let crops = generate_crops(640, 480, &[1.0, 0.5, 0.25], 0.5).map_err(|e| e.to_string())?;
    let value = [0.1f32, -3.7, 1e-3, 12345.678, f32::MIN_POSITIVE];
    let maps: Vec<(CropSpec, FeatureMap)> = crops.iter().map(|&c| (c, FeatureMap::constant(c.w, c.h, &value))).collect();
    let fused = stitch_and_fuse(&maps, 640, 480).map_err(|e| e.to_string())?;
    let exact = fused.data.chunks(value.len()).all(|p| p.iter().zip(&value).all(|(a, b)| a.to_bits() == b.to_bits()));
    ensure(exact, || "constant not reproduced".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a: Vec<f32> = (0..3).map(|_| rng.gen_range(-10.0..10.0)).collect();
    let b: Vec<f32> = (0..3).map(|_| rng.gen_range(-10.0..10.0)).collect();
    let ca = CropSpec { x0: 0, y0: 0, w: 64, h: 32, scale_level: 0 };
    let cb = CropSpec { x0: 32, y0: 0, w: 64, h: 32, scale_level: 0 };
    let fused = stitch_and_fuse(&[(ca, FeatureMap::constant(64, 32, &a)), (cb, FeatureMap::constant(64, 32, &b))], 96, 32)
        .map_err(|e| e.to_string())?;
    let mean: Vec<f32> = a.iter().zip(&b).map(|(x, y)| ((*x as f64 + *y as f64) / 2.0) as f32).collect();
    for y in 0..32 {
        for x in 0..96 {
            let want: &[f32] = if x < 32 { &a } else if x < 64 { &mean } else { &b };
            ensure(fused.at(x, y) == want, || format!("pixel ({x}, {y}): {:?} vs {want:?}", fused.at(x, y)))?;
        }
    }
    Ok("constant exact over 59 crops; two-crop overlap is the exact mean".into())
}

fn components(map: &SuperpixelMap, label: i32) -> usize {
    let (w, h) = (map.width, map.height);
    let mut seen = vec![false; w * h];
    let mut count = 0;
    for start in 0..w * h {
        if seen[start] || map.labels[start] != label {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            let mut nb = Vec::with_capacity(4);
            if x > 0 { nb.push(p - 1) }
            if x + 1 < w { nb.push(p + 1) }
            if y > 0 { nb.push(p - w) }
            if y + 1 < h { nb.push(p + w) }
            for q in nb {
                if !seen[q] && map.labels[q] == label {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
    }
    count
}

fn boundary(w: usize, h: usize, label: impl Fn(usize, usize) -> i32) -> Vec<bool> {
    let mut b = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let l = label(x, y);
            b[y * w + x] = (x + 1 < w && label(x + 1, y) != l) || (y + 1 < h && label(x, y + 1) != l);
        }
    }
    b
}

fn slic_checks() -> Outcome {
    let img = Rgb8Image::filled(64, 64, [90, 140, 200]);
    let map = slic(&img, &SlicParams::new(4)).map_err(|e| e.to_string())?;
    let hist = map.histogram();
    ensure(map.n_segments == 4, || format!("{} segments", map.n_segments))?;
    let target = 64.0 * 64.0 / 4.0;
    for (l, &area) in hist.iter().enumerate() {
        ensure((area as f64 - target).abs() <= 0.1 * target, || format!("cell {l} has area {area}"))?;
        ensure(components(&map, l as i32) == 1, || format!("cell {l} is not contiguous"))?;
    }

    let (w, h) = (120, 90);
    let side = |x: usize, y: usize| (2 * x + y < 150) as i32;
    let mut two = Rgb8Image::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            two.put(x, y, if side(x, y) == 1 { [220, 40, 40] } else { [30, 60, 200] });
        }
    }
    let seg = slic(&two, &SlicParams::new(50)).map_err(|e| e.to_string())?;
    let gt_b = boundary(w, h, side);
    let sp_b = boundary(w, h, |x, y| seg.label(x, y));
    let (mut hit, mut total) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if !gt_b[y * w + x] {
                continue;
            }
            total += 1;
            let near = (y.saturating_sub(2)..(y + 3).min(h))
                .any(|yy| (x.saturating_sub(2)..(x + 3).min(w)).any(|xx| sp_b[yy * w + xx]));
            hit += near as usize;
        }
    }
    let recall = hit as f64 / total as f64;
    ensure(recall >= 0.95, || format!("edge recall {recall:.3}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tex = Rgb8Image::filled(96, 72, [0, 0, 0]);
    for y in 0..72 {
        for x in 0..96 {
            let base = ((x / 24 + y / 18) % 3) as u8 * 80;
            tex.put(x, y, [base.saturating_add(rng.gen_range(0..30)), rng.gen_range(0..60), 255 - base]);
        }
    }
    let trace = slic_with_trace(&tex, &SlicParams::new(24)).map_err(|e| e.to_string())?;
    let monotone = trace.objective.windows(2).all(|o| o[1] <= o[0] * (1.0 + 1e-12));
    ensure(monotone, || format!("objective rises: {:?}", trace.objective))?;
    Ok(format!(
        "K=4 areas {hist:?}, each contiguous; edge recall {recall:.3}; objective non-increasing over {} iterations",
        trace.objective.len()
    ))
}

fn end_to_end() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let e = |e: featlift::Error| e.to_string();
    let cfg_path = pipeline::cmd_synth(dir.path()).map_err(e)?;
    let cfg = PipelineConfig::load(&cfg_path).map_err(e)?;
    let ws = Workspace::new(dir.path(), dir.path().join("out"));
    pipeline::cmd_extract(&ws, &cfg).map_err(e)?;
    pipeline::cmd_project(&ws, &cfg).map_err(e)?;
    let seg = pipeline::cmd_segment(&ws, &cfg, &FeatureSource::Targets).map_err(e)?;
    let report = pipeline::cmd_eval(&ws, &cfg, &ws.out.join("segment/labels.fot")).map_err(e)?;
    let pseudo = pipeline::cmd_pseudo(&ws, &cfg, &FeatureSource::Targets, PseudoLabelDomain::UnseenOnly).map_err(e)?;
    let elapsed = started.elapsed();
    ensure(report.scores.miou == 100.0, || format!("mIoU {}", report.scores.miou))?;
    ensure(pseudo.unseen_accuracy == Some(100.0), || format!("pseudo-label accuracy {:?}", pseudo.unseen_accuracy))?;
    within(elapsed, 120)?;
    let labeled = seg.labels.iter().filter(|&&l| l >= 0).count();
    Ok(format!(
        "mIoU {:.1} over {} class points, unseen pseudo-label accuracy 100.0%, {labeled} points labeled, {elapsed:.2?}",
        report.scores.miou, report.points
    ))
}

fn distillation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 64;
    let positions: Vec<[f32; 3]> = (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
    let colors: Vec<[u8; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let cloud = PointCloud::new(positions, Some(colors)).unwrap();
    let target = [0.6f32, -0.2, 0.7, -0.1, 0.3];
    let targets = TargetFeatures::from_parts(5, target.repeat(n), vec![1; n]).unwrap();
    let scene = TrainingScene { batch: PointBatch::from_cloud(&cloud, 16).map_err(|e| e.to_string())?, targets };
    let schedule = TrainSchedule { steps: 500, ..Default::default() };
    let out = train(&[scene], PointNetParams::init(32, 5, 16, 4), &schedule).map_err(|e| e.to_string())?;
    let reached = out.curve.iter().find(|r| r.loss <= -0.99).map(|r| r.step);
    ensure(reached.is_some(), || format!("final loss {}", out.curve.last().unwrap().loss))?;

    let lr0 = 0.8f32;
    let s = TrainSchedule { lr0, ..Default::default() };
    let want = (lr0 as f64 * 0.99f64.powi(5)) as f32;
    let got = s.lr_at(5000);
    ensure((got - want).abs() <= f32::EPSILON * want, || format!("lr(5000) = {got}, expected {want}"))?;
    ensure(s.lr_at(4999) == lr0 * 0.99f32.powi(4) && s.lr_at(0) == lr0, || "staircase boundaries".into())?;
    Ok(format!(
        "loss <= -0.99 at step {} of 500 (final {:.4}); lr(5000) = {got} = 0.8 x 0.99^5",
        reached.unwrap(),
        out.curve.last().unwrap().loss
    ))
}

fn hiou_pins() -> Outcome {
    let a = hiou(58.6, 51.6);
    let b = hiou(64.8, 26.1);
    ensure((a - 54.9).abs() <= 0.05, || format!("hIoU(58.6, 51.6) = {a}"))?;
    ensure((b - 37.2).abs() <= 0.05, || format!("hIoU(64.8, 26.1) = {b}"))?;
    Ok(format!("{a:.3} and {b:.3}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("non-interference of local tokens", non_interference),
        ("restricted attention oracle", local_attention_oracle),
        ("distillation loss suite", loss_suite),
        ("multi-view projection oracle", projection_oracle),
        ("crop schedule", crop_schedule),
        ("fusion identities", fusion_identities),
        ("SLIC properties", slic_checks),
        ("end-to-end planted scene", end_to_end),
        ("distillation convergence and lr schedule", distillation),
        ("hIoU pins", hiou_pins),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} [{secs:.2}s]: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} [{secs:.2}s]: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
