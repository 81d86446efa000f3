//! Brute-force oracles and the criterion suites shared by the integration
//! tests and the acceptance target. Each suite returns a one-line summary on
//! success and the first discrepancy on failure.

#![allow(dead_code)]

use msformer_core::autodiff::{Graph, Reduction};
use msformer_core::config::{AblationFlags, LossConfig, ModelConfig, TrainConfig};
use msformer_core::data::{
    downsample_local, generate_patch_labels, BiTemporalSample, BinaryMask, Grid, LocalScaleMap,
};
use msformer_core::encoder::{temporal_difference, MultiLevelFeatures, TokenMap};
use msformer_core::memory::{pool_pyramid, pool_representative, Attention, MemoryTransformer};
use msformer_core::metrics::{accumulate_confusion, compute_metrics, ConfusionCounts};
use msformer_core::model::{batch_images, MsFormer};
use msformer_core::nn::{Builder, ParamId, ParamStore};
use msformer_core::supervision::{loss_pcl, loss_sp, loss_upcl, supervision_losses, total_loss, ChangeMap, Targets};
use msformer_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Outcome = Result<String, String>;

pub const INSTANCES: usize = 120;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

pub fn pick<T: Copy>(rng: &mut impl Rng, items: &[T]) -> T {
    items[rng.gen_range(0..items.len())]
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    Grid::from_fn(h, w, |_, _| u8::from(rng.gen_bool(density)))
}

/// Values in `[0, 1]` with exact 0s, 1s and ties mixed in.
pub fn random_unit_map(rng: &mut impl Rng, h: usize, w: usize) -> Grid<f64> {
    Grid::from_fn(h, w, |_, _| match rng.gen_range(0..6) {
        0 => 0.0,
        1 => 1.0,
        2 => 0.5,
        _ => rng.gen::<f64>(),
    })
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
}

pub fn close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= atol + rtol * b.abs()
}

fn check(ok: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

// ---------------------------------------------------------------------------
// Oracles

pub fn oracle_patch_grid(mask: &BinaryMask, ph: usize, pw: usize) -> Vec<Vec<u8>> {
    let (gh, gw) = (mask.height() / ph, mask.width() / pw);
    let mut out = vec![vec![0u8; gw]; gh];
    for (gr, row) in out.iter_mut().enumerate() {
        for (gc, cell) in row.iter_mut().enumerate() {
            let mut any = false;
            for dr in 0..ph {
                for dc in 0..pw {
                    any |= mask.get(gr * ph + dr, gc * pw + dc) == 1;
                }
            }
            *cell = u8::from(any);
        }
    }
    out
}

pub fn oracle_cell_max(map: &Grid<f64>, ph: usize, pw: usize) -> Vec<Vec<f64>> {
    let (gh, gw) = (map.height() / ph, map.width() / pw);
    (0..gh)
        .map(|gr| {
            (0..gw)
                .map(|gc| {
                    let mut best = f64::NEG_INFINITY;
                    for dr in 0..ph {
                        for dc in 0..pw {
                            best = best.max(map.get(gr * ph + dr, gc * pw + dc));
                        }
                    }
                    best
                })
                .collect()
        })
        .collect()
}

/// `tokens`: `[B, th·tw, C]` row-major. Returns `[B][gh·gw][C]`.
pub fn oracle_token_max(tokens: &Tensor<f64>, th: usize, tw: usize, gh: usize, gw: usize) -> Vec<Vec<Vec<f64>>> {
    let (b, c) = (tokens.dim(0), tokens.dim(2));
    let (kh, kw) = (th / gh, tw / gw);
    let at = |bi: usize, r: usize, col: usize, ch: usize| tokens.data()[(bi * th * tw + r * tw + col) * c + ch];
    (0..b)
        .map(|bi| {
            (0..gh * gw)
                .map(|cell| {
                    let (gr, gc) = (cell / gw, cell % gw);
                    (0..c)
                        .map(|ch| {
                            let mut best = f64::NEG_INFINITY;
                            for r in gr * kh..(gr + 1) * kh {
                                for col in gc * kw..(gc + 1) * kw {
                                    best = best.max(at(bi, r, col, ch));
                                }
                            }
                            best
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Adaptive-average bin `i` of `m` over `n` inputs: `[floor(i·n/m), ceil((i+1)·n/m))`.
pub fn adaptive_bin(i: usize, n: usize, m: usize) -> (usize, usize) {
    let start = (i * n) / m;
    let end = ((i + 1) * n + m - 1) / m;
    (start, end)
}

pub fn oracle_token_pyramid(tokens: &Tensor<f64>, th: usize, tw: usize, ratio: usize) -> Vec<Vec<Vec<f64>>> {
    let (b, c) = (tokens.dim(0), tokens.dim(2));
    let (oh, ow) = ((th + ratio - 1) / ratio, (tw + ratio - 1) / ratio);
    let at = |bi: usize, r: usize, col: usize, ch: usize| tokens.data()[(bi * th * tw + r * tw + col) * c + ch];
    (0..b)
        .map(|bi| {
            let mut cells = Vec::new();
            for i in 0..oh {
                for j in 0..ow {
                    let (r0, r1) = adaptive_bin(i, th, oh);
                    let (c0, c1) = adaptive_bin(j, tw, ow);
                    let count = ((r1 - r0) * (c1 - c0)) as f64;
                    cells.push(
                        (0..c)
                            .map(|ch| {
                                let mut sum = 0.0;
                                for r in r0..r1 {
                                    for col in c0..c1 {
                                        sum += at(bi, r, col, ch);
                                    }
                                }
                                sum / count
                            })
                            .collect(),
                    );
                }
            }
            cells
        })
        .collect()
}

pub fn oracle_confusion(pred: &BinaryMask, gt: &BinaryMask) -> [u64; 4] {
    let mut t = [0u64; 4];
    for r in 0..pred.height() {
        for c in 0..pred.width() {
            let idx = match (pred.get(r, c), gt.get(r, c)) {
                (1, 1) => 0,
                (1, 0) => 1,
                (0, 1) => 2,
                _ => 3,
            };
            t[idx] += 1;
        }
    }
    t
}

/// Textbook scores from the 2×2 confusion matrix, with `None` for 0/0.
pub struct OracleScores {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub iou: Option<f64>,
    pub oa: f64,
    pub kappa: Option<f64>,
}

pub fn oracle_scores(tp: u64, fp: u64, fn_: u64, tn: u64) -> OracleScores {
    let m = [[tn as f64, fp as f64], [fn_ as f64, tp as f64]];
    let n: f64 = m.iter().flatten().sum();
    let div = |a: f64, b: f64| if b == 0.0 { None } else { Some(a / b) };
    let precision = div(m[1][1], m[1][1] + m[0][1]);
    let recall = div(m[1][1], m[1][1] + m[1][0]);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    let iou = div(m[1][1], m[1][1] + m[0][1] + m[1][0]);
    let oa = (m[0][0] + m[1][1]) / n;
    let mut pe = 0.0;
    for k in 0..2 {
        let row: f64 = m[k].iter().sum();
        let col: f64 = m[0][k] + m[1][k];
        pe += row * col;
    }
    pe /= n * n;
    let kappa = div(oa - pe, 1.0 - pe);
    OracleScores { precision, recall, f1, iou, oa, kappa }
}

pub fn oracle_bce(pred: &[f64], target: &[f64], eps: f64) -> f64 {
    let mut sum = 0.0;
    for (&p, &y) in pred.iter().zip(target) {
        let p = p.max(eps).min(1.0 - eps);
        sum -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    sum / pred.len() as f64
}

// ---------------------------------------------------------------------------
// Oracle equivalence suite

pub fn oracle_generate_patch_labels(seed: u64) -> Outcome {
    let mut rng = rng(seed);
    for i in 0..INSTANCES {
        let h = rng.gen_range(1..=32);
        let w = rng.gen_range(1..=32);
        let (ph, pw) = (pick(&mut rng, &divisors(h)), pick(&mut rng, &divisors(w)));
        let density = pick(&mut rng, &[0.0, 0.01, 0.05, 0.3, 1.0]);
        let mask = random_mask(&mut rng, h, w, density);
        let labels = generate_patch_labels(&mask, ph, pw).map_err(|e| format!("instance {i}: {e}"))?;
        let want = oracle_patch_grid(&mask, ph, pw);
        for (gr, row) in want.iter().enumerate() {
            for (gc, &v) in row.iter().enumerate() {
                check(labels.grid.get(gr, gc) == v, || format!("instance {i} {h}x{w}/{ph}x{pw}: cell ({gr},{gc})"))?;
            }
        }
        for r in 0..h {
            for c in 0..w {
                check(labels.expanded.get(r, c) == want[r / ph][c / pw], || {
                    format!("instance {i}: expanded pixel ({r},{c})")
                })?;
            }
        }
    }
    Ok(format!("{INSTANCES} masks"))
}

pub fn oracle_downsample_local(seed: u64) -> Outcome {
    let mut rng = rng(seed);
    for i in 0..INSTANCES {
        let h = rng.gen_range(1..=32);
        let w = rng.gen_range(1..=32);
        let (ph, pw) = (pick(&mut rng, &divisors(h)), pick(&mut rng, &divisors(w)));
        let map = random_unit_map(&mut rng, h, w);
        let got = downsample_local(&map, ph, pw).map_err(|e| format!("instance {i}: {e}"))?;
        let want = oracle_cell_max(&map, ph, pw);
        for (gr, row) in want.iter().enumerate() {
            for (gc, &v) in row.iter().enumerate() {
                check(got.0.get(gr, gc) == v, || format!("instance {i}: cell ({gr},{gc})"))?;
            }
        }
    }
    Ok(format!("{INSTANCES} maps"))
}

pub fn oracle_pool_representative(seed: u64) -> Outcome {
    let mut rng = rng(seed);
    for i in 0..INSTANCES {
        let th = rng.gen_range(1..=32);
        let tw = rng.gen_range(1..=32);
        let (gh, gw) = (pick(&mut rng, &divisors(th)), pick(&mut rng, &divisors(tw)));
        let (b, c) = (rng.gen_range(1..=2), rng.gen_range(1..=4));
        let data = random_tensor(&mut rng, &[b, th * tw, c], 3.0);
        let mut g = Graph::new();
        let v = g.constant(data.clone());
        let p = TokenMap::new(&g, v, th, tw).map_err(|e| e.to_string())?;
        let out = pool_representative(&mut g, &p, gh, gw).map_err(|e| format!("instance {i}: {e}"))?;
        let got = g.value(out);
        check(got.shape() == [b, gh * gw, c], || format!("instance {i}: shape {:?}", got.shape()))?;
        let want = oracle_token_max(&data, th, tw, gh, gw);
        for bi in 0..b {
            for cell in 0..gh * gw {
                for ch in 0..c {
                    let x = got.data()[(bi * gh * gw + cell) * c + ch];
                    check(x == want[bi][cell][ch], || format!("instance {i}: ({bi},{cell},{ch}) {x}"))?;
                }
            }
        }
    }
    Ok(format!("{INSTANCES} token maps"))
}

pub fn oracle_pool_pyramid(seed: u64) -> Outcome {
    let mut rng = rng(seed);
    for i in 0..INSTANCES {
        let th = rng.gen_range(1..=32);
        let tw = rng.gen_range(1..=32);
        let mut ratios = vec![12];
        for _ in 0..rng.gen_range(0..3) {
            ratios.push(rng.gen_range(1..=24));
        }
        let (b, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
        let data = random_tensor(&mut rng, &[b, th * tw, c], 2.0);
        let mut g = Graph::new();
        let v = g.constant(data.clone());
        let p = TokenMap::new(&g, v, th, tw).map_err(|e| e.to_string())?;
        let outs = pool_pyramid(&mut g, &p, &ratios).map_err(|e| format!("instance {i}: {e}"))?;
        for (&r, &out) in ratios.iter().zip(&outs) {
            let got = g.value(out);
            let want = oracle_token_pyramid(&data, th, tw, r);
            check(got.shape() == [b, want[0].len(), c], || format!("instance {i} ratio {r}: shape {:?}", got.shape()))?;
            for bi in 0..b {
                for (cell, w) in want[bi].iter().enumerate() {
                    for ch in 0..c {
                        let x = got.data()[(bi * want[0].len() + cell) * c + ch];
                        check(close(x, w[ch], 1e-6, 1e-12), || {
                            format!("instance {i} grid {th}x{tw} ratio {r}: cell {cell} got {x} want {}", w[ch])
                        })?;
                    }
                }
            }
        }
    }
    Ok(format!("{INSTANCES} token maps"))
}

pub fn oracle_temporal_difference(seed: u64) -> Outcome {
    let mut rng = rng(seed);
    for i in 0..INSTANCES {
        let b = rng.gen_range(1..=2);
        let mut g = Graph::new();
        let mut raw = Vec::new();
        let mut l1 = Vec::new();
        let mut l2 = Vec::new();
        for level in 0..4 {
            let side = 32 >> level.min(4);
            let shape = [b, rng.gen_range(1..=4), rng.gen_range(1..=side), rng.gen_range(1..=side)];
            let (a, z) = (random_tensor(&mut rng, &shape, 5.0), random_tensor(&mut rng, &shape, 5.0));
            l1.push(g.constant(a.clone()));
            l2.push(g.constant(z.clone()));
            raw.push((a, z));
        }
        let f1 = MultiLevelFeatures { levels: [l1[0], l1[1], l1[2], l1[3]] };
        let f2 = MultiLevelFeatures { levels: [l2[0], l2[1], l2[2], l2[3]] };
        let d = temporal_difference(&mut g, &f1, &f2).map_err(|e| e.to_string())?;
        for (level, (a, z)) in raw.iter().enumerate() {
            let got = g.value(d.levels[level]);
            check(got.shape() == a.shape(), || format!("instance {i} level {level}: shape"))?;
            for k in 0..a.numel() {
                let want = a.data()[k] - z.data()[k];
                check(got.data()[k] == want, || format!("instance {i} level {level} element {k}"))?;
            }
        }
    }
    Ok(format!("{INSTANCES} feature pairs"))
}

pub fn oracle_accumulate_confusion(seed: u64) -> Outcome {
    let mut rng = rng(seed);
    for i in 0..INSTANCES {
        let (h, w) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
        let (dp, dg) = (rng.gen(), rng.gen());
        let pred = random_mask(&mut rng, h, w, dp);
        let gt = random_mask(&mut rng, h, w, dg);
        let c = accumulate_confusion(&pred, &gt).map_err(|e| e.to_string())?;
        let want = oracle_confusion(&pred, &gt);
        check([c.tp, c.fp, c.fn_, c.tn] == want, || format!("instance {i}: {c:?} vs {want:?}"))?;
        check(c.total() == (h * w) as u64, || format!("instance {i}: total"))?;
    }
    Ok(format!("{INSTANCES} mask pairs"))
}

pub fn oracle_compute_metrics(seed: u64) -> Outcome {
    let mut rng = rng(seed);
    for i in 0..INSTANCES {
        let draw = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.15) { 0 } else { rng.gen_range(1..5000u64) };
        let (tp, fp, fn_, tn) = (draw(&mut rng), draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let counts = ConfusionCounts { tp, fp, fn_, tn };
        if counts.total() == 0 {
            check(compute_metrics(&counts).is_err(), || "empty counts accepted".into())?;
            continue;
        }
        let r = compute_metrics(&counts).map_err(|e| e.to_string())?;
        let o = oracle_scores(tp, fp, fn_, tn);
        let pairs = [
            ("precision", r.precision, o.precision),
            ("recall", r.recall, o.recall),
            ("f1", r.f1, o.f1),
            ("iou", r.iou, o.iou),
            ("kappa", r.kappa, o.kappa),
            ("overall_accuracy", r.overall_accuracy, Some(o.oa)),
        ];
        for (name, got, want) in pairs {
            let flagged = r.degenerate.iter().any(|d| d == name);
            match want {
                Some(w) => {
                    check(!flagged, || format!("instance {i}: {name} flagged but defined"))?;
                    check(close(got, w, 1e-9, 1e-12), || format!("instance {i} {counts:?}: {name} {got} vs {w}"))?;
                }
                None => {
                    check(flagged && got == 0.0, || format!("instance {i} {counts:?}: {name} should be degenerate 0"))?;
                }
            }
        }
    }
    Ok(format!("{INSTANCES} count tuples"))
}

pub fn oracle_equivalence_suite() -> Outcome {
    let parts: [(&str, fn(u64) -> Outcome); 7] = [
        ("generate_patch_labels", oracle_generate_patch_labels),
        ("downsample_local", oracle_downsample_local),
        ("pool_representative", oracle_pool_representative),
        ("pool_pyramid", oracle_pool_pyramid),
        ("temporal_difference", oracle_temporal_difference),
        ("accumulate_confusion", oracle_accumulate_confusion),
        ("compute_metrics", oracle_compute_metrics),
    ];
    for (seed, (name, f)) in parts.iter().enumerate() {
        f(seed as u64 + 100).map_err(|e| format!("{name}: {e}"))?;
    }
    Ok(format!("7 operations x {INSTANCES} instances"))
}

// ---------------------------------------------------------------------------
// Loss oracle suite

fn local(h: usize, w: usize, v: Vec<f64>) -> LocalScaleMap {
    LocalScaleMap(Grid::new(h, w, v).unwrap())
}

pub fn loss_oracle_suite() -> Outcome {
    let eps = 1e-6;
    let ln2 = std::f64::consts::LN_2;
    let mut rng = rng(7);

    for (h, w) in [(1, 1), (2, 3), (8, 8)] {
        let half = local(h, w, vec![0.5; h * w]);
        let y = local(h, w, (0..h * w).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect());
        let pcl = loss_pcl(&half, &y, eps).map_err(|e| e.to_string())?;
        let sp = loss_sp(&half, &y, eps).map_err(|e| e.to_string())?;
        check(close(pcl, ln2, 0.0, 1e-6), || format!("uniform 0.5 pcl {pcl}"))?;
        check(sp == pcl, || format!("loss_sp {sp} differs from loss_pcl {pcl}"))?;
    }

    let hand = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
    check(close(hand, 0.1643, 0.0, 1e-4), || format!("hand value {hand}"))?;
    let pcl = loss_pcl(&local(1, 2, vec![0.9, 0.2]), &local(1, 2, vec![1.0, 0.0]), eps).map_err(|e| e.to_string())?;
    check(close(pcl, hand, 0.0, 1e-6), || format!("[0.9,0.2] vs [1,0]: {pcl}"))?;

    let y = local(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    let perfect = loss_pcl(&y, &y, eps).map_err(|e| e.to_string())?;
    check(perfect <= 1e-5, || format!("perfect prediction {perfect}"))?;

    for i in 0..INSTANCES {
        let (h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let g = random_unit_map(&mut rng, h, w);
        let y = random_mask(&mut rng, h, w, 0.4).map(f64::from);
        let got = loss_pcl(&LocalScaleMap(g.clone()), &LocalScaleMap(y.clone()), eps).map_err(|e| e.to_string())?;
        let want = oracle_bce(g.data(), y.data(), eps);
        check(close(got, want, 1e-9, 1e-9), || format!("random bce instance {i}: {got} vs {want}"))?;
    }

    let g = ChangeMap::new(Grid::new(2, 2, vec![0.5, 0.0, 0.0, 0.25]).unwrap()).map_err(|e| e.to_string())?;
    let zeros = Grid::filled(2, 2, 0u8);
    let upcl = loss_upcl(&g, &zeros, 1, 1, Reduction::Mean).map_err(|e| e.to_string())?;
    check(upcl == 0.1875, || format!("2x2 hand case {upcl}"))?;

    let ones = Grid::filled(4, 4, 1u8);
    let any = ChangeMap::new(random_unit_map(&mut rng, 4, 4)).map_err(|e| e.to_string())?;
    let masked = loss_upcl(&any, &ones, 2, 2, Reduction::Mean).map_err(|e| e.to_string())?;
    check(masked == 0.0, || format!("all-changed labels {masked}"))?;

    let y = generate_patch_labels(&random_mask(&mut rng, 8, 8, 0.05), 4, 4).map_err(|e| e.to_string())?.expanded;
    let exact = ChangeMap::new(y.map(f64::from)).map_err(|e| e.to_string())?;
    let agree = loss_upcl(&exact, &y, 4, 4, Reduction::Mean).map_err(|e| e.to_string())?;
    check(agree == 0.0, || format!("G = Y gives {agree}"))?;

    let cfg = LossConfig::default();
    for i in 0..INSTANCES {
        let sp: Vec<f64> = (0..rng.gen_range(0..=4)).map(|_| rng.gen::<f64>()).collect();
        let (pcl, upcl) = (rng.gen::<f64>(), rng.gen::<f64>());
        let bundle = total_loss(&sp, pcl, upcl, 0.0, &cfg);
        let mut want = pcl + upcl;
        for v in &sp {
            want += v;
        }
        check((bundle.total - want).abs() <= 1e-7, || format!("decomposition instance {i}"))?;
    }
    let bundle = total_loss(&[0.1, 0.1, 0.1], 0.2, 0.05, 0.0, &cfg);
    check((bundle.total - 0.55).abs() <= 1e-7, || format!("0.55 case gives {}", bundle.total))?;
    Ok("bce ln2 / 0.1643 / random; upcl 0.1875 and zero cases; decomposition".into())
}

// ---------------------------------------------------------------------------
// Attention invariant suite

fn build<R>(f: impl FnOnce(&mut Builder<'_, f64, ChaCha8Rng>) -> R, seed: u64) -> (R, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = rng(seed);
    let out = {
        let mut b = Builder::new(&mut store, &mut rng);
        f(&mut b)
    };
    (out, store)
}

fn set(store: &mut ParamStore<f64>, id: ParamId, f: impl Fn(usize, &[usize]) -> f64) {
    let p = store.get_mut(id);
    let shape = p.value.shape().to_vec();
    p.value = Tensor::from_fn(&shape, |k| f(k, &shape));
}

fn identity(k: usize, shape: &[usize]) -> f64 {
    f64::from(u8::from(k / shape[1] == k % shape[1]))
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        channels: 8,
        backbone_width: 4,
        memory_len: 6,
        blocks: 2,
        heads: 2,
        pooling_ratios: vec![3, 5],
        ..ModelConfig::default()
    }
}

fn simplex(w: &Tensor<f64>) -> Result<(), String> {
    let n = *w.shape().last().unwrap();
    for (r, row) in w.data().chunks(n).enumerate() {
        let sum: f64 = row.iter().sum();
        check(row.iter().all(|&v| v >= 0.0), || format!("row {r} has a negative weight"))?;
        check((sum - 1.0).abs() <= 1e-6, || format!("row {r} sums to {sum}"))?;
    }
    Ok(())
}

pub fn attention_invariant_suite() -> Outcome {
    let mut rng = rng(11);

    // Softmax simplex: standalone attention and every block of a model, both directions.
    for heads in [1, 2, 4] {
        let (att, store) = build(|b| Attention::new(&mut b.sub("att"), 8, heads, true), heads as u64);
        let mut g = Graph::new();
        let x = g.constant(random_tensor(&mut rng, &[2, 5, 8], 3.0));
        let ctx = g.constant(random_tensor(&mut rng, &[2, 9, 8], 3.0));
        let out = att.forward(&mut g, &store, x, ctx).map_err(|e| e.to_string())?;
        check(g.shape(out.weights) == [2 * heads, 5, 9], || format!("weights shape {:?}", g.shape(out.weights)))?;
        simplex(g.value(out.weights)).map_err(|e| format!("standalone, {heads} heads: {e}"))?;
    }
    let cfg = tiny_model_config();
    let (model, store) = MsFormer::new::<f64>(&cfg, &AblationFlags::default(), 3).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let t1 = g.constant(random_tensor(&mut rng, &[2, 3, 64, 64], 1.0));
    let t2 = g.constant(random_tensor(&mut rng, &[2, 3, 64, 64], 1.0));
    let out = model.forward(&mut g, &store, t1, t2, 16, 16, true).map_err(|e| e.to_string())?;
    check(out.attention.len() == cfg.blocks, || "missing attention maps".into())?;
    for (s, &(p2m, m2p)) in out.attention.iter().enumerate() {
        simplex(g.value(p2m)).map_err(|e| format!("block {s} P2M: {e}"))?;
        simplex(g.value(m2p)).map_err(|e| format!("block {s} M2P: {e}"))?;
    }

    // Residual identity: zero output projections keep the inputs, for a single
    // attention and for the whole stack.
    let (att, mut store) = build(|b| Attention::new(&mut b.sub("att"), 8, 2, true), 5);
    set(&mut store, att.wo.weight, |_, _| 0.0);
    let mut g = Graph::new();
    let xv = random_tensor(&mut rng, &[1, 4, 8], 2.0);
    let x = g.constant(xv.clone());
    let ctx = g.constant(random_tensor(&mut rng, &[1, 3, 8], 2.0));
    let out = att.forward(&mut g, &store, x, ctx).map_err(|e| e.to_string())?;
    check(g.value(out.out).max_abs_diff(&xv) <= 1e-6, || "W_o = 0 is not the identity".into())?;

    let mcfg = ModelConfig { channels: 8, memory_len: 5, blocks: 3, heads: 2, pooling_ratios: vec![2, 3], ..ModelConfig::default() };
    let (tr, mut store) =
        build(|b| MemoryTransformer::new(&mut b.sub("transformer"), &mcfg, &AblationFlags::default(), 9).unwrap(), 9);
    for block in &tr.blocks {
        for id in block.residual_output_params() {
            set(&mut store, id, |_, _| 0.0);
        }
    }
    let mut g = Graph::new();
    let pv = random_tensor(&mut rng, &[2, 36, 8], 2.0);
    let pvar = g.constant(pv.clone());
    let p0 = TokenMap::new(&g, pvar, 6, 6).map_err(|e| e.to_string())?;
    let out = tr.forward(&mut g, &store, &p0, 3, 3).map_err(|e| e.to_string())?;
    check(g.value(out.tokens.tokens).max_abs_diff(&pv) <= 1e-6, || "token stream changed".into())?;
    let m0 = &store.get(tr.memory).value;
    let m_final = g.value(out.memory.unwrap());
    for bi in 0..2 {
        for k in 0..m0.numel() {
            let d = (m_final.data()[bi * m0.numel() + k] - m0.data()[k]).abs();
            check(d <= 1e-6, || format!("memory stream changed by {d}"))?;
        }
    }

    // One key: weights are exactly 1 and the update is (M W_v) W_o for every token.
    for heads in [1, 2] {
        let (att, store) = build(|b| Attention::new(&mut b.sub("m2p"), 8, heads, false), 20 + heads as u64);
        let mut g = Graph::new();
        let pv = random_tensor(&mut rng, &[2, 7, 8], 2.0);
        let mv = random_tensor(&mut rng, &[2, 1, 8], 2.0);
        let p = g.constant(pv.clone());
        let m = g.constant(mv.clone());
        let out = att.forward(&mut g, &store, p, m).map_err(|e| e.to_string())?;
        check(g.value(out.weights).data().iter().all(|&w| w == 1.0), || "single-key weights are not 1".into())?;
        let wv = &store.get(att.wv.weight).value;
        let wo = &store.get(att.wo.weight).value;
        let got = g.value(out.out);
        for bi in 0..2 {
            let mrow = &mv.data()[bi * 8..(bi + 1) * 8];
            let v: Vec<f64> = (0..8).map(|j| (0..8).map(|i| mrow[i] * wv.data()[i * 8 + j]).sum()).collect();
            let update: Vec<f64> = (0..8).map(|j| (0..8).map(|i| v[i] * wo.data()[i * 8 + j]).sum()).collect();
            for t in 0..7 {
                for ch in 0..8 {
                    let want = pv.data()[(bi * 7 + t) * 8 + ch] + update[ch];
                    let x = got.data()[(bi * 7 + t) * 8 + ch];
                    check((x - want).abs() <= 1e-6, || format!("single key: token {t} channel {ch} {x} vs {want}"))?;
                }
            }
        }
    }

    // Single query and key with identity projections: output = query + key row.
    let (att, mut store) = build(|b| Attention::new(&mut b.sub("p2m"), 8, 1, false), 30);
    for id in [att.wq.weight, att.wk.weight, att.wv.weight, att.wo.weight] {
        set(&mut store, id, identity);
    }
    let mut g = Graph::new();
    let mv = random_tensor(&mut rng, &[1, 1, 8], 2.0);
    let hv = random_tensor(&mut rng, &[1, 1, 8], 2.0);
    let m = g.constant(mv.clone());
    let h = g.constant(hv.clone());
    let out = att.forward(&mut g, &store, m, h).map_err(|e| e.to_string())?;
    for ch in 0..8 {
        let want = mv.data()[ch] + hv.data()[ch];
        check((g.value(out.out).data()[ch] - want).abs() <= 1e-6, || format!("single token channel {ch}"))?;
    }
    Ok("simplex (standalone + all blocks), residual identity, one-key closed form".into())
}

// ---------------------------------------------------------------------------
// Gradient check

/// Central-difference comparison of `d total / d param` for every entry of the
/// named parameters. Returns the number of checked entries.
pub fn gradient_check(
    cfg: &TrainConfig,
    samples: &[BiTemporalSample],
    params: &[&str],
    rtol: f64,
    atol: f64,
) -> Result<usize, String> {
    let (model, mut store) = MsFormer::new::<f64>(&cfg.model, &cfg.ablation, cfg.seed).map_err(|e| e.to_string())?;
    let refs: Vec<_> = samples.iter().collect();
    let (a, b) = batch_images::<f64>(&refs, cfg.data.mean, cfg.data.std).map_err(|e| e.to_string())?;
    let labels: Vec<_> = samples
        .iter()
        .map(|s| generate_patch_labels(s.pixel_mask.as_ref().unwrap(), cfg.patch_h, cfg.patch_w).unwrap().grid)
        .collect();
    let grids: Vec<_> = labels.iter().collect();
    let targets = Targets::<f64>::from_grids(&grids, cfg.patch_h, cfg.patch_w).map_err(|e| e.to_string())?;

    let loss = |store: &ParamStore<f64>, want_grad: Option<ParamId>| -> Result<(f64, Option<Tensor<f64>>), String> {
        let mut g = Graph::new();
        let x1 = g.constant(a.clone());
        let x2 = g.constant(b.clone());
        let out = model.forward(&mut g, store, x1, x2, cfg.patch_h, cfg.patch_w, true).map_err(|e| e.to_string())?;
        let l = supervision_losses(&mut g, out.change_map, &out.aux, &targets, cfg.patch_h, cfg.patch_w, &cfg.loss, &cfg.ablation)
            .map_err(|e| e.to_string())?;
        let value = g.value(l.total).item();
        let grad = match want_grad {
            Some(id) => {
                let grads = g.backward(l.total).map_err(|e| e.to_string())?;
                let var = g.bound_param(id).ok_or("parameter not used in the graph")?;
                Some(grads.get(var).cloned().ok_or("no gradient reached the parameter")?)
            }
            None => None,
        };
        Ok((value, grad))
    };

    let h = 1e-5;
    let mut checked = 0;
    for name in params {
        let id = store.find(name).ok_or_else(|| format!("no parameter {name}"))?;
        let analytic = loss(&store, Some(id))?.1.unwrap();
        for k in 0..analytic.numel() {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + h;
            let up = loss(&store, None)?.0;
            store.get_mut(id).value.data_mut()[k] = orig - h;
            let down = loss(&store, None)?.0;
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[k];
            check(close(a, numeric, rtol, atol), || format!("{name}[{k}]: analytic {a:e} vs numeric {numeric:e}"))?;
            checked += 1;
        }
    }
    Ok(checked)
}

pub fn gradient_check_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        patch_h: 16,
        patch_w: 16,
        ..TrainConfig::default()
    };
    cfg.model.channels = 16;
    cfg.model.memory_len = 8;
    cfg.model.blocks = 1;
    cfg.model.backbone_width = 8;
    cfg.model.pooling_ratios = vec![4, 8];
    cfg
}

pub fn gradient_check_suite() -> Outcome {
    let cfg = gradient_check_config();
    let samples = msformer_core::data::synth_samples(2, 64, 5);
    let n = gradient_check(&cfg, &samples, &["transformer.memory", "transformer.block0.m2p.wq.weight"], 1e-2, 1e-4)?;
    Ok(format!("{n} entries (memory + M2P query projection)"))
}
