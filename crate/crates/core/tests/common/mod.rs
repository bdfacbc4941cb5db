//! Independent scalar oracles and random generators shared by the test
//! targets. Nothing here calls the library's arithmetic.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use refseg::backend::{Backend, BackendError, BackendRequest, BackendResponse, Blob, MaskMode, SyntheticScene};
use refseg::heatmap::{BinaryMask, Heatmap, Tensor3};
use refseg::igrs::RefinementConfig;
use refseg::parser::ParsedExpression;
use refseg::rle::MaskProposal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_values(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

pub fn rand_tensor(r: &mut ChaCha8Rng, t: usize, h: usize, w: usize, lo: f64, hi: f64) -> Tensor3 {
    Tensor3::new(t, h, w, rand_values(r, t * h * w, lo, hi)).unwrap()
}

pub fn rand_heatmap(r: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> Heatmap {
    Heatmap::new(h, w, rand_values(r, h * w, lo, hi)).unwrap()
}

pub fn rand_mask(r: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| r.gen_bool(p)).collect()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- heatmaps

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `[k][i][j]` triple loop.
pub fn gradcam_loop(a: &Tensor3, g: &Tensor3) -> Vec<f64> {
    let (t, h, w) = a.dims();
    let mut out = Vec::new();
    for k in 0..t {
        for i in 0..h {
            for j in 0..w {
                let grad = g.get(k, i, j);
                let clamped = if grad > 0.0 { grad } else { 0.0 };
                out.push(a.get(k, i, j) * clamped);
            }
        }
    }
    out
}

pub fn token_mean_loop(stack: &Tensor3) -> Vec<f64> {
    let (t, h, w) = stack.dims();
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for k in 0..t {
                s += stack.get(k, i, j);
            }
            out[i * w + j] = s / t as f64;
        }
    }
    out
}

pub fn centered_sigmoid_loop(map: &Heatmap) -> Vec<f64> {
    let (h, w) = map.dims();
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            total += map.get(i, j);
        }
    }
    let mean = total / (h * w) as f64;
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            out.push(sigmoid(map.get(i, j) - mean));
        }
    }
    out
}

/// Corner-aligned bilinear sampling, written from the definition.
pub fn bilinear_loop(map: &Heatmap, x_px: usize, y_px: usize) -> Vec<f64> {
    let (h, w) = map.dims();
    let coord = |i: usize, n_out: usize, n_in: usize| -> f64 {
        if n_in == 1 {
            0.0
        } else if n_out == 1 {
            (n_in - 1) as f64 / 2.0
        } else {
            i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(x_px * y_px);
    for yi in 0..y_px {
        let sy = coord(yi, y_px, h);
        let r0 = (sy.floor() as usize).min(h - 1);
        let r1 = (r0 + 1).min(h - 1);
        let fy = sy - r0 as f64;
        for xi in 0..x_px {
            let sx = coord(xi, x_px, w);
            let c0 = (sx.floor() as usize).min(w - 1);
            let c1 = (c0 + 1).min(w - 1);
            let fx = sx - c0 as f64;
            let top = map.get(r0, c0) * (1.0 - fx) + map.get(r0, c1) * fx;
            let bottom = map.get(r1, c0) * (1.0 - fx) + map.get(r1, c1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

// ------------------------------------------------------------------- pwem

fn clamp0(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// One slot per context row.
pub fn local_loop(a: &Tensor3, g: &Tensor3, main: usize, ctx: &[usize], eps: f64) -> Vec<Vec<f64>> {
    let (_, h, w) = a.dims();
    let mut slots = Vec::new();
    for &c in ctx {
        let mut sq = 0.0;
        for i in 0..h {
            for j in 0..w {
                let d = a.get(main, i, j) - a.get(c, i, j);
                sq += d * d;
            }
        }
        let norm = sq.sqrt().max(eps);
        let mut slot = Vec::new();
        for i in 0..h {
            for j in 0..w {
                let d = (a.get(main, i, j) - a.get(c, i, j)) / norm;
                let gp = clamp0(g.get(main, i, j));
                let hm = a.get(main, i, j) * gp;
                slot.push(d * gp * hm);
            }
        }
        slots.push(slot);
    }
    slots
}

pub fn global_loop(a: &Tensor3, g: &Tensor3, effective: &[usize], main: usize, n_ctx: usize) -> Vec<Vec<f64>> {
    let (_, h, w) = a.dims();
    let mut rows: Vec<usize> = effective.to_vec();
    rows.extend(std::iter::repeat_n(main, n_ctx));
    rows.iter()
        .map(|&k| {
            let mut r = Vec::new();
            for i in 0..h {
                for j in 0..w {
                    r.push(a.get(k, i, j) * clamp0(g.get(k, i, j)));
                }
            }
            r
        })
        .collect()
}

pub fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows[0].len();
    (0..n)
        .map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64)
        .collect()
}

/// Parsed expression with only the index sets filled in.
pub fn index_sets(effective: Vec<usize>, primary: usize) -> ParsedExpression {
    ParsedExpression {
        tokens: Vec::new(),
        context: effective.iter().copied().filter(|k| *k != primary).collect(),
        effective,
        primary,
        positional: false,
    }
}

// ------------------------------------------------------------------- igrs

pub fn update_heatmap_loop(prev: &Heatmap, cur: &Heatmap, lambda: f64) -> Vec<f64> {
    let s = centered_sigmoid_loop(cur);
    prev.values()
        .iter()
        .zip(s)
        .map(|(p, v)| lambda * p + (1.0 - lambda) * v)
        .collect()
}

pub fn relevance_loop(values: &[f64]) -> f64 {
    let mut s = 0.0;
    for v in values {
        s += 1.0 - v;
    }
    s / values.len() as f64
}

/// Records every request mask on the way through.
pub struct Recording<B> {
    pub inner: B,
    pub masks: Vec<BinaryMask>,
}

impl<B: Backend> Recording<B> {
    pub fn new(inner: B) -> Self {
        Recording { inner, masks: Vec::new() }
    }
}

impl<B: Backend> Backend for Recording<B> {
    fn latent_grid(&mut self, image: &str) -> Result<(usize, usize), BackendError> {
        self.inner.latent_grid(image)
    }

    fn forward(&mut self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        self.masks.push(request.mask.clone());
        self.inner.forward(request)
    }
}

/// Returns the same tensors and score whatever the mask.
#[derive(Clone)]
pub struct ConstantBackend {
    pub attention: Tensor3,
    pub gradients: Tensor3,
    pub itm: f64,
    pub image_size: (usize, usize),
}

impl Backend for ConstantBackend {
    fn latent_grid(&mut self, _image: &str) -> Result<(usize, usize), BackendError> {
        Ok((self.attention.height(), self.attention.width()))
    }

    fn forward(&mut self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        // masked cells must still read zero in feature mode
        let bits = request.mask.bits();
        let zero_masked = |t: &Tensor3| {
            let (n, h, w) = t.dims();
            let v = t
                .values()
                .iter()
                .enumerate()
                .map(|(i, v)| if bits[i % (h * w)] { *v } else { 0.0 })
                .collect();
            Tensor3::new(n, h, w, v).unwrap()
        };
        Ok(BackendResponse {
            attention: zero_masked(&self.attention),
            gradients: zero_masked(&self.gradients),
            itm: self.itm,
            latent: (self.attention.height(), self.attention.width()),
            image_size: self.image_size,
        })
    }
}

const TAGS: &[&str] = &["dog", "cat", "ball", "car", "man"];
const RELATIONS: &[&str] = &["left", "right", "top", "behind"];
const ADJECTIVES: &[&str] = &["red", "small", "big", "white"];

pub fn random_scene(r: &mut ChaCha8Rng, image: &str) -> SyntheticScene {
    let x_px = r.gen_range(8..=64);
    let y_px = r.gen_range(8..=64);
    let n = r.gen_range(1..=3);
    let blobs = (0..n)
        .map(|_| Blob {
            center: [r.gen_range(0.0..x_px as f64), r.gen_range(0.0..y_px as f64)],
            sigma: r.gen_range(1.5..16.0),
            salience: r.gen_range(0.05..=1.0),
            tags: vec![TAGS.choose(r).unwrap().to_string()],
            relations: if r.gen_bool(0.5) {
                vec![RELATIONS.choose(r).unwrap().to_string()]
            } else {
                Vec::new()
            },
            distractor_bias: if r.gen_bool(0.3) { r.gen_range(1.0..2.0) } else { 1.0 },
        })
        .collect();
    SyntheticScene {
        image: image.into(),
        image_size: [x_px, y_px],
        latent: [r.gen_range(2..=10), r.gen_range(2..=12)],
        blobs,
    }
}

pub fn random_expression(r: &mut ChaCha8Rng) -> String {
    let mut words = Vec::new();
    if r.gen_bool(0.6) {
        words.push("the");
    }
    if r.gen_bool(0.4) {
        words.push(ADJECTIVES.choose(r).unwrap());
    }
    if r.gen_bool(0.4) {
        words.push(RELATIONS.choose(r).unwrap());
    }
    words.push(TAGS.choose(r).unwrap());
    if r.gen_bool(0.3) {
        words.extend(["next", "to", "the"]);
        words.push(TAGS.choose(r).unwrap());
    }
    words.join(" ")
}

pub fn random_config(r: &mut ChaCha8Rng) -> RefinementConfig {
    RefinementConfig {
        lambda: r.gen_range(0.0..=1.0),
        theta: r.gen_range(0.05..0.95),
        nu: r.gen_range(1..=5),
        mask_mode: if r.gen_bool(0.5) { MaskMode::Feature } else { MaskMode::Image },
    }
}

// --------------------------------------------------------------- selector

/// Stack-based flood fill.
pub fn flood_fill_components(mask: &BinaryMask, diagonal: bool) -> usize {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut count = 0;
    for start in 0..h * w {
        if seen[start] || !mask.bits()[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / w) as i64, (i % w) as i64);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if (dx == 0 && dy == 0) || (!diagonal && dx != 0 && dy != 0) {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.bits()[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    count
}

pub fn score_loop(mask: &BinaryMask, heat: &Heatmap) -> f64 {
    let (h, w) = mask.dims();
    let mut z = 0.0;
    let mut area = 0.0;
    for y in 0..h {
        for x in 0..w {
            let b = if mask.get(x, y) { 1.0 } else { 0.0 };
            z += b + b * heat.get(y, x);
            area += b;
        }
    }
    z / area
}

pub fn peaks_loop(heat: &Heatmap, eps: f64) -> BTreeSet<(usize, usize)> {
    let (h, w) = heat.dims();
    let mut best = f64::NEG_INFINITY;
    for y in 0..h {
        for x in 0..w {
            best = best.max(heat.get(y, x));
        }
    }
    let mut out = BTreeSet::new();
    for y in 0..h {
        for x in 0..w {
            if heat.get(y, x) >= best - eps {
                out.insert((x, y));
            }
        }
    }
    out
}

#[derive(Debug, PartialEq)]
pub struct BruteSelection {
    pub selected: Option<u64>,
    pub scores: BTreeMap<u64, f64>,
}

/// Tries each admission rule from strictest to loosest over every proposal.
pub fn brute_force_select(
    proposals: &[MaskProposal],
    heat: &Heatmap,
    kappa: usize,
    diagonal: bool,
    eps: f64,
) -> BruteSelection {
    let peaks = peaks_loop(heat, eps);
    let covers = |m: &BinaryMask| peaks.iter().any(|&(x, y)| m.get(x, y));
    let rules: [&dyn Fn(&MaskProposal) -> bool; 3] = [
        &|p| {
            let cc = flood_fill_components(&p.mask, diagonal);
            cc >= 1 && cc <= kappa && covers(&p.mask)
        },
        &|p| flood_fill_components(&p.mask, diagonal) >= 1 && covers(&p.mask),
        &|p| flood_fill_components(&p.mask, diagonal) >= 1,
    ];
    for rule in rules {
        let scores: BTreeMap<u64, f64> = proposals
            .iter()
            .filter(|p| rule(p))
            .map(|p| (p.id, score_loop(&p.mask, heat)))
            .collect();
        if scores.is_empty() {
            continue;
        }
        let mut best: Option<(u64, f64)> = None;
        for p in proposals {
            if let Some(&s) = scores.get(&p.id) {
                let better = match best {
                    None => true,
                    Some((bid, bs)) => s > bs || (s == bs && p.id < bid),
                };
                if better {
                    best = Some((p.id, s));
                }
            }
        }
        return BruteSelection {
            selected: best.map(|b| b.0),
            scores,
        };
    }
    BruteSelection {
        selected: None,
        scores: BTreeMap::new(),
    }
}

/// Blobby random proposals plus a few degenerate ones.
pub fn random_proposals(r: &mut ChaCha8Rng, h: usize, w: usize, n: usize) -> Vec<MaskProposal> {
    let mut ids: Vec<u64> = (0..n as u64 * 3).collect();
    ids.shuffle(r);
    (0..n)
        .map(|k| {
            let mask = match r.gen_range(0..4) {
                0 => {
                    let p = r.gen_range(0.05..0.6);
                    rand_mask(r, h, w, p)
                }
                1 => BinaryMask::zeros(h, w),
                _ => {
                    let (cx, cy) = (r.gen_range(0..w) as f64, r.gen_range(0..h) as f64);
                    let rad = r.gen_range(1.0..(h.max(w) as f64));
                    BinaryMask::from_fn(h, w, |x, y| {
                        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                        dx * dx + dy * dy <= rad * rad
                    })
                }
            };
            MaskProposal { id: ids[k], mask }
        })
        .collect()
}
