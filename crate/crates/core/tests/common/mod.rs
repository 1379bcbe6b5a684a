//! Oracles and toy models shared by the integration tests. The acceptance
//! target in the CLI crate includes this file by path.
#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};

use camlabel_core::attribution::{normalize, AttributionMap, CamModel, Generator};
use camlabel_core::geometry::Pixel;
use camlabel_core::mask::{BinaryMask, Connectivity};
use camlabel_core::nn::{Conv2d, Linear, ParamStore};
use ndarray::{Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- postprocessing ----

pub fn neighbours(conn: Connectivity) -> Vec<(isize, isize)> {
    let mut out = Vec::new();
    for dr in -1isize..=1 {
        for dc in -1isize..=1 {
            let diagonal = dr != 0 && dc != 0;
            if (dr, dc) != (0, 0) && (conn == Connectivity::Eight || !diagonal) {
                out.push((dr, dc));
            }
        }
    }
    out
}

/// Components as sets of pixels, found by breadth-first search.
pub fn flood_fill(mask: &BinaryMask, conn: Connectivity) -> BTreeSet<Vec<Pixel>> {
    let (h, w) = mask.dims();
    let steps = neighbours(conn);
    let mut seen = vec![false; h * w];
    let mut out = BTreeSet::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) || seen[r * w + c] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([(r, c)]);
            seen[r * w + c] = true;
            while let Some((pr, pc)) = queue.pop_front() {
                comp.push(Pixel::new(pr, pc));
                for &(dr, dc) in &steps {
                    let (nr, nc) = (pr as isize + dr, pc as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let (nr, nc) = (nr as usize, nc as usize);
                    if mask.get(nr, nc) && !seen[nr * w + nc] {
                        seen[nr * w + nc] = true;
                        queue.push_back((nr, nc));
                    }
                }
            }
            comp.sort();
            out.insert(comp);
        }
    }
    out
}

/// Closing with a `k × k` square on the unbounded plane (background outside
/// the image), restricted back to the image.
pub fn closure_oracle(mask: &BinaryMask, k: usize) -> BinaryMask {
    let r = (k / 2) as isize;
    let (h, w) = mask.dims();
    let (ph, pw) = (h as isize + 2 * r, w as isize + 2 * r);
    // dilation on the image grown by r on every side; nothing further out can be set
    let mut grown = vec![false; (ph * pw) as usize];
    for y in 0..ph {
        for x in 0..pw {
            let (iy, ix) = (y - r, x - r);
            grown[(y * pw + x) as usize] = (-r..=r).any(|dy| (-r..=r).any(|dx| mask.get_signed(iy + dy, ix + dx)));
        }
    }
    let grown_at = |y: isize, x: isize| -> bool {
        let (gy, gx) = (y + r, x + r);
        gy >= 0 && gx >= 0 && gy < ph && gx < pw && grown[(gy * pw + gx) as usize]
    };
    BinaryMask::from_fn(h, w, |y, x| (-r..=r).all(|dy| (-r..=r).all(|dx| grown_at(y as isize + dy, x as isize + dx))))
}

/// Mix of sparse noise, dense noise, blocky fields and rectangles.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    match rng.random_range(0..3) {
        0 => {
            let p = rng.random_range(0.05..0.6);
            BinaryMask::from_fn(h, w, |_, _| rng.random_bool(p))
        }
        1 => {
            let cell = rng.random_range(2..8);
            let p = rng.random_range(0.2..0.7);
            let coarse: Vec<bool> = (0..(h / cell + 1) * (w / cell + 1)).map(|_| rng.random_bool(p)).collect();
            let noise = rng.random_range(0.0..0.1);
            BinaryMask::from_fn(h, w, |r, c| coarse[(r / cell) * (w / cell + 1) + c / cell] ^ rng.random_bool(noise))
        }
        _ => {
            let mut m = BinaryMask::new(h, w);
            for _ in 0..rng.random_range(1..12) {
                let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
                let (dr, dc) = (rng.random_range(1..12), rng.random_range(1..12));
                for r in r0..(r0 + dr).min(h) {
                    for c in c0..(c0 + dc).min(w) {
                        m.set(r, c, true);
                    }
                }
            }
            m
        }
    }
}

/// Smooth nonnegative field with a few bumps plus grain, normalized to unit max.
pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> AttributionMap {
    let bumps: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..6))
        .map(|_| {
            (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64), rng.random_range(1.5..9.0), rng.random_range(0.2..1.0))
        })
        .collect();
    let grain = rng.random_range(0.0..0.15);
    let noise: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    let values = Array2::from_shape_fn((h, w), |(r, c)| {
        let smooth: f64 = bumps
            .iter()
            .map(|&(br, bc, s, a)| a * (-((r as f64 - br).powi(2) + (c as f64 - bc).powi(2)) / (2.0 * s * s)).exp())
            .sum();
        smooth + grain * noise[r * w + c]
    });
    normalize(&AttributionMap::raw(values, 0, Generator::GradCam))
}

pub fn component_sets(set: &camlabel_core::postproc::ComponentSet) -> BTreeSet<Vec<Pixel>> {
    set.components.iter().map(|c| c.pixels.clone()).collect()
}

// ---- time saving ----

/// Nearest integer percent of `(95 g95 + 75 g75 + 50 g50) / n` in integer
/// arithmetic, halves up.
pub fn percent_oracle(n: u64, g95: u64, g75: u64, g50: u64) -> i64 {
    let weighted = 95 * g95 + 75 * g75 + 50 * g50;
    ((2 * weighted + n) / (2 * n)) as i64
}

// ---- toy models ----

/// Features fixed in advance, head = global average pool then linear.
pub struct FixedFeatures {
    pub features: Array4<f64>,
    /// `(classes, channels)`
    pub weights: Array2<f64>,
    pub bias: Vec<f64>,
}

pub struct FixedTrace {
    features: Array4<f64>,
    logits: Array2<f64>,
    input_dim: (usize, usize, usize, usize),
}

impl CamModel<f64> for FixedFeatures {
    type Trace = FixedTrace;

    fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    fn run(&self, x: &Array4<f64>) -> FixedTrace {
        let pooled = self.features.mean_axis(Axis(3)).unwrap().mean_axis(Axis(2)).unwrap();
        let mut logits = pooled.dot(&self.weights.t());
        for mut row in logits.outer_iter_mut() {
            row.iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b);
        }
        FixedTrace { features: self.features.clone(), logits, input_dim: x.dim() }
    }

    fn features<'t>(&self, t: &'t FixedTrace) -> &'t Array4<f64> {
        &t.features
    }

    fn logits<'t>(&self, t: &'t FixedTrace) -> &'t Array2<f64> {
        &t.logits
    }

    fn features_grad(&self, t: &FixedTrace, dlogits: &Array2<f64>) -> Array4<f64> {
        let (n, c, h, w) = t.features.dim();
        let dpooled = dlogits.dot(&self.weights);
        Array4::from_shape_fn((n, c, h, w), |(i, k, _, _)| dpooled[[i, k]] / (h * w) as f64)
    }

    fn input_grad(&self, t: &FixedTrace, _: &Array4<f64>) -> Array4<f64> {
        Array4::zeros(t.input_dim)
    }
}

/// `y = <w, x>` with the input itself as the feature stack.
pub struct LinearModel {
    pub w: Array4<f64>,
}

pub struct LinearTrace {
    x: Array4<f64>,
    logits: Array2<f64>,
}

impl CamModel<f64> for LinearModel {
    type Trace = LinearTrace;

    fn num_classes(&self) -> usize {
        1
    }

    fn run(&self, x: &Array4<f64>) -> LinearTrace {
        LinearTrace { x: x.clone(), logits: Array2::from_elem((1, 1), (x * &self.w).sum()) }
    }

    fn features<'t>(&self, t: &'t LinearTrace) -> &'t Array4<f64> {
        &t.x
    }

    fn logits<'t>(&self, t: &'t LinearTrace) -> &'t Array2<f64> {
        &t.logits
    }

    fn features_grad(&self, _: &LinearTrace, dlogits: &Array2<f64>) -> Array4<f64> {
        &self.w * dlogits[[0, 0]]
    }

    fn input_grad(&self, _: &LinearTrace, dfeatures: &Array4<f64>) -> Array4<f64> {
        dfeatures.clone()
    }
}

/// `F = tanh(conv3x3(x))`, head = global average pool then linear, two classes.
pub struct ConvGapModel {
    store: ParamStore<f64>,
    conv: Conv2d,
    head: Linear,
}

pub struct ConvTrace {
    x: Array4<f64>,
    features: Array4<f64>,
    logits: Array2<f64>,
}

impl ConvGapModel {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "conv", 3, 4, 3, 1, 1, true, &mut rng);
        let head = Linear::new(&mut store, "head", 4, 2, &mut rng);
        Self { store, conv, head }
    }

    pub fn head_weights(&self) -> Array2<f64> {
        let w = self.store.get(self.head.weight);
        Array2::from_shape_fn((2, 4), |(o, i)| w[[o, i]])
    }
}

impl CamModel<f64> for ConvGapModel {
    type Trace = ConvTrace;

    fn num_classes(&self) -> usize {
        2
    }

    fn run(&self, x: &Array4<f64>) -> ConvTrace {
        let features = self.conv.forward(&self.store, x).mapv(f64::tanh);
        let pooled = features.mean_axis(Axis(3)).unwrap().mean_axis(Axis(2)).unwrap();
        let logits = self.head.forward(&self.store, &pooled);
        ConvTrace { x: x.clone(), features, logits }
    }

    fn features<'t>(&self, t: &'t ConvTrace) -> &'t Array4<f64> {
        &t.features
    }

    fn logits<'t>(&self, t: &'t ConvTrace) -> &'t Array2<f64> {
        &t.logits
    }

    fn features_grad(&self, t: &ConvTrace, dlogits: &Array2<f64>) -> Array4<f64> {
        let (n, c, h, w) = t.features.dim();
        let dpooled = dlogits.dot(&self.head_weights());
        Array4::from_shape_fn((n, c, h, w), |(i, k, _, _)| dpooled[[i, k]] / (h * w) as f64)
    }

    fn input_grad(&self, t: &ConvTrace, dfeatures: &Array4<f64>) -> Array4<f64> {
        let dpre = dfeatures * &t.features.mapv(|f| 1.0 - f * f);
        self.conv.backward(&self.store, &t.x, &dpre, None)
    }
}

pub fn random_input(seed: u64, size: usize) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn((1, 3, size, size), |_| rng.random_range(0.05..0.95))
}

/// Largest relative error between `∂y_c/∂x` from the model's backward pass
/// and central differences, over `samples` random input positions.
pub fn input_gradient_error<M: CamModel<f64>>(model: &M, x: &Array4<f64>, class_id: usize, samples: usize, seed: u64) -> f64 {
    let trace = model.run(x);
    let mut dl = Array2::zeros((1, model.num_classes()));
    dl[[0, class_id]] = 1.0;
    let analytic = model.input_grad(&trace, &model.features_grad(&trace, &dl));
    let y = |x: &Array4<f64>| model.logits(&model.run(x))[[0, class_id]];
    let eps = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, c, h, w) = x.dim();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let idx = (0, rng.random_range(0..c), rng.random_range(0..h), rng.random_range(0..w));
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[idx] += eps;
        xm[idx] -= eps;
        let fd = (y(&xp) - y(&xm)) / (2.0 * eps);
        let an = analytic[idx];
        // relative to the gradient scale, so near-zero entries don't dominate
        let scale = fd.abs().max(an.abs()).max(1e-8);
        worst = worst.max((fd - an).abs() / scale);
    }
    worst
}

// ---- committed fixture ----

/// The small crack classifier under `crates/core/tests/fixtures`, found from
/// either the core or the CLI crate.
pub fn fixture_dir() -> std::path::PathBuf {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    [root.join("tests/fixtures/crack_model"), root.join("../core/tests/fixtures/crack_model")]
        .into_iter()
        .find(|p| p.join("meta.json").exists())
        .expect("crack_model fixture is committed")
}

pub fn fixture_bundle() -> camlabel_core::classifier::CheckpointBundle {
    camlabel_core::classifier::CheckpointBundle::load(&fixture_dir()).unwrap()
}

/// `count` 32×32 crops of seeded default scenes, each centred on the first
/// positive click and clamped to the image.
pub fn climb_patches(count: u64) -> Vec<Array4<f32>> {
    use camlabel_core::geometry::Window;
    use camlabel_core::synth::{generate_synthetic_scene, SceneParams};
    (0..count)
        .map(|i| {
            let scene = generate_synthetic_scene(&SceneParams::default(), 10_000 + i).unwrap();
            let (h, w) = (scene.image.height(), scene.image.width());
            let p = scene.positive_clicks[0];
            let r0 = p.row.saturating_sub(16).min(h - 32);
            let c0 = p.col.saturating_sub(16).min(w - 32);
            scene.image.crop(Window::new(r0, c0, 32, 32)).unwrap().to_batch::<f32>()
        })
        .collect()
}

/// Fraction of patches with non-decreasing logits, and the mean area of
/// `{aggregate > 0.1}` after one and after two iterations.
pub fn fixture_climb_stats(count: u64) -> (f64, f64, f64) {
    use camlabel_core::climb::{advcam, ClimbConfig};
    let bundle = fixture_bundle();
    let patches = climb_patches(count);
    let (mut ascending, mut area1, mut area2) = (0usize, 0usize, 0usize);
    for x in &patches {
        let two = advcam(&bundle.model, x, 0, &ClimbConfig::default()).unwrap();
        let one = advcam(&bundle.model, x, 0, &ClimbConfig { iterations: 1, ..ClimbConfig::default() }).unwrap();
        if two.records.windows(2).all(|w| w[1].logit >= w[0].logit) {
            ascending += 1;
        }
        area1 += one.aggregate.values.iter().filter(|&&v| v > 0.1).count();
        area2 += two.aggregate.values.iter().filter(|&&v| v > 0.1).count();
    }
    let n = patches.len() as f64;
    (ascending as f64 / n, area1 as f64 / n, area2 as f64 / n)
}
