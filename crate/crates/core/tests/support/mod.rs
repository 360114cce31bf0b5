//! Shared test support: finite-difference gradient oracle and synthetic
//! image datasets. Also included by the CLI crate's acceptance suite.

#![allow(dead_code)]

use std::fs;
use std::path::Path;

use scalpnet_core::imageproc::{encode_png, RawImage};
use scalpnet_core::nn::{LayerSpec, Mode, Model, ModelSpec, Padding};
use scalpnet_core::optim::sparse_cce;
use scalpnet_core::Tensor;

/// Denominator floor for relative errors, so coordinates whose true gradient
/// is essentially zero are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

/// Central-difference steps, tried in order until the probe stays on one
/// smooth piece (same ReLU masks and pool winners) on both sides.
pub const STEPS: [f64; 4] = [1e-3, 1e-4, 1e-5, 1e-6];

#[derive(Debug, Clone)]
pub struct GradReport {
    pub coordinates: usize,
    pub max_rel: f64,
    pub median_rel: f64,
    /// (parameter tensor, flat index, analytic, numeric) of the worst coordinate.
    pub worst: (usize, usize, f64, f64),
    /// Coordinates where the first step crossed a kink and a smaller one was used.
    pub refined: usize,
    /// Coordinates where even the smallest step crossed a kink.
    pub unresolved: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn probe(model: &Model<f64>, first: usize, x: &Tensor<f64>, labels: &[usize]) -> (f64, Vec<u32>) {
    let pass = model.forward_from(first, x, Mode::Training).expect("forward");
    let loss = sparse_cce(&pass.logits, labels).expect("loss").0;
    (loss, model.activation_pattern(&pass).expect("pattern"))
}

/// Numeric derivative of the loss along one coordinate. `set(v)` writes the
/// coordinate and returns the (loss, pattern) there. Returns the derivative,
/// the index into `steps` used, and whether that step stayed kink-free.
fn numeric_derivative(
    original: f64,
    base: &[u32],
    steps: &[f64],
    mut set: impl FnMut(f64) -> (f64, Vec<u32>),
) -> (f64, usize, bool) {
    let mut last = (0.0, 0, false);
    for (k, &eps) in steps.iter().enumerate() {
        let (plus, pp) = set(original + eps);
        let (minus, pm) = set(original - eps);
        let smooth = pp == base && pm == base;
        last = ((plus - minus) / (2.0 * eps), k, smooth);
        if smooth {
            break;
        }
    }
    set(original);
    last
}

struct Tally {
    errors: Vec<f64>,
    worst: (usize, usize, f64, f64),
    max_rel: f64,
    refined: usize,
    unresolved: usize,
}

impl Tally {
    fn new() -> Self {
        Tally { errors: Vec::new(), worst: (0, 0, 0.0, 0.0), max_rel: 0.0, refined: 0, unresolved: 0 }
    }

    fn push(&mut self, at: (usize, usize), analytic: f64, (numeric, step, smooth): (f64, usize, bool)) {
        let e = rel_error(analytic, numeric);
        if e > self.max_rel {
            self.max_rel = e;
            self.worst = (at.0, at.1, analytic, numeric);
        }
        self.refined += usize::from(step > 0 && smooth);
        self.unresolved += usize::from(!smooth);
        self.errors.push(e);
    }

    fn report(mut self) -> GradReport {
        self.errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
        GradReport {
            coordinates: self.errors.len(),
            max_rel: self.max_rel,
            median_rel: self.errors[self.errors.len() / 2],
            worst: self.worst,
            refined: self.refined,
            unresolved: self.unresolved,
        }
    }
}

/// Compares analytic parameter gradients of the mean cross-entropy against
/// central differences over every parameter coordinate, starting at step
/// `eps` and refining (see [`STEPS`]) where the probe crosses a kink.
pub fn check_parameters(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize], eps: f64) -> GradReport {
    let pass = model.forward(x, Mode::Training).expect("forward");
    let (_, grad) = sparse_cce(&pass.logits, labels).expect("loss");
    let analytic = model.backward(&pass, &grad).expect("backward");
    let cache = pass.cache.as_ref().expect("cache");
    let steps = steps_from(eps);
    // Parameters of layer L cannot affect earlier activations, so each probe
    // re-runs the network from L's recorded input.
    let owners: Vec<usize> = (0..model.spec().layers.len())
        .filter(|&l| model.layer_params(l).is_some())
        .flat_map(|l| [l, l])
        .collect();

    let mut m = model.clone();
    let mut tally = Tally::new();
    for p in 0..analytic.len() {
        let first = owners[p];
        let input = cache.layer_input(first).expect("recorded input");
        let (_, base) = probe(model, first, input, labels);
        for i in 0..analytic[p].len() {
            let original = m.params()[p].data()[i];
            let d = numeric_derivative(original, &base, &steps, |v| {
                m.params_mut()[p].data_mut()[i] = v;
                probe(&m, first, input, labels)
            });
            tally.push((p, i), analytic[p].data()[i], d);
        }
    }
    tally.report()
}

/// Compares the analytic input gradient against central differences.
pub fn check_input(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize], eps: f64) -> GradReport {
    let pass = model.forward(x, Mode::Training).expect("forward");
    let (_, grad) = sparse_cce(&pass.logits, labels).expect("loss");
    let (_, dx) = model.backward_full(&pass, &grad).expect("backward");
    let base = model.activation_pattern(&pass).expect("pattern");
    let steps = steps_from(eps);

    let mut xp = x.clone();
    let mut tally = Tally::new();
    for i in 0..x.len() {
        let original = xp.data()[i];
        let d = numeric_derivative(original, &base, &steps, |v| {
            xp.data_mut()[i] = v;
            probe(model, 0, &xp, labels)
        });
        tally.push((0, i), dx.data()[i], d);
    }
    tally.report()
}

fn steps_from(eps: f64) -> Vec<f64> {
    std::iter::once(eps).chain(STEPS.iter().copied().filter(|&s| s < eps)).collect()
}

pub const GRAD_EPS: f64 = 1e-3;
pub const GRAD_MAX_REL: f64 = 1e-2;
pub const GRAD_MEDIAN_REL: f64 = 1e-3;

pub struct GradCase {
    pub name: String,
    pub model: Model<f64>,
    pub x: Tensor<f64>,
    pub labels: Vec<usize>,
    pub params: bool,
    pub input: bool,
}

impl GradCase {
    /// Runs the requested checks, returning one labelled report per check.
    pub fn run(&self) -> Vec<(String, GradReport)> {
        let mut out = Vec::new();
        if self.params {
            out.push((self.name.clone(), check_parameters(&self.model, &self.x, &self.labels, GRAD_EPS)));
        }
        if self.input {
            out.push((format!("{} input", self.name), check_input(&self.model, &self.x, &self.labels, GRAD_EPS)));
        }
        out
    }
}

pub fn passes(r: &GradReport) -> bool {
    r.max_rel < GRAD_MAX_REL && r.median_rel < GRAD_MEDIAN_REL
}

fn class_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class_{i}")).collect()
}

fn head_model(input: [usize; 3], mut layers: Vec<LayerSpec>, k: usize, seed: u64) -> Model<f64> {
    layers.extend([LayerSpec::Dense { units: k }, LayerSpec::Softmax]);
    let spec = ModelSpec { input_shape: input, layers, class_names: class_names(k) };
    let mut m = Model::<f64>::init(spec, seed).unwrap();
    // Non-zero biases so ReLU/pool boundaries are not aligned with zero.
    let mut rng = Lcg(seed ^ 0xb1a5);
    for (i, p) in m.params_mut().into_iter().enumerate() {
        if i % 2 == 1 {
            p.data_mut().iter_mut().for_each(|b| *b = 0.2 * rng.unit() - 0.1);
        }
    }
    m
}

fn case(name: &str, model: Model<f64>, x: Tensor<f64>, labels: &[usize], params: bool, input: bool) -> GradCase {
    GradCase { name: name.into(), model, x, labels: labels.to_vec(), params, input }
}

/// One small model per layer type, each followed by a Dense + Softmax head.
pub fn layer_cases() -> Vec<GradCase> {
    let mut cases = vec![
        case(
            "dense",
            head_model([2, 2, 3], vec![LayerSpec::Flatten], 3, 1),
            Lcg(11).tensor(&[4, 2, 2, 3], -1.0, 1.0),
            &[0, 1, 2, 1],
            true,
            true,
        ),
        case(
            "relu",
            head_model([2, 2, 2], vec![LayerSpec::Flatten, LayerSpec::Dense { units: 6 }, LayerSpec::ReLU], 3, 2),
            Lcg(12).tensor(&[3, 2, 2, 2], -1.0, 1.0),
            &[2, 0, 1],
            true,
            true,
        ),
    ];
    for (padding, stride) in [(Padding::Valid, 1), (Padding::Same, 1), (Padding::Same, 2), (Padding::Valid, 2)] {
        let conv = LayerSpec::Conv2D { filters: 3, kernel: 3, stride, padding };
        cases.push(case(
            &format!("conv {padding:?} stride {stride}"),
            head_model([5, 6, 2], vec![conv, LayerSpec::Flatten], 2, 3),
            Lcg(13).tensor(&[2, 5, 6, 2], -1.0, 1.0),
            &[1, 0],
            true,
            true,
        ));
    }
    cases.push(case(
        "maxpool",
        head_model(
            [6, 6, 2],
            vec![
                LayerSpec::Conv2D { filters: 2, kernel: 3, stride: 1, padding: Padding::Same },
                LayerSpec::MaxPool2D { pool: 2, stride: 2 },
                LayerSpec::Flatten,
            ],
            2,
            4,
        ),
        Lcg(14).tensor(&[2, 6, 6, 2], -1.0, 1.0),
        &[0, 1],
        true,
        false,
    ));
    cases.push(case(
        "maxpool only",
        head_model([4, 4, 1], vec![LayerSpec::MaxPool2D { pool: 2, stride: 2 }, LayerSpec::Flatten], 2, 5),
        Lcg(15).tensor(&[2, 4, 4, 1], -1.0, 1.0),
        &[1, 1],
        false,
        true,
    ));
    cases
}

/// The default architecture at 16x16x3 with three classes, every parameter.
pub fn composed_case() -> GradCase {
    let spec = ModelSpec::default_for(16, class_names(3)).unwrap();
    case(
        "default model",
        Model::<f32>::init(spec, 2024).unwrap().cast::<f64>(),
        Lcg(16).tensor(&[2, 16, 16, 3], 0.0, 1.0),
        &[0, 2],
        true,
        false,
    )
}

/// Deterministic 64-bit LCG for test inputs (independent of the crate PRNG).
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        self.0
    }

    /// Uniform in [0, 1).
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| lo + (hi - lo) * self.unit())
    }
}

pub fn write_png(path: &Path, img: &RawImage) {
    fs::write(path, encode_png(img).expect("encode")).expect("write png");
}

/// Solid-color classes: `root/<name>/img_NNN.png`, `per_class` images each.
pub fn write_solid_dataset(root: &Path, classes: &[(&str, [u8; 3])], per_class: usize, size: usize) {
    for (name, rgb) in classes {
        let dir = root.join(name);
        fs::create_dir_all(&dir).expect("mkdir");
        for i in 0..per_class {
            let px = (0..size * size).flat_map(|_| *rgb).collect();
            write_png(&dir.join(format!("img_{i:03}.png")), &RawImage::new(size, size, 3, px).unwrap());
        }
    }
}

/// Noise textures whose dominant hue identifies the class: each pixel has one
/// strong channel (the class channel) and two weak ones, all randomized.
pub fn write_hue_noise_dataset(root: &Path, class_names: &[&str], per_class: usize, size: usize, seed: u64) {
    let mut rng = Lcg(seed);
    for (c, name) in class_names.iter().enumerate() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).expect("mkdir");
        for i in 0..per_class {
            let mut px = Vec::with_capacity(size * size * 3);
            for _ in 0..size * size {
                for ch in 0..3 {
                    let v = if ch == c % 3 {
                        120.0 + 135.0 * rng.unit()
                    } else {
                        110.0 * rng.unit()
                    };
                    px.push(v as u8);
                }
            }
            write_png(&dir.join(format!("img_{i:03}.png")), &RawImage::new(size, size, 3, px).unwrap());
        }
    }
}
