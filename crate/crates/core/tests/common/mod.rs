//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdmamba::data::{normalize, stratified_split, synthesize_cube, HsiCube, SampleSplit, SynthSpec};
use sdmamba::mamba::{mamba_block_forward, selective_scan, MambaBlockParams, MambaBlockVars, MambaDims, ScanInputs};
use sdmamba::model::{Mode, SdmambaConfig, SdmambaModel};
use sdmamba::params::Parameterized;
use sdmamba::tensor::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Finite differences

pub const STEP: f32 = 1e-3;

/// Multiple of `ε·Σ|w·f|/h` allowed on top of the relative tolerance: the
/// central difference of an `f32` forward pass cannot resolve more. Composed
/// ops round a few times per output, hence more than one.
pub const ROUNDING_FACTOR: f64 = 4.0;

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Largest relative error left after the rounding allowance.
    pub max_rel: f64,
    /// Largest relative error before the allowance.
    pub max_raw_rel: f64,
    pub worst: String,
}

impl GradCheck {
    fn record(&mut self, what: String, analytic: f64, numeric: f64, allowance: f64) {
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel = |d: f64| match (d, scale) {
            (0.0, _) => 0.0,
            (_, 0.0) => f64::INFINITY,
            (d, s) => d / s,
        };
        let (raw, excess) = (rel(diff), rel((diff - allowance).max(0.0)));
        self.checked += 1;
        if (excess, raw) > (self.max_rel, self.max_raw_rel) || self.worst.is_empty() {
            self.worst = format!("{what}: analytic {analytic:.6e}, numeric {numeric:.6e}, allowance {allowance:.1e}");
        }
        self.max_rel = self.max_rel.max(excess);
        self.max_raw_rel = self.max_raw_rel.max(raw);
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        if (other.max_rel, other.max_raw_rel) >= (self.max_rel, self.max_raw_rel) {
            self.worst = other.worst;
        }
        self.max_rel = self.max_rel.max(other.max_rel);
        self.max_raw_rel = self.max_raw_rel.max(other.max_raw_rel);
    }
}

fn allowance(magnitude: f64, step: f64) -> f64 {
    ROUNDING_FACTOR * f32::EPSILON as f64 * magnitude / step
}

fn weighted_sum(out: &Tensor, w: &Tensor) -> f64 {
    out.data().iter().zip(w.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Central differences of `Σ w ⊙ f(inputs)` against the tape gradient,
/// for up to `per_input` entries of every input.
pub fn check_op<F>(inputs: &[Tensor], f: F, per_input: usize, seed: u64) -> GradCheck
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let mut r = rng(seed);
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars);
    let w = Tensor::uniform(&out.shape(), 1.0, &mut r);
    let loss = out.mul(tape.constant(w.clone())).unwrap().sum();
    tape.backward(loss).unwrap();

    let eval = |xs: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).value().as_ref().clone()
    };
    let mut report = GradCheck::default();
    for (i, var) in vars.iter().enumerate() {
        let grad = var.grad().expect("input gradient");
        let n = inputs[i].numel();
        let picks = if n <= per_input { (0..n).collect() } else { sample(&mut r, n, per_input).into_vec() };
        for j in picks {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            minus[i].data_mut()[j] -= STEP;
            let h = plus[i].data()[j] as f64 - minus[i].data()[j] as f64;
            let (op, om) = (eval(&plus), eval(&minus));
            let numeric = (weighted_sum(&op, &w) - weighted_sum(&om, &w)) / h;
            // Outputs that moved carry rounding into the difference. If none
            // moved, the change fell below resolution somewhere unknown.
            let weighted = |moved_only: bool| -> f64 {
                op.data()
                    .iter()
                    .zip(om.data())
                    .zip(w.data())
                    .filter(|((p, m), _)| !moved_only || p != m)
                    .map(|((p, m), w)| (w.abs() * p.abs().max(m.abs())) as f64)
                    .sum()
            };
            let magnitude = match weighted(true) {
                0.0 => weighted(false),
                m => m,
            };
            report.record(format!("input {i}[{j}]"), grad.data()[j] as f64, numeric, allowance(magnitude, h));
        }
    }
    report
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut rng(seed))
}

// ---------------------------------------------------------------------------
// Network fixtures

/// Small network: `D = 16`, patch 5, 8 bands, 3 classes.
pub fn small_config() -> SdmambaConfig {
    SdmambaConfig {
        patch_size: 5,
        in_bands: 8,
        hidden_dim: 16,
        num_classes: 3,
        d_state: 4,
        seed: 11,
        ..Default::default()
    }
}

/// Cross-entropy computed in `f64` from the model's logits.
/// Also returns `Σ|logits| / B`, the scale of rounding in the loss, and
/// every token selection made.
pub fn network_loss(model: &SdmambaModel, batch: &Tensor, targets: &[usize], mode: Mode) -> (f64, f64, Vec<Vec<usize>>) {
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let out = model.forward(&bound, tape.constant(batch.clone()), mode).unwrap();
    let logits = out.logits.value();
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row: Vec<f64> = logits.row(i).iter().map(|&v| v as f64).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    let mut sel = out.stats.spatial_selections.clone();
    sel.extend(out.stats.spectral_selections.clone());
    let magnitude = logits.data().iter().map(|v| v.abs() as f64).sum::<f64>() / targets.len() as f64;
    (total / targets.len() as f64, magnitude, sel)
}

/// Finite differences on `samples` randomly chosen scalar parameters of the
/// whole network. Perturbations that change a token selection are
/// resampled, since the loss is not differentiable across a reordering.
pub fn check_network(model: &SdmambaModel, batch: &Tensor, targets: &[usize], samples: usize, seed: u64) -> (GradCheck, usize) {
    let mode = Mode::Train { anchor_seed: seed };
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let out = model.forward(&bound, tape.constant(batch.clone()), mode).unwrap();
    tape.backward(out.logits.cross_entropy(targets).unwrap()).unwrap();
    let grads = bound.binder.grads().unwrap();
    let (_, _, base_sel) = network_loss(model, batch, targets, mode);

    let mut names = Vec::new();
    model.visit("", &mut |name, t| names.push((name, t.numel())));
    let mut r = rng(seed);
    let mut report = GradCheck::default();
    let mut flips = 0;
    while report.checked < samples {
        let (name, n) = names[r.gen_range(0..names.len())].clone();
        let j = r.gen_range(0..n);
        let perturbed = |delta: f32| {
            let mut m = model.clone();
            let mut actual = 0.0;
            m.visit_mut("", &mut |nm, t| {
                if nm == name {
                    t.data_mut()[j] += delta;
                    actual = t.data()[j];
                }
            });
            let (loss, mag, sel) = network_loss(&m, batch, targets, mode);
            (loss, mag, sel, actual)
        };
        let (lp, mp, sp, xp) = perturbed(STEP);
        let (lm, mm, sm, xm) = perturbed(-STEP);
        if sp != base_sel || sm != base_sel {
            flips += 1;
            continue;
        }
        let h = xp as f64 - xm as f64;
        let numeric = (lp - lm) / h;
        report.record(format!("{name}[{j}]"), grads[&name].data()[j] as f64, numeric, allowance(mp.max(mm), h));
    }
    (report, flips)
}

/// The end-to-end synthetic fixture, normalized.
pub fn synthetic_cube() -> HsiCube {
    normalize(&synthesize_cube(&SynthSpec::default()).unwrap())
}

/// Reduced model that fits the synthetic fixture in about a second.
pub fn reduced_config() -> SdmambaConfig {
    SdmambaConfig {
        patch_size: 7,
        in_bands: 8,
        hidden_dim: 32,
        num_classes: 3,
        d_state: 16,
        learning_rate: 1e-3,
        batch_size: 8,
        epochs: 15,
        seed: 7,
        ..Default::default()
    }
}

pub fn reduced_split(cube: &HsiCube) -> SampleSplit {
    stratified_split(cube, 0.1, 0.1, 7).unwrap()
}

// ---------------------------------------------------------------------------
// Sparse selection by exhaustive exact comparison

/// Integer-valued tokens, so cosines can be ordered exactly.
pub fn brute_force_selection(tokens: &[Vec<i64>], anchor: usize, ratio_twentieths: usize) -> Vec<usize> {
    let n = tokens.len();
    let keep = (ratio_twentieths * n).div_ceil(20).max(1);
    let a = &tokens[anchor];
    let dot = |x: &[i64], y: &[i64]| -> i64 { x.iter().zip(y).map(|(p, q)| p * q).sum() };
    let na = dot(a, a);
    // cos_i ∝ d_i / √n_i; zero-norm tokens have cosine 0.
    let key = |i: usize| {
        let ni = dot(&tokens[i], &tokens[i]);
        if na == 0 || ni == 0 {
            (0i64, 1i64)
        } else {
            (dot(&tokens[i], a), ni)
        }
    };
    // Is token i strictly more similar than token j?
    let more_similar = |i: usize, j: usize| {
        let ((di, ni), (dj, nj)) = (key(i), key(j));
        let (si, sj) = (di.signum(), dj.signum());
        if si != sj {
            return si > sj;
        }
        let lhs = (di * di) as i128 * nj as i128;
        let rhs = (dj * dj) as i128 * ni as i128;
        if si >= 0 {
            lhs > rhs
        } else {
            lhs < rhs
        }
    };
    let mut chosen = vec![anchor];
    let mut left: Vec<usize> = (0..n).filter(|&i| i != anchor).collect();
    while chosen.len() < keep {
        let mut best = 0;
        for k in 1..left.len() {
            if more_similar(left[k], left[best]) {
                best = k;
            }
        }
        chosen.push(left.remove(best));
    }
    chosen
}

// ---------------------------------------------------------------------------
// Selective scan, written out in f64

pub struct ScanCase {
    pub u: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<f64>,
}

impl ScanCase {
    pub fn random(r: &mut ChaCha8Rng, len: usize, channels: usize, state: usize) -> Self {
        let mut grid = |rows: usize, cols: usize, lo: f64, hi: f64| -> Vec<Vec<f64>> {
            (0..rows).map(|_| (0..cols).map(|_| (r.gen_range(lo..hi) as f32) as f64).collect()).collect()
        };
        let u = grid(len, channels, -1.0, 1.0);
        let delta = grid(len, channels, 0.01, 1.0);
        let a = grid(channels, state, -2.0, -0.1);
        let b = grid(len, state, -1.0, 1.0);
        let c = grid(len, state, -1.0, 1.0);
        let d = grid(1, channels, -1.0, 1.0).remove(0);
        Self { u, delta, a, b, c, d }
    }

    pub fn tensors(&self) -> [Tensor; 6] {
        let flat = |g: &[Vec<f64>]| {
            Tensor::new(&[g.len(), g[0].len()], g.iter().flatten().map(|&v| v as f32).collect()).unwrap()
        };
        let d = Tensor::new(&[self.d.len()], self.d.iter().map(|&v| v as f32).collect()).unwrap();
        [flat(&self.u), flat(&self.delta), flat(&self.a), flat(&self.b), flat(&self.c), d]
    }

    /// `h ← exp(Δa)·h + Δ·b·u`, `y = c·h + d·u`, one channel at a time.
    pub fn reference(&self) -> Vec<Vec<f64>> {
        let len = self.u.len();
        let channels = self.d.len();
        let mut y = vec![vec![0.0; channels]; len];
        for ch in 0..channels {
            let mut h = vec![0.0; self.a[ch].len()];
            for t in 0..len {
                let dt = self.delta[t][ch];
                let mut out = self.d[ch] * self.u[t][ch];
                for (n, hn) in h.iter_mut().enumerate() {
                    *hn = (dt * self.a[ch][n]).exp() * *hn + dt * self.b[t][n] * self.u[t][ch];
                    out += self.c[t][n] * *hn;
                }
                y[t][ch] = out;
            }
        }
        y
    }
}

// ---------------------------------------------------------------------------
// Every differentiable primitive

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let t = random(shape, seed);
    Tensor::new(shape, t.data().iter().map(|v| 0.1 + v.abs()).collect()).unwrap()
}

fn negative(shape: &[usize], seed: u64) -> Tensor {
    let t = positive(shape, seed);
    Tensor::new(shape, t.data().iter().map(|v| -v).collect()).unwrap()
}

/// Finite-difference report for each primitive on small random inputs.
pub fn primitive_suite() -> Vec<(&'static str, GradCheck)> {
    let all = usize::MAX;
    let mut out = vec![
        ("add", check_op(&[random(&[3, 4], 1), random(&[3, 4], 2)], |_, v| v[0].add(v[1]).unwrap(), all, 1)),
        ("sub", check_op(&[random(&[3, 4], 3), random(&[3, 4], 4)], |_, v| v[0].sub(v[1]).unwrap(), all, 2)),
        ("mul", check_op(&[random(&[3, 4], 5), random(&[3, 4], 6)], |_, v| v[0].mul(v[1]).unwrap(), all, 3)),
        ("add_row_bias", check_op(&[random(&[3, 4], 7), random(&[4], 8)], |_, v| v[0].add_row_bias(v[1]).unwrap(), all, 4)),
        ("scale", check_op(&[random(&[5], 9)], |_, v| v[0].scale(-2.5), all, 5)),
        ("neg", check_op(&[random(&[5], 10)], |_, v| v[0].neg(), all, 6)),
        ("exp", check_op(&[random(&[6], 11)], |_, v| v[0].exp(), all, 7)),
        ("sigmoid", check_op(&[random(&[6], 12)], |_, v| v[0].sigmoid(), all, 8)),
        ("silu", check_op(&[random(&[6], 13)], |_, v| v[0].silu(), all, 9)),
        ("gelu", check_op(&[Tensor::new(&[4], vec![-2.0, -0.5, 0.5, 2.0]).unwrap()], |_, v| v[0].gelu(), all, 10)),
        ("softplus", check_op(&[random(&[6], 14)], |_, v| v[0].softplus(), all, 11)),
        ("sum", check_op(&[random(&[2, 3], 15)], |_, v| v[0].sum(), all, 12)),
        ("mean", check_op(&[random(&[2, 3], 16)], |_, v| v[0].mean(), all, 13)),
        ("reshape", check_op(&[random(&[2, 6], 17)], |_, v| v[0].reshape(&[3, 4]).unwrap(), all, 14)),
        ("transpose", check_op(&[random(&[2, 5], 18)], |_, v| v[0].transpose().unwrap(), all, 15)),
        ("matmul", check_op(&[random(&[3, 3], 19), random(&[3, 3], 20)], |_, v| v[0].matmul(v[1]).unwrap(), all, 16)),
        ("gather_rows", check_op(&[random(&[4, 3], 21)], |_, v| v[0].gather_rows(&[2, 0, 2]).unwrap(), all, 17)),
        (
            "scatter_rows",
            check_op(&[random(&[4, 2], 22), random(&[2, 2], 23)], |_, v| v[0].scatter_rows(&[3, 1], v[1]).unwrap(), all, 18),
        ),
        ("narrow_cols", check_op(&[random(&[3, 5], 24)], |_, v| v[0].narrow_cols(1, 3).unwrap(), all, 19)),
        ("softmax rows", check_op(&[random(&[3, 4], 25)], |_, v| v[0].softmax(1).unwrap(), all, 20)),
        ("softmax cols", check_op(&[random(&[3, 4], 26)], |_, v| v[0].softmax(0).unwrap(), all, 21)),
        (
            "concat_rows",
            check_op(&[random(&[1, 2], 27), random(&[2, 2], 28)], |t, v| t.concat_rows(&[v[0], v[1]]).unwrap(), all, 22),
        ),
        (
            "conv2d",
            check_op(
                &[random(&[1, 2, 4, 4], 29), random(&[2, 2, 3, 3], 30), random(&[2], 31)],
                |_, v| v[0].conv2d(v[1], v[2], 1).unwrap(),
                all,
                23,
            ),
        ),
        (
            "batchnorm train",
            check_op(
                &[random(&[2, 3, 2, 2], 32), random(&[3], 33), random(&[3], 34)],
                |_, v| v[0].batchnorm_train(v[1], v[2]).unwrap().0,
                all,
                24,
            ),
        ),
        (
            "batchnorm eval",
            check_op(
                &[random(&[2, 3, 2, 2], 35), random(&[3], 36), random(&[3], 37)],
                |_, v| v[0].batchnorm_eval(v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0]).unwrap(),
                all,
                25,
            ),
        ),
        (
            "causal_conv1d",
            check_op(
                &[random(&[5, 3], 38), random(&[3, 4], 39), random(&[3], 40)],
                |_, v| v[0].causal_conv1d(v[1], v[2]).unwrap(),
                all,
                26,
            ),
        ),
        ("cross_entropy", check_op(&[random(&[3, 4], 41)], |_, v| v[0].cross_entropy(&[0, 3, 1]).unwrap(), all, 27)),
        (
            "selective_scan",
            check_op(
                &[random(&[4, 3], 42), positive(&[4, 3], 43), negative(&[3, 2], 44), random(&[4, 2], 45), random(&[4, 2], 46), random(&[3], 47)],
                |_, v| selective_scan(v[2], v[5], &ScanInputs { u: v[0], delta: v[1], b: v[3], c: v[4] }).unwrap(),
                all,
                28,
            ),
        ),
    ];
    out.push(("mamba block", mamba_block_check(true)));
    out.push(("mamba block (no conv)", mamba_block_check(false)));
    out
}

fn mamba_block_check(use_conv: bool) -> GradCheck {
    let dims = MambaDims::new(4, 3, 2, use_conv);
    let params = MambaBlockParams::init(dims, &mut rng(50));
    let mut inputs = vec![random(&[5, 4], 51)];
    params.visit("", &mut |_, t| inputs.push(t.clone()));
    check_op(
        &inputs,
        |_, v| {
            let mut it = v[1..].iter().copied();
            let mut next = || it.next().unwrap();
            let in_proj = next();
            let conv = dims.use_conv.then(|| (next(), next()));
            let vars = MambaBlockVars {
                dims,
                in_proj,
                conv,
                x_proj: next(),
                dt_proj_weight: next(),
                dt_proj_bias: next(),
                a_log: next(),
                d: next(),
                out_proj: next(),
            };
            mamba_block_forward(&vars, v[0]).unwrap()
        },
        12,
        29,
    )
}
