//! Selective state-space block.
//!
//! The block follows the usual Mamba layout:
//!
//! ```text
//!   seq ─ in_proj ─┬─ x ─ causal conv ─ SiLU ─ x_proj ─ (Δ̂, B, C)
//!                  │                    │        Δ = softplus(dt_proj(Δ̂))
//!                  │                    └── selective scan(Δ, A, B, C, D) ─┐
//!                  └─ gate ─ SiLU ──────────────────────────────────── ⊙ ─ out_proj
//! ```

pub mod scan;

use rand::Rng;

pub use scan::{scan_values, selective_scan, ScanDims, ScanInputs, ScanTrace};

use crate::error::{Error, Result};
use crate::params::{join, Binder, Parameterized};
use crate::tensor::{Tensor, Var};

pub const CONV_WIDTH: usize = 4;
const DT_MIN: f32 = 1e-3;
const DT_MAX: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaDims {
    pub d_model: usize,
    pub d_state: usize,
    pub d_inner: usize,
    pub dt_rank: usize,
    pub use_conv: bool,
}

impl MambaDims {
    pub fn new(d_model: usize, d_state: usize, expand: usize, use_conv: bool) -> Self {
        Self {
            d_model,
            d_state,
            d_inner: expand * d_model,
            dt_rank: d_model.div_ceil(16),
            use_conv,
        }
    }

    fn x_proj_width(&self) -> usize {
        self.dt_rank + 2 * self.d_state
    }

    pub fn param_count(&self) -> usize {
        let (dm, di, n, r) = (self.d_model, self.d_inner, self.d_state, self.dt_rank);
        let conv = if self.use_conv { di * CONV_WIDTH + di } else { 0 };
        dm * 2 * di + conv + di * self.x_proj_width() + r * di + di + di * n + di + di * dm
    }

    /// Multiply-accumulates spent on one token.
    pub fn macs_per_token(&self) -> u64 {
        let (dm, di, n, r) = (self.d_model, self.d_inner, self.d_state, self.dt_rank);
        let conv = if self.use_conv { di * CONV_WIDTH } else { 0 };
        let scan = 2 * di * n + di;
        (dm * 2 * di + conv + di * self.x_proj_width() + r * di + scan + di * dm) as u64
    }
}

/// Weights of one block. Matrices are stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MambaBlockParams {
    pub dims: MambaDims,
    pub in_proj: Tensor,
    pub conv_weight: Option<Tensor>,
    pub conv_bias: Option<Tensor>,
    pub x_proj: Tensor,
    pub dt_proj_weight: Tensor,
    pub dt_proj_bias: Tensor,
    /// `log(-A)`; `A = -exp(a_log)` is strictly negative.
    pub a_log: Tensor,
    pub d: Tensor,
    pub out_proj: Tensor,
}

impl MambaBlockParams {
    pub fn init<R: Rng + ?Sized>(dims: MambaDims, rng: &mut R) -> Self {
        let MambaDims {
            d_model,
            d_state,
            d_inner,
            dt_rank,
            use_conv,
        } = dims;
        let fan = |n: usize| 1.0 / (n as f32).sqrt();
        let in_proj = Tensor::uniform(&[d_model, 2 * d_inner], fan(d_model), rng);
        let (conv_weight, conv_bias) = if use_conv {
            let bound = fan(CONV_WIDTH);
            (
                Some(Tensor::uniform(&[d_inner, CONV_WIDTH], bound, rng)),
                Some(Tensor::uniform(&[d_inner], bound, rng)),
            )
        } else {
            (None, None)
        };
        let x_proj = Tensor::uniform(&[d_inner, dims.x_proj_width()], fan(d_inner), rng);
        let dt_proj_weight = Tensor::uniform(&[dt_rank, d_inner], fan(dt_rank), rng);
        // softplus(bias) lands log-uniformly in [DT_MIN, DT_MAX].
        let dt_proj_bias = Tensor::from_fn(&[d_inner], |_| {
            let dt = (rng.gen_range(DT_MIN.ln()..DT_MAX.ln())).exp();
            dt + (-(-dt).exp_m1()).ln()
        });
        let a_log = Tensor::from_fn(&[d_inner, d_state], |i| ((i % d_state) as f32 + 1.0).ln());
        let d = Tensor::ones(&[d_inner]);
        let out_proj = Tensor::uniform(&[d_inner, d_model], fan(d_inner), rng);
        Self {
            dims,
            in_proj,
            conv_weight,
            conv_bias,
            x_proj,
            dt_proj_weight,
            dt_proj_bias,
            a_log,
            d,
            out_proj,
        }
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t>, prefix: &str) -> MambaBlockVars<'t> {
        let mut vars = Vec::new();
        self.visit(prefix, &mut |name, t| vars.push(binder.bind(name, t)));
        let mut it = vars.into_iter();
        let mut next = || it.next().expect("visit order");
        let in_proj = next();
        let conv = self.dims.use_conv.then(|| (next(), next()));
        MambaBlockVars {
            dims: self.dims,
            in_proj,
            conv,
            x_proj: next(),
            dt_proj_weight: next(),
            dt_proj_bias: next(),
            a_log: next(),
            d: next(),
            out_proj: next(),
        }
    }
}

impl Parameterized for MambaBlockParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "in_proj"), &self.in_proj);
        if let (Some(w), Some(b)) = (&self.conv_weight, &self.conv_bias) {
            f(join(prefix, "conv1d.weight"), w);
            f(join(prefix, "conv1d.bias"), b);
        }
        f(join(prefix, "x_proj"), &self.x_proj);
        f(join(prefix, "dt_proj.weight"), &self.dt_proj_weight);
        f(join(prefix, "dt_proj.bias"), &self.dt_proj_bias);
        f(join(prefix, "A_log"), &self.a_log);
        f(join(prefix, "D"), &self.d);
        f(join(prefix, "out_proj"), &self.out_proj);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "in_proj"), &mut self.in_proj);
        if let (Some(w), Some(b)) = (&mut self.conv_weight, &mut self.conv_bias) {
            f(join(prefix, "conv1d.weight"), w);
            f(join(prefix, "conv1d.bias"), b);
        }
        f(join(prefix, "x_proj"), &mut self.x_proj);
        f(join(prefix, "dt_proj.weight"), &mut self.dt_proj_weight);
        f(join(prefix, "dt_proj.bias"), &mut self.dt_proj_bias);
        f(join(prefix, "A_log"), &mut self.a_log);
        f(join(prefix, "D"), &mut self.d);
        f(join(prefix, "out_proj"), &mut self.out_proj);
    }
}

/// A block's weights recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct MambaBlockVars<'t> {
    pub dims: MambaDims,
    pub in_proj: Var<'t>,
    pub conv: Option<(Var<'t>, Var<'t>)>,
    pub x_proj: Var<'t>,
    pub dt_proj_weight: Var<'t>,
    pub dt_proj_bias: Var<'t>,
    pub a_log: Var<'t>,
    pub d: Var<'t>,
    pub out_proj: Var<'t>,
}

/// `[L, d_model]` → `[L, d_model]`, causal along `L`.
pub fn mamba_block_forward<'t>(block: &MambaBlockVars<'t>, seq: Var<'t>) -> Result<Var<'t>> {
    let MambaDims {
        d_model,
        d_state,
        d_inner,
        dt_rank,
        ..
    } = block.dims;
    let shape = seq.shape();
    if shape.len() != 2 || shape[1] != d_model {
        return Err(Error::dim("mamba_block", &shape, &[shape[0], d_model]));
    }

    let xz = seq.matmul(block.in_proj)?;
    let x = xz.narrow_cols(0, d_inner)?;
    let gate = xz.narrow_cols(d_inner, d_inner)?;
    let x = match block.conv {
        Some((w, b)) => x.causal_conv1d(w, b)?,
        None => x,
    }
    .silu();

    let x_dbl = x.matmul(block.x_proj)?;
    let dt = x_dbl.narrow_cols(0, dt_rank)?;
    let b = x_dbl.narrow_cols(dt_rank, d_state)?;
    let c = x_dbl.narrow_cols(dt_rank + d_state, d_state)?;
    let delta = dt
        .matmul(block.dt_proj_weight)?
        .add_row_bias(block.dt_proj_bias)?
        .softplus();

    let a = block.a_log.exp().neg();
    let y = selective_scan(a, block.d, &ScanInputs { u: x, delta, b, c })?;
    y.mul(gate.silu())?.matmul(block.out_proj)
}
