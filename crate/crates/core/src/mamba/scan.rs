//! Sequential selective scan.
//!
//! ```text
//!   h_t = exp(Δ_t · A) ⊙ h_{t-1} + (Δ_t · B_t) · u_t        h_0 = 0
//!   y_t = ⟨C_t, h_t⟩ + D · u_t
//! ```
//!
//! Zero-order hold on `A`, Euler step on `B`. One state row of width
//! `d_state` per inner channel.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{counter, CustomOp, Tensor, Var};

/// Input-dependent operands of one scan. `u`, `delta`: `[L, d_inner]`;
/// `b`, `c`: `[L, d_state]`.
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs<'t> {
    pub u: Var<'t>,
    pub delta: Var<'t>,
    pub b: Var<'t>,
    pub c: Var<'t>,
}

/// Forward values of a scan, including every hidden state.
#[derive(Clone, Debug)]
pub struct ScanTrace {
    pub y: Tensor,
    /// `[L, d_inner, d_state]`, row-major.
    pub states: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub len: usize,
    pub d_inner: usize,
    pub d_state: usize,
}

impl ScanDims {
    /// MACs of one scan: state update and readout per channel, plus skip.
    pub fn macs(&self) -> u64 {
        (self.len * (2 * self.d_inner * self.d_state + self.d_inner)) as u64
    }
}

fn check(u: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor) -> Result<ScanDims> {
    let &[len, d_inner] = u.shape() else {
        return Err(Error::dim("selective_scan", u.shape(), delta.shape()));
    };
    let &[a_rows, d_state] = a.shape() else {
        return Err(Error::dim("selective_scan", u.shape(), a.shape()));
    };
    if delta.shape() != u.shape() || a_rows != d_inner || d.numel() != d_inner {
        return Err(Error::dim("selective_scan", u.shape(), delta.shape()));
    }
    if b.shape() != [len, d_state] || c.shape() != [len, d_state] {
        return Err(Error::dim("selective_scan", b.shape(), c.shape()));
    }
    if let Some(bad) = delta.data().iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::Contract(format!(
            "selective_scan needs positive step sizes, found {bad}"
        )));
    }
    Ok(ScanDims {
        len,
        d_inner,
        d_state,
    })
}

/// Runs the recurrence on plain values.
pub fn scan_values(
    u: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: &Tensor,
) -> Result<ScanTrace> {
    let dims = check(u, delta, a, b, c, d)?;
    let ScanDims {
        len,
        d_inner,
        d_state,
    } = dims;
    let (u, dl, a, b, c, d) = (u.data(), delta.data(), a.data(), b.data(), c.data(), d.data());
    let mut states = vec![0.0f32; len * d_inner * d_state];
    let mut y = vec![0.0f32; len * d_inner];
    for t in 0..len {
        let (prev, cur) = states.split_at_mut(t * d_inner * d_state);
        let cur = &mut cur[..d_inner * d_state];
        let prev = (t > 0).then(|| &prev[(t - 1) * d_inner * d_state..]);
        let bt = &b[t * d_state..(t + 1) * d_state];
        let ct = &c[t * d_state..(t + 1) * d_state];
        for ch in 0..d_inner {
            let dt = dl[t * d_inner + ch];
            let ut = u[t * d_inner + ch];
            let mut acc = 0.0f32;
            for n in 0..d_state {
                let k = ch * d_state + n;
                let carry = prev.map_or(0.0, |p| (dt * a[k]).exp() * p[k]);
                let h = carry + dt * bt[n] * ut;
                cur[k] = h;
                acc += ct[n] * h;
            }
            y[t * d_inner + ch] = acc + d[ch] * ut;
        }
    }
    Ok(ScanTrace {
        y: Tensor::new(&[len, d_inner], y)?,
        states,
    })
}

struct ScanBackward {
    dims: ScanDims,
    states: Vec<f32>,
}

impl CustomOp for ScanBackward {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(
        &self,
        grad: &Tensor,
        _out: &Tensor,
        inputs: &[Rc<Tensor>],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        let ScanDims {
            len,
            d_inner,
            d_state,
        } = self.dims;
        let [u, dl, a, b, c, d] = [0, 1, 2, 3, 4, 5].map(|i| inputs[i].data());
        let g = grad.data();
        let h = &self.states;

        let mut du = vec![0.0f32; len * d_inner];
        let mut ddelta = vec![0.0f32; len * d_inner];
        let mut da = vec![0.0f32; d_inner * d_state];
        let mut db = vec![0.0f32; len * d_state];
        let mut dc = vec![0.0f32; len * d_state];
        let mut dd = vec![0.0f32; d_inner];
        // Gradient w.r.t. h_t carried backwards through time.
        let mut dh = vec![0.0f32; d_inner * d_state];

        for t in (0..len).rev() {
            let ht = &h[t * d_inner * d_state..(t + 1) * d_inner * d_state];
            let hprev = (t > 0).then(|| &h[(t - 1) * d_inner * d_state..t * d_inner * d_state]);
            for ch in 0..d_inner {
                let i = t * d_inner + ch;
                let (gy, ut, dt) = (g[i], u[i], dl[i]);
                dd[ch] += gy * ut;
                du[i] += gy * d[ch];
                let mut d_dt = 0.0f32;
                let mut d_ut = 0.0f32;
                for n in 0..d_state {
                    let k = ch * d_state + n;
                    let bt = b[t * d_state + n];
                    dc[t * d_state + n] += gy * ht[k];
                    let dhk = dh[k] + gy * c[t * d_state + n];
                    let decay = (dt * a[k]).exp();
                    if let Some(hp) = hprev {
                        let dgate = dhk * hp[k] * decay;
                        d_dt += dgate * a[k];
                        da[k] += dgate * dt;
                    }
                    d_dt += dhk * bt * ut;
                    d_ut += dhk * dt * bt;
                    db[t * d_state + n] += dhk * dt * ut;
                    dh[k] = dhk * decay;
                }
                ddelta[i] += d_dt;
                du[i] += d_ut;
            }
        }
        vec![Some(du), Some(ddelta), Some(da), Some(db), Some(dc), Some(dd)]
    }
}

/// Differentiable selective scan. `a`: `[d_inner, d_state]` (negative
/// entries for a stable decay), `d`: `[d_inner]` skip weights.
pub fn selective_scan<'t>(a: Var<'t>, d: Var<'t>, inputs: &ScanInputs<'t>) -> Result<Var<'t>> {
    let ScanInputs { u, delta, b, c } = *inputs;
    let trace = scan_values(&u.value(), &delta.value(), &a.value(), &b.value(), &c.value(), &d.value())?;
    let dims = ScanDims {
        len: trace.y.shape()[0],
        d_inner: trace.y.shape()[1],
        d_state: a.shape()[1],
    };
    counter::record(dims.macs());
    let op = ScanBackward {
        dims,
        states: trace.states,
    };
    Ok(u.tape().custom(trace.y, &[u, delta, a, b, c, d], Box::new(op)))
}
