//! Structured state-space scans and the selective (input-dependent) variant.
//!
//! The time-invariant pieces work on plain `f64` slices: a diagonal system
//! can be discretized, run as a recurrence, or materialized as a
//! convolution kernel, and the two scan routes must agree — they are each
//! other's oracle. The selective scan and the full Mamba-style block build
//! on the autodiff tensor so they can be trained.

use crate::error::{Error, Result};
use crate::numerics::scalar;
use crate::numerics::{Rng, Tensor};

/// Epsilon used by every RMS normalization inside model blocks.
pub const RMS_EPS: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Time-invariant diagonal systems
// ---------------------------------------------------------------------------

/// Continuous-time diagonal system (Δ, A, B, C).
#[derive(Debug, Clone)]
pub struct SSMParams {
    /// Diagonal of the state matrix, length N. Decaying modes are ≤ 0.
    pub a: Vec<f64>,
    /// Input map, length N.
    pub b: Vec<f64>,
    /// Readout map, length N.
    pub c: Vec<f64>,
    /// Positive time scale.
    pub delta: f64,
}

/// Zero-order-hold discretization of a diagonal system.
#[derive(Debug, Clone)]
pub struct DiscreteSSM {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
}

/// Discretizes a diagonal system: Ā = exp(ΔA) and
/// B̄ = (ΔA)⁻¹(exp(ΔA) − I)·ΔB, with the analytic limit B̄ = ΔB at A = 0.
pub fn discretize(p: &SSMParams) -> Result<DiscreteSSM> {
    if !(p.delta > 0.0) {
        return Err(Error::Domain(format!(
            "time scale must be positive, got {}",
            p.delta
        )));
    }
    assert_eq!(p.a.len(), p.b.len(), "A and B length mismatch");
    let mut a_bar = Vec::with_capacity(p.a.len());
    let mut b_bar = Vec::with_capacity(p.a.len());
    for (&a, &b) in p.a.iter().zip(&p.b) {
        let z = p.delta * a;
        a_bar.push(z.exp());
        b_bar.push(scalar::phi1(z) * p.delta * b);
    }
    Ok(DiscreteSSM { a_bar, b_bar })
}

/// Runs the recurrence hₜ = Āhₜ₋₁ + B̄xₜ, yₜ = Chₜ over a scalar input
/// sequence, returning the outputs for t = 1..L.
pub fn scan_recurrent(d: &DiscreteSSM, c: &[f64], x: &[f64], h0: &[f64]) -> Vec<f64> {
    let n = d.a_bar.len();
    assert_eq!(h0.len(), n, "initial state length mismatch");
    assert_eq!(c.len(), n, "readout length mismatch");
    let mut h = h0.to_vec();
    let mut y = Vec::with_capacity(x.len());
    for &xt in x {
        for i in 0..n {
            h[i] = d.a_bar[i] * h[i] + d.b_bar[i] * xt;
        }
        let mut yt = 0.0;
        for i in 0..n {
            yt += c[i] * h[i];
        }
        y.push(yt);
    }
    y
}

/// Convolution kernel K[k] = C Āᵏ B̄ for k = 0..len−1.
pub fn kernel(d: &DiscreteSSM, c: &[f64], len: usize) -> Vec<f64> {
    let n = d.a_bar.len();
    assert_eq!(c.len(), n, "readout length mismatch");
    let mut pow = d.b_bar.clone(); // Āᵏ B̄, starting at k = 0
    let mut k = Vec::with_capacity(len);
    for _ in 0..len {
        let mut v = 0.0;
        for i in 0..n {
            v += c[i] * pow[i];
        }
        k.push(v);
        for i in 0..n {
            pow[i] *= d.a_bar[i];
        }
    }
    k
}

/// Causal convolution yₜ = Σ_{k=0}^{t} K[k]·x_{t−k} (zero initial state).
pub fn scan_convolutional(x: &[f64], k: &[f64]) -> Result<Vec<f64>> {
    if k.len() < x.len() {
        return Err(Error::Domain(format!(
            "kernel length {} shorter than sequence length {}",
            k.len(),
            x.len()
        )));
    }
    let mut y = Vec::with_capacity(x.len());
    for t in 0..x.len() {
        let mut acc = 0.0;
        for j in 0..=t {
            acc += k[j] * x[t - j];
        }
        y.push(acc);
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// Selective scan
// ---------------------------------------------------------------------------

/// Input-dependent SSM over `width` channels with `state` modes each.
///
/// Δ, B and C are affine functions of the current input; with the weight
/// matrices zeroed the biases give a fixed (Δ, B, C) and the scan reduces
/// to the time-invariant recurrence channel by channel.
pub struct SelectiveSSMParams {
    /// Per-channel diagonal state matrix, (width × state), entries ≤ 0.
    pub a: Tensor,
    pub w_delta: Tensor,
    pub b_delta: Tensor,
    pub w_b: Tensor,
    pub b_b: Tensor,
    pub w_c: Tensor,
    pub b_c: Tensor,
    /// Use B̄ ≈ ΔB instead of the exact zero-order-hold form.
    pub simplified_b_bar: bool,
    pub width: usize,
    pub state: usize,
}

impl SelectiveSSMParams {
    pub fn init(width: usize, state: usize, simplified_b_bar: bool, rng: &mut Rng) -> Self {
        let mut a = Vec::with_capacity(width * state);
        for _ in 0..width {
            for n in 0..state {
                a.push(-((n + 1) as f64));
            }
        }
        let b_delta: Vec<f64> = (0..width)
            .map(|_| scalar::softplus_inv(rng.uniform(1e-3, 1e-1)))
            .collect();
        SelectiveSSMParams {
            a: Tensor::from_vec(&[width, state], a).unwrap(),
            w_delta: Tensor::xavier_uniform(width, width, rng),
            b_delta: Tensor::from_vec(&[width], b_delta).unwrap(),
            w_b: Tensor::xavier_uniform(width, state, rng),
            b_b: Tensor::zeros(&[state]),
            w_c: Tensor::xavier_uniform(width, state, rng),
            b_c: Tensor::zeros(&[state]),
            simplified_b_bar,
            width,
            state,
        }
    }

    pub fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.a"), self.a.clone()));
        out.push((format!("{prefix}.w_delta"), self.w_delta.clone()));
        out.push((format!("{prefix}.b_delta"), self.b_delta.clone()));
        out.push((format!("{prefix}.w_b"), self.w_b.clone()));
        out.push((format!("{prefix}.b_b"), self.b_b.clone()));
        out.push((format!("{prefix}.w_c"), self.w_c.clone()));
        out.push((format!("{prefix}.b_c"), self.b_c.clone()));
    }
}

/// Runs the selective scan over an (L × width) sequence.
///
/// Per step: Δₜ = softplus(W_Δxₜ + b_Δ), Bₜ = W_Bxₜ + b_B, Cₜ = W_Cxₜ + b_C;
/// the per-step system is discretized with the same zero-order-hold
/// formulas as the time-invariant path and advanced one step.
pub fn selective_scan(p: &SelectiveSSMParams, x: &Tensor) -> Result<Tensor> {
    selective_scan_tracked(p, x).map(|(y, _)| y)
}

/// Like [`selective_scan`], additionally reporting the largest |h| entry
/// seen across the whole scan (used by stability checks).
pub fn selective_scan_tracked(p: &SelectiveSSMParams, x: &Tensor) -> Result<(Tensor, f64)> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != p.width {
        return Err(Error::Shape(format!(
            "selective_scan: input {:?} vs channel width {}",
            shape, p.width
        )));
    }
    let len = shape[0];
    let (d, n) = (p.width, p.state);

    let delta = x.matmul(&p.w_delta)?.add_row(&p.b_delta).softplus(); // [L,d]
    let b_seq = x.matmul(&p.w_b)?.add_row(&p.b_b); // [L,n]
    let c_seq = x.matmul(&p.w_c)?.add_row(&p.b_c); // [L,n]

    let mut h = Tensor::zeros(&[d, n]);
    let mut max_state = 0.0f64;
    let mut ys = Vec::with_capacity(len);
    for t in 0..len {
        let dt = delta.narrow_rows(t, 1).repeat_cols(n); // [d,n]
        let za = p.a.mul(&dt);
        let a_bar = za.exp();
        let db = if p.simplified_b_bar {
            dt
        } else {
            za.phi1().mul(&dt)
        };
        let b_bar = db.mul(&b_seq.narrow_rows(t, 1).repeat_rows(d));
        let xt = x.narrow_rows(t, 1).repeat_cols(n);
        h = a_bar.mul(&h).add(&b_bar.mul(&xt));
        max_state = h.with_data(|hd| hd.iter().fold(max_state, |m, &v| m.max(v.abs())));
        let ct = c_seq.narrow_rows(t, 1).reshape(&[n, 1])?;
        ys.push(h.matmul(&ct)?.reshape(&[1, d])?);
    }
    Ok((Tensor::concat_rows(&ys), max_state))
}

// ---------------------------------------------------------------------------
// Mamba-style block
// ---------------------------------------------------------------------------

/// Residual block: norm → (main, gate) projections → causal depthwise
/// conv + SiLU → selective scan → SiLU-gated multiply → output projection.
pub struct MambaBlockParams {
    pub norm_gain: Tensor,
    pub in_proj: Tensor,
    pub gate_proj: Tensor,
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub ssm: SelectiveSSMParams,
    pub out_proj: Tensor,
    pub d_model: usize,
    pub d_inner: usize,
}

/// Shape knobs for a Mamba block.
#[derive(Debug, Clone, Copy)]
pub struct MambaConfig {
    pub state: usize,
    pub conv_width: usize,
    pub expand: usize,
    pub simplified_b_bar: bool,
}

impl Default for MambaConfig {
    fn default() -> Self {
        MambaConfig {
            state: 8,
            conv_width: 4,
            expand: 2,
            simplified_b_bar: false,
        }
    }
}

impl MambaBlockParams {
    pub fn init(d_model: usize, cfg: MambaConfig, rng: &mut Rng) -> Self {
        let d_inner = d_model * cfg.expand;
        let climit = 1.0 / (cfg.conv_width as f64).sqrt();
        MambaBlockParams {
            norm_gain: Tensor::full(&[d_model], 1.0),
            in_proj: Tensor::xavier_uniform(d_model, d_inner, rng),
            gate_proj: Tensor::xavier_uniform(d_model, d_inner, rng),
            conv_w: Tensor::uniform(&[cfg.conv_width, d_inner], -climit, climit, rng),
            conv_b: Tensor::zeros(&[d_inner]),
            ssm: SelectiveSSMParams::init(d_inner, cfg.state, cfg.simplified_b_bar, rng),
            out_proj: Tensor::xavier_uniform(d_inner, d_model, rng),
            d_model,
            d_inner,
        }
    }

    pub fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.norm_gain"), self.norm_gain.clone()));
        out.push((format!("{prefix}.in_proj"), self.in_proj.clone()));
        out.push((format!("{prefix}.gate_proj"), self.gate_proj.clone()));
        out.push((format!("{prefix}.conv_w"), self.conv_w.clone()));
        out.push((format!("{prefix}.conv_b"), self.conv_b.clone()));
        self.ssm.push_params(&format!("{prefix}.ssm"), out);
        out.push((format!("{prefix}.out_proj"), self.out_proj.clone()));
    }
}

pub fn mamba_block_forward(p: &MambaBlockParams, x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != p.d_model {
        return Err(Error::Shape(format!(
            "mamba block: input {:?} vs width {}",
            shape, p.d_model
        )));
    }
    let xn = x.rms_norm(&p.norm_gain, RMS_EPS)?;
    let main = xn.matmul(&p.in_proj)?;
    let gate = xn.matmul(&p.gate_proj)?;
    let conv = main.depthwise_causal_conv(&p.conv_w, &p.conv_b).silu();
    let scanned = selective_scan(&p.ssm, &conv)?;
    let gated = scanned.mul(&gate.silu());
    Ok(x.add(&gated.matmul(&p.out_proj)?))
}
