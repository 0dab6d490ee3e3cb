//! The invertible map `F` on the `(x, z)` plane.
//!
//! A stack of affine coupling blocks. Each block splits its 2-vector input
//! `u = [u1, u2]` into scalars and computes
//!
//! ```text
//! v1 = u1 · exp(s2(u2)) + q2(u2)
//! v2 = u2 · exp(s1(v1)) + q1(v1)
//! ```
//!
//! with clamped log-scales `s_i(t) = c · tanh(p_i(t) / c)`. The inverse is
//! explicit:
//!
//! ```text
//! u2 = (v2 − q1(v1)) · exp(−s1(v1))
//! u1 = (v1 − q2(u2)) · exp(−s2(u2))
//! ```
//!
//! Odd-numbered blocks see the lanes swapped (`[u2, u1]`) and hand them back
//! in the original order, so both coordinates get transformed and a stack of
//! zero subnets is the identity. The full 3D map leaves `y` untouched.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::base::State3;
use crate::error::{Error, Result};
use crate::math;
use crate::tape::{Tape, Var};

pub const LEAKY_RELU_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    LeakyRelu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => math::tanh(x),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_RELU_SLOPE * x
                }
            }
        }
    }

    /// Derivative given the pre-activation `x` and the output `y`.
    #[inline]
    fn slope(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_RELU_SLOPE
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::LeakyRelu => "leaky_relu",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "tanh" => Some(Activation::Tanh),
            "leaky_relu" => Some(Activation::LeakyRelu),
            _ => None,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture of one fully connected subnet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubnetSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
}

impl SubnetSpec {
    /// A scalar-to-scalar subnet, as 2D coupling needs.
    pub fn coupling(hidden_layers: Vec<usize>, activation: Activation) -> Self {
        Self { input_dim: 1, output_dim: 1, hidden_layers, activation }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim != 1 || self.output_dim != 1 {
            return Err(Error::arg("2D coupling subnets map scalars to scalars"));
        }
        if self.hidden_layers.iter().any(|&w| w == 0) {
            return Err(Error::arg("hidden layer widths must be positive"));
        }
        Ok(())
    }

    /// `(inputs, outputs)` of each dense layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_layers);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| o * i + o).sum()
    }
}

impl Default for SubnetSpec {
    fn default() -> Self {
        Self::coupling(vec![64, 64], Activation::LeakyRelu)
    }
}

/// Architecture of the whole invertible network.
#[derive(Debug, Clone, PartialEq)]
pub struct InnSpec {
    pub block_count: usize,
    pub subnet: SubnetSpec,
    pub scale_clamp: f64,
}

impl Default for InnSpec {
    fn default() -> Self {
        Self { block_count: 6, subnet: SubnetSpec::default(), scale_clamp: 2.0 }
    }
}

/// The four subnets of a coupling block, in canonical storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    P1 = 0,
    P2 = 1,
    Q1 = 2,
    Q2 = 3,
}

impl InnSpec {
    pub fn validate(&self) -> Result<()> {
        if self.block_count == 0 {
            return Err(Error::arg("at least one coupling block is required"));
        }
        if !(self.scale_clamp.is_finite() && self.scale_clamp > 0.0) {
            return Err(Error::arg("scale_clamp must be positive and finite"));
        }
        self.subnet.validate()
    }

    pub fn param_count(&self) -> usize {
        self.block_count * 4 * self.subnet.param_count()
    }

    /// Offset of a subnet inside the flat parameter vector.
    pub fn subnet_offset(&self, block: usize, role: Role) -> usize {
        (block * 4 + role as usize) * self.subnet.param_count()
    }
}

/// One dense layer; `weights` is `outputs × inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    #[inline]
    fn apply(&self, h: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out.iter_mut().zip(self.weights.chunks_exact(self.inputs).zip(&self.bias)) {
            *o = math::dot(row, h) + b;
        }
    }
}

/// Widest layer evaluated without heap buffers.
const STACK_WIDTH: usize = 128;

/// Fully connected network with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Mlp {
    pub fn zeros(spec: &SubnetSpec) -> Self {
        let layers = spec.layer_shapes().into_iter().map(|(i, o)| Dense::zeros(i, o)).collect();
        Self { layers, activation: spec.activation }
    }

    /// A subnet that outputs `c` everywhere.
    pub fn constant(spec: &SubnetSpec, c: f64) -> Self {
        let mut m = Self::zeros(spec);
        if let Some(last) = m.layers.last_mut() {
            last.bias.iter_mut().for_each(|b| *b = c);
        }
        m
    }

    fn from_flat(spec: &SubnetSpec, flat: &[f64]) -> Self {
        let mut at = 0;
        let mut layers = Vec::new();
        for (i, o) in spec.layer_shapes() {
            let weights = flat[at..at + i * o].to_vec();
            at += i * o;
            let bias = flat[at..at + o].to_vec();
            at += o;
            layers.push(Dense { inputs: i, outputs: o, weights, bias });
        }
        Self { layers, activation: spec.activation }
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
    }

    fn matches(&self, spec: &SubnetSpec) -> bool {
        let shapes = spec.layer_shapes();
        self.activation == spec.activation
            && self.layers.len() == shapes.len()
            && self.layers.iter().zip(&shapes).all(|(l, &(i, o))| {
                l.inputs == i && l.outputs == o && l.weights.len() == i * o && l.bias.len() == o
            })
    }

    fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|x| x.is_finite()))
    }

    fn max_width(&self) -> usize {
        self.layers.iter().map(|l| l.inputs.max(l.outputs)).max().unwrap_or(1)
    }

    /// Scalar output at scalar input `t`.
    pub fn eval(&self, t: f64) -> f64 {
        let w = self.max_width();
        if w <= STACK_WIDTH {
            let mut buf = [[0.0; STACK_WIDTH]; 2];
            self.eval_in(t, &mut buf)
        } else {
            let mut buf = [vec![0.0; w], vec![0.0; w]];
            self.eval_in(t, &mut buf)
        }
    }

    fn eval_in<B: AsMut<[f64]>>(&self, t: f64, buf: &mut [B; 2]) -> f64 {
        let [a, b] = buf;
        let (mut h, mut z) = (a.as_mut(), b.as_mut());
        h[0] = t;
        let mut width = 1;
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let out = &mut z[..layer.outputs];
            layer.apply(&h[..width], out);
            if k != last {
                out.iter_mut().for_each(|x| *x = self.activation.apply(*x));
            }
            width = layer.outputs;
            core::mem::swap(&mut h, &mut z);
        }
        h[0]
    }

    /// Output and its derivative with respect to the scalar input.
    pub fn eval_with_derivative(&self, t: f64) -> (f64, f64) {
        let w = self.max_width();
        if w <= STACK_WIDTH {
            let mut buf = [[0.0; STACK_WIDTH]; 4];
            self.eval_with_derivative_in(t, &mut buf)
        } else {
            let mut buf = [vec![0.0; w], vec![0.0; w], vec![0.0; w], vec![0.0; w]];
            self.eval_with_derivative_in(t, &mut buf)
        }
    }

    fn eval_with_derivative_in<B: AsMut<[f64]>>(&self, t: f64, buf: &mut [B; 4]) -> (f64, f64) {
        let [a, b, c, d] = buf;
        let (mut h, mut z, mut dh, mut dz) = (a.as_mut(), b.as_mut(), c.as_mut(), d.as_mut());
        h[0] = t;
        dh[0] = 1.0;
        let mut width = 1;
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let rows = layer.weights.chunks_exact(layer.inputs).zip(&layer.bias);
            let (hin, dhin) = (&h[..width], &dh[..width]);
            for ((o, d), (row, bias)) in z.iter_mut().zip(dz.iter_mut()).zip(rows) {
                let (x, dx) = math::dot2(row, hin, dhin);
                *o = x + bias;
                *d = dx;
            }
            if k != last {
                for (x, d) in z[..layer.outputs].iter_mut().zip(dz.iter_mut()) {
                    let y = self.activation.apply(*x);
                    *d *= self.activation.slope(*x, y);
                    *x = y;
                }
            }
            width = layer.outputs;
            core::mem::swap(&mut h, &mut z);
            core::mem::swap(&mut dh, &mut dz);
        }
        (h[0], dh[0])
    }
}

/// One affine coupling block.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBlock {
    pub p1: Mlp,
    pub p2: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub scale_clamp: f64,
}

#[inline]
fn clamp_scale(p: f64, c: f64) -> f64 {
    c * math::tanh(p / c)
}

/// Clamped log-scale and its derivative given `(p, dp)`.
#[inline]
fn clamp_scale_d(p: f64, dp: f64, c: f64) -> (f64, f64) {
    let t = math::tanh(p / c);
    (c * t, (1.0 - t * t) * dp)
}

type Mat2 = [[f64; 2]; 2];

fn matmul2(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

fn finite2(v: [f64; 2], block: usize) -> Result<[f64; 2]> {
    if v[0].is_finite() && v[1].is_finite() {
        Ok(v)
    } else {
        Err(Error::BlockOverflow { block })
    }
}

impl CouplingBlock {
    pub fn identity(spec: &SubnetSpec, scale_clamp: f64) -> Self {
        Self {
            p1: Mlp::zeros(spec),
            p2: Mlp::zeros(spec),
            q1: Mlp::zeros(spec),
            q2: Mlp::zeros(spec),
            scale_clamp,
        }
    }

    fn mlp(&self, role: Role) -> &Mlp {
        match role {
            Role::P1 => &self.p1,
            Role::P2 => &self.p2,
            Role::Q1 => &self.q1,
            Role::Q2 => &self.q2,
        }
    }

    fn mlp_mut(&mut self, role: Role) -> &mut Mlp {
        match role {
            Role::P1 => &mut self.p1,
            Role::P2 => &mut self.p2,
            Role::Q1 => &mut self.q1,
            Role::Q2 => &mut self.q2,
        }
    }

    fn forward_raw(&self, u: [f64; 2]) -> [f64; 2] {
        let c = self.scale_clamp;
        let v1 = u[0] * math::exp(clamp_scale(self.p2.eval(u[1]), c)) + self.q2.eval(u[1]);
        let v2 = u[1] * math::exp(clamp_scale(self.p1.eval(v1), c)) + self.q1.eval(v1);
        [v1, v2]
    }

    fn inverse_raw(&self, v: [f64; 2]) -> [f64; 2] {
        let c = self.scale_clamp;
        let u2 = (v[1] - self.q1.eval(v[0])) * math::exp(-clamp_scale(self.p1.eval(v[0]), c));
        let u1 = (v[0] - self.q2.eval(u2)) * math::exp(-clamp_scale(self.p2.eval(u2), c));
        [u1, u2]
    }

    fn forward_jacobian_raw(&self, u: [f64; 2]) -> ([f64; 2], Mat2) {
        let c = self.scale_clamp;
        let (p2, dp2) = self.p2.eval_with_derivative(u[1]);
        let (q2, dq2) = self.q2.eval_with_derivative(u[1]);
        let (s2, ds2) = clamp_scale_d(p2, dp2, c);
        let e2 = math::exp(s2);
        let v1 = u[0] * e2 + q2;
        let dv1_du1 = e2;
        let dv1_du2 = u[0] * e2 * ds2 + dq2;

        let (p1, dp1) = self.p1.eval_with_derivative(v1);
        let (q1, dq1) = self.q1.eval_with_derivative(v1);
        let (s1, ds1) = clamp_scale_d(p1, dp1, c);
        let e1 = math::exp(s1);
        let v2 = u[1] * e1 + q1;
        let dv2_dv1 = u[1] * e1 * ds1 + dq1;

        let jac = [[dv1_du1, dv1_du2], [dv2_dv1 * dv1_du1, e1 + dv2_dv1 * dv1_du2]];
        ([v1, v2], jac)
    }

    /// Inverse of the block at `v`, with the forward Jacobian at the preimage.
    /// The subnets are evaluated at the same inputs as the forward pass.
    fn inverse_forward_jacobian_raw(&self, v: [f64; 2]) -> ([f64; 2], Mat2) {
        let c = self.scale_clamp;
        let (p1, dp1) = self.p1.eval_with_derivative(v[0]);
        let (q1, dq1) = self.q1.eval_with_derivative(v[0]);
        let (s1, ds1) = clamp_scale_d(p1, dp1, c);
        let u2 = (v[1] - q1) * math::exp(-s1);

        let (p2, dp2) = self.p2.eval_with_derivative(u2);
        let (q2, dq2) = self.q2.eval_with_derivative(u2);
        let (s2, ds2) = clamp_scale_d(p2, dp2, c);
        let u1 = (v[0] - q2) * math::exp(-s2);

        let e1 = math::exp(s1);
        let e2 = math::exp(s2);
        let dv1_du2 = u1 * e2 * ds2 + dq2;
        let dv2_dv1 = u2 * e1 * ds1 + dq1;
        let jac = [[e2, dv1_du2], [dv2_dv1 * e2, e1 + dv2_dv1 * dv1_du2]];
        ([u1, u2], jac)
    }

    pub fn forward(&self, u: [f64; 2]) -> Result<[f64; 2]> {
        check_finite2(u)?;
        finite2(self.forward_raw(u), 0)
    }

    pub fn inverse(&self, v: [f64; 2]) -> Result<[f64; 2]> {
        check_finite2(v)?;
        finite2(self.inverse_raw(v), 0)
    }
}

fn check_finite2(u: [f64; 2]) -> Result<()> {
    if u[0].is_finite() && u[1].is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("plane point"))
    }
}

pub fn coupling_forward(u: [f64; 2], block: &CouplingBlock) -> Result<[f64; 2]> {
    block.forward(u)
}

pub fn coupling_inverse(v: [f64; 2], block: &CouplingBlock) -> Result<[f64; 2]> {
    block.inverse(v)
}

/// Parameters of the whole invertible map.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffeoParams {
    spec: InnSpec,
    blocks: Vec<CouplingBlock>,
}

#[inline]
fn swap(u: [f64; 2]) -> [f64; 2] {
    [u[1], u[0]]
}

const SWAP: Mat2 = [[0.0, 1.0], [1.0, 0.0]];

impl DiffeoParams {
    /// Zero subnets everywhere: the identity map.
    pub fn identity(spec: InnSpec) -> Result<Self> {
        spec.validate()?;
        let blocks =
            (0..spec.block_count).map(|_| CouplingBlock::identity(&spec.subnet, spec.scale_clamp)).collect();
        Ok(Self { spec, blocks })
    }

    /// Training initialization: He-uniform weights (`±√(6/fan_in)`),
    /// biases uniform in `±1/√fan_in`, and zero output layers so the map
    /// starts as the identity.
    pub fn init<R: Rng + ?Sized>(spec: InnSpec, rng: &mut R) -> Result<Self> {
        Self::randomized(spec, rng, 0.0)
    }

    /// Like [`DiffeoParams::init`] but with output layers drawn too and
    /// scaled by `output_scale`. `output_scale = 0` is the training init.
    pub fn randomized<R: Rng + ?Sized>(spec: InnSpec, rng: &mut R, output_scale: f64) -> Result<Self> {
        let mut params = Self::identity(spec)?;
        for block in &mut params.blocks {
            for role in [Role::P1, Role::P2, Role::Q1, Role::Q2] {
                let mlp = block.mlp_mut(role);
                let last = mlp.layers.len() - 1;
                for (k, layer) in mlp.layers.iter_mut().enumerate() {
                    let fan_in = layer.inputs as f64;
                    let w_bound = math::sqrt(6.0 / fan_in);
                    let b_bound = 1.0 / math::sqrt(fan_in);
                    let scale = if k == last { output_scale } else { 1.0 };
                    if scale == 0.0 {
                        continue;
                    }
                    for w in &mut layer.weights {
                        *w = scale * rng.random_range(-w_bound..w_bound);
                    }
                    for b in &mut layer.bias {
                        *b = scale * rng.random_range(-b_bound..b_bound);
                    }
                }
            }
        }
        Ok(params)
    }

    pub fn from_blocks(spec: InnSpec, blocks: Vec<CouplingBlock>) -> Result<Self> {
        spec.validate()?;
        if blocks.len() != spec.block_count {
            return Err(Error::arg("block count does not match the architecture"));
        }
        for b in &blocks {
            let roles = [Role::P1, Role::P2, Role::Q1, Role::Q2];
            if !roles.iter().all(|&r| b.mlp(r).matches(&spec.subnet)) {
                return Err(Error::arg("subnet shape does not match the architecture"));
            }
            if !roles.iter().all(|&r| b.mlp(r).is_finite()) {
                return Err(Error::NonFinite("weight"));
            }
            if b.scale_clamp != spec.scale_clamp {
                return Err(Error::arg("block scale_clamp differs from the architecture"));
            }
        }
        Ok(Self { spec, blocks })
    }

    /// Rebuild from the canonical flat layout: block, then subnet
    /// `(p1, p2, q1, q2)`, then layer, with row-major weights before biases.
    pub fn from_flat(spec: InnSpec, flat: &[f64]) -> Result<Self> {
        spec.validate()?;
        if flat.len() != spec.param_count() {
            return Err(Error::arg(alloc::format!(
                "expected {} parameters, got {}",
                spec.param_count(),
                flat.len()
            )));
        }
        if flat.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("weight"));
        }
        let n = spec.subnet.param_count();
        let blocks = (0..spec.block_count)
            .map(|b| {
                let sub = |r: Role| {
                    let off = spec.subnet_offset(b, r);
                    Mlp::from_flat(&spec.subnet, &flat[off..off + n])
                };
                CouplingBlock {
                    p1: sub(Role::P1),
                    p2: sub(Role::P2),
                    q1: sub(Role::Q1),
                    q2: sub(Role::Q2),
                    scale_clamp: spec.scale_clamp,
                }
            })
            .collect();
        Ok(Self { spec, blocks })
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.spec.param_count());
        for b in &self.blocks {
            for r in [Role::P1, Role::P2, Role::Q1, Role::Q2] {
                b.mlp(r).write_flat(&mut out);
            }
        }
        out
    }

    pub fn spec(&self) -> &InnSpec {
        &self.spec
    }

    pub fn blocks(&self) -> &[CouplingBlock] {
        &self.blocks
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// 2D forward map.
    pub fn forward(&self, u: [f64; 2]) -> Result<[f64; 2]> {
        check_finite2(u)?;
        let mut x = u;
        for (i, b) in self.blocks.iter().enumerate() {
            x = if i % 2 == 0 { b.forward_raw(x) } else { swap(b.forward_raw(swap(x))) };
            x = finite2(x, i)?;
        }
        Ok(x)
    }

    /// 2D inverse map.
    pub fn inverse(&self, v: [f64; 2]) -> Result<[f64; 2]> {
        check_finite2(v)?;
        let mut x = v;
        for (i, b) in self.blocks.iter().enumerate().rev() {
            x = if i % 2 == 0 { b.inverse_raw(x) } else { swap(b.inverse_raw(swap(x))) };
            x = finite2(x, i)?;
        }
        Ok(x)
    }

    /// 2D forward map and its Jacobian, by forward-mode differentiation
    /// through the coupling algebra.
    pub fn forward_with_jacobian(&self, u: [f64; 2]) -> Result<([f64; 2], [[f64; 2]; 2])> {
        check_finite2(u)?;
        let mut x = u;
        let mut jac: Mat2 = [[1.0, 0.0], [0.0, 1.0]];
        for (i, b) in self.blocks.iter().enumerate() {
            let (y, jb) = if i % 2 == 0 {
                b.forward_jacobian_raw(x)
            } else {
                let (y, jb) = b.forward_jacobian_raw(swap(x));
                (swap(y), matmul2(&SWAP, &matmul2(&jb, &SWAP)))
            };
            jac = matmul2(&jb, &jac);
            x = finite2(y, i)?;
            if !jac.iter().flatten().all(|v| v.is_finite()) {
                return Err(Error::BlockOverflow { block: i });
            }
        }
        Ok((x, jac))
    }

    /// `F⁻¹(v)` together with the Jacobian of `F` at that preimage, in one
    /// pass through the blocks.
    pub fn inverse_with_forward_jacobian(&self, v: [f64; 2]) -> Result<([f64; 2], [[f64; 2]; 2])> {
        check_finite2(v)?;
        let mut x = v;
        let mut jac: Mat2 = [[1.0, 0.0], [0.0, 1.0]];
        for (i, b) in self.blocks.iter().enumerate().rev() {
            let (y, jb) = if i % 2 == 0 {
                b.inverse_forward_jacobian_raw(x)
            } else {
                let (y, jb) = b.inverse_forward_jacobian_raw(swap(x));
                (swap(y), matmul2(&SWAP, &matmul2(&jb, &SWAP)))
            };
            jac = matmul2(&jac, &jb);
            x = finite2(y, i)?;
            if !jac.iter().flatten().all(|v| v.is_finite()) {
                return Err(Error::BlockOverflow { block: i });
            }
        }
        Ok((x, jac))
    }
}

pub fn inn_forward(u: [f64; 2], params: &DiffeoParams) -> Result<[f64; 2]> {
    params.forward(u)
}

pub fn inn_inverse(v: [f64; 2], params: &DiffeoParams) -> Result<[f64; 2]> {
    params.inverse(v)
}

/// `F`: the INN on `(x, z)`, identity on `y`.
pub fn full_map(s: &State3, params: &DiffeoParams) -> Result<State3> {
    s.check()?;
    let [x, z] = params.forward([s.x, s.z])?;
    Ok(State3::new(x, s.y, z))
}

/// `F⁻¹`.
pub fn full_map_inverse(s: &State3, params: &DiffeoParams) -> Result<State3> {
    s.check()?;
    let [x, z] = params.inverse([s.x, s.z])?;
    Ok(State3::new(x, s.y, z))
}

/// 3×3 Jacobian, rows and columns ordered `(x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jacobian3(pub [[f64; 3]; 3]);

impl Jacobian3 {
    pub fn identity() -> Self {
        Jacobian3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    fn from_plane(j: &Mat2) -> Self {
        Jacobian3([[j[0][0], 0.0, j[0][1]], [0.0, 1.0, 0.0], [j[1][0], 0.0, j[1][1]]])
    }

    /// Determinant of the `(x, z)` block.
    pub fn plane_det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * m[2][2] - m[0][2] * m[2][0]
    }

    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }
}

pub fn jacobian_f(s: &State3, params: &DiffeoParams) -> Result<Jacobian3> {
    s.check()?;
    let (_, j) = params.forward_with_jacobian([s.x, s.z])?;
    Ok(Jacobian3::from_plane(&j))
}

// ---- tape evaluation (batched, differentiable in the parameters) ----

fn subnet_on_tape(tape: &mut Tape<'_>, spec: &InnSpec, block: usize, role: Role, input: Var) -> Result<Var> {
    let mut at = spec.subnet_offset(block, role);
    let shapes = spec.subnet.layer_shapes();
    let last = shapes.len() - 1;
    let mut h = input;
    for (k, (i, o)) in shapes.into_iter().enumerate() {
        let w = tape.param(at, o, i)?;
        at += o * i;
        let b = tape.param(at, 1, o)?;
        at += o;
        h = tape.affine(h, w, Some(b))?;
        if k != last {
            h = match spec.subnet.activation {
                Activation::Tanh => tape.tanh(h),
                Activation::LeakyRelu => tape.leaky_relu(h, LEAKY_RELU_SLOPE),
            };
        }
    }
    Ok(h)
}

fn log_scale_on_tape(tape: &mut Tape<'_>, spec: &InnSpec, block: usize, role: Role, input: Var) -> Result<Var> {
    let p = subnet_on_tape(tape, spec, block, role, input)?;
    let c = spec.scale_clamp;
    let t = tape.scale(p, 1.0 / c);
    let t = tape.tanh(t);
    Ok(tape.scale(t, c))
}

fn block_forward_on_tape(tape: &mut Tape<'_>, spec: &InnSpec, block: usize, u1: Var, u2: Var) -> Result<(Var, Var)> {
    let s2 = log_scale_on_tape(tape, spec, block, Role::P2, u2)?;
    let e2 = tape.exp(s2);
    let t2 = subnet_on_tape(tape, spec, block, Role::Q2, u2)?;
    let v1 = tape.mul(u1, e2)?;
    let v1 = tape.add(v1, t2)?;
    let s1 = log_scale_on_tape(tape, spec, block, Role::P1, v1)?;
    let e1 = tape.exp(s1);
    let t1 = subnet_on_tape(tape, spec, block, Role::Q1, v1)?;
    let v2 = tape.mul(u2, e1)?;
    let v2 = tape.add(v2, t1)?;
    Ok((v1, v2))
}

fn block_inverse_on_tape(tape: &mut Tape<'_>, spec: &InnSpec, block: usize, v1: Var, v2: Var) -> Result<(Var, Var)> {
    let s1 = log_scale_on_tape(tape, spec, block, Role::P1, v1)?;
    let s1 = tape.scale(s1, -1.0);
    let e1 = tape.exp(s1);
    let t1 = subnet_on_tape(tape, spec, block, Role::Q1, v1)?;
    let u2 = tape.sub(v2, t1)?;
    let u2 = tape.mul(u2, e1)?;
    let s2 = log_scale_on_tape(tape, spec, block, Role::P2, u2)?;
    let s2 = tape.scale(s2, -1.0);
    let e2 = tape.exp(s2);
    let t2 = subnet_on_tape(tape, spec, block, Role::Q2, u2)?;
    let u1 = tape.sub(v1, t2)?;
    let u1 = tape.mul(u1, e2)?;
    Ok((u1, u2))
}

/// Batched forward map recorded on `tape`. `a` and `b` are `n × 1`
/// columns holding the first and second coordinates; the tape's parameter
/// vector must use the layout of `spec`.
pub fn forward_on_tape(tape: &mut Tape<'_>, spec: &InnSpec, a: Var, b: Var) -> Result<(Var, Var)> {
    let (mut a, mut b) = (a, b);
    for i in 0..spec.block_count {
        if i % 2 == 0 {
            (a, b) = block_forward_on_tape(tape, spec, i, a, b)?;
        } else {
            (b, a) = block_forward_on_tape(tape, spec, i, b, a)?;
        }
    }
    Ok((a, b))
}

/// Batched inverse map recorded on `tape`.
pub fn inverse_on_tape(tape: &mut Tape<'_>, spec: &InnSpec, a: Var, b: Var) -> Result<(Var, Var)> {
    let (mut a, mut b) = (a, b);
    for i in (0..spec.block_count).rev() {
        if i % 2 == 0 {
            (a, b) = block_inverse_on_tape(tape, spec, i, a, b)?;
        } else {
            (b, a) = block_inverse_on_tape(tape, spec, i, b, a)?;
        }
    }
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn small_spec(blocks: usize) -> InnSpec {
        InnSpec {
            block_count: blocks,
            subnet: SubnetSpec::coupling(vec![8, 8], Activation::LeakyRelu),
            scale_clamp: 2.0,
        }
    }

    fn random_params(seed: u64, blocks: usize, scale: f64) -> DiffeoParams {
        DiffeoParams::randomized(small_spec(blocks), &mut stream(seed, Stream::Init), scale).unwrap()
    }

    fn translation_block(spec: &SubnetSpec, c: f64) -> CouplingBlock {
        let mut b = CouplingBlock::identity(spec, 2.0);
        b.q2 = Mlp::constant(spec, c);
        b
    }

    /// Straight transcription of the coupling equations, one scalar at a time.
    fn oracle_forward(b: &CouplingBlock, u: [f64; 2]) -> [f64; 2] {
        fn net(m: &Mlp, t: f64) -> f64 {
            let mut h = vec![t];
            for (k, l) in m.layers.iter().enumerate() {
                let mut out = Vec::new();
                for r in 0..l.outputs {
                    let mut s = l.bias[r];
                    for c in 0..l.inputs {
                        s += l.weights[r * l.inputs + c] * h[c];
                    }
                    if k + 1 < m.layers.len() {
                        s = if s > 0.0 { s } else { 0.01 * s };
                    }
                    out.push(s);
                }
                h = out;
            }
            h[0]
        }
        let c = b.scale_clamp;
        let s2 = c * (net(&b.p2, u[1]) / c).tanh();
        let v1 = u[0] * s2.exp() + net(&b.q2, u[1]);
        let s1 = c * (net(&b.p1, v1) / c).tanh();
        let v2 = u[1] * s1.exp() + net(&b.q1, v1);
        [v1, v2]
    }

    #[test]
    fn zero_subnets_are_identity() {
        let spec = SubnetSpec::default();
        let b = CouplingBlock::identity(&spec, 2.0);
        for u in [[0.3, -0.7], [5.0, 2.0], [0.0, 0.0]] {
            assert_eq!(coupling_forward(u, &b).unwrap(), u);
            assert_eq!(coupling_inverse(u, &b).unwrap(), u);
        }
        let p = DiffeoParams::identity(InnSpec::default()).unwrap();
        assert_eq!(p.forward([1.5, -0.25]).unwrap(), [1.5, -0.25]);
        assert_eq!(p.inverse([1.5, -0.25]).unwrap(), [1.5, -0.25]);
    }

    #[test]
    fn translation_block_shifts_first_lane() {
        let spec = SubnetSpec::default();
        let b = translation_block(&spec, 0.5);
        assert_eq!(coupling_forward([1.0, 2.0], &b).unwrap(), [1.5, 2.0]);
        assert_eq!(coupling_inverse([1.5, 2.0], &b).unwrap(), [1.0, 2.0]);
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let p = random_params(11, 1, 0.5);
        let b = &p.blocks()[0];
        let u = [0.3, -0.7];
        let got = coupling_forward(u, b).unwrap();
        let want = oracle_forward(b, u);
        assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
        // A single-block network is exactly the block.
        assert_eq!(p.forward(u).unwrap(), got);
    }

    #[test]
    fn block_roundtrip() {
        let p = random_params(3, 1, 0.8);
        let b = &p.blocks()[0];
        let mut rng = stream(99, Stream::EvalStarts);
        for _ in 0..10_000 {
            let u = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let back = coupling_inverse(coupling_forward(u, b).unwrap(), b).unwrap();
            assert!((back[0] - u[0]).abs() < 1e-9 && (back[1] - u[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn lanes_alternate_between_blocks() {
        // Two translation blocks on q2: the first shifts x, the second
        // (seeing swapped lanes) shifts z.
        let spec = small_spec(2);
        let blocks = vec![translation_block(&spec.subnet, 1.0), translation_block(&spec.subnet, -2.0)];
        let p = DiffeoParams::from_blocks(spec, blocks).unwrap();
        assert_eq!(p.forward([0.5, 0.5]).unwrap(), [1.5, -1.5]);
    }

    #[test]
    fn flat_roundtrip_and_layout() {
        let p = random_params(5, 3, 0.3);
        let flat = p.flatten();
        assert_eq!(flat.len(), p.param_count());
        assert_eq!(p.param_count(), 3 * 4 * (8 + 8 + 64 + 8 + 8 + 1));
        let q = DiffeoParams::from_flat(p.spec().clone(), &flat).unwrap();
        assert_eq!(p, q);
        // Block 1, subnet q1, first weight.
        let off = p.spec().subnet_offset(1, Role::Q1);
        assert_eq!(flat[off], p.blocks()[1].q1.layers[0].weights[0]);
        assert!(DiffeoParams::from_flat(p.spec().clone(), &flat[1..]).is_err());
    }

    #[test]
    fn init_starts_at_identity() {
        let p = DiffeoParams::init(InnSpec::default(), &mut stream(1, Stream::Init)).unwrap();
        let u = [0.7, -1.1];
        assert_eq!(p.forward(u).unwrap(), u);
        // Hidden weights are drawn, not zero.
        assert!(p.blocks()[0].p1.layers[1].weights.iter().any(|&w| w != 0.0));
    }

    #[test]
    fn full_map_keeps_y_bit_exact() {
        let p = random_params(8, 4, 0.7);
        for y in [0.0, -0.0, 1e-300, 3.7, -2.25] {
            let s = State3::new(0.4, y, -0.9);
            assert_eq!(full_map(&s, &p).unwrap().y.to_bits(), y.to_bits());
            assert_eq!(full_map_inverse(&s, &p).unwrap().y.to_bits(), y.to_bits());
        }
        let s = State3::new(0.4, 1.0, -0.9);
        let out = full_map(&s, &p).unwrap();
        assert_eq!([out.x, out.z], p.forward([0.4, -0.9]).unwrap());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for seed in 0..20 {
            let p = random_params(seed, 3, 0.6);
            let s = State3::new(0.1 * seed as f64 - 1.0, 0.3, 0.5 - 0.05 * seed as f64);
            let j = jacobian_f(&s, &p).unwrap();
            let h = 1e-5;
            for col in 0..3 {
                let mut a = s.to_array();
                let mut b = s.to_array();
                a[col] += h;
                b[col] -= h;
                let fa = full_map(&State3::from_array(a), &p).unwrap().to_array();
                let fb = full_map(&State3::from_array(b), &p).unwrap().to_array();
                for row in 0..3 {
                    let fd = (fa[row] - fb[row]) / (2.0 * h);
                    let an = j.0[row][col];
                    assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "seed {seed} ({row},{col}): {an} vs {fd}");
                }
            }
            assert!(j.plane_det() > 0.0);
        }
    }

    #[test]
    fn one_pass_inverse_jacobian_agrees_with_two_passes() {
        for seed in 0..20 {
            let p = random_params(seed, 3, 0.6);
            let v = [0.15 * seed as f64 - 1.4, 1.1 - 0.1 * seed as f64];
            let (u, j) = p.inverse_with_forward_jacobian(v).unwrap();
            assert_eq!(u, p.inverse(v).unwrap());
            let (_, j2) = p.forward_with_jacobian(u).unwrap();
            for r in 0..2 {
                for c in 0..2 {
                    assert!((j[r][c] - j2[r][c]).abs() <= 1e-10 * j2[r][c].abs().max(1.0), "seed {seed}: {j:?} vs {j2:?}");
                }
            }
        }
    }

    #[test]
    fn jacobian_of_identity_and_translation() {
        let spec = small_spec(2);
        let p = DiffeoParams::identity(spec.clone()).unwrap();
        assert_eq!(jacobian_f(&State3::new(0.2, 0.1, 0.3), &p).unwrap(), Jacobian3::identity());
        let blocks = vec![translation_block(&spec.subnet, 1.0), translation_block(&spec.subnet, 0.5)];
        let p = DiffeoParams::from_blocks(spec, blocks).unwrap();
        assert_eq!(jacobian_f(&State3::new(0.2, 0.1, 0.3), &p).unwrap(), Jacobian3::identity());
    }

    #[test]
    fn tape_matches_pointwise_evaluation() {
        let p = random_params(21, 3, 0.5);
        let flat = p.flatten();
        let pts = [[0.3, -0.2], [1.1, 0.9], [-2.0, 0.4]];
        let mut tape = Tape::new(&flat);
        let a = tape.constant(3, 1, pts.iter().map(|q| q[0]).collect()).unwrap();
        let b = tape.constant(3, 1, pts.iter().map(|q| q[1]).collect()).unwrap();
        let (fa, fb) = forward_on_tape(&mut tape, p.spec(), a, b).unwrap();
        let (ia, ib) = inverse_on_tape(&mut tape, p.spec(), a, b).unwrap();
        for (k, q) in pts.iter().enumerate() {
            let f = p.forward(*q).unwrap();
            let g = p.inverse(*q).unwrap();
            assert!((tape.value(fa)[k] - f[0]).abs() < 1e-12);
            assert!((tape.value(fb)[k] - f[1]).abs() < 1e-12);
            assert!((tape.value(ia)[k] - g[0]).abs() < 1e-12);
            assert!((tape.value(ib)[k] - g[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn overflow_reports_block() {
        let spec = small_spec(2);
        let mut blocks = vec![CouplingBlock::identity(&spec.subnet, 2.0), CouplingBlock::identity(&spec.subnet, 2.0)];
        blocks[1].q2 = Mlp::constant(&spec.subnet, f64::MAX);
        let p = DiffeoParams::from_blocks(spec, blocks).unwrap();
        assert_eq!(p.forward([1e308, 1e308]), Err(Error::BlockOverflow { block: 1 }));
        assert!(p.forward([f64::NAN, 0.0]).is_err());
    }
}
