//! Dense multilayer perceptron with analytic gradients and Adam.
//!
//! Weights are stored row-major with shape `(out, in)`. Batched evaluation
//! keeps one sample per row, so a layer computes `Z = X Wᵀ + b` through a
//! single GEMM call.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Standard deviation of the Gaussian used for every weight and bias.
pub const INIT_STD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Parse(format!("unknown activation `{other}`"))),
        }
    }
}

/// Output head: linear for critics, `max_action * tanh(z)` for actors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputActivation {
    Linear,
    ScaledTanh(f64),
}

impl OutputActivation {
    fn apply(self, z: f64) -> f64 {
        match self {
            OutputActivation::Linear => z,
            OutputActivation::ScaledTanh(scale) => scale * z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            OutputActivation::Linear => 1.0,
            OutputActivation::ScaledTanh(scale) => {
                let t = z.tanh();
                scale * (1.0 - t * t)
            }
        }
    }
}

/// Weight and bias buffers of one dense layer. Shared by parameters,
/// gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensors {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `(outputs, inputs)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerTensors {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn w(&self, out: usize, inp: usize) -> f64 {
        self.weight[out * self.inputs + inp]
    }
}

/// Visits every scalar buffer of a layer list in a fixed order.
fn buffers(layers: &[LayerTensors]) -> impl Iterator<Item = &[f64]> {
    layers
        .iter()
        .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
}

fn buffers_mut(layers: &mut [LayerTensors]) -> impl Iterator<Item = &mut [f64]> {
    layers
        .iter_mut()
        .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
}

fn zeros_like(layers: &[LayerTensors]) -> Vec<LayerTensors> {
    layers
        .iter()
        .map(|l| LayerTensors::zeros(l.inputs, l.outputs))
        .collect()
}

fn same_shape(a: &[LayerTensors], b: &[LayerTensors]) -> bool {
    a.len() == b.len()
        && a
            .iter()
            .zip(b)
            .all(|(x, y)| x.inputs == y.inputs && x.outputs == y.outputs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<LayerTensors>,
    pub hidden: Activation,
    pub output: OutputActivation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerTensors>,
}

/// Row-major matrix, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies columns `[start, start + width)` into a new matrix.
    pub fn columns(&self, start: usize, width: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }
}

/// Validates a layer-dimension chain such as `[4, 256, 256, 256, 2]`.
pub fn check_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::Config(format!(
            "a network needs at least an input and an output dimension, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::Config(format!(
            "layer dimensions must be positive, got {layer_dims:?}"
        )));
    }
    Ok(())
}

/// Draws every weight and bias i.i.d. from `N(0, 0.2)`.
pub fn init_params<R: Rng + ?Sized>(
    layer_dims: &[usize],
    hidden: Activation,
    output: OutputActivation,
    rng: &mut R,
) -> Result<MlpParams> {
    check_dims(layer_dims)?;
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let layers = layer_dims
        .windows(2)
        .map(|pair| {
            let mut layer = LayerTensors::zeros(pair[0], pair[1]);
            for w in layer.weight.iter_mut() {
                *w = normal.sample(rng);
            }
            for b in layer.bias.iter_mut() {
                *b = normal.sample(rng);
            }
            layer
        })
        .collect();
    Ok(MlpParams {
        layers,
        hidden,
        output,
    })
}

/// Intermediate values of a batched forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Matrix,
    /// Pre-activation per layer.
    pub pre: Vec<Matrix>,
    /// Post-activation per layer; the last entry is the network output.
    pub post: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Matrix {
        self.post.last().expect("at least one layer")
    }
}

/// `c = alpha * a · b + beta * c` over strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass buffers whose extents cover every strided index
    // of the m×k, k×n and m×n operands; all shapes are checked before use.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

impl MlpParams {
    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.outputs));
        dims
    }

    pub fn num_params(&self) -> usize {
        buffers(&self.layers).map(<[f64]>::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        buffers(&self.layers).all(|b| b.iter().all(|x| x.is_finite()))
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        same_shape(&self.layers, &other.layers)
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        buffers(&self.layers).flat_map(|b| b.iter().copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        buffers_mut(&mut self.layers).flat_map(|b| b.iter_mut())
    }

    fn activation_at(&self, layer: usize) -> LayerAct {
        if layer + 1 == self.layers.len() {
            LayerAct::Output(self.output)
        } else {
            LayerAct::Hidden(self.hidden)
        }
    }

    /// Batched forward pass that records every intermediate.
    pub fn forward_batch(&self, input: &Matrix) -> Result<ForwardTrace> {
        if input.cols != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.cols
            )));
        }
        let batch = input.rows;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let prev = if idx == 0 { input } else { &post[idx - 1] };
            let mut z = Matrix::zeros(batch, layer.outputs);
            for r in 0..batch {
                z.row_mut(r).copy_from_slice(&layer.bias);
            }
            gemm(
                batch,
                layer.inputs,
                layer.outputs,
                &prev.data,
                layer.inputs as isize,
                1,
                &layer.weight,
                1,
                layer.inputs as isize,
                1.0,
                &mut z.data,
                layer.outputs as isize,
                1,
            );
            let act = self.activation_at(idx);
            let a = Matrix {
                rows: batch,
                cols: layer.outputs,
                data: z.data.iter().map(|&v| act.apply(v)).collect(),
            };
            pre.push(z);
            post.push(a);
        }
        Ok(ForwardTrace {
            input: input.clone(),
            pre,
            post,
        })
    }

    /// Batched output only.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        let mut trace = self.forward_batch(input)?;
        Ok(trace.post.pop().expect("non-empty"))
    }

    /// Backpropagates `output_grad` (one row per sample) through a recorded
    /// trace. Parameter gradients are summed over the batch.
    pub fn backward_batch(
        &self,
        trace: &ForwardTrace,
        output_grad: &Matrix,
    ) -> Result<(Gradients, Matrix)> {
        let batch = trace.input.rows;
        if output_grad.rows != batch || output_grad.cols != self.output_dim() {
            return Err(Error::Shape(format!(
                "output gradient is {}x{}, expected {}x{}",
                output_grad.rows,
                output_grad.cols,
                batch,
                self.output_dim()
            )));
        }
        if trace.pre.len() != self.layers.len() {
            return Err(Error::Shape("trace does not match network depth".into()));
        }
        let mut grads = zeros_like(&self.layers);
        let mut upstream = output_grad.clone();
        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            let act = self.activation_at(idx);
            let z = &trace.pre[idx];
            let a = &trace.post[idx];
            // dL/dz
            let delta: Vec<f64> = upstream
                .data
                .iter()
                .zip(z.data.iter().zip(&a.data))
                .map(|(&g, (&zv, &av))| g * act.derivative(zv, av))
                .collect();
            let prev = if idx == 0 {
                &trace.input
            } else {
                &trace.post[idx - 1]
            };
            let g = &mut grads[idx];
            // dW = deltaᵀ · prev
            gemm(
                layer.outputs,
                batch,
                layer.inputs,
                &delta,
                1,
                layer.outputs as isize,
                &prev.data,
                layer.inputs as isize,
                1,
                0.0,
                &mut g.weight,
                layer.inputs as isize,
                1,
            );
            for r in 0..batch {
                for (gb, d) in g
                    .bias
                    .iter_mut()
                    .zip(&delta[r * layer.outputs..(r + 1) * layer.outputs])
                {
                    *gb += d;
                }
            }
            // d(prev) = delta · W
            let mut down = Matrix::zeros(batch, layer.inputs);
            gemm(
                batch,
                layer.outputs,
                layer.inputs,
                &delta,
                layer.outputs as isize,
                1,
                &layer.weight,
                layer.inputs as isize,
                1,
                0.0,
                &mut down.data,
                layer.inputs as isize,
                1,
            );
            upstream = down;
        }
        Ok((Gradients { layers: grads }, upstream))
    }
}

#[derive(Clone, Copy)]
enum LayerAct {
    Hidden(Activation),
    Output(OutputActivation),
}

impl LayerAct {
    fn apply(self, z: f64) -> f64 {
        match self {
            LayerAct::Hidden(a) => a.apply(z),
            LayerAct::Output(o) => o.apply(z),
        }
    }

    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            LayerAct::Hidden(act) => act.derivative(z, a),
            LayerAct::Output(o) => o.derivative(z),
        }
    }
}

/// Single-sample forward pass.
pub fn forward(params: &MlpParams, input: &[f64]) -> Result<Vec<f64>> {
    let x = Matrix::from_rows(1, input.len(), input.to_vec())?;
    Ok(params.predict(&x)?.data)
}

/// Gradients of `output · output_grad` with respect to the parameters and
/// the input, for a single sample.
pub fn backward(
    params: &MlpParams,
    input: &[f64],
    output_grad: &[f64],
) -> Result<(Gradients, Vec<f64>)> {
    let x = Matrix::from_rows(1, input.len(), input.to_vec())?;
    let trace = params.forward_batch(&x)?;
    let g = Matrix::from_rows(1, output_grad.len(), output_grad.to_vec())?;
    let (grads, input_grad) = params.backward_batch(&trace, &g)?;
    Ok((grads, input_grad.data))
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: zeros_like(&params.layers),
        }
    }

    pub fn is_finite(&self) -> bool {
        buffers(&self.layers).all(|b| b.iter().all(|x| x.is_finite()))
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        buffers(&self.layers).flat_map(|b| b.iter().copied())
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if !same_shape(&self.layers, &other.layers) {
            return Err(Error::Shape("gradient shapes differ".into()));
        }
        for (dst, src) in buffers_mut(&mut self.layers).zip(buffers(&other.layers)) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for buf in buffers_mut(&mut self.layers) {
            for v in buf.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// Mean of several gradients, accumulated in slice order.
    pub fn average(parts: &[Gradients]) -> Result<Gradients> {
        let (first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::Internal("cannot average zero gradients".into()))?;
        let mut acc = first.clone();
        for g in rest {
            acc.add_assign(g)?;
        }
        if !rest.is_empty() {
            acc.scale(1.0 / parts.len() as f64);
        }
        Ok(acc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<LayerTensors>,
    pub v: Vec<LayerTensors>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &MlpParams, config: AdamConfig) -> Self {
        Self {
            m: zeros_like(&params.layers),
            v: zeros_like(&params.layers),
            t: 0,
            config,
        }
    }

    /// Zeroes both moments and the step counter.
    pub fn reset(&mut self) {
        self.m = zeros_like(&self.m);
        self.v = zeros_like(&self.v);
        self.t = 0;
    }

    /// One bias-corrected Adam update. Rejects non-finite gradients without
    /// touching the parameters or the moments.
    pub fn step(&mut self, params: &mut MlpParams, grads: &Gradients) -> Result<()> {
        if !same_shape(&params.layers, &grads.layers) || !same_shape(&params.layers, &self.m) {
            return Err(Error::Shape("adam: parameter/gradient shapes differ".into()));
        }
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient rejected by adam".into()));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let params_it = buffers_mut(&mut params.layers);
        let m_it = buffers_mut(&mut self.m);
        let v_it = buffers_mut(&mut self.v);
        for (((p, g), m), v) in params_it.zip(buffers(&grads.layers)).zip(m_it).zip(v_it) {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        if !params.is_finite() {
            return Err(Error::Numeric("adam produced non-finite parameters".into()));
        }
        Ok(())
    }
}

/// `target ← polyak · target + (1 − polyak) · main`.
pub fn polyak_average(target: &mut MlpParams, main: &MlpParams, polyak: f64) -> Result<()> {
    if !target.same_shape(main) {
        return Err(Error::Shape("polyak: target and main shapes differ".into()));
    }
    for (t, m) in buffers_mut(&mut target.layers).zip(buffers(&main.layers)) {
        for (tv, mv) in t.iter_mut().zip(m) {
            *tv = polyak * *tv + (1.0 - polyak) * mv;
        }
    }
    Ok(())
}

fn output_tag(output: OutputActivation) -> String {
    match output {
        OutputActivation::Linear => "linear".to_string(),
        OutputActivation::ScaledTanh(s) => format!("tanh*{s:?}"),
    }
}

fn output_from_tag(tag: &str) -> Result<OutputActivation> {
    if tag == "linear" {
        return Ok(OutputActivation::Linear);
    }
    tag.strip_prefix("tanh*")
        .and_then(|s| s.parse::<f64>().ok())
        .map(OutputActivation::ScaledTanh)
        .ok_or_else(|| Error::Parse(format!("unknown output activation `{tag}`")))
}

/// Writes a parameter snapshot: one text header line
/// `mlp <d0,d1,...> <hidden> <output>` followed by every weight matrix and
/// bias vector as little-endian `f64`, layer by layer.
pub fn write_snapshot<W: Write>(params: &MlpParams, out: &mut W) -> Result<()> {
    let dims = params
        .dims()
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",");
    writeln!(
        out,
        "mlp {dims} {} {}",
        params.hidden.tag(),
        output_tag(params.output)
    )?;
    for v in params.values() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_snapshot<R: BufRead>(input: &mut R) -> Result<MlpParams> {
    let mut header = String::new();
    input.read_line(&mut header)?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "mlp" {
        return Err(Error::Parse(format!("bad snapshot header `{}`", header.trim())));
    }
    let dims = fields[1]
        .split(',')
        .map(|d| d.parse::<usize>().map_err(|e| Error::Parse(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    check_dims(&dims).map_err(|e| Error::Parse(e.to_string()))?;
    let hidden = Activation::from_tag(fields[2])?;
    let output = output_from_tag(fields[3])?;
    let mut layers: Vec<LayerTensors> = dims
        .windows(2)
        .map(|p| LayerTensors::zeros(p[0], p[1]))
        .collect();
    let mut buf = [0u8; 8];
    for b in buffers_mut(&mut layers) {
        for v in b.iter_mut() {
            input.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    Ok(MlpParams {
        layers,
        hidden,
        output,
    })
}
