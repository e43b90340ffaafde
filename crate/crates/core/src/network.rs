//! The target N-layer network: forward pass, exact gradient via the
//! backpropagation recursion, a finite-difference oracle, and the exact
//! projected-GD reference trajectory.
//!
//! Layer j computes p(j)\[k\] = r(v_{j,k}^T p(j-1)) for every layer including
//! the output layer, with p(0) = x. The flat parameter vector concatenates
//! the rows v_{j,k} layer by layer.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::{Error, Result};

/// Dimensions of the target network.
///
/// `depth` is the number of layers N (>= 2); `width` is the hidden width K.
/// The first layer maps `input_dim -> width`, middle layers `width -> width`,
/// the output layer `width -> output_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub input_dim: usize,
    pub output_dim: usize,
    pub width: usize,
    pub depth: usize,
}

impl NetworkShape {
    pub fn new(input_dim: usize, output_dim: usize, width: usize, depth: usize) -> Result<Self> {
        let shape = NetworkShape {
            input_dim,
            output_dim,
            width,
            depth,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 || self.output_dim < 1 || self.width < 1 {
            return Err(Error::InvalidShape(format!(
                "dimensions must be >= 1, got {self:?}"
            )));
        }
        if self.depth < 2 {
            return Err(Error::InvalidShape(format!(
                "depth must be >= 2, got {}",
                self.depth
            )));
        }
        Ok(())
    }

    /// Cumulative parameter counts D_0..D_N; D_j is the number of parameters
    /// in the first j layers.
    pub fn layer_offsets(&self) -> Vec<usize> {
        let (dx, dy, k, n) = (self.input_dim, self.output_dim, self.width, self.depth);
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        offsets.push(dx * k);
        for j in 2..n {
            offsets.push((j - 1) * k * k + dx * k);
        }
        offsets.push((n - 2) * k * k + (dx + dy) * k);
        offsets
    }

    /// Total parameter count D_N = (N-2)K^2 + (d_x + d_y)K.
    pub fn param_count(&self) -> usize {
        (self.depth - 2) * self.width * self.width
            + (self.input_dim + self.output_dim) * self.width
    }

    /// Number of rows in layer j (1-based): K for hidden layers, d_y for the
    /// output layer.
    pub fn layer_width(&self, j: usize) -> usize {
        debug_assert!(j >= 1 && j <= self.depth);
        if j < self.depth {
            self.width
        } else {
            self.output_dim
        }
    }

    /// Length of each row v_{j,k}: d_x for the first layer, K otherwise.
    pub fn row_len(&self, j: usize) -> usize {
        debug_assert!(j >= 1 && j <= self.depth);
        if j == 1 {
            self.input_dim
        } else {
            self.width
        }
    }
}

/// Flat parameter vector with per-layer row views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub shape: NetworkShape,
    w: Vec<f64>,
}

impl NetworkParams {
    pub fn zeros(shape: NetworkShape) -> Self {
        let len = shape.param_count();
        NetworkParams {
            shape,
            w: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: NetworkShape, w: Vec<f64>) -> Result<Self> {
        if w.len() != shape.param_count() {
            return Err(Error::DimensionMismatch {
                expected: shape.param_count(),
                got: w.len(),
                context: "parameter vector".into(),
            });
        }
        Ok(NetworkParams { shape, w })
    }

    /// Uniform coordinates in [-scale, scale], deterministic in the seed.
    pub fn random(shape: NetworkShape, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let w = (0..shape.param_count())
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        NetworkParams { shape, w }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.w
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.w
    }

    /// Row v_{j,k} of layer j (j is 1-based, k is 0-based).
    pub fn row(&self, j: usize, k: usize) -> &[f64] {
        let offsets = self.shape.layer_offsets();
        let len = self.shape.row_len(j);
        let start = offsets[j - 1] + k * len;
        &self.w[start..start + len]
    }

    /// Layer matrix V_j as a vector of row slices.
    pub fn layer_rows(&self, j: usize) -> Vec<&[f64]> {
        (0..self.shape.layer_width(j))
            .map(|k| self.row(j, k))
            .collect()
    }

    /// Largest row l2 norm over all layers (the measured B_v).
    pub fn max_row_norm(&self) -> f64 {
        let mut best: f64 = 0.0;
        for j in 1..=self.shape.depth {
            for k in 0..self.shape.layer_width(j) {
                best = best.max(l2_norm(self.row(j, k)));
            }
        }
        best
    }
}

/// In-context examples plus the test query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<(Vec<f64>, Vec<f64>)>,
    pub query: Vec<f64>,
}

impl Dataset {
    pub fn new(examples: Vec<(Vec<f64>, Vec<f64>)>, query: Vec<f64>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::InvalidShape("dataset needs >= 1 example".into()));
        }
        let dx = examples[0].0.len();
        let dy = examples[0].1.len();
        for (x, y) in &examples {
            if x.len() != dx || y.len() != dy {
                return Err(Error::DimensionMismatch {
                    expected: dx,
                    got: x.len(),
                    context: "dataset example dims".into(),
                });
            }
        }
        if query.len() != dx {
            return Err(Error::DimensionMismatch {
                expected: dx,
                got: query.len(),
                context: "test query".into(),
            });
        }
        Ok(Dataset { examples, query })
    }

    /// Uniform coordinates scaled so that ||x||_2 <= b_x and ||y||_2 <= b_y.
    pub fn random(
        shape: NetworkShape,
        n_examples: usize,
        b_x: f64,
        b_y: f64,
        seed: u64,
    ) -> Result<Self> {
        if n_examples < 1 {
            return Err(Error::InvalidShape("dataset needs >= 1 example".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let sx = b_x / (shape.input_dim as f64).sqrt();
        let sy = b_y / (shape.output_dim as f64).sqrt();
        let sample = |dim: usize, s: f64, rng: &mut ChaCha12Rng| -> Vec<f64> {
            (0..dim).map(|_| rng.random_range(-s..=s)).collect()
        };
        let examples = (0..n_examples)
            .map(|_| {
                let x = sample(shape.input_dim, sx, &mut rng);
                let y = sample(shape.output_dim, sy, &mut rng);
                (x, y)
            })
            .collect();
        let query = sample(shape.input_dim, sx, &mut rng);
        Dataset::new(examples, query)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Measured max ||x_i||_2 including the test query.
    pub fn bound_x(&self) -> f64 {
        self.examples
            .iter()
            .map(|(x, _)| l2_norm(x))
            .chain(std::iter::once(l2_norm(&self.query)))
            .fold(0.0, f64::max)
    }

    /// Measured max ||y_i||_2.
    pub fn bound_y(&self) -> f64 {
        self.examples
            .iter()
            .map(|(_, y)| l2_norm(y))
            .fold(0.0, f64::max)
    }
}

/// Coordinate-wise box [-b, b]; projection is clipping, which is exactly one
/// ReLU MLP. A row of length m then satisfies ||v||_2 <= sqrt(m) * b.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub b: f64,
}

impl DomainBox {
    pub fn new(b: f64) -> Result<Self> {
        if !(b > 0.0) || !b.is_finite() {
            return Err(Error::InvalidConfig(format!("box bound must be > 0, got {b}")));
        }
        Ok(DomainBox { b })
    }

    #[inline]
    pub fn clip(&self, x: f64) -> f64 {
        x.clamp(-self.b, self.b)
    }

    pub fn clip_vec(&self, v: &mut [f64]) {
        for x in v {
            *x = self.clip(*x);
        }
    }

    /// Row-norm bound B_v implied by the box: sqrt(max(K, d_x)) * b.
    pub fn row_norm_bound(&self, shape: NetworkShape) -> f64 {
        (shape.width.max(shape.input_dim) as f64).sqrt() * self.b
    }
}

/// Layer outputs p(0..N); p(0) = x.
pub fn forward_all(params: &NetworkParams, act: Activation, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let shape = params.shape;
    if x.len() != shape.input_dim {
        return Err(Error::DimensionMismatch {
            expected: shape.input_dim,
            got: x.len(),
            context: "forward input".into(),
        });
    }
    let mut outputs = Vec::with_capacity(shape.depth + 1);
    outputs.push(x.to_vec());
    for j in 1..=shape.depth {
        let prev = &outputs[j - 1];
        let layer: Vec<f64> = (0..shape.layer_width(j))
            .map(|k| act.value(dot(params.row(j, k), prev)))
            .collect();
        outputs.push(layer);
    }
    Ok(outputs)
}

/// Per-example chain-rule intermediates at exact precision, used by the
/// verification passes: layer outputs p(j), activation derivatives r'(j),
/// loss gradient u, and sensitivities s(j).
#[derive(Debug, Clone)]
pub struct ChainIntermediates {
    /// p\[j\], j = 0..=N
    pub p: Vec<Vec<f64>>,
    /// rprime\[j\] has entries r'(v_{j+1,k}^T p(j)) for j = 0..=N-1
    pub rprime: Vec<Vec<f64>>,
    /// u = 2 (p(N) - y) for squared loss
    pub u: Vec<f64>,
    /// s\[j\], j = 1..=N (index 0 unused)
    pub s: Vec<Vec<f64>>,
}

/// Exact intermediates for one example under squared loss.
pub fn chain_intermediates(
    params: &NetworkParams,
    act: Activation,
    x: &[f64],
    y: &[f64],
) -> Result<ChainIntermediates> {
    let shape = params.shape;
    if y.len() != shape.output_dim {
        return Err(Error::DimensionMismatch {
            expected: shape.output_dim,
            got: y.len(),
            context: "label".into(),
        });
    }
    let p = forward_all(params, act, x)?;
    let depth = shape.depth;
    // rprime[j][k] = r'(v_{j+1,k}^T p(j))
    let rprime: Vec<Vec<f64>> = (0..depth)
        .map(|j| {
            (0..shape.layer_width(j + 1))
                .map(|k| act.derivative(dot(params.row(j + 1, k), &p[j])))
                .collect()
        })
        .collect();
    let u: Vec<f64> = p[depth].iter().zip(y).map(|(t, yi)| 2.0 * (t - yi)).collect();
    let mut s = vec![Vec::new(); depth + 1];
    s[depth] = rprime[depth - 1].iter().zip(&u).map(|(r, ui)| r * ui).collect();
    for j in (1..depth).rev() {
        // s(j)[k] = r'(j-1)[k] * sum_m v_{j+1,m}[k] * s(j+1)[m]
        let next = &s[j + 1];
        s[j] = (0..shape.width)
            .map(|k| {
                let backsum: f64 = (0..shape.layer_width(j + 1))
                    .map(|m| params.row(j + 1, m)[k] * next[m])
                    .sum();
                rprime[j - 1][k] * backsum
            })
            .collect();
    }
    Ok(ChainIntermediates { p, rprime, u, s })
}

/// Empirical risk (1/2n) sum_i ||p_i(N) - y_i||_2^2.
pub fn loss(params: &NetworkParams, act: Activation, data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in &data.examples {
        let p = forward_all(params, act, x)?;
        let out = &p[params.shape.depth];
        total += out
            .iter()
            .zip(y)
            .map(|(t, yi)| (t - yi) * (t - yi))
            .sum::<f64>();
    }
    Ok(total / (2.0 * data.len() as f64))
}

/// Exact gradient of the empirical risk via the sensitivity recursion:
/// the block of the gradient for row v_{j,k} is (1/2n) sum_i s_i(j)\[k\] p_i(j-1).
pub fn exact_gradient(params: &NetworkParams, act: Activation, data: &Dataset) -> Result<Vec<f64>> {
    let shape = params.shape;
    let offsets = shape.layer_offsets();
    let mut grad = vec![0.0; shape.param_count()];
    for (x, y) in &data.examples {
        let ci = chain_intermediates(params, act, x, y)?;
        for j in 1..=shape.depth {
            let row_len = shape.row_len(j);
            for k in 0..shape.layer_width(j) {
                let base = offsets[j - 1] + k * row_len;
                let sv = ci.s[j][k];
                for (idx, pv) in ci.p[j - 1].iter().enumerate() {
                    grad[base + idx] += sv * pv;
                }
            }
        }
    }
    let inv = 1.0 / (2.0 * data.len() as f64);
    for g in &mut grad {
        *g *= inv;
    }
    Ok(grad)
}

/// Central-difference gradient, the independent oracle for `exact_gradient`.
pub fn finite_diff_gradient(
    params: &NetworkParams,
    act: Activation,
    data: &Dataset,
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("fd step must be > 0, got {h}")));
    }
    let mut probe = params.clone();
    let n = params.shape.param_count();
    let mut grad = vec![0.0; n];
    for k in 0..n {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + h;
        let up = loss(&probe, act, data)?;
        probe.as_mut_slice()[k] = orig - h;
        let down = loss(&probe, act, data)?;
        probe.as_mut_slice()[k] = orig;
        grad[k] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Relative l2 error with the floor the verification suite uses everywhere.
pub fn relative_l2_error(measured: &[f64], reference: &[f64]) -> f64 {
    let diff: f64 = measured
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / l2_norm(reference).max(1e-12)
}

/// Exact projected-GD trajectory w^0..w^L with w^0 = 0 and
/// w^{l+1} = clip(w^l - eta * grad(w^l)).
pub fn gd_trajectory(
    shape: NetworkShape,
    act: Activation,
    data: &Dataset,
    eta: f64,
    steps: usize,
    domain: DomainBox,
) -> Result<Vec<Vec<f64>>> {
    let mut traj = Vec::with_capacity(steps + 1);
    let mut w = NetworkParams::zeros(shape);
    traj.push(w.as_slice().to_vec());
    for _ in 0..steps {
        let grad = exact_gradient(&w, act, data)?;
        {
            let ws = w.as_mut_slice();
            for (wi, gi) in ws.iter_mut().zip(&grad) {
                *wi = domain.clip(*wi - eta * gi);
            }
        }
        traj.push(w.as_slice().to_vec());
    }
    Ok(traj)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// One serializable problem instance: network, data, and GD hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceDoc {
    pub shape: NetworkShape,
    pub activation_name: String,
    pub w: Vec<f64>,
    pub data: Vec<ExamplePair>,
    pub query: Vec<f64>,
    pub box_b: f64,
    pub eta: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExamplePair {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl InstanceDoc {
    pub fn pack(
        params: &NetworkParams,
        act: Activation,
        data: &Dataset,
        domain: DomainBox,
        eta: f64,
        seed: Option<u64>,
    ) -> Self {
        InstanceDoc {
            shape: params.shape,
            activation_name: act.name().to_string(),
            w: params.as_slice().to_vec(),
            data: data
                .examples
                .iter()
                .map(|(x, y)| ExamplePair {
                    x: x.clone(),
                    y: y.clone(),
                })
                .collect(),
            query: data.query.clone(),
            box_b: domain.b,
            eta,
            seed,
        }
    }

    pub fn unpack(&self) -> Result<(NetworkParams, Activation, Dataset, DomainBox, f64)> {
        let act = Activation::from_name(&self.activation_name)?;
        let params = NetworkParams::from_vec(self.shape, self.w.clone())?;
        let data = Dataset::new(
            self.data.iter().map(|p| (p.x.clone(), p.y.clone())).collect(),
            self.query.clone(),
        )?;
        let domain = DomainBox::new(self.box_b)?;
        Ok((params, act, data, domain, self.eta))
    }
}
