//! Dense feed-forward networks with a hand-written reverse pass.
//!
//! Parameters live in one flat vector laid out layer by layer, each layer as
//! its row-major `(out_dim, in_dim)` weight matrix followed by its bias. That
//! flat vector is the parameter vector every optimizer and aggregation
//! routine in the crate works on.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Hidden-layer nonlinearity. Output layers are always the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Architecture of a dense network: `dims = [input, hidden..., output]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct NetworkSpec {
    dims: Vec<usize>,
    activation: Activation,
}

#[derive(Deserialize)]
struct RawSpec {
    dims: Vec<usize>,
    #[serde(default)]
    activation: Activation,
}

impl TryFrom<RawSpec> for NetworkSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        NetworkSpec::new(raw.dims, raw.activation)
    }
}

impl NetworkSpec {
    pub fn new(dims: Vec<usize>, activation: Activation) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid(format!(
                "network needs at least input and output dims, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::invalid(format!("network dims must be >= 1, got {dims:?}")));
        }
        Ok(Self { dims, activation })
    }

    pub fn relu(dims: &[usize]) -> Result<Self> {
        Self::new(dims.to_vec(), Activation::Relu)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// Total parameter count P.
    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|d| d[0] * d[1] + d[1]).sum()
    }

    /// Offset of layer `l`'s weight block in the flat parameter vector.
    fn layer_offset(&self, l: usize) -> usize {
        self.dims[..=l].windows(2).map(|d| d[0] * d[1] + d[1]).sum()
    }
}

/// Borrowed view of one dense layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `(out_dim, in_dim)`.
    pub weights: &'a [f64],
    pub bias: &'a [f64],
}

/// A network's parameter vector together with the spec that shapes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WeightSetFile", into = "WeightSetFile")]
pub struct WeightSet {
    spec: NetworkSpec,
    params: Vec<f64>,
}

impl WeightSet {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self {
            spec: spec.clone(),
            params: vec![0.0; spec.param_count()],
        }
    }

    /// Inverse of [`WeightSet::flatten`].
    pub fn from_flat(spec: &NetworkSpec, params: Vec<f64>) -> Result<Self> {
        if params.len() != spec.param_count() {
            return Err(Error::shape(
                "WeightSet::from_flat",
                spec.param_count(),
                params.len(),
            ));
        }
        Ok(Self {
            spec: spec.clone(),
            params,
        })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn glorot<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let mut ws = Self::zeros(spec);
        for l in 0..spec.num_layers() {
            let (fan_in, fan_out) = (spec.dims[l], spec.dims[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let off = spec.layer_offset(l);
            for w in &mut ws.params[off..off + fan_in * fan_out] {
                *w = rng.random_range(-limit..limit);
            }
        }
        ws
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params.clone()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.params
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.params
    }

    pub fn layer(&self, l: usize) -> LayerView<'_> {
        let (in_dim, out_dim) = (self.spec.dims[l], self.spec.dims[l + 1]);
        let off = self.spec.layer_offset(l);
        let (weights, rest) = self.params[off..].split_at(in_dim * out_dim);
        LayerView {
            in_dim,
            out_dim,
            weights,
            bias: &rest[..out_dim],
        }
    }

    fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (in_dim, out_dim) = (self.spec.dims[l], self.spec.dims[l + 1]);
        let off = self.spec.layer_offset(l);
        let (weights, rest) = self.params[off..].split_at_mut(in_dim * out_dim);
        (weights, &mut rest[..out_dim])
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    fn fingerprint(&self) -> u64 {
        // FNV-1a over the raw bit patterns; only used to detect stale tapes.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.params {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WeightSetFile {
    spec: NetworkSpec,
    layers: Vec<LayerFile>,
}

impl From<WeightSet> for WeightSetFile {
    fn from(ws: WeightSet) -> Self {
        let layers = (0..ws.spec.num_layers())
            .map(|l| {
                let view = ws.layer(l);
                LayerFile {
                    w: view.weights.chunks(view.in_dim).map(<[f64]>::to_vec).collect(),
                    b: view.bias.to_vec(),
                }
            })
            .collect();
        WeightSetFile {
            spec: ws.spec,
            layers,
        }
    }
}

impl TryFrom<WeightSetFile> for WeightSet {
    type Error = Error;

    fn try_from(file: WeightSetFile) -> Result<Self> {
        let spec = file.spec;
        if file.layers.len() != spec.num_layers() {
            return Err(Error::shape(
                "weight checkpoint layers",
                spec.num_layers(),
                file.layers.len(),
            ));
        }
        let mut params = Vec::with_capacity(spec.param_count());
        for (l, layer) in file.layers.into_iter().enumerate() {
            let (in_dim, out_dim) = (spec.dims[l], spec.dims[l + 1]);
            if layer.w.len() != out_dim || layer.w.iter().any(|r| r.len() != in_dim) {
                return Err(Error::shape(
                    "weight checkpoint matrix",
                    format!("layer {l}: {out_dim}x{in_dim}"),
                    format!("{} rows", layer.w.len()),
                ));
            }
            if layer.b.len() != out_dim {
                return Err(Error::shape("weight checkpoint bias", out_dim, layer.b.len()));
            }
            for row in layer.w {
                params.extend(row);
            }
            params.extend(layer.b);
        }
        let ws = WeightSet::from_flat(&spec, params)?;
        if !ws.all_finite() {
            return Err(Error::NonFinite {
                context: "weight checkpoint".into(),
                detail: "parameters must be finite".into(),
            });
        }
        Ok(ws)
    }
}

/// Intermediates recorded by [`forward`] for use in [`backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    dims: Vec<usize>,
    fingerprint: u64,
    /// Input to each layer; entry 0 is the batch itself.
    layer_inputs: Vec<Matrix>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.layer_inputs[0].rows()
    }
}

/// Result of a reverse pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: WeightSet,
    /// Gradient with respect to the network input, for chaining networks.
    pub input: Matrix,
}

fn check_input(spec: &NetworkSpec, w: &WeightSet, x: &Matrix) -> Result<()> {
    if w.spec() != spec {
        return Err(Error::shape(
            "forward weights",
            format!("{:?}", spec.dims()),
            format!("{:?}", w.spec().dims()),
        ));
    }
    if x.cols() != spec.input_dim() {
        return Err(Error::shape("forward input columns", spec.input_dim(), x.cols()));
    }
    Ok(())
}

fn affine(layer: LayerView<'_>, x: &Matrix, relu: bool) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), layer.out_dim);
    for b in 0..x.rows() {
        let xr = x.row(b);
        let yr = out.row_mut(b);
        for (o, y) in yr.iter_mut().enumerate() {
            let wr = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            let mut s = layer.bias[o];
            for (wi, xi) in wr.iter().zip(xr) {
                s += wi * xi;
            }
            *y = if relu && s <= 0.0 { 0.0 } else { s };
        }
    }
    out
}

/// Runs the network on a batch, returning the outputs and the tape for [`backward`].
pub fn forward(spec: &NetworkSpec, w: &WeightSet, x: &Matrix) -> Result<(Matrix, Tape)> {
    check_input(spec, w, x)?;
    let n = spec.num_layers();
    let mut layer_inputs = Vec::with_capacity(n);
    let mut h = x.clone();
    for l in 0..n {
        let next = affine(w.layer(l), &h, l + 1 < n);
        layer_inputs.push(h);
        h = next;
    }
    let tape = Tape {
        dims: spec.dims().to_vec(),
        fingerprint: w.fingerprint(),
        layer_inputs,
    };
    Ok((h, tape))
}

/// Forward pass without recording a tape.
pub fn predict_logits(spec: &NetworkSpec, w: &WeightSet, x: &Matrix) -> Result<Matrix> {
    check_input(spec, w, x)?;
    let n = spec.num_layers();
    let mut h = x.clone();
    for l in 0..n {
        h = affine(w.layer(l), &h, l + 1 < n);
    }
    Ok(h)
}

/// Reverse pass: gradient of a scalar loss with respect to every parameter
/// and to the input, given `d_out = dLoss/dOutput`.
pub fn backward(spec: &NetworkSpec, w: &WeightSet, tape: &Tape, d_out: &Matrix) -> Result<Gradients> {
    if tape.dims != spec.dims() || w.spec() != spec {
        return Err(Error::StaleTape(format!(
            "tape recorded for dims {:?}, called with {:?}",
            tape.dims,
            spec.dims()
        )));
    }
    if tape.fingerprint != w.fingerprint() {
        return Err(Error::StaleTape(
            "weights changed since the forward pass".into(),
        ));
    }
    let batch = tape.batch_size();
    if d_out.rows() != batch || d_out.cols() != spec.output_dim() {
        return Err(Error::shape(
            "backward d_out",
            format!("{batch}x{}", spec.output_dim()),
            format!("{}x{}", d_out.rows(), d_out.cols()),
        ));
    }

    let mut grads = WeightSet::zeros(spec);
    let mut delta = d_out.clone();
    for l in (0..spec.num_layers()).rev() {
        let layer = w.layer(l);
        let a_in = &tape.layer_inputs[l];
        let (gw, gb) = grads.layer_mut(l);
        let mut d_in = Matrix::zeros(batch, layer.in_dim);
        for b in 0..batch {
            let dr = delta.row(b);
            let ar = a_in.row(b);
            let dir = d_in.row_mut(b);
            for (o, &d) in dr.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let wr = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                let gr = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for i in 0..layer.in_dim {
                    gr[i] += d * ar[i];
                    dir[i] += d * wr[i];
                }
            }
        }
        if l > 0 {
            // a_in is relu(z) of the previous layer: z > 0 exactly where a_in > 0.
            for (g, a) in d_in.as_mut_slice().iter_mut().zip(a_in.as_slice()) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        delta = d_in;
    }
    Ok(Gradients {
        weights: grads,
        input: delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer() {
        let spec = NetworkSpec::relu(&[2, 2]).unwrap();
        let w = WeightSet::from_flat(&spec, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let (y, _) = forward(&spec, &w, &x).unwrap();
        assert_eq!(y.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let spec = NetworkSpec::relu(&[3, 4, 2]).unwrap();
        let w = WeightSet::zeros(&spec);
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.5], [0.1, 0.2, 0.3]]).unwrap();
        let (y, _) = forward(&spec, &w, &x).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_layer_hand_evaluated() {
        // W1 = [[1, -1], [2, 0.5]], b1 = [0.5, -1]; W2 = [[1, -2]], b2 = [0.25]
        // x = [3, 1]: z1 = [2.5, 5.5] -> relu -> [2.5, 5.5]; y = 2.5 - 11 + 0.25 = -8.25
        // x = [-1, 2]: z1 = [-2.5, -2] -> [0, 0]; y = 0.25
        let spec = NetworkSpec::relu(&[2, 2, 1]).unwrap();
        let w = WeightSet::from_flat(
            &spec,
            vec![1.0, -1.0, 2.0, 0.5, 0.5, -1.0, 1.0, -2.0, 0.25],
        )
        .unwrap();
        let x = Matrix::from_rows(&[[3.0, 1.0], [-1.0, 2.0]]).unwrap();
        let (y, _) = forward(&spec, &w, &x).unwrap();
        assert_eq!(y.as_slice(), &[-8.25, 0.25]);
    }

    #[test]
    fn input_shape_mismatch_is_rejected() {
        let spec = NetworkSpec::relu(&[3, 2]).unwrap();
        let w = WeightSet::zeros(&spec);
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let err = forward(&spec, &w, &x).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
    }

    #[test]
    fn spec_validation() {
        assert!(NetworkSpec::relu(&[3]).is_err());
        assert!(NetworkSpec::relu(&[3, 0, 2]).is_err());
        assert_eq!(NetworkSpec::relu(&[3, 4, 2]).unwrap().param_count(), 3 * 4 + 4 + 4 * 2 + 2);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradient() {
        let spec = NetworkSpec::relu(&[3, 5, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = WeightSet::glorot(&spec, &mut rng);
        let x = Matrix::from_rows(&[[0.3, -0.7, 1.1]]).unwrap();
        let (_, tape) = forward(&spec, &w, &x).unwrap();
        let g = backward(&spec, &w, &tape, &Matrix::zeros(1, 2)).unwrap();
        assert!(g.weights.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_regression_gradient() {
        // Loss (w x - y)^2 with a single weight and zero bias.
        let spec = NetworkSpec::relu(&[1, 1]).unwrap();
        let (wv, xv, yv) = (0.7, 1.5, 2.0);
        let w = WeightSet::from_flat(&spec, vec![wv, 0.0]).unwrap();
        let x = Matrix::from_rows(&[[xv]]).unwrap();
        let (pred, tape) = forward(&spec, &w, &x).unwrap();
        let d = Matrix::from_vec(1, 1, vec![2.0 * (pred.get(0, 0) - yv)]).unwrap();
        let g = backward(&spec, &w, &tape, &d).unwrap();
        let expected = 2.0 * (wv * xv - yv) * xv;
        assert!((g.weights.as_slice()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn stale_tape_is_rejected() {
        let spec = NetworkSpec::relu(&[2, 3, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut w = WeightSet::glorot(&spec, &mut rng);
        let x = Matrix::from_rows(&[[0.5, 0.5]]).unwrap();
        let (_, tape) = forward(&spec, &w, &x).unwrap();
        w.as_mut_slice()[0] += 1.0;
        assert!(matches!(
            backward(&spec, &w, &tape, &Matrix::zeros(1, 2)),
            Err(Error::StaleTape(_))
        ));

        let other = NetworkSpec::relu(&[2, 4, 2]).unwrap();
        let w2 = WeightSet::zeros(&other);
        assert!(matches!(
            backward(&other, &w2, &tape, &Matrix::zeros(1, 2)),
            Err(Error::StaleTape(_))
        ));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let spec = NetworkSpec::relu(&[4, 8, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = WeightSet::glorot(&spec, &mut rng);
        let x = Matrix::from_rows(&[[0.1, 0.2, -0.3, 0.4], [1.0, -1.0, 2.0, 0.0]]).unwrap();
        let (a, _) = forward(&spec, &w, &x).unwrap();
        let (b, _) = forward(&spec, &w, &x).unwrap();
        let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn glorot_respects_bounds() {
        let spec = NetworkSpec::relu(&[10, 30, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = WeightSet::glorot(&spec, &mut rng);
        let l0 = w.layer(0);
        let lim = (6.0f64 / 40.0).sqrt();
        assert!(l0.weights.iter().all(|v| v.abs() <= lim));
        assert!(l0.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_json_layout() {
        let spec = NetworkSpec::relu(&[2, 1]).unwrap();
        let w = WeightSet::from_flat(&spec, vec![0.5, -1.25, 3.0]).unwrap();
        let json = serde_json::to_value(&w).unwrap();
        assert_eq!(
            json,
            serde_json::json!({
                "spec": {"dims": [2, 1], "activation": "relu"},
                "layers": [{"w": [[0.5, -1.25]], "b": [3.0]}]
            })
        );
        let back: WeightSet = serde_json::from_value(json).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn checkpoint_rejects_bad_shapes() {
        let bad = serde_json::json!({
            "spec": {"dims": [2, 1], "activation": "relu"},
            "layers": [{"w": [[0.5]], "b": [3.0]}]
        });
        assert!(serde_json::from_value::<WeightSet>(bad).is_err());
    }
}
