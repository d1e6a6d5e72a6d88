//! Siamese feature encoder and the learned-metric head.
//!
//! The encoder maps each input of a pair to a `d`-dimensional feature with
//! one shared parameter set. The metric head takes the concatenation
//! `[f1 f2]` and maps it to a latent point `z` in `R^p` through seven fully
//! connected layers whose widths halve from `2d` down to `p`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, NodeId, Tape};
use crate::error::{Error, Result};

pub const METRIC_LAYERS: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub d: usize,
    pub p: usize,
    #[serde(default = "default_hidden")]
    pub encoder_hidden: Vec<usize>,
    #[serde(default = "default_keep")]
    pub dropout_keep: f64,
    #[serde(default)]
    pub seed: u64,
    /// Reject inputs outside `[-1, 1]` instead of warning.
    #[serde(default)]
    pub strict_inputs: bool,
}

fn default_hidden() -> Vec<usize> {
    vec![256, 128]
}

fn default_keep() -> f64 {
    0.8
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            d: 32,
            p: 1,
            encoder_hidden: default_hidden(),
            dropout_keep: default_keep(),
            seed: 0,
            strict_inputs: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        if self.d == 0 || self.p == 0 {
            return Err(Error::Config("d and p must be >= 1".into()));
        }
        if self.encoder_hidden.contains(&0) {
            return Err(Error::Config("encoder hidden widths must be >= 1".into()));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Config(format!(
                "dropout_keep must lie in (0, 1], got {}",
                self.dropout_keep
            )));
        }
        metricnet_widths(self.d, self.p)?;
        Ok(())
    }

    pub fn encoder_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.encoder_hidden);
        widths.push(self.d);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Layer shapes `(in, out)` of the metric head for feature size `d` and latent size `p`.
///
/// Layer 1 keeps width `2d`, layers 2 to 6 halve it, layer 7 projects to `p`.
/// Intermediate widths never drop below `p`.
pub fn metricnet_widths(d: usize, p: usize) -> Result<Vec<(usize, usize)>> {
    if d == 0 || p == 0 {
        return Err(Error::Config("d and p must be >= 1".into()));
    }
    // Six halvings from 2d must stay >= 1 for the chain to be distinct.
    if 2 * d < 1 << (METRIC_LAYERS - 2) {
        return Err(Error::Config(format!(
            "d = {d} is too small for a {METRIC_LAYERS}-layer metric head; use d >= {}",
            (1 << (METRIC_LAYERS - 2)) / 2
        )));
    }
    let floor = p.max(1);
    let mut shapes = Vec::with_capacity(METRIC_LAYERS);
    let mut width_in = 2 * d;
    for layer in 0..METRIC_LAYERS - 1 {
        let out = ((2 * d) >> layer).max(floor);
        shapes.push((width_in, out));
        width_in = out;
    }
    shapes.push((width_in, p));
    Ok(shapes)
}

/// Fully connected layer `x W + b` with `W: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    fn he_init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Matrix::new(fan_in, fan_out, data).expect("sized"),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weight.shape()
    }
}

/// Forward-pass mode. Training draws dropout masks from the given generator.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Tape handles for every parameter, in [`ModelParams::tensors`] order.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    encoder: Vec<(NodeId, NodeId)>,
    metric: Vec<(NodeId, NodeId)>,
}

impl ParamNodes {
    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.encoder
            .iter()
            .chain(&self.metric)
            .flat_map(|&(w, b)| [w, b])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: Vec<Dense>,
    pub metric: Vec<Dense>,
}

impl ModelParams {
    /// He-normal weights (variance `2 / fan_in`) and zero biases, seeded from the config.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = config
            .encoder_shapes()
            .into_iter()
            .map(|(i, o)| Dense::he_init(i, o, &mut rng))
            .collect();
        let metric = metricnet_widths(config.d, config.p)?
            .into_iter()
            .map(|(i, o)| Dense::he_init(i, o, &mut rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            encoder,
            metric,
        })
    }

    /// All-zero parameters with the configured shapes.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            encoder: config
                .encoder_shapes()
                .into_iter()
                .map(|(i, o)| Dense::zeros(i, o))
                .collect(),
            metric: metricnet_widths(config.d, config.p)?
                .into_iter()
                .map(|(i, o)| Dense::zeros(i, o))
                .collect(),
        })
    }

    /// Checks that every layer matches the shapes the config implies.
    pub fn validate_shapes(&self) -> Result<()> {
        self.config.validate()?;
        let check = |part: &str, layers: &[Dense], shapes: Vec<(usize, usize)>| {
            if layers.len() != shapes.len() {
                return Err(Error::shape(
                    "model",
                    format!("{part} has {} layers, expected {}", layers.len(), shapes.len()),
                ));
            }
            for (i, (layer, shape)) in layers.iter().zip(shapes).enumerate() {
                if layer.weight.shape() != shape || layer.bias.shape() != (1, shape.1) {
                    return Err(Error::shape(
                        "model",
                        format!(
                            "{part} layer {i}: weight {:?} bias {:?}, expected {shape:?}",
                            layer.weight.shape(),
                            layer.bias.shape()
                        ),
                    ));
                }
            }
            Ok(())
        };
        check("encoder", &self.encoder, self.config.encoder_shapes())?;
        check("metric", &self.metric, metricnet_widths(self.config.d, self.config.p)?)
    }

    /// Every parameter tensor, weights and biases interleaved, encoder first.
    pub fn tensors(&self) -> impl Iterator<Item = &Matrix> {
        self.encoder
            .iter()
            .chain(&self.metric)
            .flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.encoder
            .iter_mut()
            .chain(self.metric.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Whether tensor `i` of [`tensors`](Self::tensors) is a weight (as opposed to a bias).
    pub fn is_weight(i: usize) -> bool {
        i.is_multiple_of(2)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().map(Matrix::len).sum()
    }

    pub fn register(&self, tape: &mut Tape) -> Result<ParamNodes> {
        let mut reg = |layers: &[Dense]| -> Result<Vec<(NodeId, NodeId)>> {
            layers
                .iter()
                .map(|l| Ok((tape.leaf(l.weight.clone())?, tape.leaf(l.bias.clone())?)))
                .collect()
        };
        let encoder = reg(&self.encoder)?;
        let metric = reg(&self.metric)?;
        Ok(ParamNodes { encoder, metric })
    }

    pub fn check_inputs(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.config.input_dim {
            return Err(Error::shape(
                "encode",
                format!("inputs have {} features, model expects {}", x.cols(), self.config.input_dim),
            ));
        }
        if let Some(i) = x.data().iter().position(|v| !(-1.0..=1.0).contains(v)) {
            let msg = format!(
                "input value {} at row {} column {} is outside [-1, 1]",
                x.data()[i],
                i / x.cols(),
                i % x.cols()
            );
            if self.config.strict_inputs {
                return Err(Error::Input(msg));
            }
            log::warn!("{msg}");
        }
        Ok(())
    }

    /// Encoder forward for an `n x input_dim` node.
    pub fn encode_node(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        x: NodeId,
        mode: &mut Mode<'_>,
    ) -> Result<NodeId> {
        let last = nodes.encoder.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in nodes.encoder.iter().enumerate() {
            if i == last {
                h = self.dropout(tape, h, mode)?;
            }
            let a = tape.matmul(h, w)?;
            h = tape.add_row(a, b)?;
            if i != last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    fn dropout(&self, tape: &mut Tape, h: NodeId, mode: &mut Mode<'_>) -> Result<NodeId> {
        let keep = self.config.dropout_keep;
        let rng = match mode {
            Mode::Train(rng) if keep < 1.0 => rng,
            _ => return Ok(h),
        };
        let (rows, cols) = tape.value(h).shape();
        let scale = 1.0 / keep;
        let mask = (0..rows * cols)
            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let mask = tape.leaf(Matrix::new(rows, cols, mask)?)?;
        tape.mul(h, mask)
    }

    /// Metric-head forward for an `n x 2d` node of concatenated features.
    pub fn metric_node(&self, tape: &mut Tape, nodes: &ParamNodes, f: NodeId) -> Result<NodeId> {
        let cols = tape.value(f).cols();
        if cols != 2 * self.config.d {
            return Err(Error::shape(
                "metric_forward",
                format!("features have {cols} columns, expected {}", 2 * self.config.d),
            ));
        }
        let last = nodes.metric.len() - 1;
        let mut h = f;
        for (i, &(w, b)) in nodes.metric.iter().enumerate() {
            let a = tape.matmul(h, w)?;
            h = tape.add_row(a, b)?;
            if i != last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Latent points for `n` pairs given as two `n x input_dim` matrices.
    ///
    /// Both sides go through the encoder in one stacked pass with the same
    /// parameter nodes, then `[f1 f2]` is fed to the metric head.
    pub fn pair_forward(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        x1: &Matrix,
        x2: &Matrix,
        mode: &mut Mode<'_>,
    ) -> Result<NodeId> {
        if x1.shape() != x2.shape() {
            return Err(Error::shape(
                "pair_forward",
                format!("{:?} vs {:?}", x1.shape(), x2.shape()),
            ));
        }
        self.check_inputs(x1)?;
        self.check_inputs(x2)?;
        let n = x1.rows();
        let mut stacked = x1.data().to_vec();
        stacked.extend_from_slice(x2.data());
        let x = tape.leaf(Matrix::new(2 * n, x1.cols(), stacked)?)?;
        let f = self.encode_node(tape, nodes, x, mode)?;
        let f1 = tape.slice_rows(f, 0, n)?;
        let f2 = tape.slice_rows(f, n, 2 * n)?;
        let joined = tape.concat_cols(f1, f2)?;
        self.metric_node(tape, nodes, joined)
    }

    /// Deterministic (eval-mode) latent points, one row per pair.
    pub fn latent(&self, x1: &Matrix, x2: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let nodes = self.register(&mut tape)?;
        let z = self.pair_forward(&mut tape, &nodes, x1, x2, &mut Mode::Eval)?;
        Ok(tape.value(z).clone())
    }

    /// Encoder features for each row of `x`.
    pub fn encode(&self, x: &Matrix, mode: &mut Mode<'_>) -> Result<Matrix> {
        self.check_inputs(x)?;
        let mut tape = Tape::new();
        let nodes = self.register(&mut tape)?;
        let xn = tape.leaf(x.clone())?;
        let f = self.encode_node(&mut tape, &nodes, xn, mode)?;
        Ok(tape.value(f).clone())
    }

    /// Metric head applied to concatenated features `[f1 f2]`.
    pub fn metric_forward(&self, f: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let nodes = self.register(&mut tape)?;
        let fnode = tape.leaf(f.clone())?;
        let z = self.metric_node(&mut tape, &nodes, fnode)?;
        Ok(tape.value(z).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::relative_error;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            d: 16,
            p: 2,
            encoder_hidden: vec![10],
            dropout_keep: 0.8,
            seed: 5,
            strict_inputs: false,
        }
    }

    #[test]
    fn widths_at_full_scale() {
        assert_eq!(
            metricnet_widths(512, 1).unwrap(),
            vec![(1024, 1024), (1024, 512), (512, 256), (256, 128), (128, 64), (64, 32), (32, 1)]
        );
    }

    #[test]
    fn widths_at_desk_scale() {
        assert_eq!(
            metricnet_widths(32, 1).unwrap(),
            vec![(64, 64), (64, 32), (32, 16), (16, 8), (8, 4), (4, 2), (2, 1)]
        );
    }

    #[test]
    fn widths_clamped_for_large_p() {
        let w = metricnet_widths(32, 8).unwrap();
        assert_eq!(w.len(), 7);
        assert_eq!(w, vec![(64, 64), (64, 32), (32, 16), (16, 8), (8, 8), (8, 8), (8, 8)]);
    }

    #[test]
    fn tiny_d_rejected_with_hint() {
        match metricnet_widths(8, 1) {
            Err(Error::Config(msg)) => assert!(msg.contains("d >= 16"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(metricnet_widths(16, 1).is_ok());
    }

    #[test]
    fn zero_parameters_give_zero_outputs() {
        let params = ModelParams::zeros(&small_config()).unwrap();
        let x = Matrix::filled(3, 6, 0.5);
        assert!(params.encode(&x, &mut Mode::Eval).unwrap().data().iter().all(|&v| v == 0.0));
        let z = params.latent(&x, &x).unwrap();
        assert_eq!(z.shape(), (3, 2));
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(params.metric_forward(&Matrix::filled(1, 32, 1.0)).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_reproducible_and_seeded() {
        let a = ModelParams::init(&small_config()).unwrap();
        let b = ModelParams::init(&small_config()).unwrap();
        assert_eq!(a, b);
        let mut other = small_config();
        other.seed = 6;
        assert_ne!(a, ModelParams::init(&other).unwrap());
        assert!(a.metric.iter().all(|l| l.bias.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn he_variance() {
        let cfg = ModelConfig {
            input_dim: 100,
            d: 128,
            p: 1,
            encoder_hidden: vec![],
            ..small_config()
        };
        let params = ModelParams::init(&cfg).unwrap();
        let w = &params.encoder[0].weight;
        assert_eq!(w.rows(), 100);
        assert!(w.len() >= 10_000);
        let mean = w.sum() / w.len() as f64;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!((var - 0.02).abs() < 0.2 * 0.02, "variance {var}");
    }

    #[test]
    fn eval_is_deterministic() {
        let params = ModelParams::init(&small_config()).unwrap();
        let x = Matrix::new(2, 6, (0..12).map(|i| (i as f64 / 12.0) - 0.5).collect()).unwrap();
        let a = params.encode(&x, &mut Mode::Eval).unwrap();
        let b = params.encode(&x, &mut Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), (2, 16));
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let params = ModelParams::init(&small_config()).unwrap();
        let x = Matrix::new(1, 6, vec![0.3, -0.2, 0.9, -0.7, 0.1, 0.5]).unwrap();
        let eval = params.encode(&x, &mut Mode::Eval).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let d = eval.cols();
        let mut sum = vec![0.0; d];
        let mut sum_sq = vec![0.0; d];
        for _ in 0..n {
            let f = params.encode(&x, &mut Mode::Train(&mut rng)).unwrap();
            for (j, v) in f.data().iter().enumerate() {
                sum[j] += v;
                sum_sq[j] += v * v;
            }
        }
        for j in 0..d {
            let mean = sum[j] / n as f64;
            let var = sum_sq[j] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!((mean - eval.get(0, j)).abs() <= 3.0 * se + 1e-12, "unit {j}: {mean} vs {}", eval.get(0, j));
        }
    }

    #[test]
    fn strict_mode_rejects_out_of_range() {
        let mut cfg = small_config();
        cfg.strict_inputs = true;
        let params = ModelParams::init(&cfg).unwrap();
        let x = Matrix::filled(1, 6, 1.5);
        assert!(matches!(params.latent(&x, &x), Err(Error::Input(_))));
        cfg.strict_inputs = false;
        let params = ModelParams::init(&cfg).unwrap();
        assert!(params.latent(&x, &x).is_ok());
    }

    #[test]
    fn shape_mismatch_reported() {
        let params = ModelParams::init(&small_config()).unwrap();
        assert!(params.latent(&Matrix::zeros(1, 5), &Matrix::zeros(1, 5)).is_err());
        assert!(params.metric_forward(&Matrix::zeros(1, 31)).is_err());
    }

    #[test]
    fn siamese_branches_share_parameters() {
        let params = ModelParams::init(&small_config()).unwrap();
        let mut tape = Tape::new();
        let nodes = params.register(&mut tape).unwrap();
        let before = tape.len();
        let x = Matrix::filled(2, 6, 0.1);
        params.pair_forward(&mut tape, &nodes, &x, &x, &mut Mode::Eval).unwrap();
        // One leaf per parameter tensor; the forward adds no further parameter leaves.
        assert_eq!(before, params.tensors().count());
        let f = params.encode(&x, &mut Mode::Eval).unwrap();
        assert_eq!(f.row(0), f.row(1));
    }

    #[test]
    fn metric_head_gradients_match_finite_differences() {
        // Nonzero biases keep pre-activations away from the ReLU kink at exactly 0.
        let mut params = ModelParams::init(&small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for layer in params.metric.iter_mut() {
            layer.bias.data_mut().iter_mut().for_each(|b| *b = rng.random_range(0.05..0.3));
        }
        let f = Matrix::new(3, 32, (0..96).map(|i| ((i * 37 % 17) as f64 / 8.0) - 1.0).collect()).unwrap();
        let scalar = |p: &ModelParams| -> f64 {
            let z = p.metric_forward(&f).unwrap();
            z.data().iter().map(|v| v * v).sum::<f64>() + z.sum()
        };
        let mut tape = Tape::new();
        let nodes = params.register(&mut tape).unwrap();
        let fnode = tape.leaf(f.clone()).unwrap();
        let z = params.metric_node(&mut tape, &nodes, fnode).unwrap();
        let sq = tape.square(z).unwrap();
        let a = tape.sum(sq).unwrap();
        let b = tape.sum(z).unwrap();
        let loss = tape.add(a, b).unwrap();
        let grads = tape.backward(loss).unwrap();
        let ids: Vec<NodeId> = nodes.ids().collect();
        let encoder_tensors = 2 * params.encoder.len();
        for (ti, id) in ids.iter().enumerate().skip(encoder_tensors) {
            let analytic = grads.get_or_zeros(*id, tape.value(*id).shape());
            for e in (0..analytic.len()).step_by(7) {
                let h = 1e-5;
                let mut plus = params.clone();
                plus.tensors_mut().nth(ti).unwrap().data_mut()[e] += h;
                let mut minus = params.clone();
                minus.tensors_mut().nth(ti).unwrap().data_mut()[e] -= h;
                let numeric = (scalar(&plus) - scalar(&minus)) / (2.0 * h);
                let err = relative_error(analytic.data()[e], numeric);
                assert!(err < 1e-4, "tensor {ti} entry {e}: {} vs {numeric}", analytic.data()[e]);
            }
        }
    }

    #[test]
    fn metric_head_need_not_be_symmetric() {
        let params = ModelParams::init(&small_config()).unwrap();
        let f1: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
        let f2: Vec<f64> = (0..16).map(|i| 1.0 - i as f64 / 8.0).collect();
        let ab = Matrix::row_vector([f1.clone(), f2.clone()].concat());
        let ba = Matrix::row_vector([f2, f1].concat());
        // Only checks that both orders evaluate; equality is not a contract.
        let _ = (params.metric_forward(&ab).unwrap(), params.metric_forward(&ba).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn forward_shapes(d in 16usize..40, p in 1usize..5, input_dim in 1usize..8, n in 1usize..4) {
            let cfg = ModelConfig { input_dim, d, p, encoder_hidden: vec![7], ..small_config() };
            let params = ModelParams::init(&cfg).unwrap();
            let x = Matrix::filled(n, input_dim, 0.25);
            prop_assert_eq!(params.encode(&x, &mut Mode::Eval).unwrap().shape(), (n, d));
            prop_assert_eq!(params.latent(&x, &x).unwrap().shape(), (n, p));
        }
    }
}
