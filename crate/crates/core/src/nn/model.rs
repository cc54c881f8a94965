//! GRU and 1D-CNN sequence classifiers.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Gradients, Graph, NodeId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::encoding::{EncodingKind, FEATURES};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    Gru,
    Cnn,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Gru => "gru",
            Architecture::Cnn => "cnn",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gru" => Ok(Architecture::Gru),
            "cnn" => Ok(Architecture::Cnn),
            _ => Err(Error::Parameter(format!("unknown architecture `{s}` (expected gru or cnn)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub encoding: EncodingKind,
    pub class_count: usize,
    pub input_features: usize,
    /// GRU hidden units per layer.
    pub hidden_size: usize,
    /// GRU depth. CNN depth is `channels.len()`.
    pub num_layers: usize,
    pub kernel_size: usize,
    pub channels: Vec<usize>,
    pub dropout: f64,
    pub learning_rate: f64,
    /// Per-layer normalization over channels (off unless requested).
    pub layer_norm: bool,
}

impl ModelConfig {
    pub fn cnn(encoding: EncodingKind, class_count: usize, kernel_size: usize, channels: Vec<usize>, dropout: f64, learning_rate: f64) -> Self {
        ModelConfig {
            architecture: Architecture::Cnn,
            encoding,
            class_count,
            input_features: FEATURES,
            hidden_size: 0,
            num_layers: channels.len(),
            kernel_size,
            channels,
            dropout,
            learning_rate,
            layer_norm: false,
        }
    }

    pub fn gru(encoding: EncodingKind, class_count: usize, hidden_size: usize, num_layers: usize, dropout: f64, learning_rate: f64) -> Self {
        ModelConfig {
            architecture: Architecture::Gru,
            encoding,
            class_count,
            input_features: FEATURES,
            hidden_size,
            num_layers,
            kernel_size: 0,
            channels: Vec::new(),
            dropout,
            learning_rate,
            layer_norm: false,
        }
    }

    /// Final configurations selected by the hyperparameter search on the
    /// full dataset, per architecture and encoding.
    pub fn tuned(architecture: Architecture, encoding: EncodingKind, class_count: usize) -> Result<Self> {
        use Architecture::*;
        use EncodingKind::*;
        Ok(match (architecture, encoding) {
            (Gru, Br) => Self::gru(Br, class_count, 300, 3, 0.32, 0.0005),
            (Gru, Brv) => Self::gru(Brv, class_count, 250, 4, 0.32, 0.0007),
            (Gru, Bra) => Self::gru(Bra, class_count, 400, 4, 0.10, 0.0005),
            (Cnn, Br) => Self::cnn(Br, class_count, 3, vec![400, 580, 841, 1219], 0.46, 0.002),
            (Cnn, Brv) => Self::cnn(Brv, class_count, 3, vec![400, 480, 576], 0.42, 0.002),
            (Cnn, Bra) => Self::cnn(Bra, class_count, 3, vec![600, 900, 1350, 2025], 0.44, 0.002),
            (_, Sr) => return Err(Error::UnsupportedEncoding("no tuned configuration for sr".into())),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(m.to_string()));
        if self.class_count < 2 {
            return bad("class_count must be at least 2");
        }
        if self.input_features == 0 {
            return bad("input_features must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        match self.architecture {
            Architecture::Gru => {
                if self.hidden_size == 0 || self.num_layers == 0 {
                    return bad("gru needs hidden_size > 0 and num_layers > 0");
                }
            }
            Architecture::Cnn => {
                if self.kernel_size == 0 || self.channels.is_empty() || self.channels.contains(&0) {
                    return bad("cnn needs kernel_size > 0 and non-zero channel sizes");
                }
                if self.num_layers != self.channels.len() {
                    return bad("cnn num_layers must equal the number of channel sizes");
                }
            }
        }
        Ok(())
    }
}

/// A classifier's configuration plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::from_f64(rng.random_range(-bound..=bound))).collect())
}

impl<T: Real> Model<T> {
    /// Seeded initialization: weights and biases uniform in
    /// `+-1/sqrt(fan_in)`; recurrent weights use `+-1/sqrt(hidden)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let mut width = config.input_features;
        match config.architecture {
            Architecture::Cnn => {
                for (l, &c) in config.channels.iter().enumerate() {
                    let fan_in = config.kernel_size * width;
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    params.push(format!("conv{l}.weight"), uniform(&mut rng, &[fan_in, c], bound))?;
                    params.push(format!("conv{l}.bias"), uniform(&mut rng, &[c], bound))?;
                    if config.layer_norm {
                        params.push(format!("conv{l}.norm.gain"), Tensor::new(vec![c], vec![T::one(); c]))?;
                        params.push(format!("conv{l}.norm.bias"), Tensor::zeros(&[c]))?;
                    }
                    width = c;
                }
            }
            Architecture::Gru => {
                let h = config.hidden_size;
                let bound = 1.0 / (h as f64).sqrt();
                for l in 0..config.num_layers {
                    params.push(format!("gru{l}.w_ih"), uniform(&mut rng, &[width, 3 * h], bound))?;
                    params.push(format!("gru{l}.w_hh"), uniform(&mut rng, &[h, 3 * h], bound))?;
                    params.push(format!("gru{l}.b_ih"), uniform(&mut rng, &[3 * h], bound))?;
                    params.push(format!("gru{l}.b_hh"), uniform(&mut rng, &[3 * h], bound))?;
                    if config.layer_norm {
                        params.push(format!("gru{l}.norm.gain"), Tensor::new(vec![h], vec![T::one(); h]))?;
                        params.push(format!("gru{l}.norm.bias"), Tensor::zeros(&[h]))?;
                    }
                    width = h;
                }
            }
        }
        let bound = 1.0 / (width as f64).sqrt();
        params.push("head.weight", uniform(&mut rng, &[width, config.class_count], bound))?;
        params.push("head.bias", uniform(&mut rng, &[config.class_count], bound))?;
        Ok(Model { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let reference = Model::<T>::new(config.clone(), 0)?;
        if reference.params.names() != params.names() {
            return Err(Error::CheckpointFormat("parameter names do not match the configuration".into()));
        }
        for ((name, a), b) in reference.params.iter().zip(params.tensors()) {
            if a.shape != b.shape {
                return Err(Error::CheckpointFormat(format!(
                    "parameter `{name}` has shape {:?}, configuration implies {:?}",
                    b.shape, a.shape
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        let s = &batch.shape;
        if s.len() != 3 || s[2] != self.config.input_features || s[1] == 0 {
            return Err(Error::Shape(format!(
                "model input: got {:?}, expected [batch, time, {}]",
                s, self.config.input_features
            )));
        }
        Ok(())
    }

    /// Record the forward pass of `input` on `graph`. Dropout is active only
    /// when `rng` is given.
    pub fn forward<'p>(
        &'p self,
        graph: &mut Graph<'p, T>,
        input: NodeId,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        self.check_batch(graph.value(input))?;
        match self.config.architecture {
            Architecture::Cnn => forward_cnn(&self.config, graph, input, rng),
            Architecture::Gru => forward_gru(&self.config, graph, input, rng),
        }
    }

    /// Inference-mode logits `[B, class_count]` for `batch: [B, T, F]`.
    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(&self.params);
        let x = g.input(batch.clone());
        let y = self.forward(&mut g, x, None)?;
        Ok(g.value(y).clone())
    }

    /// Mean cross-entropy of a batch and its parameter gradients.
    pub fn loss_and_grads(
        &self,
        batch: &Tensor<T>,
        labels: &[usize],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Gradients<T>)> {
        let mut g = Graph::new(&self.params);
        let x = g.input(batch.clone());
        let y = self.forward(&mut g, x, rng)?;
        let loss = g.cross_entropy(y, labels)?;
        let value = g.value(loss).data[0].as_f64();
        Ok((value, g.backward(loss)?))
    }

    /// Inference-mode loss only.
    pub fn loss(&self, batch: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let x = g.input(batch.clone());
        let y = self.forward(&mut g, x, None)?;
        let loss = g.cross_entropy(y, labels)?;
        Ok(g.value(loss).data[0].as_f64())
    }
}

/// Per layer: convolution (stride 1, same padding), optional normalization,
/// ReLU and dropout; then global average pooling over time and an affine
/// head.
pub fn forward_cnn<'p, T: Real>(
    config: &ModelConfig,
    g: &mut Graph<'p, T>,
    input: NodeId,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let mut h = input;
    for l in 0..config.channels.len() {
        let w = g.param(&format!("conv{l}.weight"))?;
        let b = g.param(&format!("conv{l}.bias"))?;
        h = g.conv1d(h, w, b, config.kernel_size)?;
        if config.layer_norm {
            let gain = g.param(&format!("conv{l}.norm.gain"))?;
            let bias = g.param(&format!("conv{l}.norm.bias"))?;
            h = g.layer_norm(h, gain, bias)?;
        }
        h = g.relu(h);
        if let Some(r) = rng.as_deref_mut() {
            if config.dropout > 0.0 {
                h = g.dropout(h, config.dropout, r);
            }
        }
    }
    let pooled = g.mean_time(h)?;
    let w = g.param("head.weight")?;
    let b = g.param("head.bias")?;
    g.linear(pooled, w, b)
}

/// Stacked GRU with dropout between layers; the top layer's last hidden
/// state feeds an affine head.
pub fn forward_gru<'p, T: Real>(
    config: &ModelConfig,
    g: &mut Graph<'p, T>,
    input: NodeId,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let mut h = input;
    for l in 0..config.num_layers {
        let w_ih = g.param(&format!("gru{l}.w_ih"))?;
        let w_hh = g.param(&format!("gru{l}.w_hh"))?;
        let b_ih = g.param(&format!("gru{l}.b_ih"))?;
        let b_hh = g.param(&format!("gru{l}.b_hh"))?;
        h = g.gru(h, w_ih, w_hh, b_ih, b_hh)?;
        if config.layer_norm {
            let gain = g.param(&format!("gru{l}.norm.gain"))?;
            let bias = g.param(&format!("gru{l}.norm.bias"))?;
            h = g.layer_norm(h, gain, bias)?;
        }
        if l + 1 < config.num_layers {
            if let Some(r) = rng.as_deref_mut() {
                if config.dropout > 0.0 {
                    h = g.dropout(h, config.dropout, r);
                }
            }
        }
    }
    let last = g.last_step(h)?;
    let w = g.param("head.weight")?;
    let b = g.param("head.bias")?;
    g.linear(last, w, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(model: &mut Model<f64>, name: &str, data: Vec<f64>) {
        let t = model.params.get_mut(name).unwrap();
        assert_eq!(t.data.len(), data.len(), "{name}");
        t.data = data;
    }

    #[test]
    fn tuned_bra_rows() {
        let c = ModelConfig::tuned(Architecture::Cnn, EncodingKind::Bra, 71).unwrap();
        assert_eq!(c.channels, vec![600, 900, 1350, 2025]);
        assert_eq!((c.kernel_size, c.num_layers, c.dropout, c.learning_rate), (3, 4, 0.44, 0.002));
        let g = ModelConfig::tuned(Architecture::Gru, EncodingKind::Bra, 71).unwrap();
        assert_eq!((g.hidden_size, g.num_layers, g.dropout, g.learning_rate), (400, 4, 0.10, 0.0005));
    }

    #[test]
    fn zero_input_gives_uniform_softmax() {
        let cfg = ModelConfig::cnn(EncodingKind::Bra, 71, 3, vec![4], 0.0, 0.01);
        let mut m = Model::<f64>::new(cfg, 1).unwrap();
        set(&mut m, "head.bias", vec![0.0; 71]);
        set(&mut m, "conv0.bias", vec![0.0; 4]);
        let logits = m.logits(&Tensor::zeros(&[2, 10, 18])).unwrap();
        assert!(logits.data.iter().all(|&v| v == 0.0));
        let loss = m.loss(&Tensor::zeros(&[2, 10, 18]), &[0, 5]).unwrap();
        assert!((loss - (71f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_convolution() {
        let mut cfg = ModelConfig::cnn(EncodingKind::Br, 2, 3, vec![1], 0.0, 0.01);
        cfg.input_features = 1;
        let mut m = Model::<f64>::new(cfg, 0).unwrap();
        set(&mut m, "conv0.weight", vec![0.5, -1.0, 2.0]);
        set(&mut m, "conv0.bias", vec![0.25]);
        set(&mut m, "head.weight", vec![1.0, -3.0]);
        set(&mut m, "head.bias", vec![0.1, 0.2]);
        let x = 1.5;
        let input = Tensor::new(vec![1, 5, 1], vec![x; 5]);
        // Zero padding: first frame misses the left tap, last the right tap.
        let conv = |t: usize| {
            let taps = [0.5, -1.0, 2.0];
            let mut s = 0.25;
            for (k, w) in taps.iter().enumerate() {
                let src = t as isize + k as isize - 1;
                if (0..5).contains(&src) {
                    s += w * x;
                }
            }
            f64::max(s, 0.0)
        };
        let pooled = (0..5).map(conv).sum::<f64>() / 5.0;
        let logits = m.logits(&input).unwrap();
        assert!((logits.data[0] - (pooled + 0.1)).abs() < 1e-12);
        assert!((logits.data[1] - (-3.0 * pooled + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn zero_gru_is_fixed_point() {
        let mut cfg = ModelConfig::gru(EncodingKind::Bra, 3, 4, 2, 0.0, 0.01);
        cfg.input_features = 18;
        let mut m = Model::<f64>::new(cfg, 3).unwrap();
        let names: Vec<String> = m.params.names().to_vec();
        for n in names.iter().filter(|n| n.starts_with("gru") || *n == "head.weight") {
            let len = m.params.get(n).unwrap().len();
            set(&mut m, n, vec![0.0; len]);
        }
        set(&mut m, "head.bias", vec![0.3, -0.2, 0.9]);
        let x = Tensor::new(vec![2, 7, 18], (0..252).map(|i| (i as f64).sin()).collect());
        let logits = m.logits(&x).unwrap();
        assert_eq!(logits.data, vec![0.3, -0.2, 0.9, 0.3, -0.2, 0.9]);
    }

    #[test]
    fn scalar_gru_two_steps_by_hand() {
        let mut cfg = ModelConfig::gru(EncodingKind::Br, 2, 1, 1, 0.0, 0.01);
        cfg.input_features = 1;
        let mut m = Model::<f64>::new(cfg, 0).unwrap();
        // Gate order: reset, update, candidate.
        let (wr, wz, wn) = (0.5, -0.3, 0.8);
        let (ur, uz, un) = (0.2, 0.4, -0.6);
        let (br, bz, bn) = (0.1, -0.1, 0.05);
        let (cr, cz, cn) = (0.0, 0.2, -0.15);
        set(&mut m, "gru0.w_ih", vec![wr, wz, wn]);
        set(&mut m, "gru0.w_hh", vec![ur, uz, un]);
        set(&mut m, "gru0.b_ih", vec![br, bz, bn]);
        set(&mut m, "gru0.b_hh", vec![cr, cz, cn]);
        set(&mut m, "head.weight", vec![1.0, 0.0]);
        set(&mut m, "head.bias", vec![0.0, 0.0]);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = 0.0;
        for x in [0.7, -1.2] {
            let r = sig(wr * x + br + ur * h + cr);
            let z = sig(wz * x + bz + uz * h + cz);
            let n = (wn * x + bn + r * (un * h + cn)).tanh();
            h = (1.0 - z) * n + z * h;
        }
        let logits = m.logits(&Tensor::new(vec![1, 2, 1], vec![0.7, -1.2])).unwrap();
        assert!((logits.data[0] - h).abs() < 1e-12);
    }

    #[test]
    fn input_arity_mismatch() {
        let cfg = ModelConfig::cnn(EncodingKind::Br, 3, 3, vec![2], 0.0, 0.01);
        let m = Model::<f32>::new(cfg, 0).unwrap();
        match m.logits(&Tensor::zeros(&[1, 10, 17])) {
            Err(Error::Shape(msg)) => assert!(msg.contains("17") && msg.contains("18")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn eval_mode_ignores_dropout() {
        let cfg = ModelConfig::cnn(EncodingKind::Br, 3, 3, vec![4, 5], 0.5, 0.01);
        let m = Model::<f64>::new(cfg.clone(), 9).unwrap();
        let mut no_drop = m.clone();
        no_drop.config.dropout = 0.0;
        let x = Tensor::new(vec![2, 6, 18], (0..216).map(|i| (i as f64 * 0.1).cos()).collect());
        let (la, ga) = m.loss_and_grads(&x, &[0, 2], None).unwrap();
        let (lb, gb) = no_drop.loss_and_grads(&x, &[0, 2], None).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga, gb);
    }
}
