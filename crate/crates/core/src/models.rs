//! Feed-forward ReLU classifiers, SGD with momentum, and checkpoints.

use std::path::Path;

use rand::Rng;

use crate::autograd::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// One affine layer: `weight[in x out]`, `bias[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Multi-layer perceptron. ReLU between layers; the last layer emits logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Parameters of an [`Mlp`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct MlpVars<'t> {
    layers: Vec<(Var<'t>, Var<'t>)>,
}

impl Mlp {
    /// Uniform fan-based initialisation, `U(-s, s)` with `s = sqrt(6 / (in + out))`,
    /// zero biases.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs at least 2 layer sizes, got {sizes:?}"
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes must be positive, got {sizes:?}"
            )));
        }
        let layers = sizes
            .windows(2)
            .map(|pair| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-s..=s)).collect();
                Layer {
                    weight: Tensor::new(vec![fan_in, fan_out], data).expect("sized above"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            let ws = layer.weight.shape();
            if ws.len() != 2 || layer.bias.shape() != [ws[1]] {
                return Err(Error::Shape {
                    op: "mlp layer",
                    left: ws.to_vec(),
                    right: layer.bias.shape().to_vec(),
                });
            }
            if let Some(next) = layers.get(i + 1) {
                if next.weight.shape()[0] != ws[1] {
                    return Err(Error::Shape {
                        op: "mlp chain",
                        left: ws.to_vec(),
                        right: next.weight.shape().to_vec(),
                    });
                }
            }
            if !layer.weight.is_finite() || !layer.bias.is_finite() {
                return Err(Error::NonFinite(format!("layer {i} parameters")));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].weight.shape()[0]];
        sizes.extend(self.layers.iter().map(|l| l.weight.shape()[1]));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("non-empty").weight.shape()[1]
    }

    /// Parameter tensors in canonical order: `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// All parameters concatenated in canonical order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape {
                op: "set_flat_params",
                left: vec![self.num_params()],
                right: vec![flat.len()],
            });
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Records the parameters on `tape`, as leaves when `trainable`.
    pub fn on_tape<'t>(&self, tape: &'t Tape, trainable: bool) -> MlpVars<'t> {
        let record = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| (record(&l.weight), record(&l.bias)))
                .collect(),
        }
    }

    /// Logits for a batch, computed on a throwaway tape.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.on_tape(&tape, false);
        Ok(vars.forward(tape.constant(x.clone()))?.to_tensor())
    }

    /// Per-sample cross-entropy losses for a batch.
    pub fn losses(&self, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let vars = self.on_tape(&tape, false);
        let losses = vars.forward(tape.constant(x.clone()))?.cross_entropy(labels)?;
        let out = losses.value().data().to_vec();
        Ok(out)
    }

    /// Argmax class per row; ties resolve to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, checkpoint::encode(self)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        checkpoint::decode(&bytes)
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

impl<'t> MlpVars<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = h.linear(w, b)?;
            if i < last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    /// Parameter gradients in canonical order; unreached parameters get zeros.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|&(w, b)| [grads.get_or_zeros(w), grads.get_or_zeros(b)])
            .collect()
    }
}

/// Momentum SGD state. Weight decay enters as an additive `wd * p` gradient term.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
    steps: usize,
}

impl Sgd {
    pub fn new(model: &Mlp, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: model.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
            steps: 0,
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `v <- mu * v + (g + wd * p)`, `p <- p - lr * v`.
    ///
    /// The state is left untouched when an error is returned.
    pub fn step(&mut self, model: &mut Mlp, grads: &[Tensor]) -> Result<()> {
        let mut params = model.params_mut();
        if grads.len() != params.len() || self.velocity.len() != params.len() {
            return Err(Error::Shape {
                op: "sgd_step",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.velocity[i].shape() != p.shape() {
                return Err(Error::Shape {
                    op: "sgd_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::Optimizer {
                    step: self.steps,
                    detail: format!("non-finite gradient for parameter {i}"),
                });
            }
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + (gv + self.weight_decay * *pv);
                *pv -= self.lr * *vv;
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// Versioned binary checkpoint.
///
/// Layout (little endian): magic `ORATMLP\0`, `u32` version, `u32` number of
/// layer sizes, each size as `u64`, then every parameter as raw `f64` bits in
/// canonical order. Round trips are bit exact.
pub mod checkpoint {
    use super::*;

    pub const MAGIC: &[u8; 8] = b"ORATMLP\0";
    pub const VERSION: u32 = 1;

    pub fn encode(model: &Mlp) -> Vec<u8> {
        let sizes = model.sizes();
        let mut out = Vec::with_capacity(16 + 8 * sizes.len() + 8 * model.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
        for s in &sizes {
            out.extend_from_slice(&(*s as u64).to_le_bytes());
        }
        for v in model.flat_params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    struct Reader<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            let end = self.pos + n;
            if end > self.bytes.len() {
                return Err(Error::Checkpoint(format!(
                    "truncated at byte {}: need {n} more bytes",
                    self.pos
                )));
            }
            let out = &self.bytes[self.pos..end];
            self.pos = end;
            Ok(out)
        }

        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
        }

        fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Mlp> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not an MLP checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        if count < 2 {
            return Err(Error::Checkpoint(format!(
                "need at least 2 layer sizes, got {count}"
            )));
        }
        let sizes = (0..count)
            .map(|_| r.u64().map(|s| s as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut layers = Vec::with_capacity(count - 1);
        for pair in sizes.windows(2) {
            let mut read =
                |n: usize| -> Result<Vec<f64>> { (0..n).map(|_| r.u64().map(f64::from_bits)).collect() };
            let weight = Tensor::new(vec![pair[0], pair[1]], read(pair[0] * pair[1])?)?;
            let bias = Tensor::vector(read(pair[1])?);
            layers.push(Layer { weight, bias });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Mlp::from_layers(layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn random_input(rng: &mut impl Rng, n: usize, d: usize) -> Tensor {
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = Mlp::init(&[2, 3, 2], &mut seeded(7)).unwrap();
        let b = Mlp::init(&[2, 3, 2], &mut seeded(7)).unwrap();
        let bits = |m: &Mlp| m.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn init_biases_zero_and_weights_bounded() {
        let m = Mlp::init(&[2, 3, 2], &mut seeded(1)).unwrap();
        assert!(m.layers().iter().all(|l| l.bias.data().iter().all(|&b| b == 0.0)));
        let bound = (6.0f64 / 5.0).sqrt();
        assert!(m.layers()[0].weight.data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(Mlp::init(&[3], &mut seeded(1)).is_err());
        assert!(Mlp::init(&[], &mut seeded(1)).is_err());
        assert!(Mlp::init(&[2, 0, 2], &mut seeded(1)).is_err());
    }

    #[test]
    fn zero_weight_network_emits_final_bias() {
        let layers = vec![
            Layer {
                weight: Tensor::zeros(&[2, 3]),
                bias: Tensor::vector(vec![1.0, 2.0, 3.0]),
            },
            Layer {
                weight: Tensor::zeros(&[3, 2]),
                bias: Tensor::vector(vec![0.25, -4.0]),
            },
        ];
        let m = Mlp::from_layers(layers).unwrap();
        let out = m
            .logits(&Tensor::matrix(2, 2, vec![0.3, 0.1, 0.9, 0.5]).unwrap())
            .unwrap();
        assert_eq!(out.data(), &[0.25, -4.0, 0.25, -4.0]);
    }

    #[test]
    fn single_layer_reduces_to_linear() {
        let mut rng = seeded(4);
        let m = Mlp::init(&[3, 2], &mut rng).unwrap();
        let x = random_input(&mut rng, 4, 3);
        let tape = Tape::new();
        let direct = tape
            .constant(x.clone())
            .linear(
                tape.constant(m.layers()[0].weight.clone()),
                tape.constant(m.layers()[0].bias.clone()),
            )
            .unwrap()
            .to_tensor();
        assert_eq!(m.logits(&x).unwrap(), direct);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn forward_matches_loop_reference() {
        let mut rng = seeded(12);
        let mut m = Mlp::init(&[4, 5, 3, 2], &mut rng).unwrap();
        for p in m.params_mut() {
            for v in p.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        let x = random_input(&mut rng, 6, 4);
        let out = m.logits(&x).unwrap();
        for i in 0..6 {
            let mut h: Vec<f64> = x.row(i).to_vec();
            for (li, layer) in m.layers().iter().enumerate() {
                let (din, dout) = (layer.weight.shape()[0], layer.weight.shape()[1]);
                let mut next = vec![0.0; dout];
                for j in 0..dout {
                    let mut acc = layer.bias.data()[j];
                    for r in 0..din {
                        acc += h[r] * layer.weight.data()[r * dout + j];
                    }
                    next[j] = if li + 1 < m.layers().len() {
                        acc.max(0.0)
                    } else {
                        acc
                    };
                }
                h = next;
            }
            for j in 0..2 {
                assert!((out.row(i)[j] - h[j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn forward_reports_input_mismatch() {
        let m = Mlp::init(&[3, 2], &mut seeded(0)).unwrap();
        assert!(matches!(
            m.logits(&Tensor::zeros(&[1, 4])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn gradients_reach_parameters_and_input() {
        let mut rng = seeded(8);
        let m = Mlp::init(&[3, 4, 2], &mut rng).unwrap();
        let tape = Tape::new();
        let vars = m.on_tape(&tape, true);
        let x = tape.leaf(random_input(&mut rng, 2, 3));
        let root = vars.forward(x).unwrap().cross_entropy(&[0, 1]).unwrap().sum();
        let g = tape.backward(root).unwrap();
        assert!(g.get(x).is_some());
        let pg = vars.gradients(&g);
        assert_eq!(pg.len(), 4);
        for (p, gp) in m.params().iter().zip(&pg) {
            assert_eq!(p.shape(), gp.shape());
        }
    }

    fn scalar_model(p: f64) -> Mlp {
        Mlp::from_layers(vec![Layer {
            weight: Tensor::matrix(1, 1, vec![p]).unwrap(),
            bias: Tensor::vector(vec![0.0]),
        }])
        .unwrap()
    }

    #[test]
    fn plain_sgd_reduction() {
        let mut m = scalar_model(2.0);
        let mut opt = Sgd::new(&m, 0.5, 0.0, 0.0);
        let g = vec![
            Tensor::matrix(1, 1, vec![3.0]).unwrap(),
            Tensor::vector(vec![0.0]),
        ];
        opt.step(&mut m, &g).unwrap();
        assert_eq!(m.layers()[0].weight.data()[0], 2.0 - 0.5 * 3.0);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut m = scalar_model(2.0);
        let mut opt = Sgd::new(&m, 0.5, 0.9, 0.0);
        let g = vec![Tensor::zeros(&[1, 1]), Tensor::zeros(&[1])];
        opt.step(&mut m, &g).unwrap();
        assert_eq!(m.layers()[0].weight.data()[0], 2.0);
    }

    #[test]
    fn momentum_and_decay_update() {
        let mut m = scalar_model(1.0);
        let mut opt = Sgd::new(&m, 0.1, 0.9, 2e-4);
        let g = vec![Tensor::matrix(1, 1, vec![1.0]).unwrap(), Tensor::zeros(&[1])];
        opt.step(&mut m, &g).unwrap();
        assert!((opt.velocity()[0].data()[0] - 1.0002).abs() < 1e-15);
        assert!((m.layers()[0].weight.data()[0] - 0.89998).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_reports_step() {
        let mut m = scalar_model(1.0);
        let mut opt = Sgd::new(&m, 0.1, 0.9, 0.0);
        let ok = vec![Tensor::matrix(1, 1, vec![1.0]).unwrap(), Tensor::zeros(&[1])];
        opt.step(&mut m, &ok).unwrap();
        let bad = vec![
            Tensor::matrix(1, 1, vec![f64::INFINITY]).unwrap(),
            Tensor::zeros(&[1]),
        ];
        match opt.step(&mut m, &bad) {
            Err(Error::Optimizer { step, .. }) => assert_eq!(step, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sgd_rejects_shape_mismatch() {
        let mut m = scalar_model(1.0);
        let mut opt = Sgd::new(&m, 0.1, 0.9, 0.0);
        let g = vec![Tensor::zeros(&[2, 1]), Tensor::zeros(&[1])];
        assert!(matches!(opt.step(&mut m, &g), Err(Error::Shape { .. })));
        assert!(opt.step(&mut m, &g[..1]).is_err());
    }

    #[test]
    fn cross_entropy_descends_on_two_point_problem() {
        let mut m = Mlp::init(&[2, 2], &mut seeded(3)).unwrap();
        let x = Tensor::matrix(2, 2, vec![0.1, 0.9, 0.9, 0.1]).unwrap();
        let y = [0, 1];
        let mut opt = Sgd::new(&m, 1e-3, 0.0, 0.0);
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let tape = Tape::new();
            let vars = m.on_tape(&tape, true);
            let root = vars
                .forward(tape.constant(x.clone()))
                .unwrap()
                .cross_entropy(&y)
                .unwrap()
                .sum()
                .scale(0.5);
            let loss = root.value().data()[0];
            assert!(loss < prev);
            prev = loss;
            let grads = vars.gradients(&tape.backward(root).unwrap());
            opt.step(&mut m, &grads).unwrap();
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = Mlp::init(&[5, 7, 3], &mut seeded(21)).unwrap();
        let back = checkpoint::decode(&checkpoint::encode(&m)).unwrap();
        assert_eq!(m, back);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        m.save(&path).unwrap();
        assert_eq!(Mlp::load(&path).unwrap(), m);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(checkpoint::decode(b"nope").is_err());
        let mut bytes = checkpoint::encode(&Mlp::init(&[2, 2], &mut seeded(1)).unwrap());
        bytes.pop();
        assert!(checkpoint::decode(&bytes).is_err());
        bytes.extend_from_slice(&[0, 0]);
        assert!(checkpoint::decode(&bytes).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let t = Tensor::matrix(2, 3, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }
}
