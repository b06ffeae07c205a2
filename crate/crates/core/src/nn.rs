//! Layer stacks and the three MNIST architectures.
//!
//! | arch | layers                                                            | params    |
//! |------|-------------------------------------------------------------------|-----------|
//! | A    | conv(64,8,2,same) conv(128,6,2,valid) conv(128,5,1,valid) FC(10)  | 710,218   |
//! | B    | conv(128,3,1,same) conv(64,3,2,valid) FC(128) FC(10)              | 1,460,938 |
//! | C    | FC(512) FC(256) FC(128) FC(10)                                    | 567,434   |
//!
//! Hidden layers use ReLU; the last layer emits raw logits.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, argmax_rows, conv_output_extent, ConvGeometry, Padding, Tensor};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::str::FromStr;

pub const NUM_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchId {
    A,
    B,
    C,
    /// Any other layer stack (toy models in tests and gradient checks).
    Custom,
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchId::A => "A",
            ArchId::B => "B",
            ArchId::C => "C",
            ArchId::Custom => "custom",
        })
    }
}

impl FromStr for ArchId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(ArchId::A),
            "B" | "b" => Ok(ArchId::B),
            "C" | "c" => Ok(ArchId::C),
            "custom" => Ok(ArchId::Custom),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        k: usize,
        stride: usize,
        padding: Padding,
    },
    Dense {
        units: usize,
    },
    Relu,
    Flatten,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv {
                filters,
                k,
                stride,
                padding,
            } => write!(f, "conv({filters},{k},{stride},{padding})"),
            LayerSpec::Dense { units } => write!(f, "dense({units})"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::Flatten => f.write_str("flatten"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad layer description {s:?}"));
        match s {
            "relu" => return Ok(LayerSpec::Relu),
            "flatten" => return Ok(LayerSpec::Flatten),
            _ => {}
        }
        let (name, rest) = s.split_once('(').ok_or_else(bad)?;
        let args: Vec<&str> = rest.strip_suffix(')').ok_or_else(bad)?.split(',').collect();
        let num = |i: usize| -> Result<usize> {
            args.get(i)
                .and_then(|a| a.trim().parse().ok())
                .ok_or_else(bad)
        };
        match (name, args.len()) {
            ("dense", 1) => Ok(LayerSpec::Dense { units: num(0)? }),
            ("conv", 4) => Ok(LayerSpec::Conv {
                filters: num(0)?,
                k: num(1)?,
                stride: num(2)?,
                padding: args[3].trim().parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

/// Padding of each convolution in an architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddingPlan(pub Vec<Padding>);

impl PaddingPlan {
    pub fn for_arch(arch: ArchId) -> Self {
        use Padding::*;
        match arch {
            ArchId::A => PaddingPlan(vec![Same, Valid, Valid]),
            ArchId::B => PaddingPlan(vec![Same, Valid]),
            ArchId::C | ArchId::Custom => PaddingPlan(vec![]),
        }
    }
}

pub fn arch_layers(arch: ArchId) -> Result<(Vec<usize>, Vec<LayerSpec>)> {
    use LayerSpec::*;
    let plan = PaddingPlan::for_arch(arch).0;
    let conv = |filters, k, stride, i: usize| Conv {
        filters,
        k,
        stride,
        padding: plan[i],
    };
    Ok(match arch {
        ArchId::A => (
            vec![1, 28, 28],
            vec![
                conv(64, 8, 2, 0),
                Relu,
                conv(128, 6, 2, 1),
                Relu,
                conv(128, 5, 1, 2),
                Relu,
                Flatten,
                Dense { units: NUM_CLASSES },
            ],
        ),
        ArchId::B => (
            vec![1, 28, 28],
            vec![
                conv(128, 3, 1, 0),
                Relu,
                conv(64, 3, 2, 1),
                Relu,
                Flatten,
                Dense { units: 128 },
                Relu,
                Dense { units: NUM_CLASSES },
            ],
        ),
        ArchId::C => (
            vec![784],
            vec![
                Dense { units: 512 },
                Relu,
                Dense { units: 256 },
                Relu,
                Dense { units: 128 },
                Relu,
                Dense { units: NUM_CLASSES },
            ],
        ),
        ArchId::Custom => {
            return Err(Error::InvalidArgument(
                "custom models are built with Model::from_layers".into(),
            ))
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug)]
enum Resolved {
    Conv {
        weight: usize,
        bias: usize,
        stride: usize,
        padding: Padding,
    },
    Dense {
        weight: usize,
        bias: usize,
    },
    Relu,
    Flatten,
}

/// An ordered layer stack with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: ArchId,
    seed: u64,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Param>,
}

type ShapePlan = (Vec<(String, Vec<usize>)>, Vec<usize>);

/// Shapes of the parameters each layer owns, plus the per-example output shape.
fn plan_shapes(input_shape: &[usize], layers: &[LayerSpec]) -> Result<ShapePlan> {
    let mut shape = input_shape.to_vec();
    let mut params = Vec::new();
    let (mut convs, mut denses) = (0, 0);
    for layer in layers {
        match *layer {
            LayerSpec::Conv {
                filters,
                k,
                stride,
                padding,
            } => {
                let &[c, h, w] = shape.as_slice() else {
                    return Err(Error::Model(format!(
                        "conv layer needs CHW input, got {shape:?}"
                    )));
                };
                let (oh, _) = conv_output_extent(h, k, stride, padding)?;
                let (ow, _) = conv_output_extent(w, k, stride, padding)?;
                convs += 1;
                params.push((format!("conv{convs}.weight"), vec![filters, c, k, k]));
                params.push((format!("conv{convs}.bias"), vec![filters]));
                shape = vec![filters, oh, ow];
            }
            LayerSpec::Dense { units } => {
                let &[p] = shape.as_slice() else {
                    return Err(Error::Model(format!(
                        "dense layer needs flat input, got {shape:?}"
                    )));
                };
                denses += 1;
                params.push((format!("dense{denses}.weight"), vec![p, units]));
                params.push((format!("dense{denses}.bias"), vec![units]));
                shape = vec![units];
            }
            LayerSpec::Relu => {}
            LayerSpec::Flatten => shape = vec![shape.iter().product()],
        }
    }
    Ok((params, shape))
}

fn glorot_uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let (fan_in, fan_out) = match *shape {
        [f, c, kh, kw] => (c * kh * kw, f * kh * kw),
        [p, q] => (p, q),
        _ => unreachable!("weights are matrices or conv kernels"),
    };
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized from shape")
}

impl Model {
    /// Builds one of the three architectures with Glorot-uniform weights and zero biases.
    pub fn build(arch: ArchId, seed: u64) -> Result<Self> {
        let (input_shape, layers) = arch_layers(arch)?;
        let mut m = Self::from_layers(&input_shape, &layers, seed)?;
        m.arch = arch;
        Ok(m)
    }

    pub fn from_layers(input_shape: &[usize], layers: &[LayerSpec], seed: u64) -> Result<Self> {
        let (shapes, _) = plan_shapes(input_shape, layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = shapes
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.ends_with(".weight") {
                    glorot_uniform(&shape, &mut rng)
                } else {
                    Tensor::zeros(shape)
                };
                Param { name, value }
            })
            .collect();
        Ok(Self {
            arch: ArchId::Custom,
            seed,
            input_shape: input_shape.to_vec(),
            layers: layers.to_vec(),
            params,
        })
    }

    /// Reassembles a model from stored parameters, checking every shape.
    pub fn from_parts(
        arch: ArchId,
        seed: u64,
        input_shape: &[usize],
        layers: &[LayerSpec],
        params: Vec<Param>,
    ) -> Result<Self> {
        let (shapes, _) = plan_shapes(input_shape, layers)?;
        if shapes.len() != params.len()
            || shapes
                .iter()
                .zip(&params)
                .any(|((n, s), p)| n != &p.name || s.as_slice() != p.value.shape())
        {
            return Err(Error::Model(
                "parameters do not match the layer stack".into(),
            ));
        }
        Ok(Self {
            arch,
            seed,
            input_shape: input_shape.to_vec(),
            layers: layers.to_vec(),
            params,
        })
    }

    pub fn arch(&self) -> ArchId {
        self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        self.params.iter().map(|p| &p.value).collect()
    }

    pub fn output_len(&self) -> usize {
        plan_shapes(&self.input_shape, &self.layers)
            .map(|(_, s)| s.iter().product())
            .unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Model(format!("no parameter named {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Model(format!(
                "parameter {name} has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Replaces every parameter value, in order.
    pub fn set_param_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Model("wrong number of parameter tensors".into()));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::Model(format!("shape mismatch for {}", p.name)));
            }
            p.value = v;
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    fn resolved(&self) -> Vec<Resolved> {
        let mut next = 0;
        let mut take = || {
            next += 2;
            (next - 2, next - 1)
        };
        self.layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Conv {
                    stride, padding, ..
                } => {
                    let (weight, bias) = take();
                    Resolved::Conv {
                        weight,
                        bias,
                        stride,
                        padding,
                    }
                }
                LayerSpec::Dense { .. } => {
                    let (weight, bias) = take();
                    Resolved::Dense { weight, bias }
                }
                LayerSpec::Relu => Resolved::Relu,
                LayerSpec::Flatten => Resolved::Flatten,
            })
            .collect()
    }

    /// The batch shape `[n, ..input_shape]` for an input holding `n` examples.
    pub fn batch_shape(&self, x: &Tensor) -> Result<Vec<usize>> {
        let per = self.input_len();
        let n = x.shape().first().copied().unwrap_or(0);
        if x.rank() < 2 || x.len() != n * per {
            return Err(Error::Model(format!(
                "input of shape {:?} does not hold examples of shape {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&self.input_shape);
        Ok(shape)
    }

    /// Adds the parameters to `g` as leaves.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.value.clone(), requires_grad))
            .collect()
    }

    /// Differentiable logits for the batch `x`. Flat and image-shaped inputs are
    /// reshaped to the model's input shape.
    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let shape = self.batch_shape(g.value(x))?;
        let mut h = if g.value(x).shape() == shape.as_slice() {
            x
        } else {
            g.reshape(x, &shape)?
        };
        for layer in self.resolved() {
            h = match layer {
                Resolved::Conv {
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let geom = ConvGeometry::new(
                        g.value(h).shape(),
                        g.value(params[weight]).shape(),
                        stride,
                        padding,
                    )?;
                    let c = g.conv2d(h, params[weight], geom)?;
                    g.add_bias(c, params[bias])?
                }
                Resolved::Dense { weight, bias } => {
                    let m = g.matmul(h, params[weight], false, false)?;
                    g.add_bias(m, params[bias])?
                }
                Resolved::Relu => g.relu(h),
                Resolved::Flatten => {
                    let s = g.value(h).shape();
                    let flat = vec![s[0], s[1..].iter().product()];
                    g.reshape(h, &flat)?
                }
            };
        }
        Ok(h)
    }

    /// Logits computed directly with the tensor kernels, outside any graph.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.reshape(self.batch_shape(x)?)?;
        for layer in self.resolved() {
            h = match layer {
                Resolved::Conv {
                    weight,
                    bias,
                    stride,
                    padding,
                } => tensor::conv2d(
                    &h,
                    &self.params[weight].value,
                    &self.params[bias].value,
                    stride,
                    padding,
                )?,
                Resolved::Dense { weight, bias } => {
                    tensor::dense(&h, &self.params[weight].value, &self.params[bias].value)?
                }
                Resolved::Relu => tensor::relu(&h),
                Resolved::Flatten => {
                    let s = h.shape();
                    let flat = vec![s[0], s[1..].iter().product()];
                    h.reshape(flat)?
                }
            };
        }
        Ok(h)
    }

    /// Decision function: argmax of the logits, ties to the lowest class index.
    pub fn decide(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?)?)
    }

    /// Layer stack as a `;`-separated description, e.g. `dense(2);relu;dense(1)`.
    pub fn describe_layers(&self) -> String {
        self.layers
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(";")
    }
}

pub fn parse_layers(s: &str) -> Result<Vec<LayerSpec>> {
    s.split(';')
        .filter(|p| !p.is_empty())
        .map(str::parse)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Layer-by-layer parameter count, computed from the architecture table by hand.
    fn count_oracle(arch: ArchId) -> usize {
        let conv = |nf: usize, c: usize, k: usize| nf * c * k * k + nf;
        let fc = |i: usize, o: usize| i * o + o;
        match arch {
            // 28 -same/2-> 14 -valid k6 s2-> 5 -valid k5-> 1
            ArchId::A => conv(64, 1, 8) + conv(128, 64, 6) + conv(128, 128, 5) + fc(128, 10),
            // 28 -same-> 28 -valid k3 s2-> 13
            ArchId::B => conv(128, 1, 3) + conv(64, 128, 3) + fc(13 * 13 * 64, 128) + fc(128, 10),
            ArchId::C => fc(784, 512) + fc(512, 256) + fc(256, 128) + fc(128, 10),
            ArchId::Custom => unreachable!(),
        }
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(Model::build(ArchId::C, 0).unwrap().param_count(), 567_434);
        assert_eq!(Model::build(ArchId::A, 0).unwrap().param_count(), 710_218);
        let b = Model::build(ArchId::B, 0).unwrap().param_count();
        assert_eq!(b, count_oracle(ArchId::B));
        assert_eq!(b, 1_460_938);
        for arch in [ArchId::A, ArchId::C] {
            assert_eq!(
                Model::build(arch, 0).unwrap().param_count(),
                count_oracle(arch)
            );
        }
    }

    #[test]
    fn padding_plans() {
        assert_eq!(
            PaddingPlan::for_arch(ArchId::A).0,
            vec![Padding::Same, Padding::Valid, Padding::Valid]
        );
        assert_eq!(
            PaddingPlan::for_arch(ArchId::B).0,
            vec![Padding::Same, Padding::Valid]
        );
    }

    #[test]
    fn architectures_end_in_ten_logits_with_one_flatten() {
        for arch in [ArchId::A, ArchId::B, ArchId::C] {
            let m = Model::build(arch, 1).unwrap();
            assert_eq!(m.output_len(), NUM_CLASSES);
            assert_eq!(
                m.layers().last(),
                Some(&LayerSpec::Dense { units: NUM_CLASSES })
            );
            let flattens = m
                .layers()
                .iter()
                .filter(|l| **l == LayerSpec::Flatten)
                .count();
            assert_eq!(flattens, if arch == ArchId::C { 0 } else { 1 });
            // every hidden activation is ReLU: each parametrised layer but the last is followed by relu
            for w in m.layers().windows(2) {
                if matches!(w[0], LayerSpec::Conv { .. } | LayerSpec::Dense { .. }) {
                    assert_eq!(w[1], LayerSpec::Relu);
                }
            }
        }
    }

    #[test]
    fn zero_final_layer_gives_zero_logits() {
        let mut m = Model::build(ArchId::C, 3).unwrap();
        m.set_param("dense4.weight", Tensor::zeros(vec![128, 10]))
            .unwrap();
        let x = Tensor::full(vec![2, 1, 28, 28], 0.4);
        assert!(m.logits(&x).unwrap().data().iter().all(|&v| v == 0.0));
        let m = Model::build(ArchId::C, 3).unwrap();
        let z = m.logits(&Tensor::zeros(vec![1, 784])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_rows_give_identical_logits_and_graph_matches_kernels() {
        for arch in [ArchId::A, ArchId::B, ArchId::C] {
            let m = Model::build(arch, 7).unwrap();
            let img: Vec<f64> = (0..784).map(|i| ((i * 37) % 255) as f64 / 255.0).collect();
            let mut data = img.clone();
            data.extend(&img);
            let x = Tensor::new(vec![2, 1, 28, 28], data).unwrap();
            let z = m.logits(&x).unwrap();
            assert_eq!(&z.data()[..10], &z.data()[10..]);
            let mut g = Graph::new();
            let p = m.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let y = m.forward(&mut g, &p, xv).unwrap();
            assert!(g.value(y).max_abs_diff(&z) < 1e-12);
        }
    }

    #[test]
    fn decide_breaks_ties_low_and_is_shift_invariant() {
        let mut m = Model::from_layers(&[2], &[LayerSpec::Dense { units: 10 }], 0).unwrap();
        m.set_param("dense1.weight", Tensor::zeros(vec![2, 10]))
            .unwrap();
        assert_eq!(m.decide(&Tensor::zeros(vec![1, 2])).unwrap(), vec![0]);
        let mut b = vec![0.0; 10];
        b[7] = 1.0;
        m.set_param("dense1.bias", Tensor::new(vec![10], b.clone()).unwrap())
            .unwrap();
        assert_eq!(m.decide(&Tensor::zeros(vec![1, 2])).unwrap(), vec![7]);
        let shifted: Vec<f64> = b.iter().map(|v| v + 3.5).collect();
        m.set_param("dense1.bias", Tensor::new(vec![10], shifted).unwrap())
            .unwrap();
        assert_eq!(m.decide(&Tensor::zeros(vec![1, 2])).unwrap(), vec![7]);
    }

    #[test]
    fn same_seed_same_weights() {
        assert_eq!(
            Model::build(ArchId::C, 5).unwrap(),
            Model::build(ArchId::C, 5).unwrap()
        );
        assert_ne!(
            Model::build(ArchId::C, 5).unwrap(),
            Model::build(ArchId::C, 6).unwrap()
        );
    }

    #[test]
    fn glorot_limits_and_zero_biases() {
        let m = Model::build(ArchId::C, 11).unwrap();
        let limit = (6.0f64 / (784.0 + 512.0)).sqrt();
        let w = &m.params()[0].value;
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        assert!(w.data().iter().any(|v| v.abs() > 0.9 * limit));
        assert!(m.params()[1].value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_descriptions_round_trip() {
        for arch in [ArchId::A, ArchId::B, ArchId::C] {
            let m = Model::build(arch, 0).unwrap();
            assert_eq!(parse_layers(&m.describe_layers()).unwrap(), m.layers());
        }
        assert!(parse_layers("conv(1,2)").is_err());
    }

    #[test]
    fn wrong_input_shape_is_an_error() {
        let m = Model::build(ArchId::C, 0).unwrap();
        assert!(m.logits(&Tensor::zeros(vec![1, 783])).is_err());
    }
}
