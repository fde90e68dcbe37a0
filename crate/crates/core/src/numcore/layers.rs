use rand::Rng;

use super::tape::{ConvGeom, Tape, Var};
use super::tensor::{ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

/// One differentiable layer. Parameterised kinds own `<name>.weight` and `<name>.bias`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        pad: [usize; 2],
    },
    Conv3d {
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    },
    MaxPool2d {
        kernel: [usize; 2],
        stride: [usize; 2],
    },
    Relu,
    Linear {
        out_dim: usize,
    },
    /// `[N, C, T, H, W] -> [N, C·T, H, W]`.
    FoldTime,
    /// `[N, ...] -> [N, prod(...)]`.
    Flatten,
}

fn conv_out(axis: usize, extent: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let padded = extent + 2 * pad;
    if kernel == 0 || kernel > padded {
        return Err(Error::dim(
            "apply_layer",
            axis,
            format!("kernel {kernel} does not fit padded extent {padded}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

impl LayerSpec {
    pub fn conv2d(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        LayerSpec::Conv2d {
            out_channels,
            kernel: [kernel, kernel],
            stride: [stride, stride],
            pad: [pad, pad],
        }
    }

    pub fn maxpool(kernel: [usize; 2], stride: [usize; 2]) -> Self {
        LayerSpec::MaxPool2d { kernel, stride }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv2d { .. } | LayerSpec::Conv3d { .. } | LayerSpec::Linear { .. }
        )
    }

    /// Output shape of a batched input (leading batch axis included).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let rank = input.len();
        let need = |r: usize| -> Result<()> {
            if rank != r {
                Err(Error::dim("apply_layer", 0, format!("expected rank {r}, got {input:?}")))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                need(4)?;
                Ok(vec![
                    input[0],
                    out_channels,
                    conv_out(2, input[2], kernel[0], stride[0], pad[0])?,
                    conv_out(3, input[3], kernel[1], stride[1], pad[1])?,
                ])
            }
            LayerSpec::Conv3d {
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                need(5)?;
                let mut out = vec![input[0], out_channels];
                for a in 0..3 {
                    out.push(conv_out(2 + a, input[2 + a], kernel[a], stride[a], pad[a])?);
                }
                Ok(out)
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                need(4)?;
                Ok(vec![
                    input[0],
                    input[1],
                    conv_out(2, input[2], kernel[0], stride[0], 0)?,
                    conv_out(3, input[3], kernel[1], stride[1], 0)?,
                ])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Linear { out_dim } => {
                let mut out = input.to_vec();
                *out.last_mut()
                    .ok_or_else(|| Error::dim("apply_layer", 0, "linear on rank-0 input"))? = out_dim;
                Ok(out)
            }
            LayerSpec::FoldTime => {
                need(5)?;
                Ok(vec![input[0], input[1] * input[2], input[3], input[4]])
            }
            LayerSpec::Flatten => {
                if rank < 2 {
                    return Err(Error::dim("apply_layer", 0, "flatten needs a batch axis"));
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
        }
    }

    fn weight_shape(&self, input: &[usize]) -> Option<(Vec<usize>, usize)> {
        match *self {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, input[1], kernel[0], kernel[1]],
                input[1] * kernel[0] * kernel[1],
            )),
            LayerSpec::Conv3d {
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, input[1], kernel[0], kernel[1], kernel[2]],
                input[1] * kernel.iter().product::<usize>(),
            )),
            LayerSpec::Linear { out_dim } => {
                let fan_in = *input.last()?;
                Some((vec![out_dim, fan_in], fan_in))
            }
            _ => None,
        }
    }

    /// Adds freshly initialised parameters for this layer, uniform in ±1/√fan_in.
    pub fn init<T: Scalar>(
        &self,
        name: &str,
        input: &[usize],
        rng: &mut impl Rng,
        params: &mut ParamSet<T>,
    ) -> Result<()> {
        self.output_shape(input)?;
        let Some((wshape, fan_in)) = self.weight_shape(input) else {
            return Ok(());
        };
        let out = wshape[0];
        let bound = 1.0 / (fan_in as f64).sqrt();
        params.insert(format!("{name}.weight"), uniform(&wshape, bound, rng))?;
        params.insert(format!("{name}.bias"), uniform(&[out], bound, rng))?;
        Ok(())
    }
}

/// Seeded uniform(−bound, bound) tensor, tracked.
pub fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data)
        .expect("non-empty shape")
        .tracked()
}

/// Applies one layer. Convolution and pooling accept unbatched inputs too
/// (`C×H×W` / `C×T×H×W`); everything else expects a leading batch axis.
pub fn apply_layer<'t, T: Scalar>(
    tape: &'t Tape<T>,
    spec: &LayerSpec,
    name: &str,
    params: &ParamSet<T>,
    input: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let shape = input.shape();
    let unbatched_rank = match spec {
        LayerSpec::Conv2d { .. } | LayerSpec::MaxPool2d { .. } => Some(3),
        LayerSpec::Conv3d { .. } => Some(4),
        _ => None,
    };
    if unbatched_rank == Some(shape.len()) {
        let mut b = vec![1];
        b.extend_from_slice(&shape);
        let y = apply_layer(tape, spec, name, params, input.reshape(&b)?)?;
        let ys = y.shape();
        return y.reshape(&ys[1..]);
    }
    let out_shape = spec.output_shape(&shape)?;
    match *spec {
        LayerSpec::Conv2d {
            kernel,
            stride,
            pad,
            ..
        } => {
            let w = tape.param(params, &format!("{name}.weight"))?;
            let b = tape.param(params, &format!("{name}.bias"))?;
            let ws = w.shape();
            if ws.len() != 4 || ws[1] != shape[1] {
                return Err(Error::dim(
                    "apply_layer",
                    1,
                    format!("{name}: weight {ws:?} vs input channels {}", shape[1]),
                ));
            }
            let w5 = w.reshape(&[ws[0], ws[1], 1, ws[2], ws[3]])?;
            let x5 = input.reshape(&[shape[0], shape[1], 1, shape[2], shape[3]])?;
            let geom = ConvGeom {
                kernel: [1, kernel[0], kernel[1]],
                stride: [1, stride[0], stride[1]],
                pad: [0, pad[0], pad[1]],
            };
            x5.conv3d(&w5, &b, geom)?.reshape(&out_shape)
        }
        LayerSpec::Conv3d {
            kernel,
            stride,
            pad,
            ..
        } => {
            let w = tape.param(params, &format!("{name}.weight"))?;
            let b = tape.param(params, &format!("{name}.bias"))?;
            input.conv3d(&w, &b, ConvGeom { kernel, stride, pad })
        }
        LayerSpec::MaxPool2d { kernel, stride } => input.maxpool2d(kernel, stride),
        LayerSpec::Relu => input.relu(),
        LayerSpec::Linear { .. } => {
            let w = tape.param(params, &format!("{name}.weight"))?;
            let b = tape.param(params, &format!("{name}.bias"))?;
            input.linear(&w, Some(&b))
        }
        LayerSpec::FoldTime | LayerSpec::Flatten => input.reshape(&out_shape),
    }
}

/// A named sequence of layers; parameters are `<prefix>.<index>.{weight,bias}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub prefix: String,
    pub layers: Vec<LayerSpec>,
}

impl Stack {
    pub fn new(prefix: impl Into<String>, layers: Vec<LayerSpec>) -> Self {
        Stack {
            prefix: prefix.into(),
            layers,
        }
    }

    fn layer_name(&self, i: usize) -> String {
        format!("{}.{i}", self.prefix)
    }

    /// Batched shapes after every layer, starting with `input`.
    pub fn shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![input.to_vec()];
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn init<T: Scalar>(&self, input: &[usize], rng: &mut impl Rng) -> Result<ParamSet<T>> {
        let mut params = ParamSet::new();
        let shapes = self.shapes(input)?;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.init(&self.layer_name(i), &shapes[i], rng, &mut params)?;
        }
        Ok(params)
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        params: &ParamSet<T>,
        input: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.layers
            .iter()
            .enumerate()
            .try_fold(input, |x, (i, layer)| {
                apply_layer(tape, layer, &self.layer_name(i), params, x)
            })
    }
}
