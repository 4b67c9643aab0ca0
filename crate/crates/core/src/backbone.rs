//! Small convolutional backbone producing the `K x K x D` feature cube, plus
//! the fully-connected classification head used only for pretraining.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::ImageSample;
use crate::param::{bias, glorot_uniform, weight, ParamRef, Parameters};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
}

/// One `conv -> relu [-> maxpool]` stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pool: Option<PoolSpec>,
}

/// Where the feature cube is read from the last stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TapLayer {
    /// After the last conv + relu; the last stage's pool is not applied.
    PostConv,
    /// After the last stage's pool.
    PostPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub stages: Vec<ConvStage>,
    pub tap: TapLayer,
    /// Spatial side of the feature cube.
    pub k: usize,
    /// Channel depth of the feature cube.
    pub d: usize,
    /// Width of the two hidden layers of the classification head.
    pub head_hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let stage = |out_channels| ConvStage {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
            pool: Some(PoolSpec {
                window: 2,
                stride: 2,
            }),
        };
        BackboneConfig {
            input_height: 32,
            input_width: 32,
            input_channels: 3,
            stages: vec![stage(16), stage(32), stage(32)],
            tap: TapLayer::PostConv,
            k: 8,
            d: 32,
            head_hidden: 64,
        }
    }
}

impl BackboneConfig {
    /// Tiny `8x8` stack with a `2x2x4` cube, sized for finite-difference checks.
    pub fn micro() -> Self {
        let stage = |c| ConvStage {
            out_channels: c,
            kernel: 3,
            stride: 1,
            padding: 1,
            pool: Some(PoolSpec { window: 2, stride: 2 }),
        };
        BackboneConfig {
            input_height: 8,
            input_width: 8,
            input_channels: 3,
            stages: vec![stage(4), stage(4)],
            tap: TapLayer::PostPool,
            k: 2,
            d: 4,
            head_hidden: 5,
        }
    }

    /// Runs the spatial arithmetic of the stack and returns the tap shape.
    pub fn tap_shape(&self) -> Result<(usize, usize, usize)> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        let (mut h, mut w, mut c) = (self.input_height, self.input_width, self.input_channels);
        for (i, s) in self.stages.iter().enumerate() {
            if s.kernel == 0 || s.stride == 0 || s.out_channels == 0 {
                return Err(Error::Config(format!("stage {i}: zero kernel/stride/channels")));
            }
            if h + 2 * s.padding < s.kernel || w + 2 * s.padding < s.kernel {
                return Err(Error::Config(format!(
                    "stage {i}: kernel {} does not fit {h}x{w}",
                    s.kernel
                )));
            }
            h = (h + 2 * s.padding - s.kernel) / s.stride + 1;
            w = (w + 2 * s.padding - s.kernel) / s.stride + 1;
            c = s.out_channels;
            let last = i + 1 == self.stages.len();
            if let Some(p) = s.pool.filter(|_| !last || self.tap == TapLayer::PostPool) {
                if p.window == 0 || p.stride == 0 || p.window > h || p.window > w {
                    return Err(Error::Config(format!(
                        "stage {i}: pool window {} does not fit {h}x{w}",
                        p.window
                    )));
                }
                h = (h - p.window) / p.stride + 1;
                w = (w - p.window) / p.stride + 1;
            } else if last && self.tap == TapLayer::PostPool {
                return Err(Error::Config("post-pool tap needs a pool on the last stage".into()));
            }
        }
        Ok((h, w, c))
    }

    /// Checks that the stack yields exactly `k x k x d` at the tap.
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.tap_shape()?;
        if h != self.k || w != self.k || c != self.d {
            return Err(Error::Config(format!(
                "backbone yields {h}x{w}x{c} at the tap but the config declares K={} D={}",
                self.k, self.d
            )));
        }
        Ok(())
    }
}

/// The `K x K x D` map the attention component reads.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCube {
    pub values: Tensor,
}

impl FeatureCube {
    pub fn k(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.values.shape()[2]
    }

    /// Spatial slice `i` (row-major over the `K x K` grid).
    pub fn slice(&self, i: usize) -> &[f64] {
        let d = self.d();
        &self.values.data()[i * d..(i + 1) * d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Three fully-connected layers mapping the flattened cube to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub layers: [(Tensor, Tensor); 3],
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, classes: usize, rng: &mut R) -> Self {
        let fc = |out: usize, inp: usize, rng: &mut R| {
            (glorot_uniform(&[out, inp], inp, out, rng), Tensor::zeros(&[out]))
        };
        ClassifierHead {
            layers: [
                fc(hidden, input, rng),
                fc(hidden, hidden, rng),
                fc(classes, hidden, rng),
            ],
        }
    }

    pub fn classes(&self) -> usize {
        self.layers[2].0.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub convs: Vec<ConvParams>,
    pub classifier: Option<ClassifierHead>,
}

impl BackboneParams {
    pub fn new<R: Rng + ?Sized>(config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut cin = config.input_channels;
        let convs = config
            .stages
            .iter()
            .map(|s| {
                let fan_in = s.kernel * s.kernel * cin;
                let fan_out = s.kernel * s.kernel * s.out_channels;
                let p = ConvParams {
                    weight: glorot_uniform(
                        &[s.kernel, s.kernel, cin, s.out_channels],
                        fan_in,
                        fan_out,
                        rng,
                    ),
                    bias: Tensor::zeros(&[s.out_channels]),
                };
                cin = s.out_channels;
                p
            })
            .collect();
        Ok(BackboneParams {
            convs,
            classifier: None,
        })
    }

    pub fn attach_classifier<R: Rng + ?Sized>(
        &mut self,
        config: &BackboneConfig,
        classes: usize,
        rng: &mut R,
    ) {
        self.classifier = Some(ClassifierHead::new(
            config.k * config.k * config.d,
            config.head_hidden,
            classes,
            rng,
        ));
    }

    /// Drops the classification head, returning it.
    pub fn detach_classifier(&mut self) -> Option<ClassifierHead> {
        self.classifier.take()
    }
}

impl Parameters for BackboneParams {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push(weight(format!("backbone.conv{i}.weight"), &c.weight));
            out.push(bias(format!("backbone.conv{i}.bias"), &c.bias));
        }
        if let Some(head) = &self.classifier {
            for (i, (w, b)) in head.layers.iter().enumerate() {
                out.push(weight(format!("classifier.fc{i}.weight"), w));
                out.push(bias(format!("classifier.fc{i}.bias"), b));
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        if let Some(head) = &mut self.classifier {
            for (w, b) in &mut head.layers {
                out.push(w);
                out.push(b);
            }
        }
        out
    }
}

/// Backbone parameters placed on a tape.
pub struct BackboneVars {
    pub convs: Vec<(Var, Var)>,
    pub classifier: Option<[(Var, Var); 3]>,
}

impl BackboneVars {
    pub fn bind(params: &BackboneParams, tape: &mut Tape, trainable: bool) -> Self {
        let vars = params.bind(tape, trainable);
        let mut it = vars.into_iter();
        let mut pair = || (it.next().unwrap(), it.next().unwrap());
        let convs = (0..params.convs.len()).map(|_| pair()).collect();
        let classifier = params
            .classifier
            .as_ref()
            .map(|_| [pair(), pair(), pair()]);
        BackboneVars { convs, classifier }
    }

    pub fn all(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.convs.iter().flat_map(|(w, b)| [*w, *b]).collect();
        if let Some(head) = &self.classifier {
            out.extend(head.iter().flat_map(|(w, b)| [*w, *b]));
        }
        out
    }
}

fn check_image(image: &Tensor, config: &BackboneConfig) -> Result<()> {
    let expect = [config.input_height, config.input_width, config.input_channels];
    if image.shape() != expect {
        return Err(Error::Config(format!(
            "image shape {:?} does not match backbone input {:?}",
            image.shape(),
            expect
        )));
    }
    Ok(())
}

/// Conv/pool stack from an image node to the `[K, K, D]` tap node.
pub fn forward_cube(
    tape: &mut Tape,
    config: &BackboneConfig,
    vars: &BackboneVars,
    image: Var,
) -> Result<Var> {
    check_image(tape.value(image), config)?;
    let mut x = image;
    let n = config.stages.len();
    for (i, (stage, (w, b))) in config.stages.iter().zip(&vars.convs).enumerate() {
        x = tape.conv2d(x, *w, *b, stage.stride, stage.padding)?;
        x = tape.relu(x);
        let last = i + 1 == n;
        if let Some(p) = stage.pool.filter(|_| !last || config.tap == TapLayer::PostPool) {
            x = tape.maxpool2d(x, p.window, p.stride)?;
        }
    }
    Ok(x)
}

/// Classification logits from a tap node.
pub fn forward_logits(tape: &mut Tape, vars: &BackboneVars, cube: Var) -> Result<Var> {
    let head = vars
        .classifier
        .as_ref()
        .ok_or_else(|| Error::Usage("classification head is not attached".into()))?;
    let n = tape.value(cube).len();
    let mut x = tape.reshape(cube, &[n])?;
    for (i, (w, b)) in head.iter().enumerate() {
        let y = tape.matmul(*w, x)?;
        x = tape.add(y, *b)?;
        if i < 2 {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

/// Deterministic forward pass of one image to its feature cube.
pub fn extract_feature_cube(
    image: &ImageSample,
    config: &BackboneConfig,
    params: &BackboneParams,
) -> Result<FeatureCube> {
    check_image(&image.pixels, config)?;
    let mut tape = Tape::new();
    let vars = BackboneVars::bind(params, &mut tape, false);
    let x = tape.constant(image.pixels.clone());
    let cube = forward_cube(&mut tape, config, &vars, x)?;
    Ok(FeatureCube {
        values: tape.value(cube).clone(),
    })
}

/// Class logits of one image through the backbone and classification head.
pub fn classify(
    image: &ImageSample,
    config: &BackboneConfig,
    params: &BackboneParams,
) -> Result<Tensor> {
    if params.classifier.is_none() {
        return Err(Error::Usage("classification head is not attached".into()));
    }
    let mut tape = Tape::new();
    let vars = BackboneVars::bind(params, &mut tape, false);
    let x = tape.constant(image.pixels.clone());
    let cube = forward_cube(&mut tape, config, &vars, x)?;
    let logits = forward_logits(&mut tape, &vars, cube)?;
    Ok(tape.value(logits).clone())
}
