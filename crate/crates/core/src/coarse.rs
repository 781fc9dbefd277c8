//! The coarse stage: a small fully convolutional classifier working at a
//! quarter of the input resolution with a learned x4 upsampling, and a
//! model-free degrader that turns label maps into similarly fuzzy scores.

use std::path::PathBuf;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{minibatch_step, xavier_init, Optimizer, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::maps::{LabelMap, ScoreStack};
use crate::ops::{self, Padding};
use crate::synth::{sample_patches, LabelSource, Scene, NUM_CLASSES};
use crate::tensor::Tensor;
use crate::Rng;

/// Spatial reduction of the first layer, undone by the upsampling layer.
pub const STRIDE: usize = 4;
const PREFIX: &str = "coarse";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoarseNetConfig {
    pub classes: usize,
    /// Filter counts of the three hidden layers.
    pub widths: [usize; 3],
    pub first_kernel: usize,
    pub hidden_kernel: usize,
    pub class_kernel: usize,
}

impl Default for CoarseNetConfig {
    fn default() -> Self {
        CoarseNetConfig {
            classes: NUM_CLASSES,
            widths: [64, 128, 128],
            first_kernel: 12,
            hidden_kernel: 3,
            class_kernel: 9,
        }
    }
}

struct Layer {
    name: &'static str,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
}

impl CoarseNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.widths.contains(&0) {
            return Err(Error::Config(format!("invalid coarse network shape {self:?}")));
        }
        if self.hidden_kernel % 2 == 0 || self.class_kernel % 2 == 0 || self.first_kernel == 0 {
            return Err(Error::Config("stride-1 kernels must have odd size".into()));
        }
        Ok(())
    }

    fn layers(&self) -> [Layer; 4] {
        let [a, b, c] = self.widths;
        [
            Layer { name: "conv1", cin: 3, cout: a, kernel: self.first_kernel, stride: STRIDE },
            Layer { name: "conv2", cin: a, cout: b, kernel: self.hidden_kernel, stride: 1 },
            Layer { name: "conv3", cin: b, cout: c, kernel: self.hidden_kernel, stride: 1 },
            Layer { name: "conv4", cin: c, cout: self.classes, kernel: self.class_kernel, stride: 1 },
        ]
    }

    /// Xavier-initialized convolutions, zero biases and a bilinear
    /// upsampling kernel.
    pub fn init(&self, rng: &mut Rng) -> Result<ParamStore> {
        self.validate()?;
        let mut store = ParamStore::new();
        for l in self.layers() {
            let fan_in = l.cin * l.kernel * l.kernel;
            store.insert(
                format!("{PREFIX}.{}.w", l.name),
                xavier_init(&[l.cout, l.cin, l.kernel, l.kernel], fan_in, rng)?,
            )?;
            store.insert(format!("{PREFIX}.{}.b", l.name), Tensor::zeros(&[l.cout]))?;
        }
        store.insert(
            format!("{PREFIX}.up.w"),
            ops::bilinear_upsample_kernels(self.classes, STRIDE),
        )?;
        Ok(store)
    }

    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        for l in self.layers() {
            let w = format!("{PREFIX}.{}.w", l.name);
            let expected = [l.cout, l.cin, l.kernel, l.kernel];
            match params.value(&w) {
                Some(t) if t.shape() == expected => {}
                other => {
                    return Err(Error::Shape(format!(
                        "`{w}` should be {expected:?}, found {:?}",
                        other.map(|t| t.shape().to_vec())
                    )))
                }
            }
        }
        Ok(())
    }

    /// Records the network on `tape`; `image` must be `[H, W, 3]` with `H`
    /// and `W` divisible by the stride.
    pub fn graph(&self, params: &ParamStore, tape: &mut Tape, image: Var) -> Result<Var> {
        let g = tape.value(image).grid()?;
        if g.height % STRIDE != 0 || g.width % STRIDE != 0 {
            return Err(Error::Shape(format!(
                "coarse network input {}x{} is not divisible by {STRIDE}",
                g.height, g.width
            )));
        }
        let mut x = image;
        let layers = self.layers();
        for (i, l) in layers.iter().enumerate() {
            let w = tape.param(params, &format!("{PREFIX}.{}.w", l.name))?;
            let b = tape.param(params, &format!("{PREFIX}.{}.b", l.name))?;
            let y = tape.conv2d(x, w, l.stride, Padding::Same)?;
            let y = tape.bias_add(y, b)?;
            x = if i + 1 < layers.len() { tape.relu(y) } else { y };
        }
        let up = tape.param(params, &format!("{PREFIX}.up.w"))?;
        tape.upsample(x, up, STRIDE)
    }
}

/// Full-resolution class scores. Inputs whose sides are not multiples of
/// the stride are padded by edge replication and the result is cropped.
pub fn coarse_forward(image: &Tensor, params: &ParamStore, config: &CoarseNetConfig) -> Result<ScoreStack> {
    let g = image.grid()?;
    if g.channels != 3 {
        return Err(Error::Shape(format!("expected an RGB image, got {:?}", image.shape())));
    }
    let ph = g.height.div_ceil(STRIDE) * STRIDE;
    let pw = g.width.div_ceil(STRIDE) * STRIDE;
    let padded = if (ph, pw) == (g.height, g.width) {
        image.clone()
    } else {
        Tensor::from_fn3(ph, pw, 3, |y, x, c| image.at3(y.min(g.height - 1), x.min(g.width - 1), c))
    };
    let mut tape = Tape::new();
    let input = tape.input(padded);
    let out = config.graph(params, &mut tape, input)?;
    let scores = tape.value(out).crop(0, 0, g.height, g.width)?;
    if !scores.all_finite() {
        return Err(Error::NonFinite("coarse network scores".into()));
    }
    ScoreStack::new(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoarseTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub patch: usize,
    pub optimizer: Optimizer,
    pub labels: LabelSource,
}

impl Default for CoarseTrainConfig {
    fn default() -> Self {
        CoarseTrainConfig {
            steps: 2000,
            batch: 64,
            patch: 64,
            optimizer: Optimizer::coarse_default(),
            labels: LabelSource::Reference,
        }
    }
}

/// Momentum SGD on pixelwise cross-entropy over random patches. Returns the
/// mean minibatch loss of every step.
pub fn train_coarse(
    params: &mut ParamStore,
    net: &CoarseNetConfig,
    scenes: &[Scene],
    config: &CoarseTrainConfig,
    rng: &mut Rng,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    net.check_params(params)?;
    if config.patch % STRIDE != 0 || config.batch == 0 {
        return Err(Error::Config(format!(
            "coarse training needs a non-empty batch of patches divisible by {STRIDE}"
        )));
    }
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = sample_patches(scenes, config.patch, config.batch, config.labels, rng)?;
        let loss = minibatch_step(params, &config.optimizer, &batch, |p, tape, s| {
            let x = tape.input(s.image.clone());
            let scores = net.graph(p, tape, x)?;
            tape.softmax_cross_entropy(scores, &s.labels)
        })
        .map_err(|e| match e {
            Error::Diverged { loss, .. } => Error::Diverged { step, loss },
            other => other,
        })?;
        on_step(step, loss);
        losses.push(loss);
    }
    Ok(losses)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegraderConfig {
    /// Gaussian blur of the score maps, in pixels.
    pub sigma: f64,
    /// Probability that a pixel's class is replaced by a uniformly drawn one
    /// before blurring.
    pub noise: f64,
    /// Scores are `+logit` for the labelled class and `-logit` otherwise.
    pub logit: f32,
}

impl Default for DegraderConfig {
    fn default() -> Self {
        DegraderConfig {
            sigma: 2.0,
            noise: 0.1,
            logit: 2.0,
        }
    }
}

impl DegraderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !(0.0..1.0).contains(&self.noise) || !(self.logit > 0.0) {
            return Err(Error::Config(format!("invalid degrader settings {self:?}")));
        }
        Ok(())
    }
}

/// Where the initial heat maps come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoarseProviderConfig {
    /// A trained coarse network checkpoint.
    Network { checkpoint: PathBuf },
    /// The degrader applied to a scene's reference labels.
    Degrader(DegraderConfig),
}

impl Default for CoarseProviderConfig {
    fn default() -> Self {
        CoarseProviderConfig::Degrader(DegraderConfig::default())
    }
}

/// Fuzzy class scores from a label map: signed one-hot logits, random class
/// flips at the noise rate, then per-channel Gaussian blur.
pub fn degrade_to_coarse(labels: &LabelMap, classes: usize, config: &DegraderConfig, rng: &mut Rng) -> Result<ScoreStack> {
    config.validate()?;
    labels.check_classes(classes)?;
    let mut noisy = labels.clone();
    if config.noise > 0.0 {
        for l in noisy.data_mut() {
            if rng.gen_bool(config.noise) {
                *l = rng.gen_range(0..classes) as u8;
            }
        }
    }
    let logits = noisy.one_hot(classes, config.logit, -config.logit)?;
    ScoreStack::new(ops::gaussian_smooth(&logits, config.sigma)?)
}
