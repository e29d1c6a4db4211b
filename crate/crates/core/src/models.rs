//! Small fixed image classifiers with seeded initialization.
//!
//! | arch          | structure                                                                  |
//! |---------------|----------------------------------------------------------------------------|
//! | `mlp`         | linear(C·H·W → 32s) · act · linear(32s → classes)                          |
//! | `lenet_small` | 3 × [conv 5×5, 12s channels, pad 2, strides 2/2/1 · act] · linear          |
//! | `convmini`    | 3 conv · maxpool · 3 conv · maxpool · 1 conv (3×3, 64s channels) · linear  |
//!
//! `s` is `width_scale`; channel counts are `max(1, round(base · s))`. None of
//! the architectures normalize across the batch, so each output row depends
//! only on its own input row.
//!
//! Parameter counts (`d`): a convolution contributes `co·ci·k·k + co`, a linear
//! layer `out·in + out`. For example `mlp` on 1×28×28 with 10 classes has
//! `784·32 + 32 + 32·10 + 10 = 25_450` parameters.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::Window;
use crate::layout::{FlatGradient, Layout};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    LenetSmall,
    Convmini,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::LenetSmall => "lenet_small",
            Arch::Convmini => "convmini",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "lenet_small" => Ok(Arch::LenetSmall),
            "convmini" => Ok(Arch::Convmini),
            _ => Err(Error::InvalidArgument(format!("unknown architecture {s:?}"))),
        }
    }

    fn default_activation(self) -> Activation {
        match self {
            Arch::Mlp | Arch::LenetSmall => Activation::Sigmoid,
            Arch::Convmini => Activation::Relu,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Relu,
}

fn default_width() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: Arch,
    /// `(channels, height, width)`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    #[serde(default = "default_width")]
    pub width_scale: f64,
    /// Defaults to sigmoid for `mlp`/`lenet_small` and ReLU for `convmini`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
}

impl ArchSpec {
    pub fn new(name: Arch, input_shape: [usize; 3], num_classes: usize) -> Self {
        ArchSpec {
            name,
            input_shape,
            num_classes,
            width_scale: 1.0,
            activation: None,
        }
    }

    pub fn with_width(mut self, width_scale: f64) -> Self {
        self.width_scale = width_scale;
        self
    }

    pub fn with_activation(mut self, act: Activation) -> Self {
        self.activation = Some(act);
        self
    }

    pub fn activation(&self) -> Activation {
        self.activation.unwrap_or(self.name.default_activation())
    }

    fn channels(&self, base: usize) -> usize {
        ((base as f64 * self.width_scale).round() as usize).max(1)
    }

    /// One-line description used in manifests.
    pub fn describe(&self) -> String {
        let [c, h, w] = self.input_shape;
        format!(
            "{} {}x{}x{} classes={} width={} act={:?}",
            self.name.name(),
            c,
            h,
            w,
            self.num_classes,
            self.width_scale,
            self.activation()
        )
    }

    fn layers(&self) -> Result<Vec<Layer>> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 || self.num_classes == 0 || !(self.width_scale > 0.0) {
            return Err(Error::InvalidArgument(format!("degenerate architecture {}", self.describe())));
        }
        let unsupported = |why: &str| Err(Error::InvalidArgument(format!("{}: {}", self.describe(), why)));
        let mut layers = Vec::new();
        match self.name {
            Arch::Mlp => {
                let hidden = self.channels(32);
                layers.push(Layer::Flatten);
                layers.push(Layer::Linear { name: "fc1", inp: c * h * w, out: hidden });
                layers.push(Layer::Act);
                layers.push(Layer::Linear { name: "fc2", inp: hidden, out: self.num_classes });
            }
            Arch::LenetSmall => {
                if h < 8 || w < 8 {
                    return unsupported("lenet_small needs inputs of at least 8x8");
                }
                let ch = self.channels(12);
                let mut shape = (c, h, w);
                for (i, stride) in [2usize, 2, 1].into_iter().enumerate() {
                    let win = Window { stride, pad: 2 };
                    layers.push(Layer::Conv { name: CONV_NAMES[i], inp: shape.0, out: ch, k: 5, win });
                    layers.push(Layer::Act);
                    shape = (ch, (shape.1 + 4 - 5) / stride + 1, (shape.2 + 4 - 5) / stride + 1);
                }
                layers.push(Layer::Flatten);
                layers.push(Layer::Linear { name: "fc", inp: shape.0 * shape.1 * shape.2, out: self.num_classes });
            }
            Arch::Convmini => {
                if h % 4 != 0 || w % 4 != 0 || h < 8 || w < 8 {
                    return unsupported("convmini needs height and width divisible by 4 and at least 8");
                }
                let ch = self.channels(64);
                let same = Window { stride: 1, pad: 1 };
                let mut inp = c;
                for (i, name) in CONV_NAMES.iter().enumerate() {
                    layers.push(Layer::Conv { name, inp, out: ch, k: 3, win: same });
                    layers.push(Layer::Act);
                    inp = ch;
                    if i == 2 || i == 5 {
                        layers.push(Layer::MaxPool);
                    }
                }
                layers.push(Layer::Flatten);
                layers.push(Layer::Linear { name: "fc", inp: ch * (h / 4) * (w / 4), out: self.num_classes });
            }
        }
        Ok(layers)
    }

    pub fn layout(&self) -> Result<Layout> {
        Ok(layout_of(&self.layers()?))
    }
}

const CONV_NAMES: [&str; 7] = ["conv1", "conv2", "conv3", "conv4", "conv5", "conv6", "conv7"];

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Conv { name: &'static str, inp: usize, out: usize, k: usize, win: Window },
    Linear { name: &'static str, inp: usize, out: usize },
    Act,
    MaxPool,
    Flatten,
}

fn layout_of(layers: &[Layer]) -> Layout {
    let mut items = Vec::new();
    for l in layers {
        match *l {
            Layer::Conv { name, inp, out, k, .. } => {
                items.push((format!("{name}.weight"), vec![out, inp, k, k]));
                items.push((format!("{name}.bias"), vec![out]));
            }
            Layer::Linear { name, inp, out } => {
                items.push((format!("{name}.weight"), vec![out, inp]));
                items.push((format!("{name}.bias"), vec![out]));
            }
            _ => {}
        }
    }
    Layout::from_shapes(items)
}

/// Parameter vector plus the architecture that interprets it.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ArchSpec,
    pub params: Vec<f64>,
    pub seed: u64,
    layout: Layout,
    layers: Vec<Layer>,
}

/// Builds a model with every weight and bias drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn build_model(spec: &ArchSpec, seed: u64) -> Result<Model> {
    let layers = spec.layers()?;
    let layout = layout_of(&layers);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(layout.dim());
    for slot in layout.slots() {
        let fan_in: usize = if slot.shape.len() > 1 { slot.shape[1..].iter().product() } else { 0 };
        // biases share the fan-in of the weight that precedes them
        let fan_in = if fan_in == 0 { bias_fan_in(&layout, slot.offset) } else { fan_in };
        let bound = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..slot.len() {
            params.push(rng.random_range(-bound..bound));
        }
    }
    Ok(Model::assemble(spec.clone(), params, seed, layout, &layers))
}

fn bias_fan_in(layout: &Layout, offset: usize) -> usize {
    let idx = layout.slots().iter().position(|s| s.offset == offset).unwrap_or(0);
    let prev = &layout.slots()[idx.saturating_sub(1)];
    prev.shape[1..].iter().product::<usize>().max(1)
}

impl Model {
    fn assemble(spec: ArchSpec, params: Vec<f64>, seed: u64, layout: Layout, layers: &[Layer]) -> Self {
        Model { spec, params, seed, layout, layers: layers.to_vec() }
    }

    /// Model of the given architecture holding caller-supplied parameters.
    pub fn from_params(spec: &ArchSpec, params: Vec<f64>, seed: u64) -> Result<Self> {
        let layers = spec.layers()?;
        let layout = layout_of(&layers);
        if params.len() != layout.dim() {
            return Err(Error::LayoutMismatch(format!(
                "{} parameters for {} (dimension {})",
                params.len(),
                spec.describe(),
                layout.dim()
            )));
        }
        Ok(Model::assemble(spec.clone(), params, seed, layout, &layers))
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        if params.len() != self.layout.dim() {
            return Err(Error::LayoutMismatch(format!("{} parameters, expected {}", params.len(), self.layout.dim())));
        }
        Ok(Model { params, ..self.clone() })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Parameters as a [`FlatGradient`]-shaped vector.
    pub fn flat(&self) -> FlatGradient {
        FlatGradient {
            values: self.params.clone(),
            layout: self.layout.clone(),
        }
    }

    pub fn check_input(&self, inputs: &Tensor) -> Result<()> {
        let s = inputs.shape();
        if s.len() != 4 || s[1..] != self.spec.input_shape {
            let [c, h, w] = self.spec.input_shape;
            return Err(Error::shape("forward", format!("[batch, {c}, {h}, {w}]"), format!("{:?}", s)));
        }
        Ok(())
    }

    /// Records each parameter slot as a leaf, in layout order.
    pub fn param_leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.layout
            .slots()
            .iter()
            .map(|s| tape.leaf(Tensor::from_parts(s.shape.clone(), self.params[s.range()].to_vec())))
            .collect()
    }

    /// Records the forward pass of `x: [B, C, H, W]` and returns `[B, classes]` logits.
    pub fn forward_on(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let act = self.spec.activation();
        let mut h = x;
        let mut p = params.iter();
        let mut next = || p.next().copied().ok_or_else(|| Error::LayoutMismatch("too few parameter leaves".into()));
        for layer in &self.layers {
            h = match *layer {
                Layer::Conv { win, .. } => {
                    let (w, b) = (next()?, next()?);
                    let y = tape.conv2d(h, w, win)?;
                    tape.bias_add(y, b)?
                }
                Layer::Linear { .. } => {
                    let (w, b) = (next()?, next()?);
                    let y = tape.matmul_t(h, w, false, true)?;
                    tape.bias_add(y, b)?
                }
                Layer::Act => match act {
                    Activation::Sigmoid => tape.sigmoid(h),
                    Activation::Relu => tape.relu(h),
                },
                Layer::MaxPool => tape.max_pool(h, 2, 2)?,
                Layer::Flatten => tape.flatten(h)?,
            };
        }
        Ok(h)
    }

    /// `(batch, num_classes)` logits for `inputs`.
    pub fn forward(&self, inputs: &Tensor) -> Result<Tensor> {
        self.check_input(inputs)?;
        let mut tape = Tape::new();
        let params = self.param_leaves(&mut tape);
        let x = tape.leaf(inputs.clone());
        let y = self.forward_on(&mut tape, &params, x)?;
        Ok(tape.value(y).clone())
    }

    /// Writes the flat parameter file and a `<path>.layout` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_flat(path, &self.params)?;
        let sidecar = sidecar_path(path);
        let text = format!("# arch {}\n# seed {}\n{}", serde_json::to_string(&self.spec)?, self.seed, self.layout.to_manifest());
        fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar = sidecar_path(path);
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let mut spec = None;
        let mut seed = 0;
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# arch ") {
                spec = Some(serde_json::from_str::<ArchSpec>(rest)?);
            } else if let Some(rest) = line.strip_prefix("# seed ") {
                seed = rest.trim().parse().map_err(|_| Error::LayoutMismatch(format!("bad seed line {line:?}")))?;
            }
        }
        let spec = spec.ok_or_else(|| Error::LayoutMismatch(format!("{}: missing '# arch' line", sidecar.display())))?;
        let layout = Layout::from_manifest(&text)?;
        let params = read_flat(path)?;
        let model = Model::from_params(&spec, params, seed)?;
        if model.layout != layout {
            return Err(Error::LayoutMismatch(format!("{}: layout does not match architecture", sidecar.display())));
        }
        Ok(model)
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".layout");
    s.into()
}

/// Flat binary vector: `u64` little-endian count, then that many `f64` little-endian values.
pub fn write_flat(path: &Path, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 8 * values.len());
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_flat(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |offset: u64, reason: String| Error::Format { path: path.to_path_buf(), offset, reason };
    if bytes.len() < 8 {
        return Err(fmt(0, "missing 8-byte count header".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != n * 8 {
        return Err(fmt(8 + body.len().min(n * 8) as u64, format!("header declares {n} values, body holds {} bytes", body.len())));
    }
    Ok(body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(spec: &ArchSpec) -> usize {
        spec.layout().unwrap().dim()
    }

    #[test]
    fn parameter_counts_follow_the_documented_formula() {
        let mlp = ArchSpec::new(Arch::Mlp, [1, 28, 28], 10);
        assert_eq!(count(&mlp), 784 * 32 + 32 + 32 * 10 + 10);
        assert_eq!(count(&mlp), 25_450);

        let conv = |co: usize, ci: usize, k: usize| co * ci * k * k + co;
        let lenet = ArchSpec::new(Arch::LenetSmall, [1, 28, 28], 10);
        assert_eq!(count(&lenet), conv(12, 1, 5) + 2 * conv(12, 12, 5) + 12 * 7 * 7 * 10 + 10);
        let lenet_rgb = ArchSpec::new(Arch::LenetSmall, [3, 32, 32], 10);
        assert_eq!(count(&lenet_rgb), conv(12, 3, 5) + 2 * conv(12, 12, 5) + 12 * 8 * 8 * 10 + 10);

        let mini = ArchSpec::new(Arch::Convmini, [3, 32, 32], 10).with_width(0.125);
        assert_eq!(count(&mini), conv(8, 3, 3) + 6 * conv(8, 8, 3) + 8 * 8 * 8 * 10 + 10);
    }

    #[test]
    fn lenet_has_three_convs_and_one_linear() {
        let spec = ArchSpec::new(Arch::LenetSmall, [1, 28, 28], 10);
        let names: Vec<String> = spec.layout().unwrap().slots().iter().map(|s| s.name.clone()).collect();
        assert_eq!(names, ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "conv3.weight", "conv3.bias", "fc.weight", "fc.bias"]);
        let mini = ArchSpec::new(Arch::Convmini, [3, 32, 32], 10).with_width(0.25);
        let layout = mini.layout().unwrap();
        assert_eq!(layout.slots().iter().filter(|s| s.name.starts_with("conv") && s.name.ends_with("weight")).count(), 7);
    }

    #[test]
    fn unsupported_shapes_are_rejected() {
        assert!(build_model(&ArchSpec::new(Arch::LenetSmall, [1, 4, 4], 10), 0).is_err());
        assert!(build_model(&ArchSpec::new(Arch::Convmini, [3, 30, 30], 10), 0).is_err());
        assert!(build_model(&ArchSpec::new(Arch::Mlp, [1, 28, 28], 0), 0).is_err());
    }

    #[test]
    fn output_shape_and_determinism() {
        let spec = ArchSpec::new(Arch::LenetSmall, [1, 28, 28], 10);
        let a = build_model(&spec, 7).unwrap();
        let b = build_model(&spec, 7).unwrap();
        let c = build_model(&spec, 8).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        let x = Tensor::full(&[3, 1, 28, 28], 0.5);
        assert_eq!(a.forward(&x).unwrap().shape(), &[3, 10]);
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let spec = ArchSpec::new(Arch::LenetSmall, [1, 28, 28], 10);
        let m = build_model(&spec, 1).unwrap();
        let m = m.with_params(vec![0.0; m.dim()]).unwrap();
        let y = m.forward(&Tensor::zeros(&[2, 1, 28, 28])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let m = build_model(&ArchSpec::new(Arch::Mlp, [1, 8, 8], 3), 0).unwrap();
        assert!(matches!(m.forward(&Tensor::zeros(&[2, 1, 8, 9])), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn init_respects_fan_in_bounds() {
        let spec = ArchSpec::new(Arch::LenetSmall, [1, 28, 28], 10);
        let m = build_model(&spec, 3).unwrap();
        for slot in m.layout().slots() {
            let fan_in = if slot.shape.len() > 1 { slot.shape[1..].iter().product::<usize>() } else { bias_fan_in(m.layout(), slot.offset) };
            let bound = 1.0 / (fan_in as f64).sqrt();
            assert!(m.params[slot.range()].iter().all(|v| v.abs() <= bound), "{}", slot.name);
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let m = build_model(&ArchSpec::new(Arch::Convmini, [1, 8, 8], 4).with_width(0.1), 5).unwrap();
        m.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], &(m.dim() as u64).to_le_bytes());
        assert_eq!(bytes.len(), 8 + 8 * m.dim());
        assert_eq!(Model::load(&path).unwrap(), m);
    }

    #[test]
    fn truncated_flat_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.bin");
        let mut bytes = 3u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(&1.0f64.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        match read_flat(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("{other:?}"),
        }
    }
}
