//! The decomposition network: a clean-image generator followed by a noise
//! generator with separate signal-dependent and signal-independent branches.
//!
//! ```text
//! input ──clean_gen──▶ clean
//!   └──(input − clean)──noise_trunk──┬──dep_branch───center──▶ dep
//!                                    └──indep_branch─center──▶ indep
//! ```
//!
//! Every 3x3 convolution is followed by ReLU; each stage ends with a 1x1
//! projection to RGB. There are no skip connections and no normalization.
//!
//! # Checkpoint format
//!
//! Little-endian throughout: magic `CVFM`, `u32` version (1), then for every
//! layer in the order clean generator, noise trunk, dependent branch,
//! independent branch: `out_c, in_c, kh, kw` as `u32`, the weights as `f32`
//! in `(out_c, in_c, kh, kw)` order, then `out_c` biases as `f32`. Stage
//! boundaries are recovered from the three RGB projection layers, so both
//! branches must have the same depth.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::atomic_write;
use crate::error::{arg_err, dim_err, Error, Result};
use crate::kernels::{self, ConvLayer};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Real, Shape, Tensor};

pub const IMAGE_CHANNELS: usize = 3;
/// Reflection border added around images at inference.
pub const INFERENCE_PAD: usize = 20;

const CHECKPOINT_MAGIC: &[u8; 4] = b"CVFM";
const CHECKPOINT_VERSION: u32 = 1;

/// Layer counts and width of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub width: usize,
    /// 3x3 layers in the clean generator.
    pub clean_depth: usize,
    /// 3x3 layers in the shared noise trunk.
    pub trunk_depth: usize,
    /// 3x3 layers in each noise branch.
    pub branch_depth: usize,
    /// Spatial kernel of the hidden layers; 3 normally, 1 gives a per-pixel model.
    pub kernel: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// 16 + 10 + 3 layers of width 64.
    Paper,
    /// Reduced model for desk-scale runs and gradient checks.
    Small,
}

impl Preset {
    pub fn architecture(self) -> Architecture {
        match self {
            Preset::Paper => Architecture {
                width: 64,
                clean_depth: 16,
                trunk_depth: 10,
                branch_depth: 3,
                kernel: 3,
            },
            Preset::Small => Architecture {
                width: 16,
                clean_depth: 4,
                trunk_depth: 3,
                branch_depth: 1,
                kernel: 3,
            },
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "small" => Ok(Preset::Small),
            other => arg_err(format!("unknown preset `{other}` (expected paper or small)")),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Small => "small",
        })
    }
}

/// Network outputs as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition<T> {
    pub clean: Tensor<T>,
    pub dep: Tensor<T>,
    pub indep: Tensor<T>,
}

/// Network outputs recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecompositionVars {
    pub clean: Var,
    pub dep: Var,
    pub indep: Var,
}

/// Anything that splits an image into clean, dependent and independent parts
/// on a tape. The losses are written against this so that they can be
/// evaluated with reference decomposers as well as the network.
pub trait Decomposer<T: Real> {
    fn decompose(&self, tape: &mut Tape<T>, input: Var) -> Result<DecompositionVars>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvfModel<T> {
    pub clean_gen: Vec<ConvLayer<T>>,
    pub noise_trunk: Vec<ConvLayer<T>>,
    pub dep_branch: Vec<ConvLayer<T>>,
    pub indep_branch: Vec<ConvLayer<T>>,
}

fn xavier_layer<T: Real>(out_c: usize, in_c: usize, k: usize, rng: &mut ChaCha8Rng) -> ConvLayer<T> {
    let fan_in = (in_c * k * k) as f64;
    let fan_out = (out_c * k * k) as f64;
    let bound = (6.0 / (fan_in + fan_out)).sqrt();
    let weight = Tensor::from_fn(Shape::new(out_c, in_c, k, k), |_, _, _, _| {
        T::from_f64_lossy(rng.random_range(-bound..=bound))
    });
    ConvLayer::new(weight, Tensor::zeros(Shape::new(1, out_c, 1, 1)), k / 2).expect("xavier layer shape")
}

fn stack<T: Real>(in_c: usize, width: usize, depth: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<ConvLayer<T>> {
    (0..depth)
        .map(|i| xavier_layer(width, if i == 0 { in_c } else { width }, k, rng))
        .collect()
}

/// Xavier-uniform weights and zero biases, deterministic in `seed`.
pub fn init_model<T: Real>(seed: u64, arch: Architecture) -> CvfModel<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let Architecture {
        width,
        clean_depth,
        trunk_depth,
        branch_depth,
        kernel,
    } = arch;
    let mut clean_gen = stack(IMAGE_CHANNELS, width, clean_depth, kernel, &mut rng);
    clean_gen.push(xavier_layer(IMAGE_CHANNELS, width, 1, &mut rng));
    let noise_trunk = stack(IMAGE_CHANNELS, width, trunk_depth, kernel, &mut rng);
    let branch = |rng: &mut ChaCha8Rng| {
        let mut b = stack(width, width, branch_depth, kernel, rng);
        b.push(xavier_layer(IMAGE_CHANNELS, width, 1, rng));
        b
    };
    let dep_branch = branch(&mut rng);
    let indep_branch = branch(&mut rng);
    CvfModel {
        clean_gen,
        noise_trunk,
        dep_branch,
        indep_branch,
    }
}

fn run_stage<T: Real>(layers: &[ConvLayer<T>], mut x: Tensor<T>, relu_last: bool) -> Result<Tensor<T>> {
    let n = layers.len();
    for (i, layer) in layers.iter().enumerate() {
        x = kernels::conv2d_forward(&x, &layer.weight, &layer.bias, layer.padding)?;
        if i + 1 < n || relu_last {
            x = kernels::relu(&x);
        }
    }
    Ok(x)
}

fn check_input(shape: Shape) -> Result<()> {
    if shape.c != IMAGE_CHANNELS {
        return dim_err(format!(
            "network input must have {IMAGE_CHANNELS} channels, got {}",
            shape.c
        ));
    }
    if shape.h == 0 || shape.w == 0 || shape.n == 0 {
        return dim_err(format!("network input {shape} is empty"));
    }
    Ok(())
}

impl<T: Real> CvfModel<T> {
    pub fn from_preset(seed: u64, preset: Preset) -> Self {
        init_model(seed, preset.architecture())
    }

    /// All layers in checkpoint order.
    pub fn layers(&self) -> impl Iterator<Item = &ConvLayer<T>> {
        self.clean_gen
            .iter()
            .chain(&self.noise_trunk)
            .chain(&self.dep_branch)
            .chain(&self.indep_branch)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvLayer<T>> {
        self.clean_gen
            .iter_mut()
            .chain(self.noise_trunk.iter_mut())
            .chain(self.dep_branch.iter_mut())
            .chain(self.indep_branch.iter_mut())
    }

    /// Weight and bias tensors, alternating, in checkpoint order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(ConvLayer::param_count).sum()
    }

    pub fn clean_gen_param_count(&self) -> usize {
        self.clean_gen.iter().map(ConvLayer::param_count).sum()
    }

    pub fn cast<U: Real>(&self) -> CvfModel<U> {
        let conv = |layers: &[ConvLayer<T>]| -> Vec<ConvLayer<U>> {
            layers
                .iter()
                .map(|l| ConvLayer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                    padding: l.padding,
                })
                .collect()
        };
        CvfModel {
            clean_gen: conv(&self.clean_gen),
            noise_trunk: conv(&self.noise_trunk),
            dep_branch: conv(&self.dep_branch),
            indep_branch: conv(&self.indep_branch),
        }
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn bind<'m>(&'m self, tape: &mut Tape<T>) -> BoundModel<'m, T> {
        let vars = self
            .layers()
            .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
            .collect();
        BoundModel { model: self, vars }
    }

    /// Inference without recording a tape.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Decomposition<T>> {
        check_input(input.shape())?;
        let clean = run_stage(&self.clean_gen, input.clone(), false)?;
        let residual = input.sub(&clean)?;
        let features = run_stage(&self.noise_trunk, residual, true)?;
        let dep = kernels::center(&run_stage(&self.dep_branch, features.clone(), false)?);
        let indep = kernels::center(&run_stage(&self.indep_branch, features, false)?);
        Ok(Decomposition { clean, dep, indep })
    }

    /// Reflection-pads by [`INFERENCE_PAD`], runs [`forward`](Self::forward),
    /// and crops all three outputs back to the input size. The noise maps are
    /// re-centered over the cropped region.
    pub fn forward_padded(&self, input: &Tensor<T>) -> Result<Decomposition<T>> {
        let s = input.shape();
        if s.h.min(s.w) <= INFERENCE_PAD {
            return arg_err(format!(
                "padded inference needs images larger than {p}x{p}, got {}x{}",
                s.h,
                s.w,
                p = INFERENCE_PAD
            ));
        }
        check_input(s)?;
        let padded = kernels::reflect_pad(input, INFERENCE_PAD)?;
        let out = self.forward(&padded)?;
        Ok(Decomposition {
            clean: kernels::center_crop(&out.clean, INFERENCE_PAD)?,
            dep: kernels::center(&kernels::center_crop(&out.dep, INFERENCE_PAD)?),
            indep: kernels::center(&kernels::center_crop(&out.indep, INFERENCE_PAD)?),
        })
    }
}

/// A model whose parameters are leaves on a particular tape.
pub struct BoundModel<'m, T> {
    model: &'m CvfModel<T>,
    vars: Vec<(Var, Var)>,
}

impl<T: Real> BoundModel<'_, T> {
    fn run_stage(
        &self,
        tape: &mut Tape<T>,
        offset: usize,
        layers: &[ConvLayer<T>],
        mut x: Var,
        relu_last: bool,
    ) -> Result<Var> {
        let n = layers.len();
        for (i, layer) in layers.iter().enumerate() {
            let (w, b) = self.vars[offset + i];
            x = tape.conv2d(x, w, b, layer.padding)?;
            if i + 1 < n || relu_last {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    /// Parameter gradients in [`CvfModel::params`] order.
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.model
            .layers()
            .zip(&self.vars)
            .flat_map(|(l, &(w, b))| {
                [
                    grads.get_or_zeros(w, l.weight.shape()),
                    grads.get_or_zeros(b, l.bias.shape()),
                ]
            })
            .collect()
    }

    pub fn param_vars(&self) -> Vec<Var> {
        self.vars.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

impl<T: Real> Decomposer<T> for BoundModel<'_, T> {
    fn decompose(&self, tape: &mut Tape<T>, input: Var) -> Result<DecompositionVars> {
        check_input(tape.shape(input))?;
        let m = self.model;
        let mut offset = 0;
        let clean = self.run_stage(tape, offset, &m.clean_gen, input, false)?;
        offset += m.clean_gen.len();
        let residual = tape.sub(input, clean)?;
        let features = self.run_stage(tape, offset, &m.noise_trunk, residual, true)?;
        offset += m.noise_trunk.len();
        let dep = self.run_stage(tape, offset, &m.dep_branch, features, false)?;
        offset += m.dep_branch.len();
        let indep = self.run_stage(tape, offset, &m.indep_branch, features, false)?;
        Ok(DecompositionVars {
            clean,
            dep: tape.center(dep),
            indep: tape.center(indep),
        })
    }
}

/// Serializes the model in the checkpoint format (weights stored as `f32`).
pub fn checkpoint_bytes<T: Real>(model: &CvfModel<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + model.param_count() * 4 + model.layers().count() * 16);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for layer in model.layers() {
        let s = layer.weight.shape();
        for d in [s.n, s.c, s.h, s.w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in layer.weight.data().iter().chain(layer.bias.data()) {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn model_from_checkpoint_bytes(bytes: &[u8]) -> Result<CvfModel<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("checkpoint magic is not CVFM".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut layers = Vec::new();
    while r.pos < bytes.len() {
        let (out_c, in_c, kh, kw) = (
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
        );
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::Format(format!("unsupported kernel {kh}x{kw}")));
        }
        let ws = Shape::new(out_c, in_c, kh, kw);
        let weight = Tensor::from_vec(ws, r.f32s(ws.len())?)?;
        let bias = Tensor::from_vec(Shape::new(1, out_c, 1, 1), r.f32s(out_c)?)?;
        layers.push(ConvLayer::new(weight, bias, kh / 2)?);
    }
    let heads: Vec<usize> = layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kernel() == 1 && l.out_channels() == IMAGE_CHANNELS)
        .map(|(i, _)| i)
        .collect();
    let [h_clean, h_dep, h_indep] = heads[..] else {
        return Err(Error::Format(format!(
            "checkpoint has {} RGB output layers, expected 3",
            heads.len()
        )));
    };
    let branch_len = h_indep - h_dep;
    let clean_end = h_clean + 1;
    if h_indep + 1 != layers.len() || h_dep + 1 < clean_end + branch_len {
        return Err(Error::Format("cannot recover stage boundaries from checkpoint".into()));
    }
    let trunk_end = h_dep + 1 - branch_len;
    let mut it = layers.into_iter();
    let clean_gen: Vec<_> = it.by_ref().take(clean_end).collect();
    let noise_trunk: Vec<_> = it.by_ref().take(trunk_end - clean_end).collect();
    let dep_branch: Vec<_> = it.by_ref().take(branch_len).collect();
    let indep_branch: Vec<_> = it.collect();
    Ok(CvfModel {
        clean_gen,
        noise_trunk,
        dep_branch,
        indep_branch,
    })
}

/// Writes a checkpoint atomically.
pub fn save_checkpoint<T: Real>(model: &CvfModel<T>, path: &Path) -> Result<()> {
    atomic_write(path, &checkpoint_bytes(model))
}

pub fn load_checkpoint(path: &Path) -> Result<CvfModel<f32>> {
    let bytes = std::fs::read(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    model_from_checkpoint_bytes(&bytes)
}
