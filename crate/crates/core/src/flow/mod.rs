//! Normalizing flows: a stack of invertible layers followed by an output map.
//!
//! For a base point `z₀ ~ N(0, I)` the stack produces `y = g(f_k ∘ … ∘ f_1(z₀))`
//! and the total log-Jacobian `Σ log|det J_i| + log|det J_g|`, so
//! `log p_φ(y) = log p₀(z₀) - total_log_det`.

mod layer;
mod output;
mod params;

pub use layer::{
    layer_forward, layer_log_det, planar_constrain, Layer, LayerGrad, PlanarGrad, PlanarLayer,
    RadialGrad, RadialLayer, INVERTIBILITY_EPS,
};
pub use output::{output_map_apply, OutputMap};
pub use params::{load_params, save_params, ParamFile};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-density of the standard normal in `z.len()` dimensions.
pub fn std_normal_log_pdf(z: &[f64]) -> f64 {
    -0.5 * (z.len() as f64 * LN_2PI + z.iter().map(|v| v * v).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowStack {
    pub dim: usize,
    pub layers: Vec<Layer>,
    pub output: OutputMap,
}

/// Intermediate states of one forward pass, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `layer_inputs[i]` is the input to layer `i`; the last entry is the
    /// input to the output map.
    pub layer_inputs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
    pub log_det: f64,
}

impl FlowStack {
    pub fn new(dim: usize, layers: Vec<Layer>, output: OutputMap) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("flow dimension must be >= 1".into()));
        }
        for l in &layers {
            check_dim(dim, l.dim())?;
        }
        Ok(Self {
            dim,
            layers,
            output,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            layers: Vec::new(),
            output: OutputMap::Identity,
        }
    }

    /// `k` planar layers with raw `u, w ~ N(0, scale²)` i.i.d. and `b = 0`.
    pub fn random_planar<R: Rng + ?Sized>(
        dim: usize,
        k: usize,
        scale: f64,
        output: OutputMap,
        rng: &mut R,
    ) -> Result<Self> {
        Self::planar_stack(dim, k, scale, output, rng, PlanarLayer::new)
    }

    /// `k` planar layers whose *constrained* directions `û` and projections
    /// `w` are drawn `N(0, scale²)` i.i.d., with `b = 0`. For small `scale`
    /// every layer starts close to the identity.
    pub fn near_identity<R: Rng + ?Sized>(
        dim: usize,
        k: usize,
        scale: f64,
        output: OutputMap,
        rng: &mut R,
    ) -> Result<Self> {
        Self::planar_stack(dim, k, scale, output, rng, PlanarLayer::from_effective)
    }

    fn planar_stack<R: Rng + ?Sized>(
        dim: usize,
        k: usize,
        scale: f64,
        output: OutputMap,
        rng: &mut R,
        build: fn(Vec<f64>, Vec<f64>, f64) -> Result<PlanarLayer>,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, scale)
            .map_err(|e| Error::InvalidArgument(format!("init scale: {e}")))?;
        let mut layers = Vec::with_capacity(k);
        for _ in 0..k {
            let u: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
            let w: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
            layers.push(Layer::Planar(build(u, w, 0.0)?));
        }
        Self::new(dim, layers, output)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum::<usize>() + self.output.param_count()
    }

    /// Parameters in canonical order: layers first, then the output map.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            l.push_flat(&mut out);
        }
        self.output.push_flat(&mut out);
        out
    }

    pub fn set_params_flat(&mut self, src: &[f64]) -> Result<()> {
        check_dim(self.param_count(), src.len())?;
        let mut off = 0;
        for l in &mut self.layers {
            off += l.read_flat(&src[off..]);
        }
        self.output.read_flat(&src[off..]);
        Ok(())
    }

    pub fn trace(&self, z0: &[f64]) -> Result<ForwardTrace> {
        check_dim(self.dim, z0.len())?;
        let mut layer_inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut z = z0.to_vec();
        let mut log_det = 0.0;
        for l in &self.layers {
            let (next, ld) = l.forward(&z)?;
            log_det += ld;
            layer_inputs.push(std::mem::replace(&mut z, next));
        }
        let (output, ld) = self.output.apply(&z)?;
        layer_inputs.push(z);
        Ok(ForwardTrace {
            layer_inputs,
            output,
            log_det: log_det + ld,
        })
    }

    /// `(f_φ(z₀), total log|det J|)`.
    pub fn forward(&self, z0: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_dim(self.dim, z0.len())?;
        let mut z = z0.to_vec();
        let mut log_det = 0.0;
        for l in &self.layers {
            let (next, ld) = l.forward(&z)?;
            z = next;
            log_det += ld;
        }
        let (out, ld) = self.output.apply(&z)?;
        Ok((out, log_det + ld))
    }

    /// `log p_φ(f_φ(z₀)) = log p₀(z₀) - total_log_det(z₀)`.
    pub fn log_density(&self, z0: &[f64]) -> Result<f64> {
        let (_, ld) = self.forward(z0)?;
        Ok(std_normal_log_pdf(z0) - ld)
    }

    /// Accumulates `∇_φ [ȳᵀ f_φ(z₀) + l̄ · total_log_det(z₀)]` into `grad`.
    pub fn pullback_into(
        &self,
        trace: &ForwardTrace,
        ybar: &[f64],
        lbar: f64,
        grad: &mut ParamGradient,
    ) -> Result<()> {
        check_dim(self.dim, ybar.len())?;
        grad.check_congruent(self)?;
        let k = self.layers.len();
        let mut zbar = vec![0.0; self.dim];
        self.output.pullback(
            &trace.layer_inputs[k],
            ybar,
            lbar,
            &mut zbar,
            &mut grad.output,
        )?;
        let mut next = vec![0.0; self.dim];
        for i in (0..k).rev() {
            self.layers[i].pullback(
                &trace.layer_inputs[i],
                &zbar,
                lbar,
                &mut next,
                &mut grad.layers[i],
            )?;
            std::mem::swap(&mut zbar, &mut next);
        }
        Ok(())
    }
}

/// `(f_φ(z₀), total log|det J|)`.
pub fn stack_forward(stack: &FlowStack, z0: &[f64]) -> Result<(Vec<f64>, f64)> {
    stack.forward(z0)
}

pub fn log_density(stack: &FlowStack, z0: &[f64]) -> Result<f64> {
    stack.log_density(z0)
}

/// `∇_φ [cotangent_outᵀ f_φ(z₀) + cotangent_logdet · total_log_det(z₀)]`.
pub fn stack_pullback(
    stack: &FlowStack,
    z0: &[f64],
    cotangent_out: &[f64],
    cotangent_logdet: f64,
) -> Result<ParamGradient> {
    let trace = stack.trace(z0)?;
    let mut grad = ParamGradient::zeros_like(stack);
    stack.pullback_into(&trace, cotangent_out, cotangent_logdet, &mut grad)?;
    Ok(grad)
}

/// Solves `f_φ(z) = y` for a scalar flow by bracketing and bisection.
///
/// Every one-dimensional layer and output map is strictly monotone, so the
/// root is unique whenever `y` lies in the range of the flow.
pub fn invert_scalar(stack: &FlowStack, y: f64) -> Result<f64> {
    check_dim(1, stack.dim)?;
    let f = |z: f64| -> Result<f64> { Ok(stack.forward(&[z])?.0[0]) };
    let increasing = f(1.0)? > f(-1.0)?;
    let below = |z: f64| -> Result<bool> { Ok((f(z)? < y) == increasing) };
    let (mut lo, mut hi) = (-1.0, 1.0);
    while !below(lo)? {
        lo *= 2.0;
        if lo < -1e6 {
            return Err(Error::OutsideDomain(format!("{y} below the flow's range")));
        }
    }
    while below(hi)? {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::OutsideDomain(format!("{y} above the flow's range")));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if below(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Density of a scalar flow at an output point, via [`invert_scalar`].
pub fn scalar_log_density_at(stack: &FlowStack, y: f64) -> Result<f64> {
    let z = invert_scalar(stack, y)?;
    stack.log_density(&[z])
}

/// Gradient carrier mirroring a [`FlowStack`]'s parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGradient {
    pub layers: Vec<LayerGrad>,
    /// `[∂a, ∂b]` for a positive-affine output map, empty otherwise.
    pub output: Vec<f64>,
}

impl ParamGradient {
    pub fn zeros_like(stack: &FlowStack) -> Self {
        Self {
            layers: stack.layers.iter().map(LayerGrad::zeros_like).collect(),
            output: vec![0.0; stack.output.param_count()],
        }
    }

    fn check_congruent(&self, stack: &FlowStack) -> Result<()> {
        check_dim(stack.layers.len(), self.layers.len())?;
        check_dim(stack.output.param_count(), self.output.len())
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.for_each_mut(|v| *v *= factor);
        }
        self.output.iter_mut().for_each(|v| *v *= factor);
    }

    /// Flat view in the same order as [`FlowStack::params_flat`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.push_flat(&mut out);
        }
        out.extend_from_slice(&self.output);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl std::ops::AddAssign<&ParamGradient> for ParamGradient {
    fn add_assign(&mut self, rhs: &ParamGradient) {
        let flat = rhs.flatten();
        let mut it = flat.iter();
        for l in &mut self.layers {
            l.for_each_mut(|v| *v += it.next().expect("congruent gradients"));
        }
        for v in &mut self.output {
            *v += it.next().expect("congruent gradients");
        }
    }
}
