//! Planar and radial flow layers.
//!
//! Both layer types store *raw* trainable parameters. The constrained values
//! that enter the forward map (`û` for planar, `α̂`, `β̂` for radial) are
//! recomputed from the raw ones on every evaluation, so gradient steps can
//! never leave the invertible region and gradients flow through the
//! reparameterization.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::vecops::{axpy, dot, norm_sq, sigmoid, softplus, softplus_inv};

/// Lower margin kept between `wᵀû` and `-1`.
pub const INVERTIBILITY_EPS: f64 = 1e-7;

/// Smallest effective radial `α̂`.
const MIN_ALPHA: f64 = 1e-12;

/// Constrained direction `û` of a planar layer together with the pieces
/// needed to differentiate through the projection.
struct Projection {
    u_hat: Vec<f64>,
    /// `m(s) - s` with `s = wᵀu`.
    shift: f64,
    /// `m'(s) - 1`.
    dshift: f64,
    w_norm_sq: f64,
}

/// `m(x) = -1 + softplus(x)`, floored at `-1 + ε`; returns `(m, m')`.
fn floor_map(x: f64) -> (f64, f64) {
    let sp = softplus(x);
    if sp > INVERTIBILITY_EPS {
        (sp - 1.0, sigmoid(x))
    } else {
        (INVERTIBILITY_EPS - 1.0, 0.0)
    }
}

fn project(u: &[f64], w: &[f64]) -> Result<Projection> {
    let w_norm_sq = norm_sq(w);
    if !(w_norm_sq > 0.0) {
        return Err(Error::DegenerateProjection);
    }
    let s = dot(w, u);
    let (m, dm) = floor_map(s);
    let shift = m - s;
    let mut u_hat = u.to_vec();
    axpy(shift / w_norm_sq, w, &mut u_hat);
    Ok(Projection {
        u_hat,
        shift,
        dshift: dm - 1.0,
        w_norm_sq,
    })
}

/// Maps a raw direction `u` onto one satisfying `wᵀû ≥ -1 + ε`:
/// `û = u + (m(wᵀu) - wᵀu)·w/‖w‖²` with `m(x) = -1 + softplus(x)`.
pub fn planar_constrain(u: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    check_dim(w.len(), u.len())?;
    Ok(project(u, w)?.u_hat)
}

/// `z ↦ z + û·tanh(wᵀz + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanarLayer {
    /// Raw direction; the forward map uses `planar_constrain(u, w)`.
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub b: f64,
}

impl PlanarLayer {
    pub fn new(u: Vec<f64>, w: Vec<f64>, b: f64) -> Result<Self> {
        if u.is_empty() {
            return Err(Error::InvalidArgument(
                "layer dimension must be >= 1".into(),
            ));
        }
        check_dim(u.len(), w.len())?;
        Ok(Self { u, w, b })
    }

    /// Builds a layer whose constrained direction equals `u_hat` exactly.
    /// Requires `wᵀû > -1 + ε`.
    pub fn from_effective(u_hat: Vec<f64>, w: Vec<f64>, b: f64) -> Result<Self> {
        check_dim(u_hat.len(), w.len())?;
        let w_norm_sq = norm_sq(&w);
        if !(w_norm_sq > 0.0) {
            return Err(Error::DegenerateProjection);
        }
        let target = dot(&w, &u_hat);
        if target <= INVERTIBILITY_EPS - 1.0 {
            return Err(Error::InvalidArgument(format!(
                "wᵀû = {target} is not invertible"
            )));
        }
        // Invert m: s = softplus⁻¹(target + 1).
        let s = softplus_inv(target + 1.0);
        let mut u = u_hat;
        axpy((s - target) / w_norm_sq, &w, &mut u);
        Self::new(u, w, b)
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }

    pub fn effective_u(&self) -> Result<Vec<f64>> {
        planar_constrain(&self.u, &self.w)
    }

    fn forward_with(&self, u_hat: &[f64], z: &[f64]) -> (Vec<f64>, f64) {
        let a = dot(&self.w, z) + self.b;
        let t = a.tanh();
        let mut out = z.to_vec();
        axpy(t, u_hat, &mut out);
        let psi = dot(&self.w, u_hat);
        let log_det = (1.0 + (1.0 - t * t) * psi).abs().ln();
        (out, log_det)
    }

    fn pullback(
        &self,
        z: &[f64],
        ybar: &[f64],
        lbar: f64,
        zbar: &mut [f64],
        grad: &mut PlanarGrad,
    ) -> Result<()> {
        let p = project(&self.u, &self.w)?;
        let u_hat = &p.u_hat;
        let a = dot(&self.w, z) + self.b;
        let t = a.tanh();
        let hp = 1.0 - t * t;
        let hpp = -2.0 * t * hp;
        let psi = dot(&self.w, u_hat);
        let den = 1.0 + hp * psi;

        let abar = dot(ybar, u_hat) * hp + lbar * hpp * psi / den;
        let psibar = lbar * hp / den;

        // cotangent of û
        let mut uhbar = ybar.to_vec();
        for (v, y) in uhbar.iter_mut().zip(ybar) {
            *v = t * y;
        }
        axpy(psibar, &self.w, &mut uhbar);

        // input cotangent
        zbar.copy_from_slice(ybar);
        axpy(abar, &self.w, zbar);

        grad.b += abar;
        axpy(abar, z, &mut grad.w);
        axpy(psibar, u_hat, &mut grad.w);

        // through û = u + k(s)·w/‖w‖², s = wᵀu
        let r = dot(&uhbar, &self.w) / p.w_norm_sq;
        axpy(1.0, &uhbar, &mut grad.u);
        axpy(p.dshift * r, &self.w, &mut grad.u);
        axpy(p.dshift * r, &self.u, &mut grad.w);
        axpy(p.shift / p.w_norm_sq, &uhbar, &mut grad.w);
        axpy(-2.0 * p.shift * r / p.w_norm_sq, &self.w, &mut grad.w);
        Ok(())
    }
}

/// `z ↦ z + β̂·h(α̂, r)(z - z₀)`, `h(α, r) = 1/(α + r)`, `r = ‖z - z₀‖`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialLayer {
    pub center: Vec<f64>,
    /// Raw; `α̂ = softplus(alpha)`.
    pub alpha: f64,
    /// Raw; `β̂ = -α̂ + softplus(beta)`.
    pub beta: f64,
}

impl RadialLayer {
    pub fn new(center: Vec<f64>, alpha: f64, beta: f64) -> Result<Self> {
        if center.is_empty() {
            return Err(Error::InvalidArgument(
                "layer dimension must be >= 1".into(),
            ));
        }
        Ok(Self {
            center,
            alpha,
            beta,
        })
    }

    /// Builds a layer with the given constrained `α̂ > 0` and `β̂ > -α̂`.
    pub fn from_effective(center: Vec<f64>, alpha_hat: f64, beta_hat: f64) -> Result<Self> {
        if !(alpha_hat > 0.0) || !(beta_hat > -alpha_hat) {
            return Err(Error::InvalidArgument(format!(
                "radial layer needs alpha > 0 and beta > -alpha (got {alpha_hat}, {beta_hat})"
            )));
        }
        Self::new(
            center,
            softplus_inv(alpha_hat),
            softplus_inv(beta_hat + alpha_hat),
        )
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// `(α̂, β̂)`.
    pub fn effective(&self) -> (f64, f64) {
        let alpha = softplus(self.alpha).max(MIN_ALPHA);
        (alpha, -alpha + softplus(self.beta))
    }

    fn forward_impl(&self, z: &[f64]) -> (Vec<f64>, f64) {
        let (alpha, beta) = self.effective();
        let mut delta: Vec<f64> = z.iter().zip(&self.center).map(|(a, c)| a - c).collect();
        let r = norm_sq(&delta).sqrt();
        let h = 1.0 / (alpha + r);
        let d = z.len() as f64;
        let log_det =
            (d - 1.0) * (1.0 + beta * h).abs().ln() + (1.0 + beta * alpha * h * h).abs().ln();
        for (o, zi) in delta.iter_mut().zip(z) {
            *o = zi + beta * h * *o;
        }
        (delta, log_det)
    }

    fn pullback(
        &self,
        z: &[f64],
        ybar: &[f64],
        lbar: f64,
        zbar: &mut [f64],
        grad: &mut RadialGrad,
    ) {
        let (alpha, beta) = self.effective();
        let delta: Vec<f64> = z.iter().zip(&self.center).map(|(a, c)| a - c).collect();
        let r = norm_sq(&delta).sqrt();
        let h = 1.0 / (alpha + r);
        let d = z.len() as f64;
        let big_a = 1.0 + beta * h;
        let big_b = 1.0 + beta * alpha * h * h;

        let s = dot(ybar, &delta);
        let abar_ld = lbar * (d - 1.0) / big_a;
        let bbar_ld = lbar / big_b;

        let beta_bar = h * s + abar_ld * h + bbar_ld * alpha * h * h;
        let h_bar = beta * s + abar_ld * beta + bbar_ld * 2.0 * beta * alpha * h;
        let mut alpha_bar = bbar_ld * beta * h * h;
        alpha_bar += -h * h * h_bar;
        let r_bar = -h * h * h_bar;

        // δ̄ = β̂h·ȳ + r̄·δ/r
        let mut delta_bar: Vec<f64> = ybar.iter().map(|y| beta * h * y).collect();
        if r > 0.0 {
            axpy(r_bar / r, &delta, &mut delta_bar);
        }
        for ((zb, y), db) in zbar.iter_mut().zip(ybar).zip(&delta_bar) {
            *zb = y + db;
        }
        axpy(-1.0, &delta_bar, &mut grad.center);

        // β̂ = -α̂ + softplus(beta)
        alpha_bar -= beta_bar;
        grad.beta += beta_bar * sigmoid(self.beta);
        if softplus(self.alpha) > MIN_ALPHA {
            grad.alpha += alpha_bar * sigmoid(self.alpha);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Layer {
    Planar(PlanarLayer),
    Radial(RadialLayer),
}

impl Layer {
    pub fn dim(&self) -> usize {
        match self {
            Layer::Planar(l) => l.dim(),
            Layer::Radial(l) => l.dim(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Planar(l) => 2 * l.dim() + 1,
            Layer::Radial(l) => l.dim() + 2,
        }
    }

    /// Applies the layer and returns `(f(z), log|det J_f(z)|)`.
    pub fn forward(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_dim(self.dim(), z.len())?;
        match self {
            Layer::Planar(l) => {
                let u_hat = l.effective_u()?;
                Ok(l.forward_with(&u_hat, z))
            }
            Layer::Radial(l) => Ok(l.forward_impl(z)),
        }
    }

    pub(crate) fn pullback(
        &self,
        z: &[f64],
        ybar: &[f64],
        lbar: f64,
        zbar: &mut [f64],
        grad: &mut LayerGrad,
    ) -> Result<()> {
        match (self, grad) {
            (Layer::Planar(l), LayerGrad::Planar(g)) => l.pullback(z, ybar, lbar, zbar, g),
            (Layer::Radial(l), LayerGrad::Radial(g)) => {
                l.pullback(z, ybar, lbar, zbar, g);
                Ok(())
            }
            _ => Err(Error::InvalidArgument(
                "gradient is not congruent with the layer".into(),
            )),
        }
    }
}

/// `f(z)` for one layer.
pub fn layer_forward(layer: &Layer, z: &[f64]) -> Result<Vec<f64>> {
    Ok(layer.forward(z)?.0)
}

/// `log|det J_f(z)|` for one layer.
pub fn layer_log_det(layer: &Layer, z: &[f64]) -> Result<f64> {
    Ok(layer.forward(z)?.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanarGrad {
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialGrad {
    pub center: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerGrad {
    Planar(PlanarGrad),
    Radial(RadialGrad),
}

impl LayerGrad {
    pub fn zeros_like(layer: &Layer) -> Self {
        let d = layer.dim();
        match layer {
            Layer::Planar(_) => LayerGrad::Planar(PlanarGrad {
                u: vec![0.0; d],
                w: vec![0.0; d],
                b: 0.0,
            }),
            Layer::Radial(_) => LayerGrad::Radial(RadialGrad {
                center: vec![0.0; d],
                alpha: 0.0,
                beta: 0.0,
            }),
        }
    }

    pub(crate) fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        match self {
            LayerGrad::Planar(g) => {
                g.u.iter_mut().for_each(&mut f);
                g.w.iter_mut().for_each(&mut f);
                f(&mut g.b);
            }
            LayerGrad::Radial(g) => {
                g.center.iter_mut().for_each(&mut f);
                f(&mut g.alpha);
                f(&mut g.beta);
            }
        }
    }

    pub(crate) fn push_flat(&self, out: &mut Vec<f64>) {
        match self {
            LayerGrad::Planar(g) => {
                out.extend_from_slice(&g.u);
                out.extend_from_slice(&g.w);
                out.push(g.b);
            }
            LayerGrad::Radial(g) => {
                out.extend_from_slice(&g.center);
                out.push(g.alpha);
                out.push(g.beta);
            }
        }
    }
}

impl Layer {
    pub(crate) fn push_flat(&self, out: &mut Vec<f64>) {
        match self {
            Layer::Planar(l) => {
                out.extend_from_slice(&l.u);
                out.extend_from_slice(&l.w);
                out.push(l.b);
            }
            Layer::Radial(l) => {
                out.extend_from_slice(&l.center);
                out.push(l.alpha);
                out.push(l.beta);
            }
        }
    }

    /// Overwrites parameters from `src`, returning the number consumed.
    pub(crate) fn read_flat(&mut self, src: &[f64]) -> usize {
        match self {
            Layer::Planar(l) => {
                let d = l.u.len();
                l.u.copy_from_slice(&src[..d]);
                l.w.copy_from_slice(&src[d..2 * d]);
                l.b = src[2 * d];
                2 * d + 1
            }
            Layer::Radial(l) => {
                let d = l.center.len();
                l.center.copy_from_slice(&src[..d]);
                l.alpha = src[d];
                l.beta = src[d + 1];
                d + 2
            }
        }
    }
}
