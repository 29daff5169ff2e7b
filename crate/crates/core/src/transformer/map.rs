//! One direction of a reversible transformer:
//! `x -> W (x - m) + c [+ V tanh(U (x - m) + a)]`, where the input center `m`
//! is fixed and only `W`, `c`, `U`, `a`, `V` are trained.
//!
//! A factored map stores a matrix `S` and uses `W = L exp(sym S) R`, where
//! `sym S = (S + S^T) / 2` and the optional basis `(L, R)` conjugates that
//! symmetric positive definite matrix from feature coordinates into the
//! coordinates the map acts on. Unlike a Gram factor `B B^T`, the exponential
//! cannot lose rank, so a collapsed direction never gets stuck with a zero
//! gradient.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Optional residual hidden layer of width `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    /// `h x d`
    pub input: DMatrix<f64>,
    /// `h`
    pub offset: DVector<f64>,
    /// `d x h`
    pub output: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageMap {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    /// Subtracted from the input before the linear part; not a parameter.
    pub center: DVector<f64>,
    pub hidden: Option<HiddenLayer>,
    /// When set the stored `weight` is a log-weight `S` and the map uses
    /// `W = exp(sym S)` (conjugated by `basis`, if any).
    pub factored: bool,
    /// `(L, R)` with `R = L^-1`; only used by factored maps.
    pub basis: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

/// Activations kept from a batch forward pass for backpropagation.
pub(crate) struct ForwardCache {
    pub input: DMatrix<f64>,
    pub hidden: Option<DMatrix<f64>>,
}

impl StageMap {
    pub fn identity(d: usize, hidden_width: usize, factored: bool) -> Self {
        Self {
            weight: if factored { DMatrix::zeros(d, d) } else { DMatrix::identity(d, d) },
            bias: DVector::zeros(d),
            center: DVector::zeros(d),
            hidden: (hidden_width > 0).then(|| HiddenLayer {
                input: DMatrix::zeros(hidden_width, d),
                offset: DVector::zeros(hidden_width),
                output: DMatrix::zeros(d, hidden_width),
            }),
            factored,
            basis: None,
        }
    }

    /// Identity plus entries drawn uniformly from `[-scale, scale]`. The
    /// hidden input weights are always random so the layer can learn.
    pub fn perturbed_identity(
        d: usize,
        hidden_width: usize,
        factored: bool,
        scale: f64,
        perturb_affine: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut map = Self::identity(d, hidden_width, factored);
        let draw = |rng: &mut dyn rand::RngCore| {
            if scale > 0.0 {
                rng.random_range(-scale..=scale)
            } else {
                0.0
            }
        };
        if perturb_affine {
            for r in 0..d {
                for c in r..d {
                    let v = draw(rng);
                    map.weight[(r, c)] += v;
                    if c != r {
                        let w = if factored { v } else { draw(rng) };
                        map.weight[(c, r)] += w;
                    }
                }
            }
            for v in map.bias.iter_mut() {
                *v = draw(rng);
            }
        }
        if let Some(h) = map.hidden.as_mut() {
            let in_scale = 1.0 / (d as f64).sqrt();
            for v in h.input.iter_mut() {
                *v = rng.random_range(-in_scale..=in_scale);
            }
            if perturb_affine {
                for v in h.output.iter_mut() {
                    *v = draw(rng);
                }
            }
        }
        map
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.as_ref().map_or(0, |h| h.offset.len())
    }

    pub fn effective_weight(&self) -> DMatrix<f64> {
        if !self.factored {
            return self.weight.clone();
        }
        let spd = sym_exp(&self.weight).0;
        match &self.basis {
            Some((l, r)) => l * spd * r,
            None => spd,
        }
    }

    /// Linear part and offset of the map, hidden layer ignored:
    /// `x -> W x + (c - W m)`.
    pub fn affine_part(&self) -> (DMatrix<f64>, DVector<f64>) {
        let w = self.effective_weight();
        let offset = &self.bias - &w * &self.center;
        (w, offset)
    }

    /// Single-row kernel shared by the per-sample and batch paths so both
    /// produce bit-identical outputs.
    fn forward_row(
        &self,
        weight: &DMatrix<f64>,
        x: &[f64],
        centered: &mut [f64],
        out: &mut [f64],
        hidden_out: Option<&mut [f64]>,
    ) {
        let d = self.dim();
        for j in 0..d {
            centered[j] = x[j] - self.center[j];
        }
        for i in 0..d {
            let mut acc = self.bias[i];
            for (j, xj) in centered.iter().enumerate() {
                acc += weight[(i, j)] * xj;
            }
            out[i] = acc;
        }
        if let Some(h) = &self.hidden {
            let width = h.offset.len();
            let mut local = vec![0.0; width];
            let act: &mut [f64] = match hidden_out {
                Some(buf) => buf,
                None => &mut local,
            };
            for k in 0..width {
                let mut z = h.offset[k];
                for (j, xj) in centered.iter().enumerate() {
                    z += h.input[(k, j)] * xj;
                }
                act[k] = z.tanh();
            }
            for i in 0..d {
                let mut acc = 0.0;
                for (k, ak) in act.iter().enumerate() {
                    acc += h.output[(i, k)] * ak;
                }
                out[i] += acc;
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let weight = self.effective_weight();
        let mut centered = vec![0.0; self.dim()];
        let mut out = vec![0.0; self.dim()];
        self.forward_row(&weight, x, &mut centered, &mut out, None);
        out
    }

    pub(crate) fn forward_batch(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, ForwardCache) {
        let (n, d) = x.shape();
        let weight = self.effective_weight();
        let width = self.hidden_width();
        let mut y = DMatrix::zeros(n, d);
        let mut xc = DMatrix::zeros(n, d);
        let mut hid = self.hidden.as_ref().map(|_| DMatrix::zeros(n, width));
        let mut row = vec![0.0; d];
        let mut centered = vec![0.0; d];
        let mut out = vec![0.0; d];
        let mut act = vec![0.0; width];
        for r in 0..n {
            for c in 0..d {
                row[c] = x[(r, c)];
            }
            let hidden_buf = hid.as_ref().map(|_| act.as_mut_slice());
            self.forward_row(&weight, &row, &mut centered, &mut out, hidden_buf);
            for c in 0..d {
                y[(r, c)] = out[c];
                xc[(r, c)] = centered[c];
            }
            if let Some(h) = hid.as_mut() {
                for k in 0..width {
                    h[(r, k)] = act[k];
                }
            }
        }
        (
            y,
            ForwardCache {
                input: xc,
                hidden: hid,
            },
        )
    }

    /// Returns `(parameter gradient, input gradient)` for upstream gradient
    /// `grad_out`. The gradient's `center` is left at zero.
    pub(crate) fn backward_batch(
        &self,
        cache: &ForwardCache,
        grad_out: &DMatrix<f64>,
    ) -> (StageMap, DMatrix<f64>) {
        let x = &cache.input;
        let weight = self.effective_weight();
        let mut grad_w = grad_out.transpose() * x;
        if self.factored {
            if let Some((l, r)) = &self.basis {
                grad_w = l.transpose() * grad_w * r.transpose();
            }
            let (_, q, phi) = sym_exp(&self.weight);
            let inner = (q.transpose() * grad_w * &q).component_mul(&phi);
            let g = &q * inner * q.transpose();
            grad_w = (&g + g.transpose()) * 0.5;
        }
        let grad_b = DVector::from_iterator(grad_out.ncols(), grad_out.column_iter().map(|c| c.sum()));
        let mut grad_x = grad_out * &weight;
        let grad_hidden = match (&self.hidden, &cache.hidden) {
            (Some(h), Some(act)) => {
                let grad_v = grad_out.transpose() * act;
                let grad_act = grad_out * &h.output;
                let grad_z = grad_act.zip_map(act, |g, a| g * (1.0 - a * a));
                let grad_u = grad_z.transpose() * x;
                let grad_a =
                    DVector::from_iterator(grad_z.ncols(), grad_z.column_iter().map(|c| c.sum()));
                grad_x += &grad_z * &h.input;
                Some(HiddenLayer {
                    input: grad_u,
                    offset: grad_a,
                    output: grad_v,
                })
            }
            _ => None,
        };
        (
            StageMap {
                weight: grad_w,
                bias: grad_b,
                center: DVector::zeros(self.dim()),
                hidden: grad_hidden,
                factored: self.factored,
                basis: self.basis.clone(),
            },
            grad_x,
        )
    }

    /// Number of trained parameters (the center is excluded).
    pub fn n_params(&self) -> usize {
        let d = self.dim();
        let h = self.hidden_width();
        d * d + d + if h > 0 { 2 * h * d + h } else { 0 }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend(self.weight.iter());
        out.extend(self.bias.iter());
        if let Some(h) = &self.hidden {
            out.extend(h.input.iter());
            out.extend(h.offset.iter());
            out.extend(h.output.iter());
        }
        out
    }

    pub fn unflatten(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.n_params(), "parameter vector length");
        let mut it = params.iter().copied();
        for v in self.weight.iter_mut() {
            *v = it.next().unwrap();
        }
        for v in self.bias.iter_mut() {
            *v = it.next().unwrap();
        }
        if let Some(h) = self.hidden.as_mut() {
            for v in h
                .input
                .iter_mut()
                .chain(h.offset.iter_mut())
                .chain(h.output.iter_mut())
            {
                *v = it.next().unwrap();
            }
        }
    }

    pub(crate) fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// `exp(P)` for `P = (S + S^T) / 2`, with the eigenvectors `Q` of `P` and
/// the divided differences `Phi_ij = (e^l_i - e^l_j) / (l_i - l_j)` (`e^l_i`
/// on ties), so the gradient through the exponential is
/// `Q ((Q^T G Q) o Phi) Q^T`.
fn sym_exp(s: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let p = (s + s.transpose()) * 0.5;
    let eig = p.symmetric_eigen();
    let (q, l) = (eig.eigenvectors, eig.eigenvalues);
    let d = l.len();
    let e = l.map(f64::exp);
    let w = &q * DMatrix::from_diagonal(&e) * q.transpose();
    let phi = DMatrix::from_fn(d, d, |i, j| {
        let x = l[i] - l[j];
        if x == 0.0 {
            e[j]
        } else {
            e[j] * x.exp_m1() / x
        }
    });
    (w, q, phi)
}
