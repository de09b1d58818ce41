use super::params::{LstmLayer, ModelConfig, Params, Scalar};
use crate::{Error, Result};

/// Parameters plus a revision counter that advances on every update, so a
/// forward cache can be matched to the exact weights it was computed with.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: Params<T>,
    revision: u64,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        if !params.all_finite() {
            return Err(Error::invalid("non-finite model parameter"));
        }
        Ok(Model {
            config,
            params,
            revision: 0,
        })
    }

    /// Freshly initialized weights.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Self::new(config, Params::init(&config))
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Self::new(config, Params::zeros(&config))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Mutable access; bumps the revision so outstanding caches go stale.
    pub fn params_mut(&mut self) -> &mut Params<T> {
        self.revision += 1;
        &mut self.params
    }

    /// Runs both layers over `x` (`seq_len_in x feature_dim`, row-major)
    /// from zero state and returns output probabilities plus the cache
    /// needed by [`Model::backward`].
    pub fn forward(&self, x: &[T]) -> Result<Forward<T>> {
        let cfg = &self.config;
        if x.len() != cfg.input_len() {
            return Err(Error::shape(format!(
                "input has {} values, expected {} x {}",
                x.len(),
                cfg.seq_len_in,
                cfg.feature_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite input feature"));
        }
        let steps = cfg.seq_len_in;
        let trace1 = layer_forward(&self.params.layer1, x, steps);
        let trace2 = layer_forward(&self.params.layer2, &trace1.h, steps);

        let h2 = cfg.hidden2;
        let last = &trace2.h[(steps - 1) * h2..steps * h2];
        let out = &self.params.output;
        let mut logits = out.b.clone();
        gemv_acc(&mut logits, &out.w, out.input_dim, last);
        let mut probs = logits.clone();
        softmax_in_place(&mut probs);

        Ok(Forward {
            x: x.to_vec(),
            trace1,
            trace2,
            logits,
            probs,
            revision: self.revision,
            config: *cfg,
        })
    }

    /// Exact gradients of `-ln probs[label]` w.r.t. every parameter via
    /// backpropagation through time, accumulated (added) into `grads`.
    pub fn backward_into(&self, fwd: &Forward<T>, label: usize, grads: &mut Params<T>) -> Result<()> {
        if fwd.revision != self.revision || fwd.config != self.config {
            return Err(Error::invalid(
                "stale forward cache: parameters changed since forward",
            ));
        }
        let cfg = &self.config;
        if label >= cfg.n_outputs {
            return Err(Error::invalid(format!(
                "label index {label} out of range for {} outputs",
                cfg.n_outputs
            )));
        }
        grads.check_shapes(cfg)?;
        let steps = cfg.seq_len_in;
        let (h1, h2) = (cfg.hidden1, cfg.hidden2);

        // Softmax + cross-entropy: dlogits = probs - onehot(label).
        let mut dlogits = fwd.probs.clone();
        dlogits[label] = dlogits[label] - T::one();

        let last = &fwd.trace2.h[(steps - 1) * h2..steps * h2];
        let out = &self.params.output;
        outer_acc(&mut grads.output.w, h2, &dlogits, last);
        add_to(&mut grads.output.b, &dlogits);

        let mut dh2 = vec![T::zero(); steps * h2];
        gemv_t_acc(
            &mut dh2[(steps - 1) * h2..],
            &out.w,
            out.input_dim,
            &dlogits,
        );

        let mut dh1 = vec![T::zero(); steps * h1];
        layer_backward(
            &self.params.layer2,
            &fwd.trace2,
            &fwd.trace1.h,
            &dh2,
            &mut grads.layer2,
            Some(&mut dh1),
        );
        layer_backward(&self.params.layer1, &fwd.trace1, &fwd.x, &dh1, &mut grads.layer1, None);
        Ok(())
    }

    /// Gradients of one example, freshly allocated.
    pub fn backward(&self, fwd: &Forward<T>, label: usize) -> Result<Params<T>> {
        let mut grads = Params::zeros(&self.config);
        self.backward_into(fwd, label, &mut grads)?;
        Ok(grads)
    }

    /// Forward, loss and backward for one example; returns the loss.
    pub fn loss_and_grad(&self, x: &[T], label: usize, grads: &mut Params<T>) -> Result<T> {
        let fwd = self.forward(x)?;
        self.backward_into(&fwd, label, grads)?;
        Ok(fwd.loss(label))
    }
}

/// Per-layer intermediates, all row-major over time steps.
#[derive(Debug, Clone)]
pub struct LayerTrace<T> {
    /// Activated gates `[i, f, o, g]`, `steps x 4H`.
    pub gates: Vec<T>,
    pub c: Vec<T>,
    pub tanh_c: Vec<T>,
    pub h: Vec<T>,
}

/// Result of [`Model::forward`].
#[derive(Debug, Clone)]
pub struct Forward<T> {
    x: Vec<T>,
    trace1: LayerTrace<T>,
    trace2: LayerTrace<T>,
    logits: Vec<T>,
    probs: Vec<T>,
    revision: u64,
    config: ModelConfig,
}

impl<T: Scalar> Forward<T> {
    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    pub fn into_probs(self) -> Vec<T> {
        self.probs
    }

    pub fn layer1(&self) -> &LayerTrace<T> {
        &self.trace1
    }

    pub fn layer2(&self) -> &LayerTrace<T> {
        &self.trace2
    }

    /// Cross-entropy computed as `logsumexp(logits) - logits[label]`.
    pub fn loss(&self, label: usize) -> T {
        let max = self
            .logits
            .iter()
            .fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
        let sum = self
            .logits
            .iter()
            .fold(0.0f64, |s, &v| s + (v - max).exp().to_f64().unwrap_or(0.0));
        let lse = max + T::from(sum.ln()).expect("finite");
        lse - self.logits[label]
    }
}

/// Categorical cross-entropy of a probability vector: `-ln probs[label]`.
pub fn loss<T: Scalar>(probs: &[T], label: usize) -> T {
    -probs[label].ln()
}

/// Numerically stable softmax; the normalizer is accumulated in `f64`.
pub fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v
        .iter()
        .fold(T::neg_infinity(), |m, &x| if x > m { x } else { m });
    let mut sum = 0.0f64;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += x.to_f64().unwrap_or(0.0);
    }
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x = T::from(x.to_f64().unwrap_or(0.0) * inv).expect("finite");
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `out[r] += Σ_c w[r, c] x[c]` for a row-major matrix with `cols` columns.
fn gemv_acc<T: Scalar>(out: &mut [T], w: &[T], cols: usize, x: &[T]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        let mut acc = T::zero();
        for (&a, &b) in row.iter().zip(x) {
            acc = acc + a * b;
        }
        *o = *o + acc;
    }
}

/// `out[c] += Σ_r w[r, c] y[r]`.
fn gemv_t_acc<T: Scalar>(out: &mut [T], w: &[T], cols: usize, y: &[T]) {
    for (row, &yr) in w.chunks_exact(cols).zip(y) {
        if yr == T::zero() {
            continue;
        }
        for (o, &a) in out.iter_mut().zip(row) {
            *o = *o + a * yr;
        }
    }
}

/// `dw[r, c] += y[r] x[c]`.
fn outer_acc<T: Scalar>(dw: &mut [T], cols: usize, y: &[T], x: &[T]) {
    for (row, &yr) in dw.chunks_exact_mut(cols).zip(y) {
        if yr == T::zero() {
            continue;
        }
        for (d, &xc) in row.iter_mut().zip(x) {
            *d = *d + yr * xc;
        }
    }
}

fn add_to<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn layer_forward<T: Scalar>(layer: &LstmLayer<T>, xs: &[T], steps: usize) -> LayerTrace<T> {
    let (h, d) = (layer.hidden, layer.input_dim);
    let mut gates = vec![T::zero(); steps * 4 * h];
    let mut c = vec![T::zero(); steps * h];
    let mut tanh_c = vec![T::zero(); steps * h];
    let mut hs = vec![T::zero(); steps * h];
    let zeros = vec![T::zero(); h];

    for t in 0..steps {
        let x = &xs[t * d..(t + 1) * d];
        let z = &mut gates[t * 4 * h..(t + 1) * 4 * h];
        z.copy_from_slice(&layer.b);
        if x.iter().any(|&v| v != T::zero()) {
            gemv_acc(z, &layer.w, d, x);
        }
        let (h_prev, c_prev) = if t == 0 {
            (&zeros[..], &zeros[..])
        } else {
            (&hs[(t - 1) * h..t * h], &c[(t - 1) * h..t * h])
        };
        if t > 0 {
            gemv_acc(z, &layer.u, h, h_prev);
        }
        for v in &mut z[..3 * h] {
            *v = sigmoid(*v);
        }
        for v in &mut z[3 * h..] {
            *v = v.tanh();
        }
        let mut c_t = vec![T::zero(); h];
        for j in 0..h {
            let (i, f, g) = (z[j], z[h + j], z[3 * h + j]);
            c_t[j] = f * c_prev[j] + i * g;
        }
        for j in 0..h {
            let o = z[2 * h + j];
            let tc = c_t[j].tanh();
            tanh_c[t * h + j] = tc;
            hs[t * h + j] = o * tc;
        }
        c[t * h..(t + 1) * h].copy_from_slice(&c_t);
    }
    LayerTrace {
        gates,
        c,
        tanh_c,
        h: hs,
    }
}

/// Backpropagation through time for one layer. `dh_ext` holds the loss
/// gradient w.r.t. each step's output from above; `dx`, when given,
/// receives the gradient w.r.t. each step's input.
fn layer_backward<T: Scalar>(
    layer: &LstmLayer<T>,
    trace: &LayerTrace<T>,
    xs: &[T],
    dh_ext: &[T],
    grads: &mut LstmLayer<T>,
    mut dx: Option<&mut Vec<T>>,
) {
    let (h, d) = (layer.hidden, layer.input_dim);
    let steps = dh_ext.len() / h;
    let mut dh_next = vec![T::zero(); h];
    let mut dc_next = vec![T::zero(); h];
    let mut dz = vec![T::zero(); 4 * h];
    let one = T::one();

    for t in (0..steps).rev() {
        let g_t = &trace.gates[t * 4 * h..(t + 1) * 4 * h];
        for j in 0..h {
            let (i, f, o, g) = (g_t[j], g_t[h + j], g_t[2 * h + j], g_t[3 * h + j]);
            let tc = trace.tanh_c[t * h + j];
            let c_prev = if t > 0 { trace.c[(t - 1) * h + j] } else { T::zero() };
            let dh = dh_ext[t * h + j] + dh_next[j];
            let d_o = dh * tc;
            let dc = dc_next[j] + dh * o * (one - tc * tc);
            dz[j] = dc * g * i * (one - i);
            dz[h + j] = dc * c_prev * f * (one - f);
            dz[2 * h + j] = d_o * o * (one - o);
            dz[3 * h + j] = dc * i * (one - g * g);
            dc_next[j] = dc * f;
        }

        let x = &xs[t * d..(t + 1) * d];
        outer_acc(&mut grads.w, d, &dz, x);
        add_to(&mut grads.b, &dz);
        dh_next.fill(T::zero());
        if t > 0 {
            let h_prev = &trace.h[(t - 1) * h..t * h];
            outer_acc(&mut grads.u, h, &dz, h_prev);
            gemv_t_acc(&mut dh_next, &layer.u, h, &dz);
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemv_t_acc(&mut dx[t * d..(t + 1) * d], &layer.w, d, &dz);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seq: usize, feat: usize, h1: usize, h2: usize, out: usize) -> ModelConfig {
        ModelConfig {
            seq_len_in: seq,
            feature_dim: feat,
            hidden1: h1,
            hidden2: h2,
            n_outputs: out,
            seed: 3,
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let cfg = tiny(4, 3, 5, 6, 7);
        let m = Model::<f64>::zeros(cfg).unwrap();
        let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.37 - 1.0).collect();
        let fwd = m.forward(&x).unwrap();
        for p in fwd.probs() {
            assert!((p - 1.0 / 7.0).abs() < 1e-15);
        }
        assert!(fwd.layer1().h.iter().all(|&v| v == 0.0));
        assert!(fwd.layer2().c.iter().all(|&v| v == 0.0));
        for (k, &g) in fwd.layer1().gates.iter().enumerate() {
            let expect = if k % 20 < 15 { 0.5 } else { 0.0 };
            assert_eq!(g, expect);
        }
    }

    #[test]
    fn zero_model_output_bias_gradient() {
        let cfg = tiny(3, 2, 2, 2, 4);
        let m = Model::<f64>::zeros(cfg).unwrap();
        let fwd = m.forward(&[0.5; 6]).unwrap();
        let g = m.backward(&fwd, 2).unwrap();
        assert_eq!(g.output.b, vec![0.25, 0.25, -0.75, 0.25]);
    }

    #[test]
    fn loss_closed_forms() {
        assert!((loss(&[0.25f64; 4], 1) - 4f64.ln()).abs() < 1e-12);
        assert!(loss(&[0.0f64, 1.0], 1).abs() < 1e-12);
        assert!((loss(&[0.9f64, 0.1], 1) - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn forward_loss_matches_probability_loss() {
        let m = Model::<f64>::init(tiny(3, 2, 3, 3, 5)).unwrap();
        let fwd = m.forward(&[0.1, -0.2, 0.3, 0.0, 0.0, 1.0]).unwrap();
        for label in 0..5 {
            assert!((fwd.loss(label) - loss(fwd.probs(), label)).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_and_value_errors() {
        let m = Model::<f32>::init(tiny(2, 2, 2, 2, 3)).unwrap();
        assert!(matches!(m.forward(&[0.0; 3]), Err(Error::Shape(_))));
        assert!(m.forward(&[0.0, f32::NAN, 0.0, 0.0]).is_err());
        let fwd = m.forward(&[0.0; 4]).unwrap();
        assert!(m.backward(&fwd, 3).is_err());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = Model::<f64>::init(tiny(2, 2, 2, 2, 3)).unwrap();
        let fwd = m.forward(&[1.0; 4]).unwrap();
        m.params_mut().output.b[0] = 0.1;
        assert!(m.backward(&fwd, 0).is_err());
        let other = Model::<f64>::init(tiny(2, 2, 3, 2, 3)).unwrap();
        let fwd_other = other.forward(&[1.0; 4]).unwrap();
        assert!(Model::<f64>::init(tiny(2, 2, 2, 2, 3))
            .unwrap()
            .backward(&fwd_other, 0)
            .is_err());
    }

    #[test]
    fn backward_is_deterministic() {
        let m = Model::<f32>::init(tiny(5, 4, 6, 5, 9)).unwrap();
        let x: Vec<f32> = (0..20).map(|i| ((i * 7) % 5) as f32 * 0.2).collect();
        let a = m.backward(&m.forward(&x).unwrap(), 4).unwrap();
        let b = m.backward(&m.forward(&x).unwrap(), 4).unwrap();
        for (ta, tb) in a.tensors().iter().zip(b.tensors()) {
            let bits_a: Vec<u32> = ta.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = tb.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn stateless_between_windows() {
        let m = Model::<f32>::init(tiny(3, 2, 4, 4, 5)).unwrap();
        let a = [0.3f32, 0.1, -0.5, 0.2, 0.9, 0.0];
        let b = [0.0f32, 0.0, 0.7, -0.7, 0.1, 0.4];
        let _ = m.forward(&a).unwrap();
        let after_a = m.forward(&b).unwrap();
        let fresh = Model::<f32>::init(tiny(3, 2, 4, 4, 5)).unwrap().forward(&b).unwrap();
        assert_eq!(after_a.probs(), fresh.probs());
    }

    #[test]
    fn padding_rows_still_advance_state() {
        let m = Model::<f64>::init(tiny(3, 2, 3, 3, 4)).unwrap();
        let fwd = m.forward(&[0.0, 0.0, 0.0, 0.0, 0.5, 0.5]).unwrap();
        // Zero input at step 0 still yields i,f,o = σ(b) and a nonzero forget gate.
        let gates = &fwd.layer1().gates;
        assert_eq!(gates[3], 1.0 / (1.0 + (-1.0f64).exp()));
        assert_eq!(gates[0], 0.5);
    }
}
