//! Local empirical losses, stochastic and full gradients for the three model
//! families: per-client quadratics, softmax regression, and a two-layer MLP.
//!
//! All gradients are computed by hand (no autodiff) and validated against a
//! central-difference oracle. Per-sample contributions accumulate in batch
//! order and are divided by the batch size at the end, so a loss or gradient
//! is a pure function of its inputs down to the bit.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{Batch, ClientShard};
use crate::error::{Error, Result};
use crate::numerics::{ParamVector, RngStream};

/// A family of local objectives f_m(x, B), indexed by client id.
pub trait Objective: Send + Sync {
    /// Parameter dimension d.
    fn dim(&self) -> usize;

    /// Mean per-sample loss of `batch` at `x` for client `client`.
    fn loss(&self, client: usize, x: &ParamVector, batch: &Batch) -> Result<f64>;

    /// Gradient of `loss` with respect to `x`.
    fn grad(&self, client: usize, x: &ParamVector, batch: &Batch) -> Result<ParamVector>;

    /// Class scores for one feature row, when the objective is a classifier.
    fn class_scores(&self, x: &ParamVector, features: &[f64]) -> Option<Vec<f64>> {
        let _ = (x, features);
        None
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Softmax regression
// ---------------------------------------------------------------------------

/// Multinomial logistic regression with bias. Parameter layout: the C x in
/// weight matrix row-major, then C biases.
#[derive(Debug, Clone)]
pub struct SoftmaxRegression {
    pub in_dim: usize,
    pub classes: usize,
}

impl SoftmaxRegression {
    pub fn new(in_dim: usize, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config("softmax regression needs C >= 2".into()));
        }
        Ok(SoftmaxRegression { in_dim, classes })
    }

    fn logits(&self, x: &[f64], features: &[f64], out: &mut [f64]) {
        let (c, d) = (self.classes, self.in_dim);
        let bias = &x[c * d..];
        for k in 0..c {
            let row = &x[k * d..(k + 1) * d];
            let mut acc = bias[k];
            for j in 0..d {
                acc += row[j] * features[j];
            }
            out[k] = acc;
        }
    }
}

/// Max-shifted softmax turning `logits` into probabilities in place; returns
/// the log-normalizer so the caller can form the cross-entropy loss.
fn softmax_in_place(logits: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
    sum.ln() + max
}

impl Objective for SoftmaxRegression {
    fn dim(&self) -> usize {
        self.classes * self.in_dim + self.classes
    }

    fn loss(&self, _client: usize, x: &ParamVector, batch: &Batch) -> Result<f64> {
        check_dim(self.dim(), x.dim())?;
        check_dim(self.in_dim, batch.features.cols())?;
        let x = x.as_slice();
        let mut logits = vec![0.0; self.classes];
        let mut total = 0.0;
        for i in 0..batch.size() {
            let phi = batch.features.row(i);
            self.logits(x, phi, &mut logits);
            let log_z = {
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max
            };
            total += log_z - logits[batch.labels[i]];
        }
        Ok(total / batch.size() as f64)
    }

    fn grad(&self, _client: usize, x: &ParamVector, batch: &Batch) -> Result<ParamVector> {
        check_dim(self.dim(), x.dim())?;
        check_dim(self.in_dim, batch.features.cols())?;
        let (c, d) = (self.classes, self.in_dim);
        let x = x.as_slice();
        let mut g = vec![0.0; self.dim()];
        let mut probs = vec![0.0; c];
        for i in 0..batch.size() {
            let phi = batch.features.row(i);
            self.logits(x, phi, &mut probs);
            softmax_in_place(&mut probs);
            let label = batch.labels[i];
            for k in 0..c {
                let coef = probs[k] - f64::from(u8::from(k == label));
                let row = &mut g[k * d..(k + 1) * d];
                for j in 0..d {
                    row[j] += coef * phi[j];
                }
                g[c * d + k] += coef;
            }
        }
        let scale = 1.0 / batch.size() as f64;
        for v in &mut g {
            *v *= scale;
        }
        Ok(ParamVector::new(g)?)
    }

    fn class_scores(&self, x: &ParamVector, features: &[f64]) -> Option<Vec<f64>> {
        let mut logits = vec![0.0; self.classes];
        self.logits(x.as_slice(), features, &mut logits);
        Some(logits)
    }
}

impl SoftmaxRegression {
    /// Glorot-uniform weights from the given stream; biases start at zero.
    pub fn xavier_init(&self, rng: &mut RngStream) -> ParamVector {
        let mut x = vec![0.0; self.dim()];
        let lim = (6.0 / (self.in_dim + self.classes) as f64).sqrt();
        for v in &mut x[..self.classes * self.in_dim] {
            *v = rng.random_range(-lim..lim);
        }
        ParamVector::new(x).expect("finite init")
    }
}

// ---------------------------------------------------------------------------
// Two-layer MLP (dense - ReLU - dense - softmax)
// ---------------------------------------------------------------------------

/// Parameter layout: W1 (H x in, row-major), b1 (H), W2 (C x H, row-major),
/// b2 (C), so d = in*H + H + H*C + C.
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub in_dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Mlp2 {
    pub fn new(in_dim: usize, hidden: usize, classes: usize) -> Result<Self> {
        if classes < 2 || hidden < 1 {
            return Err(Error::Config("mlp2 needs C >= 2 and H >= 1".into()));
        }
        Ok(Mlp2 {
            in_dim,
            hidden,
            classes,
        })
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let w1 = self.hidden * self.in_dim;
        let b1 = w1 + self.hidden;
        let w2 = b1 + self.classes * self.hidden;
        (w1, b1, w2)
    }

    fn forward(&self, x: &[f64], phi: &[f64], pre: &mut [f64], act: &mut [f64], logits: &mut [f64]) {
        let (o_b1, o_w2, o_b2) = self.offsets();
        let (h, d, c) = (self.hidden, self.in_dim, self.classes);
        for u in 0..h {
            let row = &x[u * d..(u + 1) * d];
            let mut acc = x[o_b1 + u];
            for j in 0..d {
                acc += row[j] * phi[j];
            }
            pre[u] = acc;
            act[u] = acc.max(0.0);
        }
        for k in 0..c {
            let row = &x[o_w2 + k * h..o_w2 + (k + 1) * h];
            let mut acc = x[o_b2 + k];
            for u in 0..h {
                acc += row[u] * act[u];
            }
            logits[k] = acc;
        }
    }

    /// Glorot-uniform weights drawn from the given stream; biases start at
    /// zero. Starting an MLP run from the zero vector would leave the first
    /// layer without a gradient path.
    pub fn xavier_init(&self, rng: &mut RngStream) -> ParamVector {
        let (o_b1, o_w2, o_b2) = self.offsets();
        let mut x = vec![0.0; self.dim()];
        let lim1 = (6.0 / (self.in_dim + self.hidden) as f64).sqrt();
        for v in &mut x[..o_b1] {
            *v = rng.random_range(-lim1..lim1);
        }
        let lim2 = (6.0 / (self.hidden + self.classes) as f64).sqrt();
        for v in &mut x[o_w2..o_b2] {
            *v = rng.random_range(-lim2..lim2);
        }
        ParamVector::new(x).expect("finite init")
    }
}

impl Objective for Mlp2 {
    fn dim(&self) -> usize {
        self.hidden * self.in_dim + self.hidden + self.classes * self.hidden + self.classes
    }

    fn loss(&self, _client: usize, x: &ParamVector, batch: &Batch) -> Result<f64> {
        check_dim(self.dim(), x.dim())?;
        check_dim(self.in_dim, batch.features.cols())?;
        let x = x.as_slice();
        let mut pre = vec![0.0; self.hidden];
        let mut act = vec![0.0; self.hidden];
        let mut logits = vec![0.0; self.classes];
        let mut total = 0.0;
        for i in 0..batch.size() {
            self.forward(x, batch.features.row(i), &mut pre, &mut act, &mut logits);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_z = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
            total += log_z - logits[batch.labels[i]];
        }
        Ok(total / batch.size() as f64)
    }

    fn grad(&self, _client: usize, x: &ParamVector, batch: &Batch) -> Result<ParamVector> {
        check_dim(self.dim(), x.dim())?;
        check_dim(self.in_dim, batch.features.cols())?;
        let (o_b1, o_w2, o_b2) = self.offsets();
        let (h, d, c) = (self.hidden, self.in_dim, self.classes);
        let x = x.as_slice();
        let mut g = vec![0.0; self.dim()];
        let mut pre = vec![0.0; h];
        let mut act = vec![0.0; h];
        let mut probs = vec![0.0; c];
        let mut d_act = vec![0.0; h];
        for i in 0..batch.size() {
            let phi = batch.features.row(i);
            self.forward(x, phi, &mut pre, &mut act, &mut probs);
            softmax_in_place(&mut probs);
            let label = batch.labels[i];
            d_act.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..c {
                let coef = probs[k] - f64::from(u8::from(k == label));
                let w2_row = &x[o_w2 + k * h..o_w2 + (k + 1) * h];
                let g_row = &mut g[o_w2 + k * h..o_w2 + (k + 1) * h];
                for u in 0..h {
                    g_row[u] += coef * act[u];
                    d_act[u] += coef * w2_row[u];
                }
                g[o_b2 + k] += coef;
            }
            for u in 0..h {
                if pre[u] > 0.0 {
                    let dp = d_act[u];
                    let g_row = &mut g[u * d..(u + 1) * d];
                    for j in 0..d {
                        g_row[j] += dp * phi[j];
                    }
                    g[o_b1 + u] += dp;
                }
            }
        }
        let scale = 1.0 / batch.size() as f64;
        for v in &mut g {
            *v *= scale;
        }
        Ok(ParamVector::new(g)?)
    }

    fn class_scores(&self, x: &ParamVector, features: &[f64]) -> Option<Vec<f64>> {
        let mut pre = vec![0.0; self.hidden];
        let mut act = vec![0.0; self.hidden];
        let mut logits = vec![0.0; self.classes];
        self.forward(x.as_slice(), features, &mut pre, &mut act, &mut logits);
        Some(logits)
    }
}

// ---------------------------------------------------------------------------
// Per-client quadratics
// ---------------------------------------------------------------------------

/// One client's bowl: 0.5 (x - c)' A (x - c) with A symmetric PSD.
#[derive(Debug, Clone)]
pub struct QuadraticClient {
    pub a: DMatrix<f64>,
    pub center: DVector<f64>,
}

impl QuadraticClient {
    fn loss(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(x) - &self.center;
        0.5 * (&self.a * &diff).dot(&diff)
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let diff = DVector::from_column_slice(x) - &self.center;
        (&self.a * diff).as_slice().to_vec()
    }
}

/// An ensemble of M per-client quadratics. The objective is deterministic:
/// batches carry no information, so stochastic and full gradients coincide.
#[derive(Debug, Clone)]
pub struct QuadraticEnsemble {
    clients: Vec<QuadraticClient>,
    dim: usize,
}

impl QuadraticEnsemble {
    pub fn new(clients: Vec<QuadraticClient>) -> Result<Self> {
        let dim = clients
            .first()
            .map(|c| c.center.len())
            .ok_or_else(|| Error::Config("quadratic ensemble needs at least one client".into()))?;
        for c in &clients {
            if c.center.len() != dim || c.a.nrows() != dim || c.a.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: c.center.len(),
                });
            }
        }
        Ok(QuadraticEnsemble { clients, dim })
    }

    /// Generates M clients with A_m = Q diag(lambda) Q', a seeded orthogonal Q
    /// per client, eigenvalues linearly spaced in [mu_min, l_max], and centers
    /// drawn as `center_scale * N(0, I)`. One stream per client id.
    pub fn generate(
        num_clients: usize,
        dim: usize,
        mu_min: f64,
        l_max: f64,
        center_scale: f64,
        mut client_rng: impl FnMut(usize) -> RngStream,
    ) -> Result<Self> {
        if mu_min < 0.0 || l_max < mu_min {
            return Err(Error::Config(
                "quadratic eigenvalue range needs 0 <= mu_min <= l_max".into(),
            ));
        }
        let mut clients = Vec::with_capacity(num_clients);
        for m in 0..num_clients {
            let mut rng = client_rng(m);
            let gauss =
                DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let q = gauss.qr().q();
            let eigen = DVector::from_fn(dim, |i, _| {
                if dim == 1 {
                    l_max
                } else {
                    mu_min + (l_max - mu_min) * i as f64 / (dim - 1) as f64
                }
            });
            let a = &q * DMatrix::from_diagonal(&eigen) * q.transpose();
            let a = (&a + a.transpose()) * 0.5;
            let center = DVector::from_fn(dim, |_, _| {
                center_scale * rng.sample::<f64, _>(StandardNormal)
            });
            clients.push(QuadraticClient { a, center });
        }
        QuadraticEnsemble::new(clients)
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client(&self, m: usize) -> &QuadraticClient {
        &self.clients[m]
    }

    /// Hessian of the averaged objective F = (1/M) sum F_m.
    pub fn global_hessian(&self) -> DMatrix<f64> {
        let mut sum = DMatrix::zeros(self.dim, self.dim);
        for c in &self.clients {
            sum += &c.a;
        }
        sum / self.clients.len() as f64
    }

    /// Exact (L, mu) of the averaged objective: the extreme eigenvalues of
    /// its Hessian.
    pub fn global_l_mu(&self) -> (f64, f64) {
        let eig = self.global_hessian().symmetric_eigenvalues();
        let l = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mu = eig.iter().copied().fold(f64::INFINITY, f64::min);
        (l, mu)
    }
}

impl Objective for QuadraticEnsemble {
    fn dim(&self) -> usize {
        self.dim
    }

    fn loss(&self, client: usize, x: &ParamVector, _batch: &Batch) -> Result<f64> {
        check_dim(self.dim, x.dim())?;
        let c = self
            .clients
            .get(client)
            .ok_or(Error::UnknownClient(client))?;
        Ok(c.loss(x.as_slice()))
    }

    fn grad(&self, client: usize, x: &ParamVector, _batch: &Batch) -> Result<ParamVector> {
        check_dim(self.dim, x.dim())?;
        let c = self
            .clients
            .get(client)
            .ok_or(Error::UnknownClient(client))?;
        Ok(ParamVector::new(c.grad(x.as_slice()))?)
    }
}

/// Solves (sum A_m) x = sum A_m c_m directly and returns the minimizer and
/// the minimum averaged loss F*.
pub fn quadratic_minimum(ensemble: &QuadraticEnsemble) -> Result<(ParamVector, f64)> {
    let d = ensemble.dim();
    let mut lhs = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    for c in &ensemble.clients {
        lhs += &c.a;
        rhs += &c.a * &c.center;
    }
    let chol = lhs
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("sum of quadratic forms is not positive definite".into()))?;
    let x_star = chol.solve(&rhs);
    let x = ParamVector::new(x_star.as_slice().to_vec())?;
    let f_star = ensemble
        .clients
        .iter()
        .map(|c| c.loss(x.as_slice()))
        .sum::<f64>()
        / ensemble.clients.len() as f64;
    Ok((x, f_star))
}

// ---------------------------------------------------------------------------
// Model wrapper and free operations
// ---------------------------------------------------------------------------

/// The concrete objective selected by an experiment.
#[derive(Debug, Clone)]
pub enum Model {
    Quadratic(QuadraticEnsemble),
    Softmax(SoftmaxRegression),
    Mlp2(Mlp2),
}

impl Model {
    pub fn quadratic(&self) -> Option<&QuadraticEnsemble> {
        match self {
            Model::Quadratic(q) => Some(q),
            _ => None,
        }
    }
}

impl Objective for Model {
    fn dim(&self) -> usize {
        match self {
            Model::Quadratic(o) => o.dim(),
            Model::Softmax(o) => o.dim(),
            Model::Mlp2(o) => o.dim(),
        }
    }

    fn loss(&self, client: usize, x: &ParamVector, batch: &Batch) -> Result<f64> {
        match self {
            Model::Quadratic(o) => o.loss(client, x, batch),
            Model::Softmax(o) => o.loss(client, x, batch),
            Model::Mlp2(o) => o.loss(client, x, batch),
        }
    }

    fn grad(&self, client: usize, x: &ParamVector, batch: &Batch) -> Result<ParamVector> {
        match self {
            Model::Quadratic(o) => o.grad(client, x, batch),
            Model::Softmax(o) => o.grad(client, x, batch),
            Model::Mlp2(o) => o.grad(client, x, batch),
        }
    }

    fn class_scores(&self, x: &ParamVector, features: &[f64]) -> Option<Vec<f64>> {
        match self {
            Model::Quadratic(_) => None,
            Model::Softmax(o) => o.class_scores(x, features),
            Model::Mlp2(o) => o.class_scores(x, features),
        }
    }
}

/// Gradient over a batch containing every shard sample exactly once; the
/// exact local gradient when b = n.
pub fn full_grad(
    obj: &dyn Objective,
    client: usize,
    x: &ParamVector,
    shard: &ClientShard,
) -> Result<ParamVector> {
    if shard.n() == 0 {
        return Err(Error::EmptyShard);
    }
    obj.grad(client, x, &shard.full_batch())
}

/// Mean loss over the whole shard.
pub fn full_loss(
    obj: &dyn Objective,
    client: usize,
    x: &ParamVector,
    shard: &ClientShard,
) -> Result<f64> {
    if shard.n() == 0 {
        return Err(Error::EmptyShard);
    }
    obj.loss(client, x, &shard.full_batch())
}

/// Central-difference gradient oracle: (loss(x + h e_i) - loss(x - h e_i)) / 2h
/// per coordinate. Test scaffolding for every analytic gradient in the crate.
pub fn finite_diff_grad(
    obj: &dyn Objective,
    client: usize,
    x: &ParamVector,
    batch: &Batch,
    h: f64,
) -> Result<ParamVector> {
    if h <= 0.0 {
        return Err(Error::Config("finite-difference step must be > 0".into()));
    }
    let mut probe = x.as_slice().to_vec();
    let mut g = vec![0.0; x.dim()];
    for i in 0..x.dim() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = obj.loss(client, &ParamVector::new(probe.clone())?, batch)?;
        probe[i] = orig - h;
        let minus = obj.loss(client, &ParamVector::new(probe.clone())?, batch)?;
        probe[i] = orig;
        g[i] = (plus - minus) / (2.0 * h);
    }
    Ok(ParamVector::new(g)?)
}

/// Instrumentation wrapper counting per-sample gradient evaluations; used to
/// audit the gradient-complexity counters.
pub struct CountingObjective<'a> {
    inner: &'a dyn Objective,
    grad_samples: AtomicU64,
}

impl<'a> CountingObjective<'a> {
    pub fn new(inner: &'a dyn Objective) -> Self {
        CountingObjective {
            inner,
            grad_samples: AtomicU64::new(0),
        }
    }

    pub fn grad_samples(&self) -> u64 {
        self.grad_samples.load(Ordering::Relaxed)
    }
}

impl Objective for CountingObjective<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn loss(&self, client: usize, x: &ParamVector, batch: &Batch) -> Result<f64> {
        self.inner.loss(client, x, batch)
    }

    fn grad(&self, client: usize, x: &ParamVector, batch: &Batch) -> Result<ParamVector> {
        self.grad_samples
            .fetch_add(batch.size() as u64, Ordering::Relaxed);
        self.inner.grad(client, x, batch)
    }

    fn class_scores(&self, x: &ParamVector, features: &[f64]) -> Option<Vec<f64>> {
        self.inner.class_scores(x, features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Matrix;
    use crate::numerics::{l2_norm_sq, stream, StreamOwner, StreamPurpose};

    fn quad_identity(centers: Vec<Vec<f64>>) -> QuadraticEnsemble {
        let d = centers[0].len();
        let clients = centers
            .into_iter()
            .map(|c| QuadraticClient {
                a: DMatrix::identity(d, d),
                center: DVector::from_vec(c),
            })
            .collect();
        QuadraticEnsemble::new(clients).unwrap()
    }

    fn batch_of(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> Batch {
        let cols = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Batch {
            features: Matrix::from_vec(labels.len(), cols, flat).unwrap(),
            labels,
        }
    }

    fn dummy_batch(cols: usize) -> Batch {
        batch_of(vec![vec![0.0; cols]], vec![0])
    }

    fn pv(values: &[f64]) -> ParamVector {
        ParamVector::new(values.to_vec()).unwrap()
    }

    fn rng(seed: u64, round: u64) -> RngStream {
        stream(seed, round, StreamOwner::Server, StreamPurpose::DataGeneration)
    }

    #[test]
    fn quadratic_loss_identity_bowl() {
        let q = quad_identity(vec![vec![0.0, 0.0]]);
        let loss = q.loss(0, &pv(&[3.0, 4.0]), &dummy_batch(1)).unwrap();
        assert_eq!(loss, 12.5);
    }

    #[test]
    fn quadratic_grad_is_x_minus_center() {
        let q = quad_identity(vec![vec![1.0, 1.0]]);
        let g = q.grad(0, &pv(&[3.0, 1.0]), &dummy_batch(1)).unwrap();
        assert_eq!(g.as_slice(), &[2.0, 0.0]);
    }

    #[test]
    fn softmax_zero_weights_uniform_loss() {
        for c in [2, 5, 10] {
            let sm = SoftmaxRegression::new(3, c).unwrap();
            let x = ParamVector::zeros(sm.dim());
            let batch = batch_of(vec![vec![0.3, -0.7, 1.1], vec![2.0, 0.0, -1.0]], vec![0, 1]);
            let loss = sm.loss(0, &x, &batch).unwrap();
            assert!((loss - (c as f64).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn mlp_zero_weights_uniform_loss() {
        let mlp = Mlp2::new(4, 3, 10).unwrap();
        let x = ParamVector::zeros(mlp.dim());
        let batch = batch_of(vec![vec![0.5, -0.2, 0.9, 0.0]], vec![7]);
        let loss = mlp.loss(0, &x, &batch).unwrap();
        assert!((loss - 2.302585092994046).abs() < 1e-15);
    }

    #[test]
    fn softmax_single_sample_closed_form() {
        let sm = SoftmaxRegression::new(2, 3).unwrap();
        let x = ParamVector::zeros(sm.dim());
        let phi = [0.4, -1.2];
        let batch = batch_of(vec![phi.to_vec()], vec![2]);
        let g = sm.grad(0, &x, &batch).unwrap();
        let g = g.as_slice();
        // softmax(0) = 1/3 each; gradient rows are (p_k - y_k) * phi.
        for k in 0..3 {
            let coef = 1.0 / 3.0 - f64::from(u8::from(k == 2));
            for j in 0..2 {
                assert!((g[k * 2 + j] - coef * phi[j]).abs() < 1e-15);
            }
            assert!((g[6 + k] - coef).abs() < 1e-15);
        }
    }

    fn rel_err(a: &ParamVector, b: &ParamVector) -> f64 {
        let diff = a.sub(b).unwrap();
        (l2_norm_sq(&diff) / l2_norm_sq(b).max(1e-300)).sqrt()
    }

    #[test]
    fn quadratic_matches_finite_differences() {
        let mut r = rng(11, 0);
        let q = QuadraticEnsemble::generate(2, 4, 0.5, 2.0, 1.0, |m| {
            stream(11, 3, StreamOwner::Client(m as u64), StreamPurpose::DataGeneration)
        })
        .unwrap();
        let x = pv(&(0..4).map(|_| r.random::<f64>() - 0.5).collect::<Vec<_>>());
        let batch = dummy_batch(1);
        let g = q.grad(1, &x, &batch).unwrap();
        let fd = finite_diff_grad(&q, 1, &x, &batch, 1e-6).unwrap();
        assert!(g.max_abs_diff(&fd).unwrap() <= 1e-6);
    }

    #[test]
    fn mlp_matches_finite_differences() {
        let mlp = Mlp2::new(5, 4, 3).unwrap();
        let mut r = rng(12, 0);
        let x = mlp.xavier_init(&mut rng(12, 4));
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..5).map(|_| r.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let batch = batch_of(rows, labels);
        let g = mlp.grad(0, &x, &batch).unwrap();
        let fd = finite_diff_grad(&mlp, 0, &x, &batch, 1e-5).unwrap();
        assert!(rel_err(&g, &fd) <= 1e-5, "rel err {}", rel_err(&g, &fd));
    }

    /// Loss sum(x_i * w_i), independent of the batch; its gradient is w.
    struct LinearObjective {
        w: Vec<f64>,
    }

    impl Objective for LinearObjective {
        fn dim(&self) -> usize {
            self.w.len()
        }

        fn loss(&self, _c: usize, x: &ParamVector, _b: &Batch) -> Result<f64> {
            Ok(x.as_slice().iter().zip(&self.w).map(|(x, w)| x * w).sum())
        }

        fn grad(&self, _c: usize, _x: &ParamVector, _b: &Batch) -> Result<ParamVector> {
            Ok(ParamVector::new(self.w.clone())?)
        }
    }

    #[test]
    fn finite_diff_exact_on_linear_loss() {
        let lin = LinearObjective {
            w: vec![2.0, -3.0, 0.5],
        };
        let x = ParamVector::zeros(3);
        let fd = finite_diff_grad(&lin, 0, &x, &dummy_batch(1), 0.5).unwrap();
        assert_eq!(fd.as_slice(), &[2.0, -3.0, 0.5]);
    }

    #[test]
    fn quadratic_minimum_identity_forms() {
        let q = quad_identity(vec![vec![1.0, 3.0], vec![3.0, 5.0]]);
        let (x, f) = quadratic_minimum(&q).unwrap();
        assert!(x.max_abs_diff(&pv(&[2.0, 4.0])).unwrap() < 1e-12);
        assert!(f > 0.0);
    }

    #[test]
    fn quadratic_minimum_single_bowl() {
        let q = quad_identity(vec![vec![-1.5, 2.5]]);
        let (x, f) = quadratic_minimum(&q).unwrap();
        assert!(x.max_abs_diff(&pv(&[-1.5, 2.5])).unwrap() < 1e-14);
        assert!(f.abs() < 1e-28);
    }

    #[test]
    fn quadratic_minimum_two_diagonal_bowls() {
        // A1 = diag(1,2), c1 = (1,0); A2 = diag(2,1), c2 = (0,1).
        // (A1+A2) x = A1 c1 + A2 c2 gives diag(3,3) x = (1,1), x* = (1/3, 1/3).
        let q = QuadraticEnsemble::new(vec![
            QuadraticClient {
                a: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0])),
                center: DVector::from_vec(vec![1.0, 0.0]),
            },
            QuadraticClient {
                a: DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0])),
                center: DVector::from_vec(vec![0.0, 1.0]),
            },
        ])
        .unwrap();
        let (x, _) = quadratic_minimum(&q).unwrap();
        assert!(x.max_abs_diff(&pv(&[1.0 / 3.0, 1.0 / 3.0])).unwrap() < 1e-14);
    }

    #[test]
    fn quadratic_minimum_rejects_singular() {
        let d = 2;
        let q = QuadraticEnsemble::new(vec![QuadraticClient {
            a: DMatrix::zeros(d, d),
            center: DVector::zeros(d),
        }])
        .unwrap();
        assert!(matches!(
            quadratic_minimum(&q),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn quadratic_smoothness_bound_holds() {
        let l_max = 3.0;
        let q = QuadraticEnsemble::generate(3, 5, 0.2, l_max, 1.0, |m| {
            stream(13, 3, StreamOwner::Client(m as u64), StreamPurpose::DataGeneration)
        })
        .unwrap();
        let mut r = rng(13, 0);
        let batch = dummy_batch(1);
        for _ in 0..10 {
            let u = pv(&(0..5).map(|_| r.random::<f64>() * 4.0 - 2.0).collect::<Vec<_>>());
            let v = pv(&(0..5).map(|_| r.random::<f64>() * 4.0 - 2.0).collect::<Vec<_>>());
            for m in 0..3 {
                let gu = q.grad(m, &u, &batch).unwrap();
                let gv = q.grad(m, &v, &batch).unwrap();
                let lhs = l2_norm_sq(&gu.sub(&gv).unwrap()).sqrt();
                let rhs = l_max * l2_norm_sq(&u.sub(&v).unwrap()).sqrt();
                assert!(lhs <= rhs * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn gradients_are_pure() {
        let sm = SoftmaxRegression::new(3, 4).unwrap();
        let mut r = rng(14, 0);
        let x = pv(&(0..sm.dim()).map(|_| r.random::<f64>() - 0.5).collect::<Vec<_>>());
        let batch = batch_of(vec![vec![0.1, 0.2, 0.3], vec![-1.0, 0.5, 2.0]], vec![1, 3]);
        let a = sm.grad(0, &x, &batch).unwrap();
        let b = sm.grad(0, &x, &batch).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            sm.loss(0, &x, &batch).unwrap().to_bits(),
            sm.loss(0, &x, &batch).unwrap().to_bits()
        );
    }

    #[test]
    fn full_grad_is_mean_of_halves() {
        use crate::data::{gen_synthetic_classification, ClientShard};
        use std::sync::Arc;
        let ds = Arc::new(
            gen_synthetic_classification(3, 2, 10, 0.5, &mut rng(15, 0)).unwrap(),
        );
        let shard = ClientShard::new(Arc::clone(&ds), (0..10).collect());
        let h1 = ClientShard::new(Arc::clone(&ds), (0..5).collect());
        let h2 = ClientShard::new(Arc::clone(&ds), (5..10).collect());
        let sm = SoftmaxRegression::new(3, 2).unwrap();
        let x = sm_init(&sm, 15);
        let full = full_grad(&sm, 0, &x, &shard).unwrap();
        let mut mean = full_grad(&sm, 0, &x, &h1).unwrap();
        mean.add_scaled(1.0, &full_grad(&sm, 0, &x, &h2).unwrap()).unwrap();
        mean.scale(0.5);
        assert!(full.max_abs_diff(&mean).unwrap() < 1e-14);
    }

    fn sm_init(sm: &SoftmaxRegression, seed: u64) -> ParamVector {
        let mut r = rng(seed, 9);
        pv(&(0..sm.dim()).map(|_| r.random::<f64>() - 0.5).collect::<Vec<_>>())
    }

    #[test]
    fn counting_objective_tracks_samples() {
        let sm = SoftmaxRegression::new(2, 2).unwrap();
        let counter = CountingObjective::new(&sm);
        let x = ParamVector::zeros(sm.dim());
        let batch = batch_of(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]], vec![0, 1, 0]);
        counter.grad(0, &x, &batch).unwrap();
        counter.grad(0, &x, &batch).unwrap();
        counter.loss(0, &x, &batch).unwrap();
        assert_eq!(counter.grad_samples(), 6);
    }
}
