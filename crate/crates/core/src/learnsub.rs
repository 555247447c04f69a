//! Small neural-network substrate: tanh MLPs with explicit backpropagation,
//! Adam, input/output standardization, and text checkpoints.  Gradients are
//! taken with respect to an arbitrary output cotangent so both regression
//! losses and policy-gradient objectives can reuse the same backward pass.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty dataset")]
    EmptyDataset,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    /// (outputs x inputs).
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Fully-connected network, tanh on hidden layers, linear output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Per-layer parameter gradients, aligned with [`Mlp::layers`].
#[derive(Debug, Clone)]
pub struct MlpGrad {
    pub dw: Vec<DMatrix<f64>>,
    pub db: Vec<DVector<f64>>,
}

impl MlpGrad {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrad {
            dw: net
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.w.nrows(), l.w.ncols()))
                .collect(),
            db: net.layers.iter().map(|l| DVector::zeros(l.b.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrad) {
        for (a, b) in self.dw.iter_mut().zip(&other.dw) {
            *a += b;
        }
        for (a, b) in self.db.iter_mut().zip(&other.db) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.dw.iter_mut() {
            *a *= s;
        }
        for a in self.db.iter_mut() {
            *a *= s;
        }
    }
}

impl Mlp {
    /// Xavier-initialized network with the given layer sizes
    /// (inputs, hidden..., outputs).
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for pair in sizes.windows(2) {
            let (n_in, n_out) = (pair[0], pair[1]);
            let scale = (6.0 / (n_in + n_out) as f64).sqrt();
            let w = DMatrix::from_fn(n_out, n_in, |_, _| rng.gen_range(-scale..scale));
            layers.push(Layer {
                w,
                b: DVector::zeros(n_out),
            });
        }
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map(|l| l.w.ncols()).unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.w.nrows()).unwrap_or(0)
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = &layer.w * h + &layer.b;
            if i != last {
                h.apply(|v| *v = v.tanh());
            }
        }
        h
    }

    pub fn forward_batch(&self, xs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        xs.iter().map(|x| self.forward(x)).collect()
    }

    /// Backward pass for one sample: given dL/dy at the output, returns the
    /// parameter gradients and dL/dx.
    pub fn backprop(&self, x: &DVector<f64>, dl_dy: &DVector<f64>) -> (MlpGrad, DVector<f64>) {
        let last = self.layers.len() - 1;
        // Forward with cached post-activation values per layer input.
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(h.clone());
            h = &layer.w * h + &layer.b;
            if i != last {
                h.apply(|v| *v = v.tanh());
            }
        }
        let mut grad = MlpGrad::zeros_like(self);
        let mut delta = dl_dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i != last {
                // h_i = tanh(z_i) was cached as the next layer's input.
                let act = &inputs[i + 1];
                for (d, a) in delta.iter_mut().zip(act.iter()) {
                    *d *= 1.0 - a * a;
                }
            }
            grad.dw[i] = &delta * inputs[i].transpose();
            grad.db[i] = delta.clone();
            delta = self.layers[i].w.transpose() * delta;
        }
        (grad, delta)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// All parameters as one flat vector (per layer: weights column-major,
    /// then biases), for perturbation-based optimizers.
    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        DVector::from_vec(out)
    }

    /// Overwrites all parameters from a flat vector laid out as
    /// [`flatten`] produces.
    pub fn assign_flat(&mut self, v: &DVector<f64>) {
        assert_eq!(v.len(), self.param_count(), "parameter count mismatch");
        let mut k = 0;
        for l in &mut self.layers {
            for w in l.w.iter_mut() {
                *w = v[k];
                k += 1;
            }
            for b in l.b.iter_mut() {
                *b = v[k];
                k += 1;
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), LearnError> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LearnError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Mean-squared-error loss over a batch; returns the loss and per-sample
/// output cotangents (2 (y - t) / n).
pub fn mse_loss(ys: &[DVector<f64>], ts: &[DVector<f64>]) -> (f64, Vec<DVector<f64>>) {
    let n = ys.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(ys.len());
    for (y, t) in ys.iter().zip(ts) {
        let diff = y - t;
        loss += diff.norm_squared();
        grads.push(diff * (2.0 / n));
    }
    (loss / n, grads)
}

/// Adam optimizer state aligned with an [`Mlp`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: usize,
    mw: Vec<DMatrix<f64>>,
    vw: Vec<DMatrix<f64>>,
    mb: Vec<DVector<f64>>,
    vb: Vec<DVector<f64>>,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            mw: net
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.w.nrows(), l.w.ncols()))
                .collect(),
            vw: net
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.w.nrows(), l.w.ncols()))
                .collect(),
            mb: net.layers.iter().map(|l| DVector::zeros(l.b.len())).collect(),
            vb: net.layers.iter().map(|l| DVector::zeros(l.b.len())).collect(),
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grad: &MlpGrad) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..net.layers.len() {
            for ((w, g), (m, v)) in net.layers[i]
                .w
                .iter_mut()
                .zip(grad.dw[i].iter())
                .zip(self.mw[i].iter_mut().zip(self.vw[i].iter_mut()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / b1t) / ((*v / b2t).sqrt() + self.eps);
            }
            for ((b, g), (m, v)) in net.layers[i]
                .b
                .iter_mut()
                .zip(grad.db[i].iter())
                .zip(self.mb[i].iter_mut().zip(self.vb[i].iter_mut()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *b -= self.lr * (*m / b1t) / ((*v / b2t).sqrt() + self.eps);
            }
        }
    }
}

/// Per-dimension affine standardizer (zero mean, unit variance).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
}

impl Standardizer {
    pub fn fit(samples: &[DVector<f64>]) -> Result<Self, LearnError> {
        let first = samples.first().ok_or(LearnError::EmptyDataset)?;
        let dim = first.len();
        let n = samples.len() as f64;
        let mut mean = DVector::zeros(dim);
        for s in samples {
            mean += s;
        }
        mean /= n;
        let mut var = DVector::zeros(dim);
        for s in samples {
            let d = s - &mean;
            var += d.component_mul(&d);
        }
        var /= n;
        let std = var.map(|v| v.sqrt().max(1e-8));
        Ok(Standardizer { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: DVector::zeros(dim),
            std: DVector::from_element(dim, 1.0),
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        (x - &self.mean).component_div(&self.std)
    }

    pub fn invert(&self, z: &DVector<f64>) -> DVector<f64> {
        z.component_mul(&self.std) + &self.mean
    }
}

/// A regression model: standardizers on both ends of an MLP.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Regressor {
    pub x_norm: Standardizer,
    pub y_norm: Standardizer,
    pub net: Mlp,
}

impl Regressor {
    pub fn predict(&self, x: &DVector<f64>) -> DVector<f64> {
        self.y_norm.invert(&self.net.forward(&self.x_norm.apply(x)))
    }

    pub fn save(&self, path: &Path) -> Result<(), LearnError> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LearnError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: vec![64, 64],
            lr: 1e-3,
            epochs: 60,
            batch_size: 64,
        }
    }
}

/// Trains a standardized regressor with Adam on minibatched MSE.  Returns
/// the model and the final-epoch training loss (standardized units).
pub fn train_regressor<R: Rng>(
    xs: &[DVector<f64>],
    ys: &[DVector<f64>],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Regressor, f64), LearnError> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(LearnError::EmptyDataset);
    }
    let x_norm = Standardizer::fit(xs)?;
    let y_norm = Standardizer::fit(ys)?;
    let zx: Vec<DVector<f64>> = xs.iter().map(|x| x_norm.apply(x)).collect();
    let zy: Vec<DVector<f64>> = ys.iter().map(|y| y_norm.apply(y)).collect();
    let mut sizes = vec![zx[0].len()];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(zy[0].len());
    let mut net = Mlp::new(&sizes, rng);
    let mut opt = Adam::new(&net, cfg.lr);
    let mut order: Vec<usize> = (0..zx.len()).collect();
    let mut last_loss = f64::INFINITY;
    for _ in 0..cfg.epochs {
        // Fisher-Yates shuffle from the caller's RNG for determinism.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0.0_f64;
        for chunk in order.chunks(cfg.batch_size) {
            let bs = chunk.len() as f64;
            let mut grad = MlpGrad::zeros_like(&net);
            let mut loss = 0.0;
            for &idx in chunk {
                let y = net.forward(&zx[idx]);
                let diff = &y - &zy[idx];
                loss += diff.norm_squared();
                let (g, _) = net.backprop(&zx[idx], &(diff * (2.0 / bs)));
                grad.add_assign(&g);
            }
            opt.step(&mut net, &grad);
            epoch_loss += loss / bs;
            batches += 1.0;
        }
        last_loss = epoch_loss / batches.max(1.0);
    }
    Ok((
        Regressor {
            x_norm,
            y_norm,
            net,
        },
        last_loss,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_loss(net: &Mlp, x: &DVector<f64>, c: &DVector<f64>) -> f64 {
        net.forward(x).dot(c)
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::new(&[4, 8, 5, 3], &mut rng);
        let x = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        let c = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let (grad, dx) = net.backprop(&x, &c);
        let h = 1e-6;
        // Weight and bias gradients against central differences.
        for li in 0..net.layers.len() {
            for r in 0..net.layers[li].w.nrows() {
                for cc in 0..net.layers[li].w.ncols() {
                    let orig = net.layers[li].w[(r, cc)];
                    net.layers[li].w[(r, cc)] = orig + h;
                    let lp = scalar_loss(&net, &x, &c);
                    net.layers[li].w[(r, cc)] = orig - h;
                    let lm = scalar_loss(&net, &x, &c);
                    net.layers[li].w[(r, cc)] = orig;
                    let fd = (lp - lm) / (2.0 * h);
                    assert!(
                        (fd - grad.dw[li][(r, cc)]).abs() <= 1e-4,
                        "dW[{}][{},{}]: fd={} bp={}",
                        li,
                        r,
                        cc,
                        fd,
                        grad.dw[li][(r, cc)]
                    );
                }
            }
            for r in 0..net.layers[li].b.len() {
                let orig = net.layers[li].b[r];
                net.layers[li].b[r] = orig + h;
                let lp = scalar_loss(&net, &x, &c);
                net.layers[li].b[r] = orig - h;
                let lm = scalar_loss(&net, &x, &c);
                net.layers[li].b[r] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - grad.db[li][r]).abs() <= 1e-4);
            }
        }
        // Input gradient.
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (scalar_loss(&net, &xp, &c) - scalar_loss(&net, &xm, &c)) / (2.0 * h);
            assert!((fd - dx[i]).abs() <= 1e-4, "dx[{}]: fd={} bp={}", i, fd, dx[i]);
        }
    }

    #[test]
    fn adam_fits_a_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<DVector<f64>> = (0..256)
            .map(|_| DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let ys: Vec<DVector<f64>> = xs
            .iter()
            .map(|x| DVector::from_row_slice(&[1.5 * x[0] - 0.5 * x[1] + 0.2, x[0] * 0.3]))
            .collect();
        let cfg = TrainConfig {
            hidden: vec![16],
            lr: 1e-2,
            epochs: 200,
            batch_size: 32,
        };
        let (model, loss) = train_regressor(&xs, &ys, &cfg, &mut rng).unwrap();
        assert!(loss < 1e-3, "final loss {}", loss);
        let probe = DVector::from_row_slice(&[0.4, -0.3]);
        let pred = model.predict(&probe);
        assert!((pred[0] - (1.5 * 0.4 + 0.15 + 0.2)).abs() < 0.05);
    }

    #[test]
    fn standardizer_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<DVector<f64>> = (0..100)
            .map(|_| DVector::from_fn(3, |_, _| rng.gen_range(-5.0..9.0)))
            .collect();
        let s = Standardizer::fit(&xs).unwrap();
        for x in &xs {
            let z = s.apply(x);
            let back = s.invert(&z);
            assert!((x - back).norm() <= 1e-9);
        }
        // Standardized data has zero mean and unit variance per dimension.
        let zs: Vec<DVector<f64>> = xs.iter().map(|x| s.apply(x)).collect();
        let refit = Standardizer::fit(&zs).unwrap();
        assert!(refit.mean.norm() <= 1e-9);
        assert!((refit.std - DVector::from_element(3, 1.0)).norm() <= 1e-6);
    }

    #[test]
    fn checkpoint_round_trips_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::new(&[3, 7, 2], &mut rng);
        let dir = std::env::temp_dir().join("ttlab_learnsub_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.json");
        net.save(&path).unwrap();
        let back = Mlp::load(&path).unwrap();
        for (a, b) in net.layers.iter().zip(&back.layers) {
            assert_eq!(a.w, b.w);
            assert_eq!(a.b, b.b);
        }
        let x = DVector::from_row_slice(&[0.1, -0.2, 0.3]);
        assert_eq!(net.forward(&x), back.forward(&x));
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let xs: Vec<DVector<f64>> = (0..64)
            .map(|i| DVector::from_row_slice(&[i as f64 / 64.0]))
            .collect();
        let ys: Vec<DVector<f64>> = xs.iter().map(|x| x.map(|v| (3.0 * v).sin())).collect();
        let cfg = TrainConfig {
            hidden: vec![8],
            lr: 1e-2,
            epochs: 10,
            batch_size: 16,
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            train_regressor(&xs, &ys, &cfg, &mut rng).unwrap()
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        let probe = DVector::from_row_slice(&[0.5]);
        assert_eq!(a.predict(&probe), b.predict(&probe));
    }
}
