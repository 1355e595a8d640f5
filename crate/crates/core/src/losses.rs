//! Composite training objective: prediction, embedding, commitment and
//! separatedness terms.
//!
//! Every term sums over pixels (or bottleneck sites) and averages over the
//! batch. Stop-gradient placement determines which side each term trains:
//!
//! | term    | encoder output | codebook |
//! |---------|----------------|----------|
//! | embed   | no             | yes      |
//! | commit  | yes            | no       |
//! | sep     | no             | yes      |

use serde::{Deserialize, Serialize};

use crate::codebook::QuantizationResult;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_e: f64,
    pub lambda_c: f64,
    pub lambda_s: f64,
    /// Commitment scale.
    pub beta: f64,
    /// Separatedness scale.
    pub gamma: f64,
    /// Separatedness margin.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_e: 1.0,
            lambda_c: 1.0,
            lambda_s: 1.0,
            beta: 0.25,
            gamma: 0.01,
            alpha: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_e", self.lambda_e),
            ("lambda_c", self.lambda_c),
            ("lambda_s", self.lambda_s),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("alpha", self.alpha),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pred: f64,
    pub embed: f64,
    pub commit: f64,
    pub sep: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("pred", self.pred),
            ("embed", self.embed),
            ("commit", self.commit),
            ("sep", self.sep),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

fn check_same<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
}

/// Per-sample sum of squared differences, averaged over the batch.
fn batch_sq_dist<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.f64() - y.f64();
            d * d
        })
        .sum();
    total / a.batch() as f64
}

/// Squared L2 error between prediction and target frame.
pub fn prediction_loss<T: Real>(predicted: &Tensor<T>, target: &Tensor<T>) -> f64 {
    check_same(predicted, target, "prediction_loss");
    batch_sq_dist(predicted, target)
}

pub fn prediction_loss_grad<T: Real>(predicted: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    check_same(predicted, target, "prediction_loss");
    let scale = T::of(2.0 / predicted.batch() as f64);
    let mut g = predicted.clone();
    for (v, &t) in g.data_mut().iter_mut().zip(target.data()) {
        *v = (*v - t) * scale;
    }
    g
}

/// `‖sg(z_e) − z_q‖²`: trains the codebook only.
pub fn embedding_loss<T: Real>(z_e: &Tensor<T>, z_q: &Tensor<T>) -> f64 {
    check_same(z_e, z_q, "embedding_loss");
    batch_sq_dist(z_e, z_q)
}

/// Gradient of the embedding loss w.r.t. codebook entries (`K × D`):
/// `2·(e_k − z_e)` summed over the sites assigned to `k`.
pub fn embedding_loss_codebook_grad<T: Real>(q: &QuantizationResult<T>, size: usize) -> Vec<T> {
    let mut grad = vec![0.0; size * q.z_e.channels()];
    let scale = 2.0 / q.z_e.batch() as f64;
    accumulate_pull(&mut grad, &q.z_e, &q.z_q, &q.nearest, scale, &vec![true; q.sites()]);
    grad.into_iter().map(T::of).collect()
}

/// `β·‖z_e − sg(z_q)‖²`: trains the encoder only.
pub fn commitment_loss<T: Real>(z_e: &Tensor<T>, z_q: &Tensor<T>, beta: f64) -> f64 {
    check_same(z_e, z_q, "commitment_loss");
    beta * batch_sq_dist(z_e, z_q)
}

/// Gradient of the commitment loss w.r.t. the encoder output map.
pub fn commitment_loss_grad<T: Real>(z_e: &Tensor<T>, z_q: &Tensor<T>, beta: f64) -> Tensor<T> {
    check_same(z_e, z_q, "commitment_loss");
    let scale = T::of(2.0 * beta / z_e.batch() as f64);
    let mut g = z_e.clone();
    for (v, &q) in g.data_mut().iter_mut().zip(z_q.data()) {
        *v = (*v - q) * scale;
    }
    g
}

fn site_sq_dists<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<f64> {
    let plane = a.plane();
    let mut out = Vec::with_capacity(a.batch() * plane);
    for s in 0..a.batch() {
        let (x, y) = (a.sample(s), b.sample(s));
        for p in 0..plane {
            out.push(
                (0..a.channels())
                    .map(|c| {
                        let d = x[c * plane + p].f64() - y[c * plane + p].f64();
                        d * d
                    })
                    .sum(),
            );
        }
    }
    out
}

/// Hinge `[‖sg(z_e) − z_q‖² − ‖sg(z_e) − z_n‖² + α]₊` per site, before scaling.
fn hinge_terms<T: Real>(z_e: &Tensor<T>, z_q: &Tensor<T>, z_n: &Tensor<T>, alpha: f64) -> Vec<f64> {
    let pos = site_sq_dists(z_e, z_q);
    let neg = site_sq_dists(z_e, z_n);
    pos.iter().zip(&neg).map(|(p, n)| (p - n + alpha).max(0.0)).collect()
}

/// `γ·[‖sg(z_e) − z_q‖² − ‖sg(z_e) − z_n‖² + α]₊`, summed over sites.
pub fn separatedness_loss<T: Real>(
    z_e: &Tensor<T>,
    z_q: &Tensor<T>,
    z_n: &Tensor<T>,
    gamma: f64,
    alpha: f64,
) -> f64 {
    check_same(z_e, z_q, "separatedness_loss");
    check_same(z_e, z_n, "separatedness_loss");
    gamma * hinge_terms(z_e, z_q, z_n, alpha).iter().sum::<f64>() / z_e.batch() as f64
}

/// Gradient of the separatedness loss w.r.t. codebook entries. At active
/// sites the nearest entry is pulled toward the anchor and the second-nearest
/// pushed away; the anchor itself receives nothing.
pub fn separatedness_loss_codebook_grad<T: Real>(
    q: &QuantizationResult<T>,
    size: usize,
    gamma: f64,
    alpha: f64,
) -> Vec<T> {
    let active: Vec<bool> = hinge_terms(&q.z_e, &q.z_q, &q.z_n, alpha)
        .iter()
        .map(|&h| h > 0.0)
        .collect();
    let mut grad = vec![0.0; size * q.z_e.channels()];
    let scale = 2.0 * gamma / q.z_e.batch() as f64;
    accumulate_pull(&mut grad, &q.z_e, &q.z_q, &q.nearest, scale, &active);
    accumulate_pull(&mut grad, &q.z_e, &q.z_n, &q.second, -scale, &active);
    grad.into_iter().map(T::of).collect()
}

/// `grad[idx[s]] += scale·(e_idx[s] − z_e[s])` over active sites. The entry
/// values are read from `assigned`, the map holding `e_idx[s]` at each site.
fn accumulate_pull<T: Real>(
    grad: &mut [f64],
    z_e: &Tensor<T>,
    assigned: &Tensor<T>,
    idx: &[usize],
    scale: f64,
    active: &[bool],
) {
    let d = z_e.channels();
    let plane = z_e.plane();
    for b in 0..z_e.batch() {
        let (s, e) = (z_e.sample(b), assigned.sample(b));
        for p in 0..plane {
            let site = b * plane + p;
            if !active[site] {
                continue;
            }
            let k = idx[site];
            for c in 0..d {
                let i = c * plane + p;
                grad[k * d + c] += scale * (e[i].f64() - s[i].f64());
            }
        }
    }
}

/// Everything the composite loss reads for one batch.
pub struct LossInputs<'a, T> {
    pub predicted: &'a Tensor<T>,
    pub target: &'a Tensor<T>,
    /// Absent when the bottleneck is not quantized.
    pub quantization: Option<&'a QuantizationResult<T>>,
}

/// Gradients of the weighted total, routed per stop-gradient placement.
#[derive(Clone, Debug)]
pub struct LossGradients<T> {
    pub predicted: Tensor<T>,
    /// Commitment gradient at `z_e`, to be added after the straight-through copy.
    pub encoder_output: Option<Tensor<T>>,
    /// Embedding plus separatedness gradient, `K × D`.
    pub codebook: Option<Vec<T>>,
}

pub fn total_loss<T: Real>(inputs: &LossInputs<'_, T>, weights: &LossWeights) -> LossBreakdown {
    let pred = prediction_loss(inputs.predicted, inputs.target);
    let (embed, commit, sep) = match inputs.quantization {
        Some(q) => {
            let embed = embedding_loss(&q.z_e, &q.z_q);
            // Same value as the embedding term; only the gradient routing differs.
            let commit = weights.beta * embed;
            let sep = separatedness_loss(&q.z_e, &q.z_q, &q.z_n, weights.gamma, weights.alpha);
            (embed, commit, sep)
        }
        None => (0.0, 0.0, 0.0),
    };
    let total = pred + weights.lambda_e * embed + weights.lambda_c * commit + weights.lambda_s * sep;
    LossBreakdown {
        pred,
        embed,
        commit,
        sep,
        total,
    }
}

pub fn total_loss_grads<T: Real>(
    inputs: &LossInputs<'_, T>,
    weights: &LossWeights,
    codebook_size: usize,
) -> LossGradients<T> {
    let predicted = prediction_loss_grad(inputs.predicted, inputs.target);
    let Some(q) = inputs.quantization else {
        return LossGradients {
            predicted,
            encoder_output: None,
            codebook: None,
        };
    };
    let mut enc = commitment_loss_grad(&q.z_e, &q.z_q, weights.beta);
    let lc = T::of(weights.lambda_c);
    enc.data_mut().iter_mut().for_each(|v| *v *= lc);
    let embed = embedding_loss_codebook_grad(q, codebook_size);
    let sep = separatedness_loss_codebook_grad(q, codebook_size, weights.gamma, weights.alpha);
    let (le, ls) = (T::of(weights.lambda_e), T::of(weights.lambda_s));
    let codebook = embed.iter().zip(&sep).map(|(&e, &s)| le * e + ls * s).collect();
    LossGradients {
        predicted,
        encoder_output: Some(enc),
        codebook: Some(codebook),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{codebook_init, Codebook};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn prediction_loss_basic_values() {
        let t = Tensor::<f64>::zeros([1, 3, 2, 2]);
        assert_eq!(prediction_loss(&t, &t), 0.0);
        let p = t.map(|v| v + 1.0);
        assert_eq!(prediction_loss(&p, &t), 12.0);
    }

    #[test]
    fn prediction_loss_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor([3, 3, 4, 5], &mut rng);
        let b = rand_tensor([3, 3, 4, 5], &mut rng);
        let mut oracle = 0.0;
        for i in 0..a.len() {
            oracle += (a.data()[i] - b.data()[i]).powi(2);
        }
        oracle /= 3.0;
        let got = prediction_loss(&a, &b);
        assert!(((got - oracle) / oracle).abs() < 1e-6);
    }

    #[test]
    fn embedding_single_site_gradient() {
        let cb = Codebook::<f64>::from_entries(2, 2, vec![1.0, 0.0, 5.0, 5.0]).unwrap();
        let z = Tensor::from_vec([1, 2, 1, 1], vec![0.0, 0.0]).unwrap();
        let q = cb.quantize(&z).unwrap();
        assert_eq!(embedding_loss(&q.z_e, &q.z_q), 1.0);
        let g = embedding_loss_codebook_grad(&q, 2);
        assert_eq!(g, vec![2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_distance_gives_zero_losses() {
        let cb = codebook_init::<f64>(4, 3, 0, "uniform_small", None).unwrap();
        let z = cb.gather([1, 3, 2, 2], &[0, 1, 2, 3]);
        let q = cb.quantize(&z).unwrap();
        assert_eq!(embedding_loss(&q.z_e, &q.z_q), 0.0);
        assert_eq!(commitment_loss(&q.z_e, &q.z_q, 0.25), 0.0);
        assert!(embedding_loss_codebook_grad(&q, 4).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn commitment_is_beta_times_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cb = codebook_init::<f64>(8, 4, 1, "uniform_small", None).unwrap();
        let q = cb.quantize(&rand_tensor([2, 4, 3, 3], &mut rng)).unwrap();
        let e = embedding_loss(&q.z_e, &q.z_q);
        assert_eq!(commitment_loss(&q.z_e, &q.z_q, 0.25), 0.25 * e);
    }

    #[test]
    fn separatedness_hinge_cases() {
        // Closed hinge: negative is much farther than the positive.
        let zq = Tensor::from_vec([1, 1, 1, 1], vec![0.0f64]).unwrap();
        let zn = Tensor::from_vec([1, 1, 1, 1], vec![10.0f64]).unwrap();
        let ze = Tensor::from_vec([1, 1, 1, 1], vec![0.1f64]).unwrap();
        assert_eq!(separatedness_loss(&ze, &zq, &zn, 0.01, 1.0), 0.0);
        // Degenerate tie: z_q == z_n gives exactly gamma * alpha.
        assert_eq!(separatedness_loss(&ze, &zq, &zq, 0.01, 1.0), 0.01);
    }

    #[test]
    fn separatedness_matches_per_site_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cb = codebook_init::<f64>(16, 4, 2, "uniform_small", None).unwrap();
        let z = rand_tensor([2, 4, 3, 3], &mut rng).map(|v| v * 0.05);
        let q = cb.quantize(&z).unwrap();
        let mut oracle = 0.0;
        for s in 0..q.sites() {
            let (b, p) = (s / 9, s % 9);
            let mut pos = 0.0;
            let mut neg = 0.0;
            for c in 0..4 {
                let ze = z.sample(b)[c * 9 + p];
                pos += (ze - cb.entry(q.nearest[s])[c]).powi(2);
                neg += (ze - cb.entry(q.second[s])[c]).powi(2);
            }
            oracle += 0.01 * (pos - neg + 1.0).max(0.0);
        }
        oracle /= 2.0;
        let got = separatedness_loss(&q.z_e, &q.z_q, &q.z_n, 0.01, 1.0);
        assert!(oracle > 0.0);
        assert!(((got - oracle) / oracle).abs() < 1e-6);
    }

    /// Loss as a function of the codebook with the assignment held fixed.
    fn loss_with_entries(
        cb: &Codebook<f64>,
        q: &QuantizationResult<f64>,
        which: &dyn Fn(&QuantizationResult<f64>) -> f64,
    ) -> f64 {
        let mut q2 = q.clone();
        q2.z_q = cb.gather(q.z_e.shape(), &q.nearest);
        q2.z_n = cb.gather(q.z_e.shape(), &q.second);
        which(&q2)
    }

    #[test]
    fn codebook_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cb = codebook_init::<f64>(8, 3, 3, "uniform_small", None).unwrap();
        let z = rand_tensor([2, 3, 4, 4], &mut rng).map(|v| v * 0.2);
        let q = cb.quantize(&z).unwrap();
        let embed = |q: &QuantizationResult<f64>| embedding_loss(&q.z_e, &q.z_q);
        let sep = |q: &QuantizationResult<f64>| separatedness_loss(&q.z_e, &q.z_q, &q.z_n, 0.01, 1.0);
        let cases: [(&dyn Fn(&QuantizationResult<f64>) -> f64, Vec<f64>); 2] = [
            (&embed, embedding_loss_codebook_grad(&q, 8)),
            (&sep, separatedness_loss_codebook_grad(&q, 8, 0.01, 1.0)),
        ];
        let eps = 1e-6;
        for (f, grad) in cases {
            for i in 0..grad.len() {
                let mut up = cb.clone();
                up.entries.value[i] += eps;
                let mut dn = cb.clone();
                dn.entries.value[i] -= eps;
                let fd = (loss_with_entries(&up, &q, f) - loss_with_entries(&dn, &q, f)) / (2.0 * eps);
                let err = (fd - grad[i]).abs() / fd.abs().max(1e-8);
                assert!(err < 1e-4 || (fd - grad[i]).abs() < 1e-9, "coord {i}: {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn commitment_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ze = rand_tensor([2, 3, 2, 2], &mut rng);
        let zq = rand_tensor([2, 3, 2, 2], &mut rng);
        let g = commitment_loss_grad(&ze, &zq, 0.25);
        let eps = 1e-6;
        for i in 0..ze.len() {
            let mut up = ze.clone();
            up.data_mut()[i] += eps;
            let mut dn = ze.clone();
            dn.data_mut()[i] -= eps;
            let fd = (commitment_loss(&up, &zq, 0.25) - commitment_loss(&dn, &zq, 0.25)) / (2.0 * eps);
            assert!((fd - g.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn total_with_only_prediction_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cb = codebook_init::<f64>(8, 2, 0, "uniform_small", None).unwrap();
        let q = cb.quantize(&rand_tensor([1, 2, 2, 2], &mut rng)).unwrap();
        let p = rand_tensor([1, 3, 4, 4], &mut rng);
        let t = rand_tensor([1, 3, 4, 4], &mut rng);
        let w = LossWeights {
            lambda_e: 0.0,
            lambda_c: 0.0,
            lambda_s: 0.0,
            ..LossWeights::default()
        };
        let inputs = LossInputs {
            predicted: &p,
            target: &t,
            quantization: Some(&q),
        };
        let b = total_loss(&inputs, &w);
        assert_eq!(b.total, b.pred);
        let grads = total_loss_grads(&inputs, &w, 8);
        assert!(grads.encoder_output.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.codebook.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            gamma: -1.0,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn breakdown_names_non_finite_term() {
        let b = LossBreakdown {
            sep: f64::NAN,
            ..LossBreakdown::default()
        };
        assert_eq!(b.non_finite_term(), Some("sep"));
    }
}
