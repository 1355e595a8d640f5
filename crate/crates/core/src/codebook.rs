//! Learnable discrete codebook and nearest-entry quantization.

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Param, Parameters};
use crate::registry::{Registry, Strategy};
use crate::tensor::{Real, Tensor};

/// `K` embedding vectors of dimension `D`, stored row-major.
#[derive(Clone, Debug)]
pub struct Codebook<T> {
    pub entries: Param<T>,
    size: usize,
    dim: usize,
    usage: Vec<u64>,
}

/// Per-site quantization of an encoder map `z_e` of shape `B × D × H × W`.
///
/// Sites are numbered `(b·H + y)·W + x`.
#[derive(Clone, Debug)]
pub struct QuantizationResult<T> {
    pub z_e: Tensor<T>,
    pub z_q: Tensor<T>,
    /// Second-nearest entries, the negatives of the separatedness term.
    pub z_n: Tensor<T>,
    pub nearest: Vec<usize>,
    pub second: Vec<usize>,
    pub nearest_dist: Vec<f64>,
    pub second_dist: Vec<f64>,
}

impl<T> QuantizationResult<T> {
    pub fn sites(&self) -> usize {
        self.nearest.len()
    }
}

impl<T: Real> Codebook<T> {
    pub fn from_entries(size: usize, dim: usize, entries: Vec<T>) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!(
                "codebook needs at least 2 entries, got {size}"
            )));
        }
        if dim == 0 || entries.len() != size * dim {
            return Err(Error::Shape(format!(
                "codebook {size}×{dim} from {} values",
                entries.len()
            )));
        }
        if !entries.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("codebook entries".into()));
        }
        Ok(Self {
            entries: Param::new(vec![size, dim], entries),
            size,
            dim,
            usage: vec![0; size],
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, i: usize) -> &[T] {
        &self.entries.value[i * self.dim..(i + 1) * self.dim]
    }

    pub fn usage_counts(&self) -> &[u64] {
        &self.usage
    }

    pub fn set_usage_counts(&mut self, usage: Vec<u64>) -> Result<()> {
        if usage.len() != self.size {
            return Err(Error::Shape(format!(
                "{} usage counts for {} entries",
                usage.len(),
                self.size
            )));
        }
        self.usage = usage;
        Ok(())
    }

    pub fn record_usage(&mut self, q: &QuantizationResult<T>) {
        for &k in &q.nearest {
            self.usage[k] += 1;
        }
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    /// Entries used at least once since the last reset.
    pub fn utilization(&self) -> usize {
        self.usage.iter().filter(|&&u| u > 0).count()
    }

    /// Nearest and second-nearest entry per site under squared Euclidean
    /// distance, accumulated in `f64`. Ties go to the lower index.
    pub fn quantize(&self, z_e: &Tensor<T>) -> Result<QuantizationResult<T>> {
        if z_e.channels() != self.dim {
            return Err(Error::Shape(format!(
                "feature dimension {} does not match codebook dimension {}",
                z_e.channels(),
                self.dim
            )));
        }
        if !z_e.all_finite() {
            return Err(Error::NonFinite("encoder features".into()));
        }
        let plane = z_e.plane();
        let sites = z_e.batch() * plane;
        let mut nearest = Vec::with_capacity(sites);
        let mut second = Vec::with_capacity(sites);
        let mut nearest_dist = Vec::with_capacity(sites);
        let mut second_dist = Vec::with_capacity(sites);
        let entries: Vec<f64> = self.entries.value.iter().map(|v| v.f64()).collect();
        let mut feature = vec![0.0f64; self.dim];
        for b in 0..z_e.batch() {
            let sample = z_e.sample(b);
            for p in 0..plane {
                for (c, f) in feature.iter_mut().enumerate() {
                    *f = sample[c * plane + p].f64();
                }
                let (mut i1, mut d1) = (usize::MAX, f64::INFINITY);
                let (mut i2, mut d2) = (usize::MAX, f64::INFINITY);
                for (j, e) in entries.chunks_exact(self.dim).enumerate() {
                    let d: f64 = feature.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < d1 {
                        (i2, d2) = (i1, d1);
                        (i1, d1) = (j, d);
                    } else if d < d2 {
                        (i2, d2) = (j, d);
                    }
                }
                nearest.push(i1);
                second.push(i2);
                nearest_dist.push(d1);
                second_dist.push(d2);
            }
        }
        let z_q = self.gather(z_e.shape(), &nearest);
        let z_n = self.gather(z_e.shape(), &second);
        Ok(QuantizationResult {
            z_e: z_e.clone(),
            z_q,
            z_n,
            nearest,
            second,
            nearest_dist,
            second_dist,
        })
    }

    /// Builds a `B × D × H × W` map whose site vectors are the given entries.
    pub fn gather(&self, shape: [usize; 4], indices: &[usize]) -> Tensor<T> {
        let mut out = Tensor::zeros(shape);
        let plane = shape[2] * shape[3];
        for b in 0..shape[0] {
            let dst = out.sample_mut(b);
            for p in 0..plane {
                let e = self.entry(indices[b * plane + p]);
                for c in 0..self.dim {
                    dst[c * plane + p] = e[c];
                }
            }
        }
        out
    }

    /// CSV dump: `index,usage,e0,...,e{D-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("index,usage");
        for c in 0..self.dim {
            out.push_str(&format!(",e{c}"));
        }
        out.push('\n');
        for i in 0..self.size {
            out.push_str(&format!("{i},{}", self.usage[i]));
            for v in self.entry(i) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

impl<T: Real> Parameters<T> for Codebook<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "entries"), &mut self.entries);
    }
}

/// Forward value of the straight-through estimator: the quantized map.
pub fn straight_through<T: Real>(q: &QuantizationResult<T>) -> Tensor<T> {
    q.z_q.clone()
}

/// Backward rule of the straight-through estimator: the gradient arriving at
/// the quantized map is handed to the encoder output unchanged. Nothing flows
/// to the codebook along this path.
pub fn straight_through_grad<T: Real>(grad_at_quantized: &Tensor<T>) -> Tensor<T> {
    grad_at_quantized.clone()
}

/// Flattens a `B × D × H × W` map into one `D`-vector per site.
pub fn site_vectors<T: Real>(z: &Tensor<T>) -> Vec<Vec<f64>> {
    let plane = z.plane();
    let mut out = Vec::with_capacity(z.batch() * plane);
    for b in 0..z.batch() {
        let s = z.sample(b);
        for p in 0..plane {
            out.push((0..z.channels()).map(|c| s[c * plane + p].f64()).collect());
        }
    }
    out
}

pub trait CodebookInit: Strategy {
    /// Whether `initialize` requires encoder features.
    fn needs_features(&self) -> bool {
        false
    }

    /// Returns `size × dim` values, row-major.
    fn initialize(
        &self,
        size: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
        observed: Option<&[Vec<f64>]>,
    ) -> Result<Vec<f64>>;
}

/// I.i.d. uniform in `[-1/K, 1/K]`.
pub struct UniformSmall;

impl Strategy for UniformSmall {
    fn name(&self) -> &'static str {
        "uniform_small"
    }

    fn describe(&self) -> &'static str {
        "entries i.i.d. uniform in [-1/K, 1/K]"
    }
}

impl CodebookInit for UniformSmall {
    fn initialize(
        &self,
        size: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
        _observed: Option<&[Vec<f64>]>,
    ) -> Result<Vec<f64>> {
        let bound = 1.0 / size as f64;
        Ok((0..size * dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect())
    }
}

/// Entries copied from encoder feature vectors of one training batch.
pub struct DataDriven;

impl Strategy for DataDriven {
    fn name(&self) -> &'static str {
        "data_driven"
    }

    fn describe(&self) -> &'static str {
        "entries sampled from encoder features of one training batch"
    }
}

impl CodebookInit for DataDriven {
    fn needs_features(&self) -> bool {
        true
    }

    fn initialize(
        &self,
        size: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
        observed: Option<&[Vec<f64>]>,
    ) -> Result<Vec<f64>> {
        let observed = observed
            .filter(|o| !o.is_empty())
            .ok_or_else(|| Error::Config("data_driven init needs encoder features".into()))?;
        if observed.iter().any(|v| v.len() != dim) {
            return Err(Error::Shape(format!("observed features are not {dim}-dimensional")));
        }
        let picks: Vec<usize> = if observed.len() >= size {
            index::sample(rng, observed.len(), size).into_vec()
        } else {
            (0..size).map(|_| rng.random_range(0..observed.len())).collect()
        };
        Ok(picks.into_iter().flat_map(|i| observed[i].iter().copied()).collect())
    }
}

pub fn registry() -> &'static Registry<dyn CodebookInit> {
    static REG: OnceLock<Registry<dyn CodebookInit>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut reg: Registry<dyn CodebookInit> = Registry::new("codebook init");
        reg.register(Box::new(UniformSmall)).register(Box::new(DataDriven));
        reg
    })
}

/// Creates a codebook with the named scheme, deterministic per seed.
pub fn codebook_init<T: Real>(
    size: usize,
    dim: usize,
    seed: u64,
    scheme: &str,
    observed: Option<&[Vec<f64>]>,
) -> Result<Codebook<T>> {
    if size < 2 || dim == 0 {
        return Err(Error::Config(format!("invalid codebook shape {size}×{dim}")));
    }
    let init = registry().get(scheme)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = init.initialize(size, dim, &mut rng, observed)?;
    Codebook::from_entries(size, dim, values.into_iter().map(T::of).collect())
}
