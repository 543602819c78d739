//! Part shape prior: a variational auto-encoder over primitive surfaces whose
//! decoder becomes the frozen prior MLP.
//!
//! Training targets are primitives (spheres, ellipsoids, capped cylinders,
//! cones and blends of two of them) sampled on the shared sphere grid by
//! radial projection, so vertex `k` of every target corresponds to sphere
//! direction `k`.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bundle::TensorBundle;
use crate::error::{LassieError, Result};
use crate::geom::Vec3;
use crate::losses::{laplacian_loss, normal_loss};
use crate::optim::{adam_step, AdamState};
use crate::parts::{
    encode_points, mlp_backward, mlp_forward, points_to_rows, rows_to_points, symmetrize, MlpParams,
    SphereTopology, MLP_TENSORS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Sphere { radius: f64 },
    Ellipsoid { axes: [f64; 3] },
    /// Capped cylinder along `y`; `height` is the half-length.
    Cylinder { radius: f64, height: f64 },
    /// Cone along `y` with its apex at `+height` and base at `-height`.
    Cone { radius: f64, height: f64 },
    /// `(1 - weight) * a + weight * b`, pointwise on the shared grid.
    Blend {
        a: Box<Primitive>,
        b: Box<Primitive>,
        weight: f64,
    },
}

fn in_range(name: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if v.is_finite() && (lo..=hi).contains(&v) {
        Ok(())
    } else {
        Err(LassieError::InvalidParameter(format!(
            "{name} = {v} outside [{lo}, {hi}]"
        )))
    }
}

impl Primitive {
    pub fn kind(&self) -> &'static str {
        match self {
            Primitive::Sphere { .. } => "sphere",
            Primitive::Ellipsoid { .. } => "ellipsoid",
            Primitive::Cylinder { .. } => "cylinder",
            Primitive::Cone { .. } => "cone",
            Primitive::Blend { .. } => "blend",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Primitive::Sphere { radius } => in_range("sphere radius", *radius, 0.2, 1.0),
            Primitive::Ellipsoid { axes } => {
                for a in axes {
                    in_range("ellipsoid axis scale", *a, 0.2, 1.0)?;
                }
                Ok(())
            }
            Primitive::Cylinder { radius, height } | Primitive::Cone { radius, height } => {
                in_range("radius", *radius, 0.1, 0.5)?;
                in_range("height", *height, 0.4, 1.0)
            }
            Primitive::Blend { a, b, weight } => {
                if matches!(**a, Primitive::Blend { .. }) || matches!(**b, Primitive::Blend { .. }) {
                    return Err(LassieError::InvalidParameter("blends cannot be nested".into()));
                }
                a.validate()?;
                b.validate()?;
                in_range("blend weight", *weight, 0.0, 1.0)
            }
        }
    }

    /// Surface point along a unit sphere direction.
    pub fn surface_point(&self, d: &Vec3) -> Vec3 {
        match self {
            Primitive::Sphere { radius } => d * *radius,
            Primitive::Ellipsoid { axes } => Vec3::new(axes[0] * d.x, axes[1] * d.y, axes[2] * d.z),
            Primitive::Cylinder { radius, height } => {
                let rho = (d.x * d.x + d.z * d.z).sqrt();
                let mut t = f64::INFINITY;
                if rho > 0.0 {
                    t = t.min(radius / rho);
                }
                if d.y != 0.0 {
                    t = t.min(height / d.y.abs());
                }
                d * t
            }
            Primitive::Cone { radius, height } => {
                let rho = (d.x * d.x + d.z * d.z).sqrt();
                let mut t = f64::INFINITY;
                let side = 2.0 * height * rho + radius * d.y;
                if side > 0.0 {
                    t = t.min(radius * height / side);
                }
                if d.y < 0.0 {
                    t = t.min(height / -d.y);
                }
                d * t
            }
            Primitive::Blend { a, b, weight } => {
                a.surface_point(d) * (1.0 - weight) + b.surface_point(d) * *weight
            }
        }
    }

    fn random_simple<R: Rng + ?Sized>(rng: &mut R) -> Self {
        match rng.random_range(0..4) {
            0 => Primitive::Sphere {
                radius: rng.random_range(0.2..=1.0),
            },
            1 => Primitive::Ellipsoid {
                axes: [
                    rng.random_range(0.2..=1.0),
                    rng.random_range(0.2..=1.0),
                    rng.random_range(0.2..=1.0),
                ],
            },
            2 => Primitive::Cylinder {
                radius: rng.random_range(0.1..=0.5),
                height: rng.random_range(0.4..=1.0),
            },
            _ => Primitive::Cone {
                radius: rng.random_range(0.1..=0.5),
                height: rng.random_range(0.4..=1.0),
            },
        }
    }

    /// Draws a primitive with parameters uniform over their documented ranges;
    /// one in five samples is a blend of two simple primitives.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        if rng.random_range(0..5) == 0 {
            Primitive::Blend {
                a: Box::new(Self::random_simple(rng)),
                b: Box::new(Self::random_simple(rng)),
                weight: rng.random_range(0.0..=1.0),
            }
        } else {
            Self::random_simple(rng)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveSample {
    pub primitive: Primitive,
    pub points: Vec<Vec3>,
}

pub fn gen_primitive(primitive: &Primitive, topology: &SphereTopology) -> Result<PrimitiveSample> {
    primitive.validate()?;
    Ok(PrimitiveSample {
        primitive: primitive.clone(),
        points: topology.vertices.iter().map(|d| primitive.surface_point(d)).collect(),
    })
}

pub fn gen_dataset(count: usize, topology: &SphereTopology, seed: u64) -> Result<Vec<PrimitiveSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| gen_primitive(&Primitive::random(&mut rng), topology))
        .collect()
}

/// Per-point MLP, max-pool, then linear mean and log-variance heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEncoder {
    pub slope: f64,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub wm: Array2<f64>,
    pub bm: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
}

const ENCODER_TENSORS: [&str; 8] = ["w1", "b1", "w2", "b2", "wm", "bm", "wv", "bv"];

fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

pub struct EncoderCache {
    input: Array2<f64>,
    pre1: Array2<f64>,
    act1: Array2<f64>,
    pre2: Array2<f64>,
    pooled: Array1<f64>,
    argmax: Vec<usize>,
}

impl PointEncoder {
    pub fn init<R: Rng + ?Sized>(widths: [usize; 2], latent: usize, rng: &mut R) -> Self {
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
        };
        let (w1, w2) = (uniform(3, widths[0]), uniform(widths[0], widths[1]));
        let (wm, wv) = (uniform(widths[1], latent), uniform(widths[1], latent));
        Self {
            slope: 0.01,
            w1,
            b1: Array1::zeros(widths[0]),
            w2,
            b2: Array1::zeros(widths[1]),
            wm,
            bm: Array1::zeros(latent),
            wv,
            bv: Array1::zeros(latent),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.bm.len()
    }

    pub fn widths(&self) -> [usize; 2] {
        [self.b1.len(), self.b2.len()]
    }

    fn slices(&self) -> [&[f64]; 8] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.wm.as_slice().expect("standard layout"),
            self.bm.as_slice().expect("standard layout"),
            self.wv.as_slice().expect("standard layout"),
            self.bv.as_slice().expect("standard layout"),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.wm.as_slice_mut().expect("standard layout"),
            self.bm.as_slice_mut().expect("standard layout"),
            self.wv.as_slice_mut().expect("standard layout"),
            self.bv.as_slice_mut().expect("standard layout"),
        ]
    }

    fn shapes(&self) -> [Vec<usize>; 8] {
        let [a, b] = self.widths();
        let d = self.latent_dim();
        [
            vec![3, a],
            vec![a],
            vec![a, b],
            vec![b],
            vec![b, d],
            vec![d],
            vec![b, d],
            vec![d],
        ]
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for s in self.slices() {
            out.extend_from_slice(s);
        }
    }

    pub fn read_flat(&mut self, src: &[f64]) -> usize {
        let mut at = 0;
        for dst in self.slices_mut() {
            let n = dst.len();
            dst.copy_from_slice(&src[at..at + n]);
            at += n;
        }
        at
    }

    pub fn forward(&self, points: &[Vec3]) -> (Vec<f64>, Vec<f64>, EncoderCache) {
        let input = points_to_rows(points);
        let pre1 = input.dot(&self.w1) + &self.b1;
        let act1 = pre1.mapv(|v| leaky(v, self.slope));
        let pre2 = act1.dot(&self.w2) + &self.b2;
        let act2 = pre2.mapv(|v| leaky(v, self.slope));
        let width = act2.ncols();
        let mut pooled = Array1::from_elem(width, f64::NEG_INFINITY);
        let mut argmax = vec![0; width];
        for (i, row) in act2.axis_iter(Axis(0)).enumerate() {
            for c in 0..width {
                if row[c] > pooled[c] {
                    pooled[c] = row[c];
                    argmax[c] = i;
                }
            }
        }
        let mu = pooled.dot(&self.wm) + &self.bm;
        let lv = pooled.dot(&self.wv) + &self.bv;
        (
            mu.to_vec(),
            lv.to_vec(),
            EncoderCache {
                input,
                pre1,
                act1,
                pre2,
                pooled,
                argmax,
            },
        )
    }

    pub fn backward(&self, cache: &EncoderCache, g_mu: &[f64], g_lv: &[f64]) -> PointEncoder {
        let g_mu = Array1::from_vec(g_mu.to_vec());
        let g_lv = Array1::from_vec(g_lv.to_vec());
        let mut g = self.clone();
        g.wm = Array2::from_shape_fn(self.wm.dim(), |(i, j)| cache.pooled[i] * g_mu[j]);
        g.bm = g_mu.clone();
        g.wv = Array2::from_shape_fn(self.wv.dim(), |(i, j)| cache.pooled[i] * g_lv[j]);
        g.bv = g_lv.clone();
        let g_pooled = self.wm.dot(&g_mu) + self.wv.dot(&g_lv);
        let mut g_pre2 = Array2::<f64>::zeros(cache.pre2.dim());
        for (c, &i) in cache.argmax.iter().enumerate() {
            let z = cache.pre2[[i, c]];
            g_pre2[[i, c]] = if z > 0.0 { g_pooled[c] } else { self.slope * g_pooled[c] };
        }
        g.w2 = cache.act1.t().dot(&g_pre2).as_standard_layout().into_owned();
        g.b2 = g_pre2.sum_axis(Axis(0));
        let g_act1 = g_pre2.dot(&self.w2.t());
        let g_pre1 = ndarray::Zip::from(&g_act1)
            .and(&cache.pre1)
            .map_collect(|&ga, &z| if z > 0.0 { ga } else { self.slope * ga });
        g.w1 = cache.input.t().dot(&g_pre1).as_standard_layout().into_owned();
        g.b1 = g_pre1.sum_axis(Axis(0));
        g
    }
}

/// Closed-form `KL(N(mu, exp(lv)) || N(0, I))` and its gradients.
pub fn kl_divergence(mu: &[f64], lv: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let mut kl = 0.0;
    let mut g_mu = Vec::with_capacity(mu.len());
    let mut g_lv = Vec::with_capacity(lv.len());
    for (&m, &l) in mu.iter().zip(lv) {
        kl += -0.5 * (1.0 + l - m * m - l.exp());
        g_mu.push(m);
        g_lv.push(0.5 * (l.exp() - 1.0));
    }
    (kl, g_mu, g_lv)
}

/// Monte-Carlo estimate of the same divergence, `E_q[log q(z) - log p(z)]`.
pub fn kl_monte_carlo<R: Rng + ?Sized>(mu: &[f64], lv: &[f64], samples: usize, rng: &mut R) -> f64 {
    let mut acc = 0.0;
    for _ in 0..samples {
        let mut log_ratio = 0.0;
        for (&m, &l) in mu.iter().zip(lv) {
            let eps: f64 = rng.sample(StandardNormal);
            let z = m + (0.5 * l).exp() * eps;
            // log q - log p; the 2*pi terms cancel.
            log_ratio += -0.5 * l - 0.5 * eps * eps + 0.5 * z * z;
        }
        acc += log_ratio;
    }
    acc / samples as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub encoder_widths: [usize; 2],
    pub beta: f64,
    pub lap_weight: f64,
    pub norm_weight: f64,
    pub samples: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            hidden: 256,
            encoder_widths: [64, 128],
            beta: 1e-3,
            lap_weight: 0.01,
            norm_weight: 0.001,
            samples: 2000,
            epochs: 200,
            batch: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub encoder: PointEncoder,
    pub decoder: MlpParams,
}

/// Epoch-averaged training losses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeEpoch {
    pub recon: f64,
    pub kl: f64,
    pub reg: f64,
    pub total: f64,
}

impl VaeModel {
    pub fn init<R: Rng + ?Sized>(config: &VaeConfig, rng: &mut R) -> Self {
        Self {
            encoder: PointEncoder::init(config.encoder_widths, config.latent_dim, rng),
            decoder: MlpParams::init(config.latent_dim, config.hidden, rng),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.code_dim
    }

    /// Mirrored decoder output for a latent code.
    pub fn decode(&self, topology: &SphereTopology, code: &[f64]) -> Result<Vec<Vec3>> {
        let encoded = encode_points(&topology.vertices);
        let (out, _) = mlp_forward(&self.decoder, &encoded, code)?;
        symmetrize(&rows_to_points(&out), topology)
    }

    pub fn to_bundle(&self, topology: &SphereTopology) -> TensorBundle {
        let mut b = TensorBundle::new(serde_json::json!({
            "kind": "part_prior",
            "latent_dim": self.latent_dim(),
            "hidden": self.decoder.hidden,
            "slope": self.decoder.slope,
            "encoder_widths": self.encoder.widths(),
            "grid": [topology.nu, topology.nv],
        }));
        for (name, shape, data) in self.decoder.tensors() {
            b.insert(name, shape, data);
        }
        for ((name, shape), data) in ENCODER_TENSORS
            .iter()
            .zip(self.encoder.shapes())
            .zip(self.encoder.slices())
        {
            b.insert(format!("encoder.{name}"), shape, data);
        }
        b
    }

    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        let decoder = prior_from_bundle(bundle)?;
        let widths: [usize; 2] = serde_json::from_value(bundle.meta["encoder_widths"].clone())?;
        let mut encoder = PointEncoder::init(widths, decoder.code_dim, &mut ChaCha8Rng::seed_from_u64(0));
        let mut flat = Vec::new();
        for name in ENCODER_TENSORS {
            flat.extend(bundle.require(&format!("encoder.{name}"))?);
        }
        if flat.len() != encoder.slices().iter().map(|s| s.len()).sum::<usize>() {
            return Err(LassieError::ShapeMismatch("encoder tensors do not match their widths".into()));
        }
        encoder.read_flat(&flat);
        Ok(Self { encoder, decoder })
    }

    pub fn save(&self, topology: &SphereTopology, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_bundle(topology).save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_bundle(&TensorBundle::load(path)?)
    }
}

/// Reads the prior decoder from a checkpoint written by [`VaeModel::save`].
pub fn prior_from_bundle(bundle: &TensorBundle) -> Result<MlpParams> {
    let meta = &bundle.meta;
    let get = |k: &str| {
        meta[k]
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| LassieError::Format(format!("prior checkpoint lacks `{k}`")))
    };
    let latent = get("latent_dim")?;
    let hidden = get("hidden")?;
    let slope = meta["slope"].as_f64().unwrap_or(0.01);
    for name in MLP_TENSORS {
        if !bundle.contains(name) {
            return Err(LassieError::Format(format!("prior checkpoint lacks tensor `{name}`")));
        }
    }
    MlpParams::from_tensors(latent, hidden, slope, |n| bundle.get(n))
}

/// Deterministic encoding (no sampling).
pub fn encode(vae: &VaeModel, points: &[Vec3]) -> (Vec<f64>, Vec<f64>) {
    let (mu, lv, _) = vae.encoder.forward(points);
    (mu, lv)
}

/// Mean Euclidean distance between corresponding points.
pub fn mean_point_error(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).norm()).sum::<f64>() / a.len() as f64
}

/// Reconstruction of a target through the encoder mean.
pub fn reconstruct(vae: &VaeModel, topology: &SphereTopology, points: &[Vec3]) -> Result<Vec<Vec3>> {
    let (mu, _) = encode(vae, points);
    vae.decode(topology, &mu)
}

struct SampleGrads {
    encoder: Vec<f64>,
    decoder: Vec<f64>,
    recon: f64,
    kl: f64,
    reg: f64,
}

fn sample_step<R: Rng + ?Sized>(
    vae: &VaeModel,
    topology: &SphereTopology,
    encoded: &Array2<f64>,
    target: &[Vec3],
    config: &VaeConfig,
    rng: &mut R,
) -> Result<SampleGrads> {
    let (mu, lv, ecache) = vae.encoder.forward(target);
    let eps: Vec<f64> = (0..mu.len()).map(|_| rng.sample(StandardNormal)).collect();
    let z: Vec<f64> = (0..mu.len()).map(|i| mu[i] + (0.5 * lv[i]).exp() * eps[i]).collect();
    let (out, dcache) = mlp_forward(&vae.decoder, encoded, &z)?;
    let recon_pts = symmetrize(&rows_to_points(&out), topology)?;
    let m = target.len() as f64;
    let mut recon = 0.0;
    let mut g_pts: Vec<Vec3> = Vec::with_capacity(target.len());
    for (p, t) in recon_pts.iter().zip(target) {
        let d = p - t;
        recon += d.norm_squared();
        g_pts.push(d * (2.0 / m));
    }
    recon /= m;
    let (lap, g_lap) = laplacian_loss(&recon_pts, &topology.neighbors);
    let (nrm, g_nrm) = normal_loss(&recon_pts, &topology.faces, &topology.adjacent_faces);
    for ((g, a), b) in g_pts.iter_mut().zip(&g_lap).zip(&g_nrm) {
        *g += a * config.lap_weight + b * config.norm_weight;
    }
    let g_out = points_to_rows(&symmetrize(&g_pts, topology)?);
    let (g_dec, g_z) = mlp_backward(&vae.decoder, &dcache, &z, &g_out);
    let (kl, g_kl_mu, g_kl_lv) = kl_divergence(&mu, &lv);
    let g_mu: Vec<f64> = (0..mu.len()).map(|i| g_z[i] + config.beta * g_kl_mu[i]).collect();
    let g_lv: Vec<f64> = (0..mu.len())
        .map(|i| g_z[i] * 0.5 * (0.5 * lv[i]).exp() * eps[i] + config.beta * g_kl_lv[i])
        .collect();
    let g_enc = vae.encoder.backward(&ecache, &g_mu, &g_lv);
    let mut encoder = Vec::new();
    g_enc.write_flat(&mut encoder);
    let mut decoder = Vec::new();
    g_dec.write_flat(&mut decoder);
    Ok(SampleGrads {
        encoder,
        decoder,
        recon,
        kl,
        reg: config.lap_weight * lap + config.norm_weight * nrm,
    })
}

/// Trains the VAE with minibatch Adam. Returns the model and per-epoch losses.
pub fn train_part_vae(
    dataset: &[PrimitiveSample],
    topology: &SphereTopology,
    config: &VaeConfig,
) -> Result<(VaeModel, Vec<VaeEpoch>)> {
    if dataset.is_empty() {
        return Err(LassieError::Empty("VAE training set".into()));
    }
    if config.batch == 0 {
        return Err(LassieError::InvalidParameter("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut vae = VaeModel::init(config, &mut rng);
    let encoded = encode_points(&topology.vertices);
    let mut enc_flat = Vec::new();
    vae.encoder.write_flat(&mut enc_flat);
    let mut dec_flat = Vec::new();
    vae.decoder.write_flat(&mut dec_flat);
    let mut enc_state = AdamState::new(enc_flat.len());
    let mut dec_state = AdamState::new(dec_flat.len());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = VaeEpoch::default();
        for batch in order.chunks(config.batch) {
            let mut g_enc = vec![0.0; enc_flat.len()];
            let mut g_dec = vec![0.0; dec_flat.len()];
            for &i in batch {
                let s = sample_step(&vae, topology, &encoded, &dataset[i].points, config, &mut rng)?;
                let loss = s.recon + config.beta * s.kl + s.reg;
                if !loss.is_finite() {
                    return Err(LassieError::non_finite(format!(
                        "VAE loss at epoch {epoch} (recon {}, kl {}, reg {})",
                        s.recon, s.kl, s.reg
                    )));
                }
                sums.recon += s.recon;
                sums.kl += s.kl;
                sums.reg += s.reg;
                sums.total += loss;
                let k = 1.0 / batch.len() as f64;
                g_enc.iter_mut().zip(&s.encoder).for_each(|(a, g)| *a += k * g);
                g_dec.iter_mut().zip(&s.decoder).for_each(|(a, g)| *a += k * g);
            }
            adam_step(&mut enc_flat, &g_enc, &mut enc_state, config.lr, "encoder")?;
            adam_step(&mut dec_flat, &g_dec, &mut dec_state, config.lr, "decoder")?;
            vae.encoder.read_flat(&enc_flat);
            vae.decoder.read_flat(&dec_flat);
        }
        let n = dataset.len() as f64;
        log.push(VaeEpoch {
            recon: sums.recon / n,
            kl: sums.kl / n,
            reg: sums.reg / n,
            total: sums.total / n,
        });
    }
    Ok((vae, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parts::make_sphere;

    #[test]
    fn unit_sphere_is_the_grid() {
        let t = make_sphere(8, 6).unwrap();
        let s = gen_primitive(&Primitive::Sphere { radius: 1.0 }, &t).unwrap();
        assert_eq!(s.points, t.vertices);
    }

    #[test]
    fn ellipsoid_scales_axes() {
        let t = make_sphere(8, 6).unwrap();
        let s = gen_primitive(&Primitive::Ellipsoid { axes: [1.0, 0.5, 0.5] }, &t).unwrap();
        for (p, d) in s.points.iter().zip(&t.vertices) {
            assert_eq!(p.x, d.x);
            assert!((p.y - 0.5 * d.y).abs() < 1e-15 && (p.z - 0.5 * d.z).abs() < 1e-15);
        }
    }

    #[test]
    fn blend_is_pointwise_midpoint() {
        let t = make_sphere(8, 6).unwrap();
        let sph = Primitive::Sphere { radius: 1.0 };
        let cyl = Primitive::Cylinder {
            radius: 0.3,
            height: 0.8,
        };
        let a = gen_primitive(&sph, &t).unwrap().points;
        let b = gen_primitive(&cyl, &t).unwrap().points;
        let mix = gen_primitive(
            &Primitive::Blend {
                a: Box::new(sph),
                b: Box::new(cyl),
                weight: 0.5,
            },
            &t,
        )
        .unwrap()
        .points;
        for i in 0..t.num_vertices() {
            assert!((mix[i] - (a[i] + b[i]) * 0.5).norm() < 1e-15);
        }
    }

    #[test]
    fn cylinder_and_cone_surfaces() {
        let t = make_sphere(16, 10).unwrap();
        let cyl = gen_primitive(&Primitive::Cylinder { radius: 0.3, height: 0.8 }, &t).unwrap();
        for p in &cyl.points {
            let rho = (p.x * p.x + p.z * p.z).sqrt();
            let on_side = (rho - 0.3).abs() < 1e-12 && p.y.abs() <= 0.8 + 1e-12;
            let on_cap = (p.y.abs() - 0.8).abs() < 1e-12 && rho <= 0.3 + 1e-12;
            assert!(on_side || on_cap);
        }
        let cone = gen_primitive(&Primitive::Cone { radius: 0.4, height: 0.6 }, &t).unwrap();
        assert!((cone.points[0] - Vec3::new(0.0, 0.6, 0.0)).norm() < 1e-12);
        for p in &cone.points {
            let rho = (p.x * p.x + p.z * p.z).sqrt();
            let side = (rho - 0.4 * (0.6 - p.y) / 1.2).abs() < 1e-12;
            let base = (p.y + 0.6).abs() < 1e-12 && rho <= 0.4 + 1e-12;
            assert!(side || base);
        }
    }

    #[test]
    fn out_of_range_parameters_are_rejected() {
        let t = make_sphere(8, 6).unwrap();
        assert!(gen_primitive(&Primitive::Sphere { radius: 1.5 }, &t).is_err());
        assert!(gen_primitive(&Primitive::Cylinder { radius: 0.6, height: 0.5 }, &t).is_err());
        assert!(gen_primitive(&Primitive::Cone { radius: 0.3, height: 0.1 }, &t).is_err());
        let nested = Primitive::Blend {
            a: Box::new(Primitive::Blend {
                a: Box::new(Primitive::Sphere { radius: 1.0 }),
                b: Box::new(Primitive::Sphere { radius: 0.5 }),
                weight: 0.5,
            }),
            b: Box::new(Primitive::Sphere { radius: 0.5 }),
            weight: 0.5,
        };
        assert!(nested.validate().is_err());
    }

    #[test]
    fn random_primitives_are_valid_and_symmetric() {
        let t = make_sphere(16, 10).unwrap();
        let data = gen_dataset(50, &t, 4).unwrap();
        let mirror = t.mirror.as_ref().unwrap();
        for s in &data {
            s.primitive.validate().unwrap();
            for (k, p) in s.points.iter().enumerate() {
                let q = s.points[mirror[k]];
                assert!((p.x + q.x).abs() < 1e-12 && (p.y - q.y).abs() < 1e-12);
                assert!(p.abs().max() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn closed_form_kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let mu: Vec<f64> = (0..6).map(|_| rng.random_range(-1.5..1.5)).collect();
            let lv: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (kl, _, _) = kl_divergence(&mu, &lv);
            let mc = kl_monte_carlo(&mu, &lv, 200_000, &mut rng);
            assert!((kl - mc).abs() < 0.05 * kl, "{kl} vs {mc}");
        }
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = PointEncoder::init([8, 6], 3, &mut rng);
        let pts: Vec<Vec3> = (0..10)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let (wm, wl) = ([0.3, -0.2, 0.5], [0.1, 0.4, -0.6]);
        let f = |e: &PointEncoder| {
            let (mu, lv, _) = e.forward(&pts);
            (0..3).map(|i| wm[i] * mu[i] + wl[i] * lv[i]).sum::<f64>()
        };
        let (_, _, cache) = enc.forward(&pts);
        let g = enc.backward(&cache, &wm, &wl);
        let mut flat = Vec::new();
        enc.write_flat(&mut flat);
        let mut gflat = Vec::new();
        g.write_flat(&mut gflat);
        let eps = 1e-6;
        for i in (0..flat.len()).step_by(5) {
            let mut e = enc.clone();
            let mut p = flat.clone();
            p[i] += eps;
            e.read_flat(&p);
            let fp = f(&e);
            p[i] -= 2.0 * eps;
            e.read_flat(&p);
            let fm = f(&e);
            assert!(((fp - fm) / (2.0 * eps) - gflat[i]).abs() < 1e-6, "param {i}");
        }
    }

    #[test]
    fn encoding_is_permutation_invariant() {
        let t = make_sphere(8, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = VaeConfig {
            latent_dim: 5,
            hidden: 8,
            ..Default::default()
        };
        let vae = VaeModel::init(&cfg, &mut rng);
        let mut pts = gen_primitive(&Primitive::Ellipsoid { axes: [0.4, 0.9, 0.3] }, &t)
            .unwrap()
            .points;
        let (a, la) = encode(&vae, &pts);
        assert_eq!(a.len(), 5);
        assert_eq!(la.len(), 5);
        pts.reverse();
        let (b, lb) = encode(&vae, &pts);
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn identical_spheres_collapse_to_constant() {
        let t = make_sphere(8, 6).unwrap();
        let s = gen_primitive(&Primitive::Sphere { radius: 0.7 }, &t).unwrap();
        let data = vec![s.clone(); 32];
        let cfg = VaeConfig {
            latent_dim: 4,
            hidden: 16,
            encoder_widths: [16, 16],
            beta: 0.0,
            samples: 32,
            epochs: 80,
            batch: 8,
            lr: 3e-3,
            ..Default::default()
        };
        let (vae, log) = train_part_vae(&data, &t, &cfg).unwrap();
        let recon = reconstruct(&vae, &t, &s.points).unwrap();
        let l2 = recon
            .iter()
            .zip(&s.points)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            / t.num_vertices() as f64;
        assert!(l2 < 1e-3, "reconstruction L2 {l2}");
        assert!(log.last().unwrap().total < log[0].total);
    }

    #[test]
    fn strong_kl_collapses_posterior() {
        let t = make_sphere(8, 6).unwrap();
        let data = gen_dataset(24, &t, 3).unwrap();
        let cfg = VaeConfig {
            latent_dim: 3,
            hidden: 8,
            encoder_widths: [8, 8],
            beta: 1e3,
            epochs: 80,
            batch: 8,
            lr: 1e-2,
            ..Default::default()
        };
        let (vae, _) = train_part_vae(&data, &t, &cfg).unwrap();
        for s in &data {
            let (mu, lv) = encode(&vae, &s.points);
            assert!(mu.iter().all(|v| v.abs() < 0.05), "{mu:?}");
            assert!(lv.iter().all(|v| v.abs() < 0.05), "{lv:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let t = make_sphere(8, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = VaeConfig {
            latent_dim: 3,
            hidden: 8,
            encoder_widths: [4, 6],
            ..Default::default()
        };
        let mut vae = VaeModel::init(&cfg, &mut rng);
        // Values a bundle can hold exactly.
        let mut flat = Vec::new();
        vae.decoder.write_flat(&mut flat);
        let snapped: Vec<f64> = flat.iter().map(|v| crate::bundle::snap(*v)).collect();
        vae.decoder.read_flat(&snapped);
        let mut flat = Vec::new();
        vae.encoder.write_flat(&mut flat);
        let snapped: Vec<f64> = flat.iter().map(|v| crate::bundle::snap(*v)).collect();
        vae.encoder.read_flat(&snapped);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prior.bin");
        vae.save(&t, &path).unwrap();
        let back = VaeModel::load(&path).unwrap();
        assert_eq!(back, vae);
        let prior = prior_from_bundle(&TensorBundle::load(&path).unwrap()).unwrap();
        assert_eq!(prior, vae.decoder);
    }
}
