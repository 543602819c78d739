//! Neural part surfaces.
//!
//! Every part is a deformed unit sphere. Sphere coordinates are positionally
//! encoded and decoded by a frozen prior MLP (conditioned on the part's latent
//! code) plus a per-part deformation MLP. The sum is mirrored about the
//! canonical `x = 0` plane and then placed by the bone transform:
//!
//! ```text
//! V_i = l_i * (R_i * A_i) * sym(F_prior(PE(X), e_i) + F_delta_i(PE(X))) + t_i
//! ```
//!
//! where `l_i` is half the scaled bone length, `R_i` the global bone rotation,
//! `A_i` the fixed rest alignment of the bone and `t_i` the bone centroid.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{LassieError, Result};
use crate::geom::Vec3;
use crate::skeleton::{BoneTransforms, TransformGrads};

/// Number of frequency bands in the positional encoding.
pub const PE_BANDS: usize = 6;
/// Encoded width: sine and cosine of each band for each coordinate.
pub const PE_DIM: usize = 2 * PE_BANDS * 3;

const IN_EPS: f64 = 1e-5;

/// Lat-long sphere grid with poles on the canonical `±y` axis.
#[derive(Debug, Clone)]
pub struct SphereTopology {
    pub nu: usize,
    pub nv: usize,
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// `(u, v)` texture coordinates in `[0, 1]^2`.
    pub uv: Vec<[f64; 2]>,
    /// Index of each vertex's `x -> -x` mirror partner, when the grid admits one.
    pub mirror: Option<Vec<usize>>,
    pub neighbors: Vec<Vec<usize>>,
    /// Pairs of faces sharing an edge.
    pub adjacent_faces: Vec<(usize, usize)>,
}

pub fn make_sphere(nu: usize, nv: usize) -> Result<SphereTopology> {
    if nu < 3 || nv < 3 {
        return Err(LassieError::InvalidTopology(format!(
            "sphere grid needs nu >= 3 and nv >= 3, got {nu} x {nv}"
        )));
    }
    let rings = nv - 2;
    let m = nu * rings + 2;
    let north = 0;
    let south = m - 1;
    let ring_vertex = |r: usize, k: usize| 1 + r * nu + (k % nu);

    let mut vertices = Vec::with_capacity(m);
    let mut uv = Vec::with_capacity(m);
    vertices.push(Vec3::new(0.0, 1.0, 0.0));
    uv.push([0.5, 0.0]);
    for r in 0..rings {
        let theta = std::f64::consts::PI * (r + 1) as f64 / (nv - 1) as f64;
        for k in 0..nu {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / nu as f64;
            vertices.push(Vec3::new(
                theta.sin() * phi.cos(),
                theta.cos(),
                theta.sin() * phi.sin(),
            ));
            uv.push([k as f64 / nu as f64, (r + 1) as f64 / (nv - 1) as f64]);
        }
    }
    vertices.push(Vec3::new(0.0, -1.0, 0.0));
    uv.push([0.5, 1.0]);

    // Winding chosen so that (b - a) x (c - a) points outward.
    let mut faces = Vec::with_capacity(2 * nu * rings);
    for k in 0..nu {
        faces.push([north, ring_vertex(0, k + 1), ring_vertex(0, k)]);
    }
    for r in 0..rings.saturating_sub(1) {
        for k in 0..nu {
            let a = ring_vertex(r, k);
            let b = ring_vertex(r, k + 1);
            let c = ring_vertex(r + 1, k);
            let d = ring_vertex(r + 1, k + 1);
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    for k in 0..nu {
        faces.push([south, ring_vertex(rings - 1, k), ring_vertex(rings - 1, k + 1)]);
    }

    let mirror = (nu % 2 == 0).then(|| {
        let mut map = vec![0; m];
        map[north] = north;
        map[south] = south;
        for r in 0..rings {
            for k in 0..nu {
                map[ring_vertex(r, k)] = ring_vertex(r, (nu + nu / 2 - k) % nu);
            }
        }
        map
    });

    let (neighbors, adjacent_faces) = connectivity(m, &faces);
    Ok(SphereTopology {
        nu,
        nv,
        vertices,
        faces,
        uv,
        mirror,
        neighbors,
        adjacent_faces,
    })
}

/// Vertex one-rings and edge-adjacent face pairs of a closed triangle mesh.
pub fn connectivity(m: usize, faces: &[[usize; 3]]) -> (Vec<Vec<usize>>, Vec<(usize, usize)>) {
    let mut neighbors = vec![Vec::new(); m];
    let mut edge_faces: std::collections::BTreeMap<(usize, usize), Vec<usize>> =
        std::collections::BTreeMap::new();
    for (f, tri) in faces.iter().enumerate() {
        for e in 0..3 {
            let (a, b) = (tri[e], tri[(e + 1) % 3]);
            if !neighbors[a].contains(&b) {
                neighbors[a].push(b);
            }
            if !neighbors[b].contains(&a) {
                neighbors[b].push(a);
            }
            edge_faces.entry((a.min(b), a.max(b))).or_default().push(f);
        }
    }
    for n in &mut neighbors {
        n.sort_unstable();
    }
    let adjacent = edge_faces
        .values()
        .filter(|fs| fs.len() == 2)
        .map(|fs| (fs[0], fs[1]))
        .collect();
    (neighbors, adjacent)
}

impl SphereTopology {
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Sphere coordinates perturbed by roughly `sigma` radians of angular noise.
    pub fn jittered<R: Rng + ?Sized>(&self, sigma: f64, rng: &mut R) -> Vec<Vec3> {
        self.vertices
            .iter()
            .map(|v| {
                let noise = Vec3::new(
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                );
                (v + noise * sigma).normalize()
            })
            .collect()
    }
}

/// `[sin(2^k pi x_c)]` for all bands and coordinates, followed by the cosines.
pub fn positional_encode(x: &Vec3) -> [f64; PE_DIM] {
    let mut out = [0.0; PE_DIM];
    for k in 0..PE_BANDS {
        let freq = (1u32 << k) as f64 * std::f64::consts::PI;
        for c in 0..3 {
            let (s, co) = (freq * x[c]).sin_cos();
            out[k * 3 + c] = s;
            out[PE_DIM / 2 + k * 3 + c] = co;
        }
    }
    out
}

/// Scale applied to sphere coordinates before encoding. At unit scale the
/// lowest band cannot tell `x = 1` from `x = -1` (both poles of an axis would
/// share one code); halving keeps every band injective on the sphere.
pub const PE_INPUT_SCALE: f64 = 0.5;

/// Encodes a batch of sphere coordinates as MLP input rows.
pub fn encode_points(points: &[Vec3]) -> Array2<f64> {
    let mut out = Array2::zeros((points.len(), PE_DIM));
    for (i, p) in points.iter().enumerate() {
        let e = positional_encode(&(p * PE_INPUT_SCALE));
        out.row_mut(i).assign(&Array1::from_vec(e.to_vec()));
    }
    out
}

/// Three fully-connected layers; the two middle blocks apply instance
/// normalization over the point batch followed by LeakyReLU.
///
/// The latent code (when `code_dim > 0`) enters as an additive shift right
/// after each normalization: the first shift uses the code rows of `w1`, the
/// second uses `cw2`. Adding the code before normalization would be removed
/// by the per-channel mean subtraction, since it is constant over the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub code_dim: usize,
    pub hidden: usize,
    pub slope: f64,
    /// `(PE_DIM + code_dim) x hidden`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub g1: Array1<f64>,
    pub be1: Array1<f64>,
    /// `code_dim x hidden`
    pub cw2: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub g2: Array1<f64>,
    pub be2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

/// Tensor names in serialization and flattening order.
pub const MLP_TENSORS: [&str; 11] = [
    "w1", "b1", "g1", "be1", "cw2", "w2", "b2", "g2", "be2", "w3", "b3",
];

impl MlpParams {
    /// PyTorch-style uniform fan-in initialization, unit norm scales.
    pub fn init<R: Rng + ?Sized>(code_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let input = PE_DIM + code_dim;
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
        };
        let w1 = uniform(input, hidden, input);
        let cw2 = uniform(code_dim, hidden, hidden + code_dim);
        let w2 = uniform(hidden, hidden, hidden);
        let w3 = uniform(hidden, 3, hidden);
        Self {
            code_dim,
            hidden,
            slope: 0.01,
            w1,
            b1: Array1::zeros(hidden),
            g1: Array1::ones(hidden),
            be1: Array1::zeros(hidden),
            cw2,
            w2,
            b2: Array1::zeros(hidden),
            g2: Array1::ones(hidden),
            be2: Array1::zeros(hidden),
            w3,
            b3: Array1::zeros(3),
        }
    }

    /// Same as [`MlpParams::init`] but with a zero output layer, so the
    /// network starts as the zero function.
    pub fn init_zero_output<R: Rng + ?Sized>(code_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::init(code_dim, hidden, rng);
        p.w3.fill(0.0);
        p.b3.fill(0.0);
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.w1.fill(0.0);
        z.b1.fill(0.0);
        z.g1.fill(0.0);
        z.be1.fill(0.0);
        z.cw2.fill(0.0);
        z.w2.fill(0.0);
        z.b2.fill(0.0);
        z.g2.fill(0.0);
        z.be2.fill(0.0);
        z.w3.fill(0.0);
        z.b3.fill(0.0);
        z
    }

    pub fn input_dim(&self) -> usize {
        PE_DIM + self.code_dim
    }

    fn slices(&self) -> [&[f64]; 11] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.g1.as_slice().expect("standard layout"),
            self.be1.as_slice().expect("standard layout"),
            self.cw2.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.g2.as_slice().expect("standard layout"),
            self.be2.as_slice().expect("standard layout"),
            self.w3.as_slice().expect("standard layout"),
            self.b3.as_slice().expect("standard layout"),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 11] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.g1.as_slice_mut().expect("standard layout"),
            self.be1.as_slice_mut().expect("standard layout"),
            self.cw2.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.g2.as_slice_mut().expect("standard layout"),
            self.be2.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
        ]
    }

    /// Named tensors with their shapes, in [`MLP_TENSORS`] order.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let shapes = self.shapes();
        MLP_TENSORS
            .iter()
            .zip(shapes)
            .zip(self.slices())
            .map(|((n, s), d)| (*n, s, d))
            .collect()
    }

    pub fn shapes(&self) -> [Vec<usize>; 11] {
        let h = self.hidden;
        [
            vec![self.input_dim(), h],
            vec![h],
            vec![h],
            vec![h],
            vec![self.code_dim, h],
            vec![h, h],
            vec![h],
            vec![h],
            vec![h],
            vec![h, 3],
            vec![3],
        ]
    }

    /// Rebuilds parameters from named tensors (as produced by [`MlpParams::tensors`]).
    pub fn from_tensors(
        code_dim: usize,
        hidden: usize,
        slope: f64,
        mut lookup: impl FnMut(&str) -> Option<Vec<f64>>,
    ) -> Result<Self> {
        let mut p = Self {
            code_dim,
            hidden,
            slope,
            w1: Array2::zeros((PE_DIM + code_dim, hidden)),
            b1: Array1::zeros(hidden),
            g1: Array1::zeros(hidden),
            be1: Array1::zeros(hidden),
            cw2: Array2::zeros((code_dim, hidden)),
            w2: Array2::zeros((hidden, hidden)),
            b2: Array1::zeros(hidden),
            g2: Array1::zeros(hidden),
            be2: Array1::zeros(hidden),
            w3: Array2::zeros((hidden, 3)),
            b3: Array1::zeros(3),
        };
        for (name, dst) in MLP_TENSORS.iter().zip(p.slices_mut()) {
            let data = lookup(name)
                .ok_or_else(|| LassieError::Format(format!("missing tensor `{name}`")))?;
            if data.len() != dst.len() {
                return Err(LassieError::ShapeMismatch(format!(
                    "tensor `{name}` has {} values, expected {}",
                    data.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(&data);
        }
        Ok(p)
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for s in self.slices() {
            out.extend_from_slice(s);
        }
    }

    /// Reads parameters back from a flat slice; returns the number consumed.
    pub fn read_flat(&mut self, src: &[f64]) -> usize {
        let mut at = 0;
        for dst in self.slices_mut() {
            let n = dst.len();
            dst.copy_from_slice(&src[at..at + n]);
            at += n;
        }
        at
    }

    pub fn add_scaled(&mut self, other: &MlpParams, scale: f64) {
        let src = other.slices().map(|s| s.to_vec());
        for (dst, s) in self.slices_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d += scale * v;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Array2<f64>,
    norm1: Array2<f64>,
    inv_std1: Array1<f64>,
    pre1: Array2<f64>,
    act1: Array2<f64>,
    norm2: Array2<f64>,
    inv_std2: Array1<f64>,
    pre2: Array2<f64>,
    act2: Array2<f64>,
}

fn instance_norm(a: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let n = a.nrows() as f64;
    let mean = a.sum_axis(Axis(0)) / n;
    let centered = a - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
    let inv_std = var.mapv(|v| 1.0 / (v + IN_EPS).sqrt());
    (centered * &inv_std, inv_std)
}

fn instance_norm_backward(g: &Array2<f64>, norm: &Array2<f64>, inv_std: &Array1<f64>) -> Array2<f64> {
    let n = g.nrows() as f64;
    let mean_g = g.sum_axis(Axis(0)) / n;
    let mean_gn = (g * norm).sum_axis(Axis(0)) / n;
    (g - &mean_g - &(norm * &mean_gn)) * inv_std
}

fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

/// Runs the MLP over a batch of encoded points sharing one latent code.
pub fn mlp_forward(
    params: &MlpParams,
    encoded: &Array2<f64>,
    code: &[f64],
) -> Result<(Array2<f64>, MlpCache)> {
    if encoded.nrows() < 2 {
        return Err(LassieError::InvalidParameter(
            "instance normalization needs at least two points".into(),
        ));
    }
    if encoded.ncols() != PE_DIM || code.len() != params.code_dim {
        return Err(LassieError::ShapeMismatch(format!(
            "MLP expects {PE_DIM}+{} inputs, got {}+{}",
            params.code_dim,
            encoded.ncols(),
            code.len()
        )));
    }
    let code = Array1::from_vec(code.to_vec());
    let w1x = params.w1.slice(s![..PE_DIM, ..]);
    let w1c = params.w1.slice(s![PE_DIM.., ..]);

    let a1 = encoded.dot(&w1x) + &params.b1;
    let (norm1, inv_std1) = instance_norm(&a1);
    let shift1 = code.dot(&w1c) + &params.be1;
    let pre1 = &norm1 * &params.g1 + &shift1;
    let act1 = pre1.mapv(|v| leaky(v, params.slope));

    let a2 = act1.dot(&params.w2) + &params.b2;
    let (norm2, inv_std2) = instance_norm(&a2);
    let shift2 = code.dot(&params.cw2) + &params.be2;
    let pre2 = &norm2 * &params.g2 + &shift2;
    let act2 = pre2.mapv(|v| leaky(v, params.slope));

    let out = act2.dot(&params.w3) + &params.b3;
    Ok((
        out,
        MlpCache {
            input: encoded.clone(),
            norm1,
            inv_std1,
            pre1,
            act1,
            norm2,
            inv_std2,
            pre2,
            act2,
        },
    ))
}

/// Backward pass: parameter gradients and the gradient of the latent code.
pub fn mlp_backward(
    params: &MlpParams,
    cache: &MlpCache,
    code: &[f64],
    grad_out: &Array2<f64>,
) -> (MlpParams, Vec<f64>) {
    let slope = params.slope;
    let code = Array1::from_vec(code.to_vec());
    let mut g = params.zeros_like();

    g.w3 = standard(cache.act2.t().dot(grad_out));
    g.b3 = grad_out.sum_axis(Axis(0));
    let g_act2 = grad_out.dot(&params.w3.t());
    let g_pre2 = ndarray::Zip::from(&g_act2)
        .and(&cache.pre2)
        .map_collect(|&ga, &z| if z > 0.0 { ga } else { slope * ga });
    g.g2 = (&g_pre2 * &cache.norm2).sum_axis(Axis(0));
    let g_shift2 = g_pre2.sum_axis(Axis(0));
    g.be2 = g_shift2.clone();
    let mut g_code = Array1::<f64>::zeros(params.code_dim);
    if params.code_dim > 0 {
        g.cw2 = outer(&code, &g_shift2);
        g_code += &params.cw2.dot(&g_shift2);
    }
    let g_norm2 = &g_pre2 * &params.g2;
    let g_a2 = instance_norm_backward(&g_norm2, &cache.norm2, &cache.inv_std2);
    g.w2 = standard(cache.act1.t().dot(&g_a2));
    g.b2 = g_a2.sum_axis(Axis(0));
    let g_act1 = g_a2.dot(&params.w2.t());
    let g_pre1 = ndarray::Zip::from(&g_act1)
        .and(&cache.pre1)
        .map_collect(|&ga, &z| if z > 0.0 { ga } else { slope * ga });
    g.g1 = (&g_pre1 * &cache.norm1).sum_axis(Axis(0));
    let g_shift1 = g_pre1.sum_axis(Axis(0));
    g.be1 = g_shift1.clone();
    let g_norm1 = &g_pre1 * &params.g1;
    let g_a1 = instance_norm_backward(&g_norm1, &cache.norm1, &cache.inv_std1);
    g.b1 = g_a1.sum_axis(Axis(0));
    let g_w1x = cache.input.t().dot(&g_a1);
    g.w1.slice_mut(s![..PE_DIM, ..]).assign(&g_w1x);
    if params.code_dim > 0 {
        g.w1.slice_mut(s![PE_DIM.., ..]).assign(&outer(&code, &g_shift1));
        let w1c = params.w1.slice(s![PE_DIM.., ..]);
        g_code += &w1c.dot(&g_shift1);
    }
    (g, g_code.to_vec())
}

fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Mirrors a canonical point set about `x = 0` using the topology's mirror map.
pub fn symmetrize(points: &[Vec3], topology: &SphereTopology) -> Result<Vec<Vec3>> {
    let mirror = topology.mirror.as_ref().ok_or_else(|| {
        LassieError::InvalidTopology(format!(
            "{} longitudes: the grid is not closed under x -> -x",
            topology.nu
        ))
    })?;
    if points.len() != mirror.len() {
        return Err(LassieError::ShapeMismatch(format!(
            "{} points for a {}-vertex topology",
            points.len(),
            mirror.len()
        )));
    }
    Ok(points
        .iter()
        .zip(mirror)
        .map(|(p, &j)| {
            let q = &points[j];
            Vec3::new(0.5 * (p.x - q.x), 0.5 * (p.y + q.y), 0.5 * (p.z + q.z))
        })
        .collect())
}

/// Shared pieces needed to decode canonical part shapes.
#[derive(Debug, Clone)]
pub struct PartModel {
    pub code: Vec<f64>,
    pub deform: MlpParams,
}

/// Canonical shape `sym(F_prior(PE(X), e) + F_delta(PE(X)))` for one part.
pub fn canonical_shape(
    topology: &SphereTopology,
    encoded: &Array2<f64>,
    part: &PartModel,
    prior: &MlpParams,
) -> Result<Vec<Vec3>> {
    let (base, _) = mlp_forward(prior, encoded, &part.code)?;
    let (delta, _) = mlp_forward(&part.deform, encoded, &[])?;
    let raw = rows_to_points(&(base + delta));
    symmetrize(&raw, topology)
}

pub fn rows_to_points(a: &Array2<f64>) -> Vec<Vec3> {
    a.rows().into_iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect()
}

pub fn points_to_rows(points: &[Vec3]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), 3), |(i, c)| points[i][c])
}

/// A posed part surface.
#[derive(Debug, Clone)]
pub struct PartMesh {
    pub part: usize,
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

/// Places canonical points with the bone similarity transform.
pub fn place_part(canonical: &[Vec3], transforms: &BoneTransforms, part: usize) -> Vec<Vec3> {
    let frame = transforms.frame[part] * transforms.length[part];
    let t = transforms.centroid[part];
    canonical.iter().map(|c| frame * c + t).collect()
}

/// Adjoint of [`place_part`]: accumulates transform gradients and returns the
/// gradient with respect to the canonical points.
pub fn place_part_backward(
    canonical: &[Vec3],
    transforms: &BoneTransforms,
    part: usize,
    grad_world: &[Vec3],
    out: &mut TransformGrads,
) -> Vec<Vec3> {
    let frame = transforms.frame[part];
    let len = transforms.length[part];
    let mut g_frame = crate::geom::Mat3::zeros();
    let mut g_len = 0.0;
    let mut g_t = Vec3::zeros();
    let mut g_canon = Vec::with_capacity(canonical.len());
    let frame_t = frame.transpose();
    for (c, g) in canonical.iter().zip(grad_world) {
        g_t += g;
        g_frame += (g * len) * c.transpose();
        g_len += g.dot(&(frame * c));
        g_canon.push(frame_t * g * len);
    }
    out.frame[part] += g_frame;
    out.length[part] += g_len;
    out.centroid[part] += g_t;
    g_canon
}

/// Full assembly of one part: decode, mirror, place.
pub fn assemble_part(
    part: usize,
    topology: &SphereTopology,
    model: &PartModel,
    prior: &MlpParams,
    transforms: &BoneTransforms,
) -> Result<PartMesh> {
    let encoded = encode_points(&topology.vertices);
    let canonical = canonical_shape(topology, &encoded, model, prior)?;
    Ok(PartMesh {
        part,
        vertices: place_part(&canonical, transforms, part),
        faces: topology.faces.clone(),
    })
}
