//! Dense feature maps, the on-disk feature ensemble, PCA, k-means,
//! pseudo-silhouettes and part-to-cluster mapping.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LassieError, Result};
use crate::losses::VertexFeatures;
use crate::skeleton::{forward_kinematics, BoneScales, PoseParams, Skeleton};

/// Row-major `h x w x dim` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * dim {
            return Err(LassieError::ShapeMismatch(format!(
                "feature map {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self {
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let i = (row * self.width + col) * self.dim;
        &mut self.data[i..i + self.dim]
    }

    /// Bilinear sample at a normalized image coordinate, clamped at the border.
    pub fn sample(&self, coord: [f64; 2]) -> Vec<f64> {
        let x = (coord[0] * self.width as f64 - 0.5).clamp(0.0, (self.width - 1) as f64);
        let y = (coord[1] * self.height as f64 - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let mut out = vec![0.0; self.dim];
        for (r, c, wgt) in [
            (y0, x0, (1.0 - fx) * (1.0 - fy)),
            (y0, x1, fx * (1.0 - fy)),
            (y1, x0, (1.0 - fx) * fy),
            (y1, x1, fx * fy),
        ] {
            if wgt != 0.0 {
                for (o, v) in out.iter_mut().zip(self.at(r, c)) {
                    *o += wgt * v;
                }
            }
        }
        out
    }
}

pub fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// 8-bit RGB image converted to `[0, 1]` floats, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl ColorImage {
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img
            .pixels()
            .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
            .collect();
        Ok(Self {
            height: h as usize,
            width: w as usize,
            pixels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, p) in self.pixels.iter().enumerate() {
            let px = image::Rgb(p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
            img.put_pixel((i % self.width) as u32, (i / self.width) as u32, px);
        }
        img.save(path)?;
        Ok(())
    }

    /// Bilinear color at a normalized coordinate.
    pub fn sample(&self, coord: [f64; 2]) -> [f64; 3] {
        let x = (coord[0] * self.width as f64 - 0.5).clamp(0.0, (self.width - 1) as f64);
        let y = (coord[1] * self.height as f64 - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let mut out = [0.0; 3];
        for (r, c, wgt) in [
            (y0, x0, (1.0 - fx) * (1.0 - fy)),
            (y0, x1, fx * (1.0 - fy)),
            (y1, x0, (1.0 - fx) * fy),
            (y1, x1, fx * fy),
        ] {
            let p = self.pixels[r * self.width + c];
            for k in 0..3 {
                out[k] += wgt * p[k];
            }
        }
        out
    }
}

/// A named 2D keypoint in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointFile {
    pub keypoints: Vec<Keypoint>,
}

/// Per-pixel integer labels (`-1` = background), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<i32>,
}

impl LabelMap {
    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l >= 0).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceData {
    pub id: String,
    pub features: FeatureMap,
    /// Saliency on the feature grid, values in `[0, 1]`.
    pub saliency: Vec<f64>,
    pub image: Option<ColorImage>,
    pub keypoints: Option<Vec<Keypoint>>,
    /// Ground-truth part labels at image resolution, for evaluation only.
    pub part_mask: Option<LabelMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEnsemble {
    pub instances: Vec<InstanceData>,
    /// Image resolution `(h, w)` that keypoints and masks refer to.
    pub image_size: (usize, usize),
    pub provenance: serde_json::Value,
}

pub const MANIFEST_SCHEMA: u32 = 1;
pub const DTYPE: &str = "f32-le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestInstance {
    pub id: String,
    pub feat: String,
    pub sal: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub img: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kp: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

/// `manifest.json` of a feature-ensemble directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub dtype: String,
    pub n: usize,
    /// `[h_f, w_f, f_raw]`
    pub feature_shape: [usize; 3],
    /// `[h, w]` of images, keypoints and masks.
    pub image_shape: [usize; 2],
    pub instances: Vec<ManifestInstance>,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

fn read_f32_file(path: &Path, expected: usize) -> Result<Vec<f64>> {
    if !path.exists() {
        return Err(LassieError::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let bytes = std::fs::read(path)?;
    if bytes.len() != 4 * expected {
        return Err(LassieError::ShapeMismatch(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            4 * expected
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect())
}

fn write_f32_file(path: &Path, values: impl IntoIterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values
        .into_iter()
        .flat_map(|v| (v as f32).to_le_bytes())
        .collect();
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Loads and validates a feature-ensemble directory.
pub fn load_ensemble(dir: impl AsRef<Path>) -> Result<FeatureEnsemble> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(LassieError::MissingFile {
            path: manifest_path,
        });
    }
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    if manifest.schema_version != MANIFEST_SCHEMA {
        return Err(LassieError::Format(format!(
            "unsupported manifest schema {}",
            manifest.schema_version
        )));
    }
    if manifest.dtype != DTYPE {
        return Err(LassieError::Format(format!(
            "tensor dtype must be `{DTYPE}`, manifest says `{}`",
            manifest.dtype
        )));
    }
    if manifest.n == 0 || manifest.instances.is_empty() {
        return Err(LassieError::Empty("feature ensemble has no instances".into()));
    }
    if manifest.n != manifest.instances.len() {
        return Err(LassieError::ShapeMismatch(format!(
            "manifest declares n = {} but lists {} instances",
            manifest.n,
            manifest.instances.len()
        )));
    }
    let [hf, wf, f] = manifest.feature_shape;
    let [h, w] = manifest.image_shape;
    if hf == 0 || wf == 0 || f == 0 || h == 0 || w == 0 {
        return Err(LassieError::ShapeMismatch("zero-sized feature or image shape".into()));
    }
    let mut instances = Vec::with_capacity(manifest.n);
    for entry in &manifest.instances {
        let features = FeatureMap::new(hf, wf, f, read_f32_file(&dir.join(&entry.feat), hf * wf * f)?)?;
        let saliency = read_f32_file(&dir.join(&entry.sal), hf * wf)?;
        if saliency.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(LassieError::Format(format!(
                "saliency of instance `{}` leaves [0, 1]",
                entry.id
            )));
        }
        let image = match &entry.img {
            Some(name) => {
                let path = dir.join(name);
                if !path.exists() {
                    return Err(LassieError::MissingFile { path });
                }
                let img = ColorImage::load(&path)?;
                if (img.height, img.width) != (h, w) {
                    return Err(LassieError::ShapeMismatch(format!(
                        "image of instance `{}` is {}x{}, manifest says {h}x{w}",
                        entry.id, img.height, img.width
                    )));
                }
                Some(img)
            }
            None => None,
        };
        let keypoints = match &entry.kp {
            Some(name) => {
                let path = dir.join(name);
                if !path.exists() {
                    return Err(LassieError::MissingFile { path });
                }
                let file: KeypointFile = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
                Some(file.keypoints)
            }
            None => None,
        };
        let part_mask = match &entry.mask {
            Some(name) => {
                let labels = read_f32_file(&dir.join(name), h * w)?;
                Some(LabelMap {
                    height: h,
                    width: w,
                    labels: labels.iter().map(|&v| v.round() as i32).collect(),
                })
            }
            None => None,
        };
        instances.push(InstanceData {
            id: entry.id.clone(),
            features,
            saliency,
            image,
            keypoints,
            part_mask,
        });
    }
    Ok(FeatureEnsemble {
        instances,
        image_size: (h, w),
        provenance: manifest.provenance,
    })
}

/// Writes an ensemble in the directory layout read by [`load_ensemble`].
pub fn save_ensemble(ensemble: &FeatureEnsemble, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let first = ensemble
        .instances
        .first()
        .ok_or_else(|| LassieError::Empty("feature ensemble has no instances".into()))?;
    let (hf, wf, f) = (first.features.height, first.features.width, first.features.dim);
    let mut entries = Vec::with_capacity(ensemble.instances.len());
    for (k, inst) in ensemble.instances.iter().enumerate() {
        if (inst.features.height, inst.features.width, inst.features.dim) != (hf, wf, f) {
            return Err(LassieError::ShapeMismatch(format!(
                "instance `{}` feature map differs in shape",
                inst.id
            )));
        }
        let mut entry = ManifestInstance {
            id: inst.id.clone(),
            feat: format!("feat_{k}.bin"),
            sal: format!("sal_{k}.bin"),
            img: None,
            kp: None,
            mask: None,
        };
        write_f32_file(&dir.join(&entry.feat), inst.features.data.iter().copied())?;
        write_f32_file(&dir.join(&entry.sal), inst.saliency.iter().copied())?;
        if let Some(img) = &inst.image {
            let name = format!("img_{k}.png");
            img.save(&dir.join(&name))?;
            entry.img = Some(name);
        }
        if let Some(kp) = &inst.keypoints {
            let name = format!("kp_{k}.json");
            let file = KeypointFile {
                keypoints: kp.clone(),
            };
            std::fs::write(dir.join(&name), serde_json::to_string_pretty(&file)?)?;
            entry.kp = Some(name);
        }
        if let Some(mask) = &inst.part_mask {
            let name = format!("mask_{k}.bin");
            write_f32_file(&dir.join(&name), mask.labels.iter().map(|&l| l as f64))?;
            entry.mask = Some(name);
        }
        entries.push(entry);
    }
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA,
        dtype: DTYPE.into(),
        n: entries.len(),
        feature_shape: [hf, wf, f],
        image_shape: [ensemble.image_size.0, ensemble.image_size.1],
        instances: entries,
        provenance: ensemble.provenance.clone(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Otsu threshold of values in `[0, 1]` over a 256-bin histogram. Values
/// strictly above the returned threshold form the upper class.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    otsu_in_range(values, 0.0, 1.0)
}

fn otsu_in_range(values: &[f64], lo: f64, hi: f64) -> f64 {
    const BINS: usize = 256;
    if values.is_empty() || hi <= lo {
        return lo;
    }
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0usize; BINS];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_var) = (None, -1.0);
    for (i, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best = Some(i);
        }
    }
    match best {
        // Upper edge of the last bin of the lower class.
        Some(i) => lo + (i + 1) as f64 * width,
        // A single populated bin: nothing lies above it.
        None => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Per-instance salient-pixel masks on the feature grid.
pub fn salient_masks(ensemble: &FeatureEnsemble) -> Vec<Vec<bool>> {
    ensemble
        .instances
        .iter()
        .map(|inst| {
            let t = otsu_threshold(&inst.saliency);
            inst.saliency.iter().map(|&s| s > t).collect()
        })
        .collect()
}

/// Orthonormal projection fitted on salient pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `f_out` rows of length `f_raw`.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Fraction of total variance kept by the retained components.
    pub retained_variance: f64,
}

impl PcaModel {
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((a, v), m)| a * (v - m)).sum())
            .collect()
    }

    pub fn reconstruct(&self, y: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &k) in self.components.iter().zip(y) {
            for (o, a) in out.iter_mut().zip(c) {
                *o += k * a;
            }
        }
        out
    }
}

pub fn fit_pca(samples: &[&[f64]], f_out: usize) -> Result<PcaModel> {
    let f_raw = samples.first().map_or(0, |s| s.len());
    if f_out == 0 || f_out > f_raw {
        return Err(LassieError::InvalidParameter(format!(
            "cannot reduce {f_raw} feature channels to {f_out}"
        )));
    }
    if samples.len() < f_out {
        return Err(LassieError::Degenerate(format!(
            "{} salient pixels are too few for {f_out} components",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; f_raw];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s.iter()) {
            *m += v / n;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(f_raw, f_raw);
    let mut centered = vec![0.0; f_raw];
    for s in samples {
        for (c, (v, m)) in centered.iter_mut().zip(s.iter().zip(&mean)) {
            *c = v - m;
        }
        for i in 0..f_raw {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..f_raw {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..f_raw {
        for j in i..f_raw {
            let v = cov[(i, j)] / n;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..f_raw).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut components = Vec::with_capacity(f_out);
    let mut eigenvalues = Vec::with_capacity(f_out);
    for &k in order.iter().take(f_out) {
        let mut c: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = c
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if c[lead] < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        eigenvalues.push(eig.eigenvalues[k].max(0.0));
    }
    let kept: f64 = eigenvalues.iter().sum();
    Ok(PcaModel {
        mean,
        components,
        eigenvalues,
        retained_variance: if total > 0.0 { kept / total } else { 1.0 },
    })
}

/// Fits PCA over salient pixels of all instances and projects every pixel.
pub fn pca_reduce(ensemble: &FeatureEnsemble, f_out: usize) -> Result<(FeatureEnsemble, PcaModel)> {
    let masks = salient_masks(ensemble);
    let mut samples: Vec<&[f64]> = Vec::new();
    for (inst, mask) in ensemble.instances.iter().zip(&masks) {
        let f = &inst.features;
        for (p, &on) in mask.iter().enumerate() {
            if on {
                samples.push(f.at(p / f.width, p % f.width));
            }
        }
    }
    let model = fit_pca(&samples, f_out)?;
    let mut out = ensemble.clone();
    for inst in &mut out.instances {
        let f = &inst.features;
        let mut data = Vec::with_capacity(f.height * f.width * f_out);
        for p in 0..f.height * f.width {
            data.extend(model.project(f.at(p / f.width, p % f.width)));
        }
        inst.features = FeatureMap::new(f.height, f.width, f_out, data)?;
    }
    Ok((out, model))
}

/// Unit-normalizes every feature vector in place.
pub fn normalize_features(ensemble: &mut FeatureEnsemble) {
    for inst in &mut ensemble.instances {
        let dim = inst.features.dim;
        for chunk in inst.features.data.chunks_mut(dim) {
            normalize(chunk);
        }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding. Returns the means, the final
/// assignment and the within-cluster SSE after every assignment step.
pub fn lloyd<R: Rng + ?Sized>(
    points: &[&[f64]],
    c: usize,
    max_iter: usize,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, Vec<usize>, Vec<f64>)> {
    if c == 0 {
        return Err(LassieError::InvalidParameter("need at least one cluster".into()));
    }
    if points.len() < c {
        return Err(LassieError::Degenerate(format!(
            "{} points cannot form {c} clusters",
            points.len()
        )));
    }
    let mut means: Vec<Vec<f64>> = vec![points[rng.random_range(0..points.len())].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &means[0])).collect();
    while means.len() < c {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(LassieError::Degenerate(format!(
                "features have fewer than {c} distinct values"
            )));
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = points.len() - 1;
        for (i, &d) in d2.iter().enumerate() {
            if target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        means.push(points[pick].to_vec());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, means.last().expect("just pushed")));
        }
    }
    let assign_all = |means: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut sse = 0.0;
        let a = points
            .iter()
            .map(|p| {
                let (best, d) = means
                    .iter()
                    .enumerate()
                    .map(|(k, m)| (k, dist2(p, m)))
                    .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
                sse += d;
                best
            })
            .collect();
        (a, sse)
    };
    let dim = points[0].len();
    let (mut assignment, sse) = assign_all(&means);
    let mut history = vec![sse];
    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; dim]; c];
        let mut counts = vec![0usize; c];
        for (p, &k) in points.iter().zip(&assignment) {
            counts[k] += 1;
            for (s, v) in sums[k].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for k in 0..c {
            if counts[k] > 0 {
                means[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            }
        }
        let (next, sse) = assign_all(&means);
        history.push(sse);
        if next == assignment {
            break;
        }
        assignment = next;
    }
    Ok((means, assignment, history))
}

/// Fitted clusters of salient feature pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    /// Cluster means as fitted.
    pub means: Vec<Vec<f64>>,
    /// Unit-normalized means, used for all distances after fitting.
    pub centroids: Vec<Vec<f64>>,
    /// Per instance, per feature pixel: cluster index or `-1` when not salient.
    pub assignments: Vec<Vec<i32>>,
    /// Foreground distance threshold on the min-centroid distance.
    pub tau: f64,
    /// Within-cluster SSE after each Lloyd assignment step.
    pub sse_history: Vec<f64>,
    pub feature_size: (usize, usize),
}

impl ClusterModel {
    pub fn num_clusters(&self) -> usize {
        self.centroids.len()
    }

    /// Nearest centroid and Euclidean distance to it.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let (k, d) = self
            .centroids
            .iter()
            .enumerate()
            .map(|(k, c)| (k, dist2(x, c)))
            .fold((0, f64::INFINITY), |acc, v| if v.1 < acc.1 { v } else { acc });
        (k, d.sqrt())
    }
}

/// Independent k-means++ starts; the run with the lowest final SSE is kept.
pub const KMEANS_RESTARTS: usize = 8;

/// k-means over salient pixels of all instances, plus the foreground
/// distance threshold.
pub fn kmeans(ensemble: &FeatureEnsemble, c: usize, seed: u64) -> Result<ClusterModel> {
    let masks = salient_masks(ensemble);
    let mut points: Vec<&[f64]> = Vec::new();
    for (inst, mask) in ensemble.instances.iter().zip(&masks) {
        let f = &inst.features;
        for (p, &on) in mask.iter().enumerate() {
            if on {
                points.push(f.at(p / f.width, p % f.width));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = lloyd(&points, c, 100, &mut rng)?;
    for _ in 1..KMEANS_RESTARTS {
        let run = lloyd(&points, c, 100, &mut rng)?;
        if run.2.last() < best.2.last() {
            best = run;
        }
    }
    let (means, _, sse_history) = best;
    let centroids: Vec<Vec<f64>> = means
        .iter()
        .map(|m| {
            let mut v = m.clone();
            normalize(&mut v);
            v
        })
        .collect();
    let first = &ensemble.instances[0].features;
    let mut model = ClusterModel {
        means,
        centroids,
        assignments: Vec::new(),
        tau: 0.0,
        sse_history,
        feature_size: (first.height, first.width),
    };
    let mut all_dist = Vec::new();
    for (inst, mask) in ensemble.instances.iter().zip(&masks) {
        let f = &inst.features;
        let mut assign = Vec::with_capacity(mask.len());
        for (p, &on) in mask.iter().enumerate() {
            let (k, d) = model.nearest(f.at(p / f.width, p % f.width));
            all_dist.push(d);
            assign.push(if on { k as i32 } else { -1 });
        }
        model.assignments.push(assign);
    }
    let hi = all_dist.iter().copied().fold(0.0, f64::max);
    model.tau = if hi > 0.0 {
        otsu_in_range(&all_dist, 0.0, hi * (1.0 + 1e-9))
    } else {
        f64::INFINITY
    };
    Ok(model)
}

/// Foreground on the feature grid: salient and close to some centroid.
pub fn pseudo_silhouette_with(instance: &InstanceData, model: &ClusterModel, tau: f64) -> Vec<bool> {
    let t = otsu_threshold(&instance.saliency);
    let f = &instance.features;
    (0..f.height * f.width)
        .map(|p| instance.saliency[p] > t && model.nearest(f.at(p / f.width, p % f.width)).1 < tau)
        .collect()
}

pub fn pseudo_silhouette(instance: &InstanceData, model: &ClusterModel) -> Vec<bool> {
    pseudo_silhouette_with(instance, model, model.tau)
}

/// Nearest-neighbor resize of a row-major mask.
pub fn resize_nearest<T: Copy>(src: &[T], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(dh * dw);
    for r in 0..dh {
        let sr = ((r as f64 + 0.5) * sh as f64 / dh as f64) as usize;
        for c in 0..dw {
            let sc = ((c as f64 + 0.5) * sw as f64 / dw as f64) as usize;
            out.push(src[sr.min(sh - 1) * sw + sc.min(sw - 1)]);
        }
    }
    out
}

/// Part index -> cluster index, for every part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartClusterMap {
    pub clusters: Vec<usize>,
}

/// Reads `{part_name: cluster_index}` and checks it covers every part.
pub fn map_parts_manual(
    json: &str,
    part_names: &[String],
    num_clusters: usize,
) -> Result<PartClusterMap> {
    let map: BTreeMap<String, usize> = serde_json::from_str(json)?;
    let mut clusters = Vec::with_capacity(part_names.len());
    for name in part_names {
        let k = *map.get(name).ok_or_else(|| {
            LassieError::InvalidParameter(format!("part map does not assign part `{name}`"))
        })?;
        if k >= num_clusters {
            return Err(LassieError::InvalidParameter(format!(
                "part `{name}` mapped to cluster {k}, only {num_clusters} exist"
            )));
        }
        clusters.push(k);
    }
    Ok(PartClusterMap { clusters })
}

/// Assigns each part the cluster most of its annotated pixels fall into, the
/// automated stand-in for labelling clusters by hand. Needs `part_mask` on
/// at least one instance.
pub fn map_parts_from_labels(
    model: &ClusterModel,
    ensemble: &FeatureEnsemble,
    num_parts: usize,
) -> Result<PartClusterMap> {
    let c = model.num_clusters();
    let mut votes = vec![vec![0usize; c]; num_parts];
    let (hf, wf) = model.feature_size;
    for (inst, assign) in ensemble.instances.iter().zip(&model.assignments) {
        let Some(mask) = &inst.part_mask else { continue };
        let labels = resize_nearest(&mask.labels, mask.height, mask.width, hf, wf);
        for (&label, &k) in labels.iter().zip(assign) {
            if label >= 0 && (label as usize) < num_parts && k >= 0 {
                votes[label as usize][k as usize] += 1;
            }
        }
    }
    let mut clusters = Vec::with_capacity(num_parts);
    for (part, v) in votes.iter().enumerate() {
        let (best, count) = v
            .iter()
            .enumerate()
            .fold((0, 0), |acc, (k, &n)| if n > acc.1 { (k, n) } else { acc });
        if count == 0 {
            return Err(LassieError::Degenerate(format!(
                "part {part} has no annotated salient pixels"
            )));
        }
        clusters.push(best);
    }
    Ok(PartClusterMap { clusters })
}

/// Mean row (normalized) and pixel count of every cluster over all instances.
pub fn cluster_rows(model: &ClusterModel) -> Vec<(f64, usize)> {
    let c = model.num_clusters();
    let (h, w) = model.feature_size;
    let mut sum = vec![0.0; c];
    let mut count = vec![0usize; c];
    for assign in &model.assignments {
        for (p, &k) in assign.iter().enumerate() {
            if k >= 0 {
                sum[k as usize] += ((p / w) as f64 + 0.5) / h as f64;
                count[k as usize] += 1;
            }
        }
    }
    (0..c)
        .map(|k| {
            let mean = if count[k] > 0 { sum[k] / count[k] as f64 } else { 0.5 };
            (mean, count[k])
        })
        .collect()
}

fn is_head(name: &str) -> bool {
    name.contains("head") || name.contains("neck")
}

fn is_leg_end(name: &str) -> bool {
    name.contains("lower") || name.contains("middle")
}

/// Image-height heuristic for four clusters: the topmost cluster gets head
/// and neck, the bottommost gets the middle and lower leg segments, and the
/// remaining parts go to the remaining cluster whose mean row is closest to
/// the part's expected row, interpolated from rest-pose part heights.
pub fn map_parts_heuristic(model: &ClusterModel, skeleton: &Skeleton) -> Result<PartClusterMap> {
    if model.num_clusters() != 4 {
        return Err(LassieError::InvalidParameter(format!(
            "the height heuristic needs exactly 4 clusters, got {}",
            model.num_clusters()
        )));
    }
    let rows = cluster_rows(model);
    let mut order: Vec<usize> = (0..4).collect();
    // Ascending row; ties go to the larger cluster first.
    order.sort_by(|&a, &b| {
        rows[a]
            .0
            .total_cmp(&rows[b].0)
            .then(rows[b].1.cmp(&rows[a].1))
            .then(a.cmp(&b))
    });
    let top = order[0];
    let mut bottom_candidates = order.clone();
    bottom_candidates.sort_by(|&a, &b| {
        rows[b]
            .0
            .total_cmp(&rows[a].0)
            .then(rows[b].1.cmp(&rows[a].1))
            .then(a.cmp(&b))
    });
    let bottom = bottom_candidates.into_iter().find(|&k| k != top).expect("four clusters");
    let middle: Vec<usize> = order.iter().copied().filter(|&k| k != top && k != bottom).collect();

    let names = skeleton.part_names();
    let rest = forward_kinematics(
        skeleton,
        &PoseParams::zeros(skeleton.num_bones()),
        &BoneScales::ones(skeleton.num_bones()),
    );
    let height = |i: usize| rest.centroid[i].y;
    let avg = |pred: &dyn Fn(&str) -> bool| {
        let hs: Vec<f64> = (0..names.len()).filter(|&i| pred(&names[i])).map(height).collect();
        (!hs.is_empty()).then(|| hs.iter().sum::<f64>() / hs.len() as f64)
    };
    let y_top = avg(&is_head).unwrap_or_else(|| (0..names.len()).map(height).fold(f64::NEG_INFINITY, f64::max));
    let y_bottom = avg(&is_leg_end).unwrap_or_else(|| (0..names.len()).map(height).fold(f64::INFINITY, f64::min));
    let (r_top, r_bottom) = (rows[top].0, rows[bottom].0);
    let clusters = (0..names.len())
        .map(|i| {
            if is_head(&names[i]) {
                top
            } else if is_leg_end(&names[i]) {
                bottom
            } else {
                let t = if (y_top - y_bottom).abs() > 1e-12 {
                    (y_top - height(i)) / (y_top - y_bottom)
                } else {
                    0.5
                };
                let expected = r_top + t * (r_bottom - r_top);
                *middle
                    .iter()
                    .min_by(|&&a, &&b| {
                        (rows[a].0 - expected)
                            .abs()
                            .total_cmp(&(rows[b].0 - expected).abs())
                            .then(rows[b].1.cmp(&rows[a].1))
                            .then(a.cmp(&b))
                    })
                    .expect("two middle clusters")
            }
        })
        .collect();
    Ok(PartClusterMap { clusters })
}

/// Every vertex of part `i` gets the unit centroid of its mapped cluster.
pub fn init_vertex_features(
    map: &PartClusterMap,
    model: &ClusterModel,
    vertices_per_part: usize,
) -> VertexFeatures {
    let dim = model.centroids.first().map_or(0, Vec::len);
    let mut q = VertexFeatures::uninitialized(map.clusters.len() * vertices_per_part, dim);
    for (i, &k) in map.clusters.iter().enumerate() {
        for v in 0..vertices_per_part {
            q.set_row(i * vertices_per_part + v, &model.centroids[k]);
            q.counts[i * vertices_per_part + v] = 1;
        }
    }
    q
}
