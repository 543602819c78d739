//! Generic 3D skeletons and forward kinematics.
//!
//! A skeleton is a tree of joints. Every non-root joint owns exactly one bone,
//! running from its parent joint (proximal) to itself (distal), so bone `k`
//! is the `k`-th non-root joint in file order. Bone rotations are stored as
//! intrinsic XYZ Euler angles relative to the parent bone's frame and are
//! composed down the tree; the resulting global rotation rotates the rest
//! bone vector about the proximal joint.
//!
//! Canonical orientation: `+x` right, `+y` up, `+z` out of the screen; the
//! animal faces `+z`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LassieError, Result};
use crate::geom::{align_y_to, euler_xyz, euler_xyz_grad, frob, Mat3, Vec3};

const QUADRUPED_JSON: &str = include_str!("../assets/quadruped.json");
const BIPED_JSON: &str = include_str!("../assets/biped.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    pub parent: Option<usize>,
    pub rest: [f64; 3],
}

/// On-disk skeleton description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    #[serde(default)]
    pub name: String,
    pub joints: Vec<JointSpec>,
    #[serde(default)]
    pub part_names: Vec<String>,
    #[serde(default)]
    pub symmetry_pairs: Vec<[usize; 2]>,
    #[serde(default)]
    pub leg_bones: Vec<usize>,
}

impl SkeletonSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(LassieError::MissingFile {
                path: path.to_path_buf(),
            });
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// The shipped four-legged template (16 joints, 15 bones).
    pub fn quadruped() -> Self {
        Self::from_json(QUADRUPED_JSON).expect("bundled quadruped template is valid JSON")
    }

    /// The shipped two-legged template (16 joints, 15 bones).
    pub fn biped() -> Self {
        Self::from_json(BIPED_JSON).expect("bundled biped template is valid JSON")
    }

    pub fn template(name: &str) -> Option<Self> {
        match name {
            "quadruped" => Some(Self::quadruped()),
            "biped" => Some(Self::biped()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bone {
    pub name: String,
    pub proximal: usize,
    pub distal: usize,
    pub parent_bone: Option<usize>,
    /// Rest bone vector in the canonical frame.
    pub rest_vec: Vec3,
    pub rest_len: f64,
    /// Maps the canonical part frame (`+y` along the bone) onto the rest bone.
    pub align: Mat3,
}

/// A validated skeleton. Immutable after [`build_skeleton`].
#[derive(Debug, Clone)]
pub struct Skeleton {
    pub name: String,
    pub joint_names: Vec<String>,
    pub joint_parents: Vec<Option<usize>>,
    /// Root-relative rest positions.
    pub rest_joints: Vec<Vec3>,
    pub root: usize,
    pub bones: Vec<Bone>,
    /// Bone indices, parents before children.
    pub order: Vec<usize>,
    pub symmetry_pairs: Vec<[usize; 2]>,
    pub leg_bones: Vec<usize>,
}

/// Per-instance articulation: one XYZ Euler triple per bone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub bone_rotations: Vec<[f64; 3]>,
}

impl PoseParams {
    pub fn zeros(bones: usize) -> Self {
        Self {
            bone_rotations: vec![[0.0; 3]; bones],
        }
    }

    pub fn len(&self) -> usize {
        self.bone_rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bone_rotations.is_empty()
    }

    /// Component-wise linear blend `(1 - t) * self + t * other`.
    pub fn lerp(&self, other: &PoseParams, t: f64) -> PoseParams {
        PoseParams {
            bone_rotations: self
                .bone_rotations
                .iter()
                .zip(&other.bone_rotations)
                .map(|(a, b)| {
                    [
                        a[0] + t * (b[0] - a[0]),
                        a[1] + t * (b[1] - a[1]),
                        a[2] + t * (b[2] - a[2]),
                    ]
                })
                .collect(),
        }
    }
}

/// Shared bone-length multipliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoneScales {
    pub scales: Vec<f64>,
}

impl BoneScales {
    pub fn ones(bones: usize) -> Self {
        Self {
            scales: vec![1.0; bones],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            Some(s) => Err(LassieError::InvalidParameter(format!(
                "bone scale must be strictly positive, got {s}"
            ))),
            None => Ok(()),
        }
    }
}

/// Output of forward kinematics.
#[derive(Debug, Clone)]
pub struct BoneTransforms {
    /// Global bone rotation (parent rotations composed with the local one).
    pub rotation: Vec<Mat3>,
    /// `rotation * align`: orientation of the canonical part frame in the world.
    pub frame: Vec<Mat3>,
    pub centroid: Vec<Vec3>,
    /// Placement scale: half the scaled bone length, so a canonical shape
    /// spanning `[-1, 1]` along `+y` covers the whole bone.
    pub length: Vec<f64>,
    pub joints: Vec<Vec3>,
}

impl BoneTransforms {
    pub fn len(&self) -> usize {
        self.rotation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotation.is_empty()
    }
}

/// Adjoints flowing into forward kinematics from part assembly.
#[derive(Debug, Clone)]
pub struct TransformGrads {
    pub frame: Vec<Mat3>,
    pub centroid: Vec<Vec3>,
    pub length: Vec<f64>,
}

impl TransformGrads {
    pub fn zeros(bones: usize) -> Self {
        Self {
            frame: vec![Mat3::zeros(); bones],
            centroid: vec![Vec3::zeros(); bones],
            length: vec![0.0; bones],
        }
    }
}

pub fn build_skeleton(spec: &SkeletonSpec) -> Result<Skeleton> {
    let p = spec.joints.len();
    if p < 2 {
        return Err(LassieError::InvalidSkeleton(format!(
            "need at least two joints, got {p}"
        )));
    }
    let roots: Vec<usize> = (0..p).filter(|&j| spec.joints[j].parent.is_none()).collect();
    if roots.len() != 1 {
        return Err(LassieError::InvalidSkeleton(format!(
            "expected exactly one root, found {}",
            roots.len()
        )));
    }
    let root = roots[0];
    for (j, joint) in spec.joints.iter().enumerate() {
        if let Some(parent) = joint.parent {
            if parent >= p {
                return Err(LassieError::InvalidSkeleton(format!(
                    "joint `{}` has out-of-range parent {parent}",
                    joint.name
                )));
            }
            if parent == j {
                return Err(LassieError::InvalidSkeleton(format!(
                    "joint `{}` is its own parent",
                    joint.name
                )));
            }
        }
        if joint.rest.iter().any(|c| !c.is_finite()) {
            return Err(LassieError::InvalidSkeleton(format!(
                "joint `{}` has a non-finite rest position",
                joint.name
            )));
        }
    }
    // Every joint must reach the root without revisiting a joint.
    for start in 0..p {
        let mut seen = vec![false; p];
        let mut j = start;
        while let Some(parent) = spec.joints[j].parent {
            if seen[j] {
                return Err(LassieError::InvalidSkeleton(format!(
                    "cycle through joint `{}`",
                    spec.joints[j].name
                )));
            }
            seen[j] = true;
            j = parent;
        }
    }

    let root_pos = Vec3::from(spec.joints[root].rest);
    let rest_joints: Vec<Vec3> = spec
        .joints
        .iter()
        .map(|j| Vec3::from(j.rest) - root_pos)
        .collect();
    if let Some(bad) = rest_joints.iter().position(|r| r.amax() > 1.0 + 1e-9) {
        return Err(LassieError::InvalidSkeleton(format!(
            "joint `{}` lies outside the root-relative unit cube",
            spec.joints[bad].name
        )));
    }

    let bone_joints: Vec<usize> = (0..p).filter(|&j| j != root).collect();
    let b = bone_joints.len();
    if !spec.part_names.is_empty() && spec.part_names.len() != b {
        return Err(LassieError::InvalidSkeleton(format!(
            "{} part names for {b} bones",
            spec.part_names.len()
        )));
    }
    let mut bone_of_joint = vec![None; p];
    for (k, &j) in bone_joints.iter().enumerate() {
        bone_of_joint[j] = Some(k);
    }

    let mut bones = Vec::with_capacity(b);
    for (k, &j) in bone_joints.iter().enumerate() {
        let proximal = spec.joints[j].parent.expect("non-root joint has a parent");
        let rest_vec = rest_joints[j] - rest_joints[proximal];
        let rest_len = rest_vec.norm();
        if rest_len < 1e-9 {
            return Err(LassieError::InvalidSkeleton(format!(
                "bone ending at `{}` has zero rest length",
                spec.joints[j].name
            )));
        }
        let name = spec
            .part_names
            .get(k)
            .cloned()
            .unwrap_or_else(|| spec.joints[j].name.clone());
        bones.push(Bone {
            name,
            proximal,
            distal: j,
            parent_bone: bone_of_joint[proximal],
            rest_vec,
            rest_len,
            align: align_y_to(&rest_vec),
        });
    }

    // Topological order by depth from the root.
    let depth = |mut k: usize| {
        let mut d = 0;
        while let Some(parent) = bones[k].parent_bone {
            k = parent;
            d += 1;
        }
        d
    };
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by_key(|&k| (depth(k), k));

    for pair in &spec.symmetry_pairs {
        if pair[0] >= b || pair[1] >= b {
            return Err(LassieError::InvalidSkeleton(format!(
                "symmetry pair {pair:?} references a missing bone"
            )));
        }
    }
    if let Some(bad) = spec.leg_bones.iter().find(|&&k| k >= b) {
        return Err(LassieError::InvalidSkeleton(format!(
            "leg bone {bad} does not exist"
        )));
    }

    Ok(Skeleton {
        name: spec.name.clone(),
        joint_names: spec.joints.iter().map(|j| j.name.clone()).collect(),
        joint_parents: spec.joints.iter().map(|j| j.parent).collect(),
        rest_joints,
        root,
        bones,
        order,
        symmetry_pairs: spec.symmetry_pairs.clone(),
        leg_bones: spec.leg_bones.clone(),
    })
}

impl Skeleton {
    pub fn num_bones(&self) -> usize {
        self.bones.len()
    }

    pub fn num_joints(&self) -> usize {
        self.rest_joints.len()
    }

    pub fn part_names(&self) -> Vec<String> {
        self.bones.iter().map(|b| b.name.clone()).collect()
    }

    pub fn bone_index(&self, name: &str) -> Option<usize> {
        self.bones.iter().position(|b| b.name == name)
    }

    /// Largest distance between any two rest joints.
    pub fn rest_extent(&self) -> f64 {
        let mut best: f64 = 0.0;
        for a in &self.rest_joints {
            for b in &self.rest_joints {
                best = best.max((a - b).norm());
            }
        }
        best
    }

    fn check_lengths(&self, pose: &PoseParams, scales: &BoneScales) {
        assert_eq!(pose.len(), self.num_bones(), "pose length must equal bone count");
        assert_eq!(
            scales.scales.len(),
            self.num_bones(),
            "scale count must equal bone count"
        );
    }
}

/// All-zero Euler angles, one triple per bone.
pub fn resting_pose(skeleton: &Skeleton) -> PoseParams {
    PoseParams::zeros(skeleton.num_bones())
}

pub fn forward_kinematics(
    skeleton: &Skeleton,
    pose: &PoseParams,
    scales: &BoneScales,
) -> BoneTransforms {
    skeleton.check_lengths(pose, scales);
    let b = skeleton.num_bones();
    let mut rotation = vec![Mat3::identity(); b];
    let mut joints = vec![Vec3::zeros(); skeleton.num_joints()];
    joints[skeleton.root] = skeleton.rest_joints[skeleton.root];
    for &k in &skeleton.order {
        let bone = &skeleton.bones[k];
        let parent_rot = bone
            .parent_bone
            .map_or_else(Mat3::identity, |pb| rotation[pb]);
        rotation[k] = parent_rot * euler_xyz(pose.bone_rotations[k]);
        joints[bone.distal] =
            joints[bone.proximal] + rotation[k] * (bone.rest_vec * scales.scales[k]);
    }
    let mut frame = Vec::with_capacity(b);
    let mut centroid = Vec::with_capacity(b);
    let mut length = Vec::with_capacity(b);
    for (k, bone) in skeleton.bones.iter().enumerate() {
        frame.push(rotation[k] * bone.align);
        centroid.push((joints[bone.proximal] + joints[bone.distal]) * 0.5);
        length.push(0.5 * bone.rest_len * scales.scales[k]);
    }
    BoneTransforms {
        rotation,
        frame,
        centroid,
        length,
        joints,
    }
}

/// Pulls transform adjoints back onto Euler angles and bone scales.
pub fn forward_kinematics_backward(
    skeleton: &Skeleton,
    pose: &PoseParams,
    scales: &BoneScales,
    transforms: &BoneTransforms,
    grads: &TransformGrads,
) -> (Vec<[f64; 3]>, Vec<f64>) {
    let b = skeleton.num_bones();
    let mut g_rot = vec![Mat3::zeros(); b];
    let mut g_joint = vec![Vec3::zeros(); skeleton.num_joints()];
    let mut g_scale = vec![0.0; b];
    for (k, bone) in skeleton.bones.iter().enumerate() {
        g_rot[k] += grads.frame[k] * bone.align.transpose();
        g_joint[bone.proximal] += grads.centroid[k] * 0.5;
        g_joint[bone.distal] += grads.centroid[k] * 0.5;
        g_scale[k] += grads.length[k] * 0.5 * bone.rest_len;
    }
    let mut g_angles = vec![[0.0; 3]; b];
    for &k in skeleton.order.iter().rev() {
        let bone = &skeleton.bones[k];
        let s = scales.scales[k];
        let gd = g_joint[bone.distal];
        // distal = proximal + s * R_k * rest_vec
        let proximal_grad = gd;
        g_joint[bone.proximal] += proximal_grad;
        g_rot[k] += (gd * s) * bone.rest_vec.transpose();
        g_scale[k] += gd.dot(&(transforms.rotation[k] * bone.rest_vec));
        // R_k = R_parent * L_k
        let (local, d_local) = euler_xyz_grad(pose.bone_rotations[k]);
        let parent_rot = bone
            .parent_bone
            .map_or_else(Mat3::identity, |pb| transforms.rotation[pb]);
        let g_local = parent_rot.transpose() * g_rot[k];
        for axis in 0..3 {
            g_angles[k][axis] = frob(&g_local, &d_local[axis]);
        }
        if let Some(pb) = bone.parent_bone {
            let up = g_rot[k] * local.transpose();
            g_rot[pb] += up;
        }
    }
    (g_angles, g_scale)
}
