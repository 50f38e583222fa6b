//! Motion state, structural anchor and per-frame condition channels.

use ndarray::{s, Array2, ArrayView2};

use crate::camera::RAY_EMBED_DIM;
use crate::error::{Error, Result};
use crate::rotation::Vec3;
use crate::skeleton::{fk_with_cache, BodyShape, Joints, Partition, Pose, Skeleton, NUM_BODY_JOINTS, NUM_JOINTS};
use crate::worldmotion::WorldTrajectory;

/// Per-frame body state in both camera and world space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionState {
    pub body_pose: [Vec3; NUM_BODY_JOINTS],
    pub cam_orient: Vec3,
    pub cam_transl: Vec3,
    pub world_orient: Vec3,
    pub world_transl: Vec3,
}

impl Default for MotionState {
    fn default() -> Self {
        MotionState {
            body_pose: [Vec3::zeros(); NUM_BODY_JOINTS],
            cam_orient: Vec3::zeros(),
            cam_transl: Vec3::zeros(),
            world_orient: Vec3::zeros(),
            world_transl: Vec3::zeros(),
        }
    }
}

impl MotionState {
    pub fn camera_pose(&self) -> Pose {
        Pose {
            body_pose: self.body_pose,
            global_orient: self.cam_orient,
            root_transl: self.cam_transl,
        }
    }

    pub fn world_pose(&self) -> Pose {
        Pose {
            body_pose: self.body_pose,
            global_orient: self.world_orient,
            root_transl: self.world_transl,
        }
    }
}

/// A motion clip: per-frame states sharing one body shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub frames: Vec<MotionState>,
    pub shape: BodyShape,
    pub fps: f64,
}

impl MotionSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn world_trajectory(&self) -> WorldTrajectory {
        WorldTrajectory {
            gamma_w: self.frames.iter().map(|f| f.world_orient).collect(),
            tau_w: self.frames.iter().map(|f| f.world_transl).collect(),
            fps: self.fps,
        }
    }

    pub fn camera_joints(&self, skel: &Skeleton) -> Vec<Joints> {
        self.frames
            .iter()
            .map(|f| fk_with_cache(&f.camera_pose(), &self.shape, skel).joints)
            .collect()
    }

    pub fn world_joints(&self, skel: &Skeleton) -> Vec<Joints> {
        self.frames
            .iter()
            .map(|f| fk_with_cache(&f.world_pose(), &self.shape, skel).joints)
            .collect()
    }

    /// Frames `start..end`, keeping shape and frame rate.
    pub fn slice(&self, start: usize, end: usize) -> MotionSequence {
        MotionSequence {
            frames: self.frames[start..end].to_vec(),
            shape: self.shape,
            fps: self.fps,
        }
    }
}

/// Low-uncertainty variables estimated by the first stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralAnchor {
    /// Torso rotations in partition order.
    pub torso_pose: Vec<Vec<Vec3>>,
    pub shape: BodyShape,
    pub cam_orient: Vec<Vec3>,
    pub cam_transl: Vec<Vec3>,
}

impl StructuralAnchor {
    pub fn from_sequence(seq: &MotionSequence, partition: &Partition) -> Self {
        StructuralAnchor {
            torso_pose: seq
                .frames
                .iter()
                .map(|f| partition.torso_ids.iter().map(|&j| f.body_pose[j - 1]).collect())
                .collect(),
            shape: seq.shape,
            cam_orient: seq.frames.iter().map(|f| f.cam_orient).collect(),
            cam_transl: seq.frames.iter().map(|f| f.cam_transl).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.cam_orient.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cam_orient.is_empty()
    }

    /// Camera-space pose with the given non-torso rotations filled in.
    pub fn camera_pose(&self, t: usize, partition: &Partition, non_torso: &[Vec3]) -> Pose {
        let mut body_pose = [Vec3::zeros(); NUM_BODY_JOINTS];
        for (k, &j) in partition.torso_ids.iter().enumerate() {
            body_pose[j - 1] = self.torso_pose[t][k];
        }
        for (k, &j) in partition.non_torso_ids.iter().enumerate() {
            if let Some(v) = non_torso.get(k) {
                body_pose[j - 1] = *v;
            }
        }
        Pose {
            body_pose,
            global_orient: self.cam_orient[t],
            root_transl: self.cam_transl[t],
        }
    }
}

pub const NUM_KEYPOINTS: usize = NUM_JOINTS;
pub const BBOX_DIM: usize = 3;
pub const RAYS_DIM: usize = NUM_KEYPOINTS * RAY_EMBED_DIM;
pub const IMAGE_FEATURE_DIM: usize = 32;
pub const CAMERA_FEATURE_DIM: usize = 6;
/// Camera-frame root orientation plus the 8 torso rotations.
pub const TORSO_COND_DIM: usize = 3 + 8 * 3;
pub const CONDITION_DIM: usize = BBOX_DIM + RAYS_DIM + IMAGE_FEATURE_DIM + CAMERA_FEATURE_DIM + TORSO_COND_DIM;

/// Per-frame observation channels. Anchor-related groups are `bbox`,
/// `camera` and `torso`; articulation-related groups are `rays` and `image`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet {
    pub bbox: Array2<f64>,
    pub rays: Array2<f64>,
    pub image: Array2<f64>,
    pub camera: Array2<f64>,
    pub torso: Array2<f64>,
}

impl ConditionSet {
    pub fn zeros(frames: usize) -> Self {
        ConditionSet {
            bbox: Array2::zeros((frames, BBOX_DIM)),
            rays: Array2::zeros((frames, RAYS_DIM)),
            image: Array2::zeros((frames, IMAGE_FEATURE_DIM)),
            camera: Array2::zeros((frames, CAMERA_FEATURE_DIM)),
            torso: Array2::zeros((frames, TORSO_COND_DIM)),
        }
    }

    pub fn frames(&self) -> usize {
        self.bbox.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.frames();
        let shapes = [
            (self.bbox.dim(), BBOX_DIM),
            (self.rays.dim(), RAYS_DIM),
            (self.image.dim(), IMAGE_FEATURE_DIM),
            (self.camera.dim(), CAMERA_FEATURE_DIM),
            (self.torso.dim(), TORSO_COND_DIM),
        ];
        for ((rows, cols), want) in shapes {
            if rows != t || cols != want {
                return Err(Error::ShapeMismatch(format!(
                    "condition group is {rows}x{cols}, expected {t}x{want}"
                )));
            }
        }
        Ok(())
    }

    /// Frames × CONDITION_DIM concatenation in group order.
    pub fn to_matrix(&self) -> Array2<f64> {
        let t = self.frames();
        let mut out = Array2::zeros((t, CONDITION_DIM));
        let mut col = 0;
        for g in self.groups() {
            let w = g.ncols();
            out.slice_mut(s![.., col..col + w]).assign(&g);
            col += w;
        }
        out
    }

    fn groups(&self) -> [ArrayView2<'_, f64>; 5] {
        [
            self.bbox.view(),
            self.rays.view(),
            self.image.view(),
            self.camera.view(),
            self.torso.view(),
        ]
    }

    /// Fill the torso-pose channel from an anchor.
    pub fn with_anchor(mut self, anchor: &StructuralAnchor) -> Self {
        for t in 0..self.frames().min(anchor.len()) {
            let o = anchor.cam_orient[t];
            for k in 0..3 {
                self.torso[[t, k]] = o[k];
            }
            for (j, r) in anchor.torso_pose[t].iter().enumerate() {
                for k in 0..3 {
                    self.torso[[t, 3 + 3 * j + k]] = r[k];
                }
            }
        }
        self
    }

    pub fn slice(&self, start: usize, end: usize) -> ConditionSet {
        ConditionSet {
            bbox: self.bbox.slice(s![start..end, ..]).to_owned(),
            rays: self.rays.slice(s![start..end, ..]).to_owned(),
            image: self.image.slice(s![start..end, ..]).to_owned(),
            camera: self.camera.slice(s![start..end, ..]).to_owned(),
            torso: self.torso.slice(s![start..end, ..]).to_owned(),
        }
    }
}

/// Raw keypoint observations that accompany the condition channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub keypoints: Vec<[[f64; 2]; NUM_KEYPOINTS]>,
    pub visible: Vec<[bool; NUM_KEYPOINTS]>,
    pub cond: ConditionSet,
}

impl Observations {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn visible_fraction(&self) -> f64 {
        let total = self.visible.len() * NUM_KEYPOINTS;
        if total == 0 {
            return 0.0;
        }
        self.visible.iter().flatten().filter(|v| **v).count() as f64 / total as f64
    }
}
