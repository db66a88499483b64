//! Multi-view image batches.

use gradtape::Tensor;
use serde::{Deserialize, Serialize};

use crate::camera::CameraPoseSet;
use crate::error::{param_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Generated,
    Rendered,
    GroundTruth,
    Condition,
}

/// `N` square RGB views `(N, R, R, 3)` with their poses.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewBatch {
    views: Tensor<f32>,
    poses: CameraPoseSet,
    role: Role,
}

impl MultiViewBatch {
    pub fn new(views: Tensor<f32>, poses: CameraPoseSet, role: Role) -> Result<Self> {
        let s = views.shape();
        if s.len() != 4 || s[1] != s[2] || s[3] != 3 {
            return Err(param_err!("views must be (N, R, R, 3), got {s:?}"));
        }
        if s[0] != poses.len() {
            return Err(param_err!("{} views but {} poses", s[0], poses.len()));
        }
        if matches!(role, Role::Rendered | Role::GroundTruth)
            && views.data().iter().any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(param_err!("{role:?} views must lie in [0, 1]"));
        }
        Ok(MultiViewBatch { views, poses, role })
    }

    pub fn views(&self) -> &Tensor<f32> {
        &self.views
    }

    pub fn into_views(self) -> Tensor<f32> {
        self.views
    }

    pub fn poses(&self) -> &CameraPoseSet {
        &self.poses
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.views.shape()[1]
    }

    /// View `i` as an `(R, R, 3)` image.
    pub fn view(&self, i: usize) -> Tensor<f32> {
        let r = self.resolution();
        self.views.slice_rows(i, 1).reshape(vec![r, r, 3])
    }
}
