use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasets::Augmentation;
use crate::error::{ensure, Result};
use crate::geometry::{apply_linear, rotation_z, Mat3, PatchSet, PointCloud, IDENTITY};

const MIRROR_X: Mat3 = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// `p -> linear * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewTransform {
    pub linear: Mat3,
    pub translation: [f64; 3],
}

impl ViewTransform {
    pub const IDENTITY: ViewTransform = ViewTransform {
        linear: IDENTITY,
        translation: [0.0; 3],
    };

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        if *self == Self::IDENTITY {
            return cloud.clone();
        }
        apply_linear(cloud, &self.linear, self.translation)
    }

    /// Transforms an existing tokenization. Every view transform is an
    /// isometry followed by a translation, which farthest point sampling and
    /// nearest-neighbour grouping commute with, so this equals tokenizing the
    /// transformed cloud up to rounding.
    pub fn apply_patches(&self, patches: &PatchSet) -> PatchSet {
        if *self == Self::IDENTITY {
            return patches.clone();
        }
        let m = &self.linear;
        let neighborhoods = patches
            .neighborhoods
            .iter()
            .map(|p| {
                let v = p.map(f64::from);
                [0, 1, 2].map(|i| (m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2]) as f32)
            })
            .collect();
        PatchSet {
            centers: apply_linear(&patches.centers, m, self.translation),
            neighborhoods,
            center_indices: patches.center_indices.clone(),
            neighbor_indices: patches.neighbor_indices.clone(),
        }
    }
}

/// View 0 is always the identity.
pub fn view_transforms(n: usize, aug: Augmentation, seed: u64) -> Result<Vec<ViewTransform>> {
    ensure!(n >= 1, "need at least one view");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    out.push(ViewTransform::IDENTITY);
    for _ in 1..n {
        out.push(match aug {
            Augmentation::Rotation => ViewTransform {
                linear: rotation_z(rng.random_range(0.0..TAU)),
                translation: [0.0; 3],
            },
            Augmentation::Hflip => ViewTransform {
                linear: MIRROR_X,
                translation: [0.0; 3],
            },
            Augmentation::Translation => ViewTransform {
                linear: IDENTITY,
                translation: [0; 3].map(|_| rng.random_range(-0.05..=0.05)),
            },
            Augmentation::None => ViewTransform::IDENTITY,
        });
    }
    Ok(out)
}

pub fn make_views(cloud: &PointCloud, n: usize, aug: Augmentation, seed: u64) -> Result<Vec<PointCloud>> {
    Ok(view_transforms(n, aug, seed)?.iter().map(|t| t.apply(cloud)).collect())
}
