use nalgebra::Vector3;

use super::affine::AffineTransform;
use super::displacement::DisplacementField;

/// One world-to-world coordinate map.
#[derive(Debug, Clone)]
pub enum Transform {
    Affine(AffineTransform),
    Displacement(DisplacementField),
}

impl Transform {
    pub fn apply(&self, w: Vector3<f64>) -> Vector3<f64> {
        match self {
            Transform::Affine(a) => a.apply(w),
            Transform::Displacement(f) => f.apply(w),
        }
    }
}

/// Lazy composition of transforms. `chain([f, g])` represents `f(g(x))`:
/// the last element is applied first, the first element last. Building a
/// chain never touches voxel data; resampling through it interpolates the
/// stored volume exactly once however many steps the chain has.
#[derive(Debug, Clone, Default)]
pub struct TransformChain {
    steps: Vec<Transform>,
}

impl TransformChain {
    pub fn identity() -> Self {
        TransformChain { steps: Vec::new() }
    }

    pub fn new(steps: Vec<Transform>) -> Self {
        TransformChain { steps }
    }

    pub fn from_affine(a: AffineTransform) -> Self {
        TransformChain {
            steps: vec![Transform::Affine(a)],
        }
    }

    pub fn from_displacement(f: DisplacementField) -> Self {
        TransformChain {
            steps: vec![Transform::Displacement(f)],
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Composition `self(other(x))`.
    pub fn compose(&self, other: &TransformChain) -> TransformChain {
        let mut steps = self.steps.clone();
        steps.extend(other.steps.iter().cloned());
        TransformChain { steps }
    }

    /// Append a transform applied before everything already in the chain.
    pub fn push_inner(&mut self, t: Transform) {
        self.steps.push(t);
    }

    /// Append a transform applied after everything already in the chain.
    pub fn push_outer(&mut self, t: Transform) {
        self.steps.insert(0, t);
    }

    pub fn apply(&self, w: Vector3<f64>) -> Vector3<f64> {
        let mut p = w;
        for t in self.steps.iter().rev() {
            p = t.apply(p);
        }
        p
    }
}
