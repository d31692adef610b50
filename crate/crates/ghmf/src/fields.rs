//! Scalar and vector fields on regular 1-, 2- and 3-D grids, plus the
//! discrete calculus the solver is built on.
//!
//! Values are stored flat in row-major order with the last axis fastest.
//! The gradient uses forward differences with a zero on the far boundary
//! face of each axis; the divergence is its exact negative adjoint
//! (backward differences, treating the flow as zero outside the grid and on
//! the far face), so `<grad u, q> + <u, div q> = 0` holds for every pair of
//! fields up to rounding. Grid spacing is unit along every axis.
//!
//! Element-wise kernels fan out over worker threads for large grids; every
//! output voxel is computed independently and sums use a fixed block
//! structure, so results are bit-identical for any worker count.

use rayon::prelude::*;
use thiserror::Error;

use crate::scalar::Scalar;

/// Voxel count above which element-wise kernels run on worker threads.
const PAR_THRESHOLD: usize = 8192;
/// Fixed block length for deterministic summation.
const SUM_BLOCK: usize = 4096;

/// Errors from field construction and the ball projection.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FieldError {
    #[error("grid rank must be between 1 and 3, got {0}")]
    BadRank(usize),
    #[error("grid extent along axis {axis} must be at least 1")]
    ZeroExtent { axis: usize },
    #[error("field has {got} values but the grid holds {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("non-finite value at voxel {0}")]
    NonFinite(usize),
    #[error("negative projection cap at voxel {0}")]
    NegativeCap(usize),
}

/// Shape of a regular grid: 1 to 3 axes, each with extent at least 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridGeometry {
    dims: Vec<usize>,
}

impl GridGeometry {
    pub fn new(dims: &[usize]) -> Result<Self, FieldError> {
        if dims.is_empty() || dims.len() > 3 {
            return Err(FieldError::BadRank(dims.len()));
        }
        for (axis, &d) in dims.iter().enumerate() {
            if d == 0 {
                return Err(FieldError::ZeroExtent { axis });
            }
        }
        Ok(GridGeometry { dims: dims.to_vec() })
    }

    /// Number of axes (1 to 3).
    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Extent along each axis.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Total number of voxels.
    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Linear distance between neighbors along `axis` (last axis fastest).
    pub fn stride(&self, axis: usize) -> usize {
        self.dims[axis + 1..].iter().product()
    }

    /// Coordinate of the voxel at linear `index` along `axis`.
    pub fn coordinate(&self, index: usize, axis: usize) -> usize {
        (index / self.stride(axis)) % self.dims[axis]
    }
}

/// One value per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField<T: Scalar> {
    geometry: GridGeometry,
    values: Vec<T>,
}

impl<T: Scalar> ScalarField<T> {
    /// Field holding `value` everywhere.
    pub fn constant(geometry: &GridGeometry, value: T) -> Self {
        ScalarField {
            geometry: geometry.clone(),
            values: vec![value; geometry.voxel_count()],
        }
    }

    /// All-zero field.
    pub fn zeros(geometry: &GridGeometry) -> Self {
        Self::constant(geometry, T::zero())
    }

    /// Wraps raw row-major values; rejects length mismatches and non-finite
    /// entries.
    pub fn from_values(geometry: &GridGeometry, values: Vec<T>) -> Result<Self, FieldError> {
        if values.len() != geometry.voxel_count() {
            return Err(FieldError::LengthMismatch {
                got: values.len(),
                want: geometry.voxel_count(),
            });
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite(bad));
        }
        Ok(ScalarField {
            geometry: geometry.clone(),
            values,
        })
    }

    /// Builds a field by evaluating `f` at every linear voxel index.
    pub fn from_fn(geometry: &GridGeometry, f: impl Fn(usize) -> T + Send + Sync) -> Self {
        let mut values = vec![T::zero(); geometry.voxel_count()];
        par_fill(&mut values, f);
        ScalarField {
            geometry: geometry.clone(),
            values,
        }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Sum of all values (fixed-order blocks; worker-count independent).
    pub fn sum(&self) -> T {
        block_sum(&self.values)
    }

    /// Inner product `sum_x self(x) * other(x)`.
    pub fn dot(&self, other: &ScalarField<T>) -> T {
        assert_eq!(self.geometry, other.geometry, "field geometry mismatch");
        block_dot(&self.values, &other.values)
    }

    /// Smallest value in the field.
    pub fn min_value(&self) -> T {
        self.values.iter().fold(T::infinity(), |a, &b| a.min(b))
    }

    /// Largest value in the field.
    pub fn max_value(&self) -> T {
        self.values.iter().fold(T::neg_infinity(), |a, &b| a.max(b))
    }
}

/// One value per voxel per grid axis, stored as `rank` planes of voxel data
/// (component `d` occupies `values[d * voxels .. (d + 1) * voxels]`).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField<T: Scalar> {
    geometry: GridGeometry,
    values: Vec<T>,
}

impl<T: Scalar> VectorField<T> {
    /// All-zero vector field.
    pub fn zeros(geometry: &GridGeometry) -> Self {
        VectorField {
            geometry: geometry.clone(),
            values: vec![T::zero(); geometry.rank() * geometry.voxel_count()],
        }
    }

    /// Wraps one row-major plane of values per axis.
    pub fn from_components(
        geometry: &GridGeometry,
        components: Vec<Vec<T>>,
    ) -> Result<Self, FieldError> {
        if components.len() != geometry.rank() {
            return Err(FieldError::BadRank(components.len()));
        }
        let n = geometry.voxel_count();
        let mut values = Vec::with_capacity(geometry.rank() * n);
        for plane in components {
            if plane.len() != n {
                return Err(FieldError::LengthMismatch {
                    got: plane.len(),
                    want: n,
                });
            }
            values.extend_from_slice(&plane);
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite(bad % n));
        }
        Ok(VectorField {
            geometry: geometry.clone(),
            values,
        })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    /// Values of component `axis`, one per voxel.
    pub fn component(&self, axis: usize) -> &[T] {
        let n = self.geometry.voxel_count();
        &self.values[axis * n..(axis + 1) * n]
    }

    pub(crate) fn component_mut(&mut self, axis: usize) -> &mut [T] {
        let n = self.geometry.voxel_count();
        &mut self.values[axis * n..(axis + 1) * n]
    }

    /// Inner product `sum_{x,d} self_d(x) * other_d(x)`.
    pub fn dot(&self, other: &VectorField<T>) -> T {
        assert_eq!(self.geometry, other.geometry, "field geometry mismatch");
        block_dot(&self.values, &other.values)
    }

    /// Per-voxel Euclidean norm over the components.
    pub fn norms(&self) -> ScalarField<T> {
        let n = self.geometry.voxel_count();
        let rank = self.geometry.rank();
        let values = &self.values;
        ScalarField::from_fn(&self.geometry, |i| {
            let mut sq = T::zero();
            for d in 0..rank {
                let v = values[d * n + i];
                sq = sq + v * v;
            }
            sq.sqrt()
        })
    }
}

/// Forward-difference gradient; the far boundary face of each axis is zero.
pub fn gradient<T: Scalar>(u: &ScalarField<T>) -> VectorField<T> {
    let geometry = u.geometry().clone();
    let n = geometry.voxel_count();
    let rank = geometry.rank();
    let src = u.values();
    let mut values = vec![T::zero(); rank * n];
    for (axis, plane) in values.chunks_mut(n).enumerate() {
        let stride = geometry.stride(axis);
        let extent = geometry.dims()[axis];
        par_fill(plane, |i| {
            if geometry.coordinate(i, axis) + 1 < extent {
                src[i + stride] - src[i]
            } else {
                T::zero()
            }
        });
    }
    VectorField { geometry, values }
}

/// Backward-difference divergence, the exact negative adjoint of
/// [`gradient`]: flow entering from outside the grid is zero, and the
/// component on the far boundary face (which the gradient never produces)
/// is ignored.
pub fn divergence<T: Scalar>(q: &VectorField<T>) -> ScalarField<T> {
    let geometry = q.geometry().clone();
    let n = geometry.voxel_count();
    let rank = geometry.rank();
    let values = &q.values;
    ScalarField::from_fn(&geometry, |i| {
        let mut acc = T::zero();
        for axis in 0..rank {
            let stride = geometry.stride(axis);
            let coord = geometry.coordinate(i, axis);
            let outgoing = if coord + 1 < geometry.dims()[axis] {
                values[axis * n + i]
            } else {
                T::zero()
            };
            let incoming = if coord > 0 {
                values[axis * n + i - stride]
            } else {
                T::zero()
            };
            acc = acc + outgoing - incoming;
        }
        acc
    })
}

/// Projects each voxel's vector onto the Euclidean ball of radius `cap(x)`:
/// vectors within the ball are untouched, longer ones are rescaled onto the
/// sphere, and a zero cap forces the zero vector.
pub fn project_ball<T: Scalar>(
    q: &VectorField<T>,
    cap: &ScalarField<T>,
) -> Result<VectorField<T>, FieldError> {
    assert_eq!(q.geometry, *cap.geometry(), "field geometry mismatch");
    if let Some(bad) = cap.values().iter().position(|v| *v < T::zero()) {
        return Err(FieldError::NegativeCap(bad));
    }
    let norms = q.norms();
    let caps = cap.values();
    let scale = ScalarField::from_fn(&q.geometry, |i| {
        let norm = norms.values()[i];
        if norm > caps[i] {
            caps[i] / norm
        } else {
            T::one()
        }
    });
    let n = q.geometry.voxel_count();
    let mut out = q.clone();
    for axis in 0..q.geometry.rank() {
        let src = &q.values[axis * n..(axis + 1) * n];
        par_fill(out.component_mut(axis), |i| src[i] * scale.values()[i]);
    }
    Ok(out)
}

/// Fills `out[i] = f(i)`, on worker threads for large slices. Each slot is
/// computed independently, so the result does not depend on thread count.
pub(crate) fn par_fill<T: Scalar>(out: &mut [T], f: impl Fn(usize) -> T + Send + Sync) {
    if out.len() < PAR_THRESHOLD {
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = f(i);
        }
    } else {
        out.par_chunks_mut(PAR_THRESHOLD)
            .enumerate()
            .for_each(|(chunk, slots)| {
                let base = chunk * PAR_THRESHOLD;
                for (j, slot) in slots.iter_mut().enumerate() {
                    *slot = f(base + j);
                }
            });
    }
}

/// Sums in fixed-size blocks: per-block partial sums followed by an in-order
/// fold. The block structure depends only on the length, so the result is
/// bit-identical whether blocks are summed serially or on worker threads.
pub(crate) fn block_sum<T: Scalar>(values: &[T]) -> T {
    block_reduce(values.len(), |range| {
        values[range].iter().fold(T::zero(), |a, &b| a + b)
    })
}

/// Inner product with the same fixed block structure as [`block_sum`].
pub(crate) fn block_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len());
    block_reduce(a.len(), |range| {
        a[range.clone()]
            .iter()
            .zip(&b[range])
            .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
    })
}

fn block_reduce<T: Scalar>(
    len: usize,
    partial: impl Fn(std::ops::Range<usize>) -> T + Send + Sync,
) -> T {
    if len <= SUM_BLOCK {
        return partial(0..len);
    }
    let blocks: Vec<std::ops::Range<usize>> = (0..len)
        .step_by(SUM_BLOCK)
        .map(|start| start..(start + SUM_BLOCK).min(len))
        .collect();
    let partials: Vec<T> = if len < PAR_THRESHOLD {
        blocks.into_iter().map(partial).collect()
    } else {
        blocks.into_par_iter().map(partial).collect()
    };
    partials.iter().fold(T::zero(), |a, &b| a + b)
}
