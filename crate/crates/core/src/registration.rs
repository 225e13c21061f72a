//! Thin-plate-spline registration between deformable configurations.
//!
//! Fields have the form `f(x) = A x + b + sum_i w_i * |x - c_i|`, using the
//! biharmonic kernel of R^3. With known node correspondences the fit is a
//! single linear solve ([`fit_tps`]); without them, soft correspondences are
//! annealed in the style of TPS-RPM ([`fit_tps_rpm`]).
//!
//! Source sets that are coplanar or collinear leave part of the linear map
//! unconstrained by the data. Those directions are completed so that local
//! frames keep their handedness: the normal of a planar set follows the cross
//! product of the mapped in-plane axes, and a collinear set is swung by the
//! minimal rotation taking its axis to the mapped axis.

use nalgebra::{DMatrix, Rotation3, Unit};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{centroid, kabsch_fit_any, Mat3, Pose, Vec3};

/// Configurations with more nodes than this are stride-subsampled before fitting.
pub const MAX_CONTROL_POINTS: usize = 400;
/// Floor applied to the smoothing weight when the exact system is singular.
pub const LAMBDA_FLOOR: f64 = 1e-9;
pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_KERNEL_EPSILON: f64 = 1e-6;

/// Principal spread, relative to the largest, below which a source axis is
/// treated as degenerate. A thin object such as a rope only pins down the
/// map along its length; fitting across it amplifies node jitter.
const FLAT_RATIO: f64 = 0.1;
const MAX_OFFSET_ITERS: usize = 50;

/// Ordered node positions of one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformableConfig {
    pub object_id: String,
    pub nodes: Vec<Vec3>,
}

impl DeformableConfig {
    pub fn new(object_id: impl Into<String>, nodes: Vec<Vec3>) -> Self {
        Self {
            object_id: object_id.into(),
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidInput(format!(
                "configuration `{}` has no nodes",
                self.object_id
            )));
        }
        if !self.nodes.iter().all(|n| n.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "configuration `{}` has non-finite nodes",
                self.object_id
            )));
        }
        Ok(())
    }

    pub fn translated(&self, d: Vec3) -> Self {
        Self::new(self.object_id.clone(), self.nodes.iter().map(|n| n + d).collect())
    }

    pub fn transformed(&self, t: &Pose) -> Self {
        Self::new(
            self.object_id.clone(),
            self.nodes.iter().map(|n| t.transform_point(n)).collect(),
        )
    }
}

/// Smooth map R^3 -> R^3: affine part plus radial-basis weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpField {
    pub control_points: Vec<Vec3>,
    pub rbf_weights: Vec<Vec3>,
    pub affine: Mat3,
    pub offset: Vec3,
    /// Radius below which the kernel gradient denominator is clamped.
    pub kernel_epsilon: f64,
}

impl WarpField {
    pub fn identity() -> Self {
        Self::affine_map(Mat3::identity(), Vec3::zeros())
    }

    pub fn affine_map(affine: Mat3, offset: Vec3) -> Self {
        Self {
            control_points: Vec::new(),
            rbf_weights: Vec::new(),
            affine,
            offset,
            kernel_epsilon: DEFAULT_KERNEL_EPSILON,
        }
    }

    pub fn from_pose(t: &Pose) -> Self {
        Self::affine_map(*t.rotation.matrix(), t.position)
    }

    /// Largest violation of `sum w_i = 0` and `sum w_i c_i^T = 0`.
    pub fn side_condition_error(&self) -> f64 {
        let mut sum = Vec3::zeros();
        let mut moment = Mat3::zeros();
        for (w, c) in self.rbf_weights.iter().zip(&self.control_points) {
            sum += w;
            moment += w * c.transpose();
        }
        sum.amax().max(moment.amax())
    }

    /// Bending energy `-sum_ij w_i . w_j |c_i - c_j|` (non-negative for
    /// weights satisfying the side conditions).
    pub fn bending_energy(&self) -> f64 {
        let n = self.control_points.len();
        let mut e = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let r = (self.control_points[i] - self.control_points[j]).norm();
                e += 2.0 * r * self.rbf_weights[i].dot(&self.rbf_weights[j]);
            }
        }
        -e
    }

    pub fn is_finite(&self) -> bool {
        self.affine.iter().all(|v| v.is_finite())
            && self.offset.iter().all(|v| v.is_finite())
            && self.rbf_weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
    }
}

#[derive(Serialize, Deserialize)]
struct WarpFieldWire {
    control_points: Vec<[f64; 3]>,
    rbf_weights: Vec<[f64; 3]>,
    affine: [[f64; 3]; 3],
    offset: [f64; 3],
    kernel_epsilon: f64,
}

fn arr(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl Serialize for WarpField {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let a = &self.affine;
        WarpFieldWire {
            control_points: self.control_points.iter().map(arr).collect(),
            rbf_weights: self.rbf_weights.iter().map(arr).collect(),
            affine: [
                [a[(0, 0)], a[(0, 1)], a[(0, 2)]],
                [a[(1, 0)], a[(1, 1)], a[(1, 2)]],
                [a[(2, 0)], a[(2, 1)], a[(2, 2)]],
            ],
            offset: arr(&self.offset),
            kernel_epsilon: self.kernel_epsilon,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for WarpField {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = WarpFieldWire::deserialize(d)?;
        if w.control_points.len() != w.rbf_weights.len() {
            return Err(serde::de::Error::custom(
                "control_points and rbf_weights differ in length",
            ));
        }
        let a = w.affine;
        Ok(WarpField {
            control_points: w.control_points.into_iter().map(Vec3::from).collect(),
            rbf_weights: w.rbf_weights.into_iter().map(Vec3::from).collect(),
            affine: Mat3::new(
                a[0][0], a[0][1], a[0][2], a[1][0], a[1][1], a[1][2], a[2][0], a[2][1], a[2][2],
            ),
            offset: Vec3::from(w.offset),
            kernel_epsilon: w.kernel_epsilon,
        })
    }
}

/// Fitted field with its cost decomposition.
///
/// `cost = data_term + lambda * bending_energy`, where both terms are
/// divided by the number of control points so that costs are comparable
/// across objects with different node counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub field: WarpField,
    pub cost: f64,
    /// Normalized (weighted) sum of squared match errors.
    pub data_term: f64,
    /// Mean point-match distance, meters.
    pub residual: f64,
    pub bending_energy: f64,
    pub lambda: f64,
    /// Source nodes were affinely dependent; unconstrained directions of the
    /// linear part were completed.
    pub degenerate: bool,
    /// The exact system was singular and was re-solved with [`LAMBDA_FLOOR`].
    pub regularized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correspondence: Option<Vec<Vec<f64>>>,
}

pub fn registration_cost(result: &RegistrationResult) -> f64 {
    result.cost
}

/// Principal frame of a centered point set, with the indices of axes that
/// carry real spread.
struct Principal {
    center: Vec3,
    axes: [Vec3; 3],
    kept: usize,
}

fn principal_frame(points: &[Vec3]) -> Principal {
    let center = centroid(points);
    let mut scatter = Mat3::zeros();
    for p in points {
        let d = p - center;
        scatter += d * d.transpose();
    }
    let n = points.len().max(1) as f64;
    let eig = scatter.symmetric_eigen();
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let spread: Vec<f64> = idx
        .iter()
        .map(|&k| (eig.eigenvalues[k].max(0.0) / n).sqrt())
        .collect();
    let mut axes = [
        eig.eigenvectors.column(idx[0]).into_owned(),
        eig.eigenvectors.column(idx[1]).into_owned(),
        eig.eigenvectors.column(idx[2]).into_owned(),
    ];
    // deterministic orientation: right-handed, first axis with a positive
    // leading nonzero component
    for a in axes.iter_mut().take(2) {
        let lead = a.iter().copied().find(|v| v.abs() > 1e-12).unwrap_or(1.0);
        if lead < 0.0 {
            *a = -*a;
        }
    }
    axes[2] = axes[0].cross(&axes[1]);
    let tol = 1e-9 + FLAT_RATIO * spread[0];
    let kept = spread.iter().take_while(|&&s| s > tol).count();
    Principal { center, axes, kept }
}

fn unit_perpendicular(v: &Vec3) -> Vec3 {
    let z = Vec3::z();
    let p = z - v * v.dot(&z);
    if p.norm() > 1e-6 {
        return p.normalize();
    }
    let x = Vec3::x();
    (x - v * v.dot(&x)).normalize()
}

/// Completes the linear map on directions not spanned by the source set.
fn complete_linear(frame: &Principal, mapped: &[Vec3]) -> Mat3 {
    let u = &frame.axes;
    let images: [Vec3; 3] = match frame.kept {
        3 => [mapped[0], mapped[1], mapped[2]],
        2 => {
            let c = mapped[0].cross(&mapped[1]);
            let n = c.norm();
            let a3 = if n > 1e-12 { c / n.sqrt() } else { u[2] };
            [mapped[0], mapped[1], a3]
        }
        1 => {
            let a1 = mapped[0];
            let s = a1.norm();
            if s < 1e-12 {
                [a1, u[1], u[2]]
            } else {
                let dir = a1 / s;
                let rot = Rotation3::rotation_between(&u[0], &dir).unwrap_or_else(|| {
                    Rotation3::from_axis_angle(
                        &Unit::new_normalize(unit_perpendicular(&u[0])),
                        std::f64::consts::PI,
                    )
                });
                [a1, rot * u[1] * s, rot * u[2] * s]
            }
        }
        _ => [u[0], u[1], u[2]],
    };
    let mut a = Mat3::zeros();
    for k in 0..3 {
        a += images[k] * u[k].transpose();
    }
    a
}

struct Solved {
    field: WarpField,
    degenerate: bool,
    regularized: bool,
}

/// Control points expressed in their principal frame. Degenerate sets are
/// flattened onto the subspace they span so that the side conditions hold
/// exactly for the stored control points.
struct Prepared {
    frame: Principal,
    local: Vec<Vec<f64>>,
    ctrl_used: Vec<Vec3>,
    delta: Vec<Vec3>,
}

impl Prepared {
    fn new(ctrl: &[Vec3]) -> Self {
        let frame = principal_frame(ctrl);
        let local: Vec<Vec<f64>> = ctrl
            .iter()
            .map(|c| {
                let d = c - frame.center;
                (0..frame.kept).map(|k| d.dot(&frame.axes[k])).collect()
            })
            .collect();
        let ctrl_used: Vec<Vec3> = if frame.kept < 3 {
            local
                .iter()
                .map(|coords| {
                    coords
                        .iter()
                        .enumerate()
                        .fold(frame.center, |acc, (k, v)| acc + frame.axes[k] * *v)
                })
                .collect()
        } else {
            ctrl.to_vec()
        };
        let delta = ctrl.iter().zip(&ctrl_used).map(|(c, f)| c - f).collect();
        Self {
            frame,
            local,
            ctrl_used,
            delta,
        }
    }

    fn n(&self) -> usize {
        self.ctrl_used.len()
    }

    fn d(&self) -> usize {
        self.frame.kept
    }

    fn kernel(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, n, |i, j| (self.ctrl_used[i] - self.ctrl_used[j]).norm())
    }

    /// `[1, local coordinates]` for every control point.
    fn polynomial(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.d() + 1, |i, k| if k == 0 { 1.0 } else { self.local[i][k - 1] })
    }

    /// Runs `solve` on targets corrected for the out-of-subspace offsets.
    ///
    /// `solve` maps an `n x 3` target block to an `(n + 1 + d) x 3` block of
    /// kernel weights, constant term and images of the principal axes. Each
    /// node's offset from the subspace is carried by the completed linear
    /// map, so the targets are corrected by that image until the map stops
    /// changing.
    fn fit(
        &self,
        tgt: &[Vec3],
        regularized: bool,
        mut solve: impl FnMut(&DMatrix<f64>) -> Result<DMatrix<f64>>,
    ) -> Result<Solved> {
        let (n, d) = (self.n(), self.d());
        let has_offsets = self.delta.iter().any(|d| d.norm() > 0.0);
        let scale = tgt.iter().map(|t| t.norm()).fold(1.0, f64::max);
        let mut shift = vec![Vec3::zeros(); n];
        let mut iterations = 0;
        let (sol, affine) = loop {
            let rhs = DMatrix::from_fn(n, 3, |i, c| tgt[i][c] - shift[i][c]);
            let sol = solve(&rhs)?;
            if !sol.iter().all(|v| v.is_finite()) {
                return Err(Error::DegenerateInput("spline system is singular".into()));
            }
            let mapped: Vec<Vec3> = (0..d)
                .map(|k| Vec3::new(sol[(n + 1 + k, 0)], sol[(n + 1 + k, 1)], sol[(n + 1 + k, 2)]))
                .collect();
            let affine = complete_linear(&self.frame, &mapped);
            iterations += 1;
            if !has_offsets || iterations >= MAX_OFFSET_ITERS {
                break (sol, affine);
            }
            let next: Vec<Vec3> = self.delta.iter().map(|d| affine * d).collect();
            let change = next
                .iter()
                .zip(&shift)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            shift = next;
            if change <= 1e-14 * scale {
                break (sol, affine);
            }
        };

        let rbf_weights: Vec<Vec3> = (0..n)
            .map(|i| Vec3::new(sol[(i, 0)], sol[(i, 1)], sol[(i, 2)]))
            .collect();
        let constant = Vec3::new(sol[(n, 0)], sol[(n, 1)], sol[(n, 2)]);
        let offset = constant - affine * self.frame.center;
        Ok(Solved {
            field: WarpField {
                control_points: self.ctrl_used.clone(),
                rbf_weights,
                affine,
                offset,
                kernel_epsilon: DEFAULT_KERNEL_EPSILON,
            },
            degenerate: self.frame.kept < 3,
            regularized,
        })
    }
}

/// Solves the (optionally weighted) smoothing-spline system for control
/// points `ctrl` and targets `tgt`.
fn solve_tps(ctrl: &[Vec3], tgt: &[Vec3], weights: Option<&[f64]>, lambda: f64) -> Result<Solved> {
    let prep = Prepared::new(ctrl);
    let (n, d) = (prep.n(), prep.d());
    let m = n + 1 + d;
    let kernel = prep.kernel();
    let poly = prep.polynomial();
    let build = |lam: f64| -> DMatrix<f64> {
        let mut sys = DMatrix::<f64>::zeros(m, m);
        sys.view_mut((0, 0), (n, n)).copy_from(&kernel);
        sys.view_mut((0, n), (n, d + 1)).copy_from(&poly);
        sys.view_mut((n, 0), (d + 1, n)).copy_from(&poly.transpose());
        for i in 0..n {
            let w = weights.map_or(1.0, |w| w[i].max(1e-8));
            sys[(i, i)] = -lam / w;
        }
        sys
    };
    let factor = |lam: f64| -> Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
        let lu = build(lam).lu();
        lu.is_invertible().then_some(lu)
    };
    let (lu, regularized) = match factor(lambda) {
        Some(lu) => (lu, false),
        None if lambda < LAMBDA_FLOOR => (
            factor(LAMBDA_FLOOR).ok_or_else(|| {
                Error::DegenerateInput("spline system singular even with regularization".into())
            })?,
            true,
        ),
        None => {
            return Err(Error::DegenerateInput("spline system is singular".into()));
        }
    };
    prep.fit(tgt, regularized, |rhs| {
        let mut full = DMatrix::<f64>::zeros(m, 3);
        full.view_mut((0, 0), (n, 3)).copy_from(rhs);
        lu.solve(&full)
            .ok_or_else(|| Error::DegenerateInput("spline system is singular".into()))
    })
}

/// Weighted spline fit with an extra penalty `mu * |L - I|^2` pulling the
/// linear part `L` (in the principal frame) toward the identity.
///
/// Kernel weights are parameterized as `N g` with `N` a basis of the null
/// space of the polynomial block, so the side conditions hold by
/// construction; the remaining unknowns come from the normal equations.
struct AnchoredTps {
    prep: Prepared,
    poly: DMatrix<f64>,
    /// `K N`
    kn: DMatrix<f64>,
    /// `N^T K N` (negative semidefinite for the biharmonic kernel)
    ntkn: DMatrix<f64>,
    null: DMatrix<f64>,
}

impl AnchoredTps {
    fn new(ctrl: &[Vec3]) -> Self {
        let prep = Prepared::new(ctrl);
        let n = prep.n();
        let poly = prep.polynomial();
        let q = n.saturating_sub(poly.ncols());
        // the trailing eigenvectors of the projector onto range(P) span its
        // orthogonal complement
        let gram = poly.transpose() * &poly;
        let proj = match gram.clone().try_inverse() {
            Some(inv) => &poly * inv * poly.transpose(),
            None => DMatrix::zeros(n, n),
        };
        let eig = proj.symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let null = DMatrix::from_fn(n, q, |i, k| eig.eigenvectors[(i, order[k])]);
        let kernel = prep.kernel();
        let kn = &kernel * &null;
        let ntkn = null.transpose() * &kn;
        Self {
            prep,
            poly,
            kn,
            ntkn,
            null,
        }
    }

    fn solve(&self, tgt: &[Vec3], weights: &[f64], lambda: f64, mu: f64) -> Result<Solved> {
        let (n, d) = (self.prep.n(), self.prep.d());
        let q = self.null.ncols();
        let size = q + d + 1;
        let w: Vec<f64> = weights.iter().map(|w| w.max(1e-8)).collect();
        let wkn = DMatrix::from_fn(n, q, |i, k| w[i] * self.kn[(i, k)]);
        let wp = DMatrix::from_fn(n, d + 1, |i, k| w[i] * self.poly[(i, k)]);
        let mut h = DMatrix::<f64>::zeros(size, size);
        h.view_mut((0, 0), (q, q))
            .copy_from(&(self.kn.transpose() * &wkn - &self.ntkn * lambda));
        let cross = self.kn.transpose() * &wp;
        h.view_mut((0, q), (q, d + 1)).copy_from(&cross);
        h.view_mut((q, 0), (d + 1, q)).copy_from(&cross.transpose());
        let mut pwp = self.poly.transpose() * &wp;
        for k in 1..=d {
            pwp[(k, k)] += mu;
        }
        h.view_mut((q, q), (d + 1, d + 1)).copy_from(&pwp);
        let lu = h.lu();
        if !lu.is_invertible() {
            return Err(Error::DegenerateInput("anchored spline system is singular".into()));
        }
        let axes = self.prep.frame.axes;
        self.prep.fit(tgt, false, |y| {
            let mut rhs = DMatrix::<f64>::zeros(size, 3);
            rhs.view_mut((0, 0), (q, 3)).copy_from(&(wkn.transpose() * y));
            rhs.view_mut((q, 0), (d + 1, 3)).copy_from(&(wp.transpose() * y));
            for k in 1..=d {
                for c in 0..3 {
                    rhs[(q + k, c)] += mu * axes[k - 1][c];
                }
            }
            let x = lu
                .solve(&rhs)
                .ok_or_else(|| Error::DegenerateInput("anchored spline system is singular".into()))?;
            let mut sol = DMatrix::<f64>::zeros(n + 1 + d, 3);
            sol.view_mut((0, 0), (n, 3))
                .copy_from(&(&self.null * x.view((0, 0), (q, 3))));
            sol.view_mut((n, 0), (d + 1, 3)).copy_from(&x.view((q, 0), (d + 1, 3)));
            Ok(sol)
        })
    }
}

/// Stride indices keeping at most [`MAX_CONTROL_POINTS`].
fn control_indices(n: usize) -> Vec<usize> {
    let stride = n.div_ceil(MAX_CONTROL_POINTS).max(1);
    (0..n).step_by(stride).collect()
}

/// Smoothing thin-plate spline with node-indexed correspondence.
pub fn fit_tps(src: &DeformableConfig, tgt: &DeformableConfig, lambda: f64) -> Result<RegistrationResult> {
    if src.len() != tgt.len() {
        return Err(Error::ShapeMismatch {
            src: src.len(),
            tgt: tgt.len(),
        });
    }
    src.validate()?;
    tgt.validate()?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("lambda must be >= 0, got {lambda}")));
    }
    let idx = control_indices(src.len());
    let ctrl: Vec<Vec3> = idx.iter().map(|&i| src.nodes[i]).collect();
    let goal: Vec<Vec3> = idx.iter().map(|&i| tgt.nodes[i]).collect();

    let solved = solve_tps(&ctrl, &goal, None, lambda)?;
    let field = solved.field;
    let n = ctrl.len() as f64;
    let sq: f64 = ctrl
        .iter()
        .zip(&goal)
        .map(|(a, b)| (field.eval(a) - b).norm_squared())
        .sum();
    let data_term = sq / n;
    let bending_energy = (field.bending_energy() / n).max(0.0);
    let residual = src
        .nodes
        .iter()
        .zip(&tgt.nodes)
        .map(|(a, b)| (field.eval(a) - b).norm())
        .sum::<f64>()
        / src.len() as f64;
    let lam = if solved.regularized { LAMBDA_FLOOR } else { lambda };
    let cost = data_term + lam * bending_energy;
    if !cost.is_finite() || !field.is_finite() {
        return Err(Error::NonConvergence("non-finite spline fit".into()));
    }
    Ok(RegistrationResult {
        field,
        cost,
        data_term,
        residual,
        bending_energy,
        lambda: lam,
        degenerate: solved.degenerate,
        regularized: solved.regularized,
        correspondence: None,
    })
}

/// Annealing schedule and weights for correspondence-free registration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpmParams {
    /// Starting temperature (squared meters); `None` uses half the squared
    /// bounding-box diagonal of both sets.
    pub t_init: Option<f64>,
    /// Final temperature as a fraction of the starting one.
    pub t_final_ratio: f64,
    pub anneal_rate: f64,
    pub outlier_weight: f64,
    pub inner_iters: usize,
    /// Smoothing weight at the final temperature; earlier temperatures scale
    /// it up in proportion to `T`.
    pub lambda: f64,
    pub sinkhorn_iters: usize,
    /// Weight of the pull of the linear part toward the identity, relative
    /// to the weighted spread of the source, at the final temperature; it
    /// follows the same schedule as `lambda`.
    #[serde(default = "default_affine_lambda")]
    pub affine_lambda: f64,
}

fn default_affine_lambda() -> f64 {
    1e-3
}

impl Default for RpmParams {
    fn default() -> Self {
        Self {
            t_init: None,
            t_final_ratio: 1.0 / 500.0,
            anneal_rate: 0.93,
            outlier_weight: 0.1,
            inner_iters: 5,
            lambda: 1e-4,
            sinkhorn_iters: 30,
            affine_lambda: default_affine_lambda(),
        }
    }
}

fn bbox_diagonal(a: &[Vec3], b: &[Vec3]) -> f64 {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in a.iter().chain(b) {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).norm()
}

/// Soft assignment with an outlier row and column, normalized so that no
/// row or column of the inner block sums above one.
fn soft_assign(warped: &[Vec3], tgt: &[Vec3], temperature: f64, params: &RpmParams) -> Vec<Vec<f64>> {
    let (n, m) = (warped.len(), tgt.len());
    let mut mat = vec![vec![0.0; m + 1]; n + 1];
    for (i, w) in warped.iter().enumerate() {
        for (j, t) in tgt.iter().enumerate() {
            mat[i][j] = (-(w - t).norm_squared() / temperature).exp();
        }
        mat[i][m] = params.outlier_weight;
    }
    for j in 0..m {
        mat[n][j] = params.outlier_weight;
    }
    for _ in 0..params.sinkhorn_iters {
        for row in mat.iter_mut().take(n) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        for j in 0..m {
            let s: f64 = (0..=n).map(|i| mat[i][j]).sum();
            if s > 0.0 {
                (0..=n).for_each(|i| mat[i][j] /= s);
            }
        }
    }
    let mut inner: Vec<Vec<f64>> = mat.into_iter().take(n).map(|mut r| {
        r.truncate(m);
        r
    }).collect();
    for row in inner.iter_mut() {
        let s: f64 = row.iter().sum();
        if s > 1.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    for j in 0..m {
        let s: f64 = inner.iter().map(|r| r[j]).sum();
        if s > 1.0 {
            inner.iter_mut().for_each(|r| r[j] /= s);
        }
    }
    inner
}

/// Registration without known correspondences or equal node counts.
pub fn fit_tps_rpm(src: &DeformableConfig, tgt: &DeformableConfig, params: &RpmParams) -> Result<RegistrationResult> {
    src.validate()?;
    tgt.validate()?;
    if !(params.anneal_rate > 0.0 && params.anneal_rate < 1.0)
        || !(params.t_final_ratio > 0.0 && params.t_final_ratio <= 1.0)
        || params.inner_iters == 0
    {
        return Err(Error::InvalidInput("invalid annealing schedule".into()));
    }
    let idx = control_indices(src.len());
    let ctrl: Vec<Vec3> = idx.iter().map(|&i| src.nodes[i]).collect();
    let targets = &tgt.nodes;

    let t_init = params.t_init.unwrap_or_else(|| {
        let d = bbox_diagonal(&ctrl, targets);
        0.5 * d * d
    });
    if !(t_init.is_finite() && t_init > 0.0) {
        return Err(Error::NonConvergence(format!("bad starting temperature {t_init}")));
    }
    let t_final = t_init * params.t_final_ratio;

    let anchored = AnchoredTps::new(&ctrl);
    let spread: Vec<f64> = ctrl.iter().map(|c| (c - anchored.prep.frame.center).norm_squared()).collect();
    let mut field = WarpField::identity();
    let mut temperature = t_init;
    let mut last: Option<(Solved, Vec<f64>, Vec<Vec3>, f64)> = None;
    loop {
        let lam = params.lambda * temperature / t_final;
        for _ in 0..params.inner_iters {
            let warped: Vec<Vec3> = ctrl.iter().map(|c| field.eval(c)).collect();
            let assign = soft_assign(&warped, targets, temperature, params);
            let mut w = Vec::with_capacity(ctrl.len());
            let mut virt = Vec::with_capacity(ctrl.len());
            for (i, row) in assign.iter().enumerate() {
                let s: f64 = row.iter().sum();
                w.push(s);
                if s > 1e-12 {
                    let y = row
                        .iter()
                        .zip(targets)
                        .fold(Vec3::zeros(), |acc, (m, t)| acc + t * *m)
                        / s;
                    virt.push(y);
                } else {
                    virt.push(warped[i]);
                }
            }
            let s_w: f64 = spread.iter().zip(&w).map(|(s, wi)| s * wi).sum();
            let mu = params.affine_lambda * temperature / t_final * s_w;
            let solved = anchored.solve(&virt, &w, lam, mu)?;
            if !solved.field.is_finite() {
                return Err(Error::NonConvergence(format!(
                    "non-finite field at temperature {temperature:.3e}"
                )));
            }
            field = solved.field.clone();
            last = Some((solved, w, virt, lam));
        }
        if temperature <= t_final * (1.0 + 1e-12) {
            break;
        }
        temperature = (temperature * params.anneal_rate).max(t_final);
    }

    let (solved, w, virt, lam) = last.expect("at least one annealing step");
    let n = ctrl.len() as f64;
    let data_sum: f64 = ctrl
        .iter()
        .zip(&virt)
        .zip(&w)
        .map(|((c, y), wi)| wi.max(1e-8) * (field.eval(c) - y).norm_squared())
        .sum();
    let data_term = data_sum / n;
    let bending_energy = (field.bending_energy() / n).max(0.0);
    let cost = data_term + lam * bending_energy;
    if !cost.is_finite() {
        return Err(Error::NonConvergence("cost is not finite".into()));
    }

    let warped: Vec<Vec3> = ctrl.iter().map(|c| field.eval(c)).collect();
    let assign = soft_assign(&warped, targets, t_final, params);
    // distance to the hard match of each row, weighted by its inlier mass
    let mut mass = 0.0;
    let mut dist = 0.0;
    for (i, row) in assign.iter().enumerate() {
        let Some(best) = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])) else { continue };
        let inlier: f64 = row.iter().sum();
        mass += inlier;
        dist += inlier * (warped[i] - targets[best]).norm();
    }
    let residual = if mass > 0.0 { dist / mass } else { f64::INFINITY };
    if !residual.is_finite() {
        return Err(Error::NonConvergence("no mass left in the correspondence".into()));
    }

    Ok(RegistrationResult {
        field,
        cost,
        data_term,
        residual,
        bending_energy,
        lambda: lam,
        degenerate: solved.degenerate,
        regularized: solved.regularized,
        correspondence: Some(assign),
    })
}

/// Rigid least-squares registration with a cost on the same scale as
/// [`fit_tps`] (mean squared node error).
///
/// Unlike [`crate::geometry::kabsch_fit`], a collinear source such as a straight rope is
/// accepted.
pub fn rigid_register(src: &DeformableConfig, tgt: &DeformableConfig) -> Result<(Pose, f64)> {
    let pose = kabsch_fit_any(&src.nodes, &tgt.nodes)?;
    let cost = src
        .nodes
        .iter()
        .zip(&tgt.nodes)
        .map(|(a, b)| (pose.transform_point(a) - b).norm_squared())
        .sum::<f64>()
        / src.len() as f64;
    Ok((pose, cost))
}

/// How the rigid baseline assigns a frame to a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RigidFrame {
    /// Least-squares fit over all nodes.
    #[default]
    Kabsch,
    /// Origin at the middle of the node chain, x along the first-to-last
    /// chord, z as close to world up as possible.
    Chord,
}

/// Chord frame of an ordered node chain.
pub fn chord_frame(cfg: &DeformableConfig) -> Result<Pose> {
    let n = cfg.len();
    if n < 2 {
        return Err(Error::DegenerateInput("chord frame needs at least 2 nodes".into()));
    }
    let origin = if n % 2 == 0 {
        (cfg.nodes[n / 2 - 1] + cfg.nodes[n / 2]) / 2.0
    } else {
        cfg.nodes[n / 2]
    };
    let chord = cfg.nodes[n - 1] - cfg.nodes[0];
    if chord.norm() < 1e-9 {
        return Err(Error::DegenerateInput("chain ends coincide".into()));
    }
    let x = chord.normalize();
    let up = Vec3::z();
    let z = {
        let p = up - x * x.dot(&up);
        if p.norm() > 1e-6 {
            p.normalize()
        } else {
            (Vec3::y() - x * x.dot(&Vec3::y())).normalize()
        }
    };
    let y = z.cross(&x);
    let m = Mat3::from_columns(&[x, y, z]);
    Ok(Pose::new(origin, Rotation3::from_matrix_unchecked(m)))
}

/// [`rigid_register`] with a selectable frame convention.
pub fn rigid_register_with(src: &DeformableConfig, tgt: &DeformableConfig, frame: RigidFrame) -> Result<(Pose, f64)> {
    match frame {
        RigidFrame::Kabsch => rigid_register(src, tgt),
        RigidFrame::Chord => {
            if src.len() != tgt.len() {
                return Err(Error::ShapeMismatch {
                    src: src.len(),
                    tgt: tgt.len(),
                });
            }
            let pose = crate::geometry::compose(&chord_frame(tgt)?, &crate::geometry::inverse(&chord_frame(src)?));
            let cost = src
                .nodes
                .iter()
                .zip(&tgt.nodes)
                .map(|(a, b)| (pose.transform_point(a) - b).norm_squared())
                .sum::<f64>()
                / src.len() as f64;
            Ok((pose, cost))
        }
    }
}
