//! Shape representations, their infinitesimal deformation actions and the
//! matching functionals used as data attachment.
//!
//! Every shape exposes a flat vector of degrees of freedom (point
//! coordinates, or pixel intensities) and a [`Momentum`] always has the same
//! layout as those degrees of freedom.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{self, GridGeometry, VectorField};
use crate::kernels::KernelSpec;
use crate::points::{dot, sq_dist, PointCloud};

/// Minimum admissible length of a curve segment.
pub const MIN_SEGMENT_LENGTH: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkShape {
    points: PointCloud,
}

impl LandmarkShape {
    pub fn new(points: PointCloud) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("landmark shape needs at least one point"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &PointCloud {
        &self.points
    }
}

/// Scalar field sampled on a cell-centred grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridImage {
    geometry: GridGeometry,
    values: Vec<f64>,
}

impl GridImage {
    pub fn new(geometry: GridGeometry, values: Vec<f64>) -> Result<Self> {
        geometry.validate()?;
        if values.len() != geometry.len() {
            return Err(invalid(format!(
                "image of {}x{} needs {} values, got {}",
                geometry.rows,
                geometry.cols,
                geometry.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("image values must be finite"));
        }
        Ok(Self { geometry, values })
    }

    /// Sample `f(x, y)` at every pixel centre.
    pub fn from_fn(geometry: GridGeometry, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(geometry.len());
        for r in 0..geometry.rows {
            for c in 0..geometry.cols {
                let [x, y] = geometry.center(r, c);
                values.push(f(x, y));
            }
        }
        Self::new(geometry, values)
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn gradient(&self) -> [Vec<f64>; 2] {
        grid::gradient(&self.geometry, &self.values)
    }
}

/// Ordered polyline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveShape {
    vertices: PointCloud,
}

impl CurveShape {
    pub fn new(vertices: PointCloud) -> Result<Self> {
        if vertices.len() < 2 {
            return Err(invalid("curve needs at least two vertices"));
        }
        for i in 0..vertices.len() - 1 {
            if sq_dist(vertices.point(i), vertices.point(i + 1)).sqrt() <= MIN_SEGMENT_LENGTH {
                return Err(invalid(format!("curve vertices {i} and {} coincide", i + 1)));
            }
        }
        Ok(Self { vertices })
    }

    /// Graph of a sampled function as a planar curve, with both axes mapped
    /// affinely onto `[0, 1]`. A constant axis maps to 0.
    pub fn from_graph(t: &[f64], y: &[f64]) -> Result<Self> {
        if t.len() != y.len() {
            return Err(invalid("time and value columns differ in length"));
        }
        let unit = |v: &[f64]| -> Vec<f64> {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            v.iter().map(|x| if span > 0.0 { (x - lo) / span } else { 0.0 }).collect()
        };
        let (tn, yn) = (unit(t), unit(y));
        let coords = tn.iter().zip(&yn).flat_map(|(a, b)| [*a, *b]).collect();
        Self::new(PointCloud::new(2, coords)?)
    }

    pub fn vertices(&self) -> &PointCloud {
        &self.vertices
    }

    pub fn embedding(&self) -> CurrentEmbedding {
        CurrentEmbedding::of_vertices(self.vertices.dim(), self.vertices.coords())
    }
}

/// A polyline seen as a current: one Dirac per segment, located at the
/// segment midpoint and carrying the (un-normalised) segment vector.
#[derive(Clone, Debug, PartialEq)]
pub struct CurrentEmbedding {
    pub dim: usize,
    pub centers: Vec<f64>,
    pub tangents: Vec<f64>,
}

impl CurrentEmbedding {
    pub(crate) fn of_vertices(dim: usize, v: &[f64]) -> Self {
        let m = v.len() / dim;
        let mut centers = Vec::with_capacity((m - 1) * dim);
        let mut tangents = Vec::with_capacity((m - 1) * dim);
        for s in 0..m - 1 {
            for c in 0..dim {
                let (a, b) = (v[s * dim + c], v[(s + 1) * dim + c]);
                centers.push(0.5 * (a + b));
                tangents.push(b - a);
            }
        }
        Self { dim, centers, tangents }
    }

    pub fn segments(&self) -> usize {
        self.centers.len() / self.dim
    }

    fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }

    fn tangent(&self, i: usize) -> &[f64] {
        &self.tangents[i * self.dim..(i + 1) * self.dim]
    }

    /// Inner product of two currents in the RKHS of `kernel`.
    pub fn inner(&self, other: &CurrentEmbedding, kernel: &KernelSpec) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.segments() {
            for j in 0..other.segments() {
                acc += kernel.eval(self.center(i), other.center(j)) * dot(self.tangent(i), other.tangent(j));
            }
        }
        acc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Landmarks(LandmarkShape),
    Image(GridImage),
    Curve(CurveShape),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Landmarks,
    Image,
    Curve,
}

impl Shape {
    pub fn kind(&self) -> ShapeKind {
        match self {
            Shape::Landmarks(_) => ShapeKind::Landmarks,
            Shape::Image(_) => ShapeKind::Image,
            Shape::Curve(_) => ShapeKind::Curve,
        }
    }

    /// Flattened degrees of freedom.
    pub fn dofs(&self) -> &[f64] {
        match self {
            Shape::Landmarks(l) => l.points.coords(),
            Shape::Image(i) => &i.values,
            Shape::Curve(c) => c.vertices.coords(),
        }
    }

    pub fn dof_len(&self) -> usize {
        self.dofs().len()
    }

    /// Point cloud of a landmark or curve shape.
    pub fn points(&self) -> Option<&PointCloud> {
        match self {
            Shape::Landmarks(l) => Some(&l.points),
            Shape::Curve(c) => Some(&c.vertices),
            Shape::Image(_) => None,
        }
    }

    /// Same representation with new degrees of freedom. Curve validity is
    /// not re-checked, so deformed curves with near-coincident vertices are
    /// still representable.
    pub fn with_dofs(&self, dofs: Vec<f64>) -> Result<Shape> {
        if dofs.len() != self.dof_len() {
            return Err(invalid(format!("expected {} degrees of freedom, got {}", self.dof_len(), dofs.len())));
        }
        Ok(match self {
            Shape::Landmarks(l) => Shape::Landmarks(LandmarkShape { points: PointCloud::new(l.points.dim(), dofs)? }),
            Shape::Image(i) => Shape::Image(GridImage::new(i.geometry, dofs)?),
            Shape::Curve(c) => Shape::Curve(CurveShape { vertices: PointCloud::new(c.vertices.dim(), dofs)? }),
        })
    }

    /// Cell area for images (the L² pairing density), 1 for point shapes.
    pub fn pairing_weight(&self) -> f64 {
        match self {
            Shape::Image(i) => i.geometry.cell_area(),
            _ => 1.0,
        }
    }
}

/// Co-state attached to a shape; same layout as [`Shape::dofs`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Momentum(pub Vec<f64>);

impl Momentum {
    pub fn zeros_like(shape: &Shape) -> Self {
        Momentum(vec![0.0; shape.dof_len()])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn check_layout(&self, shape: &Shape) -> Result<()> {
        if self.0.len() != shape.dof_len() {
            return Err(Error::RepresentationMismatch(format!(
                "momentum has {} entries, shape has {} degrees of freedom",
                self.0.len(),
                shape.dof_len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchKind {
    L2Landmarks,
    L2Image,
    CurrentMmd,
}

/// Matching functional and its weight in the registration loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchSpec {
    pub kind: MatchKind,
    /// Kernel of the current space; required for [`MatchKind::CurrentMmd`].
    pub current_kernel: Option<KernelSpec>,
    pub weight: f64,
}

impl MatchSpec {
    pub fn new(kind: MatchKind, weight: f64) -> Self {
        Self { kind, current_kernel: None, weight }
    }

    pub fn current(kernel: KernelSpec, weight: f64) -> Self {
        Self { kind: MatchKind::CurrentMmd, current_kernel: Some(kernel), weight }
    }

    /// Weight `10 / sigma²` for a matching noise scale `sigma`.
    pub fn weight_for_sigma(sigma: f64) -> f64 {
        10.0 / (sigma * sigma)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight.is_finite() && self.weight > 0.0) {
            return Err(invalid("matching weight must be positive"));
        }
        if self.kind == MatchKind::CurrentMmd {
            self.current_kernel.ok_or_else(|| invalid("current matching needs a kernel"))?.validate()?;
        }
        Ok(())
    }
}

/// Matching cost with its gradient with respect to the first shape's
/// degrees of freedom. The weight of the spec is NOT applied.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchValue {
    pub cost: f64,
    pub gradient: Vec<f64>,
}

pub fn match_cost(q1: &Shape, q2: &Shape, spec: &MatchSpec) -> Result<MatchValue> {
    spec.validate()?;
    match spec.kind {
        MatchKind::L2Landmarks => {
            let (a, b) = match (q1.points(), q2.points()) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::RepresentationMismatch("L2 landmark matching needs point-based shapes".into())),
            };
            if a.dim() != b.dim() || a.len() != b.len() {
                return Err(Error::RepresentationMismatch(format!(
                    "{} points in R^{} vs {} points in R^{}",
                    a.len(),
                    a.dim(),
                    b.len(),
                    b.dim()
                )));
            }
            let n = a.len() as f64;
            let diff: Vec<f64> = a.coords().iter().zip(b.coords()).map(|(x, y)| x - y).collect();
            Ok(MatchValue {
                cost: diff.iter().map(|d| d * d).sum::<f64>() / n,
                gradient: diff.iter().map(|d| 2.0 * d / n).collect(),
            })
        }
        MatchKind::L2Image => {
            let (a, b) = match (q1, q2) {
                (Shape::Image(a), Shape::Image(b)) => (a, b),
                _ => return Err(Error::RepresentationMismatch("L2 image matching needs two images".into())),
            };
            if !a.geometry.same_as(&b.geometry) {
                return Err(Error::GridMismatch(format!("{:?} vs {:?}", a.geometry, b.geometry)));
            }
            let w = a.geometry.cell_area();
            let diff: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
            Ok(MatchValue {
                cost: w * diff.iter().map(|d| d * d).sum::<f64>(),
                gradient: diff.iter().map(|d| 2.0 * w * d).collect(),
            })
        }
        MatchKind::CurrentMmd => {
            let (a, b) = match (q1, q2) {
                (Shape::Curve(a), Shape::Curve(b)) => (a, b),
                _ => return Err(Error::RepresentationMismatch("current matching needs two curves".into())),
            };
            if a.vertices.dim() != b.vertices.dim() {
                return Err(Error::RepresentationMismatch("curve dimensions differ".into()));
            }
            let kernel = spec.current_kernel.expect("validated");
            Ok(current_mmd(a.vertices.dim(), a.vertices.coords(), &b.embedding(), &kernel))
        }
    }
}

/// Squared RKHS distance between the current of the polyline `vertices` and
/// `target`, with its exact gradient with respect to the vertices.
pub(crate) fn current_mmd(dim: usize, vertices: &[f64], target: &CurrentEmbedding, kernel: &KernelSpec) -> MatchValue {
    let src = CurrentEmbedding::of_vertices(dim, vertices);
    let ns = src.segments();
    let cost = src.inner(&src, kernel) - 2.0 * src.inner(target, kernel) + target.inner(target, kernel);

    let mut d_center = vec![0.0; ns * dim];
    let mut d_tangent = vec![0.0; ns * dim];
    let mut accumulate = |other: &CurrentEmbedding, sign: f64| {
        for i in 0..ns {
            let (ci, ti) = (src.center(i), src.tangent(i));
            for j in 0..other.segments() {
                let (cj, tj) = (other.center(j), other.tangent(j));
                let (k, k1, _) = kernel.profile(sq_dist(ci, cj));
                let tt = dot(ti, tj);
                for c in 0..dim {
                    d_tangent[i * dim + c] += sign * 2.0 * k * tj[c];
                    d_center[i * dim + c] += sign * 4.0 * k1 * (ci[c] - cj[c]) * tt;
                }
            }
        }
    };
    accumulate(&src, 1.0);
    accumulate(target, -1.0);

    let mut gradient = vec![0.0; vertices.len()];
    for s in 0..ns {
        for c in 0..dim {
            let (dc, dt) = (d_center[s * dim + c], d_tangent[s * dim + c]);
            gradient[s * dim + c] += 0.5 * dc - dt;
            gradient[(s + 1) * dim + c] += 0.5 * dc + dt;
        }
    }
    MatchValue { cost: cost.max(0.0), gradient }
}

/// Infinitesimal action `v · q` of a velocity field on a shape.
///
/// Point shapes sample the velocity at their points; images return
/// `-∇q · v` with the velocity sampled at pixel centres.
pub fn infinitesimal_action(q: &Shape, v: &dyn Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    match q {
        Shape::Landmarks(_) | Shape::Curve(_) => q.points().unwrap().iter().flat_map(v).collect(),
        Shape::Image(img) => {
            let g = img.geometry;
            let [gx, gy] = img.gradient();
            let mut out = vec![0.0; g.len()];
            for r in 0..g.rows {
                for c in 0..g.cols {
                    let i = g.index(r, c);
                    let vel = v(&g.center(r, c));
                    out[i] = -(gx[i] * vel[0] + gy[i] * vel[1]);
                }
            }
            out
        }
    }
}

/// Eulerian momentum density `ξ_q^* π` generated by a shape momentum.
#[derive(Clone, Debug, PartialEq)]
pub enum MomentumDensity {
    /// Covectors attached to the shape's points.
    Points(Vec<f64>),
    /// Vector field `-π ∇q` on the image grid.
    Grid(VectorField),
}

pub fn dual_action(q: &Shape, pi: &Momentum) -> Result<MomentumDensity> {
    pi.check_layout(q)?;
    Ok(match q {
        Shape::Landmarks(_) | Shape::Curve(_) => MomentumDensity::Points(pi.0.clone()),
        Shape::Image(img) => {
            let [gx, gy] = img.gradient();
            let mx = pi.0.iter().zip(&gx).map(|(p, g)| -p * g).collect();
            let my = pi.0.iter().zip(&gy).map(|(p, g)| -p * g).collect();
            MomentumDensity::Grid(VectorField { geometry: img.geometry, components: [mx, my] })
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn landmarks(coords: Vec<f64>) -> Shape {
        Shape::Landmarks(LandmarkShape::new(PointCloud::new(2, coords).unwrap()).unwrap())
    }

    fn random_curve(rng: &mut ChaCha8Rng, m: usize) -> Shape {
        let mut coords = Vec::new();
        for i in 0..m {
            coords.push(i as f64 / (m - 1) as f64 + rng.random_range(-0.02..0.02));
            coords.push(rng.random_range(0.0..1.0));
        }
        Shape::Curve(CurveShape::new(PointCloud::new(2, coords).unwrap()).unwrap())
    }

    fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Shape {
        let g = GridGeometry::unit_square(n, n).unwrap();
        let vals = (0..g.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        Shape::Image(GridImage::new(g, vals).unwrap())
    }

    // Fourth-order central differences.
    fn fd_check(q1: &Shape, q2: &Shape, spec: &MatchSpec, tol: f64) {
        let h = 1e-4;
        let base = match_cost(q1, q2, spec).unwrap();
        let dofs = q1.dofs().to_vec();
        let at = |k: usize, s: f64| {
            let mut d = dofs.clone();
            d[k] += s;
            match_cost(&q1.with_dofs(d).unwrap(), q2, spec).unwrap().cost
        };
        for k in 0..dofs.len() {
            let fd = (8.0 * (at(k, h) - at(k, -h)) - (at(k, 2.0 * h) - at(k, -2.0 * h))) / (12.0 * h);
            let g = base.gradient[k];
            let scale = g.abs().max(fd.abs()).max(1e-6);
            assert!((g - fd).abs() / scale < tol, "dof {k}: analytic {g} vs fd {fd}");
        }
    }

    #[test]
    fn identical_shapes_cost_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_curve(&mut rng, 6);
        let img = random_image(&mut rng, 5);
        let lm = landmarks(vec![0.1, 0.2, 0.5, 0.4]);
        let cur = MatchSpec::current(KernelSpec::gaussian(0.3), 1.0);
        for (s, spec) in [
            (&lm, MatchSpec::new(MatchKind::L2Landmarks, 1.0)),
            (&img, MatchSpec::new(MatchKind::L2Image, 1.0)),
            (&c, cur),
        ] {
            let v = match_cost(s, s, &spec).unwrap();
            assert!(v.cost.abs() < 1e-14);
            assert!(v.gradient.iter().all(|g| g.abs() < 1e-12));
        }
    }

    #[test]
    fn single_landmark_closed_form() {
        let a = landmarks(vec![0.0, 0.0]);
        let b = landmarks(vec![2.0, 0.0]);
        let v = match_cost(&a, &b, &MatchSpec::new(MatchKind::L2Landmarks, 1.0)).unwrap();
        assert_eq!(v.cost, 4.0);
        assert_eq!(v.gradient, vec![-4.0, 0.0]);
    }

    #[test]
    fn mismatched_representations_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 4);
        let img2 = random_image(&mut rng, 5);
        let lm = landmarks(vec![0.0, 0.0]);
        let l2i = MatchSpec::new(MatchKind::L2Image, 1.0);
        assert!(matches!(match_cost(&img, &lm, &l2i), Err(Error::RepresentationMismatch(_))));
        assert!(matches!(match_cost(&img, &img2, &l2i), Err(Error::GridMismatch(_))));
        let l2 = MatchSpec::new(MatchKind::L2Landmarks, 1.0);
        assert!(match_cost(&lm, &landmarks(vec![0.0, 0.0, 1.0, 1.0]), &l2).is_err());
        assert!(MatchSpec { kind: MatchKind::CurrentMmd, current_kernel: None, weight: 1.0 }.validate().is_err());
    }

    #[test]
    fn current_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = MatchSpec::current(KernelSpec::gaussian(0.25), 1.0);
        for _ in 0..3 {
            let a = random_curve(&mut rng, 10);
            let b = random_curve(&mut rng, 10);
            fd_check(&a, &b, &spec, 1e-6);
            // Different resolutions are fine for currents.
            let c = random_curve(&mut rng, 7);
            fd_check(&a, &c, &spec, 1e-6);
        }
    }

    #[test]
    fn l2_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_image(&mut rng, 6);
        let b = random_image(&mut rng, 6);
        fd_check(&a, &b, &MatchSpec::new(MatchKind::L2Image, 1.0), 1e-5);
        let la = landmarks((0..10).map(|_| rng.random_range(-1.0..1.0)).collect());
        let lb = landmarks((0..10).map(|_| rng.random_range(-1.0..1.0)).collect());
        fd_check(&la, &lb, &MatchSpec::new(MatchKind::L2Landmarks, 1.0), 1e-5);
    }

    #[test]
    fn costs_are_symmetric_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cur = MatchSpec::current(KernelSpec::gaussian(0.4), 1.0);
        for _ in 0..5 {
            let (a, b) = (random_curve(&mut rng, 8), random_curve(&mut rng, 5));
            let ab = match_cost(&a, &b, &cur).unwrap().cost;
            let ba = match_cost(&b, &a, &cur).unwrap().cost;
            assert!(ab >= 0.0 && (ab - ba).abs() < 1e-12 * ab.max(1.0));
            let (a, b) = (random_image(&mut rng, 4), random_image(&mut rng, 4));
            let l2i = MatchSpec::new(MatchKind::L2Image, 1.0);
            assert_eq!(match_cost(&a, &b, &l2i).unwrap().cost, match_cost(&b, &a, &l2i).unwrap().cost);
        }
    }

    #[test]
    fn current_is_additive_under_segment_refinement() {
        // A short straight segment split at its midpoint: the discrete currents
        // coincide up to the midpoint quadrature error, O(|τ|^6 / ℓ^4).
        let kernel = KernelSpec::gaussian(0.5);
        let coarse =
            Shape::Curve(CurveShape::new(PointCloud::new(2, vec![0.2, 0.3, 0.25, 0.3, 0.5, 0.7]).unwrap()).unwrap());
        let fine = Shape::Curve(
            CurveShape::new(PointCloud::new(2, vec![0.2, 0.3, 0.225, 0.3, 0.25, 0.3, 0.5, 0.7]).unwrap()).unwrap(),
        );
        let v = match_cost(&coarse, &fine, &MatchSpec::current(kernel, 1.0)).unwrap();
        assert!(v.cost < 1e-8, "cost {}", v.cost);
    }

    #[test]
    fn graph_curves_are_normalised() {
        let t: Vec<f64> = (0..5).map(|i| 10.0 + 2.0 * i as f64).collect();
        let y = vec![3.0, -1.0, 0.0, 5.0, 2.0];
        let c = CurveShape::from_graph(&t, &y).unwrap();
        let pts = c.vertices();
        assert_eq!(pts.point(0), &[0.0, 4.0 / 6.0]);
        assert_eq!(pts.point(4), &[1.0, 0.5]);
        assert!(CurveShape::from_graph(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn infinitesimal_action_cases() {
        let g = GridGeometry::unit_square(8, 8).unwrap();
        let zero = |_: &[f64]| vec![0.0, 0.0];
        let unit_x = |_: &[f64]| vec![1.0, 0.0];
        let img = Shape::Image(GridImage::from_fn(g, |x, _| x).unwrap());
        assert!(infinitesimal_action(&img, &zero).iter().all(|&t| t == 0.0));
        let flat = Shape::Image(GridImage::from_fn(g, |_, _| 0.7).unwrap());
        assert!(infinitesimal_action(&flat, &unit_x).iter().all(|t| t.abs() < 1e-12));
        let t = infinitesimal_action(&img, &unit_x);
        for r in 1..7 {
            for c in 1..7 {
                assert!((t[g.index(r, c)] + 1.0).abs() < 1e-12);
            }
        }
        let lm = landmarks(vec![0.0, 1.0, 2.0, 3.0]);
        let swirl = |x: &[f64]| vec![-x[1], x[0]];
        assert_eq!(infinitesimal_action(&lm, &swirl), vec![-1.0, 0.0, -3.0, 2.0]);
    }

    #[test]
    fn dual_action_cases() {
        let g = GridGeometry::unit_square(8, 8).unwrap();
        let img = Shape::Image(GridImage::from_fn(g, |_, y| y).unwrap());
        match dual_action(&img, &Momentum(vec![0.0; 64])).unwrap() {
            MomentumDensity::Grid(f) => assert!(f.to_flat().iter().all(|&v| v == 0.0)),
            _ => unreachable!(),
        }
        match dual_action(&img, &Momentum(vec![1.0; 64])).unwrap() {
            MomentumDensity::Grid(f) => {
                for r in 1..7 {
                    for c in 1..7 {
                        assert!(f.components[0][g.index(r, c)].abs() < 1e-12);
                        assert!((f.components[1][g.index(r, c)] + 1.0).abs() < 1e-12);
                    }
                }
            }
            _ => unreachable!(),
        }
        assert!(dual_action(&img, &Momentum(vec![0.0; 3])).is_err());
    }

    #[test]
    fn dual_action_is_adjoint_of_infinitesimal_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let q = random_image(&mut rng, 10);
        let g = match &q {
            Shape::Image(i) => *i.geometry(),
            _ => unreachable!(),
        };
        let pi = Momentum((0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect());
        let m = match dual_action(&q, &pi).unwrap() {
            MomentumDensity::Grid(f) => f,
            _ => unreachable!(),
        };
        for _ in 0..5 {
            // Smooth velocity vanishing near the boundary.
            let (a, b, fx, fy) = (
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(1.0..3.0),
                rng.random_range(1.0..3.0),
            );
            let v = move |x: &[f64]| {
                let bump = (std::f64::consts::PI * x[0]).sin().powi(2) * (std::f64::consts::PI * x[1]).sin().powi(2);
                vec![a * bump * (fx * x[1]).cos(), b * bump * (fy * x[0]).sin()]
            };
            let xi_v = infinitesimal_action(&q, &v);
            let lhs: f64 = pi.0.iter().zip(&xi_v).map(|(p, t)| p * t).sum::<f64>() * g.cell_area();
            let mut rhs = 0.0;
            for r in 0..g.rows {
                for c in 0..g.cols {
                    let i = g.index(r, c);
                    let vel = v(&g.center(r, c));
                    rhs += m.components[0][i] * vel[0] + m.components[1][i] * vel[1];
                }
            }
            rhs *= g.cell_area();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1e-12));
        }
    }
}
