//! The dihedral group D4 and its representation theory.
//!
//! D4 = <r, m : r^4 = m^2 = e, rm = mr^-1> acts on square images by 90-degree
//! rotations and reflections. This module provides the element algebra, the
//! grid action, the five irreducible representations, characters and their
//! multiplicity formula, and the trivial projector (the group average of a
//! representation).
//!
//! Composition convention: `compose(g1, g2)` applies `g2` first, matching the
//! matrix order `rho(g1) * rho(g2) = rho(g1 g2)`. The rotation `r` is fixed
//! as counter-clockwise and `m` as the horizontal (left-right) flip; any
//! consistent orientation choice gives an isomorphic group.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::tensor::ImageTensor;
use std::collections::BTreeMap;

/// One of the eight elements of D4, written `r^k m^f` with `k` in 0..4 and
/// `f` in {0, 1}. The element named `mr^k` in the character table is `r^k m`
/// under this convention (apply the mirror first, then rotate).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupElement {
    E,
    R,
    R2,
    R3,
    M,
    Mr,
    Mr2,
    Mr3,
}

use GroupElement::*;

/// All eight elements in the fixed group order used everywhere in the crate.
pub const ELEMENTS: [GroupElement; 8] = [E, R, R2, R3, M, Mr, Mr2, Mr3];

/// Conjugacy classes of D4.
pub const CONJUGACY_CLASSES: [&[GroupElement]; 5] =
    [&[E], &[R2], &[R, R3], &[M, Mr2], &[Mr, Mr3]];

impl GroupElement {
    /// Index into the fixed group order.
    pub fn index(self) -> usize {
        match self {
            E => 0,
            R => 1,
            R2 => 2,
            R3 => 3,
            M => 4,
            Mr => 5,
            Mr2 => 6,
            Mr3 => 7,
        }
    }

    /// (rotation exponent, mirror flag) of the normal form `r^k m^f`.
    fn factored(self) -> (usize, bool) {
        match self {
            E => (0, false),
            R => (1, false),
            R2 => (2, false),
            R3 => (3, false),
            M => (0, true),
            Mr => (1, true),
            Mr2 => (2, true),
            Mr3 => (3, true),
        }
    }

    fn from_factored(rot: usize, flip: bool) -> Self {
        match (rot % 4, flip) {
            (0, false) => E,
            (1, false) => R,
            (2, false) => R2,
            (3, false) => R3,
            (0, true) => M,
            (1, true) => Mr,
            (2, true) => Mr2,
            (3, true) => Mr3,
            _ => unreachable!(),
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            E => "e",
            R => "r",
            R2 => "r2",
            R3 => "r3",
            M => "m",
            Mr => "mr",
            Mr2 => "mr2",
            Mr3 => "mr3",
        }
    }
}

/// Group law: apply `g2` first, then `g1`.
pub fn compose(g1: GroupElement, g2: GroupElement) -> GroupElement {
    let (k1, f1) = g1.factored();
    let (k2, f2) = g2.factored();
    // m r^k = r^{-k} m, so r^{k1} m^{f1} r^{k2} m^{f2} = r^{k1 +- k2} m^{f1^f2}.
    let k = if f1 { (k1 + 4 - k2) % 4 } else { (k1 + k2) % 4 };
    GroupElement::from_factored(k, f1 ^ f2)
}

pub fn inverse(g: GroupElement) -> GroupElement {
    let (k, f) = g.factored();
    if f {
        g // reflections are involutions
    } else {
        GroupElement::from_factored((4 - k) % 4, false)
    }
}

/// Apply the grid action of `g` to a square plane of side `n`, row-major.
/// `r` rotates 90 degrees counter-clockwise, `m` mirrors left-right.
pub fn act_plane(g: GroupElement, plane: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(plane.len(), n * n);
    debug_assert_eq!(out.len(), n * n);
    let (k, f) = g.factored();
    // Pure index permutation: out[i][j] = in[source(i, j)].
    for i in 0..n {
        for j in 0..n {
            // Invert the rotation first (applied last in r^k m^f).
            let (mut si, mut sj) = (i, j);
            for _ in 0..k {
                // Inverse of CCW rotation out[i][j] = in[j][n-1-i].
                let (ni, nj) = (sj, n - 1 - si);
                si = ni;
                sj = nj;
            }
            if f {
                sj = n - 1 - sj;
            }
            out[i * n + j] = plane[si * n + sj];
        }
    }
}

/// D4 action on a square image: each channel plane is permuted identically.
pub fn act_on_image(g: GroupElement, img: &ImageTensor) -> Result<ImageTensor> {
    if !img.is_square() {
        return Err(Error::Shape(format!(
            "group action needs a square image, got {}x{}",
            img.height, img.width
        )));
    }
    let n = img.height;
    let mut out = ImageTensor::zeros(n, n, img.channels);
    for c in 0..img.channels {
        let hw = n * n;
        act_plane(g, img.plane(c), n, &mut out.data[c * hw..(c + 1) * hw]);
    }
    Ok(out)
}

/// Names of the five irreducible representations of D4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IrrepName {
    /// Trivial: everything to +1.
    Rho11,
    /// +1 on rotations, -1 on reflections.
    Rho1m1,
    /// Alternates with the rotation exponent.
    Rhom11,
    Rhom1m1,
    /// The faithful 2-dimensional representation.
    Rho2,
}

pub const IRREP_NAMES: [IrrepName; 5] = [
    IrrepName::Rho11,
    IrrepName::Rho1m1,
    IrrepName::Rhom11,
    IrrepName::Rhom1m1,
    IrrepName::Rho2,
];

impl IrrepName {
    pub fn degree(self) -> usize {
        match self {
            IrrepName::Rho2 => 2,
            _ => 1,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            IrrepName::Rho11 => "rho_{1,1}",
            IrrepName::Rho1m1 => "rho_{1,-1}",
            IrrepName::Rhom11 => "rho_{-1,1}",
            IrrepName::Rhom1m1 => "rho_{-1,-1}",
            IrrepName::Rho2 => "rho_2",
        }
    }
}

/// A matrix representation of D4, one orthogonal matrix per element in the
/// fixed group order.
pub type RepMatrices = [Matrix; 8];

/// An irreducible representation with its matrices.
#[derive(Debug, Clone)]
pub struct Irrep {
    pub name: IrrepName,
    pub degree: usize,
    pub matrices: RepMatrices,
}

impl Irrep {
    pub fn matrix(&self, g: GroupElement) -> &Matrix {
        &self.matrices[g.index()]
    }

    pub fn character(&self) -> Character {
        let mut values = [0.0; 8];
        for g in ELEMENTS {
            values[g.index()] = self.matrices[g.index()].trace();
        }
        Character { values }
    }
}

fn scalar(v: f64) -> Matrix {
    Matrix::from_vec(1, 1, vec![v]).unwrap()
}

fn rho2_matrix(g: GroupElement) -> Matrix {
    let (k, f) = g.factored();
    // R^k * M^f with R the CCW rotation and M = diag(1, -1).
    let (c, s) = match k {
        0 => (1.0, 0.0),
        1 => (0.0, 1.0),
        2 => (-1.0, 0.0),
        3 => (0.0, -1.0),
        _ => unreachable!(),
    };
    let sign = if f { -1.0 } else { 1.0 };
    Matrix::from_vec(2, 2, vec![c, -s * sign, s, c * sign]).unwrap()
}

/// The five irreps of D4 with their explicit matrices.
pub fn irrep_table() -> Vec<Irrep> {
    IRREP_NAMES
        .iter()
        .map(|&name| {
            let matrices: RepMatrices = std::array::from_fn(|idx| {
                let g = ELEMENTS[idx];
                let (k, f) = g.factored();
                match name {
                    IrrepName::Rho11 => scalar(1.0),
                    IrrepName::Rho1m1 => scalar(if f { -1.0 } else { 1.0 }),
                    IrrepName::Rhom11 => scalar(if k % 2 == 1 { -1.0 } else { 1.0 }),
                    IrrepName::Rhom1m1 => {
                        scalar(if (k + f as usize) % 2 == 1 { -1.0 } else { 1.0 })
                    }
                    IrrepName::Rho2 => rho2_matrix(g),
                }
            });
            Irrep {
                name,
                degree: name.degree(),
                matrices,
            }
        })
        .collect()
}

/// A class function on D4, stored per element.
#[derive(Debug, Clone, PartialEq)]
pub struct Character {
    pub values: [f64; 8],
}

impl Character {
    pub fn value(&self, g: GroupElement) -> f64 {
        self.values[g.index()]
    }

    pub fn pointwise_product(&self, other: &Character) -> Character {
        let mut values = [0.0; 8];
        for i in 0..8 {
            values[i] = self.values[i] * other.values[i];
        }
        Character { values }
    }

    /// Character of an arbitrary matrix representation.
    pub fn of_rep(rep: &RepMatrices) -> Character {
        let mut values = [0.0; 8];
        for (i, m) in rep.iter().enumerate() {
            values[i] = m.trace();
        }
        Character { values }
    }
}

/// The trivial projector `P = (1/|G|) sum_g rho(g)` of a representation given
/// by its matrices. Satisfies `rho(g) P = P = P rho(g)` and `P P = P`.
pub fn trivial_project(rep: &RepMatrices) -> Result<Matrix> {
    let (r, c) = (rep[0].rows(), rep[0].cols());
    let mut sum = Matrix::zeros(r, c);
    for m in rep {
        if m.rows() != r || m.cols() != c {
            return Err(Error::Shape(format!(
                "representation matrices disagree in shape: {}x{} vs {}x{}",
                r,
                c,
                m.rows(),
                m.cols()
            )));
        }
        sum = sum.add(m)?;
    }
    Ok(sum.scale(1.0 / 8.0))
}

/// Multiplicity of each irrep in a representation with character `chi`:
/// `lambda_t = (1/|G|) sum_g chi(g) chi_t(g)` (all D4 characters are real).
/// Fails if a multiplicity is negative or further than 1e-9 from an integer.
pub fn decompose_multiplicities(chi: &Character) -> Result<BTreeMap<IrrepName, u64>> {
    let irreps = irrep_table();
    let mut out = BTreeMap::new();
    for irrep in &irreps {
        let tau = irrep.character();
        let lambda: f64 = ELEMENTS
            .iter()
            .map(|&g| chi.value(g) * tau.value(g))
            .sum::<f64>()
            / 8.0;
        let rounded = lambda.round();
        if (lambda - rounded).abs() > 1e-9 || rounded < 0.0 {
            return Err(Error::InvalidInput(format!(
                "character is not a valid representation character: multiplicity of {} is {}",
                irrep.name.symbol(),
                lambda
            )));
        }
        out.insert(irrep.name, rounded as u64);
    }
    Ok(out)
}

/// Tensor product of two irreps: `g -> kron(a(g), b(g))`.
pub fn tensor_product_irrep(a: &Irrep, b: &Irrep) -> RepMatrices {
    std::array::from_fn(|idx| a.matrices[idx].kron(&b.matrices[idx]))
}
