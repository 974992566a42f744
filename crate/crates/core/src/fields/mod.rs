//! Scene representations: the hash-encoded radiance field, the explicit
//! height field, the color head they share, and the scene contraction.

mod heightfield;
mod mlp;
mod radiance;

pub use heightfield::{HeightField, HeightFieldConfig};
pub use mlp::{encode_direction, ColorHead, ColorHeadConfig, FieldError, IdAlloc, Mlp, DIRECTION_ENCODING_DIM};
pub use radiance::{DensityActivation, RadianceField, RadianceFieldConfig};

use crate::geom::{self, Vec3};

/// Maps all of space into the open ball of radius 2: identity inside the
/// unit ball, `(2 - 1/|p|) p/|p|` outside.
pub fn contract(p: Vec3) -> Vec3 {
    let n = geom::norm(p);
    if n <= 1.0 {
        p
    } else {
        geom::scale(p, (2.0 - 1.0 / n) / n)
    }
}
