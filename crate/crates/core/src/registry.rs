//! Named architectures.
//!
//! | id | layers |
//! |----|--------|
//! | `cnngp-14` | `(conv 3x3, relu) x 14`, readout |
//! | `cnngp-7` | `(conv 3x3, relu) x 7`, readout |
//! | `myrtle-10` | `((conv 3x3, relu) x 2, pool 2x2) x 3`, readout |
//! | `myrtle-10-corr` | `myrtle-10` with each internal `(pool 2x2, conv 3x3)` replaced by a correlated 6x6 stride-2 conv |
//! | `toy-1d` | length-6 input, `(conv 3, relu) x 2`, readout, all Matérn |
//!
//! Convolutions use `Same` padding and independent unit-variance weights
//! unless stated. The readout is the all-ones covariance (pooling) without a
//! lengthscale and Matérn-3/2 with one. For `myrtle-10-corr` the lengthscale
//! instead sets the replaced convolutions, and the readout always pools.

use crate::arch::{ArchitectureBuilder, ArchitectureSpec};
use crate::covariance::CovKind;
use crate::error::{Error, Result};
use crate::geometry::Extent;

pub const ARCHITECTURES: &[&str] = &["cnngp-14", "cnngp-7", "myrtle-10", "myrtle-10-corr", "toy-1d"];

/// Lengthscale of the toy network when none is given.
pub const TOY_LENGTHSCALE: f64 = 2.0;

/// Which layers a lengthscale applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthscaleTarget {
    /// Only the readout; everything before it can be shared across a sweep.
    Readout,
    /// Hidden layers too.
    Hidden,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArchOptions {
    pub lengthscale: Option<f64>,
    /// Input extent; defaults to 32x32, or 6 for `toy-1d`.
    pub input: Option<Extent>,
    /// Filter size of the plain convolutions; default 3.
    pub filter: Option<usize>,
    /// Number of `(conv, relu)` blocks for the `cnngp` family.
    pub depth: Option<usize>,
}

pub fn lengthscale_target(id: &str) -> Result<LengthscaleTarget> {
    match id {
        "cnngp-14" | "cnngp-7" | "myrtle-10" => Ok(LengthscaleTarget::Readout),
        "myrtle-10-corr" | "toy-1d" => Ok(LengthscaleTarget::Hidden),
        _ => Err(unknown(id)),
    }
}

fn unknown(id: &str) -> Error {
    Error::Architecture(format!(
        "unknown architecture '{id}', expected one of {}",
        ARCHITECTURES.join(", ")
    ))
}

fn readout(lengthscale: Option<f64>) -> CovKind {
    lengthscale.map_or(CovKind::MeanPool, CovKind::matern32)
}

fn conv_relu(b: ArchitectureBuilder, size: usize, n: usize) -> Result<ArchitectureBuilder> {
    (0..n).try_fold(b, |b, _| Ok(b.conv(size, 1, CovKind::independent())?.relu()))
}

pub fn build_architecture(id: &str, opts: &ArchOptions) -> Result<ArchitectureSpec> {
    let image = || opts.input.clone().map_or_else(|| Extent::new(vec![32, 32]), Ok);
    let filter = opts.filter.unwrap_or(3);
    match id {
        "cnngp-14" | "cnngp-7" => {
            let depth = opts.depth.unwrap_or(if id == "cnngp-14" { 14 } else { 7 });
            let b = conv_relu(ArchitectureSpec::builder(id, image()?), filter, depth)?;
            b.collapse(readout(opts.lengthscale))
        }
        "myrtle-10" => {
            let mut b = ArchitectureSpec::builder(id, image()?);
            for _ in 0..3 {
                b = conv_relu(b, filter, 2)?.mean_pool(2)?;
            }
            b.collapse(readout(opts.lengthscale))
        }
        "myrtle-10-corr" => {
            let l = opts
                .lengthscale
                .ok_or_else(|| Error::Parameter("myrtle-10-corr needs a lengthscale".into()))?;
            let mut b = ArchitectureSpec::builder(id, image()?);
            b = conv_relu(b, filter, 2)?;
            for _ in 0..2 {
                b = b.conv(6, 2, CovKind::matern32(l))?.relu();
                b = conv_relu(b, filter, 1)?;
            }
            b.mean_pool(2)?.collapse(CovKind::MeanPool)
        }
        "toy-1d" => {
            let l = opts.lengthscale.unwrap_or(TOY_LENGTHSCALE);
            let input = opts.input.clone().map_or_else(|| Extent::new(vec![6]), Ok)?;
            ArchitectureSpec::builder(id, input)
                .conv(filter, 1, CovKind::matern32(l))?
                .relu()
                .conv(filter, 1, CovKind::matern32(l))?
                .relu()
                .collapse(CovKind::matern32(l))
        }
        _ => Err(unknown(id)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Layer;

    fn conv_count(a: &ArchitectureSpec) -> usize {
        a.layers().iter().filter(|l| matches!(l, Layer::Conv { .. })).count()
    }

    #[test]
    fn cnngp_keeps_full_resolution() {
        let a = build_architecture("cnngp-14", &ArchOptions::default()).unwrap();
        assert_eq!(conv_count(&a), 14);
        assert_eq!(a.relu_count(), 14);
        assert_eq!(a.pre_collapse_extent().dims(), &[32, 32]);
        assert!(!a.final_covariance().is_diagonal());
    }

    #[test]
    fn myrtle_string_gives_four_by_four_readout() {
        let a = build_architecture("myrtle-10", &ArchOptions::default()).unwrap();
        assert_eq!(conv_count(&a), 6);
        assert_eq!(a.pre_collapse_extent().dims(), &[4, 4]);
    }

    #[test]
    fn correlated_myrtle_replaces_internal_pools() {
        let opts = ArchOptions {
            lengthscale: Some(3.0),
            ..Default::default()
        };
        let a = build_architecture("myrtle-10-corr", &opts).unwrap();
        let pools = a.layers().iter().filter(|l| matches!(l, Layer::MeanPool { .. })).count();
        assert_eq!(pools, 1);
        let wide: Vec<_> = a
            .layers()
            .iter()
            .filter_map(|l| match l {
                Layer::Conv { geom, cov } if geom.patch().dims() == [6, 6] => Some((geom.stride(), cov.is_diagonal())),
                _ => None,
            })
            .collect();
        assert_eq!(wide, vec![(2, false), (2, false)]);
        assert_eq!(a.pre_collapse_extent().dims(), &[4, 4]);
        assert!(build_architecture("myrtle-10-corr", &ArchOptions::default()).is_err());
    }

    #[test]
    fn toy_and_unknown() {
        let a = build_architecture("toy-1d", &ArchOptions::default()).unwrap();
        assert_eq!(a.input_extent().dims(), &[6]);
        assert!(matches!(build_architecture("vgg", &ArchOptions::default()), Err(Error::Architecture(_))));
    }
}
