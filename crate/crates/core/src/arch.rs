//! Layer sequences and the backward pass that decides how much of each moment
//! has to be stored.

use crate::covariance::{CovKind, WeightCovariance};
use crate::error::{Error, Result};
use crate::geometry::{ConvGeometry, Extent, Padding};
use crate::moment::{zero_offset, Offset, Representation};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        geom: ConvGeometry,
        cov: WeightCovariance,
    },
    Relu,
    /// Deterministic averaging over non-overlapping windows.
    MeanPool { window: Extent },
    /// Final readout with a filter spanning the whole incoming extent.
    CollapseOutput { cov: WeightCovariance },
}

impl Layer {
    fn name(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::Relu => "relu",
            Layer::MeanPool { .. } => "pool",
            Layer::CollapseOutput { .. } => "collapse",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    id: String,
    input: Extent,
    layers: Vec<Layer>,
}

impl ArchitectureSpec {
    /// Checks that extents chain and that the sequence ends in exactly one
    /// [`Layer::CollapseOutput`] covering the incoming extent.
    pub fn new(id: impl Into<String>, input: Extent, layers: Vec<Layer>) -> Result<Self> {
        let spec = ArchitectureSpec {
            id: id.into(),
            input,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn builder(id: impl Into<String>, input: Extent) -> ArchitectureBuilder {
        ArchitectureBuilder {
            id: id.into(),
            current: input.clone(),
            input,
            layers: Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.layers.len();
        let collapses = self
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::CollapseOutput { .. }))
            .count();
        if collapses != 1 || !matches!(self.layers.last(), Some(Layer::CollapseOutput { .. })) {
            return Err(Error::Architecture(
                "exactly one collapse layer is required, and it must come last".into(),
            ));
        }
        let mut extent = self.input.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::Architecture(format!("layer {k} ({}): {msg}", layer.name()));
            match layer {
                Layer::Conv { geom, cov } => {
                    if geom.input_extent() != &extent {
                        return Err(bad(format!(
                            "expects input {:?}, receives {:?}",
                            geom.input_extent().dims(),
                            extent.dims()
                        )));
                    }
                    if cov.patch() != geom.patch() {
                        return Err(bad("covariance and filter patch differ".into()));
                    }
                    extent = geom.output_extent()?;
                }
                Layer::Relu => {}
                Layer::MeanPool { window } => {
                    extent = ConvGeometry::pooling(extent, window)
                        .map_err(|e| bad(e.to_string()))?
                        .output_extent()?;
                }
                Layer::CollapseOutput { cov } => {
                    debug_assert_eq!(k, n - 1);
                    if cov.patch() != &extent {
                        return Err(bad(format!(
                            "covariance patch {:?} must equal the incoming extent {:?}",
                            cov.patch().dims(),
                            extent.dims()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn input_extent(&self) -> &Extent {
        &self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Extent entering each layer, followed by the output extent.
    pub fn extents(&self) -> Vec<Extent> {
        let mut out = vec![self.input.clone()];
        for layer in &self.layers {
            let cur = out.last().unwrap().clone();
            let next = match layer {
                Layer::Conv { geom, .. } => geom.output_extent().expect("validated"),
                Layer::Relu => cur,
                Layer::MeanPool { window } => Extent::new(
                    cur.dims()
                        .iter()
                        .zip(window.dims())
                        .map(|(f, w)| f / w)
                        .collect::<Vec<_>>(),
                )
                .expect("validated"),
                Layer::CollapseOutput { .. } => Extent::unit(cur.rank()),
            };
            out.push(next);
        }
        out
    }

    /// Extent entering the collapse layer.
    pub fn pre_collapse_extent(&self) -> Extent {
        let ex = self.extents();
        ex[ex.len() - 2].clone()
    }

    pub fn final_covariance(&self) -> &WeightCovariance {
        match self.layers.last() {
            Some(Layer::CollapseOutput { cov }) => cov,
            _ => unreachable!("validated"),
        }
    }

    pub fn collapse_geometry(&self) -> ConvGeometry {
        ConvGeometry::collapse(self.pre_collapse_extent())
    }

    /// The same network with a different readout covariance.
    pub fn with_final_covariance(&self, cov: WeightCovariance) -> Result<Self> {
        let mut layers = self.layers.clone();
        *layers.last_mut().unwrap() = Layer::CollapseOutput { cov };
        ArchitectureSpec::new(self.id.clone(), self.input.clone(), layers)
    }

    /// Number of ReLU layers.
    pub fn relu_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Relu)).count()
    }
}

/// Incremental construction with extents tracked automatically.
#[derive(Debug, Clone)]
pub struct ArchitectureBuilder {
    id: String,
    input: Extent,
    current: Extent,
    layers: Vec<Layer>,
}

impl ArchitectureBuilder {
    /// Square `size` filter, `Same` padding, no dilation.
    pub fn conv(self, size: usize, stride: usize, kind: CovKind) -> Result<Self> {
        let patch = Extent::new(vec![size; self.current.rank()])?;
        self.conv_with(patch, stride, 1, Padding::Same, kind)
    }

    pub fn conv_with(
        mut self,
        patch: Extent,
        stride: usize,
        dilation: usize,
        padding: Padding,
        kind: CovKind,
    ) -> Result<Self> {
        let geom = ConvGeometry::new(patch, stride, dilation, self.current.clone(), padding)?;
        let cov = WeightCovariance::build(kind, geom.patch())?;
        self.current = geom.output_extent()?;
        self.layers.push(Layer::Conv { geom, cov });
        Ok(self)
    }

    pub fn relu(mut self) -> Self {
        self.layers.push(Layer::Relu);
        self
    }

    pub fn mean_pool(mut self, window: usize) -> Result<Self> {
        let window = Extent::new(vec![window; self.current.rank()])?;
        self.current = ConvGeometry::pooling(self.current.clone(), &window)?.output_extent()?;
        self.layers.push(Layer::MeanPool { window });
        Ok(self)
    }

    pub fn current_extent(&self) -> &Extent {
        &self.current
    }

    pub fn collapse(self, kind: CovKind) -> Result<ArchitectureSpec> {
        let cov = WeightCovariance::build(kind, &self.current)?;
        self.collapse_with(cov)
    }

    pub fn collapse_with(mut self, cov: WeightCovariance) -> Result<ArchitectureSpec> {
        self.layers.push(Layer::CollapseOutput { cov });
        ArchitectureSpec::new(self.id, self.input, self.layers)
    }
}

/// Storage needed for the moment entering each layer, plus the output
/// (`layers.len() + 1` entries).
///
/// Runs backward from the scalar output. An independent-weight convolution
/// with stride `s` needs input offsets `s * delta` for each output offset
/// `delta`; correlated weights and pooling read arbitrary pairs and force full
/// storage from there back to the input. Every banded stage also keeps offset
/// zero, which carries the variances the nonlinearity needs.
pub fn plan_offsets(arch: &ArchitectureSpec) -> Vec<Representation> {
    plan_with_final(arch, !arch.final_covariance().is_diagonal())
}

/// As [`plan_offsets`], treating the readout as correlated when
/// `final_correlated` is set regardless of its covariance.
pub(crate) fn plan_with_final(arch: &ArchitectureSpec, final_correlated: bool) -> Vec<Representation> {
    let rank = arch.input_extent().rank();
    let n = arch.layers().len();
    let mut plan = vec![Representation::Full; n + 1];
    let mut needed = Some(vec![zero_offset(rank)]);
    plan[n] = Representation::band(needed.clone().unwrap());
    for (k, layer) in arch.layers().iter().enumerate().rev() {
        needed = match (layer, needed) {
            (_, None) => None,
            (Layer::Relu, Some(off)) => Some(off),
            (Layer::MeanPool { .. }, Some(_)) => None,
            (Layer::CollapseOutput { .. }, Some(off)) => {
                if final_correlated {
                    None
                } else {
                    Some(off)
                }
            }
            (Layer::Conv { geom, cov }, Some(off)) => {
                if cov.is_diagonal() {
                    let s = geom.stride() as i64;
                    Some(scale_offsets(&off, s))
                } else {
                    None
                }
            }
        };
        plan[k] = match &needed {
            None => Representation::Full,
            Some(off) => {
                let mut off = off.clone();
                off.push(zero_offset(rank));
                Representation::band(off)
            }
        };
        if let Representation::Band(off) = &plan[k] {
            needed = Some(off.clone());
        }
    }
    plan
}

fn scale_offsets(offsets: &[Offset], s: i64) -> Vec<Offset> {
    offsets
        .iter()
        .map(|o| o.iter().map(|d| d * s).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ext(d: &[usize]) -> Extent {
        Extent::new(d.to_vec()).unwrap()
    }

    #[test]
    fn independent_plan_is_diagonal_everywhere() {
        let arch = ArchitectureSpec::builder("t", ext(&[8, 8]))
            .conv(3, 1, CovKind::independent())
            .unwrap()
            .relu()
            .conv(3, 2, CovKind::independent())
            .unwrap()
            .relu()
            .collapse(CovKind::independent())
            .unwrap();
        let plan = plan_offsets(&arch);
        assert_eq!(plan.len(), 6);
        for r in plan {
            assert_eq!(r, Representation::Band(vec![vec![0, 0]]));
        }
    }

    #[test]
    fn correlated_layer_forces_full_upstream() {
        let arch = ArchitectureSpec::builder("t", ext(&[6]))
            .conv(3, 1, CovKind::independent())
            .unwrap()
            .relu()
            .conv(3, 1, CovKind::matern32(2.0))
            .unwrap()
            .relu()
            .conv(3, 1, CovKind::independent())
            .unwrap()
            .collapse(CovKind::independent())
            .unwrap();
        let plan = plan_offsets(&arch);
        assert!(plan[..3].iter().all(Representation::is_full));
        assert!(plan[3..].iter().all(|r| !r.is_full()));
    }

    #[test]
    fn correlated_readout_makes_everything_full() {
        let arch = ArchitectureSpec::builder("t", ext(&[4]))
            .conv(3, 1, CovKind::independent())
            .unwrap()
            .relu()
            .collapse(CovKind::MeanPool)
            .unwrap();
        let plan = plan_offsets(&arch);
        assert!(plan[..3].iter().all(Representation::is_full));
        assert!(!plan[3].is_full());
    }

    #[test]
    fn pooling_forces_full() {
        let arch = ArchitectureSpec::builder("t", ext(&[4, 4]))
            .conv(3, 1, CovKind::independent())
            .unwrap()
            .mean_pool(2)
            .unwrap()
            .collapse(CovKind::independent())
            .unwrap();
        let plan = plan_offsets(&arch);
        assert!(plan[0].is_full() && plan[1].is_full());
        assert!(!plan[2].is_full());
    }

    #[test]
    fn stride_scales_offsets() {
        // A stride-2 layer feeding a layer that needs {0, 1} must receive {0, 2}.
        let geom = ConvGeometry::same(ext(&[8]), 3, 2).unwrap();
        let cov = WeightCovariance::build(CovKind::independent(), geom.patch()).unwrap();
        let out = geom.output_extent().unwrap();
        let next = ConvGeometry::new(ext(&[2]), 1, 1, out.clone(), Padding::Same).unwrap();
        let next_cov = WeightCovariance::build(CovKind::independent(), next.patch()).unwrap();
        let arch = ArchitectureSpec::new(
            "t",
            ext(&[8]),
            vec![
                Layer::Conv { geom, cov },
                Layer::Conv { geom: next, cov: next_cov },
                Layer::CollapseOutput {
                    cov: WeightCovariance::build(CovKind::independent(), &out).unwrap(),
                },
            ],
        )
        .unwrap();
        let plan = plan_offsets(&arch);
        // The collapse and the second conv both need only zero.
        assert_eq!(plan[1], Representation::Band(vec![vec![0]]));
        assert_eq!(scale_offsets(&[vec![0], vec![1]], 2), vec![vec![0], vec![2]]);
    }

    #[test]
    fn rejects_bad_sequences() {
        let e = ext(&[4]);
        assert!(ArchitectureSpec::new("t", e.clone(), vec![Layer::Relu]).is_err());
        let cov = WeightCovariance::build(CovKind::independent(), &e).unwrap();
        assert!(ArchitectureSpec::new(
            "t",
            e.clone(),
            vec![
                Layer::CollapseOutput { cov: cov.clone() },
                Layer::CollapseOutput { cov: cov.clone() }
            ]
        )
        .is_err());
        let small = WeightCovariance::build(CovKind::independent(), &ext(&[3])).unwrap();
        assert!(ArchitectureSpec::new("t", e.clone(), vec![Layer::CollapseOutput { cov: small }]).is_err());
        let geom = ConvGeometry::same(ext(&[5]), 3, 1).unwrap();
        let cov3 = WeightCovariance::build(CovKind::independent(), geom.patch()).unwrap();
        assert!(ArchitectureSpec::new(
            "t",
            e,
            vec![Layer::Conv { geom, cov: cov3 }, Layer::CollapseOutput { cov }]
        )
        .is_err());
    }

    #[test]
    fn extents_chain() {
        let arch = ArchitectureSpec::builder("t", ext(&[8, 8]))
            .conv(3, 2, CovKind::independent())
            .unwrap()
            .mean_pool(2)
            .unwrap()
            .collapse(CovKind::MeanPool)
            .unwrap();
        let dims: Vec<Vec<usize>> = arch.extents().iter().map(|e| e.dims().to_vec()).collect();
        assert_eq!(dims, vec![vec![8, 8], vec![4, 4], vec![2, 2], vec![1, 1]]);
        assert_eq!(arch.pre_collapse_extent().dims(), &[2, 2]);
    }
}
