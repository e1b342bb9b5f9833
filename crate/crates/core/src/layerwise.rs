//! Per-layer dispatch of the constrained update, and the first-order
//! prediction of how much the shared memory loss drops under each mode.

use serde::{Deserialize, Serialize};

use crate::decomp::GradientBundle;
use crate::error::{Error, Result};
use crate::linalg::{apply_projection, dot, ColumnMatrix, FlatVector};
use crate::solver::{
    relax_basis, relax_basis_rows, solve_update, Branch, Feasibility, SolverConfig, UpdateMode,
    UpdateResult,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Contiguous named segments covering a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    total: usize,
}

impl ParamLayout {
    pub fn new<S: Into<String>>(segments: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        let mut out = Vec::new();
        let mut offset = 0;
        for (name, len) in segments {
            if len == 0 {
                return Err(Error::InvalidArgument(
                    "layout segments must be non-empty".into(),
                ));
            }
            out.push(Segment {
                name: name.into(),
                offset,
                len,
            });
            offset += len;
        }
        if out.is_empty() {
            return Err(Error::Empty("parameter layout"));
        }
        Ok(ParamLayout {
            segments: out,
            total: offset,
        })
    }

    /// One segment spanning everything.
    pub fn single(total: usize) -> Result<Self> {
        ParamLayout::new([("all", total)])
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn num_layers(&self) -> usize {
        self.segments.len()
    }

    fn check(&self, dim: usize) -> Result<()> {
        if dim != self.total {
            return Err(Error::mismatch("parameter layout", self.total, dim));
        }
        Ok(())
    }
}

pub fn split_by_layer(v: &[f64], layout: &ParamLayout) -> Result<Vec<FlatVector>> {
    layout.check(v.len())?;
    Ok(layout
        .segments
        .iter()
        .map(|s| FlatVector::from(&v[s.offset..s.offset + s.len]))
        .collect())
}

/// Solver outcome for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerOutcome {
    pub name: String,
    pub branch: Branch,
    pub shared_alignment: f64,
    pub degenerate: bool,
    pub basis_rank: usize,
    pub feasibility: Feasibility,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerwiseUpdate {
    pub w: FlatVector,
    pub layers: Vec<LayerOutcome>,
}

impl LayerwiseUpdate {
    pub fn worst_feasibility(&self) -> Option<Feasibility> {
        self.layers
            .iter()
            .map(|l| l.feasibility)
            .reduce(Feasibility::worst)
    }
}

/// Concatenated solve on a whole bundle; plain `g` when there are no old tasks.
pub fn concatenated_solve(
    bundle: &GradientBundle,
    cfg: &SolverConfig,
) -> Result<(UpdateResult, ColumnMatrix)> {
    let Some(shared) = &bundle.shared else {
        let r = UpdateResult {
            w: bundle.new_grad.clone(),
            branch: Branch::ProjectOnly,
            shared_alignment: 0.0,
            degenerate: false,
        };
        return Ok((r, ColumnMatrix::empty(bundle.dim())));
    };
    let basis = relax_basis(&bundle.specific, cfg);
    let r = solve_update(&bundle.new_grad, shared, &basis)?;
    Ok((r, basis))
}

/// Decomposes, relaxes and solves each layer on its own, then concatenates.
pub fn layerwise_solve(
    bundle: &GradientBundle,
    layout: &ParamLayout,
    cfg: &SolverConfig,
) -> Result<LayerwiseUpdate> {
    layout.check(bundle.dim())?;
    let mut w = Vec::with_capacity(layout.total);
    let mut layers = Vec::with_capacity(layout.num_layers());
    for seg in &layout.segments {
        let rows = seg.offset..seg.offset + seg.len;
        let g = &bundle.new_grad[rows.clone()];
        let (r, basis_rank, feasibility) = match &bundle.shared {
            None => {
                let r = UpdateResult {
                    w: FlatVector::from(g),
                    branch: Branch::ProjectOnly,
                    shared_alignment: 0.0,
                    degenerate: false,
                };
                (
                    r,
                    0,
                    Feasibility {
                        equality: 0.0,
                        inequality: 0.0,
                    },
                )
            }
            Some(shared) => {
                let shared = &shared[rows.clone()];
                let basis = relax_basis_rows(&bundle.specific, rows, cfg);
                let r = solve_update(g, shared, &basis)?;
                let f = Feasibility::measure(g, shared, &basis, &r.w)?;
                (r, basis.cols(), f)
            }
        };
        w.extend_from_slice(&r.w);
        layers.push(LayerOutcome {
            name: seg.name.clone(),
            branch: r.branch,
            shared_alignment: r.shared_alignment,
            degenerate: r.degenerate,
            basis_rank,
            feasibility,
        });
    }
    Ok(LayerwiseUpdate {
        w: w.into(),
        layers,
    })
}

/// Applies `update` to every layer slice of `bundle` and concatenates.
pub fn map_layers<F>(
    bundle: &GradientBundle,
    layout: &ParamLayout,
    mut update: F,
) -> Result<FlatVector>
where
    F: FnMut(&GradientBundle) -> Result<FlatVector>,
{
    layout.check(bundle.dim())?;
    let mut w = Vec::with_capacity(layout.total);
    for seg in &layout.segments {
        w.extend_from_slice(&update(&bundle.restrict(seg.offset, seg.len))?);
    }
    Ok(w.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAlignment {
    pub name: String,
    pub alignment: f64,
    pub contributes: bool,
}

/// First-order change of the shared memory loss per unit learning rate:
/// the actual change after `θ ← θ − ηw` is `η · predicted_delta + O(η²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossChangeReport {
    pub per_layer: Vec<LayerAlignment>,
    pub predicted_delta: f64,
    pub mode: UpdateMode,
}

/// Predicted shared-loss change for the update the given mode would produce.
///
/// Concatenated: one global projection, the loss drops by `ḡᵀPg` when that is
/// non-negative and stays put otherwise. The global alignment is accumulated
/// layer by layer so the per-layer entries add up to it exactly.
///
/// Layerwise: each layer has its own projection, and only layers with a
/// non-negative alignment contribute.
pub fn predicted_loss_change(
    bundle: &GradientBundle,
    layout: &ParamLayout,
    cfg: &SolverConfig,
) -> Result<LossChangeReport> {
    layout.check(bundle.dim())?;
    let Some(shared) = &bundle.shared else {
        return Err(Error::Empty("old-task gradient list"));
    };
    match cfg.mode {
        UpdateMode::Concatenated => {
            let basis = relax_basis(&bundle.specific, cfg);
            let pg = apply_projection(&basis, &bundle.new_grad)?;
            let parts: Vec<f64> = layout
                .segments
                .iter()
                .map(|s| {
                    let r = s.offset..s.offset + s.len;
                    dot(&shared[r.clone()], &pg[r])
                })
                .collect();
            let total = parts.iter().fold(0.0, |acc, p| acc + p);
            let contributes = total >= 0.0;
            Ok(LossChangeReport {
                per_layer: layout
                    .segments
                    .iter()
                    .zip(parts)
                    .map(|(s, alignment)| LayerAlignment {
                        name: s.name.clone(),
                        alignment,
                        contributes,
                    })
                    .collect(),
                predicted_delta: if contributes { -total } else { 0.0 },
                mode: UpdateMode::Concatenated,
            })
        }
        UpdateMode::Layerwise => {
            let mut per_layer = Vec::with_capacity(layout.num_layers());
            let mut gain = 0.0;
            for s in &layout.segments {
                let part = bundle.restrict(s.offset, s.len);
                let basis = relax_basis(&part.specific, cfg);
                let pg = apply_projection(&basis, &part.new_grad)?;
                let alignment = dot(part.shared.as_ref().expect("old grads present"), &pg);
                let contributes = alignment >= 0.0;
                // adding zero for the non-contributing layers keeps the
                // accumulation order identical to the concatenated sum
                gain += if contributes { alignment } else { 0.0 };
                per_layer.push(LayerAlignment {
                    name: s.name.clone(),
                    alignment,
                    contributes,
                });
            }
            Ok(LossChangeReport {
                per_layer,
                predicted_delta: -gain,
                mode: UpdateMode::Layerwise,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::Relaxation;

    fn v(x: &[f64]) -> FlatVector {
        FlatVector::from(x)
    }

    fn cfg(mode: UpdateMode) -> SolverConfig {
        SolverConfig {
            mode,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn layout_rules() {
        assert!(ParamLayout::new(Vec::<(String, usize)>::new()).is_err());
        assert!(ParamLayout::new([("a", 2), ("b", 0)]).is_err());
        let l = ParamLayout::new([("a", 2), ("b", 3)]).unwrap();
        assert_eq!(l.total(), 5);
        assert_eq!(l.segments()[1].offset, 2);
    }

    #[test]
    fn split_examples() {
        let l = ParamLayout::new([("a", 2), ("b", 2)]).unwrap();
        let parts = split_by_layer(&[1.0, 2.0, 3.0, 4.0], &l).unwrap();
        assert_eq!(parts, vec![v(&[1.0, 2.0]), v(&[3.0, 4.0])]);
        assert_eq!(FlatVector::concat(&parts).as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        let single = ParamLayout::single(3).unwrap();
        assert_eq!(
            split_by_layer(&[1.0, 2.0, 3.0], &single).unwrap(),
            vec![v(&[1.0, 2.0, 3.0])]
        );
        assert!(split_by_layer(&[1.0], &l).is_err());
    }

    #[test]
    fn per_layer_branches() {
        // layer 1 aligned, layer 2 opposed; single memory so P = I
        let g = v(&[1.0, 1.0, -1.0, 1.0]);
        let old = v(&[1.0, 0.0, 1.0, 0.0]);
        let bundle = GradientBundle::new(g, vec![old]).unwrap();
        let l = ParamLayout::new([("l1", 2), ("l2", 2)]).unwrap();
        let up = layerwise_solve(&bundle, &l, &cfg(UpdateMode::Layerwise)).unwrap();
        assert_eq!(up.layers[0].branch, Branch::ProjectOnly);
        assert_eq!(up.layers[1].branch, Branch::ProjectAndReflect);
        assert_eq!(&up.w[..2], &[1.0, 1.0]);
        assert_eq!(dot(&[1.0, 0.0], &up.w[2..]), 0.0);
    }

    #[test]
    fn loss_change_examples() {
        let one = ParamLayout::single(2).unwrap();
        let b = GradientBundle::new(v(&[1.0, 0.0]), vec![v(&[1.0, 0.0])]).unwrap();
        let r = predicted_loss_change(&b, &one, &cfg(UpdateMode::Concatenated)).unwrap();
        assert_eq!(r.predicted_delta, -1.0);

        let b = GradientBundle::new(v(&[-1.0, 0.0]), vec![v(&[1.0, 0.0])]).unwrap();
        let r = predicted_loss_change(&b, &one, &cfg(UpdateMode::Concatenated)).unwrap();
        assert_eq!(r.predicted_delta, 0.0);

        // alignments +0.5 and -0.3
        let b = GradientBundle::new(v(&[0.5, -0.3]), vec![v(&[1.0, 1.0])]).unwrap();
        let two = ParamLayout::new([("a", 1), ("b", 1)]).unwrap();
        let r = predicted_loss_change(&b, &two, &cfg(UpdateMode::Layerwise)).unwrap();
        assert_eq!(r.predicted_delta, -0.5);
        assert!(r.per_layer[0].contributes && !r.per_layer[1].contributes);
    }

    #[test]
    fn single_layer_matches_concatenated() {
        let g = v(&[0.3, -1.2, 0.8, 2.0, -0.1]);
        let old = vec![
            v(&[1.0, 0.2, -0.3, 0.0, 1.0]),
            v(&[-0.5, 1.0, 0.4, -2.0, 0.3]),
            v(&[0.1, 0.1, 0.9, 0.2, -0.7]),
        ];
        let bundle = GradientBundle::new(g, old).unwrap();
        let c = SolverConfig {
            relaxation: Relaxation::Full,
            ..SolverConfig::default()
        };
        let (concat, _) = concatenated_solve(&bundle, &c).unwrap();
        let lw = layerwise_solve(&bundle, &ParamLayout::single(5).unwrap(), &c).unwrap();
        assert_eq!(concat.w, lw.w);
    }
}
