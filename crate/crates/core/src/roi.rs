//! ROI-level analyses: synthetic activation patterns pushed through the
//! trained decoders into the generator, and the instance-vs-dense weight
//! percentile map that localizes which voxels drive which latent family.

use crate::dataio::{ImageTensor, Matrix, RoiMask};
use crate::error::{Error, Result};
use crate::oracle::GeneratorOracle;
use crate::pipeline::{decode_latents, DecoderSet};

/// Per-voxel weight-norm statistics for the instance-feature and dense
/// decoders; percentiles are average-rank based, differences instance
/// minus dense.
#[derive(Debug, Clone)]
pub struct VoxelWeightStats {
    pub l1_instance: Vec<f64>,
    pub l1_dense: Vec<f64>,
    pub pct_instance: Vec<f64>,
    pub pct_dense: Vec<f64>,
    pub diff: Vec<f64>,
}

impl VoxelWeightStats {
    pub fn n_voxels(&self) -> usize {
        self.diff.len()
    }

    /// Weight-map CSV, one row per voxel.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("voxel,l1_instance,l1_dense,pct_instance,pct_dense,diff\n");
        for v in 0..self.n_voxels() {
            out.push_str(&format!(
                "{v},{},{},{},{},{}\n",
                self.l1_instance[v],
                self.l1_dense[v],
                self.pct_instance[v],
                self.pct_dense[v],
                self.diff[v]
            ));
        }
        out
    }
}

/// Mean percentile difference over one ROI with its standard error across
/// voxels (not across subjects; there is only one synthetic subject).
#[derive(Debug, Clone)]
pub struct RoiSummary {
    pub name: String,
    pub mean_diff: f64,
    pub se_diff: f64,
    pub n_voxels: usize,
}

/// Binary indicator vector: 1 inside the ROI, 0 outside.
pub fn synth_pattern(mask: &RoiMask, n_voxels: usize) -> Result<Vec<f64>> {
    let mut pattern = vec![0.0; n_voxels];
    for &v in &mask.voxel_indices {
        if v >= n_voxels {
            return Err(Error::IndexOutOfRange {
                index: v,
                limit: n_voxels,
                context: format!("ROI {} voxel index", mask.name),
            });
        }
        pattern[v] = 1.0;
    }
    Ok(pattern)
}

/// Decode an arbitrary activation pattern and render it through the dense
/// path, with the decoded instance features rescaled to unit norm first.
pub fn activation_image(
    decoders: &DecoderSet,
    gen: &dyn GeneratorOracle,
    pattern: &[f64],
) -> Result<ImageTensor> {
    let x = Matrix::from_f64(1, pattern.len(), pattern)?;
    let mut triple = decode_latents(decoders, &x)?.remove(0);
    let h = triple.h.as_slice();
    let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroNorm {
            context: "decoded instance features of activation pattern".into(),
        });
    }
    let unit: Vec<f64> = h.iter().map(|v| v / norm).collect();
    triple.h = crate::oracle::InstanceFeature::new(unit)?;
    gen.generate_from_dense(&triple.h, triple.z.tail(), &triple.d)
}

/// Image maximizing the decoders' response for one ROI: the all-ones
/// pattern inside the ROI, zero outside, decoded and rendered.
pub fn roi_maximize(
    decoders: &DecoderSet,
    gen: &dyn GeneratorOracle,
    mask: &RoiMask,
) -> Result<ImageTensor> {
    let pattern = synth_pattern(mask, decoders.scaler.mean.len())?;
    activation_image(decoders, gen, &pattern)
}

/// Percentile of each value across the slice, using average ranks for ties:
/// 100 * (rank - 0.5) / n with 1-based average ranks.
fn percentile_ranks(values: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("weight norm {bad} in percentile ranking"),
        });
    }
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut pct = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        let p = 100.0 * (avg_rank - 0.5) / n as f64;
        for k in i..=j {
            pct[order[k]] = p;
        }
        i = j + 1;
    }
    Ok(pct)
}

/// Per-voxel L1 weight norms of the instance and dense decoders, their
/// percentiles across voxels, and the percentile difference.
pub fn weight_percentile_map(decoders: &DecoderSet) -> Result<VoxelWeightStats> {
    let wh = &decoders.model_h.weights;
    let wd = &decoders.model_d.weights;
    if wh.nrows() != wd.nrows() {
        return Err(Error::ShapeMismatch {
            context: format!(
                "instance model has {} voxels, dense model {}",
                wh.nrows(),
                wd.nrows()
            ),
        });
    }
    let l1 = |m: &nalgebra::DMatrix<f64>| -> Vec<f64> {
        (0..m.nrows())
            .map(|r| m.row(r).iter().map(|w| w.abs()).sum())
            .collect()
    };
    let l1_instance = l1(wh);
    let l1_dense = l1(wd);
    let pct_instance = percentile_ranks(&l1_instance)?;
    let pct_dense = percentile_ranks(&l1_dense)?;
    let diff = pct_instance
        .iter()
        .zip(&pct_dense)
        .map(|(a, b)| a - b)
        .collect();
    Ok(VoxelWeightStats {
        l1_instance,
        l1_dense,
        pct_instance,
        pct_dense,
        diff,
    })
}

/// Mean percentile difference and across-voxel standard error per ROI.
pub fn roi_summary(stats: &VoxelWeightStats, masks: &[RoiMask]) -> Result<Vec<RoiSummary>> {
    let n = stats.n_voxels();
    masks
        .iter()
        .map(|mask| {
            if mask.voxel_indices.is_empty() {
                return Err(Error::EmptyMask {
                    name: mask.name.clone(),
                });
            }
            let mut vals = Vec::with_capacity(mask.voxel_indices.len());
            for &v in &mask.voxel_indices {
                if v >= n {
                    return Err(Error::IndexOutOfRange {
                        index: v,
                        limit: n,
                        context: format!("ROI {} voxel index", mask.name),
                    });
                }
                vals.push(stats.diff[v]);
            }
            let k = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / k;
            let se = if vals.len() == 1 {
                0.0
            } else {
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0);
                (var / k).sqrt()
            };
            Ok(RoiSummary {
                name: mask.name.clone(),
                mean_diff: mean,
                se_diff: se,
                n_voxels: vals.len(),
            })
        })
        .collect()
}
