//! Correlation-map export for trained models with a tsf neck.
//!
//! For image `i` the exporter writes, as `h x w` CSV grids:
//! - `image{i}_f.csv`: `‖f_m‖` of the backbone feature at every position,
//! - `image{i}_f_out.csv`: `‖f'_m‖` of the neck output,
//! - `image{i}_filter{k}.csv`: column `k` of `R = softmax(f θᵀ)`.
//!
//! Values use 17 significant digits, so parsing them back gives the
//! in-memory `f64` exactly.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use tsf_core::attention::{correlation_map, NeckKind};
use tsf_core::patchproto::PatchProto;
use tsf_core::Tensor;

/// One exported grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub name: String,
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.w) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Vec<Vec<f64>>> {
        text.lines()
            .map(|l| l.split(',').map(|v| v.parse::<f64>().with_context(|| format!("bad value {v:?}"))).collect())
            .collect()
    }
}

fn position_norms(f: &Tensor) -> Vec<f64> {
    let (c, hw) = (f.shape()[0], f.shape()[1] * f.shape()[2]);
    (0..hw)
        .map(|m| (0..c).map(|ch| f.data()[ch * hw + m].powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// Grids of one `[ch, H, W]` image: input norms, output norms, then one
/// grid per filter row.
pub fn correlation_grids(model: &PatchProto, image: &Tensor, index: usize) -> Result<Vec<Grid>> {
    let neck = &model.config.neck;
    if neck.kind != NeckKind::Tsf {
        bail!("correlation maps need a tsf neck, this model uses {}", neck.kind);
    }
    if neck.heads != 1 {
        bail!("correlation maps are defined for a single head, this model uses {}", neck.heads);
    }
    let batch = Tensor::stack(&[image])?;
    let f = model.backbone_features(&batch)?.slab(0);
    let out = model.embed(&batch)?.slab(0);
    let theta = model.params.get("neck.theta").context("model has no semantic filter")?;
    let r = correlation_map(&f, theta)?;
    let (h, w) = (f.shape()[1], f.shape()[2]);
    let n = theta.shape()[0];
    let grid = |name: String, values: Vec<f64>| Grid { name, h, w, values };
    let mut grids = vec![
        grid(format!("image{index}_f"), position_norms(&f)),
        grid(format!("image{index}_f_out"), position_norms(&out)),
    ];
    for k in 0..n {
        grids.push(grid(format!("image{index}_filter{k}"), r.data().iter().skip(k).step_by(n).copied().collect()));
    }
    Ok(grids)
}

/// Writes the grids of every image in `images` (`[B, ch, H, W]`) into `dir`.
pub fn export_correlation_maps(model: &PatchProto, images: &Tensor, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    ensure!(images.rank() == 4, "expected an image batch, got {:?}", images.shape());
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for i in 0..images.shape()[0] {
        for g in correlation_grids(model, &images.slab(i), i)? {
            let path = dir.join(format!("{}.csv", g.name));
            std::fs::write(&path, g.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            written.push(path);
        }
    }
    Ok(written)
}
