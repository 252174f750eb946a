use crate::numerics::{Bindings, DenseArray, Graph, NodeId};

use super::TrainError;

/// Tolerance on embedding norms accepted by [`contrastive_loss`].
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Adds the symmetric cross-entropy over `exp(log_scale) · img · txtᵀ`.
///
/// Returns `(loss, scaled similarity)` nodes. The loss is
/// `mean_i(½·(lse(row_i) + lse(col_i)) − sim_ii)`, which equals the average
/// of the row-wise and column-wise cross-entropies with diagonal targets.
pub fn contrastive_loss_node(
    g: &mut Graph,
    img: NodeId,
    txt: NodeId,
    log_scale: NodeId,
) -> Result<(NodeId, NodeId), TrainError> {
    let txt_t = g.transpose(txt)?;
    let raw = g.matmul(img, txt_t)?;
    let sim = g.exp_scale(raw, log_scale)?;
    let rows = g.logsumexp_rows(sim)?;
    let sim_t = g.transpose(sim)?;
    let cols = g.logsumexp_rows(sim_t)?;
    let both = g.add(rows, cols)?;
    let half = g.scale(both, 0.5);
    let diag = g.diagonal(sim)?;
    let per_pair = g.sub(half, diag)?;
    Ok((g.mean(per_pair), sim))
}

fn check_unit_rows(name: &str, z: &DenseArray) -> Result<(), TrainError> {
    for i in 0..z.rows() {
        let norm = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(TrainError::Usage(format!(
                "{name} row {i} has norm {norm}, expected unit norm"
            )));
        }
    }
    Ok(())
}

/// Symmetric contrastive loss of paired unit-norm embeddings.
pub fn contrastive_loss(
    z_img: &DenseArray,
    z_txt: &DenseArray,
    log_scale: f64,
) -> Result<(f64, DenseArray), TrainError> {
    if z_img.rank() != 2 || z_img.shape() != z_txt.shape() {
        return Err(TrainError::Usage(format!(
            "image embeddings {:?} and text embeddings {:?} must be equal-shape matrices",
            z_img.shape(),
            z_txt.shape()
        )));
    }
    if z_img.rows() < 2 {
        return Err(TrainError::Usage(format!(
            "contrastive loss needs at least 2 pairs, got {}",
            z_img.rows()
        )));
    }
    check_unit_rows("image embedding", z_img)?;
    check_unit_rows("text embedding", z_txt)?;
    let mut g = Graph::new();
    let img = g.input("img", z_img.shape())?;
    let txt = g.input("txt", z_txt.shape())?;
    let ls = g.input("log_scale", &[1])?;
    let (loss, sim) = contrastive_loss_node(&mut g, img, txt, ls)?;
    let ls_value = DenseArray::scalar(log_scale);
    let bindings = Bindings::new()
        .bind("img", z_img)
        .bind("txt", z_txt)
        .bind("log_scale", &ls_value);
    let eval = g.evaluate(&bindings)?;
    Ok((eval.scalar(loss), eval.value(sim).clone()))
}
