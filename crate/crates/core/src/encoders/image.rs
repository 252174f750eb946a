use std::collections::BTreeMap;

use super::{EncoderError, ImageEncoderConfig};
use crate::numerics::{Graph, NodeId};

/// MLP over `[batch, input_dim]` features, returning unit-norm rows.
pub(crate) fn image_tower(
    g: &mut Graph,
    cfg: &ImageEncoderConfig,
    nodes: &BTreeMap<String, NodeId>,
    features: NodeId,
) -> Result<NodeId, EncoderError> {
    let mut x = features;
    for layer in 0..cfg.num_layers {
        let lookup = |s: &str| {
            let name = format!("image.layer{layer}.{s}");
            nodes
                .get(&name)
                .copied()
                .ok_or_else(|| EncoderError::Config(format!("parameter {name} is not declared")))
        };
        let y = g.matmul(x, lookup("w")?)?;
        x = g.add_bias(y, lookup("b")?)?;
        if layer + 1 < cfg.num_layers {
            x = g.gelu(x);
        }
    }
    Ok(g.l2_normalize_rows(x)?)
}
