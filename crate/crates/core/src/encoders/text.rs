use std::collections::BTreeMap;

use super::{EncoderError, TextEncoderConfig};
use crate::numerics::{Graph, NodeId};
use crate::tokenizer::TokenId;

fn param(nodes: &BTreeMap<String, NodeId>, name: &str) -> Result<NodeId, EncoderError> {
    nodes
        .get(name)
        .copied()
        .ok_or_else(|| EncoderError::Config(format!("parameter {name} is not declared")))
}

fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId, EncoderError> {
    let y = g.matmul(x, w)?;
    Ok(match b {
        Some(b) => g.add_bias(y, b)?,
        None => y,
    })
}

/// Pre-norm block. With `eos_only`, only the final row is carried forward,
/// which is all EOS pooling reads from the last block.
fn block(
    g: &mut Graph,
    cfg: &TextEncoderConfig,
    nodes: &BTreeMap<String, NodeId>,
    layer: usize,
    x: NodeId,
    eos_only: bool,
) -> Result<NodeId, EncoderError> {
    let p = |s: &str| param(nodes, &format!("text.block{layer}.{s}"));
    let n = g.shape(x)[0];
    let h = g.layer_norm(x, p("ln1.g")?, p("ln1.b")?)?;
    let (x_q, h_q) = if eos_only {
        (g.slice_rows(x, n - 1, 1)?, g.slice_rows(h, n - 1, 1)?)
    } else {
        (x, h)
    };
    let q = linear(g, h_q, p("attn.wq")?, Some(p("attn.bq")?))?;
    let k = linear(g, h, p("attn.wk")?, Some(p("attn.bk")?))?;
    let v = linear(g, h, p("attn.wv")?, Some(p("attn.bv")?))?;
    let k_t = g.transpose(k)?;
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for head in 0..cfg.num_heads {
        let qh = g.slice_cols(q, head * dh, dh)?;
        let kh_t = g.slice_rows(k_t, head * dh, dh)?;
        let vh = g.slice_cols(v, head * dh, dh)?;
        let scores = g.matmul(qh, kh_t)?;
        let scores = g.scale(scores, inv_sqrt);
        let weights = g.softmax_rows(scores)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(heads)?
    };
    let attn = linear(g, merged, p("attn.wo")?, Some(p("attn.bo")?))?;
    let x = g.add(x_q, attn)?;
    let h2 = g.layer_norm(x, p("ln2.g")?, p("ln2.b")?)?;
    let f = linear(g, h2, p("ffn.w1")?, Some(p("ffn.b1")?))?;
    let f = g.gelu(f);
    let f = linear(g, f, p("ffn.w2")?, Some(p("ffn.b2")?))?;
    Ok(g.add(x, f)?)
}

/// Builds the text tower for a batch of visible id lists (BOS … EOS) and
/// returns the `[batch, output_dim]` unit-norm embedding node.
pub(crate) fn text_tower(
    g: &mut Graph,
    cfg: &TextEncoderConfig,
    nodes: &BTreeMap<String, NodeId>,
    batch: &[&[TokenId]],
) -> Result<NodeId, EncoderError> {
    let tok_emb = param(nodes, "text.tok_emb")?;
    let pos_emb = param(nodes, "text.pos_emb")?;
    let mut pooled = Vec::with_capacity(batch.len());
    for ids in batch {
        let n = ids.len();
        let tok = g.embedding(tok_emb, ids.iter().map(|&id| id as usize).collect())?;
        let pos = g.slice_rows(pos_emb, 0, n)?;
        let mut x = g.add(tok, pos)?;
        for layer in 0..cfg.num_layers {
            x = block(g, cfg, nodes, layer, x, layer + 1 == cfg.num_layers)?;
        }
        pooled.push(x);
    }
    let stacked = if pooled.len() == 1 {
        pooled[0]
    } else {
        g.concat_rows(pooled)?
    };
    let normed = g.layer_norm(
        stacked,
        param(nodes, "text.ln_final.g")?,
        param(nodes, "text.ln_final.b")?,
    )?;
    let projected = linear(g, normed, param(nodes, "text.proj")?, None)?;
    Ok(g.l2_normalize_rows(projected)?)
}
