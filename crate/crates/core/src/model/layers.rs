use super::params::Bound;
use crate::error::Result;
use crate::numerics::{Graph, Var};

pub const LN_EPS: f64 = 1e-6;

pub fn linear(g: &Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.get(&format!("{prefix}.w"))?)?;
    g.add_row(y, p.get(&format!("{prefix}.b"))?)
}

pub fn norm(g: &Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS);
    let n = g.mul_row(n, p.get(&format!("{prefix}.g"))?)?;
    g.add_row(n, p.get(&format!("{prefix}.b"))?)
}

/// Multi-head self-attention; `bias[h]` is added to head `h`'s logits.
pub fn attention(g: &Graph, p: &Bound, prefix: &str, x: Var, heads: usize, bias: Option<&[Var]>) -> Result<Var> {
    let dim = g.shape(x)[1];
    let dh = dim / heads;
    let qkv = linear(g, p, &format!("{prefix}.qkv"), x)?;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.slice_cols(qkv, h * dh, dh)?;
        let k = g.slice_cols(qkv, dim + h * dh, dh)?;
        let v = g.slice_cols(qkv, 2 * dim + h * dh, dh)?;
        let mut logits = g.scale(g.matmul_nt(q, k)?, inv_sqrt);
        if let Some(b) = bias {
            logits = g.add(logits, b[h])?;
        }
        let a = g.softmax_rows(logits);
        outs.push(g.matmul(a, v)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    linear(g, p, &format!("{prefix}.out"), cat)
}

/// Pre-norm transformer block.
pub fn block(g: &Graph, p: &Bound, prefix: &str, x: Var, heads: usize, bias: Option<&[Var]>) -> Result<Var> {
    let h = norm(g, p, &format!("{prefix}.ln1"), x)?;
    let x = g.add(x, attention(g, p, &format!("{prefix}.attn"), h, heads, bias)?)?;
    let h = norm(g, p, &format!("{prefix}.ln2"), x)?;
    let h = g.gelu(linear(g, p, &format!("{prefix}.mlp.fc1"), h)?);
    let h = linear(g, p, &format!("{prefix}.mlp.fc2"), h)?;
    g.add(x, h)
}
