//! Pre-norm transformer blocks.

use crate::autograd::{Graph, Var};
use crate::params::{Init, ParamSpec, ParamVars};

pub(crate) fn linear_specs(prefix: &str, fan_in: usize, fan_out: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(
            format!("{prefix}.weight"),
            &[fan_in, fan_out],
            Init::Xavier { fan_in, fan_out },
        ),
        ParamSpec::new(format!("{prefix}.bias"), &[fan_out], Init::Zeros),
    ]
}

fn norm_specs(prefix: &str, width: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{prefix}.weight"), &[width], Init::Ones),
        ParamSpec::new(format!("{prefix}.bias"), &[width], Init::Zeros),
    ]
}

pub(crate) fn block_specs(prefix: &str, width: usize, mlp_ratio: usize) -> Vec<ParamSpec> {
    let hidden = width * mlp_ratio;
    let mut specs = Vec::new();
    specs.extend(norm_specs(&format!("{prefix}.norm1"), width));
    for proj in ["q", "k", "v", "proj"] {
        specs.extend(linear_specs(&format!("{prefix}.attn.{proj}"), width, width));
    }
    specs.extend(norm_specs(&format!("{prefix}.norm2"), width));
    specs.extend(linear_specs(&format!("{prefix}.mlp.fc1"), width, hidden));
    specs.extend(linear_specs(&format!("{prefix}.mlp.fc2"), hidden, width));
    specs
}

pub(crate) fn linear(g: &mut Graph, pv: &ParamVars, prefix: &str, x: Var) -> Var {
    let w = pv.get(&format!("{prefix}.weight"));
    let b = pv.get(&format!("{prefix}.bias"));
    g.linear(x, w, b)
}

fn norm(g: &mut Graph, pv: &ParamVars, prefix: &str, x: Var) -> Var {
    let w = pv.get(&format!("{prefix}.weight"));
    let b = pv.get(&format!("{prefix}.bias"));
    g.layer_norm(x, w, b)
}

/// Multi-head scaled dot-product self-attention over the rows of `x`.
fn attention(g: &mut Graph, pv: &ParamVars, prefix: &str, x: Var, heads: usize) -> Var {
    let width = g.shape(x)[1];
    let head_dim = width / heads;
    let q = linear(g, pv, &format!("{prefix}.q"), x);
    let k = linear(g, pv, &format!("{prefix}.k"), x);
    let v = linear(g, pv, &format!("{prefix}.v"), x);
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim);
        let kh = g.slice_cols(k, h * head_dim, head_dim);
        let vh = g.slice_cols(v, h * head_dim, head_dim);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        outs.push(g.matmul(attn, vh));
    }
    let merged = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    };
    linear(g, pv, &format!("{prefix}.proj"), merged)
}

/// `x + attn(norm1(x))`, then `x + mlp(norm2(x))` with a GELU hidden layer.
pub(crate) fn block(g: &mut Graph, pv: &ParamVars, prefix: &str, x: Var, heads: usize) -> Var {
    let h = norm(g, pv, &format!("{prefix}.norm1"), x);
    let a = attention(g, pv, &format!("{prefix}.attn"), h, heads);
    let x = g.add(x, a);
    let h = norm(g, pv, &format!("{prefix}.norm2"), x);
    let h = linear(g, pv, &format!("{prefix}.mlp.fc1"), h);
    let h = g.gelu(h);
    let h = linear(g, pv, &format!("{prefix}.mlp.fc2"), h);
    g.add(x, h)
}
