//! Single message-passing layers on the tape. Parameters are passed in as
//! tape variables so tests can plug in hand-built weights.

use std::rc::Rc;

use gridbench_autodiff::{Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Act {
    Identity,
    Leaky(f64),
}

impl Act {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Act::Identity => x,
            Act::Leaky(slope) => tape.leaky_relu(x, slope),
        }
    }
}

/// `x W + b` with a `1 x d_out` bias row.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Softmax over the unblocked entries of each row of `scores`.
pub fn masked_softmax(tape: &mut Tape, scores: Var, blocked: Option<&Rc<[bool]>>) -> Result<Var> {
    let s = match blocked {
        Some(m) => tape.masked_fill(scores, m.clone(), f64::NEG_INFINITY)?,
        None => scores,
    };
    Ok(tape.softmax_rows(s))
}

/// `act(norm H W + b)`; `norm` is the symmetric-normalized adjacency with
/// self-loops.
pub fn gcn(tape: &mut Tape, h: Var, norm: Var, w: Var, b: Var, act: Act) -> Result<Var> {
    let agg = tape.matmul(norm, h)?;
    let y = linear(tape, agg, w, Some(b))?;
    Ok(act.apply(tape, y))
}

pub struct GatHead {
    pub w: Var,
    pub a_src: Var,
    pub a_dst: Var,
}

/// Attention weights of one GAT head: row `i` holds `alpha_ij` over sources.
pub fn gat_attention(
    tape: &mut Tape,
    z: Var,
    head: &GatHead,
    blocked: &Rc<[bool]>,
    slope: f64,
) -> Result<Var> {
    let s = tape.matmul(z, head.a_src)?;
    let t = tape.matmul(z, head.a_dst)?;
    let s_row = tape.transpose(s);
    let e = tape.add(t, s_row)?;
    let e = tape.leaky_relu(e, slope);
    masked_softmax(tape, e, Some(blocked))
}

/// Multi-head GAT; heads are concatenated before the bias and activation.
pub fn gat(
    tape: &mut Tape,
    h: Var,
    heads: &[GatHead],
    b: Var,
    blocked: &Rc<[bool]>,
    slope: f64,
    act: Act,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(heads.len());
    for head in heads {
        let z = tape.matmul(h, head.w)?;
        let alpha = gat_attention(tape, z, head, blocked, slope)?;
        outs.push(tape.matmul(alpha, z)?);
    }
    let cat = tape.concat_cols(&outs)?;
    let y = tape.add(cat, b)?;
    Ok(act.apply(tape, y))
}

pub struct Mlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `act(MLP((1 + eps) h_i + sum_j h_j))`, summing over plain neighbors.
pub fn gin(
    tape: &mut Tape,
    h: Var,
    adjacency: Var,
    eps: Var,
    mlp: Option<&Mlp>,
    inner: Act,
    act: Act,
) -> Result<Var> {
    let one_plus = tape.add_scalar(eps, 1.0);
    let own = tape.mul(h, one_plus)?;
    let nb = tape.matmul(adjacency, h)?;
    let x = tape.add(own, nb)?;
    let y = match mlp {
        Some(m) => {
            let z = linear(tape, x, m.w1, Some(m.b1))?;
            let z = inner.apply(tape, z);
            linear(tape, z, m.w2, Some(m.b2))?
        }
        None => x,
    };
    Ok(act.apply(tape, y))
}

pub struct AttnHead {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Scaled dot-product attention weights of one head.
pub fn dot_attention(
    tape: &mut Tape,
    h: Var,
    head: &AttnHead,
    blocked: Option<&Rc<[bool]>>,
) -> Result<(Var, Var)> {
    let q = tape.matmul(h, head.wq)?;
    let k = tape.matmul(h, head.wk)?;
    let v = tape.matmul(h, head.wv)?;
    let dk = tape.value(q).cols().max(1) as f64;
    let kt = tape.transpose(k);
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, 1.0 / dk.sqrt());
    Ok((masked_softmax(tape, s, blocked)?, v))
}

/// `h + act(concat_k(A_k V_k) W_O + b)`.
pub fn transformer(
    tape: &mut Tape,
    h: Var,
    heads: &[AttnHead],
    wo: Var,
    b: Var,
    blocked: Option<&Rc<[bool]>>,
    act: Act,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(heads.len());
    for head in heads {
        let (alpha, v) = dot_attention(tape, h, head, blocked)?;
        outs.push(tape.matmul(alpha, v)?);
    }
    let cat = tape.concat_cols(&outs)?;
    let y = linear(tape, cat, wo, Some(b))?;
    let y = act.apply(tape, y);
    tape.add(h, y)
}

/// One incoming relation of a heterogeneous layer.
pub struct HeteroInput {
    pub h_src: Var,
    /// Row-normalized `n_dst x n_src` adjacency (constant).
    pub mean: Var,
    pub w: Var,
}

/// `act(h W_t + b_t + sum_r mean_r H_src W_r)`.
pub fn hetero_gnn(
    tape: &mut Tape,
    h: Var,
    w_self: Var,
    b_self: Var,
    inputs: &[HeteroInput],
    act: Act,
) -> Result<Var> {
    let mut y = linear(tape, h, w_self, Some(b_self))?;
    for inp in inputs {
        let agg = tape.matmul(inp.mean, inp.h_src)?;
        let m = tape.matmul(agg, inp.w)?;
        y = tape.add(y, m)?;
    }
    Ok(act.apply(tape, y))
}

/// One incoming relation of an HGT head.
pub struct HgtInput {
    pub h_src: Var,
    pub wk: Var,
    pub wv: Var,
    /// Relation matrix applied to keys inside the score.
    pub w_att: Var,
    pub blocked: Rc<[bool]>,
}

/// Attention weights of one HGT head over the concatenated neighbor sets of
/// every relation, plus the stacked values they weight.
pub fn hgt_attention(tape: &mut Tape, h_dst: Var, wq: Var, inputs: &[HgtInput]) -> Result<(Var, Var)> {
    let q = tape.matmul(h_dst, wq)?;
    let dk = tape.value(q).cols().max(1) as f64;
    let mut scores = Vec::with_capacity(inputs.len());
    let mut values = Vec::with_capacity(inputs.len());
    for inp in inputs {
        let k = tape.matmul(inp.h_src, inp.wk)?;
        let k = tape.matmul(k, inp.w_att)?;
        let kt = tape.transpose(k);
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, 1.0 / dk.sqrt());
        scores.push(tape.masked_fill(s, inp.blocked.clone(), f64::NEG_INFINITY)?);
        values.push(tape.matmul(inp.h_src, inp.wv)?);
    }
    let s = tape.concat_cols(&scores)?;
    let v = tape.concat_rows(&values)?;
    Ok((tape.softmax_rows(s), v))
}

/// `h + act(concat_k(A_k V_k) W_out + b)` for one destination type.
pub fn hgt(
    tape: &mut Tape,
    h_dst: Var,
    heads: &[(Var, Vec<HgtInput>)],
    w_out: Var,
    b_out: Var,
    act: Act,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(heads.len());
    for (wq, inputs) in heads {
        let (alpha, v) = hgt_attention(tape, h_dst, *wq, inputs)?;
        outs.push(tape.matmul(alpha, v)?);
    }
    let cat = tape.concat_cols(&outs)?;
    let y = linear(tape, cat, w_out, Some(b_out))?;
    let y = act.apply(tape, y);
    tape.add(h_dst, y)
}

/// Inverted dropout with keep-probability `1 - p`; the mask is a constant.
pub fn dropout(tape: &mut Tape, h: Var, p: f64, draw: &mut dyn FnMut() -> f64) -> Result<Var> {
    if p <= 0.0 {
        return Ok(h);
    }
    let (r, c) = tape.value(h).shape();
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..r * c)
        .map(|_| if draw() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = tape.constant(Tensor::from_vec(r, c, mask)?);
    tape.mul(h, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.constant(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn gcn_single_node_identity() {
        let mut tape = Tape::new();
        let h = c(&mut tape, &[vec![0.3, -1.2]]);
        let norm = c(&mut tape, &[vec![1.0]]);
        let w = tape.constant(Tensor::identity(2));
        let b = tape.constant(Tensor::zeros(1, 2));
        let out = gcn(&mut tape, h, norm, w, b, Act::Identity).unwrap();
        assert_eq!(tape.value(out).data(), &[0.3, -1.2]);
    }

    #[test]
    fn gin_star_center_sums_leaves() {
        // node 0 is the center, 1..=3 are leaves
        let mut tape = Tape::new();
        let h = c(&mut tape, &[vec![0.0], vec![1.0], vec![1.0], vec![1.0]]);
        let mut a = Tensor::zeros(4, 4);
        for leaf in 1..4 {
            a.set(0, leaf, 1.0);
            a.set(leaf, 0, 1.0);
        }
        let a = tape.constant(a);
        let eps = tape.constant(Tensor::scalar(0.0));
        let out = gin(&mut tape, h, a, eps, None, Act::Identity, Act::Identity).unwrap();
        assert_eq!(tape.value(out).get(0, 0), 3.0);
    }

    #[test]
    fn transformer_mask_zeroes_non_neighbors() {
        let mut tape = Tape::new();
        let h = c(&mut tape, &[vec![0.5, 1.0], vec![-0.3, 0.2], vec![2.0, -1.0]]);
        let head = AttnHead {
            wq: tape.constant(Tensor::identity(2)),
            wk: tape.constant(Tensor::identity(2)),
            wv: tape.constant(Tensor::identity(2)),
        };
        // path 0 - 1 - 2 with self-loops; 0 and 2 are not adjacent
        let blocked: Rc<[bool]> = vec![false, false, true, false, false, false, true, false, false].into();
        let (alpha, _) = dot_attention(&mut tape, h, &head, Some(&blocked)).unwrap();
        let a = tape.value(alpha);
        assert_eq!(a.get(0, 2), 0.0);
        assert_eq!(a.get(2, 0), 0.0);
        for r in 0..3 {
            assert!((a.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gat_equal_keys_split_evenly() {
        let mut tape = Tape::new();
        // node 0 attends to nodes 1 and 2 which carry identical features
        let h = c(&mut tape, &[vec![1.0, 0.0], vec![0.2, 0.7], vec![0.2, 0.7]]);
        let head = GatHead {
            w: tape.constant(Tensor::identity(2)),
            a_src: c(&mut tape, &[vec![0.4], vec![-1.1]]),
            a_dst: c(&mut tape, &[vec![0.9], vec![0.3]]),
        };
        let blocked: Rc<[bool]> = vec![true, false, false, true, true, true, true, true, true].into();
        let z = tape.matmul(h, head.w).unwrap();
        let alpha = gat_attention(&mut tape, z, &head, &blocked, 0.2).unwrap();
        assert_eq!(tape.value(alpha).row_slice(0), &[0.0, 0.5, 0.5]);
    }

    #[test]
    fn hgt_single_neighbor_gets_full_weight() {
        let mut tape = Tape::new();
        let h_dst = c(&mut tape, &[vec![0.3, -0.8]]);
        let h_src = c(&mut tape, &[vec![1.7, 0.1], vec![-2.0, 0.4]]);
        let p = |tape: &mut Tape, x: f64| tape.constant(Tensor::from_rows(&[vec![x, 0.2], vec![-0.5, x]]).unwrap());
        let inputs = vec![HgtInput {
            h_src,
            wk: p(&mut tape, 1.3),
            wv: p(&mut tape, 0.7),
            w_att: p(&mut tape, -0.4),
            blocked: vec![true, false].into(),
        }];
        let wq = p(&mut tape, 2.2);
        let (alpha, _) = hgt_attention(&mut tape, h_dst, wq, &inputs).unwrap();
        assert_eq!(tape.value(alpha).data(), &[0.0, 1.0]);
    }

    #[test]
    fn hetero_identity_without_neighbors() {
        let mut tape = Tape::new();
        let h = c(&mut tape, &[vec![0.25, -4.0, 1.5]]);
        let w = tape.constant(Tensor::identity(3));
        let b = tape.constant(Tensor::zeros(1, 3));
        let out = hetero_gnn(&mut tape, h, w, b, &[], Act::Identity).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(h).data());
    }

    #[test]
    fn hetero_mean_ignores_duplicated_neighbors() {
        let run = |copies: usize| {
            let mut tape = Tape::new();
            let h = c(&mut tape, &[vec![1.0, 2.0]]);
            let src = tape.constant(Tensor::full(copies, 2, 0.5));
            let mean = tape.constant(Tensor::full(1, copies, 1.0 / copies as f64));
            let w = tape.constant(Tensor::identity(2));
            let b = tape.constant(Tensor::zeros(1, 2));
            let out = hetero_gnn(&mut tape, h, w, b, &[HeteroInput { h_src: src, mean, w }], Act::Identity).unwrap();
            tape.value(out).data().to_vec()
        };
        assert_eq!(run(1), run(2));
    }
}
