//! Weighted-graph GAT and GraphSage layers.
//!
//! Both layers take the dense adjacency as a tape node so gradients reach
//! coarsened adjacencies produced upstream. Edge weights gate attention by
//! multiplication after the softmax, keeping zero-weight edges exactly
//! silent.

use crate::autodiff::{param, ParamRef, Real, Tape, Var};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Slope of the LeakyReLU on attention logits.
pub const GAT_LEAKY_SLOPE: f64 = 0.2;
/// Guard added to attention and neighbor-mean denominators.
pub const NORM_EPS: f64 = 1e-8;

/// Single-head graph attention layer.
pub struct GatLayer<F: Real> {
    pub w: ParamRef<F>,
    /// Stacked [a1; a2], each d_out long; logits are a1.Wx_i + a2.Wx_j.
    pub attn: ParamRef<F>,
    pub d_in: usize,
    pub d_out: usize,
}

fn glorot<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<F> {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols)
        .map(|_| F::from_f64(rng.gen_range(-s..s)))
        .collect()
}

impl<F: Real> GatLayer<F> {
    pub fn init(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        GatLayer {
            w: param(d_in, d_out, glorot(rng, d_in, d_out)),
            attn: param(2 * d_out, 1, glorot(rng, 2 * d_out, 1)),
            d_in,
            d_out,
        }
    }

    pub fn params(&self) -> Vec<ParamRef<F>> {
        vec![self.w.clone(), self.attn.clone()]
    }
}

/// GraphSage layer with mean aggregation.
pub struct SageLayer<F: Real> {
    pub w_self: ParamRef<F>,
    pub w_neigh: ParamRef<F>,
    pub d_in: usize,
    pub d_out: usize,
}

impl<F: Real> SageLayer<F> {
    pub fn init(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        Self::init_gained(rng, d_in, d_out, 1.0)
    }

    /// Glorot init with every weight multiplied by `gain`. Callers use this
    /// to cancel a known scale factor of the surrounding computation, so the
    /// layer output starts at roughly the input's magnitude.
    pub fn init_gained(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, gain: f64) -> Self {
        let mut table = |rng: &mut ChaCha8Rng| {
            let mut data = glorot::<F>(rng, d_in, d_out);
            for v in &mut data {
                *v = *v * F::from_f64(gain);
            }
            data
        };
        SageLayer {
            w_self: param(d_in, d_out, table(rng)),
            w_neigh: param(d_in, d_out, table(rng)),
            d_in,
            d_out,
        }
    }

    pub fn params(&self) -> Vec<ParamRef<F>> {
        vec![self.w_self.clone(), self.w_neigh.clone()]
    }
}

fn check_adjacency<F: Real>(tape: &Tape<F>, a: Var, x: Var) -> Result<usize> {
    let (n, n2) = tape.shape(a);
    let (xn, _) = tape.shape(x);
    if n != n2 {
        return Err(Error::dim("adjacency", format!("{n}x{n2}"), "square"));
    }
    if xn != n {
        return Err(Error::dim("adjacency rows", n, xn));
    }
    if tape.value(a).iter().any(|&v| v < F::ZERO) {
        return Err(Error::Contract(
            "adjacency entries must be nonnegative".into(),
        ));
    }
    Ok(n)
}

/// Attention forward: ELU of edge-gated attention over Wx.
///
/// Logits decompose as e_ij = LeakyReLU(u_i + v_j) with u = Wx.a1 and
/// v = Wx.a2, so the n x n logit matrix is two rank-one broadcasts.
pub fn gat_forward<F: Real>(
    tape: &mut Tape<F>,
    layer: &GatLayer<F>,
    a: Var,
    x: Var,
) -> Result<Var> {
    let n = check_adjacency(tape, a, x)?;
    let w = tape.leaf(&layer.w);
    let attn = tape.leaf(&layer.attn);
    let h = tape.matmul(x, w)?;

    let d = layer.d_out;
    let a1_ids: Vec<usize> = (0..d).collect();
    let a2_ids: Vec<usize> = (d..2 * d).collect();
    let a1 = tape.gather_rows(attn, &a1_ids)?;
    let a2 = tape.gather_rows(attn, &a2_ids)?;
    let u = tape.matmul(h, a1)?;
    let v = tape.matmul(h, a2)?;
    let u_cols = tape.broadcast_col(u, n)?;
    let vt = tape.transpose(v);
    let v_rows = tape.broadcast_row(vt, n)?;
    let logits = tape.add(u_cols, v_rows)?;
    let logits = tape.leaky_relu(logits, F::from_f64(GAT_LEAKY_SLOPE));

    let alpha = tape.row_softmax(logits)?;
    let gated = tape.mul(alpha, a)?;
    let mass = tape.row_sum(gated);
    let mass = tape.add_scalar(mass, F::from_f64(NORM_EPS));
    let mass = tape.broadcast_col(mass, n)?;
    let alpha = tape.div(gated, mass)?;

    let mixed = tape.matmul(alpha, h)?;
    Ok(tape.elu(mixed))
}

/// Mean-aggregating GraphSage forward: ReLU(X W_self + mean_A(X) W_neigh).
pub fn sage_forward<F: Real>(
    tape: &mut Tape<F>,
    layer: &SageLayer<F>,
    a: Var,
    x: Var,
) -> Result<Var> {
    check_adjacency(tape, a, x)?;
    let w_self = tape.leaf(&layer.w_self);
    let w_neigh = tape.leaf(&layer.w_neigh);

    let weighted = tape.matmul(a, x)?;
    let mass = tape.row_sum(a);
    let mass = tape.add_scalar(mass, F::from_f64(NORM_EPS));
    let mass = tape.broadcast_col(mass, tape.shape(x).1)?;
    let mean = tape.div(weighted, mass)?;

    let own = tape.matmul(x, w_self)?;
    let agg = tape.matmul(mean, w_neigh)?;
    let sum = tape.add(own, agg)?;
    Ok(tape.relu(sum))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use rand::SeedableRng;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn set<F: Real>(p: &ParamRef<F>, data: &[f64]) {
        let mut t = p.borrow_mut();
        assert_eq!(t.len(), data.len());
        for (dst, &src) in t.data.iter_mut().zip(data) {
            *dst = F::from_f64(src);
        }
    }

    // independent loop oracle for the GAT forward
    fn gat_oracle(w: &[f64], attn: &[f64], a: &[f64], x: &[f64], n: usize, d_in: usize, d_out: usize) -> Vec<f64> {
        let mut h = vec![0.0; n * d_out];
        for i in 0..n {
            for o in 0..d_out {
                for k in 0..d_in {
                    h[i * d_out + o] += x[i * d_in + k] * w[k * d_out + o];
                }
            }
        }
        let leaky = |v: f64| if v > 0.0 { v } else { 0.2 * v };
        let mut out = vec![0.0; n * d_out];
        for i in 0..n {
            let mut e = vec![0.0; n];
            for j in 0..n {
                let mut s = 0.0;
                for o in 0..d_out {
                    s += attn[o] * h[i * d_out + o] + attn[d_out + o] * h[j * d_out + o];
                }
                e[j] = leaky(s);
            }
            let mx = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = e.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let alpha: Vec<f64> = exps.iter().map(|v| v / z).collect();
            let gated: Vec<f64> = (0..n).map(|j| alpha[j] * a[i * n + j]).collect();
            let mass: f64 = gated.iter().sum::<f64>() + NORM_EPS;
            for j in 0..n {
                let weight = gated[j] / mass;
                for o in 0..d_out {
                    out[i * d_out + o] += weight * h[j * d_out + o];
                }
            }
        }
        for v in &mut out {
            if *v <= 0.0 {
                *v = v.exp() - 1.0;
            }
        }
        out
    }

    #[test]
    fn single_node_gat_reduces_to_elu_of_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = GatLayer::<f64>::init(&mut rng, 3, 2);
        let mut tape = Tape::new();
        let a = tape.constant(1, 1, vec![1.0]);
        let x = tape.constant(1, 3, vec![0.5, -1.0, 2.0]);
        let y = gat_forward(&mut tape, &layer, a, x).unwrap();

        let w = layer.w.borrow();
        let mut proj = [0.0f64; 2];
        for o in 0..2 {
            for k in 0..3 {
                proj[o] += [0.5, -1.0, 2.0][k] * w.data[k * 2 + o];
            }
        }
        for (got, want) in tape.value(y).iter().zip(proj) {
            let want = if want > 0.0 { want } else { want.exp() - 1.0 };
            // self is the only neighbor but the renorm still carries its ε
            assert!((got - want).abs() < 1e-7, "{got} vs {want}");
        }
    }

    #[test]
    fn identical_rows_under_uniform_adjacency_stay_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = GatLayer::<f64>::init(&mut rng, 4, 3);
        let mut tape = Tape::new();
        let a = tape.constant(3, 3, vec![1.0; 9]);
        let row = [0.3, -0.7, 1.1, 0.2];
        let x = tape.constant(3, 4, row.repeat(3));
        let y = gat_forward(&mut tape, &layer, a, x).unwrap();
        let v = tape.value(y);
        for i in 1..3 {
            for o in 0..3 {
                assert!((v[i * 3 + o] - v[o]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gat_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, d_in, d_out) = (3, 4, 3);
        let layer = GatLayer::<f64>::init(&mut rng, d_in, d_out);
        let a: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut a_sym = a.clone();
        for i in 0..n {
            a_sym[i * n + i] = 1.0;
            for j in 0..i {
                a_sym[i * n + j] = a_sym[j * n + i];
            }
        }
        let x = randn(&mut rng, n * d_in);

        let mut tape = Tape::new();
        let av = tape.constant(n, n, a_sym.clone());
        let xv = tape.constant(n, d_in, x.clone());
        let y = gat_forward(&mut tape, &layer, av, xv).unwrap();

        let want = gat_oracle(
            &layer.w.borrow().data,
            &layer.attn.borrow().data,
            &a_sym,
            &x,
            n,
            d_in,
            d_out,
        );
        for (got, want) in tape.value(y).iter().zip(&want) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn negative_adjacency_is_a_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = GatLayer::<f64>::init(&mut rng, 2, 2);
        let mut tape = Tape::new();
        let a = tape.constant(2, 2, vec![1.0, -0.1, -0.1, 1.0]);
        let x = tape.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            gat_forward(&mut tape, &layer, a, x).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn isolated_node_sage_uses_itself_as_the_neighborhood() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = SageLayer::<f64>::init(&mut rng, 2, 2);
        let mut tape = Tape::new();
        // node 0 isolated with self-loop, node 1 idle
        let a = tape.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let x = tape.constant(2, 2, vec![0.8, -0.3, 0.0, 0.0]);
        let y = sage_forward(&mut tape, &layer, a, x).unwrap();

        let ws = layer.w_self.borrow();
        let wn = layer.w_neigh.borrow();
        for o in 0..2 {
            let mut want = 0.0;
            for k in 0..2 {
                // neighbor mean of the isolated node is itself (mass 1+ε)
                want += [0.8, -0.3][k] * (ws.data[k * 2 + o] + wn.data[k * 2 + o] / (1.0 + NORM_EPS));
            }
            let want = want.max(0.0);
            assert!((tape.value(y)[o] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_graph_neighbor_mean_is_each_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let layer = SageLayer::<f64>::init(&mut rng, 3, 2);
        let row = [0.4, 0.9, -0.2];
        let mut tape = Tape::new();
        let a = tape.constant(4, 4, vec![0.7; 16]);
        let x = tape.constant(4, 3, row.repeat(4));
        let y = sage_forward(&mut tape, &layer, a, x).unwrap();

        let ws = layer.w_self.borrow();
        let wn = layer.w_neigh.borrow();
        for o in 0..2 {
            let mut own = 0.0;
            let mut agg = 0.0;
            for k in 0..3 {
                own += row[k] * ws.data[k * 2 + o];
                agg += row[k] * wn.data[k * 2 + o];
            }
            let want = (own + agg).max(0.0);
            for i in 0..4 {
                assert!((tape.value(y)[i * 2 + o] - want).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn sage_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (n, d_in, d_out) = (4, 3, 3);
        let layer = SageLayer::<f64>::init(&mut rng, d_in, d_out);
        let a: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x = randn(&mut rng, n * d_in);

        let mut tape = Tape::new();
        let av = tape.constant(n, n, a.clone());
        let xv = tape.constant(n, d_in, x.clone());
        let y = sage_forward(&mut tape, &layer, av, xv).unwrap();

        let ws = &layer.w_self.borrow().data;
        let wn = &layer.w_neigh.borrow().data;
        for i in 0..n {
            let mass: f64 = (0..n).map(|j| a[i * n + j]).sum::<f64>() + NORM_EPS;
            let mut mean = vec![0.0; d_in];
            for j in 0..n {
                for k in 0..d_in {
                    mean[k] += a[i * n + j] * x[j * d_in + k] / mass;
                }
            }
            for o in 0..d_out {
                let mut s = 0.0;
                for k in 0..d_in {
                    s += x[i * d_in + k] * ws[k * d_out + o] + mean[k] * wn[k * d_out + o];
                }
                let want = s.max(0.0);
                let got = tape.value(y)[i * d_out + o];
                assert!((got - want).abs() < 1e-10, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn zero_adjacency_row_gives_zero_neighbor_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let layer = SageLayer::<f64>::init(&mut rng, 2, 2);
        let mut tape = Tape::new();
        let a = tape.constant(2, 2, vec![0.0, 0.0, 0.0, 1.0]);
        let x = tape.constant(2, 2, vec![0.5, -0.5, 1.0, 1.0]);
        let y = sage_forward(&mut tape, &layer, a, x).unwrap();
        let ws = layer.w_self.borrow();
        for o in 0..2 {
            let want = (0.5 * ws.data[o] - 0.5 * ws.data[2 + o]).max(0.0);
            assert!((tape.value(y)[o] - want).abs() < 1e-9);
        }
    }

    fn permute(p: &[usize], mat: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        for (i, &pi) in p.iter().enumerate() {
            out[pi * cols..(pi + 1) * cols].copy_from_slice(&mat[i * cols..(i + 1) * cols]);
        }
        out
    }

    #[test]
    fn both_layers_are_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (n, d) = (5, 4);
        let gat = GatLayer::<f64>::init(&mut rng, d, 3);
        let sage = SageLayer::<f64>::init(&mut rng, d, 3);
        for _ in 0..5 {
            let mut a: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
            for i in 0..n {
                for j in 0..i {
                    a[i * n + j] = a[j * n + i];
                }
            }
            let x = randn(&mut rng, n * d);
            let perm = [3usize, 0, 4, 1, 2];
            let xp = permute(&perm, &x, n, d);
            let mut ap = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    ap[perm[i] * n + perm[j]] = a[i * n + j];
                }
            }

            let mut t1 = Tape::new();
            let (a1, x1) = (t1.constant(n, n, a.clone()), t1.constant(n, d, x.clone()));
            let mut t2 = Tape::new();
            let (a2, x2) = (t2.constant(n, n, ap), t2.constant(n, d, xp));

            let g1 = gat_forward(&mut t1, &gat, a1, x1).unwrap();
            let g2 = gat_forward(&mut t2, &gat, a2, x2).unwrap();
            let s1 = sage_forward(&mut t1, &sage, a1, x1).unwrap();
            let s2 = sage_forward(&mut t2, &sage, a2, x2).unwrap();

            let g1p = permute(&perm, t1.value(g1), n, 3);
            let s1p = permute(&perm, t1.value(s1), n, 3);
            for (got, want) in t2.value(g2).iter().zip(&g1p) {
                assert!((got - want).abs() < 1e-9);
            }
            for (got, want) in t2.value(s2).iter().zip(&s1p) {
                assert!((got - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gat_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let (n, d_in, d_out) = (4, 3, 3);
        let layer = GatLayer::<f64>::init(&mut rng, d_in, d_out);
        set(&layer.w, &randn(&mut rng, d_in * d_out));
        set(&layer.attn, &randn(&mut rng, 2 * d_out));
        let a: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.1..1.0)).collect();
        let x = randn(&mut rng, n * d_in);
        let params = layer.params();
        let report = gradcheck::check(
            &params,
            |tape, _| {
                let av = tape.constant(n, n, a.clone());
                let xv = tape.constant(n, d_in, x.clone());
                let y = gat_forward(tape, &layer, av, xv)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            },
            usize::MAX,
            31,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn sage_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let (n, d_in, d_out) = (4, 3, 3);
        let layer = SageLayer::<f64>::init(&mut rng, d_in, d_out);
        let a: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x = randn(&mut rng, n * d_in);
        let params = layer.params();
        let report = gradcheck::check(
            &params,
            |tape, _| {
                let av = tape.constant(n, n, a.clone());
                let xv = tape.constant(n, d_in, x.clone());
                let y = sage_forward(tape, &layer, av, xv)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            },
            usize::MAX,
            41,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }
}
