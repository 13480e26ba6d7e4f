use super::lit;
use super::tape::{gelu_grad, matmul_raw, transpose_raw, Node, Op, Tape, Var};
use super::{DiffError, Gradients, Result, Scalar};

/// Reverse sweep over the tape. Node indices are already topologically
/// ordered, so one pass from `out` back to zero visits every reachable op
/// exactly once.
pub(crate) fn run<T: Scalar>(tape: &Tape<T>, out: Var) -> Result<Gradients<T>> {
    let out_val = tape.value(out);
    if out_val.numel() != 1 {
        return Err(DiffError::NonScalarOutput { shape: out_val.shape().to_vec() });
    }

    let mut adj: Vec<Option<Vec<T>>> = (0..tape.nodes.len()).map(|_| None).collect();
    adj[out.index()] = Some(vec![T::one()]);

    for idx in (0..=out.index()).rev() {
        let node = &tape.nodes[idx];
        if !node.needs_grad {
            continue;
        }
        if matches!(node.op, Op::Leaf) {
            continue;
        }
        let g = match adj[idx].take() {
            Some(g) => g,
            None => continue,
        };
        propagate(tape, node, &g, &mut adj);
    }

    let mut grads = Gradients::new(tape.nodes.len());
    for (idx, node) in tape.nodes.iter().enumerate() {
        if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
            let g = adj[idx].take().unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(DiffError::NonFinite { op: "backward" });
            }
            *grads.slot(Var(idx)) = Some(g);
        }
    }
    Ok(grads)
}

fn acc<T: Scalar>(adj: &mut [Option<Vec<T>>], tape: &Tape<T>, var: Var, contrib: impl FnOnce(&mut [T])) {
    if !tape.nodes[var.index()].needs_grad {
        return;
    }
    let slot = adj[var.index()].get_or_insert_with(|| vec![T::zero(); tape.value(var).numel()]);
    contrib(slot);
}

#[allow(clippy::too_many_lines)]
fn propagate<T: Scalar>(tape: &Tape<T>, node: &Node<T>, g: &[T], adj: &mut [Option<Vec<T>>]) {
    let val = |v: Var| tape.value(v);
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(adj, tape, *a, |ga| add_into(ga, g));
            acc(adj, tape, *b, |gb| add_into(gb, g));
        }
        Op::Sub(a, b) => {
            acc(adj, tape, *a, |ga| add_into(ga, g));
            acc(adj, tape, *b, |gb| {
                for (d, &x) in gb.iter_mut().zip(g) {
                    *d = *d - x;
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data().to_vec(), val(*b).data().to_vec());
            acc(adj, tape, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * bv[i];
                }
            });
            acc(adj, tape, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] += g[i] * av[i];
                }
            });
        }
        Op::Scale(a, c) => {
            let c = *c;
            acc(adj, tape, *a, |ga| {
                for (d, &x) in ga.iter_mut().zip(g) {
                    *d += x * c;
                }
            });
        }
        Op::MulScalar(a, s) => {
            let sv = val(*s).data()[0];
            let av = val(*a).data().to_vec();
            acc(adj, tape, *a, |ga| {
                for (d, &x) in ga.iter_mut().zip(g) {
                    *d += x * sv;
                }
            });
            acc(adj, tape, *s, |gs| {
                let mut t = T::zero();
                for (x, a) in g.iter().zip(&av) {
                    t += *x * *a;
                }
                gs[0] += t;
            });
        }
        Op::AddBias(x, b) => {
            let m = val(*b).numel();
            acc(adj, tape, *x, |gx| add_into(gx, g));
            acc(adj, tape, *b, |gb| {
                for (i, &x) in g.iter().enumerate() {
                    gb[i % m] += x;
                }
            });
        }
        Op::ScaleRows(x, s) => {
            let xv = val(*x);
            let (n, m) = (xv.rows(), xv.cols());
            let xd = xv.data().to_vec();
            let sd = val(*s).data().to_vec();
            acc(adj, tape, *x, |gx| {
                for i in 0..n {
                    for j in 0..m {
                        gx[i * m + j] += g[i * m + j] * sd[i];
                    }
                }
            });
            acc(adj, tape, *s, |gs| {
                for i in 0..n {
                    let mut t = T::zero();
                    for j in 0..m {
                        t += g[i * m + j] * xd[i * m + j];
                    }
                    gs[i] += t;
                }
            });
        }
        Op::SubRowBroadcast(x, s) => {
            let m = val(*x).cols();
            acc(adj, tape, *x, |gx| add_into(gx, g));
            acc(adj, tape, *s, |gs| {
                for (i, &x) in g.iter().enumerate() {
                    gs[i / m] = gs[i / m] - x;
                }
            });
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            // dA = G @ B^T, dB = A^T @ G
            let bt = transpose_raw(bv.data(), k, n);
            let da = matmul_raw(g, &bt, m, n, k);
            acc(adj, tape, *a, |ga| add_into(ga, &da));
            let at = transpose_raw(av.data(), m, k);
            let db = matmul_raw(&at, g, k, m, n);
            acc(adj, tape, *b, |gb| add_into(gb, &db));
        }
        Op::Transpose(a) => {
            let av = val(*a);
            let gt = transpose_raw(g, av.cols(), av.rows());
            acc(adj, tape, *a, |ga| add_into(ga, &gt));
        }
        Op::Reshape(a) => {
            acc(adj, tape, *a, |ga| add_into(ga, g));
        }
        Op::ConcatCols(parts) => {
            let rows = node.value.rows();
            let total = node.value.cols();
            let mut off = 0;
            for p in parts {
                let pc = val(*p).cols();
                let start = off;
                acc(adj, tape, *p, |gp| {
                    for i in 0..rows {
                        for j in 0..pc {
                            gp[i * pc + j] += g[i * total + start + j];
                        }
                    }
                });
                off += pc;
            }
        }
        Op::SliceRows(a, r0, _) => {
            let m = val(*a).cols();
            let (r0, len) = (*r0, g.len());
            acc(adj, tape, *a, |ga| {
                for (i, &x) in g.iter().enumerate() {
                    ga[r0 * m + i] += x;
                }
                debug_assert!(r0 * m + len <= ga.len());
            });
        }
        Op::SliceCols(a, c0, c1) => {
            let av = val(*a);
            let (_, m) = (av.rows(), av.cols());
            let w = c1 - c0;
            let c0 = *c0;
            acc(adj, tape, *a, |ga| {
                for (k, &x) in g.iter().enumerate() {
                    let (i, j) = (k / w, k % w);
                    ga[i * m + c0 + j] += x;
                }
            });
        }
        Op::Gather(a, map) => {
            acc(adj, tape, *a, |ga| {
                for (k, idx) in map.iter().enumerate() {
                    if let Some(i) = idx {
                        ga[*i] += g[k];
                    }
                }
            });
        }
        Op::EmbedRows(table, ids) => {
            let d = val(*table).cols();
            acc(adj, tape, *table, |gt| {
                for (t, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[t * d + j];
                    }
                }
            });
        }
        Op::StackScalars(parts) => {
            for (k, p) in parts.iter().enumerate() {
                acc(adj, tape, *p, |gp| gp[0] += g[k]);
            }
        }
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            let (n, m) = (y.rows(), y.cols());
            let yd = y.data();
            acc(adj, tape, *a, |ga| {
                for i in 0..n {
                    let row = &yd[i * m..(i + 1) * m];
                    let grow = &g[i * m..(i + 1) * m];
                    let dot: T = row.iter().zip(grow).map(|(&y, &x)| y * x).sum();
                    for j in 0..m {
                        ga[i * m + j] += row[j] * (grow[j] - dot);
                    }
                }
            });
        }
        Op::LogSumExpRows(a) => {
            let xv = val(*a);
            let (n, m) = (xv.rows(), xv.cols());
            let xd = xv.data().to_vec();
            let lse = node.value.data().to_vec();
            acc(adj, tape, *a, |ga| {
                for i in 0..n {
                    for j in 0..m {
                        ga[i * m + j] += g[i] * (xd[i * m + j] - lse[i]).exp();
                    }
                }
            });
        }
        Op::LayerNormRows { x, gamma, beta, .. } => {
            let xv = val(*x);
            let (n, m) = (xv.rows(), xv.cols());
            let saved = node.saved.as_ref().expect("layer norm saved state");
            let (xhat, rstd) = saved.split_at(n * m);
            let gam = val(*gamma).data().to_vec();
            let minv = T::one() / lit(m as f64);
            acc(adj, tape, *beta, |gb| {
                for i in 0..n {
                    for j in 0..m {
                        gb[j] += g[i * m + j];
                    }
                }
            });
            acc(adj, tape, *gamma, |gg| {
                for i in 0..n {
                    for j in 0..m {
                        gg[j] += g[i * m + j] * xhat[i * m + j];
                    }
                }
            });
            acc(adj, tape, *x, |gx| {
                for i in 0..n {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..m {
                        let gy = g[i * m + j] * gam[j];
                        m1 += gy;
                        m2 += gy * xhat[i * m + j];
                    }
                    m1 = m1 * minv;
                    m2 = m2 * minv;
                    for j in 0..m {
                        let gy = g[i * m + j] * gam[j];
                        gx[i * m + j] += rstd[i] * (gy - m1 - xhat[i * m + j] * m2);
                    }
                }
            });
        }
        Op::RowL2Norms(a) => {
            let xv = val(*a);
            let (n, m) = (xv.rows(), xv.cols());
            let xd = xv.data().to_vec();
            let norms = node.value.data().to_vec();
            acc(adj, tape, *a, |ga| {
                for i in 0..n {
                    if norms[i] == T::zero() {
                        continue;
                    }
                    let w = g[i] / norms[i];
                    for j in 0..m {
                        ga[i * m + j] += w * xd[i * m + j];
                    }
                }
            });
        }
        Op::Exp(a) => {
            let y = node.value.data().to_vec();
            acc(adj, tape, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * y[i];
                }
            });
        }
        Op::Ln(a) => {
            let x = val(*a).data().to_vec();
            acc(adj, tape, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] / x[i];
                }
            });
        }
        Op::Sqrt(a) => {
            let y = node.value.data().to_vec();
            let half: T = lit(0.5);
            acc(adj, tape, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * half / y[i];
                }
            });
        }
        Op::Recip(a) => {
            let y = node.value.data().to_vec();
            acc(adj, tape, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] = ga[i] - g[i] * y[i] * y[i];
                }
            });
        }
        Op::Abs(a) => {
            let x = val(*a).data().to_vec();
            acc(adj, tape, *a, |ga| {
                for i in 0..ga.len() {
                    let s = if x[i] > T::zero() {
                        T::one()
                    } else if x[i] < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    ga[i] += g[i] * s;
                }
            });
        }
        Op::Powi(a, k) => {
            let x = val(*a).data().to_vec();
            let kf: T = lit(f64::from(*k));
            let k = *k;
            acc(adj, tape, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * kf * x[i].powi(k - 1);
                }
            });
        }
        Op::Gelu(a) => {
            let x = val(*a).data().to_vec();
            acc(adj, tape, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * gelu_grad(x[i]);
                }
            });
        }
        Op::MaskedFill { x, mask, .. } => {
            acc(adj, tape, *x, |gx| {
                for (i, &keep) in mask.iter().enumerate() {
                    if keep {
                        gx[i] += g[i];
                    }
                }
            });
        }
        Op::SumAll(a) => {
            let s = g[0];
            acc(adj, tape, *a, |ga| {
                for d in ga.iter_mut() {
                    *d += s;
                }
            });
        }
        Op::PairwiseOrthNorms { h, .. } => {
            let hv = val(*h);
            let (n, d) = (hv.rows(), hv.cols());
            let hd = hv.data().to_vec();
            let p = node.value.data().to_vec();
            let stored = node.saved.clone();
            acc(adj, tape, *h, |gh| {
                let mut o_buf = vec![T::zero(); d];
                for a in 0..n {
                    let ha = hd[a * d..(a + 1) * d].to_vec();
                    for b in 0..n {
                        if a == b {
                            continue;
                        }
                        let w = g[a * n + b];
                        let norm = p[a * n + b];
                        if w == T::zero() || norm == T::zero() {
                            continue;
                        }
                        let hb = &hd[b * d..(b + 1) * d];
                        let gab: T = ha.iter().zip(hb).map(|(&x, &y)| x * y).sum();
                        let o: &[T] = if let Some(saved) = &stored {
                            &saved[(a * n + b) * d..(a * n + b + 1) * d]
                        } else {
                            for j in 0..d {
                                o_buf[j] = hb[j] - gab * ha[j];
                            }
                            &o_buf
                        };
                        let scale = w / norm;
                        // u = scale * o; u.h_a is zero for exactly unit rows
                        // but kept for gradient exactness on near-unit input.
                        let mut u_dot_ha = T::zero();
                        for j in 0..d {
                            u_dot_ha += scale * o[j] * ha[j];
                        }
                        for j in 0..d {
                            let u = scale * o[j];
                            gh[b * d + j] += u - u_dot_ha * ha[j];
                            gh[a * d + j] = gh[a * d + j] - (u_dot_ha * hb[j] + gab * u);
                        }
                    }
                }
            });
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
