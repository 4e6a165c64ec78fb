use super::conv::{matmul_at_into, matmul_bt_into, matmul_into};
use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use super::AutodiffError;

/// Row-softmax of `QKᵀ/√D` for each batch item: `[B, Tq, Tk]`.
pub fn attention_weights<T: Real>(
    queries: &Tensor<T>,
    keys: &Tensor<T>,
) -> Result<Tensor<T>, AutodiffError> {
    let (b, tq, d) = dims3(queries)?;
    let (bk, tk, dk) = dims3(keys)?;
    if b != bk || d != dk {
        return Err(AutodiffError::ShapeMismatch(format!(
            "attention queries {:?} vs keys {:?}",
            queries.shape(),
            keys.shape()
        )));
    }
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let mut probs = vec![T::zero(); b * tq * tk];
    for i in 0..b {
        let q = &queries.data()[i * tq * d..(i + 1) * tq * d];
        let k = &keys.data()[i * tk * d..(i + 1) * tk * d];
        let p = &mut probs[i * tq * tk..(i + 1) * tq * tk];
        matmul_bt_into(tq, d, tk, q, k, p, false);
        for row in p.chunks_mut(tk) {
            let mut max = T::neg_infinity();
            for v in row.iter_mut() {
                *v *= scale;
                max = max.max(*v);
            }
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
    }
    Tensor::new(&[b, tq, tk], probs)
}

fn dims3<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, usize), AutodiffError> {
    match t.shape() {
        &[b, n, d] => Ok((b, n, d)),
        s => Err(AutodiffError::ShapeMismatch(format!(
            "expected rank-3 token tensor, got {s:?}"
        ))),
    }
}

impl<T: Real> Tape<T> {
    /// Single-head scaled dot-product attention `softmax(QKᵀ/√D)·V`.
    pub fn cross_attention(
        &mut self,
        queries: Var,
        keys: Var,
        values: Var,
    ) -> Result<Var, AutodiffError> {
        let probs = attention_weights(self.value(queries), self.value(keys))?;
        let (b, tq, d) = dims3(self.value(queries))?;
        let (bv, tk, dv) = dims3(self.value(values))?;
        if bv != b || tk != self.value(keys).shape()[1] || dv != d {
            return Err(AutodiffError::ShapeMismatch(format!(
                "attention values {:?} do not match keys {:?}",
                self.value(values).shape(),
                self.value(keys).shape()
            )));
        }
        let mut out = vec![T::zero(); b * tq * d];
        for i in 0..b {
            matmul_into(
                tq,
                tk,
                d,
                &probs.data()[i * tq * tk..(i + 1) * tq * tk],
                &self.value(values).data()[i * tk * d..(i + 1) * tk * d],
                &mut out[i * tq * d..(i + 1) * tq * d],
                false,
            );
        }
        let value = Tensor::new(&[b, tq, d], out)?;
        Ok(self.record(value, &[queries, keys, values], move |g, nodes| {
            let q = nodes[queries.0].value.data();
            let k = nodes[keys.0].value.data();
            let v = nodes[values.0].value.data();
            let p = probs.data();
            let g = g.data();
            let scale = T::one() / T::from_usize(d).unwrap().sqrt();
            let mut dq = vec![T::zero(); b * tq * d];
            let mut dk = vec![T::zero(); b * tk * d];
            let mut dvals = vec![T::zero(); b * tk * d];
            let mut ds = vec![T::zero(); tq * tk];
            for i in 0..b {
                let (qs, ks, vs) = (i * tq * d..(i + 1) * tq * d, i * tk * d..(i + 1) * tk * d, i * tq * tk..(i + 1) * tq * tk);
                let gi = &g[qs.clone()];
                let pi = &p[vs];
                matmul_at_into(tk, tq, d, pi, gi, &mut dvals[ks.clone()], false);
                matmul_bt_into(tq, d, tk, gi, &v[ks.clone()], &mut ds, false);
                for (drow, prow) in ds.chunks_mut(tk).zip(pi.chunks(tk)) {
                    let inner: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for (dv, &pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - inner) * scale;
                    }
                }
                matmul_into(tq, tk, d, &ds, &k[ks.clone()], &mut dq[qs.clone()], false);
                matmul_at_into(tk, tq, d, &ds, &q[qs], &mut dk[ks], false);
            }
            vec![
                (queries, Tensor::new(&[b, tq, d], dq).unwrap()),
                (keys, Tensor::new(&[b, tk, d], dk).unwrap()),
                (values, Tensor::new(&[b, tk, d], dvals).unwrap()),
            ]
        }))
    }
}
