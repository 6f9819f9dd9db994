use super::{Result, Tape, TensorError, Var};

/// Single-head attention `softmax(Q·Kᵀ/√d')·V` with `Q = f·Wq`,
/// `K = c·Wk`, `V = c·Wv`.
///
/// Rows of `f` are queries and rows of `c` are keys/values, so passing the
/// same variable for both gives self-attention.
pub fn cross_attention(
    tape: &Tape,
    f: Var,
    c: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    d_model: usize,
) -> Result<Var> {
    if d_model == 0 {
        return Err(TensorError::Axis {
            op: "cross_attention",
            axis: 0,
            shape: vec![0],
        });
    }
    let (fs, cs) = (tape.shape(f), tape.shape(c));
    let (qs, ks) = (tape.shape(wq), tape.shape(wk));
    if fs.len() != 2 || qs.len() != 2 || fs[1] != qs[0] {
        return Err(TensorError::Shape {
            op: "cross_attention(query)",
            lhs: fs,
            rhs: qs,
        });
    }
    if cs.len() != 2 || ks.len() != 2 || cs[1] != ks[0] {
        return Err(TensorError::Shape {
            op: "cross_attention(key)",
            lhs: cs,
            rhs: ks,
        });
    }
    if qs[1] != ks[1] {
        return Err(TensorError::Shape {
            op: "cross_attention(query·key)",
            lhs: qs,
            rhs: ks,
        });
    }
    let q = tape.matmul(f, wq)?;
    let k = tape.matmul(c, wk)?;
    let v = tape.matmul(c, wv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d_model as f64).sqrt())?;
    let weights = tape.softmax(scores, 1)?;
    tape.matmul(weights, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn consts(tape: &Tape, ts: &[Tensor]) -> Vec<Var> {
        ts.iter().map(|t| tape.constant(t.clone())).collect()
    }

    #[test]
    fn single_key_returns_value_row() {
        let tape = Tape::new();
        let f = Tensor::from_rows(&[vec![0.3, -1.2]]).unwrap();
        let c = Tensor::from_rows(&[vec![2.0, 0.5]]).unwrap();
        let wq = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap();
        let wk = Tensor::from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.4]]).unwrap();
        let wv = Tensor::from_rows(&[vec![1.5, -0.5], vec![0.25, 2.0]]).unwrap();
        let v = consts(&tape, &[f, c.clone(), wq, wk, wv.clone()]);
        let out = cross_attention(&tape, v[0], v[1], v[2], v[3], v[4], 2).unwrap();
        assert_eq!(tape.value(out), c.matmul(&wv).unwrap());
    }

    #[test]
    fn identical_keys_average_values() {
        let tape = Tape::new();
        let f = Tensor::from_rows(&[vec![1.0, -0.7]]).unwrap();
        // the key projection ignores the second coordinate, so both context
        // rows share one key while their values differ
        let c = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 3.0]]).unwrap();
        let wq = Tensor::eye(2);
        let wk = Tensor::from_rows(&[vec![0.4, 0.9], vec![0.0, 0.0]]).unwrap();
        let wv = Tensor::eye(2);
        let v = consts(&tape, &[f, c, wq, wk, wv]);
        let out = cross_attention(&tape, v[0], v[1], v[2], v[3], v[4], 2).unwrap();
        let o = tape.value(out);
        assert!((o.data()[0] - 1.0).abs() < 1e-15);
        assert!((o.data()[1] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn mismatched_projection_is_a_dimension_error() {
        let tape = Tape::new();
        let v = consts(
            &tape,
            &[
                Tensor::zeros(&[1, 3]),
                Tensor::zeros(&[2, 2]),
                Tensor::zeros(&[2, 2]),
                Tensor::zeros(&[2, 2]),
                Tensor::zeros(&[2, 2]),
            ],
        );
        let err = cross_attention(&tape, v[0], v[1], v[2], v[3], v[4], 2).unwrap_err();
        assert!(matches!(err, TensorError::Shape { .. }));
    }
}
