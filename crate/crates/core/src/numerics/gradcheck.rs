use super::{Gradients, NumericsError, Tape, Tensor, Var};

/// Result of evaluating an expression on a fresh tape.
#[derive(Debug, Clone)]
pub struct Recorded {
    pub value: Tensor,
    pub tape: Tape,
    pub inputs: Vec<Var>,
    pub output: Var,
}

/// Evaluates `expr` with every input registered as a trainable leaf.
pub fn forward<F, E>(expr: F, inputs: &[Tensor]) -> Result<Recorded, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let output = expr(&mut tape, &vars)?;
    Ok(Recorded {
        value: tape.value(output).clone(),
        tape,
        inputs: vars,
        output,
    })
}

/// Gradients of a recorded expression with respect to each of its inputs.
pub fn backward(recorded: &Recorded, seed: &Tensor) -> Result<Vec<Tensor>, NumericsError> {
    let grads: Gradients = recorded.tape.backward(recorded.output, seed)?;
    Ok(recorded.inputs.iter().map(|&v| grads.wrt(&recorded.tape, v)).collect())
}

/// Central-difference gradient `(f(x+ε) − f(x−ε)) / 2ε` of a scalar expression,
/// one coordinate at a time.
pub fn finite_diff<F, E>(expr: F, inputs: &[Tensor], epsilon: f64) -> Result<Vec<Tensor>, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<NumericsError>,
{
    if !(epsilon > 0.0) {
        return Err(NumericsError::BadEpsilon(epsilon).into());
    }
    let eval = |xs: &[Tensor]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = expr(&mut tape, &vars)?;
        let value = tape.value(out);
        if value.len() != 1 {
            return Err(NumericsError::NonScalarOutput(value.shape().to_vec()).into());
        }
        Ok(value.item())
    };
    eval(inputs)?;

    let mut result = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let base = inputs[i].clone();
        let mut grad = Vec::with_capacity(base.len());
        for j in 0..base.len() {
            let x = base.data()[j];
            work[i] = base.with_value(j, x + epsilon);
            let up = eval(&work)?;
            work[i] = base.with_value(j, x - epsilon);
            let down = eval(&work)?;
            grad.push((up - down) / (2.0 * epsilon));
        }
        work[i] = base.clone();
        result.push(Tensor::from_parts(base.shape().to_vec(), grad));
    }
    Ok(result)
}

/// `|a − b| / max(|a|, |b|, 1e-3)`; the floor keeps near-zero entries from
/// turning rounding noise into large ratios.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Largest [`relative_error`] over all coordinates of paired tensor lists.
pub fn max_relative_error(a: &[Tensor], b: &[Tensor]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lists differ in length");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.shape(), y.shape(), "gradient shapes differ");
            x.data().iter().zip(y.data()).map(|(&p, &q)| relative_error(p, q))
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::vector(vec![3.0]).unwrap();
        let g = finite_diff::<_, NumericsError>(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!((g[0].item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn relu_at_kink_is_a_subgradient() {
        let x = Tensor::vector(vec![0.0]).unwrap();
        let g = finite_diff::<_, NumericsError>(
            |t, v| {
                let r = t.relu(v[0])?;
                t.sum(r)
            },
            &[x],
            1e-6,
        )
        .unwrap();
        let d = g[0].item();
        assert!((0.0..=1.0).contains(&d), "{d}");
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        let x = Tensor::vector(vec![1.0]).unwrap();
        let err = finite_diff::<_, NumericsError>(|t, v| t.sum(v[0]), &[x], 0.0).unwrap_err();
        assert_eq!(err, NumericsError::BadEpsilon(0.0));
    }

    #[test]
    fn rejects_vector_output() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let err = finite_diff::<_, NumericsError>(|t, v| t.relu(v[0]), &[x], 1e-6).unwrap_err();
        assert!(matches!(err, NumericsError::NonScalarOutput(_)));
    }

    #[test]
    fn forward_backward_roundtrip() {
        let x = Tensor::vector(vec![-1.0, 2.0]).unwrap();
        let rec = forward::<_, NumericsError>(|t, v| t.relu(v[0]), &[x]).unwrap();
        assert_eq!(rec.value.data(), &[0.0, 2.0]);
        let g = backward(&rec, &Tensor::vector(vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(g[0].data(), &[0.0, 1.0]);
    }
}
