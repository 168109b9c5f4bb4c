use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter, in store order. Frozen
/// parameters keep all-zero moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, p)| Tensor::zeros(p.value.shape())).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }
}

/// One bias-corrected Adam update. `grads[i]` belongs to parameter `i`;
/// `None` means no gradient reached it (treated as zero). Any non-finite
/// gradient aborts before a single value is modified.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Option<Tensor<f32>>],
    state: &mut AdamState,
    lr: f64,
    hp: AdamParams,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((_, name, p), g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(Error::shape("adam_step", format!("{name}: gradient {} for {}", g.shape(), p.value.shape())));
            }
            if let Some(bad) = g.data().iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name} contains {bad}")));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let g = grads[i].as_ref();
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(0.0, |g| g.data()[j] as f64);
            let mj = hp.beta1 * m[j] as f64 + (1.0 - hp.beta1) * gj;
            let vj = hp.beta2 * v[j] as f64 + (1.0 - hp.beta2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + hp.eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamBuilder;

    fn store(values: &[f32]) -> ParamStore {
        let mut s = ParamStore::new();
        let mut b = ParamBuilder::new(&mut s, 0);
        let id = b.bias("x", values.len()).unwrap();
        s.get_mut(id).value.data_mut().copy_from_slice(values);
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = store(&[1.0, -2.0]);
        let mut st = AdamState::new(&p);
        let zero = Some(Tensor::zeros([2, 1, 1, 1]));
        adam_step(&mut p, std::slice::from_ref(&zero), &mut st, 0.1, AdamParams::default()).unwrap();
        assert_eq!(p.iter().next().unwrap().2.value.data(), &[1.0, -2.0]);
        assert_eq!(st.m[0].data(), &[0.0, 0.0]);
        // Existing moments decay geometrically.
        st.m[0].data_mut().copy_from_slice(&[0.5, -0.5]);
        st.v[0].data_mut().copy_from_slice(&[0.25, 0.25]);
        adam_step(&mut p, &[zero], &mut st, 0.1, AdamParams::default()).unwrap();
        assert_eq!(st.m[0].data(), &[0.45, -0.45]);
        assert_eq!(st.v[0].data(), &[(0.999f64 * 0.25) as f32; 2]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = store(&[0.0, 0.0, 0.0]);
        let mut st = AdamState::new(&p);
        let g = Tensor::from_vec([3, 1, 1, 1], vec![3.0, -0.01, 1e-3]).unwrap();
        adam_step(&mut p, &[Some(g)], &mut st, 1e-3, AdamParams::default()).unwrap();
        // m̂ = g and v̂ = g², so the step is lr·g/(|g| + eps).
        let got = p.iter().next().unwrap().2.value.data().to_vec();
        for (x, sign) in got.iter().zip([1.0f64, -1.0, 1.0]) {
            assert!((*x as f64 + 1e-3 * sign).abs() < 1e-8, "{got:?}");
        }
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut p = store(&[1.0]);
        let mut st = AdamState::new(&p);
        for _ in 0..500 {
            let x = p.iter().next().unwrap().2.value.data()[0];
            let g = Tensor::from_vec([1, 1, 1, 1], vec![2.0 * x]).unwrap();
            adam_step(&mut p, &[Some(g)], &mut st, 0.05, AdamParams::default()).unwrap();
        }
        assert!(p.iter().next().unwrap().2.value.data()[0].abs() < 1e-3);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = store(&[1.0, 2.0]);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let g = Tensor::from_vec([2, 1, 1, 1], vec![0.1, f32::NAN]).unwrap();
        let err = adam_step(&mut p, &[Some(g)], &mut st, 0.1, AdamParams::default()).unwrap_err();
        assert!(matches!(&err, Error::NonFinite(m) if m.contains("x")), "{err}");
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut p = store(&[1.0]);
        p.iter_mut().next().unwrap().1.trainable = false;
        let mut st = AdamState::new(&p);
        let g = Tensor::from_vec([1, 1, 1, 1], vec![1.0]).unwrap();
        adam_step(&mut p, &[Some(g)], &mut st, 0.1, AdamParams::default()).unwrap();
        assert_eq!(p.iter().next().unwrap().2.value.data(), &[1.0]);
    }
}
