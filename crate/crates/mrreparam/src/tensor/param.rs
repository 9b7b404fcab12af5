//! Trainable parameters, their registry, and the Adam update.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// One named trainable tensor with its gradient slot and Adam state.
#[derive(Debug, Clone)]
pub struct Parameter<E: Element = f32> {
    pub name: String,
    pub value: Tensor<E>,
    pub grad: Tensor<E>,
    pub adam_m: Tensor<E>,
    pub adam_v: Tensor<E>,
    /// Bias-correction step count for this parameter alone; survives
    /// checkpointing so resumed training continues the same schedule.
    pub steps: u64,
    /// Frozen parameters receive no gradient and never move.
    pub trainable: bool,
}

impl<E: Element> Parameter<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            name: name.into(),
            value,
            grad: Tensor::zeros(&shape),
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
            steps: 0,
            trainable: true,
        }
    }
}

/// Ordered registry of parameters; ordering is insertion order so checkpoint
/// layout and update order are reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<E: Element = f32> {
    params: Vec<Parameter<E>>,
    index: BTreeMap<String, usize>,
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, param: Parameter<E>) -> Result<usize> {
        if self.index.contains_key(&param.name) {
            return Err(Error::input(
                "param_set",
                format!("duplicate parameter name {:?}", param.name),
            ));
        }
        let id = self.params.len();
        self.index.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Parameter<E> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Parameter<E> {
        &mut self.params[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<E>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<E>> {
        self.index.get(name).copied().map(move |i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<E>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<E>> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = E::zero();
            }
        }
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Non-trainable named buffers (running statistics). Same ordering contract
/// as [`ParamSet`].
#[derive(Debug, Clone, Default)]
pub struct BufferSet<E: Element = f32> {
    buffers: Vec<(String, Tensor<E>)>,
    index: BTreeMap<String, usize>,
}

impl<E: Element> BufferSet<E> {
    pub fn new() -> Self {
        BufferSet {
            buffers: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<E>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::input(
                "buffer_set",
                format!("duplicate buffer name {name:?}"),
            ));
        }
        let id = self.buffers.len();
        self.index.insert(name.clone(), id);
        self.buffers.push((name, value));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }

    pub fn get(&self, id: usize) -> &Tensor<E> {
        &self.buffers[id].1
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<E> {
        &mut self.buffers[id].1
    }

    pub fn pair_mut(&mut self, mean_id: usize, var_id: usize) -> (&mut Tensor<E>, &mut Tensor<E>) {
        assert_ne!(mean_id, var_id);
        if mean_id < var_id {
            let (a, b) = self.buffers.split_at_mut(var_id);
            (&mut a[mean_id].1, &mut b[0].1)
        } else {
            let (a, b) = self.buffers.split_at_mut(mean_id);
            (&mut b[0].1, &mut a[var_id].1)
        }
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<E>> {
        self.index.get(name).map(|&i| &self.buffers[i].1)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.index.get(name).copied().map(move |i| &mut self.buffers[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update with bias correction over every trainable parameter.
/// Frozen parameters are untouched, including their moment buffers.
pub fn adam_step<E: Element>(params: &mut ParamSet<E>, hp: AdamParams) {
    for p in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        p.steps += 1;
        let t = p.steps as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        let (b1, b2) = (E::from_f64(hp.beta1), E::from_f64(hp.beta2));
        let one_m_b1 = E::from_f64(1.0 - hp.beta1);
        let one_m_b2 = E::from_f64(1.0 - hp.beta2);
        for i in 0..p.value.numel() {
            let g = p.grad.data()[i];
            let m = b1 * p.adam_m.data()[i] + one_m_b1 * g;
            let v = b2 * p.adam_v.data()[i] + one_m_b2 * g * g;
            p.adam_m.data_mut()[i] = m;
            p.adam_v.data_mut()[i] = v;
            let m_hat = m.as_f64() / bc1;
            let v_hat = v.as_f64() / bc2;
            let upd = hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
            p.value.data_mut()[i] -= E::from_f64(upd);
        }
    }
}

/// Xavier (Glorot) uniform init over `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
/// For a rank-4 weight `[A, B, kh, kw]` both fans are the channel count times
/// the kernel area, which is symmetric in A and B, so the same rule serves
/// conv `[F,C,k,k]` and tconv `[C,F,3,3]` layouts.
pub fn xavier_init<E: Element>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<E> {
    let (fan_in, fan_out) = match shape {
        [a, b, kh, kw] => (b * kh * kw, a * kh * kw),
        [a, b] => (*b, *a),
        _ => {
            let n: usize = shape.iter().product();
            (n, n)
        }
    };
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = E::from_f64(rng.gen_range(-a..a));
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_scalar_first_step_moves_by_lr() {
        // With bias correction, |step 1| == lr regardless of gradient scale
        // (up to eps). Hand trace: m_hat = g, v_hat = g^2, upd = lr*g/|g|.
        let mut ps = ParamSet::<f64>::new();
        let mut p = Parameter::new("w", Tensor::scalar(1.0f64));
        p.grad = Tensor::scalar(40.0f64);
        ps.insert(p).unwrap();
        let hp = AdamParams {
            lr: 0.01,
            ..AdamParams::default()
        };
        adam_step(&mut ps, hp);
        let w = ps.get(0).value.data()[0];
        assert!((w - 0.99).abs() < 1e-6, "w = {w}");

        // Hand-computed second step with the same gradient:
        // m2 = 0.9*4 + 0.1*40 = 7.6, v2 = 0.999*1.6 + 0.001*1600 = 3.1984
        // m_hat = 7.6/0.19 = 40, v_hat = 3.1984/0.001999 = 1600,
        // upd = lr*40/(sqrt(1600)+eps) = lr again: constant-gradient Adam
        // keeps stepping by lr.
        ps.get_mut(0).grad = Tensor::scalar(40.0f64);
        adam_step(&mut ps, hp);
        let w2 = ps.get(0).value.data()[0];
        assert!((w2 - 0.98).abs() < 1e-9, "w2 = {w2}");
    }

    #[test]
    fn adam_matches_scalar_reference_trace() {
        // Independent scalar recurrence for g = 1, 1 at lr = 0.1.
        let (lr, b1, b2, eps) = (0.1f64, 0.9, 0.999, 1e-8);
        let (mut m, mut v, mut w_ref) = (0.0f64, 0.0f64, 0.0f64);
        let mut trace = Vec::new();
        for t in 1..=2 {
            let g = 1.0;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w_ref -= lr * mh / (vh.sqrt() + eps);
            trace.push(w_ref);
        }

        let mut ps = ParamSet::<f64>::new();
        ps.insert(Parameter::new("w", Tensor::scalar(0.0f64))).unwrap();
        let hp = AdamParams {
            lr,
            ..AdamParams::default()
        };
        for &expected in &trace {
            ps.get_mut(0).grad = Tensor::scalar(1.0f64);
            adam_step(&mut ps, hp);
            let w = ps.get(0).value.data()[0];
            assert!((w - expected).abs() < 1e-12, "{w} vs {expected}");
        }
        // Zero gradient with no momentum history leaves the value unchanged.
        let mut fresh = ParamSet::<f64>::new();
        fresh
            .insert(Parameter::new("w", Tensor::scalar(3.0f64)))
            .unwrap();
        adam_step(&mut fresh, hp);
        assert_eq!(fresh.get(0).value.data()[0], 3.0);
    }

    #[test]
    fn adam_skips_frozen() {
        let mut ps = ParamSet::<f32>::new();
        let mut p = Parameter::new("frozen", Tensor::scalar(2.0f32));
        p.grad = Tensor::scalar(10.0f32);
        p.trainable = false;
        ps.insert(p).unwrap();
        let before = ps.get(0).clone();
        adam_step(&mut ps, AdamParams::default());
        let after = ps.get(0);
        assert_eq!(before.value.data(), after.value.data());
        assert_eq!(before.adam_m.data(), after.adam_m.data());
        assert_eq!(before.steps, after.steps);
    }

    #[test]
    fn xavier_bound_and_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = [64usize, 32, 3, 3];
        let bound = (6.0f64 / ((32 * 9 + 64 * 9) as f64)).sqrt();
        let t: Tensor<f32> = xavier_init(&shape, &mut rng);
        assert_eq!(t.shape(), &shape);
        for &v in t.data() {
            assert!((v as f64) > -bound && (v as f64) < bound, "{v} out of [-{bound}, {bound}]");
        }
        let mean = t.mean_f64();
        assert!(mean.abs() < bound * 0.05, "mean {mean} far from 0");
        // Uniform variance a^2/3; loose factor-of-two band.
        let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / t.numel() as f64;
        let expect = bound * bound / 3.0;
        assert!(var > expect * 0.5 && var < expect * 2.0, "var {var} vs {expect}");
    }

    #[test]
    fn xavier_deterministic_per_seed() {
        let a: Tensor<f32> = xavier_init(&[4, 4, 3, 3], &mut ChaCha8Rng::seed_from_u64(9));
        let b: Tensor<f32> = xavier_init(&[4, 4, 3, 3], &mut ChaCha8Rng::seed_from_u64(9));
        let c: Tensor<f32> = xavier_init(&[4, 4, 3, 3], &mut ChaCha8Rng::seed_from_u64(10));
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn paramset_rejects_duplicates_keeps_order() {
        let mut ps = ParamSet::<f32>::new();
        ps.insert(Parameter::new("b", Tensor::scalar(0.0))).unwrap();
        ps.insert(Parameter::new("a", Tensor::scalar(0.0))).unwrap();
        assert!(ps.insert(Parameter::new("b", Tensor::scalar(1.0))).is_err());
        let names: Vec<&str> = ps.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["b", "a"]);
        assert!(ps.by_name("a").is_some());
        assert!(ps.by_name("z").is_none());
    }

    #[test]
    fn bufferset_pair_mut_both_orders() {
        let mut bs = BufferSet::<f32>::new();
        bs.insert("mean", Tensor::scalar(1.0)).unwrap();
        bs.insert("var", Tensor::scalar(2.0)).unwrap();
        let (m, v) = bs.pair_mut(0, 1);
        assert_eq!((m.data()[0], v.data()[0]), (1.0, 2.0));
        let (m, v) = bs.pair_mut(1, 0);
        assert_eq!((m.data()[0], v.data()[0]), (2.0, 1.0));
    }
}
