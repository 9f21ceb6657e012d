use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Adaptive-moment optimizer with bias correction.
///
/// Moments are created lazily, zero-filled, the first time a parameter
/// receives a gradient. A zero learning rate still advances the moments but
/// never writes to the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar = f32> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }

    /// One update over every `(name, gradient)` pair.
    pub fn update<'a>(
        &mut self,
        params: &mut ParamStore<T>,
        grads: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
    ) -> Result<()>
    where
        T: 'a,
    {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2_sqrt = (1.0 - self.beta2.powi(t)).sqrt();
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_m_b1, one_m_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let step_size = T::from_f64(self.learning_rate / bc1);
        let bc2_sqrt = T::from_f64(bc2_sqrt);
        let eps = T::from_f64(self.epsilon);

        for (name, g) in grads {
            let role = params.get(name)?.role;
            if params.tensor(name)?.dims() != g.dims() {
                return Err(Error::Shape(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.dims(),
                    params.tensor(name)?.dims()
                )));
            }
            if !self.m.contains(name) {
                self.m.insert(name, Tensor::zeros(g.dims()), role)?;
                self.v.insert(name, Tensor::zeros(g.dims()), role)?;
            }
            let m = self.m.tensor_mut(name)?;
            m.data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(m, &g)| *m = b1 * *m + one_m_b1 * g);
            let v = self.v.tensor_mut(name)?;
            v.data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(v, &g)| *v = b2 * *v + one_m_b2 * g * g);
            if self.learning_rate == 0.0 {
                continue;
            }
            let (m, v) = (self.m.tensor(name)?, self.v.tensor(name)?);
            let p = params.tensor_mut(name)?;
            for ((p, &m), &v) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *p = *p - step_size * m / (v.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}
