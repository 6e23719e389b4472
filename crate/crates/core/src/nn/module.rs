use super::Matrix;

/// A bundle of tensors that can be optimized and persisted.
///
/// `params` lists the trainable tensors in a fixed order; gradient bundles
/// share the parameter type so the two orders always agree. `state` adds
/// non-trainable buffers (batch-norm running statistics) under stable names.
pub trait Module {
    fn params(&self) -> Vec<&Matrix>;
    fn params_mut(&mut self) -> Vec<&mut Matrix>;
    fn state(&self, prefix: &str) -> Vec<(String, &Matrix)>;
    fn state_mut(&mut self, prefix: &str) -> Vec<(String, &mut Matrix)>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|m| m.rows() * m.cols()).sum()
    }

    /// A copy with every tensor zeroed, used as a gradient accumulator.
    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        for m in z.params_mut() {
            m.fill(0.0);
        }
        for (_, m) in z.state_mut("") {
            m.fill(0.0);
        }
        z
    }

    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            a.add_assign(b);
        }
    }

    fn scale_params(&mut self, s: f64) {
        for m in self.params_mut() {
            m.scale(s);
        }
    }

    /// Flattened trainable values, in `params` order.
    fn flat_params(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|m| m.data().iter().copied())
            .collect()
    }
}

pub fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Implements [`Module`] for a struct by delegating to the listed fields.
#[macro_export]
macro_rules! compose_module {
    ($ty:ty { $($field:ident),+ $(,)? }) => {
        impl $crate::nn::Module for $ty {
            fn params(&self) -> Vec<&$crate::nn::Matrix> {
                let mut v = Vec::new();
                $(v.extend(self.$field.params());)+
                v
            }
            fn params_mut(&mut self) -> Vec<&mut $crate::nn::Matrix> {
                let mut v = Vec::new();
                $(v.extend(self.$field.params_mut());)+
                v
            }
            fn state(&self, prefix: &str) -> Vec<(String, &$crate::nn::Matrix)> {
                let mut v = Vec::new();
                $(v.extend(self.$field.state(&$crate::nn::join_name(prefix, stringify!($field))));)+
                v
            }
            fn state_mut(&mut self, prefix: &str) -> Vec<(String, &mut $crate::nn::Matrix)> {
                let mut v = Vec::new();
                $(v.extend(self.$field.state_mut(&$crate::nn::join_name(prefix, stringify!($field))));)+
                v
            }
        }
    };
}
