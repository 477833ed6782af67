use super::tensor::Tensor;

/// A collection of named trainable tensors with a stable order.
pub trait ParamSet {
    fn named_params(&self) -> Vec<(String, &Tensor)>;

    /// Same names and order as [`ParamSet::named_params`].
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}
