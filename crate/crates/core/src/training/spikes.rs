/// Number of steps whose loss exceeds the mean plus `k` standard deviations
/// (population) of the `window` losses immediately before it. Steps without a
/// full trailing window are not tested.
pub fn spike_count(losses: &[f64], window: usize, k: f64) -> usize {
    spike_steps(losses, window, k).len()
}

/// Indices counted by [`spike_count`].
pub fn spike_steps(losses: &[f64], window: usize, k: f64) -> Vec<usize> {
    let window = window.max(2);
    (window..losses.len())
        .filter(|&i| {
            let prev = &losses[i - window..i];
            let n = window as f64;
            let mean = prev.iter().sum::<f64>() / n;
            let var = prev.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            losses[i] > mean + k * var.sqrt()
        })
        .collect()
}
