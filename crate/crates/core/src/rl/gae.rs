/// Generalised advantage estimates for one trajectory segment.
///
/// `dones[t]` marks that the episode ended at step `t`, so `values[t + 1]`
/// (or `bootstrap` at the end) is not used past it.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(
        values.len() == n && dones.len() == n,
        "gae inputs must align"
    );
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { bootstrap };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next * live - values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Rescales to zero mean and unit (population) standard deviation.
pub fn normalize(xs: &mut [f64]) {
    let n = xs.len();
    if n == 0 {
        return;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt().max(1e-8);
    for x in xs.iter_mut() {
        *x = (*x - mean) / std;
    }
}
