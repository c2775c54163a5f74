use super::{ClientUpdate, FedError};
use crate::vfda::{column_variance, PrototypeVariance};

/// Sample-count weighted mean of client parameters.
///
/// Updates are reduced in ascending `client_id` order, so the result does not
/// depend on the order in which clients finished.
pub fn aggregate_weights(updates: &[ClientUpdate]) -> Result<Vec<f64>, FedError> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let first = sorted.first().ok_or(FedError::NoUpdates)?;
    let p = first.params.len();
    if let Some(bad) = sorted.iter().find(|u| u.params.len() != p) {
        return Err(FedError::ParamLength {
            expected: p,
            actual: bad.params.len(),
        });
    }
    if sorted.iter().any(|u| u.sample_count == 0) {
        return Err(FedError::Invalid("sample_count must be at least 1".into()));
    }
    if sorted.len() == 1 {
        return Ok(first.params.clone());
    }
    let total: f64 = sorted.iter().map(|u| f64::from(u.sample_count)).sum();
    let mut out = vec![0.0; p];
    for u in &sorted {
        let w = f64::from(u.sample_count) / total;
        for (o, v) in out.iter_mut().zip(&u.params) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Per-channel population variance over institutes of each layer's
/// accumulated statistics. Rows of `mu_bar`/`sigma_bar` are institutes.
pub fn global_stat_variance(mu_bar: &[Vec<f64>], sigma_bar: &[Vec<f64>]) -> Result<PrototypeVariance, FedError> {
    let n = mu_bar.len();
    if n == 0 || sigma_bar.len() != n {
        return Err(FedError::Invalid(format!(
            "need matching non-empty institute sets, got {n} and {}",
            sigma_bar.len()
        )));
    }
    let c = mu_bar[0].len();
    for row in mu_bar.iter().chain(sigma_bar) {
        if row.len() != c {
            return Err(FedError::ChannelMismatch {
                expected: c,
                actual: row.len(),
            });
        }
    }
    Ok(PrototypeVariance {
        var_mu: column_variance(&mu_bar.concat(), n, c),
        var_sigma: column_variance(&sigma_bar.concat(), n, c),
    })
}

/// Global variances for every layer from a set of updates (sorted by id).
pub fn layer_variances(updates: &[ClientUpdate]) -> Result<Vec<PrototypeVariance>, FedError> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let layers = sorted.first().ok_or(FedError::NoUpdates)?.stats.len();
    if sorted.iter().any(|u| u.stats.len() != layers) {
        return Err(FedError::Invalid("clients report different layer counts".into()));
    }
    (0..layers)
        .map(|l| {
            let mu: Vec<Vec<f64>> = sorted.iter().map(|u| u.stats[l].mu_bar.clone()).collect();
            let sigma: Vec<Vec<f64>> = sorted.iter().map(|u| u.stats[l].sigma_bar.clone()).collect();
            global_stat_variance(&mu, &sigma)
        })
        .collect()
}
