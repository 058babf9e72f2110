use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::nn::ParamStore;

/// Per-parameter arithmetic mean, summed in input order then divided by
/// the count. All stores must hold the same names and shapes.
pub fn average_stores(stores: &[&ParamStore]) -> Result<ParamStore> {
    let first = *stores
        .first()
        .ok_or_else(|| Error::Config("nothing to average".into()))?;
    let mut problems = Vec::new();
    for (i, s) in stores.iter().enumerate().skip(1) {
        for (name, t) in first.iter() {
            match s.get(name) {
                None => problems.push(format!("#{i} lacks `{name}`")),
                Some(o) if o.shape() != t.shape() => {
                    problems.push(format!("#{i} `{name}` has shape {:?}, expected {:?}", o.shape(), t.shape()))
                }
                _ => {}
            }
        }
        for name in s.names().filter(|n| !first.contains(n)) {
            problems.push(format!("#{i} has extra `{name}`"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Checkpoint(format!("cannot average: {}", problems.join("; "))));
    }
    let k = stores.len() as f64;
    let mut out = ParamStore::new();
    for (name, t) in first.iter() {
        let mut acc = t.clone();
        for s in &stores[1..] {
            let o = s.get(name).expect("checked above");
            acc.data_mut().iter_mut().zip(o.data()).for_each(|(a, b)| *a += b);
        }
        if stores.len() > 1 {
            acc.data_mut().iter_mut().for_each(|a| *a /= k);
        }
        out.insert(name.clone(), acc);
    }
    Ok(out)
}

/// Averages checkpoints of one configuration; metadata comes from the last.
pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    let last = ckpts
        .last()
        .ok_or_else(|| Error::Config("nothing to average".into()))?;
    if let Some(i) = ckpts.iter().position(|c| c.config_digest != last.config_digest) {
        return Err(Error::Checkpoint(format!(
            "cannot average: checkpoint #{i} was saved with a different model configuration"
        )));
    }
    let stores: Vec<&ParamStore> = ckpts.iter().map(|c| &c.params).collect();
    let mut out = last.clone();
    out.params = average_stores(&stores)?;
    Ok(out.with_meta("averaged", ckpts.len().to_string()))
}
