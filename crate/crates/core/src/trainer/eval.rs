use std::collections::BTreeMap;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{AdaptiveNet, BnMode, ExecPlan, ForwardCtx};

/// Top-1 accuracy in percent of an eval-mode forward under `plan`.
pub fn evaluate(
    net: &AdaptiveNet,
    plan: &ExecPlan,
    data: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let order = data.sequential_order();
    let mut correct = 0usize;
    for (x, y) in data.batches(&order, batch_size) {
        let logits = net.predict(&x, plan)?;
        correct += logits
            .argmax_rows()
            .iter()
            .zip(&y)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / data.len() as f64 * 100.0)
}

/// Accuracy at each bit-width. With `parallel`, bit-widths are evaluated on
/// separate threads; the results do not depend on it.
pub fn evaluate_bits(
    net: &AdaptiveNet,
    bits: &[u8],
    data: &Dataset,
    batch_size: usize,
    parallel: bool,
) -> Result<BTreeMap<u8, f64>> {
    if !parallel {
        return bits
            .iter()
            .map(|&b| Ok((b, evaluate(net, &ExecPlan::student(b), data, batch_size)?)))
            .collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = bits
            .iter()
            .map(|&b| {
                s.spawn(move || {
                    evaluate(net, &ExecPlan::student(b), data, batch_size).map(|a| (b, a))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    })
}

/// Recomputes the batch-norm statistics used at bit-width `b` from `data`,
/// without any gradient step.
///
/// A bit-width with no bank entry gets one whose affine parameters and clip
/// values are copied from the nearest trained bit-width (the higher one on
/// ties). Running mean and variance are then set to the exact population
/// statistics over all of `data`, collected batch by batch.
pub fn calibrate_bn(net: &mut AdaptiveNet, b: u8, data: &Dataset, batch_size: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Contract("calibration set is empty".into()));
    }
    let source = net.bits().nearest(b);
    let bn_key = match net.banks().bn_key(b) {
        Ok(k) => k,
        Err(_) => {
            let entry = net
                .banks()
                .bn_entry(net.banks().bn_key(source)?)
                .expect("resolved key")
                .to_vec();
            net.banks_mut().insert_bn(b, entry);
            b
        }
    };
    if net.banks().alpha_key(b).is_err() {
        let entry = net
            .banks()
            .alpha_entry(net.banks().alpha_key(source)?)
            .expect("resolved key")
            .to_vec();
        net.banks_mut().insert_alpha(b, entry);
    }
    let layers = net.arch().bn_count();
    let mut count = vec![0usize; layers];
    let mut sum: Vec<Vec<f64>> = net
        .arch()
        .bn_channels()
        .iter()
        .map(|&c| vec![0.0; c])
        .collect();
    let mut sum_sq = sum.clone();
    let order = data.sequential_order();
    for (x, _) in data.batches(&order, batch_size) {
        let mut ctx = ForwardCtx::new(false);
        let xv = ctx.tape.constant(x)?;
        net.forward(&mut ctx, xv, &ExecPlan::student(b), BnMode::Collect)?;
        for obs in &ctx.observations {
            let n = obs.stats.count as f64;
            count[obs.bn] += obs.stats.count;
            for c in 0..obs.stats.mean.len() {
                let m = obs.stats.mean[c];
                sum[obs.bn][c] += n * m;
                sum_sq[obs.bn][c] += n * (obs.stats.var[c] + m * m);
            }
        }
    }
    let entry = net.banks_mut().bn_entry_mut(bn_key).expect("entry exists");
    for (i, st) in entry.iter_mut().enumerate() {
        let n = count[i] as f64;
        let bessel = if count[i] > 1 { n / (n - 1.0) } else { 1.0 };
        for c in 0..st.channels() {
            let mean = sum[i][c] / n;
            let var = (sum_sq[i][c] / n - mean * mean).max(0.0);
            st.running_mean[c] = mean;
            st.running_var[c] = var * bessel;
        }
    }
    Ok(())
}
