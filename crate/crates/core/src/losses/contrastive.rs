use std::collections::BTreeMap;

use super::{log_sum_exp, LossConfig, Unit};
use crate::error::{Error, Result};
use crate::graph::{GradAccumulator, RowSource};

/// Loss value with gradients for the local-view and global-view rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewGrads {
    pub loss: f64,
    pub local: GradAccumulator,
    pub global: GradAccumulator,
}

fn units<S: RowSource + ?Sized>(source: &S, ids: &[usize], kind: &'static str) -> Result<Vec<Unit>> {
    ids.iter()
        .map(|&id| {
            Unit::new(source.row(id).ok_or(Error::MissingRow { kind, id })?)
        })
        .collect()
}

/// InfoNCE over a batch: the global view of the same item is the positive,
/// global views of the other batch items are the negatives.
pub fn infonce_cl_loss_grad<L, G>(
    local_views: &L,
    global_views: &G,
    batch_items: &[usize],
    config: &LossConfig,
) -> Result<ViewGrads>
where
    L: RowSource + ?Sized,
    G: RowSource + ?Sized,
{
    if batch_items.len() < 2 {
        return Err(Error::InvalidArgument(
            "contrastive batch needs at least two items".into(),
        ));
    }
    let dim = local_views.dim();
    let tau = config.tau;
    let loc = units(local_views, batch_items, "local view")?;
    let glob = units(global_views, batch_items, "global view")?;
    let b = batch_items.len();

    let mut loss = 0.0;
    let mut g_loc = vec![vec![0.0; dim]; b];
    let mut g_glob = vec![vec![0.0; dim]; b];
    let mut cos = vec![0.0; b];
    let mut logits = vec![0.0; b];
    for i in 0..b {
        for j in 0..b {
            cos[j] = loc[i].cos(&glob[j]);
            logits[j] = cos[j] / tau;
        }
        let lse = log_sum_exp(&logits);
        loss += lse - logits[i];
        for j in 0..b {
            let p = (logits[j] - lse).exp();
            let coef = (p - if i == j { 1.0 } else { 0.0 }) / tau;
            loc[i].add_cos_grad(&glob[j], cos[j], coef, &mut g_loc[i]);
            glob[j].add_cos_grad(&loc[i], cos[j], coef, &mut g_glob[j]);
        }
    }

    let mut local = GradAccumulator::new(dim);
    let mut global = GradAccumulator::new(dim);
    for (k, &item) in batch_items.iter().enumerate() {
        local.add(item, &g_loc[k], 1.0);
        global.add(item, &g_glob[k], 1.0);
    }
    Ok(ViewGrads {
        loss,
        local,
        global,
    })
}

/// Contrastive unlearning objective.
///
/// For an item with forgotten views the term is
/// `−log e^{s⁺/τ} / (e^{s⁺/τ} + Σ_f e^{s_f/τ})` where `s⁺ = cos(local, global)`
/// and `s_f = cos(local, forgotten)`. Items without forgotten views
/// contribute the alignment term `−s⁺/τ` only. Forgotten views are constants.
pub fn contrastive_unlearn_loss_grad<L, G>(
    local_views: &L,
    global_views: &G,
    forgotten_views: &BTreeMap<usize, Vec<Vec<f64>>>,
    batch_items: &[usize],
    config: &LossConfig,
) -> Result<ViewGrads>
where
    L: RowSource + ?Sized,
    G: RowSource + ?Sized,
{
    if batch_items.is_empty() {
        return Err(Error::InvalidArgument("empty unlearning batch".into()));
    }
    let dim = local_views.dim();
    let tau = config.tau;
    let mut loss = 0.0;
    let mut local = GradAccumulator::new(dim);
    let mut global = GradAccumulator::new(dim);
    let mut gl = vec![0.0; dim];
    let mut gg = vec![0.0; dim];

    for &item in batch_items {
        let l = Unit::new(
            local_views
                .row(item)
                .ok_or(Error::MissingRow { kind: "local view", id: item })?,
        )?;
        let g = Unit::new(
            global_views
                .row(item)
                .ok_or(Error::MissingRow { kind: "global view", id: item })?,
        )?;
        let s_pos = l.cos(&g);
        gl.iter_mut().for_each(|v| *v = 0.0);
        gg.iter_mut().for_each(|v| *v = 0.0);

        let forgotten = forgotten_views.get(&item).map(Vec::as_slice).unwrap_or(&[]);
        if forgotten.is_empty() {
            loss -= s_pos / tau;
            l.add_cos_grad(&g, s_pos, -1.0 / tau, &mut gl);
            g.add_cos_grad(&l, s_pos, -1.0 / tau, &mut gg);
        } else {
            let fs = forgotten
                .iter()
                .map(|v| Unit::new(v))
                .collect::<Result<Vec<_>>>()?;
            let mut logits = Vec::with_capacity(fs.len() + 1);
            logits.push(s_pos / tau);
            let cos_f: Vec<f64> = fs.iter().map(|f| l.cos(f)).collect();
            logits.extend(cos_f.iter().map(|c| c / tau));
            let lse = log_sum_exp(&logits);
            loss += lse - logits[0];
            let p_pos = (logits[0] - lse).exp();
            let coef = (p_pos - 1.0) / tau;
            l.add_cos_grad(&g, s_pos, coef, &mut gl);
            g.add_cos_grad(&l, s_pos, coef, &mut gg);
            for (k, f) in fs.iter().enumerate() {
                let p = (logits[k + 1] - lse).exp();
                l.add_cos_grad(f, cos_f[k], p / tau, &mut gl);
            }
        }
        local.add(item, &gl, 1.0);
        global.add(item, &gg, 1.0);
    }
    Ok(ViewGrads {
        loss,
        local,
        global,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::finite_diff_check;
    use crate::seed::rng_from_seed;
    use rand::Rng;

    fn cfg(tau: f64) -> LossConfig {
        LossConfig {
            tau,
            ..LossConfig::default()
        }
    }

    fn map(rows: Vec<(usize, Vec<f64>)>) -> BTreeMap<usize, Vec<f64>> {
        rows.into_iter().collect()
    }

    #[test]
    fn identical_views_give_uniform_softmax() {
        let v = vec![0.4, -0.2, 1.0];
        let views = map(vec![(0, v.clone()), (1, v)]);
        let out = infonce_cl_loss_grad(&views, &views, &[0, 1], &cfg(0.5)).unwrap();
        assert!((out.loss - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn low_temperature_saturates() {
        let local = map(vec![(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])]);
        let out = infonce_cl_loss_grad(&local, &local, &[0, 1], &cfg(1e-3)).unwrap();
        assert!(out.loss < 1e-100);
        assert!(out.loss >= 0.0);
    }

    #[test]
    fn singleton_batch_is_rejected() {
        let local = map(vec![(0, vec![1.0, 0.0])]);
        assert!(infonce_cl_loss_grad(&local, &local, &[0], &cfg(1.0)).is_err());
    }

    #[test]
    fn unlearning_term_with_one_forgotten_view() {
        let local = map(vec![(0, vec![1.0, 0.0])]);
        let global = map(vec![(0, vec![2.0, 0.0])]);
        let forgotten: BTreeMap<_, _> = [(0, vec![vec![-1.0, 0.0]])].into_iter().collect();
        let out = contrastive_unlearn_loss_grad(&local, &global, &forgotten, &[0], &cfg(1.0))
            .unwrap();
        assert!((out.loss - 0.126928).abs() < 1e-6);
        assert!((out.loss - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn alignment_only_branch() {
        let v = map(vec![(0, vec![0.3, 0.4])]);
        let none = BTreeMap::new();
        let out = contrastive_unlearn_loss_grad(&v, &v, &none, &[0], &cfg(1.0)).unwrap();
        assert!((out.loss + 1.0).abs() < 1e-15);
        assert!(contrastive_unlearn_loss_grad(&v, &v, &none, &[], &cfg(1.0)).is_err());
    }

    #[test]
    fn empty_forgotten_sets_reduce_to_negative_cosine_sum() {
        let mut rng = rng_from_seed(11);
        let mut r = || (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let local = map((0..4).map(|i| (i, r())).collect());
        let global = map((0..4).map(|i| (i, r())).collect());
        let out = contrastive_unlearn_loss_grad(
            &local,
            &global,
            &BTreeMap::new(),
            &[0, 1, 2, 3],
            &cfg(1.0),
        )
        .unwrap();
        let expect: f64 = (0..4)
            .map(|i| -crate::losses::score(&local[&i], &global[&i]).unwrap())
            .sum();
        assert!((out.loss - expect).abs() < 1e-14);
    }

    #[test]
    fn infonce_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(5);
        let params: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = |x: &[f64]| {
            let local = map((0..4).map(|i| (i, x[3 * i..3 * i + 3].to_vec())).collect());
            let global = map(
                (0..4)
                    .map(|i| (i, x[12 + 3 * i..12 + 3 * i + 3].to_vec()))
                    .collect(),
            );
            let out = infonce_cl_loss_grad(&local, &global, &[0, 1, 2, 3], &cfg(0.3))?;
            let mut g = Vec::new();
            for i in 0..4 {
                g.extend_from_slice(out.local.get(i).unwrap());
            }
            for i in 0..4 {
                g.extend_from_slice(out.global.get(i).unwrap());
            }
            Ok((out.loss, g))
        };
        let err = finite_diff_check(f, &params, 1e-6).unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn unlearning_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(9);
        let params: Vec<f64> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let forgotten: BTreeMap<usize, Vec<Vec<f64>>> = [(
            1,
            vec![
                (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ],
        )]
        .into_iter()
        .collect();
        let f = |x: &[f64]| {
            let local = map((0..3).map(|i| (i, x[3 * i..3 * i + 3].to_vec())).collect());
            let global = map(
                (0..3)
                    .map(|i| (i, x[9 + 3 * i..9 + 3 * i + 3].to_vec()))
                    .collect(),
            );
            let out = contrastive_unlearn_loss_grad(&local, &global, &forgotten, &[0, 1, 2], &cfg(0.5))?;
            let mut g = Vec::new();
            for i in 0..3 {
                g.extend_from_slice(out.local.get(i).unwrap());
            }
            for i in 0..3 {
                g.extend_from_slice(out.global.get(i).unwrap());
            }
            Ok((out.loss, g))
        };
        let err = finite_diff_check(f, &params, 1e-6).unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }
}
