//! Client-side local optimization under the configured objective.

use super::{ClientState, MethodConfig, RoundPlan, SimError};
use crate::model::{
    backward_from_representation, forward, loss_and_grad, LossKind, ModelSpec, ParamVector, Targets,
};
use crate::objectives::{
    coral_penalty_and_grad, fedsr_penalty_and_grad, fish_meta_step, group_by_domain,
    irm_penalty_and_grad, mixup_with_coefficient, mmd_penalty_and_grad, prox_grad, prox_term,
    DomainBatch,
};
use crate::util::derive_seed;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use std::collections::BTreeMap;

/// Broadcast context for one client's local update.
pub struct LocalContext<'a> {
    pub model: &'a ModelSpec,
    pub method: &'a MethodConfig,
    pub loss: LossKind,
    pub plan: &'a RoundPlan,
    pub round: usize,
    pub global: &'a ParamVector,
    pub scaffold_server_variate: Option<&'a ParamVector>,
    pub afl_beta: Option<&'a [f64]>,
}

/// What the aggregator needs from one client after its local epochs.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub client_id: usize,
    /// Aggregation weight `n_c`.
    pub weight: f64,
    /// Final local parameters.
    pub params: ParamVector,
    /// `params - global`.
    pub update: ParamVector,
    /// Sample-weighted mean objective value over all local steps.
    pub mean_loss: f64,
    /// Scaffold control-variate change, when applicable.
    pub variate_delta: Option<ParamVector>,
    pub steps: usize,
}

struct Accumulator {
    loss_weighted: f64,
    samples: f64,
    steps: usize,
}

impl Accumulator {
    fn record(&mut self, loss: f64, batch_len: usize) {
        self.loss_weighted += loss * batch_len as f64;
        self.samples += batch_len as f64;
        self.steps += 1;
    }
}

fn gather(
    data: &crate::dataspace::DomainDataset,
    rows: &[usize],
) -> (Array2<f64>, Vec<usize>, Vec<usize>) {
    let mut features = Array2::zeros((rows.len(), data.dim()));
    let mut labels = Vec::with_capacity(rows.len());
    let mut domains = Vec::with_capacity(rows.len());
    for (r, &i) in rows.iter().enumerate() {
        features.row_mut(r).assign(&data.features().row(i));
        labels.push(data.labels()[i]);
        domains.push(data.domains()[i]);
    }
    (features, labels, domains)
}

/// Initializes the client at the broadcast parameters and runs the
/// configured number of local epochs of mini-batch steps under the
/// method's objective.
pub fn local_update(
    client: &mut ClientState,
    ctx: &LocalContext,
) -> Result<LocalOutcome, SimError> {
    ctx.plan.validate()?;
    client.params = ctx.global.clone();
    client.optimizer.reset();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        ctx.plan.seed,
        &[ctx.round as u64, client.id as u64],
    ));
    let mut acc = Accumulator {
        loss_weighted: 0.0,
        samples: 0.0,
        steps: 0,
    };

    let n = client.sample_count();
    for _ in 0..ctx.plan.epochs {
        if let MethodConfig::Fish { meta_lr } = ctx.method {
            fish_epoch(client, ctx, *meta_lr, &mut rng, &mut acc)?;
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(ctx.plan.batch_size) {
            let (features, labels, domains) = gather(&client.data, chunk);
            let (loss, grad) = objective_step(client, ctx, &features, &labels, &domains, &mut rng)?;
            if !loss.is_finite() {
                return Err(SimError::NonFiniteLoss {
                    round: ctx.round,
                    client: client.id,
                });
            }
            let mut grad = grad;
            apply_common_corrections(client, ctx, &mut grad)?;
            client.optimizer.step(&mut client.params, &grad)?;
            acc.record(loss, chunk.len());
        }
    }

    let update = client.params.sub(ctx.global)?;
    let variate_delta = update_scaffold_variate(client, ctx, acc.steps)?;
    Ok(LocalOutcome {
        client_id: client.id,
        weight: n as f64,
        params: client.params.clone(),
        update,
        mean_loss: acc.loss_weighted / acc.samples.max(1.0),
        variate_delta,
        steps: acc.steps,
    })
}

/// Objective value and parameter gradient for one mini-batch.
fn objective_step(
    client: &mut ClientState,
    ctx: &LocalContext,
    features: &Array2<f64>,
    labels: &[usize],
    domains: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, ParamVector), SimError> {
    let spec = ctx.model;
    let params = &client.params;
    let erm = || {
        loss_and_grad(
            spec,
            params,
            features.view(),
            Targets::Hard(labels),
            ctx.loss,
        )
    };

    let distinct = {
        let mut d = domains.to_vec();
        d.sort_unstable();
        d.dedup();
        d
    };

    match ctx.method {
        MethodConfig::Erm | MethodConfig::Scaffold | MethodConfig::FedGma { .. } => Ok(erm()?),
        MethodConfig::FedProx { mu } => {
            let (mut loss, mut grad) = erm()?;
            loss += prox_term(params, ctx.global, *mu)?;
            grad.add_scaled(&prox_grad(params, ctx.global, *mu)?, 1.0)?;
            Ok((loss, grad))
        }
        MethodConfig::Irm { penalty_weight } => {
            let (mut loss, mut grad) = erm()?;
            if distinct.len() >= 2 {
                let batches = group_by_domain(features.view(), labels, domains);
                let (pen, pen_grad) = irm_penalty_and_grad(spec, params, &batches, ctx.loss)?;
                loss += penalty_weight * pen;
                grad.add_scaled(&pen_grad, *penalty_weight)?;
            }
            Ok((loss, grad))
        }
        MethodConfig::Coral { penalty_weight } => {
            let (mut loss, mut grad) = erm()?;
            let batches = group_by_domain(features.view(), labels, domains);
            // pairwise penalty needs two domains with two samples each
            if batches.len() >= 2 && batches.iter().all(|b| b.features.nrows() >= 2) {
                let reprs: Vec<Array2<f64>> = batches
                    .iter()
                    .map(|b| forward(spec, params, b.features.view()).map(|p| p.representation))
                    .collect::<Result<_, _>>()?;
                let (pen, repr_grads) = coral_penalty_and_grad(&reprs)?;
                loss += penalty_weight * pen;
                for (batch, rg) in batches.iter().zip(&repr_grads) {
                    let contribution = backward_from_representation(
                        spec,
                        params,
                        batch.features.view(),
                        rg.view(),
                    )?;
                    grad.add_scaled(&contribution, *penalty_weight)?;
                }
            }
            Ok((loss, grad))
        }
        MethodConfig::Mmd {
            penalty_weight,
            bandwidth,
        } => {
            let (mut loss, mut grad) = erm()?;
            if distinct.len() >= 2 {
                let batches = group_by_domain(features.view(), labels, domains);
                let reprs: Vec<Array2<f64>> = batches
                    .iter()
                    .map(|b| forward(spec, params, b.features.view()).map(|p| p.representation))
                    .collect::<Result<_, _>>()?;
                let (pen, repr_grads) = mmd_penalty_and_grad(&reprs, *bandwidth)?;
                loss += penalty_weight * pen;
                for (batch, rg) in batches.iter().zip(&repr_grads) {
                    let contribution = backward_from_representation(
                        spec,
                        params,
                        batch.features.view(),
                        rg.view(),
                    )?;
                    grad.add_scaled(&contribution, *penalty_weight)?;
                }
            }
            Ok((loss, grad))
        }
        MethodConfig::FedSr {
            l2_regularizer,
            cmi_regularizer,
        } => {
            let (mut loss, mut grad) = erm()?;
            let pass = forward(spec, params, features.view())?;
            let (pen, repr_grad) = fedsr_penalty_and_grad(
                pass.representation.view(),
                labels,
                *l2_regularizer,
                *cmi_regularizer,
            )?;
            loss += pen;
            let contribution =
                backward_from_representation(spec, params, features.view(), repr_grad.view())?;
            grad.add_scaled(&contribution, 1.0)?;
            Ok((loss, grad))
        }
        MethodConfig::GroupDro { .. } => {
            if distinct.len() < 2 {
                return Ok(erm()?);
            }
            let batches = group_by_domain(features.view(), labels, domains);
            let mut losses = Vec::with_capacity(batches.len());
            let mut grads = BTreeMap::new();
            for b in &batches {
                let (l, g) = loss_and_grad(
                    spec,
                    params,
                    b.features.view(),
                    Targets::Hard(&b.labels),
                    ctx.loss,
                )?;
                losses.push((b.domain, l));
                grads.insert(b.domain, g);
            }
            let dro = client.dro.as_mut().expect("groupdro client has weights");
            let loss = dro.update(&losses);
            let mut grad = ParamVector::zeros(spec.layout());
            for (domain, g) in grads {
                let w = dro.weight_of(domain).unwrap_or(0.0);
                grad.add_scaled(&g, w)?;
            }
            Ok((loss, grad))
        }
        MethodConfig::Mixup { alpha } => {
            if distinct.len() < 2 {
                return Ok(erm()?);
            }
            let batches = group_by_domain(features.view(), labels, domains);
            mixup_step(spec, params, &batches, ctx.loss, *alpha, rng)
        }
        MethodConfig::Afl { .. } => {
            let beta = ctx.afl_beta.expect("afl round broadcasts beta");
            let batches = group_by_domain(features.view(), labels, domains);
            let mut loss = 0.0;
            let mut grad = ParamVector::zeros(spec.layout());
            for b in &batches {
                let (l, g) = loss_and_grad(
                    spec,
                    params,
                    b.features.view(),
                    Targets::Hard(&b.labels),
                    ctx.loss,
                )?;
                let w = beta.get(b.domain).copied().unwrap_or(0.0);
                loss += w * l;
                grad.add_scaled(&g, w)?;
            }
            Ok((loss, grad))
        }
        MethodConfig::Fish { .. } => unreachable!("fish runs its own epoch loop"),
    }
}

fn one_hot(labels: &[usize], k: usize) -> Array2<f64> {
    let mut t = Array2::zeros((labels.len(), k));
    for (i, &y) in labels.iter().enumerate() {
        t[(i, y)] = 1.0;
    }
    t
}

/// Inter-domain mixup: consecutive pairs of the shuffled local domain list
/// are mixed with a fresh Beta draw per pair; the objective is the mean of
/// the pair losses.
fn mixup_step(
    spec: &ModelSpec,
    params: &ParamVector,
    batches: &[DomainBatch],
    loss_kind: LossKind,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, ParamVector), SimError> {
    let k = spec.output_dim();
    let beta = Beta::new(alpha, alpha)
        .map_err(|_| crate::objectives::ObjectiveError::InvalidAlpha(alpha))?;
    let mut order: Vec<usize> = (0..batches.len()).collect();
    order.shuffle(rng);
    let mut pairs: Vec<(usize, usize)> = order
        .chunks(2)
        .filter(|c| c.len() == 2)
        .map(|c| (c[0], c[1]))
        .collect();
    if order.len() % 2 == 1 {
        pairs.push((order[order.len() - 1], order[0]));
    }

    let mut total_loss = 0.0;
    let mut grad = ParamVector::zeros(spec.layout());
    for (a, b) in &pairs {
        let (ba, bb) = (&batches[*a], &batches[*b]);
        let n = ba.features.nrows().min(bb.features.nrows());
        let xa = ba.features.slice(ndarray::s![..n, ..]);
        let xb = bb.features.slice(ndarray::s![..n, ..]);
        let ta = one_hot(&ba.labels[..n], k);
        let tb = one_hot(&bb.labels[..n], k);
        let m = beta.sample(rng);
        let (x, t) = mixup_with_coefficient(xa, ta.view(), xb, tb.view(), m)?;
        let (l, g) = loss_and_grad(spec, params, x.view(), Targets::Soft(t.view()), loss_kind)?;
        total_loss += l / pairs.len() as f64;
        grad.add_scaled(&g, 1.0 / pairs.len() as f64)?;
    }
    Ok((total_loss, grad))
}

/// One Fish epoch: a sequential per-domain inner pass followed by the
/// meta step back toward the start point. Single-domain clients fall back
/// to a plain ERM epoch.
fn fish_epoch(
    client: &mut ClientState,
    ctx: &LocalContext,
    meta_lr: f64,
    rng: &mut ChaCha8Rng,
    acc: &mut Accumulator,
) -> Result<(), SimError> {
    let domains = client.local_domains();
    let start = client.params.clone();
    let single_domain = domains.len() < 2;
    for d in domains {
        let mut rows = client.data.domain_indices(d);
        rows.shuffle(rng);
        for chunk in rows.chunks(ctx.plan.batch_size) {
            let (features, labels, _) = gather(&client.data, chunk);
            let (loss, grad) = loss_and_grad(
                ctx.model,
                &client.params,
                features.view(),
                Targets::Hard(&labels),
                ctx.loss,
            )?;
            if !loss.is_finite() {
                return Err(SimError::NonFiniteLoss {
                    round: ctx.round,
                    client: client.id,
                });
            }
            client.optimizer.step(&mut client.params, &grad)?;
            acc.record(loss, chunk.len());
        }
    }
    if !single_domain {
        client.params = fish_meta_step(&start, &client.params, meta_lr)?;
    }
    Ok(())
}

/// Scaffold drift correction `+ (c - c_i)` applied to every step gradient.
fn apply_common_corrections(
    client: &ClientState,
    ctx: &LocalContext,
    grad: &mut ParamVector,
) -> Result<(), SimError> {
    if let (Some(server_c), Some(client_c)) =
        (ctx.scaffold_server_variate, client.control_variate.as_ref())
    {
        grad.add_scaled(server_c, 1.0)?;
        grad.add_scaled(client_c, -1.0)?;
    }
    Ok(())
}

/// Option-II control-variate refresh:
/// `c_i+ = c_i - c + (global - local) / (steps * lr)`.
pub(crate) fn scaffold_variate_refresh(
    old: &ParamVector,
    server_variate: &ParamVector,
    global: &ParamVector,
    local: &ParamVector,
    steps: usize,
    lr: f64,
) -> Result<(ParamVector, ParamVector), SimError> {
    let mut new = old.clone();
    new.add_scaled(server_variate, -1.0)?;
    let drift = global.sub(local)?;
    new.add_scaled(&drift, 1.0 / (steps as f64 * lr))?;
    let delta = new.sub(old)?;
    Ok((new, delta))
}

fn update_scaffold_variate(
    client: &mut ClientState,
    ctx: &LocalContext,
    steps: usize,
) -> Result<Option<ParamVector>, SimError> {
    let Some(server_c) = ctx.scaffold_server_variate else {
        return Ok(None);
    };
    let Some(old) = client.control_variate.clone() else {
        return Ok(None);
    };
    let lr = client.optimizer.config().learning_rate;
    let (new, delta) =
        scaffold_variate_refresh(&old, server_c, ctx.global, &client.params, steps, lr)?;
    client.control_variate = Some(new);
    Ok(Some(delta))
}

/// Seeded participant sampler for the optional client-sampling hook.
pub(crate) fn sample_participants(
    total: usize,
    fraction: f64,
    seed: u64,
    round: usize,
) -> Vec<usize> {
    let count = ((fraction * total as f64).ceil() as usize).clamp(1, total);
    let mut ids: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[round as u64, 0x9a7]));
    // partial Fisher-Yates
    for i in 0..count {
        let j = rng.random_range(i..total);
        ids.swap(i, j);
    }
    let mut chosen: Vec<usize> = ids[..count].to_vec();
    chosen.sort_unstable();
    chosen
}
