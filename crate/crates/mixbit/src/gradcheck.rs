//! Finite-difference verification of the search gradients.
//!
//! The straight-through paths make the raw forward piecewise constant, so
//! central differences are taken against the frozen-rounding replay: the
//! residuals and saturation masks recorded at the base point are held fixed
//! while a parameter is perturbed. That surrogate is smooth and its exact
//! derivative is the straight-through gradient the backward pass implements,
//! for the strengths, the clipping parameters, and the meta weights alike.

use std::cell::RefCell;

use crate::costmodel;
use crate::dataio::gen_synthetic;
use crate::error::Result;
use crate::network::{build_tinynet, BnStatsMode, CoeffSource, ForwardCfg, LayerParams, MixedPrecNet};
use crate::quantizer::QuantTrace;
use crate::rng::Rng;
use crate::search::BitwidthSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_err_r: f64,
    pub max_err_s: f64,
    pub max_err_alpha: f64,
    pub coords_r: usize,
    pub coords_s: usize,
    pub coords_alpha: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_err_r.max(self.max_err_s).max(self.max_err_alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckMode {
    Deterministic,
    /// Stochastic coefficients with Gumbel noise frozen across evaluations.
    FrozenStochastic,
}

struct Objective<'a> {
    net: &'a mut MixedPrecNet,
    batch: &'a crate::dataio::Batch,
    noise: &'a [(Vec<f64>, Vec<f64>)],
    mode: CheckMode,
    tau: f64,
    lambda: f64,
    target_mflops: f64,
    trace: &'a RefCell<QuantTrace>,
}

fn coeff_source<'b>(mode: CheckMode, tau: f64, noise: &'b [(Vec<f64>, Vec<f64>)]) -> CoeffSource<'b> {
    match mode {
        CheckMode::Deterministic => CoeffSource::Deterministic,
        CheckMode::FrozenStochastic => CoeffSource::FrozenStochastic { tau, noise },
    }
}

impl Objective<'_> {
    fn penalty(&self) -> f64 {
        let costs = self.net.layer_costs();
        let strengths = self.net.strengths();
        let e = costmodel::to_mflops(
            costmodel::expected_flops(&costs, &strengths, self.net.bits()).unwrap(),
        );
        costmodel::flops_penalty(e, self.target_mflops, self.lambda)
    }

    /// Records the base forward, runs backward, and returns the analytic
    /// (r, s, alpha) gradients per quantized layer, penalty included.
    fn analytic_grads(&mut self) -> Result<Vec<(Vec<f64>, Vec<f64>, f64)>> {
        let mut rng = Rng::new(0);
        let cfg = ForwardCfg {
            coeffs: coeff_source(self.mode, self.tau, self.noise),
            bn: BnStatsMode::TrainFrozen,
            trace: Some(self.trace),
        };
        self.net.backward_from_batch(self.batch, &cfg, &mut rng)?;
        let costs = self.net.layer_costs();
        let strengths = self.net.strengths();
        let e_mflops = costmodel::to_mflops(costmodel::expected_flops(
            &costs,
            &strengths,
            self.net.bits(),
        )?);
        let pen_grads = if e_mflops > self.target_mflops {
            Some(costmodel::expected_flops_grad(&costs, &strengths, self.net.bits())?)
        } else {
            None
        };
        let mut out = Vec::new();
        let mut qidx = 0;
        for layer in self.net.layers() {
            if let LayerParams::Conv { quant: Some(q), .. } = &layer.params {
                let mut gr = q.r.grad.as_ref().expect("r grad").data().to_vec();
                let mut gs = q.s.grad.as_ref().expect("s grad").data().to_vec();
                if let Some(pg) = &pen_grads {
                    for (g, p) in gr.iter_mut().zip(&pg[qidx].0) {
                        *g += self.lambda / 1e6 * p;
                    }
                    for (g, p) in gs.iter_mut().zip(&pg[qidx].1) {
                        *g += self.lambda / 1e6 * p;
                    }
                }
                let ga = q.alpha.grad.as_ref().expect("alpha grad").item();
                out.push((gr, gs, ga));
                qidx += 1;
            }
        }
        Ok(out)
    }

    /// Loss under the frozen-rounding replay at the current parameters.
    fn replay_loss(&mut self) -> f64 {
        self.trace.borrow_mut().rewind();
        let mut rng = Rng::new(0);
        let cfg = ForwardCfg {
            coeffs: coeff_source(self.mode, self.tau, self.noise),
            bn: BnStatsMode::TrainFrozen,
            trace: Some(self.trace),
        };
        let loss = self
            .net
            .loss_on_batch(self.batch, &cfg, &mut rng)
            .expect("replay forward");
        loss + self.penalty()
    }
}

struct Accumulator {
    max_err: f64,
    coords: usize,
}

impl Accumulator {
    fn new() -> Self {
        Self { max_err: 0.0, coords: 0 }
    }

    fn record(&mut self, analytic: f64, fd: f64) {
        // coordinates with a vanishing response carry no information
        if fd.abs() < 1e-7 && analytic.abs() < 1e-7 {
            return;
        }
        let rel = (analytic - fd).abs() / (fd.abs() + 1e-8);
        self.max_err = self.max_err.max(rel);
        self.coords += 1;
    }
}

/// Accumulates finite-difference comparisons over fresh nets and batches
/// until at least `coords_target` informative coordinates are covered for
/// each of r, s, and alpha.
pub fn check_search_gradients(
    mode: CheckMode,
    coords_target: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut acc_r = Accumulator::new();
    let mut acc_s = Accumulator::new();
    let mut acc_a = Accumulator::new();
    let mut round_rng = Rng::new(seed);
    let h = 1e-5;

    let mut round = 0usize;
    while acc_r.coords < coords_target
        || acc_s.coords < coords_target
        || acc_a.coords < coords_target
    {
        round += 1;
        if round > 50 * coords_target {
            return Err(crate::error::Error::Infeasible(
                "gradient check could not collect enough informative coordinates".to_string(),
            ));
        }
        let round_seed = round_rng.next_u64();
        let mut net = build_tinynet(4, BitwidthSet::default(), round_seed)?;
        let mut rng = Rng::new(round_seed ^ 0xabcd);

        // spread the strengths away from zero and pull the clip range down
        // so that some activations saturate
        let strengths: Vec<(Vec<f64>, Vec<f64>)> = (0..net.quantized_layer_count())
            .map(|_| {
                (
                    (0..5).map(|_| rng.normal() * 0.6).collect(),
                    (0..5).map(|_| rng.normal() * 0.6).collect(),
                )
            })
            .collect();
        net.set_strengths(&strengths)?;
        let alphas: Vec<f64> = (0..net.quantized_layer_count())
            .map(|_| 0.6 + rng.next_f64())
            .collect();
        net.set_alphas(&alphas)?;

        let ds = gen_synthetic(4, 4, 16, round_seed ^ 0x77)?;
        let batch = ds.gather(&[0, 5, 9])?;
        let noise: Vec<(Vec<f64>, Vec<f64>)> = (0..net.quantized_layer_count())
            .map(|_| {
                (
                    (0..5).map(|_| rng.gumbel()).collect(),
                    (0..5).map(|_| rng.gumbel()).collect(),
                )
            })
            .collect();

        // keep the FLOPs hinge active so its gradient is exercised too
        let costs = net.layer_costs();
        let current = costmodel::to_mflops(costmodel::expected_flops(
            &costs,
            &net.strengths(),
            net.bits(),
        )?);
        let trace = RefCell::new(QuantTrace::recording());
        let mut obj = Objective {
            net: &mut net,
            batch: &batch,
            noise: &noise,
            mode,
            tau: 0.8,
            lambda: 0.06,
            target_mflops: 0.5 * current,
            trace: &trace,
        };

        let analytic = obj.analytic_grads()?;
        obj.trace.borrow_mut().start_replay();

        let layer_count = analytic.len();
        for layer in 0..layer_count {
            // r and s coordinates
            for side in 0..2 {
                let acc = if side == 0 { &mut acc_r } else { &mut acc_s };
                for coord in 0..5 {
                    let base = obj.net.strengths();
                    let mut plus = base.clone();
                    let mut minus = base.clone();
                    if side == 0 {
                        plus[layer].0[coord] += h;
                        minus[layer].0[coord] -= h;
                    } else {
                        plus[layer].1[coord] += h;
                        minus[layer].1[coord] -= h;
                    }
                    obj.net.set_strengths(&plus)?;
                    let fp = obj.replay_loss();
                    obj.net.set_strengths(&minus)?;
                    let fm = obj.replay_loss();
                    obj.net.set_strengths(&base)?;
                    let fd = (fp - fm) / (2.0 * h);
                    let a = if side == 0 {
                        analytic[layer].0[coord]
                    } else {
                        analytic[layer].1[coord]
                    };
                    acc.record(a, fd);
                }
            }
            // alpha
            let base = obj.net.alphas();
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[layer] += h;
            minus[layer] -= h;
            obj.net.set_alphas(&plus)?;
            let fp = obj.replay_loss();
            obj.net.set_alphas(&minus)?;
            let fm = obj.replay_loss();
            obj.net.set_alphas(&base)?;
            acc_a.record(analytic[layer].2, (fp - fm) / (2.0 * h));
        }
    }

    Ok(GradCheckReport {
        max_err_r: acc_r.max_err,
        max_err_s: acc_s.max_err,
        max_err_alpha: acc_a.max_err,
        coords_r: acc_r.coords,
        coords_s: acc_s.coords,
        coords_alpha: acc_a.coords,
    })
}

/// Verifies the frozen-residual meta-weight gradient of one small net; used
/// by the CLI gradcheck command alongside the strength checks.
pub fn check_meta_weight_gradient(seed: u64) -> Result<f64> {
    let mut net = build_tinynet(4, BitwidthSet::default(), seed)?;
    let ds = gen_synthetic(4, 4, 16, seed ^ 0x99)?;
    let batch = ds.gather(&[0, 4, 8])?;
    let alphas: Vec<f64> = vec![1.2; net.quantized_layer_count()];
    net.set_alphas(&alphas)?;

    let trace = RefCell::new(QuantTrace::recording());
    let cfg = ForwardCfg {
        coeffs: CoeffSource::Deterministic,
        bn: BnStatsMode::TrainFrozen,
        trace: Some(&trace),
    };
    let mut rng = Rng::new(0);
    net.backward_from_batch(&batch, &cfg, &mut rng)?;

    // first quantized conv layer's weight
    let (layer_idx, weight_val, analytic) = {
        let mut found = None;
        for (li, layer) in net.layers().iter().enumerate() {
            if let LayerParams::Conv { weight, quant: Some(_) } = &layer.params {
                found = Some((
                    li,
                    weight.value.clone(),
                    weight.grad.as_ref().expect("weight grad").clone(),
                ));
                break;
            }
        }
        found.expect("tinynet has quantized convs")
    };

    trace.borrow_mut().start_replay();
    let h = 1e-6;
    let coords: Vec<usize> = (0..30).map(|i| (i * 37) % weight_val.numel()).collect();
    let mut worst = 0.0_f64;
    for &c in &coords {
        let mut plus = weight_val.clone();
        plus.data_mut()[c] += h;
        let mut minus = weight_val.clone();
        minus.data_mut()[c] -= h;

        let mut eval = |w: &Tensor| -> f64 {
            net.set_conv_weight(layer_idx, w).expect("set weight");
            trace.borrow_mut().rewind();
            let cfg = ForwardCfg {
                coeffs: CoeffSource::Deterministic,
                bn: BnStatsMode::TrainFrozen,
                trace: Some(&trace),
            };
            let mut rng = Rng::new(0);
            net.loss_on_batch(&batch, &cfg, &mut rng).expect("replay")
        };
        let fp = eval(&plus);
        let fm = eval(&minus);
        net.set_conv_weight(layer_idx, &weight_val)?;
        let fd = (fp - fm) / (2.0 * h);
        if fd.abs() < 1e-7 && analytic.data()[c].abs() < 1e-7 {
            continue;
        }
        worst = worst.max((analytic.data()[c] - fd).abs() / (fd.abs() + 1e-8));
    }
    Ok(worst)
}
