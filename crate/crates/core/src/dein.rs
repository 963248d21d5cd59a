//! Deep ergodic inference networks.
//!
//! A [`DeinModel`] draws `z₀ = μ + σ∘r₀` from a diagonal Gaussian and pushes
//! it through an ordered stack of leapfrog layers, each fed fresh momentum
//! `√m∘ξ`. All randomness sits in a parameter-free [`NoiseBatch`], so samples
//! are a deterministic, differentiable function of the parameters given the
//! noise, and rows are mutually independent.
//!
//! The marginal density of the output is never computed.

use indexmap::IndexMap;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::params::NamedParams;
use crate::targets::Target;
use crate::transforms::{hmc_transition, leapfrog_forward, LeapfrogLayer, LeapfrogTrace};
use crate::{rng, Error, Result};

/// Diagonal Gaussian initial distribution `q₀`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitDist {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub trainable: bool,
}

impl InitDist {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>, trainable: bool) -> Self {
        Self {
            mean,
            log_std,
            trainable,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `T₀(r₀) = μ + exp(log σ)∘r₀`.
    pub fn transform(&self, r0: &[f64]) -> Vec<f64> {
        r0.iter()
            .zip(self.mean.iter().zip(&self.log_std))
            .map(|(r, (m, ls))| m + ls.exp() * r)
            .collect()
    }
}

/// Initial distribution plus an ordered stack of leapfrog layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeinModel {
    pub init: InitDist,
    pub layers: Vec<LeapfrogLayer>,
}

impl DeinModel {
    pub fn new(init: InitDist, layers: Vec<LeapfrogLayer>) -> Result<Self> {
        let model = Self { init, layers };
        model.validate()?;
        Ok(model)
    }

    /// `depth` identical layers with scalar initial step and unit mass.
    pub fn stack(init: InitDist, depth: usize, step: f64, leaps: usize) -> Result<Self> {
        let d = init.dim();
        Self::new(init, vec![LeapfrogLayer::new(d, step, leaps); depth])
    }

    pub fn dim(&self) -> usize {
        self.init.dim()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::Contract("model dimension must be positive".into()));
        }
        if self.init.log_std.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: self.init.log_std.len(),
            });
        }
        if self
            .init
            .mean
            .iter()
            .chain(&self.init.log_std)
            .any(|x| !x.is_finite())
        {
            return Err(Error::Contract("initial parameters must be finite".into()));
        }
        for layer in &self.layers {
            layer.validate()?;
            if layer.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: layer.dim(),
                });
            }
        }
        Ok(())
    }

    /// The same initial distribution with no layers.
    pub fn initial_only(&self) -> Self {
        Self {
            init: self.init.clone(),
            layers: vec![],
        }
    }

    /// Trainable parameters in the documented key order.
    pub fn trainable_params(&self) -> NamedParams {
        let mut out = IndexMap::new();
        if self.init.trainable {
            out.insert("init.mean".to_string(), self.init.mean.clone());
            out.insert("init.log_std".to_string(), self.init.log_std.clone());
        }
        for (n, layer) in self.layers.iter().enumerate() {
            out.insert(format!("layers.{n}.log_step"), layer.log_step.clone());
            out.insert(format!("layers.{n}.log_mass"), layer.log_mass.clone());
        }
        out
    }

    /// Every real parameter, trainable or not, in the documented key order.
    pub fn all_params(&self) -> NamedParams {
        let mut out = IndexMap::new();
        out.insert("init.mean".to_string(), self.init.mean.clone());
        out.insert("init.log_std".to_string(), self.init.log_std.clone());
        for (n, layer) in self.layers.iter().enumerate() {
            out.insert(format!("layers.{n}.log_step"), layer.log_step.clone());
            out.insert(format!("layers.{n}.log_mass"), layer.log_mass.clone());
        }
        out
    }

    /// Overwrites the parameters named in `params`; unknown names are an
    /// error.
    pub fn set_params(&mut self, params: &NamedParams) -> Result<()> {
        for (name, values) in params {
            let slot = self.slot_mut(name)?;
            if slot.len() != values.len() {
                return Err(Error::DimensionMismatch {
                    expected: slot.len(),
                    got: values.len(),
                });
            }
            slot.copy_from_slice(values);
        }
        self.validate()
    }

    pub(crate) fn slot_mut(&mut self, name: &str) -> Result<&mut Vec<f64>> {
        let unknown = || Error::Contract(format!("unknown parameter `{name}`"));
        match name {
            "init.mean" => return Ok(&mut self.init.mean),
            "init.log_std" => return Ok(&mut self.init.log_std),
            _ => {}
        }
        let rest = name.strip_prefix("layers.").ok_or_else(unknown)?;
        let (idx, field) = rest.split_once('.').ok_or_else(unknown)?;
        let idx: usize = idx.parse().map_err(|_| unknown())?;
        let layer = self.layers.get_mut(idx).ok_or_else(unknown)?;
        match field {
            "log_step" => Ok(&mut layer.log_step),
            "log_mass" => Ok(&mut layer.log_mass),
            _ => Err(unknown()),
        }
    }
}

/// Total number of trainable scalars.
pub fn count_params(model: &DeinModel) -> usize {
    let d = model.dim();
    let init = if model.init.trainable { 2 * d } else { 0 };
    init + model.layers.len() * 2 * d
}

/// Reparameterization noise for a batch.
///
/// `momenta[n]` holds the standard-normal momentum draws for layer `n`;
/// `accept_u` (`n_samples × N`) the uniforms used by MH-corrected layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBatch {
    pub r0: Array2<f64>,
    pub momenta: Vec<Array2<f64>>,
    pub accept_u: Array2<f64>,
    pub seed: u64,
}

impl NoiseBatch {
    pub fn n_samples(&self) -> usize {
        self.r0.nrows()
    }

    fn check(&self, model: &DeinModel) -> Result<()> {
        let (n, d) = self.r0.dim();
        let depth = model.depth();
        let ok = d == model.dim()
            && self.momenta.len() == depth
            && self.momenta.iter().all(|m| m.dim() == (n, d))
            && self.accept_u.dim() == (n, depth);
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "noise batch shape does not match a depth-{depth} model of dimension {}",
                model.dim()
            )))
        }
    }
}

/// Draws noise for `n` samples.
///
/// Row `i` reads, from its own stream ([`rng::row_stream`]), `dim` normals
/// for `r₀`, then `dim` normals per layer, then one uniform per layer. Row
/// `i` is therefore identical for every batch size `n > i`.
pub fn sample_noise(model: &DeinModel, n: usize, seed: u64) -> NoiseBatch {
    let d = model.dim();
    let depth = model.depth();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::row_stream(seed, i as u64);
            let mut row = Vec::with_capacity(d * (depth + 1) + depth);
            for _ in 0..d * (depth + 1) {
                row.push(rng.sample::<f64, _>(StandardNormal));
            }
            for _ in 0..depth {
                row.push(rng.random::<f64>());
            }
            row
        })
        .collect();
    let mut r0 = Array2::zeros((n, d));
    let mut momenta = vec![Array2::zeros((n, d)); depth];
    let mut accept_u = Array2::zeros((n, depth));
    for (i, row) in rows.iter().enumerate() {
        for j in 0..d {
            r0[[i, j]] = row[j];
        }
        for (layer, m) in momenta.iter_mut().enumerate() {
            for j in 0..d {
                m[[i, j]] = row[d * (layer + 1) + j];
            }
        }
        for layer in 0..depth {
            accept_u[[i, layer]] = row[d * (depth + 1) + layer];
        }
    }
    NoiseBatch {
        r0,
        momenta,
        accept_u,
        seed,
    }
}

/// Output of [`push_forward`]. Divergent rows are NaN-filled in `samples`
/// and flagged in `divergent`.
#[derive(Debug, Clone)]
pub struct PushForward {
    pub samples: Array2<f64>,
    pub divergent: Vec<bool>,
    /// `traces[i][n]` is row `i`'s trajectory through layer `n`.
    pub traces: Option<Vec<Vec<LeapfrogTrace>>>,
}

impl PushForward {
    pub fn n_divergent(&self) -> usize {
        self.divergent.iter().filter(|d| **d).count()
    }
}

/// One row's pass through the stack.
#[derive(Debug, Clone)]
pub(crate) struct RowPass {
    /// `states[n]` is `z_n`, `n = 0..=N`.
    pub states: Vec<Vec<f64>>,
    pub traces: Vec<LeapfrogTrace>,
    pub diverged: bool,
}

/// Applies one layer to a single state with momentum noise `xi` and uniform
/// `u`. `None` marks a divergent trajectory.
fn layer_step(
    layer: &LeapfrogLayer,
    z: &[f64],
    xi: ArrayView1<f64>,
    u: f64,
    target: &dyn Target,
) -> Result<Option<(Vec<f64>, Option<LeapfrogTrace>)>> {
    let xi: Vec<f64> = xi.to_vec();
    if layer.mh_correct {
        let (z1, _) = hmc_transition(z, &xi, u, layer, target)?;
        return Ok(Some((z1, None)));
    }
    let r: Vec<f64> = xi
        .iter()
        .zip(&layer.log_mass)
        .map(|(x, lm)| x * (0.5 * lm).exp())
        .collect();
    match leapfrog_forward(z, &r, layer, target) {
        Ok((z1, _, trace)) => Ok(Some((z1, Some(trace)))),
        Err(Error::Divergence { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

pub(crate) fn forward_row(
    model: &DeinModel,
    noise: &NoiseBatch,
    row: usize,
    target: &dyn Target,
    keep_traces: bool,
) -> Result<RowPass> {
    let z0 = model
        .init
        .transform(noise.r0.row(row).as_slice().expect("row-major"));
    let mut states = Vec::with_capacity(model.depth() + 1);
    let mut traces = Vec::new();
    states.push(z0);
    for (n, layer) in model.layers.iter().enumerate() {
        let z = states.last().expect("non-empty");
        match layer_step(
            layer,
            z,
            noise.momenta[n].row(row),
            noise.accept_u[[row, n]],
            target,
        )? {
            Some((z1, trace)) => {
                if keep_traces {
                    if let Some(t) = trace {
                        traces.push(t);
                    }
                }
                states.push(z1);
            }
            None => {
                return Ok(RowPass {
                    states,
                    traces,
                    diverged: true,
                })
            }
        }
    }
    Ok(RowPass {
        states,
        traces,
        diverged: false,
    })
}

pub(crate) fn forward_all(
    model: &DeinModel,
    noise: &NoiseBatch,
    target: &dyn Target,
    keep_traces: bool,
) -> Result<Vec<RowPass>> {
    model.validate()?;
    noise.check(model)?;
    if target.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: target.dim(),
        });
    }
    (0..noise.n_samples())
        .into_par_iter()
        .map(|i| forward_row(model, noise, i, target, keep_traces))
        .collect()
}

/// Pushes the noise batch through the model.
pub fn push_forward(
    model: &DeinModel,
    noise: &NoiseBatch,
    target: &dyn Target,
    keep_traces: bool,
) -> Result<PushForward> {
    let rows = forward_all(model, noise, target, keep_traces)?;
    let d = model.dim();
    let mut samples = Array2::from_elem((rows.len(), d), f64::NAN);
    let mut divergent = Vec::with_capacity(rows.len());
    for (i, pass) in rows.iter().enumerate() {
        divergent.push(pass.diverged);
        if !pass.diverged {
            let z = pass.states.last().expect("non-empty");
            samples.row_mut(i).assign(&ArrayView1::from(z.as_slice()));
        }
    }
    let traces = keep_traces.then(|| rows.into_iter().map(|p| p.traces).collect());
    Ok(PushForward {
        samples,
        divergent,
        traces,
    })
}

/// Applies a single layer to every row of `states` (NaN rows pass through).
/// Used to check that layer-by-layer evaluation matches [`push_forward`].
pub fn apply_layer(
    layer: &LeapfrogLayer,
    states: ArrayView2<f64>,
    momentum_noise: ArrayView2<f64>,
    accept_u: ArrayView1<f64>,
    target: &dyn Target,
) -> Result<Array2<f64>> {
    let rows: Vec<Array1<f64>> = (0..states.nrows())
        .into_par_iter()
        .map(|i| {
            let z = states.row(i);
            if z.iter().any(|x| !x.is_finite()) {
                return Ok(Array1::from_elem(z.len(), f64::NAN));
            }
            let z = z.to_vec();
            Ok(
                match layer_step(layer, &z, momentum_noise.row(i), accept_u[i], target)? {
                    Some((z1, _)) => Array1::from(z1),
                    None => Array1::from_elem(z.len(), f64::NAN),
                },
            )
        })
        .collect::<Result<_>>()?;
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| Error::Contract(e.to_string()))
}

/// Flat, serializable snapshot of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub dim: usize,
    pub trainable_init: bool,
    pub leaps: Vec<usize>,
    #[serde(default)]
    pub mh_correct: Vec<bool>,
    pub params: NamedParams,
}

impl From<&DeinModel> for ModelSnapshot {
    fn from(model: &DeinModel) -> Self {
        Self {
            dim: model.dim(),
            trainable_init: model.init.trainable,
            leaps: model.layers.iter().map(|l| l.leaps).collect(),
            mh_correct: model.layers.iter().map(|l| l.mh_correct).collect(),
            params: model.all_params(),
        }
    }
}

impl ModelSnapshot {
    pub fn to_model(&self) -> Result<DeinModel> {
        let d = self.dim;
        let mut model = DeinModel {
            init: InitDist::new(vec![0.0; d], vec![0.0; d], self.trainable_init),
            layers: self
                .leaps
                .iter()
                .enumerate()
                .map(|(n, &leaps)| LeapfrogLayer {
                    log_step: vec![0.0; d],
                    log_mass: vec![0.0; d],
                    leaps,
                    mh_correct: self.mh_correct.get(n).copied().unwrap_or(false),
                })
                .collect(),
        };
        let want = model.all_params();
        crate::params::check_same_layout(&want, &self.params)?;
        model.set_params(&self.params)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::Gaussian;

    fn model(d: usize, depth: usize, step: f64) -> DeinModel {
        DeinModel::new(
            InitDist::new(vec![0.0; d], vec![0.0; d], false),
            vec![LeapfrogLayer::new(d, step, 3); depth],
        )
        .unwrap()
    }

    #[test]
    fn noise_is_deterministic_and_prefix_stable() {
        let m = model(2, 3, 0.1);
        let a = sample_noise(&m, 50, 9);
        let b = sample_noise(&m, 50, 9);
        assert_eq!(a, b);
        let c = sample_noise(&m, 10, 9);
        assert_eq!(c.r0.row(7), a.r0.row(7));
        assert_eq!(c.momenta[2].row(3), a.momenta[2].row(3));
        assert_ne!(sample_noise(&m, 50, 10).r0, a.r0);
    }

    #[test]
    fn noise_has_standard_normal_moments() {
        let m = model(2, 1, 0.1);
        let n = 100_000;
        let noise = sample_noise(&m, n, 4);
        for col in noise
            .r0
            .columns()
            .into_iter()
            .chain(noise.momenta[0].columns())
        {
            let mean = col.mean().unwrap();
            let var = col.var(0.0);
            assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "{mean}");
            assert!((var - 1.0).abs() < 0.05, "{var}");
        }
        assert!(noise.accept_u.iter().all(|u| (0.0..1.0).contains(u)));
    }

    #[test]
    fn empty_stack_has_no_momenta() {
        let noise = sample_noise(&model(3, 0, 0.1), 5, 1);
        assert!(noise.momenta.is_empty());
        assert_eq!(noise.accept_u.dim(), (5, 0));
    }

    #[test]
    fn bare_initial_distribution_reproduces_noise() {
        let m = model(2, 0, 0.1);
        let noise = sample_noise(&m, 20, 2);
        let out = push_forward(&m, &noise, &Gaussian::std_normal(2), false).unwrap();
        assert_eq!(out.samples, noise.r0);
        assert!(out.traces.is_none());
    }

    #[test]
    fn identity_limit_layer_leaves_samples() {
        let mut m = model(2, 1, 0.1);
        m.init.log_std = vec![0.5, -0.3];
        m.init.mean = vec![1.0, 2.0];
        m.layers[0].log_step = vec![-30.0; 2];
        let noise = sample_noise(&m, 30, 3);
        let out = push_forward(&m, &noise, &Gaussian::std_normal(2), true).unwrap();
        let bare = push_forward(
            &m.initial_only(),
            &noise_without_layers(&noise),
            &Gaussian::std_normal(2),
            false,
        )
        .unwrap();
        for (a, b) in out.samples.iter().zip(bare.samples.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(out.traces.unwrap()[0].len(), 1);
    }

    fn noise_without_layers(noise: &NoiseBatch) -> NoiseBatch {
        NoiseBatch {
            r0: noise.r0.clone(),
            momenta: vec![],
            accept_u: Array2::zeros((noise.n_samples(), 0)),
            seed: noise.seed,
        }
    }

    #[test]
    fn forced_start_matches_hand_leapfrog() {
        let m = DeinModel::new(
            InitDist::new(vec![1.0], vec![0.0], false),
            vec![LeapfrogLayer::new(1, 0.1, 1)],
        )
        .unwrap();
        let noise = NoiseBatch {
            r0: Array2::zeros((1, 1)),
            momenta: vec![Array2::zeros((1, 1))],
            accept_u: Array2::zeros((1, 1)),
            seed: 0,
        };
        let out = push_forward(&m, &noise, &Gaussian::std_normal(1), false).unwrap();
        assert!((out.samples[[0, 0]] - 0.995).abs() < 1e-15);
    }

    #[test]
    fn count_params_layouts() {
        let mut m = model(2, 3, 0.1);
        m.init.trainable = true;
        assert_eq!(count_params(&m), 16);
        assert_eq!(count_params(&model(2, 0, 0.1)), 0);
        assert_eq!(count_params(&model(10, 8, 0.1)), 160);
        assert_eq!(
            m.trainable_params().values().map(Vec::len).sum::<usize>(),
            count_params(&m)
        );
    }

    #[test]
    fn divergent_rows_are_flagged_and_nan_filled() {
        let mut m = model(1, 1, 0.1);
        m.layers[0].log_step = vec![400.0];
        let noise = sample_noise(&m, 4, 1);
        let out = push_forward(&m, &noise, &Gaussian::std_normal(1), false).unwrap();
        assert_eq!(out.n_divergent(), 4);
        assert!(out.samples.iter().all(|x| x.is_nan()));
    }

    #[test]
    fn snapshot_round_trip() {
        let mut m = model(2, 2, 0.2);
        m.layers[1].log_mass = vec![0.3, -0.1];
        let snap = ModelSnapshot::from(&m);
        assert_eq!(snap.to_model().unwrap(), m);
        let keys: Vec<_> = snap.params.keys().cloned().collect();
        assert_eq!(
            keys,
            [
                "init.mean",
                "init.log_std",
                "layers.0.log_step",
                "layers.0.log_mass",
                "layers.1.log_step",
                "layers.1.log_mass"
            ]
        );
    }

    #[test]
    fn set_params_rejects_unknown_names() {
        let mut m = model(2, 1, 0.2);
        let mut p = NamedParams::new();
        p.insert("layers.3.log_step".into(), vec![0.0, 0.0]);
        assert!(m.set_params(&p).is_err());
    }

    #[test]
    fn mismatched_noise_is_rejected() {
        let m = model(2, 2, 0.2);
        let noise = sample_noise(&model(2, 1, 0.2), 4, 0);
        assert!(push_forward(&m, &noise, &Gaussian::std_normal(2), false).is_err());
    }
}
