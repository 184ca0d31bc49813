//! Central finite-difference verification of tape gradients (double precision).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::param::{ParamGroup, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates sampled per parameter group (all of them if the group is smaller).
    pub coords_per_group: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            coords_per_group: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub coords: usize,
    pub max_rel_err: f64,
    /// Worst coordinate as (parameter name, flat index, analytic, numeric).
    pub worst: Option<(String, usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn coords(&self) -> usize {
        self.groups.iter().map(|g| g.coords).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = f(&mut tape)?;
    let value = tape.value(loss)?;
    if value.numel() != 1 {
        return Err(Error::Graph("gradient check needs a scalar function".into()));
    }
    Ok(value.data()[0])
}

/// Compares the tape gradient of `f` with central differences for every
/// trainable group of `store`. Parameter values are restored afterwards.
pub fn grad_check<F>(store: &mut ParamStore<f64>, f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    if cfg.step.is_nan() || cfg.step <= 0.0 {
        return Err(Error::InvalidArgument(format!("step {} must be positive", cfg.step)));
    }
    let grads = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut groups = Vec::new();
    for group in ParamGroup::ALL {
        let coords: Vec<(usize, usize)> = (0..store.len())
            .filter(|&p| {
                let param = store.by_index(p);
                param.trainable && param.group == group
            })
            .flat_map(|p| (0..store.by_index(p).value.numel()).map(move |i| (p, i)))
            .collect();
        if coords.is_empty() {
            continue;
        }
        let picked: Vec<(usize, usize)> = if coords.len() <= cfg.coords_per_group {
            coords
        } else {
            let mut idx = sample(&mut rng, coords.len(), cfg.coords_per_group).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| coords[i]).collect()
        };
        let mut check = GroupCheck {
            group,
            coords: picked.len(),
            max_rel_err: 0.0,
            worst: None,
        };
        for (p, i) in picked {
            let analytic = grads.get(p).map_or(0.0, |g| g.data()[i]);
            let name = store.by_index(p).name.clone();
            let original = store.by_index(p).value.data()[i];
            let set = |store: &mut ParamStore<f64>, v: f64| {
                store.get_mut(&name).expect("known parameter").value.data_mut()[i] = v;
            };
            set(store, original + cfg.step);
            let plus = eval(store, &f);
            set(store, original - cfg.step);
            let minus = eval(store, &f);
            set(store, original);
            let numeric = (plus? - minus?) / (2.0 * cfg.step);
            let err = relative_error(analytic, numeric);
            if err > check.max_rel_err || check.worst.is_none() {
                check.max_rel_err = check.max_rel_err.max(err);
                check.worst = Some((name, i, analytic, numeric));
            }
        }
        groups.push(check);
    }
    Ok(GradCheckReport { groups })
}
