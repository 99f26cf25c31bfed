//! Training state as a container: live parameters, EMA shadow, Adam moments
//! and the position of the batch stream.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use maniflow_core::flow::EmaShadow;
use maniflow_core::model::VelocityNet;
use maniflow_core::rng::{stream, Purpose, RngState};
use maniflow_core::tensor::{AdamState, ParamStore, Tensor};
use maniflow_core::train::TrainState;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::container::Container;

pub const KIND: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: ExperimentConfig,
    /// Completed optimisation steps.
    pub step: u64,
    pub seed: u64,
    /// Stream that draws the next training batch.
    pub rng: RngState,
    pub adam_step: u64,
    pub ema_decay: f64,
}

const GROUPS: [&str; 4] = ["theta", "ema", "adam.m", "adam.v"];

fn push_store(c: &mut Container, group: &str, store: &ParamStore) -> Result<()> {
    for (name, p) in store.iter() {
        c.push(format!("{group}/{name}"), p.value.shape(), p.value.data())?;
    }
    Ok(())
}

fn push_moments(c: &mut Container, group: &str, m: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
    for (name, t) in m {
        c.push(format!("{group}/{name}"), t.shape(), t.data())?;
    }
    Ok(())
}

pub fn to_container(config: &ExperimentConfig, state: &TrainState) -> Result<Container> {
    let meta = CheckpointMeta {
        config: config.clone(),
        step: state.step,
        seed: state.seed,
        rng: RngState::capture(state.seed, &stream(state.seed, Purpose::Batch, state.step)),
        adam_step: state.adam.step,
        ema_decay: state.ema.decay(),
    };
    let mut c = Container::new(KIND, serde_json::to_value(&meta)?);
    push_store(&mut c, GROUPS[0], &state.params)?;
    push_store(&mut c, GROUPS[1], state.ema.params())?;
    push_moments(&mut c, GROUPS[2], &state.adam.m)?;
    push_moments(&mut c, GROUPS[3], &state.adam.v)?;
    Ok(c)
}

pub fn save(dir: &Path, config: &ExperimentConfig, state: &TrainState) -> Result<()> {
    to_container(config, state)?.write(dir)
}

/// Reads the arrays of `group`, requiring exactly the names and shapes of
/// `template`.
fn read_group(c: &Container, group: &str, template: &ParamStore) -> Result<BTreeMap<String, Tensor<f32>>> {
    let prefix = format!("{group}/");
    let mut out = BTreeMap::new();
    for a in c.arrays().iter().filter(|a| a.name.starts_with(&prefix)) {
        let (shape, data) = c.get(&a.name)?;
        out.insert(a.name[prefix.len()..].to_string(), Tensor::new(shape.to_vec(), data.to_vec())?);
    }
    ensure!(out.len() == template.len(), "{group}: {} arrays, model has {} parameters", out.len(), template.len());
    for (name, p) in template.iter() {
        let t = out.get(name).with_context(|| format!("{group}: parameter {name} missing"))?;
        ensure!(t.shape() == p.value.shape(), "{group}/{name}: shape {:?} vs {:?}", t.shape(), p.value.shape());
    }
    Ok(out)
}

fn store_of(map: BTreeMap<String, Tensor<f32>>) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    for (name, t) in map {
        s.insert(name, t)?;
    }
    Ok(s)
}

pub fn from_container(c: &Container) -> Result<(ExperimentConfig, TrainState)> {
    ensure!(c.kind == KIND, "expected a checkpoint, found a {} container", c.kind);
    let meta: CheckpointMeta = serde_json::from_value(c.meta.clone()).context("checkpoint metadata")?;
    meta.config.validate()?;
    let expect_rng = RngState::capture(meta.seed, &stream(meta.seed, Purpose::Batch, meta.step));
    ensure!(meta.rng == expect_rng, "recorded batch stream does not match step {}", meta.step);
    let model_cfg = meta.config.model_config();
    // Names and shapes come from a throwaway initialisation.
    let (model, template) = VelocityNet::init(model_cfg, &mut stream(0, Purpose::Init, 0))?;
    let n_groups = GROUPS.iter().filter(|g| c.arrays().iter().any(|a| a.name.starts_with(&format!("{g}/")))).count();
    ensure!(
        c.arrays().len() == n_groups * template.len() && n_groups == GROUPS.len(),
        "checkpoint arrays do not match the configured model"
    );
    let params = store_of(read_group(c, GROUPS[0], &template)?)?;
    let ema = EmaShadow::from_params(store_of(read_group(c, GROUPS[1], &template)?)?, meta.ema_decay)?;
    let adam = AdamState {
        config: meta.config.train.adam,
        step: meta.adam_step,
        m: read_group(c, GROUPS[2], &template)?,
        v: read_group(c, GROUPS[3], &template)?,
    };
    let state = TrainState { model, params, ema, adam, step: meta.step, seed: meta.seed };
    Ok((meta.config, state))
}

pub fn load(dir: &Path) -> Result<(ExperimentConfig, TrainState)> {
    from_container(&Container::read(dir)?).with_context(|| format!("loading checkpoint {}", dir.display()))
}
